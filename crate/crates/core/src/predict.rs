//! Single-image inference, coordinate export and overlay rendering.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{read_image_file, resize_to};
use crate::error::{HcaError, Result};
use crate::heatmap::{decode_with_confidence, KeypointSet};
use crate::network::{Model, DOWNSAMPLE};
use crate::tensor::Tensor;

pub const PREDICTED_COLOR: [u8; 3] = [255, 40, 40];
pub const TRUTH_COLOR: [u8; 3] = [40, 220, 40];

/// One row of `PREFIX.coords.csv`, in source-image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscPrediction {
    pub disc: usize,
    pub row: f64,
    pub col: f64,
    /// Logistic of the channel peak; display only.
    pub confidence: f64,
    pub visible: u8,
}

/// Reads an `.img` file (with its spacing) or any 8/16-bit image the
/// `image` crate decodes, as grayscale in `[0, 1]` with spacing 1.
pub fn load_image(path: &Path) -> Result<(Tensor, f64)> {
    if path.extension().is_some_and(|e| e == "img") {
        return read_image_file(path);
    }
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => HcaError::io(path, io),
            other => HcaError::ingest(path, other.to_string()),
        })?
        .into_luma16();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
    Ok((Tensor::from_vec(&[h as usize, w as usize], data)?, 1.0))
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Resizes `image` (`H x W`) to the model input, runs the network and maps
/// decoded peaks back to source pixels. Always returns one row per disc.
pub fn predict_image(model: &Model, image: &Tensor, threshold: f64) -> Result<Vec<DiscPrediction>> {
    let (ih, iw) = model.config().input_size;
    let (resized, t) = resize_to(image, ih, iw)?;
    let out = model.forward(&resized.reshape(&[1, ih, iw])?)?;
    let (kp, peaks) = decode_with_confidence(&out.fused, threshold)?;
    let f = DOWNSAMPLE as f64;
    Ok(kp
        .coords
        .iter()
        .zip(&kp.visible)
        .zip(&peaks)
        .enumerate()
        .map(|(disc, ((c, &v), &peak))| {
            let [row, col] = if v { t.invert([c[0] * f, c[1] * f]) } else { *c };
            DiscPrediction {
                disc,
                row,
                col,
                confidence: logistic(peak),
                visible: v as u8,
            }
        })
        .collect())
}

pub fn write_coords_csv(path: &Path, rows: &[DiscPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HcaError::ingest(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| HcaError::ingest(path, e.to_string()))?;
    }
    w.flush().map_err(|e| HcaError::io(path, e))
}

pub fn read_coords_csv(path: &Path) -> Result<Vec<DiscPrediction>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HcaError::ingest(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| HcaError::ingest(path, e.to_string())))
        .collect()
}

/// 3x5 bitmaps for 0-9, one row per `u8`, high bit on the left.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

fn draw_label(img: &mut RgbImage, x: i64, y: i64, n: usize, color: [u8; 3]) {
    for (i, ch) in n.to_string().bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        let x0 = x + 4 * i as i64;
        for (dy, bits) in glyph.iter().enumerate() {
            for dx in 0..3 {
                if bits & (0b100 >> dx) != 0 {
                    put(img, x0 + dx, y + dy as i64, color);
                }
            }
        }
    }
}

fn draw_cross(img: &mut RgbImage, row: f64, col: f64, color: [u8; 3]) {
    let (y, x) = (row.round() as i64, col.round() as i64);
    for d in -2..=2 {
        put(img, x + d, y, color);
        put(img, x, y + d, color);
    }
}

/// Grayscale copy of `image` with predicted discs as red crosses labeled
/// by disc index and, when given, ground truth as green crosses.
pub fn render_overlay(image: &Tensor, predictions: &[DiscPrediction], truth: Option<&KeypointSet>) -> RgbImage {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (image.data()[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    if let Some(gt) = truth {
        for (c, &v) in gt.coords.iter().zip(&gt.visible) {
            if v {
                draw_cross(&mut img, c[0], c[1], TRUTH_COLOR);
            }
        }
    }
    for p in predictions.iter().filter(|p| p.visible == 1) {
        draw_cross(&mut img, p.row, p.col, PREDICTED_COLOR);
        draw_label(
            &mut img,
            p.col.round() as i64 + 3,
            p.row.round() as i64 - 2,
            p.disc,
            PREDICTED_COLOR,
        );
    }
    img
}

pub fn save_overlay(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => HcaError::io(path, io),
            other => HcaError::ingest(path, other.to_string()),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    #[test]
    fn logistic_values() {
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(2.0) - 0.880797077977882).abs() < 1e-15);
    }

    #[test]
    fn predictions_have_one_row_per_disc_and_match_decode() {
        let mut model = Model::new(&ModelConfig::tiny()).unwrap();
        let bias = model.params().find("fusion.bias").unwrap();
        model.params_mut().get_mut(bias).data_mut().fill(10.0);
        let image = Tensor::from_vec(&[64, 64], (0..4096).map(|i| (i % 13) as f64 / 13.0).collect()).unwrap();
        let rows = predict_image(&model, &image, 0.0).unwrap();
        assert_eq!(rows.len(), 11);
        let out = model.forward(&image.clone().reshape(&[1, 64, 64]).unwrap()).unwrap();
        let (kp, _) = decode_with_confidence(&out.fused, 0.0).unwrap();
        for (r, c) in rows.iter().zip(&kp.coords) {
            assert_eq!(r.visible, 1);
            assert_eq!([r.row, r.col], [c[0] * 4.0, c[1] * 4.0]);
        }
        let none = predict_image(&model, &image, f64::INFINITY).unwrap();
        assert!(none.iter().all(|r| r.visible == 0 && r.row == -1.0));
    }

    #[test]
    fn overlay_geometry_and_colors() {
        let image = Tensor::full(&[20, 30], 0.5);
        let preds = vec![DiscPrediction {
            disc: 10,
            row: 10.0,
            col: 5.0,
            confidence: 0.9,
            visible: 1,
        }];
        let gt = KeypointSet::new(vec![[3.0, 20.0]], vec![true], 1.0).unwrap();
        let img = render_overlay(&image, &preds, Some(&gt));
        assert_eq!(img.dimensions(), (30, 20));
        assert_eq!(img.get_pixel(5, 10).0, PREDICTED_COLOR);
        assert_eq!(img.get_pixel(20, 3).0, TRUTH_COLOR);
        assert_eq!(img.get_pixel(0, 19).0, [128, 128, 128]);
        // "1" of "10": top row of the glyph is 010
        assert_eq!(img.get_pixel(9, 8).0, PREDICTED_COLOR);
        assert_eq!(img.get_pixel(8, 8).0, [128, 128, 128]);
    }

    #[test]
    fn png_and_img_inputs_load() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_vec(&[2, 3], vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let p = dir.path().join("x.img");
        crate::data::write_image_file(&p, &t, 0.7).unwrap();
        let (back, s) = load_image(&p).unwrap();
        assert_eq!(s, 0.7);
        assert_eq!(back.shape(), &[2, 3]);
        let png = dir.path().join("x.png");
        image::GrayImage::from_raw(3, 2, vec![0, 51, 102, 153, 204, 255])
            .unwrap()
            .save(&png)
            .unwrap();
        let (img, s) = load_image(&png).unwrap();
        assert_eq!(s, 1.0);
        for (a, b) in img.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let err = load_image(&dir.path().join("missing.png")).unwrap_err();
        assert!(err.to_string().contains("missing.png"));
    }
}

use std::ffi::{CStr, CString};
use std::ptr;

use hcanet::checkpoint::Checkpoint;
use hcanet::predict::predict_image;
use hcanet::trainer::{TrainConfig, Trainer};
use hcanet::{ModelConfig, Tensor};
use hcanet_ffi::*;

fn checkpoint(dir: &std::path::Path) -> (CString, Checkpoint) {
    let cfg = TrainConfig {
        model: ModelConfig::tiny(),
        ..TrainConfig::default()
    };
    let ckpt = Trainer::new(cfg).unwrap().checkpoint();
    let path = dir.join("m.ckpt");
    ckpt.save(&path).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), ckpt)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(hca_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn load_query_predict_free() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ckpt) = checkpoint(dir.path());
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { hca_model_load(path.as_ptr(), &mut model) }, HcaStatus::Ok);
    assert!(!model.is_null());

    let (mut h, mut w, mut v) = (0usize, 0usize, 0usize);
    assert_eq!(unsafe { hca_model_input_size(model, &mut h, &mut w) }, HcaStatus::Ok);
    assert_eq!((h, w), (64, 64));
    assert_eq!(unsafe { hca_model_num_discs(model, &mut v) }, HcaStatus::Ok);
    assert_eq!(v, 11);

    let (ih, iw) = (80, 48);
    let pixels: Vec<f64> = (0..ih * iw).map(|i| ((i * 7) % 31) as f64 / 31.0).collect();
    let mut rows = vec![0.0; v];
    let mut cols = vec![0.0; v];
    let mut conf = vec![0.0; v];
    let mut vis = vec![9u8; v];
    let st = unsafe {
        hca_model_predict(
            model,
            pixels.as_ptr(),
            ih,
            iw,
            0.0,
            rows.as_mut_ptr(),
            cols.as_mut_ptr(),
            conf.as_mut_ptr(),
            vis.as_mut_ptr(),
            v,
        )
    };
    assert_eq!(st, HcaStatus::Ok, "{}", last_error());
    assert_eq!(last_error(), "");

    // same answer as the library path
    let m = hcanet::Model::from_parts(&ckpt.config.model, ckpt.params).unwrap();
    let image = Tensor::from_vec(&[ih, iw], pixels).unwrap();
    let expected = predict_image(&m, &image, 0.0).unwrap();
    for (i, e) in expected.iter().enumerate() {
        assert_eq!((rows[i], cols[i], conf[i], vis[i]), (e.row, e.col, e.confidence, e.visible));
    }
    unsafe { hca_model_free(model) };
    unsafe { hca_model_free(ptr::null_mut()) };
}

#[test]
fn errors_set_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = ptr::null_mut();
    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { hca_model_load(missing.as_ptr(), &mut model) }, HcaStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("none.ckpt"));

    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"HCA-CKPT 9\nxxxxxxxx").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { hca_model_load(bad.as_ptr(), &mut model) },
        HcaStatus::VersionMismatch
    );
    assert!(last_error().contains("HCA-CKPT 9"));

    assert_eq!(unsafe { hca_model_load(ptr::null(), &mut model) }, HcaStatus::NullPointer);

    let (path, _) = checkpoint(dir.path());
    assert_eq!(unsafe { hca_model_load(path.as_ptr(), &mut model) }, HcaStatus::Ok);
    let pixels = vec![2.0; 16];
    let mut buf = vec![0.0; 11];
    let mut vis = vec![0u8; 11];
    let call = |px: &[f64], len: usize, buf: &mut Vec<f64>, vis: &mut Vec<u8>| unsafe {
        let b = buf.as_mut_ptr();
        hca_model_predict(model, px.as_ptr(), 4, 4, 0.25, b, b, b, vis.as_mut_ptr(), len)
    };
    assert_eq!(call(&pixels, 11, &mut buf, &mut vis), HcaStatus::InvalidArgument);
    assert!(last_error().contains("[0, 1]"));
    assert_eq!(call(&[0.5; 16], 10, &mut buf, &mut vis), HcaStatus::InvalidArgument);
    let mut h = 0usize;
    assert_eq!(
        unsafe { hca_model_input_size(ptr::null(), &mut h, &mut h) },
        HcaStatus::NullPointer
    );
    unsafe { hca_model_free(model) };
}

#[test]
fn version_and_header() {
    let v = unsafe { CStr::from_ptr(hca_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/hcanet.h")).unwrap();
    for f in [
        "hca_model_load",
        "hca_model_free",
        "hca_model_input_size",
        "hca_model_num_discs",
        "hca_model_predict",
        "hca_last_error_message",
        "hca_version",
        "HCA_STATUS_VERSION_MISMATCH = 5",
        "typedef struct HcaModel HcaModel",
    ] {
        assert!(header.contains(f), "{f}");
    }
}

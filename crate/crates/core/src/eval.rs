//! Distance-to-target, false negative and false positive rates.

use serde::{Deserialize, Serialize};

use crate::data::NUM_DISCS;
use crate::error::{HcaError, Result};
use crate::heatmap::{decode_peaks, HeatmapStack, KeypointSet};

pub const DEFAULT_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiscOutcome {
    /// Visible and detected, with the distance in millimetres.
    Matched(f64),
    FalseNegative,
    FalsePositive,
    TrueNegative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub outcomes: Vec<DiscOutcome>,
}

/// Scores one prediction against image-space ground truth.
/// `scale_to_image` is image pixels per heatmap pixel.
pub fn score_sample(
    prediction: &HeatmapStack,
    gt: &KeypointSet,
    threshold: f64,
    scale_to_image: f64,
) -> Result<SampleRecord> {
    if prediction.channels() != NUM_DISCS || gt.len() != NUM_DISCS {
        return Err(HcaError::InputDomain(format!(
            "scoring needs {NUM_DISCS} discs, got {} predicted and {} labeled",
            prediction.channels(),
            gt.len()
        )));
    }
    if !(scale_to_image > 0.0) {
        return Err(HcaError::InputDomain(format!(
            "scale_to_image must be positive, got {scale_to_image}"
        )));
    }
    let decoded = decode_peaks(prediction, threshold)?;
    let outcomes = (0..NUM_DISCS)
        .map(|i| match (gt.visible[i], decoded.visible[i]) {
            (true, true) => {
                let p = decoded.coords[i];
                let g = gt.coords[i];
                let dr = p[0] * scale_to_image - g[0];
                let dc = p[1] * scale_to_image - g[1];
                DiscOutcome::Matched(dr.hypot(dc) * gt.spacing_mm)
            }
            (true, false) => DiscOutcome::FalseNegative,
            (false, true) => DiscOutcome::FalsePositive,
            (false, false) => DiscOutcome::TrueNegative,
        })
        .collect();
    Ok(SampleRecord { outcomes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscMetrics {
    pub count: usize,
    pub dtt_mean_mm: Option<f64>,
    pub fn_count: usize,
    pub fp_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when nothing was matched.
    pub dtt_mean_mm: Option<f64>,
    pub dtt_std_mm: Option<f64>,
    pub fnr_pct: f64,
    pub fpr_pct: f64,
    pub per_disc: Vec<DiscMetrics>,
    pub n_samples: usize,
    pub threshold: f64,
}

/// Pools per-sample records. FNR is over visible slots, FPR over invisible
/// slots (0 when there are none); DTT std is the population std.
pub fn aggregate(records: &[SampleRecord], threshold: f64) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(HcaError::InputDomain("no records to aggregate".into()));
    }
    let mut per_disc = vec![
        DiscMetrics {
            count: 0,
            dtt_mean_mm: None,
            fn_count: 0,
            fp_count: 0,
        };
        NUM_DISCS
    ];
    let mut disc_sums = vec![0.0; NUM_DISCS];
    let mut all = Vec::new();
    let (mut visible, mut invisible, mut fns, mut fps) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        if r.outcomes.len() != NUM_DISCS {
            return Err(HcaError::InputDomain(format!(
                "record has {} discs, expected {NUM_DISCS}",
                r.outcomes.len()
            )));
        }
        for (i, o) in r.outcomes.iter().enumerate() {
            match *o {
                DiscOutcome::Matched(d) => {
                    visible += 1;
                    per_disc[i].count += 1;
                    disc_sums[i] += d;
                    all.push(d);
                }
                DiscOutcome::FalseNegative => {
                    visible += 1;
                    fns += 1;
                    per_disc[i].fn_count += 1;
                }
                DiscOutcome::FalsePositive => {
                    invisible += 1;
                    fps += 1;
                    per_disc[i].fp_count += 1;
                }
                DiscOutcome::TrueNegative => invisible += 1,
            }
        }
    }
    for (m, s) in per_disc.iter_mut().zip(&disc_sums) {
        if m.count > 0 {
            m.dtt_mean_mm = Some(s / m.count as f64);
        }
    }
    let (mean, std) = if all.is_empty() {
        (None, None)
    } else {
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        (Some(mean), Some(var.sqrt()))
    };
    let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    Ok(MetricsReport {
        dtt_mean_mm: mean,
        dtt_std_mm: std,
        fnr_pct: pct(fns, visible),
        fpr_pct: pct(fps, invisible),
        per_disc,
        n_samples: records.len(),
        threshold,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `Method | DTT (mm) | FNR (%) | FPR (%)`, DTT as `mean(±std)`.
    pub fn table(&self, method: &str) -> String {
        let dtt = match (self.dtt_mean_mm, self.dtt_std_mm) {
            (Some(m), Some(s)) => format!("{m:.2}(±{s:.2})"),
            _ => "n/a".to_string(),
        };
        let w = method.len().max(6);
        let mut out = format!(
            "{:<w$} | {:>16} | {:>7} | {:>7}\n",
            "Method", "DTT (mm)", "FNR (%)", "FPR (%)"
        );
        out.push_str(&format!("{}-+-{}-+-{}-+-{}\n", "-".repeat(w), "-".repeat(16), "-".repeat(7), "-".repeat(7)));
        out.push_str(&format!(
            "{:<w$} | {:>16} | {:>7.2} | {:>7.2}\n",
            method, dtt, self.fnr_pct, self.fpr_pct
        ));
        out
    }
}

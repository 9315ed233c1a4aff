//! Training loop: RMSprop over the total loss, per-epoch validation,
//! `train_log.csv` and checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Decay, Tape};
use crate::checkpoint::Checkpoint;
use crate::data::{heatmap_keypoints, prepare_batch, Batch, SpineSample};
use crate::error::{HcaError, Result};
use crate::eval::{aggregate, score_sample, DEFAULT_THRESHOLD};
use crate::heatmap::{HeatmapRole, HeatmapStack, DEFAULT_SIGMA};
use crate::losses::{build_total_loss, LossConfig, ALPHA_FLOOR};
use crate::network::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,val_dtt_px,val_fnr,val_fpr";

const RMS_DECAY: f64 = 0.99;
const RMS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Rmsprop,
}

impl std::str::FromStr for Optimizer {
    type Err = HcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmsprop" => Ok(Optimizer::Rmsprop),
            other => Err(HcaError::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Target Gaussian width in heatmap pixels.
    pub heatmap_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 4,
            learning_rate: 2.5e-4,
            optimizer: Optimizer::Rmsprop,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            checkpoint_every: 50,
            seed: 0,
            heatmap_sigma: DEFAULT_SIGMA,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HcaError::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(HcaError::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.heatmap_sigma > 0.0) {
            return Err(HcaError::Config("heatmap_sigma must be positive".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// One `train_log.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean distance in heatmap pixels; `None` when nothing was detected.
    pub val_dtt_px: Option<f64>,
    pub val_fnr: f64,
    pub val_fpr: f64,
}

impl EpochRecord {
    fn csv_line(&self) -> String {
        let dtt = self.val_dtt_px.map_or("nan".to_string(), |d| d.to_string());
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_loss, dtt, self.val_fnr, self.val_fpr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_dtt_px: Option<f64>,
    pub model: Model,
    pub alpha: f64,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.history.last()
    }
}

/// Validation loss and metrics on a prepared batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub dtt_px: Option<f64>,
    pub fnr: f64,
    pub fpr: f64,
}

/// Optimizer and model state between epochs.
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    sq_avg: Vec<Tensor>,
    alpha: f64,
    alpha_sq: f64,
    epoch: usize,
    rng: ChaCha8Rng,
    best_val_dtt: Option<f64>,
    best_epoch: Option<usize>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model)?;
        let sq_avg = model
            .params()
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Ok(Self {
            alpha: config.loss.alpha,
            alpha_sq: 0.0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            model,
            sq_avg,
            epoch: 0,
            best_val_dtt: None,
            best_epoch: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let model = Model::from_parts(&ckpt.config.model, ckpt.params)?;
        if ckpt.sq_avg.len() != model.params().len() {
            return Err(HcaError::Config("optimizer state does not match the model".into()));
        }
        Ok(Self {
            config: ckpt.config,
            model,
            sq_avg: ckpt.sq_avg,
            alpha: ckpt.alpha,
            alpha_sq: ckpt.alpha_sq,
            epoch: ckpt.epoch,
            rng: ckpt.rng,
            best_val_dtt: ckpt.best_val_dtt,
            best_epoch: ckpt.best_epoch,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Current pair-weight decay (fixed unless `loss.learnable_alpha`).
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            best_val_dtt: self.best_val_dtt,
            best_epoch: self.best_epoch,
            params: self.model.params().clone(),
            sq_avg: self.sq_avg.clone(),
            alpha: self.alpha,
            alpha_sq: self.alpha_sq,
        }
    }

    pub fn prepare(&self, samples: &[SpineSample]) -> Result<Batch> {
        let refs: Vec<&SpineSample> = samples.iter().collect();
        prepare_batch(&refs, &self.config.model, self.config.heatmap_sigma)
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &Batch, epoch: usize, index: usize) -> Result<f64> {
        let learnable = self.config.loss.learnable_alpha;
        let mut tape = Tape::new();
        let binding = self.model.params().bind(&mut tape);
        let images = tape.leaf(batch.images.clone());
        let alpha_var = learnable.then(|| tape.leaf(Tensor::scalar(self.alpha)));
        let decay = alpha_var.map_or(Decay::Fixed(self.alpha), Decay::Node);
        let fv = self.model.forward_vars(&mut tape, &binding, images);
        let loss = build_total_loss(
            &mut tape,
            fv.fused,
            &fv.intermediates,
            &batch.targets,
            &batch.gt_heatmap,
            &batch.visible,
            &self.config.loss,
            decay,
            &mut self.rng,
        )?;
        if !tape.value(loss.mse).item().is_finite() {
            return Err(HcaError::NonFiniteLoss {
                term: "L_v",
                epoch,
                batch: index,
            });
        }
        if let Some(sk) = loss.skeleton {
            if !tape.value(sk).item().is_finite() {
                return Err(HcaError::NonFiniteLoss {
                    term: "L_sk",
                    epoch,
                    batch: index,
                });
            }
        }
        let value = tape.value(loss.total).item();
        let mut grads = tape.backward(loss.total);
        let lr = self.config.learning_rate;
        let vars = binding.vars().to_vec();
        for ((p, sq), var) in self
            .model
            .params_mut()
            .tensors_mut()
            .iter_mut()
            .zip(self.sq_avg.iter_mut())
            .zip(vars)
        {
            if let Some(g) = grads.take(var) {
                rmsprop(p.data_mut(), sq.data_mut(), g.data(), lr);
            }
        }
        if let Some(a) = alpha_var {
            if let Some(g) = grads.take(a) {
                let mut p = [self.alpha];
                let mut s = [self.alpha_sq];
                rmsprop(&mut p, &mut s, g.data(), lr);
                self.alpha = p[0].clamp(ALPHA_FLOOR, 1.0);
                self.alpha_sq = s[0];
            }
        }
        Ok(value)
    }

    /// Loss and metrics without updating anything. Stochastic prototypes
    /// draw from a generator fixed by the seed, not the training stream.
    pub fn evaluate(&self, batch: &Batch) -> Result<Evaluation> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_e7a1);
        let n = batch.len();
        let mut loss_sum = 0.0;
        let mut records = Vec::with_capacity(n);
        let indices: Vec<usize> = (0..n).collect();
        for chunk in indices.chunks(self.config.batch_size) {
            let sub = batch.select(chunk)?;
            let mut tape = Tape::new();
            let binding = self.model.params().bind(&mut tape);
            let images = tape.leaf(sub.images.clone());
            let fv = self.model.forward_vars(&mut tape, &binding, images);
            let loss = build_total_loss(
                &mut tape,
                fv.fused,
                &fv.intermediates,
                &sub.targets,
                &sub.gt_heatmap,
                &sub.visible,
                &self.config.loss,
                Decay::Fixed(self.alpha),
                &mut rng,
            )?;
            loss_sum += tape.value(loss.total).item() * chunk.len() as f64;
            let fused = tape.value(fv.fused);
            let (hh, hw) = self.config.model.heatmap_size();
            for (i, kp) in sub.keypoints.iter().enumerate() {
                let pred = HeatmapStack::new(fused.batch_item(i), HeatmapRole::Prediction)?;
                let mut gt = heatmap_keypoints(kp, hh, hw);
                gt.spacing_mm = 1.0;
                records.push(score_sample(&pred, &gt, DEFAULT_THRESHOLD, 1.0)?);
            }
        }
        let report = aggregate(&records, DEFAULT_THRESHOLD)?;
        Ok(Evaluation {
            loss: loss_sum / n as f64,
            dtt_px: report.dtt_mean_mm,
            fnr: report.fnr_pct,
            fpr: report.fpr_pct,
        })
    }

    /// Trains until `until_epoch` epochs are complete. An empty `val_set`
    /// validates on the training set.
    pub fn run(
        &mut self,
        train_set: &[SpineSample],
        val_set: &[SpineSample],
        out_dir: &Path,
        until_epoch: usize,
    ) -> Result<TrainReport> {
        if train_set.is_empty() {
            return Err(HcaError::InputDomain("training set is empty".into()));
        }
        fs::create_dir_all(out_dir).map_err(|e| HcaError::io(out_dir, e))?;
        let train = self.prepare(train_set)?;
        let val = if val_set.is_empty() {
            train.clone()
        } else {
            self.prepare(val_set)?
        };
        let log_path = out_dir.join(LOG_FILE);
        if self.epoch == 0 || !log_path.exists() {
            fs::write(&log_path, format!("{LOG_HEADER}\n")).map_err(|e| HcaError::io(&log_path, e))?;
        }
        let mut history = Vec::new();
        let mut order: Vec<usize> = (0..train.len()).collect();
        while self.epoch < until_epoch {
            let epoch = self.epoch + 1;
            order.sort_unstable();
            order.shuffle(&mut self.rng);
            let mut sum = 0.0;
            for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
                let batch = train.select(chunk)?;
                sum += self.step(&batch, epoch, b)? * chunk.len() as f64;
            }
            let ev = self.evaluate(&val)?;
            let record = EpochRecord {
                epoch,
                train_loss: sum / train.len() as f64,
                val_loss: ev.loss,
                val_dtt_px: ev.dtt_px,
                val_fnr: ev.fnr,
                val_fpr: ev.fpr,
            };
            self.epoch = epoch;
            let improved = match (ev.dtt_px, self.best_val_dtt) {
                (Some(d), Some(best)) => d < best,
                (Some(_), None) => true,
                _ => self.best_epoch.is_none(),
            };
            if improved {
                if ev.dtt_px.is_some() {
                    self.best_val_dtt = ev.dtt_px;
                }
                self.best_epoch = Some(epoch);
            }
            append_line(&log_path, &record.csv_line())?;
            let ckpt = self.checkpoint();
            if improved {
                ckpt.save(&out_dir.join("best.ckpt"))?;
            }
            if self.config.checkpoint_every > 0 && epoch % self.config.checkpoint_every == 0 {
                ckpt.save(&out_dir.join(format!("epoch_{epoch:04}.ckpt")))?;
            }
            ckpt.save(&out_dir.join("last.ckpt"))?;
            log::info!("{}", record.csv_line());
            history.push(record);
        }
        Ok(TrainReport {
            history,
            best_epoch: self.best_epoch,
            best_val_dtt_px: self.best_val_dtt,
            model: self.model.clone(),
            alpha: self.alpha,
        })
    }
}

/// `v = 0.99 v + 0.01 g^2`, `p -= lr g / (sqrt(v) + eps)`.
fn rmsprop(p: &mut [f64], sq: &mut [f64], g: &[f64], lr: f64) {
    for ((p, s), &g) in p.iter_mut().zip(sq.iter_mut()).zip(g) {
        *s = RMS_DECAY * *s + (1.0 - RMS_DECAY) * g * g;
        *p -= lr * g / (s.sqrt() + RMS_EPS);
    }
}

fn append_line(path: &PathBuf, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| HcaError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| HcaError::io(path, e))
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(
    config: &TrainConfig,
    train_set: &[SpineSample],
    val_set: &[SpineSample],
    out_dir: &Path,
) -> Result<TrainReport> {
    let mut t = Trainer::new(config.clone())?;
    t.run(train_set, val_set, out_dir, config.epochs)
}

/// Continues a checkpoint until `epochs` epochs are complete (the stored
/// target when `None`).
pub fn resume(
    checkpoint_path: &Path,
    train_set: &[SpineSample],
    val_set: &[SpineSample],
    out_dir: &Path,
    epochs: Option<usize>,
) -> Result<TrainReport> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let mut t = Trainer::from_checkpoint(ckpt)?;
    let until = epochs.unwrap_or(t.config.epochs);
    t.run(train_set, val_set, out_dir, until)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn tiny(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: 1e-3,
            model: ModelConfig::tiny(),
            checkpoint_every: 2,
            ..TrainConfig::default()
        }
    }

    fn data(n: usize) -> Vec<SpineSample> {
        generate_synthetic(&SynthConfig {
            count: n,
            ..SynthConfig::tiny()
        })
        .unwrap()
    }

    #[test]
    fn rmsprop_arithmetic() {
        let (mut p, mut s) = ([1.0], [0.0]);
        rmsprop(&mut p, &mut s, &[2.0], 0.1);
        assert!((s[0] - 0.04).abs() < 1e-15);
        assert!((p[0] - (1.0 - 0.1 * 2.0 / (0.2 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn one_epoch_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let r = train(&tiny(2), &data(4), &[], dir.path()).unwrap();
        assert_eq!(r.history.len(), 2);
        let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 3);
        for f in ["best.ckpt", "last.ckpt", "epoch_0002.ckpt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(!dir.path().join("epoch_0001.ckpt").exists());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny(1)
        };
        let r = train(&cfg, &data(4), &[], dir.path()).unwrap();
        assert_eq!(r.model.params(), Model::new(&cfg.model).unwrap().params());
    }

    #[test]
    fn non_finite_loss_names_the_term() {
        let mut t = Trainer::new(tiny(1)).unwrap();
        let mut batch = t.prepare(&data(2)).unwrap();
        batch.targets.data_mut()[0] = f64::NAN;
        match t.step(&batch, 1, 0) {
            Err(HcaError::NonFiniteLoss { term, .. }) => assert_eq!(term, "L_v"),
            other => panic!("{other:?}"),
        }
        let mut batch = t.prepare(&data(2)).unwrap();
        batch.gt_heatmap.data_mut()[0] = f64::INFINITY;
        match t.step(&batch, 1, 0) {
            Err(HcaError::NonFiniteLoss { term, .. }) => assert_eq!(term, "L_sk"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn learnable_alpha_moves_and_stays_clamped() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            loss: LossConfig {
                learnable_alpha: true,
                lambda_sk: 1.0,
                ..LossConfig::default()
            },
            learning_rate: 0.05,
            ..tiny(2)
        };
        let r = train(&cfg, &data(4), &[], dir.path()).unwrap();
        assert_ne!(r.alpha, 0.8);
        assert!((ALPHA_FLOOR..=1.0).contains(&r.alpha));
    }

    #[test]
    fn unwritable_out_dir_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        fs::write(&file, "x").unwrap();
        assert!(matches!(
            train(&tiny(1), &data(2), &[], &file.join("sub")),
            Err(HcaError::Io { .. })
        ));
    }
}

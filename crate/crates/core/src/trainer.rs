//! Adam training loop with seeded shuffling and augmentation, resumable
//! checkpoints, and test-set evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Mask, Slice};
use crate::loss::{composite_loss, unit_to_hu, LossBreakdown, LossConfig, TrainingSample};
use crate::metrics::{self, BlandAltman, EvalReport};
use crate::model::{build_network, Mode, ModelConfig, ModelParams};
use crate::phantom::{augment, PhantomCase, PhantomPair};
use crate::seed;
use crate::tensor::{Graph, Tensor};
use crate::weights::{load_weights, save_weights};

/// How the learning rate moves over the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `learning_rate` at epoch 1 down to `min_learning_rate`
    /// at the last epoch.
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub min_learning_rate: f64,
    /// Partial trailing batches are dropped so batch-norm statistics always
    /// come from full batches.
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub augment: bool,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Keep the weights of the epoch with the lowest validation loss and
    /// report those as the result of the run.
    pub select_best: bool,
    /// After each epoch, reset batch-norm running statistics to the average
    /// batch statistics of the unaugmented training set under the final
    /// weights of the epoch.
    pub recompute_bn_stats: bool,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            min_learning_rate: 1e-5,
            batch_size: 8,
            epochs: 300,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            augment: true,
            checkpoint_every: 50,
            select_best: true,
            recompute_bn_stats: true,
            loss: LossConfig::default(),
            model: ModelConfig::scaled(64, 4, 0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite non-negative number");
        }
        if !(self.min_learning_rate >= 0.0 && self.min_learning_rate <= self.learning_rate) {
            return bad("min_learning_rate must lie in [0, learning_rate]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("adam epsilon must be positive");
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Learning rate used throughout 1-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let span = self.epochs.saturating_sub(1).max(1) as f64;
                let t = (epoch.saturating_sub(1) as f64 / span).min(1.0);
                let (hi, lo) = (self.learning_rate, self.min_learning_rate);
                lo + 0.5 * (hi - lo) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// First and second moment estimates per trainable tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

/// One Adam update with bias correction. Returns `false` and leaves
/// everything untouched if any gradient is non-finite.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &IndexMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<bool> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Usage(format!("gradient for unknown tensor {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
            ));
        }
    }
    if grads.values().any(|g| !g.is_finite()) {
        return Ok(false);
    }
    let (b1, b2) = betas;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let n = g.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let p = params.get_mut(name).expect("checked above").data_mut();
        for i in 0..n {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub rmse: f64,
    pub bce: f64,
    pub l2: f64,
    /// Steps rejected for non-finite gradients.
    pub skipped_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_dice,rmse,bce,l2\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_dice, r.rmse, r.bce, r.l2
            ));
        }
        out
    }
}

/// Optimiser state saved next to a checkpoint's weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub epoch: usize,
    pub adam: AdamState,
    pub history: TrainHistory,
    /// Epoch whose weights sit in the `_best.cwt` file beside the checkpoint.
    #[serde(default)]
    pub best_epoch: Option<usize>,
}

pub fn checkpoint_paths(dir: &Path, epoch: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("checkpoint_{epoch:04}.cwt")),
        dir.join(format!("checkpoint_{epoch:04}.json")),
    )
}

/// Where the best-so-far weights of the checkpoint at `weights` are kept.
pub fn best_weights_path(weights: &Path) -> PathBuf {
    let stem = weights.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    weights.with_file_name(format!("{stem}_best.cwt"))
}

/// Weights of the epoch with the lowest validation loss so far.
#[derive(Clone, Debug)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_loss: f64,
    pub params: ModelParams,
}

/// Training state: parameters, optimiser moments and history so far.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub history: TrainHistory,
    pub best: Option<BestSnapshot>,
}

fn to_hu_slice(t: &[f64], like: &Slice) -> Slice {
    Slice {
        width: like.width,
        height: like.height,
        spacing: like.spacing,
        data: t.iter().map(|&u| unit_to_hu(u) as f32).collect(),
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = build_network(&cfg.model)?;
        Ok(Self {
            cfg,
            params,
            adam: AdamState::default(),
            history: TrainHistory::default(),
            best: None,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(cfg: TrainConfig, weights: &Path, sidecar: &Path) -> Result<Self> {
        cfg.validate()?;
        let params = load_weights(weights)?;
        if params.config().encoder_channels != cfg.model.encoder_channels
            || params.config().decoder_channels != cfg.model.decoder_channels
            || params.config().input_size != cfg.model.input_size
        {
            return Err(Error::Config(format!(
                "checkpoint {} does not match the configured model",
                weights.display()
            )));
        }
        let text = fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
        let state: CheckpointState =
            serde_json::from_str(&text).map_err(|e| Error::format(sidecar, e.to_string()))?;
        if state.history.epochs.len() != state.epoch {
            return Err(Error::format(sidecar, "history length disagrees with epoch"));
        }
        let best = match state.best_epoch {
            Some(epoch) => {
                let record = state
                    .history
                    .epochs
                    .get(epoch.wrapping_sub(1))
                    .ok_or_else(|| Error::format(sidecar, format!("best epoch {epoch} is not in the history")))?;
                Some(BestSnapshot {
                    epoch,
                    val_loss: record.val_loss,
                    params: load_weights(best_weights_path(weights))?,
                })
            }
            None => None,
        };
        Ok(Self {
            cfg,
            params,
            adam: state.adam,
            history: state.history,
            best,
        })
    }

    pub fn epoch(&self) -> usize {
        self.history.epochs.len()
    }

    /// The weights a finished run stands for: the best validation epoch when
    /// `select_best` is on, otherwise the latest.
    pub fn selected_params(&self) -> &ModelParams {
        match (&self.best, self.cfg.select_best) {
            (Some(b), true) => &b.params,
            _ => &self.params,
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let (w, s) = checkpoint_paths(dir, self.epoch());
        save_weights(&self.params, &w)?;
        if let Some(b) = &self.best {
            save_weights(&b.params, best_weights_path(&w))?;
        }
        let state = CheckpointState {
            epoch: self.epoch(),
            adam: self.adam.clone(),
            history: self.history.clone(),
            best_epoch: self.best.as_ref().map(|b| b.epoch),
        };
        let json = serde_json::to_string(&state).expect("checkpoint state serialises");
        fs::write(&s, json).map_err(|e| Error::io(&s, e))?;
        Ok((w, s))
    }

    fn batch_samples(&self, train: &[PhantomPair], idx: &[usize], epoch: usize) -> Vec<TrainingSample> {
        let fill = -1000.0;
        let aug_root = seed::derive_indexed(self.cfg.seed, "augment", epoch as u64);
        idx.par_iter()
            .map(|&i| {
                if self.cfg.augment {
                    augment(&train[i], seed::derive_indexed(aug_root, "sample", i as u64), fill).to_sample()
                } else {
                    train[i].to_sample()
                }
            })
            .collect()
    }

    /// One optimisation step on a stacked batch; returns the loss breakdown.
    pub fn step(&mut self, batch: &TrainingSample, epoch: usize, batch_index: usize) -> Result<(LossBreakdown, bool)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.constant(batch.ct.clone());
        let out = self.params.forward(&mut g, &bound, x, Mode::Train)?;
        let terms = composite_loss(&mut g, out.output, batch, &bound.conv_weights(), &self.cfg.loss)?;
        let b = terms.breakdown(&g);
        if !b.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batch_index,
            });
        }
        let mut grads = g.backward(terms.total)?;
        let named: IndexMap<String, Tensor> = bound
            .iter()
            .map(|(name, v)| {
                let t = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
                (name.to_string(), t)
            })
            .collect();
        let applied = adam_step(
            &mut self.params,
            &named,
            &mut self.adam,
            self.cfg.learning_rate_at(epoch),
            (self.cfg.beta1, self.cfg.beta2),
            self.cfg.epsilon,
        )?;
        if applied {
            self.params.update_running_stats(&out.bn_stats);
        }
        Ok((b, applied))
    }

    /// Run one epoch over `train`, then score `val`.
    pub fn run_epoch(&mut self, train: &[PhantomPair], val: &[PhantomPair]) -> Result<&EpochRecord> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Usage("training needs non-empty train and validation sets".into()));
        }
        let epoch = self.epoch() + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive_indexed(self.cfg.seed, "shuffle", epoch as u64)));
        let bs = self.cfg.batch_size.min(train.len());
        let (mut sums, mut batches, mut skipped) = ([0.0f64; 4], 0usize, 0usize);
        for (bi, idx) in order.chunks_exact(bs).enumerate() {
            let samples = self.batch_samples(train, idx, epoch);
            let refs: Vec<&TrainingSample> = samples.iter().collect();
            let batch = TrainingSample::stack(&refs)?;
            let (b, applied) = self.step(&batch, epoch, bi + 1)?;
            for (s, v) in sums.iter_mut().zip([b.total, b.rmse, b.bce, b.l2]) {
                *s += v;
            }
            batches += 1;
            skipped += usize::from(!applied);
        }
        if self.cfg.recompute_bn_stats {
            let xs = order
                .chunks_exact(bs)
                .map(|idx| {
                    let samples: Vec<TrainingSample> = idx.iter().map(|&i| train[i].to_sample()).collect();
                    let refs: Vec<&TrainingSample> = samples.iter().collect();
                    Ok(TrainingSample::stack(&refs)?.ct)
                })
                .collect::<Result<Vec<Tensor>>>()?;
            self.params.recompute_running_stats(&xs)?;
        }
        let (val_loss, val_dice) = self.validate(val)?;
        if self.cfg.select_best && self.best.as_ref().is_none_or(|b| val_loss < b.val_loss) {
            self.best = Some(BestSnapshot {
                epoch,
                val_loss,
                params: self.params.clone(),
            });
        }
        let n = batches as f64;
        self.history.epochs.push(EpochRecord {
            epoch,
            train_loss: sums[0] / n,
            val_loss,
            val_dice,
            rmse: sums[1] / n,
            bce: sums[2] / n,
            l2: sums[3] / n,
            skipped_steps: skipped,
        });
        Ok(self.history.epochs.last().expect("just pushed"))
    }

    /// Inference-mode loss and mean Dice over `val`.
    pub fn validate(&self, val: &[PhantomPair]) -> Result<(f64, f64)> {
        let samples: Vec<TrainingSample> = val.iter().map(PhantomPair::to_sample).collect();
        let refs: Vec<&TrainingSample> = samples.iter().collect();
        let batch = TrainingSample::stack(&refs)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.constant(batch.ct.clone());
        let out = self.params.forward(&mut g, &bound, x, Mode::Infer)?;
        let terms = composite_loss(&mut g, out.output, &batch, &bound.conv_weights(), &self.cfg.loss)?;
        let loss = g.value(terms.total).data()[0];
        let pred = g.value(out.output).data();
        let per = pred.len() / val.len();
        let v_th = self.cfg.loss.v_th_hu() as f32;
        let mut dice_sum = 0.0;
        for (k, pair) in val.iter().enumerate() {
            let hu = to_hu_slice(&pred[k * per..(k + 1) * per], &pair.ct);
            let seg = metrics::threshold_segment(&hu, v_th, &pair.heart_mask)?;
            dice_sum += metrics::dice(&seg, &pair.chamber_mask)?;
        }
        Ok((loss, dice_sum / val.len() as f64))
    }

    /// Train until `cfg.epochs` epochs are complete, checkpointing into
    /// `checkpoint_dir` at the configured cadence. `on_epoch` sees each record.
    pub fn fit(
        &mut self,
        train: &[PhantomPair],
        val: &[PhantomPair],
        checkpoint_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        while self.epoch() < self.cfg.epochs {
            let record = self.run_epoch(train, val)?.clone();
            on_epoch(&record);
            if let Some(dir) = checkpoint_dir {
                let every = self.cfg.checkpoint_every;
                if (every > 0 && record.epoch % every == 0) || record.epoch == self.cfg.epochs {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        Ok(())
    }
}

/// Train from scratch without checkpoints.
pub fn train(train_set: &[PhantomPair], val_set: &[PhantomPair], cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    let mut t = Trainer::new(cfg.clone())?;
    t.fit(train_set, val_set, None, |_| {})?;
    Ok((t.selected_params().clone(), t.history))
}

/// Predict CECT (HU) for each slice of each case.
pub fn predict_cases(params: &ModelParams, cases: &[PhantomCase]) -> Result<Vec<Vec<Slice>>> {
    cases
        .par_iter()
        .map(|case| {
            case.slices
                .iter()
                .map(|p| {
                    let out = params.infer(&p.to_sample().ct)?;
                    Ok(to_hu_slice(out.data(), &p.ct))
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub v_th_hu: f64,
    pub psnr_peak: f64,
    pub nmi_bins: usize,
    pub slice_thickness_mm: f32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            v_th_hu: 300.0,
            psnr_peak: metrics::DEFAULT_PSNR_PEAK,
            nmi_bins: metrics::DEFAULT_NMI_BINS,
            slice_thickness_mm: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub case: usize,
    pub slice: usize,
    pub nmi: f64,
    #[serde(with = "metrics::float_repr")]
    pub psnr_db: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub case: usize,
    pub predicted_ml: f64,
    pub true_ml: f64,
    pub dv_percent: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub slices: Vec<SliceScore>,
    pub volumes: Vec<VolumeScore>,
    pub bland_altman: Option<BlandAltman>,
    /// Threshold segmentation of each predicted slice.
    pub masks: Vec<Vec<Mask>>,
}

/// Score `predictions` (HU, one per slice) against `cases`.
pub fn evaluate_predictions(cases: &[PhantomCase], predictions: &[Vec<Slice>], opts: &EvalOptions) -> Result<Evaluation> {
    if cases.is_empty() {
        return Err(Error::Usage("evaluation needs at least one case".into()));
    }
    if predictions.len() != cases.len()
        || cases.iter().zip(predictions).any(|(c, p)| c.slices.len() != p.len())
    {
        return Err(Error::Usage("one prediction per test slice is required".into()));
    }
    let mut slices = Vec::new();
    let mut volumes = Vec::new();
    let mut masks = Vec::new();
    for (case, preds) in cases.iter().zip(predictions) {
        let mut pred_px_mm2 = 0.0;
        let mut case_masks = Vec::new();
        for (k, (truth, pred)) in case.slices.iter().zip(preds).enumerate() {
            let seg = metrics::threshold_segment(pred, opts.v_th_hu as f32, &truth.heart_mask)?;
            slices.push(SliceScore {
                case: case.index,
                slice: k,
                nmi: metrics::nmi(pred, &truth.cect, Some(&truth.heart_mask), opts.nmi_bins)?,
                psnr_db: metrics::psnr(pred, &truth.cect, Some(&truth.heart_mask), opts.psnr_peak)?,
                dice: metrics::dice(&seg, &truth.chamber_mask)?,
            });
            pred_px_mm2 += seg.count() as f64 * truth.ct.pixel_area_mm2();
            case_masks.push(seg);
        }
        let predicted_ml = pred_px_mm2 * f64::from(opts.slice_thickness_mm) / 1000.0;
        let true_ml = case.chamber_volume_ml(opts.slice_thickness_mm);
        volumes.push(VolumeScore {
            case: case.index,
            predicted_ml,
            true_ml,
            dv_percent: metrics::volume_percent_error(predicted_ml, true_ml)?,
        });
        masks.push(case_masks);
    }
    let col = |f: fn(&SliceScore) -> f64| slices.iter().map(f).collect::<Vec<_>>();
    let (nmi, nmi_sd) = metrics::mean_sd(&col(|s| s.nmi));
    let (psnr_db, psnr_sd) = metrics::mean_sd(&col(|s| s.psnr_db));
    let (dice, dice_sd) = metrics::mean_sd(&col(|s| s.dice));
    let dv: Vec<f64> = volumes.iter().map(|v| v.dv_percent).collect();
    let (dv_percent, dv_percent_sd) = metrics::mean_sd(&dv);
    let pred_v: Vec<f64> = volumes.iter().map(|v| v.predicted_ml).collect();
    let true_v: Vec<f64> = volumes.iter().map(|v| v.true_ml).collect();
    let corr = metrics::pearson(&pred_v, &true_v).ok();
    let ba = metrics::bland_altman(&pred_v, &true_v).ok();
    let report = EvalReport {
        nmi,
        nmi_sd,
        psnr_db,
        psnr_sd,
        dice,
        dice_sd,
        dv_percent,
        dv_percent_sd,
        pearson_rho: corr.map(|c| c.rho),
        pearson_p: corr.map(|c| c.p_value),
        bland_altman: ba.as_ref().map(Into::into),
        slices: slices.len(),
        volumes: volumes.len(),
        psnr_peak: opts.psnr_peak,
        nmi_bins: opts.nmi_bins,
        v_th_hu: opts.v_th_hu,
    };
    Ok(Evaluation {
        report,
        slices,
        volumes,
        bland_altman: ba,
        masks,
    })
}

/// Infer every test slice with `params` and score it.
pub fn evaluate(params: &ModelParams, cases: &[PhantomCase], opts: &EvalOptions) -> Result<(Evaluation, Vec<Vec<Slice>>)> {
    let predictions = predict_cases(params, cases)?;
    Ok((evaluate_predictions(cases, &predictions, opts)?, predictions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{build_dataset, PhantomConfig};

    fn single(name: &str, value: f64) -> (ModelParams, IndexMap<String, Tensor>) {
        let p = build_network(&ModelConfig::scaled(16, 8, 1)).unwrap();
        let g = IndexMap::from([(name.to_string(), Tensor::full(p.get(name).unwrap().shape(), value))]);
        (p, g)
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let (mut p, g) = single("enc1/conv/bias", 0.0);
        let before = p.clone();
        let mut st = AdamState::default();
        st.m.insert("enc1/conv/bias".into(), vec![1.0; 2]);
        st.v.insert("enc1/conv/bias".into(), vec![1.0; 2]);
        assert!(adam_step(&mut p, &g, &mut st, 0.1, (0.9, 0.999), 1e-8).unwrap());
        // moments decay, but the bias-corrected first moment is non-zero so
        // the step is m̂/(√v̂+ε): check the moment arithmetic exactly
        assert_eq!(st.m["enc1/conv/bias"], vec![0.9; 2]);
        assert!((st.v["enc1/conv/bias"][0] - 0.999).abs() < 1e-15);
        let mut fresh = AdamState::default();
        let mut q = before.clone();
        adam_step(&mut q, &g, &mut fresh, 0.1, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn constant_gradient_steps_approach_lr_times_sign() {
        let (mut p, g) = single("enc1/conv/bias", -3.7);
        let mut st = AdamState::default();
        let lr = 0.01;
        let mut last = 0.0;
        for _ in 0..200 {
            let before = p.get("enc1/conv/bias").unwrap().data()[0];
            adam_step(&mut p, &g, &mut st, lr, (0.9, 0.999), 1e-8).unwrap();
            last = p.get("enc1/conv/bias").unwrap().data()[0] - before;
        }
        // m̂ = g and v̂ = g² exactly for a constant gradient
        assert!((last - lr).abs() < 1e-9, "{last}");
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let (mut p, g) = single("enc1/conv/bias", f64::NAN);
        let before = p.clone();
        let mut st = AdamState::default();
        assert!(!adam_step(&mut p, &g, &mut st, 0.1, (0.9, 0.999), 1e-8).unwrap());
        assert_eq!(p, before);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn quadratic_descends() {
        // f(w) = w², w₀ = 1 on one bias entry
        let (mut p, _) = single("enc1/conv/bias", 0.0);
        p.get_mut("enc1/conv/bias").unwrap().data_mut()[0] = 1.0;
        let mut st = AdamState::default();
        let w0 = 1.0;
        let grad = Tensor::new(vec![2], vec![2.0 * w0, 0.0]).unwrap();
        let g = IndexMap::from([("enc1/conv/bias".to_string(), grad)]);
        adam_step(&mut p, &g, &mut st, 0.1, (0.9, 0.999), 1e-8).unwrap();
        assert!(p.get("enc1/conv/bias").unwrap().data()[0] < w0);
    }

    fn tiny_data(n: usize) -> Vec<PhantomPair> {
        let cfg = PhantomConfig {
            image_size: 64,
            noise_sigma: 0.0,
            ..Default::default()
        };
        build_dataset(&cfg, n, 1, 16, 3)
            .unwrap()
            .into_iter()
            .flat_map(|c| c.slices)
            .collect()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            epochs: 2,
            model: ModelConfig::scaled(16, 8, 5),
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_trainable_weights() {
        let data = tiny_data(4);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            min_learning_rate: 0.0,
            epochs: 1,
            ..tiny_cfg()
        };
        let init = build_network(&cfg.model).unwrap();
        let (p, h) = train(&data[..3], &data[3..], &cfg).unwrap();
        for name in init.trainable_names() {
            assert_eq!(p.get(&name), init.get(&name), "{name}");
        }
        assert_eq!(h.epochs.len(), 1);
    }

    #[test]
    fn identical_runs_match_and_resume_is_exact() {
        let data = tiny_data(5);
        let cfg = TrainConfig { epochs: 3, ..tiny_cfg() };
        let (a, ha) = train(&data[..4], &data[4..], &cfg).unwrap();
        let (b, hb) = train(&data[..4], &data[4..], &cfg).unwrap();
        assert_eq!(crate::weights::to_bytes(&a), crate::weights::to_bytes(&b));
        assert_eq!(ha, hb);

        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(TrainConfig { epochs: 1, ..cfg.clone() }).unwrap();
        t.fit(&data[..4], &data[4..], Some(dir.path()), |_| {}).unwrap();
        let (w, s) = checkpoint_paths(dir.path(), 1);
        assert!(best_weights_path(&w).exists());
        let mut r = Trainer::resume(cfg.clone(), &w, &s).unwrap();
        r.fit(&data[..4], &data[4..], None, |_| {}).unwrap();
        assert_eq!(crate::weights::to_bytes(r.selected_params()), crate::weights::to_bytes(&a));
        assert_eq!(r.history, ha);

        let mut full = Trainer::new(cfg.clone()).unwrap();
        full.fit(&data[..4], &data[4..], None, |_| {}).unwrap();
        assert_eq!(crate::weights::to_bytes(&r.params), crate::weights::to_bytes(&full.params));
        assert_eq!(r.best.as_ref().map(|b| b.epoch), full.best.as_ref().map(|b| b.epoch));
    }

    #[test]
    fn selection_keeps_the_lowest_validation_loss() {
        let data = tiny_data(5);
        let mut t = Trainer::new(TrainConfig { epochs: 4, ..tiny_cfg() }).unwrap();
        t.fit(&data[..4], &data[4..], None, |_| {}).unwrap();
        let b = t.best.as_ref().unwrap();
        let min = t.history.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(b.val_loss, min);
        assert_eq!(t.history.epochs[b.epoch - 1].val_loss, min);

        let mut off = Trainer::new(TrainConfig { epochs: 2, select_best: false, ..tiny_cfg() }).unwrap();
        off.fit(&data[..4], &data[4..], None, |_| {}).unwrap();
        assert!(off.best.is_none());
        assert!(std::ptr::eq(off.selected_params(), &off.params));
    }

    #[test]
    fn cosine_schedule_runs_from_peak_to_floor() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            min_learning_rate: 1e-5,
            epochs: 11,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(1), 1e-3);
        assert!((cfg.learning_rate_at(11) - 1e-5).abs() < 1e-18);
        assert!((cfg.learning_rate_at(6) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        for e in 1..11 {
            assert!(cfg.learning_rate_at(e + 1) <= cfg.learning_rate_at(e));
        }
        let flat = TrainConfig { lr_schedule: LrSchedule::Constant, ..cfg };
        assert_eq!(flat.learning_rate_at(7), 1e-3);
    }

    #[test]
    fn ground_truth_as_prediction_scores_perfectly() {
        let cfg = PhantomConfig {
            image_size: 64,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let cases = build_dataset(&cfg, 3, 2, 64, 1).unwrap();
        let preds: Vec<Vec<Slice>> = cases
            .iter()
            .map(|c| c.slices.iter().map(|p| p.cect.clone()).collect())
            .collect();
        let e = evaluate_predictions(&cases, &preds, &EvalOptions::default()).unwrap();
        assert_eq!(e.report.dice, 1.0);
        assert_eq!(e.report.psnr_db, f64::INFINITY);
        assert!((e.report.nmi - 1.0).abs() < 1e-12);
        assert_eq!(e.report.dv_percent, 0.0);
        assert!((e.report.pearson_rho.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(e.report.slices, 6);
    }
}

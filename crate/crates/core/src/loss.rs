//! Composite synthesis objective:
//!
//! ```text
//! L = α·RMSE(ŷ, y | H) + β·BCE(sig(ŷ), y⁰¹ | H) + λ/2·Σ‖W‖²
//! sig(x) = 1 / (1 + exp(−s·(x − v_th)))
//! ```
//!
//! `| H` restricts both pixel reductions to the heart mask: the RMSE mean
//! runs over mask pixels and the cross-entropy sums over them. The
//! prediction is gated by the mask before anything else reads it, so pixels
//! outside the heart have no influence on the value or on any gradient.
//! Both terms are computed per image and averaged over the batch.
//!
//! All intensities here are normalised HU, see [`hu_to_unit`].

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const HU_OFFSET: f64 = 1024.0;
pub const HU_RANGE: f64 = 4095.0;
pub const LOG_FLOOR: f64 = 1e-12;

/// Map HU onto the network scale, `[-1024, 3071] → [0, 1]`.
pub fn hu_to_unit(hu: f64) -> f64 {
    (hu + HU_OFFSET) / HU_RANGE
}

pub fn unit_to_hu(u: f64) -> f64 {
    u * HU_RANGE - HU_OFFSET
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BceReduction {
    /// Sum over mask pixels.
    Sum,
    /// Mean over mask pixels.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Sigmoid steepness, per normalised-HU unit.
    pub s: f64,
    /// Sigmoid centre in normalised HU.
    pub v_th: f64,
    pub bce_reduction: BceReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.01,
            lambda: 0.001,
            s: 10.0,
            v_th: hu_to_unit(300.0),
            bce_reduction: BceReduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::Config(format!("s must be positive, got {}", self.s)));
        }
        if !self.v_th.is_finite() {
            return Err(Error::Config("v_th must be finite".into()));
        }
        Ok(())
    }

    pub fn v_th_hu(&self) -> f64 {
        unit_to_hu(self.v_th)
    }
}

/// Input, target and masks for a batch of slices, each `[N, 1, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub ct: Tensor,
    pub cect: Tensor,
    pub chamber_mask: Tensor,
    pub heart_mask: Tensor,
}

impl TrainingSample {
    pub fn validate(&self) -> Result<()> {
        let shape = self.ct.shape();
        for (name, t) in [
            ("cect", &self.cect),
            ("chamber_mask", &self.chamber_mask),
            ("heart_mask", &self.heart_mask),
        ] {
            if t.shape() != shape {
                return Err(Error::dim(
                    "training sample",
                    format!("{name} {:?} vs ct {shape:?}", t.shape()),
                ));
            }
        }
        for (name, t) in [("chamber_mask", &self.chamber_mask), ("heart_mask", &self.heart_mask)] {
            if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Usage(format!("{name} is not {{0,1}}-valued")));
            }
        }
        let outside = self
            .chamber_mask
            .data()
            .iter()
            .zip(self.heart_mask.data())
            .any(|(&c, &h)| c == 1.0 && h == 0.0);
        if outside {
            return Err(Error::Usage("chamber mask extends outside the heart mask".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.ct.shape()[0]
    }

    /// Concatenate samples along the batch axis.
    pub fn stack(items: &[&TrainingSample]) -> Result<TrainingSample> {
        let pick = |f: fn(&TrainingSample) -> &Tensor| -> Result<Tensor> {
            let ts: Vec<&Tensor> = items.iter().map(|s| f(s)).collect();
            Tensor::stack_batch(&ts)
        };
        Ok(TrainingSample {
            ct: pick(|s| &s.ct)?,
            cect: pick(|s| &s.cect)?,
            chamber_mask: pick(|s| &s.chamber_mask)?,
            heart_mask: pick(|s| &s.heart_mask)?,
        })
    }
}

fn per_sample_counts(mask: &Tensor) -> Vec<f64> {
    let n = mask.shape()[0];
    let per = mask.len() / n;
    mask.data()
        .chunks(per)
        .map(|c| c.iter().filter(|&&v| v != 0.0).count() as f64)
        .collect()
}

fn masked_constant(t: &Tensor, mask: &Tensor) -> Tensor {
    Tensor::from_fn(t.shape(), |i| if mask.data()[i] != 0.0 { t.data()[i] } else { 0.0 })
}

fn check_shapes(op: &'static str, g: &Graph, pred: Var, others: &[&Tensor]) -> Result<()> {
    let shape = g.value(pred).shape();
    if shape.len() != 4 {
        return Err(Error::dim(op, format!("prediction must be [N,1,S,S], got {shape:?}")));
    }
    for t in others {
        if t.shape() != shape {
            return Err(Error::dim(op, format!("{:?} vs prediction {shape:?}", t.shape())));
        }
    }
    Ok(())
}

/// Masked RMSE per image, averaged over the batch. An image with an empty
/// mask contributes 0.
pub fn rmse_term(g: &mut Graph, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    check_shapes("rmse_term", g, pred, &[target, mask])?;
    let n = target.shape()[0];
    let counts = per_sample_counts(mask);
    if counts.iter().any(|&c| c == 0.0) {
        warn!("rmse_term: empty mask in batch, that image contributes 0");
    }
    let pm = g.masked_select(pred, mask)?;
    let t = g.constant(masked_constant(target, mask));
    let d = g.sub(pm, t)?;
    let sq = g.square(d);
    let sums = g.sum_per_sample(sq);
    let inv = g.constant(Tensor::new(
        vec![n],
        counts.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect(),
    )?);
    let mse = g.mul(sums, inv)?;
    let rmse = g.sqrt(mse)?;
    let total = g.sum(rmse);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Cross-entropy between the chamber labels and the steep-sigmoid of the
/// prediction over mask pixels (summed or averaged per image, then averaged
/// over the batch). Log arguments are floored at [`LOG_FLOOR`].
pub fn bce_term(
    g: &mut Graph,
    pred: Var,
    chamber_mask: &Tensor,
    mask: &Tensor,
    s: f64,
    v_th: f64,
    reduction: BceReduction,
) -> Result<Var> {
    check_shapes("bce_term", g, pred, &[chamber_mask, mask])?;
    let n = mask.shape()[0];
    let pm = g.masked_select(pred, mask)?;
    let sig = g.steep_sigmoid(pm, s, v_th)?;
    let log_p = g.ln_clamped(sig, LOG_FLOOR);
    let one_minus = g.affine(sig, -1.0, 1.0);
    let log_q = g.ln_clamped(one_minus, LOG_FLOOR);
    let y = g.constant(chamber_mask.clone());
    let not_y = g.constant(Tensor::from_fn(chamber_mask.shape(), |i| {
        1.0 - chamber_mask.data()[i]
    }));
    let a = g.mul(log_p, y)?;
    let b = g.mul(log_q, not_y)?;
    let ll = g.add(a, b)?;
    let ll = g.masked_select(ll, mask)?;
    let per = g.sum_per_sample(ll);
    let per = match reduction {
        BceReduction::Sum => per,
        BceReduction::Mean => {
            let counts = per_sample_counts(mask);
            let inv = g.constant(Tensor::new(
                vec![n],
                counts.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect(),
            )?);
            g.mul(per, inv)?
        }
    };
    let total = g.sum(per);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// `λ/2 · Σ‖W‖²` over the given kernels.
pub fn l2_term(g: &mut Graph, weights: &[Var], lambda: f64) -> Result<Var> {
    let mut acc = g.constant(Tensor::scalar(0.0));
    for &w in weights {
        let sq = g.square(w);
        let s = g.sum(sq);
        acc = g.add(acc, s)?;
    }
    Ok(g.scale(acc, 0.5 * lambda))
}

/// Graph nodes of each weighted contribution and their total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub rmse: Var,
    pub bce: Var,
    pub l2: Var,
}

/// Values of the weighted contributions: `total = rmse + bce + l2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rmse: f64,
    pub bce: f64,
    pub l2: f64,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown {
            total: v(self.total),
            rmse: v(self.rmse),
            bce: v(self.bce),
            l2: v(self.l2),
        }
    }
}

pub fn composite_loss(
    g: &mut Graph,
    pred: Var,
    sample: &TrainingSample,
    conv_weights: &[Var],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let rmse = rmse_term(g, pred, &sample.cect, &sample.heart_mask)?;
    let rmse = g.scale(rmse, cfg.alpha);
    let bce = bce_term(
        g,
        pred,
        &sample.chamber_mask,
        &sample.heart_mask,
        cfg.s,
        cfg.v_th,
        cfg.bce_reduction,
    )?;
    let bce = g.scale(bce, cfg.beta);
    let l2 = l2_term(g, conv_weights, cfg.lambda)?;
    let data = g.add(rmse, bce)?;
    let total = g.add(data, l2)?;
    Ok(LossTerms {
        total,
        rmse,
        bce,
        l2,
    })
}

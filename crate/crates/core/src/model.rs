//! Deconvolutional encoder/decoder for CT → CECT synthesis.
//!
//! Layout for an `S×S` single-channel input (layers numbered from 1):
//!
//! ```text
//! enc1..enc8   conv3×3 → BN → ReLU, stride 2 on enc2/4/6/8   S → S/16
//! mid          conv3×3 → BN → ReLU                           S/16
//! dec1..dec8   odd: tconv2×2 stride 2, even: conv3×3,
//!              each → BN → ReLU                              S/16 → S
//! head         conv3×3, one filter, linear
//! skip         conv1×1 on the network input, added to head
//! ```

use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{BatchStats, BnMode, Graph, Tensor, Var};

pub const ENCODER_DEPTH: usize = 8;
pub const DECODER_DEPTH: usize = 8;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub encoder_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub decoder_channels: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            encoder_channels: vec![16, 16, 32, 32, 64, 64, 128, 128],
            bottleneck_channels: 128,
            decoder_channels: vec![128, 64, 64, 32, 32, 16, 16, 16],
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full-width channel plan divided by `factor` (at least one channel each).
    pub fn scaled(input_size: usize, factor: usize, seed: u64) -> Self {
        let base = Self::default();
        let div = |c: usize| (c / factor).max(1);
        Self {
            input_size,
            encoder_channels: base.encoder_channels.iter().map(|&c| div(c)).collect(),
            bottleneck_channels: div(base.bottleneck_channels),
            decoder_channels: base.decoder_channels.iter().map(|&c| div(c)).collect(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.len() != ENCODER_DEPTH {
            return Err(Error::Config(format!(
                "encoder needs {ENCODER_DEPTH} layers, got {}",
                self.encoder_channels.len()
            )));
        }
        if self.decoder_channels.len() != DECODER_DEPTH {
            return Err(Error::Config(format!(
                "decoder needs {DECODER_DEPTH} layers, got {}",
                self.decoder_channels.len()
            )));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::Config(format!(
                "input size {} is not a positive multiple of 16",
                self.input_size
            )));
        }
        let all = self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .chain(std::iter::once(&self.bottleneck_channels));
        if all.into_iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// The static layer plan this configuration expands to.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let mut ch = 1;
        let mut size = self.input_size;
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            let stride = if (i + 1) % 2 == 0 { 2 } else { 1 };
            size /= stride;
            out.push(LayerSpec {
                name: format!("enc{}", i + 1),
                kind: LayerKind::Conv { kernel: 3, stride },
                in_channels: ch,
                out_channels: c,
                batch_norm: true,
                relu: true,
                out_size: size,
            });
            ch = c;
        }
        out.push(LayerSpec {
            name: "mid".into(),
            kind: LayerKind::Conv { kernel: 3, stride: 1 },
            in_channels: ch,
            out_channels: self.bottleneck_channels,
            batch_norm: true,
            relu: true,
            out_size: size,
        });
        ch = self.bottleneck_channels;
        for (i, &c) in self.decoder_channels.iter().enumerate() {
            let kind = if (i + 1) % 2 == 1 {
                size *= 2;
                LayerKind::ConvTranspose { kernel: 2, stride: 2 }
            } else {
                LayerKind::Conv { kernel: 3, stride: 1 }
            };
            out.push(LayerSpec {
                name: format!("dec{}", i + 1),
                kind,
                in_channels: ch,
                out_channels: c,
                batch_norm: true,
                relu: true,
                out_size: size,
            });
            ch = c;
        }
        out.push(LayerSpec {
            name: "head".into(),
            kind: LayerKind::Conv { kernel: 3, stride: 1 },
            in_channels: ch,
            out_channels: 1,
            batch_norm: false,
            relu: false,
            out_size: size,
        });
        out.push(LayerSpec {
            name: "skip".into(),
            kind: LayerKind::Conv { kernel: 1, stride: 1 },
            in_channels: 1,
            out_channels: 1,
            batch_norm: false,
            relu: false,
            out_size: self.input_size,
        });
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { kernel: usize, stride: usize },
    ConvTranspose { kernel: usize, stride: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub batch_norm: bool,
    pub relu: bool,
    /// Spatial side length of the layer output.
    pub out_size: usize,
}

impl LayerSpec {
    fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv { kernel, .. } => {
                vec![self.out_channels, self.in_channels, kernel, kernel]
            }
            LayerKind::ConvTranspose { kernel, .. } => {
                vec![self.in_channels, self.out_channels, kernel, kernel]
            }
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv { kernel, .. } => self.in_channels * kernel * kernel,
            // each output pixel sees one kernel tap per input channel
            LayerKind::ConvTranspose { .. } => self.in_channels,
        }
    }

    fn conv_prefix(&self) -> &'static str {
        match self.kind {
            LayerKind::Conv { .. } => "conv",
            LayerKind::ConvTranspose { .. } => "tconv",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Named network tensors in layer order. Trainable weights, biases and
/// batch-norm affine parameters live alongside the running statistics
/// (`…/running_mean`, `…/running_var`), which are not trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: IndexMap<String, Tensor>,
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with("/running_mean") || name.ends_with("/running_var")
}

/// Build and initialise the network for `cfg`: He-normal conv weights,
/// zero biases, unit BN gain, zero BN shift, running stats (0, 1).
///
/// The head starts at zero and the skip at weight 1, so a fresh network is
/// the identity map and training learns the residual (the enhancement).
pub fn build_network(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = seed::rng(seed::derive(cfg.seed, "model-init"));
    let mut tensors = IndexMap::new();
    for layer in cfg.layers() {
        let std = (2.0 / layer.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let shape = layer.weight_shape();
        let mut w = Tensor::from_fn(&shape, |_| normal.sample(&mut rng));
        match layer.name.as_str() {
            "head" => w = Tensor::zeros(&shape),
            "skip" => w = Tensor::full(&shape, 1.0),
            _ => {}
        }
        let p = layer.conv_prefix();
        tensors.insert(format!("{}/{p}/weight", layer.name), w);
        tensors.insert(
            format!("{}/{p}/bias", layer.name),
            Tensor::zeros(&[layer.out_channels]),
        );
        if layer.batch_norm {
            let c = layer.out_channels;
            tensors.insert(format!("{}/bn/gamma", layer.name), Tensor::full(&[c], 1.0));
            tensors.insert(format!("{}/bn/beta", layer.name), Tensor::zeros(&[c]));
            tensors.insert(format!("{}/bn/running_mean", layer.name), Tensor::zeros(&[c]));
            tensors.insert(format!("{}/bn/running_var", layer.name), Tensor::full(&[c], 1.0));
        }
    }
    Ok(ModelParams {
        config: cfg.clone(),
        tensors,
    })
}

/// Trainable tensors registered as graph leaves for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Convolution and transposed-convolution kernels: the tensors subject
    /// to weight decay.
    pub fn conv_weights(&self) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.ends_with("conv/weight"))
            .map(|(_, v)| *v)
            .collect()
    }
}

pub struct ForwardOutput {
    pub output: Var,
    /// Training-mode batch statistics per BN layer, keyed by layer name.
    pub bn_stats: Vec<(String, BatchStats)>,
    /// `(layer name, output shape)` in execution order.
    pub trace: Vec<(String, Vec<usize>)>,
}

impl ModelParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| !is_running_stat(k))
            .cloned()
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// `Σ‖W‖²` over convolution kernels only.
    pub fn conv_weight_sum_squares(&self) -> f64 {
        self.tensors
            .iter()
            .filter(|(k, _)| k.ends_with("conv/weight"))
            .map(|(_, t)| t.sum_squares())
            .sum()
    }

    pub(crate) fn from_parts(config: ModelConfig, tensors: IndexMap<String, Tensor>) -> Result<Self> {
        let reference = build_network(&config)?;
        if reference.tensors.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                reference.tensors.len(),
                tensors.len()
            )));
        }
        for (name, t) in &reference.tensors {
            match tensors.get(name) {
                Some(found) if found.shape() == t.shape() => {}
                Some(found) => {
                    return Err(Error::Config(format!(
                        "{name}: shape {:?}, expected {:?}",
                        found.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing tensor {name}"))),
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .filter(|(k, _)| !is_running_stat(k))
            .map(|(k, t)| (k.clone(), g.param(t.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Fold training-mode batch statistics into the running estimates:
    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) {
        for (layer, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var_unbiased)] {
                if let Some(t) = self.tensors.get_mut(&format!("{layer}/bn/{suffix}")) {
                    for (r, b) in t.data_mut().iter_mut().zip(batch) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                    }
                }
            }
        }
    }

    /// Replace the running estimates with the average of the training-mode
    /// batch statistics over `batches`, holding the weights fixed.
    pub fn recompute_running_stats(&mut self, batches: &[Tensor]) -> Result<()> {
        let mut acc: IndexMap<String, (Vec<f64>, Vec<f64>)> = IndexMap::new();
        for x in batches {
            let mut g = Graph::new();
            let bound = self.bind(&mut g);
            let xv = g.constant(x.clone());
            for (layer, st) in self.forward(&mut g, &bound, xv, Mode::Train)?.bn_stats {
                let (m, v) = acc
                    .entry(layer)
                    .or_insert_with(|| (vec![0.0; st.mean.len()], vec![0.0; st.mean.len()]));
                m.iter_mut().zip(&st.mean).for_each(|(a, b)| *a += b);
                v.iter_mut().zip(&st.var_unbiased).for_each(|(a, b)| *a += b);
            }
        }
        let n = batches.len() as f64;
        for (layer, (mean, var)) in acc {
            for (suffix, sum) in [("running_mean", mean), ("running_var", var)] {
                if let Some(t) = self.tensors.get_mut(&format!("{layer}/bn/{suffix}")) {
                    t.data_mut().iter_mut().zip(sum).for_each(|(r, s)| *r = s / n);
                }
            }
        }
        Ok(())
    }

    /// Run the network on `x: [N, 1, S, S]` with parameters bound in `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        x: Var,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let shape = g.value(x).shape().to_vec();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::dim(
                "forward",
                format!("input {shape:?}, expected [N, 1, {s}, {s}]"),
            ));
        }
        let var = |name: String| {
            bound
                .get(&name)
                .ok_or_else(|| Error::Usage(format!("parameter {name} not bound")))
        };
        let mut h = x;
        let mut bn_stats = Vec::new();
        let mut trace = Vec::new();
        let mut head = None;
        for layer in self.config.layers() {
            let p = layer.conv_prefix();
            let w = var(format!("{}/{p}/weight", layer.name))?;
            let b = var(format!("{}/{p}/bias", layer.name))?;
            let input = if layer.name == "skip" { x } else { h };
            let mut y = match layer.kind {
                LayerKind::Conv { stride, .. } => g.conv2d(input, w, b, stride)?,
                LayerKind::ConvTranspose { .. } => g.conv2d_transpose(input, w, b)?,
            };
            if layer.batch_norm {
                let gamma = var(format!("{}/bn/gamma", layer.name))?;
                let beta = var(format!("{}/bn/beta", layer.name))?;
                let (out, stats) = match mode {
                    Mode::Train => g.batch_norm(y, gamma, beta, BnMode::Train)?,
                    Mode::Infer => {
                        let mean = self.tensors[&format!("{}/bn/running_mean", layer.name)].data();
                        let var = self.tensors[&format!("{}/bn/running_var", layer.name)].data();
                        g.batch_norm(y, gamma, beta, BnMode::Infer { mean, var })?
                    }
                };
                if let Some(st) = stats {
                    bn_stats.push((layer.name.clone(), st));
                }
                y = out;
            }
            if layer.relu {
                y = g.relu(y);
            }
            trace.push((layer.name.clone(), g.value(y).shape().to_vec()));
            match layer.name.as_str() {
                "head" => head = Some(y),
                "skip" => {
                    let out = head.ok_or_else(|| Error::Usage("skip before head".into()))?;
                    h = g.add(out, y)?;
                }
                _ => h = y,
            }
        }
        Ok(ForwardOutput {
            output: h,
            bn_stats,
            trace,
        })
    }

    /// Inference-mode prediction for a batch of normalised inputs.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xv, Mode::Infer)?;
        Ok(g.value(out.output).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(size: usize) -> ModelConfig {
        ModelConfig::scaled(size, 8, 3)
    }

    #[test]
    fn bottleneck_is_four_halvings() {
        for (size, expected) in [(128, 8), (64, 4)] {
            let cfg = tiny(size);
            let mid = cfg.layers().into_iter().find(|l| l.name == "mid").unwrap();
            assert_eq!(mid.out_size, expected);
        }
    }

    #[test]
    fn encoder_sizes_follow_even_layer_strides() {
        let cfg = tiny(64);
        let sizes: Vec<usize> = cfg.layers()[..8].iter().map(|l| l.out_size).collect();
        assert_eq!(sizes, vec![64, 32, 32, 16, 16, 8, 8, 4]);
        let dec: Vec<usize> = cfg.layers()[9..17].iter().map(|l| l.out_size).collect();
        assert_eq!(dec, vec![8, 8, 16, 16, 32, 32, 64, 64]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny(64);
        cfg.input_size = 40;
        assert!(build_network(&cfg).is_err());
        let mut cfg = tiny(64);
        cfg.encoder_channels.pop();
        assert!(build_network(&cfg).is_err());
        let mut cfg = tiny(64);
        cfg.decoder_channels[3] = 0;
        assert!(build_network(&cfg).is_err());
    }

    #[test]
    fn same_seed_builds_identical_params() {
        let a = build_network(&tiny(32)).unwrap();
        let b = build_network(&tiny(32)).unwrap();
        assert_eq!(a, b);
        let mut other = tiny(32);
        other.seed = 4;
        assert_ne!(a, build_network(&other).unwrap());
    }

    #[test]
    fn output_shape_matches_input_and_is_finite() {
        let params = build_network(&tiny(32)).unwrap();
        let x = Tensor::zeros(&[2, 1, 32, 32]);
        let y = params.infer(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
        assert!(params.infer(&Tensor::zeros(&[1, 1, 16, 16])).is_err());
    }

    #[test]
    fn pure_skip_path_passes_input_through() {
        let mut params = build_network(&tiny(32)).unwrap();
        params.get_mut("head/conv/weight").unwrap().data_mut().fill(0.0);
        params.get_mut("skip/conv/weight").unwrap().data_mut().fill(1.0);
        let x = Tensor::from_fn(&[1, 1, 32, 32], |i| (i as f64 * 0.37).sin());
        let y = params.infer(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn fresh_network_is_the_identity() {
        let params = build_network(&tiny(32)).unwrap();
        let x = Tensor::from_fn(&[2, 1, 32, 32], |i| (i as f64 * 0.37).sin());
        assert_eq!(params.infer(&x).unwrap(), x);
    }

    #[test]
    fn infer_is_bit_reproducible() {
        let params = build_network(&tiny(32)).unwrap();
        let x = Tensor::from_fn(&[2, 1, 32, 32], |i| (i as f64 * 0.11).cos());
        assert_eq!(params.infer(&x).unwrap(), params.infer(&x).unwrap());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut params = build_network(&tiny(32)).unwrap();
        // a zero head blocks everything upstream, so give it weights first
        let head = params.get_mut("head/conv/weight").unwrap();
        head.data_mut().iter_mut().enumerate().for_each(|(i, w)| *w = 0.1 * (i as f64 - 2.0));
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(Tensor::from_fn(&[2, 1, 32, 32], |i| {
            ((i * 7919) % 101) as f64 / 101.0
        }));
        let out = params.forward(&mut g, &bound, x, Mode::Train).unwrap();
        let probe = g.constant(Tensor::from_fn(&[2, 1, 32, 32], |i| ((i * 31) % 17) as f64 - 8.0));
        let p = g.mul(out.output, probe).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        for (name, v) in bound.iter() {
            let gr = grads.get(v).unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(gr.data().iter().any(|x| *x != 0.0), "{name} gradient is zero");
        }
        assert_eq!(out.bn_stats.len(), 17);
    }

    #[test]
    fn linear_head_does_not_saturate() {
        let params = build_network(&tiny(32)).unwrap();
        let x = Tensor::from_fn(&[1, 1, 32, 32], |i| ((i % 13) as f64) / 13.0);
        let big = Tensor::from_fn(&[1, 1, 32, 32], |i| 1e3 * ((i % 13) as f64) / 13.0);
        let max_small = params.infer(&x).unwrap().data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_big = params.infer(&big).unwrap().data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_big > 10.0 * max_small.max(1.0), "{max_small} {max_big}");
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut params = build_network(&tiny(32)).unwrap();
        let stats = vec![(
            "enc1".to_string(),
            BatchStats {
                mean: vec![1.0; 2],
                var_unbiased: vec![3.0; 2],
            },
        )];
        params.update_running_stats(&stats);
        assert!((params.get("enc1/bn/running_mean").unwrap().data()[0] - 0.1).abs() < 1e-15);
        assert!((params.get("enc1/bn/running_var").unwrap().data()[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn recomputed_stats_average_the_batches() {
        let mut params = build_network(&tiny(32)).unwrap();
        let xs: Vec<Tensor> = (0..3)
            .map(|k| Tensor::from_fn(&[2, 1, 32, 32], |i| ((i * (k + 3)) % 17) as f64 / 17.0))
            .collect();
        let mut want = Vec::new();
        for x in &xs {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let xv = g.constant(x.clone());
            let st = params.forward(&mut g, &bound, xv, Mode::Train).unwrap().bn_stats;
            want.push(st[0].1.clone());
        }
        params.recompute_running_stats(&xs).unwrap();
        let layer = "enc1";
        let mean = params.get(&format!("{layer}/bn/running_mean")).unwrap().data()[1];
        let var = params.get(&format!("{layer}/bn/running_var")).unwrap().data()[1];
        let avg = |f: &dyn Fn(&BatchStats) -> f64| want.iter().map(f).sum::<f64>() / 3.0;
        assert!((mean - avg(&|s| s.mean[1])).abs() < 1e-12);
        assert!((var - avg(&|s| s.var_unbiased[1])).abs() < 1e-12);
    }
}

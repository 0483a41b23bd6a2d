use super::conv::{self, ConvGeom, UpGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Variance floor added inside batch-norm square roots.
pub const BN_EPS: f64 = 1e-5;

/// Sigmoid exponents are clamped to this magnitude before `exp`.
const SIGMOID_CLAMP: f64 = 60.0;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnModeKind {
    Train,
    Infer,
}

/// Normalisation source for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with stored running statistics.
    Infer { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance, the form folded into running estimates.
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: UpGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        kind: BnModeKind,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    SteepSigmoid {
        x: Var,
        s: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Square(Var),
    Sqrt(Var),
    LnClamped {
        x: Var,
        floor: f64,
    },
    Sum(Var),
    SumPerSample(Var),
    MaskedSelect {
        x: Var,
        mask: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of operations. Nodes are stored in creation order, which
/// is a topological order because every op only references existing nodes.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP)).exp())
}

/// Mask lookup for flat index `i`; a per-item mask repeats over the batch.
fn mask_at(mask: &Tensor, i: usize) -> bool {
    mask.data()[i % mask.len()] != 0.0
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients are collected for it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same-padded square convolution, `w: [F, C, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4("conv2d")?;
        let [f, wc, kh, kw] = self.value(w).dims4("conv2d")?;
        if wc != c {
            return Err(Error::dim(
                "conv2d",
                format!("input has {c} channels, kernel expects {wc}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel {kh}×{kw} is not odd square")));
        }
        if self.value(b).shape() != [f] {
            return Err(Error::dim(
                "conv2d",
                format!("bias shape {:?}, expected [{f}]", self.value(b).shape()),
            ));
        }
        if stride == 0 || h % stride != 0 || wd % stride != 0 {
            return Err(Error::dim(
                "conv2d",
                format!("spatial {h}×{wd} not divisible by stride {stride}"),
            ));
        }
        let geom = ConvGeom {
            batch: n,
            in_ch: c,
            out_ch: f,
            height: h,
            width: wd,
            kernel: kh,
            stride,
        };
        let out = conv::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![n, f, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// 2×2 stride-2 transposed convolution, `w: [C, F, 2, 2]`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4("conv2d_transpose")?;
        let [wc, f, kh, kw] = self.value(w).dims4("conv2d_transpose")?;
        if wc != c {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("input has {c} channels, kernel expects {wc}"),
            ));
        }
        if (kh, kw) != (2, 2) {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("kernel {kh}×{kw}, expected 2×2"),
            ));
        }
        if self.value(b).shape() != [f] {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("bias shape {:?}, expected [{f}]", self.value(b).shape()),
            ));
        }
        let geom = UpGeom {
            batch: n,
            in_ch: c,
            out_ch: f,
            height: h,
            width: wd,
        };
        let out = conv::conv_transpose_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![n, f, 2 * h, 2 * wd], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Per-channel normalisation followed by `gamma·x̂ + beta`. In training
    /// mode the batch statistics are returned so the caller can fold them
    /// into its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [n, c, h, w] = self.value(x).dims4("batch_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim(
                    "batch_norm",
                    format!("{name} shape {:?}, expected [{c}]", self.value(v).shape()),
                ));
            }
        }
        let hw = h * w;
        let count = n * hw;
        let xd = self.value(x).data();
        let (mean, var, stats, kind) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::Usage(format!(
                        "training batch-norm needs at least 2 values per channel, got {count}"
                    )));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for b in 0..n {
                        ss += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: var
                        .iter()
                        .map(|v| v * count as f64 / (count - 1) as f64)
                        .collect(),
                };
                (mean, var, Some(stats), BnModeKind::Train)
            }
            BnMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(
                        "batch_norm",
                        format!("running stats for {} channels, input has {c}", mean.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None, BnModeKind::Infer)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let z = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = z;
                    out[i] = g[ch] * z + bt[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                kind,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::from_fn(t.shape(), |i| t.data()[i].max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    /// `1 / (1 + exp(−s·(x − v_th)))`, a smooth stand-in for a step at `v_th`.
    pub fn steep_sigmoid(&mut self, x: Var, s: f64, v_th: f64) -> Result<Var> {
        if !(s > 0.0) {
            return Err(Error::Usage(format!("sigmoid steepness must be positive, got {s}")));
        }
        let t = self.value(x);
        let value = Tensor::from_fn(t.shape(), |i| sigmoid(s * (t.data()[i] - v_th)));
        Ok(self.push(value, Op::SteepSigmoid { x, s }, &[x]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(ta.shape(), |i| f(ta.data()[i], tb.data()[i]));
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::from_fn(t.shape(), |i| scale * t.data()[i] + shift);
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::from_fn(t.shape(), |i| t.data()[i] * t.data()[i]);
        self.push(value, Op::Square(x), &[x])
    }

    /// Elementwise square root; the gradient at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = t.data().iter().find(|v| **v < 0.0) {
            return Err(Error::Usage(format!("sqrt of negative value {bad}")));
        }
        let value = Tensor::from_fn(t.shape(), |i| t.data()[i].sqrt());
        Ok(self.push(value, Op::Sqrt(x), &[x]))
    }

    /// `ln(max(x, floor))`; no gradient flows where the floor is active.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::from_fn(t.shape(), |i| t.data()[i].max(floor).ln());
        self.push(value, Op::LnClamped { x, floor }, &[x])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Sum over every axis except the leading one: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.shape()[0];
        let per = t.len() / n;
        let data: Vec<f64> = t.data().chunks(per).map(|c| c.iter().sum()).collect();
        let value = Tensor::new(vec![n], data).expect("batch axis is non-empty");
        self.push(value, Op::SumPerSample(x), &[x])
    }

    /// Keeps `x` where `mask` is nonzero and writes exact zeros elsewhere.
    /// The mask has the shape of `x`, or the shape of one batch item with a
    /// leading axis of 1, in which case it is broadcast over the batch.
    pub fn masked_select(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let t = self.value(x);
        let broadcast = mask.shape().first() == Some(&1) && mask.shape()[1..] == t.shape()[1..];
        if mask.shape() != t.shape() && !broadcast {
            return Err(Error::dim(
                "masked_select",
                format!("mask {:?} vs input {:?}", mask.shape(), t.shape()),
            ));
        }
        let value = Tensor::from_fn(t.shape(), |i| {
            if mask_at(mask, i) {
                t.data()[i]
            } else {
                0.0
            }
        });
        Ok(self.push(
            value,
            Op::MaskedSelect {
                x,
                mask: mask.clone(),
            },
            &[x],
        ))
    }

    /// Reverse-mode sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => {
                *slot = Some(
                    Tensor::new(self.nodes[v.0].value.shape().to_vec(), g)
                        .expect("gradient matches value shape"),
                )
            }
        }
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv_transpose_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                kind,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = node.value.dims4("batch_norm")?;
                let hw = h * w;
                let count = (n * hw) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = match kind {
                                BnModeKind::Infer => g[i] * gam[ch] * inv_std[ch],
                                BnModeKind::Train => {
                                    gam[ch] * inv_std[ch] / count
                                        * (count * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                }
                            };
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::SteepSigmoid { x, s } => {
                let y = node.value.data();
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| gi * s * yi * (1.0 - yi))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(gi, y)| gi * y).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(gi, x)| gi * x).collect());
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, g.iter().map(|v| v * scale).collect());
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(gi, xi)| 2.0 * xi * gi).collect(),
                );
            }
            Op::Sqrt(x) => {
                let y = node.value.data();
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| if *yi > 0.0 { gi * 0.5 / yi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::LnClamped { x, floor } => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, xi)| if *xi > *floor { gi / xi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SumPerSample(x) => {
                let t = self.value(*x);
                let per = t.len() / t.shape()[0];
                let dx = (0..t.len()).map(|i| g[i / per]).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::MaskedSelect { x, mask } => {
                let len = g.len();
                let dx = (0..len)
                    .map(|i| if mask_at(mask, i) { g[i] } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

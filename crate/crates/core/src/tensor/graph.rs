use serde::{Deserialize, Serialize};

use super::conv::{circular_pad_rows, circular_unpad_rows, conv_output_size, ConvGeometry};
use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalise with batch statistics.
    Train,
    /// Normalise with running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig { eps: 1e-5, momentum: 0.1 }
    }
}

/// Running mean / variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    /// Exponential update: `running = (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, batch: &BatchMoments<T>, momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.unbiased_var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Per-channel statistics of a train-mode batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Variance with Bessel's correction, which feeds the running estimate.
    pub unbiased_var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry, cols: Vec<T> },
    CircularPadWidth { input: Var, pad: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { input: Var },
    Sigmoid { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Reshape { input: Var },
    Sum { input: Var },
    BceWithLogits { logits: Var, targets: Vec<T> },
    Mse { pred: Var, targets: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Tape of executed primitives for one forward/backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, if `v` required one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::GraphConsumed)
        } else {
            Ok(())
        }
    }

    /// Cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin, kh, kw]`, zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        zero_pad: (usize, usize),
    ) -> Result<Var> {
        self.check_live()?;
        let (xs, ws) = (self.shape(input), self.shape(weight));
        let [n, c_in, h, w] = xs[..] else {
            return Err(Error::ShapeMismatch(format!("conv2d input must be 4-d, got {xs:?}")));
        };
        let [c_out, wc_in, kh, kw] = ws[..] else {
            return Err(Error::ShapeMismatch(format!("conv2d weight must be 4-d, got {ws:?}")));
        };
        if wc_in != c_in {
            return Err(Error::ShapeMismatch(format!("conv2d: input has {c_in} channels, weight expects {wc_in}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::ShapeMismatch(format!("conv2d bias must be [{c_out}], got {:?}", self.shape(b))));
            }
        }
        let (Some(ho), Some(wo)) =
            (conv_output_size(h, kh, stride.0, zero_pad.0), conv_output_size(w, kw, stride.1, zero_pad.1))
        else {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: kernel {kh}x{kw} stride {stride:?} does not fit {h}x{w} padded by {zero_pad:?}"
            )));
        };
        let geom = ConvGeometry {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: zero_pad.0,
            pw: zero_pad.1,
            ho,
            wo,
        };
        let requires_grad = self.rg(&[Some(input), Some(weight), bias]);
        let keep_cols = self.requires_grad(weight);
        let (k, p) = (geom.patch(), geom.positions());

        let x = self.value(input).data();
        let wv = self.value(weight).data();
        let bv = bias.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * c_out * p];
        let mut cols = vec![T::zero(); if keep_cols { n * k * p } else { k * p }];
        for s in 0..n {
            let col = if keep_cols { &mut cols[s * k * p..(s + 1) * k * p] } else { &mut cols[..] };
            geom.im2col(&x[s * c_in * h * w..(s + 1) * c_in * h * w], col);
            geom.forward_sample(wv, bv, col, &mut out[s * c_out * p..(s + 1) * c_out * p]);
        }
        if !keep_cols {
            cols = Vec::new();
        }
        let value = Tensor::new(&[n, c_out, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom, cols }, requires_grad))
    }

    /// Wraps `pad` columns around the width axis of `[N, C, H, W]`.
    pub fn circular_pad_width(&mut self, input: Var, pad: usize) -> Result<Var> {
        self.check_live()?;
        let xs = self.shape(input).to_vec();
        let [n, c, h, w] = xs[..] else {
            return Err(Error::ShapeMismatch(format!("circular_pad_width input must be 4-d, got {xs:?}")));
        };
        if pad > w {
            return Err(Error::PadTooLarge { pad, width: w });
        }
        let mut out = vec![T::zero(); n * c * h * (w + 2 * pad)];
        circular_pad_rows(self.value(input).data(), w, pad, &mut out);
        let value = Tensor::new(&[n, c, h, w + 2 * pad], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::CircularPadWidth { input, pad }, rg))
    }

    /// Batch normalisation over `[N, C, H, W]` (or `[N, C]`).
    ///
    /// In [`BnMode::Train`] the batch statistics are returned so the caller
    /// can fold them into `stats`; `stats` is only read in [`BnMode::Eval`].
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats<T>,
        mode: BnMode,
        cfg: &BatchNormConfig,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        self.check_live()?;
        let xs = self.shape(input).to_vec();
        let (n, c, spatial) = match xs[..] {
            [n, c] => (n, c, 1),
            [n, c, h, w] => (n, c, h * w),
            _ => return Err(Error::ShapeMismatch(format!("batch_norm input must be 2-d or 4-d, got {xs:?}"))),
        };
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::ShapeMismatch(format!("batch_norm {name} must be [{c}], got {:?}", self.shape(v))));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::ShapeMismatch(format!("batch_norm running stats must have {c} channels")));
        }
        let m = n * spatial;
        if mode == BnMode::Train && m < 2 {
            return Err(Error::DegenerateBatch(m));
        }
        let eps = T::lit(cfg.eps);
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let idx = |s: usize, ch: usize, i: usize| (s * c + ch) * spatial + i;

        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        match mode {
            BnMode::Train => {
                let mf = T::lit(m as f64);
                for ch in 0..c {
                    let mut acc = T::zero();
                    for s in 0..n {
                        for i in 0..spatial {
                            acc = acc + x[idx(s, ch, i)];
                        }
                    }
                    mean[ch] = acc / mf;
                    let mut sq = T::zero();
                    for s in 0..n {
                        for i in 0..spatial {
                            let d = x[idx(s, ch, i)] - mean[ch];
                            sq = sq + d * d;
                        }
                    }
                    var[ch] = sq / mf;
                }
            }
            BnMode::Eval => {
                mean.copy_from_slice(&stats.mean);
                var.copy_from_slice(&stats.var);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                for i in 0..spatial {
                    let j = idx(s, ch, i);
                    xhat[j] = (x[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        let moments = (mode == BnMode::Train).then(|| {
            let bessel = T::lit(m as f64 / (m as f64 - 1.0));
            BatchMoments { mean: mean.clone(), unbiased_var: var.iter().map(|&v| v * bessel).collect() }
        });
        let requires_grad = self.rg(&[Some(input), Some(gamma), Some(beta)]);
        if !requires_grad {
            xhat = Vec::new();
        }
        let value = Tensor::new(&xs, out)?;
        let op = Op::BatchNorm { input, gamma, beta, xhat, inv_std, train: mode == BnMode::Train };
        Ok((self.push(value, op, requires_grad), moments))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.unary(input, |v| v.max(T::zero()), |input| Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.unary(input, sigmoid, |input| Op::Sigmoid { input })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        self.unary(input, |v| v * factor, |input| Op::Scale { input, factor })
    }

    fn unary(&mut self, input: Var, f: impl Fn(T) -> T, op: impl FnOnce(Var) -> Op<T>) -> Result<Var> {
        self.check_live()?;
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, op(input), rg))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: impl FnOnce(Var, Var) -> Op<T>) -> Result<Var> {
        self.check_live()?;
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch(format!("elementwise op on {:?} and {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.rg(&[Some(a), Some(b)]);
        Ok(self.push(value, op(a, b), rg))
    }

    /// `y = x W^T + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check_live()?;
        let (xs, ws) = (self.shape(input), self.shape(weight));
        let (&[n, fin], &[fout, win]) = (xs, ws) else {
            return Err(Error::ShapeMismatch(format!("linear expects [N, in] x [out, in], got {xs:?} x {ws:?}")));
        };
        if fin != win {
            return Err(Error::ShapeMismatch(format!("linear: input width {fin} vs weight width {win}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return Err(Error::ShapeMismatch(format!("linear bias must be [{fout}], got {:?}", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); n * fout];
        gemm(
            n,
            fin,
            fout,
            (self.value(input).data(), fin, 1),
            (self.value(weight).data(), 1, fin),
            T::zero(),
            (&mut out, fout, 1),
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o = *o + bb);
            }
        }
        let value = Tensor::new(&[n, fout], out)?;
        let rg = self.rg(&[Some(input), Some(weight), bias]);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.check_live()?;
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let n = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(input, &[n, rest])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check_live()?;
        let total = self.value(input).data().iter().copied().sum();
        let rg = self.requires_grad(input);
        Ok(self.push(Tensor::scalar(total), Op::Sum { input }, rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets, in
    /// the overflow-free form `max(z, 0) - z y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        self.check_live()?;
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(Error::ShapeMismatch(format!("bce: {} logits vs {} targets", z.len(), targets.len())));
        }
        let total: T = z.iter().zip(targets).map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()).sum();
        let loss = total / T::lit(z.len() as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, targets: targets.to_vec() }, rg))
    }

    /// Mean squared error.
    pub fn mse(&mut self, pred: Var, targets: &[T]) -> Result<Var> {
        self.check_live()?;
        let p = self.value(pred).data();
        if p.len() != targets.len() {
            return Err(Error::ShapeMismatch(format!("mse: {} predictions vs {} targets", p.len(), targets.len())));
        }
        let total: T = p.iter().zip(targets).map(|(&p, &y)| (p - y) * (p - y)).sum();
        let loss = total / T::lit(p.len() as f64);
        let rg = self.requires_grad(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, targets: targets.to_vec() }, rg))
    }

    /// Propagates `d loss / d v` to every recorded value that requires a gradient.
    ///
    /// Gradients from several consumers of one value add up. Saved
    /// intermediates are released and the graph cannot run backward again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_live()?;
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.consumed = true;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::full(&shape, T::one()));
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let op = std::mem::replace(&mut node.op, Op::Leaf);
            let Some(dy) = node.grad.as_ref().filter(|_| node.requires_grad) else {
                continue;
            };
            backprop(before, op, &node.value, dy.data());
        }
        Ok(())
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Runs `f` on the gradient buffer of `v` if it requires one, allocating it on first use.
fn with_grad<T: Scalar>(nodes: &mut [Node<T>], v: Var, f: impl FnOnce(&mut [T], &[T])) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let g = node.grad.get_or_insert_with(|| Tensor::zeros(node.value.shape()));
    f(g.data_mut(), node.value.data());
}

fn wants<T>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop<T: Scalar>(nodes: &mut [Node<T>], op: Op<T>, out: &Tensor<T>, dy: &[T]) {
    match op {
        Op::Leaf => {}
        Op::Conv2d { input, weight, bias, geom, cols } => {
            let (k, p) = (geom.patch(), geom.positions());
            let per_y = geom.c_out * p;
            if let Some(b) = bias {
                with_grad(nodes, b, |db, _| {
                    for s in 0..geom.n {
                        for (co, row) in dy[s * per_y..(s + 1) * per_y].chunks_exact(p).enumerate() {
                            db[co] = db[co] + row.iter().copied().sum::<T>();
                        }
                    }
                });
            }
            if wants(nodes, weight) {
                with_grad(nodes, weight, |dw, _| {
                    for s in 0..geom.n {
                        geom.weight_grad(&dy[s * per_y..(s + 1) * per_y], &cols[s * k * p..(s + 1) * k * p], dw);
                    }
                });
            }
            if wants(nodes, input) {
                let w = nodes[weight.0].value.data().to_vec();
                let per_x = geom.c_in * geom.h * geom.w;
                let mut dcols = vec![T::zero(); k * p];
                with_grad(nodes, input, |dx, _| {
                    for s in 0..geom.n {
                        geom.cols_grad(&w, &dy[s * per_y..(s + 1) * per_y], &mut dcols);
                        geom.col2im(&dcols, &mut dx[s * per_x..(s + 1) * per_x]);
                    }
                });
            }
        }
        Op::CircularPadWidth { input, pad } => {
            let w = *nodes[input.0].value.shape().last().expect("4-d");
            with_grad(nodes, input, |dx, _| circular_unpad_rows(dy, w, pad, dx));
        }
        Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
            let s = nodes[input.0].value.shape().to_vec();
            let (n, c) = (s[0], s[1]);
            let spatial: usize = s[2..].iter().product();
            let m = n * spatial;
            let idx = |b: usize, ch: usize, i: usize| (b * c + ch) * spatial + i;
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    for i in 0..spatial {
                        let j = idx(b, ch, i);
                        sum_dy[ch] = sum_dy[ch] + dy[j];
                        sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy[j] * xhat[j];
                    }
                }
            }
            with_grad(nodes, gamma, |dg, _| dg.iter_mut().zip(&sum_dy_xhat).for_each(|(g, &v)| *g = *g + v));
            with_grad(nodes, beta, |db, _| db.iter_mut().zip(&sum_dy).for_each(|(g, &v)| *g = *g + v));
            let g = nodes[gamma.0].value.data().to_vec();
            with_grad(nodes, input, |dx, _| {
                let mf = T::lit(m as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let scale = g[ch] * inv_std[ch];
                        for i in 0..spatial {
                            let j = idx(b, ch, i);
                            let d = if train {
                                scale / mf * (mf * dy[j] - sum_dy[ch] - xhat[j] * sum_dy_xhat[ch])
                            } else {
                                scale * dy[j]
                            };
                            dx[j] = dx[j] + d;
                        }
                    }
                }
            });
        }
        Op::Relu { input } => with_grad(nodes, input, |dx, _| {
            for ((g, &o), &d) in dx.iter_mut().zip(out.data()).zip(dy) {
                if o > T::zero() {
                    *g = *g + d;
                }
            }
        }),
        Op::Sigmoid { input } => with_grad(nodes, input, |dx, _| {
            for ((g, &o), &d) in dx.iter_mut().zip(out.data()).zip(dy) {
                *g = *g + d * o * (T::one() - o);
            }
        }),
        Op::Scale { input, factor } => with_grad(nodes, input, |dx, _| {
            dx.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g + d * factor);
        }),
        Op::Add { a, b } => {
            for v in [a, b] {
                with_grad(nodes, v, |dx, _| dx.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g + d));
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (nodes[a.0].value.data().to_vec(), nodes[b.0].value.data().to_vec());
            with_grad(nodes, a, |dx, _| {
                dx.iter_mut().zip(dy).zip(&bv).for_each(|((g, &d), &o)| *g = *g + d * o);
            });
            with_grad(nodes, b, |dx, _| {
                dx.iter_mut().zip(dy).zip(&av).for_each(|((g, &d), &o)| *g = *g + d * o);
            });
        }
        Op::Linear { input, weight, bias } => {
            let xs = nodes[input.0].value.shape().to_vec();
            let (n, fin) = (xs[0], xs[1]);
            let fout = dy.len() / n;
            if let Some(b) = bias {
                with_grad(nodes, b, |db, _| {
                    for row in dy.chunks_exact(fout) {
                        db.iter_mut().zip(row).for_each(|(g, &d)| *g = *g + d);
                    }
                });
            }
            if wants(nodes, weight) {
                let x = nodes[input.0].value.data().to_vec();
                with_grad(nodes, weight, |dw, _| {
                    gemm(fout, n, fin, (dy, 1, fout), (&x, fin, 1), T::one(), (dw, fin, 1))
                });
            }
            if wants(nodes, input) {
                let w = nodes[weight.0].value.data().to_vec();
                with_grad(nodes, input, |dx, _| {
                    gemm(n, fout, fin, (dy, fout, 1), (&w, fin, 1), T::one(), (dx, fin, 1))
                });
            }
        }
        Op::Reshape { input } => with_grad(nodes, input, |dx, _| {
            dx.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g + d);
        }),
        Op::Sum { input } => with_grad(nodes, input, |dx, _| dx.iter_mut().for_each(|g| *g = *g + dy[0])),
        Op::BceWithLogits { logits, targets } => {
            let scale = dy[0] / T::lit(targets.len() as f64);
            with_grad(nodes, logits, |dz, z| {
                for ((g, &z), &y) in dz.iter_mut().zip(z).zip(&targets) {
                    *g = *g + (sigmoid(z) - y) * scale;
                }
            });
        }
        Op::Mse { pred, targets } => {
            let scale = T::lit(2.0) * dy[0] / T::lit(targets.len() as f64);
            with_grad(nodes, pred, |dp, p| {
                for ((g, &p), &y) in dp.iter_mut().zip(p).zip(&targets) {
                    *g = *g + (p - y) * scale;
                }
            });
        }
    }
}

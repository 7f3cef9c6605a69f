//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpt_core::data::{load_csv, SampleRecord};
use rpt_core::layers::{BasicPeriodicBlockSpec, BlockWeights, Task};
use rpt_core::tensor::{Graph, RunningStats, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// max |a - b| / max |b|.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Cross-correlation by direct summation. `x` is `[N, C, H, W]`, `w` is
/// `[O, C, KH, KW]`. `col` maps an unpadded input column (possibly out of
/// range) to a real column, or `None` for zero padding.
pub fn reference_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: (usize, usize),
    pad: (usize, usize),
    out_w: usize,
    col: impl Fn(isize) -> Option<usize>,
) -> Vec<f64> {
    let [n, ci, h, wd] = x.shape()[..] else { panic!("x must be 4-d") };
    let [co, _, kh, kw] = w.shape()[..] else { panic!("w must be 4-d") };
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let mut out = vec![0.0; n * co * ho * out_w];
    for s in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..out_w {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for i in 0..kh {
                            let y = (oy * stride.0 + i) as isize - pad.0 as isize;
                            if y < 0 || y as usize >= h {
                                continue;
                            }
                            for j in 0..kw {
                                let Some(xc) = col((ox * stride.1 + j) as isize - pad.1 as isize) else { continue };
                                acc += x.data()[((s * ci + c) * h + y as usize) * wd + xc]
                                    * w.data()[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((s * co + o) * ho + oy) * out_w + ox] = acc;
                }
            }
        }
    }
    out
}

/// Plain zero-padded convolution.
pub fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: (usize, usize),
    pad: (usize, usize),
) -> Vec<f64> {
    let wd = x.shape()[3];
    let kw = w.shape()[3];
    let out_w = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    reference_conv(x, w, b, stride, pad, out_w, |c| (c >= 0 && (c as usize) < wd).then_some(c as usize))
}

/// Stride-1 convolution with width indices taken modulo W and zero height padding.
pub fn modular_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let wd = x.shape()[3];
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    reference_conv(x, w, b, (1, 1), ((kh - 1) / 2, (kw - 1) / 2), wd, |c| Some(c.rem_euclid(wd as isize) as usize))
}

/// Rolls the last axis of a `[N, C, H, W]` tensor right by `shift`.
pub fn roll_width(t: &Tensor<f64>, shift: usize) -> Tensor<f64> {
    let w = t.shape()[3];
    let mut out = t.data().to_vec();
    for (row_in, row_out) in t.data().chunks(w).zip(out.chunks_mut(w)) {
        for j in 0..w {
            row_out[(j + shift) % w] = row_in[j];
        }
    }
    Tensor::new(t.shape(), out).unwrap()
}

/// Largest relative error between the analytic gradient of
/// `sum(f(inputs) * r)` (fixed random `r`) and central differences, over the
/// entries selected by `pick(input, index)`.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F, pick: impl Fn(usize, usize) -> bool) -> (f64, usize)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>], rg: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), rg)).collect();
        let out = f(&mut g, &vars);
        (g, vars, out)
    };
    let (g0, _, out0) = eval(inputs, false);
    let weights = rand_tensor(&mut rng(99), g0.shape(out0));
    let loss_of = |vals: &[Tensor<f64>]| {
        let (g, _, out) = eval(vals, false);
        g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>()
    };

    let (mut g, vars, out) = eval(inputs, true);
    let w = g.leaf(weights.clone(), false);
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut vals = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in (0..t.numel()).filter(|&i| pick(k, i)) {
            let orig = vals[k].data()[i];
            vals[k].data_mut()[i] = orig + h;
            let plus = loss_of(&vals);
            vals[k].data_mut()[i] = orig - h;
            let minus = loss_of(&vals);
            vals[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Leaf tensors for one block: conv1 w/b, bn1 gamma/beta, conv2 w/b, bn2 gamma/beta.
pub fn block_tensors(rng: &mut ChaCha8Rng, spec: &BasicPeriodicBlockSpec) -> Vec<Tensor<f64>> {
    let (kh, kw) = spec.kernel;
    let mut gamma = |c| Tensor::new(&[c], (0..c).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
    let g1 = gamma(spec.inside_ch);
    let g2 = gamma(spec.out_ch);
    vec![
        rand_tensor(rng, &[spec.inside_ch, spec.in_ch, kh, kw]),
        rand_tensor(rng, &[spec.inside_ch]),
        g1,
        rand_tensor(rng, &[spec.inside_ch]),
        rand_tensor(rng, &[spec.out_ch, spec.inside_ch, kh, kw]),
        rand_tensor(rng, &[spec.out_ch]),
        g2,
        rand_tensor(rng, &[spec.out_ch]),
    ]
}

pub fn block_weights(v: &[Var]) -> BlockWeights {
    BlockWeights { conv1: (v[0], v[1]), bn1: (v[2], v[3]), conv2: (v[4], v[5]), bn2: (v[6], v[7]) }
}

pub fn random_stats(rng: &mut ChaCha8Rng, c: usize) -> RunningStats<f64> {
    RunningStats {
        mean: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        var: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
    }
}

pub fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Bundled sample records: gapped loaded for `task`, non-gapped for classification.
pub fn sample_records(task: Task) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    let g = load_csv(repo_path("data/sample/gapped.csv"), task, false).unwrap().records;
    let n = load_csv(repo_path("data/sample/nongapped.csv"), Task::Classify, false).unwrap().records;
    (g, n)
}

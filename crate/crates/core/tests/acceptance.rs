//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the report is always printed. Positional
//! arguments filter criteria by substring of their label.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use rpt_core::data::{load_csv, prepare_classification, prepare_regression, split, Sample, SplitDataset};
use rpt_core::elements::Block;
use rpt_core::encoder::{decode, encode, offset, TABLE_LEN};
use rpt_core::formula::{parse_formula, Representation};
use rpt_core::layers::{
    basic_periodic_block_forward, build_network, periodic_conv_forward, BasicPeriodicBlockSpec, Network, NetworkConfig,
    PeriodicConvSpec, Periodicity, Scale, Task,
};
use rpt_core::metrics::{auc_rank, auc_trapezoid, regression_metrics};
use rpt_core::model_file;
use rpt_core::tensor::{BatchNormConfig, BnMode, Graph, RunningStats, Tensor};
use rpt_core::trainer::{evaluate, loss, train, train_step, AdamState, EvalReport, TrainConfig};

enum Verdict {
    Pass(String),
    Fail(String),
    /// Inputs unavailable; reported but not counted as a failure.
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

struct Criterion {
    id: u8,
    label: &'static str,
    budget: Duration,
    run: fn() -> Verdict,
}

const MIN: u64 = 60;

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion { id: 1, label: "conv oracle", budget: Duration::from_secs(MIN), run: conv_oracle },
        Criterion { id: 2, label: "periodic layer", budget: Duration::from_secs(MIN), run: periodic_layer },
        Criterion { id: 3, label: "gradient checks", budget: Duration::from_secs(5 * MIN), run: gradient_checks },
        Criterion { id: 4, label: "encoding fidelity", budget: Duration::from_secs(MIN), run: encoding_fidelity },
        Criterion { id: 5, label: "overfit sanity", budget: Duration::from_secs(2 * MIN), run: overfit_sanity },
        Criterion {
            id: 6,
            label: "desk classification",
            budget: Duration::from_secs(30 * MIN),
            run: desk_classification,
        },
        Criterion { id: 7, label: "desk regression", budget: Duration::from_secs(30 * MIN), run: desk_regression },
        Criterion { id: 8, label: "ablation harness", budget: Duration::from_secs(10 * MIN), run: ablation_harness },
        Criterion { id: 9, label: "metrics cross-validation", budget: Duration::from_secs(MIN), run: metrics_cross },
        Criterion { id: 10, label: "determinism", budget: Duration::from_secs(10 * MIN), run: determinism },
    ]
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in criteria() {
        if !filters.is_empty() && !filters.iter().any(|f| c.label.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Verdict::Fail(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let v = match v {
            Verdict::Pass(d) if took > c.budget => Verdict::Fail(format!("{d}; over budget {:?}", c.budget)),
            v => v,
        };
        let (tag, detail) = match &v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] {:>2}. {}: {detail} ({:.1}s)", c.id, c.label, took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn conv_oracle() -> Verdict {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, ci, co) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4));
        let (h, w) = (r.gen_range(1..=9), r.gen_range(1..=18));
        let pad = (r.gen_range(0..=2), r.gen_range(0..=3));
        let kh = r.gen_range(1..=(h + 2 * pad.0).min(5));
        let kw = r.gen_range(1..=(w + 2 * pad.1).min(5));
        let stride = (r.gen_range(1..=2), r.gen_range(1..=3));
        let x = rand_tensor(&mut r, &[n, ci, h, w]);
        let k = rand_tensor(&mut r, &[co, ci, kh, kw]);
        let b = rand_tensor(&mut r, &[co]);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.leaf(x.clone(), false), g.leaf(k.clone(), false), g.leaf(b.clone(), false));
        let y = g.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        worst = worst.max(rel_err(g.value(y).data(), &naive_conv(&x, &k, b.data(), stride, pad)));
    }
    verdict(worst < 1e-6, format!("100 configs, max rel err {worst:.2e} (< 1e-6)"))
}

fn periodic_layer() -> Verdict {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, ci, co) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4));
        let (h, w) = (r.gen_range(1..=9), r.gen_range(3..=18));
        let kh = 2 * r.gen_range(0..=2) + 1;
        let kw = 2 * r.gen_range(0..=(w - 1) / 2).min(3) + 1;
        let spec = PeriodicConvSpec {
            in_channels: ci,
            out_channels: co,
            kernel: (kh, kw),
            periodicity: Periodicity::Cylindrical,
        };
        let x = rand_tensor(&mut r, &[n, ci, h, w]);
        let k = rand_tensor(&mut r, &[co, ci, kh, kw]);
        let b = rand_tensor(&mut r, &[co]);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.leaf(x.clone(), false), g.leaf(k.clone(), false), g.leaf(b.clone(), false));
        let y = periodic_conv_forward(&mut g, xv, &spec, kv, Some(bv)).unwrap();
        worst = worst.max(rel_err(g.value(y).data(), &modular_conv(&x, &k, b.data())));
    }

    // Stride-1 stack: stem conv, then two blocks, eval-mode batch norm.
    let mut violations = 0;
    let cases = 20;
    for case in 0..cases {
        let spec = BasicPeriodicBlockSpec::uniform(4, (3, 3));
        let stem =
            PeriodicConvSpec { in_channels: 4, out_channels: 4, kernel: (1, 1), periodicity: Periodicity::Cylindrical };
        let stem_w = rand_tensor(&mut r, &[4, 4, 1, 1]);
        let stem_b = rand_tensor(&mut r, &[4]);
        let blocks: Vec<Vec<Tensor<f64>>> = (0..2).map(|_| block_tensors(&mut r, &spec)).collect();
        let stats: Vec<RunningStats<f64>> = (0..4).map(|_| random_stats(&mut r, 4)).collect();
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), false);
            let (sw, sb) = (g.leaf(stem_w.clone(), false), g.leaf(stem_b.clone(), false));
            let mut y = periodic_conv_forward(&mut g, xv, &stem, sw, Some(sb)).unwrap();
            for (i, p) in blocks.iter().enumerate() {
                let vars: Vec<_> = p.iter().map(|t| g.leaf(t.clone(), false)).collect();
                let st = [&stats[2 * i], &stats[2 * i + 1]];
                let cfg = BatchNormConfig::default();
                y = basic_periodic_block_forward(
                    &mut g,
                    y,
                    &spec,
                    Periodicity::Cylindrical,
                    &block_weights(&vars),
                    st,
                    BnMode::Eval,
                    &cfg,
                )
                .unwrap()
                .0;
            }
            g.value(y).clone()
        };
        let x = rand_tensor(&mut r, &[2, 4, 9, 18]);
        let shift = 1 + case % 17;
        let y = run(&x);
        if run(&roll_width(&x, shift)).data() != roll_width(&y, shift).data() {
            violations += 1;
        }
    }
    verdict(
        worst < 1e-6 && violations == 0,
        format!(
            "100 cases max rel err {worst:.2e} (< 1e-6); shift equivariance exact in {}/{cases} stacks",
            cases - violations
        ),
    )
}

fn primitive_checks() -> Vec<(&'static str, f64)> {
    let mut r = rng(3);
    let mut t = |shape: &[usize]| rand_tensor(&mut r, shape);
    let all = |_: usize, _: usize| true;
    let bn = BatchNormConfig::default();
    let stats = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
    let targets = [1.0, 0.0, 1.0, 0.0, 1.0];
    let pos = Tensor::new(&[3], vec![0.7, 1.2, 0.9]).unwrap();
    vec![
        (
            "conv2d",
            gradcheck(
                &[t(&[2, 2, 5, 6]), t(&[3, 2, 3, 2]), t(&[3])],
                |g, v| g.conv2d(v[0], v[1], Some(v[2]), (2, 1), (1, 0)).unwrap(),
                all,
            )
            .0,
        ),
        (
            "conv2d downsample",
            gradcheck(
                &[t(&[2, 2, 4, 9]), t(&[2, 2, 2, 4])],
                |g, v| g.conv2d(v[0], v[1], None, (1, 2), (0, 3)).unwrap(),
                all,
            )
            .0,
        ),
        ("circular pad", gradcheck(&[t(&[2, 2, 3, 5])], |g, v| g.circular_pad_width(v[0], 2).unwrap(), all).0),
        (
            "batch norm train",
            gradcheck(
                &[t(&[4, 3, 2, 3]), pos.clone(), t(&[3])],
                |g, v| g.batch_norm(v[0], v[1], v[2], &stats, BnMode::Train, &bn).unwrap().0,
                all,
            )
            .0,
        ),
        (
            "batch norm eval",
            gradcheck(
                &[t(&[4, 3, 2, 3]), pos, t(&[3])],
                |g, v| g.batch_norm(v[0], v[1], v[2], &stats, BnMode::Eval, &bn).unwrap().0,
                all,
            )
            .0,
        ),
        ("relu", gradcheck(&[t(&[3, 7])], |g, v| g.relu(v[0]).unwrap(), all).0),
        ("sigmoid", gradcheck(&[t(&[3, 7])], |g, v| g.sigmoid(v[0]).unwrap(), all).0),
        ("scale", gradcheck(&[t(&[3, 7])], |g, v| g.scale(v[0], -1.7).unwrap(), all).0),
        ("add", gradcheck(&[t(&[3, 7]), t(&[3, 7])], |g, v| g.add(v[0], v[1]).unwrap(), all).0),
        ("mul", gradcheck(&[t(&[3, 7]), t(&[3, 7])], |g, v| g.mul(v[0], v[1]).unwrap(), all).0),
        (
            "linear",
            gradcheck(&[t(&[4, 6]), t(&[3, 6]), t(&[3])], |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(), all).0,
        ),
        ("flatten", gradcheck(&[t(&[2, 3, 2, 2])], |g, v| g.flatten(v[0]).unwrap(), all).0),
        ("reshape", gradcheck(&[t(&[2, 6])], |g, v| g.reshape(v[0], &[3, 4]).unwrap(), all).0),
        ("sum", gradcheck(&[t(&[2, 6])], |g, v| g.sum(v[0]).unwrap(), all).0),
        ("bce with logits", gradcheck(&[t(&[5, 1])], |g, v| g.bce_with_logits(v[0], &targets).unwrap(), all).0),
        ("mse", gradcheck(&[t(&[5, 1])], |g, v| g.mse(v[0], &targets).unwrap(), all).0),
    ]
}

/// Central differences on sampled parameters of a Reduced network (f64,
/// train-mode batch norm, MSE loss). A sample whose one-sided slopes
/// disagree straddles a ReLU kink and is redrawn. Returns (max rel err,
/// params checked, samples redrawn).
fn network_check(per_tensor: usize) -> (f64, usize, usize) {
    let mut r = rng(4);
    let cfg = NetworkConfig::reduced(Task::Regress, Periodicity::Cylindrical, 4);
    let mut net = Network::<f64>::build(&cfg).unwrap();
    let x = rand_tensor(&mut r, &[4, 4, 9, 18]).data().iter().map(|v| v.abs()).collect::<Vec<_>>();
    let x = Tensor::new(&[4, 4, 9, 18], x).unwrap();
    let targets = [0.5, 1.5, 2.5, 3.5];
    let loss_of = |net: &Network<f64>, grads: bool| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let fwd = net.forward(&mut g, xv, BnMode::Train, grads).unwrap();
        let l = loss(&mut g, fwd.output, &targets, Task::Regress).unwrap();
        let value = g.value(l).data()[0];
        if !grads {
            return (value, Vec::new());
        }
        g.backward(l).unwrap();
        let gs = fwd.params.iter().map(|&p| g.grad(p).unwrap().data().to_vec()).collect();
        (value, gs)
    };
    let (base, analytic) = loss_of(&net, true);
    let h = 1e-6;
    let (mut worst, mut checked, mut redrawn) = (0.0f64, 0, 0);
    for (k, grads) in analytic.iter().enumerate() {
        let len = grads.len();
        let mut done = 0;
        for _ in 0..10 * per_tensor {
            if done == per_tensor {
                break;
            }
            let i = r.gen_range(0..len);
            let orig = net.params()[k].value.data()[i];
            net.params_mut()[k].value.data_mut()[i] = orig + h;
            let plus = loss_of(&net, false).0;
            net.params_mut()[k].value.data_mut()[i] = orig - h;
            let minus = loss_of(&net, false).0;
            net.params_mut()[k].value.data_mut()[i] = orig;
            let (right, left) = ((plus - base) / h, (base - minus) / h);
            if (right - left).abs() > 1e-4 * right.abs().max(left.abs()).max(1e-2) {
                redrawn += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grads[i];
            worst = worst.max((numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-6));
            checked += 1;
            done += 1;
        }
    }
    (worst, checked, redrawn)
}

fn gradient_checks() -> Verdict {
    let prims = primitive_checks();
    let (name, prim_worst) = prims.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    let (net_worst, checked, redrawn) = network_check(4);
    verdict(
        prim_worst < 1e-3 && net_worst < 1e-3 && checked >= 200,
        format!(
            "{} primitives max rel err {prim_worst:.2e} ({name}); Reduced network {checked} params max rel err {net_worst:.2e} (< 1e-3), {redrawn} kink-straddling samples redrawn",
            prims.len()
        ),
    )
}

fn encoding_fidelity() -> Verdict {
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for file in ["data/sample/gapped.csv", "data/sample/nongapped.csv"] {
        let records = load_csv(repo_path(file), Task::Classify, false).unwrap().records;
        for rec in records {
            for c in [rec.composition.clone(), rec.composition.to_relative().unwrap()] {
                checked += 1;
                if decode(&encode(&c).unwrap()).unwrap() != c {
                    mismatches.push(rec.composition_text.clone());
                }
            }
        }
    }
    let water = parse_formula("H2O").unwrap();
    let mut expected = vec![0.0; TABLE_LEN];
    expected[offset(Block::S.channel(), 0, 0)] = 2.0;
    expected[offset(Block::P.channel(), 1, 15)] = 1.0;
    let water_ok = water.len() == 2
        && water.get("H") == Some(2.0)
        && water.get("O") == Some(1.0)
        && encode(&water).unwrap().values() == &expected[..];
    verdict(
        mismatches.is_empty() && water_ok && checked > 0,
        format!(
            "{checked} corpus compositions round-trip, {} mismatches; H2O -> {{H: 2, O: 1}} exact: {water_ok}",
            mismatches.len()
        ),
    )
}

fn overfit_sanity() -> Verdict {
    let (g, ng) = sample_records(Task::Classify);
    let records = prepare_classification(&g[..8], &ng[..8], 5).unwrap().records;
    let samples: Vec<Sample> =
        split(&records, 5, Representation::Absolute).map(|s| s.train.into_iter().chain(s.test).collect()).unwrap();
    let batch: Vec<&Sample> = samples.iter().collect();
    let mut net = build_network(&NetworkConfig::reduced(Task::Classify, Periodicity::Cylindrical, 5)).unwrap();
    let cfg = TrainConfig { lr: 1e-3, batch_size: 16, ..TrainConfig::new(Task::Classify) };
    let mut adam = AdamState::new(net.params());
    let mut last = f32::NAN;
    for step in 1..=500 {
        last = train_step(&mut net, &mut adam, &batch, &cfg).unwrap();
        if last < 1e-2 {
            return Verdict::Pass(format!("{} samples, train BCE {last:.2e} < 1e-2 after {step} steps", batch.len()));
        }
    }
    Verdict::Fail(format!("train BCE {last:.3e} after 500 steps"))
}

fn external(name: &str) -> Option<std::path::PathBuf> {
    let p = repo_path(&format!("data/external/{name}"));
    Path::new(&p).exists().then_some(p)
}

const FETCH_HINT: &str = "data/external missing; run scripts/fetch_data.py";

fn desk_run(task: Task, data: &SplitDataset) -> EvalReport {
    let net = build_network(&NetworkConfig::reduced(task, Periodicity::Cylindrical, 0)).unwrap();
    let cfg = TrainConfig { epochs: 30, seed: 0, ..TrainConfig::new(task) };
    let out = train(net, data, &cfg, |_| {}).unwrap();
    evaluate(&out.model, &data.test, 0.5).unwrap()
}

fn desk_classification() -> Verdict {
    let (Some(gp), Some(np)) = (external("classify_gapped.csv"), external("classify_nongapped.csv")) else {
        return Verdict::Skip(FETCH_HINT.into());
    };
    let g = load_csv(gp, Task::Classify, false).unwrap().records;
    let n = load_csv(np, Task::Classify, false).unwrap().records;
    let prepared = prepare_classification(&g, &n, 0).unwrap();
    let data = split(&prepared.records, 0, Representation::Absolute).unwrap();
    let EvalReport::Classification(r) = desk_run(Task::Classify, &data) else { unreachable!() };
    let auc = r.auc.unwrap_or(0.0);
    verdict(
        prepared.records.len() >= 2000 && auc >= 0.85 && r.accuracy >= 0.78,
        format!(
            "{} balanced samples, 30 epochs, test AUC {auc:.4} (>= 0.85), accuracy {:.4} (>= 0.78)",
            prepared.records.len(),
            r.accuracy
        ),
    )
}

fn desk_regression() -> Verdict {
    let Some(p) = external("regress_gapped.csv") else {
        return Verdict::Skip(FETCH_HINT.into());
    };
    let prepared = prepare_regression(&load_csv(p, Task::Regress, false).unwrap().records);
    let data = split(&prepared.records, 0, Representation::Absolute).unwrap();
    let EvalReport::Regression(r) = desk_run(Task::Regress, &data) else { unreachable!() };
    verdict(
        r.r_squared >= 0.6 && r.rmse <= 1.0,
        format!(
            "{} samples, 30 epochs, test R2 {:.4} (>= 0.6), RMSE {:.4} eV (<= 1.0)",
            prepared.records.len(),
            r.r_squared,
            r.rmse
        ),
    )
}

fn ablation_harness() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for scale in [Scale::Full, Scale::Reduced] {
        let counts: Vec<usize> = [Periodicity::Cylindrical, Periodicity::Flat]
            .map(|p| build_network(&NetworkConfig::new(Task::Classify, p, scale, 0)).unwrap().param_count())
            .to_vec();
        ok &= counts[0] == counts[1];
        notes.push(format!("{scale} {} vs {}", counts[0], counts[1]));
    }
    let (g, n) = sample_records(Task::Classify);
    let prepared = prepare_classification(&g, &n, 0).unwrap();
    let data = split(&prepared.records, 0, Representation::Absolute).unwrap();
    for p in [Periodicity::Cylindrical, Periodicity::Flat] {
        let net = build_network(&NetworkConfig::reduced(Task::Classify, p, 0)).unwrap();
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::new(Task::Classify) };
        let out = train(net, &data, &cfg, |_| {}).unwrap();
        let h = out.history.last().unwrap();
        ok &= h.periodicity == p && h.train_loss.is_finite();
        if let EvalReport::Classification(r) = &h.test_metrics {
            notes.push(format!("{p} end-to-end acc {:.3}", r.accuracy));
        }
    }
    verdict(ok, format!("param counts {}", notes.join("; ")))
}

fn metrics_cross() -> Verdict {
    let mut r = rng(9);
    let mut auc_worst = 0.0f64;
    let mut datasets = 0;
    while datasets < 1000 {
        let n = r.gen_range(2..=200);
        let levels = r.gen_range(2..=50);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..levels)) / f64::from(levels)).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        if labels.iter().all(|&b| b) || labels.iter().all(|&b| !b) {
            continue;
        }
        auc_worst =
            auc_worst.max((auc_rank(&scores, &labels).unwrap() - auc_trapezoid(&scores, &labels).unwrap()).abs());
        datasets += 1;
    }
    let mut reg_worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.gen_range(2..=200);
        let t: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..8.0)).collect();
        let p: Vec<f64> = t.iter().map(|v| v + r.gen_range(-1.5..1.5)).collect();
        let mean = t.iter().sum::<f64>() / n as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for i in 0..n {
            ss_res += (t[i] - p[i]) * (t[i] - p[i]);
            ss_tot += (t[i] - mean) * (t[i] - mean);
        }
        let m = regression_metrics(&p, &t).unwrap();
        reg_worst = reg_worst.max((m.r_squared - (1.0 - ss_res / ss_tot)).abs());
        reg_worst = reg_worst.max((m.rmse - (ss_res / n as f64).sqrt()).abs());
    }
    verdict(
        auc_worst <= 1e-12 && reg_worst <= 1e-9,
        format!("1000 datasets |rank - trapezoid AUC| max {auc_worst:.1e} (<= 1e-12); regression vs oracle max {reg_worst:.1e} (<= 1e-9)"),
    )
}

fn determinism() -> Verdict {
    let (g, n) = sample_records(Task::Classify);
    let prepared = prepare_classification(&g, &n, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let data = split(&prepared.records, 11, Representation::Absolute).unwrap();
            let net = build_network(&NetworkConfig::reduced(Task::Classify, Periodicity::Cylindrical, 11)).unwrap();
            let cfg = TrainConfig { epochs: 3, seed: 11, ..TrainConfig::new(Task::Classify) };
            let out = train(net, &data, &cfg, |_| {}).unwrap();
            let path = dir.path().join(format!("run{i}.rptm"));
            model_file::save(&out.model, &path).unwrap();
            std::fs::read(path).unwrap()
        })
        .collect();
    verdict(
        files[0] == files[1],
        format!("two seeded runs, model files of {} bytes identical: {}", files[0].len(), files[0] == files[1]),
    )
}

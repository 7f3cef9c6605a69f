//! Optimisation loop: Adam, task losses, mini-batching and checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, SplitDataset};
use crate::encoder::{TABLE_LEN, TABLE_SHAPE};
use crate::error::{Error, Result};
use crate::layers::{Network, Param, Periodicity, Task};
use crate::metrics::{
    classification_metrics, regression_metrics, ClassificationReport, RegressionReport, DEFAULT_THRESHOLD,
};
use crate::tensor::{BnMode, Graph, Scalar, Tensor, Var};

/// Samples per forward pass when evaluating.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub task: Task,
    pub shuffle_each_epoch: bool,
}

impl TrainConfig {
    pub fn new(task: Task) -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 200,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            task,
            shuffle_each_epoch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::TrainConfigInvalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::TrainConfigInvalid("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::TrainConfigInvalid("batch size must be at least 2 for batch norm".into()));
        }
        Ok(())
    }
}

/// Adam moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} state buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.value.shape() != g.shape() || m.len() != p.value.numel() {
            return Err(Error::ShapeMismatch(format!(
                "adam: {} has shape {:?}, grad {:?}",
                p.name,
                p.value.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (eps, lr) = (T::lit(cfg.eps), T::lit(lr));
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Task loss: mean BCE on logits for classification, MSE (eV^2) for regression.
pub fn loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &[T], task: Task) -> Result<Var> {
    let shape = g.shape(pred);
    if shape != [target.len(), 1] {
        return Err(Error::ShapeMismatch(format!("loss: prediction {shape:?} vs {} targets", target.len())));
    }
    match task {
        Task::Classify => g.bce_with_logits(pred, target),
        Task::Regress => g.mse(pred, target),
    }
}

/// Stacks encoded samples into a `[N, 4, 9, 18]` tensor.
pub fn batch_tensor<T: Scalar>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(samples.len() * TABLE_LEN);
    for s in samples {
        s.tensor.extend_into(&mut data);
    }
    let [c, h, w] = TABLE_SHAPE;
    Tensor::new(&[samples.len(), c, h, w], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvalReport {
    Classification(ClassificationReport),
    Regression(RegressionReport),
}

impl EvalReport {
    /// Larger is better: AUC (falling back to accuracy) or negative RMSE.
    pub fn score(&self) -> f64 {
        match self {
            EvalReport::Classification(r) => r.auc.unwrap_or(r.accuracy),
            EvalReport::Regression(r) => -r.rmse,
        }
    }

    /// Copy without ROC points / scatter data.
    pub fn summary(&self) -> EvalReport {
        match self {
            EvalReport::Classification(r) => {
                EvalReport::Classification(ClassificationReport { roc_points: Vec::new(), ..r.clone() })
            }
            EvalReport::Regression(r) => EvalReport::Regression(RegressionReport { scatter: Vec::new(), ..r.clone() }),
        }
    }
}

/// Eval-mode predictions (probabilities or eV) in sample order.
pub fn predict_samples(net: &Network<f32>, samples: &[Sample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        out.extend(net.predict(batch_tensor(&refs)?)?.into_iter().map(f64::from));
    }
    Ok(out)
}

pub fn evaluate(net: &Network<f32>, samples: &[Sample], threshold: f64) -> Result<EvalReport> {
    let preds = predict_samples(net, samples)?;
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    Ok(match net.config().task {
        Task::Classify => {
            let labels: Vec<bool> = targets.iter().map(|&t| t > 0.5).collect();
            EvalReport::Classification(classification_metrics(&preds, &labels, threshold)?)
        }
        Task::Regress => EvalReport::Regression(regression_metrics(&preds, &targets)?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_metrics: EvalReport,
    pub task: Task,
    pub periodicity: Periodicity,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: Network<f32>,
    /// Snapshot with the best test score.
    pub best: Network<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Forward, loss, backward and one Adam step on `batch`. Returns the batch loss.
pub fn train_step(
    net: &mut Network<f32>,
    adam: &mut AdamState<f32>,
    batch: &[&Sample],
    cfg: &TrainConfig,
) -> Result<f32> {
    let mut g = Graph::new();
    let x = g.leaf(batch_tensor(batch)?, false);
    let fwd = net.forward(&mut g, x, BnMode::Train, true)?;
    let targets: Vec<f32> = batch.iter().map(|s| s.target as f32).collect();
    let l = loss(&mut g, fwd.output, &targets, cfg.task)?;
    let value = g.value(l).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(l)?;
    let grads = fwd
        .params
        .iter()
        .zip(net.params())
        .map(|(&v, p)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect::<Vec<_>>();
    net.update_running_stats(&fwd.moments);
    adam_step(net.params_mut(), &grads, adam, &cfg.adam, cfg.lr)?;
    Ok(value)
}

/// Mini-batch order for one epoch; a trailing batch of one sample is dropped.
fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size).filter(|b| b.len() >= 2)
}

pub fn train(
    mut net: Network<f32>,
    data: &SplitDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.len() < 2 {
        return Err(Error::TrainConfigInvalid("need at least 2 training samples".into()));
    }
    if net.config().task != cfg.task {
        return Err(Error::TaskMismatch { model: net.config().task.to_string(), requested: cfg.task.to_string() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(net.params());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Network<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle_each_epoch {
            order.shuffle(&mut rng);
        }
        let (mut total, mut seen) = (0.0f64, 0usize);
        for (b, idx) in batches(&order, cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data.train[i]).collect();
            let l = train_step(&mut net, &mut adam, &batch, cfg)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, indices: batch.iter().map(|s| s.index).collect() });
            }
            total += f64::from(l) * batch.len() as f64;
            seen += batch.len();
        }
        let eval_set = if data.test.is_empty() { &data.train } else { &data.test };
        let report = evaluate(&net, eval_set, DEFAULT_THRESHOLD)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / seen as f64,
            test_metrics: report.summary(),
            task: cfg.task,
            periodicity: net.config().periodicity,
        };
        if best.as_ref().is_none_or(|(s, _, _)| report.score() > *s) {
            best = Some((report.score(), epoch, net.clone()));
        }
        on_epoch(&record);
        history.push(record);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome { model: net, best, best_epoch, history })
}

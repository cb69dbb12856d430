//! Risks over unfolded trajectories, Adam/SGD updates, and the sequential,
//! end-to-end and two-stage training loops.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Scalar step sizes and thresholds.
    Hyper,
    /// Convolution weights and LISTA matrices.
    Net,
    /// Per-iteration objective transforms.
    Objective,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockInfo {
    pub group: ParamGroup,
    /// Iteration (0-based) that owns the block; `None` for blocks shared by
    /// every iteration.
    pub stage: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Supervision {
    Supervised,
    Unsupervised { lambda: f64 },
}

/// A model with per-iteration parameter blocks whose trajectory can be
/// recorded on a tape.
pub trait Trainable: Clone + Send + Sync {
    type Sample: Sync;

    fn depth(&self) -> usize;

    fn blocks(&self) -> Vec<&Tensor>;

    fn blocks_mut(&mut self) -> Vec<&mut Tensor>;

    fn block_info(&self) -> Vec<BlockInfo>;

    /// Per-iteration sample losses for iterations `1..=upto`, with `params`
    /// standing in for [`Trainable::blocks`].
    fn iteration_losses<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        sample: &Self::Sample,
        supervision: Supervision,
        upto: usize,
    ) -> Result<Vec<Var<'t>>>;

    /// Restores parameter constraints after an update.
    fn project(&mut self) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossShape {
    EndToEnd,
    MultiIteration,
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub supervision: Supervision,
    pub shape: LossShape,
    /// Iteration weights for the multi-iteration risk; `log(1+k)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            supervision: Supervision::Supervised,
            shape: LossShape::Sequential,
            alphas: None,
        }
    }
}

/// `α_k = log(1 + k)` for `k = 1..=depth`.
pub fn default_alphas(depth: usize) -> Vec<f64> {
    (1..=depth).map(|k| (1.0 + k as f64).ln()).collect()
}

impl LossSpec {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if let Supervision::Unsupervised { lambda } = self.supervision {
            if !(lambda >= 0.0) || !lambda.is_finite() {
                return Err(Error::Config(format!("unsupervised weight {lambda}")));
            }
        }
        if let Some(a) = &self.alphas {
            if a.len() != depth {
                return Err(Error::Contract(format!(
                    "{} iteration weights for depth {depth}",
                    a.len()
                )));
            }
            if a.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::Contract("iteration weights must be positive".into()));
            }
        }
        Ok(())
    }

    /// Weights over iterations `1..=depth` for the end-to-end or
    /// multi-iteration risk.
    pub fn weights(&self, depth: usize) -> Result<Vec<f64>> {
        self.validate(depth)?;
        match self.shape {
            LossShape::EndToEnd | LossShape::Sequential => Ok(end_to_end_weights(depth)),
            LossShape::MultiIteration => Ok(self.alphas.clone().unwrap_or_else(|| default_alphas(depth))),
        }
    }
}

fn end_to_end_weights(depth: usize) -> Vec<f64> {
    let mut w = vec![0.0; depth];
    w[depth - 1] = 1.0;
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size for scalar hyperparameter blocks.
    pub learning_rate: f64,
    /// Step size for network and LISTA matrix blocks.
    pub net_learning_rate: f64,
    /// Step size for learned objective transforms.
    pub objective_learning_rate: f64,
    pub optimizer: Optimizer,
    /// Global gradient-norm cap; written as 0 when off.
    #[serde(with = "clip_serde")]
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

mod clip_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = f64::deserialize(d)?;
        Ok((v != 0.0).then_some(v))
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-2,
            net_learning_rate: 1e-3,
            objective_learning_rate: 1e-4,
            optimizer: Optimizer::default(),
            grad_clip: Some(10.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if ![self.learning_rate, self.net_learning_rate, self.objective_learning_rate]
            .into_iter()
            .all(nonneg)
        {
            return Err(Error::Config("learning rates must be finite and nonnegative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("gradient clip {c}")));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            let unit = |b: f64| (0.0..1.0).contains(&b);
            if !unit(beta1) || !unit(beta2) || !(eps > 0.0) {
                return Err(Error::Config("adam moments must lie in [0, 1) with eps > 0".into()));
            }
        }
        Ok(())
    }

    fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Hyper => self.learning_rate,
            ParamGroup::Net => self.net_learning_rate,
            ParamGroup::Objective => self.objective_learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_ns: u128,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// One entry per epoch run, across all stages.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub log: Vec<EpochRecord>,
    pub wall: Duration,
}

impl TrainReport {
    fn push(&mut self, rec: EpochRecord) {
        self.train_loss.push(rec.train_loss);
        self.val_loss.push(rec.val_loss);
        self.log.push(rec);
    }

    fn extend(&mut self, other: TrainReport) {
        for rec in other.log {
            self.push(rec);
        }
        self.wall += other.wall;
    }

    /// Training log as CSV: `stage,epoch,train_loss,val_loss,wall_ns`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,epoch,train_loss,val_loss,wall_ns\n");
        for r in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.stage, r.epoch, r.train_loss, r.val_loss, r.wall_ns
            ));
        }
        out
    }
}

/// First and second moment estimates for [`adam_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: Vec<u64>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
            t: vec![0; params.len()],
        }
    }
}

/// Bias-corrected Adam update of block `i`.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    i: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.t[i] += 1;
    let t = state.t[i] as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let m = state.m[i].data_mut();
    let v = state.v[i].data_mut();
    for (j, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
        let m_hat = m[j] / c1;
        let v_hat = v[j] / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Per-sample, per-iteration losses (no gradients), iterations `1..=depth`.
pub fn evaluate<M: Trainable>(model: &M, samples: &[M::Sample], supervision: Supervision) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|s| {
            let tape = Tape::new();
            let params: Vec<Var> = model.blocks().into_iter().map(|b| tape.constant(b.clone())).collect();
            let losses = model.iteration_losses(&tape, &params, s, supervision, model.depth())?;
            Ok(losses.iter().map(Var::item).collect())
        })
        .collect()
}

fn weighted_mean(per_sample: &[Vec<f64>], weights: &[f64]) -> f64 {
    let total: f64 = per_sample
        .iter()
        .map(|l| l.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>())
        .sum();
    total / per_sample.len() as f64
}

/// Mean over samples of the final-iteration loss.
pub fn risk_end_to_end<M: Trainable>(model: &M, samples: &[M::Sample], supervision: Supervision) -> Result<f64> {
    let losses = evaluate(model, samples, supervision)?;
    Ok(weighted_mean(&losses, &end_to_end_weights(model.depth())))
}

/// Mean over samples of `Σ_k α_k · loss_k`.
pub fn risk_multi_iteration<M: Trainable>(
    model: &M,
    samples: &[M::Sample],
    supervision: Supervision,
    alphas: &[f64],
) -> Result<f64> {
    if alphas.len() != model.depth() {
        return Err(Error::Contract(format!(
            "{} iteration weights for depth {}",
            alphas.len(),
            model.depth()
        )));
    }
    let losses = evaluate(model, samples, supervision)?;
    Ok(weighted_mean(&losses, alphas))
}

/// Weighted risk over `samples` and its gradient for every block; blocks with
/// `mask[i] == false` are recorded as constants and get zero gradient.
pub fn risk_and_gradient<M: Trainable>(
    model: &M,
    samples: &[&M::Sample],
    supervision: Supervision,
    weights: &[f64],
    mask: &[bool],
) -> Result<(f64, Vec<Tensor>)> {
    let upto = weights.iter().rposition(|&w| w != 0.0).map_or(0, |i| i + 1);
    if upto == 0 || samples.is_empty() {
        return Err(Error::Contract("risk over no iterations or no samples".into()));
    }
    let per_sample: Vec<Result<(f64, Vec<Tensor>)>> = samples
        .par_iter()
        .map(|s| {
            let tape = Tape::new();
            let params: Vec<Var> = model
                .blocks()
                .into_iter()
                .zip(mask)
                .map(|(b, &m)| tape.leaf(b.clone(), m))
                .collect();
            let losses = model.iteration_losses(&tape, &params, s, supervision, upto)?;
            let terms: Vec<(Var, f64)> = losses
                .into_iter()
                .zip(weights)
                .filter(|(_, &w)| w != 0.0)
                .map(|(l, &w)| (l, w))
                .collect();
            let loss = Var::combine(&terms)?;
            let value = loss.item();
            let mut grads = tape.backward(loss)?;
            Ok((value, params.iter().map(|p| grads.take(*p)).collect()))
        })
        .collect();
    let n = samples.len() as f64;
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for r in per_sample {
        let (v, g) = r?;
        total += v;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&g) {
                    x.axpy(1.0, y);
                }
            }
        }
    }
    let mut grads = acc.expect("at least one sample");
    for g in &mut grads {
        *g = g.scale(1.0 / n);
    }
    Ok((total / n, grads))
}

/// What one optimization stage minimizes and which blocks it may move.
struct Stage {
    label: String,
    weights: Vec<f64>,
    mask: Vec<bool>,
    epochs: usize,
    /// Keep the parameters with the lowest training risk instead of the
    /// lowest validation risk.
    select_on_train: bool,
    supervision: Supervision,
    seed_stream: u64,
}

fn mean_risk<M: Trainable>(model: &M, samples: &[M::Sample], stage: &Stage) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let upto = stage.weights.iter().rposition(|&w| w != 0.0).map_or(0, |i| i + 1);
    let losses: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| {
            let tape = Tape::new();
            let params: Vec<Var> = model.blocks().into_iter().map(|b| tape.constant(b.clone())).collect();
            let losses = model.iteration_losses(&tape, &params, s, stage.supervision, upto)?;
            Ok(losses.iter().map(Var::item).collect())
        })
        .collect::<Result<_>>()?;
    Ok(weighted_mean(&losses, &stage.weights))
}

fn run_stage<M: Trainable>(
    model: &mut M,
    train: &[M::Sample],
    val: &[M::Sample],
    cfg: &TrainConfig,
    stage: &Stage,
) -> Result<TrainReport> {
    let start = Instant::now();
    let info = model.block_info();
    let mut rng = Rng::new(derive_seed(cfg.seed, stage.seed_stream));
    let mut adam = AdamState::new(&model.blocks());
    let mut report = TrainReport::default();

    let score = |m: &M, tr: f64| -> Result<(f64, f64)> {
        let v = mean_risk(m, val, stage)?;
        let key = if stage.select_on_train || val.is_empty() { tr } else { v };
        Ok((v, key))
    };
    let initial_train = mean_risk(model, train, stage)?;
    let (_, mut best_key) = score(model, initial_train)?;
    let mut best = model.clone();
    if !best_key.is_finite() {
        return Err(Error::Training(format!("{} at start", stage.label)));
    }

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=stage.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&M::Sample> = batch.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = risk_and_gradient(model, &samples, stage.supervision, &stage.weights, &stage.mask)
                .map_err(|e| diverged(stage, epoch, e))?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "{}, epoch {epoch}: non-finite loss",
                    stage.label
                )));
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.iter().map(Tensor::frobenius_sq).sum::<f64>().sqrt();
                if norm > clip {
                    for g in &mut grads {
                        *g = g.scale(clip / norm);
                    }
                }
            }
            let mut blocks = model.blocks_mut();
            for (i, p) in blocks.iter_mut().enumerate() {
                if !stage.mask[i] {
                    continue;
                }
                let lr = cfg.lr(info[i].group);
                match cfg.optimizer {
                    Optimizer::Sgd => p.axpy(-lr, &grads[i]),
                    Optimizer::Adam { beta1, beta2, eps } => {
                        adam_step(p, &grads[i], &mut adam, i, lr, beta1, beta2, eps)
                    }
                }
            }
            drop(blocks);
            model.project();
        }
        let train_loss = mean_risk(model, train, stage).map_err(|e| diverged(stage, epoch, e))?;
        if !train_loss.is_finite() {
            return Err(Error::Training(format!(
                "{}, epoch {epoch}: non-finite loss",
                stage.label
            )));
        }
        let (val_loss, key) = score(model, train_loss).map_err(|e| diverged(stage, epoch, e))?;
        if key <= best_key {
            best_key = key;
            best = model.clone();
        }
        log::debug!("{} epoch {epoch}: train {train_loss:e} val {val_loss:e}", stage.label);
        report.push(EpochRecord {
            stage: stage.label.clone(),
            epoch,
            train_loss,
            val_loss,
            wall_ns: start.elapsed().as_nanos(),
        });
    }
    *model = best;
    report.wall = start.elapsed();
    Ok(report)
}

fn diverged(stage: &Stage, epoch: usize, e: Error) -> Error {
    match e {
        Error::Training(_) => e,
        other => Error::Training(format!("{}, epoch {epoch}: {other}", stage.label)),
    }
}

fn stage_mask(info: &[BlockInfo], k: usize) -> Vec<bool> {
    info.iter().map(|b| b.stage.is_none_or(|s| s == k)).collect()
}

/// Trains iteration `k`'s blocks against the loss at iteration `k`, for
/// `k = 1..=K` in order, with earlier blocks frozen. Shared blocks train in
/// every stage. Each stage runs `⌈epochs/K⌉` epochs and keeps its best
/// parameters by training risk.
pub fn train_sequential<M: Trainable>(
    model: &mut M,
    train: &[M::Sample],
    val: &[M::Sample],
    cfg: &TrainConfig,
    supervision: Supervision,
) -> Result<TrainReport> {
    cfg.validate()?;
    let depth = model.depth();
    let per_stage = cfg.epochs.div_ceil(depth);
    let info = model.block_info();
    let mut report = TrainReport::default();
    for k in 0..depth {
        let mut weights = vec![0.0; k + 1];
        weights[k] = 1.0;
        let stage = Stage {
            label: format!("sequential:{}", k + 1),
            weights,
            mask: stage_mask(&info, k),
            epochs: per_stage,
            select_on_train: true,
            supervision,
            seed_stream: k as u64,
        };
        report.extend(run_stage(model, train, val, cfg, &stage)?);
    }
    Ok(report)
}

/// Minibatch training of every block on the selected risk; returns with the
/// best-validation parameters in place.
pub fn train_end_to_end<M: Trainable>(
    model: &mut M,
    train: &[M::Sample],
    val: &[M::Sample],
    cfg: &TrainConfig,
    spec: &LossSpec,
) -> Result<TrainReport> {
    cfg.validate()?;
    let depth = model.depth();
    let stage = Stage {
        label: "end_to_end".into(),
        weights: spec.weights(depth)?,
        mask: vec![true; model.blocks().len()],
        epochs: cfg.epochs,
        select_on_train: false,
        supervision: spec.supervision,
        seed_stream: 0,
    };
    run_stage(model, train, val, cfg, &stage)
}

/// Sequential pre-training on 60% of the epoch budget followed by end-to-end
/// fine-tuning on the rest.
pub fn train_two_stage<M: Trainable>(
    model: &mut M,
    train: &[M::Sample],
    val: &[M::Sample],
    cfg: &TrainConfig,
    spec: &LossSpec,
) -> Result<TrainReport> {
    cfg.validate()?;
    let seq_epochs = ((cfg.epochs as f64) * 0.6).round().max(1.0) as usize;
    let fine_epochs = cfg.epochs.saturating_sub(seq_epochs);
    let mut report = train_sequential(
        model,
        train,
        val,
        &TrainConfig {
            epochs: seq_epochs,
            ..cfg.clone()
        },
        spec.supervision,
    )?;
    if fine_epochs > 0 {
        let fine_spec = LossSpec {
            shape: match spec.shape {
                LossShape::Sequential => LossShape::EndToEnd,
                s => s,
            },
            ..spec.clone()
        };
        report.extend(train_end_to_end(
            model,
            train,
            val,
            &TrainConfig {
                epochs: fine_epochs,
                ..cfg.clone()
            },
            &fine_spec,
        )?);
    }
    Ok(report)
}

/// Dispatches on the loss shape: sequential runs [`train_two_stage`], the
/// others train end to end.
pub fn train<M: Trainable>(
    model: &mut M,
    train: &[M::Sample],
    val: &[M::Sample],
    cfg: &TrainConfig,
    spec: &LossSpec,
) -> Result<TrainReport> {
    match spec.shape {
        LossShape::Sequential => train_two_stage(model, train, val, cfg, spec),
        _ => train_end_to_end(model, train, val, cfg, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `loss_k = (a_k − t)²` with `a_k = a_{k−1} + θ_k`, `a_0 = 0`.
    #[derive(Clone, Debug, PartialEq)]
    struct Chain {
        theta: Vec<Tensor>,
    }

    impl Trainable for Chain {
        type Sample = f64;

        fn depth(&self) -> usize {
            self.theta.len()
        }

        fn blocks(&self) -> Vec<&Tensor> {
            self.theta.iter().collect()
        }

        fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
            self.theta.iter_mut().collect()
        }

        fn block_info(&self) -> Vec<BlockInfo> {
            (0..self.theta.len())
                .map(|k| BlockInfo {
                    group: ParamGroup::Hyper,
                    stage: Some(k),
                })
                .collect()
        }

        fn iteration_losses<'t>(
            &self,
            tape: &'t Tape,
            params: &[Var<'t>],
            sample: &f64,
            _: Supervision,
            upto: usize,
        ) -> Result<Vec<Var<'t>>> {
            let target = tape.constant(Tensor::scalar(*sample));
            let mut a = tape.constant(Tensor::scalar(0.0));
            let mut out = Vec::new();
            for p in params.iter().take(upto) {
                a = a.add(p)?;
                out.push(a.sub(&target)?.square().sum());
            }
            Ok(out)
        }
    }

    fn chain(k: usize) -> Chain {
        Chain {
            theta: vec![Tensor::scalar(0.0); k],
        }
    }

    fn sgd(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: lr,
            net_learning_rate: lr,
            objective_learning_rate: lr,
            optimizer: Optimizer::Sgd,
            grad_clip: None,
            seed: 3,
        }
    }

    #[test]
    fn default_weights_are_log_one_plus_k() {
        let a = default_alphas(3);
        assert!((a[0] - 0.693_147_180_559_945_3).abs() < 1e-15);
        assert!((a[1] - 1.098_612_288_668_109_8).abs() < 1e-15);
    }

    #[test]
    fn risk_equivalences() {
        let mut m = chain(3);
        m.theta = vec![Tensor::scalar(0.3), Tensor::scalar(-0.1), Tensor::scalar(0.5)];
        let data = [1.0, 2.0, -0.5];
        let sup = Supervision::Supervised;
        let e2e = risk_end_to_end(&m, &data, sup).unwrap();
        let multi = risk_multi_iteration(&m, &data, sup, &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(e2e, multi);
        let once = risk_end_to_end(&m, &data[..1], sup).unwrap();
        let twice = risk_end_to_end(&m, &[1.0, 1.0], sup).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once, (0.7f64 - 1.0).powi(2));
        assert!(matches!(
            risk_multi_iteration(&m, &data, sup, &[1.0]),
            Err(Error::Contract(_))
        ));
        // constant trajectory factorizes
        let flat = Chain {
            theta: vec![Tensor::scalar(0.5), Tensor::scalar(0.0), Tensor::scalar(0.0)],
        };
        let a = default_alphas(3);
        let r = risk_multi_iteration(&flat, &[1.0], sup, &a).unwrap();
        assert!((r - a.iter().sum::<f64>() * 0.25).abs() < 1e-15);
    }

    #[test]
    fn adam_closed_forms() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut p, &Tensor::scalar(0.0), &mut st, 0, 0.1, 0.9, 0.999, 1e-8);
        assert_eq!(p.item(), 1.0);

        // hand trace on a scalar with g = 0.5 then g = -0.2
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new(&[&p]);
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        adam_step(&mut p, &Tensor::scalar(0.5), &mut st, 0, lr, b1, b2, eps);
        let m1 = 0.1 * 0.5;
        let v1 = 0.001 * 0.25;
        let p1 = 1.0 - lr * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + eps);
        assert!((p.item() - p1).abs() <= 1e-12);
        assert!((p.item() - (1.0 - lr * 0.5 / (0.5 + eps))).abs() <= 1e-12);
        adam_step(&mut p, &Tensor::scalar(-0.2), &mut st, 0, lr, b1, b2, eps);
        let m2 = 0.9 * m1 + 0.1 * -0.2;
        let v2 = 0.999 * v1 + 0.001 * 0.04;
        let p2 = p1 - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64 * 0.999)).sqrt() + eps);
        assert!((p.item() - p2).abs() <= 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut m = chain(2);
        m.theta[0] = Tensor::scalar(0.123);
        let before = m.clone();
        let data = [1.0, 2.0];
        let cfg = TrainConfig {
            learning_rate: 0.0,
            net_learning_rate: 0.0,
            objective_learning_rate: 0.0,
            ..TrainConfig::default()
        };
        train_end_to_end(&mut m, &data, &[], &cfg, &LossSpec::default()).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn scalar_sgd_converges_geometrically() {
        // one block, one sample: θ ← θ − lr·2(θ − t), so θ_k − t = (1 − 2lr)^k (θ_0 − t)
        let mut m = chain(1);
        let cfg = TrainConfig {
            batch_size: 1,
            ..sgd(0.1, 5)
        };
        let spec = LossSpec {
            shape: LossShape::EndToEnd,
            ..LossSpec::default()
        };
        let report = train_end_to_end(&mut m, &[2.0], &[], &cfg, &spec).unwrap();
        for (k, loss) in report.train_loss.iter().enumerate() {
            let gap = 0.8f64.powi(k as i32 + 1) * 2.0;
            assert!((loss - gap * gap).abs() <= 1e-12);
        }
    }

    #[test]
    fn sequential_freezes_and_descends() {
        let data = [1.0, 1.5, 0.5, 1.2];
        let mut m = chain(3);
        let cfg = sgd(0.05, 6);
        let info = m.block_info();
        for k in 0..3 {
            let before = m.clone();
            let mut weights = vec![0.0; k + 1];
            weights[k] = 1.0;
            let stage = Stage {
                label: format!("s{k}"),
                weights,
                mask: stage_mask(&info, k),
                epochs: 2,
                select_on_train: true,
                supervision: Supervision::Supervised,
                seed_stream: k as u64,
            };
            let start = mean_risk(&m, &data, &stage).unwrap();
            run_stage(&mut m, &data, &[], &cfg, &stage).unwrap();
            assert!(mean_risk(&m, &data, &stage).unwrap() <= start + 1e-9);
            for j in 0..3 {
                if j != k {
                    assert_eq!(m.theta[j], before.theta[j]);
                }
            }
        }
        let refs: Vec<&f64> = data.iter().collect();
        let (_, g) = risk_and_gradient(&m, &refs, Supervision::Supervised, &[0.0, 1.0], &[false, true, true]).unwrap();
        assert_eq!(g[0].item(), 0.0);
        assert_eq!(g[2].item(), 0.0);
    }

    #[test]
    fn depth_one_sequential_equals_end_to_end() {
        let data = [1.0, 3.0, 2.0];
        let cfg = sgd(0.1, 3);
        let mut a = chain(1);
        let mut b = chain(1);
        let ra = train_sequential(&mut a, &data, &[], &cfg, Supervision::Supervised).unwrap();
        let spec = LossSpec {
            shape: LossShape::EndToEnd,
            ..LossSpec::default()
        };
        let rb = train_end_to_end(&mut b, &data, &[], &cfg, &spec).unwrap();
        assert_eq!(ra.train_loss, rb.train_loss);
        assert_eq!(a, b);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = [1.0, 1.5, 0.5, 1.2, 0.9];
        let run = || {
            let mut m = chain(2);
            let cfg = TrainConfig {
                batch_size: 2,
                epochs: 4,
                ..TrainConfig::default()
            };
            let r = train_two_stage(&mut m, &data, &data[..2], &cfg, &LossSpec::default()).unwrap();
            (m, r.train_loss)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
    }
}

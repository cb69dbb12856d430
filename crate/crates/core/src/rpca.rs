//! Unfolded RPCA: `K` iterations of the alternating scaled-gradient solver
//! with trainable parameters under four paradigms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, softplus_inv, Tape, Var};
use crate::classical::{rpca_init, RpcaSolverConfig, RpcaState, Transform};
use crate::container;
use crate::datagen::RpcaInstance;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sparse::CHECKPOINT_MAGIC;
use crate::tensor::Tensor;
use crate::training::{BlockInfo, ParamGroup, Supervision, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    LearnedHyper,
    LearnedObjective,
    LearnedCorrection,
    InductiveBias,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::LearnedHyper,
        Variant::LearnedObjective,
        Variant::LearnedCorrection,
        Variant::InductiveBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::LearnedHyper => "learned_hyper",
            Variant::LearnedObjective => "learned_objective",
            Variant::LearnedCorrection => "learned_correction",
            Variant::InductiveBias => "inductive_bias",
        }
    }

    /// Input and output channels of the per-iteration network, if any.
    fn net_channels(self) -> Option<(usize, usize)> {
        match self {
            Variant::LearnedCorrection => Some((4, 2)),
            Variant::InductiveBias => Some((4, 1)),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Two 3×3 convolutions with a ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    pub k1: Tensor,
    pub b1: Tensor,
    pub k2: Tensor,
    pub b2: Tensor,
}

impl ConvNet {
    fn zeros(c_in: usize, hidden: usize, c_out: usize) -> Self {
        ConvNet {
            k1: Tensor::zeros(&[hidden, c_in, 3, 3]),
            b1: Tensor::zeros(&[hidden]),
            k2: Tensor::zeros(&[c_out, hidden, 3, 3]),
            b2: Tensor::zeros(&[c_out]),
        }
    }

    fn random(c_in: usize, hidden: usize, c_out: usize, std: f64, rng: &mut Rng) -> Self {
        let mut net = ConvNet::zeros(c_in, hidden, c_out);
        for v in net.k1.data_mut().iter_mut().chain(net.k2.data_mut()) {
            *v = std * rng.normal();
        }
        net
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.k1, &self.b1, &self.k2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.k1, &mut self.b1, &mut self.k2, &mut self.b2]
    }
}

fn net_forward<'t>(p: &[Var<'t>], input: &Var<'t>) -> Result<Var<'t>> {
    let h = Var::conv2d(input, &p[0], &p[1])?.relu();
    Var::conv2d(&h, &p[2], &p[3])
}

/// Frozen setting shared by every iteration of a model.
#[derive(Clone, Debug)]
pub struct ModelContext {
    /// The solver's transform (possibly a perturbed copy of the true one).
    pub psi_hat: Tensor,
    pub n2: usize,
    pub rank_r: usize,
    pub depth: usize,
    pub hidden: usize,
    pub shared_nets: bool,
    pub seed: u64,
}

impl ModelContext {
    pub fn new(psi_hat: Tensor, n2: usize, rank_r: usize, depth: usize) -> Self {
        ModelContext {
            psi_hat,
            n2,
            rank_r,
            depth,
            hidden: 8,
            shared_nets: false,
            seed: 0,
        }
    }
}

/// Per-iteration step sizes and threshold, stored unconstrained and mapped
/// through softplus.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperBlock {
    pub raw_eta_l: Tensor,
    pub raw_eta_r: Tensor,
    pub raw_zeta: Tensor,
}

impl HyperBlock {
    pub fn new(eta_l: f64, eta_r: f64, zeta: f64) -> Self {
        HyperBlock {
            raw_eta_l: Tensor::scalar(softplus_inv(eta_l)),
            raw_eta_r: Tensor::scalar(softplus_inv(eta_r)),
            raw_zeta: Tensor::scalar(softplus_inv(zeta)),
        }
    }

    /// `(η_L, η_R, ζ)` as used by the forward pass.
    pub fn values(&self) -> (f64, f64, f64) {
        (
            softplus(self.raw_eta_l.item()),
            softplus(self.raw_eta_r.item()),
            softplus(self.raw_zeta.item()),
        )
    }
}

#[derive(Clone, Debug)]
pub struct UnfoldedRpcaModel {
    variant: Variant,
    depth: usize,
    n1: usize,
    n2: usize,
    rank_r: usize,
    hidden: usize,
    shared_nets: bool,
    init_zeta0: f64,
    seed: u64,
    /// Free-form provenance, written to checkpoints.
    pub stage: String,
    psi_hat: Tensor,
    transform: Transform,
    hyper: Vec<HyperBlock>,
    psis: Vec<Tensor>,
    nets: Vec<ConvNet>,
}

impl PartialEq for UnfoldedRpcaModel {
    fn eq(&self, o: &Self) -> bool {
        self.variant == o.variant
            && self.depth == o.depth
            && (self.n1, self.n2, self.rank_r, self.hidden) == (o.n1, o.n2, o.rank_r, o.hidden)
            && self.shared_nets == o.shared_nets
            && self.init_zeta0.to_bits() == o.init_zeta0.to_bits()
            && self.seed == o.seed
            && self.stage == o.stage
            && self.psi_hat == o.psi_hat
            && self.hyper == o.hyper
            && self.psis == o.psis
            && self.nets == o.nets
    }
}

/// Classical initialization: every iteration gets the baseline's step sizes
/// and threshold, `Ψ_k = Ψ̂`, and conv kernels are drawn with std 1e-3.
pub fn init_from_classical(
    variant: Variant,
    baseline: &RpcaSolverConfig,
    ctx: &ModelContext,
) -> Result<UnfoldedRpcaModel> {
    baseline.validate()?;
    if ctx.depth == 0 || ctx.hidden == 0 {
        return Err(Error::Domain("depth and hidden width must be positive".into()));
    }
    let transform = Transform::new(&ctx.psi_hat)?;
    let n1 = transform.dim();
    if ctx.rank_r == 0 || ctx.rank_r > n1.min(ctx.n2) {
        return Err(Error::Domain(format!(
            "rank {} outside 1..={}",
            ctx.rank_r,
            n1.min(ctx.n2)
        )));
    }
    let hyper = vec![HyperBlock::new(baseline.eta_l, baseline.eta_r, baseline.zeta); ctx.depth];
    let psis = if variant == Variant::LearnedObjective {
        vec![ctx.psi_hat.clone(); ctx.depth]
    } else {
        Vec::new()
    };
    let nets = match variant.net_channels() {
        Some((c_in, c_out)) => {
            let mut rng = Rng::new(ctx.seed);
            let count = if ctx.shared_nets { 1 } else { ctx.depth };
            (0..count)
                .map(|_| ConvNet::random(c_in, ctx.hidden, c_out, 1e-3, &mut rng))
                .collect()
        }
        None => Vec::new(),
    };
    Ok(UnfoldedRpcaModel {
        variant,
        depth: ctx.depth,
        n1,
        n2: ctx.n2,
        rank_r: ctx.rank_r,
        hidden: ctx.hidden,
        shared_nets: ctx.shared_nets,
        init_zeta0: baseline.init_zeta0,
        seed: ctx.seed,
        stage: "init".into(),
        psi_hat: ctx.psi_hat.clone(),
        transform,
        hyper,
        psis,
        nets,
    })
}

/// The transform on a tape, applied the same way as the classical solver.
enum PsiOp<'t> {
    Identity,
    Orthogonal { psi: Var<'t>, psi_t: Var<'t> },
    General { psi: Var<'t> },
}

impl<'t> PsiOp<'t> {
    fn new(tape: &'t Tape, t: &Transform) -> Self {
        match t {
            Transform::Identity(_) => PsiOp::Identity,
            Transform::Orthogonal { psi, psi_t } => PsiOp::Orthogonal {
                psi: tape.constant(psi.clone()),
                psi_t: tape.constant(psi_t.clone()),
            },
            Transform::General { psi, .. } => PsiOp::General {
                psi: tape.constant(psi.clone()),
            },
        }
    }

    fn apply(&self, y: &Var<'t>) -> Result<Var<'t>> {
        match self {
            PsiOp::Identity => Ok(*y),
            PsiOp::Orthogonal { psi, .. } | PsiOp::General { psi } => psi.matmul(y),
        }
    }

    fn apply_inv(&self, z: &Var<'t>) -> Result<Var<'t>> {
        match self {
            PsiOp::Identity => Ok(*z),
            PsiOp::Orthogonal { psi_t, .. } => psi_t.matmul(z),
            PsiOp::General { psi } => Var::solve(psi, z),
        }
    }
}

/// Iterate `k` of a recorded trajectory.
#[derive(Clone, Copy, Debug)]
pub struct StepVars<'t> {
    pub l: Var<'t>,
    pub r: Var<'t>,
    pub y: Var<'t>,
    pub v: Var<'t>,
}

impl UnfoldedRpcaModel {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n1, self.n2)
    }

    pub fn rank(&self) -> usize {
        self.rank_r
    }

    pub fn psi_hat(&self) -> &Tensor {
        &self.psi_hat
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }

    pub fn hyper(&self) -> &[HyperBlock] {
        &self.hyper
    }

    pub fn hyper_mut(&mut self) -> &mut [HyperBlock] {
        &mut self.hyper
    }

    pub fn psis_mut(&mut self) -> &mut [Tensor] {
        &mut self.psis
    }

    pub fn nets_mut(&mut self) -> &mut [ConvNet] {
        &mut self.nets
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.numel()).sum()
    }

    fn per_iter_blocks(&self) -> usize {
        3 + usize::from(self.variant == Variant::LearnedObjective)
            + if self.shared_nets || self.nets.is_empty() { 0 } else { 4 }
    }

    /// Spectral initialization with the model's transform.
    pub fn initial_state(&self, x: &Tensor) -> Result<RpcaState> {
        if x.dims() != [self.n1, self.n2] {
            return Err(Error::Dimension {
                op: "unfolded forward",
                lhs: crate::tensor::Shape::matrix(self.n1, self.n2),
                rhs: x.shape().clone(),
            });
        }
        rpca_init(x, &self.transform, self.rank_r, self.init_zeta0)
    }

    /// Records `upto` iterations from `init` on `tape`, reading parameters
    /// from `params` (in [`Trainable::blocks`] order).
    pub fn forward_on<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        x: &Tensor,
        init: &RpcaState,
        upto: usize,
    ) -> Result<Vec<StepVars<'t>>> {
        let per = self.per_iter_blocks();
        let shared_base = per * self.depth;
        let psi_hat = PsiOp::new(tape, &self.transform);
        let xv = tape.constant(x.clone());
        let scale = x.frobenius() / ((self.n1 * self.n2) as f64).sqrt();
        let norm = if scale > 0.0 { scale } else { 1.0 };
        let mut l = tape.constant(init.l.clone());
        let mut r = tape.constant(init.r_fac.clone());
        let mut y = tape.constant(init.y.clone());
        let mut out = Vec::with_capacity(upto);
        for k in 0..upto.min(self.depth) {
            let base = k * per;
            let eta_l = params[base].softplus();
            let eta_r = params[base + 1].softplus();
            let zeta = params[base + 2].softplus();
            let net = if self.nets.is_empty() {
                None
            } else if self.shared_nets {
                Some(&params[shared_base..shared_base + 4])
            } else {
                let o = base + 3;
                Some(&params[o..o + 4])
            };

            let lr = l.matmul(&r.t())?;
            let net_out = match net {
                Some(p) => {
                    let py = psi_hat.apply(&y)?;
                    let resid = lr.add(&py)?.sub(&xv)?;
                    let stack = Var::stack(&[xv, lr, py, resid])?.scale(1.0 / norm);
                    Some(net_forward(p, &stack)?)
                }
                None => None,
            };

            let (y_next, py_next) = match self.variant {
                Variant::LearnedObjective => {
                    let psi_k = params[base + 3];
                    let y_next = Var::solve(&psi_k, &xv.sub(&lr)?)?.soft_threshold(&zeta)?;
                    (y_next, psi_k.matmul(&y_next)?)
                }
                Variant::InductiveBias => {
                    let est = net_out.expect("network present").channel(0)?.scale(norm);
                    let y_next = est.soft_threshold(&zeta)?;
                    (y_next, psi_hat.apply(&y_next)?)
                }
                _ => {
                    let y_next = psi_hat.apply_inv(&xv.sub(&lr)?)?.soft_threshold(&zeta)?;
                    (y_next, psi_hat.apply(&y_next)?)
                }
            };

            let e = lr.add(&py_next)?.sub(&xv)?;
            let step = Var::gram_solve(&r, &e.matmul(&r)?)?.scale_by(&eta_l)?;
            let mut l_next = l.sub(&step)?;
            if self.variant == Variant::LearnedCorrection {
                let out1 = net_out.expect("network present").channel(0)?;
                let dl = Var::gram_solve(&r, &out1.matmul(&r)?)?.scale(norm);
                l_next = l_next.add(&dl)?;
            }

            let e = l_next.matmul(&r.t())?.add(&py_next)?.sub(&xv)?;
            let step = Var::gram_solve(&l_next, &e.t().matmul(&l_next)?)?.scale_by(&eta_r)?;
            let mut r_next = r.sub(&step)?;
            if self.variant == Variant::LearnedCorrection {
                let out2 = net_out.expect("network present").channel(1)?;
                let dr = Var::gram_solve(&l_next, &out2.t().matmul(&l_next)?)?.scale(norm);
                r_next = r_next.add(&dr)?;
            }

            l = l_next;
            r = r_next;
            y = y_next;
            let finite = l.value().is_finite() && r.value().is_finite() && y.value().is_finite();
            if !finite {
                return Err(Error::Divergence {
                    context: self.variant.name().into(),
                    iteration: k + 1,
                });
            }
            let v = l.matmul(&r.t())?;
            out.push(StepVars { l, r, y, v });
        }
        Ok(out)
    }

    /// Trajectory `(L, R, Y)` for `k = 1..=K` from a given starting state,
    /// without gradients.
    pub fn forward_from(&self, x: &Tensor, init: &RpcaState) -> Result<Vec<RpcaState>> {
        let tape = Tape::new();
        let params: Vec<Var> = self.blocks().into_iter().map(|b| tape.constant(b.clone())).collect();
        let steps = self.forward_on(&tape, &params, x, init, self.depth)?;
        Ok(steps
            .iter()
            .enumerate()
            .map(|(k, s)| RpcaState {
                l: s.l.tensor(),
                r_fac: s.r.tensor(),
                y: s.y.tensor(),
                iter: k + 1,
            })
            .collect())
    }

    /// Trajectory from the spectral initialization.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<RpcaState>> {
        self.forward_from(x, &self.initial_state(x)?)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = RpcaHeader {
            model: "rpca".into(),
            variant: self.variant,
            depth: self.depth,
            n1: self.n1,
            n2: self.n2,
            rank_r: self.rank_r,
            hidden: self.hidden,
            shared_nets: self.shared_nets,
            init_zeta0: self.init_zeta0,
            seed: self.seed,
            stage: self.stage.clone(),
        };
        let mut blocks = vec![&self.psi_hat];
        blocks.extend(self.blocks());
        container::encode(CHECKPOINT_MAGIC, &header, &blocks)
    }

    pub fn decode(bytes: &[u8]) -> Result<UnfoldedRpcaModel> {
        let (h, blocks): (RpcaHeader, Vec<Tensor>) = container::decode(CHECKPOINT_MAGIC, bytes)?;
        let bad = |msg: String| Error::Format { offset: 14, msg };
        if h.model != "rpca" {
            return Err(bad(format!("checkpoint holds a {} model", h.model)));
        }
        let mut blocks = blocks.into_iter();
        let psi_hat = blocks.next().ok_or_else(|| bad("missing transform block".into()))?;
        if psi_hat.dims() != [h.n1, h.n1] {
            return Err(bad(format!("transform block has shape {}", psi_hat.shape())));
        }
        let ctx = ModelContext {
            psi_hat,
            n2: h.n2,
            rank_r: h.rank_r,
            depth: h.depth,
            hidden: h.hidden,
            shared_nets: h.shared_nets,
            seed: h.seed,
        };
        // builds the expected layout, then overwrites every block
        let template = RpcaSolverConfig {
            init_zeta0: h.init_zeta0,
            ..RpcaSolverConfig::new(1.0, 1.0, 1)
        };
        let mut model = init_from_classical(h.variant, &template, &ctx).map_err(|e| bad(e.to_string()))?;
        model.stage = h.stage;
        let rest: Vec<Tensor> = blocks.collect();
        let mut slots = model.blocks_mut();
        if rest.len() != slots.len() {
            return Err(bad(format!(
                "{} parameter blocks, expected {}",
                rest.len(),
                slots.len()
            )));
        }
        for (i, (slot, b)) in slots.iter_mut().zip(rest).enumerate() {
            if slot.shape() != b.shape() {
                return Err(bad(format!(
                    "block {i} has shape {}, expected {}",
                    b.shape(),
                    slot.shape()
                )));
            }
            **slot = b;
        }
        drop(slots);
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct RpcaHeader {
    model: String,
    variant: Variant,
    depth: usize,
    n1: usize,
    n2: usize,
    rank_r: usize,
    hidden: usize,
    shared_nets: bool,
    init_zeta0: f64,
    seed: u64,
    stage: String,
}

impl Trainable for UnfoldedRpcaModel {
    type Sample = RpcaInstance;

    fn depth(&self) -> usize {
        self.depth
    }

    fn blocks(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for k in 0..self.depth {
            let h = &self.hyper[k];
            out.extend([&h.raw_eta_l, &h.raw_eta_r, &h.raw_zeta]);
            if let Some(p) = self.psis.get(k) {
                out.push(p);
            }
            if !self.shared_nets {
                if let Some(n) = self.nets.get(k) {
                    out.extend(n.tensors());
                }
            }
        }
        if self.shared_nets {
            if let Some(n) = self.nets.first() {
                out.extend(n.tensors());
            }
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let shared = self.shared_nets;
        let mut hyper = self.hyper.iter_mut();
        let mut psis = self.psis.iter_mut();
        let mut nets = self.nets.iter_mut();
        let mut out = Vec::new();
        for _ in 0..self.depth {
            let h = hyper.next().expect("one block per iteration");
            out.extend([&mut h.raw_eta_l, &mut h.raw_eta_r, &mut h.raw_zeta]);
            if let Some(p) = psis.next() {
                out.push(p);
            }
            if !shared {
                if let Some(n) = nets.next() {
                    out.extend(n.tensors_mut());
                }
            }
        }
        if shared {
            if let Some(n) = nets.next() {
                out.extend(n.tensors_mut());
            }
        }
        out
    }

    fn block_info(&self) -> Vec<BlockInfo> {
        let mut out = Vec::new();
        let hyper = |k| BlockInfo {
            group: ParamGroup::Hyper,
            stage: Some(k),
        };
        let net = |stage| BlockInfo {
            group: ParamGroup::Net,
            stage,
        };
        for k in 0..self.depth {
            out.extend([hyper(k); 3]);
            if k < self.psis.len() {
                out.push(BlockInfo {
                    group: ParamGroup::Objective,
                    stage: Some(k),
                });
            }
            if !self.shared_nets && k < self.nets.len() {
                out.extend([net(Some(k)); 4]);
            }
        }
        if self.shared_nets && !self.nets.is_empty() {
            out.extend([net(None); 4]);
        }
        out
    }

    fn iteration_losses<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        sample: &RpcaInstance,
        supervision: Supervision,
        upto: usize,
    ) -> Result<Vec<Var<'t>>> {
        let init = self.initial_state(&sample.x_obs)?;
        let steps = self.forward_on(tape, params, &sample.x_obs, &init, upto)?;
        match supervision {
            Supervision::Supervised => {
                let denom = sample.v_star.frobenius_sq();
                if denom == 0.0 {
                    return Err(Error::Contract("low-rank ground truth is identically zero".into()));
                }
                let target = tape.constant(sample.v_star.clone());
                steps
                    .iter()
                    .map(|s| Ok(s.v.sub(&target)?.frobenius_sq().scale(1.0 / denom)))
                    .collect()
            }
            Supervision::Unsupervised { lambda } => {
                let psi = PsiOp::new(tape, &self.transform);
                let x = tape.constant(sample.x_obs.clone());
                steps
                    .iter()
                    .map(|s| {
                        let fit = s.v.add(&psi.apply(&s.y)?)?.sub(&x)?.frobenius_sq().scale(0.5);
                        fit.add(&s.y.sum_abs().scale(lambda))
                    })
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::{rpca_iterate, supervised_loss};
    use crate::datagen::{gen_rpca_instance, perturb_objective, PsiMode};

    fn classical_cfg() -> RpcaSolverConfig {
        RpcaSolverConfig::new(0.6, 0.05, 4)
    }

    fn ctx_for(inst: &RpcaInstance, depth: usize) -> ModelContext {
        ModelContext::new(inst.psi.clone(), inst.dims().1, inst.rank_r, depth)
    }

    fn max_state_diff(a: &RpcaState, b: &RpcaState) -> f64 {
        a.l.max_abs_diff(&b.l)
            .max(a.r_fac.max_abs_diff(&b.r_fac))
            .max(a.y.max_abs_diff(&b.y))
    }

    #[test]
    fn learned_hyper_reproduces_classical() {
        for (seed, mode) in [(0, PsiMode::Identity), (1, PsiMode::Orthogonal)] {
            let inst = gen_rpca_instance(14, 12, 2, 0.1, mode, seed).unwrap();
            let cfg = classical_cfg();
            let model = init_from_classical(Variant::LearnedHyper, &cfg, &ctx_for(&inst, 4)).unwrap();
            let traj = model.forward(&inst.x_obs).unwrap();
            let psi = Transform::new(&inst.psi).unwrap();
            let mut st = rpca_init(&inst.x_obs, &psi, 2, cfg.init_zeta0).unwrap();
            for s in &traj {
                st = rpca_iterate(&st, &inst.x_obs, &psi, &cfg).unwrap();
                assert!(max_state_diff(s, &st) <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_network_and_fixed_objective_reduce_to_hyper() {
        let inst = gen_rpca_instance(12, 10, 2, 0.1, PsiMode::Orthogonal, 5).unwrap();
        let cfg = classical_cfg();
        let ctx = ctx_for(&inst, 3);
        let hyper = init_from_classical(Variant::LearnedHyper, &cfg, &ctx).unwrap();
        let base = hyper.forward(&inst.x_obs).unwrap();

        let mut corr = init_from_classical(Variant::LearnedCorrection, &cfg, &ctx).unwrap();
        for n in corr.nets_mut() {
            *n = ConvNet::zeros(4, 8, 2);
        }
        let obj = init_from_classical(Variant::LearnedObjective, &cfg, &ctx).unwrap();
        for m in [&corr, &obj] {
            for (a, b) in m.forward(&inst.x_obs).unwrap().iter().zip(&base) {
                assert!(max_state_diff(a, b) <= 1e-12);
            }
        }
    }

    #[test]
    fn blocks_are_grouped_by_kind() {
        let ctx = ModelContext::new(Tensor::eye(6), 5, 1, 2);
        let m = init_from_classical(Variant::LearnedObjective, &classical_cfg(), &ctx).unwrap();
        let groups: Vec<ParamGroup> = m.block_info().iter().map(|b| b.group).collect();
        let (h, o) = (ParamGroup::Hyper, ParamGroup::Objective);
        assert_eq!(groups, [h, h, h, o, h, h, h, o]);
        let m = init_from_classical(Variant::InductiveBias, &classical_cfg(), &ctx).unwrap();
        assert!(m.block_info()[3..7]
            .iter()
            .all(|b| b.group == ParamGroup::Net && b.stage == Some(0)));
    }

    #[test]
    fn parameter_counts() {
        let inst = gen_rpca_instance(10, 10, 2, 0.1, PsiMode::Identity, 0).unwrap();
        let cfg = classical_cfg();
        let ctx = ctx_for(&inst, 10);
        let count = |v, shared| {
            let c = ModelContext {
                shared_nets: shared,
                ..ctx.clone()
            };
            init_from_classical(v, &cfg, &c).unwrap().param_count()
        };
        assert_eq!(count(Variant::LearnedHyper, false), 30);
        assert_eq!(count(Variant::LearnedObjective, false), 30 + 10 * 100);
        assert_eq!(count(Variant::LearnedCorrection, false), 30 + 10 * 442);
        assert_eq!(count(Variant::LearnedCorrection, true), 30 + 442);
        assert_eq!(count(Variant::InductiveBias, false), 30 + 10 * 369);
    }

    #[test]
    fn learned_objective_count_at_full_width() {
        let ctx = ModelContext::new(Tensor::eye(100), 100, 5, 10);
        let m = init_from_classical(Variant::LearnedObjective, &classical_cfg(), &ctx).unwrap();
        assert_eq!(m.param_count(), 30 + 100_000);
    }

    #[test]
    fn initialization_is_seeded() {
        let inst = gen_rpca_instance(10, 10, 2, 0.1, PsiMode::Identity, 0).unwrap();
        let ctx = ctx_for(&inst, 2);
        let a = init_from_classical(Variant::InductiveBias, &classical_cfg(), &ctx).unwrap();
        let b = init_from_classical(Variant::InductiveBias, &classical_cfg(), &ctx).unwrap();
        assert_eq!(a, b);
        let c = init_from_classical(
            Variant::InductiveBias,
            &classical_cfg(),
            &ModelContext { seed: 9, ..ctx },
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn correction_init_is_close_to_classical() {
        let inst = gen_rpca_instance(16, 16, 2, 0.1, PsiMode::Identity, 2).unwrap();
        let cfg = classical_cfg();
        let ctx = ctx_for(&inst, 4);
        let hyper = init_from_classical(Variant::LearnedHyper, &cfg, &ctx).unwrap();
        let corr = init_from_classical(Variant::LearnedCorrection, &cfg, &ctx).unwrap();
        let a = supervised_loss(hyper.forward(&inst.x_obs).unwrap().last().unwrap(), &inst.v_star).unwrap();
        let b = supervised_loss(corr.forward(&inst.x_obs).unwrap().last().unwrap(), &inst.v_star).unwrap();
        assert!((a - b).abs() <= 0.01 * a, "{a} vs {b}");
    }

    #[test]
    fn trajectory_is_gauge_invariant() {
        let inst = gen_rpca_instance(12, 11, 2, 0.1, PsiMode::Identity, 6).unwrap();
        let model = init_from_classical(Variant::LearnedHyper, &classical_cfg(), &ctx_for(&inst, 3)).unwrap();
        let init = model.initial_state(&inst.x_obs).unwrap();
        let (c, s) = (0.6f64, 0.8f64);
        let q = Tensor::from_rows(&[&[c, -s], &[s, c]]);
        let rotated = RpcaState {
            l: init.l.matmul(&q).unwrap(),
            r_fac: init.r_fac.matmul(&q).unwrap(),
            ..init.clone()
        };
        assert!(rotated.low_rank().max_abs_diff(&init.low_rank()) <= 1e-12);
        let a = model.forward_from(&inst.x_obs, &init).unwrap();
        let b = model.forward_from(&inst.x_obs, &rotated).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!(p.low_rank().max_abs_diff(&q.low_rank()) <= 1e-10);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let inst = gen_rpca_instance(8, 7, 2, 0.1, PsiMode::Orthogonal, 1).unwrap();
        let psi_hat = perturb_objective(&inst.psi, 0.1, 4).unwrap();
        for v in Variant::ALL {
            for shared in [false, true] {
                let ctx = ModelContext {
                    shared_nets: shared,
                    ..ModelContext::new(psi_hat.clone(), 7, 2, 3)
                };
                let mut m = init_from_classical(v, &classical_cfg(), &ctx).unwrap();
                m.stage = "trained".into();
                let back = UnfoldedRpcaModel::decode(&m.encode().unwrap()).unwrap();
                assert_eq!(back, m);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let inst = gen_rpca_instance(20, 20, 2, 0.1, PsiMode::Orthogonal, 3).unwrap();
        let psi_hat = perturb_objective(&inst.psi, 0.1, 1).unwrap();
        let cfg = RpcaSolverConfig::new(0.5, 0.1, 3);
        for v in Variant::ALL {
            let ctx = ModelContext {
                seed: 2,
                ..ModelContext::new(psi_hat.clone(), 20, 2, 3)
            };
            let mut model = init_from_classical(v, &cfg, &ctx).unwrap();
            // 1e-3 kernels leave many ReLU inputs within one step of the kink
            for n in model.nets_mut() {
                n.k1 = n.k1.map(|x| x * 300.0);
                n.b1 = n.b1.map(|_| 0.1);
            }
            let inputs: Vec<Tensor> = model.blocks().into_iter().cloned().collect();
            for sup in [Supervision::Supervised, Supervision::Unsupervised { lambda: 0.05 }] {
                let errs = crate::autodiff::gradient_check(&inputs, 1e-5, &|t, p| {
                    Ok(*model.iteration_losses(t, p, &inst, sup, 3)?.last().unwrap())
                })
                .unwrap();
                let worst = errs.iter().cloned().fold(0.0, f64::max);
                assert!(worst <= 1e-4, "{v} {sup:?}: {errs:?}");
            }
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let inst = gen_rpca_instance(8, 7, 2, 0.1, PsiMode::Identity, 1).unwrap();
        let m = init_from_classical(Variant::LearnedHyper, &classical_cfg(), &ctx_for(&inst, 2)).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros(&[7, 8])),
            Err(Error::Dimension { .. })
        ));
    }
}

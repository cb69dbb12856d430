//! Reference iterative solvers: gradient descent, ISTA for the LASSO, and the
//! alternating scaled-gradient RPCA solver with grid-search tuning.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{RpcaInstance, SparseRecoveryInstance};
use crate::error::{Error, Result};
use crate::linalg::{self, Lu};
use crate::tensor::Tensor;

pub fn gd_step(s: &Tensor, grad: &Tensor, mu: f64) -> Result<Tensor> {
    s.zip_map(grad, |a, g| a - mu * g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IstaConfig {
    pub mu: f64,
    pub rho: f64,
    pub max_iters: usize,
    pub record_trajectory: bool,
}

impl IstaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(Error::Domain(format!("step size {}", self.mu)));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::Domain(format!("l1 weight {}", self.rho)));
        }
        if self.max_iters == 0 {
            return Err(Error::Domain("zero iterations".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IstaResult {
    pub s: Tensor,
    /// `s⁰ … s^K` when recording, otherwise empty.
    pub iterates: Vec<Tensor>,
    /// Objective at each recorded iterate.
    pub objectives: Vec<f64>,
}

/// `½‖x − Hs‖² + ρ‖s‖₁`
pub fn lasso_objective(s: &Tensor, inst: &SparseRecoveryInstance, rho: f64) -> Result<f64> {
    let r = inst.x.sub(&linalg::matmul(&inst.h, s)?)?;
    Ok(0.5 * r.frobenius_sq() + rho * s.l1())
}

/// One proximal-gradient step `T_{μρ}(s + μHᵀ(x − Hs))`.
pub fn ista_step(s: &Tensor, inst: &SparseRecoveryInstance, mu: f64, rho: f64) -> Result<Tensor> {
    let resid = inst.x.sub(&linalg::matmul(&inst.h, s)?)?;
    let mut z = s.clone();
    z.axpy(mu, &linalg::matmul_tn(&inst.h, &resid)?);
    linalg::soft_threshold(&z, mu * rho)
}

pub fn ista_run(inst: &SparseRecoveryInstance, cfg: &IstaConfig) -> Result<IstaResult> {
    cfg.validate()?;
    let (_, n) = inst.h.rc();
    let mut s = Tensor::zeros(&[n, 1]);
    let mut iterates = Vec::new();
    let mut objectives = Vec::new();
    if cfg.record_trajectory {
        objectives.push(lasso_objective(&s, inst, cfg.rho)?);
        iterates.push(s.clone());
    }
    for k in 1..=cfg.max_iters {
        s = ista_step(&s, inst, cfg.mu, cfg.rho)?;
        let obj = lasso_objective(&s, inst, cfg.rho)?;
        if !obj.is_finite() {
            return Err(Error::Divergence {
                context: "ista".into(),
                iteration: k,
            });
        }
        if cfg.record_trajectory {
            objectives.push(obj);
            iterates.push(s.clone());
        }
    }
    Ok(IstaResult {
        s,
        iterates,
        objectives,
    })
}

/// The transform `Ψ` together with the cheapest exact way to apply `Ψ⁻¹`.
#[derive(Clone, Debug)]
pub enum Transform {
    Identity(usize),
    Orthogonal { psi: Tensor, psi_t: Tensor },
    General { psi: Tensor, lu: Lu },
}

impl Transform {
    pub fn new(psi: &Tensor) -> Result<Self> {
        let (n, c) = psi.rc();
        if n != c {
            return Err(Error::Domain(format!("transform must be square, got {}", psi.shape())));
        }
        if *psi == Tensor::eye(n) {
            return Ok(Transform::Identity(n));
        }
        let gram = linalg::matmul_tn(psi, psi)?;
        if gram.sub(&Tensor::eye(n))?.frobenius() <= 1e-10 {
            return Ok(Transform::Orthogonal {
                psi: psi.clone(),
                psi_t: psi.transpose(),
            });
        }
        Ok(Transform::General {
            psi: psi.clone(),
            lu: Lu::new(psi, "transform inverse")?,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Transform::Identity(n) => *n,
            Transform::Orthogonal { psi, .. } | Transform::General { psi, .. } => psi.rc().0,
        }
    }

    pub fn matrix(&self) -> Tensor {
        match self {
            Transform::Identity(n) => Tensor::eye(*n),
            Transform::Orthogonal { psi, .. } | Transform::General { psi, .. } => psi.clone(),
        }
    }

    /// `Ψ · y`
    pub fn apply(&self, y: &Tensor) -> Result<Tensor> {
        match self {
            Transform::Identity(n) => {
                if y.rc().0 != *n {
                    return Err(Error::dim("transform", &Tensor::eye(*n).shape().clone(), y.shape()));
                }
                Ok(y.clone())
            }
            Transform::Orthogonal { psi, .. } | Transform::General { psi, .. } => linalg::matmul(psi, y),
        }
    }

    /// `Ψ⁻¹ · z`
    pub fn apply_inv(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Transform::Identity(_) => self.apply(z),
            Transform::Orthogonal { psi_t, .. } => linalg::matmul(psi_t, z),
            Transform::General { lu, .. } => lu.solve(z),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpcaState {
    pub l: Tensor,
    pub r_fac: Tensor,
    pub y: Tensor,
    pub iter: usize,
}

impl RpcaState {
    /// `V = L Rᵀ`
    pub fn low_rank(&self) -> Tensor {
        linalg::matmul_nt(&self.l, &self.r_fac).expect("factor shapes agree")
    }

    pub fn is_finite(&self) -> bool {
        self.l.is_finite() && self.r_fac.is_finite() && self.y.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpcaSolverConfig {
    pub eta_l: f64,
    pub eta_r: f64,
    pub zeta: f64,
    pub max_iters: usize,
    /// Threshold for the sparse part at initialization; the default
    /// (`f64::MAX`) starts from `Y⁰ = 0`.
    #[serde(default = "no_sparse_init")]
    pub init_zeta0: f64,
}

fn no_sparse_init() -> f64 {
    f64::MAX
}

impl RpcaSolverConfig {
    pub fn new(eta: f64, zeta: f64, max_iters: usize) -> Self {
        RpcaSolverConfig {
            eta_l: eta,
            eta_r: eta,
            zeta,
            max_iters,
            init_zeta0: f64::MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(self.eta_l) || !ok(self.eta_r) {
            return Err(Error::Domain(format!("step sizes {} / {}", self.eta_l, self.eta_r)));
        }
        if !(self.zeta >= 0.0) || !self.zeta.is_finite() {
            return Err(Error::Domain(format!("threshold {}", self.zeta)));
        }
        if !(self.init_zeta0 >= 0.0) {
            return Err(Error::Domain(format!("initial threshold {}", self.init_zeta0)));
        }
        if self.max_iters == 0 {
            return Err(Error::Domain("zero iterations".into()));
        }
        Ok(())
    }
}

/// Spectral initialization: `Y⁰ = T_{ζ₀}(Ψ⁻¹X)` and balanced factors of the
/// rank-`r` truncated SVD of `X − ΨY⁰`.
pub fn rpca_init(x: &Tensor, psi: &Transform, rank_r: usize, init_zeta0: f64) -> Result<RpcaState> {
    let y = linalg::soft_threshold(&psi.apply_inv(x)?, init_zeta0)?;
    let base = x.sub(&psi.apply(&y)?)?;
    let (mut u, sigma, mut v) = linalg::truncated_svd(&base, rank_r)?;
    for (j, s) in sigma.iter().enumerate() {
        let w = s.sqrt();
        for i in 0..u.rc().0 {
            u.set(i, j, u.at(i, j) * w);
        }
        for i in 0..v.rc().0 {
            v.set(i, j, v.at(i, j) * w);
        }
    }
    Ok(RpcaState {
        l: u,
        r_fac: v,
        y,
        iter: 0,
    })
}

/// One alternating update with explicit step sizes and threshold.
pub fn rpca_step(
    state: &RpcaState,
    x: &Tensor,
    psi: &Transform,
    eta_l: f64,
    eta_r: f64,
    zeta: f64,
) -> Result<RpcaState> {
    let lr = linalg::matmul_nt(&state.l, &state.r_fac)?;
    let y = linalg::soft_threshold(&psi.apply_inv(&x.sub(&lr)?)?, zeta)?;
    let py = psi.apply(&y)?;

    let e = lr.add(&py)?.sub(x)?;
    let gl = linalg::matmul(&e, &state.r_fac)?;
    let l = state.l.sub(&linalg::gram_solve(&state.r_fac, &gl)?.scale(eta_l))?;

    let e = linalg::matmul_nt(&l, &state.r_fac)?.add(&py)?.sub(x)?;
    let gr = linalg::matmul_tn(&e, &l)?;
    let r_fac = state.r_fac.sub(&linalg::gram_solve(&l, &gr)?.scale(eta_r))?;

    Ok(RpcaState {
        l,
        r_fac,
        y,
        iter: state.iter + 1,
    })
}

pub fn rpca_iterate(state: &RpcaState, x: &Tensor, psi: &Transform, cfg: &RpcaSolverConfig) -> Result<RpcaState> {
    rpca_step(state, x, psi, cfg.eta_l, cfg.eta_r, cfg.zeta)
}

/// `½‖LRᵀ + ΨY − X‖²_F + λ‖Y‖₁`
pub fn relaxed_objective(state: &RpcaState, x: &Tensor, psi: &Transform, lambda: f64) -> Result<f64> {
    let e = state.low_rank().add(&psi.apply(&state.y)?)?.sub(x)?;
    Ok(0.5 * e.frobenius_sq() + lambda * state.y.l1())
}

/// `‖V − V⋆‖²_F / ‖V⋆‖²_F`
pub fn supervised_loss(state: &RpcaState, v_star: &Tensor) -> Result<f64> {
    Ok(state.low_rank().sub(v_star)?.frobenius_sq() / v_star.frobenius_sq())
}

fn diverged(state: &RpcaState) -> Result<()> {
    if state.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            context: "classical rpca".into(),
            iteration: state.iter,
        })
    }
}

/// Runs `cfg.max_iters` steps from the spectral initialization and returns
/// the supervised loss after every step.
pub fn rpca_losses(inst: &RpcaInstance, psi_hat: &Transform, cfg: &RpcaSolverConfig) -> Result<(RpcaState, Vec<f64>)> {
    cfg.validate()?;
    let mut state = rpca_init(&inst.x_obs, psi_hat, inst.rank_r, cfg.init_zeta0)?;
    let mut losses = Vec::with_capacity(cfg.max_iters);
    for _ in 0..cfg.max_iters {
        state = rpca_iterate(&state, &inst.x_obs, psi_hat, cfg)?;
        diverged(&state)?;
        losses.push(supervised_loss(&state, &inst.v_star)?);
    }
    Ok((state, losses))
}

/// Iterates until the relative change of `V` drops below `tol` or `cap`
/// steps have run. Returns the final state.
pub fn rpca_converge(
    inst: &RpcaInstance,
    psi_hat: &Transform,
    cfg: &RpcaSolverConfig,
    cap: usize,
    tol: f64,
) -> Result<RpcaState> {
    cfg.validate()?;
    let mut state = rpca_init(&inst.x_obs, psi_hat, inst.rank_r, cfg.init_zeta0)?;
    let mut v = state.low_rank();
    for _ in 0..cap {
        state = rpca_iterate(&state, &inst.x_obs, psi_hat, cfg)?;
        diverged(&state)?;
        let v_next = state.low_rank();
        let change = v_next.sub(&v)?.frobenius();
        let scale = v.frobenius();
        v = v_next;
        if change <= tol * scale {
            break;
        }
    }
    Ok(state)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub rel_err_v: f64,
    pub rel_err_y: f64,
    pub wall_ns: u128,
}

/// Classical run that records the relaxed objective (`λ = ζ`) and relative
/// errors after every step, including the initialization as row 0.
pub fn rpca_trace(inst: &RpcaInstance, psi_hat: &Transform, cfg: &RpcaSolverConfig) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    let start = Instant::now();
    let v_norm = inst.v_star.frobenius();
    let y_norm = inst.y_star.frobenius();
    let row = |state: &RpcaState| -> Result<TraceRow> {
        Ok(TraceRow {
            iter: state.iter,
            objective: relaxed_objective(state, &inst.x_obs, psi_hat, cfg.zeta)?,
            rel_err_v: state.low_rank().sub(&inst.v_star)?.frobenius() / v_norm,
            rel_err_y: state.y.sub(&inst.y_star)?.frobenius() / y_norm,
            wall_ns: start.elapsed().as_nanos(),
        })
    };
    let mut state = rpca_init(&inst.x_obs, psi_hat, inst.rank_r, cfg.init_zeta0)?;
    let mut rows = vec![row(&state)?];
    for _ in 0..cfg.max_iters {
        state = rpca_iterate(&state, &inst.x_obs, psi_hat, cfg)?;
        diverged(&state)?;
        rows.push(row(&state)?);
    }
    Ok(rows)
}

pub fn write_trace_csv(rows: &[TraceRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "iter,objective,rel_err_V,rel_err_Y,wall_ns")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iter, r.objective, r.rel_err_v, r.rel_err_y, r.wall_ns
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneGrid {
    pub etas: Vec<f64>,
    /// Absolute thresholds.
    pub zetas: Vec<f64>,
}

impl TuneGrid {
    /// η ∈ {0.05, …, 1} crossed with ζ ∈ {1/16, …, 8}·ζ̂ in powers of two.
    pub fn standard(zeta_hat: f64) -> Self {
        TuneGrid {
            etas: vec![0.05, 0.1, 0.25, 0.5, 0.75, 1.0],
            zetas: (-4..=3).map(|p| 2f64.powi(p) * zeta_hat).collect(),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median `|Ψ⁻¹(X − ΨY⁰ − L⁰R⁰ᵀ)|` entry after initialization, averaged over
/// the instances.
pub fn residual_scale(instances: &[RpcaInstance], psi_hat: &Transform, init_zeta0: f64) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Tuning("no tuning instances".into()));
    }
    let mut total = 0.0;
    for inst in instances {
        let st = rpca_init(&inst.x_obs, psi_hat, inst.rank_r, init_zeta0)?;
        let resid = inst.x_obs.sub(&st.low_rank())?.sub(&psi_hat.apply(&st.y)?)?;
        let resid = psi_hat.apply_inv(&resid)?;
        total += median(resid.data().iter().map(|v| v.abs()).collect());
    }
    Ok(total / instances.len() as f64)
}

/// Grid point minimizing the mean supervised loss after `iters` steps.
/// Ties go to the smaller η, then the smaller ζ.
pub fn tune_baseline(
    instances: &[RpcaInstance],
    psi_hat: &Transform,
    grid: &TuneGrid,
    iters: usize,
    init_zeta0: f64,
) -> Result<RpcaSolverConfig> {
    if grid.etas.is_empty() || grid.zetas.is_empty() {
        return Err(Error::Tuning("empty grid".into()));
    }
    if instances.is_empty() {
        return Err(Error::Tuning("no tuning instances".into()));
    }
    let mut points: Vec<(f64, f64)> = grid
        .etas
        .iter()
        .flat_map(|&e| grid.zetas.iter().map(move |&z| (e, z)))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let scores: Vec<Option<f64>> = points
        .par_iter()
        .map(|&(eta, zeta)| {
            let mut cfg = RpcaSolverConfig::new(eta, zeta, iters);
            cfg.init_zeta0 = init_zeta0;
            let mut sum = 0.0;
            for inst in instances {
                let (_, losses) = rpca_losses(inst, psi_hat, &cfg).ok()?;
                sum += *losses.last()?;
            }
            let mean = sum / instances.len() as f64;
            mean.is_finite().then_some(mean)
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((i, s));
            }
        }
    }
    let (idx, loss) = best.ok_or_else(|| Error::Tuning("every grid point diverged".into()))?;
    log::info!(
        "tuned baseline: eta={} zeta={} loss={loss:e}",
        points[idx].0,
        points[idx].1
    );
    let mut cfg = RpcaSolverConfig::new(points[idx].0, points[idx].1, iters);
    cfg.init_zeta0 = init_zeta0;
    Ok(cfg)
}

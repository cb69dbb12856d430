//! Experiment configuration, the matched and mismatched RPCA studies, the
//! LISTA diagnostics, and report emission (CSV, JSON, SVG).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::classical::{
    ista_run, residual_scale, rpca_converge, rpca_losses, supervised_loss, tune_baseline, IstaConfig, RpcaSolverConfig,
    Transform, TuneGrid,
};
use crate::datagen::{
    gen_rpca_dataset, gen_sparse_dataset, perturb_objective, Dataset, PsiMode, RpcaInstance, RpcaParams, Split,
};
use crate::error::{Error, Result};
use crate::linalg::spectral_norm;
use crate::rng::derive_seed;
use crate::rpca::{init_from_classical, ModelContext, UnfoldedRpcaModel, Variant};
use crate::sparse::{coupling_residual, lista_forward, lista_init_from_ista, rate_fit, ListaModel};
use crate::training::{evaluate, train, LossSpec, Supervision, TrainConfig, TrainReport};

const DATA_STREAM: u64 = 1;
const PERTURB_STREAM: u64 = 2;
const MODEL_STREAM: u64 = 3;
const TRAIN_STREAM: u64 = 4;
const LISTA_STREAM: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub n1: usize,
    pub n2: usize,
    pub rank_r: usize,
    pub sparse_frac: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            n1: 100,
            n2: 100,
            rank_r: 5,
            sparse_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        DataSizes {
            train: 256,
            val: 32,
            test: 64,
        }
    }
}

impl DataSizes {
    pub fn split(&self) -> Split {
        Split::contiguous(self.train, self.val, self.test)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::Config(format!(
                "{what}: train, val and test counts must be positive"
            )));
        }
        Ok(())
    }
}

/// Settings for the classical reference run to convergence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub converge_cap: usize,
    /// Stop once `‖V⁺ − V‖_F ≤ tol·‖V‖_F`.
    pub converge_tol: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            converge_cap: 50_000,
            converge_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ListaConfig {
    pub m: usize,
    pub n: usize,
    pub nonzeros: usize,
    pub noise_sigma: f64,
    pub depth: usize,
    /// ℓ1 weight of the ISTA reference; its step is `1/σ_max(H)²`.
    pub rho: f64,
    pub tied: bool,
    pub data: DataSizes,
    pub loss: LossSpec,
    pub train: TrainConfig,
}

impl Default for ListaConfig {
    fn default() -> Self {
        ListaConfig {
            m: 50,
            n: 100,
            nonzeros: 5,
            noise_sigma: 0.0,
            depth: 16,
            rho: 0.02,
            tied: false,
            data: DataSizes {
                train: 512,
                val: 64,
                test: 128,
            },
            loss: LossSpec::default(),
            train: TrainConfig {
                epochs: 32,
                ..TrainConfig::default()
            },
        }
    }
}

impl ListaConfig {
    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.depth == 0 {
            return Err(Error::Config("lista: m, n and depth must be positive".into()));
        }
        if self.nonzeros == 0 || self.nonzeros > self.n {
            return Err(Error::Config(format!(
                "lista: {} nonzeros with n = {}",
                self.nonzeros, self.n
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) || !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(
                "lista: noise_sigma and rho must be finite and nonnegative".into(),
            ));
        }
        self.data.validate("lista.data")?;
        self.loss.validate(self.depth).map_err(config_err)?;
        self.train.validate().map_err(config_err)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Unfolded depth `K`; also the classical tuning horizon.
    pub depth: usize,
    /// Relative perturbation of the transform in the mismatch study.
    pub delta: f64,
    /// Unfolded variants to train; empty runs the classical baseline only.
    pub variants: Vec<Variant>,
    pub hidden_channels: usize,
    pub shared_nets: bool,
    pub problem: ProblemConfig,
    pub data: DataSizes,
    pub baseline: BaselineConfig,
    pub loss: LossSpec,
    pub train: TrainConfig,
    pub lista: ListaConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("results"),
            depth: 10,
            delta: 0.1,
            variants: Variant::ALL.to_vec(),
            hidden_channels: 8,
            shared_nets: false,
            problem: ProblemConfig::default(),
            data: DataSizes::default(),
            baseline: BaselineConfig::default(),
            loss: LossSpec::default(),
            train: TrainConfig::default(),
            lista: ListaConfig::default(),
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::from_toml_str(&fs::read_to_string(path)?)
    }

    /// Switches the RPCA problem to `n1 = n2 = 1000`.
    pub fn full_scale(mut self) -> Self {
        self.problem.n1 = 1000;
        self.problem.n2 = 1000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if p.n1 == 0 || p.n2 == 0 {
            return Err(Error::Config("problem dimensions must be positive".into()));
        }
        if p.rank_r == 0 || p.rank_r > p.n1.min(p.n2) {
            return Err(Error::Config(format!(
                "rank {} outside 1..={}",
                p.rank_r,
                p.n1.min(p.n2)
            )));
        }
        if !(p.sparse_frac > 0.0 && p.sparse_frac < 1.0) {
            return Err(Error::Config(format!("sparse_frac {} outside (0, 1)", p.sparse_frac)));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be positive".into()));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta {}", self.delta)));
        }
        if self.hidden_channels == 0 {
            return Err(Error::Config("hidden_channels must be positive".into()));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return Err(Error::Config(format!("variant {v} listed twice")));
            }
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::Config("empty output directory".into()));
        }
        if self.baseline.converge_cap == 0 || !(self.baseline.converge_tol >= 0.0) {
            return Err(Error::Config(
                "baseline: converge_cap must be positive and converge_tol nonnegative".into(),
            ));
        }
        self.data.validate("data")?;
        self.loss.validate(self.depth).map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        self.lista.validate()
    }

    fn rpca_params(&self, mode: PsiMode) -> RpcaParams {
        RpcaParams {
            n1: self.problem.n1,
            n2: self.problem.n2,
            rank_r: self.problem.rank_r,
            sparse_frac: self.problem.sparse_frac,
            psi_mode: mode,
        }
    }

    pub fn dataset_seed(&self) -> u64 {
        derive_seed(self.seed, DATA_STREAM)
    }

    pub fn perturbation_seed(&self) -> u64 {
        derive_seed(self.seed, PERTURB_STREAM)
    }

    pub fn model_seed(&self, v: Variant) -> u64 {
        derive_seed(derive_seed(self.seed, MODEL_STREAM), variant_index(v))
    }

    pub fn training_seed(&self, v: Variant) -> u64 {
        derive_seed(
            derive_seed(derive_seed(self.seed, TRAIN_STREAM), self.train.seed),
            variant_index(v),
        )
    }

    pub fn lista_seed(&self) -> u64 {
        derive_seed(self.seed, LISTA_STREAM)
    }

    fn seeds_json(&self) -> serde_json::Value {
        let models: serde_json::Map<String, serde_json::Value> = self
            .variants
            .iter()
            .map(|&v| {
                (
                    v.name().to_string(),
                    json!({"init": self.model_seed(v), "training": self.training_seed(v)}),
                )
            })
            .collect();
        json!({
            "experiment": self.seed,
            "dataset": self.dataset_seed(),
            "perturbation": self.perturbation_seed(),
            "lista": self.lista_seed(),
            "models": models,
        })
    }
}

fn variant_index(v: Variant) -> u64 {
    Variant::ALL.iter().position(|&w| w == v).expect("listed variant") as u64
}

/// Which RPCA study to set up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setting {
    /// `Ψ = I`, solvers see the true transform.
    Matched,
    /// Orthogonal `Ψ`, solvers see `Ψ̃ = perturb_objective(Ψ, δ)`.
    Mismatch,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Matched => "matched",
            Setting::Mismatch => "mismatch",
        }
    }
}

/// Generated data for one RPCA study plus the transform handed to solvers.
#[derive(Clone, Debug)]
pub struct StudyData {
    pub dataset: Dataset,
    pub psi_hat: crate::tensor::Tensor,
    pub train: Vec<RpcaInstance>,
    pub val: Vec<RpcaInstance>,
    pub test: Vec<RpcaInstance>,
}

pub fn study_data(cfg: &ExperimentConfig, setting: Setting) -> Result<StudyData> {
    let mode = match setting {
        Setting::Matched => PsiMode::Identity,
        Setting::Mismatch => PsiMode::Orthogonal,
    };
    let dataset = gen_rpca_dataset(&cfg.rpca_params(mode), cfg.data.split(), cfg.dataset_seed())?;
    study_from_dataset(cfg, setting, dataset)
}

/// Wraps an existing RPCA dataset; the mismatch setting perturbs its
/// transform with the configured `δ`.
pub fn study_from_dataset(cfg: &ExperimentConfig, setting: Setting, dataset: Dataset) -> Result<StudyData> {
    let insts = dataset
        .rpca()
        .ok_or_else(|| Error::Config("expected an RPCA dataset".into()))?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| insts[i].clone()).collect::<Vec<_>>();
    let (train, val, test) = (
        pick(&dataset.split.train),
        pick(&dataset.split.val),
        pick(&dataset.split.test),
    );
    let psi = &insts.first().ok_or_else(|| Error::Config("empty dataset".into()))?.psi;
    let psi_hat = match setting {
        Setting::Matched => psi.clone(),
        Setting::Mismatch => perturb_objective(psi, cfg.delta, cfg.perturbation_seed())?,
    };
    Ok(StudyData {
        dataset,
        psi_hat,
        train,
        val,
        test,
    })
}

/// Grid-searched classical configuration for `depth` iterations on the
/// validation instances.
pub fn tune_for(cfg: &ExperimentConfig, data: &StudyData) -> Result<RpcaSolverConfig> {
    let psi_hat = Transform::new(&data.psi_hat)?;
    let zeta_hat = residual_scale(&data.val, &psi_hat, f64::MAX)?;
    tune_baseline(&data.val, &psi_hat, &TuneGrid::standard(zeta_hat), cfg.depth, f64::MAX)
}

/// Builds a variant from the tuned baseline and trains it.
pub fn train_variant(
    cfg: &ExperimentConfig,
    data: &StudyData,
    baseline: &RpcaSolverConfig,
    variant: Variant,
) -> Result<(UnfoldedRpcaModel, TrainReport)> {
    let ctx = ModelContext {
        hidden: cfg.hidden_channels,
        shared_nets: cfg.shared_nets,
        seed: cfg.model_seed(variant),
        ..ModelContext::new(data.psi_hat.clone(), cfg.problem.n2, cfg.problem.rank_r, cfg.depth)
    };
    let mut model = init_from_classical(variant, baseline, &ctx)?;
    let train_cfg = TrainConfig {
        seed: cfg.training_seed(variant),
        ..cfg.train.clone()
    };
    let report = train(&mut model, &data.train, &data.val, &train_cfg, &cfg.loss)?;
    model.stage = "trained".into();
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub name: String,
    /// Iteration index of each loss column.
    pub iterations: Vec<usize>,
    /// `losses[i][j]`: test instance `i` after `iterations[j]` steps.
    pub losses: Vec<Vec<f64>>,
    pub param_count: usize,
    pub train_secs: f64,
    pub infer_secs: f64,
}

impl MethodResult {
    pub fn n_test(&self) -> usize {
        self.losses.len()
    }

    /// Mean over test instances, per column.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.losses.len() as f64;
        (0..self.iterations.len())
            .map(|j| self.losses.iter().map(|l| l[j]).sum::<f64>() / n)
            .collect()
    }

    /// Sample standard deviation over test instances, per column.
    pub fn std(&self) -> Vec<f64> {
        let n = self.losses.len();
        self.mean()
            .iter()
            .enumerate()
            .map(|(j, m)| {
                if n < 2 {
                    return 0.0;
                }
                let ss: f64 = self.losses.iter().map(|l| (l[j] - m).powi(2)).sum();
                (ss / (n - 1) as f64).sqrt()
            })
            .collect()
    }

    pub fn final_mean(&self) -> f64 {
        *self.mean().last().unwrap_or(&f64::NAN)
    }

    fn is_finite(&self) -> bool {
        self.losses.iter().flatten().all(|v| v.is_finite())
    }
}

/// Extra file written next to the report (checkpoints, training logs).
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub path: PathBuf,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config: ExperimentConfig,
    pub delta: Option<f64>,
    pub baseline: Option<RpcaSolverConfig>,
    /// Trajectory methods first; single-column references (the converged
    /// classical run) after them.
    pub methods: Vec<MethodResult>,
    pub diagnostics: serde_json::Value,
    pub artifacts: Vec<Artifact>,
}

impl ExperimentReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.name == name)
    }

    pub fn results_csv(&self) -> String {
        let mut out = String::from("method,iteration,mean_loss,std_loss,n_test\n");
        for m in &self.methods {
            for ((it, mean), std) in m.iterations.iter().zip(m.mean()).zip(m.std()) {
                let _ = writeln!(out, "{},{},{},{},{}", m.name, it, mean, std, m.n_test());
            }
        }
        out
    }

    pub fn per_instance_csv(&self) -> String {
        let mut out = String::from("method,iteration,instance,loss\n");
        for m in &self.methods {
            for (i, row) in m.losses.iter().enumerate() {
                for (it, v) in m.iterations.iter().zip(row) {
                    let _ = writeln!(out, "{},{},{},{}", m.name, it, i, v);
                }
            }
        }
        out
    }

    pub fn meta_json(&self) -> Result<String> {
        let methods: Vec<serde_json::Value> = self
            .methods
            .iter()
            .map(|m| {
                json!({
                    "name": m.name,
                    "param_count": m.param_count,
                    "train_secs": m.train_secs,
                    "infer_secs": m.infer_secs,
                })
            })
            .collect();
        let meta = json!({
            "experiment": self.experiment,
            "config": self.config,
            "seeds": self.config.seeds_json(),
            "versions": {
                "unfold": env!("CARGO_PKG_VERSION"),
                "dataset_format": crate::container::FORMAT_VERSION,
                "checkpoint_format": crate::container::FORMAT_VERSION,
            },
            "delta": self.delta,
            "baseline": self.baseline,
            "methods": methods,
            "diagnostics": self.diagnostics,
        });
        serde_json::to_string_pretty(&meta).map_err(|e| Error::Numeric(e.to_string()))
    }

    /// Mean loss per iteration on a log axis, one polyline per trajectory
    /// method and a dashed line per single-column reference.
    pub fn svg(&self) -> String {
        const W: f64 = 720.0;
        const H: f64 = 480.0;
        const PAD: f64 = 60.0;
        const COLORS: [&str; 8] = [
            "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
        ];
        let means: Vec<Vec<f64>> = self.methods.iter().map(MethodResult::mean).collect();
        let positive = means.iter().flatten().copied().filter(|v| *v > 0.0);
        let (lo, hi) = positive.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (lo, hi) = if lo.is_finite() {
            (lo.log10().floor(), hi.log10().ceil().max(lo.log10().floor() + 1.0))
        } else {
            (-1.0, 0.0)
        };
        let k_max = self
            .methods
            .iter()
            .filter(|m| m.iterations.len() > 1)
            .flat_map(|m| m.iterations.iter().copied())
            .max()
            .unwrap_or(1)
            .max(2);
        let x = |k: usize| PAD + (k as f64 - 1.0) / (k_max as f64 - 1.0) * (W - 2.0 * PAD);
        let y = |v: f64| {
            let t = (v.max(10f64.powf(lo)).log10() - lo) / (hi - lo);
            H - PAD - t * (H - 2.0 * PAD)
        };

        let mut s = String::new();
        let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
            H - PAD,
            W - PAD
        );
        for e in (lo as i32)..=(hi as i32) {
            let yy = y(10f64.powi(e));
            let _ = writeln!(
                s,
                r##"<line x1="{PAD}" x2="{}" y1="{yy:.2}" y2="{yy:.2}" stroke="#ddd"/>"##,
                W - PAD
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.2}" font-size="11" text-anchor="end">1e{e}</text>"#,
                PAD - 6.0,
                yy + 4.0
            );
        }
        for k in 1..=k_max {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" font-size="11" text-anchor="middle">{k}</text>"#,
                x(k),
                H - PAD + 16.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">iteration</text>"#,
            W / 2.0,
            H - 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" font-size="13" text-anchor="middle">{} (mean test loss)</text>"#,
            W / 2.0,
            xml_escape(&self.experiment)
        );

        for (i, (m, mean)) in self.methods.iter().zip(&means).enumerate() {
            let color = COLORS[i % COLORS.len()];
            if m.iterations.len() > 1 {
                let pts: Vec<String> = m
                    .iterations
                    .iter()
                    .zip(mean)
                    .map(|(&k, &v)| format!("{:.2},{:.2}", x(k), y(v)))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                    pts.join(" ")
                );
            } else if let Some(&v) = mean.first() {
                let _ = writeln!(
                    s,
                    r#"<line x1="{PAD}" x2="{}" y1="{:.2}" y2="{:.2}" stroke="{color}" stroke-dasharray="6 4"/>"#,
                    W - PAD,
                    y(v),
                    y(v)
                );
            }
            let ly = PAD + 16.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{ly:.2}" font-size="11" fill="{color}">{}</text>"#,
                W - PAD - 150.0,
                xml_escape(&m.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let v = f()?;
    Ok((v, start.elapsed().as_secs_f64()))
}

fn run_rpca_study(cfg: &ExperimentConfig, setting: Setting) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = study_data(cfg, setting).map_err(|e| e.at_stage("generate"))?;
    let psi_hat = Transform::new(&data.psi_hat).map_err(|e| e.at_stage("generate"))?;
    log::info!(
        "{}: {} train / {} val / {} test instances",
        setting.name(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );

    let (baseline, tune_secs) = timed(|| tune_for(cfg, &data)).map_err(|e| e.at_stage("tune"))?;
    log::info!("tuned baseline: eta {} zeta {}", baseline.eta_l, baseline.zeta);

    let (classical, infer_secs) = timed(|| {
        data.test
            .par_iter()
            .map(|inst| rpca_losses(inst, &psi_hat, &baseline).map(|(_, l)| l))
            .collect::<Result<Vec<_>>>()
    })
    .map_err(|e| e.at_stage("classical"))?;
    let (converged, converge_secs) = timed(|| {
        data.test
            .par_iter()
            .map(|inst| {
                let st = rpca_converge(
                    inst,
                    &psi_hat,
                    &baseline,
                    cfg.baseline.converge_cap,
                    cfg.baseline.converge_tol,
                )?;
                Ok((supervised_loss(&st, &inst.v_star)?, st.iter))
            })
            .collect::<Result<Vec<_>>>()
    })
    .map_err(|e| e.at_stage("classical convergence"))?;
    let converge_iters: Vec<usize> = converged.iter().map(|c| c.1).collect();
    log::info!(
        "classical converged in at most {} iterations",
        converge_iters.iter().max().unwrap_or(&0)
    );

    let iterations: Vec<usize> = (1..=cfg.depth).collect();
    let mut methods = vec![MethodResult {
        name: "classical".into(),
        iterations: iterations.clone(),
        losses: classical,
        param_count: 0,
        train_secs: tune_secs,
        infer_secs,
    }];
    let mut artifacts = Vec::new();
    let mut logs = serde_json::Map::new();
    for &v in &cfg.variants {
        let stage = format!("train {v}");
        log::info!("{stage}");
        let ((model, report), train_secs) =
            timed(|| train_variant(cfg, &data, &baseline, v)).map_err(|e| e.at_stage(&stage))?;
        let (losses, infer_secs) = timed(|| evaluate(&model, &data.test, Supervision::Supervised))
            .map_err(|e| e.at_stage(format!("evaluate {v}")))?;
        log::info!(
            "{v}: final test loss {:e}",
            losses.iter().map(|l| l[cfg.depth - 1]).sum::<f64>() / losses.len() as f64
        );
        artifacts.push(Artifact {
            path: PathBuf::from(format!("checkpoints/{v}.unfck")),
            bytes: model.encode()?,
        });
        artifacts.push(Artifact {
            path: PathBuf::from(format!("logs/{v}.csv")),
            bytes: report.to_csv().into_bytes(),
        });
        logs.insert(
            v.name().into(),
            json!({"epochs": report.log.len(), "final_train_loss": report.train_loss.last()}),
        );
        methods.push(MethodResult {
            name: v.name().into(),
            iterations: iterations.clone(),
            losses,
            param_count: model.param_count(),
            train_secs,
            infer_secs,
        });
    }
    methods.push(MethodResult {
        name: "classical_converged".into(),
        iterations: vec![converge_iters.iter().copied().max().unwrap_or(0)],
        losses: converged.iter().map(|c| vec![c.0]).collect(),
        param_count: 0,
        train_secs: 0.0,
        infer_secs: converge_secs,
    });

    Ok(ExperimentReport {
        experiment: setting.name().into(),
        config: cfg.clone(),
        delta: (setting == Setting::Mismatch).then_some(cfg.delta),
        baseline: Some(baseline),
        methods,
        diagnostics: json!({
            "converge_iterations": converge_iters,
            "training": logs,
        }),
        artifacts,
    })
}

/// Tunes, trains and evaluates every configured variant with `Ψ = I`.
pub fn run_matched(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_rpca_study(cfg, Setting::Matched)
}

/// As [`run_matched`], with an orthogonal `Ψ` and every solver handed the
/// perturbed `Ψ̃`.
pub fn run_mismatch(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_rpca_study(cfg, Setting::Mismatch)
}

/// Per-layer `‖s^k − s⋆‖₂` averaged over instances.
fn mean_layer_errors(model: &ListaModel, insts: &[crate::datagen::SparseRecoveryInstance]) -> Result<Vec<f64>> {
    let per: Vec<Vec<f64>> = insts
        .par_iter()
        .map(|inst| {
            lista_forward(model, &inst.x)?
                .iter()
                .map(|s| Ok(s.sub(&inst.s_star)?.frobenius()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok((0..model.depth())
        .map(|k| per.iter().map(|p| p[k]).sum::<f64>() / n)
        .collect())
}

/// Trains free LISTA and LISTA-CP from the ISTA initialization and reports
/// per-layer NMSE, coupling residuals and fitted decay rates.
pub fn run_lista_diag(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let l = &cfg.lista;
    let ds = gen_sparse_dataset(l.m, l.n, l.nonzeros, l.noise_sigma, l.data.split(), cfg.lista_seed())
        .map_err(|e| e.at_stage("generate"))?;
    let insts = ds.sparse().expect("sparse dataset");
    let pick = |idx: &[usize]| idx.iter().map(|&i| insts[i].clone()).collect::<Vec<_>>();
    let (train_set, val_set, test_set) = (pick(&ds.split.train), pick(&ds.split.val), pick(&ds.split.test));
    let h = insts[0].h.clone();
    let mu = 1.0 / spectral_norm(&h).map_err(|e| e.at_stage("generate"))?.powi(2);
    let iterations: Vec<usize> = (1..=l.depth).collect();

    let ista_cfg = IstaConfig {
        mu,
        rho: l.rho,
        max_iters: l.depth,
        record_trajectory: true,
    };
    let (ista, ista_secs) = timed(|| {
        test_set
            .par_iter()
            .map(|inst| {
                let run = ista_run(inst, &ista_cfg)?;
                let denom = inst.s_star.frobenius_sq();
                run.iterates[1..]
                    .iter()
                    .map(|s| Ok(s.sub(&inst.s_star)?.frobenius_sq() / denom))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()
    })
    .map_err(|e| e.at_stage("ista"))?;
    let mut methods = vec![MethodResult {
        name: "ista".into(),
        iterations: iterations.clone(),
        losses: ista,
        param_count: 0,
        train_secs: 0.0,
        infer_secs: ista_secs,
    }];

    let init = lista_init_from_ista(&h, mu, l.rho, l.depth, false, l.tied).map_err(|e| e.at_stage("init"))?;
    let init_nmse = evaluate(&init, &test_set, Supervision::Supervised).map_err(|e| e.at_stage("init"))?;
    let init_gap = init_nmse
        .iter()
        .flatten()
        .zip(methods[0].losses.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut diag_coupling = serde_json::Map::new();
    let mut diag_rate = serde_json::Map::new();
    diag_coupling.insert("ista_init".into(), json!(coupling_residual(&init, &h)?));
    let mut artifacts = Vec::new();
    for (name, coupled) in [("lista", false), ("lista_cp", true)] {
        let stage = format!("train {name}");
        let mut model =
            lista_init_from_ista(&h, mu, l.rho, l.depth, coupled, l.tied).map_err(|e| e.at_stage(&stage))?;
        let train_cfg = TrainConfig {
            seed: derive_seed(cfg.lista_seed(), u64::from(coupled)),
            ..l.train.clone()
        };
        let (report, train_secs) =
            timed(|| train(&mut model, &train_set, &val_set, &train_cfg, &l.loss)).map_err(|e| e.at_stage(&stage))?;
        let (losses, infer_secs) = timed(|| evaluate(&model, &test_set, Supervision::Supervised))
            .map_err(|e| e.at_stage(format!("evaluate {name}")))?;
        diag_coupling.insert(name.into(), json!(coupling_residual(&model, &h)?));
        let errors = mean_layer_errors(&model, &test_set)?;
        let fit = match rate_fit(&errors, l.noise_sigma) {
            Ok(f) => json!(f),
            Err(e) => json!({"error": e.to_string()}),
        };
        diag_rate.insert(name.into(), json!({"layer_errors": errors, "fit": fit}));
        artifacts.push(Artifact {
            path: PathBuf::from(format!("checkpoints/{name}.unfck")),
            bytes: model.encode()?,
        });
        artifacts.push(Artifact {
            path: PathBuf::from(format!("logs/{name}.csv")),
            bytes: report.to_csv().into_bytes(),
        });
        methods.push(MethodResult {
            name: name.into(),
            iterations: iterations.clone(),
            losses,
            param_count: model.trainable_count(),
            train_secs,
            infer_secs,
        });
    }

    Ok(ExperimentReport {
        experiment: "lista".into(),
        config: cfg.clone(),
        delta: None,
        baseline: None,
        methods,
        diagnostics: json!({
            "mu": mu,
            "rho": l.rho,
            "init_max_abs_gap_to_ista": init_gap,
            "coupling_residual": diag_coupling,
            "rate": diag_rate,
        }),
        artifacts,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes `results.csv`, `per_instance.csv`, `meta.json`,
/// `loss_vs_iter.svg` and the artifacts into `dir`. Files are staged in a
/// sibling directory first; on failure nothing is left behind.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if let Some(m) = report.methods.iter().find(|m| !m.is_finite()) {
        return Err(Error::Numeric(format!("non-finite losses for {}", m.name)));
    }
    let mut files: Vec<(PathBuf, Vec<u8>)> = vec![
        ("results.csv".into(), report.results_csv().into_bytes()),
        ("per_instance.csv".into(), report.per_instance_csv().into_bytes()),
        ("meta.json".into(), report.meta_json()?.into_bytes()),
        ("loss_vs_iter.svg".into(), report.svg().into_bytes()),
    ];
    files.extend(report.artifacts.iter().map(|a| (a.path.clone(), a.bytes.clone())));

    let name = dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path {} has no final component", dir.display())))?;
    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    let staged = (|| -> Result<()> {
        for (rel, bytes) in &files {
            write_file(&staging.join(rel), bytes)?;
        }
        Ok(())
    })();
    if let Err(e) = staged {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }

    let mut moved = Vec::new();
    let publish = (|| -> Result<()> {
        for (rel, _) in &files {
            let target = dir.join(rel);
            if let Some(p) = target.parent() {
                fs::create_dir_all(p)?;
            }
            fs::rename(staging.join(rel), &target)?;
            moved.push(target);
        }
        Ok(())
    })();
    let _ = fs::remove_dir_all(&staging);
    if let Err(e) = publish {
        for p in &moved {
            let _ = fs::remove_file(p);
        }
        return Err(e);
    }
    Ok(moved)
}

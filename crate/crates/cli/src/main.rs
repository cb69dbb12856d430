use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use unfold::bench::{
    emit_report, run_lista_diag, run_matched, run_mismatch, study_data, train_variant, tune_for, ExperimentConfig,
    Setting,
};
use unfold::datagen::gen_sparse_dataset;
use unfold::rpca::Variant;
use unfold::training::{evaluate, Supervision};
use unfold::Error;

#[derive(Parser)]
#[command(
    name = "unfold",
    version,
    about = "Classical and unfolded iterative solvers: data, tuning, training, benchmarks"
)]
struct Cli {
    /// TOML experiment config; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use n1 = n2 = 1000 instead of the desk-scale problem.
    #[arg(long, global = true)]
    full: bool,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and save it to the output directory.
    Gen {
        #[arg(value_enum, default_value_t = Study::Matched)]
        study: Study,
    },
    /// Grid-search the classical RPCA baseline on the validation split.
    Tune {
        #[arg(value_enum, default_value_t = RpcaStudy::Matched)]
        study: RpcaStudy,
    },
    /// Train one unfolded RPCA variant and save its checkpoint.
    Train {
        #[arg(value_enum, default_value_t = RpcaStudy::Matched)]
        study: RpcaStudy,
        #[arg(long)]
        variant: Variant,
    },
    /// Run a full study and write its report.
    Bench {
        #[arg(value_enum)]
        study: Study,
    },
    /// Print the resolved configuration as TOML.
    PrintConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    Matched,
    Mismatch,
    Lista,
}

#[derive(Clone, Copy, ValueEnum)]
enum RpcaStudy {
    Matched,
    Mismatch,
}

impl From<RpcaStudy> for Setting {
    fn from(s: RpcaStudy) -> Self {
        match s {
            RpcaStudy::Matched => Setting::Matched,
            RpcaStudy::Mismatch => Setting::Mismatch,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Contract(_) | Error::Domain(_) => 2,
        Error::Divergence { .. }
        | Error::Training(_)
        | Error::Tuning(_)
        | Error::Singular { .. }
        | Error::Numeric(_)
        | Error::Fit(_) => 3,
        Error::Io(_) | Error::Format { .. } | Error::Version { .. } => 4,
        _ => 1,
    }
}

fn resolve_config(cli: &Cli) -> unfold::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", p.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cli.full {
        cfg = cfg.full_scale();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, bytes: &[u8]) -> unfold::Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, bytes)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> unfold::Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.cmd {
        Command::PrintConfig => print!("{}", cfg.to_toml_string()?),
        Command::Gen { study } => {
            let (name, ds) = match study {
                Study::Matched => ("rpca_matched.unfds", study_data(&cfg, Setting::Matched)?.dataset),
                Study::Mismatch => ("rpca_mismatch.unfds", study_data(&cfg, Setting::Mismatch)?.dataset),
                Study::Lista => {
                    let l = &cfg.lista;
                    let ds = gen_sparse_dataset(l.m, l.n, l.nonzeros, l.noise_sigma, l.data.split(), cfg.lista_seed())?;
                    ("sparse.unfds", ds)
                }
            };
            let path = cfg.out.join(name);
            write(&path, &ds.encode()?)?;
            println!("{}", path.display());
        }
        Command::Tune { study } => {
            let data = study_data(&cfg, (*study).into()).map_err(|e| e.at_stage("generate"))?;
            let baseline = tune_for(&cfg, &data).map_err(|e| e.at_stage("tune"))?;
            let text = serde_json::to_string_pretty(&baseline).map_err(|e| Error::Numeric(e.to_string()))?;
            write(&cfg.out.join("baseline.json"), text.as_bytes())?;
            println!("{text}");
        }
        Command::Train { study, variant } => {
            let data = study_data(&cfg, (*study).into()).map_err(|e| e.at_stage("generate"))?;
            let baseline = tune_for(&cfg, &data).map_err(|e| e.at_stage("tune"))?;
            let (model, report) =
                train_variant(&cfg, &data, &baseline, *variant).map_err(|e| e.at_stage(format!("train {variant}")))?;
            write(&cfg.out.join(format!("checkpoints/{variant}.unfck")), &model.encode()?)?;
            write(&cfg.out.join(format!("logs/{variant}.csv")), report.to_csv().as_bytes())?;
            let losses = evaluate(&model, &data.test, Supervision::Supervised)
                .map_err(|e| e.at_stage(format!("evaluate {variant}")))?;
            let n = losses.len() as f64;
            println!("iteration,mean_test_loss");
            for k in 0..cfg.depth {
                println!("{},{}", k + 1, losses.iter().map(|l| l[k]).sum::<f64>() / n);
            }
        }
        Command::Bench { study } => {
            let report = match study {
                Study::Matched => run_matched(&cfg)?,
                Study::Mismatch => run_mismatch(&cfg)?,
                Study::Lista => run_lista_diag(&cfg)?,
            };
            let files = emit_report(&report, &cfg.out).map_err(|e| e.at_stage("emit"))?;
            for f in files {
                log::info!("wrote {}", f.display());
            }
            print!("{}", report.results_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UNFOLD_LOG", "info")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads {n}: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!(": {s}"));
                }
                src = s.source();
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

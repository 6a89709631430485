use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hardneg::config::{ActivationName, LossName, ModeName, SamplerName};
use hardneg::core::ot::sinkhorn;
use hardneg::core::{Histogram, SinkhornConfig};
use hardneg::degeneracy::{demo_degeneracy, DegeneracyConfig};
use hardneg::diagnostics::dump_diagnostics;
use hardneg::io::{self, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE};
use hardneg::synth::{generate, Labels};
use hardneg::train::{evaluate, sweep_eps, train_from, Evaluator, TrainState};
use hardneg::{HarnessError, RunConfig};

#[derive(Parser)]
#[command(name = "hardneg", version, about = "Entropic-OT hard-negative sampling lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write metrics and a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint instead of a fresh encoder.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the probe set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// One training run per epsilon, same seed and data.
    SweepEps {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,1")]
        grid: Vec<f64>,
        /// Loss temperatures to cross with the grid; the config's value when absent.
        #[arg(long, value_delimiter = ',')]
        temperatures: Option<Vec<f64>>,
    },
    /// Train against the most similar batch member, self included, and record the collapse.
    DemoDegeneracy {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 500)]
        max_epochs: usize,
        /// Keep training after the collapse criteria are met.
        #[arg(long)]
        no_early_stop: bool,
    },
    /// Solve entropic OT for a cost matrix read from CSV (`inf` forbids an entry).
    SinkhornSolve {
        #[arg(long)]
        cost: PathBuf,
        /// Row marginal, one CSV line; uniform when absent.
        #[arg(long, value_delimiter = ',')]
        a: Option<Vec<f64>>,
        /// Column marginal, one CSV line; uniform when absent.
        #[arg(long, value_delimiter = ',')]
        b: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Dump similarity against conditional probability for one batch.
    InspectCoupling {
        #[command(flatten)]
        run: RunArgs,
        /// Encoder to inspect; a fresh one from the config seed when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Rows of the dataset forming the batch (from the start).
        #[arg(long)]
        rows: Option<usize>,
    },
    /// Write the synthetic dataset as CSV.
    ExportDataset {
        #[command(flatten)]
        run: RunArgs,
    },
}

/// Config file plus per-key overrides. Every key of the file can be given as
/// a flag; flags win.
#[derive(Args, Default)]
struct RunArgs {
    /// TOML file with any subset of the run keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent directory for the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,

    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    ambient_dim: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    class_center_spread: Option<f64>,
    #[arg(long)]
    within_class_std: Option<f64>,
    #[arg(long)]
    augment_noise_std: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerName>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_enum)]
    negative_mode: Option<ModeName>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_enum)]
    loss: Option<LossName>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    tau_plus: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long, value_enum)]
    activation: Option<ActivationName>,
    #[arg(long)]
    sinkhorn_max_iters: Option<usize>,
    #[arg(long)]
    sinkhorn_tolerance: Option<f64>,
    #[arg(long)]
    stabilization_threshold: Option<f64>,
    #[arg(long)]
    probe_size: Option<usize>,
    #[arg(long)]
    readout_folds: Option<usize>,
}

macro_rules! apply {
    ($cfg:ident, $args:ident; $($field:ident),* ; $($opt:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
        $(if let Some(v) = $args.$opt { $cfg.$opt = Some(v); })*
    };
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, HarnessError> {
        self.resolve_over(None)
    }

    /// Flags over the config file over `base` (a checkpoint's config) over defaults.
    fn resolve_over(&self, base: Option<RunConfig>) -> Result<RunConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
                RunConfig::from_toml(&text)?
            }
            None => base.unwrap_or_default(),
        };
        let args = self;
        apply!(cfg, args;
            num_classes, ambient_dim, samples_per_class, class_center_spread, within_class_std,
            augment_noise_std, data_seed, sampler, epsilon, negative_mode, m, loss, eta, tau_plus,
            temperature, batch_size, epochs, lr, beta1, beta2, adam_eps, weight_decay, seed, eval_every,
            hidden, embed_dim, activation, sinkhorn_max_iters, sinkhorn_tolerance, stabilization_threshold,
            probe_size, readout_folds;
            beta, q);
        Ok(cfg)
    }
}

struct Data {
    inputs: hardneg::core::Matrix,
    labels: Labels,
}

fn dataset(cfg: &RunConfig) -> Result<Data, HarnessError> {
    let ds = generate(&cfg.synth_config()).map_err(|e| HarnessError::Config(e.to_string()))?;
    let (inputs, labels) = ds.into_parts();
    Ok(Data { inputs, labels })
}

fn start_run(out: &Path, cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
    let dir = io::create_run_dir(out, cfg)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    log::info!("writing to {}", dir.display());
    Ok(dir)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { run, resume } => {
            let (state, cfg) = match resume {
                Some(path) => {
                    let (state, saved) = io::load_checkpoint(&path)?;
                    (Some(state), run.resolve_over(Some(saved))?)
                }
                None => (None, run.resolve()?),
            };
            cfg.validate()?;
            let train_cfg = cfg.train_config();
            let data = dataset(&cfg)?;
            let evaluator = Evaluator::new(&data.labels, cfg.probe_size)?;
            let state = match state {
                Some(s) => s,
                None => TrainState::init(&train_cfg, data.inputs.cols())?,
            };
            let dir = start_run(&run.out, &cfg)?;
            let (state, records) = train_from(state, &train_cfg, &data.inputs, Some(&evaluator))?;
            io::write_metrics(&dir.join(METRICS_FILE), &cfg, &records)?;
            io::save_checkpoint(&dir.join(CHECKPOINT_FILE), &state, &cfg)?;
            if let Some(last) = records.last() {
                println!(
                    "epoch {} loss {:.6} readout {:.4} variance {:.3e} fallbacks {}",
                    last.epoch,
                    last.train_loss,
                    last.readout_accuracy,
                    last.representation_variance,
                    last.sinkhorn_fallbacks
                );
            }
            println!("{}", dir.display());
        }
        Command::Eval { checkpoint, out } => {
            let (state, cfg) = io::load_checkpoint(&checkpoint)?;
            cfg.validate()?;
            let data = dataset(&cfg)?;
            let evaluator = Evaluator::new(&data.labels, cfg.probe_size)?;
            let record = evaluate(&state, &cfg.train_config(), &data.inputs, Some(&evaluator), f64::NAN)?;
            let dir = start_run(&out, &cfg)?;
            io::write_metrics(&dir.join(METRICS_FILE), &cfg, std::slice::from_ref(&record))?;
            println!(
                "epoch {} loss {:.6} readout {:.4} variance {:.3e} same-class {:.4}",
                record.epoch,
                record.train_loss,
                record.readout_accuracy,
                record.representation_variance,
                record.same_class_rate
            );
            println!("{}", dir.display());
        }
        Command::SweepEps {
            run,
            grid,
            temperatures,
        } => {
            let cfg = run.resolve()?;
            cfg.validate()?;
            for &eps in &grid {
                if !(eps > 0.0 && eps.is_finite()) {
                    return Err(HarnessError::Config(format!("grid value {eps} is not a positive epsilon")).into());
                }
            }
            let temperatures = temperatures.unwrap_or_else(|| vec![cfg.temperature]);
            let data = dataset(&cfg)?;
            let evaluator = Evaluator::new(&data.labels, cfg.probe_size)?;
            let dir = start_run(&run.out, &cfg)?;
            let mut w = csv::Writer::from_path(dir.join("sweep.csv")).map_err(csv_err)?;
            w.write_record([
                "epsilon",
                "temperature",
                "best_readout_accuracy",
                "final_readout_accuracy",
                "initial_mean_negative_similarity",
                "final_mean_negative_similarity",
                "final_same_class_rate",
                "sinkhorn_fallbacks",
            ])
            .map_err(csv_err)?;
            for &temperature in &temperatures {
                let at_t = RunConfig {
                    temperature,
                    ..cfg.clone()
                };
                at_t.validate()?;
                let rows = sweep_eps(&at_t.train_config(), &grid, &data.inputs, Some(&evaluator))?;
                for row in &rows {
                    let per_run = RunConfig {
                        sampler: SamplerName::Ot,
                        epsilon: row.epsilon,
                        ..at_t.clone()
                    };
                    let name = format!("metrics-eps-{}-t-{}.csv", row.epsilon, temperature);
                    io::write_metrics(&dir.join(name), &per_run, &row.records)?;
                    w.write_record([
                        format!("{:?}", row.epsilon),
                        format!("{:?}", temperature),
                        format!("{:?}", row.best_accuracy),
                        format!("{:?}", row.last().readout_accuracy),
                        format!("{:?}", row.initial().mean_negative_similarity),
                        format!("{:?}", row.last().mean_negative_similarity),
                        format!("{:?}", row.last().same_class_rate),
                        row.last().sinkhorn_fallbacks.to_string(),
                    ])
                    .map_err(csv_err)?;
                    println!(
                        "eps {:<8} temperature {:<6} best readout {:.4}",
                        row.epsilon, temperature, row.best_accuracy
                    );
                }
            }
            w.flush()?;
            println!("{}", dir.display());
        }
        Command::DemoDegeneracy {
            run,
            max_epochs,
            no_early_stop,
        } => {
            let cfg = run.resolve()?;
            let data = dataset(&cfg)?;
            let mut demo = DegeneracyConfig::new(cfg.train_config());
            demo.max_epochs = max_epochs;
            demo.stop_when_collapsed = !no_early_stop;
            let report = demo_degeneracy(&demo, &data.inputs)?;
            let dir = start_run(&run.out, &cfg)?;
            let mut w = csv::Writer::from_path(dir.join("degeneracy.csv")).map_err(csv_err)?;
            w.write_record(["epoch", "representation_variance", "loss", "gap", "upper_bound"])
                .map_err(csv_err)?;
            for p in &report.trajectory {
                w.write_record([
                    p.epoch.to_string(),
                    format!("{:?}", p.representation_variance),
                    format!("{:?}", p.loss),
                    format!("{:?}", p.gap),
                    format!("{:?}", p.upper_bound),
                ])
                .map_err(csv_err)?;
            }
            w.flush()?;
            let last = report.last();
            println!(
                "epoch {} variance {:.3e} loss {:.6} (collapse value {:.6}) upper bound {:.3e} collapsed {}",
                last.epoch,
                last.representation_variance,
                last.loss,
                report.collapse_value,
                last.upper_bound,
                report.collapsed
            );
            println!("{}", dir.display());
        }
        Command::SinkhornSolve {
            cost,
            a,
            b,
            epsilon,
            max_iters,
            tolerance,
            out,
        } => {
            let masked = io::read_cost(&cost)?;
            let (n, m) = masked.shape();
            let hist = |w: Option<Vec<f64>>, len: usize, name: &str| -> Result<Histogram, HarnessError> {
                match w {
                    None => Ok(Histogram::uniform(len)),
                    Some(w) if w.len() == len => {
                        Histogram::normalized(w).map_err(|e| HarnessError::Config(format!("marginal {name}: {e}")))
                    }
                    Some(w) => Err(HarnessError::Config(format!(
                        "marginal {name} has {} entries, expected {len}",
                        w.len()
                    ))),
                }
            };
            let a = hist(a, n, "a")?;
            let b = hist(b, m, "b")?;
            let defaults = SinkhornConfig::new(epsilon);
            let solver = SinkhornConfig {
                max_iters: max_iters.unwrap_or(defaults.max_iters),
                tolerance: tolerance.unwrap_or(defaults.tolerance),
                ..defaults
            };
            solver.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
            let coupling = match sinkhorn(&masked, &a, &b, &solver) {
                Ok(c) => c,
                Err(hardneg::core::OtError::NotConverged(partial)) => {
                    return Err(HarnessError::Numerical(format!(
                        "no convergence after {} iterations (marginal error {:.3e})",
                        partial.iterations_used, partial.marginal_error
                    ))
                    .into())
                }
                Err(hardneg::core::OtError::NumericalOverflow) => {
                    return Err(HarnessError::Numerical(format!(
                        "overflow at epsilon = {epsilon}; increase epsilon relative to the cost scale"
                    ))
                    .into())
                }
                Err(e) => return Err(HarnessError::Config(e.to_string()).into()),
            };
            let key = format!(
                "{}|{:?}|{:?}|{:?}|{:?}",
                cost.display(),
                a.weights(),
                b.weights(),
                solver.epsilon,
                solver.tolerance
            );
            let dir = io::create_named_run_dir(&out, &io::short_hash(key.as_bytes()))?;
            io::write_plan(&dir.join("plan.csv"), &coupling.plan)?;
            let mut w = csv::Writer::from_path(dir.join("potentials.csv")).map_err(csv_err)?;
            w.write_record(["side", "index", "potential"]).map_err(csv_err)?;
            for (side, pot) in [("u", &coupling.potentials_u), ("v", &coupling.potentials_v)] {
                for (k, x) in pot.iter().enumerate() {
                    w.write_record([side.to_string(), k.to_string(), format!("{x:?}")])
                        .map_err(csv_err)?;
                }
            }
            w.flush()?;
            println!(
                "transport cost {:.12e} marginal error {:.3e} iterations {}",
                coupling.transport_cost, coupling.marginal_error, coupling.iterations_used
            );
            println!("{}", dir.display());
        }
        Command::InspectCoupling { run, checkpoint, rows } => {
            let (params, cfg) = match checkpoint {
                Some(path) => {
                    let (state, saved) = io::load_checkpoint(&path)?;
                    (state.params, run.resolve_over(Some(saved))?)
                }
                None => {
                    let cfg = run.resolve()?;
                    let data_dim = cfg.ambient_dim;
                    (TrainState::init(&cfg.train_config(), data_dim)?.params, cfg)
                }
            };
            let data = dataset(&cfg)?;
            let n = rows.unwrap_or(cfg.batch_size).min(data.inputs.rows());
            if n < 3 {
                return Err(HarnessError::Config("inspect-coupling needs at least 3 rows".into()).into());
            }
            let idx: Vec<usize> = (0..n).collect();
            let batch = data.inputs.select_rows(&idx);
            let dir = start_run(&run.out, &cfg)?;
            let d = dump_diagnostics(
                &params,
                &batch,
                &cfg.train_config(),
                Some(&data.labels.labels[..n]),
                &dir,
            )?;
            println!(
                "monotone fraction {:.4} ({:.4} with column weights divided out) over {} entries",
                d.monotone_fraction,
                d.adjusted_monotone_fraction,
                d.entries.len()
            );
            println!("{}", dir.display());
        }
        Command::ExportDataset { run } => {
            let cfg = run.resolve()?;
            let ds = generate(&cfg.synth_config()).map_err(|e| HarnessError::Config(e.to_string()))?;
            let dir = start_run(&run.out, &cfg)?;
            io::write_dataset(&dir.join("dataset.csv"), &ds)?;
            println!("{} points, {} classes", ds.len(), ds.num_classes());
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Format(format!("csv: {e}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli).context("hardneg") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<HarnessError>().map_or(1, HarnessError::exit_code);
            eprintln!("error: {:#}", e);
            ExitCode::from(code as u8)
        }
    }
}

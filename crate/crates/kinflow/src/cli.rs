//! The `kinflow` command line. Every subcommand starts from a config (the
//! `--config` file, or a built-in `--profile`), applies `--seed`, then its
//! own flags.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use kinflow_core::efm::EfmField;
use kinflow_core::sampler::{KtsSchedule, SolverMethod};
use kinflow_core::synthdata::DatasetKind;

use crate::config::{ExperimentConfig, Profile};
use crate::error::{Error, Result};
use crate::formats::{self, BatchSummary};
use crate::pipeline::{self, read_sample_traces};
use crate::plot::{self, Series};
use crate::stages::{self, SampleSpec, SweepContext};
use crate::verify;

#[derive(Debug, Parser)]
#[command(name = "kinflow", version, about = "Flow-matching sampling with kinetic path energy diagnostics")]
pub struct Cli {
    /// Declarative experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in profile used when no config file is given: paper or ci.
    #[arg(long, global = true, default_value = "paper")]
    pub profile: String,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct FieldArgs {
    /// Trained checkpoint (JSON).
    #[arg(long, conflicts_with = "efm", required_unless_present = "efm")]
    pub model: Option<PathBuf>,
    /// Use the closed-form EFM field over this dataset instead of a model.
    #[arg(long)]
    pub efm: Option<PathBuf>,
    /// Nearest atoms per EFM evaluation (0 keeps all).
    #[arg(long)]
    pub neighbors: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    #[arg(long)]
    pub method: Option<SolverMethod>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of trajectories.
    #[arg(long)]
    pub m: Option<usize>,
    /// Stop at t = 1 - delta_cut (defaults to 0 for models and the config
    /// value for EFM).
    #[arg(long)]
    pub delta_cut: Option<f64>,
    #[arg(long)]
    pub tau_split: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled 2D dataset as CSV.
    GenData {
        #[arg(long)]
        kind: Option<DatasetKind>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the velocity MLP with conditional flow matching.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV.
        #[arg(long)]
        loss: Option<PathBuf>,
    },
    /// Integrate trajectories and record their energy traces.
    Sample {
        #[command(flatten)]
        field: FieldArgs,
        #[command(flatten)]
        solver: SolverArgs,
        /// Launch gain; KTS is off unless alpha0 or beta0 is set.
        #[arg(long, default_value_t = 0.0)]
        alpha0: f64,
        /// Landing damping.
        #[arg(long, default_value_t = 0.0)]
        beta0: f64,
        /// Output directory for traces.csv and summary.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// KPE/density statistics, memorization and W2 for a sample directory.
    Diagnose {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        knn_k: Option<usize>,
        #[arg(long)]
        bandwidth: Option<f64>,
        #[arg(long)]
        tau_gap: Option<f64>,
        #[arg(long)]
        k_mem: Option<usize>,
        #[arg(long)]
        w2_points: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the theory suite; exits with 4 when a check fails.
    VerifyTheory {
        /// Adds this dataset as one more 2D atom set.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        atoms: Option<Vec<usize>>,
        #[arg(long)]
        points_per_cell: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the KTS gain over an alpha0 x beta0 grid.
    KtsSweep {
        #[command(flatten)]
        field: FieldArgs,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        alpha0: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        beta0: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline into the config's output directory.
    Run {
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Energy curves and KPE-by-stratum plots from sample directories.
    Plot {
        /// `label=dir` pairs.
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "kinflow")]
        title: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::profile(cli.profile.parse::<Profile>()?),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

enum Field {
    Model(kinflow_core::mlp::MlpParams),
    Efm(EfmField),
}

fn load_field(args: &FieldArgs, cfg: &ExperimentConfig) -> Result<Field> {
    if let Some(p) = &args.model {
        return Ok(Field::Model(formats::read_checkpoint(p)?));
    }
    let p = args.efm.as_ref().expect("clap requires --model or --efm");
    let data = formats::read_dataset(p)?;
    let k = match args.neighbors {
        Some(0) => None,
        Some(k) => Some(k),
        None => cfg.efm.neighbors.map(|k| k.min(data.n())),
    };
    Ok(Field::Efm(EfmField::from_points(&data.points, k)?))
}

fn sample_spec(s: &SolverArgs, cfg: &mut ExperimentConfig, efm: bool) -> Result<SampleSpec> {
    set(&mut cfg.sampling.method, s.method);
    set(&mut cfg.sampling.steps, s.steps);
    set(&mut cfg.sampling.trajectories, s.m);
    set(&mut cfg.sampling.tau_split, s.tau_split);
    let delta = s.delta_cut.unwrap_or(if efm { cfg.efm.delta_cut } else { 0.0 });
    let spec = SampleSpec {
        solver: cfg.sampling.solver(delta),
        trajectories: cfg.sampling.trajectories,
        tau_split: cfg.sampling.tau_split,
        kts: KtsSchedule {
            alpha0: 0.0,
            beta0: 0.0,
            ..cfg.kts
        },
    };
    spec.solver.validate().map_err(|e| Error::Config(e.to_string()))?;
    if spec.trajectories == 0 || !(spec.tau_split > 0.0 && spec.tau_split < 1.0) {
        return Err(Error::Config("need m >= 1 and tau_split in (0, 1)".into()));
    }
    Ok(spec)
}

/// Runs a parsed command line, returning the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let mut cfg = base_config(cli)?;
    match &cli.command {
        Command::GenData { kind, n, out } => {
            set(&mut cfg.dataset.kind, *kind);
            set(&mut cfg.dataset.n, *n);
            cfg.validate()?;
            let data = stages::gen_data(&cfg.dataset)?;
            formats::write_dataset(out, &data)?;
            println!("wrote {} points of {} to {}", data.n(), data.kind, out.display());
        }
        Command::Train {
            data,
            iters,
            lr,
            weight_decay,
            batch_size,
            out,
            loss,
        } => {
            set(&mut cfg.train.iterations, *iters);
            set(&mut cfg.train.lr, *lr);
            set(&mut cfg.train.weight_decay, *weight_decay);
            set(&mut cfg.train.batch_size, *batch_size);
            cfg.train.validate().map_err(|e| Error::Config(e.to_string()))?;
            let data = formats::read_dataset(data)?;
            let r = stages::train_model(&data, &cfg.train)?;
            formats::write_checkpoint(out, &r.params)?;
            if let Some(l) = loss {
                formats::write_loss_curve(l, &r.loss_curve)?;
            }
            println!(
                "trained {} iterations, final loss {}",
                r.loss_curve.len(),
                r.loss_curve.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Sample {
            field,
            solver,
            alpha0,
            beta0,
            out,
        } => {
            let f = load_field(field, &cfg)?;
            let mut spec = sample_spec(solver, &mut cfg, matches!(f, Field::Efm(_)))?;
            spec.kts.alpha0 = *alpha0;
            spec.kts.beta0 = *beta0;
            spec.kts.validate().map_err(|e| Error::Config(e.to_string()))?;
            let (batch, summary) = match &f {
                Field::Model(p) => stages::sample_field(p, stages::model_info(p), &spec)?,
                Field::Efm(e) => stages::sample_field(e, stages::efm_info(e), &spec)?,
            };
            stages::write_sample(out, &batch, &summary)?;
            println!(
                "{} trajectories ({} diverged), mean KPE {}",
                summary.trajectories.len(),
                summary.failures.len(),
                summary.mean(|t| t.kpe)
            );
        }
        Command::Diagnose {
            samples,
            data,
            knn_k,
            bandwidth,
            tau_gap,
            k_mem,
            w2_points,
            out,
        } => {
            let d = &mut cfg.diagnostics;
            set(&mut d.knn_k, *knn_k);
            set(&mut d.bandwidth, *bandwidth);
            set(&mut d.tau_gap, *tau_gap);
            set(&mut d.k_mem, *k_mem);
            set(&mut d.w2_points, *w2_points);
            cfg.validate()?;
            let data = formats::read_dataset(data)?;
            let summary: BatchSummary = formats::read_json(&samples.join(stages::SUMMARY_FILE))?;
            let r = stages::diagnose(
                &summary,
                &data,
                &cfg.diagnostics,
                stages::heldout_seed(cfg.dataset.seed),
            )?;
            formats::write_json(out, &r)?;
            println!(
                "rho_kde {} mwu_p {} f_mem {} w2 {}",
                r.rho_kde, r.mwu_p, r.f_mem, r.w2
            );
        }
        Command::VerifyTheory {
            data,
            eps,
            dims,
            atoms,
            points_per_cell,
            out,
        } => {
            let th = &mut cfg.theory;
            set(&mut th.eps, eps.clone());
            set(&mut th.dims, dims.clone());
            set(&mut th.atom_counts, atoms.clone());
            set(&mut th.points_per_cell, *points_per_cell);
            cfg.validate()?;
            let data = data.as_ref().map(|p| formats::read_dataset(p)).transpose()?;
            let r = verify::verify_theory(&cfg.theory, data.as_ref().map(|d| d.points.as_slice()))?;
            formats::write_json(out, &r)?;
            println!(
                "{} bound points, pass rate {}, remainder pass rate {}",
                r.bound_points, r.bound_pass_rate, r.remainder_pass_rate
            );
            if !r.passed {
                return Err(Error::Check(r.failures.join("; ")));
            }
        }
        Command::KtsSweep {
            field,
            solver,
            data,
            alpha0,
            beta0,
            out,
        } => {
            set(&mut cfg.sweep.alpha0, alpha0.clone());
            set(&mut cfg.sweep.beta0, beta0.clone());
            let f = load_field(field, &cfg)?;
            let spec = sample_spec(solver, &mut cfg, matches!(f, Field::Efm(_)))?;
            cfg.validate()?;
            let data = formats::read_dataset(data)?;
            let ctx = SweepContext {
                data: &data,
                spec,
                diagnostics: &cfg.diagnostics,
                heldout_seed: stages::heldout_seed(cfg.dataset.seed),
            };
            let (a, b) = (&cfg.sweep.alpha0, &cfg.sweep.beta0);
            let rows = match &f {
                Field::Model(p) => stages::kts_sweep(p, stages::model_info(p), &ctx, a, b)?,
                Field::Efm(e) => stages::kts_sweep(e, stages::efm_info(e), &ctx, a, b)?,
            };
            stages::write_sweep(out, &rows)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} rows ({failed} failed) written to {}", rows.len(), out.display());
        }
        Command::Run { out, print_config } => {
            set(&mut cfg.output_dir, out.clone());
            cfg.validate()?;
            if *print_config {
                println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
                return Ok(());
            }
            let m = pipeline::run_pipeline_with(&cfg, |e| {
                let how = if e.cached { "cached" } else { "done" };
                eprintln!("{:>14} {how} ({:.1}s)", e.stage, e.wall_clock_secs);
            })?;
            println!("manifest {} ({})", m.hash, cfg.output_dir.join(pipeline::MANIFEST_FILE).display());
        }
        Command::Plot {
            samples,
            data,
            title,
            out,
        } => {
            let data = formats::read_dataset(data)?;
            let mut sets = Vec::new();
            for s in samples {
                let (label, dir) = s
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("expected label=dir, got {s:?}")))?;
                sets.push((label.to_string(), read_sample_traces(&PathBuf::from(dir))?));
            }
            let series: Vec<Series<'_>> = sets
                .iter()
                .map(|(label, traces)| Series { label, traces })
                .collect();
            pipeline::write_text(&out.join("energy.svg"), &plot::energy_svg(title, &series)?)?;
            pipeline::write_text(&out.join("kpe_strata.svg"), &plot::strata_svg(title, &series, &data)?)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

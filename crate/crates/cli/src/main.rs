use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use opinv::adaptive::Mode;
use opinv::experiment::report::cmd_report;
use opinv::experiment::{cmd_invert, cmd_train_offline, total_counts, RunConfig};
use opinv::grf::io::save_field;
use opinv::grf::{draw_prior_seeded, draw_uniform, Grid2D, KlBasis, PriorParams};
use opinv::linear_theory::{verify_error_bound, LinearModel};
use opinv::observe::SensorArray;
use opinv::pde::{Benchmark, BenchmarkModel, ForwardModel, Parameterization, ProblemId};
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "opinv", version, about = "Surrogate-accelerated unscented Kalman inversion")]
struct Cli {
    /// Worker threads for parallel solves (defaults to all cores).
    #[arg(long, global = true, env = "OPINV_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw prior samples, solve them and train the offline surrogate.
    TrainOffline(RunArgs),
    /// Run one inversion and write its record.
    Invert {
        #[command(flatten)]
        run: RunArgs,
        /// Offline checkpoint (stem or .json); defaults to the run directory's.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summarize run records (directories or record.json files).
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Check first-order fixed-point error scaling on a random linear model.
    VerifyLinear {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        n_obs: usize,
        #[arg(long, default_value_t = 4)]
        n_params: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, value_delimiter = ',', default_value = "1e-1,1e-2,1e-3,1e-4")]
        eps: Vec<f64>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve one forward problem for given or sampled parameters.
    SolveForward {
        #[command(flatten)]
        field: FieldArgs,
        #[arg(long, value_parser = parse_problem)]
        problem: ProblemId,
        /// JSON array of KL coefficients (or `[x, y]` for heat-loc).
        #[arg(long)]
        params: Option<String>,
        /// Output state field (`.csv` or binary).
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw one Gaussian-random-field sample and write it.
    SamplePrior {
        #[command(flatten)]
        field: FieldArgs,
        /// Uniform coefficients on [-w, w] instead of the prior.
        #[arg(long)]
        ood: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; keys absent from the file take preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, value_parser = parse_problem)]
    problem: Option<ProblemId>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key.path=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct FieldArgs {
    #[arg(long, default_value_t = 24)]
    grid: usize,
    #[arg(long, default_value_t = 32)]
    modes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_problem(s: &str) -> Result<ProblemId, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::preset(&self.preset, self.problem.unwrap_or(ProblemId::Darcy))?,
        };
        if self.config.is_some() && self.problem.is_some_and(|p| p != cfg.problem) {
            bail!("--problem conflicts with the config file's problem {}", cfg.problem);
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        for s in &self.sets {
            cfg.apply_override(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_params(text: &str) -> Result<Vec<f64>> {
    serde_json::from_str(text).context("--params must be a JSON array of numbers")
}

fn solve_forward(field: &FieldArgs, problem: ProblemId, params: Option<&str>, out: &Path) -> Result<()> {
    let grid = Grid2D::square(field.grid)?;
    let (param, sensors) = if problem == ProblemId::HeatLoc {
        (Parameterization::Location, SensorArray::interior_lattice(3))
    } else {
        let basis = KlBasis::new(grid, field.modes, PriorParams::default())?;
        (
            Parameterization::Kl {
                basis: basis.into(),
                n: field.modes,
            },
            SensorArray::interior_lattice(6),
        )
    };
    let model = BenchmarkModel::new(Benchmark::default_for(problem, grid), param, sensors)?;
    let p = match params {
        Some(t) => parse_params(t)?,
        None if problem == ProblemId::HeatLoc => vec![0.2, 0.2],
        None => opinv::grf::standard_normal_vec(field.modes, &mut rand_chacha::ChaCha8Rng::seed_from_u64(field.seed)),
    };
    let state = model.solve(&p)?;
    let obs = model.observe(&state)?;
    // time-resolved states are written as one field per snapshot
    let chunks: Vec<&[f64]> = state.chunks(grid.len()).collect();
    for (k, c) in chunks.iter().enumerate() {
        let path = if chunks.len() == 1 {
            out.to_path_buf()
        } else {
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("state");
            let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("bin");
            out.with_file_name(format!("{stem}.{k}.{ext}"))
        };
        save_field(&opinv::grf::Field::new(grid, c.to_vec())?, &path)?;
    }
    println!("{}", serde_json::json!({ "params": p, "observations": obs }));
    Ok(())
}

fn sample_prior(field: &FieldArgs, ood: Option<f64>, out: &Path) -> Result<()> {
    let grid = Grid2D::square(field.grid)?;
    let basis = KlBasis::new(grid, field.modes, PriorParams::default())?;
    let zeta = match ood {
        Some(w) => draw_uniform(field.modes, w, &mut rand_chacha::ChaCha8Rng::seed_from_u64(field.seed)),
        None => draw_prior_seeded(&basis, field.modes, field.seed)?,
    };
    save_field(&basis.sample_field(zeta.as_slice())?, out)?;
    println!("{}", serde_json::json!({ "zeta": zeta.0 }));
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    match cli.cmd {
        Command::TrainOffline(run) => {
            let cfg = run.resolve()?;
            let summary = cmd_train_offline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Invert { run, checkpoint } => {
            let cfg = run.resolve()?;
            let (path, record) = cmd_invert(&cfg, checkpoint.as_deref())?;
            let counts = total_counts(&record);
            log::info!(
                "{}: e_I = {:?}, online evaluations {}, total {}",
                record.mode,
                record.final_e_i,
                record.online_evaluations,
                counts.total
            );
            println!("{}", path.display());
        }
        Command::Report { records, out } => {
            let report = cmd_report(&records, &out)?;
            print!("{}", report.summary_csv());
        }
        Command::VerifyLinear {
            seed,
            n_obs,
            n_params,
            alpha,
            eps,
            out,
        } => {
            let model = LinearModel::random(n_obs, n_params, alpha, seed);
            let report = verify_error_bound(&model, &eps, seed)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => println!("{text}"),
            }
            if !report.passed {
                bail!(
                    "error scaling outside the window: slopes {:.3} / {:.3}",
                    report.mean_slope,
                    report.precision_slope
                );
            }
        }
        Command::SolveForward {
            field,
            problem,
            params,
            out,
        } => solve_forward(&field, problem, params.as_deref(), &out)?,
        Command::SamplePrior { field, ood, out } => sample_prior(&field, ood, &out)?,
    }
    Ok(())
}

//! `smlapt` — train RBMs with SML, SML-PT or SML-APT and run the likelihood
//! comparison grid.
//!
//! Configuration precedence, lowest to highest: built-in defaults (or the
//! preset), the `--config` file, `--set key=value` pairs, dedicated flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use sml_apt::experiment::{
    fig1_plan, fig1_sweep_plan, preset_config, run_experiment, summarize, ExperimentPlan, RunSpec, Scale,
};
use sml_apt::training::{Algorithm, TrainConfig};

const OUT_ENV: &str = "SMLAPT_OUT";
const DEFAULT_OUT: &str = "results";

/// Marks errors caused by the invocation rather than by the run itself.
#[derive(Debug)]
struct Usage(anyhow::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| Usage(e).into())
}

#[derive(Parser)]
#[command(name = "smlapt", version, about = "Tempered stochastic maximum likelihood for RBMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single configuration for one seed.
    Train(TrainArgs),
    /// Run a preset comparison or a JSON plan file.
    Grid(GridArgs),
    /// Print the summary table of a finished output directory.
    Summarize {
        dir: PathBuf,
    },
}

/// Flags mirroring `TrainConfig` fields.
#[derive(Args, Default)]
struct Overrides {
    /// Flat `key = value` file with TrainConfig field names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` assignments applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    algo: Option<Algorithm>,
    /// Initial number of chains.
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "beta-lr")]
    beta_lr: Option<f64>,
    /// Minimum average swap rate before spawning.
    #[arg(long)]
    rmin: Option<f64>,
    #[arg(long)]
    updates: Option<usize>,
    #[arg(long)]
    minibatch: Option<usize>,
    /// Gibbs steps per update.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Side length of the square training images.
    #[arg(long)]
    side: Option<usize>,
    #[arg(long = "eval-interval")]
    eval_interval: Option<usize>,
    #[arg(long = "post-sampling")]
    post_sampling: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    seed: Option<u64>,
    /// Label used for the output files; defaults to the algorithm name.
    #[arg(long)]
    label: Option<String>,
    #[arg(long, env = OUT_ENV, default_value = DEFAULT_OUT)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    /// JSON experiment plan; replaces the preset.
    #[arg(long, conflicts_with_all = ["sweep", "scale"])]
    plan: Option<PathBuf>,
    /// Problem size of the preset.
    #[arg(long, default_value = "full")]
    scale: Scale,
    /// Run the full learning-rate grid instead of a single cell.
    #[arg(long)]
    sweep: bool,
    #[command(flatten)]
    overrides: Overrides,
    /// Replicate seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory; for a plan file it replaces the plan's own.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    jobs: Option<usize>,
}

fn toml_scalar(key: &str, value: &toml::Value) -> Result<String> {
    Ok(match value {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        _ => bail!("{key}: expected a scalar value"),
    })
}

fn load_config_file(config: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
    for (key, value) in &table {
        config
            .set(key, &toml_scalar(key, value)?)
            .with_context(|| format!("in {}", path.display()))?;
    }
    Ok(())
}

impl Overrides {
    fn apply(&self, config: &mut TrainConfig) -> Result<()> {
        if let Some(path) = &self.config {
            load_config_file(config, path)?;
        }
        for pair in &self.set {
            let (key, value) = pair.split_once('=').with_context(|| format!("expected KEY=VALUE, got {pair:?}"))?;
            config.set(key.trim(), value)?;
        }
        if let Some(a) = self.algo {
            config.algorithm = a;
        }
        if let Some(m) = self.chains {
            config.initial_num_chains = m;
        }
        if let Some(lr) = self.lr {
            config.learning_rate = lr;
        }
        if let Some(mu) = self.beta_lr {
            config.adaptation.beta_learning_rate = mu;
        }
        if let Some(r) = self.rmin {
            config.adaptation.min_avg_swap_rate = r;
        }
        if let Some(n) = self.updates {
            config.num_updates = n;
        }
        if let Some(b) = self.minibatch {
            config.minibatch_size = b;
        }
        if let Some(k) = self.k {
            config.gibbs_steps_per_update = k;
        }
        if let Some(h) = self.hidden {
            config.num_hidden = h;
        }
        if let Some(s) = self.side {
            config.data.image_side = s;
        }
        if let Some(e) = self.eval_interval {
            config.eval_interval = e;
        }
        if let Some(p) = self.post_sampling {
            config.post_sampling_steps = p;
        }
        Ok(())
    }

    fn touches_anything(&self) -> bool {
        self.config.is_some()
            || !self.set.is_empty()
            || self.algo.is_some()
            || self.chains.is_some()
            || self.lr.is_some()
            || self.beta_lr.is_some()
            || self.rmin.is_some()
            || self.updates.is_some()
            || self.minibatch.is_some()
            || self.k.is_some()
            || self.hidden.is_some()
            || self.side.is_some()
            || self.eval_interval.is_some()
            || self.post_sampling.is_some()
    }
}

fn jobs(requested: Option<usize>) -> usize {
    requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn execute(plan: &ExperimentPlan, jobs: usize) -> Result<()> {
    let output = run_experiment(plan, jobs)?;
    for (label, seed, result) in &output.results {
        if let Some(d) = &result.divergence {
            eprintln!("{label} seed {seed} diverged at update {}: {}", d.update, d.reason);
        }
    }
    print!("{}", summarize(&plan.output_dir)?.render());
    Ok(())
}

fn train_plan(args: TrainArgs) -> Result<ExperimentPlan> {
    let mut config = TrainConfig::default();
    args.overrides.apply(&mut config)?;
    let seed = args.seed.unwrap_or(config.seed);
    config.seed = seed;
    config.validate()?;
    let plan = ExperimentPlan {
        runs: vec![RunSpec {
            label: args.label.unwrap_or_else(|| config.algorithm.to_string()),
            config,
            seeds: vec![seed],
        }],
        output_dir: args.out,
        comparison: None,
    };
    plan.validate()?;
    Ok(plan)
}

fn grid_plan(args: &GridArgs) -> Result<ExperimentPlan> {
    let out = || args.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let mut plan = match &args.plan {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut plan = ExperimentPlan::from_json(&text).with_context(|| format!("in {}", path.display()))?;
            if let Some(dir) = &args.out {
                plan.output_dir = dir.clone();
            }
            plan
        }
        None if args.sweep => fig1_sweep_plan(args.scale, out()),
        None => {
            let base = preset_config(args.scale);
            fig1_plan(args.scale, base.learning_rate, base.adaptation.beta_learning_rate, out())
        }
    };
    if args.overrides.touches_anything() {
        for run in &mut plan.runs {
            let algorithm = run.config.algorithm;
            let chains = run.config.initial_num_chains;
            args.overrides.apply(&mut run.config)?;
            // The sampler identity is part of the label.
            if args.overrides.algo.is_none() {
                run.config.algorithm = algorithm;
            }
            if args.overrides.chains.is_none() && algorithm != Algorithm::SmlApt {
                run.config.initial_num_chains = chains;
            }
        }
    }
    if !args.seeds.is_empty() {
        for run in &mut plan.runs {
            run.seeds = args.seeds.clone();
        }
    }
    plan.validate()?;
    Ok(plan)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Train(args) => usage(train_plan(args)).and_then(|plan| execute(&plan, 1)),
        Command::Grid(args) => usage(grid_plan(&args)).and_then(|plan| {
            info!("{} labels, {} runs", plan.runs.len(), plan.runs.iter().map(|r| r.seeds.len()).sum::<usize>());
            execute(&plan, jobs(args.jobs))
        }),
        Command::Summarize { dir } => summarize(&dir).map(|t| print!("{}", t.render())).map_err(Into::into),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<Usage>() { 1 } else { 2 })
        }
    }
}

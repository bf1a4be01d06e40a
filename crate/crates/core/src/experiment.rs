//! Experiment plans: replicated training runs, per-run artifacts, per-label
//! summaries and a manifest tying them together.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{run_on_mixture, Algorithm, DataConfig, TrainConfig, TrainResult};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Named comparison presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    Fig1Grid,
}

/// Problem size for the comparison presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 28x28 images, 10 hidden units, 10^5 updates plus 2*10^4 sampling sweeps.
    Full,
    /// 8x8 images, 5 hidden units, 2*10^4 updates.
    Ci,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "ci" => Ok(Scale::Ci),
            _ => Err(Error::InvalidInput(format!("unknown scale {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub label: String,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub runs: Vec<RunSpec>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub comparison: Option<Comparison>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        let mut labels = HashSet::new();
        for run in &self.runs {
            if !labels.insert(run.label.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate label {:?}", run.label)));
            }
            if run.label.is_empty() || run.label.contains(['/', '\\', ',']) {
                return Err(Error::InvalidInput(format!("invalid label {:?}", run.label)));
            }
            let seeds: HashSet<_> = run.seeds.iter().collect();
            if seeds.len() != run.seeds.len() {
                return Err(Error::InvalidInput(format!("repeated seed in {:?}", run.label)));
            }
            run.config.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Baseline configuration of the comparison presets.
pub fn preset_config(scale: Scale) -> TrainConfig {
    match scale {
        Scale::Full => TrainConfig {
            num_hidden: 10,
            num_updates: 100_000,
            post_sampling_steps: 20_000,
            eval_interval: 1000,
            data: DataConfig {
                image_side: 28,
                dataset_seed: 0,
                eval_set_size: 10_000,
            },
            ..TrainConfig::default()
        },
        Scale::Ci => TrainConfig {
            num_hidden: 5,
            num_updates: 20_000,
            post_sampling_steps: 0,
            eval_interval: 500,
            data: DataConfig {
                image_side: 8,
                dataset_seed: 0,
                eval_set_size: 2000,
            },
            ..TrainConfig::default()
        },
    }
}

/// The five samplers of the likelihood comparison, at one learning rate
/// and one beta learning rate: SML, SML-PT with 10/20/50 chains and
/// SML-APT started from 10 chains. `suffix` is appended to every label.
pub fn fig1_runs(base: &TrainConfig, learning_rate: f64, beta_learning_rate: f64, seeds: &[u64], suffix: &str) -> Vec<RunSpec> {
    let with = |algorithm: Algorithm, chains: usize| {
        let mut config = base.clone();
        config.algorithm = algorithm;
        config.initial_num_chains = chains;
        config.learning_rate = learning_rate;
        config.adaptation.beta_learning_rate = beta_learning_rate;
        config
    };
    let mut runs = vec![RunSpec {
        label: format!("SML{suffix}"),
        config: with(Algorithm::Sml, 1),
        seeds: seeds.to_vec(),
    }];
    for chains in [10, 20, 50] {
        runs.push(RunSpec {
            label: format!("SML-PT{chains}{suffix}"),
            config: with(Algorithm::SmlPt, chains),
            seeds: seeds.to_vec(),
        });
    }
    runs.push(RunSpec {
        label: format!("SML-APT{suffix}"),
        config: with(Algorithm::SmlApt, 10),
        seeds: seeds.to_vec(),
    });
    runs
}

pub const FIG1_LEARNING_RATES: [f64; 2] = [1e-3, 1e-4];
pub const FIG1_BETA_LEARNING_RATES: [f64; 3] = [1e-3, 1e-4, 1e-5];
pub const FIG1_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Likelihood comparison at a single hyper-parameter cell: 5 labels x 5
/// seeds.
pub fn fig1_plan(scale: Scale, learning_rate: f64, beta_learning_rate: f64, output_dir: PathBuf) -> ExperimentPlan {
    ExperimentPlan {
        runs: fig1_runs(&preset_config(scale), learning_rate, beta_learning_rate, &FIG1_SEEDS, ""),
        output_dir,
        comparison: Some(Comparison::Fig1Grid),
    }
}

/// Learning-rate grid of the comparison. Samplers that ignore the beta
/// learning rate appear once per learning rate; SML-APT once per
/// (learning rate, beta learning rate) cell.
pub fn fig1_sweep_plan(scale: Scale, output_dir: PathBuf) -> ExperimentPlan {
    let base = preset_config(scale);
    let mut runs = Vec::new();
    for lr in FIG1_LEARNING_RATES {
        for (k, blr) in FIG1_BETA_LEARNING_RATES.iter().enumerate() {
            let suffix = format!("_lr{lr:e}_blr{blr:e}");
            let cell = fig1_runs(&base, lr, *blr, &FIG1_SEEDS, &suffix);
            for mut run in cell {
                let adaptive = run.config.algorithm == Algorithm::SmlApt;
                if adaptive {
                    runs.push(run);
                } else if k == 0 {
                    run.label = run.label.replace(&suffix, &format!("_lr{lr:e}"));
                    runs.push(run);
                }
            }
        }
    }
    ExperimentPlan {
        runs,
        output_dir,
        comparison: Some(Comparison::Fig1Grid),
    }
}

/// One finished run as listed in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub label: String,
    pub seed: u64,
    pub metrics_csv: String,
    pub result_json: String,
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub labels: Vec<String>,
    pub runs: Vec<RunArtifact>,
    pub summaries: Vec<String>,
}

/// Aggregate over the replicates of one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub label: String,
    pub runs: usize,
    pub final_loglik_mean: Option<f64>,
    pub final_loglik_se: Option<f64>,
    pub final_loglik_median: Option<f64>,
    pub tau_hat_mean: Option<f64>,
    pub num_chains_mean: f64,
    pub wall_clock_mean: f64,
    pub diverged_seeds: Vec<u64>,
    pub reference_loglik: Option<f64>,
}

/// Final values read back from one run's metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub seed: u64,
    pub final_loglik: Option<f64>,
    pub tau_hat: Option<f64>,
    pub num_chains: usize,
    pub wall_clock: f64,
    pub diverged: bool,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Standard error of the mean; zero for a single value.
fn standard_error(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.len() < 2 {
        return Some(0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    Some((var / xs.len() as f64).sqrt())
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

pub fn summarize_outcomes(label: &str, outcomes: &[RunOutcome], reference_loglik: Option<f64>) -> LabelSummary {
    let lls: Vec<f64> = outcomes.iter().filter_map(|o| o.final_loglik).collect();
    let taus: Vec<f64> = outcomes.iter().filter_map(|o| o.tau_hat).collect();
    let chains: Vec<f64> = outcomes.iter().map(|o| o.num_chains as f64).collect();
    let clocks: Vec<f64> = outcomes.iter().map(|o| o.wall_clock).collect();
    LabelSummary {
        label: label.to_string(),
        runs: outcomes.len(),
        final_loglik_mean: mean(&lls),
        final_loglik_se: standard_error(&lls),
        final_loglik_median: median(&lls),
        tau_hat_mean: mean(&taus),
        num_chains_mean: mean(&chains).unwrap_or(0.0),
        wall_clock_mean: mean(&clocks).unwrap_or(0.0),
        diverged_seeds: outcomes.iter().filter(|o| o.diverged).map(|o| o.seed).collect(),
        reference_loglik,
    }
}

impl RunOutcome {
    pub fn from_result(seed: u64, result: &TrainResult) -> Self {
        let last = result.metrics.last();
        Self {
            seed,
            final_loglik: result.final_loglik(),
            tau_hat: last.and_then(|m| m.tau_hat),
            num_chains: last.map_or(0, |m| m.num_chains),
            wall_clock: last.map_or(0.0, |m| m.wall_clock_seconds),
            diverged: result.divergence.is_some(),
        }
    }

    /// Parses the final values out of a metrics CSV.
    pub fn from_csv(seed: u64, text: &str, diverged: bool) -> Result<Self> {
        let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
        let last = rows
            .last()
            .ok_or_else(|| Error::InvalidInput("metrics file has no rows".into()))?;
        if last.len() < 6 {
            return Err(Error::InvalidInput("malformed metrics row".into()));
        }
        let num = |s: &str| s.parse::<f64>().ok();
        Ok(Self {
            seed,
            final_loglik: rows.iter().rev().find_map(|r| r.get(2).and_then(|s| num(s))),
            tau_hat: num(last[3]),
            num_chains: last[5].parse().unwrap_or(0),
            wall_clock: num(last[1]).unwrap_or(0.0),
            diverged,
        })
    }
}

fn run_file_stem(label: &str, seed: u64) -> String {
    format!("{label}_seed{seed}")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

/// Everything produced by [`run_experiment`].
#[derive(Debug)]
pub struct ExperimentOutput {
    pub manifest: Manifest,
    pub summaries: Vec<LabelSummary>,
    /// Results in plan order: one entry per (label, seed).
    pub results: Vec<(String, u64, TrainResult)>,
}

/// Runs every (label, seed) pair of the plan on up to `jobs` worker
/// threads and writes per-run CSV and JSON files, one summary per label
/// and the manifest into `plan.output_dir`.
pub fn run_experiment(plan: &ExperimentPlan, jobs: usize) -> Result<ExperimentOutput> {
    plan.validate()?;
    fs::create_dir_all(&plan.output_dir)?;
    let probe = plan.output_dir.join(".write_probe");
    write_file(&probe, "")?;
    fs::remove_file(&probe)?;

    let tasks: Vec<(usize, u64)> = plan
        .runs
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let slots: Vec<Mutex<Option<Result<TrainResult>>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let finish = |label: &str, seed: u64, config: &TrainConfig| -> Result<TrainResult> {
        let result = run_on_mixture(config)?;
        let stem = run_file_stem(label, seed);
        write_file(&plan.output_dir.join(format!("{stem}.csv")), &result.metrics_csv())?;
        write_file(&plan.output_dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(&result)?)?;
        info!("finished {label} seed {seed}");
        Ok(result)
    };
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(tasks.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(run, seed)) = tasks.get(k) else { break };
                let spec = &plan.runs[run];
                let config = TrainConfig {
                    seed,
                    ..spec.config.clone()
                };
                *slots[k].lock().unwrap() = Some(finish(&spec.label, seed, &config));
            });
        }
    });

    let mut results = Vec::with_capacity(tasks.len());
    let mut artifacts = Vec::with_capacity(tasks.len());
    for ((run, seed), slot) in tasks.iter().zip(slots) {
        let result = slot.into_inner().unwrap().expect("every task ran")?;
        let label = plan.runs[*run].label.clone();
        let stem = run_file_stem(&label, *seed);
        artifacts.push(RunArtifact {
            label: label.clone(),
            seed: *seed,
            metrics_csv: format!("{stem}.csv"),
            result_json: format!("{stem}.json"),
            diverged_at: result.divergence.as_ref().map(|d| d.update),
        });
        results.push((label, *seed, result));
    }

    let mut summaries = Vec::new();
    let mut summary_files = Vec::new();
    for spec in &plan.runs {
        let mine: Vec<&(String, u64, TrainResult)> = results.iter().filter(|(l, _, _)| *l == spec.label).collect();
        let outcomes: Vec<RunOutcome> = mine.iter().map(|(_, s, r)| RunOutcome::from_result(*s, r)).collect();
        let reference = mine.first().and_then(|(_, _, r)| r.reference_loglik);
        let summary = summarize_outcomes(&spec.label, &outcomes, reference);
        let file = format!("{}.summary.json", spec.label);
        write_file(&plan.output_dir.join(&file), &serde_json::to_string_pretty(&summary)?)?;
        summary_files.push(file);
        summaries.push(summary);
    }

    let manifest = Manifest {
        labels: plan.runs.iter().map(|r| r.label.clone()).collect(),
        runs: artifacts,
        summaries: summary_files,
    };
    write_file(&plan.output_dir.join(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(ExperimentOutput {
        manifest,
        summaries,
        results,
    })
}

/// Summary table rebuilt from the manifest and metrics files of `dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<LabelSummary>,
    pub missing: Vec<String>,
}

pub const SUMMARY_HEADER: [&str; 7] = [
    "label",
    "runs",
    "final_loglik_mean",
    "final_loglik_se",
    "tau_hat_mean",
    "num_chains_mean",
    "wall_clock_mean",
];

impl SummaryTable {
    pub fn render(&self) -> String {
        let fmt = |x: Option<f64>, digits: usize| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.digits$}"));
        let mut rows = vec![SUMMARY_HEADER.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
        for r in &self.rows {
            rows.push(vec![
                r.label.clone(),
                r.runs.to_string(),
                fmt(r.final_loglik_mean, 4),
                fmt(r.final_loglik_se, 4),
                fmt(r.tau_hat_mean, 1),
                format!("{:.1}", r.num_chains_mean),
                format!("{:.2}", r.wall_clock_mean),
            ]);
        }
        let widths: Vec<usize> = (0..SUMMARY_HEADER.len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        }
        for m in &self.missing {
            writeln!(out, "missing: {m}").unwrap();
        }
        out
    }
}

/// Reads `manifest.json` in `dir` and aggregates every listed run that is
/// still present. Missing files are reported, not fatal.
pub fn summarize(dir: &Path) -> Result<SummaryTable> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", manifest_path.display())))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut by_label: BTreeMap<&str, Vec<RunOutcome>> = BTreeMap::new();
    let mut missing = Vec::new();
    for run in &manifest.runs {
        match fs::read_to_string(dir.join(&run.metrics_csv)) {
            Ok(csv) => {
                let outcome = RunOutcome::from_csv(run.seed, &csv, run.diverged_at.is_some())?;
                by_label.entry(run.label.as_str()).or_default().push(outcome);
            }
            Err(_) => missing.push(run.metrics_csv.clone()),
        }
    }
    let rows = manifest
        .labels
        .iter()
        .filter_map(|label| {
            by_label
                .get(label.as_str())
                .map(|outcomes| summarize_outcomes(label, outcomes, None))
        })
        .collect();
    Ok(SummaryTable { rows, missing })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(standard_error(&[5.0]), Some(0.0));
        let se = standard_error(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn presets() {
        let plan = fig1_plan(Scale::Full, 1e-3, 1e-4, PathBuf::from("out"));
        assert_eq!(plan.runs.len(), 5);
        assert!(plan.runs.iter().all(|r| r.seeds.len() == 5));
        assert!(plan.validate().is_ok());
        let labels: Vec<_> = plan.runs.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["SML", "SML-PT10", "SML-PT20", "SML-PT50", "SML-APT"]);
        let full = &plan.runs[4].config;
        assert_eq!((full.num_hidden, full.data.image_side, full.minibatch_size), (10, 28, 5));
        assert_eq!((full.num_updates, full.post_sampling_steps), (100_000, 20_000));

        let sweep = fig1_sweep_plan(Scale::Ci, PathBuf::from("out"));
        // 4 fixed samplers x 2 rates + SML-APT x 6 cells.
        assert_eq!(sweep.runs.len(), 14);
        assert!(sweep.validate().is_ok());
    }

    #[test]
    fn plan_validation() {
        let mut plan = fig1_plan(Scale::Ci, 1e-3, 1e-3, PathBuf::from("x"));
        plan.runs[1].label = "SML".into();
        assert!(plan.validate().is_err());
        let mut plan = fig1_plan(Scale::Ci, 1e-3, 1e-3, PathBuf::from("x"));
        plan.runs[0].seeds = vec![1, 1];
        assert!(plan.validate().is_err());
    }

    #[test]
    fn outcome_from_csv() {
        let csv = "header\n0,0.000000,-5,n/a,1,1,1,1,\n10,1.500000,-4.5,12,0.5,3,1;0.5;0,1;0.5;0,0.5;n/a\n";
        let o = RunOutcome::from_csv(3, csv, false).unwrap();
        assert_eq!(o.final_loglik, Some(-4.5));
        assert_eq!(o.tau_hat, Some(12.0));
        assert_eq!(o.num_chains, 3);
        assert_eq!(o.wall_clock, 1.5);
        assert!(RunOutcome::from_csv(3, "header\n", false).is_err());
    }
}

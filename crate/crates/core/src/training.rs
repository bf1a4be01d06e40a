//! Stochastic maximum likelihood training loop.
//!
//! The positive phase is shared by every algorithm. The negative phase is
//! read from the `beta = 1` slot of a [`NegativeSampler`], which is a single
//! Gibbs chain (SML), a fixed tempered ladder (SML-PT) or an adaptive one
//! (SML-APT).

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use log::{debug, warn};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_betas, average_swap_rate, maybe_spawn, AdaptationConfig, SpawnEvent};
use crate::dataset::{self, MixtureSpec};
use crate::error::{check_len, Error, Result};
use crate::rbm::{exact_log_likelihood, hidden_activation, sigmoid, GradStats, RbmParams};
use crate::tempering::{geometric_ladder, linear_ladder, Ensemble, SweepReport};

/// Largest parameter magnitude tolerated before a run is declared diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// CSV header of the metrics log.
pub const METRICS_HEADER: &str =
    "update_index,wall_clock_seconds,train_loglik,tau_hat,avg_swap_rate,num_chains,betas,fup,swap_rates";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "SML")]
    Sml,
    #[serde(rename = "SML_PT")]
    SmlPt,
    #[serde(rename = "SML_APT")]
    SmlApt,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Sml => "SML",
            Algorithm::SmlPt => "SML_PT",
            Algorithm::SmlApt => "SML_APT",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sml" | "pcd" => Ok(Algorithm::Sml),
            "sml_pt" | "pt" => Ok(Algorithm::SmlPt),
            "sml_apt" | "apt" => Ok(Algorithm::SmlApt),
            _ => Err(Error::InvalidInput(format!("unknown algorithm {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LadderInit {
    /// Inverse temperatures evenly spaced on `[0, 1]`.
    Linear,
    /// Temperatures geometric on `[1, max_temperature]`, plus `beta = 0`.
    Geometric,
}

impl FromStr for LadderInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(LadderInit::Linear),
            "geometric" => Ok(LadderInit::Geometric),
            _ => Err(Error::InvalidInput(format!("unknown ladder {s:?}"))),
        }
    }
}

/// Source of the synthetic training and evaluation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub image_side: usize,
    /// Seed of the mixture prototypes and of the evaluation snapshot.
    pub dataset_seed: u64,
    pub eval_set_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_side: dataset::PAPER_IMAGE_SIDE,
            dataset_seed: 0,
            eval_set_size: 10_000,
        }
    }
}

impl DataConfig {
    pub fn mixture(&self) -> MixtureSpec {
        dataset::paper_spec_seeded(self.image_side, self.dataset_seed)
    }

    /// Fixed evaluation snapshot, shared by every run on the same dataset.
    pub fn eval_set(&self, spec: &MixtureSpec) -> Vec<Vec<u8>> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(self.dataset_seed);
        rng.long_jump();
        dataset::draw(spec, self.eval_set_size, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub num_hidden: usize,
    pub learning_rate: f64,
    pub num_updates: usize,
    pub minibatch_size: usize,
    /// Gibbs steps per chain between two parameter updates.
    pub gibbs_steps_per_update: usize,
    pub initial_num_chains: usize,
    pub initial_ladder: LadderInit,
    /// Upper temperature of the geometric initial ladder.
    pub max_temperature: f64,
    pub adaptation: AdaptationConfig,
    /// Sampling sweeps run after training with the parameters frozen.
    pub post_sampling_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    /// When false the wall-clock column is written as zero, which makes the
    /// metrics log a pure function of the configuration.
    pub record_wall_clock: bool,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::SmlApt,
            num_hidden: 10,
            learning_rate: 1e-3,
            num_updates: 100_000,
            minibatch_size: 5,
            gibbs_steps_per_update: 1,
            initial_num_chains: 10,
            initial_ladder: LadderInit::Linear,
            max_temperature: 100.0,
            adaptation: AdaptationConfig::default(),
            post_sampling_steps: 0,
            eval_interval: 1000,
            seed: 0,
            record_wall_clock: true,
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_hidden", self.num_hidden),
            ("num_updates", self.num_updates),
            ("minibatch_size", self.minibatch_size),
            ("gibbs_steps_per_update", self.gibbs_steps_per_update),
            ("initial_num_chains", self.initial_num_chains),
            ("eval_interval", self.eval_interval),
            ("image_side", self.data.image_side),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(self.max_temperature > 1.0) {
            return Err(Error::InvalidInput("max_temperature must exceed 1".into()));
        }
        self.adaptation.validate()
    }

    pub fn initial_betas(&self) -> Vec<f64> {
        match (self.algorithm, self.initial_ladder) {
            (Algorithm::Sml, _) => vec![1.0],
            (_, LadderInit::Linear) => linear_ladder(self.initial_num_chains),
            (_, LadderInit::Geometric) => geometric_ladder(self.initial_num_chains, self.max_temperature),
        }
    }

    /// Sets one field from its flat name (see [`CONFIG_KEYS`]); nested
    /// adaptation and data fields are addressed by their own names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("invalid value {value:?} for {key}")))
        }
        let a = &mut self.adaptation;
        match key {
            "algorithm" => self.algorithm = value.trim().parse()?,
            "num_hidden" => self.num_hidden = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "num_updates" => self.num_updates = parse(key, value)?,
            "minibatch_size" => self.minibatch_size = parse(key, value)?,
            "gibbs_steps_per_update" => self.gibbs_steps_per_update = parse(key, value)?,
            "initial_num_chains" => self.initial_num_chains = parse(key, value)?,
            "initial_ladder" => self.initial_ladder = value.trim().parse()?,
            "max_temperature" => self.max_temperature = parse(key, value)?,
            "beta_learning_rate" => a.beta_learning_rate = parse(key, value)?,
            "min_avg_swap_rate" => a.min_avg_swap_rate = parse(key, value)?,
            "spawn_check_interval" => a.spawn_check_interval = parse(key, value)?,
            "burn_in_sweeps" => a.burn_in_sweeps = parse(key, value)?,
            "max_chains" => a.max_chains = parse(key, value)?,
            "post_sampling_steps" => self.post_sampling_steps = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "record_wall_clock" => self.record_wall_clock = parse(key, value)?,
            "image_side" => self.data.image_side = parse(key, value)?,
            "dataset_seed" => self.data.dataset_seed = parse(key, value)?,
            "eval_set_size" => self.data.eval_set_size = parse(key, value)?,
            _ => return Err(Error::InvalidInput(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }
}

/// Every key accepted by [`TrainConfig::set`].
pub const CONFIG_KEYS: [&str; 21] = [
    "algorithm",
    "num_hidden",
    "learning_rate",
    "num_updates",
    "minibatch_size",
    "gibbs_steps_per_update",
    "initial_num_chains",
    "initial_ladder",
    "max_temperature",
    "beta_learning_rate",
    "min_avg_swap_rate",
    "spawn_check_interval",
    "burn_in_sweeps",
    "max_chains",
    "post_sampling_steps",
    "eval_interval",
    "seed",
    "record_wall_clock",
    "image_side",
    "dataset_seed",
    "eval_set_size",
];

/// Supplier of training examples.
pub trait DataSource {
    fn next_example(&mut self) -> Vec<u8>;
}

/// Fresh examples drawn from a mixture on every call.
pub struct MixtureStream {
    spec: MixtureSpec,
    rng: Xoshiro256PlusPlus,
}

impl MixtureStream {
    pub fn new(spec: MixtureSpec, rng: Xoshiro256PlusPlus) -> Self {
        Self { spec, rng }
    }
}

impl DataSource for MixtureStream {
    fn next_example(&mut self) -> Vec<u8> {
        dataset::sample(&self.spec, &mut self.rng)
    }
}

/// Cycles through a fixed set of examples.
pub struct FixedData {
    data: Vec<Vec<u8>>,
    next: usize,
}

impl FixedData {
    pub fn new(data: Vec<Vec<u8>>) -> Self {
        Self { data, next: 0 }
    }
}

impl DataSource for FixedData {
    fn next_example(&mut self) -> Vec<u8> {
        let v = self.data[self.next].clone();
        self.next = (self.next + 1) % self.data.len();
        v
    }
}

/// Negative-phase sampler: a tempered ensemble plus the policy deciding
/// which of the swap, adaptation and spawning steps run.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    pub algorithm: Algorithm,
    pub ensemble: Ensemble,
    pub adaptation: AdaptationConfig,
    pub gibbs_steps: usize,
}

/// What happened during one sampler step.
#[derive(Debug, Clone)]
pub struct SamplerStep {
    pub report: Option<SweepReport>,
    pub spawn: Option<SpawnEvent>,
}

impl NegativeSampler {
    pub fn new(algorithm: Algorithm, ensemble: Ensemble, adaptation: AdaptationConfig, gibbs_steps: usize) -> Self {
        Self {
            algorithm,
            ensemble,
            adaptation,
            gibbs_steps,
        }
    }

    /// Sweep, histogram update, ladder adaptation and (every
    /// `spawn_check_interval` steps) the spawn check, in that order.
    pub fn advance(&mut self, params: &RbmParams, step_index: usize, rng: &mut Xoshiro256PlusPlus) -> Result<SamplerStep> {
        if self.algorithm == Algorithm::Sml {
            self.ensemble.gibbs_phase(params, self.gibbs_steps, rng);
            return Ok(SamplerStep {
                report: None,
                spawn: None,
            });
        }
        let report = self.ensemble.step(params, self.gibbs_steps, rng);
        let mut spawn = None;
        if self.algorithm == Algorithm::SmlApt {
            adapt_betas(&mut self.ensemble, &self.adaptation)?;
            if step_index.is_multiple_of(self.adaptation.spawn_check_interval) {
                spawn = maybe_spawn(&mut self.ensemble, &self.adaptation, step_index);
            }
        }
        Ok(SamplerStep {
            report: Some(report),
            spawn,
        })
    }

    pub fn negative_visible(&self) -> &[u8] {
        &self.ensemble.target_state().visible
    }
}

/// Mean over the minibatch of `phi(v, E[h|v])`.
pub fn positive_phase(params: &RbmParams, minibatch: &[Vec<u8>]) -> Result<GradStats> {
    let mut stats = GradStats::zeros(params.num_visible, params.num_hidden);
    let scale = 1.0 / minibatch.len().max(1) as f64;
    for v in minibatch {
        check_len("minibatch example", params.num_visible, v.len())?;
        let probs: Vec<f64> = hidden_activation(params, v).into_iter().map(sigmoid).collect();
        stats.accumulate(v, &probs, scale);
    }
    Ok(stats)
}

/// One stochastic gradient step
/// `params += learning_rate * (phi(v, h~) - phi(v-, h~-))` with mean-field
/// hidden units on both sides. Fails, leaving `params` untouched, when the
/// step would produce a non-finite value or exceed the divergence
/// threshold.
pub fn sml_update(
    params: &mut RbmParams,
    minibatch: &[Vec<u8>],
    negative_visible: &[u8],
    learning_rate: f64,
    update_index: usize,
) -> Result<()> {
    check_len("negative particle", params.num_visible, negative_visible.len())?;
    let positive = positive_phase(params, minibatch)?;
    let negative = positive_phase(params, std::slice::from_ref(&negative_visible.to_vec()))?;
    let gradient = positive.sub(&negative);
    if !gradient.all_finite() {
        return Err(Error::Diverged {
            update: update_index,
            reason: "non-finite gradient".into(),
        });
    }
    let mut next = params.clone();
    next.add_scaled(&gradient, learning_rate)?;
    if !next.all_finite() {
        return Err(Error::Diverged {
            update: update_index,
            reason: "non-finite parameters".into(),
        });
    }
    let largest = next.max_abs();
    if largest > DIVERGENCE_THRESHOLD {
        return Err(Error::Diverged {
            update: update_index,
            reason: format!("parameter magnitude {largest:e} above {DIVERGENCE_THRESHOLD:e}"),
        });
    }
    *params = next;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    Sampling,
}

/// One row of training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub update_index: usize,
    pub wall_clock_seconds: f64,
    /// `None` when exact evaluation is intractable.
    pub train_loglik: Option<f64>,
    /// `None` for the single-chain sampler.
    pub tau_hat: Option<f64>,
    pub avg_swap_rate: f64,
    pub num_chains: usize,
    pub betas: Vec<f64>,
    pub fup: Vec<f64>,
    pub swap_rates: Vec<Option<f64>>,
    pub phase: Phase,
    pub in_burn_in: bool,
    pub warm: bool,
}

fn join<T, F: Fn(&T) -> String>(items: &[T], f: F) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(";")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{},{},{},{},{},{},{}",
            self.update_index,
            self.wall_clock_seconds,
            opt(self.train_loglik),
            opt(self.tau_hat),
            self.avg_swap_rate,
            self.num_chains,
            join(&self.betas, |b| b.to_string()),
            join(&self.fup, |f| f.to_string()),
            join(&self.swap_rates, |r| opt(*r)),
        )
    }
}

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn metrics_csv_string(records: &[MetricsRecord]) -> String {
    let mut buf = Vec::new();
    write_metrics_csv(records, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub update: usize,
    pub reason: String,
}

/// Outcome of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResult {
    pub config: TrainConfig,
    pub params: RbmParams,
    pub final_betas: Vec<f64>,
    pub final_fup: Vec<f64>,
    pub final_tau_hat: Option<f64>,
    pub metrics: Vec<MetricsRecord>,
    pub spawn_events: Vec<SpawnEvent>,
    pub divergence: Option<Divergence>,
    /// Mean log-density of the evaluation set under the true mixture.
    pub reference_loglik: Option<f64>,
    #[serde(skip)]
    pub ensemble: Option<Ensemble>,
}

impl TrainResult {
    /// Last evaluated training log-likelihood.
    pub fn final_loglik(&self) -> Option<f64> {
        self.metrics.iter().rev().find_map(|m| m.train_loglik)
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv_string(&self.metrics)
    }
}

/// Deterministic random streams derived from the run seed.
struct Streams {
    init: Xoshiro256PlusPlus,
    sampler: Xoshiro256PlusPlus,
    data: Xoshiro256PlusPlus,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let mut base = Xoshiro256PlusPlus::seed_from_u64(seed);
        let init = base.clone();
        base.jump();
        let sampler = base.clone();
        base.jump();
        Self {
            init,
            sampler,
            data: base,
        }
    }
}

struct Clock {
    enabled: bool,
    elapsed: Duration,
    started: Option<Instant>,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        Self {
            enabled,
            elapsed: Duration::ZERO,
            started: None,
        }
    }

    fn resume(&mut self) {
        if self.enabled {
            self.started = Some(Instant::now());
        }
    }

    fn pause(&mut self) {
        if let Some(t) = self.started.take() {
            self.elapsed += t.elapsed();
        }
    }

    fn seconds(&self) -> f64 {
        self.elapsed.as_secs_f64()
    }
}

struct Run<'a> {
    config: &'a TrainConfig,
    eval_set: Option<&'a [Vec<u8>]>,
    metrics: Vec<MetricsRecord>,
    clock: Clock,
}

impl Run<'_> {
    fn record(&mut self, update_index: usize, params: &RbmParams, sampler: &NegativeSampler, phase: Phase) {
        self.clock.pause();
        let train_loglik = match self.eval_set {
            Some(data) if !data.is_empty() => match exact_log_likelihood(params, data) {
                Ok(ll) => Some(ll),
                Err(Error::Intractable { .. }) => None,
                Err(e) => {
                    warn!("likelihood evaluation failed at update {update_index}: {e}");
                    None
                }
            },
            _ => None,
        };
        let ens = &sampler.ensemble;
        let tempered = sampler.algorithm != Algorithm::Sml;
        self.metrics.push(MetricsRecord {
            update_index,
            wall_clock_seconds: self.clock.seconds(),
            train_loglik,
            tau_hat: tempered.then(|| ens.tau_hat()),
            avg_swap_rate: average_swap_rate(ens),
            num_chains: ens.num_chains(),
            betas: ens.betas().to_vec(),
            fup: ens.f_up(),
            swap_rates: ens.pair_swap_rates(),
            phase,
            in_burn_in: ens.in_burn_in(),
            warm: ens.is_warm(),
        });
        debug!("update {update_index}: loglik {:?}, chains {}", train_loglik, ens.num_chains());
        self.clock.resume();
    }

    fn due(&self, index: usize, last: usize) -> bool {
        index.is_multiple_of(self.config.eval_interval) || index == last
    }
}

/// Trains an RBM on examples from `source`, evaluating the exact
/// log-likelihood of `eval_set` every `eval_interval` updates.
///
/// Metrics rows are written at update 0, at every multiple of
/// `eval_interval`, and after the last update. The pure-sampling phase
/// that follows (learning rate zero) continues the update index and the
/// same row schedule. A divergence stops the run early and is reported in
/// the result rather than as an error.
pub fn train<S: DataSource + ?Sized>(
    config: &TrainConfig,
    num_visible: usize,
    source: &mut S,
    eval_set: Option<&[Vec<u8>]>,
) -> Result<TrainResult> {
    config.validate()?;
    let mut streams = Streams::new(config.seed);
    let mut params = RbmParams::init_uniform(num_visible, config.num_hidden, &mut streams.init);
    let ensemble = Ensemble::with_random_states(&params, config.initial_betas(), &mut streams.init)?;
    let mut sampler = NegativeSampler::new(
        config.algorithm,
        ensemble,
        config.adaptation.clone(),
        config.gibbs_steps_per_update,
    );

    let mut run = Run {
        config,
        eval_set,
        metrics: Vec::new(),
        clock: Clock::new(config.record_wall_clock),
    };
    let mut spawn_events = Vec::new();
    let mut divergence = None;

    run.clock.resume();
    run.record(0, &params, &sampler, Phase::Training);
    let mut minibatch = Vec::with_capacity(config.minibatch_size);
    for t in 1..=config.num_updates {
        minibatch.clear();
        minibatch.extend((0..config.minibatch_size).map(|_| source.next_example()));
        let step = sampler.advance(&params, t, &mut streams.sampler)?;
        spawn_events.extend(step.spawn);
        match sml_update(&mut params, &minibatch, sampler.negative_visible(), config.learning_rate, t) {
            Ok(()) => {}
            Err(Error::Diverged { update, reason }) => {
                warn!("run diverged at update {update}: {reason}");
                run.record(t, &params, &sampler, Phase::Training);
                divergence = Some(Divergence { update, reason });
                break;
            }
            Err(e) => return Err(e),
        }
        if run.due(t, config.num_updates) {
            run.record(t, &params, &sampler, Phase::Training);
        }
    }

    if divergence.is_none() {
        let last = config.num_updates + config.post_sampling_steps;
        for t in config.num_updates + 1..=last {
            let step = sampler.advance(&params, t, &mut streams.sampler)?;
            spawn_events.extend(step.spawn);
            if run.due(t, last) {
                run.record(t, &params, &sampler, Phase::Sampling);
            }
        }
    }
    run.clock.pause();

    let ens = &sampler.ensemble;
    Ok(TrainResult {
        config: config.clone(),
        final_betas: ens.betas().to_vec(),
        final_fup: ens.f_up(),
        final_tau_hat: (config.algorithm != Algorithm::Sml).then(|| ens.tau_hat()),
        metrics: run.metrics,
        spawn_events,
        divergence,
        reference_loglik: None,
        params,
        ensemble: Some(sampler.ensemble),
    })
}

/// Full run on the synthetic mixture described by `config.data`: fresh
/// training examples from the run's own stream and a fixed evaluation
/// snapshot shared across runs with the same dataset seed.
pub fn run_on_mixture(config: &TrainConfig) -> Result<TrainResult> {
    config.validate()?;
    let spec = config.data.mixture();
    let eval_set = config.data.eval_set(&spec);
    let mut data_rng = Streams::new(config.seed).data;
    data_rng.long_jump();
    let mut stream = MixtureStream::new(spec.clone(), data_rng);
    let mut result = train(config, spec.width(), &mut stream, Some(&eval_set))?;
    if !eval_set.is_empty() {
        result.reference_loglik = Some(dataset::mean_mixture_log_likelihood(&spec, &eval_set)?);
    }
    Ok(result)
}

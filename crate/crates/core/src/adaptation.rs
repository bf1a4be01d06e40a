//! Online respacing of the inverse-temperature ladder and chain spawning.
//!
//! The target ladder places the chains so that the fraction of up-moving
//! particles decreases linearly with the slot index, which minimizes the
//! round-trip time of particles between `beta = 1` and `beta = 0`. The
//! current ladder moves a fraction `beta_learning_rate` of the way towards
//! that target after every sweep. Separately, whenever the average swap
//! rate drops below `min_avg_swap_rate` a chain is inserted in the gap
//! with the steepest drop in the up fraction.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::tempering::{Ensemble, Label, Particle};

/// Minimal separation kept between neighbouring inverse temperatures.
pub const MIN_BETA_GAP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    /// Step size towards the target ladder.
    pub beta_learning_rate: f64,
    /// Average swap rate below which a chain is spawned.
    pub min_avg_swap_rate: f64,
    /// Updates between two spawn checks.
    pub spawn_check_interval: usize,
    /// Sweeps after a spawn during which adaptation and spawning pause.
    pub burn_in_sweeps: usize,
    pub max_chains: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            beta_learning_rate: 1e-3,
            min_avg_swap_rate: 0.4,
            spawn_check_interval: 1000,
            burn_in_sweeps: 100,
            max_chains: 100,
        }
    }
}

impl AdaptationConfig {
    /// Zero rates are accepted: they switch adaptation (respectively
    /// spawning) off, which makes the adaptive sampler reduce to a fixed
    /// ladder.
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_learning_rate >= 0.0 && self.beta_learning_rate <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "beta learning rate {} outside [0, 1]",
                self.beta_learning_rate
            )));
        }
        if !(self.min_avg_swap_rate >= 0.0 && self.min_avg_swap_rate < 1.0) {
            return Err(Error::InvalidInput(format!(
                "minimum average swap rate {} outside [0, 1)",
                self.min_avg_swap_rate
            )));
        }
        if self.spawn_check_interval == 0 || self.max_chains == 0 {
            return Err(Error::InvalidInput(
                "spawn check interval and chain limit must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Record of one inserted chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpawnEvent {
    pub update_index: usize,
    /// Lower slot (0-based) of the adjacent pair that was split; the new
    /// chain occupies slot `pair + 1`.
    pub pair: usize,
    pub new_beta: f64,
    pub num_chains: usize,
}

/// Pushes interior values apart so that consecutive entries differ by at
/// least `gap`, keeping both endpoints fixed.
fn enforce_min_gap(betas: &mut [f64], gap: f64) {
    let m = betas.len();
    if m < 3 || gap * (m - 1) as f64 >= betas[0] - betas[m - 1] {
        return;
    }
    for i in 1..m - 1 {
        betas[i] = betas[i].min(betas[i - 1] - gap);
    }
    for i in (1..m - 1).rev() {
        betas[i] = betas[i].max(betas[i + 1] + gap);
    }
}

/// Ladder that makes the up fraction linear in the slot index.
///
/// `fup` is first clamped to its running minimum so that it is
/// non-increasing along the ladder. The piecewise-linear interpolant of
/// the clamped values over `betas` is then inverted at the levels
/// `1 - i / (M - 1)`. Endpoints are returned unchanged.
pub fn optimal_betas(betas: &[f64], fup: &[f64]) -> Result<Vec<f64>> {
    check_len("fup", betas.len(), fup.len())?;
    if fup.iter().chain(betas).any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite ladder or up fraction".into()));
    }
    let m = betas.len();
    if m < 3 {
        return Ok(betas.to_vec());
    }

    let mut clamped = Vec::with_capacity(m);
    clamped.push(1.0);
    for &f in &fup[1..m - 1] {
        let prev: f64 = *clamped.last().unwrap();
        clamped.push(f.clamp(0.0, 1.0).min(prev));
    }
    clamped.push(0.0);

    let mut target = betas.to_vec();
    let mut k = 0;
    for (i, beta) in target.iter_mut().enumerate().take(m - 1).skip(1) {
        let level = 1.0 - i as f64 / (m - 1) as f64;
        while clamped[k + 1] > level {
            k += 1;
        }
        let t = (clamped[k] - level) / (clamped[k] - clamped[k + 1]);
        *beta = betas[k] + t * (betas[k + 1] - betas[k]);
    }
    enforce_min_gap(&mut target, MIN_BETA_GAP);
    Ok(target)
}

/// Moves interior inverse temperatures a step towards [`optimal_betas`].
/// Skipped while the flow statistics are undefined or during burn-in.
/// Returns whether the ladder was updated.
pub fn adapt_betas(ensemble: &mut Ensemble, config: &AdaptationConfig) -> Result<bool> {
    let m = ensemble.num_chains();
    if m < 3 || ensemble.in_burn_in() || !ensemble.is_warm() {
        return Ok(false);
    }
    let target = optimal_betas(&ensemble.betas, &ensemble.f_up())?;
    let mu = config.beta_learning_rate;
    if mu == 0.0 {
        return Ok(true);
    }
    for (beta, goal) in ensemble.betas[1..m - 1].iter_mut().zip(&target[1..m - 1]) {
        *beta += mu * (goal - *beta);
    }
    enforce_min_gap(&mut ensemble.betas, MIN_BETA_GAP);
    Ok(true)
}

/// Mean of the per-pair swap rates. A single chain reports 1.
pub fn average_swap_rate(ensemble: &Ensemble) -> f64 {
    let rates: Vec<f64> = ensemble.pair_swap_rates().into_iter().flatten().collect();
    if rates.is_empty() {
        1.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    }
}

/// Inserts one chain when the average swap rate is below the target.
///
/// The split pair is the one with the largest jump in the up fraction.
/// The new chain sits at the midpoint inverse temperature and starts from
/// a copy of the configuration held by the colder-index neighbour
/// (`pair + 1`), unlabelled and with a zero counter. A burn-in window
/// follows.
pub fn maybe_spawn(ensemble: &mut Ensemble, config: &AdaptationConfig, update_index: usize) -> Option<SpawnEvent> {
    let m = ensemble.num_chains();
    if m < 2 || ensemble.in_burn_in() {
        return None;
    }
    let rate = average_swap_rate(ensemble);
    if rate >= config.min_avg_swap_rate {
        return None;
    }
    if m >= config.max_chains {
        warn!("update {update_index}: average swap rate {rate:.3} below target but chain limit {m} reached");
        return None;
    }

    // Only pairs wide enough to halve without breaking the minimum gap.
    let fup = ensemble.f_up();
    let betas = &ensemble.betas;
    let Some(pair) = (0..m - 1)
        .filter(|&i| betas[i] - betas[i + 1] >= 2.0 * MIN_BETA_GAP)
        .max_by(|&a, &b| {
            let jump = |i: usize| (fup[i] - fup[i + 1]).abs();
            // Lowest index wins ties.
            jump(a).total_cmp(&jump(b)).then(b.cmp(&a))
        })
    else {
        warn!("update {update_index}: no pair wide enough to split");
        return None;
    };
    let new_beta = 0.5 * (ensemble.betas[pair] + ensemble.betas[pair + 1]);
    let particle = Particle {
        state: ensemble.particles[pair + 1].state.clone(),
        label: Label::Unset,
        return_counter: 0,
    };
    ensemble.insert_chain(pair + 1, new_beta, particle);
    ensemble.burn_in_remaining = config.burn_in_sweeps;

    let event = SpawnEvent {
        update_index,
        pair,
        new_beta,
        num_chains: ensemble.num_chains(),
    };
    info!(
        "update {update_index}: spawned chain at beta {new_beta:.6} between slots {pair} and {} (M = {})",
        pair + 1,
        event.num_chains
    );
    Some(event)
}

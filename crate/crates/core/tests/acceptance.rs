//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The likelihood comparison runs at 8x8 / 5 hidden units / 2*10^4 updates
//! by default. `SMLAPT_ACCEPTANCE_SCALE=full` switches to 28x28 / 10 hidden
//! units / 10^5 updates (hours on one core).

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use sml_apt::adaptation::optimal_betas;
use sml_apt::experiment::{fig1_sweep_plan, median, run_experiment, Scale};
use sml_apt::rbm::{exact_log_likelihood, exact_log_likelihood_gradient, exact_log_partition, RbmParams};
use sml_apt::tempering::{swap_ratio, Ensemble};
use sml_apt::training::{run_on_mixture, Algorithm, TrainConfig, TrainResult};

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: &'static str, pass: bool, detail: String) -> Outcome {
    println!("criterion {id}: {}  {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, pass, detail }
}

// Brute-force oracles, written against the energy formula directly.

#[allow(clippy::needless_range_loop)]
fn brute_energy(p: &RbmParams, v: &[u8], h: &[u8]) -> f64 {
    let mut e = 0.0;
    for j in 0..p.num_hidden {
        let hj = h[j] as f64;
        e -= p.hidden_bias[j] * hj;
        for i in 0..p.num_visible {
            e -= hj * p.weights[j * p.num_visible + i] * v[i] as f64;
        }
    }
    for i in 0..p.num_visible {
        e -= p.visible_bias[i] * v[i] as f64;
    }
    e
}

fn bits(index: usize, n: usize) -> Vec<u8> {
    (0..n).map(|k| ((index >> k) & 1) as u8).collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn brute_log_z(p: &RbmParams, beta: f64) -> f64 {
    let mut terms = Vec::new();
    for vi in 0..1usize << p.num_visible {
        let v = bits(vi, p.num_visible);
        for hi in 0..1usize << p.num_hidden {
            terms.push(-beta * brute_energy(p, &v, &bits(hi, p.num_hidden)));
        }
    }
    log_sum_exp(&terms)
}

/// Exact visible marginal, indexed by the little-endian bit pattern of v.
fn brute_visible_marginal(p: &RbmParams) -> Vec<f64> {
    let log_z = brute_log_z(p, 1.0);
    (0..1usize << p.num_visible)
        .map(|vi| {
            let v = bits(vi, p.num_visible);
            let terms: Vec<f64> = (0..1usize << p.num_hidden)
                .map(|hi| -brute_energy(p, &v, &bits(hi, p.num_hidden)))
                .collect();
            (log_sum_exp(&terms) - log_z).exp()
        })
        .collect()
}

fn random_params(nv: usize, nh: usize, scale: f64, rng: &mut Xoshiro256PlusPlus) -> RbmParams {
    let mut p = RbmParams::zeros(nv, nh);
    for k in 0..p.num_params() {
        *p.value_mut(k) = rng.gen_range(-scale..scale);
    }
    p
}

fn criterion_1a() -> Outcome {
    let start = Instant::now();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let nv = rng.gen_range(1..=8);
        let nh = rng.gen_range(1..=12 - nv);
        let p = random_params(nv, nh, 2.0, &mut rng);
        let beta = rng.gen_range(0.0..=1.0);
        let exact = exact_log_partition(&p, beta).unwrap();
        let oracle = brute_log_z(&p, beta);
        worst = worst.max((exact - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "1a",
        worst <= 1e-10 && secs < 1.0,
        format!("log Z vs joint enumeration: max rel err {worst:.2e} (<= 1e-10), {secs:.3}s (< 1s)"),
    )
}

fn criterion_1b() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(102);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let nv = rng.gen_range(2..=6);
        let nh = rng.gen_range(1..=4);
        let p = random_params(nv, nh, 1.0, &mut rng);
        let data: Vec<Vec<u8>> = (0..8).map(|_| (0..nv).map(|_| rng.gen_range(0..=1u8)).collect()).collect();
        let analytic = exact_log_likelihood_gradient(&p, &data).unwrap().values();
        let numeric: Vec<f64> = (0..p.num_params())
            .map(|k| {
                let mut plus = p.clone();
                *plus.value_mut(k) += step;
                let mut minus = p.clone();
                *minus.value_mut(k) -= step;
                (exact_log_likelihood(&plus, &data).unwrap() - exact_log_likelihood(&minus, &data).unwrap()) / (2.0 * step)
            })
            .collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    report(
        "1b",
        worst <= 1e-6,
        format!("gradient vs central differences (h=1e-5): max rel err {worst:.2e} (<= 1e-6)"),
    )
}

fn criterion_1c() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(103);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let nv = rng.gen_range(1..=3);
        let nh = rng.gen_range(1..=3);
        let p = random_params(nv, nh, 2.0, &mut rng);
        let b_hi: f64 = rng.gen_range(0.0..=1.0);
        let b_lo: f64 = rng.gen_range(0.0..=b_hi);
        let (z_hi, z_lo) = (brute_log_z(&p, b_hi), brute_log_z(&p, b_lo));
        let n = nv + nh;
        for _ in 0..10 {
            let xi = bits(rng.gen_range(0..1usize << n), n);
            let xj = bits(rng.gen_range(0..1usize << n), n);
            let ei = brute_energy(&p, &xi[..nv], &xi[nv..]);
            let ej = brute_energy(&p, &xj[..nv], &xj[nv..]);
            // Normalized log densities of the product distribution.
            let log_current = (-b_hi * ei - z_hi) + (-b_lo * ej - z_lo);
            let log_swapped = (-b_hi * ej - z_hi) + (-b_lo * ei - z_lo);
            let oracle = (log_swapped - log_current).exp().min(1.0);
            let got = swap_ratio(ei, ej, b_hi, b_lo);
            worst = worst.max((got - oracle).abs() / oracle);
        }
    }
    report(
        "1c",
        worst <= 1e-12,
        format!("swap ratio vs normalized product-density ratio: max rel err {worst:.2e} (<= 1e-12)"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
    let p = random_params(4, 3, 2.5, &mut rng);
    let exact = brute_visible_marginal(&p);
    let betas = vec![1.0, 0.6, 0.3, 0.0];
    let mut ens = Ensemble::with_random_states(&p, betas, &mut rng).unwrap();
    let sweeps = 1_000_000;
    let mut counts = vec![0u64; exact.len()];
    for _ in 0..sweeps {
        ens.step(&p, 1, &mut rng);
        let v = &ens.target_state().visible;
        let idx = v.iter().enumerate().map(|(k, &b)| (b as usize) << k).sum::<usize>();
        counts[idx] += 1;
    }
    let tv = 0.5
        * counts
            .iter()
            .zip(&exact)
            .map(|(&c, &q)| (c as f64 / sweeps as f64 - q).abs())
            .sum::<f64>();
    let secs = start.elapsed().as_secs_f64();
    report(
        "2",
        tv <= 0.02 && secs < 60.0,
        format!("beta=1 visible marginal after 10^6 sweeps: TV {tv:.4} (<= 0.02), {secs:.1}s (< 60s)"),
    )
}

fn criterion_3() -> Outcome {
    let betas = [1.0, 0.82, 0.5, 0.33, 0.1, 0.0];
    let fup: Vec<f64> = (0..6).map(|i| 1.0 - i as f64 / 5.0).collect();
    let out = optimal_betas(&betas, &fup).unwrap();
    let fixed = out.iter().zip(betas).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let worked = optimal_betas(&[1.0, 0.5, 0.0], &[1.0, 0.25, 0.0]).unwrap()[1];
    report(
        "3",
        fixed <= 1e-9 && (worked - 0.6667).abs() <= 1e-4 && (worked - 2.0 / 3.0).abs() <= 1e-6,
        format!("fixed point max |d beta| {fixed:.1e} (<= 1e-9); worked example beta_2 = {worked:.7} (2/3 +- 1e-6)"),
    )
}

/// Results of the comparison grid grouped by sampler family, then by
/// hyper-parameter cell.
type Grid = BTreeMap<String, BTreeMap<String, Vec<(u64, TrainResult)>>>;

fn family_and_cell(label: &str) -> (String, String) {
    match label.find("_lr") {
        Some(k) => (label[..k].to_string(), label[k..].to_string()),
        None => (label.to_string(), String::new()),
    }
}

fn median_final(runs: &[(u64, TrainResult)]) -> f64 {
    let finals: Vec<f64> = runs.iter().map(|(_, r)| r.final_loglik().unwrap_or(f64::NEG_INFINITY)).collect();
    median(&finals).unwrap()
}

/// Cell with the highest median final log-likelihood.
fn best_cell<'a>(grid: &'a Grid, family: &str) -> (&'a str, &'a [(u64, TrainResult)]) {
    grid[family]
        .iter()
        .max_by(|a, b| median_final(a.1).total_cmp(&median_final(b.1)))
        .map(|(c, runs)| (c.as_str(), runs.as_slice()))
        .unwrap()
}

fn criterion_4(grid: &Grid, scale: &str) -> Outcome {
    let order = ["SML-APT", "SML-PT50", "SML-PT20", "SML-PT10", "SML"];
    let best: Vec<(&str, f64)> = order.iter().map(|f| (best_cell(grid, f).0, median_final(best_cell(grid, f).1))).collect();
    let chain = best.windows(2).take(3).all(|w| w[0].1 >= w[1].1);
    // Clear margin between the weakest tempered sampler and SML.
    let gap = best[3].1 - best[4].1;
    let separated = gap >= 1.0;
    // Non-improving (final <= initial) or collapsing (final at least one
    // nat below the peak), judged on the median run of the best SML cell.
    let sml = best_cell(grid, "SML").1;
    let gains: Vec<f64> = sml
        .iter()
        .map(|(_, r)| r.final_loglik().unwrap() - r.metrics[0].train_loglik.unwrap())
        .collect();
    let drops: Vec<f64> = sml
        .iter()
        .map(|(_, r)| {
            let peak = r.metrics.iter().filter_map(|m| m.train_loglik).fold(f64::NEG_INFINITY, f64::max);
            peak - r.final_loglik().unwrap()
        })
        .collect();
    let (gain, drop) = (median(&gains).unwrap(), median(&drops).unwrap());
    let diverges = gain <= 0.0 || drop >= 1.0;
    let cells: Vec<String> = order
        .iter()
        .zip(&best)
        .map(|(f, (cell, ll))| format!("{f}{cell}={ll:.3}"))
        .collect();
    report(
        "4",
        chain && separated && diverges,
        format!(
            "[{scale}] best-cell medians {}; ordering {} ; PT10-SML gap {gap:.3} (>= 1) ; SML median gain {gain:.3} (<= 0) or drop from peak {drop:.3} (>= 1)",
            cells.join(" "),
            if chain { "holds" } else { "violated" }
        ),
    )
}

fn fup_deviation(r: &TrainResult) -> f64 {
    let m = r.final_fup.len();
    r.final_fup
        .iter()
        .enumerate()
        .map(|(i, f)| (f - (1.0 - i as f64 / (m - 1) as f64)).abs())
        .fold(0.0, f64::max)
}

fn criterion_5(grid: &Grid) -> Outcome {
    let apt: Vec<f64> = best_cell(grid, "SML-APT").1.iter().map(|(_, r)| fup_deviation(r)).collect();
    let pt: Vec<f64> = best_cell(grid, "SML-PT50").1.iter().map(|(_, r)| fup_deviation(r)).collect();
    let (a, p) = (median(&apt).unwrap(), median(&pt).unwrap());
    report(
        "5",
        a <= 0.1 && p > 0.1,
        format!("median max |f_up - linear|: SML-APT {a:.3} (<= 0.1), SML-PT50 {p:.3} (> 0.1); per seed APT {apt:.3?} PT50 {pt:.3?}"),
    )
}

fn criterion_6(grid: &Grid) -> Outcome {
    let apt = best_cell(grid, "SML-APT").1;
    let pt = best_cell(grid, "SML-PT50").1;
    let mut pairs = Vec::new();
    for (seed, r) in apt {
        let other = pt.iter().find(|(s, _)| s == seed).map(|(_, r)| r).unwrap();
        pairs.push((*seed, r.final_tau_hat.unwrap(), other.final_tau_hat.unwrap()));
    }
    let pass = pairs.iter().all(|(_, a, p)| a <= p);
    let shown: Vec<String> = pairs.iter().map(|(s, a, p)| format!("seed{s}: {a:.1}<={p:.1}")).collect();
    report("6", pass, format!("final tau_hat SML-APT vs SML-PT50 per seed: {}", shown.join(", ")))
}

/// Swap-rate maintenance on one run: share of eligible eval points at or
/// above the target, and dips not followed by a spawn at the next check.
fn swap_rate_maintenance(r: &TrainResult) -> (f64, usize, usize) {
    let cfg = &r.config;
    let target = cfg.adaptation.min_avg_swap_rate;
    let interval = cfg.adaptation.spawn_check_interval;
    let warm_up = cfg.num_updates / 10;
    let eligible: Vec<_> = r
        .metrics
        .iter()
        .filter(|m| m.update_index >= warm_up && m.warm && !m.in_burn_in)
        .collect();
    let above = eligible.iter().filter(|m| m.avg_swap_rate >= target).count();
    let mut unanswered = 0;
    for m in eligible.iter().filter(|m| m.avg_swap_rate < target) {
        let window_end = m.update_index + interval;
        if window_end > cfg.num_updates || m.num_chains >= cfg.adaptation.max_chains {
            continue;
        }
        if !r.spawn_events.iter().any(|e| e.update_index > m.update_index && e.update_index <= window_end) {
            unanswered += 1;
        }
    }
    (above as f64 / eligible.len().max(1) as f64, eligible.len(), unanswered)
}

fn criterion_7(grid: &Grid, few_chains: &[(u64, TrainResult)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let runs = best_cell(grid, "SML-APT").1.iter().map(|r| ("init10", r)).chain(few_chains.iter().map(|r| ("init3", r)));
    for (tag, (seed, r)) in runs {
        let (share, n, unanswered) = swap_rate_maintenance(r);
        pass &= share >= 0.95 && unanswered == 0 && n > 0;
        parts.push(format!(
            "{tag}/seed{seed}: {:.0}% of {n}, {unanswered} unanswered, {} spawns",
            100.0 * share,
            r.spawn_events.len()
        ));
    }
    report("7", pass, format!("swap rate >= 0.4 at >= 95% of eval points: {}", parts.join("; ")))
}

fn without_wall_clock(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split(',').collect();
            cols.remove(1);
            cols.join(",")
        })
        .collect()
}

fn criterion_8(base: &TrainConfig) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let cases = [(Algorithm::Sml, 1), (Algorithm::SmlPt, 10), (Algorithm::SmlApt, 3)];
    for (algorithm, chains) in cases {
        let config = TrainConfig {
            algorithm,
            initial_num_chains: chains,
            num_updates: 3000,
            eval_interval: 100,
            seed: 77,
            record_wall_clock: false,
            ..base.clone()
        };
        let a = run_on_mixture(&config).unwrap().metrics_csv();
        let b = run_on_mixture(&config).unwrap().metrics_csv();
        let timed = TrainConfig {
            record_wall_clock: true,
            ..config.clone()
        };
        let c = run_on_mixture(&timed).unwrap().metrics_csv();
        let same = a == b && without_wall_clock(&a) == without_wall_clock(&c);
        pass &= same;
        parts.push(format!("{algorithm}: {}", if same { "identical" } else { "differs" }));
    }
    report("8", pass, format!("repeated runs, same config and seed: {}", parts.join(", ")))
}

fn main() {
    let scale = match std::env::var("SMLAPT_ACCEPTANCE_SCALE").as_deref() {
        Ok("full") => Scale::Full,
        _ => Scale::Ci,
    };
    let scale_name = if scale == Scale::Full { "full" } else { "ci" };
    let mut outcomes = vec![criterion_1a(), criterion_1b(), criterion_1c(), criterion_2(), criterion_3()];

    let dir = tempfile::tempdir().unwrap();
    let plan = fig1_sweep_plan(scale, dir.path().to_path_buf());
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let start = Instant::now();
    let output = run_experiment(&plan, jobs).unwrap();
    println!(
        "comparison grid [{scale_name}]: {} runs in {:.0}s",
        output.results.len(),
        start.elapsed().as_secs_f64()
    );
    let mut grid = Grid::new();
    for (label, seed, result) in output.results {
        let (family, cell) = family_and_cell(&label);
        grid.entry(family).or_default().entry(cell).or_default().push((seed, result));
    }
    outcomes.push(criterion_4(&grid, scale_name));
    outcomes.push(criterion_5(&grid));
    outcomes.push(criterion_6(&grid));

    let (cell, best_apt) = best_cell(&grid, "SML-APT");
    let apt_config = best_apt[0].1.config.clone();
    let few_chains: Vec<(u64, TrainResult)> = best_apt
        .iter()
        .map(|(seed, _)| {
            let config = TrainConfig {
                initial_num_chains: 3,
                seed: *seed,
                ..apt_config.clone()
            };
            (*seed, run_on_mixture(&config).unwrap())
        })
        .collect();
    println!("swap-rate runs use the best SML-APT cell {cell}");
    outcomes.push(criterion_7(&grid, &few_chains));
    outcomes.push(criterion_8(&apt_config));

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    if !failed.is_empty() {
        for o in &failed {
            eprintln!("failed criterion {}: {}", o.id, o.detail);
        }
        std::process::exit(1);
    }
}

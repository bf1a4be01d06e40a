use proptest::prelude::*;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use sml_apt::adaptation::{adapt_betas, maybe_spawn, optimal_betas, AdaptationConfig, MIN_BETA_GAP};
use sml_apt::rbm::{energy, exact_log_partition, log_partition_enumerating, JointState, Layer, RbmParams};
use sml_apt::tempering::{linear_ladder, Ensemble};

fn params_strategy(max_visible: usize, max_hidden: usize) -> impl Strategy<Value = RbmParams> {
    (1..=max_visible, 1..=max_hidden).prop_flat_map(|(nv, nh)| {
        (
            prop::collection::vec(-3.0..3.0f64, nv * nh),
            prop::collection::vec(-3.0..3.0f64, nh),
            prop::collection::vec(-3.0..3.0f64, nv),
        )
            .prop_map(move |(w, b, c)| RbmParams::new(nv, nh, w, b, c).unwrap())
    })
}

fn from_values(nv: usize, nh: usize, values: &[f64]) -> RbmParams {
    let mut p = RbmParams::zeros(nv, nh);
    for (k, v) in values.iter().enumerate() {
        *p.value_mut(k) = *v;
    }
    p
}

fn state_for(p: &RbmParams, index: usize) -> JointState {
    let n = p.num_visible + p.num_hidden;
    JointState::from_index(index % (1 << n), p.num_visible, p.num_hidden)
}

/// Strictly decreasing ladder from 1 to 0 with `m` slots.
fn ladder_strategy() -> impl Strategy<Value = Vec<f64>> {
    (3usize..8).prop_flat_map(|m| {
        prop::collection::vec(0.01..1.0f64, m - 1).prop_map(|gaps| {
            let total: f64 = gaps.iter().sum();
            let mut betas = vec![1.0];
            let mut acc = 0.0;
            for g in &gaps[..gaps.len() - 1] {
                acc += g / total;
                betas.push(1.0 - acc);
            }
            betas.push(0.0);
            betas
        })
    })
}

fn assert_valid_ladder(betas: &[f64]) {
    assert_eq!(betas[0], 1.0);
    assert_eq!(*betas.last().unwrap(), 0.0);
    for w in betas.windows(2) {
        assert!(w[0] - w[1] >= MIN_BETA_GAP * (1.0 - 1e-9), "{betas:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 64,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn energy_is_linear_in_parameters(
        (p, q) in (1usize..=5, 1usize..=4).prop_flat_map(|(nv, nh)| {
            let n = nv * nh + nv + nh;
            (prop::collection::vec(-3.0..3.0f64, n), prop::collection::vec(-3.0..3.0f64, n))
                .prop_map(move |(a, b)| (from_values(nv, nh, &a), from_values(nv, nh, &b)))
        }),
        a in -2.0..2.0f64,
        idx in 0usize..512,
    ) {
        let x = state_for(&p, idx);
        let mut mix = p.clone();
        for (k, qk) in q.iter_values().enumerate() {
            *mix.value_mut(k) += a * qk;
        }
        let lhs = energy(&mix, &x).unwrap();
        let rhs = energy(&p, &x).unwrap() + a * energy(&q, &x).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn partition_agrees_across_orientations_and_hidden_order(p in params_strategy(6, 6), beta in 0.0..=1.0f64, seed in any::<u64>()) {
        let by_visible = log_partition_enumerating(&p, beta, Layer::Visible, 25).unwrap();
        let by_hidden = log_partition_enumerating(&p, beta, Layer::Hidden, 25).unwrap();
        prop_assert!((by_visible - by_hidden).abs() <= 1e-10 * (1.0 + by_visible.abs()));
        let mut perm: Vec<usize> = (0..p.num_hidden).collect();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permuted = exact_log_partition(&p.permute_hidden(&perm), beta).unwrap();
        prop_assert!((permuted - by_hidden).abs() <= 1e-10 * (1.0 + by_hidden.abs()));
    }

    #[test]
    fn swap_phase_permutes_states(p in params_strategy(4, 3), m in 2usize..7, seed in any::<u64>()) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut ens = Ensemble::with_random_states(&p, linear_ladder(m), &mut rng).unwrap();
        for _ in 0..20 {
            let mut before: Vec<JointState> = ens.particles().iter().map(|x| x.state.clone()).collect();
            ens.deo_sweep(&p, 0, &mut rng);
            let mut after: Vec<JointState> = ens.particles().iter().map(|x| x.state.clone()).collect();
            before.sort_by_key(|s| s.index());
            after.sort_by_key(|s| s.index());
            prop_assert_eq!(before, after);
        }
    }

    #[test]
    fn flow_fraction_stays_in_unit_interval(p in params_strategy(4, 3), m in 2usize..7, seed in any::<u64>()) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut ens = Ensemble::with_random_states(&p, linear_ladder(m), &mut rng).unwrap();
        for _ in 0..200 {
            ens.step(&p, 1, &mut rng);
            let f = ens.f_up();
            prop_assert_eq!(f[0], 1.0);
            prop_assert_eq!(f[m - 1], 0.0);
            prop_assert!(f.iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!(ens.tau_hat() >= 1.0);
        }
    }

    #[test]
    fn respacing_keeps_a_valid_ladder(betas in ladder_strategy(), raw in prop::collection::vec(0.0..=1.0f64, 8)) {
        let m = betas.len();
        let mut fup = vec![1.0];
        fup.extend_from_slice(&raw[..m - 2]);
        fup.push(0.0);
        let out = optimal_betas(&betas, &fup).unwrap();
        prop_assert_eq!(out.len(), m);
        assert_valid_ladder(&out);
    }

    #[test]
    fn adaptation_and_spawning_keep_a_valid_ladder(p in params_strategy(4, 3), m in 3usize..6, seed in any::<u64>(), mu in 0.0..=1.0f64) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut ens = Ensemble::with_random_states(&p, linear_ladder(m), &mut rng).unwrap();
        let cfg = AdaptationConfig {
            beta_learning_rate: mu,
            min_avg_swap_rate: 0.99,
            spawn_check_interval: 50,
            burn_in_sweeps: 10,
            max_chains: 9,
        };
        for t in 1..=400 {
            ens.step(&p, 1, &mut rng);
            adapt_betas(&mut ens, &cfg).unwrap();
            if t % cfg.spawn_check_interval == 0 {
                maybe_spawn(&mut ens, &cfg, t);
            }
            assert_valid_ladder(ens.betas());
            prop_assert_eq!(ens.particles().len(), ens.betas().len());
            prop_assert!(ens.num_chains() <= cfg.max_chains);
        }
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use epsmcmc::bench::{run_full_mcmc_with, McmcSettings};
use epsmcmc::model::simulate_panel;
use epsmcmc::rng::{stream, Purpose};
use epsmcmc::smcmc::{
    adapt_iterations, estimate_rate, from_unconstrained, jump_extend, to_unconstrained,
    transition_step, tune_rw_scales, BlockContext, ChainState, RateEstimate, TuningConfig,
};
use epsmcmc::{Error, InitialState, PriorSpec, Theta};

mod common;
use common::{lambda_grid_posterior, lambda_histogram, total_variation};

fn truth() -> Theta {
    Theta::new(0.7, 3.8, 10.0).unwrap()
}

#[test]
fn both_samplers_match_the_exact_lambda_posterior_on_a_small_panel() {
    let th = truth();
    let sim = simulate_panel(&th, 4, 15, 10.0, 0, 21).unwrap();
    let y = sim.panel.series().to_vec();
    let bins = 20;
    let oracle = lambda_grid_posterior(&y, bins, 5);

    let prior = PriorSpec::default();
    let init = InitialState::Diffuse;
    let ctx = BlockContext {
        y: &y,
        init: &init,
        prior: &prior,
    };
    let (chains, sweeps, burn) = (8u64, 40_000, 2_000);
    let mut lam = Vec::new();
    for c in 0..chains {
        let mut rng = stream(7, Purpose::Bench, &[c]);
        let scales = tune_rw_scales(th, &ctx, 0.3, 10, 200, &mut rng).unwrap();
        let mut chain = ChainState::new(th, y.len(), 0, c as usize);
        jump_extend(&mut chain, &ctx, &y, &mut rng).unwrap();
        for i in 0..sweeps + burn {
            transition_step(&mut chain, &ctx, &scales, &mut rng).unwrap();
            if i >= burn {
                lam.push(chain.theta.lambda);
            }
        }
    }
    let tv = total_variation(&lambda_histogram(&lam, bins), &oracle);
    assert!(tv < 0.05, "transition kernel TV {tv}");

    let mut full = Vec::new();
    for c in 0..chains {
        let settings = McmcSettings {
            iters: sweeps,
            burnin: burn,
            seed: 90 + c,
            ..McmcSettings::default()
        };
        full.extend(
            run_full_mcmc_with(&sim.panel, &settings)
                .unwrap()
                .draws
                .iter()
                .map(|t| t.lambda),
        );
    }
    let tv = total_variation(&lambda_histogram(&full, bins), &oracle);
    assert!(tv < 0.05, "full sampler TV {tv}");
}

#[test]
fn unconstrained_map_round_trips() {
    for th in [
        truth(),
        Theta::new(0.01, 0.2, 0.5).unwrap(),
        Theta::new(0.999, 20.0, 19.5).unwrap(),
    ] {
        let back = from_unconstrained(&to_unconstrained(&th));
        for (a, b) in back.to_array().iter().zip(th.to_array()) {
            assert!(
                (a - b).abs() <= 1e-9 * b.abs().max(1.0),
                "{back:?} vs {th:?}"
            );
        }
    }
}

fn rate(v: f64) -> Result<RateEstimate, Error> {
    Ok(RateEstimate {
        lag: 0,
        value: v,
        defined: 1,
    })
}

#[test]
fn adapted_iterations_grow_with_epsilon() {
    let cfg = |epsilon| TuningConfig {
        epsilon,
        n_min: 1,
        n_max: 5000,
        rw_scales: None,
    };
    let mut last = 0;
    for eps in [0.01, 0.05, 0.1, 0.2, 0.5] {
        let n = adapt_iterations(|s| rate(0.999f64.powi(s as i32)), &cfg(eps));
        assert!(n > last, "eps {eps}: {n} <= {last}");
        last = n;
    }
    // Undefined everywhere falls back to n_max; n_min clamps from below.
    assert_eq!(
        adapt_iterations(|_| Err(Error::UndefinedRate), &cfg(0.1)),
        5000
    );
    let clamped = TuningConfig {
        n_min: 40,
        ..cfg(0.5)
    };
    assert_eq!(
        adapt_iterations(|s| rate(0.5f64.powi(s as i32)), &clamped),
        40
    );
}

#[test]
fn rate_estimate_is_invariant_to_affine_maps_of_either_side() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let first: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
        .collect();
    let later: Vec<Vec<f64>> = first
        .iter()
        .map(|v| {
            v.iter()
                .map(|x| 0.6 * x + 0.4 * rng.random::<f64>())
                .collect()
        })
        .collect();
    let base = estimate_rate(&first, &later, 5).unwrap();
    let scaled: Vec<Vec<f64>> = later
        .iter()
        .map(|v| v.iter().map(|x| 3.0 * x - 7.0).collect())
        .collect();
    let other = estimate_rate(&first, &scaled, 5).unwrap();
    assert!((base.value - other.value).abs() < 1e-12);
    assert_eq!(base.defined, 4);
    assert!(base.value <= 1.0 + 1e-12);
    // A coordinate constant across replicas is skipped.
    let mut flat = first.clone();
    for v in flat.iter_mut() {
        v[0] = 1.0;
    }
    assert_eq!(estimate_rate(&flat, &later, 5).unwrap().defined, 3);
    assert!(estimate_rate(&first[..1], &later[..1], 5).is_err());
}

#[test]
fn jump_extends_every_path_to_the_new_horizon() {
    let th = truth();
    let sim = simulate_panel(&th, 3, 30, 10.0, 100, 8).unwrap();
    let y = sim.panel.series().to_vec();
    let prior = PriorSpec::default().for_blocks(2);
    let init = InitialState::Diffuse;
    let ctx = BlockContext {
        y: &y,
        init: &init,
        prior: &prior,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut chain = ChainState::new(th, 3, 1, 0);
    let first: Vec<Vec<f64>> = y.iter().map(|s| s[..10].to_vec()).collect();
    jump_extend(&mut chain, &ctx, &first, &mut rng).unwrap();
    let rest: Vec<Vec<f64>> = y.iter().map(|s| s[10..].to_vec()).collect();
    jump_extend(&mut chain, &ctx, &rest, &mut rng).unwrap();
    let scales = [0.1; 3];
    for _ in 0..20 {
        transition_step(&mut chain, &ctx, &scales, &mut rng).unwrap();
    }
    assert_eq!(chain.t(), 30);
    assert_eq!(chain.dim(), 3 + 3 * 30);
    assert_eq!(chain.tracked_coordinates(10).len(), 3 + 3 * 20);
    assert!(chain.theta.nu > chain.theta.kappa - 1.0);
}

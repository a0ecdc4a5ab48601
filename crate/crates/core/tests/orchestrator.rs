use epsmcmc::bench::result_fingerprint;
use epsmcmc::merge::MergeConfig;
use epsmcmc::model::simulate_panel;
use epsmcmc::orchestrator::{run_ep_smcmc_with_cancel, schedule_tasks, CancelFlag, MergeSchedule};
use epsmcmc::smcmc::TuningConfig;
use epsmcmc::{run_ep_smcmc, Error, Panel, RunConfig, Theta};

fn panel(m: usize, t: usize) -> Panel {
    simulate_panel(&Theta::new(0.7, 3.8, 10.0).unwrap(), m, t, 10.0, 200, 3)
        .unwrap()
        .panel
}

fn config() -> RunConfig {
    RunConfig {
        block_size: 3,
        interval: 8,
        replicas: 3,
        master_seed: 17,
        tuning: TuningConfig {
            epsilon: 0.1,
            n_min: 4,
            n_max: 30,
            rw_scales: None,
        },
        merge: MergeConfig {
            sampler_iters: 300,
            burnin: 50,
            ..MergeConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn results_do_not_depend_on_the_worker_count() {
    let p = panel(6, 20);
    let base = run_ep_smcmc(&p, &config()).unwrap();
    for workers in [2, 3, 5] {
        let other = run_ep_smcmc(
            &p,
            &RunConfig {
                workers,
                ..config()
            },
        )
        .unwrap();
        assert_eq!(
            result_fingerprint(&base),
            result_fingerprint(&other),
            "workers {workers}"
        );
        assert_eq!(
            base.final_merged().unwrap().draws,
            other.final_merged().unwrap().draws
        );
    }
}

#[test]
fn retained_draws_follow_the_burn_in_rule() {
    let p = panel(6, 20);
    let cfg = config();
    let res = run_ep_smcmc(&p, &cfg).unwrap();
    assert_eq!(
        res.updates.iter().map(|u| u.t).collect::<Vec<_>>(),
        vec![8, 16, 20]
    );
    assert_eq!(res.num_blocks, 2);
    for u in &res.updates {
        assert!((cfg.tuning.n_min..=cfg.tuning.n_max).contains(&u.n_t));
        let keep = u.n_t - (u.n_t as f64 / 3.0).ceil() as usize;
        for block in &u.draws {
            assert_eq!(block.len(), cfg.replicas);
            assert!(block.iter().all(|r| r.len() == keep));
        }
        assert_eq!(u.pooled(0).len(), cfg.replicas * keep);
        // Only the last update is merged by default.
        assert_eq!(u.merged.is_some(), u.t == 20);
    }
    let every = run_ep_smcmc(
        &p,
        &RunConfig {
            merge_schedule: MergeSchedule::EveryUpdate,
            ..cfg
        },
    )
    .unwrap();
    assert!(every.updates.iter().all(|u| u.merged.is_some()));
}

#[test]
fn one_block_one_replica_runs_at_n_max() {
    let p = panel(3, 10);
    let cfg = RunConfig {
        replicas: 1,
        interval: 10,
        ..config()
    };
    let res = run_ep_smcmc(&p, &cfg).unwrap();
    assert_eq!(res.n_t(), vec![30]);
    assert_eq!(res.updates[0].rate, None);
    assert_eq!(res.final_merged_thetas().unwrap().len(), 300);
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_one() {
    let p = panel(6, 20);
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        checkpoint_dir: Some(dir.path().to_owned()),
        ..config()
    };
    let full = run_ep_smcmc(&p, &config()).unwrap();
    run_ep_smcmc(&p, &cfg).unwrap();
    // Dropping the last update leaves the state of an interruption after
    // the second one.
    std::fs::remove_dir_all(dir.path().join("u0002")).unwrap();
    let resumed = run_ep_smcmc(&p, &cfg).unwrap();
    assert_eq!(result_fingerprint(&full), result_fingerprint(&resumed));
    assert_eq!(
        full.final_merged().unwrap().draws,
        resumed.final_merged().unwrap().draws
    );

    // A checkpoint written by a different run is refused.
    assert!(run_ep_smcmc(
        &p,
        &RunConfig {
            master_seed: 18,
            ..cfg.clone()
        }
    )
    .is_err());

    let cancel = CancelFlag::new();
    cancel.cancel();
    let fresh = tempfile::tempdir().unwrap();
    let err = run_ep_smcmc_with_cancel(
        &p,
        &RunConfig {
            checkpoint_dir: Some(fresh.path().to_owned()),
            ..config()
        },
        &cancel,
    );
    assert!(matches!(err, Err(Error::Interrupted)));
}

#[test]
fn schedule_covers_every_task_once() {
    for (tasks, workers) in [(10, 4), (3, 8), (7, 1)] {
        let plan = schedule_tasks(tasks, workers).unwrap();
        let mut seen: Vec<usize> = plan.assignments.iter().cloned().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..tasks).collect::<Vec<_>>());
    }
    assert!(schedule_tasks(4, 0).is_err());
}

#[test]
fn invalid_configurations_are_rejected() {
    let p = panel(4, 10);
    for cfg in [
        RunConfig {
            block_size: 5,
            ..config()
        },
        RunConfig {
            replicas: 0,
            ..config()
        },
        RunConfig {
            burnin_fraction: 1.0,
            ..config()
        },
    ] {
        assert!(matches!(
            run_ep_smcmc(&p, &cfg),
            Err(Error::InvalidParameter(_))
        ));
    }
}

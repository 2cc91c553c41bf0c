//! Cross-solver checks on small instances.

use nomad_core::baselines::{run_als, run_ccdpp, run_dsgd, run_serial_sgd, DsgdConfig, Sampling, SerialConfig, StepRule};
use nomad_core::nomad::{run_nomad, NomadConfig};
use nomad_core::{objective, partition_rows, Budget, CheckpointInterval, HyperParams, Rating, RunControl, ShardedRatings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64) -> Vec<Rating> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..20u32 {
        for j in 0..10u32 {
            if rng.random::<f64>() < 0.5 || j == i % 10 {
                out.push(Rating::new(i, j, rng.random_range(0.0..2.0)));
            }
        }
    }
    out
}

#[test]
fn all_solvers_agree_on_the_optimum() {
    let ratings = instance(3);
    let data = ShardedRatings::single(20, 10, &ratings).unwrap();
    let params = HyperParams::new(2, 0.1, 0.02, 0.0).unwrap();
    let long = RunControl::new(Budget::epochs(600.0), CheckpointInterval::Never);
    let j = |w, h| objective(w, h, &data, &params).unwrap();

    let als = run_als(&data, &params, &long, 1, &[]).unwrap();
    let ccd = run_ccdpp(&data, &params, &long, 1, &[], 3).unwrap();
    let sgd = run_serial_sgd(
        &data,
        &params,
        &SerialConfig {
            sampling: Sampling::Permutation,
            step: StepRule::Schedule,
        },
        &long,
        1,
        &[],
    )
    .unwrap();
    let dsgd = run_dsgd(&data, &params, &DsgdConfig::new(2, 0.02), &long, 1, &[]).unwrap();
    let two = ShardedRatings::new(20, 10, &ratings, partition_rows(20, 2).unwrap()).unwrap();
    let nomad = run_nomad(&two, &params, &NomadConfig::default(), &long, 1, &[]).unwrap();

    let values = [
        j(&als.w, &als.h),
        j(&ccd.w, &ccd.h),
        j(&sgd.w, &sgd.h),
        j(&dsgd.result.w, &dsgd.result.h),
        j(&nomad.w, &nomad.h),
    ];
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    for v in values {
        assert!(v <= best * 1.05, "{values:?}");
    }
}

#[test]
fn logs_share_one_format() {
    let ratings = instance(4);
    let data = ShardedRatings::single(20, 10, &ratings).unwrap();
    let params = HyperParams::new(2, 0.1, 0.02, 0.0).unwrap();
    let control = RunControl::new(Budget::epochs(3.0), CheckpointInterval::Never);
    let test = &ratings[..10];
    for log in [
        run_als(&data, &params, &control, 1, test).unwrap().log,
        run_ccdpp(&data, &params, &control, 1, test, 1).unwrap().log,
        run_serial_sgd(&data, &params, &SerialConfig::default(), &control, 1, test).unwrap().log,
    ] {
        let text = log.to_csv();
        let back = nomad_core::ConvergenceLog::from_csv(&text).unwrap();
        assert_eq!(back.records.len(), log.records.len());
        assert!(log.meta("solver").is_some());
        assert_eq!(log.records[0].total_updates, 0);
        assert!(log.records.iter().all(|r| r.test_rmse.is_finite()));
    }
}

#[test]
fn target_rmse_stops_early() {
    let ratings = instance(5);
    let data = ShardedRatings::single(20, 10, &ratings).unwrap();
    let params = HyperParams::new(2, 0.1, 0.02, 0.0).unwrap();
    let mut budget = Budget::epochs(500.0);
    budget.target_rmse = Some(10.0);
    let control = RunControl::new(budget, CheckpointInterval::Never);
    let out = run_als(&data, &params, &control, 1, &ratings).unwrap();
    assert_eq!(out.total_updates, 0);
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tdciv::estimator::{
    ace_civ_ratio, ace_naive, ace_two_stage, evaluate, oracle_steps, Column, EstimatorError,
    DEFAULT_WEAK_INSTRUMENT_TOLERANCE,
};
use tdciv::synthdata::{generate_dataset, GenConfig};

const TOL: f64 = DEFAULT_WEAK_INSTRUMENT_TOLERANCE;

fn defaults(n: usize, seed: u64) -> GenConfig {
    GenConfig { n_samples: n, seed, ..GenConfig::default() }
}

/// `None` when some step has a weak first stage.
fn oracle_error(cfg: &GenConfig) -> Option<f64> {
    let d = generate_dataset(cfg).unwrap();
    match ace_civ_ratio("oracle", &oracle_steps(&d).unwrap(), TOL) {
        Ok(r) => evaluate(&r, d.true_ace.as_ref().unwrap()).unwrap().mean_abs_error(2),
        Err(EstimatorError::WeakInstrument { .. }) => None,
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn oracle_ratio_and_two_stage_agree_on_defaults() {
    let d = generate_dataset(&defaults(8000, 2)).unwrap();
    let steps = oracle_steps(&d).unwrap();
    let ratio = ace_civ_ratio("oracle", &steps, TOL).unwrap();
    let tsls = ace_two_stage("oracle", &steps, TOL).unwrap();
    assert_eq!(ratio.steps.len(), 9);
    for (a, b) in ratio.estimates().iter().zip(tsls.estimates()) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
    let err = evaluate(&ratio, d.true_ace.as_ref().unwrap()).unwrap().mean_abs_error(2).unwrap();
    assert!(err <= 0.05, "oracle error {err}");
}

#[test]
fn oracle_error_shrinks_with_sample_size() {
    let sizes = [2000, 4000, 8000];
    // Replicates with a weak step at any size are left out of every average.
    let table: Vec<Vec<f64>> = (0..6)
        .filter_map(|seed| sizes.iter().map(|&n| oracle_error(&defaults(n, seed))).collect::<Option<Vec<_>>>())
        .collect();
    assert!(table.len() >= 4, "only {} usable replicates", table.len());
    let errs: Vec<f64> =
        (0..sizes.len()).map(|k| table.iter().map(|row| row[k]).sum::<f64>() / table.len() as f64).collect();
    assert!(errs[0] >= errs[1] && errs[1] >= errs[2], "{errs:?}");
}

#[test]
fn independent_noise_control_barely_moves_the_estimate() {
    let d = generate_dataset(&defaults(8000, 0)).unwrap();
    let steps = oracle_steps(&d).unwrap();
    let base = ace_civ_ratio("oracle", &steps, TOL).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noisy: Vec<_> = steps
        .into_iter()
        .map(|mut s| {
            let v = (0..d.n_samples).map(|_| rng.sample(StandardNormal)).collect();
            s.controls.push(Column::new("noise", v));
            s
        })
        .collect();
    let with = ace_civ_ratio("oracle", &noisy, TOL).unwrap();
    for (a, b) in base.estimates().iter().zip(with.estimates()) {
        assert!((a - b).abs() <= 0.01, "{a} vs {b}");
    }
}

#[test]
fn naive_is_worse_than_the_oracle_under_confounding() {
    let mut compared = 0;
    for seed in 0..4 {
        let d = generate_dataset(&defaults(8000, seed)).unwrap();
        let truth = d.true_ace.clone().unwrap();
        let naive = evaluate(&ace_naive(&d).unwrap(), &truth).unwrap().mean_abs_error(2).unwrap();
        // The oracle is undefined when a step's first stage is weak.
        let Some(oracle) = oracle_error(&defaults(8000, seed)) else { continue };
        assert!(naive > oracle, "seed {seed}: naive {naive}, oracle {oracle}");
        compared += 1;
    }
    assert!(compared >= 2, "only {compared} seeds had a usable oracle");
}

use std::collections::BTreeMap;

use copydet_core::model::Registry;
use copydet_core::penalty::{build_design, fit_penalties, DEFAULT_LAMBDA};
use copydet_core::synth::{sample_population, stream_rng, SynthConfig};
use proptest::prelude::*;
use rand::Rng;

fn recovery_config(seed: u64, n: usize, noise: f64) -> SynthConfig {
    let registry = Registry::builtin();
    let mut rng = stream_rng(seed, 0xfeed);
    let mut config = SynthConfig {
        n_queries_matched: n,
        n_distractors: 0,
        seed,
        face_fraction: 0.0,
        manual_fraction: 0.0,
        noise_sigma: noise,
        intensity_slope: 0.0,
        ..SynthConfig::default()
    };
    config.planted_penalties = registry
        .entries()
        .iter()
        .map(|t| (t.name.clone(), rng.random_range(-0.05..=0.6)))
        .collect();
    let w = config.step_count_weights;
    let tail: f64 = w[1..].iter().sum();
    config.step_count_weights = [0.0, w[1] / tail, w[2] / tail, w[3] / tail, w[4] / tail, w[5] / tail];
    for m in &mut config.attack_models {
        m.offset = 0.0;
    }
    config
}

fn fitted(config: &SynthConfig) -> BTreeMap<String, f64> {
    let registry = Registry::builtin();
    let pop = sample_population(config, registry).unwrap();
    let aps = pop.metadata.iter().zip(&pop.targets).map(|(m, &t)| (m.query_id.clone(), t)).collect();
    let design = build_design(&pop.metadata, &aps, registry).unwrap();
    fit_penalties(&design, DEFAULT_LAMBDA).unwrap().penalties
}

fn max_error(config: &SynthConfig, fit: &BTreeMap<String, f64>) -> f64 {
    fit.iter()
        .map(|(name, p)| (p - config.planted_penalties[name]).abs())
        .fold(0.0, f64::max)
}

#[test]
fn noiseless_population_is_recovered_exactly() {
    for seed in 0..3 {
        let config = recovery_config(seed, 5000, 0.0);
        let fit = fitted(&config);
        assert_eq!(fit.len(), Registry::builtin().len());
        let err = max_error(&config, &fit);
        assert!(err < 1e-8, "seed {seed}: {err}");
    }
}

#[test]
fn noisy_population_is_recovered_within_tolerance() {
    let errs: Vec<f64> = (0..5)
        .map(|seed| {
            let config = recovery_config(seed, 5000, 0.05);
            max_error(&config, &fitted(&config))
        })
        .collect();
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!(mean <= 0.02, "{errs:?}");
}

#[test]
fn design_column_counts_match_sampling_log() {
    let config = SynthConfig {
        n_queries_matched: 3000,
        n_distractors: 0,
        seed: 11,
        ..SynthConfig::default()
    };
    let registry = Registry::builtin();
    let pop = sample_population(&config, registry).unwrap();
    let aps = pop.metadata.iter().zip(&pop.targets).map(|(m, &t)| (m.query_id.clone(), t)).collect();
    let design = build_design(&pop.metadata, &aps, registry).unwrap();
    assert_eq!(design.column_counts(), pop.log.transformation_counts);
    assert_eq!(design.rows(), 3000 - pop.log.n_manual);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fit_ignores_record_order(seed in 0u64..1000, shuffle in any::<u64>()) {
        let config = recovery_config(seed, 600, 0.05);
        let registry = Registry::builtin();
        let pop = sample_population(&config, registry).unwrap();
        let aps: BTreeMap<String, f64> =
            pop.metadata.iter().zip(&pop.targets).map(|(m, &t)| (m.query_id.clone(), t)).collect();
        let a = fit_penalties(&build_design(&pop.metadata, &aps, registry).unwrap(), DEFAULT_LAMBDA).unwrap();
        let mut shuffled = pop.metadata.clone();
        let mut rng = stream_rng(shuffle, 1);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let b = fit_penalties(&build_design(&shuffled, &aps, registry).unwrap(), DEFAULT_LAMBDA).unwrap();
        for (name, p) in &a.penalties {
            prop_assert!((p - b.penalties[name]).abs() < 1e-9, "{name}");
        }
    }
}

use std::fs;

use copydet_core::knn::knn_search;
use copydet_core::metrics::{mean_ap, micro_ap, per_query_aps};
use copydet_core::model::{validate_metadata, Registry};
use copydet_core::synth::{generate, sample_population, SynthConfig};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn metadata_is_valid_for_every_seed() {
    let registry = Registry::builtin();
    for seed in 0..100 {
        let config = SynthConfig {
            n_queries_matched: 500,
            n_distractors: 0,
            seed,
            ..SynthConfig::default()
        };
        let pop = sample_population(&config, registry).unwrap();
        for m in &pop.metadata {
            assert!(m.violations(registry).is_empty(), "seed {seed}: {:?}", m.violations(registry));
        }
        validate_metadata(&pop.metadata, registry).unwrap();
    }
}

#[test]
fn step_histogram_follows_configured_weights() {
    // Penalties of zero keep every sequence feasible, so the histogram is
    // not distorted by resampling.
    let mut config = SynthConfig {
        n_queries_matched: 10_000,
        n_distractors: 0,
        manual_fraction: 0.0,
        seed: 2024,
        ..SynthConfig::default()
    };
    config.planted_penalties.values_mut().for_each(|p| *p = 0.0);
    for e in &mut config.attack_models {
        e.offset = 0.0;
    }
    config.face_penalty = 0.0;
    let pop = sample_population(&config, Registry::builtin()).unwrap();
    assert_eq!(pop.log.resampled_sequences, 0);
    let n: usize = pop.log.step_counts.values().sum();
    assert_eq!(n, 10_000);
    let stat: f64 = config
        .step_count_weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let expected = w * n as f64;
            let observed = *pop.log.step_counts.get(&(i + 1)).unwrap_or(&0) as f64;
            (observed - expected).powi(2) / expected
        })
        .sum();
    let p = 1.0 - ChiSquared::new(5.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi2 {stat}, p {p}");
}

fn small() -> SynthConfig {
    SynthConfig {
        n_refs: 2000,
        n_queries_matched: 120,
        n_distractors: 300,
        n_train: 1000,
        dim: 32,
        seed: 8,
        ..SynthConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(&small()).unwrap().save(a.path()).unwrap();
    generate(&small()).unwrap().save(b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 9);
    for name in names {
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name:?}");
    }
    let mut other = small();
    other.seed = 9;
    let c = tempfile::tempdir().unwrap();
    generate(&other).unwrap().save(c.path()).unwrap();
    assert_ne!(fs::read(a.path().join("queries.dsc")).unwrap(), fs::read(c.path().join("queries.dsc")).unwrap());
}

#[test]
fn zero_perturbation_retrieves_everything() {
    let mut config = small();
    config.planted_penalties.values_mut().for_each(|p| *p = 0.0);
    config.editors.iter_mut().for_each(|e| e.penalty = 0.0);
    config.attack_models.iter_mut().for_each(|m| m.offset = 0.0);
    config.face_penalty = 0.0;
    config.noise_sigma = 0.0;
    let ds = generate(&config).unwrap();
    let list = knn_search(&ds.queries, &ds.refs, 10).unwrap().to_candidates(&ds.queries, &ds.refs);
    assert_eq!(micro_ap(&list, &ds.gt, ds.gt.len()).unwrap().value, 1.0);
    let aps = per_query_aps(&list, &ds.gt);
    assert_eq!(mean_ap(ds.gt.query_ids().map(|q| aps[q])).unwrap().value, 1.0);
}

use copydet_core::knn::knn_search;
use copydet_core::metrics::{micro_ap, per_query_aps};
use copydet_core::model::{Candidate, CandidateList, DescriptorSet};
use copydet_core::normalize::{
    normalize_descriptor_rescale, normalize_descriptor_subtract, normalize_scores, BackgroundIndex,
    DEFAULT_RESCALE_EXPONENT,
};
use copydet_core::synth::{generate, inject_query_offsets, SynthConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian_set(prefix: &str, n: usize, dim: usize, seed: u64) -> DescriptorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..n * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    DescriptorSet::new((0..n).map(|i| format!("{prefix}{i}")).collect(), dim, data).unwrap()
}

#[test]
fn subtract_outputs_unit_vectors() {
    let set = gaussian_set("v", 10_000, 32, 1);
    let bg = BackgroundIndex::new(gaussian_set("t", 2000, 32, 2), 10, 1.0).unwrap();
    let out = normalize_descriptor_subtract(&set, &bg).unwrap();
    for (_, row) in out.rows() {
        let norm = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6, "{norm}");
    }
}

#[test]
fn rescale_is_identity_under_uniform_background_distances() {
    let dim = 24;
    let basis = 6;
    let mut train = vec![0f32; basis * dim];
    for i in 0..basis {
        train[i * dim + i] = 1.0;
    }
    let train = DescriptorSet::new((0..basis).map(|i| format!("t{i}")).collect(), dim, train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f32>> = (0..500)
        .map(|_| {
            let mut v: Vec<f32> = (0..dim).map(|j| if j < basis { 0.0 } else { rng.sample(StandardNormal) }).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            v
        })
        .collect();
    let set = DescriptorSet::from_rows((0..500).map(|i| format!("q{i}")).collect(), &rows).unwrap();
    let bg = BackgroundIndex::new(train, 3, 1.0).unwrap();
    for exponent in [-1.0, 1.0] {
        let out = normalize_descriptor_rescale(&set, &bg, exponent).unwrap();
        for (a, b) in out.data().iter().zip(set.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-6));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn score_normalization_keeps_per_query_order(seed in any::<u64>(), n in 1usize..12, beta in 0.0f64..3.0) {
        let refs = gaussian_set("r", 120, 8, seed);
        let queries = gaussian_set("q", 30, 8, seed ^ 1);
        let bg = BackgroundIndex::new(gaussian_set("t", 60, 8, seed ^ 2), n, beta).unwrap();
        let list = knn_search(&queries, &refs, 15).unwrap().to_candidates(&queries, &refs);
        let normalized = normalize_scores(&list, &queries, &bg).unwrap();
        let order = |l: &CandidateList| {
            let mut v: Vec<&Candidate> = l.triples().iter().collect();
            v.sort_by(|a, b| {
                a.query_id.cmp(&b.query_id).then(b.score.total_cmp(&a.score)).then(a.reference_id.cmp(&b.reference_id))
            });
            v.into_iter().map(|c| (c.query_id.clone(), c.reference_id.clone())).collect::<Vec<_>>()
        };
        prop_assert_eq!(order(&list), order(&normalized));
    }
}

#[test]
fn score_normalization_undoes_query_offsets() {
    let config = SynthConfig {
        n_refs: 5000,
        n_queries_matched: 300,
        n_distractors: 1200,
        n_train: 5000,
        dim: 64,
        seed: 4,
        ..SynthConfig::default()
    };
    let ds = generate(&config).unwrap();
    let (q, r, t, _) = inject_query_offsets(&ds.queries, &ds.refs, &ds.train, 0.5, 4).unwrap();
    let plain = knn_search(&ds.queries, &ds.refs, 10).unwrap().to_candidates(&ds.queries, &ds.refs);
    let biased = knn_search(&q, &r, 10).unwrap().to_candidates(&q, &r);
    let fixed = normalize_scores(&biased, &q, &BackgroundIndex::new(t, 10, 1.0).unwrap()).unwrap();
    let total = ds.gt.len();
    let micro = |l| micro_ap(l, &ds.gt, total).unwrap().value;
    let (m_plain, m_biased, m_fixed) = (micro(&plain), micro(&biased), micro(&fixed));
    assert!(m_biased < m_plain - 0.05, "{m_plain} {m_biased}");
    assert!(m_fixed > m_biased, "{m_biased} {m_fixed}");
    assert_eq!(per_query_aps(&plain, &ds.gt), per_query_aps(&biased, &ds.gt));
}

#[test]
fn descriptor_normalizations_improve_biased_micro_ap() {
    let ds = generate(&SynthConfig::default()).unwrap();
    let (q, r, t, _) = inject_query_offsets(&ds.queries, &ds.refs, &ds.train, 0.5, 1).unwrap();
    let bg = BackgroundIndex::new(t, 10, 1.0).unwrap();
    let micro = |queries: &DescriptorSet, refs: &DescriptorSet| {
        let list = knn_search(queries, refs, 10).unwrap().to_candidates(queries, refs);
        micro_ap(&list, &ds.gt, ds.gt.len()).unwrap().value
    };
    let biased = micro(&q, &r);
    let subtract = micro(
        &normalize_descriptor_subtract(&q, &bg).unwrap(),
        &normalize_descriptor_subtract(&r, &bg).unwrap(),
    );
    let rescale = micro(&normalize_descriptor_rescale(&q, &bg, DEFAULT_RESCALE_EXPONENT).unwrap(), &r);
    assert!(subtract > biased, "{biased} -> {subtract}");
    assert!(rescale > biased, "{biased} -> {rescale}");
}

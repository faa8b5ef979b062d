use copydet_core::knn::{knn_search, knn_search_with_threads, squared_l2};
use copydet_core::model::DescriptorSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian_set(prefix: &str, n: usize, dim: usize, rng: &mut ChaCha8Rng) -> DescriptorSet {
    let data: Vec<f32> = (0..n * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    DescriptorSet::new((0..n).map(|i| format!("{prefix}{i}")).collect(), dim, data).unwrap()
}

/// Full sort of every reference, (distance², row) ascending.
fn naive(queries: &DescriptorSet, refs: &DescriptorSet, k: usize) -> Vec<Vec<(usize, f64)>> {
    (0..queries.len())
        .map(|qi| {
            let q = queries.row(qi);
            let mut all: Vec<(usize, f64)> = (0..refs.len())
                .map(|ri| {
                    let d2: f64 = q.iter().zip(refs.row(ri)).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
                    (ri, d2)
                })
                .collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            all.truncate(k);
            all
        })
        .collect()
}

#[test]
fn matches_naive_search() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refs = gaussian_set("r", 1000, 64, &mut rng);
        let queries = gaussian_set("q", 100, 64, &mut rng);
        let got = knn_search(&queries, &refs, 10).unwrap();
        let want = naive(&queries, &refs, 10);
        for (g, w) in got.neighbors.iter().zip(&want) {
            assert_eq!(g.len(), 10);
            for (n, &(row, d2)) in g.iter().zip(w) {
                assert_eq!(n.index, row, "seed {seed}");
                let d = d2.sqrt();
                assert!((n.distance - d).abs() <= 1e-6 * d.max(1e-12), "seed {seed}: {} vs {d}", n.distance);
                assert!((n.score + d2).abs() <= 1e-9 * d2.max(1e-12));
            }
        }
    }
}

#[test]
fn bitwise_identical_across_thread_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let refs = gaussian_set("r", 5000, 48, &mut rng);
    let queries = gaussian_set("q", 300, 48, &mut rng);
    let base = knn_search_with_threads(&queries, &refs, 7, 1).unwrap();
    for threads in [2, 8] {
        let other = knn_search_with_threads(&queries, &refs, 7, threads).unwrap();
        for (a, b) in base.neighbors.iter().flatten().zip(other.neighbors.iter().flatten()) {
            assert_eq!(a.index, b.index);
            assert_eq!(a.distance.to_bits(), b.distance.to_bits());
        }
    }
}

#[test]
fn duplicated_references_break_ties_by_row() {
    let refs = DescriptorSet::from_rows(
        vec!["a".into(), "b".into(), "c".into(), "d".into()],
        &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]],
    )
    .unwrap();
    let queries = DescriptorSet::from_rows(vec!["q".into()], &[vec![1.0, 1.0]]).unwrap();
    let got = knn_search(&queries, &refs, 4).unwrap();
    let rows: Vec<usize> = got.neighbors[0].iter().map(|n| n.index).collect();
    assert_eq!(rows, vec![0, 1, 2, 3]);
}

#[test]
fn k_larger_than_reference_count_returns_all() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let refs = gaussian_set("r", 6, 8, &mut rng);
    let queries = gaussian_set("q", 3, 8, &mut rng);
    let got = knn_search(&queries, &refs, 50).unwrap();
    assert!(got.neighbors.iter().all(|n| n.len() == 6));
    let list = got.to_candidates(&queries, &refs);
    assert_eq!(list.len(), 18);
    let d = squared_l2(queries.row(0), refs.row(got.neighbors[0][0].index));
    assert_eq!(-d, got.neighbors[0][0].score);
}

//! Exact k-nearest-neighbor search under L2 distance.
//!
//! Every query is screened against every reference with a blocked `f32`
//! kernel (`‖q‖² + ‖r‖² − 2⟨q, r⟩`). Each screened value comes with a
//! worst-case rounding bound, so a reference can be discarded only when it
//! provably cannot enter the top k. Survivors are rescored with a direct
//! `f64` sum of squared differences and ranked by (distance, reference row).
//! The result is therefore identical to a naive double loop, and independent
//! of how query blocks are scheduled over threads.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Candidate, CandidateList, DescriptorSet};

const QUERY_BLOCK: usize = 64;
const REF_BLOCK: usize = 2048;

/// One retrieved reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Row of the reference in the searched set.
    pub index: usize,
    pub distance: f64,
    /// `-distance²`, so that higher means more similar.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub k: usize,
    /// One list per query row, nearest first.
    pub neighbors: Vec<Vec<Neighbor>>,
}

impl SearchResult {
    /// Flattens into candidate triples, queries in row order.
    pub fn to_candidates(&self, queries: &DescriptorSet, refs: &DescriptorSet) -> CandidateList {
        let triples = self
            .neighbors
            .iter()
            .enumerate()
            .flat_map(|(q, list)| {
                list.iter()
                    .map(move |n| Candidate::new(queries.id(q), refs.id(n.index), n.score))
            })
            .collect();
        CandidateList::new(triples).expect("search results hold unique finite pairs")
    }
}

/// Squared L2 distance accumulated in `f64`, element order.
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn squared_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum()
}

#[derive(Clone, Copy, PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Screening state for one query.
struct Screen {
    k: usize,
    /// k smallest upper bounds seen so far (max-heap).
    uppers: BinaryHeap<Key>,
    /// k-th smallest upper bound; the true k-th distance cannot exceed it.
    threshold: f64,
    survivors: Vec<(u32, f64)>,
}

impl Screen {
    fn new(k: usize) -> Self {
        Self {
            k,
            uppers: BinaryHeap::with_capacity(k + 1),
            threshold: f64::INFINITY,
            survivors: Vec::new(),
        }
    }

    #[inline]
    fn offer(&mut self, index: usize, lower: f64, upper: f64) {
        if lower > self.threshold {
            return;
        }
        if upper < self.threshold {
            self.uppers.push(Key(upper));
            if self.uppers.len() > self.k {
                self.uppers.pop();
            }
            if self.uppers.len() == self.k {
                self.threshold = self.uppers.peek().map_or(f64::INFINITY, |k| k.0);
            }
        }
        self.survivors.push((index as u32, lower));
        if self.survivors.len() > 4 * self.k + 256 {
            let t = self.threshold;
            self.survivors.retain(|&(_, lo)| lo <= t);
        }
    }

    fn finish(mut self, query: &[f32], refs: &DescriptorSet) -> Vec<Neighbor> {
        let t = self.threshold;
        self.survivors.retain(|&(_, lo)| lo <= t);
        let mut exact: Vec<(f64, usize)> = self
            .survivors
            .iter()
            .map(|&(j, _)| (squared_l2(query, refs.row(j as usize)), j as usize))
            .collect();
        exact.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        exact.truncate(self.k);
        exact
            .into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
                score: -d2,
            })
            .collect()
    }
}

fn check_inputs(queries: &DescriptorSet, refs: &DescriptorSet, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if refs.is_empty() {
        return Err(Error::EmptyReferenceSet);
    }
    if queries.dim() != refs.dim() {
        return Err(Error::DimMismatch {
            expected: refs.dim(),
            found: queries.dim(),
        });
    }
    Ok(())
}

/// Exact top-`k` references for every query, on the current rayon pool.
pub fn knn_search(queries: &DescriptorSet, refs: &DescriptorSet, k: usize) -> Result<SearchResult> {
    check_inputs(queries, refs, k)?;
    let dim = refs.dim();
    let ref_norms: Vec<f64> = (0..refs.len()).map(|j| squared_norm(refs.row(j))).collect();
    let ref_lens: Vec<f64> = ref_norms.iter().map(|n| n.sqrt()).collect();

    // |fl(<q,r>) - <q,r>| <= gamma_d * sum|q_i r_i| <= gamma_d * |q||r| for any
    // summation order, FMA or not. The f64 combination adds a few ulps of
    // the operands on top.
    let u = f32::EPSILON as f64 / 2.0;
    let gamma = (dim as f64 + 2.0) * u / (1.0 - (dim as f64 + 2.0) * u);
    let dot_coef = 2.0 * gamma * 1.01;
    let f64_coef = 4.0 * (dim as f64 + 4.0) * f64::EPSILON;

    let blocks: Vec<usize> = (0..queries.len()).step_by(QUERY_BLOCK).collect();
    let neighbors: Vec<Vec<Vec<Neighbor>>> = blocks
        .par_iter()
        .map(|&start| {
            let end = (start + QUERY_BLOCK).min(queries.len());
            let rows = end - start;
            let q_norms: Vec<f64> = (start..end).map(|i| squared_norm(queries.row(i))).collect();
            let q_lens: Vec<f64> = q_norms.iter().map(|n| n.sqrt()).collect();
            let mut screens: Vec<Screen> = (0..rows).map(|_| Screen::new(k)).collect();
            let mut dots = vec![0f32; rows * REF_BLOCK];

            for ref_start in (0..refs.len()).step_by(REF_BLOCK) {
                let ref_end = (ref_start + REF_BLOCK).min(refs.len());
                let cols = ref_end - ref_start;
                let a = &queries.data()[start * dim..end * dim];
                let b = &refs.data()[ref_start * dim..ref_end * dim];
                // SAFETY: `a` is rows x dim (row stride dim), `b` is read as
                // its transpose dim x cols (row stride 1, column stride dim),
                // and `dots` holds rows x cols with row stride cols. All
                // slices cover the strided extents.
                unsafe {
                    matrixmultiply::sgemm(
                        rows,
                        dim,
                        cols,
                        1.0,
                        a.as_ptr(),
                        dim as isize,
                        1,
                        b.as_ptr(),
                        1,
                        dim as isize,
                        0.0,
                        dots.as_mut_ptr(),
                        cols as isize,
                        1,
                    );
                }
                for (i, screen) in screens.iter_mut().enumerate() {
                    let qn = q_norms[i];
                    let ql = q_lens[i];
                    let row = &dots[i * cols..(i + 1) * cols];
                    for (c, &dot) in row.iter().enumerate() {
                        let j = ref_start + c;
                        let rn = ref_norms[j];
                        let approx = qn + rn - 2.0 * dot as f64;
                        let slack = dot_coef * ql * ref_lens[j] + f64_coef * (qn + rn);
                        screen.offer(j, approx - slack, approx + slack);
                    }
                }
            }
            screens
                .into_iter()
                .enumerate()
                .map(|(i, s)| s.finish(queries.row(start + i), refs))
                .collect()
        })
        .collect();

    Ok(SearchResult {
        k,
        neighbors: neighbors.into_iter().flatten().collect(),
    })
}

/// [`knn_search`] on a dedicated pool of `threads` workers.
pub fn knn_search_with_threads(
    queries: &DescriptorSet,
    refs: &DescriptorSet,
    k: usize,
    threads: usize,
) -> Result<SearchResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| knn_search(queries, refs, k))
}

/// Scores fixed (query, reference) pairs as `-‖q - r‖²`.
pub fn pairwise_scores<Q: AsRef<str>, R: AsRef<str>>(
    queries: &DescriptorSet,
    refs: &DescriptorSet,
    pairs: &[(Q, R)],
) -> Result<CandidateList> {
    if queries.dim() != refs.dim() {
        return Err(Error::DimMismatch {
            expected: refs.dim(),
            found: queries.dim(),
        });
    }
    let triples = pairs
        .iter()
        .map(|(q, r)| {
            let (q, r) = (q.as_ref(), r.as_ref());
            let qv = queries.get(q).ok_or_else(|| Error::UnknownId(q.to_string()))?;
            let rv = refs.get(r).ok_or_else(|| Error::UnknownId(r.to_string()))?;
            Ok(Candidate::new(q, r, -squared_l2(qv, rv)))
        })
        .collect::<Result<Vec<_>>>()?;
    CandidateList::new(triples)
}

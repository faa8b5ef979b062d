//! Normalization against a background (training) descriptor set.
//!
//! Scores are corrected per query by the similarity of that query to its
//! nearest background descriptors. Descriptors can be corrected before
//! search, either by subtracting their background neighbourhood or by
//! rescaling them according to how far that neighbourhood is.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::knn::{knn_search, Neighbor};
use crate::model::{CandidateList, DescriptorSet};

pub const DEFAULT_BG_N: usize = 10;
pub const DEFAULT_BG_BETA: f64 = 1.0;
/// Exponent of the rescale factor `(d̄ / c)^exponent`. With `-1`, vectors far
/// from the background shrink and vectors inside background mass grow.
pub const DEFAULT_RESCALE_EXPONENT: f64 = -1.0;

#[derive(Debug, Clone)]
pub struct BackgroundIndex {
    train: DescriptorSet,
    n: usize,
    beta: f64,
    /// Per-rank weights over the `n` nearest background items, summing to 1.
    weights: Option<Vec<f64>>,
}

impl BackgroundIndex {
    pub fn new(train: DescriptorSet, n: usize, beta: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("background neighbour count must be positive".into()));
        }
        if n > train.len() {
            return Err(Error::InvalidArgument(format!(
                "background neighbour count {n} exceeds background size {}",
                train.len()
            )));
        }
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::InvalidArgument(format!("beta must be finite and >= 0, got {beta}")));
        }
        Ok(Self {
            train,
            n,
            beta,
            weights: None,
        })
    }

    /// Replaces the plain mean over the `n` neighbours by a weighted one.
    /// Weights are normalized to sum to 1.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n {
            return Err(Error::InvalidArgument(format!(
                "{} rank weights given for n = {}",
                weights.len(),
                self.n
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("rank weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("rank weights sum to zero".into()));
        }
        self.weights = Some(weights.iter().map(|w| w / total).collect());
        Ok(self)
    }

    pub fn train(&self) -> &DescriptorSet {
        &self.train
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    fn neighbors(&self, set: &DescriptorSet) -> Result<Vec<Vec<Neighbor>>> {
        if set.is_empty() {
            return Ok(Vec::new());
        }
        Ok(knn_search(set, &self.train, self.n)?.neighbors)
    }

    fn average(&self, values: impl Iterator<Item = f64>) -> f64 {
        match &self.weights {
            Some(w) => values.zip(w).map(|(v, w)| v * w).sum(),
            None => values.sum::<f64>() / self.n as f64,
        }
    }

    /// Background correction `b(q)` of every row: the (weighted) mean
    /// similarity `-‖q - t‖²` to its `n` nearest background items.
    pub fn corrections(&self, set: &DescriptorSet) -> Result<Vec<f64>> {
        Ok(self
            .neighbors(set)?
            .iter()
            .map(|list| self.average(list.iter().map(|nb| nb.score)))
            .collect())
    }

    /// Mean L2 distance `d̄` of every row to its `n` nearest background items.
    pub fn mean_distances(&self, set: &DescriptorSet) -> Result<Vec<f64>> {
        Ok(self
            .neighbors(set)?
            .iter()
            .map(|list| self.average(list.iter().map(|nb| nb.distance)))
            .collect())
    }
}

/// `s(q, r) - beta * b(q)` for every candidate.
pub fn normalize_scores(candidates: &CandidateList, queries: &DescriptorSet, bg: &BackgroundIndex) -> Result<CandidateList> {
    if bg.beta == 0.0 {
        return Ok(candidates.clone());
    }
    let ids = candidates.query_ids();
    for q in &ids {
        if queries.position(q).is_none() {
            return Err(Error::UnknownId(q.to_string()));
        }
    }
    let used = queries.subset(&ids)?;
    let b = bg.corrections(&used)?;
    let by_id: HashMap<&str, f64> = used.ids().iter().map(String::as_str).zip(b).collect();
    candidates.map_scores(|c| c.score - bg.beta * by_id[c.query_id.as_str()])
}

/// `unit(v - beta * m(v))`, with `m(v)` the (weighted) mean of the `n`
/// nearest background descriptors.
pub fn normalize_descriptor_subtract(set: &DescriptorSet, bg: &BackgroundIndex) -> Result<DescriptorSet> {
    let dim = set.dim();
    if dim != bg.train.dim() {
        return Err(Error::DimMismatch {
            expected: bg.train.dim(),
            found: dim,
        });
    }
    let neighbors = if bg.beta == 0.0 {
        vec![Vec::new(); set.len()]
    } else {
        bg.neighbors(set)?
    };
    let mut data = Vec::with_capacity(set.data().len());
    let mut degenerate = Vec::new();
    let mut shifted = vec![0f64; dim];
    for (row, list) in neighbors.iter().enumerate() {
        let v = set.row(row);
        let mut mean = vec![0f64; dim];
        for (rank, nb) in list.iter().enumerate() {
            let w = match &bg.weights {
                Some(w) => w[rank],
                None => 1.0 / bg.n as f64,
            };
            for (m, &t) in mean.iter_mut().zip(bg.train.row(nb.index)) {
                *m += w * t as f64;
            }
        }
        for ((s, &x), m) in shifted.iter_mut().zip(v).zip(&mean) {
            *s = x as f64 - bg.beta * m;
        }
        let norm = shifted.iter().map(|s| s * s).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            degenerate.push(set.id(row).to_string());
            data.extend(std::iter::repeat_n(0.0, dim));
            continue;
        }
        data.extend(shifted.iter().map(|s| (s / norm) as f32));
    }
    if !degenerate.is_empty() {
        return Err(Error::DegenerateVectors(degenerate));
    }
    set.with_data(dim, data)
}

/// Rescale factors `g(v) = (d̄(v) / c)^exponent`, `c` being the mean of `d̄`
/// over the set.
pub fn rescale_factors(set: &DescriptorSet, bg: &BackgroundIndex, exponent: f64) -> Result<Vec<f64>> {
    if set.dim() != bg.train.dim() {
        return Err(Error::DimMismatch {
            expected: bg.train.dim(),
            found: set.dim(),
        });
    }
    if !exponent.is_finite() {
        return Err(Error::InvalidArgument("rescale exponent must be finite".into()));
    }
    let d = bg.mean_distances(set)?;
    let zero: Vec<String> = d
        .iter()
        .enumerate()
        .filter(|(_, &x)| x == 0.0)
        .map(|(i, _)| set.id(i).to_string())
        .collect();
    if !zero.is_empty() {
        return Err(Error::ZeroBackgroundDistance(zero));
    }
    if d.is_empty() {
        return Ok(d);
    }
    let c = d.iter().sum::<f64>() / d.len() as f64;
    Ok(d.iter().map(|x| (x / c).powf(exponent)).collect())
}

/// Multiplies every row `v` by `g(v)` from [`rescale_factors`].
pub fn normalize_descriptor_rescale(set: &DescriptorSet, bg: &BackgroundIndex, exponent: f64) -> Result<DescriptorSet> {
    let g = rescale_factors(set, bg, exponent)?;
    let dim = set.dim();
    let data = set
        .data()
        .chunks_exact(dim)
        .zip(&g)
        .flat_map(|(row, &g)| row.iter().map(move |&x| (x as f64 * g) as f32))
        .collect();
    set.with_data(dim, data)
}

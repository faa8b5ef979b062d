//! Lookup from target AP to the perturbation scale of a matched query.
//!
//! A matched query is `unit(r + σ z)` with `z ~ N(0, I/d)` and references
//! uniform on the unit sphere. For unit vectors, L2 rank equals inner
//! product rank, and the inner product of the query with an unrelated
//! reference follows the sphere's marginal law. Given the cosine `c` to the
//! true reference, the number of closer references is therefore
//! `Binomial(N - 1, P(t > c))`, which yields `E[1/rank; rank <= k]` in
//! closed form. The distribution of `c` for a given `σ` is sampled.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::distribution::{Binomial, Discrete};
use statrs::function::beta::beta_reg;

const GRID: usize = 160;
const SIGMA_MIN: f64 = 1e-3;
const SIGMA_MAX: f64 = 50.0;
const SAMPLES: usize = 400;

/// `P(<u, v> > c)` for `v` uniform on the unit sphere in `dim` dimensions.
pub fn sphere_tail(c: f64, dim: usize) -> f64 {
    if c >= 1.0 {
        return 0.0;
    }
    if c <= -1.0 {
        return 1.0;
    }
    let half = 0.5 * beta_reg((dim as f64 - 1.0) / 2.0, 0.5, (1.0 - c * c).clamp(0.0, 1.0));
    if c >= 0.0 {
        half
    } else {
        1.0 - half
    }
}

/// `E[1/rank; rank <= k]` where `rank - 1 ~ Binomial(others, p)`.
pub fn truncated_inverse_rank(p: f64, others: u64, k: usize) -> f64 {
    if p <= 0.0 || others == 0 {
        return 1.0;
    }
    let b = Binomial::new(p.min(1.0), others).expect("valid binomial parameters");
    (0..k.min(others as usize + 1)).map(|j| b.pmf(j as u64) / (j + 1) as f64).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    sigmas: Vec<f64>,
    /// Non-increasing expected AP at each sigma.
    aps: Vec<f64>,
}

impl Calibration {
    /// Builds the table for `n_refs` references in `dim` dimensions.
    pub fn build<R: Rng>(dim: usize, n_refs: usize, k: usize, rng: &mut R) -> Self {
        let chi = ChiSquared::new(dim as f64 - 1.0).expect("positive degrees of freedom");
        let draws: Vec<(f64, f64)> = (0..SAMPLES)
            .map(|_| {
                let along: f64 = rng.sample(StandardNormal);
                let across: f64 = chi.sample(rng);
                (along / (dim as f64).sqrt(), across / dim as f64)
            })
            .collect();
        let ratio = (SIGMA_MAX / SIGMA_MIN).powf(1.0 / (GRID - 1) as f64);
        let sigmas: Vec<f64> = (0..GRID).map(|i| SIGMA_MIN * ratio.powi(i as i32)).collect();
        let mut aps: Vec<f64> = sigmas
            .iter()
            .map(|&s| {
                let total: f64 = draws
                    .iter()
                    .map(|&(a, w)| {
                        // z = a r + w with w ⊥ r, so ‖r + σz‖² = (1 + σa)² + σ²‖w‖².
                        let along = 1.0 + s * a;
                        let c = along / (along * along + s * s * w).sqrt();
                        truncated_inverse_rank(sphere_tail(c, dim), n_refs as u64 - 1, k)
                    })
                    .sum();
                total / SAMPLES as f64
            })
            .collect();
        for i in 1..aps.len() {
            aps[i] = aps[i].min(aps[i - 1]);
        }
        Self { sigmas, aps }
    }

    pub fn expected_ap(&self, sigma: f64) -> f64 {
        if sigma <= 0.0 {
            return 1.0;
        }
        let i = self.sigmas.partition_point(|&s| s < sigma);
        if i == 0 {
            let f = sigma / self.sigmas[0];
            return 1.0 + f * (self.aps[0] - 1.0);
        }
        if i == self.sigmas.len() {
            return self.aps[i - 1];
        }
        let f = (sigma - self.sigmas[i - 1]) / (self.sigmas[i] - self.sigmas[i - 1]);
        self.aps[i - 1] + f * (self.aps[i] - self.aps[i - 1])
    }

    /// Smallest tabulated perturbation scale whose expected AP reaches
    /// `target`, interpolated linearly. Targets at or above 1 give 0.
    pub fn sigma_for(&self, target: f64) -> f64 {
        if target >= 1.0 {
            return 0.0;
        }
        let last = self.aps.len() - 1;
        if target <= self.aps[last] {
            return self.sigmas[last];
        }
        if target >= self.aps[0] {
            let f = (1.0 - target) / (1.0 - self.aps[0]).max(f64::MIN_POSITIVE);
            return f.min(1.0) * self.sigmas[0];
        }
        let i = self.aps.partition_point(|&a| a > target);
        let (a0, a1) = (self.aps[i - 1], self.aps[i]);
        let (s0, s1) = (self.sigmas[i - 1], self.sigmas[i]);
        if a0 == a1 {
            return s0;
        }
        s0 + (a0 - target) / (a0 - a1) * (s1 - s0)
    }

    pub fn min_ap(&self) -> f64 {
        self.aps[self.aps.len() - 1]
    }
}

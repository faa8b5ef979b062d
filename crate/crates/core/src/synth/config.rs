use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Registry;

const DEFAULT_PENALTIES: &str = include_str!("../../data/default_penalties.csv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditorSpec {
    pub id: String,
    pub weight: f64,
    /// AP loss of every query made by this editor.
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackModelSpec {
    pub name: String,
    pub weight: f64,
    /// Added to the adversarial step's penalty for this model.
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_refs: usize,
    pub n_queries_matched: usize,
    pub n_distractors: usize,
    pub n_train: usize,
    pub dim: usize,
    pub seed: u64,
    pub face_fraction: f64,
    pub manual_fraction: f64,
    /// Probabilities of 1..=6 steps for automatic queries.
    pub step_count_weights: [f64; 6],
    pub planted_penalties: BTreeMap<String, f64>,
    /// Standard deviation of the Gaussian noise added to each target AP.
    pub noise_sigma: f64,
    /// Extra AP loss of face queries.
    pub face_penalty: f64,
    pub editors: Vec<EditorSpec>,
    pub attack_models: Vec<AttackModelSpec>,
    /// Relative swing of an intensity-bearing step's penalty between its
    /// mildest and its harshest intensity.
    pub intensity_slope: f64,
    /// Rank cutoff assumed when matching perturbation size to target AP.
    pub calibration_k: usize,
    /// When positive, each query gets a score offset drawn from
    /// `U[-range, range]`, carried by the last descriptor coordinate.
    pub query_offset_range: f64,
}

fn default_penalties() -> BTreeMap<String, f64> {
    DEFAULT_PENALTIES
        .lines()
        .skip(1)
        .filter_map(|l| l.split_once(','))
        .map(|(n, p)| (n.to_string(), p.parse().expect("bundled penalty table")))
        .collect()
}

fn default_editors() -> Vec<EditorSpec> {
    let volumes = [793.0, 708.0, 658.0, 456.0, 402.0, 324.0, 282.0, 208.0, 112.0, 66.0, 31.0];
    let penalties = [0.20, 0.10, 0.30, 0.05, 0.25, 0.15, 0.35, 0.12, 0.40, 0.08, 0.22];
    volumes
        .iter()
        .zip(penalties)
        .enumerate()
        .map(|(i, (&weight, penalty))| EditorSpec {
            id: format!("editor{:02}", i + 1),
            weight,
            penalty,
        })
        .collect()
}

fn default_attack_models() -> Vec<AttackModelSpec> {
    [
        ("dino", 172.0, 0.02),
        ("resnet18", 157.0, -0.03),
        ("resnet34", 161.0, -0.02),
        ("resnet50", 172.0, 0.0),
        ("sscd", 176.0, 0.05),
        ("vgg16", 176.0, -0.01),
        ("vgg19", 187.0, -0.01),
    ]
    .into_iter()
    .map(|(name, weight, offset)| AttackModelSpec {
        name: name.to_string(),
        weight,
        offset,
    })
    .collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_refs: 50_000,
            n_queries_matched: 500,
            n_distractors: 2_000,
            n_train: 50_000,
            dim: 256,
            seed: 0,
            face_fraction: 0.05,
            manual_fraction: 0.404,
            step_count_weights: [0.022, 0.12, 0.25, 0.393, 0.135, 0.08],
            planted_penalties: default_penalties(),
            noise_sigma: 0.05,
            face_penalty: 0.1,
            editors: default_editors(),
            attack_models: default_attack_models(),
            intensity_slope: 0.5,
            calibration_k: 10,
            query_offset_range: 0.0,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(msg()))
    }
}

fn weights_ok(w: impl IntoIterator<Item = f64>) -> bool {
    let w: Vec<f64> = w.into_iter().collect();
    w.iter().all(|x| x.is_finite() && *x >= 0.0) && w.iter().sum::<f64>() > 0.0
}

impl SynthConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Planted penalty of `name`, 0 when not configured.
    pub fn penalty(&self, name: &str) -> f64 {
        self.planted_penalties.get(name).copied().unwrap_or(0.0)
    }

    /// Dimension of the random part of each descriptor.
    pub fn base_dim(&self) -> usize {
        if self.query_offset_range > 0.0 {
            self.dim - 1
        } else {
            self.dim
        }
    }

    pub fn validate(&self, registry: &Registry) -> Result<()> {
        check(self.n_refs > 0, || "n_refs must be positive".into())?;
        check(self.n_queries_matched <= self.n_refs, || {
            format!("{} matched queries need as many references, have {}", self.n_queries_matched, self.n_refs)
        })?;
        check(self.dim >= 2, || format!("dim must be >= 2, got {}", self.dim))?;
        check(self.query_offset_range <= 0.0 || self.dim >= 3, || "query offsets need dim >= 3".into())?;
        for (name, f) in [("face_fraction", self.face_fraction), ("manual_fraction", self.manual_fraction)] {
            check((0.0..=1.0).contains(&f), || format!("{name} must lie in [0, 1], got {f}"))?;
        }
        let w = &self.step_count_weights;
        check(w.iter().all(|x| x.is_finite() && *x >= 0.0), || "step_count_weights must be >= 0".into())?;
        check((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9, || {
            format!("step_count_weights sum to {}, not 1", w.iter().sum::<f64>())
        })?;
        for (name, p) in &self.planted_penalties {
            check(registry.get(name).is_some(), || format!("unknown transformation {name:?}"))?;
            check(p.is_finite(), || format!("penalty of {name} is not finite"))?;
        }
        for (name, x) in [
            ("noise_sigma", self.noise_sigma),
            ("face_penalty", self.face_penalty),
            ("intensity_slope", self.intensity_slope),
            ("query_offset_range", self.query_offset_range),
        ] {
            check(x.is_finite(), || format!("{name} is not finite"))?;
        }
        check(self.noise_sigma >= 0.0, || "noise_sigma must be >= 0".into())?;
        check(self.query_offset_range >= 0.0, || "query_offset_range must be >= 0".into())?;
        check(self.calibration_k > 0, || "calibration_k must be positive".into())?;
        let manual = (self.manual_fraction * self.n_queries_matched as f64).round() as usize;
        check(manual == 0 || weights_ok(self.editors.iter().map(|e| e.weight)), || {
            "manual queries need at least one editor with positive weight".into()
        })?;
        check(self.editors.iter().all(|e| e.penalty.is_finite()), || "editor penalties must be finite".into())?;
        let has_attack = registry.in_class(crate::model::TransformClass::A).next().is_some();
        let attacked = self.step_count_weights[4] + self.step_count_weights[5] > 0.0 && has_attack;
        check(!attacked || weights_ok(self.attack_models.iter().map(|m| m.weight)), || {
            "adversarial steps need at least one attack model with positive weight".into()
        })?;
        check(self.attack_models.iter().all(|m| m.offset.is_finite()), || "attack offsets must be finite".into())?;
        Ok(())
    }
}

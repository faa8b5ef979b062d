//! Synthetic benchmark with planted ground truth, transformation metadata
//! and known per-transformation penalties.
//!
//! All randomness comes from ChaCha8 streams keyed by `(seed, stream)`, one
//! stream per generated item, so output bytes do not depend on scheduling.

mod calibrate;
mod config;
pub mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    save_descriptors, save_ground_truth, save_metadata, DescriptorSet, EditMode, GroundTruth, PenaltyModel,
    QueryMetadata, Registry, Source, TransformClass, TransformationStep, MAX_STEPS,
};
use crate::penalty::crop_transformations;

pub use calibrate::{sphere_tail, truncated_inverse_rank, Calibration};
pub use config::{AttackModelSpec, EditorSpec, SynthConfig};

pub const PRNG_ID: &str = "chacha8/rand_chacha-0.9/seed_from_u64+set_stream";

const STREAM_POPULATION: u64 = 1 << 56;
const STREAM_REFS: u64 = 2 << 56;
const STREAM_TRAIN: u64 = 3 << 56;
const STREAM_MATCHED: u64 = 4 << 56;
const STREAM_DISTRACTORS: u64 = 5 << 56;
const STREAM_CALIBRATION: u64 = 6 << 56;
const STREAM_OFFSETS: u64 = 7 << 56;

const INTENSITY_LO: f64 = 0.02;
const INTENSITY_HI: f64 = 0.98;
const MAX_RESAMPLES: usize = 10_000;

/// Deterministic generator for one item.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn id_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(6)
}

fn make_ids(prefix: &str, n: usize) -> Vec<String> {
    let w = id_width(n);
    (0..n).map(|i| format!("{prefix}{i:0w$}")).collect()
}

/// Counts proportional to `weights` summing to `n` (largest remainder,
/// ties to the earlier entry).
pub fn quotas(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || total <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

fn shuffled_labels<R: Rng>(labels: &[String], counts: &[usize], rng: &mut R) -> Vec<String> {
    let mut out: Vec<String> = labels
        .iter()
        .zip(counts)
        .flat_map(|(l, &c)| std::iter::repeat_n(l.clone(), c))
        .collect();
    out.shuffle(rng);
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplingLog {
    pub step_counts: BTreeMap<usize, usize>,
    pub transformation_counts: BTreeMap<String, usize>,
    pub resampled_sequences: usize,
    pub n_face: usize,
    pub n_manual: usize,
    pub editor_counts: BTreeMap<String, usize>,
    pub attack_model_counts: BTreeMap<String, usize>,
}

/// Matched-query metadata and target APs, before any descriptor exists.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    /// One record per matched query, in generation order.
    pub metadata: Vec<QueryMetadata>,
    /// Reference row of each matched query.
    pub ref_rows: Vec<usize>,
    /// Target AP per matched query (`1 - planted loss + noise`, unclamped).
    pub targets: Vec<f64>,
    pub distractor_ids: Vec<String>,
    pub log: SamplingLog,
}

/// Multiplier of an intensity-bearing step's penalty. Crops get harder as
/// less surface remains; overlays as more foreign pixels are added.
fn intensity_factor(step: &TransformationStep, slope: f64) -> f64 {
    let Some(x) = step.intensity else {
        return 1.0;
    };
    let u = ((x - INTENSITY_LO) / (INTENSITY_HI - INTENSITY_LO)).clamp(0.0, 1.0);
    let h = if crop_transformations().contains(&step.name) {
        1.0 - 2.0 * u
    } else {
        2.0 * u - 1.0
    };
    1.0 + slope * h
}

/// Planted AP loss of a step sequence, without attack-model offsets.
pub fn sequence_loss(steps: &[TransformationStep], config: &SynthConfig) -> f64 {
    steps
        .iter()
        .map(|s| config.penalty(&s.name) * intensity_factor(s, config.intensity_slope))
        .sum()
}

struct StepSampler<'a> {
    registry: &'a Registry,
    plain: Vec<TransformClass>,
    members: BTreeMap<TransformClass, Vec<usize>>,
    count_weights: rand::distr::weighted::WeightedIndex<f64>,
}

impl<'a> StepSampler<'a> {
    fn new(registry: &'a Registry, config: &SynthConfig) -> Result<Self> {
        let mut members: BTreeMap<TransformClass, Vec<usize>> = BTreeMap::new();
        for (i, t) in registry.entries().iter().enumerate() {
            members.entry(t.class).or_default().push(i);
        }
        let plain: Vec<TransformClass> = TransformClass::ALL
            .iter()
            .copied()
            .filter(|c| *c != TransformClass::A && members.contains_key(c))
            .collect();
        for (n, &w) in config.step_count_weights.iter().enumerate() {
            let n = n + 1;
            let possible = if n >= 5 {
                members.contains_key(&TransformClass::A) && n - 1 <= plain.len()
            } else {
                n <= plain.len()
            };
            if w > 0.0 && !possible {
                return Err(Error::InvalidConfig(format!("{n} steps cannot be built from the registry classes")));
            }
        }
        let count_weights = rand::distr::weighted::WeightedIndex::new(config.step_count_weights)
            .map_err(|e| Error::InvalidConfig(format!("step_count_weights: {e}")))?;
        Ok(Self {
            registry,
            plain,
            members,
            count_weights,
        })
    }

    /// One class per step, five or more steps always with an attack step.
    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<TransformationStep> {
        let n = rng.sample(&self.count_weights) + 1;
        debug_assert!(n <= MAX_STEPS);
        let mut classes: Vec<TransformClass> = if n >= 5 {
            let mut c: Vec<_> = index::sample(rng, self.plain.len(), n - 1).into_iter().map(|i| self.plain[i]).collect();
            c.push(TransformClass::A);
            c
        } else {
            index::sample(rng, self.plain.len(), n).into_iter().map(|i| self.plain[i]).collect()
        };
        classes.shuffle(rng);
        classes
            .into_iter()
            .map(|class| {
                let pool = &self.members[&class];
                let info = &self.registry.entries()[pool[rng.random_range(0..pool.len())]];
                let step = TransformationStep::new(info.name.clone(), class);
                if info.intensity {
                    let x: f64 = rng.random_range(INTENSITY_LO..INTENSITY_HI);
                    step.with_intensity((x * 1e4).round() / 1e4)
                } else {
                    step
                }
            })
            .collect()
    }
}

pub fn sample_population(config: &SynthConfig, registry: &Registry) -> Result<Population> {
    config.validate(registry)?;
    let mut rng = stream_rng(config.seed, STREAM_POPULATION);
    let n = config.n_queries_matched;
    let n_total = n + config.n_distractors;
    let ref_rows = index::sample(&mut rng, config.n_refs, n).into_vec();
    let mut order: Vec<usize> = (0..n_total).collect();
    order.shuffle(&mut rng);
    let w = id_width(n_total);
    let qid = |i: usize| format!("Q{:0w$}", order[i]);

    let n_face = (config.face_fraction * n as f64).round() as usize;
    let n_manual = (config.manual_fraction * n as f64).round() as usize;
    let face: BTreeSet<usize> = index::sample(&mut rng, n, n_face).into_iter().collect();
    let manual: BTreeSet<usize> = index::sample(&mut rng, n, n_manual).into_iter().collect();

    let editor_ids: Vec<String> = config.editors.iter().map(|e| e.id.clone()).collect();
    let editor_weights: Vec<f64> = config.editors.iter().map(|e| e.weight).collect();
    let mut editors = shuffled_labels(&editor_ids, &quotas(&editor_weights, n_manual), &mut rng).into_iter();

    let sampler = StepSampler::new(registry, config)?;
    let mut log = SamplingLog {
        n_face,
        n_manual,
        ..Default::default()
    };
    let mut metadata = Vec::with_capacity(n);
    let mut losses = Vec::with_capacity(n);
    for i in 0..n {
        let source = if face.contains(&i) { Source::Face } else { Source::Generic };
        let face_loss = if source == Source::Face { config.face_penalty } else { 0.0 };
        if manual.contains(&i) {
            let editor = editors.next().expect("one editor per manual query");
            let spec = config.editors.iter().find(|e| e.id == editor).expect("configured editor");
            *log.editor_counts.entry(editor.clone()).or_default() += 1;
            losses.push(spec.penalty + face_loss);
            metadata.push(QueryMetadata::manual(qid(i), source, editor));
            continue;
        }
        let mut attempts = 0;
        let (steps, loss) = loop {
            let steps = sampler.sample(&mut rng);
            let loss = sequence_loss(&steps, config) + face_loss;
            if (0.0..=1.0).contains(&loss) {
                break (steps, loss);
            }
            attempts += 1;
            if attempts >= MAX_RESAMPLES {
                return Err(Error::InvalidConfig(format!(
                    "no feasible transformation sequence after {MAX_RESAMPLES} draws"
                )));
            }
        };
        if attempts > 0 {
            log::debug!("query {}: resampled {attempts} infeasible sequence(s)", qid(i));
            log.resampled_sequences += attempts;
        }
        *log.step_counts.entry(steps.len()).or_default() += 1;
        for s in &steps {
            *log.transformation_counts.entry(s.name.clone()).or_default() += 1;
        }
        losses.push(loss);
        metadata.push(QueryMetadata::automatic(qid(i), source, steps));
    }
    if log.resampled_sequences > 0 {
        log::info!("resampled {} infeasible transformation sequence(s)", log.resampled_sequences);
    }

    let attacked: Vec<usize> = (0..n)
        .filter(|&i| metadata[i].steps.iter().any(|s| s.class == TransformClass::A))
        .collect();
    let names: Vec<String> = config.attack_models.iter().map(|m| m.name.clone()).collect();
    let weights: Vec<f64> = config.attack_models.iter().map(|m| m.weight).collect();
    let models = shuffled_labels(&names, &quotas(&weights, attacked.len()), &mut rng);
    for (&i, model) in attacked.iter().zip(models) {
        let spec = config.attack_models.iter().find(|m| m.name == model).expect("configured model");
        losses[i] += spec.offset;
        *log.attack_model_counts.entry(model.clone()).or_default() += 1;
        for s in metadata[i].steps.iter_mut().filter(|s| s.class == TransformClass::A) {
            s.attack_model = Some(model.clone());
        }
    }

    let targets = losses
        .iter()
        .map(|loss| {
            let z: f64 = rng.sample(StandardNormal);
            1.0 - loss + config.noise_sigma * z
        })
        .collect();
    Ok(Population {
        metadata,
        ref_rows,
        targets,
        distractor_ids: (n..n_total).map(qid).collect(),
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub generator: String,
    pub version: String,
    pub prng: String,
    pub seed: u64,
    pub config: SynthConfig,
    pub planted_penalties: BTreeMap<String, f64>,
}

impl SynthManifest {
    pub fn new(config: &SynthConfig) -> Self {
        Self {
            generator: "copydet synth".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            prng: PRNG_ID.to_string(),
            seed: config.seed,
            config: config.clone(),
            planted_penalties: config.planted_penalties.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub refs: DescriptorSet,
    pub queries: DescriptorSet,
    pub train: DescriptorSet,
    pub gt: GroundTruth,
    pub metadata: Vec<QueryMetadata>,
    /// Target AP per matched query id.
    pub targets: BTreeMap<String, f64>,
    pub planted: PenaltyModel,
    pub log: SamplingLog,
    /// Realized score offset per query id, when offsets are enabled.
    pub offsets: Option<BTreeMap<String, f64>>,
}

fn random_set(ids: Vec<String>, dim: usize, seed: u64, stream: u64) -> Result<DescriptorSet> {
    let data: Vec<f32> = (0..ids.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut rng = stream_rng(seed, stream + i as u64);
            unit_vector(&mut rng, dim).into_iter().map(|x| x as f32)
        })
        .collect();
    DescriptorSet::with_max_dim(ids, dim, data, usize::MAX)
}

fn perturbed<R: Rng>(r: &[f32], sigma: f64, rng: &mut R) -> Vec<f32> {
    if sigma == 0.0 {
        return r.to_vec();
    }
    let scale = sigma / (r.len() as f64).sqrt();
    let v: Vec<f64> = r
        .iter()
        .map(|&x| x as f64 + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

/// Appends one coordinate to every set. References and background get 0;
/// each query gets `sqrt(range - o)` with `o ~ U[-range, range]`, which
/// shifts all of that query's similarities by `o - range`.
pub fn inject_query_offsets(
    queries: &DescriptorSet,
    refs: &DescriptorSet,
    train: &DescriptorSet,
    range: f64,
    seed: u64,
) -> Result<(DescriptorSet, DescriptorSet, DescriptorSet, BTreeMap<String, f64>)> {
    if !(range.is_finite() && range > 0.0) {
        return Err(Error::InvalidArgument(format!("offset range must be positive, got {range}")));
    }
    let pad = |set: &DescriptorSet, extra: &dyn Fn(usize) -> f32| -> Result<DescriptorSet> {
        let dim = set.dim();
        let mut data = Vec::with_capacity(set.len() * (dim + 1));
        for (i, row) in set.data().chunks_exact(dim.max(1)).enumerate() {
            data.extend_from_slice(row);
            data.push(extra(i));
        }
        DescriptorSet::with_max_dim(set.ids().to_vec(), dim + 1, data, usize::MAX)
    };
    let lift: Vec<f32> = (0..queries.len())
        .map(|i| {
            let o: f64 = stream_rng(seed, STREAM_OFFSETS + i as u64).random_range(-range..=range);
            (range - o).sqrt() as f32
        })
        .collect();
    let offsets = queries
        .ids()
        .iter()
        .zip(&lift)
        .map(|(id, &a)| (id.clone(), range - (a as f64) * (a as f64)))
        .collect();
    Ok((
        pad(queries, &|i| lift[i])?,
        pad(refs, &|_| 0.0)?,
        pad(train, &|_| 0.0)?,
        offsets,
    ))
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    generate_with(config, Registry::builtin())
}

pub fn generate_with(config: &SynthConfig, registry: &Registry) -> Result<SynthDataset> {
    let pop = sample_population(config, registry)?;
    let dim = config.base_dim();
    let seed = config.seed;
    let refs = random_set(make_ids("R", config.n_refs), dim, seed, STREAM_REFS)?;
    let train = random_set(make_ids("T", config.n_train), dim, seed, STREAM_TRAIN)?;

    let needs_calibration = pop.targets.iter().any(|&t| t < 1.0);
    let calibration = needs_calibration.then(|| {
        let mut rng = stream_rng(seed, STREAM_CALIBRATION);
        Calibration::build(dim, config.n_refs, config.calibration_k, &mut rng)
    });
    let matched: Vec<Vec<f32>> = (0..pop.metadata.len())
        .into_par_iter()
        .map(|i| {
            let sigma = calibration.as_ref().map_or(0.0, |c| c.sigma_for(pop.targets[i].clamp(0.0, 1.0)));
            let mut rng = stream_rng(seed, STREAM_MATCHED + i as u64);
            perturbed(refs.row(pop.ref_rows[i]), sigma, &mut rng)
        })
        .collect();
    let distractors: Vec<Vec<f32>> = (0..pop.distractor_ids.len())
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(seed, STREAM_DISTRACTORS + j as u64);
            unit_vector(&mut rng, dim).into_iter().map(|x| x as f32).collect()
        })
        .collect();

    let mut rows: Vec<(&str, &[f32])> = pop
        .metadata
        .iter()
        .map(|m| m.query_id.as_str())
        .zip(matched.iter().map(Vec::as_slice))
        .chain(pop.distractor_ids.iter().map(String::as_str).zip(distractors.iter().map(Vec::as_slice)))
        .collect();
    rows.sort_by(|a, b| a.0.cmp(b.0));
    let queries = DescriptorSet::with_max_dim(
        rows.iter().map(|r| r.0.to_string()).collect(),
        dim,
        rows.iter().flat_map(|r| r.1.iter().copied()).collect(),
        usize::MAX,
    )?;

    let gt = GroundTruth::from_pairs(
        pop.metadata
            .iter()
            .zip(&pop.ref_rows)
            .map(|(m, &r)| (m.query_id.clone(), refs.id(r).to_string())),
    )?;
    let targets = pop
        .metadata
        .iter()
        .zip(&pop.targets)
        .map(|(m, &t)| (m.query_id.clone(), t))
        .collect();
    let planted = PenaltyModel {
        penalties: config.planted_penalties.clone(),
        residual_norm: 0.0,
        rank_deficient: false,
        regularization: 0.0,
    };

    let (queries, refs, train, offsets) = if config.query_offset_range > 0.0 {
        let (q, r, t, o) = inject_query_offsets(&queries, &refs, &train, config.query_offset_range, seed)?;
        (q, r, t, Some(o))
    } else {
        (queries, refs, train, None)
    };
    Ok(SynthDataset {
        config: config.clone(),
        refs,
        queries,
        train,
        gt,
        metadata: pop.metadata,
        targets,
        planted,
        log: pop.log,
        offsets,
    })
}

impl SynthDataset {
    pub fn manifest(&self) -> SynthManifest {
        SynthManifest::new(&self.config)
    }

    /// Writes `manifest.json` followed by the data files.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        let body = serde_json::to_string_pretty(&self.manifest())? + "\n";
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        self.save_data(dir)
    }

    /// Writes descriptors, ground truth, metadata, targets, planted
    /// penalties and the sampling log into `dir` (created if needed).
    pub fn save_data(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = |name: &str, body: String| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))
        };
        text("sampling_log.json", serde_json::to_string_pretty(&self.log)? + "\n")?;
        save_descriptors(&self.refs, dir.join("refs.dsc"))?;
        save_descriptors(&self.queries, dir.join("queries.dsc"))?;
        save_descriptors(&self.train, dir.join("train.dsc"))?;
        save_ground_truth(&self.gt, dir.join("gt.csv"))?;
        save_metadata(&self.metadata, dir.join("metadata.jsonl"))?;
        let mut body = String::from("query_id,target_ap\n");
        for (q, t) in &self.targets {
            body.push_str(&format!("{q},{t}\n"));
        }
        text("targets.csv", body)?;
        let path = dir.join("planted_penalties.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let r = (|| {
            writeln!(w, "transformation,penalty")?;
            for (name, p) in &self.planted.penalties {
                writeln!(w, "{name},{p}")?;
            }
            w.flush()
        })();
        r.map_err(|e| Error::io(&path, e))
    }
}

/// Edit mode helper for callers filtering populations.
pub fn automatic_only(metadata: &[QueryMetadata]) -> impl Iterator<Item = &QueryMetadata> {
    metadata.iter().filter(|m| m.edit_mode == EditMode::Automatic)
}

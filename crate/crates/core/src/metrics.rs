//! Ranking metrics: per-query AP, mAP over query subsets, and micro-average
//! precision over a globally ranked candidate list.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{global_order, Candidate, CandidateList, GroundTruth};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub rank: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroAp {
    pub value: f64,
    pub total_positives: usize,
    pub true_positives: usize,
    pub curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    pub value: f64,
    pub n: usize,
}

/// AP of one query with a single true match: `1 / rank` of the match after
/// ordering by score descending and reference id ascending, `0` when absent.
pub fn per_query_ap(query_id: &str, candidates: &[Candidate], gt: &GroundTruth) -> Result<f64> {
    let truth = gt
        .reference_for(query_id)
        .ok_or_else(|| Error::NotInGroundTruth(query_id.to_string()))?;
    let mut refs = HashSet::with_capacity(candidates.len());
    for c in candidates {
        if c.query_id != query_id {
            return Err(Error::MixedQueries(query_id.to_string(), c.query_id.clone()));
        }
        if !refs.insert(c.reference_id.as_str()) {
            return Err(Error::DuplicatePair {
                query: c.query_id.clone(),
                reference: c.reference_id.clone(),
            });
        }
    }
    let Some(hit) = candidates.iter().find(|c| c.reference_id == truth) else {
        return Ok(0.0);
    };
    let ahead = candidates
        .iter()
        .filter(|c| match c.score.total_cmp(&hit.score) {
            Ordering::Greater => true,
            Ordering::Equal => c.reference_id < hit.reference_id,
            Ordering::Less => false,
        })
        .count();
    Ok(1.0 / (ahead + 1) as f64)
}

/// Arithmetic mean, summed in iteration order.
pub fn mean_ap(aps: impl IntoIterator<Item = f64>) -> Result<MeanAp> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ap in aps {
        sum += ap;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptySubset);
    }
    Ok(MeanAp {
        value: sum / n as f64,
        n,
    })
}

/// Consumes candidates in [`global_order`] and accumulates both the micro-AP
/// and every ground-truth query's inverse rank in one pass.
pub struct RankedEvaluator<'a> {
    gt: &'a GroundTruth,
    total_positives: usize,
    rank: usize,
    true_positives: usize,
    precision_sum: f64,
    curve: Option<Vec<PrPoint>>,
    seen_per_query: HashMap<String, usize>,
    aps: BTreeMap<String, f64>,
    last: Option<Candidate>,
}

impl<'a> RankedEvaluator<'a> {
    pub fn new(gt: &'a GroundTruth, total_positives: usize, keep_curve: bool) -> Result<Self> {
        if total_positives == 0 {
            return Err(Error::InvalidArgument("total_positives must be at least 1".into()));
        }
        Ok(Self {
            gt,
            total_positives,
            rank: 0,
            true_positives: 0,
            precision_sum: 0.0,
            curve: keep_curve.then(Vec::new),
            seen_per_query: HashMap::new(),
            aps: gt.query_ids().map(|q| (q.to_string(), 0.0)).collect(),
            last: None,
        })
    }

    pub fn push(&mut self, c: &Candidate) -> Result<()> {
        if let Some(last) = &self.last {
            match global_order(last, c) {
                Ordering::Less => {}
                Ordering::Equal => {
                    return Err(Error::DuplicatePair {
                        query: c.query_id.clone(),
                        reference: c.reference_id.clone(),
                    })
                }
                Ordering::Greater => {
                    return Err(Error::InvalidArgument("candidates are not in global rank order".into()))
                }
            }
        }
        self.rank += 1;
        if let Some(truth) = self.gt.reference_for(&c.query_id) {
            let seen = self.seen_per_query.entry(c.query_id.clone()).or_insert(0);
            *seen += 1;
            if truth == c.reference_id {
                self.true_positives += 1;
                if self.true_positives > self.total_positives {
                    return Err(Error::TotalPositives {
                        total: self.total_positives,
                        found: self.true_positives,
                    });
                }
                self.precision_sum += self.true_positives as f64 / self.rank as f64;
                self.aps.insert(c.query_id.clone(), 1.0 / *seen as f64);
            }
        }
        if let Some(curve) = &mut self.curve {
            curve.push(PrPoint {
                rank: self.rank,
                precision: self.true_positives as f64 / self.rank as f64,
                recall: self.true_positives as f64 / self.total_positives as f64,
            });
        }
        self.last = Some(c.clone());
        Ok(())
    }

    /// Micro-AP and the per-query APs of all ground-truth queries.
    pub fn finish(self) -> (MicroAp, BTreeMap<String, f64>) {
        let micro = MicroAp {
            value: self.precision_sum / self.total_positives as f64,
            total_positives: self.total_positives,
            true_positives: self.true_positives,
            curve: self.curve.unwrap_or_default(),
        };
        (micro, self.aps)
    }
}

fn ranked(list: &CandidateList) -> Vec<&Candidate> {
    let mut order: Vec<&Candidate> = list.triples().iter().collect();
    if !list.is_sorted() {
        order.par_sort_unstable_by(|a, b| global_order(a, b));
    }
    order
}

fn evaluate(list: &CandidateList, gt: &GroundTruth, total_positives: usize, keep_curve: bool) -> Result<(MicroAp, BTreeMap<String, f64>)> {
    let mut eval = RankedEvaluator::new(gt, total_positives, keep_curve)?;
    for c in ranked(list) {
        eval.push(c)?;
    }
    Ok(eval.finish())
}

/// Micro-average precision: candidates of all queries ranked together,
/// precision summed at each true pair and divided by `total_positives`.
pub fn micro_ap(list: &CandidateList, gt: &GroundTruth, total_positives: usize) -> Result<MicroAp> {
    evaluate(list, gt, total_positives, true).map(|(m, _)| m)
}

/// Inverse-rank AP of every ground-truth query (0 when its match is missing).
pub fn per_query_aps(list: &CandidateList, gt: &GroundTruth) -> BTreeMap<String, f64> {
    let mut by_query: HashMap<&str, Vec<&Candidate>> = HashMap::new();
    for c in list.triples() {
        if gt.reference_for(&c.query_id).is_some() {
            by_query.entry(c.query_id.as_str()).or_default().push(c);
        }
    }
    gt.iter()
        .map(|(q, truth)| {
            let ap = by_query.get(q).map_or(0.0, |cands| {
                match cands.iter().find(|c| c.reference_id == truth) {
                    None => 0.0,
                    Some(hit) => {
                        let ahead = cands.iter().filter(|c| global_order(c, hit) == Ordering::Less).count();
                        1.0 / (ahead + 1) as f64
                    }
                }
            });
            (q.to_string(), ap)
        })
        .collect()
}

/// A named selection of matched queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subset {
    pub name: String,
    pub query_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    pub subset: String,
    pub n: usize,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapVsMicro {
    pub micro_ap: f64,
    pub map: MeanAp,
    pub rows: Vec<SubsetRow>,
    pub curve: Vec<PrPoint>,
}

/// mAP per subset next to the global micro-AP. A large gap between the two
/// indicates scores that are not comparable across queries.
pub fn map_vs_microap_report(list: &CandidateList, gt: &GroundTruth, subsets: &[Subset]) -> Result<MapVsMicro> {
    let (micro, aps) = evaluate(list, gt, gt.len(), true)?;
    let map = mean_ap(aps.values().copied())?;
    let rows = subsets
        .iter()
        .map(|s| {
            let values = s
                .query_ids
                .iter()
                .map(|q| aps.get(q).copied().ok_or_else(|| Error::NotInGroundTruth(q.clone())))
                .collect::<Result<Vec<_>>>()?;
            let m = mean_ap(values)?;
            Ok(SubsetRow {
                subset: s.name.clone(),
                n: m.n,
                map: m.value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MapVsMicro {
        micro_ap: micro.value,
        map,
        rows,
        curve: micro.curve,
    })
}

pub fn write_subset_csv<W: Write>(rows: &[SubsetRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "subset,n,mAP")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.subset, r.n, r.map)?;
    }
    w.flush()
}

pub fn write_pr_curve_csv<W: Write>(curve: &[PrPoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "rank,precision,recall")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.rank, p.precision, p.recall)?;
    }
    w.flush()
}

pub const APS_HEADER: &str = "query_id,ap";

pub fn write_aps_csv<W: Write>(aps: &BTreeMap<String, f64>, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{APS_HEADER}")?;
    for (q, ap) in aps {
        writeln!(w, "{q},{ap}")?;
    }
    w.flush()
}

pub fn read_aps_csv<R: Read>(reader: R, source_name: &str) -> Result<BTreeMap<String, f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::parse(source_name, line, e.to_string()))?;
        if line == 1 {
            if rec.iter().collect::<Vec<_>>() != ["query_id", "ap"] {
                return Err(Error::parse(source_name, 1, format!("expected header {APS_HEADER:?}")));
            }
            continue;
        }
        if rec.len() != 2 {
            return Err(Error::parse(source_name, line, format!("expected 2 fields, found {}", rec.len())));
        }
        let ap: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(source_name, line, format!("invalid AP {:?}", &rec[1])))?;
        if !(0.0..=1.0).contains(&ap) {
            return Err(Error::parse(source_name, line, format!("AP {ap} outside [0, 1]")));
        }
        if out.insert(rec[0].to_string(), ap).is_some() {
            return Err(Error::DuplicateId(rec[0].to_string()));
        }
    }
    Ok(out)
}

pub fn load_aps(path: impl AsRef<Path>) -> Result<BTreeMap<String, f64>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_aps_csv(std::io::BufReader::new(file), &path.display().to_string())
}

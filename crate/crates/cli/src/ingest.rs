//! Candidate files of any size: rows are evaluated in memory while they fit
//! the row budget, otherwise sorted in runs on disk and merged.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use copydet_core::metrics::{MicroAp, RankedEvaluator};
use copydet_core::model::{for_each_candidate, global_order, Candidate, CandidateList, GroundTruth};
use copydet_core::{Error, Result};
use rayon::prelude::*;

pub const DEFAULT_ROW_BUDGET: usize = 50_000_000;

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub micro: MicroAp,
    pub aps: BTreeMap<String, f64>,
    pub rows: usize,
    pub runs: usize,
}

fn pair_key(c: &Candidate) -> u128 {
    let half = |salt: u64| {
        let mut h = DefaultHasher::new();
        salt.hash(&mut h);
        c.query_id.hash(&mut h);
        c.reference_id.hash(&mut h);
        h.finish()
    };
    ((half(0x9e37_79b9_7f4a_7c15) as u128) << 64) | half(0xc2b2_ae3d_27d4_eb4f) as u128
}

fn write_run(path: &Path, rows: &[Candidate]) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for c in rows {
        for id in [&c.query_id, &c.reference_id] {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        w.write_all(&c.score.to_le_bytes())?;
    }
    w.flush()
}

struct RunReader {
    r: BufReader<fs::File>,
}

impl RunReader {
    fn next(&mut self) -> io::Result<Option<Candidate>> {
        let mut len = [0u8; 4];
        match self.r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e),
        }
        let mut ids = [String::new(), String::new()];
        for (i, id) in ids.iter_mut().enumerate() {
            if i > 0 {
                self.r.read_exact(&mut len)?;
            }
            let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
            self.r.read_exact(&mut buf)?;
            *id = String::from_utf8(buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        }
        let mut score = [0u8; 8];
        self.r.read_exact(&mut score)?;
        let [q, r] = ids;
        Ok(Some(Candidate::new(q, r, f64::from_le_bytes(score))))
    }
}

struct Head {
    c: Candidate,
    run: usize,
}

impl PartialEq for Head {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Head {}
impl PartialOrd for Head {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Head {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        global_order(&other.c, &self.c).then(other.run.cmp(&self.run))
    }
}

/// Evaluates a candidate CSV against `gt`. Above `row_budget` rows, sorted
/// runs are spilled under `spill_dir` (a fresh temporary directory by
/// default) and merged.
pub fn evaluate_candidates_file(
    path: &Path,
    gt: &GroundTruth,
    row_budget: usize,
    spill_dir: Option<&Path>,
) -> Result<Evaluation> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    evaluate_candidates(BufReader::new(file), &name, gt, row_budget, spill_dir)
}

pub fn evaluate_candidates<R: Read>(
    reader: R,
    source_name: &str,
    gt: &GroundTruth,
    row_budget: usize,
    spill_dir: Option<&Path>,
) -> Result<Evaluation> {
    if row_budget == 0 {
        return Err(Error::InvalidArgument("row budget must be positive".into()));
    }
    let total = gt.len();
    let mut buffer: Vec<Candidate> = Vec::new();
    let mut seen: HashSet<u128> = HashSet::new();
    let mut runs: Vec<PathBuf> = Vec::new();
    let mut tmp: Option<tempfile::TempDir> = None;
    let mut rows = 0usize;

    let mut spill = |buffer: &mut Vec<Candidate>, runs: &mut Vec<PathBuf>| -> Result<()> {
        if tmp.is_none() {
            let dir = match spill_dir {
                Some(d) => tempfile::Builder::new().prefix("copydet-runs").tempdir_in(d),
                None => tempfile::Builder::new().prefix("copydet-runs").tempdir(),
            };
            tmp = Some(dir.map_err(|e| Error::io(spill_dir.unwrap_or(Path::new(".")), e))?);
        }
        buffer.par_sort_unstable_by(global_order);
        let path = tmp.as_ref().unwrap().path().join(format!("run{:05}.bin", runs.len()));
        write_run(&path, buffer).map_err(|e| Error::io(&path, e))?;
        log::debug!("spilled run {} ({} rows)", runs.len(), buffer.len());
        runs.push(path);
        buffer.clear();
        Ok(())
    };

    for_each_candidate(reader, source_name, |c| {
        rows += 1;
        if !runs.is_empty() || buffer.len() == row_budget {
            if runs.is_empty() {
                for b in buffer.iter() {
                    if !seen.insert(pair_key(b)) {
                        return Err(Error::DuplicatePair {
                            query: b.query_id.clone(),
                            reference: b.reference_id.clone(),
                        });
                    }
                }
                spill(&mut buffer, &mut runs)?;
            }
            if !seen.insert(pair_key(&c)) {
                return Err(Error::DuplicatePair {
                    query: c.query_id,
                    reference: c.reference_id,
                });
            }
            buffer.push(c);
            if buffer.len() == row_budget {
                spill(&mut buffer, &mut runs)?;
            }
            return Ok(());
        }
        buffer.push(c);
        Ok(())
    })?;

    let mut eval = RankedEvaluator::new(gt, total, true)?;
    if runs.is_empty() {
        let list = CandidateList::new(buffer)?.sorted_global();
        for c in list.triples() {
            eval.push(c)?;
        }
    } else {
        if !buffer.is_empty() {
            spill(&mut buffer, &mut runs)?;
        }
        let mut readers = runs
            .iter()
            .map(|p| {
                fs::File::open(p)
                    .map(|f| RunReader { r: BufReader::new(f) })
                    .map_err(|e| Error::io(p, e))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut heap = BinaryHeap::new();
        for (run, r) in readers.iter_mut().enumerate() {
            if let Some(c) = r.next().map_err(|e| Error::io(&runs[run], e))? {
                heap.push(Head { c, run });
            }
        }
        while let Some(Head { c, run }) = heap.pop() {
            eval.push(&c)?;
            if let Some(next) = readers[run].next().map_err(|e| Error::io(&runs[run], e))? {
                heap.push(Head { c: next, run });
            }
        }
    }
    let (micro, aps) = eval.finish();
    Ok(Evaluation {
        micro,
        aps,
        rows,
        runs: runs.len(),
    })
}

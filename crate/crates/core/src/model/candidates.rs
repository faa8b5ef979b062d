use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A scored (query, reference) pair. Higher scores mean more similar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub query_id: String,
    pub reference_id: String,
    pub score: f64,
}

impl Candidate {
    pub fn new(query_id: impl Into<String>, reference_id: impl Into<String>, score: f64) -> Self {
        Self {
            query_id: query_id.into(),
            reference_id: reference_id.into(),
            score,
        }
    }
}

/// Global ranking order: score descending, then query id, then reference id.
pub fn global_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.query_id.cmp(&b.query_id))
        .then_with(|| a.reference_id.cmp(&b.reference_id))
}

/// Set of scored pairs, unique per (query, reference).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateList {
    triples: Vec<Candidate>,
    sorted: bool,
}

impl CandidateList {
    pub fn new(triples: Vec<Candidate>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(triples.len());
        for c in &triples {
            if !c.score.is_finite() {
                return Err(Error::NonFiniteScore {
                    query: c.query_id.clone(),
                    reference: c.reference_id.clone(),
                });
            }
            if !seen.insert((c.query_id.as_str(), c.reference_id.as_str())) {
                return Err(Error::DuplicatePair {
                    query: c.query_id.clone(),
                    reference: c.reference_id.clone(),
                });
            }
        }
        let sorted = triples.windows(2).all(|w| global_order(&w[0], &w[1]) != Ordering::Greater);
        Ok(Self { triples, sorted })
    }

    pub fn empty() -> Self {
        Self {
            triples: Vec::new(),
            sorted: true,
        }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Candidate] {
        &self.triples
    }

    pub fn into_triples(self) -> Vec<Candidate> {
        self.triples
    }

    /// Whether the triples are in [`global_order`].
    pub fn is_sorted(&self) -> bool {
        self.sorted
    }

    pub fn sort_global(&mut self) {
        if !self.sorted {
            use rayon::prelude::*;
            self.triples.par_sort_unstable_by(global_order);
            self.sorted = true;
        }
    }

    pub fn sorted_global(mut self) -> Self {
        self.sort_global();
        self
    }

    /// Rewrites every score with `f`; uniqueness is unaffected.
    pub fn map_scores(&self, mut f: impl FnMut(&Candidate) -> f64) -> Result<Self> {
        let triples = self
            .triples
            .iter()
            .map(|c| Candidate {
                score: f(c),
                ..c.clone()
            })
            .collect();
        Self::new(triples)
    }

    /// Distinct query ids, in first-appearance order.
    pub fn query_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.triples
            .iter()
            .map(|c| c.query_id.as_str())
            .filter(|q| seen.insert(*q))
            .collect()
    }
}

/// Formats like C's `%.9g`: nine significant digits, trailing zeros removed.
pub fn format_score(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        let mantissa = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp) as usize;
        trim_fraction(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const CANDIDATES_HEADER: &str = "query_id,reference_id,score";

pub fn write_candidates<W: Write>(list: &CandidateList, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CANDIDATES_HEADER}")?;
    for c in list.triples() {
        writeln!(w, "{},{},{}", c.query_id, c.reference_id, format_score(c.score))?;
    }
    w.flush()
}

pub fn save_candidates(list: &CandidateList, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_candidates(list, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Streams candidate rows to `f` without materializing the list. Rows are
/// checked for shape and finiteness only; uniqueness is the caller's job.
pub fn for_each_candidate<R: Read>(
    reader: R,
    source_name: &str,
    mut f: impl FnMut(Candidate) -> Result<()>,
) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut records = reader.records();
    match records.next() {
        None => return Err(Error::parse(source_name, 1, "missing header")),
        Some(Err(e)) => return Err(Error::parse(source_name, 1, e.to_string())),
        Some(Ok(header)) => {
            let fields: Vec<&str> = header.iter().map(str::trim).collect();
            if fields != ["query_id", "reference_id", "score"] {
                return Err(Error::parse(
                    source_name,
                    1,
                    format!("expected header `{CANDIDATES_HEADER}`"),
                ));
            }
        }
    }
    for (i, record) in records.enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::parse(source_name, line, e.to_string()))?;
        if record.len() != 3 {
            return Err(Error::parse(source_name, line, format!("expected 3 fields, found {}", record.len())));
        }
        let score: f64 = record[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(source_name, line, format!("bad score {:?}", &record[2])))?;
        if !score.is_finite() {
            return Err(Error::parse(source_name, line, "score is not finite"));
        }
        f(Candidate::new(record[0].trim(), record[1].trim(), score))?;
    }
    Ok(())
}

pub fn read_candidates<R: Read>(reader: R, source_name: &str) -> Result<CandidateList> {
    let mut triples = Vec::new();
    for_each_candidate(reader, source_name, |c| {
        triples.push(c);
        Ok(())
    })?;
    CandidateList::new(triples)
}

pub fn load_candidates(path: impl AsRef<Path>) -> Result<CandidateList> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_candidates(std::io::BufReader::new(file), &path.display().to_string())
}

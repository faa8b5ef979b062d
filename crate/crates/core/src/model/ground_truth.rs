use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Query id -> its single matching reference id. Distractor queries are absent.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    pairs: BTreeMap<String, String>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fails on a query that already has a match.
    pub fn insert(&mut self, query_id: impl Into<String>, reference_id: impl Into<String>) -> Result<()> {
        let query_id = query_id.into();
        if self.pairs.contains_key(&query_id) {
            return Err(Error::DuplicateId(query_id));
        }
        self.pairs.insert(query_id, reference_id.into());
        Ok(())
    }

    pub fn from_pairs<I, Q, R>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Q, R)>,
        Q: Into<String>,
        R: Into<String>,
    {
        let mut gt = Self::new();
        for (q, r) in pairs {
            gt.insert(q, r)?;
        }
        Ok(gt)
    }

    pub fn reference_for(&self, query_id: &str) -> Option<&str> {
        self.pairs.get(query_id).map(String::as_str)
    }

    pub fn is_match(&self, query_id: &str, reference_id: &str) -> bool {
        self.reference_for(query_id) == Some(reference_id)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs in query-id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.pairs.iter().map(|(q, r)| (q.as_str(), r.as_str()))
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.pairs.keys().map(String::as_str)
    }
}

pub fn read_ground_truth<R: Read>(reader: R, source_name: &str) -> Result<GroundTruth> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut gt = GroundTruth::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::parse(source_name, line, e.to_string()))?;
        if line == 1 {
            let fields: Vec<&str> = record.iter().map(str::trim).collect();
            if fields != ["query_id", "reference_id"] {
                return Err(Error::parse(source_name, 1, "expected header `query_id,reference_id`"));
            }
            continue;
        }
        if record.len() != 2 {
            return Err(Error::parse(source_name, line, format!("expected 2 fields, found {}", record.len())));
        }
        let (q, r) = (record[0].trim(), record[1].trim());
        if q.is_empty() || r.is_empty() {
            return Err(Error::parse(source_name, line, "empty id"));
        }
        gt.insert(q, r)
            .map_err(|_| Error::parse(source_name, line, format!("query {q:?} listed twice")))?;
    }
    Ok(gt)
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_ground_truth(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn write_ground_truth<W: Write>(gt: &GroundTruth, mut w: W) -> std::io::Result<()> {
    writeln!(w, "query_id,reference_id")?;
    for (q, r) in gt.iter() {
        writeln!(w, "{q},{r}")?;
    }
    w.flush()
}

pub fn save_ground_truth(gt: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_ground_truth(gt, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

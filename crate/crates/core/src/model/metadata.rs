use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::registry::{Registry, TransformClass};
use crate::error::{Error, RecordIssue, Result};

/// Longest automatic transformation sequence.
pub const MAX_STEPS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Face,
    Generic,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Face => "face",
            Source::Generic => "generic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditMode {
    Manual,
    Automatic,
}

impl EditMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EditMode::Manual => "manual",
            EditMode::Automatic => "automatic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformationStep {
    pub name: String,
    pub class: TransformClass,
    /// Normalized to [0, 1]: remaining surface for crops, foreign-pixel
    /// fraction for overlays.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_model: Option<String>,
}

impl TransformationStep {
    pub fn new(name: impl Into<String>, class: TransformClass) -> Self {
        Self {
            name: name.into(),
            class,
            intensity: None,
            attack_model: None,
        }
    }

    pub fn with_intensity(mut self, intensity: f64) -> Self {
        self.intensity = Some(intensity);
        self
    }

    pub fn with_attack_model(mut self, model: impl Into<String>) -> Self {
        self.attack_model = Some(model.into());
        self
    }
}

/// Maps a percentage (as plotted on intensity axes) to the stored [0, 1] scale.
pub fn intensity_from_percent(percent: f64) -> f64 {
    percent / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetadata {
    pub query_id: String,
    pub source: Source,
    pub edit_mode: EditMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub editor_id: Option<String>,
    #[serde(default)]
    pub steps: Vec<TransformationStep>,
}

impl QueryMetadata {
    pub fn automatic(query_id: impl Into<String>, source: Source, steps: Vec<TransformationStep>) -> Self {
        Self {
            query_id: query_id.into(),
            source,
            edit_mode: EditMode::Automatic,
            editor_id: None,
            steps,
        }
    }

    pub fn manual(query_id: impl Into<String>, source: Source, editor_id: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            source,
            edit_mode: EditMode::Manual,
            editor_id: Some(editor_id.into()),
            steps: Vec::new(),
        }
    }

    pub fn has_transformation(&self, name: &str) -> bool {
        self.steps.iter().any(|s| s.name == name)
    }

    pub fn step(&self, name: &str) -> Option<&TransformationStep> {
        self.steps.iter().find(|s| s.name == name)
    }

    pub fn attack_model(&self) -> Option<&str> {
        self.steps.iter().find_map(|s| s.attack_model.as_deref())
    }

    /// All invariant violations of this record, empty when valid.
    pub fn violations(&self, registry: &Registry) -> Vec<String> {
        let mut out = Vec::new();
        if self.query_id.is_empty() {
            out.push("empty query_id".to_string());
        }
        match self.edit_mode {
            EditMode::Manual => {
                if self.editor_id.is_none() {
                    out.push("manual query without editor_id".into());
                }
                if !self.steps.is_empty() {
                    out.push("manual query with transformation steps".into());
                }
            }
            EditMode::Automatic => {
                if self.editor_id.is_some() {
                    out.push("automatic query with editor_id".into());
                }
            }
        }
        if self.steps.len() > MAX_STEPS {
            out.push(format!("{} steps, at most {MAX_STEPS} allowed", self.steps.len()));
        }
        let mut classes = HashSet::new();
        for step in &self.steps {
            match registry.get(&step.name) {
                None => out.push(format!("unknown transformation {:?}", step.name)),
                Some(info) => {
                    if info.class != step.class {
                        out.push(format!("{} has class {}, registry says {}", step.name, step.class, info.class));
                    }
                    if step.intensity.is_some() && !info.intensity {
                        out.push(format!("{} does not carry an intensity", step.name));
                    }
                }
            }
            if let Some(v) = step.intensity {
                if !(0.0..=1.0).contains(&v) {
                    out.push(format!("{} intensity {v} outside [0, 1]", step.name));
                }
            }
            if step.attack_model.is_some() && step.class != TransformClass::A {
                out.push(format!("{} has an attack model but is not adversarial", step.name));
            }
            if !classes.insert(step.class) {
                out.push(format!("more than one step of class {}", step.class));
            }
        }
        if self.steps.len() == 5 && !classes.contains(&TransformClass::A) {
            out.push("5-step sequence without an adversarial step".into());
        }
        out
    }
}

/// Validates every record; duplicates of `query_id` are also reported.
pub fn validate_metadata(records: &[QueryMetadata], registry: &Registry) -> Result<()> {
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    for record in records {
        collect_issues(record, 0, registry, &mut seen, &mut issues);
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidMetadata(issues))
    }
}

fn collect_issues<'a>(
    record: &'a QueryMetadata,
    line: usize,
    registry: &Registry,
    seen: &mut HashSet<&'a str>,
    issues: &mut Vec<RecordIssue>,
) {
    for message in record.violations(registry) {
        issues.push(RecordIssue {
            line,
            query_id: record.query_id.clone(),
            message,
        });
    }
    if !seen.insert(record.query_id.as_str()) {
        issues.push(RecordIssue {
            line,
            query_id: record.query_id.clone(),
            message: "duplicate query_id".into(),
        });
    }
}

/// Parses JSON lines. Syntax errors abort at the offending line; invariant
/// violations are gathered across all records and reported together.
pub fn read_metadata<R: BufRead>(reader: R, source_name: &str, registry: &Registry) -> Result<Vec<QueryMetadata>> {
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::parse(source_name, line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QueryMetadata =
            serde_json::from_str(&line).map_err(|e| Error::parse(source_name, line_no, e.to_string()))?;
        records.push(record);
        lines.push(line_no);
    }
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    for (record, &line) in records.iter().zip(&lines) {
        collect_issues(record, line, registry, &mut seen, &mut issues);
    }
    if !issues.is_empty() {
        return Err(Error::InvalidMetadata(issues));
    }
    Ok(records)
}

pub fn load_metadata(path: impl AsRef<Path>) -> Result<Vec<QueryMetadata>> {
    load_metadata_with(path, Registry::builtin())
}

pub fn load_metadata_with(path: impl AsRef<Path>, registry: &Registry) -> Result<Vec<QueryMetadata>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_metadata(BufReader::new(file), &path.display().to_string(), registry)
}

pub fn write_metadata<W: Write>(records: &[QueryMetadata], mut w: W) -> Result<()> {
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n").map_err(|e| Error::io("<metadata>", e))?;
    }
    w.flush().map_err(|e| Error::io("<metadata>", e))
}

pub fn save_metadata(records: &[QueryMetadata], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_metadata(records, BufWriter::new(file))
}

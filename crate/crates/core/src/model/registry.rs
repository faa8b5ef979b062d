//! Transformation registry: name -> class and whether the step carries an
//! intensity. Shipped as `data/transformations.csv`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../../data/transformations.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransformClass {
    /// Geometric.
    G,
    /// Local pixel transformation.
    L,
    /// Source partially occluded.
    O,
    /// Photometric.
    P,
    /// Insertion onto another image.
    I,
    /// Adversarial attack.
    A,
}

impl TransformClass {
    pub const ALL: [TransformClass; 6] = [Self::G, Self::L, Self::O, Self::P, Self::I, Self::A];

    pub fn letter(self) -> &'static str {
        match self {
            Self::G => "G",
            Self::L => "L",
            Self::O => "O",
            Self::P => "P",
            Self::I => "I",
            Self::A => "A",
        }
    }
}

impl fmt::Display for TransformClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

impl FromStr for TransformClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "G" => Self::G,
            "L" => Self::L,
            "O" => Self::O,
            "P" => Self::P,
            "I" => Self::I,
            "A" => Self::A,
            other => return Err(Error::InvalidArgument(format!("unknown transformation class {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformInfo {
    pub name: String,
    pub class: TransformClass,
    pub intensity: bool,
}

#[derive(Debug, Clone)]
pub struct Registry {
    entries: Vec<TransformInfo>,
    by_name: HashMap<String, usize>,
}

impl Registry {
    /// The registry shipped with the crate.
    pub fn builtin() -> &'static Registry {
        static REGISTRY: OnceLock<Registry> = OnceLock::new();
        REGISTRY.get_or_init(|| Registry::from_csv_str(BUILTIN, "transformations.csv").expect("builtin registry is valid"))
    }

    pub fn from_csv_str(text: &str, source_name: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut entries = Vec::new();
        let mut by_name = HashMap::new();
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| Error::parse(source_name, line, e.to_string()))?;
            if record.len() != 3 {
                return Err(Error::parse(source_name, line, "expected name,class,intensity"));
            }
            let name = record[0].trim().to_string();
            let class = record[1]
                .parse()
                .map_err(|e: Error| Error::parse(source_name, line, e.to_string()))?;
            let intensity = match record[2].trim() {
                "true" => true,
                "false" => false,
                other => return Err(Error::parse(source_name, line, format!("bad flag {other:?}"))),
            };
            if by_name.insert(name.clone(), entries.len()).is_some() {
                return Err(Error::parse(source_name, line, format!("duplicate transformation {name:?}")));
            }
            entries.push(TransformInfo { name, class, intensity });
        }
        Ok(Self { entries, by_name })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text, &path.display().to_string())
    }

    pub fn get(&self, name: &str) -> Option<&TransformInfo> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    /// Position of `name` in registry order.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn entries(&self) -> &[TransformInfo] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn in_class(&self, class: TransformClass) -> impl Iterator<Item = &TransformInfo> + '_ {
        self.entries.iter().filter(move |e| e.class == class)
    }
}

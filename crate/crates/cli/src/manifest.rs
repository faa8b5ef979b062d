//! Run manifests: written before any result so that every output directory
//! records what produced it.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use copydet_core::{Error, Result};
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub role: String,
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub flags: Value,
    pub inputs: Vec<InputRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<Value>,
}

pub fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    let mut total = 0u64;
    loop {
        let n = match file.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(Error::io(path, e)),
        };
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((total, hex::encode(hasher.finalize())))
}

impl RunManifest {
    /// `flags` is the serialized argument struct. Entries named in `inputs`
    /// and the output directory are dropped from it and the inputs are
    /// recorded by file name and content hash instead, so that identical
    /// inputs in different locations give identical manifests.
    pub fn new<S: Serialize>(command: &str, args: &S, inputs: &[(&str, &Path)]) -> Result<Self> {
        let mut flags = match serde_json::to_value(args)? {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        flags.remove("out");
        for (role, _) in inputs {
            flags.remove(*role);
        }
        let inputs = inputs
            .iter()
            .map(|(role, path)| {
                let (bytes, sha256) = sha256_file(path)?;
                Ok(InputRecord {
                    role: role.to_string(),
                    file: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
                    bytes,
                    sha256,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tool: "copydet",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            flags: Value::Object(flags),
            inputs,
            extra: None,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        let body = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }
}

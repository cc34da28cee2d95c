//! Reproducibility manifests written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ctrldiff::{Error, Result};

use crate::config::{hex, Provenance, RunConfig};

pub const MANIFEST: &str = "run_manifest.json";

/// SHA-256 over `"blob {len}\0"` followed by the bytes, as git hashes blobs.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

/// Content hashes of a file, or of every file under a directory keyed by
/// `label/relative/path`. The manifest itself is skipped.
pub fn content_hashes(label: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if path.is_file() {
        out.insert(label.to_string(), blob_hash(&std::fs::read(path)?));
        return Ok(out);
    }
    if !path.is_dir() {
        return Err(Error::Input(format!("manifest: {} does not exist", path.display())));
    }
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(path).expect("walk stays under root");
            if rel == Path::new(MANIFEST) {
                continue;
            }
            let key: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.insert(format!("{label}/{}", key.join("/")), blob_hash(&std::fs::read(&p)?));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub provenance: Provenance,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], config: &RunConfig, provenance: &Provenance, seed: u64) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: args.to_vec(),
            config_hash: config.hash()?,
            seed,
            config: config.clone(),
            provenance: provenance.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.extend(content_hashes(label, path)?);
        Ok(())
    }

    /// Hashes everything under `dir` as outputs and writes the manifest there.
    pub fn finish(mut self, dir: &Path) -> Result<Self> {
        self.outputs = content_hashes("out", dir)?;
        std::fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&self)?)?;
        Ok(self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(dir.join(MANIFEST))?)?)
    }
}

//! Run manifests: what went in, what came out, and how.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct JudgeSummary {
    pub conversations: usize,
    pub units: usize,
    pub unit_errors: usize,
    pub failure_rate: f64,
    pub backend_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Input path -> sha256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Output file name -> sha256 of its contents.
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeSummary>,
    pub annotations: BTreeMap<String, serde_json::Value>,
    pub wall_time_s: f64,
}

impl Manifest {
    pub fn new<C: Serialize>(subcommand: &str, config: &C) -> Self {
        let config = serde_json::to_value(config).expect("config serializes");
        let config_hash = sha256_hex(config.to_string().as_bytes());
        Manifest {
            tool: TOOL.to_string(),
            version: VERSION.to_string(),
            subcommand: subcommand.to_string(),
            config,
            config_hash,
            seed: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            judge: None,
            annotations: BTreeMap::new(),
            wall_time_s: 0.0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs
            .insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> std::io::Result<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.outputs.insert(name, file_sha256(path)?);
        Ok(())
    }

    pub fn annotate(&mut self, key: &str, value: impl Serialize) {
        self.annotations
            .insert(key.to_string(), serde_json::to_value(value).expect("annotation serializes"));
    }

    /// Writes `manifest.<subcommand>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<std::path::PathBuf> {
        let path = dir.join(format!("manifest.{}.json", self.subcommand));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

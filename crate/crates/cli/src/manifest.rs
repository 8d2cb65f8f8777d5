//! Run manifests and input/output plumbing.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce a run. Embedded in every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub options: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub seed: Option<u64>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new<O: Serialize>(command: &str, options: &O, seed: Option<u64>) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            options: serde_json::to_value(options).expect("options serialize"),
            inputs: Vec::new(),
            seed,
            timings: BTreeMap::new(),
        }
    }

    /// Reads `path` (`-` for stdin), recording its digest.
    pub fn read_input(&mut self, path: &str) -> Result<Vec<u8>> {
        let t = Instant::now();
        let mut bytes = Vec::new();
        if path == "-" {
            std::io::stdin().read_to_end(&mut bytes).context("reading standard input")?;
        } else {
            bytes = std::fs::read(path).map_err(pgvi::Error::from).with_context(|| format!("reading {path}"))?;
        }
        self.inputs.push(InputDigest { path: path.into(), sha256: hex(&Sha256::digest(&bytes)) });
        *self.timings.entry("read".into()).or_default() += t.elapsed().as_secs_f64();
        Ok(bytes)
    }

    /// Runs `f`, adding its wall-clock time under `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *self.timings.entry(stage.into()).or_default() += t.elapsed().as_secs_f64();
        out
    }

    /// Single-line form for `#` comment headers.
    pub fn comment_line(&self) -> String {
        format!("manifest {}", serde_json::to_string(self).expect("manifest serializes"))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writer for `path`, or stdout when absent or `-`.
pub fn output(path: Option<&str>) -> Result<Box<dyn Write>> {
    match path {
        None | Some("-") => Ok(Box::new(std::io::BufWriter::new(std::io::stdout()))),
        Some(p) => {
            let f = std::fs::File::create(p).map_err(pgvi::Error::from).with_context(|| format!("creating {p}"))?;
            Ok(Box::new(std::io::BufWriter::new(f)))
        }
    }
}

pub fn write_json<T: Serialize>(path: Option<&str>, doc: &T) -> Result<()> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, doc)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use targetflow::chemmetrics::MetricsReport;
use targetflow::config::RunConfig;
use targetflow::molio::{write_smiles, GraphConfig, MolGraph};
use targetflow::{Error, Result};

/// Reproducibility record written next to every output.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub config_digest: String,
    pub config: String,
    pub checkpoint_sha256: Option<String>,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            threads: cfg.threads,
            config_digest: format!("{:016x}", cfg.digest()),
            config: cfg.to_text(),
            checkpoint_sha256: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.inputs
            .push((role.to_string(), path.display().to_string()));
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn checkpoint(&mut self, path: &Path) -> Result<()> {
        self.checkpoint_sha256 = Some(sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// `<file>.manifest.json` beside a single-file output.
pub(crate) fn sidecar(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hex = String::with_capacity(64);
    for b in Sha256::digest(&bytes).iter() {
        write!(hex, "{b:02x}").unwrap();
    }
    Ok(hex)
}

/// SMILES for any graph. A disconnected graph is written one component at
/// a time joined by `.`, which the parser rejects, so such a line reads
/// back as an invalid molecule.
pub fn graph_smiles(g: &MolGraph, cfg: &GraphConfig) -> Result<String> {
    let comps = g.components();
    if comps.len() <= 1 {
        return write_smiles(g, cfg);
    }
    let parts = comps
        .iter()
        .map(|c| {
            let mut part = g.clone();
            part.retain_slots(c);
            write_smiles(&part, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.join("."))
}

/// Two-column CSV `metric_name,value` with one nearest-neighbor similarity
/// (percent) per valid molecule, in report order. Values are written with
/// 15 decimals.
pub fn emit_density_data(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut out = String::from("metric_name,value\n");
    for v in report.rows.iter().filter_map(|r| r.nn_tanimoto) {
        writeln!(out, "nn_tanimoto,{:.15}", 100.0 * v).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

//! Validity, fingerprints, canonical hashing and the generative metric
//! suite.

mod canonical;
mod fingerprint;

pub use canonical::canonical_hash;
pub use fingerprint::{circular_fingerprint, tanimoto, Fingerprint, DEFAULT_RADIUS, DEFAULT_WIDTH};

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molio::{MolGraph, Vocab};

/// Maximum bond-order sum per vocabulary index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValenceTable {
    max: Vec<u32>,
}

impl ValenceTable {
    pub fn from_vocab(vocab: &Vocab) -> Self {
        Self {
            max: vocab
                .elements()
                .iter()
                .map(|e| e.max_valence() as u32)
                .collect(),
        }
    }

    pub fn max_valence(&self, kind: usize) -> u32 {
        self.max[kind]
    }

    /// Bond-order sum minus the allowed maximum, when positive.
    pub fn excess(&self, g: &MolGraph, i: usize) -> u32 {
        match g.atom(i) {
            Some(kind) => g.valence_sum(i).saturating_sub(self.max[kind]),
            None => 0,
        }
    }
}

impl Default for ValenceTable {
    fn default() -> Self {
        Self::from_vocab(&Vocab::default())
    }
}

/// Connected, non-empty, and no atom over its maximum valence.
pub fn check_valence(g: &MolGraph, table: &ValenceTable) -> bool {
    g.is_connected() && g.occupied().all(|i| table.excess(g, i) == 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerprintParams {
    pub radius: usize,
    pub width: usize,
}

impl Default for FingerprintParams {
    fn default() -> Self {
        Self {
            radius: DEFAULT_RADIUS,
            width: DEFAULT_WIDTH,
        }
    }
}

/// Per-molecule detail. `unique` marks the first occurrence of a valid
/// structure; `novel` and `nn_tanimoto` are only set for valid molecules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleculeRow {
    pub index: usize,
    pub valid: bool,
    pub unique: bool,
    pub novel: Option<bool>,
    pub nn_tanimoto: Option<f64>,
}

/// Metric percentages in `[0, 100]`. Uniqueness, novelty and similarity are
/// computed over valid molecules only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub generated: usize,
    pub valid: usize,
    pub validity: f64,
    pub uniqueness: f64,
    pub novelty: f64,
    pub nn_tanimoto: f64,
    pub rows: Vec<MoleculeRow>,
}

fn percent(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

pub fn evaluate(
    generated: &[MolGraph],
    train: &[MolGraph],
    table: &ValenceTable,
    fp: FingerprintParams,
) -> Result<MetricsReport> {
    if train.is_empty() {
        return Err(Error::EmptyTrain);
    }
    let train_hashes: HashSet<u64> = train.iter().map(canonical_hash).collect();
    let train_fps: Vec<Fingerprint> = train
        .iter()
        .map(|g| circular_fingerprint(g, fp.radius, fp.width))
        .collect();

    let mut seen = HashSet::new();
    let mut rows = Vec::with_capacity(generated.len());
    let (mut valid, mut novel, mut sim_sum) = (0, 0, 0.0);
    for (index, g) in generated.iter().enumerate() {
        if !check_valence(g, table) {
            rows.push(MoleculeRow {
                index,
                valid: false,
                unique: false,
                novel: None,
                nn_tanimoto: None,
            });
            continue;
        }
        valid += 1;
        let h = canonical_hash(g);
        let is_novel = !train_hashes.contains(&h);
        novel += is_novel as usize;
        let f = circular_fingerprint(g, fp.radius, fp.width);
        let mut best: f64 = 0.0;
        for t in &train_fps {
            best = best.max(tanimoto(&f, t)?);
        }
        sim_sum += best;
        rows.push(MoleculeRow {
            index,
            valid: true,
            unique: seen.insert(h),
            novel: Some(is_novel),
            nn_tanimoto: Some(best),
        });
    }
    Ok(MetricsReport {
        generated: generated.len(),
        valid,
        validity: percent(valid, generated.len()),
        uniqueness: percent(seen.len(), valid),
        novelty: percent(novel, valid),
        nn_tanimoto: if valid == 0 {
            0.0
        } else {
            100.0 * sim_sum / valid as f64
        },
        rows,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per molecule: `index,valid,unique,novel,nn_tanimoto`, with
    /// empty cells where a value is undefined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,valid,unique,novel,nn_tanimoto\n");
        for r in &self.rows {
            let novel = r.novel.map_or(String::new(), |v| v.to_string());
            let sim = r.nn_tanimoto.map_or(String::new(), |v| format!("{v:.15}"));
            writeln!(
                out,
                "{},{},{},{},{}",
                r.index, r.valid, r.unique, novel, sim
            )
            .unwrap();
        }
        out
    }
}

//! Drug-target pair datasets stored as three-column TSV.

use std::collections::HashMap;
use std::path::Path;

use super::graph::MolGraph;
use super::smiles::parse_smiles;
use super::GraphConfig;
use crate::error::{Error, Result};
use crate::hashing::fnv1a64;
use crate::targetenc::validate_sequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    /// 8/1/1 assignment from a hash of the target sequence.
    pub fn for_sequence(seq: &str) -> Split {
        match fnv1a64(seq.as_bytes()) % 10 {
            0..=7 => Split::Train,
            8 => Split::Valid,
            _ => Split::Test,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub target_id: String,
    pub sequence: String,
    pub smiles: String,
    pub graph: MolGraph,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairDataset {
    pub records: Vec<PairRecord>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&PairRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Distinct `(target_id, sequence)` pairs in first-seen order.
    pub fn targets<'a>(&'a self, records: &[&'a PairRecord]) -> Vec<(&'a str, &'a str)> {
        let mut seen = Vec::new();
        for r in records {
            if !seen.iter().any(|(id, _): &(&str, &str)| *id == r.target_id) {
                seen.push((r.target_id.as_str(), r.sequence.as_str()));
            }
        }
        seen
    }
}

/// Parses dataset text. Blank lines and lines starting with `#` are skipped.
pub fn parse_pairs(text: &str, cfg: &GraphConfig) -> Result<PairDataset> {
    let mut records = Vec::new();
    let mut seq_of: HashMap<String, String> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Format {
                line: line_no,
                msg: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let (target_id, sequence, smiles) = (cols[0].trim(), cols[1].trim(), cols[2].trim());
        if target_id.is_empty() {
            return Err(Error::Format {
                line: line_no,
                msg: "empty target id".into(),
            });
        }
        validate_sequence(sequence).map_err(|e| Error::Format {
            line: line_no,
            msg: e.to_string(),
        })?;
        match seq_of.get(target_id) {
            Some(prev) if prev != sequence => {
                return Err(Error::Format {
                    line: line_no,
                    msg: format!("target {target_id} appears with two different sequences"),
                })
            }
            Some(_) => {}
            None => {
                seq_of.insert(target_id.to_string(), sequence.to_string());
            }
        }
        let graph = parse_smiles(smiles, cfg).map_err(|e| Error::AtLine {
            line: line_no,
            source: Box::new(e),
        })?;
        records.push(PairRecord {
            target_id: target_id.to_string(),
            sequence: sequence.to_string(),
            smiles: smiles.to_string(),
            graph,
            split: Split::for_sequence(sequence),
        });
    }
    Ok(PairDataset { records })
}

pub fn load_pairs(path: impl AsRef<Path>, cfg: &GraphConfig) -> Result<PairDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SEQ_A: &str = "MKTAYIAKQR";
    const SEQ_B: &str = "GSHMLEDPVA";
    const SEQ_C: &str = "ACDEFGHIKL";

    #[test]
    fn three_distinct_targets() {
        let text = format!("t1\t{SEQ_A}\tCCO\nt2\t{SEQ_B}\tC=O\n# comment\nt3\t{SEQ_C}\tN\n");
        let ds = parse_pairs(&text, &GraphConfig::default()).unwrap();
        assert_eq!(ds.len(), 3);
        let again = parse_pairs(&text, &GraphConfig::default()).unwrap();
        let splits: Vec<_> = ds.records.iter().map(|r| r.split).collect();
        assert_eq!(
            splits,
            again.records.iter().map(|r| r.split).collect::<Vec<_>>()
        );
    }

    #[test]
    fn repeated_target_shares_split() {
        let mut text = String::new();
        for smi in ["C", "CC", "CCC", "CCO", "CN"] {
            text.push_str(&format!("t1\t{SEQ_A}\t{smi}\n"));
        }
        text.push_str(&format!("t2\t{SEQ_B}\tO\n"));
        let ds = parse_pairs(&text, &GraphConfig::default()).unwrap();
        let first = ds.records[0].split;
        assert!(ds.records[..5].iter().all(|r| r.split == first));
    }

    #[test]
    fn empty_file() {
        let ds = parse_pairs("", &GraphConfig::default()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn bad_column_count() {
        let err = parse_pairs("t1\tCCO\n", &GraphConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Format { line: 1, .. }));
    }

    #[test]
    fn smiles_error_carries_line() {
        let text = format!("t1\t{SEQ_A}\tCCO\nt2\t{SEQ_B}\tC(C\n");
        let err = parse_pairs(&text, &GraphConfig::default()).unwrap_err();
        match err {
            Error::AtLine { line, source } => {
                assert_eq!(line, 2);
                assert!(matches!(*source, Error::Syntax { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_pairs("/nonexistent/pairs.tsv", &GraphConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}

//! Protein sequence encoder: k-mer counts through a two-layer tanh network.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::flowcore::{join, random_matrix, Linear, Parameterized};

/// The 20 canonical amino acids in lexicographic order.
pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

/// Longer sequences are truncated before featurization.
pub const MAX_SEQ_LEN: usize = 2000;

/// Count features are unnormalized, so the first layer starts small to keep
/// tanh out of saturation.
const FIRST_LAYER_STD: f64 = 0.1;

fn residue_index(b: u8) -> Option<usize> {
    AMINO_ACIDS.iter().position(|&a| a == b)
}

pub fn validate_sequence(seq: &str) -> Result<()> {
    for (pos, ch) in seq.chars().enumerate() {
        if !ch.is_ascii() || residue_index(ch as u8).is_none() {
            return Err(Error::Alphabet { letter: ch, pos });
        }
    }
    Ok(())
}

fn check_k(k: usize) -> Result<()> {
    if !(1..=3).contains(&k) {
        return Err(Error::Range {
            name: "kmer",
            value: k as f64,
            expected: "1, 2 or 3",
        });
    }
    Ok(())
}

/// Sparse k-mer counts as `(index, count)` sorted by index. Index `i` is the
/// `i`-th k-mer in lexicographic order.
pub fn kmer_counts(seq: &str, k: usize) -> Result<Vec<(usize, f64)>> {
    check_k(k)?;
    validate_sequence(seq)?;
    let idx: Vec<usize> = seq
        .bytes()
        .map(|b| residue_index(b).expect("validated"))
        .collect();
    let mut counts = std::collections::BTreeMap::new();
    for w in idx.windows(k) {
        let code = w.iter().fold(0, |acc, &r| acc * 20 + r);
        *counts.entry(code).or_insert(0.0) += 1.0;
    }
    Ok(counts.into_iter().collect())
}

/// Dense k-mer count vector of length `20^k`.
pub fn kmer_featurize(seq: &str, k: usize) -> Result<Vec<f64>> {
    let sparse = kmer_counts(seq, k)?;
    let mut dense = vec![0.0; 20usize.pow(k as u32)];
    for (i, c) in sparse {
        dense[i] = c;
    }
    Ok(dense)
}

/// Target embedding `z` and its projection onto the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEmbedding {
    pub z: Vec<f64>,
    pub z_hat: Vec<f64>,
}

impl TargetEmbedding {
    /// A zero vector is left at zero.
    pub fn new(z: Vec<f64>) -> Self {
        let norm = norm(&z);
        let z_hat = if norm > 0.0 {
            z.iter().map(|v| v / norm).collect()
        } else {
            z.clone()
        };
        Self { z, z_hat }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.z)
    }

    /// Pulls a gradient on `z_hat` back to `z`:
    /// `(g − ẑ(ẑ·g)) / ‖z‖`.
    pub fn normalize_backward(&self, g_hat: &[f64]) -> Vec<f64> {
        let n = self.norm();
        if n == 0.0 {
            return vec![0.0; self.z.len()];
        }
        let dot: f64 = self.z_hat.iter().zip(g_hat).map(|(a, b)| a * b).sum();
        self.z_hat
            .iter()
            .zip(g_hat)
            .map(|(h, g)| (g - h * dot) / n)
            .collect()
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The encoder `k-mer counts → affine → tanh → affine → R^D`.
///
/// The first layer is applied sparsely: only the columns of k-mers present
/// in a sequence are read or updated.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEncoder {
    pub k: usize,
    pub max_len: usize,
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    features: Vec<(usize, f64)>,
    h: DVector<f64>,
}

impl TargetEncoder {
    pub fn new<R: Rng + ?Sized>(k: usize, hidden: usize, dim: usize, rng: &mut R) -> Result<Self> {
        check_k(k)?;
        let features = 20usize.pow(k as u32);
        Ok(Self {
            k,
            max_len: MAX_SEQ_LEN,
            w1: random_matrix(hidden, features, FIRST_LAYER_STD, rng),
            b1: DVector::zeros(hidden),
            out: Linear::random(hidden, dim, rng),
        })
    }

    /// Encoder with all weights and biases at zero.
    pub fn zeros(k: usize, hidden: usize, dim: usize) -> Result<Self> {
        check_k(k)?;
        Ok(Self {
            k,
            max_len: MAX_SEQ_LEN,
            w1: DMatrix::zeros(hidden, 20usize.pow(k as u32)),
            b1: DVector::zeros(hidden),
            out: Linear::zeros(hidden, dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.out.outputs()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn features(&self, seq: &str) -> Result<Vec<(usize, f64)>> {
        validate_sequence(seq)?;
        let seq = if seq.len() > self.max_len {
            log::warn!(
                "target sequence of {} residues truncated to {}",
                seq.len(),
                self.max_len
            );
            &seq[..self.max_len]
        } else {
            seq
        };
        kmer_counts(seq, self.k)
    }

    pub fn encode_cached(&self, seq: &str) -> Result<(TargetEmbedding, EncoderCache)> {
        let features = self.features(seq)?;
        let mut pre = self.b1.clone();
        for &(f, c) in &features {
            pre.axpy(c, &self.w1.column(f), 1.0);
        }
        let h = pre.map(f64::tanh);
        let z = self.out.apply(&h);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("target embedding".into()));
        }
        Ok((
            TargetEmbedding::new(z.as_slice().to_vec()),
            EncoderCache { features, h },
        ))
    }

    pub fn encode(&self, seq: &str) -> Result<TargetEmbedding> {
        self.encode_cached(seq).map(|(e, _)| e)
    }

    /// Accumulates the parameter gradient of a loss with gradient `g_z`
    /// on the unnormalized embedding.
    pub fn backward(&self, cache: &EncoderCache, g_z: &[f64], grad: &mut TargetEncoder) {
        let g_z = DVector::from_column_slice(g_z);
        let g_h = self.out.backward(&cache.h, &g_z, &mut grad.out);
        let g_pre = g_h.zip_map(&cache.h, |g, h| g * (1.0 - h * h));
        grad.b1 += &g_pre;
        for &(f, c) in &cache.features {
            grad.w1.column_mut(f).axpy(c, &g_pre, 1.0);
        }
    }
}

impl Parameterized for TargetEncoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "w1"), self.w1.as_slice());
        f(&join(prefix, "b1"), self.b1.as_slice());
        self.out.visit_params(&join(prefix, "out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "w1"), self.w1.as_mut_slice());
        f(&join(prefix, "b1"), self.b1.as_mut_slice());
        self.out.visit_params_mut(&join(prefix, "out"), f);
    }
}

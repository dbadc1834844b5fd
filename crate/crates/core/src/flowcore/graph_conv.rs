//! Relational graph convolution used as the atom-coupling conditioner.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{join, random_matrix, Parameterized};
use crate::error::{Error, Result};
use crate::molio::MolGraph;

/// Per-channel adjacency with rows divided by `1 + degree`, so every row of
/// the channel sum adds up to less than one.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub channels: Vec<DMatrix<f64>>,
}

impl NormalizedAdjacency {
    pub fn from_graph(g: &MolGraph) -> Self {
        let shape = g.shape();
        Self::from_tensor(shape.c, shape.n, &g.bond_tensor())
            .expect("graph tensor has matching shape")
    }

    /// From a channel-major `C×N×N` bond tensor (one-hot or weighted).
    pub fn from_tensor(c: usize, n: usize, bonds: &[f64]) -> Result<Self> {
        if bonds.len() != c * n * n {
            return Err(Error::Shape(format!(
                "bond tensor expects {} entries, got {}",
                c * n * n,
                bonds.len()
            )));
        }
        let deg: Vec<f64> = (0..n)
            .map(|i| {
                1.0 + (0..c)
                    .map(|ch| (0..n).map(|j| bonds[ch * n * n + i * n + j]).sum::<f64>())
                    .sum::<f64>()
            })
            .collect();
        let channels = (0..c)
            .map(|ch| DMatrix::from_fn(n, n, |i, j| bonds[ch * n * n + i * n + j] / deg[i]))
            .collect();
        Ok(Self { channels })
    }

    pub fn n(&self) -> usize {
        self.channels.first().map_or(0, |m| m.nrows())
    }

    /// Relabels nodes: node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n();
        Self {
            channels: self
                .channels
                .iter()
                .map(|m| DMatrix::from_fn(n, n, |i, j| m[(perm[i], perm[j])]))
                .collect(),
        }
    }
}

/// One message-passing layer: `Σ_c Â_c H W_c + H W_self + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphConv {
    pub weights: Vec<DMatrix<f64>>,
    pub self_weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl GraphConv {
    pub fn zeros(channels: usize, inputs: usize, outputs: usize) -> Self {
        Self {
            weights: vec![DMatrix::zeros(inputs, outputs); channels],
            self_weight: DMatrix::zeros(inputs, outputs),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn random<R: Rng + ?Sized>(
        channels: usize,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (inputs.max(1) as f64).sqrt();
        Self {
            weights: (0..channels)
                .map(|_| random_matrix(inputs, outputs, std, rng))
                .collect(),
            self_weight: random_matrix(inputs, outputs, std, rng),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.self_weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.self_weight.ncols()
    }

    /// Returns the pre-activation and the aggregated neighbor features
    /// `Â_c H` (kept for the backward pass).
    fn apply(
        &self,
        h: &DMatrix<f64>,
        adj: &NormalizedAdjacency,
    ) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let mut out = h * &self.self_weight;
        let mut agg = Vec::with_capacity(self.weights.len());
        for (a, w) in adj.channels.iter().zip(&self.weights) {
            let ah = a * h;
            out += &ah * w;
            agg.push(ah);
        }
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        (out, agg)
    }

    fn backward(
        &self,
        h: &DMatrix<f64>,
        agg: &[DMatrix<f64>],
        adj: &NormalizedAdjacency,
        g_out: &DMatrix<f64>,
        grad: &mut GraphConv,
    ) -> DMatrix<f64> {
        grad.self_weight += h.tr_mul(g_out);
        for row in g_out.row_iter() {
            grad.bias += row.transpose();
        }
        let mut g_h = g_out * self.self_weight.transpose();
        for ((a, w), (ah, gw)) in adj
            .channels
            .iter()
            .zip(&self.weights)
            .zip(agg.iter().zip(grad.weights.iter_mut()))
        {
            *gw += ah.tr_mul(g_out);
            g_h += a.tr_mul(&(g_out * w.transpose()));
        }
        g_h
    }
}

impl Parameterized for GraphConv {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (c, w) in self.weights.iter().enumerate() {
            f(&join(prefix, &format!("w{c}")), w.as_slice());
        }
        f(&join(prefix, "w_self"), self.self_weight.as_slice());
        f(&join(prefix, "bias"), self.bias.as_slice());
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (c, w) in self.weights.iter_mut().enumerate() {
            f(&join(prefix, &format!("w{c}")), w.as_mut_slice());
        }
        f(&join(prefix, "w_self"), self.self_weight.as_mut_slice());
        f(&join(prefix, "bias"), self.bias.as_mut_slice());
    }
}

/// Intermediate values of [`graph_conditioner`].
#[derive(Debug, Clone)]
pub struct ConditionerCache {
    h0: DMatrix<f64>,
    agg0: Vec<DMatrix<f64>>,
    h1: DMatrix<f64>,
    agg1: Vec<DMatrix<f64>>,
}

/// Two-layer relational GCN over the masked atom features `h_masked` (rows
/// hidden by the coupling mask must already be zero). Returns `N×K` scale
/// logits and shifts; the coupling reads only its transformed rows.
pub fn graph_conditioner(
    h_masked: &DMatrix<f64>,
    adj: &NormalizedAdjacency,
    first: &GraphConv,
    second: &GraphConv,
) -> Result<(DMatrix<f64>, DMatrix<f64>, ConditionerCache)> {
    let n = h_masked.nrows();
    let k = h_masked.ncols();
    if adj.n() != n
        || adj.channels.len() != first.weights.len()
        || adj.channels.len() != second.weights.len()
    {
        return Err(Error::Shape(format!(
            "conditioner expects {} bond channels over {n} nodes",
            first.weights.len()
        )));
    }
    if first.inputs() != k || second.inputs() != first.outputs() || second.outputs() != 2 * k {
        return Err(Error::Shape("conditioner layer widths do not chain".into()));
    }
    let (pre, agg0) = first.apply(h_masked, adj);
    let h1 = pre.map(f64::tanh);
    let (out, agg1) = second.apply(&h1, adj);
    let s = out.columns(0, k).into_owned();
    let t = out.columns(k, k).into_owned();
    Ok((
        s,
        t,
        ConditionerCache {
            h0: h_masked.clone(),
            agg0,
            h1,
            agg1,
        },
    ))
}

/// Backward of [`graph_conditioner`]; returns the gradient w.r.t. `h_masked`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn graph_conditioner_backward(
    cache: &ConditionerCache,
    adj: &NormalizedAdjacency,
    first: &GraphConv,
    second: &GraphConv,
    g_s: &DMatrix<f64>,
    g_t: &DMatrix<f64>,
    grad_first: &mut GraphConv,
    grad_second: &mut GraphConv,
) -> DMatrix<f64> {
    let n = g_s.nrows();
    let k = g_s.ncols();
    let mut g_out = DMatrix::zeros(n, 2 * k);
    g_out.columns_mut(0, k).copy_from(g_s);
    g_out.columns_mut(k, k).copy_from(g_t);
    let g_h1 = second.backward(&cache.h1, &cache.agg1, adj, &g_out, grad_second);
    let g_pre = g_h1.zip_map(&cache.h1, |g, h| g * (1.0 - h * h));
    first.backward(&cache.h0, &cache.agg0, adj, &g_pre, grad_first)
}

//! Invertible flow layers with exact log-determinants and hand-written
//! gradients.
//!
//! Every layer maps `x -> (y, logdet)` and back. Backward passes take the
//! upstream gradient of the output and a scalar weight on the layer's
//! log-determinant, accumulate parameter gradients into a zeroed copy of the
//! layer (see [`Parameterized::zeros_like`]) and return the input gradient.

mod actnorm;
mod atom_flow;
mod bond_flow;
mod coupling;
mod graph_conv;
mod mixer;

pub use actnorm::ActNorm;
pub use atom_flow::{AtomFlow, AtomTrace, GraphCoupling, GraphCouplingCache};
pub use bond_flow::{BondFlow, BondLayer, BondTrace, LayerCache};
pub use coupling::{AffineCoupling, CouplingCache};
pub use graph_conv::{graph_conditioner, ConditionerCache, GraphConv, NormalizedAdjacency};
pub use mixer::ChannelMixer;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// A layer that is a bijection on flat vectors.
pub trait Bijection {
    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)>;
    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)>;

    fn transform(&self, x: &[f64], direction: Direction) -> Result<(Vec<f64>, f64)> {
        match direction {
            Direction::Forward => self.forward(x),
            Direction::Inverse => self.inverse(x),
        }
    }
}

/// Named access to trainable tensors in a fixed order.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    /// Copy of `self` with every trainable entry set to zero; used as a
    /// gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Sized + Clone,
    {
        let mut g = self.clone();
        g.visit_params_mut("", &mut |_, p| p.fill(0.0));
        g
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// All trainable entries in visit order.
pub fn flatten_params<P: Parameterized + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.num_params());
    p.visit_params("", &mut |_, v| out.extend_from_slice(v));
    out
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params<P: Parameterized + ?Sized>(p: &mut P, flat: &[f64]) {
    let mut off = 0;
    p.visit_params_mut("", &mut |_, v| {
        v.copy_from_slice(&flat[off..off + v.len()]);
        off += v.len();
    });
    assert_eq!(off, flat.len(), "flat parameter length mismatch");
}

/// Adds `N(0, scale²)` noise to every trainable entry.
pub fn perturb_params<P: Parameterized + ?Sized, R: Rng + ?Sized>(
    p: &mut P,
    scale: f64,
    rng: &mut R,
) {
    p.visit_params_mut("", &mut |_, v| {
        for x in v.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *x += scale * n;
        }
    });
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn random_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let n: f64 = StandardNormal.sample(rng);
        std * n
    })
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    /// Gaussian weights with std `1/sqrt(inputs)`, zero bias.
    pub fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = 1.0 / (inputs.max(1) as f64).sqrt();
        Self {
            weight: random_matrix(outputs, inputs, std, rng),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.weight * x + &self.bias
    }

    /// Accumulates into `grad` and returns the input gradient.
    pub fn backward(&self, x: &DVector<f64>, gy: &DVector<f64>, grad: &mut Linear) -> DVector<f64> {
        grad.weight.ger(1.0, gy, x, 1.0);
        grad.bias += gy;
        self.weight.tr_mul(gy)
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), self.weight.as_slice());
        f(&join(prefix, "bias"), self.bias.as_slice());
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), self.weight.as_mut_slice());
        f(&join(prefix, "bias"), self.bias.as_mut_slice());
    }
}

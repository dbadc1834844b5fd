//! Alignment, hyperspherical uniformity and the one-to-many target space.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::targetenc::norm;

/// Default variance multiplier of the one-to-many space.
pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Default Gaussian-kernel temperature.
pub const DEFAULT_TEMPERATURE: f64 = 2.0;

const UNIT_TOL: f64 = 1e-6;

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Elementwise population standard deviation.
pub fn batch_std(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = embeddings.first().ok_or(Error::Empty)?;
    let d = first.len();
    if let Some(e) = embeddings.iter().find(|e| e.len() != d) {
        return Err(Error::Shape(format!(
            "embedding of length {} in a batch of length {d}",
            e.len()
        )));
    }
    let l = embeddings.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|i| embeddings.iter().map(|e| e[i]).sum::<f64>() / l)
        .collect();
    Ok((0..d)
        .map(|i| {
            (embeddings
                .iter()
                .map(|e| (e[i] - mean[i]).powi(2))
                .sum::<f64>()
                / l)
                .sqrt()
        })
        .collect())
}

/// Gaussian neighborhood `N(z_t, λσ²)` around a target embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceParams {
    pub lambda: f64,
    pub sigma: Vec<f64>,
}

impl SpaceParams {
    pub fn new(lambda: f64, sigma: Vec<f64>) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Range {
                name: "lambda",
                value: lambda,
                expected: ">= 0",
            });
        }
        if let Some(&s) = sigma.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(Error::Range {
                name: "sigma",
                value: s,
                expected: "finite and >= 0",
            });
        }
        Ok(Self { lambda, sigma })
    }
}

/// One draw `z_t + ε`, `ε_i ~ N(0, λσ_i²)`. With `λ = 0` no randomness is
/// consumed and `z_t` comes back unchanged.
pub fn sample_space<R: Rng + ?Sized>(z_t: &[f64], sp: &SpaceParams, rng: &mut R) -> Vec<f64> {
    if sp.lambda == 0.0 {
        return z_t.to_vec();
    }
    let scale = sp.lambda.sqrt();
    z_t.iter()
        .zip(&sp.sigma)
        .map(|(z, s)| {
            let n: f64 = StandardNormal.sample(rng);
            z + scale * s * n
        })
        .collect()
}

/// Batch mean of `‖sample − z_m‖₂`.
pub fn align_loss(samples: &[Vec<f64>], z_m: &[Vec<f64>]) -> Result<f64> {
    align_loss_grad(samples, z_m).map(|(l, _)| l)
}

/// Alignment loss and its gradient with respect to each `sample`. The
/// gradient with respect to `z_m` is the negation. A zero distance gets a
/// zero subgradient.
pub fn align_loss_grad(samples: &[Vec<f64>], z_m: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if samples.len() != z_m.len() {
        return Err(Error::Shape(format!(
            "{} samples vs {} latents",
            samples.len(),
            z_m.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::Empty);
    }
    let b = samples.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(samples.len());
    for (s, m) in samples.iter().zip(z_m) {
        if s.len() != m.len() {
            return Err(Error::Shape(format!(
                "sample of length {} vs latent of length {}",
                s.len(),
                m.len()
            )));
        }
        let dist = sq_dist(s, m).sqrt();
        loss += dist / b;
        grads.push(if dist > 0.0 {
            s.iter().zip(m).map(|(a, c)| (a - c) / (dist * b)).collect()
        } else {
            vec![0.0; s.len()]
        });
    }
    Ok((loss, grads))
}

fn check_unit(x: &[f64]) -> Result<()> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotNormalized { norm });
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Range {
            name: "temperature",
            value: t,
            expected: "> 0",
        });
    }
    Ok(())
}

/// `exp(−t‖x − y‖²)` for unit vectors.
pub fn gaussian_kernel(x: &[f64], y: &[f64], t: f64) -> Result<f64> {
    check_temperature(t)?;
    check_unit(x)?;
    check_unit(y)?;
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {}", x.len(), y.len())));
    }
    Ok((-t * sq_dist(x, y)).exp())
}

/// Log of the mean Gaussian potential over ordered pairs of the given
/// normalized embeddings, one per distinct target.
pub fn unif_loss(z_hat: &[Vec<f64>], t: f64) -> Result<f64> {
    unif_loss_grad(z_hat, t).map(|(l, _)| l)
}

/// Uniformity loss and its gradient with respect to each normalized
/// embedding. Evaluated with a log-sum-exp so tiny kernels do not underflow.
pub fn unif_loss_grad(z_hat: &[Vec<f64>], t: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    check_temperature(t)?;
    let m = z_hat.len();
    if m < 2 {
        return Err(Error::BatchTooSmall);
    }
    for x in z_hat {
        check_unit(x)?;
        if x.len() != z_hat[0].len() {
            return Err(Error::Shape(format!("{} vs {}", x.len(), z_hat[0].len())));
        }
    }
    // unordered pairs; each appears twice among ordered pairs
    let mut expo = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            expo.push(-t * sq_dist(&z_hat[i], &z_hat[j]));
        }
    }
    let top = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = expo.iter().map(|e| (e - top).exp()).collect();
    let sum: f64 = weights.iter().sum();
    let pairs = (m * (m - 1) / 2) as f64;
    let loss = top + (sum / pairs).ln();

    let d = z_hat[0].len();
    let mut grads = vec![vec![0.0; d]; m];
    let mut p = 0;
    for i in 0..m {
        for j in i + 1..m {
            // d/dx_i of exp(−t‖x_i − x_j‖²) = −2t(x_i − x_j)·k_ij
            let w = weights[p] / sum;
            p += 1;
            for c in 0..d {
                let g = -2.0 * t * w * (z_hat[i][c] - z_hat[j][c]);
                grads[i][c] += g;
                grads[j][c] -= g;
            }
        }
    }
    Ok((loss, grads))
}

/// Per-batch losses and diagnostics. `align` and `unif` are the raw term
/// values; `total` applies the weights and adds `logdet_penalty`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub align: f64,
    pub unif: f64,
    pub logdet_penalty: f64,
    pub total: f64,
    pub mean_norm: f64,
    pub min_pair_distance: f64,
}

/// Unweighted sum of the two objective terms.
pub fn total_loss(align: f64, unif: f64) -> Result<LossReport> {
    weighted_loss(align, unif, 1.0, 1.0)
}

/// `total = wa·align + wu·unif`, with the raw terms kept in the report.
pub fn weighted_loss(
    align: f64,
    unif: f64,
    align_weight: f64,
    unif_weight: f64,
) -> Result<LossReport> {
    if !align.is_finite() || !unif.is_finite() {
        return Err(Error::NonFinite(format!("align = {align}, unif = {unif}")));
    }
    Ok(LossReport {
        align,
        unif,
        total: align_weight * align + unif_weight * unif,
        ..Default::default()
    })
}

impl LossReport {
    /// Adds a (finite) log-determinant penalty to the total.
    pub fn with_penalty(mut self, penalty: f64) -> Result<Self> {
        if !penalty.is_finite() {
            return Err(Error::NonFinite(format!("logdet penalty = {penalty}")));
        }
        self.total += penalty - self.logdet_penalty;
        self.logdet_penalty = penalty;
        Ok(self)
    }

    /// Fills the embedding diagnostics from unnormalized embeddings.
    pub fn with_stats(mut self, z: &[Vec<f64>]) -> Self {
        if !z.is_empty() {
            self.mean_norm = z.iter().map(|v| norm(v)).sum::<f64>() / z.len() as f64;
        }
        let mut min = f64::INFINITY;
        for i in 0..z.len() {
            for j in i + 1..z.len() {
                min = min.min(sq_dist(&z[i], &z[j]).sqrt());
            }
        }
        self.min_pair_distance = if min.is_finite() { min } else { 0.0 };
        self
    }

    /// Mean of several reports, field by field.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport::default();
        for r in reports {
            out.align += r.align / n;
            out.unif += r.unif / n;
            out.logdet_penalty += r.logdet_penalty / n;
            out.total += r.total / n;
            out.mean_norm += r.mean_norm / n;
            out.min_pair_distance += r.min_pair_distance / n;
        }
        out
    }
}

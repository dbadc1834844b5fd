use super::{join, Bijection, Parameterized};
use crate::error::{Error, Result};

/// Per-channel affine normalization `y = scale ⊙ (x + bias)` on a
/// channel-major tensor of `channels × spatial` entries.
///
/// Scale and bias are set from the first data batch so that each channel of
/// that batch comes out with zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNorm {
    pub channels: usize,
    pub spatial: usize,
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
    pub initialized: bool,
}

impl ActNorm {
    pub fn new(channels: usize, spatial: usize) -> Self {
        Self {
            channels,
            spatial,
            scale: vec![1.0; channels],
            bias: vec![0.0; channels],
            initialized: false,
        }
    }

    /// Identity layer that counts as initialized.
    pub fn identity(channels: usize, spatial: usize) -> Self {
        Self {
            initialized: true,
            ..Self::new(channels, spatial)
        }
    }

    pub fn dim(&self) -> usize {
        self.channels * self.spatial
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if !self.initialized {
            return Err(Error::NotInitialized);
        }
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "actnorm expects {} entries, got {}",
                self.dim(),
                x.len()
            )));
        }
        if let Some(channel) = self.scale.iter().position(|&s| s == 0.0) {
            return Err(Error::ZeroScale { channel });
        }
        Ok(())
    }

    /// Data-dependent initialization from a batch (population statistics).
    /// A channel with zero variance keeps unit scale.
    pub fn initialize(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty);
        }
        if let Some(x) = batch.iter().find(|x| x.len() != self.dim()) {
            return Err(Error::Shape(format!(
                "actnorm expects {} entries, got {}",
                self.dim(),
                x.len()
            )));
        }
        let count = (batch.len() * self.spatial) as f64;
        for c in 0..self.channels {
            let range = c * self.spatial..(c + 1) * self.spatial;
            let mean = batch
                .iter()
                .map(|x| x[range.clone()].iter().sum::<f64>())
                .sum::<f64>()
                / count;
            let var = batch
                .iter()
                .map(|x| {
                    x[range.clone()]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / count;
            self.bias[c] = -mean;
            self.scale[c] = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        }
        self.initialized = true;
        Ok(())
    }

    /// Forward pass over a batch, initializing from it first if needed.
    pub fn forward_batch(&mut self, batch: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, f64)>> {
        if !self.initialized {
            self.initialize(batch)?;
        }
        batch.iter().map(|x| self.forward(x)).collect()
    }

    pub fn logdet(&self) -> f64 {
        self.spatial as f64 * self.scale.iter().map(|s| s.abs().ln()).sum::<f64>()
    }

    /// Returns the input gradient; `x` is the forward input.
    pub fn backward(&self, x: &[f64], gy: &[f64], g_logdet: f64, grad: &mut ActNorm) -> Vec<f64> {
        let mut gx = vec![0.0; x.len()];
        for c in 0..self.channels {
            let (s, b) = (self.scale[c], self.bias[c]);
            let mut gs = 0.0;
            let mut gb = 0.0;
            for p in c * self.spatial..(c + 1) * self.spatial {
                gx[p] = gy[p] * s;
                gs += gy[p] * (x[p] + b);
                gb += gy[p] * s;
            }
            grad.scale[c] += gs + g_logdet * self.spatial as f64 / s;
            grad.bias[c] += gb;
        }
        gx
    }
}

impl Bijection for ActNorm {
    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(x)?;
        let y = x
            .iter()
            .enumerate()
            .map(|(p, v)| {
                let c = p / self.spatial;
                self.scale[c] * (v + self.bias[c])
            })
            .collect();
        Ok((y, self.logdet()))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(y)?;
        let x = y
            .iter()
            .enumerate()
            .map(|(p, v)| {
                let c = p / self.spatial;
                v / self.scale[c] - self.bias[c]
            })
            .collect();
        Ok((x, -self.logdet()))
    }
}

impl Parameterized for ActNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "scale"), &self.scale);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "scale"), &mut self.scale);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowcore::testutil::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_params() {
        let a = ActNorm::identity(2, 3);
        let x = vec![1.0, -2.0, 3.0, 0.5, 0.25, -7.0];
        let (y, ld) = a.forward(&x).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn init_normalizes_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = ActNorm::new(2, 4);
        // channel 0 ~ mean 3 std 2, channel 1 arbitrary
        let batch: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                (0..8)
                    .map(|p| {
                        if p < 4 {
                            3.0 + 2.0 * (rng.random::<f64>() * 2.0 - 1.0) * 1.7
                        } else {
                            rng.random::<f64>() - 4.0
                        }
                    })
                    .collect()
            })
            .collect();
        let out = a.forward_batch(&batch).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = out
                .iter()
                .flat_map(|(y, _)| y[c * 4..(c + 1) * 4].to_vec())
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-10, "var {var}");
        }
    }

    #[test]
    fn round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = ActNorm::identity(3, 5);
        for c in 0..3 {
            a.scale[c] = rng.random_range(0.2..3.0) * if c == 1 { -1.0 } else { 1.0 };
            a.bias[c] = rng.random_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (y, ld) = a.forward(&x).unwrap();
        let (back, ild) = a.inverse(&y).unwrap();
        assert!(max_abs_diff(&x, &back) < 1e-12);
        assert_eq!(ld, -ild);

        assert!(matches!(
            ActNorm::new(3, 5).inverse(&y),
            Err(Error::NotInitialized)
        ));
        a.scale[2] = 0.0;
        assert!(matches!(
            a.forward(&x),
            Err(Error::ZeroScale { channel: 2 })
        ));
    }

    #[test]
    fn logdet_matches_jacobian() {
        let mut a = ActNorm::identity(2, 3);
        a.scale = vec![0.5, -3.0];
        a.bias = vec![0.1, 0.2];
        let x = vec![0.3; 6];
        let jac = numeric_jacobian(|v| a.forward(v).unwrap().0, &x, 1e-5);
        assert!(rel_err(log_abs_det(jac), a.forward(&x).unwrap().1) < 1e-8);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut a = ActNorm::identity(2, 3);
        a.scale = vec![1.3, -0.7];
        a.bias = vec![0.2, -0.4];
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |layer: &ActNorm, x: &[f64]| {
            let (y, ld) = layer.forward(x).unwrap();
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.3 * ld
        };
        let mut grad = a.zeros_like();
        let gx = a.backward(&x, &w, 0.3, &mut grad);
        let h = 1e-6;
        for c in 0..2 {
            let mut p = a.clone();
            p.scale[c] += h;
            let mut m = a.clone();
            m.scale[c] -= h;
            assert!(rel_err((loss(&p, &x) - loss(&m, &x)) / (2.0 * h), grad.scale[c]) < 1e-6);
            let mut p = a.clone();
            p.bias[c] += h;
            let mut m = a.clone();
            m.bias[c] -= h;
            assert!(rel_err((loss(&p, &x) - loss(&m, &x)) / (2.0 * h), grad.bias[c]) < 1e-6);
        }
        let num = numeric_jacobian(|v| vec![loss(&a, v)], &x, h);
        for i in 0..6 {
            assert!(rel_err(num[(0, i)], gx[i]) < 1e-6);
        }
    }
}

use nalgebra::DMatrix;
use rand::Rng;

use super::{join, random_matrix, Bijection, Parameterized};
use crate::error::{Error, Result};

const SINGULAR_TOL: f64 = 1e-12;

/// Invertible channel mixing: the same `C×C` matrix applied at every
/// spatial position (a 1×1 convolution).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMixer {
    pub spatial: usize,
    pub weight: DMatrix<f64>,
}

impl ChannelMixer {
    pub fn identity(channels: usize, spatial: usize) -> Self {
        Self {
            spatial,
            weight: DMatrix::identity(channels, channels),
        }
    }

    /// Random rotation (orthogonal, determinant +1), so the initial
    /// log-determinant is zero.
    pub fn random_rotation<R: Rng + ?Sized>(channels: usize, spatial: usize, rng: &mut R) -> Self {
        let g = random_matrix(channels, channels, 1.0, rng);
        let mut q = g.qr().q();
        if q.determinant() < 0.0 {
            q.column_mut(0).neg_mut();
        }
        Self { spatial, weight: q }
    }

    pub fn channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn dim(&self) -> usize {
        self.channels() * self.spatial
    }

    fn checked_det(&self) -> Result<f64> {
        let det = self.weight.determinant();
        if !(det.abs() >= SINGULAR_TOL) {
            return Err(Error::Singular { det });
        }
        Ok(det)
    }

    fn mix(&self, w: &DMatrix<f64>, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "mixer expects {} entries, got {}",
                self.dim(),
                x.len()
            )));
        }
        // channel-major C×S block times W on the left
        let xs = DMatrix::from_column_slice(self.spatial, self.channels(), x);
        let ys = xs * w.transpose();
        Ok(ys.as_slice().to_vec())
    }

    pub fn backward(
        &self,
        x: &[f64],
        gy: &[f64],
        g_logdet: f64,
        grad: &mut ChannelMixer,
    ) -> Result<Vec<f64>> {
        let c = self.channels();
        let xs = DMatrix::from_column_slice(self.spatial, c, x);
        let gys = DMatrix::from_column_slice(self.spatial, c, gy);
        // Y = X Wᵀ  ⇒  dW = dYᵀ X,  dX = dY W
        grad.weight += gys.tr_mul(&xs);
        if g_logdet != 0.0 {
            let inv = self
                .weight
                .clone()
                .try_inverse()
                .ok_or(Error::Singular { det: 0.0 })?;
            grad.weight += inv.transpose() * (g_logdet * self.spatial as f64);
        }
        Ok((gys * &self.weight).as_slice().to_vec())
    }
}

impl Bijection for ChannelMixer {
    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let det = self.checked_det()?;
        let y = self.mix(&self.weight, x)?;
        Ok((y, self.spatial as f64 * det.abs().ln()))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        let det = self.checked_det()?;
        let inv = self
            .weight
            .clone()
            .try_inverse()
            .ok_or(Error::Singular { det })?;
        let x = self.mix(&inv, y)?;
        Ok((x, -(self.spatial as f64) * det.abs().ln()))
    }
}

impl Parameterized for ChannelMixer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), self.weight.as_slice());
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), self.weight.as_mut_slice());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowcore::testutil::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_mixer() {
        let m = ChannelMixer::identity(3, 4);
        let x: Vec<f64> = (0..12).map(|v| v as f64 * 0.3).collect();
        let (y, ld) = m.forward(&x).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn rotation_has_zero_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in 1..6 {
            let m = ChannelMixer::random_rotation(c, 7, &mut rng);
            let (_, ld) = m.forward(&vec![0.1; c * 7]).unwrap();
            assert!(ld.abs() < 1e-9, "c={c} logdet {ld}");
        }
    }

    #[test]
    fn round_trip_random_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = ChannelMixer::random_rotation(3, 5, &mut rng);
        m.weight += random_matrix(3, 3, 0.4, &mut rng);
        let x: Vec<f64> = random_matrix(15, 1, 1.0, &mut rng).as_slice().to_vec();
        let (y, ld) = m.forward(&x).unwrap();
        let (back, ild) = m.inverse(&y).unwrap();
        assert!(max_abs_diff(&x, &back) < 1e-9);
        assert!((ld + ild).abs() < 1e-12);
        let jac = numeric_jacobian(|v| m.forward(v).unwrap().0, &x, 1e-5);
        assert!(rel_err(log_abs_det(jac), ld) < 1e-6);
    }

    #[test]
    fn singular_is_rejected() {
        let mut m = ChannelMixer::identity(2, 3);
        m.weight[(1, 1)] = 0.0;
        assert!(matches!(m.forward(&[0.0; 6]), Err(Error::Singular { .. })));
        assert!(matches!(m.inverse(&[0.0; 6]), Err(Error::Singular { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = ChannelMixer::random_rotation(3, 2, &mut rng);
        m.weight += random_matrix(3, 3, 0.3, &mut rng);
        let x: Vec<f64> = random_matrix(6, 1, 1.0, &mut rng).as_slice().to_vec();
        let w: Vec<f64> = random_matrix(6, 1, 1.0, &mut rng).as_slice().to_vec();
        let loss = |layer: &ChannelMixer, x: &[f64]| {
            let (y, ld) = layer.forward(x).unwrap();
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - 0.7 * ld
        };
        let mut grad = m.zeros_like();
        let gx = m.backward(&x, &w, -0.7, &mut grad).unwrap();
        let h = 1e-6;
        for idx in 0..9 {
            let mut p = m.clone();
            p.weight.as_mut_slice()[idx] += h;
            let mut q = m.clone();
            q.weight.as_mut_slice()[idx] -= h;
            let num = (loss(&p, &x) - loss(&q, &x)) / (2.0 * h);
            assert!(rel_err(num, grad.weight.as_slice()[idx]) < 1e-6);
        }
        let num = numeric_jacobian(|v| vec![loss(&m, v)], &x, h);
        for i in 0..6 {
            assert!(rel_err(num[(0, i)], gx[i]) < 1e-6);
        }
    }
}

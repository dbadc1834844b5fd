use nalgebra::DVector;
use rand::Rng;

use super::{join, log_sigmoid, sigmoid, Bijection, Linear, Parameterized};
use crate::error::{Error, Result};

/// Affine coupling with a sigmoid scale.
///
/// The visible coordinates pass through unchanged and feed a two-layer tanh
/// conditioner producing scale logits `s` and shifts `t` for the remaining
/// coordinates: `y_T = x_T ⊙ sigmoid(s) + t`, `logdet = Σ log sigmoid(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineCoupling {
    pub dim: usize,
    pub visible: Vec<usize>,
    pub transformed: Vec<usize>,
    pub hidden: Linear,
    pub out: Linear,
}

/// Forward state needed by [`AffineCoupling::backward`].
#[derive(Debug, Clone)]
pub struct CouplingCache {
    x: Vec<f64>,
    x_vis: DVector<f64>,
    h: DVector<f64>,
    s: Vec<f64>,
}

impl AffineCoupling {
    /// Coupling over an explicit visible/transformed partition. The output
    /// layer starts at zero, so a fresh layer halves the transformed part.
    pub fn with_mask<R: Rng + ?Sized>(mask: &[bool], hidden: usize, rng: &mut R) -> Result<Self> {
        let visible: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let transformed: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        if visible.is_empty() || transformed.is_empty() {
            return Err(Error::Shape(format!(
                "coupling needs 0 < d < D (d = {}, D = {})",
                visible.len(),
                mask.len()
            )));
        }
        Ok(Self {
            dim: mask.len(),
            hidden: Linear::random(visible.len(), hidden, rng),
            out: Linear::zeros(hidden, 2 * transformed.len()),
            visible,
            transformed,
        })
    }

    /// Classic split: the first `d` coordinates are visible.
    pub fn split<R: Rng + ?Sized>(
        d: usize,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mask: Vec<bool> = (0..dim).map(|i| i < d).collect();
        Self::with_mask(&mask, hidden, rng)
    }

    /// Scale logits and shifts from the visible coordinates.
    pub fn conditioner(&self, x_vis: &DVector<f64>) -> (DVector<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden.apply(x_vis).map(f64::tanh);
        let o = self.out.apply(&h);
        let m = self.transformed.len();
        let s = o.rows(0, m).iter().copied().collect();
        let t = o.rows(m, m).iter().copied().collect();
        (h, s, t)
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "coupling expects {} entries, got {}",
                self.dim,
                x.len()
            )));
        }
        if self.hidden.inputs() != self.visible.len()
            || self.out.outputs() != 2 * self.transformed.len()
        {
            return Err(Error::Shape(
                "conditioner does not match the coupling split".into(),
            ));
        }
        Ok(())
    }

    fn gather(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.visible.len(), self.visible.iter().map(|&i| x[i]))
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, f64, CouplingCache)> {
        self.check(x)?;
        let x_vis = self.gather(x);
        let (h, s, t) = self.conditioner(&x_vis);
        let mut y = x.to_vec();
        let mut logdet = 0.0;
        for (k, &i) in self.transformed.iter().enumerate() {
            y[i] = x[i] * sigmoid(s[k]) + t[k];
            logdet += log_sigmoid(s[k]);
        }
        Ok((
            y,
            logdet,
            CouplingCache {
                x: x.to_vec(),
                x_vis,
                h,
                s,
            },
        ))
    }

    /// Accumulates parameter gradients into `grad`; returns the input
    /// gradient.
    pub fn backward(
        &self,
        cache: &CouplingCache,
        gy: &[f64],
        g_logdet: f64,
        grad: &mut AffineCoupling,
    ) -> Vec<f64> {
        let m = self.transformed.len();
        let mut gx = gy.to_vec();
        let mut g_out = DVector::zeros(2 * m);
        for (k, &i) in self.transformed.iter().enumerate() {
            let sg = sigmoid(cache.s[k]);
            gx[i] = gy[i] * sg;
            // d sigmoid = sg(1-sg); d log sigmoid = 1-sg
            g_out[k] = gy[i] * cache.x[i] * sg * (1.0 - sg) + g_logdet * (1.0 - sg);
            g_out[m + k] = gy[i];
        }
        let g_h = self.out.backward(&cache.h, &g_out, &mut grad.out);
        let g_pre = g_h.zip_map(&cache.h, |g, h| g * (1.0 - h * h));
        let g_vis = self.hidden.backward(&cache.x_vis, &g_pre, &mut grad.hidden);
        for (k, &i) in self.visible.iter().enumerate() {
            gx[i] += g_vis[k];
        }
        gx
    }
}

impl Bijection for AffineCoupling {
    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.forward_cached(x).map(|(y, ld, _)| (y, ld))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(y)?;
        let (_, s, t) = self.conditioner(&self.gather(y));
        let mut x = y.to_vec();
        let mut logdet = 0.0;
        for (k, &i) in self.transformed.iter().enumerate() {
            x[i] = (y[i] - t[k]) / sigmoid(s[k]);
            logdet -= log_sigmoid(s[k]);
        }
        Ok((x, logdet))
    }
}

impl Parameterized for AffineCoupling {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.hidden.visit_params(&join(prefix, "hidden"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.hidden.visit_params_mut(&join(prefix, "hidden"), f);
        self.out.visit_params_mut(&join(prefix, "out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowcore::perturb_params;
    use crate::flowcore::testutil::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    #[test]
    fn zero_conditioner_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = AffineCoupling::split(3, 7, 5, &mut rng).unwrap();
        c.hidden = Linear::zeros(3, 5);
        let x = random_vec(7, &mut rng);
        let (y, ld) = c.forward(&x).unwrap();
        assert_eq!(&y[..3], &x[..3]);
        for i in 3..7 {
            assert_eq!(y[i], 0.5 * x[i]);
        }
        assert!((ld - 4.0 * 0.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = AffineCoupling::split(4, 8, 6, &mut rng).unwrap();
        perturb_params(&mut c, 0.8, &mut rng);
        let x = random_vec(8, &mut rng);
        let (y, ld) = c.forward(&x).unwrap();
        let (back, ild) = c.inverse(&y).unwrap();
        assert!(max_abs_diff(&x, &back) < 1e-9);
        assert!((ld + ild).abs() < 1e-12);
    }

    #[test]
    fn logdet_matches_numeric_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = AffineCoupling::split(3, 6, 5, &mut rng).unwrap();
        perturb_params(&mut c, 0.7, &mut rng);
        for _ in 0..5 {
            let x = random_vec(6, &mut rng);
            let jac = numeric_jacobian(|v| c.forward(v).unwrap().0, &x, 1e-5);
            let ld = c.forward(&x).unwrap().1;
            assert!(rel_err(log_abs_det(jac), ld) < 1e-4);
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            AffineCoupling::split(0, 4, 2, &mut rng),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            AffineCoupling::split(4, 4, 2, &mut rng),
            Err(Error::Shape(_))
        ));
        let c = AffineCoupling::split(2, 4, 2, &mut rng).unwrap();
        assert!(matches!(c.forward(&[0.0; 5]), Err(Error::Shape(_))));
    }

    #[test]
    fn logdet_gradient_is_one_minus_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = AffineCoupling::split(2, 5, 4, &mut rng).unwrap();
        perturb_params(&mut c, 0.5, &mut rng);
        let x = random_vec(5, &mut rng);
        let (_, _, cache) = c.forward_cached(&x).unwrap();
        // With only the logdet term, the output-bias gradient of the scale
        // half is exactly dlogdet/ds.
        let mut grad = c.zeros_like();
        c.backward(&cache, &[0.0; 5], 1.0, &mut grad);
        for k in 0..3 {
            let expected = 1.0 - sigmoid(cache.s[k]);
            assert!((grad.out.bias[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = AffineCoupling::split(4, 8, 6, &mut rng).unwrap();
        perturb_params(&mut c, 0.6, &mut rng);
        let x = random_vec(8, &mut rng);
        let w = random_vec(8, &mut rng);
        let loss = |layer: &AffineCoupling, x: &[f64]| {
            let (y, ld) = layer.forward(x).unwrap();
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.4 * ld
        };
        let (_, _, cache) = c.forward_cached(&x).unwrap();
        let mut grad = c.zeros_like();
        let gx = c.backward(&cache, &w, 0.4, &mut grad);

        let analytic = crate::flowcore::flatten_params(&grad);
        let base = crate::flowcore::flatten_params(&c);
        let h = 1e-4;
        for idx in 0..base.len() {
            let mut p = c.clone();
            let mut v = base.clone();
            v[idx] += h;
            crate::flowcore::unflatten_params(&mut p, &v);
            let fp = loss(&p, &x);
            v[idx] -= 2.0 * h;
            crate::flowcore::unflatten_params(&mut p, &v);
            let fm = loss(&p, &x);
            let num = (fp - fm) / (2.0 * h);
            if num.abs().max(analytic[idx].abs()) > 1e-6 {
                assert!(
                    rel_err(num, analytic[idx]) < 1e-3,
                    "param {idx}: {num} vs {}",
                    analytic[idx]
                );
            }
        }
        let num = numeric_jacobian(|v| vec![loss(&c, v)], &x, 1e-5);
        for i in 0..8 {
            assert!(rel_err(num[(0, i)], gx[i]) < 1e-6);
        }
    }
}

//! Graph-conditional flow over the atom-type matrix.

use nalgebra::DMatrix;
use rand::Rng;

use super::graph_conv::graph_conditioner_backward;
use super::{
    graph_conditioner, join, log_sigmoid, sigmoid, ConditionerCache, GraphConv,
    NormalizedAdjacency, Parameterized,
};
use crate::error::{Error, Result};

/// Row-masked affine coupling on a row-major `N×K` atom matrix whose
/// conditioner is a relational GCN over the (fixed) bond graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphCoupling {
    pub n: usize,
    pub k: usize,
    pub visible_rows: Vec<bool>,
    pub conv1: GraphConv,
    pub conv2: GraphConv,
}

#[derive(Debug, Clone)]
pub struct GraphCouplingCache {
    x: DMatrix<f64>,
    s: DMatrix<f64>,
    cond: ConditionerCache,
}

impl GraphCoupling {
    /// Row `i` is visible when `i + parity` is even. The output layer starts
    /// at zero.
    pub fn new<R: Rng + ?Sized>(
        n: usize,
        k: usize,
        channels: usize,
        hidden: usize,
        parity: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            n,
            k,
            visible_rows: (0..n).map(|i| (i + parity).is_multiple_of(2)).collect(),
            conv1: GraphConv::random(channels, k, hidden, rng),
            conv2: GraphConv::zeros(channels, hidden, 2 * k),
        }
    }

    fn to_matrix(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if x.len() != self.n * self.k {
            return Err(Error::Shape(format!(
                "atom coupling expects {} entries, got {}",
                self.n * self.k,
                x.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.n, self.k, x))
    }

    fn masked(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = x.clone();
        for (i, &vis) in self.visible_rows.iter().enumerate() {
            if !vis {
                h.row_mut(i).fill(0.0);
            }
        }
        h
    }

    pub fn forward_cached(
        &self,
        x: &[f64],
        adj: &NormalizedAdjacency,
    ) -> Result<(Vec<f64>, f64, GraphCouplingCache)> {
        let xm = self.to_matrix(x)?;
        let (s, t, cond) = graph_conditioner(&self.masked(&xm), adj, &self.conv1, &self.conv2)?;
        let mut y = xm.clone();
        let mut logdet = 0.0;
        for i in (0..self.n).filter(|&i| !self.visible_rows[i]) {
            for j in 0..self.k {
                y[(i, j)] = xm[(i, j)] * sigmoid(s[(i, j)]) + t[(i, j)];
                logdet += log_sigmoid(s[(i, j)]);
            }
        }
        Ok((row_major(&y), logdet, GraphCouplingCache { x: xm, s, cond }))
    }

    pub fn forward(&self, x: &[f64], adj: &NormalizedAdjacency) -> Result<(Vec<f64>, f64)> {
        self.forward_cached(x, adj).map(|(y, ld, _)| (y, ld))
    }

    pub fn inverse(&self, y: &[f64], adj: &NormalizedAdjacency) -> Result<(Vec<f64>, f64)> {
        let ym = self.to_matrix(y)?;
        let (s, t, _) = graph_conditioner(&self.masked(&ym), adj, &self.conv1, &self.conv2)?;
        let mut x = ym.clone();
        let mut logdet = 0.0;
        for i in (0..self.n).filter(|&i| !self.visible_rows[i]) {
            for j in 0..self.k {
                x[(i, j)] = (ym[(i, j)] - t[(i, j)]) / sigmoid(s[(i, j)]);
                logdet -= log_sigmoid(s[(i, j)]);
            }
        }
        Ok((row_major(&x), logdet))
    }

    /// Accumulates into `grad`; returns the input gradient (row-major).
    pub fn backward(
        &self,
        cache: &GraphCouplingCache,
        adj: &NormalizedAdjacency,
        gy: &[f64],
        g_logdet: f64,
        grad: &mut GraphCoupling,
    ) -> Result<Vec<f64>> {
        let gym = self.to_matrix(gy)?;
        let mut gx = gym.clone();
        let mut g_s = DMatrix::zeros(self.n, self.k);
        let mut g_t = DMatrix::zeros(self.n, self.k);
        for i in (0..self.n).filter(|&i| !self.visible_rows[i]) {
            for j in 0..self.k {
                let sg = sigmoid(cache.s[(i, j)]);
                let g = gym[(i, j)];
                gx[(i, j)] = g * sg;
                g_s[(i, j)] = g * cache.x[(i, j)] * sg * (1.0 - sg) + g_logdet * (1.0 - sg);
                g_t[(i, j)] = g;
            }
        }
        let g_h = graph_conditioner_backward(
            &cache.cond,
            adj,
            &self.conv1,
            &self.conv2,
            &g_s,
            &g_t,
            &mut grad.conv1,
            &mut grad.conv2,
        );
        for i in (0..self.n).filter(|&i| self.visible_rows[i]) {
            for j in 0..self.k {
                gx[(i, j)] += g_h[(i, j)];
            }
        }
        Ok(row_major(&gx))
    }
}

impl Parameterized for GraphCoupling {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

#[derive(Debug, Clone, Default)]
pub struct AtomTrace {
    caches: Vec<GraphCouplingCache>,
}

/// Stack of graph couplings with alternating row masks.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomFlow {
    pub n: usize,
    pub k: usize,
    pub layers: Vec<GraphCoupling>,
}

impl AtomFlow {
    pub fn new<R: Rng + ?Sized>(
        n: usize,
        k: usize,
        channels: usize,
        blocks: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            n,
            k,
            layers: (0..blocks)
                .map(|q| GraphCoupling::new(n, k, channels, hidden, q, rng))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n * self.k
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "atom flow expects {} entries, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward_cached(
        &self,
        x: &[f64],
        adj: &NormalizedAdjacency,
    ) -> Result<(Vec<f64>, f64, AtomTrace)> {
        self.check(x)?;
        let mut cur = x.to_vec();
        let mut total = 0.0;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, ld, cache) = layer.forward_cached(&cur, adj)?;
            caches.push(cache);
            cur = y;
            total += ld;
        }
        Ok((cur, total, AtomTrace { caches }))
    }

    pub fn forward(&self, x: &[f64], adj: &NormalizedAdjacency) -> Result<(Vec<f64>, f64)> {
        self.forward_cached(x, adj).map(|(z, ld, _)| (z, ld))
    }

    pub fn inverse(&self, z: &[f64], adj: &NormalizedAdjacency) -> Result<(Vec<f64>, f64)> {
        self.check(z)?;
        let mut cur = z.to_vec();
        let mut total = 0.0;
        for layer in self.layers.iter().rev() {
            let (x, ld) = layer.inverse(&cur, adj)?;
            cur = x;
            total += ld;
        }
        Ok((cur, total))
    }

    pub fn backward(
        &self,
        trace: &AtomTrace,
        adj: &NormalizedAdjacency,
        gz: &[f64],
        g_logdet: f64,
        grad: &mut AtomFlow,
    ) -> Result<Vec<f64>> {
        if trace.caches.len() != self.layers.len() || grad.layers.len() != self.layers.len() {
            return Err(Error::NoCache);
        }
        let mut g = gz.to_vec();
        for ((layer, cache), gl) in self
            .layers
            .iter()
            .zip(&trace.caches)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            g = layer.backward(cache, adj, &g, g_logdet, gl)?;
        }
        Ok(g)
    }
}

impl Parameterized for AtomFlow {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowcore::testutil::*;
    use crate::flowcore::{flatten_params, perturb_params, unflatten_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // path 0-1-2 with a double bond 1=2, node 3 isolated
    fn small_adj() -> NormalizedAdjacency {
        let (c, n) = (2, 4);
        let mut b = vec![0.0; c * n * n];
        let mut set = |ch: usize, i: usize, j: usize| {
            b[ch * n * n + i * n + j] = 1.0;
            b[ch * n * n + j * n + i] = 1.0;
        };
        set(0, 0, 1);
        set(1, 1, 2);
        NormalizedAdjacency::from_tensor(c, n, &b).unwrap()
    }

    fn random_flow(blocks: usize, seed: u64) -> (AtomFlow, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = AtomFlow::new(4, 3, 2, blocks, 5, &mut rng);
        perturb_params(&mut f, 0.4, &mut rng);
        (f, rng)
    }

    fn sample(rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..12).map(|_| rng.random_range(0.0..1.4)).collect()
    }

    #[test]
    fn fresh_layer_halves_hidden_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = AtomFlow::new(4, 3, 2, 1, 5, &mut rng);
        let x = sample(&mut rng);
        let (z, ld) = f.forward(&x, &small_adj()).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let expect = if i % 2 == 0 {
                    x[i * 3 + j]
                } else {
                    0.5 * x[i * 3 + j]
                };
                assert_eq!(z[i * 3 + j], expect);
            }
        }
        assert!((ld - 6.0 * 0.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn zero_layers_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = AtomFlow::new(4, 3, 2, 0, 5, &mut rng);
        let x = sample(&mut rng);
        assert_eq!(f.forward(&x, &small_adj()).unwrap(), (x.clone(), 0.0));
    }

    #[test]
    fn round_trip() {
        let (f, mut rng) = random_flow(4, 2);
        let adj = small_adj();
        for _ in 0..10 {
            let x = sample(&mut rng);
            let (z, ld) = f.forward(&x, &adj).unwrap();
            let (back, ild) = f.inverse(&z, &adj).unwrap();
            assert!(max_abs_diff(&x, &back) < 1e-7);
            assert!((ld + ild).abs() < 1e-9);
        }
    }

    #[test]
    fn logdet_matches_jacobian() {
        let (f, mut rng) = random_flow(3, 3);
        let adj = small_adj();
        let x = sample(&mut rng);
        let jac = numeric_jacobian(|v| f.forward(v, &adj).unwrap().0, &x, 1e-5);
        let ld = f.forward(&x, &adj).unwrap().1;
        assert!(rel_err(log_abs_det(jac), ld) < 1e-3);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (f, mut rng) = random_flow(2, 4);
        let adj = small_adj();
        let x = sample(&mut rng);
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |flow: &AtomFlow, x: &[f64]| {
            let (z, ld) = flow.forward(x, &adj).unwrap();
            z.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.5 * ld
        };
        let (_, _, trace) = f.forward_cached(&x, &adj).unwrap();
        let mut grad = f.zeros_like();
        let gx = f.backward(&trace, &adj, &w, 0.5, &mut grad).unwrap();
        let analytic = flatten_params(&grad);
        let base = flatten_params(&f);
        let h = 1e-5;
        for idx in 0..base.len() {
            let mut p = f.clone();
            let mut v = base.clone();
            v[idx] += h;
            unflatten_params(&mut p, &v);
            let fp = loss(&p, &x);
            v[idx] -= 2.0 * h;
            unflatten_params(&mut p, &v);
            let fm = loss(&p, &x);
            let num = (fp - fm) / (2.0 * h);
            assert!(
                (num - analytic[idx]).abs() < 1e-6 * (1.0 + num.abs()),
                "{idx}: {num} vs {}",
                analytic[idx]
            );
        }
        let num = numeric_jacobian(|v| vec![loss(&f, v)], &x, h);
        for i in 0..12 {
            assert!((num[(0, i)] - gx[i]).abs() < 1e-6 * (1.0 + gx[i].abs()));
        }
    }

    #[test]
    fn shape_and_trace_errors() {
        let (f, _) = random_flow(2, 5);
        let adj = small_adj();
        assert!(matches!(f.forward(&[0.0; 11], &adj), Err(Error::Shape(_))));
        let mut grad = f.zeros_like();
        assert!(matches!(
            f.backward(&AtomTrace::default(), &adj, &[0.0; 12], 0.0, &mut grad),
            Err(Error::NoCache)
        ));
    }
}

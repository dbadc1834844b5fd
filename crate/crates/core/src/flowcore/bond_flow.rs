//! Glow-style flow over the bond tensor.

use rand::Rng;

use super::{join, ActNorm, AffineCoupling, Bijection, ChannelMixer, CouplingCache, Parameterized};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum BondLayer {
    ActNorm(ActNorm),
    Mixer(ChannelMixer),
    Coupling(AffineCoupling),
}

impl BondLayer {
    fn name(&self) -> &'static str {
        match self {
            BondLayer::ActNorm(_) => "actnorm",
            BondLayer::Mixer(_) => "mixer",
            BondLayer::Coupling(_) => "coupling",
        }
    }
}

impl Bijection for BondLayer {
    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        match self {
            BondLayer::ActNorm(l) => l.forward(x),
            BondLayer::Mixer(l) => l.forward(x),
            BondLayer::Coupling(l) => l.forward(x),
        }
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        match self {
            BondLayer::ActNorm(l) => l.inverse(y),
            BondLayer::Mixer(l) => l.inverse(y),
            BondLayer::Coupling(l) => l.inverse(y),
        }
    }
}

/// Per-layer forward state.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Input(Vec<f64>),
    Coupling(CouplingCache),
}

/// Forward trace of a whole [`BondFlow`].
#[derive(Debug, Clone, Default)]
pub struct BondTrace {
    caches: Vec<LayerCache>,
}

/// `Q` blocks of actnorm → channel mixer → affine coupling over a
/// channel-major `C×N×N` tensor.
///
/// Coupling `q` keeps entry `(c, i, j)` visible when `c + i + j + q` is even,
/// so consecutive couplings transform complementary halves.
#[derive(Debug, Clone, PartialEq)]
pub struct BondFlow {
    pub channels: usize,
    pub n: usize,
    pub layers: Vec<BondLayer>,
}

impl BondFlow {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        n: usize,
        blocks: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let spatial = n * n;
        let mut layers = Vec::with_capacity(3 * blocks);
        for q in 0..blocks {
            let mask: Vec<bool> = (0..channels * spatial)
                .map(|idx| {
                    let (c, p) = (idx / spatial, idx % spatial);
                    (c + p / n + p % n + q).is_multiple_of(2)
                })
                .collect();
            layers.push(BondLayer::ActNorm(ActNorm::new(channels, spatial)));
            layers.push(BondLayer::Mixer(ChannelMixer::random_rotation(
                channels, spatial, rng,
            )));
            layers.push(BondLayer::Coupling(AffineCoupling::with_mask(
                &mask, hidden, rng,
            )?));
        }
        Ok(Self {
            channels,
            n,
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.channels * self.n * self.n
    }

    pub fn blocks(&self) -> usize {
        self.layers.len() / 3
    }

    pub fn is_initialized(&self) -> bool {
        self.layers.iter().all(|l| match l {
            BondLayer::ActNorm(a) => a.initialized,
            _ => true,
        })
    }

    /// Per-actnorm initialization flags, in layer order.
    pub fn actnorm_flags(&self) -> Vec<bool> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                BondLayer::ActNorm(a) => Some(a.initialized),
                _ => None,
            })
            .collect()
    }

    pub fn set_actnorm_flags(&mut self, flags: &[bool]) -> Result<()> {
        let mut it = flags.iter();
        for l in self.layers.iter_mut() {
            if let BondLayer::ActNorm(a) = l {
                a.initialized = *it
                    .next()
                    .ok_or_else(|| Error::Shape("too few actnorm flags".into()))?;
            }
        }
        if it.next().is_some() {
            return Err(Error::Shape("too many actnorm flags".into()));
        }
        Ok(())
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "bond flow expects {} entries, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Data-dependent actnorm initialization: each uninitialized actnorm
    /// sees the batch as transformed by the layers before it.
    pub fn initialize(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        let mut cur: Vec<Vec<f64>> = batch.to_vec();
        for x in &cur {
            self.check(x)?;
        }
        for layer in self.layers.iter_mut() {
            if let BondLayer::ActNorm(a) = layer {
                if !a.initialized {
                    a.initialize(&cur)?;
                }
            }
            cur = cur
                .iter()
                .map(|x| layer.forward(x).map(|(y, _)| y))
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, f64, BondTrace)> {
        self.check(x)?;
        let mut cur = x.to_vec();
        let mut total = 0.0;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, ld) = match layer {
                BondLayer::Coupling(c) => {
                    let (y, ld, cache) = c.forward_cached(&cur)?;
                    caches.push(LayerCache::Coupling(cache));
                    (y, ld)
                }
                other => {
                    let out = other.forward(&cur)?;
                    caches.push(LayerCache::Input(cur));
                    out
                }
            };
            cur = y;
            total += ld;
        }
        Ok((cur, total, BondTrace { caches }))
    }

    /// Backpropagates `gz` (and weight `g_logdet` on the total
    /// log-determinant) through the trace; returns the input gradient.
    pub fn backward(
        &self,
        trace: &BondTrace,
        gz: &[f64],
        g_logdet: f64,
        grad: &mut BondFlow,
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
            g = match (layer, cache, gl) {
                (BondLayer::ActNorm(l), LayerCache::Input(x), BondLayer::ActNorm(gl)) => {
                    l.backward(x, &g, g_logdet, gl)
                }
                (BondLayer::Mixer(l), LayerCache::Input(x), BondLayer::Mixer(gl)) => {
                    l.backward(x, &g, g_logdet, gl)?
                }
                (BondLayer::Coupling(l), LayerCache::Coupling(c), BondLayer::Coupling(gl)) => {
                    l.backward(c, &g, g_logdet, gl)
                }
                _ => return Err(Error::NoCache),
            };
        }
        Ok(g)
    }
}

impl Bijection for BondFlow {
    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(x)?;
        let mut cur = x.to_vec();
        let mut total = 0.0;
        for layer in &self.layers {
            let (y, ld) = layer.forward(&cur)?;
            cur = y;
            total += ld;
        }
        Ok((cur, total))
    }

    fn inverse(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(z)?;
        let mut cur = z.to_vec();
        let mut total = 0.0;
        for layer in self.layers.iter().rev() {
            let (x, ld) = layer.inverse(&cur)?;
            cur = x;
            total += ld;
        }
        Ok((cur, total))
    }
}

impl Parameterized for BondFlow {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("{i}.{}", l.name()));
            match l {
                BondLayer::ActNorm(a) => a.visit_params(&p, f),
                BondLayer::Mixer(m) => m.visit_params(&p, f),
                BondLayer::Coupling(c) => c.visit_params(&p, f),
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("{i}.{}", l.name()));
            match l {
                BondLayer::ActNorm(a) => a.visit_params_mut(&p, f),
                BondLayer::Mixer(m) => m.visit_params_mut(&p, f),
                BondLayer::Coupling(c) => c.visit_params_mut(&p, f),
            }
        }
    }
}

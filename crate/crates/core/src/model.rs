//! The full conditional model: target encoder plus bond and atom flows.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flowcore::{
    join, AtomFlow, AtomTrace, Bijection, BondFlow, BondTrace, NormalizedAdjacency, Parameterized,
};
use crate::molio::{
    discretize, discretize_bonds, ContinuousGraph, GraphConfig, GraphShape, MolGraph,
};
use crate::targetenc::TargetEncoder;

/// Architecture hyperparameters. Everything that changes a tensor shape
/// lives here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub graph: GraphConfig,
    pub coupling_blocks: usize,
    pub bond_hidden: usize,
    pub atom_hidden: usize,
    pub kmer: usize,
    pub encoder_hidden: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            graph: GraphConfig::default(),
            coupling_blocks: 4,
            bond_hidden: 64,
            atom_hidden: 16,
            kmer: 3,
            encoder_hidden: 256,
            max_seq_len: crate::targetenc::MAX_SEQ_LEN,
        }
    }
}

impl ModelConfig {
    pub fn shape(&self) -> GraphShape {
        self.graph.shape()
    }

    /// Latent width `D = N·K + C·N·N`.
    pub fn latent_dim(&self) -> usize {
        self.shape().latent_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: TargetEncoder,
    pub bond_flow: BondFlow,
    pub atom_flow: AtomFlow,
    /// Elementwise std of the training target embeddings, used to size the
    /// one-to-many space at generation time.
    pub space_sigma: Vec<f64>,
}

/// Forward state of one molecule through both flows.
#[derive(Debug, Clone)]
pub struct GraphTrace {
    bond: BondTrace,
    atom: AtomTrace,
    adj: NormalizedAdjacency,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let GraphShape { n, k, c } = config.shape();
        if n < 2 || k == 0 || c == 0 {
            return Err(Error::Config(format!(
                "graph shape N={n}, K={k}, C={c} is too small"
            )));
        }
        let d = config.latent_dim();
        let mut encoder = TargetEncoder::new(config.kmer, config.encoder_hidden, d, rng)?;
        encoder.max_len = config.max_seq_len;
        let bond_flow = BondFlow::new(c, n, config.coupling_blocks, config.bond_hidden, rng)?;
        let atom_flow = AtomFlow::new(n, k, c, config.coupling_blocks, config.atom_hidden, rng);
        Ok(Self {
            config,
            encoder,
            bond_flow,
            atom_flow,
            space_sigma: vec![0.0; d],
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn is_initialized(&self) -> bool {
        self.bond_flow.is_initialized()
    }

    /// Data-dependent actnorm initialization from dequantized molecules.
    pub fn initialize(&mut self, batch: &[ContinuousGraph]) -> Result<()> {
        let bonds: Vec<Vec<f64>> = batch.iter().map(|x| x.bonds.clone()).collect();
        self.bond_flow.initialize(&bonds)
    }

    fn check_graph(&self, x: &ContinuousGraph, g: &MolGraph) -> Result<()> {
        let shape = self.config.shape();
        if x.shape != shape || g.shape() != shape {
            return Err(Error::Shape(format!(
                "model expects N={}, K={}, C={}",
                shape.n, shape.k, shape.c
            )));
        }
        Ok(())
    }

    /// `Z_M = [z_atoms, z_bonds]` and the total log-determinant. The atom
    /// flow is conditioned on the noise-free bonds of `g`.
    pub fn embed_graph_cached(
        &self,
        x: &ContinuousGraph,
        g: &MolGraph,
    ) -> Result<(Vec<f64>, f64, GraphTrace)> {
        self.check_graph(x, g)?;
        let (z_bonds, ld_b, bond) = self.bond_flow.forward_cached(&x.bonds)?;
        let adj = NormalizedAdjacency::from_graph(g);
        let (mut z, ld_a, atom) = self.atom_flow.forward_cached(&x.atoms, &adj)?;
        z.extend_from_slice(&z_bonds);
        Ok((z, ld_a + ld_b, GraphTrace { bond, atom, adj }))
    }

    pub fn embed_graph(&self, x: &ContinuousGraph, g: &MolGraph) -> Result<(Vec<f64>, f64)> {
        self.embed_graph_cached(x, g).map(|(z, ld, _)| (z, ld))
    }

    /// Accumulates flow gradients for a gradient `g_z` on `Z_M` and weight
    /// `g_logdet` on the log-determinant.
    pub fn backward_graph(
        &self,
        trace: &GraphTrace,
        g_z: &[f64],
        g_logdet: f64,
        grad: &mut FlowGrads,
    ) -> Result<()> {
        let na = self.atom_flow.dim();
        self.atom_flow.backward(
            &trace.atom,
            &trace.adj,
            &g_z[..na],
            g_logdet,
            &mut grad.atom,
        )?;
        self.bond_flow
            .backward(&trace.bond, &g_z[na..], g_logdet, &mut grad.bond)?;
        Ok(())
    }

    /// Inverse path: bonds first, then atoms conditioned on the discretized
    /// bonds. Returns the continuous reconstruction and its discretization.
    pub fn decode(&self, z: &[f64]) -> Result<(ContinuousGraph, MolGraph)> {
        if !self.is_initialized() {
            return Err(Error::Untrained(
                "actnorm layers are not initialized".into(),
            ));
        }
        if z.len() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "latent of length {} for D = {}",
                z.len(),
                self.latent_dim()
            )));
        }
        let shape = self.config.shape();
        let na = self.atom_flow.dim();
        let (bonds, _) = self.bond_flow.inverse(&z[na..])?;
        let b_disc = discretize_bonds(shape, &bonds)?;
        let adj = NormalizedAdjacency::from_tensor(shape.c, shape.n, &b_disc)?;
        let (atoms, _) = self.atom_flow.inverse(&z[..na], &adj)?;
        let x = ContinuousGraph::new(shape, atoms, bonds)?;
        let g = discretize(&x);
        Ok((x, g))
    }

    pub fn flow_grads(&self) -> FlowGrads {
        FlowGrads {
            bond: self.bond_flow.zeros_like(),
            atom: self.atom_flow.zeros_like(),
        }
    }
}

/// Gradient accumulator for the two flows.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrads {
    pub bond: BondFlow,
    pub atom: AtomFlow,
}

impl FlowGrads {
    pub fn add(&mut self, other: &FlowGrads) {
        let mut src = Vec::with_capacity(other.num_params());
        other.visit_params("", &mut |_, v| src.extend_from_slice(v));
        let mut off = 0;
        self.visit_params_mut("", &mut |_, v| {
            let n = v.len();
            for (a, b) in v.iter_mut().zip(&src[off..off + n]) {
                *a += b;
            }
            off += n;
        });
    }
}

impl Parameterized for FlowGrads {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.bond.visit_params(&join(prefix, "bond"), f);
        self.atom.visit_params(&join(prefix, "atom"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.bond.visit_params_mut(&join(prefix, "bond"), f);
        self.atom.visit_params_mut(&join(prefix, "atom"), f);
    }
}

impl Parameterized for Model {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.bond_flow.visit_params(&join(prefix, "bond"), f);
        self.atom_flow.visit_params(&join(prefix, "atom"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        self.bond_flow.visit_params_mut(&join(prefix, "bond"), f);
        self.atom_flow.visit_params_mut(&join(prefix, "atom"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molio::{dequantize, parse_smiles};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embed_then_decode_recovers_the_molecule() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig {
            bond_hidden: 16,
            encoder_hidden: 8,
            kmer: 1,
            ..Default::default()
        };
        let mut model = Model::new(cfg, &mut rng).unwrap();
        let mols: Vec<MolGraph> = ["CC(=O)N1CC1", "OCC#N", "C1=CC=CC=C1"]
            .iter()
            .map(|s| parse_smiles(s, &model.config.graph).unwrap())
            .collect();
        let xs: Vec<ContinuousGraph> = mols
            .iter()
            .map(|g| dequantize(g, 0.4, &mut rng).unwrap())
            .collect();
        model.initialize(&xs).unwrap();
        crate::flowcore::perturb_params(&mut model, 0.05, &mut rng);
        for (x, g) in xs.iter().zip(&mols) {
            let (z, _) = model.embed_graph(x, g).unwrap();
            assert_eq!(z.len(), 9 * 11 + 3 * 81);
            let (back, disc) = model.decode(&z).unwrap();
            let err = back
                .atoms
                .iter()
                .chain(&back.bonds)
                .zip(x.atoms.iter().chain(&x.bonds));
            assert!(err.map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) < 1e-7);
            assert_eq!(&disc, g);
        }
    }

    #[test]
    fn decode_requires_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(ModelConfig::default(), &mut rng).unwrap();
        assert!(matches!(
            model.decode(&vec![0.0; 342]),
            Err(Error::Untrained(_))
        ));
    }
}

//! Joint optimization of the encoder and both flows.

mod adam;
mod audit;
mod checkpoint;

pub use adam::{clip_global_norm, Adam};
pub use audit::{
    audit_gradients, compare_gradients, AuditEntry, AuditReport, AuditSection, AUDIT_MIN_MAGNITUDE,
    AUDIT_STEP,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION, MAGIC};

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flowcore::{flatten_params, unflatten_params, Parameterized};
use crate::model::{FlowGrads, Model};
use crate::molio::{dequantize, ContinuousGraph, MolGraph};
use crate::objectives::{
    align_loss_grad, batch_std, sample_space, unif_loss_grad, weighted_loss, LossReport,
    SpaceParams, DEFAULT_LAMBDA, DEFAULT_TEMPERATURE,
};
use crate::targetenc::{EncoderCache, TargetEmbedding, TargetEncoder};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub noise_scale: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub align_weight: f64,
    pub unif_weight: f64,
    /// Weight on the mean negative log-determinant; 0 keeps the objective
    /// to alignment plus uniformity.
    pub logdet_weight: f64,
    pub clip_norm: f64,
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 16,
            epochs: 100,
            seed: 0,
            noise_scale: crate::molio::DEFAULT_NOISE_SCALE,
            lambda: DEFAULT_LAMBDA,
            temperature: DEFAULT_TEMPERATURE,
            align_weight: 1.0,
            unif_weight: 1.0,
            logdet_weight: 0.0,
            clip_norm: 10.0,
            freeze_encoder: false,
        }
    }
}

/// One drug-target pair as seen by the trainer.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub sequence: &'a str,
    pub graph: &'a MolGraph,
}

/// Randomness of one batch, drawn up front so the objective is a
/// deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct BatchNoise {
    pub graphs: Vec<ContinuousGraph>,
    /// Space offsets `ε`; not differentiated.
    pub eps: Vec<Vec<f64>>,
}

/// Gradient of the total loss. `encoder` is `None` when the encoder is
/// frozen.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoder: Option<TargetEncoder>,
    pub flows: FlowGrads,
}

impl ModelGrads {
    /// Flat vector in the model's parameter order; a frozen encoder
    /// contributes zeros.
    pub fn flatten(&self, model: &Model) -> Vec<f64> {
        let mut out = match &self.encoder {
            Some(e) => flatten_params(e),
            None => vec![0.0; model.encoder.num_params()],
        };
        out.extend(flatten_params(&self.flows));
        out
    }
}

/// Distinct sequences in first-seen order and each example's index into
/// them.
fn distinct_targets<'a>(batch: &[Example<'a>]) -> (Vec<&'a str>, Vec<usize>) {
    let mut seqs = Vec::new();
    let mut index = HashMap::new();
    let owner = batch
        .iter()
        .map(|ex| {
            *index.entry(ex.sequence).or_insert_with(|| {
                seqs.push(ex.sequence);
                seqs.len() - 1
            })
        })
        .collect();
    (seqs, owner)
}

fn encode_all(model: &Model, seqs: &[&str]) -> Result<Vec<(TargetEmbedding, EncoderCache)>> {
    seqs.par_iter()
        .map(|s| model.encoder.encode_cached(s))
        .collect()
}

/// Dequantizes the batch and draws the space offsets with `σ` taken from
/// the current per-example target embeddings.
pub fn draw_noise<R: Rng + ?Sized>(
    model: &Model,
    batch: &[Example],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<BatchNoise> {
    let graphs = batch
        .iter()
        .map(|ex| dequantize(ex.graph, cfg.noise_scale, rng))
        .collect::<Result<Vec<_>>>()?;
    let d = model.latent_dim();
    let eps = if cfg.lambda > 0.0 {
        let (seqs, owner) = distinct_targets(batch);
        let emb = encode_all(model, &seqs)?;
        let rows: Vec<Vec<f64>> = owner.iter().map(|&t| emb[t].0.z.clone()).collect();
        let sp = SpaceParams::new(cfg.lambda, batch_std(&rows)?)?;
        (0..batch.len())
            .map(|_| sample_space(&vec![0.0; d], &sp, rng))
            .collect()
    } else {
        vec![vec![0.0; d]; batch.len()]
    };
    Ok(BatchNoise { graphs, eps })
}

/// The training objective on one batch with fixed noise. With `with_grad`
/// the analytic gradient of `total` is returned as well.
pub fn batch_objective(
    model: &Model,
    batch: &[Example],
    noise: &BatchNoise,
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<(LossReport, Option<ModelGrads>)> {
    if batch.is_empty() {
        return Err(Error::Empty);
    }
    if noise.graphs.len() != batch.len() || noise.eps.len() != batch.len() {
        return Err(Error::Shape("batch noise does not match the batch".into()));
    }
    let (seqs, owner) = distinct_targets(batch);
    if seqs.len() < 2 {
        return Err(Error::BatchTooSmall);
    }
    let emb = encode_all(model, &seqs)?;

    let flows = batch
        .par_iter()
        .zip(&noise.graphs)
        .map(|(ex, x)| model.embed_graph_cached(x, ex.graph))
        .collect::<Result<Vec<_>>>()?;

    let samples: Vec<Vec<f64>> = owner
        .iter()
        .zip(&noise.eps)
        .map(|(&t, e)| emb[t].0.z.iter().zip(e).map(|(a, b)| a + b).collect())
        .collect();
    let z_m: Vec<Vec<f64>> = flows.iter().map(|(z, _, _)| z.clone()).collect();
    let (align, g_samples) = align_loss_grad(&samples, &z_m)?;
    let z_hat: Vec<Vec<f64>> = emb.iter().map(|(e, _)| e.z_hat.clone()).collect();
    let (unif, g_hat) = unif_loss_grad(&z_hat, cfg.temperature)?;

    let b = batch.len() as f64;
    let mean_logdet = flows.iter().map(|(_, ld, _)| ld).sum::<f64>() / b;
    let z_rows: Vec<Vec<f64>> = emb.iter().map(|(e, _)| e.z.clone()).collect();
    let report = weighted_loss(align, unif, cfg.align_weight, cfg.unif_weight)?
        .with_penalty(-cfg.logdet_weight * mean_logdet)?
        .with_stats(&z_rows);
    if !with_grad {
        return Ok((report, None));
    }

    let (wa, wu) = (cfg.align_weight, cfg.unif_weight);
    let g_logdet = -cfg.logdet_weight / b;
    let per_item = flows
        .par_iter()
        .zip(&g_samples)
        .map(|((_, _, trace), gs)| {
            let mut g = model.flow_grads();
            let g_z: Vec<f64> = gs.iter().map(|v| -wa * v).collect();
            model.backward_graph(trace, &g_z, g_logdet, &mut g)?;
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    // summed in batch order so the result does not depend on thread count
    let mut flow_grads = model.flow_grads();
    for g in &per_item {
        flow_grads.add(g);
    }

    let encoder = if cfg.freeze_encoder {
        None
    } else {
        let d = model.latent_dim();
        let mut g_z = vec![vec![0.0; d]; seqs.len()];
        for (&t, gs) in owner.iter().zip(&g_samples) {
            for (acc, v) in g_z[t].iter_mut().zip(gs) {
                *acc += wa * v;
            }
        }
        let mut grad = model.encoder.zeros_like();
        for (t, (e, cache)) in emb.iter().enumerate() {
            let scaled: Vec<f64> = g_hat[t].iter().map(|v| wu * v).collect();
            for (acc, v) in g_z[t].iter_mut().zip(e.normalize_backward(&scaled)) {
                *acc += v;
            }
            model.encoder.backward(cache, &g_z[t], &mut grad);
        }
        Some(grad)
    };
    Ok((
        report,
        Some(ModelGrads {
            encoder,
            flows: flow_grads,
        }),
    ))
}

/// Shuffled batches of `batch_size`. A trailing batch with fewer than two
/// distinct targets is merged into the one before it, since the uniformity
/// term is undefined on it.
pub fn make_batches<R: Rng + ?Sized>(
    examples: &[Example],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect();
    if batches.len() >= 2 {
        let last = batches.last().unwrap();
        let distinct: std::collections::HashSet<&str> =
            last.iter().map(|&i| examples[i].sequence).collect();
        if distinct.len() < 2 {
            let tail = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(tail);
        }
    }
    batches
}

/// One pass over the data; returns the mean batch report.
pub fn train_epoch<R: Rng + ?Sized>(
    model: &mut Model,
    adam: &mut Adam,
    examples: &[Example],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossReport> {
    if examples.is_empty() {
        return Err(Error::Empty);
    }
    let mut reports = Vec::new();
    for idx in make_batches(examples, cfg.batch_size, rng) {
        let batch: Vec<Example> = idx.iter().map(|&i| examples[i]).collect();
        let noise = draw_noise(model, &batch, cfg, rng)?;
        let (report, grads) = batch_objective(model, &batch, &noise, cfg, true)?;
        let mut g = grads.expect("gradient requested").flatten(model);
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {bad} at loss {:?}",
                report
            )));
        }
        clip_global_norm(&mut g, cfg.clip_norm);
        let mut params = flatten_params(model);
        adam.update(&mut params, &g)?;
        unflatten_params(model, &params);
        reports.push(report);
    }
    Ok(LossReport::mean(&reports))
}

/// Sets the model's generation-time `σ` from the per-example target
/// embeddings.
pub fn update_space_sigma(model: &mut Model, examples: &[Example]) -> Result<()> {
    let (seqs, owner) = distinct_targets(examples);
    let emb = encode_all(model, &seqs)?;
    let rows: Vec<Vec<f64>> = owner.iter().map(|&t| emb[t].0.z.clone()).collect();
    model.space_sigma = batch_std(&rows)?;
    Ok(())
}

/// Full run: actnorm initialization (if needed) on the whole training set,
/// `cfg.epochs` epochs, then the space `σ`. `on_epoch` sees each epoch's
/// mean report.
pub fn train(
    model: &mut Model,
    adam: &mut Adam,
    examples: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &LossReport),
) -> Result<Vec<LossReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if !model.is_initialized() {
        let xs = examples
            .iter()
            .map(|ex| dequantize(ex.graph, cfg.noise_scale, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        model.initialize(&xs)?;
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let report = train_epoch(model, adam, examples, cfg, &mut rng)?;
        on_epoch(epoch, &report);
        history.push(report);
    }
    update_space_sigma(model, examples)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::molio::{parse_smiles, GraphConfig, Vocab};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            graph: GraphConfig::new(Vocab::parse("C,N,O").unwrap(), 4, 2),
            coupling_blocks: 2,
            bond_hidden: 6,
            atom_hidden: 4,
            kmer: 1,
            encoder_hidden: 5,
            max_seq_len: 100,
        }
    }

    fn data(cfg: &GraphConfig) -> Vec<(String, MolGraph)> {
        [
            ("MKV", "CCO"),
            ("MKV", "CN"),
            ("WYAC", "C=O"),
            ("WYAC", "OCCN"),
            ("GGHT", "C1CC1"),
            ("GGHT", "CC"),
        ]
        .iter()
        .map(|(s, m)| (s.to_string(), parse_smiles(m, cfg).unwrap()))
        .collect()
    }

    #[test]
    fn frozen_parameters_repeat_the_same_report() {
        let mc = tiny_config();
        let pairs = data(&mc.graph);
        let ex: Vec<Example> = pairs
            .iter()
            .map(|(s, g)| Example {
                sequence: s,
                graph: g,
            })
            .collect();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 4,
            ..Default::default()
        };
        let mut model = Model::new(mc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut adam = Adam::new(model.num_params(), 0.0);
        let run = |model: &mut Model, adam: &mut Adam| {
            train_epoch(model, adam, &ex, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
        };
        let xs: Vec<ContinuousGraph> = ex
            .iter()
            .map(|e| dequantize(e.graph, 0.4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap())
            .collect();
        model.initialize(&xs).unwrap();
        let a = run(&mut model, &mut adam);
        let b = run(&mut model, &mut adam);
        assert_eq!(a, b);
    }

    #[test]
    fn single_target_batch_is_too_small() {
        let mc = tiny_config();
        let pairs = data(&mc.graph);
        let ex: Vec<Example> = pairs[..2]
            .iter()
            .map(|(s, g)| Example {
                sequence: s,
                graph: g,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(mc, &mut rng).unwrap();
        let cfg = TrainConfig::default();
        let noise = draw_noise(&model, &ex, &cfg, &mut rng).unwrap();
        model.initialize(&noise.graphs).unwrap();
        assert!(matches!(
            batch_objective(&model, &ex, &noise, &cfg, true),
            Err(Error::BatchTooSmall)
        ));
    }

    #[test]
    fn trailing_single_target_batch_is_merged() {
        let mc = tiny_config();
        let pairs = data(&mc.graph);
        let ex: Vec<Example> = pairs
            .iter()
            .map(|(s, g)| Example {
                sequence: s,
                graph: g,
            })
            .collect();
        for seed in 0..50 {
            let batches = make_batches(&ex, 5, &mut ChaCha8Rng::seed_from_u64(seed));
            let mut all: Vec<usize> = batches.concat();
            all.sort();
            assert_eq!(all, (0..6).collect::<Vec<_>>());
            for b in &batches {
                let d: std::collections::HashSet<&str> =
                    b.iter().map(|&i| ex[i].sequence).collect();
                assert!(d.len() >= 2);
            }
        }
    }

    #[test]
    fn total_gradient_is_the_sum_of_term_gradients() {
        let mc = tiny_config();
        let pairs = data(&mc.graph);
        let ex: Vec<Example> = pairs
            .iter()
            .map(|(s, g)| Example {
                sequence: s,
                graph: g,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = Model::new(mc, &mut rng).unwrap();
        let cfg = TrainConfig::default();
        let noise = draw_noise(&model, &ex, &cfg, &mut rng).unwrap();
        model.initialize(&noise.graphs).unwrap();
        crate::flowcore::perturb_params(&mut model, 0.1, &mut rng);
        let grad = |wa: f64, wu: f64| {
            let c = TrainConfig {
                align_weight: wa,
                unif_weight: wu,
                ..cfg.clone()
            };
            batch_objective(&model, &ex, &noise, &c, true)
                .unwrap()
                .1
                .unwrap()
                .flatten(&model)
        };
        let total = grad(1.0, 1.0);
        let a = grad(1.0, 0.0);
        let u = grad(0.0, 1.0);
        for i in 0..total.len() {
            assert!((total[i] - a[i] - u[i]).abs() < 1e-10);
        }
    }
}

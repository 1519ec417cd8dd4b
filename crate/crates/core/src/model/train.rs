//! Mini-batch training for the graph VAE.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{loss_matched, loss_standard, standard_normal, Rgvae};
use crate::error::{Error, Result};
use crate::kg::{SparseGraph, Triple};
use crate::matching::permutation_rate;
use crate::tensor::{ranger_step, OptimizerConfig, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Global gradient-norm bound applied when the model asks for clipping.
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            max_grad_norm: 1.0,
        }
    }
}

/// Batch-size weighted means over one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Training objective (negative ELBO with the configured beta/delta).
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub perm_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub perm_rate: f64,
}

/// One optimizer step on a batch of graphs.
pub fn train_step(
    model: &mut Rgvae,
    graphs: &[SparseGraph],
    optimizer: &OptimizerConfig,
    max_grad_norm: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let tape = Tape::training(rng.next_u64());
    let bound = model.params.bind(&tape);
    let enc = model.encode(&tape, &bound, graphs)?;
    let eps = tape.constant(standard_normal(&[graphs.len(), model.config.d_z], rng));
    let z = enc.mean.add(&enc.logvar.scale(0.5).exp().mul(&eps)?)?;
    let logits = model.decode(&bound, &z)?;
    let out = if model.config.perminv {
        loss_matched(graphs, &logits, &enc.mean, &enc.logvar, &model.config)?
    } else {
        loss_standard(graphs, &logits, &enc.mean, &enc.logvar, &model.config)?
    };
    let loss = out.total.value().item();
    if !loss.is_finite() {
        return Err(Error::contract(format!("non-finite training loss {loss}")));
    }
    let grads = tape.backward(out.total)?;
    model.params.capture_grads(&grads, &bound)?;
    if model.config.clipgrad {
        model.params.clip_grad_norm(max_grad_norm);
    }
    ranger_step(&mut model.params, optimizer)?;
    let b = graphs.len() as f64;
    Ok(StepStats {
        loss,
        recon: out.recon.iter().sum::<f64>() / b,
        kl: out.kl.iter().sum::<f64>() / b,
        perm_rate: out.permutations.as_deref().map_or(0.0, permutation_rate),
    })
}

/// Fits the model on single-triple graphs; `on_epoch` sees each epoch's
/// statistics as they complete.
pub fn train_rgvae(
    model: &mut Rgvae,
    triples: &[Triple],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if triples.is_empty() {
        return Err(Error::Dataset("no training triples".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    config.optimizer.validate()?;
    let graphs = model.triple_graphs(triples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<SparseGraph> = chunk.iter().map(|&i| graphs[i].clone()).collect();
            let s = train_step(model, &batch, &config.optimizer, config.max_grad_norm, &mut rng)?;
            let w = batch.len() as f64;
            for (acc, v) in sums.iter_mut().zip([s.loss, s.recon, s.kl, s.perm_rate]) {
                *acc += v * w;
            }
        }
        let total = graphs.len() as f64;
        let stats = EpochStats {
            epoch,
            elbo: sums[0] / total,
            recon: sums[1] / total,
            kl: sums[2] / total,
            perm_rate: sums[3] / total,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} recon {:.5} kl {:.5} perm {:.3}",
            stats.elbo,
            stats.recon,
            stats.kl,
            stats.perm_rate
        );
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

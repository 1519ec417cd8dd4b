//! DistMult and its variational variant, trained against sampled negatives.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::Triple;
use crate::linkpred::TripleScorer;
use crate::model::{standard_normal, EpochStats, PROB_CLIP};
use crate::tensor::{init, ranger_step, Checkpoint, OptimizerConfig, ParamSet, Tape, Tensor, Var};

pub const ENTITY_RECORD: &str = "ent_emb";
pub const RELATION_RECORD: &str = "rel_emb";
pub const LOGVAR_SUFFIX: &str = "_logvar";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    Bce,
    /// BCE plus `beta` times the KL of the sampled embedding rows.
    Elbo,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Bce => "bce",
            LossKind::Elbo => "elbo",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "elbo" => Ok(LossKind::Elbo),
            other => Err(Error::Unknown {
                what: "loss",
                name: other.into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistMultConfig {
    pub num_entities: usize,
    pub num_relations: usize,
    pub d_emb: usize,
    pub variational: bool,
    pub loss: LossKind,
    pub beta: f64,
}

impl DistMultConfig {
    pub fn new(num_entities: usize, num_relations: usize) -> Self {
        DistMultConfig {
            num_entities,
            num_relations,
            d_emb: 256,
            variational: false,
            loss: LossKind::Bce,
            beta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_entities == 0 || self.num_relations == 0 || self.d_emb == 0 {
            return Err(Error::contract(
                "entity, relation and embedding sizes must be positive",
            ));
        }
        if self.loss == LossKind::Elbo && !self.variational {
            return Err(Error::contract("the elbo loss needs variational embeddings"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::contract(format!(
                "beta {} must be non-negative",
                self.beta
            )));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("num_entities", self.num_entities.to_string()),
            ("num_relations", self.num_relations.to_string()),
            ("d_emb", self.d_emb.to_string()),
            ("variational", self.variational.to_string()),
            ("loss", self.loss.to_string()),
            ("beta", self.beta.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        fn field<T: FromStr>(pairs: &[(String, String)], key: &str) -> Result<T> {
            let raw = pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Format(format!("config lacks {key}")))?;
            raw.parse()
                .map_err(|_| Error::Format(format!("bad value {raw:?} for {key}")))
        }
        let c = DistMultConfig {
            num_entities: field(pairs, "num_entities")?,
            num_relations: field(pairs, "num_relations")?,
            d_emb: field(pairs, "d_emb")?,
            variational: field(pairs, "variational")?,
            loss: field(pairs, "loss")?,
            beta: field(pairs, "beta")?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// `Σ_k s_k r_k o_k`, with `s_k o_k` formed first so swapping the
/// entities gives bit-identical scores.
pub fn trilinear(s: &[f64], r: &[f64], o: &[f64]) -> f64 {
    s.iter().zip(r).zip(o).map(|((a, b), c)| a * c * b).sum()
}

/// How variational embeddings are formed from `(mean, logvar)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Noise {
    /// `mean + std * eps` with the given fixed `eps` (1 at evaluation).
    Fixed(f64),
    /// A fresh standard-normal `eps` per entry.
    Sampled,
}

#[derive(Clone, Debug)]
pub struct DistMult {
    config: DistMultConfig,
    params: ParamSet,
    entity: usize,
    relation: usize,
    /// Log-variance tables when variational.
    logvar: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistMultStep {
    pub loss: f64,
    pub bce: f64,
    pub kl: f64,
}

impl DistMult {
    /// Xavier-uniform means (gain 1); log-variances start at zero.
    pub fn new(config: DistMultConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (de, dr, d) = (config.num_entities, config.num_relations, config.d_emb);
        let mut params = ParamSet::new();
        let entity = params.add(ENTITY_RECORD, init::xavier_uniform(&[de, d], 1.0, &mut rng)?)?;
        let relation = params.add(RELATION_RECORD, init::xavier_uniform(&[dr, d], 1.0, &mut rng)?)?;
        let logvar = if config.variational {
            Some((
                params.add(format!("{ENTITY_RECORD}{LOGVAR_SUFFIX}"), Tensor::zeros([de, d]))?,
                params.add(
                    format!("{RELATION_RECORD}{LOGVAR_SUFFIX}"),
                    Tensor::zeros([dr, d]),
                )?,
            ))
        } else {
            None
        };
        Ok(DistMult {
            config,
            params,
            entity,
            relation,
            logvar,
        })
    }

    pub fn config(&self) -> &DistMultConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check(&self, t: &Triple) -> Result<()> {
        let (de, dr) = (self.config.num_entities, self.config.num_relations);
        for (what, index, size) in [
            ("subject", t.subject, de),
            ("relation", t.relation, dr),
            ("object", t.object, de),
        ] {
            if index >= size {
                return Err(Error::Bounds { what, index, size });
            }
        }
        Ok(())
    }

    fn row<'a>(&self, table: &'a Tensor, i: usize) -> &'a [f64] {
        let d = self.config.d_emb;
        &table.data()[i * d..(i + 1) * d]
    }

    /// Effective embedding rows with a fixed noise coefficient.
    fn fixed_rows(&self, table: usize, logvar: Option<usize>, i: usize, eps: f64) -> Vec<f64> {
        let mean = self.row(self.params.value(table), i);
        match logvar {
            Some(lv) => mean
                .iter()
                .zip(self.row(self.params.value(lv), i))
                .map(|(m, l)| m + (0.5 * l).exp() * eps)
                .collect(),
            None => mean.to_vec(),
        }
    }

    /// Score with a fixed noise coefficient; variational models use
    /// `mean + std * eps`, plain models ignore `eps`.
    pub fn score_with(&self, t: &Triple, eps: f64) -> Result<f64> {
        self.check(t)?;
        let (lve, lvr) = match self.logvar {
            Some((e, r)) => (Some(e), Some(r)),
            None => (None, None),
        };
        let s = self.fixed_rows(self.entity, lve, t.subject, eps);
        let r = self.fixed_rows(self.relation, lvr, t.relation, eps);
        let o = self.fixed_rows(self.entity, lve, t.object, eps);
        Ok(trilinear(&s, &r, &o))
    }

    /// Evaluation score: the noise coefficient is fixed to 1.
    pub fn score(&self, t: &Triple) -> Result<f64> {
        self.score_with(t, 1.0)
    }

    /// Rows of a table gathered on the tape, `rows x d_emb`.
    fn gather_rows<'t>(&self, table: &Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
        let d = self.config.d_emb;
        let index = ids.iter().flat_map(|&i| i * d..(i + 1) * d).collect();
        table.gather(index, [ids.len(), d])
    }

    /// Embeddings of `ids` on the tape and their per-row KL (zero when
    /// not variational).
    fn embed<'t>(
        &self,
        tape: &'t Tape,
        bound: &[Var<'t>],
        table: usize,
        logvar: Option<usize>,
        ids: &[usize],
        noise: Noise,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let mean = self.gather_rows(&bound[table], ids)?;
        let Some(lv) = logvar else {
            return Ok((mean, None));
        };
        let logvar = self.gather_rows(&bound[lv], ids)?;
        let shape = [ids.len(), self.config.d_emb];
        let eps = match noise {
            Noise::Fixed(e) => Tensor::full(shape, e),
            Noise::Sampled => standard_normal(&shape, rng),
        };
        let emb = mean.add(&logvar.scale(0.5).exp().mul(&tape.constant(eps))?)?;
        // -1/2 Σ (1 + logvar - mean² - exp(logvar)) per row
        let kl = logvar
            .add_scalar(1.0)
            .sub(&mean.mul(&mean)?)?
            .sub(&logvar.exp())?
            .sum_last()
            .scale(-0.5);
        Ok((emb, Some(kl)))
    }

    /// Mean BCE over `triples` with `labels`, plus the ELBO term when
    /// configured. Returns the differentiable total and its parts.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        bound: &[Var<'t>],
        triples: &[Triple],
        labels: &[f64],
        noise: Noise,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var<'t>, f64, f64)> {
        if triples.len() != labels.len() {
            return Err(Error::shape("labels", &[triples.len()], &[labels.len()]));
        }
        if triples.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        for t in triples {
            self.check(t)?;
        }
        let (lve, lvr) = match self.logvar {
            Some((e, r)) => (Some(e), Some(r)),
            None => (None, None),
        };
        let subj: Vec<usize> = triples.iter().map(|t| t.subject).collect();
        let rel: Vec<usize> = triples.iter().map(|t| t.relation).collect();
        let obj: Vec<usize> = triples.iter().map(|t| t.object).collect();
        let (s, kl_s) = self.embed(tape, bound, self.entity, lve, &subj, noise, rng)?;
        let (r, kl_r) = self.embed(tape, bound, self.relation, lvr, &rel, noise, rng)?;
        let (o, kl_o) = self.embed(tape, bound, self.entity, lve, &obj, noise, rng)?;
        let scores = s.mul(&o)?.mul(&r)?.sum_last();
        let p = scores.sigmoid().clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        let y = tape.constant(Tensor::new([labels.len()], labels.to_vec())?);
        let bce = y
            .mul(&p.log())?
            .add(&y.one_minus().mul(&p.one_minus().log())?)?
            .mean()
            .neg();
        let bce_value = bce.value().item();
        match (self.config.loss, kl_s, kl_r, kl_o) {
            (LossKind::Elbo, Some(a), Some(b), Some(c)) => {
                let kl = a.add(&b)?.add(&c)?.mean();
                let kl_value = kl.value().item();
                Ok((bce.add(&kl.scale(self.config.beta))?, bce_value, kl_value))
            }
            (_, Some(a), Some(b), Some(c)) => {
                let kl_value = a.add(&b)?.add(&c)?.mean().value().item();
                Ok((bce, bce_value, kl_value))
            }
            _ => Ok((bce, bce_value, 0.0)),
        }
    }

    pub fn to_checkpoint(&self, extra: &[(String, String)]) -> Checkpoint {
        let mut config = self.config.to_pairs();
        config.extend(extra.iter().cloned());
        Checkpoint {
            config,
            tensors: self.params.records(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = DistMultConfig::from_pairs(&ck.config)?;
        let mut model = DistMult::new(config, 0)?;
        model.params.load_records(&ck.tensors)?;
        Ok(model)
    }
}

impl TripleScorer for DistMult {
    fn score_batch(&self, triples: &[Triple]) -> Result<Vec<f64>> {
        triples.iter().map(|t| self.score(t)).collect()
    }
}

/// Replaces the head or the tail (evenly) with a uniformly drawn entity.
/// Accidental true triples are kept.
pub fn corrupt<R: Rng + ?Sized>(t: &Triple, num_entities: usize, rng: &mut R) -> Triple {
    let e = rng.random_range(0..num_entities);
    if rng.random::<bool>() {
        Triple::new(e, t.relation, t.object)
    } else {
        Triple::new(t.subject, t.relation, e)
    }
}

/// Positives followed by `negatives` corruptions of each, with labels.
pub fn with_negatives<R: Rng + ?Sized>(
    positives: &[Triple],
    negatives: usize,
    num_entities: usize,
    rng: &mut R,
) -> (Vec<Triple>, Vec<f64>) {
    let mut triples = positives.to_vec();
    let mut labels = vec![1.0; positives.len()];
    for t in positives {
        for _ in 0..negatives {
            triples.push(corrupt(t, num_entities, rng));
            labels.push(0.0);
        }
    }
    (triples, labels)
}

/// One optimizer step on a batch of positives and fresh negatives.
pub fn train_step(
    model: &mut DistMult,
    positives: &[Triple],
    negatives: usize,
    optimizer: &OptimizerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DistMultStep> {
    let (triples, labels) = with_negatives(positives, negatives, model.config.num_entities, rng);
    let tape = Tape::training(rng.next_u64());
    let bound = model.params.bind(&tape);
    let noise = if model.config.variational {
        Noise::Sampled
    } else {
        Noise::Fixed(1.0)
    };
    let (total, bce, kl) = model.loss(&tape, &bound, &triples, &labels, noise, rng)?;
    let loss = total.value().item();
    if !loss.is_finite() {
        return Err(Error::contract(format!("non-finite training loss {loss}")));
    }
    let grads = tape.backward(total)?;
    model.params.capture_grads(&grads, &bound)?;
    ranger_step(&mut model.params, optimizer)?;
    Ok(DistMultStep { loss, bce, kl })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistMultTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for DistMultTrainConfig {
    fn default() -> Self {
        DistMultTrainConfig {
            epochs: 60,
            batch_size: 512,
            negatives: 10,
            seed: 0,
            optimizer: default_optimizer(),
        }
    }
}

/// Adam with a larger step and no gradient centralization, which would
/// couple the rows of the embedding tables.
pub fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: 1e-2,
        gradient_centralization: false,
        lookahead_k: 1,
        lookahead_alpha: 1.0,
        ..OptimizerConfig::default()
    }
}

/// Epoch statistics reuse the graph-VAE record: `elbo` is the loss,
/// `recon` the BCE part and `perm_rate` is always 0.
pub fn train_distmult(
    model: &mut DistMult,
    triples: &[Triple],
    config: &DistMultTrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if triples.is_empty() {
        return Err(Error::Dataset("no training triples".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    config.optimizer.validate()?;
    for t in triples {
        model.check(t)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = triples.to_vec();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        for batch in order.chunks(config.batch_size) {
            let s = train_step(model, batch, config.negatives, &config.optimizer, &mut rng)?;
            let w = batch.len() as f64;
            for (acc, v) in sums.iter_mut().zip([s.loss, s.bce, s.kl]) {
                *acc += v * w;
            }
        }
        let total = triples.len() as f64;
        let stats = EpochStats {
            epoch,
            elbo: sums[0] / total,
            recon: sums[1] / total,
            kl: sums[2] / total,
            perm_rate: 0.0,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} bce {:.5} kl {:.5}",
            stats.elbo,
            stats.recon,
            stats.kl
        );
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(variational: bool) -> DistMult {
        DistMult::new(
            DistMultConfig {
                d_emb: 2,
                variational,
                ..DistMultConfig::new(3, 2)
            },
            0,
        )
        .unwrap()
    }

    fn set(m: &mut DistMult, name: &str, data: Vec<f64>) {
        let mut records = m.params().records();
        let slot = records.iter_mut().find(|(n, _)| n == name).unwrap();
        slot.1 = Tensor::new(slot.1.shape().to_vec(), data).unwrap();
        m.params_mut().load_records(&records).unwrap();
    }

    #[test]
    fn bilinear_arithmetic() {
        let mut m = model(false);
        set(&mut m, ENTITY_RECORD, vec![1.0, 2.0, 3.0, 4.0, 0.5, -1.0]);
        set(&mut m, RELATION_RECORD, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.score(&Triple::new(0, 0, 1)).unwrap(), 11.0);
        assert_eq!(m.score(&Triple::new(1, 0, 0)).unwrap(), 11.0);
        assert_eq!(m.score(&Triple::new(0, 1, 2)).unwrap(), 0.0);
        assert!(matches!(
            m.score(&Triple::new(3, 0, 0)),
            Err(Error::Bounds { .. })
        ));
    }

    #[test]
    fn variational_limits() {
        let mut m = model(true);
        set(&mut m, ENTITY_RECORD, vec![1.0, 2.0, 3.0, 4.0, 0.5, -1.0]);
        set(&mut m, RELATION_RECORD, vec![1.0, 1.0, 0.0, 0.0]);
        // logvar 0: every row is mean + 1.
        assert_eq!(
            m.score(&Triple::new(0, 0, 1)).unwrap(),
            2.0 * 2.0 * 4.0 + 3.0 * 2.0 * 5.0
        );
        set(&mut m, "ent_emb_logvar", vec![-800.0; 6]);
        set(&mut m, "rel_emb_logvar", vec![-800.0; 4]);
        assert_eq!(m.score(&Triple::new(0, 0, 1)).unwrap(), 11.0);
    }

    #[test]
    fn saturated_bce_and_zero_kl() {
        let mut m = model(true);
        set(&mut m, ENTITY_RECORD, vec![0.0; 6]);
        set(&mut m, RELATION_RECORD, vec![0.0; 4]);
        set(&mut m, "ent_emb_logvar", vec![0.0; 6]);
        set(&mut m, "rel_emb_logvar", vec![0.0; 4]);
        let tape = Tape::eval();
        let bound = m.params().bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, _, kl) = m
            .loss(
                &tape,
                &bound,
                &[Triple::new(0, 0, 1)],
                &[1.0],
                Noise::Fixed(0.0),
                &mut rng,
            )
            .unwrap();
        assert_eq!(kl, 0.0);

        // Rows of 5 give +50 for relation 0 and -50 for relation 1.
        let mut p = model(false);
        set(&mut p, ENTITY_RECORD, vec![(2.0f64).sqrt(); 6]);
        set(&mut p, RELATION_RECORD, vec![12.5, 12.5, -12.5, -12.5]);
        let tape = Tape::eval();
        let bound = p.params().bind(&tape);
        let t = [Triple::new(0, 0, 1), Triple::new(0, 1, 1)];
        assert!((p.score(&t[0]).unwrap() - 50.0).abs() < 1e-9);
        let (_, bce, _) = p
            .loss(&tape, &bound, &t, &[1.0, 0.0], Noise::Fixed(1.0), &mut rng)
            .unwrap();
        assert!(bce < 1e-6, "{bce}");
    }

    #[test]
    fn elbo_requires_variational() {
        let c = DistMultConfig {
            loss: LossKind::Elbo,
            ..DistMultConfig::new(3, 2)
        };
        assert!(DistMult::new(c, 0).is_err());
    }

    #[test]
    fn corruption_keeps_one_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Triple::new(1, 0, 2);
        let (all, labels) = with_negatives(&[t], 50, 10, &mut rng);
        assert_eq!(all.len(), 51);
        assert_eq!(labels.iter().sum::<f64>(), 1.0);
        for c in &all[1..] {
            assert_eq!(c.relation, 0);
            assert!(c.subject == 1 || c.object == 2);
        }
    }

    #[test]
    fn checkpoint_records() {
        let m = model(true);
        let ck = m.to_checkpoint(&[]);
        let names: Vec<&str> = ck.tensors.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["ent_emb", "rel_emb", "ent_emb_logvar", "rel_emb_logvar"]);
        let back = DistMult::from_checkpoint(&ck).unwrap();
        assert_eq!(back.config(), m.config());
    }
}

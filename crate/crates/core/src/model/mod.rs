//! Relational graph VAE: encoder, latent sampling, decoder and losses.

mod loss;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use loss::{
    activate, kl_divergence, loss_matched, loss_standard, loss_with_permutations, LossOutput, PROB_CLIP,
};
pub use train::{train_rgvae, train_step, EpochStats, StepStats, TrainConfig};

use crate::error::{Error, Result};
use crate::kg::{argmax, DenseGraph, SparseGraph, Triple};
use crate::matching::DEFAULT_ITERATIONS;
use crate::tensor::{init, Checkpoint, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EncoderKind {
    #[default]
    Mlp,
    Gcn,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Mlp => "mlp",
            EncoderKind::Gcn => "gcn",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(EncoderKind::Mlp),
            "gcn" => Ok(EncoderKind::Gcn),
            other => Err(Error::Unknown {
                what: "encoder",
                name: other.into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgvaeConfig {
    /// Nodes per graph.
    pub n: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub d_z: usize,
    pub d_h: usize,
    pub dropout: f64,
    pub beta: f64,
    pub delta: f64,
    /// Use the graph-matched loss.
    pub perminv: bool,
    pub encoder: EncoderKind,
    /// Clip the global gradient norm to 1 before each step.
    pub clipgrad: bool,
    pub match_iterations: usize,
}

impl RgvaeConfig {
    pub fn new(num_entities: usize, num_relations: usize) -> Self {
        RgvaeConfig {
            n: 2,
            num_entities,
            num_relations,
            d_z: 100,
            d_h: 512,
            dropout: 0.2,
            beta: 1.0,
            delta: 0.0,
            perminv: true,
            encoder: EncoderKind::Mlp,
            clipgrad: true,
            match_iterations: DEFAULT_ITERATIONS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n", self.n),
            ("num_entities", self.num_entities),
            ("num_relations", self.num_relations),
            ("d_z", self.d_z),
            ("d_h", self.d_h),
            ("match_iterations", self.match_iterations),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.beta >= 0.0) || !(self.delta >= 0.0) {
            return Err(Error::contract("beta and delta must be non-negative"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        input_dim(self.n, self.num_entities, self.num_relations)
    }

    /// Flat `key=value` form stored in checkpoints.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("n", self.n.to_string()),
            ("num_entities", self.num_entities.to_string()),
            ("num_relations", self.num_relations.to_string()),
            ("d_z", self.d_z.to_string()),
            ("d_h", self.d_h.to_string()),
            ("dropout", self.dropout.to_string()),
            ("beta", self.beta.to_string()),
            ("delta", self.delta.to_string()),
            ("perminv", self.perminv.to_string()),
            ("encoder", self.encoder.to_string()),
            ("clipgrad", self.clipgrad.to_string()),
            ("match_iterations", self.match_iterations.to_string()),
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
        let c = RgvaeConfig {
            n: field(pairs, "n")?,
            num_entities: field(pairs, "num_entities")?,
            num_relations: field(pairs, "num_relations")?,
            d_z: field(pairs, "d_z")?,
            d_h: field(pairs, "d_h")?,
            dropout: field(pairs, "dropout")?,
            beta: field(pairs, "beta")?,
            delta: field(pairs, "delta")?,
            perminv: field(pairs, "perminv")?,
            encoder: field(pairs, "encoder")?,
            clipgrad: field(pairs, "clipgrad")?,
            match_iterations: field(pairs, "match_iterations")?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Width of a flattened `(A, E, F)` graph: `n² + n²·d_r + n·d_e`.
pub fn input_dim(n: usize, num_entities: usize, num_relations: usize) -> usize {
    SparseGraph::input_width(n, num_entities, num_relations)
}

/// Latent statistics and samples for a batch, each `batch x d_z`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mean: Tensor,
    pub logvar: Tensor,
    pub eps: Tensor,
    pub z: Tensor,
}

/// `z = mean + exp(logvar / 2) * eps`, drawing `eps ~ N(0, 1)` unless given.
pub fn reparametrize<R: Rng + ?Sized>(
    mean: &Tensor,
    logvar: &Tensor,
    eps: Option<&Tensor>,
    rng: &mut R,
) -> Result<LatentCode> {
    if mean.shape() != logvar.shape() {
        return Err(Error::shape("reparametrize", mean.shape(), logvar.shape()));
    }
    let eps = match eps {
        Some(e) if e.shape() != mean.shape() => {
            return Err(Error::shape("reparametrize noise", mean.shape(), e.shape()))
        }
        Some(e) => e.clone(),
        None => standard_normal(mean.shape(), rng),
    };
    let z = Tensor::from_fn(mean.shape(), |i| {
        mean.data()[i] + (0.5 * logvar.data()[i]).exp() * eps.data()[i]
    });
    Ok(LatentCode {
        mean: mean.clone(),
        logvar: logvar.clone(),
        eps,
        z,
    })
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Draws a discrete graph from activated decoder output: Bernoulli edges,
/// argmax attributes.
pub fn sample_discrete<R: Rng + ?Sized>(pred: &DenseGraph, rng: &mut R) -> SparseGraph {
    let k = pred.k;
    let nodes = (0..k).map(|a| argmax(pred.node_row(a))).collect();
    let edges = (0..k * k)
        .map(|ab| {
            let (a, b) = (ab / k, ab % k);
            (rng.random::<f64>() < pred.adj(a, b)).then(|| argmax(pred.edge_row(a, b)))
        })
        .collect();
    SparseGraph::new(pred.num_entities, pred.num_relations, nodes, edges)
        .expect("indices come from the dense shapes")
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: usize,
    bias: usize,
}

impl Linear {
    fn apply<'t>(&self, bound: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul(&bound[self.weight])?.add(&bound[self.bias])
    }
}

/// Mean and log-variance of a batch.
#[derive(Clone, Copy, Debug)]
pub struct Encoded<'t> {
    pub mean: Var<'t>,
    pub logvar: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Rgvae {
    config: RgvaeConfig,
    params: ParamSet,
    encoder: Vec<Linear>,
    decoder: Vec<Linear>,
}

impl Rgvae {
    /// Fresh model: Xavier-uniform weights with gain 0.01, zero biases.
    pub fn new(config: RgvaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut layer =
            |params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize| -> Result<Linear> {
                let w = init::xavier_uniform(&[fan_in, fan_out], init::DEFAULT_GAIN, &mut rng)?;
                Ok(Linear {
                    weight: params.add(format!("{name}.weight"), w)?,
                    bias: params.add(format!("{name}.bias"), Tensor::zeros([fan_out]))?,
                })
            };
        let (n, dh, dz) = (config.n, config.d_h, config.d_z);
        let d_in = config.input_dim();
        let encoder = match config.encoder {
            EncoderKind::Mlp => vec![
                layer(&mut params, "enc.fc1", d_in, 2 * dh)?,
                layer(&mut params, "enc.fc2", 2 * dh, dh)?,
                layer(&mut params, "enc.fc3", dh, 2 * dz)?,
            ],
            EncoderKind::Gcn => {
                let features = config.num_entities + n * config.num_relations;
                vec![
                    layer(&mut params, "enc.gc1", features, dh)?,
                    layer(&mut params, "enc.gc2", dh, dh)?,
                    layer(&mut params, "enc.fc", n * dh, 2 * dz)?,
                ]
            }
        };
        let decoder = vec![
            layer(&mut params, "dec.fc1", dz, dh)?,
            layer(&mut params, "dec.fc2", dh, 2 * dh)?,
            layer(&mut params, "dec.fc3", 2 * dh, d_in)?,
        ];
        Ok(Rgvae {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &RgvaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Flattened `(A, E, F)` rows, `batch x input_dim`.
    pub fn flatten_graphs(&self, graphs: &[SparseGraph]) -> Result<Tensor> {
        let d_in = self.config.input_dim();
        let mut data = vec![0.0; graphs.len() * d_in];
        for (g, row) in graphs.iter().zip(data.chunks_mut(d_in)) {
            self.check_graph(g)?;
            g.write_flat(row);
        }
        Tensor::new([graphs.len(), d_in], data)
    }

    fn check_graph(&self, g: &SparseGraph) -> Result<()> {
        let c = &self.config;
        if g.n() != c.n || g.num_entities() != c.num_entities || g.num_relations() != c.num_relations {
            return Err(Error::shape(
                "graph",
                &[c.n, c.num_entities, c.num_relations],
                &[g.n(), g.num_entities(), g.num_relations()],
            ));
        }
        Ok(())
    }

    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        bound: &[Var<'t>],
        graphs: &[SparseGraph],
    ) -> Result<Encoded<'t>> {
        if graphs.is_empty() {
            return Err(Error::contract("cannot encode an empty batch"));
        }
        let out = match self.config.encoder {
            EncoderKind::Mlp => self.encode_mlp(tape, bound, graphs)?,
            EncoderKind::Gcn => self.encode_gcn(tape, bound, graphs)?,
        };
        let dz = self.config.d_z;
        Ok(Encoded {
            mean: out.narrow(0, dz)?,
            logvar: out.narrow(dz, dz)?,
        })
    }

    fn encode_mlp<'t>(&self, tape: &'t Tape, bound: &[Var<'t>], graphs: &[SparseGraph]) -> Result<Var<'t>> {
        let x = tape.constant(self.flatten_graphs(graphs)?);
        let [fc1, fc2, fc3] = [self.encoder[0], self.encoder[1], self.encoder[2]];
        let h = fc1.apply(bound, &x)?.relu().dropout(self.config.dropout)?;
        let h = fc2.apply(bound, &h)?.relu();
        fc3.apply(bound, &h)
    }

    fn encode_gcn<'t>(&self, tape: &'t Tape, bound: &[Var<'t>], graphs: &[SparseGraph]) -> Result<Var<'t>> {
        for g in graphs {
            self.check_graph(g)?;
        }
        let c = &self.config;
        let (b, n, dh) = (graphs.len(), c.n, c.d_h);
        let features = c.num_entities + n * c.num_relations;
        let x = tape.constant(Tensor::new([b * n, features], gcn_features(graphs))?);
        let a_hat = tape.constant(Tensor::new([b, n, n], normalized_adjacency(graphs))?);
        let [gc1, gc2, fc] = [self.encoder[0], self.encoder[1], self.encoder[2]];

        let propagate = |h: &Var<'t>, layer: Linear| -> Result<Var<'t>> {
            let hw = h.matmul(&bound[layer.weight])?.reshape(vec![b, n, dh])?;
            a_hat.bmm(&hw)?.add(&bound[layer.bias])
        };
        let h1 = propagate(&x, gc1)?.relu().dropout(c.dropout)?;
        let h1 = h1.reshape(vec![b * n, dh])?;
        let h2 = propagate(&h1, gc2)?.relu();
        fc.apply(bound, &h2.reshape(vec![b, n * dh])?)
    }

    /// Decoder logits, `batch x input_dim`, laid out as `A | E | F`.
    pub fn decode<'t>(&self, bound: &[Var<'t>], z: &Var<'t>) -> Result<Var<'t>> {
        let [fc1, fc2, fc3] = [self.decoder[0], self.decoder[1], self.decoder[2]];
        let h = fc1.apply(bound, z)?.relu();
        let h = fc2.apply(bound, &h)?.relu().dropout(self.config.dropout)?;
        fc3.apply(bound, &h)
    }

    /// Latent statistics in evaluation mode.
    pub fn encode_mean(&self, graphs: &[SparseGraph]) -> Result<(Tensor, Tensor)> {
        let tape = Tape::eval();
        let bound = self.params.bind(&tape);
        let e = self.encode(&tape, &bound, graphs)?;
        Ok(((*e.mean.value()).clone(), (*e.logvar.value()).clone()))
    }

    /// Activated decoder output for latent rows `batch x d_z`.
    pub fn decode_latent(&self, z: &Tensor) -> Result<Vec<DenseGraph>> {
        if z.rank() != 2 || z.shape()[1] != self.config.d_z {
            return Err(Error::shape("decode_latent", &[0, self.config.d_z], z.shape()));
        }
        let tape = Tape::eval();
        let bound = self.params.bind(&tape);
        let logits = self.decode(&bound, &tape.constant(z.clone()))?;
        activate(&logits.value(), &self.config)
    }

    /// Per-graph objective (reconstruction plus regularization) in
    /// evaluation mode with the mean latent.
    pub fn graph_losses(&self, graphs: &[SparseGraph]) -> Result<Vec<f64>> {
        let tape = Tape::eval();
        let bound = self.params.bind(&tape);
        let enc = self.encode(&tape, &bound, graphs)?;
        let logits = self.decode(&bound, &enc.mean)?;
        let out = if self.config.perminv {
            loss_matched(graphs, &logits, &enc.mean, &enc.logvar, &self.config)?
        } else {
            loss_standard(graphs, &logits, &enc.mean, &enc.logvar, &self.config)?
        };
        Ok(out.per_graph)
    }

    /// KL of each graph's posterior to the prior, evaluation mode.
    pub fn posterior_kl(&self, graphs: &[SparseGraph]) -> Result<Vec<f64>> {
        let tape = Tape::eval();
        let bound = self.params.bind(&tape);
        let enc = self.encode(&tape, &bound, graphs)?;
        Ok(kl_divergence(&enc.mean, &enc.logvar)?.value().data().to_vec())
    }

    /// Single-triple graphs for a batch of triples.
    pub fn triple_graphs(&self, triples: &[Triple]) -> Result<Vec<SparseGraph>> {
        let c = &self.config;
        crate::kg::triples_to_graphs(triples, c.n, c.num_entities, c.num_relations)
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
        let config = RgvaeConfig::from_pairs(&ck.config)?;
        let mut model = Rgvae::new(config, 0)?;
        model.params.load_records(&ck.tensors)?;
        Ok(model)
    }
}

/// Per-node rows `[F_i | E_i,·,·]`, `(batch * n) x (d_e + n * d_r)`.
fn gcn_features(graphs: &[SparseGraph]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in graphs {
        let (n, de, dr) = (g.n(), g.num_entities(), g.num_relations());
        for i in 0..n {
            let mut row = vec![0.0; de + n * dr];
            row[g.node(i)] = 1.0;
            for j in 0..n {
                if let Some(r) = g.edge(i, j) {
                    row[de + j * dr + r] = 1.0;
                }
            }
            out.extend(row);
        }
    }
    out
}

/// Row-normalized `A + I` per graph, `batch x n x n`.
pub fn normalized_adjacency(graphs: &[SparseGraph]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in graphs {
        let n = g.n();
        for i in 0..n {
            let row: Vec<f64> = (0..n)
                .map(|j| f64::from(u8::from(g.edge(i, j).is_some())) + f64::from(u8::from(i == j)))
                .collect();
            let s: f64 = row.iter().sum();
            out.extend(row.iter().map(|v| v / s));
        }
    }
    out
}

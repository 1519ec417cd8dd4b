//! Finite-difference checks over every differentiable op and the full
//! model losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::distmult::{DistMult, DistMultConfig, LossKind, Noise};
use crate::error::Result;
use crate::kg::{triples_to_graphs, SparseGraph, Triple};
use crate::matching::{match_graphs, PermutationMatrix};
use crate::model::{
    activate, kl_divergence, loss_standard, loss_with_permutations, EncoderKind, Rgvae, RgvaeConfig,
};
use crate::tensor::gradcheck::{check_gradients, DEFAULT_STEP};
use crate::tensor::{Tape, Tensor, Var};

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

type Check = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn randn(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let x: f64 = StandardNormal.sample(rng);
        scale * x
    })
}

/// Uniform in `[lo, hi)`, for ops with restricted or kinked domains.
fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Fixed weights so every output coordinate carries gradient.
fn weights(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    randn(shape, 1.0, rng)
}

fn reduce<'t>(v: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    Ok(v.mul(&v.tape().constant(w.clone()))?.sum())
}

fn op_cases() -> Vec<(&'static str, Check)> {
    fn unary(shape: &'static [usize], lo: f64, hi: f64, f: for<'t> fn(&Var<'t>) -> Result<Var<'t>>) -> Check {
        Box::new(move |rng| {
            let x = uniform(shape, lo, hi, rng);
            let out = {
                let t = Tape::eval();
                f(&t.leaf(x.clone()))?.shape()
            };
            let w = weights(&out, rng);
            check_gradients(|_, v| reduce(f(&v[0])?, &w), &[x], DEFAULT_STEP)
        })
    }
    fn binary(
        a: &'static [usize],
        b: &'static [usize],
        out: &'static [usize],
        f: for<'t> fn(&Var<'t>, &Var<'t>) -> Result<Var<'t>>,
    ) -> Check {
        Box::new(move |rng| {
            let x = randn(a, 1.0, rng);
            let y = randn(b, 1.0, rng);
            let w = weights(out, rng);
            check_gradients(|_, v| reduce(f(&v[0], &v[1])?, &w), &[x, y], DEFAULT_STEP)
        })
    }
    vec![
        ("add", binary(&[3, 4], &[3, 4], &[3, 4], |a, b| a.add(b))),
        ("add_broadcast", binary(&[3, 4], &[4], &[3, 4], |a, b| a.add(b))),
        ("sub", binary(&[3, 4], &[3, 4], &[3, 4], |a, b| a.sub(b))),
        ("mul", binary(&[3, 4], &[3, 4], &[3, 4], |a, b| a.mul(b))),
        ("matmul", binary(&[3, 5], &[5, 2], &[3, 2], |a, b| a.matmul(b))),
        ("bmm", binary(&[2, 3, 4], &[2, 4, 3], &[2, 3, 3], |a, b| a.bmm(b))),
        ("scale", unary(&[3, 4], -2.0, 2.0, |a| Ok(a.scale(-1.7)))),
        ("neg", unary(&[3, 4], -2.0, 2.0, |a| Ok(a.neg()))),
        ("add_scalar", unary(&[3, 4], -2.0, 2.0, |a| Ok(a.add_scalar(0.3)))),
        ("one_minus", unary(&[3, 4], -2.0, 2.0, |a| Ok(a.one_minus()))),
        ("relu", unary(&[3, 4], -2.0, 2.0, |a| Ok(a.relu()))),
        ("sigmoid", unary(&[3, 4], -4.0, 4.0, |a| Ok(a.sigmoid()))),
        ("exp", unary(&[3, 4], -2.0, 2.0, |a| Ok(a.exp()))),
        ("log", unary(&[3, 4], 0.2, 3.0, |a| Ok(a.log()))),
        ("abs", unary(&[3, 4], -2.0, 2.0, |a| Ok(a.abs()))),
        ("clamp", unary(&[3, 4], -2.0, 2.0, |a| Ok(a.clamp(-1.0, 1.0)))),
        ("softmax", unary(&[3, 5], -3.0, 3.0, |a| Ok(a.softmax()))),
        ("sum", unary(&[3, 4], -2.0, 2.0, |a| Ok(a.scale(1.0).sum()))),
        ("mean", unary(&[3, 4], -2.0, 2.0, |a| Ok(a.mean()))),
        ("sum_last", unary(&[3, 4], -2.0, 2.0, |a| Ok(a.sum_last()))),
        ("reshape", unary(&[3, 4], -2.0, 2.0, |a| a.reshape(vec![2, 6]))),
        ("flatten", unary(&[2, 3, 2], -2.0, 2.0, |a| a.flatten())),
        ("narrow", unary(&[3, 6], -2.0, 2.0, |a| a.narrow(1, 3))),
        (
            "concat",
            binary(&[3, 2], &[3, 4], &[3, 6], |a, b| Var::concat(&[*a, *b])),
        ),
        (
            "gather",
            unary(&[4, 3], -2.0, 2.0, |a| a.gather(vec![5, 0, 5, 11, 3, 7], [2, 3])),
        ),
        (
            "dropout",
            Box::new(|rng| {
                // A training tape with a fixed seed reproduces the same mask
                // in every evaluation.
                let x = randn(&[3, 4], 1.0, rng);
                let w = weights(&[3, 4], rng);
                check_gradients(
                    |_, v| {
                        let t = Tape::training(17);
                        let y = t.leaf((*v[0].value()).clone()).dropout(0.5)?;
                        let mask = y
                            .value()
                            .zip_map(&v[0].value(), |a, b| if b == 0.0 { 0.0 } else { a / b })?;
                        reduce(v[0].mul(&v[0].tape().constant(mask))?, &w)
                    },
                    &[x],
                    DEFAULT_STEP,
                )
            }),
        ),
    ]
}

fn small_config(encoder: EncoderKind) -> RgvaeConfig {
    RgvaeConfig {
        d_z: 3,
        d_h: 4,
        encoder,
        dropout: 0.0,
        ..RgvaeConfig::new(4, 2)
    }
}

fn batch(config: &RgvaeConfig) -> Result<Vec<SparseGraph>> {
    triples_to_graphs(
        &[Triple::new(0, 1, 2), Triple::new(3, 0, 1), Triple::new(2, 1, 2)],
        config.n,
        config.num_entities,
        config.num_relations,
    )
}

/// A model whose parameters are standard normal scaled by `scale`.
fn dense_model(config: RgvaeConfig, scale: f64, rng: &mut ChaCha8Rng) -> Result<Rgvae> {
    let mut m = Rgvae::new(config, 0)?;
    let records: Vec<(String, Tensor)> = m
        .params()
        .records()
        .into_iter()
        .map(|(n, t)| (n, randn(t.shape(), scale, rng)))
        .collect();
    m.params_mut().load_records(&records)?;
    Ok(m)
}

fn model_case(encoder: EncoderKind) -> Check {
    Box::new(move |rng| {
        let m = dense_model(small_config(encoder), 0.5, rng)?;
        let graphs = batch(m.config())?;
        let eps = randn(&[graphs.len(), m.config().d_z], 1.0, rng);
        let points: Vec<Tensor> = m.params().records().into_iter().map(|(_, t)| t).collect();
        check_gradients(
            |tape, bound| {
                let enc = m.encode(tape, bound, &graphs)?;
                let z = enc
                    .mean
                    .add(&enc.logvar.scale(0.5).exp().mul(&tape.constant(eps.clone()))?)?;
                let logits = m.decode(bound, &z)?;
                Ok(loss_standard(&graphs, &logits, &enc.mean, &enc.logvar, m.config())?.total)
            },
            &points,
            DEFAULT_STEP,
        )
    })
}

fn loss_inputs(config: &RgvaeConfig, b: usize, rng: &mut ChaCha8Rng) -> [Tensor; 3] {
    [
        randn(&[b, config.input_dim()], 1.0, rng),
        randn(&[b, config.d_z], 1.0, rng),
        randn(&[b, config.d_z], 0.5, rng),
    ]
}

fn loss_cases() -> Vec<(&'static str, Check)> {
    vec![
        (
            "loss_standard",
            Box::new(|rng| {
                let c = RgvaeConfig {
                    delta: 0.5,
                    beta: 2.0,
                    ..small_config(EncoderKind::Mlp)
                };
                let graphs = batch(&c)?;
                let points = loss_inputs(&c, graphs.len(), rng);
                check_gradients(
                    |_, v| Ok(loss_standard(&graphs, &v[0], &v[1], &v[2], &c)?.total),
                    &points,
                    DEFAULT_STEP,
                )
            }),
        ),
        (
            "loss_matched",
            Box::new(|rng| {
                let c = small_config(EncoderKind::Mlp);
                let graphs = batch(&c)?;
                let points = loss_inputs(&c, graphs.len(), rng);
                // X is computed once and frozen.
                let mut perms = match_graphs(&graphs, &activate(&points[0], &c)?, c.match_iterations)?;
                perms[0] = PermutationMatrix::from_columns(vec![1, 0], 2)?;
                check_gradients(
                    |_, v| Ok(loss_with_permutations(&graphs, &v[0], &v[1], &v[2], &c, &perms)?.total),
                    &points,
                    DEFAULT_STEP,
                )
            }),
        ),
        (
            "kl_divergence",
            Box::new(|rng| {
                let points = [randn(&[3, 4], 1.0, rng), randn(&[3, 4], 0.5, rng)];
                let w = weights(&[3], rng);
                check_gradients(
                    |_, v| reduce(kl_divergence(&v[0], &v[1])?, &w),
                    &points,
                    DEFAULT_STEP,
                )
            }),
        ),
        ("encoder_mlp_decoder", model_case(EncoderKind::Mlp)),
        ("encoder_gcn_decoder", model_case(EncoderKind::Gcn)),
        ("distmult_bce", distmult_case(false, LossKind::Bce)),
        ("vdistmult_elbo", distmult_case(true, LossKind::Elbo)),
    ]
}

fn distmult_case(variational: bool, loss: LossKind) -> Check {
    Box::new(move |rng| {
        let config = DistMultConfig {
            d_emb: 3,
            variational,
            loss,
            beta: 0.5,
            ..DistMultConfig::new(4, 2)
        };
        let m = DistMult::new(config, 1)?;
        let points: Vec<Tensor> = m
            .params()
            .records()
            .into_iter()
            .map(|(_, t)| randn(t.shape(), 0.5, rng))
            .collect();
        let triples = [Triple::new(0, 1, 2), Triple::new(3, 0, 1), Triple::new(2, 1, 3)];
        let labels = [1.0, 0.0, 1.0];
        check_gradients(
            |tape, bound| {
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                Ok(
                    m.loss(tape, bound, &triples, &labels, Noise::Fixed(0.7), &mut unused)?
                        .0,
                )
            },
            &points,
            DEFAULT_STEP,
        )
    })
}

/// Runs every case with inputs drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases()
        .into_iter()
        .chain(loss_cases())
        .map(|(name, check)| {
            Ok(GradCase {
                name: name.to_string(),
                max_rel_error: check(&mut rng)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_within_tolerance() {
        for seed in 0..3 {
            for case in gradient_suite(seed).unwrap() {
                assert!(case.passed(), "seed {seed}: {} {}", case.name, case.max_rel_error);
            }
        }
    }
}

//! Reconstruction and regularization terms.

use super::RgvaeConfig;
use crate::error::{Error, Result};
use crate::kg::{DenseGraph, SparseGraph};
use crate::matching::{match_graphs, PermutationMatrix};
use crate::tensor::{sigmoid, softmax_in_place, Tape, Tensor, Var};

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-7;

pub struct LossOutput<'t> {
    /// Batch mean of `per_graph`.
    pub total: Var<'t>,
    pub per_graph: Vec<f64>,
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
    pub permutations: Option<Vec<PermutationMatrix>>,
}

/// Sigmoid adjacency and softmax attributes for a batch of flat logits.
pub fn activate(logits: &Tensor, config: &RgvaeConfig) -> Result<Vec<DenseGraph>> {
    let (n, de, dr) = (config.n, config.num_entities, config.num_relations);
    let d_in = config.input_dim();
    if logits.rank() != 2 || logits.shape()[1] != d_in {
        return Err(Error::shape("activate", &[0, d_in], logits.shape()));
    }
    logits
        .data()
        .chunks(d_in)
        .map(|row| {
            let (a, rest) = row.split_at(n * n);
            let (e, f) = rest.split_at(n * n * dr);
            let mut e = e.to_vec();
            e.chunks_mut(dr).for_each(softmax_in_place);
            let mut f = f.to_vec();
            f.chunks_mut(de).for_each(softmax_in_place);
            DenseGraph::new(n, de, dr, a.iter().map(|&x| sigmoid(x)).collect(), e, f)
        })
        .collect()
}

/// Closed-form `KL(N(mean, exp(logvar)) || N(0, I))` per row.
pub fn kl_divergence<'t>(mean: &Var<'t>, logvar: &Var<'t>) -> Result<Var<'t>> {
    let inner = logvar.add_scalar(1.0).sub(&mean.mul(mean)?)?.sub(&logvar.exp())?;
    Ok(inner.sum_last().scale(-0.5))
}

/// Likelihood over the full adjacency with one `1/n²` weight.
pub fn loss_standard<'t>(
    targets: &[SparseGraph],
    logits: &Var<'t>,
    mean: &Var<'t>,
    logvar: &Var<'t>,
    config: &RgvaeConfig,
) -> Result<LossOutput<'t>> {
    combine(targets, logits, mean, logvar, config, None)
}

/// Graph-matched loss; permutations come from max-pool matching against the
/// activated prediction and carry no gradient.
pub fn loss_matched<'t>(
    targets: &[SparseGraph],
    logits: &Var<'t>,
    mean: &Var<'t>,
    logvar: &Var<'t>,
    config: &RgvaeConfig,
) -> Result<LossOutput<'t>> {
    let preds = activate(&logits.value(), config)?;
    if preds.len() != targets.len() {
        return Err(Error::shape("loss_matched", &[targets.len()], &[preds.len()]));
    }
    let perms = match_graphs(targets, &preds, config.match_iterations)?;
    loss_with_permutations(targets, logits, mean, logvar, config, &perms)
}

/// Matched loss under fixed permutations.
pub fn loss_with_permutations<'t>(
    targets: &[SparseGraph],
    logits: &Var<'t>,
    mean: &Var<'t>,
    logvar: &Var<'t>,
    config: &RgvaeConfig,
    perms: &[PermutationMatrix],
) -> Result<LossOutput<'t>> {
    if perms.len() != targets.len() {
        return Err(Error::shape("permutations", &[targets.len()], &[perms.len()]));
    }
    for p in perms {
        if p.n() != config.n || p.k() != config.n {
            return Err(Error::shape(
                "permutation",
                &[config.n, config.n],
                &[p.n(), p.k()],
            ));
        }
    }
    let mut out = combine(targets, logits, mean, logvar, config, Some(perms))?;
    out.permutations = Some(perms.to_vec());
    Ok(out)
}

fn combine<'t>(
    targets: &[SparseGraph],
    logits: &Var<'t>,
    mean: &Var<'t>,
    logvar: &Var<'t>,
    config: &RgvaeConfig,
    perms: Option<&[PermutationMatrix]>,
) -> Result<LossOutput<'t>> {
    let b = targets.len();
    if b == 0 {
        return Err(Error::contract("loss of an empty batch"));
    }
    let latent = [b, config.d_z];
    for v in [mean, logvar] {
        if v.shape() != latent {
            return Err(Error::shape("latent", &latent, &v.shape()));
        }
    }
    let recon = reconstruction(targets, logits, config, perms)?;
    let kl = kl_divergence(mean, logvar)?;
    let reg = kl.add_scalar(-config.delta).abs().scale(config.beta);
    let per_graph = recon.add(&reg)?;
    Ok(LossOutput {
        total: per_graph.mean(),
        per_graph: per_graph.value().data().to_vec(),
        recon: recon.value().data().to_vec(),
        kl: kl.value().data().to_vec(),
        permutations: None,
    })
}

/// Negative log-likelihood per graph. Target entries are placed in the
/// prediction's node order, so matching only changes which prediction
/// entries are read.
fn reconstruction<'t>(
    targets: &[SparseGraph],
    logits: &Var<'t>,
    config: &RgvaeConfig,
    perms: Option<&[PermutationMatrix]>,
) -> Result<Var<'t>> {
    let (n, de, dr) = (config.n, config.num_entities, config.num_relations);
    let b = targets.len();
    let d_in = config.input_dim();
    if logits.shape() != [b, d_in] {
        return Err(Error::shape("reconstruction logits", &[b, d_in], &logits.shape()));
    }
    let nn = n * n;
    let mut a_pos = vec![0.0; b * nn];
    let mut a_neg = vec![0.0; b * nn];
    let mut e_mask = vec![0.0; b * nn * dr];
    let mut f_mask = vec![0.0; b * n * de];
    for (g, t) in targets.iter().enumerate() {
        if t.n() != n || t.num_entities() != de || t.num_relations() != dr {
            return Err(Error::shape(
                "target",
                &[n, de, dr],
                &[t.n(), t.num_entities(), t.num_relations()],
            ));
        }
        let col = |i: usize| perms.map_or(i, |p| p[g].column(i));
        let weight = |a: usize, c: usize| match perms {
            None => 1.0 / nn as f64,
            Some(_) if a == c => 1.0 / n as f64,
            Some(_) => 1.0 / nn as f64,
        };
        for a in 0..n {
            for c in 0..n {
                a_neg[g * nn + a * n + c] = weight(a, c);
            }
        }
        let edges = t.edge_count().max(1) as f64;
        for i in 0..n {
            f_mask[g * n * de + col(i) * de + t.node(i)] = 1.0 / n as f64;
            for j in 0..n {
                if let Some(r) = t.edge(i, j) {
                    let ac = col(i) * n + col(j);
                    a_pos[g * nn + ac] = a_neg[g * nn + ac];
                    a_neg[g * nn + ac] = 0.0;
                    e_mask[(g * nn + ac) * dr + r] = 1.0 / edges;
                }
            }
        }
    }
    let tape: &'t Tape = logits.tape();
    let lo = PROB_CLIP;
    let hi = 1.0 - PROB_CLIP;

    let pa = logits.narrow(0, nn)?.sigmoid().clamp(lo, hi);
    let a_term = pa
        .log()
        .mul(&tape.constant(Tensor::new([b, nn], a_pos)?))?
        .add(
            &pa.one_minus()
                .log()
                .mul(&tape.constant(Tensor::new([b, nn], a_neg)?))?,
        )?
        .sum_last();

    let log_e = logits
        .narrow(nn, nn * dr)?
        .reshape(vec![b * nn, dr])?
        .softmax()
        .clamp(lo, hi)
        .log()
        .reshape(vec![b, nn * dr])?;
    let e_term = log_e
        .mul(&tape.constant(Tensor::new([b, nn * dr], e_mask)?))?
        .sum_last();

    let log_f = logits
        .narrow(nn + nn * dr, n * de)?
        .reshape(vec![b * n, de])?
        .softmax()
        .clamp(lo, hi)
        .log()
        .reshape(vec![b, n * de])?;
    let f_term = log_f
        .mul(&tape.constant(Tensor::new([b, n * de], f_mask)?))?
        .sum_last();

    Ok(a_term.add(&e_term)?.add(&f_term)?.neg())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triple;

    fn cfg() -> RgvaeConfig {
        RgvaeConfig {
            d_z: 2,
            ..RgvaeConfig::new(3, 2)
        }
    }

    fn kl_of(mean: &[f64], logvar: &[f64]) -> f64 {
        let tape = Tape::eval();
        let m = tape.leaf(Tensor::new([1, mean.len()], mean.to_vec()).unwrap());
        let l = tape.leaf(Tensor::new([1, logvar.len()], logvar.to_vec()).unwrap());
        kl_divergence(&m, &l).unwrap().value().item()
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_of(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((kl_of(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        // 0.5 * (e^1 - 1 - 1)
        assert!((kl_of(&[0.0], &[1.0]) - 0.5 * (1f64.exp() - 2.0)).abs() < 1e-12);
    }

    /// Logits whose activations reproduce `g` up to the clip.
    fn perfect_logits(g: &SparseGraph, c: &RgvaeConfig) -> Tensor {
        let big = 40.0;
        let mut flat = vec![0.0; c.input_dim()];
        g.write_flat(&mut flat);
        let nn = c.n * c.n;
        Tensor::new(
            [1, flat.len()],
            flat.iter()
                .enumerate()
                .map(|(i, &v)| {
                    if i < nn {
                        if v > 0.0 {
                            big
                        } else {
                            -big
                        }
                    } else {
                        v * big
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_reconstruction_is_near_zero() {
        let c = cfg();
        let g = crate::kg::triples_to_graphs(&[Triple::new(0, 1, 2)], 2, 3, 2).unwrap();
        let tape = Tape::eval();
        let logits = tape.leaf(perfect_logits(&g[0], &c));
        let z = tape.leaf(Tensor::zeros([1, 2]));
        let s = loss_standard(&g, &logits, &z, &z, &c).unwrap();
        let m = loss_matched(&g, &logits, &z, &z, &c).unwrap();
        assert!(s.recon[0].abs() < 1e-5, "{}", s.recon[0]);
        assert!(m.recon[0].abs() < 1e-5, "{}", m.recon[0]);
        assert!(m.permutations.unwrap()[0].is_identity());
    }

    #[test]
    fn beta_zero_is_pure_reconstruction_and_delta_truncates() {
        let c = RgvaeConfig { beta: 0.0, ..cfg() };
        let g = crate::kg::triples_to_graphs(&[Triple::new(0, 1, 2)], 2, 3, 2).unwrap();
        let tape = Tape::eval();
        let logits = tape.leaf(Tensor::from_fn([1, c.input_dim()], |i| (i as f64 * 0.37).sin()));
        let mean = tape.leaf(Tensor::new([1, 2], vec![1.0, 0.5]).unwrap());
        let logvar = tape.leaf(Tensor::new([1, 2], vec![0.2, -0.3]).unwrap());
        let out = loss_standard(&g, &logits, &mean, &logvar, &c).unwrap();
        assert_eq!(out.per_graph[0], out.recon[0]);

        let kl = out.kl[0];
        let c = RgvaeConfig {
            beta: 3.0,
            delta: kl,
            ..cfg()
        };
        let out = loss_standard(&g, &logits, &mean, &logvar, &c).unwrap();
        assert!((out.per_graph[0] - out.recon[0]).abs() < 1e-12);
    }

    #[test]
    fn activation_rows_are_distributions() {
        let c = cfg();
        let logits = Tensor::from_fn([2, c.input_dim()], |i| (i as f64).cos() * 3.0);
        for g in activate(&logits, &c).unwrap() {
            for a in 0..2 {
                assert!((g.node_row(a).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for b in 0..2 {
                    assert!((g.edge_row(a, b).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let c = cfg();
        let g = crate::kg::triples_to_graphs(&[Triple::new(0, 1, 2)], 2, 3, 2).unwrap();
        let tape = Tape::eval();
        let logits = tape.leaf(Tensor::from_fn([1, c.input_dim()], |i| {
            if i % 2 == 0 {
                1e4
            } else {
                -1e4
            }
        }));
        let z = tape.leaf(Tensor::zeros([1, 2]));
        for out in [
            loss_standard(&g, &logits, &z, &z, &c).unwrap(),
            loss_matched(&g, &logits, &z, &z, &c).unwrap(),
        ] {
            assert!(out.total.value().item().is_finite());
        }
    }
}

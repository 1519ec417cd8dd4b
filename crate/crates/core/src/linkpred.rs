//! Entity-ranking link prediction with MRR and Hits@k.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kg::{Triple, TripleStore};
use crate::model::Rgvae;

/// Anything that scores triples, higher meaning more plausible.
pub trait TripleScorer: Sync {
    fn score_batch(&self, triples: &[Triple]) -> Result<Vec<f64>>;
}

/// The graph VAE scores a triple by its negated per-graph loss.
impl TripleScorer for Rgvae {
    fn score_batch(&self, triples: &[Triple]) -> Result<Vec<f64>> {
        let graphs = self.triple_graphs(triples)?;
        Ok(self.graph_losses(&graphs)?.into_iter().map(|l| -l).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankRecord {
    pub triple: Triple,
    pub head_rank: f64,
    pub tail_rank: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LpReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
    pub filtered: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub filtered: bool,
    /// Candidates scored per call; has no effect on results.
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            filtered: true,
            chunk: 1024,
        }
    }
}

/// `1 + #better + #ties / 2`, the target excluded from the ties.
pub fn half_way_rank(target: f64, others: impl IntoIterator<Item = f64>) -> f64 {
    let (mut better, mut ties) = (0usize, 0usize);
    for s in others {
        if s > target {
            better += 1;
        } else if s == target {
            ties += 1;
        }
    }
    1.0 + better as f64 + ties as f64 / 2.0
}

fn score_all(scorer: &dyn TripleScorer, candidates: &[Triple], chunk: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(candidates.len());
    for part in candidates.chunks(chunk.max(1)) {
        let s = scorer.score_batch(part)?;
        if s.len() != part.len() {
            return Err(Error::shape("scorer output", &[part.len()], &[s.len()]));
        }
        if let Some(bad) = s.iter().find(|v| v.is_nan()) {
            return Err(Error::contract(format!("scorer returned {bad}")));
        }
        out.extend(s);
    }
    Ok(out)
}

/// Head and tail rank of one triple against every entity.
pub fn rank_triple(
    t: &Triple,
    scorer: &dyn TripleScorer,
    store: &TripleStore,
    options: EvalOptions,
) -> Result<RankRecord> {
    store.check(t)?;
    let de = store.num_entities();
    let side = |make: &dyn Fn(usize) -> Triple, target: usize| -> Result<f64> {
        let candidates: Vec<Triple> = (0..de).map(make).collect();
        let scores = score_all(scorer, &candidates, options.chunk)?;
        let others = (0..de)
            .filter(|&e| e != target)
            .filter(|&e| !(options.filtered && store.is_known(&candidates[e])));
        Ok(half_way_rank(
            scores[target],
            others.map(|e| scores[e]).collect::<Vec<_>>(),
        ))
    };
    let tail_rank = side(&|e| Triple::new(t.subject, t.relation, e), t.object)?;
    let head_rank = side(&|e| Triple::new(e, t.relation, t.object), t.subject)?;
    Ok(RankRecord {
        triple: *t,
        head_rank,
        tail_rank,
    })
}

pub fn report_from_ranks(ranks: &[RankRecord], filtered: bool) -> Result<LpReport> {
    if ranks.is_empty() {
        return Err(Error::contract("no triples to evaluate"));
    }
    let sides = 2.0 * ranks.len() as f64;
    let both = |f: &dyn Fn(f64) -> f64| -> f64 {
        ranks.iter().map(|r| f(r.head_rank) + f(r.tail_rank)).sum::<f64>() / sides
    };
    let hits = |k: f64| both(&|r| f64::from(u8::from(r <= k)));
    Ok(LpReport {
        mrr: both(&|r| 1.0 / r),
        hits1: hits(1.0),
        hits3: hits(3.0),
        hits10: hits(10.0),
        count: ranks.len(),
        filtered,
    })
}

/// Ranks every triple (in parallel, results in input order) and aggregates.
pub fn evaluate(
    triples: &[Triple],
    scorer: &dyn TripleScorer,
    store: &TripleStore,
    options: EvalOptions,
) -> Result<(LpReport, Vec<RankRecord>)> {
    if triples.is_empty() {
        return Err(Error::contract("no triples to evaluate"));
    }
    let ranks = triples
        .par_iter()
        .map(|t| rank_triple(t, scorer, store, options))
        .collect::<Result<Vec<_>>>()?;
    Ok((report_from_ranks(&ranks, options.filtered)?, ranks))
}

/// `floor(fraction * len)` triples drawn without replacement, in their
/// original order.
pub fn subset_sample(split: &[Triple], fraction: f64, seed: u64) -> Result<Vec<Triple>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!("fraction {fraction} not in (0, 1]")));
    }
    let size = (fraction * split.len() as f64).floor() as usize;
    if size == split.len() {
        return Ok(split.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, split.len(), size).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| split[i]).collect())
}

impl LpReport {
    /// `key=value` lines, preceded by the given header pairs.
    pub fn write_text<W: Write>(&self, header: &[(String, String)], w: &mut W) -> Result<()> {
        for (k, v) in header {
            writeln!(w, "{k}={v}")?;
        }
        writeln!(w, "filtered={}", self.filtered)?;
        writeln!(w, "count={}", self.count)?;
        writeln!(w, "mrr={:.6}", self.mrr)?;
        writeln!(w, "hits@1={:.6}", self.hits1)?;
        writeln!(w, "hits@3={:.6}", self.hits3)?;
        writeln!(w, "hits@10={:.6}", self.hits10)?;
        Ok(())
    }
}

pub fn write_ranks_tsv<W: Write>(ranks: &[RankRecord], w: &mut W) -> Result<()> {
    writeln!(w, "subject\trelation\tobject\thead_rank\ttail_rank")?;
    for r in ranks {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            r.triple.subject, r.triple.relation, r.triple.object, r.head_rank, r.tail_rank
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_way_examples() {
        assert_eq!(half_way_rank(9.0, [1.0, 2.0]), 1.0);
        // Target among three 5s, one 3.
        assert_eq!(half_way_rank(5.0, [5.0, 5.0, 3.0]), 2.0);
        assert_eq!(half_way_rank(0.0, [1.0, 0.0]), 2.5);
    }

    fn rec(h: f64, t: f64) -> RankRecord {
        RankRecord {
            triple: Triple::new(0, 0, 0),
            head_rank: h,
            tail_rank: t,
        }
    }

    #[test]
    fn metric_arithmetic() {
        let r = report_from_ranks(&[rec(1.0, 1.0)], true).unwrap();
        assert_eq!((r.mrr, r.hits1, r.hits3, r.hits10), (1.0, 1.0, 1.0, 1.0));
        let r = report_from_ranks(&[rec(2.0, 4.0)], true).unwrap();
        assert_eq!(r.mrr, 0.375);
        let r = report_from_ranks(&[rec(3.0, 3.0)], true).unwrap();
        assert_eq!((r.hits1, r.hits3, r.hits10), (0.0, 1.0, 1.0));
        assert!(report_from_ranks(&[], true).is_err());
    }

    #[test]
    fn subset_sizes() {
        let split: Vec<Triple> = (0..300).map(|i| Triple::new(i, 0, i)).collect();
        assert_eq!(subset_sample(&split, 1.0, 1).unwrap(), split);
        let a = subset_sample(&split, 1.0 / 3.0, 4).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, subset_sample(&split, 1.0 / 3.0, 4).unwrap());
        assert_eq!(subset_sample(&split, 0.333, 4).unwrap().len(), 99);
        assert!(subset_sample(&split, 0.0, 1).is_err());
        assert!(subset_sample(&split, 1.5, 1).is_err());
    }
}

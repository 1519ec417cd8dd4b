//! Max-pool graph matching between a discrete target and a continuous
//! prediction, and the permutations it produces.
//!
//! Matrices `X` are `n x k` with rows indexing target nodes and columns
//! indexing prediction nodes: `X[i, a] = 1` pairs target node `i` with
//! prediction node `a`.

mod hungarian;

use rayon::prelude::*;

pub use hungarian::{hungarian_assign, Assignment};

use crate::error::{Error, Result};
use crate::kg::{DenseGraph, SparseGraph};
use crate::tensor::Tensor;

/// Iteration count used when none is configured.
pub const DEFAULT_ITERATIONS: usize = 40;

/// Edge and node affinities for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityPair {
    /// `batch x n x n x k x k`
    pub edge: Tensor,
    /// `batch x n x k`
    pub node: Tensor,
}

impl AffinityPair {
    pub fn batch(&self) -> usize {
        self.node.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.node.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.node.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    /// `batch x n x k`, entries >= 0, unit Frobenius norm per element.
    pub x: Tensor,
    /// Elements whose affinities vanished; their `x` is uniform.
    pub degenerate: Vec<bool>,
}

/// Binary `n x k` matrix with one 1 per row and at most one per column,
/// stored as the column chosen for each row.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PermutationMatrix {
    k: usize,
    columns: Vec<usize>,
    degenerate: bool,
}

impl PermutationMatrix {
    pub fn identity(n: usize, k: usize) -> Result<Self> {
        Self::from_columns((0..n).collect(), k)
    }

    pub fn from_columns(columns: Vec<usize>, k: usize) -> Result<Self> {
        let mut seen = vec![false; k];
        for &c in &columns {
            if c >= k {
                return Err(Error::Bounds {
                    what: "permutation column",
                    index: c,
                    size: k,
                });
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::contract(format!("column {c} assigned twice")));
            }
        }
        Ok(PermutationMatrix {
            k,
            columns,
            degenerate: false,
        })
    }

    pub fn n(&self) -> usize {
        self.columns.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Prediction node paired with target node `i`.
    pub fn column(&self, i: usize) -> usize {
        self.columns[i]
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    /// Set when the matching had no signal and fell back to the identity.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn is_identity(&self) -> bool {
        self.columns.iter().enumerate().all(|(i, &c)| i == c)
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros([self.n(), self.k]);
        for (i, &c) in self.columns.iter().enumerate() {
            t.data_mut()[i * self.k + c] = 1.0;
        }
        t
    }
}

fn check_pair(target: &SparseGraph, pred: &DenseGraph) -> Result<()> {
    if target.num_entities() != pred.num_entities || target.num_relations() != pred.num_relations {
        return Err(Error::shape(
            "attribute dimensions",
            &[target.num_entities(), target.num_relations()],
            &[pred.num_entities, pred.num_relations],
        ));
    }
    Ok(())
}

/// Affinities between each target and prediction of a batch.
///
/// Self-loops are excluded from the edge term on both sides, while the
/// prediction's node existence `Ã[a, a]` still weights every term.
pub fn affinity_batch(targets: &[SparseGraph], preds: &[DenseGraph]) -> Result<AffinityPair> {
    if targets.len() != preds.len() {
        return Err(Error::shape("affinity_batch", &[targets.len()], &[preds.len()]));
    }
    let Some(first) = targets.first() else {
        return Err(Error::contract("affinity of an empty batch"));
    };
    let (n, k) = (first.n(), preds[0].k);
    for (t, p) in targets.iter().zip(preds) {
        check_pair(t, p)?;
        if t.n() != n || p.k != k {
            return Err(Error::shape("affinity_batch", &[n, k], &[t.n(), p.k]));
        }
    }

    let parts: Vec<(Vec<f64>, Vec<f64>)> = targets
        .par_iter()
        .zip(preds.par_iter())
        .map(|(t, p)| {
            let mut edge = vec![0.0; n * n * k * k];
            // A one-hot target attribute turns each inner product into a lookup.
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    let Some(r) = t.edge(i, j) else { continue };
                    let block = &mut edge[(i * n + j) * k * k..(i * n + j + 1) * k * k];
                    for a in 0..k {
                        for b in (0..k).filter(|&b| b != a) {
                            block[a * k + b] = p.edge_row(a, b)[r] * p.adj(a, b) * p.adj(a, a) * p.adj(b, b);
                        }
                    }
                }
            }
            let mut node = vec![0.0; n * k];
            for i in 0..n {
                let e = t.node(i);
                for a in 0..k {
                    node[i * k + a] = p.node_row(a)[e] * p.adj(a, a);
                }
            }
            (edge, node)
        })
        .collect();

    let b = targets.len();
    let mut edge = Vec::with_capacity(b * n * n * k * k);
    let mut node = Vec::with_capacity(b * n * k);
    for (e, v) in parts {
        edge.extend(e);
        node.extend(v);
    }
    Ok(AffinityPair {
        edge: Tensor::new([b, n, n, k, k], edge)?,
        node: Tensor::new([b, n, k], node)?,
    })
}

/// Power iteration with max-pooling over neighbour candidates.
pub fn maxpool_similarity(aff: &AffinityPair, iterations: usize) -> Result<SimilarityMatrix> {
    if iterations == 0 {
        return Err(Error::contract("max-pool matching needs at least one iteration"));
    }
    let (b, n, k) = (aff.batch(), aff.n(), aff.k());
    if aff.edge.shape() != [b, n, n, k, k] {
        return Err(Error::shape(
            "maxpool_similarity",
            &[b, n, n, k, k],
            aff.edge.shape(),
        ));
    }
    let block = n * n * k * k;
    let results: Vec<(Vec<f64>, bool)> = (0..b)
        .into_par_iter()
        .map(|g| {
            let sr = &aff.edge.data()[g * block..(g + 1) * block];
            let se = &aff.node.data()[g * n * k..(g + 1) * n * k];
            // Target pairs with any nonzero affinity; the rest contribute nothing.
            let active: Vec<(usize, usize)> = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|&(i, j)| {
                    sr[(i * n + j) * k * k..(i * n + j + 1) * k * k]
                        .iter()
                        .any(|&v| v != 0.0)
                })
                .collect();
            let mut x = vec![1.0; n * k];
            let mut next = vec![0.0; n * k];
            for _ in 0..iterations {
                for (v, (&xv, &sv)) in next.iter_mut().zip(x.iter().zip(se)) {
                    *v = xv * sv;
                }
                for &(i, j) in &active {
                    let s = &sr[(i * n + j) * k * k..(i * n + j + 1) * k * k];
                    let xj = &x[j * k..(j + 1) * k];
                    for a in 0..k {
                        let row = &s[a * k..(a + 1) * k];
                        let best = xj.iter().zip(row).fold(0.0f64, |m, (&xb, &sb)| m.max(xb * sb));
                        next[i * k + a] += best;
                    }
                }
                let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm > 0.0) || !norm.is_finite() {
                    let u = 1.0 / ((n * k) as f64).sqrt();
                    return (vec![u; n * k], true);
                }
                for (xv, &v) in x.iter_mut().zip(&next) {
                    *xv = v / norm;
                }
            }
            (x, false)
        })
        .collect();

    let mut data = Vec::with_capacity(b * n * k);
    let mut degenerate = Vec::with_capacity(b);
    for (x, d) in results {
        data.extend(x);
        degenerate.push(d);
    }
    Ok(SimilarityMatrix {
        x: Tensor::new([b, n, k], data)?,
        degenerate,
    })
}

/// Hungarian assignment on `1 - X*` for every batch element; degenerate
/// elements get the identity.
pub fn discretize(sim: &SimilarityMatrix) -> Result<Vec<PermutationMatrix>> {
    let shape = sim.x.shape();
    if shape.len() != 3 || sim.degenerate.len() != shape[0] {
        return Err(Error::shape("discretize", &[sim.degenerate.len()], shape));
    }
    let (n, k) = (shape[1], shape[2]);
    (0..shape[0])
        .map(|g| {
            if sim.degenerate[g] {
                let mut p = PermutationMatrix::identity(n, k)?;
                p.degenerate = true;
                return Ok(p);
            }
            let cost: Vec<f64> = sim.x.data()[g * n * k..(g + 1) * n * k]
                .iter()
                .map(|v| 1.0 - v)
                .collect();
            let a = hungarian_assign(&cost, n, k)?;
            PermutationMatrix::from_columns(a.columns, k)
        })
        .collect()
}

/// Affinity, max-pool similarity and discretization in one call.
pub fn match_graphs(
    targets: &[SparseGraph],
    preds: &[DenseGraph],
    iterations: usize,
) -> Result<Vec<PermutationMatrix>> {
    let aff = affinity_batch(targets, preds)?;
    discretize(&maxpool_similarity(&aff, iterations)?)
}

/// Target adjacency moved into the prediction's node order, and prediction
/// attributes moved into the target's node order.
#[derive(Clone, Debug, PartialEq)]
pub struct Permuted {
    /// `k x k`: `Xᵀ A X`
    pub adjacency: Tensor,
    /// `n x n x num_relations`: slices `X Ẽ_l Xᵀ`
    pub edge_attributes: Tensor,
    /// `n x num_entities`: `X F̃`
    pub node_attributes: Tensor,
}

pub fn apply_permutation(x: &PermutationMatrix, target: &SparseGraph, pred: &DenseGraph) -> Result<Permuted> {
    check_pair(target, pred)?;
    if x.n() != target.n() || x.k() != pred.k {
        return Err(Error::shape(
            "apply_permutation",
            &[x.n(), x.k()],
            &[target.n(), pred.k],
        ));
    }
    let (k, dr, de) = (pred.k, pred.num_relations, pred.num_entities);
    let xm = x.to_tensor();
    let xt = xm.transpose2()?;
    let adjacency = xt.matmul(&target.adjacency())?.matmul(&xm)?;
    let node_attributes = xm.matmul(&Tensor::new([k, de], pred.node_attributes.clone())?)?;

    let n = x.n();
    let mut edge = vec![0.0; n * n * dr];
    for l in 0..dr {
        let slice = Tensor::from_fn([k, k], |ab| pred.edge_attributes[ab * dr + l]);
        let moved = xm.matmul(&slice)?.matmul(&xt)?;
        for (ij, v) in moved.data().iter().enumerate() {
            edge[ij * dr + l] = *v;
        }
    }
    Ok(Permuted {
        adjacency,
        edge_attributes: Tensor::new([n, n, dr], edge)?,
        node_attributes,
    })
}

/// Fraction of the batch matched to something other than the identity.
pub fn permutation_rate(perms: &[PermutationMatrix]) -> f64 {
    if perms.is_empty() {
        return 0.0;
    }
    perms.iter().filter(|p| !p.is_identity()).count() as f64 / perms.len() as f64
}

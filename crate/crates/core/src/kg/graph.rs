//! The `(A, E, F)` graph representation of small subgraphs.

use super::Triple;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Discrete subgraph with `n` nodes.
///
/// Stored compactly: one entity index per node (the one-hot row of `F`) and
/// an optional relation index per ordered node pair (the edge of `A` and its
/// one-hot attribute in `E`). Self-loops are allowed and edges are directed.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SparseGraph {
    n: usize,
    num_entities: usize,
    num_relations: usize,
    nodes: Vec<usize>,
    edges: Vec<Option<usize>>,
}

impl SparseGraph {
    pub fn new(
        num_entities: usize,
        num_relations: usize,
        nodes: Vec<usize>,
        edges: Vec<Option<usize>>,
    ) -> Result<Self> {
        let n = nodes.len();
        if edges.len() != n * n {
            return Err(Error::shape("SparseGraph::new", &[n, n], &[edges.len()]));
        }
        if let Some(&e) = nodes.iter().find(|&&e| e >= num_entities) {
            return Err(Error::Bounds {
                what: "entity",
                index: e,
                size: num_entities,
            });
        }
        if let Some(&r) = edges.iter().flatten().find(|&&r| r >= num_relations) {
            return Err(Error::Bounds {
                what: "relation",
                index: r,
                size: num_relations,
            });
        }
        Ok(SparseGraph {
            n,
            num_entities,
            num_relations,
            nodes,
            edges,
        })
    }

    /// Builds one subgraph from a set of triples.
    ///
    /// Nodes are the distinct entities, subjects first and then objects not
    /// seen as subjects. Unused node slots repeat the first entity and carry no
    /// edges, so a single self-loop triple occupies one node of an `n = 2` graph.
    pub fn from_triples(
        triples: &[Triple],
        n: usize,
        num_entities: usize,
        num_relations: usize,
    ) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::contract("a subgraph needs at least one triple"));
        }
        let mut order: Vec<usize> = Vec::with_capacity(n);
        for e in triples
            .iter()
            .map(|t| t.subject)
            .chain(triples.iter().map(|t| t.object))
        {
            if !order.contains(&e) {
                order.push(e);
            }
        }
        if order.len() > n {
            return Err(Error::contract(format!(
                "{} distinct entities do not fit into {n} nodes",
                order.len()
            )));
        }
        let pos = |e: usize| order.iter().position(|&x| x == e).expect("collected");
        let mut edges = vec![None; n * n];
        for t in triples {
            if t.relation >= num_relations {
                return Err(Error::Bounds {
                    what: "relation",
                    index: t.relation,
                    size: num_relations,
                });
            }
            let slot = &mut edges[pos(t.subject) * n + pos(t.object)];
            match *slot {
                Some(r) if r != t.relation => {
                    return Err(Error::contract(format!(
                        "entities {} and {} are linked by two relations",
                        t.subject, t.object
                    )))
                }
                _ => *slot = Some(t.relation),
            }
        }
        let filler = order[0];
        order.resize(n, filler);
        Self::new(num_entities, num_relations, order, edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn node(&self, i: usize) -> usize {
        self.nodes[i]
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn edge(&self, i: usize, j: usize) -> Option<usize> {
        self.edges[i * self.n + j]
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().flatten().count()
    }

    /// Width of the flattened `A | E | F` input vector.
    pub fn input_width(n: usize, num_entities: usize, num_relations: usize) -> usize {
        n * n + n * n * num_relations + n * num_entities
    }

    pub fn adjacency(&self) -> Tensor {
        Tensor::from_fn(
            [self.n, self.n],
            |k| {
                if self.edges[k].is_some() {
                    1.0
                } else {
                    0.0
                }
            },
        )
    }

    pub fn edge_attributes(&self) -> Tensor {
        let dr = self.num_relations;
        Tensor::from_fn([self.n, self.n, dr], |k| {
            if self.edges[k / dr] == Some(k % dr) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn node_attributes(&self) -> Tensor {
        let de = self.num_entities;
        Tensor::from_fn(
            [self.n, de],
            |k| {
                if self.nodes[k / de] == k % de {
                    1.0
                } else {
                    0.0
                }
            },
        )
    }

    /// Writes the flattened `A | E | F` encoding into a zeroed slice.
    pub fn write_flat(&self, out: &mut [f64]) {
        let (n, dr, de) = (self.n, self.num_relations, self.num_entities);
        debug_assert_eq!(out.len(), Self::input_width(n, de, dr));
        let e_off = n * n;
        let f_off = e_off + n * n * dr;
        for (k, e) in self.edges.iter().enumerate() {
            if let Some(r) = e {
                out[k] = 1.0;
                out[e_off + k * dr + r] = 1.0;
            }
        }
        for (i, &e) in self.nodes.iter().enumerate() {
            out[f_off + i * de + e] = 1.0;
        }
    }

    /// Relabels nodes so that new node `p` is old node `perm[p]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n;
        let mut seen = vec![false; n];
        if perm.len() != n
            || perm
                .iter()
                .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::contract(format!(
                "{perm:?} is not a permutation of {n} nodes"
            )));
        }
        let nodes = perm.iter().map(|&p| self.nodes[p]).collect();
        let mut edges = vec![None; n * n];
        for a in 0..n {
            for b in 0..n {
                edges[a * n + b] = self.edges[perm[a] * n + perm[b]];
            }
        }
        Self::new(self.num_entities, self.num_relations, nodes, edges)
    }

    /// One triple per edge, read off in row-major edge order.
    pub fn to_triples(&self) -> Vec<Triple> {
        let n = self.n;
        self.edges
            .iter()
            .enumerate()
            .filter_map(|(k, e)| e.map(|r| Triple::new(self.nodes[k / n], r, self.nodes[k % n])))
            .collect()
    }
}

/// One graph per triple.
pub fn triples_to_graphs(
    batch: &[Triple],
    n: usize,
    num_entities: usize,
    num_relations: usize,
) -> Result<Vec<SparseGraph>> {
    batch
        .iter()
        .map(|t| {
            if t.subject >= num_entities || t.object >= num_entities {
                return Err(Error::Bounds {
                    what: "entity",
                    index: t.subject.max(t.object),
                    size: num_entities,
                });
            }
            SparseGraph::from_triples(std::slice::from_ref(t), n, num_entities, num_relations)
        })
        .collect()
}

pub fn graphs_to_triples(batch: &[SparseGraph]) -> Vec<Triple> {
    batch.iter().flat_map(SparseGraph::to_triples).collect()
}

/// Continuous prediction over `k` nodes: edge probabilities, per-edge
/// relation distributions and per-node entity distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGraph {
    pub k: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    /// `k x k`
    pub adjacency: Vec<f64>,
    /// `k x k x num_relations`
    pub edge_attributes: Vec<f64>,
    /// `k x num_entities`
    pub node_attributes: Vec<f64>,
}

impl DenseGraph {
    pub fn new(
        k: usize,
        num_entities: usize,
        num_relations: usize,
        adjacency: Vec<f64>,
        edge_attributes: Vec<f64>,
        node_attributes: Vec<f64>,
    ) -> Result<Self> {
        if adjacency.len() != k * k {
            return Err(Error::shape("DenseGraph adjacency", &[k, k], &[adjacency.len()]));
        }
        if edge_attributes.len() != k * k * num_relations {
            return Err(Error::shape(
                "DenseGraph edge attributes",
                &[k, k, num_relations],
                &[edge_attributes.len()],
            ));
        }
        if node_attributes.len() != k * num_entities {
            return Err(Error::shape(
                "DenseGraph node attributes",
                &[k, num_entities],
                &[node_attributes.len()],
            ));
        }
        Ok(DenseGraph {
            k,
            num_entities,
            num_relations,
            adjacency,
            edge_attributes,
            node_attributes,
        })
    }

    /// Exact dense copy of a discrete graph.
    pub fn from_sparse(g: &SparseGraph) -> Self {
        DenseGraph {
            k: g.n(),
            num_entities: g.num_entities(),
            num_relations: g.num_relations(),
            adjacency: g.adjacency().into_data(),
            edge_attributes: g.edge_attributes().into_data(),
            node_attributes: g.node_attributes().into_data(),
        }
    }

    pub fn adj(&self, a: usize, b: usize) -> f64 {
        self.adjacency[a * self.k + b]
    }

    pub fn edge_row(&self, a: usize, b: usize) -> &[f64] {
        let dr = self.num_relations;
        let off = (a * self.k + b) * dr;
        &self.edge_attributes[off..off + dr]
    }

    pub fn node_row(&self, a: usize) -> &[f64] {
        let de = self.num_entities;
        &self.node_attributes[a * de..(a + 1) * de]
    }

    /// Deterministic discretisation: an edge wherever its probability exceeds
    /// one half, attributes by argmax with ties going to the lowest index.
    pub fn argmax_graph(&self) -> SparseGraph {
        let nodes = (0..self.k).map(|a| argmax(self.node_row(a))).collect();
        let edges = (0..self.k * self.k)
            .map(|ab| {
                let (a, b) = (ab / self.k, ab % self.k);
                (self.adj(a, b) > 0.5).then(|| argmax(self.edge_row(a, b)))
            })
            .collect();
        SparseGraph::new(self.num_entities, self.num_relations, nodes, edges)
            .expect("indices come from the dense shapes")
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn plain_triple_layout() {
        let g = &triples_to_graphs(&[Triple::new(0, 5, 3)], 2, 4, 6).unwrap()[0];
        assert_eq!(g.adjacency().data(), &[0., 1., 0., 0.]);
        assert_eq!(g.edge_attributes().at(&[0, 1, 5]), 1.0);
        assert_eq!(g.edge_attributes().sum(), 1.0);
        assert_eq!(g.nodes(), &[0, 3]);
        assert_eq!(
            graphs_to_triples(std::slice::from_ref(g)),
            vec![Triple::new(0, 5, 3)]
        );
    }

    #[test]
    fn self_loop_layout() {
        let g = &triples_to_graphs(&[Triple::new(2, 1, 2)], 2, 3, 2).unwrap()[0];
        assert_eq!(g.adjacency().data(), &[1., 0., 0., 0.]);
        assert_eq!(g.edge(0, 0), Some(1));
        assert_eq!(g.nodes(), &[2, 2]);
        assert_eq!(g.to_triples(), vec![Triple::new(2, 1, 2)]);
    }

    #[test]
    fn edgeless_graph_has_no_triples() {
        let g = SparseGraph::new(3, 2, vec![0, 1], vec![None; 4]).unwrap();
        assert!(g.to_triples().is_empty());
    }

    #[test]
    fn reversed_edge_reads_direction() {
        let mut edges = vec![None; 4];
        edges[2] = Some(4); // A[1,0]
        let g = SparseGraph::new(8, 5, vec![2, 7], edges).unwrap();
        assert_eq!(g.to_triples(), vec![Triple::new(7, 4, 2)]);
    }

    #[test]
    fn out_of_range_is_bounds_error() {
        assert!(matches!(
            triples_to_graphs(&[Triple::new(0, 9, 1)], 2, 3, 2),
            Err(Error::Bounds { .. })
        ));
        assert!(matches!(
            triples_to_graphs(&[Triple::new(0, 0, 3)], 2, 3, 2),
            Err(Error::Bounds { .. })
        ));
    }

    #[test]
    fn larger_subgraph_orders_subjects_first() {
        let ts = [Triple::new(4, 0, 1), Triple::new(1, 1, 2), Triple::new(4, 1, 4)];
        let g = SparseGraph::from_triples(&ts, 4, 5, 2).unwrap();
        assert_eq!(g.nodes(), &[4, 1, 2, 4]);
        assert_eq!(g.edge(0, 1), Some(0));
        assert_eq!(g.edge(1, 2), Some(1));
        assert_eq!(g.edge(0, 0), Some(1));
        let mut back = g.to_triples();
        back.sort();
        let mut want = ts.to_vec();
        want.sort();
        assert_eq!(back, want);
    }

    #[test]
    fn flat_encoding_matches_dense_parts() {
        let g = SparseGraph::from_triples(&[Triple::new(1, 2, 0)], 2, 3, 4).unwrap();
        let mut flat = vec![0.0; SparseGraph::input_width(2, 3, 4)];
        g.write_flat(&mut flat);
        let mut want = g.adjacency().into_data();
        want.extend(g.edge_attributes().into_data());
        want.extend(g.node_attributes().into_data());
        assert_eq!(flat, want);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5, 0.5]), 0);
    }

    proptest! {
        #[test]
        fn round_trip_without_self_loops(raw in prop::collection::vec((0usize..30, 0usize..7, 0usize..30), 1..20)) {
            let batch: Vec<Triple> = raw
                .into_iter()
                .filter(|(s, _, o)| s != o)
                .map(|(s, r, o)| Triple::new(s, r, o))
                .collect();
            let graphs = triples_to_graphs(&batch, 2, 30, 7).unwrap();
            prop_assert_eq!(graphs_to_triples(&graphs), batch);
        }

        #[test]
        fn permutation_preserves_edge_count(perm_seed in 0usize..6) {
            let ts = [Triple::new(0, 0, 1), Triple::new(1, 1, 2), Triple::new(2, 0, 2)];
            let g = SparseGraph::from_triples(&ts, 3, 3, 2).unwrap();
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let p = g.permute_nodes(&perms[perm_seed]).unwrap();
            prop_assert_eq!(p.edge_count(), g.edge_count());
            let mut a = p.to_triples();
            let mut b = g.to_triples();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }
}

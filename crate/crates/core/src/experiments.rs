//! Latent-space interpolation, free generation and parameter export.

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::{SparseGraph, Triple, TripleStore, TypeCatalog, TypeMatch};
use crate::model::{sample_discrete, standard_normal, Rgvae};
use crate::tensor::{Checkpoint, Tensor};

/// Half-width of the per-dimension traversal, the two-sided 95% interval.
pub const TRAVERSAL_LIMIT: f64 = 1.96;

/// Generation stops after this many decoded graphs per requested triple.
pub const MAX_ATTEMPTS_PER_TRIPLE: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub z: Vec<f64>,
    pub graph: SparseGraph,
}

impl Decoded {
    pub fn triples(&self) -> Vec<Triple> {
        self.graph.to_triples()
    }
}

fn decode_rows(model: &Rgvae, rows: Vec<Vec<f64>>) -> Result<Vec<Decoded>> {
    let dz = model.config().d_z;
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let graphs = model.decode_latent(&Tensor::new([rows.len(), dz], flat)?)?;
    Ok(rows
        .into_iter()
        .zip(graphs)
        .map(|(z, g)| Decoded {
            z,
            graph: g.argmax_graph(),
        })
        .collect())
}

fn mean_code(model: &Rgvae, t: &Triple) -> Result<Vec<f64>> {
    let g = model.triple_graphs(std::slice::from_ref(t))?;
    Ok(model.encode_mean(&g)?.0.into_data())
}

/// `steps` evenly spaced codes from the mean code of `a` to that of `b`,
/// each decoded deterministically.
pub fn interpolate_between(model: &Rgvae, a: &Triple, b: &Triple, steps: usize) -> Result<Vec<Decoded>> {
    if steps < 2 {
        return Err(Error::contract("interpolation needs at least 2 steps"));
    }
    let (za, zb) = (mean_code(model, a)?, mean_code(model, b)?);
    let rows = (0..steps)
        .map(|j| {
            let t = j as f64 / (steps - 1) as f64;
            za.iter().zip(&zb).map(|(x, y)| x + t * (y - x)).collect()
        })
        .collect();
    decode_rows(model, rows)
}

/// Value of a traversed dimension at step `j`.
pub fn traversal_value(j: usize, steps: usize) -> f64 {
    -TRAVERSAL_LIMIT + j as f64 * (2.0 * TRAVERSAL_LIMIT) / (steps - 1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Traversal {
    pub dim: usize,
    pub step: usize,
    pub value: f64,
    pub decoded: Decoded,
}

/// Moves each latent dimension of the anchor's mean code across
/// `[-1.96, 1.96]` while holding the others.
pub fn interpolate_dims(model: &Rgvae, anchor: &Triple, steps: usize) -> Result<Vec<Traversal>> {
    if steps < 2 {
        return Err(Error::contract("traversal needs at least 2 steps"));
    }
    let base = mean_code(model, anchor)?;
    let mut rows = Vec::with_capacity(base.len() * steps);
    let mut keys = Vec::with_capacity(base.len() * steps);
    for dim in 0..base.len() {
        for step in 0..steps {
            let value = traversal_value(step, steps);
            let mut z = base.clone();
            z[dim] = value;
            rows.push(z);
            keys.push((dim, step, value));
        }
    }
    Ok(keys
        .into_iter()
        .zip(decode_rows(model, rows)?)
        .map(|((dim, step, value), decoded)| Traversal {
            dim,
            step,
            value,
            decoded,
        })
        .collect())
}

/// Keeps triples whose relation identifier matches a key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationFilter {
    pub key: String,
    pub mode: TypeMatch,
}

impl RelationFilter {
    pub fn substring(key: impl Into<String>) -> Self {
        RelationFilter {
            key: key.into(),
            mode: TypeMatch::Substring,
        }
    }

    pub fn accepts(&self, store: &TripleStore, t: &Triple) -> bool {
        store
            .relations()
            .name(t.relation)
            .is_some_and(|r| self.mode.matches(r, &self.key))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Every triple decoded, in order.
    pub raw: Vec<Triple>,
    /// The first `count_target` triples passing the relation filter.
    pub kept: Vec<Triple>,
    pub graphs_decoded: usize,
    /// True when the attempt cap stopped generation early.
    pub capped: bool,
}

/// Samples `z ~ N(0, sigma² I)`, decodes, draws discrete graphs and
/// collects triples until `count_target` pass the filter.
pub fn generate_triples<R: Rng + ?Sized>(
    model: &Rgvae,
    store: &TripleStore,
    count_target: usize,
    sigma: f64,
    filter: &RelationFilter,
    batch: usize,
    rng: &mut R,
) -> Result<Generated> {
    if !(sigma > 0.0) {
        return Err(Error::contract(format!("sigma {sigma} must be positive")));
    }
    let cap = count_target.saturating_mul(MAX_ATTEMPTS_PER_TRIPLE);
    let dz = model.config().d_z;
    let mut out = Generated {
        raw: Vec::new(),
        kept: Vec::new(),
        graphs_decoded: 0,
        capped: false,
    };
    while out.kept.len() < count_target {
        if out.graphs_decoded >= cap {
            out.capped = true;
            log::warn!(
                "generation stopped after {} graphs with {} of {} triples",
                out.graphs_decoded,
                out.kept.len(),
                count_target
            );
            break;
        }
        let b = batch.max(1).min(cap - out.graphs_decoded);
        let z = standard_normal(&[b, dz], rng).map(|v| v * sigma);
        for pred in model.decode_latent(&z)? {
            let g = sample_discrete(&pred, rng);
            out.graphs_decoded += 1;
            for t in g.to_triples() {
                out.raw.push(t);
                if out.kept.len() < count_target && filter.accepts(store, &t) {
                    out.kept.push(t);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationReport {
    pub total: usize,
    pub kept: usize,
    pub valid: usize,
    pub novel: usize,
    pub baseline: f64,
}

impl GenerationReport {
    pub fn valid_rate(&self) -> f64 {
        if self.kept == 0 {
            0.0
        } else {
            self.valid as f64 / self.kept as f64
        }
    }

    pub fn write_text<W: Write>(&self, header: &[(String, String)], w: &mut W) -> Result<()> {
        for (k, v) in header {
            writeln!(w, "{k}={v}")?;
        }
        writeln!(w, "total={}", self.total)?;
        writeln!(w, "kept={}", self.kept)?;
        writeln!(w, "valid={}", self.valid)?;
        writeln!(w, "novel={}", self.novel)?;
        writeln!(w, "valid_rate={:.6}", self.valid_rate())?;
        writeln!(w, "baseline={:.6}", self.baseline)?;
        Ok(())
    }
}

/// Counts triples whose relation passes the filter (kept), whose head
/// entity carries the key type (valid), and which occur in no split (novel).
pub fn validate_generated(
    triples: &[Triple],
    catalog: &TypeCatalog,
    store: &TripleStore,
    filter: &RelationFilter,
    key_type: &str,
    mode: TypeMatch,
) -> GenerationReport {
    let mut report = GenerationReport {
        total: triples.len(),
        kept: 0,
        valid: 0,
        novel: 0,
        baseline: catalog.baseline(key_type, mode),
    };
    for t in triples.iter().filter(|t| filter.accepts(store, t)) {
        report.kept += 1;
        if catalog.has_type(t.subject, key_type, mode) {
            report.valid += 1;
            if !store.is_known(t) {
                report.novel += 1;
            }
        }
    }
    report
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub layer: String,
    pub kind: &'static str,
    pub values: Vec<f64>,
}

/// One record per stored tensor; names ending in `.bias` are biases, the
/// rest weights.
pub fn export_param_histograms(ck: &Checkpoint) -> Vec<ParamRecord> {
    ck.tensors
        .iter()
        .map(|(name, t)| {
            let (layer, kind) = match name.strip_suffix(".bias") {
                Some(l) => (l, "bias"),
                None => (name.strip_suffix(".weight").unwrap_or(name), "weight"),
            };
            ParamRecord {
                layer: layer.to_string(),
                kind,
                values: t.data().to_vec(),
            }
        })
        .collect()
}

pub fn write_param_tsv<W: Write>(records: &[ParamRecord], w: &mut W) -> Result<()> {
    writeln!(w, "layer\tkind\tvalue")?;
    for r in records {
        for v in &r.values {
            writeln!(w, "{}\t{}\t{}", r.layer, r.kind, v)?;
        }
    }
    Ok(())
}

fn triple_text(store: &TripleStore, g: &SparseGraph) -> String {
    let parts: Vec<String> = g
        .to_triples()
        .iter()
        .map(|t| match store.labels(t) {
            Ok((s, r, o)) => format!("{s} {r} {o}"),
            Err(_) => format!("{} {} {}", t.subject, t.relation, t.object),
        })
        .collect();
    if parts.is_empty() {
        "-".to_string()
    } else {
        parts.join(" | ")
    }
}

pub fn write_interpolation_tsv<W: Write>(store: &TripleStore, steps: &[Decoded], w: &mut W) -> Result<()> {
    writeln!(w, "step\ttriples")?;
    for (j, d) in steps.iter().enumerate() {
        writeln!(w, "{j}\t{}", triple_text(store, &d.graph))?;
    }
    Ok(())
}

pub fn write_traversal_tsv<W: Write>(store: &TripleStore, rows: &[Traversal], w: &mut W) -> Result<()> {
    writeln!(w, "dim\tstep\tvalue\ttriples")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{:.6}\t{}",
            r.dim,
            r.step,
            r.value,
            triple_text(store, &r.decoded.graph)
        )?;
    }
    Ok(())
}

pub fn write_triples_tsv<W: Write>(store: &TripleStore, triples: &[Triple], w: &mut W) -> Result<()> {
    for t in triples {
        let (s, r, o) = store.labels(t)?;
        writeln!(w, "{s}\t{r}\t{o}")?;
    }
    Ok(())
}

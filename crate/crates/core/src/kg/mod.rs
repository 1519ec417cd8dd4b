//! Triple datasets: vocabularies, splits and filter indexes.

mod graph;
mod types;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

pub use graph::{argmax, graphs_to_triples, triples_to_graphs, DenseGraph, SparseGraph};
pub use types::{base_type, TypeCatalog, TypeMatch};

use crate::error::{Error, Result};

/// Index triple `(subject, relation, object)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

impl Triple {
    pub const fn new(subject: usize, relation: usize, object: usize) -> Self {
        Triple {
            subject,
            relation,
            object,
        }
    }
}

/// Bidirectional string/index map; indices follow first occurrence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

pub type LabelTriple = (String, String, String);

#[derive(Clone, Debug)]
pub struct TripleStore {
    entities: Vocab,
    relations: Vocab,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    final_mode: bool,
    head_filter: HashMap<(usize, usize), HashSet<usize>>,
    tail_filter: HashMap<(usize, usize), HashSet<usize>>,
    known: HashSet<Triple>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Unknown {
                what: "split",
                name: other.to_string(),
            }),
        }
    }
}

fn parse_tsv(path: &Path) -> Result<Vec<LabelTriple>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        out.push((
            fields[0].to_string(),
            fields[1].to_string(),
            fields[2].to_string(),
        ));
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("{} contains no triples", path.display())));
    }
    Ok(out)
}

impl TripleStore {
    /// Reads three TSV files. With `final_mode` the model trains on
    /// train + valid and is evaluated on test; otherwise it trains on train
    /// and is evaluated on valid.
    pub fn load_dataset(
        train_path: impl AsRef<Path>,
        valid_path: impl AsRef<Path>,
        test_path: impl AsRef<Path>,
        final_mode: bool,
    ) -> Result<Self> {
        let train = parse_tsv(train_path.as_ref())?;
        let valid = parse_tsv(valid_path.as_ref())?;
        let test = parse_tsv(test_path.as_ref())?;
        Ok(Self::from_labels(&train, &valid, &test, final_mode))
    }

    /// Loads `train.txt`, `valid.txt` and `test.txt` from a dataset directory.
    pub fn load_dir(dir: impl AsRef<Path>, final_mode: bool) -> Result<Self> {
        let dir = dir.as_ref();
        Self::load_dataset(
            dir.join("train.txt"),
            dir.join("valid.txt"),
            dir.join("test.txt"),
            final_mode,
        )
    }

    /// Builds a store from in-memory string triples.
    pub fn from_labels(
        train: &[LabelTriple],
        valid: &[LabelTriple],
        test: &[LabelTriple],
        final_mode: bool,
    ) -> Self {
        let mut entities = Vocab::default();
        let mut relations = Vocab::default();
        let mut index = |rows: &[LabelTriple]| -> Vec<Triple> {
            rows.iter()
                .map(|(s, r, o)| {
                    let s = entities.intern(s);
                    let r = relations.intern(r);
                    let o = entities.intern(o);
                    Triple::new(s, r, o)
                })
                .collect()
        };
        let train = index(train);
        let valid = index(valid);
        let test = index(test);

        let mut store = TripleStore {
            entities,
            relations,
            train,
            valid,
            test,
            final_mode,
            head_filter: HashMap::new(),
            tail_filter: HashMap::new(),
            known: HashSet::new(),
        };
        let all: Vec<Triple> = store.all_triples().copied().collect();
        for t in all {
            store
                .head_filter
                .entry((t.relation, t.object))
                .or_default()
                .insert(t.subject);
            store
                .tail_filter
                .entry((t.subject, t.relation))
                .or_default()
                .insert(t.object);
            store.known.insert(t);
        }
        store
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn final_mode(&self) -> bool {
        self.final_mode
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Triples the model is fit on.
    pub fn training_split(&self) -> Vec<Triple> {
        if self.final_mode {
            self.train.iter().chain(&self.valid).copied().collect()
        } else {
            self.train.clone()
        }
    }

    /// Triples held out for evaluation.
    pub fn evaluation_split(&self) -> &[Triple] {
        if self.final_mode {
            &self.test
        } else {
            &self.valid
        }
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn total_triples(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    /// True if the triple occurs in any split.
    pub fn is_known(&self, t: &Triple) -> bool {
        self.known.contains(t)
    }

    /// Every subject completing `(?, relation, object)` to a known triple.
    pub fn heads(&self, relation: usize, object: usize) -> Option<&HashSet<usize>> {
        self.head_filter.get(&(relation, object))
    }

    /// Every object completing `(subject, relation, ?)` to a known triple.
    pub fn tails(&self, subject: usize, relation: usize) -> Option<&HashSet<usize>> {
        self.tail_filter.get(&(subject, relation))
    }

    pub fn check(&self, t: &Triple) -> Result<()> {
        let (de, dr) = (self.num_entities(), self.num_relations());
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

    pub fn labels(&self, t: &Triple) -> Result<(&str, &str, &str)> {
        self.check(t)?;
        Ok((
            self.entities.name(t.subject).expect("checked"),
            self.relations.name(t.relation).expect("checked"),
            self.entities.name(t.object).expect("checked"),
        ))
    }

    /// Looks up a triple given by its identifiers.
    pub fn triple(&self, subject: &str, relation: &str, object: &str) -> Result<Triple> {
        let unknown = |what, name: &str| Error::Unknown {
            what,
            name: name.to_string(),
        };
        Ok(Triple::new(
            self.entities
                .id(subject)
                .ok_or_else(|| unknown("entity", subject))?,
            self.relations
                .id(relation)
                .ok_or_else(|| unknown("relation", relation))?,
            self.entities
                .id(object)
                .ok_or_else(|| unknown("entity", object))?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn lt(s: &str, r: &str, o: &str) -> LabelTriple {
        (s.into(), r.into(), o.into())
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn single_line_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "t.tsv", "a\tr\tb\n");
        let store = TripleStore::load_dataset(&f, &f, &f, false).unwrap();
        assert_eq!(store.num_entities(), 2);
        assert_eq!(store.num_relations(), 1);
        assert_eq!(store.split(Split::Train), &[Triple::new(0, 0, 1)]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let good = write(dir.path(), "g.tsv", "a\tr\tb\n");
        let bad = write(dir.path(), "b.tsv", "a\tr\tb\nc\td\n");
        match TripleStore::load_dataset(&good, &bad, &good, false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_dataset_error() {
        let dir = tempfile::tempdir().unwrap();
        let good = write(dir.path(), "g.tsv", "a\tr\tb\n");
        let empty = write(dir.path(), "e.tsv", "");
        assert!(matches!(
            TripleStore::load_dataset(&good, &good, &empty, false),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn split_selection_follows_final_mode() {
        let train = [lt("a", "r", "b")];
        let valid = [lt("b", "r", "c")];
        let test = [lt("c", "r", "a")];
        let dev = TripleStore::from_labels(&train, &valid, &test, false);
        assert_eq!(dev.training_split(), vec![Triple::new(0, 0, 1)]);
        assert_eq!(dev.evaluation_split(), &[Triple::new(1, 0, 2)]);
        let fin = TripleStore::from_labels(&train, &valid, &test, true);
        assert_eq!(fin.training_split().len(), 2);
        assert_eq!(fin.evaluation_split(), &[Triple::new(2, 0, 0)]);
        // Filters cover every split in both modes.
        for s in [&dev, &fin] {
            assert!(s.tails(2, 0).unwrap().contains(&0));
            assert!(s.heads(0, 1).unwrap().contains(&0));
        }
    }

    #[test]
    fn labels_round_trip_and_bounds() {
        let store = TripleStore::from_labels(&[lt("x", "p", "y")], &[], &[], false);
        let t = store.triple("x", "p", "y").unwrap();
        assert_eq!(store.labels(&t).unwrap(), ("x", "p", "y"));
        assert!(matches!(
            store.check(&Triple::new(5, 0, 0)),
            Err(Error::Bounds { .. })
        ));
        assert!(store.triple("x", "q", "y").is_err());
    }
}

//! Entity type metadata used to judge generated triples.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use log::warn;

use super::TripleStore;
use crate::error::{Error, Result};

/// First non-empty `/`-separated segment, e.g. `people` for `/people/measured_person`.
pub fn base_type(type_string: &str) -> &str {
    type_string.split('/').find(|s| !s.is_empty()).unwrap_or("")
}

/// How a key type is matched against an entity's types.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TypeMatch {
    /// Some type string has the key as its base type.
    #[default]
    BaseType,
    /// Some type string contains the key anywhere.
    Substring,
}

impl TypeMatch {
    pub fn matches(self, type_string: &str, key: &str) -> bool {
        match self {
            TypeMatch::BaseType => base_type(type_string) == key,
            TypeMatch::Substring => type_string.contains(key),
        }
    }
}

impl std::str::FromStr for TypeMatch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" | "base-type" => Ok(TypeMatch::BaseType),
            "substring" => Ok(TypeMatch::Substring),
            other => Err(Error::Unknown {
                what: "type match mode",
                name: other.into(),
            }),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TypeCatalog {
    types: HashMap<usize, BTreeSet<String>>,
    skipped_lines: usize,
}

impl TypeCatalog {
    /// Reads `entity<TAB>type` lines; entities outside the store's
    /// vocabulary are counted and skipped.
    pub fn load(path: impl AsRef<Path>, store: &TripleStore) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut catalog = TypeCatalog::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let Some((entity, ty)) = line.split_once('\t') else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected 2 tab-separated fields".into(),
                });
            };
            if ty.contains('\t') {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected 2 tab-separated fields".into(),
                });
            }
            match store.entities().id(entity) {
                Some(id) => {
                    catalog.types.entry(id).or_default().insert(ty.to_string());
                }
                None => catalog.skipped_lines += 1,
            }
        }
        if catalog.skipped_lines > 0 {
            warn!(
                "{}: skipped {} lines naming entities outside the vocabulary",
                path.display(),
                catalog.skipped_lines
            );
        }
        Ok(catalog)
    }

    pub fn from_map(types: HashMap<usize, BTreeSet<String>>) -> Self {
        TypeCatalog {
            types,
            skipped_lines: 0,
        }
    }

    /// Type strings of an entity; empty for unknown entities.
    pub fn types(&self, entity: usize) -> impl Iterator<Item = &str> {
        self.types
            .get(&entity)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    pub fn has_type(&self, entity: usize, key: &str, mode: TypeMatch) -> bool {
        self.types(entity).any(|t| mode.matches(t, key))
    }

    /// Number of entities with at least one type.
    pub fn typed_entities(&self) -> usize {
        self.types.values().filter(|s| !s.is_empty()).count()
    }

    pub fn skipped_lines(&self) -> usize {
        self.skipped_lines
    }

    /// Fraction of typed entities carrying the key type: the chance of
    /// guessing a matching head entity without any knowledge.
    pub fn baseline(&self, key: &str, mode: TypeMatch) -> f64 {
        let typed = self.typed_entities();
        if typed == 0 {
            return 0.0;
        }
        let hits = self
            .types
            .keys()
            .filter(|&&e| self.has_type(e, key, mode))
            .count();
        hits as f64 / typed as f64
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;
    use crate::kg::LabelTriple;

    fn store() -> TripleStore {
        let t: Vec<LabelTriple> = vec![
            (
                "/m/02mjmr".into(),
                "/people/person/place_of_birth".into(),
                "/m/02hrh0_".into(),
            ),
            ("/m/x".into(), "/film/film/genre".into(), "/m/y".into()),
        ];
        TripleStore::from_labels(&t, &[], &[], false)
    }

    #[test]
    fn base_type_segments() {
        assert_eq!(base_type("/people/measured_person"), "people");
        assert_eq!(base_type("people"), "people");
        assert_eq!(base_type(""), "");
    }

    #[test]
    fn loads_and_skips_unknown() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("types.tsv");
        std::fs::File::create(&p)
            .unwrap()
            .write_all(b"/m/02mjmr\t/people/measured_person\n/m/02mjmr\t/award/winner\n/m/nope\t/people/person\n/m/y\t/film/genre\n")
            .unwrap();
        let c = TypeCatalog::load(&p, &s).unwrap();
        let obama = s.entities().id("/m/02mjmr").unwrap();
        assert!(c.has_type(obama, "people", TypeMatch::BaseType));
        assert_eq!(c.skipped_lines(), 1);
        let x = s.entities().id("/m/x").unwrap();
        assert_eq!(c.types(x).count(), 0);
        assert_eq!(c.typed_entities(), 2);
        assert_eq!(c.baseline("people", TypeMatch::BaseType), 0.5);
    }

    #[test]
    fn substring_versus_base_mode() {
        assert!(TypeMatch::Substring.matches("/award/people_choice", "people"));
        assert!(!TypeMatch::BaseType.matches("/award/people_choice", "people"));
    }
}

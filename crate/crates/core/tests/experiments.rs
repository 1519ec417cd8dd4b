use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rgvae_core::experiments::{
    export_param_histograms, generate_triples, interpolate_between, interpolate_dims, validate_generated,
    write_param_tsv, write_traversal_tsv, RelationFilter,
};
use rgvae_core::kg::{LabelTriple, Triple, TripleStore, TypeCatalog, TypeMatch};
use rgvae_core::model::{Rgvae, RgvaeConfig};
use rgvae_core::tensor::Tensor;

fn store() -> TripleStore {
    let rows: Vec<LabelTriple> = (0..8)
        .map(|i| {
            let r = if i % 2 == 0 {
                "/film/film/genre"
            } else {
                "/people/person/profession"
            };
            (format!("m{i}"), r.to_string(), format!("m{}", (i + 3) % 8))
        })
        .collect();
    TripleStore::from_labels(&rows, &[], &[], false)
}

fn zeroed(m: &mut Rgvae) {
    let zeros: Vec<(String, Tensor)> = m
        .params()
        .records()
        .into_iter()
        .map(|(n, t)| (n, Tensor::zeros(t.shape())))
        .collect();
    m.params_mut().load_records(&zeros).unwrap();
}

#[test]
fn zero_decoder_always_emits_index_zero() {
    let st = store();
    let mut m = Rgvae::new(
        RgvaeConfig {
            d_z: 3,
            d_h: 4,
            ..RgvaeConfig::new(st.num_entities(), st.num_relations())
        },
        0,
    )
    .unwrap();
    zeroed(&mut m);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Relation 0 is the film relation, so the people filter never passes.
    let people = RelationFilter::substring("people");
    let g = generate_triples(&m, &st, 3, 1.0, &people, 32, &mut rng).unwrap();
    assert!(g.capped && g.kept.is_empty());
    assert!(g.raw.iter().all(|t| *t == Triple::new(0, 0, 0)));
    let film = RelationFilter::substring("film");
    let g = generate_triples(&m, &st, 50, 1.0, &film, 32, &mut rng).unwrap();
    assert_eq!(g.kept.len(), 50);
    assert!(g.raw.len() >= 50);
}

#[test]
fn generation_is_seed_deterministic() {
    let st = store();
    let m = Rgvae::new(
        RgvaeConfig {
            d_z: 3,
            d_h: 8,
            ..RgvaeConfig::new(st.num_entities(), st.num_relations())
        },
        5,
    )
    .unwrap();
    let any = RelationFilter::substring("/");
    let run = |seed| {
        generate_triples(
            &m,
            &st,
            40,
            2f64.sqrt(),
            &any,
            16,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4).raw, run(5).raw);
}

#[test]
fn counting_identities_hold() {
    let st = store();
    let mut text = String::new();
    for i in 0..8 {
        let ty = if i < 3 { "/people/person" } else { "/film/film" };
        text.push_str(&format!("m{i}\t{ty}\n"));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("types.tsv");
    std::fs::write(&path, text).unwrap();
    let catalog = TypeCatalog::load(&path, &st).unwrap();
    let m = Rgvae::new(
        RgvaeConfig {
            d_z: 3,
            d_h: 8,
            ..RgvaeConfig::new(st.num_entities(), st.num_relations())
        },
        2,
    )
    .unwrap();
    let any = RelationFilter::substring("");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = generate_triples(&m, &st, 300, 1.0, &any, 64, &mut rng).unwrap();
    for mode in [TypeMatch::BaseType, TypeMatch::Substring] {
        let people = RelationFilter::substring("people");
        let r = validate_generated(&g.raw, &catalog, &st, &people, "people", mode);
        assert!(r.novel <= r.valid && r.valid <= r.kept && r.kept <= r.total);
        assert_eq!(r.total, g.raw.len());
        assert_eq!(r.baseline, 3.0 / 8.0);
    }
}

#[test]
fn interpolation_and_traversal_tables() {
    let st = store();
    let m = Rgvae::new(
        RgvaeConfig {
            d_z: 2,
            d_h: 8,
            ..RgvaeConfig::new(st.num_entities(), st.num_relations())
        },
        3,
    )
    .unwrap();
    let a = st.split(rgvae_core::kg::Split::Train)[0];
    let b = st.split(rgvae_core::kg::Split::Train)[1];
    assert_eq!(interpolate_between(&m, &a, &b, 10).unwrap().len(), 10);
    let rows = interpolate_dims(&m, &a, 10).unwrap();
    let mut out = Vec::new();
    write_traversal_tsv(&st, &rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 10);
    assert!(text.lines().nth(1).unwrap().starts_with("0\t0\t-1.960000\t"));
}

#[test]
fn parameter_table_has_one_row_per_value() {
    let m = Rgvae::new(
        RgvaeConfig {
            d_z: 2,
            d_h: 3,
            ..RgvaeConfig::new(4, 2)
        },
        1,
    )
    .unwrap();
    let records = export_param_histograms(&m.to_checkpoint(&[]));
    let mut out = Vec::new();
    write_param_tsv(&records, &mut out).unwrap();
    let lines = String::from_utf8(out).unwrap().lines().count();
    assert_eq!(lines, 1 + m.params().numel());
    assert!(records.iter().any(|r| r.layer == "enc.fc1" && r.kind == "bias"));
}

/// Entities `m0..m14950`; the first 14541 are typed and 5283 of those carry
/// a people type, some alongside other types. A few lines name entities
/// outside the vocabulary.
pub fn write_fb15k_like_catalog(dir: &std::path::Path) -> (TripleStore, PathBuf) {
    let rows: Vec<LabelTriple> = (0..14_951)
        .map(|i| {
            (
                format!("m{i}"),
                "/r".to_string(),
                format!("m{}", (i + 1) % 14_951),
            )
        })
        .collect();
    let st = TripleStore::from_labels(&rows, &[], &[], false);
    let path = dir.join("entity_types.tsv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).unwrap());
    for i in 0..14_541 {
        if i < 5283 {
            writeln!(f, "m{i}\t/people/person").unwrap();
            if i % 3 == 0 {
                writeln!(f, "m{i}\t/film/actor").unwrap();
            }
        } else {
            writeln!(f, "m{i}\t/location/location").unwrap();
            if i % 5 == 0 {
                writeln!(f, "m{i}\t/base/peoplesoft/x").unwrap();
            }
        }
    }
    for i in 0..8 {
        writeln!(f, "missing{i}\t/people/person").unwrap();
    }
    f.flush().unwrap();
    (st, path)
}

#[test]
fn fb15k_like_catalog_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (st, path) = write_fb15k_like_catalog(dir.path());
    let catalog = TypeCatalog::load(&path, &st).unwrap();
    assert_eq!(catalog.typed_entities(), 14_541);
    assert_eq!(catalog.skipped_lines(), 8);
    let b = catalog.baseline("people", TypeMatch::BaseType);
    assert!((b - 0.36332).abs() < 1e-4, "{b}");
    // Substring matching also counts `/base/peoplesoft/...`.
    assert!(catalog.baseline("people", TypeMatch::Substring) > b);
}

/// Runs only when real files are available: `train.txt`, `valid.txt`,
/// `test.txt` and `entity_types.tsv` in `RGVAE_FB15K_DIR`.
#[test]
fn real_fb15k_baseline_when_available() {
    let Ok(dir) = std::env::var("RGVAE_FB15K_DIR") else {
        return;
    };
    let dir = PathBuf::from(dir);
    let st = TripleStore::load_dir(&dir, false).unwrap();
    let catalog = TypeCatalog::load(dir.join("entity_types.tsv"), &st).unwrap();
    let b = catalog.baseline("people", TypeMatch::BaseType);
    assert!((b - 0.36332).abs() < 1e-4, "{b}");
}

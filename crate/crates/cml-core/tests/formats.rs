//! File-format pinning: the heatmap CSV layout is frozen by a golden file
//! and the serialized stores/updates survive full round trips.

use cml_core::lang::LangId;
use cml_core::metrics::ChangeMatrix;
use cml_core::model::{Model, ModelConfig};
use cml_core::strategies::{SparseEntry, SparseUpdate, UpdateScope};
use cml_core::tensor::{read_store, write_store};

#[test]
fn heatmap_csv_format_matches_golden() {
    let matrix = ChangeMatrix::new(
        vec![LangId::new("aa"), LangId::new("bb"), LangId::new("cc")],
        vec![
            vec![1.23456, -0.00001, 1.99999],
            vec![0.0, -1.5, 0.33335],
            vec![99.99999, -2.71828, 0.5],
        ],
    )
    .unwrap();
    let mut emitted = Vec::new();
    matrix.write_csv(&mut emitted).unwrap();
    let golden = std::fs::read(
        std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("tests/fixtures/heatmap_format_golden.csv"),
    )
    .unwrap();
    assert_eq!(
        String::from_utf8(emitted).unwrap(),
        String::from_utf8(golden).unwrap(),
        "heatmap csv layout changed; the format is frozen"
    );
}

#[test]
fn store_serialization_roundtrips_a_full_model() {
    let mut cfg = ModelConfig::with_task(30, 5, 4);
    cfg.n_layers = 1;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ffn = 24;
    cfg.b_dim = 4;
    let mut model = Model::build(cfg, 3).unwrap();
    model.insert_adapters(&[LangId::new("aa")]).unwrap();
    let mut buf = Vec::new();
    write_store(model.store(), &mut buf).unwrap();
    let loaded = read_store(&mut buf.as_slice()).unwrap();
    assert_eq!(loaded.fingerprint(), model.store().fingerprint());
}

#[test]
fn sparse_update_file_roundtrips_extremes() {
    let entries = vec![
        SparseEntry { name: "embed.tok".into(), index: 0, delta: f64::MIN_POSITIVE },
        SparseEntry { name: "embed.tok".into(), index: 7, delta: -1e300 },
        SparseEntry { name: "head.token.w".into(), index: 3, delta: 1.0 + f64::EPSILON },
    ];
    let update = SparseUpdate::new(0xfeedbeef, UpdateScope::EncoderOnly, entries).unwrap();
    let mut buf = Vec::new();
    update.write(&mut buf).unwrap();
    let back = SparseUpdate::read(&mut buf.as_slice()).unwrap();
    assert_eq!(back, update);
}

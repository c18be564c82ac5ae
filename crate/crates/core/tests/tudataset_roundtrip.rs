use std::path::PathBuf;

use usbd_core::datagen::{gen_domain, Regime, ShiftSpec};
use usbd_core::tudataset::{export_tudataset, load_tudataset};
use usbd_core::{Domain, Tensor};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

fn edge_multiset(d: &Domain) -> Vec<Vec<(usize, usize)>> {
    d.graphs
        .iter()
        .map(|g| {
            let mut e = g.edges();
            e.sort_unstable();
            e
        })
        .collect()
}

fn assert_same(a: &Domain, b: &Domain) {
    assert_eq!(edge_multiset(a), edge_multiset(b));
    assert_eq!(a.labels(), b.labels());
    assert_eq!(a.feature_dim, b.feature_dim);
    for (x, y) in a.graphs.iter().zip(&b.graphs) {
        assert_eq!(x.features, y.features);
    }
}

#[test]
fn toy_fixture_assembles_as_written() {
    let d = load_tudataset(&fixture_dir(), "TOY").unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.num_classes, 2);
    assert_eq!(d.labels(), vec![Some(0), Some(1)]);
    assert_eq!(d.graphs[0].num_nodes(), 3);
    assert_eq!(edge_multiset(&d), vec![vec![(0, 1), (1, 2)], vec![(0, 1)]]);
    assert_eq!(
        d.graphs[1].features,
        Tensor::from_rows(&[vec![3.0, 0.1], vec![0.2, -0.3]])
    );
}

#[test]
fn toy_fixture_round_trips() {
    let d = load_tudataset(&fixture_dir(), "TOY").unwrap();
    let out = tempfile::tempdir().unwrap();
    export_tudataset(&d, out.path(), "TOY").unwrap();
    let back = load_tudataset(out.path(), "TOY").unwrap();
    assert_same(&d, &back);
}

#[test]
fn generated_domain_round_trips() {
    let spec = ShiftSpec {
        regime: Regime::Mixed,
        n_graphs: 12,
        classes: 3,
        seed: 5,
        ..ShiftSpec::default()
    };
    let d = gen_domain(&spec).unwrap();
    let out = tempfile::tempdir().unwrap();
    export_tudataset(&d, out.path(), "GEN").unwrap();
    let back = load_tudataset(out.path(), "GEN").unwrap();
    assert_same(&d, &back);
}

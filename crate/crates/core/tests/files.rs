//! Round trips through every on-disk format the library reads or writes.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uqcov::datasets::{load_idx, load_tabular, write_idx_images, write_idx_labels, Image, TabularDataset, TargetColumn};
use uqcov::models::{train_mlp, Checkpoint, CheckpointKind, Mlp, MlpConfig};
use uqcov::numerics::Matrix;
use uqcov::probfile::{read_probfile, write_probfile, ProbabilityTable};

#[test]
fn idx_round_trip_quantizes_to_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images: Vec<Image> = (0..5)
        .map(|_| Image::new(1, 28, 28, (0..784).map(|_| rng.random_range(0..=255u8) as f32 / 255.0).collect()))
        .collect();
    let labels = vec![3, 1, 4, 1, 5];
    write_idx_images(dir.path().join("img"), &images).unwrap();
    write_idx_labels(dir.path().join("lab"), &labels).unwrap();
    let back = load_idx(dir.path().join("img"), dir.path().join("lab")).unwrap();
    assert_eq!(back.labels, labels);
    // K is inferred as max label + 1.
    assert_eq!(back.num_classes, 6);
    for (a, b) in back.images.iter().zip(&images) {
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn tabular_csv_with_header_and_named_target() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "a,y,b\n1,10,2\n3,20,4\n5,30,6").unwrap();
    drop(f);
    let data = load_tabular(&path, &TargetColumn::Name("y".into())).unwrap();
    assert_eq!(data.labels, vec![10.0, 20.0, 30.0]);
    assert_eq!(data.features.row(1), &[3.0, 4.0]);
    let by_index = load_tabular(&path, &TargetColumn::Index(1)).unwrap();
    assert_eq!(by_index, data);
}

#[test]
fn probfile_round_trip_preserves_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = 4;
    let mut data = Vec::new();
    for _ in 0..20 {
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    let table = ProbabilityTable {
        method: "svi".into(),
        dataset: "mnist".into(),
        shift: "rotation".into(),
        severity: "30".into(),
        probabilities: Matrix::new(20, k, data).unwrap(),
        labels: (0..20).map(|i| i % k).collect(),
    };
    write_probfile(&table, &path).unwrap();
    // Reading renormalizes rows, which may move values by a few ulps.
    let back = read_probfile(&path).unwrap();
    assert!(back.probabilities.max_abs_diff(&table.probabilities) < 1e-15);
    assert_eq!(back.labels, table.labels);
    assert_eq!(
        (&back.method, &back.dataset, &back.shift, &back.severity),
        (&table.method, &table.dataset, &table.shift, &table.severity)
    );
}

#[test]
fn mlp_checkpoint_round_trip_preserves_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..80).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let labels: Vec<f64> = rows.iter().map(|r| r[0] - 2.0 * r[1]).collect();
    let data = TabularDataset::new("toy", Matrix::from_rows(&rows).unwrap(), labels).unwrap();
    let config = MlpConfig {
        hidden: vec![6, 4],
        epochs: 5,
        ..MlpConfig::default()
    };
    let model = train_mlp(&data, &data, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.uqck");
    model.to_checkpoint().save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"UQCK");
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.kind, CheckpointKind::Mlp);
    let back = Mlp::from_checkpoint(&loaded).unwrap();
    for r in &rows {
        assert_eq!(back.predict(r), model.predict(r));
    }
}

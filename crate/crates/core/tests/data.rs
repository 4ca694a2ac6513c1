use std::fs;
use std::path::Path;

use contnet::data::{
    load_csv, split, standardize, synth_surrogate, DataSidecar, Dataset, Orientation, SplitSpec,
    SurrogateKind,
};
use contnet::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn csv_orientation_symmetry() {
    let dir = tempfile::tempdir().unwrap();
    let fc = write(dir.path(), "f_cols.csv", "1,2,3\n4,5,6\n");
    let tc = write(dir.path(), "t_cols.csv", "0.5,-1,2e-3\n");
    let fr = write(dir.path(), "f_rows.csv", "1,4\n2,5\n3,6\n");
    let tr = write(dir.path(), "t_rows.csv", "0.5\n-1\n2e-3\n");
    let a = load_csv(&fc, &tc, Orientation::SamplesAsCols).unwrap();
    let b = load_csv(&fr, &tr, Orientation::SamplesAsRows).unwrap();
    assert_eq!(a.n_samples(), 3);
    assert_eq!(a.n_features(), 2);
    assert_eq!(a.m_targets(), 1);
    assert_eq!(a, b);
    assert_eq!(a.features[(1, 2)], 6.0);
}

#[test]
fn csv_rejects_nan_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "f.csv", "1,2,3\n4,nan,6\n");
    let t = write(dir.path(), "t.csv", "1,2,3\n");
    match load_csv(&f, &t, Orientation::SamplesAsCols) {
        Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (2, 2)),
        other => panic!("expected parse error, got {other:?}"),
    }
    let msg = load_csv(&f, &t, Orientation::SamplesAsCols).unwrap_err().to_string();
    assert!(msg.contains("f.csv"), "{msg}");
}

#[test]
fn csv_rejects_ragged_and_text_cells() {
    let dir = tempfile::tempdir().unwrap();
    let t = write(dir.path(), "t.csv", "1,2,3\n");
    let ragged = write(dir.path(), "ragged.csv", "1,2,3\n4,5\n");
    assert!(matches!(
        load_csv(&ragged, &t, Orientation::SamplesAsCols),
        Err(Error::Parse { line: 2, .. })
    ));
    let text = write(dir.path(), "text.csv", "1,abc,3\n");
    assert!(matches!(
        load_csv(&text, &t, Orientation::SamplesAsCols),
        Err(Error::Parse { line: 1, column: 2, .. })
    ));
    let inf = write(dir.path(), "inf.csv", "1,2,inf\n");
    assert!(matches!(load_csv(&inf, &t, Orientation::SamplesAsCols), Err(Error::Parse { .. })));
}

#[test]
fn csv_sample_count_mismatch_is_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "f.csv", "1,2,3\n");
    let t = write(dir.path(), "t.csv", "1,2\n");
    assert!(matches!(load_csv(&f, &t, Orientation::SamplesAsCols), Err(Error::Shape(_))));
}

#[test]
fn synthetic_tasks_are_deterministic() {
    for kind in [SurrogateKind::Smooth, SurrogateKind::Ode] {
        let a = synth_surrogate(kind, 4, 3, 20, 7).unwrap();
        let b = synth_surrogate(kind, 4, 3, 20, 7).unwrap();
        let c = synth_surrogate(kind, 4, 3, 20, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.features.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(a.targets.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn default_split_sizes_follow_template() {
    let ds = synth_surrogate(SurrogateKind::Smooth, 15, 10, 2486, 0).unwrap();
    let s = split(&ds, &SplitSpec::default()).unwrap();
    let sizes = [s.train.n_samples(), s.val.n_samples(), s.test.n_samples()];
    for (got, want) in sizes.iter().zip([1740usize, 497, 249]) {
        assert!(got.abs_diff(want) <= 1, "{sizes:?}");
    }
}

#[test]
fn everything_in_train_when_fractions_are_one_zero_zero() {
    let ds = synth_surrogate(SurrogateKind::Smooth, 2, 1, 13, 0).unwrap();
    let s = split(&ds, &SplitSpec { fractions: [1.0, 0.0, 0.0], seed: 3 }).unwrap();
    assert_eq!(s.train.n_samples(), 13);
    assert_eq!(s.val.n_samples() + s.test.n_samples(), 0);
}

#[test]
fn empty_train_and_bad_fractions_rejected() {
    let ds = synth_surrogate(SurrogateKind::Smooth, 2, 1, 5, 0).unwrap();
    assert!(matches!(
        split(&ds, &SplitSpec { fractions: [0.0, 0.5, 0.5], seed: 0 }),
        Err(Error::EmptyTrainSplit)
    ));
    assert!(split(&ds, &SplitSpec { fractions: [0.5, 0.6, -0.1], seed: 0 }).is_err());
}

#[test]
fn stats_come_from_train_split_only() {
    let ds = synth_surrogate(SurrogateKind::Smooth, 3, 2, 50, 1).unwrap();
    let spec = SplitSpec::default();
    let base = split(&ds, &spec).unwrap();
    let mut poisoned = ds.clone();
    for &i in base.indices[1].iter().chain(&base.indices[2]) {
        poisoned.features.column_mut(i).fill(1e6);
        poisoned.targets.column_mut(i).fill(-1e6);
    }
    let other = split(&poisoned, &spec).unwrap();
    assert_eq!(other.train, base.train);
    assert_eq!(other.val.feature_stats, base.val.feature_stats);
    assert_eq!(other.test.target_stats, base.test.target_stats);
}

#[test]
fn standardize_round_trip_and_idempotence() {
    let ds = synth_surrogate(SurrogateKind::Ode, 3, 2, 40, 2).unwrap();
    let std1 = standardize(&ds);
    for r in 0..3 {
        let row = std1.features.row(r);
        assert!(row.mean().abs() < 1e-12);
        assert!((row.variance() - 1.0).abs() < 1e-12);
    }
    let back = std1.destandardize();
    assert!((back.features - &ds.features).amax() < 1e-12);
    assert!((back.targets - &ds.targets).amax() < 1e-12);
    let std2 = standardize(&std1);
    assert!((&std2.features - &std1.features).amax() < 1e-12);
    assert!((&std2.targets - &std1.targets).amax() < 1e-12);
    assert!((std2.destandardize().features - &ds.features).amax() < 1e-12);
}

#[test]
fn constant_row_standardizes_to_zero() {
    let f = DMatrix::from_row_slice(2, 3, &[5.0, 5.0, 5.0, 1.0, 2.0, 3.0]);
    let ds = standardize(&Dataset::new(f, DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 1.0])).unwrap());
    assert!(ds.features.row(0).iter().all(|v| *v == 0.0));
    assert_eq!(ds.feature_stats.std[0], 1.0);
    assert_eq!(ds.feature_stats.mean[0], 5.0);
}

#[test]
fn sidecar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.json");
    let sc = DataSidecar {
        source: "synth:smooth:15:10:2486:0".into(),
        orientation: Some(Orientation::SamplesAsRows),
        n_features: 15,
        m_targets: 10,
        n_samples: 2486,
        split: SplitSpec::default(),
        split_sizes: [1740, 497, 249],
    };
    sc.write(&path).unwrap();
    assert_eq!(DataSidecar::read(&path).unwrap(), sc);
}

proptest! {
    #[test]
    fn splits_partition_the_samples(
        n in 1usize..300,
        a in 0.05f64..1.0,
        b in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let rest = 1.0 - a;
        let spec = SplitSpec { fractions: [a, rest * b, 1.0 - a - rest * b], seed };
        let ds = Dataset::new(
            DMatrix::from_fn(1, n, |_, c| c as f64),
            DMatrix::from_fn(1, n, |_, c| -(c as f64)),
        ).unwrap();
        let Ok(s) = split(&ds, &spec) else {
            prop_assert_eq!(spec.sizes(n).0, 0);
            return Ok(());
        };
        let mut all: Vec<usize> = s.indices.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let again = split(&ds, &spec).unwrap();
        prop_assert_eq!(&again.indices, &s.indices);
        let raw = s.train.destandardize();
        for (k, &i) in s.indices[0].iter().enumerate() {
            prop_assert!((raw.features[(0, k)] - i as f64).abs() < 1e-9 * n as f64);
        }
    }
}

use std::fs;

use less::datastore::{header_len, Datastore, DatastoreWriter, Fault, Header, StoreError};
use less_core::influence::FeatureKind;
use less_core::math::{gaussian_vec, rng};

fn header(dim: u32, epochs: usize, n: u64, normalized: bool) -> Header {
    Header {
        dim,
        epoch_lrs: (0..epochs).map(|i| 0.01 / (i + 1) as f64).collect(),
        input_dim: 300,
        projection_seed: 5,
        kind: FeatureKind::AdamGamma,
        normalized,
        fingerprint: [7; 32],
        example_count: n,
    }
}

fn random_rows(n: usize, d: usize, seed: u64) -> Vec<(u64, Vec<f64>)> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| (3 * i as u64 + 1, gaussian_vec(&mut r, d)))
        .collect()
}

fn build(dir: &std::path::Path, h: Header, rows: &[Vec<(u64, Vec<f64>)>]) -> std::path::PathBuf {
    let path = dir.join("store.bin");
    let mut w = DatastoreWriter::create(&path, h).unwrap();
    for (e, block) in rows.iter().enumerate() {
        w.append_epoch(e as u32, block).unwrap();
    }
    w.finish().unwrap()
}

#[test]
fn thousand_vectors_round_trip_within_f32_precision() {
    let dir = tempfile::tempdir().unwrap();
    let rows = random_rows(1000, 32, 1);
    let path = build(dir.path(), header(32, 1, 1000, false), &[rows.clone()]);
    let store = Datastore::open(&path).unwrap();
    assert!(store.validate().is_empty());
    let mut worst = 0.0f64;
    for (id, v) in &rows {
        let r = store.get(*id, 0).unwrap();
        for (a, b) in r.values().iter().zip(v) {
            worst = worst.max((a - b).abs() / b.abs());
        }
    }
    assert!(worst < 1e-6, "worst relative error {worst}");
}

#[test]
fn normalized_store_keeps_direction_and_norm() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = random_rows(50, 16, 2);
    rows[3].1 = vec![0.0; 16];
    let path = build(dir.path(), header(16, 1, 50, true), &[rows.clone()]);
    let store = Datastore::open(&path).unwrap();
    assert!(store.validate().is_empty());
    for (id, v) in &rows {
        let r = store.get(*id, 0).unwrap();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            assert!(r.zero_norm());
            assert!(r.feature.iter().all(|&x| x == 0.0));
            continue;
        }
        assert!(((r.raw_norm as f64) - norm).abs() < 1e-5 * norm);
        for (a, b) in r.restored(true).iter().zip(v) {
            assert!((a - b).abs() < 1e-5 * norm);
        }
    }
}

#[test]
fn unit_vector_append_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let mut u = vec![0.0; 8];
    u[2] = 0.6;
    u[5] = 0.8;
    let path = build(dir.path(), header(8, 1, 1, true), &[vec![(9, u.clone())]]);
    let r = Datastore::open(&path).unwrap().get(9, 0).unwrap();
    let expect: Vec<f32> = u.iter().map(|&x| x as f32).collect();
    assert_eq!(r.feature, expect);
}

#[test]
fn header_length_matches_layout() {
    // magic 8, version/d/N 12, lrs 8N, P 8, seed 8, kind+normalized+reserved 4, fingerprint 32, count 8
    let expected = 8 + 12 + 8 * 4 + 8 + 8 + 4 + 32 + 8;
    assert_eq!(header_len(4), expected);
    assert_eq!(header(512, 4, 10, true).encode().len(), expected);
}

#[test]
fn scan_order_is_epoch_then_id() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<_> = (0..3).map(|e| random_rows(20, 4, 10 + e)).collect();
    let path = build(dir.path(), header(4, 3, 20, false), &rows);
    let store = Datastore::open(&path).unwrap();
    let keys: Vec<(u32, u64)> = store.scan().map(|r| (r.epoch, r.example_id)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(keys.len(), 60);
    for (e, block) in rows.iter().enumerate() {
        for (id, _) in block {
            assert_eq!(store.get(*id, e as u32).unwrap().example_id, *id);
        }
    }
    assert!(matches!(store.get(2, 0), Err(StoreError::NotFound { .. })));
    assert!(matches!(store.get(1, 3), Err(StoreError::NotFound { .. })));
}

#[test]
fn append_rejects_bad_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.bin");
    let mut w = DatastoreWriter::create(&path, header(4, 2, 2, false)).unwrap();
    assert!(w
        .append_epoch(1, &[(1, vec![0.0; 4]), (2, vec![0.0; 4])])
        .is_err());
    assert!(w
        .append_epoch(0, &[(1, vec![0.0; 4]), (1, vec![0.0; 4])])
        .is_err());
    assert!(w
        .append_epoch(0, &[(1, vec![0.0; 4]), (2, vec![0.0; 3])])
        .is_err());
    assert!(w.append_epoch(0, &[(1, vec![0.0; 4])]).is_err());
    assert!(w
        .append_epoch(0, &[(1, vec![f64::NAN; 4]), (2, vec![0.0; 4])])
        .is_err());
    w.append_epoch(0, &[(1, vec![1.0; 4]), (2, vec![2.0; 4])])
        .unwrap();
    assert!(w
        .append_epoch(1, &[(1, vec![1.0; 4]), (3, vec![2.0; 4])])
        .is_err());
}

#[test]
fn existing_file_is_never_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    let path = build(
        dir.path(),
        header(4, 1, 1, false),
        &[vec![(1, vec![1.0; 4])]],
    );
    let before = fs::read(&path).unwrap();
    assert!(matches!(
        DatastoreWriter::create(&path, header(4, 1, 1, false)),
        Err(StoreError::Exists { .. })
    ));
    assert!(matches!(
        DatastoreWriter::create(&path, header(8, 1, 1, false)),
        Err(StoreError::Incompatible { .. })
    ));
    assert_eq!(fs::read(&path).unwrap(), before);
}

#[test]
fn truncation_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<_> = (0..2).map(|e| random_rows(10, 8, e)).collect();
    let path = build(dir.path(), header(8, 2, 10, true), &rows);
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 5);
    let faults = Datastore::from_bytes(bytes).unwrap().validate();
    assert!(faults.iter().any(|f| matches!(f, Fault::Truncated { .. })));
    assert!(faults.iter().any(|f| matches!(f, Fault::PartialRecord)));
}

#[test]
fn flipped_feature_bit_is_a_norm_fault() {
    let dir = tempfile::tempdir().unwrap();
    let rows = random_rows(10, 8, 3);
    let path = build(dir.path(), header(8, 1, 10, true), &[rows]);
    let mut bytes = fs::read(&path).unwrap();
    let h = Datastore::from_bytes(bytes.clone())
        .unwrap()
        .header()
        .clone();
    // exponent bit of the first feature value of record 4
    let at = h.byte_len() + 4 * h.record_len() + 20 + 3;
    bytes[at] ^= 0x10;
    let faults = Datastore::from_bytes(bytes).unwrap().validate();
    assert_eq!(faults.len(), 1, "{faults:?}");
    assert!(matches!(faults[0], Fault::Norm { index: 4, .. }));
}

#[test]
fn reordered_records_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let rows = random_rows(6, 4, 4);
    let path = build(dir.path(), header(4, 1, 6, false), &[rows]);
    let mut bytes = fs::read(&path).unwrap();
    let h = Datastore::from_bytes(bytes.clone())
        .unwrap()
        .header()
        .clone();
    let (a, b) = (
        h.byte_len() + h.record_len(),
        h.byte_len() + 2 * h.record_len(),
    );
    let rec_a: Vec<u8> = bytes[a..b].to_vec();
    let rec_b: Vec<u8> = bytes[b..b + h.record_len()].to_vec();
    bytes[a..b].copy_from_slice(&rec_b);
    bytes[b..b + h.record_len()].copy_from_slice(&rec_a);
    let faults = Datastore::from_bytes(bytes).unwrap().validate();
    assert!(faults.iter().any(|f| matches!(f, Fault::Unsorted { .. })));
}

#[test]
fn bad_magic_and_version_refuse_to_open() {
    let dir = tempfile::tempdir().unwrap();
    let path = build(
        dir.path(),
        header(4, 1, 1, false),
        &[vec![(1, vec![1.0; 4])]],
    );
    let good = fs::read(&path).unwrap();
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(
        Datastore::from_bytes(bad),
        Err(StoreError::BadMagic)
    ));
    let mut bad = good.clone();
    bad[8] = 99;
    assert!(matches!(
        Datastore::from_bytes(bad),
        Err(StoreError::Version { .. })
    ));
    assert!(Datastore::from_bytes(good[..20].to_vec()).is_err());
}

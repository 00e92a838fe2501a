mod common;

use std::collections::BTreeMap;

use activehar::data::{
    ingest, parse_csv, preprocess_and_store, synthetic, write_csv, ColumnMap, ColumnRef, DatasetId,
    DatasetManifest, PrepParams, RatePolicy, RawStreams, SyntheticConfig, WindowStore,
};
use activehar::signal::segment;

fn csv_manifest(classes: Vec<String>, hz: f64) -> DatasetManifest {
    let name = |s: &str| ColumnRef::Name(s.to_string());
    DatasetManifest {
        dataset_id: DatasetId::HharWatch,
        classes,
        window_seconds: 2.0,
        target_hz: 100.0,
        sources: vec!["corpus.csv".into()],
        delimiter: ',',
        has_header: true,
        columns: Some(ColumnMap {
            timestamp: name("timestamp"),
            x: name("x"),
            y: name("y"),
            z: name("z"),
            user: name("user"),
            device: Some(name("device")),
            label: Some(name("label")),
            timestamp_scale: 1.0,
        }),
        rates: Some(RatePolicy::Fixed { hz }),
        labels: BTreeMap::new(),
        synthetic: None,
        base_dir: Default::default(),
    }
}

fn corpus(rate_hz: f64) -> RawStreams {
    synthetic::generate(&SyntheticConfig::new(3, 4, 6, rate_hz, 21))
}

fn store_bytes(store: &WindowStore) -> BTreeMap<String, Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    store.save(dir.path()).unwrap();
    std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn synthetic_rows_round_trip_through_csv() {
    let original = corpus(100.0);
    let mut text = Vec::new();
    write_csv(&original, &mut text).unwrap();
    let parsed = parse_csv(
        text.as_slice(),
        "corpus.csv",
        &csv_manifest(original.classes.clone(), 100.0),
    )
    .unwrap();
    assert_eq!(parsed, original);
}

#[test]
fn synthetic_manifest_ingests_the_generated_corpus() {
    let cfg = SyntheticConfig::new(2, 3, 4, 50.0, 8);
    let m = DatasetManifest::synthetic(cfg.clone(), 50.0);
    assert_eq!(ingest(&m).unwrap(), synthetic::generate(&cfg));
}

#[test]
fn ingestion_is_deterministic_to_the_byte() {
    let dir = tempfile::tempdir().unwrap();
    let raw = corpus(200.0);
    let mut f = std::fs::File::create(dir.path().join("corpus.csv")).unwrap();
    write_csv(&raw, &mut f).unwrap();
    let mut m = csv_manifest(raw.classes.clone(), 200.0);
    m.base_dir = dir.path().to_path_buf();
    let text = m.to_toml().unwrap();
    let params = PrepParams::new(2.0, 100.0);
    let a = preprocess_and_store(&ingest(&m).unwrap(), &params, &text).unwrap();
    let b = preprocess_and_store(&ingest(&m).unwrap(), &params, &text).unwrap();
    assert_eq!(store_bytes(&a), store_bytes(&b));
    assert_eq!(a.feature_length(), 100);
    assert_eq!(a.provenance.compression_ratio, 0.25);
}

#[test]
fn class_histogram_matches_pure_source_segments() {
    let mut raw = corpus(200.0);
    // Relabel part of one window so that it mixes two classes.
    for s in raw.streams[0].samples[100..150].iter_mut() {
        s.label = Some((s.label.unwrap() + 1) % 4);
    }
    let store = preprocess_and_store(&raw, &PrepParams::new(2.0, 100.0), "m").unwrap();
    let mut expected = BTreeMap::new();
    for s in &raw.streams {
        for w in segment(&s.samples, 2.0, s.rate_hz, &s.user_id, &s.device_id).unwrap() {
            *expected.entry(w.label).or_insert(0usize) += 1;
        }
    }
    let mut got = BTreeMap::new();
    for w in store.windows() {
        *got.entry(w.label).or_insert(0usize) += 1;
    }
    assert_eq!(got, expected);
    assert_eq!(store.provenance.dropped_windows, 1);
}

#[test]
fn windows_stay_within_their_user_and_device() {
    let mut raw = corpus(100.0);
    // Give the second half of each stream to another device.
    let mut split = Vec::new();
    for s in &raw.streams {
        let half = s.samples.len() / 2 + 50;
        let mut a = s.clone();
        let mut b = s.clone();
        a.samples.truncate(half);
        b.samples.drain(..half);
        b.device_id = "other".into();
        split.push(a);
        split.push(b);
    }
    raw.streams = split;
    let store = preprocess_and_store(&raw, &PrepParams::new(2.0, 100.0), "m").unwrap();
    for (user, ws) in &store.users {
        assert!(ws.iter().all(|w| &w.user_id == user));
    }
    let expected: usize = raw.streams.iter().map(|s| s.samples.len() / 200).sum();
    assert_eq!(
        store.provenance.windows + store.provenance.dropped_windows,
        expected
    );
    for w in store.windows() {
        let stream = raw
            .streams
            .iter()
            .find(|s| s.user_id == w.user_id && s.device_id == w.device_id)
            .unwrap();
        let first = w.display_axis(0)[0];
        assert!(stream
            .samples
            .iter()
            .any(|s| (s.xyz[0] as f32 as f64) == first));
    }
}

/// 10-NN leave-one-out accuracy on the raw decimated windows of each user.
#[test]
fn synthetic_classes_are_separable_by_nearest_neighbours() {
    let store = common::small_store(3, 6, 20, 3);
    for user in store.user_ids() {
        let ws = store.labeled(user);
        let dist =
            |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let mut correct = 0;
        for (i, w) in ws.iter().enumerate() {
            let mut d: Vec<(f64, usize)> = ws
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| (dist(&w.display, &v.display), v.label.unwrap()))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut votes = [0usize; 6];
            d.iter().take(10).for_each(|(_, l)| votes[*l] += 1);
            let pred = (0..6)
                .max_by_key(|&c| (votes[c], std::cmp::Reverse(c)))
                .unwrap();
            correct += usize::from(pred == w.label.unwrap());
        }
        let acc = correct as f64 / ws.len() as f64;
        assert!(acc > 0.95, "user {user}: 10-NN accuracy {acc}");
    }
}

mod common;

use std::fs;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use uifm::schema::{
    parse_metadata, parse_session_log, write_metadata, write_session_log, AttrStats, MetadataRow, MetadataTable,
    RawEvent, RawSession, SplitConfig,
};
use uifm::{Dataset, EmbeddingMode, EventSchema, UifmError, UNK};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/retail")
}

fn split(holdout: f64) -> SplitConfig {
    SplitConfig { holdout_fraction: holdout, validation_fraction: 0.0, test_fraction: 0.25, seed: 3 }
}

/// Copy the fixture into a temp dir, letting `edit` rewrite one file.
fn edited(file: &str, edit: impl Fn(String) -> String) -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    for f in ["schema.json", "sessions.csv", "metadata.csv"] {
        let text = fs::read_to_string(fixture().join(f)).unwrap();
        let text = if f == file { edit(text) } else { text };
        fs::write(tmp.path().join(f), text).unwrap();
    }
    tmp
}

#[test]
fn fixture_loads_with_sorted_events_and_train_statistics() {
    let ds = Dataset::from_dir(&fixture(), &split(0.0)).unwrap();
    assert_eq!(ds.summary.train_sessions + ds.summary.test_sessions, 8);
    assert_eq!(ds.catalog.len(), 2 + 6);
    let schema = EventSchema::from_json_file(&fixture().join("schema.json")).unwrap();
    let raw = parse_session_log(&fixture().join("sessions.csv"), &schema).unwrap();
    let s1 = &raw[0];
    assert_eq!(s1.entity_ids(&schema).collect::<Vec<_>>(), ["p2", "p1", "p3"]);
    assert_eq!(s1.events[0].temporal, vec![1_700_000_000.0, 30.0]);
    let amounts: Vec<f64> = ds.train.iter().flat_map(|s| s.events.iter().map(|e| e.numerical[0])).collect();
    let n = amounts.len() as f64;
    let mean = amounts.iter().sum::<f64>() / n;
    let std = (amounts.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((ds.norm.numerical[0].mean - mean).abs() < 1e-12);
    assert!((ds.norm.numerical[0].std - std).abs() < 1e-12);
    let model = common::tiny_model::<f64>(&ds, EmbeddingMode::Full, 1);
    let tokens = model.fuse_session(&ds.train[0]).unwrap();
    assert_eq!(tokens.rows(), ds.train[0].len());
    assert!(tokens.all_finite());
}

#[test]
fn cold_holdout_routes_sessions_to_test() {
    let ds = Dataset::from_dir(&fixture(), &split(0.34)).unwrap();
    let cold = ds.cold_entities();
    assert_eq!(cold.len(), 2);
    let ea = ds.schema.entity_attr();
    for s in &ds.train {
        assert!(s.events.iter().all(|e| !cold.contains(&e.categorical[ea])));
    }
    for &c in &cold {
        assert!(!ds.catalog.is_trained(c));
        assert!(ds.catalog.metadata(c).is_ok());
        assert!(ds.test.iter().any(|s| s.events.iter().any(|e| e.categorical[ea] == c)));
    }
}

#[test]
fn unseen_values_become_unk_and_are_counted() {
    let tmp =
        edited("sessions.csv", |t| t + "s9,1700009000,p1,scarves,kiosk,49.9,1\ns9,1700009001,p2,shoes,web,59.0,1\n");
    let cfg = SplitConfig { test_fraction: 0.5, ..split(0.0) };
    let ds = Dataset::from_dir(tmp.path(), &cfg).unwrap();
    let total = ds.summary.train_report.unk_count + ds.summary.test_report.unk_count;
    let in_test = ds.test.iter().any(|s| s.user_id == "s9");
    if in_test {
        assert_eq!(ds.summary.test_report.unk_count, 2);
        let s9 = ds.test.iter().find(|s| s.user_id == "s9").unwrap();
        assert_eq!(s9.events[0].categorical[1], UNK);
        assert_eq!(s9.events[0].categorical[2], UNK);
    } else {
        assert_eq!(total, 0);
    }
}

#[test]
fn missing_metadata_row_is_reported() {
    let tmp =
        edited("metadata.csv", |t| t.lines().filter(|l| !l.starts_with("p6")).collect::<Vec<_>>().join("\n") + "\n");
    let err = Dataset::from_dir(tmp.path(), &split(0.0)).unwrap_err();
    assert!(matches!(err, UifmError::MissingMetadata(ref e) if e == "p6"), "{err}");
    assert_eq!(err.kind(), "schema_mismatch");
}

#[test]
fn malformed_value_names_line() {
    let tmp = edited("sessions.csv", |t| t.replacen("15.0,20", "fifteen,20", 1));
    let err = Dataset::from_dir(tmp.path(), &split(0.0)).unwrap_err();
    match &err {
        UifmError::Parse { line, msg, .. } => {
            assert_eq!(*line, 6);
            assert!(msg.contains("amount"));
        }
        e => panic!("{e}"),
    }
    assert_eq!(err.kind(), "bad_data");
}

#[test]
fn header_and_schema_problems() {
    let tmp = edited("sessions.csv", |t| t.replacen("channel", "source", 1));
    assert_eq!(Dataset::from_dir(tmp.path(), &split(0.0)).unwrap_err().kind(), "schema_mismatch");
    let tmp = edited("schema.json", |t| t.replace("\"is_entity_id\": true", "\"is_entity_id\": false"));
    assert_eq!(Dataset::from_dir(tmp.path(), &split(0.0)).unwrap_err().kind(), "schema_mismatch");
    let tmp = edited("sessions.csv", |t| t.replacen("1700000100", "yesterday", 1));
    assert_eq!(Dataset::from_dir(tmp.path(), &split(0.0)).unwrap_err().kind(), "bad_data");
    let tmp = tempfile::tempdir().unwrap();
    let err = Dataset::from_dir(tmp.path(), &split(0.0)).unwrap_err();
    assert!(matches!(err, UifmError::MissingInput(_)));
    let tmp = edited("sessions.csv", |_| String::new());
    assert!(matches!(Dataset::from_dir(tmp.path(), &split(0.0)).unwrap_err(), UifmError::EmptyFile(_)));
}

fn schema() -> EventSchema {
    EventSchema::from_json_file(&fixture().join("schema.json")).unwrap()
}

fn value() -> impl Strategy<Value = String> {
    "[a-z0-9 ,\"';]{0,6}"
}

fn sessions_strategy() -> impl Strategy<Value = Vec<RawSession>> {
    let event = (prop::collection::vec(value(), 3), -1e6f64..1e6, 0i64..100, 0.0f64..1e4);
    prop::collection::vec(prop::collection::vec(event, 1..6), 1..6).prop_map(|sessions| {
        sessions
            .into_iter()
            .enumerate()
            .map(|(i, evs)| {
                let mut t = 1_600_000_000i64;
                RawSession {
                    session_id: format!("u{i}"),
                    events: evs
                        .into_iter()
                        .map(|(categorical, amount, gap, dwell)| {
                            t += gap;
                            RawEvent { categorical, numerical: vec![amount], temporal: vec![t as f64, dwell] }
                        })
                        .collect(),
                }
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn session_log_round_trips(sessions in sessions_strategy()) {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("s.csv");
        let schema = schema();
        write_session_log(&path, &schema, &sessions).unwrap();
        prop_assert_eq!(parse_session_log(&path, &schema).unwrap(), sessions);
    }

    #[test]
    fn metadata_round_trips(rows in prop::collection::vec((prop::collection::vec(value(), 2), -1e3f64..1e3), 1..8)) {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.csv");
        let schema = schema();
        let table = MetadataTable::new(
            rows.into_iter()
                .enumerate()
                .map(|(i, (categorical, p))| MetadataRow { entity: format!("e{i}"), categorical, numerical: vec![p] })
                .collect(),
        ).unwrap();
        write_metadata(&path, &schema, &table).unwrap();
        prop_assert_eq!(parse_metadata(&path, &schema).unwrap(), table);
    }

    #[test]
    fn normalization_inverts(values in prop::collection::vec(-1e4f64..1e4, 1..50), x in -1e5f64..1e5) {
        let s = AttrStats::from_values("a", &values);
        let back = s.denormalize(s.normalize(x));
        prop_assert!((back - x).abs() <= 1e-9 * (1.0 + x.abs()));
        let z: Vec<f64> = values.iter().map(|&v| s.normalize(v)).collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        prop_assert!(mean.abs() < 1e-6);
        if s.std > 1e-3 {
            let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }
}

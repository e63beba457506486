//! Event schema, CSV ingestion, vocabularies, normalization statistics and
//! the leak-free cold-start split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, UifmError};

/// Index reserved for unknown raw values in every categorical vocabulary.
pub const UNK: u32 = 0;
/// Index reserved for the mask token in every categorical vocabulary.
pub const MASK: u32 = 1;
/// Number of reserved indices at the front of every vocabulary.
pub const RESERVED: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalAttr {
    pub name: String,
    /// Filled in from the built vocabulary; may be omitted in schema files.
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub is_entity_id: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericalAttr {
    pub name: String,
    #[serde(default)]
    pub unit: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalKind {
    AbsoluteTimestamp,
    DeltaSeconds,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalAttr {
    pub name: String,
    pub kind: TemporalKind,
}

/// Side features available for every entity, listed by metadata CSV column.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataSchema {
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub numerical: Vec<String>,
}

/// Attribute groups of an interaction event.
///
/// Session CSV columns are `session_id`, the absolute timestamp attribute,
/// the categorical attributes, the numerical attributes, then any
/// `delta_seconds` temporal attributes, each group in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSchema {
    pub categorical: Vec<CategoricalAttr>,
    #[serde(default)]
    pub numerical: Vec<NumericalAttr>,
    pub temporal: Vec<TemporalAttr>,
    #[serde(default)]
    pub metadata: MetadataSchema,
}

impl EventSchema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| UifmError::MissingInput(path.to_path_buf()))?;
        let schema: EventSchema =
            serde_json::from_str(&text).map_err(|e| UifmError::Schema(format!("{}: {e}", path.display())))?;
        schema.validate()?;
        Ok(schema)
    }

    /// Structural checks that do not depend on built vocabularies.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let names = self
            .categorical
            .iter()
            .map(|a| &a.name)
            .chain(self.numerical.iter().map(|a| &a.name))
            .chain(self.temporal.iter().map(|a| &a.name));
        for n in names {
            if n == "session_id" || !seen.insert(n.as_str()) {
                return Err(UifmError::Schema(format!("duplicate or reserved attribute name {n:?}")));
            }
        }
        let ids = self.categorical.iter().filter(|a| a.is_entity_id).count();
        if ids != 1 {
            return Err(UifmError::Schema(format!("expected exactly one entity id attribute, found {ids}")));
        }
        let abs = self.temporal.iter().filter(|t| t.kind == TemporalKind::AbsoluteTimestamp).count();
        if abs != 1 {
            return Err(UifmError::Schema(format!("expected exactly one absolute_timestamp attribute, found {abs}")));
        }
        let mut meta = BTreeSet::new();
        for n in self.metadata.categorical.iter().chain(&self.metadata.numerical) {
            if n == "entity_id" || !meta.insert(n.as_str()) {
                return Err(UifmError::Schema(format!("duplicate or reserved metadata feature {n:?}")));
            }
        }
        Ok(())
    }

    /// Checks that also require vocabulary sizes to be filled in.
    pub fn validate_resolved(&self) -> Result<()> {
        self.validate()?;
        for a in &self.categorical {
            if a.vocab_size < RESERVED {
                return Err(UifmError::Schema(format!("{}: vocab_size {} < 2", a.name, a.vocab_size)));
            }
        }
        Ok(())
    }

    pub fn entity_attr(&self) -> usize {
        self.categorical.iter().position(|a| a.is_entity_id).expect("validated schema")
    }

    pub fn timestamp_attr(&self) -> usize {
        self.temporal.iter().position(|t| t.kind == TemporalKind::AbsoluteTimestamp).expect("validated schema")
    }

    fn delta_attrs(&self) -> impl Iterator<Item = (usize, &TemporalAttr)> {
        self.temporal.iter().enumerate().filter(|(_, t)| t.kind == TemporalKind::DeltaSeconds)
    }

    pub fn session_header(&self) -> Vec<String> {
        let mut h = vec!["session_id".to_string(), self.temporal[self.timestamp_attr()].name.clone()];
        h.extend(self.categorical.iter().map(|a| a.name.clone()));
        h.extend(self.numerical.iter().map(|a| a.name.clone()));
        h.extend(self.delta_attrs().map(|(_, t)| t.name.clone()));
        h
    }

    pub fn metadata_header(&self) -> Vec<String> {
        let mut h = vec!["entity_id".to_string()];
        h.extend(self.metadata.categorical.iter().cloned());
        h.extend(self.metadata.numerical.iter().cloned());
        h
    }

    /// Copy with vocabulary sizes taken from `vocabs`.
    pub fn resolved(&self, vocabs: &Vocabularies) -> Result<Self> {
        if vocabs.categorical.len() != self.categorical.len() {
            return Err(UifmError::Schema("vocabulary count does not match schema".into()));
        }
        let mut s = self.clone();
        for (a, v) in s.categorical.iter_mut().zip(&vocabs.categorical) {
            a.vocab_size = v.len();
        }
        s.validate_resolved()?;
        Ok(s)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// One interaction as read from the log, before vocabulary encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub categorical: Vec<String>,
    pub numerical: Vec<f64>,
    /// Seconds; the absolute timestamp attribute holds integer epoch seconds.
    pub temporal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSession {
    pub session_id: String,
    pub events: Vec<RawEvent>,
}

impl RawSession {
    pub fn entity_ids<'a>(&'a self, schema: &EventSchema) -> impl Iterator<Item = &'a str> + 'a {
        let e = schema.entity_attr();
        self.events.iter().map(move |ev| ev.categorical[e].as_str())
    }
}

/// Encoded event: categorical values are vocabulary indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub categorical: Vec<u32>,
    pub numerical: Vec<f64>,
    pub temporal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub user_id: String,
    pub events: Vec<Event>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// The most recent `n` events.
    pub fn tail(&self, n: usize) -> Session {
        let start = self.events.len().saturating_sub(n);
        Session { user_id: self.user_id.clone(), events: self.events[start..].to_vec() }
    }

    /// Temporal inputs per event: absolute timestamps become the gap to the
    /// previous event (0 for the first), delta attributes pass through.
    pub fn temporal_deltas(&self, schema: &EventSchema) -> Vec<Vec<f64>> {
        let mut prev: Option<&Event> = None;
        let mut out = Vec::with_capacity(self.events.len());
        for ev in &self.events {
            let row = schema
                .temporal
                .iter()
                .enumerate()
                .map(|(i, t)| match t.kind {
                    TemporalKind::DeltaSeconds => ev.temporal[i],
                    TemporalKind::AbsoluteTimestamp => prev.map_or(0.0, |p| ev.temporal[i] - p.temporal[i]),
                })
                .collect();
            out.push(row);
            prev = Some(ev);
        }
        out
    }
}

fn csv_reader(path: &Path) -> Result<(csv::Reader<fs::File>, String)> {
    let file = fs::File::open(path).map_err(|_| UifmError::MissingInput(path.to_path_buf()))?;
    let name = path.display().to_string();
    if file.metadata()?.len() == 0 {
        return Err(UifmError::EmptyFile(name));
    }
    let reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    Ok((reader, name))
}

fn check_header(reader: &mut csv::Reader<fs::File>, expected: &[String], name: &str) -> Result<()> {
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    if header != expected {
        return Err(UifmError::Schema(format!("{name}: header {header:?} does not match schema {expected:?}")));
    }
    Ok(())
}

fn parse_f64(s: &str, path: &str, line: usize, col: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| UifmError::Parse {
        path: path.to_string(),
        line,
        msg: format!("column {col}: cannot parse {s:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(UifmError::Parse { path: path.to_string(), line, msg: format!("column {col}: non-finite {s:?}") });
    }
    Ok(v)
}

/// Read a session log, grouping rows by `session_id` (sessions in order of
/// first appearance) and sorting each session's events by timestamp
/// (stable for equal timestamps).
pub fn parse_session_log(path: &Path, schema: &EventSchema) -> Result<Vec<RawSession>> {
    schema.validate()?;
    let (mut reader, name) = csv_reader(path)?;
    let header = schema.session_header();
    check_header(&mut reader, &header, &name)?;
    let (nc, nn) = (schema.categorical.len(), schema.numerical.len());
    let ts = schema.timestamp_attr();
    let deltas: Vec<usize> = schema.delta_attrs().map(|(i, _)| i).collect();

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(i64, RawEvent)>> = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| UifmError::Parse { path: name.clone(), line, msg: e.to_string() })?;
        if rec.len() != header.len() {
            return Err(UifmError::Parse {
                path: name.clone(),
                line,
                msg: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let sid = rec[0].to_string();
        let stamp: i64 = rec[1].trim().parse().map_err(|_| UifmError::Parse {
            path: name.clone(),
            line,
            msg: format!("timestamp {:?} is not integer epoch seconds", &rec[1]),
        })?;
        let categorical = (0..nc).map(|j| rec[2 + j].to_string()).collect();
        let numerical = (0..nn)
            .map(|j| parse_f64(&rec[2 + nc + j], &name, line, &header[2 + nc + j]))
            .collect::<Result<Vec<_>>>()?;
        let mut temporal = vec![0.0; schema.temporal.len()];
        temporal[ts] = stamp as f64;
        for (j, &t) in deltas.iter().enumerate() {
            let col = 2 + nc + nn + j;
            temporal[t] = parse_f64(&rec[col], &name, line, &header[col])?;
        }
        let ev = RawEvent { categorical, numerical, temporal };
        groups
            .entry(sid.clone())
            .or_insert_with(|| {
                order.push(sid);
                Vec::new()
            })
            .push((stamp, ev));
    }
    if order.is_empty() {
        return Err(UifmError::EmptyFile(name));
    }
    Ok(order
        .into_iter()
        .map(|sid| {
            let mut evs = groups.remove(&sid).expect("grouped");
            evs.sort_by_key(|(t, _)| *t);
            RawSession { session_id: sid, events: evs.into_iter().map(|(_, e)| e).collect() }
        })
        .collect())
}

/// Write sessions in the log format read by [`parse_session_log`].
pub fn write_session_log(path: &Path, schema: &EventSchema, sessions: &[RawSession]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(schema.session_header())?;
    let ts = schema.timestamp_attr();
    let deltas: Vec<usize> = schema.delta_attrs().map(|(i, _)| i).collect();
    for s in sessions {
        for ev in &s.events {
            let mut row = vec![s.session_id.clone(), format!("{}", ev.temporal[ts] as i64)];
            row.extend(ev.categorical.iter().cloned());
            row.extend(ev.numerical.iter().map(|x| format!("{x}")));
            row.extend(deltas.iter().map(|&t| format!("{}", ev.temporal[t])));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRow {
    pub entity: String,
    pub categorical: Vec<String>,
    pub numerical: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetadataTable {
    pub rows: Vec<MetadataRow>,
    index: HashMap<String, usize>,
}

impl MetadataTable {
    pub fn new(rows: Vec<MetadataRow>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, r) in rows.iter().enumerate() {
            if index.insert(r.entity.clone(), i).is_some() {
                return Err(UifmError::Schema(format!("duplicate metadata row for entity {}", r.entity)));
            }
        }
        Ok(MetadataTable { rows, index })
    }

    pub fn get(&self, entity: &str) -> Option<&MetadataRow> {
        self.index.get(entity).map(|&i| &self.rows[i])
    }
}

pub fn parse_metadata(path: &Path, schema: &EventSchema) -> Result<MetadataTable> {
    let (mut reader, name) = csv_reader(path)?;
    let header = schema.metadata_header();
    check_header(&mut reader, &header, &name)?;
    let nc = schema.metadata.categorical.len();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| UifmError::Parse { path: name.clone(), line, msg: e.to_string() })?;
        if rec.len() != header.len() {
            return Err(UifmError::Parse {
                path: name.clone(),
                line,
                msg: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        rows.push(MetadataRow {
            entity: rec[0].to_string(),
            categorical: (0..nc).map(|j| rec[1 + j].to_string()).collect(),
            numerical: (1 + nc..rec.len())
                .map(|j| parse_f64(&rec[j], &name, line, &header[j]))
                .collect::<Result<_>>()?,
        });
    }
    if rows.is_empty() {
        return Err(UifmError::EmptyFile(name));
    }
    MetadataTable::new(rows)
}

pub fn write_metadata(path: &Path, schema: &EventSchema, table: &MetadataTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(schema.metadata_header())?;
    for r in &table.rows {
        let mut row = vec![r.entity.clone()];
        row.extend(r.categorical.iter().cloned());
        row.extend(r.numerical.iter().map(|x| format!("{x}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Index ↔ raw value map for one categorical attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    values: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(values: Vec<String>) -> Self {
        let index = values.iter().enumerate().skip(RESERVED).map(|(i, v)| (v.clone(), i as u32)).collect();
        Vocab { values, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.values
    }
}

impl Vocab {
    /// Reserved indices first, then values by descending frequency with
    /// lexicographic tie-break.
    pub fn from_counts(counts: &HashMap<String, usize>) -> Self {
        let mut items: Vec<(&String, usize)> = counts.iter().map(|(k, &c)| (k, c)).collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut values = vec!["<unk>".to_string(), "<mask>".to_string()];
        values.extend(items.into_iter().map(|(k, _)| k.clone()));
        Vocab::from(values)
    }

    pub fn from_values<'a>(values: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts = HashMap::new();
        for v in values {
            *counts.entry(v.to_string()).or_insert(0) += 1;
        }
        Self::from_counts(&counts)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() <= RESERVED
    }

    pub fn get(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, idx: u32) -> &str {
        &self.values[idx as usize]
    }

    /// Non-reserved values in index order.
    pub fn values(&self) -> &[String] {
        &self.values[RESERVED.min(self.values.len())..]
    }
}

/// Vocabularies for every categorical event attribute and categorical
/// metadata feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub categorical: Vec<Vocab>,
    pub metadata: Vec<Vocab>,
    /// Entity indices `2..2 + num_trained_entities` occur in training; the
    /// rest are known only from metadata.
    pub num_trained_entities: usize,
}

impl Vocabularies {
    pub fn entity_is_trained(&self, idx: u32) -> bool {
        (RESERVED..RESERVED + self.num_trained_entities).contains(&(idx as usize))
    }
}

/// Build vocabularies from training sessions.
///
/// Event attributes follow [`Vocab::from_counts`] over training
/// occurrences. The entity attribute is restricted to entities with a
/// metadata row: those seen in training come first (by frequency), then
/// metadata-only entities in lexicographic order. Metadata categorical
/// features are counted over all metadata rows.
pub fn build_vocab(train: &[RawSession], schema: &EventSchema, metadata: &MetadataTable) -> Vocabularies {
    let entity = schema.entity_attr();
    let mut counts: Vec<HashMap<String, usize>> = vec![HashMap::new(); schema.categorical.len()];
    for s in train {
        for ev in &s.events {
            for (j, v) in ev.categorical.iter().enumerate() {
                if j == entity && metadata.get(v).is_none() {
                    continue;
                }
                *counts[j].entry(v.clone()).or_insert(0) += 1;
            }
        }
    }
    let num_trained = counts[entity].len();
    let mut categorical: Vec<Vocab> = counts.iter().map(Vocab::from_counts).collect();
    let mut unseen: Vec<&String> =
        metadata.rows.iter().map(|r| &r.entity).filter(|e| !counts[entity].contains_key(*e)).collect();
    unseen.sort();
    let mut values = categorical[entity].values.clone();
    values.extend(unseen.into_iter().cloned());
    categorical[entity] = Vocab::from(values);

    let metadata_vocabs = (0..schema.metadata.categorical.len())
        .map(|j| Vocab::from_values(metadata.rows.iter().map(|r| r.categorical[j].as_str())))
        .collect();
    Vocabularies { categorical, metadata: metadata_vocabs, num_trained_entities: num_trained }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub sessions: usize,
    pub events: usize,
    /// Raw values mapped to UNK, over all attributes.
    pub unk_count: usize,
    pub unk_by_attr: BTreeMap<String, usize>,
}

/// Map raw sessions to vocabulary indices; unknown values become [`UNK`].
pub fn encode_sessions(
    raw: &[RawSession],
    schema: &EventSchema,
    vocabs: &Vocabularies,
) -> (Vec<Session>, IngestReport) {
    let mut report = IngestReport { sessions: raw.len(), ..Default::default() };
    let sessions = raw
        .iter()
        .map(|s| Session {
            user_id: s.session_id.clone(),
            events: s
                .events
                .iter()
                .map(|ev| {
                    report.events += 1;
                    let categorical = ev
                        .categorical
                        .iter()
                        .enumerate()
                        .map(|(j, v)| {
                            vocabs.categorical[j].get(v).unwrap_or_else(|| {
                                report.unk_count += 1;
                                *report.unk_by_attr.entry(schema.categorical[j].name.clone()).or_insert(0) += 1;
                                UNK
                            })
                        })
                        .collect();
                    Event { categorical, numerical: ev.numerical.clone(), temporal: ev.temporal.clone() }
                })
                .collect(),
        })
        .collect();
    (sessions, report)
}

/// Parse a session log and encode it against existing vocabularies.
pub fn ingest_session_log(
    path: &Path,
    schema: &EventSchema,
    vocabs: &Vocabularies,
) -> Result<(Vec<Session>, IngestReport)> {
    let raw = parse_session_log(path, schema)?;
    Ok(encode_sessions(&raw, schema, vocabs))
}

pub const NORM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrStats {
    pub name: String,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl AttrStats {
    pub fn from_values(name: &str, values: &[f64]) -> Self {
        if values.is_empty() {
            return AttrStats { name: name.to_string(), mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        AttrStats { name: name.to_string(), mean, std: var.sqrt() }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / (self.std + NORM_EPSILON)
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * (self.std + NORM_EPSILON) + self.mean
    }
}

/// Z-score statistics for numerical attributes and temporal inputs, computed
/// on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub numerical: Vec<AttrStats>,
    /// Over the per-event temporal inputs (gaps for absolute timestamps).
    pub temporal: Vec<AttrStats>,
    pub epsilon: f64,
}

pub fn compute_norm_stats(sessions: &[Session], schema: &EventSchema) -> NormStats {
    let numerical = schema
        .numerical
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let vals: Vec<f64> = sessions.iter().flat_map(|s| s.events.iter().map(move |e| e.numerical[j])).collect();
            AttrStats::from_values(&a.name, &vals)
        })
        .collect();
    let deltas: Vec<Vec<Vec<f64>>> = sessions.iter().map(|s| s.temporal_deltas(schema)).collect();
    let temporal = schema
        .temporal
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let vals: Vec<f64> = deltas.iter().flat_map(|s| s.iter().map(move |row| row[j])).collect();
            AttrStats::from_values(&a.name, &vals)
        })
        .collect();
    NormStats { numerical, temporal, epsilon: NORM_EPSILON }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Fraction of distinct entity ids withheld from training.
    pub holdout_fraction: f64,
    /// Fractions of cold-free sessions routed to validation and test.
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { holdout_fraction: 0.1, validation_fraction: 0.05, test_fraction: 0.1, seed: 17 }
    }
}

/// Session indices per split plus the withheld entity ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub cold_item_ids: BTreeSet<String>,
}

/// Withhold a seeded random subset of entity ids. Every session containing a
/// withheld id goes to test; the remaining sessions are shuffled and divided
/// into validation, test and train.
pub fn make_cold_start_split(sessions: &[RawSession], schema: &EventSchema, cfg: &SplitConfig) -> Result<SplitSpec> {
    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(UifmError::InvalidArgument(format!("holdout_fraction {} not in [0,1)", cfg.holdout_fraction)));
    }
    if cfg.validation_fraction < 0.0 || cfg.test_fraction < 0.0 || cfg.validation_fraction + cfg.test_fraction >= 1.0 {
        return Err(UifmError::InvalidArgument("validation_fraction + test_fraction must be in [0,1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entities: Vec<&str> =
        sessions.iter().flat_map(|s| s.entity_ids(schema)).collect::<BTreeSet<_>>().into_iter().collect();
    let n_cold = (cfg.holdout_fraction * entities.len() as f64).round() as usize;
    entities.shuffle(&mut rng);
    let cold: BTreeSet<String> = entities[..n_cold].iter().map(|s| s.to_string()).collect();

    let mut test = Vec::new();
    let mut clean = Vec::new();
    for (i, s) in sessions.iter().enumerate() {
        if s.entity_ids(schema).any(|e| cold.contains(e)) {
            test.push(i);
        } else {
            clean.push(i);
        }
    }
    clean.shuffle(&mut rng);
    let n_val = (cfg.validation_fraction * clean.len() as f64).round() as usize;
    let n_test = (cfg.test_fraction * clean.len() as f64).round() as usize;
    let mut validation = clean[..n_val].to_vec();
    test.extend_from_slice(&clean[n_val..n_val + n_test]);
    let mut train = clean[n_val + n_test..].to_vec();
    if train.is_empty() {
        return Err(UifmError::InvalidArgument(format!(
            "holdout_fraction {} leaves no training sessions",
            cfg.holdout_fraction
        )));
    }
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(SplitSpec { train, validation, test, cold_item_ids: cold })
}

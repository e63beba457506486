//! End-to-end preparation of a raw corpus: parse, split, build vocabularies
//! and statistics on the training split, encode every split.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UifmError};
use crate::hybrid::EntityCatalog;
use crate::schema::{
    build_vocab, compute_norm_stats, encode_sessions, make_cold_start_split, parse_metadata, parse_session_log,
    EventSchema, IngestReport, MetadataTable, NormStats, RawSession, Session, SplitConfig, SplitSpec, Vocabularies,
};

/// Counts written by `ingest`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train_sessions: usize,
    pub validation_sessions: usize,
    pub test_sessions: usize,
    pub cold_items: usize,
    pub entity_vocab: usize,
    pub trained_entities: usize,
    pub train_report: IngestReport,
    pub validation_report: IngestReport,
    pub test_report: IngestReport,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Schema with vocabulary sizes filled in.
    pub schema: EventSchema,
    pub vocabs: Vocabularies,
    pub norm: NormStats,
    pub catalog: EntityCatalog,
    pub split: SplitSpec,
    pub train: Vec<Session>,
    pub validation: Vec<Session>,
    pub test: Vec<Session>,
    pub summary: DatasetSummary,
}

impl Dataset {
    pub fn from_files(
        schema_path: &Path,
        sessions_path: &Path,
        metadata_path: &Path,
        split: &SplitConfig,
    ) -> Result<Self> {
        for p in [schema_path, sessions_path, metadata_path] {
            if !p.exists() {
                return Err(UifmError::MissingInput(p.to_path_buf()));
            }
        }
        let schema = EventSchema::from_json_file(schema_path)?;
        let raw = parse_session_log(sessions_path, &schema)?;
        let metadata = parse_metadata(metadata_path, &schema)?;
        Self::from_raw(&schema, &raw, &metadata, split)
    }

    /// Prepare from a `data` directory holding `schema.json`, `sessions.csv`
    /// and `metadata.csv`.
    pub fn from_dir(dir: &Path, split: &SplitConfig) -> Result<Self> {
        Self::from_files(&dir.join("schema.json"), &dir.join("sessions.csv"), &dir.join("metadata.csv"), split)
    }

    pub fn from_raw(
        schema: &EventSchema,
        raw: &[RawSession],
        metadata: &MetadataTable,
        split: &SplitConfig,
    ) -> Result<Self> {
        schema.validate()?;
        for session in raw {
            if let Some(id) = session.entity_ids(schema).find(|id| metadata.get(id).is_none()) {
                return Err(UifmError::MissingMetadata(id.to_string()));
            }
        }
        let spec = make_cold_start_split(raw, schema, split)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| raw[i].clone()).collect::<Vec<_>>();
        let (train_raw, val_raw, test_raw) = (pick(&spec.train), pick(&spec.validation), pick(&spec.test));
        let vocabs = build_vocab(&train_raw, schema, metadata);
        let resolved = schema.resolved(&vocabs)?;
        let (train, train_report) = encode_sessions(&train_raw, schema, &vocabs);
        let (validation, validation_report) = encode_sessions(&val_raw, schema, &vocabs);
        let (test, test_report) = encode_sessions(&test_raw, schema, &vocabs);
        let norm = compute_norm_stats(&train, schema);
        let catalog = EntityCatalog::build(schema, &vocabs, metadata)?;
        let summary = DatasetSummary {
            train_sessions: train.len(),
            validation_sessions: validation.len(),
            test_sessions: test.len(),
            cold_items: spec.cold_item_ids.len(),
            entity_vocab: catalog.len(),
            trained_entities: catalog.num_trained,
            train_report,
            validation_report,
            test_report,
        };
        Ok(Dataset { schema: resolved, vocabs, norm, catalog, split: spec, train, validation, test, summary })
    }

    /// Entity indices of the withheld ids that have metadata.
    pub fn cold_entities(&self) -> BTreeSet<u32> {
        let ev = &self.vocabs.categorical[self.schema.entity_attr()];
        self.split.cold_item_ids.iter().filter_map(|id| ev.get(id)).collect()
    }
}

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionMode, Backbone, BackboneConfig, BackboneOutput, SeqLayout};
use crate::error::{Result, UifmError};
use crate::hybrid::{EmbeddingMode, EntityCatalog, EntityMetadata, HybridConfig, HybridEmbedding};
use crate::layers::Linear;
use crate::numeric::{checkpoint, Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::schema::{EventSchema, NormStats, Session, Vocabularies, RESERVED};
use crate::tokenizer::{CompositeTokenizer, TokenInputs, TokenizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub hybrid: HybridConfig,
    pub backbone: BackboneConfig,
    /// Std of the truncated-normal weight init.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tokenizer: TokenizerConfig::default(),
            hybrid: HybridConfig::default(),
            backbone: BackboneConfig::default(),
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.backbone.validate()?;
        if self.tokenizer.d_model != self.backbone.d_model {
            return Err(UifmError::Config(format!(
                "tokenizer d_model {} != backbone d_model {}",
                self.tokenizer.d_model, self.backbone.d_model
            )));
        }
        if self.hybrid.side_cat_width == 0 || self.hybrid.side_num_width == 0 || self.hybrid.meta_hidden == 0 {
            return Err(UifmError::Config("hybrid widths must be >= 1".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(UifmError::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Everything besides the weights needed to rebuild a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub schema: EventSchema,
    pub norm: NormStats,
    pub catalog: EntityCatalog,
    pub vocabs: Vocabularies,
    pub mode: EmbeddingMode,
}

impl ModelSpec {
    pub fn for_dataset(config: ModelConfig, ds: &crate::dataset::Dataset, mode: EmbeddingMode) -> Self {
        ModelSpec {
            config,
            schema: ds.schema.clone(),
            norm: ds.norm.clone(),
            catalog: ds.catalog.clone(),
            vocabs: ds.vocabs.clone(),
            mode,
        }
    }
}

/// Rows of a batch packed for the tokenizer and backbone.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    pub layout: SeqLayout,
    pub inputs: TokenInputs,
}

impl PackedBatch {
    /// Entity index at real position `p` of sequence `b`.
    pub fn entity(&self, entity_attr: usize, b: usize, p: usize) -> u32 {
        self.inputs.categorical[entity_attr][self.layout.row(b, p)]
    }
}

/// Plain-value view of one hybrid evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEntity<T> {
    pub v_id: Vec<T>,
    pub v_meta: Vec<T>,
    pub gate: Vec<T>,
    pub v_final: Vec<T>,
}

/// The full network: composite tokenizer, hybrid entity embeddings,
/// sparse-attention backbone, tied scorer and masked-attribute heads.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    pub(crate) tokenizer: CompositeTokenizer,
    pub(crate) hybrid: HybridEmbedding,
    pub(crate) backbone: Backbone,
    /// Learned replacement for event-masked composite tokens.
    pub(crate) mask_token: ParamId,
    /// Per categorical attribute; `None` for the entity attribute (scored by
    /// the tied scorer) and for attributes with fewer than two real values.
    pub(crate) attr_heads: Vec<Option<Linear>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.config.validate()?;
        spec.schema.validate_resolved()?;
        let entity_attr = spec.schema.entity_attr();
        if spec.schema.categorical[entity_attr].vocab_size != spec.catalog.len() {
            return Err(UifmError::Schema(format!(
                "entity vocab size {} but catalog has {} rows",
                spec.schema.categorical[entity_attr].vocab_size,
                spec.catalog.len()
            )));
        }
        let cfg = spec.config;
        let std = cfg.init_std;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tokenizer = CompositeTokenizer::new(&mut store, &cfg.tokenizer, &spec.schema, std, &mut rng)?;
        let hybrid = HybridEmbedding::new(
            &mut store,
            &cfg.hybrid,
            &spec.catalog,
            cfg.tokenizer.d_cat,
            cfg.tokenizer.d_model,
            std,
            &mut rng,
        )?;
        let backbone = Backbone::new(&mut store, &cfg.backbone, std, &mut rng)?;
        let mask_token =
            store.add("objective.mask_token", vec![cfg.backbone.d_model], Init::TruncNormal(std), true, &mut rng)?;
        let attr_heads = spec
            .schema
            .categorical
            .iter()
            .map(|a| {
                if a.is_entity_id || a.vocab_size < RESERVED + 2 {
                    Ok(None)
                } else {
                    Linear::new(
                        &mut store,
                        &format!("objective.head.{}", a.name),
                        cfg.backbone.d_model,
                        a.vocab_size - RESERVED,
                        std,
                        &mut rng,
                    )
                    .map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { spec, store, tokenizer, hybrid, backbone, mask_token, attr_heads })
    }

    /// Rebuild around existing weights. Names and shapes must match a fresh
    /// build of `spec`.
    pub fn with_store(spec: ModelSpec, store: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        if model.store.len() != store.len() {
            return Err(UifmError::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for ((_, a), (_, b)) in model.store.iter().zip(store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(UifmError::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn schema(&self) -> &EventSchema {
        &self.spec.schema
    }

    pub fn catalog(&self) -> &EntityCatalog {
        &self.spec.catalog
    }

    pub fn config(&self) -> &ModelConfig {
        &self.spec.config
    }

    pub fn mode(&self) -> EmbeddingMode {
        self.spec.mode
    }

    pub fn set_mode(&mut self, mode: EmbeddingMode) {
        self.spec.mode = mode;
    }

    pub fn entity_attr(&self) -> usize {
        self.spec.schema.entity_attr()
    }

    /// Entity indices that have a trained ID row.
    pub fn trained_entities(&self) -> Vec<u32> {
        (RESERVED..RESERVED + self.spec.catalog.num_trained).map(|i| i as u32).collect()
    }

    /// Every non-reserved entity index.
    pub fn all_entities(&self) -> Vec<u32> {
        (RESERVED..self.spec.catalog.len()).map(|i| i as u32).collect()
    }

    /// Pack sessions right-aligned. Sessions longer than the position table
    /// keep their most recent events.
    pub fn pack(&self, sessions: &[&Session]) -> Result<PackedBatch> {
        let cap = self.spec.config.backbone.max_positions;
        let trimmed: Vec<&[crate::schema::Event]> = sessions
            .iter()
            .map(|s| {
                let start = s.events.len().saturating_sub(cap);
                &s.events[start..]
            })
            .collect();
        let deltas: Vec<Vec<Vec<f64>>> = sessions
            .iter()
            .zip(&trimmed)
            .map(|(s, t)| {
                let all = s.temporal_deltas(&self.spec.schema);
                all[all.len() - t.len()..].to_vec()
            })
            .collect();
        let layout = SeqLayout::new(trimmed.iter().map(|t| t.len()).collect())?;
        let mut rows = Vec::with_capacity(layout.rows());
        for (b, events) in trimmed.iter().enumerate() {
            rows.extend((0..layout.pad(b)).map(|_| None));
            rows.extend(events.iter().zip(&deltas[b]).map(|(e, d)| Some((e, d.as_slice()))));
        }
        let inputs = TokenInputs::build(&self.spec.schema, &self.spec.norm, self.spec.config.tokenizer.d_time, &rows)?;
        Ok(PackedBatch { layout, inputs })
    }

    /// `v_final` for every entity index under the current mode.
    pub fn entity_table(&self, g: &mut Graph<T>) -> Result<Var> {
        self.hybrid.entity_table(g, &self.store, &self.spec.catalog, self.spec.mode, None)
    }

    /// As [`Model::entity_table`], with the entities flagged in `hidden`
    /// (indexed by entity index) routed through the no-ID path.
    pub fn entity_table_hiding(&self, g: &mut Graph<T>, hidden: &[bool]) -> Result<Var> {
        self.hybrid.entity_table(g, &self.store, &self.spec.catalog, self.spec.mode, Some(hidden))
    }

    /// Composite tokens for packed inputs.
    pub fn tokens(&self, g: &mut Graph<T>, inputs: &TokenInputs, entity_table: Var) -> Result<Var> {
        self.tokenizer.forward(g, &self.store, inputs, entity_table)
    }

    /// Tokens → backbone. Rows flagged in `event_mask` are replaced by the
    /// learned mask token before the backbone.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        batch: &PackedBatch,
        inputs: &TokenInputs,
        mode: AttentionMode,
        entity_table: Var,
        event_mask: Option<&[bool]>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BackboneOutput> {
        let mut x = self.tokens(g, inputs, entity_table)?;
        if let Some(mask) = event_mask {
            let m = g.param(&self.store, self.mask_token)?;
            x = g.fill_rows(x, m, mask.to_vec())?;
        }
        self.backbone.forward(g, &self.store, x, &batch.layout, mode, rng)
    }

    /// Logits `[rows.len() × candidates.len()]`: each selected hidden row
    /// dotted with every candidate's projected `v_final`.
    pub fn score_rows(
        &self,
        g: &mut Graph<T>,
        hidden: Var,
        rows: &[usize],
        entity_table: Var,
        candidates: &[u32],
    ) -> Result<Var> {
        let h = g.gather_rows(hidden, rows.iter().map(|&r| Some(r)).collect())?;
        let c = self.hybrid.candidate_matrix(g, &self.store, entity_table, candidates)?;
        g.matmul_bt(h, c)
    }

    /// Logits of one attribute head for the selected hidden rows.
    pub fn attribute_logits(&self, g: &mut Graph<T>, hidden: Var, rows: &[usize], attr: usize) -> Result<Var> {
        let head = self
            .attr_heads
            .get(attr)
            .and_then(|h| h.as_ref())
            .ok_or_else(|| UifmError::InvalidArgument(format!("attribute {attr} has no prediction head")))?;
        let h = g.gather_rows(hidden, rows.iter().map(|&r| Some(r)).collect())?;
        head.forward(g, &self.store, h)
    }

    pub fn has_attribute_head(&self, attr: usize) -> bool {
        matches!(self.attr_heads.get(attr), Some(Some(_)))
    }

    /// Composite tokens of one session, `[T × d_model]`.
    pub fn fuse_session(&self, session: &Session) -> Result<Tensor<T>> {
        let batch = self.pack(&[session])?;
        let mut g = Graph::new();
        let table = self.entity_table(&mut g)?;
        let x = self.tokens(&mut g, &batch.inputs, table)?;
        Ok(g.value(x).clone())
    }

    /// Composite token of a single event given its temporal gaps.
    pub fn fuse(&self, event: &crate::schema::Event, temporal_gaps: &[f64]) -> Result<Vec<T>> {
        let inputs = TokenInputs::build(
            &self.spec.schema,
            &self.spec.norm,
            self.spec.config.tokenizer.d_time,
            &[Some((event, temporal_gaps))],
        )?;
        let mut g = Graph::new();
        let table = self.entity_table(&mut g)?;
        let x = self.tokens(&mut g, &inputs, table)?;
        Ok(g.value(x).data().to_vec())
    }

    /// Embedding of one categorical value; the entity attribute returns its
    /// fused representation.
    pub fn embed_categorical(&self, attr: usize, value: u32) -> Result<Vec<T>> {
        let a = self.spec.schema.categorical.get(attr).ok_or_else(|| UifmError::IndexOutOfRange {
            what: "categorical attribute".into(),
            index: attr,
            size: self.spec.schema.categorical.len(),
        })?;
        if value as usize >= a.vocab_size {
            return Err(UifmError::IndexOutOfRange { what: a.name.clone(), index: value as usize, size: a.vocab_size });
        }
        let mut g = Graph::new();
        let table = self.entity_table(&mut g)?;
        let v = self.tokenizer.embed_categorical(&mut g, &self.store, attr, &[value], table)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Backbone outputs for precomputed tokens of a single sequence.
    pub fn backbone_forward(&self, tokens: &Tensor<T>, mode: AttentionMode) -> Result<Tensor<T>> {
        let layout = SeqLayout::single(tokens.rows())?;
        let mut g = Graph::new();
        let x = g.input(tokens.clone())?;
        let out = self.backbone.forward::<T, ChaCha8Rng>(&mut g, &self.store, x, &layout, mode, None)?;
        Ok(g.value(out.hidden).clone())
    }

    /// `[h_1..h_T]` for one session.
    pub fn hidden_states(&self, session: &Session, mode: AttentionMode) -> Result<Tensor<T>> {
        let batch = self.pack(&[session])?;
        let mut g = Graph::new();
        let table = self.entity_table(&mut g)?;
        let out = self.forward(&mut g, &batch, &batch.inputs, mode, table, None, None)?;
        Ok(g.value(out.hidden).clone())
    }

    /// Causal summary `h_T` of each session.
    pub fn summaries(&self, sessions: &[&Session]) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(sessions.len());
        for chunk in sessions.chunks(64) {
            let batch = self.pack(chunk)?;
            let mut g = Graph::new();
            let table = self.entity_table(&mut g)?;
            let o = self.forward(&mut g, &batch, &batch.inputs, AttentionMode::Causal, table, None, None)?;
            out.extend(crate::backbone::summary(g.value(o.hidden), &batch.layout));
        }
        Ok(out)
    }

    /// Score `h` against candidate entity indices.
    pub fn score_candidates(&self, h: &[T], candidates: &[u32]) -> Result<Vec<T>> {
        if candidates.is_empty() {
            return Err(UifmError::InvalidArgument("empty candidate list".into()));
        }
        for &c in candidates {
            self.spec.catalog.metadata(c)?;
        }
        let mut g = Graph::new();
        let table = self.entity_table(&mut g)?;
        let hv = g.input(Tensor::matrix(1, h.len(), h.to_vec())?)?;
        let logits = self.score_rows(&mut g, hv, &[0], table, candidates)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Hybrid evaluation for one entity. `entity_id = None` (or an index
    /// without a trained row) means `v_id` is the zero vector.
    pub fn fuse_entity(&self, entity_id: Option<u32>, metadata: &EntityMetadata) -> Result<FusedEntity<T>> {
        let row = entity_id.filter(|&e| self.spec.catalog.is_trained(e)).map(|e| e as usize);
        let mut g = Graph::new();
        let nodes = self.hybrid.fuse(&mut g, &self.store, &self.spec.catalog, &[row], &[metadata], self.spec.mode)?;
        Ok(FusedEntity {
            v_id: g.value(nodes.v_id).data().to_vec(),
            v_meta: g.value(nodes.v_meta).data().to_vec(),
            gate: g.value(nodes.gate).data().to_vec(),
            v_final: g.value(nodes.v_final).data().to_vec(),
        })
    }

    /// Projected candidate vectors for every entity index, `[V × d_model]`;
    /// row `i` dotted with a hidden state is the score of entity `i`.
    pub fn candidate_projection(&self) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let table = self.entity_table(&mut g)?;
        let all: Vec<u32> = (0..self.spec.catalog.len() as u32).collect();
        let c = self.hybrid.candidate_matrix(&mut g, &self.store, table, &all)?;
        Ok(g.value(c).clone())
    }

    /// `v_meta` for one metadata row.
    pub fn synthesize_meta(&self, metadata: &EntityMetadata) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let v = self.hybrid.synthesize_meta(&mut g, &self.store, &self.spec.catalog, &[metadata])?;
        Ok(g.value(v).data().to_vec())
    }

    /// `v_final` of every catalog entity, in entity index order.
    pub fn entity_embeddings(&self) -> Result<Vec<(u32, Vec<T>)>> {
        let mut g = Graph::new();
        let table = self.entity_table(&mut g)?;
        let t = g.value(table);
        Ok((RESERVED..self.spec.catalog.len()).map(|i| (i as u32, t.row(i).to_vec())).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.store, &self.spec.schema.fingerprint(), serde_json::to_value(&self.spec)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, header) = checkpoint::decode::<T>(bytes)?;
        let spec: ModelSpec = serde_json::from_value(header.extra)?;
        if spec.schema.fingerprint() != header.schema_fingerprint {
            return Err(UifmError::Schema("checkpoint schema fingerprint mismatch".into()));
        }
        Self::with_store(spec, store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|_| UifmError::MissingInput(path.to_path_buf()))?;
        Self::from_bytes(&bytes)
    }

    /// Copy converted to another element precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            store: self.store.cast(),
            tokenizer: self.tokenizer.clone(),
            hybrid: self.hybrid.clone(),
            backbone: self.backbone.clone(),
            mask_token: self.mask_token,
            attr_heads: self.attr_heads.clone(),
        }
    }
}

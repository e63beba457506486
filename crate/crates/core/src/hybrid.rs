//! Gated hybrid entity embeddings.
//!
//! Every entity gets `v_final = g ⊙ v_id + (1 − g) ⊙ v_meta`, where `v_id`
//! is a learned row (exactly zero for entities never seen in training),
//! `v_meta` is synthesized from side features by a small MLP and
//! `g = σ(W_g·v_meta + b_g)`. Candidates are scored against a sequence
//! summary through one shared linear map, so entities without a trained row
//! can still be ranked.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UifmError};
use crate::layers::Linear;
use crate::numeric::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::schema::{AttrStats, EventSchema, MetadataTable, Vocabularies, MASK, RESERVED, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridConfig {
    /// Embedding width of each categorical side feature.
    pub side_cat_width: usize,
    /// Projection width of each real-valued side feature.
    pub side_num_width: usize,
    pub meta_hidden: usize,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig { side_cat_width: 16, side_num_width: 8, meta_hidden: 64 }
    }
}

/// Which entity representation feeds tokens and the scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    /// Gated ID + metadata fusion.
    #[default]
    Full,
    /// Gate fixed at 1; entities without a trained row fall back to the UNK
    /// row.
    NoColdStart,
}

/// Encoded side features of one entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMetadata {
    /// Entity vocabulary index, or `None` for an entity outside the
    /// vocabulary.
    pub entity_id: Option<u32>,
    /// Indices into the metadata feature vocabularies.
    pub categorical: Vec<u32>,
    /// Raw real-valued features.
    pub numerical: Vec<f64>,
}

/// Side features for every entity vocabulary index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityCatalog {
    /// Indexed by entity vocabulary index; reserved indices have none.
    pub entities: Vec<Option<EntityMetadata>>,
    pub num_trained: usize,
    pub side_vocab_sizes: Vec<usize>,
    /// Statistics of real side features over trained entities.
    pub side_stats: Vec<AttrStats>,
}

impl EntityCatalog {
    pub fn build(schema: &EventSchema, vocabs: &Vocabularies, metadata: &MetadataTable) -> Result<Self> {
        let ev = &vocabs.categorical[schema.entity_attr()];
        let mut entities = vec![None, None];
        for (i, raw) in ev.values().iter().enumerate() {
            let row = metadata.get(raw).ok_or_else(|| UifmError::MissingMetadata(raw.clone()))?;
            let categorical =
                row.categorical.iter().zip(&vocabs.metadata).map(|(v, voc)| voc.get(v).unwrap_or(UNK)).collect();
            entities.push(Some(EntityMetadata {
                entity_id: Some((i + RESERVED) as u32),
                categorical,
                numerical: row.numerical.clone(),
            }));
        }
        let trained = &entities[RESERVED..RESERVED + vocabs.num_trained_entities];
        let side_stats = schema
            .metadata
            .numerical
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let vals: Vec<f64> = trained.iter().flatten().map(|m| m.numerical[j]).collect();
                AttrStats::from_values(name, &vals)
            })
            .collect();
        Ok(EntityCatalog {
            entities,
            num_trained: vocabs.num_trained_entities,
            side_vocab_sizes: vocabs.metadata.iter().map(|v| v.len()).collect(),
            side_stats,
        })
    }

    /// Entity vocabulary size including reserved indices.
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.len() <= RESERVED
    }

    pub fn is_trained(&self, idx: u32) -> bool {
        (RESERVED..RESERVED + self.num_trained).contains(&(idx as usize))
    }

    /// Rows of the ID table: reserved rows plus one per trained entity.
    pub fn id_rows(&self) -> usize {
        RESERVED + self.num_trained
    }

    pub fn metadata(&self, idx: u32) -> Result<&EntityMetadata> {
        self.entities
            .get(idx as usize)
            .and_then(|m| m.as_ref())
            .ok_or_else(|| UifmError::MissingMetadata(format!("index {idx}")))
    }

    pub(crate) fn check(&self, meta: &EntityMetadata) -> Result<()> {
        if meta.categorical.len() != self.side_vocab_sizes.len() || meta.numerical.len() != self.side_stats.len() {
            return Err(UifmError::Schema(format!(
                "metadata arity ({}, {}) does not match ({}, {})",
                meta.categorical.len(),
                meta.numerical.len(),
                self.side_vocab_sizes.len(),
                self.side_stats.len()
            )));
        }
        for (&v, &n) in meta.categorical.iter().zip(&self.side_vocab_sizes) {
            if v as usize >= n {
                return Err(UifmError::IndexOutOfRange {
                    what: "metadata vocabulary".into(),
                    index: v as usize,
                    size: n,
                });
            }
        }
        if meta.numerical.iter().any(|x| !x.is_finite()) {
            return Err(UifmError::Schema("non-finite metadata feature".into()));
        }
        Ok(())
    }
}

/// Parameters of the hybrid embedding and the tied candidate scorer.
#[derive(Debug, Clone)]
pub struct HybridEmbedding {
    pub(crate) id_table: ParamId,
    side_tables: Vec<ParamId>,
    side_proj: Vec<Linear>,
    meta_in: Linear,
    meta_out: Linear,
    pub(crate) gate_w: ParamId,
    pub(crate) gate_b: ParamId,
    /// `d_cat → d_model` map applied to candidate representations.
    pub(crate) out_proj: ParamId,
    d_cat: usize,
}

/// Graph nodes of one hybrid evaluation, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct FusedNodes {
    pub v_id: Var,
    pub v_meta: Var,
    pub gate: Var,
    pub v_final: Var,
}

impl HybridEmbedding {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &HybridConfig,
        catalog: &EntityCatalog,
        d_cat: usize,
        d_model: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let id_table =
            store.add("hybrid.id_table", vec![catalog.id_rows(), d_cat], Init::TruncNormal(std), true, rng)?;
        let side_tables = catalog
            .side_vocab_sizes
            .iter()
            .enumerate()
            .map(|(j, &n)| {
                store.add(
                    &format!("hybrid.side_cat{j}"),
                    vec![n, cfg.side_cat_width],
                    Init::TruncNormal(std),
                    true,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let side_proj = (0..catalog.side_stats.len())
            .map(|j| Linear::new(store, &format!("hybrid.side_num{j}"), 1, cfg.side_num_width, std, rng))
            .collect::<Result<Vec<_>>>()?;
        let meta_width = side_tables.len() * cfg.side_cat_width + side_proj.len() * cfg.side_num_width;
        if meta_width == 0 {
            return Err(UifmError::Schema("metadata must declare at least one side feature".into()));
        }
        let meta_in = Linear::new(store, "hybrid.meta1", meta_width, cfg.meta_hidden, std, rng)?;
        let meta_out = Linear::new(store, "hybrid.meta2", cfg.meta_hidden, d_cat, std, rng)?;
        let gate_w = store.add("hybrid.gate.w", vec![d_cat, d_cat], Init::TruncNormal(std), true, rng)?;
        let gate_b = store.add("hybrid.gate.b", vec![d_cat], Init::Const(0.0), false, rng)?;
        let out_proj = store.add("hybrid.out_proj", vec![d_cat, d_model], Init::TruncNormal(std), true, rng)?;
        Ok(HybridEmbedding { id_table, side_tables, side_proj, meta_in, meta_out, gate_w, gate_b, out_proj, d_cat })
    }

    /// `v_meta` for each metadata row: side embeddings and projected
    /// normalized reals, concatenated and passed through the meta MLP.
    pub fn synthesize_meta<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        catalog: &EntityCatalog,
        metas: &[&EntityMetadata],
    ) -> Result<Var> {
        if metas.is_empty() {
            return Err(UifmError::InvalidArgument("no metadata rows".into()));
        }
        for m in metas {
            catalog.check(m)?;
        }
        let mut parts = Vec::new();
        for (j, &table) in self.side_tables.iter().enumerate() {
            let t = g.param(store, table)?;
            parts.push(g.gather_rows(t, metas.iter().map(|m| Some(m.categorical[j] as usize)).collect())?);
        }
        for (j, lin) in self.side_proj.iter().enumerate() {
            let stats = &catalog.side_stats[j];
            let col: Vec<T> = metas.iter().map(|m| T::lit(stats.normalize(m.numerical[j]))).collect();
            let x = g.input(Tensor::matrix(metas.len(), 1, col)?)?;
            parts.push(lin.forward(g, store, x)?);
        }
        let x = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
        let h = self.meta_in.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.meta_out.forward(g, store, h)
    }

    /// `σ(W_g·v_meta + b_g)` row by row.
    pub fn gate<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, v_meta: Var) -> Result<Var> {
        let w = g.param(store, self.gate_w)?;
        let b = g.param(store, self.gate_b)?;
        let z = g.matmul_bt(v_meta, w)?;
        let z = g.add_row(z, b)?;
        g.sigmoid(z)
    }

    /// Fused representation of each `(id row, metadata)` pair; `None` id rows
    /// stand for entities without a trained row and contribute exact zeros.
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        catalog: &EntityCatalog,
        id_rows: &[Option<usize>],
        metas: &[&EntityMetadata],
        mode: EmbeddingMode,
    ) -> Result<FusedNodes> {
        let table = g.param(store, self.id_table)?;
        let v_meta = self.synthesize_meta(g, store, catalog, metas)?;
        match mode {
            EmbeddingMode::Full => {
                let v_id = g.gather_rows(table, id_rows.to_vec())?;
                let gate = self.gate(g, store, v_meta)?;
                let kept = g.mul(gate, v_id)?;
                let inv = g.one_minus(gate)?;
                let synth = g.mul(inv, v_meta)?;
                let v_final = g.add(kept, synth)?;
                Ok(FusedNodes { v_id, v_meta, gate, v_final })
            }
            EmbeddingMode::NoColdStart => {
                let v_id = g.gather_rows(table, id_rows.iter().map(|r| Some(r.unwrap_or(UNK as usize))).collect())?;
                let ones = Tensor::full(vec![id_rows.len(), self.d_cat], T::one());
                let gate = g.input(ones)?;
                Ok(FusedNodes { v_id, v_meta, gate, v_final: v_id })
            }
        }
    }

    /// `v_final` for every entity vocabulary index (reserved indices use
    /// their ID rows directly). Entities flagged in `hidden_ids` are treated
    /// as if they had no trained row.
    pub fn entity_table<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        catalog: &EntityCatalog,
        mode: EmbeddingMode,
        hidden_ids: Option<&[bool]>,
    ) -> Result<Var> {
        let table = g.param(store, self.id_table)?;
        let reserved = g.gather_rows(table, vec![Some(UNK as usize), Some(MASK as usize)])?;
        if catalog.is_empty() {
            return Ok(reserved);
        }
        let metas: Vec<&EntityMetadata> = catalog.entities[RESERVED..].iter().map(|m| m.as_ref().unwrap()).collect();
        let rows: Vec<Option<usize>> = (RESERVED..catalog.len())
            .map(|i| {
                let hidden = hidden_ids.is_some_and(|h| h.get(i).copied().unwrap_or(false));
                (catalog.is_trained(i as u32) && !hidden).then_some(i)
            })
            .collect();
        let fused = self.fuse(g, store, catalog, &rows, &metas, mode)?;
        g.concat_rows(&[reserved, fused.v_final])
    }

    /// Candidate representations `P(v_final)` for the rows of `table`
    /// selected by `candidates`.
    pub fn candidate_matrix<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        table: Var,
        candidates: &[u32],
    ) -> Result<Var> {
        if candidates.is_empty() {
            return Err(UifmError::InvalidArgument("empty candidate list".into()));
        }
        let rows = g.gather_rows(table, candidates.iter().map(|&c| Some(c as usize)).collect())?;
        let p = g.param(store, self.out_proj)?;
        g.matmul(rows, p)
    }
}

//! Composite tokenization: one dense vector per multi-attribute event.
//!
//! Categorical attributes are looked up in per-attribute tables (the entity
//! attribute reads the hybrid entity table instead), each normalized
//! numerical attribute has its own linear projection, temporal gaps get a
//! parameter-free sinusoidal code, and the concatenation goes through a
//! two-layer GELU MLP to `d_model`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UifmError};
use crate::layers::Linear;
use crate::numeric::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::schema::{Event, EventSchema, NormStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub d_cat: usize,
    pub d_num: usize,
    /// Must be even.
    pub d_time: usize,
    pub d_model: usize,
    pub mlp_hidden: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { d_cat: 32, d_num: 8, d_time: 8, d_model: 64, mlp_hidden: 128 }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.d_cat, self.d_num, self.d_time, self.d_model, self.mlp_hidden];
        if widths.iter().any(|&w| w == 0) {
            return Err(UifmError::Config("tokenizer widths must be >= 1".into()));
        }
        if self.d_time % 2 != 0 {
            return Err(UifmError::Config(format!("d_time must be even, got {}", self.d_time)));
        }
        Ok(())
    }

    /// Width of the concatenated attribute vector fed to the fusion MLP.
    pub fn fusion_input_width(&self, schema: &EventSchema) -> usize {
        schema.categorical.len() * self.d_cat
            + schema.numerical.len() * self.d_num
            + schema.temporal.len() * self.d_time
    }
}

/// Sinusoidal code of `u = ln(1 + max(delta, 0))`: component `2i` is
/// `sin(u / 10000^(2i/d_time))` and `2i+1` the matching cosine.
pub fn encode_temporal(delta_seconds: f64, d_time: usize) -> Vec<f64> {
    let u = delta_seconds.max(0.0).ln_1p();
    let mut out = Vec::with_capacity(d_time);
    for i in 0..d_time / 2 {
        let freq = 10000f64.powf((2 * i) as f64 / d_time as f64);
        out.push((u / freq).sin());
        out.push((u / freq).cos());
    }
    out
}

/// Tokenizer inputs for a packed block of rows (padding rows included).
#[derive(Debug, Clone)]
pub struct TokenInputs {
    pub rows: usize,
    /// `[attribute][row]` vocabulary indices.
    pub categorical: Vec<Vec<u32>>,
    /// `[attribute][row]` z-scored values.
    pub numerical: Vec<Vec<f64>>,
    /// `[row][temporal attr · d_time]` sinusoidal codes.
    pub temporal: Vec<f64>,
    /// Negative gaps clamped to zero.
    pub clamped_deltas: usize,
}

impl TokenInputs {
    /// `rows[i]` is an event with its temporal gaps, or `None` for padding.
    pub fn build(
        schema: &EventSchema,
        norm: &NormStats,
        d_time: usize,
        rows: &[Option<(&Event, &[f64])>],
    ) -> Result<Self> {
        let (nc, nn, nt) = (schema.categorical.len(), schema.numerical.len(), schema.temporal.len());
        let mut categorical = vec![Vec::with_capacity(rows.len()); nc];
        let mut numerical = vec![Vec::with_capacity(rows.len()); nn];
        let mut temporal = Vec::with_capacity(rows.len() * nt * d_time);
        let mut clamped_deltas = 0;
        for row in rows {
            match row {
                Some((ev, deltas)) => {
                    validate_event(schema, ev)?;
                    for (j, &v) in ev.categorical.iter().enumerate() {
                        categorical[j].push(v);
                    }
                    for (j, &x) in ev.numerical.iter().enumerate() {
                        numerical[j].push(norm.numerical[j].normalize(x));
                    }
                    for &d in deltas.iter() {
                        if d < 0.0 {
                            clamped_deltas += 1;
                        }
                        temporal.extend(encode_temporal(d, d_time));
                    }
                }
                None => {
                    categorical.iter_mut().for_each(|c| c.push(0));
                    numerical.iter_mut().for_each(|c| c.push(0.0));
                    temporal.extend(std::iter::repeat_n(0.0, nt * d_time));
                }
            }
        }
        Ok(TokenInputs { rows: rows.len(), categorical, numerical, temporal, clamped_deltas })
    }
}

pub fn validate_event(schema: &EventSchema, ev: &Event) -> Result<()> {
    if ev.categorical.len() != schema.categorical.len()
        || ev.numerical.len() != schema.numerical.len()
        || ev.temporal.len() != schema.temporal.len()
    {
        return Err(UifmError::Schema(format!(
            "event arity ({}, {}, {}) does not match schema ({}, {}, {})",
            ev.categorical.len(),
            ev.numerical.len(),
            ev.temporal.len(),
            schema.categorical.len(),
            schema.numerical.len(),
            schema.temporal.len()
        )));
    }
    for (a, &v) in schema.categorical.iter().zip(&ev.categorical) {
        if v as usize >= a.vocab_size {
            return Err(UifmError::IndexOutOfRange { what: a.name.clone(), index: v as usize, size: a.vocab_size });
        }
    }
    if ev.numerical.iter().chain(&ev.temporal).any(|x| !x.is_finite()) {
        return Err(UifmError::Schema("non-finite event value".into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CompositeTokenizer {
    /// One table per categorical attribute; `None` for the entity attribute.
    pub(crate) tables: Vec<Option<ParamId>>,
    num_proj: Vec<Linear>,
    fuse_in: Linear,
    fuse_out: Linear,
    cfg: TokenizerConfig,
}

impl CompositeTokenizer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &TokenizerConfig,
        schema: &EventSchema,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let tables = schema
            .categorical
            .iter()
            .map(|a| {
                if a.is_entity_id {
                    Ok(None)
                } else {
                    store
                        .add(
                            &format!("tokenizer.cat.{}", a.name),
                            vec![a.vocab_size, cfg.d_cat],
                            Init::TruncNormal(std),
                            true,
                            rng,
                        )
                        .map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let num_proj = schema
            .numerical
            .iter()
            .map(|a| Linear::new(store, &format!("tokenizer.num.{}", a.name), 1, cfg.d_num, std, rng))
            .collect::<Result<Vec<_>>>()?;
        let fuse_in = Linear::new(store, "tokenizer.mlp1", cfg.fusion_input_width(schema), cfg.mlp_hidden, std, rng)?;
        let fuse_out = Linear::new(store, "tokenizer.mlp2", cfg.mlp_hidden, cfg.d_model, std, rng)?;
        Ok(CompositeTokenizer { tables, num_proj, fuse_in, fuse_out, cfg: *cfg })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.cfg
    }

    /// Lookup of one categorical attribute for every row; the entity
    /// attribute reads `entity_table`.
    pub fn embed_categorical<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        attr: usize,
        values: &[u32],
        entity_table: Var,
    ) -> Result<Var> {
        let table = match self.tables.get(attr) {
            Some(Some(id)) => g.param(store, *id)?,
            Some(None) => entity_table,
            None => {
                return Err(UifmError::IndexOutOfRange {
                    what: "categorical attribute".into(),
                    index: attr,
                    size: self.tables.len(),
                })
            }
        };
        g.gather_rows(table, values.iter().map(|&v| Some(v as usize)).collect())
    }

    /// Composite tokens `[rows × d_model]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: &TokenInputs,
        entity_table: Var,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.tables.len() + self.num_proj.len() + 1);
        for (j, values) in inputs.categorical.iter().enumerate() {
            parts.push(self.embed_categorical(g, store, j, values, entity_table)?);
        }
        for (lin, values) in self.num_proj.iter().zip(&inputs.numerical) {
            let col = Tensor::matrix(inputs.rows, 1, values.iter().map(|&x| T::lit(x)).collect())?;
            let x = g.input(col)?;
            parts.push(lin.forward(g, store, x)?);
        }
        if !inputs.temporal.is_empty() {
            let width = inputs.temporal.len() / inputs.rows;
            let t = Tensor::matrix(inputs.rows, width, inputs.temporal.iter().map(|&x| T::lit(x)).collect())?;
            parts.push(g.input(t)?);
        }
        let x = g.concat_cols(&parts)?;
        let h = self.fuse_in.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.fuse_out.forward(g, store, h)
    }
}

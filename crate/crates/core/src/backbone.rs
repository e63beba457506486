//! Pre-norm Transformer over composite tokens with sliding-window attention
//! plus one global token (the first event of each sequence).

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UifmError};
use crate::layers::{LayerNorm, Linear};
use crate::numeric::{Graph, Init, KeyIndex, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Attention half-width in events.
    pub window: usize,
    pub ffn_width: usize,
    pub dropout_rate: f64,
    /// Length of the learned position table; also the longest sequence.
    pub max_positions: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 64,
            num_layers: 2,
            num_heads: 4,
            window: 8,
            ffn_width: 256,
            dropout_rate: 0.0,
            max_positions: 512,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(UifmError::Config(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.window == 0 || self.num_layers == 0 || self.ffn_width == 0 {
            return Err(UifmError::Config("window, num_layers and ffn_width must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(UifmError::Config(format!("dropout_rate {} not in [0,1)", self.dropout_rate)));
        }
        if self.max_positions == 0 || self.max_positions > 512 {
            return Err(UifmError::Config(format!("max_positions {} not in 1..=512", self.max_positions)));
        }
        Ok(())
    }
}

/// Allowed keys for each query position of one sequence (0-based).
///
/// Causal: `max(0, i−w) ≤ j ≤ i`, plus `j = 0`. Bidirectional: `|i−j| ≤ w`,
/// or `j = 0`, or `i = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionPattern {
    pub mode: AttentionMode,
    pub window: usize,
}

impl AttentionPattern {
    pub fn new(mode: AttentionMode, window: usize) -> Self {
        AttentionPattern { mode, window }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self.mode {
            AttentionMode::Causal => j <= i && (j == 0 || i - j <= self.window),
            AttentionMode::Bidirectional => j == 0 || i == 0 || i.abs_diff(j) <= self.window,
        }
    }

    /// Keys of query `i` in ascending order.
    pub fn keys(&self, i: usize, len: usize) -> Vec<usize> {
        let hi = match self.mode {
            AttentionMode::Causal => i,
            AttentionMode::Bidirectional if i == 0 => len - 1,
            AttentionMode::Bidirectional => (i + self.window).min(len - 1),
        };
        let lo = if self.mode == AttentionMode::Bidirectional && i == 0 { 0 } else { i.saturating_sub(self.window) };
        let mut keys = Vec::with_capacity(hi - lo + 2);
        if lo > 0 {
            keys.push(0);
        }
        keys.extend(lo..=hi);
        keys
    }

    /// Scored (query, key) pairs for one head of one layer.
    pub fn pairs(&self, len: usize) -> usize {
        (0..len).map(|i| self.keys(i, len).len()).sum()
    }
}

/// Exact count of scored (query, key) pairs over all layers and heads.
pub fn attention_flops_estimate(len: usize, window: usize, layers: usize, heads: usize, mode: AttentionMode) -> usize {
    AttentionPattern::new(mode, window).pairs(len) * layers * heads
}

/// Right-aligned packing of sequences into blocks of `len` rows; the leading
/// `len − lengths[b]` rows of block `b` are padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl SeqLayout {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(UifmError::InvalidArgument("sequences must be non-empty".into()));
        }
        let len = *lengths.iter().max().unwrap();
        Ok(SeqLayout { len, lengths })
    }

    pub fn single(len: usize) -> Result<Self> {
        Self::new(vec![len])
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.len * self.lengths.len()
    }

    pub fn pad(&self, b: usize) -> usize {
        self.len - self.lengths[b]
    }

    /// Row of real position `p` in sequence `b`.
    pub fn row(&self, b: usize, p: usize) -> usize {
        b * self.len + self.pad(b) + p
    }

    /// Real-token flag for every row.
    pub fn real_mask(&self) -> Vec<bool> {
        (0..self.batch()).flat_map(|b| (0..self.len).map(move |r| r >= self.pad(b))).collect()
    }

    /// Position index for every row (0 on padding).
    pub fn positions(&self) -> Vec<usize> {
        (0..self.batch()).flat_map(|b| (0..self.len).map(move |r| r.saturating_sub(self.pad(b)))).collect()
    }

    pub fn key_index(&self, pattern: &AttentionPattern) -> KeyIndex {
        let mut lists = Vec::with_capacity(self.rows());
        for b in 0..self.batch() {
            let (pad, t) = (self.pad(b), self.lengths[b]);
            lists.extend((0..pad).map(|_| Vec::new()));
            for i in 0..t {
                lists.push(pattern.keys(i, t).into_iter().map(|j| self.row(b, j)).collect());
            }
        }
        KeyIndex::from_lists(lists)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
}

/// Graph nodes produced by a backbone pass.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub hidden: Var,
    /// Attention node of every layer, for weight inspection.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub(crate) positions: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    cfg: BackboneConfig,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &BackboneConfig,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let positions =
            store.add("backbone.positions", vec![cfg.max_positions, d], Init::TruncNormal(std), true, rng)?;
        let blocks = (0..cfg.num_layers)
            .map(|l| {
                let p = format!("backbone.layer{l}");
                Ok(Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d, rng)?,
                    q: Linear::new(store, &format!("{p}.q"), d, d, std, rng)?,
                    k: Linear::new(store, &format!("{p}.k"), d, d, std, rng)?,
                    v: Linear::new(store, &format!("{p}.v"), d, d, std, rng)?,
                    o: Linear::new(store, &format!("{p}.o"), d, d, std, rng)?,
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d, rng)?,
                    ffn1: Linear::new(store, &format!("{p}.ffn1"), d, cfg.ffn_width, std, rng)?,
                    ffn2: Linear::new(store, &format!("{p}.ffn2"), cfg.ffn_width, d, std, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(store, "backbone.final_ln", d, rng)?;
        Ok(Backbone { positions, blocks, final_ln, cfg: *cfg })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    fn dropout<T: Scalar, R: Rng>(&self, g: &mut Graph<T>, x: Var, rng: Option<&mut R>) -> Result<Var> {
        let p = self.cfg.dropout_rate;
        let Some(rng) = rng.filter(|_| p > 0.0) else { return Ok(x) };
        let shape = g.value(x).shape().to_vec();
        let keep = T::lit(1.0 / (1.0 - p));
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let m = g.input(Tensor::new(shape, mask)?)?;
        g.mul(x, m)
    }

    /// Contextual vectors for every row of `tokens` (`[layout.rows() ×
    /// d_model]`). A learned position embedding is added first. Dropout is
    /// applied only when `rng` is given.
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
        layout: &SeqLayout,
        mode: AttentionMode,
        mut rng: Option<&mut R>,
    ) -> Result<BackboneOutput> {
        let tv = g.value(tokens);
        if tv.rows() != layout.rows() || tv.cols() != self.cfg.d_model {
            return Err(UifmError::shape(
                "backbone",
                format!("tokens {:?} for {} rows of width {}", tv.shape(), layout.rows(), self.cfg.d_model),
            ));
        }
        if layout.len > self.cfg.max_positions {
            return Err(UifmError::InvalidArgument(format!(
                "sequence length {} exceeds max_positions {}",
                layout.len, self.cfg.max_positions
            )));
        }
        let index = Rc::new(layout.key_index(&AttentionPattern::new(mode, self.cfg.window)));
        let table = g.param(store, self.positions)?;
        let pos = g.gather_rows(table, layout.positions().into_iter().map(Some).collect())?;
        let mut x = g.add(tokens, pos)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let h = blk.ln1.forward(g, store, x)?;
            let q = blk.q.forward(g, store, h)?;
            let k = blk.k.forward(g, store, h)?;
            let v = blk.v.forward(g, store, h)?;
            let a = g.attention(q, k, v, self.cfg.num_heads, Rc::clone(&index))?;
            attention.push(a);
            let a = blk.o.forward(g, store, a)?;
            let a = self.dropout(g, a, rng.as_deref_mut())?;
            x = g.add(x, a)?;
            let h = blk.ln2.forward(g, store, x)?;
            let f = blk.ffn1.forward(g, store, h)?;
            let f = g.gelu(f)?;
            let f = blk.ffn2.forward(g, store, f)?;
            let f = self.dropout(g, f, rng.as_deref_mut())?;
            x = g.add(x, f)?;
        }
        let hidden = self.final_ln.forward(g, store, x)?;
        Ok(BackboneOutput { hidden, attention })
    }
}

/// Last position's vector of each sequence.
pub fn summary<T: Scalar>(h: &Tensor<T>, layout: &SeqLayout) -> Vec<Vec<T>> {
    (0..layout.batch()).map(|b| h.row(layout.row(b, layout.lengths[b] - 1)).to_vec()).collect()
}

//! The three pre-training losses and the masking that feeds them.
//!
//! Prediction targets are factorized: the autoregressive and masked-event
//! losses predict the entity id of an event through the tied scorer, and the
//! masked-attribute loss predicts one hidden categorical attribute with a
//! per-attribute head (the entity attribute again uses the tied scorer).
//! Losses are token means. Reserved indices are never targets.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::AttentionMode;
use crate::error::{Result, UifmError};
use crate::model::{Model, PackedBatch};
use crate::numeric::{Graph, Var};
use crate::scalar::Scalar;
use crate::schema::{MASK, RESERVED};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub lambda_event: f64,
    pub lambda_attr: f64,
    pub rho_event: f64,
    pub rho_attr: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { lambda_event: 0.5, lambda_attr: 0.25, rho_event: 0.15, rho_attr: 0.10 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_event", self.lambda_event), ("lambda_attr", self.lambda_attr)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(UifmError::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        for (name, v) in [("rho_event", self.rho_event), ("rho_attr", self.rho_attr)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(UifmError::Config(format!("{name} must be in [0,1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn needs_bidirectional(&self) -> bool {
        self.lambda_event > 0.0 || self.lambda_attr > 0.0
    }
}

/// Masked positions of one sequence. Positions are indices into the
/// sequence (not batch rows).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Sorted; never the first or last position.
    pub event_positions: Vec<usize>,
    /// `(position, categorical attribute)`, sorted by position; disjoint from
    /// `event_positions`.
    pub attribute_masks: Vec<(usize, usize)>,
}

impl MaskPlan {
    /// Sample a plan for a sequence of length `len`.
    ///
    /// `max(1, round(rho_event · (len − 2)))` interior positions are
    /// event-masked when `len ≥ 3`; then `max(1, round(rho_attr · len))` of
    /// the remaining positions each get one uniformly chosen attribute from
    /// `eligible_attrs`. A zero rate disables the corresponding mask.
    pub fn sample<R: Rng>(len: usize, eligible_attrs: &[usize], cfg: &ObjectiveConfig, rng: &mut R) -> Self {
        let mut plan = MaskPlan::default();
        if cfg.rho_event > 0.0 && len >= 3 {
            let interior = len - 2;
            let n = ((cfg.rho_event * interior as f64).round() as usize).clamp(1, interior);
            plan.event_positions = sample(rng, interior, n).into_iter().map(|i| i + 1).collect();
            plan.event_positions.sort_unstable();
        }
        if cfg.rho_attr > 0.0 && !eligible_attrs.is_empty() {
            let free: Vec<usize> = (0..len).filter(|p| plan.event_positions.binary_search(p).is_err()).collect();
            if !free.is_empty() {
                let n = ((cfg.rho_attr * len as f64).round() as usize).clamp(1, free.len());
                let mut chosen: Vec<usize> = sample(rng, free.len(), n).into_iter().map(|i| free[i]).collect();
                chosen.sort_unstable();
                plan.attribute_masks = chosen
                    .into_iter()
                    .map(|p| (p, eligible_attrs[rng.random_range(0..eligible_attrs.len())]))
                    .collect();
            }
        }
        plan
    }

    pub fn is_empty(&self) -> bool {
        self.event_positions.is_empty() && self.attribute_masks.is_empty()
    }
}

/// Loss components of one batch, already reduced to scalars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub auto: f64,
    pub masked_event: f64,
    pub masked_attr: f64,
    pub lambda_event: f64,
    pub lambda_attr: f64,
    pub total: f64,
}

impl LossBundle {
    /// `total − (auto + λ1·me + λ2·ma)`, recomputed in the training precision.
    pub fn identity_residual<T: Scalar>(&self) -> f64 {
        let c = combine(
            T::lit(self.auto),
            T::lit(self.masked_event),
            T::lit(self.masked_attr),
            self.lambda_event,
            self.lambda_attr,
        );
        (T::lit(self.total) - c).as_f64()
    }
}

/// The weighted sum in the exact operation order used by the graph.
pub fn combine<T: Scalar>(auto: T, me: T, ma: T, lambda_event: f64, lambda_attr: f64) -> T {
    auto + me * T::lit(lambda_event) + ma * T::lit(lambda_attr)
}

/// Categorical attributes that may be attribute-masked: the entity attribute
/// and every attribute with a prediction head.
pub fn eligible_attributes<T: Scalar>(model: &Model<T>) -> Vec<usize> {
    (0..model.schema().categorical.len())
        .filter(|&j| model.schema().categorical[j].is_entity_id || model.has_attribute_head(j))
        .collect()
}

/// Scalar loss nodes of one batch plus the node holding the total.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub auto: Option<Var>,
    pub masked_event: Option<Var>,
    pub masked_attr: Option<Var>,
    pub total: Var,
}

/// Which forward passes a batch loss ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCount {
    pub causal: usize,
    pub bidirectional: usize,
}

fn trained_target(model_trained: usize, id: u32) -> Option<usize> {
    let i = id as usize;
    (RESERVED..RESERVED + model_trained).contains(&i).then(|| i - RESERVED)
}

/// Mean next-entity cross-entropy over positions `0..T−1` of every sequence
/// under causal attention. Candidates are the trained entities.
pub fn autoregressive_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    batch: &PackedBatch,
    entity_table: Var,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Option<Var>> {
    if batch.layout.lengths.iter().any(|&l| l < 2) {
        return Err(UifmError::InvalidArgument("autoregressive loss needs sequences of length >= 2".into()));
    }
    let ea = model.entity_attr();
    let n_trained = model.catalog().num_trained;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, &len) in batch.layout.lengths.iter().enumerate() {
        for p in 0..len - 1 {
            if let Some(t) = trained_target(n_trained, batch.entity(ea, b, p + 1)) {
                rows.push(batch.layout.row(b, p));
                targets.push(t);
            }
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let out = model.forward(g, batch, &batch.inputs, AttentionMode::Causal, entity_table, None, rng)?;
    let logits = model.score_rows(g, out.hidden, &rows, entity_table, &model.trained_entities())?;
    g.cross_entropy(logits, targets).map(Some)
}

/// Masked-event and masked-attribute losses from one bidirectional pass.
/// Returns `(masked_event, masked_attr)`; a component is `None` when the
/// plans mask nothing of that kind (or its targets are all reserved).
pub fn masked_losses<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    batch: &PackedBatch,
    plans: &[MaskPlan],
    entity_table: Var,
    want_event: bool,
    want_attr: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Option<Var>, Option<Var>)> {
    if plans.len() != batch.layout.batch() {
        return Err(UifmError::InvalidArgument(format!(
            "{} mask plans for {} sequences",
            plans.len(),
            batch.layout.batch()
        )));
    }
    let ea = model.entity_attr();
    let n_trained = model.catalog().num_trained;
    let mut inputs = batch.inputs.clone();
    let mut event_mask = vec![false; batch.layout.rows()];
    let mut ev_rows = Vec::new();
    let mut ev_targets = Vec::new();
    // per attribute: (rows, targets)
    let mut attr_slots: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); inputs.categorical.len()];
    for (b, plan) in plans.iter().enumerate() {
        let len = batch.layout.lengths[b];
        if want_event {
            for &p in &plan.event_positions {
                if p == 0 || p + 1 >= len {
                    return Err(UifmError::InvalidArgument(format!("event mask at boundary position {p} of {len}")));
                }
                let r = batch.layout.row(b, p);
                event_mask[r] = true;
                if let Some(t) = trained_target(n_trained, batch.entity(ea, b, p)) {
                    ev_rows.push(r);
                    ev_targets.push(t);
                }
            }
        }
        if want_attr {
            for &(p, a) in &plan.attribute_masks {
                if p >= len || plan.event_positions.binary_search(&p).is_ok() {
                    return Err(UifmError::InvalidArgument(format!("attribute mask at invalid position {p}")));
                }
                let r = batch.layout.row(b, p);
                let original = inputs.categorical[a][r];
                inputs.categorical[a][r] = MASK;
                let target = if a == ea {
                    trained_target(n_trained, original)
                } else if model.has_attribute_head(a) {
                    (original as usize >= RESERVED).then(|| original as usize - RESERVED)
                } else {
                    return Err(UifmError::InvalidArgument(format!("attribute {a} is not eligible for masking")));
                };
                if let Some(t) = target {
                    attr_slots[a].0.push(r);
                    attr_slots[a].1.push(t);
                }
            }
        }
    }
    let n_attr: usize = attr_slots.iter().map(|s| s.0.len()).sum();
    if ev_rows.is_empty() && n_attr == 0 {
        return Ok((None, None));
    }
    let mask = event_mask.iter().any(|&m| m).then_some(event_mask.as_slice());
    let out = model.forward(g, batch, &inputs, AttentionMode::Bidirectional, entity_table, mask, rng)?;
    let candidates = model.trained_entities();
    let me = if ev_rows.is_empty() {
        None
    } else {
        let logits = model.score_rows(g, out.hidden, &ev_rows, entity_table, &candidates)?;
        Some(g.cross_entropy(logits, ev_targets)?)
    };
    let mut ma: Option<Var> = None;
    for (a, (rows, targets)) in attr_slots.into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let share = rows.len() as f64 / n_attr as f64;
        let logits = if a == ea {
            model.score_rows(g, out.hidden, &rows, entity_table, &candidates)?
        } else {
            model.attribute_logits(g, out.hidden, &rows, a)?
        };
        let ce = g.cross_entropy(logits, targets)?;
        let part = if share == 1.0 { ce } else { g.scale(ce, T::lit(share))? };
        ma = Some(match ma {
            Some(acc) => g.add(acc, part)?,
            None => part,
        });
    }
    Ok((me, ma))
}

/// Build the full multi-task loss for one batch. Zero-weight components are
/// skipped, as is the bidirectional pass when both weights are zero.
/// Entities flagged in `hidden_ids` lose their ID rows for this batch.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    batch: &PackedBatch,
    plans: &[MaskPlan],
    cfg: &ObjectiveConfig,
    hidden_ids: Option<&[bool]>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossNodes, PassCount)> {
    cfg.validate()?;
    let mut passes = PassCount::default();
    let table = match hidden_ids {
        Some(h) => model.entity_table_hiding(g, h)?,
        None => model.entity_table(g)?,
    };
    let auto = autoregressive_loss(g, model, batch, table, rng.as_deref_mut())?;
    passes.causal += 1;
    let (me, ma) = if cfg.needs_bidirectional() {
        passes.bidirectional += 1;
        masked_losses(g, model, batch, plans, table, cfg.lambda_event > 0.0, cfg.lambda_attr > 0.0, rng)?
    } else {
        (None, None)
    };
    let zero = || T::zero();
    let mut total = match auto {
        Some(a) => a,
        None => g.input(crate::numeric::Tensor::scalar(zero()))?,
    };
    if let Some(me) = me {
        let w = g.scale(me, T::lit(cfg.lambda_event))?;
        total = g.add(total, w)?;
    }
    if let Some(ma) = ma {
        let w = g.scale(ma, T::lit(cfg.lambda_attr))?;
        total = g.add(total, w)?;
    }
    Ok((LossNodes { auto, masked_event: me, masked_attr: ma, total }, passes))
}

/// Read the scalar components out of evaluated loss nodes.
pub fn bundle<T: Scalar>(g: &Graph<T>, nodes: &LossNodes, cfg: &ObjectiveConfig) -> LossBundle {
    let get = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
    LossBundle {
        auto: get(nodes.auto),
        masked_event: get(nodes.masked_event),
        masked_attr: get(nodes.masked_attr),
        lambda_event: cfg.lambda_event,
        lambda_attr: cfg.lambda_attr,
        total: g.value(nodes.total).item().as_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn plan_respects_boundaries_and_disjointness() {
        let cfg = ObjectiveConfig { rho_event: 0.3, rho_attr: 0.3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in 1..40 {
            let plan = MaskPlan::sample(len, &[0, 2], &cfg, &mut rng);
            assert!(plan.event_positions.iter().all(|&p| p > 0 && p + 1 < len));
            assert_eq!(plan.event_positions.is_empty(), len < 3);
            for &(p, a) in &plan.attribute_masks {
                assert!(p < len && (a == 0 || a == 2));
                assert!(!plan.event_positions.contains(&p));
            }
            let mut ps: Vec<usize> = plan.attribute_masks.iter().map(|m| m.0).collect();
            ps.dedup();
            assert_eq!(ps.len(), plan.attribute_masks.len());
        }
    }

    #[test]
    fn plan_is_seeded() {
        let cfg = ObjectiveConfig::default();
        let a = MaskPlan::sample(30, &[0, 1], &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = MaskPlan::sample(30, &[0, 1], &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_rates_mask_nothing() {
        let cfg = ObjectiveConfig { rho_event: 0.0, rho_attr: 0.0, ..Default::default() };
        let plan = MaskPlan::sample(20, &[0], &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(plan.is_empty());
    }

    #[test]
    fn degenerate_weights_leave_auto_only() {
        let b = LossBundle {
            auto: 1.25,
            masked_event: 3.0,
            masked_attr: 7.0,
            lambda_event: 0.0,
            lambda_attr: 0.0,
            total: 1.25,
        };
        assert_eq!(b.identity_residual::<f64>(), 0.0);
        let c = combine(1.25f64, 3.0, 7.0, 1.0, 0.0) - combine(1.25f64, 3.0, 7.0, 0.5, 0.0);
        assert_eq!(c, 1.5);
    }

    #[test]
    fn negative_weight_rejected() {
        let cfg = ObjectiveConfig { lambda_event: -0.1, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}

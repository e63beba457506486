//! Ranking metrics, warm/cold evaluation and the frozen-embedding churn
//! probe.
//!
//! Every next-entity prediction is ranked against the full entity
//! vocabulary. Ties are broken by ascending entity index so metrics are
//! deterministic.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::AttentionMode;
use crate::error::{Result, UifmError};
use crate::model::Model;
use crate::numeric::Graph;
use crate::scalar::Scalar;
use crate::schema::{Session, RESERVED, UNK};

/// One ranked prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingResult {
    pub target: u32,
    /// 1-based.
    pub rank: usize,
    pub candidates: usize,
}

/// 1-based rank of `target` among `candidates` given their `scores`: one
/// plus the number of candidates scoring higher, or equal with a smaller id.
pub fn rank_of(scores: &[f64], candidates: &[u32], target: u32) -> Result<RankingResult> {
    if scores.len() != candidates.len() {
        return Err(UifmError::InvalidArgument(format!("{} scores for {} candidates", scores.len(), candidates.len())));
    }
    let pos = candidates
        .iter()
        .position(|&c| c == target)
        .ok_or_else(|| UifmError::InvalidArgument(format!("target {target} is not a candidate")))?;
    let s = scores[pos];
    let ahead = candidates.iter().zip(scores).filter(|&(&c, &x)| x > s || (x == s && c < target)).count();
    Ok(RankingResult { target, rank: ahead + 1, candidates: candidates.len() })
}

pub fn hr_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(UifmError::InvalidArgument("K must be >= 1".into()));
    }
    if results.is_empty() {
        return Err(UifmError::InvalidArgument("no ranking results".into()));
    }
    Ok(results.iter().filter(|r| r.rank <= k).count() as f64 / results.len() as f64)
}

pub fn ndcg_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(UifmError::InvalidArgument("K must be >= 1".into()));
    }
    if results.is_empty() {
        return Err(UifmError::InvalidArgument("no ranking results".into()));
    }
    let gain: f64 =
        results.iter().filter(|r| r.rank <= k).map(|r| 1.0 / ((1 + r.rank) as f64).log2()).fold(0.0, |a, g| a + g);
    Ok(gain / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMode {
    FullVocab,
    /// Positions whose target has a trained ID row.
    WarmOnly,
    /// Positions whose target never occurred in training.
    ColdOnly,
}

/// Every scorable next-entity position of a set of sessions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetPosition {
    pub session: usize,
    /// Index of the predicted event within the (truncated) session.
    pub position: usize,
    pub target: u32,
    pub cold: bool,
}

/// Ranked predictions for every non-UNK next-entity position.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rankings {
    pub positions: Vec<TargetPosition>,
    pub results: Vec<RankingResult>,
}

impl Rankings {
    pub fn select(&self, mode: CandidateMode) -> Vec<RankingResult> {
        self.positions
            .iter()
            .zip(&self.results)
            .filter(|(p, _)| match mode {
                CandidateMode::FullVocab => true,
                CandidateMode::WarmOnly => !p.cold,
                CandidateMode::ColdOnly => p.cold,
            })
            .map(|(_, r)| *r)
            .collect()
    }
}

/// All non-reserved entity indices, the candidate set for ranking.
pub fn candidate_ids(vocab_size: usize) -> Vec<u32> {
    (RESERVED as u32..vocab_size as u32).collect()
}

/// Scorable positions: `(session, position, target)` for each event after
/// the first whose entity is not UNK, over the last `max_len` events.
pub fn target_positions<T: Scalar>(model: &Model<T>, sessions: &[Session], max_len: usize) -> Vec<TargetPosition> {
    let ea = model.entity_attr();
    let catalog = model.catalog();
    let mut out = Vec::new();
    for (s, sess) in sessions.iter().enumerate() {
        let start = sess.len().saturating_sub(max_len);
        for p in 1..sess.len() - start {
            let target = sess.events[start + p].categorical[ea];
            if target != UNK {
                out.push(TargetPosition { session: s, position: p, target, cold: !catalog.is_trained(target) });
            }
        }
    }
    out
}

/// Rank every scorable position with the model's causal predictions.
pub fn rank_sessions<T: Scalar>(model: &Model<T>, sessions: &[Session], max_len: usize) -> Result<Rankings> {
    let positions = target_positions(model, sessions, max_len);
    let proj = model.candidate_projection()?.to_f64();
    let v = model.catalog().len();
    let d = model.config().backbone.d_model;
    let candidates = candidate_ids(v);
    let mut results = Vec::with_capacity(positions.len());
    let mut cursor = 0;
    let idx: Vec<usize> = (0..sessions.len()).filter(|&i| sessions[i].len() >= 2).collect();
    for chunk in idx.chunks(64) {
        let trimmed: Vec<Session> = chunk.iter().map(|&i| sessions[i].tail(max_len)).collect();
        let refs: Vec<&Session> = trimmed.iter().collect();
        let batch = model.pack(&refs)?;
        let mut g = Graph::new();
        let table = model.entity_table(&mut g)?;
        let out = model.forward(&mut g, &batch, &batch.inputs, AttentionMode::Causal, table, None, None)?;
        let hidden = g.value(out.hidden).to_f64();
        for (b, &si) in chunk.iter().enumerate() {
            while cursor < positions.len() && positions[cursor].session == si {
                let tp = &positions[cursor];
                let h = &hidden[batch.layout.row(b, tp.position - 1) * d..][..d];
                let scores: Vec<f64> = candidates
                    .iter()
                    .map(|&c| proj[c as usize * d..][..d].iter().zip(h).map(|(a, b)| a * b).sum())
                    .collect();
                results.push(rank_of(&scores, &candidates, tp.target)?);
                cursor += 1;
            }
        }
    }
    debug_assert_eq!(results.len(), positions.len());
    Ok(Rankings { positions, results })
}

/// Ranking by training frequency (entities absent from training score 0).
pub fn popularity_rankings<T: Scalar>(
    model: &Model<T>,
    train: &[Session],
    sessions: &[Session],
    max_len: usize,
) -> Result<Rankings> {
    let ea = model.entity_attr();
    let v = model.catalog().len();
    let mut counts = vec![0.0f64; v];
    for s in train {
        for e in &s.events {
            counts[e.categorical[ea] as usize] += 1.0;
        }
    }
    let candidates = candidate_ids(v);
    let scores: Vec<f64> = candidates.iter().map(|&c| counts[c as usize]).collect();
    let positions = target_positions(model, sessions, max_len);
    let results = positions.iter().map(|p| rank_of(&scores, &candidates, p.target)).collect::<Result<Vec<_>>>()?;
    Ok(Rankings { positions, results })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
    pub n_positions: usize,
}

/// Metrics over the positions selected by `mode`.
pub fn metrics(rankings: &Rankings, mode: CandidateMode, k: usize) -> Result<SplitMetrics> {
    if mode == CandidateMode::ColdOnly && !rankings.positions.iter().any(|p| p.cold) {
        return Err(UifmError::InvalidArgument("cold-only evaluation requested but no cold targets".into()));
    }
    let sel = rankings.select(mode);
    Ok(SplitMetrics { hr_at_k: hr_at_k(&sel, k)?, ndcg_at_k: ndcg_at_k(&sel, k)?, n_positions: sel.len() })
}

/// Report written by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: CandidateMode,
    pub k: usize,
    #[serde(rename = "HR@10")]
    pub hr: f64,
    #[serde(rename = "nDCG@10")]
    pub ndcg: f64,
    pub n_positions: usize,
    pub warm: Option<SplitMetrics>,
    pub cold: Option<SplitMetrics>,
    pub popularity: Option<SplitMetrics>,
}

pub fn evaluate_split<T: Scalar>(
    model: &Model<T>,
    train: &[Session],
    sessions: &[Session],
    mode: CandidateMode,
    max_len: usize,
) -> Result<EvalReport> {
    if mode == CandidateMode::ColdOnly && model.catalog().num_trained + RESERVED == model.catalog().len() {
        return Err(UifmError::InvalidArgument("cold-only evaluation requested but the cold set is empty".into()));
    }
    let k = 10;
    let r = rank_sessions(model, sessions, max_len)?;
    let main = metrics(&r, mode, k)?;
    let part = |m| metrics(&r, m, k).ok();
    let pop = popularity_rankings(model, train, sessions, max_len)?;
    Ok(EvalReport {
        split: mode,
        k,
        hr: main.hr_at_k,
        ndcg: main.ndcg_at_k,
        n_positions: main.n_positions,
        warm: part(CandidateMode::WarmOnly),
        cold: part(CandidateMode::ColdOnly),
        popularity: metrics(&pop, mode, k).ok(),
    })
}

/// Accuracy of predicting categorical attribute `attr` with its slot
/// replaced by MASK, one masked position per pass, under bidirectional
/// attention. Predictions are the arg-max over real values (lowest index on
/// ties). Positions whose true value is reserved are skipped.
pub fn masked_attribute_accuracy<T: Scalar>(
    model: &Model<T>,
    sessions: &[Session],
    attr: usize,
    max_len: usize,
) -> Result<f64> {
    let is_entity = attr == model.entity_attr();
    if !is_entity && !model.has_attribute_head(attr) {
        return Err(UifmError::InvalidArgument(format!("attribute {attr} has no prediction head")));
    }
    let trimmed: Vec<Session> = sessions.iter().map(|s| s.tail(max_len)).collect();
    let probes: Vec<(usize, usize)> = trimmed
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.len()).map(move |p| (i, p)))
        .filter(|&(i, p)| trimmed[i].events[p].categorical[attr] as usize >= RESERVED)
        .collect();
    if probes.is_empty() {
        return Err(UifmError::InvalidArgument("no maskable positions".into()));
    }
    let mut correct = 0usize;
    for chunk in probes.chunks(64) {
        let refs: Vec<&Session> = chunk.iter().map(|&(i, _)| &trimmed[i]).collect();
        let batch = model.pack(&refs)?;
        let mut inputs = batch.inputs.clone();
        let rows: Vec<usize> = chunk.iter().enumerate().map(|(b, &(_, p))| batch.layout.row(b, p)).collect();
        let truth: Vec<u32> = rows.iter().map(|&r| inputs.categorical[attr][r]).collect();
        for &r in &rows {
            inputs.categorical[attr][r] = crate::schema::MASK;
        }
        let mut g = Graph::new();
        let table = model.entity_table(&mut g)?;
        let out = model.forward(&mut g, &batch, &inputs, AttentionMode::Bidirectional, table, None, None)?;
        let (logits, offset) = if is_entity {
            (model.score_rows(&mut g, out.hidden, &rows, table, &candidate_ids(model.catalog().len()))?, RESERVED)
        } else {
            (model.attribute_logits(&mut g, out.hidden, &rows, attr)?, RESERVED)
        };
        let lv = g.value(logits);
        for (i, &t) in truth.iter().enumerate() {
            let row = lv.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            if best + offset == t as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / probes.len() as f64)
}

/// Area under the ROC curve as the Mann-Whitney statistic, with tied scores
/// given their average rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(UifmError::InvalidArgument(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(UifmError::InvalidArgument("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Logistic regression on standardized features, fit by Newton iterations
/// with a small ridge penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Bias first, then one weight per feature.
    pub weights: Vec<f64>,
}

impl LogisticProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[bool], ridge: f64) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(UifmError::InvalidArgument("probe needs one label per feature row".into()));
        }
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            return Err(UifmError::InvalidArgument("probe needs both classes".into()));
        }
        let d = features[0].len();
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut probe = LogisticProbe { mean, scale, weights: vec![0.0; d + 1] };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.design_row(f)).collect();
        for _ in 0..100 {
            let mut grad = vec![0.0; d + 1];
            let mut hess = vec![0.0; (d + 1) * (d + 1)];
            for (x, &y) in xs.iter().zip(labels) {
                let p = sigmoid(dot(&probe.weights, x));
                let r = p - if y { 1.0 } else { 0.0 };
                let w = (p * (1.0 - p)).max(1e-10);
                for a in 0..=d {
                    grad[a] += r * x[a];
                    for b in 0..=d {
                        hess[a * (d + 1) + b] += w * x[a] * x[b];
                    }
                }
            }
            for a in 1..=d {
                grad[a] += ridge * probe.weights[a];
                hess[a * (d + 1) + a] += ridge;
            }
            hess[0] += 1e-9;
            let step = solve_spd(&hess, &grad, d + 1)?;
            let mut moved = 0.0f64;
            for (w, s) in probe.weights.iter_mut().zip(&step) {
                *w -= s;
                moved = moved.max(s.abs());
            }
            if moved < 1e-10 {
                break;
            }
        }
        Ok(probe)
    }

    fn design_row(&self, f: &[f64]) -> Vec<f64> {
        std::iter::once(1.0).chain(f.iter().enumerate().map(|(j, x)| (x - self.mean[j]) / self.scale[j])).collect()
    }

    /// Log-odds of the positive class.
    pub fn logit(&self, f: &[f64]) -> f64 {
        dot(&self.weights, &self.design_row(f))
    }

    pub fn predict(&self, f: &[f64]) -> f64 {
        sigmoid(self.logit(f))
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cholesky solve of a symmetric positive definite `n × n` system.
fn solve_spd(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if !(d > 0.0) {
                    return Err(UifmError::NonFinite { op: "probe cholesky" });
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Ok(x)
}

/// Result of a churn probe run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnReport {
    #[serde(rename = "AUC")]
    pub auc: f64,
    pub n_users: usize,
    pub n_train: usize,
    pub n_test: usize,
}

/// Fit a logistic probe on frozen summaries of a seeded half of the users
/// and report AUC on the other half.
pub fn churn_probe_features(features: &[Vec<f64>], labels: &[bool], seed: u64) -> Result<ChurnReport> {
    if features.len() != labels.len() {
        return Err(UifmError::InvalidArgument(format!("{} users but {} labels", features.len(), labels.len())));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(UifmError::InvalidArgument("churn labels contain a single class".into()));
    }
    let mut idx: Vec<usize> = (0..features.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = idx.split_at(idx.len() / 2);
    let pick = |ix: &[usize]| -> (Vec<Vec<f64>>, Vec<bool>) {
        (ix.iter().map(|&i| features[i].clone()).collect(), ix.iter().map(|&i| labels[i]).collect())
    };
    let (xtr, ytr) = pick(train);
    let (xte, yte) = pick(test);
    let probe = LogisticProbe::fit(&xtr, &ytr, 1e-2)?;
    let scores: Vec<f64> = xte.iter().map(|x| probe.logit(x)).collect();
    Ok(ChurnReport { auc: auc(&scores, &yte)?, n_users: features.len(), n_train: xtr.len(), n_test: xte.len() })
}

/// Churn probe on the causal summaries `h_T` of `sessions`.
pub fn churn_probe<T: Scalar>(
    model: &Model<T>,
    sessions: &[Session],
    labels: &[bool],
    max_len: usize,
    seed: u64,
) -> Result<ChurnReport> {
    let trimmed: Vec<Session> = sessions.iter().map(|s| s.tail(max_len)).collect();
    let refs: Vec<&Session> = trimmed.iter().collect();
    let feats: Vec<Vec<f64>> =
        model.summaries(&refs)?.into_iter().map(|h| h.into_iter().map(|x| x.as_f64()).collect()).collect();
    churn_probe_features(&feats, labels, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(rank: usize) -> RankingResult {
        RankingResult { target: 2, rank, candidates: 20 }
    }

    #[test]
    fn hr_boundaries() {
        assert_eq!(hr_at_k(&[r(1), r(1)], 10).unwrap(), 1.0);
        assert_eq!(hr_at_k(&[r(11)], 10).unwrap(), 0.0);
        assert!(hr_at_k(&[r(1)], 0).is_err());
    }

    #[test]
    fn ndcg_formula() {
        assert_eq!(ndcg_at_k(&[r(1)], 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[r(3)], 10).unwrap(), 0.5);
        assert_eq!(ndcg_at_k(&[r(11)], 10).unwrap(), 0.0);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let cands = [2, 3, 4, 5];
        let scores = [1.0, 1.0, 1.0, 0.0];
        assert_eq!(rank_of(&scores, &cands, 2).unwrap().rank, 1);
        assert_eq!(rank_of(&scores, &cands, 4).unwrap().rank, 3);
        assert_eq!(rank_of(&scores, &cands, 5).unwrap().rank, 4);
    }

    #[test]
    fn auc_separable_and_ties() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn probe_separates_linear_labels() {
        let feats: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 10.0, ((i * 7) % 13) as f64]).collect();
        let labels: Vec<bool> = feats.iter().map(|f| f[0] > 10.0).collect();
        let rep = churn_probe_features(&feats, &labels, 3).unwrap();
        assert!(rep.auc > 0.99, "{}", rep.auc);
        assert_eq!(rep.n_train + rep.n_test, 200);
    }

    #[test]
    fn cholesky_solves_small_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let x = solve_spd(&a, &[2.0, 1.0], 2).unwrap();
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-12);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-12);
    }
}

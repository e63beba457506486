//! Central finite-difference check of every parameter gradient of the
//! multi-task loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Result, UifmError};
use crate::model::{Model, ModelSpec, PackedBatch};
use crate::numeric::Graph;
use crate::objectives::{eligible_attributes, total_loss, MaskPlan, ObjectiveConfig};
use crate::schema::Session;
use crate::synth::{generate, GrammarSpec};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms.
pub const DENOMINATOR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_param: String,
    pub n_scalars: usize,
    pub step: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Grammar with 18 items, so the entity vocabulary holds 20 rows.
pub fn tiny_grammar() -> GrammarSpec {
    GrammarSpec {
        num_items: 18,
        num_categories: 6,
        num_price_buckets: 3,
        num_brands: 3,
        num_stable_categories: 3,
        min_len: 4,
        max_len: 7,
        ..GrammarSpec::default()
    }
}

/// A fixed loss problem: model, batch, mask plans and dropped ids.
pub struct Problem {
    pub model: Model<f64>,
    pub batch: PackedBatch,
    pub plans: Vec<MaskPlan>,
    pub objective: ObjectiveConfig,
    pub hidden: Vec<bool>,
}

impl Problem {
    /// Build from `cfg`'s widths on a small synthetic corpus. Masking rates
    /// are raised so every loss term is present.
    pub fn tiny(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let corpus = generate(&tiny_grammar(), 40, seed)?;
        let ds = Dataset::from_raw(&corpus.schema, &corpus.sessions, &corpus.metadata, &cfg.split)?;
        let mut model_cfg = cfg.model();
        model_cfg.backbone.dropout_rate = 0.0;
        let model = Model::<f64>::new(ModelSpec::for_dataset(model_cfg, &ds, cfg.mode), seed)?;
        let sessions: Vec<Session> = ds.train.iter().take(4).map(|s| s.tail(cfg.train.max_seq_len)).collect();
        let refs: Vec<&Session> = sessions.iter().collect();
        let batch = model.pack(&refs)?;
        let objective = ObjectiveConfig { rho_event: 0.3, rho_attr: 0.3, ..cfg.train.objective };
        let eligible = eligible_attributes(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plans: Vec<MaskPlan> =
            batch.layout.lengths.iter().map(|&l| MaskPlan::sample(l, &eligible, &objective, &mut rng)).collect();
        let catalog = model.catalog();
        let hidden = (0..catalog.len()).map(|i| i == crate::schema::RESERVED && catalog.is_trained(i as u32)).collect();
        Ok(Problem { model, batch, plans, objective, hidden })
    }

    pub fn loss(&self) -> Result<f64> {
        let mut g = Graph::new();
        let (nodes, _) =
            total_loss(&mut g, &self.model, &self.batch, &self.plans, &self.objective, Some(&self.hidden), None)?;
        Ok(g.value(nodes.total).item())
    }

    /// Loss value and analytic gradients left in the parameter store.
    pub fn loss_and_grad(&mut self) -> Result<f64> {
        let mut g = Graph::new();
        let (nodes, _) =
            total_loss(&mut g, &self.model, &self.batch, &self.plans, &self.objective, Some(&self.hidden), None)?;
        if nodes.auto.is_none() || nodes.masked_event.is_none() || nodes.masked_attr.is_none() {
            return Err(UifmError::InvalidArgument("gradient check batch lacks a loss term".into()));
        }
        self.model.store.zero_grad();
        g.backward(nodes.total, &mut self.model.store)?;
        Ok(g.value(nodes.total).item())
    }
}

pub fn check(problem: &mut Problem, h: f64, tolerance: f64) -> Result<GradcheckReport> {
    problem.loss_and_grad()?;
    let ids: Vec<_> = problem.model.store.iter().map(|(id, _)| id).collect();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_param: String::new(),
        n_scalars: 0,
        step: h,
        tolerance,
        pass: false,
    };
    for id in ids {
        let n = problem.model.store.value(id).len();
        for i in 0..n {
            let analytic = problem.model.store.grad(id).data()[i];
            let x = problem.model.store.value(id).data()[i];
            problem.model.store.value_mut(id).data_mut()[i] = x + h;
            let up = problem.loss()?;
            problem.model.store.value_mut(id).data_mut()[i] = x - h;
            let down = problem.loss()?;
            problem.model.store.value_mut(id).data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic, numeric);
            report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err;
                report.worst_param = format!("{}[{i}]", problem.model.store.get(id).name);
            }
        }
        report.n_scalars += n;
    }
    report.pass = report.max_rel_err < tolerance;
    Ok(report)
}

/// Gradient check of the configured architecture at f64.
pub fn run(cfg: &RunConfig, seed: u64) -> Result<GradcheckReport> {
    let mut problem = Problem::tiny(cfg, seed)?;
    check(&mut problem, STEP, TOLERANCE)
}

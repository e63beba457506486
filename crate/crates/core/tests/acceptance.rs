//! Acceptance suite: one test per criterion, each printing a single
//! `[PASS]`/`[FAIL]` line to stderr before asserting.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use common::{
    brute_hr, brute_ndcg, brute_rank, dense_reference, max_diff, measured_pairs, pairwise_auc, perturb,
    random_backbone, random_metadata, random_vec, randomize, rng, sigmoid, sparse_forward, tiny_dataset, tiny_model,
    Rows,
};
use rand::seq::SliceRandom;
use rand::Rng;
use uifm::backbone::AttentionMode;
use uifm::config::RunConfig;
use uifm::eval::{
    auc, churn_probe, hr_at_k, masked_attribute_accuracy, metrics, ndcg_at_k, popularity_rankings, rank_of,
    rank_sessions, CandidateMode,
};
use uifm::gradcheck;
use uifm::schema::SplitConfig;
use uifm::synth::{generate, Corpus, GrammarSpec};
use uifm::trainer::{StepRecord, Trainer};
use uifm::{Dataset, EmbeddingMode, Model, ModelConfig, ModelSpec, Session, TrainConfig};

const CORPUS_SESSIONS: usize = 5000;
const CORPUS_SEED: u64 = 7;
const SPLIT_SEED: u64 = 17;
const MAX_LEN: usize = 50;

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] C{id:02} {name}: {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

struct Trained {
    corpus: Corpus,
    ds: Dataset,
    model: Model<f32>,
    log: Vec<StepRecord>,
    elapsed: Duration,
}

static TRAINING: Mutex<()> = Mutex::new(());

fn train(holdout: f64, mode: EmbeddingMode, steps: usize) -> Trained {
    let _guard = TRAINING.lock().unwrap_or_else(|e| e.into_inner());
    let grammar = GrammarSpec::default();
    let corpus = generate(&grammar, CORPUS_SESSIONS, CORPUS_SEED).unwrap();
    let split = SplitConfig { holdout_fraction: holdout, ..grammar.split_config(SPLIT_SEED) };
    let ds = Dataset::from_raw(&corpus.schema, &corpus.sessions, &corpus.metadata, &split).unwrap();
    let spec = ModelSpec::for_dataset(ModelConfig::default(), &ds, mode);
    let model = Model::<f32>::new(spec, 1).unwrap();
    let cfg = TrainConfig {
        total_steps: steps,
        warmup_steps: steps / 10,
        max_seq_len: MAX_LEN,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let mut trainer = Trainer::new(model, cfg, &ds.train).unwrap();
    let log = trainer.run(steps, &[], None, |_| Ok(())).unwrap();
    let elapsed = t0.elapsed();
    Trained { corpus, ds, model: trainer.model, log, elapsed }
}

/// Warm corpus: every item appears in training.
fn model_a() -> &'static Trained {
    static A: OnceLock<Trained> = OnceLock::new();
    A.get_or_init(|| train(0.0, EmbeddingMode::Full, 3000))
}

/// Ten percent of items held out of training.
fn model_b() -> &'static Trained {
    static B: OnceLock<Trained> = OnceLock::new();
    B.get_or_init(|| train(0.1, EmbeddingMode::Full, 2000))
}

fn model_c() -> &'static Trained {
    static C: OnceLock<Trained> = OnceLock::new();
    C.get_or_init(|| train(0.1, EmbeddingMode::NoColdStart, 2000))
}

#[test]
fn c01_gradient_fidelity() {
    let t0 = Instant::now();
    let rep = gradcheck::run(&RunConfig::tiny(), 3).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = rep.pass && rep.max_rel_err < 1e-6 && secs < 120.0;
    report(
        1,
        "gradient fidelity",
        pass,
        format!("max rel err {:.2e} over {} scalars (h={}), {:.1}s", rep.max_rel_err, rep.n_scalars, rep.step, secs),
    );
}

#[test]
fn c02_total_loss_identity() {
    let ds = tiny_dataset(80, 2);
    let cfg = TrainConfig { batch_size: 8, total_steps: 30, warmup_steps: 3, eval_every: 0, ..RunConfig::tiny().train };
    let mut t64 = Trainer::new(tiny_model::<f64>(&ds, EmbeddingMode::Full, 9), cfg, &ds.train).unwrap();
    let log64 = t64.run(cfg.total_steps, &[], None, |_| Ok(())).unwrap();
    let mut worst = 0.0f64;
    let mut steps = 0;
    for r in &log64 {
        worst = worst.max(r.losses().identity_residual::<f64>().abs());
        steps += 1;
    }
    for t in [model_a(), model_b(), model_c()] {
        for r in &t.log {
            worst = worst.max(r.losses().identity_residual::<f32>().abs());
            steps += 1;
        }
    }
    report(2, "loss identity", worst == 0.0, format!("max |residual| {worst:e} over {steps} logged steps"));
}

#[test]
fn c03_sparse_matches_dense_within_window() {
    let mut r = rng(303);
    let mut worst = 0.0f64;
    for draw in 0..50 {
        let window = r.random_range(1..=8);
        let (cfg, store, bb) = random_backbone(1000 + draw, window);
        let t = r.random_range(1..=window + 1);
        let seq: Rows = (0..t).map(|_| random_vec(&mut r, cfg.d_model)).collect();
        let sparse = sparse_forward(&bb, &store, std::slice::from_ref(&seq), AttentionMode::Causal);
        worst = worst.max(max_diff(&sparse[0], &dense_reference(&store, &cfg, &seq)));
    }
    report(3, "sparse == dense", worst < 1e-6, format!("max elementwise diff {worst:.2e} over 50 draws"));
}

#[test]
fn c04_causality() {
    let ds = tiny_dataset(60, 4);
    let mut model = tiny_model::<f64>(&ds, EmbeddingMode::Full, 2);
    randomize(&mut model.store, 0.3, 8);
    let vocab: Vec<usize> = model.schema().categorical.iter().map(|a| a.vocab_size).collect();
    let max = model.config().backbone.max_positions;
    let sessions: Vec<Session> = ds.train.iter().map(|s| s.tail(max)).filter(|s| s.len() >= 4).collect();
    let mut r = rng(77);
    let mut moved = 0;
    for probe in 0..100 {
        let base = &sessions[probe % sessions.len()];
        let from = r.random_range(1..base.len());
        let mut changed = base.clone();
        perturb(&mut changed, from, &vocab, &mut r);
        let h0 = model.hidden_states(base, AttentionMode::Causal).unwrap();
        let h1 = model.hidden_states(&changed, AttentionMode::Causal).unwrap();
        if (0..from).any(|i| h0.row(i) != h1.row(i)) {
            moved += 1;
        }
    }
    report(4, "causality", moved == 0, format!("{moved}/100 probes changed an earlier hidden state"));
}

#[test]
fn c05_learnability() {
    let a = model_a();
    let ceiling = GrammarSpec::default().oracle_hr_ceiling(10);
    let threshold = 0.9 * ceiling;
    let rankings = rank_sessions(&a.model, &a.ds.test, MAX_LEN).unwrap();
    let warm = metrics(&rankings, CandidateMode::WarmOnly, 10).unwrap();
    let secs = a.elapsed.as_secs_f64();
    report(
        5,
        "learnability",
        warm.hr_at_k >= threshold && secs < 600.0,
        format!(
            "warm HR@10 {:.4} (threshold {threshold:.4}, ceiling {ceiling:.4}, {} positions), trained in {secs:.0}s",
            warm.hr_at_k, warm.n_positions
        ),
    );
}

#[test]
fn c06_cold_start_direction() {
    let (b, c) = (model_b(), model_c());
    let cold_hr = |t: &Trained| {
        let r = rank_sessions(&t.model, &t.ds.test, MAX_LEN).unwrap();
        metrics(&r, CandidateMode::ColdOnly, 10).unwrap()
    };
    let full = cold_hr(b);
    let ablation = cold_hr(c);
    let pop = popularity_rankings(&b.model, &b.ds.train, &b.ds.test, MAX_LEN).unwrap();
    let pop = metrics(&pop, CandidateMode::ColdOnly, 10).unwrap();
    let pass = full.hr_at_k > 0.0 && full.hr_at_k >= 3.0 * pop.hr_at_k && full.hr_at_k >= 2.0 * ablation.hr_at_k;
    report(
        6,
        "cold-start direction",
        pass,
        format!(
            "cold HR@10 full {:.4}, no-cold-start {:.4}, popularity {:.4} ({} cold positions)",
            full.hr_at_k, ablation.hr_at_k, pop.hr_at_k, full.n_positions
        ),
    );
}

#[test]
fn c07_zero_vector_algebra() {
    let a = model_a();
    let m = &a.model;
    let w = &m.store.by_name("hybrid.gate.w").unwrap().value;
    let b = &m.store.by_name("hybrid.gate.b").unwrap().value;
    let d = b.len();
    let mut r = rng(707);
    let (mut exact, mut gate_err) = (0, 0.0f64);
    for _ in 0..1000 {
        let meta = random_metadata(m, &mut r);
        let f = m.fuse_entity(None, &meta).unwrap();
        let zero_id = f.v_id.iter().all(|&x| x == 0.0);
        let want: Vec<f32> = f.gate.iter().zip(&f.v_meta).map(|(&g, &v)| (1.0 - g) * v).collect();
        if zero_id && f.v_final == want {
            exact += 1;
        }
        for j in 0..d {
            let z: f64 =
                (0..d).map(|k| f.v_meta[k] as f64 * w.data()[j * d + k] as f64).sum::<f64>() + b.data()[j] as f64;
            gate_err = gate_err.max((sigmoid(z) - f.gate[j] as f64).abs());
        }
    }
    report(
        7,
        "zero-vector algebra",
        exact == 1000 && gate_err < 1e-5,
        format!("{exact}/1000 unseen entities exact, max gate deviation from oracle {gate_err:.1e}"),
    );
}

#[test]
fn c08_metric_oracles() {
    let mut r = rng(808);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n_cand = r.random_range(1..60);
        let mut ids: Vec<u32> = (2..200).collect();
        ids.shuffle(&mut r);
        ids.truncate(n_cand);
        let n_targets = r.random_range(1..30);
        let mut results = Vec::new();
        let mut ranks = Vec::new();
        for _ in 0..n_targets {
            // coarse scores force ties
            let scores: Vec<f64> = (0..n_cand).map(|_| r.random_range(0..8) as f64 * 0.25).collect();
            let target = ids[r.random_range(0..n_cand)];
            let res = rank_of(&scores, &ids, target).unwrap();
            let want = brute_rank(&scores, &ids, target);
            if res.rank != want {
                mismatches += 1;
            }
            results.push(res);
            ranks.push(want);
        }
        let k = r.random_range(1..15);
        if hr_at_k(&results, k).unwrap() != brute_hr(&ranks, k)
            || ndcg_at_k(&results, k).unwrap() != brute_ndcg(&ranks, k)
        {
            mismatches += 1;
        }
    }
    let mut auc_err = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(2..120);
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(-1.0f64..1.0) * 10.0).round() / 10.0).collect();
        auc_err = auc_err.max((auc(&scores, &labels).unwrap() - pairwise_auc(&scores, &labels)).abs());
    }
    report(
        8,
        "metric oracles",
        mismatches == 0 && auc_err < 1e-9,
        format!("{mismatches} ranking mismatches over 100 fixtures, max AUC deviation {auc_err:.1e}"),
    );
}

#[test]
fn c09_masked_attribute_ceiling() {
    let a = model_a();
    let brand = a.ds.schema.categorical.iter().position(|c| c.name == "brand").unwrap();
    let acc = masked_attribute_accuracy(&a.model, &a.ds.test, brand, MAX_LEN).unwrap();
    report(9, "masked brand accuracy", acc >= 0.95, format!("accuracy {acc:.4} on test split"));
}

#[test]
fn c10_churn_probe() {
    let a = model_a();
    let labels: HashMap<&str, bool> = a.corpus.churn.iter().map(|(u, l)| (u.as_str(), *l)).collect();
    let sessions: Vec<Session> = a.ds.train.iter().chain(&a.ds.validation).chain(&a.ds.test).cloned().collect();
    let y: Vec<bool> = sessions.iter().map(|s| labels[s.user_id.as_str()]).collect();
    let real = churn_probe(&a.model, &sessions, &y, MAX_LEN, 3).unwrap();
    let mut shuffled = y.clone();
    shuffled.shuffle(&mut rng(1010));
    let control = churn_probe(&a.model, &sessions, &shuffled, MAX_LEN, 3).unwrap();
    report(
        10,
        "churn probe",
        real.auc >= 0.85 && (0.45..=0.55).contains(&control.auc),
        format!("AUC {:.4}, permuted-label control {:.4} ({} users)", real.auc, control.auc, real.n_users),
    );
}

#[test]
fn c11_determinism_and_checkpointing() {
    let grammar = GrammarSpec::default();
    let corpus = generate(&grammar, 600, 11).unwrap();
    let ds = Dataset::from_raw(&corpus.schema, &corpus.sessions, &corpus.metadata, &grammar.split_config(5)).unwrap();
    let cfg = TrainConfig { total_steps: 20, warmup_steps: 2, eval_every: 5, seed: 21, ..TrainConfig::default() };
    let run = || {
        let spec = ModelSpec::for_dataset(ModelConfig::default(), &ds, EmbeddingMode::Full);
        let mut t = Trainer::new(Model::<f32>::new(spec, 4).unwrap(), cfg, &ds.train).unwrap();
        let log = t.run(cfg.total_steps, &ds.validation, None, |_| Ok(())).unwrap();
        let lines: Vec<String> = log.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        (t.model, lines)
    };
    let (m1, l1) = run();
    let (_, l2) = run();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("model.ckpt");
    m1.save(&path).unwrap();
    let back = Model::<f32>::load(&path).unwrap();
    let mut forward_exact = back.candidate_projection().unwrap() == m1.candidate_projection().unwrap();
    for s in ds.test.iter().take(10).map(|s| s.tail(MAX_LEN)) {
        for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
            forward_exact &= m1.hidden_states(&s, mode).unwrap() == back.hidden_states(&s, mode).unwrap();
        }
    }
    report(
        11,
        "determinism and checkpointing",
        l1 == l2 && forward_exact,
        format!("metrics logs identical: {} ({} lines), save-load-forward exact: {forward_exact}", l1 == l2, l1.len()),
    );
}

#[test]
fn c12_linear_attention_cost() {
    let (short, long) = (measured_pairs(128, 8), measured_pairs(256, 8));
    let ratio = long as f64 / short as f64;
    report(
        12,
        "linear attention cost",
        (1.9..=2.1).contains(&ratio),
        format!("scored pairs {short} at T=128, {long} at T=256, ratio {ratio:.4}"),
    );
}

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use uifm::backbone::{AttentionMode, Backbone, BackboneConfig, SeqLayout};
use uifm::config::RunConfig;
use uifm::gradcheck::tiny_grammar;
use uifm::hybrid::EntityMetadata;
use uifm::synth::generate;
use uifm::{Dataset, EmbeddingMode, Graph, Model, ModelSpec, ParamStore, Scalar, Session, Tensor};

pub fn tiny_dataset(num_sessions: usize, seed: u64) -> Dataset {
    let mut grammar = tiny_grammar();
    grammar.max_len = 16;
    let corpus = generate(&grammar, num_sessions, seed).unwrap();
    Dataset::from_raw(&corpus.schema, &corpus.sessions, &corpus.metadata, &RunConfig::tiny().split).unwrap()
}

pub fn tiny_model<T: Scalar>(ds: &Dataset, mode: EmbeddingMode, seed: u64) -> Model<T> {
    let spec = ModelSpec::for_dataset(RunConfig::tiny().model(), ds, mode);
    Model::new(spec, seed).unwrap()
}

/// Overwrite every parameter, including gains and biases, with N(0, std²).
pub fn randomize<T: Scalar>(store: &mut ParamStore<T>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for x in p.value.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x = T::lit(z * std);
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub type Rows = Vec<Vec<f64>>;

pub fn affine(x: &Rows, w: &[f64], b: &[f64]) -> Rows {
    let out = b.len();
    x.iter()
        .map(|r| (0..out).map(|j| b[j] + r.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>()).collect())
        .collect()
}

pub fn norm(x: &Rows, g: &[f64], b: &[f64]) -> Rows {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter().enumerate().map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn add(a: &mut Rows, b: &Rows) {
    for (r, s) in a.iter_mut().zip(b) {
        r.iter_mut().zip(s).for_each(|(x, y)| *x += y);
    }
}

/// Plain dense causal pre-norm transformer over one sequence.
pub fn dense_reference(store: &ParamStore<f64>, cfg: &BackboneConfig, tokens: &Rows) -> Rows {
    let p = |n: String| store.by_name(&n).unwrap().value.data().to_vec();
    let d = cfg.d_model;
    let dh = d / cfg.num_heads;
    let pos = p("backbone.positions".into());
    let mut x: Rows = tokens.iter().enumerate().map(|(i, r)| (0..d).map(|j| r[j] + pos[i * d + j]).collect()).collect();
    for l in 0..cfg.num_layers {
        let n = |s: &str| format!("backbone.layer{l}.{s}");
        let h = norm(&x, &p(n("ln1.g")), &p(n("ln1.b")));
        let q = affine(&h, &p(n("q.w")), &p(n("q.b")));
        let k = affine(&h, &p(n("k.w")), &p(n("k.b")));
        let v = affine(&h, &p(n("v.w")), &p(n("v.b")));
        let mut att = vec![vec![0.0; d]; x.len()];
        for i in 0..x.len() {
            for head in 0..cfg.num_heads {
                let cols = head * dh..(head + 1) * dh;
                let s: Vec<f64> = (0..=i)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    att[i][c] = (0..=i).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        add(&mut x, &affine(&att, &p(n("o.w")), &p(n("o.b"))));
        let h = norm(&x, &p(n("ln2.g")), &p(n("ln2.b")));
        let f: Rows = affine(&h, &p(n("ffn1.w")), &p(n("ffn1.b")))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        add(&mut x, &affine(&f, &p(n("ffn2.w")), &p(n("ffn2.b"))));
    }
    norm(&x, &p("backbone.final_ln.g".into()), &p("backbone.final_ln.b".into()))
}

pub fn random_backbone(seed: u64, window: usize) -> (BackboneConfig, ParamStore<f64>, Backbone) {
    let cfg = BackboneConfig {
        d_model: 8,
        num_layers: 2,
        num_heads: 2,
        window,
        ffn_width: 16,
        dropout_rate: 0.0,
        max_positions: 32,
    };
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, &cfg, 0.3, &mut rng(seed)).unwrap();
    randomize(&mut store, 0.5, seed ^ 0xfeed);
    (cfg, store, bb)
}

pub fn sparse_forward(bb: &Backbone, store: &ParamStore<f64>, seqs: &[Rows], mode: AttentionMode) -> Vec<Rows> {
    let layout = SeqLayout::new(seqs.iter().map(|s| s.len()).collect()).unwrap();
    let d = seqs[0][0].len();
    let mut data = vec![0.0; layout.rows() * d];
    for (b, s) in seqs.iter().enumerate() {
        for (p, r) in s.iter().enumerate() {
            let row = layout.row(b, p);
            data[row * d..(row + 1) * d].copy_from_slice(r);
        }
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::matrix(layout.rows(), d, data).unwrap()).unwrap();
    let out = bb.forward::<f64, ChaCha8Rng>(&mut g, store, x, &layout, mode, None).unwrap();
    let h = g.value(out.hidden);
    seqs.iter().enumerate().map(|(b, s)| (0..s.len()).map(|p| h.row(layout.row(b, p)).to_vec()).collect()).collect()
}

pub fn max_diff(a: &Rows, b: &Rows) -> f64 {
    a.iter().zip(b).flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max)
}

pub fn perturb(session: &mut Session, from: usize, vocab: &[usize], r: &mut ChaCha8Rng) {
    for p in from..session.len() {
        if p > from && r.random_bool(0.5) {
            continue;
        }
        let ev = &mut session.events[p];
        for (a, v) in ev.categorical.iter_mut().enumerate() {
            *v = r.random_range(0..vocab[a] as u32);
        }
        for x in ev.numerical.iter_mut() {
            *x += r.random_range(-50.0..50.0);
        }
        for t in ev.temporal.iter_mut() {
            *t += r.random_range(-500.0..5000.0);
        }
    }
}

pub fn measured_pairs(t: usize, window: usize) -> usize {
    let cfg = BackboneConfig {
        d_model: 4,
        num_layers: 1,
        num_heads: 1,
        window,
        ffn_width: 4,
        dropout_rate: 0.0,
        max_positions: 512,
    };
    let mut store = ParamStore::<f32>::new();
    let bb = Backbone::new(&mut store, &cfg, 0.1, &mut rng(1)).unwrap();
    let layout = SeqLayout::single(t).unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(vec![t, 4])).unwrap();
    let out = bb.forward::<f32, ChaCha8Rng>(&mut g, &store, x, &layout, AttentionMode::Causal, None).unwrap();
    let (_, heads, probs) = g.attention_weights(out.attention[0]).unwrap();
    probs.len() / heads
}

/// Position of `target` after a full sort by score descending, id ascending.
pub fn brute_rank(scores: &[f64], candidates: &[u32], target: u32) -> usize {
    let mut order: Vec<(f64, u32)> = scores.iter().copied().zip(candidates.iter().copied()).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    order.iter().position(|&(_, c)| c == target).unwrap() + 1
}

pub fn brute_hr(ranks: &[usize], k: usize) -> f64 {
    let mut hits = 0usize;
    for &r in ranks {
        if r <= k {
            hits += 1;
        }
    }
    hits as f64 / ranks.len() as f64
}

pub fn brute_ndcg(ranks: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for &r in ranks {
        if r <= k {
            total += 1.0 / ((r + 1) as f64).log2();
        }
    }
    total / ranks.len() as f64
}

pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

pub fn random_metadata<T: Scalar>(model: &Model<T>, r: &mut ChaCha8Rng) -> EntityMetadata {
    let cat = &model.catalog().side_vocab_sizes;
    let nums = model.catalog().side_stats.len();
    EntityMetadata {
        entity_id: None,
        categorical: cat.iter().map(|&n| r.random_range(0..n as u32)).collect(),
        numerical: (0..nums).map(|_| r.random_range(0.0..200.0)).collect(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

//! Synthetic interaction corpora with a known generating rule.
//!
//! Item `i` has category `i mod C`, price bucket `(i / C) mod B` and brand
//! `category mod num_brands`. The next item is determined by the current
//! item's (category, bucket) cell: stable categories keep their category,
//! the others follow a seeded cycle, and the bucket always follows a seeded
//! cycle. With probability `noise_rate` the transition is replaced by a
//! uniformly drawn item. A session is labeled churned when the entropy of
//! its last three categories exceeds the threshold.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UifmError};
use crate::schema::{
    write_metadata, write_session_log, EventSchema, MetadataRow, MetadataTable, RawEvent, RawSession, SplitConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarSpec {
    pub num_items: usize,
    pub num_categories: usize,
    pub num_price_buckets: usize,
    pub num_brands: usize,
    /// Categories `0..num_stable_categories` map to themselves.
    pub num_stable_categories: usize,
    /// Fraction of items withheld from training by the split.
    pub cold_item_fraction: f64,
    pub noise_rate: f64,
    /// In bits.
    pub churn_entropy_threshold: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub mean_gap_seconds: f64,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        GrammarSpec {
            num_items: 100,
            num_categories: 10,
            num_price_buckets: 10,
            num_brands: 5,
            num_stable_categories: 5,
            cold_item_fraction: 0.1,
            noise_rate: 0.1,
            churn_entropy_threshold: 0.5,
            min_len: 4,
            max_len: 10,
            mean_gap_seconds: 60.0,
        }
    }
}

impl GrammarSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(UifmError::Config(format!("grammar: {msg}")));
        if self.num_categories == 0 || self.num_price_buckets == 0 || self.num_brands == 0 {
            return bad("category, bucket and brand counts must be >= 1".into());
        }
        if self.num_items < self.num_categories {
            return bad(format!("{} items cannot cover {} categories", self.num_items, self.num_categories));
        }
        if self.num_brands > self.num_categories {
            return bad(format!("{} brands exceed {} categories", self.num_brands, self.num_categories));
        }
        if self.num_stable_categories > self.num_categories {
            return bad(format!("{} stable categories exceed {}", self.num_stable_categories, self.num_categories));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} not in [0,1]", self.noise_rate));
        }
        if !(0.0..1.0).contains(&self.cold_item_fraction) {
            return bad(format!("cold_item_fraction {} not in [0,1)", self.cold_item_fraction));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return bad(format!("session lengths [{}, {}] invalid", self.min_len, self.max_len));
        }
        if !(self.mean_gap_seconds > 0.0) {
            return bad("mean_gap_seconds must be positive".into());
        }
        Ok(())
    }

    /// Split configuration withholding `cold_item_fraction` of the items.
    pub fn split_config(&self, seed: u64) -> SplitConfig {
        SplitConfig { holdout_fraction: self.cold_item_fraction, seed, ..SplitConfig::default() }
    }

    /// Bayes-optimal HR@K: the rule item plus `K − 1` arbitrary others.
    pub fn oracle_hr_ceiling(&self, k: usize) -> f64 {
        let k = k.min(self.num_items) as f64;
        (1.0 - self.noise_rate) + self.noise_rate * k / self.num_items as f64
    }

    pub fn schema() -> EventSchema {
        serde_json::from_value(serde_json::json!({
            "categorical": [
                {"name": "item_id", "is_entity_id": true},
                {"name": "category"},
                {"name": "brand"}
            ],
            "numerical": [{"name": "price", "unit": "EUR"}],
            "temporal": [{"name": "timestamp", "kind": "absolute_timestamp"}],
            "metadata": {"categorical": ["category", "brand"], "numerical": ["price"]}
        }))
        .expect("static schema")
    }
}

/// The transition rule instantiated for one seed.
#[derive(Debug, Clone)]
pub struct Grammar {
    pub spec: GrammarSpec,
    next_category: Vec<usize>,
    next_bucket: Vec<usize>,
    prices: Vec<f64>,
}

fn seeded_cycle(items: &[usize], rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut order = items.to_vec();
    order.shuffle(rng);
    (0..order.len()).map(|k| (order[k], order[(k + 1) % order.len()])).collect()
}

impl Grammar {
    pub fn new(spec: GrammarSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9a77);
        let c = spec.num_categories;
        let mut next_category: Vec<usize> = (0..c).collect();
        let moving: Vec<usize> = (spec.num_stable_categories..c).collect();
        for (from, to) in seeded_cycle(&moving, &mut rng) {
            next_category[from] = to;
        }
        let mut next_bucket: Vec<usize> = (0..spec.num_price_buckets).collect();
        for (from, to) in seeded_cycle(&next_bucket.clone(), &mut rng) {
            next_bucket[from] = to;
        }
        let prices = (0..spec.num_items)
            .map(|i| {
                let u: f64 = rng.random_range(0.15..0.85);
                ((10.0 * (Self::bucket_of(&spec, i) as f64 + u)) * 100.0).round() / 100.0
            })
            .collect();
        Ok(Grammar { spec, next_category, next_bucket, prices })
    }

    fn bucket_of(spec: &GrammarSpec, item: usize) -> usize {
        (item / spec.num_categories) % spec.num_price_buckets
    }

    pub fn category(&self, item: usize) -> usize {
        item % self.spec.num_categories
    }

    pub fn bucket(&self, item: usize) -> usize {
        Self::bucket_of(&self.spec, item)
    }

    pub fn brand(&self, item: usize) -> usize {
        self.category(item) % self.spec.num_brands
    }

    pub fn price(&self, item: usize) -> f64 {
        self.prices[item]
    }

    /// Item chosen by the rule from the current item's (category, bucket).
    pub fn rule_next(&self, item: usize) -> usize {
        let c = self.next_category[self.category(item)];
        let b = self.next_bucket[self.bucket(item)];
        (c + self.spec.num_categories * b) % self.spec.num_items
    }

    /// Rule transition, replaced by a uniform item with probability ε.
    pub fn sample_next<R: Rng>(&self, item: usize, rng: &mut R) -> usize {
        if self.spec.noise_rate > 0.0 && rng.random::<f64>() < self.spec.noise_rate {
            rng.random_range(0..self.spec.num_items)
        } else {
            self.rule_next(item)
        }
    }

    pub fn item_name(&self, item: usize) -> String {
        format!("i{item:03}")
    }
}

/// Shannon entropy in bits of the empirical distribution of `values`.
pub fn entropy_bits(values: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in values {
        *counts.entry(v).or_insert(0) += 1;
    }
    let n = values.len() as f64;
    -counts.values().map(|&c| c as f64 / n).map(|p| p * p.log2()).sum::<f64>()
}

/// Next-item distribution at one position: `rule_weight` on `rule_item`
/// plus `uniform_weight` spread evenly over all items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub session_id: String,
    pub position: usize,
    pub rule_item: String,
    pub rule_weight: f64,
    pub uniform_weight: f64,
    pub num_items: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub schema: EventSchema,
    pub sessions: Vec<RawSession>,
    pub metadata: MetadataTable,
    /// `(session_id, churned)`.
    pub churn: Vec<(String, bool)>,
    pub oracle: Vec<OracleRecord>,
}

impl Corpus {
    /// Write `schema.json`, `sessions.csv`, `metadata.csv`, `churn.csv` and
    /// `oracle.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let paths: Vec<PathBuf> = ["schema.json", "sessions.csv", "metadata.csv", "churn.csv", "oracle.jsonl"]
            .iter()
            .map(|f| dir.join(f))
            .collect();
        fs::write(&paths[0], serde_json::to_string_pretty(&self.schema)? + "\n")?;
        write_session_log(&paths[1], &self.schema, &self.sessions)?;
        write_metadata(&paths[2], &self.schema, &self.metadata)?;
        let mut w = csv::Writer::from_path(&paths[3])?;
        w.write_record(["session_id", "churned"])?;
        for (sid, c) in &self.churn {
            w.write_record([sid.as_str(), if *c { "1" } else { "0" }])?;
        }
        w.flush()?;
        let mut f = std::io::BufWriter::new(fs::File::create(&paths[4])?);
        for rec in &self.oracle {
            serde_json::to_writer(&mut f, rec)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(paths)
    }
}

/// Read `churn.csv` into `(session_id, churned)` pairs.
pub fn read_churn_labels(path: &Path) -> Result<Vec<(String, bool)>> {
    let file = fs::File::open(path).map_err(|_| UifmError::MissingInput(path.to_path_buf()))?;
    let mut r = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let label = match rec.get(1) {
            Some("1") => true,
            Some("0") => false,
            other => {
                return Err(UifmError::Parse {
                    path: path.display().to_string(),
                    line: i + 2,
                    msg: format!("churn label {other:?} is not 0 or 1"),
                })
            }
        };
        out.push((rec[0].to_string(), label));
    }
    Ok(out)
}

pub fn generate(spec: &GrammarSpec, num_sessions: usize, seed: u64) -> Result<Corpus> {
    if num_sessions == 0 {
        return Err(UifmError::Config("num_sessions must be >= 1".into()));
    }
    let grammar = Grammar::new(*spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaps = Exp::new(1.0 / spec.mean_gap_seconds).map_err(|e| UifmError::Config(e.to_string()))?;
    let width = num_sessions.saturating_sub(1).to_string().len().max(5);
    let mut sessions = Vec::with_capacity(num_sessions);
    let mut churn = Vec::with_capacity(num_sessions);
    let mut oracle = Vec::new();
    for s in 0..num_sessions {
        let sid = format!("u{s:0width$}");
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut t: i64 = 1_600_000_000 + s as i64 * 3_600;
        let mut item = rng.random_range(0..spec.num_items);
        let mut items = Vec::with_capacity(len);
        for p in 0..len {
            if p > 0 {
                oracle.push(OracleRecord {
                    session_id: sid.clone(),
                    position: p,
                    rule_item: grammar.item_name(grammar.rule_next(item)),
                    rule_weight: 1.0 - spec.noise_rate,
                    uniform_weight: spec.noise_rate,
                    num_items: spec.num_items,
                });
                item = grammar.sample_next(item, &mut rng);
                t += 1 + gaps.sample(&mut rng).round() as i64;
            }
            items.push((item, t));
        }
        let cats: Vec<usize> =
            items[items.len() - 3.min(items.len())..].iter().map(|&(i, _)| grammar.category(i)).collect();
        churn.push((sid.clone(), entropy_bits(&cats) > spec.churn_entropy_threshold));
        let events = items
            .iter()
            .map(|&(i, t)| RawEvent {
                categorical: vec![
                    grammar.item_name(i),
                    format!("c{}", grammar.category(i)),
                    format!("b{}", grammar.brand(i)),
                ],
                numerical: vec![grammar.price(i)],
                temporal: vec![t as f64],
            })
            .collect();
        sessions.push(RawSession { session_id: sid, events });
    }
    let metadata = MetadataTable::new(
        (0..spec.num_items)
            .map(|i| MetadataRow {
                entity: grammar.item_name(i),
                categorical: vec![format!("c{}", grammar.category(i)), format!("b{}", grammar.brand(i))],
                numerical: vec![grammar.price(i)],
            })
            .collect(),
    )?;
    Ok(Corpus { schema: GrammarSpec::schema(), sessions, metadata, churn, oracle })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceiling_formula() {
        let s = GrammarSpec { noise_rate: 0.0, ..Default::default() };
        assert_eq!(s.oracle_hr_ceiling(10), 1.0);
        let s = GrammarSpec { noise_rate: 0.2, ..Default::default() };
        assert!((s.oracle_hr_ceiling(10) - 0.82).abs() < 1e-12);
        let s = GrammarSpec { noise_rate: 1.0, ..Default::default() };
        assert!((s.oracle_hr_ceiling(10) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn noiseless_transitions_follow_rule() {
        let spec = GrammarSpec { noise_rate: 0.0, ..Default::default() };
        let c = generate(&spec, 50, 4).unwrap();
        let g = Grammar::new(spec, 4).unwrap();
        for s in &c.sessions {
            for w in s.events.windows(2) {
                let cur: usize = w[0].categorical[0][1..].parse().unwrap();
                assert_eq!(w[1].categorical[0], g.item_name(g.rule_next(cur)));
            }
        }
        assert!(c.oracle.iter().all(|o| o.rule_weight == 1.0 && o.uniform_weight == 0.0));
    }

    #[test]
    fn stable_categories_are_fixed_points() {
        let g = Grammar::new(GrammarSpec::default(), 1).unwrap();
        for i in 0..100 {
            if g.category(i) < 5 {
                assert_eq!(g.category(g.rule_next(i)), g.category(i));
            } else {
                assert_ne!(g.category(g.rule_next(i)), g.category(i));
            }
            assert_ne!(g.bucket(g.rule_next(i)), g.bucket(i));
        }
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy_bits(&[3, 3, 3]), 0.0);
        assert!((entropy_bits(&[1, 2]) - 1.0).abs() < 1e-12);
        assert!((entropy_bits(&[1, 2, 3]) - 3f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_specs_rejected() {
        for spec in [
            GrammarSpec { num_items: 5, ..Default::default() },
            GrammarSpec { num_brands: 11, ..Default::default() },
            GrammarSpec { num_stable_categories: 11, ..Default::default() },
            GrammarSpec { noise_rate: 1.5, ..Default::default() },
            GrammarSpec { min_len: 1, ..Default::default() },
        ] {
            assert!(generate(&spec, 10, 0).is_err(), "{spec:?}");
        }
    }
}

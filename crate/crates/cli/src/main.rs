use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use uifm::config::RunConfig;
use uifm::eval::{churn_probe, evaluate_split, CandidateMode};
use uifm::numeric::checkpoint::read_header;
use uifm::synth::{generate, read_churn_labels};
use uifm::trainer::{MetricsLog, RunFiles, Trainer};
use uifm::{gradcheck, Dataset, EmbeddingMode, Model, ModelSpec, Precision, Result, Scalar, UifmError};

#[derive(Parser)]
#[command(name = "uifm", version, about = "Event sequence foundation model with cold-start entity embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Directory with schema.json, sessions.csv and metadata.csv.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    split: Option<SplitArg>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate a synthetic corpus with a known transition rule.
    Synth,
    /// Validate and split a session log, build vocabularies and statistics.
    Ingest,
    /// Pretrain (or resume with --checkpoint).
    Train,
    /// Next-entity ranking on the test split.
    Evaluate,
    /// Export fused entity embeddings as CSV.
    Embed,
    /// Linear churn probe on frozen session summaries.
    Churn,
    /// Finite-difference check of every parameter gradient.
    Gradcheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest => "ingest",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Embed => "embed",
            Command::Churn => "churn",
            Command::Gradcheck => "gradcheck",
        }
    }
}

#[derive(ValueEnum, Clone, Copy)]
enum SplitArg {
    Warm,
    Cold,
    All,
}

#[derive(ValueEnum, Clone, Copy)]
enum ModeArg {
    Full,
    Nocoldstart,
}

#[derive(ValueEnum, Clone, Copy)]
enum PrecisionArg {
    F32,
    F64,
}

fn exit_code(kind: &str) -> u8 {
    match kind {
        "missing_input" => 3,
        "schema_mismatch" => 4,
        "invalid_config" => 5,
        "bad_data" => 6,
        "bad_checkpoint" => 7,
        "numeric" => 8,
        "io" => 9,
        _ => 10,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            let text = serde_json::to_string_pretty(&report).unwrap_or_default();
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = e.kind();
            eprintln!("{}", json!({"error": kind, "message": e.to_string()}));
            ExitCode::from(exit_code(kind))
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None if cli.command == Command::Gradcheck => RunConfig::tiny(),
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(data) = &cli.data {
        cfg.paths.data = data.clone();
    }
    if let Some(mode) = cli.mode {
        cfg.mode = embedding_mode(mode);
    }
    if let Some(p) = cli.precision {
        cfg.train.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn embedding_mode(m: ModeArg) -> EmbeddingMode {
    match m {
        ModeArg::Full => EmbeddingMode::Full,
        ModeArg::Nocoldstart => EmbeddingMode::NoColdStart,
    }
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    fs::write(dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(UifmError::MissingInput(path.to_path_buf()))
    }
}

fn require_data(dir: &Path) -> Result<()> {
    ["schema.json", "sessions.csv", "metadata.csv"].iter().try_for_each(|f| require(&dir.join(f)))
}

fn checkpoint_arg(cli: &Cli) -> Result<&Path> {
    let path = cli.checkpoint.as_deref().ok_or_else(|| UifmError::MissingInput(PathBuf::from("--checkpoint")))?;
    require(path)?;
    Ok(path)
}

fn run(cli: &Cli) -> Result<Value> {
    let cfg = resolve_config(cli)?;
    let data = cfg.paths.data.clone();
    let out = match (&cli.out, cli.command) {
        (Some(o), _) => o.clone(),
        (None, Command::Synth) => data.clone(),
        (None, c) => PathBuf::from("runs").join(c.name()),
    };
    // Inputs are checked before anything is written.
    match cli.command {
        Command::Synth | Command::Gradcheck => {}
        Command::Ingest => require_data(&data)?,
        Command::Train => {
            require_data(&data)?;
            if let Some(c) = &cli.checkpoint {
                require(c)?;
            }
        }
        Command::Evaluate | Command::Embed => {
            checkpoint_arg(cli)?;
            require_data(&data)?;
        }
        Command::Churn => {
            checkpoint_arg(cli)?;
            require_data(&data)?;
            require(&data.join("churn.csv"))?;
        }
    }
    match cli.command {
        Command::Synth => synth(&cfg, &out),
        Command::Ingest => ingest(&cfg, &data, &out),
        Command::Train => {
            let ds = Dataset::from_dir(&data, &cfg.split)?;
            let precision = match &cli.checkpoint {
                Some(c) => dtype_precision(&read_header(c)?.dtype)?,
                None => cfg.train.precision,
            };
            match precision {
                Precision::F32 => train::<f32>(&cfg, &ds, cli.checkpoint.as_deref(), &out),
                Precision::F64 => train::<f64>(&cfg, &ds, cli.checkpoint.as_deref(), &out),
            }
        }
        Command::Evaluate | Command::Embed | Command::Churn => {
            let ckpt = checkpoint_arg(cli)?;
            match dtype_precision(&read_header(ckpt)?.dtype)? {
                Precision::F32 => with_model::<f32>(cli, &cfg, ckpt, &out),
                Precision::F64 => with_model::<f64>(cli, &cfg, ckpt, &out),
            }
        }
        Command::Gradcheck => {
            let report = gradcheck::run(&cfg, cfg.train.seed)?;
            fs::create_dir_all(&out)?;
            write_json(&out, "config.json", &cfg)?;
            write_json(&out, "report.json", &report)?;
            Ok(serde_json::to_value(report)?)
        }
    }
}

fn dtype_precision(dtype: &str) -> Result<Precision> {
    match dtype {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(UifmError::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let corpus = generate(&cfg.grammar, cfg.num_sessions, cfg.train.seed)?;
    corpus.write(out)?;
    write_json(out, "config.json", cfg)?;
    let report = json!({
        "sessions": corpus.sessions.len(),
        "events": corpus.sessions.iter().map(|s| s.events.len()).sum::<usize>(),
        "items": cfg.grammar.num_items,
        "churned": corpus.churn.iter().filter(|c| c.1).count(),
        "oracle_hr_at_10": cfg.grammar.oracle_hr_ceiling(10),
    });
    write_json(out, "report.json", &report)?;
    Ok(report)
}

fn ingest(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Value> {
    let ds = Dataset::from_dir(data, &cfg.split)?;
    fs::create_dir_all(out)?;
    write_json(out, "config.json", cfg)?;
    write_json(out, "schema.json", &ds.schema)?;
    write_json(out, "vocab.json", &ds.vocabs)?;
    write_json(out, "norm.json", &ds.norm)?;
    write_json(out, "split.json", &ds.split)?;
    write_json(out, "report.json", &ds.summary)?;
    Ok(serde_json::to_value(&ds.summary)?)
}

fn train<T: Scalar>(cfg: &RunConfig, ds: &Dataset, resume: Option<&Path>, out: &Path) -> Result<Value> {
    let model = match resume {
        Some(path) => {
            let m = Model::<T>::load(path)?;
            if m.schema().fingerprint() != ds.schema.fingerprint() || m.spec.vocabs != ds.vocabs {
                return Err(UifmError::Schema("checkpoint does not match the data and split".into()));
            }
            m
        }
        None => Model::<T>::new(ModelSpec::for_dataset(cfg.model(), ds, cfg.mode), cfg.train.seed)?,
    };
    let mut trainer = Trainer::new(model, cfg.train, &ds.train)?;
    let files = RunFiles::create(out)?;
    write_json(out, "config.json", cfg)?;
    let mut log = if resume.is_some() && files.metrics().exists() {
        MetricsLog::append(&files.metrics())?
    } else {
        MetricsLog::create(&files.metrics())?
    };
    let start = trainer.step();
    let records = trainer.run(cfg.train.total_steps, &ds.validation, Some(&files), |r| log.write(r))?;
    log.flush()?;
    trainer.model.save(&files.final_checkpoint())?;
    let last = records.last();
    let report = json!({
        "start_step": start,
        "steps": trainer.step(),
        "dtype": T::DTYPE,
        "loss_total": last.map(|r| r.loss_total),
        "val_hr_at_10": last.and_then(|r| r.val_hr_at_10),
        "causal_passes": trainer.counters.causal_passes,
        "bidirectional_passes": trainer.counters.bidirectional_passes,
        "dataset": ds.summary,
    });
    write_json(out, "report.json", &report)?;
    Ok(report)
}

fn with_model<T: Scalar>(cli: &Cli, cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<Value> {
    let mut model = Model::<T>::load(ckpt)?;
    if let Some(m) = cli.mode {
        model.set_mode(embedding_mode(m));
    }
    let ds = Dataset::from_dir(&cfg.paths.data, &cfg.split)?;
    if model.schema().fingerprint() != ds.schema.fingerprint() || model.spec.vocabs != ds.vocabs {
        return Err(UifmError::Schema("checkpoint does not match the data and split".into()));
    }
    let max_len = cfg.train.max_seq_len;
    let report = match cli.command {
        Command::Evaluate => {
            let mode = match cli.split.unwrap_or(SplitArg::All) {
                SplitArg::Warm => CandidateMode::WarmOnly,
                SplitArg::Cold => CandidateMode::ColdOnly,
                SplitArg::All => CandidateMode::FullVocab,
            };
            serde_json::to_value(evaluate_split(&model, &ds.train, &ds.test, mode, max_len)?)?
        }
        Command::Embed => {
            let rows = model.entity_embeddings()?;
            let names = &model.spec.vocabs.categorical[model.entity_attr()];
            fs::create_dir_all(out)?;
            let path = out.join("embeddings.csv");
            let mut w = csv::Writer::from_path(&path)?;
            let dim = rows.first().map_or(0, |r| r.1.len());
            let mut header = vec!["entity_id".to_string()];
            header.extend((0..dim).map(|j| format!("v{j}")));
            w.write_record(&header)?;
            for (id, v) in &rows {
                let mut rec = vec![names.raw(*id).to_string()];
                rec.extend(v.iter().map(|x| x.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
            json!({"entities": rows.len(), "dim": dim, "path": path})
        }
        Command::Churn => {
            let path = cfg.paths.data.join("churn.csv");
            let labels: HashMap<String, bool> = read_churn_labels(&path)?.into_iter().collect();
            let y = ds
                .test
                .iter()
                .map(|s| {
                    labels.get(&s.user_id).copied().ok_or_else(|| UifmError::Parse {
                        path: path.display().to_string(),
                        line: 0,
                        msg: format!("no churn label for session {}", s.user_id),
                    })
                })
                .collect::<Result<Vec<bool>>>()?;
            serde_json::to_value(churn_probe(&model, &ds.test, &y, max_len, cfg.train.seed)?)?
        }
        _ => unreachable!("not a checkpoint command"),
    };
    fs::create_dir_all(out)?;
    write_json(out, "config.json", cfg)?;
    write_json(out, "report.json", &report)?;
    Ok(report)
}

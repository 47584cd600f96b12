//! `formparse`: generate, validate, train, evaluate, predict and draw.

mod config;
mod prediction;
mod viz;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use formparse::corpus::{build_vocab, parse_dataset, read_dataset, serialize_dataset, validate};
use formparse::encoder::{load_precomputed, BoxStatistics};
use formparse::metrics::evaluate;
use formparse::model::{prepare, thread_cap, Backbone};
use formparse::syngen::{corpus_stats, generate, SynSpec};
use formparse::trainer::{Checkpoint, Session};
use formparse::{Dataset, Example, JointModel, LabelSet};

use config::Settings;
use prediction::{resolve, PredictionFile};

/// A bad flag or configuration value; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

#[derive(Parser)]
#[command(name = "formparse", version, about = "Joint entity recognition and relation extraction for forms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelSetArg {
    Xfund,
    Indform,
}

impl LabelSetArg {
    fn labels(self) -> LabelSet {
        match self {
            LabelSetArg::Xfund => LabelSet::xfund(),
            LabelSetArg::Indform => LabelSet::indform(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VizFormat {
    Svg,
    Dot,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Gen {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        num_docs: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        one_to_many_frac: Option<f64>,
        #[arg(long, value_enum, default_value = "xfund")]
        label_set: LabelSetArg,
    },
    /// Check a dataset file and print a summary.
    Validate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "xfund")]
        label_set: LabelSetArg,
    },
    /// Train a model; writes log.jsonl and checkpoints into --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Validation set for per-epoch metrics and best-checkpoint selection.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `toy` or `precomputed:PATH`.
        #[arg(long, default_value = "toy")]
        encoder: String,
        #[arg(long)]
        soft_label_start: Option<usize>,
        #[arg(long)]
        soft_label_warm: Option<usize>,
        #[arg(long)]
        no_soft_label: bool,
        /// Score entity vectors directly, skipping the Bi-LSTM.
        #[arg(long)]
        no_decoder: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Continue from a checkpoint written by an earlier run into --out.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        re_threshold: f64,
        /// Use gold labels to form relation candidates.
        #[arg(long)]
        gold_candidates: bool,
        /// Hidden-state file for checkpoints trained on precomputed states.
        #[arg(long)]
        states: Option<PathBuf>,
    },
    /// Write per-cell labels and relations for a dataset.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        re_threshold: f64,
        #[arg(long)]
        states: Option<PathBuf>,
    },
    /// Draw one predicted document as SVG or DOT.
    Viz {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "svg")]
        format: VizFormat,
        /// Document id; the first predicted document when absent.
        #[arg(long)]
        doc: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Gen {
            seed,
            num_docs,
            out,
            one_to_many_frac,
            label_set,
        } => {
            let mut spec = SynSpec::new(label_set.labels());
            spec.seed = seed;
            spec.num_docs = num_docs as usize;
            if let Some(f) = one_to_many_frac {
                if !(0.0..=1.0).contains(&f) {
                    return usage(format!("--one-to-many-frac {f} outside [0, 1]"));
                }
                spec.one_to_many_frac = f;
            }
            let docs = generate(&spec)?;
            let ds = Dataset::new(&spec.lang, spec.split, docs);
            fs::write(&out, serialize_dataset(&ds)).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} documents to {}", ds.documents.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { data, label_set } => cmd_validate(&data, &label_set.labels()),
        Command::Train {
            data,
            val,
            config,
            out,
            encoder,
            soft_label_start,
            soft_label_warm,
            no_soft_label,
            no_decoder,
            seed,
            epochs,
            lr,
            resume,
        } => {
            let mut settings = Settings::default();
            if let Some(path) = &config {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                if let Err(e) = settings.apply_text(&text) {
                    return usage(format!("{}: {e}", path.display()));
                }
            }
            let (t, m) = (&mut settings.train, &mut settings.model);
            if let Some(s) = seed {
                t.seed = s;
                m.init_seed = s;
            }
            if let Some(e) = epochs {
                t.epochs = e;
            }
            if let Some(v) = lr {
                t.lr = v;
            }
            if let Some(v) = soft_label_start {
                t.soft_label.ep_start = v;
            }
            if let Some(v) = soft_label_warm {
                t.soft_label.ep_warm = v;
            }
            if no_soft_label {
                t.soft_label.enabled = false;
            }
            if no_decoder {
                m.heads.use_decoder = false;
            }
            let states = match encoder.as_str() {
                "toy" => None,
                other => match other.strip_prefix("precomputed:") {
                    Some(p) if !p.is_empty() => Some(PathBuf::from(p)),
                    _ => return usage(format!("--encoder must be toy or precomputed:PATH, got {other:?}")),
                },
            };
            cmd_train(settings, &data, val.as_deref(), &out, states.as_deref(), resume.as_deref())
        }
        Command::Eval {
            ckpt,
            data,
            report,
            re_threshold,
            gold_candidates,
            states,
        } => {
            check_threshold(re_threshold)?;
            let (model, ds, examples) = load_for_inference(&ckpt, &data, states.as_deref())?;
            let preds = model.predict_all(&examples, gold_candidates, re_threshold, thread_cap())?;
            let rep = evaluate(&examples, &preds, &model.labels)?;
            let json = rep.to_json();
            match report {
                Some(p) => fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{json}"),
            }
            log::info!("evaluated {} documents", ds.documents.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Predict {
            ckpt,
            input,
            out,
            re_threshold,
            states,
        } => {
            check_threshold(re_threshold)?;
            let (model, ds, examples) = load_for_inference(&ckpt, &input, states.as_deref())?;
            let preds = model.predict_all(&examples, false, re_threshold, thread_cap())?;
            let file = PredictionFile::new(&model.labels, re_threshold, &ds.documents, &preds);
            fs::write(&out, file.to_json()).with_context(|| format!("writing {}", out.display()))?;
            let links: usize = file.documents.iter().map(|d| d.relations.len()).sum();
            println!("predicted {} documents, {links} relations", file.documents.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Viz {
            pred,
            data,
            out,
            format,
            doc,
        } => {
            let file = PredictionFile::read(&fs::read(&pred).with_context(|| format!("reading {}", pred.display()))?)?;
            let ds = read_dataset(&fs::read(&data).with_context(|| format!("reading {}", data.display()))?)?;
            let labels = LabelSet::by_name(&file.label_set)
                .with_context(|| format!("unknown label set {:?}", file.label_set))?;
            let pairs = resolve(&file, &ds)?;
            let (p, d) = match &doc {
                Some(id) => *pairs
                    .iter()
                    .find(|(p, _)| &p.id == id)
                    .with_context(|| format!("document {id} has no predictions"))?,
                None => *pairs.first().context("prediction file is empty")?,
            };
            let text = match format {
                VizFormat::Svg => viz::svg(d, p, &labels),
                VizFormat::Dot => viz::dot(d, p, &labels),
            };
            fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return usage(format!("--re-threshold {t} outside [0, 1]"));
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_validate(path: &Path, labels: &LabelSet) -> Result<ExitCode> {
    let ds = read_dataset(&read_file(path)?)?;
    let mut bad = 0;
    for doc in &ds.documents {
        for v in validate(doc, labels) {
            println!("{}: {v}", doc.id);
            bad += 1;
        }
    }
    let stats = corpus_stats(&ds.documents);
    println!(
        "documents {} cells {} relations {}",
        stats.documents, stats.cells, stats.relations
    );
    for (label, n) in &stats.label_counts {
        println!("  {label} {n}");
    }
    let m = &stats.multiplicity;
    println!(
        "links by answers per question: 1:{} 2:{} 3:{} more:{} (one-to-many questions {:.3})",
        m.one_to_one, m.one_to_two, m.one_to_three, m.one_to_many, stats.one_to_many_frac
    );
    if bad > 0 {
        println!("{bad} violations");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn load_examples(path: &Path, model: &JointModel<f32>) -> Result<(Dataset, Vec<Example>)> {
    let ds = parse_dataset(&read_file(path)?, &model.labels)
        .with_context(|| format!("loading {}", path.display()))?;
    let ex = prepare(
        &ds.documents,
        &model.vocab,
        &model.labels,
        model.config.encoder.max_len,
        &BoxStatistics,
    )?;
    Ok((ds, ex))
}

fn attach_states(model: &mut JointModel<f32>, states: Option<&Path>) -> Result<()> {
    match (&model.config.backbone, states) {
        (Backbone::Precomputed, Some(p)) => {
            let s = load_precomputed(p).with_context(|| format!("loading {}", p.display()))?;
            model.attach_precomputed(Arc::new(s))?;
            Ok(())
        }
        (Backbone::Precomputed, None) => usage("this checkpoint needs --states"),
        (Backbone::Toy, Some(_)) => usage("--states only applies to precomputed checkpoints"),
        (Backbone::Toy, None) => Ok(()),
    }
}

fn load_for_inference(
    ckpt: &Path,
    data: &Path,
    states: Option<&Path>,
) -> Result<(JointModel<f32>, Dataset, Vec<Example>)> {
    let ckpt = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (mut model, _) = ckpt.restore()?;
    attach_states(&mut model, states)?;
    let (ds, ex) = load_examples(data, &model)?;
    Ok((model, ds, ex))
}

fn cmd_train(
    mut settings: Settings,
    data: &Path,
    val: Option<&Path>,
    out: &Path,
    states: Option<&Path>,
    resume: Option<&Path>,
) -> Result<ExitCode> {
    let mut session = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            log::info!("resuming after epoch {}", ckpt.manifest.epoch);
            Session::from_checkpoint(&ckpt)?
        }
        None => {
            let labels = settings.model.labels().map_err(|e| Usage(e.to_string()))?;
            let ds = parse_dataset(&read_file(data)?, &labels).with_context(|| format!("loading {}", data.display()))?;
            if ds.documents.is_empty() {
                bail!("{} holds no documents", data.display());
            }
            if let Some(p) = states {
                let s = load_precomputed(p).with_context(|| format!("loading {}", p.display()))?;
                settings.model.backbone = Backbone::Precomputed;
                if let Some(d) = s.dim() {
                    settings.model.encoder.d_model = d;
                }
            }
            let vocab = build_vocab(&ds.documents, settings.vocab_min_count)?;
            let model = JointModel::new(settings.model.clone(), vocab)?;
            Session::new(model, settings.train.clone()).map_err(|e| Usage(e.to_string()))?
        }
    };
    attach_states(&mut session.model, states)?;
    let (_, train) = load_examples(data, &session.model)?;
    let val = match val {
        Some(p) => Some(load_examples(p, &session.model)?.1),
        None => None,
    };
    let summary = session.run(&train, val.as_deref(), Some(out))?;
    if let Some(last) = summary.epochs.last() {
        println!(
            "epoch {} loss {:.6} (ser {:.6}, re {:.6})",
            last.epoch, last.loss, last.loss_ser, last.loss_re
        );
    }
    println!("checkpoints and log in {}", out.display());
    Ok(ExitCode::SUCCESS)
}

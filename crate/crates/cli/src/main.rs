use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use regtext_core::data::{gen_dataset, read_predictions, write_predictions, Dataset, Split};
use regtext_core::eval::{eval_densecap, eval_detection, infer_dataset};
use regtext_core::gradsuite::{composed_suite, primitive_suite};
use regtext_core::model::Model;
use regtext_core::train::{artifact_paths, train_with, TrainConfig};
use regtext_core::{checkpoint, render, Error, Vocabulary};

#[derive(Parser)]
#[command(name = "regtext", version, about = "Region-to-text detection and captioning on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Det,
    Densecap,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train.json and val.json synthetic datasets.
    GenData {
        #[arg(long)]
        seed: u64,
        /// Training images.
        #[arg(long)]
        n: usize,
        /// Validation images (defaults to n/10, at least 1).
        #[arg(long)]
        val_n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.ckpt, vocab.txt, config.json and loss_log.jsonl.
    Train {
        /// JSON training config; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write predictions (JSON lines) for every image of a dataset.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Task id (1-based) or begin-token name such as "[DenseCap]".
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Refuse checkpoints built with a different vocabulary file.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file against a dataset's annotations.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
    },
    /// Render one annotated SVG per dataset image.
    Render {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Finite-difference check of every primitive and the composed losses.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or(2, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { seed, n, val_n, out } => {
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let train = gen_dataset(seed, n, Split::Train)?;
            let val = gen_dataset(seed, val_n.unwrap_or((n / 10).max(1)), Split::Val)?;
            train.save(&out.join("train.json"))?;
            val.save(&out.join("val.json"))?;
            info!("wrote {} train and {} val images to {}", train.images.len(), val.images.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg: TrainConfig = match &config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => TrainConfig::default(),
            };
            cfg.validate()?;
            let ds = Dataset::load(&data)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let (ckpt, log_path) = artifact_paths(&out);
            let mut log_file = fs::File::create(&log_path).map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
            let start = Instant::now();
            let result = train_with(&cfg, &ds, Some(&out), |r| {
                if let Ok(line) = serde_json::to_string(r) {
                    let _ = writeln!(log_file, "{line}");
                }
            })?;
            checkpoint::save(&result.model, &ckpt)?;
            result.model.vocab.save(&out.join("vocab.txt"))?;
            let resolved = serde_json::to_string_pretty(&cfg)?;
            fs::write(out.join("config.json"), resolved).with_context(|| "writing config.json")?;
            info!("trained {} steps in {:.1}s; checkpoint {}", cfg.iterations, start.elapsed().as_secs_f64(), ckpt.display());
        }
        Command::Infer { ckpt, data, task, beam, vocab, out } => {
            let expected = vocab.as_deref().map(Vocabulary::load).transpose()?;
            let model = checkpoint::load_expecting(&ckpt, None, expected.as_ref())?;
            let task_id = resolve_task(&model, &task)?;
            let ds = Dataset::load(&data)?;
            let preds = infer_dataset(&model, &ds, task_id, beam)?;
            write_predictions(&out, &preds)?;
            info!("wrote {} records to {}", preds.len(), out.display());
        }
        Command::Eval { preds, gts, metric } => {
            let p = read_predictions(&preds)?;
            let ds = Dataset::load(&gts)?;
            let json = match metric {
                Metric::Det => serde_json::to_value(eval_detection(&p, &ds))?,
                Metric::Densecap => serde_json::to_value(eval_densecap(&p, &ds))?,
            };
            println!("{}", serde_json::to_string_pretty(&json)?);
        }
        Command::Render { preds, data, out, threshold } => {
            let p = read_predictions(&preds)?;
            let ds = Dataset::load(&data)?;
            let report = render::render(&p, &ds, &out, threshold)?;
            if !report.skipped.is_empty() {
                let ids: Vec<String> = report.skipped.iter().map(u64::to_string).collect();
                eprintln!("skipped predictions for unknown image ids: {}", ids.join(", "));
                let path = out.join("skipped.txt");
                fs::write(&path, ids.join("\n") + "\n").map_err(|e| Error::Io { path, source: e })?;
            }
            info!("wrote {} SVG files to {}", report.written.len(), out.display());
        }
        Command::GradCheck { seeds, tol } => grad_check(seeds, tol)?,
    }
    Ok(())
}

fn resolve_task(model: &Model, task: &str) -> Result<usize> {
    let vocab = &model.vocab;
    if let Ok(id) = task.parse::<usize>() {
        model.decoder.begin_token(vocab, id)?;
        return Ok(id);
    }
    let wanted = if task.starts_with('[') { task.to_string() } else { format!("[{task}]") };
    for id in 1..=vocab.num_tasks() {
        if vocab.task_name(id)? == wanted {
            return Ok(id);
        }
    }
    let valid: Vec<String> = (1..=vocab.num_tasks())
        .map(|i| format!("{i} {}", vocab.task_name(i).unwrap_or("?")))
        .collect();
    Err(Error::Config(format!("unknown task {task:?}; valid task ids: {}", valid.join(", "))).into())
}

fn grad_check(seeds: u64, tol: f64) -> Result<()> {
    let start = Instant::now();
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..seeds {
        for r in primitive_suite(seed)?.into_iter().chain(composed_suite(seed)?) {
            match worst.iter_mut().find(|w| w.0 == r.name) {
                Some(w) => w.1 = w.1.max(r.max_rel_err),
                None => worst.push((r.name, r.max_rel_err)),
            }
        }
    }
    let mut failed = 0;
    for (name, err) in &worst {
        let ok = *err < tol;
        failed += usize::from(!ok);
        println!("{:<24} {:.3e} {}", name, err, if ok { "ok" } else { "FAIL" });
    }
    println!("{} checks over {seeds} seeds in {:.1}s", worst.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        bail!(Error::Numeric { op: "grad_check", detail: format!("{failed} checks exceed {tol:e}") });
    }
    Ok(())
}

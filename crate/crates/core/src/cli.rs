//! `dsmoe` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or IO error, 3 numerical
//! failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{evaluate, export_heatmap, run_ablation_suite, tau_sweep};
use crate::io::{load_checkpoint, load_corpus, save_checkpoint, Corpus, RunConfig};
use crate::moe::convert_model;
use crate::train::{train_loop, Mode, TrainRecord};
use crate::Model;

#[derive(Debug, Parser)]
#[command(
    name = "dsmoe",
    version,
    about = "Dense-to-sparse MoE conversion toolkit"
)]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for checkpoints and reports.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train the dense byte-level LM.
    TrainDense {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Partition every FFN of a dense checkpoint into experts and add gates.
    Convert {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        experts: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Continue training a converted checkpoint.
    TrainDsmoe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// dsmoe_full, dsmoe_no_ste or dsmoe_no_g.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        /// Sparsity-loss weight.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Validation perplexity and activation statistics.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Perplexity and activation across thresholds.
    SweepTau {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
    /// Train the regime ablation arms from one converted checkpoint.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Per-layer expert activation frequencies as CSV.
    Heatmap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn init_logging() {
    let level = match std::env::var("DSMOE_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        Ok("info") => log::LevelFilter::Info,
        _ => log::LevelFilter::Warn,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Ctx {
    config: RunConfig,
    out_dir: PathBuf,
}

impl Ctx {
    fn checkpoint_out(&self) -> PathBuf {
        self.config
            .checkpoint_out
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoint"))
    }

    fn report_dir(&self) -> PathBuf {
        self.config
            .report_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.clone())
    }

    fn corpus_path(&self, flag: &Option<PathBuf>) -> Result<PathBuf> {
        let p = flag
            .clone()
            .or_else(|| self.config.corpus.clone())
            .ok_or_else(|| Error::Config("no corpus given (--corpus or config `corpus`)".into()))?;
        existing(p)
    }

    fn checkpoint_path(&self, flag: &Option<PathBuf>) -> Result<PathBuf> {
        let p = flag
            .clone()
            .or_else(|| self.config.checkpoint_in.clone())
            .ok_or_else(|| {
                Error::Config("no input checkpoint given (--checkpoint or `checkpoint_in`)".into())
            })?;
        existing(p)
    }

    fn corpus(&self, path: &Path) -> Result<Corpus> {
        load_corpus(path, self.config.val_fraction, self.config.train.seq_len)
    }

    fn window(&self, model: &Model) -> usize {
        self.config.train.seq_len.min(model.config.max_seq_len)
    }

    fn prepare_outputs(&self) -> Result<()> {
        for d in [self.out_dir.clone(), self.report_dir()] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }
}

fn existing(p: PathBuf) -> Result<PathBuf> {
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::io(
            &p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train_with_log(
    model: &mut Model,
    corpus: &Corpus,
    ctx: &Ctx,
    checkpoint_out: &Path,
) -> Result<Vec<TrainRecord>> {
    let log_path = ctx.report_dir().join("train_log.ndjson");
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let interval = ctx.config.checkpoint_interval;
    let out_dir = ctx.out_dir.clone();
    let records = train_loop(model, &corpus.train, &ctx.config.train, |rec, m| {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if interval > 0 && rec.step % interval == 0 {
            save_checkpoint(m, &out_dir.join(format!("checkpoint-step{}", rec.step)))?;
        }
        Ok(())
    })?;
    save_checkpoint(model, checkpoint_out)?;
    Ok(records)
}

fn execute(cli: &Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.train.seed = s;
    }
    let mut ctx = Ctx {
        config,
        out_dir: cli.out_dir.clone(),
    };

    match &cli.command {
        Command::TrainDense { corpus, steps } => {
            if let Some(s) = steps {
                ctx.config.train.steps = *s;
            }
            ctx.config.train.mode = Mode::Dense;
            ctx.config.validate()?;
            let corpus_path = ctx.corpus_path(corpus)?;
            ctx.prepare_outputs()?;
            let corpus = ctx.corpus(&corpus_path)?;
            let mut model = Model::init(ctx.config.model, ctx.config.train.seed)?;
            train_with_log(&mut model, &corpus, &ctx, &ctx.checkpoint_out())?;
        }
        Command::Convert {
            checkpoint,
            experts,
            tau,
        } => {
            if let Some(n) = experts {
                ctx.config.experts = *n;
            }
            if let Some(t) = tau {
                ctx.config.train.tau = *t;
            }
            ctx.config.validate()?;
            let input = ctx.checkpoint_path(checkpoint)?;
            ctx.prepare_outputs()?;
            let dense = load_checkpoint(&input)?;
            let sparse = convert_model(
                &dense,
                ctx.config.experts,
                ctx.config.train.tau,
                ctx.config.train.seed,
                ctx.config.gate_std,
            )?;
            save_checkpoint(&sparse, &ctx.checkpoint_out())?;
        }
        Command::TrainDsmoe {
            checkpoint,
            corpus,
            mode,
            steps,
            lambda,
        } => {
            if let Some(m) = mode {
                ctx.config.train.mode = parse_mode(m)?;
            }
            if let Some(s) = steps {
                ctx.config.train.steps = *s;
            }
            if let Some(l) = lambda {
                ctx.config.train.sparsity_weight = *l;
            }
            if !ctx.config.train.mode.is_sparse() {
                return Err(Error::Config("train-dsmoe needs a dsmoe_* mode".into()));
            }
            ctx.config.validate()?;
            let input = ctx.checkpoint_path(checkpoint)?;
            let corpus_path = ctx.corpus_path(corpus)?;
            ctx.prepare_outputs()?;
            let corpus = ctx.corpus(&corpus_path)?;
            let mut model = load_checkpoint(&input)?;
            model.set_tau(ctx.config.train.tau);
            train_with_log(&mut model, &corpus, &ctx, &ctx.checkpoint_out())?;
        }
        Command::Eval {
            checkpoint,
            corpus,
            tau,
        } => {
            let input = ctx.checkpoint_path(checkpoint)?;
            let corpus_path = ctx.corpus_path(corpus)?;
            ctx.prepare_outputs()?;
            let corpus = ctx.corpus(&corpus_path)?;
            let model = load_checkpoint(&input)?;
            let e = evaluate(&model, &corpus.validation, ctx.window(&model), *tau)?;
            let dir = ctx.report_dir();
            write_json(&dir.join("eval.json"), &e)?;
            if let Some(s) = &e.stats {
                export_heatmap(s, &dir.join("heatmap.csv"))?;
            }
            println!("ppl {:.6}", e.ppl);
        }
        Command::SweepTau {
            checkpoint,
            corpus,
            taus,
        } => {
            let input = ctx.checkpoint_path(checkpoint)?;
            let corpus_path = ctx.corpus_path(corpus)?;
            ctx.prepare_outputs()?;
            let corpus = ctx.corpus(&corpus_path)?;
            let model = load_checkpoint(&input)?;
            let taus = taus.clone().unwrap_or_else(|| ctx.config.taus.clone());
            let sweep = tau_sweep(&model, &corpus.validation, ctx.window(&model), &taus)?;
            let path = ctx.report_dir().join("sweep.csv");
            fs::write(&path, sweep.to_csv()).map_err(|e| Error::io(&path, e))?;
        }
        Command::Ablate {
            checkpoint,
            corpus,
            steps,
        } => {
            if let Some(s) = steps {
                ctx.config.train.steps = *s;
            }
            ctx.config.validate()?;
            let input = ctx.checkpoint_path(checkpoint)?;
            let corpus_path = ctx.corpus_path(corpus)?;
            ctx.prepare_outputs()?;
            let corpus = ctx.corpus(&corpus_path)?;
            let model = load_checkpoint(&input)?;
            let report = run_ablation_suite(
                &model,
                &corpus.train,
                &corpus.validation,
                &ctx.config.train,
                ctx.window(&model),
            )?;
            write_json(&ctx.report_dir().join("ablation.json"), &report)?;
        }
        Command::Heatmap {
            checkpoint,
            corpus,
            tau,
        } => {
            let input = ctx.checkpoint_path(checkpoint)?;
            let corpus_path = ctx.corpus_path(corpus)?;
            ctx.prepare_outputs()?;
            let corpus = ctx.corpus(&corpus_path)?;
            let model = load_checkpoint(&input)?;
            let e = evaluate(&model, &corpus.validation, ctx.window(&model), *tau)?;
            let stats = e
                .stats
                .ok_or_else(|| Error::Mode("heatmap needs a DSMoE checkpoint".into()))?;
            export_heatmap(&stats, &ctx.report_dir().join("heatmap.csv"))?;
        }
    }
    Ok(())
}

fn parse_mode(s: &str) -> Result<Mode> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown mode `{s}`")))
}

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lrdnet::audit::{benchmark, count_params, FootprintReport, Precision};
use lrdnet::checkpoint::{load_checkpoint, save_checkpoint};
use lrdnet::dataset::{load_folder, save_folder, MANIFEST};
use lrdnet::gradcheck::model_grad_check;
use lrdnet::synth::{generate, SyntheticDatasetSpec};
use lrdnet::train::{evaluate, train, TrainState};
use lrdnet::{Label, LrdNet, Mode, ModelConfig};
use serde_json::json;

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "lrdnet", version, about = "Frequency-guided face forgery detector")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic image folder.
    Synth {
        /// Dataset description (key = value or JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Model config (key = value or JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Label file; defaults to the folder's manifest.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Optional held-out folder scored after each epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        /// JSON-lines training log; records go to stderr when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on a labeled folder.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Parameter counts and memory footprints.
    Audit {
        #[arg(long)]
        json: bool,
        #[arg(long, value_enum, default_value_t = ModeArg::Full)]
        mode: ModeArg,
    },
    /// Time eval-mode inference.
    Bench {
        /// Checkpoint to time; a fresh full model when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Finite-difference check of the full training objective.
    Gradcheck {
        #[arg(long, value_enum)]
        mode: GradMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 1)]
        per_param: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Micro,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => Mode::Full,
            ModeArg::Micro => Mode::Micro,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GradMode {
    Micro,
}

fn load_data(dir: &Path, labels: Option<&Path>, size: usize) -> Result<Vec<lrdnet::LabeledImage>> {
    let labels = labels.map_or_else(|| dir.join(MANIFEST), Path::to_path_buf);
    load_folder(dir, &labels, size).with_context(|| format!("loading {}", dir.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Returns false when the command ran but its check did not pass.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth { spec, out } => {
            let spec = SyntheticDatasetSpec::parse(&read_text(&spec)?).context("dataset spec")?;
            let data = generate(&spec)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            save_folder(&out, &data)?;
            let reals = data.iter().filter(|d| d.label == Label::Real).count();
            print_json(&json!({
                "out": out,
                "manifest": out.join(MANIFEST),
                "real": reals,
                "fake": data.len() - reals,
            }))?;
        }
        Command::Train { config, data, labels, out, val, log } => {
            let cfg = ModelConfig::parse(&read_text(&config)?).context("model config")?;
            let train_set = load_data(&data, labels.as_deref(), cfg.input_size)?;
            let val_set = match &val {
                Some(v) => load_data(v, None, cfg.input_size)?,
                None => Vec::new(),
            };
            let mut sink: Box<dyn Write> = match &log {
                Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
                None => Box::new(std::io::stderr()),
            };
            let mut state = TrainState::new(LrdNet::new(&cfg)?);
            let mut last = None;
            let mut write_err = None;
            train(&mut state, &train_set, &val_set, cfg.epochs, |r| {
                if let Err(e) = serde_json::to_writer(&mut sink, r).map_err(anyhow::Error::from).and_then(|_| Ok(writeln!(sink)?)) {
                    write_err.get_or_insert(e);
                }
                last = Some(r.clone());
            })?;
            if let Some(e) = write_err {
                return Err(e.context("writing training log"));
            }
            sink.flush()?;
            save_checkpoint(&out, &state).with_context(|| format!("writing {}", out.display()))?;
            print_json(&json!({ "checkpoint": out, "steps": state.step, "last": last }))?;
        }
        Command::Eval { ckpt, data, labels, threshold } => {
            let state = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let data = load_data(&data, labels.as_deref(), state.model.cfg.input_size)?;
            print_json(&serde_json::to_value(evaluate(&state.model, &data, threshold)?)?)?;
        }
        Command::Audit { json, mode } => {
            let model = LrdNet::<f32>::new(&ModelConfig::defaults_for(mode.into()))?;
            let report = count_params(&model);
            let fp = FootprintReport::new(report.total);
            if json {
                print_json(&json!({ "params": report, "footprint": fp }))?;
            } else {
                println!("{report}");
                for p in [Precision::Fp32, Precision::Fp16, Precision::Int8] {
                    println!("{:<8} {:>10} bytes  {:.1} MB", format!("{p:?}").to_lowercase(), p.bytes_per_param() * report.total, fp.megabytes(p));
                }
            }
        }
        Command::Bench { ckpt, n, batch, warmup, threads } => {
            let model = match ckpt {
                Some(p) => load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))?.model,
                None => LrdNet::new(&ModelConfig::full())?,
            };
            print_json(&serde_json::to_value(benchmark(&model, n, batch, warmup, threads)?)?)?;
        }
        Command::Gradcheck { mode: GradMode::Micro, seed, per_param } => {
            let mut cfg = ModelConfig::micro();
            cfg.seed = seed;
            let r = model_grad_check(&cfg, 2, per_param, 1e-8)?;
            let pass = r.max_rel_error <= GRAD_TOLERANCE;
            print_json(&json!({
                "mode": "micro",
                "seed": seed,
                "checked": r.checked,
                "max_rel_error": r.max_rel_error,
                "tolerance": GRAD_TOLERANCE,
                "pass": pass,
                "worst": r.worst.map(|w| format!("{w:?}")),
            }))?;
            return Ok(pass);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

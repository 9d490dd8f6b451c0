//! `capnet` — corpus generation, training, evaluation and single-image
//! inference for the character-anchor pooling recognizer.
//!
//! Exit codes: 0 success, 1 runtime/I-O or config errors, 2 usage errors,
//! 3 numerical divergence during training.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use capnet_core::error::{Error, Result};
use capnet_core::model::{image_tensor, CapnetModel};
use capnet_core::synthdata::{
    self, generate_corpus, lint_corpus, load_corpus, quantize, read_pgm, CorpusPreset,
};
use capnet_core::training::{load_train_checkpoint, train, Adadelta};
use config::load_config;

#[derive(Parser)]
#[command(name = "capnet", version, about = "Scene-text recognizer with character anchor pooling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Train a model on a generated corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus test split.
    Eval(EvalArgs),
    /// Recognize a single PGM image.
    Infer(InferArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Mixed,
    StraightTrainCurvedTest,
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for images and manifests.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Root seed for all corpus randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path config overrides, e.g. --set corpus.noise_sigma=0.05
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory produced by `capnet gen`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint (its stored configs take precedence).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Single-worker execution; runs are bitwise reproducible.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Lexicon file, one word per line.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image (binary PGM; resized to the model input size if needed).
    #[arg(long)]
    image: PathBuf,
    /// Write the predicted anchor-line markers as CSV (index,x,y).
    #[arg(long)]
    dump_cal: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e @ Error::NonFinite { .. }) => {
            eprintln!("error: {e}");
            3
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}

fn configure_workers(deterministic: bool) {
    let threads = if deterministic {
        Some(1)
    } else {
        std::env::var("CAPNET_THREADS").ok().and_then(|v| v.parse::<usize>().ok())
    };
    if let Some(n) = threads {
        // Ignore the error if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Infer(args) => cmd_infer(args),
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    configure_workers(false);
    let mut cfg = load_config(args.config.as_deref(), &args.set)?;
    if let Some(p) = args.preset {
        cfg.corpus.preset = match p {
            PresetArg::Mixed => CorpusPreset::Mixed,
            PresetArg::StraightTrainCurvedTest => CorpusPreset::StraightTrainCurvedTest,
        };
    }
    if let Some(n) = args.n_train {
        cfg.corpus.n_train = n;
    }
    if let Some(n) = args.n_test {
        cfg.corpus.n_test = n;
    }
    if let Some(s) = args.seed {
        cfg.corpus.seed = s;
    }
    cfg.corpus.validate()?;
    let manifest = generate_corpus(&cfg.corpus, &args.out)?;
    println!("wrote {} samples", manifest.train.len() + manifest.test.len());
    println!("train manifest: {}", args.out.join("train.jsonl").display());
    println!("test manifest: {}", args.out.join("test.jsonl").display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    configure_workers(args.deterministic);
    // Everything is validated before any output is written.
    let (mut model, mut opt, train_cfg, counters) = match &args.resume {
        Some(ckpt) => {
            let state = load_train_checkpoint(ckpt)?;
            (state.model, state.optimizer, state.train_config, Some(state.counters))
        }
        None => {
            let mut cfg = load_config(args.config.as_deref(), &args.set)?;
            if let Some(s) = args.seed {
                cfg.train.seed = s;
            }
            let model = CapnetModel::init(cfg.model.clone(), cfg.train.seed)?;
            (model, Adadelta::new(), cfg.train, None)
        }
    };
    let corpus = load_corpus(&args.corpus)?;
    lint_corpus(&corpus, 8.0)?;
    if corpus.image_size != model.config.backbone.input_size {
        return Err(Error::Config(format!(
            "corpus images are {:?} but the model expects {:?}",
            corpus.image_size, model.config.backbone.input_size
        )));
    }

    let outcome = train(
        &mut model,
        &mut opt,
        &corpus.train,
        &train_cfg,
        &args.out,
        counters,
        args.deterministic,
    )?;
    if let Some(s) = outcome.switch_step {
        println!("stage switch at step {s}");
    }
    println!("trained {} steps", outcome.steps);
    println!("metrics: {}", outcome.metrics_path.display());
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    configure_workers(false);
    let state = load_train_checkpoint(&args.ckpt)?;
    let corpus = load_corpus(&args.corpus)?;
    lint_corpus(&corpus, 8.0)?;
    let lexicon = match &args.lexicon {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let words: Vec<String> =
                text.lines().map(|l| l.trim().to_lowercase()).filter(|l| !l.is_empty()).collect();
            if words.is_empty() {
                return Err(Error::Data(format!("lexicon {} is empty", path.display())));
            }
            Some(words)
        }
        None => None,
    };
    let report = capnet_core::evaluation::run_eval(&state.model, &corpus.test, lexicon.as_deref())?;
    capnet_core::evaluation::emit_report(&report, &args.out)?;
    println!("word_accuracy={:.6}", report.word_accuracy);
    for (size, acc) in &report.lexicon_accuracies {
        println!("lexicon_accuracy[{size}]={acc:.6}");
    }
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    configure_workers(false);
    let state = load_train_checkpoint(&args.ckpt)?;
    let model = state.model;
    let (w, h, pixels) = read_pgm(&args.image)?;
    let (th, tw) = model.config.backbone.input_size;
    let resized: Vec<u8> = if (h, w) == (th, tw) {
        pixels
    } else {
        let float: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
        quantize(&synthdata::resize_gray(&float, (h, w), (th, tw)))
    };
    let image = image_tensor(&resized, th, tw)?;
    let rec = model.recognize(&image)?;
    println!("{}", rec.text);
    if let Some(path) = &args.dump_cal {
        write_cal_csv(path, &rec.cal.markers)?;
    }
    Ok(())
}

fn write_cal_csv(path: &Path, markers: &[(f64, f64)]) -> Result<()> {
    let mut s = String::from("index,x,y\n");
    for (i, (x, y)) in markers.iter().enumerate() {
        s.push_str(&format!("{i},{x:.6},{y:.6}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

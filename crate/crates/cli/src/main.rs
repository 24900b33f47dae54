use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use emosem::dataset::{build_vocabulary, load_samples, synthesize, Manifest, Split, SynthConfig};
use emosem::eval::{evaluate, infer, score_predictions, write_predictions};
use emosem::metrics::KeywordClassifier;
use emosem::model::{training_units, EmoSem};
use emosem::train::{train_to_dir, MODEL_FILE, RECORD_FILE};
use emosem::{selftest, Emotion, Error, Image, Paradigm, Preset, Result, RunConfig};

const AFTER_HELP: &str = "\
Presets: `paper` mirrors the published architecture (1024px input, 64x64 grid,
d_k=256, d_w=768, 6 decoder blocks) and freezes the encoder and mixer by
default. `toy` is a small from-scratch model for the synthetic corpus; it
trains every parameter group, so its freeze flags default to off.

Exit codes: 0 success, 2 validation error, 3 numerical abort, 1 otherwise.";

#[derive(Debug, Parser)]
#[command(name = "emosem", version, about = "Emotion-conditioned segmentation and explanation", after_help = AFTER_HELP)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Key-value config file (`key = value` per line) applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// paper | toy. Defaults to toy, or to the checkpoint's preset.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// single | multi. Defaults to single, or to the checkpoint's mode.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset directory (holding manifest.jsonl) or manifest file.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus into --data-root.
    Synth {
        /// Training images per emotion.
        #[arg(long, default_value_t = 4)]
        per_emotion: usize,
        #[arg(long, default_value_t = 0)]
        val_per_emotion: usize,
        #[arg(long, default_value_t = 0)]
        test_per_emotion: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Train on the train split of --data-root, writing checkpoints to --out.
    Train {
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint (or an existing predictions file) on a split.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Score this predictions JSONL instead of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Ablation: replace the language prefix with zeros.
        #[arg(long)]
        zero_prefix: bool,
    },
    /// Segment and explain one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Emotion name, or `all`. Defaults to all.
        #[arg(long, default_value = "all")]
        emotion: String,
    },
    /// Run the reference-implementation and gradient checks.
    Selftest,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if std::env::var_os("RAYON_NUM_THREADS").is_none() {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 3,
        e if e.is_validation() => 2,
        _ => 1,
    }
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Usage(format!("{flag} is required for this command")))
}

fn parse_flag<T: std::str::FromStr<Err = Error>>(v: &Option<String>) -> Result<Option<T>> {
    v.as_deref().map(str::parse).transpose()
}

/// Preset, then config file, then --seed.
fn run_config(g: &Global) -> Result<RunConfig> {
    let preset = parse_flag::<Preset>(&g.preset)?.unwrap_or(Preset::Toy);
    let mode = parse_flag::<Paradigm>(&g.mode)?.unwrap_or(Paradigm::Single);
    let mut run = RunConfig::preset(preset, mode);
    if let Some(path) = &g.config {
        run.apply_file(path)?;
    }
    if let Some(seed) = g.seed {
        run.train.seed = seed;
    }
    run.validate()?;
    Ok(run)
}

/// Load a checkpoint, refusing an explicit --preset/--mode it was not built for.
fn load_checkpoint(g: &Global, path: &Path) -> Result<EmoSem> {
    let model = EmoSem::load(path, DType::F32)?;
    let mut expected = model.config.clone();
    if let Some(p) = parse_flag::<Preset>(&g.preset)? {
        expected.preset = p;
    }
    if let Some(m) = parse_flag::<Paradigm>(&g.mode)? {
        expected.paradigm = m;
    }
    if expected != model.config {
        return EmoSem::load_matching(path, &expected, DType::F32);
    }
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth {
            per_emotion,
            val_per_emotion,
            test_per_emotion,
            image_size,
        } => {
            let root = require(&g.data_root, "--data-root")?;
            let cfg = SynthConfig {
                image_size: *image_size,
                per_emotion: *per_emotion,
                val_per_emotion: *val_per_emotion,
                test_per_emotion: *test_per_emotion,
                ..SynthConfig::toy()
            };
            let manifest = synthesize(&cfg, g.seed.unwrap_or(0), root)?;
            log::info!("wrote {} records to {}", manifest.records.len(), root.display());
            Ok(())
        }
        Command::Train { resume } => {
            let run = run_config(g)?;
            let data = require(&g.data_root, "--data-root")?;
            let out = require(&g.out, "--out")?;
            let manifest = Manifest::read(data)?;
            manifest.validate()?;
            let train = Manifest {
                root: manifest.root.clone(),
                records: manifest.records.iter().filter(|r| r.split == Split::Train).cloned().collect(),
            };
            if train.records.is_empty() {
                return Err(Error::Config(format!("{} has no train records", data.display())));
            }
            let vocab = build_vocabulary(&[&train]);
            let samples = load_samples(&train, &vocab, run.model.max_len)?;
            let units = training_units(&samples, run.model.paradigm, run.model.saliency_side())?;
            log::info!(
                "{} samples, {} training units, vocabulary {}, {}/{}",
                samples.len(),
                units.len(),
                vocab.len(),
                run.model.preset,
                run.model.paradigm
            );
            let model = EmoSem::new(run.model.clone(), vocab, run.train.seed, DType::F32)?;
            let mut record = train_to_dir(&run, model, &units, out, *resume)?;
            let model = EmoSem::load(&out.join(MODEL_FILE), DType::F32)?;
            let (report, _) = evaluate(&model, &samples, run.train.eval_seed, false, &KeywordClassifier::default())?;
            println!("{}", report.to_table());
            record.final_eval = Some(report);
            write_json(&out.join(RECORD_FILE), &record)
        }
        Command::Eval {
            checkpoint,
            predictions,
            split,
            zero_prefix,
        } => {
            let data = require(&g.data_root, "--data-root")?;
            let split: Split = split.parse()?;
            let manifest = Manifest::read(data)?;
            let gold = Manifest {
                root: manifest.root.clone(),
                records: manifest.records.iter().filter(|r| r.split == split).cloned().collect(),
            };
            if gold.records.is_empty() {
                return Err(Error::Config(format!("{} has no {split} records", data.display())));
            }
            let classifier = KeywordClassifier::default();
            let report = match (predictions, checkpoint) {
                (Some(p), _) => score_predictions(p, &gold, &classifier)?,
                (None, Some(ckpt)) => {
                    let model = load_checkpoint(g, ckpt)?;
                    let samples = load_samples(&gold, &model.vocab, model.config.max_len)?;
                    let seed = g.seed.unwrap_or(run_config(g)?.train.eval_seed);
                    let (report, scored) = evaluate(&model, &samples, seed, *zero_prefix, &classifier)?;
                    if let Some(out) = &g.out {
                        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                        write_predictions(out, &scored)?;
                    }
                    report
                }
                (None, None) => return Err(Error::Usage("eval needs --checkpoint or --predictions".into())),
            };
            println!("{}", report.to_table());
            if let Some(out) = &g.out {
                fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                write_json(&out.join("eval_report.json"), &report)?;
            }
            Ok(())
        }
        Command::Infer {
            checkpoint,
            image,
            emotion,
        } => {
            let out = require(&g.out, "--out")?;
            let model = load_checkpoint(g, checkpoint)?;
            let emotion = match emotion.as_str() {
                "all" => None,
                name => Some(
                    Emotion::from_name(name).ok_or_else(|| Error::Usage(format!("unknown emotion {name:?}")))?,
                ),
            };
            let img = Image::read_png(image)?;
            let written = infer(&model, &img, emotion, g.seed.unwrap_or(0), out)?;
            for p in &written {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Selftest => {
            let checks = selftest::run_all(g.seed.unwrap_or(0))?;
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{:<34} {:>6} trials  worst {:.2e}  tol {:.0e}  {}",
                    c.name,
                    c.trials,
                    c.worst,
                    c.tolerance,
                    if c.passed() { "ok" } else { "FAILED" }
                );
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                return Err(Error::Numerical(format!("{failed} self-check(s) failed")));
            }
            Ok(())
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

//! The `uap` command line: `gen`, `attack`, `eval` and `gradcheck`.
//!
//! Exit codes: 0 success, 2 invalid arguments or config, 3 I/O or unreadable
//! files, 4 degenerate dataset, 5 hash mismatch. `gradcheck` exits 1 when the
//! error bound is not met.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attack::{run_attack, AttackConfig, Constraint, Norm, Perturbation, Strategy, DEFAULT_PATCH_FRACTION};
use crate::datagen::{generate, generate_unchecked, CleanFloor, Dataset, DatasetParams};
use crate::encoder::{gradcheck_random, Encoder, EncoderConfig, EncoderKind};
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate, Report, TraceSummary};
use crate::tensor::Mask;

pub const REPORT_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "trace.json";

#[derive(Debug, Parser)]
#[command(name = "uap", version, about = "Universal adversarial perturbations against image-text retrieval")]
pub struct Cli {
    /// Worker threads for evaluation (falls back to UAP_THREADS, then all CPUs).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (and a default encoder unless one is given).
    Gen(GenArgs),
    /// Synthesize a universal perturbation.
    Attack(AttackArgs),
    /// Compare clean and adversarial retrieval for a saved perturbation.
    Eval(EvalArgs),
    /// Compare analytic input gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n_images: usize,
    #[arg(long, default_value_t = 5)]
    pub texts_per_image: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Existing encoder manifest; when absent a fresh one is written to OUT/encoder.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = KindArg::Mlp)]
    pub encoder_kind: KindArg,
    #[arg(long, default_value_t = 42)]
    pub encoder_seed: u64,
    /// Depth of the clean-retrieval floor check.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Skip the clean-retrieval floor check.
    #[arg(long)]
    pub no_floor_check: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Tra,
    Ira,
    Tira,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Patch,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    L2,
    Linf,
}

#[derive(Debug, Clone, Args)]
pub struct AttackArgs {
    #[arg(long, value_enum, default_value_t = StrategyArg::Tira)]
    pub strategy: StrategyArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Patch)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 0.02)]
    pub eta: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub max_inner_iters: usize,
    /// Patch side in pixels (default: 3% of the image area).
    #[arg(long)]
    pub mask_side: Option<usize>,
    /// Patch offset from the bottom-right corner, as ROWS,COLS.
    #[arg(long)]
    pub mask_inset: Option<String>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    /// Budget in [0, 1] pixel units (default 2000/255 for l2, 10/255 for linf).
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Visit samples in a seeded random order.
    #[arg(long)]
    pub shuffle: bool,
    #[arg(long, default_value_t = 64)]
    pub probe_images: usize,
    /// Encoder manifest (default: DATASET_DIR/encoder).
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub perturbation: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Encoder manifest (default: DATASET_DIR/encoder).
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub k_list: Vec<usize>,
    /// Evaluate even if the perturbation was built for another encoder or dataset.
    #[arg(long)]
    pub allow_mismatch: bool,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Encoder manifest; when absent a default encoder of --kind is used.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = KindArg::Mlp)]
    pub kind: KindArg,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 50)]
    pub probes: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// Error bound `gradcheck` must meet.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub manifest: PathBuf,
    pub dataset_hash: String,
    pub encoder_manifest: PathBuf,
    pub encoder_hash: String,
    pub clean_floor: CleanFloor,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSummary {
    pub kind: EncoderKind,
    pub encoder_hash: String,
    pub trials: usize,
    pub probes: usize,
    pub step: f64,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn default_encoder_path(dataset: &Path) -> PathBuf {
    let dir = if dataset.is_dir() { dataset } else { dataset.parent().unwrap_or(Path::new(".")) };
    dir.join("encoder")
}

pub fn cmd_gen(args: &GenArgs) -> Result<GenSummary> {
    let params = DatasetParams {
        n_images: args.n_images,
        texts_per_image: args.texts_per_image,
        image_shape: [args.channels, args.height, args.width],
        embed_dim: args.embed_dim,
        class_count: args.classes,
        noise_level: args.noise,
        seed: args.seed,
    };
    let (encoder, encoder_manifest) = match &args.encoder {
        Some(path) => (Encoder::load(path)?, path.clone()),
        None => {
            let config = match args.encoder_kind {
                KindArg::Mlp => EncoderConfig {
                    input_shape: params.image_shape,
                    embed_dim: params.embed_dim,
                    seed: args.encoder_seed,
                    ..EncoderConfig::toy_mlp()
                },
                KindArg::Linear => EncoderConfig::linear(params.image_shape, params.embed_dim, args.encoder_seed),
            };
            let encoder = Encoder::random(config)?;
            let path = encoder.save(&args.out.join("encoder"))?;
            (encoder, path)
        }
    };
    let dataset = if args.no_floor_check {
        generate_unchecked(&params, &encoder)?
    } else {
        generate(&params, &encoder, args.k)?
    };
    let manifest = dataset.save(&args.out)?;
    Ok(GenSummary {
        manifest,
        dataset_hash: dataset.content_hash()?,
        encoder_manifest,
        encoder_hash: encoder.content_hash(),
        clean_floor: dataset.clean_floor(&encoder, args.k)?,
    })
}

fn parse_inset(text: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [r, c] => match (r.parse(), c.parse()) {
            (Ok(r), Ok(c)) => Ok((r, c)),
            _ => invalid(format!("mask inset must be ROWS,COLS, got {text:?}")),
        },
        _ => invalid(format!("mask inset must be ROWS,COLS, got {text:?}")),
    }
}

/// Builds the attack config, rejecting flags that belong to the other mode.
pub fn attack_config(args: &AttackArgs, image_shape: [usize; 3]) -> Result<AttackConfig> {
    let constraint = match args.mode {
        ModeArg::Patch => {
            if args.norm.is_some() || args.epsilon.is_some() {
                return invalid("--norm and --epsilon apply to global mode only");
            }
            let side = args
                .mask_side
                .unwrap_or_else(|| Mask::side_for_area(image_shape[1], image_shape[2], DEFAULT_PATCH_FRACTION));
            let inset = args.mask_inset.as_deref().map(parse_inset).transpose()?.unwrap_or((0, 0));
            Constraint::Patch { mask: Mask::bottom_right_square(&image_shape, side, inset)? }
        }
        ModeArg::Global => {
            if args.mask_side.is_some() || args.mask_inset.is_some() {
                return invalid("--mask-side and --mask-inset apply to patch mode only");
            }
            if args.strategy == StrategyArg::Tira {
                return invalid("global mode runs the tra or ira strategy");
            }
            let norm = match args.norm.unwrap_or(NormArg::L2) {
                NormArg::L2 => Norm::L2,
                NormArg::Linf => Norm::Linf,
            };
            match (Constraint::default_global(norm), args.epsilon) {
                (c, None) => c,
                (_, Some(epsilon)) => Constraint::Global { norm, epsilon },
            }
        }
    };
    Ok(AttackConfig {
        k: args.k,
        eta: args.eta,
        epochs: args.epochs,
        max_inner_iters: args.max_inner_iters,
        batch_size: args.batch_size,
        constraint,
        seed: args.seed,
        shuffle: args.shuffle,
        probe_images: args.probe_images,
    })
}

fn strategy(arg: StrategyArg) -> Strategy {
    match arg {
        StrategyArg::Tra => Strategy::Tra,
        StrategyArg::Ira => Strategy::Ira,
        StrategyArg::Tira => Strategy::Tira,
    }
}

fn write_report(report: &Report, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, report.to_json())?;
    Ok(())
}

/// Runs an attack and writes `perturbation.json`, `delta.uapt`, `mask.uapt`
/// (patch mode), `trace.json` and `report.json` into `--out`.
pub fn cmd_attack(args: &AttackArgs) -> Result<Report> {
    let started = Instant::now();
    let encoder = Encoder::load(&args.encoder.clone().unwrap_or_else(|| default_encoder_path(&args.dataset)))?;
    let dataset = Dataset::load(&args.dataset)?;
    let cfg = attack_config(args, dataset.params.image_shape)?;
    if encoder.input_shape() != dataset.params.image_shape {
        return invalid("encoder input shape does not match the dataset");
    }
    dataset.check_clean_floor(&encoder, args.k)?;
    let strategy = strategy(args.strategy);

    let (perturbation, trace) = run_attack(&encoder, &dataset, &cfg, strategy)?;
    perturbation.save(&args.out)?;
    fs::write(args.out.join(TRACE_FILE), serde_json::to_vec_pretty(&trace)?)?;

    let mut report = Report::new("attack", encoder.content_hash(), dataset.content_hash()?);
    report.perturbation_hash = Some(perturbation.delta_hash());
    report.config = Some(cfg.echo(strategy));
    report.metrics = evaluate(&encoder, &dataset, &perturbation, &[1, 5, 10], &[1, 5])?;
    report.trace = Some(TraceSummary::from_trace(&trace));
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    write_report(&report, &args.out.join(REPORT_FILE))?;
    Ok(report)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Report> {
    let started = Instant::now();
    let encoder = Encoder::load(&args.encoder.clone().unwrap_or_else(|| default_encoder_path(&args.dataset)))?;
    let dataset = Dataset::load(&args.dataset)?;
    let perturbation = Perturbation::load(&args.perturbation)?;
    let encoder_hash = encoder.content_hash();
    let dataset_hash = dataset.content_hash()?;
    let provenance = &perturbation.provenance;
    let mismatch = provenance.encoder_hash != encoder_hash || provenance.dataset_hash != dataset_hash;
    if mismatch && !args.allow_mismatch {
        return Err(Error::Integrity(
            "perturbation was built for a different encoder or dataset (pass --allow-mismatch to evaluate anyway)"
                .into(),
        ));
    }
    let mut report = Report::new("eval", encoder_hash, dataset_hash);
    report.perturbation_hash = Some(perturbation.delta_hash());
    report.config = Some(provenance.config.clone());
    report.cross_dataset = mismatch;
    report.metrics = evaluate(&encoder, &dataset, &perturbation, &args.k_list, &[1, 5])?;
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    if let Some(path) = &args.out {
        write_report(&report, path)?;
    }
    Ok(report)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradcheckSummary> {
    let encoder = match &args.encoder {
        Some(path) => Encoder::load(path)?,
        None => Encoder::random(match args.kind {
            KindArg::Mlp => EncoderConfig::toy_mlp(),
            KindArg::Linear => EncoderConfig::linear([3, 32, 32], 64, 42),
        })?,
    };
    if args.trials == 0 || args.probes == 0 {
        return invalid("--trials and --probes must be positive");
    }
    let max_relative_error = gradcheck_random(&encoder, args.trials, args.probes, args.step, args.seed)?;
    Ok(GradcheckSummary {
        kind: encoder.config().kind,
        encoder_hash: encoder.content_hash(),
        trials: args.trials,
        probes: args.probes,
        step: args.step,
        max_relative_error,
        tolerance: GRADCHECK_TOLERANCE,
        passed: max_relative_error < GRADCHECK_TOLERANCE,
    })
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("UAP_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) => Ok(Some(n)),
            Err(_) => invalid(format!("UAP_THREADS must be a positive integer, got {v:?}")),
        },
        Err(_) => Ok(None),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<i32> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return invalid("thread count must be positive");
        }
        // A pool may already exist when called in-process more than once.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Gen(args) => print_json(&cmd_gen(args)?)?,
        Command::Attack(args) => println!("{}", cmd_attack(args)?.to_json()),
        Command::Eval(args) => println!("{}", cmd_eval(args)?.to_json()),
        Command::Gradcheck(args) => {
            let summary = cmd_gradcheck(args)?;
            print_json(&summary)?;
            if !summary.passed {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! The `repkit` command line: corpus synthesis, training, registration,
//! counting (batch and streaming), and leave-one-out evaluation.
//!
//! Every command exits 0 on success and nonzero with a one-line diagnostic
//! on any error. `--seed` pins all randomness end to end; `--config` points
//! at an optional TOML file whose values individual flags override. The
//! `REPKIT_LOG` environment variable controls log verbosity.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_corpus, save_corpus};
use crate::error::{Error, Result};
use crate::eval::{loo_harness, write_reports, LooConfig};
use crate::fewshot::{
    classify_windows, count_set, load_support, register, save_support, transition_count_min_run,
    SessionState, REGISTRATION_REPS,
};
use crate::net::{load_params, save_params, ModelConfig, ModelParams};
use crate::rng::mix;
use crate::signal::{
    labeled_windows, load_stream, slide, ExerciseMeta, SignalStream, CHANNELS,
    DEFAULT_OVERLAP_RATIO,
};
use crate::synthgen::{generate_corpus, GenConfig};
use crate::train::{
    subsample_balanced, train_phase1, train_phase2, EpochStats, Phase1Config, Phase2Config,
    Phase3Config,
};

/// Optional TOML run configuration; flags override file values and unknown
/// keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: Option<ModelConfig>,
    pub phase1: Option<Phase1Config>,
    pub phase2: Option<Phase2Config>,
    pub phase3: Option<Phase3Config>,
    pub data: Option<DataConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Class-balanced cap on training windows.
    pub train_window_cap: Option<usize>,
    pub overlap_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_window_cap: None,
            overlap_ratio: DEFAULT_OVERLAP_RATIO,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("bad config: {e}")))
    }
}

/// Effective settings after merging config file and flags.
struct Resolved {
    seed: u64,
    model: ModelConfig,
    phase1: Phase1Config,
    phase2: Phase2Config,
    phase3: Phase3Config,
    data: DataConfig,
}

fn resolve(config: Option<&PathBuf>, seed_flag: Option<u64>) -> Result<Resolved> {
    let file = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = seed_flag.or(file.seed).unwrap_or(0);
    // The master seed governs: per-phase seeds derive from it.
    let mut phase1 = file.phase1.unwrap_or_default();
    phase1.seed = mix(&[seed, 0x11]);
    let mut phase2 = file.phase2.unwrap_or_default();
    phase2.seed = mix(&[seed, 0x12]);
    let mut phase3 = file.phase3.unwrap_or_default();
    phase3.seed = mix(&[seed, 0x13]);
    Ok(Resolved {
        seed,
        model: file.model.unwrap_or_default(),
        phase1,
        phase2,
        phase3,
        data: file.data.unwrap_or_default(),
    })
}

#[derive(Parser)]
#[command(
    name = "repkit",
    version,
    about = "Few-shot exercise repetition counting from 9-channel inertial streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated corpus with a manifest.
    Synth(SynthArgs),
    /// Train phases 1 and 2 on a corpus, optionally holding one exercise out.
    Train(TrainArgs),
    /// Register a 5-repetition recording: fine-tune and build a support set.
    Register(RegisterArgs),
    /// Count repetitions of a recorded set, or of samples streamed on stdin.
    Count(CountArgs),
    /// Leave-one-exercise-out evaluation with report files.
    EvalLoo(EvalLooArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for streams plus manifest.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    exercises: usize,
    #[arg(long, default_value_t = 5)]
    subjects: usize,
    #[arg(long, default_value_t = 4)]
    sets: usize,
    /// Repetitions per set.
    #[arg(long, default_value_t = 15)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-repetition tempo jitter amplitude.
    #[arg(long, default_value_t = 0.1)]
    jitter: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus manifest path.
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Exercise id to exclude from training.
    #[arg(long)]
    holdout: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    /// Registration recording (stream file with 5 annotated repetitions;
    /// longer recordings are clipped to the first five).
    #[arg(long = "stream-file")]
    stream_file: PathBuf,
    /// Base checkpoint from `repkit train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for adapted.rkw and support.csv.
    #[arg(long)]
    out: PathBuf,
    /// Mean repetition duration in seconds; derived from the annotations
    /// when omitted.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    /// Stream file to count (batch mode). Omit with --stream.
    file: Option<PathBuf>,
    /// Adapted checkpoint from `repkit register`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Support set from `repkit register`.
    #[arg(long)]
    support: PathBuf,
    /// Streaming mode: read 9-value CSV samples from stdin and emit
    /// `count=<n> at_sample=<i>` events.
    #[arg(long)]
    stream: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ignore peak runs shorter than this many windows (batch mode only).
    #[arg(long, default_value_t = 1)]
    min_run: usize,
}

#[derive(Args)]
struct EvalLooArgs {
    /// Corpus manifest path.
    #[arg(long)]
    corpus: PathBuf,
    /// Report output directory.
    #[arg(long)]
    out: PathBuf,
    /// Cache directory for per-holdout phase-1/2 checkpoints.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Entry point: returns the process exit code.
pub fn run() -> i32 {
    let _ = env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("REPKIT_LOG", "warn"),
    )
    .try_init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Register(args) => cmd_register(args),
        Command::Count(args) => cmd_count(args),
        Command::EvalLoo(args) => cmd_eval_loo(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = GenConfig {
        seed: args.seed,
        reps_per_set: args.reps,
        sets: args.sets,
        tempo_jitter: args.jitter,
        ..GenConfig::default()
    };
    let corpus = generate_corpus(args.exercises, args.subjects, &cfg)?;
    let manifest = save_corpus(&corpus, &args.out)?;
    println!(
        "wrote {} streams ({} exercises x {} subjects x {} sets) to {}",
        corpus.entries.len(),
        args.exercises,
        args.subjects,
        args.sets,
        manifest.display()
    );
    Ok(())
}

fn write_epoch_log(path: &Path, stats: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,loss,accuracy\n");
    for s in stats {
        let _ = writeln!(out, "{},{:.6},{:.6}", s.epoch, s.loss, s.accuracy);
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let resolved = resolve(args.config.as_ref(), args.seed)?;
    let corpus = load_corpus(&args.corpus)?;

    let entries = match &args.holdout {
        Some(holdout) => {
            if corpus.meta(holdout).is_none() {
                return Err(Error::InvalidArgument(format!(
                    "holdout exercise '{holdout}' not present in the corpus"
                )));
            }
            corpus.entries_excluding(holdout)
        }
        None => corpus.entries.iter().collect(),
    };
    let mut trained_on: Vec<String> = entries
        .iter()
        .map(|e| e.stream.exercise_id.clone())
        .collect();
    trained_on.sort();
    trained_on.dedup();

    let mut windows =
        corpus.windows_for_entries(&entries, resolved.model.t_max, resolved.data.overlap_ratio)?;
    if let Some(cap) = resolved.data.train_window_cap {
        windows = subsample_balanced(windows, cap, mix(&[resolved.seed, 0x14]));
    }
    info!("training on {} windows", windows.len());

    let mut model = ModelParams::init(resolved.model.clone(), mix(&[resolved.seed, 0x10]))?;
    let stats1 = train_phase1(&windows, &resolved.phase1, &mut model)?;
    let stats2 = train_phase2(&windows, &resolved.phase2, &mut model)?;

    if let Some(parent) = args.checkpoint.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_params(&model, &args.checkpoint)?;
    write_epoch_log(&args.checkpoint.with_extension("phase1.csv"), &stats1)?;
    write_epoch_log(&args.checkpoint.with_extension("phase2.csv"), &stats2)?;

    println!("trained_on={}", trained_on.join(","));
    println!("checkpoint={}", args.checkpoint.display());
    Ok(())
}

/// Mean repetition duration from the annotated peak centers.
fn duration_from_annotations(stream: &SignalStream) -> Result<f64> {
    let peaks = stream.peak_intervals();
    if peaks.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 annotated repetitions to derive the duration".into(),
        ));
    }
    let center = |&(s, e): &(usize, usize)| (s + e) as f64 / 2.0;
    let first = center(&peaks[0]);
    let last = center(&peaks[peaks.len() - 1]);
    Ok((last - first) / (peaks.len() - 1) as f64 / stream.sample_rate_hz)
}

fn cmd_register(args: RegisterArgs) -> Result<()> {
    let resolved = resolve(args.config.as_ref(), args.seed)?;
    let full = load_stream(&args.stream_file)?;
    if full.rep_count() < REGISTRATION_REPS {
        return Err(Error::RegistrationInsufficient(format!(
            "registration recording has {} annotated repetitions, needs {REGISTRATION_REPS}",
            full.rep_count()
        )));
    }
    let stream = full.clip_to_first_peaks(REGISTRATION_REPS)?;

    let duration = match args.duration {
        Some(d) => d,
        None => duration_from_annotations(&stream)?,
    };
    let meta = ExerciseMeta::new(stream.exercise_id.clone(), stream.exercise_id.clone(), duration)?;
    let params = meta.window_params()?;
    let base = load_params(&args.checkpoint)?;

    let reg_windows = labeled_windows(
        &stream,
        &params,
        base.config().t_max,
        resolved.data.overlap_ratio,
    )?;
    let mut phase3 = resolved.phase3.clone();
    phase3.seed = mix(&[resolved.seed, 0x30]);
    let (adapted, _) = crate::train::fine_tune_phase3(&reg_windows, &phase3, &base)?;
    let support = register(&stream, &meta, &adapted)?;

    std::fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("adapted.rkw");
    let supp = args.out.join("support.csv");
    save_params(&adapted, &ckpt)?;
    save_support(&support, &supp)?;
    println!(
        "registered exercise={} duration_s={:.3} window={}x{} positives={} negatives={}",
        stream.exercise_id,
        duration,
        params.window_size,
        params.stride,
        support.positives.len(),
        support.negatives.len()
    );
    println!("adapted={}", ckpt.display());
    println!("support={}", supp.display());
    Ok(())
}

fn cmd_count(args: CountArgs) -> Result<()> {
    let model = load_params(&args.checkpoint)?;
    let support = load_support(&args.support)?;
    if args.stream {
        if args.min_run != 1 {
            return Err(Error::InvalidArgument(
                "--min-run is only supported in batch mode".into(),
            ));
        }
        return count_streaming(&model, &support, args.seed);
    }
    let file = args.file.ok_or_else(|| {
        Error::InvalidArgument("batch mode needs a stream file (or pass --stream)".into())
    })?;
    let stream = load_stream(&file)?;
    let params = support.window_params;

    if args.min_run == 1 {
        let result = count_set(&stream, &support, &model, &params, args.seed)?;
        match result.true_count {
            Some(t) => println!("predicted={} true={}", result.predicted_count, t),
            None => println!("predicted={}", result.predicted_count),
        }
    } else {
        let windows = slide(&stream, &params, model.config().t_max)?;
        let labels = classify_windows(&windows, &support, &model, args.seed)?;
        let predicted = transition_count_min_run(&labels, args.min_run);
        if stream.rep_count() > 0 {
            println!("predicted={predicted} true={}", stream.rep_count());
        } else {
            println!("predicted={predicted}");
        }
    }
    Ok(())
}

fn count_streaming(
    model: &ModelParams,
    support: &crate::fewshot::SupportSet,
    seed: u64,
) -> Result<()> {
    let mut session = SessionState::new(support.window_params, model.config().t_max, seed)?;
    let stdin = std::io::stdin();
    for (idx, line) in stdin.lock().lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let sample: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::parse(idx + 1, format!("bad sample value '{v}'")))
            })
            .collect::<Result<_>>()?;
        if sample.len() != CHANNELS {
            return Err(Error::parse(
                idx + 1,
                format!("expected {CHANNELS} values, found {}", sample.len()),
            ));
        }
        for event in session.stream_step(&sample, support, model)? {
            if let crate::fewshot::Event::CountIncremented { count, at_sample } = event {
                println!("count={count} at_sample={at_sample}");
            }
        }
    }
    Ok(())
}

fn cmd_eval_loo(args: EvalLooArgs) -> Result<()> {
    let resolved = resolve(args.config.as_ref(), args.seed)?;
    let corpus = load_corpus(&args.corpus)?;
    let cfg = LooConfig {
        seed: resolved.seed,
        model: resolved.model,
        phase1: resolved.phase1,
        phase2: resolved.phase2,
        phase3: resolved.phase3,
        overlap_ratio: resolved.data.overlap_ratio,
        train_window_cap: resolved.data.train_window_cap,
        cache_dir: args.cache,
    };
    let report = loo_harness(&corpus, &cfg)?;
    write_reports(&report, &args.out)?;

    for e in &report.per_exercise {
        println!(
            "exercise={} pre_f1={:.4} post_f1={:.4} e0={:.1}% sets={}",
            e.exercise_id,
            e.pre_metrics.f1,
            e.post_metrics.f1,
            e.histogram.buckets[0],
            e.histogram.total_sets
        );
    }
    println!(
        "macro_f1_pre={:.4} macro_f1_post={:.4} within_5={:.4} error_free={:.4}",
        report.macro_f1_pre(),
        report.macro_f1_post(),
        report.within_5_fraction,
        report.error_free_fraction
    );
    println!("reports={}", args.out.display());
    Ok(())
}

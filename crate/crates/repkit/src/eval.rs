//! Classification metrics, counting-error histograms, and the
//! leave-one-exercise-out evaluation harness.
//!
//! For every held-out exercise the harness trains phases 1 and 2 on the
//! remaining exercises, registers the held-out one from the first five
//! repetitions of each subject's first set, fine-tunes (phase 3) per
//! subject, and classifies and counts the remaining sets. Reports carry both
//! pre- and post-fine-tune metrics so the adaptation effect is visible.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::fewshot::{
    classify_windows, register, transition_count, CountResult, REGISTRATION_REPS,
};
use crate::net::{load_params, save_params, Mode, ModelConfig, ModelParams};
use crate::rng::mix;
use crate::signal::{labeled_windows, Label, Window, DEFAULT_OVERLAP_RATIO};
use crate::train::{
    fine_tune_phase3, subsample_balanced, train_phase1, train_phase2, Phase1Config, Phase2Config,
    Phase3Config,
};

/// Standard binary-classification metrics with peak as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Compute metrics from aligned prediction / truth sequences. Degenerate
/// denominators (no predicted or no actual positives) yield 0, not NaN.
pub fn compute_metrics(predictions: &[Label], labels: &[Label]) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p.is_peak(), y.is_peak()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let total = (tp + fp + tn + fn_) as f64;
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricsReport {
        accuracy: (tp + tn) as f64 / total,
        recall,
        precision,
        f1,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Absolute-count-error distribution over sets: buckets for errors of
/// 0..=5 and "more than 5", as percentages of `total_sets`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorHistogram {
    /// Percentages for e|0| through e|5|.
    pub buckets: [f64; 6],
    /// Percentage for e|>5|.
    pub over_5: f64,
    pub total_sets: usize,
}

impl ErrorHistogram {
    pub fn error_free_fraction(&self) -> f64 {
        self.buckets[0] / 100.0
    }
}

pub fn error_histogram(results: &[CountResult]) -> Result<ErrorHistogram> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no count results".into()));
    }
    let mut counts = [0usize; 7];
    for r in results {
        let err = r.abs_error().ok_or_else(|| {
            Error::InvalidArgument("count result lacks a ground-truth count".into())
        })?;
        counts[err.min(6)] += 1;
    }
    let total = results.len() as f64;
    let pct = |c: usize| 100.0 * c as f64 / total;
    Ok(ErrorHistogram {
        buckets: [
            pct(counts[0]),
            pct(counts[1]),
            pct(counts[2]),
            pct(counts[3]),
            pct(counts[4]),
            pct(counts[5]),
        ],
        over_5: pct(counts[6]),
        total_sets: results.len(),
    })
}

/// Harness configuration: model architecture, per-phase settings, and the
/// corpus-handling knobs.
#[derive(Debug, Clone)]
pub struct LooConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub phase3: Phase3Config,
    pub overlap_ratio: f64,
    /// Class-balanced cap on training windows per held-out run.
    pub train_window_cap: Option<usize>,
    /// When set, phase-1/2 checkpoints are cached here keyed by the held-out
    /// exercise and reused on the next run.
    pub cache_dir: Option<PathBuf>,
}

impl Default for LooConfig {
    fn default() -> Self {
        LooConfig {
            seed: 0,
            model: ModelConfig::default(),
            phase1: Phase1Config::default(),
            phase2: Phase2Config::default(),
            phase3: Phase3Config::default(),
            overlap_ratio: DEFAULT_OVERLAP_RATIO,
            train_window_cap: None,
            cache_dir: None,
        }
    }
}

/// Results for one held-out exercise.
#[derive(Debug, Clone, Serialize)]
pub struct ExerciseOutcome {
    pub exercise_id: String,
    /// Window metrics with the phase-2 model and pre-fine-tune supports.
    pub pre_metrics: MetricsReport,
    /// Window metrics after per-subject phase-3 fine-tuning.
    pub post_metrics: MetricsReport,
    pub histogram: ErrorHistogram,
    pub count_results: Vec<CountResult>,
    /// Exercise ids the base model was trained on (audit trail).
    pub train_manifest: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LooReport {
    pub per_exercise: Vec<ExerciseOutcome>,
    /// Fraction of all test sets with absolute counting error <= 5.
    pub within_5_fraction: f64,
    /// Fraction of all test sets counted exactly.
    pub error_free_fraction: f64,
}

impl LooReport {
    pub fn macro_f1_post(&self) -> f64 {
        let n = self.per_exercise.len().max(1);
        self.per_exercise.iter().map(|e| e.post_metrics.f1).sum::<f64>() / n as f64
    }

    pub fn macro_f1_pre(&self) -> f64 {
        let n = self.per_exercise.len().max(1);
        self.per_exercise.iter().map(|e| e.pre_metrics.f1).sum::<f64>() / n as f64
    }
}

fn cache_path(dir: &Path, exercise_id: &str) -> PathBuf {
    dir.join(format!("base_{exercise_id}.rkw"))
}

/// Train (or restore from cache) the phase-1 + phase-2 base model for one
/// held-out exercise. Returns the model plus the training manifest.
fn base_model_for(
    corpus: &Corpus,
    cfg: &LooConfig,
    ei: usize,
    exercise_id: &str,
) -> Result<(ModelParams, Vec<String>)> {
    let train_entries = corpus.entries_excluding(exercise_id);
    let mut manifest: Vec<String> = train_entries
        .iter()
        .map(|e| e.stream.exercise_id.clone())
        .collect();
    manifest.sort();
    manifest.dedup();

    if let Some(dir) = &cfg.cache_dir {
        let path = cache_path(dir, exercise_id);
        if path.exists() {
            match load_params(&path) {
                Ok(model) if model.config() == &cfg.model => {
                    info!("holdout {exercise_id}: restored cached checkpoint");
                    return Ok((model, manifest));
                }
                Ok(_) => warn!(
                    "holdout {exercise_id}: cached checkpoint has a different config, retraining"
                ),
                Err(e) => warn!("holdout {exercise_id}: cache unusable ({e}), retraining"),
            }
        }
    }

    let mut windows =
        corpus.windows_for_entries(&train_entries, cfg.model.t_max, cfg.overlap_ratio)?;
    if let Some(cap) = cfg.train_window_cap {
        windows = subsample_balanced(windows, cap, mix(&[cfg.seed, 0x13, ei as u64]));
    }
    let mut model = ModelParams::init(cfg.model.clone(), mix(&[cfg.seed, 0x10, ei as u64]))?;
    let p1 = Phase1Config {
        seed: mix(&[cfg.seed, 0x11, ei as u64]),
        ..cfg.phase1.clone()
    };
    train_phase1(&windows, &p1, &mut model)?;
    let p2 = Phase2Config {
        seed: mix(&[cfg.seed, 0x12, ei as u64]),
        ..cfg.phase2.clone()
    };
    train_phase2(&windows, &p2, &mut model)?;

    if let Some(dir) = &cfg.cache_dir {
        std::fs::create_dir_all(dir)?;
        save_params(&model, cache_path(dir, exercise_id))?;
    }
    Ok((model, manifest))
}

fn run_holdout(
    corpus: &Corpus,
    cfg: &LooConfig,
    ei: usize,
    exercise_id: &str,
) -> Result<ExerciseOutcome> {
    let meta = corpus
        .meta(exercise_id)
        .ok_or_else(|| Error::InvalidArgument(format!("no metadata for '{exercise_id}'")))?
        .clone();
    let (base, train_manifest) = base_model_for(corpus, cfg, ei, exercise_id)?;
    let params = meta.window_params()?;

    let mut pre_predictions = Vec::new();
    let mut post_predictions = Vec::new();
    let mut truths = Vec::new();
    let mut count_results = Vec::new();
    let mut registered_subjects = 0usize;

    for (si, subject) in corpus.subjects_for(exercise_id).iter().enumerate() {
        let sets = corpus.sets_of(exercise_id, subject);
        if sets.len() < 2 {
            warn!(
                "holdout {exercise_id}: subject {subject} has {} sets, needs a registration set plus tests",
                sets.len()
            );
            continue;
        }
        let reg_stream = match sets[0].stream.clip_to_first_peaks(REGISTRATION_REPS) {
            Ok(s) => s,
            Err(e) => {
                warn!("holdout {exercise_id}: subject {subject} registration stream unusable: {e}");
                continue;
            }
        };
        let support_pre = match register(&reg_stream, &meta, &base) {
            Ok(s) => s,
            Err(Error::RegistrationInsufficient(msg)) => {
                warn!("holdout {exercise_id}: subject {subject} skipped: {msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let reg_windows =
            labeled_windows(&reg_stream, &params, cfg.model.t_max, cfg.overlap_ratio)?;
        let p3 = Phase3Config {
            seed: mix(&[cfg.seed, 0x30, ei as u64, si as u64]),
            ..cfg.phase3.clone()
        };
        let (adapted, _) = fine_tune_phase3(&reg_windows, &p3, &base)?;
        // Supports are re-embedded with the fine-tuned model before counting.
        let support_post = register(&reg_stream, &meta, &adapted)?;
        registered_subjects += 1;

        for entry in &sets[1..] {
            let test_windows =
                labeled_windows(&entry.stream, &params, cfg.model.t_max, cfg.overlap_ratio)?;
            let truth: Vec<Label> = test_windows
                .iter()
                .map(|w| w.label.expect("labeled_windows labels every window"))
                .collect();

            // Same session seed on both passes: the pre/post comparison then
            // isolates the fine-tuning effect from support-sampling noise.
            let session_seed =
                mix(&[cfg.seed, 0x20, ei as u64, si as u64, entry.set_index as u64]);
            let pre = classify_windows(&test_windows, &support_pre, &base, session_seed)?;
            let post = classify_windows(&test_windows, &support_post, &adapted, session_seed)?;

            count_results.push(CountResult {
                predicted_count: transition_count(&post),
                true_count: Some(entry.stream.rep_count()),
            });
            pre_predictions.extend(pre);
            post_predictions.extend(post);
            truths.extend(truth);
        }
    }

    if registered_subjects == 0 {
        return Err(Error::RegistrationInsufficient(format!(
            "exercise {exercise_id} has no registration-eligible stream"
        )));
    }

    Ok(ExerciseOutcome {
        exercise_id: exercise_id.to_string(),
        pre_metrics: compute_metrics(&pre_predictions, &truths)?,
        post_metrics: compute_metrics(&post_predictions, &truths)?,
        histogram: error_histogram(&count_results)?,
        count_results,
        train_manifest,
    })
}

/// Leave-one-exercise-out evaluation over the whole corpus. Exercises
/// without any registration-eligible stream are skipped with a warning.
pub fn loo_harness(corpus: &Corpus, cfg: &LooConfig) -> Result<LooReport> {
    let exercise_ids = corpus.exercise_ids();
    if exercise_ids.len() < 2 {
        return Err(Error::InvalidArgument(
            "leave-one-out needs at least 2 exercises".into(),
        ));
    }

    let mut per_exercise = Vec::new();
    for (ei, exercise_id) in exercise_ids.iter().enumerate() {
        info!("holdout {exercise_id}: starting");
        match run_holdout(corpus, cfg, ei, exercise_id) {
            Ok(outcome) => {
                info!(
                    "holdout {exercise_id}: pre F1 {:.3}, post F1 {:.3}, e|0| {:.1}%",
                    outcome.pre_metrics.f1, outcome.post_metrics.f1, outcome.histogram.buckets[0]
                );
                per_exercise.push(outcome);
            }
            Err(Error::RegistrationInsufficient(msg)) => {
                warn!("skipping exercise: {msg}");
            }
            Err(e) => return Err(e),
        }
    }

    let all_counts: Vec<&CountResult> = per_exercise
        .iter()
        .flat_map(|e| e.count_results.iter())
        .collect();
    let total = all_counts.len().max(1) as f64;
    let within_5 = all_counts
        .iter()
        .filter(|r| r.abs_error().map(|e| e <= 5).unwrap_or(false))
        .count() as f64;
    let exact = all_counts
        .iter()
        .filter(|r| r.abs_error() == Some(0))
        .count() as f64;

    Ok(LooReport {
        per_exercise,
        within_5_fraction: within_5 / total,
        error_free_fraction: exact / total,
    })
}

/// Write one embedding per window (`exercise,label,v0,...,vD`) for external
/// projection tools. Values carry 17 significant digits.
pub fn export_embeddings(
    windows: &[Window],
    model: &ModelParams,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut out = String::new();
    for w in windows {
        let label = match w.label {
            Some(Label::Peak) => "peak",
            Some(Label::NonPeak) => "non-peak",
            None => "unlabeled",
        };
        let (embedding, _) = model.forward(w, Mode::Eval, 0)?;
        let _ = write!(out, "{},{label}", w.origin.exercise_id);
        for v in &embedding {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write the report files: per-exercise metric tables (post- and
/// pre-fine-tune), the error-ratio table, and a JSON summary.
pub fn write_reports(report: &LooReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;

    let mut metrics = String::from("exercise,accuracy,recall,precision,f1\n");
    let mut metrics_pre = metrics.clone();
    for e in &report.per_exercise {
        let _ = writeln!(
            metrics,
            "{},{:.4},{:.4},{:.4},{:.4}",
            e.exercise_id,
            e.post_metrics.accuracy,
            e.post_metrics.recall,
            e.post_metrics.precision,
            e.post_metrics.f1
        );
        let _ = writeln!(
            metrics_pre,
            "{},{:.4},{:.4},{:.4},{:.4}",
            e.exercise_id,
            e.pre_metrics.accuracy,
            e.pre_metrics.recall,
            e.pre_metrics.precision,
            e.pre_metrics.f1
        );
    }
    std::fs::write(dir.join("metrics.csv"), metrics)?;
    std::fs::write(dir.join("metrics_pre.csv"), metrics_pre)?;

    let mut ratios = String::from("exercise,total_sets,e0,e1,e2,e3,e4,e5,egt5\n");
    for e in &report.per_exercise {
        let h = &e.histogram;
        let _ = writeln!(
            ratios,
            "{},{},{:.1},{:.1},{:.1},{:.1},{:.1},{:.1},{:.1}",
            e.exercise_id,
            h.total_sets,
            h.buckets[0],
            h.buckets[1],
            h.buckets[2],
            h.buckets[3],
            h.buckets[4],
            h.buckets[5],
            h.over_5
        );
    }
    std::fs::write(dir.join("error_ratio.csv"), ratios)?;

    let summary = serde_json::to_string_pretty(report)
        .map_err(|e| Error::InvalidArgument(format!("summary serialization failed: {e}")))?;
    std::fs::write(dir.join("summary.json"), summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::signal::slide;
    use crate::synthgen::{generate_set, sample_archetype, GenConfig, SubjectProfile};

    fn labels_from(tp: usize, fp: usize, tn: usize, fn_: usize) -> (Vec<Label>, Vec<Label>) {
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..tp {
            pred.push(Label::Peak);
            truth.push(Label::Peak);
        }
        for _ in 0..fp {
            pred.push(Label::Peak);
            truth.push(Label::NonPeak);
        }
        for _ in 0..tn {
            pred.push(Label::NonPeak);
            truth.push(Label::NonPeak);
        }
        for _ in 0..fn_ {
            pred.push(Label::NonPeak);
            truth.push(Label::Peak);
        }
        (pred, truth)
    }

    #[test]
    fn metrics_example() {
        let (pred, truth) = labels_from(9, 1, 89, 1);
        let m = compute_metrics(&pred, &truth).unwrap();
        assert!((m.precision - 0.9).abs() < 1e-12);
        assert!((m.recall - 0.9).abs() < 1e-12);
        assert!((m.accuracy - 0.98).abs() < 1e-12);
        assert!((m.f1 - 0.9).abs() < 1e-12);
        // harmonic-mean identity
        let f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
        assert!((m.f1 - f1).abs() < 1e-12);
    }

    #[test]
    fn metrics_all_correct_and_degenerate() {
        let (pred, truth) = labels_from(5, 0, 5, 0);
        let m = compute_metrics(&pred, &truth).unwrap();
        assert_eq!(
            (m.accuracy, m.recall, m.precision, m.f1),
            (1.0, 1.0, 1.0, 1.0)
        );

        // no predicted positives: precision and f1 defined as 0
        let (pred, truth) = labels_from(0, 0, 8, 2);
        let m = compute_metrics(&pred, &truth).unwrap();
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.recall, 0.0);

        assert!(compute_metrics(&[], &[]).is_err());
    }

    fn result(predicted: usize, truth: usize) -> CountResult {
        CountResult {
            predicted_count: predicted,
            true_count: Some(truth),
        }
    }

    #[test]
    fn histogram_examples() {
        let results = [result(10, 10), result(7, 7), result(9, 10), result(16, 10)];
        let h = error_histogram(&results).unwrap();
        assert!((h.buckets[0] - 50.0).abs() < 1e-12);
        assert!((h.buckets[1] - 25.0).abs() < 1e-12);
        assert!((h.over_5 - 25.0).abs() < 1e-12);
        assert_eq!(h.total_sets, 4);

        let all_zero = [result(3, 3), result(15, 15)];
        let h = error_histogram(&all_zero).unwrap();
        assert_eq!(h.buckets[0], 100.0);
        assert_eq!(h.error_free_fraction(), 1.0);
    }

    #[test]
    fn histogram_matches_tally_oracle_and_sums_to_100() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..50 {
            let n = 1 + rng.next_below(40) as usize;
            let results: Vec<CountResult> = (0..n)
                .map(|_| {
                    let truth = 5 + rng.next_below(20) as usize;
                    let err = rng.next_below(9) as i64 - 4;
                    result((truth as i64 + err).max(0) as usize, truth)
                })
                .collect();
            let h = error_histogram(&results).unwrap();

            let mut tally = [0usize; 7];
            for r in &results {
                tally[r.abs_error().unwrap().min(6)] += 1;
            }
            for b in 0..6 {
                assert!((h.buckets[b] - 100.0 * tally[b] as f64 / n as f64).abs() < 1e-9);
            }
            assert!((h.over_5 - 100.0 * tally[6] as f64 / n as f64).abs() < 1e-9);

            let sum: f64 = h.buckets.iter().sum::<f64>() + h.over_5;
            assert!((sum - 100.0).abs() < 0.1);
        }
    }

    /// A corpus whose geometry guarantees ground-truth labels count exactly:
    /// every cycle keeps at least one non-peak window between repetitions.
    fn friendly_corpus(seed: u64) -> Corpus {
        let mut corpus = Corpus::default();
        for (ei, period) in [1.3, 2.4, 3.6].iter().enumerate() {
            let id = format!("fx{ei}");
            let arch = sample_archetype(&id, *period, mix(&[seed, ei as u64]));
            corpus
                .metas
                .push(crate::signal::ExerciseMeta::new(&id, &id, *period).unwrap());
            for si in 0..2 {
                let subject = SubjectProfile {
                    subject_id: format!("s{si:02}"),
                    tempo_scale: 0.95 + 0.1 * si as f64,
                    amplitude_scale: 1.0,
                    noise_sigma: 0.04,
                    drift_per_s: 0.001,
                };
                for set in 0..2 {
                    let cfg = GenConfig {
                        seed: mix(&[seed, ei as u64, si as u64, set as u64]),
                        reps_per_set: 8,
                        tempo_jitter: 0.05,
                        ..GenConfig::default()
                    };
                    corpus.entries.push(crate::corpus::CorpusEntry {
                        stream: generate_set(&arch, &subject, &cfg).unwrap(),
                        set_index: set,
                    });
                }
            }
        }
        corpus
    }

    #[test]
    fn oracle_labels_give_perfect_histograms() {
        // Substituting ground-truth labels for the classifier must count
        // every set exactly.
        let corpus = friendly_corpus(99);
        let mut results = Vec::new();
        for entry in &corpus.entries {
            let meta = corpus.meta(&entry.stream.exercise_id).unwrap();
            let params = meta.window_params().unwrap();
            let windows = labeled_windows(&entry.stream, &params, 150, 0.5).unwrap();
            let truth: Vec<Label> = windows.iter().map(|w| w.label.unwrap()).collect();
            results.push(CountResult {
                predicted_count: transition_count(&truth),
                true_count: Some(entry.stream.rep_count()),
            });
        }
        let h = error_histogram(&results).unwrap();
        assert_eq!(
            h.buckets[0], 100.0,
            "oracle-label counting must be exact, histogram {h:?}"
        );
    }

    fn mini_loo_config(seed: u64, cache: Option<PathBuf>) -> LooConfig {
        LooConfig {
            seed,
            model: ModelConfig {
                conv_blocks: vec![(6, 3)],
                dropout_p: 0.1,
                pool_size: 2,
                gru_hidden: 8,
                fc_dims: (8, 6),
                t_max: 100,
            },
            phase1: Phase1Config {
                epochs: 2,
                batch_size: 32,
                ..Phase1Config::default()
            },
            phase2: Phase2Config {
                epochs: 2,
                batch_size: 16,
                ..Phase2Config::default()
            },
            phase3: Phase3Config {
                epochs: 3,
                ..Phase3Config::default()
            },
            overlap_ratio: 0.5,
            train_window_cap: Some(160),
            cache_dir: cache,
        }
    }

    #[test]
    fn loo_structure_audit_and_determinism() {
        let corpus = friendly_corpus(123);
        let cfg = mini_loo_config(9, None);
        let report = loo_harness(&corpus, &cfg).unwrap();

        assert_eq!(report.per_exercise.len(), 3);
        for outcome in &report.per_exercise {
            // the held-out exercise never appears in its own training manifest
            assert!(
                !outcome.train_manifest.contains(&outcome.exercise_id),
                "{} leaked into its own training set",
                outcome.exercise_id
            );
            assert_eq!(outcome.train_manifest.len(), 2);
            // 2 subjects x 1 test set each
            assert_eq!(outcome.count_results.len(), 2);
        }

        let again = loo_harness(&corpus, &cfg).unwrap();
        for (a, b) in report.per_exercise.iter().zip(&again.per_exercise) {
            assert_eq!(a.post_metrics, b.post_metrics);
            assert_eq!(a.pre_metrics, b.pre_metrics);
            assert_eq!(a.count_results, b.count_results);
        }
    }

    #[test]
    fn loo_cache_reuses_checkpoints() {
        let corpus = friendly_corpus(321);
        let dir = tempfile::tempdir().unwrap();
        let cfg = mini_loo_config(11, Some(dir.path().to_path_buf()));
        let first = loo_harness(&corpus, &cfg).unwrap();
        assert!(dir.path().join("base_fx0.rkw").exists());
        let second = loo_harness(&corpus, &cfg).unwrap();
        for (a, b) in first.per_exercise.iter().zip(&second.per_exercise) {
            assert_eq!(a.post_metrics, b.post_metrics);
            assert_eq!(a.count_results, b.count_results);
        }
    }

    #[test]
    fn export_embeddings_roundtrip() {
        let arch = sample_archetype("em", 2.0, 7);
        let subject = SubjectProfile {
            subject_id: "s0".into(),
            tempo_scale: 1.0,
            amplitude_scale: 1.0,
            noise_sigma: 0.05,
            drift_per_s: 0.0,
        };
        let stream = generate_set(
            &arch,
            &subject,
            &GenConfig {
                seed: 8,
                reps_per_set: 5,
                ..GenConfig::default()
            },
        )
        .unwrap();
        let params = crate::signal::WindowParams::new(100, 50).unwrap();
        let windows = labeled_windows(&stream, &params, 150, 0.5).unwrap();
        let model = ModelParams::init(
            ModelConfig {
                conv_blocks: vec![(4, 3)],
                dropout_p: 0.0,
                pool_size: 2,
                gru_hidden: 4,
                fc_dims: (6, 4),
                t_max: 150,
            },
            3,
        )
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.csv");
        export_embeddings(&windows, &model, &path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), windows.len());
        for (line, w) in lines.iter().zip(&windows) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[0], "em");
            assert!(fields[1] == "peak" || fields[1] == "non-peak");
            let parsed: Vec<f64> = fields[2..].iter().map(|v| v.parse().unwrap()).collect();
            let (expected, _) = model.forward(w, Mode::Eval, 0).unwrap();
            assert_eq!(parsed, expected, "embedding mismatch");
        }
    }

    #[test]
    fn write_reports_produces_all_files() {
        let corpus = friendly_corpus(55);
        let cfg = mini_loo_config(5, None);
        let report = loo_harness(&corpus, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_reports(&report, dir.path()).unwrap();
        for file in [
            "metrics.csv",
            "metrics_pre.csv",
            "error_ratio.csv",
            "summary.json",
        ] {
            assert!(dir.path().join(file).exists(), "{file} missing");
        }
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + report.per_exercise.len());
        let summary = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
        assert!(summary.contains("within_5_fraction"));
    }

    #[test]
    fn loo_needs_two_exercises() {
        let mut corpus = friendly_corpus(1);
        corpus.metas.truncate(1);
        corpus.entries.retain(|e| e.stream.exercise_id == "fx0");
        assert!(loo_harness(&corpus, &mini_loo_config(1, None)).is_err());
    }

    #[test]
    fn friendly_corpus_produces_enough_windows() {
        // sanity: more windows than repetitions per set
        let corpus = friendly_corpus(77);
        let entry = &corpus.entries[0];
        let meta = corpus.meta(&entry.stream.exercise_id).unwrap();
        let params = meta.window_params().unwrap();
        let windows = slide(&entry.stream, &params, 150).unwrap();
        assert!(windows.len() > entry.stream.rep_count());
    }
}

//! Synthetic annotated exercise streams.
//!
//! Real recordings of this kind are not redistributable, so end-to-end runs
//! use generated ones: each exercise archetype is a per-channel harmonic sum
//! over the repetition phase, each subject scales tempo and amplitude and
//! adds noise and drift, and every repetition carries one annotated peak
//! interval. Generation is fully deterministic for a fixed seed, and sample
//! values are quantized to the stream-file precision (9 significant digits)
//! so that saving and reloading a generated stream is lossless.

use crate::corpus::{Corpus, CorpusEntry};
use crate::error::{Error, Result};
use crate::rng::{mix, SplitMix64};
use crate::signal::{ExerciseMeta, SignalStream, CHANNELS, DEFAULT_RATE_HZ};

/// One sinusoidal component of a channel's motion pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Harmonic {
    /// Multiple of the repetition frequency, >= 1.
    pub order: u32,
    pub amplitude: f64,
    /// Phase offset in [0, 2*pi).
    pub phase: f64,
}

/// The motion signature of one exercise type.
#[derive(Debug, Clone, PartialEq)]
pub struct ExerciseArchetype {
    pub exercise_id: String,
    /// Nominal repetition duration in seconds.
    pub period_s: f64,
    /// Harmonic mixture per channel, outer length 9.
    pub harmonics: Vec<Vec<Harmonic>>,
    /// Position of the repetition peak within a cycle, in [0, 1).
    pub peak_phase: f64,
    /// Annotated peak interval width as a fraction of the cycle, in (0, 0.5).
    pub peak_width: f64,
}

impl ExerciseArchetype {
    fn validate(&self) -> Result<()> {
        if !(self.period_s > 0.0) {
            return Err(Error::Validation(format!(
                "period must be positive, got {}",
                self.period_s
            )));
        }
        if self.harmonics.len() != CHANNELS {
            return Err(Error::Validation(format!(
                "expected {CHANNELS} harmonic channels, got {}",
                self.harmonics.len()
            )));
        }
        if self.harmonics.iter().any(|h| h.is_empty()) {
            return Err(Error::Validation(
                "every channel needs at least one harmonic".into(),
            ));
        }
        if self.harmonics.iter().flatten().any(|h| h.order == 0) {
            return Err(Error::Validation("harmonic order must be >= 1".into()));
        }
        if !(self.peak_phase >= 0.0 && self.peak_phase < 1.0) {
            return Err(Error::Validation(format!(
                "peak phase must be in [0, 1), got {}",
                self.peak_phase
            )));
        }
        if !(self.peak_width > 0.0 && self.peak_width < 0.5) {
            return Err(Error::Validation(format!(
                "peak width must be in (0, 0.5), got {}",
                self.peak_width
            )));
        }
        Ok(())
    }
}

/// How one person performs exercises.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectProfile {
    pub subject_id: String,
    pub tempo_scale: f64,
    pub amplitude_scale: f64,
    pub noise_sigma: f64,
    /// Slow additive baseline drift per second.
    pub drift_per_s: f64,
}

impl SubjectProfile {
    fn validate(&self) -> Result<()> {
        if !(self.tempo_scale > 0.0) || !(self.amplitude_scale > 0.0) {
            return Err(Error::Validation(
                "tempo and amplitude scales must be positive".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Validation("noise sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Generation knobs shared across a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub reps_per_set: usize,
    pub sets: usize,
    pub rate_hz: f64,
    /// Per-repetition tempo jitter amplitude (uniform in +/- this fraction);
    /// 0 disables jitter entirely.
    pub tempo_jitter: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            reps_per_set: 15,
            sets: 1,
            rate_hz: DEFAULT_RATE_HZ,
            tempo_jitter: 0.1,
        }
    }
}

fn quantize_sig9(v: f64) -> f64 {
    crate::signal::format_sig9(v)
        .parse()
        .expect("sig9 formatting always reparses")
}

/// Generate one annotated set: `reps_per_set` repetitions plus half a cycle
/// of trailing motion so the final repetition's windows are complete.
///
/// Channel c at sample t is
/// `amplitude_scale * sum_k A_ck * sin(2*pi*k*phase(t) + psi_ck)
///  + drift_per_s * t_seconds + N(0, noise_sigma)`,
/// where the phase advances through one cycle per repetition with per-rep
/// tempo jitter. Each repetition is annotated with one peak interval of
/// width `peak_width * cycle` centered at `peak_phase`.
pub fn generate_set(
    arch: &ExerciseArchetype,
    subj: &SubjectProfile,
    cfg: &GenConfig,
) -> Result<SignalStream> {
    arch.validate()?;
    subj.validate()?;
    if cfg.reps_per_set == 0 || !(cfg.rate_hz > 0.0) {
        return Err(Error::Validation(
            "reps_per_set and rate_hz must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.tempo_jitter) {
        return Err(Error::Validation(format!(
            "tempo jitter must be in [0, 1), got {}",
            cfg.tempo_jitter
        )));
    }

    let mut rng = SplitMix64::new(cfg.seed);
    let nominal_cycle = (arch.period_s * subj.tempo_scale * cfg.rate_hz).round() as usize;
    let nominal_cycle = nominal_cycle.max(4);

    let mut samples: Vec<f64> = Vec::new();
    let mut intervals: Vec<(usize, usize)> = Vec::new();
    let mut t_index = 0usize;

    let emit = |rng: &mut SplitMix64, t_index: usize, phase: f64, samples: &mut Vec<f64>| {
        let t_s = t_index as f64 / cfg.rate_hz;
        for channel in &arch.harmonics {
            let mut v = 0.0;
            for h in channel {
                v += h.amplitude
                    * (std::f64::consts::TAU * h.order as f64 * phase + h.phase).sin();
            }
            v = subj.amplitude_scale * v + subj.drift_per_s * t_s;
            if subj.noise_sigma > 0.0 {
                v += subj.noise_sigma * rng.normal();
            }
            samples.push(quantize_sig9(v));
        }
    };

    for _rep in 0..cfg.reps_per_set {
        let jitter = if cfg.tempo_jitter > 0.0 {
            rng.uniform(1.0 - cfg.tempo_jitter, 1.0 + cfg.tempo_jitter)
        } else {
            1.0
        };
        let cycle = ((arch.period_s * subj.tempo_scale * jitter * cfg.rate_hz).round() as usize)
            .max(4);
        let rep_start = t_index;
        for i in 0..cycle {
            emit(&mut rng, t_index, i as f64 / cycle as f64, &mut samples);
            t_index += 1;
        }
        let center = rep_start + (arch.peak_phase * cycle as f64).round() as usize;
        let half = ((arch.peak_width * cycle as f64 / 2.0).round() as usize).max(1);
        let start = center.saturating_sub(half).max(rep_start);
        let end = (center + half).min(rep_start + cycle).max(start + 1);
        intervals.push((start, end));
    }

    // Trailing half cycle keeps the last peak coverable by full windows.
    for i in 0..nominal_cycle / 2 {
        emit(
            &mut rng,
            t_index,
            i as f64 / nominal_cycle as f64,
            &mut samples,
        );
        t_index += 1;
    }

    SignalStream::new(
        cfg.rate_hz,
        samples,
        intervals,
        arch.exercise_id.clone(),
        subj.subject_id.clone(),
    )
}

/// Draw an archetype with the given cycle duration.
///
/// The repetition peak is the movement apex (the top of a squat, the lowest
/// point of a push-up), so each channel's harmonics are phase-aligned to
/// interfere constructively at `peak_phase`: the signal shows a pronounced
/// excursion there, dephased jitter everywhere else. Harmonic orders scale
/// with the cycle length so that slow exercises keep shape detail at window
/// scale instead of degenerating into near-linear arcs.
pub fn sample_archetype(exercise_id: impl Into<String>, period_s: f64, seed: u64) -> ExerciseArchetype {
    let mut rng = SplitMix64::new(seed);
    let peak_phase = rng.uniform(0.2, 0.8);
    let peak_width = rng.uniform(0.12, 0.28);

    // Highest order gives one oscillation per ~22 samples at 92 Hz.
    let max_order = ((period_s * DEFAULT_RATE_HZ / 22.0).round() as usize).clamp(2, 14);
    let mut harmonics = Vec::with_capacity(CHANNELS);
    for _ in 0..CHANNELS {
        let extra = 2 + rng.next_below(max_order.min(5) as u64 - 1) as usize;
        let mut orders = vec![0usize]; // always keep the base motion
        orders.extend(
            rng.sample_indices(max_order - 1, extra.min(max_order - 1))
                .into_iter()
                .map(|o| o + 1),
        );
        let sign = if rng.next_below(2) == 0 { 1.0 } else { -1.0 };
        let channel = orders
            .into_iter()
            .map(|o| {
                let order = o as u32 + 1;
                // Constructive interference at the peak phase, up to jitter:
                // sin(tau*k*peak_phase + psi) = ~sign for every component.
                let jitter = rng.uniform(-0.35, 0.35);
                let phase_raw = sign * std::f64::consts::FRAC_PI_2 + jitter
                    - std::f64::consts::TAU * order as f64 * peak_phase;
                Harmonic {
                    order,
                    amplitude: rng.uniform(0.3, 1.0) / (order as f64).powf(0.25),
                    phase: phase_raw.rem_euclid(std::f64::consts::TAU),
                }
            })
            .collect();
        harmonics.push(channel);
    }
    ExerciseArchetype {
        exercise_id: exercise_id.into(),
        period_s,
        harmonics,
        peak_phase,
        peak_width,
    }
}

/// Draw a subject profile. Tempo stays within [0.9, 1.1] so that every
/// (exercise, subject) combination keeps at least one non-peak window
/// between consecutive repetitions under the duration-rule stride. Drift is
/// slow baseline wander, small enough that a multi-minute set stays within
/// the standardization statistics fit at training time.
pub fn sample_subject(subject_id: impl Into<String>, seed: u64) -> SubjectProfile {
    let mut rng = SplitMix64::new(seed);
    SubjectProfile {
        subject_id: subject_id.into(),
        tempo_scale: rng.uniform(0.9, 1.1),
        amplitude_scale: rng.uniform(0.8, 1.2),
        noise_sigma: rng.uniform(0.02, 0.06),
        drift_per_s: rng.uniform(-0.001, 0.001),
    }
}

/// Generate a full corpus: `n_exercises` archetypes with distinct periods
/// spanning [0.8 s, 6.0 s] (covering both branches of the window-size rule),
/// `n_subjects` subjects each, `cfg.sets` sets per pair.
pub fn generate_corpus(n_exercises: usize, n_subjects: usize, cfg: &GenConfig) -> Result<Corpus> {
    if n_exercises < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 exercises for leave-one-out, got {n_exercises}"
        )));
    }
    if n_subjects == 0 || cfg.sets == 0 {
        return Err(Error::InvalidArgument(
            "need at least one subject and one set".into(),
        ));
    }
    let (lo, hi) = (0.8f64, 6.0f64);
    let mut corpus = Corpus::default();
    for ei in 0..n_exercises {
        let period = lo + (hi - lo) * ei as f64 / (n_exercises - 1) as f64;
        let exercise_id = format!("ex{ei:02}");
        let arch = sample_archetype(&exercise_id, period, mix(&[cfg.seed, 0xA2C4, ei as u64]));
        let mut meta = ExerciseMeta::new(&exercise_id, &exercise_id, period)?;
        meta.table_params = None; // synthetic exercises always use the duration rule
        corpus.metas.push(meta);
        for si in 0..n_subjects {
            let subject = sample_subject(
                format!("s{si:02}"),
                mix(&[cfg.seed, 0xB371, ei as u64, si as u64]),
            );
            for set in 0..cfg.sets {
                let set_cfg = GenConfig {
                    seed: mix(&[cfg.seed, 0xC9D5, ei as u64, si as u64, set as u64]),
                    ..cfg.clone()
                };
                corpus.entries.push(CorpusEntry {
                    stream: generate_set(&arch, &subject, &set_cfg)?,
                    set_index: set,
                });
            }
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_archetype(period_s: f64, amplitude: f64, phase: f64) -> ExerciseArchetype {
        ExerciseArchetype {
            exercise_id: "flat".into(),
            period_s,
            harmonics: vec![vec![Harmonic { order: 1, amplitude, phase }]; CHANNELS],
            peak_phase: 0.25,
            peak_width: 0.2,
        }
    }

    fn clean_subject() -> SubjectProfile {
        SubjectProfile {
            subject_id: "s00".into(),
            tempo_scale: 1.0,
            amplitude_scale: 1.0,
            noise_sigma: 0.0,
            drift_per_s: 0.0,
        }
    }

    #[test]
    fn one_interval_per_rep() {
        let arch = sample_archetype("e", 2.0, 5);
        let subj = sample_subject("s", 6);
        let cfg = GenConfig {
            seed: 7,
            reps_per_set: 15,
            ..GenConfig::default()
        };
        let stream = generate_set(&arch, &subj, &cfg).unwrap();
        assert_eq!(stream.rep_count(), 15);
        // intervals validated as sorted/non-overlapping by SignalStream::new
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let arch = sample_archetype("e", 1.3, 11);
        let subj = sample_subject("s", 12);
        let cfg = GenConfig {
            seed: 99,
            reps_per_set: 8,
            ..GenConfig::default()
        };
        let a = generate_set(&arch, &subj, &cfg).unwrap();
        let b = generate_set(&arch, &subj, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pure_sinusoid_matches_closed_form() {
        let amplitude = 0.8;
        let phase = 1.1;
        let arch = flat_archetype(2.0, amplitude, phase);
        let cfg = GenConfig {
            seed: 1,
            reps_per_set: 5,
            tempo_jitter: 0.0,
            ..GenConfig::default()
        };
        let stream = generate_set(&arch, &clean_subject(), &cfg).unwrap();
        let cycle = (2.0 * DEFAULT_RATE_HZ).round() as usize;

        // closed-form oracle evaluated independently per cycle
        for rep in 0..5 {
            let mut best_gen = (0usize, f64::NEG_INFINITY);
            let mut best_analytic = (0usize, f64::NEG_INFINITY);
            for i in 0..cycle {
                let t = rep * cycle + i;
                let gen = stream.sample(t)[0];
                let analytic = amplitude
                    * (std::f64::consts::TAU * i as f64 / cycle as f64 + phase).sin();
                assert!(
                    (gen - analytic).abs() < 1e-8,
                    "sample {t}: {gen} vs {analytic}"
                );
                if gen > best_gen.1 {
                    best_gen = (i, gen);
                }
                if analytic > best_analytic.1 {
                    best_analytic = (i, analytic);
                }
            }
            assert_eq!(best_gen.0, best_analytic.0, "argmax in cycle {rep}");
        }
    }

    #[test]
    fn corpus_product_and_branch_coverage() {
        let cfg = GenConfig {
            seed: 4,
            reps_per_set: 4,
            sets: 4,
            ..GenConfig::default()
        };
        let corpus = generate_corpus(10, 5, &cfg).unwrap();
        assert_eq!(corpus.entries.len(), 200);
        assert_eq!(corpus.metas.len(), 10);
        assert!(corpus.metas.iter().any(|m| m.mean_rep_duration_s <= 1.5));
        assert!(corpus.metas.iter().any(|m| m.mean_rep_duration_s > 1.5));
        // periods are distinct
        let mut periods: Vec<f64> = corpus.metas.iter().map(|m| m.mean_rep_duration_s).collect();
        periods.sort_by(f64::total_cmp);
        periods.dedup();
        assert_eq!(periods.len(), 10);

        // generator bookkeeping: every set carries exactly reps_per_set peaks
        let total: usize = corpus.entries.iter().map(|e| e.stream.rep_count()).sum();
        assert_eq!(total, 200 * 4);
    }

    #[test]
    fn corpus_requires_two_exercises() {
        assert!(generate_corpus(1, 3, &GenConfig::default()).is_err());
    }

    #[test]
    fn generated_stream_roundtrips_bit_exactly() {
        let arch = sample_archetype("e", 1.1, 21);
        let subj = sample_subject("s", 22);
        let cfg = GenConfig {
            seed: 23,
            reps_per_set: 6,
            ..GenConfig::default()
        };
        let stream = generate_set(&arch, &subj, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.csv");
        crate::signal::save_stream(&stream, &path).unwrap();
        let loaded = crate::signal::load_stream(&path).unwrap();
        assert_eq!(loaded, stream);
    }
}

//! Registration, support-set classification, and repetition counting.
//!
//! A user registers a new exercise by performing five guided repetitions;
//! the annotated recording is segmented, labeled, and embedded into a
//! [`SupportSet`]. At inference each incoming window is embedded and
//! classified peak iff its mean cosine similarity to five sampled positive
//! supports is at least that to five sampled negatives. Counting then
//! reduces the label sequence to the number of maximal runs of peaks.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Embedding, Mode, ModelParams};
use crate::rng::{mix, SplitMix64};
use crate::signal::{
    labeled_windows, ExerciseMeta, Label, SignalStream, Window, WindowOrigin, WindowParams,
    CHANNELS, DEFAULT_OVERLAP_RATIO,
};

/// Number of supports sampled per class for one classification.
pub const SUPPORTS_PER_CLASS: usize = 5;

/// Repetitions collected during registration.
pub const REGISTRATION_REPS: usize = 5;

/// Labeled embeddings from a registration recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub positives: Vec<Embedding>,
    pub negatives: Vec<Embedding>,
    pub window_params: WindowParams,
}

impl SupportSet {
    fn validate(&self) -> Result<()> {
        if self.positives.len() < SUPPORTS_PER_CLASS
            || self.negatives.len() < SUPPORTS_PER_CLASS
        {
            return Err(Error::RegistrationInsufficient(format!(
                "support set needs at least {SUPPORTS_PER_CLASS} embeddings per class, \
                 has {} positive / {} negative",
                self.positives.len(),
                self.negatives.len()
            )));
        }
        Ok(())
    }
}

/// Build a support set from a 5-repetition registration stream: slide with
/// the exercise's window parameters, label against the annotations, embed
/// every window with the given model (eval mode), and split by label.
pub fn register(
    stream: &SignalStream,
    meta: &ExerciseMeta,
    model: &ModelParams,
) -> Result<SupportSet> {
    if stream.rep_count() != REGISTRATION_REPS {
        return Err(Error::RegistrationInsufficient(format!(
            "registration stream must contain exactly {REGISTRATION_REPS} annotated \
             repetitions, found {}",
            stream.rep_count()
        )));
    }
    let params = meta.window_params()?;
    let windows = labeled_windows(stream, &params, model.config().t_max, DEFAULT_OVERLAP_RATIO)?;

    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for w in &windows {
        let (embedding, _) = model.forward(w, Mode::Eval, 0)?;
        match w.label.expect("labeled_windows labels every window") {
            Label::Peak => positives.push(embedding),
            Label::NonPeak => negatives.push(embedding),
        }
    }
    let support = SupportSet {
        positives,
        negatives,
        window_params: params,
    };
    support.validate()?;
    Ok(support)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Classify one window against a support set: embed it, sample five
/// positives and five negatives without replacement (deterministic for a
/// given `rng_seed`), and compare the mean cosine similarities. Ties go to
/// peak.
pub fn classify(
    anchor: &Window,
    support: &SupportSet,
    model: &ModelParams,
    rng_seed: u64,
) -> Result<Label> {
    support.validate()?;
    let (embedding, _) = model.forward(anchor, Mode::Eval, 0)?;
    let mut rng = SplitMix64::new(rng_seed);
    let pos_idx = rng.sample_indices(support.positives.len(), SUPPORTS_PER_CLASS);
    let neg_idx = rng.sample_indices(support.negatives.len(), SUPPORTS_PER_CLASS);

    let sp: f64 = pos_idx
        .iter()
        .map(|&i| cosine(&embedding, &support.positives[i]))
        .sum::<f64>()
        / SUPPORTS_PER_CLASS as f64;
    let sn: f64 = neg_idx
        .iter()
        .map(|&i| cosine(&embedding, &support.negatives[i]))
        .sum::<f64>()
        / SUPPORTS_PER_CLASS as f64;

    Ok(if sp >= sn { Label::Peak } else { Label::NonPeak })
}

/// Per-window seed derivation shared by the batch and streaming paths so
/// both classify identically.
fn window_seed(session_seed: u64, window_index: usize) -> u64 {
    mix(&[session_seed, 0x5EED, window_index as u64])
}

/// Classify a window sequence with per-window seeds derived from one
/// session seed.
pub fn classify_windows(
    windows: &[Window],
    support: &SupportSet,
    model: &ModelParams,
    session_seed: u64,
) -> Result<Vec<Label>> {
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| classify(w, support, model, window_seed(session_seed, i)))
        .collect()
}

/// Number of maximal runs of peaks: each 0 -> 1 transition (including a
/// leading peak) counts one repetition.
pub fn transition_count(labels: &[Label]) -> usize {
    let mut count = 0;
    let mut inside_run = false;
    for label in labels {
        if label.is_peak() {
            if !inside_run {
                count += 1;
                inside_run = true;
            }
        } else {
            inside_run = false;
        }
    }
    count
}

/// Transition counting that ignores peak runs shorter than `min_run`
/// windows. `min_run = 1` is plain [`transition_count`].
pub fn transition_count_min_run(labels: &[Label], min_run: usize) -> usize {
    let min_run = min_run.max(1);
    let mut count = 0;
    let mut run_len = 0usize;
    for label in labels {
        if label.is_peak() {
            run_len += 1;
            if run_len == min_run {
                count += 1;
            }
        } else {
            run_len = 0;
        }
    }
    count
}

/// Predicted versus annotated repetition count for one set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct CountResult {
    pub predicted_count: usize,
    pub true_count: Option<usize>,
}

impl CountResult {
    pub fn abs_error(&self) -> Option<usize> {
        self.true_count
            .map(|t| t.abs_diff(self.predicted_count))
    }
}

/// Count a full recorded set: slide, classify every window, count runs.
/// The annotation count (when present) becomes the ground truth.
pub fn count_set(
    stream: &SignalStream,
    support: &SupportSet,
    model: &ModelParams,
    params: &WindowParams,
    session_seed: u64,
) -> Result<CountResult> {
    let windows = crate::signal::slide(stream, params, model.config().t_max)?;
    let labels = classify_windows(&windows, support, model, session_seed)?;
    Ok(CountResult {
        predicted_count: transition_count(&labels),
        true_count: (stream.rep_count() > 0).then(|| stream.rep_count()),
    })
}

/// Events emitted by the streaming session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    /// A full window was classified. `at_sample` is the index of the sample
    /// that completed it.
    WindowClassified {
        window_index: usize,
        at_sample: usize,
        label: Label,
    },
    /// A new run of peaks started.
    CountIncremented { count: usize, at_sample: usize },
}

/// Streaming counter: feed samples one at a time; every `stride` samples
/// (once the buffer holds a full window) the newest window is classified and
/// the count updated. Produces exactly the label sequence of the batch
/// pipeline over the same samples.
#[derive(Debug, Clone)]
pub struct SessionState {
    params: WindowParams,
    t_max: usize,
    session_seed: u64,
    buffer: VecDeque<[f64; CHANNELS]>,
    samples_seen: usize,
    samples_since_last_window: usize,
    labels: Vec<Label>,
    count: usize,
}

impl SessionState {
    pub fn new(params: WindowParams, t_max: usize, session_seed: u64) -> Result<Self> {
        if t_max < params.window_size {
            return Err(Error::InvalidArgument(format!(
                "t_max {t_max} smaller than window size {}",
                params.window_size
            )));
        }
        Ok(SessionState {
            params,
            t_max,
            session_seed,
            buffer: VecDeque::with_capacity(params.window_size),
            samples_seen: 0,
            samples_since_last_window: 0,
            labels: Vec::new(),
            count: 0,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// Ingest one 9-channel sample; classifies a window when one completes.
    pub fn stream_step(
        &mut self,
        sample: &[f64],
        support: &SupportSet,
        model: &ModelParams,
    ) -> Result<Vec<Event>> {
        if sample.len() != CHANNELS {
            return Err(Error::InvalidArgument(format!(
                "expected {CHANNELS} channel values, got {}",
                sample.len()
            )));
        }
        let mut row = [0.0f64; CHANNELS];
        row.copy_from_slice(sample);
        if self.buffer.len() == self.params.window_size {
            self.buffer.pop_front();
        }
        self.buffer.push_back(row);
        self.samples_seen += 1;
        self.samples_since_last_window += 1;

        // Window k of the batch pipeline covers [k*stride, k*stride + size),
        // completing when exactly k*stride + size samples have arrived.
        let mut events = Vec::new();
        let window_ready = self.samples_seen >= self.params.window_size
            && (self.samples_seen - self.params.window_size) % self.params.stride == 0;
        if !window_ready {
            return Ok(events);
        }
        self.samples_since_last_window = 0;

        let start_index = self.samples_seen - self.params.window_size;
        let mut data = vec![0.0f64; self.t_max * CHANNELS];
        for (t, row) in self.buffer.iter().enumerate() {
            data[t * CHANNELS..(t + 1) * CHANNELS].copy_from_slice(row);
        }
        let window = Window::new(
            data,
            self.params.window_size,
            WindowOrigin {
                exercise_id: String::new(),
                subject_id: String::new(),
                start_index,
            },
        )?;

        let window_index = self.labels.len();
        let label = classify(
            &window,
            support,
            model,
            window_seed(self.session_seed, window_index),
        )?;
        let at_sample = self.samples_seen - 1;
        events.push(Event::WindowClassified {
            window_index,
            at_sample,
            label,
        });

        let starts_run = label.is_peak()
            && self
                .labels
                .last()
                .map(|prev| !prev.is_peak())
                .unwrap_or(true);
        self.labels.push(label);
        if starts_run {
            self.count += 1;
            events.push(Event::CountIncremented {
                count: self.count,
                at_sample,
            });
        }
        debug_assert_eq!(self.count, transition_count(&self.labels));
        Ok(events)
    }
}

/// Serialize a support set: a header with the window parameters and
/// embedding dimension, then one `pos,...` / `neg,...` line per embedding
/// with 17 significant digits (lossless for f64).
pub fn save_support(support: &SupportSet, path: impl AsRef<Path>) -> Result<()> {
    let dim = support
        .positives
        .first()
        .or(support.negatives.first())
        .map(|e| e.len())
        .unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "#support,version=1,window_size={},stride={},dim={dim}",
        support.window_params.window_size, support.window_params.stride
    );
    for (tag, list) in [("pos", &support.positives), ("neg", &support.negatives)] {
        for e in list {
            out.push_str(tag);
            for v in e {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_support(path: impl AsRef<Path>) -> Result<SupportSet> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty file"))?;
    let rest = header
        .strip_prefix("#support,version=1,")
        .ok_or_else(|| Error::parse(1, "not a support file"))?;
    let mut window_size = None;
    let mut stride = None;
    let mut dim = None;
    for field in rest.split(',') {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::parse(1, format!("bad header field '{field}'")))?;
        let v: usize = v
            .parse()
            .map_err(|_| Error::parse(1, format!("bad header value '{v}'")))?;
        match k {
            "window_size" => window_size = Some(v),
            "stride" => stride = Some(v),
            "dim" => dim = Some(v),
            other => return Err(Error::parse(1, format!("unknown header key '{other}'"))),
        }
    }
    let (window_size, stride, dim) = match (window_size, stride, dim) {
        (Some(w), Some(s), Some(d)) => (w, s, d),
        _ => return Err(Error::parse(1, "header missing window_size/stride/dim")),
    };

    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (tag, values) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(lineno, "expected pos/neg row"))?;
        let embedding: Vec<f64> = values
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::parse(lineno, format!("bad value '{v}'")))
            })
            .collect::<Result<_>>()?;
        if embedding.len() != dim {
            return Err(Error::parse(
                lineno,
                format!("expected {dim} values, found {}", embedding.len()),
            ));
        }
        match tag {
            "pos" => positives.push(embedding),
            "neg" => negatives.push(embedding),
            other => return Err(Error::parse(lineno, format!("unknown row tag '{other}'"))),
        }
    }
    let support = SupportSet {
        positives,
        negatives,
        window_params: WindowParams::new(window_size, stride)?,
    };
    support.validate()?;
    Ok(support)
}

//! Sensor stream representation and sliding-window segmentation.
//!
//! A [`SignalStream`] is a continuous 9-channel recording (accelerometer,
//! gyroscope, magnetometer x 3 axes) at a fixed sample rate, annotated with
//! half-open peak intervals, one per repetition. [`slide`] cuts it into
//! fixed-stride windows zero-padded to a common buffer length so streams
//! segmented with different window sizes can share one network input shape;
//! the pre-padding size is kept as `valid_len` and padded rows stay exactly
//! zero so downstream masking can exclude them.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Channel count of every stream: (ax, ay, az, gx, gy, gz, mx, my, mz).
pub const CHANNELS: usize = 9;

/// Sample rate of the recording hardware this pipeline targets.
pub const DEFAULT_RATE_HZ: f64 = 92.0;

/// Default padded buffer length: the largest per-exercise window size in use.
pub const DEFAULT_T_MAX: usize = 150;

/// Binary window class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Peak,
    NonPeak,
}

impl Label {
    pub fn is_peak(self) -> bool {
        matches!(self, Label::Peak)
    }
}

/// A continuous 9-channel recording with repetition-peak annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalStream {
    pub sample_rate_hz: f64,
    /// Row-major [L x 9] sample matrix.
    channels: Vec<f64>,
    /// Sorted, non-overlapping half-open index ranges, one per repetition.
    peak_intervals: Vec<(usize, usize)>,
    pub exercise_id: String,
    pub subject_id: String,
}

impl SignalStream {
    pub fn new(
        sample_rate_hz: f64,
        channels: Vec<f64>,
        peak_intervals: Vec<(usize, usize)>,
        exercise_id: impl Into<String>,
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        if !(sample_rate_hz > 0.0) {
            return Err(Error::Validation(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if channels.is_empty() || channels.len() % CHANNELS != 0 {
            return Err(Error::Validation(format!(
                "channel matrix must be a non-empty multiple of {CHANNELS} values, got {}",
                channels.len()
            )));
        }
        let len = channels.len() / CHANNELS;
        validate_intervals(&peak_intervals, len)?;
        Ok(SignalStream {
            sample_rate_hz,
            channels,
            peak_intervals,
            exercise_id: exercise_id.into(),
            subject_id: subject_id.into(),
        })
    }

    /// Number of samples L.
    pub fn len(&self) -> usize {
        self.channels.len() / CHANNELS
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// One sample as a 9-value row.
    pub fn sample(&self, index: usize) -> &[f64] {
        &self.channels[index * CHANNELS..(index + 1) * CHANNELS]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.channels.chunks_exact(CHANNELS)
    }

    pub fn peak_intervals(&self) -> &[(usize, usize)] {
        &self.peak_intervals
    }

    /// Annotated repetition count.
    pub fn rep_count(&self) -> usize {
        self.peak_intervals.len()
    }

    /// Truncate to the prefix containing exactly the first `n_peaks`
    /// annotated repetitions: the stream is cut just before peak n+1
    /// starts (or kept whole if it has exactly `n_peaks`). Used to derive
    /// a 5-rep registration stream from a longer recorded set.
    pub fn clip_to_first_peaks(&self, n_peaks: usize) -> Result<SignalStream> {
        if self.peak_intervals.len() < n_peaks {
            return Err(Error::InvalidArgument(format!(
                "stream has {} peaks, cannot clip to {n_peaks}",
                self.peak_intervals.len()
            )));
        }
        if self.peak_intervals.len() == n_peaks {
            return Ok(self.clone());
        }
        let cut = self.peak_intervals[n_peaks].0;
        SignalStream::new(
            self.sample_rate_hz,
            self.channels[..cut * CHANNELS].to_vec(),
            self.peak_intervals[..n_peaks].to_vec(),
            self.exercise_id.clone(),
            self.subject_id.clone(),
        )
    }
}

fn validate_intervals(intervals: &[(usize, usize)], len: usize) -> Result<()> {
    let mut prev_end = 0usize;
    for (i, &(start, end)) in intervals.iter().enumerate() {
        if start >= end {
            return Err(Error::Validation(format!(
                "peak interval {i} is empty or inverted: [{start}, {end})"
            )));
        }
        if end > len {
            return Err(Error::Validation(format!(
                "peak interval {i} [{start}, {end}) exceeds stream length {len}"
            )));
        }
        if i > 0 && start < prev_end {
            return Err(Error::Validation(format!(
                "peak interval {i} [{start}, {end}) overlaps or is unsorted (previous end {prev_end})"
            )));
        }
        prev_end = end;
    }
    Ok(())
}

/// Where a window came from, for labeling and audits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowOrigin {
    pub exercise_id: String,
    pub subject_id: String,
    pub start_index: usize,
}

/// A fixed-length slice of a stream, zero-padded to a shared buffer length.
///
/// Rows at index >= `valid_len` are exactly zero; `valid_len` is the
/// pre-padding window size.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Row-major [t_max x 9], zero beyond `valid_len` rows.
    data: Vec<f64>,
    pub valid_len: usize,
    pub label: Option<Label>,
    pub origin: WindowOrigin,
}

impl Window {
    pub fn new(data: Vec<f64>, valid_len: usize, origin: WindowOrigin) -> Result<Self> {
        if data.is_empty() || data.len() % CHANNELS != 0 {
            return Err(Error::Validation(
                "window buffer must be a non-empty multiple of 9 values".into(),
            ));
        }
        let t_max = data.len() / CHANNELS;
        if valid_len == 0 || valid_len > t_max {
            return Err(Error::Validation(format!(
                "valid_len {valid_len} outside [1, {t_max}]"
            )));
        }
        for (t, row) in data.chunks_exact(CHANNELS).enumerate().skip(valid_len) {
            if row.iter().any(|&v| v != 0.0) {
                return Err(Error::Validation(format!("padding row {t} is not zero")));
            }
        }
        Ok(Window {
            data,
            valid_len,
            label: None,
            origin,
        })
    }

    /// Padded buffer length T_max.
    pub fn t_max(&self) -> usize {
        self.data.len() / CHANNELS
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * CHANNELS..(t + 1) * CHANNELS]
    }

    /// Re-pad the same valid content to a different buffer length.
    pub fn repadded(&self, t_max: usize) -> Result<Window> {
        if t_max < self.valid_len {
            return Err(Error::InvalidArgument(format!(
                "t_max {t_max} smaller than valid_len {}",
                self.valid_len
            )));
        }
        let mut data = vec![0.0; t_max * CHANNELS];
        data[..self.valid_len * CHANNELS].copy_from_slice(&self.data[..self.valid_len * CHANNELS]);
        let mut w = Window::new(data, self.valid_len, self.origin.clone())?;
        w.label = self.label;
        Ok(w)
    }
}

/// Sliding-window parameters in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WindowParams {
    pub window_size: usize,
    pub stride: usize,
}

impl WindowParams {
    pub fn new(window_size: usize, stride: usize) -> Result<Self> {
        if window_size == 0 || stride == 0 {
            return Err(Error::Validation(
                "window size and stride must be positive".into(),
            ));
        }
        if stride > window_size {
            return Err(Error::Validation(format!(
                "stride {stride} exceeds window size {window_size}"
            )));
        }
        Ok(WindowParams {
            window_size,
            stride,
        })
    }
}

/// Per-exercise metadata used to pick sliding-window parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExerciseMeta {
    pub exercise_id: String,
    pub name: String,
    pub mean_rep_duration_s: f64,
    /// Per-exercise tuned parameters, when known; novel exercises fall back
    /// to [`window_params_for`].
    pub table_params: Option<WindowParams>,
}

impl ExerciseMeta {
    pub fn new(
        exercise_id: impl Into<String>,
        name: impl Into<String>,
        mean_rep_duration_s: f64,
    ) -> Result<Self> {
        if !(mean_rep_duration_s > 0.0) {
            return Err(Error::Validation(format!(
                "mean rep duration must be positive, got {mean_rep_duration_s}"
            )));
        }
        Ok(ExerciseMeta {
            exercise_id: exercise_id.into(),
            name: name.into(),
            mean_rep_duration_s,
            table_params: None,
        })
    }

    /// Window parameters to use for this exercise: the tuned table values
    /// when present, otherwise the duration rule.
    pub fn window_params(&self) -> Result<WindowParams> {
        match self.table_params {
            Some(p) => Ok(p),
            None => window_params_for(self.mean_rep_duration_s),
        }
    }
}

/// Duration rule for novel exercises: repetitions longer than 1.5 s get a
/// window of 100 samples with stride 50, shorter ones 50 with stride 25.
pub fn window_params_for(mean_rep_duration_s: f64) -> Result<WindowParams> {
    if !(mean_rep_duration_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rep duration must be positive, got {mean_rep_duration_s}"
        )));
    }
    if mean_rep_duration_s > 1.5 {
        WindowParams::new(100, 50)
    } else {
        WindowParams::new(50, 25)
    }
}

/// Segment `stream` into windows: the k-th window starts at k * stride and
/// holds `window_size` samples zero-padded to `t_max` rows. Trailing samples
/// that do not fill a whole window are dropped.
pub fn slide(stream: &SignalStream, params: &WindowParams, t_max: usize) -> Result<Vec<Window>> {
    let len = stream.len();
    if params.window_size > len {
        return Err(Error::InvalidArgument(format!(
            "window size {} exceeds stream length {len}: no windows can be produced",
            params.window_size
        )));
    }
    if t_max < params.window_size {
        return Err(Error::InvalidArgument(format!(
            "t_max {t_max} smaller than window size {}",
            params.window_size
        )));
    }
    let count = (len - params.window_size) / params.stride + 1;
    let mut windows = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * params.stride;
        let mut data = vec![0.0; t_max * CHANNELS];
        let src = &stream.channels[start * CHANNELS..(start + params.window_size) * CHANNELS];
        data[..src.len()].copy_from_slice(src);
        windows.push(Window::new(
            data,
            params.window_size,
            WindowOrigin {
                exercise_id: stream.exercise_id.clone(),
                subject_id: stream.subject_id.clone(),
                start_index: start,
            },
        )?);
    }
    Ok(windows)
}

/// Label a window peak iff its valid range overlaps some annotated peak
/// interval by at least `overlap_ratio` of that interval's length.
pub fn label_window(window: &Window, stream: &SignalStream, overlap_ratio: f64) -> Result<Label> {
    if !(overlap_ratio > 0.0 && overlap_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "overlap ratio must be in (0, 1], got {overlap_ratio}"
        )));
    }
    let start = window.origin.start_index;
    let end = start + window.valid_len;
    if end > stream.len() {
        return Err(Error::InvalidArgument(format!(
            "window [{start}, {end}) out of stream bounds (length {})",
            stream.len()
        )));
    }
    for &(ps, pe) in &stream.peak_intervals {
        let overlap = pe.min(end).saturating_sub(ps.max(start));
        if (overlap as f64) >= overlap_ratio * (pe - ps) as f64 {
            return Ok(Label::Peak);
        }
    }
    Ok(Label::NonPeak)
}

/// Default overlap ratio for peak labeling.
pub const DEFAULT_OVERLAP_RATIO: f64 = 0.5;

/// Slide and label in one pass.
pub fn labeled_windows(
    stream: &SignalStream,
    params: &WindowParams,
    t_max: usize,
    overlap_ratio: f64,
) -> Result<Vec<Window>> {
    let mut windows = slide(stream, params, t_max)?;
    for w in &mut windows {
        w.label = Some(label_window(w, stream, overlap_ratio)?);
    }
    Ok(windows)
}

/// Format a value with 9 significant digits, the stream-file precision.
pub(crate) fn format_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Serialize a stream to the text format:
/// a `#rate=..` header, one 9-value CSV line per sample (9 significant
/// digits), then one `#peak=start,end` line per annotated interval.
pub fn save_stream(stream: &SignalStream, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "#rate={},channels={CHANNELS},exercise={},subject={}",
        stream.sample_rate_hz, stream.exercise_id, stream.subject_id
    );
    for row in stream.samples() {
        let mut line = String::new();
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                line.push(',');
            }
            line.push_str(&format_sig9(*v));
        }
        out.push_str(&line);
        out.push('\n');
    }
    for &(s, e) in &stream.peak_intervals {
        let _ = writeln!(out, "#peak={s},{e}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a stream file written by [`save_stream`]. Errors name the 1-based
/// line where parsing failed.
pub fn load_stream(path: impl AsRef<Path>) -> Result<SignalStream> {
    let text = std::fs::read_to_string(path)?;
    parse_stream(&text)
}

pub fn parse_stream(text: &str) -> Result<SignalStream> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty file"))?;
    let (rate, exercise, subject) = parse_header(header)?;

    let mut channels = Vec::new();
    let mut intervals = Vec::new();
    let mut seen_peak = false;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#peak=") {
            seen_peak = true;
            let (s, e) = rest
                .split_once(',')
                .ok_or_else(|| Error::parse(lineno, "expected #peak=<start>,<end>"))?;
            let s: usize = s
                .trim()
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad peak start '{s}'")))?;
            let e: usize = e
                .trim()
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad peak end '{e}'")))?;
            intervals.push((s, e));
            continue;
        }
        if line.starts_with('#') {
            return Err(Error::parse(lineno, format!("unexpected directive '{line}'")));
        }
        if seen_peak {
            return Err(Error::parse(
                lineno,
                "sample line after annotation block",
            ));
        }
        let mut count = 0;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::parse(lineno, format!("bad sample value '{}'", field.trim()))
            })?;
            channels.push(v);
            count += 1;
        }
        if count != CHANNELS {
            return Err(Error::parse(
                lineno,
                format!("expected {CHANNELS} channel values, found {count}"),
            ));
        }
    }
    SignalStream::new(rate, channels, intervals, exercise, subject)
}

fn parse_header(header: &str) -> Result<(f64, String, String)> {
    let mut rate = None;
    let mut exercise = None;
    let mut subject = None;
    let body = header
        .strip_prefix('#')
        .ok_or_else(|| Error::parse(1, "header must start with '#rate=...'"))?;
    for field in body.split(',') {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::parse(1, format!("bad header field '{field}'")))?;
        match key.trim() {
            "rate" => {
                rate = Some(value.trim().parse::<f64>().map_err(|_| {
                    Error::parse(1, format!("bad sample rate '{}'", value.trim()))
                })?);
            }
            "channels" => {
                let n: usize = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(1, format!("bad channel count '{value}'")))?;
                if n != CHANNELS {
                    return Err(Error::parse(
                        1,
                        format!("expected {CHANNELS} channels, header declares {n}"),
                    ));
                }
            }
            "exercise" => exercise = Some(value.trim().to_string()),
            "subject" => subject = Some(value.trim().to_string()),
            other => return Err(Error::parse(1, format!("unknown header key '{other}'"))),
        }
    }
    Ok((
        rate.ok_or_else(|| Error::parse(1, "header missing rate"))?,
        exercise.ok_or_else(|| Error::parse(1, "header missing exercise id"))?,
        subject.ok_or_else(|| Error::parse(1, "header missing subject id"))?,
    ))
}

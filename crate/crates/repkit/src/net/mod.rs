//! The embedding network and its exact gradients.
//!
//! Pipeline per window: per-channel standardization of the valid rows,
//! then [1D conv (same padding) + ReLU -> dropout (train) -> max pool] per
//! block, a GRU over the valid timesteps only, global average pooling over
//! the valid steps, two fully-connected layers, and L2 normalization to a
//! unit embedding. Zero-padded timesteps are masked out of every stage: conv
//! outputs at padded positions are zeroed, pooling ignores padded inputs,
//! and the GRU and GAP never see them, so embeddings do not depend on how
//! much padding a window carries.
//!
//! All trainable parameters live in one flat `f64` buffer with a layout
//! derived from [`ModelConfig`]; gradients and optimizer state share that
//! layout, which keeps finite-difference checks, freezing, and persistence
//! straightforward.

mod backward;
mod forward;
mod io;

pub use backward::FreezeMask;
pub use forward::{ForwardTrace, Mode};
pub use io::{load_params, save_params};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::signal::CHANNELS;

/// Embedding vector (unit L2 norm).
pub type Embedding = Vec<f64>;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Conv blocks as (filters, kernel_size).
    pub conv_blocks: Vec<(usize, usize)>,
    pub dropout_p: f64,
    pub pool_size: usize,
    pub gru_hidden: usize,
    /// The two fully-connected layers; the second is the embedding dim.
    pub fc_dims: (usize, usize),
    /// Padded window buffer length.
    pub t_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv_blocks: vec![(32, 5), (64, 3)],
            dropout_p: 0.2,
            pool_size: 2,
            gru_hidden: 64,
            fc_dims: (64, 32),
            t_max: crate::signal::DEFAULT_T_MAX,
        }
    }
}

impl ModelConfig {
    /// A deliberately small configuration for gradient checking.
    pub fn tiny() -> Self {
        ModelConfig {
            conv_blocks: vec![(4, 3)],
            dropout_p: 0.2,
            pool_size: 2,
            gru_hidden: 4,
            fc_dims: (8, 4),
            t_max: 20,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.fc_dims.1
    }

    /// Smallest `valid_len` that survives every pooling stage.
    pub fn min_valid_len(&self) -> usize {
        self.pool_size.pow(self.conv_blocks.len() as u32)
    }

    fn validate(&self) -> Result<()> {
        if self.conv_blocks.is_empty() {
            return Err(Error::Validation("need at least one conv block".into()));
        }
        if self
            .conv_blocks
            .iter()
            .any(|&(f, k)| f == 0 || k == 0 || k % 2 == 0)
        {
            return Err(Error::Validation(
                "conv blocks need filters >= 1 and odd kernel size".into(),
            ));
        }
        if !(self.dropout_p >= 0.0 && self.dropout_p < 1.0) {
            return Err(Error::Validation(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.pool_size < 1 {
            return Err(Error::Validation("pool size must be >= 1".into()));
        }
        if self.gru_hidden == 0 || self.fc_dims.0 == 0 || self.fc_dims.1 == 0 {
            return Err(Error::Validation("layer widths must be positive".into()));
        }
        if self.t_max < self.min_valid_len() {
            return Err(Error::Validation(format!(
                "t_max {} shorter than the minimum pooled length {}",
                self.t_max,
                self.min_valid_len()
            )));
        }
        Ok(())
    }
}

/// Per-channel standardization statistics, fit on training data and stored
/// with the weights. Applied to valid rows only, so padding stays zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity() -> Self {
        ChannelStats {
            mean: vec![0.0; CHANNELS],
            std: vec![1.0; CHANNELS],
        }
    }

    /// Fit from the valid rows of a window set.
    pub fn fit(windows: &[crate::signal::Window]) -> Self {
        let mut sum = vec![0.0f64; CHANNELS];
        let mut sum_sq = vec![0.0f64; CHANNELS];
        let mut n = 0usize;
        for w in windows {
            for t in 0..w.valid_len {
                for (c, &v) in w.row(t).iter().enumerate() {
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
            n += w.valid_len;
        }
        if n == 0 {
            return ChannelStats::identity();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let var = (sq / n as f64 - m * m).max(0.0);
                var.sqrt().max(1e-6)
            })
            .collect();
        ChannelStats { mean, std }
    }
}

/// Offset and length of one tensor inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvSlots {
    /// Weights [filters][in_ch][kernel], flattened filter-major.
    pub w: Slot,
    pub b: Slot,
    pub filters: usize,
    pub in_ch: usize,
    pub kernel: usize,
}

/// One GRU gate: W [hidden x input], U [hidden x hidden], b [hidden].
#[derive(Debug, Clone)]
pub(crate) struct GateSlots {
    pub w: Slot,
    pub u: Slot,
    pub b: Slot,
}

#[derive(Debug, Clone)]
pub(crate) struct LinearSlots {
    /// Weights [out][in], row-major.
    pub w: Slot,
    pub b: Slot,
    pub out_dim: usize,
    pub in_dim: usize,
}

/// Flat-buffer layout of every trainable tensor, derived from the config.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub conv: Vec<ConvSlots>,
    pub update: GateSlots,
    pub reset: GateSlots,
    pub candidate: GateSlots,
    pub gru_input: usize,
    pub gru_hidden: usize,
    pub fc1: LinearSlots,
    pub fc2: LinearSlots,
    /// Sigmoid classification head used in phase-1 training only.
    pub head: LinearSlots,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let mut cursor = 0usize;
        let mut slot = |len: usize| {
            let s = Slot {
                offset: cursor,
                len,
            };
            cursor += len;
            s
        };

        let mut conv = Vec::new();
        let mut in_ch = CHANNELS;
        for &(filters, kernel) in &cfg.conv_blocks {
            conv.push(ConvSlots {
                w: slot(filters * in_ch * kernel),
                b: slot(filters),
                filters,
                in_ch,
                kernel,
            });
            in_ch = filters;
        }
        let gru_input = in_ch;
        let h = cfg.gru_hidden;
        let mut gate = |inp: usize| GateSlots {
            w: slot(h * inp),
            u: slot(h * h),
            b: slot(h),
        };
        let update = gate(gru_input);
        let reset = gate(gru_input);
        let candidate = gate(gru_input);

        let fc1 = LinearSlots {
            w: slot(cfg.fc_dims.0 * h),
            b: slot(cfg.fc_dims.0),
            out_dim: cfg.fc_dims.0,
            in_dim: h,
        };
        let fc2 = LinearSlots {
            w: slot(cfg.fc_dims.1 * cfg.fc_dims.0),
            b: slot(cfg.fc_dims.1),
            out_dim: cfg.fc_dims.1,
            in_dim: cfg.fc_dims.0,
        };
        let head = LinearSlots {
            w: slot(cfg.fc_dims.1),
            b: slot(1),
            out_dim: 1,
            in_dim: cfg.fc_dims.1,
        };

        Layout {
            conv,
            update,
            reset,
            candidate,
            gru_input,
            gru_hidden: h,
            fc1,
            fc2,
            head,
            total: cursor,
        }
    }

    /// Ranges covered by each freezable group, in buffer order.
    pub fn conv_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.conv
            .iter()
            .flat_map(|c| [c.w.range(), c.b.range()])
            .collect()
    }

    pub fn gru_ranges(&self) -> Vec<std::ops::Range<usize>> {
        [&self.update, &self.reset, &self.candidate]
            .iter()
            .flat_map(|g| [g.w.range(), g.u.range(), g.b.range()])
            .collect()
    }
}

/// All weights of the network plus the classification head and the
/// standardization statistics.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    pub norm: ChannelStats,
    values: Vec<f64>,
    pub(crate) layout: Layout,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.norm == other.norm && self.values == other.values
    }
}

impl ModelParams {
    /// Initialize with uniform fan-in/fan-out scaling (Glorot bounds),
    /// biases at zero, identity normalization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut values = vec![0.0f64; layout.total];
        let mut rng = SplitMix64::new(seed);
        let mut fill = |slot: Slot, fan_in: usize, fan_out: usize, values: &mut Vec<f64>| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut values[slot.range()] {
                *v = rng.uniform(-bound, bound);
            }
        };

        for c in &layout.conv {
            fill(c.w, c.in_ch * c.kernel, c.filters * c.kernel, &mut values);
        }
        let h = layout.gru_hidden;
        let i = layout.gru_input;
        for gate in [&layout.update, &layout.reset, &layout.candidate] {
            fill(gate.w, i, h, &mut values);
            fill(gate.u, h, h, &mut values);
        }
        fill(layout.fc1.w, layout.fc1.in_dim, layout.fc1.out_dim, &mut values);
        fill(layout.fc2.w, layout.fc2.in_dim, layout.fc2.out_dim, &mut values);
        fill(layout.head.w, layout.head.in_dim, 1, &mut values);

        Ok(ModelParams {
            config,
            norm: ChannelStats::identity(),
            values,
            layout,
        })
    }

    /// Rebuild from raw parts (used by the loader). Validates the length.
    pub(crate) fn from_parts(
        config: ModelConfig,
        norm: ChannelStats,
        values: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if values.len() != layout.total {
            return Err(Error::Load(format!(
                "parameter count mismatch: config expects {}, found {}",
                layout.total,
                values.len()
            )));
        }
        if norm.mean.len() != CHANNELS || norm.std.len() != CHANNELS {
            return Err(Error::Load("normalization stats must cover 9 channels".into()));
        }
        Ok(ModelParams {
            config,
            norm,
            values,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same weights viewed with a different padded buffer length.
    pub fn with_t_max(&self, t_max: usize) -> Result<Self> {
        let mut config = self.config.clone();
        config.t_max = t_max;
        ModelParams::from_parts(config, self.norm.clone(), self.values.clone())
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    /// Flat parameter buffer. Exposed for optimizers and gradient checks.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub(crate) fn slice(&self, slot: Slot) -> &[f64] {
        &self.values[slot.range()]
    }

    /// Weight of the sigmoid head (dimension = embedding dim).
    pub fn head_weight(&self) -> &[f64] {
        self.slice(self.layout.head.w)
    }

    pub fn head_bias(&self) -> f64 {
        self.values[self.layout.head.b.offset]
    }

    pub fn set_head(&mut self, weight: &[f64], bias: f64) {
        let w = self.layout.head.w;
        self.values[w.range()].copy_from_slice(weight);
        self.values[self.layout.head.b.offset] = bias;
    }

    /// Sigmoid classification probability for an embedding.
    pub fn head_forward(&self, embedding: &[f64]) -> Result<f64> {
        let w = self.slice(self.layout.head.w);
        if embedding.len() != w.len() {
            return Err(Error::InvalidInput(format!(
                "embedding dim {} does not match head dim {}",
                embedding.len(),
                w.len()
            )));
        }
        let z: f64 = w.iter().zip(embedding).map(|(a, b)| a * b).sum::<f64>() + self.head_bias();
        Ok(sigmoid(z))
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Gradient buffer sharing the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(params: &ModelParams) -> Self {
        Gradients {
            values: vec![0.0; params.param_count()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn slice_mut(&mut self, slot: Slot) -> &mut [f64] {
        &mut self.values[slot.range()]
    }

    /// Accumulate the head gradient for one sample: `delta` is
    /// d(loss)/d(pre-sigmoid logit).
    pub fn add_head(&mut self, params: &ModelParams, embedding: &[f64], delta: f64) {
        let w = params.layout.head.w;
        for (g, e) in self.values[w.range()].iter_mut().zip(embedding) {
            *g += delta * e;
        }
        self.values[params.layout.head.b.offset] += delta;
    }
}

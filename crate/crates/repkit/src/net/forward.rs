//! Forward pass with padding masks and the cached activations needed for
//! exact gradients.

use super::{sigmoid, Embedding, ModelParams};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::signal::{Window, CHANNELS};

/// Train mode applies (inverted) dropout from the given seed; eval mode is
/// deterministic with no dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Cached per-layer state from one forward call, sufficient to reproduce the
/// output and to compute exact parameter gradients.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) mode: Mode,
    /// Standardized input, channel-major [9][t_max]; padded columns zero.
    pub(crate) input: Vec<f64>,
    pub(crate) input_valid: usize,
    pub(crate) blocks: Vec<BlockTrace>,
    pub(crate) gru: GruTrace,
    /// Valid sequence steps seen by the GRU and GAP.
    pub(crate) valid_steps: usize,
    pub(crate) gap: Vec<f64>,
    pub(crate) fc1_pre: Vec<f64>,
    pub(crate) fc1_out: Vec<f64>,
    /// L2 norm of the pre-normalization output y (y = norm * embedding).
    pub(crate) norm: f64,
    pub(crate) embedding: Vec<f64>,
}

impl ForwardTrace {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockTrace {
    pub in_len: usize,
    pub in_valid: usize,
    /// Conv output before ReLU, channel-major [filters][in_len]; masked
    /// (padded) columns forced to zero.
    pub pre: Vec<f64>,
    /// Inverted-dropout scale per element (train mode only).
    pub dropout: Option<Vec<f64>>,
    /// Absolute input index feeding each pooled output, usize::MAX where the
    /// pooled step is fully masked.
    pub argmax: Vec<usize>,
    /// Pooled activations [filters][out_len]; masked columns zero.
    pub out: Vec<f64>,
    pub out_len: usize,
    pub out_valid: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct GruTrace {
    /// Gathered inputs, step-major [valid_steps][input_dim].
    pub xs: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
    pub h: Vec<f64>,
    /// Candidate recurrent product U_n * h_prev per step.
    pub uh: Vec<f64>,
}

pub(crate) fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

pub(crate) fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// out[c] += W^T dy, i.e. out[j] += sum_r w[r][j] * v[r].
pub(crate) fn matvec_transpose_acc(
    w: &[f64],
    rows: usize,
    cols: usize,
    v: &[f64],
    out: &mut [f64],
) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let vr = v[r];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += wv * vr;
        }
    }
}

/// Same-padding 1D convolution over the full buffer, channel-major layout.
pub(crate) fn conv1d(
    x: &[f64],
    in_ch: usize,
    len: usize,
    w: &[f64],
    b: &[f64],
    filters: usize,
    kernel: usize,
    out: &mut [f64],
) {
    let pad = (kernel - 1) / 2;
    for f in 0..filters {
        let orow = &mut out[f * len..(f + 1) * len];
        orow.fill(b[f]);
        for c in 0..in_ch {
            let xrow = &x[c * len..(c + 1) * len];
            let wbase = (f * in_ch + c) * kernel;
            for j in 0..kernel {
                let wj = w[wbase + j];
                let shift = j as isize - pad as isize;
                let t_lo = (-shift).max(0) as usize;
                let t_hi = ((len as isize - shift).min(len as isize)).max(0) as usize;
                for t in t_lo..t_hi {
                    orow[t] += wj * xrow[(t as isize + shift) as usize];
                }
            }
        }
    }
}

impl ModelParams {
    /// Embed one padded window. Returns the unit-norm embedding and the
    /// trace needed by [`ModelParams::backward`].
    pub fn forward(
        &self,
        window: &Window,
        mode: Mode,
        rng_seed: u64,
    ) -> Result<(Embedding, ForwardTrace)> {
        let cfg = self.config();
        if window.t_max() != cfg.t_max {
            return Err(Error::InvalidInput(format!(
                "window buffer length {} does not match model t_max {}",
                window.t_max(),
                cfg.t_max
            )));
        }
        if window.valid_len < cfg.min_valid_len() {
            return Err(Error::InvalidInput(format!(
                "valid_len {} shorter than the minimum {} surviving {} pooling stages",
                window.valid_len,
                cfg.min_valid_len(),
                cfg.conv_blocks.len()
            )));
        }

        // Standardize valid rows into channel-major layout; padding stays 0.
        let t0 = cfg.t_max;
        let mut input = vec![0.0f64; CHANNELS * t0];
        for t in 0..window.valid_len {
            let row = window.row(t);
            for c in 0..CHANNELS {
                input[c * t0 + t] = (row[c] - self.norm.mean[c]) / self.norm.std[c];
            }
        }

        let mut rng = SplitMix64::new(rng_seed);
        let pool = cfg.pool_size;
        let mut blocks: Vec<BlockTrace> = Vec::with_capacity(self.layout.conv.len());
        let mut cur_len = t0;
        let mut cur_valid = window.valid_len;

        for (bi, conv) in self.layout.conv.iter().enumerate() {
            let x = if bi == 0 {
                &input
            } else {
                &blocks[bi - 1].out
            };
            let filters = conv.filters;
            let mut pre = vec![0.0f64; filters * cur_len];
            conv1d(
                x,
                conv.in_ch,
                cur_len,
                self.slice(conv.w),
                self.slice(conv.b),
                filters,
                conv.kernel,
                &mut pre,
            );
            // Mask: padded positions contribute nothing downstream.
            for f in 0..filters {
                for t in cur_valid..cur_len {
                    pre[f * cur_len + t] = 0.0;
                }
            }

            // ReLU then inverted dropout.
            let mut act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
            let dropout = if mode == Mode::Train && cfg.dropout_p > 0.0 {
                let keep_scale = 1.0 / (1.0 - cfg.dropout_p);
                let mask: Vec<f64> = (0..act.len())
                    .map(|_| {
                        if rng.next_f64() < cfg.dropout_p {
                            0.0
                        } else {
                            keep_scale
                        }
                    })
                    .collect();
                for (a, m) in act.iter_mut().zip(&mask) {
                    *a *= m;
                }
                Some(mask)
            } else {
                None
            };

            // Max pool over unmasked inputs only; a pooled step is masked
            // (zero, no argmax) iff all its inputs are padding.
            let out_len = cur_len / pool;
            let out_valid = (cur_valid.div_ceil(pool)).min(out_len);
            let mut out = vec![0.0f64; filters * out_len];
            let mut argmax = vec![usize::MAX; filters * out_len];
            for f in 0..filters {
                let arow = &act[f * cur_len..(f + 1) * cur_len];
                for j in 0..out_valid {
                    let lo = j * pool;
                    let hi = ((j + 1) * pool).min(cur_valid);
                    let mut best = lo;
                    for t in lo + 1..hi {
                        if arow[t] > arow[best] {
                            best = t;
                        }
                    }
                    out[f * out_len + j] = arow[best];
                    argmax[f * out_len + j] = best;
                }
            }

            blocks.push(BlockTrace {
                in_len: cur_len,
                in_valid: cur_valid,
                pre,
                dropout,
                argmax,
                out,
                out_len,
                out_valid,
            });
            cur_len = out_len;
            cur_valid = out_valid;
        }

        // GRU over the valid steps only.
        let seq = &blocks.last().expect("at least one conv block").out;
        let i_dim = self.layout.gru_input;
        let h_dim = self.layout.gru_hidden;
        let steps = cur_valid;
        let mut xs = vec![0.0f64; steps * i_dim];
        for t in 0..steps {
            for c in 0..i_dim {
                xs[t * i_dim + c] = seq[c * cur_len + t];
            }
        }

        let (wz, uz, bz) = (
            self.slice(self.layout.update.w),
            self.slice(self.layout.update.u),
            self.slice(self.layout.update.b),
        );
        let (wr, ur, br) = (
            self.slice(self.layout.reset.w),
            self.slice(self.layout.reset.u),
            self.slice(self.layout.reset.b),
        );
        let (wn, un, bn) = (
            self.slice(self.layout.candidate.w),
            self.slice(self.layout.candidate.u),
            self.slice(self.layout.candidate.b),
        );

        let mut gru = GruTrace {
            xs,
            z: vec![0.0; steps * h_dim],
            r: vec![0.0; steps * h_dim],
            n: vec![0.0; steps * h_dim],
            h: vec![0.0; steps * h_dim],
            uh: vec![0.0; steps * h_dim],
        };
        let mut h_prev = vec![0.0f64; h_dim];
        let mut buf = vec![0.0f64; h_dim];
        for t in 0..steps {
            let x_t = &gru.xs[t * i_dim..(t + 1) * i_dim];
            let base = t * h_dim;

            matvec(wz, h_dim, i_dim, x_t, &mut buf);
            matvec_acc(uz, h_dim, h_dim, &h_prev, &mut buf);
            for i in 0..h_dim {
                gru.z[base + i] = sigmoid(buf[i] + bz[i]);
            }

            matvec(wr, h_dim, i_dim, x_t, &mut buf);
            matvec_acc(ur, h_dim, h_dim, &h_prev, &mut buf);
            for i in 0..h_dim {
                gru.r[base + i] = sigmoid(buf[i] + br[i]);
            }

            matvec(un, h_dim, h_dim, &h_prev, &mut gru.uh[base..base + h_dim]);
            matvec(wn, h_dim, i_dim, x_t, &mut buf);
            for i in 0..h_dim {
                gru.n[base + i] =
                    (buf[i] + gru.r[base + i] * gru.uh[base + i] + bn[i]).tanh();
            }

            for i in 0..h_dim {
                gru.h[base + i] = (1.0 - gru.z[base + i]) * gru.n[base + i]
                    + gru.z[base + i] * h_prev[i];
            }
            h_prev.copy_from_slice(&gru.h[base..base + h_dim]);
        }

        // Global average pool over valid steps.
        let mut gap = vec![0.0f64; h_dim];
        for t in 0..steps {
            for i in 0..h_dim {
                gap[i] += gru.h[t * h_dim + i];
            }
        }
        for v in &mut gap {
            *v /= steps as f64;
        }

        // FC1 + ReLU, FC2, L2 normalization.
        let fc1 = &self.layout.fc1;
        let mut fc1_pre = vec![0.0f64; fc1.out_dim];
        matvec(self.slice(fc1.w), fc1.out_dim, fc1.in_dim, &gap, &mut fc1_pre);
        for (v, b) in fc1_pre.iter_mut().zip(self.slice(fc1.b)) {
            *v += b;
        }
        let fc1_out: Vec<f64> = fc1_pre.iter().map(|&v| v.max(0.0)).collect();

        let fc2 = &self.layout.fc2;
        let mut fc2_out = vec![0.0f64; fc2.out_dim];
        matvec(self.slice(fc2.w), fc2.out_dim, fc2.in_dim, &fc1_out, &mut fc2_out);
        for (v, b) in fc2_out.iter_mut().zip(self.slice(fc2.b)) {
            *v += b;
        }

        let norm = fc2_out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-30 {
            return Err(Error::InvalidInput(format!(
                "degenerate embedding norm {norm}"
            )));
        }
        let embedding: Vec<f64> = fc2_out.iter().map(|v| v / norm).collect();

        let trace = ForwardTrace {
            mode,
            input,
            input_valid: window.valid_len,
            blocks,
            gru,
            valid_steps: steps,
            gap,
            fc1_pre,
            fc1_out,
            norm,
            embedding: embedding.clone(),
        };
        Ok((embedding, trace))
    }
}

//! Exact reverse-mode gradients through the full pipeline: L2 normalization,
//! the FC stack, masked GAP, the GRU recurrence, max-pool argmax routing,
//! dropout, ReLU, and the same-padding convolutions.

use super::forward::{matvec_transpose_acc, ForwardTrace, Mode};
use super::{Gradients, ModelParams};
use crate::error::{Error, Result};

/// Parameter groups excluded from gradient flow. Frozen groups get exactly
/// zero gradients, so optimizers without weight decay leave them untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeMask {
    pub conv: bool,
    pub gru: bool,
    pub fc1: bool,
    pub fc2: bool,
    pub head: bool,
}

impl FreezeMask {
    pub fn none() -> Self {
        FreezeMask {
            conv: false,
            gru: false,
            fc1: false,
            fc2: false,
            head: false,
        }
    }

    /// The fine-tuning mask: only the two fully-connected layers train.
    pub fn all_but_fc() -> Self {
        FreezeMask {
            conv: true,
            gru: true,
            fc1: false,
            fc2: false,
            head: true,
        }
    }

    /// Zero the gradient entries of every frozen group.
    pub fn apply(&self, params: &ModelParams, grads: &mut Gradients) {
        let layout = &params.layout;
        let mut ranges = Vec::new();
        if self.conv {
            ranges.extend(layout.conv_ranges());
        }
        if self.gru {
            ranges.extend(layout.gru_ranges());
        }
        if self.fc1 {
            ranges.extend([layout.fc1.w.range(), layout.fc1.b.range()]);
        }
        if self.fc2 {
            ranges.extend([layout.fc2.w.range(), layout.fc2.b.range()]);
        }
        if self.head {
            ranges.extend([layout.head.w.range(), layout.head.b.range()]);
        }
        let values = grads.values_mut();
        for r in ranges {
            for v in &mut values[r] {
                *v = 0.0;
            }
        }
    }
}

impl ModelParams {
    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient `upstream` with respect to the embedding. Head
    /// parameters receive zero here (the head is not on the embedding path);
    /// phase-1 training adds them via [`Gradients::add_head`].
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
        freeze: Option<&FreezeMask>,
    ) -> Result<Gradients> {
        let mut grads = Gradients::zeros(self);
        self.backward_into(trace, upstream, &mut grads)?;
        if let Some(mask) = freeze {
            mask.apply(self, &mut grads);
        }
        Ok(grads)
    }

    /// As [`ModelParams::backward`] but accumulating into an existing buffer
    /// (fixed reduction order across a batch).
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        let cfg = self.config();
        let layout = &self.layout;
        if trace.blocks.len() != layout.conv.len()
            || trace.input.len() != crate::signal::CHANNELS * cfg.t_max
            || trace.input_valid > cfg.t_max
        {
            return Err(Error::InvalidInput(
                "forward trace does not match this model's configuration".into(),
            ));
        }
        // Valid lengths must chain through the downsampling stages.
        let mut expect_valid = trace.input_valid;
        for bt in &trace.blocks {
            if bt.in_valid != expect_valid {
                return Err(Error::InvalidInput(
                    "forward trace valid lengths are inconsistent".into(),
                ));
            }
            expect_valid = bt.out_valid;
        }
        if expect_valid != trace.valid_steps {
            return Err(Error::InvalidInput(
                "forward trace valid lengths are inconsistent".into(),
            ));
        }
        if upstream.len() != cfg.embedding_dim() {
            return Err(Error::InvalidInput(format!(
                "upstream gradient dim {} does not match embedding dim {}",
                upstream.len(),
                cfg.embedding_dim()
            )));
        }
        if grads.values().len() != self.param_count() {
            return Err(Error::InvalidInput(
                "gradient buffer does not match parameter count".into(),
            ));
        }

        // L2 normalization: e = y / |y|, de/dy = (I - e e^T) / |y|.
        let e = &trace.embedding;
        let dot: f64 = e.iter().zip(upstream).map(|(a, b)| a * b).sum();
        let dy: Vec<f64> = upstream
            .iter()
            .zip(e)
            .map(|(u, ei)| (u - ei * dot) / trace.norm)
            .collect();

        // FC2.
        let fc2 = &layout.fc2;
        let mut dfc1_out = vec![0.0f64; fc2.in_dim];
        {
            let w = fc2.w;
            let gw = grads.slice_mut(w);
            for o in 0..fc2.out_dim {
                let row = &mut gw[o * fc2.in_dim..(o + 1) * fc2.in_dim];
                for (g, x) in row.iter_mut().zip(&trace.fc1_out) {
                    *g += dy[o] * x;
                }
            }
            for (g, d) in grads.slice_mut(fc2.b).iter_mut().zip(&dy) {
                *g += d;
            }
            matvec_transpose_acc(self.slice(w), fc2.out_dim, fc2.in_dim, &dy, &mut dfc1_out);
        }

        // FC1 with ReLU.
        let fc1 = &layout.fc1;
        let dfc1_pre: Vec<f64> = dfc1_out
            .iter()
            .zip(&trace.fc1_pre)
            .map(|(d, p)| if *p > 0.0 { *d } else { 0.0 })
            .collect();
        let mut dgap = vec![0.0f64; fc1.in_dim];
        {
            let gw = grads.slice_mut(fc1.w);
            for o in 0..fc1.out_dim {
                let row = &mut gw[o * fc1.in_dim..(o + 1) * fc1.in_dim];
                for (g, x) in row.iter_mut().zip(&trace.gap) {
                    *g += dfc1_pre[o] * x;
                }
            }
            for (g, d) in grads.slice_mut(fc1.b).iter_mut().zip(&dfc1_pre) {
                *g += d;
            }
            matvec_transpose_acc(
                self.slice(fc1.w),
                fc1.out_dim,
                fc1.in_dim,
                &dfc1_pre,
                &mut dgap,
            );
        }

        // GRU backward through time, fed by the GAP average.
        let h_dim = layout.gru_hidden;
        let i_dim = layout.gru_input;
        let steps = trace.valid_steps;
        let gap_share: Vec<f64> = dgap.iter().map(|d| d / steps as f64).collect();

        let gru = &trace.gru;
        let (wz, uz) = (self.slice(layout.update.w), self.slice(layout.update.u));
        let (wr, ur) = (self.slice(layout.reset.w), self.slice(layout.reset.u));
        let (wn, un) = (self.slice(layout.candidate.w), self.slice(layout.candidate.u));

        let mut dxs = vec![0.0f64; steps * i_dim];
        let mut dh_next = vec![0.0f64; h_dim];
        let zeros = vec![0.0f64; h_dim];
        let mut daz = vec![0.0f64; h_dim];
        let mut dar = vec![0.0f64; h_dim];
        let mut dan = vec![0.0f64; h_dim];
        let mut duh = vec![0.0f64; h_dim];
        let mut dh_prev = vec![0.0f64; h_dim];

        for t in (0..steps).rev() {
            let base = t * h_dim;
            let x_t = &gru.xs[t * i_dim..(t + 1) * i_dim];
            let h_prev: &[f64] = if t == 0 {
                &zeros
            } else {
                &gru.h[(t - 1) * h_dim..t * h_dim]
            };

            dh_prev.fill(0.0);
            for i in 0..h_dim {
                let dh = dh_next[i] + gap_share[i];
                let z = gru.z[base + i];
                let r = gru.r[base + i];
                let n = gru.n[base + i];
                let uh = gru.uh[base + i];

                // h = (1 - z) * n + z * h_prev
                let dz = dh * (h_prev[i] - n);
                let dn = dh * (1.0 - z);
                dh_prev[i] += dh * z;

                dan[i] = dn * (1.0 - n * n);
                duh[i] = dan[i] * r;
                dar[i] = dan[i] * uh * r * (1.0 - r);
                daz[i] = dz * z * (1.0 - z);
            }

            let dx_t = &mut dxs[t * i_dim..(t + 1) * i_dim];
            // Candidate gate: an = Wn x + r * (Un h_prev) + bn.
            accumulate_gate(
                grads,
                layout.candidate.w,
                layout.candidate.b,
                &dan,
                x_t,
                i_dim,
            );
            accumulate_outer(grads, layout.candidate.u, &duh, h_prev, h_dim);
            matvec_transpose_acc(wn, h_dim, i_dim, &dan, dx_t);
            matvec_transpose_acc(un, h_dim, h_dim, &duh, &mut dh_prev);

            // Reset gate: ar = Wr x + Ur h_prev + br.
            accumulate_gate(grads, layout.reset.w, layout.reset.b, &dar, x_t, i_dim);
            accumulate_outer(grads, layout.reset.u, &dar, h_prev, h_dim);
            matvec_transpose_acc(wr, h_dim, i_dim, &dar, dx_t);
            matvec_transpose_acc(ur, h_dim, h_dim, &dar, &mut dh_prev);

            // Update gate: az = Wz x + Uz h_prev + bz.
            accumulate_gate(grads, layout.update.w, layout.update.b, &daz, x_t, i_dim);
            accumulate_outer(grads, layout.update.u, &daz, h_prev, h_dim);
            matvec_transpose_acc(wz, h_dim, i_dim, &daz, dx_t);
            matvec_transpose_acc(uz, h_dim, h_dim, &daz, &mut dh_prev);

            std::mem::swap(&mut dh_next, &mut dh_prev);
        }

        // Scatter step gradients back onto the final conv block's grid.
        let last = trace.blocks.last().expect("at least one block");
        let mut dout = vec![0.0f64; layout.conv.last().unwrap().filters * last.out_len];
        for t in 0..steps {
            for c in 0..i_dim {
                dout[c * last.out_len + t] = dxs[t * i_dim + c];
            }
        }

        // Conv blocks in reverse.
        for bi in (0..trace.blocks.len()).rev() {
            let bt = &trace.blocks[bi];
            let conv = &layout.conv[bi];
            let filters = conv.filters;
            let in_len = bt.in_len;

            // Pool: route each pooled gradient to its argmax input.
            let mut dact = vec![0.0f64; filters * in_len];
            for f in 0..filters {
                for j in 0..bt.out_len {
                    let src = bt.argmax[f * bt.out_len + j];
                    if src != usize::MAX {
                        dact[f * in_len + src] += dout[f * bt.out_len + j];
                    }
                }
            }

            // Dropout.
            if let Some(mask) = &bt.dropout {
                debug_assert_eq!(trace.mode, Mode::Train);
                for (d, m) in dact.iter_mut().zip(mask) {
                    *d *= m;
                }
            }

            // ReLU over the masked pre-activation: padded positions hold
            // exactly zero there, so their gradient dies here as well.
            let dpre: Vec<f64> = dact
                .iter()
                .zip(&bt.pre)
                .map(|(d, p)| if *p > 0.0 { *d } else { 0.0 })
                .collect();

            // Conv parameter gradients and (except for the first block) the
            // input gradient.
            let x: &[f64] = if bi == 0 {
                &trace.input
            } else {
                &trace.blocks[bi - 1].out
            };
            let pad = (conv.kernel - 1) / 2;
            {
                let gw = grads.slice_mut(conv.w);
                for f in 0..filters {
                    let drow = &dpre[f * in_len..(f + 1) * in_len];
                    for c in 0..conv.in_ch {
                        let xrow = &x[c * in_len..(c + 1) * in_len];
                        let wbase = (f * conv.in_ch + c) * conv.kernel;
                        for j in 0..conv.kernel {
                            let shift = j as isize - pad as isize;
                            let t_lo = (-shift).max(0) as usize;
                            let t_hi = ((in_len as isize - shift).min(in_len as isize)).max(0)
                                as usize;
                            let mut acc = 0.0;
                            for t in t_lo..t_hi {
                                acc += drow[t] * xrow[(t as isize + shift) as usize];
                            }
                            gw[wbase + j] += acc;
                        }
                    }
                }
            }
            {
                let gb = grads.slice_mut(conv.b);
                for f in 0..filters {
                    gb[f] += dpre[f * in_len..(f + 1) * in_len].iter().sum::<f64>();
                }
            }

            if bi > 0 {
                let w = self.slice(conv.w);
                let mut dx = vec![0.0f64; conv.in_ch * in_len];
                for f in 0..filters {
                    let drow = &dpre[f * in_len..(f + 1) * in_len];
                    for c in 0..conv.in_ch {
                        let dxrow = &mut dx[c * in_len..(c + 1) * in_len];
                        let wbase = (f * conv.in_ch + c) * conv.kernel;
                        for j in 0..conv.kernel {
                            let wj = w[wbase + j];
                            let shift = j as isize - pad as isize;
                            let t_lo = (-shift).max(0) as usize;
                            let t_hi = ((in_len as isize - shift).min(in_len as isize)).max(0)
                                as usize;
                            for t in t_lo..t_hi {
                                dxrow[(t as isize + shift) as usize] += wj * drow[t];
                            }
                        }
                    }
                }
                // The block input was masked in forward; gradients into the
                // padded region must not flow further back.
                for c in 0..conv.in_ch {
                    for t in bt.in_valid..in_len {
                        dx[c * in_len + t] = 0.0;
                    }
                }
                dout = dx;
            }
        }

        Ok(())
    }
}

/// dW[o][i] += d[o] * x[i] and db[o] += d[o].
fn accumulate_gate(
    grads: &mut Gradients,
    w: super::Slot,
    b: super::Slot,
    d: &[f64],
    x: &[f64],
    in_dim: usize,
) {
    {
        let gw = grads.slice_mut(w);
        for (o, dv) in d.iter().enumerate() {
            let row = &mut gw[o * in_dim..(o + 1) * in_dim];
            for (g, xv) in row.iter_mut().zip(x) {
                *g += dv * xv;
            }
        }
    }
    for (g, dv) in grads.slice_mut(b).iter_mut().zip(d) {
        *g += dv;
    }
}

/// dU[o][i] += d[o] * h[i].
fn accumulate_outer(grads: &mut Gradients, u: super::Slot, d: &[f64], h: &[f64], dim: usize) {
    let gu = grads.slice_mut(u);
    for (o, dv) in d.iter().enumerate() {
        let row = &mut gu[o * dim..(o + 1) * dim];
        for (g, hv) in row.iter_mut().zip(h) {
            *g += dv * hv;
        }
    }
}

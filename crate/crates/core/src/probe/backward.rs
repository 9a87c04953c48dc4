//! Backward sweep that reduces every projection gradient to a Frobenius
//! norm as it goes. One scratch buffer holds the group currently being
//! accumulated; no other gradient tensor is ever materialized.

use super::forward::{dot, forward_cache, matvec_t_acc, rope, silu, silu_prime};
use super::{GradientVector, ProbeError, ProbeModel, Trajectory};

/// grad[o * in_dim + i] += sum_t d[t][o] * x[t][i]
fn accumulate_outer(
    grad: &mut [f64],
    d: &[f64],
    x: &[f64],
    len: usize,
    out_dim: usize,
    in_dim: usize,
) {
    for t in 0..len {
        let dr = &d[t * out_dim..(t + 1) * out_dim];
        let xr = &x[t * in_dim..(t + 1) * in_dim];
        for (o, &dv) in dr.iter().enumerate() {
            let row = &mut grad[o * in_dim..(o + 1) * in_dim];
            for (g, &xv) in row.iter_mut().zip(xr) {
                *g += dv * xv;
            }
        }
    }
}

/// dx += inv_rms * (dy .* gain) - inv_rms^3 / n * ((dy .* gain) . x) * x
fn rmsnorm_bwd_acc(
    dy: &[f64],
    x: &[f64],
    gain: &[f64],
    inv_rms: f64,
    dx: &mut [f64],
    u: &mut [f64],
) {
    for ((ui, &d), &g) in u.iter_mut().zip(dy).zip(gain) {
        *ui = d * g;
    }
    let c = dot(u, x);
    let k = inv_rms * inv_rms * inv_rms / x.len() as f64 * c;
    for ((out, &ui), &xi) in dx.iter_mut().zip(u.iter()).zip(x) {
        *out += inv_rms * ui - k * xi;
    }
}

struct GroupSink {
    norms: Vec<f64>,
    scratch: Vec<f64>,
    capture_slot: Option<usize>,
    captured: Option<Vec<f64>>,
}

impl GroupSink {
    fn new(groups: usize, scratch_len: usize, capture_slot: Option<usize>) -> Self {
        GroupSink {
            norms: vec![0.0; groups],
            scratch: vec![0.0; scratch_len],
            capture_slot,
            captured: None,
        }
    }

    /// Norm of the freshly accumulated group, then the buffer is wiped for
    /// the next one.
    fn finish(&mut self, slot: usize, size: usize) {
        let used = &mut self.scratch[..size];
        let mut sumsq = 0.0;
        for &g in used.iter() {
            sumsq += g * g;
        }
        self.norms[slot] = sumsq.sqrt();
        if self.capture_slot == Some(slot) {
            self.captured = Some(used.to_vec());
        }
        used.fill(0.0);
    }
}

fn backward(
    model: &ProbeModel,
    trajectory: &Trajectory,
    multiplier: f64,
    capture_slot: Option<usize>,
) -> Result<(GradientVector, Option<Vec<f64>>), ProbeError> {
    let cache = forward_cache(model, trajectory)?;
    let len = cache.len;
    let dim = model.config.model_dim;
    let heads = model.config.num_heads;
    let hd = dim / heads;
    let ffn = model.config.ffn_hidden_dim;
    let vocab = model.config.vocab_size;

    let mut sink = GroupSink::new(model.num_groups(), (dim * dim).max(ffn * dim), capture_slot);
    let mut u = vec![0.0; dim];

    // seed: d loss / d x_final via unembedding and final norm
    let mut d_x = vec![0.0; len * dim];
    let m = cache.loss_positions.len() as f64;
    let mut d_logits = vec![0.0; vocab];
    let mut d_normed = vec![0.0; dim];
    for (li, &pos) in cache.loss_positions.iter().enumerate() {
        let scale = multiplier / m;
        for (dl, &p) in d_logits.iter_mut().zip(&cache.probs[li]) {
            *dl = p * scale;
        }
        d_logits[cache.targets[li]] -= scale;
        d_normed.fill(0.0);
        matvec_t_acc(&model.unembedding, &d_logits, &mut d_normed);
        rmsnorm_bwd_acc(
            &d_normed,
            &cache.x_final[pos * dim..(pos + 1) * dim],
            &model.final_gain,
            cache.final_inv_rms[li],
            &mut d_x[pos * dim..(pos + 1) * dim],
            &mut u,
        );
    }

    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    for (l, (layer, lc)) in model.layers.iter().zip(&cache.layers).enumerate().rev() {
        let base = l * 7;

        // feed-forward: x_out = x_mid + Wdown (silu(Wgate n) .* (Wup n))
        accumulate_outer(&mut sink.scratch, &d_x, &lc.act, len, dim, ffn);
        sink.finish(base + 6, dim * ffn);

        let mut d_act = vec![0.0; len * ffn];
        for pos in 0..len {
            matvec_t_acc(
                &layer.wdown,
                &d_x[pos * dim..(pos + 1) * dim],
                &mut d_act[pos * ffn..(pos + 1) * ffn],
            );
        }
        let mut d_up = vec![0.0; len * ffn];
        let mut d_gate = vec![0.0; len * ffn];
        for i in 0..len * ffn {
            d_up[i] = d_act[i] * silu(lc.gate_pre[i]);
            d_gate[i] = d_act[i] * lc.up[i] * silu_prime(lc.gate_pre[i]);
        }
        accumulate_outer(&mut sink.scratch, &d_up, &lc.ffn_normed, len, ffn, dim);
        sink.finish(base + 5, ffn * dim);
        accumulate_outer(&mut sink.scratch, &d_gate, &lc.ffn_normed, len, ffn, dim);
        sink.finish(base + 4, ffn * dim);

        let mut d_fn = vec![0.0; len * dim];
        for pos in 0..len {
            let row = &mut d_fn[pos * dim..(pos + 1) * dim];
            matvec_t_acc(&layer.wup, &d_up[pos * ffn..(pos + 1) * ffn], row);
            matvec_t_acc(&layer.wgate, &d_gate[pos * ffn..(pos + 1) * ffn], row);
        }
        // residual: d_x becomes d x_mid in place
        for pos in 0..len {
            rmsnorm_bwd_acc(
                &d_fn[pos * dim..(pos + 1) * dim],
                &lc.x_mid[pos * dim..(pos + 1) * dim],
                &layer.ffn_gain,
                lc.ffn_inv_rms[pos],
                &mut d_x[pos * dim..(pos + 1) * dim],
                &mut u,
            );
        }

        // attention: x_mid = x_in + Wo head_mix
        accumulate_outer(&mut sink.scratch, &d_x, &lc.head_mix, len, dim, dim);
        sink.finish(base + 3, dim * dim);

        let mut d_hm = vec![0.0; len * dim];
        for pos in 0..len {
            matvec_t_acc(
                &layer.wo,
                &d_x[pos * dim..(pos + 1) * dim],
                &mut d_hm[pos * dim..(pos + 1) * dim],
            );
        }

        let mut d_q = vec![0.0; len * dim];
        let mut d_k = vec![0.0; len * dim];
        let mut d_v = vec![0.0; len * dim];
        let mut row: Vec<f64> = Vec::with_capacity(len);
        let mut d_row: Vec<f64> = Vec::with_capacity(len);
        for tq in 0..len {
            for h in 0..heads {
                let qh = &lc.q[tq * dim + h * hd..tq * dim + (h + 1) * hd];
                // recompute the softmax row exactly as the forward pass did
                row.clear();
                let mut zmax = f64::NEG_INFINITY;
                for tk in 0..=tq {
                    let kh = &lc.k[tk * dim + h * hd..tk * dim + (h + 1) * hd];
                    let s = dot(qh, kh) * inv_sqrt;
                    zmax = zmax.max(s);
                    row.push(s);
                }
                let mut denom = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - zmax).exp();
                    denom += *s;
                }
                for s in row.iter_mut() {
                    *s /= denom;
                }

                let dh = &d_hm[tq * dim + h * hd..tq * dim + (h + 1) * hd];
                d_row.clear();
                let mut mixed = 0.0;
                for (tk, &w) in row.iter().enumerate() {
                    let vh = &lc.v[tk * dim + h * hd..tk * dim + (h + 1) * hd];
                    let dr = dot(dh, vh);
                    d_row.push(dr);
                    mixed += w * dr;
                }
                for (tk, (&w, &dr)) in row.iter().zip(&d_row).enumerate() {
                    let ds = w * (dr - mixed);
                    let kh = &lc.k[tk * dim + h * hd..tk * dim + (h + 1) * hd];
                    let qh = &lc.q[tq * dim + h * hd..tq * dim + (h + 1) * hd];
                    for i in 0..hd {
                        d_q[tq * dim + h * hd + i] += ds * kh[i] * inv_sqrt;
                        d_k[tk * dim + h * hd + i] += ds * qh[i] * inv_sqrt;
                        d_v[tk * dim + h * hd + i] += w * dh[i];
                    }
                }
            }
        }
        // pull q/k gradients back through the rotation
        for pos in 0..len {
            rope(&mut d_q[pos * dim..(pos + 1) * dim], pos, heads, hd, -1.0);
            rope(&mut d_k[pos * dim..(pos + 1) * dim], pos, heads, hd, -1.0);
        }

        accumulate_outer(&mut sink.scratch, &d_q, &lc.attn_normed, len, dim, dim);
        sink.finish(base, dim * dim);
        accumulate_outer(&mut sink.scratch, &d_k, &lc.attn_normed, len, dim, dim);
        sink.finish(base + 1, dim * dim);
        accumulate_outer(&mut sink.scratch, &d_v, &lc.attn_normed, len, dim, dim);
        sink.finish(base + 2, dim * dim);

        let mut d_an = vec![0.0; len * dim];
        for pos in 0..len {
            let row = &mut d_an[pos * dim..(pos + 1) * dim];
            matvec_t_acc(&layer.wq, &d_q[pos * dim..(pos + 1) * dim], row);
            matvec_t_acc(&layer.wk, &d_k[pos * dim..(pos + 1) * dim], row);
            matvec_t_acc(&layer.wv, &d_v[pos * dim..(pos + 1) * dim], row);
        }
        // residual: d_x becomes d x_in in place
        for pos in 0..len {
            rmsnorm_bwd_acc(
                &d_an[pos * dim..(pos + 1) * dim],
                &lc.x_in[pos * dim..(pos + 1) * dim],
                &layer.attn_gain,
                lc.attn_inv_rms[pos],
                &mut d_x[pos * dim..(pos + 1) * dim],
                &mut u,
            );
        }
    }

    let vector = GradientVector {
        trajectory_id: trajectory.trajectory_id.clone(),
        norms: sink.norms,
        group_names: model.group_names(),
        group_param_counts: model.group_param_counts(),
        loss_value: cache.loss * multiplier,
        source: "internal-probe".into(),
    };
    Ok((vector, sink.captured))
}

/// One backward pass; returns the per-group Frobenius norms. The model is
/// untouched: parameters are read-only and no optimizer state exists.
pub fn probe_gradients(
    model: &ProbeModel,
    trajectory: &Trajectory,
) -> Result<GradientVector, ProbeError> {
    backward(model, trajectory, 1.0, None).map(|(v, _)| v)
}

/// Verification hook: probes with the loss scaled by `loss_multiplier`.
/// Gradients are linear in the loss, so every norm must scale by the same
/// factor. Not used anywhere in the pipeline.
#[doc(hidden)]
pub fn probe_gradients_scaled(
    model: &ProbeModel,
    trajectory: &Trajectory,
    loss_multiplier: f64,
) -> Result<GradientVector, ProbeError> {
    backward(model, trajectory, loss_multiplier, None).map(|(v, _)| v)
}

/// Full gradient tensor of a single probed group, row-major. Verification
/// plumbing for the finite-difference harness; the norm pipeline never
/// retains these.
#[doc(hidden)]
pub fn probe_group_gradient(
    model: &ProbeModel,
    trajectory: &Trajectory,
    group_index: usize,
) -> Result<Vec<f64>, ProbeError> {
    if group_index >= model.num_groups() {
        return Err(ProbeError::BadGroupIndex {
            index: group_index,
            groups: model.num_groups(),
        });
    }
    backward(model, trajectory, 1.0, Some(group_index))
        .map(|(_, captured)| captured.expect("capture slot always fills"))
}

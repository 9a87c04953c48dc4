//! Forward pass over the valid prefix of one trajectory.
//!
//! Only positions below `valid_len` are ever computed: padding cannot attend,
//! be attended to, or reach the loss, so appending padding leaves every
//! cached activation and the loss bit-identical.

use super::{Mat, ProbeError, ProbeModel, Trajectory, NORM_EPS, ROPE_BASE};

pub(crate) struct LayerCache {
    pub x_in: Vec<f64>,        // [len, dim]
    pub attn_normed: Vec<f64>, // [len, dim]
    pub attn_inv_rms: Vec<f64>,
    pub q: Vec<f64>,        // [len, dim], rotary applied
    pub k: Vec<f64>,        // [len, dim], rotary applied
    pub v: Vec<f64>,        // [len, dim]
    pub head_mix: Vec<f64>, // [len, dim]
    pub x_mid: Vec<f64>,    // [len, dim]
    pub ffn_normed: Vec<f64>,
    pub ffn_inv_rms: Vec<f64>,
    pub gate_pre: Vec<f64>, // [len, ffn]
    pub up: Vec<f64>,       // [len, ffn]
    pub act: Vec<f64>,      // [len, ffn]
}

pub(crate) struct ForwardCache {
    pub len: usize,
    pub layers: Vec<LayerCache>,
    pub x_final: Vec<f64>, // [len, dim]
    /// Loss-contributing positions t: the token at t+1 is a response token.
    pub loss_positions: Vec<usize>,
    pub final_inv_rms: Vec<f64>, // aligned with loss_positions
    pub probs: Vec<Vec<f64>>,    // aligned with loss_positions
    pub targets: Vec<usize>,     // aligned with loss_positions
    pub loss: f64,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// y = W x
pub(crate) fn matvec(w: &Mat, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.cols, x.len());
    debug_assert_eq!(w.rows, y.len());
    for (r, out) in y.iter_mut().enumerate() {
        *out = dot(w.row(r), x);
    }
}

/// y += W^T d
pub(crate) fn matvec_t_acc(w: &Mat, d: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.rows, d.len());
    debug_assert_eq!(w.cols, y.len());
    for (r, &dr) in d.iter().enumerate() {
        let row = w.row(r);
        for (out, &wc) in y.iter_mut().zip(row) {
            *out += dr * wc;
        }
    }
}

/// out = gain .* x / rms(x); returns the inverse rms for the backward pass.
pub(crate) fn rmsnorm(x: &[f64], gain: &[f64], out: &mut [f64]) -> f64 {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    for ((o, &xi), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = xi * inv * g;
    }
    inv
}

/// In-place rotary rotation of one [dim] row, head by head. `sign = -1.0`
/// applies the transpose rotation used when pulling gradients back.
pub(crate) fn rope(row: &mut [f64], pos: usize, heads: usize, head_dim: usize, sign: f64) {
    let p = pos as f64;
    for h in 0..heads {
        let slice = &mut row[h * head_dim..(h + 1) * head_dim];
        for j in 0..head_dim / 2 {
            let freq = ROPE_BASE.powf(-((2 * j) as f64) / head_dim as f64);
            let (s, c) = (p * freq).sin_cos();
            let s = s * sign;
            let (a, b) = (slice[2 * j], slice[2 * j + 1]);
            slice[2 * j] = a * c - b * s;
            slice[2 * j + 1] = a * s + b * c;
        }
        // odd head_dim: the trailing lane passes through unrotated
    }
}

fn validate(model: &ProbeModel, traj: &Trajectory) -> Result<(), ProbeError> {
    let id = || traj.trajectory_id.clone();
    if traj.response_mask.len() != traj.tokens.len() {
        return Err(ProbeError::MaskLengthMismatch {
            id: id(),
            mask: traj.response_mask.len(),
            tokens: traj.tokens.len(),
        });
    }
    if traj.valid_len == 0 || traj.valid_len > traj.tokens.len() {
        return Err(ProbeError::EmptyResponse { id: id() });
    }
    if traj.tokens.len() > model.config.max_context {
        return Err(ProbeError::TooLong {
            id: id(),
            len: traj.tokens.len(),
            max: model.config.max_context,
        });
    }
    for (position, &token) in traj.tokens[..traj.valid_len].iter().enumerate() {
        if token as usize >= model.config.vocab_size {
            return Err(ProbeError::TokenOutOfVocab {
                id: id(),
                position,
                token,
                vocab: model.config.vocab_size,
            });
        }
    }
    if traj.response_mask[traj.valid_len..].iter().any(|&m| m) {
        return Err(ProbeError::MaskLengthMismatch {
            id: id(),
            mask: traj.response_mask.len(),
            tokens: traj.valid_len,
        });
    }
    Ok(())
}

pub(crate) fn forward_cache(
    model: &ProbeModel,
    traj: &Trajectory,
) -> Result<ForwardCache, ProbeError> {
    validate(model, traj)?;
    let len = traj.valid_len;
    let dim = model.config.model_dim;
    let heads = model.config.num_heads;
    let hd = dim / heads;
    let ffn = model.config.ffn_hidden_dim;
    let vocab = model.config.vocab_size;

    let loss_positions: Vec<usize> = (0..len.saturating_sub(1))
        .filter(|&t| traj.response_mask[t + 1])
        .collect();
    if loss_positions.is_empty() {
        return Err(ProbeError::EmptyResponse {
            id: traj.trajectory_id.clone(),
        });
    }

    let mut x = Vec::with_capacity(len * dim);
    for pos in 0..len {
        x.extend_from_slice(model.embedding.row(traj.tokens[pos] as usize));
    }

    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let x_in = x;

        let mut attn_normed = vec![0.0; len * dim];
        let mut attn_inv_rms = vec![0.0; len];
        for pos in 0..len {
            attn_inv_rms[pos] = rmsnorm(
                &x_in[pos * dim..(pos + 1) * dim],
                &layer.attn_gain,
                &mut attn_normed[pos * dim..(pos + 1) * dim],
            );
        }

        let mut q = vec![0.0; len * dim];
        let mut k = vec![0.0; len * dim];
        let mut v = vec![0.0; len * dim];
        for pos in 0..len {
            let xn = &attn_normed[pos * dim..(pos + 1) * dim];
            matvec(&layer.wq, xn, &mut q[pos * dim..(pos + 1) * dim]);
            matvec(&layer.wk, xn, &mut k[pos * dim..(pos + 1) * dim]);
            matvec(&layer.wv, xn, &mut v[pos * dim..(pos + 1) * dim]);
            rope(&mut q[pos * dim..(pos + 1) * dim], pos, heads, hd, 1.0);
            rope(&mut k[pos * dim..(pos + 1) * dim], pos, heads, hd, 1.0);
        }

        // causal attention over the valid prefix only
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let mut head_mix = vec![0.0; len * dim];
        let mut row: Vec<f64> = Vec::with_capacity(len);
        for tq in 0..len {
            for h in 0..heads {
                let qh = &q[tq * dim + h * hd..tq * dim + (h + 1) * hd];
                row.clear();
                let mut zmax = f64::NEG_INFINITY;
                for tk in 0..=tq {
                    let kh = &k[tk * dim + h * hd..tk * dim + (h + 1) * hd];
                    let s = dot(qh, kh) * inv_sqrt;
                    zmax = zmax.max(s);
                    row.push(s);
                }
                let mut denom = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - zmax).exp();
                    denom += *s;
                }
                let out = &mut head_mix[tq * dim + h * hd..tq * dim + (h + 1) * hd];
                for (tk, &e) in row.iter().enumerate() {
                    let w = e / denom;
                    let vh = &v[tk * dim + h * hd..tk * dim + (h + 1) * hd];
                    for (o, &vi) in out.iter_mut().zip(vh) {
                        *o += w * vi;
                    }
                }
            }
        }

        let mut x_mid = vec![0.0; len * dim];
        let mut tmp = vec![0.0; dim];
        for pos in 0..len {
            matvec(&layer.wo, &head_mix[pos * dim..(pos + 1) * dim], &mut tmp);
            for c in 0..dim {
                x_mid[pos * dim + c] = x_in[pos * dim + c] + tmp[c];
            }
        }

        let mut ffn_normed = vec![0.0; len * dim];
        let mut ffn_inv_rms = vec![0.0; len];
        for pos in 0..len {
            ffn_inv_rms[pos] = rmsnorm(
                &x_mid[pos * dim..(pos + 1) * dim],
                &layer.ffn_gain,
                &mut ffn_normed[pos * dim..(pos + 1) * dim],
            );
        }

        let mut gate_pre = vec![0.0; len * ffn];
        let mut up = vec![0.0; len * ffn];
        let mut act = vec![0.0; len * ffn];
        for pos in 0..len {
            let fnr = &ffn_normed[pos * dim..(pos + 1) * dim];
            matvec(&layer.wgate, fnr, &mut gate_pre[pos * ffn..(pos + 1) * ffn]);
            matvec(&layer.wup, fnr, &mut up[pos * ffn..(pos + 1) * ffn]);
            for i in pos * ffn..(pos + 1) * ffn {
                act[i] = silu(gate_pre[i]) * up[i];
            }
        }

        let mut x_out = vec![0.0; len * dim];
        let mut down = vec![0.0; dim];
        for pos in 0..len {
            matvec(&layer.wdown, &act[pos * ffn..(pos + 1) * ffn], &mut down);
            for c in 0..dim {
                x_out[pos * dim + c] = x_mid[pos * dim + c] + down[c];
            }
        }

        layers.push(LayerCache {
            x_in,
            attn_normed,
            attn_inv_rms,
            q,
            k,
            v,
            head_mix,
            x_mid,
            ffn_normed,
            ffn_inv_rms,
            gate_pre,
            up,
            act,
        });
        x = x_out;
    }
    let x_final = x;

    // final norm, logits and mean response NLL, only where the loss looks
    let mut final_inv_rms = Vec::with_capacity(loss_positions.len());
    let mut probs = Vec::with_capacity(loss_positions.len());
    let mut targets = Vec::with_capacity(loss_positions.len());
    let mut normed = vec![0.0; dim];
    let mut logits = vec![0.0; vocab];
    let mut loss_sum = 0.0;
    for &pos in &loss_positions {
        let inv = rmsnorm(
            &x_final[pos * dim..(pos + 1) * dim],
            &model.final_gain,
            &mut normed,
        );
        final_inv_rms.push(inv);
        matvec(&model.unembedding, &normed, &mut logits);
        let target = traj.tokens[pos + 1] as usize;
        let zmax = logits.iter().fold(f64::NEG_INFINITY, |a, &z| a.max(z));
        let mut p: Vec<f64> = logits.iter().map(|&z| (z - zmax).exp()).collect();
        let denom: f64 = p.iter().sum();
        loss_sum += denom.ln() - (logits[target] - zmax);
        for e in p.iter_mut() {
            *e /= denom;
        }
        probs.push(p);
        targets.push(target);
    }
    let loss = loss_sum / loss_positions.len() as f64;

    Ok(ForwardCache {
        len,
        layers,
        x_final,
        loss_positions,
        final_inv_rms,
        probs,
        targets,
        loss,
    })
}

#[inline]
pub(crate) fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// d silu / dz = sigmoid(z) * (1 + z * (1 - sigmoid(z)))
#[inline]
pub(crate) fn silu_prime(z: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-z).exp());
    sig * (1.0 + z * (1.0 - sig))
}

/// Mean negative log-likelihood over response tokens. Padding and prompt
/// positions never contribute.
pub fn forward_loss(model: &ProbeModel, trajectory: &Trajectory) -> Result<f64, ProbeError> {
    forward_cache(model, trajectory).map(|c| c.loss)
}

#[cfg(test)]
mod tests {
    use super::super::{init_model, prepare_trajectory, ProbeModelConfig};
    use super::*;

    fn config() -> ProbeModelConfig {
        ProbeModelConfig {
            num_layers: 2,
            model_dim: 16,
            num_heads: 2,
            ffn_hidden_dim: 24,
            vocab_size: 32,
            max_context: 64,
            rng_seed: 3,
        }
    }

    #[test]
    fn uniform_logits_hit_log_vocab() {
        let mut model = init_model(config()).unwrap();
        model.unembedding.data.fill(0.0);
        let t = prepare_trajectory("t", &[1, 2, 3, 4, 5, 6], 2, 8).unwrap();
        let loss = forward_loss(&model, &t).unwrap();
        assert!((loss - (32f64).ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn appending_padding_is_bit_stable() {
        let model = init_model(config()).unwrap();
        let raw: Vec<u32> = (0..12).map(|i| (i * 5 + 1) % 32).collect();
        let short = prepare_trajectory("t", &raw, 3, 12).unwrap();
        let padded = prepare_trajectory("t", &raw, 3, 40).unwrap();
        assert_eq!(padded.valid_len, short.valid_len);
        let a = forward_loss(&model, &short).unwrap();
        let b = forward_loss(&model, &padded).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn padding_token_values_are_inert() {
        let model = init_model(config()).unwrap();
        let raw: Vec<u32> = (0..10).map(|i| (i * 3 + 2) % 32).collect();
        let clean = prepare_trajectory("t", &raw, 4, 16).unwrap();
        let mut scribbled = clean.clone();
        for tok in scribbled.tokens[scribbled.valid_len..].iter_mut() {
            *tok = 31;
        }
        let a = forward_loss(&model, &clean).unwrap();
        let b = forward_loss(&model, &scribbled).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn loss_is_finite_and_positive() {
        let model = init_model(config()).unwrap();
        let raw: Vec<u32> = (0..20).map(|i| (i * 7 + 3) % 32).collect();
        let t = prepare_trajectory("t", &raw, 5, 20).unwrap();
        let loss = forward_loss(&model, &t).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn out_of_vocab_token_is_rejected_with_position() {
        let model = init_model(config()).unwrap();
        let mut t = prepare_trajectory("t", &[1, 2, 3, 4], 1, 8).unwrap();
        t.tokens[2] = 40;
        let err = forward_loss(&model, &t).unwrap_err();
        assert!(
            matches!(
                err,
                ProbeError::TokenOutOfVocab {
                    position: 2,
                    token: 40,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn over_long_trajectory_is_rejected() {
        let model = init_model(config()).unwrap();
        let raw: Vec<u32> = vec![1; 100];
        let t = prepare_trajectory("t", &raw, 1, 100).unwrap();
        let err = forward_loss(&model, &t).unwrap_err();
        assert!(matches!(err, ProbeError::TooLong { .. }), "{err}");
    }

    #[test]
    fn marked_padding_is_rejected() {
        let model = init_model(config()).unwrap();
        let mut t = prepare_trajectory("t", &[1, 2, 3], 1, 8).unwrap();
        t.response_mask[5] = true;
        assert!(forward_loss(&model, &t).is_err());
    }
}

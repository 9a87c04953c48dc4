//! Non-invasive gradient probing on a small decoder-only transformer.
//!
//! Each trajectory gets a single forward/backward pass. The backward pass
//! never updates parameters; it reduces every projection matrix gradient to
//! its Frobenius norm on the fly and discards the tensor, so probing a
//! corpus retains at most one group-sized gradient buffer at a time.
//!
//! Probed groups are the seven projection matrices per layer
//! (`wq, wk, wv, wo, wgate, wup, wdown`) in layer-major order, giving a
//! norm vector of length `7 * num_layers`. Token embedding, unembedding and
//! the normalization gains are auxiliary: they participate in the forward
//! pass but are never probed.

mod backward;
mod forward;
mod gradcheck;
mod tokenizer;

pub use backward::{probe_gradients, probe_gradients_scaled, probe_group_gradient};
pub use forward::forward_loss;
pub use gradcheck::{finite_difference_check, largest_entries, FiniteDifferenceReport};
pub use tokenizer::{byte_tokenize, BYTE_VOCAB};

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Projection kinds probed in every layer, in slot order.
pub const PROJECTION_KINDS: [&str; 7] = ["wq", "wk", "wv", "wo", "wgate", "wup", "wdown"];

/// Rotary position embedding base frequency.
const ROPE_BASE: f64 = 10_000.0;

/// Variance floor inside the RMS normalizer.
const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("config: {0}")]
    Config(String),
    #[error("trajectory {id}: response_start {response_start} out of range for {len} raw tokens")]
    ResponseStartOutOfRange {
        id: String,
        response_start: usize,
        len: usize,
    },
    #[error("trajectory {id}: no usable response tokens")]
    EmptyResponse { id: String },
    #[error("trajectory {id}: token {token} at position {position} outside vocabulary of {vocab}")]
    TokenOutOfVocab {
        id: String,
        position: usize,
        token: u32,
        vocab: usize,
    },
    #[error("trajectory {id}: {len} tokens exceed model max_context {max}")]
    TooLong { id: String, len: usize, max: usize },
    #[error("trajectory {id}: response_mask length {mask} does not match {tokens} tokens")]
    MaskLengthMismatch {
        id: String,
        mask: usize,
        tokens: usize,
    },
    #[error("finite-difference step must be a positive finite value, got {0}")]
    BadStep(f64),
    #[error("group index {index} out of range, model has {groups} groups")]
    BadGroupIndex { index: usize, groups: usize },
    #[error("entry ({row}, {col}) out of range for {name} of shape {rows}x{cols}")]
    BadMatrixEntry {
        name: String,
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
}

/// Shape and seed of the probe model. Construction is the only fallible step;
/// a built [`ProbeModel`] is immutable during probing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_hidden_dim: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub rng_seed: u64,
}

impl ProbeModelConfig {
    fn validate(&self) -> Result<(), ProbeError> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_hidden_dim", self.ffn_hidden_dim),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(ProbeError::Config(format!("{field} must be positive")));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(ProbeError::Config(format!(
                "model_dim {} must be divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Dense row-major matrix; `data[r * cols + c]` and `y = W x` with shape
/// `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug)]
pub(crate) struct LayerWeights {
    pub attn_gain: Vec<f64>,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ffn_gain: Vec<f64>,
    pub wgate: Mat,
    pub wup: Mat,
    pub wdown: Mat,
}

/// Frozen decoder-only transformer used solely for gradient probing.
///
/// Pre-norm blocks with RMS normalization, rotary positions on q/k, a
/// SiLU-gated feed-forward and an untied unembedding. No biases anywhere.
#[derive(Debug)]
pub struct ProbeModel {
    pub(crate) config: ProbeModelConfig,
    pub(crate) embedding: Mat,   // [vocab, dim]
    pub(crate) unembedding: Mat, // [vocab, dim]
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) final_gain: Vec<f64>,
}

/// Decorrelates per-tensor init streams: splitmix64 finalizer over the base
/// seed and the tensor ordinal.
fn tensor_seed(seed: u64, ordinal: u64) -> u64 {
    let mut z = seed ^ ordinal.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)), built from raw ChaCha output
/// so the stream is stable regardless of distribution helpers.
fn uniform_mat(rows: usize, cols: usize, fan_in: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (fan_in as f64).sqrt();
    let scale = 1.0 / 9_007_199_254_740_992.0; // 2^-53
    let data = (0..rows * cols)
        .map(|_| {
            let unit = (rng.next_u64() >> 11) as f64 * scale;
            (2.0 * unit - 1.0) * bound
        })
        .collect();
    Mat { rows, cols, data }
}

/// Builds the frozen probe model from its config. Weights are drawn
/// per-tensor from independent seeded streams; normalization gains start at
/// one. The same config always yields bit-identical parameters.
pub fn init_model(config: ProbeModelConfig) -> Result<ProbeModel, ProbeError> {
    config.validate()?;
    let dim = config.model_dim;
    let ffn = config.ffn_hidden_dim;
    let vocab = config.vocab_size;
    let seed = config.rng_seed;

    let embedding = uniform_mat(vocab, dim, dim, tensor_seed(seed, 0));
    let unembedding = uniform_mat(vocab, dim, dim, tensor_seed(seed, 1));
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let base = 2 + (l as u64) * 7;
        layers.push(LayerWeights {
            attn_gain: vec![1.0; dim],
            wq: uniform_mat(dim, dim, dim, tensor_seed(seed, base)),
            wk: uniform_mat(dim, dim, dim, tensor_seed(seed, base + 1)),
            wv: uniform_mat(dim, dim, dim, tensor_seed(seed, base + 2)),
            wo: uniform_mat(dim, dim, dim, tensor_seed(seed, base + 3)),
            ffn_gain: vec![1.0; dim],
            wgate: uniform_mat(ffn, dim, dim, tensor_seed(seed, base + 4)),
            wup: uniform_mat(ffn, dim, dim, tensor_seed(seed, base + 5)),
            wdown: uniform_mat(dim, ffn, ffn, tensor_seed(seed, base + 6)),
        });
    }
    let final_gain = vec![1.0; dim];

    Ok(ProbeModel {
        config,
        embedding,
        unembedding,
        layers,
        final_gain,
    })
}

impl ProbeModel {
    pub fn config(&self) -> &ProbeModelConfig {
        &self.config
    }

    /// Number of probed parameter groups: seven per layer.
    pub fn num_groups(&self) -> usize {
        7 * self.config.num_layers
    }

    /// Probed group names in slot order: `l0.wq, l0.wk, ..., l0.wdown, l1.wq, ...`
    pub fn group_names(&self) -> Vec<String> {
        (0..self.config.num_layers)
            .flat_map(|l| {
                PROJECTION_KINDS
                    .iter()
                    .map(move |kind| format!("l{l}.{kind}"))
            })
            .collect()
    }

    /// Parameter count per probed group, aligned with [`Self::group_names`].
    pub fn group_param_counts(&self) -> Vec<u64> {
        (0..self.config.num_layers)
            .flat_map(|_| {
                (0..7).map(|kind| {
                    let (rows, cols) = self.kind_shape(kind);
                    (rows * cols) as u64
                })
            })
            .collect()
    }

    /// Shape of the probed group at `index` (row-major `[out, in]`).
    pub fn group_shape(&self, index: usize) -> Option<(usize, usize)> {
        if index < self.num_groups() {
            Some(self.kind_shape(index % 7))
        } else {
            None
        }
    }

    fn kind_shape(&self, kind: usize) -> (usize, usize) {
        let dim = self.config.model_dim;
        let ffn = self.config.ffn_hidden_dim;
        match kind {
            0..=3 => (dim, dim), // wq, wk, wv, wo
            4 | 5 => (ffn, dim), // wgate, wup
            _ => (dim, ffn),     // wdown
        }
    }

    pub(crate) fn group(&self, index: usize) -> &Mat {
        let layer = &self.layers[index / 7];
        match index % 7 {
            0 => &layer.wq,
            1 => &layer.wk,
            2 => &layer.wv,
            3 => &layer.wo,
            4 => &layer.wgate,
            5 => &layer.wup,
            _ => &layer.wdown,
        }
    }

    pub(crate) fn group_mut(&mut self, index: usize) -> &mut Mat {
        let layer = &mut self.layers[index / 7];
        match index % 7 {
            0 => &mut layer.wq,
            1 => &mut layer.wk,
            2 => &mut layer.wv,
            3 => &mut layer.wo,
            4 => &mut layer.wgate,
            5 => &mut layer.wup,
            _ => &mut layer.wdown,
        }
    }

    /// FNV-1a digest over every parameter byte in declaration order. Probing
    /// must leave this untouched.
    pub fn param_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |values: &[f64]| {
            for v in values {
                for b in v.to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        eat(&self.embedding.data);
        eat(&self.unembedding.data);
        for layer in &self.layers {
            eat(&layer.attn_gain);
            eat(&layer.wq.data);
            eat(&layer.wk.data);
            eat(&layer.wv.data);
            eat(&layer.wo.data);
            eat(&layer.ffn_gain);
            eat(&layer.wgate.data);
            eat(&layer.wup.data);
            eat(&layer.wdown.data);
        }
        eat(&self.final_gain);
        h
    }
}

/// One probe-ready sequence. Positions at or past `valid_len` are padding:
/// they are never attended to and never contribute to the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub trajectory_id: String,
    pub tokens: Vec<u32>,
    pub response_mask: Vec<bool>,
    pub valid_len: usize,
    pub metadata: BTreeMap<String, String>,
}

/// Truncates (keeping the head) or pads `raw_tokens` to `context_length` and
/// marks the response span. Fails if truncation leaves no response token.
pub fn prepare_trajectory(
    trajectory_id: &str,
    raw_tokens: &[u32],
    response_start: usize,
    context_length: usize,
) -> Result<Trajectory, ProbeError> {
    if context_length == 0 {
        return Err(ProbeError::Config("context_length must be positive".into()));
    }
    if response_start >= raw_tokens.len() {
        return Err(ProbeError::ResponseStartOutOfRange {
            id: trajectory_id.to_string(),
            response_start,
            len: raw_tokens.len(),
        });
    }
    let kept = raw_tokens.len().min(context_length);
    if response_start >= kept {
        return Err(ProbeError::EmptyResponse {
            id: trajectory_id.to_string(),
        });
    }
    let mut tokens = raw_tokens[..kept].to_vec();
    tokens.resize(context_length, 0);
    let response_mask = (0..context_length)
        .map(|i| i >= response_start && i < kept)
        .collect();
    Ok(Trajectory {
        trajectory_id: trajectory_id.to_string(),
        tokens,
        response_mask,
        valid_len: kept,
        metadata: BTreeMap::new(),
    })
}

/// Per-group Frobenius norms for one trajectory, plus enough metadata to be
/// scored without the model at hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub trajectory_id: String,
    pub norms: Vec<f64>,
    pub group_names: Vec<String>,
    pub group_param_counts: Vec<u64>,
    pub loss_value: f64,
    pub source: String,
}

impl GradientVector {
    /// Structural validity; returns a message naming the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.trajectory_id.is_empty() {
            return Err("empty trajectory_id".into());
        }
        if self.norms.len() != self.group_names.len()
            || self.norms.len() != self.group_param_counts.len()
        {
            return Err(format!(
                "norms/group_names/group_param_counts lengths differ: {}/{}/{}",
                self.norms.len(),
                self.group_names.len(),
                self.group_param_counts.len()
            ));
        }
        if self.norms.is_empty() {
            return Err("empty norm vector".into());
        }
        for (i, &n) in self.norms.iter().enumerate() {
            if !n.is_finite() || n < 0.0 {
                return Err(format!("norm {i} is {n}, expected finite and non-negative"));
            }
        }
        for (i, &c) in self.group_param_counts.iter().enumerate() {
            if c == 0 {
                return Err(format!("group {i} has zero parameter count"));
            }
        }
        if !self.loss_value.is_finite() || self.loss_value < 0.0 {
            return Err(format!(
                "loss_value {} is not a finite non-negative value",
                self.loss_value
            ));
        }
        if self.source.is_empty() {
            return Err("empty source".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ProbeModelConfig {
        ProbeModelConfig {
            num_layers: 1,
            model_dim: 16,
            num_heads: 2,
            ffn_hidden_dim: 24,
            vocab_size: 32,
            max_context: 32,
            rng_seed: 11,
        }
    }

    #[test]
    fn config_rejects_zero_fields_by_name() {
        let mut c = tiny_config();
        c.vocab_size = 0;
        let err = init_model(c).unwrap_err().to_string();
        assert!(err.contains("vocab_size"), "{err}");
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut c = tiny_config();
        c.num_heads = 3;
        let err = init_model(c).unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_model(tiny_config()).unwrap();
        let b = init_model(tiny_config()).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());

        let mut other = tiny_config();
        other.rng_seed = 12;
        let c = init_model(other).unwrap();
        assert_ne!(a.param_checksum(), c.param_checksum());
    }

    #[test]
    fn init_scale_tracks_fan_in() {
        let m = init_model(tiny_config()).unwrap();
        let bound_dim = 1.0 / (m.config.model_dim as f64).sqrt();
        assert!(m.layers[0].wq.data.iter().all(|v| v.abs() <= bound_dim));
        let bound_ffn = 1.0 / (m.config.ffn_hidden_dim as f64).sqrt();
        assert!(m.layers[0].wdown.data.iter().all(|v| v.abs() <= bound_ffn));
        // not degenerate: values actually spread out
        let spread = m.layers[0]
            .wq
            .data
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(spread > bound_dim * 0.5);
    }

    #[test]
    fn group_metadata_is_layer_major() {
        let mut c = tiny_config();
        c.num_layers = 2;
        let m = init_model(c).unwrap();
        let names = m.group_names();
        assert_eq!(names.len(), 14);
        assert_eq!(names[0], "l0.wq");
        assert_eq!(names[6], "l0.wdown");
        assert_eq!(names[7], "l1.wq");
        assert_eq!(names[13], "l1.wdown");
        let counts = m.group_param_counts();
        assert_eq!(counts[0], 16 * 16);
        assert_eq!(counts[4], 16 * 24);
        assert_eq!(counts[6], 24 * 16);
    }

    #[test]
    fn prepare_pads_and_masks() {
        let raw: Vec<u32> = (1..=10).collect();
        let t = prepare_trajectory("t", &raw, 4, 16).unwrap();
        assert_eq!(t.tokens.len(), 16);
        assert_eq!(t.response_mask.len(), 16);
        assert_eq!(t.valid_len, 10);
        assert_eq!(t.response_mask.iter().filter(|&&m| m).count(), 6);
        assert!(t.tokens[10..].iter().all(|&tok| tok == 0));
        assert!(!t.response_mask[3] && t.response_mask[4] && !t.response_mask[10]);
    }

    #[test]
    fn prepare_truncates_keeping_head() {
        let raw: Vec<u32> = (1..=20).collect();
        let t = prepare_trajectory("t", &raw, 4, 8).unwrap();
        assert_eq!(t.valid_len, 8);
        assert_eq!(t.tokens, (1..=8).collect::<Vec<u32>>());
        assert_eq!(t.response_mask.iter().filter(|&&m| m).count(), 4);
    }

    #[test]
    fn prepare_rejects_fully_truncated_response() {
        let raw: Vec<u32> = (1..=6).collect();
        let err = prepare_trajectory("t", &raw, 5, 4).unwrap_err();
        assert!(matches!(err, ProbeError::EmptyResponse { .. }), "{err}");
    }

    #[test]
    fn prepare_rejects_out_of_range_response_start() {
        let err = prepare_trajectory("t", &[1, 2, 3], 3, 8).unwrap_err();
        assert!(
            matches!(err, ProbeError::ResponseStartOutOfRange { .. }),
            "{err}"
        );
    }

    #[test]
    fn gradient_vector_validation_catches_shape_and_range() {
        let mut v = GradientVector {
            trajectory_id: "t".into(),
            norms: vec![1.0, 2.0],
            group_names: vec!["l0.wq".into(), "l0.wk".into()],
            group_param_counts: vec![4, 4],
            loss_value: 0.5,
            source: "internal-probe".into(),
        };
        assert!(v.validate().is_ok());
        v.norms[1] = -1.0;
        assert!(v.validate().unwrap_err().contains("norm 1"));
        v.norms[1] = f64::NAN;
        assert!(v.validate().is_err());
        v.norms.pop();
        assert!(v.validate().unwrap_err().contains("lengths differ"));
    }
}

//! Token-based feature extraction: a fixed set of learnable tokens first
//! cross-attends over per-frame summaries (temporal), then over each frame's
//! token matrix (spatial). Because the query count never grows with the
//! tracklet, attention cost stays affine in frames and patch tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    mha_with_weights, normal_tensor, Binder, CrossBlockParams, CrossBlockVars, LayerNormParams,
    LayerNormVars, LinearParams, LinearVars, Params, INIT_STD,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct TfeParams {
    /// Learnable query tokens, `[N_Q x D]`.
    pub query_tokens: Tensor,
    /// Per-frame summary projection (applied after the token mean).
    pub temporal_linear: LinearParams,
    pub ln_temporal: LayerNormParams,
    pub temporal_attn: crate::nn::AttnParams,
    pub spatial: CrossBlockParams,
}

impl TfeParams {
    pub fn init(unified: usize, n_query: usize, heads: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x746665); // "tfe"
        TfeParams {
            query_tokens: normal_tensor(&mut rng, vec![n_query, unified], INIT_STD),
            temporal_linear: LinearParams::init(&mut rng, unified, unified),
            ln_temporal: LayerNormParams::init(unified),
            temporal_attn: crate::nn::AttnParams::init(&mut rng, unified, heads),
            spatial: CrossBlockParams::init(&mut rng, unified, heads),
        }
    }

    pub fn n_query(&self) -> usize {
        self.query_tokens.shape()[0]
    }

    /// Zeroes every residual-branch output projection; the forward then
    /// returns the mean query token for any input.
    pub fn zero_output_projections(&mut self) {
        self.temporal_attn.out.zero_out();
        self.spatial.zero_output_projections();
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> TfeVars {
        TfeVars {
            query_tokens: b.bind(&format!("{}.query_tokens", name), &self.query_tokens),
            temporal_linear: self.temporal_linear.bind(b, &format!("{}.temporal_linear", name)),
            ln_temporal: self.ln_temporal.bind(b, &format!("{}.ln_temporal", name)),
            temporal_attn: self.temporal_attn.bind_mha(b, &format!("{}.temporal_attn", name)),
            spatial: self.spatial.bind(b, &format!("{}.spatial", name)),
        }
    }
}

impl Params for TfeParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.query_tokens", prefix), &self.query_tokens);
        self.temporal_linear.visit(&format!("{}.temporal_linear", prefix), f);
        self.ln_temporal.visit(&format!("{}.ln_temporal", prefix), f);
        self.temporal_attn.visit(&format!("{}.temporal_attn", prefix), f);
        self.spatial.visit(&format!("{}.spatial", prefix), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.query_tokens", prefix), &mut self.query_tokens);
        self.temporal_linear.visit_mut(&format!("{}.temporal_linear", prefix), f);
        self.ln_temporal.visit_mut(&format!("{}.ln_temporal", prefix), f);
        self.temporal_attn.visit_mut(&format!("{}.temporal_attn", prefix), f);
        self.spatial.visit_mut(&format!("{}.spatial", prefix), f);
    }
}

pub struct TfeVars {
    pub query_tokens: Var,
    pub temporal_linear: LinearVars,
    pub ln_temporal: LayerNormVars,
    pub temporal_attn: crate::nn::MhaVars,
    pub spatial: CrossBlockVars,
}

/// Result of a TFE forward over one tracklet.
pub struct TfeForward {
    /// Sequence-level feature `[D]`.
    pub b_hat: Var,
    /// Temporal cross-attention weights `[heads, N_Q, L]`.
    pub temporal_weights: Tensor,
}

impl TfeVars {
    /// Per-frame token mean followed by the shared linear map; rows stack
    /// into `[L x D]`.
    pub fn temporal_compress(&self, tape: &Tape, frame_tokens: &[Var]) -> Result<Var> {
        if frame_tokens.is_empty() {
            return Err(Error::Contract("tracklet must contain at least one frame".into()));
        }
        let mut means = Vec::with_capacity(frame_tokens.len());
        for &tokens in frame_tokens {
            means.push(tape.mean_axis(tokens, 0)?);
        }
        let stacked = tape.stack_rows(&means)?;
        Ok(self.temporal_linear.fwd(tape, stacked)?)
    }

    /// Queries attend over the frame summaries: `Q_b = Q_a + CA(LN(Q_a), Z)`.
    pub fn token_cross_attend(&self, tape: &Tape, z: Var) -> Result<(Var, Tensor)> {
        let normed = self.ln_temporal.fwd(tape, self.query_tokens)?;
        let (att, weights) = mha_with_weights(tape, &self.temporal_attn, normed, z, z)?;
        let q_b = tape.add(self.query_tokens, att)?;
        Ok((q_b, weights))
    }

    /// The shared `Q_b` queries one frame's token matrix.
    pub fn spatial_encode(&self, tape: &Tape, q_b: Var, frame_tokens: Var) -> Result<Var> {
        Ok(self.spatial.fwd(tape, q_b, frame_tokens)?)
    }

    /// Token mean per frame, then temporal average pooling.
    pub fn aggregate(&self, tape: &Tape, per_frame: &[Var]) -> Result<Var> {
        let mut frame_feats = Vec::with_capacity(per_frame.len());
        for &z in per_frame {
            frame_feats.push(tape.mean_axis(z, 0)?);
        }
        Ok(tape.mean_of(&frame_feats)?)
    }

    /// Full module: temporal compression, token cross-attention, spatial
    /// encoding per frame, aggregation.
    pub fn forward(&self, tape: &Tape, frame_tokens: &[Var]) -> Result<TfeForward> {
        let z = self.temporal_compress(tape, frame_tokens)?;
        let (q_b, temporal_weights) = self.token_cross_attend(tape, z)?;
        let mut spatial = Vec::with_capacity(frame_tokens.len());
        for &tokens in frame_tokens {
            spatial.push(self.spatial_encode(tape, q_b, tokens)?);
        }
        let b_hat = self.aggregate(tape, &spatial)?;
        Ok(TfeForward {
            b_hat,
            temporal_weights,
        })
    }
}

/// Head-averaged temporal attention, `[N_Q x L]`; row 0 is the per-frame
/// weight vector of the first learnable token. Every row sums to 1.
pub fn temporal_attention_summary(weights: &Tensor) -> Tensor {
    let (heads, nq, l) = (weights.shape()[0], weights.shape()[1], weights.shape()[2]);
    let mut out = vec![0.0; nq * l];
    for h in 0..heads {
        for q in 0..nq {
            for f in 0..l {
                out[q * l + f] += weights.data()[(h * nq + q) * l + f] / heads as f64;
            }
        }
    }
    Tensor::new(vec![nq, l], out).expect("summary shape consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn toy_tfe() -> TfeParams {
        TfeParams::init(32, 4, 4, 21)
    }

    fn random_frames(tape: &Tape, l: usize, tokens: usize, seed: u64) -> Vec<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..l)
            .map(|_| tape.constant(normal_tensor(&mut rng, vec![tokens, 32], 1.0)))
            .collect()
    }

    #[test]
    fn temporal_compress_identity_linear_passes_means() {
        let mut params = toy_tfe();
        params.temporal_linear = LinearParams::identity(32);
        let tape = Tape::new(Precision::F64);
        let mut binder = Binder::frozen(&tape);
        let vars = params.bind(&mut binder, "tfe");

        // All tokens equal u: the compressed row equals u.
        let u: Vec<f64> = (0..32).map(|i| i as f64 / 32.0).collect();
        let mut frame = Vec::new();
        for _ in 0..9 {
            frame.extend_from_slice(&u);
        }
        let tokens = tape.constant(Tensor::new(vec![9, 32], frame).unwrap());
        let z = vars.temporal_compress(&tape, &[tokens]).unwrap();
        assert_eq!(tape.shape(z), vec![1, 32]);
        for (a, e) in tape.value(z).data().iter().zip(&u) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_projections_reduce_to_query_token_mean() {
        let mut params = toy_tfe();
        params.zero_output_projections();
        let tape = Tape::new(Precision::F64);
        let mut binder = Binder::frozen(&tape);
        let vars = params.bind(&mut binder, "tfe");

        let frames = random_frames(&tape, 4, 9, 3);
        let out = vars.forward(&tape, &frames).unwrap();

        let expect = {
            let q = &params.query_tokens;
            let mut mean = vec![0.0; 32];
            for row in q.data().chunks(32) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= 4.0;
            }
            mean
        };
        assert_eq!(tape.value(out.b_hat).data(), &expect[..]);
    }

    #[test]
    fn frame_permutation_leaves_b_hat_unchanged() {
        let params = toy_tfe();
        let tape = Tape::new(Precision::F64);
        let mut binder = Binder::frozen(&tape);
        let vars = params.bind(&mut binder, "tfe");

        let frames = random_frames(&tape, 4, 9, 7);
        let forward = vars.forward(&tape, &frames).unwrap();
        let mut reversed = frames.clone();
        reversed.reverse();
        let backward = vars.forward(&tape, &reversed).unwrap();
        assert!(
            tape.value(forward.b_hat).max_abs_diff(&tape.value(backward.b_hat)) < 1e-6
        );
    }

    #[test]
    fn attention_shapes_match_toy_defaults() {
        let params = toy_tfe();
        let tape = Tape::new(Precision::F64);
        let mut binder = Binder::frozen(&tape);
        let vars = params.bind(&mut binder, "tfe");
        let frames = random_frames(&tape, 4, 9, 9);
        let out = vars.forward(&tape, &frames).unwrap();
        assert_eq!(out.temporal_weights.shape(), &[4, 4, 4]);
        assert_eq!(tape.shape(out.b_hat), vec![32]);

        let summary = temporal_attention_summary(&out.temporal_weights);
        assert_eq!(summary.shape(), &[4, 4]);
        for row in summary.data().chunks(4) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_frame_gets_full_attention() {
        let params = toy_tfe();
        let tape = Tape::new(Precision::F64);
        let mut binder = Binder::frozen(&tape);
        let vars = params.bind(&mut binder, "tfe");
        let frames = random_frames(&tape, 1, 9, 1);
        let out = vars.forward(&tape, &frames).unwrap();
        assert!(out.temporal_weights.data().iter().all(|&w| (w - 1.0).abs() < 1e-12));
    }

    #[test]
    fn duplicated_frames_share_attention_weight() {
        let params = toy_tfe();
        let tape = Tape::new(Precision::F64);
        let mut binder = Binder::frozen(&tape);
        let vars = params.bind(&mut binder, "tfe");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frame = tape.constant(normal_tensor(&mut rng, vec![9, 32], 1.0));
        let out = vars.forward(&tape, &[frame, frame, frame]).unwrap();
        let summary = temporal_attention_summary(&out.temporal_weights);
        for row in summary.data().chunks(3) {
            for w in row {
                assert!((w - 1.0 / 3.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_frames_give_identical_spatial_outputs() {
        let params = toy_tfe();
        let tape = Tape::new(Precision::F64);
        let mut binder = Binder::frozen(&tape);
        let vars = params.bind(&mut binder, "tfe");
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frame = tape.constant(normal_tensor(&mut rng, vec![9, 32], 1.0));
        let z = vars.temporal_compress(&tape, &[frame, frame]).unwrap();
        let (q_b, _) = vars.token_cross_attend(&tape, z).unwrap();
        let a = vars.spatial_encode(&tape, q_b, frame).unwrap();
        let b = vars.spatial_encode(&tape, q_b, frame).unwrap();
        assert!(tape.value(a).bitwise_eq(&tape.value(b)));
        assert_eq!(tape.shape(a), vec![4, 32]);
    }
}

//! Vision transformer over non-overlapping patches with a prepended class
//! token. Frames of a tracklet are encoded independently; all cross-frame
//! mixing happens downstream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelDims;
use crate::data::Frame;
use crate::nn::{
    normal_tensor, Binder, BlockParams, BlockVars, LayerNormParams, LayerNormVars, LinearParams,
    LinearVars, Params, INIT_STD,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Converts rendered `f32` pixels into an `[H, W, 3]` tensor.
pub fn frame_to_tensor(frame: &Frame, height: usize, width: usize) -> Tensor {
    let data = frame.pixels.iter().map(|&v| v as f64).collect();
    Tensor::new(vec![height, width, 3], data).expect("frame pixel count matches dims")
}

/// Splits an `[H, W, C]` image into non-overlapping `patch x patch` tiles in
/// raster order, one flattened tile per row.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Config(format!("patchify expects [H, W, C], got {:?}", shape)));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!("patch {} must divide {}x{}", patch, h, w)));
    }
    let (rows, cols) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(h * w * c);
    for pr in 0..rows {
        for pc in 0..cols {
            for dr in 0..patch {
                for dc in 0..patch {
                    let base = ((pr * patch + dr) * w + pc * patch + dc) * c;
                    out.extend_from_slice(&image.data()[base..base + c]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![rows * cols, patch * patch * c], out)?)
}

#[derive(Clone, Debug)]
pub struct ImageEncoderParams {
    pub patch_embed: LinearParams,
    pub cls_token: Tensor,  // [d_model]
    pub pos_embed: Tensor,  // [(1+N) x d_model]
    pub blocks: Vec<BlockParams>,
    pub ln_final: LayerNormParams,
    pub visual_proj: Tensor, // [d_model x unified]
}

impl ImageEncoderParams {
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x696d67); // "img"
        ImageEncoderParams {
            patch_embed: LinearParams::init(&mut rng, dims.patch_pixels(), dims.d_model),
            cls_token: normal_tensor(&mut rng, vec![dims.d_model], INIT_STD),
            pos_embed: normal_tensor(
                &mut rng,
                vec![dims.tokens_per_frame(), dims.d_model],
                INIT_STD,
            ),
            blocks: (0..dims.blocks)
                .map(|_| BlockParams::init(&mut rng, dims.d_model, dims.heads))
                .collect(),
            ln_final: LayerNormParams::init(dims.d_model),
            visual_proj: normal_tensor(&mut rng, vec![dims.d_model, dims.unified], INIT_STD),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> ImageEncoderVars {
        ImageEncoderVars {
            patch_embed: self.patch_embed.bind(b, &format!("{}.patch_embed", name)),
            cls_token: b.bind(&format!("{}.cls_token", name), &self.cls_token),
            pos_embed: b.bind(&format!("{}.pos_embed", name), &self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, blk)| blk.bind(b, &format!("{}.block{}", name, i)))
                .collect(),
            ln_final: self.ln_final.bind(b, &format!("{}.ln_final", name)),
            visual_proj: b.bind(&format!("{}.visual_proj", name), &self.visual_proj),
        }
    }
}

impl Params for ImageEncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.patch_embed.visit(&format!("{}.patch_embed", prefix), f);
        f(&format!("{}.cls_token", prefix), &self.cls_token);
        f(&format!("{}.pos_embed", prefix), &self.pos_embed);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.visit(&format!("{}.block{}", prefix, i), f);
        }
        self.ln_final.visit(&format!("{}.ln_final", prefix), f);
        f(&format!("{}.visual_proj", prefix), &self.visual_proj);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.patch_embed.visit_mut(&format!("{}.patch_embed", prefix), f);
        f(&format!("{}.cls_token", prefix), &mut self.cls_token);
        f(&format!("{}.pos_embed", prefix), &mut self.pos_embed);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_mut(&format!("{}.block{}", prefix, i), f);
        }
        self.ln_final.visit_mut(&format!("{}.ln_final", prefix), f);
        f(&format!("{}.visual_proj", prefix), &mut self.visual_proj);
    }
}

pub struct ImageEncoderVars {
    pub patch_embed: LinearVars,
    pub cls_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub ln_final: LayerNormVars,
    pub visual_proj: Var,
}

/// Output of one frame forward: final-norm tokens in encoder space, their
/// unified-space projection, and optionally the last block's attention.
pub struct ImageForward {
    /// `[(1+N) x d_model]`
    pub tokens: Var,
    /// `[(1+N) x unified]` — every token through the visual projection.
    pub projected: Var,
    /// `[heads, 1+N, 1+N]` attention weights of the final block.
    pub last_attention: Option<Tensor>,
}

impl ImageForward {
    /// Per-head class-token attention over patch tokens (row 0, columns 1..).
    /// Requires the forward to have run with capture enabled.
    pub fn cls_attention(&self) -> crate::Result<Vec<Vec<f64>>> {
        let att = self.last_attention.as_ref().ok_or_else(|| {
            Error::Contract("attention capture was not enabled for this forward".into())
        })?;
        let heads = att.shape()[0];
        let t = att.shape()[1];
        let mut out = Vec::with_capacity(heads);
        for h in 0..heads {
            let row = &att.data()[h * t * t..h * t * t + t];
            out.push(row[1..].to_vec());
        }
        Ok(out)
    }
}

impl ImageEncoderVars {
    /// Encodes one frame; `capture` keeps the final block's attention map.
    pub fn encode_frame(
        &self,
        tape: &Tape,
        dims: &ModelDims,
        frame: &Tensor,
        capture: bool,
    ) -> Result<ImageForward> {
        let patches = tape.constant(patchify(frame, dims.patch)?);
        let embedded = self.patch_embed.fwd(tape, patches)?;
        let cls = tape.reshape(self.cls_token, vec![1, dims.d_model])?;
        let with_cls = tape.concat(&[cls, embedded], 0)?;
        let mut x = tape.add(with_cls, self.pos_embed)?;

        let mut last_attention = None;
        let last = self.blocks.len().saturating_sub(1);
        for (i, block) in self.blocks.iter().enumerate() {
            if capture && i == last {
                let (y, weights) = block.fwd_capture(tape, x)?;
                x = y;
                last_attention = Some(weights);
            } else {
                x = block.fwd(tape, x)?;
            }
        }
        let tokens = self.ln_final.fwd(tape, x)?;
        let projected = tape.matmul(tokens, self.visual_proj)?;
        Ok(ImageForward {
            tokens,
            projected,
            last_attention,
        })
    }

    /// Projected class-token feature of a single frame, in unified space.
    pub fn frame_cls_feature(
        &self,
        tape: &Tape,
        dims: &ModelDims,
        frame: &Tensor,
    ) -> Result<Var> {
        let fwd = self.encode_frame(tape, dims, frame, false)?;
        Ok(tape.row(fwd.projected, 0)?)
    }

    /// Encodes every frame of a tracklet and pools:
    /// per-token temporal mean `fhat` (`[(1+N) x D]`) and the sequence-level
    /// feature `b` (`[D]`, the pooled projected class token — row 0 of
    /// `fhat`).
    pub fn encode_tracklet(
        &self,
        tape: &Tape,
        dims: &ModelDims,
        frames: &[Tensor],
    ) -> Result<TrackletFeatures> {
        if frames.is_empty() {
            return Err(Error::Contract("tracklet must contain at least one frame".into()));
        }
        let mut projected = Vec::with_capacity(frames.len());
        for frame in frames {
            projected.push(self.encode_frame(tape, dims, frame, false)?.projected);
        }
        let fhat = tape.mean_of(&projected)?;
        let b = tape.row(fhat, 0)?;
        Ok(TrackletFeatures {
            projected,
            fhat,
            b,
        })
    }
}

/// Pooled tracklet-level features in the unified space.
pub struct TrackletFeatures {
    /// Per-frame projected tokens, each `[(1+N) x D]`.
    pub projected: Vec<Var>,
    /// Temporal average pooling of each token position, `[(1+N) x D]`.
    pub fhat: Var,
    /// Sequence-level feature `[D]`.
    pub b: Var,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Registry;
    use crate::tensor::Precision;

    fn toy_dims() -> ModelDims {
        ModelDims::new(32, 16, 8, 64, 4, 2, 32, 16, 57).unwrap()
    }

    fn flat_image(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::new(vec![h, w, 3], (0..h * w * 3).map(f).collect()).unwrap()
    }

    #[test]
    fn patchify_single_patch_is_flat_image() {
        let img = flat_image(8, 8, |i| i as f64);
        let patches = patchify(&img, 8).unwrap();
        assert_eq!(patches.shape(), &[1, 192]);
        assert_eq!(patches.data(), img.data());
    }

    #[test]
    fn patchify_toy_counts_and_raster_order() {
        let img = flat_image(32, 16, |i| i as f64);
        let patches = patchify(&img, 8).unwrap();
        assert_eq!(patches.shape(), &[8, 192]);
        // First element of patch row 1 is the pixel at (0, 8).
        assert_eq!(patches.data()[192], (8 * 3) as f64);
        assert!(patchify(&flat_image(30, 16, |_| 0.0), 8).is_err());
    }

    #[test]
    fn encode_shapes_and_frame_independence() {
        let dims = toy_dims();
        let params = ImageEncoderParams::init(&dims, 5);
        let tape = Tape::new(Precision::F64);
        let mut binder = Binder::frozen(&tape);
        let vars = params.bind(&mut binder, "img");

        let f1 = flat_image(32, 16, |i| (i % 7) as f64 / 7.0);
        let f2 = flat_image(32, 16, |i| (i % 5) as f64 / 5.0);
        let out1 = vars.encode_frame(&tape, &dims, &f1, false).unwrap();
        assert_eq!(tape.shape(out1.tokens), vec![9, 64]);
        assert_eq!(tape.shape(out1.projected), vec![9, 32]);

        // Same frame encodes identically regardless of its neighbors.
        let again = vars.encode_frame(&tape, &dims, &f1, false).unwrap();
        assert!(tape.value(out1.tokens).bitwise_eq(&tape.value(again.tokens)));

        let feats = vars
            .encode_tracklet(&tape, &dims, &[f1.clone(), f2.clone()])
            .unwrap();
        assert_eq!(tape.shape(feats.b), vec![32]);

        // Frame permutation leaves the pooled feature unchanged.
        let swapped = vars.encode_tracklet(&tape, &dims, &[f2, f1]).unwrap();
        assert!(tape.value(feats.b).max_abs_diff(&tape.value(swapped.b)) < 1e-9);
    }

    #[test]
    fn single_frame_tracklet_equals_frame_feature() {
        let dims = toy_dims();
        let params = ImageEncoderParams::init(&dims, 5);
        let tape = Tape::new(Precision::F64);
        let mut binder = Binder::frozen(&tape);
        let vars = params.bind(&mut binder, "img");
        let f = flat_image(32, 16, |i| (i % 11) as f64 / 11.0);
        let feats = vars.encode_tracklet(&tape, &dims, &[f.clone()]).unwrap();
        let single = vars.frame_cls_feature(&tape, &dims, &f).unwrap();
        assert!(tape.value(feats.b).max_abs_diff(&tape.value(single)) < 1e-12);
    }

    #[test]
    fn cls_attention_rows_are_normalized() {
        let dims = toy_dims();
        let params = ImageEncoderParams::init(&dims, 5);
        let tape = Tape::new(Precision::F64);
        let mut binder = Binder::frozen(&tape);
        let vars = params.bind(&mut binder, "img");
        let f = flat_image(32, 16, |i| (i % 13) as f64 / 13.0);
        let fwd = vars.encode_frame(&tape, &dims, &f, true).unwrap();

        let att = fwd.last_attention.as_ref().unwrap();
        assert_eq!(att.shape(), &[4, 9, 9]);
        for h in 0..4 {
            for r in 0..9 {
                let row = &att.data()[(h * 9 + r) * 9..(h * 9 + r + 1) * 9];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
        let cls = fwd.cls_attention().unwrap();
        assert_eq!(cls.len(), 4);
        assert_eq!(cls[0].len(), 8);
        for h in 0..4 {
            let full_row = &att.data()[h * 81..h * 81 + 9];
            let non_cls: f64 = cls[h].iter().sum();
            assert!((non_cls - (1.0 - full_row[0])).abs() < 1e-9);
        }

        let plain = vars.encode_frame(&tape, &dims, &f, false).unwrap();
        assert!(plain.cls_attention().is_err());
    }

    #[test]
    fn registry_and_visit_orders_agree() {
        let dims = toy_dims();
        let params = ImageEncoderParams::init(&dims, 5);
        let tape = Tape::new(Precision::F64);
        let mut reg = Registry::new();
        let mut binder = Binder::trainable(&tape, &mut reg);
        params.bind(&mut binder, "img");
        let mut names = Vec::new();
        params.visit("img", &mut |n, _| names.push(n.to_string()));
        let bound: Vec<String> = reg.entries().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, bound);
    }
}

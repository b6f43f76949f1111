//! Miniature CLIP-style encoder pair and the contrastive pretraining stage
//! that produces the frozen snapshots the main pipeline trains against.

mod image;
mod pretrain;
mod text;

pub use image::{
    frame_to_tensor, patchify, ImageEncoderParams, ImageEncoderVars, ImageForward,
};
pub use pretrain::{pretrain_clip, EncoderPair, PretrainConfig, PretrainOutput};
pub use text::{text_encode, TextEncoderParams, TextEncoderVars};

use crate::{Error, Result};

/// Every shape the encoders agree on, derived once from the run config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Unified vision-language dimension; projections land here.
    pub unified: usize,
    pub caption_max: usize,
    pub vocab: usize,
}

impl ModelDims {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        height: usize,
        width: usize,
        patch: usize,
        d_model: usize,
        heads: usize,
        blocks: usize,
        unified: usize,
        caption_max: usize,
        vocab: usize,
    ) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::Config(format!(
                "patch {} must divide image {}x{}",
                patch, height, width
            )));
        }
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "{} heads must divide d_model {}",
                heads, d_model
            )));
        }
        if caption_max < 2 {
            return Err(Error::Config("caption_max must allow SOS and EOS".into()));
        }
        Ok(ModelDims {
            height,
            width,
            patch,
            d_model,
            heads,
            blocks,
            unified,
            caption_max,
            vocab,
        })
    }

    /// Patch count per frame.
    pub fn n_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Token count per frame including the class token.
    pub fn tokens_per_frame(&self) -> usize {
        1 + self.n_patches()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch * self.patch * 3
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_and_paper_patch_counts() {
        let toy = ModelDims::new(32, 16, 8, 64, 4, 2, 32, 16, 57).unwrap();
        assert_eq!(toy.n_patches(), 8);
        let paper = ModelDims::new(256, 128, 16, 768, 12, 12, 512, 77, 49408).unwrap();
        assert_eq!(paper.n_patches(), 128);
    }

    #[test]
    fn rejects_nondividing_patch() {
        assert!(ModelDims::new(30, 16, 8, 64, 4, 2, 32, 16, 57).is_err());
        assert!(ModelDims::new(32, 16, 8, 60, 8, 2, 32, 16, 57).is_err());
    }
}

//! Token-sequence encoder over the closed attribute vocabulary. Captions are
//! synthetic token-id sequences, so there is no tokenizer; the projected EOS
//! feature is the caption's unified-space representation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelDims;
use crate::data::EOS_TOKEN;
use crate::nn::{
    normal_tensor, Binder, BlockParams, BlockVars, LayerNormParams, LayerNormVars, Params,
    INIT_STD,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct TextEncoderParams {
    pub token_embed: Tensor, // [vocab x d_model]
    pub pos_embed: Tensor,   // [caption_max x d_model]
    pub blocks: Vec<BlockParams>,
    pub ln_final: LayerNormParams,
    pub text_proj: Tensor, // [d_model x unified]
}

impl TextEncoderParams {
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x747874); // "txt"
        TextEncoderParams {
            token_embed: normal_tensor(&mut rng, vec![dims.vocab, dims.d_model], INIT_STD),
            pos_embed: normal_tensor(&mut rng, vec![dims.caption_max, dims.d_model], INIT_STD),
            blocks: (0..dims.blocks)
                .map(|_| BlockParams::init(&mut rng, dims.d_model, dims.heads))
                .collect(),
            ln_final: LayerNormParams::init(dims.d_model),
            text_proj: normal_tensor(&mut rng, vec![dims.d_model, dims.unified], INIT_STD),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> TextEncoderVars {
        TextEncoderVars {
            token_embed: b.bind(&format!("{}.token_embed", name), &self.token_embed),
            pos_embed: b.bind(&format!("{}.pos_embed", name), &self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, blk)| blk.bind(b, &format!("{}.block{}", name, i)))
                .collect(),
            ln_final: self.ln_final.bind(b, &format!("{}.ln_final", name)),
            text_proj: b.bind(&format!("{}.text_proj", name), &self.text_proj),
        }
    }
}

impl Params for TextEncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.token_embed", prefix), &self.token_embed);
        f(&format!("{}.pos_embed", prefix), &self.pos_embed);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.visit(&format!("{}.block{}", prefix, i), f);
        }
        self.ln_final.visit(&format!("{}.ln_final", prefix), f);
        f(&format!("{}.text_proj", prefix), &self.text_proj);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.token_embed", prefix), &mut self.token_embed);
        f(&format!("{}.pos_embed", prefix), &mut self.pos_embed);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_mut(&format!("{}.block{}", prefix, i), f);
        }
        self.ln_final.visit_mut(&format!("{}.ln_final", prefix), f);
        f(&format!("{}.text_proj", prefix), &mut self.text_proj);
    }
}

pub struct TextEncoderVars {
    pub token_embed: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub ln_final: LayerNormVars,
    pub text_proj: Var,
}

/// Encodes a token sequence; returns the full token features
/// (`[len x d_model]`) and the projected EOS feature (`[unified]`).
///
/// Sequences must carry exactly one EOS. Overlong captions are truncated to
/// `caption_max - 1` tokens plus a re-appended EOS, with a warning.
pub fn text_encode(
    tape: &Tape,
    vars: &TextEncoderVars,
    dims: &ModelDims,
    tokens: &[usize],
) -> Result<(Var, Var)> {
    let eos_count = tokens.iter().filter(|&&t| t == EOS_TOKEN).count();
    if eos_count != 1 {
        return Err(Error::Input(format!(
            "caption must contain exactly one EOS, found {}",
            eos_count
        )));
    }
    let mut seq: Vec<usize>;
    if tokens.len() > dims.caption_max {
        log::warn!(
            "caption of {} tokens truncated to {}",
            tokens.len(),
            dims.caption_max
        );
        seq = tokens
            .iter()
            .copied()
            .filter(|&t| t != EOS_TOKEN)
            .take(dims.caption_max - 1)
            .collect();
        seq.push(EOS_TOKEN);
    } else {
        seq = tokens.to_vec();
    }
    let len = seq.len();
    let eos_pos = seq
        .iter()
        .position(|&t| t == EOS_TOKEN)
        .expect("EOS present after validation");

    let embedded = tape.embedding_lookup(vars.token_embed, &seq)?;
    let pos = tape.slice_rows(vars.pos_embed, 0, len)?;
    let mut x = tape.add(embedded, pos)?;
    for block in &vars.blocks {
        x = block.fwd(tape, x)?;
    }
    let features = vars.ln_final.fwd(tape, x)?;
    let eos_row = tape.slice_rows(features, eos_pos, 1)?;
    let projected = tape.matmul(eos_row, vars.text_proj)?;
    let eos_feature = tape.reshape(projected, vec![dims.unified])?;
    Ok((features, eos_feature))
}

//! Symmetric contrastive pretraining over (frame, caption) pairs. This stage
//! stands in for a large pretrained vision-language model: it aligns the two
//! toy encoders well enough that caption features are meaningful identity
//! prototypes, then freezes a snapshot of each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{text_encode, ImageEncoderParams, ModelDims, TextEncoderParams};
use crate::data::Dataset;
use crate::nn::{Binder, Params, Registry};
use crate::optim::Adam;
use crate::tensor::{Precision, Tape, Tensor, TensorError};
use crate::{Error, Result};

const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092; // ln(100)

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Initial softmax temperature; stored as a learnable log-scale.
    pub temperature_init: f64,
    /// Tracklets per identity withheld from pretraining pairs and used for
    /// the retrieval probe.
    pub holdout_tracklets: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch: 32,
            lr: 1e-3,
            temperature_init: 0.07,
            holdout_tracklets: 1,
        }
    }
}

/// Frozen encoder snapshot produced by pretraining.
#[derive(Clone)]
pub struct EncoderPair {
    pub image: ImageEncoderParams,
    pub text: TextEncoderParams,
}

pub struct PretrainOutput {
    pub frozen: EncoderPair,
    /// Identically initialized trainable copy of the image encoder.
    pub trainable_image: ImageEncoderParams,
    pub logit_scale: f64,
    pub final_loss: f64,
    /// Identity-level image-to-caption retrieval top-1 on the held-out split.
    pub holdout_top1: f64,
}

struct PretrainParams {
    image: ImageEncoderParams,
    text: TextEncoderParams,
    logit_scale: Tensor,
}

impl Params for PretrainParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.image.visit(&format!("{}image", prefix), f);
        self.text.visit(&format!("{}text", prefix), f);
        f(&format!("{}logit_scale", prefix), &self.logit_scale);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.image.visit_mut(&format!("{}image", prefix), f);
        self.text.visit_mut(&format!("{}text", prefix), f);
        f(&format!("{}logit_scale", prefix), &mut self.logit_scale);
    }
}

/// Runs the contrastive stage and returns frozen snapshots plus an
/// identically initialized trainable image encoder.
pub fn pretrain_clip(
    dataset: &Dataset,
    dims: &ModelDims,
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutput> {
    let mut params = PretrainParams {
        image: ImageEncoderParams::init(dims, seed),
        text: TextEncoderParams::init(dims, seed),
        logit_scale: Tensor::scalar((1.0 / config.temperature_init).ln()),
    };

    // Hold out the highest-camera tracklets of each identity for the probe.
    let mut train_pairs: Vec<(usize, usize)> = Vec::new(); // (tracklet idx, frame idx)
    let mut holdout_frames: Vec<(usize, usize)> = Vec::new();
    for identity in 0..dataset.num_identities() {
        let ids = dataset.tracklet_ids_of(identity);
        let cut = ids.len().saturating_sub(config.holdout_tracklets).max(1);
        for (pos, &t) in ids.iter().enumerate() {
            for f in 0..dataset.tracklets[t].frames.len() {
                if pos < cut {
                    train_pairs.push((t, f));
                } else {
                    holdout_frames.push((t, f));
                }
            }
        }
    }
    if train_pairs.is_empty() {
        return Err(Error::Data("no pretraining pairs available".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x707265); // "pre"
    let mut adam = Adam::new(0.0);
    let mut final_loss = 0.0;

    for step in 0..config.steps {
        let result = pretrain_step(dataset, dims, &params, config, &mut rng);
        let (tape, registry, loss) = match result {
            Ok(v) => v,
            Err(Error::Tensor(TensorError::NonFinite { op })) => {
                return Err(Error::Diverged {
                    step,
                    detail: format!("non-finite value in {} during pretraining", op),
                })
            }
            Err(e) => return Err(e),
        };
        final_loss = loss;
        if !final_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("pretraining loss became {}", final_loss),
            });
        }
        adam.step(&mut params, &registry, &tape, config.lr)?;
        // CLIP-style cap on the learnable scale.
        if params.logit_scale.item() > MAX_LOGIT_SCALE {
            params.logit_scale = Tensor::scalar(MAX_LOGIT_SCALE);
        }
    }

    let frozen = EncoderPair {
        image: params.image.clone(),
        text: params.text.clone(),
    };
    let holdout_top1 = holdout_retrieval_top1(dataset, dims, &frozen, &holdout_frames)?;
    Ok(PretrainOutput {
        trainable_image: params.image.clone(),
        frozen,
        logit_scale: params.logit_scale.item(),
        final_loss,
        holdout_top1,
    })
}

fn pretrain_step(
    dataset: &Dataset,
    dims: &ModelDims,
    params: &PretrainParams,
    config: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tape, Registry, f64)> {
    let tape = Tape::new(Precision::F32);
    let mut registry = Registry::new();
    let mut binder = Binder::trainable(&tape, &mut registry);
    let image_vars = params.image.bind(&mut binder, "image");
    let text_vars = params.text.bind(&mut binder, "text");
    let scale_var = binder.bind("logit_scale", &params.logit_scale);

    // (frame, caption-of-same-identity) positive pairs.
    let n_train: Vec<(usize, usize)> = {
        let mut pairs = Vec::with_capacity(config.batch);
        let total: usize = dataset
            .tracklets
            .iter()
            .map(|t| t.frames.len())
            .sum::<usize>();
        debug_assert!(total > 0);
        for _ in 0..config.batch {
            let t = rng.gen_range(0..dataset.tracklets.len());
            let f = rng.gen_range(0..dataset.tracklets[t].frames.len());
            pairs.push((t, f));
        }
        pairs
    };

    let mut image_feats = Vec::with_capacity(config.batch);
    let mut text_feats = Vec::with_capacity(config.batch);
    for &(t, f) in &n_train {
        let tracklet = &dataset.tracklets[t];
        let frame = super::frame_to_tensor(&tracklet.frames[f], dims.height, dims.width);
        image_feats.push(image_vars.frame_cls_feature(&tape, dims, &frame)?);

        let captions = dataset.captions_of(tracklet.identity);
        if captions.is_empty() {
            return Err(Error::Data(format!(
                "identity {} has no captions",
                tracklet.identity
            )));
        }
        let caption = captions[rng.gen_range(0..captions.len())];
        let (_, eos) = text_encode(&tape, &text_vars, dims, &caption.tokens)?;
        text_feats.push(eos);
    }

    let b = config.batch;
    let image_mat = tape.stack_rows(&image_feats)?;
    let text_mat = tape.stack_rows(&text_feats)?;
    let image_n = tape.l2_normalize(image_mat)?;
    let text_n = tape.l2_normalize(text_mat)?;
    let sims = tape.matmul_nt(image_n, text_n)?;
    let scale = tape.exp(scale_var)?;
    let logits = tape.scale_by(sims, scale)?;

    let mut diag = vec![0.0; b * b];
    for i in 0..b {
        diag[i * b + i] = 1.0 / b as f64;
    }
    let diag = tape.constant(Tensor::new(vec![b, b], diag)?);

    let by_image = tape.log_softmax(logits, 1)?;
    let by_text = tape.log_softmax(logits, 0)?;
    let row_loss = tape.sum_all(tape.mul(by_image, diag)?)?;
    let col_loss = tape.sum_all(tape.mul(by_text, diag)?)?;
    let sum = tape.add(row_loss, col_loss)?;
    let loss = tape.scale(sum, -0.5)?;
    let loss_value = tape.value(loss).item();
    tape.backward(loss)?;
    Ok((tape, registry, loss_value))
}

/// Nearest canonical caption, scored at identity level.
fn holdout_retrieval_top1(
    dataset: &Dataset,
    dims: &ModelDims,
    frozen: &EncoderPair,
    holdout_frames: &[(usize, usize)],
) -> Result<f64> {
    if holdout_frames.is_empty() {
        return Ok(0.0);
    }
    let tape = Tape::new(Precision::F32);
    let mut binder = Binder::frozen(&tape);
    let image_vars = frozen.image.bind(&mut binder, "image");
    let text_vars = frozen.text.bind(&mut binder, "text");

    let mut caption_feats = Vec::with_capacity(dataset.num_identities());
    for identity in 0..dataset.num_identities() {
        let captions = dataset.captions_of(identity);
        let canonical = captions
            .first()
            .ok_or_else(|| Error::Data(format!("identity {} has no captions", identity)))?;
        let (_, eos) = text_encode(&tape, &text_vars, dims, &canonical.tokens)?;
        caption_feats.push(eos);
    }
    let captions_mat = tape.l2_normalize(tape.stack_rows(&caption_feats)?)?;

    let mut correct = 0usize;
    for &(t, f) in holdout_frames {
        let tracklet = &dataset.tracklets[t];
        let frame = super::frame_to_tensor(&tracklet.frames[f], dims.height, dims.width);
        let feat = image_vars.frame_cls_feature(&tape, dims, &frame)?;
        let feat_row = tape.reshape(feat, vec![1, dims.unified])?;
        let feat_n = tape.l2_normalize(feat_row)?;
        let sims = tape.matmul_nt(feat_n, captions_mat)?;
        let values = tape.value(sims);
        let best = values
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if best == tracklet.identity {
            correct += 1;
        }
    }
    Ok(correct as f64 / holdout_frames.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_dataset, GenConfig};
    use crate::nn::Params;

    #[test]
    fn zero_steps_returns_random_init_with_identical_copies() {
        let config = GenConfig {
            identities: 4,
            tracklets_per_identity: 2,
            ..GenConfig::default()
        };
        let ds = gen_synthetic_dataset(&config).unwrap();
        let dims = ModelDims::new(32, 16, 8, 64, 4, 2, 32, 16, crate::data::vocab_size(4)).unwrap();
        let pcfg = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        let out = pretrain_clip(&ds, &dims, &pcfg, 3).unwrap();

        let fresh = ImageEncoderParams::init(&dims, 3);
        assert_eq!(out.frozen.image.checksum(), fresh.checksum());
        // Frozen and trainable image encoders agree bit-exactly at step 0.
        assert_eq!(out.frozen.image.checksum(), out.trainable_image.checksum());
    }
}

//! Identity memory banks and caption-guided refinement.
//!
//! The image bank holds one frozen-encoder prototype row per identity,
//! momentum-updated with the hardest batch positive; the text bank is the
//! frozen average of each identity's projected caption features and never
//! changes after initialization. Refinement runs the text bank as queries
//! through a fusion encoder over the batch's pooled visual tokens and adds
//! the image bank to the result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{identity_token, Dataset, EOS_TOKEN};
use crate::model::{frame_to_tensor, text_encode, EncoderPair, ModelDims};
use crate::nn::{
    normal_tensor, Binder, CrossBlockParams, CrossBlockVars, LayerNormParams, LayerNormVars,
    LinearParams, LinearVars, Params, INIT_STD,
};
use crate::tensor::{Precision, Tape, Tensor, Var};
use crate::{Error, Result};

/// Which prototype the contrastive loss targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryMode {
    Image,
    Text,
    NaiveSum,
    Refined,
}

/// Identity-aware caption handling for corpora with ambiguous captions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdStrategyKind {
    None,
    IdText,
    IdEmb,
}

/// Resolved strategy; `IdEmb` carries its per-identity embedding table.
#[derive(Clone, Debug)]
pub enum IdStrategy {
    None,
    IdText,
    IdEmb { table: Tensor },
}

impl IdStrategy {
    /// Builds the strategy for a corpus of `y` identities. The embedding
    /// table is drawn once here and folded into the text bank at init; the
    /// bank stays immutable afterwards.
    pub fn resolve(kind: IdStrategyKind, y: usize, unified: usize, seed: u64) -> IdStrategy {
        match kind {
            IdStrategyKind::None => IdStrategy::None,
            IdStrategyKind::IdText => IdStrategy::IdText,
            IdStrategyKind::IdEmb => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(0x6964); // "id"
                IdStrategy::IdEmb {
                    table: normal_tensor(&mut rng, vec![y, unified], INIT_STD),
                }
            }
        }
    }
}

/// Frozen contrastive targets: one row per identity in the unified space.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    /// `[Y x D]`, rows kept unit-norm through every update.
    pub image: Tensor,
    /// `[Y x D]`, immutable after initialization.
    pub text: Tensor,
    pub momentum: f64,
}

impl MemoryBank {
    pub fn identity_count(&self) -> usize {
        self.image.shape()[0]
    }
}

/// Image bank initialization: frozen-encoder sequence features averaged per
/// identity, then row-normalized.
pub fn init_image_memory(
    dataset: &Dataset,
    frozen: &EncoderPair,
    dims: &ModelDims,
) -> Result<Tensor> {
    let y = dataset.num_identities();
    let d = dims.unified;
    let mut sums = vec![0.0; y * d];
    let mut counts = vec![0usize; y];

    for tracklet in &dataset.tracklets {
        let tape = Tape::new(Precision::F32);
        let mut binder = Binder::frozen(&tape);
        let vars = frozen.image.bind(&mut binder, "frozen_image");
        let frames: Vec<Tensor> = tracklet
            .frames
            .iter()
            .map(|f| frame_to_tensor(f, dims.height, dims.width))
            .collect();
        let feats = vars.encode_tracklet(&tape, dims, &frames)?;
        let b = tape.value(feats.b);
        for (i, v) in b.data().iter().enumerate() {
            sums[tracklet.identity * d + i] += v;
        }
        counts[tracklet.identity] += 1;
    }

    for (identity, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::Data(format!("identity {} has no tracklets", identity)));
        }
        let row = &mut sums[identity * d..(identity + 1) * d];
        for v in row.iter_mut() {
            *v /= count as f64;
        }
        normalize_row(row);
    }
    Tensor::new(vec![y, d], sums).map_err(Error::from)
}

/// Text bank initialization from every caption of every identity, honoring
/// the identity strategy.
pub fn init_text_memory(
    dataset: &Dataset,
    frozen: &EncoderPair,
    dims: &ModelDims,
    strategy: &IdStrategy,
) -> Result<Tensor> {
    let y = dataset.num_identities();
    let d = dims.unified;
    let mut sums = vec![0.0; y * d];
    let mut counts = vec![0usize; y];

    let tape = Tape::new(Precision::F32);
    let mut binder = Binder::frozen(&tape);
    let vars = frozen.text.bind(&mut binder, "frozen_text");

    for caption in &dataset.captions {
        let tokens: Vec<usize> = match strategy {
            IdStrategy::IdText => {
                // The identity token is appended to the caption just ahead of
                // the EOS marker.
                let mut with_id = Vec::with_capacity(caption.tokens.len() + 1);
                for &t in &caption.tokens {
                    if t == EOS_TOKEN {
                        with_id.push(identity_token(caption.identity));
                    }
                    with_id.push(t);
                }
                with_id
            }
            _ => caption.tokens.clone(),
        };
        let (_, eos) = text_encode(&tape, &vars, dims, &tokens)?;
        let feat = tape.value(eos);
        for (i, v) in feat.data().iter().enumerate() {
            sums[caption.identity * d + i] += v;
        }
        counts[caption.identity] += 1;
    }

    for (identity, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::Data(format!("identity {} has no captions", identity)));
        }
        let row = &mut sums[identity * d..(identity + 1) * d];
        for v in row.iter_mut() {
            *v /= count as f64;
        }
        if let IdStrategy::IdEmb { table } = strategy {
            let emb = &table.data()[identity * d..(identity + 1) * d];
            for (v, e) in row.iter_mut().zip(emb) {
                *v += e;
            }
        }
    }
    Tensor::new(vec![y, d], sums).map_err(Error::from)
}

/// Hardest-positive momentum update, executed on detached values. Only rows
/// whose identity appears in the batch change; every touched row is
/// re-normalized. Similarity ties pick the lowest tracklet id.
pub fn momentum_update_hard(
    bank: &mut MemoryBank,
    features: &Tensor,
    labels: &[usize],
    tracklet_ids: &[usize],
) {
    let d = bank.image.shape()[1];
    debug_assert_eq!(features.shape(), &[labels.len(), d]);
    let m = bank.momentum;
    let mut distinct = Vec::new();
    for &l in labels {
        if !distinct.contains(&l) {
            distinct.push(l);
        }
    }
    for identity in distinct {
        let row = bank.image.data()[identity * d..(identity + 1) * d].to_vec();
        let mut hardest: Option<(f64, usize, usize)> = None; // (sim, tracklet id, batch idx)
        for (j, &label) in labels.iter().enumerate() {
            if label != identity {
                continue;
            }
            let feat = &features.data()[j * d..(j + 1) * d];
            let sim = cosine(feat, &row);
            let candidate = (sim, tracklet_ids[j], j);
            hardest = Some(match hardest {
                None => candidate,
                Some(best) => {
                    if candidate.0 < best.0 || (candidate.0 == best.0 && candidate.1 < best.1) {
                        candidate
                    } else {
                        best
                    }
                }
            });
        }
        let Some((_, _, j)) = hardest else { continue };
        let feat = &features.data()[j * d..(j + 1) * d];
        let mut updated: Vec<f64> = row
            .iter()
            .zip(feat)
            .map(|(&old, &new)| m * old + (1.0 - m) * new)
            .collect();
        normalize_row(&mut updated);
        let data = bank.image.data_mut();
        data[identity * d..(identity + 1) * d].copy_from_slice(&updated);
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

fn normalize_row(row: &mut [f64]) {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in row.iter_mut() {
        *v /= n;
    }
}

// ---- fusion encoder ----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariant {
    /// Concatenate queries and image tokens, self-attention only.
    ConcatSelf,
    /// Self-attention over queries, then cross-attention to image tokens.
    SelfThenCross,
    /// Cross-attention first, then self-attention (the default).
    CrossThenSelf,
}

/// Entry projections (one per role, each preceded by layer norm and wrapped
/// in a residual) plus a stack of transformer blocks.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub ln_q: LayerNormParams,
    pub proj_q: LinearParams,
    pub ln_k: LayerNormParams,
    pub proj_k: LinearParams,
    pub ln_v: LayerNormParams,
    pub proj_v: LinearParams,
    pub blocks: Vec<CrossBlockParams>,
    pub variant: FusionVariant,
}

impl FusionParams {
    pub fn init(dims: &ModelDims, heads: usize, blocks: usize, variant: FusionVariant, seed: u64) -> Self {
        let d = dims.unified;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x667573); // "fus"
        FusionParams {
            ln_q: LayerNormParams::init(d),
            proj_q: LinearParams::init(&mut rng, d, d),
            ln_k: LayerNormParams::init(d),
            proj_k: LinearParams::init(&mut rng, d, d),
            ln_v: LayerNormParams::init(d),
            proj_v: LinearParams::init(&mut rng, d, d),
            blocks: (0..blocks)
                .map(|_| CrossBlockParams::init(&mut rng, d, heads))
                .collect(),
            variant,
        }
    }

    /// Zeroes the entry projections and every block's residual outputs, so
    /// fusion passes the text bank through unchanged.
    pub fn zero_output_projections(&mut self) {
        self.proj_q.zero_out();
        self.proj_k.zero_out();
        self.proj_v.zero_out();
        for blk in &mut self.blocks {
            blk.zero_output_projections();
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> FusionVars {
        FusionVars {
            ln_q: self.ln_q.bind(b, &format!("{}.ln_q", name)),
            proj_q: self.proj_q.bind(b, &format!("{}.proj_q", name)),
            ln_k: self.ln_k.bind(b, &format!("{}.ln_k", name)),
            proj_k: self.proj_k.bind(b, &format!("{}.proj_k", name)),
            ln_v: self.ln_v.bind(b, &format!("{}.ln_v", name)),
            proj_v: self.proj_v.bind(b, &format!("{}.proj_v", name)),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, blk)| blk.bind(b, &format!("{}.block{}", name, i)))
                .collect(),
            variant: self.variant,
        }
    }
}

impl Params for FusionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln_q.visit(&format!("{}.ln_q", prefix), f);
        self.proj_q.visit(&format!("{}.proj_q", prefix), f);
        self.ln_k.visit(&format!("{}.ln_k", prefix), f);
        self.proj_k.visit(&format!("{}.proj_k", prefix), f);
        self.ln_v.visit(&format!("{}.ln_v", prefix), f);
        self.proj_v.visit(&format!("{}.proj_v", prefix), f);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.visit(&format!("{}.block{}", prefix, i), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln_q.visit_mut(&format!("{}.ln_q", prefix), f);
        self.proj_q.visit_mut(&format!("{}.proj_q", prefix), f);
        self.ln_k.visit_mut(&format!("{}.ln_k", prefix), f);
        self.proj_k.visit_mut(&format!("{}.proj_k", prefix), f);
        self.ln_v.visit_mut(&format!("{}.ln_v", prefix), f);
        self.proj_v.visit_mut(&format!("{}.proj_v", prefix), f);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_mut(&format!("{}.block{}", prefix, i), f);
        }
    }
}

pub struct FusionVars {
    pub ln_q: LayerNormVars,
    pub proj_q: LinearVars,
    pub ln_k: LayerNormVars,
    pub proj_k: LinearVars,
    pub ln_v: LayerNormVars,
    pub proj_v: LinearVars,
    pub blocks: Vec<CrossBlockVars>,
    pub variant: FusionVariant,
}

impl FusionVars {
    /// Runs the text bank (`[Y x D]`) as queries over the batch token set
    /// (`[T x D]`); output keeps the `[Y x D]` shape for every variant.
    pub fn fusion_encode(&self, tape: &Tape, m_text: Var, tokens: Var) -> Result<Var> {
        let q0 = {
            let p = self.proj_q.fwd(tape, self.ln_q.fwd(tape, m_text)?)?;
            tape.add(m_text, p)?
        };
        let k0 = {
            let p = self.proj_k.fwd(tape, self.ln_k.fwd(tape, tokens)?)?;
            tape.add(tokens, p)?
        };
        let v0 = {
            let p = self.proj_v.fwd(tape, self.ln_v.fwd(tape, tokens)?)?;
            tape.add(tokens, p)?
        };

        let y = tape.shape(m_text)[0];
        match self.variant {
            FusionVariant::CrossThenSelf => {
                let mut q = q0;
                for blk in &self.blocks {
                    q = blk.cross_step(tape, q, k0)?;
                    q = blk.self_step(tape, q)?;
                    q = blk.ffn_step(tape, q)?;
                }
                let _ = v0;
                Ok(q)
            }
            FusionVariant::SelfThenCross => {
                let mut q = q0;
                for blk in &self.blocks {
                    q = blk.self_step(tape, q)?;
                    q = blk.cross_step(tape, q, k0)?;
                    q = blk.ffn_step(tape, q)?;
                }
                Ok(q)
            }
            FusionVariant::ConcatSelf => {
                let mut u = tape.concat(&[q0, k0], 0)?;
                for blk in &self.blocks {
                    u = blk.self_step(tape, u)?;
                    u = blk.ffn_step(tape, u)?;
                }
                Ok(tape.slice_rows(u, 0, y)?)
            }
        }
    }
}

/// Elementwise sum of the refined text bank and the image bank; no
/// renormalization.
pub fn refine_memory(tape: &Tape, m_text_refined: Var, m_image: Var) -> Result<Var> {
    Ok(tape.add(m_text_refined, m_image)?)
}

/// Builds the contrastive target rows for one training step. The bank enters
/// the tape as constants, so gradients stop at both stored memories and only
/// flow through the fusion path and the batch tokens.
pub fn memory_target(
    tape: &Tape,
    bank: &MemoryBank,
    mode: MemoryMode,
    batch_tokens: Option<Var>,
    fusion: Option<&FusionVars>,
) -> Result<Var> {
    let image = tape.constant(bank.image.clone());
    match mode {
        MemoryMode::Image => Ok(image),
        MemoryMode::Text => Ok(tape.constant(bank.text.clone())),
        MemoryMode::NaiveSum => {
            let text = tape.constant(bank.text.clone());
            Ok(tape.add(text, image)?)
        }
        MemoryMode::Refined => {
            let tokens = batch_tokens
                .ok_or_else(|| Error::Contract("refined memory needs batch tokens".into()))?;
            let fusion = fusion
                .ok_or_else(|| Error::Contract("refined memory needs fusion parameters".into()))?;
            let text = tape.constant(bank.text.clone());
            let refined = fusion.fusion_encode(tape, text, tokens)?;
            refine_memory(tape, refined, image)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_dataset, Caption, GenConfig, SOS_TOKEN};
    use crate::model::{ImageEncoderParams, TextEncoderParams};

    fn toy_dims(vocab: usize) -> ModelDims {
        ModelDims::new(32, 16, 8, 64, 4, 2, 32, 16, vocab).unwrap()
    }

    fn toy_frozen(dims: &ModelDims) -> EncoderPair {
        EncoderPair {
            image: ImageEncoderParams::init(dims, 11),
            text: TextEncoderParams::init(dims, 11),
        }
    }

    #[test]
    fn image_memory_rows_are_unit_norm_and_order_free() {
        let config = GenConfig {
            identities: 4,
            tracklets_per_identity: 2,
            ..GenConfig::default()
        };
        let ds = gen_synthetic_dataset(&config).unwrap();
        let dims = toy_dims(crate::data::vocab_size(4));
        let frozen = toy_frozen(&dims);
        let bank = init_image_memory(&ds, &frozen, &dims).unwrap();
        assert_eq!(bank.shape(), &[4, 32]);
        for row in bank.data().chunks(32) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }

        let mut shuffled = ds.clone();
        shuffled.tracklets.reverse();
        let bank2 = init_image_memory(&shuffled, &frozen, &dims).unwrap();
        assert!(bank.max_abs_diff(&bank2) < 1e-6);
    }

    #[test]
    fn single_tracklet_identity_memory_is_its_normalized_feature() {
        let config = GenConfig {
            identities: 2,
            tracklets_per_identity: 2,
            ..GenConfig::default()
        };
        let mut ds = gen_synthetic_dataset(&config).unwrap();
        // Keep one tracklet per identity.
        ds.tracklets.retain(|t| t.camera == 0);
        let dims = toy_dims(crate::data::vocab_size(2));
        let frozen = toy_frozen(&dims);
        let bank = init_image_memory(&ds, &frozen, &dims).unwrap();

        let tape = Tape::new(Precision::F32);
        let mut binder = Binder::frozen(&tape);
        let vars = frozen.image.bind(&mut binder, "img");
        let frames: Vec<Tensor> = ds.tracklets[0]
            .frames
            .iter()
            .map(|f| frame_to_tensor(f, 32, 16))
            .collect();
        let feats = vars.encode_tracklet(&tape, &dims, &frames).unwrap();
        let mut b = tape.value(feats.b).data().to_vec();
        normalize_row(&mut b);
        let row = &bank.data()[0..32];
        for (a, e) in row.iter().zip(&b) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn id_text_separates_identical_captions_and_zero_emb_matches_none() {
        let config = GenConfig {
            identities: 2,
            tracklets_per_identity: 2,
            ..GenConfig::default()
        };
        let mut ds = gen_synthetic_dataset(&config).unwrap();
        // Force both identities to share one caption body.
        let tokens = vec![SOS_TOKEN, 5, 12, 20, EOS_TOKEN];
        ds.captions = vec![
            Caption { identity: 0, tokens: tokens.clone() },
            Caption { identity: 1, tokens },
        ];
        let dims = toy_dims(crate::data::vocab_size(2));
        let frozen = toy_frozen(&dims);

        let plain = init_text_memory(&ds, &frozen, &dims, &IdStrategy::None).unwrap();
        assert!(plain.max_abs_diff(&plain.clone()) == 0.0);
        let row0 = &plain.data()[0..32];
        let row1 = &plain.data()[32..64];
        assert!(row0.iter().zip(row1).all(|(a, b)| a == b));

        let with_id = init_text_memory(&ds, &frozen, &dims, &IdStrategy::IdText).unwrap();
        let r0 = &with_id.data()[0..32];
        let r1 = &with_id.data()[32..64];
        assert!(r0.iter().zip(r1).any(|(a, b)| (a - b).abs() > 1e-6));

        let zero_emb = IdStrategy::IdEmb {
            table: Tensor::zeros(vec![2, 32]),
        };
        let zeroed = init_text_memory(&ds, &frozen, &dims, &zero_emb).unwrap();
        assert!(zeroed.bitwise_eq(&plain));
    }

    #[test]
    fn momentum_edge_cases_and_hardest_selection() {
        let d = 4;
        let image = Tensor::new(vec![1, d], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let text = Tensor::zeros(vec![1, d]);

        // m = 1 leaves the bank unchanged.
        let mut bank = MemoryBank { image: image.clone(), text: text.clone(), momentum: 1.0 };
        let feat = Tensor::new(vec![1, d], vec![0.0, 2.0, 0.0, 0.0]).unwrap();
        momentum_update_hard(&mut bank, &feat, &[0], &[0]);
        assert!(bank.image.bitwise_eq(&image));

        // m = 0 replaces it with the normalized feature.
        let mut bank = MemoryBank { image: image.clone(), text: text.clone(), momentum: 0.0 };
        momentum_update_hard(&mut bank, &feat, &[0], &[0]);
        assert_eq!(bank.image.data(), &[0.0, 1.0, 0.0, 0.0]);

        // Four positives with cosines (0.9, 0.8, 0.2, 0.7): the 0.2 one wins.
        let mut bank = MemoryBank { image: image.clone(), text, momentum: 0.5 };
        let c = |cos: f64| {
            let s = (1.0 - cos * cos).sqrt();
            vec![cos, s, 0.0, 0.0]
        };
        let feats = Tensor::new(
            vec![4, d],
            [c(0.9), c(0.8), c(0.2), c(0.7)].concat(),
        )
        .unwrap();
        momentum_update_hard(&mut bank, &feats, &[0, 0, 0, 0], &[10, 11, 12, 13]);
        let expect = {
            let mut row: Vec<f64> = c(0.2).iter().map(|v| 0.5 * v).collect();
            row[0] += 0.5;
            normalize_row(&mut row);
            row
        };
        for (a, e) in bank.image.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_touches_only_batch_identities() {
        let image = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let mut bank = MemoryBank {
            image: image.clone(),
            text: Tensor::zeros(vec![3, 2]),
            momentum: 0.2,
        };
        let feats = Tensor::new(vec![1, 2], vec![0.0, 5.0]).unwrap();
        momentum_update_hard(&mut bank, &feats, &[1], &[0]);
        assert_eq!(&bank.image.data()[0..2], &[1.0, 0.0]);
        assert_eq!(&bank.image.data()[4..6], &[1.0, 0.0]);
        assert!((bank.image.data()[2..4].iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fusion_zeroed_projections_pass_text_bank_through() {
        let dims = toy_dims(crate::data::vocab_size(4));
        for variant in [
            FusionVariant::CrossThenSelf,
            FusionVariant::SelfThenCross,
            FusionVariant::ConcatSelf,
        ] {
            let mut params = FusionParams::init(&dims, 4, 2, variant, 5);
            params.zero_output_projections();
            let tape = Tape::new(Precision::F64);
            let mut binder = Binder::frozen(&tape);
            let vars = params.bind(&mut binder, "fusion");
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let m_text = tape.constant(normal_tensor(&mut rng, vec![4, 32], 1.0));
            let tokens = tape.constant(normal_tensor(&mut rng, vec![18, 32], 1.0));
            let out = vars.fusion_encode(&tape, m_text, tokens).unwrap();
            assert!(
                tape.value(out).bitwise_eq(&tape.value(m_text)),
                "variant {:?} not an identity",
                variant
            );
        }
    }

    #[test]
    fn fusion_output_invariant_to_key_permutation() {
        let dims = toy_dims(crate::data::vocab_size(4));
        for variant in [
            FusionVariant::CrossThenSelf,
            FusionVariant::SelfThenCross,
            FusionVariant::ConcatSelf,
        ] {
            let params = FusionParams::init(&dims, 4, 2, variant, 5);
            let tape = Tape::new(Precision::F64);
            let mut binder = Binder::frozen(&tape);
            let vars = params.bind(&mut binder, "fusion");
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let m_text = tape.constant(normal_tensor(&mut rng, vec![4, 32], 1.0));
            let tokens = normal_tensor(&mut rng, vec![10, 32], 1.0);
            let mut permuted_data = Vec::new();
            for r in (0..10).rev() {
                permuted_data.extend_from_slice(&tokens.data()[r * 32..(r + 1) * 32]);
            }
            let permuted = Tensor::new(vec![10, 32], permuted_data).unwrap();

            let a = vars.fusion_encode(&tape, m_text, tape.constant(tokens)).unwrap();
            let b = vars.fusion_encode(&tape, m_text, tape.constant(permuted)).unwrap();
            assert!(
                tape.value(a).max_abs_diff(&tape.value(b)) < 1e-6,
                "variant {:?} sensitive to key order",
                variant
            );
        }
    }

    #[test]
    fn fusion_output_shape_independent_of_batch_size() {
        let dims = toy_dims(crate::data::vocab_size(4));
        let params = FusionParams::init(&dims, 4, 2, FusionVariant::CrossThenSelf, 5);
        let tape = Tape::new(Precision::F64);
        let mut binder = Binder::frozen(&tape);
        let vars = params.bind(&mut binder, "fusion");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m_text = tape.constant(normal_tensor(&mut rng, vec![6, 32], 1.0));
        for t in [9, 27, 45] {
            let tokens = tape.constant(normal_tensor(&mut rng, vec![t, 32], 1.0));
            let out = vars.fusion_encode(&tape, m_text, tokens).unwrap();
            assert_eq!(tape.shape(out), vec![6, 32]);
        }
    }

    #[test]
    fn refine_memory_degenerate_sums() {
        let tape = Tape::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let image = normal_tensor(&mut rng, vec![3, 4], 1.0);
        let zero = tape.constant(Tensor::zeros(vec![3, 4]));
        let image_var = tape.constant(image.clone());
        let refined = refine_memory(&tape, zero, image_var).unwrap();
        assert!(tape.value(refined).bitwise_eq(&image));

        let text = normal_tensor(&mut rng, vec![3, 4], 1.0);
        let text_var = tape.constant(text.clone());
        let zero = tape.constant(Tensor::zeros(vec![3, 4]));
        let refined = refine_memory(&tape, text_var, zero).unwrap();
        assert!(tape.value(refined).bitwise_eq(&text));
    }

    #[test]
    fn naive_sum_target_adds_banks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = MemoryBank {
            image: normal_tensor(&mut rng, vec![2, 3], 1.0),
            text: normal_tensor(&mut rng, vec![2, 3], 1.0),
            momentum: 0.2,
        };
        let tape = Tape::new(Precision::F64);
        let target = memory_target(&tape, &bank, MemoryMode::NaiveSum, None, None).unwrap();
        let expect: Vec<f64> = bank
            .text
            .data()
            .iter()
            .zip(bank.image.data())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(tape.value(target).data(), &expect[..]);
    }
}

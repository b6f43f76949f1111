//! Full model state: frozen encoder snapshots, the trainable branch, and the
//! memory bank, plus whole-dataset embedding extraction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::eval::EmbeddingSet;
use crate::memory::{
    init_image_memory, init_text_memory, FusionParams, FusionVariant, IdStrategy, IdStrategyKind,
    MemoryBank,
};
use crate::model::{frame_to_tensor, EncoderPair, ModelDims, PretrainOutput};
use crate::nn::{Binder, LinearParams, Params, Registry};
use crate::tensor::{Precision, Tape, Tensor, Var};
use crate::tfe::TfeParams;
use crate::Result;

/// Everything the optimizer touches during main training.
#[derive(Clone)]
pub struct TrainableState {
    pub image: crate::model::ImageEncoderParams,
    pub fusion: FusionParams,
    pub tfe: TfeParams,
    /// Classifier over the pooled sequence feature.
    pub head_b: LinearParams,
    /// Classifier over the token-aggregated feature.
    pub head_bhat: LinearParams,
}

impl Params for TrainableState {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.image.visit(&format!("{}image", prefix), f);
        self.fusion.visit(&format!("{}fusion", prefix), f);
        self.tfe.visit(&format!("{}tfe", prefix), f);
        self.head_b.visit(&format!("{}head_b", prefix), f);
        self.head_bhat.visit(&format!("{}head_bhat", prefix), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.image.visit_mut(&format!("{}image", prefix), f);
        self.fusion.visit_mut(&format!("{}fusion", prefix), f);
        self.tfe.visit_mut(&format!("{}tfe", prefix), f);
        self.head_b.visit_mut(&format!("{}head_b", prefix), f);
        self.head_bhat.visit_mut(&format!("{}head_bhat", prefix), f);
    }
}

pub struct TrainableVars {
    pub image: crate::model::ImageEncoderVars,
    pub fusion: crate::memory::FusionVars,
    pub tfe: crate::tfe::TfeVars,
    pub head_b: crate::nn::LinearVars,
    pub head_bhat: crate::nn::LinearVars,
}

impl TrainableState {
    pub fn bind(&self, b: &mut Binder) -> TrainableVars {
        TrainableVars {
            image: self.image.bind(b, "image"),
            fusion: self.fusion.bind(b, "fusion"),
            tfe: self.tfe.bind(b, "tfe"),
            head_b: self.head_b.bind(b, "head_b"),
            head_bhat: self.head_bhat.bind(b, "head_bhat"),
        }
    }
}

/// Frozen + trainable state of one run.
#[derive(Clone)]
pub struct Pipeline {
    pub dims: ModelDims,
    pub frozen: EncoderPair,
    pub trainable: TrainableState,
    pub bank: MemoryBank,
    /// Structural switches recorded for checkpoint echo.
    pub use_tfe: bool,
    pub id_strategy: IdStrategyKind,
}

/// Structural settings of the trainable branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchConfig {
    pub n_query_tokens: usize,
    pub fusion_blocks: usize,
    pub fusion_variant: FusionVariant,
    pub heads: usize,
    pub momentum: f64,
    pub use_tfe: bool,
    pub id_strategy: IdStrategyKind,
}

impl Pipeline {
    /// Assembles the pipeline from a pretraining output: initializes both
    /// memory banks from the frozen snapshots and the trainable branch from
    /// the given seed.
    pub fn build(
        dataset: &Dataset,
        dims: ModelDims,
        pretrained: &PretrainOutput,
        branch: &BranchConfig,
        seed: u64,
    ) -> Result<Pipeline> {
        let y = dataset.num_identities();
        let strategy = IdStrategy::resolve(branch.id_strategy, y, dims.unified, seed);
        let frozen = pretrained.frozen.clone();
        let image_bank = init_image_memory(dataset, &frozen, &dims)?;
        let text_bank = init_text_memory(dataset, &frozen, &dims, &strategy)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x636c73); // "cls"
        let trainable = TrainableState {
            image: pretrained.trainable_image.clone(),
            fusion: FusionParams::init(
                &dims,
                branch.heads,
                branch.fusion_blocks,
                branch.fusion_variant,
                seed,
            ),
            tfe: TfeParams::init(dims.unified, branch.n_query_tokens, branch.heads, seed),
            head_b: LinearParams::init(&mut rng, dims.unified, y),
            head_bhat: LinearParams::init(&mut rng, dims.unified, y),
        };
        Ok(Pipeline {
            dims,
            frozen,
            trainable,
            bank: MemoryBank {
                image: image_bank,
                text: text_bank,
                momentum: branch.momentum,
            },
            use_tfe: branch.use_tfe,
            id_strategy: branch.id_strategy,
        })
    }

    /// Binds the trainable branch for a gradient step.
    pub fn bind_trainable<'a>(&self, tape: &'a Tape, registry: &'a mut Registry) -> TrainableVars {
        let mut binder = Binder::trainable(tape, registry);
        self.trainable.bind(&mut binder)
    }

    /// Binds the trainable branch as constants (inference).
    pub fn bind_inference(&self, tape: &Tape) -> TrainableVars {
        let mut binder = Binder::frozen(tape);
        self.trainable.bind(&mut binder)
    }

    /// Final representation of every tracklet (all frames, deterministic):
    /// per-half normalized `concat(b, b_hat)`, or normalized `b` alone when
    /// the token branch is disabled.
    pub fn embed_dataset(&self, dataset: &Dataset) -> Result<EmbeddingSet> {
        let mut rows: Vec<f64> = Vec::new();
        let mut ids = Vec::with_capacity(dataset.tracklets.len());
        let mut labels = Vec::with_capacity(dataset.tracklets.len());
        let mut width = 0;
        for tracklet in &dataset.tracklets {
            let tape = Tape::new(Precision::F32);
            let vars = self.bind_inference(&tape);
            let frames: Vec<Tensor> = tracklet
                .frames
                .iter()
                .map(|f| frame_to_tensor(f, self.dims.height, self.dims.width))
                .collect();
            let feats = vars.image.encode_tracklet(&tape, &self.dims, &frames)?;
            let b_hat = if self.use_tfe {
                Some(vars.tfe.forward(&tape, &feats.projected)?.b_hat)
            } else {
                None
            };
            let repr = final_representation(&tape, feats.b, b_hat)?;
            let value = tape.value(repr);
            width = value.numel();
            rows.extend_from_slice(value.data());
            ids.push(tracklet.id);
            labels.push(tracklet.identity);
        }
        EmbeddingSet::new(
            Tensor::new(vec![labels.len(), width], rows)?,
            ids,
            labels,
        )
    }
}

/// Per-half L2 normalization followed by concatenation, so both feature
/// streams weigh equally under cosine ranking.
pub fn final_representation(tape: &Tape, b: Var, b_hat: Option<Var>) -> Result<Var> {
    let bn = tape.l2_normalize(b)?;
    match b_hat {
        Some(bh) => {
            let bhn = tape.l2_normalize(bh)?;
            Ok(tape.concat(&[bn, bhn], 0)?)
        }
        None => Ok(bn),
    }
}

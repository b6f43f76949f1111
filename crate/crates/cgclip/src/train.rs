//! End-to-end training loop: PK batches, memory-targeted contrastive loss,
//! triplet and classifier terms, momentum bank updates and periodic
//! retrieval evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_frame_indices, Batch, Dataset, PkSampler};
use crate::eval::{evaluate_retrieval, make_splits, RetrievalMetrics};
use crate::memory::{memory_target, momentum_update_hard, IdStrategyKind, MemoryMode};
use crate::model::frame_to_tensor;
use crate::objectives::{ce_label_smooth, triplet_loss, v2m_loss, LossConfig};
use crate::optim::{Adam, LrSchedule};
use crate::pipeline::{final_representation, Pipeline, TrainableVars};
use crate::tensor::{Precision, Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Tracklets per identity.
    pub k: usize,
    /// Frames sampled per tracklet.
    pub frames: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub decay_milestones: Vec<f64>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    /// Memory bank momentum factor.
    pub momentum: f64,
    pub eval_every: usize,
    /// Stop once evaluation reaches this mAP.
    pub early_stop_map: Option<f64>,
    pub loss: LossConfig,
    pub memory: MemoryMode,
    pub use_tfe: bool,
    pub id_strategy: IdStrategyKind,
    pub cmc_ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            p: 8,
            k: 4,
            frames: 4,
            lr: 1e-3,
            warmup_frac: 0.1,
            decay_milestones: vec![0.5, 0.8],
            decay_factor: 0.1,
            weight_decay: 0.0,
            momentum: 0.2,
            eval_every: 10,
            early_stop_map: None,
            loss: LossConfig::default(),
            memory: MemoryMode::Refined,
            use_tfe: true,
            id_strategy: IdStrategyKind::None,
            cmc_ks: vec![1, 5, 10, 20],
        }
    }
}

/// One row of the training-log CSV.
#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub l_v2rm: f64,
    pub l_tri: f64,
    pub l_ce: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<StepLog>,
    pub evals: Vec<(usize, RetrievalMetrics)>,
    pub final_metrics: RetrievalMetrics,
    pub epochs_run: usize,
}

/// Loss terms of one step, as tape vars plus detached values.
pub struct LossBreakdown {
    pub total: Var,
    pub v2rm: f64,
    pub tri: f64,
    pub ce: f64,
    pub total_value: f64,
    /// Detached sequence features for the momentum update, `[B x D]`.
    pub batch_features: Tensor,
}

/// Builds the full objective for one PK batch on the given tape. Exposed for
/// gradient checking; `train` drives it step by step.
pub fn batch_loss(
    tape: &Tape,
    pipeline: &Pipeline,
    vars: &TrainableVars,
    dataset: &Dataset,
    batch: &Batch,
    frame_picks: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let dims = &pipeline.dims;
    let mut b_feats = Vec::with_capacity(batch.len());
    let mut bhat_feats = Vec::with_capacity(batch.len());
    let mut reprs = Vec::with_capacity(batch.len());
    let mut fhats = Vec::with_capacity(batch.len());

    for (slot, &t_idx) in batch.tracklets.iter().enumerate() {
        let tracklet = &dataset.tracklets[t_idx];
        let frames: Vec<Tensor> = frame_picks[slot]
            .iter()
            .map(|&f| frame_to_tensor(&tracklet.frames[f], dims.height, dims.width))
            .collect();
        let feats = vars.image.encode_tracklet(tape, dims, &frames)?;
        let b_hat = if cfg.use_tfe {
            Some(vars.tfe.forward(tape, &feats.projected)?.b_hat)
        } else {
            None
        };
        reprs.push(final_representation(tape, feats.b, b_hat)?);
        b_feats.push(feats.b);
        if let Some(bh) = b_hat {
            bhat_feats.push(bh);
        }
        fhats.push(feats.fhat);
    }

    let b_stack = tape.stack_rows(&b_feats)?;
    let batch_tokens = if cfg.memory == MemoryMode::Refined {
        Some(tape.concat(&fhats, 0)?)
    } else {
        None
    };
    let target = memory_target(tape, &pipeline.bank, cfg.memory, batch_tokens, Some(&vars.fusion))?;
    let v2rm = v2m_loss(tape, b_stack, &batch.labels, target, cfg.loss.temperature)?;

    let repr_stack = tape.stack_rows(&reprs)?;
    let (tri, _) = triplet_loss(tape, repr_stack, &batch.labels, cfg.loss.margin)?;

    let logits_b = vars.head_b.fwd(tape, b_stack)?;
    let ce = if cfg.use_tfe {
        let bhat_stack = tape.stack_rows(&bhat_feats)?;
        let logits_bhat = vars.head_bhat.fwd(tape, bhat_stack)?;
        let ce_b = ce_label_smooth(tape, logits_b, &batch.labels, cfg.loss.smoothing)?;
        let ce_bhat = ce_label_smooth(tape, logits_bhat, &batch.labels, cfg.loss.smoothing)?;
        tape.scale(tape.add(ce_b, ce_bhat)?, 0.5)?
    } else {
        ce_label_smooth(tape, logits_b, &batch.labels, cfg.loss.smoothing)?
    };

    let weighted_v2rm = tape.scale(v2rm, cfg.loss.w_v2rm)?;
    let weighted_tri = tape.scale(tri, cfg.loss.w_tri)?;
    let weighted_ce = tape.scale(ce, cfg.loss.w_ce)?;
    let total = tape.add(tape.add(weighted_v2rm, weighted_tri)?, weighted_ce)?;

    Ok(LossBreakdown {
        total,
        v2rm: tape.value(v2rm).item(),
        tri: tape.value(tri).item(),
        ce: tape.value(ce).item(),
        total_value: tape.value(total).item(),
        batch_features: tape.value(b_stack),
    })
}

/// Runs the training loop, mutating the pipeline in place. On divergence the
/// pipeline keeps the last finite state and an error is returned.
pub fn train(pipeline: &mut Pipeline, dataset: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    cfg.loss.validate()?;
    let mut sampler = PkSampler::new(dataset, cfg.p, cfg.k, seed)?;
    let steps_per_epoch = sampler.batches_per_epoch();
    let total_steps = cfg.epochs * steps_per_epoch;
    let schedule = LrSchedule {
        base: cfg.lr,
        warmup_frac: cfg.warmup_frac,
        milestones: cfg.decay_milestones.clone(),
        decay: cfg.decay_factor,
    };
    let mut frame_rng = ChaCha8Rng::seed_from_u64(seed);
    frame_rng.set_stream(0x66726d); // "frm"
    let mut adam = Adam::new(cfg.weight_decay);

    let mut history = Vec::with_capacity(total_steps);
    let mut evals = Vec::new();
    let mut step = 0usize;
    let mut epochs_run = 0usize;

    'outer: for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let batch = sampler.next_batch();
            let frame_picks: Vec<Vec<usize>> = batch
                .tracklets
                .iter()
                .map(|&t| {
                    sample_frame_indices(dataset.tracklets[t].frames.len(), cfg.frames, &mut frame_rng)
                })
                .collect();

            let tape = Tape::new(Precision::F32);
            let mut registry = crate::nn::Registry::new();
            let vars = pipeline.bind_trainable(&tape, &mut registry);
            let outcome = batch_loss(&tape, pipeline, &vars, dataset, &batch, &frame_picks, cfg);
            let breakdown = match outcome {
                Ok(b) => b,
                Err(Error::Tensor(TensorError::NonFinite { op })) => {
                    return Err(Error::Diverged {
                        step,
                        detail: format!("non-finite value in {}", op),
                    });
                }
                Err(e) => return Err(e),
            };
            if !breakdown.total_value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss became {}", breakdown.total_value),
                });
            }
            tape.backward(breakdown.total)?;
            let lr = schedule.at(step, total_steps);
            adam.step(&mut pipeline.trainable, &registry, &tape, lr)?;

            let tracklet_ids: Vec<usize> = batch
                .tracklets
                .iter()
                .map(|&t| dataset.tracklets[t].id)
                .collect();
            momentum_update_hard(
                &mut pipeline.bank,
                &breakdown.batch_features,
                &batch.labels,
                &tracklet_ids,
            );

            history.push(StepLog {
                step,
                l_v2rm: breakdown.v2rm,
                l_tri: breakdown.tri,
                l_ce: breakdown.ce,
                total: breakdown.total_value,
                lr,
            });
            step += 1;
        }
        epochs_run = epoch + 1;

        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        if due || epoch + 1 == cfg.epochs {
            let metrics = evaluate_pipeline(pipeline, dataset, &cfg.cmc_ks)?;
            let map = metrics.map;
            evals.push((epoch + 1, metrics));
            if let Some(target) = cfg.early_stop_map {
                if map >= target {
                    break 'outer;
                }
            }
        }
    }

    let final_metrics = match evals.last() {
        Some((epoch, m)) if *epoch == epochs_run => m.clone(),
        _ => evaluate_pipeline(pipeline, dataset, &cfg.cmc_ks)?,
    };
    Ok(TrainReport {
        history,
        evals,
        final_metrics,
        epochs_run,
    })
}

/// Embeds the dataset with the current parameters and scores retrieval on
/// the first-tracklet-per-identity split.
pub fn evaluate_pipeline(
    pipeline: &Pipeline,
    dataset: &Dataset,
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    let embeddings = pipeline.embed_dataset(dataset)?;
    let (queries, gallery) = make_splits(&embeddings);
    evaluate_retrieval(&queries, &gallery, ks)
}

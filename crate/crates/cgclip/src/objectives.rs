//! Training losses: video-to-memory contrastive, batch-hard triplet with
//! cosine distance, and label-smoothed cross-entropy.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Loss weights and shape parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub w_v2rm: f64,
    pub w_tri: f64,
    pub w_ce: f64,
    pub margin: f64,
    pub smoothing: f64,
    /// Contrastive temperature; 1.0 keeps the literal similarity logits.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_v2rm: 1.0,
            w_tri: 1.0,
            w_ce: 0.25,
            margin: 0.3,
            smoothing: 0.1,
            temperature: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_v2rm < 0.0 || self.w_tri < 0.0 || self.w_ce < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Video-to-memory contrastive loss against the given identity rows,
/// averaged over the listed identities.
///
/// For identity `y` with batch positives `D(y)`, the term is the mean over
/// positives of `-log softmax_j s(b_j, M_y) / tau` taken down the batch axis;
/// `s` is cosine similarity.
pub fn v2m_loss_over_ids(
    tape: &Tape,
    features: Var,
    labels: &[usize],
    memory_rows: Var,
    temperature: f64,
    identities: &[usize],
) -> Result<Var> {
    let b = tape.shape(features)[0];
    if b != labels.len() {
        return Err(Error::Contract(format!(
            "{} features vs {} labels",
            b,
            labels.len()
        )));
    }
    if b < 2 {
        return Err(Error::Contract("contrastive batch needs at least 2 tracklets".into()));
    }
    if identities.is_empty() {
        return Err(Error::Contract("no identities to average over".into()));
    }
    let y = tape.shape(memory_rows)[0];
    for &id in identities {
        if id >= y {
            return Err(Error::Contract(format!(
                "identity {} has no memory row (bank has {})",
                id, y
            )));
        }
    }

    let targets = tape.embedding_lookup(memory_rows, identities)?;
    let feats_n = tape.l2_normalize(features)?;
    let targets_n = tape.l2_normalize(targets)?;
    // sims[j][i] = s(b_j, M_{identities[i]})
    let sims = tape.matmul_nt(feats_n, targets_n)?;
    let logits = tape.scale(sims, 1.0 / temperature)?;
    let log_probs = tape.log_softmax(logits, 0)?;

    let i = identities.len();
    let mut mask = vec![0.0; b * i];
    for (col, &identity) in identities.iter().enumerate() {
        let positives = labels.iter().filter(|&&l| l == identity).count();
        if positives == 0 {
            return Err(Error::Contract(format!(
                "identity {} has no positives in the batch",
                identity
            )));
        }
        for (row, &label) in labels.iter().enumerate() {
            if label == identity {
                mask[row * i + col] = 1.0 / positives as f64;
            }
        }
    }
    let mask = tape.constant(Tensor::new(vec![b, i], mask)?);
    let picked = tape.sum_all(tape.mul(log_probs, mask)?)?;
    Ok(tape.scale(picked, -1.0 / i as f64)?)
}

/// [`v2m_loss_over_ids`] averaged over the batch's distinct labels.
pub fn v2m_loss(
    tape: &Tape,
    features: Var,
    labels: &[usize],
    memory_rows: Var,
    temperature: f64,
) -> Result<Var> {
    let mut distinct = Vec::new();
    for &l in labels {
        if !distinct.contains(&l) {
            distinct.push(l);
        }
    }
    v2m_loss_over_ids(tape, features, labels, memory_rows, temperature, &distinct)
}

/// Batch-hard triplet loss with cosine distance (`1 - cosine similarity`).
/// Mining happens on detached values; gradients flow only through the
/// selected pairs. Returns the scalar loss and the per-anchor hinge values.
pub fn triplet_loss(
    tape: &Tape,
    features: Var,
    labels: &[usize],
    margin: f64,
) -> Result<(Var, Vec<f64>)> {
    let b = tape.shape(features)[0];
    if b != labels.len() {
        return Err(Error::Contract(format!(
            "{} features vs {} labels",
            b,
            labels.len()
        )));
    }
    for &label in labels {
        let count = labels.iter().filter(|&&l| l == label).count();
        if count < 2 {
            return Err(Error::Contract(format!(
                "triplet mining needs >= 2 samples of identity {}",
                label
            )));
        }
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Contract("triplet mining needs at least two identities".into()));
    }

    let feats_n = tape.l2_normalize(features)?;
    let sims = tape.matmul_nt(feats_n, feats_n)?;
    let sim_values = tape.value(sims);

    // Hardest positive: lowest similarity within class (excluding self).
    // Hardest negative: highest similarity across classes.
    let mut pos_mask = vec![0.0; b * b];
    let mut neg_mask = vec![0.0; b * b];
    for a in 0..b {
        let row = &sim_values.data()[a * b..(a + 1) * b];
        let mut hardest_pos: Option<(f64, usize)> = None;
        let mut hardest_neg: Option<(f64, usize)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if hardest_pos.map_or(true, |(s, _)| row[j] < s) {
                    hardest_pos = Some((row[j], j));
                }
            } else if hardest_neg.map_or(true, |(s, _)| row[j] > s) {
                hardest_neg = Some((row[j], j));
            }
        }
        let (_, p) = hardest_pos.expect("positive exists by precondition");
        let (_, n) = hardest_neg.expect("negative exists by precondition");
        pos_mask[a * b + p] = 1.0;
        neg_mask[a * b + n] = 1.0;
    }

    let pos_mask = tape.constant(Tensor::new(vec![b, b], pos_mask)?);
    let neg_mask = tape.constant(Tensor::new(vec![b, b], neg_mask)?);
    let sp = tape.sum_axis(tape.mul(sims, pos_mask)?, 1)?;
    let sn = tape.sum_axis(tape.mul(sims, neg_mask)?, 1)?;
    // d_ap - d_an + margin == sn - sp + margin under cosine distance.
    let gap = tape.add_scalar(tape.sub(sn, sp)?, margin)?;
    let hinge = tape.relu(gap)?;
    let loss = tape.mean_all(hinge)?;
    let terms = tape.value(hinge).data().to_vec();
    Ok((loss, terms))
}

/// Label-smoothed cross-entropy: `(1 - eps)` on the true class and
/// `eps / (Y - 1)` spread over the rest.
pub fn ce_label_smooth(
    tape: &Tape,
    logits: Var,
    labels: &[usize],
    smoothing: f64,
) -> Result<Var> {
    let shape = tape.shape(logits);
    let (b, y) = (shape[0], shape[1]);
    if b != labels.len() {
        return Err(Error::Contract(format!(
            "{} logit rows vs {} labels",
            b,
            labels.len()
        )));
    }
    if y < 2 {
        return Err(Error::Contract("classifier needs at least two classes".into()));
    }
    let off_mass = smoothing / (y - 1) as f64;
    let mut target = vec![0.0; b * y];
    for (row, &label) in labels.iter().enumerate() {
        if label >= y {
            return Err(Error::Input(format!("label {} out of range [0, {})", label, y)));
        }
        for c in 0..y {
            target[row * y + c] = if c == label { 1.0 - smoothing } else { off_mass };
        }
    }
    let target = tape.constant(Tensor::new(vec![b, y], target)?);
    let log_probs = tape.log_softmax(logits, 1)?;
    let picked = tape.sum_all(tape.mul(log_probs, target)?)?;
    Ok(tape.scale(picked, -1.0 / b as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Unit vector in the plane with the given cosine against e1.
    fn unit_with_cos(c: f64) -> Vec<f64> {
        vec![c, (1.0 - c * c).sqrt()]
    }

    #[test]
    fn v2m_equal_similarities_give_ln_b() {
        let tape = Tape::new(Precision::F64);
        let feats = tape.constant(t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]));
        let memory = tape.constant(t(&[1, 2], &[0.6, 0.8]));
        let loss = v2m_loss(&tape, feats, &[0, 0], memory, 1.0).unwrap();
        assert!((tape.value(loss).item() - (2.0_f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn v2m_reference_two_point_value() {
        let tape = Tape::new(Precision::F64);
        let rows = [unit_with_cos(0.9), unit_with_cos(0.1)].concat();
        let feats = tape.constant(t(&[2, 2], &rows));
        let memory = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let loss =
            v2m_loss_over_ids(&tape, feats, &[0, 1], memory, 1.0, &[0]).unwrap();
        let expect = (1.0 + (-0.8_f64).exp()).ln();
        assert!(
            (tape.value(loss).item() - expect).abs() < 1e-6,
            "{} vs {}",
            tape.value(loss).item(),
            expect
        );
        assert!((expect - 0.37110).abs() < 1e-5);
    }

    #[test]
    fn v2m_same_target_same_value_bitwise() {
        // The refined-vs-image equivalence: identical target rows produce
        // identical loss bits.
        let tape = Tape::new(Precision::F64);
        let feats = tape.constant(t(&[4, 3], &[
            0.3, -0.2, 0.9, 0.1, 0.8, -0.4, -0.7, 0.2, 0.2, 0.5, 0.5, 0.1,
        ]));
        let memory = t(&[2, 3], &[0.9, 0.1, 0.1, -0.2, 0.7, 0.4]);
        let labels = [0, 0, 1, 1];
        let a = v2m_loss(&tape, feats, &labels, tape.constant(memory.clone()), 1.0).unwrap();
        let b = v2m_loss(&tape, feats, &labels, tape.constant(memory), 1.0).unwrap();
        assert_eq!(tape.value(a).item().to_bits(), tape.value(b).item().to_bits());
    }

    #[test]
    fn v2m_rejects_missing_memory_row() {
        let tape = Tape::new(Precision::F64);
        let feats = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let memory = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        assert!(v2m_loss(&tape, feats, &[0, 5], memory, 1.0).is_err());
    }

    #[test]
    fn triplet_reference_values() {
        let tape = Tape::new(Precision::F64);
        // Anchor row 0: positive at cosine distance 0.5, negatives at 0.6 and
        // 0.8; the hinge is 0.5 - 0.6 + 0.3 = 0.2.
        let rows = [
            vec![1.0, 0.0],
            unit_with_cos(0.5),
            unit_with_cos(0.4),
            unit_with_cos(0.2),
        ]
        .concat();
        let feats = tape.constant(t(&[4, 2], &rows));
        let (_, terms) = triplet_loss(&tape, feats, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((terms[0] - 0.2).abs() < 1e-9, "term {}", terms[0]);
    }

    #[test]
    fn triplet_inactive_hinge_is_zero() {
        let tape = Tape::new(Precision::F64);
        // d_ap = 0.2, d_an = 0.8 for anchor 0: satisfied by margin 0.3.
        let rows = [
            vec![1.0, 0.0],
            unit_with_cos(0.8),
            unit_with_cos(0.2),
            unit_with_cos(0.1),
        ]
        .concat();
        let feats = tape.constant(t(&[4, 2], &rows));
        let (_, terms) = triplet_loss(&tape, feats, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(terms[0], 0.0);
    }

    #[test]
    fn triplet_batch_duplication_is_invariant() {
        let tape = Tape::new(Precision::F64);
        let rows = [
            vec![1.0, 0.0],
            unit_with_cos(0.6),
            unit_with_cos(0.3),
            unit_with_cos(-0.2),
        ]
        .concat();
        let feats = t(&[4, 2], &rows);
        let labels = [0, 0, 1, 1];
        let (a, _) = triplet_loss(&tape, tape.constant(feats.clone()), &labels, 0.3).unwrap();

        let doubled = t(&[8, 2], &[rows.clone(), rows].concat());
        let labels2 = [0, 0, 1, 1, 0, 0, 1, 1];
        let (b, _) = triplet_loss(&tape, tape.constant(doubled), &labels2, 0.3).unwrap();
        assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-9);
    }

    #[test]
    fn triplet_scale_invariance() {
        let tape = Tape::new(Precision::F64);
        let rows = [
            vec![1.0, 0.2],
            vec![0.4, 0.9],
            vec![-0.3, 0.8],
            vec![0.9, -0.5],
        ]
        .concat();
        let feats = t(&[4, 2], &rows);
        let scaled = feats.map(|v| v * 7.5);
        let labels = [0, 0, 1, 1];
        let (a, _) = triplet_loss(&tape, tape.constant(feats), &labels, 0.3).unwrap();
        let (b, _) = triplet_loss(&tape, tape.constant(scaled), &labels, 0.3).unwrap();
        assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-9);
    }

    #[test]
    fn triplet_rejects_singleton_class() {
        let tape = Tape::new(Precision::F64);
        let feats = tape.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]));
        assert!(triplet_loss(&tape, feats, &[0, 0, 1], 0.3).is_err());
    }

    #[test]
    fn ce_uniform_logits_give_ln_y() {
        let tape = Tape::new(Precision::F64);
        let logits = tape.constant(Tensor::zeros(vec![3, 5]));
        for eps in [0.0, 0.1, 0.4] {
            let loss = ce_label_smooth(&tape, logits, &[0, 2, 4], eps).unwrap();
            assert!((tape.value(loss).item() - (5.0_f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn ce_reference_value_and_zero_smoothing() {
        let tape = Tape::new(Precision::F64);
        let logits = tape.constant(t(&[1, 2], &[(3.0_f64).ln(), 0.0]));
        let loss = ce_label_smooth(&tape, logits, &[0], 0.1).unwrap();
        let expect = 0.9 * (4.0_f64 / 3.0).ln() + 0.1 * (4.0_f64).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-9);
        assert!((expect - 0.39754).abs() < 1e-5);

        let plain = ce_label_smooth(&tape, logits, &[0], 0.0).unwrap();
        let expect_plain = (4.0_f64 / 3.0).ln();
        assert!((tape.value(plain).item() - expect_plain).abs() < 1e-9);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let tape = Tape::new(Precision::F64);
        let logits = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(ce_label_smooth(&tape, logits, &[3], 0.1).is_err());
    }

    #[test]
    fn ce_lower_bound_is_smoothed_target_entropy() {
        // Cross-entropy >= target entropy, equality when logits realize the
        // target; check the uniform case where both are ln Y.
        let tape = Tape::new(Precision::F64);
        let y = 4;
        let eps = 3.0 / 4.0; // smoothed target is exactly uniform at eps = (Y-1)/Y
        let logits = tape.constant(Tensor::zeros(vec![2, y]));
        let loss = ce_label_smooth(&tape, logits, &[1, 3], eps).unwrap();
        assert!((tape.value(loss).item() - (y as f64).ln()).abs() < 1e-9);
    }
}

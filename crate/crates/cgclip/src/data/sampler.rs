//! Tracklet splitting, PK batch construction and frame sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::{Error, Result};

/// Greedy chunking into consecutive runs of at most `max_len` items; order is
/// preserved and nothing is dropped.
pub fn split_tracklets<T: Clone>(frames: &[T], max_len: usize) -> Vec<Vec<T>> {
    assert!(max_len >= 1, "max_len must be positive");
    frames.chunks(max_len).map(<[T]>::to_vec).collect()
}

/// A PK batch: `p` identities with `k` tracklets each.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Indices into `dataset.tracklets`, grouped by identity.
    pub tracklets: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tracklets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracklets.is_empty()
    }

    /// Distinct labels in first-appearance order.
    pub fn distinct_labels(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for &l in &self.labels {
            if !out.contains(&l) {
                out.push(l);
            }
        }
        out
    }
}

/// Epoch-balanced PK sampling: a shuffled identity queue is consumed `p` at a
/// time, so every identity appears once before any identity repeats.
pub struct PkSampler {
    p: usize,
    k: usize,
    rng: ChaCha8Rng,
    queue: Vec<usize>,
    by_identity: Vec<Vec<usize>>,
}

impl PkSampler {
    pub fn new(dataset: &Dataset, p: usize, k: usize, seed: u64) -> Result<Self> {
        let y = dataset.num_identities();
        if y < p {
            return Err(Error::Data(format!(
                "PK sampling needs at least {} identities, dataset has {}",
                p, y
            )));
        }
        if k < 1 || p < 1 {
            return Err(Error::Config("P and K must be positive".into()));
        }
        let mut by_identity = vec![Vec::new(); y];
        for (idx, t) in dataset.tracklets.iter().enumerate() {
            by_identity[t.identity].push(idx);
        }
        if let Some(empty) = by_identity.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("identity {} has no tracklets", empty)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x706b); // "pk"
        Ok(PkSampler {
            p,
            k,
            rng,
            queue: Vec::new(),
            by_identity,
        })
    }

    /// Number of batches that covers every identity exactly once.
    pub fn batches_per_epoch(&self) -> usize {
        self.by_identity.len().div_ceil(self.p)
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut chosen = Vec::with_capacity(self.p);
        while chosen.len() < self.p {
            if self.queue.is_empty() {
                let mut ids: Vec<usize> = (0..self.by_identity.len()).collect();
                ids.shuffle(&mut self.rng);
                // Refill must not duplicate an identity already in this batch.
                self.queue = ids.into_iter().filter(|i| !chosen.contains(i)).collect();
            }
            chosen.push(self.queue.remove(0));
        }

        let mut tracklets = Vec::with_capacity(self.p * self.k);
        let mut labels = Vec::with_capacity(self.p * self.k);
        for &identity in &chosen {
            let pool = &self.by_identity[identity];
            let picks: Vec<usize> = if pool.len() >= self.k {
                let mut shuffled = pool.clone();
                shuffled.shuffle(&mut self.rng);
                shuffled.truncate(self.k);
                shuffled
            } else {
                // Too few tracklets: sample with replacement.
                (0..self.k)
                    .map(|_| pool[self.rng.gen_range(0..pool.len())])
                    .collect()
            };
            for t in picks {
                tracklets.push(t);
                labels.push(identity);
            }
        }
        Batch { tracklets, labels }
    }
}

/// Convenience one-shot PK batch.
pub fn pk_sample(dataset: &Dataset, p: usize, k: usize, seed: u64) -> Result<Batch> {
    Ok(PkSampler::new(dataset, p, k, seed)?.next_batch())
}

/// Stratified frame sampling: the tracklet is divided into `target` equal
/// spans with one frame drawn per span; shorter tracklets repeat cyclically.
pub fn sample_frame_indices(len: usize, target: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(len > 0, "tracklet must be non-empty");
    if len < target {
        return (0..target).map(|i| i % len).collect();
    }
    (0..target)
        .map(|i| {
            let start = i * len / target;
            let end = ((i + 1) * len / target).max(start + 1);
            rng.gen_range(start..end)
        })
        .collect()
}

/// Keeps `ceil(fraction * Y)` randomly chosen identities with all their
/// tracklets, relabeling identities and tracklet ids contiguously.
pub fn subsample_identities(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {} outside (0, 1]", fraction)));
    }
    let y = dataset.num_identities();
    let keep = ((fraction * y as f64).ceil() as usize).clamp(1, y);

    let mut ids: Vec<usize> = (0..y).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7375); // "su"
    ids.shuffle(&mut rng);
    let mut kept: Vec<usize> = ids.into_iter().take(keep).collect();
    kept.sort_unstable();

    let mut relabel = vec![usize::MAX; y];
    for (new, &old) in kept.iter().enumerate() {
        relabel[old] = new;
    }

    let identities = kept
        .iter()
        .enumerate()
        .map(|(new, &old)| super::Identity {
            label: new,
            attrs: dataset.identities[old].attrs,
        })
        .collect();
    let mut tracklets = Vec::new();
    for t in &dataset.tracklets {
        if relabel[t.identity] != usize::MAX {
            let mut t = t.clone();
            t.identity = relabel[t.identity];
            t.id = tracklets.len();
            tracklets.push(t);
        }
    }
    let captions = dataset
        .captions
        .iter()
        .filter(|c| relabel[c.identity] != usize::MAX)
        .map(|c| super::Caption {
            identity: relabel[c.identity],
            tokens: c.tokens.clone(),
        })
        .collect();

    Ok(Dataset {
        config: dataset.config.clone(),
        identities,
        tracklets,
        captions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_dataset, GenConfig};

    #[test]
    fn split_respects_cap_and_preserves_order() {
        let frames: Vec<usize> = (0..120).collect();
        let chunks = split_tracklets(&frames, 50);
        let lens: Vec<usize> = chunks.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![50, 50, 20]);
        let rejoined: Vec<usize> = chunks.concat();
        assert_eq!(rejoined, frames);

        assert_eq!(split_tracklets(&frames[..50], 50).len(), 1);
        assert_eq!(split_tracklets(&frames[..1], 50), vec![vec![0]]);
    }

    #[test]
    fn pk_batches_have_exact_label_multiplicity() {
        let ds = gen_synthetic_dataset(&GenConfig::default()).unwrap();
        let mut sampler = PkSampler::new(&ds, 8, 4, 1).unwrap();
        for _ in 0..6 {
            let batch = sampler.next_batch();
            assert_eq!(batch.len(), 32);
            for label in batch.distinct_labels() {
                let count = batch.labels.iter().filter(|&&l| l == label).count();
                assert_eq!(count, 4);
            }
        }
    }

    #[test]
    fn pk_epoch_covers_every_identity_before_repeats() {
        let ds = gen_synthetic_dataset(&GenConfig::default()).unwrap();
        let mut sampler = PkSampler::new(&ds, 8, 2, 3).unwrap();
        let mut seen = Vec::new();
        for _ in 0..sampler.batches_per_epoch() {
            seen.extend(sampler.next_batch().distinct_labels());
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn pk_sampling_is_deterministic() {
        let ds = gen_synthetic_dataset(&GenConfig::default()).unwrap();
        let a: Vec<_> = {
            let mut s = PkSampler::new(&ds, 4, 2, 9).unwrap();
            (0..5).map(|_| s.next_batch().tracklets).collect()
        };
        let b: Vec<_> = {
            let mut s = PkSampler::new(&ds, 4, 2, 9).unwrap();
            (0..5).map(|_| s.next_batch().tracklets).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn pk_rejects_too_few_identities() {
        let config = GenConfig {
            identities: 4,
            ..GenConfig::default()
        };
        let ds = gen_synthetic_dataset(&config).unwrap();
        assert!(PkSampler::new(&ds, 8, 2, 0).is_err());
    }

    #[test]
    fn frame_sampling_patterns() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_frame_indices(4, 4, &mut rng), vec![0, 1, 2, 3]);
        assert_eq!(sample_frame_indices(2, 4, &mut rng), vec![0, 1, 0, 1]);
        for _ in 0..20 {
            let picks = sample_frame_indices(8, 4, &mut rng);
            for (i, &p) in picks.iter().enumerate() {
                assert!(p >= 2 * i && p < 2 * (i + 1), "pick {} outside span {}", p, i);
            }
        }
    }

    #[test]
    fn subsample_keeps_whole_identities() {
        let ds = gen_synthetic_dataset(&GenConfig::default()).unwrap();
        let half = subsample_identities(&ds, 0.5, 7).unwrap();
        assert_eq!(half.num_identities(), 8);
        for label in 0..8 {
            assert_eq!(half.tracklet_ids_of(label).len(), 8);
        }
        let full = subsample_identities(&ds, 1.0, 7).unwrap();
        assert_eq!(full.num_identities(), 16);
        assert_eq!(full.tracklets.len(), ds.tracklets.len());
    }
}

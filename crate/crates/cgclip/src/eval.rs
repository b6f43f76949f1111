//! Retrieval evaluation: query/gallery splitting, cosine ranking, mean
//! average precision and the cumulative matching characteristic.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Final representations with their tracklet ids and identity labels.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    /// `[N x F]`, one row per tracklet.
    pub features: Tensor,
    pub tracklet_ids: Vec<usize>,
    pub labels: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(features: Tensor, tracklet_ids: Vec<usize>, labels: Vec<usize>) -> Result<Self> {
        let n = features.shape()[0];
        if tracklet_ids.len() != n || labels.len() != n {
            return Err(Error::Contract(format!(
                "embedding rows ({}) must match ids ({}) and labels ({})",
                n,
                tracklet_ids.len(),
                labels.len()
            )));
        }
        Ok(EmbeddingSet {
            features,
            tracklet_ids,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.features.shape()[1];
        &self.features.data()[i * f..(i + 1) * f]
    }

    fn select(&self, indices: &[usize]) -> EmbeddingSet {
        let f = self.features.shape()[1];
        let mut data = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingSet {
            features: Tensor::new(vec![indices.len(), f], data).expect("selection shape"),
            tracklet_ids: indices.iter().map(|&i| self.tracklet_ids[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Splits into queries (the lowest tracklet id of every identity that has at
/// least two tracklets) and gallery (everything else). Identities with a
/// single tracklet are skipped as queries, with a warning.
pub fn make_splits(set: &EmbeddingSet) -> (EmbeddingSet, EmbeddingSet) {
    let mut best: std::collections::BTreeMap<usize, (usize, usize)> =
        std::collections::BTreeMap::new(); // label -> (tracklet id, row)
    let mut counts: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for (row, (&label, &tid)) in set.labels.iter().zip(&set.tracklet_ids).enumerate() {
        *counts.entry(label).or_insert(0) += 1;
        let entry = best.entry(label).or_insert((tid, row));
        if tid < entry.0 {
            *entry = (tid, row);
        }
    }
    let mut query_rows = Vec::new();
    for (label, &(_, row)) in &best {
        if counts[label] >= 2 {
            query_rows.push(row);
        } else {
            log::warn!("identity {} has one tracklet; excluded from queries", label);
        }
    }
    query_rows.sort_unstable();
    let gallery_rows: Vec<usize> = (0..set.len()).filter(|r| !query_rows.contains(r)).collect();
    (set.select(&query_rows), set.select(&gallery_rows))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

/// Gallery indices sorted by descending cosine similarity to the query;
/// ties break toward the smaller tracklet id.
pub fn rank_gallery(query: &[f64], gallery: &EmbeddingSet) -> Vec<usize> {
    let mut order: Vec<(f64, usize, usize)> = (0..gallery.len())
        .map(|i| (cosine(query, gallery.row(i)), gallery.tracklet_ids[i], i))
        .collect();
    order.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("similarities are finite")
            .then(a.1.cmp(&b.1))
    });
    order.into_iter().map(|(_, _, i)| i).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryReport {
    pub tracklet_id: usize,
    pub ap: f64,
    /// 1-based rank of the first correct match.
    pub first_hit_rank: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    /// `(k, CMC@k)` pairs, non-decreasing in `k`.
    pub cmc: Vec<(usize, f64)>,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub excluded_queries: usize,
    pub per_query: Vec<QueryReport>,
}

/// Ranks every query against the gallery and reduces to mAP and CMC@k.
/// Queries without any gallery positive are excluded and counted.
pub fn evaluate_retrieval(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    if gallery.is_empty() {
        return Err(Error::Contract("gallery is empty".into()));
    }
    let mut per_query = Vec::new();
    let mut excluded = 0usize;
    let mut first_hits = Vec::new();

    for q in 0..queries.len() {
        let label = queries.labels[q];
        if !gallery.labels.contains(&label) {
            log::warn!(
                "query tracklet {} has no gallery positives; excluded",
                queries.tracklet_ids[q]
            );
            excluded += 1;
            continue;
        }
        let ranking = rank_gallery(queries.row(q), gallery);
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = 0usize;
        for (pos, &g) in ranking.iter().enumerate() {
            if gallery.labels[g] == label {
                hits += 1;
                let rank = pos + 1;
                precision_sum += hits as f64 / rank as f64;
                if hits == 1 {
                    first_hit = rank;
                }
            }
        }
        per_query.push(QueryReport {
            tracklet_id: queries.tracklet_ids[q],
            ap: precision_sum / hits as f64,
            first_hit_rank: first_hit,
        });
        first_hits.push(first_hit);
    }

    if per_query.is_empty() {
        return Err(Error::Contract("no query had gallery positives".into()));
    }
    let n = per_query.len() as f64;
    let map = per_query.iter().map(|r| r.ap).sum::<f64>() / n;
    let cmc = ks
        .iter()
        .map(|&k| {
            let frac = first_hits.iter().filter(|&&r| r <= k).count() as f64 / n;
            (k, frac)
        })
        .collect();
    Ok(RetrievalMetrics {
        map,
        cmc,
        num_queries: per_query.len(),
        num_gallery: gallery.len(),
        excluded_queries: excluded,
        per_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[(usize, usize, Vec<f64>)]) -> EmbeddingSet {
        let f = rows[0].2.len();
        let mut data = Vec::new();
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for (tid, label, feat) in rows {
            ids.push(*tid);
            labels.push(*label);
            data.extend_from_slice(feat);
        }
        EmbeddingSet::new(Tensor::new(vec![rows.len(), f], data).unwrap(), ids, labels).unwrap()
    }

    #[test]
    fn split_takes_lowest_tracklet_per_identity() {
        let all = set(&[
            (3, 0, vec![1.0, 0.0]),
            (1, 0, vec![0.9, 0.1]),
            (2, 1, vec![0.0, 1.0]),
            (5, 1, vec![0.1, 0.9]),
            (7, 2, vec![0.5, 0.5]), // single tracklet: not a query
        ]);
        let (queries, gallery) = make_splits(&all);
        assert_eq!(queries.tracklet_ids, vec![1, 2]);
        assert_eq!(gallery.tracklet_ids, vec![3, 5, 7]);
        // Partition: nothing shared, nothing lost.
        assert_eq!(queries.len() + gallery.len(), all.len());
    }

    #[test]
    fn ranking_self_first_and_tie_break_by_id() {
        let gallery = set(&[
            (11, 0, vec![1.0, 0.0]),
            (7, 1, vec![0.0, 1.0]),
            (3, 2, vec![0.0, 1.0]),
        ]);
        let ranked = rank_gallery(&[1.0, 0.0], &gallery);
        assert_eq!(ranked[0], 0); // exact match first
        // The two orthogonal rows tie; lower tracklet id (3) precedes.
        assert_eq!(gallery.tracklet_ids[ranked[1]], 3);
        assert_eq!(gallery.tracklet_ids[ranked[2]], 7);

        // Query scaling does not change the ranking.
        let scaled = rank_gallery(&[2.5, 0.0], &gallery);
        assert_eq!(ranked, scaled);
    }

    #[test]
    fn ap_reference_values() {
        // Single positive ranked first.
        let gallery = set(&[
            (0, 0, vec![1.0, 0.0]),
            (1, 1, vec![0.0, 1.0]),
        ]);
        let queries = set(&[(9, 0, vec![1.0, 0.0])]);
        let m = evaluate_retrieval(&queries, &gallery, &[1]).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.cmc[0].1, 1.0);

        // Positives at ranks 1 and 3 of 4: AP = (1 + 2/3) / 2.
        let gallery = set(&[
            (0, 0, vec![1.0, 0.0]),
            (1, 1, vec![0.9, 0.1]),
            (2, 0, vec![0.5, 0.5]),
            (3, 1, vec![0.0, 1.0]),
        ]);
        let queries = set(&[(9, 0, vec![1.0, 0.0])]);
        let m = evaluate_retrieval(&queries, &gallery, &[1, 4]).unwrap();
        let expect = (1.0 + 2.0 / 3.0) / 2.0;
        assert!((m.map - expect).abs() < 1e-9);
        assert!((expect - 0.83333).abs() < 1e-5);
    }

    #[test]
    fn cmc_monotone_and_saturates() {
        let gallery = set(&[
            (0, 1, vec![1.0, 0.0]),
            (1, 0, vec![0.9, 0.1]),
            (2, 0, vec![0.0, 1.0]),
        ]);
        let queries = set(&[(9, 0, vec![1.0, 0.0])]);
        let m = evaluate_retrieval(&queries, &gallery, &[1, 2, 3]).unwrap();
        let values: Vec<f64> = m.cmc.iter().map(|&(_, v)| v).collect();
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*values.last().unwrap(), 1.0);
    }

    #[test]
    fn queries_without_positives_are_excluded_and_counted() {
        let gallery = set(&[(0, 0, vec![1.0, 0.0]), (1, 0, vec![0.0, 1.0])]);
        let queries = set(&[
            (9, 0, vec![1.0, 0.0]),
            (10, 7, vec![0.5, 0.5]),
        ]);
        let m = evaluate_retrieval(&queries, &gallery, &[1]).unwrap();
        assert_eq!(m.num_queries, 1);
        assert_eq!(m.excluded_queries, 1);
    }
}

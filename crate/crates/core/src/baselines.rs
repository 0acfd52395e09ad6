//! Non-gradient selection baselines: random, last-hidden-state (RDS) and TF-IDF.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::influence::{cosine_influence, max_aggregate, Diagnostics, Score, SubtaskFeatureSet};
use crate::math;
use crate::model::{Example, TinyLm};
use crate::train::Checkpoint;
use crate::{Error, Result};

/// Uniformly random `k` of the pool ids, returned in ascending order.
pub fn random_selection(ids: &[u64], k: usize, seed: u64) -> Result<Vec<u64>> {
    if k > ids.len() {
        return Err(Error::OutOfRange {
            what: "k",
            value: k,
            limit: ids.len(),
        });
    }
    let mut pool = ids.to_vec();
    let mut rng = math::rng(math::sub_seed(seed, 0xba5e));
    let (chosen, _) = pool.partial_shuffle(&mut rng, k);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Final-position hidden state at every checkpoint.
pub fn hidden_features(
    model: &TinyLm,
    ex: &Example,
    checkpoints: &[Checkpoint],
) -> Result<Vec<Vec<f64>>> {
    checkpoints
        .iter()
        .map(|c| model.last_hidden(ex, &c.params))
        .collect()
}

/// Representation-based scores: the same lr-weighted cosine and max over
/// subtasks as the gradient kernels, on last-hidden features.
pub fn rds_scores(
    model: &TinyLm,
    checkpoints: &[Checkpoint],
    pool: &[Example],
    val_groups: &[Vec<Example>],
    diag: &mut Diagnostics,
) -> Result<Vec<Score>> {
    if val_groups.is_empty() {
        return Err(Error::Empty("validation subtasks"));
    }
    let lrs: Vec<f64> = checkpoints.iter().map(|c| c.avg_lr).collect();
    let sets = val_groups
        .iter()
        .map(|g| {
            let feats = g
                .iter()
                .map(|ex| hidden_features(model, ex, checkpoints))
                .collect::<Result<Vec<_>>>()?;
            SubtaskFeatureSet::from_examples(g.first().and_then(|e| e.subtask).unwrap_or(0), &feats)
        })
        .collect::<Result<Vec<_>>>()?;
    pool.iter()
        .map(|ex| {
            let f = hidden_features(model, ex, checkpoints)?;
            let per_subtask = sets
                .iter()
                .map(|s| cosine_influence(&f, s, &lrs, diag))
                .collect::<Result<Vec<_>>>()?;
            Ok(Score {
                example_id: ex.id,
                aggregate: max_aggregate(&per_subtask),
                per_subtask,
            })
        })
        .collect()
}

/// Token-count TF-IDF with smoothed idf fitted on the candidate pool.
#[derive(Debug, Clone)]
pub struct TfIdf {
    idf: Vec<f64>,
}

impl TfIdf {
    pub fn fit(pool: &[Example], vocab_size: usize) -> Self {
        let mut df = alloc::vec![0usize; vocab_size];
        let mut seen = alloc::vec![false; vocab_size];
        for ex in pool {
            seen.iter_mut().for_each(|s| *s = false);
            for t in ex.tokens() {
                seen[t as usize] = true;
            }
            for (d, s) in df.iter_mut().zip(&seen) {
                *d += *s as usize;
            }
        }
        let n = pool.len() as f64;
        let idf = df
            .iter()
            .map(|&d| libm::log((1.0 + n) / (1.0 + d as f64)) + 1.0)
            .collect();
        TfIdf { idf }
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    pub fn vector(&self, ex: &Example) -> Vec<f64> {
        let mut v = alloc::vec![0.0; self.idf.len()];
        for t in ex.tokens() {
            v[t as usize] += 1.0;
        }
        for (x, w) in v.iter_mut().zip(&self.idf) {
            *x *= w;
        }
        v
    }
}

/// Cosine to each subtask's mean TF-IDF vector, max over subtasks.
pub fn tfidf_scores(
    pool: &[Example],
    val_groups: &[Vec<Example>],
    vocab_size: usize,
) -> Result<Vec<Score>> {
    if val_groups.iter().any(|g| g.is_empty()) || val_groups.is_empty() {
        return Err(Error::Empty("validation subtasks"));
    }
    let model = TfIdf::fit(pool, vocab_size);
    let centroids: Vec<Vec<f64>> = val_groups
        .iter()
        .map(|g| {
            let mut c = alloc::vec![0.0; vocab_size];
            for ex in g {
                math::axpy(1.0, &model.vector(ex), &mut c);
            }
            math::scale(1.0 / g.len() as f64, &mut c);
            c
        })
        .collect();
    Ok(pool
        .iter()
        .map(|ex| {
            let v = model.vector(ex);
            let per_subtask: Vec<f64> = centroids
                .iter()
                .map(|c| math::cosine(c, &v).unwrap_or(0.0))
                .collect();
            Score {
                example_id: ex.id,
                aggregate: max_aggregate(&per_subtask),
                per_subtask,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::influence::select_top_k;
    use alloc::vec;

    #[test]
    fn random_is_seeded() {
        let ids: Vec<u64> = (0..100).collect();
        let a = random_selection(&ids, 5, 3).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, random_selection(&ids, 5, 3).unwrap());
        assert_ne!(a, random_selection(&ids, 5, 4).unwrap());
        assert!(random_selection(&ids, 101, 3).is_err());
    }

    #[test]
    fn tfidf_duplicate_first_and_disjoint_zero() {
        let pool = vec![
            Example::new(0, None, vec![1, 2], vec![2, 1]),
            Example::new(1, None, vec![20, 21], vec![21, 20]),
            Example::new(2, None, vec![2, 1], vec![1, 2]),
            Example::new(3, None, vec![1, 3], vec![3, 1]),
        ];
        let val = vec![vec![Example::new(99, Some(0), vec![1, 2], vec![1, 2])]];
        let scores = tfidf_scores(&pool, &val, 34).unwrap();
        assert_eq!(scores[1].aggregate, 0.0);
        let top = select_top_k(&scores, 2).unwrap();
        // both token-multiset duplicates tie at 1, lowest id first
        assert_eq!(top[0].example_id, 0);
        assert_eq!(top[1].example_id, 2);
        assert!((top[0].aggregate - 1.0).abs() < 1e-12);
    }
}

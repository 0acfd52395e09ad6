//! Trajectory influence kernels, subtask aggregation and top-k selection.
//!
//! A training example contributes one feature per warmup checkpoint. For a
//! validation subtask we average the (raw) projected validation gradients per
//! checkpoint, then sum over checkpoints weighted by the average epoch
//! learning rate:
//!
//! * `AdamCosine`: `sum_i lr_i * cos(val_i, gamma_i)`
//! * `SignGdCosine`: same, with `sign(grad)` in place of the Adam direction
//! * `SgdDot`: `sum_i lr_i * <val_i, grad_i>`, unnormalized
//!
//! A candidate's score is the maximum over subtasks.

use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    AdamCosine,
    SgdDot,
    SignGdCosine,
}

/// What a training-side feature vector holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    AdamGamma,
    SgdGrad,
    SignGd,
}

impl FeatureKind {
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::AdamGamma => 0,
            FeatureKind::SgdGrad => 1,
            FeatureKind::SignGd => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::AdamGamma),
            1 => Some(FeatureKind::SgdGrad),
            2 => Some(FeatureKind::SignGd),
            _ => None,
        }
    }
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::AdamCosine, Kernel::SgdDot, Kernel::SignGdCosine];

    pub fn feature_kind(self) -> FeatureKind {
        match self {
            Kernel::AdamCosine => FeatureKind::AdamGamma,
            Kernel::SgdDot => FeatureKind::SgdGrad,
            Kernel::SignGdCosine => FeatureKind::SignGd,
        }
    }

    pub fn is_cosine(self) -> bool {
        !matches!(self, Kernel::SgdDot)
    }

    pub fn name(self) -> &'static str {
        match self {
            Kernel::AdamCosine => "adam_cosine",
            Kernel::SgdDot => "sgd_dot",
            Kernel::SignGdCosine => "signgd_cosine",
        }
    }
}

/// Per-checkpoint mean of a subtask's raw validation features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskFeatureSet {
    pub subtask: u32,
    pub epochs: Vec<Vec<f64>>,
}

impl SubtaskFeatureSet {
    /// Averages `features[example][epoch]` over examples, per epoch.
    pub fn from_examples<V: AsRef<[f64]>>(subtask: u32, features: &[Vec<V>]) -> Result<Self> {
        let first = features.first().ok_or(Error::Empty("validation subtask"))?;
        let n_epochs = first.len();
        if n_epochs == 0 {
            return Err(Error::Empty("validation epochs"));
        }
        let d = first[0].as_ref().len();
        let mut epochs = alloc::vec![alloc::vec![0.0; d]; n_epochs];
        for per_epoch in features {
            if per_epoch.len() != n_epochs {
                return Err(Error::dims("validation epochs", n_epochs, per_epoch.len()));
            }
            for (acc, f) in epochs.iter_mut().zip(per_epoch) {
                let f = f.as_ref();
                if f.len() != d {
                    return Err(Error::dims("validation feature", d, f.len()));
                }
                for (a, x) in acc.iter_mut().zip(f) {
                    *a += x;
                }
            }
        }
        let inv = 1.0 / features.len() as f64;
        for acc in epochs.iter_mut() {
            math::scale(inv, acc);
        }
        Ok(SubtaskFeatureSet { subtask, epochs })
    }

    pub fn dim(&self) -> usize {
        self.epochs.first().map_or(0, |e| e.len())
    }
}

/// Counts epoch terms skipped because one side had zero norm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub zero_norm_terms: u64,
    pub terms: u64,
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.zero_norm_terms += other.zero_norm_terms;
        self.terms += other.terms;
    }
}

fn check_alignment<V: AsRef<[f64]>>(
    train: &[V],
    val: &SubtaskFeatureSet,
    lrs: &[f64],
) -> Result<()> {
    if train.len() != lrs.len() {
        return Err(Error::dims("training epochs", lrs.len(), train.len()));
    }
    if val.epochs.len() != lrs.len() {
        return Err(Error::dims(
            "validation epochs",
            lrs.len(),
            val.epochs.len(),
        ));
    }
    for (t, v) in train.iter().zip(&val.epochs) {
        if t.as_ref().len() != v.len() {
            return Err(Error::dims("feature dim", v.len(), t.as_ref().len()));
        }
    }
    Ok(())
}

/// `sum_i lr_i * cos(val_i, train_i)`; zero-norm terms contribute 0.
pub fn cosine_influence<V: AsRef<[f64]>>(
    train: &[V],
    val: &SubtaskFeatureSet,
    lrs: &[f64],
    diag: &mut Diagnostics,
) -> Result<f64> {
    check_alignment(train, val, lrs)?;
    let mut total = 0.0;
    for ((t, v), &lr) in train.iter().zip(&val.epochs).zip(lrs) {
        diag.terms += 1;
        match math::cosine(v, t.as_ref()) {
            Some(c) => total += lr * c,
            None => diag.zero_norm_terms += 1,
        }
    }
    Ok(total)
}

/// `sum_i lr_i * <val_i, train_i>`.
pub fn dot_influence<V: AsRef<[f64]>>(
    train: &[V],
    val: &SubtaskFeatureSet,
    lrs: &[f64],
    diag: &mut Diagnostics,
) -> Result<f64> {
    check_alignment(train, val, lrs)?;
    diag.terms += lrs.len() as u64;
    Ok(train
        .iter()
        .zip(&val.epochs)
        .zip(lrs)
        .map(|((t, v), &lr)| lr * math::dot(v, t.as_ref()))
        .sum())
}

/// Adam influence: training features are projected Adam update directions.
pub fn inf_adam<V: AsRef<[f64]>>(
    train: &[V],
    val: &SubtaskFeatureSet,
    lrs: &[f64],
    diag: &mut Diagnostics,
) -> Result<f64> {
    cosine_influence(train, val, lrs, diag)
}

/// SignGD influence: training features are projected gradient signs.
pub fn inf_signgd<V: AsRef<[f64]>>(
    train: &[V],
    val: &SubtaskFeatureSet,
    lrs: &[f64],
    diag: &mut Diagnostics,
) -> Result<f64> {
    cosine_influence(train, val, lrs, diag)
}

/// SGD influence: raw (norm-restored) projected gradients, dot product.
pub fn inf_sgd<V: AsRef<[f64]>>(
    train: &[V],
    val: &SubtaskFeatureSet,
    lrs: &[f64],
    diag: &mut Diagnostics,
) -> Result<f64> {
    dot_influence(train, val, lrs, diag)
}

impl Kernel {
    pub fn influence<V: AsRef<[f64]>>(
        self,
        train: &[V],
        val: &SubtaskFeatureSet,
        lrs: &[f64],
        diag: &mut Diagnostics,
    ) -> Result<f64> {
        match self {
            Kernel::AdamCosine => inf_adam(train, val, lrs, diag),
            Kernel::SgdDot => inf_sgd(train, val, lrs, diag),
            Kernel::SignGdCosine => inf_signgd(train, val, lrs, diag),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScore {
    pub example_id: u64,
    /// One value per subtask, in the order the subtask sets were given.
    pub per_subtask: Vec<f64>,
    pub aggregate: f64,
    pub kernel: Kernel,
}

/// Per-subtask influence of one candidate plus the max over subtasks.
pub fn score<V: AsRef<[f64]>>(
    example_id: u64,
    train: &[V],
    subtasks: &[SubtaskFeatureSet],
    lrs: &[f64],
    kernel: Kernel,
    diag: &mut Diagnostics,
) -> Result<InfluenceScore> {
    if subtasks.is_empty() {
        return Err(Error::Empty("subtask sets"));
    }
    let per_subtask = subtasks
        .iter()
        .map(|s| kernel.influence(train, s, lrs, diag))
        .collect::<Result<Vec<_>>>()?;
    Ok(InfluenceScore {
        example_id,
        aggregate: max_aggregate(&per_subtask),
        per_subtask,
        kernel,
    })
}

pub fn max_aggregate(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Anything that can be ranked for selection.
pub trait Ranked {
    fn example_id(&self) -> u64;
    fn aggregate(&self) -> f64;
}

impl Ranked for InfluenceScore {
    fn example_id(&self) -> u64 {
        self.example_id
    }
    fn aggregate(&self) -> f64 {
        self.aggregate
    }
}

/// A kernel-free score (baselines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub example_id: u64,
    pub per_subtask: Vec<f64>,
    pub aggregate: f64,
}

impl Ranked for Score {
    fn example_id(&self) -> u64 {
        self.example_id
    }
    fn aggregate(&self) -> f64 {
        self.aggregate
    }
}

impl From<InfluenceScore> for Score {
    fn from(s: InfluenceScore) -> Self {
        Score {
            example_id: s.example_id,
            per_subtask: s.per_subtask,
            aggregate: s.aggregate,
        }
    }
}

/// Descending by aggregate, ties by ascending example id.
pub fn ranking_order<T: Ranked>(a: &T, b: &T) -> Ordering {
    b.aggregate()
        .total_cmp(&a.aggregate())
        .then(a.example_id().cmp(&b.example_id()))
}

/// The `k` highest-scoring candidates, best first.
pub fn select_top_k<T: Ranked + Clone>(scores: &[T], k: usize) -> Result<Vec<T>> {
    if k > scores.len() {
        return Err(Error::OutOfRange {
            what: "k",
            value: k,
            limit: scores.len(),
        });
    }
    let mut sorted = scores.to_vec();
    if k > 0 && k < sorted.len() {
        sorted.select_nth_unstable_by(k - 1, ranking_order);
        sorted.truncate(k);
    }
    sorted.sort_by(ranking_order);
    sorted.truncate(k);
    Ok(sorted)
}

/// `ceil(fraction * n)`, clamped to `[1, n]` for non-empty pools.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    (libm::ceil(fraction * n as f64 - 1e-9) as usize).clamp(1, n)
}

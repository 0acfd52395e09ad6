//! Oracle checks for the approximations influence scoring relies on.
//!
//! * first-order validity: the error of the linearized loss change after one
//!   SGD or Adam step must shrink quadratically when the step size is halved
//! * selection agreement: brute-force one-step retraining on every candidate
//!   must rank candidates like the influence inner product does
//! * length bias: completion-averaged gradients shrink with completion length,
//!   so raw dot products favour short examples and cosine does not
//! * projection fidelity: projected cosines converge to exact ones as `d` grows

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::influence::{
    cosine_influence, dot_influence, max_aggregate, select_top_k, Diagnostics, Score,
    SubtaskFeatureSet,
};
use crate::linear::linear_softmax_loss_grad;
use crate::math;
use crate::model::{Example, TinyLm};
use crate::optimizer::{self, AdamConfig, AdamState};
use crate::params::ParamVector;
use crate::projection::{project_batch, ProjectionSpec};
use crate::stats;
use crate::train::Checkpoint;
use crate::{Error, Result};

/// A differentiable per-sample loss over a flat parameter vector.
pub trait Objective {
    type Sample;
    fn loss(&self, sample: &Self::Sample, params: &[f64]) -> Result<f64>;
    fn grad(&self, sample: &Self::Sample, params: &[f64]) -> Result<Vec<f64>>;
}

/// The tiny LM restricted to its trainable segments.
#[derive(Debug, Clone)]
pub struct LmObjective<'a> {
    pub model: &'a TinyLm,
    pub base: ParamVector,
}

impl LmObjective<'_> {
    fn full(&self, trainable: &[f64]) -> Result<ParamVector> {
        let mut sub = self.model.trainable(&self.base);
        if sub.len() != trainable.len() {
            return Err(Error::dims("trainable params", sub.len(), trainable.len()));
        }
        sub.values.copy_from_slice(trainable);
        let mut full = self.base.clone();
        full.scatter(&sub)?;
        Ok(full)
    }
}

impl Objective for LmObjective<'_> {
    type Sample = Example;

    fn loss(&self, sample: &Example, params: &[f64]) -> Result<f64> {
        self.model.loss(sample, &self.full(params)?)
    }

    fn grad(&self, sample: &Example, params: &[f64]) -> Result<Vec<f64>> {
        Ok(self.model.grad(sample, &self.full(params)?, true)?.values)
    }
}

/// Softmax regression; a sample is `(features, label)`.
#[derive(Debug, Clone, Copy)]
pub struct LinearObjective;

impl Objective for LinearObjective {
    type Sample = (Vec<f64>, usize);

    fn loss(&self, s: &Self::Sample, params: &[f64]) -> Result<f64> {
        Ok(linear_softmax_loss_grad(&s.0, s.1, params)?.0)
    }

    fn grad(&self, s: &Self::Sample, params: &[f64]) -> Result<Vec<f64>> {
        Ok(linear_softmax_loss_grad(&s.0, s.1, params)?.1)
    }
}

/// `0.5 * sum_j h_j (theta_j - c_j)^2` with sample `c`: its Taylor remainder is
/// exactly quadratic in the step size.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub curvature: Vec<f64>,
}

impl Objective for QuadraticObjective {
    type Sample = Vec<f64>;

    fn loss(&self, c: &Vec<f64>, p: &[f64]) -> Result<f64> {
        Ok(0.5
            * p.iter()
                .zip(c)
                .zip(&self.curvature)
                .map(|((x, c), h)| h * (x - c) * (x - c))
                .sum::<f64>())
    }

    fn grad(&self, c: &Vec<f64>, p: &[f64]) -> Result<Vec<f64>> {
        Ok(p.iter()
            .zip(c)
            .zip(&self.curvature)
            .map(|((x, c), h)| h * (x - c))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

/// One named check: the statistic, its acceptance band and how it was measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub procedure: String,
    pub statistic: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub samples: usize,
    pub min_samples: usize,
    pub seed: u64,
    pub status: Status,
    #[serde(default)]
    pub details: Vec<(String, f64)>,
}

impl CheckResult {
    #[allow(clippy::too_many_arguments)]
    pub fn judge(
        name: &str,
        procedure: &str,
        statistic: f64,
        lower: Option<f64>,
        upper: Option<f64>,
        samples: usize,
        min_samples: usize,
        seed: u64,
    ) -> Self {
        let in_band = statistic.is_finite()
            && lower.is_none_or(|l| statistic >= l)
            && upper.is_none_or(|u| statistic <= u);
        let status = if samples >= min_samples && in_band {
            Status::Pass
        } else {
            Status::Fail
        };
        CheckResult {
            name: name.into(),
            procedure: procedure.into(),
            statistic,
            lower,
            upper,
            samples,
            min_samples,
            seed,
            status,
            details: Vec::new(),
        }
    }

    pub fn skipped(name: &str, procedure: &str, reason: &str, seed: u64) -> Self {
        CheckResult {
            name: name.into(),
            procedure: alloc::format!("{procedure} (skipped: {reason})"),
            statistic: f64::NAN,
            lower: None,
            upper: None,
            samples: 0,
            min_samples: 0,
            seed,
            status: Status::Skipped,
            details: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    pub fn with_detail(mut self, key: &str, value: f64) -> Self {
        self.details.push((key.to_string(), value));
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub checks: Vec<CheckResult>,
}

impl OracleReport {
    pub fn push(&mut self, c: CheckResult) {
        self.checks.push(c);
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Where one training step goes from a given state.
#[derive(Debug, Clone)]
pub enum StepRule {
    Sgd,
    /// Adam from a moment snapshot (the snapshot is never advanced).
    Adam {
        config: AdamConfig,
        state: AdamState,
    },
}

impl StepRule {
    /// Parameter displacement per unit learning rate, negated: `theta' = theta - lr * dir`.
    pub fn direction(&self, grad: &[f64]) -> Result<Vec<f64>> {
        match self {
            StepRule::Sgd => Ok(grad.to_vec()),
            StepRule::Adam { config, state } => optimizer::gamma(config, grad, state),
        }
    }

    /// The parameters after one real step; for Adam this runs the stepper itself.
    pub fn step(&self, params: &[f64], grad: &[f64], lr: f64) -> Result<Vec<f64>> {
        let mut p = params.to_vec();
        match self {
            StepRule::Sgd => optimizer::sgd_step(&mut p, grad, lr)?,
            StepRule::Adam { config, state } => {
                let mut s = state.clone();
                optimizer::adam_step(config, &mut p, grad, &mut s, lr)?;
            }
        }
        Ok(p)
    }
}

/// One first-order trial: train on `train`, watch the loss on `target`.
#[derive(Debug, Clone)]
pub struct Trial<S> {
    pub params: Vec<f64>,
    pub train: S,
    pub target: S,
    pub rule: StepRule,
}

/// Measured vs linearized loss change for one step size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepError {
    pub lr: f64,
    pub actual: f64,
    pub predicted: f64,
}

impl StepError {
    pub fn error(&self) -> f64 {
        libm::fabs(self.actual - self.predicted)
    }
}

/// Loss change on `target` after one step on `train`, against its first-order prediction.
pub fn step_errors<O: Objective>(
    obj: &O,
    trial: &Trial<O::Sample>,
    lrs: &[f64],
) -> Result<Vec<StepError>> {
    let g = obj.grad(&trial.train, &trial.params)?;
    let g_target = obj.grad(&trial.target, &trial.params)?;
    let dir = trial.rule.direction(&g)?;
    let base = obj.loss(&trial.target, &trial.params)?;
    lrs.iter()
        .map(|&lr| {
            let moved = trial.rule.step(&trial.params, &g, lr)?;
            let after = obj.loss(&trial.target, &moved)?;
            if !after.is_finite() {
                return Err(Error::NumericFault("oracle loss"));
            }
            Ok(StepError {
                lr,
                actual: after - base,
                predicted: -lr * math::dot(&g_target, &dir),
            })
        })
        .collect()
}

/// Mean of `err(lr_{k+1}) / err(lr_k)` over consecutive step sizes and trials.
/// Returns the mean and the number of ratios it averages.
pub fn shrinkage_ratio<O: Objective>(
    obj: &O,
    trials: &[Trial<O::Sample>],
    lrs: &[f64],
) -> Result<(f64, usize)> {
    let mut ratios = Vec::new();
    for t in trials {
        let errs = step_errors(obj, t, lrs)?;
        for w in errs.windows(2) {
            let (a, b) = (w[0].error(), w[1].error());
            if a > 0.0 {
                ratios.push(b / a);
            }
        }
    }
    Ok((stats::mean(&ratios), ratios.len()))
}

pub const FIRST_ORDER_BAND: (f64, f64) = (0.15, 0.4);
pub const FIRST_ORDER_TIGHT_BAND: (f64, f64) = (0.2, 0.3);
pub const FIRST_ORDER_MIN_TRIALS: usize = 20;

/// The halving protocol: `lrs` must halve at each step.
pub fn check_first_order<O: Objective>(
    name: &str,
    obj: &O,
    trials: &[Trial<O::Sample>],
    lrs: &[f64],
    band: (f64, f64),
    seed: u64,
) -> Result<CheckResult> {
    if lrs.len() < 2 {
        return Err(Error::Empty("step sizes"));
    }
    let (ratio, n) = shrinkage_ratio(obj, trials, lrs)?;
    Ok(CheckResult::judge(
        name,
        "mean over trials of |actual - linearized| loss-change error ratio when the step size halves",
        ratio,
        Some(band.0),
        Some(band.1),
        trials.len(),
        FIRST_ORDER_MIN_TRIALS,
        seed,
    )
    .with_detail("ratios", n as f64)
    .with_detail("largest_lr", lrs[0]))
}

/// Random softmax-regression trials.
pub fn linear_trials(
    n: usize,
    features: usize,
    classes: usize,
    seed: u64,
    adam: Option<AdamConfig>,
) -> Vec<Trial<(Vec<f64>, usize)>> {
    let mut rng = math::rng(seed);
    (0..n)
        .map(|_| {
            let params: Vec<f64> = math::gaussian_vec(&mut rng, features * classes)
                .into_iter()
                .map(|w| 0.5 * w)
                .collect();
            let sample = |rng: &mut math::SeededRng| {
                (
                    math::gaussian_vec(rng, features),
                    rng.random_range(0..classes),
                )
            };
            let train = sample(&mut rng);
            let target = sample(&mut rng);
            let rule = match adam {
                None => StepRule::Sgd,
                Some(config) => {
                    let state = warm_state(&mut rng, &config, params.len(), 5, |rng| {
                        let s = sample(rng);
                        LinearObjective.grad(&s, &params).unwrap()
                    });
                    StepRule::Adam { config, state }
                }
            };
            Trial {
                params,
                train,
                target,
                rule,
            }
        })
        .collect()
}

/// Moment snapshot after folding in `steps` sampled gradients.
pub fn warm_state<R: Rng>(
    rng: &mut R,
    config: &AdamConfig,
    len: usize,
    steps: usize,
    mut grad: impl FnMut(&mut R) -> Vec<f64>,
) -> AdamState {
    let mut state = AdamState::new(len);
    let mut scratch = alloc::vec![0.0; len];
    for _ in 0..steps {
        let g = grad(rng);
        optimizer::adam_step(config, &mut scratch, &g, &mut state, 0.0).unwrap();
    }
    state
}

/// Tiny-LM trials sharing the frozen base `model.init(seed)`; the trainable
/// part is redrawn per trial (with a non-zero adapter `B`).
pub fn lm_trials(
    model: &TinyLm,
    pool: &[Example],
    n: usize,
    seed: u64,
    adam: Option<AdamConfig>,
) -> Result<(Vec<Trial<Example>>, ParamVector)> {
    if pool.len() < 2 {
        return Err(Error::Empty("trial pool"));
    }
    let base = model.init(seed);
    let obj = LmObjective {
        model,
        base: base.clone(),
    };
    let mut rng = math::rng(seed);
    let mut trials = Vec::with_capacity(n);
    for i in 0..n {
        let mut drawn = model.init(math::sub_seed(seed, i as u64 + 1));
        if let Some(b) = drawn.get_mut(crate::model::LORA_B) {
            for x in b.iter_mut() {
                *x = 0.1 * math::gaussian(&mut rng);
            }
        }
        let params = model.trainable(&drawn).values;
        let train = pool[rng.random_range(0..pool.len())].clone();
        let target = pool[rng.random_range(0..pool.len())].clone();
        let rule = match adam {
            None => StepRule::Sgd,
            Some(config) => {
                let state = warm_state(&mut rng, &config, params.len(), 5, |rng| {
                    let ex = &pool[rng.random_range(0..pool.len())];
                    obj.grad(ex, &params).unwrap()
                });
                StepRule::Adam { config, state }
            }
        };
        trials.push(Trial {
            params,
            train,
            target,
            rule,
        });
    }
    Ok((trials, base))
}

/// Largest step size in `grid` (tried in order) whose halving ratio falls in `band`.
pub fn calibrate_lr<O: Objective>(
    obj: &O,
    trials: &[Trial<O::Sample>],
    grid: &[f64],
    band: (f64, f64),
) -> Result<Option<f64>> {
    for &lr in grid {
        let (r, _) = shrinkage_ratio(obj, trials, &[lr, lr / 2.0, lr / 4.0])?;
        if r >= band.0 && r <= band.1 {
            return Ok(Some(lr));
        }
    }
    Ok(None)
}

/// A brute-force selection trial: several candidates, one validation target.
#[derive(Debug, Clone)]
pub struct SelectionTrial<S> {
    pub params: Vec<f64>,
    pub candidates: Vec<S>,
    pub target: S,
    pub rule: StepRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    /// Loss change on the target after one step on each candidate.
    pub actual: Vec<f64>,
    /// `<grad(target), direction(candidate)>`.
    pub influence: Vec<f64>,
    pub agrees: bool,
    pub spearman: f64,
}

/// Retrains once per candidate and compares the best actual loss decrease
/// with the influence argmax. Exact influence ties all count as agreement.
pub fn run_selection_trial<O: Objective>(
    obj: &O,
    trial: &SelectionTrial<O::Sample>,
    lr: f64,
) -> Result<SelectionOutcome> {
    if trial.candidates.is_empty() {
        return Err(Error::Empty("candidates"));
    }
    let g_target = obj.grad(&trial.target, &trial.params)?;
    let base = obj.loss(&trial.target, &trial.params)?;
    let mut actual = Vec::with_capacity(trial.candidates.len());
    let mut influence = Vec::with_capacity(trial.candidates.len());
    for c in &trial.candidates {
        let g = obj.grad(c, &trial.params)?;
        let dir = trial.rule.direction(&g)?;
        influence.push(math::dot(&g_target, &dir));
        let moved = trial.rule.step(&trial.params, &g, lr)?;
        let after = obj.loss(&trial.target, &moved)?;
        if !after.is_finite() {
            return Err(Error::NumericFault("oracle loss"));
        }
        actual.push(after - base);
    }
    let best_actual = actual
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0;
    let top = max_aggregate(&influence);
    let agrees = influence[best_actual] == top;
    let neg: Vec<f64> = influence.iter().map(|x| -x).collect();
    let spearman = if influence.iter().all(|&x| x == influence[0]) {
        1.0
    } else {
        stats::spearman(&actual, &neg)
    };
    Ok(SelectionOutcome {
        actual,
        influence,
        agrees,
        spearman,
    })
}

pub const SELECTION_MIN_TRIALS: usize = 100;
pub const SELECTION_AGREEMENT: f64 = 0.9;
pub const SELECTION_SPEARMAN: f64 = 0.9;

/// Agreement rate and mean Spearman over trials, as two checks.
pub fn check_selection_oracle<O: Objective>(
    name: &str,
    obj: &O,
    trials: &[SelectionTrial<O::Sample>],
    lr: f64,
    seed: u64,
) -> Result<(CheckResult, CheckResult)> {
    let mut agree = 0usize;
    let mut rhos = Vec::with_capacity(trials.len());
    for t in trials {
        let o = run_selection_trial(obj, t, lr)?;
        agree += o.agrees as usize;
        rhos.push(o.spearman);
    }
    let n = trials.len();
    let rate = if n == 0 {
        f64::NAN
    } else {
        agree as f64 / n as f64
    };
    let a = CheckResult::judge(
        &alloc::format!("{name}_agreement"),
        "fraction of trials where argmin of brute-force one-step loss change equals argmax influence",
        rate,
        Some(SELECTION_AGREEMENT),
        None,
        n,
        SELECTION_MIN_TRIALS,
        seed,
    )
    .with_detail("lr", lr);
    let s = CheckResult::judge(
        &alloc::format!("{name}_spearman"),
        "mean Spearman correlation between brute-force loss change and negated influence",
        stats::mean(&rhos),
        Some(SELECTION_SPEARMAN),
        None,
        n,
        SELECTION_MIN_TRIALS,
        seed,
    )
    .with_detail("lr", lr);
    Ok((a, s))
}

/// Trials drawing `candidates` pool examples and one validation target each.
pub fn lm_selection_trials(
    model: &TinyLm,
    pool: &[Example],
    targets: &[Example],
    n: usize,
    candidates: usize,
    seed: u64,
    adam: Option<AdamConfig>,
) -> Result<(Vec<SelectionTrial<Example>>, ParamVector)> {
    if pool.len() < candidates || targets.is_empty() {
        return Err(Error::Empty("selection trial pool"));
    }
    let (base_trials, base) = lm_trials(model, pool, n, seed, adam)?;
    let mut rng = math::rng(math::sub_seed(seed, 0x5e1ec7));
    let trials = base_trials
        .into_iter()
        .map(|t| {
            let cands: Vec<Example> = pool
                .choose_multiple(&mut rng, candidates)
                .cloned()
                .collect();
            SelectionTrial {
                params: t.params,
                candidates: cands,
                target: targets[rng.random_range(0..targets.len())].clone(),
                rule: t.rule,
            }
        })
        .collect();
    Ok((trials, base))
}

/// First-order view of selection trials: one step on the first candidate.
pub fn first_candidate_trials<S: Clone>(trials: &[SelectionTrial<S>]) -> Vec<Trial<S>> {
    trials
        .iter()
        .map(|t| Trial {
            params: t.params.clone(),
            train: t.candidates[0].clone(),
            target: t.target.clone(),
            rule: t.rule.clone(),
        })
        .collect()
}

/// Step sizes for the halving protocol on the linear model.
pub const LINEAR_SGD_LRS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
pub const LINEAR_ADAM_LRS: [f64; 4] = [0.02, 0.01, 0.005, 0.0025];
/// Step sizes for the halving protocol on the tiny LM.
pub const LM_SGD_LRS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
pub const LM_ADAM_LRS: [f64; 4] = [0.004, 0.002, 0.001, 0.0005];

/// Linear-softmax SGD and Adam checks with the tight band, then the tiny LM
/// with the wide band. The LM checks are skipped if any linear check fails.
pub fn first_order_suite(
    model: &TinyLm,
    pool: &[Example],
    trials: usize,
    seed: u64,
) -> Result<OracleReport> {
    let mut report = OracleReport::default();
    let adam = AdamConfig::default();
    for (name, cfg, lrs) in [
        ("first_order_sgd_linear", None, LINEAR_SGD_LRS),
        ("first_order_adam_linear", Some(adam), LINEAR_ADAM_LRS),
    ] {
        let t = linear_trials(trials, 8, 5, seed, cfg);
        report.push(check_first_order(
            name,
            &LinearObjective,
            &t,
            &lrs,
            FIRST_ORDER_TIGHT_BAND,
            seed,
        )?);
    }
    let linear_ok = report.checks.iter().all(CheckResult::passed);
    for (name, cfg, lrs) in [
        ("first_order_sgd_lm", None, LM_SGD_LRS),
        ("first_order_adam_lm", Some(adam), LM_ADAM_LRS),
    ] {
        if !linear_ok {
            report.push(CheckResult::skipped(
                name,
                "halving protocol on the tiny LM",
                "linear-softmax checks did not pass",
                seed,
            ));
            continue;
        }
        let (t, base) = lm_trials(model, pool, trials, seed, cfg)?;
        let obj = LmObjective { model, base };
        report.push(check_first_order(
            name,
            &obj,
            &t,
            &lrs,
            FIRST_ORDER_BAND,
            seed,
        )?);
    }
    Ok(report)
}

/// Default selection step size on the tiny LM.
pub const SELECTION_LR: f64 = 1e-3;

/// Brute-force selection agreement for the SGD and Adam rules. The step size
/// starts at [`SELECTION_LR`] and halves (at most `max_halvings` times) until
/// both statistics clear their thresholds; the value used is in the details.
pub fn selection_suite(
    model: &TinyLm,
    pool: &[Example],
    targets: &[Example],
    trials: usize,
    candidates: usize,
    max_halvings: usize,
    seed: u64,
) -> Result<OracleReport> {
    let mut report = OracleReport::default();
    for (name, cfg) in [
        ("selection_sgd", None),
        ("selection_adam", Some(AdamConfig::default())),
    ] {
        let (t, base) = lm_selection_trials(model, pool, targets, trials, candidates, seed, cfg)?;
        let obj = LmObjective { model, base };
        let mut lr = SELECTION_LR;
        let mut result = check_selection_oracle(name, &obj, &t, lr, seed)?;
        for _ in 0..max_halvings {
            if result.0.passed() && result.1.passed() {
                break;
            }
            lr /= 2.0;
            result = check_selection_oracle(name, &obj, &t, lr, seed)?;
        }
        report.push(result.0);
        report.push(result.1);
    }
    Ok(report)
}

/// Per-example numbers behind the length-bias study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    pub example_id: u64,
    pub completion_len: usize,
    /// Gradient norm averaged over checkpoints.
    pub grad_norm: f64,
    pub dot_score: f64,
    pub cosine_score: f64,
    pub selected_dot: bool,
    pub selected_cosine: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthBiasStudy {
    pub report: OracleReport,
    pub rows: Vec<LengthRow>,
}

pub const LENGTH_CORRELATION_MAX: f64 = -0.3;
pub const LENGTH_MIN_EXAMPLES: usize = 50;

/// Gradient norm against completion length, and the mean selected length under
/// dot-product vs cosine influence on the same exact (unprojected) gradients.
pub fn study_length_bias(
    model: &TinyLm,
    checkpoints: &[Checkpoint],
    pool: &[Example],
    val_groups: &[Vec<Example>],
    k: usize,
    seed: u64,
) -> Result<LengthBiasStudy> {
    let mut report = OracleReport::default();
    let lens: Vec<f64> = pool.iter().map(|e| e.completion.len() as f64).collect();
    let (lo, hi) = lens.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &l| {
        (lo.min(l), hi.max(l))
    });
    if pool.is_empty() || hi < 6.0 * lo {
        for name in ["length_grad_norm_correlation", "length_dot_vs_cosine"] {
            report.push(CheckResult::skipped(
                name,
                "length-bias study",
                "completion lengths do not span a 6:1 ratio",
                seed,
            ));
        }
        return Ok(LengthBiasStudy {
            report,
            rows: Vec::new(),
        });
    }
    let lrs: Vec<f64> = checkpoints.iter().map(|c| c.avg_lr).collect();
    let grads = |ex: &Example| -> Result<Vec<Vec<f64>>> {
        checkpoints
            .iter()
            .map(|c| Ok(model.grad(ex, &c.params, true)?.values))
            .collect()
    };
    let sets = val_groups
        .iter()
        .map(|g| {
            let f = g.iter().map(&grads).collect::<Result<Vec<_>>>()?;
            SubtaskFeatureSet::from_examples(g.first().and_then(|e| e.subtask).unwrap_or(0), &f)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut diag = Diagnostics::default();
    let mut rows = Vec::with_capacity(pool.len());
    let mut dot_scores = Vec::with_capacity(pool.len());
    let mut cos_scores = Vec::with_capacity(pool.len());
    for ex in pool {
        let g = grads(ex)?;
        let norm = stats::mean(&g.iter().map(|v| math::norm(v)).collect::<Vec<_>>());
        let dots = sets
            .iter()
            .map(|s| dot_influence(&g, s, &lrs, &mut diag))
            .collect::<Result<Vec<_>>>()?;
        let coss = sets
            .iter()
            .map(|s| cosine_influence(&g, s, &lrs, &mut diag))
            .collect::<Result<Vec<_>>>()?;
        dot_scores.push(Score {
            example_id: ex.id,
            aggregate: max_aggregate(&dots),
            per_subtask: dots,
        });
        cos_scores.push(Score {
            example_id: ex.id,
            aggregate: max_aggregate(&coss),
            per_subtask: coss,
        });
        rows.push(LengthRow {
            example_id: ex.id,
            completion_len: ex.completion.len(),
            grad_norm: norm,
            dot_score: 0.0,
            cosine_score: 0.0,
            selected_dot: false,
            selected_cosine: false,
        });
    }
    let dot_sel = select_top_k(&dot_scores, k)?;
    let cos_sel = select_top_k(&cos_scores, k)?;
    for (i, row) in rows.iter_mut().enumerate() {
        row.dot_score = dot_scores[i].aggregate;
        row.cosine_score = cos_scores[i].aggregate;
        row.selected_dot = dot_sel.iter().any(|s| s.example_id == row.example_id);
        row.selected_cosine = cos_sel.iter().any(|s| s.example_id == row.example_id);
    }
    let norms: Vec<f64> = rows.iter().map(|r| r.grad_norm).collect();
    let r = stats::pearson(&norms, &lens);
    report.push(CheckResult::judge(
        "length_grad_norm_correlation",
        "Pearson correlation of checkpoint-averaged gradient norm with completion length",
        r,
        None,
        Some(LENGTH_CORRELATION_MAX),
        pool.len(),
        LENGTH_MIN_EXAMPLES,
        seed,
    ));
    let mean_len = |sel: &[Score]| {
        let by_id = |id: u64| pool.iter().find(|e| e.id == id).unwrap().completion.len() as f64;
        stats::mean(&sel.iter().map(|s| by_id(s.example_id)).collect::<Vec<_>>())
    };
    let dot_len = mean_len(&dot_sel);
    let cos_len = mean_len(&cos_sel);
    // statistic: dot-mean minus cosine-mean, must be strictly negative
    report.push(
        CheckResult::judge(
            "length_dot_vs_cosine",
            "mean selected completion length under dot-product minus under cosine influence",
            dot_len - cos_len,
            None,
            Some(-f64::MIN_POSITIVE),
            k,
            1,
            seed,
        )
        .with_detail("dot_mean_len", dot_len)
        .with_detail("cosine_mean_len", cos_len)
        .with_detail("pool_mean_len", stats::mean(&lens)),
    );
    Ok(LengthBiasStudy { report, rows })
}

/// Mean |cos(projected) - cos(exact)| over random pairs, per output dimension.
pub fn projection_cosine_mae(
    vectors: &[Vec<f64>],
    pairs: usize,
    dims: &[usize],
    seed: u64,
) -> Result<Vec<f64>> {
    if vectors.len() < 2 {
        return Err(Error::Empty("projection vectors"));
    }
    let p = vectors[0].len();
    let mut rng = math::rng(seed);
    let idx: Vec<(usize, usize)> = (0..pairs)
        .map(|_| {
            let a = rng.random_range(0..vectors.len());
            let mut b = rng.random_range(0..vectors.len() - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        })
        .collect();
    let exact: Vec<f64> = idx
        .iter()
        .map(|&(a, b)| math::cosine(&vectors[a], &vectors[b]).unwrap_or(0.0))
        .collect();
    dims.iter()
        .map(|&d| {
            let spec = ProjectionSpec::new(p, d, math::sub_seed(seed, d as u64));
            let projected = project_batch(&spec, vectors)?;
            let errs: Vec<f64> = idx
                .iter()
                .zip(&exact)
                .map(|(&(a, b), &e)| {
                    libm::fabs(math::cosine(&projected[a], &projected[b]).unwrap_or(0.0) - e)
                })
                .collect();
            Ok(stats::mean(&errs))
        })
        .collect()
}

/// MAE must fall strictly along `dims` and the last must be under half the first.
pub fn study_projection_fidelity(
    vectors: &[Vec<f64>],
    pairs: usize,
    dims: &[usize],
    seed: u64,
) -> Result<(OracleReport, Vec<f64>)> {
    let maes = projection_cosine_mae(vectors, pairs, dims, seed)?;
    let mut report = OracleReport::default();
    let decreasing = maes.windows(2).all(|w| w[1] < w[0]);
    let mut mono = CheckResult::judge(
        "projection_mae_monotone",
        "exact vs projected cosine MAE strictly decreasing over the d grid (1 = yes)",
        decreasing as u8 as f64,
        Some(1.0),
        None,
        pairs,
        1,
        seed,
    );
    for (d, m) in dims.iter().zip(&maes) {
        mono = mono.with_detail(&alloc::format!("mae_d{d}"), *m);
    }
    report.push(mono);
    let first = maes[0];
    let last = *maes.last().unwrap();
    report.push(CheckResult::judge(
        "projection_mae_halved",
        "MAE at the largest d divided by MAE at the smallest d",
        last / first,
        None,
        Some(0.5 - f64::EPSILON),
        pairs,
        1,
        seed,
    ));
    Ok((report, maes))
}

/// Order-preserving, seeded sample of `n` items.
pub fn sample<T: Clone>(items: &[T], n: usize, seed: u64) -> Vec<T> {
    let mut rng = math::rng(seed);
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

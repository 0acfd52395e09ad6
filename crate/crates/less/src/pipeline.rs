//! Warmup, featurization into the datastore, scoring, selection, target
//! training and the end-to-end experiment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use anyhow::{bail, ensure, Context, Result};
use less_core::baselines::{random_selection, rds_scores, tfidf_scores};
use less_core::influence::{
    fraction_count, score, select_top_k, Diagnostics, FeatureKind, InfluenceScore, Kernel, Ranked,
    Score, SubtaskFeatureSet,
};
use less_core::math::sub_seed;
use less_core::optimizer::{gamma, sign, AdamConfig};
use less_core::projection::{project, ProjectionSpec};
use less_core::synthdata::{generate_pool, generate_test, generate_val, Task, VOCAB_SIZE};
use less_core::train::{self, evaluate, Checkpoint, EvalMetrics, TrainConfig};
use less_core::{Example, TinyLm, TinyLmConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataConfig, ProjectionConfig, RunConfig};
use crate::corpus;
use crate::datastore::{Datastore, DatastoreWriter, Header};

/// Gradient evaluations, split by side. Scoring against a new target task
/// must leave `train` untouched.
#[derive(Debug, Default)]
pub struct Counters {
    pub train: AtomicU64,
    pub val: AtomicU64,
}

impl Counters {
    pub fn train(&self) -> u64 {
        self.train.load(Ordering::Relaxed)
    }
    pub fn val(&self) -> u64 {
        self.val.load(Ordering::Relaxed)
    }
}

/// SHA-256 over the model config JSON and the init seed.
pub fn fingerprint(config: &TinyLmConfig, init_seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(init_seed.to_le_bytes());
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pool: Vec<Example>,
    pub val: Vec<Vec<Example>>,
    pub test: Vec<Vec<Example>>,
}

impl Corpus {
    pub fn generate(data: &DataConfig) -> Result<Corpus> {
        Ok(Corpus {
            pool: generate_pool(&data.pool_config())?,
            val: generate_val(
                &data.targets,
                data.shots,
                data.seed,
                data.min_len,
                data.max_len,
            )?,
            test: generate_test(
                &data.targets,
                data.test_per_task,
                data.seed,
                data.min_len,
                data.max_len,
            )?,
        })
    }

    /// Loads the configured corpus files, generating whatever is not given.
    pub fn load(cfg: &RunConfig) -> Result<Corpus> {
        let generated = Corpus::generate(&cfg.data)?;
        let pool = match &cfg.pool_path {
            Some(p) => corpus::read_jsonl(p)?,
            None => generated.pool,
        };
        let val = match &cfg.val_path {
            Some(p) => corpus::group_by_subtask(&corpus::read_jsonl(p)?)?,
            None => generated.val,
        };
        let test = match &cfg.test_path {
            Some(p) => corpus::group_by_subtask(&corpus::read_jsonl(p)?)?,
            None => generated.test,
        };
        ensure!(!pool.is_empty(), "empty candidate pool");
        ensure!(
            val.len() == test.len(),
            "validation and test splits have different subtask counts"
        );
        Ok(Corpus { pool, val, test })
    }

    pub fn subtask_labels(&self) -> Vec<u32> {
        self.val.iter().map(|g| g[0].subtask.unwrap_or(0)).collect()
    }
}

/// The selection model with its identity.
#[derive(Debug, Clone)]
pub struct SelectionModel {
    pub model: TinyLm,
    pub init_seed: u64,
    pub fingerprint: [u8; 32],
}

impl SelectionModel {
    pub fn new(config: TinyLmConfig, init_seed: u64) -> Result<Self> {
        Ok(SelectionModel {
            fingerprint: fingerprint(&config, init_seed),
            model: TinyLm::new(config)?,
            init_seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupSummary {
    pub subset_size: usize,
    pub epoch_losses: Vec<f64>,
    pub epoch_lrs: Vec<f64>,
}

pub fn warmup(
    sm: &SelectionModel,
    pool: &[Example],
    fraction: f64,
    config: &TrainConfig,
) -> Result<(Vec<Checkpoint>, WarmupSummary)> {
    let run = train::warmup(
        &sm.model,
        sm.model.init(sm.init_seed),
        pool,
        fraction,
        config,
    )?;
    let summary = WarmupSummary {
        subset_size: fraction_count(fraction, pool.len()),
        epoch_losses: run.epoch_losses.clone(),
        epoch_lrs: run.checkpoints.iter().map(|c| c.avg_lr).collect(),
    };
    Ok((run.checkpoints, summary))
}

pub const STORE_KINDS: [FeatureKind; 3] = [
    FeatureKind::AdamGamma,
    FeatureKind::SgdGrad,
    FeatureKind::SignGd,
];

pub fn kind_name(kind: FeatureKind) -> &'static str {
    match kind {
        FeatureKind::AdamGamma => "adam_gamma",
        FeatureKind::SgdGrad => "sgd_grad",
        FeatureKind::SignGd => "signgd",
    }
}

pub fn store_path(dir: &Path, kind: FeatureKind) -> PathBuf {
    dir.join(format!("features_{}.bin", kind_name(kind)))
}

pub fn projection_spec(model: &TinyLm, proj: &ProjectionConfig) -> ProjectionSpec {
    ProjectionSpec::new(model.trainable_len(), proj.dim, proj.seed)
}

/// Training-side vector for one kind, before projection.
pub fn training_vector(
    kind: FeatureKind,
    grad: &[f64],
    snapshot: &Checkpoint,
    adam: &AdamConfig,
) -> Result<Vec<f64>> {
    Ok(match kind {
        FeatureKind::AdamGamma => gamma(adam, grad, &snapshot.adam)?,
        FeatureKind::SgdGrad => grad.to_vec(),
        FeatureKind::SignGd => sign(grad),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeaturizeSummary {
    pub stores: Vec<PathBuf>,
    pub records_per_store: u64,
}

/// One pass over (checkpoint, example): a fresh gradient each, turned into
/// every requested kind, projected, and appended to that kind's store.
#[allow(clippy::too_many_arguments)]
pub fn featurize(
    sm: &SelectionModel,
    checkpoints: &[Checkpoint],
    pool: &[Example],
    proj: &ProjectionConfig,
    adam: &AdamConfig,
    kinds: &[FeatureKind],
    dir: &Path,
    counters: &Counters,
) -> Result<FeaturizeSummary> {
    ensure!(!checkpoints.is_empty(), "no checkpoints");
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let spec = projection_spec(&sm.model, proj);
    spec.validate()?;
    let mut order: Vec<&Example> = pool.iter().collect();
    order.sort_by_key(|e| e.id);
    let epoch_lrs: Vec<f64> = checkpoints.iter().map(|c| c.avg_lr).collect();
    let mut writers = kinds
        .iter()
        .map(|&kind| {
            let header = Header {
                dim: proj.dim as u32,
                epoch_lrs: epoch_lrs.clone(),
                input_dim: spec.input_dim as u64,
                projection_seed: proj.seed,
                kind,
                normalized: true,
                fingerprint: sm.fingerprint,
                example_count: order.len() as u64,
            };
            Ok(DatastoreWriter::create(store_path(dir, kind), header)?)
        })
        .collect::<Result<Vec<_>>>()?;
    for (epoch, ck) in checkpoints.iter().enumerate() {
        let rows: Vec<Vec<(u64, Vec<f64>)>> = order
            .par_iter()
            .map(|ex| {
                let g = sm.model.grad(ex, &ck.params, true)?;
                counters.train.fetch_add(1, Ordering::Relaxed);
                kinds
                    .iter()
                    .map(|&k| {
                        Ok((
                            ex.id,
                            project(&spec, &training_vector(k, &g.values, ck, adam)?)?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for (ki, w) in writers.iter_mut().enumerate() {
            let block: Vec<(u64, Vec<f64>)> = rows.iter().map(|r| r[ki].clone()).collect();
            w.append_epoch(epoch as u32, &block)?;
        }
    }
    let stores = writers
        .into_iter()
        .map(|w| Ok(w.finish()?))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturizeSummary {
        stores,
        records_per_store: (order.len() * checkpoints.len()) as u64,
    })
}

/// Per-subtask, per-checkpoint mean of projected raw validation gradients.
pub fn validation_features(
    sm: &SelectionModel,
    checkpoints: &[Checkpoint],
    val: &[Vec<Example>],
    proj: &ProjectionConfig,
    counters: &Counters,
) -> Result<Vec<SubtaskFeatureSet>> {
    let spec = projection_spec(&sm.model, proj);
    val.iter()
        .map(|group| {
            let label = group.first().and_then(|e| e.subtask).unwrap_or(0);
            let feats = group
                .par_iter()
                .map(|ex| {
                    checkpoints
                        .iter()
                        .map(|ck| {
                            let g = sm.model.grad(ex, &ck.params, true)?;
                            counters.val.fetch_add(1, Ordering::Relaxed);
                            Ok(project(&spec, &g.values)?)
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SubtaskFeatureSet::from_examples(label, &feats)?)
        })
        .collect()
}

/// What the validation side was computed with; the store must match it.
#[derive(Debug, Clone, PartialEq)]
pub struct Compat {
    pub input_dim: u64,
    pub projection_seed: u64,
    pub dim: u32,
    pub kind: FeatureKind,
    pub fingerprint: [u8; 32],
    pub num_epochs: usize,
}

impl Compat {
    pub fn for_model(
        sm: &SelectionModel,
        proj: &ProjectionConfig,
        kind: FeatureKind,
        num_epochs: usize,
    ) -> Self {
        Compat {
            input_dim: sm.model.trainable_len() as u64,
            projection_seed: proj.seed,
            dim: proj.dim as u32,
            kind,
            fingerprint: sm.fingerprint,
            num_epochs,
        }
    }

    pub fn check(&self, h: &Header) -> Result<()> {
        let mut bad = Vec::new();
        if h.input_dim != self.input_dim {
            bad.push(format!("P {} vs {}", h.input_dim, self.input_dim));
        }
        if h.projection_seed != self.projection_seed {
            bad.push(format!(
                "projection seed {} vs {}",
                h.projection_seed, self.projection_seed
            ));
        }
        if h.dim != self.dim {
            bad.push(format!("d {} vs {}", h.dim, self.dim));
        }
        if h.kind != self.kind {
            bad.push(format!("feature kind {:?} vs {:?}", h.kind, self.kind));
        }
        if h.fingerprint != self.fingerprint {
            bad.push("model fingerprint differs".into());
        }
        if h.num_epochs() != self.num_epochs {
            bad.push(format!("epochs {} vs {}", h.num_epochs(), self.num_epochs));
        }
        if !bad.is_empty() {
            bail!(
                "datastore incompatible with validation features: {}",
                bad.join("; ")
            );
        }
        Ok(())
    }
}

/// Scores every stored example against the subtask sets. Reads only.
pub fn score_store(
    store: &Datastore,
    sets: &[SubtaskFeatureSet],
    kernel: Kernel,
) -> Result<(Vec<InfluenceScore>, Diagnostics)> {
    let h = store.header();
    ensure!(
        h.kind == kernel.feature_kind(),
        "kernel {} needs {} features, store holds {}",
        kernel.name(),
        kind_name(kernel.feature_kind()),
        kind_name(h.kind)
    );
    let n = h.example_count as usize;
    ensure!(
        store.record_count() == n * h.num_epochs(),
        "datastore is incomplete"
    );
    let lrs = h.epoch_lrs.clone();
    let results = (0..n)
        .into_par_iter()
        .map(|i| {
            let recs = store.example_records(i);
            let feats: Vec<Vec<f64>> = recs
                .iter()
                .map(|r| {
                    if kernel.is_cosine() {
                        r.values()
                    } else {
                        r.restored(h.normalized)
                    }
                })
                .collect();
            let mut diag = Diagnostics::default();
            let s = score(recs[0].example_id, &feats, sets, &lrs, kernel, &mut diag)?;
            Ok((s, diag))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut diag = Diagnostics::default();
    let scores = results
        .into_iter()
        .map(|(s, d)| {
            diag.merge(&d);
            s
        })
        .collect();
    Ok((scores, diag))
}

/// An ordered selection, best first where a score exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub method: String,
    pub ids: Vec<u64>,
    /// Aggregate score per selected id (empty for random).
    pub scores: Vec<f64>,
}

impl Selection {
    pub fn from_scores<T: Ranked + Clone>(method: &str, scores: &[T], k: usize) -> Result<Self> {
        let top = select_top_k(scores, k)?;
        Ok(Selection {
            method: method.to_string(),
            ids: top.iter().map(|s| s.example_id()).collect(),
            scores: top.iter().map(|s| s.aggregate()).collect(),
        })
    }

    pub fn examples(&self, pool: &[Example]) -> Result<Vec<Example>> {
        let by_id: BTreeMap<u64, &Example> = pool.iter().map(|e| (e.id, e)).collect();
        self.ids
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .map(|e| (*e).clone())
                    .with_context(|| format!("selected id {id} not in pool"))
            })
            .collect()
    }
}

/// Scores a target task against an existing store: only validation gradients
/// are computed. Returns the scores and the selection.
#[allow(clippy::too_many_arguments)]
pub fn score_and_select(
    sm: &SelectionModel,
    checkpoints: &[Checkpoint],
    store: &Datastore,
    val: &[Vec<Example>],
    proj: &ProjectionConfig,
    kernel: Kernel,
    fraction: f64,
    counters: &Counters,
) -> Result<(Vec<InfluenceScore>, Selection, Diagnostics)> {
    Compat::for_model(sm, proj, kernel.feature_kind(), checkpoints.len()).check(store.header())?;
    let sets = validation_features(sm, checkpoints, val, proj, counters)?;
    let (scores, diag) = score_store(store, &sets, kernel)?;
    let k = fraction_count(fraction, scores.len());
    let sel = Selection::from_scores(kernel.name(), &scores, k)?;
    Ok((scores, sel, diag))
}

pub fn select_random(pool: &[Example], fraction: f64, seed: u64) -> Result<Selection> {
    let ids: Vec<u64> = pool.iter().map(|e| e.id).collect();
    Ok(Selection {
        method: "random".into(),
        ids: random_selection(&ids, fraction_count(fraction, ids.len()), seed)?,
        scores: Vec::new(),
    })
}

pub fn select_tfidf(
    pool: &[Example],
    val: &[Vec<Example>],
    fraction: f64,
) -> Result<(Vec<Score>, Selection)> {
    let scores = tfidf_scores(pool, val, VOCAB_SIZE)?;
    let sel = Selection::from_scores("tfidf", &scores, fraction_count(fraction, pool.len()))?;
    Ok((scores, sel))
}

pub fn select_rds(
    sm: &SelectionModel,
    checkpoints: &[Checkpoint],
    pool: &[Example],
    val: &[Vec<Example>],
    fraction: f64,
) -> Result<(Vec<Score>, Selection, Diagnostics)> {
    let mut diag = Diagnostics::default();
    let scores = rds_scores(&sm.model, checkpoints, pool, val, &mut diag)?;
    let sel = Selection::from_scores("rds", &scores, fraction_count(fraction, pool.len()))?;
    Ok((scores, sel, diag))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskEval {
    pub subtask: u32,
    pub name: String,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    /// 0-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub val_loss: f64,
    pub val_losses: Vec<f64>,
    /// Validation loss per subtask at the best epoch.
    pub val_by_subtask: Vec<f64>,
    /// Held-out metrics per subtask at the best epoch.
    pub test: Vec<SubtaskEval>,
    pub mean_test_loss: f64,
}

fn subtask_name(label: u32) -> String {
    Task::from_label(label).map_or_else(|| format!("subtask_{label}"), |t| t.name())
}

/// Trains a fresh target model on `data`, keeps the epoch with the lowest
/// mean validation loss, and evaluates it on the test split.
pub fn train_target(
    config: &TinyLmConfig,
    init_seed: u64,
    data: &[Example],
    val: &[Vec<Example>],
    test: &[Vec<Example>],
    train_cfg: &TrainConfig,
) -> Result<TargetResult> {
    ensure!(!data.is_empty(), "empty selection");
    let model = TinyLm::new(config.clone())?;
    let val_flat: Vec<Example> = val.concat();
    let run = train::train(&model, model.init(init_seed), data, train_cfg, |_| Ok(()))?;
    let val_losses = run
        .checkpoints
        .iter()
        .map(|c| train::mean_loss(&model, &c.params, &val_flat))
        .collect::<less_core::Result<Vec<_>>>()?;
    let best_epoch = (0..val_losses.len())
        .min_by(|&a, &b| val_losses[a].total_cmp(&val_losses[b]))
        .unwrap();
    let params = &run.checkpoints[best_epoch].params;
    let val_by_subtask = val
        .iter()
        .map(|g| train::mean_loss(&model, params, g))
        .collect::<less_core::Result<Vec<_>>>()?;
    let test_evals = test
        .iter()
        .map(|g| {
            let label = g.first().and_then(|e| e.subtask).unwrap_or(0);
            Ok(SubtaskEval {
                subtask: label,
                name: subtask_name(label),
                metrics: evaluate(&model, params, g)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_test_loss =
        test_evals.iter().map(|e| e.metrics.loss).sum::<f64>() / test_evals.len() as f64;
    Ok(TargetResult {
        best_epoch,
        val_loss: val_losses[best_epoch],
        val_losses,
        val_by_subtask,
        test: test_evals,
        mean_test_loss,
    })
}

/// Composition and length statistics of a selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub size: usize,
    pub mean_completion_len: f64,
    /// Selected examples per pool subtask label.
    pub by_subtask: BTreeMap<String, usize>,
}

pub fn selection_stats(examples: &[Example]) -> SelectionStats {
    let mut by_subtask = BTreeMap::new();
    for e in examples {
        let name = e
            .subtask
            .map_or_else(|| "unlabelled".to_string(), subtask_name);
        *by_subtask.entry(name).or_insert(0) += 1;
    }
    SelectionStats {
        size: examples.len(),
        mean_completion_len: examples
            .iter()
            .map(|e| e.completion.len() as f64)
            .sum::<f64>()
            / examples.len().max(1) as f64,
        by_subtask,
    }
}

/// Method names used in reports.
pub const LESS: &str = "less";
pub const LESS_SGD: &str = "less_sgd";
pub const LESS_SIGNGD: &str = "less_signgd";
pub const LESS_T: &str = "less_t";
pub const RANDOM: &str = "random";
pub const RANDOM_T: &str = "random_t";
pub const TFIDF: &str = "tfidf";
pub const RDS: &str = "rds";
pub const FULL: &str = "full";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: String,
    /// Which target model was trained: `target` or `transfer_target`.
    pub target_model: String,
    pub selection: SelectionStats,
    pub result: TargetResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub warmup: WarmupSummary,
    pub transfer_warmup: WarmupSummary,
    pub methods: Vec<MethodRun>,
    pub zero_norm_terms: u64,
    pub train_gradients: u64,
}

impl SeedRun {
    pub fn method(&self, name: &str) -> Option<&MethodRun> {
        self.methods.iter().find(|m| m.method == name)
    }
}

pub fn kernel_method(kernel: Kernel) -> &'static str {
    match kernel {
        Kernel::AdamCosine => LESS,
        Kernel::SgdDot => LESS_SGD,
        Kernel::SignGdCosine => LESS_SIGNGD,
    }
}

/// Everything a seed derives from the run config: the selection model
/// identity, training configs and the projection.
#[derive(Debug, Clone)]
pub struct SeedSetup {
    pub seed: u64,
    pub selection: SelectionModel,
    pub transfer_selection: SelectionModel,
    pub warmup: TrainConfig,
    pub target: TrainConfig,
    pub target_init: u64,
    pub random_seed: u64,
    pub projection: ProjectionConfig,
}

impl SeedSetup {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let model_seed = sub_seed(seed, 0x5e1);
        let target_init = sub_seed(seed, 0x7a6);
        Ok(SeedSetup {
            seed,
            selection: SelectionModel::new(cfg.models.selection.clone(), model_seed)?,
            transfer_selection: SelectionModel::new(
                cfg.models.transfer_selection.clone(),
                sub_seed(model_seed, 0x7),
            )?,
            warmup: TrainConfig {
                seed: sub_seed(seed, 0x3a9),
                ..cfg.warmup.clone()
            },
            target: TrainConfig {
                seed: target_init,
                ..cfg.target_training.clone()
            },
            target_init,
            random_seed: sub_seed(seed, 0x4a2),
            projection: ProjectionConfig {
                dim: cfg.projection.dim,
                seed: sub_seed(cfg.projection.seed, seed),
            },
        })
    }
}

/// Everything for one seed: warmup, one featurize pass into three stores,
/// all kernels and baselines, the transfer pair, and full-pool training.
pub fn run_seed(cfg: &RunConfig, corpus: &Corpus, seed: u64, dir: &Path) -> Result<SeedRun> {
    let setup = SeedSetup::new(cfg, seed)?;
    let counters = Counters::default();
    let warm_cfg = &setup.warmup;
    let target_cfg = &setup.target;
    let target_seed = setup.target_init;
    let proj = setup.projection;
    let k_frac = cfg.select_fraction;
    let pool = &corpus.pool;

    let sm = &setup.selection;
    let (checkpoints, warm) = warmup(sm, pool, cfg.warmup_fraction, warm_cfg)?;
    crate::datastore::write_checkpoints(dir.join("checkpoints.bin"), &checkpoints)?;
    let store_dir = dir.join("stores");
    featurize(
        sm,
        &checkpoints,
        pool,
        &proj,
        &warm_cfg.adam,
        &STORE_KINDS,
        &store_dir,
        &counters,
    )?;

    let mut selections: Vec<(String, Selection)> = Vec::new();
    let mut zero_norm = 0;
    for kernel in Kernel::ALL {
        let store = Datastore::open(store_path(&store_dir, kernel.feature_kind()))?;
        let (scores, sel, diag) = score_and_select(
            sm,
            &checkpoints,
            &store,
            &corpus.val,
            &proj,
            kernel,
            k_frac,
            &counters,
        )?;
        crate::report::write_scores_csv(
            dir.join(format!("scores_{}.csv", kernel.name())),
            &scores,
        )?;
        zero_norm += diag.zero_norm_terms;
        selections.push((kernel_method(kernel).to_string(), sel));
    }
    selections.push((
        RANDOM.into(),
        select_random(pool, k_frac, setup.random_seed)?,
    ));
    selections.push((TFIDF.into(), select_tfidf(pool, &corpus.val, k_frac)?.1));
    let (_, rds, diag) = select_rds(sm, &checkpoints, pool, &corpus.val, k_frac)?;
    zero_norm += diag.zero_norm_terms;
    selections.push((RDS.into(), rds));

    // transfer: a smaller selection model picks data for a larger target model
    let sm_t = &setup.transfer_selection;
    let (ck_t, warm_t) = warmup(sm_t, pool, cfg.warmup_fraction, warm_cfg)?;
    let store_dir_t = dir.join("stores_transfer");
    featurize(
        sm_t,
        &ck_t,
        pool,
        &proj,
        &warm_cfg.adam,
        &[FeatureKind::AdamGamma],
        &store_dir_t,
        &counters,
    )?;
    let store_t = Datastore::open(store_path(&store_dir_t, FeatureKind::AdamGamma))?;
    let (_, sel_t, _) = score_and_select(
        sm_t,
        &ck_t,
        &store_t,
        &corpus.val,
        &proj,
        Kernel::AdamCosine,
        k_frac,
        &counters,
    )?;

    let mut jobs: Vec<(String, &'static str, &TinyLmConfig, Vec<Example>)> = Vec::new();
    for (name, sel) in &selections {
        crate::report::write_json(dir.join(format!("selection_{name}.json")), sel)?;
        jobs.push((
            name.clone(),
            "target",
            &cfg.models.target,
            sel.examples(pool)?,
        ));
    }
    let random_sel = &selections.iter().find(|(n, _)| n == RANDOM).unwrap().1;
    jobs.push((
        LESS_T.into(),
        "transfer_target",
        &cfg.models.transfer_target,
        sel_t.examples(pool)?,
    ));
    jobs.push((
        RANDOM_T.into(),
        "transfer_target",
        &cfg.models.transfer_target,
        random_sel.examples(pool)?,
    ));
    jobs.push((FULL.into(), "target", &cfg.models.target, pool.clone()));

    let methods = jobs
        .par_iter()
        .map(|(name, which, mcfg, data)| {
            let result = train_target(
                mcfg,
                target_seed,
                data,
                &corpus.val,
                &corpus.test,
                target_cfg,
            )
            .with_context(|| format!("training target for {name}"))?;
            Ok(MethodRun {
                method: name.clone(),
                target_model: which.to_string(),
                selection: selection_stats(data),
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SeedRun {
        seed,
        warmup: warm,
        transfer_warmup: warm_t,
        methods,
        zero_norm_terms: zero_norm,
        train_gradients: counters.train(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub target_model: String,
    /// Best-epoch validation loss, mean over seeds.
    pub mean_val_loss: f64,
    pub per_seed_val_loss: Vec<f64>,
    pub subtask_val_loss: Vec<f64>,
    pub mean_test_loss: f64,
    pub per_seed_test_loss: Vec<f64>,
    /// Mean over seeds, per subtask (in subtask order).
    pub subtask_test_loss: Vec<f64>,
    pub subtask_token_accuracy: Vec<f64>,
    pub subtask_exact_match: Vec<f64>,
    pub mean_selected_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub subtasks: Vec<String>,
    pub seeds: Vec<u64>,
    pub summary: Vec<MethodSummary>,
    pub runs: Vec<SeedRun>,
}

impl RunReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|m| m.method == name)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn summarize(runs: Vec<SeedRun>, subtasks: Vec<String>) -> RunReport {
    let methods: Vec<(String, String)> = runs
        .first()
        .map(|r| {
            r.methods
                .iter()
                .map(|m| (m.method.clone(), m.target_model.clone()))
                .collect()
        })
        .unwrap_or_default();
    let summary = methods
        .into_iter()
        .map(|(name, target_model)| {
            let per: Vec<&MethodRun> = runs.iter().filter_map(|r| r.method(&name)).collect();
            let col = |f: &dyn Fn(&EvalMetrics) -> f64| -> Vec<f64> {
                (0..subtasks.len())
                    .map(|j| mean(per.iter().map(|m| f(&m.result.test[j].metrics))))
                    .collect()
            };
            MethodSummary {
                mean_val_loss: mean(per.iter().map(|m| m.result.val_loss)),
                per_seed_val_loss: per.iter().map(|m| m.result.val_loss).collect(),
                subtask_val_loss: (0..subtasks.len())
                    .map(|j| mean(per.iter().map(|m| m.result.val_by_subtask[j])))
                    .collect(),
                per_seed_test_loss: per.iter().map(|m| m.result.mean_test_loss).collect(),
                mean_test_loss: mean(per.iter().map(|m| m.result.mean_test_loss)),
                subtask_test_loss: col(&|m| m.loss),
                subtask_token_accuracy: col(&|m| m.token_accuracy),
                subtask_exact_match: col(&|m| m.exact_match),
                mean_selected_len: mean(per.iter().map(|m| m.selection.mean_completion_len)),
                method: name,
                target_model,
            }
        })
        .collect();
    RunReport {
        subtasks,
        seeds: runs.iter().map(|r| r.seed).collect(),
        summary,
        runs,
    }
}

/// All seeds (in parallel), then the consolidated report under `output_dir`.
pub fn run_experiment(cfg: &RunConfig, corpus: &Corpus) -> Result<RunReport> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let dir = out.join(format!("seed_{seed}"));
            std::fs::create_dir_all(&dir)?;
            run_seed(cfg, corpus, seed, &dir).with_context(|| format!("seed {seed}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let names = corpus
        .subtask_labels()
        .into_iter()
        .map(subtask_name)
        .collect();
    let report = summarize(runs, names);
    crate::report::write_json(out.join("report.json"), &report)?;
    crate::report::write_summary_csv(out.join("report.csv"), &report)?;
    Ok(report)
}

pub const SELECTION_CANDIDATES: usize = 16;

/// Projection dims probed by the fidelity study.
pub const FIDELITY_DIMS: [usize; 3] = [128, 512, 2048];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyOutput {
    pub report: less_core::verify::OracleReport,
    pub length_rows: Vec<less_core::verify::LengthRow>,
    pub projection_mae: Vec<(usize, f64)>,
}

/// The oracle protocol on the configured selection model: first-order
/// checks, brute-force selection agreement, the length-bias study and
/// projection fidelity.
pub fn run_verify(
    cfg: &RunConfig,
    corpus: &Corpus,
    seed: u64,
    trials: usize,
) -> Result<VerifyOutput> {
    use less_core::verify;
    let setup = SeedSetup::new(cfg, seed)?;
    let sm = &setup.selection;
    let pool = &corpus.pool;
    let targets: Vec<Example> = corpus.val.concat();
    let mut report = verify::first_order_suite(&sm.model, pool, trials, seed)?;
    let sel = verify::selection_suite(
        &sm.model,
        pool,
        &targets,
        trials.max(verify::SELECTION_MIN_TRIALS),
        SELECTION_CANDIDATES,
        4,
        seed,
    )?;
    report.checks.extend(sel.checks);
    let (checkpoints, _) = warmup(sm, pool, cfg.warmup_fraction, &setup.warmup)?;
    let k = fraction_count(cfg.select_fraction, pool.len());
    let study = verify::study_length_bias(&sm.model, &checkpoints, pool, &corpus.val, k, seed)?;
    report.checks.extend(study.report.checks);
    let last = checkpoints.last().unwrap();
    let vectors = verify::sample(pool, 400, seed)
        .par_iter()
        .map(|ex| Ok(sm.model.grad(ex, &last.params, true)?.values))
        .collect::<Result<Vec<_>>>()?;
    let dims = FIDELITY_DIMS.to_vec();
    let (fid, maes) = verify::study_projection_fidelity(&vectors, 500, &dims, seed)?;
    report.checks.extend(fid.checks);
    Ok(VerifyOutput {
        report,
        length_rows: study.rows,
        projection_mae: dims.into_iter().zip(maes).collect(),
    })
}

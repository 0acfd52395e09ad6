//! The JSON run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use less_core::model::LoraConfig;
use less_core::synthdata::{Alphabet, PoolConfig, Skill, Task};
use less_core::train::TrainConfig;
use less_core::{Kernel, TinyLmConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Pool examples per (skill, alphabet) group; ten groups.
    pub per_task: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Target subtasks (validation and test splits).
    pub targets: Vec<Task>,
    pub shots: usize,
    pub test_per_task: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            per_task: 200,
            seed: 2024,
            min_len: 2,
            max_len: 12,
            targets: default_targets(),
            shots: 5,
            test_per_task: 50,
        }
    }
}

impl DataConfig {
    pub fn pool_config(&self) -> PoolConfig {
        PoolConfig {
            min_len: self.min_len,
            max_len: self.max_len,
            ..PoolConfig::uniform(self.per_task, self.seed)
        }
    }
}

/// Skill-matched, alphabet-B targets.
pub fn default_targets() -> Vec<Task> {
    vec![
        Task::new(Skill::IncrementMod, Alphabet::B),
        Task::new(Skill::ConstMap, Alphabet::B),
        Task::new(Skill::Copy, Alphabet::B),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    /// Selection model M_S (adapter-trained during warmup).
    pub selection: TinyLmConfig,
    /// Target model M_T trained on the selected data.
    pub target: TinyLmConfig,
    /// Smaller selection model for the transfer run.
    pub transfer_selection: TinyLmConfig,
    /// Larger target model for the transfer run.
    pub transfer_target: TinyLmConfig,
}

fn sized(dim: usize, lora: Option<LoraConfig>) -> TinyLmConfig {
    TinyLmConfig {
        embed_dim: dim,
        hidden_dim: dim,
        lora,
        ..TinyLmConfig::default()
    }
}

impl Default for ModelsConfig {
    fn default() -> Self {
        let adapter = TinyLmConfig::default().lora;
        ModelsConfig {
            selection: sized(32, adapter),
            target: sized(32, None),
            transfer_selection: sized(16, adapter),
            transfer_target: sized(64, None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub dim: usize,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig { dim: 512, seed: 17 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    /// Optional pre-generated corpora; generated from `data` when absent.
    pub pool_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub models: ModelsConfig,
    pub warmup_fraction: f64,
    pub warmup: TrainConfig,
    pub target_training: TrainConfig,
    pub projection: ProjectionConfig,
    pub kernel: Kernel,
    pub select_fraction: f64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            pool_path: None,
            val_path: None,
            test_path: None,
            models: ModelsConfig::default(),
            warmup_fraction: 0.05,
            warmup: TrainConfig::default(),
            target_training: TrainConfig::default(),
            projection: ProjectionConfig::default(),
            kernel: Kernel::AdamCosine,
            select_fraction: 0.05,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("less-out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| f > 0.0 && f <= 1.0;
        if !frac_ok(self.warmup_fraction) {
            bail!("warmup_fraction must be in (0, 1]");
        }
        if !frac_ok(self.select_fraction) {
            bail!("select_fraction must be in (0, 1]");
        }
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        if self.projection.dim == 0 {
            bail!("projection dim must be >= 1");
        }
        if self.data.targets.is_empty() {
            bail!("at least one target subtask is required");
        }
        for m in [
            &self.models.selection,
            &self.models.target,
            &self.models.transfer_selection,
            &self.models.transfer_target,
        ] {
            m.validate()?;
        }
        self.warmup.validate()?;
        self.target_training.validate()?;
        Ok(())
    }
}

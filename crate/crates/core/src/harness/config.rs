use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::TargetUpdate;
use crate::features::EmbeddingConfig;
use crate::model::DpinConfig;
use crate::nn::TrainingHyper;
use crate::sim::{FixedCandidates, SimConfig};
use crate::Error;

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "DPIN_OUTPUT_DIR";

/// Names accepted wherever a config file path is expected.
pub const PRESETS: [&str; 5] = ["paper", "desk", "tiny", "calibration", "ablation"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    Soft,
    Hard,
}

/// Optimiser, target-network and data-volume settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub seed: u64,
    pub epochs: usize,
    /// Requests in the generated offline log.
    pub log_requests: usize,
    pub target_update: TargetMode,
    /// Optimiser steps between copies when `target_update = "hard"`.
    pub hard_sync_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let h = TrainingHyper::default();
        Self {
            learning_rate: h.learning_rate,
            batch_size: h.batch_size,
            gamma: h.gamma,
            tau: h.tau,
            seed: h.seed,
            epochs: 10,
            log_requests: 20_000,
            target_update: TargetMode::Soft,
            hard_sync_every: 500,
        }
    }
}

impl TrainingConfig {
    pub fn hyper(&self) -> TrainingHyper {
        TrainingHyper {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            gamma: self.gamma,
            tau: self.tau,
            seed: self.seed,
        }
    }

    pub fn target_update(&self) -> TargetUpdate {
        match self.target_update {
            TargetMode::Soft => TargetUpdate::Soft,
            TargetMode::Hard => TargetUpdate::HardEvery(self.hard_sync_every),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Greedy episodes per evaluation.
    pub episodes: usize,
    /// Seeds the evaluation requests; kept apart from the log seed.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            seed: 1_000_003,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub model: DpinConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation_name: Option<String>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            model: DpinConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            output_dir: default_output_dir(),
            ablation_name: None,
        }
    }
}

impl ExperimentConfig {
    /// Settings quoted for the production model: `N = 10`, `T = 5`, MLP
    /// widths `(128, 64, 32)`, learning rate `1e-3`, `tau = 0.9`, batch
    /// 8192.
    pub fn paper() -> Self {
        Self::default()
    }

    /// The paper settings with only scale knobs shrunk so that a run fits on
    /// one CPU core.
    pub fn desk() -> Self {
        let mut cfg = Self::paper();
        cfg.training.batch_size = 256;
        cfg.training.log_requests = 2_000;
        cfg.training.epochs = 3;
        cfg.eval.episodes = 200;
        cfg.sim.user_population = 50;
        cfg.sim.warmup_episodes = 13;
        cfg.output_dir = PathBuf::from("runs/desk");
        cfg
    }

    /// Smallest structurally complete model (`K = 3`, `T = 2`, `d_h = 8`)
    /// on an enumerable MDP: two pages over two ads and four organic items.
    pub fn tiny() -> Self {
        let sim = SimConfig {
            slots: 3,
            max_pages: 2,
            max_ads_per_page: 2,
            user_population: 3,
            n_ads: 2,
            n_organics: 4,
            ads_per_request: 2,
            organics_per_request: 4,
            interaction_strength: 0.5,
            ad_fatigue: 2.0,
            pulldown_base: 1.0,
            ad_share_penalty: 0.0,
            click_bias: -0.5,
            affinity_scale: 2.0,
            user_segments: 3,
            age_buckets: 2,
            time_buckets: 1,
            location_buckets: 1,
            history_window: 0,
            history_keep: 3,
            warmup_episodes: 0,
            fixed_candidates: Some(FixedCandidates {
                ads: vec![0, 1],
                organics: vec![2, 3, 4, 5],
            }),
            expected_rewards: true,
            seed: 7,
            ..SimConfig::default()
        };
        let model = DpinConfig {
            channels: 2,
            receptive_fields: None,
            kernels: 4,
            heads: 2,
            seq_len: 3,
            mlp1: vec![6, 8],
            mlp2: vec![5],
            mlp3: vec![16, 8],
            embedding: EmbeddingConfig {
                d_item: 3,
                d_pos: 2,
                d_fb: 2,
                d_categorical: 2,
                item_vocab: 6,
                user_segments: 3,
                age_buckets: 2,
                time_buckets: 1,
                location_buckets: 1,
                page_buckets: 2,
            },
            ablation: Default::default(),
        };
        let training = TrainingConfig {
            learning_rate: 3e-3,
            batch_size: 64,
            gamma: 0.95,
            tau: 0.9,
            seed: 0,
            epochs: 30,
            log_requests: 3_000,
            ..TrainingConfig::default()
        };
        Self {
            sim,
            model,
            training,
            eval: EvalConfig {
                episodes: 200,
                ..EvalConfig::default()
            },
            output_dir: PathBuf::from("runs/tiny"),
            ablation_name: None,
        }
    }

    /// Simulator settings whose logged history lengths match the target
    /// per-kind means; the model part is the desk one.
    pub fn calibration() -> Self {
        let mut cfg = Self::desk();
        cfg.sim = SimConfig::default();
        cfg.output_dir = PathBuf::from("runs/calibration");
        cfg
    }

    /// Arrangement-sensitive setting used for the ablation table: strong
    /// ad fatigue and neighbour interaction on short pages.
    pub fn ablation() -> Self {
        let mut cfg = Self::desk();
        cfg.sim = SimConfig {
            slots: 3,
            max_pages: 3,
            max_ads_per_page: 2,
            user_population: 20,
            n_ads: 30,
            n_organics: 90,
            ads_per_request: 6,
            organics_per_request: 9,
            interaction_strength: 0.5,
            ad_fatigue: 2.0,
            pulldown_base: 0.95,
            ad_share_penalty: 0.2,
            click_bias: -1.0,
            affinity_scale: 2.0,
            history_window: 3,
            history_keep: 5,
            warmup_episodes: 3,
            ..SimConfig::default()
        };
        cfg.model = DpinConfig {
            channels: 3,
            kernels: 8,
            seq_len: 5,
            mlp1: vec![32, 16],
            mlp2: vec![16],
            mlp3: vec![32, 16],
            embedding: EmbeddingConfig {
                item_vocab: 120,
                ..EmbeddingConfig::default()
            },
            ..DpinConfig::default()
        };
        cfg.training = TrainingConfig {
            learning_rate: 2e-3,
            batch_size: 64,
            epochs: 4,
            log_requests: 1_500,
            ..TrainingConfig::default()
        };
        cfg.eval.episodes = 300;
        cfg.output_dir = PathBuf::from("runs/ablation");
        cfg
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            "calibration" => Some(Self::calibration()),
            "ablation" => Some(Self::ablation()),
            _ => None,
        }
    }

    /// Parses TOML text; unknown keys anywhere are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self, Error> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_value(value)
    }

    fn from_value(value: toml::Value) -> Result<Self, Error> {
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, Error> {
        self.validate()?;
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Resolves a preset name or a file path, applies `section.key=value`
    /// overrides, then the output-directory environment variable.
    pub fn load(spec: &str, overrides: &[String]) -> Result<Self, Error> {
        let mut value = match Self::preset(spec) {
            Some(cfg) => toml::Value::try_from(&cfg).map_err(|e| Error::Parse(e.to_string()))?,
            None => {
                let text = std::fs::read_to_string(Path::new(spec))
                    .map_err(|e| std::io::Error::new(e.kind(), format!("{spec}: {e}")))?;
                toml::from_str(&text).map_err(|e| Error::Parse(format!("{spec}: {e}")))?
            }
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg = Self::from_value(value)?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        Ok(cfg)
    }

    /// Checks each section and that the embedding vocabularies cover what
    /// the simulator can emit.
    pub fn validate(&self) -> Result<(), Error> {
        self.sim.validate()?;
        self.model.validate(self.sim.slots)?;
        self.training.hyper().validate()?;
        let e = &self.model.embedding;
        let pairs = [
            ("user_segments", e.user_segments, self.sim.user_segments as usize),
            ("age_buckets", e.age_buckets, self.sim.age_buckets as usize),
            ("time_buckets", e.time_buckets, self.sim.time_buckets as usize),
            ("location_buckets", e.location_buckets, self.sim.location_buckets as usize),
        ];
        for (name, have, need) in pairs {
            if have < need {
                return Err(Error::Config(format!("model.embedding.{name} = {have} is below sim.{name} = {need}")));
            }
        }
        if self.training.epochs == 0 || self.training.log_requests == 0 {
            return Err(Error::Config("training.epochs and training.log_requests must be positive".into()));
        }
        if self.training.target_update == TargetMode::Hard && self.training.hard_sync_every == 0 {
            return Err(Error::Config("training.hard_sync_every must be positive".into()));
        }
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be positive".into()));
        }
        // Config files store integers as i64.
        for (name, seed) in [("sim.seed", self.sim.seed), ("training.seed", self.training.seed), ("eval.seed", self.eval.seed)] {
            if i64::try_from(seed).is_err() {
                return Err(Error::Config(format!("{name} = {seed} exceeds {}", i64::MAX)));
            }
        }
        Ok(())
    }
}

/// Sets `a.b.c=value` inside a TOML tree. The value is parsed as TOML when
/// possible and taken as a bare string otherwise.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<(), Error> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut node = root;
    for key in parents {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{key}` is not a section")))?;
        node = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{path}` does not point into a section")))?;
    table.insert(last.to_string(), value);
    Ok(())
}

//! Run configuration for campaigns and the command line.
//!
//! A [`RunConfig`] gathers every knob a campaign needs: architecture, training
//! schedule, solver hyperparameters, dataset shape, collapse thresholds, and
//! probe settings. It loads from a JSON object or from flat `key=value` lines
//! with dotted paths (`solver.max_steps=50`), and converts into the typed
//! settings structs the rest of the crate consumes.

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetParams;
use crate::diagnostics::CollapseThresholds;
use crate::editor::EditSettings;
use crate::error::{Error, Result};
use crate::keyvalue::SolverSettings;
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::seeds;
use crate::train::{TrainScope, TrainSettings};

/// Gradient-ascent solver knobs, mirroring [`SolverSettings`] in plain `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub max_steps: usize,
    pub proximity_delta: f64,
    pub initial_step: f64,
    pub max_halvings: usize,
    pub early_stop_prob: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        let s = SolverSettings::<f64>::default();
        SolverParams {
            max_steps: s.max_steps,
            proximity_delta: s.proximity_delta,
            initial_step: s.initial_step,
            max_halvings: s.max_halvings,
            early_stop_prob: s.early_stop_prob,
        }
    }
}

/// Base-model training schedule. The seed is derived from the master seed at
/// conversion time, so it never appears here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub target_loss: f64,
    /// Freeze the key-forming parameters so edits target a fixed geometry.
    pub keys_frozen: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            steps: 5000,
            batch_size: 16,
            seq_len: 16,
            learning_rate: 1.5e-3,
            target_loss: 0.05,
            keys_frozen: true,
        }
    }
}

/// Collapse detection thresholds in plain `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdParams {
    /// Entropy floor below which a model counts as degenerated.
    pub tau: f64,
    /// Norm spike factor over the running median of prior edit norms.
    pub kappa: f64,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        let t = CollapseThresholds::<f64>::default();
        ThresholdParams { tau: t.tau, kappa: t.kappa }
    }
}

/// Corpus used to estimate the key covariance C0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub n_seqs: usize,
    pub seq_len: usize,
    /// Ridge added to C0 as a fraction of its mean diagonal.
    pub ridge_rel: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams { n_seqs: 128, seq_len: 16, ridge_rel: 1e-4 }
    }
}

/// Campaign-level probe and cadence settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignParams {
    /// Retention probes held fixed across a sequential run.
    pub n_probes: usize,
    pub probe_len: usize,
    /// Minimum log-margin of the base model's top answer on a kept probe.
    /// Confident answers make retention a damage signal rather than noise.
    pub probe_margin: f64,
    /// Prompts sampled for the generation-entropy diagnostic.
    pub entropy_probes: usize,
    pub entropy_prompt_len: usize,
    /// Tokens generated per entropy probe.
    pub entropy_gen_len: usize,
    /// Diagnostics recorded every this many edits.
    pub cadence: usize,
    pub halt_on_collapse: bool,
}

impl Default for CampaignParams {
    fn default() -> Self {
        CampaignParams {
            n_probes: 24,
            probe_len: 6,
            probe_margin: 6.0,
            entropy_probes: 8,
            entropy_prompt_len: 4,
            entropy_gen_len: 12,
            cadence: 1,
            halt_on_collapse: false,
        }
    }
}

/// Full configuration for one reproducible run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every stream of randomness in a run derives from this.
    pub master_seed: u64,
    pub model: ModelConfig,
    pub train: TrainParams,
    pub solver: SolverParams,
    /// Random prefix contexts averaged into each fact's key.
    pub n_prefixes: usize,
    pub prefix_len_range: (usize, usize),
    pub corpus: CorpusParams,
    pub dataset: DatasetParams,
    pub thresholds: ThresholdParams,
    pub campaign: CampaignParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let es = EditSettings::<f64>::default();
        RunConfig {
            master_seed: 0,
            model: ModelConfig::default(),
            train: TrainParams::default(),
            solver: SolverParams::default(),
            n_prefixes: es.n_prefixes,
            prefix_len_range: es.prefix_len_range,
            corpus: CorpusParams::default(),
            dataset: DatasetParams::default(),
            thresholds: ThresholdParams::default(),
            campaign: CampaignParams::default(),
        }
    }
}

/// Overlays `patch` onto `base`, descending into objects so a partial
/// section replaces only the keys it names.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (key, value) in p {
                match b.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    None => {
                        b.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

impl RunConfig {
    /// Parses JSON when the text starts with `{`, flat `key=value` lines
    /// otherwise. Omitted fields keep their defaults in either form.
    pub fn from_str(text: &str) -> Result<Self> {
        let patch = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?
        } else {
            Self::key_value_tree(text)?
        };
        let mut tree = serde_json::to_value(Self::default())
            .map_err(|e| Error::config(e.to_string()))?;
        merge(&mut tree, patch);
        let cfg: Self =
            serde_json::from_value(tree).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    /// Flat form: one `dotted.path=value` per line, `#` comments, values in
    /// JSON syntax with bare words falling back to strings.
    fn key_value_tree(text: &str) -> Result<serde_json::Value> {
        let mut root = serde_json::Map::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value", lineno + 1))
            })?;
            let parsed: serde_json::Value = serde_json::from_str(value.trim())
                .unwrap_or_else(|_| serde_json::Value::String(value.trim().to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for part in &parts[..parts.len() - 1] {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()))
                    .as_object_mut()
                    .ok_or_else(|| {
                        Error::config(format!("line {}: {part} is not a section", lineno + 1))
                    })?;
            }
            node.insert(parts[parts.len() - 1].to_string(), parsed);
        }
        Ok(serde_json::Value::Object(root))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.validate()?;
        if self.n_prefixes == 0 {
            return Err(Error::config("n_prefixes must be at least 1"));
        }
        let (lo, hi) = self.prefix_len_range;
        if lo < 1 || hi < lo {
            return Err(Error::config("prefix_len_range must satisfy 1 <= lo <= hi"));
        }
        if self.campaign.cadence == 0 {
            return Err(Error::config("cadence must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.solver.early_stop_prob) {
            return Err(Error::config("early_stop_prob must lie in [0, 1]"));
        }
        if self.campaign.n_probes == 0 || self.campaign.entropy_probes == 0 {
            return Err(Error::config("probe counts must be at least 1"));
        }
        Ok(())
    }

    pub fn solver_settings<T: Scalar>(&self) -> SolverSettings<T> {
        SolverSettings {
            max_steps: self.solver.max_steps,
            proximity_delta: crate::scalar::c(self.solver.proximity_delta),
            initial_step: crate::scalar::c(self.solver.initial_step),
            max_halvings: self.solver.max_halvings,
            early_stop_prob: crate::scalar::c(self.solver.early_stop_prob),
        }
    }

    pub fn edit_settings<T: Scalar>(&self) -> EditSettings<T> {
        EditSettings {
            solver: self.solver_settings(),
            n_prefixes: self.n_prefixes,
            prefix_len_range: self.prefix_len_range,
            master_seed: self.master_seed,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            seq_len: self.train.seq_len,
            learning_rate: self.train.learning_rate,
            target_loss: self.train.target_loss,
            scope: if self.train.keys_frozen {
                TrainScope::KeysFrozen
            } else {
                TrainScope::Full
            },
            seed: seeds::derive(self.master_seed, "train", 0),
            ..TrainSettings::default()
        }
    }

    pub fn collapse_thresholds<T: Scalar>(&self) -> CollapseThresholds<T> {
        CollapseThresholds {
            tau: crate::scalar::c(self.thresholds.tau),
            kappa: crate::scalar::c(self.thresholds.kappa),
        }
    }
}

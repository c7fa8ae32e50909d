//! Run configuration: one JSON document with defaults for every field.
//!
//! Two named presets exist. `desk` (the default) uses scaled-down dimensions
//! suitable for CPU experiments; `paper` carries the full-scale constants
//! (sequence length 201, conv stack (384,4)/(512,4)/(2048,4), 2048-d hidden
//! states, 1024-d common space). Unknown keys are rejected on load.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 70-symbol character set: 26 lowercase letters, 10 digits,
/// 33 punctuation marks (space included), and newline. Input text is
/// lowercased before encoding; anything outside the set becomes an
/// all-zero column.
pub const STANDARD_ALPHABET: &str =
    "abcdefghijklmnopqrstuvwxyz0123456789 -,;.!?:'\"/\\|_@#$%^&*~`+=<>()[]{}\n";

/// One convolution layer: `kernels` filters of the given width, optionally
/// followed by temporal max pooling (width 3, stride 3).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernels: usize,
    pub width: usize,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Character inventory for one-hot encoding.
    pub alphabet: String,
    /// Fixed sequence length; longer inputs are truncated, shorter padded.
    pub seq_len: usize,
    pub conv_stack: Vec<ConvSpec>,
    pub lstm_hidden: usize,
    /// Hidden size of the attention feed-forward map.
    pub attn_dim: usize,
    /// Dimension of the shared image/text space.
    pub common_dim: usize,
    /// Dimension of the precomputed image feature vectors.
    pub feature_dim: usize,
    /// Nominal regions per image.
    pub num_regions: usize,
    /// Share one Char-CNN + LSTM trunk across the three text branches.
    pub share_text_trunk: bool,
    /// Apply tanh after the projection heads (plain linear by default).
    pub projection_tanh: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            alphabet: STANDARD_ALPHABET.to_string(),
            seq_len: 60,
            conv_stack: vec![
                ConvSpec { kernels: 8, width: 3, pool: true },
                ConvSpec { kernels: 8, width: 3, pool: true },
                ConvSpec { kernels: 16, width: 3, pool: false },
            ],
            lstm_hidden: 32,
            attn_dim: 32,
            common_dim: 32,
            feature_dim: 32,
            num_regions: 5,
            share_text_trunk: false,
            projection_tanh: false,
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            alphabet: STANDARD_ALPHABET.to_string(),
            seq_len: 201,
            conv_stack: vec![
                ConvSpec { kernels: 384, width: 4, pool: true },
                ConvSpec { kernels: 512, width: 4, pool: true },
                ConvSpec { kernels: 2048, width: 4, pool: false },
            ],
            lstm_hidden: 2048,
            attn_dim: 2048,
            common_dim: 1024,
            feature_dim: 4096,
            num_regions: 5,
            share_text_trunk: false,
            projection_tanh: false,
        }
    }
}

/// Which alignment terms take part in training and scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Global alignment only.
    Baseline,
    /// Global plus local alignment.
    Local,
    /// Global plus relation alignment.
    Relation,
    /// All three alignments.
    Full,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Baseline => "baseline",
            Mode::Local => "local",
            Mode::Relation => "relation",
            Mode::Full => "full",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "local" => Ok(Mode::Local),
            "relation" => Ok(Mode::Relation),
            "full" => Ok(Mode::Full),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}, expected baseline|local|relation|full"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Hinge margin alpha.
    pub margin: f64,
    /// Nearest-neighbor count for local/relation alignment and scoring.
    pub k: usize,
    pub w_global: f64,
    pub w_local: f64,
    pub w_relation: f64,
    pub mode: Mode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 1.0, k: 3, w_global: 1.0, w_local: 1.0, w_relation: 1.0, mode: Mode::Full }
    }
}

impl LossConfig {
    /// Weights after mode gating: disabled channels contribute zero.
    pub fn effective_weights(&self) -> (f64, f64, f64) {
        match self.mode {
            Mode::Baseline => (self.w_global, 0.0, 0.0),
            Mode::Local => (self.w_global, self.w_local, 0.0),
            Mode::Relation => (self.w_global, 0.0, self.w_relation),
            Mode::Full => (self.w_global, self.w_local, self.w_relation),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.margin < 0.0 {
            return Err(Error::Config(format!("margin must be nonnegative, got {}", self.margin)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.w_global < 0.0 || self.w_local < 0.0 || self.w_relation < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        let (wg, wl, wr) = self.effective_weights();
        if wg == 0.0 && wl == 0.0 && wr == 0.0 {
            return Err(Error::Config("all effective loss weights are zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-3, momentum: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: 16, epochs: 30, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Worker threads for read-only query scoring.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { workers: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: String,
    pub checkpoint: String,
    pub log: String,
    pub report: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: "data.jsonl".into(),
            checkpoint: "checkpoint.json".into(),
            log: "train_log.jsonl".into(),
            report: "report.json".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Preset> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?}, expected desk|paper"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    pub fn paper() -> Self {
        RunConfig { model: ModelConfig::paper(), ..RunConfig::desk() }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => RunConfig::desk(),
            Preset::Paper => RunConfig::paper(),
        }
    }

    /// Preset defaults merged with the keys present in `path` (file values
    /// win over the preset). Unknown keys anywhere are rejected.
    pub fn load(path: &Path, preset: Preset) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let overlay: serde_json::Value = serde_json::from_str(&text)?;
        Self::merged(preset, overlay)
    }

    pub fn merged(preset: Preset, overlay: serde_json::Value) -> Result<RunConfig> {
        let mut base = serde_json::to_value(RunConfig::preset(preset))?;
        merge_value(&mut base, overlay);
        let cfg: RunConfig = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.alphabet.is_empty() {
            return Err(Error::Config("alphabet must not be empty".into()));
        }
        if self.model.seq_len == 0 {
            return Err(Error::Config("seq_len must be positive".into()));
        }
        if self.model.conv_stack.is_empty() {
            return Err(Error::Config("conv_stack must not be empty".into()));
        }
        if self.train.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        self.loss.validate()
    }
}

fn merge_value(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_alphabet_has_seventy_unique_symbols() {
        let chars: Vec<char> = STANDARD_ALPHABET.chars().collect();
        assert_eq!(chars.len(), 70);
        let mut dedup = chars.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 70);
    }

    #[test]
    fn paper_preset_constants() {
        let cfg = RunConfig::paper();
        assert_eq!(cfg.model.seq_len, 201);
        assert_eq!(cfg.model.lstm_hidden, 2048);
        assert_eq!(cfg.model.common_dim, 1024);
        let stack: Vec<(usize, usize)> =
            cfg.model.conv_stack.iter().map(|c| (c.kernels, c.width)).collect();
        assert_eq!(stack, vec![(384, 4), (512, 4), (2048, 4)]);
        assert_eq!(cfg.loss.margin, 1.0);
        assert_eq!(cfg.loss.k, 3);
        assert_eq!(cfg.model.num_regions, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        let overlay: serde_json::Value =
            serde_json::from_str(r#"{"train": {"batch_szie": 8}}"#).unwrap();
        let err = RunConfig::merged(Preset::Desk, overlay).unwrap_err().to_string();
        assert!(err.contains("batch_szie"), "{err}");
    }

    #[test]
    fn overlay_wins_over_preset() {
        let overlay: serde_json::Value =
            serde_json::from_str(r#"{"train": {"epochs": 5}, "loss": {"mode": "baseline"}}"#)
                .unwrap();
        let cfg = RunConfig::merged(Preset::Desk, overlay).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.loss.mode, Mode::Baseline);
        assert_eq!(cfg.model.seq_len, 60); // untouched preset value
    }

    #[test]
    fn mode_gating_zeroes_weights() {
        let mut cfg = LossConfig::default();
        cfg.mode = Mode::Baseline;
        assert_eq!(cfg.effective_weights(), (1.0, 0.0, 0.0));
        cfg.mode = Mode::Local;
        assert_eq!(cfg.effective_weights(), (1.0, 1.0, 0.0));
        cfg.mode = Mode::Relation;
        assert_eq!(cfg.effective_weights(), (1.0, 0.0, 1.0));
    }

    #[test]
    fn all_zero_weights_rejected() {
        let cfg = LossConfig { w_global: 0.0, w_local: 0.0, w_relation: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        // baseline mode gates local/relation away; zero global then has no terms left
        let cfg =
            LossConfig { w_global: 0.0, mode: Mode::Baseline, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}

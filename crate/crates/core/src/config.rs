//! One experiment configuration structure covering every pipeline stage.
//!
//! All defaults live in the `Default` impls below; a configuration file may
//! override any subset of sections. Unknown keys are rejected, and
//! `validate` re-checks every module-level invariant before a run touches
//! the output directory.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flowgen::{FmTrainConfig, GenSpec};
use crate::mlp::Activation;
use crate::prefdata::CandidateGenConfig;
use crate::reward::{BtSpec, RmSpec, RmTrainConfig};
use crate::rlhf::RlConfig;
use crate::tasks::TaskParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub cfg_dropout: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            hidden: vec![256, 256],
            activation: Activation::Relu,
            cfg_dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FmConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for FmConfig {
    fn default() -> Self {
        FmConfig {
            iterations: 8000,
            batch: 64,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CandidatesConfig {
    pub n_sets: usize,
    pub n_per_set: usize,
    pub steps_choices: Vec<usize>,
    pub guidance_range: (f64, f64),
    pub late_start_choices: Vec<f64>,
    pub test_fraction: f64,
}

impl Default for CandidatesConfig {
    fn default() -> Self {
        let gen = CandidateGenConfig::default();
        CandidatesConfig {
            n_sets: 3000,
            n_per_set: gen.n_per_set,
            steps_choices: gen.steps_choices,
            guidance_range: gen.guidance_range,
            late_start_choices: gen.late_start_choices,
            test_fraction: 0.2,
        }
    }
}

impl CandidatesConfig {
    pub fn gen_config(&self) -> CandidateGenConfig {
        CandidateGenConfig {
            n_per_set: self.n_per_set,
            steps_choices: self.steps_choices.clone(),
            guidance_range: self.guidance_range,
            late_start_choices: self.late_start_choices.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Architecture of the scalar baseline head.
    pub baseline_hidden: Vec<usize>,
    /// Budget for the shuffled-label control model.
    pub control_iterations: usize,
}

impl Default for RmConfig {
    fn default() -> Self {
        RmConfig {
            hidden: vec![256, 256],
            activation: Activation::Relu,
            iterations: 8000,
            batch: 64,
            lr: 1e-3,
            baseline_hidden: vec![256, 256],
            control_iterations: 3000,
        }
    }
}

impl RmConfig {
    pub fn train_config(&self) -> RmTrainConfig {
        RmTrainConfig {
            hidden: self.hidden.clone(),
            activation: self.activation,
            iterations: self.iterations,
            batch: self.batch,
            lr: self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GsbConfig {
    pub conditions: usize,
    pub steps: usize,
    pub guidance: f64,
    pub tie_eps: f64,
}

impl Default for GsbConfig {
    fn default() -> Self {
        GsbConfig {
            conditions: 500,
            steps: 32,
            guidance: 2.0,
            tie_eps: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub tasks: TaskParams,
    pub generator: GeneratorConfig,
    pub fm: FmConfig,
    pub candidates: CandidatesConfig,
    pub rm: RmConfig,
    pub rl: RlConfig,
    pub gsb: GsbConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            out_dir: "runs/default".into(),
            tasks: TaskParams::default(),
            generator: GeneratorConfig::default(),
            fm: FmConfig::default(),
            candidates: CandidatesConfig::default(),
            rm: RmConfig::default(),
            rl: RlConfig::default(),
            gsb: GsbConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, reason: String| CoreError::Config {
            field: field.to_string(),
            reason,
        };
        self.tasks.validate()?;
        if !(0.0..=1.0).contains(&self.generator.cfg_dropout) {
            return Err(err("generator.cfg_dropout", "must be in [0, 1]".into()));
        }
        if self.generator.hidden.iter().any(|&h| h == 0) {
            return Err(err("generator.hidden", "layer widths must be positive".into()));
        }
        if self.fm.iterations == 0 || self.fm.batch == 0 {
            return Err(err("fm", "iterations and batch must be positive".into()));
        }
        if !(self.fm.lr > 0.0) {
            return Err(err("fm.lr", "must be positive".into()));
        }
        if self.candidates.n_sets == 0 {
            return Err(err("candidates.n_sets", "must be positive".into()));
        }
        if !(self.candidates.test_fraction > 0.0 && self.candidates.test_fraction < 1.0) {
            return Err(err("candidates.test_fraction", "must be in (0, 1)".into()));
        }
        self.candidates.gen_config().validate()?;
        if self.rm.iterations == 0 || self.rm.batch == 0 || !(self.rm.lr > 0.0) {
            return Err(err("rm", "iterations, batch, lr must be positive".into()));
        }
        if self.rm.hidden.iter().chain(&self.rm.baseline_hidden).any(|&h| h == 0) {
            return Err(err("rm.hidden", "layer widths must be positive".into()));
        }
        self.rl.validate()?;
        if self.gsb.conditions == 0 || self.gsb.steps == 0 {
            return Err(err("gsb", "conditions and steps must be positive".into()));
        }
        if !(self.gsb.tie_eps > 0.0) {
            return Err(err("gsb.tie_eps", "must be positive".into()));
        }
        Ok(())
    }

    pub fn gen_spec(&self) -> GenSpec {
        GenSpec {
            signal_dim: self.tasks.signal_dim,
            hidden: self.generator.hidden.clone(),
            activation: self.generator.activation,
            cfg_dropout: self.generator.cfg_dropout,
        }
    }

    pub fn fm_train_config(&self) -> FmTrainConfig {
        FmTrainConfig {
            iterations: self.fm.iterations,
            batch: self.fm.batch,
            lr: self.fm.lr,
        }
    }

    pub fn rm_spec(&self) -> RmSpec {
        RmSpec {
            signal_dim: self.tasks.signal_dim,
            hidden: self.rm.hidden.clone(),
            activation: self.rm.activation,
        }
    }

    pub fn bt_spec(&self) -> BtSpec {
        BtSpec {
            signal_dim: self.tasks.signal_dim,
            hidden: self.rm.baseline_hidden.clone(),
            activation: self.rm.activation,
        }
    }

    /// FNV-1a over the canonical JSON serialization; stable across runs of
    /// the same configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
    }

    #[test]
    fn json_roundtrip_and_unknown_key_rejection() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);

        let bad = text.replace("\"seed\":42", "\"sead\":42");
        let err = serde_json::from_str::<ExperimentConfig>(&bad).unwrap_err();
        assert!(err.to_string().contains("sead"), "{err}");
    }

    #[test]
    fn invalid_values_name_their_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.candidates.test_fraction = 1.5;
        match cfg.validate() {
            Err(CoreError::Config { field, .. }) => {
                assert_eq!(field, "candidates.test_fraction")
            }
            other => panic!("expected config error, got {other:?}"),
        }

        let mut cfg = ExperimentConfig::default();
        cfg.tasks.tie_eps = 0.0;
        match cfg.validate() {
            Err(CoreError::Config { field, .. }) => assert_eq!(field, "tasks.tie_eps"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn hash_is_stable_and_value_sensitive() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::default();
        assert_eq!(a.hash(), b.hash());
        let mut c = ExperimentConfig::default();
        c.seed = 43;
        assert_ne!(a.hash(), c.hash());
    }
}

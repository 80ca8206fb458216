//! Experiment configuration, read from JSON. Every field has a default, so
//! `{}` is a valid desk-scale configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tmra_core::networks::{DiscriminatorArch, GeneratorArch};
use tmra_core::phantom::PhantomSpec;
use tmra_core::sampling::ScheduleDescriptor;
use tmra_core::training::TrainConfig;

use crate::{format_err, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    /// The noise-free-coil phantom frames.
    #[default]
    GroundTruth,
    /// GRAPPA with all interleaves shared.
    GrappaVsMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub reference: ReferencePolicy,
    /// Structures whose interior mean forms a time-intensity curve.
    pub rois: Vec<String>,
    /// Onset threshold as a fraction of the baseline-to-peak rise.
    pub threshold_frac: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { reference: ReferencePolicy::GroundTruth, rois: vec!["left_artery".into(), "sinus".into()], threshold_frac: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Template for every phantom instance; instances are seeded jitters of it.
    pub phantom: PhantomSpec,
    pub jitter: f64,
    pub train_instances: usize,
    pub heldout_instances: usize,
    /// All instances share one set of coil maps.
    pub shared_coils: bool,
    pub schedule: ScheduleDescriptor,
    pub generator: GeneratorArch,
    pub discriminator: DiscriminatorArch,
    pub train: TrainConfig,
    pub evaluation: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let phantom = PhantomSpec::desk_default(0);
        let schedule = ScheduleDescriptor::desk_default(phantom.grid_height, phantom.grid_width, phantom.num_frames);
        Self {
            seed: 0,
            jitter: 1.0,
            train_instances: 3,
            heldout_instances: 1,
            shared_coils: true,
            schedule,
            generator: GeneratorArch { coils: phantom.num_coils, depth: 3, base_filters: 8, residual: true },
            discriminator: DiscriminatorArch { widths: vec![16, 32, 1] },
            train: TrainConfig { epochs: 10, phase1_epochs: 5, steps_per_epoch: Some(200), ..TrainConfig::default() },
            evaluation: EvalConfig::default(),
            phantom,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let config: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        config.validate()?;
        Ok(config)
    }

    /// Replaces the experiment seed and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.train.validate()?;
        self.generator.validate()?;
        let p = &self.phantom;
        let s = &self.schedule;
        if (s.height, s.width, s.num_frames) != (p.grid_height, p.grid_width, p.num_frames) {
            return format_err("schedule grid and frame count must match the phantom");
        }
        if self.generator.coils != p.num_coils {
            return format_err("generator coil count must match the phantom");
        }
        if self.train_instances == 0 || self.heldout_instances == 0 {
            return format_err("need at least one training and one held-out instance");
        }
        if self.train.vs_choices.iter().any(|&v| v > s.b_interleaves) {
            return format_err(format!("vs_choices {:?} exceed {} interleaves", self.train.vs_choices, s.b_interleaves));
        }
        if !(self.evaluation.threshold_frac > 0.0 && self.evaluation.threshold_frac < 1.0) {
            return format_err("threshold_frac must lie in (0, 1)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_gives_the_defaults() {
        let c: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
        let w = c.train.weights;
        assert_eq!((w.gamma, w.alpha, w.beta), (2.0, 1.0, 2.0));
    }

    #[test]
    fn json_round_trip_and_seed_override() {
        let c = ExperimentConfig::default().with_seed(11);
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!((back.seed, back.train.seed), (11, 11));
    }

    #[test]
    fn mismatched_schedule_is_rejected() {
        let mut c = ExperimentConfig::default();
        c.schedule.num_frames = 5;
        assert!(c.validate().is_err());
    }
}

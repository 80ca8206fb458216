#![allow(dead_code)]

use tmra_core::networks::DiscriminatorArch;
use tmra_core::sampling::ScheduleDescriptor;
use tmra_experiment::config::ExperimentConfig;

/// 32×32, two coils, six frames, one training and one held-out instance,
/// two epochs of three steps.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.phantom.grid_height = 32;
    c.phantom.grid_width = 32;
    c.phantom.num_frames = 6;
    c.phantom.num_coils = 2;
    c.schedule = ScheduleDescriptor::desk_default(32, 32, 6);
    c.schedule.a_radius = 8;
    c.train_instances = 1;
    c.heldout_instances = 1;
    c.generator.coils = 2;
    c.generator.base_filters = 4;
    c.discriminator = DiscriminatorArch { widths: vec![4, 4, 1] };
    c.train.epochs = 2;
    c.train.phase1_epochs = 1;
    c.train.steps_per_epoch = Some(3);
    // The vessels have no interior pixels at this size.
    c.evaluation.rois = vec!["brain".into()];
    c
}

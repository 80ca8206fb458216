//! Phantom suite generation and its in-memory view.
//!
//! Array names inside the container:
//!
//! ```text
//! masks/vs{v}/frame{t}                 uint8 [H, W]
//! {inst}/ground_truth/frame{t}         complex64 [C, H, W]
//! {inst}/grappa/frame{t}               complex64 [C, H, W]   GRAPPA, all interleaves shared
//! {inst}/aliased/vs{v}/frame{t}        complex64 [C, H, W]
//! {inst}/object/frame{t}               float32 [H, W]        noise-free object
//! {inst}/labels                        uint8 [H, W]
//! {inst}/interior/{structure}          uint8 [H, W]
//! ```

use std::collections::BTreeMap;

use ndarray::Array2;
use tmra_core::grappa::grappa_reconstruct;
use tmra_core::phantom::{make_phantom_sequence, MultiCoilImage, PhantomSpec};
use tmra_core::sampling::{acquire, view_shared_recon, SamplingSchedule};
use tmra_core::training::{AliasedFrame, TrainingData};

use crate::config::ExperimentConfig;
use crate::container::{DatasetContainer, InstanceInfo, Manifest, Split};
use crate::{format_err, Result};

pub fn frame_key(t: usize) -> String {
    format!("frame{t:03}")
}

pub fn mask_name(vs: usize, t: usize) -> String {
    format!("masks/vs{vs}/{}", frame_key(t))
}

pub fn ground_truth_name(inst: &str, t: usize) -> String {
    format!("{inst}/ground_truth/{}", frame_key(t))
}

pub fn grappa_name(inst: &str, t: usize) -> String {
    format!("{inst}/grappa/{}", frame_key(t))
}

pub fn aliased_name(inst: &str, vs: usize, t: usize) -> String {
    format!("{inst}/aliased/vs{vs}/{}", frame_key(t))
}

fn object_name(inst: &str, t: usize) -> String {
    format!("{inst}/object/{}", frame_key(t))
}

/// Seeded jitter of the template for instance `index`.
pub fn instance_spec(config: &ExperimentConfig, index: usize) -> PhantomSpec {
    let seed = config.seed.wrapping_mul(1000).wrapping_add(index as u64 + 1);
    let mut spec = config.phantom.jittered(seed, config.jitter);
    if config.shared_coils {
        spec.coil_seed = Some(config.seed);
    }
    spec
}

fn sorted_vs(config: &ExperimentConfig) -> Vec<usize> {
    let mut vs = config.train.vs_choices.clone();
    vs.sort_unstable();
    vs.dedup();
    vs
}

/// Simulates every instance and stores it in single precision.
pub fn generate_container(config: &ExperimentConfig) -> Result<DatasetContainer> {
    config.validate()?;
    let schedule = SamplingSchedule::build(config.schedule.clone())?;
    let vs_choices = sorted_vs(config);
    let infos: Vec<InstanceInfo> = (0..config.train_instances + config.heldout_instances)
        .map(|k| {
            let (name, split) = if k < config.train_instances {
                (format!("train{k:02}"), Split::Train)
            } else {
                (format!("heldout{:02}", k - config.train_instances), Split::Heldout)
            };
            InstanceInfo { name, split, spec: instance_spec(config, k) }
        })
        .collect();
    let mut c = DatasetContainer::new(Manifest::new(config.seed, config.schedule.clone(), vs_choices.clone(), infos.clone()));
    let frames = schedule.num_frames();
    for &vs in &vs_choices {
        for t in 0..frames {
            c.put_mask(&mask_name(vs, t), &schedule.mask_for_frame(t, vs)?.mask)?;
        }
    }
    for info in &infos {
        let seq = make_phantom_sequence(&info.spec)?;
        let acq = acquire(&seq.frames, &schedule)?;
        let inst = &info.name;
        for t in 0..frames {
            c.put_image(&ground_truth_name(inst, t), &seq.frames[t])?;
            c.put_image(&grappa_name(inst, t), &grappa_reconstruct(&acq, &schedule, t)?)?;
            c.put_real(&object_name(inst, t), "object", &seq.objects[t])?;
            for &vs in &vs_choices {
                c.put_image(&aliased_name(inst, vs, t), &view_shared_recon(&acq, &schedule, t, vs)?)?;
            }
        }
        c.put_bytes(&format!("{inst}/labels"), "labels", &seq.labels)?;
        for (s, interior) in info.spec.structures.iter().zip(&seq.interiors) {
            c.put_mask(&format!("{inst}/interior/{}", s.name), interior)?;
        }
    }
    Ok(c)
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub info: InstanceInfo,
    pub ground_truth: Vec<MultiCoilImage>,
    pub grappa: Vec<MultiCoilImage>,
    /// Keyed by `(vs, frame)`.
    pub aliased: BTreeMap<(usize, usize), MultiCoilImage>,
    pub objects: Vec<Array2<f64>>,
    pub labels: Array2<u8>,
    /// Keyed by structure name.
    pub interiors: BTreeMap<String, Array2<bool>>,
}

impl Instance {
    pub fn aliased(&self, vs: usize, t: usize) -> Result<&MultiCoilImage> {
        match self.aliased.get(&(vs, t)) {
            Some(a) => Ok(a),
            None => format_err(format!("instance {} has no vs {vs} image for frame {t}", self.info.name)),
        }
    }
}

/// Decoded dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub seed: u64,
    pub schedule: SamplingSchedule,
    pub vs_choices: Vec<usize>,
    /// Keyed by `(vs, frame)`.
    pub masks: BTreeMap<(usize, usize), Array2<bool>>,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn from_container(c: &DatasetContainer) -> Result<Self> {
        let m = &c.manifest;
        let schedule = SamplingSchedule::build(m.schedule.clone())?;
        let frames = schedule.num_frames();
        let mut masks = BTreeMap::new();
        for &vs in &m.vs_choices {
            for t in 0..frames {
                masks.insert((vs, t), c.mask(&mask_name(vs, t))?);
            }
        }
        let mut instances = Vec::new();
        for info in &m.instances {
            let inst = &info.name;
            let mut aliased = BTreeMap::new();
            for &vs in &m.vs_choices {
                for t in 0..frames {
                    aliased.insert((vs, t), c.image(&aliased_name(inst, vs, t), t)?);
                }
            }
            let interiors = info
                .spec
                .structures
                .iter()
                .map(|s| Ok((s.name.clone(), c.mask(&format!("{inst}/interior/{}", s.name))?)))
                .collect::<Result<_>>()?;
            instances.push(Instance {
                info: info.clone(),
                ground_truth: (0..frames).map(|t| c.image(&ground_truth_name(inst, t), t)).collect::<Result<_>>()?,
                grappa: (0..frames).map(|t| c.image(&grappa_name(inst, t), t)).collect::<Result<_>>()?,
                aliased,
                objects: (0..frames).map(|t| c.real(&object_name(inst, t))).collect::<Result<_>>()?,
                labels: c.bytes(&format!("{inst}/labels"))?,
                interiors,
            });
        }
        Ok(Self { seed: m.seed, schedule, vs_choices: m.vs_choices.clone(), masks, instances })
    }

    /// Generates the suite through the container, so the result equals what
    /// a later read of the written dataset returns.
    pub fn generate(config: &ExperimentConfig) -> Result<(DatasetContainer, Self)> {
        let c = generate_container(config)?;
        let d = Self::from_container(&c)?;
        Ok((c, d))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(move |i| i.info.split == split)
    }

    /// Domain X: GRAPPA images of the training instances. Domain Y: their
    /// aliased frames at every requested view-sharing number.
    pub fn training_data(&self, vs_choices: &[usize]) -> Result<TrainingData> {
        if let Some(v) = vs_choices.iter().find(|v| !self.vs_choices.contains(v)) {
            return format_err(format!("dataset has no aliased images for vs {v}"));
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        for inst in self.split(Split::Train) {
            x.extend(inst.grappa.iter().cloned());
            for t in 0..self.schedule.num_frames() {
                let variants = vs_choices
                    .iter()
                    .map(|&vs| Ok((vs, (inst.aliased(vs, t)?.clone(), self.masks[&(vs, t)].clone()))))
                    .collect::<Result<_>>()?;
                y.push(AliasedFrame { frame: t, variants });
            }
        }
        Ok(TrainingData { x, y, schedule: self.schedule.clone() })
    }
}

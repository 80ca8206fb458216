//! Training checkpoints: a JSON descriptor plus one little-endian `f64` blob.
//!
//! ```text
//! <dir>/checkpoint.json   architectures, config, progress, tensor index
//! <dir>/tensors.bin       concatenated tensor data
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tmra_autograd::{Adam, AdamConfig, ParamSet, Tensor};

use crate::error::{contract_err, Result};
use crate::networks::{Discriminator, DiscriminatorArch, Generator, GeneratorArch};
use crate::training::TrainConfig;

pub const DESCRIPTOR_FILE: &str = "checkpoint.json";
pub const TENSOR_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f64` elements into the tensor file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDescriptor {
    pub format_version: u32,
    pub generator: GeneratorArch,
    pub discriminator: DiscriminatorArch,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epochs_done: usize,
    pub global_step: u64,
    pub adam_steps_g: u64,
    pub adam_steps_d: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to continue or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub global_step: u64,
}

fn groups(c: &Checkpoint) -> Vec<(&'static str, Vec<String>, Vec<&Tensor>)> {
    let names = |p: &ParamSet| p.names().to_vec();
    let g = &c.generator.params;
    let d = &c.discriminator.params;
    vec![
        ("generator", names(g), g.tensors().iter().collect()),
        ("discriminator", names(d), d.tensors().iter().collect()),
        ("adam_g.m", names(g), c.opt_g.first_moments().iter().collect()),
        ("adam_g.v", names(g), c.opt_g.second_moments().iter().collect()),
        ("adam_d.m", names(d), c.opt_d.first_moments().iter().collect()),
        ("adam_d.v", names(d), c.opt_d.second_moments().iter().collect()),
    ]
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        let mut bytes = Vec::new();
        let mut offset = 0;
        for (group, names, tensors) in groups(self) {
            for (name, t) in names.into_iter().zip(tensors) {
                entries.push(TensorEntry { group: group.into(), name, shape: t.shape().to_vec(), offset });
                for v in t.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                offset += t.len();
            }
        }
        let descriptor = CheckpointDescriptor {
            format_version: 1,
            generator: self.generator.arch,
            discriminator: self.discriminator.arch.clone(),
            config: self.config.clone(),
            epochs_done: self.epochs_done,
            global_step: self.global_step,
            adam_steps_g: self.opt_g.steps_taken(),
            adam_steps_d: self.opt_d.steps_taken(),
            tensors: entries,
        };
        fs::write(dir.join(TENSOR_FILE), bytes)?;
        fs::write(dir.join(DESCRIPTOR_FILE), serde_json::to_string_pretty(&descriptor)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let descriptor: CheckpointDescriptor = serde_json::from_str(&fs::read_to_string(dir.join(DESCRIPTOR_FILE))?)?;
        if descriptor.format_version != 1 {
            return contract_err(format!("unsupported checkpoint version {}", descriptor.format_version));
        }
        let bytes = fs::read(dir.join(TENSOR_FILE))?;
        if bytes.len() % 8 != 0 {
            return contract_err("tensor file length is not a multiple of 8 bytes");
        }
        let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let collect = |group: &str| -> Result<ParamSet> {
            let mut set = ParamSet::new();
            for e in descriptor.tensors.iter().filter(|e| e.group == group) {
                let n: usize = e.shape.iter().product();
                let Some(slice) = values.get(e.offset..e.offset + n) else {
                    return contract_err(format!("tensor {group}/{} runs past the end of the data", e.name));
                };
                set.push(e.name.clone(), Tensor::new(&e.shape, slice.to_vec())?);
            }
            Ok(set)
        };
        let generator = Generator::from_params(descriptor.generator, collect("generator")?)?;
        let discriminator = Discriminator::from_params(descriptor.discriminator.clone(), collect("discriminator")?)?;
        let adam = descriptor.config.adam();
        let moments = |m: &str, v: &str, steps: u64, like: &ParamSet| -> Result<Adam> {
            let m = collect(m)?;
            let v = collect(v)?;
            if m.names() != like.names() || v.names() != like.names() {
                return contract_err("optimizer state does not match the parameters");
            }
            Ok(Adam::from_state(adam, steps, m.tensors().to_vec(), v.tensors().to_vec()))
        };
        let opt_g = moments("adam_g.m", "adam_g.v", descriptor.adam_steps_g, &generator.params)?;
        let opt_d = moments("adam_d.m", "adam_d.v", descriptor.adam_steps_d, &discriminator.params)?;
        Ok(Self {
            generator,
            discriminator,
            opt_g,
            opt_d,
            config: descriptor.config,
            epochs_done: descriptor.epochs_done,
            global_step: descriptor.global_step,
        })
    }

    /// Fresh state for a new run.
    pub fn initial(config: &TrainConfig, gen_arch: GeneratorArch, disc_arch: DiscriminatorArch) -> Result<Self> {
        let generator = Generator::new(gen_arch, config.seed)?;
        let discriminator = Discriminator::new(disc_arch, config.seed.wrapping_add(1))?;
        let adam: AdamConfig = config.adam();
        Ok(Self {
            opt_g: Adam::new(adam, &generator.params),
            opt_d: Adam::new(adam, &discriminator.params),
            generator,
            discriminator,
            config: config.clone(),
            epochs_done: 0,
            global_step: 0,
        })
    }
}

//! Unsupervised training: normalization, unpaired sampling with random view
//! sharing, alternating generator and critic updates, and the learning-rate
//! schedule.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tmra_autograd::{Adam, AdamConfig, Graph, Tensor};

use crate::checkpoint::Checkpoint;
use crate::error::{contract_err, param_err, Error, Result};
use crate::losses::{critic_terms, generator_terms, LossBatch, LossReport, LossWeights};
use crate::metrics::{ssos, ImageNorm};
use crate::networks::{apply_map, ssos_var, Critic, DiscriminatorArch, GeneratorArch, ImageMap};
use crate::phantom::MultiCoilImage;
use crate::sampling::{images_to_tensor, SamplingSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub phase1_epochs: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub g_steps_per_d_step: usize,
    pub batch_size: usize,
    pub vs_choices: Vec<usize>,
    pub weights: LossWeights,
    pub seed: u64,
    pub image_norm: ImageNorm,
    /// Caps the number of steps per epoch; by default one pass over domain Y.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            phase1_epochs: 10,
            lr: 0.001,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            g_steps_per_d_step: 5,
            batch_size: 1,
            vs_choices: vec![2, 3, 5],
            weights: LossWeights::default(),
            seed: 0,
            image_norm: ImageNorm::L1,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.phase1_epochs > self.epochs {
            return param_err(format!("need 0 < epochs and phase1 <= epochs, got {} / {}", self.epochs, self.phase1_epochs));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return param_err(format!("learning rate {} is invalid", self.lr));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return param_err(format!("Adam beta {b} outside [0, 1)"));
            }
        }
        if self.g_steps_per_d_step == 0 || self.batch_size == 0 {
            return param_err("g_steps_per_d_step and batch_size must be positive");
        }
        if self.vs_choices.is_empty() || self.vs_choices.contains(&0) {
            return param_err(format!("vs_choices {:?} is invalid", self.vs_choices));
        }
        if self.steps_per_epoch == Some(0) {
            return param_err("steps_per_epoch must be positive");
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: 1e-8 }
    }
}

/// Constant rate for the first `phase1_epochs`, then `lr·(E − e)/(E − P)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return param_err(format!("epoch {epoch} outside 0..{}", config.epochs));
    }
    if epoch < config.phase1_epochs {
        return Ok(config.lr);
    }
    let remaining = (config.epochs - epoch) as f64;
    let span = (config.epochs - config.phase1_epochs) as f64;
    Ok(config.lr * remaining / span)
}

/// Divides all coils by the standard deviation of the SSoS image.
pub fn normalize(y: &MultiCoilImage) -> Result<(MultiCoilImage, f64)> {
    let s = ssos(y).data;
    let n = s.len() as f64;
    let mean = s.sum() / n;
    let std = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Degenerate("image has zero SSoS standard deviation".into()));
    }
    let mut out = y.clone();
    out.data.mapv_inplace(|v| v / std);
    Ok((out, std))
}

pub fn denormalize(x: &MultiCoilImage, scale: f64) -> MultiCoilImage {
    let mut out = x.clone();
    out.data.mapv_inplace(|v| v * scale);
    out
}

/// Normalizes, applies the generator, and restores the input scale.
pub fn reconstruct(gen: &dyn ImageMap, y: &MultiCoilImage) -> Result<MultiCoilImage> {
    let (yn, scale) = normalize(y)?;
    Ok(denormalize(&apply_map(gen, &yn)?, scale))
}

/// Aliased versions of one temporal frame, keyed by view-sharing number.
#[derive(Clone, Debug)]
pub struct AliasedFrame {
    pub frame: usize,
    pub variants: BTreeMap<usize, (MultiCoilImage, Array2<bool>)>,
}

/// Unpaired training data. Domain X holds fully sampled images; domain Y holds
/// aliased frames. Fresh masks for the X terms come from `schedule`.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub x: Vec<MultiCoilImage>,
    pub y: Vec<AliasedFrame>,
    pub schedule: SamplingSchedule,
}

pub(crate) struct Prepared {
    x: Vec<Tensor>,
    y: Vec<BTreeMap<usize, (Tensor, Rc<Array2<bool>>)>>,
}

impl TrainingData {
    pub(crate) fn prepare(&self, config: &TrainConfig) -> Result<Prepared> {
        if self.x.is_empty() || self.y.is_empty() {
            return param_err("training needs nonempty X and Y datasets");
        }
        let x = self
            .x
            .iter()
            .map(|img| images_to_tensor(&[&normalize(img)?.0]))
            .collect::<Result<Vec<_>>>()?;
        let mut y = Vec::with_capacity(self.y.len());
        for f in &self.y {
            let mut m = BTreeMap::new();
            for &vs in &config.vs_choices {
                let Some((img, mask)) = f.variants.get(&vs) else {
                    return contract_err(format!("frame {} has no aliased image for vs {vs}", f.frame));
                };
                m.insert(vs, (images_to_tensor(&[&normalize(img)?.0])?, Rc::new(mask.clone())));
            }
            y.push(m);
        }
        Ok(Prepared { x, y })
    }
}

/// Sample indices and random draws for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraw {
    pub y_index: Vec<usize>,
    pub y_vs: Vec<usize>,
    pub x_index: Vec<usize>,
    pub x_mask_frame: Vec<usize>,
    pub x_vs: Vec<usize>,
    pub penalty_eps: Vec<f64>,
}

/// Draws Y and X indices from separate seeded streams, so X indices never
/// depend on which Y sample was chosen.
pub struct UnpairedSampler {
    y_rng: ChaCha8Rng,
    x_rng: ChaCha8Rng,
    y_order: Vec<usize>,
    cursor: usize,
}

impl UnpairedSampler {
    pub fn for_epoch(seed: u64, epoch: usize, y_len: usize) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(4 * epoch as u64 + k);
            r
        };
        let mut y_rng = stream(0);
        let mut y_order: Vec<usize> = (0..y_len).collect();
        rand::seq::SliceRandom::shuffle(y_order.as_mut_slice(), &mut y_rng);
        Self { y_rng, x_rng: stream(1), y_order, cursor: 0 }
    }

    pub fn draw(&mut self, batch: usize, x_len: usize, frames: usize, vs_choices: &[usize]) -> StepDraw {
        let mut d = StepDraw {
            y_index: Vec::with_capacity(batch),
            y_vs: Vec::with_capacity(batch),
            x_index: Vec::with_capacity(batch),
            x_mask_frame: Vec::with_capacity(batch),
            x_vs: Vec::with_capacity(batch),
            penalty_eps: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            if self.cursor == self.y_order.len() {
                rand::seq::SliceRandom::shuffle(self.y_order.as_mut_slice(), &mut self.y_rng);
                self.cursor = 0;
            }
            d.y_index.push(self.y_order[self.cursor]);
            self.cursor += 1;
            d.y_vs.push(vs_choices[self.y_rng.gen_range(0..vs_choices.len())]);
            d.x_index.push(self.x_rng.gen_range(0..x_len));
            d.x_mask_frame.push(self.x_rng.gen_range(0..frames));
            d.x_vs.push(vs_choices[self.x_rng.gen_range(0..vs_choices.len())]);
            d.penalty_eps.push(self.x_rng.gen_range(0.0..1.0));
        }
        d
    }
}

fn concat_batch(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts[0].shape();
    let mut shape = first.to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(&shape, data)?)
}

pub(crate) fn build_batch(prep: &Prepared, data: &TrainingData, draw: &StepDraw) -> Result<LossBatch> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut mask_x = Vec::new();
    let mut mask_y = Vec::new();
    for i in 0..draw.y_index.len() {
        let (y, my) = &prep.y[draw.y_index[i]][&draw.y_vs[i]];
        ys.push(y);
        mask_y.push((**my).clone());
        xs.push(&prep.x[draw.x_index[i]]);
        mask_x.push(data.schedule.mask_for_frame(draw.x_mask_frame[i], draw.x_vs[i])?.mask);
    }
    Ok(LossBatch { x: concat_batch(&xs)?, y: concat_batch(&ys)?, mask_x: Rc::new(mask_x), mask_y: Rc::new(mask_y) })
}

pub(crate) fn divergence(step: u64, report: &LossReport, what: &str) -> Error {
    Error::Divergence {
        step,
        report: format!("{what}; losses {}", serde_json::to_string(report).unwrap_or_default()),
    }
}

pub(crate) fn all_finite(ts: &[Tensor]) -> bool {
    ts.iter().all(Tensor::is_finite)
}

/// One generator update, plus a critic update on every
/// `g_steps_per_d_step`-th step. The critic sees `G(y)` from before the
/// generator update. The gradient penalty is evaluated only on critic steps.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    gen: &mut dyn ImageMap,
    critic: &mut dyn Critic,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    batch: &LossBatch,
    penalty_eps: &[f64],
    step_index: u64,
    lr: f64,
    config: &TrainConfig,
) -> Result<LossReport> {
    let weights = &config.weights;
    let graph = Graph::new();
    let gp = gen.params().bind(&graph);
    let terms = generator_terms(&graph, &*gen, &gp, &*critic, batch, weights, config.image_norm)?;
    let cycle = graph.item(terms.cycle)?;
    let wgan_g = graph.item(terms.wgan_g)?;
    let identity = graph.item(terms.identity)?;
    let freq = graph.item(terms.freq)?;
    let bracket = graph.item(terms.bracket)?;
    let mut report = LossReport {
        cycle,
        wgan_g,
        wgan_d: -bracket,
        identity,
        freq,
        total_g: weights.combine(cycle, wgan_g, identity, freq),
        total_d: -bracket,
        gradient_penalty: None,
    };
    if !report.is_finite() {
        return Err(divergence(step_index, &report, "non-finite generator loss"));
    }
    let grads: Vec<Tensor> = graph.grad(terms.total, &gp)?.into_iter().map(|v| (*graph.value(v)).clone()).collect();
    if !all_finite(&grads) {
        return Err(divergence(step_index, &report, "non-finite generator gradient"));
    }
    let d_step = (step_index + 1) % config.g_steps_per_d_step as u64 == 0;
    let fake_and_real = if d_step {
        let fake = (*graph.value(ssos_var(&graph, terms.gy)?)).clone();
        let real = (*graph.value(ssos_var(&graph, graph.constant(batch.x.clone()))?)).clone();
        Some((real, fake))
    } else {
        None
    };
    drop(graph);
    opt_g.step(gen.params_mut(), &grads, lr)?;

    if let Some((real, fake)) = fake_and_real {
        let cg = Graph::new();
        let cp = critic.params().bind(&cg);
        let ct = critic_terms(&cg, &*critic, &cp, &real, &fake, weights.gp_coeff, penalty_eps)?;
        let penalty = cg.item(ct.penalty)?;
        report.gradient_penalty = Some(penalty);
        report.wgan_d = cg.item(ct.total)?;
        report.total_d = report.wgan_d;
        if !report.is_finite() {
            return Err(divergence(step_index, &report, "non-finite critic loss"));
        }
        let grads: Vec<Tensor> = cg.grad(ct.total, &cp)?.into_iter().map(|v| (*cg.value(v)).clone()).collect();
        if !all_finite(&grads) {
            return Err(divergence(step_index, &report, "non-finite critic gradient"));
        }
        opt_d.step(critic.params_mut(), &grads, lr)?;
    }
    Ok(report)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Writes `epoch_XXXX` checkpoints here after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continues from this state instead of initializing.
    pub resume: Option<Checkpoint>,
    /// Stops after this many epochs in this call (the schedule still uses `config.epochs`).
    pub max_epochs: Option<usize>,
}

pub struct TrainOutcome {
    pub state: Checkpoint,
    pub log: Vec<LogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}"))
}

/// Runs the schedule from the initial (or resumed) state.
pub fn train(
    data: &TrainingData,
    config: &TrainConfig,
    gen_arch: GeneratorArch,
    disc_arch: DiscriminatorArch,
    options: TrainOptions,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let prep = data.prepare(config)?;
    let mut state = match options.resume {
        Some(ck) => {
            if ck.config != *config {
                return contract_err("resumed checkpoint was trained with a different configuration");
            }
            ck
        }
        None => Checkpoint::initial(config, gen_arch, disc_arch)?,
    };
    let steps = config.steps_per_epoch.unwrap_or(data.y.len().div_ceil(config.batch_size));
    let last = match options.max_epochs {
        Some(n) => (state.epochs_done + n).min(config.epochs),
        None => config.epochs,
    };
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in state.epochs_done..last {
        let lr = lr_at(epoch, config)?;
        let mut sampler = UnpairedSampler::for_epoch(config.seed, epoch, data.y.len());
        for _ in 0..steps {
            let draw = sampler.draw(config.batch_size, data.x.len(), data.schedule.num_frames(), &config.vs_choices);
            let batch = build_batch(&prep, data, &draw)?;
            let Checkpoint { generator, discriminator, opt_g, opt_d, global_step, .. } = &mut state;
            let report = train_step(generator, discriminator, opt_g, opt_d, &batch, &draw.penalty_eps, *global_step, lr, config)?;
            let record = LogRecord { step: *global_step, epoch, lr, report };
            on_record(&record);
            log.push(record);
            *global_step += 1;
        }
        state.epochs_done = epoch + 1;
        if let Some(dir) = &options.checkpoint_dir {
            let path = checkpoint_path(dir, epoch);
            state.save(&path)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome { state, log, checkpoints })
}

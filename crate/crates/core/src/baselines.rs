//! Loss ablations and the conventional two-generator cycleGAN.
//!
//! The conventional model learns a backward generator `H: X → Y` in place of
//! the fixed aliasing operator, with a critic on each domain.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tmra_autograd::{Adam, Graph, Tensor, Var};

use crate::error::{contract_err, param_err, Result};
use crate::losses::{critic_terms, image_distance, LossBatch, LossReport};
use crate::metrics::{psnr, ssim, ssos, MetricRecord, SSoSImage, SsimParams};
use crate::networks::{critic_scores, ssos_var, Critic, Discriminator, DiscriminatorArch, Generator, GeneratorArch, ImageMap};
use crate::phantom::MultiCoilImage;
use crate::training::{
    all_finite, build_batch, divergence, lr_at, reconstruct, train, LogRecord, TrainConfig, TrainOptions, TrainingData,
    UnpairedSampler,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Proposed,
    NoFreq,
    NoIdentity,
    NoFreqNoIdentity,
    ConventionalCyclegan,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Proposed,
        AblationVariant::NoFreq,
        AblationVariant::NoIdentity,
        AblationVariant::NoFreqNoIdentity,
        AblationVariant::ConventionalCyclegan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::NoFreq => "no_freq",
            Self::NoIdentity => "no_identity",
            Self::NoFreqNoIdentity => "no_freq_no_identity",
            Self::ConventionalCyclegan => "conventional_cyclegan",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_freq: bool,
    pub use_identity: bool,
    pub variant: AblationVariant,
}

impl AblationConfig {
    pub fn for_variant(variant: AblationVariant) -> Self {
        let (use_freq, use_identity) = match variant {
            AblationVariant::Proposed => (true, true),
            AblationVariant::NoFreq => (false, true),
            AblationVariant::NoIdentity => (true, false),
            AblationVariant::NoFreqNoIdentity => (false, false),
            // The conventional model has no frequency term; identity is kept.
            AblationVariant::ConventionalCyclegan => (false, true),
        };
        Self { use_freq, use_identity, variant }
    }

    pub fn validate(&self) -> Result<()> {
        if *self != Self::for_variant(self.variant) {
            return param_err(format!("flags do not match variant {}", self.variant.name()));
        }
        Ok(())
    }

    /// The shared config with the disabled weights set to zero.
    pub fn apply(&self, shared: &TrainConfig) -> Result<TrainConfig> {
        self.validate()?;
        let mut c = shared.clone();
        if !self.use_freq {
            c.weights.beta = 0.0;
        }
        if !self.use_identity {
            c.weights.alpha = 0.0;
        }
        Ok(c)
    }
}

/// Two generators and two critics of the same families as the proposed model.
#[derive(Clone, Debug, PartialEq)]
pub struct ConventionalCycleGan {
    /// `Y → X`.
    pub g: Generator,
    /// `X → Y`.
    pub h: Generator,
    /// Critic on domain X.
    pub d_x: Discriminator,
    /// Critic on domain Y.
    pub d_y: Discriminator,
}

pub fn build_conventional_cyclegan(gen_arch: GeneratorArch, disc_arch: DiscriminatorArch, seed: u64) -> Result<ConventionalCycleGan> {
    Ok(ConventionalCycleGan {
        g: Generator::new(gen_arch, seed)?,
        h: Generator::new(gen_arch, seed.wrapping_add(2))?,
        d_x: Discriminator::new(disc_arch.clone(), seed.wrapping_add(1))?,
        d_y: Discriminator::new(disc_arch, seed.wrapping_add(3))?,
    })
}

impl ConventionalCycleGan {
    pub fn param_count(&self) -> usize {
        self.g.params.count() + self.h.params.count() + self.d_x.params.count() + self.d_y.params.count()
    }
}

struct ConventionalTerms {
    cycle: Var,
    wgan_g: Var,
    identity: Var,
    total: Var,
    gy: Var,
    hx: Var,
}

/// `γ·[d(y, H(G(y))) + d(x, G(H(x)))] − mean D_X(G(y)) − mean D_Y(H(x)) + α·[d(x, G(x)) + d(y, H(y))]`.
#[allow(clippy::too_many_arguments)]
fn conventional_terms(
    graph: &Graph,
    model: &ConventionalCycleGan,
    gp: &[Var],
    hp: &[Var],
    x: Var,
    y: Var,
    config: &TrainConfig,
) -> Result<ConventionalTerms> {
    let norm = config.image_norm;
    let w = &config.weights;
    let dxp = model.d_x.params.bind_constant(graph);
    let dyp = model.d_y.params.bind_constant(graph);
    let gy = model.g.forward(graph, gp, y)?;
    let hx = model.h.forward(graph, hp, x)?;
    let hgy = model.h.forward(graph, hp, gy)?;
    let ghx = model.g.forward(graph, gp, hx)?;
    let cycle = graph.add(image_distance(graph, y, hgy, norm)?, image_distance(graph, x, ghx, norm)?)?;
    let n = graph.shape(y)[0] as f64;
    let score = |critic: &Discriminator, params: &[Var], v: Var| -> Result<Var> {
        let s = graph.sum_all(critic_scores(graph, critic, params, ssos_var(graph, v)?)?)?;
        Ok(graph.scale(s, 1.0 / n)?)
    };
    let wgan_g = graph.neg(graph.add(score(&model.d_x, &dxp, gy)?, score(&model.d_y, &dyp, hx)?)?)?;
    let gx = model.g.forward(graph, gp, x)?;
    let hy = model.h.forward(graph, hp, y)?;
    let identity = graph.add(image_distance(graph, x, gx, norm)?, image_distance(graph, y, hy, norm)?)?;
    let mut total = graph.add(graph.scale(cycle, w.gamma)?, wgan_g)?;
    total = graph.add(total, graph.scale(identity, w.alpha)?)?;
    Ok(ConventionalTerms { cycle, wgan_g, identity, total, gy, hx })
}

/// Optimizer state of the four networks.
pub struct ConventionalOptimizers {
    pub g: Adam,
    pub h: Adam,
    pub d_x: Adam,
    pub d_y: Adam,
}

impl ConventionalOptimizers {
    pub fn new(model: &ConventionalCycleGan, config: &TrainConfig) -> Self {
        let a = config.adam();
        Self {
            g: Adam::new(a, &model.g.params),
            h: Adam::new(a, &model.h.params),
            d_x: Adam::new(a, &model.d_x.params),
            d_y: Adam::new(a, &model.d_y.params),
        }
    }
}

fn values(graph: &Graph, vars: Vec<Var>) -> Vec<Tensor> {
    vars.into_iter().map(|v| (*graph.value(v)).clone()).collect()
}

/// One update of both generators, plus both critics on every
/// `g_steps_per_d_step`-th step. The frequency weight is unused.
pub fn conventional_train_step(
    model: &mut ConventionalCycleGan,
    opt: &mut ConventionalOptimizers,
    batch: &LossBatch,
    penalty_eps: &[f64],
    step_index: u64,
    lr: f64,
    config: &TrainConfig,
) -> Result<LossReport> {
    batch.validate()?;
    let graph = Graph::new();
    let gp = model.g.params.bind(&graph);
    let hp = model.h.params.bind(&graph);
    let x = graph.constant(batch.x.clone());
    let y = graph.constant(batch.y.clone());
    let t = conventional_terms(&graph, model, &gp, &hp, x, y, config)?;
    let (cycle, wgan_g, identity) = (graph.item(t.cycle)?, graph.item(t.wgan_g)?, graph.item(t.identity)?);
    let mut report = LossReport {
        cycle,
        wgan_g,
        wgan_d: 0.0,
        identity,
        freq: 0.0,
        total_g: config.weights.combine(cycle, wgan_g, identity, 0.0),
        total_d: 0.0,
        gradient_penalty: None,
    };
    if !report.is_finite() {
        return Err(divergence(step_index, &report, "non-finite generator loss"));
    }
    let both: Vec<Var> = gp.iter().chain(&hp).copied().collect();
    let mut grads = values(&graph, graph.grad(t.total, &both)?);
    if !all_finite(&grads) {
        return Err(divergence(step_index, &report, "non-finite generator gradient"));
    }
    let d_step = (step_index + 1) % config.g_steps_per_d_step as u64 == 0;
    let pairs = if d_step {
        let s = |v: Var| -> Result<Tensor> { Ok((*graph.value(ssos_var(&graph, v)?)).clone()) };
        Some(((s(x)?, s(t.gy)?), (s(y)?, s(t.hx)?)))
    } else {
        None
    };
    drop(graph);
    let h_grads = grads.split_off(gp.len());
    opt.g.step(&mut model.g.params, &grads, lr)?;
    opt.h.step(&mut model.h.params, &h_grads, lr)?;

    if let Some((dx_pair, dy_pair)) = pairs {
        let mut penalty = 0.0;
        let mut total = 0.0;
        for (critic, adam, (real, fake)) in [(&mut model.d_x, &mut opt.d_x, dx_pair), (&mut model.d_y, &mut opt.d_y, dy_pair)] {
            let cg = Graph::new();
            let cp = critic.params.bind(&cg);
            let ct = critic_terms(&cg, &*critic, &cp, &real, &fake, config.weights.gp_coeff, penalty_eps)?;
            penalty += cg.item(ct.penalty)?;
            total += cg.item(ct.total)?;
            let g = values(&cg, cg.grad(ct.total, &cp)?);
            if !all_finite(&g) || !total.is_finite() {
                return Err(divergence(step_index, &report, "non-finite critic update"));
            }
            adam.step(critic.params_mut(), &g, lr)?;
        }
        report.gradient_penalty = Some(penalty);
        report.wgan_d = total;
        report.total_d = total;
    }
    Ok(report)
}

/// Trains the conventional model on the same schedule and draws as [`train`].
pub fn train_conventional(
    data: &TrainingData,
    config: &TrainConfig,
    gen_arch: GeneratorArch,
    disc_arch: DiscriminatorArch,
) -> Result<(ConventionalCycleGan, Vec<LogRecord>)> {
    config.validate()?;
    let prep = data.prepare(config)?;
    let mut model = build_conventional_cyclegan(gen_arch, disc_arch, config.seed)?;
    let mut opt = ConventionalOptimizers::new(&model, config);
    let steps = config.steps_per_epoch.unwrap_or(data.y.len().div_ceil(config.batch_size));
    let mut log = Vec::new();
    let mut global_step = 0u64;
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config)?;
        let mut sampler = UnpairedSampler::for_epoch(config.seed, epoch, data.y.len());
        for _ in 0..steps {
            let draw = sampler.draw(config.batch_size, data.x.len(), data.schedule.num_frames(), &config.vs_choices);
            let batch = build_batch(&prep, data, &draw)?;
            let report = conventional_train_step(&mut model, &mut opt, &batch, &draw.penalty_eps, global_step, lr, config)?;
            log.push(LogRecord { step: global_step, epoch, lr, report });
            global_step += 1;
        }
    }
    Ok((model, log))
}

/// One held-out input with its reference.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub frame: usize,
    pub vs: usize,
    pub aliased: MultiCoilImage,
    pub reference: SSoSImage,
}

/// PSNR and SSIM of `map` on every sample.
pub fn evaluate_map(map: &dyn ImageMap, samples: &[EvalSample], method: &str) -> Result<Vec<MetricRecord>> {
    samples
        .iter()
        .map(|s| {
            let r = ssos(&reconstruct(map, &s.aliased)?);
            Ok(MetricRecord {
                frame: s.frame,
                psnr_db: psnr(&r, &s.reference)?,
                ssim: ssim(&r, &s.reference, SsimParams::default())?,
                vs: s.vs,
                method: method.to_string(),
            })
        })
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: AblationVariant,
    pub config: TrainConfig,
    pub median_psnr_db: f64,
    pub median_ssim: f64,
    pub final_total_g: f64,
    pub records: Vec<MetricRecord>,
}

/// Results keyed by variant name.
pub type AblationTable = BTreeMap<String, AblationResult>;

/// Trains one variant from the shared config and evaluates it on `eval`.
pub fn run_ablation(
    variant: AblationVariant,
    shared: &TrainConfig,
    data: &TrainingData,
    gen_arch: GeneratorArch,
    disc_arch: DiscriminatorArch,
    eval: &[EvalSample],
) -> Result<AblationResult> {
    if eval.is_empty() {
        return contract_err("ablation needs at least one evaluation sample");
    }
    let config = AblationConfig::for_variant(variant).apply(shared)?;
    let (records, log) = if variant == AblationVariant::ConventionalCyclegan {
        let (model, log) = train_conventional(data, &config, gen_arch, disc_arch)?;
        (evaluate_map(&model.g, eval, variant.name())?, log)
    } else {
        let out = train(data, &config, gen_arch, disc_arch, TrainOptions::default(), |_| {})?;
        (evaluate_map(&out.state.generator, eval, variant.name())?, out.log)
    };
    let psnrs: Vec<f64> = records.iter().map(|r| r.psnr_db).collect();
    let ssims: Vec<f64> = records.iter().map(|r| r.ssim).collect();
    Ok(AblationResult {
        variant,
        config,
        median_psnr_db: median(&psnrs).unwrap_or(f64::NAN),
        median_ssim: median(&ssims).unwrap_or(f64::NAN),
        final_total_g: log.last().map_or(f64::NAN, |r| r.report.total_g),
        records,
    })
}

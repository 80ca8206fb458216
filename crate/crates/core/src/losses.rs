//! Cycle, adversarial, identity and frequency losses and their combination.
//!
//! Batches are `[N, 2C, H, W]` tensors. `y` holds aliased images together with
//! the masks that produced them; `x` holds fully sampled images together with
//! freshly drawn masks used by the domain-X terms. Every loss is a batch mean.

use serde::{Deserialize, Serialize};
use tmra_autograd::{Graph, Tensor, Var};

use crate::error::{contract_err, param_err, Result};
use crate::metrics::ImageNorm;
use crate::networks::{critic_scores, ssos_var, Critic, ImageMap};
use crate::sampling::{alias, masked_fft, MaskBatch};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Cycle consistency.
    pub gamma: f64,
    /// Identity.
    pub alpha: f64,
    /// Frequency.
    pub beta: f64,
    /// Gradient penalty on the critic.
    pub gp_coeff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 1.0, beta: 2.0, gp_coeff: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("alpha", self.alpha), ("beta", self.beta), ("gp_coeff", self.gp_coeff)] {
            if !(v >= 0.0 && v.is_finite()) {
                return param_err(format!("loss weight {name} = {v} must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    /// `γ·cycle + wgan_g + α·identity + β·freq`, evaluated left to right.
    pub fn combine(&self, cycle: f64, wgan_g: f64, identity: f64, freq: f64) -> f64 {
        self.gamma * cycle + wgan_g + self.alpha * identity + self.beta * freq
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cycle: f64,
    pub wgan_g: f64,
    /// `−[mean D(x) − mean D(G(y))]`, plus the weighted penalty when it was evaluated.
    pub wgan_d: f64,
    pub identity: f64,
    pub freq: f64,
    pub total_g: f64,
    pub total_d: f64,
    /// Gradient penalty, evaluated on critic updates only.
    pub gradient_penalty: Option<f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.cycle, self.wgan_g, self.wgan_d, self.identity, self.freq, self.total_g, self.total_d]
            .iter()
            .chain(self.gradient_penalty.iter())
            .all(|v| v.is_finite())
    }
}

/// One unpaired mini-batch.
#[derive(Clone, Debug)]
pub struct LossBatch {
    pub x: Tensor,
    pub y: Tensor,
    pub mask_x: MaskBatch,
    pub mask_y: MaskBatch,
}

impl LossBatch {
    pub fn validate(&self) -> Result<()> {
        let (xs, ys) = (self.x.shape(), self.y.shape());
        if xs.len() != 4 || ys.len() != 4 || xs[1..] != ys[1..] {
            return contract_err(format!("batch shapes {xs:?} and {ys:?} are incompatible"));
        }
        if self.mask_x.len() != xs[0] || self.mask_y.len() != ys[0] {
            return contract_err("one mask per sample is required");
        }
        let hw = (xs[2], xs[3]);
        if self.mask_x.iter().chain(self.mask_y.iter()).any(|m| m.dim() != hw) {
            return contract_err(format!("masks do not match the {}x{} grid", hw.0, hw.1));
        }
        Ok(())
    }
}

fn batch_mean(graph: &Graph, per_sample_total: Var, n: usize) -> Result<Var> {
    Ok(graph.scale(per_sample_total, 1.0 / n as f64)?)
}

/// Batch mean of `d_I(a, b) = ‖S(a) − S(b)‖`.
pub fn image_distance(graph: &Graph, a: Var, b: Var, norm: ImageNorm) -> Result<Var> {
    if graph.shape(a) != graph.shape(b) {
        return contract_err(format!("d_I operands {:?} and {:?} differ", graph.shape(a), graph.shape(b)));
    }
    let n = graph.shape(a)[0];
    let diff = graph.sub(ssos_var(graph, a)?, ssos_var(graph, b)?)?;
    let total = match norm {
        ImageNorm::L1 => graph.sum_all(graph.abs(diff)?)?,
        ImageNorm::L2 => {
            let sq = graph.mul(diff, diff)?;
            let per = graph.sqrt(graph.sum_to(sq, &[n, 1, 1, 1])?)?;
            graph.sum_all(per)?
        }
    };
    batch_mean(graph, total, n)
}

/// Batch mean of the summed per-coil Frobenius norms of `ka − kb`.
pub fn kspace_distance(graph: &Graph, ka: Var, kb: Var) -> Result<Var> {
    let shape = graph.shape(ka);
    if shape != graph.shape(kb) {
        return contract_err("d_F operands differ in shape");
    }
    let &[n, c2, h, w] = shape.as_slice() else { return contract_err(format!("expected rank-4 k-space, got {shape:?}")) };
    let diff = graph.sub(ka, kb)?;
    let diff = graph.reshape(diff, &[n, c2 / 2, 2 * h, w])?;
    let sq = graph.mul(diff, diff)?;
    let per_coil = graph.sqrt(graph.sum_to(sq, &[n, c2 / 2, 1, 1])?)?;
    let total = graph.sum_all(per_coil)?;
    batch_mean(graph, total, n)
}

/// `d_I(Y, A G(Y)) + d_I(X, G(A X))` given the generator outputs.
fn cycle_from(graph: &Graph, x: Var, y: Var, gy: Var, g_ax: Var, batch: &LossBatch, norm: ImageNorm) -> Result<Var> {
    let agy = alias(graph, gy, &batch.mask_y)?;
    let back = image_distance(graph, y, agy, norm)?;
    let forward = image_distance(graph, x, g_ax, norm)?;
    Ok(graph.add(back, forward)?)
}

pub fn cycle_loss(graph: &Graph, gen: &dyn ImageMap, params: &[Var], x: Var, y: Var, batch: &LossBatch, norm: ImageNorm) -> Result<Var> {
    let gy = gen.forward(graph, params, y)?;
    let ax = alias(graph, x, &batch.mask_x)?;
    let g_ax = gen.forward(graph, params, ax)?;
    cycle_from(graph, x, y, gy, g_ax, batch, norm)
}

/// Batch mean of `d_I(X, G(X))`.
pub fn identity_loss(graph: &Graph, gen: &dyn ImageMap, params: &[Var], x: Var, norm: ImageNorm) -> Result<Var> {
    let gx = gen.forward(graph, params, x)?;
    image_distance(graph, x, gx, norm)
}

fn freq_from(graph: &Graph, x: Var, g_ax: Var, masks: &MaskBatch) -> Result<Var> {
    let kx = masked_fft(graph, x, masks)?;
    let kg = masked_fft(graph, g_ax, masks)?;
    kspace_distance(graph, kx, kg)
}

/// Batch mean of `d_F(P F X, P F G(F⁻¹ P F X))`.
pub fn freq_loss(graph: &Graph, gen: &dyn ImageMap, params: &[Var], x: Var, masks: &MaskBatch) -> Result<Var> {
    let ax = alias(graph, x, masks)?;
    let g_ax = gen.forward(graph, params, ax)?;
    freq_from(graph, x, g_ax, masks)
}

/// `mean D(real) − mean D(fake)` on SSoS batches.
pub fn wgan_bracket(graph: &Graph, critic: &dyn Critic, params: &[Var], real: Var, fake: Var) -> Result<Var> {
    let n_real = graph.shape(real)[0];
    let n_fake = graph.shape(fake)[0];
    let sr = batch_mean(graph, graph.sum_all(critic_scores(graph, critic, params, real)?)?, n_real)?;
    let sf = batch_mean(graph, graph.sum_all(critic_scores(graph, critic, params, fake)?)?, n_fake)?;
    Ok(graph.sub(sr, sf)?)
}

/// Mean of `(‖∇ D(x̃)‖ − 1)²` over `x̃ = ε·real + (1 − ε)·fake`, one `ε` per sample.
pub fn gradient_penalty(graph: &Graph, critic: &dyn Critic, params: &[Var], real: &Tensor, fake: &Tensor, eps: &[f64]) -> Result<Var> {
    if real.shape() != fake.shape() || eps.len() != real.shape()[0] {
        return contract_err("gradient penalty needs equal batches and one mixing weight per sample");
    }
    let n = real.shape()[0];
    let per = real.len() / n;
    let mixed: Vec<f64> = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (r, f))| {
            let e = eps[i / per];
            e * r + (1.0 - e) * f
        })
        .collect();
    let xt = graph.param(Tensor::new(real.shape(), mixed)?);
    let scores = graph.sum_all(critic_scores(graph, critic, params, xt)?)?;
    let grad = graph.grad(scores, &[xt])?[0];
    let sq = graph.mul(grad, grad)?;
    let norms = graph.sqrt(graph.sum_to(sq, &[n, 1, 1, 1])?)?;
    let dev = graph.add_scalar(norms, -1.0)?;
    let pen = graph.sum_all(graph.mul(dev, dev)?)?;
    batch_mean(graph, pen, n)
}

/// Generator-side terms recorded on one graph.
pub struct GeneratorTerms {
    pub cycle: Var,
    pub wgan_g: Var,
    pub identity: Var,
    pub freq: Var,
    pub total: Var,
    /// `mean D(S(x)) − mean D(S(G(y)))`.
    pub bracket: Var,
    pub gy: Var,
}

/// Builds every generator loss with shared forward passes. The critic
/// parameters are bound as constants.
pub fn generator_terms(
    graph: &Graph,
    gen: &dyn ImageMap,
    gen_params: &[Var],
    critic: &dyn Critic,
    batch: &LossBatch,
    weights: &LossWeights,
    norm: ImageNorm,
) -> Result<GeneratorTerms> {
    batch.validate()?;
    weights.validate()?;
    let critic_params = critic.params().bind_constant(graph);
    let x = graph.constant(batch.x.clone());
    let y = graph.constant(batch.y.clone());
    let gy = gen.forward(graph, gen_params, y)?;
    if graph.shape(gy) != graph.shape(y) {
        return contract_err(format!("generator changed the shape {:?} to {:?}", graph.shape(y), graph.shape(gy)));
    }
    let ax = alias(graph, x, &batch.mask_x)?;
    let g_ax = gen.forward(graph, gen_params, ax)?;
    let gx = gen.forward(graph, gen_params, x)?;
    let cycle = cycle_from(graph, x, y, gy, g_ax, batch, norm)?;
    let identity = image_distance(graph, x, gx, norm)?;
    let freq = freq_from(graph, x, g_ax, &batch.mask_x)?;
    let fake = ssos_var(graph, gy)?;
    let real = ssos_var(graph, x)?;
    let n = graph.shape(fake)[0];
    let fake_score = batch_mean(graph, graph.sum_all(critic_scores(graph, critic, &critic_params, fake)?)?, n)?;
    let wgan_g = graph.neg(fake_score)?;
    let n_real = graph.shape(real)[0];
    let real_score = batch_mean(graph, graph.sum_all(critic_scores(graph, critic, &critic_params, real)?)?, n_real)?;
    let bracket = graph.sub(real_score, fake_score)?;
    // Same association order as `LossWeights::combine`.
    let mut total = graph.add(graph.scale(cycle, weights.gamma)?, wgan_g)?;
    total = graph.add(total, graph.scale(identity, weights.alpha)?)?;
    total = graph.add(total, graph.scale(freq, weights.beta)?)?;
    Ok(GeneratorTerms { cycle, wgan_g, identity, freq, total, bracket, gy })
}

/// Critic-side objective on one graph.
pub struct CriticTerms {
    pub bracket: Var,
    pub penalty: Var,
    pub total: Var,
}

/// `−[mean D(real) − mean D(fake)] + gp·penalty` with the critic parameters bound as leaves.
pub fn critic_terms(
    graph: &Graph,
    critic: &dyn Critic,
    critic_params: &[Var],
    real: &Tensor,
    fake: &Tensor,
    gp_coeff: f64,
    eps: &[f64],
) -> Result<CriticTerms> {
    let r = graph.constant(real.clone());
    let f = graph.constant(fake.clone());
    let bracket = wgan_bracket(graph, critic, critic_params, r, f)?;
    let penalty = gradient_penalty(graph, critic, critic_params, real, fake, eps)?;
    let total = graph.add(graph.neg(bracket)?, graph.scale(penalty, gp_coeff)?)?;
    Ok(CriticTerms { bracket, penalty, total })
}

/// Evaluates every loss without updating anything.
pub fn total_losses(
    gen: &dyn ImageMap,
    critic: &dyn Critic,
    batch: &LossBatch,
    weights: &LossWeights,
    norm: ImageNorm,
    eps: &[f64],
) -> Result<LossReport> {
    let graph = Graph::new();
    let gp = gen.params().bind_constant(&graph);
    let terms = generator_terms(&graph, gen, &gp, critic, batch, weights, norm)?;
    let cycle = graph.item(terms.cycle)?;
    let wgan_g = graph.item(terms.wgan_g)?;
    let identity = graph.item(terms.identity)?;
    let freq = graph.item(terms.freq)?;
    let real = graph.value(ssos_var(&graph, graph.constant(batch.x.clone()))?);
    let fake = graph.value(ssos_var(&graph, terms.gy)?);
    let cg = Graph::new();
    let cp = critic.params().bind(&cg);
    let ct = critic_terms(&cg, critic, &cp, &real, &fake, weights.gp_coeff, eps)?;
    let total_d = cg.item(ct.total)?;
    Ok(LossReport {
        cycle,
        wgan_g,
        wgan_d: total_d,
        identity,
        freq,
        total_g: weights.combine(cycle, wgan_g, identity, freq),
        total_d,
        gradient_penalty: Some(cg.item(ct.penalty)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{AffineMap, ConstantCritic, Discriminator, DiscriminatorArch, IdentityMap, LinearCritic, ToyConvNet, ZeroMap};
    use crate::phantom::{ImageRole, MultiCoilImage};
    use crate::sampling::{aliased_recon, images_to_tensor, SamplingMask, SamplingSchedule, ScheduleDescriptor};
    use ndarray::{Array2, Array3};
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn image(c: usize, h: usize, w: usize, seed: u64) -> MultiCoilImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((c, h, w), |_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        MultiCoilImage::new(data, 0, ImageRole::GroundTruth).unwrap()
    }

    fn batch_with(xs: &[MultiCoilImage], ys: &[MultiCoilImage], mx: Vec<Array2<bool>>, my: Vec<Array2<bool>>) -> LossBatch {
        LossBatch {
            x: images_to_tensor(&xs.iter().collect::<Vec<_>>()).unwrap(),
            y: images_to_tensor(&ys.iter().collect::<Vec<_>>()).unwrap(),
            mask_x: Rc::new(mx),
            mask_y: Rc::new(my),
        }
    }

    /// Y aliased with real masks, X independent, fresh X masks.
    fn realistic_batch(n: usize, seed: u64) -> LossBatch {
        let s = SamplingSchedule::build(ScheduleDescriptor::desk_default(32, 32, 6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ys = Vec::new();
        let mut my = Vec::new();
        let mut mx = Vec::new();
        let mut xs = Vec::new();
        for i in 0..n {
            let m = s.mask_for_frame(rng.gen_range(0..6), [2, 3, 5][rng.gen_range(0..3)]).unwrap();
            ys.push(aliased_recon(&image(2, 32, 32, seed * 100 + i as u64), &m).unwrap());
            my.push(m.mask);
            mx.push(s.mask_for_frame(rng.gen_range(0..6), [2, 3, 5][rng.gen_range(0..3)]).unwrap().mask);
            xs.push(image(2, 32, 32, seed * 100 + 50 + i as u64));
        }
        batch_with(&xs, &ys, mx, my)
    }

    fn full_batch(n: usize) -> LossBatch {
        let xs: Vec<_> = (0..n).map(|i| image(2, 8, 8, i as u64)).collect();
        let ys: Vec<_> = (0..n).map(|i| image(2, 8, 8, 10 + i as u64)).collect();
        let full = vec![Array2::from_elem((8, 8), true); n];
        batch_with(&xs, &ys, full.clone(), full)
    }

    fn eval(f: impl Fn(&Graph, Var, Var) -> Result<Var>, b: &LossBatch) -> f64 {
        let g = Graph::new();
        let x = g.constant(b.x.clone());
        let y = g.constant(b.y.clone());
        let v = f(&g, x, y).unwrap();
        g.item(v).unwrap()
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.gamma, w.alpha, w.beta, w.gp_coeff), (2.0, 1.0, 2.0, 10.0));
    }

    #[test]
    fn identity_generator_with_full_masks_is_a_fixed_point() {
        let b = full_batch(2);
        let id = IdentityMap::default();
        let scale = b.x.norm() + b.y.norm();
        let cycle = eval(|g, x, y| cycle_loss(g, &id, &[], x, y, &b, ImageNorm::L1), &b);
        let ident = eval(|g, x, _| identity_loss(g, &id, &[], x, ImageNorm::L1), &b);
        let freq = eval(|g, x, _| freq_loss(g, &id, &[], x, &b.mask_x), &b);
        assert!(cycle.abs() < 1e-12 * scale, "{cycle}");
        assert_eq!(ident, 0.0);
        assert!(freq.abs() < 1e-12 * scale, "{freq}");
    }

    #[test]
    fn zero_generator_gives_data_norms() {
        let b = realistic_batch(2, 3);
        let zero = ZeroMap::default();
        let cycle = eval(|g, x, y| cycle_loss(g, &zero, &[], x, y, &b, ImageNorm::L1), &b);
        let ident = eval(|g, x, _| identity_loss(g, &zero, &[], x, ImageNorm::L1), &b);
        // Direct evaluation: d_I(v, 0) is the entrywise sum of the SSoS image.
        let imgs = |t: &Tensor| crate::networks::tensor_to_images(t, ImageRole::GroundTruth).unwrap();
        let zeros = MultiCoilImage::new(Array3::zeros((2, 32, 32)), 0, ImageRole::GroundTruth).unwrap();
        let mean_norm = |t: &Tensor| {
            let v = imgs(t);
            v.iter().map(|i| crate::metrics::d_image(i, &zeros, ImageNorm::L1).unwrap()).sum::<f64>() / v.len() as f64
        };
        let (nx, ny) = (mean_norm(&b.x), mean_norm(&b.y));
        assert!((cycle - (nx + ny)).abs() < 1e-9 * (nx + ny));
        assert!((ident - nx).abs() < 1e-9 * nx);
    }

    #[test]
    fn cycle_loss_ignores_batch_order() {
        let b = realistic_batch(3, 4);
        let toy = ToyConvNet::new(2, 3, 1).unwrap();
        let run = |b: &LossBatch| {
            let g = Graph::new();
            let p = toy.params().bind_constant(&g);
            let x = g.constant(b.x.clone());
            let y = g.constant(b.y.clone());
            let v = cycle_loss(&g, &toy, &p, x, y, b, ImageNorm::L1).unwrap();
            g.item(v).unwrap()
        };
        let imgs = |t: &Tensor| crate::networks::tensor_to_images(t, ImageRole::GroundTruth).unwrap();
        let (xs, ys) = (imgs(&b.x), imgs(&b.y));
        let order = [2, 0, 1];
        let perm = batch_with(
            &order.map(|i| xs[i].clone()),
            &order.map(|i| ys[i].clone()),
            order.iter().map(|&i| b.mask_x[i].clone()).collect(),
            order.iter().map(|&i| b.mask_y[i].clone()).collect(),
        );
        assert!((run(&b) - run(&perm)).abs() < 1e-10 * run(&b));
    }

    #[test]
    fn freq_loss_on_a_one_coil_2x2_case() {
        // X = [[1, 2], [3, 4]] (real), mask keeps bins (0,0) and (1,1).
        let x = MultiCoilImage::new(
            Array3::from_shape_vec((1, 2, 2), [1.0, 2.0, 3.0, 4.0].map(|v| Complex64::new(v, 0.0)).to_vec()).unwrap(),
            0,
            ImageRole::GroundTruth,
        )
        .unwrap();
        let mask = Array2::from_shape_vec((2, 2), vec![true, false, false, true]).unwrap();
        let b = batch_with(&[x.clone()], &[x], vec![mask.clone()], vec![mask]);
        // G ≡ 0: d_F = ‖P F X‖. Centered unitary 2×2 DFT, DC at (1, 1):
        // bin (1,1) = (1+2+3+4)/2 = 5; bin (0,0) = (1−2−3+4)/2 = 0.
        let zero = ZeroMap::default();
        let v = eval(|g, x, _| freq_loss(g, &zero, &[], x, &b.mask_x), &b);
        assert!((v - 5.0).abs() < 1e-12, "{v}");
        // G = 2·id: P F G(A X) = 2 P F X, so d_F = ‖P F X‖ again.
        let double = AffineMap::new(2.0, 0.0);
        let g = Graph::new();
        let p = double.params().bind_constant(&g);
        let xv = g.constant(b.x.clone());
        let v = g.item(freq_loss(&g, &double, &p, xv, &b.mask_x).unwrap()).unwrap();
        assert!((v - 5.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn mask_consistent_generator_has_zero_freq_loss() {
        // The aliasing operator preserves on-mask k-space of a mask-consistent input.
        let b = realistic_batch(1, 5);
        let g = Graph::new();
        let x = g.constant(b.x.clone());
        let ax = alias(&g, x, &b.mask_x).unwrap();
        let aax = alias(&g, ax, &b.mask_x).unwrap();
        let v = g.item(freq_from(&g, x, aax, &b.mask_x).unwrap()).unwrap();
        assert!(v.abs() < 1e-12 * b.x.norm());
    }

    #[test]
    fn wgan_bracket_with_linear_critic_is_a_dot_product() {
        // Two-pixel single-coil images; D(z) = w·z + b.
        let w = Tensor::new(&[1, 1, 1, 2], vec![0.3, -1.2]).unwrap();
        let d = LinearCritic::new(w, 0.5);
        let real = Tensor::new(&[2, 1, 1, 2], vec![1.0, 2.0, 0.5, 0.0]).unwrap();
        let fake = Tensor::new(&[2, 1, 1, 2], vec![0.0, 1.0, 2.0, 2.0]).unwrap();
        let g = Graph::new();
        let p = d.params().bind_constant(&g);
        let v = g.item(wgan_bracket(&g, &d, &p, g.constant(real.clone()), g.constant(fake.clone())).unwrap()).unwrap();
        // mean over real of w·z minus mean over fake of w·z.
        let dot = |a: f64, b: f64| 0.3 * a - 1.2 * b;
        let expected = (dot(1.0, 2.0) + dot(0.5, 0.0)) / 2.0 - (dot(0.0, 1.0) + dot(2.0, 2.0)) / 2.0;
        assert!((v - expected).abs() < 1e-14);
        let same = g.item(wgan_bracket(&g, &d, &p, g.constant(real.clone()), g.constant(real)).unwrap()).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn gradient_penalty_examples() {
        let real = Tensor::new(&[2, 1, 1, 2], vec![1.0, 2.0, 0.5, 0.0]).unwrap();
        let fake = Tensor::new(&[2, 1, 1, 2], vec![0.0, 1.0, 2.0, 2.0]).unwrap();
        let eps = [0.3, 0.8];
        let unit = LinearCritic::new(Tensor::new(&[1, 1, 1, 2], vec![0.6, -0.8]).unwrap(), 0.1);
        let g = Graph::new();
        let p = unit.params().bind(&g);
        let v = g.item(gradient_penalty(&g, &unit, &p, &real, &fake, &eps).unwrap()).unwrap();
        assert!(v.abs() < 1e-20, "{v}");
        let c = ConstantCritic::new(3.0);
        let p = c.params().bind(&g);
        let v = g.item(gradient_penalty(&g, &c, &p, &real, &fake, &eps).unwrap()).unwrap();
        assert_eq!(v, 1.0);
        // Constant critic: bracket vanishes, so the critic loss is the penalty term alone.
        let ct = critic_terms(&g, &c, &p, &real, &fake, 10.0, &eps).unwrap();
        assert_eq!(g.item(ct.bracket).unwrap(), 0.0);
        assert_eq!(g.item(ct.total).unwrap(), 10.0);
        let scaled = LinearCritic::new(Tensor::new(&[1, 1, 1, 2], vec![3.0, 4.0]).unwrap(), 0.0);
        let p = scaled.params().bind(&g);
        let v = g.item(gradient_penalty(&g, &scaled, &p, &real, &fake, &eps).unwrap()).unwrap();
        assert!((v - 16.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_reaches_critic_parameters() {
        // Few pixels keep the finite differences away from LeakyReLU kinks.
        let real = Tensor::new(&[2, 1, 4, 4], (0..32).map(|i| ((i * 7) % 11) as f64 / 5.0).collect()).unwrap();
        let fake = Tensor::new(&[2, 1, 4, 4], (0..32).map(|i| ((i * 5) % 13) as f64 / 6.0).collect()).unwrap();
        let d = Discriminator::new(DiscriminatorArch { widths: vec![4, 4, 1] }, 3).unwrap();
        let g = Graph::new();
        let p = d.params().bind(&g);
        let pen = gradient_penalty(&g, &d, &p, &real, &fake, &[0.25, 0.75]).unwrap();
        let grads = g.grad(pen, &p).unwrap();
        let analytic = g.value(grads[0]).data()[1];
        let at = |delta: f64| {
            let mut d2 = d.clone();
            d2.params.tensors_mut()[0].data_mut()[1] += delta;
            let g = Graph::new();
            let p = d2.params().bind(&g);
            g.item(gradient_penalty(&g, &d2, &p, &real, &fake, &[0.25, 0.75]).unwrap()).unwrap()
        };
        let fd = (at(1e-6) - at(-1e-6)) / 2e-6;
        assert!((fd - analytic).abs() < 1e-4 * fd.abs().max(1e-3), "{fd} vs {analytic}");
    }

    #[test]
    fn report_recombines_bit_exactly() {
        let b = realistic_batch(2, 8);
        let toy = ToyConvNet::new(2, 3, 2).unwrap();
        let d = Discriminator::new(DiscriminatorArch { widths: vec![4, 4, 1] }, 3).unwrap();
        let weights = LossWeights::default();
        let r = total_losses(&toy, &d, &b, &weights, ImageNorm::L1, &[0.5, 0.5]).unwrap();
        assert_eq!(r.total_g, ((2.0 * r.cycle + r.wgan_g) + 1.0 * r.identity) + 2.0 * r.freq);
        let g = Graph::new();
        let p = toy.params().bind(&g);
        let t = generator_terms(&g, &toy, &p, &d, &b, &weights, ImageNorm::L1).unwrap();
        assert_eq!(g.item(t.total).unwrap().to_bits(), r.total_g.to_bits());
        let only_cycle = LossWeights { gamma: 2.0, alpha: 0.0, beta: 0.0, gp_coeff: 0.0 };
        let g = Graph::new();
        let p = toy.params().bind(&g);
        let t = generator_terms(&g, &toy, &p, &ConstantCritic::new(0.0), &b, &only_cycle, ImageNorm::L1).unwrap();
        assert_eq!(g.item(t.total).unwrap(), 2.0 * g.item(t.cycle).unwrap());
        assert!(r.cycle >= 0.0 && r.identity >= 0.0 && r.freq >= 0.0);
    }

    #[test]
    fn batch_validation_rejects_mismatched_masks() {
        let mut b = realistic_batch(2, 9);
        b.mask_y = Rc::new(vec![b.mask_y[0].clone()]);
        assert!(b.validate().is_err());
        let full = SamplingMask::full(8, 8);
        let mut b = realistic_batch(1, 9);
        b.mask_x = Rc::new(vec![full.mask]);
        assert!(b.validate().is_err());
        assert!(LossWeights { alpha: -1.0, ..Default::default() }.validate().is_err());
    }
}

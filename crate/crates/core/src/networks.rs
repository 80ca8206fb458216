//! The U-Net generator and the 1×1 patch critic, plus small maps used in tests.
//!
//! Networks act on batches laid out as `[N, 2C, H, W]` with channel `2c`
//! holding the real part and `2c + 1` the imaginary part of coil `c`.
//! Critics act on single-channel SSoS batches `[N, 1, H, W]` and return a
//! score map; the per-sample score is the mean of that map.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tmra_autograd::{Graph, ParamSet, Tensor, Var};

use crate::error::{contract_err, param_err, Result};
use crate::phantom::{ImageRole, MultiCoilImage};
use crate::sampling::{images_to_tensor, tensor_to_coils};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;

/// A differentiable map between multi-coil image batches.
pub trait ImageMap {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Applies the map with `params` bound on `graph` in the order of [`Self::params`].
    fn forward(&self, graph: &Graph, params: &[Var], x: Var) -> Result<Var>;
}

/// A scoring function on SSoS image batches.
pub trait Critic {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Score map `[N, 1, H', W']` for SSoS images `[N, 1, H, W]`.
    fn forward(&self, graph: &Graph, params: &[Var], z: Var) -> Result<Var>;
}

/// Per-sample critic scores `[N, 1, 1, 1]`: the mean of each score map.
pub fn critic_scores(graph: &Graph, critic: &dyn Critic, params: &[Var], z: Var) -> Result<Var> {
    let map = critic.forward(graph, params, z)?;
    let shape = graph.shape(map);
    let n = shape[0];
    let per = shape[1..].iter().product::<usize>() as f64;
    let sum = graph.sum_to(map, &[n, 1, 1, 1])?;
    Ok(graph.scale(sum, 1.0 / per)?)
}

fn conv(graph: &Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = graph.conv2d(x, w)?;
    Ok(graph.add(y, b)?)
}

/// Per-sample, per-channel normalization over the spatial axes, without affine terms.
pub fn instance_norm(graph: &Graph, x: Var, eps: f64) -> Result<Var> {
    let shape = graph.shape(x);
    let reduced = [shape[0], shape[1], 1, 1];
    let inv_n = 1.0 / (shape[2] * shape[3]) as f64;
    let mean = graph.scale(graph.sum_to(x, &reduced)?, inv_n)?;
    let centered = graph.sub(x, mean)?;
    let sq = graph.mul(centered, centered)?;
    let var = graph.scale(graph.sum_to(sq, &reduced)?, inv_n)?;
    let inv_std = graph.powf(graph.add_scalar(var, eps)?, -0.5)?;
    Ok(graph.mul(centered, inv_std)?)
}

/// Differentiable SSoS: `[N, 2C, H, W]` to `[N, 1, H, W]`.
pub fn ssos_var(graph: &Graph, x: Var) -> Result<Var> {
    let shape = graph.shape(x);
    let &[n, c2, h, w] = shape.as_slice() else {
        return contract_err(format!("expected [N, 2C, H, W], got {shape:?}"));
    };
    if c2 % 2 != 0 {
        return contract_err(format!("channel count {c2} is not even"));
    }
    let sq = graph.mul(x, x)?;
    let summed = graph.sum_to(sq, &[n, 1, h, w])?;
    Ok(graph.sqrt(summed)?)
}

struct ConvSpec {
    name: String,
    inputs: usize,
    outputs: usize,
    kernel: usize,
}

fn init_params(specs: &[ConvSpec], seed: u64) -> Result<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).map_err(|e| crate::Error::Parameter(e.to_string()))?;
    let mut params = ParamSet::new();
    for s in specs {
        let shape = [s.outputs, s.inputs, s.kernel, s.kernel];
        let n = shape.iter().product();
        let w = Tensor::new(&shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?;
        params.push(format!("{}.weight", s.name), w);
        params.push(format!("{}.bias", s.name), Tensor::zeros(&[1, s.outputs, 1, 1]));
    }
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub coils: usize,
    /// Number of resolution stages; the encoder pools `depth − 1` times.
    pub depth: usize,
    /// Filters at the first stage, doubled at each further stage.
    pub base_filters: usize,
    /// Adds the input to the output.
    #[serde(default)]
    pub residual: bool,
}

impl GeneratorArch {
    /// Four coils, three stages, 16 base filters.
    pub fn desk_default() -> Self {
        Self { coils: 4, depth: 3, base_filters: 16, residual: false }
    }

    /// Sixteen coils and the 64 → 1024 filter schedule.
    pub fn full_scale() -> Self {
        Self { coils: 16, depth: 5, base_filters: 64, residual: false }
    }

    pub fn channels(&self) -> usize {
        2 * self.coils
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth).map(|s| self.base_filters << s).collect()
    }

    fn conv_specs(&self) -> Vec<ConvSpec> {
        let widths = self.widths();
        let spec = |name: String, inputs, outputs, kernel| ConvSpec { name, inputs, outputs, kernel };
        let mut specs = Vec::new();
        for (s, &w) in widths.iter().enumerate() {
            let input = if s == 0 { self.channels() } else { widths[s - 1] };
            specs.push(spec(format!("enc{s}.conv0"), input, w, 3));
            specs.push(spec(format!("enc{s}.conv1"), w, w, 3));
            specs.push(spec(format!("enc{s}.conv2"), w, w, 3));
        }
        for s in (0..self.depth.saturating_sub(1)).rev() {
            let w = widths[s];
            specs.push(spec(format!("dec{s}.up"), widths[s + 1], w, 3));
            specs.push(spec(format!("dec{s}.conv0"), 2 * w, w, 3));
            specs.push(spec(format!("dec{s}.conv1"), w, w, 3));
            specs.push(spec(format!("dec{s}.conv2"), w, w, 3));
        }
        specs.push(spec("out".into(), widths[0], self.channels(), 1));
        specs
    }

    /// Closed-form count of scalar parameters.
    pub fn param_count(&self) -> usize {
        let c3 = |a: usize, b: usize| 9 * a * b + b;
        let w = self.widths();
        let mut total = 0;
        for s in 0..self.depth {
            let input = if s == 0 { self.channels() } else { w[s - 1] };
            total += c3(input, w[s]) + 2 * c3(w[s], w[s]);
        }
        for s in 0..self.depth - 1 {
            total += c3(w[s + 1], w[s]) + c3(2 * w[s], w[s]) + 2 * c3(w[s], w[s]);
        }
        total + w[0] * self.channels() + self.channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coils == 0 || self.depth == 0 || self.base_filters == 0 {
            return param_err(format!("generator architecture {self:?} has a zero field"));
        }
        if self.depth > 12 {
            return param_err(format!("generator depth {} is unreasonably large", self.depth));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by `2^depth`.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return contract_err(format!("input {h}x{w} is not divisible by 2^{} = {f}", self.depth));
        }
        Ok(())
    }
}

/// U-Net generator. Each stage applies three (3×3 conv, instance norm, ReLU)
/// blocks; the encoder downsamples by 2×2 average pooling and the decoder
/// upsamples by nearest-neighbour doubling followed by a 3×3 conv block
/// before concatenating the skip connection. A final 1×1 conv maps back to
/// `2C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub arch: GeneratorArch,
    pub params: ParamSet,
}

impl Generator {
    pub fn new(arch: GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let params = init_params(&arch.conv_specs(), seed)?;
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: GeneratorArch, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        let expected = Self::new(arch, 0)?.params;
        if expected.names() != params.names()
            || expected.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return contract_err("parameter set does not match the generator architecture");
        }
        Ok(Self { arch, params })
    }

    /// Runs the network on one multi-coil image.
    pub fn apply(&self, y: &MultiCoilImage) -> Result<MultiCoilImage> {
        apply_map(self, y)
    }
}

fn block(graph: &Graph, p: &[Var], k: &mut usize, x: Var) -> Result<Var> {
    let y = conv(graph, x, p[*k], p[*k + 1])?;
    *k += 2;
    let y = instance_norm(graph, y, INSTANCE_NORM_EPS)?;
    Ok(graph.relu(y)?)
}

impl ImageMap for Generator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, graph: &Graph, p: &[Var], x: Var) -> Result<Var> {
        let shape = graph.shape(x);
        if shape.len() != 4 || shape[1] != self.arch.channels() {
            return contract_err(format!("generator expects [N, {}, H, W], got {shape:?}", self.arch.channels()));
        }
        self.arch.check_input(shape[2], shape[3])?;
        if p.len() != self.params.len() {
            return contract_err("wrong number of bound generator parameters");
        }
        let mut k = 0;
        let mut skips = Vec::with_capacity(self.arch.depth);
        let mut h = x;
        for s in 0..self.arch.depth {
            if s > 0 {
                h = graph.avg_pool2(h)?;
            }
            for _ in 0..3 {
                h = block(graph, p, &mut k, h)?;
            }
            skips.push(h);
        }
        for s in (0..self.arch.depth - 1).rev() {
            h = graph.upsample2(h)?;
            h = block(graph, p, &mut k, h)?;
            h = graph.concat(&[skips[s], h], 1)?;
            for _ in 0..3 {
                h = block(graph, p, &mut k, h)?;
            }
        }
        let out = conv(graph, h, p[k], p[k + 1])?;
        if self.arch.residual {
            return Ok(graph.add(out, x)?);
        }
        Ok(out)
    }
}

/// Feeds one image through any [`ImageMap`] without recording gradients.
pub fn apply_map(map: &dyn ImageMap, y: &MultiCoilImage) -> Result<MultiCoilImage> {
    let graph = Graph::new();
    let params = map.params().bind_constant(&graph);
    let x = graph.constant(images_to_tensor(&[y])?);
    let out = map.forward(&graph, &params, x)?;
    let value = graph.value(out);
    if value.shape()[1] != 2 * y.coils() {
        return contract_err(format!("map returned {} channels for {} coils", value.shape()[1], y.coils()));
    }
    MultiCoilImage::new(tensor_to_coils(&value, 0)?, y.frame_index, ImageRole::Reconstruction)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub widths: Vec<usize>,
}

impl Default for DiscriminatorArch {
    fn default() -> Self {
        Self { widths: vec![64, 128, 1] }
    }
}

impl DiscriminatorArch {
    pub fn param_count(&self) -> usize {
        let mut input = 1;
        let mut total = 0;
        for &w in &self.widths {
            total += input * w + w;
            input = w;
        }
        total
    }
}

/// Patch critic made of 1×1 convolutions: every hidden layer is followed by
/// instance norm and LeakyReLU(0.2), the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub arch: DiscriminatorArch,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn new(arch: DiscriminatorArch, seed: u64) -> Result<Self> {
        if arch.widths.is_empty() || arch.widths.contains(&0) {
            return param_err(format!("discriminator widths {:?} are invalid", arch.widths));
        }
        let mut input = 1;
        let specs: Vec<ConvSpec> = arch
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let s = ConvSpec { name: format!("layer{i}"), inputs: input, outputs: w, kernel: 1 };
                input = w;
                s
            })
            .collect();
        let params = init_params(&specs, seed)?;
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: DiscriminatorArch, params: ParamSet) -> Result<Self> {
        let expected = Self::new(arch.clone(), 0)?.params;
        if expected.names() != params.names()
            || expected.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return contract_err("parameter set does not match the discriminator architecture");
        }
        Ok(Self { arch, params })
    }
}

impl Critic for Discriminator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, graph: &Graph, p: &[Var], z: Var) -> Result<Var> {
        let shape = graph.shape(z);
        if shape.len() != 4 || shape[1] != 1 {
            return contract_err(format!("discriminator expects [N, 1, H, W], got {shape:?}"));
        }
        let layers = self.arch.widths.len();
        let mut h = z;
        for i in 0..layers {
            h = conv(graph, h, p[2 * i], p[2 * i + 1])?;
            if i + 1 < layers {
                h = instance_norm(graph, h, INSTANCE_NORM_EPS)?;
                h = graph.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }
}

/// `G(x) = x`.
#[derive(Clone, Debug, Default)]
pub struct IdentityMap {
    params: ParamSet,
}

impl ImageMap for IdentityMap {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, _graph: &Graph, _params: &[Var], x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// `G(x) = 0`.
#[derive(Clone, Debug, Default)]
pub struct ZeroMap {
    params: ParamSet,
}

impl ImageMap for ZeroMap {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, graph: &Graph, _params: &[Var], x: Var) -> Result<Var> {
        Ok(graph.scale(x, 0.0)?)
    }
}

/// `G(x) = a·x + b` with two scalar parameters.
#[derive(Clone, Debug)]
pub struct AffineMap {
    params: ParamSet,
}

impl AffineMap {
    pub fn new(a: f64, b: f64) -> Self {
        let mut params = ParamSet::new();
        params.push("a", Tensor::full(&[1, 1, 1, 1], a));
        params.push("b", Tensor::full(&[1, 1, 1, 1], b));
        Self { params }
    }
}

impl ImageMap for AffineMap {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, graph: &Graph, p: &[Var], x: Var) -> Result<Var> {
        let y = graph.mul(x, p[0])?;
        Ok(graph.add(y, p[1])?)
    }
}

/// Two-layer convolutional map: 3×3 conv, LeakyReLU, 1×1 conv.
#[derive(Clone, Debug)]
pub struct ToyConvNet {
    params: ParamSet,
}

impl ToyConvNet {
    pub fn new(coils: usize, hidden: usize, seed: u64) -> Result<Self> {
        let specs = [
            ConvSpec { name: "conv0".into(), inputs: 2 * coils, outputs: hidden, kernel: 3 },
            ConvSpec { name: "conv1".into(), inputs: hidden, outputs: 2 * coils, kernel: 1 },
        ];
        let mut params = init_params(&specs, seed)?;
        // Larger weights than the network default so the map is far from zero.
        for t in params.tensors_mut() {
            *t = t.map(|v| v * 20.0);
        }
        Ok(Self { params })
    }
}

impl ImageMap for ToyConvNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, graph: &Graph, p: &[Var], x: Var) -> Result<Var> {
        let h = conv(graph, x, p[0], p[1])?;
        let h = graph.leaky_relu(h, LEAKY_SLOPE)?;
        conv(graph, h, p[2], p[3])
    }
}

/// `D(z) = ⟨w, z⟩ + b` as a single-patch score map.
#[derive(Clone, Debug)]
pub struct LinearCritic {
    params: ParamSet,
}

impl LinearCritic {
    pub fn new(weights: Tensor, bias: f64) -> Self {
        let mut params = ParamSet::new();
        params.push("w", weights);
        params.push("b", Tensor::full(&[1, 1, 1, 1], bias));
        Self { params }
    }
}

impl Critic for LinearCritic {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, graph: &Graph, p: &[Var], z: Var) -> Result<Var> {
        let shape = graph.shape(z);
        let w = graph.broadcast_to(p[0], &shape)?;
        let prod = graph.mul(z, w)?;
        let sum = graph.sum_to(prod, &[shape[0], 1, 1, 1])?;
        Ok(graph.add(sum, p[1])?)
    }
}

/// `D(z) ≡ c`.
#[derive(Clone, Debug)]
pub struct ConstantCritic {
    params: ParamSet,
}

impl ConstantCritic {
    pub fn new(c: f64) -> Self {
        let mut params = ParamSet::new();
        params.push("c", Tensor::full(&[1, 1, 1, 1], c));
        Self { params }
    }
}

impl Critic for ConstantCritic {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, graph: &Graph, p: &[Var], z: Var) -> Result<Var> {
        let n = graph.shape(z)[0];
        Ok(graph.broadcast_to(p[0], &[n, 1, 1, 1])?)
    }
}

/// Unpacks every sample of a `[N, 2C, H, W]` tensor.
pub fn tensor_to_images(t: &Tensor, role: ImageRole) -> Result<Vec<MultiCoilImage>> {
    (0..t.shape()[0])
        .map(|i| MultiCoilImage::new(tensor_to_coils(t, i)?, i, role))
        .collect::<Result<Vec<_>>>()
}

/// Complex coil stack to a single-sample tensor.
pub fn coils_to_tensor(data: &Array3<num_complex::Complex64>) -> Result<Tensor> {
    images_to_tensor(&[&MultiCoilImage::new(data.clone(), 0, ImageRole::GroundTruth)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn generator_preserves_shape_and_counts_parameters() {
        let arch = GeneratorArch::desk_default();
        let g = Generator::new(arch, 1).unwrap();
        assert_eq!(g.params.count(), arch.param_count());
        let graph = Graph::new();
        let p = g.params.bind_constant(&graph);
        let x = graph.constant(random_tensor(&[2, 8, 16, 16], 2));
        let y = g.forward(&graph, &p, x).unwrap();
        assert_eq!(graph.shape(y), vec![2, 8, 16, 16]);
        assert!(graph.value(y).is_finite());
        for (depth, base, coils) in [(1, 4, 1), (2, 3, 2), (4, 8, 3)] {
            let arch = GeneratorArch { coils, depth, base_filters: base, residual: false };
            assert_eq!(Generator::new(arch, 0).unwrap().params.count(), arch.param_count());
        }
    }

    #[test]
    fn preset_architectures() {
        let full = GeneratorArch::full_scale();
        assert_eq!(full.channels(), 32);
        assert_eq!(full.widths(), vec![64, 128, 256, 512, 1024]);
        assert_eq!(DiscriminatorArch::default().widths, vec![64, 128, 1]);
    }

    #[test]
    fn generator_rejects_indivisible_input_and_wrong_channels() {
        let g = Generator::new(GeneratorArch::desk_default(), 1).unwrap();
        let graph = Graph::new();
        let p = g.params.bind_constant(&graph);
        let odd = graph.constant(random_tensor(&[1, 8, 12, 16], 3));
        assert!(g.forward(&graph, &p, odd).is_err());
        let wrong = graph.constant(random_tensor(&[1, 6, 16, 16], 3));
        assert!(g.forward(&graph, &p, wrong).is_err());
    }

    #[test]
    fn residual_generator_adds_input() {
        let arch = GeneratorArch { residual: true, ..GeneratorArch::desk_default() };
        let mut g = Generator::new(arch, 4).unwrap();
        // Zero output layer: the residual network is exactly the identity.
        let n = g.params.len();
        for t in &mut g.params.tensors_mut()[n - 2..] {
            *t = t.map(|_| 0.0);
        }
        let graph = Graph::new();
        let p = g.params.bind_constant(&graph);
        let x0 = random_tensor(&[1, 8, 16, 16], 5);
        let y = g.forward(&graph, &p, graph.constant(x0.clone())).unwrap();
        assert_eq!(graph.value(y).data(), x0.data());
    }

    #[test]
    fn discriminator_shapes_and_constant_input() {
        let d = Discriminator::new(DiscriminatorArch::default(), 6).unwrap();
        assert_eq!(d.params.count(), DiscriminatorArch::default().param_count());
        assert_eq!(d.params.count(), (64 + 64) + (64 * 128 + 128) + (128 + 1));
        let graph = Graph::new();
        let p = d.params.bind_constant(&graph);
        let z = graph.constant(Tensor::full(&[1, 1, 8, 8], 0.7));
        let map = graph.value(d.forward(&graph, &p, z).unwrap());
        assert_eq!(map.shape(), &[1, 1, 8, 8]);
        let mean = map.sum() / map.len() as f64;
        let var = map.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / map.len() as f64;
        assert!(var < 1e-6);
    }

    /// Central differences of a scalar loss of the generator output with
    /// respect to sampled parameters.
    #[test]
    fn generator_gradient_matches_finite_differences() {
        let arch = GeneratorArch { coils: 1, depth: 2, base_filters: 4, residual: false };
        let g0 = Generator::new(arch, 7).unwrap();
        let x0 = random_tensor(&[1, 2, 8, 8], 8);
        let target = random_tensor(&[1, 2, 8, 8], 9);
        let loss = |g: &Generator, graph: &Graph, p: &[Var]| {
            let y = g.forward(graph, p, graph.constant(x0.clone())).unwrap();
            let d = graph.sub(y, graph.constant(target.clone())).unwrap();
            let sq = graph.mul(d, d).unwrap();
            graph.sum_all(sq).unwrap()
        };
        let graph = Graph::new();
        let p = g0.params.bind(&graph);
        let l = loss(&g0, &graph, &p);
        let grads = graph.grad(l, &p).unwrap();
        let flat = g0.params.flatten();
        let mut analytic = Vec::new();
        for gv in &grads {
            analytic.extend(graph.value(*gv).data().iter().copied());
        }
        let eval = |theta: &[f64]| {
            let mut g = g0.clone();
            g.params.assign_flat(theta).unwrap();
            let graph = Graph::new();
            let p = g.params.bind_constant(&graph);
            let l = loss(&g, &graph, &p);
            graph.item(l).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..25 {
            let i = rng.gen_range(0..flat.len());
            let h = 1e-5;
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let scale = fd.abs().max(analytic[i].abs()).max(1e-3);
            assert!((fd - analytic[i]).abs() < 1e-3 * scale, "param {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn discriminator_gradient_matches_finite_differences() {
        let d0 = Discriminator::new(DiscriminatorArch { widths: vec![4, 6, 1] }, 11).unwrap();
        let z0 = random_tensor(&[2, 1, 4, 4], 12).map(f64::abs);
        let score = |d: &Discriminator, graph: &Graph, p: &[Var]| {
            let s = critic_scores(graph, d, p, graph.constant(z0.clone())).unwrap();
            let sq = graph.mul(s, s).unwrap();
            graph.sum_all(sq).unwrap()
        };
        let graph = Graph::new();
        let p = d0.params.bind(&graph);
        let l = score(&d0, &graph, &p);
        let grads = graph.grad(l, &p).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|g| graph.value(*g).data().to_vec()).collect();
        let flat = d0.params.flatten();
        for i in 0..flat.len() {
            let h = 1e-6;
            let eval = |delta: f64| {
                let mut d = d0.clone();
                let mut theta = flat.clone();
                theta[i] += delta;
                d.params.assign_flat(&theta).unwrap();
                let graph = Graph::new();
                let p = d.params.bind_constant(&graph);
                let l = score(&d, &graph, &p);
                graph.item(l).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let scale = fd.abs().max(analytic[i].abs()).max(1e-4);
            assert!((fd - analytic[i]).abs() < 1e-3 * scale, "param {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn apply_round_trips_identity_and_sets_role() {
        let img = MultiCoilImage::new(
            Array3::from_shape_fn((2, 8, 8), |(c, i, j)| num_complex::Complex64::new((c + i) as f64, j as f64 - 3.0)),
            4,
            ImageRole::Aliased,
        )
        .unwrap();
        let out = apply_map(&IdentityMap::default(), &img).unwrap();
        assert_eq!(out.data, img.data);
        assert_eq!(out.role, ImageRole::Reconstruction);
        assert_eq!(out.frame_index, 4);
        let g = Generator::new(GeneratorArch { coils: 2, depth: 2, base_filters: 4, residual: false }, 1).unwrap();
        let y = g.apply(&img).unwrap();
        assert_eq!(y.dims(), img.dims());
        let wrong = Generator::new(GeneratorArch { coils: 3, depth: 2, base_filters: 4, residual: false }, 1).unwrap();
        assert!(wrong.apply(&img).is_err());
    }

    #[test]
    fn ssos_var_matches_array_ssos() {
        let img = MultiCoilImage::new(
            Array3::from_shape_fn((3, 4, 4), |(c, i, j)| num_complex::Complex64::new(c as f64 - i as f64, (j * c) as f64)),
            0,
            ImageRole::GroundTruth,
        )
        .unwrap();
        let graph = Graph::new();
        let x = graph.constant(images_to_tensor(&[&img]).unwrap());
        let s = graph.value(ssos_var(&graph, x).unwrap());
        let expected = crate::metrics::ssos(&img);
        assert!(s.data().iter().zip(expected.data.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn toy_network_is_small() {
        assert!(ToyConvNet::new(1, 2, 0).unwrap().params().count() <= 100);
    }
}

//! TWIST-style view-sharing schedule, sampling masks and the Fourier forward model.
//!
//! k-space is indexed `(row, col)` = `(k_y, k_z)` with DC at `(H/2, W/2)`.
//! Every temporal frame acquires the fully sampled central block (the "A"
//! part) and one periphery subset `B_j` of the uniform `(R_y, R_z)` lattice,
//! with `j = frame mod b_interleaves`. View sharing merges the periphery
//! subsets of the temporally nearest frames.

use std::rc::Rc;

use ndarray::{Array2, Array3, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use tmra_autograd::{CustomOp, Graph, Tensor, Var};

use crate::error::{contract_err, param_err, Result};
use crate::fft::{fft2c, ifft2c};
use crate::phantom::{ImageRole, MultiCoilImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lattice {
    pub ry: usize,
    pub rz: usize,
}

impl Lattice {
    pub fn new(ry: usize, rz: usize) -> Self {
        Self { ry, rz }
    }

    pub fn cells(&self) -> usize {
        self.ry * self.rz
    }
}

/// Serializable description from which a [`SamplingSchedule`] is rebuilt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    pub height: usize,
    pub width: usize,
    pub a_radius: usize,
    pub lattice: Lattice,
    pub b_interleaves: usize,
    pub num_frames: usize,
}

impl ScheduleDescriptor {
    /// 24×24 central block, (3, 2) lattice and five interleaves.
    pub fn desk_default(height: usize, width: usize, num_frames: usize) -> Self {
        Self { height, width, a_radius: 12, lattice: Lattice::new(3, 2), b_interleaves: 5, num_frames }
    }
}

/// One slot of the acquisition order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Acquisition {
    /// Central block of `frame`.
    A { frame: usize },
    /// Periphery subset `subset` acquired for `frame`.
    B { frame: usize, subset: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingSchedule {
    pub descriptor: ScheduleDescriptor,
    acs: Array2<bool>,
    subsets: Vec<Array2<bool>>,
}

/// Boolean k-space mask `Λ` and its bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    pub mask: Array2<bool>,
    pub vs: usize,
    pub acceleration: f64,
}

impl SamplingMask {
    pub fn new(mask: Array2<bool>, vs: usize) -> Result<Self> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return contract_err("sampling mask selects no k-space points");
        }
        let acceleration = mask.len() as f64 / count as f64;
        Ok(Self { mask, vs, acceleration })
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self { mask: Array2::from_elem((h, w), true), vs: 0, acceleration: 1.0 }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dim()
    }

    /// `P_Λ` applied to every coil plane of `k`.
    pub fn project(&self, k: &mut Array3<Complex64>) {
        for mut plane in k.outer_iter_mut() {
            Zip::from(&mut plane).and(&self.mask).for_each(|v, &m| {
                if !m {
                    *v = Complex64::default();
                }
            });
        }
    }
}

/// Multi-coil k-space `[C, H, W]` with the mask it was sampled on.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceFrame {
    pub data: Array3<Complex64>,
    pub mask: SamplingMask,
}

impl KSpaceFrame {
    pub fn new(data: Array3<Complex64>, mask: SamplingMask) -> Result<Self> {
        let (_, h, w) = data.dim();
        if (h, w) != mask.dims() {
            return contract_err(format!("k-space {h}x{w} does not match mask {:?}", mask.dims()));
        }
        for plane in data.outer_iter() {
            let stray = Zip::from(&plane).and(&mask.mask).fold(false, |acc, v, &m| acc || (!m && v.norm_sqr() > 0.0));
            if stray {
                return contract_err("k-space has samples outside its mask");
            }
        }
        Ok(Self { data: data.as_standard_layout().into_owned(), mask })
    }

    pub fn coils(&self) -> usize {
        self.data.dim().0
    }
}

fn centered_offset(i: usize, n: usize) -> isize {
    i as isize - (n / 2) as isize
}

impl SamplingSchedule {
    pub fn build(descriptor: ScheduleDescriptor) -> Result<Self> {
        let ScheduleDescriptor { height: h, width: w, a_radius, lattice, b_interleaves, num_frames } = descriptor;
        if h < 2 || w < 2 {
            return param_err(format!("k-space grid {h}x{w} is too small"));
        }
        if a_radius == 0 || 2 * a_radius >= h.min(w) {
            return param_err(format!("a_radius {a_radius} must be in 1..{}", h.min(w) / 2));
        }
        if lattice.ry == 0 || lattice.rz == 0 || lattice.ry > h || lattice.rz > w {
            return param_err(format!("lattice {lattice:?} does not tile a {h}x{w} grid"));
        }
        if b_interleaves == 0 || num_frames == 0 {
            return param_err("schedule needs at least one interleave and one frame");
        }
        let r = a_radius as isize;
        let acs = Array2::from_shape_fn((h, w), |(i, j)| {
            let (di, dj) = (centered_offset(i, h), centered_offset(j, w));
            -r <= di && di < r && -r <= dj && dj < r
        });
        let mut subsets = vec![Array2::from_elem((h, w), false); b_interleaves];
        let mut counter = 0;
        for i in 0..h {
            for j in 0..w {
                if acs[[i, j]] || !on_lattice(i, j, h, w, lattice) {
                    continue;
                }
                subsets[counter % b_interleaves][[i, j]] = true;
                counter += 1;
            }
        }
        Ok(Self { descriptor, acs, subsets })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.descriptor.height, self.descriptor.width)
    }

    pub fn num_frames(&self) -> usize {
        self.descriptor.num_frames
    }

    pub fn b_interleaves(&self) -> usize {
        self.descriptor.b_interleaves
    }

    pub fn lattice(&self) -> Lattice {
        self.descriptor.lattice
    }

    /// Fully sampled central block.
    pub fn acs(&self) -> &Array2<bool> {
        &self.acs
    }

    pub fn subsets(&self) -> &[Array2<bool>] {
        &self.subsets
    }

    /// Periphery subset acquired in `frame`.
    pub fn subset_of_frame(&self, frame: usize) -> usize {
        frame % self.descriptor.b_interleaves
    }

    /// Acquisition order `A_0, B_0, A_1, B_1, …`.
    pub fn frame_labels(&self) -> Vec<Acquisition> {
        (0..self.num_frames())
            .flat_map(|f| [Acquisition::A { frame: f }, Acquisition::B { frame: f, subset: self.subset_of_frame(f) }])
            .collect()
    }

    /// Lattice points plus the central block: the pattern after full view sharing.
    pub fn uniform_pattern(&self) -> Array2<bool> {
        let (h, w) = self.dims();
        Array2::from_shape_fn((h, w), |(i, j)| self.acs[[i, j]] || on_lattice(i, j, h, w, self.lattice()))
    }

    /// The `vs` frames nearest to `frame`, nearest first; ties go to the earlier frame.
    pub fn window(&self, frame: usize, vs: usize) -> Result<Vec<usize>> {
        let n = self.num_frames();
        if frame >= n {
            return param_err(format!("frame {frame} out of range for {n} frames"));
        }
        if vs == 0 || vs > self.b_interleaves() {
            return param_err(format!("view sharing {vs} outside 1..={}", self.b_interleaves()));
        }
        if vs > n {
            return param_err(format!("view sharing {vs} needs at least {vs} frames, have {n}"));
        }
        let mut frames: Vec<usize> = (0..n).collect();
        frames.sort_by_key(|&s| (s.abs_diff(frame), s));
        frames.truncate(vs);
        Ok(frames)
    }

    /// `Λ` for `frame` when sharing the periphery of `vs` frames.
    pub fn mask_for_frame(&self, frame: usize, vs: usize) -> Result<SamplingMask> {
        let mut mask = self.acs.clone();
        for s in self.window(frame, vs)? {
            Zip::from(&mut mask).and(&self.subsets[self.subset_of_frame(s)]).for_each(|m, &b| *m |= b);
        }
        SamplingMask::new(mask, vs)
    }
}

fn on_lattice(i: usize, j: usize, h: usize, w: usize, lattice: Lattice) -> bool {
    centered_offset(i, h).rem_euclid(lattice.ry as isize) == 0 && centered_offset(j, w).rem_euclid(lattice.rz as isize) == 0
}

fn check_shape(x: &MultiCoilImage, mask: &SamplingMask) -> Result<()> {
    if (x.height(), x.width()) != mask.dims() {
        return contract_err(format!(
            "image {}x{} does not match mask {:?}",
            x.height(),
            x.width(),
            mask.dims()
        ));
    }
    Ok(())
}

/// Per-coil centered unitary 2-D FFT of a `[C, H, W]` stack.
pub fn fft_coils(data: &Array3<Complex64>) -> Array3<Complex64> {
    let (_, h, w) = data.dim();
    let mut out = data.as_standard_layout().into_owned();
    for plane in out.as_slice_mut().expect("standard layout").chunks_exact_mut(h * w) {
        fft2c(plane, h, w);
    }
    out
}

/// Per-coil centered unitary inverse 2-D FFT of a `[C, H, W]` stack.
pub fn ifft_coils(data: &Array3<Complex64>) -> Array3<Complex64> {
    let (_, h, w) = data.dim();
    let mut out = data.as_standard_layout().into_owned();
    for plane in out.as_slice_mut().expect("standard layout").chunks_exact_mut(h * w) {
        ifft2c(plane, h, w);
    }
    out
}

/// `X̂ = P_Λ F X`.
pub fn forward_project(x: &MultiCoilImage, mask: &SamplingMask) -> Result<KSpaceFrame> {
    check_shape(x, mask)?;
    let mut k = fft_coils(&x.data);
    mask.project(&mut k);
    Ok(KSpaceFrame { data: k, mask: mask.clone() })
}

/// `F⁻¹ P_Λ k`, the adjoint of [`forward_project`].
pub fn adjoint(k: &KSpaceFrame, frame_index: usize, role: ImageRole) -> Result<MultiCoilImage> {
    let mut data = k.data.clone();
    k.mask.project(&mut data);
    MultiCoilImage::new(ifft_coils(&data), frame_index, role)
}

/// Zero-filled aliased image `Y = F⁻¹ P_Λ F X`.
pub fn aliased_recon(x: &MultiCoilImage, mask: &SamplingMask) -> Result<MultiCoilImage> {
    let k = forward_project(x, mask)?;
    adjoint(&k, x.frame_index, ImageRole::Aliased)
}

/// Simulates the acquisition: frame `t` samples the central block and its own
/// periphery subset.
pub fn acquire(frames: &[MultiCoilImage], schedule: &SamplingSchedule) -> Result<Vec<KSpaceFrame>> {
    if frames.len() != schedule.num_frames() {
        return contract_err(format!("{} frames for a {}-frame schedule", frames.len(), schedule.num_frames()));
    }
    frames
        .iter()
        .enumerate()
        .map(|(t, x)| forward_project(x, &schedule.mask_for_frame(t, 1)?))
        .collect()
}

/// Zero-filled image from the view-shared k-space around `target`.
pub fn view_shared_recon(acquired: &[KSpaceFrame], schedule: &SamplingSchedule, target: usize, vs: usize) -> Result<MultiCoilImage> {
    adjoint(&view_share_combine(acquired, schedule, target, vs)?, target, ImageRole::Aliased)
}

/// Merges the periphery of the `vs` frames nearest to `target`.
///
/// `frames[t]` is the k-space acquired at frame `t`. Where several selected
/// frames sampled the same point (the central block), the temporally nearest
/// one wins.
pub fn view_share_combine(
    frames: &[KSpaceFrame],
    schedule: &SamplingSchedule,
    target: usize,
    vs: usize,
) -> Result<KSpaceFrame> {
    if frames.len() != schedule.num_frames() {
        return contract_err(format!(
            "{} k-space frames for a {}-frame schedule",
            frames.len(),
            schedule.num_frames()
        ));
    }
    let window = schedule.window(target, vs)?;
    let first = &frames[window[0]];
    let (c, h, w) = first.data.dim();
    let acs = schedule.acs();
    let mut owner = Array2::<Option<usize>>::from_elem((h, w), None);
    for &s in &window {
        let f = &frames[s];
        if f.data.dim() != (c, h, w) {
            return contract_err("view-shared frames differ in shape");
        }
        for ((i, j), &m) in f.mask.mask.indexed_iter() {
            if !m {
                continue;
            }
            match owner[[i, j]] {
                None => owner[[i, j]] = Some(s),
                Some(_) if acs[[i, j]] => {}
                Some(prev) => {
                    return contract_err(format!(
                        "frames {prev} and {s} both sampled periphery point ({i}, {j})"
                    ))
                }
            }
        }
    }
    let mut data = Array3::<Complex64>::zeros((c, h, w));
    let mut mask = Array2::from_elem((h, w), false);
    for ((i, j), o) in owner.indexed_iter() {
        if let Some(s) = *o {
            mask[[i, j]] = true;
            for k in 0..c {
                data[[k, i, j]] = frames[s].data[[k, i, j]];
            }
        }
    }
    KSpaceFrame::new(data, SamplingMask::new(mask, vs)?)
}

/// Per-sample masks for a batch of interleaved real/imaginary tensors.
pub type MaskBatch = Rc<Vec<Array2<bool>>>;

/// Differentiable `P_Λ F` (or its adjoint `F⁻¹ P_Λ`) acting on tensors
/// `[N, 2C, H, W]` whose channels interleave real and imaginary parts.
struct MaskedFourier {
    masks: MaskBatch,
    inverse: bool,
}

impl CustomOp for MaskedFourier {
    fn name(&self) -> &'static str {
        if self.inverse {
            "masked_ifft"
        } else {
            "masked_fft"
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> tmra_autograd::Result<Tensor> {
        let x = inputs[0];
        let bad = || tmra_autograd::Error::InvalidShape(format!("{} got input {:?}", self.name(), x.shape()));
        let &[n, c2, h, w] = x.shape() else { return Err(bad()) };
        if c2 % 2 != 0 || self.masks.len() != n || self.masks.iter().any(|m| m.dim() != (h, w)) {
            return Err(bad());
        }
        let hw = h * w;
        let mut out = vec![0.0; x.len()];
        let mut plane = vec![Complex64::default(); hw];
        for b in 0..n {
            let mask = self.masks[b].as_slice().expect("standard layout");
            for c in 0..c2 / 2 {
                let re = ((b * c2) + 2 * c) * hw;
                let im = re + hw;
                for p in 0..hw {
                    plane[p] = Complex64::new(x.data()[re + p], x.data()[im + p]);
                }
                if self.inverse {
                    mask_plane(&mut plane, mask);
                    ifft2c(&mut plane, h, w);
                } else {
                    fft2c(&mut plane, h, w);
                    mask_plane(&mut plane, mask);
                }
                for p in 0..hw {
                    out[re + p] = plane[p].re;
                    out[im + p] = plane[p].im;
                }
            }
        }
        Tensor::new(x.shape(), out)
    }

    fn backward(
        &self,
        graph: &Graph,
        _inputs: &[Var],
        _output: Var,
        grad: Var,
        _needs: &[bool],
    ) -> tmra_autograd::Result<Vec<Option<Var>>> {
        let adjoint = MaskedFourier { masks: Rc::clone(&self.masks), inverse: !self.inverse };
        Ok(vec![Some(graph.custom(Rc::new(adjoint), &[grad])?)])
    }
}

fn mask_plane(plane: &mut [Complex64], mask: &[bool]) {
    for (v, &m) in plane.iter_mut().zip(mask) {
        if !m {
            *v = Complex64::default();
        }
    }
}

/// Differentiable `P_Λ F x` on a `[N, 2C, H, W]` tensor.
pub fn masked_fft(graph: &Graph, x: Var, masks: &MaskBatch) -> Result<Var> {
    Ok(graph.custom(Rc::new(MaskedFourier { masks: Rc::clone(masks), inverse: false }), &[x])?)
}

/// Differentiable `F⁻¹ P_Λ k` on a `[N, 2C, H, W]` tensor.
pub fn masked_ifft(graph: &Graph, k: Var, masks: &MaskBatch) -> Result<Var> {
    Ok(graph.custom(Rc::new(MaskedFourier { masks: Rc::clone(masks), inverse: true }), &[k])?)
}

/// Differentiable aliasing operator `F⁻¹ P_Λ F`.
pub fn alias(graph: &Graph, x: Var, masks: &MaskBatch) -> Result<Var> {
    let k = masked_fft(graph, x, masks)?;
    masked_ifft(graph, k, masks)
}

/// Packs multi-coil images into a `[N, 2C, H, W]` tensor (channel `2c` real, `2c+1` imaginary).
pub fn images_to_tensor(images: &[&MultiCoilImage]) -> Result<Tensor> {
    let Some(first) = images.first() else { return contract_err("empty image batch") };
    let (c, h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * 2 * c * h * w);
    for img in images {
        if img.dims() != (c, h, w) {
            return contract_err("images in a batch differ in shape");
        }
        for plane in img.data.outer_iter() {
            data.extend(plane.iter().map(|v| v.re));
            data.extend(plane.iter().map(|v| v.im));
        }
    }
    Ok(Tensor::new(&[images.len(), 2 * c, h, w], data)?)
}

/// Unpacks sample `index` of a `[N, 2C, H, W]` tensor into complex coils.
pub fn tensor_to_coils(t: &Tensor, index: usize) -> Result<Array3<Complex64>> {
    let &[n, c2, h, w] = t.shape() else { return contract_err(format!("expected rank-4 tensor, got {:?}", t.shape())) };
    if c2 % 2 != 0 || index >= n {
        return contract_err(format!("cannot take sample {index} of {:?}", t.shape()));
    }
    let hw = h * w;
    let base = index * c2 * hw;
    let d = t.data();
    Ok(Array3::from_shape_fn((c2 / 2, h, w), |(c, i, j)| {
        let p = base + 2 * c * hw + i * w + j;
        Complex64::new(d[p], d[p + hw])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schedule(h: usize, w: usize, frames: usize) -> SamplingSchedule {
        SamplingSchedule::build(ScheduleDescriptor::desk_default(h, w, frames)).unwrap()
    }

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> MultiCoilImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((c, h, w), |_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        MultiCoilImage::new(data, 0, ImageRole::GroundTruth).unwrap()
    }

    #[test]
    fn lattice_and_acs_point_count_matches_enumeration() {
        let s = schedule(96, 96, 10);
        // Brute force: count grid points in the block or on the congruence lattice.
        let mut expected = 0;
        for i in 0..96i64 {
            for j in 0..96i64 {
                let (di, dj) = (i - 48, j - 48);
                let in_acs = (-12..12).contains(&di) && (-12..12).contains(&dj);
                let on = di.rem_euclid(3) == 0 && dj.rem_euclid(2) == 0;
                if in_acs || on {
                    expected += 1;
                }
            }
        }
        let mut union = s.acs().clone();
        for b in s.subsets() {
            Zip::from(&mut union).and(b).for_each(|u, &v| *u |= v);
        }
        assert_eq!(union.iter().filter(|&&v| v).count(), expected);
        assert_eq!(union, s.uniform_pattern());
    }

    #[test]
    fn periphery_subsets_are_disjoint_and_balanced() {
        let s = schedule(64, 64, 10);
        let sizes: Vec<usize> = s.subsets().iter().map(|b| b.iter().filter(|&&v| v).count()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for (a, x) in s.subsets().iter().enumerate() {
            assert!(!Zip::from(x).and(s.acs()).fold(false, |acc, &p, &q| acc || (p && q)));
            for y in &s.subsets()[a + 1..] {
                assert!(!Zip::from(x).and(y).fold(false, |acc, &p, &q| acc || (p && q)));
            }
        }
    }

    #[test]
    fn single_interleave_covers_whole_periphery() {
        let mut d = ScheduleDescriptor::desk_default(32, 32, 4);
        d.a_radius = 4;
        d.b_interleaves = 1;
        let s = SamplingSchedule::build(d).unwrap();
        let mut union = s.acs().clone();
        Zip::from(&mut union).and(&s.subsets()[0]).for_each(|u, &v| *u |= v);
        assert_eq!(union, s.uniform_pattern());
    }

    #[test]
    fn schedule_alternates_a_and_b() {
        let s = schedule(32, 32, 6);
        let labels = s.frame_labels();
        assert_eq!(labels.len(), 12);
        for (k, l) in labels.iter().enumerate() {
            match *l {
                Acquisition::A { frame } => assert!(k % 2 == 0 && frame == k / 2),
                Acquisition::B { frame, subset } => assert!(k % 2 == 1 && frame == k / 2 && subset == frame % 5),
            }
        }
    }

    #[test]
    fn build_rejects_oversized_acs() {
        let mut d = ScheduleDescriptor::desk_default(32, 32, 4);
        d.a_radius = 16;
        assert!(SamplingSchedule::build(d).is_err());
    }

    #[test]
    fn masks_are_nested_and_full_sharing_gives_uniform_pattern() {
        let s = schedule(64, 64, 24);
        for frame in [0, 1, 7, 22, 23] {
            let masks: Vec<SamplingMask> = (1..=5).map(|vs| s.mask_for_frame(frame, vs).unwrap()).collect();
            for pair in masks.windows(2) {
                assert!(Zip::from(&pair[0].mask).and(&pair[1].mask).fold(true, |acc, &a, &b| acc && (!a || b)));
                assert!(pair[0].count() < pair[1].count());
                assert!(pair[0].acceleration > pair[1].acceleration);
            }
            assert_eq!(masks[4].mask, s.uniform_pattern());
        }
        assert!(s.mask_for_frame(0, 0).is_err());
        assert!(s.mask_for_frame(0, 6).is_err());
    }

    #[test]
    fn window_is_symmetric_with_earlier_ties() {
        let s = schedule(32, 32, 10);
        assert_eq!(s.window(5, 2).unwrap(), vec![5, 4]);
        assert_eq!(s.window(5, 3).unwrap(), vec![5, 4, 6]);
        assert_eq!(s.window(0, 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(s.window(9, 2).unwrap(), vec![9, 8]);
    }

    #[test]
    fn full_mask_round_trip_and_unitarity() {
        let x = random_image(3, 12, 10, 1);
        let full = SamplingMask::full(12, 10);
        let k = forward_project(&x, &full).unwrap();
        let e_img: f64 = x.data.iter().map(|v| v.norm_sqr()).sum();
        let e_k: f64 = k.data.iter().map(|v| v.norm_sqr()).sum();
        assert!((e_img - e_k).abs() < 1e-10 * e_img);
        let back = adjoint(&k, 0, ImageRole::Aliased).unwrap();
        let err: f64 = back.data.iter().zip(&x.data).map(|(a, b)| (a - b).norm_sqr()).sum();
        assert!(err.sqrt() < 1e-6 * e_img.sqrt());
    }

    #[test]
    fn adjoint_identity_holds_for_random_instances() {
        let s = schedule(32, 32, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..10 {
            let x = random_image(2, 32, 32, trial);
            let mask = s.mask_for_frame(rng.gen_range(0..8), rng.gen_range(1..=5)).unwrap();
            let mut kdata = Array3::from_shape_fn((2, 32, 32), |_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            mask.project(&mut kdata);
            let k = KSpaceFrame::new(kdata, mask.clone()).unwrap();
            let fx = forward_project(&x, &mask).unwrap();
            let lhs: Complex64 = fx.data.iter().zip(&k.data).map(|(a, b)| a * b.conj()).sum();
            let ak = adjoint(&k, 0, ImageRole::Aliased).unwrap();
            let rhs: Complex64 = x.data.iter().zip(&ak.data).map(|(a, b)| a * b.conj()).sum();
            assert!((lhs - rhs).norm() < 1e-6 * lhs.norm().max(1e-12));
        }
    }

    #[test]
    fn aliasing_is_idempotent_and_identity_under_full_mask() {
        let s = schedule(32, 32, 8);
        let x = random_image(2, 32, 32, 4);
        let full = SamplingMask::full(32, 32);
        let y = aliased_recon(&x, &full).unwrap();
        assert!(y.data.iter().zip(&x.data).all(|(a, b)| (a - b).norm() < 1e-6));
        let mask = s.mask_for_frame(3, 2).unwrap();
        let once = aliased_recon(&x, &mask).unwrap();
        let twice = aliased_recon(&once, &mask).unwrap();
        assert!(once.data.iter().zip(&twice.data).all(|(a, b)| (a - b).norm() < 1e-6));
    }

    #[test]
    fn lattice_comb_replicates_a_point_source() {
        let (h, w) = (24, 24);
        let lattice = Lattice::new(3, 2);
        let mask = Array2::from_shape_fn((h, w), |(i, j)| on_lattice(i, j, h, w, lattice));
        let mask = SamplingMask::new(mask, 1).unwrap();
        let mut data = Array3::zeros((1, h, w));
        data[[0, 5, 7]] = Complex64::new(1.0, 0.0);
        let x = MultiCoilImage::new(data, 0, ImageRole::GroundTruth).unwrap();
        let y = aliased_recon(&x, &mask).unwrap();
        // Brute force: sampling on the comb keeps 1/(ry·rz) of the energy and
        // spreads it evenly over copies shifted by multiples of (H/ry, W/rz).
        for ((_, i, j), v) in y.data.indexed_iter() {
            let di = (i as isize - 5).rem_euclid((h / 3) as isize);
            let dj = (j as isize - 7).rem_euclid((w / 2) as isize);
            let expected = if di == 0 && dj == 0 { 1.0 / 6.0 } else { 0.0 };
            assert!((v.norm() - expected).abs() < 1e-12, "({i},{j}) {v}");
        }
    }

    #[test]
    fn view_sharing_static_scene_gives_uniform_sampling() {
        let s = schedule(32, 32, 8);
        let x = random_image(2, 32, 32, 5);
        let frames: Vec<KSpaceFrame> =
            (0..8).map(|t| forward_project(&x, &s.mask_for_frame(t, 1).unwrap()).unwrap()).collect();
        let combined = view_share_combine(&frames, &s, 4, 5).unwrap();
        let full = forward_project(&x, &SamplingMask::new(s.uniform_pattern(), 5).unwrap()).unwrap();
        assert_eq!(combined.mask.mask, full.mask.mask);
        assert!(combined.data.iter().zip(&full.data).all(|(a, b)| (a - b).norm() < 1e-12));
        let single = view_share_combine(&frames, &s, 4, 1).unwrap();
        assert_eq!(single.data, frames[4].data);
    }

    #[test]
    fn view_sharing_mixes_dynamic_frames() {
        let s = schedule(32, 32, 6);
        let before = random_image(1, 32, 32, 6);
        let mut after = before.clone();
        after.data.mapv_inplace(|v| v * 3.0);
        let truth: Vec<&MultiCoilImage> = (0..6).map(|t| if t < 3 { &before } else { &after }).collect();
        let frames: Vec<KSpaceFrame> =
            (0..6).map(|t| forward_project(truth[t], &s.mask_for_frame(t, 1).unwrap()).unwrap()).collect();
        let combined = view_share_combine(&frames, &s, 3, 5).unwrap();
        let pattern = SamplingMask::new(s.uniform_pattern(), 5).unwrap();
        for t in 0..6 {
            let reference = forward_project(truth[t], &pattern).unwrap();
            let diff: f64 = combined.data.iter().zip(&reference.data).map(|(a, b)| (a - b).norm()).sum();
            assert!(diff > 1e-3, "combined frame matched ground-truth frame {t}");
        }
    }

    #[test]
    fn view_sharing_rejects_overlapping_periphery() {
        let s = schedule(32, 32, 6);
        let x = random_image(1, 32, 32, 7);
        let same = s.mask_for_frame(0, 1).unwrap();
        let frames: Vec<KSpaceFrame> = (0..6).map(|_| forward_project(&x, &same).unwrap()).collect();
        assert!(view_share_combine(&frames, &s, 2, 2).is_err());
    }

    #[test]
    fn differentiable_operators_match_array_versions() {
        let s = schedule(32, 32, 5);
        let x = random_image(2, 32, 32, 8);
        let mask = s.mask_for_frame(2, 2).unwrap();
        let g = Graph::new();
        let xv = g.constant(images_to_tensor(&[&x]).unwrap());
        let masks: MaskBatch = Rc::new(vec![mask.mask.clone()]);
        let yv = alias(&g, xv, &masks).unwrap();
        let y = aliased_recon(&x, &mask).unwrap();
        let got = tensor_to_coils(&g.value(yv), 0).unwrap();
        assert!(got.iter().zip(&y.data).all(|(a, b)| (a - b).norm() < 1e-12));
    }

    #[test]
    fn masked_fft_gradient_is_its_adjoint() {
        let s = schedule(32, 32, 5);
        let mask = s.mask_for_frame(1, 3).unwrap();
        let masks: MaskBatch = Rc::new(vec![mask.mask.clone()]);
        let x = images_to_tensor(&[&random_image(1, 32, 32, 9)]).unwrap();
        let r = images_to_tensor(&[&random_image(1, 32, 32, 10)]).unwrap();
        let g = Graph::new();
        let xv = g.param(x.clone());
        let k = masked_fft(&g, xv, &masks).unwrap();
        let prod = g.mul(k, g.constant(r.clone())).unwrap();
        let loss = g.sum_all(prod).unwrap();
        let grad = g.value(g.grad(loss, &[xv]).unwrap()[0]);
        // <P F x, r> = <x, F^-1 P r> for the real inner product on interleaved channels.
        let rv = g.constant(r);
        let back = g.value(masked_ifft(&g, rv, &masks).unwrap());
        assert!(grad.data().iter().zip(back.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

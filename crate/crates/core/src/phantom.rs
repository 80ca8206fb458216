//! Synthetic dynamic contrast-enhanced multi-coil image sequences.
//!
//! Objects are stacks of soft-edged ellipses on a normalized field of view
//! `[-1, 1]²` (row coordinate first). Each ellipse has a baseline intensity
//! that is modulated over time by a normalized gamma-variate bolus curve.
//! Coil images are sensitivity-weighted copies of the object plus complex
//! Gaussian noise.

use ndarray::{Array2, Array3, Zip};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, param_err, Result};

/// Role a multi-coil image plays in the reconstruction problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    GroundTruth,
    Aliased,
    Reconstruction,
}

/// Complex coil images `[C, H, W]` of one temporal frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiCoilImage {
    pub data: Array3<Complex64>,
    pub frame_index: usize,
    pub role: ImageRole,
}

impl MultiCoilImage {
    pub fn new(data: Array3<Complex64>, frame_index: usize, role: ImageRole) -> Result<Self> {
        if data.shape()[0] == 0 {
            return contract_err("multi-coil image needs at least one coil");
        }
        if !data.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return contract_err("multi-coil image has non-finite entries");
        }
        Ok(Self { data: data.as_standard_layout().into_owned(), frame_index, role })
    }

    pub fn coils(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.coils(), self.height(), self.width())
    }

    pub fn with_role(mut self, role: ImageRole) -> Self {
        self.role = role;
        self
    }
}

/// Gamma-variate contrast enhancement normalized so its peak equals `amplitude`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaVariate {
    /// Arrival frame.
    pub t0: f64,
    pub shape: f64,
    pub scale: f64,
    pub amplitude: f64,
}

impl GammaVariate {
    /// Time of the maximum, `t0 + shape·scale`.
    pub fn peak_time(&self) -> f64 {
        self.t0 + self.shape * self.scale
    }
}

/// Enhancement factor of a bolus at time `t` (in frames).
pub fn bolus_curve(params: &GammaVariate, t: f64) -> Result<f64> {
    let GammaVariate { t0, shape: a, scale: b, amplitude } = *params;
    if !(a > 0.0 && b > 0.0) {
        return param_err(format!("gamma-variate shape and scale must be positive, got a={a}, b={b}"));
    }
    if t < 0.0 {
        return param_err(format!("bolus time must be non-negative, got {t}"));
    }
    if t < t0 || amplitude == 0.0 {
        return Ok(0.0);
    }
    let tau = t - t0;
    Ok(amplitude * (tau / (a * b)).powf(a) * (a - tau / b).exp())
}

/// One ellipse of the phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub name: String,
    /// Center `(row, col)` in normalized coordinates.
    pub center: (f64, f64),
    /// Semi-axes `(row, col)` before rotation, normalized.
    pub axes: (f64, f64),
    /// Rotation in radians.
    pub orientation: f64,
    pub baseline: f64,
    pub bolus: Option<GammaVariate>,
}

impl Structure {
    /// Intensity at frame `t`: `baseline·(1 + bolus(t))`.
    pub fn intensity(&self, t: f64) -> Result<f64> {
        let enhancement = match &self.bolus {
            Some(b) => bolus_curve(b, t)?,
            None => 0.0,
        };
        Ok(self.baseline * (1.0 + enhancement))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid_height: usize,
    pub grid_width: usize,
    pub num_frames: usize,
    pub num_coils: usize,
    /// Painted in order; later structures cover earlier ones.
    pub structures: Vec<Structure>,
    pub noise_std: f64,
    /// Width of the coil sensitivity lobes relative to the field of view.
    #[serde(default = "default_coil_smoothness")]
    pub coil_smoothness: f64,
    pub seed: u64,
    /// Seed of the coil maps; falls back to `seed`. Instances that share it
    /// behave like one receive array used on different subjects.
    #[serde(default)]
    pub coil_seed: Option<u64>,
}

fn default_coil_smoothness() -> f64 {
    0.8
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_height < 16 || self.grid_width < 16 {
            return param_err(format!(
                "grid must be at least 16x16, got {}x{}",
                self.grid_height, self.grid_width
            ));
        }
        if self.num_frames == 0 || self.num_coils == 0 {
            return param_err("phantom needs at least one frame and one coil");
        }
        if !(self.noise_std >= 0.0) || !(self.coil_smoothness > 0.0) {
            return param_err("noise_std must be >= 0 and coil_smoothness > 0");
        }
        for s in &self.structures {
            if !(s.axes.0 > 0.0 && s.axes.1 > 0.0) {
                return param_err(format!("structure {} has non-positive axes", s.name));
            }
            if let Some(b) = &s.bolus {
                if !(b.amplitude >= 0.0) {
                    return param_err(format!("structure {} has negative bolus amplitude", s.name));
                }
                if !(b.shape > 0.0 && b.scale > 0.0) {
                    return param_err(format!("structure {} has non-positive bolus shape/scale", s.name));
                }
            }
        }
        Ok(())
    }

    /// Desk-scale head-and-vessels phantom: static tissue, two early arteries
    /// and a late draining sinus.
    pub fn desk_default(seed: u64) -> Self {
        let vessel = |name: &str, center, axes, orientation, t0, shape, scale, amplitude| Structure {
            name: name.to_string(),
            center,
            axes,
            orientation,
            baseline: 0.08,
            bolus: Some(GammaVariate { t0, shape, scale, amplitude }),
        };
        Self {
            grid_height: 64,
            grid_width: 64,
            num_frames: 24,
            num_coils: 4,
            structures: vec![
                Structure {
                    name: "head".into(),
                    center: (0.0, 0.0),
                    axes: (0.74, 0.61),
                    orientation: 0.0,
                    baseline: 0.45,
                    bolus: None,
                },
                Structure {
                    name: "brain".into(),
                    center: (-0.045, 0.0),
                    axes: (0.59, 0.49),
                    orientation: 0.0,
                    baseline: 0.3,
                    bolus: Some(GammaVariate { t0: 6.0, shape: 3.0, scale: 2.0, amplitude: 0.25 }),
                },
                vessel("left_artery", (-0.09, -0.27), (0.38, 0.07), 0.12, 3.0, 2.0, 1.2, 8.0),
                vessel("right_artery", (-0.09, 0.27), (0.38, 0.07), -0.12, 3.0, 2.0, 1.2, 8.0),
                vessel("sinus", (0.45, 0.0), (0.08, 0.2), 0.0, 8.0, 2.0, 1.5, 6.0),
            ],
            noise_std: 0.002,
            coil_smoothness: 0.8,
            seed,
            coil_seed: None,
        }
    }

    /// Copy with geometry, timing and amplitudes perturbed by a seeded draw.
    pub fn jittered(&self, seed: u64, amount: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        out.seed = seed;
        for s in &mut out.structures {
            let mut j = |scale: f64| amount * scale * rng.gen_range(-1.0..1.0);
            s.center.0 += j(0.06);
            s.center.1 += j(0.06);
            s.axes.0 *= 1.0 + j(0.1);
            s.axes.1 *= 1.0 + j(0.1);
            s.orientation += j(0.1);
            if let Some(b) = &mut s.bolus {
                b.t0 = (b.t0 + j(1.5)).max(0.0);
                b.amplitude *= 1.0 + j(0.2);
            }
        }
        out
    }
}

/// Complex receive sensitivity maps `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilSensitivities {
    pub maps: Array3<Complex64>,
    pub normalized: bool,
}

impl CoilSensitivities {
    /// Maps equal to one for every coil (not normalized unless `C == 1`).
    pub fn ones(c: usize, h: usize, w: usize) -> Self {
        Self { maps: Array3::from_elem((c, h, w), Complex64::new(1.0, 0.0)), normalized: c == 1 }
    }
}

fn normalized_coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5 - n as f64 / 2.0) / (n as f64 / 2.0)
}

/// Smooth Gaussian-lobe coil maps arranged on a ring around the field of view,
/// with seeded phase offsets and slow linear phase, normalized so that
/// `Σ_i |s_i|² = 1` at every voxel.
pub fn make_coil_sensitivities(h: usize, w: usize, c: usize, smoothness: f64, seed: u64) -> Result<CoilSensitivities> {
    if c == 0 || h == 0 || w == 0 {
        return param_err("coil maps need C >= 1 and a non-empty grid");
    }
    if !(smoothness > 0.0) {
        return param_err(format!("coil smoothness must be positive, got {smoothness}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_696c);
    let mut maps = Array3::zeros((c, h, w));
    for coil in 0..c {
        let angle = 2.0 * std::f64::consts::PI * coil as f64 / c as f64 + rng.gen_range(-0.2..0.2);
        let (cy, cx) = (1.1 * angle.sin(), 1.1 * angle.cos());
        let phase0 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let (py, px) = (rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8));
        let sigma2 = 2.0 * smoothness * smoothness;
        for i in 0..h {
            let y = normalized_coord(i, h);
            for j in 0..w {
                let x = normalized_coord(j, w);
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                let mag = if c == 1 { 1.0 } else { (-d2 / sigma2).exp() };
                maps[[coil, i, j]] = Complex64::from_polar(mag, phase0 + py * y + px * x);
            }
        }
    }
    for i in 0..h {
        for j in 0..w {
            let norm: f64 = (0..c).map(|k| maps[[k, i, j]].norm_sqr()).sum::<f64>().sqrt();
            for k in 0..c {
                maps[[k, i, j]] /= norm;
            }
        }
    }
    Ok(CoilSensitivities { maps, normalized: true })
}

/// Soft membership of each pixel in an ellipse, in `[0, 1]`.
fn membership(s: &Structure, h: usize, w: usize) -> Array2<f64> {
    let (sin, cos) = s.orientation.sin_cos();
    // Edge width of roughly 0.6 px expressed in ellipse-radius units.
    let px = 2.0 / h.min(w) as f64;
    let edge = 0.6 * px / s.axes.0.min(s.axes.1);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let dy = normalized_coord(i, h) - s.center.0;
        let dx = normalized_coord(j, w) - s.center.1;
        let u = cos * dy + sin * dx;
        let v = -sin * dy + cos * dx;
        let rho = ((u / s.axes.0).powi(2) + (v / s.axes.1).powi(2)).sqrt();
        0.5 * (1.0 - ((rho - 1.0) / edge).tanh())
    })
}

/// Generated sequence with the bookkeeping needed for evaluation.
#[derive(Clone, Debug)]
pub struct PhantomSequence {
    pub frames: Vec<MultiCoilImage>,
    pub sensitivities: CoilSensitivities,
    /// Noise-free object intensity per frame.
    pub objects: Vec<Array2<f64>>,
    /// Index of the topmost structure covering each pixel (`0` = background,
    /// `k` = `structures[k - 1]`).
    pub labels: Array2<u8>,
    /// Pixels lying well inside each structure and not covered by later ones.
    pub interiors: Vec<Array2<bool>>,
}

/// Noise-free object images, one per frame.
pub fn render_objects(spec: &PhantomSpec) -> Result<(Vec<Array2<f64>>, Array2<u8>, Vec<Array2<bool>>)> {
    spec.validate()?;
    let (h, w) = (spec.grid_height, spec.grid_width);
    let members: Vec<Array2<f64>> = spec.structures.iter().map(|s| membership(s, h, w)).collect();
    let mut labels = Array2::<u8>::zeros((h, w));
    for (k, m) in members.iter().enumerate() {
        Zip::from(&mut labels).and(m).for_each(|l, &v| {
            if v > 0.5 {
                *l = (k + 1).min(255) as u8;
            }
        });
    }
    let interiors = members
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let mut inside = m.mapv(|v| v > 0.99);
            for later in &members[k + 1..] {
                Zip::from(&mut inside).and(later).for_each(|a, &v| *a = *a && v < 0.01);
            }
            inside
        })
        .collect();
    let mut objects = Vec::with_capacity(spec.num_frames);
    for t in 0..spec.num_frames {
        let mut img = Array2::<f64>::zeros((h, w));
        for (s, m) in spec.structures.iter().zip(&members) {
            let value = s.intensity(t as f64)?;
            Zip::from(&mut img).and(m).for_each(|p, &a| *p = *p * (1.0 - a) + a * value);
        }
        objects.push(img);
    }
    Ok((objects, labels, interiors))
}

/// Renders the sequence with explicitly supplied coil maps.
pub fn render_sequence(spec: &PhantomSpec, sensitivities: &CoilSensitivities) -> Result<PhantomSequence> {
    let (objects, labels, interiors) = render_objects(spec)?;
    let (h, w) = (spec.grid_height, spec.grid_width);
    let c = spec.num_coils;
    if sensitivities.maps.shape() != [c, h, w] {
        return contract_err(format!(
            "coil maps have shape {:?}, phantom needs [{c}, {h}, {w}]",
            sensitivities.maps.shape()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f_6973_65);
    let noise = Normal::new(0.0, spec.noise_std / std::f64::consts::SQRT_2)
        .map_err(|e| crate::Error::Parameter(e.to_string()))?;
    let mut frames = Vec::with_capacity(spec.num_frames);
    for (t, obj) in objects.iter().enumerate() {
        let mut data = Array3::<Complex64>::zeros((c, h, w));
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut v = sensitivities.maps[[k, i, j]] * obj[[i, j]];
                    if spec.noise_std > 0.0 {
                        v += Complex64::new(noise.sample(&mut rng), noise.sample(&mut rng));
                    }
                    data[[k, i, j]] = v;
                }
            }
        }
        frames.push(MultiCoilImage::new(data, t, ImageRole::GroundTruth)?);
    }
    Ok(PhantomSequence { frames, sensitivities: sensitivities.clone(), objects, labels, interiors })
}

/// Renders the sequence with seeded coil maps from [`make_coil_sensitivities`].
pub fn make_phantom_sequence(spec: &PhantomSpec) -> Result<PhantomSequence> {
    spec.validate()?;
    let sens = make_coil_sensitivities(
        spec.grid_height,
        spec.grid_width,
        spec.num_coils,
        spec.coil_smoothness,
        spec.coil_seed.unwrap_or(spec.seed),
    )?;
    render_sequence(spec, &sens)
}

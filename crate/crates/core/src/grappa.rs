//! 2-D GRAPPA interpolation of uniformly undersampled multi-coil k-space.
//!
//! A missing point at `(i, j)` belongs to the offset class
//! `((i − H/2) mod R_y, (j − W/2) mod R_z)`. Its sources are the `K_y × K_z`
//! acquired lattice points around the nearest lattice point, taken from every
//! coil. Calibration fits one complex weight matrix per class by ridge
//! regression over every placement of the kernel footprint inside the fully
//! sampled block.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, param_err, Error, Result};
use crate::phantom::{ImageRole, MultiCoilImage};
use crate::sampling::{adjoint, view_share_combine, KSpaceFrame, Lattice, SamplingMask, SamplingSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrappaConfig {
    /// Taps along `(k_y, k_z)`.
    pub kernel_size: (usize, usize),
    /// Tikhonov weight relative to the mean diagonal of the normal matrix.
    pub lambda: f64,
}

impl Default for GrappaConfig {
    fn default() -> Self {
        Self { kernel_size: (5, 5), lambda: 1e-4 }
    }
}

/// Weights for one offset class: `[C_out, C_in · taps]`, source index `c_in · taps + tap`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub offset: (usize, usize),
    pub weights: Array2<Complex64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrappaKernel {
    pub lattice: Lattice,
    pub kernel_size: (usize, usize),
    pub regularization: f64,
    pub grid: (usize, usize),
    pub coils: usize,
    pub classes: Vec<ClassWeights>,
}

impl GrappaKernel {
    pub fn taps(&self) -> usize {
        self.kernel_size.0 * self.kernel_size.1
    }

    pub fn class(&self, offset: (usize, usize)) -> Option<&ClassWeights> {
        self.classes.iter().find(|c| c.offset == offset)
    }

    /// Offset class of the grid point `(i, j)`; `(0, 0)` is acquired.
    pub fn class_of(&self, i: usize, j: usize) -> (usize, usize) {
        offset_class(i, j, self.grid, self.lattice)
    }

    /// Source positions feeding the target `(i, j)` in weight order; `None`
    /// where a tap leaves the grid.
    pub fn source_positions(&self, i: usize, j: usize) -> Vec<Option<(usize, usize)>> {
        tap_positions(i, j, self.class_of(i, j), self.lattice, self.kernel_size, self.grid)
    }
}

fn offset_class(i: usize, j: usize, grid: (usize, usize), lattice: Lattice) -> (usize, usize) {
    let dy = (i as isize - (grid.0 / 2) as isize).rem_euclid(lattice.ry as isize) as usize;
    let dz = (j as isize - (grid.1 / 2) as isize).rem_euclid(lattice.rz as isize) as usize;
    (dy, dz)
}

/// Signed distance from a class offset to the nearest lattice line.
fn nearest(d: usize, r: usize) -> isize {
    if 2 * d <= r {
        d as isize
    } else {
        d as isize - r as isize
    }
}

/// Source positions for the target `(i, j)`; `None` where the tap leaves the grid.
fn tap_positions(
    i: usize,
    j: usize,
    offset: (usize, usize),
    lattice: Lattice,
    kernel: (usize, usize),
    grid: (usize, usize),
) -> Vec<Option<(usize, usize)>> {
    let base_i = i as isize - nearest(offset.0, lattice.ry);
    let base_j = j as isize - nearest(offset.1, lattice.rz);
    let lo_p = -((kernel.0 as isize - 1) / 2);
    let lo_q = -((kernel.1 as isize - 1) / 2);
    let mut out = Vec::with_capacity(kernel.0 * kernel.1);
    for p in lo_p..lo_p + kernel.0 as isize {
        for q in lo_q..lo_q + kernel.1 as isize {
            let a = base_i + p * lattice.ry as isize;
            let b = base_j + q * lattice.rz as isize;
            let inside = a >= 0 && b >= 0 && (a as usize) < grid.0 && (b as usize) < grid.1;
            out.push(inside.then_some((a as usize, b as usize)));
        }
    }
    out
}

fn gather(data: &Array3<Complex64>, taps: &[Option<(usize, usize)>], out: &mut Vec<Complex64>) {
    out.clear();
    for plane in data.outer_iter() {
        out.extend(taps.iter().map(|t| t.map_or(Complex64::default(), |(a, b)| plane[[a, b]])));
    }
}

fn lattice_classes(lattice: Lattice) -> impl Iterator<Item = (usize, usize)> {
    (0..lattice.ry).flat_map(move |dy| (0..lattice.rz).map(move |dz| (dy, dz))).filter(|&o| o != (0, 0))
}

/// Summed-area table of acquired points, for rectangle queries.
struct Coverage {
    table: Array2<usize>,
}

impl Coverage {
    fn new(mask: &Array2<bool>) -> Self {
        let (h, w) = mask.dim();
        let mut table = Array2::zeros((h + 1, w + 1));
        for i in 0..h {
            for j in 0..w {
                table[[i + 1, j + 1]] = table[[i, j + 1]] + table[[i + 1, j]] - table[[i, j]] + mask[[i, j]] as usize;
            }
        }
        Self { table }
    }

    /// Whether every point of the inclusive rectangle is acquired.
    fn full(&self, rows: (usize, usize), cols: (usize, usize)) -> bool {
        let t = &self.table;
        let count = t[[rows.1 + 1, cols.1 + 1]] + t[[rows.0, cols.0]] - t[[rows.0, cols.1 + 1]] - t[[rows.1 + 1, cols.0]];
        count == (rows.1 - rows.0 + 1) * (cols.1 - cols.0 + 1)
    }
}

/// Fits GRAPPA weights on the fully sampled region of `acs`.
///
/// The kernel footprint (sources plus target) is slid over every position
/// where it lies entirely on acquired points; each position gives one
/// equation per offset class. `lambda = 0` solves the plain normal equations
/// and reports a singular system as a numerical error.
pub fn calibrate(acs: &KSpaceFrame, lattice: Lattice, kernel_size: (usize, usize), lambda: f64) -> Result<GrappaKernel> {
    if kernel_size.0 == 0 || kernel_size.1 == 0 {
        return param_err("GRAPPA kernel needs at least one tap per axis");
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return param_err(format!("regularization {lambda} must be finite and nonnegative"));
    }
    if lattice.cells() < 2 {
        return param_err("lattice (1, 1) has nothing to interpolate");
    }
    let (c, h, w) = acs.data.dim();
    let grid = (h, w);
    let coverage = Coverage::new(&acs.mask.mask);
    let unknowns = c * kernel_size.0 * kernel_size.1;
    let mut classes = Vec::new();
    let mut row = Vec::with_capacity(unknowns);
    for offset in lattice_classes(lattice) {
        let mut gram = DMatrix::<Complex64>::zeros(unknowns, unknowns);
        let mut rhs = DMatrix::<Complex64>::zeros(unknowns, c);
        let mut windows = 0usize;
        for i in 0..h {
            for j in 0..w {
                let taps = tap_positions(i, j, offset, lattice, kernel_size, grid);
                let Some(inside) = taps.iter().copied().collect::<Option<Vec<_>>>() else { continue };
                let rows = inside.iter().fold((i, i), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
                let cols = inside.iter().fold((j, j), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
                if !coverage.full(rows, cols) {
                    continue;
                }
                gather(&acs.data, &taps, &mut row);
                for a in 0..unknowns {
                    let ra = row[a].conj();
                    for b in a..unknowns {
                        gram[(a, b)] += ra * row[b];
                    }
                    for k in 0..c {
                        rhs[(a, k)] += ra * acs.data[[k, i, j]];
                    }
                }
                windows += 1;
            }
        }
        if windows == 0 {
            return Err(Error::Calibration(format!(
                "no fully sampled window for offset class {offset:?}; the calibration region is smaller than the kernel footprint"
            )));
        }
        for a in 0..unknowns {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)].conj();
            }
        }
        let mean_diag = (0..unknowns).map(|a| gram[(a, a)].re).sum::<f64>() / unknowns as f64;
        let ridge = lambda * mean_diag;
        for a in 0..unknowns {
            gram[(a, a)] += ridge;
        }
        let solution = solve_hermitian(gram, &rhs, offset)?;
        classes.push(ClassWeights { offset, weights: Array2::from_shape_fn((c, unknowns), |(k, s)| solution[(s, k)]) });
    }
    Ok(GrappaKernel { lattice, kernel_size, regularization: lambda, grid, coils: c, classes })
}

fn solve_hermitian(gram: DMatrix<Complex64>, rhs: &DMatrix<Complex64>, offset: (usize, usize)) -> Result<DMatrix<Complex64>> {
    let singular = || Error::Numerical(format!("normal equations for offset class {offset:?} are singular"));
    let max_diag = (0..gram.nrows()).map(|a| gram[(a, a)].re).fold(0.0, f64::max);
    if max_diag <= 0.0 {
        return Err(singular());
    }
    let chol = gram.cholesky().ok_or_else(singular)?;
    let min_pivot = (0..chol.l_dirty().nrows()).map(|a| chol.l_dirty()[(a, a)].re.powi(2)).fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e-13 * max_diag {
        return Err(singular());
    }
    Ok(chol.solve(rhs))
}

/// Fills every unacquired point from its acquired neighbors. Acquired points
/// are copied unchanged.
pub fn interpolate(undersampled: &KSpaceFrame, kernel: &GrappaKernel) -> Result<KSpaceFrame> {
    let (c, h, w) = undersampled.data.dim();
    if (h, w) != kernel.grid || c != kernel.coils {
        return contract_err(format!(
            "k-space [{c}, {h}, {w}] does not match kernel calibrated on {} coils over {:?}",
            kernel.coils, kernel.grid
        ));
    }
    let mask = &undersampled.mask.mask;
    let lattice = kernel.lattice;
    let mut out = undersampled.data.clone();
    let mut row = Vec::with_capacity(c * kernel.taps());
    for i in 0..h {
        for j in 0..w {
            if mask[[i, j]] {
                continue;
            }
            let offset = offset_class(i, j, kernel.grid, lattice);
            let Some(class) = kernel.class(offset) else {
                return contract_err(format!("lattice point ({i}, {j}) is missing from the mask of lattice {lattice:?}"));
            };
            let taps = tap_positions(i, j, offset, lattice, kernel.kernel_size, kernel.grid);
            if let Some(p) = taps.iter().flatten().find(|&&p| !mask[p]) {
                return contract_err(format!("source point {p:?} is not acquired; mask does not match lattice {lattice:?}"));
            }
            gather(&undersampled.data, &taps, &mut row);
            for k in 0..c {
                let wk = class.weights.row(k);
                out[[k, i, j]] = wk.iter().zip(&row).map(|(a, b)| a * b).sum();
            }
        }
    }
    KSpaceFrame::new(out, SamplingMask::full(h, w))
}

/// View-shares all periphery subsets around `target`, calibrates on the
/// central block, interpolates, and returns the coil images.
pub fn grappa_reconstruct(frames: &[KSpaceFrame], schedule: &SamplingSchedule, target: usize) -> Result<MultiCoilImage> {
    grappa_reconstruct_with(frames, schedule, target, &GrappaConfig::default())
}

pub fn grappa_reconstruct_with(
    frames: &[KSpaceFrame],
    schedule: &SamplingSchedule,
    target: usize,
    config: &GrappaConfig,
) -> Result<MultiCoilImage> {
    let shared = view_share_combine(frames, schedule, target, schedule.b_interleaves())?;
    let kernel = calibrate(&shared, schedule.lattice(), config.kernel_size, config.lambda)?;
    let full = interpolate(&shared, &kernel)?;
    adjoint(&full, target, ImageRole::GroundTruth)
}

//! Centered, unitary 2-D discrete Fourier transform.
//!
//! k-space index `(H/2, W/2)` (integer division) holds the DC term and both
//! directions are scaled by `1/sqrt(H·W)`, so the inverse is the adjoint.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

struct Plan {
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, usize), Rc<Plan>>> = RefCell::new(HashMap::new());
}

fn plan(h: usize, w: usize) -> Rc<Plan> {
    PLANS.with(|cache| {
        Rc::clone(cache.borrow_mut().entry((h, w)).or_insert_with(|| {
            let mut planner = FftPlanner::new();
            Rc::new(Plan {
                row_fwd: planner.plan_fft_forward(w),
                row_inv: planner.plan_fft_inverse(w),
                col_fwd: planner.plan_fft_forward(h),
                col_inv: planner.plan_fft_inverse(h),
            })
        }))
    })
}

/// Circularly shifts a row-major plane so that `out[i][j] = in[(i+dy)%h][(j+dx)%w]`.
fn roll(plane: &mut [Complex64], h: usize, w: usize, dy: usize, dx: usize) {
    let src = plane.to_vec();
    for i in 0..h {
        let si = (i + dy) % h;
        for j in 0..w {
            plane[i * w + j] = src[si * w + (j + dx) % w];
        }
    }
}

fn transform(plane: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    assert_eq!(plane.len(), h * w, "plane length does not match {h}x{w}");
    let p = plan(h, w);
    let (row, col) = if inverse { (&p.row_inv, &p.col_inv) } else { (&p.row_fwd, &p.col_fwd) };
    // ifftshift
    roll(plane, h, w, h / 2, w / 2);
    for r in plane.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex64::default(); h];
    for j in 0..w {
        for i in 0..h {
            column[i] = plane[i * w + j];
        }
        col.process(&mut column);
        for i in 0..h {
            plane[i * w + j] = column[i];
        }
    }
    // fftshift
    roll(plane, h, w, h - h / 2, w - w / 2);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in plane.iter_mut() {
        *v *= scale;
    }
}

/// In-place centered unitary forward transform of one `h`×`w` plane.
pub fn fft2c(plane: &mut [Complex64], h: usize, w: usize) {
    transform(plane, h, w, false);
}

/// In-place centered unitary inverse transform of one `h`×`w` plane.
pub fn ifft2c(plane: &mut [Complex64], h: usize, w: usize) {
    transform(plane, h, w, true);
}

//! Central finite-difference checks of first and second derivatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmra_autograd::{Graph, Result, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares `grad(f)` at `x` with central differences of `f`.
fn check(shape: &[usize], seed: u64, f: impl Fn(&Graph, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = random(shape, &mut rng);
    let g = Graph::new();
    let x = g.param(x0.clone());
    let y = f(&g, x).unwrap();
    let analytic = g.value(g.grad(y, &[x]).unwrap()[0]);
    let eval = |t: Tensor| {
        let g = Graph::new();
        let x = g.param(t);
        let y = f(&g, x).unwrap();
        g.item(y).unwrap()
    };
    let h = 1e-6;
    for i in 0..x0.len() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus) - eval(minus)) / (2.0 * h);
        let an = analytic.data()[i];
        let tol = 1e-6 * an.abs().max(fd.abs()).max(1.0);
        assert!((fd - an).abs() < tol, "component {i}: finite difference {fd} vs analytic {an}");
    }
}

#[test]
fn elementwise_ops() {
    check(&[2, 3], 1, |g, x| {
        let a = g.mul(x, x)?;
        let b = g.scale(a, 0.7)?;
        let c = g.add_scalar(b, 2.0)?;
        let d = g.powf(c, -0.5)?;
        let e = g.leaky_relu(x, 0.2)?;
        let f = g.relu(x)?;
        let s = g.sub(d, e)?;
        let s = g.add(s, f)?;
        let s = g.abs(s)?;
        let s = g.sqrt(s)?;
        g.sum_all(s)
    });
}

#[test]
fn broadcasting_and_reductions() {
    check(&[2, 3, 4], 2, |g, x| {
        let m = g.sum_to(x, &[2, 3, 1])?;
        let m = g.scale(m, 0.25)?;
        let c = g.sub(x, m)?;
        let v = g.mul(c, c)?;
        let v = g.sum_to(v, &[2, 3, 1])?;
        let inv = g.add_scalar(v, 1e-3)?;
        let inv = g.powf(inv, -0.5)?;
        let n = g.mul(c, inv)?;
        let w = g.reshape(n, &[6, 4])?;
        let b = g.broadcast_to(g.constant(Tensor::new(&[1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap()), &[6, 4])?;
        let p = g.mul(w, b)?;
        g.mean_all(p)
    });
}

#[test]
fn convolution_pool_upsample_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w1 = random(&[3, 2, 3, 3], &mut rng);
    let w2 = random(&[2, 5, 1, 1], &mut rng);
    check(&[1, 2, 4, 4], 4, move |g, x| {
        let a = g.conv2d(x, g.constant(w1.clone()))?;
        let p = g.avg_pool2(a)?;
        let u = g.upsample2(p)?;
        let c = g.concat(&[u, x], 1)?;
        let y = g.conv2d(c, g.constant(w2.clone()))?;
        let y = g.slice(y, 1, 1, 1)?;
        let y = g.mul(y, y)?;
        g.sum_all(y)
    });
}

#[test]
fn convolution_weight_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = random(&[2, 2, 5, 5], &mut rng);
    check(&[3, 2, 3, 3], 6, move |g, w| {
        let y = g.conv2d(g.constant(x0.clone()), w)?;
        let y = g.relu(y)?;
        let y = g.mul(y, y)?;
        g.sum_all(y)
    });
}

/// Squared norm of the input gradient, differentiated with respect to weights:
/// exercises the backward pass of every backward op.
#[test]
fn gradient_of_gradient_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0 = random(&[1, 1, 4, 4], &mut rng);
    let w2 = random(&[4, 3, 3, 3], &mut rng);
    let f = move |g: &Graph, w: Var| -> Result<Var> {
        let x = g.param(x0.clone());
        let a = g.conv2d(x, w)?;
        let a = g.leaky_relu(a, 0.2)?;
        let m = g.sum_to(a, &[1, 3, 1, 1])?;
        let m = g.scale(m, 1.0 / 16.0)?;
        let c = g.sub(a, m)?;
        let v = g.mul(c, c)?;
        let v = g.sum_to(v, &[1, 3, 1, 1])?;
        let v = g.scale(v, 1.0 / 16.0)?;
        let v = g.add_scalar(v, 1e-5)?;
        let inv = g.powf(v, -0.5)?;
        let n = g.mul(c, inv)?;
        let p = g.avg_pool2(n)?;
        let u = g.upsample2(p)?;
        let b = g.conv2d(u, g.constant(w2.clone()))?;
        let b = g.mul(b, b)?;
        let s = g.mean_all(b)?;
        let gx = g.grad(s, &[x])?[0];
        let sq = g.mul(gx, gx)?;
        let norm = g.sum_all(sq)?;
        let norm = g.sqrt(norm)?;
        let d = g.add_scalar(norm, -1.0)?;
        g.mul(d, d)
    };
    check(&[3, 1, 3, 3], 8, f);
}

#[test]
fn unused_inputs_get_zero_gradients() {
    let g = Graph::new();
    let a = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let b = g.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = g.sum_all(a).unwrap();
    let grads = g.grad(s, &[a, b]).unwrap();
    assert_eq!(g.value(grads[0]).data(), &[1.0, 1.0]);
    assert_eq!(g.value(grads[1]).data(), &[0.0, 0.0, 0.0]);
    assert!(g.grad(a, &[a]).is_err());
}

use crate::{Error, Result};

/// Dense row-major `f64` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Shape produced by broadcasting two equal-rank shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st })
        .collect()
}

/// Visits every index of `out`, calling `f(out_offset, offset_a, offset_b)`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let total = numel(out);
    if total == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    while o < total {
        let mut base_a = 0;
        let mut base_b = 0;
        for d in 0..rank - 1 {
            base_a += idx[d] * sa[d];
            base_b += idx[d] * sb[d];
        }
        for k in 0..inner {
            f(o + k, base_a + k * ia, base_b + k * ib);
        }
        o += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor { shape: a.shape.clone(), data });
    }
    let out = broadcast_shape(op, &a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![0.0; numel(&out)];
    for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(a.data[i], b.data[j]));
    Ok(Tensor { shape: out, data })
}

/// Sums `t` over the axes where `target` has extent 1.
pub(crate) fn sum_to(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    if t.shape == target {
        return Ok(t.clone());
    }
    let out = broadcast_shape("sum_to", target, &t.shape)?;
    if out != t.shape {
        return Err(Error::ShapeMismatch {
            op: "sum_to",
            lhs: t.shape.clone(),
            rhs: target.to_vec(),
        });
    }
    let st = broadcast_strides(target, &t.shape);
    let id = strides(&t.shape);
    let mut data = vec![0.0; numel(target)];
    for_each_broadcast(&t.shape, &id, &st, |_, i, j| data[j] += t.data[i]);
    Ok(Tensor { shape: target.to_vec(), data })
}

pub(crate) fn broadcast_to(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    if t.shape == target {
        return Ok(t.clone());
    }
    let out = broadcast_shape("broadcast_to", &t.shape, target)?;
    if out != target {
        return Err(Error::ShapeMismatch {
            op: "broadcast_to",
            lhs: t.shape.clone(),
            rhs: target.to_vec(),
        });
    }
    let st = broadcast_strides(&t.shape, target);
    let id = strides(target);
    let mut data = vec![0.0; numel(target)];
    for_each_broadcast(target, &id, &st, |o, _, j| data[o] = t.data[j]);
    Ok(Tensor { shape: target.to_vec(), data })
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidShape("empty concat".into()))?;
    if axis >= first.shape.len() {
        return Err(Error::InvalidShape(format!("concat axis {axis} out of range")));
    }
    let mut out_shape = first.shape.clone();
    out_shape[axis] = 0;
    for p in parts {
        let compatible = p.shape.len() == first.shape.len()
            && p.shape.iter().zip(&first.shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        out_shape[axis] += p.shape[axis];
    }
    let (outer, total, inner) = split_axis(&out_shape, axis);
    let mut data = vec![0.0; numel(&out_shape)];
    let mut offset = 0;
    for p in parts {
        let len = p.shape[axis] * inner;
        for o in 0..outer {
            let dst = o * total * inner + offset * inner;
            data[dst..dst + len].copy_from_slice(&p.data[o * len..(o + 1) * len]);
        }
        offset += p.shape[axis];
    }
    Ok(Tensor { shape: out_shape, data })
}

pub(crate) fn slice_axis(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= t.shape.len() || start + len > t.shape[axis] {
        return Err(Error::InvalidShape(format!(
            "slice {start}..{} of axis {axis} out of range for {:?}",
            start + len,
            t.shape
        )));
    }
    let (outer, total, inner) = split_axis(&t.shape, axis);
    let mut shape = t.shape.clone();
    shape[axis] = len;
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        let src = o * total * inner + start * inner;
        data.extend_from_slice(&t.data[src..src + len * inner]);
    }
    Ok(Tensor { shape, data })
}

pub(crate) fn pad_axis(t: &Tensor, axis: usize, start: usize, total: usize) -> Result<Tensor> {
    if axis >= t.shape.len() || start + t.shape[axis] > total {
        return Err(Error::InvalidShape(format!(
            "cannot place {:?} at {start} of an axis of extent {total}",
            t.shape
        )));
    }
    let (outer, len, inner) = split_axis(&t.shape, axis);
    let mut shape = t.shape.clone();
    shape[axis] = total;
    let mut data = vec![0.0; numel(&shape)];
    for o in 0..outer {
        let dst = o * total * inner + start * inner;
        data[dst..dst + len * inner].copy_from_slice(&t.data[o * len * inner..(o + 1) * len * inner]);
    }
    Ok(Tensor { shape, data })
}

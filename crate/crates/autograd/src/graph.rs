use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::kernels;
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// A user-defined differentiable operation.
///
/// `backward` must express the vector-Jacobian product with graph operations
/// so that the result can itself be differentiated.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Returns one gradient per input (`None` for inputs that need none).
    fn backward(
        &self,
        graph: &Graph,
        inputs: &[Var],
        output: Var,
        grad: Var,
        needs: &[bool],
    ) -> Result<Vec<Option<Var>>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    Sqrt(Var),
    SafeRecip(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    SumTo(Var),
    BroadcastTo(Var),
    Reshape(Var),
    Conv2d(Var, Var),
    ConvInputGrad(Var, Var),
    ConvWeightGrad(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, start: usize },
    Custom(Rc<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Append-only tape of tensor operations evaluated eagerly.
///
/// Gradients computed by [`Graph::grad`] are recorded on the same tape, so
/// they can be differentiated again (needed for gradient penalties).
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.borrow().len()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn any_needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Leaf that gradients can flow to.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Copy of `v` with no gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let t = (*self.value(v)).clone();
        self.constant(t)
    }

    fn unary(&self, x: Var, f: impl Fn(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var> {
        let value = f(&self.value(x))?;
        Ok(self.push(value, op, self.needs(x)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::binary("add", &self.value(a), &self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), self.any_needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::binary("sub", &self.value(a), &self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), self.any_needs(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::binary("mul", &self.value(a), &self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), self.any_needs(&[a, b])))
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |t| Ok(t.map(|v| v * c)), Op::Scale(x, c))
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |t| Ok(t.map(|v| v + c)), Op::AddScalar(x))
    }

    pub fn powf(&self, x: Var, p: f64) -> Result<Var> {
        self.unary(x, |t| Ok(t.map(|v| v.powf(p))), Op::Powf(x, p))
    }

    /// Square root whose derivative is taken as zero where the input is zero.
    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok(t.map(f64::sqrt)), Op::Sqrt(x))
    }

    /// `1/x`, and `0` where `x == 0`.
    pub fn safe_recip(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok(t.map(safe_recip)), Op::SafeRecip(x))
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok(t.map(f64::abs)), Op::Abs(x))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok(t.map(|v| v.max(0.0))), Op::Relu(x))
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, |t| Ok(t.map(|v| if v > 0.0 { v } else { slope * v })), Op::LeakyRelu(x, slope))
    }

    /// Sums over every axis where `shape` has extent 1.
    pub fn sum_to(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.unary(x, |t| tensor::sum_to(t, shape), Op::SumTo(x))
    }

    pub fn broadcast_to(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.unary(x, |t| tensor::broadcast_to(t, shape), Op::BroadcastTo(x))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.unary(x, |t| t.clone().reshape(shape), Op::Reshape(x))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        let s = self.sum_to(x, &vec![1; rank])?;
        self.reshape(s, &[])
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Stride-1 "same" convolution of `[N, Ci, H, W]` by `[Co, Ci, k, k]`.
    pub fn conv2d(&self, x: Var, w: Var) -> Result<Var> {
        let value = kernels::conv2d(&self.value(x), &self.value(w))?;
        Ok(self.push(value, Op::Conv2d(x, w), self.any_needs(&[x, w])))
    }

    fn conv_input_grad(&self, g: Var, w: Var) -> Result<Var> {
        let value = kernels::conv2d_input_grad(&self.value(g), &self.value(w))?;
        Ok(self.push(value, Op::ConvInputGrad(g, w), self.any_needs(&[g, w])))
    }

    fn conv_weight_grad(&self, x: Var, g: Var, k: usize) -> Result<Var> {
        let value = kernels::conv2d_weight_grad(&self.value(x), &self.value(g), k)?;
        Ok(self.push(value, Op::ConvWeightGrad(x, g), self.any_needs(&[x, g])))
    }

    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        self.unary(x, kernels::avg_pool2, Op::AvgPool2(x))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&self, x: Var) -> Result<Var> {
        self.unary(x, kernels::upsample2, Op::Upsample2(x))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = tensor::concat(&refs, axis)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), self.any_needs(parts)))
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.unary(x, |t| tensor::slice_axis(t, axis, start, len), Op::Slice { x, axis, start })
    }

    fn pad(&self, x: Var, axis: usize, start: usize, total: usize) -> Result<Var> {
        self.unary(x, |t| tensor::pad_axis(t, axis, start, total), Op::Pad { x, axis, start })
    }

    pub fn custom(&self, op: Rc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = inputs.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = op.forward(&refs)?;
        Ok(self.push(value, Op::Custom(op, inputs.to_vec()), self.any_needs(inputs)))
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// Inputs that `output` does not depend on receive zeros. The returned
    /// vars live on this graph and are themselves differentiable.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let out_shape = self.shape(output);
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(out_shape));
        }
        let mut grads: Vec<Option<Var>> = vec![None; output.0 + 1];
        grads[output.0] = Some(self.constant(Tensor::ones(&out_shape)));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i] else { continue };
            let (op, needs_grad) = {
                let nodes = self.nodes.borrow();
                (nodes[i].op.clone(), nodes[i].needs_grad)
            };
            if !needs_grad {
                continue;
            }
            for (parent, pg) in self.backward(Var(i), &op, g)? {
                grads[parent.0] = Some(match grads[parent.0] {
                    Some(acc) => self.add(acc, pg)?,
                    None => pg,
                });
            }
        }
        wrt.iter()
            .map(|&v| match grads.get(v.0).copied().flatten() {
                Some(g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(&self.shape(v)))),
            })
            .collect()
    }

    /// Vector-Jacobian products of one node, for parents that need them.
    fn backward(&self, node: Var, op: &Op, g: Var) -> Result<Vec<(Var, Var)>> {
        let mut out = Vec::new();
        let mut push = |parent: Var, f: &dyn Fn() -> Result<Var>| -> Result<()> {
            if self.needs(parent) {
                out.push((parent, f()?));
            }
            Ok(())
        };
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(a, &|| self.reduce_like(g, a))?;
                push(b, &|| self.reduce_like(g, b))?;
            }
            Op::Sub(a, b) => {
                push(a, &|| self.reduce_like(g, a))?;
                push(b, &|| {
                    let n = self.neg(g)?;
                    self.reduce_like(n, b)
                })?;
            }
            Op::Mul(a, b) => {
                push(a, &|| {
                    let p = self.mul(g, b)?;
                    self.reduce_like(p, a)
                })?;
                push(b, &|| {
                    let p = self.mul(g, a)?;
                    self.reduce_like(p, b)
                })?;
            }
            Op::Scale(x, c) => push(x, &|| self.scale(g, c))?,
            Op::AddScalar(x) => push(x, &|| Ok(g))?,
            Op::Powf(x, p) => push(x, &|| {
                let d = self.powf(x, p - 1.0)?;
                let d = self.scale(d, p)?;
                self.mul(g, d)
            })?,
            Op::Sqrt(x) => push(x, &|| {
                let r = self.safe_recip(node)?;
                let r = self.scale(r, 0.5)?;
                self.mul(g, r)
            })?,
            Op::SafeRecip(x) => push(x, &|| {
                let r2 = self.mul(node, node)?;
                let r2 = self.neg(r2)?;
                self.mul(g, r2)
            })?,
            Op::Abs(x) => push(x, &|| {
                let s = self.value(x).map(f64::signum_or_zero);
                let s = self.constant(s);
                self.mul(g, s)
            })?,
            Op::Relu(x) => push(x, &|| {
                let m = self.value(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(m);
                self.mul(g, m)
            })?,
            Op::LeakyRelu(x, slope) => push(x, &|| {
                let m = self.value(x).map(|v| if v > 0.0 { 1.0 } else { slope });
                let m = self.constant(m);
                self.mul(g, m)
            })?,
            Op::SumTo(x) => push(x, &|| self.broadcast_to(g, &self.shape(x)))?,
            Op::BroadcastTo(x) => push(x, &|| self.sum_to(g, &self.shape(x)))?,
            Op::Reshape(x) => push(x, &|| self.reshape(g, &self.shape(x)))?,
            Op::Conv2d(x, w) => {
                push(x, &|| self.conv_input_grad(g, w))?;
                push(w, &|| self.conv_weight_grad(x, g, self.shape(w)[2]))?;
            }
            Op::ConvInputGrad(gy, w) => {
                push(gy, &|| self.conv2d(g, w))?;
                push(w, &|| self.conv_weight_grad(g, gy, self.shape(w)[2]))?;
            }
            Op::ConvWeightGrad(x, gy) => {
                push(x, &|| self.conv_input_grad(gy, g))?;
                push(gy, &|| self.conv2d(x, g))?;
            }
            Op::AvgPool2(x) => push(x, &|| {
                let u = self.upsample2(g)?;
                self.scale(u, 0.25)
            })?,
            Op::Upsample2(x) => push(x, &|| {
                let p = self.avg_pool2(g)?;
                self.scale(p, 4.0)
            })?,
            Op::Concat(ref parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[axis];
                    push(p, &|| self.slice(g, axis, start, len))?;
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                push(x, &|| self.pad(g, axis, start, self.shape(x)[axis]))?;
            }
            Op::Pad { x, axis, start } => {
                push(x, &|| self.slice(g, axis, start, self.shape(x)[axis]))?;
            }
            Op::Custom(ref custom, ref inputs) => {
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let grads = custom.backward(self, inputs, node, g, &needs)?;
                if grads.len() != inputs.len() {
                    return Err(Error::InvalidShape(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        custom.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for ((&input, grad), need) in inputs.iter().zip(grads).zip(needs) {
                    if let (true, Some(grad)) = (need, grad) {
                        out.push((input, grad));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Sums a broadcast gradient back down to the shape of `like`.
    fn reduce_like(&self, g: Var, like: Var) -> Result<Var> {
        let target = self.shape(like);
        if self.shape(g) == target {
            Ok(g)
        } else {
            self.sum_to(g, &target)
        }
    }
}

fn safe_recip(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        1.0 / v
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation as a node in creation order, so inputs
//! always precede their consumers. [`Tape::backward`] walks the nodes in
//! reverse and accumulates vector-Jacobian products. A tape is single-use:
//! it belongs to one thread and one loss evaluation.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::gradient_adjustment::SobelKernels;
use crate::kernels::{self, InstanceNormCache, Padding};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Square(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Pad(Var, Padding),
    Unpad(Var, Padding),
    Conv { input: Var, kernel: Var, stride: usize },
    ConvTranspose { input: Var, kernel: Var, stride: usize },
    BiasAdd(Var, Var),
    Sobel(Var),
    InstanceNorm {
        input: Var,
        scale: Var,
        shift: Var,
        cache: Box<InstanceNormCache>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Pad(..) => "pad",
            Op::Unpad(..) => "unpad",
            Op::Conv { .. } => "conv2d",
            Op::ConvTranspose { .. } => "conv2d_transpose",
            Op::BiasAdd(..) => "bias_add",
            Op::Sobel(..) => "sobel",
            Op::InstanceNorm { .. } => "instance_norm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn remove(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => {
            let data = prev.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
            Tensor::from_parts(prev.shape().to_vec(), data)
        }
    });
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::BiasAdd(a, b) => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::AddScalar(a)
            | Op::Scale(a, _)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Pad(a, _)
            | Op::Unpad(a, _)
            | Op::Sobel(a) => self.requires_grad(*a),
            Op::Conv { input, kernel, .. } | Op::ConvTranspose { input, kernel, .. } => {
                self.requires_grad(*input) || self.requires_grad(*kernel)
            }
            Op::InstanceNorm {
                input, scale, shift, ..
            } => self.requires_grad(*input) || self.requires_grad(*scale) || self.requires_grad(*shift),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.value(a).zip_map(self.value(b), op, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::EmptyTensor { op: "sum" });
        }
        let v = Tensor::scalar(t.sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::EmptyTensor { op: "mean" });
        }
        let v = Tensor::scalar(t.mean());
        self.push(v, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a))
    }

    pub fn pad(&mut self, a: Var, padding: Padding) -> Result<Var> {
        if padding.amount() == 0 {
            return Ok(a);
        }
        let v = kernels::pad(self.value(a), padding)?;
        self.push(v, Op::Pad(a, padding))
    }

    /// Adjoint of [`Tape::pad`] (crop for zero padding, fold for reflect).
    pub fn unpad(&mut self, a: Var, padding: Padding) -> Result<Var> {
        if padding.amount() == 0 {
            return Ok(a);
        }
        let v = kernels::unpad(self.value(a), padding)?;
        self.push(v, Op::Unpad(a, padding))
    }

    /// Cross-correlation of `input[N,Cin,H,W]` with `kernel[Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let padded = self.pad(input, padding)?;
        let v = kernels::conv_valid(self.value(padded), self.value(kernel), stride)?;
        self.push(
            v,
            Op::Conv {
                input: padded,
                kernel,
                stride,
            },
        )
    }

    /// Adjoint of [`Tape::conv2d`] with the same kernel layout: maps `Cout`
    /// channels back to `Cin`. The output extent is
    /// `(H - 1) * stride + kh + output_padding - 2 * padding`.
    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
        output_padding: usize,
    ) -> Result<Var> {
        let [_, _, h, w] = self.value(input).dims4()?;
        let [_, _, kh, kw] = self.value(kernel).dims4()?;
        if stride == 0 || output_padding >= stride {
            return Err(Error::Config(format!(
                "conv2d_transpose: output_padding {output_padding} must be below stride {stride}"
            )));
        }
        let full = (
            (h.max(1) - 1) * stride + kh + output_padding,
            (w.max(1) - 1) * stride + kw + output_padding,
        );
        let v = kernels::conv_valid_adjoint(self.value(input), self.value(kernel), stride, full)?;
        let raw = self.push(v, Op::ConvTranspose { input, kernel, stride })?;
        self.unpad(raw, padding)
    }

    /// Adds `bias[C]` to every spatial position of channel `C`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [_, c, h, w] = self.value(x).dims4()?;
        let b = self.value(bias);
        if b.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: self.value(x).shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let hw = h * w;
        let bd = b.data();
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .enumerate()
            .flat_map(|(plane, xs)| xs.iter().map(move |v| v + bd[plane % c]))
            .collect();
        let v = Tensor::from_parts(self.value(x).shape().to_vec(), data);
        self.push(v, Op::BiasAdd(x, bias))
    }

    /// Sobel responses `[N*C, 2, H, W]` of every channel plane of
    /// `image[N, C, H, W]`, reflect-padded so each response keeps the image
    /// extent. Channel 0 is horizontal, channel 1 vertical.
    pub fn sobel(&mut self, image: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(image).dims4()?;
        let planes = self.reshape(image, vec![n * c, 1, h, w])?;
        let padded = self.pad(planes, Padding::Reflect(1))?;
        let v = kernels::sobel_valid(self.value(padded))?;
        self.push(v, Op::Sobel(padded))
    }

    pub fn instance_norm(&mut self, input: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (v, cache) = kernels::instance_norm(self.value(input), self.value(scale), self.value(shift), eps)?;
        self.push(
            v,
            Op::InstanceNorm {
                input,
                scale,
                shift,
                cache: Box::new(cache),
            },
        )
    }

    /// Reverse pass from a single-element `loss`.
    ///
    /// Returns gradients for every node reachable from `loss` that requires
    /// one; trainable leaves the loss does not depend on get zeros. The tape
    /// cannot be differentiated a second time.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape("tape already consumed by a previous backward".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("loss {loss:?} is not on this tape")));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Tape(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        }
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            out.grads.insert(Var(i), g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out.grads
                    .entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), "mul", |x, y| x * y)?);
                send(*b, g.zip_map(val(*a), "mul", |x, y| x * y)?);
            }
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Scale(a, s) => send(*a, g.map(|x| x * s)),
            Op::Square(a) => send(*a, g.zip_map(val(*a), "square", |x, y| 2.0 * x * y)?),
            Op::Abs(a) => send(
                *a,
                g.zip_map(val(*a), "abs", |x, y| if y > 0.0 { x } else if y < 0.0 { -x } else { 0.0 })?,
            ),
            Op::Relu(a) => send(*a, g.zip_map(val(*a), "relu", |x, y| if y > 0.0 { x } else { 0.0 })?),
            Op::LeakyRelu(a, s) => send(
                *a,
                g.zip_map(val(*a), "leaky_relu", |x, y| if y > 0.0 { x } else { s * x })?,
            ),
            Op::Tanh(a) => send(*a, g.zip_map(&node.value, "tanh", |x, y| x * (1.0 - y * y))?),
            Op::Sum(a) => send(*a, Tensor::full(val(*a).shape().to_vec(), g.item()?)),
            Op::Mean(a) => {
                let t = val(*a);
                send(*a, Tensor::full(t.shape().to_vec(), g.item()? / t.numel() as f64));
            }
            Op::Reshape(a) => send(*a, g.reshape(val(*a).shape().to_vec())?),
            Op::Pad(a, p) => send(*a, kernels::unpad(g, *p)?),
            Op::Unpad(a, p) => send(*a, kernels::pad(g, *p)?),
            Op::Conv { input, kernel, stride } => {
                let (x, k) = (val(*input), val(*kernel));
                if self.nodes[input.0].requires_grad {
                    let [_, _, h, w] = x.dims4()?;
                    send(*input, kernels::conv_valid_adjoint(g, k, *stride, (h, w))?);
                }
                if self.nodes[kernel.0].requires_grad {
                    send(*kernel, kernels::conv_valid_kernel_grad(x, g, *stride, k.shape())?);
                }
            }
            Op::ConvTranspose { input, kernel, stride } => {
                let (b, k) = (val(*input), val(*kernel));
                if self.nodes[input.0].requires_grad {
                    send(*input, kernels::conv_valid(g, k, *stride)?);
                }
                if self.nodes[kernel.0].requires_grad {
                    send(*kernel, kernels::conv_valid_kernel_grad(g, b, *stride, k.shape())?);
                }
            }
            Op::BiasAdd(x, bias) => {
                send(*x, g.clone());
                let [_, c, h, w] = g.dims4()?;
                let mut db = vec![0.0; c];
                for (plane, gs) in g.data().chunks(h * w).enumerate() {
                    db[plane % c] += gs.iter().sum::<f64>();
                }
                send(*bias, Tensor::from_parts(vec![c], db));
            }
            Op::Sobel(a) => {
                let [_, _, hp, wp] = val(*a).dims4()?;
                let kernel = SobelKernels::default().stacked();
                send(*a, kernels::conv_valid_adjoint(g, &kernel, 1, (hp, wp))?);
            }
            Op::InstanceNorm {
                input,
                scale,
                shift,
                cache,
            } => {
                let (dx, dscale, dshift) = kernels::instance_norm_backward(g, val(*scale), cache)?;
                send(*input, dx);
                send(*scale, dscale);
                send(*shift, dshift);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[2], &[3., 4.]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4., 6.]);
        let c = tape.constant(t(&[2], &[-2., 3.]));
        let sq = tape.square(c).unwrap();
        assert_eq!(tape.value(sq).data(), &[4., 9.]);
        let z = tape.scale(a, 0.0).unwrap();
        assert_eq!(tape.value(z).data(), &[0., 0.]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 2]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn reduction_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[4], &[1., 2., 3., 4.]));
        let m = tape.mean(a).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 2.5);
        let z = tape.constant(Tensor::zeros(vec![2, 2]));
        let s = tape.sum(z).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 0.0);
        let c = tape.constant(Tensor::full(vec![3, 3], -1.75));
        let m = tape.mean(c).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), -1.75);
    }

    #[test]
    fn conv2d_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let k = tape.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
        let y = tape.conv2d(x, k, 1, Padding::NONE).unwrap();
        assert_eq!(tape.value(y).data(), &[5.]);

        let zk = tape.constant(Tensor::zeros(vec![2, 1, 2, 2]));
        let y = tape.conv2d(x, zk, 1, Padding::Zero(1)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let id = tape.constant(Tensor::ones(vec![1, 1, 1, 1]));
        let y = tape.conv2d(x, id, 1, Padding::NONE).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let y = tape.conv2d_transpose(x, id, 1, Padding::NONE, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        let k = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        assert!(tape.conv2d(x, k, 1, Padding::NONE).is_err());
        let k = tape.constant(Tensor::zeros(vec![1, 2, 5, 5]));
        assert!(tape.conv2d(x, k, 1, Padding::NONE).is_err());
        assert!(tape.conv2d(x, k, 1, Padding::Zero(1)).is_ok());
    }

    #[test]
    fn transpose_output_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 4, 8, 8]));
        let k = tape.constant(Tensor::zeros(vec![4, 2, 3, 3]));
        let y = tape.conv2d_transpose(x, k, 2, Padding::Zero(1), 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 16, 16]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1., -2., 3., 0.5, 0., 7.]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[3.]));
        let sq = tape.square(x).unwrap();
        let m = tape.mean(sq).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.]);
    }

    #[test]
    fn backward_contract() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let unused = tape.param(t(&[3], &[1., 2., 3.]));
        let c = tape.constant(t(&[2], &[5., 5.]));
        assert!(tape.backward(x).is_err(), "non-scalar loss");
        let y = tape.mul(x, c).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5., 5.]);
        assert_eq!(g.get(unused).unwrap().data(), &[0., 0., 0.]);
        assert!(g.get(c).is_none());
        let err = tape.backward(l).unwrap_err();
        assert!(err.to_string().contains("consumed"));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[2.]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let l = tape.sum(z).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.]);
    }
}

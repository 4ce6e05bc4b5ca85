//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order, so the recording is topologically sorted by construction.
//! [`Tape::backward`] walks it once in reverse and returns a [`Gradients`]
//! table. Gradients of a value consumed by several operations are summed.
//!
//! ```
//! use hipnet::autodiff::Tape;
//! use hipnet::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Tapes are single-use: build one per forward pass.

use crate::kernels::{self, BatchNormCache};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the running averages.
    Eval,
}

/// Exponential moving averages tracked by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn fresh(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormConfig<T> {
    pub epsilon: T,
    /// Weight kept by the running average on each update.
    pub momentum: T,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    AvgPool {
        input: Var,
        window: usize,
        stride: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    Relu {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum {
        input: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Reshape {
        input: Var,
    },
    Element {
        input: Var,
        index: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// True when some requires-grad leaf is upstream of this node.
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        self.nodes
            .get(var.0)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownVar(var.0))
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.get(var.0).is_some_and(|n| n.tracked)
    }

    fn node(&self, var: Var) -> Result<&Node<T>> {
        self.nodes.get(var.0).ok_or(TensorError::UnknownVar(var.0))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let bias_value = match bias {
            Some(b) => Some(self.value(b)?),
            None => None,
        };
        let out = kernels::conv2d_forward(self.value(input)?, self.value(kernel)?, bias_value, stride, padding)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    pub fn avg_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let out = kernels::avg_pool_forward(self.value(input)?, window, stride)?;
        Ok(self.push(out, Op::AvgPool { input, window, stride }, &[input]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels(self.value(a)?, self.value(b)?)?;
        Ok(self.push(out, Op::Concat { a, b }, &[a, b]))
    }

    /// Batch normalization. In [`NormMode::Train`] the running statistics
    /// are blended towards the batch statistics (unbiased variance).
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        mode: NormMode,
        config: NormConfig<T>,
    ) -> Result<Var> {
        let train = mode == NormMode::Train;
        let result = kernels::batch_norm_forward(
            self.value(input)?,
            self.value(gamma)?,
            self.value(beta)?,
            (&running.mean, &running.var),
            train,
            config.epsilon,
        )?;
        if let Some((mean, var)) = result.batch_stats {
            let keep = config.momentum;
            let blend = T::one() - keep;
            for (r, b) in running.mean.iter_mut().zip(&mean) {
                *r = keep * *r + blend * *b;
            }
            for (r, b) in running.var.iter_mut().zip(&var) {
                *r = keep * *r + blend * *b;
            }
        }
        Ok(self.push(
            result.output,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache: result.cache,
            },
            &[input, gamma, beta],
        ))
    }

    /// `max(0, x)`; the derivative at exactly zero is taken to be zero.
    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input)?.map(|v| v.max(T::zero()));
        Ok(self.push(out, Op::Relu { input }, &[input]))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::linear_forward(self.value(input)?, self.value(weight)?, self.value(bias)?)?;
        Ok(self.push(out, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    /// Mean cross-entropy over the batch. Returns the scalar loss and the
    /// softmax probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor<T>)> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits)?, labels)?;
        let var = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: probs.clone(),
            },
            &[logits],
        );
        Ok((var, probs))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input)?.sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum { input }, &[input]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a)?.shape(), self.value(b)?.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a)?, self.value(b)?);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a)?, self.value(b)?);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input)?.reshape(shape)?;
        Ok(self.push(out, Op::Reshape { input }, &[input]))
    }

    /// Selects one value (row-major flat index) as a scalar.
    pub fn element(&mut self, input: Var, index: usize) -> Result<Var> {
        let v = self.value(input)?;
        let value = *v.data().get(index).ok_or(TensorError::IndexOutOfRange {
            op: "element",
            index,
            len: v.len(),
        })?;
        Ok(self.push(Tensor::scalar(value), Op::Element { input, index }, &[input]))
    }

    /// Propagates d(loss)/d(node) back through the recording.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(root.value.shape().to_vec(), vec![T::one()]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |var: Var, contribution: Tensor<T>| {
                if !self.nodes[var.0].tracked {
                    return;
                }
                match &mut grads[var.0] {
                    Some(existing) => existing.accumulate(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            };
            let wants = |var: Var| self.nodes[var.0].tracked;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let want = (wants(*input), wants(*kernel), bias.is_some_and(wants));
                    let cg = kernels::conv2d_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[kernel.0].value,
                        &g,
                        *stride,
                        *padding,
                        want,
                    )?;
                    if let Some(t) = cg.input {
                        send(*input, t);
                    }
                    if let Some(t) = cg.kernel {
                        send(*kernel, t);
                    }
                    if let (Some(b), Some(t)) = (bias, cg.bias) {
                        send(*b, t);
                    }
                }
                Op::AvgPool { input, window, stride } => {
                    let shape = self.nodes[input.0].value.shape();
                    send(*input, kernels::avg_pool_backward(shape, &g, *window, *stride));
                }
                Op::Concat { a, b } => {
                    let ca = self.nodes[a.0].value.shape()[1];
                    let c = g.shape()[1];
                    send(*a, g.slice_channels(0, ca)?);
                    send(*b, g.slice_channels(ca, c)?);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    cache,
                } => {
                    let shape = self.nodes[input.0].value.shape();
                    let (gx, gg, gb) = kernels::batch_norm_backward(shape, &self.nodes[gamma.0].value, cache, &g);
                    send(*input, gx);
                    send(*gamma, gg);
                    send(*beta, gb);
                }
                Op::Relu { input } => {
                    let x = &self.nodes[input.0].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    send(*input, Tensor::from_parts(x.shape().to_vec(), data));
                }
                Op::Linear { input, weight, bias } => {
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[weight.0].value;
                    let (n, f) = (x.shape()[0], x.shape()[1]);
                    let k = w.shape()[0];
                    if wants(*input) {
                        let mut gx = vec![T::zero(); n * f];
                        T::gemm(n, k, f, T::one(), g.data(), (k, 1), w.data(), (f, 1), T::zero(), &mut gx, (f, 1));
                        send(*input, Tensor::from_parts(vec![n, f], gx));
                    }
                    if wants(*weight) {
                        let mut gw = vec![T::zero(); k * f];
                        T::gemm(k, n, f, T::one(), g.data(), (1, k), x.data(), (f, 1), T::zero(), &mut gw, (f, 1));
                        send(*weight, Tensor::from_parts(vec![k, f], gw));
                    }
                    if wants(*bias) {
                        let mut gb = vec![T::zero(); k];
                        for row in g.data().chunks(k.max(1)) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc = *acc + *v;
                            }
                        }
                        send(*bias, Tensor::from_parts(vec![k], gb));
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let (n, k) = (probs.shape()[0], probs.shape()[1]);
                    let scale = g.data()[0] / T::of(n.max(1) as f64);
                    let mut data = probs.data().to_vec();
                    for (row, &label) in labels.iter().enumerate() {
                        data[row * k + label] = data[row * k + label] - T::one();
                    }
                    data.iter_mut().for_each(|v| *v = *v * scale);
                    send(*logits, Tensor::from_parts(vec![n, k], data));
                }
                Op::Sum { input } => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let n = shape.iter().product();
                    send(*input, Tensor::from_parts(shape, vec![g.data()[0]; n]));
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = g.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
                    let gb = g.data().iter().zip(va.data()).map(|(x, y)| *x * *y).collect();
                    send(*a, Tensor::from_parts(va.shape().to_vec(), ga));
                    send(*b, Tensor::from_parts(vb.shape().to_vec(), gb));
                }
                Op::Add { a, b } => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Reshape { input } => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    send(*input, Tensor::from_parts(shape, g.into_data()));
                }
                Op::Element { input, index } => {
                    let x = &self.nodes[input.0].value;
                    let mut data = vec![T::zero(); x.len()];
                    data[*index] = g.data()[0];
                    send(*input, Tensor::from_parts(x.shape().to_vec(), data));
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of [`Tape::backward`]: one gradient per recorded leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`; zeros when `var` has no
    /// path to the loss.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        match self.grads.get(var.0) {
            Some(Some(g)) => g.clone(),
            Some(None) => Tensor::from_parts(self.shapes[var.0].clone(), vec![T::zero(); self.shapes[var.0].iter().product()]),
            None => panic!("variable #{} is not on this tape", var.0),
        }
    }

    pub fn get(&self, var: Var) -> Result<Option<&Tensor<T>>> {
        match self.grads.get(var.0) {
            Some(g) => Ok(g.as_ref()),
            None => Err(TensorError::UnknownVar(var.0)),
        }
    }

    /// Moves the gradient out, leaving nothing behind.
    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

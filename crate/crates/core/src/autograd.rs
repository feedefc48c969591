//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. `Tape::backward` walks the nodes in reverse,
//! accumulating gradients, and adds the gradients of parameter leaves into the
//! owning [`ModelParams`].

use crate::error::{Error, Result};
use crate::ops::conv::{self, Padding};
use crate::ops::pointwise::{self, BatchNormCache};
use crate::ops::spatial;
use crate::params::{BatchNormUpdate, Mode, ModelParams};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: Padding,
    },
    Conv3dModality {
        x: Var,
        w: Var,
        b: Var,
    },
    LeakyRelu {
        x: Var,
        alpha: f32,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
        split: usize,
    },
    Stack {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Softmax {
        x: Var,
    },
    ScaledCrossEntropy {
        prob: Var,
        labels: Vec<u8>,
        scales: Vec<f32>,
    },
    SumSquares {
        inputs: Vec<Var>,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Lower clamp applied to probabilities before taking logarithms.
pub const LOG_CLAMP: f32 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    norm_updates: Vec<BatchNormUpdate>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Batch statistics gathered by training-mode normalization layers.
    pub fn take_norm_updates(&mut self) -> Vec<BatchNormUpdate> {
        std::mem::take(&mut self.norm_updates)
    }

    /// A constant input; gradients stop here.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records the current value of parameter `id` as a differentiable leaf.
    pub fn param(&mut self, params: &ModelParams, id: &str) -> Result<Var> {
        let value = params.value(id)?.clone();
        Ok(self.push(value, Op::Param(id.to_string())))
    }

    /// Copies `x` as a constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let y = conv::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, padding)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    pub fn conv3d_modality(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = conv::conv3d_modality_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Conv3dModality { x, w, b }))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f32) -> Result<Var> {
        let y = pointwise::leaky_relu_forward(self.value(x), alpha)?;
        Ok(self.push(y, Op::LeakyRelu { x, alpha }))
    }

    /// Batch normalization of layer `layer`, whose affine terms are the
    /// parameters `{layer}.gamma` / `{layer}.beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        params: &ModelParams,
        layer: &str,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = self.param(params, &format!("{layer}.gamma"))?;
        let beta = self.param(params, &format!("{layer}.beta"))?;
        let state = params.norm(layer)?;
        match mode {
            Mode::Train => {
                let (y, cache) = pointwise::batch_norm_train_forward(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    state.epsilon,
                )?;
                let c = cache.mean.len();
                self.norm_updates.push(BatchNormUpdate {
                    layer: layer.to_string(),
                    mean: cache.mean.clone(),
                    var: cache.var.clone(),
                    count: self.value(x).len() / c,
                });
                Ok(self.push(
                    y,
                    Op::BatchNormTrain {
                        x,
                        gamma,
                        beta,
                        cache,
                    },
                ))
            }
            Mode::Inference => {
                let (y, inv_std) = pointwise::batch_norm_eval_forward(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    &state.running_mean,
                    &state.running_var,
                    state.epsilon,
                )?;
                Ok(self.push(
                    y,
                    Op::BatchNormEval {
                        x,
                        gamma,
                        beta,
                        mean: state.running_mean.clone(),
                        inv_std,
                    },
                ))
            }
        }
    }

    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = spatial::max_pool2d_forward(self.value(x))?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn upsample_nearest(&mut self, x: Var) -> Result<Var> {
        let y = spatial::upsample_nearest_forward(self.value(x))?;
        Ok(self.push(y, Op::Upsample { x }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = spatial::concat_last(self.value(a), self.value(b))?;
        let split = *self.value(a).shape().last().unwrap();
        Ok(self.push(y, Op::Concat { a, b, split }))
    }

    pub fn stack_modality(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = spatial::stack_modality(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Stack { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self
            .value(a)
            .zip_map(self.value(b), |p, q| p * q)
            .map_err(|_| shape_err("elementwise_mul", self.value(a), self.value(b)))?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self
            .value(a)
            .zip_map(self.value(b), |p, q| p + q)
            .map_err(|_| shape_err("add", self.value(a), self.value(b)))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale { x, factor })
    }

    /// Softmax over the channel (last) axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let y = pointwise::softmax_last_forward(self.value(x));
        self.push(y, Op::Softmax { x })
    }

    /// Mean over pixels of `scales[label] * -ln(max(p[label], LOG_CLAMP))`.
    pub fn scaled_cross_entropy(&mut self, prob: Var, labels: &[u8], scales: &[f32]) -> Result<Var> {
        let p = self.value(prob);
        let classes = *p.shape().last().unwrap();
        if scales.len() != classes {
            return Err(Error::dim(
                "scaled_cross_entropy",
                format!("{} class scales for {classes} classes", scales.len()),
            ));
        }
        if labels.len() * classes != p.len() {
            return Err(Error::dim(
                "scaled_cross_entropy",
                format!("{} labels for {} pixels", labels.len(), p.len() / classes),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!(
                "label {bad} outside 0..{}",
                classes - 1
            )));
        }
        let mut total = 0.0f64;
        for (row, &l) in p.data().chunks_exact(classes).zip(labels) {
            let pt = row[l as usize].max(LOG_CLAMP);
            total -= scales[l as usize] as f64 * (pt as f64).ln();
        }
        let loss = (total / labels.len() as f64) as f32;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::ScaledCrossEntropy {
                prob,
                labels: labels.to_vec(),
                scales: scales.to_vec(),
            },
        ))
    }

    /// `sum_j w_j^2` over every element of every input.
    pub fn sum_squares(&mut self, inputs: &[Var]) -> Var {
        let total: f64 = inputs.iter().map(|&v| self.value(v).sum_squares()).sum();
        self.push(
            Tensor::scalar(total as f32),
            Op::SumSquares {
                inputs: inputs.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total as f32), Op::Sum { x })
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        Ok(Gradients {
            grads: self.propagate(loss, true)?,
        })
    }

    fn propagate(&self, loss: Var, keep_all: bool) -> Result<Vec<Option<Tensor>>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let cg = conv::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        *padding,
                    )?;
                    accumulate(&mut grads, *x, cg.input)?;
                    accumulate(&mut grads, *w, cg.weight)?;
                    accumulate(&mut grads, *b, cg.bias)?;
                }
                Op::Conv3dModality { x, w, b } => {
                    let cg = conv::conv3d_modality_backward(self.value(*x), self.value(*w), &g)?;
                    accumulate(&mut grads, *x, cg.input)?;
                    accumulate(&mut grads, *w, cg.weight)?;
                    accumulate(&mut grads, *b, cg.bias)?;
                }
                Op::LeakyRelu { x, alpha } => {
                    let dx = pointwise::leaky_relu_backward(self.value(*x), *alpha, &g)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let bg = pointwise::batch_norm_train_backward(cache, self.value(*gamma), &g)?;
                    accumulate(&mut grads, *x, bg.input)?;
                    accumulate(&mut grads, *gamma, bg.gamma)?;
                    accumulate(&mut grads, *beta, bg.beta)?;
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let c = mean.len();
                    let gam = self.value(*gamma).data();
                    let mut dx = Vec::with_capacity(g.len());
                    let mut dgamma = vec![0.0f64; c];
                    let mut dbeta = vec![0.0f64; c];
                    for (grow, xrow) in g
                        .data()
                        .chunks_exact(c)
                        .zip(self.value(*x).data().chunks_exact(c))
                    {
                        for ch in 0..c {
                            let xhat = (xrow[ch] - mean[ch]) * inv_std[ch];
                            dx.push(grow[ch] * gam[ch] * inv_std[ch]);
                            dgamma[ch] += grow[ch] as f64 * xhat as f64;
                            dbeta[ch] += grow[ch] as f64;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), dx)?)?;
                    accumulate(&mut grads, *gamma, to_tensor(&dgamma))?;
                    accumulate(&mut grads, *beta, to_tensor(&dbeta))?;
                }
                Op::MaxPool { x, argmax } => {
                    let dx = spatial::max_pool2d_backward(self.value(*x).shape(), argmax, &g);
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Upsample { x } => {
                    accumulate(&mut grads, *x, spatial::upsample_nearest_backward(&g)?)?;
                }
                Op::Concat { a, b, split } => {
                    let (ga, gb) = g.split_channels(*split)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Stack { a, b } => {
                    let shape = self.value(*a).shape().to_vec();
                    let c = shape[3];
                    let flat = g.clone().reshape([shape[0], shape[1], shape[2], 2 * c])?;
                    let (ga, gb) = flat.split_channels(c)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Mul { a, b } => {
                    let ga = g.zip_map(self.value(*b), |u, v| u * v)?;
                    let gb = g.zip_map(self.value(*a), |u, v| u * v)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    accumulate(&mut grads, *x, g.map(|v| v * f))?;
                }
                Op::Softmax { x } => {
                    let dx = pointwise::softmax_last_backward(&node.value, &g);
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::ScaledCrossEntropy {
                    prob,
                    labels,
                    scales,
                } => {
                    let p = self.value(*prob);
                    let classes = *p.shape().last().unwrap();
                    let upstream = g.item();
                    let n = labels.len() as f32;
                    let mut dp = Tensor::zeros(p.shape().to_vec());
                    for (i, &l) in labels.iter().enumerate() {
                        let idx = i * classes + l as usize;
                        let pt = p.data()[idx];
                        if pt > LOG_CLAMP {
                            dp.data_mut()[idx] = -upstream * scales[l as usize] / (n * pt);
                        }
                    }
                    accumulate(&mut grads, *prob, dp)?;
                }
                Op::SumSquares { inputs } => {
                    let upstream = g.item();
                    for &v in inputs {
                        let dv = self.value(v).map(|w| 2.0 * upstream * w);
                        accumulate(&mut grads, v, dv)?;
                    }
                }
                Op::Sum { x } => {
                    let upstream = g.item();
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::full(shape, upstream))?;
                }
            }
            if keep_all || matches!(node.op, Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Ok(grads)
    }

    /// Back-propagates `loss` and adds the result into the gradients of every
    /// parameter leaf. Parameters not reached keep their current gradient.
    pub fn backward(&self, loss: Var, params: &mut ModelParams) -> Result<()> {
        let grads = self.propagate(loss, false)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, grads[i].as_ref()) {
                params.get_mut(id)?.grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

/// Per-node gradients from [`Tape::gradients`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn to_tensor(values: &[f64]) -> Tensor {
    Tensor::new([values.len()], values.iter().map(|&v| v as f32).collect())
        .expect("non-empty channel vector")
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::dim(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_input() {
        let mut params = ModelParams::new();
        params
            .insert("w", Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        let x = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let xv = tape.constant(x.clone());
        let prod = tape.mul(w, xv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get("w").unwrap().grad, x);
    }

    #[test]
    fn unreachable_parameter_keeps_zero_grad() {
        let mut params = ModelParams::new();
        params.insert("w", Tensor::ones([2])).unwrap();
        params.insert("unused", Tensor::ones([2])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let _ = tape.param(&params, "unused").unwrap();
        let loss = tape.sum(w);
        tape.backward(loss, &mut params).unwrap();
        assert!(params
            .get("unused")
            .unwrap()
            .grad
            .data()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut params = ModelParams::new();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([2, 2]));
        assert!(matches!(
            tape.backward(x, &mut params),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mul_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones([2]));
        let b = tape.constant(Tensor::ones([3]));
        assert!(matches!(tape.mul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn elementwise_mul_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new([2], vec![2.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::new([2], vec![4.0, -1.0]).unwrap());
        let ones = tape.constant(Tensor::ones([2]));
        let zeros = tape.constant(Tensor::zeros([2]));
        let ab = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[8.0, -3.0]);
        let a1 = tape.mul(a, ones).unwrap();
        assert_eq!(tape.value(a1).data(), &[2.0, 3.0]);
        let a0 = tape.mul(a, zeros).unwrap();
        assert_eq!(tape.value(a0).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_use_accumulates() {
        let mut params = ModelParams::new();
        params.insert("w", Tensor::new([1], vec![3.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get("w").unwrap().grad.data(), &[6.0]);
    }

    #[test]
    fn detach_stops_gradient() {
        let mut params = ModelParams::new();
        params.insert("w", Tensor::ones([2])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let d = tape.detach(w);
        let loss = tape.sum(d);
        tape.backward(loss, &mut params).unwrap();
        assert!(params.get("w").unwrap().grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full([1, 1, 2, 2], 0.5));
        let err = tape.scaled_cross_entropy(p, &[0, 2], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}

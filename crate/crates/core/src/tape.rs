//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only record of primitive applications in
//! topological order: a node's inputs always precede it. Backward walks the
//! record once in reverse, so gradients reach parameters and any interior
//! node (needed for gradients with respect to captured feature maps).
//!
//! The tape can also be re-executed with one node replaced by an injected
//! value ([`Tape::replay_with_override`]). That turns any interior node
//! into a leaf, which is exactly what the finite-difference oracles and the
//! second-derivative approximation need.

use crate::error::{FgpError, Result};
use crate::kernels as k;
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

/// Recorded primitive application. Input node ids plus whatever
/// hyperparameters the forward and backward rules need; saved intermediates
/// are recomputed from input values, which keeps replay trivially correct.
#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        run_mean: Tensor<T>,
        run_var: Tensor<T>,
        eps: f64,
    },
    Relu {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        x: NodeId,
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Upsample {
        x: NodeId,
        factor: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Flatten {
        x: NodeId,
    },
    ChannelMask {
        x: NodeId,
        keep: Vec<bool>,
    },
    SelectLogit {
        x: NodeId,
        sample: usize,
        class: usize,
    },
    MaskedPixelSum {
        x: NodeId,
        sample: usize,
        class: usize,
        pixels: Vec<(usize, usize)>,
    },
    SoftmaxCrossEntropy {
        x: NodeId,
        labels: Vec<usize>,
    },
    PixelCrossEntropy {
        x: NodeId,
        mask: Vec<u8>,
    },
    SumAll {
        x: NodeId,
    },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNormTrain { .. } => "batchnorm(train)",
            Op::BatchNormEval { .. } => "batchnorm(eval)",
            Op::Relu { .. } => "relu",
            Op::MaxPool { .. } => "maxpool",
            Op::AvgPool { .. } => "avgpool",
            Op::GlobalAvgPool { .. } => "global-avg-pool",
            Op::Linear { .. } => "linear",
            Op::Upsample { .. } => "upsample-nearest",
            Op::Add { .. } => "add-skip",
            Op::Mul { .. } => "mul",
            Op::Flatten { .. } => "flatten",
            Op::ChannelMask { .. } => "channel-mask",
            Op::SelectLogit { .. } => "select-logit",
            Op::MaskedPixelSum { .. } => "masked-pixel-sum",
            Op::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
            Op::PixelCrossEntropy { .. } => "pixel-cross-entropy",
            Op::SumAll { .. } => "sum-all",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => vec![x, w, b],
            Op::BatchNormTrain { x, gamma, beta, .. }
            | Op::BatchNormEval { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Relu { x }
            | Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Upsample { x, .. }
            | Op::Flatten { x }
            | Op::ChannelMask { x, .. }
            | Op::SelectLogit { x, .. }
            | Op::MaskedPixelSum { x, .. }
            | Op::SoftmaxCrossEntropy { x, .. }
            | Op::PixelCrossEntropy { x, .. }
            | Op::SumAll { x } => vec![x],
            Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Gradients of one backward pass. Nodes the seed does not depend on read
/// as exact zero tensors.
pub struct GradMap<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> GradMap<T> {
    /// Gradient of the seed w.r.t. `node`; zeros if the node is unused.
    pub fn get(&self, node: NodeId) -> Tensor<T> {
        match &self.grads[node] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[node].clone()),
        }
    }

    pub fn get_ref(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads[node].as_ref()
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, node: NodeId) -> &Tensor<T> {
        &self.nodes[node].value
    }

    /// Execute an op against current node values, check the result is
    /// finite, and record it.
    pub fn apply(&mut self, op: Op<T>) -> Result<NodeId> {
        for input in op.inputs() {
            if input >= self.nodes.len() {
                return Err(FgpError::InvalidArg(format!(
                    "op {} references node {input} not on tape",
                    op.name()
                )));
            }
        }
        let value = self.execute(&op)?;
        value.check_finite(op.name())?;
        self.nodes.push(Node { op, value });
        Ok(self.nodes.len() - 1)
    }

    fn execute(&self, op: &Op<T>) -> Result<Tensor<T>> {
        let v = |id: NodeId| &self.nodes[id].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves are pushed, not executed"),
            Op::Conv2d { x, w, b, stride, pad } => k::conv2d_fwd(v(*x), v(*w), v(*b), *stride, *pad),
            Op::BatchNormTrain { x, gamma, beta, eps } => {
                k::bn_train_fwd(v(*x), v(*gamma), v(*beta), *eps).0
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                run_mean,
                run_var,
                eps,
            } => k::bn_eval_fwd(v(*x), v(*gamma), v(*beta), run_mean, run_var, *eps),
            Op::Relu { x } => k::relu_fwd(v(*x)),
            Op::MaxPool { x, kernel, stride } => k::maxpool_fwd(v(*x), *kernel, *stride).0,
            Op::AvgPool { x, kernel, stride } => k::avgpool_fwd(v(*x), *kernel, *stride),
            Op::GlobalAvgPool { x } => k::gap_fwd(v(*x)),
            Op::Linear { x, w, b } => k::linear_fwd(v(*x), v(*w), v(*b)),
            Op::Upsample { x, factor } => k::upsample_fwd(v(*x), *factor),
            Op::Add { a, b } => k::add_fwd(v(*a), v(*b)),
            Op::Mul { a, b } => k::mul_fwd(v(*a), v(*b)),
            Op::Flatten { x } => {
                let t = v(*x);
                let n = t.shape()[0];
                let rest: usize = t.shape()[1..].iter().product();
                t.reshaped(vec![n, rest])?
            }
            Op::ChannelMask { x, keep } => k::channel_mask_fwd(v(*x), keep),
            Op::SelectLogit { x, sample, class } => k::select_logit_fwd(v(*x), *sample, *class),
            Op::MaskedPixelSum {
                x,
                sample,
                class,
                pixels,
            } => k::masked_pixel_sum_fwd(v(*x), *sample, *class, pixels),
            Op::SoftmaxCrossEntropy { x, labels } => k::softmax_ce_fwd(v(*x), labels),
            Op::PixelCrossEntropy { x, mask } => k::pixel_ce_fwd(v(*x), mask),
            Op::SumAll { x } => k::sum_all_fwd(v(*x)),
        })
    }

    /// Reverse pass from a scalar seed node. One visit per node.
    pub fn backward(&self, seed: NodeId) -> Result<GradMap<T>> {
        if seed >= self.nodes.len() {
            return Err(FgpError::InvalidArg(format!("seed node {seed} not on tape")));
        }
        if !self.nodes[seed].value.is_scalar() {
            return Err(FgpError::InvalidArg(format!(
                "backward seed must be scalar, got shape {:?}",
                self.nodes[seed].value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed] = Some(Tensor::scalar(T::one()));

        for id in (0..=seed).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let v = |n: NodeId| &self.nodes[n].value;
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = k::conv2d_bwd(v(*x), v(*w), &g, *stride, *pad);
                    self.accum(&mut grads, *x, dx);
                    self.accum(&mut grads, *w, dw);
                    self.accum(&mut grads, *b, db);
                }
                Op::BatchNormTrain { x, gamma, beta, eps } => {
                    let (dx, dg, db) = k::bn_train_bwd(v(*x), v(*gamma), &g, *eps);
                    self.accum(&mut grads, *x, dx);
                    self.accum(&mut grads, *gamma, dg);
                    self.accum(&mut grads, *beta, db);
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    run_mean,
                    run_var,
                    eps,
                } => {
                    let (dx, dg, db) =
                        k::bn_eval_bwd(v(*x), v(*gamma), run_mean, run_var, &g, *eps);
                    self.accum(&mut grads, *x, dx);
                    self.accum(&mut grads, *gamma, dg);
                    self.accum(&mut grads, *beta, db);
                }
                Op::Relu { x } => {
                    self.accum(&mut grads, *x, k::relu_bwd(v(*x), &g));
                }
                Op::MaxPool { x, kernel, stride } => {
                    let (_, arg) = k::maxpool_fwd(v(*x), *kernel, *stride);
                    self.accum(&mut grads, *x, k::maxpool_bwd(v(*x).shape(), &arg, &g));
                }
                Op::AvgPool { x, kernel, stride } => {
                    self.accum(
                        &mut grads,
                        *x,
                        k::avgpool_bwd(v(*x).shape(), *kernel, *stride, &g),
                    );
                }
                Op::GlobalAvgPool { x } => {
                    self.accum(&mut grads, *x, k::gap_bwd(v(*x).shape(), &g));
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = k::linear_bwd(v(*x), v(*w), &g);
                    self.accum(&mut grads, *x, dx);
                    self.accum(&mut grads, *w, dw);
                    self.accum(&mut grads, *b, db);
                }
                Op::Upsample { x, factor } => {
                    self.accum(&mut grads, *x, k::upsample_bwd(v(*x).shape(), *factor, &g));
                }
                Op::Add { a, b } => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g);
                }
                Op::Mul { a, b } => {
                    let (da, db) = k::mul_bwd(v(*a), v(*b), &g);
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::Flatten { x } => {
                    self.accum(&mut grads, *x, g.reshaped(v(*x).shape().to_vec())?);
                }
                Op::ChannelMask { x, keep } => {
                    self.accum(&mut grads, *x, k::channel_mask_bwd(&g, keep));
                }
                Op::SelectLogit { x, sample, class } => {
                    self.accum(
                        &mut grads,
                        *x,
                        k::select_logit_bwd(v(*x).shape(), *sample, *class, &g),
                    );
                }
                Op::MaskedPixelSum {
                    x,
                    sample,
                    class,
                    pixels,
                } => {
                    self.accum(
                        &mut grads,
                        *x,
                        k::masked_pixel_sum_bwd(v(*x).shape(), *sample, *class, pixels, &g),
                    );
                }
                Op::SoftmaxCrossEntropy { x, labels } => {
                    self.accum(&mut grads, *x, k::softmax_ce_bwd(v(*x), labels, &g));
                }
                Op::PixelCrossEntropy { x, mask } => {
                    self.accum(&mut grads, *x, k::pixel_ce_bwd(v(*x), mask, &g));
                }
                Op::SumAll { x } => {
                    self.accum(&mut grads, *x, k::sum_all_bwd(v(*x).shape(), &g));
                }
            }
        }

        Ok(GradMap {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        match &mut grads[id] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Re-execute the whole tape with `node` turned into a leaf holding
    /// `value`. Finite checks are kept; op structure and ids are preserved.
    pub fn replay_with_override(&self, node: NodeId, value: Tensor<T>) -> Result<Tape<T>> {
        if node >= self.nodes.len() {
            return Err(FgpError::InvalidArg(format!("node {node} not on tape")));
        }
        if value.shape() != self.nodes[node].value.shape() {
            return Err(FgpError::ShapeMismatch {
                context: "replay_with_override".into(),
                expected: self.nodes[node].value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        let mut out = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
        };
        for (id, n) in self.nodes.iter().enumerate() {
            if id == node {
                out.nodes.push(Node {
                    op: Op::Leaf,
                    value: value.clone(),
                });
            } else if matches!(n.op, Op::Leaf) {
                out.nodes.push(Node {
                    op: Op::Leaf,
                    value: n.value.clone(),
                });
            } else {
                let v = out.execute(&n.op)?;
                v.check_finite(n.op.name())?;
                out.nodes.push(Node {
                    op: n.op.clone(),
                    value: v,
                });
            }
        }
        Ok(out)
    }

    /// Elementwise second derivative of the seed w.r.t. `node`, estimated
    /// by a forward difference of first gradients. An approximation: exact
    /// only where the gradient is differentiable, and it reports zero
    /// across piecewise-linear (ReLU) paths, matching the printed
    /// higher-order weight formula this feeds.
    pub fn second_grad_sum(&self, seed: NodeId, node: NodeId) -> Result<Tensor<T>> {
        const STEP: f64 = 1e-3;
        if node >= self.nodes.len() {
            return Err(FgpError::InvalidArg(format!("node {node} not on tape")));
        }
        let h = T::from_f64(STEP);
        let g0 = self.backward(seed)?.get(node);
        let base = self.value(node).clone();
        let mut out = Tensor::zeros(base.shape().to_vec());
        for e in 0..base.numel() {
            let mut bumped = base.clone();
            bumped.data_mut()[e] += h;
            let replay = self.replay_with_override(node, bumped)?;
            let g1 = replay.backward(seed)?.get(node);
            out.data_mut()[e] = (g1.data()[e] - g0.data()[e]) / h;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn backward_of_linear_sum_is_column_sums() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(vec![1, 2], vec![0.5, -0.25]));
        let w = tape.leaf(tensor(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(Tensor::zeros(vec![3]));
        let y = tape.apply(Op::Linear { x, w, b }).unwrap();
        let s = tape.apply(Op::SumAll { x: y }).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[9.0, 12.0]);
    }

    #[test]
    fn unused_node_gets_exact_zeros() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(vec![2], vec![1.0, 2.0]));
        let b = tape.leaf(tensor(vec![2], vec![3.0, 4.0]));
        let s = tape.apply(Op::SumAll { x: a }).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(b).data(), &[0.0, 0.0]);
        assert!(grads.get_ref(b).is_none());
    }

    #[test]
    fn seed_must_be_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(vec![2], vec![1.0, 2.0]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn seed_off_tape_is_error() {
        let tape = Tape::<f64>::new();
        assert!(tape.backward(0).is_err());
    }

    #[test]
    fn replay_recomputes_downstream() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(vec![2], vec![1.0, 2.0]));
        let sq = tape.apply(Op::Mul { a, b: a }).unwrap();
        let s = tape.apply(Op::SumAll { x: sq }).unwrap();
        assert_eq!(tape.value(s).item(), 5.0);
        let replay = tape
            .replay_with_override(a, tensor(vec![2], vec![3.0, 1.0]))
            .unwrap();
        assert_eq!(replay.value(s).item(), 10.0);
        // original untouched
        assert_eq!(tape.value(s).item(), 5.0);
    }

    #[test]
    fn second_grad_of_square_is_two() {
        // y = sum(a*a): d2y/da2 = 2 per element
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(vec![3], vec![0.5, -1.0, 2.0]));
        let sq = tape.apply(Op::Mul { a, b: a }).unwrap();
        let s = tape.apply(Op::SumAll { x: sq }).unwrap();
        let h = tape.second_grad_sum(s, a).unwrap();
        for &v in h.data() {
            assert!((v - 2.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn second_grad_of_affine_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(vec![1, 2], vec![0.3, 0.7]));
        let w = tape.leaf(tensor(vec![2, 2], vec![1.0, -2.0, 0.5, 1.5]));
        let b = tape.leaf(tensor(vec![2], vec![0.1, -0.1]));
        let y = tape.apply(Op::Linear { x, w, b }).unwrap();
        let s = tape.apply(Op::SumAll { x: y }).unwrap();
        let h = tape.second_grad_sum(s, x).unwrap();
        for &v in h.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn second_grad_relu_path_off_kink_is_zero() {
        let mut tape = Tape::new();
        // values far from 0 relative to the 1e-3 step
        let x = tape.leaf(tensor(vec![3], vec![1.0, -2.0, 0.5]));
        let r = tape.apply(Op::Relu { x }).unwrap();
        let s = tape.apply(Op::SumAll { x: r }).unwrap();
        let h = tape.second_grad_sum(s, x).unwrap();
        for &v in h.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn nonfinite_forward_is_rejected() {
        let mut tape = Tape::new();
        let big = tape.leaf(Tensor::full(vec![1, 2], f64::MAX));
        let r = tape.apply(Op::Mul { a: big, b: big });
        assert!(matches!(r, Err(FgpError::NonFinite { .. })));
    }
}

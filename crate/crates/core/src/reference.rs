//! Independent reference implementations and finite-difference checking.
//!
//! Everything here exists to verify the engine, not to run it: the forward
//! reference is straight-line nested-loop code sharing nothing with the
//! im2col/GEMM/tape path, and the gradient checks differentiate through
//! tape replay rather than the analytic backward rules. No production code
//! path calls into this module.

use crate::layers::{LayerSpec, LayerState, BN_EPS};
use crate::model::{ModelSpec, ModelState};
use crate::rng::{permutation, SplitMix64};
use crate::tape::{NodeId, Op, Tape};
use crate::tensor::{Scalar, Tensor};

/// Step for the central finite differences (64-bit mode).
pub const FD_STEP: f64 = 1e-4;
/// Relative-error bound every primitive must meet.
pub const FD_TOLERANCE: f64 = 1e-5;

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite difference of the seed w.r.t. one leaf, step `h`,
/// computed entirely by tape replay.
pub fn central_fd_grad<T: Scalar>(
    tape: &Tape<T>,
    seed: NodeId,
    leaf: NodeId,
    h: f64,
) -> Tensor<T> {
    let base = tape.value(leaf).clone();
    let step = T::from_f64(h);
    let two_h = T::from_f64(2.0 * h);
    let mut out = Tensor::zeros(base.shape().to_vec());
    for e in 0..base.numel() {
        let mut plus = base.clone();
        plus.data_mut()[e] += step;
        let f_plus = tape
            .replay_with_override(leaf, plus)
            .expect("fd replay")
            .value(seed)
            .item();
        let mut minus = base.clone();
        minus.data_mut()[e] -= step;
        let f_minus = tape
            .replay_with_override(leaf, minus)
            .expect("fd replay")
            .value(seed)
            .item();
        out.data_mut()[e] = (f_plus - f_minus) / two_h;
    }
    out
}

/// Worst relative error between analytic and finite-difference gradients
/// over the given leaves.
pub fn max_grad_err<T: Scalar>(tape: &Tape<T>, seed: NodeId, leaves: &[NodeId], h: f64) -> f64 {
    let grads = tape.backward(seed).expect("backward");
    let mut worst = 0.0f64;
    for &leaf in leaves {
        let analytic = grads.get(leaf);
        let fd = central_fd_grad(tape, seed, leaf, h);
        for (&a, &f) in analytic.data().iter().zip(fd.data()) {
            worst = worst.max(rel_err(a.to_f64(), f.to_f64()));
        }
    }
    worst
}

/// One line of the gradient suite: worst relative error for a primitive
/// over all its instances.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub primitive: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl FdReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < FD_TOLERANCE
    }
}

fn uniform_leaf(tape: &mut Tape<f64>, shape: Vec<usize>, lo: f64, hi: f64, rng: &mut SplitMix64) -> NodeId {
    tape.leaf(Tensor::rand_uniform(shape, lo, hi, rng))
}

/// Reduce a tensor node to a scalar through random positive weights, so
/// gradient checks see non-degenerate gradients everywhere.
fn weighted_seed(tape: &mut Tape<f64>, y: NodeId, rng: &mut SplitMix64) -> NodeId {
    let shape = tape.value(y).shape().to_vec();
    let r = tape.leaf(Tensor::rand_uniform(shape, 0.25, 1.25, rng));
    let m = tape.apply(Op::Mul { a: y, b: r }).expect("mul");
    tape.apply(Op::SumAll { x: m }).expect("sum")
}

/// Values with pairwise gaps far larger than the FD step, so max-pool
/// argmax choices cannot flip under perturbation.
fn well_separated_leaf(tape: &mut Tape<f64>, shape: Vec<usize>, rng: &mut SplitMix64) -> NodeId {
    let numel: usize = shape.iter().product();
    let perm = permutation(rng, numel);
    let data: Vec<f64> = perm.iter().map(|&p| 0.01 * p as f64 - 0.005 * numel as f64).collect();
    tape.leaf(Tensor::new(shape, data).expect("leaf"))
}

/// Signed values bounded away from zero, so ReLU kinks are never crossed
/// by the FD step.
fn off_kink_leaf(tape: &mut Tape<f64>, shape: Vec<usize>, rng: &mut SplitMix64) -> NodeId {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            sign * rng.uniform(0.1, 1.0)
        })
        .collect();
    tape.leaf(Tensor::new(shape, data).expect("leaf"))
}

/// Run the finite-difference suite: every layer primitive, `instances`
/// seeded random cases each, central differences at [`FD_STEP`] in 64-bit.
pub fn run_gradient_suite(instances: usize) -> Vec<FdReport> {
    type Builder = fn(&mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>);

    fn conv_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let stride = 1 + (rng.bounded(2) as usize);
        let pad = rng.bounded(2) as usize;
        let x = uniform_leaf(&mut tape, vec![2, 2, 5, 5], -1.0, 1.0, rng);
        let w = uniform_leaf(&mut tape, vec![3, 2, 3, 3], -1.0, 1.0, rng);
        let b = uniform_leaf(&mut tape, vec![3], -0.5, 0.5, rng);
        let y = tape.apply(Op::Conv2d { x, w, b, stride, pad }).unwrap();
        let s = weighted_seed(&mut tape, y, rng);
        (tape, s, vec![x, w, b])
    }

    fn bn_train_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let x = uniform_leaf(&mut tape, vec![3, 2, 2, 2], -1.0, 1.0, rng);
        let gamma = uniform_leaf(&mut tape, vec![2], 0.5, 1.5, rng);
        let beta = uniform_leaf(&mut tape, vec![2], -0.5, 0.5, rng);
        let y = tape
            .apply(Op::BatchNormTrain { x, gamma, beta, eps: BN_EPS })
            .unwrap();
        let s = weighted_seed(&mut tape, y, rng);
        (tape, s, vec![x, gamma, beta])
    }

    fn bn_eval_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let x = uniform_leaf(&mut tape, vec![3, 2, 2, 2], -1.0, 1.0, rng);
        let gamma = uniform_leaf(&mut tape, vec![2], 0.5, 1.5, rng);
        let beta = uniform_leaf(&mut tape, vec![2], -0.5, 0.5, rng);
        let run_mean = Tensor::rand_uniform(vec![2], -0.5, 0.5, rng);
        let run_var = Tensor::rand_uniform(vec![2], 0.5, 1.5, rng);
        let y = tape
            .apply(Op::BatchNormEval { x, gamma, beta, run_mean, run_var, eps: BN_EPS })
            .unwrap();
        let s = weighted_seed(&mut tape, y, rng);
        (tape, s, vec![x, gamma, beta])
    }

    fn relu_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let x = off_kink_leaf(&mut tape, vec![2, 3, 2, 2], rng);
        let y = tape.apply(Op::Relu { x }).unwrap();
        let s = weighted_seed(&mut tape, y, rng);
        (tape, s, vec![x])
    }

    fn maxpool_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let x = well_separated_leaf(&mut tape, vec![2, 2, 4, 4], rng);
        let y = tape.apply(Op::MaxPool { x, kernel: 2, stride: 2 }).unwrap();
        let s = weighted_seed(&mut tape, y, rng);
        (tape, s, vec![x])
    }

    fn avgpool_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let x = uniform_leaf(&mut tape, vec![2, 2, 4, 4], -1.0, 1.0, rng);
        let y = tape.apply(Op::AvgPool { x, kernel: 2, stride: 2 }).unwrap();
        let s = weighted_seed(&mut tape, y, rng);
        (tape, s, vec![x])
    }

    fn gap_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let x = uniform_leaf(&mut tape, vec![2, 3, 3, 3], -1.0, 1.0, rng);
        let y = tape.apply(Op::GlobalAvgPool { x }).unwrap();
        let s = weighted_seed(&mut tape, y, rng);
        (tape, s, vec![x])
    }

    fn linear_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let x = uniform_leaf(&mut tape, vec![3, 4], -1.0, 1.0, rng);
        let w = uniform_leaf(&mut tape, vec![5, 4], -1.0, 1.0, rng);
        let b = uniform_leaf(&mut tape, vec![5], -0.5, 0.5, rng);
        let y = tape.apply(Op::Linear { x, w, b }).unwrap();
        let s = weighted_seed(&mut tape, y, rng);
        (tape, s, vec![x, w, b])
    }

    fn upsample_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let x = uniform_leaf(&mut tape, vec![1, 2, 3, 3], -1.0, 1.0, rng);
        let y = tape.apply(Op::Upsample { x, factor: 2 }).unwrap();
        let s = weighted_seed(&mut tape, y, rng);
        (tape, s, vec![x])
    }

    fn add_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let a = uniform_leaf(&mut tape, vec![2, 3, 2, 2], -1.0, 1.0, rng);
        let b = uniform_leaf(&mut tape, vec![2, 3, 2, 2], -1.0, 1.0, rng);
        let y = tape.apply(Op::Add { a, b }).unwrap();
        let s = weighted_seed(&mut tape, y, rng);
        (tape, s, vec![a, b])
    }

    fn mul_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let a = uniform_leaf(&mut tape, vec![2, 5], -1.0, 1.0, rng);
        let b = uniform_leaf(&mut tape, vec![2, 5], -1.0, 1.0, rng);
        let y = tape.apply(Op::Mul { a, b }).unwrap();
        let s = weighted_seed(&mut tape, y, rng);
        (tape, s, vec![a, b])
    }

    fn flatten_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let x = uniform_leaf(&mut tape, vec![2, 2, 2, 2], -1.0, 1.0, rng);
        let y = tape.apply(Op::Flatten { x }).unwrap();
        let s = weighted_seed(&mut tape, y, rng);
        (tape, s, vec![x])
    }

    fn mask_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let x = uniform_leaf(&mut tape, vec![2, 4, 2, 2], -1.0, 1.0, rng);
        let mut keep: Vec<bool> = (0..4).map(|_| rng.next_f64() < 0.5).collect();
        keep[0] = true;
        let y = tape.apply(Op::ChannelMask { x, keep }).unwrap();
        let s = weighted_seed(&mut tape, y, rng);
        (tape, s, vec![x])
    }

    fn select_logit_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let x = uniform_leaf(&mut tape, vec![3, 4], -1.0, 1.0, rng);
        let s = tape
            .apply(Op::SelectLogit {
                x,
                sample: rng.bounded(3) as usize,
                class: rng.bounded(4) as usize,
            })
            .unwrap();
        (tape, s, vec![x])
    }

    fn pixel_sum_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let x = uniform_leaf(&mut tape, vec![2, 3, 4, 4], -1.0, 1.0, rng);
        let mut pixels = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                if rng.next_f64() < 0.4 {
                    pixels.push((i, j));
                }
            }
        }
        pixels.push((0, 0));
        let s = tape
            .apply(Op::MaskedPixelSum {
                x,
                sample: rng.bounded(2) as usize,
                class: rng.bounded(3) as usize,
                pixels,
            })
            .unwrap();
        (tape, s, vec![x])
    }

    fn softmax_ce_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let x = uniform_leaf(&mut tape, vec![4, 5], -2.0, 2.0, rng);
        let labels: Vec<usize> = (0..4).map(|_| rng.bounded(5) as usize).collect();
        let s = tape.apply(Op::SoftmaxCrossEntropy { x, labels }).unwrap();
        (tape, s, vec![x])
    }

    fn pixel_ce_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let x = uniform_leaf(&mut tape, vec![2, 3, 3, 3], -2.0, 2.0, rng);
        let mask: Vec<u8> = (0..2 * 3 * 3).map(|_| rng.bounded(3) as u8).collect();
        let s = tape.apply(Op::PixelCrossEntropy { x, mask }).unwrap();
        (tape, s, vec![x])
    }

    fn sum_all_case(rng: &mut SplitMix64) -> (Tape<f64>, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let x = uniform_leaf(&mut tape, vec![2, 3, 2, 2], -1.0, 1.0, rng);
        let s = tape.apply(Op::SumAll { x }).unwrap();
        (tape, s, vec![x])
    }

    let builders: Vec<(&'static str, Builder)> = vec![
        ("conv2d", conv_case),
        ("batchnorm2d(train)", bn_train_case),
        ("batchnorm2d(eval)", bn_eval_case),
        ("relu", relu_case),
        ("maxpool", maxpool_case),
        ("avgpool", avgpool_case),
        ("global-avg-pool", gap_case),
        ("linear", linear_case),
        ("upsample-nearest", upsample_case),
        ("add-skip", add_case),
        ("mul", mul_case),
        ("flatten", flatten_case),
        ("channel-mask", mask_case),
        ("select-logit", select_logit_case),
        ("masked-pixel-sum", pixel_sum_case),
        ("softmax-cross-entropy", softmax_ce_case),
        ("pixel-cross-entropy", pixel_ce_case),
        ("sum-all", sum_all_case),
    ];

    builders
        .into_iter()
        .enumerate()
        .map(|(tag, (name, build))| {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let mut rng = SplitMix64::new((tag as u64 + 1) * 10_000 + i as u64);
                let (tape, seed, leaves) = build(&mut rng);
                worst = worst.max(max_grad_err(&tape, seed, &leaves, FD_STEP));
            }
            FdReport {
                primitive: name,
                instances,
                max_rel_err: worst,
            }
        })
        .collect()
}

/// Eval-mode forward by direct nested loops. Shares only the tensor
/// container with the engine; convolution, pooling and the linear layer
/// are written element by element.
pub fn naive_forward<T: Scalar>(spec: &ModelSpec, state: &ModelState<T>, input: &Tensor<T>) -> Tensor<T> {
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(spec.layers.len());
    let mut cur = input.clone();
    for (id, layer) in spec.layers.iter().enumerate() {
        cur = match (layer, &state.layers[id]) {
            (LayerSpec::Conv2d { stride, pad, .. }, LayerState::Conv { weight, bias }) => {
                naive_conv(&cur, weight, bias, *stride, *pad)
            }
            (
                LayerSpec::BatchNorm2d { .. },
                LayerState::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
            ) => {
                let s = cur.shape().to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut y = cur.clone();
                for img in 0..n {
                    for ch in 0..c {
                        let inv = T::one()
                            / (running_var.data()[ch] + T::from_f64(BN_EPS)).sqrt();
                        let base = (img * c + ch) * hw;
                        for v in &mut y.data_mut()[base..base + hw] {
                            *v = gamma.data()[ch] * (*v - running_mean.data()[ch]) * inv
                                + beta.data()[ch];
                        }
                    }
                }
                y
            }
            (LayerSpec::Relu, _) => cur.map(|v| if v > T::zero() { v } else { T::zero() }),
            (LayerSpec::MaxPool { kernel, stride }, _) => naive_pool(&cur, *kernel, *stride, true),
            (LayerSpec::AvgPool { kernel, stride }, _) => naive_pool(&cur, *kernel, *stride, false),
            (LayerSpec::GlobalAvgPool, _) => {
                let s = cur.shape().to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut y = Tensor::zeros(vec![n, c]);
                for img in 0..n {
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for i in 0..hw {
                            acc += cur.data()[(img * c + ch) * hw + i];
                        }
                        y.data_mut()[img * c + ch] = acc / T::from_f64(hw as f64);
                    }
                }
                y
            }
            (LayerSpec::Linear { .. }, LayerState::Linear { weight, bias }) => {
                let (n, in_f) = (cur.shape()[0], cur.shape()[1]);
                let out_f = weight.shape()[0];
                let mut y = Tensor::zeros(vec![n, out_f]);
                for row in 0..n {
                    for o in 0..out_f {
                        let mut acc = bias.data()[o];
                        for i in 0..in_f {
                            acc += weight.data()[o * in_f + i] * cur.data()[row * in_f + i];
                        }
                        y.data_mut()[row * out_f + o] = acc;
                    }
                }
                y
            }
            (LayerSpec::UpsampleNearest { factor }, _) => {
                let s = cur.shape().to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut y = Tensor::zeros(vec![n, c, h * factor, w * factor]);
                for img in 0..n {
                    for ch in 0..c {
                        for oi in 0..h * factor {
                            for oj in 0..w * factor {
                                let v = cur.at4(img, ch, oi / factor, oj / factor);
                                let idx = y.idx4(img, ch, oi, oj);
                                y.data_mut()[idx] = v;
                            }
                        }
                    }
                }
                y
            }
            (LayerSpec::AddSkip { source }, _) => {
                let mut y = cur.clone();
                y.add_assign(&outputs[*source]);
                y
            }
            (LayerSpec::Flatten, _) => {
                let n = cur.shape()[0];
                let rest: usize = cur.shape()[1..].iter().product();
                cur.reshaped(vec![n, rest]).expect("flatten")
            }
            _ => panic!("naive_forward: state/spec mismatch at layer {id}"),
        };
        outputs.push(cur.clone());
    }
    cur
}

fn naive_conv<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut y = Tensor::zeros(vec![n, c_out, ho, wo]);
    for img in 0..n {
        for o in 0..c_out {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = b.data()[o];
                    for ci in 0..c_in {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if ii >= 0 && ii < h as isize && jj >= 0 && jj < wd as isize {
                                    acc += x.at4(img, ci, ii as usize, jj as usize)
                                        * w.at4(o, ci, ki, kj);
                                }
                            }
                        }
                    }
                    let idx = y.idx4(img, o, oi, oj);
                    y.data_mut()[idx] = acc;
                }
            }
        }
    }
    y
}

fn naive_pool<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize, take_max: bool) -> Tensor<T> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let mut y = Tensor::zeros(vec![n, c, ho, wo]);
    for img in 0..n {
        for ch in 0..c {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut agg = if take_max { T::neg_infinity() } else { T::zero() };
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let v = x.at4(img, ch, oi * stride + ki, oj * stride + kj);
                            if take_max {
                                if v > agg {
                                    agg = v;
                                }
                            } else {
                                agg += v;
                            }
                        }
                    }
                    if !take_max {
                        agg = agg / T::from_f64((kernel * kernel) as f64);
                    }
                    let idx = y.idx4(img, ch, oi, oj);
                    y.data_mut()[idx] = agg;
                }
            }
        }
    }
    y
}


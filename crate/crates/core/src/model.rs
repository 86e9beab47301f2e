//! Model description, state and tape-backed execution.
//!
//! `forward` records the whole computation on a [`Tape`], optionally
//! capturing post-activation feature maps of chosen convolutions (the
//! capture point is after the conv's trailing BatchNorm/ReLU run, which is
//! the feature map CAM methods and channel masking both operate on).

use std::collections::BTreeMap;

use crate::error::{FgpError, Result};
use crate::kernels::norm::batch_stats;
use crate::layers::{init_layer_state, LayerSpec, LayerState, BN_EPS, BN_MOMENTUM};
use crate::rng::{stream, StreamTag};
use crate::tape::{NodeId, Op, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Train,
    Eval,
}

/// Ordered layer list plus the invariants that make it a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    /// Input shape without the batch axis: [C,H,W].
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub task: TaskKind,
    /// Conv layer ids eligible for pruning.
    pub prunable: Vec<usize>,
}

impl ModelSpec {
    /// Check channel chaining, skip-source ordering and the prunable list.
    pub fn validate(&self) -> Result<()> {
        self.layer_shapes()?;
        for &id in &self.prunable {
            match self.layers.get(id) {
                Some(LayerSpec::Conv2d { .. }) => {}
                Some(other) => {
                    return Err(FgpError::InvalidModel(format!(
                        "prunable layer {id} is {}, not conv2d",
                        other.kind_name()
                    )))
                }
                None => return Err(FgpError::UnknownLayer { layer: id }),
            }
        }
        Ok(())
    }

    /// Per-layer output shapes (batch axis omitted).
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (id, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::AddSkip { source } = layer {
                if *source >= id {
                    return Err(FgpError::InvalidModel(format!(
                        "add-skip at layer {id} references source {source} that does not precede it"
                    )));
                }
            }
            cur = layer.output_shape(id, &cur, &shapes)?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .layer_shapes()?
            .last()
            .cloned()
            .unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn conv_ids(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv2d { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn conv_out_channels(&self, layer: usize) -> Result<usize> {
        match self.layers.get(layer) {
            Some(LayerSpec::Conv2d { out_ch, .. }) => Ok(*out_ch),
            Some(_) | None => Err(FgpError::UnknownLayer { layer }),
        }
    }

    /// Where captures and channel masks attach for a conv layer: after the
    /// run of per-channel BatchNorm/ReLU layers that follows it.
    pub fn activation_point(&self, conv_id: usize) -> Result<usize> {
        match self.layers.get(conv_id) {
            Some(LayerSpec::Conv2d { .. }) => {}
            _ => return Err(FgpError::UnknownLayer { layer: conv_id }),
        }
        let mut point = conv_id;
        while let Some(next) = self.layers.get(point + 1) {
            match next {
                LayerSpec::BatchNorm2d { .. } | LayerSpec::Relu => point += 1,
                _ => break,
            }
        }
        Ok(point)
    }

    /// Fresh state with seeded He-normal init, layer draws in order.
    pub fn init_state<T: Scalar>(&self, seed: u64) -> ModelState<T> {
        let mut rng = stream(seed, StreamTag::Init, 0);
        ModelState {
            layers: self
                .layers
                .iter()
                .map(|l| init_layer_state(l, &mut rng))
                .collect(),
        }
    }

    /// Shape-check a state against this spec.
    pub fn check_state<T: Scalar>(&self, state: &ModelState<T>) -> Result<()> {
        if state.layers.len() != self.layers.len() {
            return Err(FgpError::InvalidModel(format!(
                "state has {} layers, spec has {}",
                state.layers.len(),
                self.layers.len()
            )));
        }
        for (id, (spec, st)) in self.layers.iter().zip(&state.layers).enumerate() {
            let ok = match (spec, st) {
                (LayerSpec::Conv2d { in_ch, out_ch, kernel, .. }, LayerState::Conv { weight, bias }) => {
                    weight.shape() == [*out_ch, *in_ch, *kernel, *kernel] && bias.shape() == [*out_ch]
                }
                (LayerSpec::BatchNorm2d { ch }, LayerState::BatchNorm { gamma, beta, running_mean, running_var }) => {
                    gamma.shape() == [*ch]
                        && beta.shape() == [*ch]
                        && running_mean.shape() == [*ch]
                        && running_var.shape() == [*ch]
                }
                (LayerSpec::Linear { in_features, out_features }, LayerState::Linear { weight, bias }) => {
                    weight.shape() == [*out_features, *in_features] && bias.shape() == [*out_features]
                }
                (
                    LayerSpec::Relu
                    | LayerSpec::MaxPool { .. }
                    | LayerSpec::AvgPool { .. }
                    | LayerSpec::GlobalAvgPool
                    | LayerSpec::UpsampleNearest { .. }
                    | LayerSpec::AddSkip { .. }
                    | LayerSpec::Flatten,
                    LayerState::Stateless,
                ) => true,
                _ => false,
            };
            if !ok {
                return Err(FgpError::InvalidModel(format!(
                    "state/spec mismatch at layer {id} ({})",
                    spec.kind_name()
                )));
            }
        }
        Ok(())
    }
}

/// Learned weights aligned with a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub layers: Vec<LayerState<T>>,
}

impl<T: Scalar> ModelState<T> {
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }
}

/// A captured interior feature map: the post-activation output of a conv
/// layer, with its tape node for gradient lookup after backward.
#[derive(Debug, Clone)]
pub struct Capture {
    pub layer: usize,
    pub node: NodeId,
}

/// The result of one recorded forward pass.
pub struct Forward<T> {
    pub tape: Tape<T>,
    pub input_node: NodeId,
    pub output: NodeId,
    /// Output node of every layer (after any channel mask applied there).
    pub layer_nodes: Vec<NodeId>,
    /// Per layer, leaf node ids of its learnable params, aligned with
    /// `LayerState::params()` order.
    pub param_nodes: Vec<Vec<NodeId>>,
    pub captures: Vec<Capture>,
}

impl<T: Scalar> Forward<T> {
    pub fn output_value(&self) -> &Tensor<T> {
        self.tape.value(self.output)
    }

    pub fn capture_for(&self, layer: usize) -> Option<&Capture> {
        self.captures.iter().find(|c| c.layer == layer)
    }

    /// Scalar seed: one pre-softmax logit.
    pub fn logit(&mut self, sample: usize, class: usize) -> Result<NodeId> {
        let shape = self.tape.value(self.output).shape().to_vec();
        if shape.len() != 2 || sample >= shape[0] || class >= shape[1] {
            return Err(FgpError::InvalidArg(format!(
                "logit({sample},{class}) out of range for output {shape:?}"
            )));
        }
        self.tape.apply(Op::SelectLogit {
            x: self.output,
            sample,
            class,
        })
    }

    /// Scalar seed: sum of one class plane over a pixel set.
    pub fn pixel_sum(
        &mut self,
        sample: usize,
        class: usize,
        pixels: Vec<(usize, usize)>,
    ) -> Result<NodeId> {
        let shape = self.tape.value(self.output).shape().to_vec();
        if shape.len() != 4 || sample >= shape[0] || class >= shape[1] {
            return Err(FgpError::InvalidArg(format!(
                "pixel_sum({sample},{class}) out of range for output {shape:?}"
            )));
        }
        if pixels.is_empty() {
            return Err(FgpError::InvalidArg("pixel_sum with empty pixel set".into()));
        }
        self.tape.apply(Op::MaskedPixelSum {
            x: self.output,
            sample,
            class,
            pixels,
        })
    }

    /// Scalar seed: mean cross-entropy against class labels.
    pub fn loss_ce(&mut self, labels: &[usize]) -> Result<NodeId> {
        let shape = self.tape.value(self.output).shape().to_vec();
        if shape.len() != 2 || labels.len() != shape[0] {
            return Err(FgpError::InvalidArg(format!(
                "loss_ce: output {shape:?} vs {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
            return Err(FgpError::InvalidArg(format!(
                "label {bad} out of range for {} classes",
                shape[1]
            )));
        }
        self.tape.apply(Op::SoftmaxCrossEntropy {
            x: self.output,
            labels: labels.to_vec(),
        })
    }

    /// Scalar seed: mean per-pixel cross-entropy against a mask.
    pub fn loss_pixel_ce(&mut self, mask: &[u8]) -> Result<NodeId> {
        let shape = self.tape.value(self.output).shape().to_vec();
        if shape.len() != 4 || mask.len() != shape[0] * shape[2] * shape[3] {
            return Err(FgpError::InvalidArg(format!(
                "loss_pixel_ce: output {shape:?} vs mask of {}",
                mask.len()
            )));
        }
        if let Some(&bad) = mask.iter().find(|&&l| (l as usize) >= shape[1]) {
            return Err(FgpError::InvalidArg(format!(
                "mask value {bad} out of range for {} classes",
                shape[1]
            )));
        }
        self.tape.apply(Op::PixelCrossEntropy {
            x: self.output,
            mask: mask.to_vec(),
        })
    }
}

/// Options for one forward pass.
#[derive(Default)]
pub struct ForwardOpts {
    pub mode: Option<ExecMode>,
    /// Conv layer ids whose post-activation maps to capture.
    pub capture: Vec<usize>,
    /// Per conv layer id, channels to keep (false entries are zeroed at the
    /// activation point).
    pub masks: BTreeMap<usize, Vec<bool>>,
}

/// Run the network, recording the tape. In train mode, BatchNorm running
/// statistics are folded with momentum [`BN_MOMENTUM`] as each BN layer
/// executes.
pub fn forward<T: Scalar>(
    spec: &ModelSpec,
    state: &mut ModelState<T>,
    input: &Tensor<T>,
    opts: &ForwardOpts,
) -> Result<Forward<T>> {
    let mode = opts.mode.unwrap_or(ExecMode::Eval);
    spec.check_state(state)?;
    let in_shape = input.shape();
    if in_shape.len() != spec.input_shape.len() + 1 || in_shape[1..] != spec.input_shape[..] {
        return Err(FgpError::ShapeMismatch {
            context: "model input".into(),
            expected: spec.input_shape.clone(),
            got: in_shape.to_vec(),
        });
    }
    input.check_finite("model input")?;

    // Resolve capture/mask attachment points up front.
    let mut capture_at: BTreeMap<usize, usize> = BTreeMap::new(); // point -> conv id
    for &conv in &opts.capture {
        capture_at.insert(spec.activation_point(conv)?, conv);
    }
    let mut mask_at: BTreeMap<usize, &Vec<bool>> = BTreeMap::new();
    for (&conv, keep) in &opts.masks {
        let expect = spec.conv_out_channels(conv)?;
        if keep.len() != expect {
            return Err(FgpError::InvalidArg(format!(
                "mask for layer {conv} has {} entries, conv has {expect} channels",
                keep.len()
            )));
        }
        mask_at.insert(spec.activation_point(conv)?, keep);
    }

    let mut tape = Tape::new();
    let input_node = tape.leaf(input.clone());
    let mut param_nodes: Vec<Vec<NodeId>> = Vec::with_capacity(spec.layers.len());
    let mut layer_nodes: Vec<NodeId> = Vec::with_capacity(spec.layers.len());
    let mut captures = Vec::new();
    let mut cur = input_node;

    for (id, layer) in spec.layers.iter().enumerate() {
        let mut p_nodes = Vec::new();
        cur = match (layer, &state.layers[id]) {
            (LayerSpec::Conv2d { stride, pad, .. }, LayerState::Conv { weight, bias }) => {
                let w = tape.leaf(weight.clone());
                let b = tape.leaf(bias.clone());
                p_nodes = vec![w, b];
                tape.apply(Op::Conv2d {
                    x: cur,
                    w,
                    b,
                    stride: *stride,
                    pad: *pad,
                })?
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
                let g = tape.leaf(gamma.clone());
                let b = tape.leaf(beta.clone());
                p_nodes = vec![g, b];
                match mode {
                    ExecMode::Train => {
                        // Fold batch statistics into the running estimates.
                        let (mean, var) = batch_stats(tape.value(cur));
                        let out = tape.apply(Op::BatchNormTrain {
                            x: cur,
                            gamma: g,
                            beta: b,
                            eps: BN_EPS,
                        })?;
                        let m = T::from_f64(BN_MOMENTUM);
                        let keep = T::one() - m;
                        if let LayerState::BatchNorm {
                            running_mean,
                            running_var,
                            ..
                        } = &mut state.layers[id]
                        {
                            for (rm, &bm) in running_mean.data_mut().iter_mut().zip(&mean) {
                                *rm = keep * *rm + m * bm;
                            }
                            for (rv, &bv) in running_var.data_mut().iter_mut().zip(&var) {
                                *rv = keep * *rv + m * bv;
                            }
                        }
                        out
                    }
                    ExecMode::Eval => tape.apply(Op::BatchNormEval {
                        x: cur,
                        gamma: g,
                        beta: b,
                        run_mean: running_mean.clone(),
                        run_var: running_var.clone(),
                        eps: BN_EPS,
                    })?,
                }
            }
            (LayerSpec::Relu, _) => tape.apply(Op::Relu { x: cur })?,
            (LayerSpec::MaxPool { kernel, stride }, _) => tape.apply(Op::MaxPool {
                x: cur,
                kernel: *kernel,
                stride: *stride,
            })?,
            (LayerSpec::AvgPool { kernel, stride }, _) => tape.apply(Op::AvgPool {
                x: cur,
                kernel: *kernel,
                stride: *stride,
            })?,
            (LayerSpec::GlobalAvgPool, _) => tape.apply(Op::GlobalAvgPool { x: cur })?,
            (LayerSpec::Linear { .. }, LayerState::Linear { weight, bias }) => {
                let w = tape.leaf(weight.clone());
                let b = tape.leaf(bias.clone());
                p_nodes = vec![w, b];
                tape.apply(Op::Linear { x: cur, w, b })?
            }
            (LayerSpec::UpsampleNearest { factor }, _) => tape.apply(Op::Upsample {
                x: cur,
                factor: *factor,
            })?,
            (LayerSpec::AddSkip { source }, _) => tape.apply(Op::Add {
                a: cur,
                b: layer_nodes[*source],
            })?,
            (LayerSpec::Flatten, _) => tape.apply(Op::Flatten { x: cur })?,
            (spec_l, _) => {
                return Err(FgpError::InvalidModel(format!(
                    "layer {id}: state does not match {}",
                    spec_l.kind_name()
                )))
            }
        };

        if let Some(keep) = mask_at.get(&id) {
            cur = tape.apply(Op::ChannelMask {
                x: cur,
                keep: (*keep).clone(),
            })?;
        }
        if let Some(&conv) = capture_at.get(&id) {
            captures.push(Capture { layer: conv, node: cur });
        }
        layer_nodes.push(cur);
        param_nodes.push(p_nodes);
    }

    Ok(Forward {
        tape,
        input_node,
        output: cur,
        layer_nodes,
        param_nodes,
        captures,
    })
}

/// Eval-mode forward that zeroes the listed channels of each conv at its
/// activation point: the oracle that rebuilt pruned models are checked
/// against.
pub fn mask_forward<T: Scalar>(
    spec: &ModelSpec,
    state: &ModelState<T>,
    input: &Tensor<T>,
    removed: &BTreeMap<usize, Vec<usize>>,
) -> Result<Tensor<T>> {
    let mut masks = BTreeMap::new();
    for (&conv, gone) in removed {
        let c = spec.conv_out_channels(conv)?;
        let mut keep = vec![true; c];
        for &ch in gone {
            if ch >= c {
                return Err(FgpError::InvalidArg(format!(
                    "removed channel {ch} out of range for layer {conv} ({c} channels)"
                )));
            }
            keep[ch] = false;
        }
        masks.insert(conv, keep);
    }
    let mut state_copy = state.clone();
    let fwd = forward(
        spec,
        &mut state_copy,
        input,
        &ForwardOpts {
            mode: Some(ExecMode::Eval),
            capture: vec![],
            masks,
        },
    )?;
    Ok(fwd.output_value().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn one_conv_spec() -> ModelSpec {
        ModelSpec {
            layers: vec![LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 1,
                kernel: 1,
                stride: 1,
                pad: 0,
            }],
            input_shape: vec![1, 3, 3],
            class_count: 1,
            task: TaskKind::Classification,
            prunable: vec![0],
        }
    }

    #[test]
    fn identity_network_passes_input_through() {
        let spec = ModelSpec {
            layers: vec![],
            input_shape: vec![1, 2, 2],
            class_count: 1,
            task: TaskKind::Classification,
            prunable: vec![],
        };
        let mut state = spec.init_state::<f64>(0);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fwd = forward(&spec, &mut state, &x, &ForwardOpts::default()).unwrap();
        assert_eq!(fwd.output_value().data(), x.data());
        assert!(fwd.captures.is_empty());
    }

    #[test]
    fn one_by_one_conv_scales_everywhere() {
        let spec = one_conv_spec();
        let mut state = ModelState {
            layers: vec![LayerState::Conv {
                weight: Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap(),
                bias: Tensor::zeros(vec![1]),
            }],
        };
        let x = Tensor::<f64>::full(vec![1, 1, 3, 3], 3.0);
        let fwd = forward(&spec, &mut state, &x, &ForwardOpts::default()).unwrap();
        for &v in fwd.output_value().data() {
            assert!((v - 7.5).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_input_shape_is_error() {
        let spec = one_conv_spec();
        let mut state = spec.init_state::<f64>(0);
        let x = Tensor::<f64>::zeros(vec![1, 2, 3, 3]);
        assert!(forward(&spec, &mut state, &x, &ForwardOpts::default()).is_err());
    }

    #[test]
    fn unknown_capture_layer_is_error() {
        let spec = one_conv_spec();
        let mut state = spec.init_state::<f64>(0);
        let x = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        let opts = ForwardOpts {
            capture: vec![5],
            ..Default::default()
        };
        assert!(matches!(
            forward(&spec, &mut state, &x, &opts),
            Err(FgpError::UnknownLayer { layer: 5 })
        ));
    }

    #[test]
    fn activation_point_skips_bn_relu() {
        let spec = ModelSpec {
            layers: vec![
                LayerSpec::Conv2d {
                    in_ch: 1,
                    out_ch: 4,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::BatchNorm2d { ch: 4 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
            ],
            input_shape: vec![1, 8, 8],
            class_count: 2,
            task: TaskKind::Classification,
            prunable: vec![0],
        };
        assert_eq!(spec.activation_point(0).unwrap(), 2);
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let spec = ModelSpec {
            layers: vec![
                LayerSpec::Conv2d {
                    in_ch: 1,
                    out_ch: 2,
                    kernel: 1,
                    stride: 1,
                    pad: 0,
                },
                LayerSpec::BatchNorm2d { ch: 2 },
            ],
            input_shape: vec![1, 2, 2],
            class_count: 2,
            task: TaskKind::Classification,
            prunable: vec![0],
        };
        let mut state = spec.init_state::<f64>(3);
        let before = state.layers[1].clone();
        let mut rng = SplitMix64::new(7);
        let x = Tensor::rand_uniform(vec![4, 1, 2, 2], -1.0, 1.0, &mut rng);
        let opts = ForwardOpts {
            mode: Some(ExecMode::Train),
            ..Default::default()
        };
        forward(&spec, &mut state, &x, &opts).unwrap();
        assert_ne!(before, state.layers[1]);
    }
}

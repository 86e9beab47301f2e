//! Layer descriptions and their learned state.

use crate::error::{FgpError, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Architecture-level description of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm2d {
        ch: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    UpsampleNearest {
        factor: usize,
    },
    /// Adds the output of `source` (an earlier layer id) to the previous
    /// layer's output. Channel counts must match.
    AddSkip {
        source: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm2d { .. } => "batchnorm2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::GlobalAvgPool => "global-avg-pool",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::UpsampleNearest { .. } => "upsample-nearest",
            LayerSpec::AddSkip { .. } => "add-skip",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Output shape (without the batch axis) given the input shape and the
    /// shapes of all earlier layer outputs (for skip sources).
    pub fn output_shape(
        &self,
        layer_id: usize,
        input: &[usize],
        earlier: &[Vec<usize>],
    ) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(FgpError::InvalidModel(format!("layer {layer_id}: {msg}")));
        match self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                if input.len() != 3 || input[0] != *in_ch {
                    return bad(format!("conv2d expects [{in_ch},H,W], got {input:?}"));
                }
                if *kernel == 0 || *stride == 0 || *out_ch == 0 {
                    return bad("conv2d hyperparameters must be positive".into());
                }
                let h = input[1] + 2 * pad;
                let w = input[2] + 2 * pad;
                if h < *kernel || w < *kernel {
                    return bad(format!("conv2d kernel {kernel} exceeds padded input {input:?}"));
                }
                Ok(vec![
                    *out_ch,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerSpec::BatchNorm2d { ch } => {
                if input.len() != 3 || input[0] != *ch {
                    return bad(format!("batchnorm2d expects [{ch},H,W], got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { kernel, stride } | LayerSpec::AvgPool { kernel, stride } => {
                if input.len() != 3 {
                    return bad(format!("pool expects [C,H,W], got {input:?}"));
                }
                if input[1] < *kernel || input[2] < *kernel {
                    return bad(format!("pool window {kernel} exceeds input {input:?}"));
                }
                Ok(vec![
                    input[0],
                    (input[1] - kernel) / stride + 1,
                    (input[2] - kernel) / stride + 1,
                ])
            }
            LayerSpec::GlobalAvgPool => {
                if input.len() != 3 {
                    return bad(format!("global-avg-pool expects [C,H,W], got {input:?}"));
                }
                Ok(vec![input[0]])
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let got: usize = input.iter().product();
                if input.len() != 1 || got != *in_features {
                    return bad(format!("linear expects [{in_features}], got {input:?}"));
                }
                Ok(vec![*out_features])
            }
            LayerSpec::UpsampleNearest { factor } => {
                if input.len() != 3 || *factor == 0 {
                    return bad(format!("upsample expects [C,H,W], got {input:?}"));
                }
                Ok(vec![input[0], input[1] * factor, input[2] * factor])
            }
            LayerSpec::AddSkip { source } => {
                let src = earlier.get(*source).ok_or_else(|| {
                    FgpError::InvalidModel(format!(
                        "layer {layer_id}: add-skip source {source} does not precede it"
                    ))
                })?;
                if src != input {
                    return Err(FgpError::ShapeMismatch {
                        context: format!("add-skip at layer {layer_id}"),
                        expected: input.to_vec(),
                        got: src.clone(),
                    });
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Learned parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerState<T> {
    Conv {
        weight: Tensor<T>, // [OutC, InC, K, K]
        bias: Tensor<T>,   // [OutC]
    },
    BatchNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    },
    Linear {
        weight: Tensor<T>, // [Out, In]
        bias: Tensor<T>,
    },
    Stateless,
}

impl<T: Scalar> LayerState<T> {
    /// Learnable tensors in fixed order (running stats excluded).
    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            LayerState::Conv { weight, bias } | LayerState::Linear { weight, bias } => {
                vec![weight, bias]
            }
            LayerState::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            LayerState::Stateless => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            LayerState::Conv { weight, bias } | LayerState::Linear { weight, bias } => {
                vec![weight, bias]
            }
            LayerState::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            LayerState::Stateless => vec![],
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerState<U> {
        match self {
            LayerState::Conv { weight, bias } => LayerState::Conv {
                weight: weight.cast(),
                bias: bias.cast(),
            },
            LayerState::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => LayerState::BatchNorm {
                gamma: gamma.cast(),
                beta: beta.cast(),
                running_mean: running_mean.cast(),
                running_var: running_var.cast(),
            },
            LayerState::Linear { weight, bias } => LayerState::Linear {
                weight: weight.cast(),
                bias: bias.cast(),
            },
            LayerState::Stateless => LayerState::Stateless,
        }
    }
}

/// He-normal initialisation for conv/linear weights; BN starts at identity.
/// Draw order is fixed (weights then bias, flat index ascending), so a
/// given rng stream always produces the same state.
pub fn init_layer_state<T: Scalar>(spec: &LayerSpec, rng: &mut SplitMix64) -> LayerState<T> {
    match spec {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            ..
        } => {
            let fan_in = in_ch * kernel * kernel;
            let std = (2.0 / fan_in as f64).sqrt();
            LayerState::Conv {
                weight: Tensor::randn(vec![*out_ch, *in_ch, *kernel, *kernel], std, rng),
                bias: Tensor::zeros(vec![*out_ch]),
            }
        }
        LayerSpec::BatchNorm2d { ch } => LayerState::BatchNorm {
            gamma: Tensor::full(vec![*ch], T::one()),
            beta: Tensor::zeros(vec![*ch]),
            running_mean: Tensor::zeros(vec![*ch]),
            running_var: Tensor::full(vec![*ch], T::one()),
        },
        LayerSpec::Linear {
            in_features,
            out_features,
        } => {
            let std = (2.0 / *in_features as f64).sqrt();
            LayerState::Linear {
                weight: Tensor::randn(vec![*out_features, *in_features], std, rng),
                bias: Tensor::zeros(vec![*out_features]),
            }
        }
        _ => LayerState::Stateless,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_shape_inference() {
        let spec = LayerSpec::Conv2d {
            in_ch: 3,
            out_ch: 8,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let out = spec.output_shape(0, &[3, 32, 32], &[]).unwrap();
        assert_eq!(out, vec![8, 32, 32]);
    }

    #[test]
    fn conv_rejects_wrong_channels() {
        let spec = LayerSpec::Conv2d {
            in_ch: 3,
            out_ch: 8,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        assert!(spec.output_shape(0, &[4, 32, 32], &[]).is_err());
    }

    #[test]
    fn add_skip_requires_matching_shape() {
        let spec = LayerSpec::AddSkip { source: 0 };
        let earlier = vec![vec![8, 16, 16]];
        assert!(spec.output_shape(1, &[8, 16, 16], &earlier).is_ok());
        let err = spec.output_shape(1, &[4, 16, 16], &earlier);
        assert!(err.is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let spec = LayerSpec::Conv2d {
            in_ch: 2,
            out_ch: 4,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let mut r1 = SplitMix64::new(9);
        let mut r2 = SplitMix64::new(9);
        let a: LayerState<f32> = init_layer_state(&spec, &mut r1);
        let b: LayerState<f32> = init_layer_state(&spec, &mut r2);
        assert_eq!(a, b);
    }
}

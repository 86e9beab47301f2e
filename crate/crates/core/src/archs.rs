//! Concrete architectures.
//!
//! Desk-scale trainable networks (vgg-lite / resnet-lite / seg-lite) plus a
//! full VGG-16 description that exists only for analytic FLOPs and
//! parameter accounting — it is never trained here.

use crate::error::{FgpError, Result};
use crate::layers::LayerSpec;
use crate::model::{ModelSpec, TaskKind};

/// Stacked conv-BN-ReLU-maxpool blocks with a GAP head and linear
/// classifier. One block per entry of `channels`; every conv is prunable.
pub fn build_vgg_lite(
    input_shape: &[usize],
    channels: &[usize],
    classes: usize,
) -> Result<ModelSpec> {
    if channels.len() < 2 {
        return Err(FgpError::InvalidArg(format!(
            "vgg-lite needs at least 2 conv blocks, got {}",
            channels.len()
        )));
    }
    if channels.iter().any(|&c| c == 0) || classes == 0 {
        return Err(FgpError::InvalidArg("channel counts and classes must be positive".into()));
    }
    let mut layers = Vec::new();
    let mut prunable = Vec::new();
    let mut in_ch = input_shape[0];
    for &c in channels {
        prunable.push(layers.len());
        layers.push(LayerSpec::Conv2d {
            in_ch,
            out_ch: c,
            kernel: 3,
            stride: 1,
            pad: 1,
        });
        layers.push(LayerSpec::BatchNorm2d { ch: c });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
        in_ch = c;
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Linear {
        in_features: in_ch,
        out_features: classes,
    });

    let spec = ModelSpec {
        layers,
        input_shape: input_shape.to_vec(),
        class_count: classes,
        task: TaskKind::Classification,
        prunable,
    };
    spec.validate()?;
    Ok(spec)
}

/// Residual stages with two-conv basic blocks. Only the first conv inside
/// each block is prunable: block outputs feed the skip addition, and
/// pruning addition-joined channels would force cross-block keep-set
/// unification.
pub fn build_resnet_lite(
    input_shape: &[usize],
    stage_channels: &[usize],
    blocks_per_stage: usize,
    classes: usize,
) -> Result<ModelSpec> {
    if stage_channels.is_empty() || blocks_per_stage == 0 {
        return Err(FgpError::InvalidArg(
            "resnet-lite needs at least one stage and one block per stage".into(),
        ));
    }
    if stage_channels.iter().any(|&c| c == 0) || classes == 0 {
        return Err(FgpError::InvalidArg("channel counts and classes must be positive".into()));
    }
    let mut layers = Vec::new();
    let mut prunable = Vec::new();

    // stem
    let mut in_ch = input_shape[0];
    layers.push(LayerSpec::Conv2d {
        in_ch,
        out_ch: stage_channels[0],
        kernel: 3,
        stride: 1,
        pad: 1,
    });
    layers.push(LayerSpec::BatchNorm2d { ch: stage_channels[0] });
    layers.push(LayerSpec::Relu);
    in_ch = stage_channels[0];

    for (stage, &c) in stage_channels.iter().enumerate() {
        if stage > 0 {
            layers.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
            layers.push(LayerSpec::Conv2d {
                in_ch,
                out_ch: c,
                kernel: 3,
                stride: 1,
                pad: 1,
            });
            layers.push(LayerSpec::BatchNorm2d { ch: c });
            layers.push(LayerSpec::Relu);
            in_ch = c;
        }
        for _ in 0..blocks_per_stage {
            let block_in = layers.len() - 1; // id of the layer feeding this block
            prunable.push(layers.len());
            layers.push(LayerSpec::Conv2d {
                in_ch: c,
                out_ch: c,
                kernel: 3,
                stride: 1,
                pad: 1,
            });
            layers.push(LayerSpec::BatchNorm2d { ch: c });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::Conv2d {
                in_ch: c,
                out_ch: c,
                kernel: 3,
                stride: 1,
                pad: 1,
            });
            layers.push(LayerSpec::BatchNorm2d { ch: c });
            layers.push(LayerSpec::AddSkip { source: block_in });
            layers.push(LayerSpec::Relu);
        }
    }

    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Linear {
        in_features: in_ch,
        out_features: classes,
    });

    let spec = ModelSpec {
        layers,
        input_shape: input_shape.to_vec(),
        class_count: classes,
        task: TaskKind::Classification,
        prunable,
    };
    spec.validate()?;
    Ok(spec)
}

/// Encoder-decoder for dense prediction: conv-BN-ReLU encoder blocks with a
/// max-pool after all but the last, mirrored by nearest-upsample decoder
/// blocks, closed by a 1x1 classifier conv emitting one logit map per
/// class. The classifier conv is never prunable.
pub fn build_seg_lite(
    input_shape: &[usize],
    channels: &[usize],
    classes: usize,
) -> Result<ModelSpec> {
    if channels.len() < 2 {
        return Err(FgpError::InvalidArg(format!(
            "seg-lite needs at least 2 encoder blocks, got {}",
            channels.len()
        )));
    }
    if channels.iter().any(|&c| c == 0) || classes < 2 {
        return Err(FgpError::InvalidArg(
            "channel counts must be positive and classes >= 2".into(),
        ));
    }
    let mut layers = Vec::new();
    let mut prunable = Vec::new();
    let mut in_ch = input_shape[0];

    let pools = channels.len() - 1;
    for (i, &c) in channels.iter().enumerate() {
        prunable.push(layers.len());
        layers.push(LayerSpec::Conv2d {
            in_ch,
            out_ch: c,
            kernel: 3,
            stride: 1,
            pad: 1,
        });
        layers.push(LayerSpec::BatchNorm2d { ch: c });
        layers.push(LayerSpec::Relu);
        if i < pools {
            layers.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
        }
        in_ch = c;
    }

    // decoder mirrors the pooled stages
    for &c in channels[..pools].iter().rev() {
        layers.push(LayerSpec::UpsampleNearest { factor: 2 });
        prunable.push(layers.len());
        layers.push(LayerSpec::Conv2d {
            in_ch,
            out_ch: c,
            kernel: 3,
            stride: 1,
            pad: 1,
        });
        layers.push(LayerSpec::BatchNorm2d { ch: c });
        layers.push(LayerSpec::Relu);
        in_ch = c;
    }

    layers.push(LayerSpec::Conv2d {
        in_ch,
        out_ch: classes,
        kernel: 1,
        stride: 1,
        pad: 0,
    });

    let spec = ModelSpec {
        layers,
        input_shape: input_shape.to_vec(),
        class_count: classes,
        task: TaskKind::Segmentation,
        prunable,
    };
    spec.validate()?;
    Ok(spec)
}

/// Standard 13-conv VGG-16 layout for 3x32x32 inputs (conv-BN-ReLU blocks,
/// five max-pools, 512-512-10 linear head). Used as the FLOPs/parameter
/// accounting anchor; never trained in this crate.
pub fn build_vgg16_reference() -> ModelSpec {
    const CFG: &[usize] = &[64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];
    let mut layers = Vec::new();
    let mut prunable = Vec::new();
    let mut in_ch = 3usize;
    for &c in CFG {
        if c == 0 {
            layers.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
        } else {
            prunable.push(layers.len());
            layers.push(LayerSpec::Conv2d {
                in_ch,
                out_ch: c,
                kernel: 3,
                stride: 1,
                pad: 1,
            });
            layers.push(LayerSpec::BatchNorm2d { ch: c });
            layers.push(LayerSpec::Relu);
            in_ch = c;
        }
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Linear {
        in_features: 512,
        out_features: 512,
    });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Linear {
        in_features: 512,
        out_features: 10,
    });

    let spec = ModelSpec {
        layers,
        input_shape: vec![3, 32, 32],
        class_count: 10,
        task: TaskKind::Classification,
        prunable,
    };
    spec.validate().expect("vgg16 reference must be well-formed");
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ForwardOpts};
    use crate::rng::SplitMix64;
    use crate::tensor::Tensor;

    #[test]
    fn vgg_lite_two_blocks() {
        let spec = build_vgg_lite(&[1, 28, 28], &[8, 16], 10).unwrap();
        assert_eq!(spec.prunable.len(), 2);
        assert_eq!(spec.output_shape().unwrap(), vec![10]);
        let mut state = spec.init_state::<f32>(1);
        let mut rng = SplitMix64::new(2);
        let x = Tensor::rand_uniform(vec![3, 1, 28, 28], -1.0, 1.0, &mut rng);
        let fwd = forward(&spec, &mut state, &x, &ForwardOpts::default()).unwrap();
        assert_eq!(fwd.output_value().shape(), &[3, 10]);
        assert!(fwd.output_value().all_finite());
    }

    #[test]
    fn vgg_lite_rejects_short_channel_list() {
        assert!(build_vgg_lite(&[1, 28, 28], &[8], 10).is_err());
        assert!(build_vgg_lite(&[1, 28, 28], &[], 10).is_err());
    }

    #[test]
    fn resnet_lite_shape_checks_and_prunable_restriction() {
        let spec = build_resnet_lite(&[3, 32, 32], &[8, 16], 2, 10).unwrap();
        // prunable convs are exactly one per residual block
        assert_eq!(spec.prunable.len(), 4);
        // no prunable conv feeds an add-skip directly
        for &p in &spec.prunable {
            let point = spec.activation_point(p).unwrap();
            assert!(!matches!(spec.layers[point + 1], LayerSpec::AddSkip { .. }));
        }
        let mut state = spec.init_state::<f32>(3);
        let mut rng = SplitMix64::new(4);
        let x = Tensor::rand_uniform(vec![2, 3, 32, 32], -1.0, 1.0, &mut rng);
        let fwd = forward(&spec, &mut state, &x, &ForwardOpts::default()).unwrap();
        assert_eq!(fwd.output_value().shape(), &[2, 10]);
        assert!(fwd.output_value().all_finite());
    }

    #[test]
    fn resnet_lite_rejects_empty() {
        assert!(build_resnet_lite(&[3, 32, 32], &[], 1, 10).is_err());
        assert!(build_resnet_lite(&[3, 32, 32], &[8], 0, 10).is_err());
    }

    #[test]
    fn seg_lite_emits_logit_maps() {
        let spec = build_seg_lite(&[1, 32, 32], &[8, 16], 4).unwrap();
        assert_eq!(spec.output_shape().unwrap(), vec![4, 32, 32]);
        // final classifier conv is not prunable
        let last_conv = *spec.conv_ids().last().unwrap();
        assert!(!spec.prunable.contains(&last_conv));
        let mut state = spec.init_state::<f32>(5);
        let mut rng = SplitMix64::new(6);
        let x = Tensor::rand_uniform(vec![2, 1, 32, 32], -1.0, 1.0, &mut rng);
        let fwd = forward(&spec, &mut state, &x, &ForwardOpts::default()).unwrap();
        assert_eq!(fwd.output_value().shape(), &[2, 4, 32, 32]);
        assert!(fwd.output_value().all_finite());
    }

    #[test]
    fn seg_lite_rejects_bad_args() {
        assert!(build_seg_lite(&[1, 32, 32], &[8], 4).is_err());
        assert!(build_seg_lite(&[1, 32, 32], &[8, 16], 1).is_err());
    }

    #[test]
    fn vgg16_reference_has_13_convs() {
        let spec = build_vgg16_reference();
        assert_eq!(spec.conv_ids().len(), 13);
        assert_eq!(spec.prunable.len(), 13);
        assert_eq!(spec.output_shape().unwrap(), vec![10]);
    }
}

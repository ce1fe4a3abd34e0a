use super::{LayerSpec, ModelSpec};
use crate::error::{Error, Result};

/// Width after desk-scale reduction: nearest multiple of 4, at least 8.
pub fn scaled_width(width: usize, scale: f64) -> usize {
    if scale == 1.0 {
        return width;
    }
    let w = ((width as f64 * scale) / 4.0).round() as usize * 4;
    w.max(8)
}

fn conv(out_channels: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_channels,
        kernel,
        stride,
        batch_norm: true,
        relu: true,
    }
}

/// Class-score convolution: bias, no normalization, no activation.
fn classifier_conv(class_count: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_channels: class_count,
        kernel: 1,
        stride: 1,
        batch_norm: false,
        relu: false,
    }
}

fn check_scale(width_scale: f64) -> Result<()> {
    if !(width_scale > 0.0 && width_scale <= 1.0) {
        return Err(Error::invalid(format!(
            "width_scale must be in (0, 1], got {width_scale}"
        )));
    }
    Ok(())
}

/// conv 96 - conv 96 - conv 192 s2 - conv 192 - conv 192 - conv 192 s2 -
/// conv 192 - conv1 192 - conv1 classes - global average pooling.
pub fn build_allcnn(width_scale: f64, class_count: usize) -> Result<ModelSpec> {
    check_scale(width_scale)?;
    let s = |w| scaled_width(w, width_scale);
    let mut layers = vec![
        conv(s(96), 3, 1),
        conv(s(96), 3, 1),
        conv(s(192), 3, 2),
        conv(s(192), 3, 1),
        conv(s(192), 3, 1),
        conv(s(192), 3, 2),
        conv(s(192), 3, 1),
        conv(s(192), 1, 1),
        classifier_conv(class_count),
    ];
    layers.push(LayerSpec::GlobalAvgPool);
    let spec = ModelSpec {
        name: "allcnn".into(),
        layers,
        class_count,
        input_shape: [3, 32, 32],
        width_scale,
    };
    spec.output_shapes()?;
    Ok(spec)
}

/// conv 96 - [conv 96*2^(i-1) - conv 96*2^i s2] for i=1..n - conv 96*2^n -
/// conv1 96*2^n - conv1 classes - global average pooling.
pub fn build_vardepth(n: usize, width_scale: f64, class_count: usize) -> Result<ModelSpec> {
    check_scale(width_scale)?;
    if n == 0 {
        return Err(Error::invalid("depth n must be at least 1"));
    }
    let input_shape = [3, 32, 32];
    if input_shape[1] >> n == 0 {
        return Err(Error::invalid(format!(
            "{n} stride-2 layers do not fit a {}x{} input",
            input_shape[1], input_shape[2]
        )));
    }
    let s = |w| scaled_width(w, width_scale);
    let mut layers = vec![conv(s(96), 3, 1)];
    for i in 1..=n {
        layers.push(conv(s(96 << (i - 1)), 3, 1));
        layers.push(conv(s(96 << i), 3, 2));
    }
    layers.push(conv(s(96 << n), 3, 1));
    layers.push(conv(s(96 << n), 1, 1));
    layers.push(classifier_conv(class_count));
    layers.push(LayerSpec::GlobalAvgPool);
    let spec = ModelSpec {
        name: format!("vardepth{n}"),
        layers,
        class_count,
        input_shape,
        width_scale,
    };
    spec.output_shapes()?;
    Ok(spec)
}

/// flatten - (linear + batch norm + ReLU) per hidden size - linear to classes.
pub fn build_fc(
    hidden_sizes: &[usize],
    input_shape: [usize; 3],
    class_count: usize,
) -> Result<ModelSpec> {
    if hidden_sizes.is_empty() {
        return Err(Error::invalid("fully connected net needs hidden layers"));
    }
    let mut layers = vec![LayerSpec::Flatten];
    for &h in hidden_sizes {
        layers.push(LayerSpec::Linear {
            out_features: h,
            batch_norm: true,
            relu: true,
        });
    }
    layers.push(LayerSpec::Linear {
        out_features: class_count,
        batch_norm: false,
        relu: false,
    });
    let spec = ModelSpec {
        name: "fc".into(),
        layers,
        class_count,
        input_shape,
        width_scale: 1.0,
    };
    spec.output_shapes()?;
    Ok(spec)
}

/// Reduced residual network: 3x3 stem, stages of residual blocks at widths
/// 64, 128, 256, 512 (scaled), stride 2 at the start of every stage after
/// the first, global pooling and a linear classifier.
pub fn build_reslite(
    blocks_per_stage: &[usize],
    width_scale: f64,
    class_count: usize,
) -> Result<ModelSpec> {
    check_scale(width_scale)?;
    if blocks_per_stage.is_empty() || blocks_per_stage.len() > 4 {
        return Err(Error::invalid("between 1 and 4 stages"));
    }
    let s = |w| scaled_width(w, width_scale);
    let mut layers = vec![conv(s(64), 3, 1)];
    for (stage, &blocks) in blocks_per_stage.iter().enumerate() {
        let width = s(64 << stage);
        for b in 0..blocks {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            layers.push(LayerSpec::Residual {
                out_channels: width,
                stride,
            });
        }
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Linear {
        out_features: class_count,
        batch_norm: false,
        relu: false,
    });
    let spec = ModelSpec {
        name: "reslite".into(),
        layers,
        class_count,
        input_shape: [3, 32, 32],
        width_scale,
    };
    spec.output_shapes()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allcnn_widths_at_full_and_quarter_scale() {
        let full = build_allcnn(1.0, 10).unwrap();
        assert_eq!(
            full.layer_widths(),
            vec![96, 96, 192, 192, 192, 192, 192, 192, 10]
        );
        let shapes = full.output_shapes().unwrap();
        // last conv before pooling
        assert_eq!(shapes[shapes.len() - 2], vec![10, 8, 8]);
        let quarter = build_allcnn(0.25, 10).unwrap();
        assert_eq!(
            quarter.layer_widths(),
            vec![24, 24, 48, 48, 48, 48, 48, 48, 10]
        );
    }

    #[test]
    fn vardepth_template() {
        let spec = build_vardepth(2, 1.0, 10).unwrap();
        assert_eq!(
            spec.layer_widths(),
            vec![96, 96, 192, 192, 384, 384, 384, 10]
        );
        let one = build_vardepth(1, 1.0, 10).unwrap();
        assert_eq!(one.layer_widths(), vec![96, 96, 192, 192, 192, 10]);
        let three = build_vardepth(3, 1.0, 10).unwrap();
        let shapes = three.output_shapes().unwrap();
        assert_eq!(&shapes[shapes.len() - 2][1..], &[4, 4]);
        assert!(build_vardepth(6, 1.0, 10).is_err());
        assert!(build_vardepth(5, 1.0, 10).is_ok());
    }

    #[test]
    fn width_scaling_rounds_to_multiples_of_four() {
        assert_eq!(scaled_width(96, 0.25), 24);
        assert_eq!(scaled_width(96, 0.1), 8);
        assert_eq!(scaled_width(192, 0.3), 56);
        assert_eq!(scaled_width(10, 1.0), 10);
    }

    #[test]
    fn fc_layouts() {
        let paper = build_fc(&[2500, 2000, 1500, 1000, 500], [1, 32, 32], 10).unwrap();
        assert_eq!(paper.layer_widths(), vec![2500, 2000, 1500, 1000, 500, 10]);
        assert!(build_fc(&[1], [1, 32, 32], 10).is_ok());
        assert!(build_fc(&[], [1, 32, 32], 10).is_err());
    }

    #[test]
    fn reslite_counts_eighteen_weight_layers() {
        let spec = build_reslite(&[2, 2, 2, 2], 1.0, 10).unwrap();
        // stem + 8 blocks x 2 convs + classifier (projections excluded)
        assert_eq!(spec.layer_widths().len(), 18);
        let shapes = spec.output_shapes().unwrap();
        // after the four stages: 512 channels at 4x4
        assert_eq!(shapes[8], vec![512, 4, 4]);
    }
}

//! Gradient-based attribution: vanilla gradients, input-x-gradient,
//! integrated gradients, guided backprop, and Grad-CAM.

use crate::autodiff::{backward, forward, node_gradients, ReluRule};
use crate::error::{CoreError, Result};
use crate::model::{Layer, Model};
use crate::tensor::Tensor;

/// d logit[target] / d input.
pub fn vanilla_gradients(model: &Model, input: &Tensor, target: usize) -> Result<Tensor> {
    let (_, tape) = forward(model, input)?;
    backward(&tape, target, ReluRule::Standard)
}

/// input (elementwise) d logit[target] / d input.
pub fn input_x_gradient(model: &Model, input: &Tensor, target: usize) -> Result<Tensor> {
    let grad = vanilla_gradients(model, input, target)?;
    input.mul(&grad)
}

/// Midpoint-rule approximation of the path integral of gradients from
/// `baseline` to `input`, scaled by `(input - baseline)`.
pub fn integrated_gradients(
    model: &Model,
    input: &Tensor,
    target: usize,
    baseline: &Tensor,
    steps: usize,
) -> Result<Tensor> {
    input.check_same_shape(baseline)?;
    if steps < 1 {
        return Err(CoreError::Precondition(
            "integrated gradients needs at least one step".into(),
        ));
    }
    let delta = input.sub(baseline)?;
    let mut acc = Tensor::zeros(input.shape());
    for s in 0..steps {
        let alpha = (s as f64 + 0.5) / steps as f64;
        let point = baseline.add(&delta.scale(alpha))?;
        let grad = vanilla_gradients(model, &point, target)?;
        acc = acc.add(&grad)?;
    }
    delta.mul(&acc.scale(1.0 / steps as f64))
}

/// Backward pass with the guided ReLU rule.
pub fn guided_backprop(model: &Model, input: &Tensor, target: usize) -> Result<Tensor> {
    let (_, tape) = forward(model, input)?;
    backward(&tape, target, ReluRule::Guided)
}

/// Gradient-weighted combination of an internal conv layer's feature maps,
/// rectified and upsampled to the input's spatial shape. `conv_layer`
/// defaults to the model's last conv2d layer.
pub fn grad_cam(
    model: &Model,
    input: &Tensor,
    target: usize,
    conv_layer: Option<usize>,
) -> Result<Tensor> {
    let layer = match conv_layer {
        Some(layer) => layer,
        None => model
            .last_conv_layer()
            .ok_or_else(|| CoreError::Method("grad_cam requires a convolutional layer".into()))?,
    };
    match model.layers().get(layer) {
        Some(Layer::Conv2d { .. }) => {}
        Some(other) => {
            return Err(CoreError::Method(format!(
                "grad_cam requires a convolutional layer; layer {layer} is {}",
                other.kind()
            )))
        }
        None => {
            return Err(CoreError::IndexOutOfRange {
                index: layer,
                limit: model.layers().len(),
            })
        }
    }

    let (logits, tape) = forward(model, input)?;
    let mut seed = Tensor::zeros(logits.shape());
    if target >= logits.len() {
        return Err(CoreError::IndexOutOfRange {
            index: target,
            limit: logits.len(),
        });
    }
    seed.data_mut()[target] = 1.0;
    let grads = node_gradients(&tape, &seed, ReluRule::Standard)?;
    let node = tape.node_for_layer(layer)?;
    let activations = tape.activation(node)?;
    let grad = &grads[node];

    let [channels, h, w] = [
        activations.shape()[0],
        activations.shape()[1],
        activations.shape()[2],
    ];
    let spatial = h * w;
    let mut cam = vec![0.0; spatial];
    for k in 0..channels {
        let a = &activations.data()[k * spatial..(k + 1) * spatial];
        let g = &grad.data()[k * spatial..(k + 1) * spatial];
        let alpha = g.iter().sum::<f64>() / spatial as f64;
        for (c, &ai) in cam.iter_mut().zip(a) {
            *c += alpha * ai;
        }
    }
    for c in cam.iter_mut() {
        if *c < 0.0 {
            *c = 0.0;
        }
    }

    let (out_h, out_w) = match input.shape() {
        [h, w] => (*h, *w),
        [_, h, w] => (*h, *w),
        other => {
            return Err(CoreError::Method(format!(
                "grad_cam expects a spatial input, got shape {other:?}"
            )))
        }
    };
    let resized = bilinear_resize(&cam, (h, w), (out_h, out_w));
    // Broadcast over channels when the input carries them.
    let data = match input.shape() {
        [_, _] => resized,
        shape => {
            let ch = shape[0];
            let mut buf = Vec::with_capacity(ch * out_h * out_w);
            for _ in 0..ch {
                buf.extend_from_slice(&resized);
            }
            buf
        }
    };
    Ok(Tensor::from_raw(input.shape().to_vec(), data))
}

/// Bilinear resize with corner alignment; the identity when shapes match.
pub(crate) fn bilinear_resize(
    src: &[f64],
    (src_h, src_w): (usize, usize),
    (dst_h, dst_w): (usize, usize),
) -> Vec<f64> {
    if (src_h, src_w) == (dst_h, dst_w) {
        return src.to_vec();
    }
    let scale = |dst: usize, src: usize, i: usize| -> f64 {
        if dst <= 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for i in 0..dst_h {
        let y = scale(dst_h, src_h, i);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let fy = y - y0 as f64;
        for j in 0..dst_w {
            let x = scale(dst_w, src_w, j);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let fx = x - x0 as f64;
            let v = src[y0 * src_w + x0] * (1.0 - fy) * (1.0 - fx)
                + src[y0 * src_w + x1] * (1.0 - fy) * fx
                + src[y1 * src_w + x0] * fy * (1.0 - fx)
                + src[y1 * src_w + x1] * fy * fx;
            out.push(v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::Layer;

    fn lin3_x() -> Tensor {
        Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn vanilla_on_lin3_is_the_weight_row() {
        let model = fixtures::lin3();
        let map = vanilla_gradients(&model, &lin3_x(), 0).unwrap();
        assert_eq!(map.data(), &[1.0, -2.0, 3.0]);
        let zero = vanilla_gradients(&model, &lin3_x(), 1).unwrap();
        assert_eq!(zero.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn input_x_gradient_is_the_elementwise_product() {
        let model = fixtures::lin3();
        let map = input_x_gradient(&model, &lin3_x(), 0).unwrap();
        assert_eq!(map.data(), &[1.0, -2.0, 3.0]);
        let scaled = Tensor::vector(vec![2.0, 1.0, 1.0]).unwrap();
        let map = input_x_gradient(&model, &scaled, 0).unwrap();
        assert_eq!(map.data(), &[2.0, -2.0, 3.0]);
        let zero = input_x_gradient(&model, &Tensor::zeros(&[3]), 0).unwrap();
        assert_eq!(zero.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn integrated_gradients_is_exact_on_linear_models() {
        let model = fixtures::lin3();
        for steps in [1, 7, 64] {
            let map =
                integrated_gradients(&model, &lin3_x(), 0, &Tensor::zeros(&[3]), steps).unwrap();
            for (got, want) in map.data().iter().zip(&[1.0, -2.0, 3.0]) {
                assert!((got - want).abs() < 1e-12, "steps {steps}");
            }
        }
    }

    #[test]
    fn integrated_gradients_with_input_baseline_is_zero() {
        let model = fixtures::random_dense_relu(3, 4, 6, 2);
        let x = fixtures::random_input(&[4], 8);
        let map = integrated_gradients(&model, &x, 0, &x, 16).unwrap();
        assert_eq!(map.max_abs(), 0.0);
    }

    #[test]
    fn integrated_gradients_rejects_baseline_shape_mismatch() {
        let model = fixtures::lin3();
        let bad = Tensor::zeros(&[4]);
        assert!(integrated_gradients(&model, &lin3_x(), 0, &bad, 8).is_err());
    }

    #[test]
    fn guided_backprop_equals_vanilla_without_relu() {
        let model = fixtures::lin3();
        let g = guided_backprop(&model, &lin3_x(), 0).unwrap();
        let v = vanilla_gradients(&model, &lin3_x(), 0).unwrap();
        assert_eq!(g.data(), v.data());
    }

    #[test]
    fn guided_backprop_is_zero_when_all_paths_blocked() {
        // Dead ReLU: the single hidden unit is negative at the probe input,
        // so both rules block and the map is zero.
        let hidden = Layer::Dense {
            weights: Tensor::new(vec![1, 2], vec![-1.0, -1.0]).unwrap(),
            bias: Tensor::zeros(&[1]),
        };
        let head = Layer::Dense {
            weights: Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        let model = crate::model::Model::from_layers(
            vec![2],
            2,
            vec![hidden, crate::model::Layer::Relu, head],
        )
        .unwrap();
        let x = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let map = guided_backprop(&model, &x, 0).unwrap();
        assert_eq!(map.data(), &[0.0, 0.0]);
    }

    #[test]
    fn guided_backprop_keeps_only_positive_gradient_paths() {
        let model = fixtures::two_unit_relu_net();
        let x = Tensor::vector(vec![1.0, 0.5]).unwrap();
        let map = guided_backprop(&model, &x, 0).unwrap();
        let ((a0, a1), _) = fixtures::two_unit_relu_weights();
        assert_eq!(map.data(), &[a0, a1]);
    }

    #[test]
    fn grad_cam_is_nonnegative() {
        let model = fixtures::random_cnn(21, 10, 3);
        for seed in 0..5 {
            let x = fixtures::random_input(model.input_shape(), seed);
            let map = grad_cam(&model, &x, 1, None).unwrap();
            assert!(map.data().iter().all(|&v| v >= 0.0));
            assert_eq!(map.shape(), x.shape());
        }
    }

    #[test]
    fn grad_cam_without_conv_layer_is_an_error() {
        let model = fixtures::random_dense_relu(2, 4, 6, 2);
        let x = fixtures::random_input(&[4], 1);
        let err = grad_cam(&model, &x, 0, None).unwrap_err();
        assert!(err.to_string().contains("requires a convolutional layer"));
        // Naming a non-conv layer is also rejected.
        let err = grad_cam(&model, &x, 0, Some(1)).unwrap_err();
        assert!(err.to_string().contains("requires a convolutional layer"));
    }

    #[test]
    fn constant_one_by_one_kernel_gives_uniform_map() {
        // A 1x1 constant-weight conv on a constant input produces identical
        // feature-map values everywhere, so the cam is spatially uniform.
        let conv = Layer::Conv2d {
            weights: Tensor::new(vec![2, 1, 1, 1], vec![0.5, -0.25]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        let head = Layer::Dense {
            weights: Tensor::new(vec![2, 32], (0..64).map(|i| (i % 5) as f64 * 0.1).collect())
                .unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        let model = crate::model::Model::from_layers(
            vec![4, 4],
            2,
            vec![conv, Layer::Flatten, head],
        )
        .unwrap();
        let x = Tensor::full(&[4, 4], 0.7).unwrap();
        let map = grad_cam(&model, &x, 0, Some(0)).unwrap();
        let first = map.data()[0];
        assert!(map.data().iter().all(|&v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn bilinear_resize_identity_and_upsample() {
        let src = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_resize(&src, (2, 2), (2, 2)), src);
        let up = bilinear_resize(&src, (2, 2), (3, 3));
        assert_eq!(up.len(), 9);
        assert_eq!(up[0], 1.0);
        assert_eq!(up[8], 4.0);
        assert!((up[4] - 2.5).abs() < 1e-12);
    }
}

//! Shared fixture models and architectures for tests and the CLI `train`
//! presets.

use rand::Rng;

use crate::data::SynthConfig;
use crate::model::{Layer, LayerSpec, Model};
use crate::rng::rng_split;
use crate::tensor::Tensor;

/// Three-feature linear fixture: logits = (w . x, 0) with w = (1, -2, 3).
pub fn lin3() -> Model {
    let weights = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
    let bias = Tensor::zeros(&[2]);
    Model::from_layers(vec![3], 2, vec![Layer::Dense { weights, bias }]).unwrap()
}

/// Randomly initialized dense-relu-dense net with zero biases.
pub fn random_dense_relu(seed: u64, in_dim: usize, hidden: usize, classes: usize) -> Model {
    Model::init(
        vec![in_dim],
        classes,
        &[
            LayerSpec::Dense { units: hidden },
            LayerSpec::Relu,
            LayerSpec::Dense { units: classes },
        ],
        seed,
    )
    .unwrap()
}

/// Randomly initialized two-conv CNN over a `side x side` single-channel
/// input.
pub fn random_cnn(seed: u64, side: usize, classes: usize) -> Model {
    Model::init(vec![side, side], classes, &cnn_arch(classes), seed).unwrap()
}

/// Architecture of the patch-classification CNN fixture.
pub fn cnn_arch(classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            out_channels: 6,
            kernel: 3,
        },
        LayerSpec::Relu,
        LayerSpec::Conv2d {
            out_channels: 6,
            kernel: 3,
        },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { units: classes },
    ]
}

/// Architecture of the dense fixture used by retraining tests.
pub fn mlp_arch(hidden: usize, classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { units: hidden },
        LayerSpec::Relu,
        LayerSpec::Dense { units: classes },
    ]
}

/// The weight rows of [`two_unit_relu_net`]: (positive-path, negative-path).
pub fn two_unit_relu_weights() -> ((f64, f64), (f64, f64)) {
    ((0.7, 0.3), (0.5, -0.2))
}

/// Two-input net with one hidden ReLU pair feeding logit 0 with opposite
/// signs; small enough to enumerate gradient paths by hand.
pub fn two_unit_relu_net() -> Model {
    let ((a0, a1), (b0, b1)) = two_unit_relu_weights();
    let hidden = Layer::Dense {
        weights: Tensor::new(vec![2, 2], vec![a0, a1, b0, b1]).unwrap(),
        bias: Tensor::zeros(&[2]),
    };
    // logit0 = unit0 - unit1, logit1 = 0
    let head = Layer::Dense {
        weights: Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.0, 0.0]).unwrap(),
        bias: Tensor::zeros(&[2]),
    };
    Model::from_layers(vec![2], 2, vec![hidden, Layer::Relu, head]).unwrap()
}

/// Deterministic random input over `shape`, roughly unit scale.
pub fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_split(seed, 0);
    let numel = shape.iter().product();
    Tensor::from_raw(
        shape.to_vec(),
        (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

/// Default synthetic patch dataset configuration used by the fixture
/// battery: 12x12 images, 4x4 patch, 4 classes.
pub fn patch_config(seed: u64) -> SynthConfig {
    SynthConfig {
        count: 240,
        image_side: 12,
        patch_side: 4,
        class_count: 4,
        noise_std: 0.1,
        seed,
    }
}

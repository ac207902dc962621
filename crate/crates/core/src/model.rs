//! Sequential models: dense, conv2d, relu, and flatten layers.
//!
//! Conv2d supports stride 1 with "same" zero padding only. Models validate
//! at construction that consecutive layer shapes compose and that the final
//! output is one logit per class.

use std::io::{Read, Write};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{rng_split, split_seed};
use crate::tensor::{b64, Tensor};

#[derive(Debug, Clone)]
pub enum Layer {
    /// Fully connected: weights `[out, in]`, bias `[out]`.
    Dense { weights: Tensor, bias: Tensor },
    /// 2D convolution, stride 1, same zero padding: weights
    /// `[out_ch, in_ch, kh, kw]`, bias `[out_ch]`.
    Conv2d { weights: Tensor, bias: Tensor },
    Relu,
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    pub fn weights(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { weights, .. } | Layer::Conv2d { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. } => Some(bias),
            _ => None,
        }
    }

    /// Fan-in of a parameterized layer: dense `in`, conv `in_ch * kh * kw`.
    fn fan_in(&self) -> Option<usize> {
        match self {
            Layer::Dense { weights, .. } => Some(weights.shape()[1]),
            Layer::Conv2d { weights, .. } => {
                let s = weights.shape();
                Some(s[1] * s[2] * s[3])
            }
            _ => None,
        }
    }
}

/// Architecture element for seeded initialization.
#[derive(Debug, Clone)]
pub enum LayerSpec {
    Dense { units: usize },
    Conv2d { out_channels: usize, kernel: usize },
    Relu,
    Flatten,
}

#[derive(Debug, Clone)]
pub struct Model {
    input_shape: Vec<usize>,
    class_count: usize,
    layers: Vec<Layer>,
}

/// Output shape of one layer given its input shape.
fn layer_output_shape(layer: &Layer, input: &[usize]) -> Result<Vec<usize>> {
    match layer {
        Layer::Dense { weights, .. } => {
            let s = weights.shape();
            if input.len() != 1 || input[0] != s[1] {
                return Err(CoreError::Model(format!(
                    "dense layer expects rank-1 input of {} features, got {:?}",
                    s[1], input
                )));
            }
            Ok(vec![s[0]])
        }
        Layer::Conv2d { weights, .. } => {
            let s = weights.shape();
            let (in_ch, h, w) = match input {
                [h, w] => (1, *h, *w),
                [c, h, w] => (*c, *h, *w),
                other => {
                    return Err(CoreError::Model(format!(
                        "conv2d expects rank-2 or rank-3 input, got {other:?}"
                    )))
                }
            };
            if in_ch != s[1] {
                return Err(CoreError::Model(format!(
                    "conv2d expects {} input channels, got {}",
                    s[1], in_ch
                )));
            }
            Ok(vec![s[0], h, w])
        }
        Layer::Relu => Ok(input.to_vec()),
        Layer::Flatten => Ok(vec![input.iter().product()]),
    }
}

impl Model {
    /// Assemble a model from explicit layers, validating shape composition.
    pub fn from_layers(
        input_shape: Vec<usize>,
        class_count: usize,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        if class_count < 2 {
            return Err(CoreError::Model(format!(
                "class_count must be at least 2, got {class_count}"
            )));
        }
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(CoreError::Model(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer_output_shape(layer, &shape)
                .map_err(|e| CoreError::Model(format!("layer {i}: {e}")))?;
            if let Some(w) = layer.weights() {
                if !w.all_finite() {
                    return Err(CoreError::NonFinite(format!("weights of layer {i}")));
                }
            }
            match layer {
                Layer::Dense { weights, bias } => {
                    if bias.shape() != [weights.shape()[0]] {
                        return Err(CoreError::Model(format!(
                            "layer {i}: dense bias shape {:?} does not match {} outputs",
                            bias.shape(),
                            weights.shape()[0]
                        )));
                    }
                }
                Layer::Conv2d { weights, bias } => {
                    if weights.shape().len() != 4 {
                        return Err(CoreError::Model(format!(
                            "layer {i}: conv2d weights must have rank 4, got {:?}",
                            weights.shape()
                        )));
                    }
                    if bias.shape() != [weights.shape()[0]] {
                        return Err(CoreError::Model(format!(
                            "layer {i}: conv2d bias shape {:?} does not match {} channels",
                            bias.shape(),
                            weights.shape()[0]
                        )));
                    }
                }
                _ => {}
            }
        }
        if shape != [class_count] {
            return Err(CoreError::Model(format!(
                "final layer produces shape {shape:?}, expected [{class_count}] logits"
            )));
        }
        Ok(Self {
            input_shape,
            class_count,
            layers,
        })
    }

    /// Seeded Gaussian initialization: weights from N(0, 1/fan_in), zero bias.
    pub fn init(
        input_shape: Vec<usize>,
        class_count: usize,
        specs: &[LayerSpec],
        seed: u64,
    ) -> Result<Self> {
        let mut shape = input_shape.clone();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = match spec {
                LayerSpec::Dense { units } => {
                    if shape.len() != 1 {
                        return Err(CoreError::Model(format!(
                            "layer {i}: dense after non-flat shape {shape:?}, insert flatten"
                        )));
                    }
                    let fan_in = shape[0];
                    let weights = gaussian_tensor(
                        &[*units, fan_in],
                        1.0 / (fan_in as f64).sqrt(),
                        split_seed(seed, i as u64),
                    );
                    Layer::Dense {
                        weights,
                        bias: Tensor::zeros(&[*units]),
                    }
                }
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                } => {
                    let in_ch = match shape.as_slice() {
                        [_, _] => 1,
                        [c, _, _] => *c,
                        other => {
                            return Err(CoreError::Model(format!(
                                "layer {i}: conv2d after shape {other:?}"
                            )))
                        }
                    };
                    let fan_in = in_ch * kernel * kernel;
                    let weights = gaussian_tensor(
                        &[*out_channels, in_ch, *kernel, *kernel],
                        1.0 / (fan_in as f64).sqrt(),
                        split_seed(seed, i as u64),
                    );
                    Layer::Conv2d {
                        weights,
                        bias: Tensor::zeros(&[*out_channels]),
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Flatten => Layer::Flatten,
            };
            shape = layer_output_shape(&layer, &shape)?;
            layers.push(layer);
        }
        Self::from_layers(input_shape, class_count, layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut Vec<Layer> {
        &mut self.layers
    }

    /// Indices of parameterized layers, input side first.
    pub fn parameterized_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(|(i, _)| i)
            .collect()
    }

    /// Index of the last conv2d layer, if any.
    pub fn last_conv_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, Layer::Conv2d { .. }))
    }

    /// Fresh model with every parameterized layer re-initialized from `seed`.
    pub fn reinitialized(&self, seed: u64) -> Model {
        let first = self.parameterized_layers().into_iter().next();
        match first {
            Some(upto) => randomize_layers(self, RandomizeMode::Cascading, upto, seed)
                .expect("parameterized layer index is valid"),
            None => self.clone(),
        }
    }
}

fn gaussian_tensor(shape: &[usize], std: f64, seed: u64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is positive");
    let mut rng = rng_split(seed, 0);
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(&mut rng)).collect();
    Tensor::from_raw(shape.to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomizeMode {
    /// Re-initialize every parameterized layer from the output side down
    /// through `upto`.
    Cascading,
    /// Re-initialize only the layer at `upto`.
    Independent,
}

/// Re-initialize layer weights from N(0, 1/fan_in).
///
/// Per-layer seeds derive as `split_seed(seed, layer_index)`, so cascading
/// and independent runs over the same seed agree on shared layers.
pub fn randomize_layers(
    model: &Model,
    mode: RandomizeMode,
    upto: usize,
    seed: u64,
) -> Result<Model> {
    let limit = model.layers.len();
    if upto >= limit {
        return Err(CoreError::IndexOutOfRange { index: upto, limit });
    }
    if !model.layers[upto].is_parameterized() {
        return Err(CoreError::Precondition(format!(
            "layer {upto} ({}) has no parameters to randomize",
            model.layers[upto].kind()
        )));
    }
    let mut out = model.clone();
    for (i, layer) in out.layers_mut().iter_mut().enumerate() {
        let selected = match mode {
            RandomizeMode::Cascading => i >= upto,
            RandomizeMode::Independent => i == upto,
        };
        if !selected || !layer.is_parameterized() {
            continue;
        }
        let fan_in = layer.fan_in().expect("parameterized layer has fan-in");
        let std = 1.0 / (fan_in as f64).sqrt();
        let layer_seed = split_seed(seed, i as u64);
        match layer {
            Layer::Dense { weights, bias } | Layer::Conv2d { weights, bias } => {
                *weights = gaussian_tensor(weights.shape(), std, layer_seed);
                *bias = gaussian_tensor(bias.shape(), std, split_seed(layer_seed, 1));
            }
            _ => unreachable!(),
        }
    }
    Ok(out)
}

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.max();
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor::from_raw(
        logits.shape().to_vec(),
        exps.into_iter().map(|e| e / total).collect(),
    )
}

/// Class probabilities: softmax over the model's logits.
pub fn predict(model: &Model, input: &Tensor) -> Result<Tensor> {
    let (logits, _) = crate::autodiff::forward(model, input)?;
    Ok(softmax(&logits))
}

/// Probability of `target` under [`predict`].
pub fn predict_class_probability(model: &Model, input: &Tensor, target: usize) -> Result<f64> {
    let probs = predict(model, input)?;
    probs.get(target)
}

// ── Model file format ────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    input_shape: Vec<usize>,
    class_count: usize,
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    shape: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<String>,
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Serialize a model to the JSON file format (base64 little-endian weights).
pub fn save_model(model: &Model, mut writer: impl Write) -> Result<()> {
    let layers = model
        .layers
        .iter()
        .map(|layer| match layer {
            Layer::Dense { weights, bias } | Layer::Conv2d { weights, bias } => LayerFile {
                kind: layer.kind().into(),
                shape: Some(weights.shape().to_vec()),
                weights: Some(b64::encode_f64s(weights.data())),
                bias: Some(b64::encode_f64s(bias.data())),
            },
            Layer::Relu | Layer::Flatten => LayerFile {
                kind: layer.kind().into(),
                shape: None,
                weights: None,
                bias: None,
            },
        })
        .collect();
    let file = ModelFile {
        version: MODEL_FORMAT_VERSION,
        input_shape: model.input_shape.clone(),
        class_count: model.class_count,
        layers,
    };
    serde_json::to_writer_pretty(&mut writer, &file)?;
    writer.write_all(b"\n")?;
    Ok(())
}

/// Load a model from the JSON file format.
pub fn load_model(reader: impl Read) -> Result<Model> {
    let file: ModelFile = serde_json::from_reader(reader)?;
    if file.version != MODEL_FORMAT_VERSION {
        return Err(CoreError::DataFormat(format!(
            "unsupported model format version {}",
            file.version
        )));
    }
    let mut layers = Vec::with_capacity(file.layers.len());
    for (i, lf) in file.layers.iter().enumerate() {
        let layer = match lf.kind.as_str() {
            "relu" => Layer::Relu,
            "flatten" => Layer::Flatten,
            kind @ ("dense" | "conv2d") => {
                let shape = lf.shape.clone().ok_or_else(|| CoreError::ModelFormat {
                    layer: i,
                    message: format!("{kind} layer is missing its shape"),
                })?;
                let weights = decode_tensor(&shape, lf.weights.as_deref(), i, "weights")?;
                let bias_shape = vec![*shape.first().unwrap_or(&0)];
                let bias = decode_tensor(&bias_shape, lf.bias.as_deref(), i, "bias")?;
                if kind == "dense" {
                    if shape.len() != 2 {
                        return Err(CoreError::ModelFormat {
                            layer: i,
                            message: format!("dense shape must be [out, in], got {shape:?}"),
                        });
                    }
                    Layer::Dense { weights, bias }
                } else {
                    if shape.len() != 4 {
                        return Err(CoreError::ModelFormat {
                            layer: i,
                            message: format!(
                                "conv2d shape must be [out_ch, in_ch, kh, kw], got {shape:?}"
                            ),
                        });
                    }
                    Layer::Conv2d { weights, bias }
                }
            }
            other => {
                return Err(CoreError::ModelFormat {
                    layer: i,
                    message: format!("unknown layer kind {other:?}"),
                })
            }
        };
        layers.push(layer);
    }
    Model::from_layers(file.input_shape, file.class_count, layers).map_err(|e| match e {
        CoreError::Model(message) => CoreError::DataFormat(format!("inconsistent model: {message}")),
        other => other,
    })
}

fn decode_tensor(
    shape: &[usize],
    text: Option<&str>,
    layer: usize,
    field: &str,
) -> Result<Tensor> {
    let text = text.ok_or_else(|| CoreError::ModelFormat {
        layer,
        message: format!("missing {field}"),
    })?;
    let data = b64::decode_f64s(text).map_err(|message| CoreError::ModelFormat {
        layer,
        message: format!("corrupt {field}: {message}"),
    })?;
    Tensor::new(shape.to_vec(), data).map_err(|e| CoreError::ModelFormat {
        layer,
        message: format!("bad {field}: {e}"),
    })
}

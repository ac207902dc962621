//! Eleven attribution methods behind one uniform signature.
//!
//! Every method is invoked as `explain(model, input, target, method, params,
//! seed, ctx)` and returns a signed [`SaliencyMap`] of the input's shape.
//! Attributions are stored signed; absolute values are applied only at
//! ranking and rendering time.
//!
//! Black-box methods (occlusion, RISE, LIME, Kernel SHAP) are implemented
//! against the [`Predictor`] trait and can never touch a gradient tape;
//! gradient methods take the full [`Model`].

mod gradients;
mod perturbation;
mod shapley;
mod sis;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::forward;
use crate::error::{CoreError, Result};
use crate::model::{softmax, Model};
use crate::tensor::Tensor;

pub use gradients::{
    grad_cam, guided_backprop, input_x_gradient, integrated_gradients, vanilla_gradients,
};
pub use perturbation::{lime, occlusion, rise, LimeConfig, RiseConfig};
pub use shapley::{brute_force_shapley, kernel_shap};
pub use sis::{sis, SisConfig};

/// Identifiers of the implemented attribution methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    VanillaGradients,
    InputXGradient,
    IntegratedGradients,
    Smoothgrad,
    GuidedBackprop,
    GradCam,
    Occlusion,
    Rise,
    Lime,
    KernelShap,
    Sis,
}

pub const ALL_METHODS: [MethodId; 11] = [
    MethodId::VanillaGradients,
    MethodId::InputXGradient,
    MethodId::IntegratedGradients,
    MethodId::Smoothgrad,
    MethodId::GuidedBackprop,
    MethodId::GradCam,
    MethodId::Occlusion,
    MethodId::Rise,
    MethodId::Lime,
    MethodId::KernelShap,
    MethodId::Sis,
];

impl MethodId {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodId::VanillaGradients => "vanilla_gradients",
            MethodId::InputXGradient => "input_x_gradient",
            MethodId::IntegratedGradients => "integrated_gradients",
            MethodId::Smoothgrad => "smoothgrad",
            MethodId::GuidedBackprop => "guided_backprop",
            MethodId::GradCam => "grad_cam",
            MethodId::Occlusion => "occlusion",
            MethodId::Rise => "rise",
            MethodId::Lime => "lime",
            MethodId::KernelShap => "kernel_shap",
            MethodId::Sis => "sis",
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        ALL_METHODS
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                CoreError::Method(format!(
                    "unknown method {s:?}; expected one of {}",
                    ALL_METHODS.map(|m| m.as_str()).join(", ")
                ))
            })
    }
}

/// Per-feature signed attribution with the input's shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub method: MethodId,
    pub target: usize,
    /// Seed used to produce the map; absent for deterministic runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub values: Tensor,
}

/// How much model access a method requires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessRequirement {
    BlackBox,
    Gradients,
    GradientsAndConv,
}

impl fmt::Display for AccessRequirement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessRequirement::BlackBox => "black_box",
            AccessRequirement::Gradients => "gradients",
            AccessRequirement::GradientsAndConv => "gradients_and_conv",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperparameterInfo {
    pub name: String,
    pub default: String,
    pub description: String,
}

/// Declared metadata for one method: determinism, hyperparameters, access
/// requirement, and a one-line semantic description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodDescriptor {
    pub method: MethodId,
    pub display_name: String,
    pub access_requirement: AccessRequirement,
    pub access_text: String,
    pub declared_deterministic: bool,
    pub determinism_text: String,
    pub hyperparameters: Vec<HyperparameterInfo>,
    pub semantic_directness: String,
    pub references: Vec<String>,
}

fn hp(name: &str, default: &str, description: &str) -> HyperparameterInfo {
    HyperparameterInfo {
        name: name.into(),
        default: default.into(),
        description: description.into(),
    }
}

/// Descriptor for one method.
pub fn descriptor(method: MethodId) -> MethodDescriptor {
    use AccessRequirement::*;
    let d = |display: &str,
             access: AccessRequirement,
             access_text: &str,
             deterministic: bool,
             determinism_text: &str,
             hyper: Vec<HyperparameterInfo>,
             semantic: &str,
             references: &[&str]| MethodDescriptor {
        method,
        display_name: display.into(),
        access_requirement: access,
        access_text: access_text.into(),
        declared_deterministic: deterministic,
        determinism_text: determinism_text.into(),
        hyperparameters: hyper,
        semantic_directness: semantic.into(),
        references: references.iter().map(|s| s.to_string()).collect(),
    };
    match method {
        MethodId::VanillaGradients => d(
            "Vanilla Gradients",
            Gradients,
            "Requires a differentiable model with access to gradients.",
            true,
            "Deterministic.",
            vec![],
            "The magnitude of the change in the model's output given a small change to an input feature.",
            &["Erhan et al. 2009", "Simonyan et al. 2014"],
        ),
        MethodId::InputXGradient => d(
            "Input X Gradient",
            Gradients,
            "Requires a differentiable model and access to gradients.",
            true,
            "Deterministic.",
            vec![],
            "The input feature value weighted by the gradient.",
            &["Shrikumar et al. 2016"],
        ),
        MethodId::IntegratedGradients => d(
            "Integrated Gradients",
            Gradients,
            "Requires a differentiable model with access to gradients.",
            true,
            "Deterministic unless using a non-deterministic baseline.",
            vec![
                hp("baseline", "zero", "Reference input representing absence of signal: zero, mean, ones, or a number."),
                hp("steps", "64", "Number of midpoint-rule steps approximating the path integral."),
            ],
            "The accumulated gradient between the baseline input and the actual input.",
            &["Sundararajan et al. 2017"],
        ),
        MethodId::Smoothgrad => d(
            "SmoothGrad",
            Gradients,
            "Applicable to any gradient-capable saliency method.",
            false,
            "Non-deterministic noise perturbations.",
            vec![
                hp("base_method", "vanilla_gradients", "Saliency method whose maps are averaged."),
                hp("noise_std", "0.15 * (input max - input min)", "Standard deviation of the Gaussian input noise."),
                hp("samples", "25", "Number of noisy maps to average over."),
            ],
            "The average saliency across noisy versions of the input.",
            &["Smilkov et al. 2017"],
        ),
        MethodId::GuidedBackprop => d(
            "Guided BackProp",
            Gradients,
            "Requires a differentiable model with access to gradients.",
            true,
            "Deterministic.",
            vec![],
            "The gradient considering only paths through the model with positive gradients.",
            &["Springenberg et al. 2014"],
        ),
        MethodId::GradCam => d(
            "Grad-CAM",
            GradientsAndConv,
            "Requires a differentiable model, access to the gradients, and a convolutional layer.",
            true,
            "Deterministic.",
            vec![hp(
                "conv_layer_index",
                "last convolutional layer",
                "Model layer whose feature maps are gradient-weighted.",
            )],
            "The positive attributions of the gradient-weighted feature maps from an internal convolutional layer.",
            &["Selvaraju et al. 2017"],
        ),
        MethodId::Occlusion => d(
            "Occlusion",
            BlackBox,
            "No requirements on the model or access to internals.",
            true,
            "Deterministic.",
            vec![
                hp("window_side", "3", "Side length of the sliding replacement window."),
                hp("stride", "window_side", "Step between window positions."),
                hp("replacement", "0", "Replacement signal: a number, or zero/ones/mean."),
            ],
            "The change in the model's output when a window of input features is replaced with a baseline value.",
            &["Zeiler & Fergus 2014"],
        ),
        MethodId::Rise => d(
            "RISE",
            BlackBox,
            "No requirements on the model or access to internals.",
            false,
            "Non-deterministic mask generation.",
            vec![
                hp("mask_count", "1000", "Number of random masks."),
                hp("grid_side", "7", "Side of the coarse Bernoulli grid each mask is upsampled from."),
                hp("keep_prob", "0.5", "Probability a grid cell is kept."),
                hp("replacement", "0", "Signal masked-out features decay toward."),
            ],
            "The sum of input masks weighed by the model's confidence on the masked input.",
            &["Petsiuk et al. 2018"],
        ),
        MethodId::Lime => d(
            "LIME",
            BlackBox,
            "No requirements on the model or access to internals.",
            false,
            "Non-deterministic perturbations.",
            vec![
                hp("patch_grid", "7", "Patches per image side; features group into on/off patches."),
                hp("sample_count", "1000", "Number of binary perturbations (enumerated exhaustively when feasible)."),
                hp("kernel_width", "0.25", "Width of the exponential proximity kernel over the fraction of patches off."),
                hp("ridge_lambda", "1e-3", "Ridge regularization of the surrogate fit."),
                hp("replacement", "0", "Replacement signal for switched-off patches."),
            ],
            "The coefficients of a surrogate model trained to mimic the original model's local decision boundary for the input.",
            &["Ribeiro et al. 2016"],
        ),
        MethodId::KernelShap => d(
            "Kernel SHAP",
            BlackBox,
            "No requirements on the model or access to internals.",
            false,
            "Non-deterministic coalition sampling.",
            vec![
                hp("baseline", "zero", "Values masked-out features take: zero, mean, ones, or a number."),
                hp("coalition_budget", "2048", "Number of coalitions; enumerates exhaustively when the budget covers them all."),
            ],
            "The impact of each input feature on the output as defined by Shapley values.",
            &["Lundberg & Lee 2017"],
        ),
        MethodId::Sis => d(
            "SIS",
            Gradients,
            "This batched-gradient variant requires a differentiable model; plain SIS is black-box but prohibitively slow.",
            true,
            "Deterministic.",
            vec![
                hp("confidence_threshold", "0.5", "Confidence the surviving feature set must maintain."),
                hp("batch_fraction", "0.02", "Fraction of remaining features masked per backward-selection step."),
                hp("replacement", "0", "Replacement signal for masked features."),
            ],
            "The minimum set of input features necessary for the model to confidently produce the same output.",
            &["Carter et al. 2019"],
        ),
    }
}

/// Descriptors for all eleven methods.
pub fn registry() -> Vec<MethodDescriptor> {
    ALL_METHODS.iter().map(|&m| descriptor(m)).collect()
}

// ── Method parameters ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Number(f64),
    Text(String),
}

/// Flat key-value map of method hyperparameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodParams(BTreeMap<String, ParamValue>);

impl MethodParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_number(mut self, key: &str, value: f64) -> Self {
        self.0.insert(key.into(), ParamValue::Number(value));
        self
    }

    pub fn set_text(mut self, key: &str, value: &str) -> Self {
        self.0.insert(key.into(), ParamValue::Text(value.into()));
        self
    }

    pub fn insert(&mut self, key: &str, value: ParamValue) {
        self.0.insert(key.into(), value);
    }

    /// Parse a `key=value` argument; values that parse as numbers become
    /// numeric.
    pub fn parse_assignment(&mut self, text: &str) -> Result<()> {
        let (key, value) = text
            .split_once('=')
            .ok_or_else(|| CoreError::Precondition(format!("expected key=value, got {text:?}")))?;
        let value = match value.parse::<f64>() {
            Ok(n) => ParamValue::Number(n),
            Err(_) => ParamValue::Text(value.into()),
        };
        self.0.insert(key.trim().into(), value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&ParamValue> {
        self.0.get(key)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(|k| k.as_str())
    }

    pub fn number_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.0.get(key) {
            None => Ok(default),
            Some(ParamValue::Number(n)) => Ok(*n),
            Some(ParamValue::Text(t)) => t.parse::<f64>().map_err(|_| {
                CoreError::Precondition(format!("parameter {key} must be numeric, got {t:?}"))
            }),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        let v = self.number_or(key, default as f64)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(CoreError::Precondition(format!(
                "parameter {key} must be a non-negative integer, got {v}"
            )));
        }
        Ok(v as usize)
    }

    pub fn text(&self, key: &str) -> Option<String> {
        match self.0.get(key) {
            Some(ParamValue::Text(t)) => Some(t.clone()),
            Some(ParamValue::Number(n)) => Some(n.to_string()),
            None => None,
        }
    }
}

// ── Black-box model access ───────────────────────────────────────────

/// Predict-only view of a model. Black-box methods receive this trait and
/// therefore cannot reach the gradient tape.
pub trait Predictor {
    fn input_shape(&self) -> &[usize];
    fn class_count(&self) -> usize;
    fn logits(&self, input: &Tensor) -> Result<Tensor>;

    fn probabilities(&self, input: &Tensor) -> Result<Tensor> {
        Ok(softmax(&self.logits(input)?))
    }

    fn probability(&self, input: &Tensor, target: usize) -> Result<f64> {
        self.probabilities(input)?.get(target)
    }

    fn logit(&self, input: &Tensor, target: usize) -> Result<f64> {
        self.logits(input)?.get(target)
    }
}

impl Predictor for Model {
    fn input_shape(&self) -> &[usize] {
        Model::input_shape(self)
    }

    fn class_count(&self) -> usize {
        Model::class_count(self)
    }

    fn logits(&self, input: &Tensor) -> Result<Tensor> {
        forward(self, input).map(|(logits, _)| logits)
    }
}

// ── Uniform entry point ──────────────────────────────────────────────

/// Ambient data the flat parameter map cannot carry, such as the dataset
/// mean that `baseline = "mean"` resolves to.
#[derive(Debug, Clone, Default)]
pub struct ExplainContext {
    pub dataset_mean: Option<Tensor>,
}

impl ExplainContext {
    pub fn with_mean(mean: Tensor) -> Self {
        Self {
            dataset_mean: Some(mean),
        }
    }
}

/// Resolve a reference-signal parameter ("zero", "ones", "mean", or a
/// number) into a tensor of the input's shape.
pub(crate) fn resolve_reference(
    params: &MethodParams,
    key: &str,
    input: &Tensor,
    ctx: &ExplainContext,
) -> Result<Tensor> {
    match params.get(key) {
        None => Ok(Tensor::zeros(input.shape())),
        Some(ParamValue::Number(n)) => Tensor::full(input.shape(), *n),
        Some(ParamValue::Text(t)) => match t.as_str() {
            "zero" | "zeros" => Ok(Tensor::zeros(input.shape())),
            "one" | "ones" => Tensor::full(input.shape(), 1.0),
            "mean" => {
                let mean = ctx.dataset_mean.as_ref().ok_or_else(|| {
                    CoreError::Precondition(format!(
                        "{key} = \"mean\" requires a dataset mean in the explain context"
                    ))
                })?;
                mean.check_same_shape(input)?;
                Ok(mean.clone())
            }
            other => match other.parse::<f64>() {
                Ok(n) => Tensor::full(input.shape(), n),
                Err(_) => Err(CoreError::Precondition(format!(
                    "unknown {key} value {other:?}; expected zero, ones, mean, or a number"
                ))),
            },
        },
    }
}

/// A method plus the parameters to run it with; the unit the battery and
/// metrics operate on.
#[derive(Debug, Clone)]
pub struct MethodSpec {
    pub method: MethodId,
    pub params: MethodParams,
}

impl MethodSpec {
    pub fn new(method: MethodId) -> Self {
        Self {
            method,
            params: MethodParams::new(),
        }
    }

    pub fn with_params(method: MethodId, params: MethodParams) -> Self {
        Self { method, params }
    }

    pub fn run(
        &self,
        model: &Model,
        input: &Tensor,
        target: usize,
        seed: u64,
        ctx: &ExplainContext,
    ) -> Result<SaliencyMap> {
        explain(model, input, target, self.method, &self.params, seed, ctx)
    }
}

/// Compute a saliency map with the named method.
pub fn explain(
    model: &Model,
    input: &Tensor,
    target: usize,
    method: MethodId,
    params: &MethodParams,
    seed: u64,
    ctx: &ExplainContext,
) -> Result<SaliencyMap> {
    if target >= model.class_count() {
        return Err(CoreError::IndexOutOfRange {
            index: target,
            limit: model.class_count(),
        });
    }
    let (values, stochastic) = explain_values(model, input, target, method, params, seed, ctx)?;
    if !values.all_finite() {
        return Err(CoreError::NonFinite(format!("{method} saliency map")));
    }
    Ok(SaliencyMap {
        method,
        target,
        seed: stochastic.then_some(seed),
        values,
    })
}

/// Method dispatch; returns the raw values and whether the run consumed
/// randomness.
fn explain_values(
    model: &Model,
    input: &Tensor,
    target: usize,
    method: MethodId,
    params: &MethodParams,
    seed: u64,
    ctx: &ExplainContext,
) -> Result<(Tensor, bool)> {
    match method {
        MethodId::VanillaGradients => Ok((vanilla_gradients(model, input, target)?, false)),
        MethodId::InputXGradient => Ok((input_x_gradient(model, input, target)?, false)),
        MethodId::IntegratedGradients => {
            let baseline = resolve_reference(params, "baseline", input, ctx)?;
            let steps = params.usize_or("steps", 64)?;
            Ok((
                integrated_gradients(model, input, target, &baseline, steps)?,
                false,
            ))
        }
        MethodId::Smoothgrad => smoothgrad_values(model, input, target, params, seed, ctx),
        MethodId::GuidedBackprop => Ok((guided_backprop(model, input, target)?, false)),
        MethodId::GradCam => {
            let layer = match params.get("conv_layer_index") {
                Some(_) => Some(params.usize_or("conv_layer_index", 0)?),
                None => None,
            };
            Ok((grad_cam(model, input, target, layer)?, false))
        }
        MethodId::Occlusion => {
            let window = params.usize_or("window_side", 3)?;
            let stride = params.usize_or("stride", window)?;
            let replacement = resolve_reference(params, "replacement", input, ctx)?;
            Ok((
                occlusion(model, input, target, window, stride, &replacement)?,
                false,
            ))
        }
        MethodId::Rise => {
            let cfg = RiseConfig {
                mask_count: params.usize_or("mask_count", 1000)?,
                grid_side: params.usize_or("grid_side", 7)?,
                keep_prob: params.number_or("keep_prob", 0.5)?,
                replacement: resolve_reference(params, "replacement", input, ctx)?,
            };
            Ok((rise(model, input, target, &cfg, seed)?, true))
        }
        MethodId::Lime => {
            let cfg = LimeConfig {
                patch_grid: params.usize_or("patch_grid", 7)?,
                sample_count: params.usize_or("sample_count", 1000)?,
                kernel_width: params.number_or("kernel_width", 0.25)?,
                ridge_lambda: params.number_or("ridge_lambda", 1e-3)?,
                replacement: resolve_reference(params, "replacement", input, ctx)?,
            };
            Ok((lime(model, input, target, &cfg, seed)?, true))
        }
        MethodId::KernelShap => {
            let baseline = resolve_reference(params, "baseline", input, ctx)?;
            let budget = params.usize_or("coalition_budget", 2048)?;
            let (values, enumerated) = kernel_shap(model, input, target, &baseline, budget, seed)?;
            Ok((values, !enumerated))
        }
        MethodId::Sis => {
            let cfg = SisConfig {
                confidence_threshold: params.number_or("confidence_threshold", 0.5)?,
                batch_fraction: params.number_or("batch_fraction", 0.02)?,
                replacement: resolve_reference(params, "replacement", input, ctx)?,
            };
            Ok((sis(model, input, target, &cfg)?, false))
        }
    }
}

fn smoothgrad_values(
    model: &Model,
    input: &Tensor,
    target: usize,
    params: &MethodParams,
    seed: u64,
    ctx: &ExplainContext,
) -> Result<(Tensor, bool)> {
    let base_name = params
        .text("base_method")
        .unwrap_or_else(|| "vanilla_gradients".into());
    let base: MethodId = base_name.parse()?;
    if base == MethodId::Smoothgrad {
        return Err(CoreError::Method(
            "smoothgrad cannot use itself as the base method".into(),
        ));
    }
    let default_std = 0.15 * (input.max() - input.min());
    let noise_std = params.number_or("noise_std", default_std)?;
    if noise_std < 0.0 {
        return Err(CoreError::Precondition("noise_std must be >= 0".into()));
    }
    let samples = params.usize_or("samples", 25)?;
    if samples < 1 {
        return Err(CoreError::Precondition("samples must be at least 1".into()));
    }
    if noise_std == 0.0 {
        // Zero noise: every sample equals the base map.
        return explain_values(model, input, target, base, params, seed, ctx);
    }
    let mut acc = Tensor::zeros(input.shape());
    for k in 0..samples {
        let noisy = crate::data::perturb(
            input,
            &crate::data::Perturbation::GaussianNoise { std: noise_std },
            crate::rng::split_seed(seed, k as u64),
        )?;
        let (map, _) = explain_values(
            model,
            &noisy,
            target,
            base,
            params,
            crate::rng::split_seed(seed, 1000 + k as u64),
            ctx,
        )?;
        acc = acc.add(&map)?;
    }
    Ok((acc.scale(1.0 / samples as f64), true))
}

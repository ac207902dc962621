//! Reverse-mode automatic differentiation over a recorded forward tape.
//!
//! [`forward`] runs a model on an input and records every intermediate
//! activation. [`backward`] replays the tape in reverse to produce the
//! gradient of one logit with respect to the input; [`backward_with_params`]
//! additionally accumulates weight and bias gradients for training.
//!
//! The ReLU backward at exactly 0 uses subgradient 0. The guided rule
//! zeroes a ReLU's backward flow wherever the forward input was <= 0 or the
//! incoming gradient is <= 0; it is a backward-pass mode so one tape serves
//! both rules.

use crate::error::{CoreError, Result};
use crate::model::{Layer, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluRule {
    Standard,
    Guided,
}

#[derive(Debug, Clone, Copy)]
enum TapeOp {
    Input,
    /// `layer` indexes into the model's layer list.
    Layer { layer: usize },
}

struct TapeNode {
    op: TapeOp,
    value: Tensor,
}

/// Recorded forward pass: one node per layer output, topologically ordered
/// (node 0 is the input; node i's parent is node i-1).
pub struct Tape<'m> {
    model: &'m Model,
    nodes: Vec<TapeNode>,
}

/// Per-layer parameter gradients, aligned with the model's layer list.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl<'m> Tape<'m> {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Cached activation of a node.
    pub fn activation(&self, node: usize) -> Result<&Tensor> {
        self.nodes
            .get(node)
            .map(|n| &n.value)
            .ok_or(CoreError::IndexOutOfRange {
                index: node,
                limit: self.nodes.len(),
            })
    }

    /// Node holding the output of model layer `layer`.
    pub fn node_for_layer(&self, layer: usize) -> Result<usize> {
        let node = layer + 1;
        if node < self.nodes.len() {
            Ok(node)
        } else {
            Err(CoreError::IndexOutOfRange {
                index: layer,
                limit: self.model.layers().len(),
            })
        }
    }

    pub fn logits(&self) -> &Tensor {
        &self.nodes.last().expect("tape has at least the input").value
    }

    /// Recompute every activation from the input leaf and check that the
    /// cached values are reproduced bit-for-bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let mut value = self.nodes[0].value.clone();
        for node in &self.nodes[1..] {
            let layer = match node.op {
                TapeOp::Layer { layer } => layer,
                TapeOp::Input => unreachable!("input occurs only at node 0"),
            };
            value = apply_layer(&self.model.layers()[layer], &value)?;
            if value.data() != node.value.data() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn apply_layer(layer: &Layer, input: &Tensor) -> Result<Tensor> {
    match layer {
        Layer::Dense { weights, bias } => dense_forward(weights, bias, input),
        Layer::Conv2d { weights, bias } => conv2d_forward(weights, bias, input),
        Layer::Relu => Ok(input.map(|v| if v > 0.0 { v } else { 0.0 })),
        Layer::Flatten => input.reshape(vec![input.len()]),
    }
}

fn dense_forward(weights: &Tensor, bias: &Tensor, input: &Tensor) -> Result<Tensor> {
    let out_dim = weights.shape()[0];
    let in_dim = weights.shape()[1];
    if input.shape() != [in_dim] {
        return Err(CoreError::ShapeMismatch {
            expected: vec![in_dim],
            actual: input.shape().to_vec(),
        });
    }
    let w = weights.data();
    let x = input.data();
    let mut out = bias.data().to_vec();
    for (o, out_v) in out.iter_mut().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        *out_v += row.iter().zip(x).map(|(&wi, &xi)| wi * xi).sum::<f64>();
    }
    Ok(Tensor::from_raw(vec![out_dim], out))
}

/// Spatial view of a conv input: `[h, w]` is treated as one channel.
fn conv_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w] => Ok((1, *h, *w)),
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(CoreError::Model(format!(
            "conv2d expects rank-2 or rank-3 input, got {other:?}"
        ))),
    }
}

fn conv2d_forward(weights: &Tensor, bias: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (in_ch, h, w) = conv_dims(input.shape())?;
    let [oc, ic, kh, kw] = [
        weights.shape()[0],
        weights.shape()[1],
        weights.shape()[2],
        weights.shape()[3],
    ];
    if ic != in_ch {
        return Err(CoreError::ShapeMismatch {
            expected: vec![ic, h, w],
            actual: input.shape().to_vec(),
        });
    }
    let ph = (kh - 1) / 2;
    let pw = (kw - 1) / 2;
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0; oc * h * w];
    for o in 0..oc {
        let b = bias.data()[o];
        for i in 0..h {
            for j in 0..w {
                let mut acc = b;
                for c in 0..in_ch {
                    for u in 0..kh {
                        let src_i = i as isize + u as isize - ph as isize;
                        if src_i < 0 || src_i >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let src_j = j as isize + v as isize - pw as isize;
                            if src_j < 0 || src_j >= w as isize {
                                continue;
                            }
                            acc += wt[((o * ic + c) * kh + u) * kw + v]
                                * x[(c * h + src_i as usize) * w + src_j as usize];
                        }
                    }
                }
                out[(o * h + i) * w + j] = acc;
            }
        }
    }
    Ok(Tensor::from_raw(vec![oc, h, w], out))
}

/// Run the model forward, recording every intermediate activation.
pub fn forward<'m>(model: &'m Model, input: &Tensor) -> Result<(Tensor, Tape<'m>)> {
    if input.shape() != model.input_shape() {
        return Err(CoreError::ShapeMismatch {
            expected: model.input_shape().to_vec(),
            actual: input.shape().to_vec(),
        });
    }
    if !input.all_finite() {
        return Err(CoreError::NonFinite("model input".into()));
    }
    let mut nodes = vec![TapeNode {
        op: TapeOp::Input,
        value: input.clone(),
    }];
    for (i, layer) in model.layers().iter().enumerate() {
        let value = apply_layer(layer, &nodes.last().unwrap().value)?;
        if !value.all_finite() {
            return Err(CoreError::NonFinite(format!(
                "activation of layer {i} ({})",
                layer.kind()
            )));
        }
        nodes.push(TapeNode {
            op: TapeOp::Layer { layer: i },
            value,
        });
    }
    let logits = nodes.last().unwrap().value.clone();
    if logits.shape() != [model.class_count()] {
        return Err(CoreError::Model(format!(
            "model produced {:?} outputs, expected [{}]",
            logits.shape(),
            model.class_count()
        )));
    }
    Ok((logits, Tape { model, nodes }))
}

/// Gradient of `logit[target]` with respect to the input.
pub fn backward(tape: &Tape, target: usize, rule: ReluRule) -> Result<Tensor> {
    let classes = tape.model.class_count();
    if target >= classes {
        return Err(CoreError::IndexOutOfRange {
            index: target,
            limit: classes,
        });
    }
    let mut seed = Tensor::zeros(&[classes]);
    seed.data_mut()[target] = 1.0;
    backward_seeded(tape, &seed, rule)
}

/// Gradient of `seed . logits` with respect to the input; the backward pass
/// is linear in `seed`.
pub fn backward_seeded(tape: &Tape, seed: &Tensor, rule: ReluRule) -> Result<Tensor> {
    let grads = node_gradients(tape, seed, rule)?;
    Ok(grads.into_iter().next().expect("input node exists"))
}

/// Gradients of `seed . logits` at every node, input first.
pub fn node_gradients(tape: &Tape, seed: &Tensor, rule: ReluRule) -> Result<Vec<Tensor>> {
    let (input_and_nodes, _) = backward_impl(tape, seed, rule, false)?;
    Ok(input_and_nodes)
}

/// Input gradient plus per-layer parameter gradients (standard rule).
pub fn backward_with_params(tape: &Tape, seed: &Tensor) -> Result<(Tensor, Vec<ParamGrad>)> {
    let (nodes, params) = backward_impl(tape, seed, ReluRule::Standard, true)?;
    Ok((nodes.into_iter().next().unwrap(), params))
}

fn backward_impl(
    tape: &Tape,
    seed: &Tensor,
    rule: ReluRule,
    want_params: bool,
) -> Result<(Vec<Tensor>, Vec<ParamGrad>)> {
    let logits = tape.logits();
    if seed.shape() != logits.shape() {
        return Err(CoreError::ShapeMismatch {
            expected: logits.shape().to_vec(),
            actual: seed.shape().to_vec(),
        });
    }
    let n = tape.nodes.len();
    let mut grads: Vec<Tensor> = tape
        .nodes
        .iter()
        .map(|node| Tensor::zeros(node.value.shape()))
        .collect();
    grads[n - 1] = seed.clone();
    let mut params: Vec<ParamGrad> = if want_params {
        tape.model
            .layers()
            .iter()
            .map(|_| ParamGrad {
                weights: None,
                bias: None,
            })
            .collect()
    } else {
        Vec::new()
    };

    for i in (1..n).rev() {
        let layer_idx = match tape.nodes[i].op {
            TapeOp::Layer { layer } => layer,
            TapeOp::Input => unreachable!(),
        };
        let layer = &tape.model.layers()[layer_idx];
        let upstream = grads[i].clone();
        let parent_value = &tape.nodes[i - 1].value;
        let parent_grad = match layer {
            Layer::Dense { weights, .. } => {
                let in_dim = weights.shape()[1];
                let out_dim = weights.shape()[0];
                let w = weights.data();
                let g = upstream.data();
                let mut dx = vec![0.0; in_dim];
                for o in 0..out_dim {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    let row = &w[o * in_dim..(o + 1) * in_dim];
                    for (dxi, &wi) in dx.iter_mut().zip(row) {
                        *dxi += wi * go;
                    }
                }
                if want_params {
                    let x = parent_value.data();
                    let mut dw = vec![0.0; out_dim * in_dim];
                    for o in 0..out_dim {
                        let go = g[o];
                        if go != 0.0 {
                            for (k, &xk) in x.iter().enumerate() {
                                dw[o * in_dim + k] = go * xk;
                            }
                        }
                    }
                    accumulate_param(
                        &mut params[layer_idx],
                        Tensor::from_raw(weights.shape().to_vec(), dw),
                        upstream.clone(),
                    )?;
                }
                Tensor::from_raw(parent_value.shape().to_vec(), dx)
            }
            Layer::Conv2d { weights, .. } => {
                let (dx, dw, db) =
                    conv2d_backward(weights, parent_value, &upstream, want_params)?;
                if want_params {
                    accumulate_param(&mut params[layer_idx], dw.unwrap(), db.unwrap())?;
                }
                dx
            }
            Layer::Relu => {
                let x = parent_value.data();
                let g = upstream.data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| {
                        let pass = xi > 0.0 && (rule == ReluRule::Standard || gi > 0.0);
                        if pass {
                            gi
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Tensor::from_raw(parent_value.shape().to_vec(), dx)
            }
            Layer::Flatten => upstream.reshape(parent_value.shape().to_vec())?,
        };
        grads[i - 1] = grads[i - 1].add(&parent_grad)?;
    }
    Ok((grads, params))
}

fn accumulate_param(slot: &mut ParamGrad, dw: Tensor, db: Tensor) -> Result<()> {
    slot.weights = Some(match slot.weights.take() {
        Some(acc) => acc.add(&dw)?,
        None => dw,
    });
    slot.bias = Some(match slot.bias.take() {
        Some(acc) => acc.add(&db)?,
        None => db,
    });
    Ok(())
}

#[allow(clippy::type_complexity)]
fn conv2d_backward(
    weights: &Tensor,
    input: &Tensor,
    upstream: &Tensor,
    want_params: bool,
) -> Result<(Tensor, Option<Tensor>, Option<Tensor>)> {
    let (in_ch, h, w) = conv_dims(input.shape())?;
    let [oc, ic, kh, kw] = [
        weights.shape()[0],
        weights.shape()[1],
        weights.shape()[2],
        weights.shape()[3],
    ];
    debug_assert_eq!(ic, in_ch);
    let ph = (kh - 1) / 2;
    let pw = (kw - 1) / 2;
    let x = input.data();
    let wt = weights.data();
    let g = upstream.data();

    let mut dx = vec![0.0; x.len()];
    let mut dw = if want_params {
        vec![0.0; wt.len()]
    } else {
        Vec::new()
    };
    let mut db = if want_params { vec![0.0; oc] } else { Vec::new() };

    for o in 0..oc {
        for i in 0..h {
            for j in 0..w {
                let go = g[(o * h + i) * w + j];
                if go == 0.0 {
                    continue;
                }
                if want_params {
                    db[o] += go;
                }
                for c in 0..in_ch {
                    for u in 0..kh {
                        let src_i = i as isize + u as isize - ph as isize;
                        if src_i < 0 || src_i >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let src_j = j as isize + v as isize - pw as isize;
                            if src_j < 0 || src_j >= w as isize {
                                continue;
                            }
                            let xi = (c * h + src_i as usize) * w + src_j as usize;
                            let wi = ((o * ic + c) * kh + u) * kw + v;
                            dx[xi] += wt[wi] * go;
                            if want_params {
                                dw[wi] += x[xi] * go;
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = Tensor::from_raw(input.shape().to_vec(), dx);
    if want_params {
        Ok((
            dx,
            Some(Tensor::from_raw(weights.shape().to_vec(), dw)),
            Some(Tensor::from_raw(vec![oc], db)),
        ))
    } else {
        Ok((dx, None, None))
    }
}

/// Worst relative error between the analytic input gradient and central
/// finite differences of `logit[target]`, stepping `step` per coordinate.
/// Relative error uses a 1e-2 magnitude floor so zero gradients compare
/// cleanly.
pub fn grad_check(model: &Model, input: &Tensor, target: usize, step: f64) -> Result<f64> {
    let (_, tape) = forward(model, input)?;
    let analytic = backward(&tape, target, ReluRule::Standard)?;
    compare_to_central_diff(model, input, target, step, &analytic)
}

/// Central-difference comparison against a supplied gradient; the analytic
/// side is a parameter so tests can feed deliberately corrupted gradients.
pub fn compare_to_central_diff(
    model: &Model,
    input: &Tensor,
    target: usize,
    step: f64,
    analytic: &Tensor,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(CoreError::Precondition(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    analytic.check_same_shape(input)?;
    let mut worst = 0.0f64;
    let mut probe = input.clone();
    for i in 0..input.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + step;
        let (hi, _) = forward(model, &probe)?;
        probe.data_mut()[i] = original - step;
        let (lo, _) = forward(model, &probe)?;
        probe.data_mut()[i] = original;
        let numeric = (hi.get(target)? - lo.get(target)?) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-2);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use rand::Rng;

    fn lin3_input() -> Tensor {
        Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn lin3_forward_matches_dot_product() {
        let model = fixtures::lin3();
        let (logits, tape) = forward(&model, &lin3_input()).unwrap();
        assert_eq!(logits.data(), &[2.0, 0.0]);
        assert_eq!(tape.node_count(), 2);
    }

    #[test]
    fn zero_input_through_bias_free_model_gives_zero_logits() {
        let model = fixtures::random_dense_relu(3, 5, 7, 4);
        let x = Tensor::zeros(&[5]);
        let (logits, _) = forward(&model, &x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let model = fixtures::lin3();
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            forward(&model, &x),
            Err(CoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn lin3_backward_returns_weight_row() {
        let model = fixtures::lin3();
        let (_, tape) = forward(&model, &lin3_input()).unwrap();
        let grad = backward(&tape, 0, ReluRule::Standard).unwrap();
        assert_eq!(grad.data(), &[1.0, -2.0, 3.0]);
        let grad1 = backward(&tape, 1, ReluRule::Standard).unwrap();
        assert_eq!(grad1.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_out_of_range_target() {
        let model = fixtures::lin3();
        let (_, tape) = forward(&model, &lin3_input()).unwrap();
        assert!(matches!(
            backward(&tape, 2, ReluRule::Standard),
            Err(CoreError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences_on_relu_net() {
        let model = fixtures::random_dense_relu(17, 6, 10, 3);
        let mut rng = crate::rng::rng_from(2);
        for _ in 0..5 {
            let x = Tensor::vector((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let err = grad_check(&model, &x, 1, 1e-5).unwrap();
            assert!(err < 1e-6, "gradient error {err}");
        }
    }

    #[test]
    fn grad_check_is_tight_on_linear_model() {
        let model = fixtures::lin3();
        let err = grad_check(&model, &lin3_input(), 0, 1e-4).unwrap();
        assert!(err < 1e-10, "linear model error {err}");
    }

    #[test]
    fn corrupted_gradient_fails_the_check() {
        let model = fixtures::random_dense_relu(23, 6, 10, 3);
        let x = Tensor::vector(vec![0.4, -0.2, 0.9, 0.1, -0.5, 0.3]).unwrap();
        let (_, tape) = forward(&model, &x).unwrap();
        let corrupted = backward(&tape, 0, ReluRule::Standard).unwrap().scale(1.1);
        let err = compare_to_central_diff(&model, &x, 0, 1e-5, &corrupted).unwrap();
        assert!(err > 1e-2, "corrupted gradient error only {err}");
    }

    #[test]
    fn backward_is_linear_in_the_seed() {
        let model = fixtures::random_cnn(5, 8, 3);
        let x = fixtures::random_input(model.input_shape(), 9);
        let (_, tape) = forward(&model, &x).unwrap();
        let seed = Tensor::vector(vec![0.3, -1.2, 0.7]).unwrap();
        let g1 = backward_seeded(&tape, &seed, ReluRule::Standard).unwrap();
        let g2 = backward_seeded(&tape, &seed.scale(2.5), ReluRule::Standard).unwrap();
        let diff = g2.sub(&g1.scale(2.5)).unwrap().max_abs();
        assert!(diff < 1e-12, "seed linearity violated by {diff}");
    }

    #[test]
    fn replay_reproduces_cached_activations() {
        let model = fixtures::random_cnn(5, 8, 3);
        let x = fixtures::random_input(model.input_shape(), 4);
        let (_, tape) = forward(&model, &x).unwrap();
        assert!(tape.replay_matches().unwrap());
    }

    #[test]
    fn guided_rule_zeroes_blocked_paths() {
        // One dense unit into relu: x -> relu(w.x) -> logits.
        // With a negative upstream weight the guided rule blocks the path.
        let model = fixtures::two_unit_relu_net();
        let x = Tensor::vector(vec![1.0, 0.5]).unwrap();
        let (_, tape) = forward(&model, &x).unwrap();
        let standard = backward(&tape, 0, ReluRule::Standard).unwrap();
        let guided = backward(&tape, 0, ReluRule::Guided).unwrap();
        // Unit 0 feeds logit 0 positively, unit 1 negatively; guided keeps
        // only the positive-gradient path.
        assert_ne!(standard.data(), guided.data());
        let (w_pos, _) = fixtures::two_unit_relu_weights();
        assert_eq!(guided.data(), &[w_pos.0, w_pos.1]);
    }

    #[test]
    fn guided_equals_standard_without_relu() {
        let model = fixtures::lin3();
        let (_, tape) = forward(&model, &lin3_input()).unwrap();
        let s = backward(&tape, 0, ReluRule::Standard).unwrap();
        let g = backward(&tape, 0, ReluRule::Guided).unwrap();
        assert_eq!(s.data(), g.data());
    }

    #[test]
    fn conv_param_gradients_match_finite_differences() {
        let model = fixtures::random_cnn(7, 6, 3);
        let x = fixtures::random_input(model.input_shape(), 3);
        let (logits, tape) = forward(&model, &x).unwrap();
        let mut seed = Tensor::zeros(logits.shape());
        seed.data_mut()[1] = 1.0;
        let (_, params) = backward_with_params(&tape, &seed).unwrap();

        // Check a few weight coordinates of each parameterized layer by
        // central differences on logit 1.
        let h = 1e-6;
        for (li, grad) in params.iter().enumerate() {
            let Some(dw) = &grad.weights else { continue };
            for &k in &[0usize, dw.len() / 2, dw.len() - 1] {
                let mut bumped = model.clone();
                let perturb = |m: &mut Model, delta: f64| {
                    if let Layer::Dense { weights, .. } | Layer::Conv2d { weights, .. } =
                        &mut m.layers_mut()[li]
                    {
                        weights.data_mut()[k] += delta;
                    }
                };
                perturb(&mut bumped, h);
                let (hi, _) = forward(&bumped, &x).unwrap();
                perturb(&mut bumped, -2.0 * h);
                let (lo, _) = forward(&bumped, &x).unwrap();
                let numeric = (hi.get(1).unwrap() - lo.get(1).unwrap()) / (2.0 * h);
                let analytic = dw.data()[k];
                assert!(
                    (numeric - analytic).abs() < 1e-4 * analytic.abs().max(1.0),
                    "layer {li} weight {k}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }
}

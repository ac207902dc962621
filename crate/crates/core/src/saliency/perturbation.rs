//! Perturbation-based black-box attribution: occlusion, RISE, and LIME.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::linalg::weighted_ridge;
use crate::rng::rng_split;
use crate::tensor::Tensor;

use super::gradients::bilinear_resize;
use super::Predictor;

/// Spatial extent of an input: rank-1 is (1, d), images are (h, w) with any
/// leading channel treated as part of every window.
fn spatial_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [d] => Ok((1, *d)),
        [h, w] => Ok((*h, *w)),
        [_, h, w] => Ok((*h, *w)),
        other => Err(CoreError::Method(format!(
            "unsupported input shape {other:?}"
        ))),
    }
}

fn window_starts(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    if window >= dim {
        return vec![0];
    }
    let last = dim - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

/// Mean over covering windows of the drop in `logit[target]` when the
/// window is replaced with the baseline signal.
pub fn occlusion(
    model: &dyn Predictor,
    input: &Tensor,
    target: usize,
    window: usize,
    stride: usize,
    replacement: &Tensor,
) -> Result<Tensor> {
    if window < 1 || stride < 1 {
        return Err(CoreError::Precondition(
            "occlusion window and stride must be at least 1".into(),
        ));
    }
    input.check_same_shape(replacement)?;
    let (h, w) = spatial_dims(input.shape())?;
    let channels = input.len() / (h * w);
    let base = model.logit(input, target)?;

    let mut acc = vec![0.0; input.len()];
    let mut count = vec![0usize; input.len()];
    for &r0 in &window_starts(h, window, stride) {
        for &c0 in &window_starts(w, window, stride) {
            let r1 = (r0 + window).min(h);
            let c1 = (c0 + window).min(w);
            let mut masked = input.clone();
            let mut covered = Vec::with_capacity(channels * window * window);
            for ch in 0..channels {
                for r in r0..r1 {
                    for c in c0..c1 {
                        let idx = (ch * h + r) * w + c;
                        masked.data_mut()[idx] = replacement.data()[idx];
                        covered.push(idx);
                    }
                }
            }
            let diff = base - model.logit(&masked, target)?;
            for idx in covered {
                acc[idx] += diff;
                count[idx] += 1;
            }
        }
    }
    for (a, &c) in acc.iter_mut().zip(&count) {
        if c > 0 {
            *a /= c as f64;
        }
    }
    Ok(Tensor::from_raw(input.shape().to_vec(), acc))
}

#[derive(Debug, Clone)]
pub struct RiseConfig {
    pub mask_count: usize,
    pub grid_side: usize,
    pub keep_prob: f64,
    pub replacement: Tensor,
}

/// Confidence-weighted average of random soft masks: each mask is a coarse
/// Bernoulli grid bilinearly upsampled with a random sub-cell shift.
pub fn rise(
    model: &dyn Predictor,
    input: &Tensor,
    target: usize,
    cfg: &RiseConfig,
    seed: u64,
) -> Result<Tensor> {
    if cfg.mask_count < 1 {
        return Err(CoreError::Precondition("rise needs at least one mask".into()));
    }
    if cfg.grid_side < 1 {
        return Err(CoreError::Precondition("rise grid side must be >= 1".into()));
    }
    if cfg.keep_prob <= 0.0 || cfg.keep_prob > 1.0 {
        return Err(CoreError::Precondition(format!(
            "rise keep probability must be in (0, 1], got {}",
            cfg.keep_prob
        )));
    }
    input.check_same_shape(&cfg.replacement)?;
    let (h, w) = spatial_dims(input.shape())?;
    let channels = input.len() / (h * w);

    let mut acc = vec![0.0; input.len()];
    for n in 0..cfg.mask_count {
        let mut rng = rng_split(seed, n as u64);
        let mask = sample_mask(&mut rng, h, w, cfg.grid_side, cfg.keep_prob);
        // masked = replacement + mask * (input - replacement)
        let mut masked = input.clone();
        for ch in 0..channels {
            for (i, &m) in mask.iter().enumerate() {
                let idx = ch * h * w + i;
                let r = cfg.replacement.data()[idx];
                masked.data_mut()[idx] = r + m * (input.data()[idx] - r);
            }
        }
        let score = model.probability(&masked, target)?;
        for ch in 0..channels {
            for (i, &m) in mask.iter().enumerate() {
                acc[ch * h * w + i] += score * m;
            }
        }
    }
    let norm = 1.0 / (cfg.mask_count as f64 * cfg.keep_prob);
    Ok(Tensor::from_raw(
        input.shape().to_vec(),
        acc.into_iter().map(|v| v * norm).collect(),
    ))
}

/// One soft mask in [0, 1]^(h*w): a (g+2)x(g+2) Bernoulli grid sampled
/// bilinearly at a random sub-cell offset.
fn sample_mask(
    rng: &mut impl Rng,
    h: usize,
    w: usize,
    grid_side: usize,
    keep_prob: f64,
) -> Vec<f64> {
    let g = grid_side;
    let cell_h = h.div_ceil(g).max(1) as f64;
    let cell_w = w.div_ceil(g).max(1) as f64;
    let pts = g + 2;
    let grid: Vec<f64> = (0..pts * pts)
        .map(|_| if rng.gen::<f64>() < keep_prob { 1.0 } else { 0.0 })
        .collect();
    let dy: f64 = rng.gen_range(0.0..cell_h);
    let dx: f64 = rng.gen_range(0.0..cell_w);

    let mut mask = Vec::with_capacity(h * w);
    for r in 0..h {
        let y = (r as f64 + dy) / cell_h;
        let y0 = (y.floor() as usize).min(pts - 2);
        let fy = y - y0 as f64;
        for c in 0..w {
            let x = (c as f64 + dx) / cell_w;
            let x0 = (x.floor() as usize).min(pts - 2);
            let fx = x - x0 as f64;
            let v = grid[y0 * pts + x0] * (1.0 - fy) * (1.0 - fx)
                + grid[y0 * pts + x0 + 1] * (1.0 - fy) * fx
                + grid[(y0 + 1) * pts + x0] * fy * (1.0 - fx)
                + grid[(y0 + 1) * pts + x0 + 1] * fy * fx;
            mask.push(v.clamp(0.0, 1.0));
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct LimeConfig {
    pub patch_grid: usize,
    pub sample_count: usize,
    pub kernel_width: f64,
    pub ridge_lambda: f64,
    pub replacement: Tensor,
}

/// Assign every feature to a grid patch; returns (assignment, patch count).
fn patch_assignment(shape: &[usize], grid: usize) -> Result<(Vec<usize>, usize)> {
    let (h, w) = spatial_dims(shape)?;
    let numel: usize = shape.iter().product();
    let channels = numel / (h * w);
    if h == 1 {
        // Rank-1: contiguous segments.
        let cell = w.div_ceil(grid).max(1);
        let patches = w.div_ceil(cell);
        let assign = (0..w).map(|i| i / cell).collect();
        return Ok((assign, patches));
    }
    let cell_h = h.div_ceil(grid).max(1);
    let cell_w = w.div_ceil(grid).max(1);
    let cols = w.div_ceil(cell_w);
    let rows = h.div_ceil(cell_h);
    let mut assign = Vec::with_capacity(numel);
    for _ in 0..channels {
        for r in 0..h {
            for c in 0..w {
                assign.push((r / cell_h) * cols + c / cell_w);
            }
        }
    }
    Ok((assign, rows * cols))
}

/// Weighted ridge surrogate over binary patch perturbations; each patch's
/// coefficient is broadcast to its pixels. Enumerates all on/off patterns
/// when the sample budget covers them.
pub fn lime(
    model: &dyn Predictor,
    input: &Tensor,
    target: usize,
    cfg: &LimeConfig,
    seed: u64,
) -> Result<Tensor> {
    if cfg.patch_grid < 1 || cfg.sample_count < 1 {
        return Err(CoreError::Precondition(
            "lime needs a positive patch grid and sample count".into(),
        ));
    }
    if cfg.kernel_width <= 0.0 {
        return Err(CoreError::Precondition(
            "lime kernel width must be positive".into(),
        ));
    }
    input.check_same_shape(&cfg.replacement)?;
    let (assign, patches) = patch_assignment(input.shape(), cfg.patch_grid)?;

    let exhaustive = patches <= 16 && cfg.sample_count >= (1usize << patches);
    let combos: Vec<Vec<bool>> = if exhaustive {
        (0..(1usize << patches))
            .map(|bits| (0..patches).map(|p| bits >> p & 1 == 1).collect())
            .collect()
    } else {
        let mut rng = rng_split(seed, 0);
        (0..cfg.sample_count)
            .map(|_| (0..patches).map(|_| rng.gen::<bool>()).collect())
            .collect()
    };
    if combos.windows(2).all(|w| w[0] == w[1]) && combos.len() > 1 {
        return Err(CoreError::DegenerateSampling(
            "all lime perturbations are identical".into(),
        ));
    }

    let mut xs = Vec::with_capacity(combos.len());
    let mut ys = Vec::with_capacity(combos.len());
    let mut weights = Vec::with_capacity(combos.len());
    for z in &combos {
        let mut masked = input.clone();
        for (idx, &patch) in assign.iter().enumerate() {
            if !z[patch] {
                masked.data_mut()[idx] = cfg.replacement.data()[idx];
            }
        }
        let y = model.probability(&masked, target)?;
        let off_frac = z.iter().filter(|&&on| !on).count() as f64 / patches as f64;
        let weight = (-off_frac * off_frac / (cfg.kernel_width * cfg.kernel_width)).exp();
        let mut row = Vec::with_capacity(patches + 1);
        row.push(1.0);
        row.extend(z.iter().map(|&on| if on { 1.0 } else { 0.0 }));
        xs.push(row);
        ys.push(y);
        weights.push(weight);
    }

    let mut penalize = vec![true; patches + 1];
    penalize[0] = false; // intercept
    let beta = weighted_ridge(&xs, &ys, &weights, cfg.ridge_lambda, &penalize, patches + 1)
        .map_err(|e| match e {
            CoreError::SingularSystem => CoreError::DegenerateSampling(
                "lime surrogate regression is singular; increase samples or ridge_lambda".into(),
            ),
            other => other,
        })?;

    let values = assign.iter().map(|&p| beta[p + 1]).collect();
    Ok(Tensor::from_raw(input.shape().to_vec(), values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::Model;
    use crate::saliency::Predictor;

    fn lin3_x() -> Tensor {
        Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn occlusion_window_one_on_lin3_recovers_weights() {
        let model = fixtures::lin3();
        let map = occlusion(&model, &lin3_x(), 0, 1, 1, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(map.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn occlusion_with_input_as_replacement_is_zero() {
        let model = fixtures::lin3();
        let map = occlusion(&model, &lin3_x(), 0, 1, 1, &lin3_x()).unwrap();
        assert_eq!(map.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn occlusion_full_window_is_constant_logit_difference() {
        let model = fixtures::lin3();
        let x = lin3_x();
        let map = occlusion(&model, &x, 0, 3, 1, &Tensor::zeros(&[3])).unwrap();
        let expected = model.logit(&x, 0).unwrap() - model.logit(&Tensor::zeros(&[3]), 0).unwrap();
        for v in map.data() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rise_with_forced_all_ones_grid_is_proportional_to_confidence() {
        let model = fixtures::lin3();
        let x = lin3_x();
        let cfg = RiseConfig {
            mask_count: 1,
            grid_side: 2,
            keep_prob: 1.0,
            replacement: Tensor::zeros(&[3]),
        };
        let map = rise(&model, &x, 0, &cfg, 3).unwrap();
        let p = model.probability(&x, 0).unwrap();
        for v in map.data() {
            assert!((v - p).abs() < 1e-12);
        }
    }

    #[test]
    fn rise_is_seed_deterministic() {
        let model = fixtures::random_cnn(9, 8, 3);
        let x = fixtures::random_input(model.input_shape(), 2);
        let cfg = RiseConfig {
            mask_count: 50,
            grid_side: 4,
            keep_prob: 0.5,
            replacement: Tensor::zeros(x.shape()),
        };
        let a = rise(&model, &x, 0, &cfg, 11).unwrap();
        let b = rise(&model, &x, 0, &cfg, 11).unwrap();
        assert_eq!(a.data(), b.data());
        let c = rise(&model, &x, 0, &cfg, 12).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn rise_rejects_bad_keep_prob() {
        let model = fixtures::lin3();
        let cfg = RiseConfig {
            mask_count: 1,
            grid_side: 2,
            keep_prob: 0.0,
            replacement: Tensor::zeros(&[3]),
        };
        assert!(rise(&model, &lin3_x(), 0, &cfg, 0).is_err());
    }

    /// Model that ignores its input entirely.
    struct ConstantModel;

    impl Predictor for ConstantModel {
        fn input_shape(&self) -> &[usize] {
            &[3]
        }
        fn class_count(&self) -> usize {
            2
        }
        fn logits(&self, _input: &Tensor) -> crate::error::Result<Tensor> {
            Tensor::vector(vec![1.0, -1.0])
        }
    }

    #[test]
    fn lime_on_constant_model_has_zero_coefficients() {
        let cfg = LimeConfig {
            patch_grid: 3,
            sample_count: 64,
            kernel_width: 0.25,
            ridge_lambda: 1e-6,
            replacement: Tensor::zeros(&[3]),
        };
        let map = lime(&ConstantModel, &lin3_x(), 0, &cfg, 5).unwrap();
        assert!(map.max_abs() < 1e-8, "coefficients {:?}", map.data());
    }

    #[test]
    fn lime_is_seed_deterministic() {
        let model = fixtures::random_cnn(9, 8, 3);
        let x = fixtures::random_input(model.input_shape(), 2);
        let cfg = LimeConfig {
            patch_grid: 3,
            sample_count: 40,
            kernel_width: 0.25,
            ridge_lambda: 1e-3,
            replacement: Tensor::zeros(x.shape()),
        };
        let a = lime(&model, &x, 0, &cfg, 11).unwrap();
        let b = lime(&model, &x, 0, &cfg, 11).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn lime_exhaustive_on_lin3_matches_occlusion_sign_pattern() {
        // Independent oracle: closed-form weighted least squares over all
        // 2^3 on/off patterns, solved with a hand-rolled Cramer elimination
        // kept separate from the production solver.
        let model = fixtures::lin3();
        let x = lin3_x();
        let kernel_width = 0.25;
        let mut rows: Vec<[f64; 4]> = Vec::new();
        let mut ys = Vec::new();
        let mut ws = Vec::new();
        for bits in 0..8usize {
            let z = [bits & 1 == 1, bits >> 1 & 1 == 1, bits >> 2 & 1 == 1];
            let masked = Tensor::vector(
                (0..3)
                    .map(|i| if z[i] { x.data()[i] } else { 0.0 })
                    .collect(),
            )
            .unwrap();
            ys.push(model.probability(&masked, 0).unwrap());
            let off = z.iter().filter(|&&b| !b).count() as f64 / 3.0;
            ws.push((-off * off / (kernel_width * kernel_width)).exp());
            rows.push([
                1.0,
                z[0] as u8 as f64,
                z[1] as u8 as f64,
                z[2] as u8 as f64,
            ]);
        }
        // Normal equations, 4x4, solved by naive Gauss-Jordan.
        let mut a = [[0.0f64; 5]; 4];
        for ((row, &y), &w) in rows.iter().zip(&ys).zip(&ws) {
            for i in 0..4 {
                for j in 0..4 {
                    a[i][j] += w * row[i] * row[j];
                }
                a[i][4] += w * row[i] * y;
            }
        }
        for col in 0..4 {
            let pivot = (col..4).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
            a.swap(col, pivot);
            let p = a[col][col];
            for j in col..5 {
                a[col][j] /= p;
            }
            for r in 0..4 {
                if r != col {
                    let f = a[r][col];
                    for j in col..5 {
                        a[r][j] -= f * a[col][j];
                    }
                }
            }
        }
        let oracle = [a[1][4], a[2][4], a[3][4]];

        let cfg = LimeConfig {
            patch_grid: 3,
            sample_count: 8,
            kernel_width,
            ridge_lambda: 1e-12,
            replacement: Tensor::zeros(&[3]),
        };
        let map = lime(&model, &x, 0, &cfg, 0).unwrap();
        for (got, want) in map.data().iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
        // Sign pattern and ranking agree with occlusion on the linear model.
        let occ = occlusion(&model, &x, 0, 1, 1, &Tensor::zeros(&[3])).unwrap();
        for (l, o) in map.data().iter().zip(occ.data()) {
            assert_eq!(l.signum(), o.signum());
        }
        assert_eq!(map.ranking_desc_abs(), occ.ranking_desc_abs());
    }

    #[test]
    fn patch_assignment_covers_all_features() {
        let (assign, patches) = patch_assignment(&[12, 12], 7).unwrap();
        assert_eq!(assign.len(), 144);
        assert!(assign.iter().all(|&p| p < patches));
        let (assign, patches) = patch_assignment(&[5], 7).unwrap();
        assert_eq!(assign, vec![0, 1, 2, 3, 4]);
        assert_eq!(patches, 5);
    }

    // Black-box boundary: these methods run against a predict-only view
    // with no tape access, enforced by the trait bound itself.
    struct OpaqueView(Model);

    impl Predictor for OpaqueView {
        fn input_shape(&self) -> &[usize] {
            Model::input_shape(&self.0)
        }
        fn class_count(&self) -> usize {
            Model::class_count(&self.0)
        }
        fn logits(&self, input: &Tensor) -> crate::error::Result<Tensor> {
            crate::autodiff::forward(&self.0, input).map(|(l, _)| l)
        }
    }

    #[test]
    fn black_box_methods_run_against_predict_only_view() {
        let view = OpaqueView(fixtures::lin3());
        let x = lin3_x();
        occlusion(&view, &x, 0, 1, 1, &Tensor::zeros(&[3])).unwrap();
        rise(
            &view,
            &x,
            0,
            &RiseConfig {
                mask_count: 4,
                grid_side: 2,
                keep_prob: 0.5,
                replacement: Tensor::zeros(&[3]),
            },
            0,
        )
        .unwrap();
        lime(
            &view,
            &x,
            0,
            &LimeConfig {
                patch_grid: 3,
                sample_count: 8,
                kernel_width: 0.25,
                ridge_lambda: 1e-3,
                replacement: Tensor::zeros(&[3]),
            },
            0,
        )
        .unwrap();
    }
}

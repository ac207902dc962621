//! Dataset ingestion, synthetic ground-truth generation, and input
//! transformations.

use std::io::Read;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{rng_split, split_seed};
use crate::tensor::Tensor;

/// Immutable collection of inputs and labels, optionally with binary
/// ground-truth masks and per-feature importances of the same shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub ground_truth_masks: Option<Vec<Tensor>>,
    pub importances: Option<Vec<Tensor>>,
}

impl Dataset {
    pub fn new(
        inputs: Vec<Tensor>,
        labels: Vec<usize>,
        ground_truth_masks: Option<Vec<Tensor>>,
        importances: Option<Vec<Tensor>>,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(CoreError::DataFormat(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(masks) = &ground_truth_masks {
            if masks.len() != inputs.len() {
                return Err(CoreError::DataFormat("mask count mismatch".into()));
            }
            for (i, mask) in masks.iter().enumerate() {
                if !mask.is_binary() {
                    return Err(CoreError::DataFormat(format!("mask {i} is not binary")));
                }
                if mask.sum() == 0.0 {
                    return Err(CoreError::DataFormat(format!("mask {i} is empty")));
                }
            }
        }
        if let Some(imps) = &importances {
            if imps.len() != inputs.len() {
                return Err(CoreError::DataFormat("importance count mismatch".into()));
            }
        }
        Ok(Self {
            inputs,
            labels,
            ground_truth_masks,
            importances,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Feature-wise mean over all inputs; the default replacement signal.
    pub fn mean_input(&self) -> Result<Tensor> {
        let first = self
            .inputs
            .first()
            .ok_or_else(|| CoreError::Precondition("dataset is empty".into()))?;
        let mut acc = Tensor::zeros(first.shape());
        for input in &self.inputs {
            acc = acc.add(input)?;
        }
        Ok(acc.scale(1.0 / self.inputs.len() as f64))
    }

    /// Deterministically shuffled copy.
    pub fn shuffled(&self, seed: u64) -> Dataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng_split(seed, 0));
        self.subset(&order)
    }

    /// Rows at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let pick = |v: &Vec<Tensor>| indices.iter().map(|&i| v[i].clone()).collect();
        Dataset {
            inputs: pick(&self.inputs),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ground_truth_masks: self.ground_truth_masks.as_ref().map(pick),
            importances: self.importances.as_ref().map(pick),
        }
    }

    /// Split into (front, back) at `count` rows.
    pub fn split_at(&self, count: usize) -> (Dataset, Dataset) {
        let count = count.min(self.len());
        let front: Vec<usize> = (0..count).collect();
        let back: Vec<usize> = (count..self.len()).collect();
        (self.subset(&front), self.subset(&back))
    }
}

// ── IDX ingestion ────────────────────────────────────────────────────

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(reader: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader
        .read_exact(&mut buf)
        .map_err(|_| CoreError::DataFormat(format!("truncated stream reading {what}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image/label stream pair (big-endian headers, unsigned-byte
/// pixels scaled to [0, 1]).
pub fn load_idx(mut images: impl Read, mut labels: impl Read) -> Result<Dataset> {
    let magic = read_u32_be(&mut images, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(CoreError::DataFormat(format!(
            "image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&mut images, "image count")? as usize;
    let rows = read_u32_be(&mut images, "image rows")? as usize;
    let cols = read_u32_be(&mut images, "image cols")? as usize;

    let label_magic = read_u32_be(&mut labels, "label magic")?;
    if label_magic != IDX_LABEL_MAGIC {
        return Err(CoreError::DataFormat(format!(
            "label magic {label_magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"
        )));
    }
    let label_count = read_u32_be(&mut labels, "label count")? as usize;
    if label_count != count {
        return Err(CoreError::DataFormat(format!(
            "{count} images but {label_count} labels"
        )));
    }

    let mut pixel_buf = vec![0u8; rows * cols];
    let mut inputs = Vec::with_capacity(count);
    for i in 0..count {
        images
            .read_exact(&mut pixel_buf)
            .map_err(|_| CoreError::DataFormat(format!("truncated pixel data at image {i}")))?;
        let data = pixel_buf.iter().map(|&b| b as f64 / 255.0).collect();
        inputs.push(Tensor::new(vec![rows, cols], data)?);
    }

    let mut label_buf = vec![0u8; count];
    labels
        .read_exact(&mut label_buf)
        .map_err(|_| CoreError::DataFormat("truncated label data".into()))?;
    let mut out_labels = Vec::with_capacity(count);
    for (i, &b) in label_buf.iter().enumerate() {
        if b > 9 {
            return Err(CoreError::DataFormat(format!(
                "label value {b} at index {i} outside class range 0-9"
            )));
        }
        out_labels.push(b as usize);
    }

    Dataset::new(inputs, out_labels, None, None)
}

// ── Synthetic ground truth ───────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub image_side: usize,
    pub patch_side: usize,
    pub class_count: usize,
    pub noise_std: f64,
    pub seed: u64,
}

/// Background level the patch patterns deviate from.
const SYNTH_BACKGROUND: f64 = 0.5;
/// Patch pattern amplitude around the background level.
const SYNTH_AMPLITUDE: f64 = 0.4;
const SYNTH_PATTERN_SALT: u64 = 0x70a7_c851;

/// Deterministic +-1 pattern identifying class `class` over a
/// `patch_side x patch_side` patch. Patterns depend only on the class index
/// and patch size, so independently generated datasets share them.
fn class_pattern(class: usize, patch_side: usize) -> Vec<f64> {
    let area = patch_side * patch_side;
    let mut rng = rng_split(split_seed(SYNTH_PATTERN_SALT, class as u64), 1);
    (0..area)
        .map(|_| {
            if rng.gen::<bool>() {
                SYNTH_BACKGROUND + SYNTH_AMPLITUDE
            } else {
                SYNTH_BACKGROUND - SYNTH_AMPLITUDE
            }
        })
        .collect()
}

fn patterns_distinct(class_count: usize, patch_side: usize) -> bool {
    let patterns: Vec<Vec<f64>> = (0..class_count)
        .map(|c| class_pattern(c, patch_side))
        .collect();
    for i in 0..patterns.len() {
        for j in (i + 1)..patterns.len() {
            if patterns[i] == patterns[j] {
                return false;
            }
        }
    }
    true
}

/// Generate a dataset where the only label signal is a class-identifying
/// patch at a random location: background is pure noise, the patch is the
/// class's fixed pattern, the mask marks the patch, and importances are
/// nonzero only inside it.
pub fn synth_groundtruth(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.patch_side >= cfg.image_side {
        return Err(CoreError::Precondition(format!(
            "patch side {} must be smaller than image side {}",
            cfg.patch_side, cfg.image_side
        )));
    }
    if cfg.patch_side == 0 || cfg.class_count < 2 {
        return Err(CoreError::Precondition(
            "patch side must be positive and class count at least 2".into(),
        ));
    }
    if !patterns_distinct(cfg.class_count, cfg.patch_side) {
        return Err(CoreError::Precondition(format!(
            "cannot derive {} distinct patterns for a {}x{} patch",
            cfg.class_count, cfg.patch_side, cfg.patch_side
        )));
    }

    let side = cfg.image_side;
    let span = side - cfg.patch_side + 1;
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("std positive");
    let mut inputs = Vec::with_capacity(cfg.count);
    let mut labels = Vec::with_capacity(cfg.count);
    let mut masks = Vec::with_capacity(cfg.count);
    let mut importances = Vec::with_capacity(cfg.count);

    for i in 0..cfg.count {
        let mut rng = rng_split(cfg.seed, i as u64);
        let label = i % cfg.class_count;
        let pattern = class_pattern(label, cfg.patch_side);
        let top = rng.gen_range(0..span);
        let left = rng.gen_range(0..span);

        let mut pixels = vec![0.0; side * side];
        for p in pixels.iter_mut() {
            *p = SYNTH_BACKGROUND + if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        }
        let mut mask = vec![0.0; side * side];
        let mut importance = vec![0.0; side * side];
        for r in 0..cfg.patch_side {
            for c in 0..cfg.patch_side {
                let idx = (top + r) * side + (left + c);
                pixels[idx] = pattern[r * cfg.patch_side + c];
                mask[idx] = 1.0;
                importance[idx] = SYNTH_AMPLITUDE;
            }
        }
        inputs.push(Tensor::new(vec![side, side], pixels)?);
        labels.push(label);
        masks.push(Tensor::from_raw(vec![side, side], mask));
        importances.push(Tensor::from_raw(vec![side, side], importance));
    }

    Dataset::new(inputs, labels, Some(masks), Some(importances))
}

/// Extract a patch and classify it by exact pattern match; `None` when the
/// region matches no class pattern.
pub fn classify_patch(patch: &[f64], patch_side: usize, class_count: usize) -> Option<usize> {
    (0..class_count).find(|&c| class_pattern(c, patch_side) == patch)
}

// ── Transformations ──────────────────────────────────────────────────

/// Uniform-random permutation of the labels; inputs untouched.
pub fn randomize_labels(data: &Dataset, seed: u64) -> Dataset {
    let mut labels = data.labels.clone();
    labels.shuffle(&mut rng_split(seed, 0));
    Dataset {
        inputs: data.inputs.clone(),
        labels,
        ground_truth_masks: data.ground_truth_masks.clone(),
        importances: data.importances.clone(),
    }
}

#[derive(Debug, Clone)]
pub enum Perturbation<'a> {
    /// Add N(0, std^2) noise per feature.
    GaussianNoise { std: f64 },
    /// Add a constant vector of the input's shape.
    MeanShift { shift: &'a Tensor },
    /// Set the listed features to `replacement`; all others bit-identical.
    MaskFeatures {
        indices: &'a [usize],
        replacement: f64,
    },
}

pub fn perturb(input: &Tensor, kind: &Perturbation, seed: u64) -> Result<Tensor> {
    match kind {
        Perturbation::GaussianNoise { std } => {
            if *std < 0.0 {
                return Err(CoreError::Precondition("noise std must be >= 0".into()));
            }
            if *std == 0.0 {
                return Ok(input.clone());
            }
            let normal = Normal::new(0.0, *std).expect("std positive");
            let mut rng = rng_split(seed, 0);
            Tensor::new(
                input.shape().to_vec(),
                input.data().iter().map(|&v| v + normal.sample(&mut rng)).collect(),
            )
        }
        Perturbation::MeanShift { shift } => input.add(shift),
        Perturbation::MaskFeatures {
            indices,
            replacement,
        } => {
            let mut out = input.clone();
            for &i in *indices {
                if i >= out.len() {
                    return Err(CoreError::IndexOutOfRange {
                        index: i,
                        limit: out.len(),
                    });
                }
                out.data_mut()[i] = *replacement;
            }
            if !out.all_finite() {
                return Err(CoreError::NonFinite("perturbed input".into()));
            }
            Ok(out)
        }
    }
}

// ── Dataset file format ──────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    version: u32,
    class_count: usize,
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ground_truth_masks: Option<Vec<Tensor>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    importances: Option<Vec<Tensor>>,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Serialize with base64 tensors, like the model format. `class_count` is
/// recorded for training convenience.
pub fn save_dataset(data: &Dataset, class_count: usize, mut writer: impl std::io::Write) -> Result<()> {
    let file = DatasetFile {
        version: DATASET_FORMAT_VERSION,
        class_count,
        inputs: data.inputs.clone(),
        labels: data.labels.clone(),
        ground_truth_masks: data.ground_truth_masks.clone(),
        importances: data.importances.clone(),
    };
    serde_json::to_writer(&mut writer, &file)?;
    writer.write_all(b"\n")?;
    Ok(())
}

/// Load a dataset file; returns the dataset and its declared class count.
pub fn load_dataset(reader: impl Read) -> Result<(Dataset, usize)> {
    let file: DatasetFile = serde_json::from_reader(reader)?;
    if file.version != DATASET_FORMAT_VERSION {
        return Err(CoreError::DataFormat(format!(
            "unsupported dataset format version {}",
            file.version
        )));
    }
    let data = Dataset::new(
        file.inputs,
        file.labels,
        file.ground_truth_masks,
        file.importances,
    )?;
    Ok((data, file.class_count))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_fixture(labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let count = labels.len() as u32;
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        images.extend_from_slice(&count.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        for i in 0..labels.len() {
            images.extend((0..28 * 28).map(|p| ((p + i * 13) % 256) as u8));
        }
        let mut label_bytes = Vec::new();
        label_bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        label_bytes.extend_from_slice(&count.to_be_bytes());
        label_bytes.extend_from_slice(labels);
        (images, label_bytes)
    }

    #[test]
    fn loads_canonical_idx_fixture() {
        let (images, labels) = idx_fixture(&[3, 1, 4, 1]);
        let data = load_idx(images.as_slice(), labels.as_slice()).unwrap();
        assert_eq!(data.len(), 4);
        assert_eq!(data.inputs[0].shape(), &[28, 28]);
        assert_eq!(data.labels, vec![3, 1, 4, 1]);
        assert!(data.inputs[0].data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // 255 scales to exactly 1.0
        assert_eq!(data.inputs[0].get(255).unwrap(), 1.0);
    }

    #[test]
    fn wrong_image_magic_is_cited() {
        let (mut images, labels) = idx_fixture(&[0]);
        images[3] = 0x01;
        let err = load_idx(images.as_slice(), labels.as_slice()).unwrap_err();
        assert!(err.to_string().contains("0x00000803"), "{err}");
    }

    #[test]
    fn label_out_of_class_range_is_rejected() {
        let (images, labels) = idx_fixture(&[2, 10]);
        let err = load_idx(images.as_slice(), labels.as_slice()).unwrap_err();
        assert!(err.to_string().contains("label value 10"), "{err}");
    }

    #[test]
    fn truncated_pixel_stream_is_rejected() {
        let (mut images, labels) = idx_fixture(&[1, 2]);
        images.truncate(images.len() - 10);
        assert!(load_idx(images.as_slice(), labels.as_slice()).is_err());
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let (images, _) = idx_fixture(&[1, 2]);
        let (_, labels) = idx_fixture(&[1, 2, 3]);
        assert!(load_idx(images.as_slice(), labels.as_slice()).is_err());
    }

    fn synth_cfg() -> SynthConfig {
        SynthConfig {
            count: 10,
            image_side: 12,
            patch_side: 4,
            class_count: 4,
            noise_std: 0.1,
            seed: 5,
        }
    }

    #[test]
    fn masks_sum_to_patch_area() {
        let data = synth_groundtruth(&synth_cfg()).unwrap();
        for mask in data.ground_truth_masks.as_ref().unwrap() {
            assert_eq!(mask.sum(), 16.0);
        }
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let a = synth_groundtruth(&synth_cfg()).unwrap();
        let b = synth_groundtruth(&synth_cfg()).unwrap();
        for (x, y) in a.inputs.iter().zip(&b.inputs) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn patch_side_must_be_smaller_than_image() {
        let mut cfg = synth_cfg();
        cfg.patch_side = 12;
        assert!(synth_groundtruth(&cfg).is_err());
    }

    #[test]
    fn patch_content_determines_the_label_exactly() {
        // The construction guarantee behind localization validity: the
        // extracted patch matches exactly one class pattern, so a probe on
        // patch content alone classifies the dataset perfectly.
        let cfg = synth_cfg();
        let data = synth_groundtruth(&cfg).unwrap();
        let masks = data.ground_truth_masks.as_ref().unwrap();
        for ((input, mask), &label) in data.inputs.iter().zip(masks).zip(&data.labels) {
            let patch: Vec<f64> = input
                .data()
                .iter()
                .zip(mask.data())
                .filter(|(_, &m)| m == 1.0)
                .map(|(&v, _)| v)
                .collect();
            assert_eq!(
                classify_patch(&patch, cfg.patch_side, cfg.class_count),
                Some(label)
            );
        }
    }

    #[test]
    fn importances_are_nonzero_only_inside_patch() {
        let data = synth_groundtruth(&synth_cfg()).unwrap();
        let masks = data.ground_truth_masks.as_ref().unwrap();
        for (imp, mask) in data.importances.as_ref().unwrap().iter().zip(masks) {
            for (i, m) in imp.data().iter().zip(mask.data()) {
                assert_eq!(*i != 0.0, *m == 1.0);
            }
        }
    }

    #[test]
    fn randomize_labels_preserves_multiset() {
        let data = synth_groundtruth(&synth_cfg()).unwrap();
        let permuted = randomize_labels(&data, 3);
        let mut a = data.labels.clone();
        let mut b = permuted.labels.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        for (x, y) in data.inputs.iter().zip(&permuted.inputs) {
            assert_eq!(x.data(), y.data());
        }
        // Same seed, same permutation.
        assert_eq!(permuted.labels, randomize_labels(&data, 3).labels);
    }

    #[test]
    fn single_example_permutation_is_identity() {
        let data = Dataset::new(vec![Tensor::vector(vec![1.0]).unwrap()], vec![0], None, None)
            .unwrap();
        assert_eq!(randomize_labels(&data, 9).labels, vec![0]);
    }

    #[test]
    fn mask_all_features_to_zero_gives_zero_tensor() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let all: Vec<usize> = (0..3).collect();
        let masked = perturb(
            &x,
            &Perturbation::MaskFeatures {
                indices: &all,
                replacement: 0.0,
            },
            0,
        )
        .unwrap();
        assert_eq!(masked.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_noise_is_identity() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let y = perturb(&x, &Perturbation::GaussianNoise { std: 0.0 }, 1).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn mean_shift_roundtrip_is_identity() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        let m = Tensor::vector(vec![0.3, 0.7, -0.1]).unwrap();
        let shifted = perturb(&x, &Perturbation::MeanShift { shift: &m }, 0).unwrap();
        let back = perturb(
            &shifted,
            &Perturbation::MeanShift {
                shift: &m.scale(-1.0),
            },
            0,
        )
        .unwrap();
        assert!(back.sub(&x).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn mask_feature_out_of_range_is_rejected() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(perturb(
            &x,
            &Perturbation::MaskFeatures {
                indices: &[5],
                replacement: 0.0
            },
            0
        )
        .is_err());
    }

    #[test]
    fn perturb_never_changes_shape() {
        let x = Tensor::new(vec![3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let shift = Tensor::full(&[3, 3], 0.1).unwrap();
        for kind in [
            Perturbation::GaussianNoise { std: 0.2 },
            Perturbation::MeanShift { shift: &shift },
            Perturbation::MaskFeatures {
                indices: &[0, 4],
                replacement: 0.5,
            },
        ] {
            assert_eq!(perturb(&x, &kind, 7).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn dataset_file_round_trip() {
        let data = synth_groundtruth(&synth_cfg()).unwrap();
        let mut buf = Vec::new();
        save_dataset(&data, 4, &mut buf).unwrap();
        let (loaded, classes) = load_dataset(buf.as_slice()).unwrap();
        assert_eq!(classes, 4);
        assert_eq!(loaded.labels, data.labels);
        for (a, b) in loaded.inputs.iter().zip(&data.inputs) {
            assert_eq!(a.data(), b.data());
        }
        assert!(loaded.ground_truth_masks.is_some());
    }
}

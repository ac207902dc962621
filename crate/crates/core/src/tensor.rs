//! Dense n-dimensional tensors of 64-bit reals, row-major.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CoreError, Result};

/// Dense tensor. Immutable after construction; all values finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::ShapeMismatch {
                expected: shape,
                actual: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("tensor construction".into()));
        }
        Ok(Self { shape, data })
    }

    /// Construction without the finite check; callers guarantee finiteness.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![0.0; numel])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel])
    }

    /// Rank-1 tensor from a plain vector.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, index: usize) -> Result<f64> {
        self.data
            .get(index)
            .copied()
            .ok_or(CoreError::IndexOutOfRange {
                index,
                limit: self.data.len(),
            })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(CoreError::ShapeMismatch {
                expected: shape,
                actual: self.shape.clone(),
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(CoreError::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn abs(&self) -> Self {
        self.map(f64::abs)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_raw(self.shape.clone(), data))
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| f64::max(m, v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// L-infinity distance; shapes must match.
    pub fn linf_distance(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| f64::max(m, (a - b).abs())))
    }

    /// Index of the largest value; ties break to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (i, &v) in self.data.iter().enumerate() {
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        best
    }

    /// Index of the largest absolute value; ties break to the lowest index.
    pub fn argmax_abs(&self) -> usize {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (i, v) in self.data.iter().enumerate() {
            if v.abs() > best_val {
                best_val = v.abs();
                best = i;
            }
        }
        best
    }

    /// True when every entry is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Feature indices ordered by descending absolute value, ties to the
    /// lowest index. The fixed ordering keeps rankings reproducible.
    pub fn ranking_desc_abs(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        idx.sort_by(|&a, &b| {
            self.data[b]
                .abs()
                .partial_cmp(&self.data[a].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        idx
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    data: String,
}

pub(crate) fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub(crate) fn decode_f64s(text: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = B64.decode(text).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() % 8 != 0 {
        return Err(format!("byte count {} not a multiple of 8", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl Serialize for Tensor {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        TensorRepr {
            shape: self.shape.clone(),
            data: encode_f64s(&self.data),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = TensorRepr::deserialize(deserializer)?;
        let data = decode_f64s(&repr.data).map_err(D::Error::custom)?;
        Tensor::new(repr.shape, data).map_err(|e| D::Error::custom(e.to_string()))
    }
}

/// Raw base64 helpers shared with the model file format.
pub(crate) mod b64 {
    pub(crate) use super::{decode_f64s, encode_f64s};
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::vector(vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn argmax_ties_break_low() {
        let t = Tensor::vector(vec![2.0, -2.0, 1.0]).unwrap();
        assert_eq!(t.argmax_abs(), 0);
    }

    #[test]
    fn ranking_is_stable() {
        let t = Tensor::vector(vec![1.0, 3.0, -3.0, 0.5]).unwrap();
        assert_eq!(t.ranking_desc_abs(), vec![1, 2, 0, 3]);
    }

    #[test]
    fn serde_round_trip_is_bit_exact() {
        let t = Tensor::new(vec![2, 2], vec![0.1, -2.5e-300, 3.0, f64::MIN_POSITIVE]).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: Tensor = serde_json::from_str(&json).unwrap();
        assert_eq!(t, back);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

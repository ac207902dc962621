//! Executable evaluation metrics and their result model.
//!
//! Verdicts are a pure function of (scores, threshold spec); thresholds are
//! explicit configuration, never hidden constants, and every result carries
//! the spec that produced its verdict.

pub mod perceptibility;
pub mod sensitivity;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::saliency::SaliencyMap;
use crate::tensor::Tensor;

/// The five testable card attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    InputSensitivity,
    LabelSensitivity,
    ModelSensitivity,
    Minimality,
    PerceptualCorrespondence,
}

impl Attribute {
    pub fn as_str(&self) -> &'static str {
        match self {
            Attribute::InputSensitivity => "input_sensitivity",
            Attribute::LabelSensitivity => "label_sensitivity",
            Attribute::ModelSensitivity => "model_sensitivity",
            Attribute::Minimality => "minimality",
            Attribute::PerceptualCorrespondence => "perceptual_correspondence",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub op: CmpOp,
    pub value: f64,
}

impl Predicate {
    pub fn holds(&self, score: f64) -> bool {
        match self.op {
            CmpOp::Lt => score < self.value,
            CmpOp::Le => score <= self.value,
            CmpOp::Gt => score > self.value,
            CmpOp::Ge => score >= self.value,
        }
    }

    fn is_lower_bound(&self) -> bool {
        matches!(self.op, CmpOp::Gt | CmpOp::Ge)
    }
}

/// Pass/fail predicates over one named score; anything in between is
/// inconclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub score: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pass_if: Option<Predicate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fail_if: Option<Predicate>,
}

impl ThresholdSpec {
    pub fn new(score: &str, pass_if: Option<Predicate>, fail_if: Option<Predicate>) -> Result<Self> {
        let spec = Self {
            score: score.into(),
            pass_if,
            fail_if,
        };
        spec.check_disjoint()?;
        Ok(spec)
    }

    /// Both predicates satisfiable at once means the spec is contradictory.
    pub fn check_disjoint(&self) -> Result<()> {
        let (Some(p), Some(f)) = (self.pass_if, self.fail_if) else {
            return Ok(());
        };
        let overlap = match (p.is_lower_bound(), f.is_lower_bound()) {
            (true, true) | (false, false) => true,
            (true, false) => {
                // pass above a, fail below b: disjoint iff a >= b (strictness
                // breaks the tie at equality).
                p.value < f.value
                    || (p.value == f.value && p.op == CmpOp::Ge && f.op == CmpOp::Le)
            }
            (false, true) => {
                f.value < p.value
                    || (p.value == f.value && p.op == CmpOp::Le && f.op == CmpOp::Ge)
            }
        };
        if overlap {
            Err(CoreError::Config(format!(
                "threshold predicates for {:?} overlap",
                self.score
            )))
        } else {
            Ok(())
        }
    }

    /// Verdict for a score map; missing scores are inconclusive.
    pub fn verdict(&self, scores: &BTreeMap<String, f64>) -> Verdict {
        let Some(&score) = scores.get(&self.score) else {
            return Verdict::Inconclusive;
        };
        if self.pass_if.is_some_and(|p| p.holds(score)) {
            Verdict::Pass
        } else if self.fail_if.is_some_and(|f| f.holds(score)) {
            Verdict::Fail
        } else {
            Verdict::Inconclusive
        }
    }
}

/// Outcome of one metric run: identity, scores, verdict, and the exact
/// configuration that produced the verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric_id: String,
    pub attribute: Attribute,
    pub scores: BTreeMap<String, f64>,
    pub verdict: Verdict,
    pub threshold_spec: ThresholdSpec,
    pub seeds: Vec<u64>,
    pub runtime_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl EvalResult {
    /// Assemble a result, deriving the verdict from the spec.
    pub fn from_scores(
        metric_id: &str,
        attribute: Attribute,
        scores: BTreeMap<String, f64>,
        spec: &ThresholdSpec,
        seeds: Vec<u64>,
        runtime_seconds: f64,
    ) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|(_, v)| !v.is_finite()) {
            return Err(CoreError::NonFinite(format!(
                "score {} of metric {metric_id}",
                bad.0
            )));
        }
        let verdict = spec.verdict(&scores);
        Ok(Self {
            metric_id: metric_id.into(),
            attribute,
            scores,
            verdict,
            threshold_spec: spec.clone(),
            seeds,
            runtime_seconds,
            note: None,
        })
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    /// Force an inconclusive verdict with an explanatory note.
    pub fn inconclusive(mut self, note: impl Into<String>) -> Self {
        self.verdict = Verdict::Inconclusive;
        self.note = Some(note.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    Spearman,
    Pearson,
}

/// Correlation of two maps' absolute values in [-1, 1]; a constant map
/// compares as 0 against anything, including itself.
pub fn saliency_similarity(
    a: &SaliencyMap,
    b: &SaliencyMap,
    metric: SimilarityMetric,
) -> Result<f64> {
    similarity_values(&a.values, &b.values, metric)
}

pub(crate) fn similarity_values(
    a: &Tensor,
    b: &Tensor,
    metric: SimilarityMetric,
) -> Result<f64> {
    a.check_same_shape(b)?;
    let xs: Vec<f64> = a.data().iter().map(|v| v.abs()).collect();
    let ys: Vec<f64> = b.data().iter().map(|v| v.abs()).collect();
    match metric {
        SimilarityMetric::Pearson => Ok(pearson(&xs, &ys)),
        SimilarityMetric::Spearman => Ok(pearson(&average_ranks(&xs), &average_ranks(&ys))),
    }
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0; // constant map convention
    }
    (cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0)
}

/// Ranks with ties averaged (fractional ranks).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// True when the absolute values carry no ranking signal.
pub(crate) fn is_constant_abs(t: &Tensor) -> bool {
    let first = t.data().first().map(|v| v.abs());
    t.data()
        .iter()
        .all(|v| Some(v.abs()) == first)
}

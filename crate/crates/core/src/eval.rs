//! Confusion matrices, F1 scores and the Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Largest number of non-zero differences evaluated by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 12;
/// Smallest accepted number of pairs.
pub const WILCOXON_MIN_PAIRS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("reference has no labeled pixel")]
    EmptyReference,
    #[error("prediction has {pred} pixels, reference {reference}")]
    ShapeMismatch { pred: usize, reference: usize },
    #[error("predicted class {class} outside 1..={num_classes}")]
    ClassOutOfRange { class: u8, num_classes: usize },
    #[error("need at least {WILCOXON_MIN_PAIRS} pairs, got {0}")]
    TooFewPairs(usize),
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("non-finite value in paired samples")]
    NonFinite,
}

/// `k x k` counts, rows = reference class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Confusion of `pred` against `reference`; reference 0 pixels skipped.
    pub fn from_maps(pred: &[u8], reference: &[u8], num_classes: usize) -> Result<Self, EvalError> {
        let mut cm = Self::new(num_classes);
        cm.accumulate(pred, reference)?;
        Ok(cm)
    }

    pub fn accumulate(&mut self, pred: &[u8], reference: &[u8]) -> Result<(), EvalError> {
        if pred.len() != reference.len() {
            return Err(EvalError::ShapeMismatch {
                pred: pred.len(),
                reference: reference.len(),
            });
        }
        let k = self.num_classes;
        for (&p, &r) in pred.iter().zip(reference) {
            if r == 0 || r as usize > k {
                continue;
            }
            if p == 0 || p as usize > k {
                return Err(EvalError::ClassOutOfRange {
                    class: p,
                    num_classes: k,
                });
            }
            self.counts[(r as usize - 1) * k + p as usize - 1] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Count for reference class `r`, predicted class `p` (both 1-based).
    pub fn get(&self, r: usize, p: usize) -> u64 {
        self.counts[(r - 1) * self.num_classes + p - 1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.num_classes)
            .map(<[u64]>::to_vec)
            .collect()
    }

    /// `2TP / (2TP + FP + FN)` per class; `None` for classes absent from
    /// both reference and prediction.
    pub fn f1_per_class(&self) -> Vec<Option<f64>> {
        (1..=self.num_classes)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (1..=self.num_classes).map(|p| self.get(c, p)).sum();
                let col: u64 = (1..=self.num_classes).map(|r| self.get(r, c)).sum();
                let (fn_, fp) = (row - tp, col - tp);
                let denom = 2 * tp + fp + fn_;
                (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Unweighted mean of the defined per-class F1 scores.
    pub fn macro_f1(&self) -> Result<f64, EvalError> {
        if self.total() == 0 {
            return Err(EvalError::EmptyReference);
        }
        let f1: Vec<f64> = self.f1_per_class().into_iter().flatten().collect();
        Ok(f1.iter().sum::<f64>() / f1.len() as f64)
    }

    pub fn report(&self) -> Result<MetricsReport, EvalError> {
        Ok(MetricsReport {
            macro_f1: self.macro_f1()?,
            per_class_f1: self.f1_per_class(),
            labeled_pixels: self.total(),
            confusion: self.rows(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_f1: f64,
    pub per_class_f1: Vec<Option<f64>>,
    pub labeled_pixels: u64,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    /// One row per class: name, F1 (empty when undefined), then the
    /// confusion row.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let k = self.per_class_f1.len();
        let name = |i: usize| {
            class_names
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("class{}", i + 1))
        };
        let mut out = String::from("class,f1");
        for p in 0..k {
            out.push_str(&format!(",pred_{}", name(p)));
        }
        out.push('\n');
        for r in 0..k {
            out.push_str(&name(r));
            out.push(',');
            if let Some(f) = self.per_class_f1[r] {
                out.push_str(&format!("{f}"));
            }
            for v in &self.confusion[r] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out.push_str(&format!("macro,{}\n", self.macro_f1));
        out
    }
}

/// Macro F1 of each (prediction, reference) pair.
pub fn per_slide_f1(slides: &[(&[u8], &[u8])], num_classes: usize) -> Result<Vec<f64>, EvalError> {
    slides
        .iter()
        .map(|(p, r)| ConfusionMatrix::from_maps(p, r, num_classes)?.macro_f1())
        .collect()
}

/// Nearest-neighbour enlargement of a `w x h` label map by `factor`.
pub fn upsample_labels(labels: &[u8], w: usize, h: usize, factor: usize) -> Vec<u8> {
    let (ow, oh) = (w * factor, h * factor);
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        let row = &labels[(y / factor) * w..(y / factor + 1) * w];
        for x in 0..ow {
            out.push(row[x / factor]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Average ranks of `values` (ascending), ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test of `a - b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < WILCOXON_MIN_PAIRS {
        return Err(EvalError::TooFewPairs(a.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|&d| d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n,
            w_plus: 0.0,
            w_minus: 0.0,
            p_value: 1.0,
            method: WilcoxonMethod::Exact,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, &d)| d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let (p_value, method) = if n <= WILCOXON_EXACT_MAX {
        (exact_p(&ranks, w_plus), WilcoxonMethod::Exact)
    } else {
        (normal_p(&abs, &ranks, w_plus), WilcoxonMethod::Normal)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        p_value,
        method,
    })
}

/// Exact null distribution of W+ by dynamic programming over doubled
/// (hence integer) ranks.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut ways = vec![0f64; max + 1];
    ways[0] = 1.0;
    for &r in &doubled {
        for s in (r..=max).rev() {
            ways[s] += ways[s - r];
        }
    }
    let obs = (w_plus * 2.0).round() as usize;
    let all = 2f64.powi(ranks.len() as i32);
    let lower: f64 = ways[..=obs].iter().sum::<f64>() / all;
    let upper: f64 = ways[obs..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Normal approximation with tie and continuity corrections.
fn normal_p(abs: &[f64], ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - std_normal.cdf(z))).min(1.0)
}

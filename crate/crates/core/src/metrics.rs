//! One-vs-rest classification metrics, macro summaries, improvement deltas
//! and a paired significance test for class-wise AUROC.

use std::cmp::Ordering;
use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no samples")]
    Empty,
    #[error("length mismatch: {0} labels vs {1} predictions")]
    Length(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("AUROC undefined: need at least one positive and one negative sample")]
    UndefinedAuroc,
    #[error("reports are not comparable: {0}")]
    Mismatch(String),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
}

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: Vec<BinaryCounts>,
    /// Number of samples with `y_true == y_pred`.
    pub correct: u64,
}

impl ConfusionCounts {
    pub fn n(&self) -> u64 {
        self.per_class.first().map_or(0, BinaryCounts::total)
    }

    /// Multi-class accuracy (fraction of exact matches).
    pub fn overall_accuracy(&self) -> f64 {
        self.correct as f64 / self.n() as f64
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionCounts, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::Length(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&label) = y_true.iter().chain(y_pred).find(|&&l| l >= k) {
        return Err(MetricsError::Label { label, classes: k });
    }
    let n = y_true.len() as u64;
    let mut per_class = vec![BinaryCounts::default(); k];
    let mut correct = 0;
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t == p {
            per_class[t].tp += 1;
            correct += 1;
        } else {
            per_class[p].fp += 1;
            per_class[t].fn_ += 1;
        }
    }
    for c in &mut per_class {
        c.tn = n - c.tp - c.fp - c.fn_;
    }
    Ok(ConfusionCounts { per_class, correct })
}

/// The eight count-based metrics, in reporting order.
pub const METRIC_NAMES: [&str; 8] = [
    "accuracy",
    "specificity",
    "sensitivity",
    "precision",
    "f_measure",
    "informedness",
    "markedness",
    "mcc",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics<T> {
    pub accuracy: T,
    pub specificity: T,
    pub sensitivity: T,
    pub precision: T,
    pub f_measure: T,
    pub informedness: T,
    pub markedness: T,
    pub mcc: T,
    /// Metrics whose denominator was zero and were reported as 0.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub zero_denominator: Vec<String>,
}

impl<T: Copy> ClassMetrics<T> {
    pub fn values(&self) -> [T; 8] {
        [
            self.accuracy,
            self.specificity,
            self.sensitivity,
            self.precision,
            self.f_measure,
            self.informedness,
            self.markedness,
            self.mcc,
        ]
    }
}

pub fn class_metrics<T: Scalar>(c: &BinaryCounts) -> ClassMetrics<T> {
    let mut zero_denominator = Vec::new();
    let mut ratio = |name: &str, num: u64, den: u64| -> T {
        if den == 0 {
            zero_denominator.push(name.to_string());
            T::zero()
        } else {
            T::of(num as f64) / T::of(den as f64)
        }
    };
    let accuracy = ratio("accuracy", c.tp + c.tn, c.total());
    let specificity = ratio("specificity", c.tn, c.tn + c.fp);
    let sensitivity = ratio("sensitivity", c.tp, c.tp + c.fn_);
    let precision = ratio("precision", c.tp, c.tp + c.fp);
    let npv = ratio("npv", c.tn, c.tn + c.fn_);

    let f_measure = if precision + sensitivity > T::zero() {
        T::of(2.0) * precision * sensitivity / (precision + sensitivity)
    } else {
        zero_denominator.push("f_measure".into());
        T::zero()
    };

    let f = |v: u64| T::of(v as f64);
    let den = f(c.tp + c.fp) * f(c.tp + c.fn_) * f(c.tn + c.fp) * f(c.tn + c.fn_);
    let mcc = if den > T::zero() {
        (f(c.tp) * f(c.tn) - f(c.fp) * f(c.fn_)) / den.sqrt()
    } else {
        zero_denominator.push("mcc".into());
        T::zero()
    };

    ClassMetrics {
        accuracy,
        specificity,
        sensitivity,
        precision,
        f_measure,
        informedness: sensitivity + specificity - T::one(),
        markedness: precision + npv - T::one(),
        mcc,
        zero_denominator,
    }
}

/// Area under the ROC curve by trapezoidal integration over every distinct
/// threshold; tied positive/negative scores contribute one half.
pub fn auroc<T: Scalar>(y_true: &[bool], scores: &[T]) -> Result<f64, MetricsError> {
    if y_true.len() != scores.len() {
        return Err(MetricsError::Length(y_true.len(), scores.len()));
    }
    let positives = y_true.iter().filter(|&&b| b).count();
    let negatives = y_true.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::UndefinedAuroc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));

    // sweep thresholds from high to low; each tie group moves the ROC point once
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area2 = 0u128; // twice the area in units of (1 positive x 1 negative)
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if y_true[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += ((fp - fp0) as u128) * ((tp + tp0) as u128);
    }
    Ok(area2 as f64 / (2.0 * positives as f64 * negatives as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

/// Unweighted mean and population standard deviation across classes.
pub fn macro_spread(values: &[f64]) -> Spread {
    if values.is_empty() {
        return Spread { mean: f64::NAN, std: f64::NAN };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Spread { mean, std: var.sqrt() }
}

/// Per-metric macro summaries over classes; requires at least two classes.
pub fn macro_average(per_class: &[ClassMetrics<f64>]) -> Result<Vec<(String, Spread)>, MetricsError> {
    if per_class.len() < 2 {
        return Err(MetricsError::TooFewClasses(per_class.len()));
    }
    Ok(METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let vals: Vec<f64> = per_class.iter().map(|c| c.values()[m]).collect();
            (name.to_string(), macro_spread(&vals))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub averaging: String,
    pub std: String,
    pub zero_denominator: String,
    pub accuracy: String,
}

impl Default for ReportMeta {
    fn default() -> Self {
        Self {
            averaging: "macro (unweighted mean over classes)".into(),
            std: "population (divide by K)".into(),
            zero_denominator: "metric reported as 0 and listed in zero_denominator".into(),
            accuracy: "per-class accuracy is one-vs-rest; overall_accuracy is multi-class".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub counts: BinaryCounts,
    pub metrics: ClassMetrics<f64>,
    /// `None` when the evaluation set lacks positives or negatives for the class.
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: Vec<ClassReport>,
    pub macro_avg: Vec<(String, Spread)>,
    pub auroc_macro: Option<Spread>,
    pub overall_accuracy: f64,
    pub n: u64,
    pub meta: ReportMeta,
}

impl MetricReport {
    /// Builds the report from true labels, predictions and class probabilities
    /// (one column per class).
    pub fn evaluate<T: Scalar>(
        y_true: &[usize],
        y_pred: &[usize],
        proba: ArrayView2<'_, T>,
        class_names: &[String],
    ) -> Result<Self, MetricsError> {
        let k = class_names.len();
        if k < 2 {
            return Err(MetricsError::TooFewClasses(k));
        }
        if proba.dim() != (y_true.len(), k) {
            return Err(MetricsError::Mismatch(format!(
                "probability matrix {:?} for {} samples and {k} classes",
                proba.dim(),
                y_true.len()
            )));
        }
        let counts = confusion(y_true, y_pred, k)?;
        let mut classes = Vec::with_capacity(k);
        for (c, name) in class_names.iter().enumerate() {
            let positives: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
            let scores: Vec<T> = proba.column(c).to_vec();
            let auc = match auroc(&positives, &scores) {
                Ok(v) => Some(v),
                Err(MetricsError::UndefinedAuroc) => None,
                Err(e) => return Err(e),
            };
            classes.push(ClassReport {
                class: name.clone(),
                counts: counts.per_class[c],
                metrics: class_metrics(&counts.per_class[c]),
                auroc: auc,
            });
        }
        let per_class: Vec<ClassMetrics<f64>> = classes.iter().map(|c| c.metrics.clone()).collect();
        let aucs: Vec<f64> = classes.iter().filter_map(|c| c.auroc).collect();
        Ok(Self {
            macro_avg: macro_average(&per_class)?,
            auroc_macro: (!aucs.is_empty()).then(|| macro_spread(&aucs)),
            overall_accuracy: counts.overall_accuracy(),
            n: counts.n(),
            classes,
            meta: ReportMeta::default(),
        })
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.class.clone()).collect()
    }

    pub fn macro_mean(&self, metric: &str) -> Option<f64> {
        self.macro_avg.iter().find(|(m, _)| m == metric).map(|(_, s)| s.mean)
    }

    /// `class,metric,value` rows, followed by `macro_mean` / `macro_std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,metric,value\n");
        for c in &self.classes {
            for (name, v) in METRIC_NAMES.iter().zip(c.metrics.values()) {
                let _ = writeln!(out, "{},{},{}", c.class, name, v);
            }
            if let Some(a) = c.auroc {
                let _ = writeln!(out, "{},auroc,{}", c.class, a);
            }
        }
        for (name, s) in &self.macro_avg {
            let _ = writeln!(out, "macro_mean,{},{}", name, s.mean);
            let _ = writeln!(out, "macro_std,{},{}", name, s.std);
        }
        if let Some(s) = &self.auroc_macro {
            let _ = writeln!(out, "macro_mean,auroc,{}", s.mean);
            let _ = writeln!(out, "macro_std,auroc,{}", s.std);
        }
        let _ = writeln!(out, "overall,accuracy,{}", self.overall_accuracy);
        out
    }
}

/// Difference in percentage points; positive means `fused` scored higher.
pub fn delta_points(base: f64, fused: f64) -> f64 {
    // scaling before subtracting keeps e.g. 0.70 -> 0.80 at exactly 10
    100.0 * fused - 100.0 * base
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stars {
    #[serde(rename = "")]
    None,
    #[serde(rename = "*")]
    One,
    #[serde(rename = "**")]
    Two,
}

impl Stars {
    /// `**` for p <= 0.05, `*` for p <= 0.10.
    pub fn from_p(p: f64) -> Self {
        if p <= 0.05 {
            Stars::Two
        } else if p <= 0.10 {
            Stars::One
        } else {
            Stars::None
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stars::None => "",
            Stars::One => "*",
            Stars::Two => "**",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub test: String,
    pub p_value: f64,
    pub stars: Stars,
    /// Number of non-zero paired differences entering the test.
    pub n_nonzero: usize,
}

/// Exact two-sided Wilcoxon signed-rank test on paired per-class AUROC values.
///
/// Zero differences are dropped; tied magnitudes get average ranks and the
/// null distribution is computed exactly over all sign assignments.
pub fn compare_auroc(base: &[f64], fused: &[f64]) -> Result<Significance, MetricsError> {
    if base.len() != fused.len() {
        return Err(MetricsError::Mismatch(format!(
            "{} base vs {} fused classes",
            base.len(),
            fused.len()
        )));
    }
    if base.len() < 2 {
        return Err(MetricsError::TooFewClasses(base.len()));
    }
    let diffs: Vec<f64> = base
        .iter()
        .zip(fused)
        .map(|(b, f)| f - b)
        .filter(|d| *d != 0.0)
        .collect();
    let test = "exact two-sided Wilcoxon signed-rank, paired by class".to_string();
    if diffs.is_empty() {
        return Ok(Significance { test, p_value: 1.0, stars: Stars::None, n_nonzero: 0 });
    }

    // doubled average ranks keep everything integral
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).unwrap());
    let mut rank2 = vec![0u64; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u64; // 2 * mean of ranks i+1..=j+1
        for &idx in &order[i..=j] {
            rank2[idx] = avg2;
        }
        i = j + 1;
    }
    let w_obs: u64 = diffs
        .iter()
        .zip(&rank2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();

    let total: u64 = rank2.iter().sum();
    let mut dist = vec![0f64; total as usize + 1];
    dist[0] = 1.0;
    for &r in &rank2 {
        let r = r as usize;
        for s in (r..dist.len()).rev() {
            dist[s] = 0.5 * (dist[s] + dist[s - r]);
        }
        for s in (0..r.min(dist.len())).rev() {
            dist[s] *= 0.5;
        }
    }
    let lower: f64 = dist[..=w_obs as usize].iter().sum();
    let upper: f64 = dist[w_obs as usize..].iter().sum();
    let p_value = (2.0 * lower.min(upper)).min(1.0);
    Ok(Significance {
        test,
        p_value,
        stars: Stars::from_p(p_value),
        n_nonzero: diffs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub macro_delta: f64,
    pub per_class: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub classes: Vec<String>,
    pub units: String,
    pub deltas: Vec<MetricDelta>,
    pub overall_accuracy_delta: f64,
    /// Per-class AUROC deltas; `None` where either side is undefined.
    pub auroc_per_class: Vec<Option<f64>>,
    pub auroc_macro_delta: Option<f64>,
    pub significance: Option<Significance>,
}

/// Percentage-point deltas `fused - base` for every metric.
pub fn improvement(base: &MetricReport, fused: &MetricReport) -> Result<ImprovementReport, MetricsError> {
    let classes = base.class_names();
    if classes != fused.class_names() {
        return Err(MetricsError::Mismatch(format!(
            "class sets differ: {:?} vs {:?}",
            classes,
            fused.class_names()
        )));
    }
    let mut deltas = Vec::with_capacity(METRIC_NAMES.len());
    for (m, name) in METRIC_NAMES.iter().enumerate() {
        let per_class = base
            .classes
            .iter()
            .zip(&fused.classes)
            .map(|(b, f)| delta_points(b.metrics.values()[m], f.metrics.values()[m]))
            .collect();
        let macro_delta = delta_points(
            base.macro_mean(name).unwrap_or(f64::NAN),
            fused.macro_mean(name).unwrap_or(f64::NAN),
        );
        deltas.push(MetricDelta { metric: name.to_string(), macro_delta, per_class });
    }
    let auroc_per_class: Vec<Option<f64>> = base
        .classes
        .iter()
        .zip(&fused.classes)
        .map(|(b, f)| Some(delta_points(b.auroc?, f.auroc?)))
        .collect();
    let paired: (Vec<f64>, Vec<f64>) = base
        .classes
        .iter()
        .zip(&fused.classes)
        .filter_map(|(b, f)| Some((b.auroc?, f.auroc?)))
        .unzip();
    let significance = if paired.0.len() >= 2 {
        Some(compare_auroc(&paired.0, &paired.1)?)
    } else {
        None
    };
    let auroc_macro_delta = match (&base.auroc_macro, &fused.auroc_macro) {
        (Some(b), Some(f)) => Some(delta_points(b.mean, f.mean)),
        _ => None,
    };
    Ok(ImprovementReport {
        classes,
        units: "percentage points (fused - image only)".into(),
        deltas,
        overall_accuracy_delta: delta_points(base.overall_accuracy, fused.overall_accuracy),
        auroc_per_class,
        auroc_macro_delta,
        significance,
    })
}

impl ImprovementReport {
    pub fn macro_delta(&self, metric: &str) -> Option<f64> {
        self.deltas.iter().find(|d| d.metric == metric).map(|d| d.macro_delta)
    }

    /// `metric,class,delta` rows; `class` is `macro` for macro-average deltas.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,class,delta\n");
        for d in &self.deltas {
            let _ = writeln!(out, "{},macro,{}", d.metric, d.macro_delta);
            for (c, v) in self.classes.iter().zip(&d.per_class) {
                let _ = writeln!(out, "{},{},{}", d.metric, c, v);
            }
        }
        let _ = writeln!(out, "overall_accuracy,all,{}", self.overall_accuracy_delta);
        if let Some(v) = self.auroc_macro_delta {
            let _ = writeln!(out, "auroc,macro,{}", v);
        }
        for (c, v) in self.classes.iter().zip(&self.auroc_per_class) {
            if let Some(v) = v {
                let _ = writeln!(out, "auroc,{},{}", c, v);
            }
        }
        out
    }

    /// Class-wise AUROC deltas for box plots: `comparison,class,auroc_delta,p_value,stars`.
    pub fn boxplot_csv(&self, comparison: &str) -> String {
        let mut out = String::from("comparison,class,auroc_delta,p_value,stars\n");
        let (p, stars) = self
            .significance
            .as_ref()
            .map_or((String::new(), ""), |s| (s.p_value.to_string(), s.stars.as_str()));
        for (c, v) in self.classes.iter().zip(&self.auroc_per_class) {
            if let Some(v) = v {
                let _ = writeln!(out, "{comparison},{c},{v},{p},{stars}");
            }
        }
        out
    }
}

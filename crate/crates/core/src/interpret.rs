//! Classifier-weight reports split into image-feature and metadata blocks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::softmax::SoftmaxModel;

pub const HISTOGRAM_BINS: usize = 64;

pub const WEIGHT_SIGN_NOTE: &str = "Weights are reported as learned. A negative weight lowers the logit of its \
class as the feature grows, so it corresponds to a smaller probability for that class.";

#[derive(Debug, Error, PartialEq)]
pub enum InterpretError {
    #[error("split point {split_point} must lie strictly inside 0..{width}")]
    SplitPoint { split_point: usize, width: usize },
    #[error("{names} metadata names for a block of {width} weights")]
    NameCount { names: usize, width: usize },
    #[error("report has no metadata block")]
    NoMetadata,
    #[error("reports disagree: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Counts `values` into the bins of `edges`; the last bin is closed.
    pub fn with_edges(values: &[f64], edges: &[f64]) -> Self {
        let bins = edges.len().saturating_sub(1);
        let mut counts = vec![0u64; bins];
        if bins > 0 {
            let (lo, hi) = (edges[0], edges[bins]);
            for &v in values {
                if v < lo || v > hi {
                    continue;
                }
                let i = edges[1..].partition_point(|&e| e <= v).min(bins - 1);
                counts[i] += 1;
            }
        }
        Self {
            edges: edges.to_vec(),
            counts,
        }
    }
}

/// `bins` uniform bins over `[lo, hi]`; a degenerate range is widened by 0.5 each side.
pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let step = (hi - lo) / bins as f64;
    (0..=bins)
        .map(|i| if i == bins { hi } else { lo + step * i as f64 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub max_abs: f64,
    pub histogram: Histogram,
}

impl BlockSummary {
    fn new(values: &[f64], edges: &[f64]) -> Self {
        let n = values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            min,
            max,
            mean,
            std: var.sqrt(),
            max_abs: values.iter().fold(0.0, |m, v| m.max(v.abs())),
            histogram: Histogram::with_edges(values, edges),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub class: String,
    pub image_block: Vec<f64>,
    pub metadata_block: Vec<f64>,
    pub bias: f64,
    pub image_summary: BlockSummary,
    pub metadata_summary: Option<BlockSummary>,
}

impl ClassWeights {
    /// Image block followed by metadata block, i.e. the class's full weight vector.
    pub fn concatenated(&self) -> Vec<f64> {
        self.image_block.iter().chain(&self.metadata_block).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub split_point: usize,
    pub n_features: usize,
    pub metadata_names: Vec<String>,
    pub classes: Vec<ClassWeights>,
    pub bin_edges: Vec<f64>,
    pub note: String,
}

/// Splits every class's weights at `split_point`: the first `split_point`
/// weights belong to image features, the rest to metadata columns.
pub fn split_weights<T: Scalar>(
    model: &SoftmaxModel<T>,
    split_point: usize,
    metadata_names: &[String],
) -> Result<WeightReport, InterpretError> {
    let d = model.n_features();
    if split_point == 0 || split_point >= d {
        return Err(InterpretError::SplitPoint { split_point, width: d });
    }
    if metadata_names.len() != d - split_point {
        return Err(InterpretError::NameCount {
            names: metadata_names.len(),
            width: d - split_point,
        });
    }
    Ok(build(model, split_point, metadata_names.to_vec()))
}

/// Report for a model without metadata features.
pub fn image_only_weights<T: Scalar>(model: &SoftmaxModel<T>) -> WeightReport {
    build(model, model.n_features(), Vec::new())
}

fn build<T: Scalar>(model: &SoftmaxModel<T>, split_point: usize, metadata_names: Vec<String>) -> WeightReport {
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..model.n_classes())
        .map(|j| {
            let col: Vec<f64> = model.weights.column(j).iter().map(|w| w.as_f64()).collect();
            let meta = col[split_point..].to_vec();
            let mut img = col;
            img.truncate(split_point);
            (img, meta)
        })
        .collect();
    let (lo, hi) = blocks
        .iter()
        .flat_map(|(a, b)| a.iter().chain(b))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let edges = uniform_edges(lo, hi, HISTOGRAM_BINS);
    let classes = blocks
        .into_iter()
        .enumerate()
        .map(|(j, (img, meta))| ClassWeights {
            class: model.class_names[j].clone(),
            image_summary: BlockSummary::new(&img, &edges),
            metadata_summary: (!meta.is_empty()).then(|| BlockSummary::new(&meta, &edges)),
            image_block: img,
            metadata_block: meta,
            bias: model.bias[j].as_f64(),
        })
        .collect();
    WeightReport {
        split_point,
        n_features: model.n_features(),
        metadata_names,
        classes,
        bin_edges: edges,
        note: WEIGHT_SIGN_NOTE.to_string(),
    }
}

impl WeightReport {
    /// Re-bins every block on `edges`.
    pub fn rebin(&mut self, edges: &[f64]) {
        self.bin_edges = edges.to_vec();
        for c in &mut self.classes {
            c.image_summary.histogram = Histogram::with_edges(&c.image_block, edges);
            if let Some(s) = &mut c.metadata_summary {
                s.histogram = Histogram::with_edges(&c.metadata_block, edges);
            }
        }
    }

    /// `class,block,index,feature,weight` rows; bias rows use block `bias`.
    pub fn weights_csv(&self) -> String {
        let mut out = String::from("class,block,index,feature,weight\n");
        for c in &self.classes {
            for (i, w) in c.image_block.iter().enumerate() {
                let _ = writeln!(out, "{},image,{i},img_{i},{w}", c.class);
            }
            for (i, (w, name)) in c.metadata_block.iter().zip(&self.metadata_names).enumerate() {
                let _ = writeln!(out, "{},metadata,{},{name},{w}", c.class, self.split_point + i);
            }
            let _ = writeln!(out, "{},bias,,bias,{}", c.class, c.bias);
        }
        out
    }

    /// `class,block,bin,lower,upper,count` rows.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("class,block,bin,lower,upper,count\n");
        for c in &self.classes {
            let blocks = std::iter::once(("image", &c.image_summary)).chain(c.metadata_summary.as_ref().map(|s| ("metadata", s)));
            for (block, summary) in blocks {
                let h = &summary.histogram;
                for (b, count) in h.counts.iter().enumerate() {
                    let _ = writeln!(out, "{},{block},{b},{},{},{count}", c.class, h.edges[b], h.edges[b + 1]);
                }
            }
        }
        out
    }
}

/// Puts all reports on one set of histogram edges spanning their pooled range.
pub fn share_bin_edges(reports: &mut [&mut WeightReport]) {
    let (lo, hi) = reports
        .iter()
        .flat_map(|r| r.classes.iter())
        .flat_map(|c| c.image_block.iter().chain(&c.metadata_block))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return;
    }
    let edges = uniform_edges(lo, hi, HISTOGRAM_BINS);
    for r in reports.iter_mut() {
        r.rebin(&edges);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ratio {
    Finite(f64),
    /// The image block is all zeros.
    Infinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRatio {
    pub class: String,
    pub ratio: Ratio,
}

/// Per class, `max |metadata weight| / max |image weight|`.
pub fn magnitude_ratio(report: &WeightReport) -> Result<Vec<ClassRatio>, InterpretError> {
    if report.metadata_names.is_empty() {
        return Err(InterpretError::NoMetadata);
    }
    Ok(report
        .classes
        .iter()
        .map(|c| {
            let img = c.image_summary.max_abs;
            let meta = c.metadata_summary.as_ref().map_or(0.0, |s| s.max_abs);
            ClassRatio {
                class: c.class.clone(),
                ratio: if img > 0.0 { Ratio::Finite(meta / img) } else { Ratio::Infinite },
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageWeightShift {
    pub class: String,
    pub image_only_mean_abs: f64,
    pub fused_mean_abs: f64,
    /// `log10(fused / image_only)`; negative when adding metadata shrank the image weights.
    pub log10_change: Option<f64>,
}

/// Compares image-block weight magnitudes between an image-only and a fused model.
pub fn image_weight_shift(image_only: &WeightReport, fused: &WeightReport) -> Result<Vec<ImageWeightShift>, InterpretError> {
    if image_only.split_point != fused.split_point {
        return Err(InterpretError::Mismatch(format!(
            "image widths {} and {}",
            image_only.split_point, fused.split_point
        )));
    }
    if image_only.classes.len() != fused.classes.len()
        || image_only.classes.iter().zip(&fused.classes).any(|(a, b)| a.class != b.class)
    {
        return Err(InterpretError::Mismatch("class lists differ".into()));
    }
    let mean_abs = |v: &[f64]| v.iter().map(|w| w.abs()).sum::<f64>() / v.len() as f64;
    Ok(image_only
        .classes
        .iter()
        .zip(&fused.classes)
        .map(|(a, b)| {
            let (x, y) = (mean_abs(&a.image_block), mean_abs(&b.image_block));
            ImageWeightShift {
                class: a.class.clone(),
                image_only_mean_abs: x,
                fused_mean_abs: y,
                log10_change: (x > 0.0 && y > 0.0).then(|| (y / x).log10()),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn model(weights: Array2<f64>) -> SoftmaxModel<f64> {
        let k = weights.ncols();
        let mut m = SoftmaxModel::zeros(weights.nrows(), (0..k).map(|j| format!("c{j}")).collect()).unwrap();
        m.weights = weights;
        m
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("m{i}")).collect()
    }

    #[test]
    fn partition_is_exact() {
        let w = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - 2.5) * (j as f64 + 0.1));
        let r = split_weights(&model(w.clone()), 4, &names(2)).unwrap();
        for (j, c) in r.classes.iter().enumerate() {
            assert_eq!(c.image_block.len(), 4);
            assert_eq!(c.metadata_block.len(), 2);
            assert_eq!(c.concatenated(), w.column(j).to_vec());
        }
        assert_eq!(r.note, WEIGHT_SIGN_NOTE);
    }

    #[test]
    fn split_errors() {
        let m = model(Array2::zeros((6, 2)));
        assert_eq!(
            split_weights(&m, 0, &names(6)).unwrap_err(),
            InterpretError::SplitPoint { split_point: 0, width: 6 }
        );
        assert!(split_weights(&m, 6, &[]).is_err());
        assert_eq!(
            split_weights(&m, 4, &names(3)).unwrap_err(),
            InterpretError::NameCount { names: 3, width: 2 }
        );
    }

    #[test]
    fn ratios() {
        let r = split_weights(&model(array![[1.0, 1.0], [2.0, -3.0], [4.0, 0.0]]), 2, &names(1)).unwrap();
        let ratios = magnitude_ratio(&r).unwrap();
        assert_eq!(ratios[0].ratio, Ratio::Finite(2.0));
        assert_eq!(ratios[1].ratio, Ratio::Finite(0.0));

        let r = split_weights(&model(array![[0.0, 0.0], [5.0, 1.0]]), 1, &names(1)).unwrap();
        assert_eq!(magnitude_ratio(&r).unwrap()[0].ratio, Ratio::Infinite);
        assert_eq!(magnitude_ratio(&image_only_weights(&model(Array2::zeros((2, 2))))), Err(InterpretError::NoMetadata));
    }

    #[test]
    fn histograms_cover_all_weights() {
        let w = Array2::from_shape_fn((10, 2), |(i, j)| i as f64 * 0.37 - j as f64);
        let r = split_weights(&model(w), 7, &names(3)).unwrap();
        assert_eq!(r.bin_edges.len(), HISTOGRAM_BINS + 1);
        for c in &r.classes {
            assert_eq!(c.image_summary.histogram.counts.iter().sum::<u64>(), 7);
            assert_eq!(c.metadata_summary.as_ref().unwrap().histogram.counts.iter().sum::<u64>(), 3);
        }
    }

    #[test]
    fn shared_edges_are_identical() {
        let mut a = image_only_weights(&model(Array2::from_elem((4, 2), 0.5)));
        let mut b = split_weights(&model(Array2::from_shape_fn((6, 2), |(i, _)| i as f64 - 3.0)), 4, &names(2)).unwrap();
        share_bin_edges(&mut [&mut a, &mut b]);
        assert_eq!(a.bin_edges, b.bin_edges);
        assert_eq!(a.bin_edges[0], -3.0);
        assert_eq!(*a.bin_edges.last().unwrap(), 2.0);
        assert_eq!(a.classes[0].image_summary.histogram.counts.iter().sum::<u64>(), 4);
    }

    #[test]
    fn constant_weights_get_a_nonempty_range() {
        let r = image_only_weights(&model(Array2::zeros((3, 2))));
        assert_eq!(r.bin_edges[0], -0.5);
        assert_eq!(r.classes[0].image_summary.histogram.counts.iter().sum::<u64>(), 3);
    }

    #[test]
    fn csv_outputs() {
        let r = split_weights(&model(array![[1.0, 2.0], [3.0, 4.0]]), 1, &["age".to_string()]).unwrap();
        let csv = r.weights_csv();
        assert!(csv.contains("c0,image,0,img_0,1\n"));
        assert!(csv.contains("c1,metadata,1,age,4\n"));
        assert!(csv.contains("c0,bias,,bias,0\n"));
        assert_eq!(r.histogram_csv().lines().count(), 1 + 2 * 2 * HISTOGRAM_BINS);
    }

    #[test]
    fn weight_shift() {
        let a = image_only_weights(&model(Array2::from_elem((2, 2), 10.0)));
        let b = split_weights(&model(Array2::from_elem((3, 2), 0.01)), 2, &names(1)).unwrap();
        let s = image_weight_shift(&a, &b).unwrap();
        assert!((s[0].log10_change.unwrap() + 3.0).abs() < 1e-12);
    }
}

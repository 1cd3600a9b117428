//! Multinomial logistic (softmax) classification head.
//!
//! `P(y = j | z) = exp(z·w_j + b_j) / Σ_k exp(z·w_k + b_k)`, trained by
//! full-batch gradient descent on the mean negative log-likelihood from zero
//! initial parameters. Training stops after `max_epochs` updates or as soon as
//! the infinity norm of the full gradient drops below `gradient_tol`.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum SoftmaxError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty training set")]
    Empty,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("class `{0}` has no training samples")]
    MissingClass(String),
    #[error("loss became non-finite at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub gradient_tol: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 2000,
            gradient_tol: 1e-6,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SoftmaxError> {
        if self.max_epochs < 1 {
            return Err(SoftmaxError::Config("max_epochs must be at least 1".into()));
        }
        if !(self.gradient_tol > 0.0) {
            return Err(SoftmaxError::Config("gradient_tol must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(SoftmaxError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub final_gradient_norm: f64,
    pub final_loss: f64,
    pub gradient_norm: String,
    pub stop_reason: StopReason,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Gradient of the loss with respect to the weights (d x K) and bias (K).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Gradient<T> {
    pub fn inf_norm(&self) -> T {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .fold(T::zero(), |m, g| m.max(g.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel<T> {
    /// Column `j` holds the weight vector of class `j`.
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    pub class_names: Vec<String>,
    pub training_meta: Option<TrainingMeta>,
}

impl<T: Scalar> SoftmaxModel<T> {
    pub fn zeros(d: usize, class_names: Vec<String>) -> Result<Self, SoftmaxError> {
        let k = class_names.len();
        if k < 2 {
            return Err(SoftmaxError::Config(format!("need at least 2 classes, got {k}")));
        }
        if d < 1 {
            return Err(SoftmaxError::Config("input width must be at least 1".into()));
        }
        Ok(Self {
            weights: Array2::zeros((d, k)),
            bias: Array1::zeros(k),
            class_names,
            training_meta: None,
        })
    }

    pub fn n_features(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.weights.ncols()
    }

    /// Logits `X W + b`, one row per sample.
    pub fn logits(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>, SoftmaxError> {
        if x.ncols() != self.n_features() {
            return Err(SoftmaxError::Shape(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.n_features()
            )));
        }
        let mut z = x.dot(&self.weights);
        z += &self.bias;
        Ok(z)
    }

    pub fn predict_proba(&self, x: ArrayView1<'_, T>) -> Result<Array1<T>, SoftmaxError> {
        let x2 = x.insert_axis(Axis(0));
        Ok(self.predict_proba_batch(x2)?.row(0).to_owned())
    }

    pub fn predict_proba_batch(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>, SoftmaxError> {
        let mut z = self.logits(x)?;
        z.rows_mut().into_iter().for_each(|mut row| softmax_inplace(&mut row));
        Ok(z)
    }

    /// Argmax class per row; ties go to the lowest class index.
    pub fn predict(&self, x: ArrayView2<'_, T>) -> Result<Vec<usize>, SoftmaxError> {
        let p = self.predict_proba_batch(x)?;
        Ok(p.rows().into_iter().map(|r| argmax(r)).collect())
    }

    /// Mean negative log-likelihood and its gradient.
    ///
    /// With `class_weights` each sample's term is weighted by the weight of its
    /// label and the sum is normalized by the total weight.
    pub fn loss_and_gradient(
        &self,
        x: ArrayView2<'_, T>,
        y: &[usize],
        class_weights: Option<&[T]>,
    ) -> Result<(T, Gradient<T>), SoftmaxError> {
        let n = x.nrows();
        if n == 0 {
            return Err(SoftmaxError::Empty);
        }
        if y.len() != n {
            return Err(SoftmaxError::Shape(format!("{n} rows but {} labels", y.len())));
        }
        let k = self.n_classes();
        if let Some(&label) = y.iter().find(|&&l| l >= k) {
            return Err(SoftmaxError::Label { label, classes: k });
        }
        if let Some(w) = class_weights {
            if w.len() != k {
                return Err(SoftmaxError::Shape(format!("{} class weights for {k} classes", w.len())));
            }
        }

        let sample_weight = |i: usize| class_weights.map_or(T::one(), |w| w[y[i]]);
        let total: T = (0..n).map(sample_weight).sum();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let d = self.n_features();
        let wt = self.weights.t().as_standard_layout().into_owned();
        let wt = wt.as_slice().expect("standard layout");
        let bias = self.bias.to_vec();

        let mut gw = vec![T::zero(); k * d];
        let mut gb = vec![T::zero(); k];
        // running weighted mean, exact when every sample has the same loss
        let mut loss = T::zero();
        let mut seen = T::zero();
        let mut z = vec![T::zero(); BLOCK * k];
        // pads the final block; its delta is zero so it adds nothing
        let zero_row = vec![T::zero(); d];
        for start in (0..n).step_by(BLOCK) {
            let b = BLOCK.min(n - start);
            let rows: [&[T]; BLOCK] =
                std::array::from_fn(|r| if r < b { &xs[(start + r) * d..(start + r + 1) * d] } else { &zero_row[..] });
            for c in 0..k {
                let dots = dot_block(&rows, &wt[c * d..(c + 1) * d]);
                for r in 0..b {
                    z[r * k + c] = dots[r] + bias[c];
                }
            }
            for r in 0..b {
                let i = start + r;
                let zr = &mut z[r * k..(r + 1) * k];
                let max = zr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let lse = max + zr.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                let sw = sample_weight(i);
                seen += sw;
                if seen > T::zero() {
                    loss += sw / seen * ((lse - zr[y[i]]) - loss);
                }
                // delta = (p - onehot) * sw / total
                let scale = sw / total;
                zr.iter_mut().for_each(|v| *v = (*v - lse).exp() * scale);
                zr[y[i]] -= scale;
            }
            for c in 0..k {
                let delta: [T; BLOCK] = std::array::from_fn(|r| if r < b { z[r * k + c] } else { T::zero() });
                gb[c] += delta[..b].iter().copied().sum::<T>();
                axpy_block(&mut gw[c * d..(c + 1) * d], &delta, &rows);
            }
        }

        let weights = Array2::from_shape_vec((k, d), gw).expect("k x d").reversed_axes().as_standard_layout().into_owned();
        Ok((loss, Gradient { weights, bias: Array1::from(gb) }))
    }

    pub fn loss(&self, x: ArrayView2<'_, T>, y: &[usize]) -> Result<T, SoftmaxError> {
        Ok(self.loss_and_gradient(x, y, None)?.0)
    }

    fn step(&mut self, grad: &Gradient<T>, lr: T) {
        Zip::from(&mut self.weights)
            .and(&grad.weights)
            .for_each(|w, &g| *w -= lr * g);
        Zip::from(&mut self.bias)
            .and(&grad.bias)
            .for_each(|b, &g| *b -= lr * g);
    }
}

/// Rows processed together so the weight and gradient vectors are streamed
/// once per block instead of once per sample.
const BLOCK: usize = 4;
const LANES: usize = 4;

/// Dot product of every row with `w`.
#[inline]
fn dot_block<T: Scalar>(rows: &[&[T]; BLOCK], w: &[T]) -> [T; BLOCK] {
    let mut acc = [[T::zero(); LANES]; BLOCK];
    let body = w.len() / LANES * LANES;
    for j in (0..body).step_by(LANES) {
        let wj = &w[j..j + LANES];
        for r in 0..BLOCK {
            let xr = &rows[r][j..j + LANES];
            for l in 0..LANES {
                acc[r][l] += xr[l] * wj[l];
            }
        }
    }
    std::array::from_fn(|r| {
        let tail: T = (body..w.len()).map(|j| rows[r][j] * w[j]).sum();
        let a = acc[r];
        (a[0] + a[2]) + (a[1] + a[3]) + tail
    })
}

/// `g += sum_r delta[r] * rows[r]`
#[inline]
fn axpy_block<T: Scalar>(g: &mut [T], delta: &[T; BLOCK], rows: &[&[T]; BLOCK]) {
    let d = g.len();
    let [r0, r1, r2, r3] = rows.map(|r| &r[..d]);
    for j in 0..d {
        g[j] += delta[0] * r0[j] + delta[1] * r1[j] + delta[2] * r2[j] + delta[3] * r3[j];
    }
}

fn softmax_inplace<T: Scalar>(row: &mut ndarray::ArrayViewMut1<'_, T>) {
    let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
    row.mapv_inplace(|v| (v - max).exp());
    let sum: T = row.sum();
    row.mapv_inplace(|v| v / sum);
}

fn argmax<T: Scalar>(row: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Trains from zero initialization and returns the model plus the loss
/// evaluated before every update.
pub fn train_traced<T: Scalar>(
    x: ArrayView2<'_, T>,
    y: &[usize],
    class_names: Vec<String>,
    cfg: &TrainConfig,
) -> Result<(SoftmaxModel<T>, Vec<T>), SoftmaxError> {
    cfg.validate()?;
    let mut model = SoftmaxModel::zeros(x.ncols(), class_names)?;
    if x.nrows() == 0 {
        return Err(SoftmaxError::Empty);
    }
    let k = model.n_classes();
    let mut present = vec![false; k];
    for &label in y {
        if label >= k {
            return Err(SoftmaxError::Label { label, classes: k });
        }
        present[label] = true;
    }
    if let Some(absent) = present.iter().position(|p| !p) {
        return Err(SoftmaxError::MissingClass(model.class_names[absent].clone()));
    }

    let lr = T::of(cfg.learning_rate);
    let tol = T::of(cfg.gradient_tol);
    let mut history = Vec::with_capacity(cfg.max_epochs.min(1 << 16));
    let mut epochs_run = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    let (mut loss, mut grad) = model.loss_and_gradient(x, y, None)?;
    loop {
        if !loss.is_finite() || grad.inf_norm().is_nan() {
            return Err(SoftmaxError::Divergence { epoch: epochs_run });
        }
        if grad.inf_norm() < tol {
            stop_reason = StopReason::GradientTolerance;
            break;
        }
        if epochs_run == cfg.max_epochs {
            break;
        }
        history.push(loss);
        model.step(&grad, lr);
        epochs_run += 1;
        (loss, grad) = model.loss_and_gradient(x, y, None)?;
    }

    if model.weights.iter().chain(model.bias.iter()).any(|v| !v.is_finite()) {
        return Err(SoftmaxError::Divergence { epoch: epochs_run });
    }
    model.training_meta = Some(TrainingMeta {
        epochs_run,
        final_gradient_norm: grad.inf_norm().as_f64(),
        final_loss: loss.as_f64(),
        gradient_norm: "inf".into(),
        stop_reason,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
    });
    Ok((model, history))
}

pub fn train<T: Scalar>(
    x: ArrayView2<'_, T>,
    y: &[usize],
    class_names: Vec<String>,
    cfg: &TrainConfig,
) -> Result<SoftmaxModel<T>, SoftmaxError> {
    train_traced(x, y, class_names, cfg).map(|(m, _)| m)
}

/// On-disk model: `weights` is the d x K matrix flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub class_names: Vec<String>,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub training_meta: Option<TrainingMeta>,
}

impl<T: Scalar> SoftmaxModel<T> {
    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            class_names: self.class_names.clone(),
            d: self.n_features(),
            k: self.n_classes(),
            weights: self.weights.iter().map(|v| v.as_f64()).collect(),
            bias: self.bias.iter().map(|v| v.as_f64()).collect(),
            training_meta: self.training_meta.clone(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self, SoftmaxError> {
        if file.class_names.len() != file.k || file.bias.len() != file.k {
            return Err(SoftmaxError::Shape("class count disagrees with bias/names".into()));
        }
        let weights = Array2::from_shape_vec((file.d, file.k), file.weights.into_iter().map(T::of).collect())
            .map_err(|e| SoftmaxError::Shape(e.to_string()))?;
        let model = SoftmaxModel {
            weights,
            bias: file.bias.into_iter().map(T::of).collect(),
            class_names: file.class_names,
            training_meta: file.training_meta,
        };
        if model.weights.iter().chain(model.bias.iter()).any(|v| !v.is_finite()) {
            return Err(SoftmaxError::Shape("non-finite parameters".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), SoftmaxError> {
        let mut text = serde_json::to_string_pretty(&self.to_file())?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SoftmaxError> {
        let file: ModelFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_file(file)
    }
}

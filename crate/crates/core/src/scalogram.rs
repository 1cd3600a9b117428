//! Continuous wavelet transform scalograms of multi-lead ECG signals.
//!
//! The analyzing wavelet is a generalized Morse wavelet, defined in the
//! frequency domain as
//!
//! ```text
//! psi_hat(w) = A * w^beta * exp(-w^gamma)   for w > 0, and 0 otherwise
//! ```
//!
//! with `beta = time_bandwidth / gamma` and `A` chosen so that the peak value,
//! reached at `w_peak = (beta / gamma)^(1 / gamma)`, is 2.
//!
//! Coefficients follow `X(a, b) = a^(-1/2) * sum_t x(t) * conj(psi((t - b) / a))`
//! with time in samples. They are evaluated through the FFT: the signal is
//! zero-padded to the next power of two `M` and multiplied bin-wise by
//! `sqrt(a) * psi_hat(a * w_k)`, `w_k = 2 pi k / M`, with negative-frequency bins
//! set to zero. The convolution is therefore circular with period `M`.
//!
//! Scales are geometric with `voices_per_octave` per octave, from the scale
//! whose peak frequency sits at Nyquist (`a = w_peak / pi`) up to the largest
//! scale whose two-sided time spread `2 * a * sigma_t` fits in the signal.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use ndarray::{s, Array2};
use num_complex::Complex;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::scalar::Scalar;

/// Clinical 12-lead order used for the default montage.
pub const STANDARD_LEADS: [&str; 12] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

#[derive(Debug, Error)]
pub enum ScalogramError {
    #[error("invalid wavelet parameters: {0}")]
    Parameter(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid montage configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveletSpec {
    pub gamma: f64,
    pub time_bandwidth: f64,
    pub voices_per_octave: usize,
}

impl Default for WaveletSpec {
    fn default() -> Self {
        Self {
            gamma: 3.0,
            time_bandwidth: 60.0,
            voices_per_octave: 10,
        }
    }
}

impl WaveletSpec {
    pub fn validate(&self) -> Result<(), ScalogramError> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(ScalogramError::Parameter(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.time_bandwidth > self.gamma) || !self.time_bandwidth.is_finite() {
            return Err(ScalogramError::Parameter(format!(
                "time-bandwidth product {} must exceed gamma {}",
                self.time_bandwidth, self.gamma
            )));
        }
        if self.voices_per_octave < 1 {
            return Err(ScalogramError::Parameter("voices_per_octave must be at least 1".into()));
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        self.time_bandwidth / self.gamma
    }

    /// Radian frequency of the spectral peak at unit scale.
    pub fn peak_frequency(&self) -> f64 {
        (self.beta() / self.gamma).powf(1.0 / self.gamma)
    }

    /// Spectrum value at radian frequency `w` (unit scale).
    pub fn spectrum(&self, w: f64) -> f64 {
        if w <= 0.0 {
            return 0.0;
        }
        let (beta, gamma) = (self.beta(), self.gamma);
        let wp = self.peak_frequency();
        2.0 * (beta * (w / wp).ln() - w.powf(gamma) + beta / gamma).exp()
    }

    /// Standard deviation of `|psi(t)|^2` in time at unit scale.
    pub fn time_std(&self) -> f64 {
        let (beta, gamma) = (self.beta(), self.gamma);
        // ln of integral_0^inf w^p exp(-2 w^gamma) dw
        let ln_moment = |p: f64| {
            let r = (p + 1.0) / gamma;
            ln_gamma(r) - gamma.ln() - r * std::f64::consts::LN_2
        };
        let base = ln_moment(2.0 * beta);
        let term = |p: f64| (ln_moment(p) - base).exp();
        let var = beta * beta * term(2.0 * beta - 2.0) - 2.0 * beta * gamma * term(2.0 * beta + gamma - 2.0)
            + gamma * gamma * term(2.0 * beta + 2.0 * gamma - 2.0);
        var.sqrt()
    }

    /// Geometric scale grid (in samples) for a signal of `len` samples.
    pub fn scales(&self, len: usize) -> Vec<f64> {
        let a_min = self.peak_frequency() / std::f64::consts::PI;
        let a_max = len as f64 / (2.0 * self.time_std());
        let v = self.voices_per_octave as f64;
        let steps = if a_max > a_min {
            (v * (a_max / a_min).log2() + 1e-9).floor() as usize
        } else {
            0
        };
        (0..=steps).map(|j| a_min * (j as f64 / v).exp2()).collect()
    }
}

/// Morse spectrum on a non-negative ascending radian-frequency grid.
pub fn morse_wavelet_fd<T: Scalar>(spec: &WaveletSpec, omega: &[T]) -> Result<Vec<Complex<T>>, ScalogramError> {
    spec.validate()?;
    if omega.iter().any(|w| !(w.as_f64() >= 0.0)) {
        return Err(ScalogramError::Input("frequency grid must be non-negative".into()));
    }
    if omega.windows(2).any(|p| p[1] < p[0]) {
        return Err(ScalogramError::Input("frequency grid must be ascending".into()));
    }
    Ok(omega
        .iter()
        .map(|w| Complex::new(T::of(spec.spectrum(w.as_f64())), T::zero()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScalogramValue {
    /// `|X(a, b)|`
    #[default]
    Magnitude,
    /// `|X(a, b)|^2`
    Power,
}

/// Complex CWT coefficients, one row per scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CwtCoefficients<T> {
    pub coefficients: Array2<Complex<T>>,
    pub scales: Vec<f64>,
    pub padded_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scalogram<T> {
    /// S x T, row `s` belongs to `scales[s]`.
    pub magnitudes: Array2<T>,
    pub scales: Vec<f64>,
    /// Equivalent frequency in Hz of every scale.
    pub frequencies: Vec<f64>,
    /// Cone of influence: per time sample, the largest scale unaffected by the edges.
    pub coi: Vec<f64>,
    pub value: ScalogramValue,
}

/// FFT-domain CWT of one lead.
pub fn cwt_coefficients<T: Scalar>(signal: &[T], spec: &WaveletSpec) -> Result<CwtCoefficients<T>, ScalogramError> {
    spec.validate()?;
    let n = signal.len();
    if n < 2 {
        return Err(ScalogramError::Input(format!("signal needs at least 2 samples, got {n}")));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(ScalogramError::Input("signal contains non-finite samples".into()));
    }
    let m = n.next_power_of_two();
    let scales = spec.scales(n);

    let mut planner = FftPlanner::<T>::new();
    let forward = planner.plan_fft_forward(m);
    let inverse = planner.plan_fft_inverse(m);

    let mut spectrum: Vec<Complex<T>> = signal
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .chain(std::iter::repeat(Complex::new(T::zero(), T::zero())))
        .take(m)
        .collect();
    forward.process(&mut spectrum);

    let inv_m = T::of(1.0 / m as f64);
    let mut coefficients = Array2::from_elem((scales.len(), n), Complex::new(T::zero(), T::zero()));
    let mut buf = vec![Complex::new(T::zero(), T::zero()); m];
    for (row, &a) in scales.iter().enumerate() {
        let root = a.sqrt();
        for (k, (out, &x)) in buf.iter_mut().zip(&spectrum).enumerate() {
            *out = if k <= m / 2 {
                let w = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
                x * T::of(root * spec.spectrum(a * w))
            } else {
                Complex::new(T::zero(), T::zero())
            };
        }
        inverse.process(&mut buf);
        for (dst, src) in coefficients.row_mut(row).iter_mut().zip(&buf) {
            *dst = *src * inv_m;
        }
    }
    Ok(CwtCoefficients {
        coefficients,
        scales,
        padded_len: m,
    })
}

pub fn cwt<T: Scalar>(
    signal: &[T],
    sampling_rate: f64,
    spec: &WaveletSpec,
    value: ScalogramValue,
) -> Result<Scalogram<T>, ScalogramError> {
    if !(sampling_rate > 0.0) {
        return Err(ScalogramError::Input(format!("sampling rate must be positive, got {sampling_rate}")));
    }
    let c = cwt_coefficients(signal, spec)?;
    let magnitudes = c.coefficients.mapv(|z| match value {
        ScalogramValue::Magnitude => z.norm(),
        ScalogramValue::Power => z.norm_sqr(),
    });
    let wp = spec.peak_frequency();
    let frequencies = c
        .scales
        .iter()
        .map(|a| wp * sampling_rate / (2.0 * std::f64::consts::PI * a))
        .collect();
    let sigma = spec.time_std();
    let n = signal.len();
    let coi = (0..n).map(|b| b.min(n - 1 - b) as f64 / sigma).collect();
    Ok(Scalogram {
        magnitudes,
        scales: c.scales,
        frequencies,
        coi,
        value,
    })
}

/// Min-max normalization to [0, 1]; a constant input maps to all zeros.
pub fn normalize_minmax<T: Scalar>(values: &Array2<T>) -> Array2<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.as_f64();
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if !(range > 0.0) {
        return Array2::zeros(values.dim());
    }
    values.mapv(|v| ((v.as_f64() - lo) / range) as f32)
}

/// Bilinear resampling with corner alignment.
pub fn resize_bilinear(src: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.clone();
    }
    let coord = |i: usize, dst: usize, src_len: usize| -> f64 {
        if dst <= 1 || src_len <= 1 {
            (src_len as f64 - 1.0) / 2.0
        } else {
            i as f64 * (src_len - 1) as f64 / (dst - 1) as f64
        }
    };
    Array2::from_shape_fn((height, width), |(i, j)| {
        let y = coord(i, height, sh);
        let x = coord(j, width, sw);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
        let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSize {
    pub height: usize,
    pub width: usize,
}

impl Default for TileSize {
    fn default() -> Self {
        Self { height: 75, width: 56 }
    }
}

/// Renders one lead: per-lead min-max normalization, highest frequency in
/// the top row, resampled to the tile size.
pub fn render_scalogram<T: Scalar>(scalo: &Scalogram<T>, tile: TileSize) -> Result<Array2<f32>, ScalogramError> {
    if scalo.magnitudes.is_empty() {
        return Err(ScalogramError::Input("empty scalogram".into()));
    }
    if tile.height == 0 || tile.width == 0 {
        return Err(ScalogramError::Config("tile dimensions must be positive".into()));
    }
    // rows run from the smallest scale (highest frequency) down, so low frequencies land at the bottom
    Ok(resize_bilinear(&normalize_minmax(&scalo.magnitudes), tile.height, tile.width))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcgSignal<T> {
    pub leads: Vec<Vec<T>>,
    pub sampling_rate: f64,
    pub lead_names: Vec<String>,
}

impl<T: Scalar> EcgSignal<T> {
    pub fn new(leads: Vec<Vec<T>>, sampling_rate: f64, lead_names: Vec<String>) -> Result<Self, ScalogramError> {
        if leads.is_empty() {
            return Err(ScalogramError::Input("signal has no leads".into()));
        }
        if leads.len() != lead_names.len() {
            return Err(ScalogramError::Input(format!(
                "{} leads but {} names",
                leads.len(),
                lead_names.len()
            )));
        }
        let len = leads[0].len();
        if len < 2 || leads.iter().any(|l| l.len() != len) {
            return Err(ScalogramError::Input("leads must share one length of at least 2".into()));
        }
        if !(sampling_rate > 0.0) {
            return Err(ScalogramError::Input(format!("sampling rate must be positive, got {sampling_rate}")));
        }
        Ok(Self {
            leads,
            sampling_rate,
            lead_names,
        })
    }

    pub fn len(&self) -> usize {
        self.leads[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Reorders leads to `order`; every name must be present exactly once.
    pub fn reordered(&self, order: &[&str]) -> Result<Self, ScalogramError> {
        if order.len() != self.lead_names.len() {
            return Err(ScalogramError::Config("lead order must name every lead".into()));
        }
        let mut leads = Vec::with_capacity(order.len());
        for name in order {
            let i = self
                .lead_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| ScalogramError::Config(format!("unknown lead `{name}`")))?;
            leads.push(self.leads[i].clone());
        }
        Self::new(leads, self.sampling_rate, order.iter().map(|s| s.to_string()).collect())
    }

    /// Standard clinical order when the leads are exactly the 12 standard ones.
    pub fn in_clinical_order(&self) -> Self {
        let mut names: Vec<&str> = self.lead_names.iter().map(String::as_str).collect();
        names.sort_unstable();
        let mut standard = STANDARD_LEADS;
        standard.sort_unstable();
        if names == standard {
            self.reordered(&STANDARD_LEADS).expect("names checked")
        } else {
            self.clone()
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct SignalSidecar {
    sampling_rate: f64,
}

/// Reads a CSV with one column per lead and a header row of lead names.
/// The sampling rate comes from `fs` or, if `None`, from `<file>.json`.
pub fn read_signal_csv<T: Scalar>(path: &Path, fs: Option<f64>) -> Result<EcgSignal<T>, ScalogramError> {
    let mut reader = csv::Reader::from_path(path)?;
    let names: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut leads = vec![Vec::new(); names.len()];
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        for (lead, cell) in leads.iter_mut().zip(row.iter()) {
            let v: f64 = cell.trim().parse().map_err(|_| {
                ScalogramError::Input(format!("row {}: `{cell}` is not a number", line + 1))
            })?;
            lead.push(T::of(v));
        }
    }
    let sampling_rate = match fs {
        Some(fs) => fs,
        None => {
            let mut side = path.as_os_str().to_owned();
            side.push(".json");
            let side: SignalSidecar = serde_json::from_reader(BufReader::new(File::open(side)?))?;
            side.sampling_rate
        }
    };
    EcgSignal::new(leads, sampling_rate, names)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
}

impl Default for Layout {
    fn default() -> Self {
        Self { rows: 3, cols: 4 }
    }
}

impl std::str::FromStr for Layout {
    type Err = ScalogramError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| ScalogramError::Config(format!("layout `{s}` is not ROWSxCOLS")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| ScalogramError::Config(format!("layout `{s}` is not ROWSxCOLS")))
        };
        Ok(Layout { rows: parse(r)?, cols: parse(c)? })
    }
}

/// Self-describing record written next to montage images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MontageSidecar {
    pub layout: Layout,
    pub tile_size: TileSize,
    pub tile_order: Vec<String>,
    pub sampling_rate: f64,
    pub wavelet: WaveletSpec,
    pub wavelet_family: String,
    pub value: ScalogramValue,
    pub normalization: String,
    pub orientation: String,
    pub scale_rule: String,
    pub scales: Vec<f64>,
    pub frequencies_hz: Vec<f64>,
    pub cone_of_influence: Vec<f64>,
    pub boundary: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalogramMontage {
    /// Grayscale image in [0, 1], `rows * tile.height` x `cols * tile.width`.
    pub image: Array2<f32>,
    pub sidecar: MontageSidecar,
}

impl ScalogramMontage {
    pub fn tile(&self, index: usize) -> ndarray::ArrayView2<'_, f32> {
        let TileSize { height, width } = self.sidecar.tile_size;
        let (r, c) = (index / self.sidecar.layout.cols, index % self.sidecar.layout.cols);
        self.image
            .slice(s![r * height..(r + 1) * height, c * width..(c + 1) * width])
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ScalogramError> {
        write_gray_png(&self.image, path)?;
        let mut side = path.as_os_str().to_owned();
        side.push(".json");
        let mut text = serde_json::to_string_pretty(&self.sidecar)?;
        text.push('\n');
        std::fs::write(side, text)?;
        Ok(())
    }
}

/// Writes a [0, 1] image as 8-bit grayscale PNG.
pub fn write_gray_png(img: &Array2<f32>, path: &Path) -> Result<(), ScalogramError> {
    let (h, w) = img.dim();
    let pixels: Vec<u8> = img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| ScalogramError::Config("image dimensions overflow".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Tiles per-lead scalograms row-major in `lead_names` order; unused cells stay black.
pub fn montage<T: Scalar>(
    signal: &EcgSignal<T>,
    spec: &WaveletSpec,
    layout: Layout,
    tile: TileSize,
    value: ScalogramValue,
) -> Result<ScalogramMontage, ScalogramError> {
    spec.validate()?;
    let leads = signal.leads.len();
    if layout.rows * layout.cols < leads {
        return Err(ScalogramError::Config(format!(
            "{}x{} layout has room for {} tiles but the signal has {leads} leads",
            layout.rows,
            layout.cols,
            layout.rows * layout.cols
        )));
    }
    if tile.height == 0 || tile.width == 0 {
        return Err(ScalogramError::Config("tile dimensions must be positive".into()));
    }

    let scalograms = signal
        .leads
        .par_iter()
        .map(|lead| cwt(lead, signal.sampling_rate, spec, value))
        .collect::<Result<Vec<_>, _>>()?;
    let tiles = scalograms
        .par_iter()
        .map(|s| render_scalogram(s, tile))
        .collect::<Result<Vec<_>, _>>()?;

    let mut image = Array2::<f32>::zeros((layout.rows * tile.height, layout.cols * tile.width));
    for (i, t) in tiles.iter().enumerate() {
        let (r, c) = (i / layout.cols, i % layout.cols);
        image
            .slice_mut(s![
                r * tile.height..(r + 1) * tile.height,
                c * tile.width..(c + 1) * tile.width
            ])
            .assign(t);
    }

    let first = &scalograms[0];
    Ok(ScalogramMontage {
        image,
        sidecar: MontageSidecar {
            layout,
            tile_size: tile,
            tile_order: signal.lead_names.clone(),
            sampling_rate: signal.sampling_rate,
            wavelet: *spec,
            wavelet_family: "generalized Morse, peak-normalized to 2".into(),
            value,
            normalization: "per-lead min-max to [0, 1]; constant tiles render as 0".into(),
            orientation: "row 0 = highest frequency; low frequencies at the bottom".into(),
            scale_rule: "geometric; from peak frequency at Nyquist up to the largest scale with 2*a*sigma_t <= T".into(),
            scales: first.scales.clone(),
            frequencies_hz: first.frequencies.clone(),
            cone_of_influence: first.coi.clone(),
            boundary: "zero padding to the next power of two, circular convolution; cone of influence recorded, not masked".into(),
        },
    })
}

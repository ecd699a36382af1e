//! Residual generators: content-suppressing transforms that expose noise.

use std::fmt;
use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use ndarray::{arr2, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::{to_grayscale, RgbImage};

/// Correlation kernel with odd dimensions, anchored at its center.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    name: String,
    weights: Array2<f64>,
}

impl Kernel {
    pub fn new(name: impl Into<String>, weights: Array2<f64>) -> Result<Self> {
        let (h, w) = weights.dim();
        if h % 2 == 0 || w % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "kernel dimensions must be odd, got {h}x{w}"
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("kernel weights must be finite".into()));
        }
        Ok(Self {
            name: name.into(),
            weights,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn is_zero_sum(&self) -> bool {
        self.weights.sum().abs() < 1e-12
    }
}

/// Built-in high-pass predictors from the SRM family.
///
/// The first-order kernels are two-tap differences `x[j+1] - x[j]`; they are
/// stored zero-padded to 3 taps so every kernel has a center.
pub fn default_steganalytic_kernels() -> Vec<Kernel> {
    let kernels = [
        ("first_order_h", arr2(&[[0.0, -1.0, 1.0]])),
        ("first_order_v", arr2(&[[0.0], [-1.0], [1.0]])),
        ("second_order", arr2(&[[1.0, -2.0, 1.0]])),
        (
            "kb",
            arr2(&[[-1.0, 2.0, -1.0], [2.0, -4.0, 2.0], [-1.0, 2.0, -1.0]]) * 0.25,
        ),
    ];
    kernels
        .into_iter()
        .map(|(name, w)| Kernel::new(name, w).expect("built-in kernel is valid"))
        .collect()
}

pub fn steganalytic_kernel(name: &str) -> Option<Kernel> {
    default_steganalytic_kernels()
        .into_iter()
        .find(|k| k.name == name)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ResidualKind {
    Steganalytic(String),
    Ela,
    Median,
    Wavelet,
}

impl ResidualKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ela" => Ok(Self::Ela),
            "median" => Ok(Self::Median),
            "wavelet" => Ok(Self::Wavelet),
            other => match other.strip_prefix("steganalytic:") {
                Some(k) if steganalytic_kernel(k).is_some() => Ok(Self::Steganalytic(k.into())),
                _ => Err(Error::UnknownGenerator(other.into())),
            },
        }
    }
}

impl fmt::Display for ResidualKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Steganalytic(k) => write!(f, "steganalytic:{k}"),
            Self::Ela => f.write_str("ela"),
            Self::Median => f.write_str("median"),
            Self::Wavelet => f.write_str("wavelet"),
        }
    }
}

/// A residual image; values may be negative.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub kind: ResidualKind,
    pub data: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStack {
    pub residuals: Vec<Residual>,
}

impl ResidualStack {
    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualConfig {
    /// Generator names, e.g. `steganalytic:kb`, `ela`, `median`, `wavelet`.
    pub generators: Vec<String>,
    pub ela_quality: u8,
    pub median_window: usize,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        let mut generators: Vec<String> = default_steganalytic_kernels()
            .iter()
            .map(|k| format!("steganalytic:{}", k.name))
            .collect();
        generators.extend(["ela", "median", "wavelet"].map(String::from));
        Self {
            generators,
            ela_quality: 90,
            median_window: 3,
        }
    }
}

impl ResidualConfig {
    pub fn kinds(&self) -> Result<Vec<ResidualKind>> {
        if self.generators.is_empty() {
            return Err(Error::Config("no residual generators configured".into()));
        }
        let kinds = self
            .generators
            .iter()
            .map(|g| ResidualKind::parse(g))
            .collect::<Result<Vec<_>>>()?;
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(Error::Config(format!("generator `{k}` listed twice")));
            }
        }
        Ok(kinds)
    }
}

/// Half-sample symmetric reflection: `-1 -> 0`, `n -> n-1`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

pub(crate) fn pad_reflect(img: ArrayView2<'_, f64>, top: usize, bottom: usize, left: usize, right: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h + top + bottom, w + left + right), |(r, c)| {
        img[[
            reflect(r as isize - top as isize, h),
            reflect(c as isize - left as isize, w),
        ]]
    })
}

/// 2-D correlation with reflect padding; output has the input's shape.
pub fn correlate(img: ArrayView2<'_, f64>, kernel: &Kernel) -> Result<Array2<f64>> {
    let (h, w) = img.dim();
    let (kh, kw) = kernel.weights.dim();
    if kh > h || kw > w {
        return Err(Error::Dimensions(format!(
            "kernel {kh}x{kw} larger than image {h}x{w}"
        )));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let padded = pad_reflect(img, ph, ph, pw, pw);
    let mut out = Array2::zeros((h, w));
    for ((u, v), &k) in kernel.weights.indexed_iter() {
        if k == 0.0 {
            continue;
        }
        let window = padded.slice(ndarray::s![u..u + h, v..v + w]);
        out.scaled_add(k, &window);
    }
    Ok(out)
}

pub fn conv_residual(img: ArrayView2<'_, f64>, kernel: &Kernel) -> Result<Residual> {
    Ok(Residual {
        kind: ResidualKind::Steganalytic(kernel.name.clone()),
        data: correlate(img, kernel)?,
    })
}

/// Encodes at the given JPEG quality and decodes again.
pub fn jpeg_round_trip(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidParameter(format!(
            "jpeg quality {quality} outside 1..=100"
        )));
    }
    let rgb8 = img.to_rgb8();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&rgb8)
        .map_err(Error::Encode)?;
    let decoded = image::load(Cursor::new(&buf), ImageFormat::Jpeg).map_err(Error::Encode)?;
    Ok(RgbImage::from_rgb8(&decoded.to_rgb8()))
}

/// Error level analysis: mean absolute channel difference after a JPEG
/// re-save at `quality`.
pub fn ela_residual(img: &RgbImage, quality: u8) -> Result<Residual> {
    let original = RgbImage::from_rgb8(&img.to_rgb8());
    let resaved = jpeg_round_trip(&original, quality)?;
    let (h, w) = (img.height(), img.width());
    let data = Array2::from_shape_fn((h, w), |(r, c)| {
        let a = original.pixel(r, c);
        let b = resaved.pixel(r, c);
        (0..3).map(|ch| (a[ch] - b[ch]).abs()).sum::<f64>() / 3.0
    });
    Ok(Residual {
        kind: ResidualKind::Ela,
        data,
    })
}

fn check_window(window: usize, h: usize, w: usize) -> Result<()> {
    if window < 3 || window.is_multiple_of(2) || window >= h.min(w) {
        return Err(Error::InvalidParameter(format!(
            "median window {window} must be odd, >= 3 and smaller than {h}x{w}"
        )));
    }
    Ok(())
}

pub fn median_filter(img: ArrayView2<'_, f64>, window: usize) -> Result<Array2<f64>> {
    let (h, w) = img.dim();
    check_window(window, h, w)?;
    let half = window / 2;
    let padded = pad_reflect(img, half, half, half, half);
    let mid = window * window / 2;
    let mut buf = Vec::with_capacity(window * window);
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            buf.clear();
            buf.extend(padded.slice(ndarray::s![r..r + window, c..c + window]).iter().copied());
            let (_, m, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
            out[[r, c]] = *m;
        }
    }
    Ok(out)
}

pub fn median_residual(img: ArrayView2<'_, f64>, window: usize) -> Result<Residual> {
    let filtered = median_filter(img, window)?;
    Ok(Residual {
        kind: ResidualKind::Median,
        data: &img - &filtered,
    })
}

/// Daubechies 4-vanishing-moment (8-tap) low-pass analysis filter.
const DB4_LO: [f64; 8] = [
    -0.010_597_401_784_997_278,
    0.032_883_011_666_982_945,
    0.030_841_381_835_986_965,
    -0.187_034_811_718_881_14,
    -0.027_983_769_416_983_85,
    0.630_880_767_929_590_4,
    0.714_846_570_552_541_5,
    0.230_377_813_308_855_23,
];

fn db4_hi() -> [f64; 8] {
    let mut hi = [0.0; 8];
    for (i, h) in hi.iter_mut().enumerate() {
        let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
        *h = sign * DB4_LO[7 - i];
    }
    hi
}

/// One periodic analysis step along a signal of even length.
fn analyze_1d(x: &[f64], lo: &[f64], hi: &[f64], approx: &mut [f64], detail: &mut [f64]) {
    let n = x.len();
    for k in 0..n / 2 {
        let (mut a, mut d) = (0.0, 0.0);
        for (i, (&l, &g)) in lo.iter().zip(hi).enumerate() {
            let v = x[(2 * k + i) % n];
            a += l * v;
            d += g * v;
        }
        approx[k] = a;
        detail[k] = d;
    }
}

fn synthesize_1d(approx: &[f64], detail: &[f64], lo: &[f64], hi: &[f64], out: &mut [f64]) {
    let n = out.len();
    out.fill(0.0);
    for k in 0..n / 2 {
        for (i, (&l, &g)) in lo.iter().zip(hi).enumerate() {
            out[(2 * k + i) % n] += l * approx[k] + g * detail[k];
        }
    }
}

/// Separable single-level 2-D transform. Returns `[LL, LH, HL, HH]` where the
/// second letter is the filter applied along columns (vertically).
fn dwt2(x: &Array2<f64>, lo: &[f64], hi: &[f64]) -> [Array2<f64>; 4] {
    let (h, w) = x.dim();
    let mut row_lo = Array2::zeros((h, w / 2));
    let mut row_hi = Array2::zeros((h, w / 2));
    let mut a = vec![0.0; w / 2];
    let mut d = vec![0.0; w / 2];
    for r in 0..h {
        let row: Vec<f64> = x.row(r).to_vec();
        analyze_1d(&row, lo, hi, &mut a, &mut d);
        row_lo.row_mut(r).assign(&ndarray::ArrayView1::from(&a));
        row_hi.row_mut(r).assign(&ndarray::ArrayView1::from(&d));
    }
    let split_cols = |src: &Array2<f64>| {
        let mut low = Array2::zeros((h / 2, w / 2));
        let mut high = Array2::zeros((h / 2, w / 2));
        let mut a = vec![0.0; h / 2];
        let mut d = vec![0.0; h / 2];
        for c in 0..w / 2 {
            let col: Vec<f64> = src.column(c).to_vec();
            analyze_1d(&col, lo, hi, &mut a, &mut d);
            low.column_mut(c).assign(&ndarray::ArrayView1::from(&a));
            high.column_mut(c).assign(&ndarray::ArrayView1::from(&d));
        }
        (low, high)
    };
    let (ll, hl) = split_cols(&row_lo);
    let (lh, hh) = split_cols(&row_hi);
    [ll, lh, hl, hh]
}

fn idwt2(bands: &[Array2<f64>; 4], lo: &[f64], hi: &[f64]) -> Array2<f64> {
    let [ll, lh, hl, hh] = bands;
    let (h2, w2) = ll.dim();
    let (h, w) = (2 * h2, 2 * w2);
    let merge_cols = |low: &Array2<f64>, high: &Array2<f64>| {
        let mut out = Array2::zeros((h, w2));
        let mut col = vec![0.0; h];
        for c in 0..w2 {
            let a = low.column(c).to_vec();
            let d = high.column(c).to_vec();
            synthesize_1d(&a, &d, lo, hi, &mut col);
            out.column_mut(c).assign(&ndarray::ArrayView1::from(&col));
        }
        out
    };
    let row_lo = merge_cols(ll, hl);
    let row_hi = merge_cols(lh, hh);
    let mut out = Array2::zeros((h, w));
    let mut row = vec![0.0; w];
    for r in 0..h {
        let a = row_lo.row(r).to_vec();
        let d = row_hi.row(r).to_vec();
        synthesize_1d(&a, &d, lo, hi, &mut row);
        out.row_mut(r).assign(&ndarray::ArrayView1::from(&row));
    }
    out
}

pub(crate) fn median_of(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len();
    v.sort_by(f64::total_cmp);
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn soft_threshold(band: &mut Array2<f64>, t: f64) {
    band.mapv_inplace(|v| v.signum() * (v.abs() - t).max(0.0));
}

const WAVELET_LEVELS: usize = 2;

/// Two-level db4 VisuShrink denoising (soft universal threshold).
pub fn wavelet_denoise(img: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (h, w) = img.dim();
    if h.min(w) < 16 {
        return Err(Error::Dimensions(format!(
            "wavelet denoising needs at least 16x16, got {h}x{w}"
        )));
    }
    let block = 1 << WAVELET_LEVELS;
    let (ph, pw) = (h.next_multiple_of(block), w.next_multiple_of(block));
    let padded = pad_reflect(img, 0, ph - h, 0, pw - w);
    let hi = db4_hi();

    let level1 = dwt2(&padded, &DB4_LO, &hi);
    let level2 = dwt2(&level1[0], &DB4_LO, &hi);
    let sigma = median_of(level1[3].iter().map(|v| v.abs())) / 0.6745;
    let threshold = sigma * (2.0 * ((ph * pw) as f64).ln()).sqrt();

    let [ll2, mut lh2, mut hl2, mut hh2] = level2;
    let [_, mut lh1, mut hl1, mut hh1] = level1;
    for band in [&mut lh2, &mut hl2, &mut hh2, &mut lh1, &mut hl1, &mut hh1] {
        soft_threshold(band, threshold);
    }
    let ll1 = idwt2(&[ll2, lh2, hl2, hh2], &DB4_LO, &hi);
    let rec = idwt2(&[ll1, lh1, hl1, hh1], &DB4_LO, &hi);
    Ok(rec.slice(ndarray::s![..h, ..w]).to_owned())
}

pub fn wavelet_residual(img: ArrayView2<'_, f64>) -> Result<Residual> {
    let denoised = wavelet_denoise(img)?;
    Ok(Residual {
        kind: ResidualKind::Wavelet,
        data: &img - &denoised,
    })
}

fn generate(img: &RgbImage, gray: ArrayView2<'_, f64>, kind: &ResidualKind, cfg: &ResidualConfig) -> Result<Residual> {
    match kind {
        ResidualKind::Steganalytic(name) => {
            let kernel = steganalytic_kernel(name).ok_or_else(|| Error::UnknownGenerator(name.clone()))?;
            conv_residual(gray, &kernel)
        }
        ResidualKind::Ela => ela_residual(img, cfg.ela_quality),
        ResidualKind::Median => median_residual(gray, cfg.median_window),
        ResidualKind::Wavelet => wavelet_residual(gray),
    }
}

/// Runs every configured generator; output order follows the configuration.
pub fn build_stack(img: &RgbImage, cfg: &ResidualConfig) -> Result<ResidualStack> {
    let kinds = cfg.kinds()?;
    let gray = to_grayscale(img);
    let residuals = kinds
        .par_iter()
        .map(|kind| {
            generate(img, gray.view(), kind, cfg).map_err(|e| Error::Residual {
                kind: kind.to_string(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResidualStack { residuals })
}

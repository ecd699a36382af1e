//! Synthetic manipulations with pixel-exact ground truth.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::{to_grayscale, RgbImage, TamperMask};
use crate::residuals::{correlate, jpeg_round_trip, Kernel};

/// Noise multipliers of the four removal variants.
pub const REMOVAL_MULTIPLIERS: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.width >= 1 && self.height >= 1 && self.x + self.width <= width && self.y + self.height <= height
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x < other.x + other.width
            && other.x < self.x + self.width
            && self.y < other.y + other.height
            && other.y < self.y + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y..self.y + self.height).contains(&row) && (self.x..self.x + self.width).contains(&col)
    }

    fn mask(&self, height: usize, width: usize) -> TamperMask {
        let mut mask = TamperMask::zeros(height, width);
        mask.fill_rect(self.y, self.x, self.height, self.width);
        mask
    }

    fn check(&self, height: usize, width: usize, what: &str) -> Result<()> {
        if self.fits(height, width) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "{what} rect {self:?} does not fit a {height}x{width} image"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TamperType {
    #[serde(rename = "R")]
    Removal,
    #[serde(rename = "J")]
    SpliceJpeg,
    #[serde(rename = "F")]
    SpliceSharpen,
    #[serde(rename = "B")]
    Blur,
    #[serde(rename = "G")]
    Genuine,
}

impl TamperType {
    pub fn code(self) -> &'static str {
        match self {
            TamperType::Removal => "R",
            TamperType::SpliceJpeg => "J",
            TamperType::SpliceSharpen => "F",
            TamperType::Blur => "B",
            TamperType::Genuine => "G",
        }
    }
}

impl fmt::Display for TamperType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TamperParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_multiplier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_sd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jpeg_quality: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blur_sigma: Option<f64>,
    /// Removal: `[removal, sample]`; splice: `[pasted, taken from foreground]`; blur: `[blurred]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rects: Vec<Rect>,
}

/// One manifest entry. Paths are relative to the manifest's directory;
/// genuine images use the mask path `"none"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TamperRecord {
    pub image: String,
    pub mask: String,
    pub sources: Vec<String>,
    #[serde(rename = "type")]
    pub kind: TamperType,
    pub params: TamperParams,
    pub seed: u64,
}

pub const NO_MASK: &str = "none";

impl TamperRecord {
    fn new(kind: TamperType, params: TamperParams, seed: u64) -> Self {
        Self {
            image: String::new(),
            mask: if kind == TamperType::Genuine { NO_MASK.into() } else { String::new() },
            sources: Vec::new(),
            kind,
            params,
            seed,
        }
    }

    pub fn genuine(seed: u64) -> Self {
        Self::new(TamperType::Genuine, TamperParams::default(), seed)
    }

    pub fn has_mask(&self) -> bool {
        self.mask != NO_MASK
    }
}

/// A generated image with its ground truth; paths in `record` are filled in
/// by whoever writes the files.
#[derive(Clone, Debug)]
pub struct Synthesized {
    pub image: RgbImage,
    pub mask: TamperMask,
    pub record: TamperRecord,
}

fn quantized(img: &RgbImage) -> RgbImage {
    RgbImage::from_rgb8(&img.to_rgb8())
}

/// Fills `removal` with `N(μ, c·σ)` noise for each `c` in [`REMOVAL_MULTIPLIERS`],
/// where μ, σ are the grayscale statistics of `sample`. The variants share
/// one set of standard-normal draws.
pub fn synth_removal(img: &RgbImage, removal: Rect, sample: Rect, seed: u64) -> Result<Vec<Synthesized>> {
    let (h, w) = (img.height(), img.width());
    removal.check(h, w, "removal")?;
    sample.check(h, w, "sample")?;
    if removal.overlaps(&sample) {
        return Err(Error::InvalidParameter("removal and sample rects overlap".into()));
    }
    let gray = to_grayscale(img);
    let region = gray.view().slice_move(s![sample.y..sample.y + sample.height, sample.x..sample.x + sample.width]);
    let mu = region.mean().expect("non-empty rect");
    let sd = region.std(0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..removal.area()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mask = removal.mask(h, w);
    Ok(REMOVAL_MULTIPLIERS
        .iter()
        .map(|&c| {
            let mut out = img.clone();
            for (k, z) in draws.iter().enumerate() {
                let v = (mu + c * sd * z).clamp(0.0, 1.0);
                out.set_pixel(removal.y + k / removal.width, removal.x + k % removal.width, [v; 3]);
            }
            let params = TamperParams {
                sigma_multiplier: Some(c),
                sample_mean: Some(mu),
                sample_sd: Some(sd),
                rects: vec![removal, sample],
                ..Default::default()
            };
            Synthesized {
                image: out,
                mask: mask.clone(),
                record: TamperRecord::new(TamperType::Removal, params, seed),
            }
        })
        .collect())
}

/// A rect covering 8 to 20% of the image area with aspect ratio in [1/2, 2],
/// placed uniformly.
pub fn random_region(height: usize, width: usize, rng: &mut impl Rng) -> Rect {
    let area = (height * width) as f64 * rng.random_range(0.08..=0.20);
    let aspect: f64 = rng.random_range(0.5..=2.0);
    let rh = ((area * aspect).sqrt().round() as usize).clamp(1, height);
    let rw = ((area / rh as f64).round() as usize).clamp(1, width);
    Rect {
        x: rng.random_range(0..=width - rw),
        y: rng.random_range(0..=height - rh),
        width: rw,
        height: rh,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpliceMode {
    Jpeg,
    Sharpen,
}

fn sharpen_kernel() -> Kernel {
    Kernel::new(
        "sharpen",
        ndarray::arr2(&[[0.0, -1.0, 0.0], [-1.0, 5.0, -1.0], [0.0, -1.0, 0.0]]),
    )
    .expect("3x3 kernel")
}

fn sub_image(img: &RgbImage, r: Rect) -> RgbImage {
    RgbImage::new(img.data().slice(s![r.y..r.y + r.height, r.x..r.x + r.width, ..]).to_owned()).expect("valid region")
}

/// Pastes a random region of `foreground` into `background`, after JPEG
/// recompression or sharpening of the region.
pub fn synth_splice(background: &RgbImage, foreground: &RgbImage, seed: u64, mode: SpliceMode) -> Result<Synthesized> {
    let (h, w) = (background.height(), background.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = random_region(h, w, &mut rng);
    if target.height > foreground.height() || target.width > foreground.width() {
        return Err(Error::Dimensions(format!(
            "foreground {}x{} smaller than the {}x{} splice region",
            foreground.height(),
            foreground.width(),
            target.height,
            target.width
        )));
    }
    let source = Rect {
        x: rng.random_range(0..=foreground.width() - target.width),
        y: rng.random_range(0..=foreground.height() - target.height),
        ..target
    };
    let patch = quantized(&sub_image(foreground, source));
    let (patch, kind, params) = match mode {
        SpliceMode::Jpeg => {
            let q = rng.random_range(50..=85u8);
            let params = TamperParams {
                jpeg_quality: Some(q),
                rects: vec![target, source],
                ..Default::default()
            };
            (jpeg_round_trip(&patch, q)?, TamperType::SpliceJpeg, params)
        }
        SpliceMode::Sharpen => {
            let kernel = sharpen_kernel();
            let mut data = patch.data().clone();
            for mut plane in data.axis_iter_mut(Axis(2)) {
                let sharp = correlate(plane.view(), &kernel)?;
                plane.assign(&sharp.mapv(|v| v.clamp(0.0, 1.0)));
            }
            let params = TamperParams {
                rects: vec![target, source],
                ..Default::default()
            };
            (RgbImage::new(data)?, TamperType::SpliceSharpen, params)
        }
    };
    let mut out = background.clone();
    out.data_mut()
        .slice_mut(s![target.y..target.y + target.height, target.x..target.x + target.width, ..])
        .assign(patch.data());
    Ok(Synthesized {
        image: out,
        mask: target.mask(h, w),
        record: TamperRecord::new(kind, params, seed),
    })
}

fn gaussian_blur(plane: ndarray::ArrayView2<'_, f64>, sigma: f64) -> Result<Array2<f64>> {
    let radius = (3.0 * sigma).ceil() as usize;
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    let taps = Array2::from_shape_vec((1, taps.len()), taps.iter().map(|t| t / total).collect()).expect("row");
    let horizontal = correlate(plane, &Kernel::new("gauss_h", taps.clone())?)?;
    correlate(horizontal.view(), &Kernel::new("gauss_v", taps.reversed_axes())?)
}

/// Gaussian-blurs a random region (σ uniform in [1, 3], radius ⌈3σ⌉).
pub fn synth_blur(img: &RgbImage, seed: u64) -> Result<Synthesized> {
    let (h, w) = (img.height(), img.width());
    if h < 64 || w < 64 {
        return Err(Error::Dimensions(format!("blur needs at least 64x64, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rect = random_region(h, w, &mut rng);
    let sigma = rng.random_range(1.0..=3.0);
    let mut out = img.clone();
    for ch in 0..3 {
        let blurred = gaussian_blur(img.data().index_axis(Axis(2), ch), sigma)?;
        out.data_mut()
            .slice_mut(s![rect.y..rect.y + rect.height, rect.x..rect.x + rect.width, ch])
            .assign(&blurred.slice(s![rect.y..rect.y + rect.height, rect.x..rect.x + rect.width]));
    }
    let params = TamperParams {
        blur_sigma: Some(sigma),
        rects: vec![rect],
        ..Default::default()
    };
    Ok(Synthesized {
        image: out,
        mask: rect.mask(h, w),
        record: TamperRecord::new(TamperType::Blur, params, seed),
    })
}

/// A gray blot-like image: smooth background, lanes of dark bands, and
/// per-image Gaussian sensor noise. Values are 8-bit quantized.
pub fn blot_background(height: usize, width: usize, seed: u64) -> Result<RgbImage> {
    if height < 16 || width < 16 {
        return Err(Error::Dimensions(format!("background needs at least 16x16, got {height}x{width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = rng.random_range(0.70..0.90);

    let cell = 32.0;
    let (gh, gw) = ((height as f64 / cell).ceil() as usize + 2, (width as f64 / cell).ceil() as usize + 2);
    let coarse = Array2::from_shape_fn((gh, gw), |_| rng.random_range(-1.0..1.0));
    let smooth = |r: usize, c: usize| {
        let (fy, fx) = (r as f64 / cell, c as f64 / cell);
        let (iy, ix) = (fy as usize, fx as usize);
        let (ty, tx) = (fy - iy as f64, fx - ix as f64);
        let (ty, tx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
        let top = coarse[[iy, ix]] * (1.0 - tx) + coarse[[iy, ix + 1]] * tx;
        let bottom = coarse[[iy + 1, ix]] * (1.0 - tx) + coarse[[iy + 1, ix + 1]] * tx;
        top * (1.0 - ty) + bottom * ty
    };

    struct Band {
        row: f64,
        center: f64,
        half_width: f64,
        thickness: f64,
        depth: f64,
    }
    let lanes = rng.random_range(3..=7usize);
    let pitch = width as f64 / lanes as f64;
    let mut bands = Vec::new();
    for lane in 0..lanes {
        let center = pitch * (lane as f64 + 0.5) + rng.random_range(-0.1..0.1) * pitch;
        let half_width = pitch * rng.random_range(0.3..0.42);
        for _ in 0..rng.random_range(2..=5) {
            bands.push(Band {
                row: rng.random_range(0.1..0.9) * height as f64,
                center,
                half_width,
                thickness: rng.random_range(2.0..5.0),
                depth: rng.random_range(0.2..0.6),
            });
        }
    }
    let noise_sd = rng.random_range(0.01..0.04);
    let data = Array2::from_shape_fn((height, width), |(r, c)| {
        let mut v = base + 0.04 * smooth(r, c);
        for b in &bands {
            let dy = (r as f64 - b.row) / b.thickness;
            let dx = (c as f64 - b.center) / b.half_width;
            v -= b.depth * (-0.5 * dy * dy).exp() * (-dx.powi(8)).exp();
        }
        v
    });
    let noisy = data.mapv(|v| (v + noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng)).clamp(0.0, 1.0));
    let gray = crate::img::GrayImage::new(noisy)?;
    Ok(quantized(&RgbImage::from_gray(&gray)))
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

/// Writes records sorted by image path as a JSON array. Every referenced
/// image, mask and source must exist relative to the manifest's directory.
pub fn write_manifest(records: &[TamperRecord], path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new(""));
    for r in records {
        let mut refs = vec![r.image.as_str()];
        if r.has_mask() {
            refs.push(r.mask.as_str());
        }
        refs.extend(r.sources.iter().map(String::as_str));
        if let Some(missing) = refs.into_iter().find(|p| !resolve(dir, p).is_file()) {
            return Err(Error::format(path, format!("record references missing file {missing}")));
        }
        if r.kind == TamperType::Removal && !r.params.sigma_multiplier.is_some_and(|c| REMOVAL_MULTIPLIERS.contains(&c)) {
            return Err(Error::format(path, format!("removal record {} lacks a valid sigma multiplier", r.image)));
        }
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.image.cmp(&b.image));
    let json = serde_json::to_string_pretty(&sorted)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<TamperRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn textured(h: usize, w: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        quantized(&RgbImage::new(Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.2..0.8))).unwrap())
    }

    fn unchanged_outside(a: &RgbImage, b: &RgbImage, mask: &TamperMask) -> bool {
        a.data()
            .indexed_iter()
            .all(|((r, c, ch), &v)| mask.data()[[r, c]] == 1 || b.data()[[r, c, ch]] == v)
    }

    #[test]
    fn rect_geometry() {
        let a = Rect { x: 2, y: 3, width: 4, height: 5 };
        assert!(a.fits(8, 6));
        assert!(!a.fits(7, 6));
        assert!(a.overlaps(&Rect { x: 5, y: 7, width: 1, height: 1 }));
        assert!(!a.overlaps(&Rect { x: 6, y: 3, width: 1, height: 1 }));
        assert!(!Rect { width: 0, ..a }.fits(100, 100));
        assert_eq!(a.mask(10, 10).count(), 20);
    }

    #[test]
    fn removal_variants() {
        let img = textured(40, 60, 1);
        let removal = Rect { x: 5, y: 5, width: 20, height: 10 };
        let sample = Rect { x: 30, y: 20, width: 16, height: 16 };
        let out = synth_removal(&img, removal, sample, 7).unwrap();
        assert_eq!(out.len(), 4);
        let gray = to_grayscale(&img);
        let mu = gray.view().slice(s![20..36, 30..46]).mean().unwrap();
        for (i, v) in out.iter().enumerate() {
            assert_eq!(v.record.kind, TamperType::Removal);
            assert_eq!(v.record.params.sigma_multiplier, Some(REMOVAL_MULTIPLIERS[i]));
            assert_eq!(v.mask.count(), 200);
            assert!(unchanged_outside(&img, &v.image, &v.mask));
            for r in 5..15 {
                for c in 5..25 {
                    let p = v.image.pixel(r, c);
                    assert!(p[0] == p[1] && p[1] == p[2]);
                    if i == 0 {
                        assert_eq!(p[0], mu);
                    }
                }
            }
        }
        assert!(synth_removal(&img, removal, Rect { x: 20, y: 10, width: 5, height: 5 }, 7).is_err());
        assert!(synth_removal(&img, Rect { x: 50, y: 0, width: 20, height: 5 }, sample, 7).is_err());
    }

    #[test]
    fn removal_moments() {
        // Monte-Carlo moment oracle on a large region with mid-range μ so
        // clipping at 0 and 1 is negligible.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = RgbImage::new(Array3::from_shape_fn((300, 300, 3), |(r, _, _)| {
            if r < 100 {
                0.5 + 0.05 * Distribution::<f64>::sample(&StandardNormal, &mut rng)
            } else {
                0.3
            }
        }))
        .unwrap();
        let sample = Rect { x: 0, y: 0, width: 300, height: 100 };
        let removal = Rect { x: 0, y: 120, width: 300, height: 150 };
        let out = synth_removal(&img, removal, sample, 3).unwrap();
        let mu = out[0].record.params.sample_mean.unwrap();
        let sd = out[0].record.params.sample_sd.unwrap();
        let area = removal.area() as f64;
        let mut means = Vec::new();
        for (v, c) in out.iter().zip(REMOVAL_MULTIPLIERS) {
            let region = to_grayscale(&v.image).into_inner().slice_move(s![120..270, ..]);
            let m = region.mean().unwrap();
            means.push(m);
            if c > 0.0 {
                assert!((m - mu).abs() <= 3.0 * c * sd / area.sqrt(), "c={c}: {m} vs {mu}");
                let emp = region.std(0.0);
                assert!((emp / (c * sd) - 1.0).abs() < 0.15, "c={c}: {emp}");
            }
        }
        assert!(means.iter().all(|m| (m - means[0]).abs() < 6.0 * sd / area.sqrt()));
    }

    #[test]
    fn removal_zero_variance_sample() {
        let img = RgbImage::new(Array3::from_elem((30, 30, 3), 0.4)).unwrap();
        let out = synth_removal(&img, Rect { x: 0, y: 0, width: 10, height: 10 }, Rect { x: 15, y: 15, width: 10, height: 10 }, 1).unwrap();
        assert!(out.iter().all(|v| v.image == out[0].image));
    }

    #[test]
    fn random_region_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let (h, w) = (rng.random_range(64..300), rng.random_range(64..300));
            let r = random_region(h, w, &mut rng);
            assert!(r.fits(h, w));
            let frac = r.area() as f64 / (h * w) as f64;
            assert!((0.06..=0.23).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn splice_modes() {
        let bg = textured(80, 100, 5);
        let fg = blot_background(90, 110, 6).unwrap();
        for (mode, code) in [(SpliceMode::Jpeg, "J"), (SpliceMode::Sharpen, "F")] {
            let a = synth_splice(&bg, &fg, 11, mode).unwrap();
            assert_eq!(a.record.kind.code(), code);
            let rect = a.record.params.rects[0];
            assert_eq!(a.mask.count(), rect.area());
            assert!(unchanged_outside(&bg, &a.image, &a.mask));
            let b = synth_splice(&bg, &fg, 11, mode).unwrap();
            assert_eq!(a.image.to_rgb8().into_raw(), b.image.to_rgb8().into_raw());
            assert_eq!(a.record, b.record);
        }
        let q = synth_splice(&bg, &fg, 11, SpliceMode::Jpeg).unwrap().record.params.jpeg_quality.unwrap();
        assert!((50..=85).contains(&q));
        assert!(synth_splice(&bg, &textured(8, 8, 1), 11, SpliceMode::Jpeg).is_err());
    }

    fn laplacian_energy(img: &RgbImage, r: Rect) -> f64 {
        let g = to_grayscale(img);
        let d = g.data();
        let mut e = 0.0;
        for y in r.y + 1..r.y + r.height - 1 {
            for x in r.x + 1..r.x + r.width - 1 {
                let l = d[[y - 1, x]] + d[[y + 1, x]] + d[[y, x - 1]] + d[[y, x + 1]] - 4.0 * d[[y, x]];
                e += l * l;
            }
        }
        e
    }

    #[test]
    fn blur_smooths_region_only() {
        let img = textured(96, 96, 8);
        for seed in 0..5 {
            let out = synth_blur(&img, seed).unwrap();
            let rect = out.record.params.rects[0];
            let sigma = out.record.params.blur_sigma.unwrap();
            assert!((1.0..=3.0).contains(&sigma));
            assert_eq!(out.record.kind, TamperType::Blur);
            assert!(unchanged_outside(&img, &out.image, &out.mask));
            assert!(laplacian_energy(&out.image, rect) < laplacian_energy(&img, rect));
        }
        let weak = gaussian_blur(to_grayscale(&img).view(), 1.0).unwrap();
        assert!(weak.iter().zip(to_grayscale(&img).data().iter()).any(|(a, b)| a != b));
        assert!(synth_blur(&textured(63, 100, 1), 0).is_err());
    }

    #[test]
    fn blur_kernel_preserves_constants() {
        let flat = Array2::from_elem((20, 20), 0.3);
        let out = gaussian_blur(flat.view(), 2.5).unwrap();
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn backgrounds_are_deterministic_and_noisy() {
        let a = blot_background(64, 96, 3).unwrap();
        assert_eq!(a, blot_background(64, 96, 3).unwrap());
        assert_ne!(a, blot_background(64, 96, 4).unwrap());
        assert_eq!(a, quantized(&a));
        let g = to_grayscale(&a);
        let (lo, hi) = g.data().iter().fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi - lo > 0.1);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        write_manifest(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "[]");
        assert!(read_manifest(&path).unwrap().is_empty());

        for f in ["b.png", "a.png", "a_mask.png", "src.png"] {
            std::fs::write(dir.path().join(f), b"x").unwrap();
        }
        let mut g = TamperRecord::genuine(3);
        g.image = "b.png".into();
        g.sources = vec!["src.png".into()];
        let mut r = TamperRecord::new(
            TamperType::Removal,
            TamperParams {
                sigma_multiplier: Some(0.5),
                sample_mean: Some(0.1 + 0.2),
                rects: vec![Rect { x: 1, y: 2, width: 3, height: 4 }],
                ..Default::default()
            },
            u64::MAX,
        );
        r.image = "a.png".into();
        r.mask = "a_mask.png".into();
        write_manifest(&[g.clone(), r.clone()], &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, vec![r.clone(), g.clone()]);
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(raw[1]["type"], "G");
        assert_eq!(raw[1]["mask"], "none");
        for key in ["image", "mask", "sources", "type", "params", "seed"] {
            assert!(raw[0].get(key).is_some());
        }

        let mut dangling = r.clone();
        dangling.mask = "missing.png".into();
        assert!(write_manifest(&[dangling], &path).is_err());
        let mut bad = r;
        bad.params.sigma_multiplier = Some(3.0);
        assert!(write_manifest(&[bad], &path).is_err());
    }
}

//! Image containers, patch decomposition and grid construction.
//!
//! Every intensity lives in `[0, 1]` as `f64`. Images are stored row-major as
//! `ndarray` arrays indexed `(row, col)` (and `(row, col, channel)` for RGB).

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, ImageReader};
use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    data: Array2<f64>,
}

impl GrayImage {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidParameter(
                "gray intensities must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut((usize, usize)) -> f64) -> Result<Self> {
        Self::new(Array2::from_shape_fn((height, width), f))
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

/// Three-channel image, `(row, col, channel)`, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    data: Array3<f64>,
}

impl RgbImage {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::Dimensions(format!(
                "rgb image needs 3 channels, got {}",
                data.dim().2
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidParameter(
                "rgb intensities must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Self { data })
    }

    /// Replicates a gray image into all three channels.
    pub fn from_gray(gray: &GrayImage) -> Self {
        let (h, w) = gray.data.dim();
        let data = Array3::from_shape_fn((h, w, 3), |(r, c, _)| gray.data[[r, c]]);
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        [
            self.data[[row, col, 0]],
            self.data[[row, col, 1]],
            self.data[[row, col, 2]],
        ]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, value: [f64; 3]) {
        for (ch, v) in value.into_iter().enumerate() {
            self.data[[row, col, ch]] = v;
        }
    }

    /// Keeps the top-left `height × width` region.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height() || width > self.width() || height == 0 || width == 0 {
            return Err(Error::Dimensions(format!(
                "cannot crop {}x{} image to {height}x{width}",
                self.height(),
                self.width()
            )));
        }
        Ok(Self {
            data: self.data.slice(s![..height, ..width, ..]).to_owned(),
        })
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, _) = self.data.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            image::Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
            f64::from(img.get_pixel(c as u32, r as u32)[ch]) / 255.0
        });
        Self { data }
    }
}

/// Binary ground truth, `1` marks a tampered pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TamperMask {
    data: Array2<u8>,
}

impl TamperMask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidParameter("mask values must be 0 or 1".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn fill_rect(&mut self, row: usize, col: usize, height: usize, width: usize) {
        self.data
            .slice_mut(s![row..row + height, col..col + width])
            .fill(1);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

/// Non-overlapping `m × n` blocks tiling an image, row-major.
#[derive(Clone, Debug)]
pub struct PatchMatrix {
    rows: usize,
    cols: usize,
    patch_h: usize,
    patch_w: usize,
    patches: Vec<Array2<f64>>,
}

impl PatchMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn patch_dims(&self) -> (usize, usize) {
        (self.patch_h, self.patch_w)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch(&self, i: usize, j: usize) -> &Array2<f64> {
        &self.patches[i * self.cols + j]
    }

    pub fn patches(&self) -> &[Array2<f64>] {
        &self.patches
    }

    /// Tiles the patches back into a `rows·m × cols·n` image.
    pub fn reassemble(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows * self.patch_h, self.cols * self.patch_w));
        for i in 0..self.rows {
            for j in 0..self.cols {
                let (r0, c0) = (i * self.patch_h, j * self.patch_w);
                out.slice_mut(s![r0..r0 + self.patch_h, c0..c0 + self.patch_w])
                    .assign(self.patch(i, j));
            }
        }
        out
    }
}

/// Assignment of patches to an `s × t` grid of cells.
///
/// Cells have `⌊rows/s⌋ × ⌊cols/t⌋` patches; leftover patch rows and columns
/// are absorbed by the last cell row and column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    s: usize,
    t: usize,
    rows: usize,
    cols: usize,
    cell_h: usize,
    cell_w: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, s: usize, t: usize) -> Result<Self> {
        if s == 0 || t == 0 || s > rows || t > cols {
            return Err(Error::Dimensions(format!(
                "grid {s}x{t} does not fit a {rows}x{cols} patch matrix"
            )));
        }
        Ok(Self {
            s,
            t,
            rows,
            cols,
            cell_h: rows / s,
            cell_w: cols / t,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.s, self.t)
    }

    pub fn cell_count(&self) -> usize {
        self.s * self.t
    }

    pub fn cell_of(&self, i: usize, j: usize) -> (usize, usize) {
        ((i / self.cell_h).min(self.s - 1), (j / self.cell_w).min(self.t - 1))
    }

    /// Patch indices `(i, j)` in cell `(a, b)`, row-major.
    pub fn members(&self, a: usize, b: usize) -> Vec<(usize, usize)> {
        let row_end = if a + 1 == self.s { self.rows } else { (a + 1) * self.cell_h };
        let col_end = if b + 1 == self.t { self.cols } else { (b + 1) * self.cell_w };
        (a * self.cell_h..row_end)
            .flat_map(|i| (b * self.cell_w..col_end).map(move |j| (i, j)))
            .collect()
    }
}

pub fn build_patch_grid(pm: &PatchMatrix, s: usize, t: usize) -> Result<PatchGrid> {
    PatchGrid::new(pm.rows, pm.cols, s, t)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Jpeg) => {}
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: {:?}",
                path.display(),
                other
            )))
        }
    }
    let decoded = reader.decode().map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    if decoded.width() == 0 || decoded.height() == 0 {
        return Err(Error::Dimensions(format!("{} is empty", path.display())));
    }
    Ok(RgbImage::from_rgb8(&decoded.to_rgb8()))
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    write_png(&image::DynamicImage::ImageRgb8(img.to_rgb8()), path)
}

pub fn save_gray_png(img: &GrayImage, path: &Path) -> Result<()> {
    let (h, w) = img.data.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([quantize(img.data[[y as usize, x as usize]])])
    });
    write_png(&image::DynamicImage::ImageLuma8(buf), path)
}

/// Masks are stored as single-channel PNG with values {0, 255}.
pub fn save_mask(mask: &TamperMask, path: &Path) -> Result<()> {
    let (h, w) = mask.data.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([mask.data[[y as usize, x as usize]] * 255])
    });
    write_png(&image::DynamicImage::ImageLuma8(buf), path)
}

pub fn load_mask(path: &Path) -> Result<TamperMask> {
    let img = image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    let data = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        u8::from(luma.get_pixel(c as u32, r as u32)[0] >= 128)
    });
    Ok(TamperMask { data })
}

fn write_png(img: &image::DynamicImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(Error::Encode)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_grayscale(img: &RgbImage) -> GrayImage {
    let data = img.data.map_axis(Axis(2), |px| {
        (LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2]).clamp(0.0, 1.0)
    });
    GrayImage { data }
}

/// Largest dimensions `≤ (h, w)` divisible by `(m, n)`.
pub fn cropped_dims(h: usize, w: usize, m: usize, n: usize) -> Result<(usize, usize)> {
    if m == 0 || n == 0 || m > h || n > w {
        return Err(Error::Dimensions(format!(
            "patch {m}x{n} does not fit a {h}x{w} image"
        )));
    }
    Ok((m * (h / m), n * (w / n)))
}

pub fn crop_to_patch_multiple(img: &GrayImage, m: usize, n: usize) -> Result<GrayImage> {
    let (h, w) = cropped_dims(img.height(), img.width(), m, n)?;
    Ok(GrayImage {
        data: img.data.slice(s![..h, ..w]).to_owned(),
    })
}

pub fn decompose_patches(plane: ArrayView2<'_, f64>, m: usize, n: usize) -> Result<PatchMatrix> {
    let (h, w) = plane.dim();
    if m == 0 || n == 0 || h % m != 0 || w % n != 0 || h == 0 || w == 0 {
        return Err(Error::Dimensions(format!(
            "{h}x{w} is not divisible into {m}x{n} patches"
        )));
    }
    let (rows, cols) = (h / m, w / n);
    let patches = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| {
            plane
                .slice(s![i * m..(i + 1) * m, j * n..(j + 1) * n])
                .to_owned()
        })
        .collect();
    Ok(PatchMatrix {
        rows,
        cols,
        patch_h: m,
        patch_w: n,
        patches,
    })
}

/// Patch `(i, j)` is labelled tampered when at least `overlap_threshold` of
/// its pixels are set in the mask.
pub fn mask_to_patch_labels(
    mask: &TamperMask,
    m: usize,
    n: usize,
    rows: usize,
    cols: usize,
    overlap_threshold: f64,
) -> Result<Array2<u8>> {
    if !(overlap_threshold > 0.0 && overlap_threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "overlap threshold {overlap_threshold} outside (0, 1]"
        )));
    }
    if mask.height() < rows * m || mask.width() < cols * n {
        return Err(Error::Dimensions(format!(
            "mask {}x{} smaller than {}x{} patch area",
            mask.height(),
            mask.width(),
            rows * m,
            cols * n
        )));
    }
    let area = (m * n) as f64;
    Ok(Array2::from_shape_fn((rows, cols), |(i, j)| {
        let hits: usize = mask
            .data
            .slice(s![i * m..(i + 1) * m, j * n..(j + 1) * n])
            .iter()
            .map(|&v| v as usize)
            .sum();
        u8::from(hits as f64 / area >= overlap_threshold)
    }))
}

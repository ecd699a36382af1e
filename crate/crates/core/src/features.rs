//! Per-patch features from residual images.
//!
//! For each residual the patch matrix is split into a grid of cells, every cell
//! fits a one-class SVM on the DCT coefficients of its own patches, and each
//! patch is then re-described by the outlier likelihoods all cell detectors
//! assign to it. The feature keeps only position-invariant summaries of that
//! description: its histogram, the distances to the eight neighbouring
//! histograms, and distances to k-means centroids over the whole image.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::img::{cropped_dims, decompose_patches, PatchGrid, PatchMatrix, RgbImage};
use crate::ocsvm::{fit_auto_gamma, OcSvmModel, OcSvmParams};
use crate::residuals::{build_stack, ResidualConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    /// Patch height and width `(m, n)` in pixels.
    pub patch: [usize; 2],
    /// Grid dimensions `(s, t)` in cells.
    pub grid: [usize; 2],
    pub bins: usize,
    pub k: usize,
    pub restarts: usize,
    pub kmeans_max_iter: usize,
    pub ocsvm: OcSvmParams,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self::western_blot()
    }
}

impl ExtractorConfig {
    pub fn western_blot() -> Self {
        Self {
            patch: [6, 6],
            grid: [5, 5],
            bins: 16,
            k: 6,
            restarts: 150,
            kmeans_max_iter: 300,
            ocsvm: OcSvmParams::default(),
        }
    }

    pub fn microscopy() -> Self {
        Self {
            patch: [10, 10],
            grid: [7, 7],
            ..Self::western_blot()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [m, n] = self.patch;
        let [s, t] = self.grid;
        if m < 2 || n < 2 {
            return Err(Error::Config(format!("patch {m}x{n} must be at least 2x2")));
        }
        if s < 1 || t < 1 {
            return Err(Error::Config("grid needs at least one cell".into()));
        }
        if self.bins < 2 || self.k < 1 || self.restarts < 1 || self.kmeans_max_iter < 1 {
            return Err(Error::Config(
                "bins >= 2, k >= 1, restarts >= 1 and kmeans_max_iter >= 1 required".into(),
            ));
        }
        self.ocsvm.validate()
    }

    /// Length of one residual's segment: histogram, proximity, globals.
    pub fn segment_len(&self) -> usize {
        self.bins + NEIGHBOURS + 2 * self.k
    }
}

/// Everything that determines the features of an image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub residuals: ResidualConfig,
    pub extractor: ExtractorConfig,
}

impl FeatureConfig {
    pub fn feature_len(&self) -> usize {
        self.residuals.generators.len() * self.extractor.segment_len()
    }

    /// Hex SHA-256 over the canonical JSON of the configuration and seed.
    pub fn hash(&self, seed: u64) -> String {
        let json = serde_json::to_string(&(self, seed)).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Orthonormal type-II 2-D DCT.
pub struct Dct2 {
    rows: Array2<f64>,
    cols: Array2<f64>,
}

fn dct_basis(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(k, i)| {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        scale * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos()
    })
}

impl Dct2 {
    pub fn new(m: usize, n: usize) -> Self {
        Self {
            rows: dct_basis(m),
            cols: dct_basis(n),
        }
    }

    /// Coefficients flattened row-major.
    pub fn transform(&self, patch: ArrayView2<'_, f64>) -> Vec<f64> {
        let coeffs = self.rows.dot(&patch).dot(&self.cols.t());
        coeffs.iter().copied().collect()
    }
}

pub fn dct2_patch(patch: ArrayView2<'_, f64>) -> Vec<f64> {
    let (m, n) = patch.dim();
    Dct2::new(m, n).transform(patch)
}

/// DCT codes of every patch of one residual, one row per patch.
#[derive(Clone, Debug)]
pub struct EncodedPatches {
    pub rows: usize,
    pub cols: usize,
    pub codes: Array2<f64>,
}

pub fn encode_patches(pm: &PatchMatrix) -> EncodedPatches {
    let (m, n) = pm.patch_dims();
    let dct = Dct2::new(m, n);
    let mut codes = Array2::zeros((pm.len(), m * n));
    for (mut row, patch) in codes.rows_mut().into_iter().zip(pm.patches()) {
        for (dst, v) in row.iter_mut().zip(dct.transform(patch.view())) {
            *dst = v;
        }
    }
    EncodedPatches {
        rows: pm.rows(),
        cols: pm.cols(),
        codes,
    }
}

/// Crops to the patch multiple, decomposes and DCT-encodes a residual.
pub fn encode_residual(residual: ArrayView2<'_, f64>, cfg: &ExtractorConfig) -> Result<EncodedPatches> {
    let [m, n] = cfg.patch;
    let (h, w) = cropped_dims(residual.nrows(), residual.ncols(), m, n)?;
    let pm = decompose_patches(residual.slice(s![..h, ..w]), m, n)?;
    Ok(encode_patches(&pm))
}

/// One fitted detector per grid cell, row-major over cells.
#[derive(Clone, Debug)]
pub struct CellDetectors {
    pub grid: PatchGrid,
    pub models: Vec<OcSvmModel>,
}

pub fn fit_cell_detectors(encoded: &EncodedPatches, cfg: &ExtractorConfig) -> Result<CellDetectors> {
    let [s, t] = cfg.grid;
    let grid = PatchGrid::new(encoded.rows, encoded.cols, s, t)?;
    let models = (0..s * t)
        .into_par_iter()
        .map(|cell| {
            let (a, b) = (cell / t, cell % t);
            let members = grid.members(a, b);
            let dim = encoded.codes.ncols();
            let mut samples = Array2::zeros((members.len(), dim));
            for (mut dst, (i, j)) in samples.rows_mut().into_iter().zip(members) {
                dst.assign(&encoded.codes.row(i * encoded.cols + j));
            }
            fit_auto_gamma(samples.view(), &cfg.ocsvm).map_err(|e| Error::Cell {
                row: a,
                col: b,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CellDetectors { grid, models })
}

/// Outlier likelihoods of every patch under every cell detector.
#[derive(Clone, Debug, PartialEq)]
pub struct ReinterpretationField {
    pub rows: usize,
    pub cols: usize,
    /// One row per patch, `s·t` components ordered row-major over cells.
    pub v: Array2<f64>,
}

pub fn reinterpret(detectors: &CellDetectors, encoded: &EncodedPatches) -> Result<ReinterpretationField> {
    let dim = encoded.codes.ncols();
    if let Some(m) = detectors.models.iter().find(|m| m.dim() != dim) {
        return Err(Error::Dimensions(format!(
            "detector expects {} coefficients, patches have {dim}",
            m.dim()
        )));
    }
    let n_cells = detectors.models.len();
    let n_patches = encoded.codes.nrows();
    let values: Vec<Vec<f64>> = (0..n_patches)
        .into_par_iter()
        .map(|p| {
            let code = encoded.codes.row(p).to_vec();
            detectors.models.iter().map(|m| -m.decide(&code)).collect()
        })
        .collect();
    let v = Array2::from_shape_fn((n_patches, n_cells), |(p, c)| values[p][c]);
    Ok(ReinterpretationField {
        rows: encoded.rows,
        cols: encoded.cols,
        v,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramField {
    pub rows: usize,
    pub cols: usize,
    /// One normalized histogram per patch.
    pub vh: Array2<f64>,
    pub min: f64,
    pub max: f64,
    pub max_count: usize,
}

impl HistogramField {
    pub fn histogram(&self, i: usize, j: usize) -> ndarray::ArrayView1<'_, f64> {
        self.vh.row(i * self.cols + j)
    }
}

/// Shared per-image bins over `[min, max]`, half-open except the last.
pub fn bin_index(value: f64, min: f64, max: f64, bins: usize) -> usize {
    if max <= min {
        return 0;
    }
    let pos = ((value - min) / (max - min) * bins as f64).floor();
    (pos.max(0.0) as usize).min(bins - 1)
}

pub fn histogram_field(field: &ReinterpretationField, bins: usize) -> Result<HistogramField> {
    if bins < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 bins, got {bins}")));
    }
    let min = field.v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = field.v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = Array2::<usize>::zeros((field.v.nrows(), bins));
    for (mut dst, v) in counts.rows_mut().into_iter().zip(field.v.rows()) {
        for &l in v {
            dst[bin_index(l, min, max, bins)] += 1;
        }
    }
    let max_count = counts.iter().copied().max().unwrap_or(0).max(1);
    Ok(HistogramField {
        rows: field.rows,
        cols: field.cols,
        vh: counts.mapv(|c| c as f64 / max_count as f64),
        min,
        max,
        max_count,
    })
}

const NEIGHBOURS: usize = 8;
/// NW, N, NE, W, E, SW, S, SE.
const OFFSETS: [(isize, isize); NEIGHBOURS] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Distances to the eight neighbouring histograms; zero off the border.
pub fn proximity_features(hf: &HistogramField, i: usize, j: usize) -> [f64; NEIGHBOURS] {
    let here = hf.histogram(i, j);
    let mut out = [0.0; NEIGHBOURS];
    for (dst, (di, dj)) in out.iter_mut().zip(OFFSETS) {
        let (ni, nj) = (i as isize + di, j as isize + dj);
        if ni < 0 || nj < 0 || ni >= hf.rows as isize || nj >= hf.cols as isize {
            continue;
        }
        let there = hf.histogram(ni as usize, nj as usize);
        *dst = here
            .iter()
            .zip(there.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// `k × dim`.
    pub centroids: Array2<f64>,
    pub weights: Vec<f64>,
    pub wcss: f64,
    /// Final WCSS of each restart, in restart order.
    pub restart_wcss: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LloydRun {
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    /// WCSS after each assignment step.
    pub wcss_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (lowest index wins ties) and its squared distance.
fn nearest(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd iterations from the given initial centroids.
pub fn lloyd(vectors: ArrayView2<'_, f64>, init: Array2<f64>, max_iter: usize) -> LloydRun {
    let (n, dim) = vectors.dim();
    let k = init.nrows();
    let data: Vec<f64> = vectors.iter().copied().collect();
    let mut centroids: Vec<f64> = init.iter().copied().collect();
    let mut labels = vec![0usize; n];
    let assign = |centroids: &[f64], labels: &mut [usize]| -> (f64, bool) {
        let mut total = 0.0;
        let mut changed = false;
        for (x, label) in data.chunks_exact(dim).zip(labels.iter_mut()) {
            let (c, d) = nearest(x, centroids, dim);
            changed |= *label != c;
            *label = c;
            total += d;
        }
        (total, changed)
    };
    let (w0, _) = assign(&centroids, &mut labels);
    let mut trace = vec![w0];
    for _ in 0..max_iter {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (x, &label) in data.chunks_exact(dim).zip(&labels) {
            counts[label] += 1;
            for (s, v) in sums[label * dim..(label + 1) * dim].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            // an empty cluster keeps its previous centroid
            if counts[c] > 0 {
                for d in 0..dim {
                    centroids[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            }
        }
        let (w, changed) = assign(&centroids, &mut labels);
        trace.push(w);
        if !changed {
            break;
        }
    }
    LloydRun {
        centroids: Array2::from_shape_vec((k, dim), centroids).expect("shape"),
        labels,
        wcss_trace: trace,
    }
}

/// Best of `restarts` Lloyd runs from distinct random samples, by WCSS.
pub fn kmeans(vectors: ArrayView2<'_, f64>, k: usize, restarts: usize, max_iter: usize, seed: u64) -> Result<KMeansResult> {
    let n = vectors.nrows();
    if k == 0 || restarts == 0 {
        return Err(Error::InvalidParameter("k and restarts must be positive".into()));
    }
    if n < k {
        return Err(Error::InvalidParameter(format!("{n} vectors cannot form {k} clusters")));
    }
    let runs: Vec<LloydRun> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let picks = sample(&mut rng, n, k);
            let mut init = Array2::zeros((k, vectors.ncols()));
            for (mut dst, idx) in init.rows_mut().into_iter().zip(picks.iter()) {
                dst.assign(&vectors.row(idx));
            }
            lloyd(vectors, init, max_iter)
        })
        .collect();
    let restart_wcss: Vec<f64> = runs.iter().map(|r| *r.wcss_trace.last().expect("trace")).collect();
    let best = (0..restarts)
        .reduce(|a, b| if restart_wcss[b] < restart_wcss[a] { b } else { a })
        .expect("at least one restart");
    let run = &runs[best];
    let mut counts = vec![0usize; k];
    for &l in &run.labels {
        counts[l] += 1;
    }
    Ok(KMeansResult {
        centroids: run.centroids.clone(),
        weights: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        wcss: restart_wcss[best],
        restart_wcss,
    })
}

/// Distances to the centroids and the centroid weights, centroids ordered by
/// descending weight (ties: ascending first coordinate). Zero-padded to `2k`.
pub fn global_features(vh: &[f64], km: &KMeansResult, k: usize) -> Result<Vec<f64>> {
    let (found, dim) = km.centroids.dim();
    if dim != vh.len() {
        return Err(Error::Dimensions(format!(
            "histogram has {} bins, centroids have {dim}",
            vh.len()
        )));
    }
    let mut order: Vec<usize> = (0..found).collect();
    order.sort_by(|&a, &b| {
        km.weights[b]
            .total_cmp(&km.weights[a])
            .then(km.centroids[[a, 0]].total_cmp(&km.centroids[[b, 0]]))
    });
    let mut out = vec![0.0; 2 * k];
    for (slot, &c) in order.iter().take(k).enumerate() {
        let centroid = km.centroids.row(c);
        out[slot] = vh
            .iter()
            .zip(centroid.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        out[k + slot] = km.weights[c];
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Histogram,
    Proximity,
    Global,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Histogram => "histogram",
            Component::Proximity => "proximity",
            Component::Global => "global",
        })
    }
}

impl Component {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "histogram" => Some(Component::Histogram),
            "proximity" => Some(Component::Proximity),
            "global" => Some(Component::Global),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub residual: String,
    pub component: Component,
    pub offset: usize,
    pub len: usize,
}

/// Features of every patch of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    /// `rows·cols × feature_len`, patches row-major.
    pub data: Array2<f64>,
    pub layout: Vec<Segment>,
}

impl FeatureMatrix {
    pub fn feature_len(&self) -> usize {
        self.data.ncols()
    }

    pub fn patch(&self, i: usize, j: usize) -> ndarray::ArrayView1<'_, f64> {
        self.data.row(i * self.cols + j)
    }
}

/// Feature segment of a single residual, one row per patch.
pub fn residual_features(residual: ArrayView2<'_, f64>, cfg: &ExtractorConfig, seed: u64) -> Result<Array2<f64>> {
    let encoded = encode_residual(residual, cfg)?;
    let detectors = fit_cell_detectors(&encoded, cfg)?;
    let field = reinterpret(&detectors, &encoded)?;
    let hf = histogram_field(&field, cfg.bins)?;
    let n = field.v.nrows();
    let k = cfg.k.min(n);
    let km = kmeans(hf.vh.view(), k, cfg.restarts, cfg.kmeans_max_iter, seed)?;

    let mut out = Array2::zeros((n, cfg.segment_len()));
    for i in 0..hf.rows {
        for j in 0..hf.cols {
            let p = i * hf.cols + j;
            let vh = hf.vh.row(p);
            let mut row = out.row_mut(p);
            row.slice_mut(s![..cfg.bins]).assign(&vh);
            for (d, v) in proximity_features(&hf, i, j).into_iter().enumerate() {
                row[cfg.bins + d] = v;
            }
            let globals = global_features(&vh.to_vec(), &km, cfg.k)?;
            for (d, v) in globals.into_iter().enumerate() {
                row[cfg.bins + NEIGHBOURS + d] = v;
            }
        }
    }
    Ok(out)
}

fn residual_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Full extraction: residual stack, then one feature segment per residual,
/// concatenated in stack order.
pub fn extract(image: &RgbImage, cfg: &FeatureConfig, seed: u64) -> Result<FeatureMatrix> {
    cfg.extractor.validate()?;
    let [m, n] = cfg.extractor.patch;
    let (h, w) = cropped_dims(image.height(), image.width(), m, n)?;
    let cropped = image.crop(h, w)?;
    let stack = build_stack(&cropped, &cfg.residuals)?;
    let (rows, cols) = (h / m, w / n);
    let seg = cfg.extractor.segment_len();

    let segments = stack
        .residuals
        .par_iter()
        .enumerate()
        .map(|(idx, r)| {
            residual_features(r.data.view(), &cfg.extractor, residual_seed(seed, idx)).map_err(|e| {
                Error::Residual {
                    kind: r.kind.to_string(),
                    source: Box::new(e),
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut data = Array2::zeros((rows * cols, seg * segments.len()));
    let mut layout = Vec::new();
    for (idx, (segment, residual)) in segments.iter().zip(&stack.residuals).enumerate() {
        data.slice_mut(s![.., idx * seg..(idx + 1) * seg]).assign(segment);
        let name = residual.kind.to_string();
        let base = idx * seg;
        let b = cfg.extractor.bins;
        for (component, offset, len) in [
            (Component::Histogram, 0, b),
            (Component::Proximity, b, NEIGHBOURS),
            (Component::Global, b + NEIGHBOURS, 2 * cfg.extractor.k),
        ] {
            layout.push(Segment {
                residual: name.clone(),
                component,
                offset: base + offset,
                len,
            });
        }
    }
    Ok(FeatureMatrix {
        rows,
        cols,
        data,
        layout,
    })
}

const FEATURE_MAGIC: &[u8; 4] = b"NGFM";
const FEATURE_VERSION: u32 = 1;

pub fn layout_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".layout");
    PathBuf::from(name)
}

/// Writes the binary matrix and its `.layout` sidecar.
pub fn write_features(fm: &FeatureMatrix, path: &Path, config_hash: &str) -> Result<()> {
    let mut bytes = Vec::with_capacity(20 + 8 * fm.data.len());
    bytes.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION, fm.rows as u32, fm.cols as u32, fm.feature_len() as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in fm.data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;

    let mut text = format!("config_hash {config_hash}\n");
    for seg in &fm.layout {
        text.push_str(&format!(
            "segment {} {} {} {}\n",
            seg.residual, seg.component, seg.offset, seg.len
        ));
    }
    let sidecar = layout_path(path);
    std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
}

/// Reads a feature file; returns the matrix and the recorded config hash.
pub fn read_features(path: &Path) -> Result<(FeatureMatrix, String)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "missing NGFM header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if word(0) != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", word(0))));
    }
    let (rows, cols, len) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let body = &bytes[20..];
    if body.len() != rows * cols * len * 8 {
        return Err(Error::format(path, "payload size does not match header"));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let data = Array2::from_shape_vec((rows * cols, len), values).expect("checked size");

    let sidecar = layout_path(path);
    let reader = BufReader::new(std::fs::File::open(&sidecar).map_err(|e| Error::io(&sidecar, e))?);
    let mut hash = None;
    let mut layout = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(&sidecar, e))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["config_hash", h] => hash = Some(h.to_string()),
            ["segment", residual, component, offset, len] => {
                let component = Component::parse(component)
                    .ok_or_else(|| Error::format(&sidecar, format!("bad component {component}")))?;
                let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(&sidecar, format!("bad number {s}")));
                layout.push(Segment {
                    residual: residual.to_string(),
                    component,
                    offset: parse(offset)?,
                    len: parse(len)?,
                });
            }
            [] => {}
            _ => return Err(Error::format(&sidecar, format!("unexpected line `{line}`"))),
        }
    }
    let hash = hash.ok_or_else(|| Error::format(&sidecar, "missing config_hash"))?;
    Ok((
        FeatureMatrix {
            rows,
            cols,
            data,
            layout,
        },
        hash,
    ))
}

/// Patch labels stored next to features: `NGLB`, rows, cols, then one byte per patch.
pub fn write_labels(labels: &Array2<u8>, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = b"NGLB".to_vec();
    bytes.extend_from_slice(&(labels.nrows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(labels.ncols() as u32).to_le_bytes());
    bytes.extend(labels.iter().copied());
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Array2<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != b"NGLB" {
        return Err(Error::format(path, "missing NGLB header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    Array2::from_shape_vec((rows, cols), bytes[12..].to_vec())
        .map_err(|_| Error::format(path, "label payload does not match header"))
}

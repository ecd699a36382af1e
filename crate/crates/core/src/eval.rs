//! Patch-level metrics and the wavelet noise-inconsistency (NOI) baseline.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::{cropped_dims, load_image, load_mask, mask_to_patch_labels, to_grayscale, GrayImage, RgbImage, TamperMask};
use crate::residuals::median_of;
use crate::synth::{TamperRecord, TamperType};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NOI_TILE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Ours,
    Noi,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Ours => "ours",
            Provenance::Noi => "noi",
        })
    }
}

/// Per-patch scores in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    scores: Array2<f64>,
    provenance: Provenance,
}

impl ScoreMap {
    pub fn new(scores: Array2<f64>, provenance: Provenance) -> Result<Self> {
        if scores.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter("scores must lie in [0, 1]".into()));
        }
        Ok(Self { scores, provenance })
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn dim(&self) -> (usize, usize) {
        self.scores.dim()
    }
}

/// Area under the ROC curve from the rank-sum statistic; tied scores share
/// their average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimensions(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&y| y != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg_rank = (start + end + 1) as f64 / 2.0;
        rank_sum += avg_rank * order[start..end].iter().filter(|&&i| labels[i] != 0).count() as f64;
        start = end;
    }
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// `2TP / (2TP + FP + FN)` with predictions `score ≥ threshold`.
pub fn f1(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimensions(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp + fneg == 0 {
        return Err(Error::Undefined("F1 needs at least one positive"));
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// Fraction of patches scored below `threshold`.
pub fn accuracy_genuine(scores: &[f64], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Undefined("accuracy of an empty image"));
    }
    Ok(scores.iter().filter(|&&s| s < threshold).count() as f64 / scores.len() as f64)
}

fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let hits = scores.iter().zip(labels).filter(|(&s, &y)| (s >= threshold) == (y != 0)).count();
    hits as f64 / scores.len() as f64
}

/// Local noise level from one-level Haar diagonal details: per `tile × tile`
/// pixel block, `σ̂ = median(|HH|) / 0.6745`, rescaled to `[0, 1]` and sampled
/// at each `m × n` patch centre of the cropped image.
pub fn noi_score(img: &GrayImage, tile: usize, patch: (usize, usize)) -> Result<ScoreMap> {
    let (h, w) = (img.height(), img.width());
    if tile < 2 || !tile.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("tile {tile} must be an even size ≥ 2")));
    }
    if h.min(w) < 2 * tile {
        return Err(Error::Dimensions(format!("NOI needs at least {0}x{0}, got {h}x{w}", 2 * tile)));
    }
    let (m, n) = patch;
    let (ch, cw) = cropped_dims(h, w, m, n)?;
    let d = img.data();
    let (hh_rows, hh_cols) = (h / 2, w / 2);
    let (tiles_r, tiles_c) = ((2 * hh_rows) / tile, (2 * hh_cols) / tile);
    let mut buckets = vec![Vec::new(); tiles_r * tiles_c];
    let half = tile / 2;
    for i in 0..hh_rows {
        for j in 0..hh_cols {
            let (r, c) = (2 * i, 2 * j);
            let hh = (d[[r, c]] - d[[r, c + 1]] - d[[r + 1, c]] + d[[r + 1, c + 1]]) / 2.0;
            let (ti, tj) = ((i / half).min(tiles_r - 1), (j / half).min(tiles_c - 1));
            buckets[ti * tiles_c + tj].push(hh.abs());
        }
    }
    let sigma: Vec<f64> = buckets.into_iter().map(|b| median_of(b.into_iter()) / 0.6745).collect();
    let (lo, hi) = sigma.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let rows = ch / m;
    let cols = cw / n;
    let scores = Array2::from_shape_fn((rows, cols), |(i, j)| {
        let (r, c) = (i * m + m / 2, j * n + n / 2);
        let (ti, tj) = ((r / tile).min(tiles_r - 1), (c / tile).min(tiles_c - 1));
        if span > 0.0 {
            (sigma[ti * tiles_c + tj] - lo) / span
        } else {
            0.0
        }
    });
    ScoreMap::new(scores, Provenance::Noi)
}

/// Produces a score map for a manifest entry.
pub trait ScoreSource: Sync {
    fn provenance(&self) -> Provenance;
    fn score(&self, record: &TamperRecord, image: &RgbImage) -> Result<ScoreMap>;
}

pub struct NoiSource {
    pub tile: usize,
    pub patch: (usize, usize),
}

impl ScoreSource for NoiSource {
    fn provenance(&self) -> Provenance {
        Provenance::Noi
    }

    fn score(&self, _record: &TamperRecord, image: &RgbImage) -> Result<ScoreMap> {
        noi_score(&to_grayscale(image), self.tile, self.patch)
    }
}

/// Report bucket of a record: `R[0]`, `R[0.5σ]`, `R[σ]`, `R[2σ]`, `J`, `F`, `B` or `G`.
pub fn bucket(record: &TamperRecord) -> String {
    match (record.kind, record.params.sigma_multiplier) {
        (TamperType::Removal, Some(0.0)) => "R[0]".into(),
        (TamperType::Removal, Some(1.0)) => "R[σ]".into(),
        (TamperType::Removal, Some(c)) => format!("R[{c}σ]"),
        (kind, _) => kind.code().into(),
    }
}

pub const BUCKET_ORDER: [&str; 8] = ["R[0]", "R[0.5σ]", "R[σ]", "R[2σ]", "J", "F", "B", "G"];
pub const OVERALL: &str = "overall";

#[derive(Clone, Debug)]
pub struct ScoredImage {
    pub bucket: String,
    pub image: String,
    pub scores: ScoreMap,
    pub labels: Array2<u8>,
}

mod na {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => Repr::Value(*x),
            None => Repr::Text("n/a".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(x) => Ok(Some(x)),
            Repr::Text(t) if t == "n/a" => Ok(None),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"n/a\", got {t:?}"))),
        }
    }
}

/// Undefined metrics serialize as `"n/a"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRow {
    #[serde(rename = "type")]
    pub key: String,
    #[serde(with = "na")]
    pub auc: Option<f64>,
    #[serde(with = "na")]
    pub f1: Option<f64>,
    #[serde(with = "na")]
    pub accuracy: Option<f64>,
    pub n_patches: usize,
    pub n_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub provenance: Provenance,
    pub threshold: f64,
    pub rows: Vec<MetricsRow>,
}

fn row(key: &str, images: &[&ScoredImage], threshold: f64) -> MetricsRow {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for img in images {
        scores.extend(img.scores.scores().iter().copied());
        labels.extend(img.labels.iter().copied());
    }
    let accuracy = (!scores.is_empty()).then(|| accuracy(&scores, &labels, threshold));
    MetricsRow {
        key: key.into(),
        auc: auc(&scores, &labels).ok(),
        f1: f1(&scores, &labels, threshold).ok(),
        accuracy,
        n_patches: scores.len(),
        n_images: images.len(),
    }
}

/// Per-bucket and overall metrics. Images are ordered by path first, so the
/// report does not depend on input order.
pub fn aggregate(provenance: Provenance, images: &[ScoredImage], threshold: f64) -> MetricsReport {
    let mut sorted: Vec<&ScoredImage> = images.iter().collect();
    sorted.sort_by(|a, b| a.image.cmp(&b.image));
    let mut rows = Vec::new();
    for key in BUCKET_ORDER {
        let members: Vec<&ScoredImage> = sorted.iter().copied().filter(|i| i.bucket == key).collect();
        if members.is_empty() {
            log::warn!("no {key} images; row omitted");
        } else {
            rows.push(row(key, &members, threshold));
        }
    }
    let mut extra: Vec<&str> = sorted.iter().map(|i| i.bucket.as_str()).filter(|b| !BUCKET_ORDER.contains(b)).collect();
    extra.sort_unstable();
    extra.dedup();
    for key in extra {
        let members: Vec<&ScoredImage> = sorted.iter().copied().filter(|i| i.bucket == key).collect();
        rows.push(row(key, &members, threshold));
    }
    if !sorted.is_empty() {
        rows.push(row(OVERALL, &sorted, threshold));
    }
    MetricsReport { provenance, threshold, rows }
}

impl MetricsReport {
    pub fn get(&self, key: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.key == key)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
        let mut out = format!("method: {}  threshold: {}\n", self.provenance, self.threshold);
        let _ = writeln!(out, "{:<10} {:>7} {:>7} {:>9} {:>9} {:>7}", "type", "auc", "f1", "accuracy", "patches", "images");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>7} {:>7} {:>9} {:>9} {:>7}",
                r.key,
                fmt(r.auc),
                fmt(r.f1),
                fmt(r.accuracy),
                r.n_patches,
                r.n_images
            );
        }
        out
    }
}

/// Loads each record's image and mask, scores it, and labels its patches.
pub fn score_records(
    manifest_dir: &Path,
    records: &[TamperRecord],
    source: &dyn ScoreSource,
    patch: (usize, usize),
    overlap_threshold: f64,
) -> Result<Vec<ScoredImage>> {
    records
        .par_iter()
        .map(|rec| {
            let image = load_image(&manifest_dir.join(&rec.image))?;
            let scores = source.score(rec, &image)?;
            let (rows, cols) = scores.dim();
            let mask = if rec.has_mask() {
                load_mask(&manifest_dir.join(&rec.mask))?
            } else {
                TamperMask::zeros(image.height(), image.width())
            };
            let labels = mask_to_patch_labels(&mask, patch.0, patch.1, rows, cols, overlap_threshold)?;
            Ok(ScoredImage {
                bucket: bucket(rec),
                image: rec.image.clone(),
                scores,
                labels,
            })
        })
        .collect()
}

/// Scores every record and aggregates the report.
pub fn evaluate(
    manifest_dir: &Path,
    records: &[TamperRecord],
    source: &dyn ScoreSource,
    patch: (usize, usize),
    overlap_threshold: f64,
) -> Result<(MetricsReport, Vec<ScoredImage>)> {
    let scored = score_records(manifest_dir, records, source, patch, overlap_threshold)?;
    Ok((aggregate(source.provenance(), &scored, DEFAULT_THRESHOLD), scored))
}

/// Nearest-neighbour upsampling of a score map to pixel resolution.
pub fn heatmap(map: &ScoreMap, patch: (usize, usize)) -> GrayImage {
    let (m, n) = patch;
    let (rows, cols) = map.dim();
    GrayImage::from_fn(rows * m, cols * n, |(r, c)| map.scores()[[r / m, c / n]]).expect("scores in [0, 1]")
}

/// Mean score over the patches of a rect of patch indices.
pub fn region_mean(map: &ScoreMap, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
    map.scores().slice(s![rows, cols]).mean().unwrap_or(0.0)
}

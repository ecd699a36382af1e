//! Corpus synthesis, feature extraction, training, prediction and evaluation
//! driven by one JSON configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{predict_map, read_model, train, write_model, MlpArchitecture, MlpModel, TrainSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, heatmap, MetricsReport, NoiSource, Provenance, ScoreMap, ScoreSource};
use crate::features::{extract, hex_digest, read_features, read_labels, write_features, write_labels, ExtractorConfig, FeatureConfig};
use crate::img::{cropped_dims, load_image, mask_to_patch_labels, save_gray_png, save_mask, save_png, RgbImage, TamperMask};
use crate::residuals::ResidualConfig;
use crate::synth::{
    blot_background, random_region, read_manifest, synth_blur, synth_removal, synth_splice, write_manifest, Rect, SpliceMode,
    Synthesized, TamperRecord, TamperType,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLIT_FILE: &str = "split.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const MODEL_FILE: &str = "model.ngmlp";
const LOCK_FILE: &str = ".lock";

const STREAM_SOURCE: u64 = 1 << 32;
const STREAM_RECORD: u64 = 2 << 32;
const STREAM_FEATURES: u64 = 3 << 32;
const STREAM_SHUFFLE: u64 = 4 << 32;
const STREAM_TRAIN: u64 = 5 << 32;

/// Independent seed for `stream` (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub features: PathBuf,
    pub run: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            features: "features".into(),
            run: "run".into(),
        }
    }
}

/// Corpus layout: `cycles` repetitions of the per-cycle counts; the last
/// `test_cycles` cycles form the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub height: usize,
    pub width: usize,
    pub cycles: usize,
    pub test_cycles: usize,
    /// Removal selections per cycle; each yields four images.
    pub removal: usize,
    pub splice_jpeg: usize,
    pub splice_sharpen: usize,
    pub blur: usize,
    pub genuine: usize,
    /// Side of the square removal sample region.
    pub sample_size: usize,
    /// Use these PNG/JPEG files (sorted by name) instead of procedural backgrounds.
    pub source_dir: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            cycles: 5,
            test_cycles: 1,
            removal: 1,
            splice_jpeg: 1,
            splice_sharpen: 1,
            blur: 1,
            genuine: 3,
            sample_size: 24,
            source_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub residuals: ResidualConfig,
    pub extractor: ExtractorConfig,
    pub mlp: MlpArchitecture,
    pub train: TrainSpec,
    /// Fraction of tampered pixels that makes a patch tampered.
    pub label_threshold: f64,
    pub noi_tile: usize,
    pub heatmaps: bool,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let features = FeatureConfig::default();
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            corpus: CorpusConfig::default(),
            residuals: features.residuals.clone(),
            extractor: features.extractor,
            mlp: MlpArchitecture::western_blot(features.residuals.generators.len() * ExtractorConfig::default().segment_len()),
            train: TrainSpec::default(),
            label_threshold: 0.5,
            noi_tile: crate::eval::DEFAULT_NOI_TILE,
            heatmaps: true,
            base_dir: PathBuf::from("."),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.residuals.kinds()?;
        self.extractor.validate()?;
        self.mlp.validate()?;
        self.train.validate()?;
        let len = self.feature_config().feature_len();
        if self.mlp.input_dim != len {
            return Err(Error::Config(format!(
                "mlp.input_dim is {} but the residual and extractor settings give feature length {len}",
                self.mlp.input_dim
            )));
        }
        if !(self.label_threshold > 0.0 && self.label_threshold <= 1.0) {
            return Err(Error::Config("label_threshold must lie in (0, 1]".into()));
        }
        let c = &self.corpus;
        if c.cycles == 0 || c.test_cycles > c.cycles {
            return Err(Error::Config("corpus needs cycles >= 1 and test_cycles <= cycles".into()));
        }
        if c.height < 64 || c.width < 64 || c.sample_size == 0 || c.sample_size * 4 > c.height.min(c.width) {
            return Err(Error::Config("corpus images must be at least 64x64 with sample_size <= a quarter side".into()));
        }
        Ok(())
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            residuals: self.residuals.clone(),
            extractor: self.extractor.clone(),
        }
    }

    pub fn feature_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_FEATURES)
    }

    /// Hash that feature files and models carry.
    pub fn feature_hash(&self) -> String {
        self.feature_config().hash(self.feature_seed())
    }

    pub fn config_hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn corpus_hash(&self) -> String {
        hex_digest(serde_json::to_string(&(&self.corpus, self.seed)).expect("serializes").as_bytes())
    }

    fn model_hash(&self) -> String {
        let json = serde_json::to_string(&(self.feature_hash(), &self.mlp, &self.train, self.label_threshold, self.seed)).expect("serializes");
        hex_digest(json.as_bytes())
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.base_dir.join(&self.paths.corpus)
    }

    pub fn features_dir(&self) -> PathBuf {
        self.base_dir.join(&self.paths.features)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.base_dir.join(&self.paths.run)
    }

    pub fn patch(&self) -> (usize, usize) {
        (self.extractor.patch[0], self.extractor.patch[1])
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.base_dir).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }
}

/// Exclusive ownership of a run directory for the lifetime of the value.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub config_hash: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn path(cfg: &PipelineConfig) -> PathBuf {
        cfg.run_dir().join(RUN_MANIFEST_FILE)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Records a finished stage, discarding entries from other configurations.
    fn record(cfg: &PipelineConfig, stage: &str, entry: StageRecord) -> Result<()> {
        let path = Self::path(cfg);
        let config_hash = cfg.config_hash();
        let mut manifest = match Self::load(&path) {
            Ok(m) if m.config_hash == config_hash => m,
            _ => Self {
                tool_version: env!("CARGO_PKG_VERSION").into(),
                config_hash,
                stages: BTreeMap::new(),
            },
        };
        manifest.stages.insert(stage.into(), entry);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }
}

/// Image paths of each split, relative to the corpus directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn stem(image: &str) -> String {
    Path::new(image).file_stem().map_or_else(|| image.to_string(), |s| s.to_string_lossy().into_owned())
}

#[derive(Clone, Copy, Debug)]
enum JobKind {
    Removal,
    Splice(SpliceMode),
    Blur,
    Genuine,
}

#[derive(Clone, Debug)]
struct Job {
    name: String,
    kind: JobKind,
    source: usize,
    foreground: Option<usize>,
    seed: u64,
    test: bool,
}

fn plan_jobs(cfg: &PipelineConfig) -> Vec<Job> {
    let c = &cfg.corpus;
    let mut jobs = Vec::new();
    let mut next_source = 0;
    let mut take = || {
        next_source += 1;
        next_source - 1
    };
    for cycle in 0..c.cycles {
        let test = cycle >= c.cycles - c.test_cycles;
        let kinds = std::iter::repeat_n(JobKind::Removal, c.removal)
            .chain(std::iter::repeat_n(JobKind::Splice(SpliceMode::Jpeg), c.splice_jpeg))
            .chain(std::iter::repeat_n(JobKind::Splice(SpliceMode::Sharpen), c.splice_sharpen))
            .chain(std::iter::repeat_n(JobKind::Blur, c.blur))
            .chain(std::iter::repeat_n(JobKind::Genuine, c.genuine));
        for (slot, kind) in kinds.enumerate() {
            let source = take();
            let foreground = matches!(kind, JobKind::Splice(_)).then(&mut take);
            let index = jobs.len() as u64;
            jobs.push(Job {
                name: format!("c{cycle:02}_{slot:02}"),
                kind,
                source,
                foreground,
                seed: derive_seed(cfg.seed, STREAM_RECORD + index),
                test,
            });
        }
    }
    jobs
}

fn source_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn removal_rects(img: &RgbImage, sample_size: usize, seed: u64) -> Result<(Rect, Rect)> {
    let (h, w) = (img.height(), img.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let removal = random_region(h, w, &mut rng);
    for _ in 0..1000 {
        let sample = Rect {
            x: rng.random_range(0..=w - sample_size),
            y: rng.random_range(0..=h - sample_size),
            width: sample_size,
            height: sample_size,
        };
        if !removal.overlaps(&sample) {
            return Ok((removal, sample));
        }
    }
    Err(Error::InvalidParameter("no room for a sample region beside the removal region".into()))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    /// Images per type code.
    pub counts: BTreeMap<String, usize>,
    pub train: usize,
    pub test: usize,
}

/// Generates the corpus: sources, manipulated images, masks, manifest and split.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<SynthSummary> {
    let start = Instant::now();
    let _lock = RunLock::acquire(&cfg.run_dir())?;
    let dir = cfg.corpus_dir();
    for sub in ["images", "masks", "sources"] {
        create_dir(&dir.join(sub))?;
    }
    let jobs = plan_jobs(cfg);
    let needed = jobs.iter().map(|j| 1 + usize::from(j.foreground.is_some())).sum::<usize>();
    let c = &cfg.corpus;
    let sources: Vec<(String, RgbImage)> = match &c.source_dir {
        Some(src) => {
            let src = cfg.base_dir.join(src);
            let files = source_files(&src)?;
            if files.len() < needed {
                return Err(Error::Config(format!("{} holds {} images, the corpus needs {needed}", src.display(), files.len())));
            }
            files[..needed]
                .par_iter()
                .map(|p| Ok((p.to_string_lossy().into_owned(), load_image(p)?)))
                .collect::<Result<_>>()?
        }
        None => (0..needed)
            .into_par_iter()
            .map(|k| {
                let img = blot_background(c.height, c.width, derive_seed(cfg.seed, STREAM_SOURCE + k as u64))?;
                let rel = format!("sources/src_{k:04}.png");
                save_png(&img, &dir.join(&rel))?;
                Ok((rel, img))
            })
            .collect::<Result<_>>()?,
    };

    let outputs: Vec<(bool, Vec<TamperRecord>)> = jobs
        .par_iter()
        .map(|job| {
            let (src_name, src) = &sources[job.source];
            let produced: Vec<(String, Synthesized)> = match job.kind {
                JobKind::Removal => {
                    let (removal, sample) = removal_rects(src, c.sample_size, job.seed)?;
                    let suffixes = ["R0", "R05", "R1", "R2"];
                    synth_removal(src, removal, sample, job.seed)?
                        .into_iter()
                        .zip(suffixes)
                        .map(|(s, suffix)| (format!("{}_{suffix}", job.name), s))
                        .collect()
                }
                JobKind::Splice(mode) => {
                    let (_, fg) = &sources[job.foreground.expect("splice jobs have a foreground")];
                    let s = synth_splice(src, fg, job.seed, mode)?;
                    vec![(format!("{}_{}", job.name, s.record.kind.code()), s)]
                }
                JobKind::Blur => vec![(format!("{}_B", job.name), synth_blur(src, job.seed)?)],
                JobKind::Genuine => vec![(
                    format!("{}_G", job.name),
                    Synthesized {
                        image: src.clone(),
                        mask: TamperMask::zeros(src.height(), src.width()),
                        record: TamperRecord::genuine(job.seed),
                    },
                )],
            };
            let mut records = Vec::new();
            for (name, mut s) in produced {
                s.record.image = format!("images/{name}.png");
                save_png(&s.image, &dir.join(&s.record.image))?;
                if s.record.kind != TamperType::Genuine {
                    s.record.mask = format!("masks/{name}.png");
                    save_mask(&s.mask, &dir.join(&s.record.mask))?;
                }
                s.record.sources = std::iter::once(src_name.clone())
                    .chain(job.foreground.map(|f| sources[f].0.clone()))
                    .collect();
                records.push(s.record);
            }
            Ok((job.test, records))
        })
        .collect::<Result<_>>()?;

    let mut split = Split::default();
    let mut records = Vec::new();
    let mut counts = BTreeMap::new();
    for (test, recs) in outputs {
        for r in recs {
            *counts.entry(r.kind.code().to_string()).or_insert(0) += 1;
            if test { &mut split.test } else { &mut split.train }.push(r.image.clone());
            records.push(r);
        }
    }
    split.train.sort();
    split.test.sort();
    let manifest = dir.join(MANIFEST_FILE);
    write_manifest(&records, &manifest)?;
    let split_path = dir.join(SPLIT_FILE);
    fs::write(&split_path, serde_json::to_string_pretty(&split)?).map_err(|e| Error::io(&split_path, e))?;
    RunManifest::record(
        cfg,
        "synth",
        StageRecord {
            config_hash: cfg.corpus_hash(),
            inputs: c.source_dir.iter().map(|p| cfg.relative(&cfg.base_dir.join(p))).collect(),
            outputs: vec![cfg.relative(&manifest), cfg.relative(&split_path)],
            seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(SynthSummary {
        manifest,
        counts,
        train: split.train.len(),
        test: split.test.len(),
    })
}

fn feature_paths(cfg: &PipelineConfig, image: &str) -> (PathBuf, PathBuf) {
    let dir = cfg.features_dir();
    let s = stem(image);
    (dir.join(format!("{s}.ngfm")), dir.join(format!("{s}.nglb")))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FeaturesSummary {
    pub extracted: usize,
    pub cached: usize,
    pub too_small: usize,
    pub failed: usize,
}

enum FeatureOutcome {
    Extracted,
    Cached,
    TooSmall,
}

fn features_for(cfg: &PipelineConfig, record: &TamperRecord, hash: &str) -> Result<FeatureOutcome> {
    let corpus = cfg.corpus_dir();
    let (fpath, lpath) = feature_paths(cfg, &record.image);
    let image = load_image(&corpus.join(&record.image))?;
    let (m, n) = cfg.patch();
    let [s, t] = cfg.extractor.grid;
    let (h, w) = (image.height(), image.width());
    if h < m * s || w < n * t {
        log::warn!("{}: {h}x{w} is smaller than one grid of patches; skipped", record.image);
        return Ok(FeatureOutcome::TooSmall);
    }
    let (ch, cw) = cropped_dims(h, w, m, n)?;
    let mask = if record.has_mask() {
        crate::img::load_mask(&corpus.join(&record.mask))?
    } else {
        TamperMask::zeros(h, w)
    };
    let labels = mask_to_patch_labels(&mask, m, n, ch / m, cw / n, cfg.label_threshold)?;
    write_labels(&labels, &lpath)?;
    if let Ok((_, existing)) = read_features(&fpath) {
        if existing == hash {
            return Ok(FeatureOutcome::Cached);
        }
    }
    let fm = extract(&image, &cfg.feature_config(), cfg.feature_seed())?;
    write_features(&fm, &fpath, hash)?;
    Ok(FeatureOutcome::Extracted)
}

/// Extracts features and patch labels for every manifest entry, reusing
/// files whose config hash matches.
pub fn cmd_features(cfg: &PipelineConfig) -> Result<FeaturesSummary> {
    let start = Instant::now();
    let _lock = RunLock::acquire(&cfg.run_dir())?;
    let manifest = cfg.corpus_dir().join(MANIFEST_FILE);
    let records = read_manifest(&manifest)?;
    create_dir(&cfg.features_dir())?;
    let hash = cfg.feature_hash();
    let outcomes: Vec<Result<FeatureOutcome>> = records
        .par_iter()
        .map(|r| {
            let out = features_for(cfg, r, &hash);
            match &out {
                Ok(FeatureOutcome::Extracted) => log::info!("{}: features written", r.image),
                Ok(_) => {}
                Err(e) => log::error!("{}: {e}", r.image),
            }
            out
        })
        .collect();
    let mut summary = FeaturesSummary::default();
    for o in &outcomes {
        match o {
            Ok(FeatureOutcome::Extracted) => summary.extracted += 1,
            Ok(FeatureOutcome::Cached) => summary.cached += 1,
            Ok(FeatureOutcome::TooSmall) => summary.too_small += 1,
            Err(_) => summary.failed += 1,
        }
    }
    let outputs = records
        .iter()
        .flat_map(|r| {
            let (f, l) = feature_paths(cfg, &r.image);
            [cfg.relative(&f), cfg.relative(&l)]
        })
        .collect();
    RunManifest::record(
        cfg,
        "features",
        StageRecord {
            config_hash: hash,
            inputs: vec![cfg.relative(&manifest)],
            outputs,
            seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    if summary.failed > 0 {
        return Err(Error::Incomplete {
            failed: summary.failed,
            total: records.len(),
        });
    }
    Ok(summary)
}

fn load_checked_features(cfg: &PipelineConfig, image: &str, hash: &str) -> Result<(crate::features::FeatureMatrix, Array2<u8>)> {
    let (fpath, lpath) = feature_paths(cfg, image);
    let (fm, found) = read_features(&fpath)?;
    if found != hash {
        return Err(Error::ConfigMismatch {
            expected: hash.into(),
            found,
        });
    }
    let labels = read_labels(&lpath)?;
    if labels.dim() != (fm.rows, fm.cols) {
        return Err(Error::format(&lpath, "label grid does not match the feature file"));
    }
    Ok((fm, labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub model: PathBuf,
    pub samples: usize,
    pub positives: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Trains on all patches of the training split, shuffled once with the
/// global seed.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainSummary> {
    let start = Instant::now();
    let _lock = RunLock::acquire(&cfg.run_dir())?;
    let split = Split::load(&cfg.corpus_dir().join(SPLIT_FILE))?;
    let hash = cfg.feature_hash();
    let loaded: Vec<_> = split
        .train
        .par_iter()
        .map(|img| load_checked_features(cfg, img, &hash))
        .collect::<Result<_>>()?;
    let total: usize = loaded.iter().map(|(fm, _)| fm.data.nrows()).sum();
    let len = cfg.mlp.input_dim;
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE));
    order.shuffle(&mut rng);
    let mut x = Array2::zeros((total, len));
    let mut y = vec![0u8; total];
    let mut k = 0;
    for (fm, labels) in &loaded {
        if fm.feature_len() != len {
            return Err(Error::Dimensions(format!("feature length {} does not match mlp.input_dim {len}", fm.feature_len())));
        }
        for (row, &label) in fm.data.axis_iter(Axis(0)).zip(labels.iter()) {
            x.row_mut(order[k]).assign(&row);
            y[order[k]] = label;
            k += 1;
        }
    }
    drop(loaded);
    let positives = y.iter().filter(|&&v| v == 1).count();
    log::info!("training on {total} patches ({positives} tampered)");
    let spec = TrainSpec {
        seed: derive_seed(cfg.seed, STREAM_TRAIN),
        ..cfg.train.clone()
    };
    let outcome = train(x.view(), &y, &cfg.mlp, &spec)?;
    let model_path = cfg.run_dir().join(MODEL_FILE);
    write_model(&outcome.model, &model_path, &hash)?;
    RunManifest::record(
        cfg,
        "train",
        StageRecord {
            config_hash: cfg.model_hash(),
            inputs: split.train.iter().map(|img| cfg.relative(&feature_paths(cfg, img).0)).collect(),
            outputs: vec![cfg.relative(&model_path)],
            seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(TrainSummary {
        model: model_path,
        samples: total,
        positives,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.train_loss.len(),
    })
}

fn load_compatible_model(cfg: &PipelineConfig) -> Result<MlpModel> {
    let (model, found) = read_model(&cfg.run_dir().join(MODEL_FILE))?;
    let expected = cfg.feature_hash();
    if found != expected {
        return Err(Error::ConfigMismatch { expected, found });
    }
    Ok(model)
}

#[derive(Serialize)]
struct ScoreFile<'a> {
    patch: [usize; 2],
    rows: usize,
    cols: usize,
    scores: Vec<&'a [f64]>,
}

fn write_scores(map: &ScoreMap, patch: (usize, usize), path: &Path) -> Result<()> {
    let standard = map.scores().as_standard_layout().into_owned();
    let file = ScoreFile {
        patch: [patch.0, patch.1],
        rows: map.dim().0,
        cols: map.dim().1,
        scores: standard.as_slice().expect("standard layout").chunks(map.dim().1.max(1)).collect(),
    };
    fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub image: PathBuf,
    pub scores: PathBuf,
    pub heatmap: Option<PathBuf>,
}

/// Scores images with the trained model; defaults to the test split.
pub fn cmd_predict(cfg: &PipelineConfig, images: &[PathBuf]) -> Result<Vec<Prediction>> {
    let start = Instant::now();
    let _lock = RunLock::acquire(&cfg.run_dir())?;
    let model = load_compatible_model(cfg)?;
    let images: Vec<PathBuf> = if images.is_empty() {
        let split = Split::load(&cfg.corpus_dir().join(SPLIT_FILE))?;
        split.test.iter().map(|p| cfg.corpus_dir().join(p)).collect()
    } else {
        images.to_vec()
    };
    let out_dir = cfg.run_dir().join("predictions");
    create_dir(&out_dir)?;
    let patch = cfg.patch();
    let preds: Vec<Prediction> = images
        .par_iter()
        .map(|path| {
            let img = load_image(path)?;
            let fm = extract(&img, &cfg.feature_config(), cfg.feature_seed())?;
            let map = ScoreMap::new(predict_map(&model, &fm)?, Provenance::Ours)?;
            let s = stem(&path.to_string_lossy());
            let scores = out_dir.join(format!("{s}.json"));
            write_scores(&map, patch, &scores)?;
            let heat = if cfg.heatmaps {
                let p = out_dir.join(format!("{s}_heatmap.png"));
                save_gray_png(&heatmap(&map, patch), &p)?;
                Some(p)
            } else {
                None
            };
            Ok(Prediction {
                image: path.clone(),
                scores,
                heatmap: heat,
            })
        })
        .collect::<Result<_>>()?;
    RunManifest::record(
        cfg,
        "predict",
        StageRecord {
            config_hash: cfg.model_hash(),
            inputs: images.iter().map(|p| cfg.relative(p)).collect(),
            outputs: preds
                .iter()
                .flat_map(|p| std::iter::once(&p.scores).chain(&p.heatmap))
                .map(|p| cfg.relative(p))
                .collect(),
            seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(preds)
}

/// Scores manifest entries from cached feature files.
struct CachedModelSource<'a> {
    cfg: &'a PipelineConfig,
    model: MlpModel,
    hash: String,
}

impl ScoreSource for CachedModelSource<'_> {
    fn provenance(&self) -> Provenance {
        Provenance::Ours
    }

    fn score(&self, record: &TamperRecord, _image: &RgbImage) -> Result<ScoreMap> {
        let (fm, _) = load_checked_features(self.cfg, &record.image, &self.hash)?;
        ScoreMap::new(predict_map(&self.model, &fm)?, Provenance::Ours)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ours,
    Noi,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub report: MetricsReport,
    pub json: PathBuf,
    pub text: PathBuf,
}

/// Evaluates the test split and writes `eval_<method>.json` / `.txt`.
pub fn cmd_eval(cfg: &PipelineConfig, method: Method) -> Result<EvalSummary> {
    let start = Instant::now();
    let _lock = RunLock::acquire(&cfg.run_dir())?;
    let corpus = cfg.corpus_dir();
    let manifest = corpus.join(MANIFEST_FILE);
    let split = Split::load(&corpus.join(SPLIT_FILE))?;
    let records: Vec<TamperRecord> = read_manifest(&manifest)?
        .into_iter()
        .filter(|r| split.test.binary_search(&r.image).is_ok())
        .collect();
    let patch = cfg.patch();
    let (source, stage_hash): (Box<dyn ScoreSource + '_>, String) = match method {
        Method::Ours => (
            Box::new(CachedModelSource {
                cfg,
                model: load_compatible_model(cfg)?,
                hash: cfg.feature_hash(),
            }),
            cfg.model_hash(),
        ),
        Method::Noi => (
            Box::new(NoiSource { tile: cfg.noi_tile, patch }),
            hex_digest(format!("noi {} {:?}", cfg.noi_tile, patch).as_bytes()),
        ),
    };
    let (report, scored) = evaluate(&corpus, &records, source.as_ref(), patch, cfg.label_threshold)?;
    let name = report.provenance.to_string();
    let run = cfg.run_dir();
    let json = run.join(format!("eval_{name}.json"));
    let text = run.join(format!("eval_{name}.txt"));
    fs::write(&json, report.to_json()?).map_err(|e| Error::io(&json, e))?;
    fs::write(&text, report.to_text()).map_err(|e| Error::io(&text, e))?;
    let mut outputs = vec![cfg.relative(&json), cfg.relative(&text)];
    if cfg.heatmaps {
        let dir = run.join("heatmaps").join(&name);
        create_dir(&dir)?;
        let paths: Vec<PathBuf> = scored
            .par_iter()
            .map(|s| {
                let p = dir.join(format!("{}.png", stem(&s.image)));
                save_gray_png(&heatmap(&s.scores, patch), &p)?;
                Ok(p)
            })
            .collect::<Result<_>>()?;
        outputs.extend(paths.iter().map(|p| cfg.relative(p)));
    }
    RunManifest::record(
        cfg,
        &format!("eval_{name}"),
        StageRecord {
            config_hash: stage_hash,
            inputs: vec![cfg.relative(&manifest)],
            outputs,
            seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(EvalSummary { report, json, text })
}

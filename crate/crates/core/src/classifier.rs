//! Feed-forward patch classifier: ReLU hidden layers, two-way softmax.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

pub const CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl MlpArchitecture {
    /// Four hidden layers of 200 units.
    pub fn western_blot(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![200; 4],
        }
    }

    /// Four hidden layers of 300 units.
    pub fn microscopy(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![300; 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "architecture needs a positive input dim and at least one non-empty hidden layer, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(CLASSES);
        dims
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Not part of the config schema; pipelines derive it from their global seed.
    #[serde(skip)]
    pub seed: u64,
    pub validation_fraction: f64,
    pub patience: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 128,
            epochs: 200,
            seed: 0,
            validation_fraction: 0.1,
            patience: 20,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "learning rate, batch size and epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(
                "validation fraction and momentum must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Weights are stored `fan_in × fan_out` so a batch propagates as `X·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub arch: MlpArchitecture,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub seed: u64,
}

/// Glorot-uniform weights, zero biases.
pub fn init(arch: &MlpArchitecture, seed: u64) -> Result<MlpModel> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = arch.dims();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a)));
        biases.push(Array1::zeros(fan_out));
    }
    Ok(MlpModel {
        arch: arch.clone(),
        weights,
        biases,
        seed,
    })
}

struct Activations {
    /// Layer inputs: `inputs[0]` is the batch, `inputs[l]` the output of layer `l-1`.
    inputs: Vec<Array2<f64>>,
    probs: Array2<f64>,
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl MlpModel {
    fn forward_all(&self, x: ArrayView2<'_, f64>) -> Activations {
        let layers = self.weights.len();
        let mut inputs = vec![x.to_owned()];
        for l in 0..layers {
            let mut z = inputs[l].dot(&self.weights[l]);
            z += &self.biases[l];
            if l + 1 < layers {
                z.mapv_inplace(|v| v.max(0.0));
                inputs.push(z);
            } else {
                softmax_rows(&mut z);
                return Activations { inputs, probs: z };
            }
        }
        unreachable!("at least one layer")
    }

    /// Class probabilities for a batch, one row per sample.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.arch.input_dim {
            return Err(Error::Dimensions(format!(
                "batch has {} features, model expects {}",
                x.ncols(),
                self.arch.input_dim
            )));
        }
        Ok(self.forward_all(x).probs)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// `(p_genuine, p_tampered)`.
pub fn forward(model: &MlpModel, x: ArrayView1<'_, f64>) -> Result<[f64; 2]> {
    let probs = model.forward_batch(x.insert_axis(Axis(0)))?;
    Ok([probs[[0, 0]], probs[[0, 1]]])
}

struct Gradients {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Weighted mean cross-entropy of a batch and its gradients.
fn loss_and_gradients(model: &MlpModel, x: ArrayView2<'_, f64>, labels: &[u8], sample_weight: &[f64]) -> (f64, Gradients) {
    let acts = model.forward_all(x);
    let batch = labels.len() as f64;
    let mut loss = 0.0;
    let mut delta = acts.probs.clone();
    for (r, (&y, &w)) in labels.iter().zip(sample_weight).enumerate() {
        loss -= w * acts.probs[[r, y as usize]].max(f64::MIN_POSITIVE).ln();
        delta[[r, y as usize]] -= 1.0;
        delta.row_mut(r).mapv_inplace(|v| v * w / batch);
    }
    loss /= batch;

    let layers = model.weights.len();
    let mut gw = vec![Array2::zeros((0, 0)); layers];
    let mut gb = vec![Array1::zeros(0); layers];
    for l in (0..layers).rev() {
        gw[l] = acts.inputs[l].t().dot(&delta);
        gb[l] = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut upstream = delta.dot(&model.weights[l].t());
            upstream.zip_mut_with(&acts.inputs[l], |g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            delta = upstream;
        }
    }
    (loss, Gradients { weights: gw, biases: gb })
}

fn mean_loss(model: &MlpModel, x: ArrayView2<'_, f64>, labels: &[u8], class_weight: [f64; 2]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let probs = model.forward_all(x).probs;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -class_weight[y as usize] * probs[[r, y as usize]].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub initial_loss: f64,
    /// Mean training loss after each epoch.
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// Mini-batch SGD with momentum on class-weighted cross-entropy.
///
/// The last `validation_fraction` of the samples (in the given order) is held
/// out; batches are contiguous runs of the remaining samples and only their
/// order is shuffled per epoch, so callers own sample ordering.
pub fn train(features: ArrayView2<'_, f64>, labels: &[u8], arch: &MlpArchitecture, spec: &TrainSpec) -> Result<TrainOutcome> {
    arch.validate()?;
    spec.validate()?;
    let n = labels.len();
    if features.nrows() != n || features.ncols() != arch.input_dim {
        return Err(Error::Dimensions(format!(
            "{}x{} features with {n} labels for input dim {}",
            features.nrows(),
            features.ncols(),
            arch.input_dim
        )));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidParameter("labels must be 0 or 1".into()));
    }
    let n_val = (spec.validation_fraction * n as f64).floor() as usize;
    let n_train = n - n_val;
    let (train_x, val_x) = (features.slice(s![..n_train, ..]), features.slice(s![n_train.., ..]));
    let (train_y, val_y) = labels.split_at(n_train);
    let positives = train_y.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == n_train {
        return Err(Error::SingleClass);
    }
    let class_weight = [
        n_train as f64 / (2.0 * (n_train - positives) as f64),
        n_train as f64 / (2.0 * positives as f64),
    ];
    let sample_weight: Vec<f64> = train_y.iter().map(|&y| class_weight[y as usize]).collect();

    let mut model = init(arch, spec.seed)?;
    let mut vel_w: Vec<Array2<f64>> = model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect();
    let mut vel_b: Vec<Array1<f64>> = model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);

    let monitor = |m: &MlpModel| {
        if n_val > 0 {
            mean_loss(m, val_x, val_y, class_weight)
        } else {
            mean_loss(m, train_x, train_y, class_weight)
        }
    };
    let initial_loss = mean_loss(&model, train_x, train_y, class_weight);
    let mut best = (monitor(&model), model.clone(), 0usize);
    let mut train_loss = Vec::new();
    let mut validation_loss = Vec::new();
    let mut batches: Vec<usize> = (0..n_train.div_ceil(spec.batch_size)).collect();
    let mut stale = 0;

    for epoch in 1..=spec.epochs {
        batches.shuffle(&mut rng);
        for &b in &batches {
            let start = b * spec.batch_size;
            let end = (start + spec.batch_size).min(n_train);
            let (loss, grads) = loss_and_gradients(
                &model,
                train_x.slice(s![start..end, ..]),
                &train_y[start..end],
                &sample_weight[start..end],
            );
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            for l in 0..model.weights.len() {
                vel_w[l] *= spec.momentum;
                vel_w[l].scaled_add(-spec.learning_rate, &grads.weights[l]);
                model.weights[l] += &vel_w[l];
                vel_b[l] *= spec.momentum;
                vel_b[l].scaled_add(-spec.learning_rate, &grads.biases[l]);
                model.biases[l] += &vel_b[l];
            }
        }
        let tl = mean_loss(&model, train_x, train_y, class_weight);
        let vl = monitor(&model);
        if !tl.is_finite() || !vl.is_finite() || !model.all_finite() {
            return Err(Error::Diverged { epoch });
        }
        train_loss.push(tl);
        validation_loss.push(vl);
        if vl < best.0 {
            best = (vl, model.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= spec.patience {
                log::debug!("early stop at epoch {epoch}, best epoch {}", best.2);
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best.1,
        initial_loss,
        train_loss,
        validation_loss,
        best_epoch: best.2,
    })
}

/// Largest relative error between backprop gradients and central differences
/// (`h = 1e-5`) of the single-sample cross-entropy, over all parameters.
/// Relative errors use `max(|analytic|, |numeric|, 1e-6)` as denominator.
pub fn gradient_check(model: &MlpModel, x: ArrayView1<'_, f64>, label: u8) -> Result<f64> {
    if x.len() != model.arch.input_dim || label > 1 {
        return Err(Error::Dimensions("sample does not match the model".into()));
    }
    let xb = x.insert_axis(Axis(0));
    let (_, grads) = loss_and_gradients(model, xb, &[label], &[1.0]);
    let loss = |m: &MlpModel| -m.forward_all(xb).probs[[0, label as usize]].ln();
    let h = 1e-5;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for l in 0..model.weights.len() {
        for idx in 0..model.weights[l].len() {
            let (r, c) = (idx / model.weights[l].ncols(), idx % model.weights[l].ncols());
            let orig = probe.weights[l][[r, c]];
            probe.weights[l][[r, c]] = orig + h;
            let up = loss(&probe);
            probe.weights[l][[r, c]] = orig - h;
            let down = loss(&probe);
            probe.weights[l][[r, c]] = orig;
            worst = worst.max(rel(grads.weights[l][[r, c]], (up - down) / (2.0 * h)));
        }
        for i in 0..model.biases[l].len() {
            let orig = probe.biases[l][i];
            probe.biases[l][i] = orig + h;
            let up = loss(&probe);
            probe.biases[l][i] = orig - h;
            let down = loss(&probe);
            probe.biases[l][i] = orig;
            worst = worst.max(rel(grads.biases[l][i], (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

/// Tampering probability of every patch.
pub fn predict_map(model: &MlpModel, fm: &FeatureMatrix) -> Result<Array2<f64>> {
    if fm.feature_len() != model.arch.input_dim {
        return Err(Error::Dimensions(format!(
            "features have length {}, model expects {}",
            fm.feature_len(),
            model.arch.input_dim
        )));
    }
    let probs = model.forward_batch(fm.data.view())?;
    Ok(Array2::from_shape_fn((fm.rows, fm.cols), |(i, j)| probs[[i * fm.cols + j, 1]]))
}

const MODEL_MAGIC: &[u8; 5] = b"NGMLP";
const MODEL_VERSION: u32 = 1;

/// Binary model file: magic, version, layer count, widths, seed, config hash,
/// then little-endian `f64` weights (row-major) and biases per layer.
pub fn write_model(model: &MlpModel, path: &Path, config_hash: &str) -> Result<()> {
    let dims = model.arch.dims();
    let mut bytes = MODEL_MAGIC.to_vec();
    bytes.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(model.weights.len() as u32).to_le_bytes());
    for d in &dims {
        bytes.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&model.seed.to_le_bytes());
    bytes.extend_from_slice(&(config_hash.len() as u32).to_le_bytes());
    bytes.extend_from_slice(config_hash.as_bytes());
    for (w, b) in model.weights.iter().zip(&model.biases) {
        for v in w.iter().chain(b.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::format(self.path, "truncated model file"));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_model(path: &Path) -> Result<(MlpModel, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    if cur.take(5)? != MODEL_MAGIC {
        return Err(Error::format(path, "missing NGMLP header"));
    }
    let version = cur.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let layers = cur.u32()? as usize;
    if layers < 2 {
        return Err(Error::format(path, "model needs at least one hidden layer"));
    }
    let dims = (0..=layers).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    if dims[layers] != CLASSES {
        return Err(Error::format(path, "output layer must have two units"));
    }
    let seed = cur.u64()?;
    let hash_len = cur.u32()? as usize;
    let hash = String::from_utf8(cur.take(hash_len)?.to_vec()).map_err(|_| Error::format(path, "config hash is not utf-8"))?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in dims.windows(2) {
        let w = (0..pair[0] * pair[1]).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        weights.push(Array2::from_shape_vec((pair[0], pair[1]), w).expect("sized"));
        biases.push(Array1::from((0..pair[1]).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after parameters"));
    }
    let arch = MlpArchitecture {
        input_dim: dims[0],
        hidden: dims[1..layers].to_vec(),
    };
    Ok((MlpModel { arch, weights, biases, seed }, hash))
}

//! Multinomial softmax regression trained by mini-batch SGD.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, RasterSource};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureVector};
use crate::parallel::par_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    Zeros,
    /// N(0, 0.01²) weights, zero bias.
    SeededGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_epochs: usize,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init: Init,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            lr_decay_epochs: 10,
            lr_decay_factor: 10.0,
            epochs: 30,
            batch_size: 20,
            seed: 0,
            init: Init::SeededGaussian,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite())
            || self.lr_decay_epochs == 0
            || self.lr_decay_factor <= 0.0
            || self.epochs == 0
            || self.batch_size == 0
        {
            return Err(Error::ConfigInvalid(format!(
                "training parameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Step size for 0-based `epoch`: divided by the decay factor every
    /// `lr_decay_epochs` epochs.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate / self.lr_decay_factor.powi((epoch / self.lr_decay_epochs) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// Weights are `class_count` rows of `feature_dim + 1` values; the last
/// column is the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub class_count: usize,
    pub feature_dim: usize,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub train_log: Vec<EpochLog>,
}

impl ClassifierModel {
    pub fn new(class_count: usize, feature_dim: usize, init: Init, seed: u64) -> Self {
        let cols = feature_dim + 1;
        let mut weights = vec![0.0; class_count * cols];
        if init == Init::SeededGaussian {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 0.01).expect("valid sigma");
            for c in 0..class_count {
                for d in 0..feature_dim {
                    weights[c * cols + d] = normal.sample(&mut rng);
                }
            }
        }
        ClassifierModel {
            class_count,
            feature_dim,
            weights,
            train_log: Vec::new(),
        }
    }

    fn cols(&self) -> usize {
        self.feature_dim + 1
    }

    fn check_dim(&self, x: &FeatureVector) -> Result<()> {
        if x.dim() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: x.dim(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.logits_unchecked(x.as_slice()))
    }

    fn logits_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.cols();
        (0..self.class_count)
            .map(|c| {
                let row = &self.weights[c * cols..(c + 1) * cols];
                row[..self.feature_dim]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + row[self.feature_dim]
            })
            .collect()
    }

    pub fn predict_probs(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<usize> {
        Ok(argmax(&self.predict_probs(x)?))
    }

    /// Cross-entropy of one example.
    pub fn loss(&self, x: &FeatureVector, label: usize) -> Result<f64> {
        self.check_dim(x)?;
        let z = self.logits_unchecked(x.as_slice());
        Ok(log_sum_exp(&z) - z[label])
    }

    pub fn mean_loss(&self, data: &[(FeatureVector, usize)]) -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in data {
            total += self.loss(x, *y)?;
        }
        Ok(total / data.len().max(1) as f64)
    }

    /// Analytic gradient of the cross-entropy of one example, laid out like
    /// `weights`.
    pub fn gradient(&self, x: &FeatureVector, label: usize) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut g = vec![0.0; self.weights.len()];
        self.accumulate_gradient(x.as_slice(), label, 1.0, &mut g);
        Ok(g)
    }

    fn accumulate_gradient(&self, x: &[f64], label: usize, scale: f64, g: &mut [f64]) {
        let cols = self.cols();
        let p = softmax(&self.logits_unchecked(x));
        for c in 0..self.class_count {
            let delta = (p[c] - (c == label) as u8 as f64) * scale;
            let row = &mut g[c * cols..(c + 1) * cols];
            for (gd, v) in row[..self.feature_dim].iter_mut().zip(x) {
                *gd += delta * v;
            }
            row[self.feature_dim] += delta;
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn accuracy_of(model: &ClassifierModel, data: &[(FeatureVector, usize)]) -> f64 {
    let hits = data
        .iter()
        .filter(|(x, y)| argmax(&model.logits_unchecked(x.as_slice())) == *y)
        .count();
    hits as f64 / data.len().max(1) as f64
}

fn check_data(data: &[(FeatureVector, usize)], class_count: usize) -> Result<usize> {
    let dim = data.first().ok_or(Error::EmptyDataset)?.0.dim();
    let mut seen = vec![false; class_count];
    for (x, y) in data {
        if x.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: x.dim(),
            });
        }
        if *y >= class_count {
            return Err(Error::DegenerateData(format!(
                "label {y} out of range for {class_count} classes"
            )));
        }
        seen[*y] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::DegenerateData(format!("class {missing} has no examples")));
    }
    Ok(dim)
}

/// Train from a fresh initialization.
pub fn train_softmax(
    data: &[(FeatureVector, usize)],
    class_count: usize,
    config: &TrainConfig,
) -> Result<ClassifierModel> {
    config.validate()?;
    if class_count < 2 {
        return Err(Error::DegenerateData("need at least two classes".into()));
    }
    let dim = check_data(data, class_count)?;
    let init = ClassifierModel::new(class_count, dim, config.init, config.seed);
    train_from(init, data, config)
}

/// Continue training `model`. Each epoch shuffles the data with a seeded
/// permutation and takes one step per mini-batch; the final partial batch is
/// kept and its gradient averaged over its true size.
pub fn train_from(
    mut model: ClassifierModel,
    data: &[(FeatureVector, usize)],
    config: &TrainConfig,
) -> Result<ClassifierModel> {
    config.validate()?;
    let dim = check_data(data, model.class_count)?;
    if dim != model.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: model.feature_dim,
            actual: dim,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; model.weights.len()];
    let start = model.train_log.len();
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (x, y) = &data[i];
                model.accumulate_gradient(x.as_slice(), *y, scale, &mut grad);
            }
            // descent: step against the mean loss gradient
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= lr * g;
            }
        }
        let loss = model.mean_loss(data)?;
        if !loss.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite { epoch });
        }
        let accuracy = accuracy_of(&model, data);
        model.train_log.push(EpochLog {
            epoch: start + epoch,
            learning_rate: lr,
            loss,
            accuracy,
        });
    }
    Ok(model)
}

/// Largest relative difference between the analytic gradient and central
/// finite differences of the single-example loss. Relative error uses
/// `|a - n| / max(|a| + |n|, 1e-4)`; the floor keeps near-zero coordinates
/// from dividing rounding noise by rounding noise. Up to 512 coordinates,
/// evenly spaced, are checked.
pub fn gradient_check(
    model: &ClassifierModel,
    x: &FeatureVector,
    label: usize,
    epsilon: f64,
) -> Result<f64> {
    let analytic = model.gradient(x, label)?;
    let n = model.weights.len();
    let step = n.div_ceil(512).max(1);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in (0..n).step_by(step) {
        let w0 = probe.weights[i];
        probe.weights[i] = w0 + epsilon;
        let up = probe.loss(x, label)?;
        probe.weights[i] = w0 - epsilon;
        let down = probe.loss(x, label)?;
        probe.weights[i] = w0;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Features for every record, in manifest order.
pub fn featurize(dataset: &DatasetManifest, rasters: &dyn RasterSource) -> Result<Vec<FeatureVector>> {
    par_map(&dataset.records, |r| rasters.raster(r).map(|img| extract_features(&img)))
        .into_iter()
        .collect()
}

pub fn labeled_features(
    dataset: &DatasetManifest,
    rasters: &dyn RasterSource,
) -> Result<Vec<(FeatureVector, usize)>> {
    let feats = featurize(dataset, rasters)?;
    Ok(feats
        .into_iter()
        .zip(&dataset.records)
        .map(|(f, r)| (f, r.label))
        .collect())
}

pub fn evaluate_features(model: &ClassifierModel, data: &[(FeatureVector, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0usize;
    for (x, y) in data {
        hits += (model.predict(x)? == *y) as usize;
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Fraction of records whose predicted class equals the label.
pub fn evaluate(
    model: &ClassifierModel,
    dataset: &DatasetManifest,
    rasters: &dyn RasterSource,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    evaluate_features(model, &labeled_features(dataset, rasters)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector(v.to_vec())
    }

    /// Two Gaussian blobs far apart in 4-D.
    fn blobs(n: usize, seed: u64) -> Vec<(FeatureVector, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let y = i % 2;
                let c = if y == 0 { 1.0 } else { -1.0 };
                let v: Vec<f64> = (0..4).map(|_| c + rng.gen_range(-0.5..0.5)).collect();
                (FeatureVector(v), y)
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let m = ClassifierModel::new(4, 3, Init::Zeros, 0);
        assert_eq!(m.predict_probs(&fv(&[1.0, 2.0, 3.0])).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, -3.0]);
        let b = softmax(&[101.0, 102.0, 97.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = ClassifierModel::new(2, 3, Init::Zeros, 0);
        assert!(matches!(
            m.predict_probs(&fv(&[1.0])),
            Err(Error::DimensionMismatch { expected: 3, actual: 1 })
        ));
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let data = blobs(60, 1);
        let cfg = TrainConfig::default();
        let m = train_softmax(&data, 2, &cfg).unwrap();
        assert_eq!(m.train_log.last().unwrap().accuracy, 1.0);
        let init = ClassifierModel::new(2, 4, cfg.init, cfg.seed);
        assert!(m.train_log[0].loss < init.mean_loss(&data).unwrap());
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let data = blobs(30, 2);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..TrainConfig::default()
        };
        let m = train_softmax(&data, 2, &cfg).unwrap();
        assert_eq!(m.weights, ClassifierModel::new(2, 4, cfg.init, cfg.seed).weights);
    }

    #[test]
    fn schedule_divides_by_ten_every_ten_epochs() {
        let data = blobs(20, 3);
        let m = train_softmax(&data, 2, &TrainConfig::default()).unwrap();
        assert_eq!(m.train_log.len(), 30);
        for log in &m.train_log {
            let expected = 0.001 / 10f64.powi((log.epoch / 10) as i32);
            assert_eq!(log.learning_rate, expected);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(50, 4);
        let cfg = TrainConfig::default();
        let a = train_softmax(&data, 2, &cfg).unwrap();
        let b = train_softmax(&data, 2, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_class_is_degenerate() {
        let data = vec![(fv(&[1.0]), 0), (fv(&[2.0]), 0)];
        assert!(matches!(
            train_softmax(&data, 2, &TrainConfig::default()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let data = vec![(fv(&[1e200]), 0), (fv(&[1e200]), 1)];
        let cfg = TrainConfig {
            learning_rate: 1e200,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_softmax(&data, 2, &cfg),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..5 {
            let m = ClassifierModel::new(3, 72, Init::SeededGaussian, seed);
            let x = FeatureVector((0..72).map(|_| rng.gen_range(-1.0..1.0)).collect());
            assert!(gradient_check(&m, &x, (seed % 3) as usize, 1e-5).unwrap() < 1e-5);
        }
    }

    #[test]
    fn zero_input_has_zero_weight_gradient() {
        let m = ClassifierModel::new(3, 5, Init::SeededGaussian, 1);
        let g = m.gradient(&fv(&[0.0; 5]), 1).unwrap();
        for c in 0..3 {
            assert!(g[c * 6..c * 6 + 5].iter().all(|&v| v == 0.0));
            assert!(g[c * 6 + 5] != 0.0);
        }
    }

    #[test]
    fn confident_correct_prediction_is_stationary() {
        let mut m = ClassifierModel::new(2, 1, Init::Zeros, 0);
        m.weights = vec![50.0, 0.0, -50.0, 0.0];
        let g = m.gradient(&fv(&[1.0]), 0).unwrap();
        assert!(g.iter().map(|v| v.abs()).sum::<f64>() < 1e-30);
    }
}

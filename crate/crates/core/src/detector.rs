//! Image classifiers for real-vs-fake and multi-domain detection.
//!
//! The backbone is a small residual CNN: an RGB stem, four residual blocks
//! with average-pool downsampling between them, global average pooling
//! (the penultimate features) and a linear softmax head.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Error, Result};
use crate::generator::LRELU_SLOPE;
use crate::graph::{Graph, Var};
use crate::image::{self, Image};
use crate::metrics::{average_precision, DetectorMetrics, MulticlassMetrics};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamSet};
use crate::rng::{self, derive_seed};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub resolution: usize,
    pub stem: usize,
    /// Output channels of the residual blocks.
    pub channels: Vec<usize>,
    pub classes: usize,
}

impl DetectorConfig {
    pub fn binary(resolution: usize) -> Self {
        Self::with_classes(resolution, 2)
    }

    pub fn with_classes(resolution: usize, classes: usize) -> Self {
        Self {
            resolution,
            stem: 8,
            channels: vec![16, 32, 64, 64],
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_input!(self.classes >= 2, "a detector needs at least two classes");
        ensure_input!(!self.channels.is_empty(), "a detector needs at least one block");
        ensure_input!(
            self.stem > 0 && self.channels.iter().all(|&c| c > 0),
            "channel counts must be positive"
        );
        let shrink = 1usize << self.channels.len();
        ensure_input!(
            self.resolution >= shrink && self.resolution % shrink == 0,
            "resolution {} is too small for {} blocks",
            self.resolution,
            self.channels.len()
        );
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorTraining {
    pub epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight each example by `N / (classes · N_class)`.
    pub class_weighting: bool,
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for DetectorTraining {
    fn default() -> Self {
        Self {
            epochs: 12,
            max_steps: None,
            batch_size: 32,
            lr: 1e-3,
            class_weighting: true,
            validation_fraction: 0.1,
            patience: 3,
            seed: 0,
        }
    }
}

impl DetectorTraining {
    pub fn validate(&self) -> Result<()> {
        ensure_input!(self.epochs >= 1, "epochs must be at least 1");
        ensure_input!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure_input!(self.lr > 0.0, "lr must be positive");
        ensure_input!(
            (0.0..1.0).contains(&self.validation_fraction),
            "validation_fraction must lie in [0, 1)"
        );
        Ok(())
    }
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub train_loss: Vec<f64>,
    /// Validation AP (binary) or accuracy (multi-class) after each epoch.
    pub validation: Vec<f64>,
    pub best_epoch: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    params: ParamSet<f32>,
}

struct Layout {
    stem: (usize, usize),
    blocks: Vec<BlockIdx>,
    head: (usize, usize),
}

struct BlockIdx {
    conv1: (usize, usize),
    conv2: (usize, usize),
    skip: Option<usize>,
}

fn he(r: &mut rng::Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<f32> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let v: Vec<f64> = rng::normal_vec(r, n);
    Tensor::from_vec(shape, v.into_iter().map(|x| (x * std) as f32).collect()).expect("shape")
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(seed);
        let mut p = ParamSet::new();
        p.push("stem.weight", he(&mut r, &[config.stem, 3, 3, 3], 27, 1.0));
        p.push("stem.bias", Tensor::zeros(&[config.stem]));
        let mut c_in = config.stem;
        for (b, &c) in config.channels.iter().enumerate() {
            p.push(format!("b{b}.conv1.weight"), he(&mut r, &[c, c_in, 3, 3], c_in * 9, 1.0));
            p.push(format!("b{b}.conv1.bias"), Tensor::zeros(&[c]));
            // Residual branches start small so each block begins near its skip path.
            p.push(format!("b{b}.conv2.weight"), he(&mut r, &[c, c, 3, 3], c * 9, 0.3));
            p.push(format!("b{b}.conv2.bias"), Tensor::zeros(&[c]));
            if c != c_in {
                p.push(format!("b{b}.skip.weight"), he(&mut r, &[c, c_in, 1, 1], c_in, 0.5));
            }
            c_in = c;
        }
        p.push("head.weight", he(&mut r, &[config.classes, c_in], c_in, 0.5));
        p.push("head.bias", Tensor::zeros(&[config.classes]));
        Ok(Self { config, params: p })
    }

    /// Rebuilds a detector from stored weights, checking names and shapes.
    pub fn from_parts(config: DetectorConfig, params: ParamSet<f32>) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        ensure_input!(
            template.params.len() == params.len()
                && template
                    .params
                    .iter()
                    .zip(params.iter())
                    .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape()),
            "detector weights do not match the configured architecture"
        );
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn layout(&self) -> Layout {
        let ix = |n: &str| self.params.index_of(n).expect("parameter present");
        let blocks = (0..self.config.channels.len())
            .map(|b| BlockIdx {
                conv1: (ix(&format!("b{b}.conv1.weight")), ix(&format!("b{b}.conv1.bias"))),
                conv2: (ix(&format!("b{b}.conv2.weight")), ix(&format!("b{b}.conv2.bias"))),
                skip: self.params.index_of(&format!("b{b}.skip.weight")),
            })
            .collect();
        Layout {
            stem: (ix("stem.weight"), ix("stem.bias")),
            blocks,
            head: (ix("head.weight"), ix("head.bias")),
        }
    }

    /// Returns `(features [N, C], logits [N, classes])`.
    fn forward(&self, g: &mut Graph<f32>, bound: &Bound, x: Var) -> (Var, Var) {
        let lay = self.layout();
        let slope = LRELU_SLOPE as f32;
        let mut h = g.conv2d(x, bound.var(lay.stem.0), Some(bound.var(lay.stem.1)));
        h = g.leaky_relu(h, slope);
        h = g.avg_pool2x(h);
        let nb = lay.blocks.len();
        for (b, blk) in lay.blocks.iter().enumerate() {
            let mut r = g.conv2d(h, bound.var(blk.conv1.0), Some(bound.var(blk.conv1.1)));
            r = g.leaky_relu(r, slope);
            r = g.conv2d(r, bound.var(blk.conv2.0), Some(bound.var(blk.conv2.1)));
            let skip = match blk.skip {
                Some(w) => g.conv2d(h, bound.var(w), None),
                None => h,
            };
            h = g.add(r, skip);
            h = g.leaky_relu(h, slope);
            if b + 1 < nb {
                h = g.avg_pool2x(h);
            }
        }
        let feats = g.global_avg_pool(h);
        let logits = g.linear(feats, bound.var(lay.head.0), Some(bound.var(lay.head.1)));
        (feats, logits)
    }

    fn check_images(&self, images: &[&Image]) -> Result<()> {
        let r = self.config.resolution;
        for img in images {
            ensure_input!(
                img.width() == r && img.height() == r,
                "image is {}x{}, detector expects {r}x{r}",
                img.width(),
                img.height()
            );
        }
        Ok(())
    }

    fn run_batches(&self, images: &[&Image], mut each: impl FnMut(&Tensor<f32>, &Tensor<f32>)) -> Result<()> {
        self.check_images(images)?;
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, |_| false);
            let x = g.input(image::batch(chunk)?);
            let (f, l) = self.forward(&mut g, &bound, x);
            each(g.value(f), g.value(l));
        }
        Ok(())
    }

    /// Softmax class probabilities, one row per image.
    pub fn predict_proba(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let k = self.config.classes;
        let mut out = Vec::with_capacity(images.len());
        self.run_batches(images, |_, logits| {
            for row in logits.data().chunks(k) {
                out.push(softmax(row));
            }
        })?;
        Ok(out)
    }

    /// Probability of class 1 (fake) per image.
    pub fn fake_scores(&self, images: &[&Image]) -> Result<Vec<f64>> {
        Ok(self.predict_proba(images)?.into_iter().map(|p| p[1]).collect())
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        Ok(self.predict_proba(images)?.iter().map(|p| argmax(p)).collect())
    }

    /// Penultimate (pooled) features, one row per image.
    pub fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let c = self.config.feature_dim();
        let mut out = Vec::with_capacity(images.len());
        self.run_batches(images, |feats, _| {
            for row in feats.data().chunks(c) {
                out.push(row.iter().map(|&v| v as f64).collect());
            }
        })?;
        Ok(out)
    }

    /// Real-vs-fake metrics from the fake-class probability.
    pub fn evaluate(&self, real: &[&Image], fake: &[&Image]) -> Result<DetectorMetrics> {
        ensure_input!(!real.is_empty() && !fake.is_empty(), "evaluation sets must be non-empty");
        DetectorMetrics::from_scores(&self.fake_scores(real)?, &self.fake_scores(fake)?)
    }

    /// Multi-class metrics; `sets[c]` holds the images of class `c`.
    pub fn evaluate_multiclass(&self, sets: &[&[&Image]]) -> Result<MulticlassMetrics> {
        ensure_input!(sets.len() == self.config.classes, "one image set per class required");
        let mut predicted = Vec::new();
        let mut truth = Vec::new();
        for (c, set) in sets.iter().enumerate() {
            ensure_input!(!set.is_empty(), "class {c} evaluation set is empty");
            predicted.extend(self.predict(set)?);
            truth.extend(core::iter::repeat_n(c, set.len()));
        }
        Ok(MulticlassMetrics::new(&predicted, &truth, self.config.classes))
    }
}

fn softmax(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn argmax(p: &[f64]) -> usize {
    (0..p.len()).fold(0, |b, j| if p[j] > p[b] { j } else { b })
}

/// Seeded stratified split of example indices into (train, validation).
fn split(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng::rng(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let perm = rng::permutation(&mut r, idx.len());
        let n_val = ((idx.len() as f64) * fraction).floor() as usize;
        for (rank, &p) in perm.iter().enumerate() {
            if rank < n_val {
                val.push(idx[p]);
            } else {
                train.push(idx[p]);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Trains a classifier of `labels` over `images`.
pub fn train_classifier(
    images: &[&Image],
    labels: &[usize],
    config: DetectorConfig,
    opts: &DetectorTraining,
) -> Result<(Detector, TrainingLog)> {
    opts.validate()?;
    config.validate()?;
    ensure_input!(images.len() == labels.len(), "one label per image required");
    let k = config.classes;
    let mut counts = vec![0usize; k];
    for &l in labels {
        ensure_input!(l < k, "label {l} out of range for {k} classes");
        counts[l] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        ensure_input!(n > 0, "class {c} has no training examples");
    }
    let mut model = Detector::new(config, derive_seed(opts.seed, "init"))?;
    model.check_images(images)?;
    let class_weight: Vec<f32> = counts
        .iter()
        .map(|&n| {
            if opts.class_weighting {
                (labels.len() as f64 / (k as f64 * n as f64)) as f32
            } else {
                1.0
            }
        })
        .collect();
    let (train, val) = split(labels, k, opts.validation_fraction, derive_seed(opts.seed, "split"));
    let val_usable = (0..k).all(|c| val.iter().any(|&i| labels[i] == c));
    let mut opt = Adam::new(AdamConfig::with_lr(opts.lr), model.params.len());
    let mut r = rng::rng(derive_seed(opts.seed, "batches"));
    let mut log = TrainingLog::default();
    let mut best: Option<((f64, f64), ParamSet<f32>)> = None;
    let mut since_best = 0usize;
    'epochs: for epoch in 0..opts.epochs {
        let order = rng::permutation(&mut r, train.len());
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            if opts.max_steps.is_some_and(|m| log.steps >= m) {
                break;
            }
            let idx: Vec<usize> = chunk.iter().map(|&o| train[o]).collect();
            let batch: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let ws: Vec<f32> = ys.iter().map(|&y| class_weight[y]).collect();
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, |_| true);
            let x = g.input(image::batch(&batch)?);
            let (_, logits) = model.forward(&mut g, &bound, x);
            let loss = g.softmax_cross_entropy(logits, &ys, Some(&ws));
            let v = g.value(loss).item() as f64;
            if !v.is_finite() {
                return Err(Error::Training {
                    step: log.steps,
                    message: format!("detector loss is {v}"),
                });
            }
            let mut grads = g.backward(loss);
            let grads = bound.gradients(&mut grads);
            opt.step_params(&mut model.params, &grads, |_| 1.0);
            epoch_loss += v;
            batches += 1;
            log.steps += 1;
        }
        if batches == 0 {
            break;
        }
        log.train_loss.push(epoch_loss / batches as f64);
        if !val_usable {
            continue;
        }
        let val_imgs: Vec<&Image> = val.iter().map(|&i| images[i]).collect();
        let probs = model.predict_proba(&val_imgs)?;
        let val_loss: f64 = val
            .iter()
            .zip(&probs)
            .map(|(&i, p)| -p[labels[i]].max(1e-12).ln())
            .sum::<f64>()
            / val.len() as f64;
        let score = if k == 2 {
            let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
            let l: Vec<bool> = val.iter().map(|&i| labels[i] == 1).collect();
            average_precision(&s, &l)?
        } else {
            let hits = val.iter().zip(&probs).filter(|(&i, p)| argmax(p) == labels[i]).count();
            hits as f64 / val.len() as f64
        };
        log.validation.push(score);
        let key = (score, -val_loss);
        let improved = best.as_ref().is_none_or(|(b, _)| key > *b);
        if improved {
            best = Some((key, model.params.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                break 'epochs;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    } else {
        log.best_epoch = log.train_loss.len().saturating_sub(1);
    }
    Ok((model, log))
}

/// Real (class 0) versus fake (class 1) detector.
pub fn train_detector(real: &[&Image], fake: &[&Image], opts: &DetectorTraining) -> Result<(Detector, TrainingLog)> {
    ensure_input!(!real.is_empty(), "real training set is empty");
    ensure_input!(!fake.is_empty(), "fake training set is empty");
    let r = real[0].width();
    ensure_input!(
        real.iter().chain(fake).all(|i| i.width() == r && i.height() == r),
        "training images must share one square resolution"
    );
    let images: Vec<&Image> = real.iter().chain(fake).copied().collect();
    let labels: Vec<usize> = (0..images.len()).map(|i| (i >= real.len()) as usize).collect();
    train_classifier(&images, &labels, DetectorConfig::binary(r), opts)
}

/// Softmax classifier over `sets.len()` domains; `sets[c]` holds class `c`.
pub fn train_multidomain(sets: &[&[&Image]], opts: &DetectorTraining) -> Result<(Detector, TrainingLog)> {
    ensure_input!(sets.len() >= 2, "multi-domain training needs at least two classes");
    for (c, s) in sets.iter().enumerate() {
        ensure_input!(!s.is_empty(), "class {c} training set is empty");
    }
    let r = sets[0][0].width();
    let images: Vec<&Image> = sets.iter().flat_map(|s| s.iter().copied()).collect();
    let labels: Vec<usize> = sets
        .iter()
        .enumerate()
        .flat_map(|(c, s)| core::iter::repeat_n(c, s.len()))
        .collect();
    train_classifier(&images, &labels, DetectorConfig::with_classes(r, sets.len()), opts)
}

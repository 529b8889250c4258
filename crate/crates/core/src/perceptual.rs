//! Reconstruction distance: perceptual feature distance plus a weighted pixel term.
//!
//! `D(x, y) = Σ_l ‖f_l(x) − f_l(y)‖² + λ‖x − y‖₁`
//!
//! The feature maps `f_l` come from a small convolutional classifier trained
//! once on the toy corpus attributes and then frozen.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, input_err, Result};
use crate::generator::LRELU_SLOPE;
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamSet};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub resolution: usize,
    /// Output channels of each block; block `b > 0` runs at `resolution >> b`.
    pub channels: Vec<usize>,
    /// Width of the classification head used only during training.
    pub classes: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: vec![8, 16, 32, 32],
            classes: crate::corpus::FaceAttributes::NUM_CLASSES,
        }
    }
}

impl ExtractorConfig {
    pub fn num_blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure_input!(!self.channels.is_empty(), "extractor needs at least one block");
        ensure_input!(self.channels.iter().all(|&c| c > 0), "extractor channels must be positive");
        ensure_input!(self.classes >= 1, "extractor needs at least one class");
        let shrink = 1usize << (self.channels.len() - 1);
        ensure_input!(
            self.resolution >= shrink && self.resolution % shrink == 0,
            "resolution {} cannot be halved {} times",
            self.resolution,
            self.channels.len() - 1
        );
        Ok(())
    }

    /// Feature shape `[C, H, W]` of block `b`.
    pub fn feature_shape(&self, b: usize) -> [usize; 3] {
        let r = self.resolution >> b;
        [self.channels[b], r, r]
    }

    fn template<T: Scalar>(&self, r: &mut rng::Rng) -> ParamSet<T> {
        let mut p = ParamSet::new();
        let mut c_in = 3;
        for (b, &c) in self.channels.iter().enumerate() {
            p.push(format!("b{b}.weight"), he(r, &[c, c_in, 3, 3], c_in * 9));
            p.push(format!("b{b}.bias"), Tensor::zeros(&[c]));
            c_in = c;
        }
        p.push("head.weight", he(r, &[self.classes, c_in], c_in));
        p.push("head.bias", Tensor::zeros(&[self.classes]));
        p
    }
}

fn he<T: Scalar>(r: &mut rng::Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let v: Vec<f64> = rng::normal_vec(r, n);
    Tensor::from_vec(shape, v.into_iter().map(|x| T::lit(x * std)).collect()).expect("shape")
}

/// Frozen multi-scale convolutional feature stack.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T = f32> {
    config: ExtractorConfig,
    params: ParamSet<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ExtractorTraining {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
        }
    }
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Randomly initialized extractor.
    pub fn new(config: ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = config.template(&mut rng::rng(seed));
        Ok(Self { config, params })
    }

    /// Extractor with explicit weights; names and shapes must match the layout of `config`.
    pub fn from_params(config: ExtractorConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let template: ParamSet<T> = config.template(&mut rng::rng(0));
        ensure_input!(
            template.len() == params.len(),
            "expected {} extractor tensors, got {}",
            template.len(),
            params.len()
        );
        for ((name, t), (pname, p)) in template.iter().zip(params.iter()) {
            if name != pname || t.shape() != p.shape() {
                return Err(input_err!(
                    "extractor tensor {pname} {:?} does not match expected {name} {:?}",
                    p.shape(),
                    t.shape()
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn cast<U: Scalar>(&self) -> FeatureExtractor<U> {
        FeatureExtractor {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Block outputs `0..=last` for `[N, 3, R, R]` input.
    pub fn features(&self, g: &mut Graph<T>, bound: &Bound, x: Var, last: usize) -> Vec<Var> {
        let slope = T::lit(LRELU_SLOPE);
        let mut out = Vec::with_capacity(last + 1);
        let mut h = x;
        for b in 0..=last {
            if b > 0 {
                h = g.avg_pool2x(h);
            }
            h = g.conv2d(h, bound.var(2 * b), Some(bound.var(2 * b + 1)));
            h = g.leaky_relu(h, slope);
            out.push(h);
        }
        out
    }

    fn logits(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Var {
        let nb = self.config.num_blocks();
        let feats = self.features(g, bound, x, nb - 1);
        let pooled = g.global_avg_pool(feats[nb - 1]);
        g.linear(pooled, bound.var(2 * nb), Some(bound.var(2 * nb + 1)))
    }

    /// Forward values of the requested blocks for one image.
    pub fn feature_values(&self, image: &Tensor<T>, taps: &[usize]) -> Vec<Tensor<T>> {
        let Some(&last) = taps.iter().max() else {
            return Vec::new();
        };
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let x = g.input(image.clone());
        let feats = self.features(&mut g, &bound, x, last);
        taps.iter().map(|&t| g.value(feats[t]).clone()).collect()
    }
}

impl FeatureExtractor<f32> {
    /// Trains the stack as a classifier of `labels`, then returns it for frozen use.
    pub fn train(config: ExtractorConfig, images: &[Image], labels: &[usize], opts: &ExtractorTraining) -> Result<Self> {
        ensure_input!(!images.is_empty(), "extractor training set is empty");
        ensure_input!(images.len() == labels.len(), "one label per image required");
        ensure_input!(opts.batch_size >= 1, "batch_size must be at least 1");
        for img in images {
            ensure_input!(
                img.width() == config.resolution && img.height() == config.resolution,
                "extractor images must be {0}x{0}",
                config.resolution
            );
        }
        ensure_input!(
            labels.iter().all(|&l| l < config.classes),
            "labels must be below {}",
            config.classes
        );
        let mut model = Self::new(config, rng::derive_seed(opts.seed, "init"))?;
        let mut opt = Adam::new(AdamConfig::with_lr(opts.lr), model.params.len());
        let mut r = rng::rng(rng::derive_seed(opts.seed, "batches"));
        for step in 0..opts.steps {
            let idx: Vec<usize> = (0..opts.batch_size).map(|_| rng::below(&mut r, images.len())).collect();
            let picks: Vec<&Image> = idx.iter().map(|&i| &images[i]).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, |_| true);
            let x = g.input(crate::image::batch(&picks)?);
            let logits = model.logits(&mut g, &bound, x);
            let loss = g.softmax_cross_entropy(logits, &ys, None);
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(crate::Error::Training {
                    step,
                    message: format!("extractor loss is {v}"),
                });
            }
            let mut grads = g.backward(loss);
            let grads = bound.gradients(&mut grads);
            opt.step_params(&mut model.params, &grads, |_| 1.0);
        }
        Ok(model)
    }

    /// Fraction of `images` whose predicted class equals the label.
    pub fn accuracy(&self, images: &[Image], labels: &[usize]) -> Result<f64> {
        ensure_input!(!images.is_empty() && images.len() == labels.len(), "need one label per image");
        let mut correct = 0usize;
        for (chunk, ys) in images.chunks(32).zip(labels.chunks(32)) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, |_| false);
            let x = g.input(crate::image::batch(&refs)?);
            let logits = self.logits(&mut g, &bound, x);
            let k = self.config.classes;
            for (row, &y) in g.value(logits).data().chunks(k).zip(ys) {
                let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                correct += (best == y) as usize;
            }
        }
        Ok(correct as f64 / images.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelLoss {
    L1,
    /// Squared error.
    L2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Plain sums over feature entries and pixels.
    #[default]
    Sum,
    /// Each layer's sum and the pixel sum divided by their element counts.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceConfig {
    /// Include the feature term.
    pub perceptual: bool,
    /// Weight of the pixel term.
    pub lambda: f64,
    pub pixel: PixelLoss,
    pub tap_layers: Vec<usize>,
    #[serde(default)]
    pub reduction: Reduction,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        Self::combined()
    }
}

impl DistanceConfig {
    /// Feature distance over all four blocks plus `5·L1`.
    pub fn combined() -> Self {
        Self {
            perceptual: true,
            lambda: 5.0,
            pixel: PixelLoss::L1,
            tap_layers: vec![0, 1, 2, 3],
            reduction: Reduction::Sum,
        }
    }

    pub fn perceptual_only() -> Self {
        Self {
            lambda: 0.0,
            ..Self::combined()
        }
    }

    pub fn l1_only() -> Self {
        Self {
            perceptual: false,
            lambda: 1.0,
            ..Self::combined()
        }
    }

    pub fn l2_only() -> Self {
        Self {
            pixel: PixelLoss::L2,
            ..Self::l1_only()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_input!(
            self.lambda.is_finite() && self.lambda >= 0.0,
            "lambda must be finite and non-negative"
        );
        ensure_input!(!self.tap_layers.is_empty(), "tap_layers must not be empty");
        ensure_input!(
            self.perceptual || self.lambda > 0.0,
            "distance has no active term"
        );
        Ok(())
    }

    fn check_taps(&self, extractor: &ExtractorConfig) -> Result<()> {
        if let Some(&t) = self.tap_layers.iter().find(|&&t| t >= extractor.num_blocks()) {
            return Err(input_err!(
                "tap layer {t} out of range for a {}-block extractor",
                extractor.num_blocks()
            ));
        }
        Ok(())
    }

    /// `perceptual + λ·pixel`, with the feature term dropped when disabled.
    pub fn combine(&self, perceptual: f64, pixel: f64) -> f64 {
        let p = if self.perceptual { perceptual } else { 0.0 };
        p + self.lambda * pixel
    }
}

fn check_pair(x: &Image, y: &Image) -> Result<()> {
    ensure_input!(
        x.width() == y.width() && x.height() == y.height(),
        "image shapes differ: {}x{} vs {}x{}",
        x.width(),
        x.height(),
        y.width(),
        y.height()
    );
    Ok(())
}

fn reduce(total: f64, count: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / count as f64,
    }
}

/// `Σ_l ‖f_l(x) − f_l(y)‖²` over the configured tap layers.
pub fn perceptual_distance(x: &Image, y: &Image, extractor: &FeatureExtractor, config: &DistanceConfig) -> Result<f64> {
    check_pair(x, y)?;
    config.check_taps(extractor.config())?;
    let shape = [1, 3, x.height(), x.width()];
    let fx = extractor.feature_values(&x.tensor().clone().reshaped(&shape)?, &config.tap_layers);
    let fy = extractor.feature_values(&y.tensor().clone().reshaped(&shape)?, &config.tap_layers);
    Ok(fx
        .iter()
        .zip(&fy)
        .map(|(a, b)| {
            let s: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&p, &q)| {
                    let d = p as f64 - q as f64;
                    d * d
                })
                .sum();
            reduce(s, a.len(), config.reduction)
        })
        .sum())
}

/// The unweighted pixel term: `‖x − y‖₁` or `‖x − y‖²`.
pub fn pixel_distance(x: &Image, y: &Image, config: &DistanceConfig) -> Result<f64> {
    check_pair(x, y)?;
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            match config.pixel {
                PixelLoss::L1 => d.abs(),
                PixelLoss::L2 => d * d,
            }
        })
        .sum();
    Ok(reduce(s, x.data().len(), config.reduction))
}

pub fn combined_distance(x: &Image, y: &Image, extractor: &FeatureExtractor, config: &DistanceConfig) -> Result<f64> {
    config.validate()?;
    let p = if config.perceptual {
        perceptual_distance(x, y, extractor, config)?
    } else {
        0.0
    };
    Ok(config.combine(p, pixel_distance(x, y, config)?))
}

/// A fixed target with its features precomputed, for repeated differentiable evaluation.
pub struct DistanceTarget<'a, T> {
    extractor: &'a FeatureExtractor<T>,
    config: DistanceConfig,
    target: Tensor<T>,
    features: Vec<Tensor<T>>,
}

impl<'a, T: Scalar> DistanceTarget<'a, T> {
    /// `target` is `[1, 3, R, R]`.
    pub fn new(extractor: &'a FeatureExtractor<T>, config: &DistanceConfig, target: Tensor<T>) -> Result<Self> {
        config.validate()?;
        ensure_input!(
            target.shape().len() == 4 && target.shape()[0] == 1 && target.shape()[1] == 3,
            "distance target must be [1, 3, H, W], got {:?}",
            target.shape()
        );
        let features = if config.perceptual {
            config.check_taps(extractor.config())?;
            ensure_input!(
                target.shape()[2] == extractor.config().resolution && target.shape()[3] == extractor.config().resolution,
                "target resolution differs from extractor resolution {}",
                extractor.config().resolution
            );
            extractor.feature_values(&target, &config.tap_layers)
        } else {
            Vec::new()
        };
        Ok(Self {
            extractor,
            config: config.clone(),
            target,
            features,
        })
    }

    pub fn from_image(extractor: &'a FeatureExtractor<T>, config: &DistanceConfig, target: &Image) -> Result<Self> {
        let t = target
            .tensor()
            .cast::<T>()
            .reshaped(&[1, 3, target.height(), target.width()])?;
        Self::new(extractor, config, t)
    }

    pub fn target(&self) -> &Tensor<T> {
        &self.target
    }

    pub fn config(&self) -> &DistanceConfig {
        &self.config
    }

    /// Scalar distance between the `[1, 3, R, R]` node `x` and the target.
    pub fn loss(&self, g: &mut Graph<T>, x: Var) -> Var {
        let cfg = &self.config;
        let t = g.input(self.target.clone());
        let diff = g.sub(x, t);
        let pix = match cfg.pixel {
            PixelLoss::L1 => g.abs(diff),
            PixelLoss::L2 => g.square(diff),
        };
        let mut total = g.sum(pix);
        if cfg.reduction == Reduction::Mean {
            let n = self.target.len();
            total = g.scale(total, T::lit(1.0 / n as f64));
        }
        total = g.scale(total, T::lit(cfg.lambda));
        if cfg.perceptual {
            let last = *cfg.tap_layers.iter().max().expect("non-empty");
            let bound = self.extractor.params().bind(g, |_| false);
            let feats = self.extractor.features(g, &bound, x, last);
            for (&tap, ft) in cfg.tap_layers.iter().zip(&self.features) {
                let fv = g.input(ft.clone());
                let d = g.sub(feats[tap], fv);
                let sq = g.square(d);
                let mut s = g.sum(sq);
                if cfg.reduction == Reduction::Mean {
                    s = g.scale(s, T::lit(1.0 / ft.len() as f64));
                }
                total = g.add(total, s);
            }
        }
        total
    }

    /// Value of the distance for a `[1, 3, R, R]` tensor.
    pub fn value(&self, x: &Tensor<T>) -> T {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let l = self.loss(&mut g, xv);
        g.value(l).item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::check_grad;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn random_image(seed: u64, r: usize) -> Image {
        let mut g = rng::rng(seed);
        let v: Vec<f32> = (0..3 * r * r).map(|_| (rng::uniform(&mut g) * 2.0 - 1.0) as f32).collect();
        Image::from_tensor(Tensor::from_vec(&[3, r, r], v).unwrap()).unwrap()
    }

    fn small_extractor() -> FeatureExtractor {
        FeatureExtractor::new(
            ExtractorConfig {
                resolution: 8,
                channels: vec![4, 4, 4, 4],
                classes: 2,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn lambda_weighting_is_additive() {
        let cfg = DistanceConfig::combined();
        assert_eq!(cfg.lambda, 5.0);
        assert_relative_eq!(cfg.combine(0.2, 0.1), 0.7, epsilon = 1e-12);
        assert_eq!(DistanceConfig::l1_only().combine(0.2, 0.1), 0.1);
    }

    #[test]
    fn hand_set_single_tap_extractor() {
        // One 1-channel block on 4x4 input: centre tap 1 on red, bias 0.1.
        let config = ExtractorConfig {
            resolution: 4,
            channels: vec![1],
            classes: 1,
        };
        let mut w = vec![0.0f32; 27];
        w[4] = 1.0;
        let mut p = ParamSet::new();
        p.push("b0.weight", Tensor::from_vec(&[1, 3, 3, 3], w).unwrap());
        p.push("b0.bias", Tensor::from_vec(&[1], vec![0.1]).unwrap());
        p.push("head.weight", Tensor::zeros(&[1, 1]));
        p.push("head.bias", Tensor::zeros(&[1]));
        let ext = FeatureExtractor::from_params(config, p).unwrap();
        let x = random_image(1, 4);
        let y = random_image(2, 4);
        let lrelu = |v: f64| if v >= 0.0 { v } else { 0.2 * v };
        let mut expected = 0.0;
        for i in 0..16 {
            let a = lrelu(x.data()[i] as f64 + 0.1);
            let b = lrelu(y.data()[i] as f64 + 0.1);
            expected += (a - b) * (a - b);
        }
        let cfg = DistanceConfig {
            tap_layers: vec![0],
            ..DistanceConfig::perceptual_only()
        };
        let got = perceptual_distance(&x, &y, &ext, &cfg).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn gradient_wrt_image_matches_finite_differences() {
        let ext = small_extractor().cast::<f64>();
        let cfg = DistanceConfig::combined();
        let target = random_image(3, 8).tensor().cast::<f64>().reshaped(&[1, 3, 8, 8]).unwrap();
        let dt = DistanceTarget::new(&ext, &cfg, target).unwrap();
        let x = random_image(4, 8).tensor().cast::<f64>().reshaped(&[1, 3, 8, 8]).unwrap();
        let err = check_grad(&[x], |g, v| dt.loss(g, v[0]));
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn graph_and_value_paths_agree() {
        let ext = small_extractor();
        for cfg in [
            DistanceConfig::combined(),
            DistanceConfig::l2_only(),
            DistanceConfig {
                reduction: Reduction::Mean,
                ..DistanceConfig::combined()
            },
        ] {
            let (x, y) = (random_image(5, 8), random_image(6, 8));
            let dt = DistanceTarget::from_image(&ext, &cfg, &y).unwrap();
            let via_graph = dt.value(&x.tensor().clone().reshaped(&[1, 3, 8, 8]).unwrap()) as f64;
            let direct = combined_distance(&x, &y, &ext, &cfg).unwrap();
            assert_relative_eq!(via_graph, direct, max_relative = 1e-4);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let ext = small_extractor();
        let cfg = DistanceConfig::combined();
        assert!(combined_distance(&random_image(1, 8), &random_image(1, 4), &ext, &cfg).is_err());
        let bad_tap = DistanceConfig {
            tap_layers: vec![7],
            ..cfg.clone()
        };
        assert!(combined_distance(&random_image(1, 8), &random_image(2, 8), &ext, &bad_tap).is_err());
        let negative = DistanceConfig { lambda: -1.0, ..cfg };
        assert!(negative.validate().is_err());
    }

    #[test]
    fn training_learns_separable_classes() {
        let imgs: Vec<Image> = (0..8)
            .map(|i| Image::filled(8, 8, if i % 2 == 0 { [-0.8; 3] } else { [0.8; 3] }))
            .collect();
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let config = ExtractorConfig {
            resolution: 8,
            channels: vec![4, 4],
            classes: 2,
        };
        let opts = ExtractorTraining {
            steps: 60,
            batch_size: 4,
            ..ExtractorTraining::default()
        };
        let ext = FeatureExtractor::train(config, &imgs, &labels, &opts).unwrap();
        assert_eq!(ext.accuracy(&imgs, &labels).unwrap(), 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn distance_axioms(a in any::<u64>(), b in any::<u64>(), half in 0.1f64..4.0) {
            let ext = small_extractor();
            let (x, y) = (random_image(a, 8), random_image(b, 8));
            let cfg = DistanceConfig::combined();
            prop_assert_eq!(combined_distance(&x, &x, &ext, &cfg).unwrap(), 0.0);
            let d = combined_distance(&x, &y, &ext, &cfg).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, combined_distance(&y, &x, &ext, &cfg).unwrap());
            let lo = DistanceConfig { lambda: half, ..cfg.clone() };
            let hi = DistanceConfig { lambda: 2.0 * half, ..cfg.clone() };
            let l1 = pixel_distance(&x, &y, &cfg).unwrap();
            let gap = combined_distance(&x, &y, &ext, &hi).unwrap() - combined_distance(&x, &y, &ext, &lo).unwrap();
            prop_assert!((gap - half * l1).abs() <= 1e-9 * (1.0 + d.abs() + half * l1));
        }
    }
}

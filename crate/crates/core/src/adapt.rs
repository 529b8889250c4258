//! One-shot adaptation: project a target onto the generator's output
//! manifold by optimizing the style vector, then shift the generator's
//! synthesis weights toward the target with that style held fixed.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Error, Result};
use crate::generator::{Generator, LatentCode, NoiseInput, StyleVector, SYNTHESIS_PREFIX};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::optim::{Adam, AdamConfig};
use crate::params::Bound;
use crate::perceptual::{DistanceConfig, DistanceTarget, FeatureExtractor};
use crate::rng::{derive_index, derive_seed};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleInit {
    #[default]
    Zero,
    /// Average of `f(z)` over 256 seeded latents.
    MeanStyle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub max_iters: usize,
    pub lr: f64,
    /// Stop when the best loss improves by less than this fraction over `window` iterations.
    pub tolerance: f64,
    pub window: usize,
    #[serde(default)]
    pub init: StyleInit,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            lr: 0.01,
            tolerance: 1e-5,
            window: 50,
            init: StyleInit::Zero,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_input!(self.max_iters >= 1, "projection max_iters must be at least 1");
        ensure_input!(self.lr > 0.0, "projection lr must be positive");
        ensure_input!(self.tolerance >= 0.0, "projection tolerance must be non-negative");
        ensure_input!(self.window >= 1, "projection window must be at least 1");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub max_iters: usize,
    pub lr: f64,
    /// Parameter-name prefixes that are updated; everything else stays frozen.
    pub groups: Vec<String>,
    pub tolerance: f64,
    pub window: usize,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            lr: 0.001,
            groups: vec![SYNTHESIS_PREFIX.to_string()],
            tolerance: 1e-5,
            window: 50,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_input!(self.max_iters >= 1, "shift max_iters must be at least 1");
        ensure_input!(self.lr > 0.0, "shift lr must be positive");
        ensure_input!(!self.groups.is_empty(), "shift needs at least one parameter group");
        ensure_input!(self.tolerance >= 0.0, "shift tolerance must be non-negative");
        ensure_input!(self.window >= 1, "shift window must be at least 1");
        Ok(())
    }

    pub fn selects(&self, name: &str) -> bool {
        self.groups.iter().any(|p| name.starts_with(p.as_str()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub style: StyleVector,
    pub noise: NoiseInput,
    /// Loss of every evaluated iterate, starting from the initial style.
    pub trace: Vec<f64>,
    pub best_loss: f64,
}

#[derive(Clone, Debug)]
pub struct Shifted {
    pub model: Generator,
    pub trace: Vec<f64>,
    pub best_loss: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptationResult {
    pub style: StyleVector,
    pub model: Generator,
    pub noise: NoiseInput,
    pub projection_trace: Vec<f64>,
    pub shift_trace: Vec<f64>,
    pub projection_loss: f64,
    pub shift_loss: f64,
    pub target_sha256: String,
    pub seed: u64,
}

/// Distance between `g(style, noise)` and the target, as a graph node.
pub fn reconstruction<T: Scalar>(
    g: &mut Graph<T>,
    model: &Generator<T>,
    bound: &Bound,
    style: Var,
    noise: &NoiseInput<T>,
    target: &DistanceTarget<T>,
) -> Var {
    let nv = model.noise_inputs(g, &[noise]);
    let img = model.synthesis_graph(g, bound, style, &nv, None);
    target.loss(g, img)
}

/// Value of the reconstruction distance for a fixed model, style and noise.
pub fn reconstruction_loss<T: Scalar>(
    model: &Generator<T>,
    style: &StyleVector<T>,
    noise: &NoiseInput<T>,
    target: &DistanceTarget<T>,
) -> Result<f64> {
    model.check_style(style)?;
    model.check_noise(noise)?;
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g, |_| false);
    let s = g.input(style.to_tensor());
    let l = reconstruction(&mut g, model, &bound, s, noise, target);
    Ok(g.value(l).item().as_f64())
}

fn check_target(model: &Generator, target: &Image) -> Result<()> {
    let r = model.resolution();
    ensure_input!(
        target.width() == r && target.height() == r,
        "target is {}x{}, model resolution is {r}",
        target.width(),
        target.height()
    );
    ensure_input!(target.in_range(), "target pixels must lie in [-1, 1]");
    Ok(())
}

/// Tracks the running minimum and decides when progress has stalled.
struct Progress {
    best: Vec<f64>,
    tolerance: f64,
    window: usize,
}

impl Progress {
    fn new(tolerance: f64, window: usize) -> Self {
        Self {
            best: Vec::new(),
            tolerance,
            window,
        }
    }

    /// Records `loss`; returns true if it is a new best.
    fn record(&mut self, loss: f64) -> bool {
        let prev = self.best.last().copied().unwrap_or(f64::INFINITY);
        self.best.push(prev.min(loss));
        loss < prev
    }

    fn current(&self) -> f64 {
        *self.best.last().expect("recorded")
    }

    fn stalled(&self) -> bool {
        let n = self.best.len();
        if self.current() == 0.0 {
            return true;
        }
        if n <= self.window {
            return false;
        }
        let old = self.best[n - 1 - self.window];
        (old - self.current()) / old.abs() < self.tolerance
    }
}

fn initial_style(model: &Generator, init: StyleInit, seed: u64) -> Result<StyleVector> {
    let (layers, dim) = (model.num_layers(), model.style_dim());
    match init {
        StyleInit::Zero => Ok(StyleVector::zeros(layers, dim)),
        StyleInit::MeanStyle => {
            let root = derive_seed(seed, "mean-style");
            let zs: Vec<LatentCode> = (0..256).map(|i| LatentCode::sample(dim, derive_index(root, i))).collect();
            let styles = model.map_batch(&zs)?;
            let mut mean = vec![0.0f32; layers * dim];
            for s in &styles {
                for (m, v) in mean.iter_mut().zip(s.values()) {
                    *m += v / 256.0;
                }
            }
            StyleVector::from_values(layers, dim, mean)
        }
    }
}

/// Finds the style vector whose image is nearest the target under `dist`.
///
/// Noise is drawn once from `seed` and held fixed; the model is not modified.
pub fn project(
    model: &Generator,
    target: &Image,
    extractor: &FeatureExtractor,
    dist: &DistanceConfig,
    config: &ProjectionConfig,
    seed: u64,
) -> Result<Projection> {
    config.validate()?;
    check_target(model, target)?;
    let dt = DistanceTarget::from_image(extractor, dist, target)?;
    let noise = NoiseInput::sample(model.config(), seed);
    let mut style = initial_style(model, config.init, seed)?;
    let mut best = style.clone();
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr), 1);
    let mut progress = Progress::new(config.tolerance, config.window);
    let mut trace = Vec::new();
    for it in 0..config.max_iters {
        let mut g = Graph::new();
        let bound = model.params().bind(&mut g, |_| false);
        let s = g.param(style.to_tensor());
        let loss = reconstruction(&mut g, model, &bound, s, &noise, &dt);
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Optimization {
                iteration: it,
                message: alloc::format!("projection loss is {value}"),
            });
        }
        trace.push(value);
        if progress.record(value) {
            best = style.clone();
        }
        if progress.stalled() || it + 1 == config.max_iters {
            break;
        }
        let grads = g.backward(loss);
        let grad = grads.get(s).expect("style gradient");
        opt.begin_step();
        opt.update(0, style.values_mut(), grad.data(), 1.0);
    }
    Ok(Projection {
        style: best,
        noise,
        best_loss: progress.current(),
        trace,
    })
}

/// Updates the selected weight groups so that `g(style, noise)` approaches the target.
///
/// Returns a new model holding the best weights seen; `model` is untouched.
pub fn shift(
    model: &Generator,
    style: &StyleVector,
    noise: &NoiseInput,
    target: &Image,
    extractor: &FeatureExtractor,
    dist: &DistanceConfig,
    config: &ShiftConfig,
) -> Result<Shifted> {
    config.validate()?;
    check_target(model, target)?;
    model.check_style(style)?;
    model.check_noise(noise)?;
    for group in &config.groups {
        ensure_input!(
            model.params().names().iter().any(|n| n.starts_with(group.as_str())),
            "parameter group {group:?} matches no weights"
        );
    }
    let dt = DistanceTarget::from_image(extractor, dist, target)?;
    let mut current = model.clone();
    let mut best = model.params().clone();
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr), model.params().len());
    let mut progress = Progress::new(config.tolerance, config.window);
    let mut trace = Vec::new();
    for it in 0..config.max_iters {
        let mut g = Graph::new();
        let bound = current.params().bind(&mut g, |n| config.selects(n));
        let s = g.input(style.to_tensor());
        let loss = reconstruction(&mut g, &current, &bound, s, noise, &dt);
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Optimization {
                iteration: it,
                message: alloc::format!("shift loss is {value}"),
            });
        }
        trace.push(value);
        if progress.record(value) {
            best = current.params().clone();
        }
        if progress.stalled() || it + 1 == config.max_iters {
            break;
        }
        let mut grads = g.backward(loss);
        let grads = bound.gradients(&mut grads);
        opt.step_params(current.params_mut(), &grads, |_| 1.0);
    }
    *current.params_mut() = best;
    current.set_version(alloc::format!("{}+shift", model.version()));
    Ok(Shifted {
        model: current,
        best_loss: progress.current(),
        trace,
    })
}

/// Projection followed by shifting with the same noise.
pub fn adapt_one_shot(
    model: &Generator,
    target: &Image,
    extractor: &FeatureExtractor,
    dist: &DistanceConfig,
    projection: &ProjectionConfig,
    shifting: &ShiftConfig,
    seed: u64,
) -> Result<AdaptationResult> {
    let p = project(model, target, extractor, dist, projection, seed)?;
    let s = shift(model, &p.style, &p.noise, target, extractor, dist, shifting)?;
    Ok(AdaptationResult {
        style: p.style,
        model: s.model,
        noise: p.noise,
        projection_trace: p.trace,
        shift_trace: s.trace,
        projection_loss: p.best_loss,
        shift_loss: s.best_loss,
        target_sha256: target.sha256(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use crate::graph::tests::check_grad;
    use crate::perceptual::ExtractorConfig;
    use crate::tensor::Tensor;

    fn mini() -> (Generator, FeatureExtractor) {
        let g = Generator::new(GeneratorConfig::for_resolution(8, 8), 11).unwrap();
        let e = FeatureExtractor::new(
            ExtractorConfig {
                resolution: 8,
                channels: vec![4, 4, 4, 4],
                classes: 2,
            },
            12,
        )
        .unwrap();
        (g, e)
    }

    fn quick() -> ProjectionConfig {
        ProjectionConfig {
            max_iters: 200,
            ..ProjectionConfig::default()
        }
    }

    #[test]
    fn zero_style_target_is_already_optimal() {
        let (g, e) = mini();
        let noise = NoiseInput::sample(g.config(), 5);
        let target = g.synthesize(&StyleVector::zeros(g.num_layers(), 8), &noise).unwrap();
        let dist = DistanceConfig::combined();
        let p = project(&g, &target, &e, &dist, &quick(), 5).unwrap();
        assert_eq!(p.trace[0], 0.0);
        assert_eq!(p.trace.len(), 1);
        assert!(p.style.values().iter().all(|&v| v == 0.0));
        let r = adapt_one_shot(&g, &target, &e, &dist, &quick(), &ShiftConfig::default(), 5).unwrap();
        assert_eq!(r.model.params().max_abs_diff(g.params()), 0.0);
        assert_eq!(r.shift_trace, vec![0.0]);
    }

    #[test]
    fn projection_leaves_model_and_recovers_in_manifold_target() {
        let (g, e) = mini();
        let before = g.params().clone();
        let w = g.map(&LatentCode::sample(8, 3)).unwrap();
        let noise = NoiseInput::sample(g.config(), 9);
        let target = g.synthesize(&w, &noise).unwrap();
        let p = project(&g, &target, &e, &DistanceConfig::combined(), &ProjectionConfig::default(), 9).unwrap();
        assert_eq!(g.params(), &before);
        assert!(p.best_loss <= 0.1 * p.trace[0], "{} vs {}", p.best_loss, p.trace[0]);
        let mut running = f64::INFINITY;
        for &l in &p.trace {
            running = running.min(l);
        }
        assert_eq!(running, p.best_loss);
    }

    #[test]
    fn shift_touches_only_selected_groups() {
        let (g, e) = mini();
        let target = Image::filled(8, 8, [0.5, -0.2, 0.1]);
        let dist = DistanceConfig::combined();
        let p = project(&g, &target, &e, &dist, &quick(), 1).unwrap();
        let cfg = ShiftConfig {
            max_iters: 40,
            ..ShiftConfig::default()
        };
        let s = shift(&g, &p.style, &p.noise, &target, &e, &dist, &cfg).unwrap();
        assert!(s.best_loss < s.trace[0]);
        for (name, t) in s.model.params().iter() {
            let orig = g.params().get(name).unwrap();
            if name.starts_with(SYNTHESIS_PREFIX) {
                continue;
            }
            assert_eq!(t, orig, "{name} changed");
        }
        assert!(s.model.params().max_abs_diff(g.params()) > 0.0);
        let narrow = ShiftConfig {
            groups: vec!["synthesis.to_rgb".into()],
            ..cfg.clone()
        };
        let s2 = shift(&g, &p.style, &p.noise, &target, &e, &dist, &narrow).unwrap();
        for (name, t) in s2.model.params().iter() {
            if !name.starts_with("synthesis.to_rgb") {
                assert_eq!(t, g.params().get(name).unwrap(), "{name} changed");
            }
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let (g, e) = mini();
        let dist = DistanceConfig::combined();
        let big = Image::filled(16, 16, [0.0; 3]);
        assert!(matches!(project(&g, &big, &e, &dist, &quick(), 0), Err(Error::Input(_))));
        let target = Image::filled(8, 8, [0.0; 3]);
        let wrong = StyleVector::zeros(g.num_layers() + 2, 8);
        let noise = NoiseInput::sample(g.config(), 0);
        assert!(shift(&g, &wrong, &noise, &target, &e, &dist, &ShiftConfig::default()).is_err());
        let none = ShiftConfig {
            groups: vec!["nothing.".into()],
            ..ShiftConfig::default()
        };
        let s = StyleVector::zeros(g.num_layers(), 8);
        assert!(shift(&g, &s, &noise, &target, &e, &dist, &none).is_err());
    }

    #[test]
    fn reconstruction_gradient_matches_finite_differences() {
        let (g, e) = mini();
        let g64 = g.cast::<f64>();
        let e64 = e.cast::<f64>();
        let target = Image::filled(8, 8, [0.3, -0.1, 0.2]);
        let dt = DistanceTarget::from_image(&e64, &DistanceConfig::combined(), &target).unwrap();
        let noise = NoiseInput::<f32>::sample(g.config(), 2).cast::<f64>();
        let s0: Tensor<f64> = g.map(&LatentCode::sample(8, 4)).unwrap().cast::<f64>().to_tensor();
        let err = check_grad(&[s0], |gr, v| {
            let bound = g64.params().bind(gr, |_| false);
            reconstruction(gr, &g64, &bound, v[0], &noise, &dt)
        });
        assert!(err < 1e-3, "relative error {err}");
    }
}

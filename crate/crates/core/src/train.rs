//! Adversarial training of the generator on an image corpus.
//!
//! Losses are the non-saturating logistic pair with an R1 penalty on real
//! images. The penalty gradient needs a Hessian-vector product of the
//! critic; it is obtained from first-order passes only, using
//! `∇θ (v·∇x D) ≈ ∇θ [D(x + δu) − D(x − δu)] · |v| / 2δ` with `v = ∇x D(x)`
//! held fixed and `u = v / |v|`.

use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{ensure_input, Error, Result};
use crate::generator::{Generator, GeneratorConfig, LatentCode, NoiseInput, MAPPING_PREFIX};
use crate::graph::Graph;
use crate::image::{self, Image};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, derive_index, derive_seed};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Learning-rate multiplier for the mapping network.
    pub mapping_lr_mult: f64,
    pub r1_gamma: f64,
    /// Apply the R1 term every this many critic steps (scaled up to compensate).
    pub r1_interval: usize,
    /// Finite-difference step, in pixel units, for the R1 Hessian-vector product.
    pub r1_delta: f64,
    /// Half-life, in generated images, of the exponential moving average of
    /// generator weights that is returned and checkpointed. `0` disables it.
    #[serde(default)]
    pub ema_half_life: f64,
    /// Steps between observer checkpoints.
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Critic architecture; derived from the generator resolution when absent.
    #[serde(default)]
    pub discriminator: Option<DiscriminatorConfig>,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            lr: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            mapping_lr_mult: 0.1,
            r1_gamma: 0.5,
            r1_interval: 4,
            r1_delta: 1e-2,
            ema_half_life: 1000.0,
            steps_per_epoch: 250,
            seed: 0,
            discriminator: None,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_input!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure_input!(self.lr > 0.0, "lr must be positive");
        ensure_input!(self.r1_interval >= 1, "r1_interval must be at least 1");
        ensure_input!(self.r1_gamma >= 0.0, "r1_gamma must be non-negative");
        ensure_input!(self.r1_delta > 0.0, "r1_delta must be positive");
        ensure_input!(
            self.ema_half_life.is_finite() && self.ema_half_life >= 0.0,
            "ema_half_life must be a non-negative number"
        );
        ensure_input!(self.steps_per_epoch >= 1, "steps_per_epoch must be at least 1");
        Ok(())
    }
}

/// Per-step loss traces.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub generator_loss: Vec<f64>,
    pub critic_loss: Vec<f64>,
    pub r1_penalty: Vec<f64>,
}

/// Hook called at epoch boundaries, typically to write a checkpoint.
pub trait TrainObserver {
    fn on_epoch(&mut self, epoch: usize, step: usize, model: &Generator) -> Result<()>;
}

pub struct NoObserver;

impl TrainObserver for NoObserver {
    fn on_epoch(&mut self, _: usize, _: usize, _: &Generator) -> Result<()> {
        Ok(())
    }
}

fn check_corpus(images: &[Image], resolution: usize) -> Result<()> {
    ensure_input!(!images.is_empty(), "training corpus is empty");
    for (i, img) in images.iter().enumerate() {
        ensure_input!(
            img.width() == resolution && img.height() == resolution,
            "corpus image {i} is {}x{}, generator resolution is {resolution}",
            img.width(),
            img.height()
        );
    }
    Ok(())
}

/// Trains a freshly initialized generator on `corpus`.
pub fn train_base(
    corpus: &[Image],
    generator: GeneratorConfig,
    config: &GanConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Generator, TrainReport)> {
    generator.validate()?;
    let gen = Generator::new(generator, derive_seed(config.seed, "init-generator"))?;
    let (mut out, report) = run(gen, corpus, config, observer)?;
    out.set_version("base");
    Ok((out, report))
}

/// Continues adversarial training of `model` on `images` with a fresh critic.
pub fn fine_tune(
    model: &Generator,
    images: &[Image],
    config: &GanConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Generator, TrainReport)> {
    let (mut out, report) = run(model.clone(), images, config, observer)?;
    out.set_version(alloc::format!("{}+finetune", model.version()));
    Ok((out, report))
}

fn diverged(step: usize, what: &str, v: f64) -> Error {
    Error::Training {
        step,
        message: alloc::format!("{what} loss is {v}"),
    }
}

fn run(
    mut gen: Generator,
    images: &[Image],
    config: &GanConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Generator, TrainReport)> {
    config.validate()?;
    let gcfg: GeneratorConfig = gen.config().clone();
    check_corpus(images, gcfg.resolution)?;
    let dcfg = config
        .discriminator
        .clone()
        .unwrap_or_else(|| DiscriminatorConfig::for_resolution(gcfg.resolution));
    ensure_input!(
        dcfg.resolution == gcfg.resolution,
        "critic resolution {} differs from generator resolution {}",
        dcfg.resolution,
        gcfg.resolution
    );
    let mut critic = Discriminator::<f32>::new(dcfg, derive_seed(config.seed, "init-critic"))?;
    let adam = AdamConfig {
        lr: config.lr,
        beta1: config.beta1,
        beta2: config.beta2,
        eps: 1e-8,
    };
    let mut opt_g = Adam::new(adam, gen.params().len());
    let mut opt_d = Adam::new(adam, critic.params().len());
    let mut r = rng::rng(derive_seed(config.seed, "batches"));
    let latent_root = derive_seed(config.seed, "latents");
    let noise_root = derive_seed(config.seed, "noise");
    let mut draw = 0u64;
    let b = config.batch_size;
    let d = gcfg.style_dim;
    let layers = gcfg.num_layers();
    let mut report = TrainReport::default();
    let ema_beta = if config.ema_half_life > 0.0 {
        0.5f32.powf((b as f64 / config.ema_half_life) as f32)
    } else {
        0.0
    };
    let mut ema = gen.clone();

    let next_inputs = |draw: &mut u64| -> (Tensor<f32>, Vec<NoiseInput>) {
        let mut z = Vec::with_capacity(b * d);
        let mut noises = Vec::with_capacity(b);
        for _ in 0..b {
            z.extend(LatentCode::<f32>::sample(d, derive_index(latent_root, *draw)).z);
            noises.push(NoiseInput::sample(&gcfg, derive_index(noise_root, *draw)));
            *draw += 1;
        }
        (Tensor::from_vec(&[b, d], z).expect("shape"), noises)
    };

    for step in 0..config.steps {
        // Critic update.
        let picks: Vec<&Image> = (0..b).map(|_| &images[rng::below(&mut r, images.len())]).collect();
        let reals: Tensor<f32> = image::batch(&picks)?;
        let (z, noises) = next_inputs(&mut draw);
        let fakes = {
            let mut g = Graph::new();
            let gb = gen.params().bind(&mut g, |_| false);
            let zv = g.input(z);
            let w = gen.mapping_graph(&mut g, &gb, zv);
            let s = g.repeat(w, layers);
            let nv = gen.noise_inputs(&mut g, &noises.iter().collect::<Vec<_>>());
            let img = gen.synthesis_graph(&mut g, &gb, s, &nv, None);
            g.value(img).clone()
        };
        let r1_step = config.r1_gamma > 0.0 && step % config.r1_interval == 0;
        let probe = if r1_step {
            let mut g = Graph::new();
            let db = critic.params().bind(&mut g, |_| false);
            let x = g.param(reals.clone());
            let out = critic.forward(&mut g, &db, x);
            let total = g.sum(out);
            let grads = g.backward(total);
            Some(grads.get(x).cloned().expect("input gradient"))
        } else {
            None
        };
        let mut g = Graph::new();
        let db = critic.params().bind(&mut g, |_| true);
        let rv = g.input(reals.clone());
        let fv = g.input(fakes);
        let dr = critic.forward(&mut g, &db, rv);
        let df = critic.forward(&mut g, &db, fv);
        let lf = g.softplus(df);
        let lf = g.mean(lf);
        let nr = g.scale(dr, -1.0);
        let lr = g.softplus(nr);
        let lr = g.mean(lr);
        let mut loss = g.add(lf, lr);
        let critic_loss = g.value(loss).item() as f64;
        if !critic_loss.is_finite() {
            return Err(diverged(step, "critic", critic_loss));
        }
        if let Some(v) = probe {
            let per = v.len() / b;
            let delta = config.r1_delta as f32;
            let mut plus = reals.clone();
            let mut minus = reals;
            let mut coeffs = Vec::with_capacity(b);
            let mut penalty = 0.0f64;
            for i in 0..b {
                let vi = &v.data()[i * per..(i + 1) * per];
                let norm = vi.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                penalty += norm * norm;
                let inv = if norm > 0.0 { (1.0 / norm) as f32 } else { 0.0 };
                for j in 0..per {
                    let u = vi[j] * inv * delta;
                    plus.data_mut()[i * per + j] += u;
                    minus.data_mut()[i * per + j] -= u;
                }
                coeffs.push(
                    (config.r1_gamma * config.r1_interval as f64 * norm / (2.0 * config.r1_delta * b as f64)) as f32,
                );
            }
            report.r1_penalty.push(0.5 * config.r1_gamma * penalty / b as f64);
            let pv = g.input(plus);
            let mv = g.input(minus);
            let dp = critic.forward(&mut g, &db, pv);
            let dm = critic.forward(&mut g, &db, mv);
            let neg: Vec<f32> = coeffs.iter().map(|c| -c).collect();
            let sp = g.weighted_sum(dp, coeffs);
            let sm = g.weighted_sum(dm, neg);
            let surrogate = g.add(sp, sm);
            loss = g.add(loss, surrogate);
        }
        let mut grads = g.backward(loss);
        let dgrads = db.gradients(&mut grads);
        opt_d.step_params(critic.params_mut(), &dgrads, |_| 1.0);
        report.critic_loss.push(critic_loss);

        // Generator update.
        let (z, noises) = next_inputs(&mut draw);
        let mut g = Graph::new();
        let gb = gen.params().bind(&mut g, |_| true);
        let db = critic.params().bind(&mut g, |_| false);
        let zv = g.input(z);
        let w = gen.mapping_graph(&mut g, &gb, zv);
        let s = g.repeat(w, layers);
        let nv = gen.noise_inputs(&mut g, &noises.iter().collect::<Vec<_>>());
        let img = gen.synthesis_graph(&mut g, &gb, s, &nv, None);
        let score = critic.forward(&mut g, &db, img);
        let neg = g.scale(score, -1.0);
        let sp = g.softplus(neg);
        let gl = g.mean(sp);
        let gen_loss = g.value(gl).item() as f64;
        if !gen_loss.is_finite() {
            return Err(diverged(step, "generator", gen_loss));
        }
        let mut grads = g.backward(gl);
        let ggrads = gb.gradients(&mut grads);
        let mult = config.mapping_lr_mult;
        opt_g.step_params(gen.params_mut(), &ggrads, |name| {
            if name.starts_with(MAPPING_PREFIX) {
                mult
            } else {
                1.0
            }
        });
        report.generator_loss.push(gen_loss);
        if !gen.params().all_finite() {
            return Err(Error::Training {
                step,
                message: String::from("generator weights became non-finite"),
            });
        }
        for i in 0..gen.params().len() {
            let src = gen.params().tensor(i).data();
            for (e, &v) in ema.params_mut().tensor_mut(i).data_mut().iter_mut().zip(src) {
                *e = ema_beta * *e + (1.0 - ema_beta) * v;
            }
        }

        if (step + 1) % config.steps_per_epoch == 0 {
            observer.on_epoch((step + 1) / config.steps_per_epoch, step + 1, &ema)?;
        }
    }
    Ok((ema, report))
}

/// Mean over `samples` of the per-pixel L1 distance to the nearest image in `corpus`.
///
/// A discriminator-free quality proxy: lower means samples sit closer to the data.
pub fn nearest_neighbor_distance(samples: &[Image], corpus: &[Image]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            corpus
                .iter()
                .map(|c| s.mean_abs_diff(c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / samples.len() as f64
}

/// Mean pairwise per-pixel L1 distance; a sample-diversity measure.
pub fn pairwise_diversity(samples: &[Image]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            total += samples[i].mean_abs_diff(&samples[j]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toy_corpus;

    fn small() -> (Vec<Image>, GeneratorConfig, GanConfig) {
        let imgs: Vec<Image> = toy_corpus(8, 2, 1).into_iter().map(|(i, _)| i).collect();
        let gc = GeneratorConfig::for_resolution(8, 8);
        let cfg = GanConfig {
            steps: 1,
            batch_size: 2,
            steps_per_epoch: 1,
            seed: 3,
            ..GanConfig::default()
        };
        (imgs, gc, cfg)
    }

    #[test]
    fn one_step_moves_weights() {
        let (imgs, gc, cfg) = small();
        let init = Generator::<f32>::new(gc.clone(), derive_seed(cfg.seed, "init-generator")).unwrap();
        let (trained, report) = train_base(&imgs, gc, &cfg, &mut NoObserver).unwrap();
        assert!(trained.params().max_abs_diff(init.params()) > 0.0);
        assert_eq!(report.generator_loss.len(), 1);
        assert_eq!(report.r1_penalty.len(), 1);
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let (imgs, gc, mut cfg) = small();
        cfg.steps = 3;
        let (a, _) = train_base(&imgs, gc.clone(), &cfg, &mut NoObserver).unwrap();
        let (b, _) = train_base(&imgs, gc, &cfg, &mut NoObserver).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn rejects_empty_and_mismatched_corpora() {
        let (imgs, gc, cfg) = small();
        assert!(matches!(train_base(&[], gc.clone(), &cfg, &mut NoObserver), Err(Error::Input(_))));
        let big: Vec<Image> = toy_corpus(16, 1, 1).into_iter().map(|(i, _)| i).collect();
        assert!(matches!(train_base(&big, gc, &cfg, &mut NoObserver), Err(Error::Input(_))));
        drop(imgs);
    }

    #[test]
    fn divergence_reports_the_step() {
        let (mut imgs, gc, cfg) = small();
        imgs[0].data_mut()[0] = f32::NAN;
        imgs[1].data_mut()[0] = f32::NAN;
        match train_base(&imgs, gc, &cfg, &mut NoObserver) {
            Err(Error::Training { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    struct Count(usize);
    impl TrainObserver for Count {
        fn on_epoch(&mut self, _: usize, _: usize, _: &Generator) -> Result<()> {
            self.0 += 1;
            Ok(())
        }
    }

    #[test]
    fn observer_sees_every_epoch() {
        let (imgs, gc, mut cfg) = small();
        cfg.steps = 4;
        cfg.steps_per_epoch = 2;
        let mut c = Count(0);
        train_base(&imgs, gc, &cfg, &mut c).unwrap();
        assert_eq!(c.0, 2);
    }
}

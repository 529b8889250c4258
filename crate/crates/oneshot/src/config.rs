//! Pipeline configuration: one TOML file with a section per stage.
//!
//! Every stage seed is derived from the master `seed` with
//! [`derive_seed`] and the stage's label (see [`PipelineConfig::stage_seed`]),
//! so a stage's randomness does not depend on which other stages ran first.

use std::fs;
use std::path::{Path, PathBuf};

use oneshot_core::adapt::{ProjectionConfig, ShiftConfig};
use oneshot_core::detector::{DetectorConfig, DetectorTraining};
use oneshot_core::generator::GeneratorConfig;
use oneshot_core::mixing::{MixConfig, NoisePolicy};
use oneshot_core::perceptual::{DistanceConfig, ExtractorConfig, ExtractorTraining};
use oneshot_core::rng::derive_seed;
use oneshot_core::train::GanConfig;
use oneshot_core::corpus::Domain;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, IoContext, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    /// Master seed; must fit in a signed 64-bit TOML integer.
    pub seed: u64,
    pub resolution: usize,
    pub paths: Paths,
    pub corpus: CorpusSection,
    pub generator: GeneratorSection,
    pub train: TrainSection,
    pub extractor: ExtractorSection,
    pub distance: DistanceConfig,
    pub projection: ProjectionConfig,
    pub shift: ShiftConfig,
    pub mix: MixSection,
    pub detector: DetectorSection,
    pub experiment: ExperimentSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            resolution: 32,
            paths: Paths::default(),
            corpus: CorpusSection::default(),
            generator: GeneratorSection::default(),
            train: TrainSection::default(),
            extractor: ExtractorSection::default(),
            distance: DistanceConfig::default(),
            projection: ProjectionConfig::default(),
            shift: ShiftConfig::default(),
            mix: MixSection::default(),
            detector: DetectorSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Run directory; overridden by the `ONESHOT_OUTPUT_ROOT` environment variable.
    pub output_root: PathBuf,
    /// Defaults to `checkpoints/base` under the run directory.
    pub base_checkpoint: Option<PathBuf>,
    /// Defaults to `checkpoints/extractor` under the run directory.
    pub extractor_checkpoint: Option<PathBuf>,
    /// A dataset directory with a manifest; the procedural corpus is used when absent.
    pub corpus: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            output_root: PathBuf::from("runs/default"),
            base_checkpoint: None,
            extractor_checkpoint: None,
            corpus: None,
        }
    }
}

/// The procedural toy-face corpus used when no corpus directory is given.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub size: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { size: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub style_dim: usize,
    pub mapping_layers: usize,
    /// Channels per resolution block; the default ladder when absent.
    pub channels: Option<Vec<usize>>,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let d = GeneratorConfig::default();
        Self {
            style_dim: d.style_dim,
            mapping_layers: d.mapping_layers,
            channels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mapping_lr_mult: f64,
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub r1_delta: f64,
    /// Half-life in images of the generator weight average; 0 disables it.
    pub ema_half_life: f64,
    /// Steps between intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let g = GanConfig::default();
        Self {
            steps: g.steps,
            batch_size: g.batch_size,
            lr: g.lr,
            beta1: g.beta1,
            beta2: g.beta2,
            mapping_lr_mult: g.mapping_lr_mult,
            r1_gamma: g.r1_gamma,
            r1_interval: g.r1_interval,
            r1_delta: g.r1_delta,
            ema_half_life: g.ema_half_life,
            checkpoint_every: g.steps_per_epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSection {
    pub channels: Vec<usize>,
    /// Size of the labelled toy corpus the extractor is trained on.
    pub corpus_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        let t = ExtractorTraining::default();
        Self {
            channels: ExtractorConfig::default().channels,
            corpus_size: 1024,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSection {
    pub k: usize,
    pub n: usize,
    /// Use one noise draw for every generated image.
    pub shared_noise: bool,
}

impl Default for MixSection {
    fn default() -> Self {
        let m = MixConfig::default();
        Self {
            k: m.k,
            n: m.n,
            shared_noise: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub stem: usize,
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub class_weighting: bool,
    pub validation_fraction: f64,
    pub patience: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let c = DetectorConfig::binary(32);
        let t = DetectorTraining::default();
        Self {
            stem: c.stem,
            channels: c.channels,
            epochs: t.epochs,
            max_steps: t.max_steps,
            batch_size: t.batch_size,
            lr: t.lr,
            class_weighting: t.class_weighting,
            validation_fraction: t.validation_fraction,
            patience: t.patience,
        }
    }
}

/// Sizes and fixtures for the scripted experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Target domain name, see [`Domain::fixture`].
    pub fixture: String,
    /// Index of the held-out face used as the one-shot example.
    pub target_index: u64,
    /// Generated images per condition.
    pub samples: usize,
    /// Real images in each detector's training set.
    pub real_train: usize,
    /// Real and target-domain images in each held-out test set.
    pub test_size: usize,
    pub shots: Vec<usize>,
    /// Images per set exported to the embedding.
    pub embed_points: usize,
    pub tsne_perplexity: f64,
    pub tsne_iterations: usize,
    /// Neighbours in the separation score.
    pub separation_k: usize,
    /// Base-training steps of each model in the capacity experiment.
    pub capacity_steps: usize,
    /// Fine-tuning steps in the capacity and few-shot experiments.
    pub finetune_steps: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            fixture: "vignette".into(),
            target_index: 0,
            samples: 400,
            real_train: 400,
            test_size: 300,
            shots: vec![1, 10, 100, 1000],
            embed_points: 150,
            tsne_perplexity: 30.0,
            tsne_iterations: 1000,
            separation_k: 10,
            capacity_steps: 600,
            finetune_steps: 300,
        }
    }
}

/// Collects every violated field before reporting.
struct Checker(Vec<String>);

impl Checker {
    fn check(&mut self, ok: bool, field: &str, msg: impl std::fmt::Display) {
        if !ok {
            self.0.push(format!("{field}: {msg}"));
        }
    }

    fn positive(&mut self, v: usize, field: &str) {
        self.check(v >= 1, field, "must be at least 1");
    }

    fn rate(&mut self, v: f64, field: &str) {
        self.check(v.is_finite() && v > 0.0, field, format!("must be a positive number, got {v}"));
    }

    fn core(&mut self, section: &str, r: oneshot_core::Result<()>) {
        if let Err(e) = r {
            self.0.push(format!("{section}: {e}"));
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| format_err(origin, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads, resolves relative paths against the file's directory, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let mut cfg = Self::parse(&text, path)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes every relative path absolute under `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.output_root);
        for p in [
            &mut self.paths.base_checkpoint,
            &mut self.paths.extractor_checkpoint,
            &mut self.paths.corpus,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Checks every field and lists all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut c = Checker(Vec::new());
        c.check(
            self.version == CONFIG_VERSION,
            "version",
            format!("unsupported version {}, expected {CONFIG_VERSION}", self.version),
        );
        c.check(self.seed <= i64::MAX as u64, "seed", "must fit in a signed 64-bit integer");
        let r = self.resolution;
        c.check(r >= 8 && r.is_power_of_two(), "resolution", format!("must be a power of two >= 8, got {r}"));
        if let Some(p) = &self.paths.corpus {
            c.check(p.join(crate::manifest::MANIFEST).is_file(), "paths.corpus", format!("no manifest in {}", p.display()));
        }
        c.positive(self.corpus.size, "corpus.size");

        c.positive(self.generator.style_dim, "generator.style_dim");
        c.positive(self.generator.mapping_layers, "generator.mapping_layers");
        if let Some(ch) = &self.generator.channels {
            c.check(ch.iter().all(|&v| v >= 1), "generator.channels", "entries must be positive");
        }
        if c.0.is_empty() {
            c.core("generator", self.generator_config().validate());
        }

        let t = &self.train;
        c.positive(t.batch_size, "train.batch_size");
        c.rate(t.lr, "train.lr");
        c.check((0.0..1.0).contains(&t.beta1), "train.beta1", "must lie in [0, 1)");
        c.check((0.0..1.0).contains(&t.beta2), "train.beta2", "must lie in [0, 1)");
        c.check(t.mapping_lr_mult >= 0.0, "train.mapping_lr_mult", "must be non-negative");
        c.check(t.r1_gamma >= 0.0, "train.r1_gamma", "must be non-negative");
        c.positive(t.r1_interval, "train.r1_interval");
        c.rate(t.r1_delta, "train.r1_delta");
        c.check(t.ema_half_life.is_finite() && t.ema_half_life >= 0.0, "train.ema_half_life", "must be a non-negative number");
        c.positive(t.checkpoint_every, "train.checkpoint_every");

        let e = &self.extractor;
        c.check(!e.channels.is_empty() && e.channels.iter().all(|&v| v >= 1), "extractor.channels", "needs positive entries");
        c.check(e.corpus_size >= 2, "extractor.corpus_size", "must be at least 2");
        c.positive(e.steps, "extractor.steps");
        c.positive(e.batch_size, "extractor.batch_size");
        c.rate(e.lr, "extractor.lr");
        if !e.channels.is_empty() && r.is_power_of_two() {
            c.core("extractor", self.extractor_config().validate());
        }

        let d = &self.distance;
        c.check(d.lambda.is_finite() && d.lambda >= 0.0, "distance.lambda", "must be finite and non-negative");
        c.check(d.perceptual || d.lambda > 0.0, "distance", "has no active term");
        c.check(!d.tap_layers.is_empty(), "distance.tap_layers", "must not be empty");
        c.check(
            d.tap_layers.iter().all(|&l| l < e.channels.len()),
            "distance.tap_layers",
            format!("entries must be below the {} extractor blocks", e.channels.len()),
        );

        let p = &self.projection;
        c.positive(p.max_iters, "projection.max_iters");
        c.rate(p.lr, "projection.lr");
        c.check(p.tolerance >= 0.0, "projection.tolerance", "must be non-negative");
        c.positive(p.window, "projection.window");

        let s = &self.shift;
        c.positive(s.max_iters, "shift.max_iters");
        c.rate(s.lr, "shift.lr");
        c.check(!s.groups.is_empty(), "shift.groups", "must name at least one parameter group");
        c.check(s.tolerance >= 0.0, "shift.tolerance", "must be non-negative");
        c.positive(s.window, "shift.window");

        let layers = self.generator.channels.as_ref().map_or_else(
            || GeneratorConfig::for_resolution(r.max(8), 1).num_layers(),
            |ch| 2 * ch.len(),
        );
        c.check(self.mix.k <= layers, "mix.k", format!("must not exceed the {layers} style layers"));
        c.positive(self.mix.n, "mix.n");

        let det = &self.detector;
        c.positive(det.stem, "detector.stem");
        c.check(!det.channels.is_empty() && det.channels.iter().all(|&v| v >= 1), "detector.channels", "needs positive entries");
        if det.stem >= 1 && det.channels.iter().all(|&v| v >= 1) && !det.channels.is_empty() {
            c.core("detector", self.detector_config(2).validate());
        }
        c.positive(det.epochs, "detector.epochs");
        if let Some(m) = det.max_steps {
            c.positive(m, "detector.max_steps");
        }
        c.positive(det.batch_size, "detector.batch_size");
        c.rate(det.lr, "detector.lr");
        c.check(
            (0.0..1.0).contains(&det.validation_fraction),
            "detector.validation_fraction",
            "must lie in [0, 1)",
        );

        let x = &self.experiment;
        c.check(Domain::fixture(&x.fixture).is_some(), "experiment.fixture", format!("unknown fixture {:?}", x.fixture));
        c.positive(x.samples, "experiment.samples");
        c.check(x.real_train >= 2, "experiment.real_train", "must be at least 2");
        c.check(x.test_size >= 2, "experiment.test_size", "must be at least 2");
        c.check(!x.shots.is_empty() && x.shots.iter().all(|&n| n >= 1), "experiment.shots", "needs positive entries");
        c.check(x.embed_points >= 4, "experiment.embed_points", "must be at least 4");
        c.rate(x.tsne_perplexity, "experiment.tsne_perplexity");
        c.positive(x.tsne_iterations, "experiment.tsne_iterations");
        c.positive(x.separation_k, "experiment.separation_k");
        c.positive(x.capacity_steps, "experiment.capacity_steps");
        c.positive(x.finetune_steps, "experiment.finetune_steps");

        if c.0.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(c.0))
        }
    }

    /// Seed of a pipeline stage, e.g. `"train"`, `"adapt"` or `"mix"`.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let mut g = GeneratorConfig::for_resolution(self.resolution, self.generator.style_dim);
        g.mapping_layers = self.generator.mapping_layers;
        if let Some(ch) = &self.generator.channels {
            g.channels = ch.clone();
        }
        g
    }

    pub fn gan_config(&self) -> GanConfig {
        let t = &self.train;
        GanConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            mapping_lr_mult: t.mapping_lr_mult,
            r1_gamma: t.r1_gamma,
            r1_interval: t.r1_interval,
            r1_delta: t.r1_delta,
            ema_half_life: t.ema_half_life,
            steps_per_epoch: t.checkpoint_every,
            seed: self.stage_seed("train"),
            discriminator: None,
        }
    }

    pub fn extractor_config(&self) -> ExtractorConfig {
        ExtractorConfig {
            resolution: self.resolution,
            channels: self.extractor.channels.clone(),
            ..ExtractorConfig::default()
        }
    }

    pub fn extractor_training(&self) -> ExtractorTraining {
        ExtractorTraining {
            steps: self.extractor.steps,
            batch_size: self.extractor.batch_size,
            lr: self.extractor.lr,
            seed: self.stage_seed("extractor"),
        }
    }

    /// Mixing settings for `n` images, seeded per purpose.
    pub fn mix_config(&self, n: usize, purpose: &str) -> MixConfig {
        let seed = derive_seed(self.stage_seed("mix"), purpose);
        MixConfig {
            k: self.mix.k,
            n,
            seed,
            noise: if self.mix.shared_noise {
                NoisePolicy::Shared {
                    seed: derive_seed(seed, "shared-noise"),
                }
            } else {
                NoisePolicy::PerImage
            },
        }
    }

    pub fn detector_config(&self, classes: usize) -> DetectorConfig {
        DetectorConfig {
            resolution: self.resolution,
            stem: self.detector.stem,
            channels: self.detector.channels.clone(),
            classes,
        }
    }

    pub fn detector_training(&self, purpose: &str) -> DetectorTraining {
        let d = &self.detector;
        DetectorTraining {
            epochs: d.epochs,
            max_steps: d.max_steps,
            batch_size: d.batch_size,
            lr: d.lr,
            class_weighting: d.class_weighting,
            validation_fraction: d.validation_fraction,
            patience: d.patience,
            seed: derive_seed(self.stage_seed("detector"), purpose),
        }
    }

    pub fn fixture(&self) -> Result<Domain> {
        Domain::fixture(&self.experiment.fixture)
            .ok_or_else(|| Error::Config(vec![format!("experiment.fixture: unknown fixture {:?}", self.experiment.fixture)]))
    }

    pub fn output_root(&self) -> PathBuf {
        crate::rundir::output_root(&self.paths.output_root)
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.paths
            .base_checkpoint
            .clone()
            .unwrap_or_else(|| self.output_root().join("checkpoints/base"))
    }

    pub fn extractor_checkpoint(&self) -> PathBuf {
        self.paths
            .extractor_checkpoint
            .clone()
            .unwrap_or_else(|| self.output_root().join("checkpoints/extractor"))
    }
}

//! Pipeline stages shared by the CLI and the experiments: corpora, base
//! models, adaptation records and synthetic datasets.

use std::fs;
use std::path::{Path, PathBuf};

use oneshot_core::adapt::{adapt_one_shot, AdaptationResult, ProjectionConfig, ShiftConfig};
use oneshot_core::corpus::{toy_corpus, toy_face, Domain};
use oneshot_core::generator::{NoiseInput, StyleVector};
use oneshot_core::mixing::{generate_mixed, MixConfig, MixedSample};
use oneshot_core::perceptual::{DistanceConfig, FeatureExtractor};
use oneshot_core::rng::derive_index;
use oneshot_core::train::{fine_tune, train_base, NoObserver, TrainObserver, TrainReport};
use oneshot_core::{Generator, Image};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::PipelineConfig;
use crate::error::{format_err, Error, IoContext, Result};
use crate::manifest::{Dataset, Provenance};

pub const ADAPTATION_FILE: &str = "adaptation.json";

/// Images the base generator is trained on.
pub fn base_corpus(cfg: &PipelineConfig) -> Result<Vec<Image>> {
    match &cfg.paths.corpus {
        Some(dir) => Dataset::open(dir)?.load_images(),
        None => Ok(faces(cfg, cfg.corpus.size, "corpus")),
    }
}

/// `n` procedural faces from the stream named `stream`.
pub fn faces(cfg: &PipelineConfig, n: usize, stream: &str) -> Vec<Image> {
    toy_corpus(cfg.resolution, n, cfg.stage_seed(stream))
        .into_iter()
        .map(|(img, _)| img)
        .collect()
}

/// `n` procedural faces from `stream`, passed through `domain`.
pub fn domain_faces(cfg: &PipelineConfig, domain: &Domain, n: usize, stream: &str) -> Vec<Image> {
    faces(cfg, n, stream).iter().map(|img| domain.apply(img)).collect()
}

/// The one-shot example of the configured fixture.
pub fn fixture_target(cfg: &PipelineConfig, domain: &Domain) -> Image {
    let seed = derive_index(cfg.stage_seed("target"), cfg.experiment.target_index);
    domain.apply(&toy_face(cfg.resolution, seed).0)
}

/// Writes the latest weights to one directory at every epoch.
struct LastGood {
    dir: PathBuf,
    saved: bool,
}

impl TrainObserver for LastGood {
    fn on_epoch(&mut self, _: usize, _: usize, model: &Generator) -> oneshot_core::Result<()> {
        checkpoint::save_generator(&self.dir, model)
            .map_err(|e| oneshot_core::Error::Aborted(format!("saving checkpoint: {e}")))?;
        self.saved = true;
        Ok(())
    }
}

/// Trains a base model, keeping a per-epoch checkpoint at `partial`.
pub fn train_base_model(cfg: &PipelineConfig, corpus: &[Image], partial: &Path) -> Result<(Generator, TrainReport)> {
    let mut obs = LastGood {
        dir: partial.to_path_buf(),
        saved: false,
    };
    train_base(corpus, cfg.generator_config(), &cfg.gan_config(), &mut obs).map_err(|e| match e {
        oneshot_core::Error::Training { step, message } => Error::Diverged {
            step,
            message,
            checkpoint: obs.saved.then(|| partial.to_path_buf()),
        },
        other => other.into(),
    })
}

pub fn train_extractor(cfg: &PipelineConfig) -> Result<FeatureExtractor> {
    let labelled = toy_corpus(cfg.resolution, cfg.extractor.corpus_size, cfg.stage_seed("extractor-corpus"));
    let images: Vec<Image> = labelled.iter().map(|(i, _)| i.clone()).collect();
    let labels: Vec<usize> = labelled.iter().map(|(_, a)| a.class()).collect();
    Ok(FeatureExtractor::train(
        cfg.extractor_config(),
        &images,
        &labels,
        &cfg.extractor_training(),
    )?)
}

/// Loads the configured base generator and extractor, training and saving
/// whichever is missing.
pub fn ensure_models(cfg: &PipelineConfig) -> Result<(Generator, FeatureExtractor)> {
    let base_dir = cfg.base_checkpoint();
    let base = if base_dir.join(checkpoint::METADATA).is_file() {
        checkpoint::load_generator(&base_dir)?
    } else {
        let corpus = base_corpus(cfg)?;
        let partial = base_dir.with_extension("partial");
        let (mut g, _) = train_base_model(cfg, &corpus, &partial)?;
        let digest = checkpoint::weights_digest(g.params());
        g.set_version(format!("base-{}", &digest[..12]));
        checkpoint::save_generator(&base_dir, &g)?;
        let _ = fs::remove_dir_all(&partial);
        g
    };
    let ext_dir = cfg.extractor_checkpoint();
    let extractor = if ext_dir.join(checkpoint::METADATA).is_file() {
        checkpoint::load_extractor(&ext_dir)?
    } else {
        let e = train_extractor(cfg)?;
        checkpoint::save_extractor(&ext_dir, &e, cfg.stage_seed("extractor"))?;
        e
    };
    if base.resolution() != cfg.resolution || extractor.config().resolution != cfg.resolution {
        return Err(Error::Config(vec![format!(
            "resolution: config says {}, checkpoints are {} (generator) and {} (extractor)",
            cfg.resolution,
            base.resolution(),
            extractor.config().resolution
        )]));
    }
    Ok((base, extractor))
}

/// Fine-tunes `model` on `images` for `experiment.finetune_steps` steps.
pub fn finetune(cfg: &PipelineConfig, model: &Generator, images: &[Image], purpose: &str) -> Result<Generator> {
    let mut gan = cfg.gan_config();
    gan.steps = cfg.experiment.finetune_steps;
    gan.steps_per_epoch = gan.steps;
    gan.seed = cfg.stage_seed(purpose);
    Ok(fine_tune(model, images, &gan, &mut NoObserver)?.0)
}

pub fn adapt(
    cfg: &PipelineConfig,
    base: &Generator,
    extractor: &FeatureExtractor,
    target: &Image,
    seed: u64,
) -> Result<AdaptationResult> {
    Ok(adapt_one_shot(
        base,
        target,
        extractor,
        &cfg.distance,
        &cfg.projection,
        &cfg.shift,
        seed,
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleRecord {
    pub layers: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSettings {
    pub distance: DistanceConfig,
    pub projection: ProjectionConfig,
    pub shift: ShiftConfig,
}

/// `adaptation.json`: everything needed to regenerate from an adapted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub seed: u64,
    pub target_sha256: String,
    pub style: StyleRecord,
    pub noise_seed: u64,
    pub projection_trace: Vec<f64>,
    pub shift_trace: Vec<f64>,
    pub projection_loss: f64,
    pub shift_loss: f64,
    pub base_version: String,
    pub model_version: String,
    /// Shifted-model checkpoint, relative to the record's directory.
    pub model: String,
    pub config: AdaptationSettings,
}

impl AdaptationRecord {
    pub fn new(cfg: &PipelineConfig, base: &Generator, r: &AdaptationResult) -> Self {
        Self {
            seed: r.seed,
            target_sha256: r.target_sha256.clone(),
            style: StyleRecord {
                layers: r.style.num_layers(),
                dim: r.style.dim(),
                values: r.style.values().to_vec(),
            },
            noise_seed: r.noise.seed(),
            projection_trace: r.projection_trace.clone(),
            shift_trace: r.shift_trace.clone(),
            projection_loss: r.projection_loss,
            shift_loss: r.shift_loss,
            base_version: base.version().to_string(),
            model_version: r.model.version().to_string(),
            model: "model".into(),
            config: AdaptationSettings {
                distance: cfg.distance.clone(),
                projection: cfg.projection.clone(),
                shift: cfg.shift.clone(),
            },
        }
    }

    pub fn style(&self) -> Result<StyleVector> {
        Ok(StyleVector::from_values(self.style.layers, self.style.dim, self.style.values.clone())?)
    }
}

/// Writes `adaptation.json` and the shifted model under `dir`.
pub fn write_adaptation(dir: &Path, record: &AdaptationRecord, model: &Generator) -> Result<PathBuf> {
    checkpoint::save_generator(&dir.join(&record.model), model)?;
    let path = dir.join(ADAPTATION_FILE);
    let text = serde_json::to_string_pretty(record).expect("record serializes");
    fs::write(&path, text).at(&path)?;
    Ok(path)
}

pub fn read_adaptation(dir: &Path) -> Result<(AdaptationRecord, Generator)> {
    let path = dir.join(ADAPTATION_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    let record: AdaptationRecord = serde_json::from_str(&text).map_err(|e| format_err(&path, e))?;
    let model = checkpoint::load_generator(&dir.join(&record.model))?;
    model.check_style(&record.style()?)?;
    Ok((record, model))
}

/// Which generator and how many grafted layers a synthetic set uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Unadapted base model, no mixing.
    Baseline,
    /// Shifted model with style mixing.
    Full,
    /// Shifted model, no mixing.
    ShiftOnly,
    /// Base model with style mixing.
    MixOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Full, Mode::ShiftOnly, Mode::MixOnly];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Full => "full",
            Mode::ShiftOnly => "shift_only",
            Mode::MixOnly => "mix_only",
        }
    }

    fn uses_shifted(self) -> bool {
        matches!(self, Mode::Full | Mode::ShiftOnly)
    }

    fn mixes(self) -> bool {
        matches!(self, Mode::Full | Mode::MixOnly)
    }
}

/// Synthesizes a set for `mode`; `mix.k` applies only to mixing modes.
pub fn synthesize_set(
    base: &Generator,
    shifted: &Generator,
    style: &StyleVector,
    mode: Mode,
    mix: &MixConfig,
) -> Result<Vec<MixedSample>> {
    let model = if mode.uses_shifted() { shifted } else { base };
    let config = MixConfig {
        k: if mode.mixes() { mix.k } else { 0 },
        ..mix.clone()
    };
    Ok(generate_mixed(model, style, &config)?)
}

pub fn write_samples(dir: &Path, samples: &[MixedSample], label: &str, k: usize, version: &str) -> Result<Dataset> {
    Dataset::write(
        dir,
        samples.iter().map(|s| {
            (
                &s.image,
                Provenance {
                    label: label.to_string(),
                    seed: s.seed,
                    k: Some(k),
                    source_model_version: Some(version.to_string()),
                },
            )
        }),
    )
}

/// Writes plain images with per-image seeds `0..n` as provenance.
pub fn write_images(dir: &Path, images: &[Image], label: &str) -> Result<Dataset> {
    Dataset::write(
        dir,
        images.iter().zip(0u64..).map(|(img, i)| {
            (
                img,
                Provenance {
                    label: label.to_string(),
                    seed: i,
                    k: None,
                    source_model_version: None,
                },
            )
        }),
    )
}

/// Noise the adaptation used, rebuilt from its seed.
pub fn adaptation_noise(model: &Generator, record: &AdaptationRecord) -> NoiseInput {
    NoiseInput::sample(model.config(), record.noise_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use oneshot_core::generator::LatentCode;
    use oneshot_core::perceptual::ExtractorConfig;
    use oneshot_core::GeneratorConfig;

    fn tiny() -> (Generator, Generator, StyleVector) {
        let base = Generator::new(GeneratorConfig::for_resolution(8, 8), 3).unwrap();
        let mut shifted = base.clone();
        let i = shifted.params().index_of("synthesis.to_rgb.bias").unwrap();
        shifted.params_mut().tensor_mut(i).data_mut()[0] += 1.0;
        shifted.set_version("shifted");
        let style = base.map(&LatentCode::sample(8, 4)).unwrap();
        (base, shifted, style)
    }

    #[test]
    fn modes_pick_model_and_mixing_depth() {
        let (base, shifted, style) = tiny();
        let mix = MixConfig {
            k: 2,
            n: 3,
            ..MixConfig::default()
        };
        let l = base.num_layers();
        for mode in Mode::ALL {
            let set = synthesize_set(&base, &shifted, &style, mode, &mix).unwrap();
            assert_eq!(set.len(), 3);
            for s in &set {
                let grafted = (0..l).filter(|&i| s.style.layer(i) == style.layer(i)).count();
                assert_eq!(grafted, if matches!(mode, Mode::Full | Mode::MixOnly) { 2 } else { 0 }, "{mode:?}");
            }
        }
        // Same latents in every mode; only the generator and the graft differ.
        let a = synthesize_set(&base, &shifted, &style, Mode::Baseline, &mix).unwrap();
        let b = synthesize_set(&base, &shifted, &style, Mode::ShiftOnly, &mix).unwrap();
        assert_eq!(a[0].style, b[0].style);
        assert_ne!(a[0].image, b[0].image);
    }

    #[test]
    fn adaptation_record_round_trip() {
        let (base, _, _) = tiny();
        let ext = FeatureExtractor::new(
            ExtractorConfig {
                resolution: 8,
                channels: vec![4, 4, 4, 4],
                classes: 2,
            },
            5,
        )
        .unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.resolution = 8;
        cfg.projection.max_iters = 20;
        cfg.shift.max_iters = 5;
        let target = Image::filled(8, 8, [0.4, -0.2, 0.1]);
        let r = adapt(&cfg, &base, &ext, &target, 9).unwrap();
        let record = AdaptationRecord::new(&cfg, &base, &r);
        let dir = tempfile::tempdir().unwrap();
        let path = write_adaptation(dir.path(), &record, &r.model).unwrap();
        let first = fs::read(&path).unwrap();
        let (back, model) = read_adaptation(dir.path()).unwrap();
        assert_eq!(back, record);
        assert_eq!(back.style().unwrap(), r.style);
        assert_eq!(model.params(), r.model.params());
        assert_eq!(adaptation_noise(&model, &back).maps(), r.noise.maps());
        write_adaptation(dir.path(), &record, &r.model).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn streams_are_independent_and_fixture_target_is_stable() {
        let cfg = PipelineConfig::default();
        let a = faces(&cfg, 4, "one");
        assert_eq!(a, faces(&cfg, 4, "one"));
        assert_ne!(a[0], faces(&cfg, 4, "two")[0]);
        let d = cfg.fixture().unwrap();
        assert_eq!(fixture_target(&cfg, &d), fixture_target(&cfg, &d));
        let mut other = cfg.clone();
        other.experiment.target_index += 1;
        assert_ne!(fixture_target(&cfg, &d), fixture_target(&other, &d));
    }
}

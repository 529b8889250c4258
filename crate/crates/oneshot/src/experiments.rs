//! Scripted experiments at desk scale.
//!
//! Each experiment writes `reports/<id>/report.json` plus its image grids
//! (and `embeddings.tsv` for `embed`) under the run directory. Synthetic and
//! held-out datasets go to `datasets/<fixture>/`; every report checks that the
//! held-out test sets share no image hash with any training set.

use std::cell::{OnceCell, RefCell};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use oneshot_core::adapt::AdaptationResult;
use oneshot_core::corpus::Domain;
use oneshot_core::detector::{train_classifier, Detector, TrainingLog};
use oneshot_core::image::sha256_hex;
use oneshot_core::metrics::{DetectorMetrics, MulticlassMetrics};
use oneshot_core::mixing::MixedSample;
use oneshot_core::perceptual::{combined_distance, DistanceConfig, FeatureExtractor};
use oneshot_core::train::{pairwise_diversity, train_base, NoObserver};
use oneshot_core::tsne::{separation_score, tsne, TsneConfig};
use oneshot_core::{Generator, GeneratorConfig, Image};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{format_err, Error, IoContext, Result};
use crate::imageio::{grid, write_png};
use crate::manifest::{disjoint, Dataset};
use crate::pipeline::{self, Mode};

pub const EXPERIMENTS: [&str; 7] = ["capacity", "table2", "ablation", "loss", "fewshot", "embed", "multidomain"];
pub const REPORT_FILE: &str = "report.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";

/// Target domains standing in for three manipulation methods.
pub const MULTIDOMAIN_FIXTURES: [&str; 3] = ["colorcast", "blur", "compression"];

/// Minimum gap between adapted and baseline AP on the fixture.
pub const TABLE2_MIN_GAIN: f64 = 0.2;
/// Allowed dip in direct-classifier AP as the shot count grows.
pub const FEWSHOT_SLACK: f64 = 0.02;
/// Required relative drop in sample diversity after one-shot fine-tuning.
pub const COLLAPSE_MIN_DROP: f64 = 0.5;
/// Samples used for diversity measurements.
pub const DIVERSITY_SAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<DetectorMetrics>,
    pub values: BTreeMap<String, f64>,
}

impl ReportRow {
    fn new(condition: impl Into<String>) -> Self {
        Self {
            condition: condition.into(),
            metrics: None,
            values: BTreeMap::new(),
        }
    }

    fn with(mut self, key: &str, v: f64) -> Self {
        self.values.insert(key.to_string(), v);
        self
    }

    fn with_metrics(mut self, m: DetectorMetrics) -> Self {
        self.values.insert("ap".into(), m.average_precision);
        self.values.insert("accuracy".into(), m.accuracy);
        self.metrics = Some(m);
        self
    }

    pub fn value(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the report directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub id: String,
    pub config: PipelineConfig,
    pub rows: Vec<ReportRow>,
    pub checks: Vec<Check>,
    pub artifacts: Vec<Artifact>,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    fn new(id: &str, cfg: &PipelineConfig) -> Self {
        Self {
            id: id.to_string(),
            config: cfg.clone(),
            rows: Vec::new(),
            checks: Vec::new(),
            artifacts: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn row(&self, condition: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn value(&self, condition: &str, key: &str) -> Option<f64> {
        self.row(condition).and_then(|r| r.value(key))
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn assert(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    fn artifact(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let p = dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        fs::write(&p, bytes).at(&p)?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn image(&mut self, dir: &Path, name: &str, img: &Image) -> Result<()> {
        let p = dir.join(name);
        let bytes = write_png(&p, img)?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).at(dir)?;
        let p = dir.join(REPORT_FILE);
        fs::write(&p, serde_json::to_string_pretty(self).expect("report serializes")).at(&p)?;
        Ok(p)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(REPORT_FILE);
        let text = fs::read_to_string(&p).at(&p)?;
        serde_json::from_str(&text).map_err(|e| format_err(&p, e))
    }

    /// Checks that every artifact exists with its recorded hash.
    pub fn verify_artifacts(&self, dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            let p = dir.join(&a.path);
            let bytes = fs::read(&p).at(&p)?;
            if sha256_hex(&bytes) != a.sha256 {
                return Err(format_err(&p, "artifact hash does not match the report"));
            }
        }
        Ok(())
    }
}

struct Trained {
    log: TrainingLog,
    metrics: DetectorMetrics,
    samples: Vec<MixedSample>,
    dataset: Dataset,
}

struct HeldOut {
    real_train: Vec<Image>,
    test_real: Vec<Image>,
    test_target: Vec<Image>,
    target: Image,
    /// Training-side datasets written so far, for the disjointness check.
    train_sets: RefCell<Vec<Dataset>>,
    test_sets: Vec<Dataset>,
}

fn refs(v: &[Image]) -> Vec<&Image> {
    v.iter().collect()
}

fn images(samples: &[MixedSample]) -> Vec<Image> {
    samples.iter().map(|s| s.image.clone()).collect()
}

/// Runs experiments against one base model and extractor, caching the
/// adaptation and the per-mode detectors across experiments.
pub struct Lab {
    cfg: PipelineConfig,
    root: PathBuf,
    base: Generator,
    extractor: FeatureExtractor,
    domain: Domain,
    data: OnceCell<HeldOut>,
    adaptation: OnceCell<AdaptationResult>,
    detectors: RefCell<BTreeMap<Mode, std::rc::Rc<Trained>>>,
}

impl Lab {
    /// `root` is the run directory; the caller holds its lock.
    pub fn new(cfg: PipelineConfig, root: &Path, base: Generator, extractor: FeatureExtractor) -> Result<Self> {
        cfg.validate()?;
        let domain = cfg.fixture()?;
        Ok(Self {
            cfg,
            root: root.to_path_buf(),
            base,
            extractor,
            domain,
            data: OnceCell::new(),
            adaptation: OnceCell::new(),
            detectors: RefCell::new(BTreeMap::new()),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn base(&self) -> &Generator {
        &self.base
    }

    pub fn report_dir(&self, id: &str) -> PathBuf {
        self.root.join("reports").join(id)
    }

    fn dataset_dir(&self, name: &str) -> PathBuf {
        self.root.join("datasets").join(&self.cfg.experiment.fixture).join(name)
    }

    fn held_out(&self) -> Result<&HeldOut> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let x = &self.cfg.experiment;
        let real_train = pipeline::faces(&self.cfg, x.real_train, "real-train");
        let test_real = pipeline::faces(&self.cfg, x.test_size, "test-real");
        let test_target = pipeline::domain_faces(&self.cfg, &self.domain, x.test_size, "test-target");
        let target = pipeline::fixture_target(&self.cfg, &self.domain);
        let train_sets = vec![
            pipeline::write_images(&self.dataset_dir("real-train"), &real_train, "real")?,
            pipeline::write_images(&self.dataset_dir("one-shot"), std::slice::from_ref(&target), "target")?,
            pipeline::write_images(&self.dataset_dir("corpus"), &pipeline::base_corpus(&self.cfg)?, "real")?,
        ];
        let test_sets = vec![
            pipeline::write_images(&self.dataset_dir("test-real"), &test_real, "real")?,
            pipeline::write_images(&self.dataset_dir("test-target"), &test_target, "target")?,
        ];
        let _ = self.data.set(HeldOut {
            real_train,
            test_real,
            test_target,
            target,
            train_sets: RefCell::new(train_sets),
            test_sets,
        });
        Ok(self.data.get().expect("just set"))
    }

    fn note_training_set(&self, ds: &Dataset) -> Result<()> {
        self.held_out()?.train_sets.borrow_mut().push(ds.clone());
        Ok(())
    }

    /// True when no held-out test image appears in any training-side set.
    fn disjointness(&self, report: &mut ExperimentReport) -> Result<()> {
        let d = self.held_out()?;
        let train = d.train_sets.borrow();
        let mut clashes = Vec::new();
        for t in &d.test_sets {
            t.verify()?;
            for s in train.iter() {
                if !disjoint(t, s) {
                    clashes.push(format!("{} / {}", t.dir.display(), s.dir.display()));
                }
            }
        }
        report.assert(
            "test_sets_disjoint_from_training",
            clashes.is_empty(),
            if clashes.is_empty() {
                format!("{} test sets vs {} training sets", d.test_sets.len(), train.len())
            } else {
                clashes.join("; ")
            },
        );
        Ok(())
    }

    /// Projection and shifting on the fixture's one-shot example.
    pub fn adaptation(&self) -> Result<&AdaptationResult> {
        if let Some(a) = self.adaptation.get() {
            return Ok(a);
        }
        let target = &self.held_out()?.target;
        let a = pipeline::adapt(&self.cfg, &self.base, &self.extractor, target, self.cfg.stage_seed("adapt"))?;
        let _ = self.adaptation.set(a);
        Ok(self.adaptation.get().expect("just set"))
    }

    fn train_binary(&self, real: &[&Image], fake: &[&Image], purpose: &str) -> Result<(Detector, TrainingLog)> {
        let all: Vec<&Image> = real.iter().chain(fake).copied().collect();
        let labels: Vec<usize> = (0..all.len()).map(|i| (i >= real.len()) as usize).collect();
        Ok(train_classifier(
            &all,
            &labels,
            self.cfg.detector_config(2),
            &self.cfg.detector_training(purpose),
        )?)
    }

    fn evaluate(&self, detector: &Detector) -> Result<DetectorMetrics> {
        let d = self.held_out()?;
        Ok(detector.evaluate(&refs(&d.test_real), &refs(&d.test_target))?)
    }

    /// Detector trained on real versus `mode` samples, evaluated on the held-out sets.
    ///
    /// All modes share the latent seeds, detector seed and set sizes.
    fn detection(&self, mode: Mode) -> Result<std::rc::Rc<Trained>> {
        if let Some(t) = self.detectors.borrow().get(&mode) {
            return Ok(t.clone());
        }
        let a = self.adaptation()?;
        let mix = self.cfg.mix_config(self.cfg.experiment.samples, "detection");
        let samples = pipeline::synthesize_set(&self.base, &a.model, &a.style, mode, &mix)?;
        let version = if matches!(mode, Mode::Full | Mode::ShiftOnly) {
            a.model.version()
        } else {
            self.base.version()
        };
        let k = if matches!(mode, Mode::Full | Mode::MixOnly) { mix.k } else { 0 };
        let dataset = pipeline::write_samples(&self.dataset_dir(mode.name()), &samples, mode.name(), k, version)?;
        self.note_training_set(&dataset)?;
        let fake = images(&samples);
        let (detector, log) = self.train_binary(&refs(&self.held_out()?.real_train), &refs(&fake), "detection")?;
        let metrics = self.evaluate(&detector)?;
        let t = std::rc::Rc::new(Trained {
            log,
            metrics,
            samples,
            dataset,
        });
        self.detectors.borrow_mut().insert(mode, t.clone());
        Ok(t)
    }

    fn detection_row(&self, mode: Mode) -> Result<ReportRow> {
        let t = self.detection(mode)?;
        Ok(ReportRow::new(mode.name())
            .with_metrics(t.metrics.clone())
            .with("train_size_fake", t.samples.len() as f64)
            .with("best_epoch", t.log.best_epoch as f64)
            .with("dataset_entries", t.dataset.len() as f64))
    }

    fn sample_grid(&self, report: &mut ExperimentReport, dir: &Path, modes: &[Mode]) -> Result<()> {
        let d = self.held_out()?;
        let a = self.adaptation()?;
        let projected = self.base.synthesize(&a.style, &a.noise)?;
        let shifted = a.model.synthesize(&a.style, &a.noise)?;
        let cols = 8;
        let mut panels: Vec<Image> = vec![d.target.clone(), projected, shifted];
        panels.resize(cols, Image::filled(d.target.height(), d.target.width(), [1.0; 3]));
        for &m in modes {
            let t = self.detection(m)?;
            panels.extend(t.samples.iter().take(cols).map(|s| s.image.clone()));
        }
        report.image(dir, "samples.png", &grid(&refs(&panels), cols))
    }

    fn finish(&self, mut report: ExperimentReport, started: Instant) -> Result<ExperimentReport> {
        report.wall_clock_seconds = started.elapsed().as_secs_f64();
        let dir = self.report_dir(&report.id);
        report.write(&dir)?;
        report.verify_artifacts(&dir)?;
        Ok(report)
    }

    pub fn run(&self, id: &str) -> Result<ExperimentReport> {
        match id {
            "capacity" => self.capacity(),
            "table2" => self.table2(),
            "ablation" => self.ablation(),
            "loss" => self.loss_ablation(),
            "fewshot" => self.fewshot(),
            "embed" => self.embed(),
            "multidomain" => self.multidomain(),
            other => Err(Error::Config(vec![format!(
                "experiment: unknown id {other:?}, expected one of {}",
                EXPERIMENTS.join(", ")
            )])),
        }
    }

    /// Baseline versus adapted detector on the fixture.
    pub fn table2(&self) -> Result<ExperimentReport> {
        let started = Instant::now();
        let mut report = ExperimentReport::new("table2", &self.cfg);
        let dir = self.report_dir("table2");
        let base = self.detection_row(Mode::Baseline)?;
        let full = self.detection_row(Mode::Full)?;
        let gain = full.value("ap").unwrap_or(0.0) - base.value("ap").unwrap_or(0.0);
        report.rows.push(base);
        report.rows.push(full);
        report.assert(
            "adapted_ap_gain",
            gain >= TABLE2_MIN_GAIN,
            format!("adapted AP - baseline AP = {gain:.4} (required >= {TABLE2_MIN_GAIN})"),
        );
        let sizes: Vec<f64> = report.rows.iter().map(|r| r.value("train_size_fake").unwrap_or(0.0)).collect();
        report.assert(
            "equal_training_sizes",
            sizes.windows(2).all(|w| w[0] == w[1]),
            format!("{sizes:?}"),
        );
        self.sample_grid(&mut report, &dir, &[Mode::Baseline, Mode::Full])?;
        self.disjointness(&mut report)?;
        self.finish(report, started)
    }

    /// Full pipeline against shifting only and mixing only.
    pub fn ablation(&self) -> Result<ExperimentReport> {
        let started = Instant::now();
        let mut report = ExperimentReport::new("ablation", &self.cfg);
        let dir = self.report_dir("ablation");
        for m in [Mode::Full, Mode::ShiftOnly, Mode::MixOnly, Mode::Baseline] {
            report.rows.push(self.detection_row(m)?);
        }
        let ap = |m: Mode| report.value(m.name(), "ap").unwrap_or(0.0);
        let (full, shift, mix) = (ap(Mode::Full), ap(Mode::ShiftOnly), ap(Mode::MixOnly));
        report.assert(
            "full_beats_shift_only",
            full > shift,
            format!("full {full:.4} vs shift_only {shift:.4}"),
        );
        report.assert(
            "full_beats_mix_only",
            full > mix,
            format!("full {full:.4} vs mix_only {mix:.4}"),
        );
        self.sample_grid(&mut report, &dir, &[Mode::Full, Mode::ShiftOnly, Mode::MixOnly])?;
        self.disjointness(&mut report)?;
        self.finish(report, started)
    }

    /// Projection and shifting under four distance configurations.
    pub fn loss_ablation(&self) -> Result<ExperimentReport> {
        let started = Instant::now();
        let mut report = ExperimentReport::new("loss", &self.cfg);
        let dir = self.report_dir("loss");
        let target = self.held_out()?.target.clone();
        let judge = self.cfg.distance.clone();
        let variants = [
            ("l1", DistanceConfig::l1_only()),
            ("l2", DistanceConfig::l2_only()),
            ("perceptual", DistanceConfig {
                tap_layers: judge.tap_layers.clone(),
                reduction: judge.reduction,
                ..DistanceConfig::perceptual_only()
            }),
            ("combined", judge.clone()),
        ];
        let mut panels = vec![target.clone()];
        let mut finals = Vec::new();
        for (name, dist) in variants {
            let cfg = PipelineConfig {
                distance: dist,
                ..self.cfg.clone()
            };
            let a = pipeline::adapt(&cfg, &self.base, &self.extractor, &target, self.cfg.stage_seed("adapt"))?;
            let recon = a.model.synthesize(&a.style, &a.noise)?;
            let d = combined_distance(&recon, &target, &self.extractor, &judge)?;
            finals.push((name, d));
            report.rows.push(
                ReportRow::new(name)
                    .with("final_combined_distance", d)
                    .with("projection_loss", a.projection_loss)
                    .with("shift_loss", a.shift_loss),
            );
            panels.push(recon);
        }
        report.image(&dir, "reconstructions.png", &grid(&refs(&panels), panels.len()))?;
        let best = finals
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("four variants");
        report.assert(
            "combined_lowest_distance",
            best.0 == "combined",
            finals.iter().map(|(n, d)| format!("{n} {d:.3}")).collect::<Vec<_>>().join(", "),
        );
        report.assert(
            "grid_has_input_plus_four",
            panels.len() == 5,
            format!("{} panels", panels.len()),
        );
        self.finish(report, started)
    }

    fn finetune(&self, model: &Generator, images: &[Image], purpose: &str) -> Result<Generator> {
        pipeline::finetune(&self.cfg, model, images, purpose)
    }

    fn random_images(&self, model: &Generator, n: usize, purpose: &str) -> Result<Vec<Image>> {
        Ok(model
            .sample_random(n, self.cfg.stage_seed(purpose))?
            .into_iter()
            .map(|s| s.image)
            .collect())
    }

    /// Direct few-shot classifiers and few-shot fine-tuning against the one-shot pipeline.
    pub fn fewshot(&self) -> Result<ExperimentReport> {
        let started = Instant::now();
        let mut report = ExperimentReport::new("fewshot", &self.cfg);
        let dir = self.report_dir("fewshot");
        let x = &self.cfg.experiment;
        let most = x.shots.iter().copied().max().expect("validated");
        let pool = pipeline::domain_faces(&self.cfg, &self.domain, most, "shots");
        let shots_ds = pipeline::write_images(&self.dataset_dir("shots"), &pool, "target")?;
        self.note_training_set(&shots_ds)?;
        let real = self.held_out()?.real_train.clone();
        let base_div = pairwise_diversity(&self.random_images(&self.base, DIVERSITY_SAMPLES, "diversity")?);
        let mut direct = Vec::new();
        let mut panels = Vec::new();
        for &n in &x.shots {
            let (det, _) = self.train_binary(&refs(&real), &refs(&pool[..n]), &format!("direct-{n}"))?;
            let m = self.evaluate(&det)?;
            direct.push((n, m.average_precision));
            report.rows.push(ReportRow::new(format!("direct_{n}")).with("shots", n as f64).with_metrics(m));

            let tuned = self.finetune(&self.base, &pool[..n], &format!("finetune-{n}"))?;
            let fake = self.random_images(&tuned, x.samples, &format!("finetune-{n}-samples"))?;
            let (det, _) = self.train_binary(&refs(&real), &refs(&fake), &format!("finetune-{n}"))?;
            let m = self.evaluate(&det)?;
            let div = pairwise_diversity(&fake[..DIVERSITY_SAMPLES.min(fake.len())]);
            report.rows.push(
                ReportRow::new(format!("finetune_{n}"))
                    .with("shots", n as f64)
                    .with("diversity", div)
                    .with("diversity_drop", 1.0 - div / base_div)
                    .with_metrics(m),
            );
            panels.extend(fake.into_iter().take(8));
        }
        let ours = self.detection(Mode::Full)?;
        report.rows.push(ReportRow::new("one_shot_pipeline").with("shots", 1.0).with_metrics(ours.metrics.clone()));
        report.rows.push(ReportRow::new("base_model").with("diversity", base_div));

        let monotone = direct.windows(2).all(|w| w[1].1 >= w[0].1 - FEWSHOT_SLACK);
        report.assert(
            "direct_ap_non_decreasing",
            monotone,
            direct.iter().map(|(n, ap)| format!("{n}: {ap:.4}")).collect::<Vec<_>>().join(", "),
        );
        if let Some(drop) = report.value(&format!("finetune_{}", x.shots[0]), "diversity_drop") {
            report.assert(
                "one_shot_finetune_collapse",
                x.shots[0] != 1 || drop >= COLLAPSE_MIN_DROP,
                format!("diversity drop {drop:.3} at {} shot(s) (required >= {COLLAPSE_MIN_DROP} at 1 shot)", x.shots[0]),
            );
        }
        report.image(&dir, "finetuned_samples.png", &grid(&refs(&panels), 8))?;
        self.disjointness(&mut report)?;
        self.finish(report, started)
    }

    /// t-SNE of reference-detector features for unadapted, adapted and target images.
    pub fn embed(&self) -> Result<ExperimentReport> {
        let started = Instant::now();
        let mut report = ExperimentReport::new("embed", &self.cfg);
        let dir = self.report_dir("embed");
        let x = &self.cfg.experiment;
        let d = self.held_out()?;
        // A detector that has seen the true domain, used only as a feature space.
        let reference_fake = pipeline::domain_faces(&self.cfg, &self.domain, x.real_train, "reference-target");
        let ref_ds = pipeline::write_images(&self.dataset_dir("reference-target"), &reference_fake, "target")?;
        self.note_training_set(&ref_ds)?;
        let (reference, _) = self.train_binary(&refs(&d.real_train), &refs(&reference_fake), "reference")?;

        let unadapted = self.detection(Mode::Baseline)?;
        let adapted = self.detection(Mode::Full)?;
        let n = x.embed_points;
        let target_ds = &d.test_sets[1];
        let sets: [(&str, Vec<&Image>, &Dataset); 3] = [
            ("unadapted", unadapted.samples.iter().take(n).map(|s| &s.image).collect(), &unadapted.dataset),
            ("adapted", adapted.samples.iter().take(n).map(|s| &s.image).collect(), &adapted.dataset),
            ("target", d.test_target.iter().take(n).collect(), target_ds),
        ];
        let mut points = Vec::new();
        let mut rows = Vec::new();
        for (label, imgs, ds) in &sets {
            points.extend(reference.features(imgs)?);
            for e in ds.entries.iter().take(imgs.len()) {
                let rel = ds.dir.join(&e.path);
                let rel = rel.strip_prefix(&self.root).unwrap_or(&rel).display().to_string();
                rows.push((label.to_string(), rel));
            }
        }
        let tsne_cfg = TsneConfig {
            perplexity: x.tsne_perplexity,
            iterations: x.tsne_iterations,
            seed: self.cfg.stage_seed("tsne"),
            ..TsneConfig::default()
        };
        let y = tsne(&points, &tsne_cfg)?;
        let mut tsv = String::from("x\ty\tlabel\tpath\n");
        for (p, (label, path)) in y.iter().zip(&rows) {
            writeln!(tsv, "{}\t{}\t{label}\t{path}", p[0], p[1]).expect("string write");
        }
        report.artifact(&dir, EMBEDDINGS_FILE, tsv.as_bytes())?;

        let pick = |a: &str, b: &str| -> (Vec<[f64; 2]>, Vec<bool>) {
            rows.iter()
                .zip(&y)
                .filter(|((l, _), _)| l == a || l == b)
                .map(|((l, _), p)| (*p, l == b))
                .unzip()
        };
        let seed = self.cfg.stage_seed("separation");
        let (pa, la) = pick("adapted", "target");
        let (pu, lu) = pick("unadapted", "target");
        let s_adapted = separation_score(&pa, &la, x.separation_k, seed)?;
        let s_unadapted = separation_score(&pu, &lu, x.separation_k, seed)?;
        report.rows.push(ReportRow::new("adapted_vs_target").with("separation", s_adapted));
        report.rows.push(ReportRow::new("unadapted_vs_target").with("separation", s_unadapted));
        report.rows.push(ReportRow::new("points").with("count", y.len() as f64));
        report.assert(
            "adapted_closer_to_target",
            s_adapted < s_unadapted,
            format!("separation adapted {s_adapted:.4} vs unadapted {s_unadapted:.4}"),
        );
        report.assert(
            "one_row_per_image",
            y.len() == sets.iter().map(|s| s.1.len()).sum::<usize>(),
            format!("{} rows", y.len()),
        );
        self.disjointness(&mut report)?;
        self.finish(report, started)
    }

    /// Four-way classifier over real images and three adapted domains.
    pub fn multidomain(&self) -> Result<ExperimentReport> {
        let started = Instant::now();
        let mut report = ExperimentReport::new("multidomain", &self.cfg);
        let dir = self.report_dir("multidomain");
        let x = &self.cfg.experiment;
        let d = self.held_out()?;
        let mut train: Vec<Vec<Image>> = vec![d.real_train.clone()];
        let mut test: Vec<Vec<Image>> = vec![d.test_real.clone()];
        let mut panels = Vec::new();
        for name in MULTIDOMAIN_FIXTURES {
            let domain = Domain::fixture(name).expect("known fixture");
            let target = pipeline::fixture_target(&self.cfg, &domain);
            let a = pipeline::adapt(&self.cfg, &self.base, &self.extractor, &target, self.cfg.stage_seed("adapt"))?;
            let mix = self.cfg.mix_config(x.samples, &format!("multidomain-{name}"));
            let samples = pipeline::synthesize_set(&self.base, &a.model, &a.style, Mode::Full, &mix)?;
            panels.push(target);
            panels.extend(samples.iter().take(7).map(|s| s.image.clone()));
            train.push(images(&samples));
            test.push(pipeline::domain_faces(&self.cfg, &domain, x.test_size, "test-target"));
        }
        let imgs: Vec<&Image> = train.iter().flatten().collect();
        let labels: Vec<usize> = train.iter().enumerate().flat_map(|(c, s)| std::iter::repeat_n(c, s.len())).collect();
        let (det, _) = train_classifier(
            &imgs,
            &labels,
            self.cfg.detector_config(train.len()),
            &self.cfg.detector_training("multidomain"),
        )?;
        let test_refs: Vec<Vec<&Image>> = test.iter().map(|s| refs(s)).collect();
        let sets: Vec<&[&Image]> = test_refs.iter().map(|s| s.as_slice()).collect();
        let m: MulticlassMetrics = det.evaluate_multiclass(&sets)?;
        let names = ["real"].into_iter().chain(MULTIDOMAIN_FIXTURES);
        for (name, c) in names.zip(&m.per_class) {
            report.rows.push(
                ReportRow::new(name)
                    .with("recall", c.recall)
                    .with("precision", c.precision),
            );
        }
        report.rows.push(
            ReportRow::new("overall")
                .with("accuracy", m.accuracy)
                .with("mean_class_accuracy", m.mean_class_accuracy),
        );
        let chance = 1.0 / train.len() as f64;
        report.assert(
            "above_chance",
            m.mean_class_accuracy > chance,
            format!("mean class accuracy {:.4} vs chance {chance:.4}", m.mean_class_accuracy),
        );
        report.image(&dir, "domains.png", &grid(&refs(&panels), 8))?;
        self.finish(report, started)
    }

    /// Cross fine-tuning among three generators of graded capacity.
    pub fn capacity(&self) -> Result<ExperimentReport> {
        let started = Instant::now();
        let mut report = ExperimentReport::new("capacity", &self.cfg);
        let dir = self.report_dir("capacity");
        let x = &self.cfg.experiment;
        let corpus = pipeline::base_corpus(&self.cfg)?;
        let real = self.held_out()?.real_train.clone();
        let test_real = self.held_out()?.test_real.clone();
        let ladders: [(&str, Vec<usize>); 3] = [
            ("small", vec![8, 8, 4, 4]),
            ("medium", vec![16, 16, 8, 8]),
            ("large", GeneratorConfig::default().channels),
        ];
        let mut models = Vec::new();
        for (name, channels) in &ladders {
            let mut gc = self.cfg.generator_config();
            gc.channels = channels.clone();
            gc.channels.resize(self.cfg.generator_config().num_blocks(), *channels.last().expect("non-empty"));
            let mut gan = self.cfg.gan_config();
            gan.steps = x.capacity_steps;
            gan.steps_per_epoch = gan.steps;
            gan.seed = self.cfg.stage_seed(&format!("capacity-{name}"));
            let (g, _) = train_base(&corpus, gc, &gan, &mut NoObserver)?;
            report.rows.push(ReportRow::new(*name).with("parameters", g.params().num_scalars() as f64));
            models.push((*name, g));
        }
        let mut acc = BTreeMap::new();
        let mut panels = Vec::new();
        let mut pair = |report: &mut ExperimentReport, a_name: &str, a: &Generator, b_name: &str, b: &Generator| -> Result<f64> {
            let b_train = self.random_images(b, x.samples, &format!("capacity-{b_name}-train"))?;
            let tuned = self.finetune(a, &b_train, &format!("capacity-{a_name}-to-{b_name}"))?;
            let fake = self.random_images(&tuned, x.samples, &format!("capacity-{a_name}-to-{b_name}-samples"))?;
            let (det, _) = self.train_binary(&refs(&real), &refs(&fake), &format!("capacity-{a_name}-{b_name}"))?;
            let b_test = self.random_images(b, x.test_size, &format!("capacity-{b_name}-test"))?;
            let m = det.evaluate(&refs(&test_real), &refs(&b_test))?;
            let accuracy = m.accuracy;
            if a_name != b_name {
                panels.extend(fake.into_iter().take(4));
            }
            report.rows.push(ReportRow::new(format!("{a_name}->{b_name}")).with_metrics(m));
            Ok(accuracy)
        };
        for (a_name, a) in &models {
            for (b_name, b) in &models {
                if a_name != b_name {
                    acc.insert((*a_name, *b_name), pair(&mut report, a_name, a, b_name, b)?);
                }
            }
        }
        // Degenerate pair: the tuned model imitates itself, so the detector sees B's own distribution.
        let (own_name, own) = &models[0];
        let own_acc = pair(&mut report, own_name, own, own_name, own)?;
        report.assert(
            "self_pair_at_least_chance",
            own_acc >= 0.5,
            format!("{own_name}->{own_name} accuracy {own_acc:.3}"),
        );
        let m = models.len();
        report.assert(
            "one_row_per_ordered_pair",
            acc.len() == m * (m - 1),
            format!("{} pairs for {m} models", acc.len()),
        );
        let mut detail = Vec::new();
        let mut ordered = true;
        for (i, (hi, _)) in models.iter().enumerate().rev() {
            for (lo, _) in models.iter().take(i) {
                let (up, down) = (acc[&(*hi, *lo)], acc[&(*lo, *hi)]);
                ordered &= up > down;
                detail.push(format!("{hi}->{lo} {up:.3} vs {lo}->{hi} {down:.3}"));
            }
        }
        report.assert("higher_capacity_mimics_better", ordered, detail.join(", "));
        report.image(&dir, "finetuned_samples.png", &grid(&refs(&panels), 8))?;
        self.disjointness(&mut report)?;
        self.finish(report, started)
    }
}

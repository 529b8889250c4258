use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use oneshot_core::detector::train_classifier;
use oneshot_core::tsne::{tsne, TsneConfig};
use oneshot_core::Image;
use serde_json::json;

use oneshot::checkpoint;
use oneshot::config::PipelineConfig;
use oneshot::experiments::{Lab, EXPERIMENTS};
use oneshot::imageio::write_png;
use oneshot::ingest::{ingest, FaceBox, IngestSpec, DEFAULT_CROP_SCALE};
use oneshot::manifest::Dataset;
use oneshot::pipeline::{self, AdaptationRecord, Mode};
use oneshot::rundir::{RunDir, CONFIG_SNAPSHOT};

#[derive(Parser)]
#[command(name = "oneshot", version, about = "One-shot generator adaptation and detector training")]
struct Cli {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Source {
    Baseline,
    Full,
    ShiftOnly,
    MixOnly,
    /// Held-out procedural real faces.
    Real,
    /// Procedural faces passed through the configured fixture domain.
    Target,
}

impl Source {
    fn mode(self) -> Option<Mode> {
        match self {
            Source::Baseline => Some(Mode::Baseline),
            Source::Full => Some(Mode::Full),
            Source::ShiftOnly => Some(Mode::ShiftOnly),
            Source::MixOnly => Some(Mode::MixOnly),
            Source::Real | Source::Target => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Source::Real => "real",
            Source::Target => "target",
            other => other.mode().expect("generator source").name(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load) the base generator and the perceptual feature extractor.
    TrainBase,
    /// Project one target image and shift the generator toward it.
    Adapt {
        /// Target image; omit to use the configured fixture's one-shot example.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Face box in pixels as x,y,w,h. Full frame when omitted.
        #[arg(long = "box", value_parser = parse_box)]
        face: Option<FaceBox>,
        #[arg(long, default_value_t = DEFAULT_CROP_SCALE)]
        scale: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for adaptation.json and the shifted model.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic or procedural dataset with a manifest.
    Generate {
        /// Directory written by `adapt` (needed for generator sources).
        #[arg(long)]
        adaptation: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Source::Full)]
        source: Source,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a real-versus-fake detector on two datasets.
    TrainDetector {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a detector on held-out real and fake datasets.
    Evaluate {
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
    },
    /// Run a scripted experiment and write its report.
    Experiment {
        id: String,
        /// Overrides `experiment.fixture`.
        #[arg(long)]
        fixture: Option<String>,
        /// Exit nonzero when any report check fails.
        #[arg(long)]
        strict: bool,
    },
    /// Export a joint t-SNE of detector features for labelled datasets.
    Embed {
        #[arg(long)]
        detector: PathBuf,
        /// label=dataset_dir, repeatable.
        #[arg(long = "set", value_parser = parse_set, required = true)]
        sets: Vec<(String, PathBuf)>,
        /// Points taken from each set.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_box(s: &str) -> Result<FaceBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, width, height] => Ok(FaceBox { x, y, width, height }),
        _ => Err(format!("expected x,y,w,h, got {} values", v.len())),
    }
}

fn parse_set(s: &str) -> Result<(String, PathBuf), String> {
    let (label, dir) = s.split_once('=').ok_or("expected label=dir")?;
    if label.is_empty() || label.contains(['\t', '\n']) {
        return Err(format!("bad label {label:?}"));
    }
    Ok((label.to_string(), PathBuf::from(dir)))
}

fn load_config(path: Option<&Path>) -> anyhow::Result<PipelineConfig> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => {
            let mut cfg = PipelineConfig::default();
            cfg.resolve(&std::env::current_dir()?);
            cfg.validate()?;
            cfg
        }
    })
}

fn emit(run: &RunDir, command: &str, summary: serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(&summary)?;
    let p = run.logs().join(format!("{command}.json"));
    fs::write(&p, &text).with_context(|| format!("writing {}", p.display()))?;
    println!("{text}");
    Ok(())
}

fn refs(v: &[Image]) -> Vec<&Image> {
    v.iter().collect()
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Command::Experiment { fixture: Some(f), .. } = &cli.command {
        cfg.experiment.fixture = f.clone();
        cfg.validate()?;
    }
    let run = RunDir::open(&cfg.output_root())?;
    run.write_snapshot(&cfg.to_toml())?;
    let root = run.root().to_path_buf();

    match cli.command {
        Command::TrainBase => {
            let (base, extractor) = pipeline::ensure_models(&cfg)?;
            emit(&run, "train-base", json!({
                "base_checkpoint": cfg.base_checkpoint(),
                "base_version": base.version(),
                "parameters": base.params().num_scalars(),
                "extractor_checkpoint": cfg.extractor_checkpoint(),
                "extractor_layers": extractor.config().channels.len(),
            }))?;
        }
        Command::Adapt { target, face, scale, seed, out } => {
            let image = match &target {
                Some(path) => ingest(&IngestSpec {
                    path: path.clone(),
                    face,
                    scale,
                    resolution: cfg.resolution,
                })?,
                None => pipeline::fixture_target(&cfg, &cfg.fixture()?),
            };
            let (base, extractor) = pipeline::ensure_models(&cfg)?;
            let seed = seed.unwrap_or_else(|| cfg.stage_seed("adapt"));
            let result = pipeline::adapt(&cfg, &base, &extractor, &image, seed)?;
            let out = out.unwrap_or_else(|| root.join("checkpoints").join(format!("adapted-{seed}")));
            let record = AdaptationRecord::new(&cfg, &base, &result);
            let path = pipeline::write_adaptation(&out, &record, &result.model)?;
            write_png(&out.join("target.png"), &image)?;
            write_png(&out.join("projected.png"), &base.synthesize(&result.style, &result.noise)?)?;
            write_png(&out.join("shifted.png"), &result.model.synthesize(&result.style, &result.noise)?)?;
            emit(&run, "adapt", json!({
                "adaptation": path,
                "seed": seed,
                "target_sha256": record.target_sha256,
                "projection_loss": record.projection_loss,
                "shift_loss": record.shift_loss,
                "model_version": record.model_version,
            }))?;
        }
        Command::Generate { adaptation, n, source, seed, out } => {
            let out = out.unwrap_or_else(|| run.datasets().join(source.name()));
            let seed = seed.unwrap_or_else(|| cfg.stage_seed("generate"));
            let dataset = match source.mode() {
                Some(mode) => {
                    let Some(dir) = adaptation else {
                        bail!("--source {} needs --adaptation <dir>", source.name());
                    };
                    let (record, shifted) = pipeline::read_adaptation(&dir)?;
                    let base = checkpoint::load_generator(&cfg.base_checkpoint())?;
                    if base.version() != record.base_version {
                        bail!(
                            "base checkpoint version {} does not match the adaptation's {}",
                            base.version(),
                            record.base_version
                        );
                    }
                    let mix = oneshot_core::mixing::MixConfig {
                        seed,
                        ..cfg.mix_config(n, "generate")
                    };
                    let samples = pipeline::synthesize_set(&base, &shifted, &record.style()?, mode, &mix)?;
                    let version = if matches!(mode, Mode::Full | Mode::ShiftOnly) {
                        shifted.version().to_string()
                    } else {
                        base.version().to_string()
                    };
                    let k = if matches!(mode, Mode::Full | Mode::MixOnly) { mix.k } else { 0 };
                    pipeline::write_samples(&out, &samples, mode.name(), k, &version)?
                }
                None => {
                    let stream = format!("generate-{}-{seed}", source.name());
                    let images = match source {
                        Source::Real => pipeline::faces(&cfg, n, &stream),
                        _ => pipeline::domain_faces(&cfg, &cfg.fixture()?, n, &stream),
                    };
                    pipeline::write_images(&out, &images, source.name())?
                }
            };
            dataset.verify()?;
            emit(&run, "generate", json!({
                "dataset": out,
                "entries": dataset.len(),
                "digest": dataset.digest()?,
                "source": source.name(),
            }))?;
        }
        Command::TrainDetector { real, fake, out } => {
            let real = Dataset::open(&real)?.load_images()?;
            let fake = Dataset::open(&fake)?.load_images()?;
            let all: Vec<&Image> = real.iter().chain(&fake).collect();
            let labels: Vec<usize> = (0..all.len()).map(|i| (i >= real.len()) as usize).collect();
            let opts = cfg.detector_training("cli");
            let (detector, log) = train_classifier(&all, &labels, cfg.detector_config(2), &opts)?;
            let out = out.unwrap_or_else(|| run.checkpoints().join("detector"));
            checkpoint::save_detector(&out, &detector, opts.seed)?;
            emit(&run, "train-detector", json!({
                "detector": out,
                "best_epoch": log.best_epoch,
                "steps": log.steps,
                "validation": log.validation,
            }))?;
        }
        Command::Evaluate { detector, real, fake } => {
            let detector = checkpoint::load_detector(&detector)?;
            let real = Dataset::open(&real)?.load_images()?;
            let fake = Dataset::open(&fake)?.load_images()?;
            let metrics = detector.evaluate(&refs(&real), &refs(&fake))?;
            emit(&run, "evaluate", serde_json::to_value(&metrics)?)?;
        }
        Command::Experiment { id, strict, .. } => {
            if !EXPERIMENTS.contains(&id.as_str()) {
                bail!("unknown experiment {id:?}, expected one of {}", EXPERIMENTS.join(", "));
            }
            let (base, extractor) = pipeline::ensure_models(&cfg)?;
            let lab = Lab::new(cfg, &root, base, extractor)?;
            let report = lab.run(&id)?;
            for c in &report.checks {
                eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            emit(&run, &format!("experiment-{id}"), json!({
                "report": lab.report_dir(&id).join(oneshot::experiments::REPORT_FILE),
                "passed": report.passed(),
                "rows": report.rows,
            }))?;
            return Ok(report.passed() || !strict);
        }
        Command::Embed { detector, sets, limit, out } => {
            let detector = checkpoint::load_detector(&detector)?;
            let mut points = Vec::new();
            let mut rows = Vec::new();
            for (label, dir) in &sets {
                let ds = Dataset::open(dir)?;
                let mut images = ds.load_images()?;
                let take = limit.unwrap_or(images.len()).min(images.len());
                images.truncate(take);
                points.extend(detector.features(&refs(&images))?);
                rows.extend(ds.entries.iter().take(take).map(|e| (label.clone(), dir.join(&e.path))));
            }
            let y = tsne(&points, &TsneConfig {
                perplexity: cfg.experiment.tsne_perplexity,
                iterations: cfg.experiment.tsne_iterations,
                seed: cfg.stage_seed("tsne"),
                ..TsneConfig::default()
            })?;
            let mut tsv = String::from("x\ty\tlabel\tpath\n");
            for (p, (label, path)) in y.iter().zip(&rows) {
                tsv.push_str(&format!("{}\t{}\t{label}\t{}\n", p[0], p[1], path.display()));
            }
            let out = out.unwrap_or_else(|| run.reports().join("embed").join("embeddings.tsv"));
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&out, tsv).with_context(|| format!("writing {}", out.display()))?;
            emit(&run, "embed", json!({ "embeddings": out, "points": y.len() }))?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("oneshot: report checks failed (see {CONFIG_SNAPSHOT} and reports/)");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("oneshot: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

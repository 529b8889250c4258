//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! The base generator and feature extractor are trained once, from the
//! default config, and shared by every criterion that needs them.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use oneshot::config::PipelineConfig;
use oneshot::experiments::Lab;
use oneshot::imageio::write_png;
use oneshot::manifest::Dataset;
use oneshot::pipeline;
use oneshot_core::adapt::{project, reconstruction, ProjectionConfig};
use oneshot_core::corpus::{toy_corpus, Domain};
use oneshot_core::generator::{LatentCode, NoiseInput, StyleVector};
use oneshot_core::graph::Graph;
use oneshot_core::metrics::{average_precision, DetectorMetrics};
use oneshot_core::mixing::mix_styles;
use oneshot_core::perceptual::{combined_distance, DistanceConfig, DistanceTarget, ExtractorConfig, FeatureExtractor};
use oneshot_core::rng;
use oneshot_core::train::pairwise_diversity;
use oneshot_core::{Generator, GeneratorConfig, Image, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};

const GRAD_TOLERANCE: f64 = 1e-3;
const PROJECTION_RATIO: f64 = 0.1;
const PROJECTION_MAX_ITERS: usize = 1000;
const PROJECTION_TARGETS: u64 = 10;
const SHIFT_MIN_GAIN: f64 = 0.2;
const TABLE2_MIN_GAIN: f64 = 0.2;
const COLLAPSE_MIN_DROP: f64 = 0.5;
const AP_TOLERANCE: f64 = 1e-12;
const DISTANCE_PAIRS: u64 = 100;

type Check = anyhow::Result<(bool, String)>;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
    budget: f64,
}

struct Suite {
    outcomes: Vec<Outcome>,
}

impl Suite {
    /// `extra` is time already spent on shared setup that counts toward the budget.
    fn run(&mut self, id: usize, name: &'static str, budget: f64, extra: f64, f: impl FnOnce() -> Check) {
        let started = Instant::now();
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e:#}")),
        };
        let seconds = started.elapsed().as_secs_f64() + extra;
        let o = Outcome {
            id,
            name,
            passed: ok && seconds < budget,
            detail,
            seconds,
            budget,
        };
        print_line(&o);
        self.outcomes.push(o);
    }
}

fn print_line(o: &Outcome) {
    println!(
        "{} [{:>2}] {}: {} ({:.1}s, budget {:.0}s)",
        if o.passed { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.detail,
        o.seconds,
        o.budget
    );
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Analytic versus central-difference gradients of the combined distance,
/// in double precision, on an 8×8 two-block generator.
fn gradient_suite() -> Check {
    let gcfg = GeneratorConfig {
        resolution: 8,
        style_dim: 8,
        mapping_layers: 2,
        channels: vec![8, 8],
    };
    let model = Generator::<f32>::new(gcfg.clone(), 21)?.cast::<f64>();
    let ext = FeatureExtractor::<f32>::new(
        ExtractorConfig {
            resolution: 8,
            channels: vec![4, 4, 4, 4],
            classes: 2,
        },
        22,
    )?
    .cast::<f64>();
    let target = toy_corpus(8, 1, 23).remove(0).0;
    let dist = DistanceConfig::combined();
    let dt = DistanceTarget::from_image(&ext, &dist, &target)?;
    let noise = NoiseInput::<f32>::sample(&gcfg, 24).cast::<f64>();
    let style: Tensor<f64> = Generator::<f32>::new(gcfg.clone(), 21)?
        .map(&LatentCode::sample(8, 25))?
        .cast::<f64>()
        .to_tensor();

    let loss_at = |m: &Generator<f64>, s: &Tensor<f64>| -> f64 {
        let mut g = Graph::new();
        let b = m.params().bind(&mut g, |_| false);
        let sv = g.input(s.clone());
        let l = reconstruction(&mut g, m, &b, sv, &noise, &dt);
        g.value(l).item()
    };

    let mut g = Graph::new();
    let bound = model.params().bind(&mut g, |n| n.starts_with("synthesis."));
    let sv = g.param(style.clone());
    let l = reconstruction(&mut g, &model, &bound, sv, &noise, &dt);
    let mut grads = g.backward(l);
    let style_grad = grads.get(sv).cloned().expect("style gradient");
    let weight_grads = bound.gradients(&mut grads);

    let h = 1e-6;
    let mut worst_style: f64 = 0.0;
    for i in 0..style.len() {
        let mut p = style.clone();
        p.data_mut()[i] += h;
        let mut m = style.clone();
        m.data_mut()[i] -= h;
        let fd = (loss_at(&model, &p) - loss_at(&model, &m)) / (2.0 * h);
        worst_style = worst_style.max(rel_err(style_grad.data()[i], fd));
    }

    let mut r = rng::rng(26);
    let mut worst_weight: f64 = 0.0;
    let mut checked = 0;
    for (idx, grad) in weight_grads.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let n = grad.len();
        for _ in 0..n.min(6) {
            let i = rng::below(&mut r, n);
            let mut plus = model.clone();
            plus.params_mut().tensor_mut(idx).data_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut().tensor_mut(idx).data_mut()[i] -= h;
            let fd = (loss_at(&plus, &style) - loss_at(&minus, &style)) / (2.0 * h);
            worst_weight = worst_weight.max(rel_err(grad.data()[i], fd));
            checked += 1;
        }
    }
    Ok((
        worst_style < GRAD_TOLERANCE && worst_weight < GRAD_TOLERANCE && checked > 0,
        format!(
            "max relative error {worst_style:.2e} over {} style entries, {worst_weight:.2e} over {checked} synthesis weights (< {GRAD_TOLERANCE:e})",
            style.len()
        ),
    ))
}

fn random_image(r: usize, seed: u64) -> Image {
    let mut g = rng::rng(seed);
    let data: Vec<f32> = (0..3 * r * r).map(|_| rng::uniform(&mut g) as f32 * 2.0 - 1.0).collect();
    Image::from_tensor(Tensor::from_vec(&[3, r, r], data).expect("shape")).expect("in range")
}

fn distance_axioms(ext: &FeatureExtractor) -> Check {
    let faces: Vec<Image> = toy_corpus(32, DISTANCE_PAIRS as usize, 31).into_iter().map(|(i, _)| i).collect();
    let zero = DistanceConfig {
        lambda: 0.0,
        ..DistanceConfig::combined()
    };
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for i in 0..DISTANCE_PAIRS {
        // Half the pairs are face/face, half face/noise.
        let x = &faces[i as usize];
        let y = if i % 2 == 0 {
            faces[(i as usize + 1) % faces.len()].clone()
        } else {
            random_image(32, 1000 + i)
        };
        let c = DistanceConfig::combined();
        let dxx = combined_distance(x, x, ext, &c)?;
        let dxy = combined_distance(x, &y, ext, &c)?;
        let dyx = combined_distance(&y, x, ext, &c)?;
        let d0 = combined_distance(x, &y, ext, &zero)?;
        let d1 = combined_distance(x, &y, ext, &DistanceConfig { lambda: 1.0, ..c.clone() })?;
        if dxx != 0.0 {
            failures.push(format!("pair {i}: D(x,x) = {dxx}"));
        }
        if dxy < 0.0 || d0 < 0.0 {
            failures.push(format!("pair {i}: negative distance"));
        }
        worst = worst.max(rel_err(dxy, dyx));
        for lambda in [0.5, 5.0, 20.0] {
            let dl = combined_distance(x, &y, ext, &DistanceConfig { lambda, ..c.clone() })?;
            worst = worst.max(rel_err(dl - d0, lambda * (d1 - d0)));
        }
    }
    let ok = failures.is_empty() && worst < 1e-9;
    let mut detail = format!("{DISTANCE_PAIRS} pairs, max relative asymmetry/linearity error {worst:.1e}");
    if !failures.is_empty() {
        detail.push_str(&format!("; {}", failures.join("; ")));
    }
    Ok((ok, detail))
}

fn mixing_algebra() -> Check {
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 512,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let strategy = ((2usize..9).prop_map(|h| 2 * h), 1usize..8)
        .prop_flat_map(|(l, d)| {
            (
                Just(l),
                Just(d),
                proptest::collection::vec(-4.0f32..4.0, l * d),
                proptest::collection::vec(-4.0f32..4.0, l * d),
                0..=l,
            )
        });
    let result = runner.run(&strategy, |(l, d, a, b, k)| {
        let s = StyleVector::from_values(l, d, a).unwrap();
        let t = StyleVector::from_values(l, d, b).unwrap();
        prop_assert_eq!(&mix_styles(&s, &s, k).unwrap(), &s);
        prop_assert_eq!(&mix_styles(&s, &t, 0).unwrap(), &s);
        prop_assert_eq!(&mix_styles(&s, &t, l).unwrap(), &t);
        let m = mix_styles(&s, &t, k).unwrap();
        for layer in 0..l {
            let want = if layer < l - k { s.layer(layer) } else { t.layer(layer) };
            prop_assert_eq!(m.layer(layer), want);
        }
        Ok(())
    });
    Ok(match result {
        Ok(()) => (true, "512 random (s, s_I, k) cases: idempotence, k=0, k=L and suffix exactness".into()),
        Err(e) => (false, e.to_string()),
    })
}

/// Brute-force AP: mean over positives of precision at the positive's rank.
fn oracle_ap(ranked_labels: &[bool]) -> f64 {
    let positives = ranked_labels.iter().filter(|&&p| p).count() as f64;
    let mut hits = 0.0;
    let mut total = 0.0;
    for (i, &p) in ranked_labels.iter().enumerate() {
        if p {
            hits += 1.0;
            total += hits / (i + 1) as f64;
        }
    }
    total / positives
}

fn ap_oracle() -> Check {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for n in 1..=8usize {
        for pattern in 1u32..(1 << n) {
            let ranked: Vec<bool> = (0..n).map(|i| pattern >> i & 1 == 1).collect();
            // Rank i gets score n - i; feed real and fake in an interleaved order.
            let mut real = Vec::new();
            let mut fake = Vec::new();
            for (i, &p) in ranked.iter().enumerate().rev() {
                let score = (n - i) as f64 / n as f64;
                if p { fake.push(score) } else { real.push(score) }
            }
            let scores: Vec<f64> = real.iter().chain(&fake).copied().collect();
            let labels: Vec<bool> = (0..scores.len()).map(|i| i >= real.len()).collect();
            let ap = average_precision(&scores, &labels)?;
            worst = worst.max((ap - oracle_ap(&ranked)).abs());
            if !real.is_empty() {
                let via_metrics = DetectorMetrics::from_scores(&real, &fake)?.average_precision;
                worst = worst.max((via_metrics - ap).abs());
            }
            checked += 1;
        }
    }
    Ok((
        worst <= AP_TOLERANCE,
        format!("{checked} label patterns of length 1..=8, max |AP - brute force| = {worst:.1e}"),
    ))
}

fn projection_recovery(cfg: &PipelineConfig, base: &Generator, ext: &FeatureExtractor) -> Check {
    let proj = ProjectionConfig {
        max_iters: PROJECTION_MAX_ITERS,
        ..cfg.projection.clone()
    };
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for i in 0..PROJECTION_TARGETS {
        let seed = rng::derive_index(cfg.stage_seed("acceptance-projection"), i);
        let s_star = base.map(&LatentCode::sample(base.style_dim(), seed))?;
        let target = base.synthesize(&s_star, &NoiseInput::sample(base.config(), seed))?;
        let p = project(base, &target, ext, &cfg.distance, &proj, seed)?;
        let ratio = p.best_loss / p.trace[0];
        worst = worst.max(ratio);
        ok &= ratio <= PROJECTION_RATIO && p.trace.len() <= PROJECTION_MAX_ITERS;
    }
    Ok((
        ok,
        format!("worst final/initial loss {worst:.4} over {PROJECTION_TARGETS} targets (<= {PROJECTION_RATIO})"),
    ))
}

fn shifting_efficacy(cfg: &PipelineConfig, base: &Generator, ext: &FeatureExtractor) -> Check {
    let domain = Domain::fixture("colorcast").expect("fixture");
    let target = pipeline::fixture_target(cfg, &domain);
    let a = pipeline::adapt(cfg, base, ext, &target, cfg.stage_seed("adapt"))?;
    let gain = 1.0 - a.shift_loss / a.projection_loss;
    Ok((
        gain >= SHIFT_MIN_GAIN,
        format!(
            "color-cast target: projection {:.2} -> shift {:.2}, reduction {:.1}% (>= {:.0}%)",
            a.projection_loss,
            a.shift_loss,
            100.0 * gain,
            100.0 * SHIFT_MIN_GAIN
        ),
    ))
}

fn report_check(lab: &Lab, id: &str, check: &str, row_detail: impl Fn(&oneshot::experiments::ExperimentReport) -> String) -> Check {
    let report = lab.run(id)?;
    let c = report
        .check(check)
        .ok_or_else(|| anyhow::anyhow!("report {id} has no check {check}"))?;
    let disjoint = report
        .check("test_sets_disjoint_from_training")
        .map_or(true, |d| d.passed);
    Ok((c.passed && disjoint, format!("{}; {}", c.detail, row_detail(&report))))
}

fn collapse(cfg: &PipelineConfig, base: &Generator) -> Check {
    let n = 100;
    let target = pipeline::fixture_target(cfg, &cfg.fixture()?);
    let tuned = pipeline::finetune(cfg, base, std::slice::from_ref(&target), "acceptance-collapse")?;
    let sample = |g: &Generator| -> anyhow::Result<Vec<Image>> {
        Ok(g.sample_random(n, cfg.stage_seed("acceptance-diversity"))?
            .into_iter()
            .map(|s| s.image)
            .collect())
    };
    let before = pairwise_diversity(&sample(base)?);
    let after = pairwise_diversity(&sample(&tuned)?);
    let drop = 1.0 - after / before;
    Ok((
        drop >= COLLAPSE_MIN_DROP,
        format!(
            "diversity {before:.4} -> {after:.4} after one-shot fine-tuning, drop {:.1}% (>= {:.0}%)",
            100.0 * drop,
            100.0 * COLLAPSE_MIN_DROP
        ),
    ))
}

fn cli(args: &[&str]) -> anyhow::Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_oneshot")).args(args).output()?;
    if !out.status.success() {
        anyhow::bail!("oneshot {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    }
    Ok(())
}

fn reproducibility(cfg: &PipelineConfig, dir: &Path) -> Check {
    let config = dir.join("cli.toml");
    let mut c = PipelineConfig::default();
    c.paths.output_root = dir.join("run");
    c.paths.base_checkpoint = Some(cfg.base_checkpoint());
    c.paths.extractor_checkpoint = Some(cfg.extractor_checkpoint());
    std::fs::write(&config, c.to_toml())?;
    let target = dir.join("t.png");
    write_png(&target, &pipeline::fixture_target(cfg, &cfg.fixture()?))?;

    let s = |p: &PathBuf| p.to_str().expect("utf-8 path").to_string();
    let mut json = Vec::new();
    let mut digests = Vec::new();
    for run in ["a", "b"] {
        let adapted = dir.join(format!("adapt-{run}"));
        let data = dir.join(format!("data-{run}"));
        cli(&["adapt", "--config", &s(&config), "--target", &s(&target), "--seed", "7", "--out", &s(&adapted)])?;
        cli(&["generate", "--config", &s(&config), "--adaptation", &s(&adapted), "--n", "100", "--out", &s(&data)])?;
        json.push(std::fs::read(adapted.join(pipeline::ADAPTATION_FILE))?);
        let ds = Dataset::open(&data)?;
        ds.verify()?;
        digests.push((ds.len(), ds.digest()?));
    }
    let same_json = json[0] == json[1];
    let same_data = digests[0] == digests[1];
    Ok((
        same_json && same_data && digests[0].0 == 100,
        format!(
            "adaptation.json identical: {same_json}; dataset digests identical: {same_data} ({} verified entries, {})",
            digests[0].0,
            &digests[0].1[..16]
        ),
    ))
}

fn main() {
    let mut suite = Suite { outcomes: Vec::new() };
    let tmp = tempfile::tempdir().expect("temp dir");

    suite.run(1, "gradient suite", 60.0, 0.0, gradient_suite);
    suite.run(3, "mixing algebra", 10.0, 0.0, mixing_algebra);
    suite.run(8, "AP oracle", 60.0, 0.0, ap_oracle);

    let started = Instant::now();
    let mut cfg = PipelineConfig::default();
    cfg.paths.output_root = tmp.path().join("run");
    cfg.resolve(tmp.path());
    let (base, ext) = match pipeline::ensure_models(&cfg) {
        Ok(m) => m,
        Err(e) => {
            println!("FAIL setup: training the base generator and extractor failed: {e}");
            std::process::exit(1);
        }
    };
    let setup = started.elapsed().as_secs_f64();
    println!("---- shared setup: base generator and extractor trained in {setup:.1}s");

    suite.run(2, "distance axioms", 10.0, 0.0, || distance_axioms(&ext));
    suite.run(4, "projection recovery", 900.0, 0.0, || projection_recovery(&cfg, &base, &ext));
    suite.run(5, "shifting efficacy", 600.0, 0.0, || shifting_efficacy(&cfg, &base, &ext));
    suite.run(11, "fine-tuning collapse", 600.0, 0.0, || collapse(&cfg, &base));

    let lab = Lab::new(cfg.clone(), &cfg.output_root(), base.clone(), ext.clone()).expect("lab");
    let t6 = Instant::now();
    suite.run(6, "table 2 direction", 45.0 * 60.0, setup, || {
        report_check(&lab, "table2", "adapted_ap_gain", |r| {
            format!(
                "fixture {}, baseline AP {:.4}, adapted AP {:.4} (gain >= {TABLE2_MIN_GAIN})",
                cfg.experiment.fixture,
                r.value("baseline", "ap").unwrap_or(f64::NAN),
                r.value("full", "ap").unwrap_or(f64::NAN)
            )
        })
    });
    let table2 = t6.elapsed().as_secs_f64();
    suite.run(7, "table 3 ordering", 60.0 * 60.0, setup + table2, || {
        let r1 = report_check(&lab, "ablation", "full_beats_shift_only", |_| String::new())?;
        let r2 = report_check(&lab, "ablation", "full_beats_mix_only", |_| String::new())?;
        Ok((r1.0 && r2.0, format!("{}; {}", r1.1.trim_end_matches("; "), r2.1.trim_end_matches("; "))))
    });
    suite.run(9, "embedding separation", 600.0, 0.0, || {
        report_check(&lab, "embed", "adapted_closer_to_target", |_| "k-NN two-sample accuracy on t-SNE coordinates".into())
    });
    suite.run(10, "CLI reproducibility", 900.0, 0.0, || reproducibility(&cfg, tmp.path()));

    println!("---- summary");
    suite.outcomes.sort_by_key(|o| o.id);
    for o in &suite.outcomes {
        print_line(o);
    }
    let failed = suite.outcomes.iter().filter(|o| !o.passed).count();
    println!("{} of {} criteria passed", suite.outcomes.len() - failed, suite.outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

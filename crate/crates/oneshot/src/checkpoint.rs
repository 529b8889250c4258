//! Checkpoint directories: `metadata.json` plus one raw little-endian f32
//! file per named parameter, row-major.

use std::fs;
use std::path::Path;

use oneshot_core::detector::{Detector, DetectorConfig};
use oneshot_core::params::ParamSet;
use oneshot_core::perceptual::{ExtractorConfig, FeatureExtractor};
use oneshot_core::{Generator, GeneratorConfig, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, IoContext, Result};

pub const METADATA: &str = "metadata.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub kind: String,
    pub version: String,
    pub seed: u64,
    /// Resolution, style layers and style width; generators only.
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    pub style_dim: Option<usize>,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

fn write_params(dir: &Path, mut meta: Metadata, params: &ParamSet<f32>) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    meta.params.clear();
    for (name, t) in params.iter() {
        let file = format!("{name}.f32");
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).at(&path)?;
        meta.params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let path = dir.join(METADATA);
    let tmp = dir.join(".metadata.json.tmp");
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&tmp, text).at(&tmp)?;
    fs::rename(&tmp, &path).at(&path)
}

fn read_params(dir: &Path, kind: &str) -> Result<(Metadata, ParamSet<f32>)> {
    let path = dir.join(METADATA);
    let text = fs::read_to_string(&path).at(&path)?;
    let meta: Metadata = serde_json::from_str(&text).map_err(|e| format_err(&path, e))?;
    if meta.kind != kind {
        return Err(format_err(&path, format!("checkpoint holds a {}, expected a {kind}", meta.kind)));
    }
    let mut params = ParamSet::new();
    for entry in &meta.params {
        let p = dir.join(&entry.file);
        let bytes = fs::read(&p).at(&p)?;
        let n: usize = entry.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(format_err(&p, format!("expected {} bytes for shape {:?}, found {}", 4 * n, entry.shape, bytes.len())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?);
    }
    Ok((meta, params))
}

fn config_of<T: for<'de> Deserialize<'de>>(dir: &Path, meta: &Metadata) -> Result<T> {
    serde_json::from_value(meta.config.clone()).map_err(|e| format_err(dir.join(METADATA), e))
}

/// SHA-256 over parameter names, shapes and little-endian values.
pub fn weights_digest(params: &ParamSet<f32>) -> String {
    let mut bytes = Vec::new();
    for (name, t) in params.iter() {
        bytes.extend_from_slice(name.as_bytes());
        for d in t.shape() {
            bytes.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        bytes.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    oneshot_core::image::sha256_hex(&bytes)
}

pub fn save_generator(dir: &Path, model: &Generator) -> Result<()> {
    let meta = Metadata {
        kind: "generator".into(),
        version: model.version().to_string(),
        seed: model.seed(),
        resolution: Some(model.resolution()),
        layers: Some(model.num_layers()),
        style_dim: Some(model.style_dim()),
        config: serde_json::to_value(model.config()).expect("config serializes"),
        params: Vec::new(),
    };
    write_params(dir, meta, model.params())
}

pub fn load_generator(dir: &Path) -> Result<Generator> {
    let (meta, params) = read_params(dir, "generator")?;
    let config: GeneratorConfig = config_of(dir, &meta)?;
    Ok(Generator::from_parts(config, params, meta.version, meta.seed)?)
}

pub fn save_extractor(dir: &Path, extractor: &FeatureExtractor, seed: u64) -> Result<()> {
    let meta = Metadata {
        kind: "extractor".into(),
        version: "frozen".into(),
        seed,
        resolution: Some(extractor.config().resolution),
        layers: None,
        style_dim: None,
        config: serde_json::to_value(extractor.config()).expect("config serializes"),
        params: Vec::new(),
    };
    write_params(dir, meta, extractor.params())
}

pub fn load_extractor(dir: &Path) -> Result<FeatureExtractor> {
    let (meta, params) = read_params(dir, "extractor")?;
    let config: ExtractorConfig = config_of(dir, &meta)?;
    Ok(FeatureExtractor::from_params(config, params)?)
}

pub fn save_detector(dir: &Path, detector: &Detector, seed: u64) -> Result<()> {
    let meta = Metadata {
        kind: "detector".into(),
        version: "trained".into(),
        seed,
        resolution: Some(detector.config().resolution),
        layers: None,
        style_dim: None,
        config: serde_json::to_value(detector.config()).expect("config serializes"),
        params: Vec::new(),
    };
    write_params(dir, meta, detector.params())
}

pub fn load_detector(dir: &Path) -> Result<Detector> {
    let (meta, params) = read_params(dir, "detector")?;
    let config: DetectorConfig = config_of(dir, &meta)?;
    Ok(Detector::from_parts(config, params)?)
}

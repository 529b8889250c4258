//! Datasets on disk: `images/NNNNNN.png` plus a JSON-lines `manifest.jsonl`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use oneshot_core::image::sha256_hex;
use oneshot_core::Image;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, IoContext, Result};
use crate::imageio::{decode_png, encode_png};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset directory.
    pub path: String,
    /// Hex SHA-256 of the PNG file bytes.
    pub sha256: String,
    pub label: String,
    pub seed: u64,
    /// Number of grafted style layers, for mixed samples.
    pub k: Option<usize>,
    pub source_model_version: Option<String>,
}

/// Per-image provenance supplied by the producer of a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub label: String,
    pub seed: u64,
    pub k: Option<usize>,
    pub source_model_version: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    /// Writes `items` under `dir`, replacing any previous manifest.
    pub fn write<'a>(dir: &Path, items: impl IntoIterator<Item = (&'a Image, Provenance)>) -> Result<Self> {
        let images = dir.join("images");
        fs::create_dir_all(&images).at(&images)?;
        let mut entries = Vec::new();
        for (i, (img, prov)) in items.into_iter().enumerate() {
            let rel = format!("images/{i:06}.png");
            let bytes = encode_png(img);
            let path = dir.join(&rel);
            fs::write(&path, &bytes).at(&path)?;
            entries.push(ManifestEntry {
                path: rel,
                sha256: sha256_hex(&bytes),
                label: prov.label,
                seed: prov.seed,
                k: prov.k,
                source_model_version: prov.source_model_version,
            });
        }
        if entries.is_empty() {
            return Err(Error::Persistence(format!("refusing to write an empty dataset to {}", dir.display())));
        }
        let path = dir.join(MANIFEST);
        let mut f = fs::File::create(&path).at(&path)?;
        for e in &entries {
            let line = serde_json::to_string(e).expect("entry serializes");
            writeln!(f, "{line}").at(&path)?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).at(&path)?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| format_err(&path, format!("line {}: {e}", n + 1))))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        if entries.is_empty() {
            return Err(format_err(&path, "manifest lists no images"));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks that every listed file exists and matches its hash.
    pub fn verify(&self) -> Result<()> {
        for e in &self.entries {
            let p = self.dir.join(&e.path);
            let bytes = fs::read(&p).at(&p)?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(format_err(&p, "file hash does not match the manifest"));
            }
        }
        Ok(())
    }

    /// Loads every image, verifying hashes on the way.
    pub fn load_images(&self) -> Result<Vec<Image>> {
        self.entries
            .iter()
            .map(|e| {
                let p = self.dir.join(&e.path);
                let bytes = fs::read(&p).at(&p)?;
                if sha256_hex(&bytes) != e.sha256 {
                    return Err(format_err(&p, "file hash does not match the manifest"));
                }
                decode_png(&bytes, &p)
            })
            .collect()
    }

    /// Hash over the manifest file bytes, identifying the dataset's content.
    pub fn digest(&self) -> Result<String> {
        let p = self.dir.join(MANIFEST);
        Ok(sha256_hex(&fs::read(&p).at(&p)?))
    }
}

/// True when no image hash occurs in both datasets.
pub fn disjoint(a: &Dataset, b: &Dataset) -> bool {
    let seen: std::collections::HashSet<&str> = a.entries.iter().map(|e| e.sha256.as_str()).collect();
    b.entries.iter().all(|e| !seen.contains(e.sha256.as_str()))
}

//! Style mixing: graft the final layers of a target style onto random styles.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Result};
use crate::generator::{Generator, LatentCode, NoiseInput, StyleVector};
use crate::image::Image;
use crate::rng::{derive_index, derive_seed};
use crate::scalar::Scalar;

/// How noise maps are drawn for generated images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePolicy {
    /// Fresh noise for every image, from that image's seed.
    #[default]
    PerImage,
    /// The same noise for every image.
    Shared { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    /// Number of final style layers taken from the target style.
    pub k: usize,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub noise: NoisePolicy,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            k: 3,
            n: 2000,
            seed: 0,
            noise: NoisePolicy::PerImage,
        }
    }
}

impl MixConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        ensure_input!(self.k <= layers, "k = {} exceeds the {layers} style layers", self.k);
        ensure_input!(self.n >= 1, "dataset size n must be at least 1");
        Ok(())
    }
}

/// Layers `0..L-k` from `s`, layers `L-k..L` from `target`.
pub fn mix_styles<T: Scalar>(s: &StyleVector<T>, target: &StyleVector<T>, k: usize) -> Result<StyleVector<T>> {
    ensure_input!(
        s.num_layers() == target.num_layers() && s.dim() == target.dim(),
        "style shapes differ: {}x{} vs {}x{}",
        s.num_layers(),
        s.dim(),
        target.num_layers(),
        target.dim()
    );
    let l = s.num_layers();
    ensure_input!(k <= l, "k = {k} exceeds the {l} style layers");
    let mut out = s.clone();
    for i in l - k..l {
        out.layer_mut(i).copy_from_slice(target.layer(i));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct MixedSample {
    /// Per-image seed; latent and noise derive from it.
    pub seed: u64,
    pub style: StyleVector,
    pub noise_seed: u64,
    pub image: Image,
}

/// Seeds of the `i`-th generated image under `config`: `(image, latent, noise)`.
pub fn sample_seeds(config: &MixConfig, i: usize) -> (u64, u64, u64) {
    let seed = derive_index(derive_seed(config.seed, "mix"), i as u64);
    let noise = match config.noise {
        NoisePolicy::PerImage => derive_seed(seed, "noise"),
        NoisePolicy::Shared { seed } => seed,
    };
    (seed, derive_seed(seed, "latent"), noise)
}

/// Synthesizes `config.n` images from `model`, each with a fresh latent whose
/// final `k` style layers are replaced by `target`'s.
pub fn generate_mixed(model: &Generator, target: &StyleVector, config: &MixConfig) -> Result<Vec<MixedSample>> {
    model.check_style(target)?;
    config.validate(model.num_layers())?;
    let mut out = Vec::with_capacity(config.n);
    let chunk = 16;
    for start in (0..config.n).step_by(chunk) {
        let end = (start + chunk).min(config.n);
        let mut seeds = Vec::new();
        let mut styles = Vec::new();
        let mut noises = Vec::new();
        for i in start..end {
            let (seed, latent, noise) = sample_seeds(config, i);
            let w = model.map(&LatentCode::sample(model.style_dim(), latent))?;
            styles.push(mix_styles(&w, target, config.k)?);
            noises.push(NoiseInput::sample(model.config(), noise));
            seeds.push((seed, noise));
        }
        let images = model.synthesize_batch(&styles.iter().collect::<Vec<_>>(), &noises.iter().collect::<Vec<_>>())?;
        for (((seed, noise_seed), style), image) in seeds.into_iter().zip(styles).zip(images) {
            out.push(MixedSample {
                seed,
                style,
                noise_seed,
                image,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use proptest::prelude::*;

    fn style(l: usize, d: usize, base: f32) -> StyleVector {
        StyleVector::from_values(l, d, (0..l * d).map(|i| base + i as f32).collect()).unwrap()
    }

    #[test]
    fn boundaries() {
        let (s, t) = (style(8, 4, 0.0), style(8, 4, 100.0));
        assert_eq!(mix_styles(&s, &t, 0).unwrap(), s);
        assert_eq!(mix_styles(&s, &t, 8).unwrap(), t);
        assert_eq!(MixConfig::default().k, 3);
        assert!(mix_styles(&s, &t, 9).is_err());
        assert!(mix_styles(&s, &style(6, 4, 0.0), 1).is_err());
    }

    #[test]
    fn full_override_with_shared_noise_gives_identical_images() {
        let g = Generator::new(GeneratorConfig::for_resolution(8, 8), 1).unwrap();
        let t = g.map(&LatentCode::sample(8, 2)).unwrap();
        let cfg = MixConfig {
            k: g.num_layers(),
            n: 3,
            seed: 4,
            noise: NoisePolicy::Shared { seed: 9 },
        };
        let out = generate_mixed(&g, &t, &cfg).unwrap();
        assert!(out.windows(2).all(|w| w[0].image == w[1].image));
        let per = MixConfig {
            noise: NoisePolicy::PerImage,
            ..cfg
        };
        for m in generate_mixed(&g, &t, &per).unwrap() {
            let alone = g.synthesize(&t, &NoiseInput::sample(g.config(), m.noise_seed)).unwrap();
            assert_eq!(m.image, alone);
        }
    }

    #[test]
    fn generation_is_reproducible_and_grafted() {
        let g = Generator::new(GeneratorConfig::for_resolution(8, 8), 1).unwrap();
        let t = g.map(&LatentCode::sample(8, 2)).unwrap();
        let cfg = MixConfig {
            n: 20,
            ..MixConfig::default()
        };
        let a = generate_mixed(&g, &t, &cfg).unwrap();
        let b = generate_mixed(&g, &t, &cfg).unwrap();
        assert_eq!(a.len(), 20);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            for l in g.num_layers() - 3..g.num_layers() {
                assert_eq!(x.style.layer(l), t.layer(l));
            }
        }
        // Only the grafted layers differ from the unmixed sample of the same seed.
        let plain = generate_mixed(&g, &t, &MixConfig { k: 0, ..cfg.clone() }).unwrap();
        for (m, p) in a.iter().zip(&plain) {
            assert_eq!(m.style.layer(0), p.style.layer(0));
            assert_eq!(mix_styles(&p.style, &t, 3).unwrap(), m.style);
        }
        assert!(generate_mixed(&g, &t, &MixConfig { n: 0, ..cfg }).is_err());
    }

    proptest! {
        #[test]
        fn suffix_exactness(l in (2usize..8).prop_map(|h| 2 * h), k in 0usize..16, a in -5.0f32..5.0, b in -5.0f32..5.0) {
            let d = 3;
            let s = style(l, d, a);
            let t = style(l, d, b);
            if k > l {
                prop_assert!(mix_styles(&s, &t, k).is_err());
            } else {
                let m = mix_styles(&s, &t, k).unwrap();
                for i in 0..l {
                    let want = if i >= l - k { t.layer(i) } else { s.layer(i) };
                    prop_assert_eq!(m.layer(i), want);
                }
                prop_assert_eq!(mix_styles(&s, &s, k).unwrap(), s.clone());
            }
        }
    }
}

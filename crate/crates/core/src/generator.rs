//! Style-based generator: a mapping network `z -> w` and a synthesis network
//! driven by one style vector per adaptive instance normalization layer.
//!
//! Synthesis runs progressive blocks from 4x4 up to the output resolution.
//! Each block holds two style layers:
//!
//! ```text
//! [upsample] -> conv3x3 -> + noise -> + bias -> lrelu -> instance norm -> * (1 + A_s s_l) + A_b s_l
//! ```
//!
//! The first block convolves a learned constant. A 1x1 projection and tanh
//! produce the RGB output.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, input_err, Result};
use crate::graph::{Graph, Var};
use crate::image::{self, Image};
use crate::params::{Bound, ParamSet};
use crate::rng::{self, derive_index, derive_seed};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LRELU_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-8;
pub const MAPPING_PREFIX: &str = "mapping.";
pub const SYNTHESIS_PREFIX: &str = "synthesis.";

/// Architecture hyper-parameters of a [`Generator`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Output side length in pixels; a power of two, at least 8.
    pub resolution: usize,
    /// Width of latent codes and of each style layer.
    pub style_dim: usize,
    /// Fully connected layers in the mapping network.
    pub mapping_layers: usize,
    /// Feature channels per resolution block, 4x4 first.
    pub channels: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            style_dim: 64,
            mapping_layers: 3,
            channels: vec![32, 32, 16, 8],
        }
    }
}

impl GeneratorConfig {
    /// Config with the default channel ladder truncated or padded for `resolution`.
    pub fn for_resolution(resolution: usize, style_dim: usize) -> Self {
        let blocks = blocks_for(resolution);
        let mut channels: Vec<usize> = vec![32, 32, 16, 8];
        channels.resize(blocks, 8);
        Self {
            resolution,
            style_dim,
            mapping_layers: 3,
            channels,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.channels.len()
    }

    /// Number of style layers, `L = 2 * log2(R / 4) + 2`.
    pub fn num_layers(&self) -> usize {
        2 * self.channels.len()
    }

    /// Side length of the feature map seen by style layer `layer`.
    pub fn layer_resolution(&self, layer: usize) -> usize {
        4 << (layer / 2)
    }

    pub fn layer_channels(&self, layer: usize) -> usize {
        self.channels[layer / 2]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        ensure_input!(
            r >= 8 && r.is_power_of_two(),
            "resolution must be a power of two >= 8, got {r}"
        );
        ensure_input!(
            self.channels.len() == blocks_for(r),
            "resolution {r} needs {} channel entries, got {}",
            blocks_for(r),
            self.channels.len()
        );
        ensure_input!(self.style_dim >= 1, "style_dim must be positive");
        ensure_input!(self.mapping_layers >= 1, "mapping_layers must be positive");
        ensure_input!(
            self.channels.iter().all(|&c| c >= 1),
            "channel counts must be positive"
        );
        Ok(())
    }
}

fn blocks_for(resolution: usize) -> usize {
    (resolution / 4).max(1).trailing_zeros() as usize + 1
}

/// Input of the mapping network: one standard-normal vector of width `D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode<T = f32> {
    pub z: Vec<T>,
}

impl<T: Scalar> LatentCode<T> {
    pub fn sample(dim: usize, seed: u64) -> Self {
        Self {
            z: rng::normal_vec(&mut rng::rng(seed), dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            z: vec![T::zero(); dim],
        }
    }
}

/// Per-layer style vectors, `L` rows of width `D`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleVector<T = f32> {
    layers: usize,
    dim: usize,
    values: Vec<T>,
}

impl<T: Scalar> StyleVector<T> {
    pub fn zeros(layers: usize, dim: usize) -> Self {
        Self {
            layers,
            dim,
            values: vec![T::zero(); layers * dim],
        }
    }

    pub fn from_values(layers: usize, dim: usize, values: Vec<T>) -> Result<Self> {
        ensure_input!(
            layers >= 4 && layers % 2 == 0,
            "style vectors need an even layer count >= 4, got {layers}"
        );
        ensure_input!(
            values.len() == layers * dim,
            "style values: expected {} entries, got {}",
            layers * dim,
            values.len()
        );
        ensure_input!(values.iter().all(|v| v.is_finite()), "style values must be finite");
        Ok(Self { layers, dim, values })
    }

    /// Every layer set to `w`.
    pub fn broadcast(w: &[T], layers: usize) -> Self {
        let mut values = Vec::with_capacity(layers * w.len());
        for _ in 0..layers {
            values.extend_from_slice(w);
        }
        Self {
            layers,
            dim: w.len(),
            values,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer(&self, i: usize) -> &[T] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `[1, L, D]` tensor view for graph input.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, self.layers, self.dim], self.values.clone()).expect("shape")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        ensure_input!(s.len() == 3 && s[0] == 1, "expected [1, L, D], got {s:?}");
        Self::from_values(s[1], s[2], t.data().to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> StyleVector<U> {
        StyleVector {
            layers: self.layers,
            dim: self.dim,
            values: self.values.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Fixed per-layer noise maps, regenerated deterministically from `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseInput<T = f32> {
    seed: u64,
    maps: Vec<Tensor<T>>,
}

impl<T: Scalar> NoiseInput<T> {
    /// One standard-normal `[1, 1, r, r]` map per style layer.
    pub fn sample(config: &GeneratorConfig, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let maps = (0..config.num_layers())
            .map(|l| {
                let side = config.layer_resolution(l);
                Tensor::from_vec(&[1, 1, side, side], rng::normal_vec(&mut r, side * side))
                    .expect("shape")
            })
            .collect();
        Self { seed, maps }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn maps(&self) -> &[Tensor<T>] {
        &self.maps
    }

    pub fn cast<U: Scalar>(&self) -> NoiseInput<U> {
        NoiseInput {
            seed: self.seed,
            maps: self.maps.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn matches(&self, config: &GeneratorConfig) -> bool {
        self.maps.len() == config.num_layers()
            && self.maps.iter().enumerate().all(|(l, m)| {
                let r = config.layer_resolution(l);
                m.shape() == [1, 1, r, r]
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerParams {
    conv_w: usize,
    conv_b: usize,
    noise: usize,
    scale_w: usize,
    scale_b: usize,
    shift_w: usize,
    shift_b: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    mapping: Vec<(usize, usize)>,
    constant: usize,
    layers: Vec<LayerParams>,
    rgb_w: usize,
    rgb_b: usize,
}

/// Activations captured for one style layer by [`Generator::synthesize_traced`].
#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    /// Instance-normalized features before the style affine, `[C, r, r]`.
    pub normalized: Tensor<T>,
    /// Per-channel multiplier applied by the style.
    pub scale: Vec<T>,
    /// Per-channel offset applied by the style.
    pub shift: Vec<T>,
}

/// One output of [`Generator::sample_random`].
#[derive(Clone, Debug)]
pub struct Sample {
    pub latent: LatentCode,
    pub style: StyleVector,
    pub noise: NoiseInput,
    pub image: Image,
}

/// Mapping plus synthesis network with named, versioned weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T = f32> {
    config: GeneratorConfig,
    params: ParamSet<T>,
    layout: Layout,
    version: String,
    seed: u64,
}

fn he_normal<T: Scalar>(r: &mut rng::Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let std = gain / (fan_in as f64).sqrt();
    let v: Vec<f64> = rng::normal_vec(r, n);
    Tensor::from_vec(shape, v.into_iter().map(|x| T::lit(x * std)).collect()).expect("shape")
}

/// Parameter names and shapes in creation order.
fn build_params<T: Scalar>(config: &GeneratorConfig, seed: u64) -> ParamSet<T> {
    let mut r = rng::rng(seed);
    let d = config.style_dim;
    let mut p = ParamSet::new();
    for i in 0..config.mapping_layers {
        p.push(format!("mapping.fc{i}.weight"), he_normal(&mut r, &[d, d], d, 2f64.sqrt()));
        p.push(format!("mapping.fc{i}.bias"), Tensor::zeros(&[d]));
    }
    let c0 = config.channels[0];
    p.push("synthesis.const", Tensor::full(&[1, c0, 4, 4], T::one()));
    let mut c_in = c0;
    for l in 0..config.num_layers() {
        let (b, j) = (l / 2, l % 2);
        let c = config.layer_channels(l);
        let pre = format!("synthesis.b{b}.conv{j}");
        p.push(format!("{pre}.weight"), he_normal(&mut r, &[c, c_in, 3, 3], c_in * 9, 2f64.sqrt()));
        p.push(format!("{pre}.bias"), Tensor::zeros(&[c]));
        p.push(format!("{pre}.noise_strength"), Tensor::full(&[c], T::lit(0.05)));
        p.push(format!("{pre}.style_scale.weight"), he_normal(&mut r, &[c, d], d, 1.0));
        p.push(format!("{pre}.style_scale.bias"), Tensor::zeros(&[c]));
        p.push(format!("{pre}.style_shift.weight"), he_normal(&mut r, &[c, d], d, 1.0));
        p.push(format!("{pre}.style_shift.bias"), Tensor::zeros(&[c]));
        c_in = c;
    }
    p.push("synthesis.to_rgb.weight", he_normal(&mut r, &[3, c_in, 1, 1], c_in, 1.0));
    p.push("synthesis.to_rgb.bias", Tensor::zeros(&[3]));
    p
}

fn layout_of<T: Scalar>(config: &GeneratorConfig, p: &ParamSet<T>) -> Result<Layout> {
    let idx = |name: &str| p.index_of(name).ok_or_else(|| input_err!("missing parameter {name}"));
    let mapping = (0..config.mapping_layers)
        .map(|i| Ok((idx(&format!("mapping.fc{i}.weight"))?, idx(&format!("mapping.fc{i}.bias"))?)))
        .collect::<Result<Vec<_>>>()?;
    let layers = (0..config.num_layers())
        .map(|l| {
            let pre = format!("synthesis.b{}.conv{}", l / 2, l % 2);
            Ok(LayerParams {
                conv_w: idx(&format!("{pre}.weight"))?,
                conv_b: idx(&format!("{pre}.bias"))?,
                noise: idx(&format!("{pre}.noise_strength"))?,
                scale_w: idx(&format!("{pre}.style_scale.weight"))?,
                scale_b: idx(&format!("{pre}.style_scale.bias"))?,
                shift_w: idx(&format!("{pre}.style_shift.weight"))?,
                shift_b: idx(&format!("{pre}.style_shift.bias"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Layout {
        mapping,
        constant: idx("synthesis.const")?,
        layers,
        rgb_w: idx("synthesis.to_rgb.weight")?,
        rgb_b: idx("synthesis.to_rgb.bias")?,
    })
}

impl<T: Scalar> Generator<T> {
    /// Freshly initialized generator; weights are a function of `seed` alone.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = build_params(&config, seed);
        let layout = layout_of(&config, &params)?;
        Ok(Self {
            config,
            params,
            layout,
            version: String::from("init"),
            seed,
        })
    }

    /// Reassembles a generator from stored weights, checking names and shapes.
    pub fn from_parts(config: GeneratorConfig, params: ParamSet<T>, version: String, seed: u64) -> Result<Self> {
        config.validate()?;
        let template: ParamSet<T> = build_params(&config, 0);
        ensure_input!(
            template.len() == params.len(),
            "expected {} parameters, got {}",
            template.len(),
            params.len()
        );
        for (name, t) in template.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| input_err!("missing parameter {name}"))?;
            ensure_input!(
                got.shape() == t.shape(),
                "parameter {name}: shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            );
        }
        let layout = layout_of(&config, &params)?;
        Ok(Self {
            config,
            params,
            layout,
            version,
            seed,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn set_version(&mut self, version: impl Into<String>) {
        self.version = version.into();
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers()
    }

    pub fn style_dim(&self) -> usize {
        self.config.style_dim
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            version: self.version.clone(),
            seed: self.seed,
        }
    }

    pub fn check_style(&self, s: &StyleVector<T>) -> Result<()> {
        ensure_input!(
            s.num_layers() == self.num_layers() && s.dim() == self.style_dim(),
            "style vector is {}x{}, model expects {}x{}",
            s.num_layers(),
            s.dim(),
            self.num_layers(),
            self.style_dim()
        );
        Ok(())
    }

    pub fn check_noise(&self, noise: &NoiseInput<T>) -> Result<()> {
        ensure_input!(noise.matches(&self.config), "noise maps do not match the synthesis layers");
        Ok(())
    }

    /// Mapping network on a `[N, D]` batch of latents; returns `[N, D]`.
    pub fn mapping_graph(&self, g: &mut Graph<T>, bound: &Bound, z: Var) -> Var {
        let slope = T::lit(LRELU_SLOPE);
        let mut h = g.pixel_norm(z, T::lit(NORM_EPS));
        for &(w, b) in &self.layout.mapping {
            h = g.linear(h, bound.var(w), Some(bound.var(b)));
            h = g.leaky_relu(h, slope);
        }
        h
    }

    /// Synthesis network on `[N, L, D]` styles and per-layer `[N, 1, r, r]` noise.
    /// Returns `[N, 3, R, R]`. When `trace` is given, it receives the
    /// normalized activations and style scale/shift of every layer.
    pub fn synthesis_graph(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        styles: Var,
        noise: &[Var],
        mut trace: Option<&mut Vec<(Var, Var, Var)>>,
    ) -> Var {
        let n = g.value(styles).shape()[0];
        let slope = T::lit(LRELU_SLOPE);
        let c0 = self.config.channels[0];
        let constant = bound.var(self.layout.constant);
        let mut x = if n == 1 {
            constant
        } else {
            let row = g.value(constant).data().to_vec();
            let rg = g.requires_grad(constant);
            if rg {
                let flat = g.reshape(constant, &[1, c0 * 16]);
                let rep = g.repeat(flat, n);
                g.reshape(rep, &[n, c0, 4, 4])
            } else {
                let mut data = Vec::with_capacity(n * row.len());
                for _ in 0..n {
                    data.extend_from_slice(&row);
                }
                g.input(Tensor::from_vec(&[n, c0, 4, 4], data).expect("shape"))
            }
        };
        for (l, lp) in self.layout.layers.iter().enumerate() {
            if l % 2 == 0 && l > 0 {
                x = g.upsample2x(x);
            }
            x = g.conv2d(x, bound.var(lp.conv_w), None);
            x = g.noise_add(x, noise[l], bound.var(lp.noise));
            x = g.channel_bias(x, bound.var(lp.conv_b));
            x = g.leaky_relu(x, slope);
            x = g.instance_norm(x, T::lit(NORM_EPS));
            let normalized = x;
            let s = g.select(styles, l);
            let scale = g.linear(s, bound.var(lp.scale_w), Some(bound.var(lp.scale_b)));
            let scale = g.add_scalar(scale, T::one());
            let shift = g.linear(s, bound.var(lp.shift_w), Some(bound.var(lp.shift_b)));
            x = g.channel_affine(x, scale, shift);
            if let Some(t) = trace.as_deref_mut() {
                t.push((normalized, scale, shift));
            }
        }
        let rgb = g.conv2d(x, bound.var(self.layout.rgb_w), Some(bound.var(self.layout.rgb_b)));
        g.tanh(rgb)
    }

    /// Stacks noise maps of several samples into per-layer `[N, 1, r, r]` inputs.
    pub fn noise_inputs(&self, g: &mut Graph<T>, noises: &[&NoiseInput<T>]) -> Vec<Var> {
        (0..self.num_layers())
            .map(|l| {
                let maps: Vec<&Tensor<T>> = noises.iter().map(|nz| &nz.maps[l]).collect();
                let r = self.config.layer_resolution(l);
                let t = Tensor::stack(&maps)
                    .expect("noise shapes")
                    .reshaped(&[noises.len(), 1, r, r])
                    .expect("shape");
                g.input(t)
            })
            .collect()
    }

    /// `f(z)` broadcast to all `L` style layers.
    pub fn map(&self, z: &LatentCode<T>) -> Result<StyleVector<T>> {
        Ok(self.map_batch(core::slice::from_ref(z))?.remove(0))
    }

    pub fn map_batch(&self, zs: &[LatentCode<T>]) -> Result<Vec<StyleVector<T>>> {
        let d = self.style_dim();
        for z in zs {
            ensure_input!(z.z.len() == d, "latent has dimension {}, model expects {d}", z.z.len());
            ensure_input!(z.z.iter().all(|v| v.is_finite()), "latent entries must be finite");
        }
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let mut data = Vec::with_capacity(zs.len() * d);
        for z in zs {
            data.extend_from_slice(&z.z);
        }
        let zv = g.input(Tensor::from_vec(&[zs.len(), d], data)?);
        let w = self.mapping_graph(&mut g, &bound, zv);
        Ok(g
            .value(w)
            .data()
            .chunks(d)
            .map(|row| StyleVector::broadcast(row, self.num_layers()))
            .collect())
    }

    /// Deterministic `[3, R, R]` output for one style vector and noise input.
    pub fn synthesize_tensor(&self, s: &StyleVector<T>, noise: &NoiseInput<T>) -> Result<Tensor<T>> {
        self.check_style(s)?;
        self.check_noise(noise)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let sv = g.input(s.to_tensor());
        let nv = self.noise_inputs(&mut g, &[noise]);
        let out = self.synthesis_graph(&mut g, &bound, sv, &nv, None);
        let r = self.resolution();
        g.value(out).clone().reshaped(&[3, r, r])
    }

    pub fn synthesize(&self, s: &StyleVector<T>, noise: &NoiseInput<T>) -> Result<Image> {
        Image::from_tensor(self.synthesize_tensor(s, noise)?.cast())
    }

    /// Batched synthesis; equivalent to calling [`Self::synthesize`] per pair.
    pub fn synthesize_batch(&self, styles: &[&StyleVector<T>], noises: &[&NoiseInput<T>]) -> Result<Vec<Image>> {
        ensure_input!(styles.len() == noises.len(), "need one noise input per style vector");
        let mut out = Vec::with_capacity(styles.len());
        for (sc, nc) in styles.chunks(16).zip(noises.chunks(16)) {
            for s in sc {
                self.check_style(s)?;
            }
            for nz in nc {
                self.check_noise(nz)?;
            }
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, |_| false);
            let mut data = Vec::with_capacity(sc.len() * self.num_layers() * self.style_dim());
            for s in sc {
                data.extend_from_slice(s.values());
            }
            let sv = g.input(Tensor::from_vec(&[sc.len(), self.num_layers(), self.style_dim()], data)?);
            let nv = self.noise_inputs(&mut g, nc);
            let img = self.synthesis_graph(&mut g, &bound, sv, &nv, None);
            out.extend(image::unbatch(g.value(img)));
        }
        Ok(out)
    }

    /// Synthesis that also reports every layer's normalized activations and style modulation.
    pub fn synthesize_traced(&self, s: &StyleVector<T>, noise: &NoiseInput<T>) -> Result<(Tensor<T>, Vec<LayerTrace<T>>)> {
        self.check_style(s)?;
        self.check_noise(noise)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let sv = g.input(s.to_tensor());
        let nv = self.noise_inputs(&mut g, &[noise]);
        let mut vars = Vec::new();
        let out = self.synthesis_graph(&mut g, &bound, sv, &nv, Some(&mut vars));
        let traces = vars
            .into_iter()
            .map(|(nrm, sc, sh)| {
                let t = g.value(nrm);
                let shape = t.shape()[1..].to_vec();
                LayerTrace {
                    normalized: t.clone().reshaped(&shape).expect("shape"),
                    scale: g.value(sc).data().to_vec(),
                    shift: g.value(sh).data().to_vec(),
                }
            })
            .collect();
        let r = self.resolution();
        Ok((g.value(out).clone().reshaped(&[3, r, r])?, traces))
    }
}

impl Generator<f32> {
    /// `n` random samples; sample `i` uses latent and noise seeds derived from `(seed, i)`.
    pub fn sample_random(&self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        ensure_input!(n >= 1, "sample count must be at least 1");
        let latent_root = derive_seed(seed, "latent");
        let noise_root = derive_seed(seed, "noise");
        let latents: Vec<LatentCode> = (0..n)
            .map(|i| LatentCode::sample(self.style_dim(), derive_index(latent_root, i as u64)))
            .collect();
        let noises: Vec<NoiseInput> = (0..n)
            .map(|i| NoiseInput::sample(&self.config, derive_index(noise_root, i as u64)))
            .collect();
        let styles = self.map_batch(&latents)?;
        let images = self.synthesize_batch(
            &styles.iter().collect::<Vec<_>>(),
            &noises.iter().collect::<Vec<_>>(),
        )?;
        Ok(latents
            .into_iter()
            .zip(styles)
            .zip(noises)
            .zip(images)
            .map(|(((latent, style), noise), image)| Sample {
                latent,
                style,
                noise,
                image,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Generator<f32> {
        Generator::new(GeneratorConfig::default(), 11).unwrap()
    }

    #[test]
    fn layer_count_follows_resolution() {
        assert_eq!(GeneratorConfig::default().num_layers(), 8);
        assert_eq!(GeneratorConfig::for_resolution(8, 4).num_layers(), 4);
        assert_eq!(GeneratorConfig::for_resolution(64, 4).num_layers(), 10);
        assert!(GeneratorConfig::for_resolution(4, 4).validate().is_err());
    }

    #[test]
    fn zero_latent_maps_to_identical_layers() {
        let g = tiny();
        let s = g.map(&LatentCode::zeros(64)).unwrap();
        assert_eq!(s.num_layers(), 8);
        for l in 1..8 {
            assert_eq!(s.layer(l), s.layer(0));
        }
        assert_eq!(s, g.map(&LatentCode::zeros(64)).unwrap());
    }

    #[test]
    fn map_rejects_wrong_dimension() {
        let g = tiny();
        assert!(matches!(
            g.map(&LatentCode::zeros(63)),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn synthesize_is_deterministic_and_in_range() {
        let g = tiny();
        let s = g.map(&LatentCode::sample(64, 1)).unwrap();
        let n = NoiseInput::sample(g.config(), 2);
        let a = g.synthesize(&s, &n).unwrap();
        let b = g.synthesize(&s, &n).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.width(), a.height()), (32, 32));
        assert!(a.in_range());
    }

    #[test]
    fn synthesize_rejects_mismatched_inputs() {
        let g = tiny();
        let n = NoiseInput::sample(g.config(), 2);
        let bad = StyleVector::<f32>::zeros(6, 64);
        assert!(g.synthesize(&bad, &n).is_err());
        let other = GeneratorConfig::for_resolution(16, 64);
        let bad_noise = NoiseInput::sample(&other, 2);
        assert!(g.synthesize(&StyleVector::zeros(8, 64), &bad_noise).is_err());
    }

    #[test]
    fn instance_norm_statistics_before_modulation() {
        let g = tiny();
        let s = g.map(&LatentCode::sample(64, 5)).unwrap();
        let n = NoiseInput::sample(g.config(), 6);
        let (_, traces) = g.synthesize_traced(&s, &n).unwrap();
        assert_eq!(traces.len(), 8);
        for t in &traces {
            let sh = t.normalized.shape();
            let hw = sh[1] * sh[2];
            for plane in t.normalized.data().chunks(hw) {
                let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
                let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
                assert!(mean.abs() < 1e-4, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn last_layer_controls_output_and_zero_edit_is_identity() {
        let g = tiny();
        let s = g.map(&LatentCode::sample(64, 5)).unwrap();
        let n = NoiseInput::sample(g.config(), 6);
        let base = g.synthesize(&s, &n).unwrap();
        let mut same = s.clone();
        for v in same.layer_mut(7) {
            *v += 0.0;
        }
        assert_eq!(g.synthesize(&same, &n).unwrap(), base);
        let mut edited = s.clone();
        for v in edited.layer_mut(7) {
            *v += 1.0;
        }
        assert!(g.synthesize(&edited, &n).unwrap().mean_abs_diff(&base) > 0.0);
    }

    #[test]
    fn style_modulation_is_layer_local() {
        let g = tiny();
        let s = g.map(&LatentCode::sample(64, 5)).unwrap();
        let n = NoiseInput::sample(g.config(), 6);
        let (_, before) = g.synthesize_traced(&s, &n).unwrap();
        let mut edited = s.clone();
        for v in edited.layer_mut(2) {
            *v -= 0.7;
        }
        let (_, after) = g.synthesize_traced(&edited, &n).unwrap();
        for l in 0..8 {
            if l == 2 {
                assert_ne!(before[l].scale, after[l].scale);
            } else {
                assert_eq!(before[l].scale, after[l].scale);
                assert_eq!(before[l].shift, after[l].shift);
            }
        }
    }

    #[test]
    fn batch_synthesis_matches_single() {
        let g = tiny();
        let samples = g.sample_random(3, 9).unwrap();
        for s in &samples {
            let single = g.synthesize(&s.style, &s.noise).unwrap();
            assert!(single.mean_abs_diff(&s.image) < 1e-6);
        }
    }

    #[test]
    fn sample_random_contract() {
        let g = tiny();
        let a = g.sample_random(1, 4).unwrap();
        let b = g.sample_random(1, 4).unwrap();
        assert_eq!(a[0].image, b[0].image);
        let three = g.sample_random(3, 4).unwrap();
        assert_ne!(three[0].latent, three[1].latent);
        assert_ne!(three[1].latent, three[2].latent);
        assert_ne!(three[0].latent, three[2].latent);
        assert!(g.sample_random(0, 4).is_err());
        for s in g.sample_random(100, 8).unwrap() {
            assert!(s.image.in_range());
        }
    }

    #[test]
    fn from_parts_validates_layout() {
        let g = tiny();
        let rebuilt = Generator::from_parts(g.config().clone(), g.params().clone(), "x".into(), 11).unwrap();
        assert_eq!(rebuilt.params(), g.params());
        let mut bad = g.params().clone();
        bad.set("synthesis.to_rgb.bias", Tensor::zeros(&[3])).unwrap();
        assert!(Generator::from_parts(g.config().clone(), bad, "x".into(), 11).is_ok());
        let wrong = Generator::<f32>::new(GeneratorConfig::for_resolution(16, 64), 1).unwrap();
        assert!(Generator::from_parts(g.config().clone(), wrong.params().clone(), "x".into(), 11).is_err());
    }
}

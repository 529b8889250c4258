//! Procedural toy faces and synthetic manipulation domains.
//!
//! Faces are soft-edged ellipse compositions (background, hair, face, eyes,
//! mouth) with a handful of discrete attributes that serve as class labels
//! for the frozen feature extractor. Domains are deterministic image
//! transforms standing in for unknown manipulation methods, so ground-truth
//! membership of every test image is known.

use alloc::vec::Vec;

use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::rng::{self, derive_index};

const SKIN: [[f32; 3]; 3] = [[0.93, 0.76, 0.62], [0.78, 0.57, 0.42], [0.52, 0.36, 0.26]];
const HAIR: [[f32; 3]; 3] = [[0.15, 0.10, 0.07], [0.55, 0.35, 0.15], [0.85, 0.75, 0.45]];
const BACKGROUND: [[f32; 3]; 4] = [
    [0.35, 0.55, 0.75],
    [0.60, 0.75, 0.55],
    [0.80, 0.80, 0.82],
    [0.55, 0.45, 0.65],
];

/// Discrete attributes of a toy face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceAttributes {
    pub skin: usize,
    pub hair: usize,
    pub background: usize,
    pub mouth_open: bool,
}

impl FaceAttributes {
    pub const NUM_CLASSES: usize = SKIN.len() * HAIR.len();

    /// Joint skin/hair class used to train the feature extractor.
    pub fn class(&self) -> usize {
        self.skin * HAIR.len() + self.hair
    }
}

fn smoothstep(edge0: f32, edge1: f32, x: f32) -> f32 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    color: [f32; 3],
}

impl Ellipse {
    /// Fractional coverage of the pixel centered at `(u, v)`, with an edge ~1.2px wide.
    fn coverage(&self, u: f32, v: f32, px: f32) -> f32 {
        let du = (u - self.cx) / self.rx;
        let dv = (v - self.cy) / self.ry;
        let r = (du * du + dv * dv).sqrt();
        let edge = 1.2 * px / self.rx.min(self.ry);
        1.0 - smoothstep(1.0 - edge, 1.0 + edge, r)
    }
}

fn jitter(r: &mut rng::Rng, scale: f32) -> f32 {
    (rng::uniform(r) as f32 * 2.0 - 1.0) * scale
}

fn tint(r: &mut rng::Rng, c: [f32; 3], amount: f32) -> [f32; 3] {
    let shared = jitter(r, amount);
    [c[0] + shared, c[1] + shared, c[2] + shared]
}

/// Renders the toy face for `seed` at `resolution x resolution`.
pub fn toy_face(resolution: usize, seed: u64) -> (Image, FaceAttributes) {
    let mut r = rng::rng(seed);
    let attrs = FaceAttributes {
        skin: rng::below(&mut r, SKIN.len()),
        hair: rng::below(&mut r, HAIR.len()),
        background: rng::below(&mut r, BACKGROUND.len()),
        mouth_open: rng::below(&mut r, 2) == 1,
    };
    let cx = 0.5 + jitter(&mut r, 0.06);
    let cy = 0.56 + jitter(&mut r, 0.04);
    let frx = 0.25 + jitter(&mut r, 0.03);
    let fry = 0.31 + jitter(&mut r, 0.03);
    let skin = tint(&mut r, SKIN[attrs.skin], 0.04);
    let hair_c = tint(&mut r, HAIR[attrs.hair], 0.04);
    let bg = tint(&mut r, BACKGROUND[attrs.background], 0.05);
    let eye_dx = 0.10 + jitter(&mut r, 0.015);
    let eye_y = cy - 0.06 + jitter(&mut r, 0.015);
    let mouth_y = cy + 0.15 + jitter(&mut r, 0.015);
    let shapes = [
        Ellipse {
            cx,
            cy: cy - 0.12,
            rx: frx + 0.07,
            ry: fry + 0.02,
            color: hair_c,
        },
        Ellipse {
            cx,
            cy,
            rx: frx,
            ry: fry,
            color: skin,
        },
        Ellipse {
            cx: cx - eye_dx,
            cy: eye_y,
            rx: 0.05,
            ry: 0.032,
            color: [0.1, 0.1, 0.12],
        },
        Ellipse {
            cx: cx + eye_dx,
            cy: eye_y,
            rx: 0.05,
            ry: 0.032,
            color: [0.1, 0.1, 0.12],
        },
        Ellipse {
            cx,
            cy: mouth_y,
            rx: 0.09,
            ry: if attrs.mouth_open { 0.05 } else { 0.025 },
            color: [0.65, 0.18, 0.2],
        },
    ];
    let px = 1.0 / resolution as f32;
    let hw = resolution * resolution;
    let mut data = alloc::vec![0f32; 3 * hw];
    for y in 0..resolution {
        for x in 0..resolution {
            let u = (x as f32 + 0.5) * px;
            let v = (y as f32 + 0.5) * px;
            let shade = 1.0 - 0.15 * v;
            let mut c = [bg[0] * shade, bg[1] * shade, bg[2] * shade];
            for s in &shapes {
                let a = s.coverage(u, v, px);
                for k in 0..3 {
                    c[k] = c[k] * (1.0 - a) + s.color[k] * a;
                }
            }
            for k in 0..3 {
                data[k * hw + y * resolution + x] = (c[k] * 2.0 - 1.0).clamp(-1.0, 1.0);
            }
        }
    }
    let t = crate::tensor::Tensor::from_vec(&[3, resolution, resolution], data).expect("shape");
    (Image::from_tensor(t).expect("rgb"), attrs)
}

/// `n` toy faces; face `i` is rendered from `derive_index(seed, i)`.
pub fn toy_corpus(resolution: usize, n: usize, seed: u64) -> Vec<(Image, FaceAttributes)> {
    (0..n)
        .map(|i| toy_face(resolution, derive_index(seed, i as u64)))
        .collect()
}

/// Deterministic image transform standing in for a manipulation method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Adds a constant offset per RGB channel.
    ColorCast { shift: [f32; 3] },
    /// Separable Gaussian blur.
    Blur { sigma: f32 },
    /// Color cast followed by blur.
    ColorCastBlur { shift: [f32; 3], sigma: f32 },
    /// Block averaging plus value quantization, a crude codec artifact.
    Compression { block: usize, levels: u32 },
    /// Reverses the channel order.
    ChannelSwap,
    /// Darkens toward the corners: pixel brightness is scaled by
    /// `1 - strength * r^2`, with `r` the distance from the center over the half-diagonal.
    Vignette { strength: f32 },
    /// Color cast followed by a vignette.
    ColorCastVignette { shift: [f32; 3], strength: f32 },
}

impl Domain {
    pub const WARM_CAST: [f32; 3] = [0.28, 0.04, -0.30];

    /// Named fixtures used by the experiments and the CLI.
    pub fn fixture(name: &str) -> Option<Self> {
        Some(match name {
            "colorcast" => Domain::ColorCast {
                shift: Self::WARM_CAST,
            },
            "blur" => Domain::Blur { sigma: 1.0 },
            "colorcast_blur" | "colorcast-blur" => Domain::ColorCastBlur {
                shift: Self::WARM_CAST,
                sigma: 0.8,
            },
            "compression" => Domain::Compression { block: 4, levels: 6 },
            "channelswap" => Domain::ChannelSwap,
            "vignette" => Domain::Vignette { strength: 0.6 },
            "colorcast_vignette" | "colorcast-vignette" => Domain::ColorCastVignette {
                shift: Self::WARM_CAST,
                strength: 0.6,
            },
            _ => return None,
        })
    }

    pub fn apply(&self, img: &Image) -> Image {
        match *self {
            Domain::ColorCast { shift } => color_cast(img, shift),
            Domain::Blur { sigma } => gaussian_blur(img, sigma),
            Domain::ColorCastBlur { shift, sigma } => gaussian_blur(&color_cast(img, shift), sigma),
            Domain::Compression { block, levels } => compress(img, block, levels),
            Domain::ChannelSwap => channel_swap(img),
            Domain::Vignette { strength } => vignette(img, strength),
            Domain::ColorCastVignette { shift, strength } => vignette(&color_cast(img, shift), strength),
        }
    }
}

fn color_cast(img: &Image, shift: [f32; 3]) -> Image {
    let mut out = img.clone();
    let hw = img.width() * img.height();
    for (c, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        for v in plane {
            *v = (*v + shift[c]).clamp(-1.0, 1.0);
        }
    }
    out
}

fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let radius = (2.5 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (w, h) = (img.width() as isize, img.height() as isize);
    let hw = (w * h) as usize;
    let mut out = img.clone();
    let mut tmp = alloc::vec![0f32; hw];
    for c in 0..3 {
        let src = &img.data()[c * hw..(c + 1) * hw];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += kv * src[(y * w + sx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let dst = &mut out.data_mut()[c * hw..(c + 1) * hw];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += kv * tmp[(sy * w + x) as usize];
                }
                dst[(y * w + x) as usize] = acc;
            }
        }
    }
    out
}

fn compress(img: &Image, block: usize, levels: u32) -> Image {
    let (w, h) = (img.width(), img.height());
    let hw = w * h;
    let mut out = img.clone();
    let q = (levels.max(2) - 1) as f32;
    for c in 0..3 {
        let src = &img.data()[c * hw..(c + 1) * hw];
        let dst = &mut out.data_mut()[c * hw..(c + 1) * hw];
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let mut sum = 0.0;
                let mut n = 0.0;
                for y in by..(by + block).min(h) {
                    for x in bx..(bx + block).min(w) {
                        sum += src[y * w + x];
                        n += 1.0;
                    }
                }
                let mean = sum / n;
                for y in by..(by + block).min(h) {
                    for x in bx..(bx + block).min(w) {
                        let v = 0.5 * src[y * w + x] + 0.5 * mean;
                        dst[y * w + x] = (((v + 1.0) * 0.5 * q).round() / q) * 2.0 - 1.0;
                    }
                }
            }
        }
    }
    out
}

fn vignette(img: &Image, strength: f32) -> Image {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let r2max = cx * cx + cy * cy;
    let mut out = img.clone();
    for plane in out.data_mut().chunks_mut(w * h) {
        for (i, v) in plane.iter_mut().enumerate() {
            let (dx, dy) = ((i % w) as f32 - cx, (i / w) as f32 - cy);
            let f = 1.0 - strength * (dx * dx + dy * dy) / r2max;
            *v = (*v + 1.0) * f - 1.0;
        }
    }
    out
}

fn channel_swap(img: &Image) -> Image {
    let hw = img.width() * img.height();
    let mut out = img.clone();
    for c in 0..3 {
        out.data_mut()[c * hw..(c + 1) * hw].copy_from_slice(&img.data()[(2 - c) * hw..(3 - c) * hw]);
    }
    out
}

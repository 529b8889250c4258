//! Target-image preprocessing: crop around a face box, resize, normalize.

use std::path::PathBuf;

use oneshot_core::{Image, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::read_image;

pub const DEFAULT_CROP_SCALE: f64 = 1.3;

/// Face box as `(x, y, width, height)` in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestSpec {
    pub path: PathBuf,
    /// `None` uses the whole frame.
    pub face: Option<FaceBox>,
    pub scale: f64,
    pub resolution: usize,
}

impl IngestSpec {
    pub fn full_frame(path: impl Into<PathBuf>, resolution: usize) -> Self {
        Self {
            path: path.into(),
            face: None,
            scale: DEFAULT_CROP_SCALE,
            resolution,
        }
    }
}

/// Crop rectangle `(x0, y0, x1, y1)`: the box scaled about its centre, clamped to the image.
pub fn crop_box(face: FaceBox, scale: f64, width: usize, height: usize) -> Result<[f64; 4]> {
    if scale < 1.0 || !scale.is_finite() {
        return Err(invalid(format!("crop scale must be at least 1, got {scale}")));
    }
    if face.width <= 0.0 || face.height <= 0.0 || ![face.x, face.y, face.width, face.height].iter().all(|v| v.is_finite()) {
        return Err(invalid("face box has zero area".into()));
    }
    let (cx, cy) = (face.x + face.width / 2.0, face.y + face.height / 2.0);
    let (hw, hh) = (face.width * scale / 2.0, face.height * scale / 2.0);
    let b = [
        (cx - hw).max(0.0),
        (cy - hh).max(0.0),
        (cx + hw).min(width as f64),
        (cy + hh).min(height as f64),
    ];
    if b[2] <= b[0] || b[3] <= b[1] {
        return Err(invalid("face box lies outside the image".into()));
    }
    Ok(b)
}

fn invalid(msg: String) -> Error {
    Error::Core(oneshot_core::Error::Input(msg))
}

/// Bilinear resample of the rectangle `b` of `src` to `out × out`, sampling at pixel centres.
pub fn resample(src: &Image, b: [f64; 4], out: usize) -> Image {
    let (w, h) = (src.width(), src.height());
    let (sx, sy) = ((b[2] - b[0]) / out as f64, (b[3] - b[1]) / out as f64);
    let mut data = vec![0f32; 3 * out * out];
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    for y in 0..out {
        let fy = clamp(b[1] + (y as f64 + 0.5) * sy - 0.5, h);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..out {
            let fx = clamp(b[0] + (x as f64 + 0.5) * sx - 0.5, w);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..3 {
                let top = src.at(c, y0, x0) as f64 * (1.0 - tx) + src.at(c, y0, x1) as f64 * tx;
                let bot = src.at(c, y1, x0) as f64 * (1.0 - tx) + src.at(c, y1, x1) as f64 * tx;
                data[(c * out + y) * out + x] = (top * (1.0 - ty) + bot * ty) as f32;
            }
        }
    }
    Image::from_tensor(Tensor::from_vec(&[3, out, out], data).expect("shape")).expect("valid image")
}

pub fn ingest(spec: &IngestSpec) -> Result<Image> {
    if spec.resolution == 0 {
        return Err(invalid("output resolution must be positive".into()));
    }
    let src = read_image(&spec.path)?;
    let b = match spec.face {
        Some(f) => crop_box(f, spec.scale, src.width(), src.height())?,
        None => [0.0, 0.0, src.width() as f64, src.height() as f64],
    };
    Ok(resample(&src, b, spec.resolution))
}

use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float as _;
use sha2::{Digest, Sha256};

use crate::error::{ensure_input, Result};
use crate::tensor::Tensor;

/// Planar RGB image, shape `[3, height, width]`, values nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor<f32>,
}

impl Image {
    pub fn from_tensor(pixels: Tensor<f32>) -> Result<Self> {
        ensure_input!(
            pixels.shape().len() == 3 && pixels.shape()[0] == 3,
            "image tensor must be [3, H, W], got {:?}",
            pixels.shape()
        );
        Ok(Self { pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut t = Tensor::zeros(&[3, height, width]);
        for (c, plane) in t.data_mut().chunks_mut(height * width).enumerate() {
            plane.fill(rgb[c]);
        }
        Self { pixels: t }
    }

    /// Interleaved 8-bit RGB, row-major; maps `0 -> -1` and `255 -> 1`.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        ensure_input!(
            bytes.len() == width * height * 3,
            "expected {} bytes for {width}x{height} RGB, got {}",
            width * height * 3,
            bytes.len()
        );
        let hw = width * height;
        let mut data = alloc::vec![0f32; 3 * hw];
        for (i, px) in bytes.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * hw + i] = px[c] as f32 / 127.5 - 1.0;
            }
        }
        Ok(Self {
            pixels: Tensor::from_vec(&[3, height, width], data)?,
        })
    }

    /// Interleaved 8-bit RGB; values are clamped to `[-1, 1]` and rounded.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = self.width() * self.height();
        let d = self.pixels.data();
        let mut out = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            for c in 0..3 {
                let v = ((d[c * hw + i].clamp(-1.0, 1.0) + 1.0) * 127.5).round();
                out.push(v as u8);
            }
        }
        out
    }

    /// Round trip through 8-bit quantization.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(self.width(), self.height(), &self.to_rgb8()).expect("same dims")
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn data(&self) -> &[f32] {
        self.pixels.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.pixels.data_mut()
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.pixels
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn in_range(&self) -> bool {
        self.pixels.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v))
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let hw = self.width() * self.height();
        let mut m = [0.0; 3];
        for (c, plane) in self.pixels.data().chunks(hw).enumerate() {
            m[c] = plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        }
        m
    }

    /// Mean absolute per-pixel difference.
    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        let n = self.pixels.len() as f64;
        self.pixels
            .data()
            .iter()
            .zip(other.pixels.data())
            .map(|(&a, &b)| (a - b).abs() as f64)
            .sum::<f64>()
            / n
    }

    /// Hex SHA-256 over the little-endian bytes of the shape and pixel values.
    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.pixels.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in self.pixels.data() {
            h.update(v.to_le_bytes());
        }
        hex_lower(&h.finalize())
    }
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_lower(&Sha256::digest(bytes))
}

fn hex_lower(bytes: &[u8]) -> String {
    const DIGITS: &[u8; 16] = b"0123456789abcdef";
    let mut s = String::with_capacity(bytes.len() * 2);
    for &b in bytes {
        s.push(DIGITS[(b >> 4) as usize] as char);
        s.push(DIGITS[(b & 15) as usize] as char);
    }
    s
}

/// Stacks images into an `[N, 3, H, W]` batch, casting to `T`.
pub fn batch<T: crate::scalar::Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let ts: Vec<&Tensor<f32>> = images.iter().map(|i| &i.pixels).collect();
    Ok(Tensor::stack(&ts)?.cast())
}

/// Splits an `[N, 3, H, W]` batch into images.
pub fn unbatch<T: crate::scalar::Scalar>(t: &Tensor<T>) -> Vec<Image> {
    t.unstack()
        .into_iter()
        .map(|x| Image { pixels: x.cast() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip_is_exact_on_quantized_values() {
        let bytes: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = Image::from_rgb8(4, 3, &bytes).unwrap();
        assert_eq!(img.to_rgb8(), bytes);
        assert!(img.in_range());
    }

    #[test]
    fn rejects_non_rgb_tensors() {
        assert!(Image::from_tensor(Tensor::zeros(&[1, 4, 4])).is_err());
    }
}

//! PNG reading and writing, 8-bit RGB.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use oneshot_core::Image;

use crate::error::{format_err, IoContext, Result};

/// PNG bytes of `img` after quantization to 8 bits.
pub fn encode_png(img: &Image) -> Vec<u8> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let buf = RgbImage::from_raw(w, h, img.to_rgb8()).expect("buffer matches dimensions");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn decode_png(bytes: &[u8], path: &Path) -> Result<Image> {
    let img = image::load_from_memory(bytes).map_err(|e| format_err(path, e))?.to_rgb8();
    Ok(Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())?)
}

/// Writes `img` and returns the bytes written.
pub fn write_png(path: &Path, img: &Image) -> Result<Vec<u8>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    let bytes = encode_png(img);
    fs::write(path, &bytes).at(path)?;
    Ok(bytes)
}

/// Reads any image format the decoder recognizes as RGB in [-1, 1].
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).at(path)?;
    decode_png(&bytes, path)
}

/// Tiles equally sized images row-major into `cols` columns with a 1-pixel white gutter.
pub fn grid(images: &[&Image], cols: usize) -> Image {
    assert!(!images.is_empty() && cols > 0);
    let (w, h) = (images[0].width(), images[0].height());
    let rows = images.len().div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let mut out = Image::filled(gh, gw, [1.0; 3]);
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = ((k / cols) * (h + 1), (k % cols) * (w + 1));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[(c * gh + oy + y) * gw + ox + x] = img.at(c, y, x);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_matches_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = oneshot_core::corpus::toy_face(16, 4);
        let p = dir.path().join("a.png");
        write_png(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back, img.quantized());
        assert_eq!(encode_png(&img), fs::read(&p).unwrap());
    }

    #[test]
    fn grid_layout() {
        let a = Image::filled(4, 4, [-1.0; 3]);
        let g = grid(&[&a, &a, &a], 2);
        assert_eq!((g.width(), g.height()), (9, 9));
        assert_eq!(g.at(0, 0, 4), 1.0);
        assert_eq!(g.at(0, 5, 0), -1.0);
        assert_eq!(g.at(0, 5, 5), 1.0);
    }

    #[test]
    fn unreadable_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        fs::write(&p, b"not an image").unwrap();
        assert!(matches!(read_image(&p), Err(crate::Error::Format { .. })));
    }
}

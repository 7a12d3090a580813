use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::{Axis, Volume3D};
use crate::error::{Error, Result};

/// Single-channel 2D image, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image2D {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i + self.width * j]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// 8-bit RGB image, x-fastest, three bytes per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

/// Maximum-intensity projection along `axis`. The output keeps the two
/// remaining axes in their original order (x before y before z).
pub fn mip(v: &Volume3D, axis: Axis) -> Image2D {
    let [nx, ny, nz] = v.dims();
    let (width, height) = match axis {
        Axis::X => (ny, nz),
        Axis::Y => (nx, nz),
        Axis::Z => (nx, ny),
    };
    let mut data = vec![f32::NEG_INFINITY; width * height];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let o = match axis {
                    Axis::X => y + ny * z,
                    Axis::Y => x + nx * z,
                    Axis::Z => x + nx * y,
                };
                let val = v.get(x, y, z);
                if val > data[o] {
                    data[o] = val;
                }
            }
        }
    }
    Image2D { width, height, data }
}

/// Quantizes `v` into `[0, 255]` with round-half-up.
#[inline]
pub(crate) fn quantize(v: f32, lo: f64, hi: f64) -> u8 {
    let t = ((f64::from(v) - lo) / (hi - lo)).clamp(0.0, 1.0);
    (255.0 * t + 0.5).floor() as u8
}

fn encoder(path: &Path, width: usize, height: usize, color: png::ColorType) -> Result<png::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Balanced);
    enc.write_header().map_err(|e| png_err(path, e))
}

fn png_err(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    }
}

/// Writes an 8-bit grayscale PNG with `pixel = round(255 * clamp((v - lo) / (hi - lo), 0, 1))`.
pub fn write_mip_png(img: &Image2D, path: impl AsRef<Path>, window: (f64, f64)) -> Result<()> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::InvalidWindow { lo, hi });
    }
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v, lo, hi)).collect();
    let mut w = encoder(path, img.width, img.height, png::ColorType::Grayscale)?;
    w.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

pub fn write_rgb_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data.iter().flatten().copied().collect();
    let mut w = encoder(path, img.width, img.height, png::ColorType::Rgb)?;
    w.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))
}

/// Grayscale MIP of `base` with every pixel whose ray meets the mask
/// painted `color`.
pub fn overlay_mask(base: &Volume3D, mask: &Volume3D, axis: Axis, color: [u8; 3]) -> Result<RgbImage> {
    if base.dims() != mask.dims() {
        return Err(Error::ShapeMismatch(format!("image {:?} and mask {:?} differ", base.dims(), mask.dims())));
    }
    let (g, m) = (mip(base, axis), mip(mask, axis));
    let (lo, hi) = g.min_max();
    let (lo, hi) = (f64::from(lo), if hi > lo { f64::from(hi) } else { f64::from(lo) + 1.0 });
    let data = g
        .data
        .iter()
        .zip(&m.data)
        .map(|(&v, &k)| {
            if k >= 0.5 {
                color
            } else {
                let q = quantize(v, lo, hi);
                [q, q, q]
            }
        })
        .collect();
    Ok(RgbImage { width: g.width, height: g.height, data })
}

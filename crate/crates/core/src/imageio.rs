//! 8-bit PNG conversion for rasters with values in [0, 1].

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::raster::Raster;

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Quantizes to 8 bits and back, as a PNG round trip would.
pub fn quantize(r: &Raster) -> Raster {
    r.map(|v| to_u8(v) as f64 / 255.0)
}

pub fn encode_png(r: &Raster) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    match r.channels() {
        1 => gray_image(r).write_to(&mut buf, image::ImageFormat::Png)?,
        3 => rgb_image(r).write_to(&mut buf, image::ImageFormat::Png)?,
        c => return Err(Error::Argument(format!("PNG export needs 1 or 3 channels, got {c}"))),
    }
    Ok(buf.into_inner())
}

fn gray_image(r: &Raster) -> GrayImage {
    ImageBuffer::from_fn(r.width() as u32, r.height() as u32, |x, y| {
        Luma([to_u8(r.get(x as usize, y as usize, 0))])
    })
}

fn rgb_image(r: &Raster) -> RgbImage {
    ImageBuffer::from_fn(r.width() as u32, r.height() as u32, |x, y| {
        let p = r.pixel(x as usize, y as usize);
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    })
}

pub fn write_png(path: &Path, r: &Raster) -> Result<()> {
    let bytes = encode_png(r)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a PNG as an RGB raster in [0, 1].
pub fn read_rgb(path: &Path) -> Result<Raster> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Raster::from_vec(w as usize, h as usize, 3, data)
}

/// Loads a PNG as a single-channel raster in [0, 1].
pub fn read_gray(path: &Path) -> Result<Raster> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Raster::from_vec(w as usize, h as usize, 1, data)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    Ok(image::open(path)?)
}

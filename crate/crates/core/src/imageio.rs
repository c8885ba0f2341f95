//! Reading and writing the image files used by datasets, pseudo depth,
//! predictions and ground truth.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

pub fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

pub fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Decodes an 8-bit (or wider) colour image into `3 x H x W` in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.into_raw();
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        raw[(y * w + x) * 3 + c] as f32 / 255.0
    }))
}

/// A grayscale image with its raw integer values and their full scale.
pub struct GrayImage {
    pub values: Array2<f64>,
    /// 255 for 8-bit sources, 65535 for 16-bit sources.
    pub full_scale: f64,
}

/// Decodes an 8- or 16-bit grayscale image. Colour images are converted to
/// luma at their native bit depth; floating-point images are rejected.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = open(path)?;
    let (values, full_scale, w, h) = match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            let g = img.to_luma16();
            let (w, h) = g.dimensions();
            (g.into_raw().into_iter().map(f64::from).collect::<Vec<_>>(), 65535.0, w, h)
        }
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            (g.into_raw().into_iter().map(f64::from).collect::<Vec<_>>(), 255.0, w, h)
        }
        _ => return Err(Error::UnsupportedBitDepth(path.to_path_buf())),
    };
    let values = Array2::from_shape_vec((h as usize, w as usize), values)
        .map_err(|e| Error::UnreadableImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Ok(GrayImage { values, full_scale })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn save_error(path: &Path, e: image::ImageError) -> Error {
    Error::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

/// Writes values in `[0, 1]` as an 8-bit grayscale PNG.
pub fn write_gray8(path: &Path, values: &Array2<f64>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = values.dim();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(values[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save(path).map_err(|e| save_error(path, e))
}

/// Writes values in `[0, 1]` as a 16-bit grayscale PNG.
pub fn write_gray16(path: &Path, values: &Array2<f64>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = values.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(values[[y as usize, x as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|e| save_error(path, e))
}

/// Writes a `3 x H x W` array in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_rgb8(path: &Path, rgb: &Array3<f32>) -> Result<()> {
    ensure_parent(path)?;
    let (_, h, w) = rgb.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (rgb[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| save_error(path, e))
}

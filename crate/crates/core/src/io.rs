//! Raster and manifest I/O.
//!
//! Images are RGB PNG (8 or 16 bit), masks single-channel 8-bit PNG with
//! values in `{0, 1, 2}`. Manifests are CSV with the header
//! `image_path,mask_path,yaw_deg,pitch_deg,domain` and optionally
//! `head_yaw_deg,head_pitch_deg`; paths are relative to the manifest's
//! directory unless absolute.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassMask, ImageTensor};

/// Sample depth used when writing images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

fn open_raster(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = image::ImageReader::open(path)?.with_guessed_format()?;
    match reader.decode() {
        Ok(img) => Ok(img),
        Err(image::ImageError::Unsupported(e)) => Err(Error::UnsupportedFormat(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

pub fn save_image(image: &ImageTensor, path: &Path) -> Result<()> {
    save_image_with_depth(image, path, BitDepth::Eight)
}

pub fn save_image_with_depth(image: &ImageTensor, path: &Path, depth: BitDepth) -> Result<()> {
    let (h, w) = (image.height() as u32, image.width() as u32);
    let px = |x: u32, y: u32, c: usize| image.get(c, y as usize, x as usize).clamp(0.0, 1.0);
    match depth {
        BitDepth::Eight => {
            let buf: RgbImage = ImageBuffer::from_fn(w, h, |x, y| Rgb([0, 1, 2].map(|c| (px(x, y, c) * 255.0).round() as u8)));
            buf.save_with_format(path, image::ImageFormat::Png)?;
        }
        BitDepth::Sixteen => {
            let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
                ImageBuffer::from_fn(w, h, |x, y| Rgb([0, 1, 2].map(|c| (px(x, y, c) * 65535.0).round() as u16)));
            buf.save_with_format(path, image::ImageFormat::Png)?;
        }
    }
    Ok(())
}

/// Load an 8- or 16-bit raster. Grayscale is replicated to three channels
/// and alpha is dropped; floating-point rasters are rejected.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = open_raster(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            let buf = img.to_rgb8();
            planar(buf.pixels().map(|p| p.0.map(|v| v as f32 / 255.0)), w, h)
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            let buf = img.to_rgb16();
            planar(buf.pixels().map(|p| p.0.map(|v| v as f32 / 65535.0)), w, h)
        }
        other => return Err(Error::UnsupportedFormat(format!("{:?} in {}", other.color(), path.display()))),
    };
    ImageTensor::new(h, w, data)
}

/// Interleaved row-major RGB pixels to CHW planes.
fn planar(pixels: impl Iterator<Item = [f32; 3]>, w: usize, h: usize) -> Vec<f32> {
    let n = h * w;
    let mut out = vec![0.0; 3 * n];
    for (i, p) in pixels.enumerate() {
        for c in 0..3 {
            out[c * n + i] = p[c];
        }
    }
    out
}

pub fn save_mask(mask: &ClassMask, path: &Path) -> Result<()> {
    let buf: GrayImage = ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([mask.labels()[y as usize * mask.width() + x as usize]])
    });
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<ClassMask> {
    let img = open_raster(path)?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        other => return Err(Error::UnsupportedFormat(format!("mask must be 8-bit single channel, got {:?}", other.color()))),
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    ClassMask::new(h, w, gray.into_raw())
}

/// One manifest row as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_path: String,
    #[serde(default)]
    pub mask_path: String,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub domain: String,
    #[serde(default)]
    pub head_yaw_deg: Option<f64>,
    #[serde(default)]
    pub head_pitch_deg: Option<f64>,
}

impl ManifestRow {
    /// Image path resolved against the manifest directory.
    pub fn image_file(&self, base: &Path) -> PathBuf {
        base.join(&self.image_path)
    }

    pub fn mask_file(&self, base: &Path) -> Option<PathBuf> {
        (!self.mask_path.is_empty()).then(|| base.join(&self.mask_path))
    }
}

pub const MANIFEST_HEADER: [&str; 5] = ["image_path", "mask_path", "yaw_deg", "pitch_deg", "domain"];
pub const HEAD_POSE_HEADER: [&str; 2] = ["head_yaw_deg", "head_pitch_deg"];

/// Parse a manifest. Row numbers in errors count the header as line 1.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    for required in MANIFEST_HEADER {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::ParseError { line: 1, message: format!("missing column `{required}`") });
        }
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = rec.map_err(|e| Error::ParseError { line: i + 2, message: e.to_string() })?;
        if !row.yaw_deg.is_finite() || !row.pitch_deg.is_finite() {
            return Err(Error::ParseError { line: i + 2, message: "non-finite gaze angle".into() });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Write a manifest. Head-pose columns appear only if some row carries them.
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let with_head = rows.iter().any(|r| r.head_yaw_deg.is_some() || r.head_pitch_deg.is_some());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = MANIFEST_HEADER.to_vec();
    if with_head {
        header.extend(HEAD_POSE_HEADER);
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.image_path.clone(), r.mask_path.clone(), r.yaw_deg.to_string(), r.pitch_deg.to_string(), r.domain.clone()];
        if with_head {
            let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            rec.push(opt(r.head_yaw_deg));
            rec.push(opt(r.head_pitch_deg));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Directory that manifest paths are relative to.
pub fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

//! Image decoding/encoding and the keypoint/descriptor file format.

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{ImageFormat, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::resize_scales;
use crate::matching::{DescriptorSet, Keypoint};
use crate::tensor::{warp_with, Tensor};

fn format_error(path: &Path, msg: impl ToString) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Decodes a PNG or binary PPM/PGM into `[1, 3, H, W]` with values `v / 255`.
/// Grayscale is replicated to three channels.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Pnm) => {}
        Some(f) => return Err(format_error(path, format!("unsupported format {f:?}"))),
        None => return Err(format_error(path, "unrecognized image format")),
    }
    let rgb = reader
        .decode()
        .map_err(|e| format_error(path, e))?
        .to_rgb8();
    Ok(rgb_to_tensor(&rgb))
}

pub fn rgb_to_tensor(rgb: &RgbImage) -> Tensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Tensor::from_fn(vec![1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Quantizes a `[1, 3, H, W]` (or `[1, 1, H, W]`) image to 8 bits.
pub fn tensor_to_rgb(image: &Tensor) -> Result<RgbImage> {
    let (b, c, h, w) = image.dims4()?;
    if b != 1 || !(c == 1 || c == 3) {
        return Err(Error::invalid(format!(
            "expected a [1, 1|3, H, W] image, got {:?}",
            image.shape()
        )));
    }
    let d = image.data();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut raw = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for ch in 0..3 {
            raw.push(q(d[ch.min(c - 1) * h * w + p]));
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
}

/// Writes PNG, or binary PPM/PGM, chosen by extension.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let rgb = tensor_to_rgb(image)?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let result = match ext.as_deref() {
        Some("png") => rgb.save_with_format(path, ImageFormat::Png),
        Some("ppm") => rgb.save_with_format(path, ImageFormat::Pnm),
        Some("pgm") => image::DynamicImage::ImageRgb8(rgb)
            .to_luma8()
            .save_with_format(path, ImageFormat::Pnm),
        _ => {
            return Err(format_error(
                path,
                "unsupported output extension (png, ppm, pgm)",
            ))
        }
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => format_error(path, other),
    })
}

/// Bilinear resize with the rotation sampler: output `(x, y)` reads source
/// `(x / sx, y / sy)` for the scales of [`resize_scales`].
pub fn resize_image(image: &Tensor, new_w: usize, new_h: usize) -> Result<Tensor> {
    let (_, _, h, w) = image.dims4()?;
    if new_w == 0 || new_h == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    if (new_w, new_h) == (w, h) {
        return Ok(image.clone());
    }
    let (sx, sy) = resize_scales(w, h, new_w, new_h);
    Ok(warp_with(image, new_h, new_w, |x, y| (x / sx, y / sy)))
}

/// Where the descriptor values of a [`DescriptorFile`] live.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobEncoding {
    /// Little-endian `f32`, base64 in the JSON itself.
    Base64,
    /// Little-endian `f32` in a sidecar file next to the JSON.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorFile {
    pub image: PathBuf,
    pub source: String,
    pub dim: usize,
    pub count: usize,
    pub encoding: BlobEncoding,
    pub keypoints: Vec<Keypoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    /// Sidecar file name, relative to the JSON's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob: Option<String>,
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn bytes_f32(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    if bytes.len() != expected * 4 {
        return Err(format_error(
            path,
            format!(
                "descriptor blob has {} bytes, expected {}",
                bytes.len(),
                expected * 4
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes `set` as a JSON header plus descriptor blob. With
/// [`BlobEncoding::Raw`] the blob goes to `<path>.f32`.
pub fn write_descriptors(
    set: &DescriptorSet,
    image: &Path,
    path: &Path,
    encoding: BlobEncoding,
) -> Result<()> {
    let bytes = f32_bytes(set.data());
    let mut file = DescriptorFile {
        image: image.to_path_buf(),
        source: set.source().to_string(),
        dim: set.dim(),
        count: set.len(),
        encoding,
        keypoints: set.keypoints().to_vec(),
        data: None,
        blob: None,
    };
    match encoding {
        BlobEncoding::Base64 => file.data = Some(STANDARD.encode(&bytes)),
        BlobEncoding::Raw => {
            let sidecar = sidecar_path(path);
            std::fs::write(&sidecar, &bytes).map_err(|e| Error::io(&sidecar, e))?;
            file.blob = sidecar
                .file_name()
                .map(|n| n.to_string_lossy().into_owned());
        }
    }
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".f32");
    path.with_file_name(name)
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: DescriptorFile = serde_json::from_str(&text).map_err(|e| format_error(path, e))?;
    if file.keypoints.len() != file.count {
        return Err(format_error(
            path,
            format!(
                "count {} but {} keypoints",
                file.count,
                file.keypoints.len()
            ),
        ));
    }
    let expected = file.count * file.dim;
    let values = match (file.encoding, &file.data, &file.blob) {
        (BlobEncoding::Base64, Some(data), None) => {
            let bytes = STANDARD.decode(data).map_err(|e| format_error(path, e))?;
            bytes_f32(path, &bytes, expected)?
        }
        (BlobEncoding::Raw, None, Some(blob)) => {
            let sidecar = path.with_file_name(blob);
            let bytes = std::fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            bytes_f32(&sidecar, &bytes, expected)?
        }
        _ => {
            return Err(format_error(
                path,
                "base64 encoding needs `data`, raw encoding needs `blob`",
            ))
        }
    };
    DescriptorSet::new(file.keypoints, file.dim, values, file.source)
        .map_err(|e| format_error(path, e))
}

#[cfg(test)]
mod tests;

//! Portable graymap (P2 ASCII and P5 binary) images.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};
use transit_reid_core::GrayImage;

use crate::error::{AppError, Result};

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let file = File::open(path).map_err(|e| AppError::io(path, e))?;
    let img = ImageReader::with_format(BufReader::new(file), ImageFormat::Pnm)
        .decode()
        .map_err(|e| AppError::format(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => {
            return Err(AppError::format(
                path,
                format!("expected a grayscale image, found {:?}", other.color()),
            ))
        }
    };
    Ok(GrayImage::new(w, h, pixels)?)
}

/// Writes 8-bit samples, binary (P5) unless `ascii` is set (P2).
pub fn write_pgm(path: &Path, img: &GrayImage, ascii: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| AppError::io(path, e))?;
    let encoding = if ascii {
        SampleEncoding::Ascii
    } else {
        SampleEncoding::Binary
    };
    let bytes: Vec<u8> = img.pixels().iter().map(|p| (p * 255.0).round() as u8).collect();
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(encoding))
        .write_image(&bytes, img.width() as u32, img.height() as u32, ExtendedColorType::L8)
        .map_err(|e| AppError::format(path, e))
}

//! PNG I/O for label masks and RGB images.
//!
//! Masks are 8-bit single-channel images whose pixel value is the class
//! index, with 255 reserved for IGNORE. Paletted 8-bit PNGs are read as raw
//! palette indices. RGB PNGs without a palette are not masks and are
//! rejected.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelMask, RgbImage};

pub fn load_mask_png(path: &Path) -> Result<LabelMask> {
    let fmt = |reason: String| Error::MaskPngFormat { path: path.to_path_buf(), reason };

    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(file);
    // Keep palette indices instead of expanding them to RGB.
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Png { path: path.to_path_buf(), source: e })?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(fmt(format!("bit depth {:?} not supported; masks must be 8-bit", info.bit_depth)));
    }
    match info.color_type {
        png::ColorType::Grayscale | png::ColorType::Indexed => {}
        other => return Err(fmt(format!("color type {other:?} is not a mask (8-bit grayscale or paletted required)"))),
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png { path: path.to_path_buf(), source: e })?;
    buf.truncate(frame.buffer_size());
    if buf.len() != width * height {
        return Err(fmt(format!("decoded {} bytes for {}x{} mask", buf.len(), width, height)));
    }
    LabelMask::from_raw(height, width, buf)
}

pub fn save_mask_png(path: &Path, mask: &LabelMask) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = BufWriter::new(file);
    let mut encoder = png::Encoder::new(w, mask.width() as u32, mask.height() as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::MaskPngFormat { path: path.to_path_buf(), reason: e.to_string() })?;
    writer
        .write_image_data(mask.as_slice())
        .map_err(|e| Error::MaskPngFormat { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(())
}

/// Loads an 8-bit RGB png (alpha, if present, is dropped).
pub fn load_rgb_png(path: &Path) -> Result<RgbImage> {
    let fmt = |reason: String| Error::MaskPngFormat { path: path.to_path_buf(), reason };

    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(|e| Error::Png { path: path.to_path_buf(), source: e })?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(fmt(format!("bit depth {:?} not supported for rgb", info.bit_depth)));
    }
    let color = info.color_type;
    let channels = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(fmt(format!("color type {other:?} is not an rgb image"))),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png { path: path.to_path_buf(), source: e })?;
    buf.truncate(frame.buffer_size());
    let mut rgb = Vec::with_capacity(width * height * 3);
    for px in buf.chunks_exact(channels) {
        rgb.extend_from_slice(&px[..3]);
    }
    RgbImage::from_raw(height, width, rgb)
}

pub fn save_rgb_png(path: &Path, image: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = BufWriter::new(file);
    let mut encoder = png::Encoder::new(w, image.width() as u32, image.height() as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::MaskPngFormat { path: path.to_path_buf(), reason: e.to_string() })?;
    writer
        .write_image_data(image.as_slice())
        .map_err(|e| Error::MaskPngFormat { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(())
}

//! 8-bit RGBA PNG export for viewing results.

use std::path::Path;

use image::{ImageEncoder, ExtendedColorType};

use crate::error::{Error, Result};
use crate::types::Image;

/// `[0, 1]` to `0..=255`, rounding half to even.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Single-channel images become opaque gray, RGB becomes opaque color.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let rgba: Vec<u8> = match img.channels() {
        4 => img.data().iter().map(|&v| quantize(v)).collect(),
        3 => img
            .data()
            .chunks_exact(3)
            .flat_map(|p| [quantize(p[0]), quantize(p[1]), quantize(p[2]), 255])
            .collect(),
        _ => img
            .data()
            .iter()
            .flat_map(|&v| {
                let g = quantize(v);
                [g, g, g, 255]
            })
            .collect(),
    };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&rgba, img.width(), img.height(), ExtendedColorType::Rgba8)
        .map_err(|e| Error::format("PNG", e.to_string()))?;
    Ok(out)
}

pub fn write_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    super::write_bytes(path.as_ref(), &encode_png(img)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_to_even() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(2.0), 255);
        assert_eq!(quantize(-1.0), 0);
        // 0.5 * 255 = 127.5
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(2.5 / 255.0), 2);
    }

    #[test]
    fn png_decodes_to_the_quantized_pixels() {
        let img = Image::new(2, 1, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let bytes = encode_png(&img).unwrap();
        let back = image::load_from_memory(&bytes).unwrap().to_rgba8();
        assert_eq!(back.as_raw(), &[0, 128, 255, 255, 64, 191, 26, 255]);
    }
}

//! Image decoding, resizing and heatmap rendering.

use std::io::Write;
use std::path::Path;

use image::imageops::FilterType;
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::relevance::SaliencyMap;

/// Resampling used to bring an image to the model's input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resize {
    Nearest,
    #[default]
    Bilinear,
}

/// Decode a PNG or PPM/PGM file into 8-bit RGB.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Image {
            path: path.display().to_string(),
            detail: other.to_string(),
        },
    })?;
    Ok(img.to_rgb8())
}

pub fn resize(img: &RgbImage, width: u32, height: u32, how: Resize) -> RgbImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    let filter = match how {
        Resize::Nearest => FilterType::Nearest,
        Resize::Bilinear => FilterType::Triangle,
    };
    image::imageops::resize(img, width, height, filter)
}

/// Map values to `0..=255` by the map's own maximum. Negative values render
/// as 0; an all-nonpositive map renders black.
pub fn to_gray8(map: &SaliencyMap) -> Vec<u8> {
    let max = map.values.max_value();
    map.values
        .data()
        .iter()
        .map(|&v| {
            if max > 0.0 && v > 0.0 {
                (f64::from(v) / f64::from(max) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary 8-bit PGM (`P5`).
pub fn encode_pgm(map: &SaliencyMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(to_gray8(map));
    out
}

pub fn write_pgm(path: impl AsRef<Path>, map: &SaliencyMap) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pgm(map))?;
    Ok(())
}

/// Black → red → yellow → white ramp.
fn hot(v: u8) -> Rgb<u8> {
    let t = u32::from(v) * 3;
    let r = t.min(255) as u8;
    let g = t.saturating_sub(255).min(255) as u8;
    let b = t.saturating_sub(510).min(255) as u8;
    Rgb([r, g, b])
}

/// Heatmap as an RGB image, grayscale or with the `hot` ramp.
pub fn render_rgb(map: &SaliencyMap, colormap: bool) -> RgbImage {
    let gray = to_gray8(map);
    RgbImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        let v = gray[y as usize * map.width() + x as usize];
        if colormap {
            hot(v)
        } else {
            Rgb([v, v, v])
        }
    })
}

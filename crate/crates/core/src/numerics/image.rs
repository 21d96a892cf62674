use crate::error::{Error, Result};

use super::Grid;

/// 8-bit grayscale PNG bytes.
pub fn encode_gray_png(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height || width == 0 || height == 0 {
        return Err(Error::Shape(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        w.write_image_data(pixels).map_err(|e| Error::Format(e.to_string()))?;
        w.finish().map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

/// Linear gray heatmap: minimum → 0, maximum → 255. A constant map is black.
pub fn heatmap_png(values: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels: Vec<u8> = values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    encode_gray_png(width, height, &pixels)
}

/// Maps `[−1, 1]` to `[0, 255]` after clamping.
pub fn to_gray(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Lays image grids out in rows of `cols` tiles with a one-pixel black gutter.
/// Channels of one sample are placed side by side.
pub fn tile_png(samples: &[Grid], cols: usize) -> Result<Vec<u8>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidParameter("no samples to tile".into()))?;
    let (c, h, w) = first.shape();
    if samples.iter().any(|g| g.shape() != (c, h, w)) {
        return Err(Error::Shape("tiled samples must share a shape".into()));
    }
    let cols = cols.clamp(1, samples.len());
    let rows = samples.len().div_ceil(cols);
    let tile_w = c * w;
    let width = cols * (tile_w + 1) - 1;
    let height = rows * (h + 1) - 1;
    let mut pixels = vec![0u8; width * height];
    for (k, g) in samples.iter().enumerate() {
        let (oy, ox) = ((k / cols) * (h + 1), (k % cols) * (tile_w + 1));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    pixels[(oy + y) * width + ox + ch * w + x] = to_gray(g.get(ch, y, x));
                }
            }
        }
    }
    encode_gray_png(width, height, &pixels)
}

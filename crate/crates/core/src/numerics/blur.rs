use crate::error::{Error, Result};

use super::Grid;

/// Normalized 1-D Gaussian taps over `[-r, r]` with `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Grid> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "gaussian kernel sigma must be positive and finite, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let denom = 2.0 * sigma * sigma;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / denom).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    Ok(Grid::from_raw(taps.len(), 1, 1, taps))
}

/// Gaussian blur of every channel, separable (rows then columns) with
/// reflect border handling.
///
/// `sigma == 0` returns `x` unchanged. `sigma == +inf` is the averaging limit
/// and returns [`channel_mean`].
pub fn blur(x: &Grid, sigma: f64) -> Result<Grid> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "blur sigma must be non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    if sigma.is_infinite() {
        return Ok(channel_mean(x));
    }
    let kernel = gaussian_kernel(sigma)?;
    let taps = kernel.data();
    let radius = (taps.len() / 2) as isize;
    let (c, h, w) = x.shape();
    let mut out = Grid::zeros(c, h, w);
    let mut rows = vec![0.0; h * w];
    for ch in 0..c {
        let src = x.channel(ch);
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (k, &tap) in taps.iter().enumerate() {
                    let sx = reflect(xx as isize + k as isize - radius, w);
                    acc += tap * src[y * w + sx];
                }
                rows[y * w + xx] = acc;
            }
        }
        let dst = out.channel_mut(ch);
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (k, &tap) in taps.iter().enumerate() {
                    let sy = reflect(y as isize + k as isize - radius, h);
                    acc += tap * rows[sy * w + xx];
                }
                dst[y * w + xx] = acc;
            }
        }
    }
    Ok(out)
}

/// Every pixel replaced by the mean of its channel.
pub fn channel_mean(x: &Grid) -> Grid {
    let (c, h, w) = x.shape();
    let mut out = Grid::zeros(c, h, w);
    for ch in 0..c {
        let m = x.channel(ch).iter().sum::<f64>() / (h * w) as f64;
        out.channel_mut(ch).fill(m);
    }
    out
}

/// Mirror index into `[0, n)` without repeating the edge sample
/// (`d c b | a b c d | c b a`), folding as often as needed.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

use super::Grid;

/// Magnitudes of the 2-D DFT of a square single-channel patch, DC at `(0, 0)`.
///
/// Unnormalized forward transform, so Parseval reads
/// `Σ|F|² = n²·Σ|x|²`.
pub fn dft_magnitude(patch: &Grid) -> Result<Grid> {
    let (c, h, w) = patch.shape();
    if c != 1 || h != w || h == 0 {
        return Err(Error::Shape(format!(
            "dft_magnitude needs a square 1-channel patch, got {c}x{h}x{w}"
        )));
    }
    let n = h;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = patch.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    // rows
    for row in buf.chunks_exact_mut(n) {
        fft.process(row);
    }
    // columns
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = buf[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            buf[y * n + x] = col[y];
        }
    }
    Ok(Grid::from_raw(1, n, n, buf.iter().map(|z| z.norm()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{standard_normal, RngStream};
    use std::f64::consts::PI;

    /// Direct O(n⁴) double-sum transform.
    fn naive_dft_magnitude(patch: &Grid) -> Vec<f64> {
        let n = patch.height();
        let mut out = vec![0.0; n * n];
        for u in 0..n {
            for v in 0..n {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        let phase = -2.0 * PI * ((u * y) as f64 + (v * x) as f64) / n as f64;
                        re += patch.get(0, y, x) * phase.cos();
                        im += patch.get(0, y, x) * phase.sin();
                    }
                }
                out[u * n + v] = (re * re + im * im).sqrt();
            }
        }
        out
    }

    #[test]
    fn constant_patch_concentrates_at_dc() {
        let m = dft_magnitude(&Grid::filled(1, 8, 8, -0.5)).unwrap();
        assert!((m.get(0, 0, 0) - 32.0).abs() < 1e-12);
        assert!(m.data()[1..].iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn pure_tone_has_two_bins() {
        let n = 16;
        let mut p = Grid::zeros(1, n, n);
        for y in 0..n {
            for x in 0..n {
                p.set(0, y, x, (2.0 * PI * 3.0 * x as f64 / n as f64).cos());
            }
        }
        let m = dft_magnitude(&p).unwrap();
        let nonzero: Vec<usize> = (0..n * n).filter(|&i| m.data()[i] > 1e-9).collect();
        assert_eq!(nonzero, vec![3, n - 3]);
        assert!((m.data()[3] - (n * n) as f64 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn matches_naive_transform() {
        let p = standard_normal(&mut RngStream::new(8, 8), (1, 8, 8));
        let fast = dft_magnitude(&p).unwrap();
        let slow = naive_dft_magnitude(&p);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn parseval() {
        for n in [8, 16, 32] {
            let p = standard_normal(&mut RngStream::new(n as u64, 1), (1, n, n));
            let m = dft_magnitude(&p).unwrap();
            let lhs: f64 = m.data().iter().map(|v| v * v).sum();
            let rhs = (n * n) as f64 * p.data().iter().map(|v| v * v).sum::<f64>();
            assert!(((lhs - rhs) / rhs).abs() < 1e-6);
        }
    }

    #[test]
    fn non_square_rejected() {
        assert!(matches!(dft_magnitude(&Grid::zeros(1, 8, 4)), Err(Error::Shape(_))));
    }
}

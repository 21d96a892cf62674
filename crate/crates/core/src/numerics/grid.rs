use std::fmt;

use crate::error::{Error, Result};

/// Dense `channels × height × width` array of reals in row-major order.
///
/// Vectors are stored as `(D, 1, 1)`.
#[derive(Clone, PartialEq)]
pub struct Grid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid({}x{}x{})", self.channels, self.height, self.width)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Grid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values do not fill a {}x{}x{} grid",
                data.len(),
                channels,
                height,
                width
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite entry at index {bad}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// A `(D, 1, 1)` vector grid.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let d = data.len();
        Self::from_vec(d, 1, 1, data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True for the `(D, 1, 1)` vector encoding.
    pub fn is_vector(&self) -> bool {
        self.height == 1 && self.width == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn ensure_same_shape(&self, other: &Grid, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Elementwise combination of two equally shaped grids.
    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Grid {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    pub fn add(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Grid {
        self.map(|v| v * k)
    }

    /// `a·self + b·other`.
    pub fn lincomb(&self, a: f64, other: &Grid, b: f64) -> Result<Grid> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Grid {
        self.map(|v| v.clamp(lo, hi))
    }
}

impl Grid {
    /// Builds a grid without the finiteness audit; for internal kernels that
    /// already know their output is finite.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length_and_nan() {
        assert!(matches!(Grid::from_vec(1, 2, 2, vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            Grid::from_vec(1, 1, 2, vec![0.0, f64::NAN]),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn indexing_is_row_major() {
        let g = Grid::from_vec(2, 2, 3, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(g.get(0, 1, 2), 5.0);
        assert_eq!(g.get(1, 0, 1), 7.0);
        assert_eq!(g.channel(1), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn lincomb_matches_manual() {
        let a = Grid::vector(vec![1.0, 2.0]).unwrap();
        let b = Grid::vector(vec![3.0, -1.0]).unwrap();
        assert_eq!(a.lincomb(2.0, &b, 0.5).unwrap().data(), &[3.5, 3.5]);
        assert!(a.add(&Grid::zeros(1, 1, 2)).is_err());
    }
}

//! Binary tensor dump.
//!
//! Layout (all little-endian): magic `GLAB`, version `u16`, rank `u8`,
//! `rank` dims as `u32`, then `∏dims` values as IEEE-754 `f32`, row-major.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::Grid;

pub const MAGIC: &[u8; 4] = b"GLAB";
pub const VERSION: u16 = 1;

/// A dense tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} need {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    /// Encoded size in bytes.
    pub fn byte_len(&self) -> usize {
        4 + 2 + 1 + 4 * self.dims.len() + 4 * self.data.len()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("rank {} too large", self.dims.len())));
        }
        let mut buf = Vec::with_capacity(self.byte_len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v)?;
        let version = u16::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 4];
            r.read_exact(&mut d)?;
            dims.push(u32::from_le_bytes(d) as usize);
        }
        let n: usize = dims.iter().product();
        let mut payload = vec![0u8; 4 * n];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.byte_len());
        self.write_to(&mut out)?;
        Ok(out)
    }

    /// Stacks equally shaped grids into a rank-4 `N×C×H×W` tensor.
    pub fn stack(grids: &[Grid]) -> Result<Self> {
        let shape = grids.first().map(Grid::shape).unwrap_or((0, 0, 0));
        let mut data = Vec::with_capacity(grids.len() * shape.0 * shape.1 * shape.2);
        for g in grids {
            if g.shape() != shape {
                return Err(Error::Shape(format!("cannot stack {:?} with {:?}", g.shape(), shape)));
            }
            data.extend_from_slice(g.data());
        }
        Tensor::new(vec![grids.len(), shape.0, shape.1, shape.2], data)
    }

    /// Splits a rank-4 tensor back into grids.
    pub fn unstack(&self) -> Result<Vec<Grid>> {
        let [n, c, h, w] = self.dims[..] else {
            return Err(Error::Shape(format!("expected rank 4, got {:?}", self.dims)));
        };
        let per = c * h * w;
        (0..n)
            .map(|i| Grid::from_vec(c, h, w, self.data[i * per..(i + 1) * per].to_vec()))
            .collect()
    }
}

impl From<&Grid> for Tensor {
    fn from(g: &Grid) -> Self {
        let (c, h, w) = g.shape();
        Tensor {
            dims: vec![c, h, w],
            data: g.data().to_vec(),
        }
    }
}

use crate::diffusion::VarianceMode;
use crate::error::{Error, Result};
use crate::numerics::{Grid, RngStream};

use super::ops::{silu, silu_grad, timestep_embedding};
use super::{check_class, Denoiser, DenoiserOutput, ParamSet, Trainable};

/// Hyperparameters of [`MlpDenoiser`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub num_classes: usize,
    pub variance_mode: VarianceMode,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            hidden: 64,
            time_dim: 16,
            num_classes: 0,
            variance_mode: VarianceMode::FixedBeta,
        }
    }
}

/// Two-hidden-layer SiLU network for `(D, 1, 1)` vector data. No attention.
#[derive(Clone, Debug)]
pub struct MlpDenoiser {
    config: MlpConfig,
    params: ParamSet,
}

// parameter indices, in push order
const W1: usize = 0;
const B1: usize = 1;
const TW: usize = 2;
const TB: usize = 3;
const W2: usize = 4;
const B2: usize = 5;
const W3: usize = 6;
const B3: usize = 7;
const CLASS: usize = 8;

struct Cache {
    temb: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
}

impl MlpDenoiser {
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.hidden == 0 || config.time_dim < 2 || config.time_dim % 2 != 0 {
            return Err(Error::InvalidParameter(format!("invalid mlp config {config:?}")));
        }
        let mut rng = RngStream::new(seed, 0x3170);
        let mut gauss = |n: usize, std: f64| -> Vec<f64> { (0..n).map(|_| std * rng.normal()).collect() };
        let (d, h, e) = (config.dim, config.hidden, config.time_dim);
        let mut p = ParamSet::new();
        p.push("fc1.weight", vec![h, d], gauss(h * d, (1.0 / d as f64).sqrt()));
        p.push("fc1.bias", vec![h], vec![0.0; h]);
        p.push("time.weight", vec![h, e], gauss(h * e, (1.0 / e as f64).sqrt()));
        p.push("time.bias", vec![h], vec![0.0; h]);
        p.push("fc2.weight", vec![h, h], gauss(h * h, (1.0 / h as f64).sqrt()));
        p.push("fc2.bias", vec![h], vec![0.0; h]);
        p.push("fc3.weight", vec![d, h], vec![0.0; d * h]);
        p.push("fc3.bias", vec![d], vec![0.0; d]);
        if config.num_classes > 0 {
            p.push("class.embedding", vec![config.num_classes, h], gauss(config.num_classes * h, 0.5));
        }
        Ok(Self { config, params: p })
    }

    pub fn from_params(config: MlpConfig, params: ParamSet) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        template.params.ensure_same_layout(&params)?;
        if !params.is_finite() {
            return Err(Error::InvalidParameter("non-finite parameter in checkpoint".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    fn forward(&self, x: &Grid, t: usize, class: Option<usize>) -> Result<(Vec<f64>, Cache)> {
        let (d, h, e) = (self.config.dim, self.config.hidden, self.config.time_dim);
        if x.shape() != (d, 1, 1) {
            return Err(Error::Shape(format!("mlp expects a {d}-vector, got {:?}", x.shape())));
        }
        check_class(class, self.config.num_classes)?;
        let p = &self.params;
        let temb = timestep_embedding(t, e);
        let mut a1 = dense(p.get(W1), p.get(B1), x.data(), h, d);
        for (a, b) in a1.iter_mut().zip(dense(p.get(TW), p.get(TB), &temb, h, e)) {
            *a += b;
        }
        if let Some(c) = class {
            for (a, b) in a1.iter_mut().zip(&p.get(CLASS)[c * h..(c + 1) * h]) {
                *a += b;
            }
        }
        let h1: Vec<f64> = a1.iter().map(|&v| silu(v)).collect();
        let a2 = dense(p.get(W2), p.get(B2), &h1, h, h);
        let h2: Vec<f64> = a2.iter().map(|&v| silu(v)).collect();
        let out = dense(p.get(W3), p.get(B3), &h2, d, h);
        Ok((out, Cache { temb, a1, h1, a2, h2 }))
    }
}

fn dense(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| b[i] + w[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Accumulates `dW = g ⊗ x`, `db = g` and returns `Wᵀ g`.
fn dense_backward(w: &[f64], x: &[f64], g: &[f64], rows: usize, cols: usize, dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; cols];
    for i in 0..rows {
        db[i] += g[i];
        for j in 0..cols {
            dw[i * cols + j] += g[i] * x[j];
            dx[j] += w[i * cols + j] * g[i];
        }
    }
    dx
}

impl Denoiser for MlpDenoiser {
    fn predict(&self, x_t: &Grid, t: usize, class: Option<usize>) -> Result<DenoiserOutput> {
        let (out, _) = self.forward(x_t, t, class)?;
        Ok(DenoiserOutput {
            eps: Grid::vector(out)?,
            variance_mode: self.config.variance_mode,
            attention: None,
        })
    }

    fn sample_shape(&self) -> (usize, usize, usize) {
        (self.config.dim, 1, 1)
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }
}

impl Trainable for MlpDenoiser {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn example_grad(&self, x_t: &Grid, t: usize, class: Option<usize>, target: &Grid) -> Result<(f64, ParamSet)> {
        let (out, cache) = self.forward(x_t, t, class)?;
        x_t.ensure_same_shape(target, "training target")?;
        let (d, h, e) = (self.config.dim, self.config.hidden, self.config.time_dim);
        let diff: Vec<f64> = out.iter().zip(target.data()).map(|(p, q)| p - q).collect();
        let sse = diff.iter().map(|v| v * v).sum();
        let g_out: Vec<f64> = diff.iter().map(|v| 2.0 * v).collect();

        let p = &self.params;
        let mut g = p.zeros_like();
        let mut dw = vec![0.0; d * h];
        let mut db = vec![0.0; d];
        let dh2 = dense_backward(p.get(W3), &cache.h2, &g_out, d, h, &mut dw, &mut db);
        g.get_mut(W3).copy_from_slice(&dw);
        g.get_mut(B3).copy_from_slice(&db);
        let da2: Vec<f64> = dh2.iter().zip(&cache.a2).map(|(g, &a)| g * silu_grad(a)).collect();
        let mut dw = vec![0.0; h * h];
        let mut db = vec![0.0; h];
        let dh1 = dense_backward(p.get(W2), &cache.h1, &da2, h, h, &mut dw, &mut db);
        g.get_mut(W2).copy_from_slice(&dw);
        g.get_mut(B2).copy_from_slice(&db);
        let da1: Vec<f64> = dh1.iter().zip(&cache.a1).map(|(g, &a)| g * silu_grad(a)).collect();
        let mut dw = vec![0.0; h * d];
        let mut db = vec![0.0; h];
        dense_backward(p.get(W1), x_t.data(), &da1, h, d, &mut dw, &mut db);
        g.get_mut(W1).copy_from_slice(&dw);
        g.get_mut(B1).copy_from_slice(&db);
        let mut dw = vec![0.0; h * e];
        let mut db = vec![0.0; h];
        dense_backward(p.get(TW), &cache.temb, &da1, h, e, &mut dw, &mut db);
        g.get_mut(TW).copy_from_slice(&dw);
        g.get_mut(TB).copy_from_slice(&db);
        if let Some(c) = class {
            g.get_mut(CLASS)[c * h..(c + 1) * h].copy_from_slice(&da1);
        }
        Ok((sse, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_output_at_init_and_shape_checks() {
        let m = MlpDenoiser::new(MlpConfig::default(), 1).unwrap();
        let out = m.predict(&Grid::vector(vec![0.3, -1.0]).unwrap(), 10, None).unwrap();
        assert_eq!(out.eps.data(), &[0.0, 0.0]);
        assert!(out.attention.is_none());
        assert!(m.predict(&Grid::vector(vec![0.0; 3]).unwrap(), 1, None).is_err());
        assert!(m.predict(&Grid::vector(vec![0.0; 2]).unwrap(), 1, Some(0)).is_err());
    }
}

use crate::diffusion::VarianceMode;
use crate::error::{Error, Result};
use crate::numerics::{Grid, RngStream};

use super::attention::{self_attention, self_attention_backward, AttnCache, AttnLayerWeights};
use super::ops::{
    avgpool2, avgpool2_backward, conv3x3, conv3x3_backward, silu, silu_grad, timestep_embedding, transpose,
    upsample2, upsample2_backward,
};
use super::{check_class, AttentionStack, Denoiser, DenoiserOutput, ParamSet, Trainable};

/// Hyperparameters of [`TinyDenoiser`].
#[derive(Clone, Debug, PartialEq)]
pub struct TinyConfig {
    pub in_channels: usize,
    /// Input side length; must be even. Attention runs at `size/2`.
    pub size: usize,
    pub features: usize,
    pub heads: usize,
    pub attn_layers: usize,
    pub time_dim: usize,
    pub num_classes: usize,
    pub variance_mode: VarianceMode,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            size: 16,
            features: 16,
            heads: 4,
            attn_layers: 1,
            time_dim: 16,
            num_classes: 0,
            variance_mode: VarianceMode::FixedBeta,
        }
    }
}

impl TinyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.in_channels == 0 || self.features == 0 || self.heads == 0 || self.attn_layers == 0 {
            return bad("tiny denoiser dimensions must be positive".into());
        }
        if self.size < 2 || self.size % 2 != 0 {
            return bad(format!("size {} must be even and >= 2", self.size));
        }
        if self.features % self.heads != 0 {
            return bad(format!("features {} not divisible by heads {}", self.features, self.heads));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return bad(format!("time_dim {} must be even", self.time_dim));
        }
        Ok(())
    }

    pub fn key_dim(&self) -> usize {
        self.features / self.heads
    }

    pub fn coarse(&self) -> usize {
        self.size / 2
    }
}

#[derive(Clone, Debug)]
struct Layout {
    conv_in_w: usize,
    conv_in_b: usize,
    time_w: usize,
    time_b: usize,
    class_emb: Option<usize>,
    conv_down_w: usize,
    conv_down_b: usize,
    attn: Vec<[usize; 3]>,
    conv_up_w: usize,
    conv_up_b: usize,
    conv_out_w: usize,
    conv_out_b: usize,
}

/// Conv encoder → self-attention at half resolution → conv decoder with a
/// skip connection. Timestep (and optional class) embeddings are added to
/// both the full- and half-resolution pre-activations.
#[derive(Clone, Debug)]
pub struct TinyDenoiser {
    config: TinyConfig,
    params: ParamSet,
    layout: Layout,
}

struct Cache {
    temb: Vec<f64>,
    a1: Vec<f64>,
    p: Vec<f64>,
    a2: Vec<f64>,
    tokens_in: Vec<Vec<f64>>,
    attn: Vec<AttnCache>,
    u: Vec<f64>,
    a3: Vec<f64>,
    h3: Vec<f64>,
}

impl TinyDenoiser {
    /// Random initialization; the output convolution starts at zero so the
    /// untrained model predicts ε = 0.
    pub fn new(config: TinyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, 0x7117);
        let mut gauss = |n: usize, std: f64| -> Vec<f64> { (0..n).map(|_| std * rng.normal()).collect() };
        let (c, f, e, d) = (config.in_channels, config.features, config.time_dim, config.key_dim());
        let mut p = ParamSet::new();
        let conv_in_w = p.push("conv_in.weight", vec![f, c, 3, 3], gauss(f * c * 9, (1.0 / (9 * c) as f64).sqrt()));
        let conv_in_b = p.push("conv_in.bias", vec![f], vec![0.0; f]);
        let time_w = p.push("time.weight", vec![f, e], gauss(f * e, (1.0 / e as f64).sqrt()));
        let time_b = p.push("time.bias", vec![f], vec![0.0; f]);
        let class_emb = (config.num_classes > 0).then(|| {
            p.push(
                "class.embedding",
                vec![config.num_classes, f],
                gauss(config.num_classes * f, 0.5),
            )
        });
        let conv_down_w = p.push("conv_down.weight", vec![f, f, 3, 3], gauss(f * f * 9, (1.0 / (9 * f) as f64).sqrt()));
        let conv_down_b = p.push("conv_down.bias", vec![f], vec![0.0; f]);
        let attn = (0..config.attn_layers)
            .map(|l| {
                let n = config.heads * f * d;
                let std = (1.0 / f as f64).sqrt();
                [
                    p.push(format!("attn{l}.wq"), vec![config.heads, f, d], gauss(n, std)),
                    p.push(format!("attn{l}.wk"), vec![config.heads, f, d], gauss(n, std)),
                    p.push(format!("attn{l}.wv"), vec![config.heads, f, d], gauss(n, std)),
                ]
            })
            .collect();
        let conv_up_w = p.push("conv_up.weight", vec![f, f, 3, 3], gauss(f * f * 9, (1.0 / (9 * f) as f64).sqrt()));
        let conv_up_b = p.push("conv_up.bias", vec![f], vec![0.0; f]);
        let conv_out_w = p.push("conv_out.weight", vec![c, f, 3, 3], vec![0.0; c * f * 9]);
        let conv_out_b = p.push("conv_out.bias", vec![c], vec![0.0; c]);
        Ok(Self {
            config,
            params: p,
            layout: Layout {
                conv_in_w,
                conv_in_b,
                time_w,
                time_b,
                class_emb,
                conv_down_w,
                conv_down_b,
                attn,
                conv_up_w,
                conv_up_b,
                conv_out_w,
                conv_out_b,
            },
        })
    }

    /// Rebuilds a model from stored parameters (checkpoint load).
    pub fn from_params(config: TinyConfig, params: ParamSet) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        template.params.ensure_same_layout(&params)?;
        if !params.is_finite() {
            return Err(Error::InvalidParameter("non-finite parameter in checkpoint".into()));
        }
        Ok(Self {
            config,
            params,
            layout: template.layout,
        })
    }

    pub fn config(&self) -> &TinyConfig {
        &self.config
    }

    fn attn_weights(&self, l: usize) -> AttnLayerWeights {
        let [q, k, v] = self.layout.attn[l];
        AttnLayerWeights {
            heads: self.config.heads,
            channels: self.config.features,
            key_dim: self.config.key_dim(),
            wq: self.params.get(q).to_vec(),
            wk: self.params.get(k).to_vec(),
            wv: self.params.get(v).to_vec(),
        }
    }

    fn embedding(&self, t: usize, class: Option<usize>) -> (Vec<f64>, Vec<f64>) {
        let (f, e) = (self.config.features, self.config.time_dim);
        let temb = timestep_embedding(t, e);
        let w = self.params.get(self.layout.time_w);
        let b = self.params.get(self.layout.time_b);
        let mut te: Vec<f64> = (0..f)
            .map(|i| b[i] + (0..e).map(|j| w[i * e + j] * temb[j]).sum::<f64>())
            .collect();
        if let (Some(c), Some(idx)) = (class, self.layout.class_emb) {
            let emb = &self.params.get(idx)[c * f..(c + 1) * f];
            for (a, b) in te.iter_mut().zip(emb) {
                *a += b;
            }
        }
        (temb, te)
    }

    fn forward(&self, x: &Grid, t: usize, class: Option<usize>) -> Result<(Grid, AttentionStack, Cache)> {
        let cfg = &self.config;
        let (c, big, f) = (cfg.in_channels, cfg.size, cfg.features);
        if x.shape() != (c, big, big) {
            return Err(Error::Shape(format!(
                "tiny denoiser expects {c}x{big}x{big}, got {:?}",
                x.shape()
            )));
        }
        check_class(class, cfg.num_classes)?;
        let small = cfg.coarse();
        let (nbig, n) = (big * big, small * small);
        let l = &self.layout;
        let (temb, te) = self.embedding(t, class);

        let mut a1 = conv3x3(x.data(), c, big, big, self.params.get(l.conv_in_w), self.params.get(l.conv_in_b), f);
        add_per_channel(&mut a1, &te, nbig);
        let h1: Vec<f64> = a1.iter().map(|&v| silu(v)).collect();
        let p = avgpool2(&h1, f, big, big);
        let mut a2 = conv3x3(&p, f, small, small, self.params.get(l.conv_down_w), self.params.get(l.conv_down_b), f);
        add_per_channel(&mut a2, &te, n);
        let h2: Vec<f64> = a2.iter().map(|&v| silu(v)).collect();

        let mut tokens = transpose(&h2, f, n);
        let mut tokens_in = Vec::with_capacity(cfg.attn_layers);
        let mut caches = Vec::with_capacity(cfg.attn_layers);
        let mut stack = Vec::with_capacity(cfg.attn_layers * cfg.heads * n * n);
        for layer in 0..cfg.attn_layers {
            let w = self.attn_weights(layer);
            let (y, cache) = self_attention(&tokens, n, &w)?;
            stack.extend_from_slice(&cache.attn);
            let next: Vec<f64> = tokens.iter().zip(&y).map(|(a, b)| a + b).collect();
            tokens_in.push(std::mem::replace(&mut tokens, next));
            caches.push(cache);
        }
        let m = transpose(&tokens, n, f);
        let mut u = upsample2(&m, f, small, small);
        for (a, b) in u.iter_mut().zip(&h1) {
            *a += b;
        }
        let a3 = conv3x3(&u, f, big, big, self.params.get(l.conv_up_w), self.params.get(l.conv_up_b), f);
        let h3: Vec<f64> = a3.iter().map(|&v| silu(v)).collect();
        let eps = conv3x3(&h3, f, big, big, self.params.get(l.conv_out_w), self.params.get(l.conv_out_b), c);
        let eps = Grid::from_vec(c, big, big, eps)?;
        let attention = AttentionStack {
            layers: cfg.attn_layers,
            heads: cfg.heads,
            height: small,
            width: small,
            data: stack,
        };
        Ok((
            eps,
            attention,
            Cache {
                temb,
                a1,
                p,
                a2,
                tokens_in,
                attn: caches,
                u,
                a3,
                h3,
            },
        ))
    }

    fn backward(&self, x: &Grid, class: Option<usize>, cache: &Cache, d_eps: &[f64]) -> ParamSet {
        let cfg = &self.config;
        let (c, big, f, e) = (cfg.in_channels, cfg.size, cfg.features, cfg.time_dim);
        let small = cfg.coarse();
        let (nbig, n) = (big * big, small * small);
        let l = &self.layout;
        let mut g = self.params.zeros_like();

        let (dh3, dw, db) = conv3x3_backward(&cache.h3, f, big, big, self.params.get(l.conv_out_w), c, d_eps, true);
        g.get_mut(l.conv_out_w).copy_from_slice(&dw);
        g.get_mut(l.conv_out_b).copy_from_slice(&db);
        let da3: Vec<f64> = dh3.iter().zip(&cache.a3).map(|(d, &a)| d * silu_grad(a)).collect();
        let (du, dw, db) = conv3x3_backward(&cache.u, f, big, big, self.params.get(l.conv_up_w), f, &da3, true);
        g.get_mut(l.conv_up_w).copy_from_slice(&dw);
        g.get_mut(l.conv_up_b).copy_from_slice(&db);

        let mut dh1 = du.clone();
        let dm = upsample2_backward(&du, f, small, small);
        let mut d_tokens = transpose(&dm, f, n);
        for layer in (0..cfg.attn_layers).rev() {
            let w = self.attn_weights(layer);
            let (dx, dwq, dwk, dwv) =
                self_attention_backward(&cache.tokens_in[layer], n, &w, &cache.attn[layer], &d_tokens);
            let [q, k, v] = l.attn[layer];
            g.get_mut(q).copy_from_slice(&dwq);
            g.get_mut(k).copy_from_slice(&dwk);
            g.get_mut(v).copy_from_slice(&dwv);
            for (a, b) in d_tokens.iter_mut().zip(&dx) {
                *a += b;
            }
        }
        let dh2 = transpose(&d_tokens, n, f);
        let da2: Vec<f64> = dh2.iter().zip(&cache.a2).map(|(d, &a)| d * silu_grad(a)).collect();
        let mut dte = channel_sums(&da2, f, n);
        let (dp, dw, db) = conv3x3_backward(&cache.p, f, small, small, self.params.get(l.conv_down_w), f, &da2, true);
        g.get_mut(l.conv_down_w).copy_from_slice(&dw);
        g.get_mut(l.conv_down_b).copy_from_slice(&db);
        for (a, b) in dh1.iter_mut().zip(avgpool2_backward(&dp, f, big, big)) {
            *a += b;
        }
        let da1: Vec<f64> = dh1.iter().zip(&cache.a1).map(|(d, &a)| d * silu_grad(a)).collect();
        for (a, b) in dte.iter_mut().zip(channel_sums(&da1, f, nbig)) {
            *a += b;
        }
        let (_, dw, db) = conv3x3_backward(x.data(), c, big, big, self.params.get(l.conv_in_w), f, &da1, false);
        g.get_mut(l.conv_in_w).copy_from_slice(&dw);
        g.get_mut(l.conv_in_b).copy_from_slice(&db);

        let dtw = g.get_mut(l.time_w);
        for i in 0..f {
            for j in 0..e {
                dtw[i * e + j] = dte[i] * cache.temb[j];
            }
        }
        g.get_mut(l.time_b).copy_from_slice(&dte);
        if let (Some(cls), Some(idx)) = (class, l.class_emb) {
            g.get_mut(idx)[cls * f..(cls + 1) * f].copy_from_slice(&dte);
        }
        g
    }
}

fn add_per_channel(x: &mut [f64], bias: &[f64], plane: usize) {
    for (ch, b) in bias.iter().enumerate() {
        for v in &mut x[ch * plane..(ch + 1) * plane] {
            *v += b;
        }
    }
}

fn channel_sums(x: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    (0..channels).map(|ch| x[ch * plane..(ch + 1) * plane].iter().sum()).collect()
}

impl Denoiser for TinyDenoiser {
    fn predict(&self, x_t: &Grid, t: usize, class: Option<usize>) -> Result<DenoiserOutput> {
        let (eps, attention, _) = self.forward(x_t, t, class)?;
        Ok(DenoiserOutput {
            eps,
            variance_mode: self.config.variance_mode,
            attention: Some(attention),
        })
    }

    fn sample_shape(&self) -> (usize, usize, usize) {
        (self.config.in_channels, self.config.size, self.config.size)
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn attention_layers(&self) -> Vec<String> {
        (0..self.config.attn_layers).map(|l| format!("attn{l}")).collect()
    }
}

impl Trainable for TinyDenoiser {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn example_grad(&self, x_t: &Grid, t: usize, class: Option<usize>, target: &Grid) -> Result<(f64, ParamSet)> {
        let (eps, _, cache) = self.forward(x_t, t, class)?;
        eps.ensure_same_shape(target, "training target")?;
        let diff: Vec<f64> = eps.data().iter().zip(target.data()).map(|(p, q)| p - q).collect();
        let sse = diff.iter().map(|d| d * d).sum();
        let d_eps: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
        Ok((sse, self.backward(x_t, class, &cache, &d_eps)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::standard_normal;

    fn small_config() -> TinyConfig {
        TinyConfig {
            size: 8,
            features: 8,
            heads: 2,
            num_classes: 2,
            ..TinyConfig::default()
        }
    }

    fn randomize(model: &mut TinyDenoiser, seed: u64, std: f64) {
        let mut rng = RngStream::new(seed, 5);
        for p in model.params.iter_mut() {
            for v in &mut p.data {
                *v = std * rng.normal();
            }
        }
    }

    #[test]
    fn untrained_predicts_zero() {
        let m = TinyDenoiser::new(TinyConfig::default(), 3).unwrap();
        let x = standard_normal(&mut RngStream::new(1, 0), (1, 16, 16));
        let out = m.predict(&x, 40, None).unwrap();
        assert!(out.eps.data().iter().all(|&v| v == 0.0));
        let att = out.attention.unwrap();
        assert_eq!((att.layers, att.heads, att.height, att.width), (1, 4, 8, 8));
        assert!(att.max_row_sum_error() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = TinyConfig {
            features: 10,
            heads: 4,
            ..TinyConfig::default()
        };
        assert!(TinyDenoiser::new(bad, 0).is_err());
        let odd = TinyConfig {
            size: 7,
            ..TinyConfig::default()
        };
        assert!(TinyDenoiser::new(odd, 0).is_err());
    }

    #[test]
    fn shape_and_class_errors() {
        let m = TinyDenoiser::new(small_config(), 1).unwrap();
        assert!(matches!(m.predict(&Grid::zeros(1, 16, 16), 1, None), Err(Error::Shape(_))));
        assert!(matches!(m.predict(&Grid::zeros(1, 8, 8), 1, Some(2)), Err(Error::Capability(_))));
    }

    #[test]
    fn deterministic_forward() {
        let mut m = TinyDenoiser::new(small_config(), 2).unwrap();
        randomize(&mut m, 9, 0.3);
        let x = standard_normal(&mut RngStream::new(4, 0), (1, 8, 8));
        let a = m.predict(&x, 5, Some(1)).unwrap();
        let b = m.predict(&x, 5, Some(1)).unwrap();
        assert_eq!(a.eps, b.eps);
        assert_eq!(a.attention, b.attention);
    }

    #[test]
    fn class_embedding_gradient_zero_when_dropped() {
        let mut m = TinyDenoiser::new(small_config(), 2).unwrap();
        randomize(&mut m, 10, 0.3);
        let x = standard_normal(&mut RngStream::new(5, 0), (1, 8, 8));
        let target = standard_normal(&mut RngStream::new(6, 0), (1, 8, 8));
        let (_, g) = m.example_grad(&x, 3, None, &target).unwrap();
        let idx = g.index_of("class.embedding").unwrap();
        assert!(g.get(idx).iter().all(|&v| v == 0.0));
        let (_, g) = m.example_grad(&x, 3, Some(0), &target).unwrap();
        assert!(g.get(idx)[..8].iter().any(|&v| v != 0.0));
        assert!(g.get(idx)[8..].iter().all(|&v| v == 0.0));
    }

    /// Straight-line forward pass written independently of the layer kernels.
    fn reference_forward(m: &TinyDenoiser, x: &Grid, t: usize, class: Option<usize>) -> Vec<f64> {
        let cfg = m.config();
        let (big, f, e) = (cfg.size, cfg.features, cfg.time_dim);
        let small = big / 2;
        let p = |name: &str| m.params.by_name(name).unwrap().data.clone();
        let sig = |v: f64| v / (1.0 + (-v).exp());
        let conv = |src: &[Vec<Vec<f64>>], w: &[f64], b: &[f64], cout: usize| -> Vec<Vec<Vec<f64>>> {
            let cin = src.len();
            let h = src[0].len();
            let mut out = vec![vec![vec![0.0; h]; h]; cout];
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..h {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as i64 + ky as i64 - 1;
                                    let sx = xx as i64 + kx as i64 - 1;
                                    if sy >= 0 && sx >= 0 && sy < h as i64 && sx < h as i64 {
                                        acc += w[((co * cin + ci) * 3 + ky) * 3 + kx] * src[ci][sy as usize][sx as usize];
                                    }
                                }
                            }
                        }
                        out[co][y][xx] = acc;
                    }
                }
            }
            out
        };
        let half = e / 2;
        let temb: Vec<f64> = (0..e)
            .map(|j| {
                let k = j % half;
                let arg = t as f64 * (10000f64).powf(-(k as f64) / half as f64);
                if j < half { arg.sin() } else { arg.cos() }
            })
            .collect();
        let (tw, tb) = (p("time.weight"), p("time.bias"));
        let mut te: Vec<f64> = (0..f).map(|i| tb[i] + (0..e).map(|j| tw[i * e + j] * temb[j]).sum::<f64>()).collect();
        if let Some(c) = class {
            let emb = p("class.embedding");
            for i in 0..f {
                te[i] += emb[c * f + i];
            }
        }
        let img = vec![(0..big).map(|y| (0..big).map(|xx| x.get(0, y, xx)).collect()).collect::<Vec<Vec<f64>>>()];
        let mut h1 = conv(&img, &p("conv_in.weight"), &p("conv_in.bias"), f);
        for ch in 0..f {
            for row in h1[ch].iter_mut() {
                for v in row.iter_mut() {
                    *v = sig(*v + te[ch]);
                }
            }
        }
        let pooled: Vec<Vec<Vec<f64>>> = (0..f)
            .map(|ch| {
                (0..small)
                    .map(|y| {
                        (0..small)
                            .map(|xx| {
                                (h1[ch][2 * y][2 * xx] + h1[ch][2 * y + 1][2 * xx] + h1[ch][2 * y][2 * xx + 1]
                                    + h1[ch][2 * y + 1][2 * xx + 1])
                                    / 4.0
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut h2 = conv(&pooled, &p("conv_down.weight"), &p("conv_down.bias"), f);
        for ch in 0..f {
            for row in h2[ch].iter_mut() {
                for v in row.iter_mut() {
                    *v = sig(*v + te[ch]);
                }
            }
        }
        let n = small * small;
        let mut tok: Vec<Vec<f64>> = (0..n).map(|i| (0..f).map(|ch| h2[ch][i / small][i % small]).collect()).collect();
        let (nh, d) = (cfg.heads, cfg.key_dim());
        for layer in 0..cfg.attn_layers {
            let (wq, wk, wv) = (p(&format!("attn{layer}.wq")), p(&format!("attn{layer}.wk")), p(&format!("attn{layer}.wv")));
            let proj = |w: &[f64], h: usize, i: usize, j: usize| -> f64 {
                (0..f).map(|ci| tok[i][ci] * w[(h * f + ci) * d + j]).sum()
            };
            let mut next = tok.clone();
            for h in 0..nh {
                for i in 0..n {
                    let logits: Vec<f64> = (0..n)
                        .map(|k| (0..d).map(|j| proj(&wq, h, i, j) * proj(&wk, h, k, j)).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..d {
                        next[i][h * d + j] += (0..n).map(|k| (logits[k] - mx).exp() / z * proj(&wv, h, k, j)).sum::<f64>();
                    }
                }
            }
            tok = next;
        }
        let u: Vec<Vec<Vec<f64>>> = (0..f)
            .map(|ch| {
                (0..big)
                    .map(|y| (0..big).map(|xx| tok[(y / 2) * small + xx / 2][ch] + h1[ch][y][xx]).collect())
                    .collect()
            })
            .collect();
        let mut h3 = conv(&u, &p("conv_up.weight"), &p("conv_up.bias"), f);
        for plane in h3.iter_mut() {
            for row in plane.iter_mut() {
                for v in row.iter_mut() {
                    *v = sig(*v);
                }
            }
        }
        let out = conv(&h3, &p("conv_out.weight"), &p("conv_out.bias"), 1);
        out[0].iter().flatten().copied().collect()
    }

    #[test]
    fn forward_matches_straight_line_reference() {
        let mut m = TinyDenoiser::new(small_config(), 7).unwrap();
        randomize(&mut m, 11, 0.4);
        let x = standard_normal(&mut RngStream::new(8, 8), (1, 8, 8));
        for class in [None, Some(1)] {
            let got = m.predict(&x, 13, class).unwrap().eps;
            let want = reference_forward(&m, &x, 13, class);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }
}

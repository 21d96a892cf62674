use crate::error::{Error, Result};

use super::ops::{matmul, matmul_nt, matmul_tn};

/// Per-head projections `W_Q^h, W_K^h, W_V^h ∈ R^{C×d}`, stored head-major
/// (`heads × C × d`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayerWeights {
    pub heads: usize,
    pub channels: usize,
    pub key_dim: usize,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
}

impl AttnLayerWeights {
    pub fn new(heads: usize, channels: usize, key_dim: usize, wq: Vec<f64>, wk: Vec<f64>, wv: Vec<f64>) -> Result<Self> {
        let n = heads * channels * key_dim;
        if key_dim == 0 || heads == 0 {
            return Err(Error::InvalidParameter("attention needs heads >= 1 and d >= 1".into()));
        }
        if wq.len() != n || wk.len() != n || wv.len() != n {
            return Err(Error::Shape(format!(
                "attention weights need {n} entries each ({heads}x{channels}x{key_dim})"
            )));
        }
        if wq.iter().chain(&wk).chain(&wv).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite attention weight".into()));
        }
        Ok(Self {
            heads,
            channels,
            key_dim,
            wq,
            wk,
            wv,
        })
    }

    fn head_slice(w: &[f64], h: usize, c: usize, d: usize) -> &[f64] {
        &w[h * c * d..(h + 1) * c * d]
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AttnCache {
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// `heads × n × n` softmax weights.
    pub attn: Vec<f64>,
}

/// N-head self-attention over `tokens` rows of `x` (`tokens × C`).
///
/// Returns `Y` (`tokens × N·d`, heads concatenated) and the cache holding
/// `A^h = softmax(Q^h K^hᵀ/√d)` for every head.
pub fn self_attention(x: &[f64], tokens: usize, w: &AttnLayerWeights) -> Result<(Vec<f64>, AttnCache)> {
    let (c, d, nh) = (w.channels, w.key_dim, w.heads);
    if x.len() != tokens * c {
        return Err(Error::Shape(format!(
            "attention input has {} values, expected {tokens}x{c}",
            x.len()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let width = nh * d;
    let mut y = vec![0.0; tokens * width];
    let mut cache = AttnCache {
        q: Vec::with_capacity(nh),
        k: Vec::with_capacity(nh),
        v: Vec::with_capacity(nh),
        attn: vec![0.0; nh * tokens * tokens],
    };
    for h in 0..nh {
        let q = matmul(x, AttnLayerWeights::head_slice(&w.wq, h, c, d), tokens, c, d);
        let k = matmul(x, AttnLayerWeights::head_slice(&w.wk, h, c, d), tokens, c, d);
        let v = matmul(x, AttnLayerWeights::head_slice(&w.wv, h, c, d), tokens, c, d);
        let mut s = matmul_nt(&q, &k, tokens, d, tokens);
        for row in s.chunks_exact_mut(tokens) {
            softmax_in_place(row, scale);
        }
        let o = matmul(&s, &v, tokens, tokens, d);
        for i in 0..tokens {
            y[i * width + h * d..i * width + (h + 1) * d].copy_from_slice(&o[i * d..(i + 1) * d]);
        }
        cache.attn[h * tokens * tokens..(h + 1) * tokens * tokens].copy_from_slice(&s);
        cache.q.push(q);
        cache.k.push(k);
        cache.v.push(v);
    }
    Ok((y, cache))
}

fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v * scale - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Gradients of [`self_attention`] given `dY`: `(dX, dWq, dWk, dWv)`.
pub fn self_attention_backward(
    x: &[f64],
    tokens: usize,
    w: &AttnLayerWeights,
    cache: &AttnCache,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (c, d, nh) = (w.channels, w.key_dim, w.heads);
    let scale = 1.0 / (d as f64).sqrt();
    let width = nh * d;
    let mut dx = vec![0.0; tokens * c];
    let mut dwq = vec![0.0; nh * c * d];
    let mut dwk = vec![0.0; nh * c * d];
    let mut dwv = vec![0.0; nh * c * d];
    for h in 0..nh {
        let a = &cache.attn[h * tokens * tokens..(h + 1) * tokens * tokens];
        let mut d_o = vec![0.0; tokens * d];
        for i in 0..tokens {
            d_o[i * d..(i + 1) * d].copy_from_slice(&dy[i * width + h * d..i * width + (h + 1) * d]);
        }
        // O = A V
        let d_a = matmul_nt(&d_o, &cache.v[h], tokens, d, tokens);
        let d_v = matmul_tn(a, &d_o, tokens, tokens, d);
        // softmax rows: dS = A ⊙ (dA − Σ_j dA·A), then the 1/√d scale
        let mut d_s = vec![0.0; tokens * tokens];
        for i in 0..tokens {
            let ar = &a[i * tokens..(i + 1) * tokens];
            let dar = &d_a[i * tokens..(i + 1) * tokens];
            let dot: f64 = ar.iter().zip(dar).map(|(p, g)| p * g).sum();
            for j in 0..tokens {
                d_s[i * tokens + j] = ar[j] * (dar[j] - dot) * scale;
            }
        }
        let d_q = matmul(&d_s, &cache.k[h], tokens, tokens, d);
        let d_k = matmul_tn(&d_s, &cache.q[h], tokens, tokens, d);
        let off = h * c * d;
        for (dw, g) in [(&mut dwq, &d_q), (&mut dwk, &d_k), (&mut dwv, &d_v)] {
            let part = matmul_tn(x, g, tokens, c, d);
            dw[off..off + c * d].copy_from_slice(&part);
        }
        for (wm, g) in [(&w.wq, &d_q), (&w.wk, &d_k), (&w.wv, &d_v)] {
            let part = matmul_nt(g, AttnLayerWeights::head_slice(wm, h, c, d), tokens, d, c);
            for (acc, p) in dx.iter_mut().zip(&part) {
                *acc += p;
            }
        }
    }
    (dx, dwq, dwk, dwv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn randv(n: usize, seed: u64, s: f64) -> Vec<f64> {
        let mut r = RngStream::new(seed, 0);
        (0..n).map(|_| s * r.normal()).collect()
    }

    fn weights(heads: usize, c: usize, d: usize, seed: u64) -> AttnLayerWeights {
        let n = heads * c * d;
        AttnLayerWeights::new(heads, c, d, randv(n, seed, 0.7), randv(n, seed + 1, 0.7), randv(n, seed + 2, 0.7)).unwrap()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let w = weights(3, 4, 2, 1);
        let (_, cache) = self_attention(&randv(4, 9, 1.0), 1, &w).unwrap();
        assert_eq!(cache.attn, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn identical_tokens_give_uniform_rows() {
        let w = weights(2, 3, 2, 4);
        let row = randv(3, 5, 1.0);
        let x: Vec<f64> = (0..5).flat_map(|_| row.clone()).collect();
        let (_, cache) = self_attention(&x, 5, &w).unwrap();
        assert!(cache.attn.iter().all(|&a| (a - 0.2).abs() < 1e-15));
    }

    /// Straight-line reimplementation with explicit loops.
    fn naive(x: &[f64], n: usize, w: &AttnLayerWeights) -> (Vec<f64>, Vec<f64>) {
        let (c, d, nh) = (w.channels, w.key_dim, w.heads);
        let mut y = vec![0.0; n * nh * d];
        let mut attn = vec![0.0; nh * n * n];
        for h in 0..nh {
            let proj = |m: &[f64], i: usize, j: usize| -> f64 {
                (0..c).map(|ci| x[i * c + ci] * m[h * c * d + ci * d + j]).sum()
            };
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|k| (0..d).map(|j| proj(&w.wq, i, j) * proj(&w.wk, k, j)).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for k in 0..n {
                    attn[h * n * n + i * n + k] = logits[k].exp() / z;
                }
                for j in 0..d {
                    y[i * nh * d + h * d + j] = (0..n).map(|k| attn[h * n * n + i * n + k] * proj(&w.wv, k, j)).sum();
                }
            }
        }
        (y, attn)
    }

    #[test]
    fn matches_naive_oracle() {
        let w = weights(2, 3, 2, 11);
        let x = randv(4 * 3, 12, 1.0);
        let (y, cache) = self_attention(&x, 4, &w).unwrap();
        let (y2, a2) = naive(&x, 4, &w);
        for (a, b) in y.iter().zip(&y2) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in cache.attn.iter().zip(&a2) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in cache.attn.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (n, c, d, nh) = (5, 4, 2, 2);
        let w = weights(nh, c, d, 21);
        let x = randv(n * c, 22, 1.0);
        let g = randv(n * nh * d, 23, 1.0);
        let f = |x: &[f64], w: &AttnLayerWeights| -> f64 {
            let (y, _) = self_attention(x, n, w).unwrap();
            y.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = self_attention(&x, n, &w).unwrap();
        let (dx, dwq, dwk, dwv) = self_attention_backward(&x, n, &w, &cache, &g);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (f(&xp, &w) - f(&xm, &w)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6, "dx[{i}] {fd} vs {}", dx[i]);
        }
        for (which, grad) in [(0, &dwq), (1, &dwk), (2, &dwv)] {
            for i in 0..grad.len() {
                let bump = |delta: f64| {
                    let mut w2 = w.clone();
                    match which {
                        0 => w2.wq[i] += delta,
                        1 => w2.wk[i] += delta,
                        _ => w2.wv[i] += delta,
                    }
                    f(&x, &w2)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!((fd - grad[i]).abs() < 1e-6, "w{which}[{i}] {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let w = weights(1, 3, 2, 1);
        assert!(matches!(self_attention(&[0.0; 5], 2, &w), Err(Error::Shape(_))));
        assert!(AttnLayerWeights::new(1, 2, 2, vec![0.0; 4], vec![0.0; 4], vec![0.0; 3]).is_err());
        assert!(AttnLayerWeights::new(1, 2, 0, vec![], vec![], vec![]).is_err());
    }
}

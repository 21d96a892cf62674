//! Forward/backward kernels for the fixed denoiser architectures.
//!
//! Feature maps are `channels × h × w` row-major slices; matrices are
//! row-major.

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += aip * brow[j];
            }
        }
    }
    out
}

/// `aᵀ · b` for `a (k×m)`, `b (k×n)`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let v = arow[i];
            if v == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] += v * brow[j];
            }
        }
    }
    out
}

/// `a · bᵀ` for `a (m×k)`, `b (n×k)`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal timestep embedding `[sin(t·ω_k), cos(t·ω_k)]`, `ω_k = 10000^(−k/(dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// 3×3 "same" convolution with zero padding. `w` is `cout×cin×3×3`.
pub fn conv3x3(x: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; cout * hw];
    for co in 0..cout {
        let o = &mut out[co * hw..(co + 1) * hw];
        o.fill(bias[co]);
        for ci in 0..cin {
            let src = &x[ci * hw..(ci + 1) * hw];
            let k = &weight[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let kv = k[ky * 3 + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    let (sx0, sx1) = ((x0 as isize + dx) as usize, (x1 as isize + dx) as usize);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut o[y * w + x0..y * w + x1];
                        let srow = &src[sy * w + sx0..sy * w + sx1];
                        for (ov, sv) in orow.iter_mut().zip(srow) {
                            *ov += kv * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv3x3`]: returns `(dx, dweight, dbias)`; `dx` is skipped
/// when `need_dx` is false.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    dout: &[f64],
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut dx = if need_dx { vec![0.0; cin * hw] } else { Vec::new() };
    let mut dw = vec![0.0; cout * cin * 9];
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        let g = &dout[co * hw..(co + 1) * hw];
        db[co] = g.iter().sum();
        for ci in 0..cin {
            let src = &x[ci * hw..(ci + 1) * hw];
            let kidx = (co * cin + ci) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let (dy, dxo) = (ky as isize - 1, kx as isize - 1);
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize) as usize;
                    let x0 = (-dxo).max(0) as usize;
                    let x1 = (w as isize - dxo).min(w as isize) as usize;
                    let kv = weight[kidx + ky * 3 + kx];
                    let (sx0, sx1) = ((x0 as isize + dxo) as usize, (x1 as isize + dxo) as usize);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &g[y * w + x0..y * w + x1];
                        let srow = &src[sy * w + sx0..sy * w + sx1];
                        for (gv, sv) in grow.iter().zip(srow) {
                            acc += gv * sv;
                        }
                        if need_dx {
                            let drow = &mut dx[ci * hw + sy * w + sx0..ci * hw + sy * w + sx1];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += kv * gv;
                            }
                        }
                    }
                    dw[kidx + ky * 3 + kx] = acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// 2×2 average pooling.
pub fn avgpool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let base = ch * h * w;
                let s = x[base + 2 * y * w + 2 * xx]
                    + x[base + 2 * y * w + 2 * xx + 1]
                    + x[base + (2 * y + 1) * w + 2 * xx]
                    + x[base + (2 * y + 1) * w + 2 * xx + 1];
                out[ch * ho * wo + y * wo + xx] = 0.25 * s;
            }
        }
    }
    out
}

pub fn avgpool2_backward(dout: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dx[ch * h * w + y * w + xx] = 0.25 * dout[ch * ho * wo + (y / 2) * wo + xx / 2];
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling of a `c×h×w` map.
pub fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                out[ch * ho * wo + y * wo + xx] = x[ch * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dout: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                dx[ch * h * w + (y / 2) * w + xx / 2] += dout[ch * ho * wo + y * wo + xx];
            }
        }
    }
    dx
}

/// `c×n` channel-major map to `n×c` token rows (and back, with roles swapped).
pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

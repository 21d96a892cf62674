//! From raw self-attention to the degraded input: head/query aggregation,
//! thresholding, selective blur and the alternative masking strategies.

use std::fmt;
use std::str::FromStr;

use crate::denoiser::AttentionStack;
use crate::diffusion::{forward_diffuse, predict_x0, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{blur, dft_magnitude, heatmap_png, reflect, Grid, RngStream, Tensor};

/// Which attention axis survives aggregation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GapAxis {
    /// Attention received by each position (mean over heads and queries).
    #[default]
    Key,
    /// Attention paid by each position (mean over heads and keys). Softmax
    /// rows sum to one, so this map is constant.
    Query,
}

impl GapAxis {
    pub fn name(self) -> &'static str {
        match self {
            GapAxis::Key => "key",
            GapAxis::Query => "query",
        }
    }
}

impl FromStr for GapAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "key" => Ok(GapAxis::Key),
            "query" => Ok(GapAxis::Query),
            _ => Err(Error::Config(format!("unknown attention axis `{s}` (key, query)"))),
        }
    }
}

/// Per-pixel saliency at input resolution, normalized to mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub layer: String,
    pub t: usize,
}

impl AttentionMap {
    /// Normalizes `raw` to mean 1. All entries must be non-negative with a
    /// positive sum.
    pub fn from_raw(height: usize, width: usize, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != height * width || raw.is_empty() {
            return Err(Error::Shape(format!("{} values for a {height}x{width} map", raw.len())));
        }
        if raw.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter("attention values must be finite and >= 0".into()));
        }
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        if mean <= 0.0 {
            return Err(Error::InvalidParameter("attention map has zero mass".into()));
        }
        Ok(Self {
            height,
            width,
            values: raw.into_iter().map(|v| v / mean).collect(),
            layer: String::new(),
            t: 0,
        })
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1.0; height * width],
            layer: String::new(),
            t: 0,
        }
    }

    pub fn with_source(mut self, layer: impl Into<String>, t: usize) -> Self {
        self.layer = layer.into();
        self.t = t;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Nearest-neighbour upsampling by integer block replication.
    pub fn upsample(&self, target_h: usize, target_w: usize) -> Result<Self> {
        let values = upsample_nearest(&self.values, self.height, self.width, target_h, target_w)?;
        Ok(Self {
            height: target_h,
            width: target_w,
            values,
            layer: self.layer.clone(),
            t: self.t,
        })
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        heatmap_png(&self.values, self.height, self.width)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.height, self.width],
            data: self.values.clone(),
        }
    }
}

fn upsample_nearest(v: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Result<Vec<f64>> {
    if th == 0 || tw == 0 || th % h != 0 || tw % w != 0 {
        return Err(Error::Shape(format!("cannot upsample {h}x{w} to {th}x{tw} by an integer ratio")));
    }
    let (ry, rx) = (th / h, tw / w);
    Ok((0..th * tw).map(|i| v[(i / tw / ry) * w + (i % tw) / rx]).collect())
}

/// Binary mask at the resolution of `x_t`; applies to every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    fraction: f64,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width || bits.is_empty() {
            return Err(Error::Shape(format!("{} bits for a {height}x{width} mask", bits.len())));
        }
        let fraction = bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64;
        Ok(Self {
            height,
            width,
            bits,
            fraction,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![true; height * width]).expect("nonempty")
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width]).expect("nonempty")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let v: Vec<f64> = self.bits.iter().map(|&b| b as u8 as f64).collect();
        heatmap_png(&v, self.height, self.width)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.height, self.width],
            data: self.bits.iter().map(|&b| b as u8 as f64).collect(),
        }
    }

    fn check_grid(&self, x: &Grid) -> Result<()> {
        if (x.height(), x.width()) != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "{}x{} mask against a {:?} grid",
                self.height,
                self.width,
                x.shape()
            )));
        }
        Ok(())
    }
}

/// Averages an `heads × n × n` attention block over heads and the reduced
/// axis, normalizes to mean 1 and upsamples to `target_h × target_w`.
pub fn aggregate_attention(
    attn: &[f64],
    heads: usize,
    h: usize,
    w: usize,
    target_h: usize,
    target_w: usize,
    axis: GapAxis,
) -> Result<AttentionMap> {
    let n = h * w;
    if heads == 0 || n == 0 || attn.len() != heads * n * n {
        return Err(Error::Shape(format!(
            "attention block of {} values is not {heads}x{n}x{n}",
            attn.len()
        )));
    }
    let mut pooled = vec![0.0; n];
    for head in attn.chunks_exact(n * n) {
        for (q, row) in head.chunks_exact(n).enumerate() {
            match axis {
                GapAxis::Key => {
                    for (p, a) in pooled.iter_mut().zip(row) {
                        *p += a;
                    }
                }
                GapAxis::Query => pooled[q] += row.iter().sum::<f64>(),
            }
        }
    }
    AttentionMap::from_raw(h, w, pooled)?.upsample(target_h, target_w)
}

/// [`aggregate_attention`] over one layer of a model's attention stack.
pub fn aggregate_layer(
    stack: &AttentionStack,
    layer: usize,
    target_h: usize,
    target_w: usize,
    axis: GapAxis,
) -> Result<AttentionMap> {
    if layer >= stack.layers {
        return Err(Error::InvalidParameter(format!(
            "layer {layer} requested, stack has {}",
            stack.layers
        )));
    }
    aggregate_attention(stack.layer(layer), stack.heads, stack.height, stack.width, target_h, target_w, axis)
}

/// `M = 1(A > ψ)`; ties fall outside the mask.
pub fn threshold_mask(a: &AttentionMap, psi: f64) -> Mask {
    Mask::new(a.height, a.width, a.values.iter().map(|&v| v > psi).collect()).expect("map is nonempty")
}

/// `x̃_t`: `x̂₀` blurred and diffused back to step `t` with the same ε.
pub fn blurred_renoised(x_t: &Grid, eps: &Grid, sigma: f64, t: usize, sched: &NoiseSchedule) -> Result<Grid> {
    let x0_hat = predict_x0(x_t, eps, t, sched)?;
    forward_diffuse(&blur(&x0_hat, sigma)?, t, eps, sched)
}

/// Selective blur computed in x₀-space: `x̂₀` is blurred where the mask is set,
/// then re-noised with the same ε. Unmasked pixels are copied from `x_t`
/// unchanged, and `sigma = 0` returns `x_t`.
pub fn selective_blur_input(
    x_t: &Grid,
    eps: &Grid,
    mask: &Mask,
    sigma: f64,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Grid> {
    x_t.ensure_same_shape(eps, "selective blur")?;
    mask.check_grid(x_t)?;
    if sigma < 0.0 || sigma.is_nan() {
        return Err(Error::InvalidParameter(format!("blur sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 || mask.count() == 0 {
        return Ok(x_t.clone());
    }
    let x0_hat = predict_x0(x_t, eps, t, sched)?;
    let blurred = blur(&x0_hat, sigma)?;
    let (a, b) = (sched.alpha_bar(t).sqrt(), sched.noise_std(t));
    let plane = mask.height * mask.width;
    let mut out = x_t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask.bits[i % plane] {
            *v = a * blurred.data()[i] + b * eps.data()[i];
        }
    }
    Ok(out)
}

/// `(1 − M)⊙x_t + M⊙x̃_t`, blending directly in x_t-space.
pub fn blend_xt(x_t: &Grid, x_tilde: &Grid, mask: &Mask) -> Result<Grid> {
    x_t.ensure_same_shape(x_tilde, "mask blend")?;
    mask.check_grid(x_t)?;
    let plane = mask.height * mask.width;
    let m = |i: usize| mask.bits[i % plane] as u8 as f64;
    let data = (0..x_t.len())
        .map(|i| (1.0 - m(i)) * x_t.data()[i] + m(i) * x_tilde.data()[i])
        .collect();
    Grid::from_vec(x_t.channels(), x_t.height(), x_t.width(), data)
}

/// Masking strategies compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStrategy {
    Global,
    Random,
    Square,
    HighFrequency,
    SelfAttention,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 5] = [
        MaskStrategy::Global,
        MaskStrategy::Random,
        MaskStrategy::Square,
        MaskStrategy::HighFrequency,
        MaskStrategy::SelfAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Global => "global",
            MaskStrategy::Random => "random",
            MaskStrategy::Square => "square",
            MaskStrategy::HighFrequency => "high_frequency",
            MaskStrategy::SelfAttention => "self_attention",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskStrategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown masking strategy `{s}`")))
    }
}

/// Inputs a strategy may consult.
#[derive(Clone, Copy, Debug)]
pub struct MaskContext<'a> {
    pub height: usize,
    pub width: usize,
    pub attention: Option<&'a AttentionMap>,
    pub x0_hat: Option<&'a Grid>,
    pub psi: f64,
}

/// Side of the local window for the high-frequency strategy.
pub const HF_PATCH: usize = 8;

pub fn strategy_mask(
    kind: MaskStrategy,
    ctx: &MaskContext<'_>,
    target_fraction: f64,
    rng: &mut RngStream,
) -> Result<Mask> {
    let (h, w) = (ctx.height, ctx.width);
    let needs_fraction = matches!(kind, MaskStrategy::Random | MaskStrategy::Square | MaskStrategy::HighFrequency);
    if needs_fraction && !(0.0..=1.0).contains(&target_fraction) {
        return Err(Error::InvalidParameter(format!("target fraction {target_fraction} outside [0, 1]")));
    }
    match kind {
        MaskStrategy::Global => Ok(Mask::full(h, w)),
        MaskStrategy::Random => Mask::new(h, w, (0..h * w).map(|_| rng.bernoulli(target_fraction)).collect()),
        MaskStrategy::Square => {
            let count = (target_fraction * (h * w) as f64).ceil();
            let side = (count.sqrt().round() as usize).min(h).min(w);
            let (oy, ox) = ((h - side) / 2, (w - side) / 2);
            let bits = (0..h * w)
                .map(|i| (oy..oy + side).contains(&(i / w)) && (ox..ox + side).contains(&(i % w)))
                .collect();
            Mask::new(h, w, bits)
        }
        MaskStrategy::HighFrequency => {
            let x0 = ctx
                .x0_hat
                .ok_or_else(|| Error::InvalidParameter("high_frequency masking needs x̂₀".into()))?;
            let energy = high_pass_energy(x0, HF_PATCH)?;
            let count = (target_fraction * (h * w) as f64).ceil() as usize;
            let mut order: Vec<usize> = (0..h * w).collect();
            order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));
            let mut bits = vec![false; h * w];
            for &i in &order[..count.min(h * w)] {
                bits[i] = true;
            }
            Mask::new(h, w, bits)
        }
        MaskStrategy::SelfAttention => {
            let a = ctx
                .attention
                .ok_or_else(|| Error::InvalidParameter("self_attention masking needs an attention map".into()))?;
            if (a.height, a.width) != (h, w) {
                return Err(Error::Shape("attention map does not match the mask size".into()));
            }
            Ok(threshold_mask(a, ctx.psi))
        }
    }
}

/// Spectral energy above half the Nyquist radius in a `patch × patch` window
/// around each pixel (reflect padding, channel-averaged input).
pub fn high_pass_energy(x: &Grid, patch: usize) -> Result<Vec<f64>> {
    let (c, h, w) = x.shape();
    let gray: Vec<f64> = (0..h * w)
        .map(|i| (0..c).map(|ch| x.channel(ch)[i]).sum::<f64>() / c as f64)
        .collect();
    let half = patch as isize / 2;
    let signed = |k: usize| k.min(patch - k) as f64;
    let cutoff = patch as f64 / 4.0;
    let mut energy = Vec::with_capacity(h * w);
    for y in 0..h {
        for x0 in 0..w {
            let window: Vec<f64> = (0..patch * patch)
                .map(|k| {
                    let yy = reflect(y as isize - half + (k / patch) as isize, h);
                    let xx = reflect(x0 as isize - half + (k % patch) as isize, w);
                    gray[yy * w + xx]
                })
                .collect();
            let mag = dft_magnitude(&Grid::from_vec(1, patch, patch, window)?)?;
            let mut e = 0.0;
            for u in 0..patch {
                for v in 0..patch {
                    if signed(u).hypot(signed(v)) > cutoff {
                        e += mag.get(0, u, v).powi(2);
                    }
                }
            }
            energy.push(e);
        }
    }
    Ok(energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::standard_normal;
    use proptest::prelude::*;

    fn random_attention(heads: usize, n: usize, rng: &mut RngStream) -> Vec<f64> {
        let mut a: Vec<f64> = (0..heads * n * n).map(|_| rng.uniform().powi(3)).collect();
        for row in a.chunks_exact_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        a
    }

    #[test]
    fn uniform_attention_gives_ones() {
        let n = 16;
        let a = vec![1.0 / n as f64; 2 * n * n];
        let map = aggregate_attention(&a, 2, 4, 4, 8, 8, GapAxis::Key).unwrap();
        assert!(map.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let mask = threshold_mask(&map, 1.0);
        assert_eq!(mask.fraction(), 0.0);
    }

    #[test]
    fn single_key_receives_everything() {
        // key (0, 1) on a 2x2 grid
        let mut a = vec![0.0; 16];
        for q in 0..4 {
            a[q * 4 + 1] = 1.0;
        }
        let map = aggregate_attention(&a, 1, 2, 2, 4, 4, GapAxis::Key).unwrap();
        let expect = [
            0.0, 0.0, 4.0, 4.0, //
            0.0, 0.0, 4.0, 4.0, //
            0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(map.values(), &expect);
        let q = aggregate_attention(&a, 1, 2, 2, 2, 2, GapAxis::Query).unwrap();
        assert!(q.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = RngStream::new(1, 0);
        let (heads, h, w) = (2, 4, 4);
        let n = h * w;
        let a = random_attention(heads, n, &mut rng);
        let map = aggregate_attention(&a, heads, h, w, 16, 8, GapAxis::Key).unwrap();
        for ty in 0..16 {
            for tx in 0..8 {
                let key = (ty / 4) * w + tx / 2;
                let mut s = 0.0;
                for head in 0..heads {
                    for q in 0..n {
                        s += a[head * n * n + q * n + key];
                    }
                }
                let naive = s / (heads * n) as f64 * n as f64;
                assert!((map.get(ty, tx) - naive).abs() < 1e-10);
            }
        }
        assert!((map.mean() - 1.0).abs() < 1e-9);
        assert!(aggregate_attention(&a, heads, h, w, 6, 8, GapAxis::Key).is_err());
    }

    #[test]
    fn threshold_examples() {
        let a = AttentionMap::from_raw(2, 2, vec![0.5, 1.5, 0.8, 1.2]).unwrap();
        let m = threshold_mask(&a, 1.0);
        assert_eq!(m.bits(), &[false, true, false, true]);
        assert_eq!(m.fraction(), 0.5);
        assert_eq!(threshold_mask(&a, -1.0).fraction(), 1.0);
        assert_eq!(threshold_mask(&a, f64::INFINITY).fraction(), 0.0);
    }

    #[test]
    fn selective_blur_edge_cases() {
        let sched = NoiseSchedule::linear_scaled(50).unwrap();
        let mut rng = RngStream::new(2, 0);
        let x = standard_normal(&mut rng, (2, 8, 8));
        let eps = standard_normal(&mut rng, (2, 8, 8));
        let empty = Mask::empty(8, 8);
        assert_eq!(selective_blur_input(&x, &eps, &empty, 2.0, 20, &sched).unwrap(), x);
        let full = Mask::full(8, 8);
        assert_eq!(selective_blur_input(&x, &eps, &full, 0.0, 20, &sched).unwrap(), x);
        let global = selective_blur_input(&x, &eps, &full, 1.5, 20, &sched).unwrap();
        let tilde = blurred_renoised(&x, &eps, 1.5, 20, &sched).unwrap();
        assert!(global.max_abs_diff(&tilde) < 1e-12);
        assert!(selective_blur_input(&x, &eps, &Mask::full(4, 4), 1.0, 20, &sched).is_err());
    }

    #[test]
    fn strategies() {
        let mut rng = RngStream::new(3, 0);
        let ctx = MaskContext {
            height: 16,
            width: 16,
            attention: None,
            x0_hat: None,
            psi: 1.0,
        };
        assert_eq!(strategy_mask(MaskStrategy::Global, &ctx, 0.4, &mut rng).unwrap().fraction(), 1.0);
        let sq = strategy_mask(MaskStrategy::Square, &ctx, 0.25, &mut rng).unwrap();
        assert_eq!(sq.count(), 64);
        assert!(sq.get(4, 4) && sq.get(11, 11) && !sq.get(3, 4) && !sq.get(12, 11));
        let mut inside = 0;
        for seed in 0..100 {
            let f = strategy_mask(MaskStrategy::Random, &ctx, 0.4, &mut RngStream::new(seed, 9))
                .unwrap()
                .fraction();
            inside += ((f - 0.4).abs() <= 0.1) as usize;
        }
        assert!(inside >= 95);
        assert!(strategy_mask(MaskStrategy::HighFrequency, &ctx, 0.4, &mut rng).is_err());
        assert!(strategy_mask(MaskStrategy::SelfAttention, &ctx, 0.4, &mut rng).is_err());
        assert!("dino".parse::<MaskStrategy>().is_err());
        for k in MaskStrategy::ALL {
            assert_eq!(k.name().parse::<MaskStrategy>().unwrap(), k);
        }
    }

    #[test]
    fn high_frequency_picks_textured_half() {
        // checkerboard on the right half, flat on the left
        let data = (0..256)
            .map(|i| {
                let (y, x) = (i / 16, i % 16);
                if x >= 8 { if (x + y) % 2 == 0 { 0.8 } else { -0.8 } } else { 0.1 }
            })
            .collect();
        let x0 = Grid::from_vec(1, 16, 16, data).unwrap();
        let ctx = MaskContext {
            height: 16,
            width: 16,
            attention: None,
            x0_hat: Some(&x0),
            psi: 1.0,
        };
        let m = strategy_mask(MaskStrategy::HighFrequency, &ctx, 0.25, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(m.count(), 64);
        assert!((0..16).all(|y| (0..4).all(|x| !m.get(y, x))));
    }

    proptest! {
        #[test]
        fn mass_conservation_and_rescale_invariance(seed in 0u64..500, k in 0.01f64..100.0) {
            let mut rng = RngStream::new(seed, 1);
            let a = random_attention(3, 9, &mut rng);
            let map = aggregate_attention(&a, 3, 3, 3, 3, 3, GapAxis::Key).unwrap();
            prop_assert!((map.values().iter().sum::<f64>() - 9.0).abs() < 1e-12);
            prop_assert!(map.values().iter().all(|&v| v >= 0.0));
            let scaled: Vec<f64> = a.iter().map(|v| v * k).collect();
            let map2 = aggregate_attention(&scaled, 3, 3, 3, 3, 3, GapAxis::Key).unwrap();
            prop_assert_eq!(threshold_mask(&map, map.mean()), threshold_mask(&map2, map2.mean()));
        }

        #[test]
        fn dual_path_and_intact_region(seed in 0u64..1000, sigma in 0.0f64..3.0, t in 1usize..=100, p in 0.0f64..1.0) {
            let sched = NoiseSchedule::linear_scaled(100).unwrap();
            let mut rng = RngStream::new(seed, 2);
            let x = standard_normal(&mut rng, (1, 8, 8));
            let eps = standard_normal(&mut rng, (1, 8, 8));
            let mask = Mask::new(8, 8, (0..64).map(|_| rng.bernoulli(p)).collect()).unwrap();
            let fast = selective_blur_input(&x, &eps, &mask, sigma, t, &sched).unwrap();
            let tilde = blurred_renoised(&x, &eps, sigma, t, &sched).unwrap();
            let direct = blend_xt(&x, &tilde, &mask).unwrap();
            prop_assert!(fast.max_abs_diff(&direct) < 1e-6);
            for (i, &b) in mask.bits().iter().enumerate() {
                if !b {
                    prop_assert_eq!(fast.data()[i].to_bits(), x.data()[i].to_bits());
                }
            }
        }
    }
}

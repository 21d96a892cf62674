//! Guided noise predictions and the sampling loop.
//!
//! Every guided prediction is written as `informed + s·(informed − uninformed)`
//! so that a zero scale returns the informed prediction bit for bit, and the
//! reverse step then draws the same noise as an unguided run.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::attention_mask::{
    aggregate_attention, aggregate_layer, selective_blur_input, strategy_mask, AttentionMap, GapAxis, Mask,
    MaskContext, MaskStrategy,
};
use crate::denoiser::{AttentionStack, Denoiser};
use crate::diffusion::{predict_x0, reverse_step, NoiseSchedule, VarianceMode};
use crate::error::{Error, Result};
use crate::numerics::{standard_normal, Grid, RngStream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GuidanceKind {
    #[default]
    None,
    Cg,
    Cfg,
    Blur,
    Sag,
    SagCfg,
}

impl GuidanceKind {
    pub const ALL: [GuidanceKind; 6] = [
        GuidanceKind::None,
        GuidanceKind::Cg,
        GuidanceKind::Cfg,
        GuidanceKind::Blur,
        GuidanceKind::Sag,
        GuidanceKind::SagCfg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GuidanceKind::None => "none",
            GuidanceKind::Cg => "cg",
            GuidanceKind::Cfg => "cfg",
            GuidanceKind::Blur => "blur",
            GuidanceKind::Sag => "sag",
            GuidanceKind::SagCfg => "sag_cfg",
        }
    }

    pub fn needs_class(self) -> bool {
        matches!(self, GuidanceKind::Cg | GuidanceKind::Cfg | GuidanceKind::SagCfg)
    }
}

impl fmt::Display for GuidanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GuidanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GuidanceKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown guidance kind `{s}` (none, cg, cfg, blur, sag, sag_cfg)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub kind: GuidanceKind,
    /// Scale for cg, cfg, blur and sag.
    pub scale: f64,
    /// Class scale in fused mode.
    pub scale_cfg: f64,
    /// Self-attention scale in fused mode.
    pub scale_sag: f64,
    /// Blur σ.
    pub sigma: f64,
    /// Mask threshold on the mean-1 attention map.
    pub psi: f64,
    /// Index of the attention layer used for masking.
    pub layer: usize,
    pub strategy: MaskStrategy,
    /// Masked fraction for strategies that do not read attention.
    pub mask_fraction: f64,
    pub axis: GapAxis,
    /// Overrides the model's variance choice.
    pub variance_mode: Option<VarianceMode>,
    pub class: Option<usize>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            kind: GuidanceKind::None,
            scale: 0.1,
            scale_cfg: 1.0,
            scale_sag: 0.1,
            sigma: 1.0,
            psi: 1.0,
            layer: 0,
            strategy: MaskStrategy::SelfAttention,
            mask_fraction: 0.4,
            axis: GapAxis::Key,
            variance_mode: None,
            class: None,
        }
    }
}

impl GuidanceConfig {
    pub fn unguided() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!("sigma {} must be >= 0", self.sigma)));
        }
        if self.psi.is_nan() || ![self.scale, self.scale_cfg, self.scale_sag].iter().all(|s| s.is_finite()) {
            return Err(Error::InvalidParameter("scales must be finite and psi a number".into()));
        }
        if self.kind.needs_class() && self.class.is_none() {
            return Err(Error::InvalidParameter(format!("guidance `{}` needs a class", self.kind)));
        }
        Ok(())
    }
}

fn guide_with(informed: &Grid, uninformed: &Grid, s: f64, what: &str) -> Result<Grid> {
    informed.zip_map(uninformed, |a, b| a + s * (a - b)).map_err(|e| match e {
        Error::Shape(m) => Error::Shape(format!("{what}: {m}")),
        other => other,
    })
}

/// `ε_with + s·(ε_with − ε_without)`, which equals
/// `ε_without + (1 + s)·(ε_with − ε_without)`.
pub fn generalized_guide(eps_with_h: &Grid, eps_without_h: &Grid, s: f64) -> Result<Grid> {
    guide_with(eps_with_h, eps_without_h, s, "generalized guidance")
}

/// `ε − s·σ_t·∇log p(c | x_t)`.
pub fn classifier_guide(eps: &Grid, grad_log_pc: &Grid, s: f64, sigma_t: f64) -> Result<Grid> {
    eps.zip_map(grad_log_pc, |e, g| e - s * sigma_t * g)
}

/// Classifier-free guidance; the class label is the withheld information.
pub fn cfg_guide(eps_cond: &Grid, eps_uncond: &Grid, s: f64) -> Result<Grid> {
    generalized_guide(eps_cond, eps_uncond, s)
}

/// `ε_c + s_c·(ε_c − ε_u) + s_s·(ε_u − ε_deg)`.
pub fn fused_sag_cfg(eps_cond: &Grid, eps_uncond: &Grid, eps_degraded: &Grid, s_c: f64, s_s: f64) -> Result<Grid> {
    eps_cond.ensure_same_shape(eps_uncond, "fused guidance")?;
    eps_cond.ensure_same_shape(eps_degraded, "fused guidance")?;
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .zip(eps_degraded.data())
        .map(|((&c, &u), &d)| c + s_c * (c - u) + s_s * (u - d))
        .collect();
    Grid::from_vec(eps_cond.channels(), eps_cond.height(), eps_cond.width(), data)
}

/// What one guided step saw.
#[derive(Clone, Debug, Default)]
pub struct StepDiagnostics {
    pub t: usize,
    /// Aggregated attention of the first evaluation at the mask layer.
    pub attention: Option<AttentionMap>,
    pub mask: Option<Mask>,
    pub masked_fraction: Option<f64>,
    /// `‖ε_t − ε̂_t‖` between the original and the degraded-input prediction.
    pub eps_gap_norm: Option<f64>,
    /// Raw attention stack of the first evaluation.
    pub stack: Option<AttentionStack>,
}

struct Degraded {
    eps_degraded: Grid,
    attention: Option<AttentionMap>,
    mask: Mask,
}

/// Builds `x̂_t` from a first evaluation and evaluates the model on it.
#[allow(clippy::too_many_arguments)]
fn degrade_and_predict<M: Denoiser + ?Sized>(
    model: &M,
    x_t: &Grid,
    t: usize,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    strategy: MaskStrategy,
    eps: &Grid,
    stack: Option<&AttentionStack>,
    class: Option<usize>,
    rng: &RngStream,
) -> Result<Degraded> {
    let (h, w) = (x_t.height(), x_t.width());
    let attention = match stack {
        Some(s) => Some(aggregate_layer(s, cfg.layer, h, w, cfg.axis)?.with_source(format!("attn{}", cfg.layer), t)),
        None if strategy == MaskStrategy::SelfAttention => {
            return Err(Error::Capability(
                "self-attention guidance needs a model that exposes attention maps".into(),
            ))
        }
        None => None,
    };
    let x0_hat = if strategy == MaskStrategy::HighFrequency {
        Some(predict_x0(x_t, eps, t, sched)?)
    } else {
        None
    };
    let ctx = MaskContext {
        height: h,
        width: w,
        attention: attention.as_ref(),
        x0_hat: x0_hat.as_ref(),
        psi: cfg.psi,
    };
    // auxiliary draws never touch the reverse-step noise stream
    let mut aux = rng.derive(t as u64);
    let mask = strategy_mask(strategy, &ctx, cfg.mask_fraction, &mut aux)?;
    let x_hat = selective_blur_input(x_t, eps, &mask, cfg.sigma, t, sched)?;
    // x̂_t = x_t gives ε̂_t = ε_t; the model is deterministic so skip the call
    let eps_degraded = if x_hat == *x_t {
        eps.clone()
    } else {
        model.predict(&x_hat, t, class)?.eps
    };
    Ok(Degraded {
        eps_degraded,
        attention,
        mask,
    })
}

/// Guided `ε̃_t` for one step, the variance to use and diagnostics.
pub fn guided_eps<M: Denoiser + ?Sized>(
    model: &M,
    x_t: &Grid,
    t: usize,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    rng: &RngStream,
) -> Result<(Grid, VarianceMode, StepDiagnostics)> {
    cfg.validate()?;
    let mut diag = StepDiagnostics {
        t,
        ..StepDiagnostics::default()
    };
    let first_class = if cfg.kind == GuidanceKind::SagCfg { None } else { cfg.class };
    let first = model.predict(x_t, t, first_class)?;
    let mode = cfg.variance_mode.unwrap_or(first.variance_mode);
    let eps = match cfg.kind {
        GuidanceKind::None => first.eps,
        GuidanceKind::Cg => {
            let c = cfg.class.expect("validated");
            let grad = model.classifier_grad(x_t, t, c)?;
            classifier_guide(&first.eps, &grad, cfg.scale, sched.noise_std(t))?
        }
        GuidanceKind::Cfg => {
            let uncond = model.predict(x_t, t, None)?.eps;
            cfg_guide(&first.eps, &uncond, cfg.scale)?
        }
        GuidanceKind::Blur | GuidanceKind::Sag => {
            let strategy = if cfg.kind == GuidanceKind::Blur {
                MaskStrategy::Global
            } else {
                cfg.strategy
            };
            let d = degrade_and_predict(
                model,
                x_t,
                t,
                sched,
                cfg,
                strategy,
                &first.eps,
                first.attention.as_ref(),
                cfg.class,
                rng,
            )?;
            diag.eps_gap_norm = Some(first.eps.sub(&d.eps_degraded)?.norm());
            diag.masked_fraction = Some(d.mask.fraction());
            diag.attention = d.attention;
            diag.mask = Some(d.mask);
            generalized_guide(&first.eps, &d.eps_degraded, cfg.scale)?
        }
        GuidanceKind::SagCfg => {
            let cond = model.predict(x_t, t, cfg.class)?.eps;
            let d = degrade_and_predict(
                model,
                x_t,
                t,
                sched,
                cfg,
                cfg.strategy,
                &first.eps,
                first.attention.as_ref(),
                None,
                rng,
            )?;
            diag.eps_gap_norm = Some(first.eps.sub(&d.eps_degraded)?.norm());
            diag.masked_fraction = Some(d.mask.fraction());
            diag.attention = d.attention;
            diag.mask = Some(d.mask);
            fused_sag_cfg(&cond, &first.eps, &d.eps_degraded, cfg.scale_cfg, cfg.scale_sag)?
        }
    };
    diag.stack = first.attention;
    Ok((eps, mode, diag))
}

/// One reverse step under `cfg`, drawing `z` from `rng`.
pub fn guided_step<M: Denoiser + ?Sized>(
    model: &M,
    x_t: &Grid,
    t: usize,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    rng: &mut RngStream,
) -> Result<(Grid, StepDiagnostics)> {
    let (eps, mode, diag) = guided_eps(model, x_t, t, sched, cfg, rng)?;
    Ok((reverse_step(x_t, &eps, t, sched, rng, mode)?, diag))
}

/// One self-attention-guided step; `cfg.kind` is treated as `sag`.
pub fn sag_step<M: Denoiser + ?Sized>(
    model: &M,
    x_t: &Grid,
    t: usize,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    rng: &mut RngStream,
) -> Result<(Grid, StepDiagnostics)> {
    let cfg = GuidanceConfig {
        kind: GuidanceKind::Sag,
        ..cfg.clone()
    };
    guided_step(model, x_t, t, sched, &cfg, rng)
}

/// Blur guidance: the SAG step with every pixel masked.
pub fn blur_guidance_step<M: Denoiser + ?Sized>(
    model: &M,
    x_t: &Grid,
    t: usize,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    rng: &mut RngStream,
) -> Result<Grid> {
    let cfg = GuidanceConfig {
        kind: GuidanceKind::Sag,
        strategy: MaskStrategy::Global,
        ..cfg.clone()
    };
    Ok(guided_step(model, x_t, t, sched, &cfg, rng)?.0)
}

/// One CSV row of per-step diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticRow {
    pub chain: usize,
    pub t: usize,
    pub masked_fraction: Option<f64>,
    pub eps_gap_norm: Option<f64>,
}

/// Attention of one chain averaged uniformly over all reverse steps, at
/// input resolution.
#[derive(Clone, Debug)]
pub struct AccumulatedAttention {
    /// Head-averaged map per layer.
    pub layers: Vec<AttentionMap>,
    /// `heads[l][h]` is the single-head map of layer `l`.
    pub heads: Vec<Vec<AttentionMap>>,
}

#[derive(Clone, Debug)]
pub struct SampleRun {
    pub samples: Vec<Grid>,
    pub diagnostics: Vec<DiagnosticRow>,
    /// Present when the model exposes attention.
    pub attention: Option<Vec<AccumulatedAttention>>,
}

impl SampleRun {
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("chain,t,masked_fraction,eps_gap_norm\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        for r in &self.diagnostics {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.chain,
                r.t,
                opt(r.masked_fraction),
                opt(r.eps_gap_norm)
            ));
        }
        out
    }

    /// Mean masked fraction over all rows that carry one.
    pub fn mean_masked_fraction(&self) -> Option<f64> {
        mean(self.diagnostics.iter().filter_map(|r| r.masked_fraction))
    }

    pub fn mean_eps_gap(&self) -> Option<f64> {
        mean(self.diagnostics.iter().filter_map(|r| r.eps_gap_norm))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Noise stream of chain `k` for a run seeded with `seed`.
pub fn chain_stream(seed: u64, k: usize) -> RngStream {
    RngStream::new(seed, k as u64)
}

struct ChainResult {
    sample: Grid,
    rows: Vec<DiagnosticRow>,
    attention: Option<AccumulatedAttention>,
}

fn run_chain<M: Denoiser + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    chain: usize,
    mut rng: RngStream,
) -> Result<ChainResult> {
    let shape = model.sample_shape();
    let mut x = standard_normal(&mut rng, shape);
    let mut rows = Vec::with_capacity(sched.steps());
    let mut acc: Option<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> = None;
    for t in (1..=sched.steps()).rev() {
        let (next, diag) = guided_step(model, &x, t, sched, cfg, &mut rng)?;
        if !next.is_finite() {
            return Err(Error::Divergence { step: t, loss: f64::NAN });
        }
        if let Some(stack) = &diag.stack {
            let (h, w) = (shape.1, shape.2);
            let (layers, heads) = acc.get_or_insert_with(|| {
                (
                    vec![vec![0.0; h * w]; stack.layers],
                    vec![vec![vec![0.0; h * w]; stack.heads]; stack.layers],
                )
            });
            for l in 0..stack.layers {
                let m = aggregate_attention(stack.layer(l), stack.heads, stack.height, stack.width, h, w, cfg.axis)?;
                add_into(&mut layers[l], m.values());
                for hd in 0..stack.heads {
                    let m = aggregate_attention(stack.head(l, hd), 1, stack.height, stack.width, h, w, cfg.axis)?;
                    add_into(&mut heads[l][hd], m.values());
                }
            }
        }
        rows.push(DiagnosticRow {
            chain,
            t,
            masked_fraction: diag.masked_fraction,
            eps_gap_norm: diag.eps_gap_norm,
        });
        x = next;
    }
    let attention = match acc {
        Some((layers, heads)) => {
            let (h, w) = (shape.1, shape.2);
            let finish = |v: Vec<f64>, name: String| AttentionMap::from_raw(h, w, v).map(|m| m.with_source(name, 0));
            Some(AccumulatedAttention {
                layers: layers
                    .into_iter()
                    .enumerate()
                    .map(|(l, v)| finish(v, format!("attn{l}")))
                    .collect::<Result<_>>()?,
                heads: heads
                    .into_iter()
                    .enumerate()
                    .map(|(l, hs)| {
                        hs.into_iter()
                            .enumerate()
                            .map(|(hd, v)| finish(v, format!("attn{l}.head{hd}")))
                            .collect::<Result<_>>()
                    })
                    .collect::<Result<_>>()?,
            })
        }
        None => None,
    };
    Ok(ChainResult {
        sample: x,
        rows,
        attention,
    })
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Runs `n` independent chains from `x_T ~ N(0, I)` to `x_0`. Chain `k` owns the
/// stream [`chain_stream`]`(seed, k)`, so results do not depend on the worker count.
pub fn sample<M: Denoiser + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    n: usize,
    seed: u64,
) -> Result<SampleRun> {
    cfg.validate()?;
    if let Some(c) = cfg.class {
        if c >= model.num_classes() {
            return Err(Error::Capability(format!(
                "class {c} requested but the model has {} classes",
                model.num_classes()
            )));
        }
    }
    let chains: Vec<ChainResult> = with_pool(|| {
        (0..n)
            .into_par_iter()
            .map(|k| run_chain(model, sched, cfg, k, chain_stream(seed, k)))
            .collect::<Result<_>>()
    })?;
    let mut samples = Vec::with_capacity(n);
    let mut diagnostics = Vec::with_capacity(n * sched.steps());
    let mut attention = Vec::new();
    for c in chains {
        samples.push(c.sample);
        diagnostics.extend(c.rows);
        attention.extend(c.attention);
    }
    let attention = (!attention.is_empty()).then_some(attention);
    Ok(SampleRun {
        samples,
        diagnostics,
        attention,
    })
}

/// Runs `f` on a pool sized by `GLAB_THREADS` when set, else on the global pool.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match std::env::var("GLAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

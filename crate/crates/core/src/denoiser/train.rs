use rayon::prelude::*;

use crate::diffusion::{forward_diffuse, NoiseSchedule, TrainingExample};
use crate::error::{Error, Result};
use crate::numerics::{standard_normal, Grid, RngStream};

use super::{ParamSet, Trainable};

/// One clean training sample and its optional class label.
#[derive(Clone, Debug)]
pub struct DataItem {
    pub x0: Grid,
    pub class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Probability of replacing the label by the null class.
    pub class_drop_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 0.05,
            batch_size: 16,
            class_drop_prob: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Batch `L_simple` before each update.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// Mean of the first and last 10% of the loss trace.
    pub fn window_means(&self) -> (f64, f64) {
        let n = self.losses.len();
        if n == 0 {
            return (f64::NAN, f64::NAN);
        }
        let w = (n / 10).max(1);
        let head = self.losses[..w].iter().sum::<f64>() / w as f64;
        let tail = self.losses[n - w..].iter().sum::<f64>() / w as f64;
        (head, tail)
    }
}

/// `L_simple` over `batch` and its exact gradient.
pub fn loss_and_grad<M: Trainable>(model: &M, batch: &[TrainingExample], sched: &NoiseSchedule) -> Result<(f64, ParamSet)> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty training batch".into()));
    }
    let per: Vec<(f64, ParamSet)> = batch
        .par_iter()
        .map(|ex| {
            let x_t = forward_diffuse(&ex.x0, ex.t, &ex.eps, sched)?;
            let (sse, g) = model.example_grad(&x_t, ex.t, ex.class, &ex.eps)?;
            Ok((sse / ex.eps.len() as f64, g))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = model.params().zeros_like();
    let mut loss = 0.0;
    let per_len: Vec<usize> = batch.iter().map(|ex| ex.eps.len()).collect();
    for ((l, g), n) in per.iter().zip(per_len) {
        loss += l;
        grads.add_scaled(g, scale / n as f64);
    }
    Ok((loss * scale, grads))
}

/// Draws one training batch: uniform items, uniform `t ∈ 1..=T`, fresh `ε`,
/// labels dropped to the null class with probability `drop`.
pub fn draw_batch(
    data: &[DataItem],
    sched: &NoiseSchedule,
    size: usize,
    drop: f64,
    rng: &mut RngStream,
) -> Vec<TrainingExample> {
    (0..size)
        .map(|_| {
            let item = &data[rng.below(data.len())];
            let t = 1 + rng.below(sched.steps());
            let eps = standard_normal(rng, item.x0.shape());
            let dropped = rng.bernoulli(drop);
            TrainingExample {
                x0: item.x0.clone(),
                t,
                eps,
                class: if dropped { None } else { item.class },
            }
        })
        .collect()
}

/// Plain minibatch SGD on `L_simple`.
pub fn train<M: Trainable>(model: &mut M, data: &[DataItem], sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if !(0.0..=1.0).contains(&cfg.class_drop_prob) {
        return Err(Error::InvalidParameter(format!(
            "class_drop_prob {} outside [0, 1]",
            cfg.class_drop_prob
        )));
    }
    if cfg.steps > 0 && (data.is_empty() || cfg.batch_size == 0) {
        return Err(Error::InvalidParameter("training needs data and batch_size >= 1".into()));
    }
    let mut rng = RngStream::new(cfg.seed, 0x7a1e);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = draw_batch(data, sched, cfg.batch_size, cfg.class_drop_prob, &mut rng);
        let (loss, grads) = loss_and_grad(model, &batch, sched)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);
        model.params_mut().add_scaled(&grads, -cfg.learning_rate);
    }
    Ok(TrainOutcome { losses })
}

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// `(central difference, analytic)` at the worst entry.
    pub worst_values: (f64, f64),
    /// `(name, max relative error)` per parameter tensor.
    pub per_param: Vec<(String, f64)>,
}

/// Denominator floor for gradient checks. Central differences with step 1e-3
/// carry an absolute truncation error near 1e-8, which dominates entries
/// whose gradient is itself below about 1e-5.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares [`loss_and_grad`] with central differences of `L_simple` for every
/// parameter entry.
pub fn finite_difference_check<M: Trainable + Clone>(
    model: &M,
    batch: &[TrainingExample],
    sched: &NoiseSchedule,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grad(model, batch, sched)?;
    let inputs = batch
        .iter()
        .map(|ex| forward_diffuse(&ex.x0, ex.t, &ex.eps, sched))
        .collect::<Result<Vec<_>>>()?;
    let loss_at = |m: &M| -> Result<f64> {
        let mut total = 0.0;
        for (ex, x_t) in batch.iter().zip(&inputs) {
            let pred = m.predict(x_t, ex.t, ex.class)?.eps;
            let se: f64 = pred.data().iter().zip(ex.eps.data()).map(|(p, q)| (p - q) * (p - q)).sum();
            total += se / ex.eps.len() as f64;
        }
        Ok(total / batch.len() as f64)
    };
    let coords: Vec<(usize, usize)> = (0..model.params().len())
        .flat_map(|p| (0..model.params().get(p).len()).map(move |i| (p, i)))
        .collect();
    let errors: Vec<(f64, f64, f64)> = coords
        .par_iter()
        .map(|&(p, i)| {
            let mut m = model.clone();
            let orig = m.params().get(p)[i];
            m.params_mut().get_mut(p)[i] = orig + step;
            let up = loss_at(&m)?;
            m.params_mut().get_mut(p)[i] = orig - step;
            let down = loss_at(&m)?;
            let fd = (up - down) / (2.0 * step);
            let an = grads.get(p)[i];
            Ok((relative_error(fd, an, floor), fd, an))
        })
        .collect::<Result<_>>()?;
    let mut report = GradCheckReport {
        checked: coords.len(),
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_values: (0.0, 0.0),
        per_param: model.params().iter().map(|p| (p.name.clone(), 0.0)).collect(),
    };
    for (&(p, i), &(e, fd, an)) in coords.iter().zip(&errors) {
        let slot = &mut report.per_param[p].1;
        *slot = slot.max(e);
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst_param = model.params().param(p).name.clone();
            report.worst_index = i;
            report.worst_values = (fd, an);
        }
    }
    Ok(report)
}

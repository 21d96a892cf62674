//! ε-predictors: the trainable attention network, its vector-data MLP
//! sibling, and the closed-form Gaussian-mixture oracle.

pub mod attention;
pub mod checkpoint;
mod mlp;
pub mod ops;
mod oracle;
mod params;
mod tiny;
mod train;

pub use attention::{self_attention, AttnLayerWeights};
pub use mlp::{MlpConfig, MlpDenoiser};
pub use oracle::{
    oracle_class_posterior, oracle_epsilon, ClassPosterior, MixtureComponent, MixtureSpec, OracleDenoiser,
};
pub use params::{Param, ParamSet};
pub use tiny::{TinyConfig, TinyDenoiser};
pub use train::{draw_batch, finite_difference_check, loss_and_grad, relative_error, train, GRAD_CHECK_FLOOR, DataItem, GradCheckReport, TrainConfig, TrainOutcome};

use crate::diffusion::VarianceMode;
use crate::error::{Error, Result};
use crate::numerics::Grid;

/// Stacked self-attention maps `layers × heads × (HW) × (HW)` over an
/// `height × width` token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub layers: usize,
    pub heads: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl AttentionStack {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// `heads × n × n` block of one layer.
    pub fn layer(&self, l: usize) -> &[f64] {
        let per = self.heads * self.tokens() * self.tokens();
        &self.data[l * per..(l + 1) * per]
    }

    /// `n × n` map of one head.
    pub fn head(&self, l: usize, h: usize) -> &[f64] {
        let n2 = self.tokens() * self.tokens();
        &self.layer(l)[h * n2..(h + 1) * n2]
    }

    /// Largest deviation of any attention row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.data
            .chunks_exact(self.tokens())
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// One model evaluation: predicted noise, variance source and attention maps.
#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    pub eps: Grid,
    pub variance_mode: VarianceMode,
    pub attention: Option<AttentionStack>,
}

/// Anything that predicts ε from `(x_t, t, class)`.
///
/// `class = None` is the unconditional (null-class) branch.
pub trait Denoiser: Send + Sync {
    fn predict(&self, x_t: &Grid, t: usize, class: Option<usize>) -> Result<DenoiserOutput>;

    /// Shape of one sample `x_t`.
    fn sample_shape(&self) -> (usize, usize, usize);

    /// Number of conditioning classes; 0 for unconditional models.
    fn num_classes(&self) -> usize {
        0
    }

    /// Names of the attention extraction sites, in stack order.
    fn attention_layers(&self) -> Vec<String> {
        Vec::new()
    }

    /// `∇_{x_t} log p(c | x_t)` from a noisy classifier, when the model has one.
    fn classifier_grad(&self, _x_t: &Grid, _t: usize, _class: usize) -> Result<Grid> {
        Err(Error::Capability("model has no noisy classifier".into()))
    }
}

/// A denoiser whose parameters can be fitted to `L_simple`.
pub trait Trainable: Denoiser {
    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Sum of squared errors `‖target − ε_θ(x_t, t, c)‖²` for one example and
    /// its exact gradient with respect to every parameter.
    fn example_grad(&self, x_t: &Grid, t: usize, class: Option<usize>, target: &Grid) -> Result<(f64, ParamSet)>;
}

pub(crate) fn check_class(class: Option<usize>, num_classes: usize) -> Result<()> {
    match class {
        Some(c) if c >= num_classes => Err(Error::Capability(format!(
            "class {c} requested but the model has {num_classes} classes"
        ))),
        _ => Ok(()),
    }
}

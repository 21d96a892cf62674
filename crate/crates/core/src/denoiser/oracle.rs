use std::f64::consts::PI;

use crate::diffusion::{NoiseSchedule, VarianceMode};
use crate::error::{Error, Result};
use crate::numerics::{sym_eig, Grid, RngStream, SymMatrix};

use super::{check_class, DataItem, Denoiser, DenoiserOutput};

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
    pub label: Option<usize>,
}

/// Finite Gaussian mixture in `R^D`, optionally labeled per component.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    components: Vec<MixtureComponent>,
    dim: usize,
}

impl MixtureSpec {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidParameter("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidParameter("mixture dimension is 0".into()));
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.cov.dim() != dim {
                return Err(Error::Shape(format!("component {i} does not have dimension {dim}")));
            }
            if !(c.weight >= 0.0) || !c.mean.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidParameter(format!("component {i} has a bad weight or mean")));
            }
            let eig = sym_eig(&c.cov)?;
            if !(eig.values[dim - 1] > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "component {i} covariance is not positive definite"
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("mixture weights sum to {total}")));
        }
        Ok(Self { components, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// `1 + max label`, or 0 when no component is labeled.
    pub fn num_classes(&self) -> usize {
        self.components.iter().filter_map(|c| c.label).map(|l| l + 1).max().unwrap_or(0)
    }

    pub fn is_labeled(&self) -> bool {
        self.components.iter().all(|c| c.label.is_some())
    }

    /// Draws `n` points; each carries its component's label.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Vec<DataItem>> {
        let d = self.dim;
        let roots = self
            .components
            .iter()
            .map(|c| {
                let e = sym_eig(&c.cov)?;
                // L = V·diag(√λ), so L·z ~ N(0, Σ)
                let mut l = e.vectors.clone();
                for i in 0..d {
                    for k in 0..d {
                        l[i * d + k] *= e.values[k].max(0.0).sqrt();
                    }
                }
                Ok(l)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut pick = self.components.len() - 1;
            for (i, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            let c = &self.components[pick];
            let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let x: Vec<f64> = (0..d)
                .map(|i| c.mean[i] + (0..d).map(|k| roots[pick][i * d + k] * z[k]).sum::<f64>())
                .collect();
            out.push(DataItem {
                x0: Grid::vector(x)?,
                class: c.label,
            });
        }
        Ok(out)
    }
}

/// One component of the noised marginal `p_t`.
#[derive(Clone, Debug)]
struct NoisedComponent {
    mean: Vec<f64>,
    precision: Vec<f64>,
    /// `log w − ½ log det C − (D/2) log 2π`
    log_norm: f64,
    label: Option<usize>,
}

fn noised_components(mix: &MixtureSpec, t: usize, sched: &NoiseSchedule) -> Result<Vec<NoisedComponent>> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    let d = mix.dim;
    mix.components
        .iter()
        .map(|c| {
            let cov = c.cov.lincomb(ab, &SymMatrix::identity(d), 1.0 - ab);
            let e = sym_eig(&cov)?;
            let logdet: f64 = e.values.iter().map(|l| l.ln()).sum();
            Ok(NoisedComponent {
                mean: c.mean.iter().map(|m| ab.sqrt() * m).collect(),
                precision: e.map_spectrum(|l| 1.0 / l).to_dense(),
                log_norm: c.weight.ln() - 0.5 * logdet - 0.5 * d as f64 * (2.0 * PI).ln(),
                label: c.label,
            })
        })
        .collect()
}

/// Per-component log densities (weight included) and scores `−C⁻¹(x − m)`.
fn component_terms(comps: &[NoisedComponent], x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = x.len();
    comps
        .iter()
        .map(|c| {
            let diff: Vec<f64> = x.iter().zip(&c.mean).map(|(a, b)| a - b).collect();
            let pd: Vec<f64> = (0..d)
                .map(|i| (0..d).map(|j| c.precision[i * d + j] * diff[j]).sum())
                .collect();
            let quad: f64 = diff.iter().zip(&pd).map(|(a, b)| a * b).sum();
            (c.log_norm - 0.5 * quad, pd.into_iter().map(|v| -v).collect())
        })
        .unzip()
}

/// `(log Σ_i exp l_i, ∇ log Σ_i exp l_i)` over the components selected by `keep`.
fn log_mix_and_score(logs: &[f64], scores: &[Vec<f64>], keep: impl Fn(usize) -> bool) -> Option<(f64, Vec<f64>)> {
    let max = (0..logs.len())
        .filter(|&i| keep(i))
        .map(|i| logs[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let d = scores[0].len();
    let mut total = 0.0;
    let mut grad = vec![0.0; d];
    for i in (0..logs.len()).filter(|&i| keep(i)) {
        let w = (logs[i] - max).exp();
        total += w;
        for (g, s) in grad.iter_mut().zip(&scores[i]) {
            *g += w * s;
        }
    }
    for g in &mut grad {
        *g /= total;
    }
    Some((max + total.ln(), grad))
}

fn vector_input(x_t: &Grid, dim: usize) -> Result<&[f64]> {
    if x_t.shape() != (dim, 1, 1) {
        return Err(Error::Shape(format!(
            "mixture has dimension {dim}, input shape is {:?}",
            x_t.shape()
        )));
    }
    Ok(x_t.data())
}

fn epsilon_from(comps: &[NoisedComponent], x: &[f64], class: Option<usize>, noise_std: f64) -> Result<Grid> {
    let (logs, scores) = component_terms(comps, x);
    let (_, grad) = log_mix_and_score(&logs, &scores, |i| class.is_none() || comps[i].label == class)
        .ok_or_else(|| Error::Capability(format!("no mixture component carries class {class:?}")))?;
    Grid::vector(grad.into_iter().map(|g| -noise_std * g).collect())
}

/// Exact `ε*(x_t) = −√(1−ᾱ_t)·∇ log p_t(x_t)` of the noised mixture, restricted to
/// the components labeled `class` when given.
pub fn oracle_epsilon(
    x_t: &Grid,
    t: usize,
    sched: &NoiseSchedule,
    mix: &MixtureSpec,
    class: Option<usize>,
) -> Result<Grid> {
    let x = vector_input(x_t, mix.dim)?;
    let comps = noised_components(mix, t, sched)?;
    epsilon_from(&comps, x, class, sched.noise_std(t))
}

/// Class posterior `p(c | x_t)` under the noised mixture and `∇ log p(c | x_t)`.
#[derive(Clone, Debug)]
pub struct ClassPosterior {
    pub probs: Vec<f64>,
    pub grad_log: Vec<Grid>,
}

fn posterior_from(comps: &[NoisedComponent], x: &[f64], classes: usize) -> Result<ClassPosterior> {
    let (logs, scores) = component_terms(comps, x);
    let (log_all, grad_all) = log_mix_and_score(&logs, &scores, |_| true).expect("nonempty mixture");
    let mut probs = Vec::with_capacity(classes);
    let mut grad_log = Vec::with_capacity(classes);
    for c in 0..classes {
        match log_mix_and_score(&logs, &scores, |i| comps[i].label == Some(c)) {
            Some((log_c, grad_c)) => {
                probs.push((log_c - log_all).exp());
                grad_log.push(Grid::vector(grad_c.iter().zip(&grad_all).map(|(a, b)| a - b).collect())?);
            }
            None => {
                // class with no component: probability 0, log-gradient undefined
                probs.push(0.0);
                grad_log.push(Grid::vector(vec![0.0; x.len()])?);
            }
        }
    }
    Ok(ClassPosterior { probs, grad_log })
}

pub fn oracle_class_posterior(
    x_t: &Grid,
    t: usize,
    sched: &NoiseSchedule,
    mix: &MixtureSpec,
) -> Result<ClassPosterior> {
    if !mix.is_labeled() {
        return Err(Error::InvalidParameter("class posterior needs every component labeled".into()));
    }
    let x = vector_input(x_t, mix.dim)?;
    let comps = noised_components(mix, t, sched)?;
    posterior_from(&comps, x, mix.num_classes())
}

/// Closed-form ε-predictor for a Gaussian mixture, with the exact noisy classifier.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    mix: MixtureSpec,
    sched: NoiseSchedule,
    variance_mode: VarianceMode,
    // index t-1
    noised: Vec<Vec<NoisedComponent>>,
}

impl OracleDenoiser {
    pub fn new(mix: MixtureSpec, sched: NoiseSchedule, variance_mode: VarianceMode) -> Result<Self> {
        let noised = (1..=sched.steps())
            .map(|t| noised_components(&mix, t, &sched))
            .collect::<Result<_>>()?;
        Ok(Self {
            mix,
            sched,
            variance_mode,
            noised,
        })
    }

    pub fn mixture(&self) -> &MixtureSpec {
        &self.mix
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn class_posterior(&self, x_t: &Grid, t: usize) -> Result<ClassPosterior> {
        if !self.mix.is_labeled() {
            return Err(Error::Capability("oracle mixture is unlabeled".into()));
        }
        self.sched.check(t)?;
        let x = vector_input(x_t, self.mix.dim)?;
        posterior_from(&self.noised[t - 1], x, self.mix.num_classes())
    }
}

impl Denoiser for OracleDenoiser {
    fn predict(&self, x_t: &Grid, t: usize, class: Option<usize>) -> Result<DenoiserOutput> {
        self.sched.check(t)?;
        check_class(class, self.mix.num_classes())?;
        let x = vector_input(x_t, self.mix.dim)?;
        Ok(DenoiserOutput {
            eps: epsilon_from(&self.noised[t - 1], x, class, self.sched.noise_std(t))?,
            variance_mode: self.variance_mode,
            attention: None,
        })
    }

    fn sample_shape(&self) -> (usize, usize, usize) {
        (self.mix.dim, 1, 1)
    }

    fn num_classes(&self) -> usize {
        self.mix.num_classes()
    }

    fn classifier_grad(&self, x_t: &Grid, t: usize, class: usize) -> Result<Grid> {
        check_class(Some(class), self.mix.num_classes())?;
        Ok(self.class_posterior(x_t, t)?.grad_log.swap_remove(class))
    }
}

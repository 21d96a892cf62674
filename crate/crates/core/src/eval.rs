//! Distribution distances, spectra of attended patches, mask IoU and the
//! procedural datasets they are measured on.

use rayon::prelude::*;

use crate::attention_mask::{aggregate_layer, AttentionMap, GapAxis, Mask};
use crate::denoiser::{DataItem, Denoiser, MixtureComponent, MixtureSpec};
use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{dft_magnitude, standard_normal, sym_eig, Grid, RngStream, SymMatrix};

fn check_sets(a: &[Grid], b: &[Grid]) -> Result<usize> {
    let d = a
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty sample set".into()))?
        .len();
    if b.is_empty() {
        return Err(Error::InvalidParameter("empty sample set".into()));
    }
    if a.iter().chain(b).any(|g| g.len() != d) {
        return Err(Error::Shape("sample sets differ in dimension".into()));
    }
    Ok(d)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_pairwise(a: &[Grid], b: &[Grid]) -> f64 {
    let total: f64 = a
        .par_iter()
        .map(|x| b.iter().map(|y| dist(x.data(), y.data())).sum::<f64>())
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    total / (a.len() * b.len()) as f64
}

/// `2·E‖A − B‖ − E‖A − A′‖ − E‖B − B′‖` with all pairs (diagonal included),
/// so identical multisets give exactly 0.
pub fn energy_distance(a: &[Grid], b: &[Grid]) -> Result<f64> {
    check_sets(a, b)?;
    let e = 2.0 * mean_pairwise(a, b) - mean_pairwise(a, a) - mean_pairwise(b, b);
    Ok(e.max(0.0))
}

/// Sample mean and covariance (divisor `n − 1`) of flattened grids.
pub fn gaussian_fit(samples: &[Grid]) -> Result<(Vec<f64>, SymMatrix)> {
    if samples.len() < 2 {
        return Err(Error::InvalidParameter("a Gaussian fit needs at least two samples".into()));
    }
    let d = check_sets(samples, samples)?;
    let n = samples.len() as f64;
    let mut mu = vec![0.0; d];
    for s in samples {
        for (m, v) in mu.iter_mut().zip(s.data()) {
            *m += v / n;
        }
    }
    let rows: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|i| {
            (i..d)
                .map(|j| {
                    samples
                        .iter()
                        .map(|s| (s.data()[i] - mu[i]) * (s.data()[j] - mu[j]))
                        .sum::<f64>()
                        / (n - 1.0)
                })
                .collect()
        })
        .collect();
    Ok((mu, SymMatrix::from_fn(d, |i, j| rows[i][j - i])))
}

fn psd_sqrt(m: &SymMatrix, what: &str) -> Result<SymMatrix> {
    let e = sym_eig(m)?;
    if let (Some(&high), Some(&low)) = (e.values.first(), e.values.last()) {
        // roundoff in a rank-deficient sample covariance scales with its spectrum
        let tol = 1e-10 * m.dim() as f64 * high.abs().max(1.0);
        if low < -tol {
            return Err(Error::InvalidParameter(format!(
                "{what} is not positive semi-definite (eigenvalue {low:e}, largest {high:e})"
            )));
        }
    }
    Ok(e.map_spectrum(|l| l.max(0.0).sqrt()))
}

fn dense_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Fréchet distance between `N(μ_a, Σ_a)` and `N(μ_b, Σ_b)`.
pub fn frechet_gaussian(mu_a: &[f64], cov_a: &SymMatrix, mu_b: &[f64], cov_b: &SymMatrix) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.dim() != d || cov_b.dim() != d {
        return Err(Error::Shape("Fréchet inputs differ in dimension".into()));
    }
    let root_a = psd_sqrt(cov_a, "first covariance")?.to_dense();
    psd_sqrt(cov_b, "second covariance")?;
    let inner = dense_mul(&dense_mul(&root_a, &cov_b.to_dense(), d), &root_a, d);
    let cross: f64 = sym_eig(&SymMatrix::from_dense(d, &inner)?)?
        .values
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let mean_term: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet distance between Gaussian fits of two sample sets.
pub fn frechet_samples(a: &[Grid], b: &[Grid]) -> Result<f64> {
    let (ma, ca) = gaussian_fit(a)?;
    let (mb, cb) = gaussian_fit(b)?;
    frechet_gaussian(&ma, &ca, &mb, &cb)
}

/// Linear projection onto the leading principal axes of a reference set.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` rows of length `D`.
    pub axes: Vec<Vec<f64>>,
}

impl Pca {
    pub fn fit(reference: &[Grid], k: usize) -> Result<Self> {
        let (mean, cov) = gaussian_fit(reference)?;
        let e = sym_eig(&cov)?;
        let k = k.min(mean.len());
        Ok(Self {
            mean,
            axes: (0..k).map(|j| e.vector(j)).collect(),
        })
    }

    pub fn project(&self, x: &Grid) -> Result<Grid> {
        if x.len() != self.mean.len() {
            return Err(Error::Shape("PCA input dimension mismatch".into()));
        }
        let centered: Vec<f64> = x.data().iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Grid::vector(
            self.axes
                .iter()
                .map(|ax| ax.iter().zip(&centered).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }
}

/// Number of PCA features in the projected Fréchet proxy.
pub const PCA_DIM: usize = 16;

/// Fréchet distance after projecting both sets on the top `k` principal axes
/// of `reference`.
pub fn frechet_pca(a: &[Grid], b: &[Grid], reference: &[Grid], k: usize) -> Result<f64> {
    let pca = Pca::fit(reference, k)?;
    let pa = a.iter().map(|x| pca.project(x)).collect::<Result<Vec<_>>>()?;
    let pb = b.iter().map(|x| pca.project(x)).collect::<Result<Vec<_>>>()?;
    frechet_samples(&pa, &pb)
}

pub const RADIAL_BINS: usize = 8;

/// Radial bin of DFT index `(u, v)` in a `p × p` spectrum; DC is in bin 0.
pub fn radial_bin(u: usize, v: usize, p: usize) -> usize {
    let f = |k: usize| k.min(p - k) as f64;
    let r = f(u).hypot(f(v)) / (p as f64 / 2.0 * 2f64.sqrt());
    ((r * RADIAL_BINS as f64) as usize).min(RADIAL_BINS - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyBin {
    pub bin: usize,
    pub mean_masked: f64,
    pub mean_unmasked: f64,
    pub mean_all: f64,
    /// `100·(masked − all)/all`; `None` when the denominator is at most 1e-12.
    pub pct_diff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyProfile {
    pub patch_size: usize,
    pub psi: f64,
    pub masked_patches: usize,
    pub total_patches: usize,
    /// Empty when no patch (or every patch) exceeds ψ.
    pub bins: Vec<FrequencyBin>,
}

impl FrequencyProfile {
    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn top_bin_pct(&self) -> Option<f64> {
        self.bins.last().and_then(|b| b.pct_diff)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,mean_masked,mean_unmasked,mean_all,pct_diff\n");
        for b in &self.bins {
            let pd = b.pct_diff.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{}\n",
                b.bin, b.mean_masked, b.mean_unmasked, b.mean_all, pd
            ));
        }
        out
    }
}

/// Radially binned mean magnitude of one patch set: `(sum, count)` per bin.
fn accumulate_bins(mag: &Grid, p: usize, sums: &mut [f64], counts: &mut [usize]) {
    for u in 0..p {
        for v in 0..p {
            let b = radial_bin(u, v, p);
            sums[b] += mag.get(0, u, v);
            counts[b] += 1;
        }
    }
}

/// Splits each image into non-overlapping `patch × patch` tiles, labels a tile
/// attended when its mean accumulated attention exceeds ψ, and compares the
/// radial magnitude spectrum of attended tiles with that of all tiles.
pub fn frequency_analysis(
    images: &[Grid],
    attention: &[AttentionMap],
    patch: usize,
    psi_list: &[f64],
) -> Result<Vec<FrequencyProfile>> {
    if images.len() != attention.len() {
        return Err(Error::Shape(format!(
            "{} images but {} attention maps",
            images.len(),
            attention.len()
        )));
    }
    if ![8, 16, 32].contains(&patch) {
        return Err(Error::InvalidParameter(format!("patch size {patch} not in {{8, 16, 32}}")));
    }
    // (mean attention, magnitude spectrum) per tile
    let mut tiles = Vec::new();
    for (img, att) in images.iter().zip(attention) {
        let (c, h, w) = img.shape();
        if (att.height(), att.width()) != (h, w) {
            return Err(Error::Shape("attention map does not match its image".into()));
        }
        for ty in 0..h / patch {
            for tx in 0..w / patch {
                let mut px = Vec::with_capacity(patch * patch);
                let mut a = 0.0;
                for y in ty * patch..(ty + 1) * patch {
                    for x in tx * patch..(tx + 1) * patch {
                        px.push((0..c).map(|ch| img.get(ch, y, x)).sum::<f64>() / c as f64);
                        a += att.get(y, x);
                    }
                }
                let mag = dft_magnitude(&Grid::from_vec(1, patch, patch, px)?)?;
                tiles.push((a / (patch * patch) as f64, mag));
            }
        }
    }
    let mut out = Vec::with_capacity(psi_list.len());
    for &psi in psi_list {
        let mut sums = [[0.0; RADIAL_BINS]; 2];
        let mut counts = [[0usize; RADIAL_BINS]; 2];
        let mut masked = 0;
        for (a, mag) in &tiles {
            let set = (*a > psi) as usize;
            masked += set;
            accumulate_bins(mag, patch, &mut sums[set], &mut counts[set]);
        }
        let bins = if masked == 0 || masked == tiles.len() {
            Vec::new()
        } else {
            (0..RADIAL_BINS)
                .map(|b| {
                    let m = sums[1][b] / counts[1][b] as f64;
                    let u = sums[0][b] / counts[0][b] as f64;
                    let all = (sums[0][b] + sums[1][b]) / (counts[0][b] + counts[1][b]) as f64;
                    FrequencyBin {
                        bin: b,
                        mean_masked: m,
                        mean_unmasked: u,
                        mean_all: all,
                        pct_diff: (all > 1e-12).then(|| 100.0 * (m - all) / all),
                    }
                })
                .collect()
        };
        out.push(FrequencyProfile {
            patch_size: patch,
            psi,
            masked_patches: masked,
            total_patches: tiles.len(),
            bins,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub iou: f64,
    /// Mean IoU of Bernoulli masks with the same masked fraction.
    pub random_iou: f64,
    /// `100·(iou − random)/random`; `None` when the baseline is 0.
    pub pct_diff: Option<f64>,
    /// Both masks were empty; `iou` is reported as 0.
    pub both_empty: bool,
}

pub const IOU_BASELINE_DRAWS: usize = 100;

fn iou_bits(a: &[bool], b: &[bool]) -> (f64, bool) {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        (0.0, true)
    } else {
        (inter as f64 / union as f64, false)
    }
}

pub fn mask_iou(mask: &Mask, truth: &Mask, rng: &mut RngStream) -> Result<IouReport> {
    if (mask.height(), mask.width()) != (truth.height(), truth.width()) {
        return Err(Error::Shape("IoU masks differ in size".into()));
    }
    let (iou, both_empty) = iou_bits(mask.bits(), truth.bits());
    let p = mask.fraction();
    let random_iou = (0..IOU_BASELINE_DRAWS)
        .map(|_| {
            let r: Vec<bool> = (0..truth.bits().len()).map(|_| rng.bernoulli(p)).collect();
            iou_bits(&r, truth.bits()).0
        })
        .sum::<f64>()
        / IOU_BASELINE_DRAWS as f64;
    Ok(IouReport {
        iou,
        random_iou,
        pct_diff: (random_iou > 0.0).then(|| 100.0 * (iou - random_iou) / random_iou),
        both_empty,
    })
}

/// Settings of the procedural image set.
#[derive(Clone, Debug, PartialEq)]
pub struct ProceduralSpec {
    pub size: usize,
    pub num_classes: usize,
    pub min_fraction: f64,
    pub max_fraction: f64,
}

impl Default for ProceduralSpec {
    fn default() -> Self {
        Self {
            size: 16,
            num_classes: 2,
            min_fraction: 0.1,
            max_fraction: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProceduralSample {
    pub image: Grid,
    pub foreground: Mask,
    pub class: usize,
    pub seed: u64,
    pub index: usize,
}

impl ProceduralSample {
    pub fn to_item(&self) -> DataItem {
        DataItem {
            x0: self.image.clone(),
            class: Some(self.class),
        }
    }
}

/// Grayscale images with a smooth background and one or two textured
/// elliptical blobs. Class 0 blobs carry a checkerboard, class 1 blobs carry
/// stripes; further classes alternate the two with a phase shift. Sample `i`
/// uses its own random stream, so prefixes of a larger set are identical.
pub fn procedural_dataset(n: usize, seed: u64, spec: &ProceduralSpec) -> Result<Vec<ProceduralSample>> {
    if n == 0 || spec.size < 4 || spec.num_classes == 0 {
        return Err(Error::InvalidParameter("procedural dataset needs n >= 1, size >= 4, classes >= 1".into()));
    }
    if !(0.0 < spec.min_fraction && spec.min_fraction < spec.max_fraction && spec.max_fraction < 1.0) {
        return Err(Error::InvalidParameter("foreground bounds must satisfy 0 < min < max < 1".into()));
    }
    (0..n).map(|i| procedural_sample(i, seed, spec)).collect()
}

fn procedural_sample(index: usize, seed: u64, spec: &ProceduralSpec) -> Result<ProceduralSample> {
    let s = spec.size;
    let sf = s as f64;
    let class = index % spec.num_classes;
    let mut rng = RngStream::new(seed, 0x0da7a_0000 + index as u64);
    let fg = loop {
        let blobs = 1 + rng.below(2);
        let mut bits = vec![false; s * s];
        for _ in 0..blobs {
            let cy = rng.uniform_range(0.2 * sf, 0.8 * sf);
            let cx = rng.uniform_range(0.2 * sf, 0.8 * sf);
            let ry = rng.uniform_range(0.12 * sf, 0.32 * sf);
            let rx = rng.uniform_range(0.12 * sf, 0.32 * sf);
            for y in 0..s {
                for x in 0..s {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        bits[y * s + x] = true;
                    }
                }
            }
        }
        let frac = bits.iter().filter(|&&b| b).count() as f64 / (s * s) as f64;
        if (spec.min_fraction..=spec.max_fraction).contains(&frac) {
            break bits;
        }
    };
    let level = rng.uniform_range(-0.45, -0.35);
    let (gy, gx) = (rng.uniform_range(-0.1, 0.1), rng.uniform_range(-0.1, 0.1));
    let fg_level = rng.uniform_range(-0.4, 0.6);
    let amp = rng.uniform_range(0.25, 0.65);
    let vertical = rng.bernoulli(0.5);
    let mut data = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let (u, v) = (y as f64 / sf - 0.5, x as f64 / sf - 0.5);
            let v = if fg[y * s + x] {
                let shift = class / 2;
                let on = match (class % 2, vertical) {
                    (0, _) => (x + y + shift) % 2 == 0,
                    (_, false) => (y + shift) % 2 == 0,
                    (_, true) => (x + shift) % 2 == 0,
                };
                fg_level + if on { amp } else { -amp }
            } else {
                level + gy * u + gx * v
            };
            data.push(v.clamp(-1.0, 1.0));
        }
    }
    Ok(ProceduralSample {
        image: Grid::from_vec(1, s, s, data)?,
        foreground: Mask::new(s, s, fg)?,
        class,
        seed,
        index,
    })
}

/// Two labeled, anisotropic Gaussian components in the plane.
pub fn mixture_2d() -> MixtureSpec {
    MixtureSpec::new(vec![
        MixtureComponent {
            weight: 0.5,
            mean: vec![-1.5, -0.5],
            cov: SymMatrix::from_fn(2, |i, j| [[0.30, 0.12], [0.12, 0.20]][i][j]),
            label: Some(0),
        },
        MixtureComponent {
            weight: 0.5,
            mean: vec![1.5, 0.75],
            cov: SymMatrix::diagonal(&[0.15, 0.40]),
            label: Some(1),
        },
    ])
    .expect("valid built-in mixture")
}

/// Timesteps at which [`noised_attention`] probes the model by default.
pub fn probe_steps(sched: &NoiseSchedule) -> Vec<usize> {
    let t = sched.steps();
    (1..=8).map(|k| (k * t / 8).max(1)).collect()
}

/// Attention of `model` on diffused copies of clean images, averaged over
/// `steps` (one fresh ε per image and step).
pub fn noised_attention<M: Denoiser + ?Sized>(
    model: &M,
    images: &[Grid],
    sched: &NoiseSchedule,
    steps: &[usize],
    layer: usize,
    axis: GapAxis,
    seed: u64,
) -> Result<Vec<AttentionMap>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut rng = RngStream::new(seed, 0xa77e_0000 + i as u64);
            let (h, w) = (x0.height(), x0.width());
            let mut acc = vec![0.0; h * w];
            for &t in steps {
                let eps = standard_normal(&mut rng, x0.shape());
                let x_t = forward_diffuse(x0, t, &eps, sched)?;
                let stack = model
                    .predict(&x_t, t, None)?
                    .attention
                    .ok_or_else(|| Error::Capability("model exposes no attention".into()))?;
                let m = aggregate_layer(&stack, layer, h, w, axis)?;
                for (a, v) in acc.iter_mut().zip(m.values()) {
                    *a += v;
                }
            }
            AttentionMap::from_raw(h, w, acc)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 2]]) -> Vec<Grid> {
        v.iter().map(|p| Grid::vector(p.to_vec()).unwrap()).collect()
    }

    #[test]
    fn energy_distance_cases() {
        let a = pts(&[[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5]]);
        assert!(energy_distance(&a, &a).unwrap().abs() < 1e-12);
        let p = pts(&[[0.0, 0.0]]);
        let q = pts(&[[3.0, 4.0]]);
        assert!((energy_distance(&p, &q).unwrap() - 10.0).abs() < 1e-12);
        assert!(energy_distance(&a, &pts(&[])).is_err());
        assert!(energy_distance(&a, &[Grid::vector(vec![1.0]).unwrap()]).is_err());
    }

    #[test]
    fn energy_distance_pinned_sets() {
        let a = pts(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [-1.0, 0.5]]);
        let b = pts(&[[0.5, 0.5], [1.5, -0.5], [3.0, 1.0], [0.0, -2.0], [1.0, 1.0]]);
        let naive = |x: &[Grid], y: &[Grid]| {
            let mut s = 0.0;
            for p in x {
                for q in y {
                    s += ((p.data()[0] - q.data()[0]).powi(2) + (p.data()[1] - q.data()[1]).powi(2)).sqrt();
                }
            }
            s / 25.0
        };
        let expect = 2.0 * naive(&a, &b) - naive(&a, &a) - naive(&b, &b);
        let got = energy_distance(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - energy_distance(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn frechet_closed_forms() {
        let c = SymMatrix::from_fn(2, |i, j| if i == j { 1.5 } else { 0.4 });
        assert!(frechet_gaussian(&[1.0, 2.0], &c, &[1.0, 2.0], &c).unwrap() < 1e-10);
        let one = |v: f64| SymMatrix::diagonal(&[v]);
        let f = frechet_gaussian(&[0.5], &one(4.0), &[-1.0], &one(0.25)).unwrap();
        assert!((f - (1.5f64.powi(2) + 1.5f64.powi(2))).abs() < 1e-12);
        let bad = SymMatrix::diagonal(&[1.0, -0.1]);
        assert!(frechet_gaussian(&[0.0, 0.0], &bad, &[0.0, 0.0], &c).is_err());
    }

    #[test]
    fn frechet_pinned_2d_and_symmetry() {
        let ca = SymMatrix::from_fn(2, |i, j| [[2.0, 0.3], [0.3, 0.5]][i][j]);
        let cb = SymMatrix::from_fn(2, |i, j| [[1.0, -0.2], [-0.2, 1.5]][i][j]);
        let (ma, mb) = ([0.2, -0.1], [1.0, 0.4]);
        // 2x2 closed form: tr √M = √(tr M + 2√det M) for PSD M
        let m = {
            let ra = sym_eig(&ca).unwrap().map_spectrum(f64::sqrt).to_dense();
            let inner = dense_mul(&dense_mul(&ra, &cb.to_dense(), 2), &ra, 2);
            let det = inner[0] * inner[3] - inner[1] * inner[2];
            (inner[0] + inner[3] + 2.0 * det.sqrt()).sqrt()
        };
        let expect = (0.8f64.powi(2) + 0.5f64.powi(2)) + ca.trace() + cb.trace() - 2.0 * m;
        let got = frechet_gaussian(&ma, &ca, &mb, &cb).unwrap();
        assert!((got - expect).abs() < 1e-10);
        assert!((got - frechet_gaussian(&mb, &cb, &ma, &ca).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn gaussian_fit_and_pca() {
        let mut rng = RngStream::new(1, 0);
        let s: Vec<Grid> = (0..4000)
            .map(|_| {
                let z = rng.normal();
                Grid::vector(vec![2.0 * z + 1.0, 0.1 * rng.normal(), -z]).unwrap()
            })
            .collect();
        let (mu, cov) = gaussian_fit(&s).unwrap();
        assert!((mu[0] - 1.0).abs() < 0.1 && (cov.get(0, 0) - 4.0).abs() < 0.3 && (cov.get(0, 2) + 2.0).abs() < 0.2);
        let pca = Pca::fit(&s, 1).unwrap();
        let ax = &pca.axes[0];
        assert!((ax[0].abs() - 2.0 / 5f64.sqrt()).abs() < 0.01 && ax[1].abs() < 0.05);
        assert!(frechet_pca(&s, &s, &s, 2).unwrap() < 1e-9);
    }

    #[test]
    fn iou_cases() {
        let mut rng = RngStream::new(2, 0);
        let m = |v: &[u8]| Mask::new(4, 4, v.iter().map(|&b| b == 1).collect()).unwrap();
        let a = m(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(mask_iou(&a, &a, &mut rng).unwrap().iou, 1.0);
        let b = m(&[0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(mask_iou(&a, &b, &mut rng).unwrap().iou, 0.0);
        // overlap 2, union 6
        let c = m(&[0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert!((mask_iou(&a, &c, &mut rng).unwrap().iou - 1.0 / 3.0).abs() < 1e-15);
        let e = Mask::empty(4, 4);
        let r = mask_iou(&e, &e, &mut rng).unwrap();
        assert!(r.both_empty && r.iou == 0.0 && r.pct_diff.is_none());
    }

    #[test]
    fn procedural_audit() {
        let spec = ProceduralSpec::default();
        let a = procedural_dataset(1000, 4, &spec).unwrap();
        assert_eq!(a[..10], procedural_dataset(10, 4, &spec).unwrap()[..]);
        let mut counts = [0usize; 2];
        for s in &a {
            let f = s.foreground.fraction();
            assert!((0.1..=0.6).contains(&f), "fraction {f}");
            assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            counts[s.class] += 1;
        }
        assert!(counts.iter().all(|&c| (c as f64 - 500.0).abs() <= 25.0));
        assert_ne!(a[0].image, procedural_dataset(1, 5, &spec).unwrap()[0].image);
    }

    #[test]
    fn frequency_uniform_and_constant() {
        let spec = ProceduralSpec::default();
        let imgs: Vec<Grid> = procedural_dataset(1000, 7, &spec).unwrap().into_iter().map(|s| s.image).collect();
        // content-independent random attention: masked tiles are a random subset
        let mut rng = RngStream::new(8, 0);
        let att: Vec<AttentionMap> = imgs
            .iter()
            .map(|_| {
                let tile: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
                let v = (0..256).map(|i| tile[(i / 16 / 8) * 2 + (i % 16) / 8]).collect();
                AttentionMap::from_raw(16, 16, v).unwrap()
            })
            .collect();
        let prof = frequency_analysis(&imgs, &att, 8, &[1.0]).unwrap();
        assert!(prof[0].total_patches == 4000 && prof[0].masked_patches > 1000);
        for b in &prof[0].bins {
            assert!(b.pct_diff.unwrap().abs() < 5.0, "{b:?}");
        }
        let uniform = vec![AttentionMap::uniform(16, 16); imgs.len()];
        assert!(frequency_analysis(&imgs, &uniform, 8, &[1.0]).unwrap()[0].is_empty());

        let flat = vec![Grid::filled(1, 16, 16, 0.3); 2];
        let split = AttentionMap::from_raw(16, 16, (0..256).map(|i| if i % 16 < 8 { 2.0 } else { 1.0 }).collect()).unwrap();
        let p = &frequency_analysis(&flat, &[split.clone(), split], 8, &[1.0]).unwrap()[0];
        assert!(p.bins[0].pct_diff.unwrap().abs() < 1e-12);
        assert!(p.bins[1..].iter().all(|b| b.pct_diff.is_none()));
    }

    #[test]
    fn frequency_planted_texture() {
        // checkerboard on the left half, smooth ramp on the right; attention on the left
        let img = Grid::from_vec(
            1,
            16,
            16,
            (0..256)
                .map(|i| {
                    let (y, x) = (i / 16, i % 16);
                    if x < 8 { if (x + y) % 2 == 0 { 0.5 } else { -0.5 } } else { x as f64 / 16.0 }
                })
                .collect(),
        )
        .unwrap();
        let att = AttentionMap::from_raw(16, 16, (0..256).map(|i| if i % 16 < 8 { 1.8 } else { 0.2 }).collect()).unwrap();
        let p = &frequency_analysis(&[img], &[att], 8, &[1.0, 1.3]).unwrap();
        let top = p[0].bins.last().unwrap();
        assert!(top.mean_unmasked.abs() < 1e-9 && (p[0].top_bin_pct().unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(p[1].masked_patches, 2);
        assert!(p[0].to_csv().starts_with("bin,mean_masked,mean_unmasked,mean_all,pct_diff\n"));
    }

    #[test]
    fn radial_bins_cover_range() {
        assert_eq!(radial_bin(0, 0, 8), 0);
        assert_eq!(radial_bin(4, 4, 8), 7);
        assert_eq!(radial_bin(7, 1, 8), radial_bin(1, 1, 8));
    }
}

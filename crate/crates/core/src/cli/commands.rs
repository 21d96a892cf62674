//! The four subcommands. Each computes everything in memory and then hands
//! the files to one [`RunWriter`].

use std::fs;
use std::path::{Path, PathBuf};

use crate::attention_mask::{threshold_mask, AttentionMap, GapAxis, MaskStrategy};
use crate::denoiser::checkpoint::{self, SavedModel};
use crate::denoiser::{
    train, DataItem, Denoiser, MlpConfig, MlpDenoiser, OracleDenoiser, TinyConfig, TinyDenoiser, TrainConfig,
};
use crate::diffusion::{NoiseSchedule, VarianceMode};
use crate::error::{Error, Result};
use crate::eval::{
    energy_distance, frechet_pca, frechet_samples, frequency_analysis, mask_iou, mixture_2d, noised_attention,
    probe_steps, procedural_dataset, ProceduralSpec, PCA_DIM,
};
use crate::guidance::{sample, GuidanceConfig, GuidanceKind, SampleRun};
use crate::numerics::{heatmap_png, tile_png, Grid, RngStream, Tensor};

use super::config::RunConfig;

/// Settings a checkpoint carries over to later commands.
pub const TRAINING_FILE: &str = "training.txt";
const CARRIED_KEYS: [&str; 6] = ["dataset", "dataset_size", "data_seed", "image_size", "schedule", "timesteps"];

/// Collects output files and writes them under one root.
pub struct RunWriter {
    root: PathBuf,
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl RunWriter {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, rel: impl AsRef<Path>, bytes: impl Into<Vec<u8>>) {
        self.files.push((rel.as_ref().to_path_buf(), bytes.into()));
    }

    pub fn add_tensor(&mut self, rel: impl AsRef<Path>, t: &Tensor) -> Result<()> {
        self.add(rel, t.to_bytes()?);
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf> {
        for (rel, bytes) in &self.files {
            let path = self.root.join(rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, bytes)?;
        }
        Ok(self.root)
    }
}

pub fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    let t: usize = cfg.get("timesteps")?;
    match cfg.require("schedule")? {
        "linear" => NoiseSchedule::linear(t, 1e-4, 0.02),
        "linear_scaled" => NoiseSchedule::linear_scaled(t),
        "cosine" => NoiseSchedule::cosine(t),
        other => Err(Error::Config(format!("unknown schedule `{other}` (linear, linear_scaled, cosine)"))),
    }
}

fn variance_mode(cfg: &RunConfig) -> Result<VarianceMode> {
    VarianceMode::parse(cfg.require("variance_mode")?).map_err(|e| Error::Config(e.to_string()))
}

/// Training items and the matching reference set for metrics.
fn dataset(cfg: &RunConfig) -> Result<Vec<DataItem>> {
    let n: usize = cfg.get("dataset_size")?;
    let seed: u64 = cfg.get("data_seed")?;
    match cfg.require("dataset")? {
        "procedural" => {
            let spec = ProceduralSpec {
                size: cfg.get("image_size")?,
                ..ProceduralSpec::default()
            };
            Ok(procedural_dataset(n, seed, &spec)?.iter().map(|s| s.to_item()).collect())
        }
        "mixture2d" => mixture_2d().sample(n, &mut RngStream::new(seed, 0xda7a)),
        other => Err(Error::Config(format!("unknown dataset `{other}` (procedural, mixture2d)"))),
    }
}

fn build_model(cfg: &RunConfig, data: &[DataItem]) -> Result<SavedModel> {
    let shape = data[0].x0.shape();
    let vector = data[0].x0.is_vector();
    let seed: u64 = cfg.get("seed")?;
    let num_classes: usize = cfg.get("num_classes")?;
    let kind = match cfg.require("model")? {
        "auto" if vector => "mlp",
        "auto" => "tiny",
        k => k,
    };
    match kind {
        "tiny" => {
            if vector || shape.1 != shape.2 {
                return Err(Error::Config("model `tiny` needs square image data".into()));
            }
            let config = TinyConfig {
                in_channels: shape.0,
                size: shape.1,
                features: cfg.get("features")?,
                heads: cfg.get("heads")?,
                attn_layers: cfg.get("attn_layers")?,
                time_dim: cfg.get("time_dim")?,
                num_classes,
                variance_mode: variance_mode(cfg)?,
            };
            Ok(SavedModel::Tiny(TinyDenoiser::new(config, seed)?))
        }
        "mlp" => {
            if !vector {
                return Err(Error::Config("model `mlp` needs vector data".into()));
            }
            let config = MlpConfig {
                dim: data[0].x0.len(),
                hidden: cfg.get("hidden")?,
                time_dim: cfg.get("time_dim")?,
                num_classes,
                variance_mode: variance_mode(cfg)?,
            };
            Ok(SavedModel::Mlp(MlpDenoiser::new(config, seed)?))
        }
        other => Err(Error::Config(format!("unknown model `{other}` (tiny, mlp, auto)"))),
    }
}

fn summary_csv(rows: &[(&str, String)]) -> String {
    let mut out = String::from("key,value\n");
    for (k, v) in rows {
        out.push_str(&format!("{k},{v}\n"));
    }
    out
}

fn fmt(v: f64) -> String {
    format!("{v:.9}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.require("dataset")?;
    let sched = schedule(cfg)?;
    let data = dataset(cfg)?;
    let mut model = build_model(cfg, &data)?;
    let tc = TrainConfig {
        steps: cfg.get("train_steps")?,
        learning_rate: cfg.get("learning_rate")?,
        batch_size: cfg.get("batch_size")?,
        class_drop_prob: cfg.get("class_drop_prob")?,
        seed: cfg.get("seed")?,
    };
    let outcome = train(&mut model, &data, &sched, &tc)?;

    let mut w = RunWriter::new(cfg.get::<PathBuf>("out")?);
    w.add("config.snapshot", cfg.snapshot());
    let (manifest, bytes) = checkpoint::encode(&model)?;
    w.add(Path::new("checkpoint").join(checkpoint::MANIFEST_FILE), manifest);
    w.add(Path::new("checkpoint").join(checkpoint::PARAMS_FILE), bytes);
    let mut carried = String::new();
    for k in CARRIED_KEYS {
        carried.push_str(&format!("{k} = {}\n", cfg.require(k)?));
    }
    w.add(Path::new("checkpoint").join(TRAINING_FILE), carried);
    let mut loss = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        loss.push_str(&format!("{i},{}\n", fmt(*l)));
    }
    w.add("metrics/loss.csv", loss);
    let (head, tail) = outcome.window_means();
    let rows = [
        ("model", model.kind().to_string()),
        ("steps", outcome.losses.len().to_string()),
        ("initial_window_loss", fmt(head)),
        ("final_window_loss", fmt(tail)),
        ("ratio", fmt(tail / head)),
    ];
    w.add("metrics/summary.csv", summary_csv(&rows));
    println!("trained {} for {} steps: loss {head:.4} -> {tail:.4}", model.kind(), tc.steps);
    w.finish()
}

/// A model to sample from, plus the data it should be compared with.
pub struct Source {
    pub model: Box<dyn Denoiser>,
    pub sched: NoiseSchedule,
    pub reference: Vec<Grid>,
    pub checkpoint: Option<SavedModel>,
}

/// Resolves `checkpoint` or `oracle`. Keys stored with the checkpoint fill
/// in whatever `cfg` leaves unset.
pub fn load_source(cfg: &mut RunConfig) -> Result<Source> {
    if cfg.get::<bool>("oracle")? {
        let sched = schedule(cfg)?;
        let mix = mixture_2d();
        let n: usize = cfg.get("reference_size")?;
        let reference = mix
            .sample(n, &mut RngStream::new(cfg.get("data_seed")?, 0x5eed_da7a))?
            .into_iter()
            .map(|d| d.x0)
            .collect();
        let model = OracleDenoiser::new(mix, sched.clone(), variance_mode(cfg)?)?;
        return Ok(Source {
            model: Box::new(model),
            sched,
            reference,
            checkpoint: None,
        });
    }
    let dir: PathBuf = cfg.get_opt("checkpoint")?.ok_or_else(|| {
        Error::Config("no model: set `checkpoint` (a train output's checkpoint/ directory) or `oracle = true`".into())
    })?;
    let carried = RunConfig::load(&dir.join(TRAINING_FILE))?;
    cfg.fill_from(&carried);
    let model = checkpoint::load(&dir)?;
    let sched = schedule(cfg)?;
    let reference = dataset(cfg)?.into_iter().map(|d| d.x0).collect();
    Ok(Source {
        model: Box::new(model.clone()),
        sched,
        reference,
        checkpoint: Some(model),
    })
}

fn layer_index(model: &dyn Denoiser, name: &str) -> Result<usize> {
    let layers = model.attention_layers();
    if layers.is_empty() {
        return Ok(0);
    }
    layers
        .iter()
        .position(|l| l == name)
        .ok_or_else(|| Error::Config(format!("unknown layer `{name}` (model has {})", layers.join(", "))))
}

pub fn guidance_config(cfg: &RunConfig, model: &dyn Denoiser) -> Result<GuidanceConfig> {
    Ok(GuidanceConfig {
        kind: cfg.require("guidance")?.parse()?,
        scale: cfg.get("scale")?,
        scale_cfg: cfg.get("scale_cfg")?,
        scale_sag: cfg.get("scale_sag")?,
        sigma: cfg.get("sigma")?,
        psi: cfg.get("psi")?,
        layer: layer_index(model, cfg.require("layer")?)?,
        strategy: cfg.require("strategy")?.parse()?,
        mask_fraction: cfg.get("mask_fraction")?,
        axis: cfg.require("gap_axis")?.parse()?,
        variance_mode: cfg.is_set("variance_mode").then(|| variance_mode(cfg)).transpose()?,
        class: cfg.get_opt("class")?,
    })
}

/// Distances of a sample set to the reference data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub energy: f64,
    pub frechet: f64,
    pub frechet_pca: Option<f64>,
    pub masked_fraction: Option<f64>,
    pub eps_gap: Option<f64>,
}

pub fn run_metrics(run: &SampleRun, reference: &[Grid]) -> Result<RunMetrics> {
    let image = !reference[0].is_vector();
    Ok(RunMetrics {
        energy: energy_distance(&run.samples, reference)?,
        frechet: frechet_samples(&run.samples, reference)?,
        frechet_pca: if image {
            Some(frechet_pca(&run.samples, reference, reference, PCA_DIM)?)
        } else {
            None
        },
        masked_fraction: run.mean_masked_fraction(),
        eps_gap: run.mean_eps_gap(),
    })
}

fn metrics_rows(m: &RunMetrics, n: usize) -> Vec<(&'static str, String)> {
    vec![
        ("n", n.to_string()),
        ("energy_distance", fmt(m.energy)),
        ("frechet", fmt(m.frechet)),
        ("frechet_pca", fmt_opt(m.frechet_pca)),
        ("masked_fraction", fmt_opt(m.masked_fraction)),
        ("eps_gap_norm", fmt_opt(m.eps_gap)),
    ]
}

/// 64×64 occupancy histogram of 2-D points over `[−4, 4]²`.
fn density_png(points: &[Grid]) -> Result<Vec<u8>> {
    const BINS: usize = 64;
    let mut counts = vec![0.0; BINS * BINS];
    for p in points {
        let cell = |v: f64| ((v + 4.0) / 8.0 * BINS as f64).floor();
        let (x, y) = (cell(p.data()[0]), cell(p.data().get(1).copied().unwrap_or(0.0)));
        if (0.0..BINS as f64).contains(&x) && (0.0..BINS as f64).contains(&y) {
            counts[(BINS - 1 - y as usize) * BINS + x as usize] += 1.0;
        }
    }
    heatmap_png(&counts, BINS, BINS)
}

fn add_samples(w: &mut RunWriter, name: &str, samples: &[Grid], cols: usize) -> Result<()> {
    let png = if samples[0].is_vector() {
        density_png(samples)?
    } else {
        tile_png(&samples.iter().map(|g| g.clamp(-1.0, 1.0)).collect::<Vec<_>>(), cols)?
    };
    w.add(format!("samples/{name}.png"), png);
    w.add_tensor(format!("tensors/{name}.glab"), &Tensor::stack(samples)?)
}

fn stack_maps(maps: &[&AttentionMap]) -> Result<Tensor> {
    let (h, w) = (maps[0].height(), maps[0].width());
    let data = maps.iter().flat_map(|m| m.values().iter().copied()).collect();
    Tensor::new(vec![maps.len(), h, w], data)
}

pub fn cmd_sample(cfg: &RunConfig) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    let src = load_source(&mut cfg)?;
    let gcfg = guidance_config(&cfg, src.model.as_ref())?;
    let n: usize = cfg.get("n")?;
    if n == 0 {
        return Err(Error::Config("`n` must be at least 1".into()));
    }
    let seed: u64 = cfg.get("seed")?;
    let cols: usize = cfg.get("grid_cols")?;
    let run = sample(src.model.as_ref(), &src.sched, &gcfg, n, seed)?;
    let metrics = run_metrics(&run, &src.reference)?;

    let mut w = RunWriter::new(cfg.get::<PathBuf>("out")?);
    w.add("config.snapshot", cfg.snapshot());
    add_samples(&mut w, "samples", &run.samples, cols)?;
    w.add("metrics/diagnostics.csv", run.diagnostics_csv());
    w.add("metrics/summary.csv", summary_csv(&metrics_rows(&metrics, n)));
    if let Some(acc) = &run.attention {
        for l in 0..acc[0].layers.len() {
            let maps: Vec<&AttentionMap> = acc.iter().map(|a| &a.layers[l]).collect();
            w.add_tensor(format!("tensors/attention_layer{l}.glab"), &stack_maps(&maps)?)?;
            for h in 0..acc[0].heads[l].len() {
                let maps: Vec<&AttentionMap> = acc.iter().map(|a| &a.heads[l][h]).collect();
                w.add_tensor(format!("tensors/attention_layer{l}_head{h}.glab"), &stack_maps(&maps)?)?;
            }
        }
    }
    println!(
        "sampled {n} chains with {}: energy_distance = {:.6}, frechet = {:.6}",
        gcfg.kind, metrics.energy, metrics.frechet
    );
    if cfg.get::<bool>("compare_baseline")? {
        let base = sample(src.model.as_ref(), &src.sched, &GuidanceConfig { kind: GuidanceKind::None, ..gcfg }, n, seed)?;
        let bm = run_metrics(&base, &src.reference)?;
        add_samples(&mut w, "baseline", &base.samples, cols)?;
        if !run.samples[0].is_vector() {
            // rows alternate guided / baseline
            let cols = cols.clamp(1, n);
            let mut paired = Vec::with_capacity(2 * n);
            for (g, b) in run.samples.chunks(cols).zip(base.samples.chunks(cols)) {
                let pad = |row: &[Grid]| {
                    let mut r: Vec<Grid> = row.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
                    r.resize(cols, Grid::filled(row[0].channels(), row[0].height(), row[0].width(), -1.0));
                    r
                };
                paired.extend(pad(g));
                paired.extend(pad(b));
            }
            w.add("samples/paired.png", tile_png(&paired, cols)?);
        }
        w.add("metrics/baseline.csv", summary_csv(&metrics_rows(&bm, n)));
        println!("baseline: energy_distance = {:.6}, frechet = {:.6}", bm.energy, bm.frechet);
    }
    w.finish()
}

/// The single axis an ablation varies.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub axis: String,
    pub values: Vec<String>,
}

pub const SWEEP_AXES: [&str; 5] = ["scale", "sigma", "psi", "strategy", "layer"];

impl Sweep {
    /// `axis=v1,v2,...`; a `;` or a second `=` means several axes.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec.contains(';') || spec.matches('=').count() != 1 {
            return Err(Error::InvalidParameter(format!(
                "sweep `{spec}` must vary exactly one axis, as `axis=v1,v2,...`"
            )));
        }
        let (axis, vals) = spec.split_once('=').expect("one `=`");
        let axis = axis.trim();
        if !SWEEP_AXES.contains(&axis) {
            return Err(Error::InvalidParameter(format!(
                "cannot sweep `{axis}` (axes: {})",
                SWEEP_AXES.join(", ")
            )));
        }
        let values: Vec<String> = if axis == "strategy" && vals.trim() == "all" {
            MaskStrategy::ALL.iter().map(|s| s.name().to_string()).collect()
        } else {
            vals.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect()
        };
        if values.is_empty() {
            return Err(Error::InvalidParameter(format!("sweep over `{axis}` lists no values")));
        }
        Ok(Sweep {
            axis: axis.to_string(),
            values,
        })
    }
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<PathBuf> {
    let sweep = Sweep::parse(cfg.require("sweep")?)?;
    let mut cfg = cfg.clone();
    if !cfg.is_set("guidance") {
        cfg.set("guidance", "sag")?;
    }
    let src = load_source(&mut cfg)?;
    let n: usize = cfg.get("n")?;
    let seed: u64 = cfg.get("seed")?;
    let base_cfg = guidance_config(&cfg, src.model.as_ref())?;
    let base = sample(
        src.model.as_ref(),
        &src.sched,
        &GuidanceConfig {
            kind: GuidanceKind::None,
            ..base_cfg
        },
        n,
        seed,
    )?;
    let bm = run_metrics(&base, &src.reference)?;
    let mut table = String::from("axis,value,energy_distance,frechet,masked_fraction,eps_gap_norm\n");
    for v in &sweep.values {
        let mut c = cfg.clone();
        c.set(&sweep.axis, v)?;
        let g = guidance_config(&c, src.model.as_ref())?;
        let m = run_metrics(&sample(src.model.as_ref(), &src.sched, &g, n, seed)?, &src.reference)?;
        table.push_str(&format!(
            "{},{v},{},{},{},{}\n",
            sweep.axis,
            fmt(m.energy),
            fmt(m.frechet),
            fmt_opt(m.masked_fraction),
            fmt_opt(m.eps_gap)
        ));
    }
    let mut w = RunWriter::new(cfg.get::<PathBuf>("out")?);
    w.add("config.snapshot", cfg.snapshot());
    w.add("metrics/baseline.csv", summary_csv(&metrics_rows(&bm, n)));
    w.add("metrics/ablation.csv", table);
    println!("ablated {} over {} settings", sweep.axis, sweep.values.len());
    w.finish()
}

fn read_maps(path: &Path) -> Result<Vec<AttentionMap>> {
    let mut f = fs::File::open(path)?;
    let t = Tensor::read_from(&mut f)?;
    let [n, h, w] = t.dims[..] else {
        return Err(Error::Format(format!("{}: expected an N×H×W tensor", path.display())));
    };
    (0..n)
        .map(|i| AttentionMap::from_raw(h, w, t.data[i * h * w..(i + 1) * h * w].to_vec()))
        .collect()
}

fn mean_map(maps: &[AttentionMap]) -> Result<AttentionMap> {
    let (h, w) = (maps[0].height(), maps[0].width());
    let mut acc = vec![0.0; h * w];
    for m in maps {
        for (a, v) in acc.iter_mut().zip(m.values()) {
            *a += v;
        }
    }
    AttentionMap::from_raw(h, w, acc)
}

fn heatmap(m: &AttentionMap) -> Result<Vec<u8>> {
    let zoom = (128 / m.height().max(1)).max(1);
    m.upsample(m.height() * zoom, m.width() * zoom)?.to_png()
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<PathBuf> {
    let run_dir: PathBuf = cfg
        .get_opt("run_dir")?
        .ok_or_else(|| Error::Config("analyze needs `run_dir`, the output directory of a `sample` run".into()))?;
    let mut run_cfg = RunConfig::load(&run_dir.join("config.snapshot"))?;
    let layer0 = run_dir.join("tensors/attention_layer0.glab");
    if !layer0.exists() {
        return Err(Error::Config(format!(
            "{} holds no accumulated attention; produce it with `sample --checkpoint DIR` on a tiny \
             (attention) checkpoint, without --oracle",
            run_dir.display()
        )));
    }
    let samples = Tensor::read_from(&mut fs::File::open(run_dir.join("tensors/samples.glab"))?)?.unstack()?;
    let layer: usize = run_cfg.require("layer")?.trim_start_matches("attn").parse().unwrap_or(0);
    let mut layers = Vec::new();
    while run_dir.join(format!("tensors/attention_layer{}.glab", layers.len())).exists() {
        let l = layers.len();
        let mut heads = Vec::new();
        while run_dir.join(format!("tensors/attention_layer{l}_head{}.glab", heads.len())).exists() {
            heads.push(read_maps(&run_dir.join(format!("tensors/attention_layer{l}_head{}.glab", heads.len())))?);
        }
        layers.push((read_maps(&run_dir.join(format!("tensors/attention_layer{l}.glab")))?, heads));
    }
    let layer = layer.min(layers.len() - 1);
    let psi_list: Vec<f64> = cfg.get_list("analyze_psi")?;
    let patch: usize = cfg.get("patch_size")?;

    let mut w = RunWriter::new(cfg.get::<PathBuf>("out")?);
    w.add("config.snapshot", cfg.snapshot());

    let profiles = frequency_analysis(&samples, &layers[layer].0, patch, &psi_list)?;
    let mut freq_summary = String::from("psi,masked_patches,total_patches,top_bin_pct_diff\n");
    for p in &profiles {
        w.add(format!("metrics/frequency_psi{:.1}.csv", p.psi), p.to_csv());
        freq_summary.push_str(&format!(
            "{:.1},{},{},{}\n",
            p.psi,
            p.masked_patches,
            p.total_patches,
            fmt_opt(p.top_bin_pct())
        ));
    }
    w.add("metrics/frequency_summary.csv", freq_summary);

    for (l, (avg, heads)) in layers.iter().enumerate() {
        w.add(format!("figures/attn{l}_mean.png"), heatmap(&mean_map(avg)?)?);
        for (h, maps) in heads.iter().enumerate() {
            w.add(format!("figures/attn{l}_head{h}.png"), heatmap(&mean_map(maps)?)?);
        }
    }

    // IoU needs ground-truth foregrounds, so it probes the training images.
    if run_cfg.raw("checkpoint").is_some() && run_cfg.raw("dataset") == Some("procedural") {
        let src = load_source(&mut run_cfg)?;
        let model = src.checkpoint.expect("checkpoint source");
        let spec = ProceduralSpec {
            size: run_cfg.get("image_size")?,
            ..ProceduralSpec::default()
        };
        let probe = procedural_dataset(cfg.get("probe_images")?, run_cfg.get("data_seed")?, &spec)?;
        let images: Vec<Grid> = probe.iter().map(|s| s.image.clone()).collect();
        let seed: u64 = cfg.get("seed")?;
        let axis: GapAxis = run_cfg.require("gap_axis")?.parse()?;
        let maps = noised_attention(&model, &images, &src.sched, &probe_steps(&src.sched), layer, axis, seed)?;
        let mut rows = String::from("image,psi,iou,random_iou,pct_diff,both_empty\n");
        let mut summary = String::from("psi,mean_iou,mean_random_iou,pct_diff\n");
        for &psi in &psi_list {
            let mut rng = RngStream::new(seed, 0x10u64);
            let (mut a, mut b) = (0.0, 0.0);
            for (i, (s, m)) in probe.iter().zip(&maps).enumerate() {
                let r = mask_iou(&threshold_mask(m, psi), &s.foreground, &mut rng)?;
                a += r.iou;
                b += r.random_iou;
                rows.push_str(&format!(
                    "{i},{psi:.1},{},{},{},{}\n",
                    fmt(r.iou),
                    fmt(r.random_iou),
                    fmt_opt(r.pct_diff),
                    r.both_empty
                ));
            }
            let k = probe.len() as f64;
            let pd = (b > 0.0).then(|| 100.0 * (a - b) / b);
            summary.push_str(&format!("{psi:.1},{},{},{}\n", fmt(a / k), fmt(b / k), fmt_opt(pd)));
        }
        w.add("metrics/iou.csv", rows);
        w.add("metrics/iou_summary.csv", summary);
    } else {
        println!("skipping IoU: the run was not sampled from a checkpoint trained on procedural data");
    }
    println!("analyzed {} samples from {}", samples.len(), run_dir.display());
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parsing() {
        let s = Sweep::parse("sigma=0, 1,3").unwrap();
        assert_eq!((s.axis.as_str(), s.values.len()), ("sigma", 3));
        assert_eq!(Sweep::parse("strategy=all").unwrap().values.len(), 5);
        for bad in ["scale=0.1;sigma=1", "scale=0=1", "bogus=1", "scale="] {
            assert!(matches!(Sweep::parse(bad), Err(Error::InvalidParameter(_))), "{bad}");
        }
    }
}

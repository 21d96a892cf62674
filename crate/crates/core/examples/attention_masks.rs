//! One noised procedural image through an attention denoiser: the pooled
//! attention map, the masks of every strategy at the same coverage, and the
//! selectively blurred input that SAG feeds back to the model. Heatmaps and
//! masks are written as PNGs.

use std::fs;
use std::path::Path;

use guidance_lab::attention_mask::{
    aggregate_layer, selective_blur_input, strategy_mask, threshold_mask, GapAxis, MaskContext, MaskStrategy,
};
use guidance_lab::denoiser::{Denoiser, TinyConfig, TinyDenoiser};
use guidance_lab::diffusion::{forward_diffuse, predict_x0, NoiseSchedule};
use guidance_lab::eval::{procedural_dataset, ProceduralSpec};
use guidance_lab::numerics::{standard_normal, tile_png, RngStream};

/// Returns `(strategy, masked fraction)` for each strategy.
pub fn run(out: Option<&Path>, seed: u64) -> Vec<(MaskStrategy, f64)> {
    let sched = NoiseSchedule::linear_scaled(100).unwrap();
    let model = TinyDenoiser::new(TinyConfig::default(), seed).unwrap();
    let item = &procedural_dataset(1, seed, &ProceduralSpec::default()).unwrap()[0];
    let mut rng = RngStream::new(seed, 1);
    let t = 40;
    let x_t = forward_diffuse(&item.image, t, &standard_normal(&mut rng, (1, 16, 16)), &sched).unwrap();

    let pred = model.predict(&x_t, t, None).unwrap();
    let stack = pred.attention.expect("tiny model exposes attention");
    let attn = aggregate_layer(&stack, 0, 16, 16, GapAxis::Key).unwrap();
    let sa_mask = threshold_mask(&attn, 1.0);
    let x0_hat = predict_x0(&x_t, &pred.eps, t, &sched).unwrap();
    let ctx = MaskContext {
        height: 16,
        width: 16,
        attention: Some(&attn),
        x0_hat: Some(&x0_hat),
        psi: 1.0,
    };
    let mut masks = Vec::new();
    for kind in MaskStrategy::ALL {
        let m = strategy_mask(kind, &ctx, sa_mask.fraction(), &mut rng).unwrap();
        masks.push((kind, m));
    }
    let blurred = selective_blur_input(&x_t, &pred.eps, &sa_mask, 1.0, t, &sched).unwrap();

    if let Some(dir) = out {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join("attention.png"), attn.to_png().unwrap()).unwrap();
        for (kind, m) in &masks {
            fs::write(dir.join(format!("mask_{}.png", kind.name())), m.to_png().unwrap()).unwrap();
        }
        let strip = tile_png(&[item.image.clone(), x_t.clone(), blurred.clone()], 3).unwrap();
        fs::write(dir.join("clean_noised_blurred.png"), strip).unwrap();
    }
    masks.into_iter().map(|(k, m)| (k, m.fraction())).collect()
}

fn main() {
    let dir = Path::new("target/attention-masks");
    for (kind, frac) in run(Some(dir), 0) {
        println!("{:<15} masked {:.3}", kind.name(), frac);
    }
    println!("images written to {}", dir.display());
}

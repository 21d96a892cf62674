//! Trains the attention denoiser on procedural textured-blob images and saves
//! a checkpoint that `glab sample --checkpoint` can read.

use std::path::Path;

use guidance_lab::denoiser::checkpoint::{save, SavedModel};
use guidance_lab::denoiser::{train, DataItem, TinyConfig, TinyDenoiser, TrainConfig};
use guidance_lab::diffusion::NoiseSchedule;
use guidance_lab::eval::{procedural_dataset, ProceduralSpec};

/// Returns the model and the mean loss of the first and last 10% of steps.
pub fn run(steps: usize, seed: u64) -> (SavedModel, f64, f64) {
    let sched = NoiseSchedule::linear_scaled(100).unwrap();
    let data: Vec<DataItem> = procedural_dataset(512, seed, &ProceduralSpec::default())
        .unwrap()
        .iter()
        .map(|s| s.to_item())
        .collect();
    let config = TinyConfig {
        num_classes: 2,
        ..TinyConfig::default()
    };
    let mut model = SavedModel::Tiny(TinyDenoiser::new(config, seed).unwrap());
    let cfg = TrainConfig {
        steps,
        seed,
        ..TrainConfig::default()
    };
    let (head, tail) = train(&mut model, &data, &sched, &cfg).unwrap().window_means();
    (model, head, tail)
}

fn main() {
    let steps = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2000);
    let (model, head, tail) = run(steps, 0);
    println!("{steps} steps: loss {head:.4} -> {tail:.4}");
    let dir = Path::new("target/tiny-checkpoint");
    save(&model, dir).unwrap();
    println!("checkpoint written to {}", dir.display());
}

//! Reverse sampling with the exact score of a two-component Gaussian mixture,
//! compared with fresh data draws by energy distance.

use guidance_lab::denoiser::OracleDenoiser;
use guidance_lab::diffusion::{NoiseSchedule, VarianceMode};
use guidance_lab::eval::{energy_distance, mixture_2d};
use guidance_lab::guidance::{sample, GuidanceConfig};
use guidance_lab::numerics::RngStream;

pub fn run(n: usize, seed: u64) -> f64 {
    let mix = mixture_2d();
    let sched = NoiseSchedule::linear_scaled(100).unwrap();
    let model = OracleDenoiser::new(mix.clone(), sched.clone(), VarianceMode::FixedBeta).unwrap();
    let run = sample(&model, &sched, &GuidanceConfig::unguided(), n, seed).unwrap();
    let data: Vec<_> = mix
        .sample(n, &mut RngStream::new(seed, 0xda7a))
        .unwrap()
        .into_iter()
        .map(|d| d.x0)
        .collect();
    energy_distance(&run.samples, &data).unwrap()
}

fn main() {
    let n = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4000);
    println!("energy distance, {n} oracle samples vs {n} data draws: {:.4}", run(n, 0));
}

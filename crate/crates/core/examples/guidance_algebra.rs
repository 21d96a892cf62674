//! The guidance combinators on random noise predictions: classifier-free
//! guidance is generalized guidance with the class as the withheld signal,
//! the fused update with a zero self-attention scale is plain CFG, and every
//! combinator returns its informed input at scale zero.

use guidance_lab::guidance::{cfg_guide, fused_sag_cfg, generalized_guide};
use guidance_lab::numerics::{standard_normal, RngStream};

pub fn run(instances: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let cond = standard_normal(&mut rng, (1, 8, 8));
        let uncond = standard_normal(&mut rng, (1, 8, 8));
        let degraded = standard_normal(&mut rng, (1, 8, 8));
        let s = rng.uniform_range(-1.0, 5.0);

        let a = cfg_guide(&cond, &uncond, s).unwrap();
        let b = generalized_guide(&cond, &uncond, s).unwrap();
        let c = fused_sag_cfg(&cond, &uncond, &degraded, s, 0.0).unwrap();
        worst = worst.max(a.max_abs_diff(&b)).max(a.max_abs_diff(&c));

        assert_eq!(generalized_guide(&cond, &uncond, 0.0).unwrap(), cond);
    }
    worst
}

fn main() {
    let worst = run(1000, 0);
    println!("largest disagreement over 1000 instances: {worst:e}");
}

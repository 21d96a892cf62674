//! On a labeled mixture the gradient of the noisy class posterior, scaled by
//! the noise level, equals the gap between unconditional and class-conditional
//! noise predictions. Classifier guidance and the generalized form then agree.

use guidance_lab::denoiser::{oracle_class_posterior, oracle_epsilon};
use guidance_lab::diffusion::NoiseSchedule;
use guidance_lab::eval::mixture_2d;
use guidance_lab::guidance::{classifier_guide, generalized_guide};
use guidance_lab::numerics::{Grid, RngStream};

/// Largest `(identity gap, guidance gap)` over `points` random `(x, t)`.
pub fn run(points: usize, seed: u64) -> (f64, f64) {
    let mix = mixture_2d();
    let sched = NoiseSchedule::linear_scaled(100).unwrap();
    let mut rng = RngStream::new(seed, 0);
    let (mut identity, mut guide) = (0.0f64, 0.0f64);
    for _ in 0..points {
        let t = 1 + rng.below(100);
        let x = Grid::vector(vec![rng.uniform_range(-3.0, 3.0), rng.uniform_range(-3.0, 3.0)]).unwrap();
        let class = rng.below(2);
        let sigma = sched.noise_std(t);

        let post = oracle_class_posterior(&x, t, &sched, &mix).unwrap();
        let eps = oracle_epsilon(&x, t, &sched, &mix, None).unwrap();
        let eps_c = oracle_epsilon(&x, t, &sched, &mix, Some(class)).unwrap();
        let lhs = post.grad_log[class].scale(sigma);
        let rhs = eps_c.sub(&eps).unwrap().scale(-1.0);
        identity = identity.max(lhs.max_abs_diff(&rhs));

        let s = 3.0;
        let cg = classifier_guide(&eps, &post.grad_log[class], s, sigma).unwrap();
        // classifier guidance at scale s moves along (ε_c − ε), i.e. generalized guidance at s − 1
        let gg = generalized_guide(&eps_c, &eps, s - 1.0).unwrap();
        guide = guide.max(cg.max_abs_diff(&gg));
    }
    (identity, guide)
}

fn main() {
    let (identity, guide) = run(100, 0);
    println!("posterior-gradient identity: max gap {identity:e}");
    println!("classifier vs generalized guidance: max gap {guide:e}");
}

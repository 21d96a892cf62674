use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Grid;

/// Counter-based random stream addressed by `(seed, stream_id, counter)`.
///
/// Backed by ChaCha8, whose keystream is a pure function of the key (seed),
/// the stream number and the 128-bit word position. Two streams with the same
/// address produce the same sequence; distinct stream ids are independent.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// Resumes a stream at an explicit word position.
    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut s = Self::new(seed, stream_id);
        s.inner.set_word_pos(counter as u128);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    /// A fresh stream keyed off this one's address and `tag`. Does not advance `self`.
    pub fn derive(&self, tag: u64) -> RngStream {
        let id = splitmix64(self.stream_id ^ splitmix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d)));
        RngStream::new(self.seed, id)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

/// `N(0, I)` grid drawn from `rng`.
pub fn standard_normal(rng: &mut RngStream, shape: (usize, usize, usize)) -> Grid {
    let (c, h, w) = shape;
    let data = (0..c * h * w).map(|_| rng.normal()).collect();
    Grid::from_raw(c, h, w, data)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_address_same_sequence() {
        let a = standard_normal(&mut RngStream::new(7, 3), (1, 4, 4));
        let b = standard_normal(&mut RngStream::new(7, 3), (1, 4, 4));
        assert_eq!(a, b);
    }

    #[test]
    fn resume_from_counter() {
        let mut a = RngStream::new(11, 2);
        let _ = standard_normal(&mut a, (1, 1, 37));
        let pos = a.counter();
        let next_a = a.normal();
        let mut b = RngStream::at(11, 2, pos);
        assert_eq!(next_a.to_bits(), b.normal().to_bits());
    }

    #[test]
    fn moments_within_five_standard_errors() {
        let n = 1_000_000;
        let g = standard_normal(&mut RngStream::new(2024, 0), (n, 1, 1));
        let mean = g.mean();
        let var = g.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        let se_mean = (1.0 / n as f64).sqrt();
        // Var of the sample variance of a standard normal is 2/(n-1).
        let se_var = (2.0 / (n as f64 - 1.0)).sqrt();
        assert!(mean.abs() < 5.0 * se_mean, "mean {mean}");
        assert!((var - 1.0).abs() < 5.0 * se_var, "var {var}");
    }

    #[test]
    fn distinct_streams_uncorrelated() {
        let n = 100_000;
        let a = standard_normal(&mut RngStream::new(5, 0), (n, 1, 1));
        let b = standard_normal(&mut RngStream::new(5, 1), (n, 1, 1));
        let (ma, mb) = (a.mean(), b.mean());
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        let r = sab / (saa * sbb).sqrt();
        assert!(r.abs() < 0.01, "correlation {r}");
    }

    #[test]
    fn derive_does_not_advance_parent() {
        let parent = RngStream::new(1, 9);
        let before = parent.counter();
        let mut child = parent.derive(4);
        let _ = child.normal();
        assert_eq!(parent.counter(), before);
        assert_ne!(child.stream_id(), parent.stream_id());
    }
}

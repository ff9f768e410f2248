//! Seeded randomness.
//!
//! All stochastic choices in a run (initialization, shuffling, dropout masks,
//! reparameterization noise) come from [`Rng`] streams derived from the run
//! seed, so identical seeds and call sequences give identical values on every
//! platform.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::graph::Matrix;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for `label`, a pure function of `(seed, label)`.
    pub fn derive(seed: u64, label: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(fnv1a(label));
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_shape_simple_fn((rows, cols), || self.normal())
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_shape_simple_fn((rows, cols), || self.uniform())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

/// Source of the random draws used by stochastic layers.
pub trait NoiseSource {
    /// Uniform `[0, 1)` draws, used for dropout masks.
    fn uniform(&mut self, rows: usize, cols: usize) -> Matrix;
    /// Standard normal draws, used for reparameterization.
    fn normal(&mut self, rows: usize, cols: usize) -> Matrix;
}

impl NoiseSource for Rng {
    fn uniform(&mut self, rows: usize, cols: usize) -> Matrix {
        self.uniform_matrix(rows, cols)
    }

    fn normal(&mut self, rows: usize, cols: usize) -> Matrix {
        self.normal_matrix(rows, cols)
    }
}

/// Replaces reparameterization noise with zeros; dropout still draws from
/// the wrapped source.
pub struct ZeroNoise<'a, N: NoiseSource + ?Sized>(pub &'a mut N);

impl<N: NoiseSource + ?Sized> NoiseSource for ZeroNoise<'_, N> {
    fn uniform(&mut self, rows: usize, cols: usize) -> Matrix {
        self.0.uniform(rows, cols)
    }

    fn normal(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::zeros((rows, cols))
    }
}

/// Records draws on first use and replays them after [`rewind`], so a
/// stochastic forward pass can be re-evaluated with frozen noise.
///
/// [`rewind`]: ReplayNoise::rewind
pub struct ReplayNoise {
    rng: Rng,
    draws: Vec<Matrix>,
    cursor: usize,
}

impl ReplayNoise {
    pub fn new(rng: Rng) -> Self {
        Self {
            rng,
            draws: Vec::new(),
            cursor: 0,
        }
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    fn next(&mut self, rows: usize, cols: usize, gen: impl FnOnce(&mut Rng) -> Matrix) -> Matrix {
        if self.cursor == self.draws.len() {
            let m = gen(&mut self.rng);
            self.draws.push(m);
        }
        let m = self.draws[self.cursor].clone();
        assert_eq!(m.dim(), (rows, cols), "replayed draw shape changed");
        self.cursor += 1;
        m
    }
}

impl NoiseSource for ReplayNoise {
    fn uniform(&mut self, rows: usize, cols: usize) -> Matrix {
        self.next(rows, cols, |r| r.uniform_matrix(rows, cols))
    }

    fn normal(&mut self, rows: usize, cols: usize) -> Matrix {
        self.next(rows, cols, |r| r.normal_matrix(rows, cols))
    }
}

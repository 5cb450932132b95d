use rand::seq::SliceRandom;
use rand::Rng;

/// Heavy-ball SGD: `v <- momentum * v + g; theta <- theta - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, dim: usize) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        for ((t, v), g) in theta.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g;
            *t -= self.lr * *v;
        }
    }
}

/// Shuffled index batches covering `0..n` once.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn momentum_accumulates() {
        let mut opt = Sgd::new(0.1, 0.9, 1);
        let mut th = [1.0];
        opt.step(&mut th, &[1.0]);
        assert!((th[0] - 0.9).abs() < 1e-15);
        opt.step(&mut th, &[1.0]);
        assert!((th[0] - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn batches_cover_everything_once() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let b = minibatches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}

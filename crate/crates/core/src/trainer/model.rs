//! Toy objectives with seeded synthetic data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baseline::shared_seed;
use crate::error::{CovapError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    LinearRegression,
    LogisticRegression,
    TwoLayerMlp,
}

/// Stream tags so data, teacher and init draws never share a seed.
const TEACHER: u64 = 1;
const SHARD: u64 = 2;
const INIT: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub kind: ToyKind,
    pub input_dim: usize,
    /// Hidden width; only used by the MLP.
    pub hidden: usize,
}

/// One worker's local samples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub rows: usize,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Four interleaved partial sums; independent chains let the loop pipeline.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl ToyModel {
    pub fn new(kind: ToyKind, input_dim: usize, hidden: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(CovapError::invalid("input_dim must be at least 1"));
        }
        if kind == ToyKind::TwoLayerMlp && hidden == 0 {
            return Err(CovapError::invalid("two-layer-mlp needs hidden >= 1"));
        }
        Ok(ToyModel {
            kind,
            input_dim,
            hidden,
        })
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ToyKind::LinearRegression | ToyKind::LogisticRegression => self.input_dim,
            // W1 (hidden x input), b1, w2, b2
            ToyKind::TwoLayerMlp => self.hidden * self.input_dim + 2 * self.hidden + 1,
        }
    }

    /// Identical on every worker for a given seed.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(shared_seed(seed, INIT, 0));
        match self.kind {
            ToyKind::LinearRegression | ToyKind::LogisticRegression => {
                vec![0.0; self.param_count()]
            }
            ToyKind::TwoLayerMlp => {
                let s1 = 1.0 / (self.input_dim as f64).sqrt();
                let s2 = 1.0 / (self.hidden as f64).sqrt();
                let (h, d) = (self.hidden, self.input_dim);
                let mut p = Vec::with_capacity(self.param_count());
                p.extend((0..h * d).map(|_| s1 * normal(&mut rng)));
                p.extend(std::iter::repeat_n(0.0, h));
                p.extend((0..h).map(|_| s2 * normal(&mut rng)));
                p.push(0.0);
                p
            }
        }
    }

    /// Synthetic shard for `worker`: Gaussian inputs and a fixed linear
    /// teacher shared by all workers, plus label noise.
    pub fn make_shard(&self, seed: u64, worker: usize, rows: usize, noise: f64) -> Shard {
        let d = self.input_dim;
        let mut teacher_rng = ChaCha8Rng::seed_from_u64(shared_seed(seed, TEACHER, 0));
        let teacher: Vec<f64> = (0..d).map(|_| normal(&mut teacher_rng)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shared_seed(seed, SHARD, worker));
        let mut x = Vec::with_capacity(rows * d);
        let mut y = Vec::with_capacity(rows);
        for _ in 0..rows {
            let row: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let z = dot(&row, &teacher);
            let eps = noise * normal(&mut rng);
            y.push(match self.kind {
                ToyKind::LogisticRegression => f64::from(u8::from(z + eps > 0.0)),
                ToyKind::LinearRegression => z + eps,
                // Keep the MLP target in tanh's useful range.
                ToyKind::TwoLayerMlp => z / (d as f64).sqrt() + eps,
            });
            x.extend(row);
        }
        Shard { x, y, rows }
    }

    /// Mean loss and its gradient over the shard.
    pub fn loss_grad(&self, params: &[f64], shard: &Shard) -> (f64, Vec<f64>) {
        let d = self.input_dim;
        let n = shard.rows.max(1) as f64;
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        match self.kind {
            ToyKind::LinearRegression => {
                for (row, &y) in shard.x.chunks_exact(d).zip(&shard.y) {
                    let r = dot(row, params) - y;
                    loss += 0.5 * r * r;
                    for (g, a) in grad.iter_mut().zip(row) {
                        *g += r * a;
                    }
                }
            }
            ToyKind::LogisticRegression => {
                for (row, &y) in shard.x.chunks_exact(d).zip(&shard.y) {
                    let z = dot(row, params);
                    // log(1 + e^z) - y z, written to stay finite for large |z|
                    loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
                    let r = sigmoid(z) - y;
                    for (g, a) in grad.iter_mut().zip(row) {
                        *g += r * a;
                    }
                }
            }
            ToyKind::TwoLayerMlp => {
                let h = self.hidden;
                let (w1, rest) = params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h);
                let mut act = vec![0.0; h];
                for (row, &y) in shard.x.chunks_exact(d).zip(&shard.y) {
                    for j in 0..h {
                        let z = dot(&w1[j * d..(j + 1) * d], row);
                        act[j] = (z + b1[j]).tanh();
                    }
                    let out = dot(&act, w2) + b2[0];
                    let r = out - y;
                    loss += 0.5 * r * r;
                    let (gw1, grest) = grad.split_at_mut(h * d);
                    let (gb1, grest) = grest.split_at_mut(h);
                    let (gw2, gb2) = grest.split_at_mut(h);
                    gb2[0] += r;
                    for j in 0..h {
                        gw2[j] += r * act[j];
                        let delta = r * w2[j] * (1.0 - act[j] * act[j]);
                        gb1[j] += delta;
                        for (g, a) in gw1[j * d..(j + 1) * d].iter_mut().zip(row) {
                            *g += delta * a;
                        }
                    }
                }
            }
        }
        for g in &mut grad {
            *g /= n;
        }
        (loss / n, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(m: &ToyModel, p: &[f64], s: &Shard) -> Vec<f64> {
        let h = 1e-6;
        (0..p.len())
            .map(|i| {
                let mut hi = p.to_vec();
                let mut lo = p.to_vec();
                hi[i] += h;
                lo[i] -= h;
                (m.loss_grad(&hi, s).0 - m.loss_grad(&lo, s).0) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [
            ToyKind::LinearRegression,
            ToyKind::LogisticRegression,
            ToyKind::TwoLayerMlp,
        ] {
            let m = ToyModel::new(kind, 5, 3).unwrap();
            let shard = m.make_shard(11, 0, 20, 0.1);
            let mut p = m.init_params(3);
            for (i, v) in p.iter_mut().enumerate() {
                *v += 0.05 * (i as f64).sin();
            }
            let (_, g) = m.loss_grad(&p, &shard);
            let num = numeric_grad(&m, &p, &shard);
            for (a, b) in g.iter().zip(&num) {
                assert!((a - b).abs() < 1e-5, "{kind:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn shards_are_seeded_per_worker() {
        let m = ToyModel::new(ToyKind::LinearRegression, 4, 0).unwrap();
        assert_eq!(m.make_shard(1, 0, 8, 0.1), m.make_shard(1, 0, 8, 0.1));
        assert_ne!(m.make_shard(1, 0, 8, 0.1), m.make_shard(1, 1, 8, 0.1));
        assert_eq!(m.param_count(), 4);
        let mlp = ToyModel::new(ToyKind::TwoLayerMlp, 4, 3).unwrap();
        assert_eq!(mlp.param_count(), 12 + 7);
        assert_eq!(mlp.init_params(5).len(), 19);
    }
}

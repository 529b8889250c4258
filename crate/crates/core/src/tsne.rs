//! Exact t-SNE and a k-nearest-neighbour two-sample separation score.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// Step size; `None` picks `max(n / exaggeration / 4, 50)`.
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: None,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

/// Conditional affinities of row `i` for precision `beta`; returns the entropy.
fn row_affinities(d2: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    for (j, (&d, o)) in d2.iter().zip(out.iter_mut()).enumerate() {
        *o = if j == i { 0.0 } else { (-d * beta).exp() };
        sum += *o;
    }
    if sum <= 0.0 {
        // All neighbours infinitely far at this precision: spread uniformly.
        let n = out.len() - 1;
        for (j, o) in out.iter_mut().enumerate() {
            *o = if j == i { 0.0 } else { 1.0 / n as f64 };
        }
        return (n as f64).ln();
    }
    let mut h = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        if j != i {
            h += beta * d2[j] * *o;
        }
        *o /= sum;
    }
    sum.ln() + h / sum
}

/// Symmetrized joint affinities `P` with each row calibrated to the perplexity.
fn joint_affinities(points: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = points.len();
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d2[i * n + j] = d;
            d2[j * n + i] = d;
        }
    }
    let target = perplexity.min((n - 1) as f64).ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &d2[i * n..(i + 1) * n];
        let out = &mut p[i * n..(i + 1) * n];
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        for _ in 0..64 {
            let h = row_affinities(row, i, beta, out);
            if (h - target).abs() < 1e-6 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_infinite() { beta * 2.0 } else { (beta + hi) / 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    joint
}

/// Embeds `points` (all of equal dimension) in two dimensions.
pub fn tsne(points: &[Vec<f64>], config: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    ensure_input!(n >= 2, "t-SNE needs at least two points");
    ensure_input!(config.perplexity > 0.0, "perplexity must be positive");
    let dim = points[0].len();
    ensure_input!(points.iter().all(|p| p.len() == dim), "points must share one dimension");
    ensure_input!(
        points.iter().all(|p| p.iter().all(|v| v.is_finite())),
        "points must be finite"
    );
    let p = joint_affinities(points, config.perplexity);
    let mut r = rng::rng(config.seed);
    let init: Vec<f64> = rng::normal_vec(&mut r, 2 * n);
    let mut y: Vec<[f64; 2]> = (0..n).map(|i| [init[2 * i] * 1e-4, init[2 * i + 1] * 1e-4]).collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0f64; 2]; n];
    let lr = config
        .learning_rate
        .unwrap_or_else(|| (n as f64 / config.early_exaggeration / 4.0).max(50.0));
    for it in 0..config.iterations {
        let exaggeration = if it < config.exaggeration_iters {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if it < config.exaggeration_iters { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let m = (exaggeration * p[i * n + j] - q / z) * q;
                g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                g[1] += 4.0 * m * (y[i][1] - y[j][1]);
            }
            grad[i] = g;
        }
        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grad[i][d] > 0.0) == (velocity[i][d] > 0.0);
                gains[i][d] = if same_sign { gains[i][d] * 0.8 } else { gains[i][d] + 0.2 };
                gains[i][d] = gains[i][d].max(0.01);
                velocity[i][d] = momentum * velocity[i][d] - lr * gains[i][d] * grad[i][d];
                y[i][d] += velocity[i][d];
            }
        }
        let mean = y.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        for p in &mut y {
            p[0] -= mean[0] / n as f64;
            p[1] -= mean[1] / n as f64;
        }
    }
    Ok(y)
}

/// Held-out accuracy of a k-nearest-neighbour classifier telling label 0 from label 1.
///
/// Each label is split in half by a seeded shuffle; the first halves form the
/// reference set and the rest are classified by majority vote over the `k`
/// nearest references, widened to include every reference tied with the
/// `k`-th distance. A tied vote scores half a point. Values near 0.5 mean
/// the two sets are hard to tell apart.
pub fn separation_score(points: &[[f64; 2]], labels: &[bool], k: usize, seed: u64) -> Result<f64> {
    ensure_input!(points.len() == labels.len(), "one label per point required");
    ensure_input!(k >= 1, "k must be at least 1");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [false, true] {
        let idx: Vec<usize> = (0..points.len()).filter(|&i| labels[i] == class).collect();
        ensure_input!(idx.len() >= 2, "each label needs at least two points");
        // Same seed for both labels: equal-sized paired sets split alike.
        let perm = rng::permutation(&mut rng::rng(seed), idx.len());
        let half = idx.len() / 2;
        for (rank, &p) in perm.iter().enumerate() {
            if rank < half {
                train.push(idx[p]);
            } else {
                test.push(idx[p]);
            }
        }
    }
    let k = k.min(train.len());
    let mut score = 0.0;
    let mut dists: Vec<(f64, bool)> = Vec::with_capacity(train.len());
    for &t in &test {
        dists.clear();
        for &j in &train {
            let dx = points[t][0] - points[j][0];
            let dy = points[t][1] - points[j][1];
            dists.push((dx * dx + dy * dy, labels[j]));
        }
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
        let cutoff = dists[k - 1].0;
        let (mut ones, mut zeros) = (0usize, 0usize);
        for &(_, l) in dists.iter().take_while(|x| x.0 <= cutoff) {
            if l {
                ones += 1;
            } else {
                zeros += 1;
            }
        }
        score += match ones.cmp(&zeros) {
            core::cmp::Ordering::Equal => 0.5,
            core::cmp::Ordering::Greater => labels[t] as u8 as f64,
            core::cmp::Ordering::Less => (!labels[t]) as u8 as f64,
        };
    }
    Ok(score / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, gap: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut r = rng::rng(seed);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2 == 1;
            let v: Vec<f64> = rng::normal_vec(&mut r, 5);
            pts.push(v.iter().enumerate().map(|(d, x)| x + if c && d == 0 { gap } else { 0.0 }).collect());
            labels.push(c);
        }
        (pts, labels)
    }

    #[test]
    fn separated_clusters_stay_apart() {
        let (pts, labels) = blobs(80, 12.0, 1);
        let cfg = TsneConfig {
            iterations: 400,
            perplexity: 10.0,
            ..TsneConfig::default()
        };
        let y = tsne(&pts, &cfg).unwrap();
        assert_eq!(y.len(), 80);
        assert!(y.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
        let s = separation_score(&y, &labels, 10, 0).unwrap();
        assert!(s > 0.95, "{s}");
        assert_eq!(tsne(&pts, &cfg).unwrap(), y);
    }

    #[test]
    fn identical_sets_are_inseparable() {
        let mut r = rng::rng(3);
        let base: Vec<[f64; 2]> = (0..200)
            .map(|_| {
                let v: Vec<f64> = rng::normal_vec(&mut r, 2);
                [v[0], v[1]]
            })
            .collect();
        let points: Vec<[f64; 2]> = base.iter().chain(&base).copied().collect();
        let labels: Vec<bool> = (0..400).map(|i| i >= 200).collect();
        let s = separation_score(&points, &labels, 10, 7).unwrap();
        assert!((s - 0.5).abs() <= 0.05, "{s}");
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(tsne(&[vec![0.0]], &TsneConfig::default()).is_err());
        assert!(separation_score(&[[0.0, 0.0]; 3], &[true, true, false], 1, 0).is_err());
    }
}

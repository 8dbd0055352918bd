//! Exact (O(N²)) t-SNE for small probe-point sets.
//!
//! Per-point Gaussian bandwidths are found by bisection so each
//! conditional distribution's Shannon entropy matches `ln(perplexity)`;
//! affinities are symmetrized and the 2-D map is optimized by gradient
//! descent with momentum and early exaggeration. The point counts here are
//! a few dozen, so no Barnes-Hut approximation is involved and every run
//! is exactly reproducible from the seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum_start: f64,
    pub momentum_final: f64,
    /// Iteration at which momentum switches from start to final.
    pub momentum_switch: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl TsneConfig {
    pub fn with_seed(seed: u64) -> Self {
        TsneConfig {
            perplexity: 15.0,
            iterations: 1000,
            learning_rate: 200.0,
            momentum_start: 0.5,
            momentum_final: 0.8,
            momentum_switch: 250,
            exaggeration: 4.0,
            exaggeration_iters: 100,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.perplexity > 0.0 && self.perplexity.is_finite()) {
            return Err(Error::Config(format!("perplexity {}", self.perplexity)));
        }
        if self.iterations == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "iterations and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// Kullback-Leibler divergence before the first update and after every
    /// iteration, always measured against the unexaggerated affinities.
    pub kl_history: Vec<f64>,
    /// True when duplicate inputs forced a deterministic 1e-9 jitter;
    /// callers should warn.
    pub jittered: bool,
}

const P_FLOOR: f64 = 1e-12;

fn squared_distances(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2[i * n + j] = s;
            d2[j * n + i] = s;
        }
    }
    d2
}

/// Conditional affinities `p_{j|i}` (row-stochastic), with the per-point
/// precision and achieved entropy for each row.
pub fn conditional_affinities(
    points: &[Vec<f64>],
    perplexity: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = points.len();
    let d2 = squared_distances(points);
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut betas = vec![1.0; n];
    let mut entropies = vec![0.0; n];

    for i in 0..n {
        let mut beta = 1.0;
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        let mut row = vec![0.0; n];
        for _ in 0..200 {
            // Gaussian kernel row at the current precision, excluding self
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if j == i {
                    0.0
                } else {
                    (-beta * d2[i * n + j]).exp()
                };
                sum += row[j];
            }
            if sum <= 0.0 {
                return Err(Error::Numeric(format!(
                    "affinity row {i} collapsed at precision {beta}"
                )));
            }
            let mut h = 0.0;
            for v in &mut row {
                *v /= sum;
                if *v > 0.0 {
                    h -= *v * v.ln();
                }
            }
            entropies[i] = h;
            let diff = h - target;
            if diff.abs() < 1e-4 {
                break;
            }
            if diff > 0.0 {
                // entropy too high: sharpen
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        betas[i] = beta;
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    Ok((p, betas, entropies))
}

fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, qv)| pv * (pv / qv.max(P_FLOOR)).ln())
        .sum()
}

/// Student-t map affinities Q and the unnormalized kernel values.
fn map_affinities(y: &[[f64; 2]]) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let k = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = k;
            num[j * n + i] = k;
            sum += 2.0 * k;
        }
    }
    let q: Vec<f64> = num.iter().map(|v| v / sum).collect();
    (q, num)
}

/// Exact t-SNE on `points`; returns 2-D coordinates and the KL trace.
pub fn tsne(points: &[Vec<f64>], config: &TsneConfig) -> Result<TsneResult> {
    config.validate()?;
    let n = points.len();
    if n < 5 {
        return Err(Error::Contract(format!("t-SNE needs at least 5 points, got {n}")));
    }
    let m = points[0].len();
    for (i, pt) in points.iter().enumerate() {
        if pt.len() != m {
            return Err(Error::Shape(format!(
                "point {i} has {} coordinates, expected {m}",
                pt.len()
            )));
        }
        if pt.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("point {i} is non-finite")));
        }
    }

    // Duplicate inputs give a degenerate bandwidth search; jitter
    // deterministically and report it.
    let mut work: Vec<Vec<f64>> = points.to_vec();
    let d2 = squared_distances(&work);
    let has_dup = (0..n).any(|i| (0..i).any(|j| d2[i * n + j] == 0.0));
    if has_dup {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4a49_5454);
        for pt in &mut work {
            for v in pt.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += 1e-9 * z;
            }
        }
    }

    let (cond, _, _) = conditional_affinities(&work, config.perplexity)?;
    // symmetrize: p_ij = (p_{j|i} + p_{i|j}) / 2N
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            [1e-4 * a, 1e-4 * b]
        })
        .collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut kl_history = Vec::with_capacity(config.iterations + 1);
    let (q0, _) = map_affinities(&y);
    kl_history.push(kl_divergence(&p, &q0));

    for iter in 0..config.iterations {
        let exaggerate = if iter < config.exaggeration_iters {
            config.exaggeration
        } else {
            1.0
        };
        let momentum = if iter < config.momentum_switch {
            config.momentum_start
        } else {
            config.momentum_final
        };
        let (q, num) = map_affinities(&y);
        for i in 0..n {
            let mut g = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let pij = exaggerate * p[i * n + j];
                let coeff = 4.0 * (pij - q[i * n + j]) * num[i * n + j];
                g[0] += coeff * (y[i][0] - y[j][0]);
                g[1] += coeff * (y[i][1] - y[j][1]);
            }
            velocity[i][0] = momentum * velocity[i][0] - config.learning_rate * g[0];
            velocity[i][1] = momentum * velocity[i][1] - config.learning_rate * g[1];
        }
        let mut mean = [0.0f64; 2];
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
            mean[0] += y[i][0];
            mean[1] += y[i][1];
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        for pt in &mut y {
            pt[0] -= mean[0];
            pt[1] -= mean[1];
            if !pt[0].is_finite() || !pt[1].is_finite() {
                return Err(Error::Numeric(format!(
                    "t-SNE diverged at iteration {iter}"
                )));
            }
        }
        let (q_after, _) = map_affinities(&y);
        kl_history.push(kl_divergence(&p, &q_after));
    }

    Ok(TsneResult {
        coords: y,
        kl_history,
        jittered: has_dup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_points(n: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    #[test]
    fn bandwidths_hit_target_entropy() {
        let pts = random_points(50, 10, 3);
        let (p, _, entropies) = conditional_affinities(&pts, 15.0).unwrap();
        let target = 15.0f64.ln();
        for (i, h) in entropies.iter().enumerate() {
            assert!((h - target).abs() < 1e-4, "point {i}: entropy {h}");
        }
        // rows are stochastic
        let n = 50;
        for i in 0..n {
            let s: f64 = p[i * n..(i + 1) * n].iter().sum();
            assert!((s - 1.0).abs() < 1e-10, "row {i} sums to {s}");
        }
    }

    #[test]
    fn symmetrized_affinities_sum_to_one() {
        let pts = random_points(30, 8, 11);
        let n = pts.len();
        let (cond, _, _) = conditional_affinities(&pts, 15.0).unwrap();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                total += (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
            }
        }
        assert!((total - 1.0).abs() < 1e-10, "sum {total}");
    }

    #[test]
    fn kl_decreases_on_random_input_for_ten_seeds() {
        for seed in 0..10 {
            let pts = random_points(30, 10, 100 + seed);
            let config = TsneConfig::with_seed(seed);
            let result = tsne(&pts, &config).unwrap();
            let first = result.kl_history[0];
            let last = *result.kl_history.last().unwrap();
            assert!(
                last < first,
                "seed {seed}: KL went {first} -> {last}"
            );
        }
    }

    /// Mean silhouette over both clusters given a 2-cluster labeling.
    fn silhouette(coords: &[[f64; 2]], labels: &[usize]) -> f64 {
        let n = coords.len();
        let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let mut total = 0.0;
        for i in 0..n {
            let (mut intra, mut intra_n) = (0.0, 0);
            let (mut inter, mut inter_n) = (0.0, 0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                if labels[i] == labels[j] {
                    intra += dist(coords[i], coords[j]);
                    intra_n += 1;
                } else {
                    inter += dist(coords[i], coords[j]);
                    inter_n += 1;
                }
            }
            let a = intra / intra_n as f64;
            let b = inter / inter_n as f64;
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    #[test]
    fn separated_clusters_stay_separated() {
        // intra spread ~1, inter distance 10
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..10 {
                let center = 10.0 * c as f64;
                pts.push(
                    (0..5)
                        .map(|k| {
                            let z: f64 = rng.sample(StandardNormal);
                            if k == 0 {
                                center + 0.5 * z
                            } else {
                                0.5 * z
                            }
                        })
                        .collect::<Vec<f64>>(),
                );
                labels.push(c);
            }
        }
        let mut config = TsneConfig::with_seed(2);
        config.perplexity = 5.0; // 20 points
        let result = tsne(&pts, &config).unwrap();
        let s = silhouette(&result.coords, &labels);
        assert!(s > 0.5, "silhouette {s}");
    }

    #[test]
    fn duplicates_are_jittered_and_reported() {
        let mut pts = random_points(10, 4, 5);
        pts[3] = pts[7].clone();
        let mut config = TsneConfig::with_seed(1);
        config.perplexity = 3.0;
        config.iterations = 50;
        let result = tsne(&pts, &config).unwrap();
        assert!(result.jittered);
        assert!(result.coords.iter().all(|c| c[0].is_finite() && c[1].is_finite()));
        // and a clean run does not report jitter
        let clean = tsne(&random_points(10, 4, 6), &config).unwrap();
        assert!(!clean.jittered);
    }

    #[test]
    fn too_few_points_rejected() {
        let pts = random_points(4, 3, 1);
        assert!(matches!(
            tsne(&pts, &TsneConfig::with_seed(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn runs_are_reproducible() {
        let pts = random_points(12, 6, 9);
        let mut config = TsneConfig::with_seed(4);
        config.iterations = 100;
        config.perplexity = 3.0;
        let a = tsne(&pts, &config).unwrap();
        let b = tsne(&pts, &config).unwrap();
        for (ca, cb) in a.coords.iter().zip(&b.coords) {
            assert_eq!(ca[0].to_bits(), cb[0].to_bits());
            assert_eq!(ca[1].to_bits(), cb[1].to_bits());
        }
        assert_eq!(a.kl_history, b.kl_history);
    }
}

//! The discrete bottleneck: k-means++ seeding, nearest-entry quantization,
//! EMA entry updates and dead-code revival.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sq_dist, Matrix};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    pub size: usize,
    pub dim: usize,
    pub decay: f64,
    pub dead_fraction: f64,
    pub revival_interval: u64,
    pub warmup_steps: u64,
    pub revival_noise: f64,
    pub revival: bool,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            size: 256,
            dim: 96,
            decay: 0.9,
            dead_fraction: 0.1,
            revival_interval: 50,
            warmup_steps: 100,
            revival_noise: 0.01,
            revival: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    /// `K x D`.
    pub entries: Matrix,
    pub usage_ema: Vec<f64>,
    /// `K x D`, kept for liveness bookkeeping.
    pub sum_ema: Matrix,
    pub decay: f64,
    pub dead_fraction: f64,
    pub revival_interval: u64,
    pub warmup_steps: u64,
    pub revival_noise: f64,
}

/// Picks `k` distinct row indices by the k-means++ D² rule.
pub fn kmeanspp_seeds(points: &Matrix, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let n = points.rows;
    if k == 0 || n < k {
        return Err(Error::Config(format!(
            "k-means++ needs at least K = {k} rows (and K >= 1), got {n}"
        )));
    }
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    while chosen.len() < k {
        let total: f64 = (0..n).filter(|&i| !taken[i]).map(|i| d2[i]).sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for i in (0..n).filter(|&i| !taken[i]) {
                acc += d2[i];
                if d2[i] > 0.0 {
                    pick = Some(i);
                    if acc > u {
                        break;
                    }
                }
            }
            pick.expect("positive mass has a carrier")
        } else {
            // every remaining row coincides with a seed
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        taken[next] = true;
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    Ok(chosen)
}

/// Index of the nearest row of `centers`, ties to the lowest index.
pub fn nearest(centers: &Matrix, z: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centers.rows {
        let d = sq_dist(centers.row(k), z);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

impl Codebook {
    /// Seeds entries on encoder outputs with k-means++. Usage starts at 1.
    pub fn init_kmeanspp(z: &Matrix, cfg: &CodebookConfig, rng: &mut Rng) -> Result<Self> {
        if z.cols != cfg.dim {
            return Err(Error::Shape(format!("encoder width {} vs codebook dim {}", z.cols, cfg.dim)));
        }
        let seeds = kmeanspp_seeds(z, cfg.size, rng)?;
        let entries = z.select_rows(&seeds);
        Ok(Self {
            sum_ema: entries.clone(),
            entries,
            usage_ema: vec![1.0; cfg.size],
            decay: cfg.decay,
            dead_fraction: cfg.dead_fraction,
            revival_interval: cfg.revival_interval,
            warmup_steps: cfg.warmup_steps,
            revival_noise: cfg.revival_noise,
        })
    }

    pub fn size(&self) -> usize {
        self.entries.rows
    }

    pub fn dim(&self) -> usize {
        self.entries.cols
    }

    /// Nearest entry and its vector. Ties go to the lowest index.
    pub fn quantize(&self, z: &[f64]) -> (usize, &[f64]) {
        let (k, _) = nearest(&self.entries, z);
        (k, self.entries.row(k))
    }

    pub fn quantize_batch(&self, z: &Matrix) -> Vec<usize> {
        (0..z.rows).map(|i| self.quantize(z.row(i)).0).collect()
    }

    /// Rows of the assigned entries, one per batch row.
    pub fn lookup(&self, assign: &[usize]) -> Matrix {
        self.entries.select_rows(assign)
    }

    /// EMA step. Assigned entries move as `e = g*e + (1-g)*mean`; usage
    /// decays for every entry so that idle entries can be detected as dead.
    pub fn ema_update(&mut self, z: &Matrix, assign: &[usize]) -> Result<()> {
        if z.rows != assign.len() || z.cols != self.dim() {
            return Err(Error::Shape("EMA batch and assignments disagree".into()));
        }
        let (k_n, d) = (self.size(), self.dim());
        let mut counts = vec![0usize; k_n];
        let mut sums = Matrix::zeros(k_n, d);
        for (i, &k) in assign.iter().enumerate() {
            counts[k] += 1;
            sums.row_mut(k).iter_mut().zip(z.row(i)).for_each(|(s, v)| *s += v);
        }
        let g = self.decay;
        for k in 0..k_n {
            self.usage_ema[k] = g * self.usage_ema[k] + (1.0 - g) * counts[k] as f64;
            if counts[k] == 0 {
                continue;
            }
            let inv = 1.0 / counts[k] as f64;
            for j in 0..d {
                let s = sums.data[k * d + j];
                self.sum_ema.data[k * d + j] = g * self.sum_ema.data[k * d + j] + (1.0 - g) * s;
                self.entries.data[k * d + j] = g * self.entries.data[k * d + j] + (1.0 - g) * s * inv;
            }
        }
        Ok(())
    }

    pub fn mean_usage(&self) -> f64 {
        self.usage_ema.iter().sum::<f64>() / self.size() as f64
    }

    /// Entries with usage at or above `dead_fraction * mean usage`.
    pub fn active_count(&self) -> usize {
        let thr = self.dead_fraction * self.mean_usage();
        self.usage_ema.iter().filter(|u| **u >= thr).count()
    }

    /// Replaces dead entries with noisy batch vectors at revival steps.
    /// Returns the revived indices.
    pub fn revive_dead(&mut self, step: u64, z: &Matrix, rng: &mut Rng) -> Vec<usize> {
        if step < self.warmup_steps || self.revival_interval == 0 || !step.is_multiple_of(self.revival_interval) {
            return Vec::new();
        }
        if z.rows == 0 {
            tracing::warn!(step, "empty batch at a revival step; revival skipped");
            return Vec::new();
        }
        let mean = self.mean_usage();
        let thr = self.dead_fraction * mean;
        let noise = Normal::new(0.0, self.revival_noise).expect("non-negative noise");
        let dead: Vec<usize> = (0..self.size()).filter(|&k| self.usage_ema[k] < thr).collect();
        for &k in &dead {
            let src = rng.random_range(0..z.rows);
            let d = self.dim();
            for j in 0..d {
                let v = z.get(src, j) + noise.sample(rng);
                self.entries.data[k * d + j] = v;
                self.sum_ema.data[k * d + j] = v * mean;
            }
            self.usage_ema[k] = mean;
        }
        dead
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::component_rng;

    fn book(entries: Vec<Vec<f64>>) -> Codebook {
        let d = entries[0].len();
        let m = Matrix::from_rows(&entries, d).unwrap();
        Codebook {
            sum_ema: m.clone(),
            usage_ema: vec![1.0; m.rows],
            entries: m,
            decay: 0.9,
            dead_fraction: 0.1,
            revival_interval: 50,
            warmup_steps: 100,
            revival_noise: 0.01,
        }
    }

    #[test]
    fn exact_match_and_tie_break() {
        let rows: Vec<Vec<f64>> = (0..8).map(|k| vec![k as f64, 0.0]).collect();
        let cb = book(rows);
        assert_eq!(cb.quantize(&[7.0, 0.0]).0, 7);
        let mut cb2 = book(vec![vec![9.0, 9.0]; 6]);
        cb2.entries.row_mut(2).copy_from_slice(&[1.0, 0.0]);
        cb2.entries.row_mut(5).copy_from_slice(&[-1.0, 0.0]);
        assert_eq!(cb2.quantize(&[0.0, 0.0]).0, 2);
    }

    #[test]
    fn ema_fixed_point_limit_and_substitution() {
        let z = Matrix::from_rows(&[[0.0, 1.0]], 2).unwrap();
        let mut cb = book(vec![vec![1.0, 0.0]]);
        cb.decay = 1.0;
        cb.ema_update(&z, &[0]).unwrap();
        assert_eq!(cb.entries.row(0), &[1.0, 0.0]);
        cb.decay = 0.0;
        cb.ema_update(&z, &[0]).unwrap();
        assert_eq!(cb.entries.row(0), &[0.0, 1.0]);
        let mut cb = book(vec![vec![1.0, 0.0]]);
        cb.ema_update(&z, &[0]).unwrap();
        assert!((cb.entries.get(0, 0) - 0.9).abs() < 1e-15);
        assert!((cb.entries.get(0, 1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn unassigned_entries_keep_position() {
        let z = Matrix::from_rows(&[[0.0, 1.0]], 2).unwrap();
        let mut cb = book(vec![vec![1.0, 0.0], vec![5.0, 5.0]]);
        cb.ema_update(&z, &[0]).unwrap();
        assert_eq!(cb.entries.row(1), &[5.0, 5.0]);
        assert!((cb.usage_ema[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn revival_threshold_and_schedule() {
        let mut rng = component_rng(1, "cb-revive");
        let z = Matrix::from_rows(&[[3.0, 3.0]], 2).unwrap();
        let mut cb = book(vec![vec![0.0, 0.0]; 4]);
        cb.usage_ema = vec![0.0, 10.0, 10.0, 10.0];
        assert!(cb.revive_dead(99, &z, &mut rng).is_empty());
        assert!(cb.revive_dead(120, &z, &mut rng).is_empty());
        assert_eq!(cb.revive_dead(100, &z, &mut rng), vec![0]);
        assert!((cb.usage_ema[0] - 7.5).abs() < 1e-12);
        assert!((cb.entries.get(0, 0) - 3.0).abs() < 0.1);
        let mut uniform = book(vec![vec![0.0, 0.0]; 4]);
        assert!(uniform.revive_dead(100, &z, &mut rng).is_empty());
        let mut empty = book(vec![vec![0.0, 0.0]; 2]);
        empty.usage_ema = vec![0.0, 5.0];
        assert!(empty.revive_dead(100, &Matrix::zeros(0, 2), &mut rng).is_empty());
    }

    #[test]
    fn kmeanspp_full_draw_is_permutation_and_seeded() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let z = Matrix::from_rows(&rows, 2).unwrap();
        let cfg = CodebookConfig {
            size: 6,
            dim: 2,
            ..Default::default()
        };
        let a = Codebook::init_kmeanspp(&z, &cfg, &mut component_rng(9, "kpp")).unwrap();
        let b = Codebook::init_kmeanspp(&z, &cfg, &mut component_rng(9, "kpp")).unwrap();
        assert_eq!(a, b);
        let mut seen: Vec<Vec<u64>> = (0..6).map(|k| a.entries.row(k).iter().map(|v| v.to_bits()).collect()).collect();
        let mut want: Vec<Vec<u64>> = rows.iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        seen.sort();
        want.sort();
        assert_eq!(seen, want);
        let small = CodebookConfig { size: 7, dim: 2, ..Default::default() };
        assert!(matches!(
            Codebook::init_kmeanspp(&z, &small, &mut component_rng(9, "kpp")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kmeanspp_two_blob_probability_matches_enumeration() {
        let pts = [
            [0.0, 0.0],
            [0.3, 0.0],
            [0.0, 0.4],
            [0.2, 0.2],
            [10.0, 10.0],
            [10.5, 10.0],
            [10.0, 9.6],
            [9.8, 10.3],
        ];
        let blob = |i: usize| i >= 4;
        // exact probability that the two seeds land in different blobs
        let mut exact = 0.0;
        for first in 0..8 {
            let d: Vec<f64> = pts.iter().map(|p| sq_dist(p, &pts[first])).collect();
            let total: f64 = d.iter().sum();
            let cross: f64 = (0..8).filter(|&j| blob(j) != blob(first)).map(|j| d[j]).sum();
            exact += cross / total / 8.0;
        }
        assert!(exact > 0.99);
        let z = Matrix::from_rows(&pts, 2).unwrap();
        let trials = 20_000;
        let mut hits = 0;
        let mut rng = component_rng(2, "kpp-enum");
        for _ in 0..trials {
            let s = kmeanspp_seeds(&z, 2, &mut rng).unwrap();
            if blob(s[0]) != blob(s[1]) {
                hits += 1;
            }
        }
        let freq = hits as f64 / trials as f64;
        let sd = (exact * (1.0 - exact) / trials as f64).sqrt();
        assert!((freq - exact).abs() <= 5.0 * sd + 1e-4, "freq {freq} exact {exact}");
    }
}

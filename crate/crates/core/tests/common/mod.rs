//! Brute-force reference implementations shared by the property tests and
//! the acceptance suite. Each one is written from the definition and
//! deliberately shares no code with the library.

#![allow(dead_code)]

use persona_core::objective::MiningRow;

/// Index of the closest entry by squared Euclidean distance, ties to the lowest index.
pub fn argmin_entry(entries: &[Vec<f64>], z: &[f64]) -> usize {
    let dists: Vec<f64> = entries
        .iter()
        .map(|e| e.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum())
        .collect();
    let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == best).unwrap()
}

fn pair_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Calinski-Harabasz from pairwise distances: a group's scatter about its
/// centroid equals the sum of its squared pairwise distances over twice its
/// size, and the between-cluster part is what the total scatter leaves.
pub fn ch_pairwise(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += pair_sq(&points[i], &points[j]);
        }
    }
    total /= 2.0 * n as f64;
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let k = ids.len();
    let mut within = 0.0;
    for &c in &ids {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let mut s = 0.0;
        for &i in &members {
            for &j in &members {
                s += pair_sq(&points[i], &points[j]);
            }
        }
        within += s / (2.0 * members.len() as f64);
    }
    let between = total - within;
    (between / (k - 1) as f64) / (within / (n - k) as f64)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    ab / (aa.sqrt() * bb.sqrt())
}

/// Size-weighted mean over clusters with at least two members of the mean
/// cosine over all ordered member pairs.
pub fn pairwise_cosine_enumerated(points: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let (mut num, mut den) = (0.0, 0.0);
    for c in ids {
        let members: Vec<usize> = (0..points.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < 2 {
            continue;
        }
        let mut pairs = Vec::new();
        for &i in &members {
            for &j in &members {
                if i != j {
                    pairs.push(cos(&points[i], &points[j]));
                }
            }
        }
        let mean = pairs.iter().sum::<f64>() / pairs.len() as f64;
        num += members.len() as f64 * mean;
        den += members.len() as f64;
    }
    (den > 0.0).then(|| num / den)
}

fn shared_cos(a: &MiningRow, b: &MiningRow) -> Option<f64> {
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    for (ca, cb) in a.channels.iter().zip(&b.channels) {
        if let (Some(ca), Some(cb)) = (ca, cb) {
            xa.extend_from_slice(ca);
            xb.extend_from_slice(cb);
        }
    }
    if xa.is_empty() {
        return None;
    }
    let na: f64 = xa.iter().map(|v| v * v).sum();
    let nb: f64 = xb.iter().map(|v| v * v).sum();
    if na == 0.0 || nb == 0.0 {
        return Some(0.0);
    }
    Some(cos(&xa, &xb))
}

/// Result of the three gates for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct GateScan {
    pub stage1: Vec<usize>,
    pub stage2: Vec<usize>,
    pub stage3: Vec<usize>,
    pub positive: Option<usize>,
}

/// Exhaustive gate scan: a candidate survives a ranking gate when fewer
/// than the gate's capacity of its rivals outrank it (better score, or the
/// same score at a lower index).
pub fn three_gate_scan(rows: &[MiningRow], anchor: usize, top_m: usize, top_f: usize) -> GateScan {
    let n = rows.len();
    let stage1: Vec<usize> = (0..n)
        .filter(|&j| j != anchor && rows[j].signature == rows[anchor].signature)
        .collect();
    let sim: Vec<Option<f64>> = (0..n).map(|j| shared_cos(&rows[anchor], &rows[j])).collect();
    let scored: Vec<usize> = stage1.iter().copied().filter(|&j| sim[j].is_some()).collect();
    let stage2: Vec<usize> = scored
        .iter()
        .copied()
        .filter(|&j| {
            let sj = sim[j].unwrap();
            let ahead = scored
                .iter()
                .filter(|&&k| {
                    let sk = sim[k].unwrap();
                    sk > sj || (sk == sj && k < j)
                })
                .count();
            ahead < top_m
        })
        .collect();
    let dist = |j: usize| -> f64 {
        rows[anchor]
            .behavior
            .iter()
            .zip(&rows[j].behavior)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let rank_ahead = |j: usize, pool: &[usize]| {
        pool.iter()
            .filter(|&&k| dist(k) < dist(j) || (dist(k) == dist(j) && k < j))
            .count()
    };
    let stage3: Vec<usize> = stage2.iter().copied().filter(|&j| rank_ahead(j, &stage2) < top_f).collect();
    let positive = stage3.iter().copied().find(|&j| rank_ahead(j, &stage3) == 0);
    GateScan {
        stage1,
        stage2,
        stage3,
        positive,
    }
}

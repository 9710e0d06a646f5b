//! Evaluation statistics and the persona-policy simulator.
//!
//! Cluster quality: stratum purity, incompatible mixing, head coherence,
//! within-cluster pairwise cosine, Calinski–Harabasz. Separation: Cohen's d,
//! Welch t, Kruskal–Wallis, a seeded permutation test. Alignment: per-cell
//! action-rate alignment and the correct / mismatched pairing study. The
//! simulator draws synthetic agent sessions from token profiles.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::events::{BuyerShopAggregate, Stratum};
use crate::linalg::{cosine, sq_dist, Matrix};
use crate::population::TokenProfile;
use crate::rng::component_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Share of both A–C and D above which a cluster counts as incompatibly mixed.
    pub mixing_threshold: f64,
    /// Share of both Low and High above which a code is incoherent for a head.
    pub coherence_threshold: f64,
    /// Clusters up to this size enumerate all pairs for pairwise cosine.
    pub pairwise_exact_cap: usize,
    pub pairwise_samples: usize,
    pub permutations: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            mixing_threshold: 0.2,
            coherence_threshold: 0.05,
            pairwise_exact_cap: 200,
            pairwise_samples: 10_000,
            permutations: 10_000,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.mixing_threshold) || !unit(self.coherence_threshold) {
            return Err(Error::Config("metric thresholds must lie in (0, 1]".into()));
        }
        if self.pairwise_exact_cap < 2 || self.pairwise_samples == 0 || self.permutations == 0 {
            return Err(Error::Config("pairwise and permutation counts must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Cluster quality

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityRow {
    pub cluster: usize,
    pub size: usize,
    pub strata: [usize; 4],
    pub purity: f64,
    pub incompatible: bool,
}

fn group_members(assignments: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &k) in assignments.iter().enumerate() {
        m.entry(k).or_default().push(i);
    }
    m
}

/// Purity is the largest stratum share. A cluster is incompatibly mixed when
/// both the A–C share and the D share reach `theta`.
pub fn purity_and_mixing(assignments: &[usize], strata: &[Stratum], theta: f64) -> Result<Vec<PurityRow>> {
    if assignments.len() != strata.len() {
        return Err(Error::Shape("one stratum per assignment required".into()));
    }
    if let Some(i) = strata.iter().position(|s| *s == Stratum::E) {
        return Err(Error::Precondition(format!("row {i} has stratum E")));
    }
    Ok(group_members(assignments)
        .into_iter()
        .map(|(cluster, idx)| {
            let mut c = [0usize; 4];
            for &i in &idx {
                c[strata[i].index()] += 1;
            }
            let n = idx.len() as f64;
            let share = |v: usize| v as f64 / n;
            PurityRow {
                cluster,
                size: idx.len(),
                strata: c,
                purity: share(*c.iter().max().unwrap_or(&0)),
                incompatible: share(c[0] + c[1] + c[2]) >= theta && share(c[3]) >= theta,
            }
        })
        .collect())
}

/// Per-code bin histogram and incoherence flag for one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceRow {
    pub cluster: usize,
    pub bins: [usize; 3],
    pub incoherent: bool,
}

pub fn coherence_rows(assignments: &[usize], labels: &[u8], theta: f64) -> Result<Vec<CoherenceRow>> {
    if assignments.len() != labels.len() {
        return Err(Error::Shape("one label per assignment required".into()));
    }
    if let Some(l) = labels.iter().find(|l| **l > 2) {
        return Err(Error::Precondition(format!("label {l} outside 0..3")));
    }
    Ok(group_members(assignments)
        .into_iter()
        .map(|(cluster, idx)| {
            let mut bins = [0usize; 3];
            for &i in &idx {
                bins[labels[i] as usize] += 1;
            }
            let n = idx.len() as f64;
            CoherenceRow {
                cluster,
                bins,
                incoherent: bins[0] as f64 / n >= theta && bins[2] as f64 / n >= theta,
            }
        })
        .collect())
}

/// Fraction of all buyers that sit in codes spanning both Low and High.
pub fn coherence(assignments: &[usize], labels: &[u8], theta: f64) -> Result<f64> {
    if assignments.is_empty() {
        return Ok(0.0);
    }
    let rows = coherence_rows(assignments, labels, theta)?;
    let bad: usize = rows.iter().filter(|r| r.incoherent).map(|r| r.bins.iter().sum::<usize>()).sum();
    Ok(bad as f64 / assignments.len() as f64)
}

/// Size-weighted mean over clusters of size ≥ 2 of the mean pairwise cosine.
/// Clusters above `exact_cap` use `samples` seeded random pairs.
pub fn pairwise_cosine(x: &Matrix, assignments: &[usize], exact_cap: usize, samples: usize, seed: u64) -> Result<Option<f64>> {
    if x.rows != assignments.len() {
        return Err(Error::Shape("one feature row per assignment required".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (cluster, idx) in group_members(assignments) {
        let n = idx.len();
        if n < 2 {
            continue;
        }
        let mean = if n <= exact_cap {
            let mut s = 0.0;
            for a in 0..n {
                for b in a + 1..n {
                    s += cosine(x.row(idx[a]), x.row(idx[b]));
                }
            }
            s / (n * (n - 1) / 2) as f64
        } else {
            let mut rng = component_rng(seed, &format!("metrics/pairwise/{cluster}"));
            let mut s = 0.0;
            for _ in 0..samples {
                let a = rng.random_range(0..n);
                let mut b = rng.random_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                s += cosine(x.row(idx[a]), x.row(idx[b]));
            }
            s / samples as f64
        };
        num += n as f64 * mean;
        den += n as f64;
    }
    Ok((den > 0.0).then(|| num / den))
}

/// Between-cluster over within-cluster dispersion, each divided by its
/// degrees of freedom. Zero within-cluster dispersion yields `+inf`.
pub fn calinski_harabasz(x: &Matrix, assignments: &[usize]) -> Result<f64> {
    if x.rows != assignments.len() {
        return Err(Error::Shape("one feature row per assignment required".into()));
    }
    let groups = group_members(assignments);
    let (n, k) = (x.rows, groups.len());
    if k <= 1 || k >= n {
        return Err(Error::Undefined(format!("Calinski-Harabasz needs 1 < K < N, got K = {k}, N = {n}")));
    }
    let d = x.cols;
    let mut global = vec![0.0; d];
    for i in 0..n {
        global.iter_mut().zip(x.row(i)).for_each(|(g, v)| *g += v);
    }
    global.iter_mut().for_each(|g| *g /= n as f64);
    let (mut between, mut within) = (0.0, 0.0);
    for idx in groups.values() {
        let mut c = vec![0.0; d];
        for &i in idx {
            c.iter_mut().zip(x.row(i)).for_each(|(g, v)| *g += v);
        }
        c.iter_mut().for_each(|g| *g /= idx.len() as f64);
        between += idx.len() as f64 * sq_dist(&c, &global);
        within += idx.iter().map(|&i| sq_dist(x.row(i), &c)).sum::<f64>();
    }
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub cluster: usize,
    pub size: usize,
    pub strata: [usize; 4],
    pub purity: f64,
    pub incompatible: bool,
    /// Bin histograms of the engagement, exploration and purchase heads.
    pub head_bins: [[usize; 3]; 3],
    pub incoherent: [bool; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub method: String,
    pub buyers: usize,
    pub used_codes: usize,
    /// Mean of per-cluster purities, one vote per used code.
    pub mean_purity: f64,
    /// Mean purity weighted by cluster size (the share of buyers in their cluster's majority stratum).
    pub mean_purity_weighted: f64,
    pub incompatible_clusters: usize,
    /// Share of buyers in incoherent codes per head.
    pub incoherent_share: [f64; 3],
    pub pairwise_cosine: Option<f64>,
    pub calinski_harabasz: Option<f64>,
    pub clusters: Vec<ClusterRow>,
}

/// All cluster-quality statistics over one assignment. Rows must be A–D.
pub fn cluster_report(
    method: &str,
    x: &Matrix,
    assignments: &[usize],
    strata: &[Stratum],
    heads: &[[u8; 3]],
    cfg: &MetricsConfig,
    seed: u64,
) -> Result<ClusterReport> {
    if heads.len() != assignments.len() {
        return Err(Error::Shape("one head label triple per assignment required".into()));
    }
    let purity = purity_and_mixing(assignments, strata, cfg.mixing_threshold)?;
    let mut coh = Vec::with_capacity(3);
    let mut incoherent_share = [0.0; 3];
    for (h, share) in incoherent_share.iter_mut().enumerate() {
        let labels: Vec<u8> = heads.iter().map(|l| l[h]).collect();
        coh.push(coherence_rows(assignments, &labels, cfg.coherence_threshold)?);
        *share = coherence(assignments, &labels, cfg.coherence_threshold)?;
    }
    let clusters: Vec<ClusterRow> = purity
        .iter()
        .enumerate()
        .map(|(j, p)| ClusterRow {
            cluster: p.cluster,
            size: p.size,
            strata: p.strata,
            purity: p.purity,
            incompatible: p.incompatible,
            head_bins: [coh[0][j].bins, coh[1][j].bins, coh[2][j].bins],
            incoherent: [coh[0][j].incoherent, coh[1][j].incoherent, coh[2][j].incoherent],
        })
        .collect();
    let n = assignments.len().max(1) as f64;
    let ch = match calinski_harabasz(x, assignments) {
        Ok(v) => Some(v),
        Err(Error::Undefined(msg)) => {
            tracing::warn!("{msg}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(ClusterReport {
        method: method.to_string(),
        buyers: assignments.len(),
        used_codes: clusters.len(),
        mean_purity: clusters.iter().map(|c| c.purity).sum::<f64>() / clusters.len().max(1) as f64,
        mean_purity_weighted: clusters.iter().map(|c| c.size as f64 * c.purity).sum::<f64>() / n,
        incompatible_clusters: clusters.iter().filter(|c| c.incompatible).count(),
        incoherent_share,
        pairwise_cosine: pairwise_cosine(x, assignments, cfg.pairwise_exact_cap, cfg.pairwise_samples, seed)?,
        calinski_harabasz: ch,
        clusters,
    })
}

/// TSV with one line per cluster.
pub fn cluster_rows_tsv(r: &ClusterReport) -> String {
    let mut s = String::from(
        "cluster\tsize\tA\tB\tC\tD\tpurity\tincompatible\teng_low\teng_med\teng_high\texp_low\texp_med\texp_high\tpur_low\tpur_med\tpur_high\n",
    );
    for c in &r.clusters {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{}",
            c.cluster, c.size, c.strata[0], c.strata[1], c.strata[2], c.strata[3], c.purity, c.incompatible
        ));
        for h in &c.head_bins {
            for v in h {
                s.push_str(&format!("\t{v}"));
            }
        }
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// Separation statistics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub n: [usize; 3],
    pub means: [f64; 3],
    /// Low vs High, pooled standard deviation.
    pub cohens_d: Option<f64>,
    pub welch_p: Option<f64>,
    pub kruskal_p: Option<f64>,
    pub permutation_p: Option<f64>,
    pub permutations: usize,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v)
}

pub fn cohens_d(low: &[f64], high: &[f64]) -> Option<f64> {
    if low.len() < 2 || high.len() < 2 {
        return None;
    }
    let (ml, vl) = mean_var(low);
    let (mh, vh) = mean_var(high);
    let (nl, nh) = (low.len() as f64, high.len() as f64);
    let sd = (((nl - 1.0) * vl + (nh - 1.0) * vh) / (nl + nh - 2.0)).sqrt();
    let gap = mh - ml;
    Some(if sd > 0.0 {
        gap / sd
    } else if gap == 0.0 {
        0.0
    } else {
        gap.signum() * f64::INFINITY
    })
}

/// Two-sided Welch t-test p-value.
pub fn welch_p(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Some(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

/// Kruskal–Wallis H test with tie correction, chi-square approximation.
pub fn kruskal_wallis_p(groups: &[&[f64]]) -> Option<f64> {
    let live: Vec<&[f64]> = groups.iter().copied().filter(|g| !g.is_empty()).collect();
    if live.len() < 2 {
        return None;
    }
    let mut all: Vec<(f64, usize)> = live
        .iter()
        .enumerate()
        .flat_map(|(g, xs)| xs.iter().map(move |x| (*x, g)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len() as f64;
    let mut rank_sum = vec![0.0; live.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        for item in &all[i..=j] {
            rank_sum[item.1] += rank;
        }
        i = j + 1;
    }
    let correction = 1.0 - ties / (n * n * n - n);
    if correction <= 0.0 {
        return Some(1.0);
    }
    let h: f64 = 12.0 / (n * (n + 1.0))
        * live.iter().zip(&rank_sum).map(|(g, r)| r * r / g.len() as f64).sum::<f64>()
        - 3.0 * (n + 1.0);
    let h = (h / correction).max(0.0);
    let dist = ChiSquared::new((live.len() - 1) as f64).ok()?;
    Some((1.0 - dist.cdf(h)).clamp(0.0, 1.0))
}

/// Permutation test of the Low-vs-High mean gap with add-one smoothing:
/// `p = (1 + #{|gap*| >= |gap|}) / (1 + permutations)`.
pub fn permutation_p(low: &[f64], high: &[f64], permutations: usize, seed: u64) -> Option<f64> {
    if low.is_empty() || high.is_empty() {
        return None;
    }
    let (nl, nh) = (low.len(), high.len());
    let mut pool: Vec<f64> = low.iter().chain(high).copied().collect();
    let total: f64 = pool.iter().sum();
    let gap = |sum_low: f64| ((total - sum_low) / nh as f64 - sum_low / nl as f64).abs();
    let observed = gap(low.iter().sum());
    let tol = 1e-12 * (1.0 + observed);
    let mut rng = component_rng(seed, "metrics/permutation");
    let mut hits = 0usize;
    for _ in 0..permutations {
        let (chosen, _) = pool.partial_shuffle(&mut rng, nl);
        if gap(chosen.iter().sum()) >= observed - tol {
            hits += 1;
        }
    }
    Some((hits + 1) as f64 / (permutations + 1) as f64)
}

/// Statistics over Low / Medium / High samples.
pub fn separation_stats(groups: [&[f64]; 3], permutations: usize, seed: u64) -> Result<SeparationReport> {
    if let Some(g) = groups.iter().position(|g| g.is_empty()) {
        return Err(Error::Precondition(format!("separation group {g} is empty")));
    }
    if groups.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("separation samples".into()));
    }
    let [low, med, high] = groups;
    Ok(SeparationReport {
        n: groups.map(|g| g.len()),
        means: groups.map(|g| mean_var(g).0),
        cohens_d: cohens_d(low, high),
        welch_p: welch_p(low, high),
        kruskal_p: kruskal_wallis_p(&[low, med, high]),
        permutation_p: permutation_p(low, high, permutations, seed),
        permutations,
    })
}

/// Kolmogorov–Smirnov distance of samples in `[0, 1]` to the uniform law.
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &u)| {
            let u = u.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - u).max(u - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Alignment

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub atc: f64,
    pub pur: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub atc: f64,
    pub pur: f64,
    pub ara: f64,
}

pub fn alignment(real: Rates, agent: Rates) -> Result<Alignment> {
    for (name, v) in [("ATC_real", real.atc), ("PUR_real", real.pur), ("ATC_agent", agent.atc), ("PUR_agent", agent.pur)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Precondition(format!("{name} = {v} outside [0, 1]")));
        }
    }
    let atc = 1.0 - (real.atc - agent.atc).abs();
    let pur = 1.0 - (real.pur - agent.pur).abs();
    Ok(Alignment {
        atc,
        pur,
        ara: 0.5 * (atc + pur),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub shop_id: String,
    pub token: usize,
    pub stratum: Stratum,
}

/// Session-level outcome of one agent (or real) session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStat {
    pub cell: CellKey,
    pub actions: u32,
    pub atc: bool,
    pub checkout: bool,
}

/// Add-to-cart and checkout session fractions per cell.
pub fn session_rates(stats: &[SessionStat]) -> BTreeMap<CellKey, Rates> {
    let mut acc: BTreeMap<CellKey, (usize, usize, usize)> = BTreeMap::new();
    for s in stats {
        let e = acc.entry(s.cell.clone()).or_default();
        e.0 += usize::from(s.atc);
        e.1 += usize::from(s.checkout);
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(k, (a, c, n))| {
            (
                k,
                Rates {
                    atc: a as f64 / n as f64,
                    pur: c as f64 / n as f64,
                },
            )
        })
        .collect()
}

/// Real per-cell rates: pooled add-to-cart and checkout sessions over pooled
/// sessions of the cell's buyers. Stratum E rows are skipped.
pub fn real_cell_rates(rows: &[&BuyerShopAggregate], tokens: &[usize]) -> Result<BTreeMap<CellKey, Rates>> {
    if rows.len() != tokens.len() {
        return Err(Error::Shape("one token per row required".into()));
    }
    let mut acc: BTreeMap<CellKey, (u64, u64, u64)> = BTreeMap::new();
    for (a, &t) in rows.iter().zip(tokens) {
        if a.stratum == Stratum::E {
            continue;
        }
        let e = acc
            .entry(CellKey {
                shop_id: a.shop_id.clone(),
                token: t,
                stratum: a.stratum,
            })
            .or_default();
        e.0 += u64::from(a.scalars.atc_sessions);
        e.1 += u64::from(a.scalars.checkout_sessions);
        e.2 += u64::from(a.scalars.total_sessions);
    }
    Ok(acc
        .into_iter()
        .filter(|(_, v)| v.2 > 0)
        .map(|(k, (a, c, n))| {
            (
                k,
                Rates {
                    atc: a as f64 / n as f64,
                    pur: c as f64 / n as f64,
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAlignment {
    pub cell: CellKey,
    pub real: Rates,
    pub agent: Rates,
    pub correct: Alignment,
    /// Mean over every other token of the same shop and stratum.
    pub all_mismatch: Option<Alignment>,
    pub random_mismatch: Option<Alignment>,
    pub random_token: Option<usize>,
}

/// Alignment aggregated per stratum (A–D) and then unweighted over strata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingSummary {
    pub cells: usize,
    pub per_stratum: [Option<Alignment>; 4],
    pub stratified: Option<Alignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub cells: Vec<CellAlignment>,
    /// Matched pairing over cells that have at least one mismatch candidate.
    pub correct: PairingSummary,
    pub all_mismatch: PairingSummary,
    pub random_mismatch: PairingSummary,
    /// Matched pairing over every cell.
    pub correct_all_cells: PairingSummary,
}

fn summarize<'a>(items: impl Iterator<Item = (Stratum, &'a Alignment)>) -> PairingSummary {
    let mut sums = [(0.0, 0.0, 0.0, 0usize); 4];
    let mut cells = 0;
    for (s, a) in items {
        let e = &mut sums[s.index()];
        e.0 += a.atc;
        e.1 += a.pur;
        e.2 += a.ara;
        e.3 += 1;
        cells += 1;
    }
    let per_stratum = sums.map(|(atc, pur, ara, n)| {
        (n > 0).then(|| Alignment {
            atc: atc / n as f64,
            pur: pur / n as f64,
            ara: ara / n as f64,
        })
    });
    let live: Vec<&Alignment> = per_stratum.iter().flatten().collect();
    let stratified = (!live.is_empty()).then(|| {
        let m = live.len() as f64;
        Alignment {
            atc: live.iter().map(|a| a.atc).sum::<f64>() / m,
            pur: live.iter().map(|a| a.pur).sum::<f64>() / m,
            ara: live.iter().map(|a| a.ara).sum::<f64>() / m,
        }
    });
    PairingSummary {
        cells,
        per_stratum,
        stratified,
    }
}

/// Compares each agent cell `(shop, a, s)` with the real cell of the same
/// token and with the real cells `(shop, b, s)`, `b != a`.
pub fn pairing_study(real: &BTreeMap<CellKey, Rates>, agent: &BTreeMap<CellKey, Rates>, seed: u64) -> Result<AlignmentReport> {
    let mut by_group: BTreeMap<(&str, Stratum), Vec<(usize, Rates)>> = BTreeMap::new();
    for (k, r) in real {
        by_group.entry((k.shop_id.as_str(), k.stratum)).or_default().push((k.token, *r));
    }
    let mut cells = Vec::new();
    for (k, g) in agent {
        let Some(r) = real.get(k) else {
            tracing::warn!(shop = %k.shop_id, token = k.token, stratum = %k.stratum, "agent cell without real counterpart skipped");
            continue;
        };
        let correct = alignment(*r, *g)?;
        let others: Vec<(usize, Rates)> = by_group[&(k.shop_id.as_str(), k.stratum)]
            .iter()
            .filter(|(t, _)| *t != k.token)
            .copied()
            .collect();
        let (all_mismatch, random_mismatch, random_token) = if others.is_empty() {
            (None, None, None)
        } else {
            let mut sum = Alignment { atc: 0.0, pur: 0.0, ara: 0.0 };
            for (_, o) in &others {
                let a = alignment(*o, *g)?;
                sum.atc += a.atc;
                sum.pur += a.pur;
                sum.ara += a.ara;
            }
            let m = others.len() as f64;
            let mut rng = component_rng(seed, &format!("metrics/pairing/{}/{}/{}", k.shop_id, k.token, k.stratum));
            let (t, o) = others[rng.random_range(0..others.len())];
            (
                Some(Alignment {
                    atc: sum.atc / m,
                    pur: sum.pur / m,
                    ara: sum.ara / m,
                }),
                Some(alignment(o, *g)?),
                Some(t),
            )
        };
        cells.push(CellAlignment {
            cell: k.clone(),
            real: *r,
            agent: *g,
            correct,
            all_mismatch,
            random_mismatch,
            random_token,
        });
    }
    let comparable = || cells.iter().filter(|c| c.all_mismatch.is_some());
    Ok(AlignmentReport {
        correct: summarize(comparable().map(|c| (c.cell.stratum, &c.correct))),
        all_mismatch: summarize(comparable().filter_map(|c| c.all_mismatch.as_ref().map(|a| (c.cell.stratum, a)))),
        random_mismatch: summarize(comparable().filter_map(|c| c.random_mismatch.as_ref().map(|a| (c.cell.stratum, a)))),
        correct_all_cells: summarize(cells.iter().map(|c| (c.cell.stratum, &c.correct))),
        cells,
    })
}

// ---------------------------------------------------------------------------
// Persona-policy simulator

/// Purchase-bin priors for per-session add-to-cart and checkout rates.
pub const ATC_PRIOR: [f64; 3] = [0.010, 0.294, 0.720];
pub const CHECKOUT_PRIOR: [f64; 3] = [0.003, 0.137, 0.433];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Weight of the purchase-bin prior against the token centroid's rates.
    pub prior_weight: f64,
    /// Extra mean actions per session by engagement bin.
    pub engagement_lambda: [f64; 3],
    pub sessions_per_cell: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            prior_weight: 0.5,
            engagement_lambda: [1.0, 3.0, 6.0],
            sessions_per_cell: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimMode {
    PerToken,
    /// Every token shares the support-weighted mean parameters.
    TokenIndependent,
}

/// Per-session parameters of one token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub p_atc: f64,
    /// Checkout probability given add-to-cart.
    pub p_checkout_given_atc: f64,
    pub lambda_actions: f64,
}

impl PolicyParams {
    pub fn of(p: &TokenProfile, cfg: &SimConfig) -> Self {
        let w = cfg.prior_weight;
        let bin = p.head_bins[2] as usize;
        let p_atc = ((1.0 - w) * p.centroid[10] + w * ATC_PRIOR[bin]).clamp(0.0, 1.0);
        let p_co = ((1.0 - w) * p.centroid[11] + w * CHECKOUT_PRIOR[bin]).clamp(0.0, 1.0);
        let views = if p.centroid[0] > 0.0 { p.centroid[9] / p.centroid[0] } else { 0.0 };
        Self {
            p_atc,
            p_checkout_given_atc: if p_atc > 0.0 { (p_co / p_atc).min(1.0) } else { 0.0 },
            lambda_actions: cfg.engagement_lambda[p.head_bins[0] as usize] + views,
        }
    }

    /// Unconditional checkout probability.
    pub fn p_checkout(&self) -> f64 {
        self.p_atc * self.p_checkout_given_atc
    }
}

/// Sessions to simulate for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RosterCell {
    pub cell: CellKey,
    pub sessions: usize,
}

pub fn roster_from_cells<'a>(cells: impl IntoIterator<Item = &'a CellKey>, sessions: usize) -> Vec<RosterCell> {
    cells
        .into_iter()
        .map(|c| RosterCell {
            cell: c.clone(),
            sessions,
        })
        .collect()
}

/// Draws agent sessions. Session `i` of `(shop, token, stratum)` uses a
/// stream keyed by shop, stratum and `i` only, so tokens with equal
/// parameters produce identical sessions.
pub fn policy_simulate(
    profiles: &[TokenProfile],
    roster: &[RosterCell],
    cfg: &SimConfig,
    mode: SimMode,
    seed: u64,
) -> Result<Vec<SessionStat>> {
    let params: BTreeMap<usize, PolicyParams> = profiles.iter().map(|p| (p.token, PolicyParams::of(p, cfg))).collect();
    let pooled = {
        let total: f64 = profiles.iter().map(|p| p.support as f64).sum();
        let mut acc = PolicyParams {
            p_atc: 0.0,
            p_checkout_given_atc: 0.0,
            lambda_actions: 0.0,
        };
        let mut p_co = 0.0;
        for p in profiles {
            let w = if total > 0.0 { p.support as f64 / total } else { 1.0 / profiles.len() as f64 };
            let q = params[&p.token];
            acc.p_atc += w * q.p_atc;
            p_co += w * q.p_checkout();
            acc.lambda_actions += w * q.lambda_actions;
        }
        acc.p_checkout_given_atc = if acc.p_atc > 0.0 { (p_co / acc.p_atc).min(1.0) } else { 0.0 };
        acc
    };
    let mut out = Vec::new();
    for rc in roster {
        let token_params = params
            .get(&rc.cell.token)
            .copied()
            .ok_or_else(|| Error::Precondition(format!("no profile for roster token {}", rc.cell.token)))?;
        let q = match mode {
            SimMode::PerToken => token_params,
            SimMode::TokenIndependent => pooled,
        };
        let poisson = if q.lambda_actions > 0.0 {
            Some(Poisson::new(q.lambda_actions).map_err(|e| Error::Precondition(e.to_string()))?)
        } else {
            None
        };
        for i in 0..rc.sessions {
            let mut rng = component_rng(seed, &format!("sim/{}/{}/{i}", rc.cell.shop_id, rc.cell.stratum));
            let (u1, u2): (f64, f64) = (rng.random(), rng.random());
            let atc = u1 < q.p_atc;
            let checkout = atc && u2 < q.p_checkout_given_atc;
            let extra = poisson.as_ref().map_or(0.0, |p| p.sample(&mut rng));
            out.push(SessionStat {
                cell: rc.cell.clone(),
                actions: 1 + extra as u32 + u32::from(atc) + u32::from(checkout),
                atc,
                checkout,
            });
        }
    }
    Ok(out)
}

/// Which per-session outcome feeds a separation test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Actions,
    AddToCart,
    Checkout,
}

/// Splits session outcomes by the token's bin on `head`.
pub fn separation_groups(stats: &[SessionStat], profiles: &[TokenProfile], head: usize, outcome: Outcome) -> Result<[Vec<f64>; 3]> {
    let bins: BTreeMap<usize, u8> = profiles.iter().map(|p| (p.token, p.head_bins[head])).collect();
    let mut g: [Vec<f64>; 3] = Default::default();
    for s in stats {
        let b = *bins
            .get(&s.cell.token)
            .ok_or_else(|| Error::Precondition(format!("no profile for token {}", s.cell.token)))?;
        g[b as usize].push(match outcome {
            Outcome::Actions => f64::from(s.actions),
            Outcome::AddToCart => f64::from(u8::from(s.atc)),
            Outcome::Checkout => f64::from(u8::from(s.checkout)),
        });
    }
    Ok(g)
}

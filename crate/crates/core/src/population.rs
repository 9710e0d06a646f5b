//! Token profiles, per-store token distributions, stratum-mixture
//! prediction, Jensen–Shannon divergence, and store-feature reconstruction.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{BuyerShopAggregate, Stratum, INTENT_SLOT, SCALAR_NAMES};
use crate::objective::AuxLabels;

/// Behavior summary of one token over a reference population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProfile {
    pub token: usize,
    /// `P(stratum | token)` over A–D.
    pub stratum_dist: [f64; 4],
    /// Mean raw 16-scalar vector of assigned buyers.
    pub centroid: Vec<f64>,
    /// Majority bins of the engagement, exploration and purchase heads.
    pub head_bins: [u8; 3],
    pub support: usize,
}

/// Builds a profile for every token with at least one modeled (A–D) buyer.
/// Head-bin ties go to the lower bin.
pub fn build_profiles(
    assignments: &[usize],
    rows: &[&BuyerShopAggregate],
    labels: &[AuxLabels],
) -> Result<Vec<TokenProfile>> {
    if assignments.len() != rows.len() || rows.len() != labels.len() {
        return Err(Error::Shape("profiles need one token and label per row".into()));
    }
    struct Acc {
        strata: [usize; 4],
        sum: [f64; 16],
        votes: [[usize; 3]; 3],
        n: usize,
    }
    let mut acc: BTreeMap<usize, Acc> = BTreeMap::new();
    for ((&k, a), l) in assignments.iter().zip(rows).zip(labels) {
        if a.stratum == Stratum::E {
            continue;
        }
        let e = acc.entry(k).or_insert(Acc {
            strata: [0; 4],
            sum: [0.0; 16],
            votes: [[0; 3]; 3],
            n: 0,
        });
        e.strata[a.stratum.index()] += 1;
        e.sum.iter_mut().zip(a.scalars.to_array()).for_each(|(s, v)| *s += v);
        for h in 0..3 {
            e.votes[h][l.bins[h] as usize] += 1;
        }
        e.n += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(token, a)| {
            let n = a.n as f64;
            TokenProfile {
                token,
                stratum_dist: a.strata.map(|c| c as f64 / n),
                centroid: a.sum.iter().map(|s| s / n).collect(),
                head_bins: a.votes.map(|v| {
                    let mut best = 0;
                    for b in 1..3 {
                        if v[b] > v[best] {
                            best = b;
                        }
                    }
                    best as u8
                }),
                support: a.n,
            }
        })
        .collect())
}

pub fn profile_map(profiles: &[TokenProfile]) -> BTreeMap<usize, &TokenProfile> {
    profiles.iter().map(|p| (p.token, p)).collect()
}

/// Empirical token distribution of one store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreDistribution {
    pub shop_id: String,
    pub p: Vec<f64>,
    pub buyers: usize,
}

impl StoreDistribution {
    /// Tokens with positive mass, ascending.
    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.p.iter().copied().enumerate().filter(|(_, v)| *v > 0.0)
    }
}

/// `p_s(k)` = share of the shop's buyers holding token `k`, shops sorted.
pub fn store_distributions(pairs: &[(&str, usize)], k: usize) -> Result<Vec<StoreDistribution>> {
    let mut counts: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &(shop, t) in pairs {
        if t >= k {
            return Err(Error::Precondition(format!("token {t} outside 0..{k}")));
        }
        counts.entry(shop).or_insert_with(|| vec![0; k])[t] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(shop, c)| {
            let n: usize = c.iter().sum();
            StoreDistribution {
                shop_id: shop.to_string(),
                p: c.iter().map(|v| *v as f64 / n as f64).collect(),
                buyers: n,
            }
        })
        .collect())
}

/// Mixes token stratum profiles by the store's token distribution.
pub fn predict_store_strata(d: &StoreDistribution, profiles: &BTreeMap<usize, &TokenProfile>) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for (k, w) in d.support() {
        let p = profiles
            .get(&k)
            .ok_or_else(|| Error::Precondition(format!("no profile for token {k} used by shop {}", d.shop_id)))?;
        out.iter_mut().zip(p.stratum_dist).for_each(|(o, s)| *o += w * s);
    }
    Ok(out)
}

fn check_normalized(p: &[f64], name: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 || p.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::Precondition(format!("{name} is not a distribution (sum {s})")));
    }
    Ok(())
}

/// Base-2 Jensen–Shannon divergence, in `[0, 1]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape("distributions have different supports".into()));
    }
    check_normalized(p, "p")?;
    check_normalized(q, "q")?;
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (2.0 * x / (x + y)).log2())
            .sum()
    };
    Ok((0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p)).clamp(0.0, 1.0))
}

/// Stratum shares over A–D per shop, E excluded.
pub fn true_store_strata(rows: &[&BuyerShopAggregate]) -> BTreeMap<String, [f64; 4]> {
    let mut counts: BTreeMap<String, [usize; 4]> = BTreeMap::new();
    for a in rows.iter().filter(|a| a.stratum != Stratum::E) {
        counts.entry(a.shop_id.clone()).or_default()[a.stratum.index()] += 1;
    }
    counts
        .into_iter()
        .map(|(s, c)| {
            let n: usize = c.iter().sum();
            (s, c.map(|v| v as f64 / n as f64))
        })
        .collect()
}

/// Mean raw scalar vector per shop.
pub fn true_store_means(rows: &[&BuyerShopAggregate]) -> BTreeMap<String, Vec<f64>> {
    let mut acc: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for a in rows {
        let e = acc.entry(a.shop_id.clone()).or_insert((vec![0.0; 16], 0));
        e.0.iter_mut().zip(a.scalars.to_array()).for_each(|(s, v)| *s += v);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(s, (sum, n))| (s, sum.iter().map(|v| v / n as f64).collect()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShopStrata {
    pub shop_id: String,
    pub actual: [f64; 4],
    pub predicted: [f64; 4],
    pub js: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub shops: Vec<ShopStrata>,
    pub mean_js: f64,
    pub reconstruction: Reconstruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureR2 {
    pub feature: String,
    /// `None` when the feature does not vary across shops.
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub predicted: BTreeMap<String, Vec<f64>>,
    pub r2: Vec<FeatureR2>,
}

impl Reconstruction {
    pub fn intent_r2(&self) -> Option<f64> {
        self.r2[INTENT_SLOT].r2
    }
}

/// `x_hat_s = sum_k p_s(k) * centroid_k` and per-feature R² against the true
/// shop means. R² needs at least three shops.
pub fn reconstruct_store_features(
    dists: &[StoreDistribution],
    profiles: &BTreeMap<usize, &TokenProfile>,
    actual: &BTreeMap<String, Vec<f64>>,
) -> Result<Reconstruction> {
    let mut predicted = BTreeMap::new();
    for d in dists {
        let mut x = vec![0.0; 16];
        for (k, w) in d.support() {
            let p = profiles
                .get(&k)
                .ok_or_else(|| Error::Precondition(format!("no profile for token {k} used by shop {}", d.shop_id)))?;
            x.iter_mut().zip(&p.centroid).for_each(|(o, c)| *o += w * c);
        }
        predicted.insert(d.shop_id.clone(), x);
    }
    let shops: Vec<&String> = predicted.keys().filter(|s| actual.contains_key(*s)).collect();
    let r2 = (0..16)
        .map(|j| {
            let r2 = if shops.len() < 3 {
                None
            } else {
                let ys: Vec<f64> = shops.iter().map(|s| actual[*s][j]).collect();
                let mean = ys.iter().sum::<f64>() / ys.len() as f64;
                let ss_tot: f64 = ys.iter().map(|y| (y - mean) * (y - mean)).sum();
                let ss_res: f64 = shops
                    .iter()
                    .zip(&ys)
                    .map(|(s, y)| (y - predicted[*s][j]).powi(2))
                    .sum();
                (ss_tot > 1e-12 * (1.0 + mean * mean)).then(|| 1.0 - ss_res / ss_tot)
            };
            FeatureR2 {
                feature: SCALAR_NAMES[j].to_string(),
                r2,
            }
        })
        .collect();
    Ok(Reconstruction { predicted, r2 })
}

/// Full distribution-recovery report over the shops of `rows`.
pub fn distribution_report(
    rows: &[&BuyerShopAggregate],
    tokens: &[usize],
    k: usize,
    profiles: &[TokenProfile],
) -> Result<DistributionReport> {
    let modeled: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].stratum != Stratum::E).collect();
    let pairs: Vec<(&str, usize)> = modeled.iter().map(|&i| (rows[i].shop_id.as_str(), tokens[i])).collect();
    let dists = store_distributions(&pairs, k)?;
    let pm = profile_map(profiles);
    let actual = true_store_strata(rows);
    let mut shops = Vec::new();
    for d in &dists {
        if d.buyers == 0 {
            tracing::warn!(shop = %d.shop_id, "shop without buyers excluded");
            continue;
        }
        let predicted = predict_store_strata(d, &pm)?;
        let actual = actual[&d.shop_id];
        shops.push(ShopStrata {
            shop_id: d.shop_id.clone(),
            actual,
            predicted,
            js: js_divergence(&actual, &predicted)?,
        });
    }
    let mean_js = shops.iter().map(|s| s.js).sum::<f64>() / shops.len().max(1) as f64;
    let modeled_rows: Vec<&BuyerShopAggregate> = modeled.iter().map(|&i| rows[i]).collect();
    let reconstruction = reconstruct_store_features(&dists, &pm, &true_store_means(&modeled_rows))?;
    Ok(DistributionReport {
        shops,
        mean_js,
        reconstruction,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub buyer_id: String,
    pub shop_id: String,
    pub token: usize,
}

pub fn write_assignments<W: Write>(mut w: W, rows: &[Assignment]) -> Result<()> {
    writeln!(w, "buyer_id\tshop_id\ttoken")?;
    for a in rows {
        writeln!(w, "{}\t{}\t{}", a.buyer_id, a.shop_id, a.token)?;
    }
    Ok(())
}

pub fn read_assignments<R: BufRead>(r: R) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let token = f.get(2).and_then(|t| t.parse().ok());
        match (f.len(), token) {
            (3, Some(token)) => out.push(Assignment {
                buyer_id: f[0].into(),
                shop_id: f[1].into(),
                token,
            }),
            _ => return Err(Error::Format(format!("assignment line {}: expected buyer, shop, token", i + 1))),
        }
    }
    Ok(out)
}

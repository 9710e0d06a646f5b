//! Training objective: group-aware reconstruction, commitment, gated InfoNCE,
//! and the weighted cross-entropy auxiliary heads with their label binning.
//!
//! Every loss returns its value together with the gradient with respect to
//! its direct input; composition through the networks happens in
//! [`crate::trainer`].

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{BuyerShopAggregate, FunnelSignature};
use crate::features::{FeatureLayout, N_CHANNELS, SCALAR_GROUPS};
use crate::linalg::{dot, norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub lambda_recon: f64,
    pub beta: f64,
    pub lambda_contrastive: f64,
    pub lambda_aux: f64,
    pub tau: f64,
    pub top_m: usize,
    pub top_f: usize,
    pub n_bins: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda_recon: 0.3,
            beta: 0.75,
            lambda_contrastive: 0.15,
            lambda_aux: 0.5,
            tau: 0.1,
            top_m: 10,
            top_f: 3,
            n_bins: 3,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_recon, self.beta, self.lambda_contrastive, self.lambda_aux, self.tau];
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights and temperature must be positive".into()));
        }
        if self.top_f == 0 || self.top_m <= self.top_f {
            return Err(Error::Config(format!(
                "mining needs M > F >= 1, got M = {}, F = {}",
                self.top_m, self.top_f
            )));
        }
        if self.n_bins != 3 {
            return Err(Error::Config("auxiliary heads use exactly 3 bins".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- reconstruction

#[derive(Debug, Clone, PartialEq)]
pub enum GroupKind {
    /// Mean squared error over the group's dims.
    Mse,
    /// Cosine distance, counted only when `x[mask] == 1`.
    Cosine { mask: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub name: String,
    pub range: Range<usize>,
    pub kind: GroupKind,
}

/// Semantic groups of a feature vector. Slots outside every group (the mask
/// bits) are not reconstructed.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLayout {
    pub groups: Vec<Group>,
    pub width: usize,
}

impl GroupLayout {
    pub fn standard(layout: FeatureLayout) -> Self {
        let mut groups: Vec<Group> = SCALAR_GROUPS
            .iter()
            .map(|(name, r)| Group {
                name: (*name).to_string(),
                range: r.clone(),
                kind: GroupKind::Mse,
            })
            .collect();
        for c in 0..N_CHANNELS {
            groups.push(Group {
                name: crate::features::CHANNEL_NAMES[c].to_string(),
                range: layout.channel(c),
                kind: GroupKind::Cosine { mask: layout.mask(c) },
            });
        }
        Self {
            groups,
            width: layout.len(),
        }
    }
}

/// Per-row group loss; accumulates `scale * d loss / d xhat` into `grad`.
fn recon_row(x: &[f64], xhat: &[f64], layout: &GroupLayout, scale: f64, grad: &mut [f64]) -> f64 {
    let present: Vec<&Group> = layout
        .groups
        .iter()
        .filter(|g| match g.kind {
            GroupKind::Mse => true,
            GroupKind::Cosine { mask } => x[mask] == 1.0,
        })
        .collect();
    if present.is_empty() {
        return 0.0;
    }
    let share = 1.0 / present.len() as f64;
    let mut total = 0.0;
    for g in present {
        let (a, b) = (&xhat[g.range.clone()], &x[g.range.clone()]);
        match g.kind {
            GroupKind::Mse => {
                let n = a.len() as f64;
                let mut s = 0.0;
                for (k, (p, t)) in a.iter().zip(b).enumerate() {
                    let d = p - t;
                    s += d * d;
                    grad[g.range.start + k] += scale * share * 2.0 * d / n;
                }
                total += s / n;
            }
            GroupKind::Cosine { .. } => {
                let (na, nb) = (norm(a), norm(b));
                if na == 0.0 || nb == 0.0 {
                    tracing::debug!(group = %g.name, "zero-norm embedding slice; cosine distance taken as 1");
                    total += 1.0;
                    continue;
                }
                let cos = dot(a, b) / (na * nb);
                total += 1.0 - cos;
                for (k, (p, t)) in a.iter().zip(b).enumerate() {
                    let dcos = t / (na * nb) - cos * p / (na * na);
                    grad[g.range.start + k] -= scale * share * dcos;
                }
            }
        }
    }
    total * share
}

/// Batch mean of the per-row group reconstruction loss, with its gradient
/// with respect to `xhat`.
pub fn group_recon_loss(x: &Matrix, xhat: &Matrix, layout: &GroupLayout) -> Result<(f64, Matrix)> {
    if x.rows != xhat.rows || x.cols != xhat.cols || x.cols != layout.width {
        return Err(Error::Shape("reconstruction inputs disagree with the layout".into()));
    }
    let mut grad = Matrix::zeros(x.rows, x.cols);
    if x.rows == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / x.rows as f64;
    let mut total = 0.0;
    for i in 0..x.rows {
        let row_grad = &mut grad.data[i * x.cols..(i + 1) * x.cols];
        total += recon_row(x.row(i), xhat.row(i), layout, scale, row_grad);
    }
    Ok((total * scale, grad))
}

// ---------------------------------------------------------------- commitment

/// Batch mean of `|z_e - z_q|^2`; the gradient is with respect to `z_e` only.
pub fn commitment_loss(z_e: &Matrix, z_q: &Matrix) -> Result<(f64, Matrix)> {
    if z_e.rows != z_q.rows || z_e.cols != z_q.cols {
        return Err(Error::Shape("commitment inputs disagree".into()));
    }
    let mut grad = Matrix::zeros(z_e.rows, z_e.cols);
    if z_e.rows == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / z_e.rows as f64;
    let mut total = 0.0;
    for (k, (a, b)) in z_e.data.iter().zip(&z_q.data).enumerate() {
        let d = a - b;
        total += d * d;
        grad.data[k] = 2.0 * d * scale;
    }
    Ok((total * scale, grad))
}

// ---------------------------------------------------------------- mining

/// Normalized scalar slots used by the behavioral gate: product views,
/// search sessions, collection sessions, session duration.
pub const BEHAVIOR_SLOTS: [usize; 4] = [9, 6, 7, 8];

#[derive(Debug, Clone, PartialEq)]
pub struct MiningRow {
    pub signature: FunnelSignature,
    pub channels: [Option<Vec<f64>>; N_CHANNELS],
    pub behavior: [f64; 4],
}

impl MiningRow {
    /// Extracts the mining view of one feature vector.
    pub fn from_features(x: &[f64], layout: FeatureLayout, signature: FunnelSignature) -> Self {
        let channels = std::array::from_fn(|c| {
            (x[layout.mask(c)] == 1.0).then(|| x[layout.channel(c)].to_vec())
        });
        Self {
            signature,
            channels,
            behavior: BEHAVIOR_SLOTS.map(|s| x[s]),
        }
    }
}

/// Cosine over the concatenation of channels present in both rows; `None`
/// when no channel is shared.
pub fn shared_channel_cosine(a: &MiningRow, b: &MiningRow) -> Option<f64> {
    let (mut ab, mut aa, mut bb, mut shared) = (0.0, 0.0, 0.0, false);
    for (x, y) in a.channels.iter().zip(&b.channels) {
        if let (Some(x), Some(y)) = (x, y) {
            shared = true;
            ab += dot(x, y);
            aa += dot(x, x);
            bb += dot(y, y);
        }
    }
    if !shared {
        return None;
    }
    if aa == 0.0 || bb == 0.0 {
        return Some(0.0);
    }
    Some(ab / (aa.sqrt() * bb.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MiningOutcome {
    pub positives: Vec<Option<usize>>,
    pub stage1: Vec<Vec<usize>>,
    pub stage2: Vec<Vec<usize>>,
    pub stage3: Vec<Vec<usize>>,
}

impl MiningOutcome {
    pub fn anchors(&self) -> usize {
        self.positives.iter().filter(|p| p.is_some()).count()
    }
}

/// Three-gate positive selection within a batch. Ties at every stage go to
/// the lower batch index.
pub fn mine_positives(rows: &[MiningRow], top_m: usize, top_f: usize) -> MiningOutcome {
    let n = rows.len();
    let mut out = MiningOutcome::default();
    for i in 0..n {
        let s1: Vec<usize> = (0..n).filter(|&j| j != i && rows[j].signature == rows[i].signature).collect();
        let mut scored: Vec<(usize, f64)> = s1
            .iter()
            .filter_map(|&j| shared_channel_cosine(&rows[i], &rows[j]).map(|c| (j, c)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(top_m);
        let mut s2: Vec<usize> = scored.iter().map(|p| p.0).collect();
        let mut near: Vec<(usize, f64)> = s2
            .iter()
            .map(|&j| {
                let d: f64 = rows[i]
                    .behavior
                    .iter()
                    .zip(&rows[j].behavior)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (j, d)
            })
            .collect();
        near.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        near.truncate(top_f);
        let s3: Vec<usize> = near.iter().map(|p| p.0).collect();
        out.positives.push(s3.first().copied());
        s2.sort_unstable();
        let mut s3_sorted = s3;
        s3_sorted.sort_unstable();
        out.stage1.push(s1);
        out.stage2.push(s2);
        out.stage3.push(s3_sorted);
    }
    out
}

// ---------------------------------------------------------------- InfoNCE

/// Mean InfoNCE over anchors that have a positive, with the gradient with
/// respect to `z`. The denominator runs over all non-self rows.
pub fn info_nce(z: &Matrix, positives: &[Option<usize>], tau: f64) -> Result<(f64, Matrix)> {
    let n = z.rows;
    if positives.len() != n {
        return Err(Error::Shape("one positive slot per row is required".into()));
    }
    let mut grad = Matrix::zeros(n, z.cols);
    let anchors = positives.iter().filter(|p| p.is_some()).count();
    if anchors == 0 {
        tracing::debug!("no anchor has a positive; contrastive term is 0");
        return Ok((0.0, grad));
    }
    let norms: Vec<f64> = (0..n).map(|i| norm(z.row(i))).collect();
    let mut u = z.clone();
    for i in 0..n {
        let inv = if norms[i] > 0.0 { 1.0 / norms[i] } else { 0.0 };
        u.row_mut(i).iter_mut().for_each(|v| *v *= inv);
    }
    let mut sim = Matrix::zeros(n, n);
    crate::linalg::gemm(1.0, &u, false, &u, true, 0.0, &mut sim)?;

    let mut du = Matrix::zeros(n, z.cols);
    let scale = 1.0 / anchors as f64;
    let mut total = 0.0;
    for (i, pos) in positives.iter().enumerate() {
        let Some(p) = *pos else { continue };
        if p == i || p >= n {
            return Err(Error::Precondition(format!("invalid positive {p} for anchor {i}")));
        }
        let logits: Vec<f64> = (0..n).map(|j| sim.get(i, j) / tau).collect();
        let max = (0..n).filter(|&j| j != i).map(|j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&j| j != i).map(|j| (logits[j] - max).exp()).sum();
        total += max + denom.ln() - logits[p];
        for j in (0..n).filter(|&j| j != i) {
            let soft = (logits[j] - max).exp() / denom;
            let g = scale * (soft - if j == p { 1.0 } else { 0.0 }) / tau;
            if g == 0.0 {
                continue;
            }
            for k in 0..z.cols {
                du.data[i * z.cols + k] += g * u.data[j * z.cols + k];
                du.data[j * z.cols + k] += g * u.data[i * z.cols + k];
            }
        }
    }
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        let proj = dot(du.row(i), u.row(i));
        for k in 0..z.cols {
            grad.data[i * z.cols + k] = (du.get(i, k) - proj * u.get(i, k)) / norms[i];
        }
    }
    Ok((total * scale, grad))
}

// ---------------------------------------------------------------- auxiliary heads

pub const HEAD_NAMES: [&str; 3] = ["engagement", "exploration", "purchase"];

/// Batch mean of `w_y * -log softmax(logits)_y`, with the gradient with
/// respect to the logits.
pub fn weighted_ce(logits: &Matrix, labels: &[u8], weights: &[f64; 3]) -> Result<(f64, Matrix)> {
    if logits.cols != 3 || logits.rows != labels.len() {
        return Err(Error::Shape("head logits must be rows x 3 with one label per row".into()));
    }
    let mut grad = Matrix::zeros(logits.rows, 3);
    if logits.rows == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / logits.rows as f64;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y > 2 {
            return Err(Error::Precondition(format!("label {y} outside 0..3")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_p = row[y] - max - sum.ln();
        total += -weights[y] * log_p;
        for c in 0..3 {
            let p = (row[c] - max).exp() / sum;
            grad.data[i * 3 + c] = scale * weights[y] * (p - if c == y { 1.0 } else { 0.0 });
        }
    }
    Ok((total * scale, grad))
}

/// `w_i = N / (3 n_i)`.
pub fn class_weights(counts: [usize; 3]) -> Result<[f64; 3]> {
    if let Some(i) = counts.iter().position(|c| *c == 0) {
        return Err(Error::Config(format!("bin {i} is empty; class weights undefined")));
    }
    let n: usize = counts.iter().sum();
    Ok(counts.map(|c| n as f64 / (3.0 * c as f64)))
}

// ---------------------------------------------------------------- label binning

/// Bin edges in `log1p` space. Values on an edge go to the lower bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TercileEdges {
    pub lo: f64,
    pub hi: f64,
}

impl TercileEdges {
    pub fn bin(&self, raw: f64) -> u8 {
        let v = raw.ln_1p();
        if v <= self.lo {
            0
        } else if v <= self.hi {
            1
        } else {
            2
        }
    }
}

/// Terciles of `log1p(values)`.
pub fn bin_log_terciles(values: &[f64]) -> Result<(TercileEdges, Vec<u8>)> {
    let logs: Vec<f64> = values.iter().map(|v| v.ln_1p()).collect();
    let sorted = crate::linalg::sorted_copy(&logs);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Config(format!(
            "tercile binning needs at least 3 distinct values, got {}",
            distinct.len()
        )));
    }
    let edges = TercileEdges {
        lo: crate::linalg::quantile_sorted(&sorted, 1.0 / 3.0),
        hi: crate::linalg::quantile_sorted(&sorted, 2.0 / 3.0),
    };
    Ok((edges, values.iter().map(|v| edges.bin(*v)).collect()))
}

pub fn purchase_score(checkout_sessions: u32, atc_sessions: u32, w_co: u64, w_atc: u64) -> u64 {
    w_co * u64::from(checkout_sessions) + w_atc * u64::from(atc_sessions)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum PurchaseRule {
    /// `score < lo` is Low, `score < hi` is Medium, the rest High.
    Edges { lo: f64, hi: f64 },
    /// Low = no activity, Medium = add-to-cart only, High = the rest.
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurchaseBinning {
    pub w_co: u64,
    pub w_atc: u64,
    pub rule: PurchaseRule,
}

impl PurchaseBinning {
    pub fn bin(&self, checkout_sessions: u32, atc_sessions: u32) -> u8 {
        match self.rule {
            PurchaseRule::Edges { lo, hi } => {
                let s = purchase_score(checkout_sessions, atc_sessions, self.w_co, self.w_atc) as f64;
                if s < lo {
                    0
                } else if s < hi {
                    1
                } else {
                    2
                }
            }
            PurchaseRule::Fallback => match (checkout_sessions, atc_sessions) {
                (0, 0) => 0,
                (0, _) => 1,
                _ => 2,
            },
        }
    }
}

/// Greedy adjacent merging of the distinct composite scores down to three
/// groups, always merging the adjacent pair with the smallest combined count
/// (ties toward lower scores). Edges sit halfway between groups.
pub fn purchase_bins(pairs: &[(u32, u32)], w_co: u64, w_atc: u64) -> PurchaseBinning {
    let mut hist: BTreeMap<u64, usize> = BTreeMap::new();
    for &(co, atc) in pairs {
        *hist.entry(purchase_score(co, atc, w_co, w_atc)).or_default() += 1;
    }
    if hist.len() < 3 {
        tracing::warn!(distinct = hist.len(), "fewer than 3 purchase scores; using the fallback bins");
        return PurchaseBinning {
            w_co,
            w_atc,
            rule: PurchaseRule::Fallback,
        };
    }
    // (min score, max score, count)
    let mut groups: Vec<(u64, u64, usize)> = hist.into_iter().map(|(s, c)| (s, s, c)).collect();
    while groups.len() > 3 {
        let mut best = 0;
        for i in 1..groups.len() - 1 {
            if groups[i].2 + groups[i + 1].2 < groups[best].2 + groups[best + 1].2 {
                best = i;
            }
        }
        let next = groups.remove(best + 1);
        groups[best].1 = next.1;
        groups[best].2 += next.2;
    }
    let mid = |a: u64, b: u64| (a as f64 + b as f64) / 2.0;
    PurchaseBinning {
        w_co,
        w_atc,
        rule: PurchaseRule::Edges {
            lo: mid(groups[0].1, groups[1].0),
            hi: mid(groups[1].1, groups[2].0),
        },
    }
}

/// Per-row auxiliary labels: engagement, exploration, purchase bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxLabels {
    pub bins: [u8; 3],
    pub s_pur: u64,
}

pub fn engagement_value(a: &BuyerShopAggregate) -> f64 {
    a.scalars.total_duration_ms as f64
}

pub fn exploration_value(a: &BuyerShopAggregate) -> f64 {
    let s = &a.scalars;
    f64::from(s.search_sessions + s.collection_sessions + s.pdp_view_sessions)
}

pub const PURCHASE_W_CO: u64 = 8;
pub const PURCHASE_W_ATC: u64 = 3;

/// Bin rules and class weights fitted on the training rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelBinning {
    pub engagement: TercileEdges,
    pub exploration: TercileEdges,
    pub purchase: PurchaseBinning,
    pub weights: [[f64; 3]; 3],
}

impl LabelBinning {
    pub fn fit(rows: &[&BuyerShopAggregate]) -> Result<Self> {
        let (engagement, eb) = bin_log_terciles(&rows.iter().map(|a| engagement_value(a)).collect::<Vec<_>>())?;
        let (exploration, xb) = bin_log_terciles(&rows.iter().map(|a| exploration_value(a)).collect::<Vec<_>>())?;
        let pairs: Vec<(u32, u32)> = rows
            .iter()
            .map(|a| (a.scalars.checkout_sessions, a.scalars.atc_sessions))
            .collect();
        let purchase = purchase_bins(&pairs, PURCHASE_W_CO, PURCHASE_W_ATC);
        let pb: Vec<u8> = pairs.iter().map(|&(co, atc)| purchase.bin(co, atc)).collect();
        let count = |bins: &[u8]| {
            let mut c = [0usize; 3];
            bins.iter().for_each(|b| c[*b as usize] += 1);
            c
        };
        let weights = [
            class_weights(count(&eb))?,
            class_weights(count(&xb))?,
            class_weights(count(&pb))?,
        ];
        Ok(Self {
            engagement,
            exploration,
            purchase,
            weights,
        })
    }

    pub fn labels(&self, a: &BuyerShopAggregate) -> AuxLabels {
        let s = &a.scalars;
        AuxLabels {
            bins: [
                self.engagement.bin(engagement_value(a)),
                self.exploration.bin(exploration_value(a)),
                self.purchase.bin(s.checkout_sessions, s.atc_sessions),
            ],
            s_pur: purchase_score(s.checkout_sessions, s.atc_sessions, PURCHASE_W_CO, PURCHASE_W_ATC),
        }
    }
}

// ---------------------------------------------------------------- total

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub recon: f64,
    pub commit: f64,
    pub contrastive: f64,
    pub engage: f64,
    pub explore: f64,
    pub purchase: f64,
}

impl LossTerms {
    pub fn aux(&self) -> f64 {
        self.engage + self.explore + self.purchase
    }

    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("recon", self.recon),
            ("commit", self.commit),
            ("contrastive", self.contrastive),
            ("engage", self.engage),
            ("explore", self.explore),
            ("purchase", self.purchase),
        ]
    }
}

/// `lr*recon + beta*commit + lc*contrastive + la*(engage + explore + purchase)`.
pub fn total_loss(t: &LossTerms, h: &HyperParams) -> Result<f64> {
    if let Some((name, v)) = t.named().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss term {name} = {v}")));
    }
    Ok(h.lambda_recon * t.recon + h.beta * t.commit + h.lambda_contrastive * t.contrastive + h.lambda_aux * t.aux())
}

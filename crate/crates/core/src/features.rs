//! Normalization state and assembly of the fixed-layout feature vector.
//!
//! Layout: `[16 normalized scalars | viewed | carted | purchased | 3 masks]`
//! where each embedding channel has `d_pca` dimensions (403 values at the
//! default `d_pca = 128`).
//!
//! Scalar chains, each ending with a robust z-score fitted on training rows:
//!
//! | slots  | group       | chain                                   |
//! |--------|-------------|-----------------------------------------|
//! | 0..8   | exposure    | `log1p`                                 |
//! | 8..10  | engagement  | `log1p`                                 |
//! | 10..13 | funnel rate | `(n+1)/(N+2)` then `logit`              |
//! | 13     | intent      | `logit` with clamp `[eps, 1-eps]`       |
//! | 14..16 | dollars     | `log1p`                                 |
//!
//! Embedding channels are z-scored per dimension and projected on a PCA
//! basis fitted on rows whose channel is present.

use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{read_f32, read_str, read_u32, read_u64, write_str, BuyerShopAggregate, Stratum};
use crate::linalg::{quantile_sorted, sorted_copy, Matrix};

pub const N_SCALARS: usize = 16;
pub const N_CHANNELS: usize = 3;
pub const MAD_SCALE: f64 = 1.4826;
pub const LAPLACE_ALPHA: f64 = 1.0;
pub const LAPLACE_BETA: f64 = 1.0;
pub const DEFAULT_LOGIT_EPS: f64 = 1e-6;
pub const CHANNEL_NAMES: [&str; 3] = ["viewed", "carted", "purchased"];

/// Scalar feature groups and their slot ranges.
pub const SCALAR_GROUPS: [(&str, Range<usize>); 5] = [
    ("exposure", 0..8),
    ("engagement", 8..10),
    ("funnel", 10..13),
    ("intent", 13..14),
    ("dollars", 14..16),
];

/// Positions of the feature vector for a given PCA width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub d_pca: usize,
}

impl FeatureLayout {
    pub fn new(d_pca: usize) -> Self {
        Self { d_pca }
    }

    pub fn len(&self) -> usize {
        N_SCALARS + N_CHANNELS * self.d_pca + N_CHANNELS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn scalars(&self) -> Range<usize> {
        0..N_SCALARS
    }

    pub fn channel(&self, c: usize) -> Range<usize> {
        let start = N_SCALARS + c * self.d_pca;
        start..start + self.d_pca
    }

    pub fn mask(&self, c: usize) -> usize {
        N_SCALARS + N_CHANNELS * self.d_pca + c
    }
}

/// `(x - median) / IQR`, falling back to `1.4826 * MAD`, then to 0.
pub fn robust_z(x: f64, median: f64, iqr: f64, mad: f64) -> f64 {
    if iqr > 0.0 {
        (x - median) / iqr
    } else if mad > 0.0 {
        (x - median) / (MAD_SCALE * mad)
    } else {
        0.0
    }
}

/// Laplace-smoothed rate `(n + 1) / (N + 2)`.
pub fn smooth_rate(n: u32, total: u32) -> Result<f64> {
    if n > total {
        return Err(Error::Precondition(format!("smooth_rate: n = {n} > N = {total}")));
    }
    Ok((f64::from(n) + LAPLACE_ALPHA) / (f64::from(total) + LAPLACE_ALPHA + LAPLACE_BETA))
}

/// `log(p' / (1 - p'))` with `p' = clamp(p, eps, 1 - eps)`.
pub fn logit_eps(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustStats {
    pub median: f64,
    pub iqr: f64,
    pub mad: f64,
}

impl RobustStats {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("robust statistics need at least one row".into()));
        }
        let sorted = sorted_copy(values);
        let median = quantile_sorted(&sorted, 0.5);
        let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
        let dev = sorted_copy(&values.iter().map(|v| (v - median).abs()).collect::<Vec<_>>());
        let mad = quantile_sorted(&dev, 0.5);
        Ok(Self { median, iqr, mad })
    }

    pub fn apply(&self, x: f64) -> f64 {
        robust_z(x, self.median, self.iqr, self.mad)
    }
}

/// Per-channel z-scoring and principal-component projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `d_emb x d_pca`, orthonormal columns.
    pub basis: Matrix,
    pub explained_variance_ratio: f64,
}

impl PcaState {
    pub fn d_emb(&self) -> usize {
        self.mean.len()
    }

    pub fn d_pca(&self) -> usize {
        self.basis.cols
    }

    fn standardize(&self, x: &[f32]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (f64::from(*v) - m) / s)
            .collect()
    }

    /// Projects a raw embedding onto the basis.
    pub fn project(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.d_emb() {
            return Err(Error::Shape(format!(
                "embedding width {} vs PCA input {}",
                x.len(),
                self.d_emb()
            )));
        }
        let z = self.standardize(x);
        let k = self.d_pca();
        let mut out = vec![0.0; k];
        for (i, zi) in z.iter().enumerate() {
            let row = self.basis.row(i);
            for (o, b) in out.iter_mut().zip(row) {
                *o += zi * b;
            }
        }
        Ok(out)
    }

    /// Maps a projection back to the standardized embedding space.
    pub fn unproject_standardized(&self, p: &[f64]) -> Vec<f64> {
        (0..self.d_emb())
            .map(|i| crate::linalg::dot(self.basis.row(i), p))
            .collect()
    }
}

/// Fits z-scoring plus the top-`d_pca` principal components of `rows`.
///
/// Components are ordered by decreasing eigenvalue and each is signed so its
/// largest-magnitude loading is positive.
pub fn fit_pca(rows: &[&[f32]], d_pca: usize) -> Result<PcaState> {
    let n = rows.len();
    let Some(first) = rows.first() else {
        return Err(Error::Config(format!(
            "PCA needs at least d_pca = {d_pca} present rows, got 0; use a smaller d_pca"
        )));
    };
    let d = first.len();
    if d_pca == 0 || d_pca > d {
        return Err(Error::Config(format!(
            "d_pca = {d_pca} must be in 1..={d} (the embedding width)"
        )));
    }
    if n < d_pca {
        return Err(Error::Config(format!(
            "PCA needs at least d_pca = {d_pca} present rows, got {n}; use a smaller d_pca"
        )));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != d) {
        return Err(Error::Shape(format!("PCA row {bad} has a different width")));
    }

    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += f64::from(*v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut std = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in std.iter_mut().zip(r.iter()).zip(&mean) {
            let c = f64::from(*v) - m;
            *s += c * c;
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n as f64).sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }

    let mut z = Matrix::zeros(n, d);
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            z.data[i * d + j] = (f64::from(*v) - mean[j]) / std[j];
        }
    }
    let mut cov = Matrix::zeros(d, d);
    crate::linalg::gemm(1.0 / n as f64, &z, true, &z, false, 0.0, &mut cov)?;
    // exact symmetry for the eigen solver
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov.data[i * d + j] + cov.data[j * d + i]);
            cov.data[i * d + j] = v;
            cov.data[j * d + i] = v;
        }
    }

    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov.data));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let kept: f64 = order[..d_pca].iter().map(|&i| eig.eigenvalues[i].max(0.0)).sum();
    let explained_variance_ratio = if total > 0.0 { (kept / total).clamp(0.0, 1.0) } else { 1.0 };

    let mut basis = Matrix::zeros(d, d_pca);
    for (c, &idx) in order[..d_pca].iter().enumerate() {
        let col = eig.eigenvectors.column(idx);
        let mut best = 0;
        for i in 1..d {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            basis.data[i * d_pca + c] = sign * col[i];
        }
    }

    Ok(PcaState {
        mean,
        std,
        basis,
        explained_variance_ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub d_pca: usize,
    pub logit_eps: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            d_pca: 128,
            logit_eps: DEFAULT_LOGIT_EPS,
        }
    }
}

/// Fitted normalization for scalars and embedding channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerState {
    pub scalars: Vec<RobustStats>,
    pub smoothing_alpha: f64,
    pub smoothing_beta: f64,
    pub logit_eps: f64,
    pub pca: Vec<PcaState>,
    pub d_pca: usize,
    pub d_emb: usize,
}

/// The scalar chain up to (not including) the robust z-score.
pub fn pre_robust_scalars(a: &BuyerShopAggregate, eps: f64) -> Result<[f64; N_SCALARS]> {
    let s = &a.scalars;
    let raw = s.to_array();
    let mut out = [0.0; N_SCALARS];
    for i in (0..10).chain(14..16) {
        out[i] = raw[i].ln_1p();
    }
    let rate = |n: u32| -> Result<f64> { Ok(logit_eps(smooth_rate(n, s.total_sessions)?, 0.0)) };
    out[10] = rate(s.atc_sessions)?;
    out[11] = rate(s.checkout_sessions)?;
    out[12] = rate(a.browse_only_sessions)?;
    out[13] = logit_eps(s.intent_strength, eps);
    Ok(out)
}

impl NormalizerState {
    /// Fits scalar statistics on all `rows` and one PCA per channel on the
    /// rows where that channel is present.
    pub fn fit(rows: &[&BuyerShopAggregate], cfg: &FeatureConfig) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("normalizer needs at least one row".into()));
        }
        let pre: Vec<[f64; N_SCALARS]> = rows
            .iter()
            .map(|a| pre_robust_scalars(a, cfg.logit_eps))
            .collect::<Result<_>>()?;
        let scalars = (0..N_SCALARS)
            .map(|j| RobustStats::fit(&pre.iter().map(|r| r[j]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;

        let mut pca = Vec::with_capacity(N_CHANNELS);
        let mut d_emb = None;
        for c in 0..N_CHANNELS {
            let present: Vec<&[f32]> = rows.iter().filter_map(|a| a.embeddings()[c]).collect();
            let state = fit_pca(&present, cfg.d_pca).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{} channel: {msg}", CHANNEL_NAMES[c])),
                other => other,
            })?;
            if let Some(d) = d_emb {
                if d != state.d_emb() {
                    return Err(Error::Shape("embedding channels disagree on width".into()));
                }
            }
            d_emb = Some(state.d_emb());
            pca.push(state);
        }
        Ok(Self {
            scalars,
            smoothing_alpha: LAPLACE_ALPHA,
            smoothing_beta: LAPLACE_BETA,
            logit_eps: cfg.logit_eps,
            pca,
            d_pca: cfg.d_pca,
            d_emb: d_emb.unwrap_or(0),
        })
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::new(self.d_pca)
    }

    /// Builds the feature vector of one aggregate.
    pub fn assemble(&self, a: &BuyerShopAggregate) -> Result<FeatureVector> {
        let layout = self.layout();
        let mut values = vec![0f32; layout.len()];
        let pre = pre_robust_scalars(a, self.logit_eps)?;
        for (j, (v, st)) in pre.iter().zip(&self.scalars).enumerate() {
            let z = st.apply(*v);
            if !z.is_finite() {
                return Err(Error::NonFinite(format!(
                    "scalar slot {j} ({}) of buyer {} at shop {}",
                    crate::events::SCALAR_NAMES[j],
                    a.buyer_id,
                    a.shop_id
                )));
            }
            values[j] = z as f32;
        }
        for (c, emb) in a.embeddings().iter().enumerate() {
            if let Some(e) = emb {
                let p = self.pca[c].project(e)?;
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "{} channel of buyer {} at shop {}",
                        CHANNEL_NAMES[c], a.buyer_id, a.shop_id
                    )));
                }
                for (slot, v) in layout.channel(c).zip(p) {
                    values[slot] = v as f32;
                }
                values[layout.mask(c)] = 1.0;
            }
        }
        Ok(FeatureVector { values })
    }
}

/// A normalized model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f32>,
}

impl FeatureVector {
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| f64::from(*v)).collect()
    }
}

/// One row of a feature matrix file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub buyer_id: String,
    pub shop_id: String,
    pub stratum: Stratum,
    pub values: Vec<f32>,
}

pub const FEATURE_MAGIC: &[u8; 7] = b"SPFEAT1";

pub fn write_feature_matrix<W: Write>(mut w: W, width: usize, rows: &[FeatureRow]) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(rows.len() as u64).to_le_bytes())?;
    for r in rows {
        if r.values.len() != width {
            return Err(Error::Shape(format!(
                "row for {} has width {}, header says {width}",
                r.buyer_id,
                r.values.len()
            )));
        }
        write_str(&mut w, &r.buyer_id)?;
        write_str(&mut w, &r.shop_id)?;
        w.write_all(&[r.stratum.as_byte()])?;
        for v in &r.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Returns the vector width and the rows.
pub fn read_feature_matrix<R: Read>(mut r: R) -> Result<(usize, Vec<FeatureRow>)> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format("feature matrix magic mismatch".into()));
    }
    let width = read_u32(&mut r)? as usize;
    let n = read_u64(&mut r)?;
    let mut rows = Vec::new();
    for _ in 0..n {
        let buyer_id = read_str(&mut r)?;
        let shop_id = read_str(&mut r)?;
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        let stratum = Stratum::from_byte(b[0])?;
        let values = (0..width).map(|_| read_f32(&mut r)).collect::<Result<Vec<_>>>()?;
        rows.push(FeatureRow {
            buyer_id,
            shop_id,
            stratum,
            values,
        });
    }
    Ok((width, rows))
}

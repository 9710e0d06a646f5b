//! Dataset sampling, the VQ-VAE training loop and the MiniBatch k-means
//! baseline.
//!
//! One training step runs the encoder, quantizes, decodes, evaluates every
//! loss term, backpropagates with the straight-through estimator, takes an
//! Adam step, updates the codebook by EMA, and revives dead entries on
//! schedule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codebook::{kmeanspp_seeds, nearest, Codebook, CodebookConfig};
use crate::error::{Error, Result};
use crate::events::{BuyerShopAggregate, FunnelSignature, Stratum};
use crate::features::FeatureLayout;
use crate::linalg::{sq_dist, Matrix};
use crate::nn::{Adam, AdamConfig, DenseNet, ForwardCache, Grads};
use crate::objective::{
    commitment_loss, group_recon_loss, info_nce, mine_positives, total_loss, weighted_ce, AuxLabels, GroupLayout,
    HyperParams, LossTerms, MiningRow,
};
use crate::rng::{component_rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128],
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub shop_cap: usize,
    pub stratum_cap: usize,
    pub drop_strata: Vec<Stratum>,
    pub train_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shop_cap: 1500,
            stratum_cap: 300,
            drop_strata: vec![Stratum::E],
            train_fraction: 0.85,
            batch_size: 256,
            epochs: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shop_cap == 0 || self.stratum_cap == 0 {
            return Err(Error::Config("sampling caps must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1]".into()));
        }
        if self.batch_size < 2 || self.epochs == 0 {
            return Err(Error::Config("batch_size >= 2 and epochs >= 1 are required".into()));
        }
        Ok(())
    }
}

/// Indices into the aggregate list.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Caps rows per shop and stratum, drops excluded strata, and splits each
/// (shop, stratum) cell into train and validation.
pub fn sample_dataset(rows: &[BuyerShopAggregate], cfg: &TrainConfig, seed: u64) -> Result<Split> {
    cfg.validate()?;
    let mut cells: BTreeMap<(&str, Stratum), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        if !cfg.drop_strata.contains(&r.stratum) {
            cells.entry((r.shop_id.as_str(), r.stratum)).or_default().push(i);
        }
    }
    let mut by_shop: BTreeMap<&str, Vec<(Stratum, Vec<usize>)>> = BTreeMap::new();
    for ((shop, stratum), mut idx) in cells {
        if idx.len() > cfg.stratum_cap {
            idx.shuffle(&mut component_rng(seed, &format!("sample/cap/{shop}/{stratum}")));
            idx.truncate(cfg.stratum_cap);
            idx.sort_unstable();
        }
        by_shop.entry(shop).or_default().push((stratum, idx));
    }
    let mut split = Split::default();
    for (shop, mut strata) in by_shop {
        let total: usize = strata.iter().map(|s| s.1.len()).sum();
        if total > cfg.shop_cap {
            let mut all: Vec<usize> = strata.iter().flat_map(|s| s.1.iter().copied()).collect();
            all.shuffle(&mut component_rng(seed, &format!("sample/shop/{shop}")));
            all.truncate(cfg.shop_cap);
            for (_, idx) in strata.iter_mut() {
                idx.retain(|i| all.contains(i));
            }
        }
        for (stratum, mut idx) in strata {
            idx.shuffle(&mut component_rng(seed, &format!("sample/split/{shop}/{stratum}")));
            let n_train = (cfg.train_fraction * idx.len() as f64).round() as usize;
            let (tr, va) = idx.split_at(n_train.min(idx.len()));
            split.train.extend_from_slice(tr);
            split.val.extend_from_slice(va);
        }
    }
    if split.train.is_empty() {
        return Err(Error::Config("sampling left no training rows".into()));
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    Ok(split)
}

/// Model inputs and targets for a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub x: Matrix,
    pub labels: Vec<AuxLabels>,
    pub signatures: Vec<FunnelSignature>,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.x.rows
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            signatures: idx.iter().map(|&i| self.signatures[i]).collect(),
        }
    }
}

/// Everything a loss evaluation needs besides the model.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub hp: HyperParams,
    pub layout: FeatureLayout,
    pub groups: GroupLayout,
    pub class_weights: [[f64; 3]; 3],
}

impl LossContext {
    pub fn new(hp: HyperParams, layout: FeatureLayout, class_weights: [[f64; 3]; 3]) -> Self {
        Self {
            hp,
            layout,
            groups: GroupLayout::standard(layout),
            class_weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: Grads,
    pub decoder: Grads,
    pub heads: Vec<Grads>,
}

impl ModelGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.slices();
        out.extend(self.decoder.slices());
        for h in &self.heads {
            out.extend(h.slices());
        }
        out
    }
}

/// Result of one forward/backward evaluation.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub terms: LossTerms,
    pub total: f64,
    pub assign: Vec<usize>,
    pub z_e: Matrix,
    pub anchors: usize,
    pub grads: ModelGrads,
    /// Gradient of the loss with respect to the quantized codes (decoder and
    /// heads only); the straight-through path copies it onto `z_e`.
    pub grad_z_q: Matrix,
}

/// Encoder, decoder, auxiliary heads and codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct VqModel {
    pub encoder: DenseNet,
    pub decoder: DenseNet,
    pub heads: Vec<DenseNet>,
    pub codebook: Codebook,
}

/// Encoder, decoder and head widths for an input width.
pub fn network_dims(input: usize, cfg: &ModelConfig, latent: usize) -> (Vec<usize>, Vec<usize>) {
    let mut enc = vec![input];
    enc.extend(&cfg.hidden);
    enc.push(latent);
    let dec: Vec<usize> = enc.iter().rev().copied().collect();
    (enc, dec)
}

impl VqModel {
    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    fn nets_mut(&mut self) -> Vec<&mut DenseNet> {
        let mut v = vec![&mut self.encoder, &mut self.decoder];
        v.extend(self.heads.iter_mut());
        v
    }

    pub fn set_training(&mut self, on: bool) {
        self.nets_mut().into_iter().for_each(|n| n.training = on);
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        for h in &mut self.heads {
            out.extend(h.params_mut());
        }
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut nets = vec![&self.encoder, &self.decoder];
        nets.extend(self.heads.iter());
        nets.iter().flat_map(|n| n.params().into_iter().map(|p| p.len())).collect()
    }

    /// Encoder outputs without dropout.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        self.encoder.infer(x)
    }

    /// Token per row: encoder pass without dropout, then nearest entry.
    pub fn assign(&self, x: &Matrix) -> Result<Vec<usize>> {
        if x.cols != self.input_dim() {
            return Err(Error::Shape(format!(
                "feature width {} vs model input {}",
                x.cols,
                self.input_dim()
            )));
        }
        Ok(self.codebook.quantize_batch(&self.encode(x)?))
    }

    /// Evaluates all loss terms on a batch and backpropagates them.
    pub fn forward_backward(
        &self,
        x: &Matrix,
        labels: &[AuxLabels],
        signatures: &[FunnelSignature],
        ctx: &LossContext,
        mut rng: Option<&mut Rng>,
    ) -> Result<StepOutput> {
        let hp = &ctx.hp;
        let enc: ForwardCache = self.encoder.forward(x, rng.as_deref_mut())?;
        let z_e = enc.output.clone();
        let assign = self.codebook.quantize_batch(&z_e);
        let z_q = self.codebook.lookup(&assign);

        let dec = self.decoder.forward(&z_q, rng)?;
        let (recon, mut d_xhat) = group_recon_loss(x, &dec.output, &ctx.groups)?;
        d_xhat.data.iter_mut().for_each(|v| *v *= hp.lambda_recon);
        let (dec_grads, mut grad_z_q) = self.decoder.backward(&dec, &d_xhat)?;

        let mut head_terms = [0.0; 3];
        let mut head_grads = Vec::with_capacity(3);
        for (h, head) in self.heads.iter().enumerate() {
            let cache = head.forward(&z_q, None)?;
            let y: Vec<u8> = labels.iter().map(|l| l.bins[h]).collect();
            let (loss, mut d_logits) = weighted_ce(&cache.output, &y, &ctx.class_weights[h])?;
            d_logits.data.iter_mut().for_each(|v| *v *= hp.lambda_aux);
            let (g, dz) = head.backward(&cache, &d_logits)?;
            grad_z_q.data.iter_mut().zip(&dz.data).for_each(|(a, b)| *a += b);
            head_terms[h] = loss;
            head_grads.push(g);
        }

        let (commit, d_commit) = commitment_loss(&z_e, &z_q)?;
        let rows: Vec<MiningRow> = (0..x.rows)
            .map(|i| MiningRow::from_features(x.row(i), ctx.layout, signatures[i]))
            .collect();
        let mined = mine_positives(&rows, hp.top_m, hp.top_f);
        let (contrastive, d_nce) = info_nce(&z_e, &mined.positives, hp.tau)?;

        let mut d_ze = grad_z_q.clone();
        for k in 0..d_ze.data.len() {
            d_ze.data[k] += hp.beta * d_commit.data[k] + hp.lambda_contrastive * d_nce.data[k];
        }
        let (enc_grads, _) = self.encoder.backward(&enc, &d_ze)?;

        let terms = LossTerms {
            recon,
            commit,
            contrastive,
            engage: head_terms[0],
            explore: head_terms[1],
            purchase: head_terms[2],
        };
        Ok(StepOutput {
            total: total_loss(&terms, hp)?,
            terms,
            assign,
            z_e,
            anchors: mined.anchors(),
            grads: ModelGrads {
                encoder: enc_grads,
                decoder: dec_grads,
                heads: head_grads,
            },
            grad_z_q,
        })
    }

    /// Rounds every parameter and codebook statistic to `f32` precision so
    /// the in-memory model equals its serialized form.
    pub fn round_to_f32(&mut self) {
        let r = |v: &mut f64| *v = f64::from(*v as f32);
        for p in self.params_mut() {
            p.iter_mut().for_each(r);
        }
        self.codebook.entries.data.iter_mut().for_each(r);
        self.codebook.sum_ema.data.iter_mut().for_each(r);
        self.codebook.usage_ema.iter_mut().for_each(r);
    }
}

/// One record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub batch_size: usize,
    pub total: f64,
    pub terms: LossTerms,
    pub anchors: usize,
    pub active_codes: usize,
    pub revived: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VqModel,
    pub log: Vec<StepLog>,
    /// Tokens of the training rows under the final model.
    pub final_assignments: Vec<usize>,
    /// Set when a non-finite loss stopped training; `model` is then the last
    /// finite state.
    pub diverged: Option<String>,
}

/// Batches of `batch_size`, with a trailing batch of one row merged into its
/// predecessor (InfoNCE needs two rows).
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push(start..end);
        start = end;
    }
    if out.len() > 1 && out.last().map(|r| r.len()) == Some(1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

pub struct TrainSettings<'a> {
    pub model: &'a ModelConfig,
    pub codebook: &'a CodebookConfig,
    pub optimizer: &'a AdamConfig,
    pub train: &'a TrainConfig,
    pub seed: u64,
}

/// Builds networks, seeds the codebook on a warm-up encoder pass, and runs
/// the training epochs.
pub fn train(data: &TrainData, ctx: &LossContext, s: &TrainSettings) -> Result<TrainOutcome> {
    s.train.validate()?;
    ctx.hp.validate()?;
    if data.x.cols != ctx.layout.len() {
        return Err(Error::Shape(format!(
            "feature width {} vs layout {}",
            data.x.cols,
            ctx.layout.len()
        )));
    }
    let mut init = component_rng(s.seed, "trainer/init");
    let (enc_dims, dec_dims) = network_dims(data.x.cols, s.model, s.codebook.dim);
    let encoder = DenseNet::new(&enc_dims, s.model.dropout, &mut init)?;
    let decoder = DenseNet::new(&dec_dims, s.model.dropout, &mut init)?;
    let heads = (0..3)
        .map(|_| DenseNet::new(&[s.codebook.dim, 3], 0.0, &mut init))
        .collect::<Result<Vec<_>>>()?;

    let warm = encoder.infer(&data.x)?;
    let codebook = Codebook::init_kmeanspp(&warm, s.codebook, &mut component_rng(s.seed, "trainer/kmeanspp"))?;
    let mut model = VqModel {
        encoder,
        decoder,
        heads,
        codebook,
    };
    model.set_training(true);
    let mut adam = Adam::new(*s.optimizer, &model.param_sizes());
    let mut shuffle = component_rng(s.seed, "trainer/shuffle");
    let mut dropout = component_rng(s.seed, "trainer/dropout");
    let mut revive = component_rng(s.seed, "trainer/revive");

    let mut log = Vec::new();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut diverged = None;
    'epochs: for epoch in 0..s.train.epochs {
        order.shuffle(&mut shuffle);
        for range in batch_ranges(order.len(), s.train.batch_size) {
            let batch = data.subset(&order[range]);
            let out = match model.forward_backward(&batch.x, &batch.labels, &batch.signatures, ctx, Some(&mut dropout)) {
                Ok(o) => o,
                Err(Error::NonFinite(msg)) => {
                    tracing::error!(step, %msg, "non-finite loss; stopping at the last finite state");
                    diverged = Some(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let before = model.clone();
            let grads = out.grads.slices();
            if let Err(e) = adam.step(&mut model.params_mut(), &grads) {
                tracing::error!(step, error = %e, "optimizer step rejected");
                model = before;
                diverged = Some(e.to_string());
                break 'epochs;
            }
            model.codebook.ema_update(&out.z_e, &out.assign)?;
            step += 1;
            let revived = if s.codebook.revival {
                model.codebook.revive_dead(step, &out.z_e, &mut revive).len()
            } else {
                0
            };
            let rec = StepLog {
                step,
                epoch,
                batch_size: batch.len(),
                total: out.total,
                terms: out.terms,
                anchors: out.anchors,
                active_codes: model.codebook.active_count(),
                revived,
            };
            tracing::debug!(step, epoch, total = rec.total, active = rec.active_codes, "train step");
            log.push(rec);
        }
    }
    model.set_training(false);
    model.round_to_f32();
    let final_assignments = model.assign(&data.x)?;
    Ok(TrainOutcome {
        model,
        log,
        final_assignments,
        diverged,
    })
}

// ---------------------------------------------------------------- baseline

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub batch_size: usize,
    pub iterations: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 256,
            batch_size: 1024,
            iterations: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

/// MiniBatch k-means with k-means++ seeding and per-center learning rates
/// `1 / (points absorbed so far)`.
pub fn minibatch_kmeans(x: &Matrix, cfg: &KMeansConfig, seed: u64) -> Result<KMeansResult> {
    if x.rows < cfg.k || cfg.k == 0 {
        return Err(Error::Config(format!("k-means needs at least K = {} rows, got {}", cfg.k, x.rows)));
    }
    let mut rng = component_rng(seed, "kmeans/init");
    let mut centroids = x.select_rows(&kmeanspp_seeds(x, cfg.k, &mut rng)?);
    let mut counts = vec![0u64; cfg.k];
    let mut sampler = component_rng(seed, "kmeans/batches");
    let b = cfg.batch_size.min(x.rows).max(1);
    for _ in 0..cfg.iterations {
        let batch: Vec<usize> = (0..b).map(|_| sampler.random_range(0..x.rows)).collect();
        let assigned: Vec<usize> = batch.iter().map(|&i| nearest(&centroids, x.row(i)).0).collect();
        for (&i, &c) in batch.iter().zip(&assigned) {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            centroids
                .row_mut(c)
                .iter_mut()
                .zip(x.row(i))
                .for_each(|(m, v)| *m = (1.0 - eta) * *m + eta * v);
        }
    }
    let mut inertia = 0.0;
    let assignments = (0..x.rows)
        .map(|i| {
            let (c, d) = nearest(&centroids, x.row(i));
            inertia += d;
            c
        })
        .collect();
    Ok(KMeansResult {
        centroids,
        assignments,
        inertia,
    })
}

/// Squared distance of a row to its assigned centroid.
pub fn assignment_cost(x: &Matrix, r: &KMeansResult, i: usize) -> f64 {
    sq_dist(x.row(i), r.centroids.row(r.assignments[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::ScalarFeatures;

    fn agg(shop: &str, i: usize, stratum: Stratum) -> BuyerShopAggregate {
        BuyerShopAggregate {
            buyer_id: format!("b{i}"),
            shop_id: shop.to_string(),
            scalars: ScalarFeatures::default(),
            browse_only_sessions: 0,
            emb_viewed: None,
            emb_carted: None,
            emb_purchased: None,
            dropped_product_ids: 0,
            stratum,
        }
    }

    #[test]
    fn stratum_cap_and_small_shops() {
        let mut rows: Vec<_> = (0..400).map(|i| agg("s1", i, Stratum::A)).collect();
        for (k, st) in Stratum::ALL.iter().enumerate() {
            rows.extend((0..10).map(|i| agg("s2", 1000 + 10 * k + i, *st)));
        }
        let split = sample_dataset(&rows, &TrainConfig::default(), 3).unwrap();
        let s1 = split.train.iter().chain(&split.val).filter(|&&i| rows[i].shop_id == "s1").count();
        assert_eq!(s1, 300);
        let s2: Vec<usize> = split.train.iter().chain(&split.val).copied().filter(|&i| rows[i].shop_id == "s2").collect();
        assert_eq!(s2.len(), 40);
        assert!(s2.iter().all(|&i| rows[i].stratum != Stratum::E));
        let mut all: Vec<usize> = split.train.iter().chain(&split.val).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), split.train.len() + split.val.len());
    }

    #[test]
    fn split_is_near_85_15_per_cell() {
        let rows: Vec<_> = (0..137).map(|i| agg("s", i, Stratum::D)).collect();
        let split = sample_dataset(&rows, &TrainConfig::default(), 1).unwrap();
        assert!((split.train.len() as f64 - 0.85 * 137.0).abs() <= 1.0);
        assert!(matches!(
            sample_dataset(&[agg("s", 0, Stratum::E)], &TrainConfig::default(), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_ranges_merge_singleton_tail() {
        assert_eq!(batch_ranges(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(batch_ranges(9, 4), vec![0..4, 4..9]);
        assert_eq!(batch_ranges(1, 4), vec![0..1]);
    }

    #[test]
    fn kmeans_k_equals_n_has_zero_inertia() {
        let x = Matrix::from_rows(&[[0.0, 1.0], [3.0, 1.0], [5.0, -2.0], [7.0, 7.0]], 2).unwrap();
        let r = minibatch_kmeans(&x, &KMeansConfig { k: 4, batch_size: 4, iterations: 10 }, 2).unwrap();
        assert!(r.inertia < 1e-18);
        assert!(minibatch_kmeans(&x, &KMeansConfig { k: 5, batch_size: 4, iterations: 1 }, 2).is_err());
    }

    #[test]
    fn kmeans_two_blobs_are_pure_and_assignments_are_nearest() {
        let mut rng = component_rng(8, "kmeans-blobs");
        let rows: Vec<[f64; 2]> = (0..60)
            .map(|i| {
                let c = if i < 30 { 0.0 } else { 20.0 };
                [c + rng.random::<f64>(), c + rng.random::<f64>()]
            })
            .collect();
        let x = Matrix::from_rows(&rows, 2).unwrap();
        let r = minibatch_kmeans(&x, &KMeansConfig { k: 2, batch_size: 16, iterations: 20 }, 4).unwrap();
        assert!(r.assignments[..30].iter().all(|a| *a == r.assignments[0]));
        assert!(r.assignments[30..].iter().all(|a| *a == r.assignments[30]));
        assert_ne!(r.assignments[0], r.assignments[30]);
        for i in 0..60 {
            let best = (0..2).map(|k| sq_dist(x.row(i), r.centroids.row(k))).fold(f64::INFINITY, f64::min);
            assert_eq!(assignment_cost(&x, &r, i), best);
        }
    }
}

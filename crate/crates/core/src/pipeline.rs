//! End-to-end orchestration: population generation, training, assignment
//! and the evaluation reports, shared by the command line and the tests.

use serde::{Deserialize, Serialize};

use crate::artifact::ModelArtifact;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::events::{BuyerShopAggregate, Stratum};
use crate::features::NormalizerState;
use crate::linalg::Matrix;
use crate::metrics::{
    cluster_report, pairing_study, policy_simulate, real_cell_rates, roster_from_cells, separation_groups,
    separation_stats, session_rates, AlignmentReport, ClusterReport, Outcome, SeparationReport, SimMode,
};
use crate::objective::{AuxLabels, LabelBinning};
use crate::population::{build_profiles, distribution_report, DistributionReport, TokenProfile};
use crate::rng::derive_seed;
use crate::synth::{default_fixture, fixture_shops, generate, Population, PopulationConfig};
use crate::trainer::{minibatch_kmeans, sample_dataset, train, LossContext, Split, StepLog, TrainData, TrainSettings};

/// The fixture population sized by the synth section of `cfg`.
pub fn population_config(cfg: &Config) -> PopulationConfig {
    let mut p = default_fixture(cfg.seed);
    p.shops = fixture_shops(cfg.synth.shops, cfg.synth.buyers_per_shop, p.archetypes.len());
    p.catalog.n_products = cfg.synth.n_products;
    p.catalog.d_emb = cfg.synth.d_emb;
    p
}

pub fn generate_population(cfg: &Config) -> Result<Population> {
    generate(&population_config(cfg))
}

/// Rows in strata A–D.
pub fn modeled<'a>(rows: &[&'a BuyerShopAggregate]) -> Vec<&'a BuyerShopAggregate> {
    rows.iter().copied().filter(|a| a.stratum != Stratum::E).collect()
}

pub fn feature_matrix(norm: &NormalizerState, rows: &[&BuyerShopAggregate]) -> Result<Matrix> {
    let width = norm.layout().len();
    let mut data = Vec::with_capacity(rows.len() * width);
    for a in rows {
        data.extend(norm.assemble(a)?.to_f64());
    }
    Matrix::from_vec(rows.len(), width, data)
}

pub struct TrainRun {
    pub artifact: ModelArtifact,
    pub split: Split,
    pub log: Vec<StepLog>,
    /// Tokens of the training rows after the last update.
    pub train_assignments: Vec<usize>,
    pub diverged: Option<String>,
}

impl TrainRun {
    pub fn train_rows<'a>(&self, rows: &'a [BuyerShopAggregate]) -> Vec<&'a BuyerShopAggregate> {
        self.split.train.iter().map(|&i| &rows[i]).collect()
    }
}

/// Samples, fits normalization and label bins on the training split, trains
/// the model, and profiles tokens over the training rows.
pub fn train_model(rows: &[BuyerShopAggregate], cfg: &Config) -> Result<TrainRun> {
    cfg.validate()?;
    let split = sample_dataset(rows, &cfg.train, derive_seed(cfg.seed, "pipeline/sample"))?;
    let train_rows: Vec<&BuyerShopAggregate> = split.train.iter().map(|&i| &rows[i]).collect();
    let normalizer = NormalizerState::fit(&train_rows, &cfg.features)?;
    let labels = LabelBinning::fit(&train_rows)?;
    let aux: Vec<AuxLabels> = train_rows.iter().map(|a| labels.labels(a)).collect();
    let data = TrainData {
        x: feature_matrix(&normalizer, &train_rows)?,
        labels: aux.clone(),
        signatures: train_rows.iter().map(|a| a.signature()).collect(),
    };
    let ctx = LossContext::new(cfg.objective, normalizer.layout(), labels.weights);
    let outcome = train(
        &data,
        &ctx,
        &TrainSettings {
            model: &cfg.model,
            codebook: &cfg.codebook,
            optimizer: &cfg.optimizer,
            train: &cfg.train,
            seed: derive_seed(cfg.seed, "pipeline/train"),
        },
    )?;
    let profiles = build_profiles(&outcome.final_assignments, &train_rows, &aux)?;
    Ok(TrainRun {
        artifact: ModelArtifact {
            config: cfg.clone(),
            normalizer,
            labels,
            model: outcome.model,
            profiles,
        },
        split,
        log: outcome.log,
        train_assignments: outcome.final_assignments,
        diverged: outcome.diverged,
    })
}

/// Encoder pass and nearest codebook entry per row, in chunks.
pub fn assign(artifact: &ModelArtifact, rows: &[&BuyerShopAggregate]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(4096) {
        out.extend(artifact.model.assign(&feature_matrix(&artifact.normalizer, chunk)?)?);
    }
    Ok(out)
}

/// Assigns a precomputed feature matrix.
pub fn assign_features(artifact: &ModelArtifact, x: &Matrix) -> Result<Vec<usize>> {
    artifact.model.assign(x)
}

pub fn head_labels(artifact: &ModelArtifact, rows: &[&BuyerShopAggregate]) -> Vec<AuxLabels> {
    rows.iter().map(|a| artifact.labels.labels(a)).collect()
}

/// Profiles over an arbitrary reference population.
pub fn profiles_for(artifact: &ModelArtifact, rows: &[&BuyerShopAggregate], tokens: &[usize]) -> Result<Vec<TokenProfile>> {
    build_profiles(tokens, rows, &head_labels(artifact, rows))
}

/// MiniBatch k-means tokens on the artifact's feature space.
pub fn baseline_assign(artifact: &ModelArtifact, rows: &[&BuyerShopAggregate], cfg: &Config) -> Result<Vec<usize>> {
    let x = feature_matrix(&artifact.normalizer, rows)?;
    Ok(minibatch_kmeans(&x, &cfg.kmeans, derive_seed(cfg.seed, "pipeline/baseline"))?.assignments)
}

/// Cluster report over rows in A–D.
pub fn eval_clusters(
    artifact: &ModelArtifact,
    rows: &[&BuyerShopAggregate],
    tokens: &[usize],
    method: &str,
    cfg: &Config,
) -> Result<ClusterReport> {
    if rows.len() != tokens.len() {
        return Err(Error::Shape("one token per row required".into()));
    }
    let keep: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].stratum != Stratum::E).collect();
    let rows: Vec<&BuyerShopAggregate> = keep.iter().map(|&i| rows[i]).collect();
    let tokens: Vec<usize> = keep.iter().map(|&i| tokens[i]).collect();
    let x = feature_matrix(&artifact.normalizer, &rows)?;
    let strata: Vec<Stratum> = rows.iter().map(|a| a.stratum).collect();
    let heads: Vec<[u8; 3]> = head_labels(artifact, &rows).iter().map(|l| l.bins).collect();
    cluster_report(method, &x, &tokens, &strata, &heads, &cfg.metrics, derive_seed(cfg.seed, "pipeline/clusters"))
}

/// Distribution recovery with profiles drawn from the evaluated rows.
pub fn eval_distribution(artifact: &ModelArtifact, rows: &[&BuyerShopAggregate], tokens: &[usize]) -> Result<DistributionReport> {
    let profiles = profiles_for(artifact, rows, tokens)?;
    distribution_report(rows, tokens, artifact.model.codebook.entries.rows, &profiles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEval {
    pub per_token: AlignmentReport,
    pub token_independent: AlignmentReport,
}

/// Real per-cell rates against simulated agents, with per-token and pooled
/// simulator parameters.
pub fn eval_alignment(
    profiles: &[TokenProfile],
    rows: &[&BuyerShopAggregate],
    tokens: &[usize],
    cfg: &Config,
) -> Result<AlignmentEval> {
    let real = real_cell_rates(rows, tokens)?;
    let roster = roster_from_cells(real.keys(), cfg.sim.sessions_per_cell);
    let seed = derive_seed(cfg.seed, "pipeline/alignment");
    let run = |mode| -> Result<AlignmentReport> {
        let agent = session_rates(&policy_simulate(profiles, &roster, &cfg.sim, mode, seed)?);
        pairing_study(&real, &agent, seed)
    };
    Ok(AlignmentEval {
        per_token: run(SimMode::PerToken)?,
        token_independent: run(SimMode::TokenIndependent)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationEntry {
    pub head: String,
    pub outcome: Outcome,
    pub report: Option<SeparationReport>,
}

/// Simulated session outcomes split by each token's head bin.
pub fn eval_separation(
    profiles: &[TokenProfile],
    rows: &[&BuyerShopAggregate],
    tokens: &[usize],
    cfg: &Config,
) -> Result<Vec<SeparationEntry>> {
    let real = real_cell_rates(rows, tokens)?;
    let roster = roster_from_cells(real.keys(), cfg.sim.sessions_per_cell);
    let seed = derive_seed(cfg.seed, "pipeline/separation");
    let stats = policy_simulate(profiles, &roster, &cfg.sim, SimMode::PerToken, seed)?;
    let plan = [
        ("engagement", 0, Outcome::Actions),
        ("exploration", 1, Outcome::Actions),
        ("purchase", 2, Outcome::AddToCart),
        ("purchase", 2, Outcome::Checkout),
    ];
    plan.iter()
        .map(|&(head, h, outcome)| {
            let g = separation_groups(&stats, profiles, h, outcome)?;
            let report = if g.iter().any(Vec::is_empty) {
                tracing::warn!(head, "a bin has no simulated sessions; statistics not applicable");
                None
            } else {
                Some(separation_stats([&g[0], &g[1], &g[2]], cfg.metrics.permutations, seed)?)
            };
            Ok(SeparationEntry {
                head: head.to_string(),
                outcome,
                report,
            })
        })
        .collect()
}

//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test -p persona-core --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use persona_core::codebook::Codebook;
use persona_core::config::Config;
use persona_core::events::{ingest, write_events, BuyerShopAggregate, FunnelSignature, Stratum};
use persona_core::features::FeatureLayout;
use persona_core::linalg::Matrix;
use persona_core::metrics::{
    calinski_harabasz, cohens_d, ks_uniform, pairing_study, pairwise_cosine, permutation_p, policy_simulate,
    roster_from_cells, session_rates, CellKey, ClusterReport, SimConfig, SimMode,
};
use persona_core::nn::DenseNet;
use persona_core::objective::{
    class_weights, commitment_loss, group_recon_loss, info_nce, mine_positives, purchase_bins, weighted_ce, AuxLabels,
    GroupLayout, HyperParams, MiningRow,
};
use persona_core::pipeline;
use persona_core::population::{write_assignments, Assignment, DistributionReport, TokenProfile};
use persona_core::rng::{component_rng, Rng};
use persona_core::synth::write_truth;
use persona_core::trainer::{LossContext, VqModel};

type Outcome = Result<(bool, String), String>;

struct Suite {
    results: Vec<(usize, &'static str, bool, String, Duration)>,
}

impl Suite {
    fn run(&mut self, id: usize, name: &'static str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let elapsed = t.elapsed();
        println!(
            "{} criterion {id} ({name}): {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        self.results.push((id, name, ok, detail, elapsed));
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1: gradients

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn rel_err(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-7)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let n = Normal::new(0.0, 1.0).unwrap();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).unwrap()
}

/// Worst relative error of `grad` against central differences of `f` over every slot of `at`.
fn check_matrix(at: &Matrix, grad: &Matrix, f: impl Fn(&Matrix) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..at.data.len() {
        let mut p = at.clone();
        p.data[k] += FD_H;
        let mut m = at.clone();
        m.data[k] -= FD_H;
        let fd = (f(&p) - f(&m)) / (2.0 * FD_H);
        worst = worst.max(rel_err(fd, grad.data[k]));
    }
    worst
}

/// Random feature rows with valid mask bits and masked-off channels zeroed.
fn random_features(n: usize, layout: FeatureLayout, rng: &mut Rng) -> Matrix {
    let mut x = random_matrix(n, layout.len(), rng);
    for i in 0..n {
        for c in 0..3 {
            let on = c == 0 || rng.random_bool(0.6);
            let row = x.row_mut(i);
            row[layout.mask(c)] = if on { 1.0 } else { 0.0 };
            if !on {
                row[layout.channel(c)].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    x
}

struct GradConfig {
    n: usize,
    d_pca: usize,
    latent: usize,
    hidden: usize,
    k: usize,
}

/// Random biases keep every output away from zero, where the cosine terms jump.
fn build_model(g: &GradConfig, rng: &mut Rng) -> VqModel {
    let input = FeatureLayout::new(g.d_pca).len();
    let mut net = |dims: &[usize]| {
        let mut n = DenseNet::new(dims, 0.0, rng).unwrap();
        let normal = Normal::new(0.0, 0.5).unwrap();
        for l in &mut n.layers {
            l.b.iter_mut().for_each(|b| *b = normal.sample(rng));
        }
        n
    };
    let encoder = net(&[input, g.hidden, g.latent]);
    let decoder = net(&[g.latent, g.hidden, input]);
    let heads = (0..3).map(|_| net(&[g.latent, 3])).collect();
    let entries = random_matrix(g.k, g.latent, rng);
    VqModel {
        encoder,
        decoder,
        heads,
        codebook: Codebook {
            sum_ema: entries.clone(),
            entries,
            usage_ema: vec![1.0; g.k],
            decay: 0.9,
            dead_fraction: 0.1,
            revival_interval: 50,
            warmup_steps: 100,
            revival_noise: 0.01,
        },
    }
}

/// Whether any ReLU pre-activation or codebook assignment differs from the reference.
fn kinked(model: &VqModel, x: &Matrix, reference: &VqModel) -> bool {
    let nets = |m: &VqModel| {
        let mut v = vec![m.encoder.clone(), m.decoder.clone()];
        v.extend(m.heads.iter().cloned());
        v
    };
    let enc = model.encode(x).unwrap();
    let enc_ref = reference.encode(x).unwrap();
    if model.codebook.quantize_batch(&enc) != reference.codebook.quantize_batch(&enc_ref) {
        return true;
    }
    let zq = model.codebook.lookup(&model.codebook.quantize_batch(&enc));
    let inputs = [x, &zq, &zq, &zq, &zq];
    let kink = nets(model).iter().zip(nets(reference)).zip(inputs).any(|((a, b), input)| {
        let ca = a.forward(input, None).unwrap();
        let cb = b.forward(input, None).unwrap();
        let hidden = a.layers.len() - 1;
        ca.pre[..hidden]
            .iter()
            .zip(&cb.pre[..hidden])
            .any(|(p, q)| p.data.iter().zip(&q.data).any(|(u, v)| u.signum() != v.signum()))
    });
    kink
}

fn total_check(
    model: &VqModel,
    x: &Matrix,
    labels: &[AuxLabels],
    sigs: &[FunnelSignature],
    ctx: &LossContext,
    nets: std::ops::Range<usize>,
) -> Result<(f64, usize), String> {
    let out = model.forward_backward(x, labels, sigs, ctx, None).map_err(err)?;
    let grads: Vec<&[f64]> = out.grads.slices();
    let sizes = model.param_sizes();
    let per_net = 2 * model.encoder.layers.len();
    let mut slot_start = 0;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for net in 0..2 + model.heads.len() {
        let slots = if net < 2 { per_net } else { 2 };
        if nets.contains(&net) {
            for s in slot_start..slot_start + slots {
                for k in 0..sizes[s] {
                    let mut plus = model.clone();
                    plus.params_mut()[s][k] += FD_H;
                    let mut minus = model.clone();
                    minus.params_mut()[s][k] -= FD_H;
                    if kinked(&plus, x, model) || kinked(&minus, x, model) {
                        continue;
                    }
                    let fp = plus.forward_backward(x, labels, sigs, ctx, None).map_err(err)?.total;
                    let fm = minus.forward_backward(x, labels, sigs, ctx, None).map_err(err)?.total;
                    worst = worst.max(rel_err((fp - fm) / (2.0 * FD_H), grads[s][k]));
                    checked += 1;
                }
            }
        }
        slot_start += slots;
    }
    Ok((worst, checked))
}

fn criterion_gradients() -> Outcome {
    let mut worst = [0.0f64; 6];
    let mut checked_total = 0;
    let configs = 20;
    for c in 0..configs {
        let mut rng = component_rng(c, "acceptance/gradients");
        let g = GradConfig {
            n: rng.random_range(4..9),
            d_pca: rng.random_range(1..4),
            latent: rng.random_range(2..5),
            hidden: rng.random_range(3..7),
            k: rng.random_range(3..7),
        };
        let layout = FeatureLayout::new(g.d_pca);
        let groups = GroupLayout::standard(layout);
        let x = random_features(g.n, layout, &mut rng);

        let xhat = random_matrix(g.n, layout.len(), &mut rng);
        let (_, grad) = group_recon_loss(&x, &xhat, &groups).map_err(err)?;
        worst[0] = worst[0].max(check_matrix(&xhat, &grad, |m| group_recon_loss(&x, m, &groups).unwrap().0));

        let z_e = random_matrix(g.n, g.latent, &mut rng);
        let z_q = random_matrix(g.n, g.latent, &mut rng);
        let (_, grad) = commitment_loss(&z_e, &z_q).map_err(err)?;
        worst[1] = worst[1].max(check_matrix(&z_e, &grad, |m| commitment_loss(m, &z_q).unwrap().0));

        let mut positives: Vec<Option<usize>> = (0..g.n)
            .map(|i| rng.random_bool(0.7).then(|| (i + rng.random_range(1..g.n)) % g.n))
            .collect();
        positives[0] = Some(1);
        let tau = rng.random_range(0.05..1.0);
        let (_, grad) = info_nce(&z_e, &positives, tau).map_err(err)?;
        worst[2] = worst[2].max(check_matrix(&z_e, &grad, |m| info_nce(m, &positives, tau).unwrap().0));

        let logits = random_matrix(g.n, 3, &mut rng);
        let labels: Vec<u8> = (0..g.n).map(|i| (i % 3) as u8).collect();
        let mut counts = [0usize; 3];
        labels.iter().for_each(|&l| counts[l as usize] += 1);
        let w = class_weights(counts).map_err(err)?;
        let (_, grad) = weighted_ce(&logits, &labels, &w).map_err(err)?;
        worst[3] = worst[3].max(check_matrix(&logits, &grad, |m| weighted_ce(m, &labels, &w).unwrap().0));

        // Total objective through the model. Decoder and head parameters
        // see exact gradients; encoder parameters are checked with the
        // straight-through terms switched off, where the total is smooth in them.
        let model = build_model(&g, &mut rng);
        let aux: Vec<AuxLabels> = (0..g.n)
            .map(|i| AuxLabels {
                bins: [(i % 3) as u8, ((i + 1) % 3) as u8, ((i + 2) % 3) as u8],
                s_pur: 0,
            })
            .collect();
        let sigs: Vec<FunnelSignature> = (0..g.n)
            .map(|i| if i % 2 == 0 { FunnelSignature::View } else { FunnelSignature::Cart })
            .collect();
        let hp = HyperParams {
            top_m: 3,
            top_f: 2,
            ..HyperParams::default()
        };
        let ctx = LossContext::new(hp, layout, [[1.0, 1.5, 0.75]; 3]);
        let (w_full, n_full) = total_check(&model, &x, &aux, &sigs, &ctx, 1..5)?;
        let smooth = LossContext::new(
            HyperParams {
                lambda_recon: 0.0,
                lambda_aux: 0.0,
                ..hp
            },
            layout,
            [[1.0; 3]; 3],
        );
        let (w_enc, n_enc) = total_check(&model, &x, &aux, &sigs, &smooth, 0..1)?;
        worst[4] = worst[4].max(w_full);
        worst[5] = worst[5].max(w_enc);
        checked_total += n_full + n_enc;
    }
    let ok = worst.iter().all(|w| *w <= FD_TOL) && checked_total > 0;
    Ok((
        ok,
        format!(
            "{configs} configs, max rel err recon {:.1e}, commit {:.1e}, infonce {:.1e}, weighted-ce {:.1e}, total (decoder+heads) {:.1e}, total (encoder) {:.1e} over {checked_total} params; bound {FD_TOL:.0e}",
            worst[0], worst[1], worst[2], worst[3], worst[4], worst[5]
        ),
    ))
}

// ---------------------------------------------------------------- pipeline

struct PipelineRun {
    cluster_vq: ClusterReport,
    cluster_km: ClusterReport,
    distribution: DistributionReport,
    replay_ok: bool,
    /// Serialized artifacts and reports in pipeline order.
    files: Vec<(&'static str, Vec<u8>)>,
}

fn json<T: serde::Serialize>(v: &T) -> Result<Vec<u8>, String> {
    serde_json::to_vec_pretty(v).map_err(err)
}

fn assignments_tsv(rows: &[&BuyerShopAggregate], tokens: &[usize]) -> Result<Vec<u8>, String> {
    let list: Vec<Assignment> = rows
        .iter()
        .zip(tokens)
        .map(|(a, &token)| Assignment {
            buyer_id: a.buyer_id.clone(),
            shop_id: a.shop_id.clone(),
            token,
        })
        .collect();
    let mut buf = Vec::new();
    write_assignments(&mut buf, &list).map_err(err)?;
    Ok(buf)
}

/// gen, ingest, train, assign, every evaluation.
fn run_pipeline(cfg: &Config) -> Result<PipelineRun, String> {
    let pop = pipeline::generate_population(cfg).map_err(err)?;
    let mut files = Vec::new();
    let mut buf = Vec::new();
    write_events(&mut buf, &pop.events).map_err(err)?;
    files.push(("events.ndjson", buf));
    let mut buf = Vec::new();
    pop.catalog.write(&mut buf).map_err(err)?;
    files.push(("catalog.bin", buf));
    let mut buf = Vec::new();
    write_truth(&mut buf, &pop.truth).map_err(err)?;
    files.push(("truth.tsv", buf));

    let rows = ingest(pop.events, &pop.catalog).map_err(err)?;
    let mut buf = Vec::new();
    for r in &rows {
        serde_json::to_writer(&mut buf, r).map_err(err)?;
        buf.push(b'\n');
    }
    files.push(("aggregates.jsonl", buf));

    let run = pipeline::train_model(&rows, cfg).map_err(err)?;
    if let Some(msg) = &run.diverged {
        return Err(format!("training diverged: {msg}"));
    }
    let art = &run.artifact;
    files.push(("model.spm", art.to_bytes().map_err(err)?));
    files.push(("train.log.json", json(&run.log)?));

    let train_rows = run.train_rows(&rows);
    let tokens = pipeline::assign(art, &train_rows).map_err(err)?;
    let replay_ok = tokens == run.train_assignments;
    let all = pipeline::modeled(&rows.iter().collect::<Vec<_>>());
    let all_tokens = pipeline::assign(art, &all).map_err(err)?;
    files.push(("assignments.tsv", assignments_tsv(&all, &all_tokens)?));

    let cluster_vq = pipeline::eval_clusters(art, &train_rows, &tokens, "vqvae", cfg).map_err(err)?;
    let km_tokens = pipeline::baseline_assign(art, &train_rows, cfg).map_err(err)?;
    files.push(("baseline.tsv", assignments_tsv(&train_rows, &km_tokens)?));
    let cluster_km = pipeline::eval_clusters(art, &train_rows, &km_tokens, "kmeans", cfg).map_err(err)?;
    files.push(("clusters_vqvae.json", json(&cluster_vq)?));
    files.push(("clusters_kmeans.json", json(&cluster_km)?));

    let distribution = pipeline::eval_distribution(art, &all, &all_tokens).map_err(err)?;
    files.push(("distribution.json", json(&distribution)?));
    let profiles = pipeline::profiles_for(art, &train_rows, &tokens).map_err(err)?;
    files.push(("profiles.json", json(&profiles)?));
    let alignment = pipeline::eval_alignment(&profiles, &train_rows, &tokens, cfg).map_err(err)?;
    files.push(("alignment.json", json(&alignment)?));
    let separation = pipeline::eval_separation(&profiles, &train_rows, &tokens, cfg).map_err(err)?;
    files.push(("separation.json", json(&separation)?));

    Ok(PipelineRun {
        cluster_vq,
        cluster_km,
        distribution,
        replay_ok,
        files,
    })
}

// ---------------------------------------------------------------- 2: clustering

fn criterion_clustering(run: &PipelineRun) -> Outcome {
    let (vq, km) = (&run.cluster_vq, &run.cluster_km);
    let [v_eng, v_exp, v_pur] = vq.incoherent_share;
    let k_eng = km.incoherent_share[0];
    let ok = v_pur <= 0.01 && v_exp <= 0.01 && v_eng < k_eng && vq.mean_purity >= km.mean_purity;
    Ok((
        ok,
        format!(
            "{} rows; incoherence vq [eng {:.2}%, exp {:.2}%, pur {:.2}%] vs k-means eng {:.2}%; mean purity vq {:.4} vs k-means {:.4} (size-weighted {:.4} vs {:.4}); mixed codes {} vs {}; codes used {} vs {}",
            vq.buyers,
            100.0 * v_eng,
            100.0 * v_exp,
            100.0 * v_pur,
            100.0 * k_eng,
            vq.mean_purity,
            km.mean_purity,
            vq.mean_purity_weighted,
            km.mean_purity_weighted,
            vq.incompatible_clusters,
            km.incompatible_clusters,
            vq.used_codes,
            km.used_codes
        ),
    ))
}

// ---------------------------------------------------------------- 3: distribution

fn criterion_distribution(run: &PipelineRun) -> Outcome {
    let d = &run.distribution;
    let r2 = d.reconstruction.intent_r2();
    let ok = d.shops.len() == 12 && d.mean_js <= 0.10 && r2.is_some_and(|r| r >= 0.85);
    Ok((
        ok,
        format!(
            "{} shops, mean JS {:.4} (bound 0.10), intent-strength R2 {} (bound 0.85)",
            d.shops.len(),
            d.mean_js,
            r2.map_or("n/a".into(), |r| format!("{r:.4}"))
        ),
    ))
}

// ---------------------------------------------------------------- 4: weight invariance

fn criterion_weight_invariance() -> Outcome {
    // (checkout_sessions, atc_sessions, buyers): a zero-heavy mass, cart-only
    // buyers with at most two carts, and checkout buyers who also carted.
    let support: [(u32, u32, usize); 9] = [
        (0, 0, 600),
        (0, 1, 150),
        (0, 2, 120),
        (1, 1, 110),
        (1, 2, 45),
        (2, 2, 25),
        (1, 3, 15),
        (2, 3, 10),
        (3, 3, 5),
    ];
    let pairs: Vec<(u32, u32)> = support
        .iter()
        .flat_map(|&(co, atc, n)| std::iter::repeat_n((co, atc), n))
        .collect();
    let expected: Vec<u8> = pairs
        .iter()
        .map(|&(co, atc)| match (co, atc) {
            (0, 0) => 0,
            (0, _) => 1,
            _ => 2,
        })
        .collect();
    let mut tested = 0;
    let mut agreeing = 0;
    let mut first_bad = None;
    for w_co in 2..=15u64 {
        for w_atc in 1..w_co {
            tested += 1;
            let b = purchase_bins(&pairs, w_co, w_atc);
            let got: Vec<u8> = pairs.iter().map(|&(co, atc)| b.bin(co, atc)).collect();
            if got == expected {
                agreeing += 1;
            } else if first_bad.is_none() {
                first_bad = Some((w_co, w_atc));
            }
        }
    }
    Ok((
        tested == 105 && agreeing == 105,
        format!(
            "{agreeing}/{tested} monotone weight pairs give the partition {{none}} / {{cart only}} / {{checkout}}{}",
            first_bad.map_or(String::new(), |(c, a)| format!("; first disagreement at w_co={c}, w_atc={a}"))
        ),
    ))
}

// ---------------------------------------------------------------- 5: alignment

fn planted_profiles() -> Vec<TokenProfile> {
    let atc = [0.02, 0.15, 0.30, 0.45, 0.60, 0.80];
    (0..6)
        .map(|t| {
            let mut centroid = vec![0.0; 16];
            centroid[0] = 4.0;
            centroid[9] = 2.0 + t as f64;
            centroid[10] = atc[t];
            centroid[11] = 0.5 * atc[t];
            TokenProfile {
                token: t,
                stratum_dist: [0.25; 4],
                centroid,
                head_bins: [(t % 3) as u8, (t % 3) as u8, (t / 2) as u8],
                support: 10 + t,
            }
        })
        .collect()
}

fn criterion_alignment() -> Outcome {
    let profiles = planted_profiles();
    let cells: Vec<CellKey> = (0..3)
        .flat_map(|shop| {
            Stratum::MODELED.into_iter().flat_map(move |stratum| {
                (0..6).map(move |token| CellKey {
                    shop_id: format!("shop{shop}"),
                    token,
                    stratum,
                })
            })
        })
        .collect();
    let cfg = SimConfig {
        sessions_per_cell: 400,
        ..SimConfig::default()
    };
    let roster = roster_from_cells(&cells, cfg.sessions_per_cell);
    let real = session_rates(&policy_simulate(&profiles, &roster, &cfg, SimMode::PerToken, 101).map_err(err)?);
    let study = |mode| -> Result<(f64, f64), String> {
        let agent = session_rates(&policy_simulate(&profiles, &roster, &cfg, mode, 202).map_err(err)?);
        let r = pairing_study(&real, &agent, 7).map_err(err)?;
        let c = r.correct.stratified.ok_or("no comparable cells")?.ara;
        let m = r.all_mismatch.stratified.ok_or("no comparable cells")?.ara;
        Ok((c, m))
    };
    let (c, m) = study(SimMode::PerToken)?;
    let (ci, mi) = study(SimMode::TokenIndependent)?;
    let gap = c - m;
    let null_gap = ci - mi;
    Ok((
        gap >= 0.10 && null_gap.abs() <= 1e-12,
        format!(
            "per-token ARA correct {:.2}% vs all-mismatch {:.2}% (gap {:.2} pp, bound 10); token-independent gap {:.1e} (bound 1e-12)",
            100.0 * c,
            100.0 * m,
            100.0 * gap,
            null_gap.abs()
        ),
    ))
}

// ---------------------------------------------------------------- 6: separation

fn criterion_separation() -> Outcome {
    let mut rng = component_rng(6, "acceptance/separation");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let low: Vec<f64> = (0..50).map(|_| normal.sample(&mut rng)).collect();
    let high: Vec<f64> = (0..50).map(|_| 3.0 + normal.sample(&mut rng)).collect();
    let d = cohens_d(&low, &high).ok_or("d undefined")?;
    let p = permutation_p(&low, &high, 10_000, 1).ok_or("p undefined")?;
    let d0 = cohens_d(&low, &low).ok_or("d undefined")?;
    let p0 = permutation_p(&low, &low, 10_000, 2).ok_or("p undefined")?;

    let reps = 200;
    let mut ps = Vec::with_capacity(reps);
    for r in 0..reps {
        let mut rng = component_rng(r as u64, "acceptance/null");
        let a: Vec<f64> = (0..30).map(|_| normal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..30).map(|_| normal.sample(&mut rng)).collect();
        ps.push(permutation_p(&a, &b, 999, r as u64).ok_or("p undefined")?);
    }
    let ks = ks_uniform(&ps);
    let ok = d >= 2.0 && p < 0.001 && d0 == 0.0 && p0 >= 0.99 && ks <= 0.12;
    Ok((
        ok,
        format!(
            "planted gap d {d:.3} p {p:.1e}; identical groups d {d0} p {p0:.3}; null KS {ks:.4} over {reps} reps (bound 0.12)"
        ),
    ))
}

// ---------------------------------------------------------------- 7: oracles

fn criterion_oracles() -> Outcome {
    let mut rng = component_rng(7, "acceptance/oracles");
    let instances = 300;
    let mut mismatches = Vec::new();
    let mut worst_ch: f64 = 0.0;
    let mut worst_pw: f64 = 0.0;
    for inst in 0..instances {
        let n = rng.random_range(3..=50);
        let d = rng.random_range(1..=5);
        let coarse = inst % 2 == 0;
        let point = |rng: &mut Rng| -> Vec<f64> {
            (0..d)
                .map(|_| {
                    if coarse {
                        f64::from(rng.random_range(-3i32..=3))
                    } else {
                        rng.random_range(-4.0..4.0)
                    }
                })
                .collect()
        };
        let points: Vec<Vec<f64>> = (0..n).map(|_| point(&mut rng)).collect();
        let x = Matrix::from_rows(&points, d).map_err(err)?;

        let k = rng.random_range(1..=n.min(12));
        let entries: Vec<Vec<f64>> = (0..k).map(|_| point(&mut rng)).collect();
        let cb = Codebook {
            entries: Matrix::from_rows(&entries, d).map_err(err)?,
            usage_ema: vec![1.0; k],
            sum_ema: Matrix::from_rows(&entries, d).map_err(err)?,
            decay: 0.9,
            dead_fraction: 0.1,
            revival_interval: 50,
            warmup_steps: 100,
            revival_noise: 0.01,
        };
        if (0..n).any(|i| cb.quantize(&points[i]).0 != common::argmin_entry(&entries, &points[i])) {
            mismatches.push(format!("quantize #{inst}"));
        }

        let clusters = rng.random_range(2..=(n - 1).min(6));
        let mut labels: Vec<usize> = (0..n).map(|i| i % clusters).collect();
        labels.shuffle(&mut rng);
        let ch = calinski_harabasz(&x, &labels).map_err(err)?;
        let want = common::ch_pairwise(&points, &labels);
        if want.is_finite() {
            let e = (ch - want).abs() / want.abs().max(1.0);
            worst_ch = worst_ch.max(e);
            if e > 1e-9 {
                mismatches.push(format!("CH #{inst}: {ch} vs {want}"));
            }
        }

        let shifted: Vec<Vec<f64>> = points
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q[0] += 9.0;
                q
            })
            .collect();
        let xs = Matrix::from_rows(&shifted, d).map_err(err)?;
        let pw = pairwise_cosine(&xs, &labels, 200, 10, 3).map_err(err)?;
        let want = common::pairwise_cosine_enumerated(&shifted, &labels);
        match (pw, want) {
            (Some(a), Some(b)) => {
                worst_pw = worst_pw.max((a - b).abs());
                if (a - b).abs() > 1e-9 {
                    mismatches.push(format!("pairwise cosine #{inst}"));
                }
            }
            (a, b) if a != b => mismatches.push(format!("pairwise cosine #{inst}: {a:?} vs {b:?}")),
            _ => {}
        }

        let rows: Vec<MiningRow> = (0..n)
            .map(|_| MiningRow {
                signature: [FunnelSignature::View, FunnelSignature::Cart, FunnelSignature::Purchase][rng.random_range(0..3)],
                channels: std::array::from_fn(|_| rng.random_bool(0.7).then(|| point(&mut rng))),
                behavior: std::array::from_fn(|_| f64::from(rng.random_range(-2i32..=2))),
            })
            .collect();
        let top_f = rng.random_range(1..=3);
        let top_m = top_f + rng.random_range(1..=5);
        let mined = mine_positives(&rows, top_m, top_f);
        for i in 0..n {
            let scan = common::three_gate_scan(&rows, i, top_m, top_f);
            if mined.positives[i] != scan.positive || mined.stage2[i] != scan.stage2 || mined.stage3[i] != scan.stage3 {
                mismatches.push(format!("mining #{inst} anchor {i}"));
                break;
            }
        }
    }
    Ok((
        mismatches.is_empty(),
        format!(
            "{instances} instances with N <= 50: quantize, CH (max rel err {worst_ch:.1e}), pairwise cosine (max abs err {worst_pw:.1e}), three-gate mining; {} mismatches{}",
            mismatches.len(),
            mismatches.first().map_or(String::new(), |m| format!(", first: {m}"))
        ),
    ))
}

// ---------------------------------------------------------------- 8: determinism

fn criterion_determinism(first: &PipelineRun, cfg: &Config) -> Outcome {
    let second = run_pipeline(cfg)?;
    let names: Vec<&str> = first.files.iter().map(|f| f.0).collect();
    let differing: Vec<&str> = first
        .files
        .iter()
        .zip(&second.files)
        .filter(|(a, b)| a.0 != b.0 || a.1 != b.1)
        .map(|(a, _)| a.0)
        .collect();
    let bytes: usize = first.files.iter().map(|f| f.1.len()).sum();
    let ok = differing.is_empty() && first.files.len() == second.files.len() && first.replay_ok && second.replay_ok;
    Ok((
        ok,
        format!(
            "{} files ({} bytes) compared across two runs: {}; replayed training tokens match: {}",
            names.len(),
            bytes,
            if differing.is_empty() { "all identical".to_string() } else { format!("differ: {}", differing.join(", ")) },
            first.replay_ok && second.replay_ok
        ),
    ))
}

fn main() {
    let mut suite = Suite { results: Vec::new() };
    let cfg = Config::desk();

    suite.run(1, "gradient correctness", criterion_gradients);
    let t = Instant::now();
    let run = run_pipeline(&cfg);
    let pipeline_time = t.elapsed();
    println!("pipeline on the desk fixture finished in {:.1}s", pipeline_time.as_secs_f64());
    match &run {
        Ok(run) => {
            suite.run(2, "clustering vs k-means", || criterion_clustering(run));
            suite.run(3, "distribution recovery", || criterion_distribution(run));
        }
        Err(e) => {
            suite.run(2, "clustering vs k-means", || Err(e.clone()));
            suite.run(3, "distribution recovery", || Err(e.clone()));
        }
    }
    suite.run(4, "weight invariance", criterion_weight_invariance);
    suite.run(5, "alignment machinery", criterion_alignment);
    suite.run(6, "separation statistics", criterion_separation);
    suite.run(7, "brute-force oracles", criterion_oracles);
    match &run {
        Ok(run) => suite.run(8, "end-to-end determinism", || criterion_determinism(run, &cfg)),
        Err(e) => suite.run(8, "end-to-end determinism", || Err(e.clone())),
    }

    let passed = suite.results.iter().filter(|r| r.2).count();
    println!("acceptance: {passed}/{} criteria passed", suite.results.len());
    if passed != suite.results.len() {
        std::process::exit(1);
    }
}

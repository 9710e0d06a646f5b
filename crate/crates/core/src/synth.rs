//! Seeded synthetic clickstream populations.
//!
//! Buyers are drawn from archetypes mixed per shop; each archetype fixes
//! session counts, funnel depth probabilities, durations, order values and a
//! preferred product cluster. The catalog is a set of well-separated Gaussian
//! clusters. Archetype labels go only to the ground-truth table.

use std::io::{BufRead, Write};

use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Catalog, EventRecord, EventType, MS_PER_DAY};
use crate::rng::{component_rng, Rng};

/// Collection names, also used as search queries. Cluster `c` maps to
/// `CATEGORIES[c % len]`.
pub const CATEGORIES: [&str; 12] = [
    "skirts", "dresses", "sneakers", "jackets", "handbags", "hats", "scarves", "jewelry", "candles", "mugs",
    "backpacks", "sunglasses",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeSpec {
    pub name: String,
    /// Sessions are `1 + Poisson(mean_sessions - 1)`.
    pub mean_sessions: f64,
    pub p_product_view: f64,
    pub p_search: f64,
    pub p_collection_view: f64,
    pub p_add_to_cart: f64,
    pub p_checkout_start: f64,
    pub p_purchase: f64,
    /// Mean product views in a session that views products.
    pub views_per_session: f64,
    /// Log-normal session duration, parameters of `ln(seconds)`.
    pub duration_mu: f64,
    pub duration_sigma: f64,
    pub preferred_cluster: usize,
    /// Log-normal item price, parameters of `ln(cents)`.
    pub value_mu: f64,
    pub value_sigma: f64,
}

impl ArchetypeSpec {
    fn validate(&self) -> Result<()> {
        let probs = [
            self.p_product_view,
            self.p_search,
            self.p_collection_view,
            self.p_add_to_cart,
            self.p_checkout_start,
            self.p_purchase,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("archetype {}: probabilities must lie in [0, 1]", self.name)));
        }
        if self.mean_sessions < 1.0 || self.views_per_session < 1.0 || self.duration_sigma < 0.0 || self.value_sigma < 0.0 {
            return Err(Error::Config(format!("archetype {}: invalid rate parameters", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShopSpec {
    pub shop_id: String,
    pub weights: Vec<f64>,
    pub buyers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogSpec {
    pub n_products: usize,
    pub n_clusters: usize,
    pub d_emb: usize,
    /// Standard deviation of cluster centers.
    pub center_scale: f64,
    /// Standard deviation of products around their center.
    pub spread: f64,
}

impl Default for CatalogSpec {
    fn default() -> Self {
        Self {
            n_products: 600,
            n_clusters: 8,
            d_emb: 32,
            center_scale: 1.0,
            spread: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub archetypes: Vec<ArchetypeSpec>,
    pub shops: Vec<ShopSpec>,
    pub catalog: CatalogSpec,
    pub seed: u64,
    pub window_days: u32,
    /// Epoch milliseconds of the window start.
    pub start_ms: i64,
    /// Probability that a viewed product comes from the preferred cluster.
    pub cluster_affinity: f64,
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.archetypes.is_empty() {
            return Err(Error::Config("at least one archetype is required".into()));
        }
        for a in &self.archetypes {
            a.validate()?;
            if a.preferred_cluster >= self.catalog.n_clusters {
                return Err(Error::Config(format!("archetype {} prefers a missing cluster", a.name)));
            }
        }
        if self.catalog.n_products == 0 || self.catalog.n_clusters == 0 || self.catalog.d_emb == 0 {
            return Err(Error::Config("catalog needs products, clusters and a positive d_emb".into()));
        }
        if self.catalog.n_products < self.catalog.n_clusters {
            return Err(Error::Config("fewer products than clusters".into()));
        }
        let total: usize = self.shops.iter().map(|s| s.buyers).sum();
        if total == 0 {
            return Err(Error::Config("zero buyers".into()));
        }
        for s in &self.shops {
            if s.buyers == 0 {
                return Err(Error::Config(format!("shop {} has zero buyers", s.shop_id)));
            }
            if s.weights.len() != self.archetypes.len() || s.weights.iter().any(|w| *w < 0.0) {
                return Err(Error::Config(format!("shop {} mixture has the wrong shape", s.shop_id)));
            }
            if (s.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("shop {} mixture does not sum to 1", s.shop_id)));
            }
        }
        if self.window_days == 0 || !(0.0..=1.0).contains(&self.cluster_affinity) {
            return Err(Error::Config("invalid window or cluster affinity".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub buyer_id: String,
    pub shop_id: String,
    pub archetype: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub events: Vec<EventRecord>,
    pub catalog: Catalog,
    pub truth: Vec<GroundTruth>,
}

#[allow(clippy::too_many_arguments)]
fn archetype(
    name: &str,
    mean_sessions: f64,
    probs: [f64; 6],
    views_per_session: f64,
    duration_mu: f64,
    preferred_cluster: usize,
    value_mu: f64,
) -> ArchetypeSpec {
    ArchetypeSpec {
        name: name.to_string(),
        mean_sessions,
        p_product_view: probs[0],
        p_search: probs[1],
        p_collection_view: probs[2],
        p_add_to_cart: probs[3],
        p_checkout_start: probs[4],
        p_purchase: probs[5],
        views_per_session,
        duration_mu,
        duration_sigma: 0.5,
        preferred_cluster,
        value_mu,
        value_sigma: 0.4,
    }
}

/// Shop mixtures of the fixture: each shop has a dominant, a secondary and a
/// minor archetype over a flat floor.
pub fn fixture_shops(n_shops: usize, buyers: usize, n_archetypes: usize) -> Vec<ShopSpec> {
    let k = n_archetypes;
    (0..n_shops)
        .map(|s| {
            let mut w: Vec<f64> = (0..k)
                .map(|a| {
                    let mut v = 0.15;
                    if a == s % k {
                        v += 2.5;
                    }
                    if a == (3 * s + 1) % k {
                        v += 1.2;
                    }
                    if a == (5 * s + 2) % k {
                        v += 0.5;
                    }
                    v
                })
                .collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            ShopSpec {
                shop_id: format!("shop{s:02}"),
                weights: w,
                buyers,
            }
        })
        .collect()
}

/// The eight-archetype desk fixture: 12 shops of 420 buyers with strongly
/// different mixtures, 32-dimensional product embeddings.
pub fn default_fixture(seed: u64) -> PopulationConfig {
    //                                       sess  view  srch  coll  atc   co    pur   views dur   clu  value
    let archetypes = vec![
        archetype("loyal_purchaser", 6.0, [0.9, 0.3, 0.4, 0.6, 0.5, 0.45], 3.0, 6.2, 0, 8.3),
        archetype("quick_buyer", 1.6, [1.0, 0.05, 0.05, 0.85, 0.8, 0.75], 1.5, 4.8, 1, 8.8),
        archetype("checkout_abandoner", 3.0, [0.9, 0.2, 0.3, 0.6, 0.45, 0.0], 2.5, 5.6, 2, 8.5),
        archetype("cart_builder", 4.0, [0.9, 0.2, 0.3, 0.5, 0.0, 0.0], 3.0, 5.8, 3, 7.9),
        archetype("deep_researcher", 8.0, [0.95, 0.6, 0.6, 0.0, 0.0, 0.0], 6.0, 7.0, 4, 8.0),
        archetype("casual_browser", 1.3, [0.45, 0.0, 0.0, 0.0, 0.0, 0.0], 1.2, 3.6, 5, 7.5),
        archetype("searcher", 3.0, [0.6, 0.9, 0.05, 0.0, 0.0, 0.0], 2.0, 5.2, 6, 7.8),
        archetype("collection_browser", 3.0, [0.6, 0.05, 0.9, 0.0, 0.0, 0.0], 2.0, 5.4, 7, 7.7),
    ];
    let shops = fixture_shops(12, 420, archetypes.len());
    PopulationConfig {
        archetypes,
        shops,
        catalog: CatalogSpec::default(),
        seed,
        window_days: 120,
        start_ms: 1_735_689_600_000,
        cluster_affinity: 0.8,
    }
}

fn build_catalog(spec: &CatalogSpec, rng: &mut Rng) -> (Catalog, Vec<Vec<usize>>) {
    let centers: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| {
            let n = Normal::new(0.0, spec.center_scale).expect("finite scale");
            (0..spec.d_emb).map(|_| n.sample(rng)).collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.spread).expect("finite spread");
    let mut catalog = Catalog::new(spec.d_emb);
    let mut members = vec![Vec::new(); spec.n_clusters];
    for p in 0..spec.n_products {
        let c = p % spec.n_clusters;
        let emb: Vec<f32> = centers[c].iter().map(|m| (m + noise.sample(rng)) as f32).collect();
        catalog
            .insert(format!("p{p:05}"), &emb)
            .expect("generated ids are unique and widths match");
        members[c].push(p);
    }
    (catalog, members)
}

fn pick_weighted(weights: &[f64], rng: &mut Rng) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn poisson(mean: f64, rng: &mut Rng) -> u64 {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).expect("positive mean").sample(rng) as u64
    }
}

struct SessionPlan {
    view: bool,
    cart: bool,
    checkout: bool,
    purchase: bool,
    search: bool,
    collection: bool,
}

fn plan_session(a: &ArchetypeSpec, rng: &mut Rng) -> SessionPlan {
    // one draw decides funnel depth so deeper steps imply shallower ones
    let u = rng.random::<f64>();
    let p_pur = a.p_purchase;
    let p_co = a.p_checkout_start.max(p_pur);
    let p_atc = a.p_add_to_cart.max(p_co);
    let p_view = a.p_product_view.max(p_atc);
    SessionPlan {
        view: u < p_view,
        cart: u < p_atc,
        checkout: u < p_co,
        purchase: u < p_pur,
        search: rng.random::<f64>() < a.p_search,
        collection: rng.random::<f64>() < a.p_collection_view,
    }
}

struct BuyerCtx<'a> {
    cfg: &'a PopulationConfig,
    members: &'a [Vec<usize>],
    shop_id: &'a str,
    buyer_id: String,
}

fn event(ctx: &BuyerCtx, session_id: &str, ts: i64, t: EventType) -> EventRecord {
    EventRecord {
        buyer_id: ctx.buyer_id.clone(),
        shop_id: ctx.shop_id.to_string(),
        session_id: session_id.to_string(),
        ts,
        event_type: t,
        product_id: None,
        collection_id: None,
        query: None,
        value_cents: None,
    }
}

fn gen_session(ctx: &BuyerCtx, a: &ArchetypeSpec, s: usize, rng: &mut Rng, out: &mut Vec<EventRecord>) {
    let cfg = ctx.cfg;
    let plan = plan_session(a, rng);
    let session_id = format!("{}-s{s:03}", ctx.buyer_id);
    let start = cfg.start_ms + rng.random_range(0..i64::from(cfg.window_days) * MS_PER_DAY - 3_600_000);
    let secs = LogNormal::new(a.duration_mu, a.duration_sigma).expect("valid").sample(rng);
    let price = LogNormal::new(a.value_mu, a.value_sigma).expect("valid");
    let n_clusters = cfg.catalog.n_clusters;
    let cluster = if rng.random::<f64>() < cfg.cluster_affinity {
        a.preferred_cluster
    } else {
        rng.random_range(0..n_clusters)
    };
    let category = CATEGORIES[cluster % CATEGORIES.len()];

    let mut steps: Vec<EventRecord> = vec![event(ctx, &session_id, 0, EventType::PageView)];
    if plan.collection {
        let mut e = event(ctx, &session_id, 0, EventType::CollectionView);
        e.collection_id = Some(category.to_string());
        steps.push(e);
    }
    if plan.search {
        let mut e = event(ctx, &session_id, 0, EventType::Search);
        e.query = Some(category.to_string());
        steps.push(e);
    }
    let mut viewed = Vec::new();
    if plan.view {
        let n = 1 + poisson(a.views_per_session - 1.0, rng) as usize;
        let pool = &ctx.members[cluster];
        for _ in 0..n {
            let p = pool[rng.random_range(0..pool.len())];
            let mut e = event(ctx, &session_id, 0, EventType::ProductView);
            e.product_id = Some(format!("p{p:05}"));
            steps.push(e);
            viewed.push(p);
        }
    }
    let mut cart_total = 0u64;
    let mut carted = None;
    if plan.cart {
        let p = viewed[rng.random_range(0..viewed.len())];
        let cents = price.sample(rng).round().max(100.0) as u64;
        cart_total += cents;
        let mut e = event(ctx, &session_id, 0, EventType::AddToCart);
        e.product_id = Some(format!("p{p:05}"));
        e.value_cents = Some(cents);
        steps.push(e);
        carted = Some(p);
    }
    if plan.checkout {
        steps.push(event(ctx, &session_id, 0, EventType::CheckoutStart));
    }
    if plan.purchase {
        let mut e = event(ctx, &session_id, 0, EventType::Purchase);
        e.product_id = carted.map(|p| format!("p{p:05}"));
        e.value_cents = Some(cart_total);
        steps.push(e);
    }
    let span = (secs * 1000.0).round().clamp(1000.0, 3_000_000.0) as i64;
    let gaps = (steps.len() - 1).max(1) as i64;
    for (i, e) in steps.iter_mut().enumerate() {
        e.ts = start + span * i as i64 / gaps;
    }
    if steps.len() == 1 {
        // a lone page view still spans a dwell time via a second page view
        steps.push(event(ctx, &session_id, start + span, EventType::PageView));
    }
    out.extend(steps);
}

/// Generates events, catalog and ground truth. Deterministic given the seed.
pub fn generate(cfg: &PopulationConfig) -> Result<Population> {
    cfg.validate()?;
    let (catalog, members) = build_catalog(&cfg.catalog, &mut component_rng(cfg.seed, "synth/catalog"));
    let mut events = Vec::new();
    let mut truth = Vec::new();
    for shop in &cfg.shops {
        let mut rng = component_rng(cfg.seed, &format!("synth/shop/{}", shop.shop_id));
        for b in 0..shop.buyers {
            let a = &cfg.archetypes[pick_weighted(&shop.weights, &mut rng)];
            let ctx = BuyerCtx {
                cfg,
                members: &members,
                shop_id: &shop.shop_id,
                buyer_id: format!("{}-b{b:05}", shop.shop_id),
            };
            let n_sessions = 1 + poisson(a.mean_sessions - 1.0, &mut rng) as usize;
            let mut buyer_events = Vec::new();
            for s in 0..n_sessions {
                gen_session(&ctx, a, s, &mut rng, &mut buyer_events);
            }
            buyer_events.sort_by(|x, y| x.ts.cmp(&y.ts).then(x.session_id.cmp(&y.session_id)));
            events.extend(buyer_events);
            truth.push(GroundTruth {
                buyer_id: ctx.buyer_id,
                shop_id: shop.shop_id.clone(),
                archetype: a.name.clone(),
            });
        }
    }
    Ok(Population { events, catalog, truth })
}

pub fn write_truth<W: Write>(mut w: W, truth: &[GroundTruth]) -> Result<()> {
    writeln!(w, "buyer_id\tshop_id\tarchetype")?;
    for t in truth {
        writeln!(w, "{}\t{}\t{}", t.buyer_id, t.shop_id, t.archetype)?;
    }
    Ok(())
}

pub fn read_truth<R: BufRead>(r: R) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Format(format!("truth line {}: expected 3 columns", i + 1)));
        }
        out.push(GroundTruth {
            buyer_id: f[0].into(),
            shop_id: f[1].into(),
            archetype: f[2].into(),
        });
    }
    Ok(out)
}

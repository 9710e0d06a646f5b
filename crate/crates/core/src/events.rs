//! Raw clickstream events, sessions, and buyer–shop aggregates.
//!
//! Events arrive as newline-delimited JSON, one [`EventRecord`] per line.
//! Sessions are taken from the log's own `session_id`; no inactivity-gap
//! inference is done. A buyer–shop pair is summarized by sixteen scalars,
//! three mean product embeddings, and a funnel [`Stratum`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MS_PER_DAY: i64 = 86_400_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    PageView,
    ProductView,
    Search,
    CollectionView,
    AddToCart,
    CheckoutStart,
    Purchase,
}

impl EventType {
    pub const ALL: [EventType; 7] = [
        EventType::PageView,
        EventType::ProductView,
        EventType::Search,
        EventType::CollectionView,
        EventType::AddToCart,
        EventType::CheckoutStart,
        EventType::Purchase,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::PageView => "page_view",
            EventType::ProductView => "product_view",
            EventType::Search => "search",
            EventType::CollectionView => "collection_view",
            EventType::AddToCart => "add_to_cart",
            EventType::CheckoutStart => "checkout_start",
            EventType::Purchase => "purchase",
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One raw clickstream event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub buyer_id: String,
    pub shop_id: String,
    pub session_id: String,
    pub ts: i64,
    pub event_type: EventType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collection_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_cents: Option<u64>,
}

impl EventRecord {
    /// Checks the per-type field requirements.
    pub fn validate(&self) -> Result<()> {
        if self.ts < 0 {
            return Err(Error::Schema(format!("negative ts {}", self.ts)));
        }
        let missing = match self.event_type {
            EventType::ProductView | EventType::AddToCart if self.product_id.is_none() => {
                Some("product_id")
            }
            EventType::Search if self.query.is_none() => Some("query"),
            EventType::CollectionView if self.collection_id.is_none() => Some("collection_id"),
            _ => None,
        };
        match missing {
            Some(field) => Err(Error::Schema(format!(
                "{} event without {field}",
                self.event_type
            ))),
            None => Ok(()),
        }
    }
}

/// Parses and validates one NDJSON line.
pub fn parse_event_line(line: &str) -> Result<EventRecord> {
    let ev: EventRecord =
        serde_json::from_str(line).map_err(|e| Error::Schema(e.to_string()))?;
    ev.validate()?;
    Ok(ev)
}

/// Reads an NDJSON event log, skipping blank lines.
pub fn read_events<R: BufRead>(reader: R) -> Result<Vec<EventRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = parse_event_line(&line).map_err(|e| match e {
            Error::Schema(msg) => Error::Schema(format!("line {}: {msg}", lineno + 1)),
            other => other,
        })?;
        out.push(ev);
    }
    Ok(out)
}

pub fn write_events<W: Write>(mut w: W, events: &[EventRecord]) -> Result<()> {
    for ev in events {
        serde_json::to_writer(&mut w, ev)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Per-event-type counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts(pub [u32; 7]);

impl EventCounts {
    pub fn get(&self, t: EventType) -> u32 {
        self.0[t.index()]
    }

    pub fn bump(&mut self, t: EventType) {
        self.0[t.index()] += 1;
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub buyer_id: String,
    pub shop_id: String,
    pub session_id: String,
    pub start_ts: i64,
    pub end_ts: i64,
    pub duration_ms: i64,
    pub counts: EventCounts,
    pub product_ids_viewed: Vec<String>,
    pub product_ids_carted: Vec<String>,
    pub product_ids_purchased: Vec<String>,
    pub queries: Vec<String>,
    pub collection_ids: Vec<String>,
    pub cart_value_cents: Option<u64>,
    pub order_value_cents: Option<u64>,
    /// Distinct UTC day numbers (ts / 86 400 000) with at least one event.
    pub event_days: Vec<i64>,
}

impl SessionSummary {
    fn new(first: &EventRecord) -> Self {
        Self {
            buyer_id: first.buyer_id.clone(),
            shop_id: first.shop_id.clone(),
            session_id: first.session_id.clone(),
            start_ts: first.ts,
            end_ts: first.ts,
            duration_ms: 0,
            counts: EventCounts::default(),
            product_ids_viewed: Vec::new(),
            product_ids_carted: Vec::new(),
            product_ids_purchased: Vec::new(),
            queries: Vec::new(),
            collection_ids: Vec::new(),
            cart_value_cents: None,
            order_value_cents: None,
            event_days: Vec::new(),
        }
    }

    fn absorb(&mut self, ev: &EventRecord) {
        self.end_ts = self.end_ts.max(ev.ts);
        self.start_ts = self.start_ts.min(ev.ts);
        self.duration_ms = self.end_ts - self.start_ts;
        self.counts.bump(ev.event_type);
        let day = ev.ts.div_euclid(MS_PER_DAY);
        if let Err(pos) = self.event_days.binary_search(&day) {
            self.event_days.insert(pos, day);
        }
        match ev.event_type {
            EventType::ProductView => {
                if let Some(p) = &ev.product_id {
                    self.product_ids_viewed.push(p.clone());
                }
            }
            EventType::AddToCart => {
                if let Some(p) = &ev.product_id {
                    self.product_ids_carted.push(p.clone());
                }
                if let Some(v) = ev.value_cents {
                    *self.cart_value_cents.get_or_insert(0) += v;
                }
            }
            EventType::Purchase => {
                if let Some(p) = &ev.product_id {
                    self.product_ids_purchased.push(p.clone());
                }
                if let Some(v) = ev.value_cents {
                    *self.order_value_cents.get_or_insert(0) += v;
                }
            }
            EventType::Search => {
                if let Some(q) = &ev.query {
                    self.queries.push(q.clone());
                }
            }
            EventType::CollectionView => {
                if let Some(c) = &ev.collection_id {
                    self.collection_ids.push(c.clone());
                }
            }
            EventType::PageView | EventType::CheckoutStart => {}
        }
    }

    pub fn has(&self, t: EventType) -> bool {
        self.counts.get(t) > 0
    }

    /// No add-to-cart, checkout start, or purchase in the session.
    pub fn is_browse_only(&self) -> bool {
        !(self.has(EventType::AddToCart)
            || self.has(EventType::CheckoutStart)
            || self.has(EventType::Purchase))
    }
}

/// A session summary together with its ordered events.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub summary: SessionSummary,
    pub events: Vec<EventRecord>,
}

/// Splits one buyer–shop's time-ordered events into sessions, in order of
/// each session's first event.
pub fn split_sessions(events: &[EventRecord]) -> Result<Vec<SessionLog>> {
    let Some(first) = events.first() else {
        return Ok(Vec::new());
    };
    let mut order: Vec<SessionLog> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, ev) in events.iter().enumerate() {
        ev.validate()?;
        if i > 0 && ev.ts < events[i - 1].ts {
            return Err(Error::Ordering {
                index: i,
                ts: ev.ts,
                prev: events[i - 1].ts,
            });
        }
        if ev.buyer_id != first.buyer_id || ev.shop_id != first.shop_id {
            return Err(Error::Precondition(format!(
                "event {i} belongs to ({}, {}), expected ({}, {})",
                ev.buyer_id, ev.shop_id, first.buyer_id, first.shop_id
            )));
        }
        let slot = *index.entry(ev.session_id.as_str()).or_insert_with(|| {
            order.push(SessionLog {
                summary: SessionSummary::new(ev),
                events: Vec::new(),
            });
            order.len() - 1
        });
        order[slot].summary.absorb(ev);
        order[slot].events.push(ev.clone());
    }
    Ok(order)
}

/// One summary per distinct `session_id`.
pub fn sessionize(events: &[EventRecord]) -> Result<Vec<SessionSummary>> {
    Ok(split_sessions(events)?
        .into_iter()
        .map(|s| s.summary)
        .collect())
}

/// Groups a mixed log by (buyer_id, shop_id), preserving first-appearance
/// order of pairs and the relative order of events within each pair.
pub fn group_by_buyer_shop(events: Vec<EventRecord>) -> Vec<Vec<EventRecord>> {
    let mut groups: Vec<Vec<EventRecord>> = Vec::new();
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    for ev in events {
        let key = (ev.buyer_id.clone(), ev.shop_id.clone());
        let slot = *index.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push(ev);
    }
    groups
}

/// Funnel stratum from a priority cascade over session counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    /// Purchasers.
    A,
    /// Checkout abandoners.
    B,
    /// Cart builders.
    C,
    /// Window shoppers.
    D,
    /// Bouncers: page views only.
    E,
}

impl Stratum {
    pub const ALL: [Stratum; 5] = [Stratum::A, Stratum::B, Stratum::C, Stratum::D, Stratum::E];
    /// The strata that take part in training and evaluation.
    pub const MODELED: [Stratum; 4] = [Stratum::A, Stratum::B, Stratum::C, Stratum::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_byte(self) -> u8 {
        self as u8
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        Self::ALL
            .get(usize::from(b))
            .copied()
            .ok_or_else(|| Error::Format(format!("invalid stratum byte {b}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::A => "A",
            Stratum::B => "B",
            Stratum::C => "C",
            Stratum::D => "D",
            Stratum::E => "E",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Stratum::A),
            "B" => Ok(Stratum::B),
            "C" => Ok(Stratum::C),
            "D" => Ok(Stratum::D),
            "E" => Ok(Stratum::E),
            _ => Err(Error::Schema(format!("unknown stratum {s:?}"))),
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The sixteen behavioral scalars of a buyer–shop pair, in layout order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScalarFeatures {
    // exposure & volume
    pub total_sessions: u32,
    pub active_days: u32,
    pub pdp_view_sessions: u32,
    pub atc_sessions: u32,
    pub checkout_sessions: u32,
    pub purchase_sessions: u32,
    pub search_sessions: u32,
    pub collection_sessions: u32,
    // engagement
    pub total_duration_ms: u64,
    pub total_product_views: u32,
    // funnel
    pub atc_rate: f64,
    pub checkout_rate: f64,
    pub browse_only_rate: f64,
    // intent
    pub intent_strength: f64,
    // dollars
    pub avg_cart_value_cents: f64,
    pub avg_order_value_cents: f64,
}

pub const SCALAR_NAMES: [&str; 16] = [
    "total_sessions",
    "active_days",
    "pdp_view_sessions",
    "atc_sessions",
    "checkout_sessions",
    "purchase_sessions",
    "search_sessions",
    "collection_sessions",
    "total_duration_ms",
    "total_product_views",
    "atc_rate",
    "checkout_rate",
    "browse_only_rate",
    "intent_strength",
    "avg_cart_value_cents",
    "avg_order_value_cents",
];

/// Slot of the intent-strength scalar.
pub const INTENT_SLOT: usize = 13;

impl ScalarFeatures {
    pub fn to_array(&self) -> [f64; 16] {
        [
            f64::from(self.total_sessions),
            f64::from(self.active_days),
            f64::from(self.pdp_view_sessions),
            f64::from(self.atc_sessions),
            f64::from(self.checkout_sessions),
            f64::from(self.purchase_sessions),
            f64::from(self.search_sessions),
            f64::from(self.collection_sessions),
            self.total_duration_ms as f64,
            f64::from(self.total_product_views),
            self.atc_rate,
            self.checkout_rate,
            self.browse_only_rate,
            self.intent_strength,
            self.avg_cart_value_cents,
            self.avg_order_value_cents,
        ]
    }
}

/// Priority cascade: A any purchase, B any checkout start, C any add-to-cart,
/// D any product view, search, or collection view, E otherwise.
pub fn stratify(s: &ScalarFeatures) -> Stratum {
    if s.purchase_sessions > 0 {
        Stratum::A
    } else if s.checkout_sessions > 0 {
        Stratum::B
    } else if s.atc_sessions > 0 {
        Stratum::C
    } else if s.pdp_view_sessions > 0 || s.search_sessions > 0 || s.collection_sessions > 0 {
        Stratum::D
    } else {
        Stratum::E
    }
}

pub const INTENT_W_ATC: f64 = 3.0;
pub const INTENT_W_CHECKOUT: f64 = 5.0;
pub const INTENT_W_PURCHASE: f64 = 8.0;

/// Commitment-weighted intent score in `[0, 16/17)`.
pub fn intent_strength(n_sessions: u32, n_atc: u32, n_co: u32, n_pur: u32) -> Result<f64> {
    for (name, n) in [("n_atc", n_atc), ("n_co", n_co), ("n_pur", n_pur)] {
        if n > n_sessions {
            return Err(Error::Precondition(format!(
                "{name} = {n} exceeds n_sessions = {n_sessions}"
            )));
        }
    }
    let num = INTENT_W_ATC * f64::from(n_atc)
        + INTENT_W_CHECKOUT * f64::from(n_co)
        + INTENT_W_PURCHASE * f64::from(n_pur);
    if num == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (f64::from(n_sessions) + num))
}

/// Funnel signature used to gate contrastive positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FunnelSignature {
    None = 0,
    View = 1,
    Cart = 2,
    Purchase = 3,
}

impl FunnelSignature {
    pub fn of(s: &ScalarFeatures) -> Self {
        if s.purchase_sessions > 0 {
            FunnelSignature::Purchase
        } else if s.atc_sessions > 0 || s.checkout_sessions > 0 {
            FunnelSignature::Cart
        } else if s.pdp_view_sessions > 0 {
            FunnelSignature::View
        } else {
            FunnelSignature::None
        }
    }
}

/// Product embedding lookup backed by a dense `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

pub const CATALOG_MAGIC: &[u8; 6] = b"SPCAT1";

impl Catalog {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, embedding: &[f32]) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding of width {} in a catalog of dimension {}",
                embedding.len(),
                self.dim
            )));
        }
        let id = id.into();
        if self.index.contains_key(&id) {
            return Err(Error::Schema(format!("duplicate product_id {id}")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(embedding);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index
            .get(id)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CATALOG_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for (i, id) in self.ids.iter().enumerate() {
            write_str(&mut w, id)?;
            for v in &self.data[i * self.dim..(i + 1) * self.dim] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != CATALOG_MAGIC {
            return Err(Error::Format("catalog magic mismatch".into()));
        }
        let dim = read_u32(&mut r)? as usize;
        let rows = read_u64(&mut r)?;
        let mut cat = Catalog::new(dim);
        let mut buf = vec![0f32; dim];
        for _ in 0..rows {
            let id = read_str(&mut r)?;
            for v in buf.iter_mut() {
                *v = read_f32(&mut r)?;
            }
            cat.insert(id, &buf)?;
        }
        Ok(cat)
    }
}

pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub(crate) fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(Error::Format(format!("string length {len} is implausible")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(e.to_string()))
}

/// Everything known about one buyer at one shop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuyerShopAggregate {
    pub buyer_id: String,
    pub shop_id: String,
    pub scalars: ScalarFeatures,
    /// Sessions without add-to-cart, checkout start, or purchase.
    pub browse_only_sessions: u32,
    pub emb_viewed: Option<Vec<f32>>,
    pub emb_carted: Option<Vec<f32>>,
    pub emb_purchased: Option<Vec<f32>>,
    /// Product ids referenced by events but absent from the catalog.
    pub dropped_product_ids: u32,
    pub stratum: Stratum,
}

impl BuyerShopAggregate {
    pub fn embeddings(&self) -> [Option<&[f32]>; 3] {
        [
            self.emb_viewed.as_deref(),
            self.emb_carted.as_deref(),
            self.emb_purchased.as_deref(),
        ]
    }

    pub fn masks(&self) -> [bool; 3] {
        [
            self.emb_viewed.is_some(),
            self.emb_carted.is_some(),
            self.emb_purchased.is_some(),
        ]
    }

    pub fn signature(&self) -> FunnelSignature {
        FunnelSignature::of(&self.scalars)
    }
}

fn channel_mean<'a>(
    ids: impl Iterator<Item = &'a String>,
    catalog: &Catalog,
    dropped: &mut u32,
) -> Option<Vec<f32>> {
    let unique: BTreeSet<&String> = ids.collect();
    let mut sum = vec![0f64; catalog.dim];
    let mut n = 0usize;
    for id in unique {
        match catalog.get(id) {
            Some(e) => {
                for (s, v) in sum.iter_mut().zip(e) {
                    *s += f64::from(*v);
                }
                n += 1;
            }
            None => *dropped += 1,
        }
    }
    (n > 0).then(|| sum.iter().map(|s| (s / n as f64) as f32).collect())
}

/// Aggregates one buyer–shop's sessions into scalars and channel embeddings.
pub fn aggregate(sessions: &[SessionSummary], catalog: &Catalog) -> Result<BuyerShopAggregate> {
    let first = sessions
        .first()
        .ok_or_else(|| Error::Precondition("aggregate needs at least one session".into()))?;
    if let Some(bad) = sessions
        .iter()
        .find(|s| s.buyer_id != first.buyer_id || s.shop_id != first.shop_id)
    {
        return Err(Error::Precondition(format!(
            "session {} belongs to ({}, {})",
            bad.session_id, bad.buyer_id, bad.shop_id
        )));
    }

    let count = |t: EventType| sessions.iter().filter(|s| s.has(t)).count() as u32;
    let total_sessions = sessions.len() as u32;
    let days: BTreeSet<i64> = sessions
        .iter()
        .flat_map(|s| s.event_days.iter().copied())
        .collect();
    let atc_sessions = count(EventType::AddToCart);
    let checkout_sessions = count(EventType::CheckoutStart);
    let purchase_sessions = count(EventType::Purchase);
    let browse_only_sessions = sessions.iter().filter(|s| s.is_browse_only()).count() as u32;

    let mean_of = |vals: Vec<u64>| {
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64
        }
    };
    let n = f64::from(total_sessions);
    let scalars = ScalarFeatures {
        total_sessions,
        active_days: days.len() as u32,
        pdp_view_sessions: count(EventType::ProductView),
        atc_sessions,
        checkout_sessions,
        purchase_sessions,
        search_sessions: count(EventType::Search),
        collection_sessions: count(EventType::CollectionView),
        total_duration_ms: sessions.iter().map(|s| s.duration_ms.max(0) as u64).sum(),
        total_product_views: sessions
            .iter()
            .map(|s| s.counts.get(EventType::ProductView))
            .sum(),
        atc_rate: f64::from(atc_sessions) / n,
        checkout_rate: f64::from(checkout_sessions) / n,
        browse_only_rate: f64::from(browse_only_sessions) / n,
        intent_strength: intent_strength(
            total_sessions,
            atc_sessions,
            checkout_sessions,
            purchase_sessions,
        )?,
        avg_cart_value_cents: mean_of(sessions.iter().filter_map(|s| s.cart_value_cents).collect()),
        avg_order_value_cents: mean_of(
            sessions.iter().filter_map(|s| s.order_value_cents).collect(),
        ),
    };

    let mut dropped = 0;
    let emb_viewed = channel_mean(
        sessions.iter().flat_map(|s| s.product_ids_viewed.iter()),
        catalog,
        &mut dropped,
    );
    let emb_carted = channel_mean(
        sessions.iter().flat_map(|s| s.product_ids_carted.iter()),
        catalog,
        &mut dropped,
    );
    let emb_purchased = channel_mean(
        sessions.iter().flat_map(|s| s.product_ids_purchased.iter()),
        catalog,
        &mut dropped,
    );

    Ok(BuyerShopAggregate {
        buyer_id: first.buyer_id.clone(),
        shop_id: first.shop_id.clone(),
        stratum: stratify(&scalars),
        scalars,
        browse_only_sessions,
        emb_viewed,
        emb_carted,
        emb_purchased,
        dropped_product_ids: dropped,
    })
}

/// Sessionizes and aggregates a whole (possibly interleaved) event log.
/// Output order follows the first appearance of each buyer–shop pair.
pub fn ingest(events: Vec<EventRecord>, catalog: &Catalog) -> Result<Vec<BuyerShopAggregate>> {
    group_by_buyer_shop(events)
        .iter()
        .map(|evs| aggregate(&sessionize(evs)?, catalog))
        .collect()
}

/// Per-shop counts of buyers in each stratum, keyed by shop id.
pub fn stratum_census(rows: &[BuyerShopAggregate]) -> BTreeMap<String, [usize; 5]> {
    let mut out: BTreeMap<String, [usize; 5]> = BTreeMap::new();
    for r in rows {
        out.entry(r.shop_id.clone()).or_default()[r.stratum.index()] += 1;
    }
    out
}

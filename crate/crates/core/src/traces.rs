//! SFT trace records: one record per session step, carrying the persona
//! token, a template goal, the cumulative progress log, a page-observation
//! placeholder, and the action that replays the logged event.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{EventRecord, EventType, SessionLog, Stratum};

pub const SYSTEM_PROMPT_VERSION: &str = "persona-trace-v1";

pub const SYSTEM_PROMPT: &str = "You are a shopper browsing an online store. \
Each turn you receive your buyer profile, your goal, a log of the steps taken so far, \
and the current page. Reply with one JSON object holding an `action` \
(`type`, `target`, `parameters`) and a short `reasoning` string. \
Take exactly one action per turn and only act on elements present on the current page.";

/// `<|persona_k|>` for `0 <= k < K`.
pub fn persona_token_string(k: usize, codebook_size: usize) -> Result<String> {
    if k >= codebook_size {
        return Err(Error::Precondition(format!("token {k} outside 0..{codebook_size}")));
    }
    Ok(format!("<|persona_{k}|>"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Intent-neutral goals.
    One,
    /// Goals that state buy or browse intent from the funnel stratum.
    Two,
}

impl Stage {
    pub fn parse(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::Precondition(format!("stage must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

pub fn synthesize_goal(category: &str, stratum: Stratum, stage: Stage) -> Result<String> {
    if category.trim().is_empty() {
        return Err(Error::Precondition("goal category is empty".into()));
    }
    Ok(match (stage, stratum) {
        (_, Stratum::E) => return Err(Error::Precondition("stratum E sessions are not traced".into())),
        (Stage::One, _) => format!("You are interested in {category}."),
        (Stage::Two, Stratum::D) => format!("You are here to browse {category}."),
        (Stage::Two, _) => format!("You are here to buy {category}."),
    })
}

/// Most frequent collection in the session (ties to the first seen), then
/// the first search query, then a generic fallback.
pub fn infer_category(events: &[EventRecord]) -> String {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for c in events.iter().filter_map(|e| e.collection_id.as_deref()) {
        match counts.iter_mut().find(|(n, _)| *n == c) {
            Some(e) => e.1 += 1,
            None => counts.push((c, 1)),
        }
    }
    let mut best: Option<(&str, usize)> = None;
    for (c, n) in counts {
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((c, n));
        }
    }
    best.map(|(c, _)| c.to_string())
        .or_else(|| events.iter().find_map(|e| e.query.clone()))
        .unwrap_or_else(|| "products".to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageObservation {
    pub page_type: String,
    pub entity_id: Option<String>,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserTurn {
    pub persona: String,
    pub goal: String,
    pub progress: Vec<String>,
    pub observation: PageObservation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    #[serde(rename = "type")]
    pub action_type: EventType,
    pub target: Option<String>,
    pub parameters: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssistantTurn {
    pub action: Action,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub shop_id: String,
    pub buyer_id: String,
    pub session_id: String,
    pub stratum: Stratum,
    pub token: usize,
    pub stage: u8,
    pub step_index: usize,
    pub prompt_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub system: String,
    pub user: UserTurn,
    pub assistant: AssistantTurn,
    pub metadata: TraceMetadata,
}

fn observe(e: &EventRecord) -> PageObservation {
    let (page_type, entity_id, title) = match e.event_type {
        EventType::PageView => ("page", None, "Storefront page".to_string()),
        EventType::ProductView | EventType::AddToCart => {
            let p = e.product_id.clone().unwrap_or_default();
            ("product", Some(p.clone()), format!("Product {p}"))
        }
        EventType::Search => {
            let q = e.query.clone().unwrap_or_default();
            ("search", None, format!("Search: {q}"))
        }
        EventType::CollectionView => {
            let c = e.collection_id.clone().unwrap_or_default();
            ("collection", Some(c.clone()), format!("Collection {c}"))
        }
        EventType::CheckoutStart => ("cart", None, "Cart".to_string()),
        EventType::Purchase => ("checkout", None, "Checkout".to_string()),
    };
    PageObservation {
        page_type: page_type.to_string(),
        entity_id,
        title,
    }
}

fn act(e: &EventRecord) -> AssistantTurn {
    let mut parameters = BTreeMap::new();
    if let Some(q) = &e.query {
        parameters.insert("query".to_string(), serde_json::Value::from(q.clone()));
    }
    if let Some(v) = e.value_cents {
        parameters.insert("value_cents".to_string(), serde_json::Value::from(v));
    }
    let target = e.product_id.clone().or_else(|| e.collection_id.clone());
    let reasoning = match e.event_type {
        EventType::PageView => "Look around the store.".to_string(),
        EventType::ProductView => format!("Open product {} for details.", target.as_deref().unwrap_or("")),
        EventType::Search => format!("Search for {}.", e.query.as_deref().unwrap_or("")),
        EventType::CollectionView => format!("Browse the {} collection.", target.as_deref().unwrap_or("")),
        EventType::AddToCart => format!("Add product {} to the cart.", target.as_deref().unwrap_or("")),
        EventType::CheckoutStart => "Proceed to checkout.".to_string(),
        EventType::Purchase => "Complete the order.".to_string(),
    };
    AssistantTurn {
        action: Action {
            action_type: e.event_type,
            target,
            parameters,
        },
        reasoning,
    }
}

fn progress_entry(step: usize, e: &EventRecord) -> String {
    let mut s = format!("Step {}: {}", step + 1, e.event_type);
    if let Some(t) = e.product_id.as_deref().or(e.collection_id.as_deref()).or(e.query.as_deref()) {
        s.push(' ');
        s.push_str(t);
    }
    s
}

/// Token and stratum of one buyer–shop pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuyerPersona {
    pub token: usize,
    pub stratum: Stratum,
}

/// One record per event of every session. Empty sessions and stratum E
/// buyers are skipped with a diagnostic.
pub fn emit_traces(
    sessions: &[SessionLog],
    personas: &BTreeMap<(String, String), BuyerPersona>,
    codebook_size: usize,
    stage: Stage,
) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for s in sessions {
        let sum = &s.summary;
        if s.events.is_empty() {
            tracing::warn!(session = %sum.session_id, "session without events skipped");
            continue;
        }
        let p = personas
            .get(&(sum.buyer_id.clone(), sum.shop_id.clone()))
            .ok_or_else(|| Error::Precondition(format!("buyer {} in shop {} has no token", sum.buyer_id, sum.shop_id)))?;
        if p.stratum == Stratum::E {
            tracing::debug!(session = %sum.session_id, "stratum E session skipped");
            continue;
        }
        let persona = persona_token_string(p.token, codebook_size)?;
        let goal = synthesize_goal(&infer_category(&s.events), p.stratum, stage)?;
        let mut progress = Vec::with_capacity(s.events.len());
        for (step, e) in s.events.iter().enumerate() {
            out.push(TraceRecord {
                system: SYSTEM_PROMPT.to_string(),
                user: UserTurn {
                    persona: persona.clone(),
                    goal: goal.clone(),
                    progress: progress.clone(),
                    observation: observe(e),
                },
                assistant: act(e),
                metadata: TraceMetadata {
                    shop_id: sum.shop_id.clone(),
                    buyer_id: sum.buyer_id.clone(),
                    session_id: sum.session_id.clone(),
                    stratum: p.stratum,
                    token: p.token,
                    stage: stage.number(),
                    step_index: step,
                    prompt_version: SYSTEM_PROMPT_VERSION.to_string(),
                },
            });
            progress.push(progress_entry(step, e));
        }
    }
    Ok(out)
}

pub fn write_traces<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_traces<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("trace line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

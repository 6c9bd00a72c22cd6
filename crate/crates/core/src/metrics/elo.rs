use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GameResult {
    A,
    B,
    Draw,
}

/// One pairwise judgment; the JSON-lines form is `{"a": .., "b": .., "result": "a" | "b" | "draw"}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outcome {
    pub a: String,
    pub b: String,
    pub result: GameResult,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EloConfig {
    pub k: f64,
    pub init: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for EloConfig {
    fn default() -> Self {
        Self {
            k: 32.0,
            init: 1200.0,
            epochs: 1,
            seed: 0,
        }
    }
}

pub fn expected_score(ra: f64, rb: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((rb - ra) / 400.0))
}

/// The order in which outcomes are replayed during `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(seed, &[epoch as u64])));
    order
}

/// Sequential Elo ratings, replaying the outcomes in a seeded shuffle each epoch.
pub fn elo(outcomes: &[Outcome], cfg: &EloConfig) -> Result<BTreeMap<String, f64>> {
    let mut ratings = BTreeMap::new();
    for o in outcomes {
        if o.a == o.b {
            return Err(Error::Format(format!("player {} paired with itself", o.a)));
        }
        ratings.entry(o.a.clone()).or_insert(cfg.init);
        ratings.entry(o.b.clone()).or_insert(cfg.init);
    }
    for epoch in 0..cfg.epochs {
        for i in epoch_order(outcomes.len(), cfg.seed, epoch) {
            let o = &outcomes[i];
            let (ra, rb) = (ratings[&o.a], ratings[&o.b]);
            let ea = expected_score(ra, rb);
            let sa = match o.result {
                GameResult::A => 1.0,
                GameResult::B => 0.0,
                GameResult::Draw => 0.5,
            };
            let delta = cfg.k * (sa - ea);
            *ratings.get_mut(&o.a).expect("seeded") = ra + delta;
            *ratings.get_mut(&o.b).expect("seeded") = rb - delta;
        }
    }
    Ok(ratings)
}

/// Parses one judgment per non-blank line.
pub fn parse_jsonl(text: &str) -> Result<Vec<Outcome>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("judgments line {}: {e}", i + 1)))
        })
        .collect()
}

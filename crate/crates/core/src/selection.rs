//! Communication weights and personalized top-N neighbor selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::ranking::RankingScoreTable;
use crate::ClientId;

/// Which terms of the weight are active. `NoLsh`, `NoRank` and `Random` are the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Full,
    NoLsh,
    NoRank,
    Random,
}

impl SelectionMode {
    pub const ALL: [SelectionMode; 4] = [Self::Full, Self::NoLsh, Self::NoRank, Self::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoLsh => "no_lsh",
            Self::NoRank => "no_rank",
            Self::Random => "random",
        }
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| config(format!("unknown mode {s:?}; expected full, no_lsh, no_rank or random")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub n_neighbors: usize,
    pub gamma: f64,
    pub mode: SelectionMode,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { n_neighbors: 4, gamma: 1.0, mode: SelectionMode::Full }
    }
}

impl SelectionConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if self.n_neighbors == 0 || self.n_neighbors >= num_clients {
            return Err(config(format!("n_neighbors must lie in [1, {}), got {}", num_clients, self.n_neighbors)));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(config("gamma must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub owner: ClientId,
    pub weights: BTreeMap<ClientId, f64>,
}

/// Weight of every candidate in `distances` (the owner is skipped).
///
/// `rng` is only consumed in [`SelectionMode::Random`].
pub fn compute_weights<R: Rng + ?Sized>(
    owner: ClientId,
    scores: &RankingScoreTable,
    distances: &BTreeMap<ClientId, u32>,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> WeightRow {
    let weights = distances
        .iter()
        .filter(|(&p, _)| p != owner)
        .map(|(&p, &d)| {
            let similarity = (-cfg.gamma * f64::from(d)).exp();
            let w = match cfg.mode {
                SelectionMode::Full => scores.score(p) * similarity,
                SelectionMode::NoLsh => scores.score(p),
                SelectionMode::NoRank => similarity,
                // (0, 1]
                SelectionMode::Random => 1.0 - rng.random::<f64>(),
            };
            (p, w)
        })
        .collect();
    WeightRow { owner, weights }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub neighbors: BTreeSet<ClientId>,
    /// Set when fewer than `n` candidates were available.
    pub short: bool,
}

/// Ids of the `n` largest weights, ties to the smaller id.
pub fn select_neighbors(row: &WeightRow, n: usize) -> Selection {
    let mut entries: Vec<(ClientId, f64)> = row.weights.iter().map(|(&p, &w)| (p, w)).collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let short = entries.len() < n;
    Selection { neighbors: entries.into_iter().take(n).map(|(p, _)| p).collect(), short }
}

/// Uniform sample of `n` peers without replacement, excluding the owner.
pub fn first_round_neighbors<R: Rng + ?Sized>(
    owner: ClientId,
    all_peers: &[ClientId],
    n: usize,
    rng: &mut R,
) -> Selection {
    let candidates: Vec<ClientId> = all_peers.iter().copied().filter(|&p| p != owner).collect();
    let short = candidates.len() < n;
    Selection { neighbors: candidates.choose_multiple(rng, n).copied().collect(), short }
}

//! Per-client performance rankings and network-wide ranking scores.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::ClientId;

/// Score given to peers that appear in no verified ranking.
pub const DEFAULT_SCORE: f64 = 0.5;

/// Peers ordered best first (ascending distillation loss).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingList {
    pub owner: ClientId,
    pub round: u32,
    pub ranked_peers: Vec<ClientId>,
}

impl RankingList {
    /// Checks the list has no duplicates and does not rank its owner.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &p in &self.ranked_peers {
            if p == self.owner {
                return Err(Error::Protocol(format!("client {} ranks itself", self.owner)));
            }
            if !seen.insert(p) {
                return Err(Error::Protocol(format!("client {} ranks peer {p} twice", self.owner)));
            }
        }
        Ok(())
    }

    /// Zero-based position of `peer`, if ranked.
    pub fn position(&self, peer: ClientId) -> Option<usize> {
        self.ranked_peers.iter().position(|&p| p == peer)
    }
}

/// Sorts peers by ascending loss, ties by smaller id.
pub fn build_ranking(owner: ClientId, losses: &BTreeMap<ClientId, f64>, round: u32) -> Result<RankingList> {
    if let Some((peer, _)) = losses.iter().find(|(_, l)| l.is_nan()) {
        return Err(Error::Protocol(format!("loss for peer {peer} is NaN")));
    }
    let mut entries: Vec<(ClientId, f64)> = losses.iter().map(|(&p, &l)| (p, l)).collect();
    entries.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let list = RankingList { owner, round, ranked_peers: entries.into_iter().map(|(p, _)| p).collect() };
    list.validate()?;
    Ok(list)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingScoreTable {
    pub scores: BTreeMap<ClientId, f64>,
    pub round: u32,
    pub top_k: usize,
}

impl RankingScoreTable {
    pub fn score(&self, peer: ClientId) -> f64 {
        self.scores.get(&peer).copied().unwrap_or(DEFAULT_SCORE)
    }
}

/// Fraction of the rankings containing each peer in which it sits within the first `top_k`.
pub fn ranking_scores(rankings: &[RankingList], top_k: usize, all_peers: &[ClientId], round: u32) -> RankingScoreTable {
    let mut hits: BTreeMap<ClientId, (usize, usize)> = all_peers.iter().map(|&p| (p, (0, 0))).collect();
    for r in rankings {
        for (pos, &p) in r.ranked_peers.iter().enumerate() {
            let e = hits.entry(p).or_default();
            e.1 += 1;
            if pos < top_k {
                e.0 += 1;
            }
        }
    }
    let scores = hits
        .into_iter()
        .map(|(p, (top, total))| (p, if total == 0 { DEFAULT_SCORE } else { top as f64 / total as f64 }))
        .collect();
    RankingScoreTable { scores, round, top_k }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rl(owner: ClientId, peers: &[ClientId]) -> RankingList {
        RankingList { owner, round: 1, ranked_peers: peers.to_vec() }
    }

    #[test]
    fn sorts_by_loss() {
        let losses = BTreeMap::from([(2, 0.1), (5, 0.3), (1, 0.2)]);
        assert_eq!(build_ranking(0, &losses, 3).unwrap().ranked_peers, vec![2, 1, 5]);
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let losses = BTreeMap::from([(3, 0.5), (1, 0.5)]);
        assert_eq!(build_ranking(0, &losses, 3).unwrap().ranked_peers, vec![1, 3]);
    }

    #[test]
    fn nan_loss_names_peer() {
        let losses = BTreeMap::from([(3, f64::NAN), (1, 0.5)]);
        let err = build_ranking(0, &losses, 3).unwrap_err();
        assert!(err.to_string().contains("peer 3"));
    }

    #[test]
    fn owner_cannot_rank_itself() {
        let losses = BTreeMap::from([(0, 0.1)]);
        assert!(build_ranking(0, &losses, 1).is_err());
        assert!(rl(1, &[2, 2]).validate().is_err());
    }

    #[test]
    fn score_cases() {
        let rankings = vec![rl(0, &[7, 1, 2]), rl(1, &[7, 2]), rl(2, &[1, 7])];
        let t = ranking_scores(&rankings, 1, &[0, 1, 2, 7, 9], 4);
        assert_eq!(t.score(7), 2.0 / 3.0);
        assert_eq!(t.score(1), 0.5);
        assert_eq!(t.score(2), 0.0);
        assert_eq!(t.score(9), DEFAULT_SCORE);
        assert_eq!(t.score(0), DEFAULT_SCORE);
        let t = ranking_scores(&[rl(0, &[7, 1]), rl(1, &[7])], 1, &[7], 4);
        assert_eq!(t.score(7), 1.0);
    }
}

//! Per-client protocol steps: neighbor selection from the board, the
//! reference-set exchange, peer evaluation, the KL similarity filter, the
//! model update, and announcement publication.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::announce::{commit, verify_reveal, Announcement, Board, Reveal, Salt};
use crate::data::ClientData;
use crate::error::{invalid, Result};
use crate::lsh::{encode, hamming, LshBasis, LshCode};
use crate::model::{combined_update, cross_entropy, predict, Matrix, ModelParams, Objective, Prediction, PROB_FLOOR};
use crate::ranking::{build_ranking, ranking_scores, RankingList, RankingScoreTable};
use crate::selection::{compute_weights, first_round_neighbors, select_neighbors, SelectionConfig};
use crate::ClientId;

/// Protocol knobs shared by every client in a run.
#[derive(Debug, Clone)]
pub struct ProtocolSettings {
    pub selection: SelectionConfig,
    pub top_k: usize,
    pub lr: f64,
    pub local_steps: usize,
    pub salted_commitments: bool,
    pub lsh_filter_enabled: bool,
}

/// Features of the requester's reference set, sent to one neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceQuery {
    pub from: ClientId,
    pub to: ClientId,
    pub round: u32,
    pub features: Matrix,
}

/// A neighbor's predicted probabilities on the requester's reference features.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerResponse {
    pub peer_id: ClientId,
    pub outputs: Prediction,
}

/// Every message type that crosses a client boundary.
#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Query(ReferenceQuery),
    Response(PeerResponse),
    Announce(Announcement),
    Reveal(Reveal),
}

/// Kinds of information a message can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Payload {
    ClientIds,
    RoundNumber,
    ReferenceFeatures,
    PredictedProbabilities,
    LshCode,
    Commitment,
    PeerRanking,
    Salt,
    // never permitted on the wire
    ReferenceLabels,
    LocalFeatures,
    LocalLabels,
    ModelParameters,
}

impl Payload {
    pub const PRIVATE: [Payload; 4] =
        [Payload::ReferenceLabels, Payload::LocalFeatures, Payload::LocalLabels, Payload::ModelParameters];
}

impl WireMessage {
    /// Information carried by this message, derived from its fields.
    pub fn payloads(&self) -> BTreeSet<Payload> {
        use Payload::*;
        let v: &[Payload] = match self {
            WireMessage::Query(ReferenceQuery { from: _, to: _, round: _, features: _ }) => {
                &[ClientIds, RoundNumber, ReferenceFeatures]
            }
            WireMessage::Response(PeerResponse { peer_id: _, outputs: _ }) => &[ClientIds, PredictedProbabilities],
            WireMessage::Announce(Announcement { client_id: _, round: _, lsh_code: _, commitment: _ }) => {
                &[ClientIds, RoundNumber, LshCode, Commitment]
            }
            WireMessage::Reveal(Reveal { client_id: _, round: _, ranking: _, salt: _ }) => {
                &[ClientIds, RoundNumber, PeerRanking, Salt]
            }
        };
        v.iter().copied().collect()
    }
}

/// Role a client plays in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Honest,
    /// Forges its LSH code to mimic `target` and answers with a model trained on permuted labels.
    LshCheater {
        target: ClientId,
    },
    /// Periodically reinitializes its parameters.
    Poisoner,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Honest => "honest",
            Role::LshCheater { .. } => "lsh_cheater",
            Role::Poisoner => "poisoner",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: ClientId,
    pub params: ModelParams,
    pub data: ClientData,
    pub neighbors: BTreeSet<ClientId>,
    pub pending_reveal: Option<(RankingList, Option<Salt>)>,
    pub rng: ChaCha8Rng,
    pub alpha: f64,
    pub role: Role,
    /// Model trained on permuted labels, held by LSH cheaters until the attack starts.
    pub shadow: Option<ModelParams>,
}

/// Outcome of reading round `t - 1` from the board and choosing neighbors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectionOutcome {
    pub neighbors: BTreeSet<ClientId>,
    pub verify_failures: Vec<ClientId>,
    pub scores: Option<RankingScoreTable>,
    pub distances: BTreeMap<ClientId, u32>,
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub valid: Vec<PeerResponse>,
    pub excluded: Vec<ClientId>,
    pub divergences: BTreeMap<ClientId, f64>,
}

impl ClientState {
    /// Verified rankings of round `round` visible on the board, plus the ids whose reveal failed.
    pub fn verified_rankings(board: &Board, round: u32) -> (Vec<RankingList>, Vec<ClientId>) {
        let announcements = board.announcements(round);
        let mut ok = Vec::new();
        let mut failed = Vec::new();
        for (id, reveal) in board.reveals(round) {
            let verified = announcements
                .get(&id)
                .map(|a| verify_reveal(a, reveal).unwrap_or(false) && reveal.ranking.validate().is_ok())
                .unwrap_or(false);
            if verified {
                ok.push(reveal.ranking.clone());
            } else {
                failed.push(id);
            }
        }
        (ok, failed)
    }

    /// Chooses this round's neighbors. Round 1 samples uniformly; later rounds
    /// weight peers by verified ranking scores and LSH distance from round `t - 1`.
    pub fn select(
        &mut self,
        board: &Board,
        round: u32,
        all_peers: &[ClientId],
        own_code: &LshCode,
        settings: &ProtocolSettings,
    ) -> Result<SelectionOutcome> {
        let n = settings.selection.n_neighbors;
        if round <= 1 {
            let s = first_round_neighbors(self.id, all_peers, n, &mut self.rng);
            self.neighbors = s.neighbors.clone();
            return Ok(SelectionOutcome { neighbors: s.neighbors, short: s.short, ..Default::default() });
        }
        let prev = round - 1;
        let (rankings, verify_failures) = Self::verified_rankings(board, prev);
        let scores = ranking_scores(&rankings, settings.top_k, all_peers, prev);
        let mut distances = BTreeMap::new();
        for (id, a) in board.announcements(prev) {
            if id != self.id {
                distances.insert(id, hamming(own_code, &a.lsh_code)?);
            }
        }
        let row = compute_weights(self.id, &scores, &distances, &settings.selection, &mut self.rng);
        let s = select_neighbors(&row, n);
        self.neighbors = s.neighbors.clone();
        Ok(SelectionOutcome {
            neighbors: s.neighbors,
            verify_failures,
            scores: Some(scores),
            distances,
            short: s.short,
        })
    }

    /// Query messages for this round's neighbors.
    pub fn queries(&self, round: u32) -> Vec<ReferenceQuery> {
        self.neighbors
            .iter()
            .map(|&to| ReferenceQuery { from: self.id, to, round, features: self.data.reference.features.clone() })
            .collect()
    }

    /// Answers a query with this client's current model.
    pub fn respond(&self, query: &ReferenceQuery) -> Result<PeerResponse> {
        Ok(PeerResponse { peer_id: self.id, outputs: predict(&self.params, &query.features)? })
    }

    /// Own predictions on the reference features.
    pub fn own_reference_outputs(&self) -> Result<Prediction> {
        predict(&self.params, &self.data.reference.features)
    }
}

/// Sends the requester's reference features to each responder and collects
/// the answers. `lookup` returns `None` for unreachable peers, which are skipped.
pub fn exchange<'a, F>(requester: &ClientState, round: u32, mut lookup: F) -> Result<Vec<PeerResponse>>
where
    F: FnMut(ClientId) -> Option<&'a ClientState>,
{
    let mut out = Vec::new();
    for q in requester.queries(round) {
        if let Some(peer) = lookup(q.to) {
            out.push(peer.respond(&q)?);
        }
    }
    Ok(out)
}

/// Cross-entropy of each response against the requester's reference labels.
pub fn evaluate_peers(state: &ClientState, responses: &[PeerResponse]) -> Result<BTreeMap<ClientId, f64>> {
    responses.iter().map(|r| Ok((r.peer_id, cross_entropy(&r.outputs, &state.data.reference.labels)?))).collect()
}

/// Mean over rows of KL(own ‖ peer), both floored at [`PROB_FLOOR`].
pub fn mean_kl(own: &Prediction, peer: &Prediction) -> Result<f64> {
    let (a, b) = (&own.probabilities, &peer.probabilities);
    if a.rows() != b.rows() || a.cols() != b.cols() || a.rows() == 0 {
        return Err(invalid("KL divergence needs two non-empty predictions of equal shape"));
    }
    let mut total = 0.0;
    for i in 0..a.rows() {
        for (p, q) in a.row(i).iter().zip(b.row(i)) {
            let p = p.max(PROB_FLOOR);
            let q = q.max(PROB_FLOOR);
            total += p * (p / q).ln();
        }
    }
    Ok(total / a.rows() as f64)
}

/// Keeps the `m - ⌊m/2⌋` responses closest to the client's own outputs by KL
/// divergence (ties to the smaller id) and excludes the rest.
pub fn lsh_filter(own_outputs: &Prediction, responses: Vec<PeerResponse>) -> Result<FilterOutcome> {
    let mut scored =
        responses.into_iter().map(|r| Ok((mean_kl(own_outputs, &r.outputs)?, r))).collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.peer_id.cmp(&b.1.peer_id)));
    let divergences = scored.iter().map(|(kl, r)| (r.peer_id, *kl)).collect();
    let keep = scored.len() - scored.len() / 2;
    let excluded_part = scored.split_off(keep);
    Ok(FilterOutcome {
        valid: scored.into_iter().map(|(_, r)| r).collect(),
        excluded: excluded_part.into_iter().map(|(_, r)| r.peer_id).collect(),
        divergences,
    })
}

/// Objective and update for one client given the distillation target.
pub fn local_update(
    state: &ClientState,
    neighbor_mean: Option<&Prediction>,
    settings: &ProtocolSettings,
    round: u32,
) -> Result<ModelParams> {
    let objective = Objective {
        local: &state.data.local_train,
        reference: &state.data.reference.features,
        neighbor_mean,
        alpha: state.alpha,
    };
    combined_update(&state.params, &objective, settings.lr, settings.local_steps, round)
}

/// Builds, commits, and returns the round's announcement; the ranking and
/// salt are kept for the reveal in the next round.
pub fn prepare_announcement(
    state: &mut ClientState,
    losses: &BTreeMap<ClientId, f64>,
    round: u32,
    basis: &LshBasis,
    forged_code: Option<LshCode>,
    salted: bool,
) -> Result<Announcement> {
    let ranking = build_ranking(state.id, losses, round)?;
    let salt: Option<Salt> = salted.then(|| state.rng.random());
    let commitment = commit(&ranking, salt.as_ref());
    let lsh_code = match forged_code {
        Some(c) => c,
        None => encode(&state.params, basis)?,
    };
    state.pending_reveal = Some((ranking, salt));
    Ok(Announcement { client_id: state.id, round, lsh_code, commitment })
}

/// Reveal for the commitment made in the previous round, if any.
pub fn take_reveal(state: &mut ClientState) -> Option<Reveal> {
    state.pending_reveal.take().map(|(ranking, salt)| Reveal {
        client_id: state.id,
        round: ranking.round,
        ranking,
        salt,
    })
}

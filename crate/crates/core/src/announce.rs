//! Append-only announcement board and salted commit-and-reveal of rankings.
//!
//! The board is an in-process ordered log. Records published during a phase
//! are staged and become readable only after the next [`Board::barrier`].
//!
//! Commitment byte layout (all integers big-endian):
//!
//! ```text
//! round: u32 | peer_0: u32 | peer_1: u32 | ... | salt: 16 bytes (salted mode only)
//! ```
//!
//! digested with SHA-256.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use sha2::{Digest as _, Sha256};

use crate::error::{invalid, Error, Result};
use crate::lsh::LshCode;
use crate::ranking::RankingList;
use crate::ClientId;

/// Name of the commitment hash, recorded in run manifests.
pub const HASH_ALGORITHM: &str = "sha256";

pub type Digest = [u8; 32];
pub type Salt = [u8; 16];

/// Canonical bytes hashed by [`commit`].
pub fn commitment_bytes(ranking: &RankingList, salt: Option<&Salt>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(4 + 4 * ranking.ranked_peers.len() + 16);
    buf.extend_from_slice(&ranking.round.to_be_bytes());
    for p in &ranking.ranked_peers {
        buf.extend_from_slice(&p.to_be_bytes());
    }
    if let Some(s) = salt {
        buf.extend_from_slice(s);
    }
    buf
}

/// Commitment to a ranking. `salt = None` reproduces the unsalted `Hash(R)` form.
pub fn commit(ranking: &RankingList, salt: Option<&Salt>) -> Digest {
    Sha256::digest(commitment_bytes(ranking, salt)).into()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Announcement {
    pub client_id: ClientId,
    pub round: u32,
    pub lsh_code: LshCode,
    pub commitment: Digest,
}

/// Opening of the commitment made in `round`, published in a later round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reveal {
    pub client_id: ClientId,
    pub round: u32,
    pub ranking: RankingList,
    pub salt: Option<Salt>,
}

/// True iff the reveal opens the announcement's commitment.
pub fn verify_reveal(announcement: &Announcement, reveal: &Reveal) -> Result<bool> {
    if announcement.client_id != reveal.client_id || announcement.round != reveal.round {
        return Err(invalid(format!(
            "reveal ({}, {}) does not match announcement ({}, {})",
            reveal.client_id, reveal.round, announcement.client_id, announcement.round
        )));
    }
    if reveal.ranking.owner != reveal.client_id || reveal.ranking.round != reveal.round {
        return Ok(false);
    }
    Ok(commit(&reveal.ranking, reveal.salt.as_ref()) == announcement.commitment)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordKind {
    Announce,
    Reveal,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Announce => "announce",
            RecordKind::Reveal => "reveal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Announce(Announcement),
    Reveal(Reveal),
}

impl Record {
    pub fn kind(&self) -> RecordKind {
        match self {
            Record::Announce(_) => RecordKind::Announce,
            Record::Reveal(_) => RecordKind::Reveal,
        }
    }

    pub fn client_id(&self) -> ClientId {
        match self {
            Record::Announce(a) => a.client_id,
            Record::Reveal(r) => r.client_id,
        }
    }

    pub fn round(&self) -> u32 {
        match self {
            Record::Announce(a) => a.round,
            Record::Reveal(r) => r.round,
        }
    }

    /// Binary payload used in the board dump.
    ///
    /// Announce: `bits: u32 | code bytes (MSB first) | commitment: 32 bytes`.
    /// Reveal: `salted: u8 | salt: 16 bytes if salted | count: u32 | peers: u32 each`.
    pub fn payload(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        match self {
            Record::Announce(a) => {
                buf.extend_from_slice(&(a.lsh_code.len() as u32).to_be_bytes());
                let mut byte = 0u8;
                for k in 0..a.lsh_code.len() {
                    byte = (byte << 1) | u8::from(a.lsh_code.bit(k));
                    if k % 8 == 7 {
                        buf.push(byte);
                        byte = 0;
                    }
                }
                let rem = a.lsh_code.len() % 8;
                if rem != 0 {
                    buf.push(byte << (8 - rem));
                }
                buf.extend_from_slice(&a.commitment);
            }
            Record::Reveal(r) => {
                match &r.salt {
                    Some(s) => {
                        buf.push(1);
                        buf.extend_from_slice(s);
                    }
                    None => buf.push(0),
                }
                buf.extend_from_slice(&(r.ranking.ranked_peers.len() as u32).to_be_bytes());
                for p in &r.ranking.ranked_peers {
                    buf.extend_from_slice(&p.to_be_bytes());
                }
            }
        }
        buf
    }

    /// One dump line: `round|client|kind|payload-hex`.
    pub fn dump_line(&self) -> String {
        format!("{}|{}|{}|{}", self.round(), self.client_id(), self.kind().as_str(), hex::encode(self.payload()))
    }

    pub fn parse_line(line: &str, line_no: usize) -> Result<Record> {
        let perr = |detail: String| Error::Parse { line: line_no, detail };
        let fields: Vec<&str> = line.split('|').collect();
        let [round, client, kind, payload] = fields[..] else {
            return Err(perr(format!("expected 4 fields, found {}", fields.len())));
        };
        let round: u32 = round.parse().map_err(|_| perr(format!("bad round {round:?}")))?;
        let client_id: ClientId = client.parse().map_err(|_| perr(format!("bad client {client:?}")))?;
        let bytes = hex::decode(payload).map_err(|e| perr(format!("bad payload hex: {e}")))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let record = match kind {
            "announce" => {
                let bits = cur.u32().ok_or_else(|| perr("truncated announce".into()))? as usize;
                let code_bytes = cur.take(bits.div_ceil(8)).ok_or_else(|| perr("truncated code".into()))?;
                let code_bits: Vec<bool> = (0..bits).map(|k| (code_bytes[k / 8] >> (7 - k % 8)) & 1 == 1).collect();
                let commitment: Digest =
                    cur.take(32).and_then(|s| s.try_into().ok()).ok_or_else(|| perr("truncated commitment".into()))?;
                Record::Announce(Announcement {
                    client_id,
                    round,
                    lsh_code: LshCode::from_bits(&code_bits),
                    commitment,
                })
            }
            "reveal" => {
                let salt = match cur.take(1).ok_or_else(|| perr("truncated reveal".into()))?[0] {
                    0 => None,
                    1 => Some(
                        cur.take(16).and_then(|s| s.try_into().ok()).ok_or_else(|| perr("truncated salt".into()))?,
                    ),
                    f => return Err(perr(format!("bad salt flag {f}"))),
                };
                let n = cur.u32().ok_or_else(|| perr("truncated peer count".into()))? as usize;
                let peers = (0..n)
                    .map(|_| cur.u32().ok_or_else(|| perr("truncated peer list".into())))
                    .collect::<Result<Vec<_>>>()?;
                Record::Reveal(Reveal {
                    client_id,
                    round,
                    ranking: RankingList { owner: client_id, round, ranked_peers: peers },
                    salt,
                })
            }
            other => return Err(perr(format!("unknown record kind {other:?}"))),
        };
        if cur.pos != bytes.len() {
            return Err(perr("trailing payload bytes".into()));
        }
        Ok(record)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_be_bytes(s.try_into().expect("4 bytes")))
    }
}

/// Ordered, append-only log with round barriers.
#[derive(Debug, Default, Clone)]
pub struct Board {
    current_round: u32,
    committed: Vec<Record>,
    staged: Vec<Record>,
    keys: HashSet<(ClientId, u32, RecordKind)>,
}

impl Board {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current_round(&self) -> u32 {
        self.current_round
    }

    /// Opens the publishing window for `round`. Rounds only move forward.
    pub fn begin_round(&mut self, round: u32) -> Result<()> {
        if round <= self.current_round {
            return Err(invalid(format!("board is at round {}, cannot begin round {round}", self.current_round)));
        }
        self.barrier();
        self.current_round = round;
        Ok(())
    }

    /// Stages a record; it becomes readable after the next barrier.
    pub fn publish(&mut self, record: Record) -> Result<()> {
        let key = (record.client_id(), record.round(), record.kind());
        match &record {
            Record::Announce(a) if a.round != self.current_round => {
                return Err(Error::Rejected(format!(
                    "announcement for round {} outside its publishing phase (board at {})",
                    a.round, self.current_round
                )))
            }
            Record::Reveal(r) if r.round >= self.current_round => {
                return Err(Error::Rejected(format!(
                    "reveal for round {} published before round {}",
                    r.round,
                    r.round + 1
                )))
            }
            _ => {}
        }
        if !self.keys.insert(key) {
            return Err(Error::Rejected(format!(
                "duplicate {} from client {} for round {}",
                key.2.as_str(),
                key.0,
                key.1
            )));
        }
        self.staged.push(record);
        Ok(())
    }

    /// Makes all staged records visible, preserving publication order.
    pub fn barrier(&mut self) {
        self.committed.append(&mut self.staged);
    }

    /// Visible records tagged with `round`.
    pub fn fetch_round(&self, round: u32) -> Vec<&Record> {
        self.committed.iter().filter(|r| r.round() == round).collect()
    }

    pub fn announcements(&self, round: u32) -> BTreeMap<ClientId, &Announcement> {
        self.committed
            .iter()
            .filter_map(|r| match r {
                Record::Announce(a) if a.round == round => Some((a.client_id, a)),
                _ => None,
            })
            .collect()
    }

    pub fn reveals(&self, round: u32) -> BTreeMap<ClientId, &Reveal> {
        self.committed
            .iter()
            .filter_map(|r| match r {
                Record::Reveal(v) if v.round == round => Some((v.client_id, v)),
                _ => None,
            })
            .collect()
    }

    pub fn records(&self) -> &[Record] {
        &self.committed
    }

    /// All visible records, one dump line each.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for r in &self.committed {
            let _ = writeln!(s, "{}", r.dump_line());
        }
        s
    }
}

/// Verifies a reveal against the matching announcement, if both exist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevealCheck {
    pub client_id: ClientId,
    pub round: u32,
    pub outcome: RevealOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RevealOutcome {
    Verified,
    Mismatch,
    MissingAnnouncement,
}

/// Re-checks every reveal in a dump against its announcement.
pub fn verify_dump(text: &str) -> Result<Vec<RevealCheck>> {
    let mut announcements = BTreeMap::new();
    let mut reveals = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match Record::parse_line(line, i + 1)? {
            Record::Announce(a) => {
                announcements.insert((a.client_id, a.round), a);
            }
            Record::Reveal(r) => reveals.push(r),
        }
    }
    reveals
        .into_iter()
        .map(|r| {
            let outcome = match announcements.get(&(r.client_id, r.round)) {
                None => RevealOutcome::MissingAnnouncement,
                Some(a) if verify_reveal(a, &r)? => RevealOutcome::Verified,
                Some(_) => RevealOutcome::Mismatch,
            };
            Ok(RevealCheck { client_id: r.client_id, round: r.round, outcome })
        })
        .collect()
}

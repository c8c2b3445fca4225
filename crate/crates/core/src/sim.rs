//! Bulk-synchronous network simulation.
//!
//! Each round runs four barriers in order: reveal the previous round's
//! rankings, select neighbors from the board, exchange reference outputs,
//! then update models and publish announcements. Every client owns its RNG
//! stream, so results do not depend on the order clients are visited.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::{is_reinit_round, permute_labels, AttackConfig, AttackKind};
use crate::announce::{Board, Record, HASH_ALGORITHM};
use crate::data::{generate_synthetic, partition_non_iid, DataConfig};
use crate::error::{config, Error, Result};
use crate::lsh::{encode, make_basis, LshBasis};
use crate::model::{
    accuracy, combined_update, cross_entropy, distill_loss, predict, ModelParams, Objective, Prediction,
};
use crate::protocol::{
    evaluate_peers, exchange, local_update, lsh_filter, prepare_announcement, take_reveal, ClientState, Payload,
    ProtocolSettings, Role, WireMessage,
};
use crate::rng::{stream, Stream};
use crate::selection::{SelectionConfig, SelectionMode};
use crate::ClientId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub rounds: u32,
    pub alpha: f64,
    /// Defaults to `ceil(n_neighbors / 2)` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    pub lsh_bits: usize,
    pub lr: f64,
    pub local_steps: usize,
    pub master_seed: u64,
    pub salted_commitments: bool,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub selection: SelectionConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            rounds: 60,
            alpha: 0.6,
            top_k: None,
            lsh_bits: 64,
            lr: 0.1,
            local_steps: 5,
            master_seed: 0,
            salted_commitments: true,
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            selection: SelectionConfig::default(),
            attack: None,
        }
    }
}

impl ScenarioConfig {
    pub fn effective_top_k(&self) -> usize {
        self.top_k.unwrap_or_else(|| self.selection.n_neighbors.div_ceil(2))
    }

    /// Sets the master seed and the data seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self.data.seed = seed;
        self
    }

    pub fn with_mode(mut self, mode: SelectionMode) -> Self {
        self.selection.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(config("rounds must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config("alpha must lie in [0, 1]"));
        }
        if self.lsh_bits == 0 {
            return Err(config("lsh_bits must be positive"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(config("lr must be finite and non-negative"));
        }
        if self.local_steps == 0 {
            return Err(config("local_steps must be at least 1"));
        }
        if self.effective_top_k() == 0 {
            return Err(config("top_k must be at least 1"));
        }
        self.data.validate()?;
        self.selection.validate(self.data.num_clients)?;
        if let Some(a) = &self.attack {
            a.validate(self.data.num_clients)?;
        }
        Ok(())
    }

    pub fn lsh_filter_enabled(&self) -> bool {
        self.attack.as_ref().is_none_or(|a| a.lsh_verification_enabled)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config(format!("invalid scenario file: {e}")))
    }
}

/// One record per (round, client).
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: u32,
    pub client_id: ClientId,
    pub role: Role,
    pub test_accuracy: f64,
    pub local_loss: f64,
    /// Absent when the client had no distillation target this round.
    pub ref_loss: Option<f64>,
    pub neighbor_ids: Vec<ClientId>,
    pub excluded_ids: Vec<ClientId>,
    pub verify_failures: Vec<ClientId>,
    /// Neighbors whose outputs entered the distillation target.
    pub valid_ids: Vec<ClientId>,
}

pub const METRICS_HEADER: &str =
    "round,client_id,role,test_accuracy,local_loss,ref_loss,neighbor_ids,excluded_ids,verify_failures";

fn join_ids(ids: &[ClientId]) -> String {
    ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.round,
            self.client_id,
            self.role.as_str(),
            self.test_accuracy,
            self.local_loss,
            self.ref_loss.map(|v| v.to_string()).unwrap_or_default(),
            join_ids(&self.neighbor_ids),
            join_ids(&self.excluded_ids),
            join_ids(&self.verify_failures)
        )
    }
}

pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

/// Counts of every message that crossed a client boundary, with their payload kinds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MessageAudit {
    pub counts: BTreeMap<&'static str, u64>,
    pub payloads: BTreeSet<Payload>,
}

impl MessageAudit {
    fn record(&mut self, msg: &WireMessage) {
        let name = match msg {
            WireMessage::Query(_) => "query",
            WireMessage::Response(_) => "response",
            WireMessage::Announce(_) => "announce",
            WireMessage::Reveal(_) => "reveal",
        };
        *self.counts.entry(name).or_default() += 1;
        self.payloads.extend(msg.payloads());
    }

    pub fn leaked(&self) -> Vec<Payload> {
        Payload::PRIVATE.iter().copied().filter(|p| self.payloads.contains(p)).collect()
    }
}

pub struct Simulation {
    cfg: ScenarioConfig,
    settings: ProtocolSettings,
    basis: LshBasis,
    clients: Vec<ClientState>,
    board: Board,
    round: u32,
    metrics: Vec<RoundMetrics>,
    audit: MessageAudit,
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.data;
        let pool = generate_synthetic(d)?;
        let partition = partition_non_iid(&pool, d)?;
        let dim = d.num_classes * (d.num_features + 1);
        let basis = make_basis(dim, cfg.lsh_bits, cfg.master_seed)?;

        let mut roles = vec![Role::Honest; d.num_clients];
        if let Some(attack) = &cfg.attack {
            let mut rng = stream(cfg.master_seed, Stream::Adversary, 0);
            for id in attack.pick_attackers(d.num_clients, &mut rng) {
                roles[id as usize] = match attack.kind {
                    AttackKind::Poison => Role::Poisoner,
                    AttackKind::LshCheat => Role::LshCheater { target: attack.target_id },
                };
            }
        }

        let clients = partition
            .clients
            .into_iter()
            .enumerate()
            .map(|(i, data)| {
                let id = i as ClientId;
                let mut init_rng = stream(cfg.master_seed, Stream::ClientInit, i as u64);
                let params = ModelParams::random_init(d.num_classes, d.num_features, &mut init_rng);
                let shadow = matches!(roles[i], Role::LshCheater { .. })
                    .then(|| ModelParams::random_init(d.num_classes, d.num_features, &mut init_rng));
                ClientState {
                    id,
                    params,
                    data,
                    neighbors: BTreeSet::new(),
                    pending_reveal: None,
                    rng: stream(cfg.master_seed, Stream::Client, i as u64),
                    alpha: cfg.alpha,
                    role: roles[i],
                    shadow,
                }
            })
            .collect();

        let settings = ProtocolSettings {
            selection: cfg.selection.clone(),
            top_k: cfg.effective_top_k(),
            lr: cfg.lr,
            local_steps: cfg.local_steps,
            salted_commitments: cfg.salted_commitments,
            lsh_filter_enabled: cfg.lsh_filter_enabled(),
        };
        Ok(Self {
            cfg,
            settings,
            basis,
            clients,
            board: Board::new(),
            round: 0,
            metrics: Vec::new(),
            audit: MessageAudit::default(),
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn board(&self) -> &Board {
        &self.board
    }

    pub fn metrics(&self) -> &[RoundMetrics] {
        &self.metrics
    }

    pub fn audit(&self) -> &MessageAudit {
        &self.audit
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    fn attack_active(&self, round: u32) -> Option<&AttackConfig> {
        self.cfg.attack.as_ref().filter(|a| a.active(round))
    }

    /// Runs one full protocol round for every client.
    pub fn step(&mut self) -> Result<()> {
        let t = self.round + 1;
        let n = self.clients.len();
        let all: Vec<ClientId> = (0..n as ClientId).collect();
        self.board.begin_round(t)?;

        // reveal rankings committed last round
        for c in &mut self.clients {
            if let Some(r) = take_reveal(c) {
                self.audit.record(&WireMessage::Reveal(r.clone()));
                self.board.publish(Record::Reveal(r))?;
            }
        }
        self.board.barrier();

        // neighbor selection
        let mut verify_failures = Vec::with_capacity(n);
        for c in &mut self.clients {
            let own_code = encode(&c.params, &self.basis)?;
            let outcome = c.select(&self.board, t, &all, &own_code, &self.settings)?;
            verify_failures.push(outcome.verify_failures);
        }

        // exchange against the start-of-round models
        let mut rounds = Vec::with_capacity(n);
        for c in &self.clients {
            for q in c.queries(t) {
                self.audit.record(&WireMessage::Query(q));
            }
            let responses = exchange(c, t, |id| self.clients.get(id as usize))?;
            for r in &responses {
                self.audit.record(&WireMessage::Response(r.clone()));
            }
            let losses = evaluate_peers(c, &responses)?;
            let (valid, excluded) = if self.settings.lsh_filter_enabled && !responses.is_empty() {
                let out = lsh_filter(&c.own_reference_outputs()?, responses)?;
                (out.valid, out.excluded)
            } else {
                (responses, Vec::new())
            };
            let target = if t > 1 { Prediction::mean(valid.iter().map(|r| &r.outputs))? } else { None };
            rounds.push(ClientRound { losses, valid: valid.iter().map(|r| r.peer_id).collect(), excluded, target });
        }

        // model updates
        let mut updated = Vec::with_capacity(n);
        for (c, r) in self.clients.iter_mut().zip(&rounds) {
            updated.push(Self::update_client(c, r.target.as_ref(), &self.settings, self.cfg.attack.as_ref(), t)?);
        }
        for (c, p) in self.clients.iter_mut().zip(updated) {
            c.params = p;
        }

        // announcements
        let prev_announcements: BTreeMap<ClientId, _> =
            self.board.announcements(t.saturating_sub(1)).into_iter().map(|(k, a)| (k, a.lsh_code.clone())).collect();
        let cheating = self.attack_active(t).is_some_and(|a| a.kind == AttackKind::LshCheat);
        for (c, r) in self.clients.iter_mut().zip(&rounds) {
            let forged = match c.role {
                Role::LshCheater { target } if cheating => prev_announcements.get(&target).cloned(),
                _ => None,
            };
            let a = prepare_announcement(c, &r.losses, t, &self.basis, forged, self.settings.salted_commitments)?;
            self.audit.record(&WireMessage::Announce(a.clone()));
            self.board.publish(Record::Announce(a))?;
        }
        self.board.barrier();

        for ((c, r), failures) in self.clients.iter().zip(rounds).zip(verify_failures) {
            let test_accuracy = accuracy(&c.params, &c.data.local_test)?;
            let local_loss =
                cross_entropy(&predict(&c.params, &c.data.local_train.features)?, &c.data.local_train.labels)?;
            let ref_loss = match &r.target {
                Some(m) => Some(distill_loss(&predict(&c.params, &c.data.reference.features)?, m)?),
                None => None,
            };
            self.metrics.push(RoundMetrics {
                round: t,
                client_id: c.id,
                role: c.role,
                test_accuracy,
                local_loss,
                ref_loss,
                neighbor_ids: c.neighbors.iter().copied().collect(),
                excluded_ids: r.excluded,
                verify_failures: failures,
                valid_ids: r.valid,
            });
        }
        self.round = t;
        Ok(())
    }

    fn update_client(
        c: &mut ClientState,
        target: Option<&Prediction>,
        settings: &ProtocolSettings,
        attack: Option<&AttackConfig>,
        t: u32,
    ) -> Result<ModelParams> {
        match (c.role, attack) {
            (Role::Poisoner, Some(a)) if a.active(t) => {
                if is_reinit_round(t, a) {
                    Ok(ModelParams::random_init(c.params.num_classes(), c.params.num_features(), &mut c.rng))
                } else {
                    local_update(c, target, settings, t)
                }
            }
            (Role::LshCheater { .. }, Some(a)) => {
                let permuted = permute_labels(&c.data.local_train, c.params.num_classes());
                let objective = Objective {
                    local: &permuted,
                    reference: &c.data.reference.features,
                    neighbor_mean: None,
                    alpha: 1.0,
                };
                let shadow = c.shadow.take().expect("cheaters hold a shadow model");
                let shadow = combined_update(&shadow, &objective, settings.lr, settings.local_steps, t)?;
                if a.active(t) {
                    // the malicious model replaces the honest one once the attack starts
                    c.shadow = Some(shadow.clone());
                    Ok(shadow)
                } else {
                    c.shadow = Some(shadow);
                    local_update(c, target, settings, t)
                }
            }
            _ => local_update(c, target, settings, t),
        }
    }

    /// Runs the remaining rounds.
    pub fn run(&mut self) -> Result<()> {
        while self.round < self.cfg.rounds {
            self.step()?;
        }
        Ok(())
    }

    pub fn summary(&self) -> Summary {
        Summary::from_metrics(&self.metrics, self.round)
    }
}

struct ClientRound {
    losses: BTreeMap<ClientId, f64>,
    valid: Vec<ClientId>,
    excluded: Vec<ClientId>,
    target: Option<Prediction>,
}

/// Final-round accuracy over honest clients.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rounds: u32,
    pub honest_clients: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

impl Summary {
    pub fn from_metrics(metrics: &[RoundMetrics], round: u32) -> Self {
        let acc: Vec<f64> =
            metrics.iter().filter(|m| m.round == round && m.role == Role::Honest).map(|m| m.test_accuracy).collect();
        let (mean, std) = mean_std(&acc);
        Self { rounds: round, honest_clients: acc.len(), mean_accuracy: mean, std_accuracy: std }
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub board_dump: String,
    pub summary: Summary,
    pub audit: MessageAudit,
    pub final_params: Vec<ModelParams>,
    pub roles: Vec<Role>,
}

impl RunOutput {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }
}

/// Runs a scenario to completion in memory.
pub fn simulate(cfg: &ScenarioConfig) -> Result<RunOutput> {
    let mut sim = Simulation::new(cfg.clone())?;
    sim.run()?;
    Ok(RunOutput {
        summary: sim.summary(),
        board_dump: sim.board.dump(),
        final_params: sim.clients.iter().map(|c| c.params.clone()).collect(),
        roles: sim.clients.iter().map(|c| c.role).collect(),
        audit: sim.audit,
        metrics: sim.metrics,
    })
}

pub const SUMMARY_HEADER: &str = "master_seed,mode,rounds,honest_clients,final_mean_accuracy,final_std_accuracy";

pub fn summary_csv(cfg: &ScenarioConfig, s: &Summary) -> String {
    format!(
        "{SUMMARY_HEADER}\n{},{},{},{},{},{}\n",
        cfg.master_seed, cfg.selection.mode, s.rounds, s.honest_clients, s.mean_accuracy, s.std_accuracy
    )
}

/// Config echo plus everything else needed to replay the run.
pub fn manifest(cfg: &ScenarioConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# wpfed run manifest");
    let _ = writeln!(s, "# code_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "# hash_algorithm = {HASH_ALGORITHM}");
    let _ = writeln!(s, "# effective_top_k = {}", cfg.effective_top_k());
    s.push_str(&cfg.to_toml());
    s
}

/// Runs the scenario and writes `metrics.csv`, `board.log`, `summary.csv` and `manifest.txt`.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<(Summary, PathBuf)> {
    cfg.validate()?;
    let out = simulate(cfg)?;
    let dir = cfg.output_dir.clone();
    write_outputs(&dir, cfg, &out)?;
    Ok((out.summary, dir))
}

pub fn write_outputs(dir: &Path, cfg: &ScenarioConfig, out: &RunOutput) -> Result<()> {
    let io = |e: std::io::Error| Error::Config(format!("cannot write to {}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    fs::write(dir.join("metrics.csv"), out.metrics_csv()).map_err(io)?;
    fs::write(dir.join("board.log"), &out.board_dump).map_err(io)?;
    fs::write(dir.join("summary.csv"), summary_csv(cfg, &out.summary)).map_err(io)?;
    fs::write(dir.join("manifest.txt"), manifest(cfg)).map_err(io)?;
    Ok(())
}

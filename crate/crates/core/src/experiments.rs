//! Multi-run experiments: mode ablations, LSH-cheating and poisoning studies.
//!
//! Runs fan out across threads; each run is a pure function of its config,
//! so results are identical to a sequential sweep.

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::adversary::{AttackConfig, AttackKind};
use crate::error::{config, Result};
use crate::protocol::Role;
use crate::selection::SelectionMode;
use crate::sim::{mean_std, simulate, RoundMetrics, RunOutput, ScenarioConfig};
use crate::ClientId;

/// Number of trailing rounds averaged into a run's final accuracy.
pub const FINAL_WINDOW: u32 = 5;

/// A configuration compared in an ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Mode(SelectionMode),
    /// Isolated local training (`alpha = 1`).
    Silo,
}

impl Variant {
    pub fn apply(self, base: &ScenarioConfig) -> ScenarioConfig {
        match self {
            Variant::Mode(m) => base.clone().with_mode(m),
            Variant::Silo => ScenarioConfig { alpha: 1.0, ..base.clone() },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Mode(m) => write!(f, "{m}"),
            Variant::Silo => f.write_str("silo"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "silo" {
            Ok(Variant::Silo)
        } else {
            s.parse().map(Variant::Mode)
        }
    }
}

/// Mean test accuracy of the given clients over the last `window` rounds.
pub fn window_accuracy(metrics: &[RoundMetrics], clients: &BTreeSet<ClientId>, from_round: u32, to_round: u32) -> f64 {
    let acc: Vec<f64> = metrics
        .iter()
        .filter(|m| m.round >= from_round && m.round <= to_round && clients.contains(&m.client_id))
        .map(|m| m.test_accuracy)
        .collect();
    mean_std(&acc).0
}

pub fn honest_ids(out: &RunOutput) -> BTreeSet<ClientId> {
    out.roles.iter().enumerate().filter(|(_, r)| **r == Role::Honest).map(|(i, _)| i as ClientId).collect()
}

/// Honest-client accuracy averaged over the final [`FINAL_WINDOW`] rounds.
pub fn final_accuracy(out: &RunOutput) -> f64 {
    let last = out.summary.rounds;
    window_accuracy(&out.metrics, &honest_ids(out), last.saturating_sub(FINAL_WINDOW - 1).max(1), last)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeRow {
    pub variant: Variant,
    pub mean: f64,
    pub std: f64,
    /// Final accuracy per seed, in the order the seeds were given.
    pub per_seed: Vec<f64>,
}

/// Final honest accuracy for every (variant, seed) pair.
pub fn compare_modes(base: &ScenarioConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<ModeRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(config("compare_modes needs at least one mode and one seed"));
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let results: Vec<f64> = jobs
        .par_iter()
        .map(|&(v, s)| simulate(&variants[v].apply(base).with_seed(s)).map(|o| final_accuracy(&o)))
        .collect::<Result<_>>()?;
    Ok(variants
        .iter()
        .enumerate()
        .map(|(v, &variant)| {
            let per_seed = results[v * seeds.len()..(v + 1) * seeds.len()].to_vec();
            let (mean, std) = mean_std(&per_seed);
            ModeRow { variant, mean, std, per_seed }
        })
        .collect())
}

pub fn modes_csv(rows: &[ModeRow]) -> String {
    let mut s = String::from("mode,seeds,mean_final_accuracy,std_final_accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.variant, r.per_seed.len(), r.mean, r.std);
    }
    s
}

/// One-sided sign test: probability of at least this many positive
/// differences under a fair coin. Zero differences are dropped.
pub fn sign_test_p(diffs: &[f64]) -> f64 {
    let n = diffs.iter().filter(|d| **d != 0.0).count() as u64;
    let wins = diffs.iter().filter(|d| **d > 0.0).count() as u64;
    let total = 2f64.powi(n as i32);
    (wins..=n).map(|k| binomial(n, k)).sum::<f64>() / total
}

fn binomial(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// LSH-cheating outcome for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct LshCheatOutcome {
    pub seed: u64,
    /// Target accuracy over post-attack rounds without any attackers.
    pub baseline: f64,
    pub verification_on: f64,
    pub verification_off: f64,
    /// Fraction of post-attack rounds where no cheater entered the target's distillation (filter on).
    pub on_exclusion_rate: f64,
    /// Fraction of post-attack rounds where some cheater entered the target's distillation (filter off).
    pub off_entry_rate: f64,
}

impl LshCheatOutcome {
    pub fn loss_on(&self) -> f64 {
        self.baseline - self.verification_on
    }

    pub fn loss_off(&self) -> f64 {
        self.baseline - self.verification_off
    }
}

fn cheater_rate(out: &RunOutput, target: ClientId, from: u32, to: u32) -> f64 {
    let cheaters: BTreeSet<ClientId> = out
        .roles
        .iter()
        .enumerate()
        .filter(|(_, r)| matches!(r, Role::LshCheater { .. }))
        .map(|(i, _)| i as ClientId)
        .collect();
    let rows: Vec<&RoundMetrics> =
        out.metrics.iter().filter(|m| m.client_id == target && m.round >= from && m.round <= to).collect();
    let entered = rows.iter().filter(|m| m.valid_ids.iter().any(|id| cheaters.contains(id))).count();
    entered as f64 / rows.len().max(1) as f64
}

/// Runs the no-attack, filter-on and filter-off scenarios for each seed.
///
/// `base.attack` must be an LSH-cheat config; forged codes are first usable one
/// round after `start_round`, so accuracy and rates are measured from there on.
pub fn lsh_cheat_experiment(base: &ScenarioConfig, seeds: &[u64]) -> Result<Vec<LshCheatOutcome>> {
    let attack = base
        .attack
        .clone()
        .filter(|a| a.kind == AttackKind::LshCheat)
        .ok_or_else(|| config("lsh_cheat_experiment needs an lsh_cheat attack config"))?;
    let target = attack.target_id;
    let from = attack.start_round + 1;
    let to = base.rounds;
    if from > to {
        return Err(config("attack must start before the final round"));
    }
    let only_target = BTreeSet::from([target]);
    seeds
        .par_iter()
        .map(|&seed| {
            let clean = simulate(&ScenarioConfig { attack: None, ..base.clone() }.with_seed(seed))?;
            let on_cfg = ScenarioConfig {
                attack: Some(AttackConfig { lsh_verification_enabled: true, ..attack.clone() }),
                ..base.clone()
            };
            let off_cfg = ScenarioConfig {
                attack: Some(AttackConfig { lsh_verification_enabled: false, ..attack.clone() }),
                ..base.clone()
            };
            let on = simulate(&on_cfg.with_seed(seed))?;
            let off = simulate(&off_cfg.with_seed(seed))?;
            Ok(LshCheatOutcome {
                seed,
                baseline: window_accuracy(&clean.metrics, &only_target, from, to),
                verification_on: window_accuracy(&on.metrics, &only_target, from, to),
                verification_off: window_accuracy(&off.metrics, &only_target, from, to),
                on_exclusion_rate: 1.0 - cheater_rate(&on, target, from, to),
                off_entry_rate: cheater_rate(&off, target, from, to),
            })
        })
        .collect()
}

/// Poisoning outcome for one (fraction, mode, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonOutcome {
    pub fraction: f64,
    pub mode: SelectionMode,
    pub seed: u64,
    /// Honest-client accuracy over post-attack rounds without poisoners.
    pub clean: f64,
    pub attacked: f64,
}

impl PoisonOutcome {
    pub fn degradation(&self) -> f64 {
        self.clean - self.attacked
    }
}

/// Compares honest-client accuracy with and without poisoners.
///
/// Accuracy is averaged over the clients honest in the attacked run, from
/// `start_round` to the end, in both runs.
pub fn poison_experiment(
    base: &ScenarioConfig,
    fractions: &[f64],
    modes: &[SelectionMode],
    seeds: &[u64],
) -> Result<Vec<PoisonOutcome>> {
    let attack = base
        .attack
        .clone()
        .filter(|a| a.kind == AttackKind::Poison)
        .ok_or_else(|| config("poison_experiment needs a poison attack config"))?;
    let from = attack.start_round;
    let to = base.rounds;
    if from > to {
        return Err(config("attack must start before the final round"));
    }
    let jobs: Vec<(f64, SelectionMode, u64)> = fractions
        .iter()
        .flat_map(|&f| modes.iter().flat_map(move |&m| seeds.iter().map(move |&s| (f, m, s))))
        .collect();
    jobs.par_iter()
        .map(|&(fraction, mode, seed)| {
            let attacked_cfg = ScenarioConfig {
                attack: Some(AttackConfig { malicious_fraction: fraction, ..attack.clone() }),
                ..base.clone()
            }
            .with_mode(mode)
            .with_seed(seed);
            let clean_cfg = ScenarioConfig { attack: None, ..attacked_cfg.clone() };
            let attacked = simulate(&attacked_cfg)?;
            let clean = simulate(&clean_cfg)?;
            let honest = honest_ids(&attacked);
            Ok(PoisonOutcome {
                fraction,
                mode,
                seed,
                clean: window_accuracy(&clean.metrics, &honest, from, to),
                attacked: window_accuracy(&attacked.metrics, &honest, from, to),
            })
        })
        .collect()
}

pub fn lsh_cheat_csv(rows: &[LshCheatOutcome]) -> String {
    let mut s = String::from(
        "seed,baseline,verification_on,verification_off,loss_on,loss_off,on_exclusion_rate,off_entry_rate\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.seed,
            r.baseline,
            r.verification_on,
            r.verification_off,
            r.loss_on(),
            r.loss_off(),
            r.on_exclusion_rate,
            r.off_entry_rate
        );
    }
    s
}

pub fn poison_csv(rows: &[PoisonOutcome]) -> String {
    let mut s = String::from("fraction,mode,seed,clean,attacked,degradation\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.fraction, r.mode, r.seed, r.clean, r.attacked, r.degradation());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test_p(&[1.0; 5]), 1.0 / 32.0);
        assert_eq!(sign_test_p(&[1.0, 1.0, -1.0]), 0.5);
        assert_eq!(sign_test_p(&[1.0, 0.0]), 0.5);
        // 8 of 10 positive: (45 + 10 + 1) / 1024
        let d = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0];
        assert!((sign_test_p(&d) - 56.0 / 1024.0).abs() < 1e-15);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("silo".parse::<Variant>().unwrap(), Variant::Silo);
        assert_eq!("no_rank".parse::<Variant>().unwrap(), Variant::Mode(SelectionMode::NoRank));
        assert!("other".parse::<Variant>().is_err());
        assert_eq!(Variant::Silo.apply(&ScenarioConfig::default()).alpha, 1.0);
    }
}

//! Malicious client behaviors: LSH-code forgery and periodic reinitialization.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::announce::{Announcement, Digest};
use crate::error::{config, Error, Result};
use crate::lsh::LshCode;
use crate::model::{Dataset, ModelParams};
use crate::ClientId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    LshCheat,
    Poison,
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsh_cheat" => Ok(Self::LshCheat),
            "poison" => Ok(Self::Poison),
            _ => Err(config(format!("unknown attack kind {s:?}"))),
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LshCheat => "lsh_cheat",
            Self::Poison => "poison",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub start_round: u32,
    /// Poison: fraction of all clients. LSH cheat: fraction of the target's peers.
    pub malicious_fraction: f64,
    pub target_id: ClientId,
    pub reinit_period: u32,
    pub lsh_verification_enabled: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::Poison,
            start_round: 50,
            malicious_fraction: 0.2,
            target_id: 0,
            reinit_period: 3,
            lsh_verification_enabled: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.malicious_fraction) {
            return Err(config("malicious_fraction must lie in [0, 1]"));
        }
        if self.start_round < 1 {
            return Err(config("start_round must be at least 1"));
        }
        if self.kind == AttackKind::Poison && self.reinit_period < 1 {
            return Err(config("reinit_period must be at least 1"));
        }
        if self.kind == AttackKind::LshCheat && self.target_id as usize >= num_clients {
            return Err(config(format!("target_id {} is not a client", self.target_id)));
        }
        Ok(())
    }

    /// Number of malicious clients this attack places in a network of `num_clients`.
    pub fn attacker_count(&self, num_clients: usize) -> usize {
        match self.kind {
            AttackKind::Poison => (self.malicious_fraction * num_clients as f64).round() as usize,
            AttackKind::LshCheat => (self.malicious_fraction * (num_clients - 1) as f64).floor() as usize,
        }
    }

    /// Deterministically draws the malicious client ids. The LSH-cheat target is never chosen.
    pub fn pick_attackers<R: Rng + ?Sized>(&self, num_clients: usize, rng: &mut R) -> Vec<ClientId> {
        let pool: Vec<ClientId> = (0..num_clients as ClientId)
            .filter(|&c| self.kind != AttackKind::LshCheat || c != self.target_id)
            .collect();
        let mut chosen: Vec<ClientId> =
            pool.choose_multiple(rng, self.attacker_count(num_clients).min(pool.len())).copied().collect();
        chosen.sort_unstable();
        chosen
    }

    pub fn active(&self, round: u32) -> bool {
        round >= self.start_round
    }
}

/// Announcement carrying a copy of the target's code instead of the attacker's own.
/// Before `start_round` the honest code is published unchanged.
pub fn lsh_cheat_announce(honest: Announcement, target_code: Option<&LshCode>, attack: &AttackConfig) -> Announcement {
    match target_code {
        Some(code) if attack.active(honest.round) => Announcement { lsh_code: code.clone(), ..honest },
        _ => honest,
    }
}

/// Forged announcement built from scratch, for callers that only hold a commitment.
pub fn forged_announcement(attacker: ClientId, round: u32, target_code: &LshCode, commitment: Digest) -> Announcement {
    Announcement { client_id: attacker, round, lsh_code: target_code.clone(), commitment }
}

/// True on the rounds where a poisoner resets its model.
pub fn is_reinit_round(round: u32, attack: &AttackConfig) -> bool {
    attack.active(round) && (round - attack.start_round).is_multiple_of(attack.reinit_period.max(1))
}

/// Poisoner update: fresh parameters on reinit rounds, `train()` otherwise.
pub fn poison_step<R, F>(
    current: &ModelParams,
    round: u32,
    attack: &AttackConfig,
    rng: &mut R,
    train: F,
) -> Result<ModelParams>
where
    R: Rng + ?Sized,
    F: FnOnce(&ModelParams) -> Result<ModelParams>,
{
    if is_reinit_round(round, attack) {
        Ok(ModelParams::random_init(current.num_classes(), current.num_features(), rng))
    } else {
        train(current)
    }
}

/// Relabels every sample `c -> (c + 1) mod num_classes`.
pub fn permute_labels(data: &Dataset, num_classes: usize) -> Dataset {
    Dataset { features: data.features.clone(), labels: data.labels.iter().map(|&l| (l + 1) % num_classes).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cross_entropy, predict, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn poison(period: u32) -> AttackConfig {
        AttackConfig { kind: AttackKind::Poison, start_round: 50, reinit_period: period, ..AttackConfig::default() }
    }

    #[test]
    fn reinit_schedule() {
        let a = poison(3);
        let reinit: Vec<u32> = (45..60).filter(|&r| is_reinit_round(r, &a)).collect();
        assert_eq!(reinit, vec![50, 53, 56, 59]);
        let every = poison(1);
        assert!((50..70).all(|r| is_reinit_round(r, &every)));
        assert!(!is_reinit_round(49, &every));
    }

    #[test]
    fn poison_step_trains_between_resets() {
        let a = poison(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trained = ModelParams::zeros(3, 2);
        let marker = |_: &ModelParams| Ok(ModelParams::zeros(3, 2));
        let mut current = ModelParams::random_init(3, 2, &mut rng);
        current.bias[0] = 10.0;
        let r50 = poison_step(&current, 50, &a, &mut rng, marker).unwrap();
        assert!(r50.bias[0].abs() < 1.0, "reset to the init distribution");
        assert_eq!(poison_step(&current, 51, &a, &mut rng, marker).unwrap(), trained);
        assert_eq!(poison_step(&current, 52, &a, &mut rng, marker).unwrap(), trained);
    }

    #[test]
    fn fresh_init_is_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ModelParams::random_init(10, 5, &mut rng);
        let x = Matrix::from_vec(4, 5, (0..20).map(|i| (i as f64 * 0.37).sin() * 2.0).collect()).unwrap();
        let ce = cross_entropy(&predict(&p, &x).unwrap(), &[0, 3, 5, 9]).unwrap();
        assert!((ce - 10f64.ln()).abs() < 0.1);
    }

    #[test]
    fn forged_code_before_and_after_start() {
        let target = LshCode::from_bits(&[true, true, false, false]);
        let own = LshCode::from_bits(&[false, false, true, true]);
        let cfg = AttackConfig { kind: AttackKind::LshCheat, start_round: 5, ..AttackConfig::default() };
        let honest = Announcement { client_id: 3, round: 4, lsh_code: own.clone(), commitment: [0; 32] };
        assert_eq!(lsh_cheat_announce(honest.clone(), Some(&target), &cfg).lsh_code, own);
        let later = Announcement { round: 5, ..honest };
        let forged = lsh_cheat_announce(later, Some(&target), &cfg);
        assert_eq!(crate::lsh::hamming(&forged.lsh_code, &target).unwrap(), 0);
        assert_eq!(forged_announcement(3, 5, &target, [1; 32]).lsh_code, target);
    }

    #[test]
    fn attacker_selection() {
        let cheat = AttackConfig {
            kind: AttackKind::LshCheat,
            malicious_fraction: 0.5,
            target_id: 2,
            ..AttackConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chosen = cheat.pick_attackers(10, &mut rng);
        assert_eq!(chosen.len(), 4);
        assert!(!chosen.contains(&2));
        let p = poison(3);
        assert_eq!(AttackConfig { malicious_fraction: 0.4, ..p.clone() }.attacker_count(10), 4);
        assert!(AttackConfig { malicious_fraction: 1.5, ..p }.validate(10).is_err());
    }

    #[test]
    fn permutation_shifts_labels() {
        let ds = Dataset::new(Matrix::zeros(3, 1), vec![0, 1, 2], 3).unwrap();
        assert_eq!(permute_labels(&ds, 3).labels, vec![1, 2, 0]);
    }
}

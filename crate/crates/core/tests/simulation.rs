use std::collections::BTreeSet;

use wpfed::adversary::{AttackConfig, AttackKind};
use wpfed::data::{export_partition, generate_synthetic, import_partition, partition_non_iid, DataConfig};
use wpfed::experiments::lsh_cheat_experiment;
use wpfed::model::{accuracy, combined_update, ModelParams, Objective};
use wpfed::protocol::Payload;
use wpfed::rng::{stream, Stream};
use wpfed::selection::{first_round_neighbors, SelectionConfig, SelectionMode};
use wpfed::sim::{simulate, ScenarioConfig};

fn small() -> ScenarioConfig {
    ScenarioConfig {
        rounds: 8,
        data: DataConfig {
            num_clients: 6,
            samples_per_class: 120,
            reference_size_per_client: 20,
            ..DataConfig::default()
        },
        selection: SelectionConfig { n_neighbors: 3, ..SelectionConfig::default() },
        ..ScenarioConfig::default()
    }
}

#[test]
fn identical_configs_give_identical_outputs() {
    let cfg = small().with_seed(17);
    let a = simulate(&cfg).unwrap();
    let b = simulate(&cfg).unwrap();
    assert_eq!(a.metrics_csv(), b.metrics_csv());
    assert_eq!(a.board_dump, b.board_dump);
    let c = simulate(&small().with_seed(18)).unwrap();
    assert_ne!(a.metrics_csv(), c.metrics_csv());
}

#[test]
fn alpha_one_equals_isolated_training() {
    let cfg = ScenarioConfig { alpha: 1.0, ..small() };
    let out = simulate(&cfg).unwrap();
    let pool = generate_synthetic(&cfg.data).unwrap();
    let part = partition_non_iid(&pool, &cfg.data).unwrap();
    for (i, client) in part.clients.iter().enumerate() {
        let mut rng = stream(cfg.master_seed, Stream::ClientInit, i as u64);
        let mut params = ModelParams::random_init(cfg.data.num_classes, cfg.data.num_features, &mut rng);
        let obj = Objective {
            local: &client.local_train,
            reference: &client.reference.features,
            neighbor_mean: None,
            alpha: 1.0,
        };
        for t in 1..=cfg.rounds {
            params = combined_update(&params, &obj, cfg.lr, cfg.local_steps, t).unwrap();
        }
        assert_eq!(params, out.final_params[i], "client {i}");
    }
}

#[test]
fn reported_accuracy_matches_direct_evaluation() {
    let cfg = small();
    let out = simulate(&cfg).unwrap();
    let pool = generate_synthetic(&cfg.data).unwrap();
    let part = partition_non_iid(&pool, &cfg.data).unwrap();
    for m in out.metrics.iter().filter(|m| m.round == cfg.rounds) {
        let i = m.client_id as usize;
        let direct = accuracy(&out.final_params[i], &part.clients[i].local_test).unwrap();
        assert!((m.test_accuracy - direct).abs() <= 1e-12);
    }
}

#[test]
fn two_clients_pick_each_other() {
    let cfg = ScenarioConfig {
        rounds: 4,
        data: DataConfig {
            num_clients: 2,
            samples_per_class: 60,
            reference_size_per_client: 10,
            ..DataConfig::default()
        },
        selection: SelectionConfig { n_neighbors: 1, ..SelectionConfig::default() },
        ..ScenarioConfig::default()
    };
    let out = simulate(&cfg).unwrap();
    for m in &out.metrics {
        assert_eq!(m.neighbor_ids, vec![1 - m.client_id]);
        assert!(m.excluded_ids.is_empty());
        assert!(m.verify_failures.is_empty());
        if m.round > 1 {
            assert!(m.ref_loss.is_some());
        }
    }
}

#[test]
fn no_private_payload_crosses_the_wire() {
    for attack in [None, Some(AttackKind::Poison), Some(AttackKind::LshCheat)] {
        let cfg = ScenarioConfig {
            attack: attack.map(|kind| AttackConfig {
                kind,
                start_round: 3,
                malicious_fraction: 0.4,
                ..AttackConfig::default()
            }),
            ..small()
        };
        let out = simulate(&cfg).unwrap();
        assert!(out.audit.leaked().is_empty(), "{:?}", out.audit.payloads);
        assert!(out.audit.payloads.contains(&Payload::PredictedProbabilities));
        for kind in ["query", "response", "announce", "reveal"] {
            assert!(out.audit.counts[kind] > 0, "{kind}");
        }
    }
}

#[test]
fn first_round_draw_is_uniform() {
    let peers: Vec<u32> = (0..10).collect();
    let mut rng = stream(3, Stream::Client, 0);
    let draws = 20_000;
    let mut counts = [0u32; 10];
    for _ in 0..draws {
        let sel = first_round_neighbors(0, &peers, 4, &mut rng);
        assert_eq!(sel.neighbors.len(), 4);
        for p in sel.neighbors {
            counts[p as usize] += 1;
        }
    }
    assert_eq!(counts[0], 0);
    let expected = f64::from(draws) * 4.0 / 9.0;
    let chi2: f64 = counts[1..].iter().map(|&c| (f64::from(c) - expected).powi(2) / expected).sum();
    // 8 degrees of freedom, 0.999 quantile
    assert!(chi2 < 26.12, "chi2 = {chi2}");
}

#[test]
fn every_mode_runs() {
    for mode in [SelectionMode::Full, SelectionMode::NoLsh, SelectionMode::NoRank, SelectionMode::Random] {
        let out = simulate(&small().with_mode(mode)).unwrap();
        assert_eq!(out.metrics.len(), 6 * 8);
        assert!(out.metrics.iter().all(|m| m.test_accuracy.is_finite()));
    }
}

#[test]
fn partition_export_roundtrip() {
    let cfg = small().data;
    let pool = generate_synthetic(&cfg).unwrap();
    let part = partition_non_iid(&pool, &cfg).unwrap();
    let text = export_partition(&part.clients);
    assert_eq!(import_partition(&text, cfg.num_classes).unwrap(), part.clients);
    let mut seen = BTreeSet::new();
    for idx in &part.indices {
        for &i in idx.reference.iter() {
            assert!(seen.insert(i), "reference sample {i} reused");
        }
    }
    for idx in &part.indices {
        assert!(idx.local_train.iter().chain(&idx.local_test).all(|i| !seen.contains(i)));
    }
}

#[test]
fn cheater_enters_unfiltered_distillation() {
    let cfg = ScenarioConfig {
        attack: Some(AttackConfig { kind: AttackKind::LshCheat, malicious_fraction: 0.5, ..AttackConfig::default() }),
        ..ScenarioConfig::default()
    };
    let rows = lsh_cheat_experiment(&cfg, &[0, 1, 2, 3, 4]).unwrap();
    let entry = rows.iter().map(|r| r.off_entry_rate).sum::<f64>() / rows.len() as f64;
    let excluded = rows.iter().map(|r| r.on_exclusion_rate).sum::<f64>() / rows.len() as f64;
    assert!(entry >= 0.5, "entry rate {entry}");
    assert!(excluded >= 0.9, "exclusion rate {excluded}");
}

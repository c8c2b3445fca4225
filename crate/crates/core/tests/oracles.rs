use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wpfed::lsh::{encode, hamming, make_basis, LshCode};
use wpfed::model::{cross_entropy, distill_loss, predict, Matrix, ModelParams, Prediction};
use wpfed::protocol::{lsh_filter, mean_kl, PeerResponse};
use wpfed::ranking::{build_ranking, ranking_scores, RankingList};
use wpfed::selection::{compute_weights, SelectionConfig, SelectionMode};

fn pred(rows: &[Vec<f64>]) -> Prediction {
    Prediction { probabilities: Matrix::from_rows(rows).unwrap() }
}

/// Softmax evaluated with a shifted exponent and compensated summation.
fn softmax_oracle(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &x in &e {
        let y = x - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    e.iter().map(|x| x / sum).collect()
}

#[test]
fn predict_matches_softmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (c, f) = (rng.random_range(2..8), rng.random_range(1..6));
        let flat: Vec<f64> = (0..c * f + c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let params = ModelParams::unflatten(c, f, &flat).unwrap();
        let x: Vec<f64> = (0..f).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = predict(&params, &Matrix::from_vec(1, f, x.clone()).unwrap()).unwrap();
        let logits: Vec<f64> =
            (0..c).map(|k| params.bias[k] + (0..f).map(|j| params.weights.get(k, j) * x[j]).sum::<f64>()).collect();
        for (a, b) in got.probabilities.row(0).iter().zip(softmax_oracle(&logits)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn softmax_survives_huge_logits() {
    let params = ModelParams::unflatten(3, 1, &[1000.0, -1000.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let p = predict(&params, &Matrix::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
    assert_eq!(p.probabilities.row(0)[0], 1.0);
    assert!(p.probabilities.row(0).iter().all(|v| v.is_finite()));
}

#[test]
fn cross_entropy_hand_value() {
    let p = pred(&[vec![0.7, 0.2, 0.1], vec![0.25, 0.25, 0.5]]);
    let want = -(0.7f64.ln() + 0.5f64.ln()) / 2.0;
    assert!((cross_entropy(&p, &[0, 2]).unwrap() - want).abs() < 1e-15);
    // a zero probability on the true class hits the floor
    let z = pred(&[vec![1.0, 0.0]]);
    assert!((cross_entropy(&z, &[1]).unwrap() - (-(1e-12f64).ln())).abs() < 1e-9);
}

#[test]
fn distill_loss_is_mean_row_squared_distance() {
    let a = pred(&[vec![0.5, 0.5], vec![1.0, 0.0]]);
    let b = pred(&[vec![0.1, 0.9], vec![0.0, 1.0]]);
    let want = ((0.4f64.powi(2) * 2.0) + 2.0) / 2.0;
    assert!((distill_loss(&a, &b).unwrap() - want).abs() < 1e-15);
    assert_eq!(distill_loss(&a, &a).unwrap(), 0.0);
}

#[test]
fn kl_matches_direct_formula() {
    let own = pred(&[vec![0.5, 0.5], vec![0.9, 0.1]]);
    let peer = pred(&[vec![0.9, 0.1], vec![0.9, 0.1]]);
    let row0 = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
    assert!((mean_kl(&own, &peer).unwrap() - row0 / 2.0).abs() < 1e-15);
    assert_eq!(mean_kl(&own, &own).unwrap(), 0.0);
}

#[test]
fn filter_matches_sorted_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let m = rng.random_range(1..9);
        let own = pred(&[vec![0.6, 0.3, 0.1]]);
        let responses: Vec<PeerResponse> = (0..m)
            .map(|i| {
                // coarse grid so ties between peers are common
                let a = f64::from(rng.random_range(1..4u8)) / 5.0;
                PeerResponse { peer_id: i as u32 * 3 % 11, outputs: pred(&[vec![a, 0.9 - a, 0.1]]) }
            })
            .collect();
        let mut oracle: Vec<(f64, u32)> =
            responses.iter().map(|r| (mean_kl(&own, &r.outputs).unwrap(), r.peer_id)).collect();
        oracle.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
        let keep = m - m / 2;
        let out = lsh_filter(&own, responses).unwrap();
        let valid: Vec<u32> = out.valid.iter().map(|r| r.peer_id).collect();
        assert_eq!(valid, oracle[..keep].iter().map(|o| o.1).collect::<Vec<_>>());
        assert_eq!(out.excluded, oracle[keep..].iter().map(|o| o.1).collect::<Vec<_>>());
    }
}

#[test]
fn ranking_orders_by_loss_then_id() {
    let losses: BTreeMap<u32, f64> = [(4, 0.3), (2, 0.1), (7, 0.3), (1, 0.9)].into_iter().collect();
    let r = build_ranking(0, &losses, 5).unwrap();
    assert_eq!(r.ranked_peers, vec![2, 4, 7, 1]);
    let nan: BTreeMap<u32, f64> = [(3, f64::NAN)].into_iter().collect();
    let err = build_ranking(0, &nan, 5).unwrap_err().to_string();
    assert!(err.contains('3'), "{err}");
}

#[test]
fn ranking_score_hand_example() {
    let lists = [
        RankingList { owner: 0, round: 1, ranked_peers: vec![1, 2, 3] },
        RankingList { owner: 4, round: 1, ranked_peers: vec![2, 3, 1] },
        RankingList { owner: 1, round: 1, ranked_peers: vec![3, 2] },
    ];
    let t = ranking_scores(&lists, 1, &[0, 1, 2, 3, 4], 1);
    assert_eq!(t.score(1), 0.5);
    assert_eq!(t.score(2), 1.0 / 3.0);
    assert_eq!(t.score(3), 1.0 / 3.0);
    assert_eq!(t.score(0), 0.5);
    assert_eq!(t.score(4), 0.5);
}

#[test]
fn weight_hand_value() {
    let lists = [RankingList { owner: 1, round: 1, ranked_peers: vec![2, 3] }];
    let scores = ranking_scores(&lists, 1, &[0, 1, 2, 3], 1);
    let distances: BTreeMap<u32, u32> = [(1, 2), (2, 0), (3, 5)].into_iter().collect();
    let cfg = SelectionConfig { n_neighbors: 2, gamma: 1.0, mode: SelectionMode::Full };
    let row = compute_weights(0, &scores, &distances, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    assert!((row.weights[&1] - 0.5 * (-2.0f64).exp()).abs() < 1e-15);
    assert!((row.weights[&1] - 0.06767).abs() < 1e-5);
    assert_eq!(row.weights[&2], 1.0);
    assert_eq!(row.weights[&3], 0.0);
}

#[test]
fn hex_encoding_is_msb_first() {
    let mut bits = vec![false; 8];
    bits[0] = true;
    bits[7] = true;
    assert_eq!(LshCode::from_bits(&bits).to_hex(), "81");
    let code = LshCode::from_hex("a5", 8).unwrap();
    let back: Vec<bool> = (0..8).map(|k| code.bit(k)).collect();
    assert_eq!(back, vec![true, false, true, false, false, true, false, true]);
    assert!(LshCode::from_hex("A5", 8).is_err());
}

#[test]
fn encode_matches_projection_oracle() {
    let basis = make_basis(6, 32, 42).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let flat: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = ModelParams::unflatten(2, 2, &flat).unwrap();
        let code = encode(&params, &basis).unwrap();
        for (k, h) in basis.hyperplanes().iter().enumerate() {
            let dot: f64 = h.iter().zip(&flat).map(|(a, b)| a * b).sum();
            assert_eq!(code.bit(k), dot >= 0.0);
        }
        assert_eq!(hamming(&code, &code).unwrap(), 0);
    }
}

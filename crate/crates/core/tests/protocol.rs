mod common;

use proptest::prelude::*;

use vfl_core::data::VflSplit;
use vfl_core::experiment::prepare_data;
use vfl_core::matrix::Matrix;
use vfl_core::nn;
use vfl_core::protocol::{
    client_extract, inclusion_probability, sdpa_estimate, sdpa_weights, server_partial_grads,
    Client, CommLedger, Direction, Federation, PayloadRole, ProtocolConfig, RepSet, Server,
};

fn quick(seed: u64) -> ProtocolConfig {
    ProtocolConfig {
        seed,
        client_epochs: 2,
        server_epochs: 5,
        rounds: 10,
        ..ProtocolConfig::default()
    }
}

#[test]
fn oneshot_message_pattern() {
    let data = common::small_prepared(500, 48, 1);
    let mut fed = Federation::new(&data.split, quick(1)).unwrap();
    fed.run_oneshot().unwrap();
    let ledger = fed.ledger();
    for k in 0..2 {
        assert_eq!(ledger.times_for(k), 3);
        assert_eq!(ledger.count_for(k, Direction::Upload), 2);
        assert_eq!(ledger.count_for(k, Direction::Download), 1);
    }
    let down = ledger
        .messages()
        .iter()
        .find(|m| m.direction == Direction::Download)
        .unwrap();
    let roles: Vec<PayloadRole> = down.payloads.iter().map(|p| p.role).collect();
    assert_eq!(
        roles,
        vec![PayloadRole::PartialGrads, PayloadRole::ClassCount]
    );
    assert_eq!(down.payloads[0].scalar_count, 48 * 8);
    assert_eq!(down.payloads[1].scalar_count, 1);
}

#[test]
fn fewshot_message_pattern() {
    let data = common::small_prepared(500, 48, 2);
    let mut fed = Federation::new(&data.split, quick(2)).unwrap();
    fed.run_fewshot().unwrap();
    for k in 0..2 {
        assert_eq!(fed.ledger().times_for(k), 5);
        assert_eq!(fed.ledger().count_for(k, Direction::Upload), 3);
        assert_eq!(fed.ledger().count_for(k, Direction::Download), 2);
        let unaligned = fed.clients()[k].unaligned_features().rows();
        let probs: usize = fed
            .ledger()
            .messages()
            .iter()
            .filter(|m| m.client() == k)
            .flat_map(|m| &m.payloads)
            .filter(|p| p.role == PayloadRole::InclusionProbs)
            .map(|p| p.scalar_count)
            .sum();
        assert_eq!(probs, unaligned);
    }
    assert_eq!(fed.server().aux_classifiers().len(), 2);
    assert!(fed.server().joint_classifier().is_some());
}

#[test]
fn vanilla_and_fedbcd_two_messages_per_round() {
    let data = common::small_prepared(500, 48, 3);
    for q in [1, 5] {
        let mut fed = Federation::new(&data.split, quick(3)).unwrap();
        fed.run_vanilla(10, q, None).unwrap();
        assert_eq!(fed.ledger().times_for(0), 20);
        assert_eq!(fed.ledger().times_for(1), 20);
    }
}

#[test]
fn fedbcd_reuses_the_stale_gradient() {
    let data = common::small_prepared(300, 40, 4);
    let cfg = quick(4);
    let mut a = Federation::new(&data.split, cfg.clone()).unwrap();
    let mut b = a.clone();
    let rows = a.next_batch();
    b.next_batch();
    a.vanilla_round(&rows, 1).unwrap();
    b.vanilla_round(&rows, 5).unwrap();
    // same server update, different client trajectories
    assert_eq!(a.server().classifier(), b.server().classifier());
    assert!(
        a.clients()[0]
            .extractor()
            .max_abs_diff(b.clients()[0].extractor())
            > 0.0
    );
    assert_eq!(a.ledger(), b.ledger());
}

#[test]
fn extract_is_pure_and_sized() {
    let data = common::small_prepared(200, 4, 5);
    let fed = Federation::new(&data.split, quick(5)).unwrap();
    let mut ledger = CommLedger::default();
    let a = client_extract(&fed.clients()[1], RepSet::Overlap, &mut ledger).unwrap();
    let b = client_extract(&fed.clients()[1], RepSet::Overlap, &mut ledger).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), (4, 8));
    assert_eq!(ledger.messages()[0].scalar_count(), 32);
    // row i is overlap sample i
    let single = fed.clients()[1]
        .represent(&fed.clients()[1].overlap_features().select_rows(&[2]))
        .unwrap();
    assert_eq!(single.row(0), a.row(2));
}

#[test]
fn partial_gradients_match_finite_differences() {
    let data = common::small_prepared(200, 12, 6);
    let cfg = quick(6);
    let fed = Federation::new(&data.split, cfg.clone()).unwrap();
    let reps: Vec<Matrix> = fed
        .clients()
        .iter()
        .map(|c| c.extract(RepSet::Overlap).unwrap())
        .collect();
    let mut server = fed.server().clone();
    for (k, h) in reps.iter().enumerate() {
        server.receive_overlap(k, h.clone()).unwrap();
    }
    let (grads, model) = server.partial_grads(&cfg).unwrap();
    let labels = server.labels().to_vec();
    let loss = |r: &[Matrix]| {
        let h = Matrix::hconcat(&r.iter().collect::<Vec<_>>()).unwrap();
        nn::softmax_cross_entropy(&nn::predict(&model, &h).unwrap(), &labels)
            .unwrap()
            .0
    };
    let eps = 1e-6;
    for k in 0..2 {
        assert_eq!(grads[k].shape(), reps[k].shape());
        for i in 0..reps[k].rows() {
            for j in 0..reps[k].cols() {
                let mut plus = reps.clone();
                plus[k][(i, j)] += eps;
                let mut minus = reps.clone();
                minus[k][(i, j)] -= eps;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let analytic = grads[k][(i, j)];
                let scale = analytic.abs().max(numeric.abs());
                if scale > 1e-8 {
                    assert!(
                        (analytic - numeric).abs() / scale < 1e-4,
                        "client {k} ({i},{j})"
                    );
                }
            }
        }
    }
}

#[test]
fn server_slices_in_client_order() {
    let cfg = quick(7);
    let mut server = Server::new(vec![0, 1, 1, 0], vec![8, 8], &cfg).unwrap();
    let mut ledger = CommLedger::default();
    let h0 = Matrix::from_vec(4, 8, (0..32).map(|v| v as f64 / 10.0).collect()).unwrap();
    let h1 = Matrix::from_vec(4, 8, (0..32).map(|v| -(v as f64) / 7.0).collect()).unwrap();
    let mut twin = server.clone();
    let out =
        server_partial_grads(&mut server, vec![h0.clone(), h1.clone()], &cfg, &mut ledger).unwrap();
    twin.receive_overlap(0, h0).unwrap();
    twin.receive_overlap(1, h1).unwrap();
    let (_, model) = twin.partial_grads(&cfg).unwrap();
    let trace = nn::forward(&model, &twin.overlap_concat().unwrap()).unwrap();
    let (_, d) = nn::softmax_cross_entropy(trace.output(), &[0, 1, 1, 0]).unwrap();
    let (_, dh) = nn::backward(&model, &trace, &d).unwrap();
    assert_eq!(dh.cols(), 16);
    assert_eq!(out[0].0, dh.col_range(0, 8));
    assert_eq!(out[1].0, dh.col_range(8, 16));
    assert_eq!(out[1].1, 2);
    assert_eq!(ledger.len(), 2);
}

#[test]
fn partial_grads_reject_missing_or_misaligned_clients() {
    let cfg = quick(8);
    let mut server = Server::new(vec![0, 1, 1], vec![2, 2], &cfg).unwrap();
    let mut ledger = CommLedger::default();
    assert!(
        server_partial_grads(&mut server, vec![Matrix::zeros(3, 2)], &cfg, &mut ledger).is_err()
    );
    assert!(server_partial_grads(
        &mut server,
        vec![Matrix::zeros(3, 2), Matrix::zeros(2, 2)],
        &cfg,
        &mut ledger
    )
    .is_err());
    assert!(ledger.is_empty());
}

#[test]
fn untrained_classifier_is_near_chance() {
    let data = common::small_prepared(1000, 64, 9);
    let cfg = ProtocolConfig {
        server_epochs: 0,
        ..quick(9)
    };
    let mut fed = Federation::new(&data.split, cfg).unwrap();
    fed.run_oneshot().unwrap();
    let acc = fed.evaluate(&data.test).unwrap().accuracy;
    assert!((acc - 0.5).abs() < 0.1, "accuracy {acc}");
}

fn client_for(split: &VflSplit, seed: u64) -> (Client, ProtocolConfig) {
    let cfg = ProtocolConfig {
        client_epochs: 1,
        ..quick(seed)
    };
    let mut fed = Federation::new(split, cfg.clone()).unwrap();
    let grads: Vec<Matrix> = {
        let mut server = fed.server().clone();
        for (k, c) in fed.clients().iter().enumerate() {
            server
                .receive_overlap(k, c.extract(RepSet::Overlap).unwrap())
                .unwrap();
        }
        server.partial_grads(&cfg).unwrap().0
    };
    let client = fed.client_mut(0);
    client.receive_gradients(&grads[0], 2, &cfg).unwrap();
    client.local_ssl(&cfg).unwrap();
    (client.clone(), cfg)
}

#[test]
fn zero_probabilities_keep_the_labelled_set() {
    let data = common::small_prepared(300, 30, 10);
    let (mut client, cfg) = client_for(&data.split, 10);
    let n = client.unaligned_features().rows();
    let s = client.expand_and_ssl(&vec![0.0; n], &cfg).unwrap();
    assert_eq!(s.included, 0);
    assert!(client.expanded().unwrap().rows.is_empty());
}

#[test]
fn unit_probabilities_empty_the_unlabelled_set() {
    let data = common::small_prepared(300, 30, 11);
    let (mut client, cfg) = client_for(&data.split, 11);
    let n = client.unaligned_features().rows();
    let s = client.expand_and_ssl(&vec![1.0; n], &cfg).unwrap();
    assert_eq!(s.included, n);
    assert_eq!(s.ssl.gate_rate, 0.0);
    assert_eq!(s.ssl.mean_unsupervised_loss, 0.0);
    let exp = client.expanded().unwrap();
    assert_eq!(exp.labels.len(), n);
    assert!(exp.labels.iter().all(|&y| y < 2));
}

#[test]
fn expansion_size_concentrates() {
    let data = common::small_prepared(1200, 40, 12);
    let n = data.split.clients[0].unaligned.rows();
    let probs: Vec<f64> = (0..n).map(|i| (i % 10) as f64 / 10.0).collect();
    let mean: f64 = probs.iter().sum();
    let sd = probs.iter().map(|p| p * (1.0 - p)).sum::<f64>().sqrt();
    let seeds = 200;
    let mut total = 0.0;
    for seed in 0..seeds {
        let (mut client, cfg) = client_for(&data.split, 100 + seed);
        let s = client.expand_and_ssl(&probs, &cfg).unwrap();
        assert_eq!(s.expected_size, mean);
        assert!(
            (s.included as f64 - mean).abs() <= 4.5 * sd,
            "seed {seed}: {} vs {mean}",
            s.included
        );
        // included rows never have zero probability
        assert!(client
            .expanded()
            .unwrap()
            .rows
            .iter()
            .all(|&r| probs[r] > 0.0));
        total += s.included as f64;
    }
    let avg = total / seeds as f64;
    assert!(
        (avg - mean).abs() <= 4.0 * sd / (seeds as f64).sqrt(),
        "average {avg} vs {mean}"
    );
}

#[test]
fn expansion_rejects_bad_probabilities() {
    let data = common::small_prepared(300, 30, 13);
    let (mut client, cfg) = client_for(&data.split, 13);
    let n = client.unaligned_features().rows();
    assert!(client.expand_and_ssl(&vec![0.5; n + 1], &cfg).is_err());
    assert!(client.expand_and_ssl(&vec![1.5; n], &cfg).is_err());
}

#[test]
fn clients_and_server_stay_within_their_information() {
    let data = common::small_prepared(600, 50, 14);
    let mut fed = Federation::new(&data.split, quick(14)).unwrap();
    fed.run_fewshot().unwrap();
    for (k, c) in fed.clients().iter().enumerate() {
        let shard = &data.split.clients[k];
        // only its own columns, unchanged
        assert_eq!(c.overlap_features(), &shard.overlap);
        assert_eq!(c.unaligned_features(), &shard.unaligned);
        assert_eq!(c.extractor().in_dim(), shard.columns.len());
        // labels it holds are cluster ids or local predictions, never the server's
        let temp = c.temp_labels().unwrap();
        assert_eq!(temp.labels.len(), data.split.overlap_size());
        assert!(temp.labels.iter().all(|&y| y < temp.num_clusters));
    }
    let server = fed.server();
    for k in 0..2 {
        assert_eq!(server.overlap_reps(k).unwrap().cols(), server.rep_dims()[k]);
    }
    assert_eq!(server.classifier().unwrap().in_dim(), 16);
}

#[test]
fn temp_labels_do_not_depend_on_server_class_ids() {
    // swapping class ids changes signs of the gradients, not the grouping
    let data = common::small_prepared(400, 40, 15);
    let mut flipped = data.split.clone();
    flipped.overlap_labels.iter_mut().for_each(|y| *y = 1 - *y);
    let mut a = Federation::new(&data.split, quick(15)).unwrap();
    let mut b = Federation::new(&flipped, quick(15)).unwrap();
    a.run_oneshot().unwrap();
    b.run_oneshot().unwrap();
    let pa = a.diagnostics()[0].temp_label_purity.unwrap();
    let pb = b.diagnostics()[0].temp_label_purity.unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn fewshot_needs_two_clients() {
    let data = common::xor_data(300, 3, 0.3, 16);
    let p = prepare_data(&data, vec![vec![0, 1], vec![2, 3], vec![4, 5]], 30, 0.2, 16).unwrap();
    let mut fed = Federation::new(&p.split, quick(16)).unwrap();
    assert!(fed.run_fewshot().is_err());
    let mut fed = Federation::new(&p.split, quick(16)).unwrap();
    fed.run_oneshot().unwrap();
    for k in 0..3 {
        assert_eq!(fed.ledger().times_for(k), 3);
    }
}

#[test]
fn runs_are_reproducible() {
    let data = common::small_prepared(500, 48, 17);
    let run = || {
        let mut fed = Federation::new(&data.split, quick(17)).unwrap();
        fed.run_fewshot().unwrap();
        (fed.evaluate(&data.test).unwrap(), fed.ledger().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn vanilla_curve_tracks_traffic() {
    let data = common::small_prepared(500, 48, 18);
    let cfg = ProtocolConfig {
        eval_every: 5,
        ..quick(18)
    };
    let mut fed = Federation::new(&data.split, cfg).unwrap();
    let curve = fed.run_vanilla(20, 1, Some(&data.test)).unwrap();
    let rounds: Vec<usize> = curve.iter().map(|p| p.round).collect();
    assert_eq!(rounds, vec![5, 10, 15, 20]);
    assert_eq!(curve[1].messages_per_client, 20);
}

#[test]
fn patience_stops_early() {
    let data = common::small_prepared(500, 48, 19);
    let cfg = ProtocolConfig {
        eval_every: 1,
        patience: Some(3),
        server_lr: 1e-9,
        client_lr: 1e-9,
        ..quick(19)
    };
    let mut fed = Federation::new(&data.split, cfg).unwrap();
    let curve = fed.run_vanilla(500, 1, Some(&data.test)).unwrap();
    assert!(curve.len() < 500);
    assert_eq!(fed.ledger().times_for(0), 2 * curve.len());
}

#[test]
fn gating_branches() {
    let t = 0.95;
    assert_eq!(inclusion_probability(&[0.99, 0.01], &[0.03, 0.97], t), 0.0);
    assert_eq!(inclusion_probability(&[0.99, 0.01], &[0.97, 0.03], t), 0.97);
    assert_eq!(inclusion_probability(&[0.95, 0.05], &[0.97, 0.03], t), 0.0);
    assert_eq!(inclusion_probability(&[0.99, 0.01], &[0.95, 0.05], t), 0.0);
}

#[test]
fn attention_rejects_bad_shapes() {
    assert!(sdpa_weights(&Matrix::zeros(2, 3), &Matrix::zeros(4, 2)).is_err());
    assert!(sdpa_weights(&Matrix::zeros(2, 3), &Matrix::zeros(0, 3)).is_err());
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_output_is_in_the_value_envelope(
        (q, k, v) in (1usize..6, 1usize..12, 1usize..5, 1usize..5)
            .prop_flat_map(|(d, n, m, dv)| (matrix(m, d), matrix(n, d), matrix(n, dv)))
    ) {
        let w = sdpa_weights(&q, &k).unwrap();
        for row in w.iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
        let est = sdpa_estimate(&q, &k, &v).unwrap();
        for j in 0..v.cols() {
            let lo = (0..v.rows()).map(|i| v[(i, j)]).fold(f64::INFINITY, f64::min);
            let hi = (0..v.rows()).map(|i| v[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..est.rows() {
                prop_assert!(est[(i, j)] >= lo - 1e-12 && est[(i, j)] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn inclusion_is_zero_or_the_joint_confidence(
        a in prop::collection::vec(0.0f64..1.0, 2..5),
        b in prop::collection::vec(0.0f64..1.0, 2..5),
        t in 0.05f64..0.95,
    ) {
        let n = a.len().min(b.len());
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum::<f64>() + 1e-9; v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let (a, b) = (norm(&a[..n]), norm(&b[..n]));
        let p = inclusion_probability(&a, &b, t);
        let top = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(p == 0.0 || (p == top && p > t));
    }
}

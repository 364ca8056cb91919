mod common;

use common::grad::{check_op, full_loss, grad_config, loss_fixture, op_cases};
use common::gradient_check;
use copygec::model::{BalanceWeighting, CopyGecModel, Graph};
use copygec::objectives::{seq_loss, TrainBatch};

const TOL: f64 = 1e-4;

#[test]
fn every_operation_matches_finite_differences() {
    for (k, c) in op_cases().iter().enumerate() {
        for seed in 0..3 {
            let err = check_op(c, 100 * k as u64 + seed);
            assert!(err < TOL, "{} (seed {seed}): relative error {err:e}", c.name);
        }
    }
}

fn check_model(weighting: BalanceWeighting, copy: bool, seed: u64) {
    let (vocab, pairs) = loss_fixture();
    let mut cfg = grad_config(vocab.len());
    cfg.balance_weighting = weighting;
    cfg.copy_enabled = copy;
    let model = CopyGecModel::new(cfg, seed).unwrap();
    let refs: Vec<_> = pairs.iter().collect();
    let batch = TrainBatch::build(&refs, 1.8, copy).unwrap();
    let mut store = model.params.clone();
    let (err, name) = gradient_check(
        &mut store,
        |_| true,
        |g, s| {
            let mut m = model.clone();
            m.params = s.clone();
            full_loss(&m, g, &batch)
        },
    );
    assert!(err < TOL, "{weighting:?} copy={copy}: worst relative error {err:e} at {name}");
}

#[test]
fn full_loss_normalized_balance() {
    check_model(BalanceWeighting::Normalized, true, 11);
}

#[test]
fn full_loss_raw_balance() {
    check_model(BalanceWeighting::Raw, true, 12);
}

#[test]
fn full_loss_without_copy() {
    check_model(BalanceWeighting::Normalized, false, 13);
}

#[test]
fn decoder_language_model_loss() {
    let (vocab, pairs) = loss_fixture();
    let model = CopyGecModel::new(grad_config(vocab.len()), 14).unwrap();
    let refs: Vec<_> = pairs.iter().collect();
    let batch = TrainBatch::build(&refs, 1.0, false).unwrap();
    let mut store = model.params.clone();
    let (err, name) = gradient_check(
        &mut store,
        |n| !n.starts_with("encoder.") && !n.contains("cross") && !n.starts_with("label") && !n.starts_with("copy"),
        |g: &mut Graph, s| {
            let mut m = model.clone();
            m.params = s.clone();
            let out = m.forward(g, None, &batch.trg_in, None).unwrap();
            seq_loss(g, &out, &batch).unwrap().sum
        },
    );
    assert!(err < TOL, "worst relative error {err:e} at {name}");
}

mod common;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tbnet::container::{write_victim, Container, Meta};
use tbnet::finalize::export_split;
use tbnet::sim::{audit_check, deploy, Direction, Relay, ReeContext, HEADER_BYTES};
use tbnet::{Error, Mode};
use tbnet_tensor::Tensor;

fn exported(dir: &tempfile::TempDir) -> (tbnet::TwoBranchModel, PathBuf, PathBuf) {
    let m = common::finalized(11);
    let (r, t) = (dir.path().join("m.ree.tbnt"), dir.path().join("m.tee.tbnt"));
    export_split(&m, &r, &t, Meta::new("export", "abc")).unwrap();
    (m, r, t)
}

fn input(rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(&[1, 1, 8, 8], |_| rng.random_range(-2.0..2.0))
}

#[test]
fn split_matches_in_memory_forward() {
    let dir = tempfile::tempdir().unwrap();
    let (m, r, t) = exported(&dir);
    let mut rt = deploy(&r, &t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let x = input(&mut rng);
        let split = rt.infer(&x).unwrap();
        let mem = m.forward(&x, Mode::Eval).unwrap().logits;
        assert_eq!(split.prediction.logits.data(), mem.data());
        assert!(audit_check(&split.log).pass);
    }
    let log = rt.teardown();
    assert_eq!(log.inferences, 100);
    assert!(audit_check(&log).pass);
}

#[test]
fn message_bytes_follow_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let (m, r, t) = exported(&dir);
    let mut rt = deploy(&r, &t).unwrap();
    let shapes = m.ree.shapes().unwrap();
    let expected: Vec<usize> = m
        .merge_points
        .iter()
        .map(|p| HEADER_BYTES + 4 * shapes[p.ree_layer].elements())
        .collect();
    assert_eq!(rt.message_bytes_per_sample().unwrap(), expected);
    let out = rt.infer(&input(&mut ChaCha8Rng::seed_from_u64(0))).unwrap();
    let sent: Vec<usize> = out
        .log
        .records
        .iter()
        .filter(|r| r.direction == Direction::ReeToTee)
        .map(|r| r.bytes)
        .collect();
    assert_eq!(sent, expected);
    // first block is 4 channels at 8x8 in M_R even though M_T kept 3
    assert_eq!(expected[0], 24 + 4 * 4 * 64);
}

#[test]
fn injected_reverse_record_fails_audit() {
    let dir = tempfile::tempdir().unwrap();
    let (_, r, t) = exported(&dir);
    let mut rt = deploy(&r, &t).unwrap();
    let mut log = rt.infer(&input(&mut ChaCha8Rng::seed_from_u64(1))).unwrap().log;
    assert!(audit_check(&log).pass);
    log.push(Direction::TeeToRee, Some(2), 100, true);
    let verdict = audit_check(&log);
    assert!(!verdict.pass);
    assert_eq!(verdict.violations[0].ordinal, Some(log.records.len() as u64 - 1));
}

#[test]
fn ree_file_holds_no_alignment_maps() {
    let dir = tempfile::tempdir().unwrap();
    let (_, r, t) = exported(&dir);
    let has = |p: &PathBuf| {
        let b = std::fs::read(p).unwrap();
        b.windows(14).any(|w| w == b"alignment_maps")
    };
    assert!(!has(&r));
    assert!(has(&t));
    let rt = deploy(&r, &t).unwrap();
    assert_eq!(rt.ree().inventory().unwrap().alignment_maps, 0);
    assert_eq!(rt.tee().inventory().unwrap().alignment_maps, 5);
}

#[test]
fn ree_context_refuses_tee_file() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, t) = exported(&dir);
    assert!(matches!(ReeContext::load(&t), Err(Error::Refused(_))));
}

#[test]
fn relay_faults_name_the_merge_point() {
    let dir = tempfile::tempdir().unwrap();
    let (_, r, t) = exported(&dir);
    let mut rt = deploy(&r, &t).unwrap();
    let x = input(&mut ChaCha8Rng::seed_from_u64(2));
    match rt.infer_with(&x, Relay::Drop(2)) {
        Err(Error::Protocol { merge_point, .. }) => assert_eq!(merge_point, 2),
        other => panic!("expected protocol error, got {other:?}"),
    }
    match rt.infer_with(&x, Relay::Swap(1)) {
        Err(Error::Protocol { merge_point, .. }) => assert_eq!(merge_point, 1),
        other => panic!("expected protocol error, got {other:?}"),
    }
    // a failed inference leaves the runtime usable
    assert!(rt.infer(&x).is_ok());
}

#[test]
fn fresh_runtime_has_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let (_, r, t) = exported(&dir);
    let rt = deploy(&r, &t).unwrap();
    assert!(rt.teardown().is_empty());
}

#[test]
fn resource_report_against_victim() {
    let dir = tempfile::tempdir().unwrap();
    let (m, r, t) = exported(&dir);
    let v = dir.path().join("victim.tbnt");
    write_victim(&v, &common::victim(11), Meta::default()).unwrap();
    let rt = deploy(&r, &t).unwrap();
    let rep = tbnet::sim::resource_report(&rt, &v).unwrap();
    assert!(rep.tee_param_bytes < rep.baseline_tee_param_bytes);
    assert!(rep.tee_macs < rep.baseline_macs);
    assert!(rep.memory_reduction_ratio > 1.0);
    assert_eq!(rep.tee_param_bytes, 4 * m.tee.flat_weights().len());
    assert_eq!(rep.message_bytes_per_inference, rt.message_bytes_per_sample().unwrap().iter().sum::<usize>());
    let tee_file = Container::read(&t).unwrap();
    assert_eq!(rep.tee_param_bytes, tee_file.weight_bytes());
    assert_eq!(rep.ree_param_bytes, Container::read(&r).unwrap().weight_bytes());

    let again = tbnet::sim::resource_report(&deploy(&r, &t).unwrap(), &v).unwrap();
    assert_eq!(again, rep);
    let mut rt = deploy(&r, &t).unwrap();
    assert!(rt.infer(&input(&mut ChaCha8Rng::seed_from_u64(5))).unwrap().resources.is_none());
    rt.attach_baseline(&v).unwrap();
    assert_eq!(rt.infer(&input(&mut ChaCha8Rng::seed_from_u64(5))).unwrap().resources, Some(rep));
}

#[test]
fn unpruned_tee_has_unit_ratio() {
    let v = common::victim(2);
    let rep = tbnet::sim::report_for(&v, &v, &v, 0).unwrap();
    assert_eq!(rep.memory_reduction_ratio, 1.0);
    assert_eq!(rep.mac_reduction_ratio, 1.0);
}

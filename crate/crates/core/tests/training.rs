mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tbnet::container::Meta;
use tbnet::prune::{load_checkpoint, save_checkpoint, PruneCheckpoint};
use tbnet::train::{loss_eq1, Penalty};
use tbnet::{init_twobranch, InitOptions, TwoBranchModel};
use tbnet_tensor::check::rel_err;
use tbnet_tensor::Tensor;

fn model64(seed: u64) -> TwoBranchModel<f64> {
    let mut m = init_twobranch(&common::victim(seed), seed + 1, InitOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    common::perturb(&mut m.ree, &mut rng);
    common::perturb(&mut m.tee, &mut rng);
    m.cast()
}

fn param(m: &mut TwoBranchModel<f64>, branch: usize, slot: usize) -> &mut Tensor<f64> {
    let g = if branch == 0 { &mut m.ree } else { &mut m.tee };
    g.params_mut("").into_iter().nth(slot).unwrap().tensor
}

/// Gradient of the joint loss against central differences, sampling a few
/// coordinates of every parameter tensor in both branches.
fn gradcheck(kind: Penalty, seed: u64) {
    let lambda = 0.05;
    let mut m = model64(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    let x = Tensor::from_fn(&[4, 1, 8, 8], |_| rng.random_range(-1.0..1.0));
    let labels = vec![0, 1, 2, 1];
    loss_eq1(&mut m, &x, &labels, lambda, kind).unwrap();
    let analytic = m.clone();
    let counts = [m.ree.params_mut("").len(), m.tee.params_mut("").len()];
    let (mut a, mut n) = (Vec::new(), Vec::new());
    let h = 1e-6;
    for (branch, &count) in counts.iter().enumerate() {
        for slot in 0..count {
            let len = param(&mut m, branch, slot).len();
            for _ in 0..3 {
                let i = rng.random_range(0..len);
                let mut probe = analytic.clone();
                let g = param(&mut probe, branch, slot).grad().unwrap()[i];
                let base = param(&mut probe, branch, slot).data()[i];
                let eval = |v: f64| {
                    let mut q = analytic.clone();
                    param(&mut q, branch, slot).data_mut()[i] = v;
                    loss_eq1(&mut q, &x, &labels, lambda, kind).unwrap().total
                };
                let fd = (eval(base + h) - eval(base - h)) / (2.0 * h);
                a.push(g);
                n.push(fd);
            }
        }
    }
    // every gamma is drawn from [0.5, 1.5], so no sampled sum sits at the kink
    let err = rel_err(&a, &n);
    assert!(err < 1e-5, "{kind}: relative error {err}");
}

#[test]
fn joint_loss_gradient_composite() {
    for seed in 0..3 {
        gradcheck(Penalty::Composite, seed);
    }
}

#[test]
fn joint_loss_gradient_separate() {
    gradcheck(Penalty::Separate, 5);
}

#[test]
fn checkpoint_restore_is_bitwise() {
    let fin = common::finalized_full(8);
    let m = init_twobranch(&common::victim(8), 9, InitOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cp = PruneCheckpoint {
        iteration: 3,
        model: m,
        accuracy: 0.875,
        mask: Some(fin.mask),
    };
    let path = save_checkpoint(dir.path(), &cp, Meta::new("prune", "0123")).unwrap();
    let (back, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(back, cp);
    let bits = |m: &TwoBranchModel| -> Vec<u32> {
        m.ree.flat_weights().iter().chain(&m.tee.flat_weights()).map(|v| v.to_bits()).collect()
    };
    assert_eq!(bits(&back.model), bits(&cp.model));
    assert_eq!(meta.stage, "prune");
}

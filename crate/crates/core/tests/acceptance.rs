//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Set `ACCEPTANCE_STRICT=1` to turn any FAIL into a non-zero exit status.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tbnet::container::{read_ree, read_tee};
use tbnet::graph::{BranchGraph, LayerSpec};
use tbnet::pipeline::{Config, Pipeline, Stage};
use tbnet::prune::{
    apply_mask, build_mask, collect_bn_weights, composite_weights, compute_threshold, load_checkpoint, save_checkpoint,
    ChannelMask, PruneCheckpoint,
};
use tbnet::sim::{audit_check, deploy, Direction, HEADER_BYTES};
use tbnet::{forward_single, init_twobranch, InitOptions, Mode, TwoBranchModel};
use tbnet_tensor::check::{conv_oracle_suite, gradient_suite};
use tbnet_tensor::Tensor;

type Outcome = tbnet::Result<(bool, String)>;

struct Desk {
    dir: tempfile::TempDir,
    control: tempfile::TempDir,
    elapsed: Duration,
}

impl Desk {
    fn work(&self) -> &Path {
        self.dir.path()
    }

    fn report(&self, stage: Stage) -> Value {
        read_json(&self.work().join("reports").join(format!("{stage}.json")))
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn c1_numerical_core() -> Outcome {
    let t = Instant::now();
    let checks = gradient_suite(20, 2024);
    let worst = checks.iter().map(|c| c.worst_f32).fold(0.0, f64::max);
    let worst_op = checks.iter().max_by(|a, b| a.worst_f32.total_cmp(&b.worst_f32)).unwrap().op;
    let conv = conv_oracle_suite(20, 2025);
    let secs = t.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-3 && conv <= 1e-6 && secs < 60.0,
        format!(
            "{} ops x 20 trials, worst f32 rel err {worst:.2e} ({worst_op}); conv vs nested loops {conv:.2e}; {secs:.1}s",
            checks.len()
        ),
    ))
}

fn perturbed(seed: u64) -> TwoBranchModel {
    let mut m = init_twobranch(&common::victim(seed), seed + 1, InitOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    common::perturb(&mut m.ree, &mut rng);
    common::perturb(&mut m.tee, &mut rng);
    m
}

fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f32> {
    Tensor::from_fn(&[n, 1, 8, 8], |_| rng.random_range(-1.5..1.5))
}

fn c2_merge_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_input(&mut rng, 6);
    let mut zr = perturbed(1);
    zr.ree.zero_weights();
    let a = zr.forward(&x, Mode::Eval)?.logits == forward_single(&zr.tee, &x, Mode::Eval)?;
    let mut zt = perturbed(2);
    zt.tee.zero_weights();
    let b = zt.forward(&x, Mode::Eval)?.logits == forward_single(&zt.ree, &x, Mode::Eval)?;
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let m = if seed % 2 == 0 { perturbed(10 + seed) } else { common::finalized(10 + seed) };
        let x = random_input(&mut rng, 3);
        let got = m.forward(&x, Mode::Eval)?.logits;
        for (g, e) in got.data().iter().zip(common::two_chain_reference(&m, &x)) {
            worst = worst.max((*g as f64 - e).abs() / (1.0 + e.abs()));
        }
    }
    Ok((
        a && b && worst <= 1e-6,
        format!("zero-M_R == M_T alone: {a}; zero-M_T == M_R logits: {b}; worst deviation from two-chain reference {worst:.2e}"),
    ))
}

fn c3_golden_trace() -> Outcome {
    let specs = vec![LayerSpec::conv3x3(1, 4), LayerSpec::global_avgpool(), LayerSpec::dense(4, 2)];
    let v: BranchGraph = BranchGraph::new([1, 4, 4], 2, specs, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut m = init_twobranch(&v, 1, InitOptions::default())?;
    m.ree.conv_params_mut(0).unwrap().gamma.data_mut().copy_from_slice(&[0.3, 0.05, 0.2, 0.4]);
    m.tee.conv_params_mut(0).unwrap().gamma.data_mut().copy_from_slice(&[0.2, 0.05, 0.1, 0.1]);
    let bn = collect_bn_weights(&m)?;
    let comp = composite_weights(&bn.ree, &bn.tee)?;
    let t = compute_threshold(&comp, 0.25)?;
    let mask = build_mask(&comp, t, &bn.table)?;
    let golden = (t - 0.3).abs() < 1e-6 && mask.bits() == [true, false, false, true] && mask.forced.is_empty();
    let above = comp.iter().filter(|&&c| c > t).count();
    let popcount_ok = mask.popcount() == above + mask.forced.len();
    // a threshold above every channel leaves one forced survivor
    let safe = build_mask(&comp, 1.0, &bn.table)?;
    let safeguard = safe.bits() == [true, false, false, false] && safe.forced == [0] && safe.popcount() == 1;
    Ok((
        golden && popcount_ok && safeguard,
        format!(
            "composite {comp:.2?}, T = {t:.4}, mask {:?}; popcount consistent: {popcount_ok}; safeguard keeps {:?}",
            mask.bits().iter().map(|&b| b as u8).collect::<Vec<_>>(),
            safe.forced
        ),
    ))
}

fn c4_prune_correctness() -> Outcome {
    let mut m = perturbed(3);
    for g in [&mut m.ree, &mut m.tee] {
        let p = g.conv_params_mut(2).unwrap();
        p.gamma.data_mut()[2] = 0.0;
        p.beta.data_mut()[2] = 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs: Vec<Tensor<f32>> = (0..100).map(|_| random_input(&mut rng, 1)).collect();
    let before = xs.iter().map(|x| m.forward(x, Mode::Eval).map(|o| o.logits)).collect::<tbnet::Result<Vec<_>>>()?;
    let mut mask = ChannelMask::all_ones(&m)?;
    mask.layers[1].keep[2] = false;
    let mut pruned = m.clone();
    apply_mask(&mut pruned, &mask)?;
    let mut worst: f64 = 0.0;
    for (x, b) in xs.iter().zip(&before) {
        let a = pruned.forward(x, Mode::Eval)?.logits;
        for (p, q) in a.data().iter().zip(b.data()) {
            worst = worst.max(((p - q).abs() / q.abs().max(1e-6)) as f64);
        }
    }
    let dir = tempfile::tempdir().map_err(|e| tbnet::Error::Data(e.to_string()))?;
    let cp = PruneCheckpoint {
        iteration: 1,
        model: pruned,
        accuracy: 0.5,
        mask: Some(mask),
    };
    let path = save_checkpoint(dir.path(), &cp, tbnet::container::Meta::new("prune", "00"))?;
    let (back, _) = load_checkpoint(&path)?;
    let bits = |m: &TwoBranchModel| -> Vec<u32> { m.ree.flat_weights().iter().chain(&m.tee.flat_weights()).map(|v| v.to_bits()).collect() };
    let bitwise = back == cp && bits(&back.model) == bits(&cp.model);
    Ok((
        worst <= 1e-6 && bitwise,
        format!("dead channel removed: worst relative logit change {worst:.2e} over 100 inputs; checkpoint restore bitwise: {bitwise}"),
    ))
}

type DeskCriterion = (usize, &'static str, fn(&Desk) -> Outcome);

fn run_desk() -> tbnet::Result<Desk> {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| tbnet::Error::Data(e.to_string()))?;
    let control = tempfile::tempdir().map_err(|e| tbnet::Error::Data(e.to_string()))?;
    let mut p = Pipeline::new(Config::default(), dir.path())?;
    for stage in Stage::ALL {
        p.run(stage)?;
        eprintln!("  desk {stage} done at {:.0}s", t.elapsed().as_secs_f64());
    }
    // the lambda = 0 control shares the victim and the initialization
    for name in ["victim.tbnt", "init.tbnt"] {
        std::fs::copy(dir.path().join(name), control.path().join(name)).map_err(|e| tbnet::Error::Data(e.to_string()))?;
    }
    let mut cfg = Config::default();
    cfg.set("transfer.lambda", "0")?;
    Pipeline::new(cfg, control.path())?.run(Stage::Transfer)?;
    Ok(Desk {
        dir,
        control,
        elapsed: t.elapsed(),
    })
}

fn c5_desk(d: &Desk) -> Outcome {
    let r = read_json(&d.work().join("report.json"));
    let iters = r["accepted_iterations"].as_u64().unwrap_or(0);
    let (victim, tbnet) = (f(&r["victim_accuracy"]), f(&r["tbnet_accuracy"]));
    let mins = d.elapsed.as_secs_f64() / 60.0;
    Ok((
        victim >= 0.95 && iters >= 2 && tbnet >= victim - 0.02 && mins <= 15.0,
        format!(
            "victim {}, TBNet {}, {iters} accepted iterations ({}), desk run {mins:.1} min",
            pct(victim),
            pct(tbnet),
            r["prune_status"]
        ),
    ))
}

fn c6_security_gap(d: &Desk) -> Outcome {
    let r = read_json(&d.work().join("report.json"));
    let (tbnet, direct, full) = (f(&r["tbnet_accuracy"]), f(&r["direct_use_accuracy"]), f(&r["finetune_full_data_accuracy"]));
    let curve: Vec<(f64, f64)> = r["finetune_curve"]
        .as_array()
        .map(|a| a.iter().map(|p| (f(&p["fraction"]), f(&p["accuracy"]))).collect())
        .unwrap_or_default();
    let mut best = f64::NEG_INFINITY;
    let mut monotone = true;
    for &(_, acc) in &curve {
        monotone &= acc >= best - 0.01;
        best = best.max(acc);
    }
    let direct_ok = direct <= tbnet - 0.10;
    let full_ok = full <= tbnet;
    Ok((
        direct_ok && full_ok && monotone,
        format!(
            "direct use {} vs TBNet {} (need <= {}): {direct_ok}; fine-tune at 100% {}: {full_ok}; curve {} nondecreasing within 1 point: {monotone}",
            pct(direct),
            pct(tbnet),
            pct(tbnet - 0.10),
            pct(full),
            curve.iter().map(|(q, a)| format!("{q}:{}", pct(*a))).collect::<Vec<_>>().join(" "),
        ),
    ))
}

fn c7_ablation(d: &Desk) -> Outcome {
    let r = read_json(&d.work().join("report.json"));
    let (tbnet, alone) = (f(&r["tbnet_accuracy"]), f(&r["tee_only_best_accuracy"]));
    Ok((alone < tbnet, format!("retrained M_T alone best {} vs TBNet {}", pct(alone), pct(tbnet))))
}

fn c8_sparsity(d: &Desk) -> Outcome {
    let with = f(&d.report(Stage::Transfer)["median_abs_composite"]);
    let control = read_json(&d.control.path().join("reports/transfer.json"));
    let without = f(&control["median_abs_composite"]);
    Ok((
        with < without,
        format!("median |g_R + g_T| after equal epochs: lambda=1e-4 {with:.6}, lambda=0 {without:.6}"),
    ))
}

fn c9_split_runtime(d: &Desk) -> Outcome {
    let sim = d.report(Stage::Simulate);
    let samples = sim["samples"].as_u64().unwrap_or(0);
    let agree = sim["bitwise_agreement"].as_u64().unwrap_or(0);
    let normal = sim["audit"]["pass"] == true;
    let (ree, tee) = (d.work().join("tbnet.ree.tbnt"), d.work().join("tbnet.tee.tbnt"));
    let mut rt = deploy(&ree, &tee)?;
    let x = Tensor::from_fn(&[1, 1, 28, 28], |i| (i % 17) as f32 / 8.0 - 1.0);
    let mut log = rt.infer(&x)?.log;
    log.push(Direction::TeeToRee, Some(0), 64, true);
    let injected_fails = !audit_check(&log).pass;
    let bytes = std::fs::read(&ree).map_err(|e| tbnet::Error::Data(e.to_string()))?;
    let no_maps = !bytes.windows(14).any(|w| w == b"alignment_maps") && rt.ree().inventory()?.alignment_maps == 0;
    let ree_graph = read_ree(&ree)?.graph;
    let merges = read_tee(&tee)?.merge_points;
    let shapes = ree_graph.shapes()?;
    let expected: Vec<usize> = merges.iter().map(|m| HEADER_BYTES + 4 * shapes[m.ree_layer].elements()).collect();
    let sent: Vec<usize> = rt
        .infer(&x)?
        .log
        .records
        .iter()
        .filter(|r| r.direction == Direction::ReeToTee)
        .map(|r| r.bytes)
        .collect();
    let bytes_ok = sent == expected;
    Ok((
        samples == 100 && agree == 100 && normal && injected_fails && no_maps && bytes_ok,
        format!(
            "{agree}/{samples} bitwise; audit normal {normal}, injected TEE->REE fails {injected_fails}; REE file map-free {no_maps}; message bytes {sent:?} match shapes {bytes_ok}"
        ),
    ))
}

fn c10_resources(d: &Desk) -> Outcome {
    let prune = d.report(Stage::Prune);
    let sim = d.report(Stage::Simulate);
    let res = &sim["resources"];
    let ratios: Vec<f64> = prune["iterations"]
        .as_array()
        .map(|a| a.iter().map(|i| f(&i["memory_reduction_ratio"])).collect())
        .unwrap_or_default();
    let monotone = ratios.windows(2).all(|w| w[1] >= w[0]);
    let (tb, vb) = (f(&res["tee_param_bytes"]), f(&res["baseline_tee_param_bytes"]));
    let (tm, vm) = (f(&res["tee_macs"]), f(&res["baseline_macs"]));
    let ratio = f(&res["memory_reduction_ratio"]);
    Ok((
        tb < vb && ratio > 1.0 && monotone && tm < vm,
        format!(
            "TEE {tb} B vs victim {vb} B (ratio {ratio:.3}x, per iteration {}); TEE MACs {tm} vs {vm} ({:.3}x)",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" -> "),
            f(&res["mac_reduction_ratio"])
        ),
    ))
}

fn guarded(f: impl FnOnce() -> Outcome) -> (bool, String) {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(p) => (
            false,
            format!(
                "panic: {}",
                p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
            ),
        ),
    }
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, bool, String)> = Vec::new();
    let mut record = |id: usize, name: &'static str, r: (bool, String)| {
        println!("criterion {id:>2} {} {name}: {}", if r.0 { "PASS" } else { "FAIL" }, r.1);
        results.push((id, name, r.0, r.1));
    };
    record(1, "numerical core", guarded(c1_numerical_core));
    record(2, "merge semantics", guarded(c2_merge_semantics));
    record(3, "pruning golden trace", guarded(c3_golden_trace));
    record(4, "prune correctness", guarded(c4_prune_correctness));

    eprintln!("running the desk experiment");
    let desk = catch_unwind(run_desk);
    let desk: Result<Desk, String> = match desk {
        Ok(Ok(d)) => Ok(d),
        Ok(Err(e)) => Err(format!("desk experiment failed: {e}")),
        Err(_) => Err("desk experiment panicked".into()),
    };
    let stages: [DeskCriterion; 6] = [
        (5, "desk experiment", c5_desk),
        (6, "security gap", c6_security_gap),
        (7, "M_T-alone ablation", c7_ablation),
        (8, "sparsity effect", c8_sparsity),
        (9, "split runtime", c9_split_runtime),
        (10, "resource accounting", c10_resources),
    ];
    for (id, name, check) in stages {
        let r = match &desk {
            Ok(d) => guarded(|| check(d)),
            Err(e) => (false, e.clone()),
        };
        record(id, name, r);
    }
    let passed = results.iter().filter(|r| r.2).count();
    println!("acceptance: {passed}/{} criteria PASS in {:.1}s", results.len(), start.elapsed().as_secs_f64());
    if let Ok(d) = &desk {
        let keep: Option<PathBuf> = std::env::var_os("ACCEPTANCE_KEEP").map(PathBuf::from);
        if let Some(k) = keep {
            let _ = std::fs::copy(d.work().join("report.json"), k);
        }
    }
    if std::env::var("ACCEPTANCE_STRICT").as_deref() == Ok("1") && passed < results.len() {
        std::process::exit(1);
    }
}

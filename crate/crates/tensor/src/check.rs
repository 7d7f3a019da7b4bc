//! Reference oracles for the kernel test suites: brute-force convolution and
//! central finite differences, independent of the production code paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::*;

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        diff
    } else {
        diff / denom
    }
}

/// Direct seven-loop convolution. `x` is NCHW, `w` is OIHW.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [o, _, k, _] = ws;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for f in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[f];
                    for ch in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ih = (i * stride + ki) as isize - pad as isize;
                                let iw = (j * stride + kj) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                let xv = x[((s * c + ch) * h + ih as usize) * wd + iw as usize];
                                let wv = w[((f * c + ch) * k + ki) * k + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((s * o + f) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

/// Central differences of a scalar function over every coordinate of `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst gradient errors of one operator over a set of seeded trials.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub op: &'static str,
    pub trials: usize,
    /// f32 analytic gradient versus f64 finite differences.
    pub worst_f32: f64,
    /// f64 analytic gradient versus f64 finite differences.
    pub worst_f64: f64,
}

const FD_STEP: f64 = 1e-6;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn t32(shape: &[usize], data: &[f64]) -> Tensor<f32> {
    t64(shape, data).cast()
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Inputs rounded through f32 so both precisions see identical values.
fn rounded(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

struct Case {
    /// Analytic gradients at f64 and at f32 (as f64) for every checked input.
    analytic64: Vec<Vec<f64>>,
    analytic32: Vec<Vec<f64>>,
    numeric: Vec<Vec<f64>>,
}

fn record(check: &mut GradCheck, case: Case) {
    for ((a64, a32), num) in case.analytic64.iter().zip(&case.analytic32).zip(&case.numeric) {
        check.worst_f64 = check.worst_f64.max(rel_err(a64, num));
        check.worst_f32 = check.worst_f32.max(rel_err(a32, num));
    }
}

fn conv_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..3);
    let c = rng.random_range(1..4);
    let o = rng.random_range(1..4);
    let k = [1, 3][rng.random_range(0..2)];
    let h = rng.random_range(k.max(3)..6);
    let stride = rng.random_range(1..3);
    let pad = rng.random_range(0..2);
    let spec = Conv2dSpec { stride, padding: pad };
    let (xs, ws) = ([n, c, h, h], [o, c, k, k]);
    let x = rounded(randn(rng, n * c * h * h));
    let w = rounded(randn(rng, o * c * k * k));
    let b = rounded(randn(rng, o));
    let (_, os) = naive_conv2d(&x, xs, &w, ws, &b, stride, pad);
    let r = rounded(randn(rng, os.iter().product()));
    let loss = |x: &[f64], w: &[f64], b: &[f64]| dot(&naive_conv2d(x, xs, w, ws, b, stride, pad).0, &r);
    let numeric = vec![
        central_diff(|v| loss(v, &w, &b), &x, FD_STEP),
        central_diff(|v| loss(&x, v, &b), &w, FD_STEP),
        central_diff(|v| loss(&x, &w, v), &b, FD_STEP),
    ];
    let g64 = conv2d_backward(&t64(&xs, &x), &t64(&ws, &w), &t64(&os, &r), spec, true).unwrap();
    let g32 = conv2d_backward(&t32(&xs, &x), &t32(&ws, &w), &t32(&os, &r), spec, true).unwrap();
    Case {
        analytic64: vec![g64.input.unwrap().into_data(), g64.weight, g64.bias],
        analytic32: vec![to64(g32.input.unwrap().data()), to64(&g32.weight), to64(&g32.bias)],
        numeric,
    }
}

fn bn_case(rng: &mut ChaCha8Rng, mode: BnMode) -> Case {
    let n = rng.random_range(2..4);
    let c = rng.random_range(1..4);
    // at least 8 values per channel; tiny batches make d(out)/dx vanish
    let h = rng.random_range(2..4);
    let shape = [n, c, h, h];
    let x = rounded(randn(rng, n * c * h * h));
    let g = rounded(randn(rng, c));
    let b = rounded(randn(rng, c));
    let r = rounded(randn(rng, x.len()));
    let mut stats = RunningStats::<f64>::new(c);
    stats.mean = rounded(randn(rng, c));
    stats.var = rounded((0..c).map(|_| rng.random_range(0.5..2.0)).collect());
    let stats32 = RunningStats::<f32> {
        mean: stats.mean.iter().map(|&v| v as f32).collect(),
        var: stats.var.iter().map(|&v| v as f32).collect(),
        momentum: 0.1,
    };
    let eps = BN_EPSILON;
    let loss = |x: &[f64], g: &[f64], b: &[f64]| {
        let out = batchnorm_forward(&t64(&shape, x), &t64(&[c], g), &t64(&[c], b), &stats, mode, eps).unwrap();
        dot(out.output.data(), &r)
    };
    let numeric = vec![
        central_diff(|v| loss(v, &g, &b), &x, FD_STEP),
        central_diff(|v| loss(&x, v, &b), &g, FD_STEP),
        central_diff(|v| loss(&x, &g, v), &b, FD_STEP),
    ];
    let f64run = batchnorm_forward(&t64(&shape, &x), &t64(&[c], &g), &t64(&[c], &b), &stats, mode, eps).unwrap();
    let (dx, dg, db) = batchnorm_backward(&f64run.cache, &t64(&[c], &g), &t64(&shape, &r)).unwrap();
    let f32run =
        batchnorm_forward(&t32(&shape, &x), &t32(&[c], &g), &t32(&[c], &b), &stats32, mode, eps as f32).unwrap();
    let (dx32, dg32, db32) = batchnorm_backward(&f32run.cache, &t32(&[c], &g), &t32(&shape, &r)).unwrap();
    Case {
        analytic64: vec![dx.into_data(), dg, db],
        analytic32: vec![to64(dx32.data()), to64(&dg32), to64(&db32)],
        numeric,
    }
}

fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    rounded(
        (0..n)
            .map(|_| {
                let mag = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect(),
    )
}

fn relu_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..30);
    let x = away_from_zero(rng, n);
    let r = rounded(randn(rng, n));
    let numeric = vec![central_diff(|v| dot(relu(&t64(&[n], v)).data(), &r), &x, FD_STEP)];
    let a64 = relu_backward(&t64(&[n], &x), &t64(&[n], &r)).unwrap();
    let a32 = relu_backward(&t32(&[n], &x), &t32(&[n], &r)).unwrap();
    Case {
        analytic64: vec![a64.into_data()],
        analytic32: vec![to64(a32.data())],
        numeric,
    }
}

fn maxpool_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..3);
    let c = rng.random_range(1..3);
    let h = rng.random_range(2..6);
    let shape = [n, c, h, h];
    let len = n * c * h * h;
    // distinct values spaced far wider than the probe step
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let x: Vec<f64> = order.iter().map(|&v| v as f64 * 0.01 - 0.3).collect();
    let x = rounded(x);
    let probe = maxpool2x2(&t64(&shape, &x)).unwrap();
    let r = rounded(randn(rng, probe.output.len()));
    let numeric = vec![central_diff(
        |v| dot(maxpool2x2(&t64(&shape, v)).unwrap().output.data(), &r),
        &x,
        FD_STEP,
    )];
    let out64 = maxpool2x2(&t64(&shape, &x)).unwrap();
    let a64 = maxpool2x2_backward(&shape, &out64.argmax, &t64(out64.output.shape(), &r)).unwrap();
    let out32 = maxpool2x2(&t32(&shape, &x)).unwrap();
    let a32 = maxpool2x2_backward(&shape, &out32.argmax, &t32(out32.output.shape(), &r)).unwrap();
    Case {
        analytic64: vec![a64.into_data()],
        analytic32: vec![to64(a32.data())],
        numeric,
    }
}

fn gap_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5), 3];
    let x = rounded(randn(rng, shape.iter().product()));
    let r = rounded(randn(rng, shape[0] * shape[1]));
    let numeric = vec![central_diff(
        |v| dot(global_avgpool(&t64(&shape, v)).unwrap().data(), &r),
        &x,
        FD_STEP,
    )];
    let os = [shape[0], shape[1]];
    let a64 = global_avgpool_backward(&shape, &t64(&os, &r)).unwrap();
    let a32 = global_avgpool_backward(&shape, &t32(&os, &r)).unwrap();
    Case {
        analytic64: vec![a64.into_data()],
        analytic32: vec![to64(a32.data())],
        numeric,
    }
}

fn dense_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..4);
    let i = rng.random_range(1..6);
    let o = rng.random_range(1..6);
    let x = rounded(randn(rng, n * i));
    let w = rounded(randn(rng, o * i));
    let b = rounded(randn(rng, o));
    let r = rounded(randn(rng, n * o));
    let loss = |x: &[f64], w: &[f64], b: &[f64]| {
        // straight-line reference, independent of the gemm path
        let mut acc = 0.0;
        for s in 0..n {
            for f in 0..o {
                let y = b[f] + (0..i).map(|p| x[s * i + p] * w[f * i + p]).sum::<f64>();
                acc += y * r[s * o + f];
            }
        }
        acc
    };
    let numeric = vec![
        central_diff(|v| loss(v, &w, &b), &x, FD_STEP),
        central_diff(|v| loss(&x, v, &b), &w, FD_STEP),
        central_diff(|v| loss(&x, &w, v), &b, FD_STEP),
    ];
    let g64 = dense_backward(&t64(&[n, i], &x), &t64(&[o, i], &w), &t64(&[n, o], &r)).unwrap();
    let g32 = dense_backward(&t32(&[n, i], &x), &t32(&[o, i], &w), &t32(&[n, o], &r)).unwrap();
    Case {
        analytic64: vec![g64.input.into_data(), g64.weight, g64.bias],
        analytic32: vec![to64(g32.input.data()), to64(&g32.weight), to64(&g32.bias)],
        numeric,
    }
}

fn add_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..20);
    let a = rounded(randn(rng, n));
    let b = rounded(randn(rng, n));
    let r = rounded(randn(rng, n));
    let f = |a: &[f64], b: &[f64]| dot(elementwise_add(&t64(&[n], a), &t64(&[n], b)).unwrap().data(), &r);
    let numeric = vec![central_diff(|v| f(v, &b), &a, FD_STEP), central_diff(|v| f(&a, v), &b, FD_STEP)];
    // identity backward to both operands
    Case {
        analytic64: vec![r.clone(), r.clone()],
        analytic32: vec![to64(t32(&[n], &r).data()), to64(t32(&[n], &r).data())],
        numeric,
    }
}

fn ce_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..5);
    let k = rng.random_range(2..8);
    let x: Vec<f64> = rounded(randn(rng, n * k).into_iter().map(|v| v * 3.0).collect());
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let numeric = vec![central_diff(
        |v| softmax_cross_entropy(&t64(&[n, k], v), &labels).unwrap().0,
        &x,
        FD_STEP,
    )];
    let (_, g64) = softmax_cross_entropy(&t64(&[n, k], &x), &labels).unwrap();
    let (_, g32) = softmax_cross_entropy(&t32(&[n, k], &x), &labels).unwrap();
    Case {
        analytic64: vec![g64.into_data()],
        analytic32: vec![to64(g32.data())],
        numeric,
    }
}

/// Runs `trials` seeded finite-difference checks for every differentiable
/// operator.
pub fn gradient_suite(trials: usize, seed: u64) -> Vec<GradCheck> {
    type CaseFn = fn(&mut ChaCha8Rng) -> Case;
    let ops: [(&'static str, CaseFn); 9] = [
        ("conv2d", conv_case),
        ("batchnorm_train", |r| bn_case(r, BnMode::Train)),
        ("batchnorm_eval", |r| bn_case(r, BnMode::Eval)),
        ("relu", relu_case),
        ("maxpool2x2", maxpool_case),
        ("global_avgpool", gap_case),
        ("dense", dense_case),
        ("elementwise_add", add_case),
        ("softmax_cross_entropy", ce_case),
    ];
    ops.iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 * i as u64));
            let mut check = GradCheck {
                op: name,
                trials,
                worst_f32: 0.0,
                worst_f64: 0.0,
            };
            for _ in 0..trials {
                record(&mut check, case(&mut rng));
            }
            check
        })
        .collect()
}

/// Worst elementwise relative error of [`conv2d`] against [`naive_conv2d`]
/// over `trials` random shapes (f64 arithmetic).
pub fn conv_oracle_suite(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let (n, c, o, h, k, stride, pad) = if t == 0 {
            (1, 2, 3, 5, 3, 1, 1)
        } else {
            (
                rng.random_range(1..3),
                rng.random_range(1..5),
                rng.random_range(1..5),
                rng.random_range(3..9),
                [1, 3, 5][rng.random_range(0..3)],
                rng.random_range(1..3),
                rng.random_range(0..3),
            )
        };
        if h + 2 * pad < k {
            continue;
        }
        let (xs, ws) = ([n, c, h, h], [o, c, k, k]);
        let x = randn(&mut rng, xs.iter().product());
        let w = randn(&mut rng, ws.iter().product());
        let b = randn(&mut rng, o);
        let (expect, os) = naive_conv2d(&x, xs, &w, ws, &b, stride, pad);
        let got = conv2d(&t64(&xs, &x), &t64(&ws, &w), &t64(&[o], &b), Conv2dSpec { stride, padding: pad }).unwrap();
        assert_eq!(got.shape(), os);
        for (g, e) in got.data().iter().zip(&expect) {
            let denom = e.abs().max(1e-12);
            // absolute floor for values that cancel to ~0
            let err = if e.abs() < 1e-9 { (g - e).abs() } else { (g - e).abs() / denom };
            worst = worst.max(err);
        }
    }
    worst
}

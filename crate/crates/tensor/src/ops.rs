use crate::error::{shape_err, Result, TensorError};
use crate::gemm::gemm;
use crate::{Real, Tensor};

pub fn relu<F: Real>(input: &Tensor<F>) -> Tensor<F> {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > F::ZERO { v } else { F::ZERO })
        .collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

/// Gradient of [`relu`] given its input.
pub fn relu_backward<F: Real>(input: &Tensor<F>, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
    if input.shape() != grad_out.shape() {
        return shape_err("relu_backward", format!("{:?} vs {:?}", input.shape(), grad_out.shape()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > F::ZERO { g } else { F::ZERO })
        .collect();
    Tensor::new(input.shape(), data)
}

#[derive(Debug, Clone)]
pub struct MaxPoolOutput<F: Real> {
    pub output: Tensor<F>,
    /// Flat input index of the maximum for every output element.
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn maxpool2x2<F: Real>(input: &Tensor<F>) -> Result<MaxPoolOutput<F>> {
    let s = input.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return shape_err("maxpool2x2", format!("needs NCHW with H,W >= 2, got {s:?}"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::new(&[n, c, oh, ow], out)?,
        argmax,
    })
}

pub fn maxpool2x2_backward<F: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<F>,
) -> Result<Tensor<F>> {
    if argmax.len() != grad_out.len() {
        return shape_err("maxpool2x2_backward", "argmax and gradient lengths differ");
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

/// Mean over spatial axes: NCHW -> NC.
pub fn global_avgpool<F: Real>(input: &Tensor<F>) -> Result<Tensor<F>> {
    let s = input.shape();
    if s.len() != 4 {
        return shape_err("global_avgpool", format!("needs NCHW, got {s:?}"));
    }
    let inner = s[2] * s[3];
    let scale = F::ONE / F::from_usize(inner);
    let data = input
        .data()
        .chunks(inner)
        .map(|plane| plane.iter().copied().sum::<F>() * scale)
        .collect();
    Tensor::new(&[s[0], s[1]], data)
}

pub fn global_avgpool_backward<F: Real>(input_shape: &[usize], grad_out: &Tensor<F>) -> Result<Tensor<F>> {
    if input_shape.len() != 4 || grad_out.shape() != [input_shape[0], input_shape[1]] {
        return shape_err(
            "global_avgpool_backward",
            format!("grad {:?} for input {input_shape:?}", grad_out.shape()),
        );
    }
    let inner = input_shape[2] * input_shape[3];
    let scale = F::ONE / F::from_usize(inner);
    let mut data = Vec::with_capacity(grad_out.len() * inner);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * scale, inner));
    }
    Tensor::new(input_shape, data)
}

fn dense_dims<F: Real>(input: &Tensor<F>, weight: &Tensor<F>) -> Result<(usize, usize, usize)> {
    if weight.shape().len() != 2 {
        return shape_err("dense", format!("weight must be [out, in], got {:?}", weight.shape()));
    }
    let n = input.dim(0);
    let features = input.len() / n;
    let (out, inp) = (weight.dim(0), weight.dim(1));
    if features != inp {
        return shape_err("dense", format!("input has {features} features, weight expects {inp}"));
    }
    Ok((n, inp, out))
}

/// Fully connected layer; inputs are flattened past the batch axis.
pub fn dense<F: Real>(input: &Tensor<F>, weight: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, inp, out) = dense_dims(input, weight)?;
    if bias.len() != out {
        return shape_err("dense", format!("bias has {} entries for {out} outputs", bias.len()));
    }
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(bias.data());
    }
    gemm(n, inp, out, input.data(), false, weight.data(), true, &mut y, true);
    Tensor::new(&[n, out], y)
}

#[derive(Debug, Clone)]
pub struct DenseGrads<F: Real> {
    pub input: Tensor<F>,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

pub fn dense_backward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> Result<DenseGrads<F>> {
    let (n, inp, out) = dense_dims(input, weight)?;
    if grad_out.shape() != [n, out] {
        return shape_err("dense_backward", format!("grad {:?} vs [{n}, {out}]", grad_out.shape()));
    }
    let mut dx = vec![F::ZERO; n * inp];
    gemm(n, out, inp, grad_out.data(), false, weight.data(), false, &mut dx, false);
    let mut dw = vec![F::ZERO; out * inp];
    gemm(out, n, inp, grad_out.data(), true, input.data(), false, &mut dw, false);
    let mut db = vec![F::ZERO; out];
    for row in grad_out.data().chunks(out) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(input.shape(), dx)?,
        weight: dw,
        bias: db,
    })
}

/// Elementwise sum of two identically shaped tensors. Its gradient passes
/// unchanged to both operands.
pub fn elementwise_add<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return shape_err("elementwise_add", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

/// Mean softmax cross-entropy over the batch, returned with its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Result<(F, Tensor<F>)> {
    if logits.shape().len() != 2 {
        return shape_err("softmax_cross_entropy", format!("logits must be [N, K], got {:?}", logits.shape()));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return shape_err("softmax_cross_entropy", format!("{} labels for {n} rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::InvalidArgument {
            op: "softmax_cross_entropy",
            detail: format!("label {bad} out of {k} classes"),
        });
    }
    let inv_n = F::ONE / F::from_usize(n);
    let mut loss = F::ZERO;
    let mut grad = Vec::with_capacity(n * k);
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(row[0], F::max);
        let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: F = exps.iter().copied().sum();
        loss += total.ln() - (row[label] - max);
        for (j, e) in exps.iter().enumerate() {
            let p = *e / total;
            let t = if j == label { F::ONE } else { F::ZERO };
            grad.push((p - t) * inv_n);
        }
    }
    Ok((loss * inv_n, Tensor::new(&[n, k], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        let x = Tensor::<f32>::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let a = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 1.7 - 3.1);
        let z = Tensor::zeros(&[2, 3]);
        assert_eq!(elementwise_add(&a, &z).unwrap(), a);
        assert!(elementwise_add(&a, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::<f64>::full(&[3, 10], 0.7);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn maxpool_picks_maximum() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 3], vec![1.0, 5.0, 9.0, 3.0, 2.0, 0.0]).unwrap();
        let out = maxpool2x2(&x).unwrap();
        assert_eq!(out.output.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.output.data(), &[5.0]);
        assert_eq!(out.argmax, vec![1]);
    }

    #[test]
    fn dense_uniform_weights_on_one_hot() {
        let x = Tensor::<f32>::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let w = Tensor::full(&[2, 3], 0.5);
        let b = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        assert_eq!(dense(&x, &w, &b).unwrap().data(), &[1.5, -0.5]);
    }

    #[test]
    fn bad_label_rejected() {
        let logits = Tensor::<f32>::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }
}

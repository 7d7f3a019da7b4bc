use crate::error::{shape_err, Result};
use crate::gemm::gemm;
use crate::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<F: Real> {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor<F>>,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn geometry<F: Real>(input: &Tensor<F>, weight: &Tensor<F>, spec: Conv2dSpec) -> Result<Geometry> {
    if input.shape().len() != 4 || weight.shape().len() != 4 {
        return shape_err(
            "conv2d",
            format!("expected NCHW input and OIHW weight, got {:?} and {:?}", input.shape(), weight.shape()),
        );
    }
    let [n, c, h, w] = [input.dim(0), input.dim(1), input.dim(2), input.dim(3)];
    let [o, i, kh, kw] = [weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3)];
    if i != c {
        return shape_err("conv2d", format!("input has {c} channels but weight expects {i}"));
    }
    if kh != kw {
        return shape_err("conv2d", format!("non-square kernel {kh}x{kw}"));
    }
    if spec.stride == 0 {
        return shape_err("conv2d", "stride must be >= 1");
    }
    let (Some(oh), Some(ow)) = (
        conv_output_dim(h, kh, spec.stride, spec.padding),
        conv_output_dim(w, kw, spec.stride, spec.padding),
    ) else {
        return shape_err("conv2d", format!("kernel {kh} larger than padded input {h}x{w}"));
    };
    Ok(Geometry {
        n,
        c,
        h,
        w,
        o,
        k: kh,
        oh,
        ow,
        stride: spec.stride,
        pad: spec.padding,
    })
}

fn im2col<F: Real>(g: &Geometry, x: &[F], cols: &mut [F]) {
    let p = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                    if ih < 0 || ih >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = F::ZERO);
                        continue;
                    }
                    let src = &x[(c * g.h + ih as usize) * g.w..][..g.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize {
                            F::ZERO
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(g: &Geometry, cols: &[F], dx: &mut [F]) {
    let p = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + ih as usize) * g.w..][..g.w];
                    for ow in 0..g.ow {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.ow + ow];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of an NCHW input with an OIHW weight.
pub fn conv2d<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    spec: Conv2dSpec,
) -> Result<Tensor<F>> {
    let g = geometry(input, weight, spec)?;
    if bias.len() != g.o {
        return shape_err("conv2d", format!("bias has {} entries for {} filters", bias.len(), g.o));
    }
    let (rows, p) = (g.rows(), g.cols());
    let in_stride = g.c * g.h * g.w;
    let mut cols = vec![F::ZERO; rows * p];
    let mut out = vec![F::ZERO; g.n * g.o * p];
    for s in 0..g.n {
        im2col(&g, &input.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        let dst = &mut out[s * g.o * p..(s + 1) * g.o * p];
        for (o, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias.data()[o]);
        }
        gemm(g.o, rows, p, weight.data(), false, &cols, false, dst, true);
    }
    Tensor::new(&[g.n, g.o, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    spec: Conv2dSpec,
    need_input_grad: bool,
) -> Result<Conv2dGrads<F>> {
    let g = geometry(input, weight, spec)?;
    if grad_out.shape() != [g.n, g.o, g.oh, g.ow] {
        return shape_err(
            "conv2d_backward",
            format!("grad {:?} vs output {:?}", grad_out.shape(), [g.n, g.o, g.oh, g.ow]),
        );
    }
    let (rows, p) = (g.rows(), g.cols());
    let in_stride = g.c * g.h * g.w;
    let mut cols = vec![F::ZERO; rows * p];
    let mut dcols = vec![F::ZERO; rows * p];
    let mut dw = vec![F::ZERO; weight.len()];
    let mut db = vec![F::ZERO; g.o];
    let mut dx = need_input_grad.then(|| vec![F::ZERO; input.len()]);
    for s in 0..g.n {
        let go = &grad_out.data()[s * g.o * p..(s + 1) * g.o * p];
        im2col(&g, &input.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        gemm(g.o, p, rows, go, false, &cols, true, &mut dw, true);
        for (o, chunk) in go.chunks(p).enumerate() {
            db[o] += chunk.iter().copied().sum::<F>();
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, g.o, p, weight.data(), true, go, false, &mut dcols, false);
            col2im(&g, &dcols, &mut dx[s * in_stride..(s + 1) * in_stride]);
        }
    }
    Ok(Conv2dGrads {
        input: dx.map(|d| Tensor::new(input.shape(), d)).transpose()?,
        weight: dw,
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::<f32>::zeros(&[1]);
        let y = conv2d(&x, &w, &b, Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn zero_weight_annihilates() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 5, 5], |i| (i as f32).sin());
        let w = Tensor::<f32>::zeros(&[4, 3, 3, 3]);
        let b = Tensor::<f32>::zeros(&[4]);
        let y = conv2d(&x, &w, &b, Conv2dSpec { stride: 2, padding: 1 }).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1]);
        let err = conv2d(&x, &w, &b, Conv2dSpec::default()).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn output_dims() {
        assert_eq!(conv_output_dim(28, 3, 1, 1), Some(28));
        assert_eq!(conv_output_dim(5, 3, 2, 0), Some(2));
        assert_eq!(conv_output_dim(2, 5, 1, 0), None);
    }
}

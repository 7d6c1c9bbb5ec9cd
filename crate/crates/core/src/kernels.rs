//! Numerically stable scalar kernels and the temporal convolution shared by
//! the differentiable tape and by direct (non-tape) callers.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Softmax with max-subtraction.
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_binary_label<T: Scalar>(label: T) -> Result<()> {
    if label == T::zero() || label == T::one() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "binary label must be 0 or 1, got {label}"
        )))
    }
}

/// Binary cross-entropy on a logit: `-[l log σ(z) + (1-l) log(1-σ(z))]`.
pub fn bce_with_logits<T: Scalar>(logit: T, label: T) -> Result<T> {
    check_binary_label(label)?;
    if !logit.is_finite() {
        return Err(Error::NonFinite("logit".into()));
    }
    // -log σ(z) = softplus(-z), -log(1-σ(z)) = softplus(z)
    Ok(label * softplus(-logit) + (T::one() - label) * softplus(logit))
}

/// Gradient of [`bce_with_logits`] with respect to the logit.
pub fn bce_with_logits_grad<T: Scalar>(logit: T, label: T) -> Result<T> {
    check_binary_label(label)?;
    Ok(sigmoid(logit) - label)
}

/// `-log softmax(logits)[class]`.
pub fn cross_entropy<T: Scalar>(logits: &[T], class: usize) -> Result<T> {
    if class >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &z in logits {
        sum += (z - max).exp();
    }
    Ok(max + sum.ln() - logits[class])
}

/// Gradient of [`cross_entropy`]: `softmax(logits) - onehot(class)`.
pub fn cross_entropy_grad<T: Scalar>(logits: &[T], class: usize) -> Result<Vec<T>> {
    if class >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    let mut p = softmax(logits)?;
    p[class] -= T::one();
    Ok(p)
}

/// Geometry of a temporal convolution over `rows` independent sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub rows: usize,
    pub steps: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub taps: usize,
    pub stride: usize,
}

impl ConvDims {
    pub fn pad(&self) -> usize {
        (self.taps - 1) / 2
    }

    pub fn out_steps(&self) -> usize {
        self.steps.div_ceil(self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "temporal kernel size must be odd, got {}",
                self.taps
            )));
        }
        if self.stride < 1 {
            return Err(Error::InvalidArgument("temporal stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Unfolds `[rows, steps, c_in]` into `[rows * out_steps, taps * c_in]`
/// with zero padding.
pub(crate) fn im2col<T: Scalar>(x: &[T], d: &ConvDims) -> Vec<T> {
    let so = d.out_steps();
    let width = d.taps * d.c_in;
    let pad = d.pad() as isize;
    let mut cols = vec![T::zero(); d.rows * so * width];
    for r in 0..d.rows {
        let seq = &x[r * d.steps * d.c_in..(r + 1) * d.steps * d.c_in];
        for o in 0..so {
            let row = &mut cols[(r * so + o) * width..(r * so + o + 1) * width];
            for j in 0..d.taps {
                let t = (o * d.stride) as isize - pad + j as isize;
                if t >= 0 && (t as usize) < d.steps {
                    let t = t as usize;
                    row[j * d.c_in..(j + 1) * d.c_in]
                        .copy_from_slice(&seq[t * d.c_in..(t + 1) * d.c_in]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back to the input.
pub(crate) fn col2im<T: Scalar>(cols: &[T], d: &ConvDims) -> Vec<T> {
    let so = d.out_steps();
    let width = d.taps * d.c_in;
    let pad = d.pad() as isize;
    let mut x = vec![T::zero(); d.rows * d.steps * d.c_in];
    for r in 0..d.rows {
        let seq = &mut x[r * d.steps * d.c_in..(r + 1) * d.steps * d.c_in];
        for o in 0..so {
            let row = &cols[(r * so + o) * width..(r * so + o + 1) * width];
            for j in 0..d.taps {
                let t = (o * d.stride) as isize - pad + j as isize;
                if t >= 0 && (t as usize) < d.steps {
                    let t = t as usize;
                    for (dst, &src) in seq[t * d.c_in..(t + 1) * d.c_in]
                        .iter_mut()
                        .zip(&row[j * d.c_in..(j + 1) * d.c_in])
                    {
                        *dst += src;
                    }
                }
            }
        }
    }
    x
}

/// Forward pass returning `(output, unfolded input)`.
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
) -> (Vec<T>, Vec<T>) {
    let so = d.out_steps();
    let m = d.rows * so;
    let cols = if d.taps == 1 && d.stride == 1 {
        x.to_vec()
    } else {
        im2col(x, d)
    };
    let mut out = vec![T::zero(); m * d.c_out];
    if let Some(b) = bias {
        for row in out.chunks_mut(d.c_out) {
            row.copy_from_slice(b);
        }
    }
    gemm(
        m,
        d.taps * d.c_in,
        d.c_out,
        &cols,
        false,
        kernel,
        false,
        &mut out,
        bias.is_some(),
    );
    (out, cols)
}

/// Convolves every node's channel sequence along time with the same kernel.
///
/// `f` is `[N, S, C_in]`, `kernel` is `[k, C_in, C_out]`; zero padding of
/// `(k-1)/2` on both ends gives `S' = ceil(S / stride)` output steps.
pub fn temporal_conv1d<T: Scalar>(
    f: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
) -> Result<Tensor<T>> {
    if f.rank() != 3 || kernel.rank() != 3 {
        return Err(Error::Shape(format!(
            "temporal_conv1d expects [N,S,C_in] and [k,C_in,C_out], got {:?} and {:?}",
            f.shape(),
            kernel.shape()
        )));
    }
    let d = ConvDims {
        rows: f.shape()[0],
        steps: f.shape()[1],
        c_in: f.shape()[2],
        c_out: kernel.shape()[2],
        taps: kernel.shape()[0],
        stride,
    };
    d.validate()?;
    if kernel.shape()[1] != d.c_in {
        return Err(Error::Shape(format!(
            "kernel input channels {} != feature channels {}",
            kernel.shape()[1],
            d.c_in
        )));
    }
    if let Some(b) = bias {
        if b.len() != d.c_out {
            return Err(Error::Shape(format!(
                "bias length {} != output channels {}",
                b.len(),
                d.c_out
            )));
        }
    }
    let (out, _) = conv_forward(f.data(), kernel.data(), bias, &d);
    Tensor::new(vec![d.rows, d.out_steps(), d.c_out], out)
}

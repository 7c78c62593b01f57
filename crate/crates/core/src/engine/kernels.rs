//! Value-level kernels shared by the recorded ops and by callers that only
//! need forward values.

use super::{EngineError, Real, Tensor};

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: Real = 0.044_715;

/// Softmax over the permitted entries of `logits`; forbidden entries are exactly 0.
pub fn masked_softmax(logits: &Tensor, permit: &[bool]) -> Result<Tensor, EngineError> {
    assert_eq!(logits.len(), permit.len(), "permit length must match logits");
    let mut out = vec![0.0; logits.len()];
    softmax_row(logits.data(), permit, &mut out).map_err(|()| EngineError::EmptyAttentionRow { row: 0 })?;
    Ok(Tensor::new(logits.shape().to_vec(), out))
}

/// Row-wise `gain * (x - mean) / sqrt(var + eps) + bias` with population variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: Real) -> Tensor {
    let (rows, cols) = x.dims2();
    let mut out = vec![0.0; rows * cols];
    let mut xhat = vec![0.0; rows * cols];
    let mut inv = vec![0.0; rows];
    layer_norm_forward(x.data(), cols, gain.data(), bias.data(), eps, &mut out, &mut xhat, &mut inv);
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_row(logits: &[Real], permit: &[bool], out: &mut [Real]) -> Result<(), ()> {
    let mut max = Real::NEG_INFINITY;
    for (&l, &p) in logits.iter().zip(permit) {
        if p && l > max {
            max = l;
        }
    }
    if max == Real::NEG_INFINITY {
        return Err(());
    }
    let mut total = 0.0;
    for ((o, &l), &p) in out.iter_mut().zip(logits).zip(permit) {
        if p {
            let e = (l - max).exp();
            *o = e;
            total += e;
        } else {
            *o = 0.0;
        }
    }
    let inv = 1.0 / total;
    for (o, &p) in out.iter_mut().zip(permit) {
        if p {
            *o *= inv;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_forward(
    x: &[Real],
    cols: usize,
    gain: &[Real],
    bias: &[Real],
    eps: Real,
    out: &mut [Real],
    xhat: &mut [Real],
    inv_std: &mut [Real],
) {
    assert_eq!(gain.len(), cols);
    assert_eq!(bias.len(), cols);
    for (r, row) in x.chunks_exact(cols).enumerate() {
        let mean = row.iter().sum::<Real>() / cols as Real;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / cols as Real;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        let base = r * cols;
        for c in 0..cols {
            let h = (row[c] - mean) * inv;
            xhat[base + c] = h;
            out[base + c] = gain[c] * h + bias[c];
        }
    }
}

pub(crate) fn gelu(x: Real) -> Real {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

pub(crate) fn gelu_grad(x: Real) -> Real {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rotates interleaved pairs inside each head slice by `position * base^(-2i/head_dim)`.
/// `sign = -1` applies the inverse rotation.
pub(crate) fn rope_apply(
    x: &[Real],
    cols: usize,
    positions: &[usize],
    heads: usize,
    base: Real,
    sign: Real,
    out: &mut [Real],
) {
    let head_dim = cols / heads;
    let half = head_dim / 2;
    let freqs: Vec<Real> = (0..half)
        .map(|i| base.powf(-((2 * i) as Real) / head_dim as Real))
        .collect();
    for (r, &pos) in positions.iter().enumerate() {
        let row = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        for (i, f) in freqs.iter().enumerate() {
            let angle = pos as Real * f;
            let (s, c) = (sign * angle).sin_cos();
            for h in 0..heads {
                let a = h * head_dim + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                dst[a] = x0 * c - x1 * s;
                dst[a + 1] = x0 * s + x1 * c;
            }
        }
        if head_dim % 2 == 1 {
            for h in 0..heads {
                let a = h * head_dim + head_dim - 1;
                dst[a] = row[a];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_with_masked_tail() {
        let y = masked_softmax(&Tensor::vector(vec![0.0, 0.0, 123.0]), &[true, true, false]).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn softmax_of_one_two_three() {
        let y = masked_softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]), &[true; 3]).unwrap();
        let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((y.data().iter().sum::<Real>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_singleton_is_one() {
        for x in [-1e3, 0.0, 7.5, 1e3] {
            let y = masked_softmax(&Tensor::vector(vec![x]), &[true]).unwrap();
            assert_eq!(y.data(), &[1.0]);
        }
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let err = masked_softmax(&Tensor::vector(vec![1.0, 2.0]), &[false, false]).unwrap_err();
        assert_eq!(err.to_string(), "empty attention row (row 0)");
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::vector(vec![1.0; 3]);
        let zero = Tensor::vector(vec![0.0; 3]);
        let y = layer_norm(&Tensor::vector(vec![4.0; 3]), &one, &zero, 1e-5);
        assert!(y.data().iter().all(|v| *v == 0.0));

        let y = layer_norm(
            &Tensor::vector(vec![-1.0, 1.0]),
            &Tensor::vector(vec![1.0; 2]),
            &Tensor::vector(vec![0.0; 2]),
            1e-12,
        );
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        // mean 2, population std sqrt(8/3)
        let y = layer_norm(&Tensor::vector(vec![0.0, 2.0, 4.0]), &one, &zero, 0.0);
        let s = (8.0 as Real / 3.0).sqrt();
        let want = [-2.0 / s, 0.0, 2.0 / s];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((y.data()[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - (2.0 as Real).ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(-10.0) - 4.539_889e-5).abs() < 1e-10);
    }

    #[test]
    fn rope_round_trips() {
        let x: Vec<Real> = (0..24).map(|v| (v as Real * 0.37).cos()).collect();
        let pos = [0, 3, 7];
        let mut y = vec![0.0; 24];
        let mut back = vec![0.0; 24];
        rope_apply(&x, 8, &pos, 2, 10_000.0, 1.0, &mut y);
        rope_apply(&y, 8, &pos, 2, 10_000.0, -1.0, &mut back);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        // position 0 is the identity
        assert_eq!(&y[..8], &x[..8]);
    }
}

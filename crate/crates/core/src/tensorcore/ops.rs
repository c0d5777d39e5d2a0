use crate::error::{Error, Result};
use crate::tensorcore::Matrix;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput("softmax input".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Unchecked variant used on hot paths whose inputs are already validated.
#[inline]
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Backward pass of softmax: given `p = softmax(g)` and `dL/dp`, returns `dL/dg`.
#[inline]
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - inner)).collect()
}

/// `W·x + b`.
pub fn affine(x: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() || w.rows() != b.len() {
        return Err(Error::shape(format!(
            "affine with W {:?}, x [{}], b [{}]",
            w.shape(),
            x.len(),
            b.len()
        )));
    }
    let mut out = vec![0.0; w.rows()];
    affine_into(x, w, b, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn affine_into(x: &[f64], w: &Matrix, b: &[f64], out: &mut [f64]) {
    w.matvec_into(x, out);
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Elementwise expert activation.
pub fn activation(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("activation input".into()));
    }
    Ok(x.iter().map(|&v| gelu(v)).collect())
}

/// Layer-norm statistics retained for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: f64,
}

/// `gain ⊙ (x − mean) / sqrt(var + eps) + bias` with population variance.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let normalized: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let out = normalized
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(xh, (g, b))| g * xh + b)
        .collect();
    (out, LayerNormCache { normalized, inv_std })
}

/// Returns `dL/dx`; accumulates into the gain and bias gradients.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    grad_out: &[f64],
    grad_gain: &mut [f64],
    grad_bias: &mut [f64],
) -> Vec<f64> {
    let n = grad_out.len() as f64;
    let mut g_hat = vec![0.0; grad_out.len()];
    for i in 0..grad_out.len() {
        grad_gain[i] += grad_out[i] * cache.normalized[i];
        grad_bias[i] += grad_out[i];
        g_hat[i] = grad_out[i] * gain[i];
    }
    let mean_g = g_hat.iter().sum::<f64>() / n;
    let mean_gx = g_hat
        .iter()
        .zip(&cache.normalized)
        .map(|(g, x)| g * x)
        .sum::<f64>()
        / n;
    g_hat
        .iter()
        .zip(&cache.normalized)
        .map(|(g, x)| cache.inv_std * (g - mean_g - x * mean_gx))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for p in u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax(&[]), Err(Error::InvalidShape(_))));
        assert!(matches!(
            softmax(&[0.0, f64::NAN]),
            Err(Error::NonFiniteInput(_))
        ));
        assert!(matches!(
            softmax(&[f64::INFINITY]),
            Err(Error::NonFiniteInput(_))
        ));
    }

    #[test]
    fn affine_examples() {
        let x = affine(&[3.0, -1.0], &Matrix::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(x, vec![3.0, -1.0]);
        let w = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        assert_eq!(affine(&[2.0, 3.0], &w, &[1.0]).unwrap(), vec![6.0]);
        let z = affine(&[0.3, -8.1], &Matrix::zeros(2, 2), &[5.0, 7.0]).unwrap();
        assert_eq!(z, vec![5.0, 7.0]);
        assert!(affine(&[1.0], &w, &[1.0]).is_err());
        assert!(affine(&[1.0, 2.0], &w, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu(-10.0).abs() < 1e-6);
        assert!(activation(&[f64::NAN]).is_err());
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn constant_row_normalizes_to_bias() {
        let (out, _) = layer_norm(&[2.0; 4], &[1.0; 4], &[0.0; 4], 1e-5);
        assert_eq!(out, vec![0.0; 4]);
    }
}

use crate::error::Result;
use crate::tensor::Tensor;

/// Central differences `(f(x + h e_k) - f(x - h e_k)) / 2h`, one coordinate
/// at a time.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for k in 0..x.numel() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Relative disagreement between an analytic and a numeric gradient:
/// `max_k |a_k - n_k| / max(|a|_inf, |n|_inf)`. When both gradients are
/// below `1e-8` everywhere the absolute difference is returned instead.
pub fn gradient_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

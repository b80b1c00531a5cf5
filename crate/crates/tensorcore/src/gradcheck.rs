use crate::tensor::Tensor;

pub const FD_DEFAULT_STEP: f64 = 1e-4;

/// Central-difference gradient of a deterministic scalar function:
/// `(f(x + h*e_i) - f(x - h*e_i)) / 2h` per element.
///
/// This is the independent oracle the analytic backward passes are checked
/// against; it never touches any backward code path.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let fp = f(&Tensor::from_vec(x.shape().to_vec(), plus).expect("shape"));
        let fm = f(&Tensor::from_vec(x.shape().to_vec(), minus).expect("shape"));
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::from_vec(x.shape().to_vec(), grad).expect("shape")
}

/// Largest normalized deviation between an analytic and a numeric gradient:
/// `|a - n| / max(1, |a|, |n|)` over all elements.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let f = |x: &Tensor| x.data()[0] * x.data()[0];
        let g = finite_diff_grad(f, &Tensor::scalar(3.0), FD_DEFAULT_STEP);
        assert!((g.data()[0] - 6.0).abs() < 1e-4);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let f = |_: &Tensor| 42.0;
        let g = finite_diff_grad(f, &Tensor::full([3, 2], 1.5), FD_DEFAULT_STEP);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

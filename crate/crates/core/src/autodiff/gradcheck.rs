use crate::tensor::{Real, Tensor};

/// Central-difference estimate of the gradient of a scalar function.
///
/// Coordinate `i` of the result is `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
/// Shares no code with the tape, so it serves as the reference for every
/// gradient test.
pub fn finite_difference_gradient<T, F>(f: F, x: &Tensor<T>, eps: T) -> Tensor<T>
where
    T: Real,
    F: Fn(&Tensor<T>) -> T,
{
    assert!(eps > T::zero(), "eps must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (eps + eps));
    }
    Tensor::new(x.shape(), grad).expect("same shape as input")
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute norm of the difference
/// when both vectors are below `floor`.
pub fn relative_error<T: Real>(a: &[T], b: &[T], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |xs: &mut dyn Iterator<Item = f64>| xs.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x.f64() - y.f64()));
    let scale = norm(&mut a.iter().map(|x| x.f64())).max(norm(&mut b.iter().map(|x| x.f64())));
    diff / scale.max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_all_ones_gradient() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 4.0, 0.0, 1.5]).unwrap();
        let g = finite_difference_gradient(|t: &Tensor<f64>| t.data().iter().sum(), &x, 1e-6);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn product_rule() {
        let x = Tensor::new(&[2], vec![2.0, 3.0]).unwrap();
        let g = finite_difference_gradient(|t: &Tensor<f64>| t.data()[0] * t.data()[1], &x, 1e-6);
        assert!((g.data()[0] - 3.0).abs() < 1e-6);
        assert!((g.data()[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[1.0f64, 0.0], &[1.0, 0.0], 1e-12), 0.0);
        assert!((relative_error(&[2.0f64], &[1.0], 1e-12) - 0.5).abs() < 1e-15);
        assert!(relative_error(&[1e-20f64], &[0.0], 1e-8) < 1e-11);
    }
}

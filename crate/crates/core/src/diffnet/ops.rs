use super::tensor::{dot, Scalar, Tensor2};
use crate::error::{Error, Result};

fn check_temperature<T: Scalar>(temperature: T) -> Result<()> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::invalid(format!("softmax temperature must be positive, got {:?}", temperature)));
    }
    Ok(())
}

/// Row-wise `softmax(x / temperature)` with max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Tensor2<T>, temperature: T) -> Result<Tensor2<T>> {
    check_temperature(temperature)?;
    let mut out = m.clone();
    let cols = m.cols();
    if cols == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// Row-wise `log_softmax(x / temperature)`.
pub fn log_softmax_rows<T: Scalar>(m: &Tensor2<T>, temperature: T) -> Result<Tensor2<T>> {
    check_temperature(temperature)?;
    let mut out = m.clone();
    let cols = m.cols();
    if cols == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = row.iter().map(|&v| ((v - max) / temperature).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v = (*v - max) / temperature - lse;
        }
    }
    Ok(out)
}

/// Rows scaled to unit ℓ₂ norm, plus the original norms for the backward pass.
pub fn l2_normalize_rows<T: Scalar>(m: &Tensor2<T>) -> Result<(Tensor2<T>, Vec<T>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    let cols = m.cols();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let n = dot(row, row).sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            return Err(Error::numeric(format!("cannot normalize row {r} with norm {:?}", n)));
        }
        for v in row.iter_mut() {
            *v = *v / n;
        }
        norms.push(n);
    }
    debug_assert_eq!(out.cols(), cols);
    Ok((out, norms))
}

/// Backward of [`l2_normalize_rows`]: `g_in = (g - e (e·g)) / ‖u‖`.
pub fn l2_normalize_rows_backward<T: Scalar>(
    normalized: &Tensor2<T>,
    norms: &[T],
    upstream: &Tensor2<T>,
) -> Result<Tensor2<T>> {
    if normalized.shape() != upstream.shape() || norms.len() != normalized.rows() {
        return Err(Error::shape("normalize backward: mismatched shapes"));
    }
    let mut out = upstream.clone();
    for r in 0..out.rows() {
        let e = normalized.row(r);
        let proj = dot(e, upstream.row(r));
        let n = norms[r];
        for (g, &ev) in out.row_mut(r).iter_mut().zip(e) {
            *g = (*g - ev * proj) / n;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::gradcheck::{central_difference, relative_error};
    use proptest::prelude::*;

    #[test]
    fn constant_row_is_uniform() {
        let m = Tensor2::<f64>::from_vec(1, 4, vec![2.0; 4]).unwrap();
        let s = softmax_rows(&m, 0.3).unwrap();
        assert!(s.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn small_temperature_approaches_one_hot() {
        let m = Tensor2::<f64>::from_vec(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let s = softmax_rows(&m, 0.01).unwrap();
        assert!(s.get(0, 1) > 1.0 - 1e-12);
        assert!(s.get(0, 0) < 1e-40);
    }

    #[test]
    fn reference_three_vector() {
        let m = Tensor2::<f64>::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmax_rows(&m, 1.0).unwrap();
        // direct evaluation: e^k / (e + e^2 + e^3)
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        for k in 0..3 {
            assert!((s.get(0, k) - ((k + 1) as f64).exp() / z).abs() < 1e-15);
        }
        assert!((s.get(0, 0) - 0.09003).abs() < 1e-5);
        assert!((s.get(0, 1) - 0.24473).abs() < 1e-5);
        assert!((s.get(0, 2) - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let m = Tensor2::<f32>::zeros(1, 2);
        assert!(softmax_rows(&m, 0.0).is_err());
        assert!(softmax_rows(&m, -1.0).is_err());
        assert!(log_softmax_rows(&m, f32::NAN).is_err());
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_and_shift_invariant(
            vals in prop::collection::vec(-30.0f64..30.0, 12),
            shift in -100.0f64..100.0,
            tau in 0.05f64..5.0,
        ) {
            let m = Tensor2::from_vec(3, 4, vals).unwrap();
            let s = softmax_rows(&m, tau).unwrap();
            for row in s.row_iter() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let shifted = m.map(|v| v + shift);
            let s2 = softmax_rows(&shifted, tau).unwrap();
            for (a, b) in s.data().iter().zip(s2.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let ls = log_softmax_rows(&m, tau).unwrap();
            for (a, b) in s.data().iter().zip(ls.data()) {
                prop_assert!((a.ln() - b).abs() < 1e-9 || *a < 1e-300);
            }
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let u = Tensor2::<f64>::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 * 0.7).sin() + 0.1);
        let c = Tensor2::<f64>::from_fn(3, 4, |r, c| ((r + c) as f64 * 1.1).cos());
        let (e, n) = l2_normalize_rows(&u).unwrap();
        let g = l2_normalize_rows_backward(&e, &n, &c).unwrap();
        let num = central_difference(
            |p| {
                let (e, _) = l2_normalize_rows(&Tensor2::from_vec(3, 4, p.to_vec()).unwrap()).unwrap();
                e.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
            },
            u.data(),
            1e-6,
        );
        assert!(relative_error(g.data(), &num) < 1e-7);
        for row in e.row_iter() {
            assert!((dot(row, row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_row_cannot_be_normalized() {
        assert!(l2_normalize_rows(&Tensor2::<f32>::zeros(1, 3)).is_err());
    }
}

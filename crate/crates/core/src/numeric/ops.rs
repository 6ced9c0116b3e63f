//! Vector primitives used by both the inference path and the tape.

use crate::error::{Error, Result};
use crate::scalar::{norm, Scalar};

/// Norms at or below this are treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;

pub fn l2_normalize<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    let n = norm(x);
    if !(n > T::of(NORM_FLOOR)) {
        return Err(Error::ZeroNorm);
    }
    Ok(x.iter().map(|&v| v / n).collect())
}

/// Max-subtracted softmax.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    x.iter().map(|&v| v - lse).collect()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn relu<T: Scalar>(x: T) -> T {
    x.max(T::zero())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6f64).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert!(matches!(l2_normalize(&[0.0f64, 0.0]), Err(Error::ZeroNorm)));
        assert!(matches!(l2_normalize(&[1e-13f64]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_gap_does_not_overflow() {
        // exact: p0 = e^-1000 / (1 + e^-1000), so ln p0 = -1000 - ln(1 + e^-1000) = -1000 in f64
        let c = 12.5f64;
        let p = softmax(&[c, c + 1000.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(p[0] < 1e-300);
        assert_eq!(p[1], 1.0);
        let lp = log_softmax(&[c, c + 1000.0]);
        assert!((lp[0] + 1000.0).abs() < 1e-9);
        assert!(lp[1].abs() < 1e-300);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        let hi = sigmoid(50.0f64);
        assert!(hi.is_finite() && 1.0 - hi < 1e-20);
        // relative accuracy in the far tail
        let lo = sigmoid(-50.0f64);
        assert!((lo / (-50.0f64).exp() - 1.0).abs() < 1e-12);
        assert!(sigmoid(700.0f64).is_finite() && sigmoid(-700.0f64) > 0.0);
    }

    #[test]
    fn softplus_matches_log1p_exp() {
        for &x in &[-30.0f64, -1.0, 0.0, 0.5, 20.0] {
            assert!((softplus(x) - (1.0 + x.exp()).ln()).abs() < 1e-12);
        }
        assert!((softplus(800.0f64) - 800.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(xs in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let a = softmax(&xs);
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = softmax(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn sigmoid_symmetry(x in -700.0f64..700.0) {
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }

        #[test]
        fn normalized_has_unit_norm(xs in prop::collection::vec(-10.0f64..10.0, 1..16)) {
            prop_assume!(norm(&xs) > 1e-6);
            let u = l2_normalize(&xs).unwrap();
            prop_assert!((norm(&u) - 1.0).abs() < 1e-9);
        }
    }
}

//! ELU with its first and second derivatives.
//!
//! The second derivative is needed by the log-determinant adjoint: the
//! diagonal channel multiplies by `elu'(z)`, so its gradient picks up `elu''(z)`.

/// Value and derivatives of an activation at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activation {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// ELU scale used throughout the library.
pub const ELU_ALPHA: f64 = 1.0;

/// `x` for `x > 0`, `alpha (e^x - 1)` otherwise. At `x = 0` the right-sided
/// derivatives are returned.
#[inline]
pub fn elu_family(x: f64, alpha: f64) -> Activation {
    if x >= 0.0 {
        Activation { value: x, d1: 1.0, d2: 0.0 }
    } else {
        let e = alpha * x.exp();
        Activation { value: e - alpha, d1: e, d2: e }
    }
}

#[inline]
pub fn elu(x: f64) -> Activation {
    elu_family(x, ELU_ALPHA)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_points() {
        assert_eq!(elu(1.0), Activation { value: 1.0, d1: 1.0, d2: 0.0 });
        assert_eq!(elu(0.0), Activation { value: 0.0, d1: 1.0, d2: 0.0 });
        let a = elu(-1.0);
        let e = (-1.0f64).exp();
        assert!((a.value - (e - 1.0)).abs() < 1e-15);
        assert!((a.value + 0.632121).abs() < 1e-6);
        assert!((a.d1 - 0.367879).abs() < 1e-6);
        assert_eq!(a.d1, a.d2);
    }

    #[test]
    fn derivatives_match_finite_differences_at_minus_one() {
        let h = 1e-6;
        let fd1 = (elu(-1.0 + h).value - elu(-1.0 - h).value) / (2.0 * h);
        let fd2 = (elu(-1.0 + h).d1 - elu(-1.0 - h).d1) / (2.0 * h);
        assert!((fd1 - elu(-1.0).d1).abs() < 1e-8);
        assert!((fd2 - elu(-1.0).d2).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn derivatives_are_consistent(x in -20.0f64..20.0) {
            prop_assume!(x.abs() > 1e-4);
            let h = 1e-6;
            let a = elu(x);
            prop_assert!(a.d1 > 0.0 && a.d1 <= 1.0);
            let fd1 = (elu(x + h).value - elu(x - h).value) / (2.0 * h);
            let fd2 = (elu(x + h).d1 - elu(x - h).d1) / (2.0 * h);
            prop_assert!((fd1 - a.d1).abs() < 1e-6);
            prop_assert!((fd2 - a.d2).abs() < 1e-5);
        }
    }
}

//! Bezier curves on the unit interval.
//!
//! Curves are stored in the Bernstein basis,
//! `B(s) = sum_i c_i * C(m,i) * s^i * (1-s)^(m-i)`,
//! which keeps evaluation stable and makes three operations exact:
//! derivatives are degree `m-1` curves, products of curves are curves, and
//! the integral over `[0,1]` is the mean of the coefficients.  Those three
//! facts together give a closed form for the squared-difference integrals the
//! gait optimizer minimizes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Polynomial in Bernstein form on `[0,1]`.
///
/// The degree is implicit: a curve with `n` coefficients has degree `n-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BezierCurve {
    coeffs: Vec<f64>,
}

/// `C(n, k)` as a float; exact for every value this crate touches.
fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut out = 1.0;
    for i in 0..k {
        out = out * (n - i) as f64 / (i + 1) as f64;
    }
    out
}

impl BezierCurve {
    /// Builds a curve from Bernstein coefficients (low index at `s = 0`).
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::domain("a Bezier curve needs at least one coefficient"));
        }
        Ok(BezierCurve { coeffs })
    }

    /// Constant curve of degree 0.
    pub fn constant(value: f64) -> Self {
        BezierCurve { coeffs: vec![value] }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Evaluates at `s in [0,1]` by de Casteljau reduction.
    ///
    /// The phase variable is clamped by callers before it gets here, so an
    /// out-of-range argument is a hard error rather than an extrapolation.
    pub fn eval(&self, s: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::domain(format!("Bezier argument {s} outside [0,1]")));
        }
        let mut work = self.coeffs.clone();
        for level in (1..work.len()).rev() {
            for i in 0..level {
                work[i] = (1.0 - s) * work[i] + s * work[i + 1];
            }
        }
        Ok(work[0])
    }

    /// Derivative curve, one degree lower: coefficients `m * (c_{i+1} - c_i)`.
    ///
    /// The derivative of a constant is the zero constant.
    pub fn derivative(&self) -> BezierCurve {
        let m = self.degree();
        if m == 0 {
            return BezierCurve::constant(0.0);
        }
        let coeffs = (0..m)
            .map(|i| m as f64 * (self.coeffs[i + 1] - self.coeffs[i]))
            .collect();
        BezierCurve { coeffs }
    }

    /// Exact integral over `[0,1]`: the mean of the coefficients.
    pub fn integral(&self) -> f64 {
        self.coeffs.iter().sum::<f64>() / self.coeffs.len() as f64
    }

    /// Same polynomial expressed with `extra` more coefficients.
    pub fn elevate(&self, extra: usize) -> BezierCurve {
        let mut cur = self.coeffs.clone();
        for _ in 0..extra {
            let m = cur.len();
            let mut next = vec![0.0; m + 1];
            next[0] = cur[0];
            next[m] = cur[m - 1];
            for i in 1..m {
                let w = i as f64 / m as f64;
                next[i] = w * cur[i - 1] + (1.0 - w) * cur[i];
            }
            cur = next;
        }
        BezierCurve { coeffs: cur }
    }

    /// Product of two curves; degree is the sum of the degrees.
    pub fn product(&self, other: &BezierCurve) -> BezierCurve {
        let n = self.degree();
        let m = other.degree();
        let mut coeffs = vec![0.0; n + m + 1];
        for (k, c) in coeffs.iter_mut().enumerate() {
            let lo = k.saturating_sub(m);
            let hi = k.min(n);
            let mut acc = 0.0;
            for i in lo..=hi {
                acc += binomial(n, i) * binomial(m, k - i) * self.coeffs[i] * other.coeffs[k - i];
            }
            *c = acc / binomial(n + m, k);
        }
        BezierCurve { coeffs }
    }

    /// Coefficient-wise difference after elevating both curves to a common
    /// degree, minus a constant offset.
    pub fn diff(&self, other: &BezierCurve, offset: f64) -> BezierCurve {
        let d = self.degree().max(other.degree());
        let a = self.elevate(d - self.degree());
        let b = other.elevate(d - other.degree());
        let coeffs = a
            .coeffs
            .iter()
            .zip(&b.coeffs)
            .map(|(x, y)| x - y - offset)
            .collect();
        BezierCurve { coeffs }
    }

    /// Exact `integral over [0,1] of (self(s) - other(s) - offset)^2 ds`.
    ///
    /// The difference is formed coefficient-wise at a common degree, squared
    /// as a Bernstein product, and integrated as the coefficient mean, so no
    /// quadrature error enters.
    pub fn squared_diff_integral(&self, other: &BezierCurve, offset: f64) -> f64 {
        let d = self.diff(other, offset);
        d.product(&d).integral()
    }

    /// Least-squares fit of a degree-`degree` curve to samples `(s, y)`.
    ///
    /// Solves the Bernstein-basis normal equations through a QR
    /// factorization of the sample matrix.  Degree 0 reduces to the sample
    /// mean.  Fitting fewer samples than coefficients, or samples whose
    /// basis matrix is numerically rank deficient, is reported as a singular
    /// fit together with the condition estimate.
    pub fn fit(s: &[f64], y: &[f64], degree: usize) -> Result<BezierCurve> {
        if s.len() != y.len() {
            return Err(Error::domain(format!(
                "fit needs matching sample lengths, got {} abscissae and {} values",
                s.len(),
                y.len()
            )));
        }
        let n = degree + 1;
        if s.len() < n {
            return Err(Error::SingularFit {
                cond: f64::INFINITY,
                context: format!("{} samples cannot determine {} coefficients", s.len(), n),
            });
        }
        for &si in s {
            if !(0.0..=1.0).contains(&si) {
                return Err(Error::domain(format!("fit abscissa {si} outside [0,1]")));
            }
        }

        let mut h = DMatrix::zeros(s.len(), n);
        for (r, &si) in s.iter().enumerate() {
            for j in 0..n {
                h[(r, j)] =
                    binomial(degree, j) * si.powi(j as i32) * (1.0 - si).powi((degree - j) as i32);
            }
        }

        let svd = h.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !cond.is_finite() || cond > 1.0e12 {
            return Err(Error::SingularFit {
                cond,
                context: "Bernstein basis matrix numerically rank deficient".into(),
            });
        }

        let rhs = DVector::from_column_slice(y);
        let qr = h.qr();
        let r = qr.r();
        let qty = qr.q().transpose() * rhs;
        let alpha = r
            .solve_upper_triangular(&qty.rows(0, n).into_owned())
            .ok_or(Error::SingularFit {
                cond,
                context: "triangular solve failed".into(),
            })?;

        Ok(BezierCurve {
            coeffs: alpha.iter().copied().collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Direct Bernstein-basis sum, the reference the de Casteljau loop must match.
    fn eval_basis(coeffs: &[f64], s: f64) -> f64 {
        let m = coeffs.len() - 1;
        coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c * binomial(m, i) * s.powi(i as i32) * (1.0 - s).powi((m - i) as i32)
            })
            .sum()
    }

    #[test]
    fn quadratic_midpoint() {
        let c = BezierCurve::new(vec![1.0, 2.0, 1.0]).unwrap();
        assert_abs_diff_eq!(c.eval(0.5).unwrap(), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn endpoints_interpolate() {
        let c = BezierCurve::new(vec![3.0, -1.0, 0.5, 2.0]).unwrap();
        assert_abs_diff_eq!(c.eval(0.0).unwrap(), 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.eval(1.0).unwrap(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn out_of_range_argument_rejected() {
        let c = BezierCurve::constant(1.0);
        assert!(c.eval(-0.001).is_err());
        assert!(c.eval(1.001).is_err());
    }

    #[test]
    fn derivative_of_s_squared() {
        // s^2 in Bernstein form is [0, 0, 1]; its derivative 2s is [0, 2].
        let c = BezierCurve::new(vec![0.0, 0.0, 1.0]).unwrap();
        let d = c.derivative();
        assert_eq!(d.coeffs(), &[0.0, 2.0]);
    }

    #[test]
    fn derivative_of_constant_is_zero_constant() {
        let d = BezierCurve::constant(4.2).derivative();
        assert_eq!(d.degree(), 0);
        assert_eq!(d.coeffs(), &[0.0]);
    }

    #[test]
    fn derivative_matches_central_differences() {
        let c = BezierCurve::new(vec![0.3, -1.2, 2.0, 0.7, -0.4, 1.1]).unwrap();
        let d = c.derivative();
        let h = 1e-6;
        for k in 1..20 {
            let s = k as f64 / 20.0;
            let fd = (c.eval(s + h).unwrap() - c.eval(s - h).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(d.eval(s).unwrap(), fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn integral_of_s_squared() {
        // mean of [0, 0, 1] = 1/3.
        let c = BezierCurve::new(vec![0.0, 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(c.integral(), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn squared_integral_of_s_squared() {
        // integral of s^4 over [0,1] = 1/5.
        let a = BezierCurve::new(vec![0.0, 0.0, 1.0]).unwrap();
        let b = BezierCurve::constant(0.0);
        assert_abs_diff_eq!(a.squared_diff_integral(&b, 0.0), 0.2, epsilon = 1e-14);
    }

    #[test]
    fn squared_diff_integral_matches_quadrature() {
        let a = BezierCurve::new(vec![0.5, 1.5, -0.3, 0.9, 0.1]).unwrap();
        let b = BezierCurve::new(vec![0.2, -0.4, 1.0]).unwrap();
        let offset = 0.37;
        let exact = a.squared_diff_integral(&b, offset);

        // Trapezoid oracle on 10^4 intervals.
        let n = 10_000;
        let mut acc = 0.0;
        for k in 0..=n {
            let s = k as f64 / n as f64;
            let d = a.eval(s).unwrap() - b.eval(s).unwrap() - offset;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            acc += w * d * d;
        }
        acc /= n as f64;
        assert_abs_diff_eq!(exact, acc, epsilon = 1e-6 * exact.abs().max(1.0));
    }

    #[test]
    fn fit_recovers_exact_coefficients() {
        let truth = BezierCurve::new(vec![0.4, -0.8, 1.6, 0.2, -1.0, 0.9]).unwrap();
        let s: Vec<f64> = (0..50).map(|k| k as f64 / 49.0).collect();
        let y: Vec<f64> = s.iter().map(|&si| truth.eval(si).unwrap()).collect();
        let fitted = BezierCurve::fit(&s, &y, 5).unwrap();
        for (a, b) in fitted.coeffs().iter().zip(truth.coeffs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn degree_zero_fit_is_the_mean() {
        let s = [0.0, 0.25, 0.5, 0.75, 1.0];
        let y = [1.0, 2.0, 3.0, 4.0, 10.0];
        let fitted = BezierCurve::fit(&s, &y, 0).unwrap();
        assert_abs_diff_eq!(fitted.coeffs()[0], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn underdetermined_fit_is_singular() {
        // 3 samples cannot determine a cubic.
        let s = [0.0, 0.5, 1.0];
        let y = [0.0, 1.0, 0.0];
        match BezierCurve::fit(&s, &y, 3) {
            Err(Error::SingularFit { cond, .. }) => assert!(!cond.is_finite()),
            other => panic!("expected singular fit, got {other:?}"),
        }
    }

    #[test]
    fn clustered_samples_are_singular() {
        // All samples at one abscissa: rank 1 basis matrix.
        let s = vec![0.5; 12];
        let y = vec![1.0; 12];
        match BezierCurve::fit(&s, &y, 3) {
            Err(Error::SingularFit { cond, .. }) => assert!(cond > 1.0e12 || !cond.is_finite()),
            other => panic!("expected singular fit, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn de_casteljau_matches_basis_sum(
            coeffs in proptest::collection::vec(-10.0f64..10.0, 1..9),
            s in 0.0f64..=1.0,
        ) {
            let c = BezierCurve::new(coeffs.clone()).unwrap();
            let reference = eval_basis(&coeffs, s);
            prop_assert!((c.eval(s).unwrap() - reference).abs() <= 1e-10);
        }

        #[test]
        fn eval_stays_in_convex_hull(
            coeffs in proptest::collection::vec(-10.0f64..10.0, 1..9),
            s in 0.0f64..=1.0,
        ) {
            let c = BezierCurve::new(coeffs.clone()).unwrap();
            let lo = coeffs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = coeffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = c.eval(s).unwrap();
            prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }

        #[test]
        fn elevation_preserves_values(
            coeffs in proptest::collection::vec(-10.0f64..10.0, 1..7),
            extra in 1usize..4,
            s in 0.0f64..=1.0,
        ) {
            let c = BezierCurve::new(coeffs).unwrap();
            let e = c.elevate(extra);
            prop_assert_eq!(e.degree(), c.degree() + extra);
            prop_assert!((c.eval(s).unwrap() - e.eval(s).unwrap()).abs() <= 1e-9);
        }

        #[test]
        fn product_matches_pointwise(
            a in proptest::collection::vec(-5.0f64..5.0, 1..6),
            b in proptest::collection::vec(-5.0f64..5.0, 1..6),
            s in 0.0f64..=1.0,
        ) {
            let pa = BezierCurve::new(a).unwrap();
            let pb = BezierCurve::new(b).unwrap();
            let prod = pa.product(&pb);
            let want = pa.eval(s).unwrap() * pb.eval(s).unwrap();
            prop_assert!((prod.eval(s).unwrap() - want).abs() <= 1e-8);
        }
    }
}

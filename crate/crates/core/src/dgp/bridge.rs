//! Bridge distribution: the random-intercept law under which a logistic model
//! stays logistic after marginalizing the intercept.

use std::f64::consts::PI;

use crate::error::{Error, Result};

fn check_phi(phi: f64) -> Result<()> {
    if phi > 0.0 && phi < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "bridge parameter must lie in (0, 1), got {phi}"
        )))
    }
}

/// Density `sin(phi*pi) / (2*pi*(cosh(phi*u) + cos(phi*pi)))`.
pub fn density(phi: f64, u: f64) -> Result<f64> {
    check_phi(phi)?;
    Ok(density_unchecked(phi, u))
}

pub(crate) fn density_unchecked(phi: f64, u: f64) -> f64 {
    let c = (phi * u).abs();
    // cosh overflows past ~710; the density is ~0 long before that.
    if c > 700.0 {
        return 0.0;
    }
    (phi * PI).sin() / (2.0 * PI * (c.cosh() + (phi * PI).cos()))
}

/// Inverse-CDF draw: `(1/phi) * ln(sin(phi*pi*v) / sin(phi*pi*(1-v)))`.
///
/// Strictly increasing in `v` and antisymmetric about `v = 1/2`.
pub fn sample(phi: f64, v: f64) -> Result<f64> {
    check_phi(phi)?;
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::Domain(format!(
            "uniform draw must lie in (0, 1), got {v}"
        )));
    }
    Ok(quantile_unchecked(phi, v))
}

pub(crate) fn quantile_unchecked(phi: f64, v: f64) -> f64 {
    if v == 0.5 {
        return 0.0;
    }
    ((phi * PI * v).sin() / (phi * PI * (1.0 - v)).sin()).ln() / phi
}

/// Variance `(pi^2 / 3) * (1/phi^2 - 1)`.
pub fn variance(phi: f64) -> Result<f64> {
    check_phi(phi)?;
    Ok(PI * PI / 3.0 * (1.0 / (phi * phi) - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::quadrature::integrate_panels;

    #[test]
    fn median_is_zero() {
        assert_eq!(sample(0.5, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn density_at_zero_half() {
        // sin(pi/2) / (2 pi (1 + 0))
        let d = density(0.5, 0.0).unwrap();
        assert!((d - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!((d - 0.15915).abs() < 1e-5);
    }

    #[test]
    fn rejects_out_of_domain() {
        assert!(sample(0.5, 0.0).is_err());
        assert!(sample(0.5, 1.0).is_err());
        assert!(sample(1.0, 0.3).is_err());
        assert!(density(0.0, 0.3).is_err());
    }

    #[test]
    fn antisymmetric_and_increasing() {
        let mut prev = f64::NEG_INFINITY;
        for k in 1..200 {
            let v = k as f64 / 200.0;
            let u = sample(0.5, v).unwrap();
            let mirrored = sample(0.5, 1.0 - v).unwrap();
            assert!((u + mirrored).abs() < 1e-12);
            assert!(u > prev);
            prev = u;
        }
    }

    #[test]
    fn variance_matches_quadrature() {
        for phi in [0.3, 0.5, 0.8] {
            let edges: Vec<f64> = (-10..=10).map(|k| k as f64 * 30.0).collect();
            let mass = integrate_panels(|u| density_unchecked(phi, u), &edges, 1e-11).unwrap();
            let second =
                integrate_panels(|u| u * u * density_unchecked(phi, u), &edges, 1e-9).unwrap();
            assert!((mass - 1.0).abs() < 1e-9, "phi={phi} mass={mass}");
            assert!((second - variance(phi).unwrap()).abs() < 1e-6, "phi={phi}");
        }
    }
}

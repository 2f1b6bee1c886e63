//! Adaptive Gauss–Kronrod (7, 15) integration.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];

// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_DEPTH: u32 = 50;

/// One Kronrod panel: returns (kronrod estimate, |kronrod - gauss|).
pub fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (k, (&x, &w)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let dx = half * x;
        let s = f(center - dx) + f(center + dx);
        kronrod += w * s;
        if k % 2 == 1 {
            gauss += WG[k / 2] * s;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Integrate `f` over `[a, b]` to absolute tolerance `tol` by recursive bisection.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Quadrature(format!("non-finite limits [{a}, {b}]")));
    }
    if a == b {
        return Ok(0.0);
    }
    let (est, err) = gk15(&f, a, b);
    recurse(&f, a, b, est, err, tol, 0)
}

/// Integrate over consecutive panels with breakpoints `edges`; the tolerance is
/// split evenly across panels.
pub fn integrate_panels<F: Fn(f64) -> f64>(f: F, edges: &[f64], tol: f64) -> Result<f64> {
    if edges.len() < 2 {
        return Err(Error::Quadrature("need at least two panel edges".into()));
    }
    let per = tol / (edges.len() - 1) as f64;
    edges
        .windows(2)
        .try_fold(0.0, |acc, w| Ok(acc + integrate(&f, w[0], w[1], per)?))
}

fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    est: f64,
    err: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    if !est.is_finite() {
        return Err(Error::Quadrature(format!(
            "non-finite integrand on [{a}, {b}]"
        )));
    }
    if err <= tol {
        return Ok(est);
    }
    if depth >= MAX_DEPTH {
        return Err(Error::Quadrature(format!(
            "error estimate {err:e} above {tol:e} on [{a}, {b}] at maximum depth"
        )));
    }
    let mid = 0.5 * (a + b);
    let (left, left_err) = gk15(f, a, mid);
    let (right, right_err) = gk15(f, mid, b);
    Ok(recurse(f, a, mid, left, left_err, 0.5 * tol, depth + 1)?
        + recurse(f, mid, b, right, right_err, 0.5 * tol, depth + 1)?)
}

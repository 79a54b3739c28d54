//! Smooth scalar primitives: cutoff switches, the smooth max/min family and
//! right-handed frames built from a pair of directions.
//!
//! All switching functions share the same kernel
//! `s(x) = (tanh(1/(x+1) + 1/(x-1)) + 1) / 2` on `x in (-1, 1)`, which goes
//! from 1 at `x = -1` to 0 at `x = 1` with every derivative vanishing at both
//! ends.

use std::sync::OnceLock;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Squared-norm floor of `v1 x v2` (unit vectors) below which no frame is
/// built. Frame weights vanish long before this.
pub const COLLINEAR_EPS: f64 = 1e-24;

/// Radial cutoff `(r_c, delta)`: the switch is 1 up to `r_c - delta` and 0
/// from `r_c` on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffParams {
    r_c: f64,
    delta: f64,
}

impl CutoffParams {
    pub fn new(r_c: f64, delta: f64) -> Result<Self> {
        if !(r_c > 0.0 && r_c.is_finite()) {
            return Err(Error::param(format!(
                "cutoff radius must be positive, got {r_c}"
            )));
        }
        if !(delta > 0.0 && delta <= r_c) {
            return Err(Error::param(format!(
                "cutoff width must lie in (0, r_c = {r_c}], got {delta}"
            )));
        }
        Ok(CutoffParams { r_c, delta })
    }

    pub fn r_c(&self) -> f64 {
        self.r_c
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn fc(&self, r: f64) -> f64 {
        fc(r, self)
    }
}

/// Angular threshold `(omega, delta_omega)` applied to `|r_j x r_j'|^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularParams {
    omega: f64,
    delta_omega: f64,
}

impl AngularParams {
    pub fn new(omega: f64, delta_omega: f64) -> Result<Self> {
        let p = Self::unbounded(omega, delta_omega)?;
        if omega + delta_omega > 1.0 + 1e-12 {
            return Err(Error::param(format!(
                "omega + delta_omega must not exceed 1, got {}",
                omega + delta_omega
            )));
        }
        Ok(p)
    }

    /// Same as [`AngularParams::new`] without the upper bound. The pruning step
    /// reuses `q_c` on weights, where the threshold is not a squared sine.
    pub fn unbounded(omega: f64, delta_omega: f64) -> Result<Self> {
        if !(omega >= 0.0 && omega.is_finite()) {
            return Err(Error::param(format!("omega must be >= 0, got {omega}")));
        }
        if !(delta_omega > 0.0 && delta_omega.is_finite()) {
            return Err(Error::param(format!(
                "delta_omega must be > 0, got {delta_omega}"
            )));
        }
        Ok(AngularParams { omega, delta_omega })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn delta_omega(&self) -> f64 {
        self.delta_omega
    }
}

/// Which angular switch enters the frame weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QcKind {
    #[default]
    Qc1,
    Qc2,
}

impl QcKind {
    pub fn eval(self, z: f64, params: &AngularParams) -> f64 {
        match self {
            QcKind::Qc1 => qc1(z, params),
            QcKind::Qc2 => qc2(z, params),
        }
    }
}

#[inline]
fn switch_down(x: f64) -> f64 {
    0.5 * ((1.0 / (x + 1.0) + 1.0 / (x - 1.0)).tanh() + 1.0)
}

#[inline]
fn switch_down_deriv(x: f64) -> f64 {
    let u = 1.0 / (x + 1.0) + 1.0 / (x - 1.0);
    let du = -1.0 / ((x + 1.0) * (x + 1.0)) - 1.0 / ((x - 1.0) * (x - 1.0));
    let t = u.tanh();
    0.5 * (1.0 - t * t) * du
}

/// Radial cutoff function.
pub fn fc(r: f64, params: &CutoffParams) -> f64 {
    let CutoffParams { r_c, delta } = *params;
    if r <= r_c - delta {
        1.0
    } else if r >= r_c {
        0.0
    } else {
        switch_down(2.0 * (r - r_c + 0.5 * delta) / delta)
    }
}

/// First derivative of [`fc`] with respect to `r`.
pub fn fc_deriv(r: f64, params: &CutoffParams) -> f64 {
    let CutoffParams { r_c, delta } = *params;
    if r <= r_c - delta || r >= r_c {
        0.0
    } else {
        switch_down_deriv(2.0 * (r - r_c + 0.5 * delta) / delta) * 2.0 / delta
    }
}

/// Angular switch: 0 up to `omega`, 1 from `omega + delta_omega` on.
pub fn qc1(z: f64, params: &AngularParams) -> f64 {
    let AngularParams { omega, delta_omega } = *params;
    if z <= omega {
        0.0
    } else if z >= omega + delta_omega {
        1.0
    } else {
        1.0 - switch_down(2.0 * (z - omega - 0.5 * delta_omega) / delta_omega)
    }
}

/// Angular switch that passes `z` through above the threshold.
pub fn qc2(z: f64, params: &AngularParams) -> f64 {
    let AngularParams { omega, delta_omega } = *params;
    if z <= omega {
        0.0
    } else if z >= omega + delta_omega {
        z
    } else {
        z * (1.0 - switch_down(2.0 * (z - omega - 0.5 * delta_omega) / delta_omega))
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!(
            "beta must be positive and finite, got {beta}"
        )))
    }
}

// `sharpness` may be negative (smooth min). Exponents are shifted by the
// largest `sharpness * x` so none exceeds zero, and the mean is taken of the
// offsets from the extreme element `a`: every offset has the sign opposite to
// `sharpness`, so the result never overshoots the hard max (min) in floating
// point either.
fn softmax_mean(xs: &[f64], sharpness: f64) -> f64 {
    let mut a = xs[0];
    for &x in xs {
        if sharpness * x > sharpness * a {
            a = x;
        }
    }
    let shift = sharpness * a;
    let mut num = 0.0;
    let mut den = 0.0;
    for &x in xs {
        let e = (sharpness * x - shift).exp();
        num += e * (x - a);
        den += e;
    }
    a + num / den
}

fn softmax_mean_weighted(pairs: &[(f64, f64)], sharpness: f64) -> Result<f64> {
    let mut a: Option<f64> = None;
    for &(x, p) in pairs {
        if p < 0.0 || !p.is_finite() {
            return Err(Error::param(format!(
                "weights must be finite and >= 0, got {p}"
            )));
        }
        if p > 0.0 && a.is_none_or(|a| sharpness * x > sharpness * a) {
            a = Some(x);
        }
    }
    let a = a.ok_or(Error::AllZeroWeights)?;
    let shift = sharpness * a;
    let mut num = 0.0;
    let mut den = 0.0;
    for &(x, p) in pairs {
        if p == 0.0 {
            continue;
        }
        let e = (sharpness * x - shift).exp() * p;
        num += e * (x - a);
        den += e;
    }
    Ok(a + num / den)
}

/// `sum_i exp(beta x_i) x_i / sum_i exp(beta x_i)`.
pub fn smooth_max(xs: &[f64], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if xs.is_empty() {
        return Err(Error::EmptyInput("smooth_max"));
    }
    Ok(softmax_mean(xs, beta))
}

pub fn smooth_min(xs: &[f64], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if xs.is_empty() {
        return Err(Error::EmptyInput("smooth_min"));
    }
    Ok(softmax_mean(xs, -beta))
}

/// Weighted smooth max over `(value, weight)` pairs. Zero-weight pairs are
/// skipped before any accumulation, so adding them never changes a bit of the
/// result.
pub fn smooth_max_weighted(pairs: &[(f64, f64)], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    softmax_mean_weighted(pairs, beta)
}

pub fn smooth_min_weighted(pairs: &[(f64, f64)], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    softmax_mean_weighted(pairs, -beta)
}

/// Principal branch of the Lambert W function at `1/e`, by Newton iteration.
pub fn lambert_w_inv_e() -> f64 {
    static W: OnceLock<f64> = OnceLock::new();
    *W.get_or_init(|| {
        let target = (-1.0f64).exp();
        let mut w: f64 = 0.3;
        for _ in 0..100 {
            let ew = w.exp();
            let step = (w * ew - target) / (ew * (w + 1.0));
            w -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        w
    })
}

/// Slack `T(beta) = W(1/e) / beta` with `smooth_max({x1, x2}) + T >= max`.
pub fn t_of_beta(beta: f64) -> f64 {
    lambert_w_inv_e() / beta
}

/// A proper rotation. Rows are the frame axes expressed in global
/// coordinates, so `matrix * v` gives the components of `v` in the frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    rotation: Matrix3<f64>,
}

impl Frame {
    pub fn identity() -> Self {
        Frame {
            rotation: Matrix3::identity(),
        }
    }

    /// Frame `(v1^, u1^, u2^)` with `u1 = v1^ x v2^` normalized and
    /// `u2^ = v1^ x u1^`.
    pub fn from_pair(v1: &Vector3<f64>, v2: &Vector3<f64>) -> Result<Self> {
        let n1 = v1.norm();
        let n2 = v2.norm();
        if !(n1 > 0.0 && n2 > 0.0) {
            return Err(Error::CollinearPair(0.0));
        }
        let a = v1 / n1;
        let b = v2 / n2;
        let u1 = a.cross(&b);
        let sq = u1.norm_squared();
        if !(sq >= COLLINEAR_EPS) {
            return Err(Error::CollinearPair(sq));
        }
        let u1 = u1 / sq.sqrt();
        let u2 = a.cross(&u1);
        Ok(Frame {
            rotation: Matrix3::from_rows(&[a.transpose(), u1.transpose(), u2.transpose()]),
        })
    }

    /// Wraps a matrix that the caller guarantees is a proper rotation.
    pub fn from_matrix_unchecked(rotation: Matrix3<f64>) -> Self {
        Frame { rotation }
    }

    /// Wraps a matrix after checking orthogonality and `det = +1`.
    pub fn try_from_matrix(rotation: Matrix3<f64>, tol: f64) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max();
        let det = rotation.determinant();
        if err > tol || (det - 1.0).abs() > tol {
            return Err(Error::param(format!(
                "not a proper rotation (orthogonality error {err:e}, det {det})"
            )));
        }
        Ok(Frame { rotation })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// Global coordinates to frame coordinates.
    pub fn to_local(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Frame coordinates back to global coordinates.
    pub fn to_global(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * v
    }

    /// Frame whose local coordinates are those of `self` further rotated
    /// by `inner`: `inner * self`.
    pub fn then(&self, inner: &Frame) -> Frame {
        Frame {
            rotation: inner.rotation * self.rotation,
        }
    }

    /// Haar-uniform random rotation from a normalized quaternion of four
    /// standard normals.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Frame {
        loop {
            let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                let u = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
                return Frame {
                    rotation: u.to_rotation_matrix().into_inner(),
                };
            }
        }
    }

    pub fn inverse(&self) -> Frame {
        Frame {
            rotation: self.rotation.transpose(),
        }
    }
}

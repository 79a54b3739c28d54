//! Smooth point-to-grid primitives: uniform B-splines, cutoff-gated voxel
//! projections, a gated point convolution and gated aggregations.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::smoothmath::{fc, smooth_max_weighted, smooth_min_weighted, CutoffParams};
use crate::structures::AtomicEnvironment;

/// Highest supported spline order.
pub const MAX_ORDER: usize = 3;

fn check_order(p: usize, max: usize) -> Result<()> {
    if p > max {
        return Err(Error::param(format!(
            "spline order must be at most {max}, got {p}"
        )));
    }
    Ok(())
}

/// Cox-de Boor recursion on the integer knots `0, 1, ..., p + 1`.
fn cox_de_boor(p: usize, t: f64) -> f64 {
    if p == 0 {
        return if (0.0..1.0).contains(&t) { 1.0 } else { 0.0 };
    }
    if t <= 0.0 || t >= (p + 1) as f64 {
        return 0.0;
    }
    let q = p as f64;
    t / q * cox_de_boor(p - 1, t) + ((p + 1) as f64 - t) / q * cox_de_boor(p - 1, t - 1.0)
}

/// Cardinal B-spline of order `p` with support `[0, p + 1]`, peak at
/// `(p + 1) / 2`. Integer shifts sum to one everywhere.
pub fn bspline_eval(p: usize, x: f64) -> Result<f64> {
    check_order(p, MAX_ORDER)?;
    Ok(cox_de_boor(p, x))
}

/// Regular grid of `extents` voxels of edge `spacing`, with voxel `(0, 0, 0)`
/// starting at `origin`. Basis function `i` along an axis is
/// `B^p((x - origin) / spacing - i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry {
    pub extents: [usize; 3],
    pub spacing: f64,
    pub origin: Vector3<f64>,
}

impl GridGeometry {
    pub fn new(extents: [usize; 3], spacing: f64, origin: Vector3<f64>) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::param(format!(
                "grid spacing must be positive, got {spacing}"
            )));
        }
        if extents.contains(&0) {
            return Err(Error::param("grid extents must be at least 1"));
        }
        Ok(GridGeometry {
            extents,
            spacing,
            origin,
        })
    }

    /// Smallest cubic grid on which every order-`p` basis function that is
    /// nonzero inside the ball of radius `r` has an index.
    pub fn covering(r: f64, spacing: f64, p: usize) -> Result<Self> {
        check_order(p, MAX_ORDER)?;
        // Half a spacing of margin keeps the lowest index clear of rounding.
        let lo = -r - (p as f64 + 0.5) * spacing;
        let n = ((r - lo) / spacing).floor() as usize + 1;
        Self::new([n; 3], spacing, Vector3::repeat(lo))
    }

    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: [usize; 3]) -> usize {
        (i[0] * self.extents[1] + i[1]) * self.extents[2] + i[2]
    }

    /// Whether every basis function of order `p` that is nonzero somewhere in
    /// the ball of radius `r` is on the grid.
    pub fn covers(&self, r: f64, p: usize) -> bool {
        (0..3).all(|a| {
            let lo = ((-r - self.origin[a]) / self.spacing).floor();
            let hi = ((r - self.origin[a]) / self.spacing).floor();
            lo - p as f64 >= 0.0 && hi < self.extents[a] as f64
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub geometry: GridGeometry,
    pub coefficients: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        VoxelGrid {
            geometry,
            coefficients: vec![0.0; n],
        }
    }

    pub fn get(&self, i: [usize; 3]) -> f64 {
        self.coefficients[self.geometry.index(i)]
    }

    pub fn sum(&self) -> f64 {
        self.coefficients.iter().sum()
    }

    /// Largest absolute coefficient difference.
    pub fn max_abs_diff(&self, other: &VoxelGrid) -> f64 {
        self.coefficients
            .iter()
            .zip(&other.coefficients)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Adds `w * prod_a basis_a[i_a]`, each axis given as a first index and
    /// its nonzero values.
    fn add_separable(&mut self, w: f64, axes: &[(isize, Vec<f64>); 3]) {
        let ext = self.geometry.extents;
        for (d0, b0) in axes[0].1.iter().enumerate() {
            let i0 = axes[0].0 + d0 as isize;
            if *b0 == 0.0 || i0 < 0 || i0 as usize >= ext[0] {
                continue;
            }
            for (d1, b1) in axes[1].1.iter().enumerate() {
                let i1 = axes[1].0 + d1 as isize;
                if *b1 == 0.0 || i1 < 0 || i1 as usize >= ext[1] {
                    continue;
                }
                for (d2, b2) in axes[2].1.iter().enumerate() {
                    let i2 = axes[2].0 + d2 as isize;
                    if *b2 == 0.0 || i2 < 0 || i2 as usize >= ext[2] {
                        continue;
                    }
                    let k = self.geometry.index([i0 as usize, i1 as usize, i2 as usize]);
                    self.coefficients[k] += w * b0 * b1 * b2;
                }
            }
        }
    }
}

fn check_coverage(grid: &GridGeometry, cutoff: &CutoffParams, p: usize) -> Result<()> {
    if !grid.covers(cutoff.r_c(), p) {
        return Err(Error::param(format!(
            "grid does not cover the cutoff sphere of radius {} for order {p}",
            cutoff.r_c()
        )));
    }
    Ok(())
}

/// Nonzero order-`p` basis values at grid coordinate `s`: the first index
/// and `p + 1` values.
fn axis_basis(p: usize, s: f64) -> (isize, Vec<f64>) {
    let first = s.floor() as isize - p as isize;
    let vals = (0..=p)
        .map(|d| cox_de_boor(p, s - (first + d as isize) as f64))
        .collect();
    (first, vals)
}

/// `c_i = sum_k f_c(r_k) B^p_i1(x_k) B^p_i2(y_k) B^p_i3(z_k)`.
pub fn project_environment(
    env: &AtomicEnvironment,
    grid: &GridGeometry,
    p: usize,
    cutoff: &CutoffParams,
) -> Result<VoxelGrid> {
    check_order(p, MAX_ORDER)?;
    check_coverage(grid, cutoff, p)?;
    let mut out = VoxelGrid::zeros(grid.clone());
    for (d, &r) in env.displacements.iter().zip(&env.distances) {
        let w = fc(r, cutoff);
        if w == 0.0 {
            continue;
        }
        let axes = [0, 1, 2].map(|a| axis_basis(p, (d[a] - grid.origin[a]) / grid.spacing));
        out.add_separable(w, &axes);
    }
    Ok(out)
}

/// Three-point Gauss-Legendre rule on `[-1, 1]`, exact to degree 5.
const GL3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

/// `int_a^b B^p_c(u - s) du` for the centred spline `B^p_c(t) = B^p(t + (p + 1) / 2)`,
/// split at the knots so each piece is a polynomial.
fn integrate_centred(p: usize, s: f64, a: f64, b: f64) -> f64 {
    let half = (p + 1) as f64 / 2.0;
    let mut cuts: Vec<f64> = vec![a, b];
    for k in 0..=p + 1 {
        let t = s - half + k as f64;
        if t > a && t < b {
            cuts.push(t);
        }
    }
    cuts.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let mid = 0.5 * (lo + hi);
        let rad = 0.5 * (hi - lo);
        for (x, wt) in GL3 {
            total += wt * rad * cox_de_boor(p, mid + rad * x - s + half);
        }
    }
    total
}

/// Voxel integrals of the gated density `rho(r) = sum_k f_c(r_k) B(r - r_k)`,
/// `B` the product of centred order-`p` splines scaled to the grid spacing
/// with unit integral. Computed by piecewise Gauss-Legendre quadrature.
///
/// The result equals the order-`p + 1` projection on the grid whose origin is
/// moved by `-(p + 1) / 2` spacings.
pub fn integral_projection(
    env: &AtomicEnvironment,
    grid: &GridGeometry,
    p: usize,
    cutoff: &CutoffParams,
) -> Result<VoxelGrid> {
    check_order(p, MAX_ORDER - 1)?;
    let shifted = GridGeometry {
        origin: grid
            .origin
            .add_scalar(-((p + 1) as f64) * grid.spacing / 2.0),
        ..grid.clone()
    };
    check_coverage(&shifted, cutoff, p + 1)?;
    let mut out = VoxelGrid::zeros(grid.clone());
    for (d, &r) in env.displacements.iter().zip(&env.distances) {
        let w = fc(r, cutoff);
        if w == 0.0 {
            continue;
        }
        let axes = [0, 1, 2].map(|a| {
            // Grid coordinates: voxel i spans [i, i + 1], the point sits at s.
            let s = (d[a] - grid.origin[a]) / grid.spacing;
            let half = (p + 1) as f64 / 2.0;
            let first = (s - half).floor() as isize;
            let last = (s + half).ceil() as isize;
            let vals = (first..last)
                .map(|i| integrate_centred(p, s, i as f64, (i + 1) as f64))
                .collect();
            (first, vals)
        });
        out.add_separable(w, &axes);
    }
    Ok(out)
}

/// A bank of `n_out x n_in` continuous kernels `g_mn(d)`.
pub trait ConvKernel {
    fn n_in(&self) -> usize;

    fn n_out(&self) -> usize;

    /// Row-major `n_out x n_in` values at displacement `d`.
    fn eval(&self, d: &Vector3<f64>) -> Vec<f64>;
}

/// `g_mn(d) = exp(-|d|^2 / (2 sigma^2)) (a_mn + b_mn . d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolyKernel {
    pub n_in: usize,
    pub n_out: usize,
    pub sigma: f64,
    /// Per `(m, n)`, row-major: `[a, b_x, b_y, b_z]`.
    pub coefficients: Vec<[f64; 4]>,
}

impl GaussianPolyKernel {
    pub fn new(n_in: usize, n_out: usize, sigma: f64, coefficients: Vec<[f64; 4]>) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::param(format!(
                "kernel width must be positive, got {sigma}"
            )));
        }
        if coefficients.len() != n_in * n_out {
            return Err(Error::ShapeMismatch(format!(
                "{} kernel coefficients for {n_out} x {n_in} channels",
                coefficients.len()
            )));
        }
        Ok(GaussianPolyKernel {
            n_in,
            n_out,
            sigma,
            coefficients,
        })
    }
}

impl ConvKernel for GaussianPolyKernel {
    fn n_in(&self) -> usize {
        self.n_in
    }

    fn n_out(&self) -> usize {
        self.n_out
    }

    fn eval(&self, d: &Vector3<f64>) -> Vec<f64> {
        let g = (-d.norm_squared() / (2.0 * self.sigma * self.sigma)).exp();
        self.coefficients
            .iter()
            .map(|c| g * (c[0] + c[1] * d.x + c[2] * d.y + c[3] * d.z))
            .collect()
    }
}

/// `y_m = sum_i sum_n g_mn(r_i - r) f^i_n f_c(|r_i - r|)`.
pub fn smooth_conv<K: ConvKernel + ?Sized>(
    points: &[Vector3<f64>],
    features: &[Vec<f64>],
    query: &Vector3<f64>,
    kernel: &K,
    cutoff: &CutoffParams,
) -> Result<Vec<f64>> {
    if points.len() != features.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} points but {} feature rows",
            points.len(),
            features.len()
        )));
    }
    let (n_in, n_out) = (kernel.n_in(), kernel.n_out());
    let mut out = vec![0.0; n_out];
    for (p, f) in points.iter().zip(features) {
        if f.len() != n_in {
            return Err(Error::ShapeMismatch(format!(
                "feature row of length {} for {n_in} inputs",
                f.len()
            )));
        }
        let d = p - query;
        let w = fc(d.norm(), cutoff);
        if w == 0.0 {
            continue;
        }
        let g = kernel.eval(&d);
        for (m, o) in out.iter_mut().enumerate() {
            let row = &g[m * n_in..(m + 1) * n_in];
            *o += w * row.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Sum,
    Mean,
    Max,
    Min,
}

/// Permutation-invariant reduction of `(value, distance)` pairs that is
/// smooth when points cross the cutoff sphere.
///
/// Sum is `sum f_c(r) v`; mean divides by `sum f_c(r)`. Max and min are the
/// softmax means with exponents shifted by `log f_c(r)`, which tends to
/// `-inf` at the cutoff. Mean, max and min of a set with no point inside the
/// cutoff return [`Error::AllZeroWeights`].
pub fn smooth_aggregate(
    values: &[(f64, f64)],
    mode: Aggregation,
    cutoff: &CutoffParams,
    beta: f64,
) -> Result<f64> {
    let gated: Vec<(f64, f64)> = values.iter().map(|&(v, r)| (v, fc(r, cutoff))).collect();
    match mode {
        Aggregation::Sum => Ok(gated.iter().map(|(v, w)| v * w).sum()),
        Aggregation::Mean => {
            let den: f64 = gated.iter().map(|g| g.1).sum();
            if den == 0.0 {
                return Err(Error::AllZeroWeights);
            }
            Ok(gated.iter().map(|(v, w)| v * w).sum::<f64>() / den)
        }
        Aggregation::Max => smooth_max_weighted(&gated, beta),
        Aggregation::Min => smooth_min_weighted(&gated, beta),
    }
}

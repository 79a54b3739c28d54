mod common;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::random_env;
use ecse_core::smoothmath::{t_of_beta, CutoffParams};
use ecse_core::smoothproj::{
    bspline_eval, integral_projection, project_environment, smooth_aggregate, smooth_conv,
    Aggregation, GaussianPolyKernel, GridGeometry,
};
use ecse_core::structures::AtomicEnvironment;
use ecse_core::Error;

fn cut() -> CutoffParams {
    CutoffParams::new(3.0, 0.5).unwrap()
}

/// Closed-form uniform B-splines on `[0, p + 1]`.
fn piecewise(p: usize, x: f64) -> f64 {
    let pos = |t: f64| if t > 0.0 { t } else { 0.0 };
    if x < 0.0 || x >= (p + 1) as f64 {
        return 0.0;
    }
    match p {
        0 => 1.0,
        1 => 1.0 - (x - 1.0).abs(),
        2 => {
            if x < 1.0 {
                0.5 * x * x
            } else if x < 2.0 {
                0.75 - (x - 1.5) * (x - 1.5)
            } else {
                0.5 * (3.0 - x) * (3.0 - x)
            }
        }
        3 => {
            (pos(x).powi(3) - 4.0 * pos(x - 1.0).powi(3) + 6.0 * pos(x - 2.0).powi(3)
                - 4.0 * pos(x - 3.0).powi(3))
                / 6.0
        }
        _ => unreachable!(),
    }
}

fn env(disps: Vec<Vector3<f64>>) -> AtomicEnvironment {
    let n = disps.len();
    AtomicEnvironment::from_displacements(1, disps, vec![1; n]).unwrap()
}

#[test]
fn splines_match_closed_forms() {
    assert_eq!(bspline_eval(2, 1.5).unwrap(), 0.75);
    for p in 0..=3 {
        for k in 0..=4000 {
            let x = -0.5 + 5.0 * k as f64 / 4000.0;
            let b = bspline_eval(p, x).unwrap();
            assert!(b >= 0.0);
            assert!((b - piecewise(p, x)).abs() < 1e-14, "p {p} x {x}");
        }
    }
}

#[test]
fn partition_of_unity_on_dense_grid() {
    for p in 0..=3 {
        for k in 0..=10_000 {
            let x = -3.0 + 6.0 * k as f64 / 10_000.0;
            let s: f64 = (-10..10)
                .map(|i| bspline_eval(p, x - i as f64).unwrap())
                .sum();
            assert!((s - 1.0).abs() <= 1e-12, "p {p} x {x}: {s}");
        }
    }
}

#[test]
fn continuity_classes_at_knots() {
    let h = 1e-5;
    let d = |p: usize, x: f64, k: u32| -> f64 {
        // k-th derivative by a symmetric stencil evaluated away from the knot.
        let f = |y: f64| bspline_eval(p, y).unwrap();
        match k {
            0 => f(x),
            1 => (f(x + h) - f(x - h)) / (2.0 * h),
            2 => (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h),
            _ => unreachable!(),
        }
    };
    for p in 1..=3usize {
        for knot in 0..=(p + 1) {
            let x = knot as f64;
            for k in 0..p as u32 {
                let eps = 1e-3;
                let jump = (d(p, x + eps, k) - d(p, x - eps, k)).abs();
                // Continuous derivatives change by O(eps) across the knot.
                assert!(
                    jump < 20.0 * eps,
                    "p {p} knot {knot} derivative {k}: {jump}"
                );
            }
        }
    }
    // The p-th derivative does jump: B^1 has slope +1 then -1 at its peak.
    assert!((d(1, 1.0 + 1e-3, 1) - d(1, 1.0 - 1e-3, 1)).abs() > 1.9);
}

#[test]
fn empty_environment_projects_to_zero() {
    let g = GridGeometry::covering(3.0, 0.5, 2).unwrap();
    let e = env(vec![]);
    assert!(project_environment(&e, &g, 2, &cut())
        .unwrap()
        .coefficients
        .iter()
        .all(|&c| c == 0.0));
    let gi = GridGeometry::covering(3.0 + 0.75, 0.5, 2).unwrap();
    assert!(integral_projection(&e, &gi, 1, &cut())
        .unwrap()
        .coefficients
        .iter()
        .all(|&c| c == 0.0));
}

#[test]
fn interior_neighbor_has_unit_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in 0..=3 {
        let g = GridGeometry::covering(3.0, 0.37, p).unwrap();
        for _ in 0..20 {
            let v = common::in_ball(&mut rng, 2.4);
            let c = project_environment(&env(vec![v]), &g, p, &cut()).unwrap();
            assert!((c.sum() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn neighbor_at_cutoff_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = GridGeometry::covering(3.0, 0.5, 3).unwrap();
    let base = random_env(&mut rng, 6, 2.8, 0.5);
    let mut d = base.displacements.clone();
    d.push(Vector3::new(1.0, 2.0, -2.0).normalize() * 3.0);
    let with = env(d);
    let a = project_environment(&env(base.displacements.clone()), &g, 3, &cut()).unwrap();
    let b = project_environment(&with, &g, 3, &cut()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn grid_must_cover_the_cutoff_sphere() {
    let g = GridGeometry::new([4, 4, 4], 0.5, Vector3::repeat(-1.0)).unwrap();
    assert!(matches!(
        project_environment(&env(vec![]), &g, 1, &cut()),
        Err(Error::InvalidParam(_))
    ));
    assert!(GridGeometry::new([0, 1, 1], 0.5, Vector3::zeros()).is_err());
    assert!(bspline_eval(4, 0.5).is_err());
}

#[test]
fn integral_projection_equals_next_order_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for p in 0..=2 {
        let spacing = 0.45;
        let shift = (p + 1) as f64 * spacing / 2.0;
        let direct_grid = GridGeometry::covering(3.0, spacing, p + 1).unwrap();
        let grid = GridGeometry {
            origin: direct_grid.origin.add_scalar(shift),
            ..direct_grid.clone()
        };
        for _ in 0..10 {
            let n = rng.random_range(1..8);
            let e = random_env(&mut rng, n, 3.2, 0.3);
            let a = integral_projection(&e, &grid, p, &cut()).unwrap();
            let b = project_environment(&e, &direct_grid, p + 1, &cut()).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-10, "p {p}: {}", a.max_abs_diff(&b));
        }
    }
}

#[test]
fn shifting_the_origin_shifts_indices() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let e = random_env(&mut rng, 5, 2.9, 0.4);
    let g = GridGeometry::covering(4.0, 0.5, 3).unwrap();
    let mut moved = g.clone();
    moved.origin.x -= g.spacing;
    moved.extents[0] += 1;
    let pairs = [
        (
            project_environment(&e, &g, 1, &cut()).unwrap(),
            project_environment(&e, &moved, 1, &cut()).unwrap(),
        ),
        (
            integral_projection(&e, &g, 1, &cut()).unwrap(),
            integral_projection(&e, &moved, 1, &cut()).unwrap(),
        ),
    ];
    for (a, b) in pairs {
        let ext = a.geometry.extents;
        for i in 0..ext[0] {
            for j in 0..ext[1] {
                for k in 0..ext[2] {
                    assert!((a.get([i, j, k]) - b.get([i + 1, j, k])).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn projection_is_smooth_across_voxel_boundaries() {
    let g = GridGeometry::covering(3.0, 0.5, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = random_env(&mut rng, 4, 2.5, 0.5);
    // Put one coordinate exactly on a voxel boundary.
    let mut d = base.displacements.clone();
    d[0].x = g.origin.x + 9.0 * g.spacing;
    let delta = 1e-6;
    for axis in 0..3 {
        let mut lo = d.clone();
        lo[0][axis] -= delta;
        let mut hi = d.clone();
        hi[0][axis] += delta;
        let a = project_environment(&env(lo), &g, 2, &cut()).unwrap();
        let b = project_environment(&env(hi), &g, 2, &cut()).unwrap();
        let diff = a.max_abs_diff(&b);
        assert!(diff < 1e-4, "axis {axis}: {diff}");
        assert!(diff > 0.0);
    }
}

fn kernel() -> GaussianPolyKernel {
    GaussianPolyKernel::new(
        2,
        3,
        0.8,
        vec![
            [1.0, 0.2, 0.0, -0.1],
            [0.5, 0.0, 0.3, 0.0],
            [-0.4, 0.1, 0.1, 0.1],
            [0.0, 1.0, 0.0, 0.0],
            [0.3, 0.0, 0.0, 0.7],
            [0.2, -0.2, 0.4, 0.0],
        ],
    )
    .unwrap()
}

#[test]
fn convolution_gating_and_linearity() {
    let q = Vector3::new(0.1, -0.2, 0.3);
    let k = kernel();
    let c = cut();
    assert_eq!(smooth_conv(&[], &[], &q, &k, &c).unwrap(), vec![0.0; 3]);
    let far = q + Vector3::new(0.0, 0.0, 3.5);
    assert_eq!(
        smooth_conv(&[far], &[vec![1.0, 2.0]], &q, &k, &c).unwrap(),
        vec![0.0; 3]
    );
    let edge = q + Vector3::new(3.0, 0.0, 0.0);
    assert_eq!(
        smooth_conv(&[edge], &[vec![1.0, 2.0]], &q, &k, &c).unwrap(),
        vec![0.0; 3]
    );
    let p = q + Vector3::new(0.5, 0.7, -0.4);
    let one = smooth_conv(&[p], &[vec![1.5, -0.5]], &q, &k, &c).unwrap();
    let two = smooth_conv(&[p, p], &[vec![1.5, -0.5], vec![1.5, -0.5]], &q, &k, &c).unwrap();
    assert!(one.iter().any(|&x| x != 0.0));
    for (a, b) in one.iter().zip(&two) {
        assert_eq!(*b, 2.0 * a);
    }
    assert!(smooth_conv(&[p], &[vec![1.0]], &q, &k, &c).is_err());
}

#[test]
fn convolution_is_continuous_at_the_cutoff() {
    let q = Vector3::zeros();
    let k = kernel();
    let dir = Vector3::new(0.3, -0.5, 0.8).normalize();
    let inside = smooth_conv(&[dir * (3.0 - 1e-6)], &[vec![1.0, 1.0]], &q, &k, &cut()).unwrap();
    assert!(inside.iter().all(|x| x.abs() < 1e-12));
}

#[test]
fn aggregations() {
    let c = cut();
    let beta = 4.0;
    let beyond = [(1.0, 3.1), (-2.0, 4.0)];
    assert_eq!(
        smooth_aggregate(&beyond, Aggregation::Sum, &c, beta).unwrap(),
        0.0
    );
    for mode in [Aggregation::Mean, Aggregation::Max, Aggregation::Min] {
        assert!(matches!(
            smooth_aggregate(&beyond, mode, &c, beta),
            Err(Error::AllZeroWeights)
        ));
    }
    let single = [(0.7, 1.0)];
    let m = smooth_aggregate(&single, Aggregation::Max, &c, beta).unwrap();
    assert!((m - 0.7).abs() <= t_of_beta(beta));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut vals: Vec<(f64, f64)> = (0..12)
        .map(|_| (rng.random_range(-2.0..2.0), rng.random_range(0.0..3.5)))
        .collect();
    for mode in [
        Aggregation::Sum,
        Aggregation::Mean,
        Aggregation::Max,
        Aggregation::Min,
    ] {
        let a = smooth_aggregate(&vals, mode, &c, beta).unwrap();
        vals.reverse();
        let b = smooth_aggregate(&vals, mode, &c, beta).unwrap();
        vals.swap(0, 5);
        let d = smooth_aggregate(&vals, mode, &c, beta).unwrap();
        assert!(
            (a - b).abs() <= 1e-12 * a.abs().max(1.0) && (a - d).abs() <= 1e-12 * a.abs().max(1.0)
        );
    }
    let interior: Vec<(f64, f64)> = vals.iter().filter(|v| v.1 < 2.5).copied().collect();
    let hard_max = interior.iter().map(|v| v.0).fold(f64::MIN, f64::max);
    let soft = smooth_aggregate(&interior, Aggregation::Max, &c, beta).unwrap();
    assert!(soft <= hard_max);
}

#[test]
fn max_aggregation_is_continuous_when_a_point_leaves() {
    let c = cut();
    let base = [(0.3, 1.0), (-0.5, 2.0)];
    let without = smooth_aggregate(&base, Aggregation::Max, &c, 8.0).unwrap();
    for mode in [Aggregation::Max, Aggregation::Min, Aggregation::Mean] {
        let without = smooth_aggregate(&base, mode, &c, 8.0).unwrap();
        let mut with = base.to_vec();
        with.push((5.0, 3.0 - 1e-7));
        let near = smooth_aggregate(&with, mode, &c, 8.0).unwrap();
        assert!((near - without).abs() < 1e-8, "{mode:?}");
    }
    assert!(without > -0.5 && without < 0.3);
}

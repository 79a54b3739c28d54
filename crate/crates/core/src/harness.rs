//! Experiment drivers: equivariance and smoothness checks, finite-difference
//! forces and the loose/tight tradeoff sweep. Reports serialize to CSV.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::backbones::{Backbone, OutputKind};
use crate::ecse::{EcseConfig, Symmetrized};
use crate::error::{Error, Result};
use crate::smoothmath::Frame;
use crate::structures::Structure;

/// Default amplitude ladder of the smoothness experiment.
pub const DEFAULT_AMPLITUDES: [f64; 6] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

/// Amplitudes over which the log-log slope is fitted.
pub const SLOPE_RANGE: (f64, f64) = (1e-6, 1e-3);

/// Amplitude at which the reference slope `|Δ| / σ` is measured.
pub const SCALE_AMPLITUDE: f64 = 1e-3;

/// Small-noise spikes are looked for at and below this amplitude.
pub const SPIKE_AMPLITUDE: f64 = 1e-4;

/// A row is a spike when `|Δ| > SPIKE_FACTOR σ scale`.
pub const SPIKE_FACTOR: f64 = 1e3;

/// A row breaks the trend when `|Δ|` exceeds the fitted line by this factor.
pub const TREND_FACTOR: f64 = 10.0;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivarianceCase {
    pub structure_id: usize,
    pub rotation_id: usize,
    /// `|y(R s) - R y(s)| / max(|y(s)|, |y(R s)|)`, 0 when both vanish.
    pub relative: f64,
    pub absolute: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivarianceReport {
    pub kind: OutputKind,
    pub cases: Vec<EquivarianceCase>,
    pub max_relative: f64,
    pub max_absolute: f64,
    /// Pass or fail against the tolerance, `None` for reference runs.
    pub passed: Option<bool>,
}

impl EquivarianceReport {
    /// Share of cases whose relative discrepancy exceeds `threshold`.
    pub fn fraction_above(&self, threshold: f64) -> f64 {
        self.cases.iter().filter(|c| c.relative > threshold).count() as f64
            / self.cases.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("structure_id,rotation_id,relative,absolute\n");
        for c in &self.cases {
            let _ = writeln!(
                out,
                "{},{},{:e},{:e}",
                c.structure_id, c.rotation_id, c.relative, c.absolute
            );
        }
        out
    }
}

/// Compares `y(R s)` with `R y(s)` for `n_rotations` Haar rotations per
/// structure. With `tol = None` the run is a reference measurement (raw
/// backbones are expected to fail) and carries no verdict.
pub fn verify_equivariance(
    model: &dyn Backbone,
    structures: &[Structure],
    n_rotations: usize,
    seed: u64,
    tol: Option<f64>,
) -> Result<EquivarianceReport> {
    if structures.is_empty() || n_rotations == 0 {
        return Err(Error::EmptyInput("verify_equivariance"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells: Vec<(usize, usize, Frame)> = (0..structures.len())
        .flat_map(|i| (0..n_rotations).map(move |k| (i, k)))
        .map(|(i, k)| (i, k, Frame::random(&mut rng)))
        .collect();
    let base: Vec<Vec<f64>> = structures
        .par_iter()
        .map(|s| Ok(model.eval_structure(s)?.values))
        .collect::<Result<_>>()?;
    let cases: Vec<EquivarianceCase> = cells
        .par_iter()
        .map(|(i, k, r)| {
            let y = model.eval_structure(&structures[*i].rotated(r))?;
            let expected =
                crate::backbones::rotate_tensor(&base[*i], model.output_kind().rank, r.matrix());
            let absolute = diff_norm(&y.values, &expected);
            let scale = norm(&expected).max(norm(&y.values));
            Ok(EquivarianceCase {
                structure_id: *i,
                rotation_id: *k,
                relative: if scale == 0.0 { 0.0 } else { absolute / scale },
                absolute,
            })
        })
        .collect::<Result<_>>()?;
    let max_relative = cases.iter().map(|c| c.relative).fold(0.0, f64::max);
    let max_absolute = cases.iter().map(|c| c.absolute).fold(0.0, f64::max);
    Ok(EquivarianceReport {
        kind: model.output_kind(),
        cases,
        max_relative,
        max_absolute,
        passed: tol.map(|t| max_relative <= t),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessRow {
    pub structure_id: usize,
    pub sigma: f64,
    pub perturbation_id: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessReport {
    pub rows: Vec<SmoothnessRow>,
    /// `(σ, max |Δ|)` per amplitude.
    pub max_by_amplitude: Vec<(f64, f64)>,
    /// Least-squares slope and intercept of `log10 max|Δ|` against
    /// `log10 σ` over [`SLOPE_RANGE`].
    pub slope: f64,
    pub intercept: f64,
    /// Median of `|Δ| / σ` at the reference amplitude.
    pub scale: f64,
    /// Largest `|Δ| / (σ scale)` at `σ <= SPIKE_AMPLITUDE`.
    pub max_spike_ratio: f64,
    pub spikes: Vec<SmoothnessRow>,
    pub trend_violations: Vec<SmoothnessRow>,
}

impl SmoothnessReport {
    pub fn passes(&self, slope_lo: f64, slope_hi: f64) -> bool {
        self.slope >= slope_lo
            && self.slope <= slope_hi
            && self.spikes.is_empty()
            && self.trend_violations.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("structure_id,sigma,perturbation_id,abs_delta\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:e},{},{:e}",
                r.structure_id, r.sigma, r.perturbation_id, r.delta
            );
        }
        out
    }
}

fn perturbed(s: &Structure, sigma: f64, rng: &mut ChaCha8Rng) -> Structure {
    let mut p = s.clone();
    for x in &mut p.positions {
        let xi = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        *x += xi * sigma;
    }
    p
}

/// Least-squares line through `(x, y)`.
fn fit_line(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let b = sxy / sxx;
    Some((b, my - b * mx))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Applies `n_perturbations` i.i.d. Gaussian displacements of each amplitude
/// to every coordinate and records `|y(s + σ ξ) - y(s)|`. Each cell draws from
/// its own stream, so the report does not depend on the worker count.
pub fn verify_smoothness(
    model: &dyn Backbone,
    structures: &[Structure],
    amplitudes: &[f64],
    n_perturbations: usize,
    seed: u64,
) -> Result<SmoothnessReport> {
    if structures.is_empty() || amplitudes.is_empty() || n_perturbations == 0 {
        return Err(Error::EmptyInput("verify_smoothness"));
    }
    if amplitudes.iter().any(|&a| !(a >= 0.0 && a.is_finite()))
        || amplitudes.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::param(
            "amplitudes must be non-negative and strictly ascending",
        ));
    }
    let base: Vec<Vec<f64>> = structures
        .par_iter()
        .map(|s| Ok(model.eval_structure(s)?.values))
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, usize, usize)> = (0..structures.len())
        .flat_map(|i| {
            (0..amplitudes.len()).flat_map(move |a| (0..n_perturbations).map(move |k| (i, a, k)))
        })
        .collect();
    let rows: Vec<SmoothnessRow> = cells
        .par_iter()
        .enumerate()
        .map(|(c, &(i, a, k))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let sigma = amplitudes[a];
            let y = model.eval_structure(&perturbed(&structures[i], sigma, &mut rng))?;
            Ok(SmoothnessRow {
                structure_id: i,
                sigma,
                perturbation_id: k,
                delta: diff_norm(&y.values, &base[i]),
            })
        })
        .collect::<Result<_>>()?;
    Ok(summarize(rows, amplitudes))
}

fn summarize(rows: Vec<SmoothnessRow>, amplitudes: &[f64]) -> SmoothnessReport {
    let max_by_amplitude: Vec<(f64, f64)> = amplitudes
        .iter()
        .map(|&s| {
            let m = rows
                .iter()
                .filter(|r| r.sigma == s)
                .map(|r| r.delta)
                .fold(0.0, f64::max);
            (s, m)
        })
        .collect();
    let fit: Vec<(f64, f64)> = max_by_amplitude
        .iter()
        .filter(|(s, m)| {
            *s >= SLOPE_RANGE.0 * 0.999 && *s <= SLOPE_RANGE.1 * 1.001 && *s > 0.0 && *m > 0.0
        })
        .map(|(s, m)| (s.log10(), m.log10()))
        .collect();
    let (slope, intercept) = fit_line(&fit).unwrap_or((f64::NAN, f64::NAN));

    let positive: Vec<f64> = amplitudes.iter().copied().filter(|&s| s > 0.0).collect();
    let ref_sigma = positive.iter().copied().min_by(|a, b| {
        (a.ln() - SCALE_AMPLITUDE.ln())
            .abs()
            .total_cmp(&(b.ln() - SCALE_AMPLITUDE.ln()).abs())
    });
    let scale = ref_sigma.map_or(f64::NAN, |rs| {
        median(
            rows.iter()
                .filter(|r| r.sigma == rs)
                .map(|r| r.delta / rs)
                .collect(),
        )
    });

    let mut spikes = Vec::new();
    let mut trend_violations = Vec::new();
    let mut max_spike_ratio = 0.0f64;
    for r in &rows {
        if r.sigma <= 0.0 {
            continue;
        }
        if r.sigma <= SPIKE_AMPLITUDE * 1.001 {
            let ratio = r.delta / (r.sigma * scale);
            if ratio.is_finite() {
                max_spike_ratio = max_spike_ratio.max(ratio);
            }
            if r.delta > SPIKE_FACTOR * r.sigma * scale {
                spikes.push(*r);
            }
        }
        if r.sigma <= SLOPE_RANGE.1 * 1.001 && slope.is_finite() {
            let trend = 10f64.powf(intercept + slope * r.sigma.log10());
            if r.delta > TREND_FACTOR * trend {
                trend_violations.push(*r);
            }
        }
    }
    SmoothnessReport {
        rows,
        max_by_amplitude,
        slope,
        intercept,
        scale,
        max_spike_ratio,
        spikes,
        trend_violations,
    }
}

fn scalar_energy(model: &dyn Backbone, s: &Structure) -> Result<f64> {
    Ok(model.eval_structure(s)?.value())
}

/// Central-difference forces `-dE/dr` of a scalar model.
pub fn fd_forces(model: &dyn Backbone, s: &Structure, h: f64) -> Result<Vec<Vector3<f64>>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::param(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    if model.output_kind() != OutputKind::SCALAR {
        return Err(Error::ShapeMismatch("forces need a scalar model".into()));
    }
    let comps: Vec<f64> = (0..3 * s.len())
        .into_par_iter()
        .map(|k| {
            let (i, c) = (k / 3, k % 3);
            let mut p = s.clone();
            p.positions[i][c] += h;
            let mut m = s.clone();
            m.positions[i][c] -= h;
            Ok(-(scalar_energy(model, &p)? - scalar_energy(model, &m)?) / (2.0 * h))
        })
        .collect::<Result<_>>()?;
    Ok(comps
        .chunks(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect())
}

fn forces_diff(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm_squared())
        .sum::<f64>()
        .sqrt()
}

/// First step of the Richardson descent.
pub const RICHARDSON_STEP: f64 = 1e-3;

/// Smallest step tried before round-off takes over.
pub const RICHARDSON_MIN_STEP: f64 = 1e-6;

/// Consecutive ratios closer than this (relative) count as settled.
pub const RICHARDSON_SETTLE: f64 = 0.05;

/// `|F(h) - F(h/2)| / |F(h/2) - F(h/4)|`, close to 4 for a second-order
/// error.
pub fn richardson_ratio(model: &dyn Backbone, s: &Structure, h: f64) -> Result<f64> {
    let f1 = fd_forces(model, s, h)?;
    let f2 = fd_forces(model, s, h / 2.0)?;
    let f4 = fd_forces(model, s, h / 4.0)?;
    Ok(forces_diff(&f1, &f2) / forces_diff(&f2, &f4))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RichardsonEstimate {
    /// Base step at which the ratio settled.
    pub step: f64,
    pub ratio: f64,
    pub settled: bool,
}

/// Halves the step from `h0` until two consecutive Richardson ratios agree
/// within [`RICHARDSON_SETTLE`]. Near steep but smooth switching regions the
/// asymptotic regime starts far below any fixed step, while a genuine kink
/// settles at a ratio near 2 instead of 4.
pub fn richardson_estimate(
    model: &dyn Backbone,
    s: &Structure,
    h0: f64,
) -> Result<RichardsonEstimate> {
    if !(h0 > RICHARDSON_MIN_STEP) {
        return Err(Error::param(format!(
            "base step must exceed {RICHARDSON_MIN_STEP:e}, got {h0}"
        )));
    }
    let mut forces = vec![
        fd_forces(model, s, h0)?,
        fd_forces(model, s, h0 / 2.0)?,
        fd_forces(model, s, h0 / 4.0)?,
    ];
    let mut h = h0;
    let mut prev: Option<f64> = None;
    loop {
        let k = forces.len();
        let ratio = forces_diff(&forces[k - 3], &forces[k - 2])
            / forces_diff(&forces[k - 2], &forces[k - 1]);
        if let Some(p) = prev {
            if (ratio - p).abs() <= RICHARDSON_SETTLE * ratio.abs() {
                return Ok(RichardsonEstimate {
                    step: h,
                    ratio,
                    settled: true,
                });
            }
        }
        if h / 8.0 < RICHARDSON_MIN_STEP || !ratio.is_finite() {
            return Ok(RichardsonEstimate {
                step: h,
                ratio,
                settled: false,
            });
        }
        prev = Some(ratio);
        h /= 2.0;
        forces.push(fd_forces(model, s, h / 4.0)?);
    }
}

/// Sum of all forces; zero for a translation-invariant model up to the
/// `O(h^2)` error of the difference quotient.
pub fn net_force(forces: &[Vector3<f64>]) -> Vector3<f64> {
    forces.iter().sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub amplitudes: Vec<f64>,
    pub n_perturbations: usize,
    pub n_rotations: usize,
    pub seed: u64,
    pub equivariance_tol: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            amplitudes: vec![1e-6, 1e-5, 1e-4, 1e-3],
            n_perturbations: 10,
            n_rotations: 5,
            seed: 0,
            equivariance_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub preset: String,
    pub mean_frames: f64,
    pub slope: f64,
    pub max_spike_ratio: f64,
    pub spikes: usize,
    pub max_equivariance: f64,
    pub equivariant: bool,
    pub wall_seconds: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("preset,mean_frames,smoothness_slope,max_spike,spikes,max_equivariance,equivariant,wall_time_s\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{:e},{},{:e},{},{:.3}",
            r.preset,
            r.mean_frames,
            r.slope,
            r.max_spike_ratio,
            r.spikes,
            r.max_equivariance,
            r.equivariant,
            r.wall_seconds
        );
    }
    out
}

/// Mean number of frames per environment after pruning.
pub fn mean_frames(model: &Symmetrized, structures: &[Structure]) -> Result<f64> {
    let mut total = 0usize;
    let mut n = 0usize;
    for s in structures {
        let c = model.frame_counts(s)?;
        total += c.iter().sum::<usize>();
        n += c.len();
    }
    Ok(total as f64 / n.max(1) as f64)
}

/// Symmetrizes `backbone` with each named config and measures frame counts,
/// smoothness and equivariance.
pub fn sweep_tradeoff(
    backbone: Arc<dyn Backbone>,
    aux: Option<Arc<dyn Backbone>>,
    structures: &[Structure],
    presets: &[(String, EcseConfig)],
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    if presets.len() < 2 {
        return Err(Error::param(
            "a tradeoff sweep needs at least two configurations",
        ));
    }
    presets
        .iter()
        .map(|(name, cfg)| {
            let t = Instant::now();
            let model = Symmetrized::new(backbone.clone(), aux.clone(), cfg.clone())?;
            let frames = mean_frames(&model, structures)?;
            let smooth = verify_smoothness(
                &model,
                structures,
                &opts.amplitudes,
                opts.n_perturbations,
                opts.seed,
            )?;
            let eq = verify_equivariance(
                &model,
                structures,
                opts.n_rotations,
                opts.seed,
                Some(opts.equivariance_tol),
            )?;
            Ok(SweepRow {
                preset: name.clone(),
                mean_frames: frames,
                slope: smooth.slope,
                max_spike_ratio: smooth.max_spike_ratio,
                spikes: smooth.spikes.len(),
                max_equivariance: eq.max_relative,
                equivariant: eq.passed == Some(true),
                wall_seconds: t.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_recovers_slope() {
        let pts: Vec<(f64, f64)> = (0..5).map(|k| (k as f64, 2.0 - 0.5 * k as f64)).collect();
        let (b, a) = fit_line(&pts).unwrap();
        assert!((b + 0.5).abs() < 1e-14 && (a - 2.0).abs() < 1e-14);
        assert!(fit_line(&pts[..1]).is_none());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn spikes_are_flagged() {
        let amps = [1e-5, 1e-4, 1e-3];
        let mut rows = Vec::new();
        for (a, &s) in amps.iter().enumerate() {
            for k in 0..4 {
                rows.push(SmoothnessRow {
                    structure_id: 0,
                    sigma: s,
                    perturbation_id: k,
                    delta: 2.0 * s * if a == 0 && k == 2 { 5e3 } else { 1.0 },
                });
            }
        }
        let r = summarize(rows, &amps);
        assert_eq!(r.scale, 2.0);
        assert_eq!(r.spikes.len(), 1);
        assert_eq!(r.spikes[0].perturbation_id, 2);
        assert!((r.max_spike_ratio - 5e3).abs() < 1e-6);
    }
}

use nalgebra::Vector3;

use super::config::{AuxParams, CollinearMode, EcseConfig, PruneParams};
use crate::error::Result;
use crate::smoothmath::{
    fc, qc1, smooth_max, smooth_max_weighted, smooth_min_weighted, t_of_beta, AngularParams,
    CutoffParams, Frame,
};
use crate::structures::AtomicEnvironment;

/// Below this smooth max of squared sines the adaptive-ω ensemble is treated
/// as the exact collinear singularity.
const ADAPTIVE_SINGULAR: f64 = 1e-20;

/// A frame of the ensemble with its weight and the neighbor pair defining it.
/// Frames along a single axis (collinear fallback) use `pair = (j, j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedFrame {
    pub frame: Frame,
    pub weight: f64,
    pub pair: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub frames: Vec<WeightedFrame>,
    /// Inner cutoff the weights were computed with.
    pub r_in: f64,
    /// Weight of the auxiliary model, 0 unless an aux term is active.
    pub aux_weight: f64,
    /// Angular threshold used in adaptive-ω mode.
    pub omega: Option<f64>,
    /// The frames are the adaptive-ω collinear limit and carry unit weights.
    pub singular: bool,
}

impl Ensemble {
    pub fn total_weight(&self) -> f64 {
        self.frames.iter().map(|f| f.weight).sum()
    }
}

/// `|r_a^ x r_b^|^2`.
pub fn cross_sq(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a / a.norm()).cross(&(b / b.norm())).norm_squared()
}

/// `f_c(r_j) f_c(r_j') q_c(|r_j^ x r_j'^|^2)` with the outer cutoff.
pub fn pair_weight(env: &AtomicEnvironment, j: usize, jp: usize, cfg: &EcseConfig) -> f64 {
    let radial = fc(env.distances[j], &cfg.outer) * fc(env.distances[jp], &cfg.outer);
    if radial == 0.0 {
        return 0.0;
    }
    radial
        * cfg.qc_kind.eval(
            cross_sq(&env.displacements[j], &env.displacements[jp]),
            &cfg.angular,
        )
}

/// Smooth inner radius that reaches out to the closest non-collinear pair.
pub fn adaptive_inner_cutoff(env: &AtomicEnvironment, cfg: &EcseConfig) -> Result<f64> {
    let outer = &cfg.outer;
    let gate = AngularParams::unbounded(
        cfg.angular.omega() + cfg.angular.delta_omega(),
        cfg.angular.delta_omega(),
    )?;
    let t = t_of_beta(cfg.beta);
    let radial: Vec<f64> = env.distances.iter().map(|&r| fc(r, outer)).collect();
    let mut entries = Vec::new();
    for j in 0..env.len() {
        if radial[j] == 0.0 {
            continue;
        }
        for jp in j + 1..env.len() {
            if radial[jp] == 0.0 {
                continue;
            }
            let p = radial[j]
                * radial[jp]
                * qc1(
                    cross_sq(&env.displacements[j], &env.displacements[jp]),
                    &gate,
                );
            if p > 0.0 {
                let far = smooth_max(&[env.distances[j], env.distances[jp]], cfg.beta)?;
                entries.push((far + t, p));
            }
        }
    }
    entries.push((outer.r_c(), 1.0));
    // Pairs in the outer transition band can push the smooth min past R_out.
    // Every inner gate is 1 inside R_out from R_out + Δ_Rc on, so clamping
    // there leaves all weights unchanged.
    let cap = outer.r_c() + outer.delta();
    Ok((smooth_min_weighted(&entries, cfg.beta)? + outer.delta()).min(cap))
}

/// Per-neighbor radial factor of the frame weights: outer gate times the
/// inner gate at `r_in`.
fn radial_weights(env: &AtomicEnvironment, cfg: &EcseConfig, r_in: f64) -> Result<Vec<f64>> {
    let inner = CutoffParams::new(r_in, cfg.outer.delta().min(r_in))?;
    Ok(env
        .distances
        .iter()
        .map(|&r| {
            let w = fc(r, &cfg.outer);
            if w == 0.0 {
                0.0
            } else {
                w * fc(r, &inner)
            }
        })
        .collect())
}

/// Raw ensemble over ordered pairs, before stitching and pruning.
pub fn frame_ensemble(env: &AtomicEnvironment, cfg: &EcseConfig) -> Result<Ensemble> {
    let r_in = if cfg.adaptive_inner {
        adaptive_inner_cutoff(env, cfg)?
    } else {
        cfg.outer.r_c()
    };
    let radial = radial_weights(env, cfg, r_in)?;
    let n = env.len();
    let d = &env.displacements;

    let (angular, omega) = match cfg.collinear_mode {
        CollinearMode::AuxModel => (cfg.angular, None),
        CollinearMode::AdaptiveOmega => {
            let mut sines = Vec::new();
            for j in 0..n {
                for jp in j + 1..n {
                    let w = radial[j] * radial[jp];
                    if w > 0.0 {
                        sines.push((cross_sq(&d[j], &d[jp]), w));
                    }
                }
            }
            let top = if sines.is_empty() {
                0.0
            } else {
                smooth_max_weighted(&sines, cfg.beta)?
            };
            if top < ADAPTIVE_SINGULAR {
                return Ok(Ensemble {
                    frames: axis_frames(radial.iter().position(|&w| w > 0.0).map(|j| (d[j], j)))?,
                    r_in,
                    aux_weight: 0.0,
                    omega: Some(0.5 * top),
                    singular: true,
                });
            }
            let omega = 0.5 * top;
            (AngularParams::unbounded(omega, omega)?, Some(omega))
        }
    };

    let mut frames = Vec::new();
    for j in 0..n {
        if radial[j] == 0.0 {
            continue;
        }
        for jp in 0..n {
            if jp == j || radial[jp] == 0.0 {
                continue;
            }
            let w = radial[j] * radial[jp] * cfg.qc_kind.eval(cross_sq(&d[j], &d[jp]), &angular);
            if w > 0.0 {
                frames.push(WeightedFrame {
                    frame: Frame::from_pair(&d[j], &d[jp])?,
                    weight: w,
                    pair: (j, jp),
                });
                if omega.is_some() {
                    frames.push(WeightedFrame {
                        frame: Frame::from_pair(&-d[j], &d[jp])?,
                        weight: w,
                        pair: (j, jp),
                    });
                }
            }
        }
    }
    Ok(Ensemble {
        frames,
        r_in,
        aux_weight: 0.0,
        omega,
        singular: false,
    })
}

/// Collinear limit of the adaptive-ω average: x along `±axis`, or the
/// identity frame without an axis. The frames carry the neighbor index.
pub(crate) fn axis_frames(axis: Option<(Vector3<f64>, usize)>) -> Result<Vec<WeightedFrame>> {
    let Some((axis, j)) = axis else {
        return Ok(vec![WeightedFrame {
            frame: Frame::identity(),
            weight: 1.0,
            pair: (0, 0),
        }]);
    };
    // Any direction far from the axis fixes the perpendicular pair; the inputs
    // lie on the axis, so the choice only enters through rounding.
    let helper = [Vector3::x(), Vector3::y(), Vector3::z()]
        .into_iter()
        .min_by(|a, b| a.dot(&axis).abs().total_cmp(&b.dot(&axis).abs()))
        .unwrap();
    Ok(vec![
        WeightedFrame {
            frame: Frame::from_pair(&axis, &helper)?,
            weight: 1.0,
            pair: (j, j),
        },
        WeightedFrame {
            frame: Frame::from_pair(&-axis, &helper)?,
            weight: 1.0,
            pair: (j, j),
        },
    ])
}

/// Blends the two orders of each pair so that only the farther-first frame
/// survives once `|r_j - r_j'| >= delta_r`.
pub fn stitch_unordered_pairs(
    frames: Vec<WeightedFrame>,
    env: &AtomicEnvironment,
    delta_r: f64,
) -> Result<Vec<WeightedFrame>> {
    let gate = AngularParams::unbounded(0.0, 2.0 * delta_r)?;
    Ok(frames
        .into_iter()
        .filter_map(|mut f| {
            let (j, jp) = f.pair;
            f.weight *= qc1(env.distances[j] - env.distances[jp] + delta_r, &gate);
            (f.weight > 0.0).then_some(f)
        })
        .collect())
}

/// Soft removal of weights well below the largest one, active only once the
/// largest weight is clearly nonzero.
pub fn prune(
    frames: Vec<WeightedFrame>,
    p: &PruneParams,
    beta_w: f64,
) -> Result<Vec<WeightedFrame>> {
    if frames.is_empty() {
        return Ok(frames);
    }
    let pairs: Vec<(f64, f64)> = frames.iter().map(|f| (f.weight, f.weight)).collect();
    let w_max = smooth_max_weighted(&pairs, beta_w)?;
    let gate = AngularParams::unbounded(w_max * p.t_f, w_max * p.delta_t_f)?;
    let e = fc(w_max, &CutoffParams::new(p.t_e, p.delta_t_e)?);
    Ok(frames
        .into_iter()
        .filter_map(|mut f| {
            let w = f.weight;
            f.weight = e * w + (1.0 - e) * w * qc1(w, &gate);
            (f.weight > 0.0).then_some(f)
        })
        .collect())
}

/// Weight of the auxiliary model: 1 for an empty ensemble, 0 as soon as the
/// largest frame weight clears `t_aux`.
pub fn aux_weight(frames: &[WeightedFrame], a: &AuxParams, beta_w: f64) -> Result<f64> {
    if frames.is_empty() {
        return Ok(1.0);
    }
    let pairs: Vec<(f64, f64)> = frames.iter().map(|f| (f.weight, f.weight)).collect();
    let w_max = smooth_max_weighted(&pairs, beta_w)?;
    Ok(fc(w_max, &CutoffParams::new(a.t_aux, a.delta_aux)?))
}

/// Full pipeline: ensemble, stitching, pruning, then the aux weight when
/// `with_aux` is set.
pub fn build_ensemble(
    env: &AtomicEnvironment,
    cfg: &EcseConfig,
    with_aux: bool,
) -> Result<Ensemble> {
    let mut ens = frame_ensemble(env, cfg)?;
    if ens.singular {
        return Ok(ens);
    }
    if let Some(dr) = cfg.stitch {
        ens.frames = stitch_unordered_pairs(ens.frames, env, dr)?;
    }
    if let Some(p) = &cfg.prune {
        ens.frames = prune(ens.frames, p, cfg.beta_w)?;
    }
    if with_aux && cfg.collinear_mode == CollinearMode::AuxModel {
        if let Some(a) = &cfg.aux {
            ens.aux_weight = aux_weight(&ens.frames, a, cfg.beta_w)?;
        }
    }
    Ok(ens)
}

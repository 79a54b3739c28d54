use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::smoothmath::{AngularParams, CutoffParams, QcKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneParams {
    pub t_f: f64,
    pub delta_t_f: f64,
    pub t_e: f64,
    pub delta_t_e: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxParams {
    pub t_aux: f64,
    pub delta_aux: f64,
}

/// What happens when every pair in an environment is collinear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollinearMode {
    /// Blend in an auxiliary equivariant model with weight `w_aux`.
    AuxModel,
    /// Scale ω with the environment and add opposite-orientation frames.
    AdaptiveOmega,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    /// One ensemble per environment, outputs summed over atoms.
    PerAtom,
    /// Union of all ensembles; the whole structure is evaluated per frame.
    GlobalPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcseConfig {
    pub outer: CutoffParams,
    pub angular: AngularParams,
    pub qc_kind: QcKind,
    pub beta: f64,
    pub beta_w: f64,
    pub prune: Option<PruneParams>,
    pub aux: Option<AuxParams>,
    pub collinear_mode: CollinearMode,
    /// Ordered-pair stitching width `Δ_r`.
    pub stitch: Option<f64>,
    pub n_extra_aug: usize,
    pub aug_seed: u64,
    pub mode: PoolMode,
    pub adaptive_inner: bool,
}

const KEYS: &[&str] = &[
    "preset",
    "r_out",
    "delta_rc",
    "omega",
    "delta_omega",
    "qc",
    "beta",
    "beta_w",
    "prune",
    "t_f",
    "delta_t_f",
    "t_e",
    "delta_t_e",
    "aux",
    "t_aux",
    "delta_aux",
    "collinear_mode",
    "stitch_delta_r",
    "n_extra_aug",
    "aug_seed",
    "mode",
    "adaptive_inner",
];

impl EcseConfig {
    /// Wide transitions, few frames pruned.
    pub fn loose() -> Self {
        EcseConfig {
            outer: CutoffParams::new(3.5, 0.5).unwrap(),
            angular: AngularParams::new(0.1, 0.2).unwrap(),
            qc_kind: QcKind::Qc1,
            beta: 5.0,
            beta_w: 10.0,
            prune: Some(PruneParams {
                t_f: 0.4,
                delta_t_f: 0.2,
                t_e: 0.05,
                delta_t_e: 0.02,
            }),
            aux: Some(AuxParams {
                t_aux: 1e-3,
                delta_aux: 1e-3,
            }),
            collinear_mode: CollinearMode::AuxModel,
            stitch: None,
            n_extra_aug: 0,
            aug_seed: 0,
            mode: PoolMode::PerAtom,
            adaptive_inner: true,
        }
    }

    /// Sharp transitions and a small inner sphere: fewer frames, larger
    /// derivatives.
    pub fn tight() -> Self {
        EcseConfig {
            outer: CutoffParams::new(3.5, 0.2).unwrap(),
            angular: AngularParams::new(0.1, 0.1).unwrap(),
            beta: 50.0,
            beta_w: 50.0,
            ..Self::loose()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "loose" => Ok(Self::loose()),
            "tight" => Ok(Self::tight()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected loose or tight)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("beta_w", self.beta_w)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(p) = &self.prune {
            if !(p.t_f > 0.0 && p.t_f < 1.0) {
                return Err(Error::Config(format!(
                    "t_f must lie in (0, 1), got {}",
                    p.t_f
                )));
            }
            if !(p.delta_t_f > 0.0) {
                return Err(Error::Config(format!(
                    "delta_t_f must be positive, got {}",
                    p.delta_t_f
                )));
            }
            if !(p.delta_t_e > 0.0 && p.delta_t_e < p.t_e) {
                return Err(Error::Config(format!(
                    "need 0 < delta_t_e < t_e, got {} and {}",
                    p.delta_t_e, p.t_e
                )));
            }
        }
        if let Some(a) = &self.aux {
            if !(a.t_aux > 0.0 && a.delta_aux > 0.0 && a.delta_aux <= a.t_aux) {
                return Err(Error::Config(format!(
                    "need 0 < delta_aux <= t_aux, got {} and {}",
                    a.delta_aux, a.t_aux
                )));
            }
        }
        if let Some(d) = self.stitch {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config(format!(
                    "stitch_delta_r must be positive, got {d}"
                )));
            }
        }
        Ok(())
    }

    /// Reads a config: the named `preset` (default loose) with the given keys
    /// overridden.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(KEYS)?;
        let mut c = Self::preset(kv.raw("preset").unwrap_or("loose"))?;
        c.outer = CutoffParams::new(
            kv.get_or("r_out", c.outer.r_c())?,
            kv.get_or("delta_rc", c.outer.delta())?,
        )?;
        c.angular = AngularParams::new(
            kv.get_or("omega", c.angular.omega())?,
            kv.get_or("delta_omega", c.angular.delta_omega())?,
        )?;
        if let Some(q) = kv.raw("qc") {
            c.qc_kind = match q {
                "qc1" => QcKind::Qc1,
                "qc2" => QcKind::Qc2,
                other => {
                    return Err(Error::Config(format!(
                        "qc must be qc1 or qc2, got {other:?}"
                    )))
                }
            };
        }
        c.beta = kv.get_or("beta", c.beta)?;
        c.beta_w = kv.get_or("beta_w", c.beta_w)?;
        let base_prune = c.prune.unwrap_or(Self::loose().prune.unwrap());
        c.prune = if kv.get_or("prune", c.prune.is_some())? {
            Some(PruneParams {
                t_f: kv.get_or("t_f", base_prune.t_f)?,
                delta_t_f: kv.get_or("delta_t_f", base_prune.delta_t_f)?,
                t_e: kv.get_or("t_e", base_prune.t_e)?,
                delta_t_e: kv.get_or("delta_t_e", base_prune.delta_t_e)?,
            })
        } else {
            None
        };
        let base_aux = c.aux.unwrap_or(Self::loose().aux.unwrap());
        c.aux = if kv.get_or("aux", c.aux.is_some())? {
            Some(AuxParams {
                t_aux: kv.get_or("t_aux", base_aux.t_aux)?,
                delta_aux: kv.get_or("delta_aux", base_aux.delta_aux)?,
            })
        } else {
            None
        };
        if let Some(m) = kv.raw("collinear_mode") {
            c.collinear_mode = match m {
                "aux_model" => CollinearMode::AuxModel,
                "adaptive_omega" => CollinearMode::AdaptiveOmega,
                other => {
                    return Err(Error::Config(format!(
                        "collinear_mode must be aux_model or adaptive_omega, got {other:?}"
                    )))
                }
            };
        }
        c.stitch = match kv.get::<f64>("stitch_delta_r")? {
            Some(d) if d == 0.0 => None,
            other => other.or(c.stitch),
        };
        c.n_extra_aug = kv.get_or("n_extra_aug", c.n_extra_aug)?;
        c.aug_seed = kv.get_or("aug_seed", c.aug_seed)?;
        if let Some(m) = kv.raw("mode") {
            c.mode = match m {
                "per_atom" => PoolMode::PerAtom,
                "global_pool" => PoolMode::GlobalPool,
                other => {
                    return Err(Error::Config(format!(
                        "mode must be per_atom or global_pool, got {other:?}"
                    )))
                }
            };
        }
        c.adaptive_inner = kv.get_or("adaptive_inner", c.adaptive_inner)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("r_out", self.outer.r_c());
        kv.set("delta_rc", self.outer.delta());
        kv.set("omega", self.angular.omega());
        kv.set("delta_omega", self.angular.delta_omega());
        kv.set(
            "qc",
            match self.qc_kind {
                QcKind::Qc1 => "qc1",
                QcKind::Qc2 => "qc2",
            },
        );
        kv.set("beta", self.beta);
        kv.set("beta_w", self.beta_w);
        kv.set("prune", self.prune.is_some());
        if let Some(p) = &self.prune {
            kv.set("t_f", p.t_f);
            kv.set("delta_t_f", p.delta_t_f);
            kv.set("t_e", p.t_e);
            kv.set("delta_t_e", p.delta_t_e);
        }
        kv.set("aux", self.aux.is_some());
        if let Some(a) = &self.aux {
            kv.set("t_aux", a.t_aux);
            kv.set("delta_aux", a.delta_aux);
        }
        kv.set(
            "collinear_mode",
            match self.collinear_mode {
                CollinearMode::AuxModel => "aux_model",
                CollinearMode::AdaptiveOmega => "adaptive_omega",
            },
        );
        kv.set("stitch_delta_r", self.stitch.unwrap_or(0.0));
        kv.set("n_extra_aug", self.n_extra_aug);
        kv.set("aug_seed", self.aug_seed);
        kv.set(
            "mode",
            match self.mode {
                PoolMode::PerAtom => "per_atom",
                PoolMode::GlobalPool => "global_pool",
            },
        );
        kv.set("adaptive_inner", self.adaptive_inner);
        kv
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvMap::parse(&std::fs::read_to_string(path)?)?)
    }
}

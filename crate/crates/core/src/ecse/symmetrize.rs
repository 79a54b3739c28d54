use std::sync::Arc;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{CollinearMode, EcseConfig, PoolMode};
use super::ensemble::{aux_weight, axis_frames, build_ensemble, Ensemble, WeightedFrame};
use crate::backbones::{Backbone, Locality, OutputKind, Prediction};
use crate::error::{Error, Result};
use crate::smoothmath::Frame;
use crate::structures::{environments, AtomicEnvironment, Structure};

/// A backbone made rotationally equivariant by averaging over a weighted
/// ensemble of local frames.
#[derive(Clone)]
pub struct Symmetrized {
    backbone: Arc<dyn Backbone>,
    aux: Option<Arc<dyn Backbone>>,
    cfg: EcseConfig,
    augment: Vec<Matrix3<f64>>,
}

impl std::fmt::Debug for Symmetrized {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Symmetrized")
            .field("cfg", &self.cfg)
            .field("has_aux", &self.aux.is_some())
            .field("n_aug", &self.augment.len())
            .finish()
    }
}

impl Symmetrized {
    /// `aux` must be equivariant on its own; it is used only in aux mode.
    pub fn new(
        backbone: Arc<dyn Backbone>,
        aux: Option<Arc<dyn Backbone>>,
        cfg: EcseConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let kind = backbone.output_kind();
        if cfg.collinear_mode == CollinearMode::AdaptiveOmega && kind.is_covariant() {
            return Err(Error::CovariantWithAdaptiveOmega);
        }
        if let Some(a) = &aux {
            if a.output_kind() != kind {
                return Err(Error::ShapeMismatch(format!(
                    "aux model has rank {} output, backbone rank {}",
                    a.output_kind().rank,
                    kind.rank
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.aug_seed);
        let augment = (0..cfg.n_extra_aug)
            .map(|_| *Frame::random(&mut rng).matrix())
            .collect();
        Ok(Symmetrized {
            backbone,
            aux,
            cfg,
            augment,
        })
    }

    /// Replaces the augmentation rotations; an empty list disables them.
    pub fn with_augmentations(mut self, rotations: Vec<Matrix3<f64>>) -> Self {
        self.augment = rotations;
        self
    }

    pub fn config(&self) -> &EcseConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Arc<dyn Backbone> {
        &self.backbone
    }

    pub fn augmentations(&self) -> &[Matrix3<f64>] {
        &self.augment
    }

    fn aux_active(&self) -> bool {
        self.aux.is_some()
            && self.cfg.aux.is_some()
            && self.cfg.collinear_mode == CollinearMode::AuxModel
    }

    /// Radius of the environments the engine reads.
    pub fn env_cutoff(&self) -> f64 {
        self.cfg.outer.r_c().max(self.backbone.cutoff())
    }

    /// Pruned ensemble of one environment, with its aux weight.
    pub fn ensemble(&self, env: &AtomicEnvironment) -> Result<Ensemble> {
        build_ensemble(env, &self.cfg, self.aux_active())
    }

    /// Union of the per-atom ensembles in atom order.
    pub fn pool(&self, s: &Structure) -> Result<Ensemble> {
        let mut frames = Vec::new();
        let mut r_in = 0.0f64;
        for env in environments(s, self.cfg.outer.r_c())? {
            let e = build_ensemble(&env, &self.cfg, false)?;
            r_in = r_in.max(e.r_in);
            if !e.singular {
                frames.extend(e.frames);
            }
        }
        let mut ens = Ensemble {
            frames,
            r_in,
            aux_weight: 0.0,
            omega: None,
            singular: false,
        };
        if self.aux_active() {
            ens.aux_weight =
                aux_weight(&ens.frames, self.cfg.aux.as_ref().unwrap(), self.cfg.beta_w)?;
        }
        Ok(ens)
    }

    /// Number of frames per atom after pruning.
    pub fn frame_counts(&self, s: &Structure) -> Result<Vec<usize>> {
        environments(s, self.cfg.outer.r_c())?
            .iter()
            .map(|env| Ok(self.ensemble(env)?.frames.len()))
            .collect()
    }

    /// Symmetrized prediction for one environment.
    pub fn predict_env(&self, env: &AtomicEnvironment) -> Result<Prediction> {
        let ens = self.ensemble(env)?;
        let aux = if ens.aux_weight > 0.0 {
            Some((ens.aux_weight, self.aux.as_ref().unwrap().eval_env(env)?))
        } else {
            None
        };
        self.average(&ens.frames, aux, |g| {
            self.backbone
                .eval_env(&env.rotated(&Frame::from_matrix_unchecked(*g)))
        })
    }

    /// Symmetrized prediction for a structure. In per-atom mode `per_atom`
    /// holds each environment's symmetrized contribution.
    pub fn predict(&self, s: &Structure) -> Result<Prediction> {
        match self.cfg.mode {
            PoolMode::PerAtom => self.predict_per_atom(s),
            PoolMode::GlobalPool => self.predict_global(s),
        }
    }

    fn predict_per_atom(&self, s: &Structure) -> Result<Prediction> {
        let kind = self.backbone.output_kind();
        let w = kind.width();
        let mut values = vec![0.0; w];
        let mut per_atom = Vec::with_capacity(s.len() * w);
        for env in environments(s, self.env_cutoff())? {
            let p = self.predict_env(&env)?;
            for (v, x) in values.iter_mut().zip(&p.values) {
                *v += x;
            }
            per_atom.extend_from_slice(&p.values);
        }
        Ok(Prediction {
            kind,
            values,
            per_atom: Some(per_atom),
        })
    }

    fn predict_global(&self, s: &Structure) -> Result<Prediction> {
        let ens = self.pool(s)?;
        if ens.frames.is_empty()
            && !self.aux_active()
            && self.cfg.collinear_mode == CollinearMode::AdaptiveOmega
        {
            return self.average(&collinear_structure_frames(s)?, None, |g| {
                self.backbone
                    .eval_structure(&s.rotated(&Frame::from_matrix_unchecked(*g)))
            });
        }
        let aux = if ens.aux_weight > 0.0 {
            Some((
                ens.aux_weight,
                self.aux.as_ref().unwrap().eval_structure(s)?,
            ))
        } else {
            None
        };
        self.average(&ens.frames, aux, |g| {
            self.backbone
                .eval_structure(&s.rotated(&Frame::from_matrix_unchecked(*g)))
        })
    }

    /// `(w_aux y_aux + N^-1 sum_k sum_a w_k G_ka^T y(G_ka x)) / (w_aux + sum_k w_k)`
    /// with `G_ka = A_a F_k`. Backbone calls run in parallel; the reduction is
    /// sequential in ensemble order.
    fn average<F>(
        &self,
        frames: &[WeightedFrame],
        aux: Option<(f64, Prediction)>,
        eval: F,
    ) -> Result<Prediction>
    where
        F: Fn(&Matrix3<f64>) -> Result<Prediction> + Sync,
    {
        if frames.is_empty() && aux.is_none() {
            return Err(Error::FullyCollinear);
        }
        let kind = self.backbone.output_kind();
        let jobs: Vec<(Matrix3<f64>, f64)> = if self.augment.is_empty() {
            frames
                .iter()
                .map(|f| (*f.frame.matrix(), f.weight))
                .collect()
        } else {
            frames
                .iter()
                .flat_map(|f| {
                    self.augment
                        .iter()
                        .map(move |a| (a * f.frame.matrix(), f.weight))
                })
                .collect()
        };
        let outputs: Vec<Result<Prediction>> = jobs
            .par_iter()
            .map(|(g, _)| eval(g).map(|p| p.rotated(&g.transpose())))
            .collect();
        let n_aug = self.augment.len().max(1) as f64;

        let mut acc = Accumulator::new(kind);
        let mut den: f64 = frames.iter().map(|f| f.weight).sum();
        if let Some((w_aux, y_aux)) = aux {
            acc.add(w_aux, &y_aux);
            den += w_aux;
        }
        for ((_, w), out) in jobs.iter().zip(outputs) {
            acc.add(w / n_aug, &out?);
        }
        Ok(acc.finish(den))
    }
}

/// Weighted sum of predictions; per-atom rows are kept only if every term
/// has them.
struct Accumulator {
    kind: OutputKind,
    values: Vec<f64>,
    per_atom: Option<Vec<f64>>,
    terms: usize,
}

impl Accumulator {
    fn new(kind: OutputKind) -> Self {
        Accumulator {
            kind,
            values: vec![0.0; kind.width()],
            per_atom: None,
            terms: 0,
        }
    }

    fn add(&mut self, w: f64, p: &Prediction) {
        for (v, x) in self.values.iter_mut().zip(&p.values) {
            *v += w * x;
        }
        self.per_atom = match (self.per_atom.take(), &p.per_atom) {
            (None, Some(rows)) if self.terms == 0 => Some(rows.iter().map(|x| w * x).collect()),
            (Some(mut acc), Some(rows)) => {
                for (v, x) in acc.iter_mut().zip(rows) {
                    *v += w * x;
                }
                Some(acc)
            }
            _ => None,
        };
        self.terms += 1;
    }

    fn finish(self, den: f64) -> Prediction {
        Prediction {
            kind: self.kind,
            values: self.values.iter().map(|x| x / den).collect(),
            per_atom: self.per_atom.map(|p| p.iter().map(|x| x / den).collect()),
        }
    }
}

/// Adaptive-ω limit for a structure without any usable pair: x along `±d`,
/// `d` the direction from atom 0 to atom 1.
fn collinear_structure_frames(s: &Structure) -> Result<Vec<WeightedFrame>> {
    let axis = (s.len() >= 2).then(|| (s.positions[1] - s.positions[0], 1));
    axis_frames(axis)
}

impl Backbone for Symmetrized {
    fn output_kind(&self) -> OutputKind {
        self.backbone.output_kind()
    }

    fn locality(&self) -> Locality {
        match self.cfg.mode {
            PoolMode::PerAtom => Locality::Local,
            PoolMode::GlobalPool => Locality::Global,
        }
    }

    fn cutoff(&self) -> f64 {
        self.env_cutoff()
    }

    fn eval_env(&self, env: &AtomicEnvironment) -> Result<Prediction> {
        self.predict_env(env)
    }

    fn eval_structure(&self, s: &Structure) -> Result<Prediction> {
        self.predict(s)
    }
}

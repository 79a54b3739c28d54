//! Fitting backbones on small datasets with rotational augmentation.

mod synthetic;
mod trainer;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;

pub use synthetic::{make_toy_dataset, MorsePair, SyntheticPotential, ToyKind};
pub use trainer::{energy_rmse, train_toy, EpochRecord, History, TrainOptions, TrainOutcome};

use crate::error::{Error, Result};
use crate::smoothmath::Frame;
use crate::structures::{Species, Structure};

/// Haar-uniform random rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Frame {
    Frame::random(rng)
}

/// Counts of each species of `table` in `s`.
pub fn bag_of_atoms(s: &Structure, table: &[Species]) -> Vec<f64> {
    table
        .iter()
        .map(|t| s.species.iter().filter(|&x| x == t).count() as f64)
        .collect()
}

/// Linear energy baseline in the species counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfContributions {
    pub species: Vec<Species>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl SelfContributions {
    /// Ordinary least squares of the energies on `[1, counts]`. Rank-deficient
    /// designs get the minimum-norm solution.
    pub fn fit(train: &[Structure]) -> Result<Self> {
        let labelled: Vec<&Structure> = train.iter().filter(|s| s.energy.is_some()).collect();
        if labelled.is_empty() {
            return Err(Error::MissingTargets("energy"));
        }
        let mut species: Vec<Species> = labelled
            .iter()
            .flat_map(|s| s.species.iter().copied())
            .collect();
        species.sort_unstable();
        species.dedup();
        let cols = species.len() + 1;
        let x = DMatrix::from_fn(labelled.len(), cols, |i, j| {
            if j == 0 {
                1.0
            } else {
                labelled[i]
                    .species
                    .iter()
                    .filter(|&&t| t == species[j - 1])
                    .count() as f64
            }
        });
        let y = DVector::from_iterator(labelled.len(), labelled.iter().map(|s| s.energy.unwrap()));
        let beta = x
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|e| Error::param(format!("least squares failed: {e}")))?;
        Ok(SelfContributions {
            species,
            intercept: beta[0],
            coefficients: beta.iter().skip(1).copied().collect(),
        })
    }

    pub fn predict(&self, s: &Structure) -> Result<f64> {
        let mut e = self.intercept;
        for sp in &s.species {
            let k = self
                .species
                .iter()
                .position(|t| t == sp)
                .ok_or_else(|| Error::UnknownSpecies(sp.to_string()))?;
            e += self.coefficients[k];
        }
        Ok(e)
    }

    /// Copies of `data` with the baseline subtracted from the energies.
    pub fn remove(&self, data: &[Structure]) -> Result<Vec<Structure>> {
        data.iter()
            .map(|s| {
                let mut s = s.clone();
                if let Some(e) = s.energy {
                    s.energy = Some(e - self.predict(&s)?);
                }
                Ok(s)
            })
            .collect()
    }

    pub fn add_back(&self, s: &Structure, residual_energy: f64) -> Result<f64> {
        Ok(residual_energy + self.predict(s)?)
    }
}

/// Loss normalizers, updated once per epoch from validation errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossState {
    pub mse_e: f64,
    pub mse_f: f64,
    pub w_e: f64,
    pub ema_decay: f64,
}

impl LossState {
    pub fn new(mse_e: f64, mse_f: f64, w_e: f64, ema_decay: f64) -> Result<Self> {
        let s = LossState {
            mse_e,
            mse_f,
            w_e,
            ema_decay,
        };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if !(self.mse_e > 0.0 && self.mse_f > 0.0) {
            return Err(Error::param(format!(
                "loss normalizers must be positive, got {} and {}",
                self.mse_e, self.mse_f
            )));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::param(format!(
                "ema decay must lie in (0, 1), got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

/// `w_E (E~ - E)^2 / MSE_E + (1 / 3N) sum |F~ - F|^2 / MSE_F`. With
/// `per_atom_energy` the energy residual is divided by `n_atoms` first. Empty
/// force slices drop the force term.
pub fn loss(
    pred_e: f64,
    true_e: f64,
    pred_f: &[Vector3<f64>],
    true_f: &[Vector3<f64>],
    n_atoms: usize,
    state: &LossState,
    per_atom_energy: bool,
) -> Result<f64> {
    state.check()?;
    if pred_f.len() != true_f.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted forces but {} targets",
            pred_f.len(),
            true_f.len()
        )));
    }
    let mut de = pred_e - true_e;
    if per_atom_energy {
        de /= n_atoms as f64;
    }
    let mut l = state.w_e * de * de / state.mse_e;
    if !pred_f.is_empty() {
        let sq: f64 = pred_f
            .iter()
            .zip(true_f)
            .map(|(a, b)| (a - b).norm_squared())
            .sum();
        l += sq / (3.0 * n_atoms as f64) / state.mse_f;
    }
    Ok(l)
}

/// One EMA step of the normalizers towards the latest validation errors.
pub fn update_normalizers(state: &LossState, mse_e: f64, mse_f: f64) -> Result<LossState> {
    if !(mse_e > 0.0 && mse_f > 0.0) {
        return Err(Error::param(format!(
            "validation errors must be positive, got {mse_e} and {mse_f}"
        )));
    }
    let d = state.ema_decay;
    Ok(LossState {
        mse_e: d * state.mse_e + (1.0 - d) * mse_e,
        mse_f: d * state.mse_f + (1.0 - d) * mse_f,
        ..*state
    })
}

#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ecse_core::backbones::{Backbone, Locality, OutputKind, Prediction};
use ecse_core::smoothmath::Frame;
use ecse_core::structures::{AtomicEnvironment, Structure};
use ecse_core::training::SyntheticPotential;
use ecse_core::{Error, Result};

/// Point uniform in the ball of radius `r`.
pub fn in_ball<R: Rng>(rng: &mut R, r: f64) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm_squared() <= 1.0 {
            return v * r;
        }
    }
}

/// `n` neighbors uniform in a ball of radius `r`, at least `gap` from the
/// centre and from each other.
pub fn random_env<R: Rng>(rng: &mut R, n: usize, r: f64, gap: f64) -> AtomicEnvironment {
    let mut d: Vec<Vector3<f64>> = Vec::new();
    while d.len() < n {
        let v = in_ball(rng, r);
        if v.norm() >= gap && d.iter().all(|w| (w - v).norm() >= gap) {
            d.push(v);
        }
    }
    let species = (0..n).map(|k| if k % 3 == 0 { 6 } else { 1 }).collect();
    AtomicEnvironment::from_displacements(6, d, species).unwrap()
}

pub fn rotation<R: Rng>(rng: &mut R) -> Frame {
    Frame::random(rng)
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Non-equivariant rank-2 test model: `v v^T` with `v` a nonlinear function
/// of the displacements as given.
pub struct OuterProduct {
    pub cutoff: f64,
}

impl OuterProduct {
    pub fn vector(env: &AtomicEnvironment) -> Vector3<f64> {
        env.displacements
            .iter()
            .zip(&env.distances)
            .map(|(d, &r)| {
                Vector3::new(
                    d.x * d.x + 0.1,
                    d.y * d.z - 0.3 * d.x,
                    d.z + 0.3 * d.x.powi(3),
                ) * (-r).exp()
            })
            .sum()
    }
}

impl Backbone for OuterProduct {
    fn output_kind(&self) -> OutputKind {
        OutputKind::tensor(2)
    }

    fn locality(&self) -> Locality {
        Locality::Local
    }

    fn cutoff(&self) -> f64 {
        self.cutoff
    }

    fn eval_env(&self, env: &AtomicEnvironment) -> Result<Prediction> {
        let v = Self::vector(env);
        let m: Matrix3<f64> = v * v.transpose();
        Ok(Prediction::new(
            OutputKind::tensor(2),
            (0..9).map(|k| m[(k / 3, k % 3)]).collect(),
        ))
    }
}

/// Random molecules of H, C and O whose energies are exactly linear in the
/// species counts.
pub fn linear_dataset(n: usize, seed: u64) -> Vec<Structure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = [(1, -0.5), (6, -37.8), (8, -75.0)];
    (0..n)
        .map(|_| loop {
            let k = rng.random_range(2..6);
            let pos: Vec<_> = (0..k).map(|_| in_ball(&mut rng, 2.0)).collect();
            let species: Vec<u32> = (0..k).map(|_| per[rng.random_range(0..3)].0).collect();
            let mut s = Structure::new(pos, species).unwrap();
            if s.min_distance(5.0) < 0.7 {
                continue;
            }
            let e = 1.25
                + s.species
                    .iter()
                    .map(|t| per.iter().find(|p| p.0 == *t).unwrap().1)
                    .sum::<f64>();
            s.energy = Some(e);
            break s;
        })
        .collect()
}

/// The synthetic pair potential as a structure-level scalar model.
pub struct Synthetic(pub SyntheticPotential);

impl Backbone for Synthetic {
    fn output_kind(&self) -> OutputKind {
        OutputKind::SCALAR
    }

    fn locality(&self) -> Locality {
        Locality::Global
    }

    fn cutoff(&self) -> f64 {
        self.0.cutoff.r_c()
    }

    fn eval_env(&self, _env: &AtomicEnvironment) -> Result<Prediction> {
        Err(Error::ShapeMismatch("structure-level model".into()))
    }

    fn eval_structure(&self, s: &Structure) -> Result<Prediction> {
        Ok(Prediction::scalar(self.0.energy(s)?))
    }
}

use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::smoothmath::{fc, fc_deriv, CutoffParams};
use crate::structures::{neighbor_list, Species, Structure, DEFAULT_D_MIN};

/// `D [(1 - exp(-a (r - r0)))^2 - 1]`, minimum `-D` at `r0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MorsePair {
    pub depth: f64,
    pub width: f64,
    pub r0: f64,
}

impl MorsePair {
    fn value_and_slope(&self, r: f64) -> (f64, f64) {
        let e = (-self.width * (r - self.r0)).exp();
        let v = self.depth * ((1.0 - e) * (1.0 - e) - 1.0);
        let dv = 2.0 * self.depth * (1.0 - e) * self.width * e;
        (v, dv)
    }
}

/// Sum over pairs of a species-dependent Morse term times a cutoff switch.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPotential {
    pub pairs: Vec<((Species, Species), MorsePair)>,
    pub default: MorsePair,
    pub cutoff: CutoffParams,
}

impl SyntheticPotential {
    /// Parameters loosely shaped after C-H, H-H and C-C bonds.
    pub fn toy() -> Self {
        SyntheticPotential {
            pairs: vec![
                (
                    (1, 6),
                    MorsePair {
                        depth: 4.0,
                        width: 1.8,
                        r0: 1.1,
                    },
                ),
                (
                    (1, 1),
                    MorsePair {
                        depth: 0.5,
                        width: 1.5,
                        r0: 1.6,
                    },
                ),
                (
                    (6, 6),
                    MorsePair {
                        depth: 6.0,
                        width: 2.0,
                        r0: 1.5,
                    },
                ),
            ],
            default: MorsePair {
                depth: 1.0,
                width: 1.5,
                r0: 1.5,
            },
            cutoff: CutoffParams::new(3.5, 1.0).unwrap(),
        }
    }

    fn pair(&self, a: Species, b: Species) -> &MorsePair {
        let key = (a.min(b), a.max(b));
        self.pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, p)| p)
            .unwrap_or(&self.default)
    }

    /// Energy and analytic forces `-dE/dr_i`.
    pub fn energy_and_forces(&self, s: &Structure) -> Result<(f64, Vec<Vector3<f64>>)> {
        let nl = neighbor_list(s, self.cutoff.r_c(), DEFAULT_D_MIN)?;
        let mut energy = 0.0;
        let mut forces = vec![Vector3::zeros(); s.len()];
        for (i, list) in nl.per_atom.iter().enumerate() {
            for nb in list {
                let r = nb.distance;
                let (v, dv) = self
                    .pair(s.species[i], s.species[nb.index])
                    .value_and_slope(r);
                let g = fc(r, &self.cutoff);
                energy += 0.5 * v * g;
                // Both directed copies of the pair push on atom i.
                let slope = dv * g + v * fc_deriv(r, &self.cutoff);
                forces[i] += nb.displacement * (slope / r);
            }
        }
        Ok((energy, forces))
    }

    pub fn energy(&self, s: &Structure) -> Result<f64> {
        Ok(self.energy_and_forces(s)?.0)
    }

    /// Sets the energy and force targets of `s`.
    pub fn label(&self, s: &mut Structure) -> Result<()> {
        let (e, f) = self.energy_and_forces(s)?;
        s.energy = Some(e);
        s.forces = Some(f);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    /// One carbon at the origin and four hydrogens in a ball of radius 3.5.
    Ch4Like,
    /// A C-H pair at distances sweeping through the cutoff.
    DimerSweep,
    /// Chains of 3 to 5 atoms along a random axis, with sub-1e-5 jitter.
    CollinearFamily,
}

impl FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ch4_like" => Ok(ToyKind::Ch4Like),
            "dimer_sweep" => Ok(ToyKind::DimerSweep),
            "collinear_family" => Ok(ToyKind::CollinearFamily),
            other => Err(Error::Config(format!(
                "unknown dataset kind {other:?} (expected ch4_like, dimer_sweep or collinear_family)"
            ))),
        }
    }
}

const CH4_RADIUS: f64 = 3.5;
const CH4_CONTACT: f64 = 0.5;

fn unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn ch4_like<R: Rng>(rng: &mut R) -> Result<Structure> {
    let mut pos = vec![Vector3::zeros()];
    while pos.len() < 5 {
        let v = loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm_squared() <= 1.0 {
                break v * CH4_RADIUS;
            }
        };
        if pos.iter().all(|p| (p - v).norm() >= CH4_CONTACT) {
            pos.push(v);
        }
    }
    Structure::new(pos, vec![6, 1, 1, 1, 1])
}

fn collinear_chain<R: Rng>(rng: &mut R) -> Result<Structure> {
    let n = rng.random_range(3..=5);
    let axis = unit(rng);
    let helper = if axis.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let p1 = axis.cross(&helper).normalize();
    let p2 = axis.cross(&p1);
    let mut t = 0.0;
    let mut pos = Vec::with_capacity(n);
    for _ in 0..n {
        let jitter = p1 * rng.random_range(-1e-5..1e-5) + p2 * rng.random_range(-1e-5..1e-5);
        pos.push(axis * t + jitter);
        t += rng.random_range(0.9..1.5);
    }
    let mid = axis * (0.5 * (t - 0.0));
    for p in &mut pos {
        *p -= mid;
    }
    let species = (0..n).map(|k| if k % 2 == 0 { 6 } else { 1 }).collect();
    Structure::new(pos, species)
}

/// `n` labelled structures of the given kind, deterministic in `seed`.
pub fn make_toy_dataset(kind: ToyKind, n: usize, seed: u64) -> Result<Vec<Structure>> {
    if n == 0 {
        return Err(Error::param("dataset size must be at least 1"));
    }
    let pot = SyntheticPotential::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut s = match kind {
            ToyKind::Ch4Like => ch4_like(&mut rng)?,
            ToyKind::DimerSweep => {
                let lo = 0.6;
                let hi = pot.cutoff.r_c() + 0.5;
                let r = if n == 1 {
                    lo
                } else {
                    lo + (hi - lo) * k as f64 / (n - 1) as f64
                };
                let d = unit(&mut rng);
                Structure::new(vec![Vector3::zeros(), d * r], vec![6, 1])?
            }
            ToyKind::CollinearFamily => collinear_chain(&mut rng)?,
        };
        pot.label(&mut s)?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forces_match_finite_differences() {
        let pot = SyntheticPotential::toy();
        for s in make_toy_dataset(ToyKind::Ch4Like, 10, 1).unwrap() {
            let f = s.forces.clone().unwrap();
            for i in 0..s.len() {
                for c in 0..3 {
                    let h = 1e-5;
                    let mut p = s.clone();
                    p.positions[i][c] += h;
                    let mut m = s.clone();
                    m.positions[i][c] -= h;
                    let fd = -(pot.energy(&p).unwrap() - pot.energy(&m).unwrap()) / (2.0 * h);
                    assert!((fd - f[i][c]).abs() < 1e-8, "{fd} vs {}", f[i][c]);
                }
            }
        }
    }

    #[test]
    fn datasets_respect_their_geometry() {
        for s in make_toy_dataset(ToyKind::Ch4Like, 200, 2).unwrap() {
            assert!(s.min_distance(10.0) >= CH4_CONTACT);
            assert!(s.positions.iter().all(|p| p.norm() <= CH4_RADIUS));
        }
        for s in make_toy_dataset(ToyKind::CollinearFamily, 50, 3).unwrap() {
            for i in 0..s.len() {
                for j in 0..s.len() {
                    for k in 0..s.len() {
                        if i == j || i == k || j == k {
                            continue;
                        }
                        let a = (s.positions[j] - s.positions[i]).normalize();
                        let b = (s.positions[k] - s.positions[i]).normalize();
                        assert!(a.cross(&b).norm_squared() < 1e-6);
                    }
                }
            }
        }
        let d = make_toy_dataset(ToyKind::DimerSweep, 30, 4).unwrap();
        let r: Vec<f64> = d
            .iter()
            .map(|s| (s.positions[1] - s.positions[0]).norm())
            .collect();
        assert!(r[0] < 1.0 && *r.last().unwrap() > 3.5);
        assert_eq!(d.last().unwrap().energy, Some(0.0));
    }

    #[test]
    fn periodic_forces_sum_to_zero() {
        let pot = SyntheticPotential::toy();
        let s = Structure::new(
            vec![Vector3::zeros(), Vector3::new(1.1, 0.3, 0.2)],
            vec![6, 1],
        )
        .unwrap()
        .with_cell(nalgebra::Matrix3::identity() * 3.0)
        .unwrap();
        let (_, f) = pot.energy_and_forces(&s).unwrap();
        assert!((f[0] + f[1]).norm() < 1e-12);
    }
}

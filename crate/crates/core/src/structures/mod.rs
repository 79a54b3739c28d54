//! Point-cloud data model, neighbor search and atom-centred environments.

mod elements;
mod neighbors;
mod xyz;

use nalgebra::{Matrix3, Vector3};

pub use elements::{species_of, Species, SpeciesTable};
pub use neighbors::{neighbor_list, Neighbor, NeighborList, DEFAULT_D_MIN};
pub use xyz::{parse_xyz, parse_xyz_with, write_xyz};

use crate::error::{Error, Result};
use crate::smoothmath::Frame;

/// A point cloud of atoms, optionally periodic. `cell` rows are lattice
/// vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    pub positions: Vec<Vector3<f64>>,
    pub species: Vec<Species>,
    pub attribute: Option<Vec<f64>>,
    pub cell: Option<Matrix3<f64>>,
    pub energy: Option<f64>,
    pub forces: Option<Vec<Vector3<f64>>>,
}

impl Structure {
    pub fn new(positions: Vec<Vector3<f64>>, species: Vec<Species>) -> Result<Self> {
        let s = Structure {
            positions,
            species,
            attribute: None,
            cell: None,
            energy: None,
            forces: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_cell(mut self, cell: Matrix3<f64>) -> Result<Self> {
        self.cell = Some(cell);
        self.validate()?;
        Ok(self)
    }

    pub fn with_attribute(mut self, attribute: Vec<f64>) -> Result<Self> {
        self.attribute = Some(attribute);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.species.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} positions but {} species",
                n,
                self.species.len()
            )));
        }
        if let Some(p) = self
            .positions
            .iter()
            .find(|p| !p.iter().all(|x| x.is_finite()))
        {
            return Err(Error::param(format!("non-finite position {p:?}")));
        }
        if let Some(a) = &self.attribute {
            if a.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "{} attributes for {n} atoms",
                    a.len()
                )));
            }
        }
        if let Some(f) = &self.forces {
            if f.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "{} forces for {n} atoms",
                    f.len()
                )));
            }
        }
        if let Some(c) = &self.cell {
            let det = c.determinant();
            if !(det.abs() > 0.0 && det.is_finite()) {
                return Err(Error::param("cell matrix is singular"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_periodic(&self) -> bool {
        self.cell.is_some()
    }

    pub fn translated(&self, t: &Vector3<f64>) -> Structure {
        let mut s = self.clone();
        for p in &mut s.positions {
            *p += t;
        }
        s
    }

    /// Expresses positions, cell and forces in `frame` coordinates.
    pub fn rotated(&self, frame: &Frame) -> Structure {
        let m = frame.matrix();
        let mut s = self.clone();
        for p in &mut s.positions {
            *p = m * *p;
        }
        if let Some(c) = &mut s.cell {
            *c = *c * m.transpose();
        }
        if let Some(f) = &mut s.forces {
            for v in f.iter_mut() {
                *v = m * *v;
            }
        }
        s
    }

    pub fn permuted(&self, order: &[usize]) -> Structure {
        let mut s = self.clone();
        s.positions = order.iter().map(|&i| self.positions[i]).collect();
        s.species = order.iter().map(|&i| self.species[i]).collect();
        s.attribute = self
            .attribute
            .as_ref()
            .map(|a| order.iter().map(|&i| a[i]).collect());
        s.forces = self
            .forces
            .as_ref()
            .map(|f| order.iter().map(|&i| f[i]).collect());
        s
    }

    /// Smallest distance between any two points, periodic images included.
    pub fn min_distance(&self, up_to: f64) -> f64 {
        match neighbor_list(self, up_to, 0.0) {
            Ok(nl) => nl
                .per_atom
                .iter()
                .flatten()
                .map(|n| n.distance)
                .fold(f64::INFINITY, f64::min),
            Err(_) => 0.0,
        }
    }
}

/// Neighbors of one atom within a cutoff, as displacements from the centre.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicEnvironment {
    pub center_index: usize,
    pub center_species: Species,
    pub center_attribute: Option<f64>,
    pub displacements: Vec<Vector3<f64>>,
    pub distances: Vec<f64>,
    pub neighbor_indices: Vec<usize>,
    pub neighbor_species: Vec<Species>,
    pub neighbor_attributes: Option<Vec<f64>>,
}

impl AtomicEnvironment {
    /// Environment from raw displacements; neighbor indices are `1..=n`.
    pub fn from_displacements(
        center_species: Species,
        displacements: Vec<Vector3<f64>>,
        neighbor_species: Vec<Species>,
    ) -> Result<Self> {
        if displacements.len() != neighbor_species.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} displacements but {} species",
                displacements.len(),
                neighbor_species.len()
            )));
        }
        let distances = displacements.iter().map(|d| d.norm()).collect();
        let neighbor_indices = (1..=displacements.len()).collect();
        Ok(AtomicEnvironment {
            center_index: 0,
            center_species,
            center_attribute: None,
            displacements,
            distances,
            neighbor_indices,
            neighbor_species,
            neighbor_attributes: None,
        })
    }

    pub fn from_neighbor_list(s: &Structure, nl: &NeighborList, i: usize) -> Result<Self> {
        let list = nl.per_atom.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: nl.per_atom.len(),
        })?;
        Ok(AtomicEnvironment {
            center_index: i,
            center_species: s.species[i],
            center_attribute: s.attribute.as_ref().map(|a| a[i]),
            displacements: list.iter().map(|n| n.displacement).collect(),
            distances: list.iter().map(|n| n.distance).collect(),
            neighbor_indices: list.iter().map(|n| n.index).collect(),
            neighbor_species: list.iter().map(|n| s.species[n.index]).collect(),
            neighbor_attributes: s
                .attribute
                .as_ref()
                .map(|a| list.iter().map(|n| a[n.index]).collect()),
        })
    }

    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    /// Displacements expressed in `frame`; distances are kept as cached.
    pub fn rotated(&self, frame: &Frame) -> AtomicEnvironment {
        let m = frame.matrix();
        let mut env = self.clone();
        for d in &mut env.displacements {
            *d = m * *d;
        }
        env
    }

    /// Copy restricted to neighbors strictly inside `r`.
    pub fn truncated(&self, r: f64) -> AtomicEnvironment {
        let keep: Vec<usize> = (0..self.len()).filter(|&k| self.distances[k] < r).collect();
        AtomicEnvironment {
            center_index: self.center_index,
            center_species: self.center_species,
            center_attribute: self.center_attribute,
            displacements: keep.iter().map(|&k| self.displacements[k]).collect(),
            distances: keep.iter().map(|&k| self.distances[k]).collect(),
            neighbor_indices: keep.iter().map(|&k| self.neighbor_indices[k]).collect(),
            neighbor_species: keep.iter().map(|&k| self.neighbor_species[k]).collect(),
            neighbor_attributes: self
                .neighbor_attributes
                .as_ref()
                .map(|a| keep.iter().map(|&k| a[k]).collect()),
        }
    }

    /// The environment as an isolated cluster: centre at the origin first,
    /// then every neighbor.
    pub fn to_cluster(&self) -> Structure {
        let mut positions = vec![Vector3::zeros()];
        positions.extend(self.displacements.iter().copied());
        let mut species = vec![self.center_species];
        species.extend(self.neighbor_species.iter().copied());
        let attribute = match (&self.neighbor_attributes, self.center_attribute) {
            (Some(a), Some(c)) => {
                let mut v = vec![c];
                v.extend(a.iter().copied());
                Some(v)
            }
            _ => None,
        };
        Structure {
            positions,
            species,
            attribute,
            cell: None,
            energy: None,
            forces: None,
        }
    }
}

/// Environment of atom `i` within `r_c`, with the default `d_min`.
pub fn environment(s: &Structure, i: usize, r_c: f64) -> Result<AtomicEnvironment> {
    if i >= s.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: s.len(),
        });
    }
    let nl = neighbor_list(s, r_c, DEFAULT_D_MIN)?;
    AtomicEnvironment::from_neighbor_list(s, &nl, i)
}

/// Environments of every atom within `r_c`.
pub fn environments(s: &Structure, r_c: f64) -> Result<Vec<AtomicEnvironment>> {
    let nl = neighbor_list(s, r_c, DEFAULT_D_MIN)?;
    (0..s.len())
        .map(|i| AtomicEnvironment::from_neighbor_list(s, &nl, i))
        .collect()
}

use nalgebra::Vector3;

use super::Structure;
use crate::error::{Error, Result};

/// Smallest admissible distance between two points.
pub const DEFAULT_D_MIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    /// Lattice translation applied to the neighbor, in cell-vector units.
    pub shift: [i32; 3],
    pub displacement: Vector3<f64>,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct NeighborList {
    pub cutoff: f64,
    pub per_atom: Vec<Vec<Neighbor>>,
}

impl NeighborList {
    /// For every entry `(i, k)`, the position of the reverse pair
    /// `(j -> i, -shift)` in `per_atom[j]`.
    pub fn reverse_indices(&self) -> Vec<Vec<usize>> {
        self.per_atom
            .iter()
            .enumerate()
            .map(|(i, list)| {
                list.iter()
                    .map(|n| {
                        let back = [-n.shift[0], -n.shift[1], -n.shift[2]];
                        self.per_atom[n.index]
                            .iter()
                            .position(|m| m.index == i && m.shift == back)
                            .expect("neighbor list is symmetric")
                    })
                    .collect()
            })
            .collect()
    }

    pub fn n_pairs(&self) -> usize {
        self.per_atom.iter().map(Vec::len).sum()
    }
}

/// All ordered pairs closer than `r_c` (boundary included), brute force over
/// atom pairs and every lattice image that can reach the cutoff sphere.
pub fn neighbor_list(s: &Structure, r_c: f64, d_min: f64) -> Result<NeighborList> {
    if !(r_c > 0.0 && r_c.is_finite()) {
        return Err(Error::param(format!(
            "neighbor cutoff must be positive and finite, got {r_c}"
        )));
    }
    let n = s.len();
    let mut per_atom = vec![Vec::new(); n];
    let push = |per_atom: &mut Vec<Vec<Neighbor>>, i: usize, j: usize, shift, d: Vector3<f64>| {
        let distance = d.norm();
        if distance > r_c {
            return Ok(());
        }
        if distance < d_min {
            return Err(Error::CollidingPoints {
                i,
                j,
                distance,
                d_min,
            });
        }
        per_atom[i].push(Neighbor {
            index: j,
            shift,
            displacement: d,
            distance,
        });
        Ok(())
    };

    match &s.cell {
        None => {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let d = s.positions[j] - s.positions[i];
                        push(&mut per_atom, i, j, [0, 0, 0], d)?;
                    }
                }
            }
        }
        Some(cell) => {
            let inv = cell
                .try_inverse()
                .ok_or_else(|| Error::param("cell matrix is singular"))?;
            // Column a of inv is the reciprocal vector g_a with r . g_a = fractional a.
            let reach: [f64; 3] = std::array::from_fn(|a| r_c * inv.column(a).norm());
            for i in 0..n {
                for j in 0..n {
                    let d = s.positions[j] - s.positions[i];
                    let frac = d.transpose() * inv;
                    let lo: [i32; 3] = std::array::from_fn(|a| (-frac[a] - reach[a]).ceil() as i32);
                    let hi: [i32; 3] =
                        std::array::from_fn(|a| (-frac[a] + reach[a]).floor() as i32);
                    for n0 in lo[0]..=hi[0] {
                        for n1 in lo[1]..=hi[1] {
                            for n2 in lo[2]..=hi[2] {
                                if i == j && n0 == 0 && n1 == 0 && n2 == 0 {
                                    continue;
                                }
                                let t = cell.row(0) * n0 as f64
                                    + cell.row(1) * n1 as f64
                                    + cell.row(2) * n2 as f64;
                                let disp = d + t.transpose();
                                push(&mut per_atom, i, j, [n0, n1, n2], disp)?;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(NeighborList {
        cutoff: r_c,
        per_atom,
    })
}

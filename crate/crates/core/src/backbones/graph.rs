use nalgebra::Vector3;

use crate::error::Result;
use crate::smoothmath::{fc, CutoffParams};
use crate::structures::{neighbor_list, AtomicEnvironment, Structure, DEFAULT_D_MIN};

/// Directed edges grouped by centre atom, in neighbor-list order.
#[derive(Debug, Clone)]
pub(crate) struct Graph {
    pub n_atoms: usize,
    /// Edges of atom `i` are `offsets[i]..offsets[i + 1]`.
    pub offsets: Vec<usize>,
    pub center: Vec<usize>,
    pub neighbor: Vec<usize>,
    pub disp: Vec<Vector3<f64>>,
    pub dist: Vec<f64>,
    pub fc: Vec<f64>,
    /// Index of the reverse edge; empty when built from a single environment.
    pub rev: Vec<usize>,
}

impl Graph {
    pub fn from_structure(s: &Structure, cutoff: &CutoffParams) -> Result<Self> {
        let nl = neighbor_list(s, cutoff.r_c(), DEFAULT_D_MIN)?;
        let rev_local = nl.reverse_indices();
        let mut offsets = vec![0];
        for list in &nl.per_atom {
            offsets.push(offsets.last().unwrap() + list.len());
        }
        let mut g = Graph {
            n_atoms: s.len(),
            offsets,
            center: Vec::new(),
            neighbor: Vec::new(),
            disp: Vec::new(),
            dist: Vec::new(),
            fc: Vec::new(),
            rev: Vec::new(),
        };
        for (i, list) in nl.per_atom.iter().enumerate() {
            for (k, nb) in list.iter().enumerate() {
                g.center.push(i);
                g.neighbor.push(nb.index);
                g.disp.push(nb.displacement);
                g.dist.push(nb.distance);
                g.fc.push(fc(nb.distance, cutoff));
                g.rev.push(g.offsets[nb.index] + rev_local[i][k]);
            }
        }
        Ok(g)
    }

    /// Star graph of one environment; neighbors beyond the cutoff are dropped.
    pub fn from_env(env: &AtomicEnvironment, cutoff: &CutoffParams) -> Self {
        let keep: Vec<usize> = (0..env.len())
            .filter(|&k| env.distances[k] <= cutoff.r_c())
            .collect();
        Graph {
            n_atoms: 1,
            offsets: vec![0, keep.len()],
            center: vec![0; keep.len()],
            neighbor: keep.clone(),
            disp: keep.iter().map(|&k| env.displacements[k]).collect(),
            dist: keep.iter().map(|&k| env.distances[k]).collect(),
            fc: keep.iter().map(|&k| fc(env.distances[k], cutoff)).collect(),
            rev: Vec::new(),
        }
    }

    pub fn n_edges(&self) -> usize {
        self.center.len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Dense `atoms x edges` matrix with `weight[e]` at `(center[e], e)`.
    pub fn scatter_matrix(&self, weight: &[f64]) -> Vec<f64> {
        let e = self.n_edges();
        let mut m = vec![0.0; self.n_atoms * e];
        for k in 0..e {
            m[self.center[k] * e + k] = weight[k];
        }
        m
    }
}

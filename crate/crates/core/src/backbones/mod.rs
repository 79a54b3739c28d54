//! Non-equivariant models that the symmetrization engine averages over frames.
//!
//! Every backbone maps an environment or a whole structure, expressed in some
//! coordinate system, to a [`Prediction`]. None of them is rotationally
//! equivariant except the two-body PET variant, which only sees distances.

mod checkpoint;
mod graph;
mod layout;
mod mlp;
mod pet;

use nalgebra::Matrix3;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use layout::{Dense, Embedding, Init, Layout, Mlp1, Norm, Segment};
pub use mlp::{MlpBackbone, MlpShape};
pub use pet::{BondMode, Pet, PetShape};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::structures::{environments, AtomicEnvironment, Species, Structure};

/// Cartesian tensor rank of an output; scalars are rank 0, vectors rank 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputKind {
    pub rank: u32,
}

impl OutputKind {
    pub const SCALAR: OutputKind = OutputKind { rank: 0 };
    pub const VECTOR: OutputKind = OutputKind { rank: 1 };

    pub fn tensor(rank: u32) -> Self {
        OutputKind { rank }
    }

    /// Number of components, `3^rank`.
    pub fn width(self) -> usize {
        3usize.pow(self.rank)
    }

    pub fn is_covariant(self) -> bool {
        self.rank > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Locality {
    /// Output is a sum of per-environment terms.
    Local,
    /// Output depends on the whole structure (message passing).
    Global,
}

/// Model output with optional per-atom contributions (row-major, one row of
/// `kind.width()` values per atom).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub kind: OutputKind,
    pub values: Vec<f64>,
    pub per_atom: Option<Vec<f64>>,
}

impl Prediction {
    pub fn scalar(v: f64) -> Self {
        Prediction {
            kind: OutputKind::SCALAR,
            values: vec![v],
            per_atom: None,
        }
    }

    pub fn new(kind: OutputKind, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), kind.width());
        Prediction {
            kind,
            values,
            per_atom: None,
        }
    }

    /// First component; the value itself for scalars.
    pub fn value(&self) -> f64 {
        self.values[0]
    }

    /// Per-atom contribution of atom `i`.
    pub fn atom(&self, i: usize) -> Option<&[f64]> {
        let w = self.kind.width();
        self.per_atom.as_ref().map(|p| &p[i * w..(i + 1) * w])
    }

    /// Applies `m` to every tensor index of the values and per-atom rows.
    pub fn rotated(&self, m: &Matrix3<f64>) -> Prediction {
        if self.kind.rank == 0 {
            return self.clone();
        }
        let w = self.kind.width();
        Prediction {
            kind: self.kind,
            values: rotate_tensor(&self.values, self.kind.rank, m),
            per_atom: self.per_atom.as_ref().map(|p| {
                p.chunks(w)
                    .flat_map(|c| rotate_tensor(c, self.kind.rank, m))
                    .collect()
            }),
        }
    }
}

/// `Y'_{a1..ak} = m_{a1 b1} ... m_{ak bk} Y_{b1..bk}` for a row-major tensor.
pub fn rotate_tensor(values: &[f64], rank: u32, m: &Matrix3<f64>) -> Vec<f64> {
    let width = 3usize.pow(rank);
    assert_eq!(values.len(), width, "tensor size");
    let mut cur = values.to_vec();
    let mut next = vec![0.0; width];
    for axis in 0..rank {
        // Index layout around `axis`: outer * 3 * inner.
        let inner = 3usize.pow(rank - axis - 1);
        let outer = width / (3 * inner);
        for o in 0..outer {
            for a in 0..3 {
                for i in 0..inner {
                    let mut acc = 0.0;
                    for b in 0..3 {
                        acc += m[(a, b)] * cur[(o * 3 + b) * inner + i];
                    }
                    next[(o * 3 + a) * inner + i] = acc;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

pub trait Backbone: Send + Sync {
    fn output_kind(&self) -> OutputKind;

    fn locality(&self) -> Locality;

    /// Radius of the environments the model reads.
    fn cutoff(&self) -> f64;

    /// Prediction for a single environment as seen from its centre.
    fn eval_env(&self, env: &AtomicEnvironment) -> Result<Prediction>;

    /// Prediction for a whole structure, `per_atom` populated.
    fn eval_structure(&self, s: &Structure) -> Result<Prediction> {
        sum_over_environments(self, s)
    }
}

/// Sum of [`Backbone::eval_env`] over every atom.
pub fn sum_over_environments<B: Backbone + ?Sized>(b: &B, s: &Structure) -> Result<Prediction> {
    let kind = b.output_kind();
    let w = kind.width();
    let mut values = vec![0.0; w];
    let mut per_atom = Vec::with_capacity(s.len() * w);
    for env in environments(s, b.cutoff())? {
        let p = b.eval_env(&env)?;
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

/// A backbone with a flat trainable parameter vector.
pub trait Trainable: Backbone {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn layout(&self) -> &Layout;

    /// Records the per-atom outputs (`atoms x width`) for `s` on a tape built
    /// over [`Trainable::params`].
    fn record(&self, tape: &mut Tape<'_>, s: &Structure) -> Result<Var>;
}

/// Output `c` everywhere, independent of the input.
#[derive(Debug, Clone)]
pub struct ConstantBackbone {
    pub kind: OutputKind,
    pub value: Vec<f64>,
    pub cutoff: f64,
}

impl ConstantBackbone {
    pub fn scalar(c: f64, cutoff: f64) -> Self {
        ConstantBackbone {
            kind: OutputKind::SCALAR,
            value: vec![c],
            cutoff,
        }
    }
}

impl Backbone for ConstantBackbone {
    fn output_kind(&self) -> OutputKind {
        self.kind
    }

    fn locality(&self) -> Locality {
        Locality::Local
    }

    fn cutoff(&self) -> f64 {
        self.cutoff
    }

    fn eval_env(&self, _env: &AtomicEnvironment) -> Result<Prediction> {
        Ok(Prediction::new(self.kind, self.value.clone()))
    }
}

/// Maps atomic numbers to embedding rows.
pub(crate) fn species_indices(table: &[Species], species: &[Species]) -> Result<Vec<usize>> {
    species
        .iter()
        .map(|s| {
            table
                .iter()
                .position(|t| t == s)
                .ok_or_else(|| Error::UnknownSpecies(s.to_string()))
        })
        .collect()
}

/// Any of the built-in trainable backbones.
#[derive(Debug, Clone)]
pub enum AnyBackbone {
    Mlp(MlpBackbone),
    Pet(Pet),
}

impl AnyBackbone {
    pub fn shape_kv(&self) -> KvMap {
        match self {
            AnyBackbone::Mlp(m) => m.shape().to_kv(),
            AnyBackbone::Pet(p) => p.shape().to_kv(),
        }
    }

    pub fn from_shape_kv(kv: &KvMap, params: Vec<f64>) -> Result<Self> {
        match kv.raw("model") {
            Some("mlp") => Ok(AnyBackbone::Mlp(MlpBackbone::with_params(
                MlpShape::from_kv(kv)?,
                params,
            )?)),
            Some("pet") | Some("pet2body") => Ok(AnyBackbone::Pet(Pet::with_params(
                PetShape::from_kv(kv)?,
                params,
            )?)),
            other => Err(Error::Checkpoint(format!("unknown model kind {other:?}"))),
        }
    }

    pub fn as_trainable(&self) -> &dyn Trainable {
        match self {
            AnyBackbone::Mlp(m) => m,
            AnyBackbone::Pet(p) => p,
        }
    }

    pub fn as_trainable_mut(&mut self) -> &mut dyn Trainable {
        match self {
            AnyBackbone::Mlp(m) => m,
            AnyBackbone::Pet(p) => p,
        }
    }
}

impl Backbone for AnyBackbone {
    fn output_kind(&self) -> OutputKind {
        self.as_trainable().output_kind()
    }

    fn locality(&self) -> Locality {
        self.as_trainable().locality()
    }

    fn cutoff(&self) -> f64 {
        self.as_trainable().cutoff()
    }

    fn eval_env(&self, env: &AtomicEnvironment) -> Result<Prediction> {
        self.as_trainable().eval_env(env)
    }

    fn eval_structure(&self, s: &Structure) -> Result<Prediction> {
        self.as_trainable().eval_structure(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothmath::Frame;
    use nalgebra::Vector3;

    #[test]
    fn rank_one_and_two_rotation() {
        let f =
            Frame::from_pair(&Vector3::new(1.0, 0.2, -0.3), &Vector3::new(0.1, 1.0, 0.4)).unwrap();
        let m = f.matrix();
        let v = Vector3::new(0.3, -1.2, 2.0);
        let r = rotate_tensor(v.as_slice(), 1, &m);
        let expected = m * v;
        for a in 0..3 {
            assert!((r[a] - expected[a]).abs() < 1e-15);
        }
        let t = Matrix3::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.5);
        let flat: Vec<f64> = (0..9).map(|k| t[(k / 3, k % 3)]).collect();
        let r2 = rotate_tensor(&flat, 2, &m);
        let conj = m * t * m.transpose();
        for k in 0..9 {
            assert!((r2[k] - conj[(k / 3, k % 3)]).abs() < 1e-13);
        }
        assert_eq!(rotate_tensor(&[2.5], 0, &m), vec![2.5]);
    }
}

use super::graph::Graph;
use super::layout::{Embedding, Layout, Mlp1};
use super::{species_indices, Backbone, Locality, OutputKind, Prediction, Trainable};
use crate::autodiff::{with_tape, Tape, Var};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::smoothmath::CutoffParams;
use crate::structures::{AtomicEnvironment, Species, Structure};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpShape {
    pub species: Vec<Species>,
    pub d_emb: usize,
    pub hidden: usize,
    /// Most neighbors an environment may have.
    pub capacity: usize,
    pub cutoff: CutoffParams,
    pub out: OutputKind,
}

impl MlpShape {
    pub fn new(species: Vec<Species>, cutoff: CutoffParams) -> Self {
        MlpShape {
            species,
            d_emb: 8,
            hidden: 32,
            capacity: 16,
            cutoff,
            out: OutputKind::SCALAR,
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("model", "mlp");
        kv.set("species", join(&self.species));
        kv.set("d_emb", self.d_emb);
        kv.set("hidden", self.hidden);
        kv.set("capacity", self.capacity);
        kv.set("r_c", self.cutoff.r_c());
        kv.set("delta_rc", self.cutoff.delta());
        kv.set("out_rank", self.out.rank);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        Ok(MlpShape {
            species: kv
                .get_list("species")?
                .ok_or_else(|| Error::Config("missing key species".into()))?,
            d_emb: kv.require("d_emb")?,
            hidden: kv.require("hidden")?,
            capacity: kv.require("capacity")?,
            cutoff: CutoffParams::new(kv.require("r_c")?, kv.require("delta_rc")?)?,
            out: OutputKind::tensor(kv.get_or("out_rank", 0)?),
        })
    }
}

pub(crate) fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone)]
struct MlpParts {
    center: Embedding,
    neighbor: Embedding,
    encoder: Mlp1,
    readout: Mlp1,
}

/// Per-neighbor encoder over raw Cartesian displacements, gated by the cutoff
/// and summed, followed by a readout MLP on the sum and the centre embedding.
#[derive(Debug, Clone)]
pub struct MlpBackbone {
    shape: MlpShape,
    layout: Layout,
    parts: MlpParts,
    params: Vec<f64>,
}

impl MlpBackbone {
    pub fn new(shape: MlpShape, seed: u64) -> Self {
        let (layout, parts) = build(&shape);
        let params = layout.random_init(seed);
        MlpBackbone {
            shape,
            layout,
            parts,
            params,
        }
    }

    pub fn with_params(shape: MlpShape, params: Vec<f64>) -> Result<Self> {
        let (layout, parts) = build(&shape);
        if params.len() != layout.len() {
            return Err(Error::ShapeMismatch(format!(
                "mlp expects {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        Ok(MlpBackbone {
            shape,
            layout,
            parts,
            params,
        })
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    fn forward(
        &self,
        t: &mut Tape<'_>,
        g: &Graph,
        center_species: &[Species],
        nbr_species: &[Species],
    ) -> Result<Var> {
        for i in 0..g.n_atoms {
            if g.degree(i) > self.shape.capacity {
                return Err(Error::TooManyNeighbors {
                    count: g.degree(i),
                    capacity: self.shape.capacity,
                });
            }
        }
        let p = &self.parts;
        let e = g.n_edges();
        let ci = species_indices(&self.shape.species, center_species)?;
        let ni = species_indices(&self.shape.species, nbr_species)?;
        let mut geo = Vec::with_capacity(4 * e);
        for k in 0..e {
            geo.extend_from_slice(&[g.disp[k].x, g.disp[k].y, g.disp[k].z, g.fc[k]]);
        }
        let geo = t.constant(&geo, e, 4);
        let emb = p.neighbor.lookup(t, &ni);
        let x = t.concat_cols(&[geo, emb]);
        let h = p.encoder.apply(t, x);
        let h = t.silu(h);
        let scatter = g.scatter_matrix(&g.fc);
        let scatter = t.constant(&scatter, g.n_atoms, e);
        let pooled = t.matmul(scatter, h);
        let cen = p.center.lookup(t, &ci);
        let z = t.concat_cols(&[pooled, cen]);
        Ok(p.readout.apply(t, z))
    }
}

fn build(shape: &MlpShape) -> (Layout, MlpParts) {
    let mut l = Layout::default();
    let ns = shape.species.len();
    let parts = MlpParts {
        center: l.embedding("center_embedding", ns, shape.d_emb),
        neighbor: l.embedding("neighbor_embedding", ns, shape.d_emb),
        encoder: l.mlp("encoder", 4 + shape.d_emb, shape.hidden, shape.hidden),
        readout: l.mlp(
            "readout",
            shape.hidden + shape.d_emb,
            shape.hidden,
            shape.out.width(),
        ),
    };
    (l, parts)
}

impl Backbone for MlpBackbone {
    fn output_kind(&self) -> OutputKind {
        self.shape.out
    }

    fn locality(&self) -> Locality {
        Locality::Local
    }

    fn cutoff(&self) -> f64 {
        self.shape.cutoff.r_c()
    }

    fn eval_env(&self, env: &AtomicEnvironment) -> Result<Prediction> {
        let g = Graph::from_env(env, &self.shape.cutoff);
        let nbr: Vec<Species> = g
            .neighbor
            .iter()
            .map(|&k| env.neighbor_species[k])
            .collect();
        let values = with_tape(&self.params, |t| {
            let out = self.forward(t, &g, &[env.center_species], &nbr)?;
            Ok::<_, Error>(t.value(out).to_vec())
        })?;
        Ok(Prediction::new(self.shape.out, values))
    }

    fn eval_structure(&self, s: &Structure) -> Result<Prediction> {
        let per_atom = with_tape(&self.params, |t| {
            let out = self.record(t, s)?;
            Ok::<_, Error>(t.value(out).to_vec())
        })?;
        Ok(from_per_atom(self.shape.out, per_atom))
    }
}

pub(crate) fn from_per_atom(kind: OutputKind, per_atom: Vec<f64>) -> Prediction {
    let w = kind.width();
    let mut values = vec![0.0; w];
    for row in per_atom.chunks(w) {
        for (v, x) in values.iter_mut().zip(row) {
            *v += x;
        }
    }
    Prediction {
        kind,
        values,
        per_atom: Some(per_atom),
    }
}

impl Trainable for MlpBackbone {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn record(&self, tape: &mut Tape<'_>, s: &Structure) -> Result<Var> {
        let g = Graph::from_structure(s, &self.shape.cutoff)?;
        let nbr: Vec<Species> = g.neighbor.iter().map(|&j| s.species[j]).collect();
        self.forward(tape, &g, &s.species, &nbr)
    }
}

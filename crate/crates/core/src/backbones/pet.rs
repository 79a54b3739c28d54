//! Desk-scale Point Edge Transformer.
//!
//! Each message-passing block turns every environment into a sequence of one
//! central token plus one token per neighbor and runs a pre-norm transformer
//! over it, with attention weights gated by the radial cutoff. Output tokens
//! feed the atomic and bond heads and, added to the incoming messages, become
//! the messages of the next block along the reverse edge.

use super::graph::Graph;
use super::layout::{Dense, Embedding, Layout, Mlp1, Norm};
use super::mlp::{from_per_atom, join};
use super::{species_indices, Backbone, Locality, OutputKind, Prediction, Trainable};
use crate::autodiff::{with_tape, Tape, Var};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::smoothmath::CutoffParams;
use crate::structures::{AtomicEnvironment, Species, Structure};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BondMode {
    /// `sum_j H_n(t_j) f_c(r_j)`.
    Sum,
    /// The same sum divided by `sum_j f_c(r_j)`.
    Average,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PetShape {
    pub species: Vec<Species>,
    pub d_pet: usize,
    pub n_gnn: usize,
    pub n_tl: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub cutoff: CutoffParams,
    pub bond_mode: BondMode,
    /// Feed per-atom attributes to the position encoder and central token.
    pub attribute_channel: bool,
    /// Position encoder sees only `|r_ij|`, which makes the model invariant.
    pub two_body: bool,
    /// Use neighbor-species embeddings as the first messages.
    pub species_messages: bool,
    pub out: OutputKind,
}

impl PetShape {
    /// Desk-scale defaults.
    pub fn micro(species: Vec<Species>, cutoff: CutoffParams) -> Self {
        PetShape {
            species,
            d_pet: 32,
            n_gnn: 2,
            n_tl: 2,
            n_heads: 2,
            d_ffn: 64,
            cutoff,
            bond_mode: BondMode::Sum,
            attribute_channel: false,
            two_body: false,
            species_messages: false,
            out: OutputKind::SCALAR,
        }
    }

    pub fn two_body(species: Vec<Species>, cutoff: CutoffParams) -> Self {
        PetShape {
            two_body: true,
            ..Self::micro(species, cutoff)
        }
    }

    /// Two-body models with covariant output predict invariant bond
    /// coefficients times powers of the bond direction, so they stay
    /// equivariant and can serve as auxiliary models for tensor targets.
    pub fn directional(&self) -> bool {
        self.two_body && self.out.is_covariant()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_pet == 0 || self.n_gnn == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return Err(Error::param("PET widths and block count must be positive"));
        }
        if self.d_pet % self.n_heads != 0 {
            return Err(Error::param(format!(
                "d_pet = {} is not divisible by n_heads = {}",
                self.d_pet, self.n_heads
            )));
        }
        if self.species.is_empty() {
            return Err(Error::param("PET needs at least one species"));
        }
        Ok(())
    }

    fn geo_width(&self) -> usize {
        let base = if self.two_body { 1 } else { 3 };
        base + usize::from(self.attribute_channel)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("model", if self.two_body { "pet2body" } else { "pet" });
        kv.set("species", join(&self.species));
        kv.set("d_pet", self.d_pet);
        kv.set("n_gnn", self.n_gnn);
        kv.set("n_tl", self.n_tl);
        kv.set("n_heads", self.n_heads);
        kv.set("d_ffn", self.d_ffn);
        kv.set("r_c", self.cutoff.r_c());
        kv.set("delta_rc", self.cutoff.delta());
        kv.set(
            "bond_mode",
            match self.bond_mode {
                BondMode::Sum => "sum",
                BondMode::Average => "average",
            },
        );
        kv.set("attribute_channel", self.attribute_channel);
        kv.set("species_messages", self.species_messages);
        kv.set("out_rank", self.out.rank);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let shape = PetShape {
            species: kv
                .get_list("species")?
                .ok_or_else(|| Error::Config("missing key species".into()))?,
            d_pet: kv.require("d_pet")?,
            n_gnn: kv.require("n_gnn")?,
            n_tl: kv.require("n_tl")?,
            n_heads: kv.require("n_heads")?,
            d_ffn: kv.require("d_ffn")?,
            cutoff: CutoffParams::new(kv.require("r_c")?, kv.require("delta_rc")?)?,
            bond_mode: match kv.raw("bond_mode").unwrap_or("sum") {
                "sum" => BondMode::Sum,
                "average" => BondMode::Average,
                other => return Err(Error::Config(format!("unknown bond_mode {other}"))),
            },
            attribute_channel: kv.get_or("attribute_channel", false)?,
            two_body: kv.raw("model") == Some("pet2body"),
            species_messages: kv.get_or("species_messages", false)?,
            out: OutputKind::tensor(kv.get_or("out_rank", 0)?),
        };
        shape.validate()?;
        Ok(shape)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: Norm,
    qkv: Dense,
    proj: Dense,
    ln2: Norm,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Debug, Clone)]
struct Block {
    center: Embedding,
    neighbor: Embedding,
    first_messages: Option<Embedding>,
    position: Dense,
    center_attribute: Option<(Dense, Mlp1)>,
    compress: Mlp1,
    layers: Vec<EncoderLayer>,
    /// Absent for directional outputs: a lone centre has no direction.
    head_center: Option<Mlp1>,
    head_bond: Mlp1,
}

fn build(shape: &PetShape) -> (Layout, Vec<Block>) {
    let d = shape.d_pet;
    let ns = shape.species.len();
    let width = shape.out.width();
    let mut l = Layout::default();
    let mut blocks = Vec::new();
    for k in 0..shape.n_gnn {
        let p = format!("block{k}");
        let center = l.embedding(&format!("{p}.center_embedding"), ns, d);
        let neighbor = l.embedding(&format!("{p}.neighbor_embedding"), ns, d);
        let first_messages = (k == 0 && shape.species_messages)
            .then(|| l.embedding(&format!("{p}.message_embedding"), ns, d));
        let position = l.dense(&format!("{p}.position"), shape.geo_width(), d);
        let center_attribute = shape.attribute_channel.then(|| {
            (
                l.dense(&format!("{p}.center_attribute"), 1, d),
                l.mlp(&format!("{p}.center_compress"), 2 * d, d, d),
            )
        });
        let has_messages = k > 0 || shape.species_messages;
        let compress = l.mlp(
            &format!("{p}.compress"),
            if has_messages { 3 * d } else { 2 * d },
            d,
            d,
        );
        let layers = (0..shape.n_tl)
            .map(|t| {
                let q = format!("{p}.layer{t}");
                EncoderLayer {
                    ln1: l.norm(&format!("{q}.ln1"), d),
                    qkv: l.dense(&format!("{q}.qkv"), d, 3 * d),
                    proj: l.dense(&format!("{q}.proj"), d, d),
                    ln2: l.norm(&format!("{q}.ln2"), d),
                    ff1: l.dense(&format!("{q}.ff1"), d, shape.d_ffn),
                    ff2: l.dense(&format!("{q}.ff2"), shape.d_ffn, d),
                }
            })
            .collect();
        let (head_center, head_bond) = if shape.directional() {
            (None, l.mlp(&format!("{p}.head_bond"), d, d, 1))
        } else {
            (
                Some(l.mlp(&format!("{p}.head_center"), d, d, width)),
                l.mlp(&format!("{p}.head_bond"), d, d, width),
            )
        };
        blocks.push(Block {
            center,
            neighbor,
            first_messages,
            position,
            center_attribute,
            compress,
            layers,
            head_center,
            head_bond,
        });
    }
    (l, blocks)
}

#[derive(Debug, Clone)]
pub struct Pet {
    shape: PetShape,
    layout: Layout,
    blocks: Vec<Block>,
    params: Vec<f64>,
}

impl Pet {
    pub fn new(shape: PetShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let (layout, blocks) = build(&shape);
        let params = layout.random_init(seed);
        Ok(Pet {
            shape,
            layout,
            blocks,
            params,
        })
    }

    pub fn with_params(shape: PetShape, params: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        let (layout, blocks) = build(&shape);
        if params.len() != layout.len() {
            return Err(Error::ShapeMismatch(format!(
                "PET expects {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        Ok(Pet {
            shape,
            layout,
            blocks,
            params,
        })
    }

    pub fn shape(&self) -> &PetShape {
        &self.shape
    }

    fn forward(&self, t: &mut Tape<'_>, s: &Structure, g: &Graph) -> Result<Var> {
        let shape = &self.shape;
        let d = shape.d_pet;
        let n = g.n_atoms;
        let e = g.n_edges();
        let width = shape.out.width();
        let ci = species_indices(&shape.species, &s.species)?;
        let nbr_species: Vec<Species> = g.neighbor.iter().map(|&j| s.species[j]).collect();
        let ni = species_indices(&shape.species, &nbr_species)?;
        let attr = if shape.attribute_channel {
            Some(s.attribute.as_ref().ok_or_else(|| {
                Error::param("attribute channel enabled but structure has no attributes")
            })?)
        } else {
            None
        };

        let mut geo = Vec::with_capacity(e * shape.geo_width());
        for k in 0..e {
            if shape.two_body {
                geo.push(g.dist[k]);
            } else {
                geo.extend_from_slice(g.disp[k].as_slice());
            }
            if let Some(a) = attr {
                geo.push(a[g.neighbor[k]]);
            }
        }
        let geo = t.constant(&geo, e, shape.geo_width());
        let attr_col = attr.map(|a| t.constant(a, n, 1));

        // Sequence layout: for every atom, its central token then its edges.
        let mut order = Vec::with_capacity(n + e);
        let mut center_rows = Vec::with_capacity(n);
        let mut edge_rows = vec![0; e];
        for i in 0..n {
            center_rows.push(order.len());
            order.push(i);
            for k in g.offsets[i]..g.offsets[i + 1] {
                edge_rows[k] = order.len();
                order.push(n + k);
            }
        }
        let gates: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut gi = vec![1.0];
                gi.extend_from_slice(&g.fc[g.offsets[i]..g.offsets[i + 1]]);
                gi
            })
            .collect();
        let bond_weight: Vec<f64> = match shape.bond_mode {
            BondMode::Sum => g.fc.clone(),
            BondMode::Average => (0..e)
                .map(|k| {
                    let i = g.center[k];
                    let total: f64 = g.fc[g.offsets[i]..g.offsets[i + 1]].iter().sum();
                    if total > 0.0 {
                        g.fc[k] / total
                    } else {
                        0.0
                    }
                })
                .collect(),
        };
        let scatter_values = g.scatter_matrix(&bond_weight);
        let scatter = t.constant(&scatter_values, n, e);
        // Directional outputs: column `w` of the bond sum uses the scatter
        // matrix scaled by component `w` of the unit-vector power.
        let directional: Vec<Var> = if shape.directional() {
            let powers: Vec<Vec<f64>> = (0..e)
                .map(|k| unit_power(&(g.disp[k] / g.dist[k]), shape.out.rank))
                .collect();
            (0..width)
                .map(|w| {
                    let m: Vec<f64> = scatter_values
                        .iter()
                        .enumerate()
                        .map(|(idx, v)| v * powers[idx % e.max(1)][w])
                        .collect();
                    t.constant(&m, n, e)
                })
                .collect()
        } else {
            Vec::new()
        };
        let dh = d / shape.n_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let mut incoming: Option<Var> = None;
        let mut total: Option<Var> = None;
        for block in &self.blocks {
            if let Some(emb) = &block.first_messages {
                incoming = Some(emb.lookup(t, &ni));
            }
            let en = block.neighbor.lookup(t, &ni);
            let pos = block.position.apply(t, geo);
            let pos = t.silu(pos);
            let tokens_in = match incoming {
                Some(x) => t.concat_cols(&[x, en, pos]),
                None => t.concat_cols(&[en, pos]),
            };
            let tokens = block.compress.apply(t, tokens_in);
            let mut central = block.center.lookup(t, &ci);
            if let (Some((lin, comp)), Some(col)) = (&block.center_attribute, attr_col) {
                let a = lin.apply(t, col);
                let a = t.silu(a);
                let c = t.concat_cols(&[central, a]);
                central = comp.apply(t, c);
            }
            let stacked = t.concat_rows(&[central, tokens]);
            let mut z = t.gather_rows(stacked, &order);

            for layer in &block.layers {
                let h = layer.ln1.apply(t, z);
                let qkv = layer.qkv.apply(t, h);
                let mut env_out = Vec::with_capacity(n);
                for i in 0..n {
                    let rows = 1 + g.degree(i);
                    let qkv_i = t.slice_rows(qkv, center_rows[i], rows);
                    let mut heads = Vec::with_capacity(shape.n_heads);
                    for hh in 0..shape.n_heads {
                        let q = t.slice_cols(qkv_i, hh * dh, dh);
                        let k = t.slice_cols(qkv_i, d + hh * dh, dh);
                        let v = t.slice_cols(qkv_i, 2 * d + hh * dh, dh);
                        let scores = t.matmul_nt(q, k);
                        let scores = t.scale(scores, inv_sqrt);
                        let a = t.gated_softmax_rows(scores, &gates[i]);
                        heads.push(t.matmul(a, v));
                    }
                    env_out.push(if heads.len() == 1 {
                        heads[0]
                    } else {
                        t.concat_cols(&heads)
                    });
                }
                let att = t.concat_rows(&env_out);
                let att = layer.proj.apply(t, att);
                z = t.add(z, att);
                let h = layer.ln2.apply(t, z);
                let f = layer.ff1.apply(t, h);
                let f = t.silu(f);
                let f = layer.ff2.apply(t, f);
                z = t.add(z, f);
            }

            let central_out = t.gather_rows(z, &center_rows);
            let edge_out = t.gather_rows(z, &edge_rows);
            let bond = block.head_bond.apply(t, edge_out);
            let contrib = match &block.head_center {
                Some(head) => {
                    let atom = head.apply(t, central_out);
                    let bond = t.matmul(scatter, bond);
                    t.add(atom, bond)
                }
                None => {
                    let cols: Vec<Var> = directional.iter().map(|&m| t.matmul(m, bond)).collect();
                    if cols.len() == 1 {
                        cols[0]
                    } else {
                        t.concat_cols(&cols)
                    }
                }
            };
            total = Some(match total {
                Some(acc) => t.add(acc, contrib),
                None => contrib,
            });

            let outgoing = match incoming {
                Some(x) => t.add(x, edge_out),
                None => edge_out,
            };
            incoming = Some(t.gather_rows(outgoing, &g.rev));
        }
        let out = total.expect("at least one block");
        debug_assert_eq!(t.shape(out), (n, width));
        Ok(out)
    }
}

/// Row-major components of `u ⊗ ... ⊗ u` (`rank` factors).
fn unit_power(u: &nalgebra::Vector3<f64>, rank: u32) -> Vec<f64> {
    let mut out = vec![1.0];
    for _ in 0..rank {
        out = out
            .iter()
            .flat_map(|&a| (0..3).map(move |c| a * u[c]))
            .collect();
    }
    out
}

impl Backbone for Pet {
    fn output_kind(&self) -> OutputKind {
        self.shape.out
    }

    fn locality(&self) -> Locality {
        Locality::Global
    }

    fn cutoff(&self) -> f64 {
        self.shape.cutoff.r_c()
    }

    /// The environment is evaluated as an isolated cluster and the centre's
    /// contribution is returned.
    fn eval_env(&self, env: &AtomicEnvironment) -> Result<Prediction> {
        let p = self.eval_structure(&env.to_cluster())?;
        let row = p.atom(0).expect("per-atom rows").to_vec();
        Ok(Prediction::new(self.shape.out, row))
    }

    fn eval_structure(&self, s: &Structure) -> Result<Prediction> {
        let per_atom = with_tape(&self.params, |t| {
            let out = self.record(t, s)?;
            Ok::<_, Error>(t.value(out).to_vec())
        })?;
        Ok(from_per_atom(self.shape.out, per_atom))
    }
}

impl Trainable for Pet {
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
        self.forward(tape, s, &g)
    }
}

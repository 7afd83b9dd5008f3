//! E(3)-equivariant graph attention network that predicts clean molecules
//! (or their noise) from noised diffusion states.
//!
//! The network carries four streams per molecule: invariant node scalars
//! `h`, equivariant node vector channels `v`, invariant edge features `e`
//! on every ordered atom pair, and the coordinates `x` themselves. Each
//! message-passing layer mixes the streams through a shared pair message,
//! updates `h` with per-channel softmax attention over neighbors, displaces
//! coordinates along unit pair directions, and finishes with layer
//! normalization and a gated block in which vector norms modulate scalars
//! and scalars gate vectors.
//!
//! Rotation equivariance holds by construction: scalars and edges only ever
//! see invariant quantities (distances, radial bumps, vector-channel norms,
//! dot products), while vectors and coordinates are built from equivariant
//! primitives. Translation invariance comes from centering the input
//! coordinates per molecule. Permutation equivariance is exact to the bit
//! because every cross-neighbor reduction accumulates in value-canonical
//! order (see `autodiff`).
//!
//! Batches of molecules run as one disjoint graph on a fresh tape per call;
//! per-graph reductions keep molecules from influencing one another, so a
//! molecule's prediction is bit-identical whether it is batched or alone.

use crate::autodiff::{Tape, Var};
use crate::diffusion::{
    Denoiser, ExtraChannels, ModelPrediction, NoisyMolecule, Parameterization,
};
use crate::error::EquimolError;
use crate::Result;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Number of Gaussian radial basis bumps used to featurize pair distances.
pub const N_RBF: usize = 32;

/// Upper end of the radial basis grid in the same units as coordinates;
/// generously covers desk-scale molecule diameters.
pub const RBF_R_MAX: f64 = 12.0;

/// Upper bound on directed pairs evaluated per tape during inference;
/// batches beyond it are split so activation memory stays flat.
const MAX_PAIRS_PER_CHUNK: usize = 8192;

/// Architecture hyperparameters plus the vocabulary the network is bound to.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    /// Invariant node feature width (`S`).
    pub scalar_dim: usize,
    /// Equivariant vector channel count (`V`).
    pub vector_dim: usize,
    /// Edge feature width (`E`).
    pub edge_dim: usize,
    pub num_layers: usize,
    /// Diffusion horizon `T`; timesteps embed as `t / T`.
    pub steps: usize,
    pub k_atoms: usize,
    pub k_charges: usize,
    pub k_bonds: usize,
    /// Hybridization class count when the extra channels (aromaticity, ring
    /// membership, hybridization) are modeled; `None` disables all three.
    pub k_hybrid: Option<usize>,
    pub parameterization: Parameterization,
}

impl DenoiserConfig {
    /// Reference scale: 256 scalar / 256 vector / 128 edge channels over 12
    /// layers, about 12M parameters.
    pub fn reference(k_atoms: usize, k_charges: usize) -> Self {
        DenoiserConfig {
            scalar_dim: 256,
            vector_dim: 256,
            edge_dim: 128,
            num_layers: 12,
            steps: 500,
            k_atoms,
            k_charges,
            k_bonds: 5,
            k_hybrid: None,
            parameterization: Parameterization::X0,
        }
    }

    /// Desk-scale variant used for CPU training runs: 128/128/64 over 6
    /// layers.
    pub fn compact(k_atoms: usize, k_charges: usize) -> Self {
        DenoiserConfig {
            scalar_dim: 128,
            vector_dim: 128,
            edge_dim: 64,
            num_layers: 6,
            ..Self::reference(k_atoms, k_charges)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.scalar_dim,
            self.vector_dim,
            self.edge_dim,
            self.num_layers,
            self.steps,
            self.k_atoms,
            self.k_charges,
            self.k_bonds,
        ];
        if dims.iter().any(|&d| d == 0) || self.k_hybrid == Some(0) {
            return Err(EquimolError::Config(
                "denoiser dimensions must all be positive".into(),
            ));
        }
        Ok(())
    }

    /// Width of the raw per-node input row (class channels plus time).
    pub(crate) fn node_in_dim(&self) -> usize {
        self.k_atoms + self.k_charges + self.extra_dim() + 1
    }

    /// Width of the per-node logit head output.
    fn node_out_dim(&self) -> usize {
        self.k_atoms + self.k_charges + self.extra_dim()
    }

    fn extra_dim(&self) -> usize {
        match self.k_hybrid {
            Some(kh) => 2 + 2 + kh,
            None => 0,
        }
    }

    /// Width of the concatenated pair message input:
    /// `[h_src | h_dst | W·e | rbf(d) | ‖v_src‖ | ‖v_dst‖ | p_src·p_dst]`.
    fn msg_in_dim(&self) -> usize {
        2 * self.scalar_dim + self.edge_dim + N_RBF + 2 * self.vector_dim + 1
    }

    fn msg_hidden_dim(&self) -> usize {
        (3 * self.scalar_dim / 4).max(1)
    }

    /// The message splits into attention logits (S), vector direction
    /// weights (V), vector gate (V), edge update (E), and one coordinate
    /// step size.
    fn msg_out_dim(&self) -> usize {
        self.scalar_dim + 2 * self.vector_dim + self.edge_dim + 1
    }
}

/// Flat, named parameter tensors; ids double as tape parameter store ids.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a tensor under a unique name and return its id. Ids are dense,
    /// assigned in registration order.
    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, id: usize) -> &ArrayD<f64> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut ArrayD<f64> {
        &mut self.values[id]
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Push every tensor onto a tape as a tracked parameter, returning the
    /// vars indexed by id.
    pub fn load_all(&self, tape: &mut Tape) -> Vec<Var> {
        self.values
            .iter()
            .enumerate()
            .map(|(id, v)| tape.param(id, v.clone()))
            .collect()
    }
}

/// Parameter ids for one message-passing layer.
#[derive(Debug, Clone)]
struct LayerIds {
    edge_in_w: usize,
    edge_in_b: usize,
    msg_w1: usize,
    msg_b1: usize,
    msg_w2: usize,
    msg_b2: usize,
    attn_w: usize,
    vec_w: usize,
    edge_out_w: usize,
    edge_out_b: usize,
    norm_h_gain: usize,
    norm_h_shift: usize,
    norm_v_gain: usize,
    gate_u: usize,
    gate_w: usize,
    gate_w1: usize,
    gate_b1: usize,
    gate_w2: usize,
    gate_b2: usize,
}

#[derive(Debug, Clone)]
struct ParamIds {
    node_embed_w: usize,
    node_embed_b: usize,
    edge_embed_w: usize,
    edge_embed_b: usize,
    layers: Vec<LayerIds>,
    node_head_w: usize,
    node_head_b: usize,
    bond_head_w: usize,
    bond_head_b: usize,
    coord_head_w: usize,
}

/// Disjoint-graph layout for a batch: global node ids, the directed pair
/// list (both directions of every distinct pair, no self pairs), and the
/// index maps the tape ops need.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub sizes: Vec<usize>,
    /// First global node id of each molecule.
    pub node_offset: Vec<usize>,
    /// Molecule id per global node row.
    pub node_graph: Vec<usize>,
    /// First directed pair row of each molecule.
    pub pair_offset: Vec<usize>,
    /// Sender node (global) per pair row.
    pub src: Vec<usize>,
    /// Receiver node (global) per pair row.
    pub dst: Vec<usize>,
    /// Row index of each pair's reversed twin.
    pub mirror: Vec<usize>,
}

impl GraphBatch {
    /// Pairs of one molecule in row order: receiver-major, then sender.
    fn local_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
    }

    /// Row index of local pair (receiver, sender) within a molecule.
    fn local_pair_index(n: usize, i: usize, j: usize) -> usize {
        i * (n - 1) + if j < i { j } else { j - 1 }
    }

    pub fn build(sizes: &[usize]) -> GraphBatch {
        let mut batch = GraphBatch {
            sizes: sizes.to_vec(),
            node_offset: Vec::with_capacity(sizes.len()),
            node_graph: Vec::new(),
            pair_offset: Vec::with_capacity(sizes.len()),
            src: Vec::new(),
            dst: Vec::new(),
            mirror: Vec::new(),
        };
        let mut node0 = 0;
        let mut pair0 = 0;
        for (g, &n) in sizes.iter().enumerate() {
            batch.node_offset.push(node0);
            batch.pair_offset.push(pair0);
            batch.node_graph.extend(std::iter::repeat(g).take(n));
            for (i, j) in Self::local_pairs(n) {
                batch.dst.push(node0 + i);
                batch.src.push(node0 + j);
                batch.mirror.push(pair0 + Self::local_pair_index(n, j, i));
            }
            node0 += n;
            pair0 += n * (n - 1);
        }
        batch
    }

    pub fn num_nodes(&self) -> usize {
        self.node_graph.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.src.len()
    }

    pub fn num_graphs(&self) -> usize {
        self.sizes.len()
    }

    /// 1/N of the owning molecule, one factor per node row; used to scale
    /// neighbor sums.
    fn inv_count_per_node(&self) -> Vec<f64> {
        self.node_graph
            .iter()
            .map(|&g| 1.0 / self.sizes[g] as f64)
            .collect()
    }
}

/// On-tape outputs of one batched forward pass, in global row layout.
pub struct TapeOutputs {
    /// [N, 3] predicted coordinates (or noise), centered per molecule.
    pub coords: Var,
    /// [N, k_atoms].
    pub atom_logits: Var,
    /// [N, k_charges].
    pub charge_logits: Var,
    /// [P, k_bonds], identical on a pair and its mirror.
    pub bond_logits: Var,
    /// ([N, 2], [N, 2], [N, k_hybrid]) when extras are modeled.
    pub extra_logits: Option<(Var, Var, Var)>,
}

/// The denoising network: a parameter store plus the recipe for unrolling
/// it onto a tape.
#[derive(Debug, Clone)]
pub struct EquivariantDenoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    ids: ParamIds,
}

fn glorot(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> ArrayD<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| rng.gen_range(-a..a))
}

fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

fn ones(len: usize) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[len]), 1.0)
}

impl EquivariantDenoiser {
    /// Build a network with freshly initialized parameters. Construction is
    /// deterministic in the seed.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<EquivariantDenoiser> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (s, v, e) = (config.scalar_dim, config.vector_dim, config.edge_dim);

        let node_embed_w = params.register(
            "node_embed.weight",
            glorot(&mut rng, config.node_in_dim(), s),
        );
        let node_embed_b = params.register("node_embed.bias", zeros(&[s]));
        let edge_embed_w =
            params.register("edge_embed.weight", glorot(&mut rng, config.k_bonds, e));
        let edge_embed_b = params.register("edge_embed.bias", zeros(&[e]));

        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = |tail: &str| format!("layer{l}.{tail}");
            layers.push(LayerIds {
                edge_in_w: params.register(p("edge_in.weight"), glorot(&mut rng, e, e)),
                edge_in_b: params.register(p("edge_in.bias"), zeros(&[e])),
                msg_w1: params.register(
                    p("message.w1"),
                    glorot(&mut rng, config.msg_in_dim(), config.msg_hidden_dim()),
                ),
                msg_b1: params.register(p("message.b1"), zeros(&[config.msg_hidden_dim()])),
                msg_w2: params.register(
                    p("message.w2"),
                    glorot(&mut rng, config.msg_hidden_dim(), config.msg_out_dim()),
                ),
                msg_b2: params.register(p("message.b2"), zeros(&[config.msg_out_dim()])),
                attn_w: params.register(p("attn_value.weight"), glorot(&mut rng, s, s)),
                vec_w: params.register(p("vector_mix.weight"), glorot(&mut rng, v, v)),
                edge_out_w: params.register(p("edge_out.weight"), glorot(&mut rng, e, e)),
                edge_out_b: params.register(p("edge_out.bias"), zeros(&[e])),
                norm_h_gain: params.register(p("norm_h.gain"), ones(s)),
                norm_h_shift: params.register(p("norm_h.shift"), zeros(&[s])),
                norm_v_gain: params.register(p("norm_v.gain"), ones(v)),
                gate_u: params.register(p("gate.u"), glorot(&mut rng, v, v)),
                gate_w: params.register(p("gate.w"), glorot(&mut rng, v, v)),
                gate_w1: params.register(p("gate.w1"), glorot(&mut rng, s + v, s)),
                gate_b1: params.register(p("gate.b1"), zeros(&[s])),
                gate_w2: params.register(p("gate.w2"), glorot(&mut rng, s, s + v)),
                gate_b2: params.register(p("gate.b2"), zeros(&[s + v])),
            });
        }

        let node_head_w = params.register(
            "node_head.weight",
            glorot(&mut rng, s, config.node_out_dim()),
        );
        let node_head_b = params.register("node_head.bias", zeros(&[config.node_out_dim()]));
        let bond_head_w =
            params.register("bond_head.weight", glorot(&mut rng, e, config.k_bonds));
        let bond_head_b = params.register("bond_head.bias", zeros(&[config.k_bonds]));
        // Zero-initialized so the coordinate output starts as the identity
        // map on centered inputs.
        let coord_head_w = params.register("coord_head.weight", zeros(&[v, 1]));

        let ids = ParamIds {
            node_embed_w,
            node_embed_b,
            edge_embed_w,
            edge_embed_b,
            layers,
            node_head_w,
            node_head_b,
            bond_head_w,
            bond_head_b,
            coord_head_w,
        };
        Ok(EquivariantDenoiser {
            config,
            params,
            ids,
        })
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params.n_scalars()
    }

    /// Shape- and vocabulary-check one input state against the config.
    fn check_state(&self, state: &NoisyMolecule) -> Result<()> {
        let c = &self.config;
        let n = state.num_atoms();
        if n == 0 {
            return Err(EquimolError::Contract(
                "denoiser input state has no atoms".into(),
            ));
        }
        if state.t > c.steps {
            return Err(EquimolError::Contract(format!(
                "state timestep {} exceeds the horizon {}",
                state.t, c.steps
            )));
        }
        let shape_ok = state.coords.dim() == (n, 3)
            && state.atoms.dim() == (n, c.k_atoms)
            && state.charges.dim() == (n, c.k_charges)
            && state.bonds.dim() == (n, n, c.k_bonds);
        if !shape_ok {
            return Err(EquimolError::Contract(format!(
                "input state shapes do not match the network vocabulary \
                 (atoms {:?} vs k_atoms {}, charges {:?} vs k_charges {}, \
                 bonds {:?} vs k_bonds {})",
                state.atoms.dim(),
                c.k_atoms,
                state.charges.dim(),
                c.k_charges,
                state.bonds.dim(),
                c.k_bonds
            )));
        }
        match (&state.extras, c.k_hybrid) {
            (None, None) => {}
            (Some(ex), Some(kh)) => {
                if ex.aromatic.dim() != (n, 2)
                    || ex.ring.dim() != (n, 2)
                    || ex.hybridization.dim() != (n, kh)
                {
                    return Err(EquimolError::Contract(
                        "extra channel shapes do not match the network vocabulary".into(),
                    ));
                }
            }
            (Some(_), None) => {
                return Err(EquimolError::Contract(
                    "input state carries extra channels but the network does not model them"
                        .into(),
                ));
            }
            (None, Some(_)) => {
                return Err(EquimolError::Contract(
                    "the network models extra channels but the input state has none".into(),
                ));
            }
        }
        Ok(())
    }

    /// Raw per-node input rows: class channels concatenated with `t / T`.
    fn node_features(&self, states: &[NoisyMolecule], batch: &GraphBatch) -> Array2<f64> {
        let c = &self.config;
        let mut feats = Array2::<f64>::zeros((batch.num_nodes(), c.node_in_dim()));
        for (g, state) in states.iter().enumerate() {
            let o = batch.node_offset[g];
            let te = state.t as f64 / c.steps as f64;
            for i in 0..state.num_atoms() {
                let mut col = 0;
                for k in 0..c.k_atoms {
                    feats[[o + i, col]] = state.atoms[[i, k]];
                    col += 1;
                }
                for k in 0..c.k_charges {
                    feats[[o + i, col]] = state.charges[[i, k]];
                    col += 1;
                }
                if let Some(ex) = &state.extras {
                    for k in 0..2 {
                        feats[[o + i, col]] = ex.aromatic[[i, k]];
                        col += 1;
                    }
                    for k in 0..2 {
                        feats[[o + i, col]] = ex.ring[[i, k]];
                        col += 1;
                    }
                    for k in 0..c.k_hybrid.unwrap() {
                        feats[[o + i, col]] = ex.hybridization[[i, k]];
                        col += 1;
                    }
                }
                feats[[o + i, col]] = te;
            }
        }
        feats
    }

    /// Raw per-pair input rows: the bond channels of each directed pair.
    fn edge_features(&self, states: &[NoisyMolecule], batch: &GraphBatch) -> Array2<f64> {
        let c = &self.config;
        let mut feats = Array2::<f64>::zeros((batch.num_pairs(), c.k_bonds));
        for (g, state) in states.iter().enumerate() {
            let po = batch.pair_offset[g];
            for (p, (i, j)) in GraphBatch::local_pairs(state.num_atoms()).enumerate() {
                for k in 0..c.k_bonds {
                    feats[[po + p, k]] = state.bonds[[i, j, k]];
                }
            }
        }
        feats
    }

    fn stacked_coords(states: &[NoisyMolecule], batch: &GraphBatch) -> Array2<f64> {
        let mut coords = Array2::<f64>::zeros((batch.num_nodes(), 3));
        for (g, state) in states.iter().enumerate() {
            let o = batch.node_offset[g];
            for i in 0..state.num_atoms() {
                for d in 0..3 {
                    coords[[o + i, d]] = state.coords[[i, d]];
                }
            }
        }
        coords
    }

    /// One message-passing layer; returns the updated (h, v, x, e).
    #[allow(clippy::too_many_arguments)]
    fn run_layer(
        &self,
        tape: &mut Tape,
        params: &[Var],
        ids: &LayerIds,
        batch: &GraphBatch,
        h: Var,
        v: Var,
        x: Var,
        e: Var,
    ) -> (Var, Var, Var, Var) {
        let c = &self.config;
        let (s, vd, ed) = (c.scalar_dim, c.vector_dim, c.edge_dim);
        let n = batch.num_nodes();
        let g = batch.num_graphs();
        let inv_n = batch.inv_count_per_node();

        // Shared pair message over invariants of both endpoints.
        let h_src = tape.row_gather(h, &batch.src);
        let h_dst = tape.row_gather(h, &batch.dst);
        let e_lin = tape.matmul(e, params[ids.edge_in_w]);
        let e_in = tape.add_bias(e_lin, params[ids.edge_in_b]);
        let x_src = tape.row_gather(x, &batch.src);
        let x_dst = tape.row_gather(x, &batch.dst);
        let rel = tape.sub(x_src, x_dst);
        let dist = tape.row_norm(rel);
        let rbf = tape.rbf_expand(dist, N_RBF, RBF_R_MAX);
        let vnorms = tape.vec_channel_norms(v);
        let dn_src = tape.row_gather(vnorms, &batch.src);
        let dn_dst = tape.row_gather(vnorms, &batch.dst);
        let p_unit = tape.unit_rows(x);
        let p_src = tape.row_gather(p_unit, &batch.src);
        let p_dst = tape.row_gather(p_unit, &batch.dst);
        let p_src3 = tape.reshape(p_src, &[batch.num_pairs(), 3, 1]);
        let p_dst3 = tape.reshape(p_dst, &[batch.num_pairs(), 3, 1]);
        let p_dot = tape.dot3(p_src3, p_dst3);
        let m_in = tape.concat(1, &[h_src, h_dst, e_in, rbf, dn_src, dn_dst, p_dot]);
        let m_lin1 = tape.matmul(m_in, params[ids.msg_w1]);
        let m_b1 = tape.add_bias(m_lin1, params[ids.msg_b1]);
        let m_act = tape.silu(m_b1);
        let m_lin2 = tape.matmul(m_act, params[ids.msg_w2]);
        let m = tape.add_bias(m_lin2, params[ids.msg_b2]);

        let attn_logits = tape.slice_axis(m, 1, 0, s);
        let dir_w = tape.slice_axis(m, 1, s, s + vd);
        let vec_gate = tape.slice_axis(m, 1, s + vd, s + 2 * vd);
        let edge_msg = tape.slice_axis(m, 1, s + 2 * vd, s + 2 * vd + ed);
        let step_size = tape.slice_axis(m, 1, s + 2 * vd + ed, s + 2 * vd + ed + 1);

        // Scalars: per-channel softmax attention over each node's senders.
        let attn = tape.segment_softmax(attn_logits, &batch.dst, n);
        let h_val = tape.matmul(h, params[ids.attn_w]);
        let h_val_src = tape.row_gather(h_val, &batch.src);
        let h_weighted = tape.mul(attn, h_val_src);
        let h_msg = tape.segment_sum(h_weighted, &batch.dst, n);
        let h_res = tape.add(h, h_msg);

        // Edges: bounded residual refresh from the shared message.
        let e_sum = tape.add(e, edge_msg);
        let e_act = tape.silu(e_sum);
        let e_lin2 = tape.matmul(e_act, params[ids.edge_out_w]);
        let e_next = tape.add_bias(e_lin2, params[ids.edge_out_b]);

        // Vectors: directions enter weighted by dir_w, sender channels mix
        // through vec_w under the invariant gate; sums scale by 1/N.
        let dirs = tape.unit_rows(rel);
        let dir_term = tape.outer3(dirs, dir_w);
        let v_src = tape.row_gather(v, &batch.src);
        let v_mixed = tape.matmul_last(v_src, params[ids.vec_w]);
        let v_gated = tape.mul_bcast3(vec_gate, v_mixed);
        let v_pair = tape.add(dir_term, v_gated);
        let v_sum = tape.segment_sum(v_pair, &batch.dst, n);
        let v_scaled = tape.scale_rows_const(v_sum, &inv_n);
        let v_res = tape.add(v, v_scaled);

        // Coordinates: displace along unit directions, normalize the update
        // per molecule, re-center afterwards.
        let dx_pair = tape.mul_bcast_col(dirs, step_size);
        let dx_sum = tape.segment_sum(dx_pair, &batch.dst, n);
        let dx_scaled = tape.scale_rows_const(dx_sum, &inv_n);
        let dx = tape.posnorm_per_graph(dx_scaled, &batch.node_graph, g);
        let x_moved = tape.add(x, dx);
        let x_next = tape.center_per_graph(x_moved, &batch.node_graph, g);

        // Normalize, then the gated exchange: vector norms inform scalar
        // updates, scalars gate the vector channels.
        let h_norm = tape.layer_norm(h_res, params[ids.norm_h_gain], params[ids.norm_h_shift]);
        let v_norm = tape.vec_rms_norm(v_res, params[ids.norm_v_gain]);
        let uv = tape.matmul_last(v_norm, params[ids.gate_u]);
        let wv = tape.matmul_last(v_norm, params[ids.gate_w]);
        let uv_norms = tape.vec_channel_norms(uv);
        let z = tape.concat(1, &[h_norm, uv_norms]);
        let z_lin1 = tape.matmul(z, params[ids.gate_w1]);
        let z_b1 = tape.add_bias(z_lin1, params[ids.gate_b1]);
        let z_act = tape.silu(z_b1);
        let z_lin2 = tape.matmul(z_act, params[ids.gate_w2]);
        let z_out = tape.add_bias(z_lin2, params[ids.gate_b2]);
        let dh = tape.slice_axis(z_out, 1, 0, s);
        let gate = tape.slice_axis(z_out, 1, s, s + vd);
        let h_next = tape.add(h_norm, dh);
        let v_gate = tape.mul_bcast3(gate, wv);
        let v_next = tape.add(v_norm, v_gate);

        (h_next, v_next, x_next, e_next)
    }

    /// Unroll the full network for a batch onto `tape`. Outputs stay on the
    /// tape so callers can build losses and differentiate.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        states: &[NoisyMolecule],
    ) -> Result<(GraphBatch, TapeOutputs)> {
        if states.is_empty() {
            return Err(EquimolError::Contract(
                "denoiser forward needs at least one input state".into(),
            ));
        }
        for state in states {
            self.check_state(state)?;
        }
        let c = &self.config;
        let sizes: Vec<usize> = states.iter().map(|s| s.num_atoms()).collect();
        let batch = GraphBatch::build(&sizes);
        let g = batch.num_graphs();
        let params = self.params.load_all(tape);

        let x_raw = tape.constant(Self::stacked_coords(states, &batch).into_dyn());
        let mut x = tape.center_per_graph(x_raw, &batch.node_graph, g);
        let feats = tape.constant(self.node_features(states, &batch).into_dyn());
        let h_lin = tape.matmul(feats, params[self.ids.node_embed_w]);
        let mut h = tape.add_bias(h_lin, params[self.ids.node_embed_b]);
        let e_feats = tape.constant(self.edge_features(states, &batch).into_dyn());
        let e_lin = tape.matmul(e_feats, params[self.ids.edge_embed_w]);
        let mut e = tape.add_bias(e_lin, params[self.ids.edge_embed_b]);
        let mut v = tape.constant(zeros(&[batch.num_nodes(), 3, c.vector_dim]));

        for ids in &self.ids.layers {
            (h, v, x, e) = self.run_layer(tape, &params, ids, &batch, h, v, x, e);
        }

        let node_lin = tape.matmul(h, params[self.ids.node_head_w]);
        let node_out = tape.add_bias(node_lin, params[self.ids.node_head_b]);
        let atom_logits = tape.slice_axis(node_out, 1, 0, c.k_atoms);
        let charge_logits = tape.slice_axis(node_out, 1, c.k_atoms, c.k_atoms + c.k_charges);
        let extra_logits = c.k_hybrid.map(|kh| {
            let base = c.k_atoms + c.k_charges;
            let aromatic = tape.slice_axis(node_out, 1, base, base + 2);
            let ring = tape.slice_axis(node_out, 1, base + 2, base + 4);
            let hybrid = tape.slice_axis(node_out, 1, base + 4, base + 4 + kh);
            (aromatic, ring, hybrid)
        });

        // Averaging each pair with its mirror makes the bond head exactly
        // symmetric before the shared affine map.
        let e_mirror = tape.row_gather(e, &batch.mirror);
        let e_two = tape.add(e, e_mirror);
        let e_sym = tape.scale(e_two, 0.5);
        let bond_lin = tape.matmul(e_sym, params[self.ids.bond_head_w]);
        let bond_logits = tape.add_bias(bond_lin, params[self.ids.bond_head_b]);

        let v_read = tape.matmul_last(v, params[self.ids.coord_head_w]);
        let v_read2 = tape.reshape(v_read, &[batch.num_nodes(), 3]);
        let x_out = tape.add(x, v_read2);
        let coords = tape.center_per_graph(x_out, &batch.node_graph, g);

        Ok((
            batch,
            TapeOutputs {
                coords,
                atom_logits,
                charge_logits,
                bond_logits,
                extra_logits,
            },
        ))
    }

    /// Run one batch off-tape and split the outputs back into per-molecule
    /// predictions.
    fn predict_chunk(&self, states: &[NoisyMolecule]) -> Result<Vec<ModelPrediction>> {
        let mut tape = Tape::new();
        let (batch, out) = self.forward_tape(&mut tape, states)?;
        let coords = tape.value(out.coords);
        let atoms = tape.value(out.atom_logits);
        let charges = tape.value(out.charge_logits);
        let bonds = tape.value(out.bond_logits);
        let extras = out
            .extra_logits
            .map(|(a, r, hy)| (tape.value(a), tape.value(r), tape.value(hy)));

        let c = &self.config;
        let mut preds = Vec::with_capacity(states.len());
        for (g, &n) in batch.sizes.iter().enumerate() {
            let o = batch.node_offset[g];
            let po = batch.pair_offset[g];
            let take2 = |arr: &ArrayD<f64>, width: usize| {
                Array2::from_shape_fn((n, width), |(i, k)| arr[[o + i, k]])
            };
            let mut bond_out = Array3::<f64>::zeros((n, n, c.k_bonds));
            for (p, (i, j)) in GraphBatch::local_pairs(n).enumerate() {
                for k in 0..c.k_bonds {
                    bond_out[[i, j, k]] = bonds[[po + p, k]];
                }
            }
            preds.push(ModelPrediction {
                coords: take2(coords, 3),
                atoms: take2(atoms, c.k_atoms),
                charges: take2(charges, c.k_charges),
                bonds: bond_out,
                extras: extras.as_ref().map(|(a, r, hy)| ExtraChannels {
                    aromatic: take2(a, 2),
                    ring: take2(r, 2),
                    hybridization: take2(hy, c.k_hybrid.unwrap()),
                }),
            });
        }
        Ok(preds)
    }
}

impl Denoiser for EquivariantDenoiser {
    fn parameterization(&self) -> Parameterization {
        self.config.parameterization
    }

    fn predict_batch(&self, states: &[NoisyMolecule]) -> Result<Vec<ModelPrediction>> {
        let mut preds = Vec::with_capacity(states.len());
        let mut chunk_start = 0;
        let mut chunk_pairs = 0;
        for (idx, state) in states.iter().enumerate() {
            let n = state.num_atoms();
            let p = n * (n.max(1) - 1);
            if idx > chunk_start && chunk_pairs + p > MAX_PAIRS_PER_CHUNK {
                preds.extend(self.predict_chunk(&states[chunk_start..idx])?);
                chunk_start = idx;
                chunk_pairs = 0;
            }
            chunk_pairs += p;
        }
        if chunk_start < states.len() {
            preds.extend(self.predict_chunk(&states[chunk_start..])?);
        }
        Ok(preds)
    }
}

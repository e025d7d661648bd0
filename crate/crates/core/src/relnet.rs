//! Query-conditioned relation encoder over the graph of relations.
//!
//! The query relation's node starts as all ones, every other node as zeros.
//! Each layer sends `h[src] ⊙ e[type]` along typed relation-graph edges, sums
//! per destination, and updates with `relu(norm(W [h ‖ agg] + b))`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kgdata::RelationId;
use crate::ndtape::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::relgraph::RelationGraph;

pub(crate) const PREFIX: &str = "relation.";

#[derive(Debug, Clone, PartialEq)]
pub struct RelNetParams {
    pub dim: usize,
    pub depth: usize,
    pub num_edge_types: usize,
    layers: Vec<RelLayer>,
}

#[derive(Debug, Clone, PartialEq)]
struct RelLayer {
    fundamental: ParamId,
    update_weight: ParamId,
    update_bias: ParamId,
    norm_gamma: ParamId,
    norm_beta: ParamId,
}

/// `R_q`: one row per relation node, conditioned on `query_relation`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalRelationRepr {
    pub query_relation: RelationId,
    pub matrix: Tensor,
}

impl ConditionalRelationRepr {
    pub fn num_relations(&self) -> usize {
        self.matrix.rows()
    }
}

pub(crate) fn uniform_fan_in<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn names(t: usize) -> [String; 5] {
    let p = format!("{PREFIX}layer{t}.");
    [
        format!("{p}fundamental"),
        format!("{p}update.weight"),
        format!("{p}update.bias"),
        format!("{p}norm.gamma"),
        format!("{p}norm.beta"),
    ]
}

fn lookup(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
    if store.get(id).shape() != shape {
        return Err(Error::Checkpoint(format!(
            "parameter `{name}` has shape {:?}, expected {shape:?}",
            store.get(id).shape()
        )));
    }
    Ok(id)
}

impl RelNetParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        dim: usize,
        depth: usize,
        num_edge_types: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let scale = 1.0 / (dim as f64).sqrt();
        let mut layers = Vec::with_capacity(depth);
        for t in 0..depth {
            let [fund, w, b, g, beta] = names(t);
            let emb: Vec<f64> = (0..num_edge_types * dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                })
                .collect();
            layers.push(RelLayer {
                fundamental: store.register(fund, Tensor::matrix(num_edge_types, dim, emb)?)?,
                update_weight: store.register(w, uniform_fan_in(rng, vec![2 * dim, dim], 2 * dim))?,
                update_bias: store.register(b, uniform_fan_in(rng, vec![1, dim], 2 * dim))?,
                norm_gamma: store.register(g, Tensor::filled(vec![1, dim], 1.0))?,
                norm_beta: store.register(beta, Tensor::zeros(vec![1, dim]))?,
            });
        }
        Ok(Self {
            dim,
            depth,
            num_edge_types,
            layers,
        })
    }

    /// Binds to parameters already present in `store` (e.g. from a checkpoint).
    pub fn bind(store: &ParamStore, dim: usize, depth: usize, num_edge_types: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|t| {
                let [fund, w, b, g, beta] = names(t);
                Ok(RelLayer {
                    fundamental: lookup(store, &fund, &[num_edge_types, dim])?,
                    update_weight: lookup(store, &w, &[2 * dim, dim])?,
                    update_bias: lookup(store, &b, &[1, dim])?,
                    norm_gamma: lookup(store, &g, &[1, dim])?,
                    norm_beta: lookup(store, &beta, &[1, dim])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dim,
            depth,
            num_edge_types,
            layers,
        })
    }

    pub fn fundamental(&self, layer: usize) -> ParamId {
        self.layers[layer].fundamental
    }

    pub fn update_weight(&self, layer: usize) -> ParamId {
        self.layers[layer].update_weight
    }

    pub fn update_bias(&self, layer: usize) -> ParamId {
        self.layers[layer].update_bias
    }
}

/// Row `query` is all ones, every other row zero.
pub fn indicator_r(query: RelationId, num_relations: usize, dim: usize) -> Result<Tensor> {
    if query as usize >= num_relations {
        return Err(Error::Index {
            what: "relations",
            index: query as usize,
            len: num_relations,
        });
    }
    let mut t = Tensor::zeros(vec![num_relations, dim]);
    let q = query as usize;
    t.data_mut()[q * dim..(q + 1) * dim].fill(1.0);
    Ok(t)
}

/// Edge index arrays of a relation graph in the layout the tape ops want.
#[derive(Debug, Clone)]
pub struct RelEdgeIndex {
    src: Arc<[u32]>,
    etype: Arc<[u32]>,
    dst: Arc<[u32]>,
    num_nodes: usize,
    num_edge_types: usize,
}

impl RelEdgeIndex {
    pub fn new(rg: &RelationGraph) -> Self {
        let (mut src, mut etype, mut dst) = (Vec::new(), Vec::new(), Vec::new());
        for (s, d, t) in rg.typed_edges() {
            src.push(s);
            dst.push(d);
            etype.push(t);
        }
        Self {
            src: src.into(),
            etype: etype.into(),
            dst: dst.into(),
            num_nodes: rg.num_nodes(),
            num_edge_types: rg.num_edge_types(),
        }
    }
}

pub(crate) fn with_layer<T>(layer: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{op} in layer {layer}"),
        },
        other => other,
    })
}

/// Records the encoder on `tape` and returns the `|R| × d` output.
pub fn encode_on_tape(
    tape: &mut Tape,
    index: &RelEdgeIndex,
    query: RelationId,
    params: &RelNetParams,
    store: &ParamStore,
) -> Result<Var> {
    if index.num_edge_types != params.num_edge_types {
        return Err(Error::contract(format!(
            "relation graph has {} edge types, encoder expects {}",
            index.num_edge_types, params.num_edge_types
        )));
    }
    let mut h = tape.constant(indicator_r(query, index.num_nodes, params.dim)?)?;
    for (t, layer) in params.layers.iter().enumerate() {
        h = with_layer(t, (|| {
            let fund = tape.param(store, layer.fundamental);
            let hs = tape.index_select(h, index.src.clone())?;
            let es = tape.index_select(fund, index.etype.clone())?;
            let msg = tape.mul(hs, es)?;
            let agg = tape.scatter_add(msg, index.dst.clone(), index.num_nodes)?;
            let cat = tape.concat(h, agg, 1)?;
            let w = tape.param(store, layer.update_weight);
            let b = tape.param(store, layer.update_bias);
            let lin = tape.matmul(cat, w)?;
            let lin = tape.add_row(lin, b)?;
            let g = tape.param(store, layer.norm_gamma);
            let beta = tape.param(store, layer.norm_beta);
            let normed = tape.layer_norm(lin, g, beta)?;
            tape.relu(normed)
        })())?;
    }
    Ok(h)
}

pub fn encode_relations(
    rg: &RelationGraph,
    query: RelationId,
    params: &RelNetParams,
    store: &ParamStore,
) -> Result<ConditionalRelationRepr> {
    let mut tape = Tape::new();
    let out = encode_on_tape(&mut tape, &RelEdgeIndex::new(rg), query, params, store)?;
    Ok(ConditionalRelationRepr {
        query_relation: query,
        matrix: tape.value(out).clone(),
    })
}

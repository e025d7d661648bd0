//! Entity-level conditional link predictor.
//!
//! The head entity starts with `R_q[q]`; each layer derives its own edge
//! features `g_t(R_q)` with a 2-layer MLP, passes `h[src] ⊙ feat[rel]` along
//! every (inverse-augmented) edge, sums per destination and applies the same
//! `relu(norm(W [h ‖ agg] + b))` update as the relation encoder. A final MLP
//! maps each entity state to a logit.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kgdata::{EntityId, RelationId, TripleGraph};
use crate::ndtape::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::relnet::{uniform_fan_in, with_layer, ConditionalRelationRepr};

pub(crate) const PREFIX: &str = "entity.";

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn register<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: store.register(format!("{name}.weight"), uniform_fan_in(rng, vec![fan_in, fan_out], fan_in))?,
            bias: store.register(format!("{name}.bias"), uniform_fan_in(rng, vec![1, fan_out], fan_in))?,
        })
    }

    fn bind(store: &ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: lookup(store, &format!("{name}.weight"), &[fan_in, fan_out])?,
            bias: lookup(store, &format!("{name}.bias"), &[1, fan_out])?,
        })
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
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

#[derive(Debug, Clone, PartialEq)]
struct EntLayer {
    project_in: Linear,
    project_out: Linear,
    update: Linear,
    norm_gamma: ParamId,
    norm_beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntNetParams {
    pub dim: usize,
    pub depth: usize,
    layers: Vec<EntLayer>,
    score_hidden: Linear,
    score_out: Linear,
}

impl EntNetParams {
    pub fn register<R: Rng>(store: &mut ParamStore, dim: usize, depth: usize, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        for t in 0..depth {
            let p = format!("{PREFIX}layer{t}");
            layers.push(EntLayer {
                project_in: Linear::register(store, &format!("{p}.project.0"), dim, dim, rng)?,
                project_out: Linear::register(store, &format!("{p}.project.1"), dim, dim, rng)?,
                update: Linear::register(store, &format!("{p}.update"), 2 * dim, dim, rng)?,
                norm_gamma: store.register(format!("{p}.norm.gamma"), Tensor::filled(vec![1, dim], 1.0))?,
                norm_beta: store.register(format!("{p}.norm.beta"), Tensor::zeros(vec![1, dim]))?,
            });
        }
        Ok(Self {
            dim,
            depth,
            layers,
            score_hidden: Linear::register(store, &format!("{PREFIX}score.0"), dim, dim, rng)?,
            score_out: Linear::register(store, &format!("{PREFIX}score.1"), dim, 1, rng)?,
        })
    }

    pub fn bind(store: &ParamStore, dim: usize, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|t| {
                let p = format!("{PREFIX}layer{t}");
                Ok(EntLayer {
                    project_in: Linear::bind(store, &format!("{p}.project.0"), dim, dim)?,
                    project_out: Linear::bind(store, &format!("{p}.project.1"), dim, dim)?,
                    update: Linear::bind(store, &format!("{p}.update"), 2 * dim, dim)?,
                    norm_gamma: lookup(store, &format!("{p}.norm.gamma"), &[1, dim])?,
                    norm_beta: lookup(store, &format!("{p}.norm.beta"), &[1, dim])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dim,
            depth,
            layers,
            score_hidden: Linear::bind(store, &format!("{PREFIX}score.0"), dim, dim)?,
            score_out: Linear::bind(store, &format!("{PREFIX}score.1"), dim, 1)?,
        })
    }
}

/// One logit per entity of the inference graph for `(head, query_relation, ?)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryScores {
    pub head: EntityId,
    pub query_relation: RelationId,
    pub scores: Vec<f64>,
}

/// Row `head` holds the query vector, every other row is zero.
pub fn indicator_e(head: EntityId, num_entities: usize, query_repr: &[f64]) -> Result<Tensor> {
    if head as usize >= num_entities {
        return Err(Error::Index {
            what: "entities",
            index: head as usize,
            len: num_entities,
        });
    }
    let d = query_repr.len();
    let mut t = Tensor::zeros(vec![num_entities, d]);
    let h = head as usize;
    t.data_mut()[h * d..(h + 1) * d].copy_from_slice(query_repr);
    Ok(t)
}

/// Edge arrays of an entity graph for message passing.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    src: Arc<[u32]>,
    rel: Arc<[u32]>,
    dst: Arc<[u32]>,
    num_entities: usize,
    num_relations: usize,
}

impl EdgeIndex {
    pub fn new(g: &TripleGraph) -> Self {
        Self::filtered(g, &[])
    }

    /// Index over all edges except those at the given positions of `g.edges()`.
    pub fn filtered(g: &TripleGraph, skip: &[usize]) -> Self {
        let n = g.num_edges() - skip.len().min(g.num_edges());
        let (mut src, mut rel, mut dst) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for (i, e) in g.edges().iter().enumerate() {
            if skip.contains(&i) {
                continue;
            }
            src.push(e.head);
            rel.push(e.relation);
            dst.push(e.tail);
        }
        Self {
            src: src.into(),
            rel: rel.into(),
            dst: dst.into(),
            num_entities: g.num_entities(),
            num_relations: g.num_relations(),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }
}

/// Records the predictor on `tape`; `relrepr` is the `|R| × d` encoder output.
/// Returns a `|V| × 1` logit column.
pub fn score_on_tape(
    tape: &mut Tape,
    index: &EdgeIndex,
    head: EntityId,
    query: RelationId,
    relrepr: Var,
    params: &EntNetParams,
    store: &ParamStore,
) -> Result<Var> {
    let (rows, cols) = tape.value(relrepr).dims2();
    if rows != index.num_relations || cols != params.dim {
        return Err(Error::contract(format!(
            "relation representation is {rows}x{cols}, graph has {} relations and width is {}",
            index.num_relations, params.dim
        )));
    }
    if query as usize >= rows {
        return Err(Error::Index {
            what: "relations",
            index: query as usize,
            len: rows,
        });
    }
    if head as usize >= index.num_entities {
        return Err(Error::Index {
            what: "entities",
            index: head as usize,
            len: index.num_entities,
        });
    }
    let v = index.num_entities;
    // indicator on the tape so gradients reach R_q[q]
    let qrow = tape.index_select(relrepr, Arc::from(vec![query]))?;
    let mut h = tape.scatter_add(qrow, Arc::from(vec![head]), v)?;
    for (t, layer) in params.layers.iter().enumerate() {
        h = with_layer(t, (|| {
            let hidden = layer.project_in.apply(tape, store, relrepr)?;
            let hidden = tape.relu(hidden)?;
            let feats = layer.project_out.apply(tape, store, hidden)?;
            let hs = tape.index_select(h, index.src.clone())?;
            let rs = tape.index_select(feats, index.rel.clone())?;
            let msg = tape.mul(hs, rs)?;
            let agg = tape.scatter_add(msg, index.dst.clone(), v)?;
            let cat = tape.concat(h, agg, 1)?;
            let lin = layer.update.apply(tape, store, cat)?;
            let g = tape.param(store, layer.norm_gamma);
            let b = tape.param(store, layer.norm_beta);
            let normed = tape.layer_norm(lin, g, b)?;
            tape.relu(normed)
        })())?;
    }
    let hidden = params.score_hidden.apply(tape, store, h)?;
    let hidden = tape.relu(hidden)?;
    params.score_out.apply(tape, store, hidden)
}

pub fn score_query(
    g: &TripleGraph,
    head: EntityId,
    query: RelationId,
    relrepr: &ConditionalRelationRepr,
    params: &EntNetParams,
    store: &ParamStore,
) -> Result<QueryScores> {
    score_with_index(&EdgeIndex::new(g), head, query, relrepr, params, store)
}

pub fn score_with_index(
    index: &EdgeIndex,
    head: EntityId,
    query: RelationId,
    relrepr: &ConditionalRelationRepr,
    params: &EntNetParams,
    store: &ParamStore,
) -> Result<QueryScores> {
    if relrepr.query_relation != query {
        return Err(Error::contract(format!(
            "relation representation is conditioned on {}, query is {query}",
            relrepr.query_relation
        )));
    }
    let mut tape = Tape::new();
    let rq = tape.constant(relrepr.matrix.clone())?;
    let out = score_on_tape(&mut tape, index, head, query, rq, params, store)?;
    Ok(QueryScores {
        head,
        query_relation: query,
        scores: tape.value(out).data().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgdata::Triple;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn indicator_e_places_query_vector() {
        let t = indicator_e(0, 2, &[0.5, -1.0]).unwrap();
        assert_eq!(t.data(), &[0.5, -1.0, 0.0, 0.0]);
        assert!(indicator_e(1, 3, &[0.0, 0.0]).unwrap().data().iter().all(|&v| v == 0.0));
        let t = indicator_e(2, 4, &[0.0, 3.0]).unwrap();
        let nonzero_rows = (0..4).filter(|&r| t.row(r).iter().any(|&v| v != 0.0)).count();
        assert_eq!(nonzero_rows, 1);
        assert!(matches!(indicator_e(4, 4, &[1.0]), Err(Error::Index { .. })));
    }

    /// 3-entity path 0 -r0-> 1 -r0-> 2 (+ inverse r1), width 1, one layer,
    /// identity-like parameters so every step can be followed by hand.
    #[test]
    fn one_layer_matches_hand_evaluation() {
        let g = TripleGraph::new(3, 1, vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2)])
            .unwrap()
            .add_inverse_relations()
            .unwrap();
        let d = 2;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EntNetParams::register(&mut store, d, 1, &mut rng).unwrap();
        let set = |store: &mut ParamStore, name: &str, v: &[f64]| {
            let id = store.id(name).unwrap();
            store.get_mut(id).data_mut().copy_from_slice(v);
        };
        // g: identity, zero bias (relu keeps positive values)
        set(&mut store, "entity.layer0.project.0.weight", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut store, "entity.layer0.project.0.bias", &[0.0, 0.0]);
        set(&mut store, "entity.layer0.project.1.weight", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut store, "entity.layer0.project.1.bias", &[0.0, 0.0]);
        // update: out0 = h0 + agg0, out1 = -h1 + 2 agg1 + 0.5
        set(&mut store, "entity.layer0.update.weight", &[1.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, 2.0]);
        set(&mut store, "entity.layer0.update.bias", &[0.0, 0.5]);
        // scorer: hidden = relu(h), logit = hidden0 - 2 hidden1 + 0.25
        set(&mut store, "entity.score.0.weight", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut store, "entity.score.0.bias", &[0.0, 0.0]);
        set(&mut store, "entity.score.1.weight", &[1.0, -2.0]);
        set(&mut store, "entity.score.1.bias", &[0.25]);

        let relrepr = ConditionalRelationRepr {
            query_relation: 0,
            matrix: Tensor::matrix(2, 2, vec![2.0, 1.0, 0.5, 3.0]).unwrap(),
        };
        let scores = score_query(&g, 0, 0, &relrepr, &params, &store).unwrap();

        // h0: entity 0 = R[0] = [2,1]; others zero.
        // Edge features = R (identity MLP on nonnegative input).
        // Messages: 0->1 via r0: [2,1]⊙[2,1] = [4,1]; 1->2 via r0: 0; 1->0 via r1: 0; 2->1 via r1: 0.
        let h0: [[f64; 2]; 3] = [[2.0, 1.0], [0.0, 0.0], [0.0, 0.0]];
        let agg: [[f64; 2]; 3] = [[0.0, 0.0], [4.0, 1.0], [0.0, 0.0]];
        let eps = 1e-5_f64;
        for v in 0..3 {
            let lin = [h0[v][0] + agg[v][0], -h0[v][1] + 2.0 * agg[v][1] + 0.5];
            let mean = (lin[0] + lin[1]) / 2.0;
            let var = ((lin[0] - mean).powi(2) + (lin[1] - mean).powi(2)) / 2.0;
            let h: Vec<f64> = lin.iter().map(|x| ((x - mean) / (var + eps).sqrt()).max(0.0)).collect();
            let logit = h[0] - 2.0 * h[1] + 0.25;
            assert!((scores.scores[v] - logit).abs() < 1e-12, "entity {v}: {} vs {logit}", scores.scores[v]);
        }
    }

    #[test]
    fn mismatched_relation_vocabulary_is_rejected() {
        let g = TripleGraph::new(2, 1, vec![Triple::new(0, 0, 1)])
            .unwrap()
            .add_inverse_relations()
            .unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EntNetParams::register(&mut store, 2, 1, &mut rng).unwrap();
        let relrepr = ConditionalRelationRepr {
            query_relation: 0,
            matrix: Tensor::zeros(vec![3, 2]),
        };
        assert!(matches!(
            score_query(&g, 0, 0, &relrepr, &params, &store),
            Err(Error::Contract(_))
        ));
    }
}

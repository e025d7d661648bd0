//! The full two-stage model: relation encoder followed by entity predictor.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entnet::{self, EdgeIndex, EntNetParams, QueryScores};
use crate::error::{Error, Result};
use crate::kgdata::{EntityId, RelationId, TripleGraph};
use crate::ndtape::ParamStore;
use crate::relgraph::{RelGraphCache, RelGraphKind, RelationGraph};
use crate::relnet::{self, ConditionalRelationRepr, RelNetParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Relation graph without interaction types.
    NoEtypes,
}

impl Ablation {
    pub fn relgraph_kind(self) -> RelGraphKind {
        match self {
            Ablation::None => RelGraphKind::Typed,
            Ablation::NoEtypes => RelGraphKind::Homogeneous,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoEtypes => "no-etypes",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-etypes" => Ok(Ablation::NoEtypes),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub relation_layers: usize,
    pub entity_layers: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            relation_layers: 6,
            entity_layers: 6,
            ablation: Ablation::None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.relation_layers == 0 || self.entity_layers == 0 {
            return Err(Error::Config("dim and layer counts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub relation_encoder: usize,
    pub entity_predictor: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    relnet: RelNetParams,
    entnet: EntNetParams,
}

impl Model {
    /// Fresh parameters drawn from `seed`, rounded to 32-bit precision so a
    /// checkpoint of the initialization reproduces it exactly.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let relnet = RelNetParams::register(
            &mut store,
            config.dim,
            config.relation_layers,
            config.ablation.relgraph_kind().num_edge_types(),
            &mut rng,
        )?;
        let entnet = EntNetParams::register(&mut store, config.dim, config.entity_layers, &mut rng)?;
        store.round_to_f32();
        Ok(Self {
            config,
            store,
            relnet,
            entnet,
        })
    }

    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let relnet = RelNetParams::bind(
            &store,
            config.dim,
            config.relation_layers,
            config.ablation.relgraph_kind().num_edge_types(),
        )?;
        let entnet = EntNetParams::bind(&store, config.dim, config.entity_layers)?;
        Ok(Self {
            config,
            store,
            relnet,
            entnet,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn relnet(&self) -> &RelNetParams {
        &self.relnet
    }

    pub fn entnet(&self) -> &EntNetParams {
        &self.entnet
    }

    pub fn param_counts(&self) -> ParamCounts {
        let relation_encoder = self.store.num_scalars_with_prefix(relnet::PREFIX);
        let entity_predictor = self.store.num_scalars_with_prefix(entnet::PREFIX);
        ParamCounts {
            relation_encoder,
            entity_predictor,
            total: self.store.num_scalars(),
        }
    }

    pub fn relgraph_kind(&self) -> RelGraphKind {
        self.config.ablation.relgraph_kind()
    }

    pub fn encode_relations(&self, rg: &RelationGraph, query: RelationId) -> Result<ConditionalRelationRepr> {
        relnet::encode_relations(rg, query, &self.relnet, &self.store)
    }

    pub fn score_query(
        &self,
        g: &TripleGraph,
        head: EntityId,
        query: RelationId,
        relrepr: &ConditionalRelationRepr,
    ) -> Result<QueryScores> {
        entnet::score_query(g, head, query, relrepr, &self.entnet, &self.store)
    }
}

/// Bounded memo of `R_q` keyed by `(graph fingerprint, relation-graph kind,
/// query relation)`. Valid for one parameter snapshot only.
#[derive(Debug)]
pub struct RelReprCache {
    capacity: usize,
    inner: Mutex<CacheInner>,
    encoder_calls: AtomicUsize,
}

#[derive(Debug, Default)]
struct CacheInner {
    map: HashMap<(u64, RelGraphKind, RelationId), Arc<ConditionalRelationRepr>>,
    order: VecDeque<(u64, RelGraphKind, RelationId)>,
}

impl Default for RelReprCache {
    fn default() -> Self {
        Self::new(4096)
    }
}

impl RelReprCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            inner: Mutex::new(CacheInner::default()),
            encoder_calls: AtomicUsize::new(0),
        }
    }

    /// How many times the relation encoder actually ran.
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    pub fn get_or_encode(
        &self,
        model: &Model,
        graph: &TripleGraph,
        rg: &RelationGraph,
        query: RelationId,
    ) -> Result<Arc<ConditionalRelationRepr>> {
        let key = (graph.fingerprint(), rg.kind(), query);
        if let Some(hit) = self.inner.lock().expect("cache poisoned").map.get(&key) {
            return Ok(hit.clone());
        }
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        let repr = Arc::new(model.encode_relations(rg, query)?);
        let mut inner = self.inner.lock().expect("cache poisoned");
        if !inner.map.contains_key(&key) {
            if inner.map.len() >= self.capacity {
                if let Some(old) = inner.order.pop_front() {
                    inner.map.remove(&old);
                }
            }
            inner.order.push_back(key);
            inner.map.insert(key, repr.clone());
        }
        Ok(repr)
    }
}

/// Everything needed to score queries against one inference graph.
pub struct GraphScorer<'a> {
    model: &'a Model,
    graph: &'a TripleGraph,
    relation_graph: Arc<RelationGraph>,
    edges: EdgeIndex,
    cache: &'a RelReprCache,
}

impl<'a> GraphScorer<'a> {
    pub fn new(
        model: &'a Model,
        graph: &'a TripleGraph,
        relgraphs: &RelGraphCache,
        cache: &'a RelReprCache,
    ) -> Result<Self> {
        if !graph.inverses_added() {
            return Err(Error::contract("scoring needs an inverse-augmented graph"));
        }
        let relation_graph = relgraphs.get_or_lift(graph, model.relgraph_kind())?;
        Ok(Self {
            model,
            graph,
            relation_graph,
            edges: EdgeIndex::new(graph),
            cache,
        })
    }

    pub fn graph(&self) -> &TripleGraph {
        self.graph
    }

    pub fn relation_repr(&self, query: RelationId) -> Result<Arc<ConditionalRelationRepr>> {
        if query as usize >= self.graph.num_relations() {
            return Err(Error::Index {
                what: "relations",
                index: query as usize,
                len: self.graph.num_relations(),
            });
        }
        self.cache
            .get_or_encode(self.model, self.graph, &self.relation_graph, query)
    }

    pub fn score(&self, head: EntityId, query: RelationId) -> Result<QueryScores> {
        let relrepr = self.relation_repr(query)?;
        entnet::score_with_index(
            &self.edges,
            head,
            query,
            &relrepr,
            self.model.entnet(),
            self.model.params(),
        )
    }

    /// Scores every query; `R_q` is computed once per distinct relation.
    /// Results are in input order and independent of thread count.
    pub fn score_batch(&self, queries: &[(EntityId, RelationId)]) -> Result<Vec<QueryScores>> {
        let mut distinct: Vec<RelationId> = queries.iter().map(|&(_, r)| r).collect();
        distinct.sort_unstable();
        distinct.dedup();
        distinct
            .par_iter()
            .map(|&r| self.relation_repr(r).map(|_| ()))
            .collect::<Result<Vec<()>>>()
            .map_err(|e| {
                let idx = queries
                    .iter()
                    .position(|&(_, r)| r as usize >= self.graph.num_relations())
                    .unwrap_or(0);
                Error::Query {
                    index: idx,
                    source: Box::new(e),
                }
            })?;
        queries
            .par_iter()
            .enumerate()
            .map(|(i, &(h, r))| {
                self.score(h, r).map_err(|e| Error::Query {
                    index: i,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

/// Convenience wrapper building a throwaway scorer.
pub fn score_batch(
    model: &Model,
    g: &TripleGraph,
    queries: &[(EntityId, RelationId)],
    cache: &RelReprCache,
) -> Result<Vec<QueryScores>> {
    let relgraphs = RelGraphCache::new();
    GraphScorer::new(model, g, &relgraphs, cache)?.score_batch(queries)
}

//! Ranking evaluation: filtered MRR and Hits@k under full-entity, tail-only
//! and sampled-negative protocols.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgdata::{DatasetSplit, EntityId, EvalSplit, RelationId, Triple};
use crate::model::{GraphScorer, Model, RelReprCache};
use crate::relgraph::RelGraphCache;

/// Which prediction directions are scored per test triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Directions {
    /// `(h, q, ?)` and `(t, q⁻¹, ?)`.
    Both,
    TailsOnly,
}

/// Candidate set the true answer is ranked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "count")]
pub enum Candidates {
    AllEntities,
    SampledNegatives(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterSets {
    /// No masking.
    Raw,
    /// Mask other true answers from the inference graph and all held-out
    /// queries answered against it.
    Known,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub directions: Directions,
    pub candidates: Candidates,
    pub k_values: Vec<usize>,
    pub filter_sets: FilterSets,
}

impl Protocol {
    pub fn full() -> Self {
        Self {
            directions: Directions::Both,
            candidates: Candidates::AllEntities,
            k_values: vec![1, 3, 10],
            filter_sets: FilterSets::Known,
        }
    }

    pub fn tails_only() -> Self {
        Self {
            directions: Directions::TailsOnly,
            ..Self::full()
        }
    }

    pub fn sampled(n: usize) -> Self {
        Self {
            candidates: Candidates::SampledNegatives(n),
            ..Self::full()
        }
    }

    /// Parses the command-line names `full`, `tails` and `negs50`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "tails" => Ok(Self::tails_only()),
            "negs50" => Ok(Self::sampled(50)),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(Error::Config("k values must be non-empty and ≥ 1".into()));
        }
        if self.candidates == Candidates::SampledNegatives(0) {
            return Err(Error::Config("sampled protocol needs at least one negative".into()));
        }
        Ok(())
    }
}

/// Rank of `true_entity` among all unmasked entities; ties count half.
pub fn rank_of(scores: &[f64], true_entity: EntityId, mask: &[EntityId]) -> Result<f64> {
    let t = true_entity as usize;
    if t >= scores.len() {
        return Err(Error::Index {
            what: "entities",
            index: t,
            len: scores.len(),
        });
    }
    if mask.contains(&true_entity) {
        return Err(Error::contract("true entity is masked"));
    }
    let mut masked = vec![false; scores.len()];
    for &m in mask {
        if let Some(slot) = masked.get_mut(m as usize) {
            *slot = true;
        }
    }
    masked[t] = true;
    let target = scores[t];
    let (mut greater, mut equal) = (0usize, 0usize);
    for (s, _) in scores.iter().zip(&masked).filter(|(_, &m)| !m) {
        if *s > target {
            greater += 1;
        } else if *s == target {
            equal += 1;
        }
    }
    Ok(1.0 + greater as f64 + equal as f64 / 2.0)
}

/// Rank of `true_entity` against an explicit candidate list.
pub fn rank_among(scores: &[f64], true_entity: EntityId, candidates: &[EntityId]) -> Result<f64> {
    let target = *scores.get(true_entity as usize).ok_or(Error::Index {
        what: "entities",
        index: true_entity as usize,
        len: scores.len(),
    })?;
    let (mut greater, mut equal) = (0usize, 0usize);
    for &c in candidates {
        let s = *scores.get(c as usize).ok_or(Error::Index {
            what: "entities",
            index: c as usize,
            len: scores.len(),
        })?;
        if s > target {
            greater += 1;
        } else if s == target {
            equal += 1;
        }
    }
    Ok(1.0 + greater as f64 + equal as f64 / 2.0)
}

pub fn mean_reciprocal_rank(ranks: &[f64]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|r| 1.0 / r).sum::<f64>() / ranks.len() as f64
}

pub fn hits_at(ranks: &[f64], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / ranks.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Tail,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub triple: Triple,
    pub direction: Direction,
    pub rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub protocol: Protocol,
    pub num_queries: usize,
    pub mrr: f64,
    pub hits_at_k: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ranks: Option<Vec<QueryRank>>,
    #[serde(skip)]
    pub per_query: Vec<QueryRank>,
}

impl RankingReport {
    pub fn from_ranks(protocol: Protocol, per_query: Vec<QueryRank>) -> Self {
        let ranks: Vec<f64> = per_query.iter().map(|q| q.rank).collect();
        let hits_at_k = protocol.k_values.iter().map(|&k| (k, hits_at(&ranks, k))).collect();
        Self {
            num_queries: ranks.len(),
            mrr: mean_reciprocal_rank(&ranks),
            hits_at_k,
            protocol,
            ranks: None,
            per_query,
        }
    }

    pub fn ranks(&self) -> Vec<f64> {
        self.per_query.iter().map(|q| q.rank).collect()
    }

    pub fn hits(&self, k: usize) -> Option<f64> {
        self.hits_at_k.get(&k).copied()
    }

    /// Pretty JSON; per-query ranks only when `with_ranks`.
    pub fn to_json(&self, with_ranks: bool) -> String {
        let mut out = self.clone();
        out.ranks = with_ranks.then(|| self.per_query.clone());
        serde_json::to_string_pretty(&out).expect("report serializes")
    }
}

/// Known answers per `(anchor, relation)` over the inverse-augmented triples.
pub struct FilterIndex {
    answers: HashMap<(EntityId, RelationId), Vec<EntityId>>,
}

impl FilterIndex {
    pub fn new(known: &HashSet<Triple>) -> Self {
        let mut answers: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        for t in known {
            answers.entry((t.head, t.relation)).or_default().push(t.tail);
        }
        for v in answers.values_mut() {
            v.sort_unstable();
        }
        Self { answers }
    }

    pub fn empty() -> Self {
        Self {
            answers: HashMap::new(),
        }
    }

    pub fn answers(&self, head: EntityId, relation: RelationId) -> &[EntityId] {
        self.answers
            .get(&(head, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

fn sample_candidates(
    rng: &mut ChaCha8Rng,
    num_entities: usize,
    truth: EntityId,
    known: &[EntityId],
    n: usize,
) -> Vec<EntityId> {
    let mut excluded: HashSet<EntityId> = known.iter().copied().collect();
    excluded.insert(truth);
    let eligible = num_entities.saturating_sub(excluded.len());
    if eligible <= n {
        return (0..num_entities as u32).filter(|e| !excluded.contains(e)).collect();
    }
    let mut chosen = Vec::with_capacity(n);
    while chosen.len() < n {
        let e = rng.random_range(0..num_entities as u32);
        if excluded.insert(e) {
            chosen.push(e);
        }
    }
    chosen
}

fn query_seed(seed: u64, index: usize, direction: Direction) -> u64 {
    let mut x = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (direction as u64 + 1) << 62;
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Ranks the given triples against `scorer`'s graph under `protocol`.
pub fn evaluate_queries(
    scorer: &GraphScorer<'_>,
    queries: &[Triple],
    filter: &FilterIndex,
    protocol: &Protocol,
    seed: u64,
) -> Result<RankingReport> {
    protocol.validate()?;
    let graph = scorer.graph();
    let mut jobs: Vec<(usize, Triple, Direction, EntityId, RelationId, EntityId)> = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        jobs.push((i, *q, Direction::Tail, q.head, q.relation, q.tail));
        if protocol.directions == Directions::Both {
            let inv = graph
                .inverse_relation(q.relation)
                .ok_or_else(|| Error::contract("evaluation graph lacks inverse relations"))?;
            jobs.push((i, *q, Direction::Head, q.tail, inv, q.head));
        }
    }
    let mut per_query = Vec::with_capacity(jobs.len());
    const CHUNK: usize = 256;
    for chunk in jobs.chunks(CHUNK) {
        let batch: Vec<(EntityId, RelationId)> = chunk.iter().map(|j| (j.3, j.4)).collect();
        let scores = scorer.score_batch(&batch)?;
        for (job, s) in chunk.iter().zip(scores) {
            let (i, triple, direction, anchor, rel, truth) = *job;
            let known: Vec<EntityId> = match protocol.filter_sets {
                FilterSets::Raw => Vec::new(),
                FilterSets::Known => filter
                    .answers(anchor, rel)
                    .iter()
                    .copied()
                    .filter(|&e| e != truth)
                    .collect(),
            };
            let rank = match protocol.candidates {
                Candidates::AllEntities => rank_of(&s.scores, truth, &known)?,
                Candidates::SampledNegatives(n) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(query_seed(seed, i, direction));
                    let cands = sample_candidates(&mut rng, graph.num_entities(), truth, &known, n);
                    rank_among(&s.scores, truth, &cands)?
                }
            };
            per_query.push(QueryRank {
                triple,
                direction,
                rank,
            });
        }
    }
    Ok(RankingReport::from_ranks(protocol.clone(), per_query))
}

/// Zero-shot or post-training evaluation of `model` on one side of a split.
pub fn evaluate(
    model: &Model,
    split: &DatasetSplit,
    which: EvalSplit,
    protocol: &Protocol,
    seed: u64,
) -> Result<RankingReport> {
    let graph = split.graph_for(which);
    let relgraphs = RelGraphCache::new();
    let cache = RelReprCache::default();
    let scorer = GraphScorer::new(model, graph, &relgraphs, &cache)?;
    let filter = match protocol.filter_sets {
        FilterSets::Raw => FilterIndex::empty(),
        FilterSets::Known => FilterIndex::new(&split.known_triples(which)),
    };
    evaluate_queries(&scorer, split.queries_for(which), &filter, protocol, seed)
}

//! Seeded synthetic graphs built from a compositional rule.
//!
//! Entities are split into `2 * num_rules` types arranged in a ring. Rule
//! `m` owns three relations: `a` maps type `2m` into `2m+1`, `b` maps `2m+1`
//! into `2m+2`, and `c = b ∘ a`. Leftover relations connect random type
//! pairs with random edges. Held-out queries come from the composed
//! relations only; their answers are reachable through an `a`, `b` path.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgdata::{DatasetSplit, SplitMode, Triple, TripleGraph, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_entities: usize,
    pub num_relations: usize,
    /// Probability that a head gets one extra random tail in `a` and `b`.
    pub branch_prob: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    /// Prefix for entity and relation names; different prefixes give
    /// disjoint vocabularies.
    pub prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_entities: 2000,
            num_relations: 20,
            branch_prob: 0.2,
            valid_fraction: 0.05,
            test_fraction: 0.1,
            seed: 0,
            prefix: "a".into(),
        }
    }
}

/// Role of each relation in the generated graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationRole {
    First { rule: usize },
    Second { rule: usize },
    Composed { rule: usize },
    Noise,
}

#[derive(Debug, Clone)]
pub struct SynthGraph {
    pub split: DatasetSplit,
    pub roles: Vec<RelationRole>,
}

fn check(cfg: &SynthConfig) -> Result<usize> {
    let rules = cfg.num_relations / 3;
    if rules == 0 {
        return Err(Error::Config("synthetic graphs need at least 3 relations".into()));
    }
    if cfg.num_entities < 4 * rules {
        return Err(Error::Config(format!(
            "{} entities are too few for {rules} rules",
            cfg.num_entities
        )));
    }
    let held = cfg.valid_fraction + cfg.test_fraction;
    if !(0.0..=1.0).contains(&cfg.branch_prob) || !(0.0..1.0).contains(&held) || cfg.valid_fraction < 0.0 || cfg.test_fraction < 0.0 {
        return Err(Error::Config("synthetic fractions out of range".into()));
    }
    Ok(rules)
}

/// Generates a transductive split. Entity and relation ids are shuffled so
/// roles cannot be read off the numbering.
pub fn generate(cfg: &SynthConfig) -> Result<SynthGraph> {
    let rules = check(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.num_entities;
    let num_types = 2 * rules;

    let mut entity_order: Vec<u32> = (0..n as u32).collect();
    entity_order.shuffle(&mut rng);
    let types: Vec<Vec<u32>> = (0..num_types)
        .map(|k| entity_order.iter().skip(k).step_by(num_types).copied().collect())
        .collect();

    let mut relation_ids: Vec<u32> = (0..cfg.num_relations as u32).collect();
    relation_ids.shuffle(&mut rng);
    let mut roles = vec![RelationRole::Noise; cfg.num_relations];

    let mut edges: Vec<Triple> = Vec::new();
    let mut composed: Vec<Triple> = Vec::new();
    let map = |from: &[u32], to: &[u32], rng: &mut ChaCha8Rng| -> Vec<(u32, Vec<u32>)> {
        from.iter()
            .map(|&x| {
                let mut tails = vec![to[rng.random_range(0..to.len())]];
                if rng.random_bool(cfg.branch_prob) {
                    let extra = to[rng.random_range(0..to.len())];
                    if extra != tails[0] {
                        tails.push(extra);
                    }
                }
                (x, tails)
            })
            .collect()
    };
    for m in 0..rules {
        let (ra, rb, rc) = (relation_ids[3 * m], relation_ids[3 * m + 1], relation_ids[3 * m + 2]);
        roles[ra as usize] = RelationRole::First { rule: m };
        roles[rb as usize] = RelationRole::Second { rule: m };
        roles[rc as usize] = RelationRole::Composed { rule: m };
        let (ti, tj, tk) = (&types[2 * m], &types[2 * m + 1], &types[(2 * m + 2) % num_types]);
        let fa = map(ti, tj, &mut rng);
        let fb = map(tj, tk, &mut rng);
        let fb_lookup: std::collections::HashMap<u32, &Vec<u32>> = fb.iter().map(|(y, zs)| (*y, zs)).collect();
        for (x, ys) in &fa {
            for &y in ys {
                edges.push(Triple::new(*x, ra, y));
                for &z in fb_lookup[&y] {
                    composed.push(Triple::new(*x, rc, z));
                }
            }
        }
        for (y, zs) in &fb {
            for &z in zs {
                edges.push(Triple::new(*y, rb, z));
            }
        }
    }
    for &r in &relation_ids[3 * rules..] {
        let (src, dst) = (rng.random_range(0..num_types), rng.random_range(0..num_types));
        for _ in 0..n / num_types {
            let h = types[src][rng.random_range(0..types[src].len())];
            let t = types[dst][rng.random_range(0..types[dst].len())];
            edges.push(Triple::new(h, r, t));
        }
    }

    composed.sort_unstable();
    composed.dedup();
    composed.shuffle(&mut rng);
    let n_valid = (composed.len() as f64 * cfg.valid_fraction).round() as usize;
    let n_test = (composed.len() as f64 * cfg.test_fraction).round() as usize;
    let test: Vec<Triple> = composed[..n_test].to_vec();
    let valid: Vec<Triple> = composed[n_test..n_test + n_valid].to_vec();
    edges.extend_from_slice(&composed[n_test + n_valid..]);

    let entities = Arc::new(Vocab::from_names((0..n).map(|i| format!("{}_e{i}", cfg.prefix))));
    let relations = Arc::new(Vocab::from_names(
        (0..cfg.num_relations).map(|i| format!("{}_r{i}", cfg.prefix)),
    ));
    let train = TripleGraph::with_vocabs(entities, relations, edges)?;
    let split = DatasetSplit::transductive(train, valid, test)?;
    Ok(SynthGraph { split, roles })
}

/// Training split from `train_cfg` paired with a test graph drawn from the
/// same rule under `test_cfg` (typically another seed and prefix).
pub fn generate_transfer(train_cfg: &SynthConfig, test_cfg: &SynthConfig) -> Result<DatasetSplit> {
    let source = generate(train_cfg)?.split;
    let target = generate(test_cfg)?.split;
    let base = |g: &TripleGraph| -> Result<TripleGraph> {
        let edges = g.base_edges().copied().collect();
        match (g.entity_names(), g.relation_names()) {
            (Some(e), Some(r)) => TripleGraph::with_vocabs(e.clone(), r.clone(), edges),
            _ => TripleGraph::new(g.num_entities(), g.num_base_relations(), edges),
        }
    };
    DatasetSplit::inductive(
        SplitMode::InductiveEr,
        base(&source.train_graph)?,
        base(&target.valid_graph)?,
        base(&target.test_graph)?,
        target.valid_queries,
        target.test_queries,
    )
}

fn write_queries(path: &Path, graph: &TripleGraph, queries: &[Triple]) -> Result<()> {
    let label = |v: Option<&Arc<Vocab>>, id: u32| {
        v.and_then(|v| v.name(id)).map(str::to_owned).unwrap_or_else(|| id.to_string())
    };
    let mut out = Vec::new();
    for q in queries {
        writeln!(
            out,
            "{}\t{}\t{}",
            label(graph.entity_names(), q.head),
            label(graph.relation_names(), q.relation),
            label(graph.entity_names(), q.tail)
        )
        .expect("writing to a Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_graph(path: &Path, graph: &TripleGraph) -> Result<()> {
    let mut out = Vec::new();
    graph.write_triples(&mut out).expect("writing to a Vec");
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a split as a dataset directory readable by
/// [`load_dataset`](crate::kgdata::load_dataset).
pub fn write_dataset(split: &DatasetSplit, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_graph(&dir.join("train.txt"), &split.train_graph)?;
    write_queries(&dir.join("valid.txt"), &split.valid_graph, &split.valid_queries)?;
    write_queries(&dir.join("test.txt"), &split.test_graph, &split.test_queries)?;
    if split.mode != SplitMode::Transductive {
        write_graph(&dir.join("valid_graph.txt"), &split.valid_graph)?;
        write_graph(&dir.join("test_graph.txt"), &split.test_graph)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgdata::load_dataset;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            num_entities: 60,
            num_relations: 7,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn seeded_and_sized() {
        let a = generate(&small(1)).unwrap();
        let b = generate(&small(1)).unwrap();
        assert_eq!(*a.split.train_graph, *b.split.train_graph);
        assert_eq!(a.split.test_queries, b.split.test_queries);
        assert_eq!(a.split.train_graph.num_entities(), 60);
        assert_eq!(a.split.train_graph.num_base_relations(), 7);
        assert!(!a.split.test_queries.is_empty());
        assert_ne!(*generate(&small(2)).unwrap().split.train_graph, *a.split.train_graph);
    }

    #[test]
    fn held_out_answers_follow_a_path() {
        let s = generate(&small(3)).unwrap();
        let g = &s.split.train_graph;
        for q in &s.split.test_queries {
            let RelationRole::Composed { rule } = s.roles[q.relation as usize] else {
                panic!("held-out query on a non-composed relation");
            };
            let first = s.roles.iter().position(|r| *r == RelationRole::First { rule }).unwrap() as u32;
            let second = s.roles.iter().position(|r| *r == RelationRole::Second { rule }).unwrap() as u32;
            let reachable = g
                .edges()
                .iter()
                .filter(|e| e.head == q.head && e.relation == first)
                .any(|e| g.contains(&Triple::new(e.tail, second, q.tail)));
            assert!(reachable, "{q:?}");
            assert!(!g.contains(q));
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&small(4)).unwrap().split;
        write_dataset(&s, dir.path()).unwrap();
        let back = load_dataset(dir.path(), SplitMode::Transductive).unwrap();
        assert_eq!(back.train_graph.num_edges(), s.train_graph.num_edges());
        assert_eq!(back.test_queries.len(), s.test_queries.len());

        let t = generate_transfer(&small(4), &SynthConfig { prefix: "b".into(), ..small(5) }).unwrap();
        write_dataset(&t, dir.path().join("er")).unwrap();
        let back = load_dataset(dir.path().join("er"), SplitMode::InductiveEr).unwrap();
        assert_eq!(back.test_graph.num_edges(), t.test_graph.num_edges());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&SynthConfig { num_relations: 2, ..small(0) }).is_err());
        assert!(generate(&SynthConfig { test_fraction: 1.5, ..small(0) }).is_err());
    }
}

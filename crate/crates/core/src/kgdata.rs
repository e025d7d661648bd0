//! Multi-relational graphs, vocabularies, and dataset splits.
//!
//! A [`TripleGraph`] is an immutable, deduplicated edge list. Relation ids are
//! dense; after [`TripleGraph::add_inverse_relations`] the inverse of relation
//! `r` is `r + R` where `R` is the original relation count.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = u32;
pub type RelationId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub const fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

impl From<(u32, u32, u32)> for Triple {
    fn from((h, r, t): (u32, u32, u32)) -> Self {
        Triple::new(h, r, t)
    }
}

/// Bidirectional name ↔ dense id map, ids in first-insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab::new();
        for name in names {
            vocab.intern(&name.into());
        }
        vocab
    }

    /// Returns the id of `name`, assigning the next free id if unseen.
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone)]
pub struct TripleGraph {
    num_entities: usize,
    num_relations: usize,
    edges: Vec<Triple>,
    entity_names: Option<Arc<Vocab>>,
    relation_names: Option<Arc<Vocab>>,
    inverses_added: bool,
    fingerprint: u64,
}

impl PartialEq for TripleGraph {
    fn eq(&self, other: &Self) -> bool {
        self.num_entities == other.num_entities
            && self.num_relations == other.num_relations
            && self.inverses_added == other.inverses_added
            && self.edges == other.edges
    }
}

impl TripleGraph {
    /// Builds a graph from raw ids. Duplicate edges are dropped with a warning.
    pub fn new(num_entities: usize, num_relations: usize, edges: Vec<Triple>) -> Result<Self> {
        Self::build(num_entities, num_relations, edges, None, None, false)
    }

    pub fn with_vocabs(
        entities: Arc<Vocab>,
        relations: Arc<Vocab>,
        edges: Vec<Triple>,
    ) -> Result<Self> {
        Self::build(
            entities.len(),
            relations.len(),
            edges,
            Some(entities),
            Some(relations),
            false,
        )
    }

    pub fn empty() -> Self {
        Self::build(0, 0, Vec::new(), None, None, false).expect("empty graph is valid")
    }

    fn build(
        num_entities: usize,
        num_relations: usize,
        mut edges: Vec<Triple>,
        entity_names: Option<Arc<Vocab>>,
        relation_names: Option<Arc<Vocab>>,
        inverses_added: bool,
    ) -> Result<Self> {
        for e in &edges {
            if e.head as usize >= num_entities {
                return Err(Error::Index {
                    what: "entities",
                    index: e.head as usize,
                    len: num_entities,
                });
            }
            if e.tail as usize >= num_entities {
                return Err(Error::Index {
                    what: "entities",
                    index: e.tail as usize,
                    len: num_entities,
                });
            }
            if e.relation as usize >= num_relations {
                return Err(Error::Index {
                    what: "relations",
                    index: e.relation as usize,
                    len: num_relations,
                });
            }
        }
        edges.sort_unstable();
        let before = edges.len();
        edges.dedup();
        if edges.len() != before {
            warn!("dropped {} duplicate triples", before - edges.len());
        }
        if inverses_added && num_relations % 2 != 0 {
            return Err(Error::contract("inverse-augmented graph needs an even relation count"));
        }
        let mut hasher = DefaultHasher::new();
        num_entities.hash(&mut hasher);
        num_relations.hash(&mut hasher);
        inverses_added.hash(&mut hasher);
        edges.hash(&mut hasher);
        Ok(Self {
            num_entities,
            num_relations,
            edges,
            entity_names,
            relation_names,
            inverses_added,
            fingerprint: hasher.finish(),
        })
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    /// Relation count including inverses once they are added.
    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    /// Relation count before inverse augmentation.
    pub fn num_base_relations(&self) -> usize {
        if self.inverses_added {
            self.num_relations / 2
        } else {
            self.num_relations
        }
    }

    /// Edges sorted by `(head, relation, tail)`.
    pub fn edges(&self) -> &[Triple] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn inverses_added(&self) -> bool {
        self.inverses_added
    }

    pub fn entity_names(&self) -> Option<&Arc<Vocab>> {
        self.entity_names.as_ref()
    }

    pub fn relation_names(&self) -> Option<&Arc<Vocab>> {
        self.relation_names.as_ref()
    }

    /// Content hash of the graph structure, stable within a build.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn contains(&self, triple: &Triple) -> bool {
        self.edges.binary_search(triple).is_ok()
    }

    pub fn edge_index(&self, triple: &Triple) -> Option<usize> {
        self.edges.binary_search(triple).ok()
    }

    /// Inverse relation id in the block layout; `None` before augmentation.
    pub fn inverse_relation(&self, r: RelationId) -> Option<RelationId> {
        if !self.inverses_added || r as usize >= self.num_relations {
            return None;
        }
        let half = (self.num_relations / 2) as u32;
        Some(if r < half { r + half } else { r - half })
    }

    /// Original (non-inverse) edges of an augmented graph, or all edges otherwise.
    pub fn base_edges(&self) -> impl Iterator<Item = &Triple> + '_ {
        let half = self.num_base_relations() as u32;
        self.edges.iter().filter(move |e| e.relation < half)
    }

    pub fn add_inverse_relations(&self) -> Result<TripleGraph> {
        if self.inverses_added {
            return Err(Error::contract("inverse relations already added"));
        }
        let r = self.num_relations as u32;
        let mut edges = Vec::with_capacity(self.edges.len() * 2);
        edges.extend_from_slice(&self.edges);
        edges.extend(
            self.edges
                .iter()
                .map(|e| Triple::new(e.tail, e.relation + r, e.head)),
        );
        Self::build(
            self.num_entities,
            self.num_relations * 2,
            edges,
            self.entity_names.clone(),
            self.relation_names.clone(),
            true,
        )
    }

    /// Applies entity and relation relabelings. `relation_perm` must map the
    /// base relations onto themselves; inverses follow their base relation.
    pub fn relabel(&self, entity_perm: &[u32], relation_perm: &[u32]) -> Result<TripleGraph> {
        if entity_perm.len() != self.num_entities || relation_perm.len() != self.num_base_relations()
        {
            return Err(Error::contract("permutation length does not match the graph"));
        }
        let half = self.num_base_relations() as u32;
        let map_rel = |r: u32| {
            if r < half {
                relation_perm[r as usize]
            } else {
                relation_perm[(r - half) as usize] + half
            }
        };
        let edges = self
            .edges
            .iter()
            .map(|e| {
                Triple::new(
                    entity_perm[e.head as usize],
                    map_rel(e.relation),
                    entity_perm[e.tail as usize],
                )
            })
            .collect();
        Self::build(
            self.num_entities,
            self.num_relations,
            edges,
            None,
            None,
            self.inverses_added,
        )
    }

    fn entity_label(&self, id: EntityId) -> String {
        self.entity_names
            .as_ref()
            .and_then(|v| v.name(id))
            .map(str::to_owned)
            .unwrap_or_else(|| id.to_string())
    }

    fn relation_label(&self, id: RelationId) -> String {
        self.relation_names
            .as_ref()
            .and_then(|v| v.name(id))
            .map(str::to_owned)
            .unwrap_or_else(|| id.to_string())
    }

    /// Writes the base edges as `head<TAB>relation<TAB>tail` lines, using names
    /// when vocabularies are attached.
    pub fn write_triples<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in self.base_edges() {
            writeln!(
                out,
                "{}\t{}\t{}",
                self.entity_label(e.head),
                self.relation_label(e.relation),
                self.entity_label(e.tail)
            )?;
        }
        Ok(())
    }
}

struct RawTriple {
    line: usize,
    head: String,
    relation: String,
    tail: String,
}

fn read_raw(path: &Path) -> Result<Vec<RawTriple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = if trimmed.contains('\t') {
            trimmed.split('\t').map(str::trim).collect()
        } else {
            trimmed.split_whitespace().collect()
        };
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        out.push(RawTriple {
            line: i + 1,
            head: fields[0].to_owned(),
            relation: fields[1].to_owned(),
            tail: fields[2].to_owned(),
        });
    }
    Ok(out)
}

fn resolve(
    vocab: &mut Vocab,
    fixed: bool,
    kind: &'static str,
    name: &str,
    path: &Path,
    line: usize,
) -> Result<u32> {
    if fixed {
        vocab.get(name).ok_or_else(|| Error::Vocabulary {
            kind,
            name: name.to_owned(),
            location: Some(format!("{}:{line}", path.display())),
        })
    } else {
        Ok(vocab.intern(name))
    }
}

fn parse_file(
    path: &Path,
    entity_vocab: Option<&Vocab>,
    relation_vocab: Option<&Vocab>,
) -> Result<(Vocab, Vocab, Vec<Triple>)> {
    let raw = read_raw(path)?;
    let mut entities = entity_vocab.cloned().unwrap_or_default();
    let mut relations = relation_vocab.cloned().unwrap_or_default();
    let mut triples = Vec::with_capacity(raw.len());
    for t in &raw {
        let h = resolve(&mut entities, entity_vocab.is_some(), "entity", &t.head, path, t.line)?;
        let r = resolve(
            &mut relations,
            relation_vocab.is_some(),
            "relation",
            &t.relation,
            path,
            t.line,
        )?;
        let tl = resolve(&mut entities, entity_vocab.is_some(), "entity", &t.tail, path, t.line)?;
        triples.push(Triple::new(h, r, tl));
    }
    Ok((entities, relations, triples))
}

/// Loads a triple file. Missing vocabularies are built in first-appearance
/// order; supplied vocabularies are fixed and unknown names are errors.
pub fn load_triples(
    path: impl AsRef<Path>,
    entity_vocab: Option<&Vocab>,
    relation_vocab: Option<&Vocab>,
) -> Result<TripleGraph> {
    let (entities, relations, triples) = parse_file(path.as_ref(), entity_vocab, relation_vocab)?;
    TripleGraph::with_vocabs(Arc::new(entities), Arc::new(relations), triples)
}

/// Loads query triples against fixed vocabularies; order and duplicates are kept.
pub fn load_queries(path: impl AsRef<Path>, entities: &Vocab, relations: &Vocab) -> Result<Vec<Triple>> {
    let (_, _, triples) = parse_file(path.as_ref(), Some(entities), Some(relations))?;
    Ok(triples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    Transductive,
    InductiveE,
    InductiveEr,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Transductive => "transductive",
            SplitMode::InductiveE => "inductive-e",
            SplitMode::InductiveEr => "inductive-er",
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transductive" => Ok(SplitMode::Transductive),
            "inductive-e" | "inductive_e" => Ok(SplitMode::InductiveE),
            "inductive-er" | "inductive_er" | "inductive-e-r" => Ok(SplitMode::InductiveEr),
            other => Err(Error::Config(format!("unknown split mode `{other}`"))),
        }
    }
}

/// Train graph plus the inference graphs and held-out queries for
/// validation and test. All graphs are inverse-augmented; queries use base
/// relation ids of their own inference graph.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train_graph: Arc<TripleGraph>,
    pub valid_graph: Arc<TripleGraph>,
    pub test_graph: Arc<TripleGraph>,
    pub valid_queries: Vec<Triple>,
    pub test_queries: Vec<Triple>,
    pub mode: SplitMode,
}

impl DatasetSplit {
    /// Transductive split: one graph for training and inference.
    pub fn transductive(
        train: TripleGraph,
        valid_queries: Vec<Triple>,
        test_queries: Vec<Triple>,
    ) -> Result<Self> {
        let train = Arc::new(augment(train)?);
        Self::checked(
            SplitMode::Transductive,
            train.clone(),
            train.clone(),
            train,
            valid_queries,
            test_queries,
        )
    }

    pub fn inductive(
        mode: SplitMode,
        train: TripleGraph,
        valid_graph: TripleGraph,
        test_graph: TripleGraph,
        valid_queries: Vec<Triple>,
        test_queries: Vec<Triple>,
    ) -> Result<Self> {
        if mode == SplitMode::Transductive {
            return Err(Error::contract("use DatasetSplit::transductive"));
        }
        Self::checked(
            mode,
            Arc::new(augment(train)?),
            Arc::new(augment(valid_graph)?),
            Arc::new(augment(test_graph)?),
            valid_queries,
            test_queries,
        )
    }

    fn checked(
        mode: SplitMode,
        train_graph: Arc<TripleGraph>,
        valid_graph: Arc<TripleGraph>,
        test_graph: Arc<TripleGraph>,
        valid_queries: Vec<Triple>,
        test_queries: Vec<Triple>,
    ) -> Result<Self> {
        if mode == SplitMode::InductiveE
            && (valid_graph.num_relations() != train_graph.num_relations()
                || test_graph.num_relations() != train_graph.num_relations())
        {
            return Err(Error::contract(
                "inductive-e inference graphs must share the training relation vocabulary",
            ));
        }
        check_queries("valid", &valid_graph, &valid_queries)?;
        check_queries("test", &test_graph, &test_queries)?;
        Ok(Self {
            train_graph,
            valid_graph,
            test_graph,
            valid_queries,
            test_queries,
            mode,
        })
    }

    /// Every known true triple of an inference graph: its edges plus all
    /// held-out queries answered against it, inverse-augmented.
    pub fn known_triples(&self, which: EvalSplit) -> HashSet<Triple> {
        let graph = self.graph_for(which);
        let mut known: HashSet<Triple> = graph.edges().iter().copied().collect();
        let mut add = |qs: &[Triple]| {
            for q in qs {
                known.insert(*q);
                if let Some(inv) = graph.inverse_relation(q.relation) {
                    known.insert(Triple::new(q.tail, inv, q.head));
                }
            }
        };
        let valid_shares = Arc::ptr_eq(&self.valid_graph, graph);
        let test_shares = Arc::ptr_eq(&self.test_graph, graph);
        if valid_shares {
            add(&self.valid_queries);
        }
        if test_shares {
            add(&self.test_queries);
        }
        known
    }

    pub fn graph_for(&self, which: EvalSplit) -> &Arc<TripleGraph> {
        match which {
            EvalSplit::Valid => &self.valid_graph,
            EvalSplit::Test => &self.test_graph,
        }
    }

    pub fn queries_for(&self, which: EvalSplit) -> &[Triple] {
        match which {
            EvalSplit::Valid => &self.valid_queries,
            EvalSplit::Test => &self.test_queries,
        }
    }

    /// Consistently relabels entities and base relations of every graph and query.
    /// Inductive graphs with their own vocabularies receive the permutations
    /// only when sizes match; otherwise pass a transductive split.
    pub fn relabel(&self, entity_perm: &[u32], relation_perm: &[u32]) -> Result<DatasetSplit> {
        let map_q = |qs: &[Triple]| -> Vec<Triple> {
            qs.iter()
                .map(|q| {
                    Triple::new(
                        entity_perm[q.head as usize],
                        relation_perm[q.relation as usize],
                        entity_perm[q.tail as usize],
                    )
                })
                .collect()
        };
        let train = Arc::new(self.train_graph.relabel(entity_perm, relation_perm)?);
        let relabel_shared = |g: &Arc<TripleGraph>| -> Result<Arc<TripleGraph>> {
            if Arc::ptr_eq(g, &self.train_graph) {
                Ok(train.clone())
            } else {
                Ok(Arc::new(g.relabel(entity_perm, relation_perm)?))
            }
        };
        let valid = relabel_shared(&self.valid_graph)?;
        let test = if Arc::ptr_eq(&self.test_graph, &self.valid_graph) {
            valid.clone()
        } else {
            relabel_shared(&self.test_graph)?
        };
        Self::checked(
            self.mode,
            train,
            valid,
            test,
            map_q(&self.valid_queries),
            map_q(&self.test_queries),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Valid,
    Test,
}

fn augment(g: TripleGraph) -> Result<TripleGraph> {
    if g.inverses_added() {
        Ok(g)
    } else {
        g.add_inverse_relations()
    }
}

fn check_queries(which: &str, graph: &TripleGraph, queries: &[Triple]) -> Result<()> {
    let base = graph.num_base_relations() as u32;
    for q in queries {
        if q.head as usize >= graph.num_entities() || q.tail as usize >= graph.num_entities() {
            return Err(Error::Vocabulary {
                kind: "entity",
                name: format!("{}", q.head.max(q.tail)),
                location: Some(format!("{which} queries")),
            });
        }
        if q.relation >= base {
            return Err(Error::Vocabulary {
                kind: "relation",
                name: q.relation.to_string(),
                location: Some(format!("{which} queries")),
            });
        }
        if graph.contains(q) {
            return Err(Error::contract(format!(
                "{which} query {:?} is also an edge of its inference graph",
                q
            )));
        }
    }
    Ok(())
}

fn required(dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "required dataset file missing"),
        ))
    }
}

/// Loads `train.txt`/`valid.txt`/`test.txt` (plus `valid_graph.txt` and
/// `test_graph.txt` for inductive modes) from `dir`.
pub fn load_dataset(dir: impl AsRef<Path>, mode: SplitMode) -> Result<DatasetSplit> {
    let dir = dir.as_ref();
    let train_path = required(dir, "train.txt")?;
    let valid_path = required(dir, "valid.txt")?;
    let test_path = required(dir, "test.txt")?;
    let train = load_triples(&train_path, None, None)?;
    let train_entities = train.entity_names().cloned().unwrap_or_default();
    let train_relations = train.relation_names().cloned().unwrap_or_default();

    match mode {
        SplitMode::Transductive => {
            let valid = load_queries(&valid_path, &train_entities, &train_relations)?;
            let test = load_queries(&test_path, &train_entities, &train_relations)?;
            DatasetSplit::transductive(train, valid, test)
        }
        SplitMode::InductiveE | SplitMode::InductiveEr => {
            let load_inference = |graph_file: &str, query_path: &Path| -> Result<(TripleGraph, Vec<Triple>)> {
                let graph_path = required(dir, graph_file)?;
                let fixed_relations = (mode == SplitMode::InductiveE).then_some(&*train_relations);
                let graph = load_triples(&graph_path, None, fixed_relations)?;
                let ents = graph.entity_names().cloned().unwrap_or_default();
                let rels = graph.relation_names().cloned().unwrap_or_default();
                let queries = load_queries(query_path, &ents, &rels)?;
                Ok((graph, queries))
            };
            let (valid_graph, valid) = load_inference("valid_graph.txt", &valid_path)?;
            let (test_graph, test) = load_inference("test_graph.txt", &test_path)?;
            DatasetSplit::inductive(mode, train, valid_graph, test_graph, valid, test)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn empty_file_gives_empty_graph() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "e.txt", "");
        let g = load_triples(&p, None, None).unwrap();
        assert_eq!((g.num_edges(), g.num_entities(), g.num_relations()), (0, 0, 0));
    }

    #[test]
    fn singleton_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.txt", "a\tr\tb\n");
        let g = load_triples(&p, None, None).unwrap();
        assert_eq!((g.num_edges(), g.num_entities(), g.num_relations()), (1, 2, 1));
        assert!(!g.inverses_added());
    }

    #[test]
    fn whitespace_comments_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "w.txt", "# header\n a  r b \n\na r b\nb\tq\tc\n");
        let g = load_triples(&p, None, None).unwrap();
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.entity_names().unwrap().names(), ["a", "b", "c"]);
        assert_eq!(g.relation_names().unwrap().names(), ["r", "q"]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.txt", "a r b\na r\n");
        match load_triples(&p, None, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn fixed_vocab_rejects_unknown_names() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "v.txt", "a r z\n");
        let ents = Vocab::from_names(["a", "b"]);
        assert!(matches!(
            load_triples(&p, Some(&ents), None),
            Err(Error::Vocabulary { kind: "entity", .. })
        ));
    }

    #[test]
    fn inverse_augmentation_single_edge() {
        let g = TripleGraph::new(2, 1, vec![Triple::new(0, 0, 1)]).unwrap();
        let aug = g.add_inverse_relations().unwrap();
        assert_eq!(aug.num_relations(), 2);
        assert_eq!(aug.edges(), &[Triple::new(0, 0, 1), Triple::new(1, 1, 0)]);
        assert_eq!(aug.inverse_relation(0), Some(1));
        assert_eq!(aug.inverse_relation(1), Some(0));
        assert!(aug.add_inverse_relations().is_err());
    }

    #[test]
    fn inverse_augmentation_counts() {
        let edges = (0..237u32).map(|r| Triple::new(0, r, 1)).collect();
        let g = TripleGraph::new(2, 237, edges).unwrap();
        assert_eq!(g.add_inverse_relations().unwrap().num_relations(), 474);
        let empty = TripleGraph::empty().add_inverse_relations().unwrap();
        assert_eq!((empty.num_edges(), empty.num_relations()), (0, 0));
    }

    #[test]
    fn transductive_dataset_shares_graph() {
        let dir = tempfile::tempdir().unwrap();
        let train: String = (0..10).map(|i| format!("e{i}\tr{}\te{}\n", i % 3, i + 1)).collect();
        write(dir.path(), "train.txt", &train);
        write(dir.path(), "valid.txt", "e0\tr1\te5\ne2\tr0\te7\n");
        write(dir.path(), "test.txt", "e1\tr2\te9\ne3\tr0\te10\n");
        let split = load_dataset(dir.path(), SplitMode::Transductive).unwrap();
        assert_eq!(split.train_graph.num_edges(), 20);
        assert_eq!(split.valid_queries.len(), 2);
        assert_eq!(split.test_queries.len(), 2);
        assert!(Arc::ptr_eq(&split.train_graph, &split.test_graph));
        assert!(Arc::ptr_eq(&split.train_graph, &split.valid_graph));
    }

    #[test]
    fn transductive_unknown_query_entity_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.txt", "a r b\n");
        write(dir.path(), "valid.txt", "a r c\n");
        write(dir.path(), "test.txt", "");
        assert!(matches!(
            load_dataset(dir.path(), SplitMode::Transductive),
            Err(Error::Vocabulary { .. })
        ));
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.txt", "a r b\n");
        let err = load_dataset(dir.path(), SplitMode::Transductive).unwrap_err();
        assert!(err.to_string().contains("valid.txt"), "{err}");
    }

    #[test]
    fn inductive_er_with_disjoint_relations() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.txt", "a r b\nb s c\n");
        write(dir.path(), "valid_graph.txt", "x p y\ny q z\n");
        write(dir.path(), "valid.txt", "x q z\n");
        write(dir.path(), "test_graph.txt", "u m v\nv n w\n");
        write(dir.path(), "test.txt", "u n w\n");
        let split = load_dataset(dir.path(), SplitMode::InductiveEr).unwrap();
        assert_eq!(split.test_graph.num_entities(), 3);
        assert_eq!(split.test_graph.num_relations(), 4);
        assert_eq!(split.test_queries, vec![Triple::new(0, 1, 2)]);
        // inductive-e must refuse the unseen relation names
        assert!(load_dataset(dir.path(), SplitMode::InductiveE).is_err());
    }

    #[test]
    fn query_overlapping_graph_is_rejected() {
        let g = TripleGraph::new(2, 1, vec![Triple::new(0, 0, 1)]).unwrap();
        assert!(DatasetSplit::transductive(g, vec![Triple::new(0, 0, 1)], vec![]).is_err());
    }

    #[test]
    fn loading_twice_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.txt", "c r a\na s b\nb r c\n");
        let g1 = load_triples(&p, None, None).unwrap();
        let g2 = load_triples(&p, None, None).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(g1.entity_names(), g2.entity_names());
        assert_eq!(g1.fingerprint(), g2.fingerprint());
    }

    /// Needs a local FB15k-237 copy: `RELKG_FB15K237=/path/to/train.txt`.
    #[test]
    #[ignore]
    fn fb15k237_train_statistics() {
        let path = std::env::var("RELKG_FB15K237").expect("RELKG_FB15K237 not set");
        let g = load_triples(path, None, None).unwrap();
        assert_eq!((g.num_edges(), g.num_entities(), g.num_relations()), (272_115, 14_541, 237));
    }

    /// Needs a local GraIL WN18RR v1 inductive copy: `RELKG_WN_V1=/path/to/dir`.
    #[test]
    #[ignore]
    fn wn_v1_inductive_statistics() {
        let dir = std::env::var("RELKG_WN_V1").expect("RELKG_WN_V1 not set");
        let split = load_dataset(dir, SplitMode::InductiveE).unwrap();
        assert_eq!(split.test_graph.num_entities(), 922);
        assert_eq!(split.test_graph.num_edges() / 2, 1618);
        assert_eq!(split.test_queries.len(), 373);
    }
}

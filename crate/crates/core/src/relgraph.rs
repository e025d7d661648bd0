//! Graph of relations.
//!
//! Every relation of the (inverse-augmented) entity graph becomes a node. Two
//! relations are linked by an `h2h`, `t2t`, `h2t` or `t2h` edge when they share
//! an entity in the corresponding endpoint roles. The four adjacency patterns
//! are the nonzero patterns of `E_hᵀE_h`, `E_tᵀE_t`, `E_hᵀE_t` and `E_tᵀE_h`
//! where `E_h`/`E_t` are the entity × relation head/tail incidence matrices.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgdata::TripleGraph;

/// Sparse 0/1 matrix in compressed-row form with sorted column indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseBinary {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
}

impl SparseBinary {
    /// Builds from coordinate pairs; duplicates collapse to a single one.
    pub fn from_coords(rows: usize, cols: usize, mut coords: Vec<(u32, u32)>) -> Self {
        coords.sort_unstable();
        coords.dedup();
        let mut indptr = vec![0usize; rows + 1];
        for &(r, _) in &coords {
            indptr[r as usize + 1] += 1;
        }
        for i in 0..rows {
            indptr[i + 1] += indptr[i];
        }
        let indices = coords.into_iter().map(|(_, c)| c).collect();
        Self {
            rows,
            cols,
            indptr,
            indices,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.indices[self.indptr[r]..self.indptr[r + 1]]
    }

    pub fn get(&self, r: usize, c: u32) -> bool {
        self.row(r).binary_search(&c).is_ok()
    }

    /// Nonzero coordinates in row-major order.
    pub fn coords(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).iter().map(move |&c| (r as u32, c)))
    }

    pub fn transpose(&self) -> SparseBinary {
        let coords = self.coords().map(|(r, c)| (c, r)).collect();
        SparseBinary::from_coords(self.cols, self.rows, coords)
    }
}

/// Sparse product `a · b` with hash accumulation per output row. Returns the
/// nonzero entries sorted by `(row, col)` with their integer weights.
pub fn spmm(a: &SparseBinary, b: &SparseBinary) -> Result<Vec<((u32, u32), u32)>> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "spmm",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Vec::new();
    let mut acc: HashMap<u32, u32> = HashMap::new();
    for i in 0..a.rows {
        acc.clear();
        for &k in a.row(i) {
            for &j in b.row(k as usize) {
                *acc.entry(j).or_insert(0) += 1;
            }
        }
        let mut row: Vec<(u32, u32)> = acc.iter().map(|(&j, &w)| (j, w)).collect();
        row.sort_unstable();
        out.extend(row.into_iter().map(|(j, w)| ((i as u32, j), w)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncidencePair {
    pub head_incidence: SparseBinary,
    pub tail_incidence: SparseBinary,
}

pub fn build_incidence(g: &TripleGraph) -> Result<IncidencePair> {
    if !g.inverses_added() {
        return Err(Error::contract("incidence requires an inverse-augmented graph"));
    }
    let (v, r) = (g.num_entities(), g.num_relations());
    let heads = g.edges().iter().map(|e| (e.head, e.relation)).collect();
    let tails = g.edges().iter().map(|e| (e.tail, e.relation)).collect();
    Ok(IncidencePair {
        head_incidence: SparseBinary::from_coords(v, r, heads),
        tail_incidence: SparseBinary::from_coords(v, r, tails),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interaction {
    H2h,
    T2t,
    H2t,
    T2h,
}

impl Interaction {
    pub const ALL: [Interaction; 4] = [
        Interaction::H2h,
        Interaction::T2t,
        Interaction::H2t,
        Interaction::T2h,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Interaction::H2h => "h2h",
            Interaction::T2t => "t2t",
            Interaction::H2t => "h2t",
            Interaction::T2h => "t2h",
        }
    }
}

impl fmt::Display for Interaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelGraphKind {
    /// Four typed interaction edge sets.
    #[default]
    Typed,
    /// One untyped edge set, the union of the four interactions.
    Homogeneous,
}

impl RelGraphKind {
    pub fn num_edge_types(self) -> usize {
        match self {
            RelGraphKind::Typed => 4,
            RelGraphKind::Homogeneous => 1,
        }
    }

    pub fn type_names(self) -> &'static [&'static str] {
        match self {
            RelGraphKind::Typed => &["h2h", "t2t", "h2t", "t2h"],
            RelGraphKind::Homogeneous => &["rel"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationGraph {
    num_nodes: usize,
    kind: RelGraphKind,
    /// One deduplicated `(src, dst)` list per edge type, sorted.
    edges: Vec<Vec<(u32, u32)>>,
}

impl RelationGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn kind(&self) -> RelGraphKind {
        self.kind
    }

    pub fn num_edge_types(&self) -> usize {
        self.edges.len()
    }

    pub fn edges_of_type(&self, t: usize) -> &[(u32, u32)] {
        &self.edges[t]
    }

    pub fn edges(&self, interaction: Interaction) -> Option<&[(u32, u32)]> {
        match self.kind {
            RelGraphKind::Typed => Some(&self.edges[interaction as usize]),
            RelGraphKind::Homogeneous => None,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// All edges as `(src, dst, type)` in type-major order.
    pub fn typed_edges(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        self.edges
            .iter()
            .enumerate()
            .flat_map(|(t, es)| es.iter().map(move |&(s, d)| (s, d, t as u32)))
    }

    /// Applies a permutation of relation-node ids.
    pub fn relabel(&self, perm: &[u32]) -> Result<RelationGraph> {
        if perm.len() != self.num_nodes {
            return Err(Error::contract("permutation length does not match relation graph"));
        }
        let edges = self
            .edges
            .iter()
            .map(|es| {
                let mut mapped: Vec<(u32, u32)> = es
                    .iter()
                    .map(|&(s, d)| (perm[s as usize], perm[d as usize]))
                    .collect();
                mapped.sort_unstable();
                mapped
            })
            .collect();
        Ok(RelationGraph {
            num_nodes: self.num_nodes,
            kind: self.kind,
            edges,
        })
    }

    /// Writes `src<TAB>type<TAB>dst` lines followed by a `#`-prefixed
    /// statistics footer.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let names = self.kind.type_names();
        for (t, es) in self.edges.iter().enumerate() {
            for &(s, d) in es {
                writeln!(out, "{s}\t{}\t{d}", names[t])?;
            }
        }
        writeln!(out, "# nodes\t{}", self.num_nodes)?;
        for (t, es) in self.edges.iter().enumerate() {
            writeln!(out, "# {}\t{}", names[t], es.len())?;
        }
        Ok(())
    }
}

fn pattern(a: &SparseBinary, b: &SparseBinary) -> Result<Vec<(u32, u32)>> {
    Ok(spmm(&a.transpose(), b)?.into_iter().map(|(ij, _)| ij).collect())
}

/// Lifts an inverse-augmented graph to its typed graph of relations.
pub fn lift(g: &TripleGraph) -> Result<RelationGraph> {
    let inc = build_incidence(g)?;
    let (eh, et) = (&inc.head_incidence, &inc.tail_incidence);
    let edges = vec![
        pattern(eh, eh)?,
        pattern(et, et)?,
        pattern(eh, et)?,
        pattern(et, eh)?,
    ];
    Ok(RelationGraph {
        num_nodes: g.num_relations(),
        kind: RelGraphKind::Typed,
        edges,
    })
}

/// Lifts to a single-edge-type relation graph (union of the four interactions).
pub fn lift_homogeneous(g: &TripleGraph) -> Result<RelationGraph> {
    let typed = lift(g)?;
    let mut union: Vec<(u32, u32)> = typed.edges.into_iter().flatten().collect();
    union.sort_unstable();
    union.dedup();
    Ok(RelationGraph {
        num_nodes: typed.num_nodes,
        kind: RelGraphKind::Homogeneous,
        edges: vec![union],
    })
}

pub fn lift_as(g: &TripleGraph, kind: RelGraphKind) -> Result<RelationGraph> {
    match kind {
        RelGraphKind::Typed => lift(g),
        RelGraphKind::Homogeneous => lift_homogeneous(g),
    }
}

/// Thread-safe memo of lifted graphs keyed by graph fingerprint and kind.
#[derive(Debug, Default)]
pub struct RelGraphCache {
    inner: Mutex<HashMap<(u64, RelGraphKind), Arc<RelationGraph>>>,
}

impl RelGraphCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_lift(&self, g: &TripleGraph, kind: RelGraphKind) -> Result<Arc<RelationGraph>> {
        let key = (g.fingerprint(), kind);
        if let Some(rg) = self.inner.lock().expect("cache poisoned").get(&key) {
            return Ok(rg.clone());
        }
        // Lift outside the lock; a concurrent duplicate computation is harmless.
        let rg = Arc::new(lift_as(g, kind)?);
        let mut map = self.inner.lock().expect("cache poisoned");
        Ok(map.entry(key).or_insert(rg).clone())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgdata::Triple;

    fn aug(n: usize, r: usize, edges: &[(u32, u32, u32)]) -> TripleGraph {
        TripleGraph::new(n, r, edges.iter().map(|&e| e.into()).collect())
            .unwrap()
            .add_inverse_relations()
            .unwrap()
    }

    #[test]
    fn incidence_of_single_edge() {
        let g = aug(2, 1, &[(0, 0, 1)]);
        let inc = build_incidence(&g).unwrap();
        assert_eq!(inc.head_incidence.coords().collect::<Vec<_>>(), [(0, 0), (1, 1)]);
        assert_eq!(inc.tail_incidence.coords().collect::<Vec<_>>(), [(0, 1), (1, 0)]);
    }

    #[test]
    fn incidence_of_empty_graph() {
        let g = TripleGraph::empty().add_inverse_relations().unwrap();
        let inc = build_incidence(&g).unwrap();
        assert_eq!(inc.head_incidence.nnz() + inc.tail_incidence.nnz(), 0);
    }

    #[test]
    fn incidence_row_counts() {
        let g = aug(4, 3, &[(0, 0, 1), (0, 1, 2), (0, 2, 3)]);
        let inc = build_incidence(&g).unwrap();
        assert_eq!(inc.head_incidence.row(0), &[0, 1, 2]);
    }

    #[test]
    fn incidence_requires_augmentation() {
        let g = TripleGraph::new(2, 1, vec![Triple::new(0, 0, 1)]).unwrap();
        assert!(build_incidence(&g).is_err());
        assert!(lift(&g).is_err());
    }

    #[test]
    fn spmm_counts_shared_rows() {
        let a = SparseBinary::from_coords(2, 2, vec![(0, 0), (0, 1), (1, 1)]);
        let prod = spmm(&a.transpose(), &a).unwrap();
        assert_eq!(prod, vec![((0, 0), 1), ((0, 1), 1), ((1, 0), 1), ((1, 1), 2)]);
        assert!(spmm(&a, &SparseBinary::from_coords(3, 1, vec![])).is_err());
    }

    #[test]
    fn lift_single_edge() {
        let rg = lift(&aug(2, 1, &[(0, 0, 1)])).unwrap();
        assert_eq!(rg.edges(Interaction::H2t).unwrap(), &[(0, 1), (1, 0)]);
        assert_eq!(rg.edges(Interaction::T2h).unwrap(), &[(0, 1), (1, 0)]);
        assert_eq!(rg.edges(Interaction::H2h).unwrap(), &[(0, 0), (1, 1)]);
        assert_eq!(rg.edges(Interaction::T2t).unwrap(), &[(0, 0), (1, 1)]);
        assert_eq!(rg.num_edges(), 8);
    }

    #[test]
    fn lift_chain_has_tail_to_head() {
        // a -r0-> b -r1-> c ; tail(r0) = b = head(r1)
        let rg = lift(&aug(3, 2, &[(0, 0, 1), (1, 1, 2)])).unwrap();
        assert!(rg.edges(Interaction::T2h).unwrap().contains(&(0, 1)));
        assert!(rg.edges(Interaction::H2t).unwrap().contains(&(1, 0)));
    }

    #[test]
    fn disjoint_components_do_not_interact() {
        let rg = lift(&aug(4, 2, &[(0, 0, 1), (2, 1, 3)])).unwrap();
        // relations {0, 2} live on entities {0,1}; {1, 3} on {2,3}
        let side = |r: u32| r % 2;
        for (s, d, _) in rg.typed_edges() {
            assert_eq!(side(s), side(d));
        }
    }

    #[test]
    fn homogeneous_is_union() {
        let g = aug(2, 1, &[(0, 0, 1)]);
        let h = lift_homogeneous(&g).unwrap();
        assert_eq!(h.num_edge_types(), 1);
        assert_eq!(h.edges_of_type(0), &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert!(h.num_edges() <= lift(&g).unwrap().num_edges());
        let empty = lift_homogeneous(&TripleGraph::empty().add_inverse_relations().unwrap()).unwrap();
        assert_eq!((empty.num_nodes(), empty.num_edges()), (0, 0));
    }

    #[test]
    fn tsv_output_has_footer() {
        let rg = lift(&aug(2, 1, &[(0, 0, 1)])).unwrap();
        let mut buf = Vec::new();
        rg.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 8);
        assert!(text.contains("# nodes\t2\n"));
        assert!(text.contains("# t2h\t2\n"));
    }

    #[test]
    fn cache_lifts_once_per_graph() {
        let cache = RelGraphCache::new();
        let g = aug(2, 1, &[(0, 0, 1)]);
        let a = cache.get_or_lift(&g, RelGraphKind::Typed).unwrap();
        let b = cache.get_or_lift(&g.clone(), RelGraphKind::Typed).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        cache.get_or_lift(&g, RelGraphKind::Homogeneous).unwrap();
        assert_eq!(cache.len(), 2);
    }
}

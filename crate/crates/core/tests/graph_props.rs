use std::collections::BTreeSet;

use proptest::prelude::*;
use relkg::kgdata::{load_triples, Triple, TripleGraph};
use relkg::relgraph::{build_incidence, lift, lift_homogeneous, Interaction};

type EdgeSets = [BTreeSet<(u32, u32)>; 4];

/// Pairwise endpoint comparison over every ordered pair of edges, self
/// pairs included.
fn brute_force(g: &TripleGraph) -> EdgeSets {
    let mut out: EdgeSets = Default::default();
    for a in g.edges() {
        for b in g.edges() {
            if a.head == b.head {
                out[0].insert((a.relation, b.relation));
            }
            if a.tail == b.tail {
                out[1].insert((a.relation, b.relation));
            }
            if a.head == b.tail {
                out[2].insert((a.relation, b.relation));
            }
            if a.tail == b.head {
                out[3].insert((a.relation, b.relation));
            }
        }
    }
    out
}

fn graph_strategy() -> impl Strategy<Value = TripleGraph> {
    (1usize..20, 1usize..6).prop_flat_map(|(v, r)| {
        proptest::collection::vec((0..v as u32, 0..r as u32, 0..v as u32), 0..40).prop_map(move |es| {
            TripleGraph::new(v, r, es.into_iter().map(Triple::from).collect()).unwrap()
        })
    })
}

fn order(interaction: Interaction) -> usize {
    match interaction {
        Interaction::H2h => 0,
        Interaction::T2t => 1,
        Interaction::H2t => 2,
        Interaction::T2h => 3,
    }
}

proptest! {
    #[test]
    fn lift_matches_pairwise_oracle(g in graph_strategy()) {
        let g = g.add_inverse_relations().unwrap();
        let rg = lift(&g).unwrap();
        let expected = brute_force(&g);
        for i in Interaction::ALL {
            let got: BTreeSet<_> = rg.edges(i).unwrap().iter().copied().collect();
            prop_assert_eq!(&got, &expected[order(i)], "{}", i);
            prop_assert_eq!(got.len(), rg.edges(i).unwrap().len());
        }
        prop_assert_eq!(rg.num_nodes(), g.num_relations());
    }

    #[test]
    fn lift_symmetries(g in graph_strategy()) {
        let g = g.add_inverse_relations().unwrap();
        let rg = lift(&g).unwrap();
        let set = |i| rg.edges(i).unwrap().iter().copied().collect::<BTreeSet<_>>();
        let (h2h, t2t, h2t, t2h) = (set(Interaction::H2h), set(Interaction::T2t), set(Interaction::H2t), set(Interaction::T2h));
        for &(a, b) in &h2h { prop_assert!(h2h.contains(&(b, a))); }
        for &(a, b) in &t2t { prop_assert!(t2t.contains(&(b, a))); }
        let transposed: BTreeSet<_> = t2h.iter().map(|&(a, b)| (b, a)).collect();
        prop_assert_eq!(&h2t, &transposed);
        // inverse duality
        let inv = |r: u32| g.inverse_relation(r).unwrap();
        for &(a, b) in &h2h { prop_assert!(t2t.contains(&(inv(a), inv(b)))); }
        for &(a, b) in &t2t { prop_assert!(h2h.contains(&(inv(a), inv(b)))); }
        let n = rg.num_nodes() as u32;
        prop_assert!(rg.typed_edges().all(|(s, d, _)| s < n && d < n));
    }

    #[test]
    fn homogeneous_is_the_union(g in graph_strategy()) {
        let g = g.add_inverse_relations().unwrap();
        let typed = lift(&g).unwrap();
        let homo = lift_homogeneous(&g).unwrap();
        let union: BTreeSet<_> = typed.typed_edges().map(|(s, d, _)| (s, d)).collect();
        let got: BTreeSet<_> = homo.edges_of_type(0).iter().copied().collect();
        prop_assert_eq!(homo.num_edge_types(), 1);
        prop_assert_eq!(got, union);
        prop_assert!(homo.num_edges() <= typed.num_edges());
    }

    #[test]
    fn entity_relabeling_leaves_lift_unchanged(g in graph_strategy(), seed in any::<u64>()) {
        let mut perm: Vec<u32> = (0..g.num_entities() as u32).collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let ident: Vec<u32> = (0..g.num_relations() as u32).collect();
        let moved = g.relabel(&perm, &ident).unwrap().add_inverse_relations().unwrap();
        prop_assert_eq!(lift(&moved).unwrap(), lift(&g.add_inverse_relations().unwrap()).unwrap());
    }

    #[test]
    fn inverse_closure(g in graph_strategy()) {
        let aug = g.add_inverse_relations().unwrap();
        prop_assert_eq!(aug.num_edges(), 2 * g.num_edges());
        prop_assert_eq!(aug.num_relations(), 2 * g.num_relations());
        for e in aug.edges() {
            let inv = aug.inverse_relation(e.relation).unwrap();
            let back = Triple::new(e.tail, inv, e.head);
            prop_assert!(aug.contains(&back));
            prop_assert_eq!(aug.inverse_relation(inv), Some(e.relation));
        }
        prop_assert!(aug.add_inverse_relations().is_err());
    }

    #[test]
    fn incidence_matches_definition(g in graph_strategy()) {
        let aug = g.add_inverse_relations().unwrap();
        let inc = build_incidence(&aug).unwrap();
        let heads: BTreeSet<(u32, u32)> = aug.edges().iter().map(|e| (e.head, e.relation)).collect();
        let tails: BTreeSet<(u32, u32)> = aug.edges().iter().map(|e| (e.tail, e.relation)).collect();
        let got_h: BTreeSet<_> = inc.head_incidence.coords().collect();
        let got_t: BTreeSet<_> = inc.tail_incidence.coords().collect();
        prop_assert_eq!(got_h, heads);
        prop_assert_eq!(got_t, tails);
    }

    #[test]
    fn text_round_trip(g in graph_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.txt");
        let mut buf = Vec::new();
        g.write_triples(&mut buf).unwrap();
        std::fs::write(&path, &buf).unwrap();
        let back = load_triples(&path, None, None).unwrap();
        let again = load_triples(&path, None, None).unwrap();
        prop_assert_eq!(back.edges(), again.edges());
        // names are decimal ids; map them back
        let ents = back.entity_names().unwrap();
        let rels = back.relation_names().unwrap();
        let decoded: BTreeSet<Triple> = back
            .edges()
            .iter()
            .map(|e| Triple::new(
                ents.name(e.head).unwrap().parse().unwrap(),
                rels.name(e.relation).unwrap().parse().unwrap(),
                ents.name(e.tail).unwrap().parse().unwrap(),
            ))
            .collect();
        let original: BTreeSet<Triple> = g.edges().iter().copied().collect();
        prop_assert_eq!(decoded, original);
    }
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relkg::evalrank::{evaluate, Protocol};
use relkg::kgdata::EvalSplit;
use relkg::model::{Ablation, Model, ModelConfig};
use relkg::relgraph::lift_as;
use relkg::synth::{generate, SynthConfig};

fn model(ablation: Ablation) -> Model {
    Model::new(
        ModelConfig {
            dim: 8,
            relation_layers: 3,
            entity_layers: 3,
            ablation,
        },
        21,
    )
    .unwrap()
}

fn toy() -> relkg::DatasetSplit {
    generate(&SynthConfig {
        num_entities: 40,
        num_relations: 7,
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap()
    .split
}

fn perm(n: usize, seed: u64) -> Vec<u32> {
    let mut p: Vec<u32> = (0..n as u32).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

fn full_relation_perm(base: &[u32]) -> Vec<u32> {
    let r = base.len() as u32;
    base.iter().copied().chain(base.iter().map(|&p| p + r)).collect()
}

#[test]
fn relation_encoder_is_equivariant() {
    let split = toy();
    let g = &split.train_graph;
    let base = perm(g.num_base_relations(), 5);
    let ident: Vec<u32> = (0..g.num_entities() as u32).collect();
    let moved = g.relabel(&ident, &base).unwrap();
    let full = full_relation_perm(&base);
    for ablation in [Ablation::None, Ablation::NoEtypes] {
        let m = model(ablation);
        let rg = lift_as(g, ablation.relgraph_kind()).unwrap();
        let rg2 = lift_as(&moved, ablation.relgraph_kind()).unwrap();
        assert_eq!(rg.relabel(&full).unwrap(), rg2);
        for q in 0..g.num_relations() as u32 {
            let a = m.encode_relations(&rg, q).unwrap().matrix;
            let b = m.encode_relations(&rg2, full[q as usize]).unwrap().matrix;
            for r in 0..g.num_relations() {
                let pr = full[r] as usize;
                let (x, y) = (a.row(r), b.row(pr));
                assert!(
                    x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()),
                    "relation {r} differs after relabeling"
                );
            }
        }
    }
}

#[test]
fn entity_scores_are_equivariant() {
    let split = toy();
    let g = &split.train_graph;
    let ents = perm(g.num_entities(), 8);
    let rels = perm(g.num_base_relations(), 9);
    let moved = g.relabel(&ents, &rels).unwrap();
    let full = full_relation_perm(&rels);
    let m = model(Ablation::None);
    let rg = lift_as(g, m.relgraph_kind()).unwrap();
    let rg2 = lift_as(&moved, m.relgraph_kind()).unwrap();
    for (h, q) in [(0u32, 0u32), (5, 3), (17, 9), (39, 13)] {
        let (h2, q2) = (ents[h as usize], full[q as usize]);
        let a = m.score_query(g, h, q, &m.encode_relations(&rg, q).unwrap()).unwrap().scores;
        let b = m
            .score_query(&moved, h2, q2, &m.encode_relations(&rg2, q2).unwrap())
            .unwrap()
            .scores;
        for v in 0..g.num_entities() {
            assert_eq!(a[v].to_bits(), b[ents[v] as usize].to_bits(), "entity {v}");
        }
    }
}

#[test]
fn ranking_report_is_invariant_under_relabeling() {
    let split = toy();
    let m = model(Ablation::None);
    let reference = evaluate(&m, &split, EvalSplit::Test, &Protocol::full(), 0).unwrap();
    assert!(reference.num_queries > 0);
    for seed in 0..3 {
        let ents = perm(split.train_graph.num_entities(), 100 + seed);
        let ident_r: Vec<u32> = (0..split.train_graph.num_base_relations() as u32).collect();
        let ident_e: Vec<u32> = (0..split.train_graph.num_entities() as u32).collect();
        let rels = perm(split.train_graph.num_base_relations(), 200 + seed);
        for (e, r) in [(&ents, &ident_r), (&ident_e, &rels)] {
            let moved = split.relabel(e, r).unwrap();
            let report = evaluate(&m, &moved, EvalSplit::Test, &Protocol::full(), 0).unwrap();
            assert_eq!(report.ranks(), reference.ranks());
            assert_eq!(report.mrr.to_bits(), reference.mrr.to_bits());
        }
    }
}

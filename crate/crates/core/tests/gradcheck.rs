use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relkg::kgdata::{Triple, TripleGraph};
use relkg::model::{Ablation, Model, ModelConfig};
use relkg::ndtape::{ParamId, ParamStore, Tape, Tensor, Var};
use relkg::relgraph::lift_as;
use relkg::relnet::RelEdgeIndex;
use relkg::training::{example_loss, sample_negatives};

const H: f64 = 1e-6;

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest per-tensor relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
fn check<F>(store: &mut ParamStore, f: F) -> Vec<(String, f64)>
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    let analytic = tape.backward(loss).unwrap().dense(store);
    let eval = |store: &ParamStore| {
        let mut t = Tape::new();
        let l = f(&mut t, store);
        t.value(l).item()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    ids.into_iter()
        .map(|id| {
            let n = store.get(id).len();
            let mut numeric = vec![0.0; n];
            for k in 0..n {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + H;
                let up = eval(store);
                store.get_mut(id).data_mut()[k] = orig - H;
                let down = eval(store);
                store.get_mut(id).data_mut()[k] = orig;
                numeric[k] = (up - down) / (2.0 * H);
            }
            let a = analytic[id.0].data();
            let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
            let denom = na.max(nn);
            let rel = if denom < 1e-12 { diff } else { diff / denom };
            (store.name(id).to_owned(), rel)
        })
        .collect()
}

fn assert_close(errors: &[(String, f64)]) {
    for (name, e) in errors {
        assert!(*e <= 1e-4, "{name}: relative error {e:e}");
    }
}

/// Upstream weights so every output element gets a distinct gradient.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let (r, c) = tape.value(x).dims2();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random_tensor(&mut rng, r, c)).unwrap();
    let y = tape.mul(x, w).unwrap();
    tape.sum(y).unwrap()
}

fn store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for &(name, r, c) in shapes {
        s.register(name, random_tensor(&mut rng, r, c)).unwrap();
    }
    s
}

#[test]
fn dense_ops() {
    let mut s = store(&[("a", 3, 4), ("b", 4, 2), ("row", 1, 2), ("c", 3, 2)], 1);
    let errs = check(&mut s, |t, s| {
        let a = t.param(s, ParamId(0));
        let b = t.param(s, ParamId(1));
        let row = t.param(s, ParamId(2));
        let c = t.param(s, ParamId(3));
        let m = t.matmul(a, b).unwrap();
        let m = t.add_row(m, row).unwrap();
        let m = t.mul_row(m, row).unwrap();
        let m = t.add(m, c).unwrap();
        let m = t.mul(m, c).unwrap();
        let m = t.scale(m, 0.7).unwrap();
        let m = t.sigmoid(m).unwrap();
        project(t, m, 9)
    });
    assert_close(&errs);
}

#[test]
fn layer_norm_and_relu() {
    let mut s = store(&[("x", 5, 6), ("gamma", 1, 6), ("beta", 1, 6)], 2);
    let errs = check(&mut s, |t, s| {
        let x = t.param(s, ParamId(0));
        let g = t.param(s, ParamId(1));
        let b = t.param(s, ParamId(2));
        let y = t.layer_norm(x, g, b).unwrap();
        let y = t.relu(y).unwrap();
        project(t, y, 3)
    });
    assert_close(&errs);
}

#[test]
fn indexing_ops() {
    let mut s = store(&[("x", 4, 3), ("y", 2, 3)], 3);
    let errs = check(&mut s, |t, s| {
        let x = t.param(s, ParamId(0));
        let y = t.param(s, ParamId(1));
        let picked = t.index_select(x, Arc::from(vec![0u32, 2, 2, 3, 1])).unwrap();
        let summed = t.scatter_add(picked, Arc::from(vec![1u32, 1, 0, 1, 4]), 5).unwrap();
        let rows = t.concat(summed, y, 0).unwrap();
        let cols = t.concat(rows, rows, 1).unwrap();
        let m = t.mean(cols).unwrap();
        let p = project(t, cols, 4);
        t.add(p, m).unwrap()
    });
    assert_close(&errs);
}

#[test]
fn weighted_bce() {
    let mut s = store(&[("logits", 5, 1)], 4);
    let errs = check(&mut s, |t, s| {
        let x = t.param(s, ParamId(0));
        t.binary_cross_entropy(x, vec![1.0, 0.0, 0.0, 1.0, 0.0], vec![1.0, 0.2, 0.5, 0.7, 0.1]).unwrap()
    });
    assert_close(&errs);
}

#[test]
fn full_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut edges = Vec::new();
    while edges.len() < 16 {
        let t = Triple::new(rng.random_range(0..8), rng.random_range(0..3), rng.random_range(0..8));
        if !edges.contains(&t) {
            edges.push(t);
        }
    }
    let g = TripleGraph::new(8, 3, edges.clone()).unwrap().add_inverse_relations().unwrap();
    for ablation in [Ablation::None, Ablation::NoEtypes] {
        let cfg = ModelConfig {
            dim: 4,
            relation_layers: 2,
            entity_layers: 2,
            ablation,
        };
        let model = Model::new(cfg, 5).unwrap();
        let index = RelEdgeIndex::new(&lift_as(&g, cfg.ablation.relgraph_kind()).unwrap());
        let positive = edges[0];
        let negatives = sample_negatives(&g, positive, 6, &mut rng).unwrap();
        let mut store = model.params().clone();
        let errs = check(&mut store, |tape, s| {
            let m = Model::from_store(cfg, s.clone()).unwrap();
            let (t, loss) = example_loss(&m, &g, &index, positive, &negatives, 1.0).unwrap();
            *tape = t;
            loss
        });
        assert_eq!(errs.len(), model.params().len());
        assert_close(&errs);
    }
}

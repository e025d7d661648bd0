//! Negative sampling, the binary cross-entropy objective, mixture sampling
//! over several training graphs, the optimization loop, and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entnet::{self, EdgeIndex};
use crate::error::{Error, Result};
use crate::evalrank::{self, Protocol};
use crate::kgdata::{DatasetSplit, EvalSplit, Triple, TripleGraph};
use crate::model::{Ablation, Model, ModelConfig};
use crate::ndtape::{adamw_step, AdamWConfig, OptimizerState, ParamStore, Tape, Tensor, Var};
use crate::relgraph::{lift_as, RelationGraph};
use crate::relnet::{self, RelEdgeIndex};

/// Resampling attempts before a colliding negative is accepted anyway.
pub const MAX_NEGATIVE_RETRIES: usize = 32;

/// Corrupts `positive` `n` times. Each negative flips a fair coin for head or
/// tail and replaces it with a different, uniformly drawn entity; negatives
/// that are edges of `g` are redrawn up to [`MAX_NEGATIVE_RETRIES`] times.
pub fn sample_negatives<R: Rng>(g: &TripleGraph, positive: Triple, n: usize, rng: &mut R) -> Result<Vec<Triple>> {
    if !g.contains(&positive) {
        return Err(Error::contract(format!("positive {positive:?} is not an edge of the graph")));
    }
    let v = g.num_entities() as u32;
    if v < 2 {
        return Err(Error::Sampling("cannot corrupt a triple in a graph with fewer than 2 entities".into()));
    }
    let draw_other = |rng: &mut R, current: u32| {
        let e = rng.random_range(0..v - 1);
        if e >= current {
            e + 1
        } else {
            e
        }
    };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let corrupt_head = rng.random_bool(0.5);
        let mut neg = positive;
        for _ in 0..=MAX_NEGATIVE_RETRIES {
            neg = if corrupt_head {
                Triple::new(draw_other(rng, positive.head), positive.relation, positive.tail)
            } else {
                Triple::new(positive.head, positive.relation, draw_other(rng, positive.tail))
            };
            if !g.contains(&neg) {
                break;
            }
        }
        out.push(neg);
    }
    Ok(out)
}

/// Weights over negatives: uniform `1/n` at temperature 1, otherwise a
/// softmax of the negative logits divided by the temperature.
pub fn negative_weights(neg_logits: &[f64], temperature: f64) -> Vec<f64> {
    let n = neg_logits.len();
    if n == 0 {
        return Vec::new();
    }
    if temperature == 1.0 {
        return vec![1.0 / n as f64; n];
    }
    let scaled: Vec<f64> = neg_logits.iter().map(|x| x / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `-log σ(pos) - Σ wᵢ log(1 - σ(negᵢ))`.
pub fn bce_loss(pos_logit: f64, neg_logits: &[f64], temperature: f64) -> Result<f64> {
    if !pos_logit.is_finite() || neg_logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "bce_loss".into() });
    }
    let mut tape = Tape::new();
    let mut logits = vec![pos_logit];
    logits.extend_from_slice(neg_logits);
    let x = tape.constant(Tensor::row_vector(logits))?;
    let (targets, weights) = bce_targets(neg_logits, temperature);
    let l = tape.binary_cross_entropy(x, targets, weights)?;
    Ok(tape.value(l).item())
}

fn bce_targets(neg_logits: &[f64], temperature: f64) -> (Vec<f64>, Vec<f64>) {
    let mut targets = vec![1.0];
    targets.extend(std::iter::repeat(0.0).take(neg_logits.len()));
    let mut weights = vec![1.0];
    weights.extend(negative_weights(neg_logits, temperature));
    (targets, weights)
}

/// Picks one training graph per batch with probability proportional to its
/// training edge count.
#[derive(Debug, Clone)]
pub struct MixtureSampler {
    cumulative: Vec<f64>,
}

impl MixtureSampler {
    pub fn new(edge_counts: &[usize]) -> Result<Self> {
        if edge_counts.is_empty() {
            return Err(Error::Config("training mixture is empty".into()));
        }
        let total: usize = edge_counts.iter().sum();
        if total == 0 {
            return Err(Error::Config("training mixture has no edges".into()));
        }
        let mut acc = 0.0;
        let cumulative = edge_counts
            .iter()
            .map(|&c| {
                acc += c as f64 / total as f64;
                acc
            })
            .collect();
        Ok(Self { cumulative })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cumulative
            .iter()
            .map(|&c| {
                let p = c - prev;
                prev = c;
                p
            })
            .collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        if self.cumulative.len() == 1 {
            return 0;
        }
        let u: f64 = rng.random();
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Steps(u64),
    Epochs(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub num_negatives: usize,
    pub schedule: Schedule,
    pub adversarial_temperature: f64,
    pub mixture: Vec<String>,
    pub seed: u64,
    pub deterministic: bool,
    /// Validation cadence in steps when the schedule is step-based.
    pub valid_every: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: AdamWConfig::default().weight_decay,
            batch_size: 64,
            num_negatives: 128,
            schedule: Schedule::Steps(200_000),
            adversarial_temperature: 1.0,
            mixture: Vec::new(),
            seed: 0,
            deterministic: true,
            valid_every: 5_000,
            model: ModelConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_negatives < 1 {
            return Err(Error::Config("num_negatives must be ≥ 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(self.adversarial_temperature > 0.0) {
            return Err(Error::Config("adversarial_temperature must be > 0".into()));
        }
        if self.valid_every == 0 {
            return Err(Error::Config("valid_every must be ≥ 1".into()));
        }
        self.model.validate()
    }

    /// Applies one `key = value` setting. Returns `false` for keys this type
    /// does not own so callers can handle their own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "num_negatives" => self.num_negatives = parse(key, value)?,
            "steps" => self.schedule = Schedule::Steps(parse(key, value)?),
            "epochs" => self.schedule = Schedule::Epochs(parse(key, value)?),
            "adversarial_temperature" => self.adversarial_temperature = parse(key, value)?,
            "mixture" => {
                self.mixture = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_owned)
                    .collect()
            }
            "seed" => self.seed = parse(key, value)?,
            "deterministic" => self.deterministic = parse(key, value)?,
            "valid_every" => self.valid_every = parse(key, value)?,
            "dim" => self.model.dim = parse(key, value)?,
            "relation_layers" => self.model.relation_layers = parse(key, value)?,
            "entity_layers" => self.model.entity_layers = parse(key, value)?,
            "ablation" => self.model.ablation = value.parse::<Ablation>()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parses a flat `key = value` file. `#` starts a comment line.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(key.to_owned(), v.trim().to_owned()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UKGR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mixture: Vec<String>,
    pub step: u64,
    pub seed: u64,
    pub best_valid_mrr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in bytes.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    provenance: Provenance,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

const MOMENT_PREFIXES: [&str; 2] = ["optimizer.first_moment.", "optimizer.second_moment."];

impl Checkpoint {
    /// Snapshot of a model; values are stored at 32-bit precision.
    pub fn from_model(model: &Model, optimizer: Option<&OptimizerState>, provenance: Provenance) -> Self {
        let mut params = model.params().clone();
        params.round_to_f32();
        let optimizer = optimizer.map(|o| {
            let mut o = o.clone();
            o.first_moment.iter_mut().chain(&mut o.second_moment).for_each(Tensor::round_to_f32);
            o
        });
        Self {
            model: *model.config(),
            params,
            optimizer,
            provenance,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::from_store(self.model, self.params.clone())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let mut tensors = Vec::new();
        let mut payload: Vec<&Tensor> = Vec::new();
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_owned(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len() as u64;
            payload.push(t);
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in MOMENT_PREFIXES.iter().zip([&opt.first_moment, &opt.second_moment]) {
                for ((name, _), t) in self.params.iter().zip(moments.iter()) {
                    tensors.push(TensorEntry {
                        name: format!("{prefix}{name}"),
                        shape: t.shape().to_vec(),
                        offset,
                    });
                    offset += 4 * t.len() as u64;
                    payload.push(t);
                }
            }
        }
        let header = Header {
            model: self.model,
            provenance: self.provenance.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            tensors,
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let io = |e| Error::Checkpoint(format!("write failed: {e}"));
        out.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        out.write_all(json.as_bytes()).map_err(io)?;
        out.write_all(b"\n").map_err(io)?;
        let mut buf = Vec::with_capacity(offset as usize);
        for t in payload {
            for v in t.to_f32() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&buf).map_err(io)?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut input = BufReader::new(input);
        let io = |e: std::io::Error| Error::Checkpoint(format!("read failed: {e}"));
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let mut ver = [0u8; 4];
        input.read_exact(&mut ver).map_err(io)?;
        let version = u32::from_le_bytes(ver);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut line = Vec::new();
        input.read_until(b'\n', &mut line).map_err(io)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        line.pop();
        let header: Header =
            serde_json::from_slice(&line).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut payload = Vec::new();
        input.read_to_end(&mut payload).map_err(io)?;

        let mut params = ParamStore::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut expected_offset = 0u64;
        for entry in &header.tensors {
            if entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!("tensor `{}` has a bad offset", entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * n;
            let bytes = payload
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("payload too short for `{}`", entry.name)))?;
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::from_f32(entry.shape.clone(), &values)?;
            expected_offset = end as u64;
            if entry.name.starts_with(MOMENT_PREFIXES[0]) {
                first.push(tensor);
            } else if entry.name.starts_with(MOMENT_PREFIXES[1]) {
                second.push(tensor);
            } else {
                params.register(entry.name.clone(), tensor)?;
            }
        }
        if expected_offset as usize != payload.len() {
            return Err(Error::Checkpoint("payload length does not match manifest".into()));
        }
        let optimizer = match header.optimizer {
            Some(h) => {
                if first.len() != params.len() || second.len() != params.len() {
                    return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
                }
                Some(OptimizerState {
                    config: h.config,
                    step: h.step,
                    first_moment: first,
                    second_moment: second,
                })
            }
            None => None,
        };
        let ckpt = Self {
            model: header.model,
            params,
            optimizer,
            provenance: header.provenance,
        };
        // structural validation
        ckpt.to_model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(file)
    }
}

// ---------------------------------------------------------------------------
// Training loop

/// One member of the training mixture.
#[derive(Debug, Clone)]
pub struct TrainDataset {
    pub name: String,
    pub split: DatasetSplit,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where to keep the last good checkpoint while training.
    pub checkpoint_path: Option<PathBuf>,
    /// Positives per validation pass; `None` uses all validation queries.
    pub max_valid_queries: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationLog {
    pub step: u64,
    pub epoch: Option<u64>,
    pub mean_train_loss: f64,
    pub valid_mrr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<ValidationLog>,
    pub initial_loss: Option<f64>,
    pub losses: Vec<f64>,
}

struct GraphState {
    graph: Arc<TripleGraph>,
    rel_index: RelEdgeIndex,
    positives: Vec<Triple>,
    order: Vec<usize>,
    cursor: usize,
}

impl GraphState {
    fn new(split: &DatasetSplit, model: &Model, rng: &mut ChaCha8Rng) -> Result<Self> {
        let graph = split.train_graph.clone();
        let rg: RelationGraph = lift_as(&graph, model.relgraph_kind())?;
        let positives: Vec<Triple> = graph.base_edges().copied().collect();
        let mut order: Vec<usize> = (0..positives.len()).collect();
        order.shuffle(rng);
        Ok(Self {
            rel_index: RelEdgeIndex::new(&rg),
            graph,
            positives,
            order,
            cursor: 0,
        })
    }

    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<Triple> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.positives.is_empty() {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.positives[self.order[self.cursor]]);
            self.cursor += 1;
        }
        out
    }
}

/// Loss of one positive and its negatives, recorded on a fresh tape. The
/// positive edge and its inverse are hidden from message passing.
pub fn example_loss(
    model: &Model,
    graph: &TripleGraph,
    rel_index: &RelEdgeIndex,
    positive: Triple,
    negatives: &[Triple],
    temperature: f64,
) -> Result<(Tape, Var)> {
    let inv = graph
        .inverse_relation(positive.relation)
        .ok_or_else(|| Error::contract("training graph must be inverse-augmented"))?;
    let mut skip = Vec::with_capacity(2);
    skip.extend(graph.edge_index(&positive));
    skip.extend(graph.edge_index(&Triple::new(positive.tail, inv, positive.head)));
    let edges = EdgeIndex::filtered(graph, &skip);

    let store = model.params();
    let mut tape = Tape::new();
    let tails: Vec<u32> = negatives
        .iter()
        .filter(|n| n.head == positive.head && n.tail != positive.tail)
        .map(|n| n.tail)
        .collect();
    let heads: Vec<u32> = negatives
        .iter()
        .filter(|n| n.head != positive.head)
        .map(|n| n.head)
        .collect();

    let rq = relnet::encode_on_tape(&mut tape, rel_index, positive.relation, model.relnet(), store)?;
    let forward = entnet::score_on_tape(&mut tape, &edges, positive.head, positive.relation, rq, model.entnet(), store)?;
    let mut tail_ids = vec![positive.tail];
    tail_ids.extend(&tails);
    let mut logits = tape.index_select(forward, Arc::from(tail_ids))?;
    if !heads.is_empty() {
        let rq_inv = relnet::encode_on_tape(&mut tape, rel_index, inv, model.relnet(), store)?;
        let backward = entnet::score_on_tape(&mut tape, &edges, positive.tail, inv, rq_inv, model.entnet(), store)?;
        let head_logits = tape.index_select(backward, Arc::from(heads))?;
        logits = tape.concat(logits, head_logits, 0)?;
    }
    let values = tape.value(logits).data().to_vec();
    let (targets, weights) = bce_targets(&values[1..], temperature);
    let loss = tape.binary_cross_entropy(logits, targets, weights)?;
    Ok((tape, loss))
}

fn batch_gradients(
    model: &Model,
    state: &GraphState,
    examples: &[(Triple, Vec<Triple>)],
    temperature: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let per_example: Vec<(f64, Vec<Tensor>)> = examples
        .par_iter()
        .map(|(pos, negs)| {
            let (mut tape, loss) = example_loss(model, &state.graph, &state.rel_index, *pos, negs, temperature)?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?.dense(model.params());
            Ok((value, grads))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / examples.len() as f64;
    let mut total_loss = 0.0;
    let mut total: Vec<Tensor> = model
        .params()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();
    // fixed reduction order keeps results independent of thread count
    for (loss, grads) in per_example {
        total_loss += loss * scale;
        for (acc, g) in total.iter_mut().zip(grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b * scale;
            }
        }
    }
    Ok((total_loss, total))
}

fn validation_mrr(model: &Model, datasets: &[TrainDataset], opts: &TrainOptions, seed: u64) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    for ds in datasets {
        if ds.split.valid_queries.is_empty() {
            continue;
        }
        let mut split = ds.split.clone();
        if let Some(max) = opts.max_valid_queries {
            split.valid_queries.truncate(max);
        }
        let report = evalrank::evaluate(model, &split, EvalSplit::Valid, &Protocol::full(), seed)?;
        scores.push(report.mrr);
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

/// Trains (or fine-tunes, when `initial` is given) on a mixture of graphs.
/// Returns the best-validation checkpoint when any dataset has validation
/// queries, otherwise the final one.
pub fn train(
    config: &TrainConfig,
    datasets: &[TrainDataset],
    initial: Option<&Checkpoint>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = match initial {
        Some(ckpt) => ckpt.to_model()?,
        None => Model::new(config.model, config.seed)?,
    };
    let adam = AdamWConfig {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut optimizer = match initial.and_then(|c| c.optimizer.clone()) {
        Some(mut o) if o.first_moment.len() == model.params().len() => {
            o.config = adam;
            o
        }
        _ => OptimizerState::new(adam, model.params()),
    };
    let mixture_names: Vec<String> = if config.mixture.is_empty() {
        datasets.iter().map(|d| d.name.clone()).collect()
    } else {
        config.mixture.clone()
    };
    let start_step = initial.map(|c| c.provenance.step).unwrap_or(0);
    let provenance = |step: u64, best: Option<f64>| Provenance {
        mixture: mixture_names.clone(),
        step,
        seed: config.seed,
        best_valid_mrr: best,
    };

    let total_positives: usize = datasets.iter().map(|d| d.split.train_graph.num_edges() / 2).sum();
    let steps_per_epoch = total_positives.div_ceil(config.batch_size).max(1) as u64;
    let (total_steps, valid_every) = match config.schedule {
        Schedule::Steps(s) => (s, config.valid_every),
        Schedule::Epochs(e) => (e * steps_per_epoch, steps_per_epoch),
    };
    if total_steps == 0 {
        let checkpoint = Checkpoint::from_model(&model, Some(&optimizer), provenance(start_step, None));
        return Ok(TrainOutcome {
            checkpoint,
            history: Vec::new(),
            initial_loss: None,
            losses: Vec::new(),
        });
    }
    if datasets.is_empty() {
        return Err(Error::Config("no training datasets".into()));
    }
    let sampler = MixtureSampler::new(&datasets.iter().map(|d| d.split.train_graph.num_edges() / 2).collect::<Vec<_>>())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut states: Vec<GraphState> = datasets
        .iter()
        .map(|d| GraphState::new(&d.split, &model, &mut rng))
        .collect::<Result<_>>()?;

    let has_validation = datasets.iter().any(|d| !d.split.valid_queries.is_empty());
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut history = Vec::new();
    let mut losses = Vec::with_capacity(total_steps as usize);
    let mut window = Vec::new();
    let mut last_good: Option<PathBuf> = None;

    for local_step in 1..=total_steps {
        let step = start_step + local_step;
        let which = sampler.sample(&mut rng);
        let state = &mut states[which];
        let batch = state.next_batch(config.batch_size, &mut rng);
        let mut examples = Vec::with_capacity(batch.len());
        for pos in batch {
            let negs = sample_negatives(&state.graph, pos, config.num_negatives, &mut rng)?;
            examples.push((pos, negs));
        }
        let diverged = |_| Error::Diverged {
            step,
            last_good: last_good.clone(),
        };
        let (loss, grads) = batch_gradients(&model, &states[which], &examples, config.adversarial_temperature)
            .map_err(|e| match e {
                Error::NonFinite { .. } => diverged(()),
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(diverged(()));
        }
        adamw_step(model.params_mut(), &grads, &mut optimizer)?;
        if model.params().iter().any(|(_, t)| !t.is_finite()) {
            return Err(diverged(()));
        }
        losses.push(loss);
        window.push(loss);

        if local_step % valid_every == 0 || local_step == total_steps {
            let valid_mrr = if has_validation {
                validation_mrr(&model, datasets, opts, config.seed)?
            } else {
                None
            };
            let log = ValidationLog {
                step,
                epoch: matches!(config.schedule, Schedule::Epochs(_)).then(|| local_step.div_ceil(steps_per_epoch)),
                mean_train_loss: window.iter().sum::<f64>() / window.len() as f64,
                valid_mrr,
            };
            info!(
                "step {step}: train loss {:.5}{}",
                log.mean_train_loss,
                valid_mrr.map(|m| format!(", valid mrr {m:.4}")).unwrap_or_default()
            );
            window.clear();
            history.push(log);
            if let Some(mrr) = valid_mrr {
                if best.as_ref().map_or(true, |(b, _)| mrr > *b) {
                    let ckpt = Checkpoint::from_model(&model, Some(&optimizer), provenance(step, Some(mrr)));
                    best = Some((mrr, ckpt));
                }
            }
            if let Some(path) = &opts.checkpoint_path {
                let ckpt = Checkpoint::from_model(&model, Some(&optimizer), provenance(step, valid_mrr));
                match ckpt.save(path) {
                    Ok(()) => last_good = Some(path.clone()),
                    Err(e) => warn!("could not save checkpoint: {e}"),
                }
            }
        }
    }

    let checkpoint = match best {
        Some((_, ckpt)) => ckpt,
        None => Checkpoint::from_model(&model, Some(&optimizer), provenance(start_step + total_steps, None)),
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
        initial_loss: losses.first().copied(),
        losses,
    })
}

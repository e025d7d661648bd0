//! Link prediction on arbitrary knowledge graphs through relation graphs.
//!
//! A graph of relations is lifted from the input triples ([`relgraph`]), a
//! relation encoder produces query-conditioned relation vectors
//! ([`relnet`]), and an entity network scores candidate answers with them
//! ([`entnet`]). No parameter is tied to a particular entity or relation
//! vocabulary, so a trained model runs on unseen graphs as is.

pub mod entnet;
pub mod error;
pub mod evalrank;
pub mod kgdata;
pub mod model;
pub mod ndtape;
pub mod relgraph;
pub mod relnet;
pub mod synth;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use evalrank::{evaluate, Protocol, RankingReport};
pub use kgdata::{load_dataset, DatasetSplit, EvalSplit, SplitMode, Triple, TripleGraph};
pub use model::{Ablation, Model, ModelConfig};
pub use relgraph::{lift, RelationGraph};
pub use training::{train, Checkpoint, TrainConfig};

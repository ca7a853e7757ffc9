//! Topic linkage networks and hidden Markov trajectory models for
//! longitudinal forum archives.
//!
//! The pipeline runs in stages, each a module here:
//!
//! * [`corpus`]: archive ingestion, tokenization, clean-user sampling
//! * [`topics`]: document-topic decompositions (built-in Gibbs LDA or import)
//! * [`linkage`]: text- and user-level linkage networks, mutual information
//! * [`graph`]: linkage graphs, Louvain clustering, cluster shares, export
//! * [`hmm`]: discrete hidden Markov models (Baum-Welch, Viterbi, AIC)
//! * [`trajectories`]: per-user trajectory models and the analytical tables
//! * [`synth`]: planted-structure generators used as ground truth
//! * [`cli`]: the subcommand front end and run manifests

pub mod cli;
pub mod corpus;
pub mod error;
pub mod graph;
pub mod hmm;
pub mod linkage;
pub mod rng;
pub mod synth;
pub mod topics;
pub mod trajectories;

pub use error::{Error, Result};

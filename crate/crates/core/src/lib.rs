//! Computational sparse Merkle trees over salted participant records, with
//! transcript proofs of leaf transforms and root paths, inclusion and
//! exclusion verification, a data-exclusivity audit and three statistical
//! pipelines built on committed reductions.

pub mod codec;
pub mod phr;
pub mod proofsys;
pub mod prover;
pub mod stats;
pub mod study;
pub mod transforms;
pub mod tree;
pub mod verifier;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Codec(#[from] codec::CodecError),
    #[error(transparent)]
    Transform(#[from] transforms::TransformError),
    #[error(transparent)]
    Tree(#[from] tree::TreeError),
    #[error(transparent)]
    Proof(#[from] proofsys::ProofError),
    #[error(transparent)]
    Prover(#[from] prover::ProverError),
    #[error(transparent)]
    Phr(#[from] phr::PhrError),
    #[error(transparent)]
    Study(#[from] study::StudyError),
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! Privacy-preserving, verifiable outsourcing of the ridge pseudoinverse used
//! to train Broad Learning System networks.

pub mod bench;
pub mod bls;
pub mod client;
pub mod data;
pub mod error;
pub mod keygen;
pub mod matrix;
pub mod protocol;
pub mod transport;
pub mod worker;

pub use bls::{train, BlsConfig, BlsModel, LocalPinv, OutsourcedPinv, PinvBackend};
pub use client::{
    local_pinv, outsourced_pinv, OutsourceOptions, OutsourceSession, VerificationReport,
};
pub use data::Dataset;
pub use error::{Error, Result};
pub use keygen::{generate_keys, MaskKeys, ScaleMode};
pub use matrix::DenseMatrix;
pub use worker::{CloudWorker, FaultMode};

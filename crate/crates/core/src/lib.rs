//! Outsourced homomorphic computation whose results are bound to a TPM-attested
//! enclave transcript, with PIR and PSI built on top.

pub mod crypto;
pub mod tpm;
pub mod fhe;
pub mod monitor;
pub mod vfhe;
pub mod pir;
pub mod psi;
pub mod harness;

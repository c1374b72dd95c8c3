//! Deterministic simulation of an enclave-backed genomic data marketplace:
//! a signed hash-chain ledger with registry and escrow contracts, simulated
//! CPU attestation and sealing, validation/training/query enclaves running a
//! gated stack VM, a P2P overlay, and the actor flows that tie them together.

pub mod actors;
pub mod attestation;
pub mod codec;
pub mod contracts;
pub mod crypto;
pub mod enclave;
pub mod harness;
pub mod ledger;
pub mod p2p;
pub mod repository;
pub mod vm;

//! Desk-scale laboratory for attention-intervention decoding experiments:
//! a miniature multimodal decoder-only transformer over a synthetic scene
//! testbed, attention decomposition (VTACR), calibrated bi-modal attention
//! rewrites, dual-path contrastive decoding, and exact hallucination
//! metrics (CHAIR / presence probing / pairwise causal effects).

pub mod calibrate;
pub mod causal;
pub mod decode;
pub mod evalhall;
pub mod fingerprint;
pub mod intervene;
pub mod microlm;
pub mod scenegen;
pub mod tensorcore;
pub mod vtacr;

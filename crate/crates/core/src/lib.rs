//! A networked key vault that emulates trusted-execution-environment
//! semantics in software: keys are generated inside a sealed vault, every
//! custody claim is verifiable through quotes, and the multi-party protocols
//! (certificate issuance, website-to-CDN key transfer, intra-organization
//! provisioning) abort before any key material moves unless both ends prove
//! they are the expected build on a sanctioned platform.

pub mod attestation;
pub mod bench;
pub mod certkit;
pub mod crypto;
pub mod framing;
pub mod keyvault;
pub mod noded;
pub mod protocols;
pub mod soft_tee;
pub mod wire;

/// Seconds since the Unix epoch.
pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .expect("clock before epoch")
        .as_secs()
}

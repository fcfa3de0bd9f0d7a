//! Benchmark harness: key generation, signing, and end-to-end issuance in
//! two modes. VAULT mode runs through the full token boundary (PIN check,
//! audit logging, state sealing, counter persistence); DIRECT mode invokes
//! the same cryptographic operations with none of that, modeling a plain
//! software HSM baseline. The cryptographic work is identical in both
//! modes; only the boundary overhead differs.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use crate::attestation::{
    AttestationKeys, EpidGroup, IasService, ManufacturerRoot, QuoteType,
};
use crate::certkit::{self, Validity};
use crate::crypto::{self, KeyAlgorithm};
use crate::framing::MemNetwork;
use crate::keyvault::{Vault, VaultPaths};
use crate::protocols::{issuance, PeerVerification};
use crate::soft_tee::{measure_enclave, PlatformSecret, SealPolicy, TeeContext};

/// Measured runs reported after this many discarded warm-up runs.
pub const WARMUP_RUNS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchOp {
    KeygenRsa2048,
    SignRsa2048,
    IssuanceE2e,
}

impl BenchOp {
    pub fn name(self) -> &'static str {
        match self {
            BenchOp::KeygenRsa2048 => "keygen-rsa2048",
            BenchOp::SignRsa2048 => "sign-rsa2048",
            BenchOp::IssuanceE2e => "issuance-e2e",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "keygen-rsa2048" => Some(BenchOp::KeygenRsa2048),
            "sign-rsa2048" => Some(BenchOp::SignRsa2048),
            "issuance-e2e" => Some(BenchOp::IssuanceE2e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Vault,
    Direct,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Vault => "vault",
            BenchMode::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vault" => Some(BenchMode::Vault),
            "direct" => Some(BenchMode::Direct),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchReport {
    pub operation: String,
    pub mode: String,
    pub runs: u32,
    pub min_ms: f64,
    pub median_ms: f64,
    pub max_ms: f64,
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<16} {:<7} runs={:<5} min={:>10.3} ms  median={:>10.3} ms  max={:>10.3} ms",
            self.operation, self.mode, self.runs, self.min_ms, self.median_ms, self.max_ms
        )
    }
}

/// Order-statistic median over raw durations: middle element for odd
/// counts, mean of the two middle elements for even counts.
pub fn median(durations_ms: &[f64]) -> f64 {
    assert!(!durations_ms.is_empty());
    let mut sorted = durations_ms.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Times `runs` invocations of `f`, discarding `WARMUP_RUNS` warm-ups.
pub fn time_runs(
    operation: &str,
    mode: BenchMode,
    runs: u32,
    mut f: impl FnMut(),
) -> BenchReport {
    assert!(runs >= 1);
    for _ in 0..WARMUP_RUNS {
        f();
    }
    let mut samples = Vec::with_capacity(runs as usize);
    for _ in 0..runs {
        let t = Instant::now();
        f();
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = samples.iter().cloned().fold(0.0f64, f64::max);
    BenchReport {
        operation: operation.to_string(),
        mode: mode.name().to_string(),
        runs,
        min_ms: min,
        median_ms: median(&samples),
        max_ms: max,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("bench setup failed: {0}")]
    Setup(String),
}

/// Self-contained scratch environment: a throwaway platform and vault in a
/// temp directory, removed on drop.
struct Scratch {
    dir: PathBuf,
    vault: Vault,
    tee: Arc<TeeContext>,
    root: ManufacturerRoot,
    epid: EpidGroup,
}

const PIN: &[u8] = b"bench-pin";

impl Scratch {
    fn new() -> Result<Scratch, BenchError> {
        let dir = std::env::temp_dir().join(format!(
            "bfbench-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        std::fs::create_dir_all(&dir).map_err(|e| BenchError::Setup(e.to_string()))?;
        let root = ManufacturerRoot::generate();
        let epid = EpidGroup::generate();
        let platform = PlatformSecret::generate();
        let pck_cert = root.issue_pck_cert(&platform);
        let keys = AttestationKeys::new(
            &platform,
            Some(epid.member_key()),
            Some(pck_cert),
            Some(root.cert.clone()),
        )
        .map_err(|e| BenchError::Setup(e.to_string()))?;
        let measurement = measure_enclave(b"bench build")
            .map_err(|e| BenchError::Setup(e.to_string()))?
            .with_signer(b"bench signer")
            .with_versions(1, 1);
        let tee = Arc::new(TeeContext::new(platform, measurement));
        let vault = Vault::init(
            VaultPaths::under(&dir),
            Arc::clone(&tee),
            Arc::new(keys),
            SealPolicy::MrEnclave,
            PIN,
            0,
            false,
        )
        .map_err(|e| BenchError::Setup(e.to_string()))?;
        Ok(Scratch {
            dir,
            vault,
            tee,
            root,
            epid,
        })
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

/// Runs one benchmark. VAULT modes operate on a scratch vault created for
/// the run; nothing touches operator state.
pub fn run(op: BenchOp, mode: BenchMode, runs: u32) -> Result<BenchReport, BenchError> {
    match (op, mode) {
        (BenchOp::KeygenRsa2048, BenchMode::Vault) => {
            let scratch = Scratch::new()?;
            let mut i = 0u64;
            Ok(time_runs(op.name(), mode, runs, move || {
                i += 1;
                scratch
                    .vault
                    .generate_keypair(
                        KeyAlgorithm::Rsa2048,
                        &format!("bench-{i}"),
                        PIN,
                        QuoteType::Ecdsa,
                    )
                    .expect("bench keygen");
            }))
        }
        (BenchOp::KeygenRsa2048, BenchMode::Direct) => Ok(time_runs(op.name(), mode, runs, || {
            crypto::generate_keypair(KeyAlgorithm::Rsa2048).expect("bench keygen");
        })),
        (BenchOp::SignRsa2048, BenchMode::Vault) => {
            let scratch = Scratch::new()?;
            let (handle, _pub, _quote) = scratch
                .vault
                .generate_keypair(KeyAlgorithm::Rsa2048, "bench-sign", PIN, QuoteType::Ecdsa)
                .map_err(|e| BenchError::Setup(e.to_string()))?;
            let msg = [0x5au8; 256];
            Ok(time_runs(op.name(), mode, runs, move || {
                scratch.vault.sign(handle, &msg, PIN).expect("bench sign");
            }))
        }
        (BenchOp::SignRsa2048, BenchMode::Direct) => {
            let (_public, private) = crypto::generate_keypair(KeyAlgorithm::Rsa2048)
                .map_err(|e| BenchError::Setup(e.to_string()))?;
            let msg = [0x5au8; 256];
            Ok(time_runs(op.name(), mode, runs, move || {
                crypto::sign(KeyAlgorithm::Rsa2048, private.expose(), &msg).expect("bench sign");
            }))
        }
        (BenchOp::IssuanceE2e, BenchMode::Vault) => bench_issuance_vault(runs),
        (BenchOp::IssuanceE2e, BenchMode::Direct) => bench_issuance_direct(runs),
    }
}

/// Full issuance against an in-process CA and verification service over the
/// memory transport.
fn bench_issuance_vault(runs: u32) -> Result<BenchReport, BenchError> {
    let website = Scratch::new()?;
    let ca = Scratch::new()?;
    let mut ias = IasService::generate();
    ias.install_group(website.epid.group_id, website.epid.verifier.clone());
    ias.install_group(ca.epid.group_id, ca.epid.verifier.clone());
    let ias = Arc::new(ias);
    let service_key = ias.service_public_key().clone();

    let (ca_cert, ca_handle) = certkit::self_sign(
        "bench-ca",
        &ca.vault,
        PIN,
        KeyAlgorithm::Rsa2048,
        Validity::starting_now(certkit::CA_VALIDITY_SECS),
        Some(QuoteType::Epid),
    )
    .map_err(|e| BenchError::Setup(e.to_string()))?;

    let net = MemNetwork::new();
    {
        let ias = Arc::clone(&ias);
        net.register("ias", move |mut chan| {
            if let Ok(frame) = chan.recv() {
                if let Ok(msg) =
                    <crate::protocols::IasVerifyMsg as crate::wire::Wire>::from_bytes(&frame.payload)
                {
                    if let Ok(report) = ias.ias_verify(&msg.quote) {
                        let _ = crate::protocols::send_msg(
                            chan.as_mut(),
                            crate::framing::FrameType::IasReport,
                            frame.session_id,
                            &crate::protocols::IasReportMsg { report },
                        );
                    }
                }
            }
        });
    }
    {
        let ca_vault = Arc::new(ca);
        let ca_cert_srv = ca_cert.clone();
        let service_key_srv = service_key.clone();
        let net_srv = net.clone();
        let mr_allow = vec![
            ca_vault.tee.measurement().mrenclave,
            website.tee.measurement().mrenclave,
        ];
        net.register("ca", move |mut chan| {
            let frame = match chan.recv() {
                Ok(f) => f,
                Err(_) => return,
            };
            match frame.frame_type {
                crate::framing::FrameType::CertFetch => {
                    let _ = issuance::handle_cert_fetch(&ca_cert_srv, chan.as_mut(), frame);
                }
                crate::framing::FrameType::IssueRequest => {
                    let ctx = issuance::CaIssuance {
                        vault: &ca_vault.vault,
                        pin: PIN,
                        ca_cert: &ca_cert_srv,
                        ca_handle,
                        verify_csr_quote: true,
                        peer: PeerVerification {
                            connector: &net_srv,
                            ias_endpoint: Some("ias"),
                            service_key: Some(&service_key_srv),
                            manufacturer_root: None,
                            expected_mrenclave: &mr_allow,
                            min_svn: 0,
                            min_tcb: 0,
                            ias_cache: None,
                        },
                        leaf_validity_secs: certkit::LEAF_VALIDITY_SECS,
                    };
                    let _ = issuance::handle_issue_request(&ctx, chan.as_mut(), frame);
                }
                _ => {}
            }
        });
    }

    let mr_allow = vec![website.tee.measurement().mrenclave, {
        // CA's measurement: same image would be typical; use its real one
        // via the cert quote instead of a fixed constant
        ca_cert
            .quote_extension()
            .map_err(|e| BenchError::Setup(e.to_string()))?
            .report
            .measurement
            .mrenclave
    }];
    let mut i = 0u64;
    let report = time_runs(BenchOp::IssuanceE2e.name(), BenchMode::Vault, runs, || {
        i += 1;
        let ctx = issuance::WebsiteIssuance {
            vault: &website.vault,
            pin: PIN,
            connector: &net,
            ca_endpoint: "ca",
            peer: PeerVerification {
                connector: &net,
                ias_endpoint: Some("ias"),
                service_key: Some(&service_key),
                manufacturer_root: None,
                expected_mrenclave: &mr_allow,
                min_svn: 0,
                min_tcb: 0,
                ias_cache: None,
            },
            subject: &format!("bench-site-{i}"),
            algorithm: KeyAlgorithm::Rsa2048,
            csr_quote_type: QuoteType::Epid,
        };
        issuance::issuance_website(&ctx).expect("bench issuance");
    });
    Ok(report)
}

/// The same issuance work without any vault boundary: raw keygen, CSR
/// assembly and signing, CA signing, chain verification.
fn bench_issuance_direct(runs: u32) -> Result<BenchReport, BenchError> {
    let (ca_pub, ca_priv) = crypto::generate_keypair(KeyAlgorithm::Rsa2048)
        .map_err(|e| BenchError::Setup(e.to_string()))?;
    let ca_cert = certkit::build_cert_with_key(
        certkit::CertParams {
            subject: "bench-ca".into(),
            issuer: "bench-ca".into(),
            validity: Validity::starting_now(certkit::CA_VALIDITY_SECS),
            subject_public_key: crypto::PublicKeyBytes {
                alg: KeyAlgorithm::Rsa2048,
                bytes: ca_pub,
            },
            extensions: Default::default(),
        },
        KeyAlgorithm::Rsa2048,
        ca_priv.expose(),
    )
    .map_err(|e| BenchError::Setup(e.to_string()))?;

    let mut i = 0u64;
    Ok(time_runs(
        BenchOp::IssuanceE2e.name(),
        BenchMode::Direct,
        runs,
        move || {
            i += 1;
            let (public, private) = crypto::generate_keypair(KeyAlgorithm::Rsa2048).unwrap();
            let pk = crypto::PublicKeyBytes {
                alg: KeyAlgorithm::Rsa2048,
                bytes: public,
            };
            let subject = format!("bench-direct-{i}");
            let payload = certkit::Csr::signing_payload(&subject, &pk);
            let csr = certkit::Csr {
                subject,
                public_key: pk,
                self_signature: crypto::sign(KeyAlgorithm::Rsa2048, private.expose(), &payload)
                    .unwrap(),
            };
            assert!(csr.verify_pop());
            let cert = certkit::build_cert_with_key(
                certkit::CertParams {
                    subject: csr.subject.clone(),
                    issuer: ca_cert.subject.clone(),
                    validity: Validity::starting_now(certkit::LEAF_VALIDITY_SECS),
                    subject_public_key: csr.public_key.clone(),
                    extensions: Default::default(),
                },
                KeyAlgorithm::Rsa2048,
                ca_priv.expose(),
            )
            .unwrap();
            certkit::verify_cert(&cert, &ca_cert, crate::unix_now()).unwrap();
        },
    ))
}

//! The node daemon: role configuration, session dispatch, and persistence.
//!
//! Transport is plain framed stream sockets; all confidentiality and
//! authenticity come from the attestation and channel layers. Each role
//! accepts a fixed set of session-initiating frame types and rejects
//! everything else with an UNSUPPORTED_FOR_ROLE error frame.

mod config;

pub use config::{ConfigError, NodeConfig, Role};

use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::attestation::{
    AttestationKeys, EpidMemberKey, IasService, PckCache, QuoteType,
};
use crate::certkit::{self, BlindCert};
use crate::crypto::PublicKeyBytes;
use crate::framing::{Connector, Frame, FrameChannel, FrameType, TcpFrameChannel};
use crate::keyvault::{Vault, VaultPaths};
use crate::protocols::{
    self, error_code, issuance, provision, send_error, transfer, CtlBackupMsg, CtlIssueMsg,
    CtlProvisionMsg, CtlResultMsg, CtlTransferMsg, IasCache, IasReportMsg, IasVerifyMsg,
    PckEntryMsg, PckFetchMsg, PeerVerification, ProtocolError,
};
use crate::soft_tee::{measure_enclave, PlatformSecret, TeeContext};
use crate::wire::Wire;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("vault unavailable: {0}")]
    VaultLocked(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ConfigError> for NodeError {
    fn from(e: ConfigError) -> Self {
        NodeError::BadConfig(e.0)
    }
}

/// Session-initiating frame types accepted per role. Everything else is
/// rejected before any payload parsing.
pub fn accepted_initial_types(role: Role) -> &'static [FrameType] {
    match role {
        Role::Ca => &[FrameType::CertFetch, FrameType::IssueRequest],
        Role::Website => &[
            FrameType::CtlIssue,
            FrameType::CtlTransfer,
            FrameType::CtlProvision,
            FrameType::CtlBackup,
        ],
        Role::CdnEdge => &[
            FrameType::TransferHello,
            FrameType::ProvisionHello,
            FrameType::CtlIssue,
            FrameType::CtlProvision,
            FrameType::CtlBackup,
        ],
        Role::PckCache => &[FrameType::PckFetch],
        Role::VerificationService => &[FrameType::IasVerify],
    }
}

pub struct Node {
    pub config: NodeConfig,
    tee: Arc<TeeContext>,
    vault: Option<Arc<Vault>>,
    ca_cert: Option<BlindCert>,
    ca_handle: Option<u64>,
    ias: Option<IasService>,
    pck_cache: Option<PckCache>,
    mpk: Option<PublicKeyBytes>,
    service_key: Option<PublicKeyBytes>,
    manufacturer_root: Option<BlindCert>,
    connector: Arc<dyn Connector>,
    ias_cache: IasCache,
}

fn load_public_key(path: &Path) -> Result<PublicKeyBytes, NodeError> {
    let bytes = std::fs::read(path)
        .map_err(|e| NodeError::BadConfig(format!("cannot read {}: {e}", path.display())))?;
    PublicKeyBytes::from_bytes(&bytes)
        .map_err(|e| NodeError::BadConfig(format!("{}: {e}", path.display())))
}

impl Node {
    pub fn from_config(
        config: NodeConfig,
        connector: Arc<dyn Connector>,
    ) -> Result<Node, NodeError> {
        let platform = PlatformSecret::load(&config.platform_secret).map_err(|e| {
            NodeError::BadConfig(format!(
                "platform secret {}: {e}",
                config.platform_secret.display()
            ))
        })?;

        let image = std::fs::read(&config.enclave_image).map_err(|e| {
            NodeError::BadConfig(format!(
                "enclave image {}: {e}",
                config.enclave_image.display()
            ))
        })?;
        let mut measurement = measure_enclave(&image)
            .map_err(|e| NodeError::BadConfig(e.to_string()))?
            .with_versions(config.svn, config.tcb);
        if let Some(signer_path) = &config.signer {
            let signer = std::fs::read(signer_path).map_err(|e| {
                NodeError::BadConfig(format!("signer {}: {e}", signer_path.display()))
            })?;
            measurement = measurement.with_signer(&signer);
        }

        let epid = match &config.epid_member {
            Some(p) => Some(
                EpidMemberKey::load(p)
                    .map_err(|e| NodeError::BadConfig(format!("epid_member: {e}")))?,
            ),
            None => None,
        };
        let pck_cert = match &config.pck_cert {
            Some(p) => Some(
                certkit::load_cert(p)
                    .map_err(|e| NodeError::BadConfig(format!("pck_cert: {e}")))?,
            ),
            None => None,
        };
        let manufacturer_root = match &config.manufacturer_root {
            Some(p) => Some(
                certkit::load_cert(p)
                    .map_err(|e| NodeError::BadConfig(format!("manufacturer_root: {e}")))?,
            ),
            None => None,
        };
        let attest = AttestationKeys::new(&platform, epid, pck_cert, manufacturer_root.clone())
            .map_err(|e| NodeError::BadConfig(e.to_string()))?;

        let tee = Arc::new(TeeContext::new(platform, measurement));
        let attest = Arc::new(attest);

        let vault = if config.role.needs_vault() {
            let paths = VaultPaths::under(&config.home);
            let vault = Vault::open(
                paths,
                Arc::clone(&tee),
                Arc::clone(&attest),
                config.seal_policy,
                config.pin.as_bytes(),
            )
            .map_err(|e| NodeError::VaultLocked(e.to_string()))?;
            Some(Arc::new(vault))
        } else {
            None
        };

        let ias = match config.role {
            Role::VerificationService => {
                let path = config
                    .ias_state
                    .clone()
                    .ok_or_else(|| NodeError::BadConfig("verification-service needs ias_state".into()))?;
                Some(
                    IasService::load(&path)
                        .map_err(|e| NodeError::BadConfig(format!("ias_state: {e}")))?,
                )
            }
            _ => None,
        };

        let pck_cache = match config.role {
            Role::PckCache => {
                let path = config.pck_cache_file.clone().ok_or_else(|| {
                    NodeError::BadConfig("pck-cache needs pck_cache_file".into())
                })?;
                Some(
                    PckCache::load(&path)
                        .map_err(|e| NodeError::BadConfig(format!("pck_cache_file: {e}")))?,
                )
            }
            _ => None,
        };

        let mpk = config.org_mpk.as_deref().map(load_public_key).transpose()?;
        let service_key = config.service_key.as_deref().map(load_public_key).transpose()?;

        let mut node = Node {
            config,
            tee,
            vault,
            ca_cert: None,
            ca_handle: None,
            ias,
            pck_cache,
            mpk,
            service_key,
            manufacturer_root,
            connector,
            ias_cache: IasCache::default(),
        };

        if node.config.role == Role::Ca {
            node.ensure_ca_cert()?;
        }
        Ok(node)
    }

    /// Loads or creates the CA certificate. If the stored certificate's
    /// embedded quote was generated at a different SVN than this build,
    /// the quote is regenerated and the certificate re-signed, so clients
    /// with a minimum-SVN policy stop accepting the stale one.
    fn ensure_ca_cert(&mut self) -> Result<(), NodeError> {
        let vault = self.vault.as_ref().expect("ca role has a vault").clone();
        let pin = self.config.pin.as_bytes();
        let label = self.config.key_label.clone();

        if self.config.ca_cert_file.exists() {
            let cert = certkit::load_cert(&self.config.ca_cert_file)
                .map_err(|e| NodeError::BadConfig(format!("ca_cert_file: {e}")))?;
            let handle = vault
                .find_by_label(&label)
                .ok_or_else(|| {
                    NodeError::VaultLocked(format!("CA cert present but no key labeled {label}"))
                })?
                .handle;
            let quote_svn = cert.quote_extension().ok().map(|q| q.svn());
            if quote_svn == Some(self.config.svn) {
                self.ca_cert = Some(cert);
                self.ca_handle = Some(handle);
                return Ok(());
            }
            // SVN moved: refresh the quote and re-sign
            let quote = vault
                .quote_binding(
                    &cert.subject_public_key.to_bytes(),
                    self.config.ca_quote_type,
                    pin,
                )
                .map_err(|e| NodeError::VaultLocked(e.to_string()))?;
            let mut extensions = cert.extensions.clone();
            extensions.insert(certkit::EXT_QUOTE.to_string(), quote.to_bytes());
            let refreshed = certkit::CertParams {
                subject: cert.subject.clone(),
                issuer: cert.issuer.clone(),
                validity: cert.validity(),
                subject_public_key: cert.subject_public_key.clone(),
                extensions,
            }
            .build(cert.sig_algorithm, |tbs| vault.sign(handle, tbs, pin))
            .map_err(|e| NodeError::VaultLocked(e.to_string()))?;
            certkit::save_cert(&refreshed, &self.config.ca_cert_file)
                .map_err(|e| NodeError::Io(std::io::Error::other(e.to_string())))?;
            vault
                .store_cert(handle, refreshed.clone(), pin)
                .map_err(|e| NodeError::VaultLocked(e.to_string()))?;
            self.ca_cert = Some(refreshed);
            self.ca_handle = Some(handle);
            return Ok(());
        }

        let (cert, handle) = certkit::self_sign(
            &self.config.subject,
            &vault,
            pin,
            self.config.ca_algorithm,
            certkit::Validity::starting_now(certkit::CA_VALIDITY_SECS),
            Some(self.config.ca_quote_type),
        )
        .map_err(|e| NodeError::VaultLocked(e.to_string()))?;
        certkit::save_cert(&cert, &self.config.ca_cert_file)
            .map_err(|e| NodeError::Io(std::io::Error::other(e.to_string())))?;
        vault
            .store_cert(handle, cert.clone(), pin)
            .map_err(|e| NodeError::VaultLocked(e.to_string()))?;
        self.ca_cert = Some(cert);
        self.ca_handle = Some(handle);
        Ok(())
    }

    pub fn ca_cert(&self) -> Option<&BlindCert> {
        self.ca_cert.as_ref()
    }

    pub fn vault(&self) -> Option<&Arc<Vault>> {
        self.vault.as_ref()
    }

    fn peer_verification(&self) -> PeerVerification<'_> {
        PeerVerification {
            connector: self.connector.as_ref(),
            ias_endpoint: self.config.ias_endpoint.as_deref(),
            service_key: self.service_key.as_ref(),
            manufacturer_root: self.manufacturer_root.as_ref(),
            expected_mrenclave: &self.config.expect_mrenclave,
            min_svn: self.config.min_svn,
            min_tcb: self.config.min_tcb,
            ias_cache: Some(&self.ias_cache),
        }
    }

    /// Serves one connection: validates the initiating frame type against
    /// the role table, then routes to the protocol handler.
    pub fn handle_connection(&self, chan: &mut dyn FrameChannel) {
        let frame = match chan.recv() {
            Ok(f) => f,
            Err(_) => return,
        };
        let session = frame.session_id;
        if !accepted_initial_types(self.config.role).contains(&frame.frame_type) {
            send_error(
                chan,
                session,
                error_code::UNSUPPORTED_FOR_ROLE,
                "dispatch",
                &format!(
                    "{:?} not accepted by role {}",
                    frame.frame_type,
                    self.config.role.name()
                ),
            );
            return;
        }
        if let Err(e) = self.route(chan, frame) {
            log::warn!("session aborted: {} ({e})", e.step_tag());
        }
    }

    fn route(&self, chan: &mut dyn FrameChannel, frame: Frame) -> Result<(), ProtocolError> {
        match frame.frame_type {
            FrameType::CertFetch => {
                let cert = self.ca_cert.as_ref().expect("ca role");
                issuance::handle_cert_fetch(cert, chan, frame)
            }
            FrameType::IssueRequest => {
                let ctx = issuance::CaIssuance {
                    vault: self.vault.as_ref().expect("ca role"),
                    pin: self.config.pin.as_bytes(),
                    ca_cert: self.ca_cert.as_ref().expect("ca role"),
                    ca_handle: self.ca_handle.expect("ca role"),
                    verify_csr_quote: self.config.verify_csr_quote,
                    peer: self.peer_verification(),
                    leaf_validity_secs: self.config.leaf_validity_secs,
                };
                issuance::handle_issue_request(&ctx, chan, frame)
            }
            FrameType::IasVerify => self.serve_ias(chan, frame),
            FrameType::PckFetch => self.serve_pck_fetch(chan, frame),
            FrameType::TransferHello => {
                let vault = self.vault.as_ref().expect("cdn role");
                let cert_handle = vault
                    .find_by_label(&self.config.key_label)
                    .ok_or_else(|| {
                        ProtocolError::NotFound(format!(
                            "no key labeled {}",
                            self.config.key_label
                        ))
                    })?
                    .handle;
                let cfg = transfer::TransferConfig {
                    vault,
                    pin: self.config.pin.as_bytes(),
                    cert_handle,
                    quote_type: self.config.transfer_quote_type,
                    peer: self.peer_verification(),
                };
                transfer::transfer_responder(&cfg, chan, frame).map(|_| ())
            }
            FrameType::ProvisionHello => {
                let cfg = self.provision_config(None)?;
                provision::provision_responder(&cfg, chan, frame).map(|_| ())
            }
            FrameType::CtlIssue => self.serve_ctl_issue(chan, frame),
            FrameType::CtlTransfer => self.serve_ctl_transfer(chan, frame),
            FrameType::CtlProvision => self.serve_ctl_provision(chan, frame),
            FrameType::CtlBackup => self.serve_ctl_backup(chan, frame),
            other => {
                send_error(
                    chan,
                    frame.session_id,
                    error_code::BAD_FRAME,
                    "dispatch",
                    &format!("{other:?} is not session-initiating"),
                );
                Ok(())
            }
        }
    }

    fn serve_ias(&self, chan: &mut dyn FrameChannel, frame: Frame) -> Result<(), ProtocolError> {
        let ias = self.ias.as_ref().expect("verification-service role");
        let msg = IasVerifyMsg::from_bytes(&frame.payload)?;
        match ias.ias_verify(&msg.quote) {
            Ok(report) => protocols::send_msg(
                chan,
                FrameType::IasReport,
                frame.session_id,
                &IasReportMsg { report },
            ),
            Err(e) => {
                send_error(
                    chan,
                    frame.session_id,
                    error_code::BAD_FRAME,
                    "IAS_VERIFY",
                    &e.to_string(),
                );
                Ok(())
            }
        }
    }

    fn serve_pck_fetch(
        &self,
        chan: &mut dyn FrameChannel,
        frame: Frame,
    ) -> Result<(), ProtocolError> {
        let cache = self.pck_cache.as_ref().expect("pck-cache role");
        let msg = PckFetchMsg::from_bytes(&frame.payload)?;
        match cache.lookup(&msg.platform_id) {
            Some(entry) => protocols::send_msg(
                chan,
                FrameType::PckEntry,
                frame.session_id,
                &PckEntryMsg {
                    entry: entry.clone(),
                },
            ),
            None => {
                send_error(
                    chan,
                    frame.session_id,
                    error_code::NOT_FOUND,
                    "PCK_FETCH",
                    "no entry for platform",
                );
                Ok(())
            }
        }
    }

    fn provision_config<'a>(
        &'a self,
        labels: Option<&'a [String]>,
    ) -> Result<provision::ProvisionConfig<'a>, ProtocolError> {
        Ok(provision::ProvisionConfig {
            vault: self
                .vault
                .as_ref()
                .ok_or_else(|| ProtocolError::NotFound("role has no vault".into()))?,
            pin: self.config.pin.as_bytes(),
            connector: self.connector.as_ref(),
            cache_endpoint: self
                .config
                .pck_cache_endpoint
                .as_deref()
                .ok_or_else(|| ProtocolError::NotFound("no pck_cache_endpoint".into()))?,
            mpk: self
                .mpk
                .as_ref()
                .ok_or_else(|| ProtocolError::NotFound("no org_mpk installed".into()))?,
            peer: self.peer_verification(),
            labels,
        })
    }

    fn ctl_reply(
        &self,
        chan: &mut dyn FrameChannel,
        session: [u8; 16],
        result: Result<Vec<u8>, ProtocolError>,
    ) -> Result<(), ProtocolError> {
        let msg = match &result {
            Ok(data) => CtlResultMsg {
                ok: true,
                detail: String::new(),
                data: data.clone(),
            },
            Err(e) => CtlResultMsg {
                ok: false,
                detail: format!("{}: {e}", e.step_tag()),
                data: Vec::new(),
            },
        };
        protocols::send_msg(chan, FrameType::CtlResult, session, &msg)?;
        result.map(|_| ())
    }

    fn serve_ctl_issue(
        &self,
        chan: &mut dyn FrameChannel,
        frame: Frame,
    ) -> Result<(), ProtocolError> {
        let msg = CtlIssueMsg::from_bytes(&frame.payload)?;
        let run = || -> Result<Vec<u8>, ProtocolError> {
            let vault = self
                .vault
                .as_ref()
                .ok_or_else(|| ProtocolError::NotFound("role has no vault".into()))?;
            let ctx = issuance::WebsiteIssuance {
                vault,
                pin: &msg.pin,
                connector: self.connector.as_ref(),
                ca_endpoint: self
                    .config
                    .ca_endpoint
                    .as_deref()
                    .ok_or_else(|| ProtocolError::NotFound("no ca_endpoint".into()))?,
                peer: self.peer_verification(),
                subject: &msg.subject,
                algorithm: crate::crypto::KeyAlgorithm::Rsa2048,
                csr_quote_type: self.config.csr_quote_type,
            };
            let (cert, _handle) = issuance::issuance_website(&ctx)?;
            Ok(cert.to_bytes())
        };
        self.ctl_reply(chan, frame.session_id, run())
    }

    fn serve_ctl_transfer(
        &self,
        chan: &mut dyn FrameChannel,
        frame: Frame,
    ) -> Result<(), ProtocolError> {
        let msg = CtlTransferMsg::from_bytes(&frame.payload)?;
        let run = || -> Result<Vec<u8>, ProtocolError> {
            let vault = self
                .vault
                .as_ref()
                .ok_or_else(|| ProtocolError::NotFound("role has no vault".into()))?;
            let cert_handle = vault
                .find_by_label(&msg.label)
                .ok_or_else(|| ProtocolError::NotFound(format!("no key labeled {}", msg.label)))?
                .handle;
            let cfg = transfer::TransferConfig {
                vault,
                pin: &msg.pin,
                cert_handle,
                quote_type: self.config.transfer_quote_type,
                peer: self.peer_verification(),
            };
            transfer::transfer_initiator(&cfg, self.connector.as_ref(), &msg.peer)?;
            Ok(Vec::new())
        };
        self.ctl_reply(chan, frame.session_id, run())
    }

    fn serve_ctl_provision(
        &self,
        chan: &mut dyn FrameChannel,
        frame: Frame,
    ) -> Result<(), ProtocolError> {
        let msg = CtlProvisionMsg::from_bytes(&frame.payload)?;
        let labels = if msg.labels.is_empty() {
            None
        } else {
            Some(msg.labels.as_slice())
        };
        let run = || -> Result<Vec<u8>, ProtocolError> {
            let mut cfg = self.provision_config(labels)?;
            cfg.pin = &msg.pin;
            let moved = provision::provision_keys(&cfg, msg.node_type, &msg.peer)?;
            Ok(moved.to_be_bytes().to_vec())
        };
        self.ctl_reply(chan, frame.session_id, run())
    }

    fn serve_ctl_backup(
        &self,
        chan: &mut dyn FrameChannel,
        frame: Frame,
    ) -> Result<(), ProtocolError> {
        let msg = CtlBackupMsg::from_bytes(&frame.payload)?;
        let run = || -> Result<Vec<u8>, ProtocolError> {
            let mut cfg = self.provision_config(None)?;
            cfg.pin = &msg.pin;
            let moved = provision::backup(&cfg, &msg.peer)?;
            Ok(moved.to_be_bytes().to_vec())
        };
        self.ctl_reply(chan, frame.session_id, run())
    }

    /// Accept loop; runs until the process is signaled.
    pub fn serve_listener(self: &Arc<Self>, listener: std::net::TcpListener) -> ! {
        loop {
            match listener.accept() {
                Ok((stream, _peer)) => {
                    let _ = stream.set_read_timeout(Some(std::time::Duration::from_secs(60)));
                    let _ = stream.set_write_timeout(Some(std::time::Duration::from_secs(60)));
                    let node = Arc::clone(self);
                    std::thread::spawn(move || {
                        let mut chan = TcpFrameChannel::new(stream);
                        node.handle_connection(&mut chan);
                    });
                }
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    std::thread::sleep(std::time::Duration::from_millis(50));
                }
            }
        }
    }
}

/// Sends a control command to a node daemon and returns its result payload.
pub fn ctl_roundtrip(
    connector: &dyn Connector,
    endpoint: &str,
    frame_type: FrameType,
    payload: Vec<u8>,
) -> Result<CtlResultMsg, ProtocolError> {
    let mut chan = connector.connect(endpoint)?;
    let session = protocols::new_session_id();
    chan.send(&Frame::new(frame_type, session, payload))?;
    protocols::expect_msg(chan.as_mut(), FrameType::CtlResult, "CTL_RESULT", session)
}

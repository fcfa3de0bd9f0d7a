//! The multi-party protocols: certificate issuance, website-to-CDN key
//! transfer, and intra-organization provisioning, plus the shared message
//! vocabulary and client helpers.
//!
//! Every verification failure aborts the running protocol with a
//! step-tagged error, and aborts always happen before any message carrying
//! (encrypted) private keys is emitted.

pub mod issuance;
pub mod provision;
pub mod transfer;

use std::collections::HashMap;
use std::sync::Mutex;

use thiserror::Error;

use crate::attestation::{
    self, AttestError, AvReport, AvVerdict, PckCacheEntry, Quote, QuoteRejection,
};
use crate::certkit::{BlindCert, CertError, CertInvalid, Csr};
use crate::crypto::{Hash, PublicKeyBytes};
use crate::framing::{Connector, Frame, FrameChannel, FrameType, SESSION_ID_LEN};
use crate::keyvault::VaultError;
use crate::wire::{self, Reader, Wire, WireError, Writer};

pub type SessionId = [u8; SESSION_ID_LEN];

pub fn new_session_id() -> SessionId {
    crate::crypto::random_bytes()
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("CA certificate quote invalid: {0}")]
    CaQuoteInvalid(QuoteRejection),
    #[error("verification service rejected the quote: {0}")]
    IasRejected(String),
    #[error("issued certificate does not verify under the CA certificate: {0}")]
    CertIssuerMismatch(CertInvalid),
    #[error("quote verification failed: {0}")]
    QuoteInvalid(QuoteRejection),
    #[error("peer certificate quote invalid: {0}")]
    PeerQuoteInvalid(QuoteRejection),
    #[error("peer signature over ephemeral key invalid")]
    PeerSignatureInvalid,
    #[error("PCK entry rejected: {0}")]
    PckRejected(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("payload decryption failed")]
    DecryptFailure,
    #[error("peer ephemeral key is not a valid curve point")]
    InvalidCurvePoint,
    #[error("CSR rejected: proof of possession invalid")]
    BadCsr,
    #[error("unexpected protocol step: expected {expected}, got {got}")]
    UnexpectedStep {
        expected: &'static str,
        got: String,
    },
    #[error("peer reported error at {step}: {message}")]
    Remote {
        code: u16,
        step: String,
        message: String,
    },
    #[error(transparent)]
    Vault(#[from] VaultError),
    #[error(transparent)]
    Cert(#[from] CertError),
    #[error(transparent)]
    Attest(#[from] AttestError),
    #[error("network failure: {0}")]
    Net(#[from] std::io::Error),
    #[error("malformed message: {0}")]
    Malformed(#[from] WireError),
}

impl ProtocolError {
    /// Stable tag used for CLI exit mapping and error frames.
    pub fn step_tag(&self) -> &'static str {
        match self {
            ProtocolError::CaQuoteInvalid(_) => "CA_QUOTE_INVALID",
            ProtocolError::IasRejected(_) => "IAS_REJECTED",
            ProtocolError::CertIssuerMismatch(_) => "CERT_ISSUER_MISMATCH",
            ProtocolError::QuoteInvalid(_) => "QUOTE_INVALID",
            ProtocolError::PeerQuoteInvalid(_) => "PEER_QUOTE_INVALID",
            ProtocolError::PeerSignatureInvalid => "PEER_SIGNATURE_INVALID",
            ProtocolError::PckRejected(_) => "PCK_REJECTED",
            ProtocolError::NotFound(_) => "NOT_FOUND",
            ProtocolError::DecryptFailure => "DECRYPT_FAILURE",
            ProtocolError::InvalidCurvePoint => "INVALID_CURVE_POINT",
            ProtocolError::BadCsr => "BAD_CSR",
            ProtocolError::UnexpectedStep { .. } => "UNEXPECTED_STEP",
            ProtocolError::Remote { .. } => "REMOTE",
            ProtocolError::Vault(VaultError::AuthFailure) => "AUTH_FAILURE",
            ProtocolError::Vault(VaultError::RollbackDetected) => "ROLLBACK_DETECTED",
            ProtocolError::Vault(_) => "VAULT",
            ProtocolError::Cert(_) => "CERT",
            ProtocolError::Attest(_) => "ATTEST",
            ProtocolError::Net(_) => "NET",
            ProtocolError::Malformed(_) => "MALFORMED",
        }
    }
}

/// Error-frame codes (u16) used on the wire.
pub mod error_code {
    pub const GENERIC: u16 = 1;
    pub const UNSUPPORTED_FOR_ROLE: u16 = 2;
    pub const BAD_FRAME: u16 = 3;
    pub const AUTH_FAILURE: u16 = 4;
    pub const QUOTE_INVALID: u16 = 5;
    pub const PCK_REJECTED: u16 = 6;
    pub const BAD_CSR: u16 = 7;
    pub const UNAVAILABLE: u16 = 8;
    pub const UNEXPECTED_STEP: u16 = 9;
    pub const DECRYPT_FAILURE: u16 = 10;
    pub const NOT_FOUND: u16 = 11;
    pub const SIGNATURE_INVALID: u16 = 12;
}

impl ProtocolError {
    pub fn wire_code(&self) -> u16 {
        match self {
            ProtocolError::CaQuoteInvalid(_)
            | ProtocolError::QuoteInvalid(_)
            | ProtocolError::PeerQuoteInvalid(_)
            | ProtocolError::IasRejected(_) => error_code::QUOTE_INVALID,
            ProtocolError::PckRejected(_) => error_code::PCK_REJECTED,
            ProtocolError::BadCsr => error_code::BAD_CSR,
            ProtocolError::NotFound(_) => error_code::NOT_FOUND,
            ProtocolError::DecryptFailure => error_code::DECRYPT_FAILURE,
            ProtocolError::PeerSignatureInvalid => error_code::SIGNATURE_INVALID,
            ProtocolError::UnexpectedStep { .. } => error_code::UNEXPECTED_STEP,
            ProtocolError::Vault(VaultError::AuthFailure) => error_code::AUTH_FAILURE,
            _ => error_code::GENERIC,
        }
    }
}

// --- Message payloads ---

macro_rules! wire_struct {
    ($name:ident { $($field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $(pub $field: $ty),*
        }
    };
}

wire_struct!(CertDataMsg { cert: BlindCert });

impl Wire for CertDataMsg {
    fn encode(&self, w: &mut Writer) {
        self.cert.encode(w);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(CertDataMsg {
            cert: BlindCert::decode(r)?,
        })
    }
}

wire_struct!(IasVerifyMsg { quote: Quote });

impl Wire for IasVerifyMsg {
    fn encode(&self, w: &mut Writer) {
        self.quote.encode(w);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(IasVerifyMsg {
            quote: Quote::decode(r)?,
        })
    }
}

wire_struct!(IasReportMsg { report: AvReport });

impl Wire for IasReportMsg {
    fn encode(&self, w: &mut Writer) {
        self.report.encode(w);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(IasReportMsg {
            report: AvReport::decode(r)?,
        })
    }
}

wire_struct!(PckFetchMsg {
    platform_id: [u8; 16]
});

impl Wire for PckFetchMsg {
    fn encode(&self, w: &mut Writer) {
        w.put_fixed(&self.platform_id);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(PckFetchMsg {
            platform_id: r.get_fixed()?,
        })
    }
}

wire_struct!(PckEntryMsg { entry: PckCacheEntry });

impl Wire for PckEntryMsg {
    fn encode(&self, w: &mut Writer) {
        self.entry.encode(w);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(PckEntryMsg {
            entry: PckCacheEntry::decode(r)?,
        })
    }
}

wire_struct!(IssueRequestMsg {
    csr: Csr,
    quote: Quote
});

impl Wire for IssueRequestMsg {
    fn encode(&self, w: &mut Writer) {
        self.csr.encode(w);
        self.quote.encode(w);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(IssueRequestMsg {
            csr: Csr::decode(r)?,
            quote: Quote::decode(r)?,
        })
    }
}

wire_struct!(IssueResponseMsg { cert: BlindCert });

impl Wire for IssueResponseMsg {
    fn encode(&self, w: &mut Writer) {
        self.cert.encode(w);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(IssueResponseMsg {
            cert: BlindCert::decode(r)?,
        })
    }
}

/// One direction of the transfer handshake: certificate, a fresh quote
/// binding the certificate's public key, the ephemeral ECDH key, and the
/// signature over that ephemeral key under the certificate key.
wire_struct!(TransferMsg {
    cert: BlindCert,
    quote: Quote,
    eph_pk: Vec<u8>,
    sig: Vec<u8>,
});

impl Wire for TransferMsg {
    fn encode(&self, w: &mut Writer) {
        self.cert.encode(w);
        self.quote.encode(w);
        w.put_bytes(&self.eph_pk);
        w.put_bytes(&self.sig);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(TransferMsg {
            cert: BlindCert::decode(r)?,
            quote: Quote::decode(r)?,
            eph_pk: r.get_bytes()?,
            sig: r.get_bytes()?,
        })
    }
}

wire_struct!(CipherMsg { ciphertext: Vec<u8> });

impl Wire for CipherMsg {
    fn encode(&self, w: &mut Writer) {
        w.put_bytes(&self.ciphertext);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(CipherMsg {
            ciphertext: r.get_bytes()?,
        })
    }
}

wire_struct!(TransferDoneMsg { label: String });

impl Wire for TransferDoneMsg {
    fn encode(&self, w: &mut Writer) {
        w.put_str(&self.label);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(TransferDoneMsg {
            label: r.get_str()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeType {
    Sender,
    Receiver,
}

impl NodeType {
    pub fn tag(self) -> u8 {
        match self {
            NodeType::Sender => 1,
            NodeType::Receiver => 2,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self, WireError> {
        match t {
            1 => Ok(NodeType::Sender),
            2 => Ok(NodeType::Receiver),
            _ => Err(WireError::BadTag(t as u16)),
        }
    }

    pub fn complement(self) -> NodeType {
        match self {
            NodeType::Sender => NodeType::Receiver,
            NodeType::Receiver => NodeType::Sender,
        }
    }
}

/// Opens provisioning: the claimed platform identity, whether the initiator
/// holds the keys (sender) or wants them (receiver), and an optional label
/// filter for pulls.
wire_struct!(ProvisionHelloMsg {
    platform_id: [u8; 16],
    node_type: NodeType,
    labels: Vec<String>,
});

impl Wire for ProvisionHelloMsg {
    fn encode(&self, w: &mut Writer) {
        w.put_fixed(&self.platform_id);
        w.put_u8(self.node_type.tag());
        w.put_u32(self.labels.len() as u32);
        for l in &self.labels {
            w.put_str(l);
        }
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        let platform_id = r.get_fixed()?;
        let node_type = NodeType::from_tag(r.get_u8()?)?;
        let n = r.get_u32()? as usize;
        let mut labels = Vec::with_capacity(n.min(256));
        for _ in 0..n {
            labels.push(r.get_str()?);
        }
        Ok(ProvisionHelloMsg {
            platform_id,
            node_type,
            labels,
        })
    }
}

wire_struct!(ProvisionAcceptMsg {
    platform_id: [u8; 16]
});

impl Wire for ProvisionAcceptMsg {
    fn encode(&self, w: &mut Writer) {
        w.put_fixed(&self.platform_id);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(ProvisionAcceptMsg {
            platform_id: r.get_fixed()?,
        })
    }
}

wire_struct!(ProvisionKeyExchangeMsg {
    quote: Quote,
    eph_pk: Vec<u8>,
});

impl Wire for ProvisionKeyExchangeMsg {
    fn encode(&self, w: &mut Writer) {
        self.quote.encode(w);
        w.put_bytes(&self.eph_pk);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(ProvisionKeyExchangeMsg {
            quote: Quote::decode(r)?,
            eph_pk: r.get_bytes()?,
        })
    }
}

wire_struct!(ProvisionDoneMsg { stored: u32 });

impl Wire for ProvisionDoneMsg {
    fn encode(&self, w: &mut Writer) {
        w.put_u32(self.stored);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(ProvisionDoneMsg {
            stored: r.get_u32()?,
        })
    }
}

wire_struct!(ErrorMsg {
    code: u16,
    step: String,
    message: String,
});

impl Wire for ErrorMsg {
    fn encode(&self, w: &mut Writer) {
        w.put_u16(self.code);
        w.put_str(&self.step);
        w.put_str(&self.message);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(ErrorMsg {
            code: r.get_u16()?,
            step: r.get_str()?,
            message: r.get_str()?,
        })
    }
}

wire_struct!(CtlIssueMsg {
    pin: Vec<u8>,
    subject: String,
});

impl Wire for CtlIssueMsg {
    fn encode(&self, w: &mut Writer) {
        w.put_bytes(&self.pin);
        w.put_str(&self.subject);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(CtlIssueMsg {
            pin: r.get_bytes()?,
            subject: r.get_str()?,
        })
    }
}

wire_struct!(CtlTransferMsg {
    pin: Vec<u8>,
    peer: String,
    label: String,
});

impl Wire for CtlTransferMsg {
    fn encode(&self, w: &mut Writer) {
        w.put_bytes(&self.pin);
        w.put_str(&self.peer);
        w.put_str(&self.label);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(CtlTransferMsg {
            pin: r.get_bytes()?,
            peer: r.get_str()?,
            label: r.get_str()?,
        })
    }
}

wire_struct!(CtlProvisionMsg {
    pin: Vec<u8>,
    peer: String,
    node_type: NodeType,
    labels: Vec<String>,
});

impl Wire for CtlProvisionMsg {
    fn encode(&self, w: &mut Writer) {
        w.put_bytes(&self.pin);
        w.put_str(&self.peer);
        w.put_u8(self.node_type.tag());
        w.put_u32(self.labels.len() as u32);
        for l in &self.labels {
            w.put_str(l);
        }
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        let pin = r.get_bytes()?;
        let peer = r.get_str()?;
        let node_type = NodeType::from_tag(r.get_u8()?)?;
        let n = r.get_u32()? as usize;
        let mut labels = Vec::with_capacity(n.min(256));
        for _ in 0..n {
            labels.push(r.get_str()?);
        }
        Ok(CtlProvisionMsg {
            pin,
            peer,
            node_type,
            labels,
        })
    }
}

wire_struct!(CtlBackupMsg {
    pin: Vec<u8>,
    peer: String,
});

impl Wire for CtlBackupMsg {
    fn encode(&self, w: &mut Writer) {
        w.put_bytes(&self.pin);
        w.put_str(&self.peer);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(CtlBackupMsg {
            pin: r.get_bytes()?,
            peer: r.get_str()?,
        })
    }
}

wire_struct!(CtlResultMsg {
    ok: bool,
    detail: String,
    data: Vec<u8>,
});

impl Wire for CtlResultMsg {
    fn encode(&self, w: &mut Writer) {
        w.put_u8(self.ok as u8);
        w.put_str(&self.detail);
        w.put_bytes(&self.data);
    }
    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(CtlResultMsg {
            ok: r.get_u8()? != 0,
            detail: r.get_str()?,
            data: r.get_bytes()?,
        })
    }
}

// --- Frame helpers ---

pub fn send_msg<M: Wire>(
    chan: &mut dyn FrameChannel,
    frame_type: FrameType,
    session: SessionId,
    msg: &M,
) -> Result<(), ProtocolError> {
    chan.send(&Frame::new(frame_type, session, msg.to_bytes()))?;
    Ok(())
}

/// Receives the next frame of a session, requiring the expected type.
/// Error frames become `Remote`, anything else is a protocol abort.
pub fn expect_msg<M: Wire>(
    chan: &mut dyn FrameChannel,
    expected: FrameType,
    expected_name: &'static str,
    session: SessionId,
) -> Result<M, ProtocolError> {
    let frame = chan.recv()?;
    if frame.frame_type == FrameType::Error {
        let err = ErrorMsg::from_bytes(&frame.payload)?;
        return Err(ProtocolError::Remote {
            code: err.code,
            step: err.step,
            message: err.message,
        });
    }
    if frame.frame_type != expected || frame.session_id != session {
        return Err(ProtocolError::UnexpectedStep {
            expected: expected_name,
            got: format!("{:?}", frame.frame_type),
        });
    }
    Ok(M::from_bytes(&frame.payload)?)
}

pub fn send_error(
    chan: &mut dyn FrameChannel,
    session: SessionId,
    code: u16,
    step: &str,
    message: &str,
) {
    let msg = ErrorMsg {
        code,
        step: step.to_string(),
        message: message.to_string(),
    };
    let _ = chan.send(&Frame::new(FrameType::Error, session, msg.to_bytes()));
}

// --- Client helpers ---

/// Fetches the CA certificate (with its embedded quote) from a CA node.
pub fn cert_fetch(connector: &dyn Connector, endpoint: &str) -> Result<BlindCert, ProtocolError> {
    let mut chan = connector.connect(endpoint)?;
    let session = new_session_id();
    chan.send(&Frame::new(FrameType::CertFetch, session, Vec::new()))?;
    let msg: CertDataMsg = expect_msg(chan.as_mut(), FrameType::CertData, "CERT_DATA", session)?;
    Ok(msg.cert)
}

/// Asks the verification service to judge an EPID quote.
pub fn ias_verify_remote(
    connector: &dyn Connector,
    endpoint: &str,
    quote: &Quote,
) -> Result<AvReport, ProtocolError> {
    let mut chan = connector.connect(endpoint)?;
    let session = new_session_id();
    send_msg(
        chan.as_mut(),
        FrameType::IasVerify,
        session,
        &IasVerifyMsg {
            quote: quote.clone(),
        },
    )?;
    let msg: IasReportMsg = expect_msg(chan.as_mut(), FrameType::IasReport, "IAS_REPORT", session)?;
    Ok(msg.report)
}

/// Fetches a platform's org-signed PCK entry and verifies the organization
/// signature under the installed master public key. Entries that fail the
/// check are rejected as rogue before any quote exchange.
pub fn fetch_pck_cert(
    connector: &dyn Connector,
    endpoint: &str,
    platform_id: [u8; 16],
    mpk: &PublicKeyBytes,
) -> Result<PckCacheEntry, ProtocolError> {
    let mut chan = connector.connect(endpoint)?;
    let session = new_session_id();
    send_msg(
        chan.as_mut(),
        FrameType::PckFetch,
        session,
        &PckFetchMsg { platform_id },
    )?;
    let msg: PckEntryMsg = match expect_msg(chan.as_mut(), FrameType::PckEntry, "PCK_ENTRY", session)
    {
        Ok(m) => m,
        Err(ProtocolError::Remote { code, message, .. }) if code == error_code::NOT_FOUND => {
            return Err(ProtocolError::NotFound(message))
        }
        Err(e) => return Err(e),
    };
    if msg.entry.platform_id != platform_id {
        return Err(ProtocolError::PckRejected(
            "entry is for a different platform".into(),
        ));
    }
    if !attestation::accept_pck_entry(&msg.entry, mpk) {
        return Err(ProtocolError::PckRejected(
            "org signature invalid".into(),
        ));
    }
    Ok(msg.entry)
}

/// Verdict cache for the verification service, keyed by quote hash.
/// Only positive verdicts are cached; entries expire after `ttl_secs`.
pub struct IasCache {
    ttl_secs: u64,
    entries: Mutex<HashMap<Hash, u64>>,
}

impl IasCache {
    pub fn new(ttl_secs: u64) -> Self {
        IasCache {
            ttl_secs,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn is_fresh(&self, quote_hash: &Hash) -> bool {
        let map = self.entries.lock().unwrap();
        map.get(quote_hash)
            .map(|&expiry| crate::unix_now() < expiry)
            .unwrap_or(false)
    }

    pub fn record_ok(&self, quote_hash: Hash) {
        self.entries
            .lock()
            .unwrap()
            .insert(quote_hash, crate::unix_now() + self.ttl_secs);
    }
}

impl Default for IasCache {
    fn default() -> Self {
        // 24h verdict lifetime
        IasCache::new(24 * 3600)
    }
}

/// Everything a party needs to judge a peer quote: trust anchors for both
/// attestation models plus the measurement policy.
#[derive(Clone, Copy)]
pub struct PeerVerification<'a> {
    pub connector: &'a dyn Connector,
    pub ias_endpoint: Option<&'a str>,
    pub service_key: Option<&'a PublicKeyBytes>,
    pub manufacturer_root: Option<&'a BlindCert>,
    pub expected_mrenclave: &'a [Hash],
    pub min_svn: u16,
    pub min_tcb: u16,
    pub ias_cache: Option<&'a IasCache>,
}

impl<'a> PeerVerification<'a> {
    pub fn policy(&self) -> attestation::QuotePolicy<'_> {
        attestation::QuotePolicy {
            expected_mrenclave: self.expected_mrenclave,
            min_svn: self.min_svn,
            min_tcb: self.min_tcb,
        }
    }

    /// Full quote verification, resolving the correct evidence path for the
    /// quote's type. EPID quotes are submitted to the verification service
    /// (subject to the verdict cache); ECDSA quotes verify offline.
    pub fn verify_quote(
        &self,
        quote: &Quote,
        expected_report_data: &[u8],
    ) -> Result<(), ProtocolError> {
        let now = crate::unix_now();
        match quote.quote_type {
            attestation::QuoteType::Ecdsa => {
                let root = self.manufacturer_root.ok_or_else(|| {
                    ProtocolError::QuoteInvalid(QuoteRejection::SignatureInvalid)
                })?;
                attestation::verify_quote(
                    quote,
                    expected_report_data,
                    &attestation::QuoteAuthority::EcdsaRoot(root),
                    &self.policy(),
                    now,
                )
                .map_err(ProtocolError::QuoteInvalid)
            }
            attestation::QuoteType::Epid => {
                // local claims first (measurement, binding, svn), then the
                // service roundtrip for the group signature
                attestation::verify_quote_claims(quote, expected_report_data, &self.policy())
                    .map_err(ProtocolError::QuoteInvalid)?;
                let hash = quote.hash();
                if let Some(cache) = self.ias_cache {
                    if cache.is_fresh(&hash) {
                        return Ok(());
                    }
                }
                let endpoint = self
                    .ias_endpoint
                    .ok_or_else(|| ProtocolError::IasRejected("no service endpoint".into()))?;
                let service_key = self
                    .service_key
                    .ok_or_else(|| ProtocolError::IasRejected("no service key".into()))?;
                let avr = ias_verify_remote(self.connector, endpoint, quote)?;
                if !avr.verify(service_key) {
                    return Err(ProtocolError::IasRejected(
                        "report signature invalid".into(),
                    ));
                }
                if avr.quote_hash != hash {
                    return Err(ProtocolError::IasRejected("report for wrong quote".into()));
                }
                if avr.verdict != AvVerdict::Ok {
                    return Err(ProtocolError::IasRejected(format!("{:?}", avr.verdict)));
                }
                if let Some(cache) = self.ias_cache {
                    cache.record_ok(hash);
                }
                Ok(())
            }
        }
    }
}

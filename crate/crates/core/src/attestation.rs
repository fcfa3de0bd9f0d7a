//! Quote generation and verification for both attestation models, the
//! simulated verification service, and the organization PCK cache.
//!
//! ECDSA quotes verify offline: the quote carries a certificate chain from
//! the attestation key through the platform certification key (PCK) to the
//! manufacturer root. EPID quotes can only be judged by the verification
//! service, which alone holds the group verification key; relying parties
//! receive a signed attestation verification report instead. The group
//! signature scheme itself is simulated with a shared-group ECDSA key —
//! member privacy is out of scope here, but the trust topology (nobody can
//! verify an EPID quote without the service) is real.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::certkit::{self, BlindCert, CertParams, RevocationList, Validity};
use crate::crypto::{self, Hash, KeyAlgorithm, PublicKeyBytes, SecretBytes};
use crate::soft_tee::{PlatformSecret, Report, TeeContext, PLATFORM_ID_LEN, REPORT_DATA_LEN};
use crate::wire::{self, Reader, Wire, WireError, Writer};

const LABEL_QUOTE_SIG: &str = "bf/quote-sig/v1";
const LABEL_AVR_SIG: &str = "bf/avr-sig/v1";
const LABEL_PCK_ENTRY: &str = "bf/pck-entry/v1";
const LABEL_PCK_SEED: &str = "bf/pck-key/v1";
const LABEL_AK_SEED: &str = "bf/ak-key/v1";

const EPID_FILE_MAGIC: &[u8; 8] = b"BFEPID01";
const IAS_FILE_MAGIC: &[u8; 8] = b"BFIAS001";
const PCK_CACHE_MAGIC: &[u8; 8] = b"BFPCKC01";

pub const MANUFACTURER_ROOT_SUBJECT: &str = "bf-manufacturer-root";

#[derive(Debug, Error)]
pub enum AttestError {
    #[error("no PCK certificate provisioned on this platform")]
    PckUnavailable,
    #[error("no EPID group membership provisioned on this platform")]
    EpidUnavailable,
    #[error("verification service got a non-EPID quote")]
    WrongQuoteType,
    #[error("unknown EPID group")]
    UnknownGroup,
    #[error("malformed structure: {0}")]
    Malformed(#[from] WireError),
    #[error(transparent)]
    Crypto(#[from] crypto::CryptoError),
    #[error(transparent)]
    Tee(#[from] crate::soft_tee::TeeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which of the verification checks failed, in the order they run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuoteRejection {
    /// Attestation signature/chain/report invalid (or service said so).
    SignatureInvalid,
    /// report_data does not bind the expected data.
    ReportDataMismatch,
    /// Measurement not in the caller's expected set.
    MrenclaveMismatch,
    /// SVN or TCB version below the caller's minimum.
    TcbOutdated,
    /// EPID quote presented for offline verification.
    VerificationServiceRequired,
    /// Evidence kind does not match the quote type.
    WrongEvidence,
    #[allow(dead_code)]
    Malformed,
}

impl std::fmt::Display for QuoteRejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            QuoteRejection::SignatureInvalid => "SIGNATURE_INVALID",
            QuoteRejection::ReportDataMismatch => "REPORT_DATA_MISMATCH",
            QuoteRejection::MrenclaveMismatch => "MRENCLAVE_MISMATCH",
            QuoteRejection::TcbOutdated => "TCB_OUTDATED",
            QuoteRejection::VerificationServiceRequired => "VERIFICATION_SERVICE_REQUIRED",
            QuoteRejection::WrongEvidence => "WRONG_EVIDENCE",
            QuoteRejection::Malformed => "MALFORMED",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuoteType {
    Epid,
    Ecdsa,
}

impl QuoteType {
    pub fn tag(self) -> u8 {
        match self {
            QuoteType::Epid => 1,
            QuoteType::Ecdsa => 2,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self, WireError> {
        match t {
            1 => Ok(QuoteType::Epid),
            2 => Ok(QuoteType::Ecdsa),
            _ => Err(WireError::BadTag(t as u16)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuoteType::Epid => "epid",
            QuoteType::Ecdsa => "ecdsa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "epid" => Some(QuoteType::Epid),
            "ecdsa" => Some(QuoteType::Ecdsa),
            _ => None,
        }
    }
}

/// Signed report. ECDSA quotes carry the PCK certificate chain
/// (attestation key cert, PCK cert, manufacturer root) needed to verify
/// them offline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub report: Report,
    pub quote_type: QuoteType,
    pub signature: Vec<u8>,
    pub pck_chain: Option<Vec<BlindCert>>,
}

impl Quote {
    fn signed_payload(report: &Report, quote_type: QuoteType) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_str(LABEL_QUOTE_SIG);
        report.encode(&mut w);
        w.put_u8(quote_type.tag());
        w.finish()
    }

    /// Hash of the canonical serialization; what verification reports refer to.
    pub fn hash(&self) -> Hash {
        crypto::sha256(&self.to_bytes())
    }

    pub fn svn(&self) -> u16 {
        self.report.measurement.svn
    }
}

impl Wire for Quote {
    fn encode(&self, w: &mut Writer) {
        self.report.encode(w);
        w.put_u8(self.quote_type.tag());
        w.put_bytes(&self.signature);
        match &self.pck_chain {
            None => w.put_u8(0),
            Some(chain) => {
                w.put_u8(1);
                wire::encode_vec(w, chain);
            }
        }
    }

    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(Quote {
            report: Report::decode(r)?,
            quote_type: QuoteType::from_tag(r.get_u8()?)?,
            signature: r.get_bytes()?,
            pck_chain: match r.get_u8()? {
                0 => None,
                1 => Some(wire::decode_vec(r)?),
                t => return Err(WireError::BadTag(t as u16)),
            },
        })
    }
}

/// report_data binding rule: callers bind arbitrary-length data as a 32-byte
/// hash left-padded with zeros to the 64-byte report_data slot.
pub fn bind_report_data(data: &[u8]) -> [u8; REPORT_DATA_LEN] {
    let mut out = [0u8; REPORT_DATA_LEN];
    out[32..].copy_from_slice(&crypto::sha256(data));
    out
}

// --- Platform attestation material ---

/// EPID group membership installed on a platform by the (simulated)
/// manufacturer provisioning flow.
pub struct EpidMemberKey {
    pub group_id: [u8; 16],
    signing_key: SecretBytes,
}

impl EpidMemberKey {
    pub fn save(&self, path: &Path) -> Result<(), AttestError> {
        let mut w = Writer::new();
        w.put_fixed(EPID_FILE_MAGIC);
        w.put_fixed(&self.group_id);
        w.put_bytes(self.signing_key.expose());
        Ok(std::fs::write(path, w.finish())?)
    }

    pub fn load(path: &Path) -> Result<Self, AttestError> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader::new(&bytes);
        if r.get_fixed::<8>()? != *EPID_FILE_MAGIC {
            return Err(AttestError::Malformed(WireError::BadMagic));
        }
        let group_id = r.get_fixed::<16>()?;
        let signing_key = SecretBytes::new(r.get_bytes()?);
        r.expect_end().map_err(AttestError::Malformed)?;
        Ok(EpidMemberKey {
            group_id,
            signing_key,
        })
    }
}

/// Per-platform attestation key material. The PCK and attestation keys are
/// derived from the platform provisioning secret; the PCK certificate comes
/// from the manufacturer, and the attestation-key certificate is issued
/// locally by the PCK (the PCE role runs on-platform).
pub struct AttestationKeys {
    epid: Option<EpidMemberKey>,
    pck_private: SecretBytes,
    ak_public: Vec<u8>,
    ak_private: SecretBytes,
    pck_cert: Option<BlindCert>,
    ak_cert: Option<BlindCert>,
    manufacturer_root: Option<BlindCert>,
}

impl AttestationKeys {
    pub fn new(
        platform: &PlatformSecret,
        epid: Option<EpidMemberKey>,
        pck_cert: Option<BlindCert>,
        manufacturer_root: Option<BlindCert>,
    ) -> Result<Self, AttestError> {
        let seed = platform.provisioning_seed();
        let (_pck_public, pck_private) = crypto::ecdsa_from_seed(seed, LABEL_PCK_SEED);
        let (ak_public, ak_private) = crypto::ecdsa_from_seed(seed, LABEL_AK_SEED);

        // Local certification step: the platform certifies its own
        // attestation key under the PCK, mirroring QE->PCE local attestation.
        let ak_cert = match &pck_cert {
            Some(pck) => Some(certkit::build_cert_with_key(
                CertParams {
                    subject: format!("bf-ak:{}", hex::encode(platform.platform_id())),
                    issuer: pck.subject.clone(),
                    validity: Validity::starting_now(certkit::CA_VALIDITY_SECS),
                    subject_public_key: PublicKeyBytes {
                        alg: KeyAlgorithm::EcdsaP256,
                        bytes: ak_public.clone(),
                    },
                    extensions: Default::default(),
                },
                KeyAlgorithm::EcdsaP256,
                pck_private.expose(),
            )
            .map_err(|_| AttestError::PckUnavailable)?),
            None => None,
        };

        Ok(AttestationKeys {
            epid,
            pck_private,
            ak_public,
            ak_private,
            pck_cert,
            ak_cert,
            manufacturer_root,
        })
    }

    /// No attestation material at all: quotes cannot be generated. Used by
    /// service roles that only answer lookups.
    pub fn none(platform: &PlatformSecret) -> Self {
        let seed = platform.provisioning_seed();
        let (_, pck_private) = crypto::ecdsa_from_seed(seed, LABEL_PCK_SEED);
        let (ak_public, ak_private) = crypto::ecdsa_from_seed(seed, LABEL_AK_SEED);
        AttestationKeys {
            epid: None,
            pck_private,
            ak_public,
            ak_private,
            pck_cert: None,
            ak_cert: None,
            manufacturer_root: None,
        }
    }

    pub fn manufacturer_root(&self) -> Option<&BlindCert> {
        self.manufacturer_root.as_ref()
    }

    pub fn pck_cert(&self) -> Option<&BlindCert> {
        self.pck_cert.as_ref()
    }
}

/// Public half of the key a platform would present for PCK certification.
pub fn pck_public_for_platform(platform: &PlatformSecret) -> PublicKeyBytes {
    let (public, _) = crypto::ecdsa_from_seed(platform.provisioning_seed(), LABEL_PCK_SEED);
    PublicKeyBytes {
        alg: KeyAlgorithm::EcdsaP256,
        bytes: public,
    }
}

/// Generates a quote binding `report_data` (by the hash rule) under the
/// requested attestation model.
pub fn generate_quote(
    report_data: &[u8],
    quote_type: QuoteType,
    tee: &TeeContext,
    keys: &AttestationKeys,
) -> Result<Quote, AttestError> {
    let bound = bind_report_data(report_data);
    let report = tee.create_report(&bound)?;
    let payload = Quote::signed_payload(&report, quote_type);

    match quote_type {
        QuoteType::Epid => {
            let member = keys.epid.as_ref().ok_or(AttestError::EpidUnavailable)?;
            let sig = crypto::sign(
                KeyAlgorithm::EcdsaP256,
                member.signing_key.expose(),
                &payload,
            )?;
            let mut w = Writer::new();
            w.put_fixed(&member.group_id);
            w.put_bytes(&sig);
            Ok(Quote {
                report,
                quote_type,
                signature: w.finish(),
                pck_chain: None,
            })
        }
        QuoteType::Ecdsa => {
            let ak_cert = keys.ak_cert.clone().ok_or(AttestError::PckUnavailable)?;
            let pck_cert = keys.pck_cert.clone().ok_or(AttestError::PckUnavailable)?;
            let root = keys
                .manufacturer_root
                .clone()
                .ok_or(AttestError::PckUnavailable)?;
            let sig = crypto::sign(KeyAlgorithm::EcdsaP256, keys.ak_private.expose(), &payload)?;
            Ok(Quote {
                report,
                quote_type,
                signature: sig,
                pck_chain: Some(vec![ak_cert, pck_cert, root]),
            })
        }
    }
}

// --- Verification ---

/// What the verifier expects of the attesting enclave.
pub struct QuotePolicy<'a> {
    pub expected_mrenclave: &'a [Hash],
    pub min_svn: u16,
    pub min_tcb: u16,
}

/// Evidence establishing the quote's attestation signature.
pub enum QuoteAuthority<'a> {
    /// Offline: walk the embedded PCK chain to this manufacturer root.
    EcdsaRoot(&'a BlindCert),
    /// A verification report from the service, plus the service's
    /// report-signing public key.
    EpidReport {
        avr: &'a AvReport,
        service_key: &'a PublicKeyBytes,
    },
}

/// Runs the four checks in order — attestation signature, report_data
/// binding, measurement, SVN/TCB floor — and reports the first failure.
/// Protocol layers abort on error; this primitive only judges.
pub fn verify_quote(
    quote: &Quote,
    expected_report_data: &[u8],
    authority: &QuoteAuthority,
    policy: &QuotePolicy,
    now: u64,
) -> Result<(), QuoteRejection> {
    // check 1: attestation signature
    match (quote.quote_type, authority) {
        (QuoteType::Ecdsa, QuoteAuthority::EcdsaRoot(root)) => {
            verify_ecdsa_signature(quote, root, now)?
        }
        (QuoteType::Epid, QuoteAuthority::EpidReport { avr, service_key }) => {
            if !avr.verify(service_key) {
                return Err(QuoteRejection::SignatureInvalid);
            }
            if avr.quote_hash != quote.hash() {
                return Err(QuoteRejection::SignatureInvalid);
            }
            if avr.verdict != AvVerdict::Ok {
                return Err(QuoteRejection::SignatureInvalid);
            }
        }
        (QuoteType::Epid, QuoteAuthority::EcdsaRoot(_)) => {
            return Err(QuoteRejection::VerificationServiceRequired)
        }
        (QuoteType::Ecdsa, QuoteAuthority::EpidReport { .. }) => {
            return Err(QuoteRejection::WrongEvidence)
        }
    }

    verify_quote_claims(quote, expected_report_data, policy)
}

/// Checks 2–4 only: report_data binding, measurement, SVN/TCB floor.
/// Callers on the EPID path run these locally before consulting the
/// verification service for the signature.
pub fn verify_quote_claims(
    quote: &Quote,
    expected_report_data: &[u8],
    policy: &QuotePolicy,
) -> Result<(), QuoteRejection> {
    // check 2: report_data binds the expected data
    if quote.report.report_data != bind_report_data(expected_report_data) {
        return Err(QuoteRejection::ReportDataMismatch);
    }

    // check 3: measurement matches an expected build
    if !policy
        .expected_mrenclave
        .contains(&quote.report.measurement.mrenclave)
    {
        return Err(QuoteRejection::MrenclaveMismatch);
    }

    // check 4: platform is up to date
    if quote.report.measurement.svn < policy.min_svn
        || quote.report.measurement.tcb_version < policy.min_tcb
    {
        return Err(QuoteRejection::TcbOutdated);
    }

    Ok(())
}

fn verify_ecdsa_signature(
    quote: &Quote,
    root: &BlindCert,
    now: u64,
) -> Result<(), QuoteRejection> {
    let chain = quote
        .pck_chain
        .as_ref()
        .ok_or(QuoteRejection::SignatureInvalid)?;
    if chain.is_empty() {
        return Err(QuoteRejection::SignatureInvalid);
    }
    certkit::verify_chain(chain, Some(root), now, &RevocationList::empty())
        .map_err(|_| QuoteRejection::SignatureInvalid)?;
    let ak = &chain[0];
    let payload = Quote::signed_payload(&quote.report, quote.quote_type);
    if !crypto::verify_with(&ak.subject_public_key, &payload, &quote.signature) {
        return Err(QuoteRejection::SignatureInvalid);
    }
    Ok(())
}

// --- Verification service (IAS role) ---

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvVerdict {
    Ok,
    SignatureInvalid,
    GroupRevoked,
}

impl AvVerdict {
    fn tag(self) -> u8 {
        match self {
            AvVerdict::Ok => 1,
            AvVerdict::SignatureInvalid => 2,
            AvVerdict::GroupRevoked => 3,
        }
    }

    fn from_tag(t: u8) -> Result<Self, WireError> {
        match t {
            1 => Ok(AvVerdict::Ok),
            2 => Ok(AvVerdict::SignatureInvalid),
            3 => Ok(AvVerdict::GroupRevoked),
            _ => Err(WireError::BadTag(t as u16)),
        }
    }
}

/// Attestation verification report: the service's signed judgement on one
/// EPID quote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AvReport {
    pub quote_hash: Hash,
    pub verdict: AvVerdict,
    pub timestamp: u64,
    pub service_signature: Vec<u8>,
}

impl AvReport {
    fn signing_payload(quote_hash: &Hash, verdict: AvVerdict, timestamp: u64) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_str(LABEL_AVR_SIG);
        w.put_fixed(quote_hash);
        w.put_u8(verdict.tag());
        w.put_u64(timestamp);
        w.finish()
    }

    pub fn verify(&self, service_key: &PublicKeyBytes) -> bool {
        crypto::verify_with(
            service_key,
            &Self::signing_payload(&self.quote_hash, self.verdict, self.timestamp),
            &self.service_signature,
        )
    }
}

impl Wire for AvReport {
    fn encode(&self, w: &mut Writer) {
        w.put_fixed(&self.quote_hash);
        w.put_u8(self.verdict.tag());
        w.put_u64(self.timestamp);
        w.put_bytes(&self.service_signature);
    }

    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(AvReport {
            quote_hash: r.get_fixed()?,
            verdict: AvVerdict::from_tag(r.get_u8()?)?,
            timestamp: r.get_u64()?,
            service_signature: r.get_bytes()?,
        })
    }
}

struct GroupRecord {
    verifier: PublicKeyBytes,
    revoked: bool,
}

/// The simulated attestation service. Holds the only copies of the EPID
/// group verification keys, so EPID quotes are unverifiable without it.
pub struct IasService {
    signing_private: SecretBytes,
    signing_public: PublicKeyBytes,
    groups: HashMap<[u8; 16], GroupRecord>,
}

impl IasService {
    pub fn generate() -> Self {
        let (public, private) = crypto::generate_keypair(KeyAlgorithm::EcdsaP256).unwrap();
        IasService {
            signing_private: private,
            signing_public: PublicKeyBytes {
                alg: KeyAlgorithm::EcdsaP256,
                bytes: public,
            },
            groups: HashMap::new(),
        }
    }

    /// The key relying parties use to check verification reports.
    pub fn service_public_key(&self) -> &PublicKeyBytes {
        &self.signing_public
    }

    pub fn install_group(&mut self, group_id: [u8; 16], verifier: PublicKeyBytes) {
        self.groups.insert(
            group_id,
            GroupRecord {
                verifier,
                revoked: false,
            },
        );
    }

    pub fn revoke_group(&mut self, group_id: &[u8; 16]) {
        if let Some(g) = self.groups.get_mut(group_id) {
            g.revoked = true;
        }
    }

    /// Judges an EPID quote and returns a signed verification report.
    pub fn ias_verify(&self, quote: &Quote) -> Result<AvReport, AttestError> {
        if quote.quote_type != QuoteType::Epid {
            return Err(AttestError::WrongQuoteType);
        }
        let verdict = self.judge(quote);
        let quote_hash = quote.hash();
        let timestamp = crate::unix_now();
        let sig = crypto::sign(
            KeyAlgorithm::EcdsaP256,
            self.signing_private.expose(),
            &AvReport::signing_payload(&quote_hash, verdict, timestamp),
        )?;
        Ok(AvReport {
            quote_hash,
            verdict,
            timestamp,
            service_signature: sig,
        })
    }

    fn judge(&self, quote: &Quote) -> AvVerdict {
        let mut r = Reader::new(&quote.signature);
        let Ok(group_id) = r.get_fixed::<16>() else {
            return AvVerdict::SignatureInvalid;
        };
        let Ok(sig) = r.get_bytes() else {
            return AvVerdict::SignatureInvalid;
        };
        let Some(group) = self.groups.get(&group_id) else {
            return AvVerdict::SignatureInvalid;
        };
        if group.revoked {
            return AvVerdict::GroupRevoked;
        }
        let payload = Quote::signed_payload(&quote.report, quote.quote_type);
        if crypto::verify_with(&group.verifier, &payload, &sig) {
            AvVerdict::Ok
        } else {
            AvVerdict::SignatureInvalid
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), AttestError> {
        let mut w = Writer::new();
        w.put_fixed(IAS_FILE_MAGIC);
        w.put_bytes(self.signing_private.expose());
        self.signing_public.encode(&mut w);
        w.put_u32(self.groups.len() as u32);
        let mut ids: Vec<_> = self.groups.keys().collect();
        ids.sort();
        for id in ids {
            let g = &self.groups[id];
            w.put_fixed(id);
            g.verifier.encode(&mut w);
            w.put_u8(g.revoked as u8);
        }
        Ok(std::fs::write(path, w.finish())?)
    }

    pub fn load(path: &Path) -> Result<Self, AttestError> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader::new(&bytes);
        if r.get_fixed::<8>()? != *IAS_FILE_MAGIC {
            return Err(AttestError::Malformed(WireError::BadMagic));
        }
        let signing_private = SecretBytes::new(r.get_bytes()?);
        let signing_public = PublicKeyBytes::decode(&mut r)?;
        let n = r.get_u32()? as usize;
        let mut groups = HashMap::new();
        for _ in 0..n {
            let id = r.get_fixed::<16>()?;
            let verifier = PublicKeyBytes::decode(&mut r)?;
            let revoked = r.get_u8()? != 0;
            groups.insert(id, GroupRecord { verifier, revoked });
        }
        r.expect_end().map_err(AttestError::Malformed)?;
        Ok(IasService {
            signing_private,
            signing_public,
            groups,
        })
    }
}

/// Fixture: a fresh EPID group. The member signing key goes to platforms,
/// the verifier key goes to the service, and nothing else ever sees either.
pub struct EpidGroup {
    pub group_id: [u8; 16],
    pub member_private: SecretBytes,
    pub verifier: PublicKeyBytes,
}

/// Group verification key as distributed to the service: group id plus the
/// verifier public key. File format for the fixture flow.
pub struct EpidGroupVerifier {
    pub group_id: [u8; 16],
    pub verifier: PublicKeyBytes,
}

const EPID_VERIFIER_MAGIC: &[u8; 8] = b"BFEPVF01";

impl EpidGroupVerifier {
    pub fn save(&self, path: &Path) -> Result<(), AttestError> {
        let mut w = Writer::new();
        w.put_fixed(EPID_VERIFIER_MAGIC);
        w.put_fixed(&self.group_id);
        self.verifier.encode(&mut w);
        Ok(std::fs::write(path, w.finish())?)
    }

    pub fn load(path: &Path) -> Result<Self, AttestError> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader::new(&bytes);
        if r.get_fixed::<8>()? != *EPID_VERIFIER_MAGIC {
            return Err(AttestError::Malformed(WireError::BadMagic));
        }
        let group_id = r.get_fixed::<16>()?;
        let verifier = PublicKeyBytes::decode(&mut r)?;
        r.expect_end().map_err(AttestError::Malformed)?;
        Ok(EpidGroupVerifier { group_id, verifier })
    }
}

impl EpidGroup {
    pub fn verifier_record(&self) -> EpidGroupVerifier {
        EpidGroupVerifier {
            group_id: self.group_id,
            verifier: self.verifier.clone(),
        }
    }

    pub fn generate() -> Self {
        let (public, private) = crypto::generate_keypair(KeyAlgorithm::EcdsaP256).unwrap();
        EpidGroup {
            group_id: crypto::random_bytes(),
            member_private: private,
            verifier: PublicKeyBytes {
                alg: KeyAlgorithm::EcdsaP256,
                bytes: public,
            },
        }
    }

    pub fn member_key(&self) -> EpidMemberKey {
        EpidMemberKey {
            group_id: self.group_id,
            signing_key: self.member_private.clone(),
        }
    }
}

// --- Organization PCK cache ---

/// One org-signed PCK certificate; what the cache server hands out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PckCacheEntry {
    pub platform_id: [u8; PLATFORM_ID_LEN],
    pub pck_cert: BlindCert,
    pub org_signature: Vec<u8>,
}

impl PckCacheEntry {
    pub fn signing_payload(platform_id: &[u8; PLATFORM_ID_LEN], pck_cert: &BlindCert) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_str(LABEL_PCK_ENTRY);
        w.put_fixed(platform_id);
        w.put_bytes(&pck_cert.to_bytes());
        w.finish()
    }

    pub fn verify(&self, mpk: &PublicKeyBytes) -> bool {
        crypto::verify_with(
            mpk,
            &Self::signing_payload(&self.platform_id, &self.pck_cert),
            &self.org_signature,
        )
    }
}

impl Wire for PckCacheEntry {
    fn encode(&self, w: &mut Writer) {
        w.put_fixed(&self.platform_id);
        self.pck_cert.encode(w);
        w.put_bytes(&self.org_signature);
    }

    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(PckCacheEntry {
            platform_id: r.get_fixed()?,
            pck_cert: BlindCert::decode(r)?,
            org_signature: r.get_bytes()?,
        })
    }
}

/// Signs PCK certificates with the org master key held in the admin vault.
pub fn sign_pck_cache(
    drafts: &[([u8; PLATFORM_ID_LEN], BlindCert)],
    admin_vault: &crate::keyvault::Vault,
    msk_handle: u64,
    pin: &[u8],
) -> Result<Vec<PckCacheEntry>, crate::keyvault::VaultError> {
    let mut out = Vec::with_capacity(drafts.len());
    for (platform_id, pck_cert) in drafts {
        let payload = PckCacheEntry::signing_payload(platform_id, pck_cert);
        let org_signature = admin_vault.sign(msk_handle, &payload, pin)?;
        out.push(PckCacheEntry {
            platform_id: *platform_id,
            pck_cert: pck_cert.clone(),
            org_signature,
        });
    }
    Ok(out)
}

/// The cache server's state: one entry per platform.
#[derive(Default)]
pub struct PckCache {
    entries: HashMap<[u8; PLATFORM_ID_LEN], PckCacheEntry>,
}

impl PckCache {
    pub fn new(entries: Vec<PckCacheEntry>) -> Self {
        let mut map = HashMap::new();
        for e in entries {
            map.insert(e.platform_id, e);
        }
        PckCache { entries: map }
    }

    pub fn lookup(&self, platform_id: &[u8; PLATFORM_ID_LEN]) -> Option<&PckCacheEntry> {
        self.entries.get(platform_id)
    }

    pub fn insert(&mut self, entry: PckCacheEntry) {
        self.entries.insert(entry.platform_id, entry);
    }

    pub fn save(&self, path: &Path) -> Result<(), AttestError> {
        let mut w = Writer::new();
        w.put_fixed(PCK_CACHE_MAGIC);
        let mut ids: Vec<_> = self.entries.keys().collect();
        ids.sort();
        w.put_u32(ids.len() as u32);
        for id in ids {
            self.entries[id].encode(&mut w);
        }
        Ok(std::fs::write(path, w.finish())?)
    }

    pub fn load(path: &Path) -> Result<Self, AttestError> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader::new(&bytes);
        if r.get_fixed::<8>()? != *PCK_CACHE_MAGIC {
            return Err(AttestError::Malformed(WireError::BadMagic));
        }
        let n = r.get_u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            entries.push(PckCacheEntry::decode(&mut r)?);
        }
        r.expect_end().map_err(AttestError::Malformed)?;
        Ok(PckCache::new(entries))
    }
}

/// Client-side acceptance of a fetched entry: the org signature must verify
/// under the installed master public key. Rogue entries fail here, before
/// any quote exchange.
pub fn accept_pck_entry(entry: &PckCacheEntry, mpk: &PublicKeyBytes) -> bool {
    entry.verify(mpk)
}

// --- Manufacturer fixture ---

/// Test-fixture stand-in for the CPU manufacturer: owns the root key, issues
/// PCK certificates for platforms. In production configs the private half is
/// used once at provisioning time and discarded.
pub struct ManufacturerRoot {
    pub cert: BlindCert,
    root_private: SecretBytes,
}

impl ManufacturerRoot {
    const KEY_MAGIC: &'static [u8; 8] = b"BFROOTK1";

    /// Fixture persistence: the root private key file exists only in the
    /// provisioning tool's working directory, never on nodes.
    pub fn save_key(&self, path: &Path) -> Result<(), AttestError> {
        let mut w = Writer::new();
        w.put_fixed(Self::KEY_MAGIC);
        w.put_bytes(self.root_private.expose());
        Ok(std::fs::write(path, w.finish())?)
    }

    pub fn load(cert_path: &Path, key_path: &Path) -> Result<Self, AttestError> {
        let cert = crate::certkit::load_cert(cert_path)
            .map_err(|e| AttestError::Io(std::io::Error::other(e.to_string())))?;
        let bytes = std::fs::read(key_path)?;
        let mut r = Reader::new(&bytes);
        if r.get_fixed::<8>()? != *Self::KEY_MAGIC {
            return Err(AttestError::Malformed(WireError::BadMagic));
        }
        let root_private = SecretBytes::new(r.get_bytes()?);
        r.expect_end().map_err(AttestError::Malformed)?;
        Ok(ManufacturerRoot { cert, root_private })
    }

    pub fn generate() -> Self {
        let (public, private) = crypto::generate_keypair(KeyAlgorithm::EcdsaP256).unwrap();
        let cert = certkit::build_cert_with_key(
            CertParams {
                subject: MANUFACTURER_ROOT_SUBJECT.to_string(),
                issuer: MANUFACTURER_ROOT_SUBJECT.to_string(),
                validity: Validity::starting_now(certkit::CA_VALIDITY_SECS),
                subject_public_key: PublicKeyBytes {
                    alg: KeyAlgorithm::EcdsaP256,
                    bytes: public,
                },
                extensions: Default::default(),
            },
            KeyAlgorithm::EcdsaP256,
            private.expose(),
        )
        .expect("root cert build");
        ManufacturerRoot {
            cert,
            root_private: private,
        }
    }

    pub fn issue_pck_cert(&self, platform: &PlatformSecret) -> BlindCert {
        certkit::build_cert_with_key(
            CertParams {
                subject: format!("bf-pck:{}", hex::encode(platform.platform_id())),
                issuer: self.cert.subject.clone(),
                validity: Validity::starting_now(certkit::CA_VALIDITY_SECS),
                subject_public_key: pck_public_for_platform(platform),
                extensions: Default::default(),
            },
            KeyAlgorithm::EcdsaP256,
            self.root_private.expose(),
        )
        .expect("pck cert build")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::soft_tee::{measure_enclave, Measurement};

    pub(crate) struct TestPlatform {
        pub tee: TeeContext,
        pub keys: AttestationKeys,
    }

    pub(crate) fn platform_with(
        image: &[u8],
        svn: u16,
        group: Option<&EpidGroup>,
        root: Option<&ManufacturerRoot>,
    ) -> TestPlatform {
        let secret = PlatformSecret::generate();
        let measurement: Measurement = measure_enclave(image)
            .unwrap()
            .with_signer(b"test-signer")
            .with_versions(svn, svn);
        let pck_cert = root.map(|r| r.issue_pck_cert(&secret));
        let keys = AttestationKeys::new(
            &secret,
            group.map(|g| g.member_key()),
            pck_cert,
            root.map(|r| r.cert.clone()),
        )
        .unwrap();
        TestPlatform {
            tee: TeeContext::new(secret, measurement),
            keys,
        }
    }

    fn policy<'a>(mr: &'a [Hash]) -> QuotePolicy<'a> {
        QuotePolicy {
            expected_mrenclave: mr,
            min_svn: 0,
            min_tcb: 0,
        }
    }

    #[test]
    fn ecdsa_quote_verifies_offline() {
        let root = ManufacturerRoot::generate();
        let p = platform_with(b"image", 1, None, Some(&root));
        let quote = generate_quote(b"bound data", QuoteType::Ecdsa, &p.tee, &p.keys).unwrap();
        let mr = [p.tee.measurement().mrenclave];
        verify_quote(
            &quote,
            b"bound data",
            &QuoteAuthority::EcdsaRoot(&root.cert),
            &policy(&mr),
            crate::unix_now(),
        )
        .unwrap();
    }

    #[test]
    fn ecdsa_chain_validates_via_independent_chain_walk() {
        let root = ManufacturerRoot::generate();
        let p = platform_with(b"image", 1, None, Some(&root));
        let quote = generate_quote(b"x", QuoteType::Ecdsa, &p.tee, &p.keys).unwrap();
        let chain = quote.pck_chain.as_ref().unwrap();
        assert_eq!(chain.len(), 3);
        certkit::verify_chain(
            chain,
            Some(&root.cert),
            crate::unix_now(),
            &RevocationList::empty(),
        )
        .unwrap();
        // ak cert is issued by the pck cert, pck by the root
        assert_eq!(chain[0].issuer, chain[1].subject);
        assert_eq!(chain[1].issuer, MANUFACTURER_ROOT_SUBJECT);
    }

    #[test]
    fn epid_quote_requires_the_service() {
        let group = EpidGroup::generate();
        let root = ManufacturerRoot::generate();
        let p = platform_with(b"image", 1, Some(&group), None);
        let quote = generate_quote(b"x", QuoteType::Epid, &p.tee, &p.keys).unwrap();
        let mr = [p.tee.measurement().mrenclave];
        let err = verify_quote(
            &quote,
            b"x",
            &QuoteAuthority::EcdsaRoot(&root.cert),
            &policy(&mr),
            crate::unix_now(),
        )
        .unwrap_err();
        assert_eq!(err, QuoteRejection::VerificationServiceRequired);
    }

    #[test]
    fn epid_quote_accepted_via_service_report() {
        let group = EpidGroup::generate();
        let mut ias = IasService::generate();
        ias.install_group(group.group_id, group.verifier.clone());
        let p = platform_with(b"image", 1, Some(&group), None);
        let quote = generate_quote(b"payload", QuoteType::Epid, &p.tee, &p.keys).unwrap();

        let avr = ias.ias_verify(&quote).unwrap();
        assert_eq!(avr.verdict, AvVerdict::Ok);

        let mr = [p.tee.measurement().mrenclave];
        verify_quote(
            &quote,
            b"payload",
            &QuoteAuthority::EpidReport {
                avr: &avr,
                service_key: ias.service_public_key(),
            },
            &policy(&mr),
            crate::unix_now(),
        )
        .unwrap();
    }

    #[test]
    fn ias_flipped_signature_byte_is_rejected() {
        let group = EpidGroup::generate();
        let mut ias = IasService::generate();
        ias.install_group(group.group_id, group.verifier.clone());
        let p = platform_with(b"image", 1, Some(&group), None);
        let mut quote = generate_quote(b"d", QuoteType::Epid, &p.tee, &p.keys).unwrap();
        let last = quote.signature.len() - 1;
        quote.signature[last] ^= 0x01;
        let avr = ias.ias_verify(&quote).unwrap();
        assert_eq!(avr.verdict, AvVerdict::SignatureInvalid);
    }

    #[test]
    fn ias_rejects_non_epid_quotes() {
        let root = ManufacturerRoot::generate();
        let ias = IasService::generate();
        let p = platform_with(b"image", 1, None, Some(&root));
        let quote = generate_quote(b"d", QuoteType::Ecdsa, &p.tee, &p.keys).unwrap();
        assert!(matches!(
            ias.ias_verify(&quote),
            Err(AttestError::WrongQuoteType)
        ));
    }

    #[test]
    fn report_from_wrong_service_key_is_rejected_by_clients() {
        let group = EpidGroup::generate();
        let mut ias_a = IasService::generate();
        ias_a.install_group(group.group_id, group.verifier.clone());
        let mut ias_b = IasService::generate();
        ias_b.install_group(group.group_id, group.verifier.clone());

        let p = platform_with(b"image", 1, Some(&group), None);
        let quote = generate_quote(b"d", QuoteType::Epid, &p.tee, &p.keys).unwrap();
        let avr = ias_b.ias_verify(&quote).unwrap();

        // client trusts service A; a verdict signed by service B fails
        let mr = [p.tee.measurement().mrenclave];
        let err = verify_quote(
            &quote,
            b"d",
            &QuoteAuthority::EpidReport {
                avr: &avr,
                service_key: ias_a.service_public_key(),
            },
            &policy(&mr),
            crate::unix_now(),
        )
        .unwrap_err();
        assert_eq!(err, QuoteRejection::SignatureInvalid);
    }

    /// Four-check completeness: for each check there is a mutation that
    /// fails exactly that check while the earlier ones pass.
    #[test]
    fn each_check_can_fail_in_isolation() {
        let root = ManufacturerRoot::generate();
        let p = platform_with(b"expected image", 5, None, Some(&root));
        let other = platform_with(b"modified image", 5, None, Some(&root));
        let now = crate::unix_now();
        let mr_expected = [p.tee.measurement().mrenclave];
        let authority = QuoteAuthority::EcdsaRoot(&root.cert);

        // signature: flip a signature byte
        let mut q = generate_quote(b"d", QuoteType::Ecdsa, &p.tee, &p.keys).unwrap();
        q.signature[10] ^= 0xff;
        assert_eq!(
            verify_quote(&q, b"d", &authority, &policy(&mr_expected), now),
            Err(QuoteRejection::SignatureInvalid)
        );

        // report_data: expected data differs by one byte
        let q = generate_quote(b"d", QuoteType::Ecdsa, &p.tee, &p.keys).unwrap();
        assert_eq!(
            verify_quote(&q, b"e", &authority, &policy(&mr_expected), now),
            Err(QuoteRejection::ReportDataMismatch)
        );

        // mrenclave: honestly generated quote from a different build
        let q = generate_quote(b"d", QuoteType::Ecdsa, &other.tee, &other.keys).unwrap();
        assert_eq!(
            verify_quote(&q, b"d", &authority, &policy(&mr_expected), now),
            Err(QuoteRejection::MrenclaveMismatch)
        );

        // svn: caller raises the floor above the quote's svn
        let q = generate_quote(b"d", QuoteType::Ecdsa, &p.tee, &p.keys).unwrap();
        let strict = QuotePolicy {
            expected_mrenclave: &mr_expected,
            min_svn: 6,
            min_tcb: 0,
        };
        assert_eq!(
            verify_quote(&q, b"d", &authority, &strict, now),
            Err(QuoteRejection::TcbOutdated)
        );
    }

    /// Binding soundness: accepting the same quote for two datas implies the
    /// datas hash identically (i.e. you cannot construct d != d' that both pass).
    #[test]
    fn report_data_binding_is_sound() {
        let root = ManufacturerRoot::generate();
        let p = platform_with(b"image", 1, None, Some(&root));
        let q = generate_quote(b"data-1", QuoteType::Ecdsa, &p.tee, &p.keys).unwrap();
        let mr = [p.tee.measurement().mrenclave];
        let authority = QuoteAuthority::EcdsaRoot(&root.cert);
        let now = crate::unix_now();
        assert!(verify_quote(&q, b"data-1", &authority, &policy(&mr), now).is_ok());
        assert!(verify_quote(&q, b"data-2", &authority, &policy(&mr), now).is_err());
        assert_eq!(bind_report_data(b"data-1"), q.report.report_data);
    }

    #[test]
    fn quote_serialization_roundtrip() {
        let root = ManufacturerRoot::generate();
        let p = platform_with(b"image", 3, None, Some(&root));
        let q = generate_quote(b"rt", QuoteType::Ecdsa, &p.tee, &p.keys).unwrap();
        let bytes = q.to_bytes();
        let parsed = Quote::from_bytes(&bytes).unwrap();
        assert_eq!(parsed, q);
        assert_eq!(parsed.to_bytes(), bytes);
        assert_eq!(parsed.hash(), q.hash());
    }

    #[test]
    fn pck_entry_signature_covers_platform_id() {
        // direct raw-key signing here; the vault-backed path is covered in
        // the keyvault and protocol tests
        let root = ManufacturerRoot::generate();
        let platform = PlatformSecret::generate();
        let pck_cert = root.issue_pck_cert(&platform);
        let (mpk_bytes, msk) = crypto::generate_keypair(KeyAlgorithm::EcdsaP256).unwrap();
        let mpk = PublicKeyBytes {
            alg: KeyAlgorithm::EcdsaP256,
            bytes: mpk_bytes,
        };
        let payload = PckCacheEntry::signing_payload(&platform.platform_id(), &pck_cert);
        let mut entry = PckCacheEntry {
            platform_id: platform.platform_id(),
            pck_cert,
            org_signature: crypto::sign(KeyAlgorithm::EcdsaP256, msk.expose(), &payload).unwrap(),
        };
        assert!(entry.verify(&mpk));

        entry.platform_id[0] ^= 1;
        assert!(!entry.verify(&mpk));
    }

    #[test]
    fn epid_member_key_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let group = EpidGroup::generate();
        let path = dir.path().join("epid.key");
        group.member_key().save(&path).unwrap();
        let loaded = EpidMemberKey::load(&path).unwrap();
        assert_eq!(loaded.group_id, group.group_id);
        assert_eq!(
            loaded.signing_key.expose(),
            group.member_private.expose()
        );
    }

    #[test]
    fn ias_state_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let group = EpidGroup::generate();
        let mut ias = IasService::generate();
        ias.install_group(group.group_id, group.verifier.clone());
        let path = dir.path().join("ias.bin");
        ias.save(&path).unwrap();
        let loaded = IasService::load(&path).unwrap();
        assert_eq!(loaded.service_public_key(), ias.service_public_key());

        let p = platform_with(b"image", 1, Some(&group), None);
        let quote = generate_quote(b"d", QuoteType::Epid, &p.tee, &p.keys).unwrap();
        assert_eq!(loaded.ias_verify(&quote).unwrap().verdict, AvVerdict::Ok);
    }

    #[test]
    fn revoked_group_yields_group_revoked() {
        let group = EpidGroup::generate();
        let mut ias = IasService::generate();
        ias.install_group(group.group_id, group.verifier.clone());
        ias.revoke_group(&group.group_id);
        let p = platform_with(b"image", 1, Some(&group), None);
        let quote = generate_quote(b"d", QuoteType::Epid, &p.tee, &p.keys).unwrap();
        assert_eq!(
            ias.ias_verify(&quote).unwrap().verdict,
            AvVerdict::GroupRevoked
        );
    }

    #[test]
    fn missing_material_errors() {
        let p = platform_with(b"image", 1, None, None);
        assert!(matches!(
            generate_quote(b"d", QuoteType::Ecdsa, &p.tee, &p.keys),
            Err(AttestError::PckUnavailable)
        ));
        assert!(matches!(
            generate_quote(b"d", QuoteType::Epid, &p.tee, &p.keys),
            Err(AttestError::EpidUnavailable)
        ));
    }
}

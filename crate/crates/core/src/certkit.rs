//! Simplified certificates and signing requests with a quote-embedding
//! extension.
//!
//! Certificates here are deliberately not X.509/DER: the canonical binary
//! serialization of every field except the signature is the exact signed
//! payload, which keeps issuance and verification deterministic. A base64
//! armor is provided for files and copy-paste.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::attestation::{self, Quote, QuoteAuthority, QuotePolicy, QuoteRejection};
use crate::crypto::{self, CryptoError, Hash, PublicKeyBytes, SigAlgorithm};
use crate::keyvault::{Vault, VaultError};
use crate::wire::{self, Reader, Wire, WireError, Writer};

/// Extension key carrying a serialized [`Quote`] that binds the certificate's
/// subject public key. A registered OID would replace this in a real PKI.
pub const EXT_QUOTE: &str = "bf-quote";

pub const CA_VALIDITY_SECS: u64 = 10 * 365 * 86_400;
pub const LEAF_VALIDITY_SECS: u64 = 90 * 86_400;

#[derive(Debug, Error)]
pub enum CertError {
    #[error("CSR proof-of-possession invalid")]
    BadCsr,
    #[error("certificate has no quote extension")]
    MissingQuoteExtension,
    #[error("quote rejected: {0}")]
    Quote(QuoteRejection),
    #[error("validity period is empty")]
    EmptyValidity,
    #[error("unsupported key type for signing")]
    UnsupportedKey,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("malformed certificate structure: {0}")]
    Malformed(#[from] WireError),
    #[error("bad armor: {0}")]
    BadArmor(String),
    #[error(transparent)]
    Vault(#[from] VaultError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Why a certificate failed verification against its issuer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertInvalid {
    Signature,
    IssuerMismatch,
    Expired,
    Revoked,
    UntrustedRoot,
}

impl std::fmt::Display for CertInvalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CertInvalid::Signature => "SIGNATURE",
            CertInvalid::IssuerMismatch => "ISSUER_MISMATCH",
            CertInvalid::Expired => "EXPIRED",
            CertInvalid::Revoked => "REVOKED",
            CertInvalid::UntrustedRoot => "UNTRUSTED_ROOT",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Validity {
    pub not_before: u64,
    pub not_after: u64,
}

impl Validity {
    pub fn starting_now(duration_secs: u64) -> Self {
        let now = crate::unix_now();
        Validity {
            not_before: now,
            not_after: now + duration_secs,
        }
    }

    pub fn contains(&self, t: u64) -> bool {
        self.not_before <= t && t <= self.not_after
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlindCert {
    pub serial: [u8; 16],
    pub subject: String,
    pub issuer: String,
    pub not_before: u64,
    pub not_after: u64,
    pub sig_algorithm: SigAlgorithm,
    pub subject_public_key: PublicKeyBytes,
    pub extensions: BTreeMap<String, Vec<u8>>,
    pub signature: Vec<u8>,
}

impl BlindCert {
    /// The exact signed payload: every field except the signature.
    pub fn tbs_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_fixed(&self.serial);
        w.put_str(&self.subject);
        w.put_str(&self.issuer);
        w.put_u64(self.not_before);
        w.put_u64(self.not_after);
        w.put_u8(self.sig_algorithm.tag());
        self.subject_public_key.encode(&mut w);
        wire::encode_str_map(&mut w, &self.extensions);
        w.finish()
    }

    pub fn is_self_signed(&self) -> bool {
        self.issuer == self.subject
            && crypto::verify_with(&self.subject_public_key, &self.tbs_bytes(), &self.signature)
    }

    pub fn validity(&self) -> Validity {
        Validity {
            not_before: self.not_before,
            not_after: self.not_after,
        }
    }

    pub fn quote_extension(&self) -> Result<Quote, CertError> {
        let raw = self
            .extensions
            .get(EXT_QUOTE)
            .ok_or(CertError::MissingQuoteExtension)?;
        Ok(Quote::from_bytes(raw)?)
    }
}

impl Wire for BlindCert {
    fn encode(&self, w: &mut Writer) {
        w.put_fixed(&self.serial);
        w.put_str(&self.subject);
        w.put_str(&self.issuer);
        w.put_u64(self.not_before);
        w.put_u64(self.not_after);
        w.put_u8(self.sig_algorithm.tag());
        self.subject_public_key.encode(w);
        wire::encode_str_map(w, &self.extensions);
        w.put_bytes(&self.signature);
    }

    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(BlindCert {
            serial: r.get_fixed()?,
            subject: r.get_str()?,
            issuer: r.get_str()?,
            not_before: r.get_u64()?,
            not_after: r.get_u64()?,
            sig_algorithm: SigAlgorithm::from_tag(r.get_u8()?)?,
            subject_public_key: PublicKeyBytes::decode(r)?,
            extensions: wire::decode_str_map(r)?,
            signature: r.get_bytes()?,
        })
    }
}

/// Everything an issuer fills in before signing.
pub struct CertParams {
    pub subject: String,
    pub issuer: String,
    pub validity: Validity,
    pub subject_public_key: PublicKeyBytes,
    pub extensions: BTreeMap<String, Vec<u8>>,
}

impl CertParams {
    /// Assembles and signs a certificate. `sign_fn` receives the exact
    /// to-be-signed bytes; vault-backed and raw-key issuers both go
    /// through here.
    pub fn build<E, F>(self, sig_algorithm: SigAlgorithm, sign_fn: F) -> Result<BlindCert, CertError>
    where
        F: FnOnce(&[u8]) -> Result<Vec<u8>, E>,
        CertError: From<E>,
    {
        if self.validity.not_before >= self.validity.not_after {
            return Err(CertError::EmptyValidity);
        }
        let mut cert = BlindCert {
            serial: crypto::random_bytes(),
            subject: self.subject,
            issuer: self.issuer,
            not_before: self.validity.not_before,
            not_after: self.validity.not_after,
            sig_algorithm,
            subject_public_key: self.subject_public_key,
            extensions: self.extensions,
            signature: Vec::new(),
        };
        cert.signature = sign_fn(&cert.tbs_bytes())?;
        Ok(cert)
    }
}

/// Signs a certificate with a raw private key (fixture tooling and the
/// local PCE path; operational issuance goes through a vault).
pub fn build_cert_with_key(
    params: CertParams,
    key_alg: crypto::KeyAlgorithm,
    private: &[u8],
) -> Result<BlindCert, CertError> {
    let sig_alg = key_alg.sig_algorithm().ok_or(CertError::UnsupportedKey)?;
    params.build(sig_alg, |tbs| crypto::sign(key_alg, private, tbs))
}

pub fn verify_cert(child: &BlindCert, parent: &BlindCert, now: u64) -> Result<(), CertInvalid> {
    if child.issuer != parent.subject {
        return Err(CertInvalid::IssuerMismatch);
    }
    if !child.validity().contains(now) {
        return Err(CertInvalid::Expired);
    }
    if child.sig_algorithm
        != parent
            .subject_public_key
            .alg
            .sig_algorithm()
            .unwrap_or(SigAlgorithm::EcdsaP256Sha256)
    {
        return Err(CertInvalid::Signature);
    }
    if !crypto::verify_with(&parent.subject_public_key, &child.tbs_bytes(), &child.signature) {
        return Err(CertInvalid::Signature);
    }
    Ok(())
}

/// Static local revocation list keyed by certificate serial.
#[derive(Debug, Default, Clone)]
pub struct RevocationList {
    serials: std::collections::BTreeSet<[u8; 16]>,
}

impl RevocationList {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn revoke(&mut self, serial: [u8; 16]) {
        self.serials.insert(serial);
    }

    pub fn is_revoked(&self, serial: &[u8; 16]) -> bool {
        self.serials.contains(serial)
    }

    /// One lowercase hex serial per line; blank lines and `#` comments allowed.
    pub fn load(path: &std::path::Path) -> Result<Self, CertError> {
        let text = std::fs::read_to_string(path)?;
        let mut list = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let raw = hex::decode(line)
                .map_err(|e| CertError::BadArmor(format!("bad serial hex: {e}")))?;
            let serial: [u8; 16] = raw
                .try_into()
                .map_err(|_| CertError::BadArmor("serial must be 16 bytes".into()))?;
            list.revoke(serial);
        }
        Ok(list)
    }
}

#[derive(Debug)]
pub struct ChainFailure {
    pub index: usize,
    pub reason: CertInvalid,
}

impl std::fmt::Display for ChainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "chain invalid at depth {}: {}", self.index, self.reason)
    }
}

/// Walks a leaf-first chain: each link verifies against its parent, the
/// chain ends in a self-signed certificate (matching `trust_anchor` when
/// given), and no certificate is revoked.
pub fn verify_chain(
    chain: &[BlindCert],
    trust_anchor: Option<&BlindCert>,
    now: u64,
    revoked: &RevocationList,
) -> Result<(), ChainFailure> {
    if chain.is_empty() {
        return Err(ChainFailure {
            index: 0,
            reason: CertInvalid::UntrustedRoot,
        });
    }
    for (i, cert) in chain.iter().enumerate() {
        if revoked.is_revoked(&cert.serial) {
            return Err(ChainFailure {
                index: i,
                reason: CertInvalid::Revoked,
            });
        }
    }
    for i in 0..chain.len() - 1 {
        verify_cert(&chain[i], &chain[i + 1], now)
            .map_err(|reason| ChainFailure { index: i, reason })?;
    }
    let root = chain.last().unwrap();
    if !root.is_self_signed() || !root.validity().contains(now) {
        return Err(ChainFailure {
            index: chain.len() - 1,
            reason: CertInvalid::UntrustedRoot,
        });
    }
    if let Some(anchor) = trust_anchor {
        if anchor.to_bytes() != root.to_bytes() {
            return Err(ChainFailure {
                index: chain.len() - 1,
                reason: CertInvalid::UntrustedRoot,
            });
        }
    }
    Ok(())
}

// --- CSR ---

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    pub subject: String,
    pub public_key: PublicKeyBytes,
    pub self_signature: Vec<u8>,
}

impl Csr {
    pub fn signing_payload(subject: &str, public_key: &PublicKeyBytes) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_str(subject);
        public_key.encode(&mut w);
        w.finish()
    }

    /// Proof of possession: the request is signed by the requested key itself.
    pub fn verify_pop(&self) -> bool {
        crypto::verify_with(
            &self.public_key,
            &Self::signing_payload(&self.subject, &self.public_key),
            &self.self_signature,
        )
    }
}

impl Wire for Csr {
    fn encode(&self, w: &mut Writer) {
        w.put_str(&self.subject);
        self.public_key.encode(w);
        w.put_bytes(&self.self_signature);
    }

    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(Csr {
            subject: r.get_str()?,
            public_key: PublicKeyBytes::decode(r)?,
            self_signature: r.get_bytes()?,
        })
    }
}

// --- Vault-backed operations ---

/// Generates a key pair in the vault and returns a signed CSR plus a quote
/// binding the new public key.
pub fn gen_csr(
    vault: &Vault,
    subject: &str,
    pin: &[u8],
    algorithm: crypto::KeyAlgorithm,
    quote_type: attestation::QuoteType,
) -> Result<(Csr, u64, Quote), CertError> {
    let (handle, public_part, quote) = vault.generate_keypair(algorithm, subject, pin, quote_type)?;
    let public_key = PublicKeyBytes {
        alg: algorithm,
        bytes: public_part,
    };
    let payload = Csr::signing_payload(subject, &public_key);
    let self_signature = vault.sign(handle, &payload, pin)?;
    Ok((
        Csr {
            subject: subject.to_string(),
            public_key,
            self_signature,
        },
        handle,
        quote,
    ))
}

/// Issues a certificate for a CSR, signing with a vault-resident issuer key.
/// `embed_quote` places the requester's quote in the issued certificate so
/// downstream peers can re-check custody of the subject key.
pub fn issue_cert(
    csr: &Csr,
    issuer_cert: &BlindCert,
    issuer_vault: &Vault,
    issuer_handle: u64,
    validity: Validity,
    pin: &[u8],
    embed_quote: Option<&Quote>,
) -> Result<BlindCert, CertError> {
    if !csr.verify_pop() {
        return Err(CertError::BadCsr);
    }
    let mut extensions = BTreeMap::new();
    if let Some(q) = embed_quote {
        extensions.insert(EXT_QUOTE.to_string(), q.to_bytes());
    }
    let sig_alg = issuer_cert
        .subject_public_key
        .alg
        .sig_algorithm()
        .ok_or(CertError::UnsupportedKey)?;
    CertParams {
        subject: csr.subject.clone(),
        issuer: issuer_cert.subject.clone(),
        validity,
        subject_public_key: csr.public_key.clone(),
        extensions,
    }
    .build(sig_alg, |tbs| issuer_vault.sign(issuer_handle, tbs, pin))
}

/// Creates a key pair in the vault and self-signs a certificate for it,
/// optionally embedding a quote that attests to the key generation.
pub fn self_sign(
    subject: &str,
    vault: &Vault,
    pin: &[u8],
    algorithm: crypto::KeyAlgorithm,
    validity: Validity,
    embed_quote: Option<attestation::QuoteType>,
) -> Result<(BlindCert, u64), CertError> {
    let sig_alg = algorithm.sig_algorithm().ok_or(CertError::UnsupportedKey)?;
    let quote_type = embed_quote.unwrap_or(attestation::QuoteType::Epid);
    let (handle, public_part, quote) =
        vault.generate_keypair(algorithm, subject, pin, quote_type)?;
    let mut extensions = BTreeMap::new();
    if embed_quote.is_some() {
        extensions.insert(EXT_QUOTE.to_string(), quote.to_bytes());
    }
    let cert = CertParams {
        subject: subject.to_string(),
        issuer: subject.to_string(),
        validity,
        subject_public_key: PublicKeyBytes {
            alg: algorithm,
            bytes: public_part,
        },
        extensions,
    }
    .build(sig_alg, |tbs| vault.sign(handle, tbs, pin))?;
    Ok((cert, handle))
}

/// The two issuance-time inspection checks plus quote verification: the
/// embedded quote must carry the expected enclave measurement and must bind
/// exactly the certificate's subject public key.
pub fn inspect_cert_quote(
    cert: &BlindCert,
    authority: &QuoteAuthority,
    policy: &QuotePolicy,
    now: u64,
) -> Result<(), CertError> {
    let quote = cert.quote_extension()?;
    attestation::verify_quote(
        &quote,
        &cert.subject_public_key.to_bytes(),
        authority,
        policy,
        now,
    )
    .map_err(CertError::Quote)
}

// --- Armor and file IO ---

const CERT_ARMOR: &str = "BLINDCERT";
const CSR_ARMOR: &str = "BLINDCERT REQUEST";
const QUOTE_ARMOR: &str = "BFQUOTE";

fn armor(label: &str, data: &[u8]) -> String {
    use base64::Engine as _;
    let b64 = base64::engine::general_purpose::STANDARD.encode(data);
    let mut out = format!("-----BEGIN {label}-----\n");
    for chunk in b64.as_bytes().chunks(64) {
        out.push_str(std::str::from_utf8(chunk).unwrap());
        out.push('\n');
    }
    out.push_str(&format!("-----END {label}-----\n"));
    out
}

fn dearmor(label: &str, text: &str) -> Result<Vec<u8>, CertError> {
    use base64::Engine as _;
    let begin = format!("-----BEGIN {label}-----");
    let end = format!("-----END {label}-----");
    let mut inside = false;
    let mut b64 = String::new();
    for line in text.lines() {
        let line = line.trim();
        if line == begin {
            inside = true;
        } else if line == end {
            return base64::engine::general_purpose::STANDARD
                .decode(&b64)
                .map_err(|e| CertError::BadArmor(e.to_string()));
        } else if inside {
            b64.push_str(line);
        }
    }
    Err(CertError::BadArmor(format!("missing {label} armor")))
}

pub fn cert_to_armor(cert: &BlindCert) -> String {
    armor(CERT_ARMOR, &cert.to_bytes())
}

pub fn cert_from_armor(text: &str) -> Result<BlindCert, CertError> {
    Ok(BlindCert::from_bytes(&dearmor(CERT_ARMOR, text)?)?)
}

pub fn csr_to_armor(csr: &Csr) -> String {
    armor(CSR_ARMOR, &csr.to_bytes())
}

pub fn csr_from_armor(text: &str) -> Result<Csr, CertError> {
    Ok(Csr::from_bytes(&dearmor(CSR_ARMOR, text)?)?)
}

pub fn quote_to_armor(quote: &Quote) -> String {
    armor(QUOTE_ARMOR, &quote.to_bytes())
}

pub fn quote_from_armor(text: &str) -> Result<Quote, CertError> {
    Ok(Quote::from_bytes(&dearmor(QUOTE_ARMOR, text)?)?)
}

pub fn save_cert(cert: &BlindCert, path: &std::path::Path) -> Result<(), CertError> {
    Ok(std::fs::write(path, cert_to_armor(cert))?)
}

pub fn load_cert(path: &std::path::Path) -> Result<BlindCert, CertError> {
    cert_from_armor(&std::fs::read_to_string(path)?)
}

/// Hash of the canonical serialization; stable cert identifier.
pub fn cert_fingerprint(cert: &BlindCert) -> Hash {
    crypto::sha256(&cert.to_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyAlgorithm;

    fn raw_keypair(alg: KeyAlgorithm) -> (PublicKeyBytes, crypto::SecretBytes) {
        let (public, private) = crypto::generate_keypair(alg).unwrap();
        (PublicKeyBytes { alg, bytes: public }, private)
    }

    fn self_signed_raw(
        subject: &str,
        alg: KeyAlgorithm,
        validity: Validity,
    ) -> (BlindCert, crypto::SecretBytes) {
        let (public, private) = raw_keypair(alg);
        let cert = build_cert_with_key(
            CertParams {
                subject: subject.into(),
                issuer: subject.into(),
                validity,
                subject_public_key: public,
                extensions: BTreeMap::new(),
            },
            alg,
            private.expose(),
        )
        .unwrap();
        (cert, private)
    }

    fn issue_raw(
        subject: &str,
        alg: KeyAlgorithm,
        issuer: &BlindCert,
        issuer_alg: KeyAlgorithm,
        issuer_key: &crypto::SecretBytes,
        validity: Validity,
    ) -> (BlindCert, crypto::SecretBytes) {
        let (public, private) = raw_keypair(alg);
        let cert = build_cert_with_key(
            CertParams {
                subject: subject.into(),
                issuer: issuer.subject.clone(),
                validity,
                subject_public_key: public,
                extensions: BTreeMap::new(),
            },
            issuer_alg,
            issuer_key.expose(),
        )
        .unwrap();
        (cert, private)
    }

    fn ten_years() -> Validity {
        Validity::starting_now(CA_VALIDITY_SECS)
    }

    #[test]
    fn self_signed_verifies_against_itself() {
        let (cert, _) = self_signed_raw("root", KeyAlgorithm::EcdsaP256, ten_years());
        assert!(cert.is_self_signed());
        verify_cert(&cert, &cert, crate::unix_now()).unwrap();
    }

    #[test]
    fn tampered_subject_fails_signature() {
        let (root, root_key) = self_signed_raw("root", KeyAlgorithm::EcdsaP256, ten_years());
        let (mut leaf, _) = issue_raw(
            "leaf",
            KeyAlgorithm::EcdsaP256,
            &root,
            KeyAlgorithm::EcdsaP256,
            &root_key,
            ten_years(),
        );
        verify_cert(&leaf, &root, crate::unix_now()).unwrap();
        leaf.subject = "evil".into();
        assert_eq!(
            verify_cert(&leaf, &root, crate::unix_now()),
            Err(CertInvalid::Signature)
        );
    }

    #[test]
    fn expired_cert_reports_expired() {
        let (root, root_key) = self_signed_raw("root", KeyAlgorithm::EcdsaP256, ten_years());
        let (leaf, _) = issue_raw(
            "leaf",
            KeyAlgorithm::EcdsaP256,
            &root,
            KeyAlgorithm::EcdsaP256,
            &root_key,
            Validity {
                not_before: 1_000,
                not_after: 2_000,
            },
        );
        assert_eq!(verify_cert(&leaf, &root, 1_500), Ok(()));
        assert_eq!(verify_cert(&leaf, &root, 3_000), Err(CertInvalid::Expired));
        assert_eq!(verify_cert(&leaf, &root, 500), Err(CertInvalid::Expired));
    }

    #[test]
    fn issuer_mismatch_is_reported() {
        let (root, _) = self_signed_raw("root", KeyAlgorithm::EcdsaP256, ten_years());
        let (other, other_key) = self_signed_raw("other", KeyAlgorithm::EcdsaP256, ten_years());
        let (leaf, _) = issue_raw(
            "leaf",
            KeyAlgorithm::EcdsaP256,
            &other,
            KeyAlgorithm::EcdsaP256,
            &other_key,
            ten_years(),
        );
        assert_eq!(
            verify_cert(&leaf, &root, crate::unix_now()),
            Err(CertInvalid::IssuerMismatch)
        );
    }

    /// A decoy parent carrying the right subject but a different key must
    /// fail with SIGNATURE.
    #[test]
    fn decoy_parent_same_subject_fails_signature() {
        let (root, root_key) = self_signed_raw("root", KeyAlgorithm::EcdsaP256, ten_years());
        let (decoy, _) = self_signed_raw("root", KeyAlgorithm::EcdsaP256, ten_years());
        let (leaf, _) = issue_raw(
            "leaf",
            KeyAlgorithm::EcdsaP256,
            &root,
            KeyAlgorithm::EcdsaP256,
            &root_key,
            ten_years(),
        );
        verify_cert(&leaf, &root, crate::unix_now()).unwrap();
        assert_eq!(
            verify_cert(&leaf, &decoy, crate::unix_now()),
            Err(CertInvalid::Signature)
        );
    }

    /// Depth-3 chain: website <- intermediate <- root, walked end to end and
    /// cross-checked with an independent verifier that re-implements the
    /// checks directly over crypto::verify.
    #[test]
    fn depth3_chain_walks_and_matches_independent_verifier() {
        let now = crate::unix_now();
        let (root, root_key) = self_signed_raw("root-ca", KeyAlgorithm::EcdsaP256, ten_years());
        let (inter, inter_key) = issue_raw(
            "intermediate-ca",
            KeyAlgorithm::EcdsaP256,
            &root,
            KeyAlgorithm::EcdsaP256,
            &root_key,
            ten_years(),
        );
        let (site, _) = issue_raw(
            "www.example.test",
            KeyAlgorithm::Rsa2048,
            &inter,
            KeyAlgorithm::EcdsaP256,
            &inter_key,
            Validity::starting_now(LEAF_VALIDITY_SECS),
        );

        let chain = vec![site.clone(), inter.clone(), root.clone()];
        verify_chain(&chain, Some(&root), now, &RevocationList::empty()).unwrap();

        // independent pass: raw signature checks, issuer links, windows
        for pair in chain.windows(2) {
            let (child, parent) = (&pair[0], &pair[1]);
            assert_eq!(child.issuer, parent.subject);
            assert!(child.not_before <= now && now <= child.not_after);
            assert!(crypto::verify(
                parent.subject_public_key.alg,
                &parent.subject_public_key.bytes,
                &child.tbs_bytes(),
                &child.signature
            ));
        }
        assert_eq!(root.issuer, root.subject);
        assert!(crypto::verify(
            root.subject_public_key.alg,
            &root.subject_public_key.bytes,
            &root.tbs_bytes(),
            &root.signature
        ));
    }

    #[test]
    fn revoked_chain_member_fails_with_revoked() {
        let now = crate::unix_now();
        let (root, root_key) = self_signed_raw("root", KeyAlgorithm::EcdsaP256, ten_years());
        let (leaf, _) = issue_raw(
            "leaf",
            KeyAlgorithm::EcdsaP256,
            &root,
            KeyAlgorithm::EcdsaP256,
            &root_key,
            ten_years(),
        );
        let chain = vec![leaf.clone(), root.clone()];
        let mut revoked = RevocationList::empty();
        revoked.revoke(leaf.serial);
        let err = verify_chain(&chain, Some(&root), now, &revoked).unwrap_err();
        assert_eq!(err.reason, CertInvalid::Revoked);
        assert_eq!(err.index, 0);
    }

    #[test]
    fn chain_without_self_signed_root_is_untrusted() {
        let now = crate::unix_now();
        let (root, root_key) = self_signed_raw("root", KeyAlgorithm::EcdsaP256, ten_years());
        let (mid, _) = issue_raw(
            "mid",
            KeyAlgorithm::EcdsaP256,
            &root,
            KeyAlgorithm::EcdsaP256,
            &root_key,
            ten_years(),
        );
        let err = verify_chain(&[mid], None, now, &RevocationList::empty()).unwrap_err();
        assert_eq!(err.reason, CertInvalid::UntrustedRoot);
    }

    #[test]
    fn empty_validity_rejected_at_build() {
        let (public, private) = raw_keypair(KeyAlgorithm::EcdsaP256);
        let err = build_cert_with_key(
            CertParams {
                subject: "x".into(),
                issuer: "x".into(),
                validity: Validity {
                    not_before: 100,
                    not_after: 100,
                },
                subject_public_key: public,
                extensions: BTreeMap::new(),
            },
            KeyAlgorithm::EcdsaP256,
            private.expose(),
        )
        .unwrap_err();
        assert!(matches!(err, CertError::EmptyValidity));
    }

    #[test]
    fn csr_pop_detects_wrong_key() {
        let (public, private) = raw_keypair(KeyAlgorithm::EcdsaP256);
        let (_, other_private) = raw_keypair(KeyAlgorithm::EcdsaP256);
        let payload = Csr::signing_payload("me", &public);
        let good = Csr {
            subject: "me".into(),
            public_key: public.clone(),
            self_signature: crypto::sign(KeyAlgorithm::EcdsaP256, private.expose(), &payload)
                .unwrap(),
        };
        assert!(good.verify_pop());

        let bad = Csr {
            self_signature: crypto::sign(
                KeyAlgorithm::EcdsaP256,
                other_private.expose(),
                &payload,
            )
            .unwrap(),
            ..good
        };
        assert!(!bad.verify_pop());
    }

    #[test]
    fn armor_roundtrip() {
        let (cert, _) = self_signed_raw("armored", KeyAlgorithm::EcdsaP256, ten_years());
        let text = cert_to_armor(&cert);
        assert!(text.starts_with("-----BEGIN BLINDCERT-----"));
        assert_eq!(cert_from_armor(&text).unwrap(), cert);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            /// serialize -> parse -> serialize is byte-identical.
            #[test]
            fn cert_serialization_is_stable(
                subject in "[a-z.]{1,24}",
                issuer in "[a-z.]{1,24}",
                nb in 0u64..u64::MAX / 2,
                dur in 1u64..10_000_000,
                ext_val in proptest::collection::vec(any::<u8>(), 0..64),
            ) {
                let (public, private) = raw_keypair(KeyAlgorithm::EcdsaP256);
                let mut extensions = BTreeMap::new();
                extensions.insert("zeta".to_string(), ext_val);
                extensions.insert("alpha".to_string(), vec![1, 2, 3]);
                let cert = build_cert_with_key(
                    CertParams {
                        subject,
                        issuer,
                        validity: Validity { not_before: nb, not_after: nb + dur },
                        subject_public_key: public,
                        extensions,
                    },
                    KeyAlgorithm::EcdsaP256,
                    private.expose(),
                ).unwrap();
                let bytes = cert.to_bytes();
                let parsed = BlindCert::from_bytes(&bytes).unwrap();
                prop_assert_eq!(&parsed, &cert);
                prop_assert_eq!(parsed.to_bytes(), bytes);
            }

            #[test]
            fn csr_serialization_is_stable(subject in "[a-z.]{1,24}") {
                let (public, private) = raw_keypair(KeyAlgorithm::EcdsaP256);
                let payload = Csr::signing_payload(&subject, &public);
                let csr = Csr {
                    subject,
                    public_key: public,
                    self_signature: crypto::sign(KeyAlgorithm::EcdsaP256, private.expose(), &payload).unwrap(),
                };
                let bytes = csr.to_bytes();
                let parsed = Csr::from_bytes(&bytes).unwrap();
                prop_assert_eq!(&parsed, &csr);
                prop_assert_eq!(parsed.to_bytes(), bytes);
            }
        }
    }
}

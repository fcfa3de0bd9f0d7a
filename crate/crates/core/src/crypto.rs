//! Cryptographic primitives behind the vault, attestation, and certificate
//! layers: RSA-2048 (OpenSSL-backed), ECDSA/ECDH on P-256, AES-256-GCM,
//! HKDF-SHA256 labeled derivation, and the post-handshake secure channel.
//!
//! Key material is passed around as canonical bytes (see [`crate::wire`]);
//! parsing into backend types happens at the call site of each operation.

use hmac::{Hmac, Mac};
use openssl::bn::BigNum;
use openssl::hash::MessageDigest;
use openssl::pkey::PKey;
use openssl::rsa::Rsa;
use p256::ecdsa::signature::{Signer as _, Verifier as _};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use p256::elliptic_curve::sec1::ToEncodedPoint;
use rand::RngCore;
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::wire::{Reader, Wire, WireError, Writer};

pub const HASH_LEN: usize = 32;
pub type Hash = [u8; HASH_LEN];

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("unsupported algorithm for this operation")]
    UnsupportedAlgorithm,
    #[error("malformed key material")]
    MalformedKey,
    #[error("point is not on the curve")]
    InvalidCurvePoint,
    #[error("AEAD open failed (ciphertext or tag invalid)")]
    AeadFailure,
    #[error("backend failure: {0}")]
    Backend(String),
}

impl From<openssl::error::ErrorStack> for CryptoError {
    fn from(e: openssl::error::ErrorStack) -> Self {
        CryptoError::Backend(e.to_string())
    }
}

/// Key algorithms supported by the vault.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum KeyAlgorithm {
    Rsa2048,
    EcdsaP256,
    EcdhP256,
}

impl KeyAlgorithm {
    pub fn tag(self) -> u8 {
        match self {
            KeyAlgorithm::Rsa2048 => 1,
            KeyAlgorithm::EcdsaP256 => 2,
            KeyAlgorithm::EcdhP256 => 3,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self, WireError> {
        match t {
            1 => Ok(KeyAlgorithm::Rsa2048),
            2 => Ok(KeyAlgorithm::EcdsaP256),
            3 => Ok(KeyAlgorithm::EcdhP256),
            _ => Err(WireError::BadTag(t as u16)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KeyAlgorithm::Rsa2048 => "rsa2048",
            KeyAlgorithm::EcdsaP256 => "ecdsa-p256",
            KeyAlgorithm::EcdhP256 => "ecdh-p256",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rsa2048" => Some(KeyAlgorithm::Rsa2048),
            "ecdsa-p256" => Some(KeyAlgorithm::EcdsaP256),
            "ecdh-p256" => Some(KeyAlgorithm::EcdhP256),
            _ => None,
        }
    }

    /// Signature scheme used when a key of this algorithm signs, if any.
    pub fn sig_algorithm(self) -> Option<SigAlgorithm> {
        match self {
            KeyAlgorithm::Rsa2048 => Some(SigAlgorithm::RsaPkcs1Sha256),
            KeyAlgorithm::EcdsaP256 => Some(SigAlgorithm::EcdsaP256Sha256),
            KeyAlgorithm::EcdhP256 => None,
        }
    }
}

/// Signature schemes that appear on certificates, quotes, and protocol messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SigAlgorithm {
    RsaPkcs1Sha256,
    EcdsaP256Sha256,
}

impl SigAlgorithm {
    pub fn tag(self) -> u8 {
        match self {
            SigAlgorithm::RsaPkcs1Sha256 => 1,
            SigAlgorithm::EcdsaP256Sha256 => 2,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self, WireError> {
        match t {
            1 => Ok(SigAlgorithm::RsaPkcs1Sha256),
            2 => Ok(SigAlgorithm::EcdsaP256Sha256),
            _ => Err(WireError::BadTag(t as u16)),
        }
    }

    pub fn key_algorithm(self) -> KeyAlgorithm {
        match self {
            SigAlgorithm::RsaPkcs1Sha256 => KeyAlgorithm::Rsa2048,
            SigAlgorithm::EcdsaP256Sha256 => KeyAlgorithm::EcdsaP256,
        }
    }
}

/// Algorithm-tagged canonical public key bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKeyBytes {
    pub alg: KeyAlgorithm,
    pub bytes: Vec<u8>,
}

impl Wire for PublicKeyBytes {
    fn encode(&self, w: &mut Writer) {
        w.put_u8(self.alg.tag());
        w.put_bytes(&self.bytes);
    }

    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        let alg = KeyAlgorithm::from_tag(r.get_u8()?)?;
        let bytes = r.get_bytes()?;
        Ok(PublicKeyBytes { alg, bytes })
    }
}

/// Secret bytes that zeroize on drop.
#[derive(Clone, Zeroize, ZeroizeOnDrop, PartialEq, Eq)]
pub struct SecretBytes(Vec<u8>);

impl SecretBytes {
    pub fn new(v: Vec<u8>) -> Self {
        SecretBytes(v)
    }

    pub fn expose(&self) -> &[u8] {
        &self.0
    }
}

impl std::fmt::Debug for SecretBytes {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SecretBytes({} bytes)", self.0.len())
    }
}

pub fn sha256(data: &[u8]) -> Hash {
    Sha256::digest(data).into()
}

pub fn sha256_parts(parts: &[&[u8]]) -> Hash {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

pub fn hmac_sha256(key: &[u8], data: &[u8]) -> Hash {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

/// Labeled HKDF-SHA256. The label gives domain separation between the
/// report-MAC key, seal keys, PCK/AK seeds, and channel keys.
pub fn kdf(ikm: &[u8], label: &str, context: &[u8]) -> Hash {
    let hk = hkdf::Hkdf::<Sha256>::new(None, ikm);
    let mut info = Vec::with_capacity(label.len() + 1 + context.len());
    info.extend_from_slice(label.as_bytes());
    info.push(0x00);
    info.extend_from_slice(context);
    let mut okm = [0u8; 32];
    hk.expand(&info, &mut okm).expect("32-byte okm");
    okm
}

pub fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && bool::from(a.ct_eq(b))
}

pub fn random_bytes<const N: usize>() -> [u8; N] {
    let mut out = [0u8; N];
    rand::rngs::OsRng.fill_bytes(&mut out);
    out
}

// --- AEAD (AES-256-GCM) ---

pub const NONCE_LEN: usize = 12;

pub fn aead_seal(key: &Hash, nonce: &[u8; NONCE_LEN], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    use aes_gcm::aead::{Aead, Payload};
    use aes_gcm::{Aes256Gcm, KeyInit};
    let cipher = Aes256Gcm::new_from_slice(key).expect("32-byte key");
    cipher
        .encrypt(
            aes_gcm::Nonce::from_slice(nonce),
            Payload {
                msg: plaintext,
                aad,
            },
        )
        .expect("gcm encrypt is infallible for in-memory buffers")
}

pub fn aead_open(
    key: &Hash,
    nonce: &[u8; NONCE_LEN],
    aad: &[u8],
    ciphertext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    use aes_gcm::aead::{Aead, Payload};
    use aes_gcm::{Aes256Gcm, KeyInit};
    let cipher = Aes256Gcm::new_from_slice(key).expect("32-byte key");
    cipher
        .decrypt(
            aes_gcm::Nonce::from_slice(nonce),
            Payload {
                msg: ciphertext,
                aad,
            },
        )
        .map_err(|_| CryptoError::AeadFailure)
}

// --- RSA-2048 ---

struct RsaPrivateParts {
    n: Vec<u8>,
    e: Vec<u8>,
    d: Vec<u8>,
    p: Vec<u8>,
    q: Vec<u8>,
    dp: Vec<u8>,
    dq: Vec<u8>,
    qinv: Vec<u8>,
}

impl RsaPrivateParts {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        for part in [
            &self.n, &self.e, &self.d, &self.p, &self.q, &self.dp, &self.dq, &self.qinv,
        ] {
            w.put_bytes(part);
        }
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let mut parts: Vec<Vec<u8>> = Vec::with_capacity(8);
        for _ in 0..8 {
            parts.push(r.get_bytes().map_err(|_| CryptoError::MalformedKey)?);
        }
        r.expect_end().map_err(|_| CryptoError::MalformedKey)?;
        let mut it = parts.into_iter();
        Ok(RsaPrivateParts {
            n: it.next().unwrap(),
            e: it.next().unwrap(),
            d: it.next().unwrap(),
            p: it.next().unwrap(),
            q: it.next().unwrap(),
            dp: it.next().unwrap(),
            dq: it.next().unwrap(),
            qinv: it.next().unwrap(),
        })
    }
}

fn rsa_private_from_bytes(
    private: &[u8],
) -> Result<Rsa<openssl::pkey::Private>, CryptoError> {
    let parts = RsaPrivateParts::decode(private)?;
    let bn = |v: &[u8]| BigNum::from_slice(v);
    Ok(Rsa::from_private_components(
        bn(&parts.n)?,
        bn(&parts.e)?,
        bn(&parts.d)?,
        bn(&parts.p)?,
        bn(&parts.q)?,
        bn(&parts.dp)?,
        bn(&parts.dq)?,
        bn(&parts.qinv)?,
    )?)
}

fn rsa_public_from_bytes(public: &[u8]) -> Result<Rsa<openssl::pkey::Public>, CryptoError> {
    let mut r = Reader::new(public);
    let n = r.get_bytes().map_err(|_| CryptoError::MalformedKey)?;
    let e = r.get_bytes().map_err(|_| CryptoError::MalformedKey)?;
    r.expect_end().map_err(|_| CryptoError::MalformedKey)?;
    Ok(Rsa::from_public_components(
        BigNum::from_slice(&n)?,
        BigNum::from_slice(&e)?,
    )?)
}

fn rsa_generate() -> Result<(Vec<u8>, SecretBytes), CryptoError> {
    let key = Rsa::generate(2048)?;
    let mut wpub = Writer::new();
    wpub.put_bytes(&key.n().to_vec());
    wpub.put_bytes(&key.e().to_vec());
    let parts = RsaPrivateParts {
        n: key.n().to_vec(),
        e: key.e().to_vec(),
        d: key.d().to_vec(),
        p: key.p().expect("generated key has p").to_vec(),
        q: key.q().expect("generated key has q").to_vec(),
        dp: key.dmp1().expect("generated key has dmp1").to_vec(),
        dq: key.dmq1().expect("generated key has dmq1").to_vec(),
        qinv: key.iqmp().expect("generated key has iqmp").to_vec(),
    };
    Ok((wpub.finish(), SecretBytes::new(parts.encode())))
}

// --- P-256 ---

fn ecdsa_generate() -> (Vec<u8>, SecretBytes) {
    let sk = SigningKey::random(&mut rand::rngs::OsRng);
    let vk = VerifyingKey::from(&sk);
    (
        vk.to_encoded_point(true).as_bytes().to_vec(),
        SecretBytes::new(sk.to_bytes().to_vec()),
    )
}

fn ecdh_generate() -> (Vec<u8>, SecretBytes) {
    let sk = p256::SecretKey::random(&mut rand::rngs::OsRng);
    let pk = sk.public_key();
    (
        pk.to_encoded_point(true).as_bytes().to_vec(),
        SecretBytes::new(sk.to_bytes().to_vec()),
    )
}

/// Derives a P-256 signing key deterministically from a seed. Retries the
/// KDF with an incrementing counter until the candidate is a valid scalar.
pub fn ecdsa_from_seed(seed: &[u8], label: &str) -> (Vec<u8>, SecretBytes) {
    for counter in 0u32..256 {
        let candidate = kdf(seed, label, &counter.to_be_bytes());
        if let Ok(sk) = SigningKey::from_slice(&candidate) {
            let vk = VerifyingKey::from(&sk);
            return (
                vk.to_encoded_point(true).as_bytes().to_vec(),
                SecretBytes::new(sk.to_bytes().to_vec()),
            );
        }
    }
    unreachable!("valid scalar within 256 KDF attempts");
}

pub fn generate_keypair(alg: KeyAlgorithm) -> Result<(Vec<u8>, SecretBytes), CryptoError> {
    match alg {
        KeyAlgorithm::Rsa2048 => rsa_generate(),
        KeyAlgorithm::EcdsaP256 => Ok(ecdsa_generate()),
        KeyAlgorithm::EcdhP256 => Ok(ecdh_generate()),
    }
}

pub fn sign(alg: KeyAlgorithm, private: &[u8], msg: &[u8]) -> Result<Vec<u8>, CryptoError> {
    match alg {
        KeyAlgorithm::Rsa2048 => {
            let rsa = rsa_private_from_bytes(private)?;
            let pkey = PKey::from_rsa(rsa)?;
            let mut signer = openssl::sign::Signer::new(MessageDigest::sha256(), &pkey)?;
            signer.update(msg)?;
            Ok(signer.sign_to_vec()?)
        }
        KeyAlgorithm::EcdsaP256 => {
            let sk =
                SigningKey::from_slice(private).map_err(|_| CryptoError::MalformedKey)?;
            let sig: Signature = sk.sign(msg);
            Ok(sig.to_bytes().to_vec())
        }
        KeyAlgorithm::EcdhP256 => Err(CryptoError::UnsupportedAlgorithm),
    }
}

pub fn verify(alg: KeyAlgorithm, public: &[u8], msg: &[u8], sig: &[u8]) -> bool {
    match alg {
        KeyAlgorithm::Rsa2048 => (|| -> Result<bool, CryptoError> {
            let rsa = rsa_public_from_bytes(public)?;
            let pkey = PKey::from_rsa(rsa)?;
            let mut verifier =
                openssl::sign::Verifier::new(MessageDigest::sha256(), &pkey)?;
            verifier.update(msg)?;
            Ok(verifier.verify(sig)?)
        })()
        .unwrap_or(false),
        KeyAlgorithm::EcdsaP256 => (|| {
            let vk = VerifyingKey::from_sec1_bytes(public).ok()?;
            let sig = Signature::from_slice(sig).ok()?;
            Some(vk.verify(msg, &sig).is_ok())
        })()
        .unwrap_or(false),
        KeyAlgorithm::EcdhP256 => false,
    }
}

pub fn verify_with(pk: &PublicKeyBytes, msg: &[u8], sig: &[u8]) -> bool {
    verify(pk.alg, &pk.bytes, msg, sig)
}

/// Raw ECDH: validates the peer point and returns the x-coordinate of the
/// shared point. Callers must run the result through [`kdf`] before use.
pub fn ecdh_agree(private: &[u8], peer_public: &[u8]) -> Result<SecretBytes, CryptoError> {
    let sk = p256::SecretKey::from_slice(private).map_err(|_| CryptoError::MalformedKey)?;
    let peer =
        p256::PublicKey::from_sec1_bytes(peer_public).map_err(|_| CryptoError::InvalidCurvePoint)?;
    let shared = p256::ecdh::diffie_hellman(sk.to_nonzero_scalar(), peer.as_affine());
    Ok(SecretBytes::new(shared.raw_secret_bytes().to_vec()))
}

/// Salted slow hash for token PINs.
pub fn pin_hash(pin: &[u8], salt: &[u8; 16]) -> Hash {
    const PIN_KDF_ITERATIONS: u32 = 10_000;
    let mut out = [0u8; 32];
    pbkdf2::pbkdf2_hmac::<Sha256>(pin, salt, PIN_KDF_ITERATIONS, &mut out);
    out
}

// --- Post-handshake secure channel ---

/// Symmetric channel key. Opaque outside this module; protocol code moves it
/// around but cannot read the bytes, and it zeroizes on drop.
#[derive(Zeroize, ZeroizeOnDrop)]
pub struct ChannelKey {
    key: [u8; 32],
}

impl ChannelKey {
    pub(crate) fn from_hash(key: Hash) -> Self {
        ChannelKey { key }
    }

    #[cfg(feature = "test-internals")]
    pub fn test_only_bytes(&self) -> [u8; 32] {
        self.key
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelRole {
    Initiator,
    Responder,
}

/// AEAD channel bound to a handshake transcript. Nonces are a direction tag
/// plus a per-direction counter, so message order is enforced and neither
/// side can replay or reflect ciphertexts.
pub struct SecureChannel {
    key: ChannelKey,
    role: ChannelRole,
    transcript: Hash,
    send_seq: u64,
    recv_seq: u64,
}

impl SecureChannel {
    /// Derives the channel from an ECDH shared secret and the handshake
    /// transcript hash; both sides compute the same key.
    pub fn derive(shared: &SecretBytes, transcript: Hash, role: ChannelRole) -> Self {
        let key = kdf(shared.expose(), "bf/channel/v1", &transcript);
        SecureChannel {
            key: ChannelKey::from_hash(key),
            role,
            transcript,
            send_seq: 0,
            recv_seq: 0,
        }
    }

    pub fn transcript(&self) -> Hash {
        self.transcript
    }

    fn nonce(dir: u8, seq: u64) -> [u8; NONCE_LEN] {
        let mut n = [0u8; NONCE_LEN];
        n[3] = dir;
        n[4..].copy_from_slice(&seq.to_be_bytes());
        n
    }

    fn send_dir(&self) -> u8 {
        match self.role {
            ChannelRole::Initiator => 1,
            ChannelRole::Responder => 2,
        }
    }

    pub fn seal(&mut self, plaintext: &[u8]) -> Vec<u8> {
        let nonce = Self::nonce(self.send_dir(), self.send_seq);
        self.send_seq += 1;
        aead_seal(&self.key.key, &nonce, &self.transcript, plaintext)
    }

    pub fn open(&mut self, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let dir = match self.role {
            ChannelRole::Initiator => 2,
            ChannelRole::Responder => 1,
        };
        let nonce = Self::nonce(dir, self.recv_seq);
        let pt = aead_open(&self.key.key, &nonce, &self.transcript, ciphertext)?;
        self.recv_seq += 1;
        Ok(pt)
    }

    pub(crate) fn key_bytes(&self) -> &[u8; 32] {
        &self.key.key
    }
}

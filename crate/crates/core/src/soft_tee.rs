//! Software emulation of the TEE primitives: enclave measurement,
//! platform-keyed reports, and sealed storage.
//!
//! A "platform" is a secrets file standing in for fused hardware keys; an
//! "enclave" is identified by the hash of its image bytes plus the identity
//! of the authority that signed it. Reports are HMAC'd with a key derived
//! from the platform root secret, so they only verify on the platform that
//! produced them. Sealing binds ciphertext to the platform and to either the
//! exact enclave build (MRENCLAVE) or its signing authority (MRSIGNER).

use std::io::Write;
use std::path::Path;

use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::crypto::{self, Hash};
use crate::wire::{Reader, Wire, WireError, Writer};

pub const REPORT_DATA_LEN: usize = 64;
pub const PLATFORM_ID_LEN: usize = 16;

const PLATFORM_MAGIC: &[u8; 8] = b"BFPLAT01";
const SEAL_MAGIC: &[u8; 8] = b"BFSEAL01";

const LABEL_REPORT_MAC: &str = "bf/report-mac/v1";
const LABEL_SEAL: &str = "bf/seal/v1";

#[derive(Debug, Error)]
pub enum TeeError {
    #[error("enclave image is empty")]
    InvalidImage,
    #[error("report_data must be exactly {REPORT_DATA_LEN} bytes")]
    InvalidReportData,
    #[error("sealed blob bound to a different enclave identity")]
    SealIdentityMismatch,
    #[error("sealed blob bound to a different platform")]
    SealPlatformMismatch,
    #[error("sealed blob failed integrity check")]
    SealIntegrityError,
    #[error("malformed structure: {0}")]
    Malformed(#[from] WireError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Fused-secret analog: stable identifier plus the root and provisioning
/// secrets. The secret fields never leave this module; everything derived
/// from them goes through labeled KDFs.
pub struct PlatformSecret {
    platform_id: [u8; PLATFORM_ID_LEN],
    root_secret: Secret32,
    provisioning_secret: Secret32,
}

#[derive(Zeroize, ZeroizeOnDrop)]
struct Secret32([u8; 32]);

impl PlatformSecret {
    pub fn generate() -> Self {
        PlatformSecret {
            platform_id: crypto::random_bytes(),
            root_secret: Secret32(crypto::random_bytes()),
            provisioning_secret: Secret32(crypto::random_bytes()),
        }
    }

    pub fn platform_id(&self) -> [u8; PLATFORM_ID_LEN] {
        self.platform_id
    }

    /// Loads the platform file, or creates one if absent.
    pub fn load_or_generate(path: &Path) -> Result<Self, TeeError> {
        if path.exists() {
            Self::load(path)
        } else {
            let p = Self::generate();
            p.save(path)?;
            Ok(p)
        }
    }

    pub fn load(path: &Path) -> Result<Self, TeeError> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader::new(&bytes);
        if r.get_fixed::<8>()? != *PLATFORM_MAGIC {
            return Err(TeeError::Malformed(WireError::BadMagic));
        }
        let platform_id = r.get_fixed::<PLATFORM_ID_LEN>()?;
        let root = r.get_fixed::<32>()?;
        let prov = r.get_fixed::<32>()?;
        r.expect_end()?;
        Ok(PlatformSecret {
            platform_id,
            root_secret: Secret32(root),
            provisioning_secret: Secret32(prov),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TeeError> {
        let mut w = Writer::new();
        w.put_fixed(PLATFORM_MAGIC);
        w.put_fixed(&self.platform_id);
        w.put_fixed(&self.root_secret.0);
        w.put_fixed(&self.provisioning_secret.0);
        let mut opts = std::fs::OpenOptions::new();
        opts.write(true).create_new(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(0o600);
        }
        let mut f = opts.open(path)?;
        f.write_all(&w.finish())?;
        Ok(())
    }

    fn report_mac_key(&self) -> Hash {
        crypto::kdf(&self.root_secret.0, LABEL_REPORT_MAC, &self.platform_id)
    }

    fn seal_key(&self, policy: SealPolicy, identity: &Hash) -> Hash {
        let mut ctx = Vec::with_capacity(1 + 32);
        ctx.push(policy.tag());
        ctx.extend_from_slice(identity);
        crypto::kdf(&self.root_secret.0, LABEL_SEAL, &ctx)
    }

    /// Seed for the attestation layer's platform certification key.
    pub(crate) fn provisioning_seed(&self) -> &[u8; 32] {
        &self.provisioning_secret.0
    }
}

/// Identity of an enclave build: hash of its image, hash of the signing
/// authority, and the security version counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Measurement {
    pub mrenclave: Hash,
    pub mrsigner: Hash,
    pub svn: u16,
    pub tcb_version: u16,
}

impl Measurement {
    pub fn with_signer(mut self, signer_identity: &[u8]) -> Self {
        self.mrsigner = crypto::sha256(signer_identity);
        self
    }

    pub fn with_versions(mut self, svn: u16, tcb_version: u16) -> Self {
        self.svn = svn;
        self.tcb_version = tcb_version;
        self
    }
}

impl Wire for Measurement {
    fn encode(&self, w: &mut Writer) {
        w.put_fixed(&self.mrenclave);
        w.put_fixed(&self.mrsigner);
        w.put_u16(self.svn);
        w.put_u16(self.tcb_version);
    }

    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(Measurement {
            mrenclave: r.get_fixed()?,
            mrsigner: r.get_fixed()?,
            svn: r.get_u16()?,
            tcb_version: r.get_u16()?,
        })
    }
}

/// Deterministic measurement of an enclave image. Signer and versions start
/// zeroed; build the full identity with [`Measurement::with_signer`] and
/// [`Measurement::with_versions`].
pub fn measure_enclave(image: &[u8]) -> Result<Measurement, TeeError> {
    if image.is_empty() {
        return Err(TeeError::InvalidImage);
    }
    Ok(Measurement {
        mrenclave: crypto::sha256(image),
        mrsigner: [0u8; 32],
        svn: 0,
        tcb_version: 0,
    })
}

/// Platform-authenticated claim binding 64 bytes of caller data to an
/// enclave measurement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub measurement: Measurement,
    pub report_data: [u8; REPORT_DATA_LEN],
    pub platform_id: [u8; PLATFORM_ID_LEN],
    pub mac: Hash,
}

impl Report {
    fn mac_input(
        measurement: &Measurement,
        report_data: &[u8; REPORT_DATA_LEN],
        platform_id: &[u8; PLATFORM_ID_LEN],
    ) -> Vec<u8> {
        let mut w = Writer::new();
        measurement.encode(&mut w);
        w.put_fixed(report_data);
        w.put_fixed(platform_id);
        w.finish()
    }
}

impl Wire for Report {
    fn encode(&self, w: &mut Writer) {
        self.measurement.encode(w);
        w.put_fixed(&self.report_data);
        w.put_fixed(&self.platform_id);
        w.put_fixed(&self.mac);
    }

    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        Ok(Report {
            measurement: Measurement::decode(r)?,
            report_data: r.get_fixed()?,
            platform_id: r.get_fixed()?,
            mac: r.get_fixed()?,
        })
    }
}

pub fn create_report(
    report_data: &[u8],
    platform: &PlatformSecret,
    measurement: Measurement,
) -> Result<Report, TeeError> {
    let data: [u8; REPORT_DATA_LEN] = report_data
        .try_into()
        .map_err(|_| TeeError::InvalidReportData)?;
    let mac = crypto::hmac_sha256(
        &platform.report_mac_key(),
        &Report::mac_input(&measurement, &data, &platform.platform_id),
    );
    Ok(Report {
        measurement,
        report_data: data,
        platform_id: platform.platform_id,
        mac,
    })
}

pub fn verify_report(report: &Report, platform: &PlatformSecret) -> bool {
    if report.platform_id != platform.platform_id {
        return false;
    }
    let expected = crypto::hmac_sha256(
        &platform.report_mac_key(),
        &Report::mac_input(&report.measurement, &report.report_data, &report.platform_id),
    );
    crypto::ct_eq(&expected, &report.mac)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SealPolicy {
    MrEnclave,
    MrSigner,
}

impl SealPolicy {
    pub fn tag(self) -> u8 {
        match self {
            SealPolicy::MrEnclave => 1,
            SealPolicy::MrSigner => 2,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self, WireError> {
        match t {
            1 => Ok(SealPolicy::MrEnclave),
            2 => Ok(SealPolicy::MrSigner),
            _ => Err(WireError::BadTag(t as u16)),
        }
    }

    fn select(self, m: &Measurement) -> Hash {
        match self {
            SealPolicy::MrEnclave => m.mrenclave,
            SealPolicy::MrSigner => m.mrsigner,
        }
    }
}

/// Ciphertext recoverable only on the same platform under the
/// policy-selected enclave identity.
///
/// On-disk layout is fixed: magic `BFSEAL01`, policy byte, 32-byte bound
/// identity, 16-byte platform id, 12-byte nonce, u32 big-endian ciphertext
/// length, then ciphertext+tag. The header doubles as AEAD associated data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub policy: SealPolicy,
    pub bound_identity: Hash,
    pub platform_id: [u8; PLATFORM_ID_LEN],
    pub nonce: [u8; crypto::NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

impl SealedBlob {
    fn header(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_fixed(SEAL_MAGIC);
        w.put_u8(self.policy.tag());
        w.put_fixed(&self.bound_identity);
        w.put_fixed(&self.platform_id);
        w.put_fixed(&self.nonce);
        w.finish()
    }
}

impl Wire for SealedBlob {
    fn encode(&self, w: &mut Writer) {
        w.put_fixed(SEAL_MAGIC);
        w.put_u8(self.policy.tag());
        w.put_fixed(&self.bound_identity);
        w.put_fixed(&self.platform_id);
        w.put_fixed(&self.nonce);
        w.put_bytes(&self.ciphertext);
    }

    fn decode(r: &mut Reader) -> Result<Self, WireError> {
        if r.get_fixed::<8>()? != *SEAL_MAGIC {
            return Err(WireError::BadMagic);
        }
        Ok(SealedBlob {
            policy: SealPolicy::from_tag(r.get_u8()?)?,
            bound_identity: r.get_fixed()?,
            platform_id: r.get_fixed()?,
            nonce: r.get_fixed()?,
            ciphertext: r.get_bytes()?,
        })
    }
}

pub fn seal(
    plaintext: &[u8],
    policy: SealPolicy,
    platform: &PlatformSecret,
    measurement: &Measurement,
) -> SealedBlob {
    let bound_identity = policy.select(measurement);
    let nonce: [u8; crypto::NONCE_LEN] = crypto::random_bytes();
    let blob = SealedBlob {
        policy,
        bound_identity,
        platform_id: platform.platform_id,
        nonce,
        ciphertext: Vec::new(),
    };
    let key = platform.seal_key(policy, &bound_identity);
    let ciphertext = crypto::aead_seal(&key, &nonce, &blob.header(), plaintext);
    SealedBlob { ciphertext, ..blob }
}

pub fn unseal(
    blob: &SealedBlob,
    platform: &PlatformSecret,
    measurement: &Measurement,
) -> Result<Vec<u8>, TeeError> {
    if blob.platform_id != platform.platform_id {
        return Err(TeeError::SealPlatformMismatch);
    }
    if blob.bound_identity != blob.policy.select(measurement) {
        return Err(TeeError::SealIdentityMismatch);
    }
    let key = platform.seal_key(blob.policy, &blob.bound_identity);
    crypto::aead_open(&key, &blob.nonce, &blob.header(), &blob.ciphertext)
        .map_err(|_| TeeError::SealIntegrityError)
}

/// Platform plus enclave identity: what a running vault process knows about
/// itself. Safe to share across threads; all operations are read-only.
pub struct TeeContext {
    platform: PlatformSecret,
    measurement: Measurement,
}

impl TeeContext {
    pub fn new(platform: PlatformSecret, measurement: Measurement) -> Self {
        TeeContext {
            platform,
            measurement,
        }
    }

    pub fn platform(&self) -> &PlatformSecret {
        &self.platform
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    pub fn platform_id(&self) -> [u8; PLATFORM_ID_LEN] {
        self.platform.platform_id
    }

    pub fn seal(&self, plaintext: &[u8], policy: SealPolicy) -> SealedBlob {
        seal(plaintext, policy, &self.platform, &self.measurement)
    }

    pub fn unseal(&self, blob: &SealedBlob) -> Result<Vec<u8>, TeeError> {
        unseal(blob, &self.platform, &self.measurement)
    }

    pub fn create_report(&self, report_data: &[u8]) -> Result<Report, TeeError> {
        create_report(report_data, &self.platform, self.measurement)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// SHA-256 written from the FIPS 180-4 spec, kept deliberately separate
    /// from the sha2 crate so measurement values have an independent oracle.
    mod hash_oracle {
        const K: [u32; 64] = [
            0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
            0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
            0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
            0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
            0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
            0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
            0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
            0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
            0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
            0xc67178f2,
        ];

        pub fn sha256(msg: &[u8]) -> [u8; 32] {
            let mut h: [u32; 8] = [
                0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c,
                0x1f83d9ab, 0x5be0cd19,
            ];
            let mut data = msg.to_vec();
            let bitlen = (msg.len() as u64) * 8;
            data.push(0x80);
            while data.len() % 64 != 56 {
                data.push(0);
            }
            data.extend_from_slice(&bitlen.to_be_bytes());

            for block in data.chunks(64) {
                let mut w = [0u32; 64];
                for (i, c) in block.chunks(4).enumerate() {
                    w[i] = u32::from_be_bytes(c.try_into().unwrap());
                }
                for i in 16..64 {
                    let s0 = w[i - 15].rotate_right(7) ^ w[i - 15].rotate_right(18) ^ (w[i - 15] >> 3);
                    let s1 = w[i - 2].rotate_right(17) ^ w[i - 2].rotate_right(19) ^ (w[i - 2] >> 10);
                    w[i] = w[i - 16]
                        .wrapping_add(s0)
                        .wrapping_add(w[i - 7])
                        .wrapping_add(s1);
                }
                let (mut a, mut b, mut c, mut d, mut e, mut f, mut g, mut hh) =
                    (h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7]);
                for i in 0..64 {
                    let s1 = e.rotate_right(6) ^ e.rotate_right(11) ^ e.rotate_right(25);
                    let ch = (e & f) ^ ((!e) & g);
                    let t1 = hh
                        .wrapping_add(s1)
                        .wrapping_add(ch)
                        .wrapping_add(K[i])
                        .wrapping_add(w[i]);
                    let s0 = a.rotate_right(2) ^ a.rotate_right(13) ^ a.rotate_right(22);
                    let maj = (a & b) ^ (a & c) ^ (b & c);
                    let t2 = s0.wrapping_add(maj);
                    hh = g;
                    g = f;
                    f = e;
                    e = d.wrapping_add(t1);
                    d = c;
                    c = b;
                    b = a;
                    a = t1.wrapping_add(t2);
                }
                h[0] = h[0].wrapping_add(a);
                h[1] = h[1].wrapping_add(b);
                h[2] = h[2].wrapping_add(c);
                h[3] = h[3].wrapping_add(d);
                h[4] = h[4].wrapping_add(e);
                h[5] = h[5].wrapping_add(f);
                h[6] = h[6].wrapping_add(g);
                h[7] = h[7].wrapping_add(hh);
            }
            let mut out = [0u8; 32];
            for (i, word) in h.iter().enumerate() {
                out[i * 4..i * 4 + 4].copy_from_slice(&word.to_be_bytes());
            }
            out
        }

        #[test]
        fn oracle_matches_fips_vectors() {
            assert_eq!(
                hex::encode(sha256(b"abc")),
                "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
            );
            assert_eq!(
                hex::encode(sha256(b"")),
                "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
            );
        }
    }

    fn test_blob_1k() -> Vec<u8> {
        (0..1024u32).map(|i| ((i * 31 + 7) % 256) as u8).collect()
    }

    #[test]
    fn measurement_is_deterministic() {
        let img = b"enclave image bytes";
        assert_eq!(
            measure_enclave(img).unwrap(),
            measure_enclave(img).unwrap()
        );
    }

    #[test]
    fn single_bit_flip_changes_mrenclave() {
        let img = test_blob_1k();
        let mut flipped = img.clone();
        flipped[100] ^= 0x01;
        assert_ne!(
            measure_enclave(&img).unwrap().mrenclave,
            measure_enclave(&flipped).unwrap().mrenclave
        );
    }

    #[test]
    fn mrenclave_matches_independent_hash_oracle() {
        // Frozen via an external hashlib run over the same pattern blob.
        const EXPECTED: &str = "8d7e566766f6bd1bb4cac87cadfde681197f9243f4d2692a0fd12674092212a7";
        let blob = test_blob_1k();
        assert_eq!(hex::encode(hash_oracle::sha256(&blob)), EXPECTED);
        assert_eq!(
            hex::encode(measure_enclave(&blob).unwrap().mrenclave),
            EXPECTED
        );
    }

    #[test]
    fn empty_image_rejected() {
        assert!(matches!(measure_enclave(b""), Err(TeeError::InvalidImage)));
    }

    #[test]
    fn report_roundtrip_and_mac_flip() {
        let platform = PlatformSecret::generate();
        let meas = measure_enclave(b"img").unwrap();
        let report = create_report(&[0u8; 64], &platform, meas).unwrap();
        assert_eq!(report.report_data, [0u8; 64]);
        assert!(verify_report(&report, &platform));

        let mut forged = report.clone();
        forged.mac[0] ^= 0xff;
        assert!(!verify_report(&forged, &platform));
    }

    #[test]
    fn report_macs_differ_across_platforms() {
        let a = PlatformSecret::generate();
        let b = PlatformSecret::generate();
        let meas = measure_enclave(b"img").unwrap();
        let ra = create_report(&[7u8; 64], &a, meas).unwrap();
        let rb = create_report(&[7u8; 64], &b, meas).unwrap();
        assert_ne!(ra.mac, rb.mac);
        assert!(!verify_report(&ra, &b));
    }

    #[test]
    fn report_data_must_be_64_bytes() {
        let platform = PlatformSecret::generate();
        let meas = measure_enclave(b"img").unwrap();
        assert!(matches!(
            create_report(&[0u8; 63], &platform, meas),
            Err(TeeError::InvalidReportData)
        ));
    }

    #[test]
    fn report_field_mutations_invalidate_mac() {
        let platform = PlatformSecret::generate();
        let meas = measure_enclave(b"img").unwrap();
        let report = create_report(&[1u8; 64], &platform, meas).unwrap();

        let mut m = report.clone();
        m.report_data[5] ^= 1;
        assert!(!verify_report(&m, &platform));

        let mut m = report.clone();
        m.measurement.svn ^= 1;
        assert!(!verify_report(&m, &platform));
    }

    /// No assembled report passes verification without the platform key:
    /// 10^4 random single-byte mutations over the serialized report.
    #[test]
    fn report_fuzz_no_false_accepts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xbf01);
        let platform = PlatformSecret::generate();
        let meas = measure_enclave(b"fuzz image").unwrap();
        let report = create_report(&[9u8; 64], &platform, meas).unwrap();
        let bytes = report.to_bytes();

        let mut accepted = 0u32;
        for _ in 0..10_000 {
            let mut mutated = bytes.clone();
            let pos = rng.gen_range(0..mutated.len());
            let old = mutated[pos];
            let new = loop {
                let b: u8 = rng.gen();
                if b != old {
                    break b;
                }
            };
            mutated[pos] = new;
            if let Ok(r) = Report::from_bytes(&mutated) {
                if verify_report(&r, &platform) {
                    accepted += 1;
                }
            }
        }
        assert_eq!(accepted, 0);
    }

    #[test]
    fn seal_roundtrip() {
        let platform = PlatformSecret::generate();
        let meas = measure_enclave(b"img").unwrap();
        let blob = seal(b"vault state", SealPolicy::MrEnclave, &platform, &meas);
        assert_eq!(unseal(&blob, &platform, &meas).unwrap(), b"vault state");
    }

    #[test]
    fn seal_ciphertext_flip_is_integrity_error() {
        let platform = PlatformSecret::generate();
        let meas = measure_enclave(b"img").unwrap();
        let mut blob = seal(b"data", SealPolicy::MrEnclave, &platform, &meas);
        blob.ciphertext[0] ^= 1;
        assert!(matches!(
            unseal(&blob, &platform, &meas),
            Err(TeeError::SealIntegrityError)
        ));
    }

    #[test]
    fn seal_wrong_mrenclave_is_identity_mismatch() {
        let platform = PlatformSecret::generate();
        let meas_a = measure_enclave(b"image A").unwrap();
        let meas_b = measure_enclave(b"image B").unwrap();
        let blob = seal(b"data", SealPolicy::MrEnclave, &platform, &meas_a);
        assert!(matches!(
            unseal(&blob, &platform, &meas_b),
            Err(TeeError::SealIdentityMismatch)
        ));
    }

    #[test]
    fn seal_wrong_platform_is_platform_mismatch() {
        let a = PlatformSecret::generate();
        let b = PlatformSecret::generate();
        let meas = measure_enclave(b"img").unwrap();
        let blob = seal(b"data", SealPolicy::MrEnclave, &a, &meas);
        assert!(matches!(
            unseal(&blob, &b, &meas),
            Err(TeeError::SealPlatformMismatch)
        ));
    }

    #[test]
    fn forged_identity_in_header_fails_integrity() {
        // An attacker rewriting bound_identity to match the unsealing enclave
        // defeats the identity check but not the key derivation.
        let platform = PlatformSecret::generate();
        let meas_a = measure_enclave(b"image A").unwrap();
        let meas_b = measure_enclave(b"image B").unwrap();
        let mut blob = seal(b"data", SealPolicy::MrEnclave, &platform, &meas_a);
        blob.bound_identity = meas_b.mrenclave;
        assert!(matches!(
            unseal(&blob, &platform, &meas_b),
            Err(TeeError::SealIntegrityError)
        ));
    }

    #[test]
    fn mrsigner_policy_shares_across_builds_mrenclave_does_not() {
        let platform = PlatformSecret::generate();
        let signer = b"authority-1";
        let build_a = measure_enclave(b"build A").unwrap().with_signer(signer);
        let build_b = measure_enclave(b"build B").unwrap().with_signer(signer);
        assert_ne!(build_a.mrenclave, build_b.mrenclave);
        assert_eq!(build_a.mrsigner, build_b.mrsigner);

        let signed_blob = seal(b"shared", SealPolicy::MrSigner, &platform, &build_a);
        assert_eq!(
            unseal(&signed_blob, &platform, &build_b).unwrap(),
            b"shared"
        );

        let exact_blob = seal(b"exact", SealPolicy::MrEnclave, &platform, &build_a);
        assert!(matches!(
            unseal(&exact_blob, &platform, &build_b),
            Err(TeeError::SealIdentityMismatch)
        ));

        // different signer does not share
        let build_c = measure_enclave(b"build C")
            .unwrap()
            .with_signer(b"authority-2");
        assert!(matches!(
            unseal(&signed_blob, &platform, &build_c),
            Err(TeeError::SealIdentityMismatch)
        ));
    }

    #[test]
    fn sealed_blob_layout_is_byte_exact() {
        let platform = PlatformSecret::generate();
        let meas = measure_enclave(b"img").unwrap();
        let blob = seal(b"payload", SealPolicy::MrSigner, &platform, &meas);
        let bytes = blob.to_bytes();

        assert_eq!(&bytes[..8], b"BFSEAL01");
        assert_eq!(bytes[8], 2); // MRSIGNER policy tag
        assert_eq!(&bytes[9..41], &blob.bound_identity);
        assert_eq!(&bytes[41..57], &blob.platform_id);
        assert_eq!(&bytes[57..69], &blob.nonce);
        let len = u32::from_be_bytes(bytes[69..73].try_into().unwrap()) as usize;
        assert_eq!(len, blob.ciphertext.len());
        assert_eq!(&bytes[73..], &blob.ciphertext[..]);

        assert_eq!(SealedBlob::from_bytes(&bytes).unwrap(), blob);
    }

    #[test]
    fn platform_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("platform.secret");
        let p = PlatformSecret::load_or_generate(&path).unwrap();
        let p2 = PlatformSecret::load(&path).unwrap();
        assert_eq!(p.platform_id(), p2.platform_id());

        // same secrets: a report from one verifies under the reload
        let meas = measure_enclave(b"img").unwrap();
        let r = create_report(&[0u8; 64], &p, meas).unwrap();
        assert!(verify_report(&r, &p2));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn measure_is_pure(image in proptest::collection::vec(any::<u8>(), 1..2048)) {
                let a = measure_enclave(&image).unwrap();
                let b = measure_enclave(&image).unwrap();
                prop_assert_eq!(a, b);
                prop_assert_eq!(a.mrenclave, crypto::sha256(&image));
            }

            #[test]
            fn cross_identity_unseal_always_fails(
                img_a in proptest::collection::vec(any::<u8>(), 1..128),
                img_b in proptest::collection::vec(any::<u8>(), 1..128),
                payload in proptest::collection::vec(any::<u8>(), 1..64),
            ) {
                prop_assume!(img_a != img_b);
                let platform = PlatformSecret::generate();
                let ma = measure_enclave(&img_a).unwrap();
                let mb = measure_enclave(&img_b).unwrap();
                let blob = seal(&payload, SealPolicy::MrEnclave, &platform, &ma);
                prop_assert!(unseal(&blob, &platform, &mb).is_err());
                prop_assert_eq!(unseal(&blob, &platform, &ma).unwrap(), payload);
            }
        }
    }
}

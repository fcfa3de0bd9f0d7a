//! Flat key=value node configuration.

use std::path::{Path, PathBuf};

use crate::attestation::QuoteType;
use crate::crypto::KeyAlgorithm;
use crate::soft_tee::SealPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Ca,
    Website,
    CdnEdge,
    PckCache,
    VerificationService,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Ca,
        Role::Website,
        Role::CdnEdge,
        Role::PckCache,
        Role::VerificationService,
    ];

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "ca" => Some(Role::Ca),
            "website" => Some(Role::Website),
            "cdn-edge" => Some(Role::CdnEdge),
            "pck-cache" => Some(Role::PckCache),
            "verification-service" => Some(Role::VerificationService),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Ca => "ca",
            Role::Website => "website",
            Role::CdnEdge => "cdn-edge",
            Role::PckCache => "pck-cache",
            Role::VerificationService => "verification-service",
        }
    }

    /// Needs an open vault to operate.
    pub fn needs_vault(self) -> bool {
        matches!(self, Role::Ca | Role::Website | Role::CdnEdge)
    }
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub role: Role,
    pub listen: String,
    pub home: PathBuf,
    pub pin: String,
    pub subject: String,
    pub svn: u16,
    pub tcb: u16,
    pub enclave_image: PathBuf,
    pub signer: Option<PathBuf>,
    pub platform_secret: PathBuf,
    pub expect_mrenclave: Vec<[u8; 32]>,
    pub min_svn: u16,
    pub min_tcb: u16,
    pub ca_endpoint: Option<String>,
    pub ias_endpoint: Option<String>,
    pub pck_cache_endpoint: Option<String>,
    pub manufacturer_root: Option<PathBuf>,
    pub service_key: Option<PathBuf>,
    pub epid_member: Option<PathBuf>,
    pub pck_cert: Option<PathBuf>,
    pub org_mpk: Option<PathBuf>,
    pub pck_cache_file: Option<PathBuf>,
    pub ias_state: Option<PathBuf>,
    pub ca_cert_file: PathBuf,
    pub key_label: String,
    pub ca_algorithm: KeyAlgorithm,
    pub ca_quote_type: QuoteType,
    pub csr_quote_type: QuoteType,
    pub transfer_quote_type: QuoteType,
    pub verify_csr_quote: bool,
    pub leaf_validity_secs: u64,
    pub seal_policy: SealPolicy,
    pub slot_id: u64,
}

#[derive(Debug, thiserror::Error)]
#[error("bad config: {0}")]
pub struct ConfigError(pub String);

impl NodeConfig {
    pub fn load(path: &Path) -> Result<NodeConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let default_home = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &default_home)
    }

    /// Parses `key = value` lines. Unknown keys are errors; `#` starts a
    /// comment. Relative paths resolve against `home`.
    pub fn parse(text: &str, default_home: &Path) -> Result<NodeConfig, ConfigError> {
        let mut map = std::collections::BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key = value", lineno + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }

        let mut take = |k: &str| map.remove(k);

        let role_str = take("role").ok_or_else(|| ConfigError("missing role".into()))?;
        let role =
            Role::parse(&role_str).ok_or_else(|| ConfigError(format!("unknown role {role_str}")))?;
        let home = take("home")
            .map(PathBuf::from)
            .unwrap_or_else(|| default_home.to_path_buf());
        let resolve = |v: String| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                home.join(p)
            }
        };

        let parse_u16 = |k: &str, v: String| {
            v.parse::<u16>()
                .map_err(|_| ConfigError(format!("{k} must be an unsigned 16-bit integer")))
        };
        let parse_u64 = |k: &str, v: String| {
            v.parse::<u64>()
                .map_err(|_| ConfigError(format!("{k} must be an unsigned integer")))
        };
        let parse_bool = |k: &str, v: String| match v.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(ConfigError(format!("{k} must be true or false"))),
        };
        let parse_quote_type = |k: &str, v: String| {
            QuoteType::parse(&v).ok_or_else(|| ConfigError(format!("{k} must be epid or ecdsa")))
        };

        let expect_mrenclave = match take("expect_mrenclave") {
            None => Vec::new(),
            Some(v) if v.is_empty() => Vec::new(),
            Some(v) => v
                .split(',')
                .map(|h| {
                    let raw = hex::decode(h.trim())
                        .map_err(|e| ConfigError(format!("expect_mrenclave: {e}")))?;
                    raw.try_into()
                        .map_err(|_| ConfigError("expect_mrenclave entries must be 32 bytes".into()))
                })
                .collect::<Result<Vec<[u8; 32]>, ConfigError>>()?,
        };

        let config = NodeConfig {
            role,
            listen: take("listen").unwrap_or_else(|| "127.0.0.1:0".into()),
            pin: take("pin").unwrap_or_default(),
            subject: take("subject").unwrap_or_else(|| format!("bf-{}", role.name())),
            svn: take("svn").map(|v| parse_u16("svn", v)).transpose()?.unwrap_or(1),
            tcb: take("tcb").map(|v| parse_u16("tcb", v)).transpose()?.unwrap_or(1),
            enclave_image: take("enclave_image")
                .map(&resolve)
                .unwrap_or_else(|| home.join("enclave.img")),
            signer: take("signer").map(&resolve),
            platform_secret: take("platform_secret")
                .map(&resolve)
                .unwrap_or_else(|| home.join("platform.secret")),
            expect_mrenclave,
            min_svn: take("min_svn")
                .map(|v| parse_u16("min_svn", v))
                .transpose()?
                .unwrap_or(0),
            min_tcb: take("min_tcb")
                .map(|v| parse_u16("min_tcb", v))
                .transpose()?
                .unwrap_or(0),
            ca_endpoint: take("ca_endpoint"),
            ias_endpoint: take("ias_endpoint"),
            pck_cache_endpoint: take("pck_cache_endpoint"),
            manufacturer_root: take("manufacturer_root").map(&resolve),
            service_key: take("service_key").map(&resolve),
            epid_member: take("epid_member").map(&resolve),
            pck_cert: take("pck_cert").map(&resolve),
            org_mpk: take("org_mpk").map(&resolve),
            pck_cache_file: take("pck_cache_file").map(&resolve),
            ias_state: take("ias_state").map(&resolve),
            ca_cert_file: take("ca_cert_file")
                .map(&resolve)
                .unwrap_or_else(|| home.join("ca.cert")),
            key_label: take("key_label").unwrap_or_else(|| "node-key".into()),
            ca_algorithm: match take("ca_algorithm") {
                None => KeyAlgorithm::Rsa2048,
                Some(v) => KeyAlgorithm::parse(&v)
                    .ok_or_else(|| ConfigError(format!("unknown ca_algorithm {v}")))?,
            },
            ca_quote_type: take("ca_quote_type")
                .map(|v| parse_quote_type("ca_quote_type", v))
                .transpose()?
                .unwrap_or(QuoteType::Epid),
            csr_quote_type: take("csr_quote_type")
                .map(|v| parse_quote_type("csr_quote_type", v))
                .transpose()?
                .unwrap_or(QuoteType::Epid),
            transfer_quote_type: take("transfer_quote_type")
                .map(|v| parse_quote_type("transfer_quote_type", v))
                .transpose()?
                .unwrap_or(QuoteType::Epid),
            verify_csr_quote: take("verify_csr_quote")
                .map(|v| parse_bool("verify_csr_quote", v))
                .transpose()?
                .unwrap_or(true),
            leaf_validity_secs: take("leaf_validity_secs")
                .map(|v| parse_u64("leaf_validity_secs", v))
                .transpose()?
                .unwrap_or(crate::certkit::LEAF_VALIDITY_SECS),
            seal_policy: match take("seal_policy").as_deref() {
                None | Some("mrenclave") => SealPolicy::MrEnclave,
                Some("mrsigner") => SealPolicy::MrSigner,
                Some(other) => {
                    return Err(ConfigError(format!("unknown seal_policy {other}")))
                }
            },
            slot_id: take("slot_id")
                .map(|v| parse_u64("slot_id", v))
                .transpose()?
                .unwrap_or(0),
            home,
        };

        if let Some(unknown) = map.keys().next() {
            return Err(ConfigError(format!("unknown key {unknown}")));
        }
        Ok(config)
    }
}

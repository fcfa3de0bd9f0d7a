//! Intra-organization key provisioning and backup.
//!
//! Both platforms must present org-signed PCK entries before any quote is
//! exchanged; the quotes are ECDSA type, bind the ephemeral ECDH keys, and
//! their embedded PCK certificates must be byte-identical to the org-signed
//! cache entries. Once mutually authenticated, the sender ships the
//! selected keys (with certificates) inside the derived channel.

use crate::attestation::{PckCacheEntry, QuoteRejection, QuoteType};
use crate::crypto::{self, ChannelRole, Hash, KeyAlgorithm, PublicKeyBytes};
use crate::framing::{Connector, Frame, FrameChannel, FrameType};
use crate::keyvault::{KeyInfo, Vault};
use crate::wire::{Wire, Writer};

use super::{
    expect_msg, fetch_pck_cert, new_session_id, send_error, send_msg, CipherMsg, NodeType,
    PeerVerification, ProtocolError, ProvisionAcceptMsg, ProvisionDoneMsg, ProvisionHelloMsg,
    ProvisionKeyExchangeMsg, SessionId,
};

const LABEL_PROVISION_TRANSCRIPT: &str = "bf/provision-transcript/v1";

#[derive(Clone, Copy)]
pub struct ProvisionConfig<'a> {
    pub vault: &'a Vault,
    pub pin: &'a [u8],
    pub connector: &'a dyn Connector,
    pub cache_endpoint: &'a str,
    /// Organization master public key; every node has it installed.
    pub mpk: &'a PublicKeyBytes,
    pub peer: PeerVerification<'a>,
    /// Sender-side label filter; `None` ships every non-ephemeral key.
    pub labels: Option<&'a [String]>,
}

fn eph_public_bytes(eph_pk: &[u8]) -> Vec<u8> {
    PublicKeyBytes {
        alg: KeyAlgorithm::EcdhP256,
        bytes: eph_pk.to_vec(),
    }
    .to_bytes()
}

fn transcript(
    session: &SessionId,
    initiator_platform: &[u8; 16],
    responder_platform: &[u8; 16],
    initiator_kx: &ProvisionKeyExchangeMsg,
    responder_kx: &ProvisionKeyExchangeMsg,
) -> Hash {
    let mut w = Writer::new();
    w.put_str(LABEL_PROVISION_TRANSCRIPT);
    w.put_fixed(session);
    w.put_fixed(initiator_platform);
    w.put_fixed(responder_platform);
    initiator_kx.encode(&mut w);
    responder_kx.encode(&mut w);
    crypto::sha256(&w.finish())
}

/// Fetches and checks the org-signed entry for a peer platform. Runs before
/// any quote exchange; a rogue platform dies here.
fn sanction_peer(
    cfg: &ProvisionConfig,
    peer_platform: [u8; 16],
) -> Result<PckCacheEntry, ProtocolError> {
    match fetch_pck_cert(cfg.connector, cfg.cache_endpoint, peer_platform, cfg.mpk) {
        Ok(entry) => Ok(entry),
        Err(ProtocolError::NotFound(m)) => Err(ProtocolError::PckRejected(format!(
            "platform not in org cache: {m}"
        ))),
        Err(e) => Err(e),
    }
}

/// Algorithm step: verify the peer quote binds the peer ephemeral key and
/// that its PCK certificate is exactly the org-sanctioned one.
fn verify_peer_keyex(
    cfg: &ProvisionConfig,
    kx: &ProvisionKeyExchangeMsg,
    peer_platform: &[u8; 16],
    sanctioned: &PckCacheEntry,
) -> Result<(), ProtocolError> {
    if kx.quote.quote_type != QuoteType::Ecdsa {
        return Err(ProtocolError::QuoteInvalid(QuoteRejection::WrongEvidence));
    }
    if kx.quote.report.platform_id != *peer_platform {
        return Err(ProtocolError::QuoteInvalid(QuoteRejection::SignatureInvalid));
    }
    // the quote's chain must be rooted in the sanctioned PCK certificate
    let chain_pck = kx
        .quote
        .pck_chain
        .as_ref()
        .and_then(|c| c.get(1))
        .ok_or(ProtocolError::QuoteInvalid(QuoteRejection::SignatureInvalid))?;
    if chain_pck.to_bytes() != sanctioned.pck_cert.to_bytes() {
        return Err(ProtocolError::PckRejected(
            "quote chain does not use the org-sanctioned PCK certificate".into(),
        ));
    }
    cfg.peer.verify_quote(&kx.quote, &eph_public_bytes(&kx.eph_pk))
}

fn make_keyex(
    cfg: &ProvisionConfig,
) -> Result<(ProvisionKeyExchangeMsg, u64), ProtocolError> {
    let (eph_handle, eph_pk) = cfg.vault.ecdh_generate_ephemeral(cfg.pin)?;
    let quote = cfg
        .vault
        .quote_binding(&eph_public_bytes(&eph_pk), QuoteType::Ecdsa, cfg.pin)?;
    Ok((ProvisionKeyExchangeMsg { quote, eph_pk }, eph_handle))
}

/// Runs the initiator side with the given role. A SENDER pushes keys to the
/// peer; a RECEIVER pulls (`labels` in the hello ask the peer what to send).
/// Returns how many keys moved.
pub fn provision_keys(
    cfg: &ProvisionConfig,
    node_type: NodeType,
    peer_endpoint: &str,
) -> Result<u32, ProtocolError> {
    let session = new_session_id();
    let own_platform = cfg.vault.tee().platform_id();

    let mut chan = cfg.connector.connect(peer_endpoint)?;
    send_msg(
        chan.as_mut(),
        FrameType::ProvisionHello,
        session,
        &ProvisionHelloMsg {
            platform_id: own_platform,
            node_type,
            labels: cfg.labels.map(|l| l.to_vec()).unwrap_or_default(),
        },
    )?;
    let accept: ProvisionAcceptMsg = expect_msg(
        chan.as_mut(),
        FrameType::ProvisionAccept,
        "PROVISION_ACCEPT",
        session,
    )?;

    // sanction check before any quote leaves this side
    let sanctioned = sanction_peer(cfg, accept.platform_id)?;

    let (own_kx, eph_handle) = make_keyex(cfg)?;
    send_msg(
        chan.as_mut(),
        FrameType::ProvisionKeyExchange,
        session,
        &own_kx,
    )?;
    let peer_kx: ProvisionKeyExchangeMsg = expect_msg(
        chan.as_mut(),
        FrameType::ProvisionKeyExchange,
        "PROVISION_KEYEX",
        session,
    )?;
    verify_peer_keyex(cfg, &peer_kx, &accept.platform_id, &sanctioned)?;

    let t = transcript(&session, &own_platform, &accept.platform_id, &own_kx, &peer_kx);
    let mut channel = cfg.vault.ecdh_derive_and_discard(
        eph_handle,
        &peer_kx.eph_pk,
        t,
        ChannelRole::Initiator,
        cfg.pin,
    )?;

    match node_type {
        NodeType::Sender => {
            let ciphertext =
                cfg.vault
                    .export_keys_for_provisioning(cfg.labels, cfg.pin, &mut channel)?;
            send_msg(
                chan.as_mut(),
                FrameType::ProvisionPayload,
                session,
                &CipherMsg { ciphertext },
            )?;
            let done: ProvisionDoneMsg = expect_msg(
                chan.as_mut(),
                FrameType::ProvisionDone,
                "PROVISION_DONE",
                session,
            )?;
            Ok(done.stored)
        }
        NodeType::Receiver => {
            let payload: CipherMsg = expect_msg(
                chan.as_mut(),
                FrameType::ProvisionPayload,
                "PROVISION_PAYLOAD",
                session,
            )?;
            let infos = import_payload(cfg.vault, cfg.pin, &payload.ciphertext, &mut channel)?;
            send_msg(
                chan.as_mut(),
                FrameType::ProvisionDone,
                session,
                &ProvisionDoneMsg {
                    stored: infos.len() as u32,
                },
            )?;
            Ok(infos.len() as u32)
        }
    }
}

/// Responder side; `first` is the PROVISION_HELLO frame. The responder takes
/// the complementary role.
pub fn provision_responder(
    cfg: &ProvisionConfig,
    chan: &mut dyn FrameChannel,
    first: Frame,
) -> Result<u32, ProtocolError> {
    let session = first.session_id;
    match serve_provision(cfg, chan, &first) {
        Ok(n) => Ok(n),
        Err(e) => {
            send_error(chan, session, e.wire_code(), e.step_tag(), &e.to_string());
            Err(e)
        }
    }
}

fn serve_provision(
    cfg: &ProvisionConfig,
    chan: &mut dyn FrameChannel,
    first: &Frame,
) -> Result<u32, ProtocolError> {
    let session = first.session_id;
    let hello = ProvisionHelloMsg::from_bytes(&first.payload)?;
    let own_platform = cfg.vault.tee().platform_id();
    let own_type = hello.node_type.complement();

    // sanction the initiator before answering at all
    let sanctioned = sanction_peer(cfg, hello.platform_id)?;

    send_msg(
        chan,
        FrameType::ProvisionAccept,
        session,
        &ProvisionAcceptMsg {
            platform_id: own_platform,
        },
    )?;

    let peer_kx: ProvisionKeyExchangeMsg = expect_msg(
        chan,
        FrameType::ProvisionKeyExchange,
        "PROVISION_KEYEX",
        session,
    )?;
    verify_peer_keyex(cfg, &peer_kx, &hello.platform_id, &sanctioned)?;

    let (own_kx, eph_handle) = make_keyex(cfg)?;
    send_msg(chan, FrameType::ProvisionKeyExchange, session, &own_kx)?;

    let t = transcript(&session, &hello.platform_id, &own_platform, &peer_kx, &own_kx);
    let mut channel = cfg.vault.ecdh_derive_and_discard(
        eph_handle,
        &peer_kx.eph_pk,
        t,
        ChannelRole::Responder,
        cfg.pin,
    )?;

    match own_type {
        NodeType::Receiver => {
            let payload: CipherMsg =
                expect_msg(chan, FrameType::ProvisionPayload, "PROVISION_PAYLOAD", session)?;
            let infos = import_payload(cfg.vault, cfg.pin, &payload.ciphertext, &mut channel)?;
            send_msg(
                chan,
                FrameType::ProvisionDone,
                session,
                &ProvisionDoneMsg {
                    stored: infos.len() as u32,
                },
            )?;
            Ok(infos.len() as u32)
        }
        NodeType::Sender => {
            let labels: Option<Vec<String>> = if hello.labels.is_empty() {
                None
            } else {
                Some(hello.labels.clone())
            };
            let ciphertext = cfg.vault.export_keys_for_provisioning(
                labels.as_deref(),
                cfg.pin,
                &mut channel,
            )?;
            send_msg(
                chan,
                FrameType::ProvisionPayload,
                session,
                &CipherMsg { ciphertext },
            )?;
            let done: ProvisionDoneMsg =
                expect_msg(chan, FrameType::ProvisionDone, "PROVISION_DONE", session)?;
            Ok(done.stored)
        }
    }
}

fn import_payload(
    vault: &Vault,
    pin: &[u8],
    ciphertext: &[u8],
    channel: &mut crypto::SecureChannel,
) -> Result<Vec<KeyInfo>, ProtocolError> {
    vault
        .import_provisioned_keys(ciphertext, pin, channel)
        .map_err(|e| match e {
            crate::keyvault::VaultError::DecryptFailure => ProtocolError::DecryptFailure,
            other => ProtocolError::Vault(other),
        })
}

/// Backup is provisioning of the full key set to a sanctioned peer.
pub fn backup(cfg: &ProvisionConfig, peer_endpoint: &str) -> Result<u32, ProtocolError> {
    let full = ProvisionConfig {
        labels: None,
        ..*cfg
    };
    provision_keys(&full, NodeType::Sender, peer_endpoint)
}

//! Website-to-CDN private key transfer.
//!
//! A SIGMA-style authenticated exchange: each side sends its certificate, a
//! fresh quote binding the certificate's public key, an ephemeral ECDH key,
//! and a signature over that ephemeral key under the certificate key.
//! Quote first, then signature; abort on the first failure, always before
//! the encrypted-key message exists. The channel key is derived from the
//! ECDH secret and a transcript hash over both handshake messages, and the
//! ephemeral private keys are destroyed at derivation.

use crate::crypto::{self, ChannelRole, Hash};
use crate::framing::{Connector, Frame, FrameChannel, FrameType};
use crate::keyvault::Vault;
use crate::wire::{Wire, Writer};

use super::{
    expect_msg, new_session_id, send_error, send_msg, CipherMsg, PeerVerification, ProtocolError,
    SessionId, TransferDoneMsg, TransferMsg,
};

const LABEL_TRANSFER_SIG: &str = "bf/transfer-sig/v1";
const LABEL_TRANSFER_TRANSCRIPT: &str = "bf/transfer-transcript/v1";

fn eph_sig_payload(session: &SessionId, role: ChannelRole, eph_pk: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_str(LABEL_TRANSFER_SIG);
    w.put_fixed(session);
    w.put_u8(match role {
        ChannelRole::Initiator => 1,
        ChannelRole::Responder => 2,
    });
    w.put_bytes(eph_pk);
    w.finish()
}

fn transcript_hash(session: &SessionId, hello: &TransferMsg, accept: &TransferMsg) -> Hash {
    let mut w = Writer::new();
    w.put_str(LABEL_TRANSFER_TRANSCRIPT);
    w.put_fixed(session);
    hello.encode(&mut w);
    accept.encode(&mut w);
    crypto::sha256(&w.finish())
}

/// Builds one direction of the handshake: cert, fresh quote binding the
/// cert key, ephemeral key, signature over the ephemeral key.
fn make_handshake_msg(
    vault: &Vault,
    pin: &[u8],
    cert_handle: u64,
    quote_type: crate::attestation::QuoteType,
    session: &SessionId,
    role: ChannelRole,
) -> Result<(TransferMsg, u64), ProtocolError> {
    let cert = vault
        .cert_for(cert_handle)?
        .ok_or_else(|| ProtocolError::NotFound("no certificate stored for key".into()))?;
    let quote = vault.quote_binding(&cert.subject_public_key.to_bytes(), quote_type, pin)?;
    let (eph_handle, eph_pk) = vault.ecdh_generate_ephemeral(pin)?;
    let sig = vault.sign(cert_handle, &eph_sig_payload(session, role, &eph_pk), pin)?;
    Ok((
        TransferMsg {
            cert,
            quote,
            eph_pk,
            sig,
        },
        eph_handle,
    ))
}

/// Verifies the peer's half: quote over the peer certificate key first,
/// then the signature over the peer ephemeral key. Distinct errors so the
/// adversarial tests can tell which gate tripped.
fn verify_handshake_msg(
    peer: &PeerVerification,
    msg: &TransferMsg,
    session: &SessionId,
    peer_role: ChannelRole,
) -> Result<(), ProtocolError> {
    peer.verify_quote(&msg.quote, &msg.cert.subject_public_key.to_bytes())
        .map_err(|e| match e {
            ProtocolError::QuoteInvalid(r) => ProtocolError::PeerQuoteInvalid(r),
            other => other,
        })?;
    let payload = eph_sig_payload(session, peer_role, &msg.eph_pk);
    if !crypto::verify_with(&msg.cert.subject_public_key, &payload, &msg.sig) {
        return Err(ProtocolError::PeerSignatureInvalid);
    }
    Ok(())
}

pub struct TransferConfig<'a> {
    pub vault: &'a Vault,
    pub pin: &'a [u8],
    /// Handle of the key whose certificate authenticates this side.
    pub cert_handle: u64,
    pub quote_type: crate::attestation::QuoteType,
    pub peer: PeerVerification<'a>,
}

/// Website side: pushes the private key of `cert_handle` to the peer.
pub fn transfer_initiator(
    cfg: &TransferConfig,
    connector: &dyn Connector,
    peer_endpoint: &str,
) -> Result<(), ProtocolError> {
    let session = new_session_id();
    let (hello, eph_handle) = make_handshake_msg(
        cfg.vault,
        cfg.pin,
        cfg.cert_handle,
        cfg.quote_type,
        &session,
        ChannelRole::Initiator,
    )?;

    let mut chan = connector.connect(peer_endpoint)?;
    send_msg(chan.as_mut(), FrameType::TransferHello, session, &hello)?;
    let accept: TransferMsg = expect_msg(
        chan.as_mut(),
        FrameType::TransferAccept,
        "TRANSFER_ACCEPT",
        session,
    )?;

    // mutual authentication: this side verifies the responder before any
    // key material is derived or released
    verify_handshake_msg(&cfg.peer, &accept, &session, ChannelRole::Responder)?;

    let transcript = transcript_hash(&session, &hello, &accept);
    let mut channel = cfg.vault.ecdh_derive_and_discard(
        eph_handle,
        &accept.eph_pk,
        transcript,
        ChannelRole::Initiator,
        cfg.pin,
    )?;

    let label = cfg.vault.key_info(cfg.cert_handle)?.label;
    let ciphertext = cfg.vault.export_keys_for_provisioning(
        Some(std::slice::from_ref(&label)),
        cfg.pin,
        &mut channel,
    )?;
    send_msg(
        chan.as_mut(),
        FrameType::TransferPayload,
        session,
        &CipherMsg { ciphertext },
    )?;

    let done: TransferDoneMsg = expect_msg(
        chan.as_mut(),
        FrameType::TransferDone,
        "TRANSFER_DONE",
        session,
    )?;
    if done.label != label {
        return Err(ProtocolError::UnexpectedStep {
            expected: "TRANSFER_DONE for transferred label",
            got: done.label,
        });
    }
    Ok(())
}

/// CDN side: answers a TRANSFER_HELLO already read from the channel and
/// stores the received key as a fresh non-extractable object.
pub fn transfer_responder(
    cfg: &TransferConfig,
    chan: &mut dyn FrameChannel,
    first: Frame,
) -> Result<String, ProtocolError> {
    let session = first.session_id;
    match serve_transfer(cfg, chan, &first) {
        Ok(label) => Ok(label),
        Err(e) => {
            send_error(chan, session, e.wire_code(), e.step_tag(), &e.to_string());
            Err(e)
        }
    }
}

fn serve_transfer(
    cfg: &TransferConfig,
    chan: &mut dyn FrameChannel,
    first: &Frame,
) -> Result<String, ProtocolError> {
    let session = first.session_id;
    let hello = TransferMsg::from_bytes(&first.payload)?;

    // verify the initiator before revealing anything about this side
    verify_handshake_msg(&cfg.peer, &hello, &session, ChannelRole::Initiator)?;

    let (accept, eph_handle) = make_handshake_msg(
        cfg.vault,
        cfg.pin,
        cfg.cert_handle,
        cfg.quote_type,
        &session,
        ChannelRole::Responder,
    )?;
    send_msg(chan, FrameType::TransferAccept, session, &accept)?;

    let transcript = transcript_hash(&session, &hello, &accept);
    let mut channel = cfg.vault.ecdh_derive_and_discard(
        eph_handle,
        &hello.eph_pk,
        transcript,
        ChannelRole::Responder,
        cfg.pin,
    )?;

    let payload: CipherMsg = expect_msg(chan, FrameType::TransferPayload, "TRANSFER_PAYLOAD", session)?;
    let infos = cfg
        .vault
        .import_provisioned_keys(&payload.ciphertext, cfg.pin, &mut channel)
        .map_err(|e| match e {
            crate::keyvault::VaultError::DecryptFailure => ProtocolError::DecryptFailure,
            other => ProtocolError::Vault(other),
        })?;
    let label = infos
        .first()
        .map(|i| i.label.clone())
        .unwrap_or_default();
    send_msg(
        chan,
        FrameType::TransferDone,
        session,
        &TransferDoneMsg {
            label: label.clone(),
        },
    )?;
    Ok(label)
}

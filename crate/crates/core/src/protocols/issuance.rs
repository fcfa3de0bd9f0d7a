//! Certificate issuance between a website and a CA.
//!
//! The website fetches the CA certificate, runs the two inspection checks
//! on its embedded quote (correct enclave measurement; report_data binding
//! the CA's subject public key), has the quote's group signature judged by
//! the verification service, and only then generates a CSR with a fresh
//! vault key and its own quote. The CA inspects the CSR quote the same way
//! before signing.

use crate::attestation::QuoteType;
use crate::certkit::{self, BlindCert, Validity};
use crate::crypto::KeyAlgorithm;
use crate::framing::{Connector, Frame, FrameChannel, FrameType};
use crate::keyvault::Vault;

use super::{
    expect_msg, new_session_id, send_error, send_msg, CertDataMsg, IssueRequestMsg,
    IssueResponseMsg, PeerVerification, ProtocolError,
};

pub struct WebsiteIssuance<'a> {
    pub vault: &'a Vault,
    pub pin: &'a [u8],
    pub connector: &'a dyn Connector,
    pub ca_endpoint: &'a str,
    pub peer: PeerVerification<'a>,
    pub subject: &'a str,
    pub algorithm: KeyAlgorithm,
    pub csr_quote_type: QuoteType,
}

/// Runs the website side end to end. Returns the issued certificate and
/// the vault handle of its private key.
pub fn issuance_website(ctx: &WebsiteIssuance) -> Result<(BlindCert, u64), ProtocolError> {
    // step 1: obtain the CA certificate with its embedded quote
    let ca_cert = super::cert_fetch(ctx.connector, ctx.ca_endpoint)?;

    // step 2: the two inspection checks (measurement, report_data binding
    // the CA's subject public key) run locally; the group signature is then
    // judged by the verification service.
    let ca_quote = ca_cert
        .quote_extension()
        .map_err(|_| ProtocolError::CaQuoteInvalid(crate::attestation::QuoteRejection::Malformed))?;
    ctx.peer
        .verify_quote(&ca_quote, &crate::wire::Wire::to_bytes(&ca_cert.subject_public_key))
        .map_err(|e| match e {
            ProtocolError::QuoteInvalid(r) => ProtocolError::CaQuoteInvalid(r),
            other => other,
        })?;

    // step 3: generate the CSR and its quote inside the vault
    let (csr, handle, quote) = certkit::gen_csr(
        ctx.vault,
        ctx.subject,
        ctx.pin,
        ctx.algorithm,
        ctx.csr_quote_type,
    )?;

    // step 4: request issuance
    let mut chan = ctx.connector.connect(ctx.ca_endpoint)?;
    let session = new_session_id();
    send_msg(
        chan.as_mut(),
        FrameType::IssueRequest,
        session,
        &IssueRequestMsg {
            csr: csr.clone(),
            quote,
        },
    )?;
    let resp: IssueResponseMsg =
        expect_msg(chan.as_mut(), FrameType::IssueResponse, "ISSUE_RESPONSE", session)?;

    // step 5: accept only if the CA we inspected really issued it
    certkit::verify_cert(&resp.cert, &ca_cert, crate::unix_now())
        .map_err(ProtocolError::CertIssuerMismatch)?;
    if resp.cert.subject_public_key != csr.public_key {
        return Err(ProtocolError::CertIssuerMismatch(
            certkit::CertInvalid::Signature,
        ));
    }

    ctx.vault.store_cert(handle, resp.cert.clone(), ctx.pin)?;
    Ok((resp.cert, handle))
}

pub struct CaIssuance<'a> {
    pub vault: &'a Vault,
    pub pin: &'a [u8],
    pub ca_cert: &'a BlindCert,
    pub ca_handle: u64,
    /// Optional per the design: CAs may skip CSR quote verification, but the
    /// default is to verify.
    pub verify_csr_quote: bool,
    pub peer: PeerVerification<'a>,
    pub leaf_validity_secs: u64,
}

/// CA side of one issuance exchange. `frame` is the already-read
/// ISSUE_REQUEST frame; the response (or a step-tagged error frame) goes
/// back on the same channel.
pub fn handle_issue_request(
    ctx: &CaIssuance,
    chan: &mut dyn FrameChannel,
    frame: Frame,
) -> Result<(), ProtocolError> {
    let session = frame.session_id;
    match serve_issue(ctx, &frame) {
        Ok(cert) => {
            send_msg(
                chan,
                FrameType::IssueResponse,
                session,
                &IssueResponseMsg { cert },
            )?;
            Ok(())
        }
        Err(e) => {
            send_error(chan, session, e.wire_code(), e.step_tag(), &e.to_string());
            Err(e)
        }
    }
}

fn serve_issue(ctx: &CaIssuance, frame: &Frame) -> Result<BlindCert, ProtocolError> {
    let req = <IssueRequestMsg as crate::wire::Wire>::from_bytes(&frame.payload)?;
    if !req.csr.verify_pop() {
        ctx.vault
            .append_log("issuance_reject", &frame.payload, ctx.pin)?;
        return Err(ProtocolError::BadCsr);
    }
    if ctx.verify_csr_quote {
        // the quote must bind exactly the CSR public key and come from an
        // expected website build
        if let Err(e) = ctx
            .peer
            .verify_quote(&req.quote, &crate::wire::Wire::to_bytes(&req.csr.public_key))
        {
            ctx.vault
                .append_log("issuance_reject", &frame.payload, ctx.pin)?;
            return Err(e);
        }
    }
    let cert = certkit::issue_cert(
        &req.csr,
        ctx.ca_cert,
        ctx.vault,
        ctx.ca_handle,
        Validity::starting_now(ctx.leaf_validity_secs),
        ctx.pin,
        Some(&req.quote),
    )?;
    // one entry per served request; a replayed request shows up as a
    // duplicate params_hash in the log report
    ctx.vault
        .append_log("issue_cert", &frame.payload, ctx.pin)?;
    Ok(cert)
}

/// CA cert fetch handler: returns the current CA certificate (including the
/// quote extension and therefore the current SVN).
pub fn handle_cert_fetch(
    ca_cert: &BlindCert,
    chan: &mut dyn FrameChannel,
    frame: Frame,
) -> Result<(), ProtocolError> {
    send_msg(
        chan,
        FrameType::CertData,
        frame.session_id,
        &CertDataMsg {
            cert: ca_cert.clone(),
        },
    )
}

//! Framed message transport.
//!
//! Every message is one frame: magic `BFP1`, u16 type tag, 16-byte session
//! id, u32 big-endian payload length (capped at 16 MiB), payload. Transport
//! carries no security properties — confidentiality and authenticity come
//! entirely from the attestation and channel layers above.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

pub const FRAME_MAGIC: [u8; 4] = *b"BFP1";
pub const MAX_PAYLOAD: u32 = 16 * 1024 * 1024;
pub const SESSION_ID_LEN: usize = 16;

/// Protocol constants table: every message type's numeric tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum FrameType {
    CertFetch = 1,
    CertData = 2,
    IasVerify = 3,
    IasReport = 4,
    PckFetch = 5,
    PckEntry = 6,

    IssueRequest = 10,
    IssueResponse = 11,

    TransferHello = 20,
    TransferAccept = 21,
    TransferPayload = 22,
    TransferDone = 23,

    ProvisionHello = 30,
    ProvisionAccept = 31,
    ProvisionKeyExchange = 32,
    ProvisionPayload = 33,
    ProvisionDone = 34,

    CtlIssue = 40,
    CtlTransfer = 41,
    CtlProvision = 42,
    CtlBackup = 43,
    CtlResult = 44,

    Error = 90,
}

impl FrameType {
    pub const ALL: [FrameType; 20] = [
        FrameType::CertFetch,
        FrameType::CertData,
        FrameType::IasVerify,
        FrameType::IasReport,
        FrameType::PckFetch,
        FrameType::PckEntry,
        FrameType::IssueRequest,
        FrameType::IssueResponse,
        FrameType::TransferHello,
        FrameType::TransferAccept,
        FrameType::TransferPayload,
        FrameType::TransferDone,
        FrameType::ProvisionHello,
        FrameType::ProvisionAccept,
        FrameType::ProvisionKeyExchange,
        FrameType::ProvisionPayload,
        FrameType::ProvisionDone,
        FrameType::CtlIssue,
        FrameType::CtlTransfer,
        FrameType::CtlProvision,
        FrameType::CtlBackup,
        FrameType::CtlResult,
        FrameType::Error,
    ];

    pub fn from_tag(tag: u16) -> Option<FrameType> {
        Self::ALL.iter().copied().find(|t| *t as u16 == tag)
    }
}

// Keep the array length honest at compile time.
const _: () = assert!(FrameType::ALL.len() == 20 + 3);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub session_id: [u8; SESSION_ID_LEN],
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, session_id: [u8; SESSION_ID_LEN], payload: Vec<u8>) -> Self {
        Frame {
            frame_type,
            session_id,
            payload,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 2 + SESSION_ID_LEN + 4 + self.payload.len());
        out.extend_from_slice(&FRAME_MAGIC);
        out.extend_from_slice(&(self.frame_type as u16).to_be_bytes());
        out.extend_from_slice(&self.session_id);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    if frame.payload.len() as u32 > MAX_PAYLOAD {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    w.write_all(&frame.to_bytes())?;
    w.flush()
}

pub fn read_frame(r: &mut impl Read) -> io::Result<Frame> {
    let mut head = [0u8; 4 + 2 + SESSION_ID_LEN + 4];
    r.read_exact(&mut head)?;
    if head[..4] != FRAME_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad frame magic"));
    }
    let tag = u16::from_be_bytes(head[4..6].try_into().unwrap());
    let frame_type = FrameType::from_tag(tag)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("unknown type {tag}")))?;
    let session_id: [u8; SESSION_ID_LEN] = head[6..22].try_into().unwrap();
    let len = u32::from_be_bytes(head[22..26].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame payload {len} exceeds limit"),
        ));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(Frame {
        frame_type,
        session_id,
        payload,
    })
}

/// One end of a framed connection.
pub trait FrameChannel: Send {
    fn send(&mut self, frame: &Frame) -> io::Result<()>;
    fn recv(&mut self) -> io::Result<Frame>;
}

pub struct TcpFrameChannel {
    stream: TcpStream,
}

impl TcpFrameChannel {
    pub fn new(stream: TcpStream) -> Self {
        TcpFrameChannel { stream }
    }
}

impl FrameChannel for TcpFrameChannel {
    fn send(&mut self, frame: &Frame) -> io::Result<()> {
        write_frame(&mut self.stream, frame)
    }

    fn recv(&mut self) -> io::Result<Frame> {
        read_frame(&mut self.stream)
    }
}

/// Opens framed connections to named endpoints. The daemon uses TCP;
/// tests and the in-process demo use the memory network.
pub trait Connector: Send + Sync {
    fn connect(&self, endpoint: &str) -> io::Result<Box<dyn FrameChannel>>;
}

pub struct TcpConnector {
    pub timeout: std::time::Duration,
}

impl Default for TcpConnector {
    fn default() -> Self {
        TcpConnector {
            timeout: std::time::Duration::from_secs(30),
        }
    }
}

impl Connector for TcpConnector {
    fn connect(&self, endpoint: &str) -> io::Result<Box<dyn FrameChannel>> {
        let addr = endpoint
            .parse::<std::net::SocketAddr>()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let stream = TcpStream::connect_timeout(&addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        Ok(Box::new(TcpFrameChannel::new(stream)))
    }
}

// --- In-memory transport ---

/// Captured frame bytes, exactly as they crossed a channel.
#[derive(Clone, Default)]
pub struct FrameTap {
    frames: Arc<Mutex<Vec<Vec<u8>>>>,
}

impl FrameTap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, bytes: &[u8]) {
        self.frames.lock().unwrap().push(bytes.to_vec());
    }

    pub fn snapshot(&self) -> Vec<Vec<u8>> {
        self.frames.lock().unwrap().clone()
    }

    pub fn total_bytes(&self) -> usize {
        self.frames.lock().unwrap().iter().map(|f| f.len()).sum()
    }
}

/// One end of an in-memory duplex pipe carrying serialized frames.
pub struct MemChannel {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
    tap: Option<FrameTap>,
}

impl MemChannel {
    pub fn pair() -> (MemChannel, MemChannel) {
        let (tx_a, rx_b) = mpsc::channel();
        let (tx_b, rx_a) = mpsc::channel();
        (
            MemChannel {
                tx: tx_a,
                rx: rx_a,
                tap: None,
            },
            MemChannel {
                tx: tx_b,
                rx: rx_b,
                tap: None,
            },
        )
    }

    pub fn with_tap(mut self, tap: FrameTap) -> Self {
        self.tap = Some(tap);
        self
    }
}

impl FrameChannel for MemChannel {
    fn send(&mut self, frame: &Frame) -> io::Result<()> {
        let bytes = frame.to_bytes();
        if let Some(tap) = &self.tap {
            tap.record(&bytes);
        }
        self.tx
            .send(bytes)
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer closed"))
    }

    fn recv(&mut self) -> io::Result<Frame> {
        let bytes = self
            .rx
            .recv_timeout(std::time::Duration::from_secs(30))
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer closed or timed out"))?;
        read_frame(&mut &bytes[..])
    }
}

type ServiceHandler = Arc<dyn Fn(Box<dyn FrameChannel>) + Send + Sync>;

/// Registry of in-process services addressable by name. `connect` spawns
/// the service handler on the far end of a fresh pipe; an optional tap
/// records every frame that crosses any connection.
#[derive(Clone, Default)]
pub struct MemNetwork {
    services: Arc<Mutex<HashMap<String, ServiceHandler>>>,
    tap: Arc<Mutex<Option<FrameTap>>>,
}

impl MemNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_tap(&self, tap: FrameTap) {
        *self.tap.lock().unwrap() = Some(tap);
    }

    pub fn register<F>(&self, name: &str, handler: F)
    where
        F: Fn(Box<dyn FrameChannel>) + Send + Sync + 'static,
    {
        self.services
            .lock()
            .unwrap()
            .insert(name.to_string(), Arc::new(handler));
    }

    pub fn unregister(&self, name: &str) {
        self.services.lock().unwrap().remove(name);
    }
}

impl Connector for MemNetwork {
    fn connect(&self, endpoint: &str) -> io::Result<Box<dyn FrameChannel>> {
        let handler = self
            .services
            .lock()
            .unwrap()
            .get(endpoint)
            .cloned()
            .ok_or_else(|| {
                io::Error::new(io::ErrorKind::NotFound, format!("no service {endpoint}"))
            })?;
        let (client, server) = MemChannel::pair();
        let (client, server) = match self.tap.lock().unwrap().clone() {
            Some(tap) => (client.with_tap(tap.clone()), server.with_tap(tap)),
            None => (client, server),
        };
        std::thread::spawn(move || handler(Box::new(server)));
        Ok(Box::new(client))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip_over_buffer() {
        let frame = Frame::new(FrameType::CertFetch, [7u8; 16], b"payload".to_vec());
        let bytes = frame.to_bytes();
        assert_eq!(&bytes[..4], b"BFP1");
        let parsed = read_frame(&mut &bytes[..]).unwrap();
        assert_eq!(parsed, frame);
    }

    #[test]
    fn oversized_frame_rejected() {
        let mut bytes = Frame::new(FrameType::Error, [0; 16], vec![]).to_bytes();
        // rewrite the length field to exceed the cap
        bytes[22..26].copy_from_slice(&(MAX_PAYLOAD + 1).to_be_bytes());
        let err = read_frame(&mut &bytes[..]).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::InvalidData);
    }

    #[test]
    fn unknown_type_rejected() {
        let mut bytes = Frame::new(FrameType::Error, [0; 16], vec![]).to_bytes();
        bytes[4..6].copy_from_slice(&999u16.to_be_bytes());
        assert!(read_frame(&mut &bytes[..]).is_err());
    }

    #[test]
    fn mem_network_connects_and_taps() {
        let net = MemNetwork::new();
        let tap = FrameTap::new();
        net.set_tap(tap.clone());
        net.register("echo", |mut chan| {
            while let Ok(frame) = chan.recv() {
                let _ = chan.send(&frame);
            }
        });
        let mut client = net.connect("echo").unwrap();
        let frame = Frame::new(FrameType::CtlResult, [1; 16], b"hello".to_vec());
        client.send(&frame).unwrap();
        assert_eq!(client.recv().unwrap(), frame);
        assert_eq!(tap.snapshot().len(), 2);
    }
}

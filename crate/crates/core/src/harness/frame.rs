//! Length-prefixed frames and the two transports that carry them.
//!
//! A frame is `length(4, BE) ‖ tag(1) ‖ payload` with `length = |payload| + 1`.

use std::io::{self, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, Sender};

/// Upper bound on a frame's declared length.
pub const MAX_FRAME_LEN: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameTag {
    Open = 0x01,
    Request = 0x02,
    Reply = 0x03,
    Finish = 0x04,
    Attestation = 0x05,
    Refusal = 0x06,
}

impl FrameTag {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => FrameTag::Open,
            0x02 => FrameTag::Request,
            0x03 => FrameTag::Reply,
            0x04 => FrameTag::Finish,
            0x05 => FrameTag::Attestation,
            0x06 => FrameTag::Refusal,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("frame truncated: {got} of {expected} bytes")]
    Truncated { expected: usize, got: usize },
    #[error("unknown frame tag {0:#04x}")]
    UnknownTag(u8),
    #[error("frame length {0} out of range")]
    BadLength(u32),
    #[error("malformed payload: {0}")]
    Payload(String),
    #[error("peer closed the connection")]
    Closed,
    #[error("i/o: {0}")]
    Io(String),
}

impl From<io::Error> for FrameError {
    fn from(e: io::Error) -> Self {
        FrameError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub tag: FrameTag,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(tag: FrameTag, payload: impl Into<Vec<u8>>) -> Self {
        Frame {
            tag,
            payload: payload.into(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.payload.len());
        out.extend_from_slice(&(self.payload.len() as u32 + 1).to_be_bytes());
        out.push(self.tag as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    fn check_len(len: u32) -> Result<usize, FrameError> {
        if len == 0 || len > MAX_FRAME_LEN {
            return Err(FrameError::BadLength(len));
        }
        Ok(len as usize)
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < 4 {
            return Err(FrameError::Truncated {
                expected: 4,
                got: bytes.len(),
            });
        }
        let len = Self::check_len(u32::from_be_bytes(bytes[..4].try_into().unwrap()))?;
        if bytes.len() - 4 < len {
            return Err(FrameError::Truncated {
                expected: 4 + len,
                got: bytes.len(),
            });
        }
        if bytes.len() - 4 > len {
            return Err(FrameError::Payload("bytes after frame".into()));
        }
        let tag = FrameTag::from_byte(bytes[4]).ok_or(FrameError::UnknownTag(bytes[4]))?;
        Ok(Frame::new(tag, &bytes[5..]))
    }

    /// Reads one frame from a stream; a clean EOF before the header is `Closed`.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, FrameError> {
        let mut head = [0u8; 4];
        let got = read_full(r, &mut head)?;
        if got == 0 {
            return Err(FrameError::Closed);
        }
        if got < 4 {
            return Err(FrameError::Truncated { expected: 4, got });
        }
        let len = Self::check_len(u32::from_be_bytes(head))?;
        let mut body = vec![0u8; len];
        let got = read_full(r, &mut body)?;
        if got < len {
            return Err(FrameError::Truncated {
                expected: 4 + len,
                got: 4 + got,
            });
        }
        let tag = FrameTag::from_byte(body[0]).ok_or(FrameError::UnknownTag(body[0]))?;
        body.remove(0);
        Ok(Frame { tag, payload: body })
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize, FrameError> {
    let mut at = 0;
    while at < buf.len() {
        match r.read(&mut buf[at..]) {
            Ok(0) => break,
            Ok(n) => at += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(at)
}

/// `count(4) ‖ (len(4) ‖ message)*`: the messages of one protocol round.
pub fn encode_batch(msgs: &[Vec<u8>]) -> Vec<u8> {
    let mut out = (msgs.len() as u32).to_be_bytes().to_vec();
    for m in msgs {
        out.extend_from_slice(&(m.len() as u32).to_be_bytes());
        out.extend_from_slice(m);
    }
    out
}

pub fn decode_batch(bytes: &[u8]) -> Result<Vec<Vec<u8>>, FrameError> {
    let bad = || FrameError::Payload("batch truncated".into());
    let count = u32::from_be_bytes(bytes.get(..4).ok_or_else(bad)?.try_into().unwrap()) as usize;
    let mut at = 4;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32::from_be_bytes(bytes.get(at..at + 4).ok_or_else(bad)?.try_into().unwrap()) as usize;
        at += 4;
        out.push(bytes.get(at..at + len).ok_or_else(bad)?.to_vec());
        at += len;
    }
    if at != bytes.len() {
        return Err(FrameError::Payload("bytes after batch".into()));
    }
    Ok(out)
}

/// A bidirectional frame pipe with byte accounting.
pub trait Transport: Send {
    fn send(&mut self, frame: &Frame) -> Result<(), FrameError>;
    fn recv(&mut self) -> Result<Frame, FrameError>;
    /// Bytes written plus bytes read, frame headers included.
    fn bytes_on_wire(&self) -> u64;
}

/// In-process transport: each message is one encoded frame.
pub struct ChannelTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    bytes: u64,
}

pub fn channel_pair() -> (ChannelTransport, ChannelTransport) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        ChannelTransport {
            tx: a_tx,
            rx: a_rx,
            bytes: 0,
        },
        ChannelTransport {
            tx: b_tx,
            rx: b_rx,
            bytes: 0,
        },
    )
}

impl ChannelTransport {
    /// Sends raw bytes, framed or not.
    pub fn send_raw(&mut self, bytes: Vec<u8>) -> Result<(), FrameError> {
        self.bytes += bytes.len() as u64;
        self.tx.send(bytes).map_err(|_| FrameError::Closed)
    }
}

impl Transport for ChannelTransport {
    fn send(&mut self, frame: &Frame) -> Result<(), FrameError> {
        self.send_raw(frame.encode())
    }

    fn recv(&mut self) -> Result<Frame, FrameError> {
        let bytes = self.rx.recv().map_err(|_| FrameError::Closed)?;
        self.bytes += bytes.len() as u64;
        Frame::decode(&bytes)
    }

    fn bytes_on_wire(&self) -> u64 {
        self.bytes
    }
}

pub struct TcpTransport {
    stream: TcpStream,
    bytes: u64,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Self {
        let _ = stream.set_nodelay(true);
        TcpTransport { stream, bytes: 0 }
    }

    pub fn connect(addr: SocketAddr) -> Result<Self, FrameError> {
        Ok(Self::new(TcpStream::connect(addr)?))
    }

    pub fn stream_mut(&mut self) -> &mut TcpStream {
        &mut self.stream
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: &Frame) -> Result<(), FrameError> {
        let bytes = frame.encode();
        self.stream.write_all(&bytes)?;
        self.bytes += bytes.len() as u64;
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame, FrameError> {
        let f = Frame::read_from(&mut self.stream)?;
        self.bytes += 5 + f.payload.len() as u64;
        Ok(f)
    }

    fn bytes_on_wire(&self) -> u64 {
        self.bytes
    }
}

/// Loopback listener on `port` (0 picks a free port).
pub fn loopback_listener(port: u16) -> Result<TcpListener, FrameError> {
    Ok(TcpListener::bind((Ipv4Addr::LOCALHOST, port))?)
}

/// A connected loopback pair: `(client, server)`.
pub fn tcp_pair(port: u16) -> Result<(TcpTransport, TcpTransport), FrameError> {
    let listener = loopback_listener(port)?;
    let client = TcpTransport::connect(listener.local_addr()?)?;
    let (server, _) = listener.accept()?;
    Ok((client, TcpTransport::new(server)))
}

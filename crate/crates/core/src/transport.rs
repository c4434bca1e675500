//! Wire format and channels for the federation protocol.
//!
//! Every message travels as one frame:
//!
//! ```text
//! +--------+------+-----------+-------------+-----------------+
//! | "FFL1" | kind | round     | payload_len | payload         |
//! | 4 B    | u8   | u32 LE    | u32 LE      | payload_len B   |
//! +--------+------+-----------+-------------+-----------------+
//! ```
//!
//! Weight vectors are a `u32` LE count followed by that many LE IEEE-754 `f64`
//! values in canonical flatten order. Payloads per kind:
//!
//! * `INIT`: a JSON [`InitDocument`]
//! * `GLOBAL_WEIGHTS`: weights
//! * `CLIENT_UPDATE`: weights, `n_train` (u64 LE), validation loss (f64 LE)
//! * `STOP`: weights
//!
//! Two channels carry frames: an in-process pair built on `std::sync::mpsc`
//! and a TCP stream. Both count the exact number of bytes moved.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Architecture;

pub const MAGIC: [u8; 4] = *b"FFL1";
pub const HEADER_LEN: usize = 13;
/// Frames above this size are rejected before allocation.
pub const MAX_PAYLOAD: u32 = 64 * 1024 * 1024;
pub const DEFAULT_ROUND_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    Init = 1,
    GlobalWeights = 2,
    ClientUpdate = 3,
    Stop = 4,
}

impl TryFrom<u8> for MessageKind {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Self::Init),
            2 => Ok(Self::GlobalWeights),
            3 => Ok(Self::ClientUpdate),
            4 => Ok(Self::Stop),
            other => Err(Error::protocol(
                "kind",
                format!("unknown message kind {other}"),
            )),
        }
    }
}

/// Training settings the server hands every client in `INIT`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSpec {
    pub architecture: Architecture,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

/// JSON body of an `INIT` frame. Clients open a session with `Hello`; the server
/// answers with `Session`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitDocument {
    Hello { client_id: u32 },
    Session(SessionSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoundMessage {
    Init {
        round: u32,
        document: InitDocument,
    },
    GlobalWeights {
        round: u32,
        weights: Vec<f64>,
    },
    ClientUpdate {
        round: u32,
        weights: Vec<f64>,
        n_train: u64,
        val_loss: f64,
    },
    Stop {
        round: u32,
        weights: Vec<f64>,
    },
}

impl RoundMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            RoundMessage::Init { .. } => MessageKind::Init,
            RoundMessage::GlobalWeights { .. } => MessageKind::GlobalWeights,
            RoundMessage::ClientUpdate { .. } => MessageKind::ClientUpdate,
            RoundMessage::Stop { .. } => MessageKind::Stop,
        }
    }

    pub fn round(&self) -> u32 {
        match self {
            RoundMessage::Init { round, .. }
            | RoundMessage::GlobalWeights { round, .. }
            | RoundMessage::ClientUpdate { round, .. }
            | RoundMessage::Stop { round, .. } => *round,
        }
    }
}

fn put_weights(buf: &mut Vec<u8>, weights: &[f64]) -> Result<()> {
    let count = u32::try_from(weights.len())
        .map_err(|_| Error::protocol("weights", "more than u32::MAX values"))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for w in weights {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    Ok(())
}

/// Serializes a message into one frame.
pub fn encode(msg: &RoundMessage) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    match msg {
        RoundMessage::Init { document, .. } => payload = serde_json::to_vec(document)?,
        RoundMessage::GlobalWeights { weights, .. } | RoundMessage::Stop { weights, .. } => {
            put_weights(&mut payload, weights)?
        }
        RoundMessage::ClientUpdate {
            weights,
            n_train,
            val_loss,
            ..
        } => {
            put_weights(&mut payload, weights)?;
            payload.extend_from_slice(&n_train.to_le_bytes());
            payload.extend_from_slice(&val_loss.to_le_bytes());
        }
    }
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&l| l <= MAX_PAYLOAD)
        .ok_or_else(|| Error::protocol("payload_len", "payload too large"))?;
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(&MAGIC);
    frame.push(msg.kind() as u8);
    frame.extend_from_slice(&msg.round().to_le_bytes());
    frame.extend_from_slice(&len.to_le_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

#[derive(Debug, Clone, Copy)]
struct Header {
    kind: MessageKind,
    round: u32,
    payload_len: u32,
}

fn decode_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::protocol(
            "header",
            format!(
                "truncated frame: {} of {HEADER_LEN} header bytes",
                bytes.len()
            ),
        ));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::protocol(
            "magic",
            format!("bad magic {:?}", &bytes[..4]),
        ));
    }
    let kind = MessageKind::try_from(bytes[4])?;
    let round = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    let payload_len = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes"));
    if payload_len > MAX_PAYLOAD {
        return Err(Error::protocol(
            "payload_len",
            format!("{payload_len} exceeds limit"),
        ));
    }
    Ok(Header {
        kind,
        round,
        payload_len,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::protocol(field, "payload ends early"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, field)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, field)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(field)?))
    }

    fn weights(&mut self) -> Result<Vec<f64>> {
        let count = self.u32("weights")? as usize;
        if count > (self.bytes.len() - self.pos) / 8 {
            return Err(Error::protocol(
                "weights",
                format!("count {count} exceeds payload"),
            ));
        }
        (0..count).map(|_| self.f64("weights")).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::protocol(
                "payload_len",
                format!("{} trailing payload bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn decode_payload(header: Header, payload: &[u8]) -> Result<RoundMessage> {
    let mut cur = Cursor {
        bytes: payload,
        pos: 0,
    };
    let round = header.round;
    let msg = match header.kind {
        MessageKind::Init => {
            let document = serde_json::from_slice(payload)
                .map_err(|e| Error::protocol("init", e.to_string()))?;
            cur.pos = payload.len();
            RoundMessage::Init { round, document }
        }
        MessageKind::GlobalWeights => RoundMessage::GlobalWeights {
            round,
            weights: cur.weights()?,
        },
        MessageKind::ClientUpdate => RoundMessage::ClientUpdate {
            round,
            weights: cur.weights()?,
            n_train: cur.u64("n_train")?,
            val_loss: cur.f64("val_loss")?,
        },
        MessageKind::Stop => RoundMessage::Stop {
            round,
            weights: cur.weights()?,
        },
    };
    cur.finish()?;
    Ok(msg)
}

/// Parses exactly one complete frame.
pub fn decode(bytes: &[u8]) -> Result<RoundMessage> {
    let header = decode_header(bytes)?;
    let expected = HEADER_LEN + header.payload_len as usize;
    if bytes.len() < expected {
        return Err(Error::protocol(
            "payload",
            format!("truncated frame: {} of {expected} bytes", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::protocol(
            "payload_len",
            format!(
                "frame has {} bytes, header declares {expected}",
                bytes.len()
            ),
        ));
    }
    decode_payload(header, &bytes[HEADER_LEN..])
}

/// Bytes moved through one channel endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteCounters {
    pub sent: u64,
    pub received: u64,
}

/// A reliable, ordered, bidirectional message pipe.
pub trait Channel: Send {
    fn send(&mut self, msg: &RoundMessage) -> Result<()>;
    fn recv(&mut self) -> Result<RoundMessage>;
    fn counters(&self) -> ByteCounters;
}

/// One end of an in-process frame pipe.
pub struct InProcChannel {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
    counters: ByteCounters,
}

/// Two connected endpoints; frames are still encoded so byte counts match TCP.
pub fn inproc_pair(timeout: Duration) -> (InProcChannel, InProcChannel) {
    let (tx_a, rx_b) = mpsc::channel();
    let (tx_b, rx_a) = mpsc::channel();
    let end = |tx, rx| InProcChannel {
        tx,
        rx,
        timeout,
        counters: ByteCounters::default(),
    };
    (end(tx_a, rx_a), end(tx_b, rx_b))
}

impl Channel for InProcChannel {
    fn send(&mut self, msg: &RoundMessage) -> Result<()> {
        let frame = encode(msg)?;
        let len = frame.len() as u64;
        self.tx
            .send(frame)
            .map_err(|_| Error::Io(std::io::Error::new(ErrorKind::BrokenPipe, "peer hung up")))?;
        self.counters.sent += len;
        Ok(())
    }

    fn recv(&mut self) -> Result<RoundMessage> {
        let frame = self.rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::Io(std::io::Error::new(
                ErrorKind::TimedOut,
                "receive timed out",
            )),
            RecvTimeoutError::Disconnected => Error::Io(std::io::Error::new(
                ErrorKind::ConnectionAborted,
                "peer disconnected",
            )),
        })?;
        self.counters.received += frame.len() as u64;
        decode(&frame)
    }

    fn counters(&self) -> ByteCounters {
        self.counters
    }
}

pub struct TcpChannel {
    stream: TcpStream,
    counters: ByteCounters,
}

impl TcpChannel {
    pub fn new(stream: TcpStream, timeout: Duration) -> Result<Self> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(Self {
            stream,
            counters: ByteCounters::default(),
        })
    }

    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        Self::new(TcpStream::connect(addr)?, timeout)
    }

    pub fn peer_addr(&self) -> Result<SocketAddr> {
        Ok(self.stream.peer_addr()?)
    }
}

impl Channel for TcpChannel {
    fn send(&mut self, msg: &RoundMessage) -> Result<()> {
        let frame = encode(msg)?;
        self.stream.write_all(&frame)?;
        self.stream.flush()?;
        self.counters.sent += frame.len() as u64;
        Ok(())
    }

    fn recv(&mut self) -> Result<RoundMessage> {
        let mut head = [0u8; HEADER_LEN];
        self.stream.read_exact(&mut head)?;
        let header = decode_header(&head)?;
        let mut payload = vec![0u8; header.payload_len as usize];
        self.stream.read_exact(&mut payload)?;
        self.counters.received += (HEADER_LEN + payload.len()) as u64;
        decode_payload(header, &payload)
    }

    fn counters(&self) -> ByteCounters {
        self.counters
    }
}

/// A bound listener that hands out one [`TcpChannel`] per accepted client.
pub struct TcpServer {
    listener: TcpListener,
    timeout: Duration,
}

impl TcpServer {
    pub fn bind(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            timeout,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn accept(&self, n: usize) -> Result<Vec<TcpChannel>> {
        (0..n)
            .map(|_| {
                let (stream, _) = self.listener.accept()?;
                TcpChannel::new(stream, self.timeout)
            })
            .collect()
    }
}

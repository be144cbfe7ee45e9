use std::io::{self, Read};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use edgegrasp_tensor::Tensor;
use thiserror::Error;

use super::frame::{frame_encode, FrameError};
use super::{read_prefix, write_message, GraspResponse, Status, PREFIX_LEN};
use crate::codec::{CodecError, CodecModel};

/// Replies larger than this are treated as a protocol violation.
const MAX_REPLY_BYTES: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Encode(#[from] CodecError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("cannot resolve {0}")]
    Resolve(String),
    #[error("connecting to {addr}: {source}")]
    Connect { addr: SocketAddr, source: io::Error },
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport: {0}")]
    Io(io::Error),
    #[error("malformed reply: {0}")]
    Protocol(String),
    /// The server answered, but not with OK.
    #[error("server replied {status:?}: {message}")]
    Status { status: Status, message: String },
}

impl ClientError {
    /// Failures of the connection itself, as opposed to the server's answer.
    pub fn is_transport(&self) -> bool {
        matches!(self, Self::Resolve(_) | Self::Connect { .. } | Self::Timeout(_) | Self::Io(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientConfig {
    /// Applies to connecting and to every read and write.
    pub timeout: Duration,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraspReply {
    pub response: GraspResponse,
    /// Encode, send, server work and receive.
    pub latency_ms: f64,
    /// Frame bytes, excluding the length prefix.
    pub frame_bytes: usize,
    /// Everything written to the socket.
    pub sent_bytes: usize,
}

fn io_error(e: io::Error, timeout: Duration) -> ClientError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => ClientError::Timeout(timeout),
        _ => ClientError::Io(e),
    }
}

/// Sends one already-built frame and returns whatever the server answers.
pub fn exchange<A: ToSocketAddrs>(addr: A, frame: &[u8], cfg: &ClientConfig) -> Result<GraspResponse, ClientError> {
    let addrs: Vec<SocketAddr> = addr
        .to_socket_addrs()
        .map_err(|e| ClientError::Resolve(e.to_string()))?
        .collect();
    let first = *addrs.first().ok_or_else(|| ClientError::Resolve("no addresses".into()))?;
    let mut stream = TcpStream::connect_timeout(&first, cfg.timeout).map_err(|source| match source.kind() {
        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => ClientError::Timeout(cfg.timeout),
        _ => ClientError::Connect { addr: first, source },
    })?;
    let to = |e| io_error(e, cfg.timeout);
    stream.set_read_timeout(Some(cfg.timeout)).map_err(to)?;
    stream.set_write_timeout(Some(cfg.timeout)).map_err(to)?;
    stream.set_nodelay(true).map_err(to)?;
    write_message(&mut stream, frame).map_err(to)?;
    let len = read_prefix(&mut stream)
        .map_err(to)?
        .ok_or_else(|| ClientError::Protocol("connection closed without a reply".into()))?;
    if len > MAX_REPLY_BYTES {
        return Err(ClientError::Protocol(format!("reply of {len} bytes")));
    }
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body).map_err(to)?;
    serde_json::from_slice(&body).map_err(|e| ClientError::Protocol(e.to_string()))
}

/// Encodes `image` locally, sends the latent and waits for the grasps.
pub fn request_grasp<A: ToSocketAddrs>(
    addr: A,
    encoder: &CodecModel,
    image: &Tensor,
    cfg: &ClientConfig,
) -> Result<GraspReply, ClientError> {
    let start = Instant::now();
    let latent = encoder.encode(image)?;
    let frame = frame_encode(&latent)?;
    let response = exchange(addr, &frame, cfg)?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    if response.status != Status::Ok {
        return Err(ClientError::Status {
            status: response.status,
            message: response.message.unwrap_or_default(),
        });
    }
    Ok(GraspReply {
        response,
        latency_ms,
        frame_bytes: frame.len(),
        sent_bytes: frame.len() + PREFIX_LEN,
    })
}

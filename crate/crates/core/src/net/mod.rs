//! Edge-to-cloud transport: latent frames, the grasp server and its client.
//!
//! A session is a sequence of requests on one stream connection. Each request
//! is a `u32` LE length followed by a [`frame`]; each reply is a `u32` LE
//! length followed by a JSON [`GraspResponse`]. The server closes the session
//! after any non-OK reply.

pub mod client;
pub mod frame;
pub mod mismatch;
pub mod server;

pub use client::{exchange, request_grasp, ClientConfig, ClientError, GraspReply};
pub use frame::{frame_decode, frame_encode, frame_len, FrameError, CRC_LEN, HEADER_LEN};
pub use mismatch::{mismatch_gap, MismatchError, MismatchReport, MIN_MISMATCH_IMAGES};
pub use server::{CloudModels, Server, ServerConfig, ServerError, ServerHandle};

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::grasp::CandidateRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// The frame's model id is not the loaded decoder's.
    UnknownModel,
    BadFrame,
    FrameTooLarge,
    /// Well-formed frame whose latent shape the decoder cannot take.
    InvalidLatent,
    InternalError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspResponse {
    pub status: Status,
    /// Highest confidence first.
    pub candidates: Vec<CandidateRecord>,
    pub decode_ms: f64,
    pub detect_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl GraspResponse {
    pub fn failure(status: Status, message: impl Into<String>) -> Self {
        Self {
            status,
            candidates: Vec::new(),
            decode_ms: 0.0,
            detect_ms: 0.0,
            message: Some(message.into()),
        }
    }
}

/// Bytes of the length prefix that precedes every message.
pub const PREFIX_LEN: usize = 4;

pub(crate) fn write_message<W: Write>(w: &mut W, body: &[u8]) -> io::Result<()> {
    let len = u32::try_from(body.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "message over 4 GiB"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// `Ok(None)` on a clean end of stream before any prefix byte.
pub(crate) fn read_prefix<R: Read>(r: &mut R) -> io::Result<Option<usize>> {
    let mut buf = [0u8; PREFIX_LEN];
    let mut got = 0;
    while got < PREFIX_LEN {
        match r.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(Some(u32::from_le_bytes(buf) as usize))
}

//! The `GWF1` latent frame.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "GWF1"
//!      4     2  version (u16 LE)
//!      6     8  model id (u64 LE)
//!     14     2  channels (u16 LE)
//!     16     2  height (u16 LE)
//!     18     2  width (u16 LE)
//!     20     1  element kind (0 = f32)
//!     21     n  payload, channels·height·width LE elements
//!   21+n     4  CRC-32 of everything before it (u32 LE)
//! ```

use edgegrasp_tensor::Tensor;
use thiserror::Error;

use crate::codec::Latent;

pub const FRAME_MAGIC: [u8; 4] = *b"GWF1";
pub const FRAME_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 21;
pub const CRC_LEN: usize = 4;
pub const ELEMENT_F32: u8 = 0;
const ELEMENT_SIZE: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame of {0} bytes is shorter than header and checksum")]
    Truncated(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown element kind {0}")]
    UnknownElementKind(u8),
    #[error("frame declares zero extent {0:?}")]
    ZeroExtent([u16; 3]),
    #[error("frame length {actual} does not match the {expected} bytes its header declares")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("checksum mismatch: frame says {stored:08x}, content hashes to {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("payload element {0} is not finite")]
    NonFinite(usize),
    #[error("latent shape {0:?} cannot be framed")]
    Unframeable(Vec<usize>),
}

/// Bytes on the wire for a `c×h×w` latent.
pub fn frame_len(channels: usize, height: usize, width: usize) -> usize {
    HEADER_LEN + channels * height * width * ELEMENT_SIZE + CRC_LEN
}

pub fn frame_encode(latent: &Latent) -> Result<Vec<u8>, FrameError> {
    let shape = latent.tensor.shape();
    let dims: [u16; 3] = match shape {
        [c, h, w] => {
            let d = [*c, *h, *w].map(|v| u16::try_from(v).unwrap_or(0));
            if d.contains(&0) {
                return Err(FrameError::Unframeable(shape.to_vec()));
            }
            d
        }
        _ => return Err(FrameError::Unframeable(shape.to_vec())),
    };
    if let Some(i) = latent.tensor.data().iter().position(|v| !v.is_finite()) {
        return Err(FrameError::NonFinite(i));
    }
    let mut out = Vec::with_capacity(frame_len(shape[0], shape[1], shape[2]));
    out.extend_from_slice(&FRAME_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    out.extend_from_slice(&latent.model_id.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(ELEMENT_F32);
    for v in latent.tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

pub fn frame_decode(bytes: &[u8]) -> Result<Latent, FrameError> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(FrameError::Truncated(bytes.len()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("length checked");
    if magic != FRAME_MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    let version = u16_at(bytes, 4);
    if version != FRAME_VERSION {
        return Err(FrameError::UnsupportedVersion(version));
    }
    let model_id = u64::from_le_bytes(bytes[6..14].try_into().expect("length checked"));
    let dims = [u16_at(bytes, 14), u16_at(bytes, 16), u16_at(bytes, 18)];
    let kind = bytes[20];
    if kind != ELEMENT_F32 {
        return Err(FrameError::UnknownElementKind(kind));
    }
    if dims.contains(&0) {
        return Err(FrameError::ZeroExtent(dims));
    }
    let [c, h, w] = dims.map(usize::from);
    let expected = frame_len(c, h, w);
    if bytes.len() != expected {
        return Err(FrameError::LengthMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let body = &bytes[..expected - CRC_LEN];
    let stored = u32::from_le_bytes(bytes[expected - CRC_LEN..].try_into().expect("length checked"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FrameError::CrcMismatch { stored, computed });
    }
    let data: Vec<f32> = body[HEADER_LEN..]
        .chunks_exact(ELEMENT_SIZE)
        .map(|b| f32::from_le_bytes(b.try_into().expect("exact chunks")))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(FrameError::NonFinite(i));
    }
    let tensor = Tensor::new(vec![c, h, w], data).expect("length matches header");
    Ok(Latent { tensor, model_id })
}

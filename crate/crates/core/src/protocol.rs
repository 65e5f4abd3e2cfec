//! Length-prefixed binary framing between client and cloud worker.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "PBLS"
//!      4     1  version (1)
//!      5     1  opcode
//!      6     8  session id, u64 LE
//!     14     8  payload length, u64 LE
//!     22     n  payload
//! ```
//!
//! Request payloads are serialized matrices (see [`DenseMatrix::to_bytes`]).
//! An ERROR payload is a `u16 LE` code followed by a UTF-8 message.

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, ProtocolErrorKind, RemoteErrorCode, Result};
use crate::matrix::DenseMatrix;

pub const MAGIC: [u8; 4] = *b"PBLS";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;
/// Largest payload accepted in either direction.
pub const MAX_PAYLOAD: u64 = 1 << 32;
pub const DEFAULT_PORT: u16 = 7541;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    GramReq,
    GramResp,
    InvProdReq,
    InvProdResp,
    Error,
}

impl Opcode {
    pub fn to_byte(self) -> u8 {
        match self {
            Opcode::GramReq => 0x01,
            Opcode::GramResp => 0x81,
            Opcode::InvProdReq => 0x02,
            Opcode::InvProdResp => 0x82,
            Opcode::Error => 0xFF,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x01 => Some(Opcode::GramReq),
            0x81 => Some(Opcode::GramResp),
            0x02 => Some(Opcode::InvProdReq),
            0x82 => Some(Opcode::InvProdResp),
            0xFF => Some(Opcode::Error),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: Opcode,
    pub session_id: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(opcode: Opcode, session_id: u64, payload: Vec<u8>) -> Self {
        Frame {
            opcode,
            session_id,
            payload,
        }
    }

    pub fn with_matrix(opcode: Opcode, session_id: u64, m: &DenseMatrix) -> Self {
        Frame::new(opcode, session_id, m.to_bytes())
    }

    pub fn error(session_id: u64, code: RemoteErrorCode, message: &str) -> Self {
        let mut payload = Vec::with_capacity(2 + message.len());
        payload.extend_from_slice(&code.to_u16().to_le_bytes());
        payload.extend_from_slice(message.as_bytes());
        Frame::new(Opcode::Error, session_id, payload)
    }

    /// Decodes the payload as a serialized matrix.
    pub fn matrix(&self) -> Result<DenseMatrix> {
        DenseMatrix::from_bytes(&self.payload)
    }

    /// Decodes an ERROR payload.
    pub fn remote_error(&self) -> Result<(RemoteErrorCode, String)> {
        if self.opcode != Opcode::Error || self.payload.len() < 2 {
            return Err(Error::protocol(
                ProtocolErrorKind::MalformedPayload,
                "not an ERROR frame",
            ));
        }
        let code = u16::from_le_bytes([self.payload[0], self.payload[1]]);
        let message = String::from_utf8_lossy(&self.payload[2..]).into_owned();
        Ok((RemoteErrorCode::from_u16(code), message))
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        encode_frame(self)
    }

    /// Decodes a buffer holding exactly one frame.
    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let mut cursor = bytes;
        let frame = decode_frame(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::protocol(
                ProtocolErrorKind::TrailingBytes,
                format!("{} bytes after frame", cursor.len()),
            ));
        }
        Ok(frame)
    }
}

pub fn encode_frame(f: &Frame) -> Result<Vec<u8>> {
    let len = f.payload.len() as u64;
    if len > MAX_PAYLOAD {
        return Err(Error::protocol(
            ProtocolErrorKind::Oversize,
            format!("payload of {len} bytes exceeds {MAX_PAYLOAD}"),
        ));
    }
    let mut out = Vec::with_capacity(f.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(f.opcode.to_byte());
    out.extend_from_slice(&f.session_id.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&f.payload);
    Ok(out)
}

pub fn write_frame<W: Write>(mut w: W, f: &Frame) -> Result<()> {
    let bytes = encode_frame(f)?;
    w.write_all(&bytes).map_err(transport)?;
    w.flush().map_err(transport)?;
    Ok(())
}

fn transport(e: std::io::Error) -> Error {
    Error::protocol(ProtocolErrorKind::Transport, e.to_string())
}

/// Fills `buf`, retrying short and interrupted reads. Returns the number of
/// bytes read, which is less than `buf.len()` only at end of stream.
fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(transport(e)),
        }
    }
    Ok(filled)
}

/// Reads one frame from a stream.
pub fn decode_frame<R: Read>(r: &mut R) -> Result<Frame> {
    read_frame(r)?.ok_or_else(|| {
        Error::protocol(
            ProtocolErrorKind::Truncated,
            "stream ended before a frame header",
        )
    })
}

/// Reads one frame, or `None` if the stream ends cleanly before any byte.
///
/// The header is validated in full before the payload buffer is allocated.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>> {
    let mut header = [0u8; HEADER_LEN];
    let got = fill(r, &mut header)?;
    if got == 0 {
        return Ok(None);
    }
    if header[..got.min(4)] != MAGIC[..got.min(4)] {
        return Err(Error::protocol(
            ProtocolErrorKind::BadMagic,
            format!("expected \"PBLS\", got {:?}", &header[..got.min(4)]),
        ));
    }
    if got < HEADER_LEN {
        return Err(Error::protocol(
            ProtocolErrorKind::Truncated,
            format!("header has {got} of {HEADER_LEN} bytes"),
        ));
    }
    if header[4] != VERSION {
        return Err(Error::protocol(
            ProtocolErrorKind::UnsupportedVersion,
            format!("version {} (supported: {VERSION})", header[4]),
        ));
    }
    let opcode = Opcode::from_byte(header[5]).ok_or_else(|| {
        Error::protocol(
            ProtocolErrorKind::UnknownOpcode,
            format!("opcode {:#04x}", header[5]),
        )
    })?;
    let session_id = u64::from_le_bytes(header[6..14].try_into().unwrap());
    let len = u64::from_le_bytes(header[14..22].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(Error::protocol(
            ProtocolErrorKind::Oversize,
            format!("payload length {len} exceeds {MAX_PAYLOAD}"),
        ));
    }
    let mut payload = vec![0u8; len as usize];
    let got = fill(r, &mut payload)?;
    if got < payload.len() {
        return Err(Error::protocol(
            ProtocolErrorKind::Truncated,
            format!("payload has {got} of {len} bytes"),
        ));
    }
    Ok(Some(Frame {
        opcode,
        session_id,
        payload,
    }))
}

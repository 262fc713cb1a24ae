//! Wire framing.
//!
//! ```text
//! +------+------+------+------+---------+---------+----------------+---------+
//! | 0x47 | 0x44 | 0x4D | 0x46 | version | msgType | payloadLen u32 | payload |
//! +------+------+------+------+---------+---------+----------------+---------+
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"GDMF";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 10;
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Deposit = 0x01,
    Claim = 0x02,
    ClaimReply = 0x03,
    Fulfill = 0x04,
    Fetch = 0x05,
    FetchReply = 0x06,
    Await = 0x07,
    ResourcePut = 0x08,
    ResourceGet = 0x09,
    System = 0x0A,
    Stats = 0x0B,
    Ok = 0x7E,
    Err = 0x7F,
}

impl MsgType {
    pub fn from_code(code: u8) -> Option<Self> {
        use MsgType::*;
        Some(match code {
            0x01 => Deposit,
            0x02 => Claim,
            0x03 => ClaimReply,
            0x04 => Fulfill,
            0x05 => Fetch,
            0x06 => FetchReply,
            0x07 => Await,
            0x08 => ResourcePut,
            0x09 => ResourceGet,
            0x0A => System,
            0x0B => Stats,
            0x7E => Ok,
            0x7F => Err,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0:#04x}")]
    BadVersion(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownMsgType(u8),
    #[error("payload of {0} bytes exceeds frame limit")]
    TooLarge(usize),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Self { msg_type, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_frame(self.msg_type, &self.payload)
    }
}

pub fn encode_frame(msg_type: MsgType, payload: &[u8]) -> Vec<u8> {
    assert!(payload.len() <= MAX_PAYLOAD, "frame payload too large");
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg_type.code());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

/// Validates a 10-byte header and returns the message type and payload length.
pub fn parse_header(header: &[u8; HEADER_LEN]) -> Result<(MsgType, usize), FrameError> {
    let magic: [u8; 4] = header[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    if header[4] != VERSION {
        return Err(FrameError::BadVersion(header[4]));
    }
    let msg_type = MsgType::from_code(header[5]).ok_or(FrameError::UnknownMsgType(header[5]))?;
    let len = u32::from_be_bytes(header[6..10].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::TooLarge(len));
    }
    Ok((msg_type, len))
}

/// Decodes one frame from the front of `buf`. Returns `Ok(None)` when more
/// bytes are needed, otherwise the frame and the number of bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Frame, usize)>, FrameError> {
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    let (msg_type, len) = parse_header(buf[..HEADER_LEN].try_into().unwrap())?;
    if buf.len() < HEADER_LEN + len {
        return Ok(None);
    }
    let payload = buf[HEADER_LEN..HEADER_LEN + len].to_vec();
    Ok(Some((Frame { msg_type, payload }, HEADER_LEN + len)))
}

/// Splits a buffer of concatenated frames. Trailing partial data is an error.
pub fn decode_all(mut buf: &[u8]) -> Result<Vec<Frame>, FrameError> {
    let mut frames = Vec::new();
    while !buf.is_empty() {
        match decode_frame(buf)? {
            Some((frame, used)) => {
                frames.push(frame);
                buf = &buf[used..];
            }
            None => return Err(FrameError::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated frame"))),
        }
    }
    Ok(frames)
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, FrameError> {
    let mut header = [0u8; HEADER_LEN];
    if let Err(e) = r.read_exact(&mut header) {
        return Err(if e.kind() == io::ErrorKind::UnexpectedEof { FrameError::Closed } else { FrameError::Io(e) });
    }
    let (msg_type, len) = parse_header(&header)?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Frame { msg_type, payload })
}

pub fn write_frame<W: Write>(w: &mut W, msg_type: MsgType, payload: &[u8]) -> io::Result<()> {
    w.write_all(&encode_frame(msg_type, payload))?;
    w.flush()
}

//! Wire frames shared by plug-ins, cluster workers and the served runtime.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "UPM1" | version u8 | kind u8 | job_id u64 | dev_len u16 | device_id | pay_len u32 | payload | crc32
//! ```
//!
//! The CRC-32 (IEEE) covers every byte after the magic and before the CRC.

use std::io::{self, Read, Write};

use crate::error::{Result, UpmError};

pub const MAGIC: [u8; 4] = *b"UPM1";
pub const VERSION: u8 = 1;

/// Bytes before the device id: magic, version, kind, job id, device-id length.
const HEAD_LEN: usize = 4 + 1 + 1 + 8 + 2;
const CRC_LEN: usize = 4;
/// Size of a frame with empty device id and payload.
pub const MIN_FRAME_LEN: usize = HEAD_LEN + 4 + CRC_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Hello = 1,
    Request = 2,
    Response = 3,
    Error = 4,
    Control = 5,
    Bye = 6,
}

impl FrameKind {
    pub fn from_byte(b: u8) -> Option<FrameKind> {
        Some(match b {
            1 => FrameKind::Hello,
            2 => FrameKind::Request,
            3 => FrameKind::Response,
            4 => FrameKind::Error,
            5 => FrameKind::Control,
            6 => FrameKind::Bye,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub version: u8,
    pub kind: FrameKind,
    pub job_id: u64,
    pub device_id: String,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameKind, job_id: u64, device_id: impl Into<String>, payload: impl Into<Vec<u8>>) -> Frame {
        Frame { version: VERSION, kind, job_id, device_id: device_id.into(), payload: payload.into() }
    }

    pub fn hello(payload: impl Into<Vec<u8>>) -> Frame {
        Frame::new(FrameKind::Hello, 0, "", payload)
    }

    pub fn bye() -> Frame {
        Frame::new(FrameKind::Bye, 0, "", Vec::new())
    }

    pub fn error(job_id: u64, err: &UpmError) -> Frame {
        Frame::new(FrameKind::Error, job_id, "", err.to_string())
    }

    pub fn payload_str(&self) -> std::result::Result<&str, std::str::Utf8Error> {
        std::str::from_utf8(&self.payload)
    }

    pub fn encoded_len(&self) -> usize {
        MIN_FRAME_LEN + self.device_id.len() + self.payload.len()
    }

    /// Encodes the frame. Panics if the device id or payload exceed their
    /// length fields; callers construct frames within those limits.
    pub fn encode(&self) -> Vec<u8> {
        encode_frame(self)
    }
}

pub fn encode_frame(f: &Frame) -> Vec<u8> {
    let dev_len = u16::try_from(f.device_id.len()).expect("device id longer than 65535 bytes");
    let pay_len = u32::try_from(f.payload.len()).expect("payload longer than u32::MAX bytes");
    let mut out = Vec::with_capacity(f.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(f.version);
    out.push(f.kind as u8);
    out.extend_from_slice(&f.job_id.to_le_bytes());
    out.extend_from_slice(&dev_len.to_le_bytes());
    out.extend_from_slice(f.device_id.as_bytes());
    out.extend_from_slice(&pay_len.to_le_bytes());
    out.extend_from_slice(&f.payload);
    let crc = crc32fast::hash(&out[MAGIC.len()..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn truncated() -> UpmError {
    UpmError::protocol("truncated")
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Total length of the frame starting at `buf`, once enough of the header is
/// present to know it.
fn frame_len(buf: &[u8]) -> Result<usize> {
    if buf.len() < MAGIC.len() {
        if !MAGIC.starts_with(buf) {
            return Err(UpmError::protocol("magic"));
        }
        return Err(truncated());
    }
    if buf[..4] != MAGIC {
        return Err(UpmError::protocol("magic"));
    }
    if buf.len() < HEAD_LEN {
        return Err(truncated());
    }
    let dev_len = le_u16(&buf[14..16]) as usize;
    let pay_len_at = HEAD_LEN + dev_len;
    if buf.len() < pay_len_at + 4 {
        return Err(truncated());
    }
    let pay_len = le_u32(&buf[pay_len_at..pay_len_at + 4]) as usize;
    Ok(pay_len_at + 4 + pay_len + CRC_LEN)
}

/// Decodes the first frame in `b`, returning it with the number of bytes it
/// occupied. Bytes after that are left alone.
pub fn decode_frame(b: &[u8]) -> Result<(Frame, usize)> {
    let total = frame_len(b)?;
    if b.len() < total {
        return Err(truncated());
    }
    let body = &b[MAGIC.len()..total - CRC_LEN];
    let stored = le_u32(&b[total - CRC_LEN..total]);
    if crc32fast::hash(body) != stored {
        return Err(UpmError::protocol("crc"));
    }
    let version = b[4];
    if version != VERSION {
        return Err(UpmError::protocol("version"));
    }
    let kind = FrameKind::from_byte(b[5]).ok_or_else(|| UpmError::protocol("kind"))?;
    let job_id = u64::from_le_bytes(b[6..14].try_into().expect("8 bytes"));
    let dev_len = le_u16(&b[14..16]) as usize;
    let device_id = std::str::from_utf8(&b[HEAD_LEN..HEAD_LEN + dev_len])
        .map_err(|_| UpmError::protocol("device_id"))?
        .to_string();
    let payload_at = HEAD_LEN + dev_len + 4;
    let payload = b[payload_at..total - CRC_LEN].to_vec();
    Ok((Frame { version, kind, job_id, device_id, payload }, total))
}

/// Reads one frame from a byte stream.
///
/// Returns `Ok(None)` on a clean end of stream at a frame boundary. A stream
/// that ends mid-frame is `PROTOCOL_ERROR(truncated)`; I/O failures are
/// reported as `PROTOCOL_ERROR(io: ...)`.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Option<Frame>> {
    let mut buf = vec![0u8; HEAD_LEN];
    let got = read_full(r, &mut buf)?;
    if got == 0 {
        return Ok(None);
    }
    if got < HEAD_LEN {
        frame_len(&buf[..got])?;
        return Err(truncated());
    }
    if buf[..4] != MAGIC {
        return Err(UpmError::protocol("magic"));
    }
    let dev_len = le_u16(&buf[14..16]) as usize;
    buf.resize(HEAD_LEN + dev_len + 4, 0);
    if read_full(r, &mut buf[HEAD_LEN..])? < dev_len + 4 {
        return Err(truncated());
    }
    let total = frame_len(&buf)?;
    let have = buf.len();
    buf.resize(total, 0);
    if read_full(r, &mut buf[have..])? < total - have {
        return Err(truncated());
    }
    decode_frame(&buf).map(|(frame, _)| Some(frame))
}

fn read_full<R: Read + ?Sized>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(UpmError::protocol(format!("io: {e}"))),
        }
    }
    Ok(filled)
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, f: &Frame) -> Result<()> {
    w.write_all(&encode_frame(f))
        .and_then(|_| w.flush())
        .map_err(|e| UpmError::protocol(format!("io: {e}")))
}

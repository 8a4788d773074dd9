//! Wire framing shared by every transport.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "FMOE"
//!      4     1  version (0x01)
//!      5     1  msg_type (0x01 counts, 0x02 data, 0x03 allreduce, 0x04 barrier)
//!      6     4  src_rank, u32 LE
//!     10     4  tag, u32 LE (collective sequence number)
//!     14     8  payload_len, u64 LE, in bytes
//!     22     -  payload: u64 LE counts or f64 LE row-major values
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FMOE";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 22;
/// Upper bound on a single payload; anything larger is treated as corruption.
pub const MAX_PAYLOAD: u64 = 1 << 36;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Counts = 0x01,
    Data = 0x02,
    AllReduce = 0x03,
    Barrier = 0x04,
}

impl TryFrom<u8> for MsgType {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0x01 => Ok(MsgType::Counts),
            0x02 => Ok(MsgType::Data),
            0x03 => Ok(MsgType::AllReduce),
            0x04 => Ok(MsgType::Barrier),
            other => Err(Error::Protocol(format!("unknown message type 0x{other:02x}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub src_rank: u32,
    pub tag: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, src_rank: u32, tag: u32, payload: Vec<u8>) -> Self {
        Frame {
            msg_type,
            src_rank,
            tag,
            payload,
        }
    }

    pub fn with_u64s(msg_type: MsgType, src_rank: u32, tag: u32, values: &[u64]) -> Self {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Frame::new(msg_type, src_rank, tag, payload)
    }

    pub fn with_f64s(msg_type: MsgType, src_rank: u32, tag: u32, values: &[f64]) -> Self {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Frame::new(msg_type, src_rank, tag, payload)
    }

    pub fn payload_u64s(&self) -> Result<Vec<u64>> {
        if !self.payload.len().is_multiple_of(8) {
            return Err(Error::Protocol(format!(
                "payload of {} bytes is not a u64 array",
                self.payload.len()
            )));
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn payload_f64s(&self) -> Result<Vec<f64>> {
        if !self.payload.len().is_multiple_of(8) {
            return Err(Error::Protocol(format!(
                "payload of {} bytes is not an f64 array",
                self.payload.len()
            )));
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&MAGIC);
        h[4] = VERSION;
        h[5] = self.msg_type as u8;
        h[6..10].copy_from_slice(&self.src_rank.to_le_bytes());
        h[10..14].copy_from_slice(&self.tag.to_le_bytes());
        h[14..22].copy_from_slice(&(self.payload.len() as u64).to_le_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.header())?;
        w.write_all(&self.payload)?;
        w.flush()?;
        Ok(())
    }

    /// Parses the header, returning the frame skeleton and the payload length.
    fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(MsgType, u32, u32, u64)> {
        if h[0..4] != MAGIC {
            return Err(Error::Protocol(format!("bad magic {:02x?}", &h[0..4])));
        }
        if h[4] != VERSION {
            return Err(Error::Protocol(format!("unsupported version {}", h[4])));
        }
        let msg_type = MsgType::try_from(h[5])?;
        let src_rank = u32::from_le_bytes(h[6..10].try_into().unwrap());
        let tag = u32::from_le_bytes(h[10..14].try_into().unwrap());
        let len = u64::from_le_bytes(h[14..22].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(Error::Protocol(format!("payload length {len} exceeds limit")));
        }
        Ok((msg_type, src_rank, tag, len))
    }

    /// Decodes one frame from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Frame, usize)> {
        let header: &[u8; HEADER_LEN] = bytes
            .get(..HEADER_LEN)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| Error::Protocol(format!("truncated header ({} bytes)", bytes.len())))?;
        let (msg_type, src_rank, tag, len) = Frame::parse_header(header)?;
        let end = HEADER_LEN + len as usize;
        let payload = bytes
            .get(HEADER_LEN..end)
            .ok_or_else(|| {
                Error::Protocol(format!(
                    "truncated payload: {} of {len} bytes",
                    bytes.len() - HEADER_LEN
                ))
            })?
            .to_vec();
        Ok((Frame::new(msg_type, src_rank, tag, payload), end))
    }

    /// Reads exactly one frame. A clean EOF before the first header byte
    /// surfaces as `Ok(None)`.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Frame>> {
        let mut header = [0u8; HEADER_LEN];
        let mut filled = 0;
        while filled < HEADER_LEN {
            match r.read(&mut header[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => {
                    return Err(Error::Protocol(format!(
                        "connection closed mid-header after {filled} bytes"
                    )))
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let (msg_type, src_rank, tag, len) = Frame::parse_header(&header)?;
        let mut payload = vec![0u8; len as usize];
        r.read_exact(&mut payload)?;
        Ok(Some(Frame::new(msg_type, src_rank, tag, payload)))
    }
}

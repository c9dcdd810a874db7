//! Little-endian header followed by bit-packed code indices.

use thiserror::Error;

use crate::codebook::{Codebook, MessagePayload};

/// sender u32, timestamp u64, pose 3×f32, hash u64, height u16, width u16, n_L u16, n_R u8.
pub const HEADER_BYTES: usize = 39;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated message: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },

    #[error("payload is {got} bytes, header implies {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("code index {index} out of range for n_L = {n_l}")]
    IndexOutOfRange { index: u32, n_l: u16 },

    #[error("codebook hash mismatch: message {message:#018x}, receiver {local:#018x}")]
    HashMismatch { message: u64, local: u64 },

    #[error("non-zero padding bits after the last index")]
    NonZeroPadding,

    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WireHeader {
    pub sender_id: u32,
    pub frame_timestamp_ms: u64,
    /// x, y, yaw of the sender.
    pub pose: [f32; 3],
    pub codebook_hash: u64,
    pub height: u16,
    pub width: u16,
    pub n_l: u16,
    pub n_r: u8,
}

impl WireHeader {
    fn validate(&self) -> Result<(), WireError> {
        if self.n_l < 2 {
            return Err(WireError::InvalidHeader(format!("n_L = {} (need at least 2)", self.n_l)));
        }
        if self.n_r == 0 || self.height == 0 || self.width == 0 {
            return Err(WireError::InvalidHeader("zero height, width or n_R".into()));
        }
        Ok(())
    }

    /// Payload size implied by the header.
    pub fn payload_len(&self) -> usize {
        payload_bytes(self.height as usize, self.width as usize, self.n_r as usize, self.n_l as usize)
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.sender_id.to_le_bytes());
        out.extend_from_slice(&self.frame_timestamp_ms.to_le_bytes());
        for p in self.pose {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&self.codebook_hash.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.n_l.to_le_bytes());
        out.push(self.n_r);
    }

    pub fn read(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < HEADER_BYTES {
            return Err(WireError::Truncated {
                needed: HEADER_BYTES,
                got: bytes.len(),
            });
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let h = Self {
            sender_id: u32_at(0),
            frame_timestamp_ms: u64_at(4),
            pose: [f32_at(12), f32_at(16), f32_at(20)],
            codebook_hash: u64_at(24),
            height: u16_at(32),
            width: u16_at(34),
            n_l: u16_at(36),
            n_r: bytes[38],
        };
        h.validate()?;
        Ok(h)
    }
}

/// `⌈log₂ n_L⌉`, the width of one packed index.
pub fn bits_per_index(n_l: usize) -> u32 {
    assert!(n_l >= 2, "n_L must be at least 2");
    usize::BITS - (n_l - 1).leading_zeros()
}

pub fn payload_bytes(height: usize, width: usize, n_r: usize, n_l: usize) -> usize {
    (height * width * n_r * bits_per_index(n_l) as usize).div_ceil(8)
}

/// Packs indices row-major with rank minor, each in `⌈log₂ n_L⌉` bits, LSB first.
pub fn pack_indices(msg: &MessagePayload, n_l: usize) -> Result<Vec<u8>, WireError> {
    if !(2..=u16::MAX as usize).contains(&n_l) {
        return Err(WireError::InvalidHeader(format!("n_L = {n_l}")));
    }
    if msg.indices.len() != msg.height * msg.width * msg.n_r {
        return Err(WireError::LengthMismatch {
            expected: msg.height * msg.width * msg.n_r,
            got: msg.indices.len(),
        });
    }
    let bits = bits_per_index(n_l);
    let mut out = vec![0u8; payload_bytes(msg.height, msg.width, msg.n_r, n_l)];
    let mut pos = 0usize;
    for &idx in &msg.indices {
        if idx as usize >= n_l {
            return Err(WireError::IndexOutOfRange { index: idx, n_l: n_l as u16 });
        }
        for b in 0..bits {
            if idx >> b & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    Ok(out)
}

pub fn unpack_indices(bytes: &[u8], header: &WireHeader) -> Result<MessagePayload, WireError> {
    header.validate()?;
    let expected = header.payload_len();
    if bytes.len() < expected {
        return Err(WireError::Truncated { needed: expected, got: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(WireError::LengthMismatch { expected, got: bytes.len() });
    }
    let (h, w, n_r) = (header.height as usize, header.width as usize, header.n_r as usize);
    let bits = bits_per_index(header.n_l as usize);
    let count = h * w * n_r;
    let mut indices = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut idx = 0u32;
        for b in 0..bits {
            idx |= ((bytes[pos / 8] >> (pos % 8) & 1) as u32) << b;
            pos += 1;
        }
        if idx >= header.n_l as u32 {
            return Err(WireError::IndexOutOfRange { index: idx, n_l: header.n_l });
        }
        indices.push(idx);
    }
    if pos % 8 != 0 && bytes[pos / 8] >> (pos % 8) != 0 {
        return Err(WireError::NonZeroPadding);
    }
    Ok(MessagePayload {
        height: h,
        width: w,
        n_r,
        indices,
    })
}

/// A complete codebook message as sent between agents.
#[derive(Clone, Debug, PartialEq)]
pub struct WireMessage {
    pub header: WireHeader,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn encode(sender_id: u32, frame_timestamp_ms: u64, pose: [f32; 3], msg: &MessagePayload, cb: &Codebook) -> Result<Self, WireError> {
        let too_big = |what: &str| WireError::InvalidHeader(format!("{what} does not fit the header"));
        let header = WireHeader {
            sender_id,
            frame_timestamp_ms,
            pose,
            codebook_hash: cb.version_hash(),
            height: u16::try_from(msg.height).map_err(|_| too_big("height"))?,
            width: u16::try_from(msg.width).map_err(|_| too_big("width"))?,
            n_l: u16::try_from(cb.n_l()).map_err(|_| too_big("n_L"))?,
            n_r: u8::try_from(msg.n_r).map_err(|_| too_big("n_R"))?,
        };
        header.validate()?;
        Ok(Self {
            header,
            payload: pack_indices(msg, cb.n_l())?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload.len());
        self.header.write(&mut out);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses a message, checking the payload length against the header.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let header = WireHeader::read(bytes)?;
        let rest = &bytes[HEADER_BYTES..];
        let expected = header.payload_len();
        if rest.len() < expected {
            return Err(WireError::Truncated {
                needed: HEADER_BYTES + expected,
                got: bytes.len(),
            });
        }
        if rest.len() > expected {
            return Err(WireError::LengthMismatch { expected, got: rest.len() });
        }
        Ok(Self {
            header,
            payload: rest.to_vec(),
        })
    }

    /// Unpacks the indices for a receiver holding `cb`.
    pub fn decode(&self, cb: &Codebook) -> Result<MessagePayload, WireError> {
        if self.header.codebook_hash != cb.version_hash() {
            return Err(WireError::HashMismatch {
                message: self.header.codebook_hash,
                local: cb.version_hash(),
            });
        }
        if self.header.n_l as usize != cb.n_l() || self.header.n_r as usize > cb.n_r() {
            return Err(WireError::InvalidHeader("codebook shape differs from the receiver's".into()));
        }
        unpack_indices(&self.payload, &self.header)
    }

    pub fn len(&self) -> usize {
        HEADER_BYTES + self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random_msg(r: &mut RngStream, h: usize, w: usize, n_r: usize, n_l: usize) -> MessagePayload {
        let indices = (0..h * w * n_r).map(|_| r.below(n_l) as u32).collect();
        MessagePayload { height: h, width: w, n_r, indices }
    }

    fn header_for(m: &MessagePayload, n_l: usize) -> WireHeader {
        WireHeader {
            sender_id: 1,
            frame_timestamp_ms: 2,
            pose: [0.0; 3],
            codebook_hash: 0,
            height: m.height as u16,
            width: m.width as u16,
            n_l: n_l as u16,
            n_r: m.n_r as u8,
        }
    }

    #[test]
    fn bit_widths() {
        assert_eq!(bits_per_index(2), 1);
        assert_eq!(bits_per_index(3), 2);
        assert_eq!(bits_per_index(128), 7);
        assert_eq!(bits_per_index(129), 8);
        assert_eq!(bits_per_index(256), 8);
    }

    #[test]
    fn round_trip_selected_sizes() {
        let mut r = RngStream::new(11);
        for n_l in [2, 3, 128, 256] {
            for n_r in [1, 2] {
                let m = random_msg(&mut r, 7, 5, n_r, n_l);
                let bytes = pack_indices(&m, n_l).unwrap();
                assert_eq!(unpack_indices(&bytes, &header_for(&m, n_l)).unwrap(), m);
            }
        }
    }

    #[test]
    fn zero_indices_pack_to_zero_bytes() {
        let m = MessagePayload { height: 3, width: 3, n_r: 2, indices: vec![0; 18] };
        assert!(pack_indices(&m, 100).unwrap().iter().all(|&b| b == 0));
    }

    #[test]
    fn eight_one_bit_indices_fill_one_byte() {
        let m = MessagePayload { height: 2, width: 4, n_r: 1, indices: vec![1, 0, 1, 1, 0, 0, 0, 1] };
        assert_eq!(pack_indices(&m, 2).unwrap(), vec![0b1000_1101]);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let m = MessagePayload { height: 1, width: 3, n_r: 1, indices: vec![0, 1, 2] };
        let hdr = header_for(&m, 3);
        let mut bytes = pack_indices(&m, 3).unwrap();
        assert!(matches!(unpack_indices(&bytes[..0], &hdr), Err(WireError::Truncated { .. })));
        // 2-bit value 3 is not a valid index when n_L = 3.
        bytes[0] |= 0b11;
        assert!(matches!(unpack_indices(&bytes, &hdr), Err(WireError::IndexOutOfRange { index: 3, n_l: 3 })));
        let mut padded = pack_indices(&m, 3).unwrap();
        padded[0] |= 0b1000_0000;
        assert_eq!(unpack_indices(&padded, &hdr), Err(WireError::NonZeroPadding));
        assert!(matches!(unpack_indices(&[0, 0], &hdr), Err(WireError::LengthMismatch { .. })));
    }

    #[test]
    fn full_message_round_trip_and_hash_check() {
        let mut r = RngStream::new(3);
        let cb = Codebook::new(5, 2, (0..10).map(|_| r.normal()).collect(), vec![1.0]).unwrap();
        let other = Codebook::new(5, 2, (0..10).map(|_| r.normal()).collect(), vec![1.0]).unwrap();
        let m = random_msg(&mut r, 4, 6, 1, 5);
        let wire = WireMessage::encode(9, 1234, [1.5, -2.0, 0.25], &m, &cb).unwrap();
        let bytes = wire.to_bytes();
        assert_eq!(bytes.len(), HEADER_BYTES + payload_bytes(4, 6, 1, 5));
        let back = WireMessage::from_bytes(&bytes).unwrap();
        assert_eq!(back, wire);
        assert_eq!(back.decode(&cb).unwrap(), m);
        assert!(matches!(back.decode(&other), Err(WireError::HashMismatch { .. })));
        for cut in 0..bytes.len() {
            assert!(matches!(WireMessage::from_bytes(&bytes[..cut]), Err(WireError::Truncated { .. })));
        }
    }
}

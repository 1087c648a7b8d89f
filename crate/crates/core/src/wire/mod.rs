//! Wire protocol: topic grammar and the binary frame codec.
//!
//! Every role on the bus (node, master, gateway) speaks exactly this format.
//! The full byte layout is documented in `docs/wire.md`; the short version:
//! a frame is `magic(2) | tag(1) | body_len(4, LE) | body`, all multi-byte
//! integers little-endian, tokens length-prefixed with one byte, payloads
//! with four.

mod frame;
mod topic;

pub use frame::{
    decode_frame, encode_frame, encoded_envelope_len, AckStatus, DeliveryScope, Frame,
    FrameReader, MessageEnvelope, RegionFilter, Subscription, WireLimits, FRAME_HEADER_LEN,
    FRAME_MAGIC, PROTOCOL_VERSION,
};
pub use topic::{format_topic, is_valid_token, parse_topic, Region, TopicAddress, MAX_PRIO};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed topic: {0}")]
    MalformedTopic(String),
    #[error("frame too large: {size} bytes exceeds max_frame {max}")]
    FrameTooLarge { size: usize, max: usize },
    #[error("truncated frame: need at least {needed} more bytes")]
    Truncated { needed: usize },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unknown frame tag {0:#04x}")]
    UnknownTag(u8),
    #[error("frame length mismatch")]
    LengthMismatch,
}

impl WireError {
    /// Streaming decoders treat `Truncated` as "wait for more bytes".
    pub fn is_truncated(&self) -> bool {
        matches!(self, WireError::Truncated { .. })
    }
}

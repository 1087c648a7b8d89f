//! Binary frame codec.
//!
//! Layout (see `docs/wire.md` for the byte-offset table):
//!
//! ```text
//! frame   := magic(2) tag(1) body_len(4, LE) body
//! token   := len(1) bytes            // [A-Za-z0-9_-], 1..=255
//! blob    := len(4, LE) bytes
//! region  := 0x00 | 0x01 | 0x02 token
//! ```
//!
//! Encoding is a pure function: identical frames produce identical bytes.
//! Decoding consumes exactly one frame and reports how many bytes it used,
//! so concatenated frames can be split at arbitrary chunk boundaries.

use std::io::Read;

use super::topic::{is_valid_token, Region, TopicAddress, MAX_PRIO};
use super::WireError;

/// First two bytes of every frame.
pub const FRAME_MAGIC: [u8; 2] = [0xA7, 0x4E];

/// Bytes before the body: magic + tag + body length.
pub const FRAME_HEADER_LEN: usize = 7;

/// Protocol version carried in Register frames.
pub const PROTOCOL_VERSION: u32 = 1;

const TAG_DATA: u8 = 0x01;
const TAG_BATCH: u8 = 0x02;
const TAG_REGISTER: u8 = 0x03;
const TAG_SUBSCRIBE: u8 = 0x04;
const TAG_UNSUBSCRIBE: u8 = 0x05;
const TAG_HEARTBEAT: u8 = 0x06;
const TAG_ACK: u8 = 0x07;

/// Size limits enforced by the codec and the roles speaking it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireLimits {
    /// Largest payload a single envelope may carry.
    pub max_payload: usize,
    /// Largest encoded frame, header included.
    pub max_frame: usize,
}

impl Default for WireLimits {
    fn default() -> Self {
        WireLimits {
            max_payload: 1 << 20, // 1 MiB
            max_frame: 4 << 20,   // 4 MiB
        }
    }
}

/// One bus message: address, identity, ordering and the payload itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageEnvelope {
    pub topic: TopicAddress,
    pub publisher_id: String,
    /// Strictly increasing per (publisher, channel); assigned by the client.
    pub seq: u64,
    /// `CLOCK_MONOTONIC` nanoseconds at publish time.
    pub ts_monotonic_ns: u64,
    /// Gateway traversals so far; bounded to suppress forwarding loops.
    pub hop_count: u8,
    pub payload: Vec<u8>,
}

/// Which deliveries a subscription opts into with respect to the topic's
/// optional node segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryScope {
    /// Undirected traffic plus messages directed at the subscriber itself.
    Standard,
    /// Only messages directed at the subscriber itself.
    DirectedOnly,
    /// Everything matching channel and region, including messages directed
    /// at other nodes. Gateways use this to carry directed traffic across
    /// clusters.
    All,
}

/// Region constraint on a subscription.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegionFilter {
    Any,
    Is(Region),
}

impl RegionFilter {
    pub fn matches(&self, region: &Region) -> bool {
        match self {
            RegionFilter::Any => true,
            RegionFilter::Is(r) => r == region,
        }
    }
}

/// A node's declared interest in a slice of the topic space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscription {
    /// Client-assigned, unique per node.
    pub subscription_id: u64,
    /// Exact channel token, or `"*"` for any channel.
    pub channel_pattern: String,
    pub region_filter: RegionFilter,
    pub scope: DeliveryScope,
    /// Deliver the subscriber's own messages back to it.
    pub allow_self: bool,
}

impl Subscription {
    pub fn new(subscription_id: u64, channel_pattern: &str) -> Subscription {
        Subscription {
            subscription_id,
            channel_pattern: channel_pattern.to_string(),
            region_filter: RegionFilter::Any,
            scope: DeliveryScope::Standard,
            allow_self: false,
        }
    }

    pub fn pattern_is_valid(&self) -> bool {
        self.channel_pattern == "*" || is_valid_token(&self.channel_pattern)
    }

    pub fn channel_matches(&self, channel: &str) -> bool {
        self.channel_pattern == "*" || self.channel_pattern == channel
    }

    /// Full match against an envelope as seen by `subscriber`.
    pub fn matches(&self, env: &MessageEnvelope, subscriber: &str) -> bool {
        if !self.channel_matches(&env.topic.channel) {
            return false;
        }
        if !self.region_filter.matches(&env.topic.region) {
            return false;
        }
        match (&env.topic.node_id, self.scope) {
            (_, DeliveryScope::All) => true,
            (None, DeliveryScope::Standard) => true,
            (None, DeliveryScope::DirectedOnly) => false,
            (Some(target), _) => target == subscriber,
        }
    }
}

/// Result code carried by Ack frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckStatus {
    Ok,
    VersionMismatch,
    PatternInvalid,
    UnknownSubscription,
}

impl AckStatus {
    fn to_u8(self) -> u8 {
        match self {
            AckStatus::Ok => 0,
            AckStatus::VersionMismatch => 1,
            AckStatus::PatternInvalid => 2,
            AckStatus::UnknownSubscription => 3,
        }
    }

    fn from_u8(v: u8) -> Result<AckStatus, WireError> {
        Ok(match v {
            0 => AckStatus::Ok,
            1 => AckStatus::VersionMismatch,
            2 => AckStatus::PatternInvalid,
            3 => AckStatus::UnknownSubscription,
            _ => return Err(WireError::LengthMismatch),
        })
    }
}

/// Everything that can travel over a bus connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Data(MessageEnvelope),
    Batch(Vec<MessageEnvelope>),
    Register { identity: String, protocol_version: u32 },
    Subscribe(Subscription),
    Unsubscribe { subscription_id: u64 },
    Heartbeat { sender_id: String, ts_monotonic_ns: u64 },
    Ack { ref_seq: u64, status: AckStatus },
}

impl Frame {
    pub fn type_name(&self) -> &'static str {
        match self {
            Frame::Data(_) => "data",
            Frame::Batch(_) => "batch",
            Frame::Register { .. } => "register",
            Frame::Subscribe(_) => "subscribe",
            Frame::Unsubscribe { .. } => "unsubscribe",
            Frame::Heartbeat { .. } => "heartbeat",
            Frame::Ack { .. } => "ack",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Frame::Data(_) => TAG_DATA,
            Frame::Batch(_) => TAG_BATCH,
            Frame::Register { .. } => TAG_REGISTER,
            Frame::Subscribe(_) => TAG_SUBSCRIBE,
            Frame::Unsubscribe { .. } => TAG_UNSUBSCRIBE,
            Frame::Heartbeat { .. } => TAG_HEARTBEAT,
            Frame::Ack { .. } => TAG_ACK,
        }
    }
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

fn put_token(out: &mut Vec<u8>, tok: &str) {
    debug_assert!(is_valid_token(tok) || tok == "*", "bad token {tok:?}");
    out.push(tok.len() as u8);
    out.extend_from_slice(tok.as_bytes());
}

fn put_blob(out: &mut Vec<u8>, data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(data);
}

fn put_region(out: &mut Vec<u8>, region: &Region) {
    match region {
        Region::Local => out.push(0),
        Region::Global => out.push(1),
        Region::Named(name) => {
            out.push(2);
            put_token(out, name);
        }
    }
}

/// Exact encoded size of one envelope inside a Data or Batch body. The
/// broker budgets batches in wire bytes, so this must agree with
/// `put_envelope` (the codec tests assert it does).
pub fn encoded_envelope_len(env: &MessageEnvelope) -> usize {
    let region = match &env.topic.region {
        Region::Local | Region::Global => 1,
        Region::Named(n) => 2 + n.len(),
    };
    let node = match &env.topic.node_id {
        None => 1,
        Some(n) => 2 + n.len(),
    };
    (1 + env.topic.channel.len())
        + region
        + node
        + 1 // prio
        + (1 + env.publisher_id.len())
        + 8 // seq
        + 8 // ts
        + 1 // hop_count
        + 4
        + env.payload.len()
}

fn put_envelope(out: &mut Vec<u8>, env: &MessageEnvelope) {
    put_token(out, &env.topic.channel);
    put_region(out, &env.topic.region);
    match &env.topic.node_id {
        None => out.push(0),
        Some(node) => {
            out.push(1);
            put_token(out, node);
        }
    }
    out.push(env.topic.prio);
    put_token(out, &env.publisher_id);
    out.extend_from_slice(&env.seq.to_le_bytes());
    out.extend_from_slice(&env.ts_monotonic_ns.to_le_bytes());
    out.push(env.hop_count);
    put_blob(out, &env.payload);
}

/// Serializes a frame. Fails only when the encoded size would exceed
/// `limits.max_frame`.
pub fn encode_frame(frame: &Frame, limits: &WireLimits) -> Result<Vec<u8>, WireError> {
    let mut body = Vec::with_capacity(64);
    match frame {
        Frame::Data(env) => put_envelope(&mut body, env),
        Frame::Batch(envs) => {
            debug_assert!(!envs.is_empty(), "batch frames carry at least one envelope");
            body.extend_from_slice(&(envs.len() as u32).to_le_bytes());
            for env in envs {
                put_envelope(&mut body, env);
            }
        }
        Frame::Register { identity, protocol_version } => {
            put_token(&mut body, identity);
            body.extend_from_slice(&protocol_version.to_le_bytes());
        }
        Frame::Subscribe(sub) => {
            body.extend_from_slice(&sub.subscription_id.to_le_bytes());
            put_token(&mut body, &sub.channel_pattern);
            match &sub.region_filter {
                RegionFilter::Any => body.push(0),
                RegionFilter::Is(Region::Local) => body.push(1),
                RegionFilter::Is(Region::Global) => body.push(2),
                RegionFilter::Is(Region::Named(name)) => {
                    body.push(3);
                    put_token(&mut body, name);
                }
            }
            body.push(match sub.scope {
                DeliveryScope::Standard => 0,
                DeliveryScope::DirectedOnly => 1,
                DeliveryScope::All => 2,
            });
            body.push(sub.allow_self as u8);
        }
        Frame::Unsubscribe { subscription_id } => {
            body.extend_from_slice(&subscription_id.to_le_bytes());
        }
        Frame::Heartbeat { sender_id, ts_monotonic_ns } => {
            put_token(&mut body, sender_id);
            body.extend_from_slice(&ts_monotonic_ns.to_le_bytes());
        }
        Frame::Ack { ref_seq, status } => {
            body.extend_from_slice(&ref_seq.to_le_bytes());
            body.push(status.to_u8());
        }
    }

    let total = FRAME_HEADER_LEN + body.len();
    if total > limits.max_frame {
        return Err(WireError::FrameTooLarge {
            size: total,
            max: limits.max_frame,
        });
    }
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(frame.tag());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Body reader; running out of bytes inside a body means the declared frame
/// length lied, which is `LengthMismatch` (the outer header already told us
/// the body is complete).
struct BodyReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BodyReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        BodyReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::LengthMismatch);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn token(&mut self) -> Result<String, WireError> {
        let len = self.u8()? as usize;
        let raw = self.take(len)?;
        let s = std::str::from_utf8(raw).map_err(|_| WireError::LengthMismatch)?;
        if !(is_valid_token(s) || s == "*") {
            return Err(WireError::MalformedTopic(format!("bad token {s:?}")));
        }
        Ok(s.to_string())
    }

    fn blob(&mut self) -> Result<Vec<u8>, WireError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    fn region(&mut self) -> Result<Region, WireError> {
        match self.u8()? {
            0 => Ok(Region::Local),
            1 => Ok(Region::Global),
            2 => {
                let name = self.token()?;
                if name == "*" || name == "local" || name == "global" {
                    return Err(WireError::MalformedTopic(format!("bad region token {name:?}")));
                }
                Ok(Region::Named(name))
            }
            _ => Err(WireError::LengthMismatch),
        }
    }

    fn envelope(&mut self) -> Result<MessageEnvelope, WireError> {
        let channel = self.token()?;
        if channel == "*" {
            return Err(WireError::MalformedTopic("'*' is not a channel".into()));
        }
        let region = self.region()?;
        let node_id = match self.u8()? {
            0 => None,
            1 => {
                let n = self.token()?;
                if n == "*" {
                    return Err(WireError::MalformedTopic("'*' is not a node id".into()));
                }
                Some(n)
            }
            _ => return Err(WireError::LengthMismatch),
        };
        let prio = self.u8()?;
        if prio > MAX_PRIO {
            return Err(WireError::MalformedTopic(format!("prio {prio} out of range")));
        }
        let publisher_id = self.token()?;
        if publisher_id == "*" {
            return Err(WireError::MalformedTopic("'*' is not a publisher id".into()));
        }
        let seq = self.u64()?;
        let ts_monotonic_ns = self.u64()?;
        let hop_count = self.u8()?;
        let payload = self.blob()?;
        Ok(MessageEnvelope {
            topic: TopicAddress {
                channel,
                region,
                node_id,
                prio,
            },
            publisher_id,
            seq,
            ts_monotonic_ns,
            hop_count,
            payload,
        })
    }

    fn finish(self) -> Result<(), WireError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(WireError::LengthMismatch)
        }
    }
}

/// Decodes one frame from the front of `buf`, returning it together with the
/// number of bytes consumed. `Truncated` means the buffer holds a valid
/// prefix and the caller should supply more bytes.
pub fn decode_frame(buf: &[u8], limits: &WireLimits) -> Result<(Frame, usize), WireError> {
    if buf.len() < FRAME_HEADER_LEN {
        return Err(WireError::Truncated {
            needed: FRAME_HEADER_LEN - buf.len(),
        });
    }
    if buf[..2] != FRAME_MAGIC {
        return Err(WireError::BadMagic);
    }
    let tag = buf[2];
    let body_len = u32::from_le_bytes(buf[3..7].try_into().unwrap()) as usize;
    if FRAME_HEADER_LEN + body_len > limits.max_frame {
        return Err(WireError::FrameTooLarge {
            size: FRAME_HEADER_LEN + body_len,
            max: limits.max_frame,
        });
    }
    if buf.len() < FRAME_HEADER_LEN + body_len {
        return Err(WireError::Truncated {
            needed: FRAME_HEADER_LEN + body_len - buf.len(),
        });
    }
    let mut r = BodyReader::new(&buf[FRAME_HEADER_LEN..FRAME_HEADER_LEN + body_len]);
    let frame = match tag {
        TAG_DATA => Frame::Data(r.envelope()?),
        TAG_BATCH => {
            let count = r.u32()? as usize;
            if count == 0 {
                return Err(WireError::LengthMismatch);
            }
            let mut envs = Vec::with_capacity(count.min(4096));
            for _ in 0..count {
                envs.push(r.envelope()?);
            }
            Frame::Batch(envs)
        }
        TAG_REGISTER => {
            let identity = r.token()?;
            if identity == "*" {
                return Err(WireError::MalformedTopic("'*' is not an identity".into()));
            }
            let protocol_version = r.u32()?;
            Frame::Register {
                identity,
                protocol_version,
            }
        }
        TAG_SUBSCRIBE => {
            let subscription_id = r.u64()?;
            let channel_pattern = r.token()?;
            let region_filter = match r.u8()? {
                0 => RegionFilter::Any,
                1 => RegionFilter::Is(Region::Local),
                2 => RegionFilter::Is(Region::Global),
                3 => {
                    let name = r.token()?;
                    if name == "*" || name == "local" || name == "global" {
                        return Err(WireError::MalformedTopic(format!(
                            "bad region token {name:?}"
                        )));
                    }
                    RegionFilter::Is(Region::Named(name))
                }
                _ => return Err(WireError::LengthMismatch),
            };
            let scope = match r.u8()? {
                0 => DeliveryScope::Standard,
                1 => DeliveryScope::DirectedOnly,
                2 => DeliveryScope::All,
                _ => return Err(WireError::LengthMismatch),
            };
            let allow_self = match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(WireError::LengthMismatch),
            };
            Frame::Subscribe(Subscription {
                subscription_id,
                channel_pattern,
                region_filter,
                scope,
                allow_self,
            })
        }
        TAG_UNSUBSCRIBE => Frame::Unsubscribe {
            subscription_id: r.u64()?,
        },
        TAG_HEARTBEAT => {
            let sender_id = r.token()?;
            let ts_monotonic_ns = r.u64()?;
            Frame::Heartbeat {
                sender_id,
                ts_monotonic_ns,
            }
        }
        TAG_ACK => {
            let ref_seq = r.u64()?;
            let status = AckStatus::from_u8(r.u8()?)?;
            Frame::Ack { ref_seq, status }
        }
        other => return Err(WireError::UnknownTag(other)),
    };
    r.finish()?;
    Ok((frame, FRAME_HEADER_LEN + body_len))
}

// ---------------------------------------------------------------------------
// Streaming reader
// ---------------------------------------------------------------------------

/// Incremental decoder over any byte stream. Keeps a rolling buffer so frame
/// boundaries never have to align with read chunks.
pub struct FrameReader<R: Read> {
    inner: R,
    limits: WireLimits,
    buf: Vec<u8>,
    start: usize,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R, limits: WireLimits) -> Self {
        FrameReader {
            inner,
            limits,
            buf: Vec::with_capacity(8 * 1024),
            start: 0,
        }
    }

    /// Next frame, `Ok(None)` on clean EOF at a frame boundary.
    pub fn next_frame(&mut self) -> std::io::Result<Option<Frame>> {
        loop {
            match decode_frame(&self.buf[self.start..], &self.limits) {
                Ok((frame, used)) => {
                    self.start += used;
                    if self.start >= self.buf.len() {
                        self.buf.clear();
                        self.start = 0;
                    } else if self.start > 64 * 1024 {
                        self.buf.drain(..self.start);
                        self.start = 0;
                    }
                    return Ok(Some(frame));
                }
                Err(WireError::Truncated { .. }) => {
                    let mut chunk = [0u8; 16 * 1024];
                    let n = self.inner.read(&mut chunk)?;
                    if n == 0 {
                        return if self.start == self.buf.len() {
                            Ok(None)
                        } else {
                            Err(std::io::Error::new(
                                std::io::ErrorKind::UnexpectedEof,
                                "connection closed mid-frame",
                            ))
                        };
                    }
                    self.buf.extend_from_slice(&chunk[..n]);
                }
                Err(e) => {
                    return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(channel: &str, prio: u8, seq: u64) -> MessageEnvelope {
        MessageEnvelope {
            topic: TopicAddress {
                channel: channel.into(),
                region: Region::Local,
                node_id: None,
                prio,
            },
            publisher_id: "n1".into(),
            seq,
            ts_monotonic_ns: 12345,
            hop_count: 0,
            payload: vec![1, 2, 3],
        }
    }

    #[test]
    fn heartbeat_starts_with_magic_and_tag() {
        let bytes = encode_frame(
            &Frame::Heartbeat {
                sender_id: "n1".into(),
                ts_monotonic_ns: 0,
            },
            &WireLimits::default(),
        )
        .unwrap();
        assert_eq!(bytes[..2], FRAME_MAGIC);
        assert_eq!(bytes[2], TAG_HEARTBEAT);
        let body_len = u32::from_le_bytes(bytes[3..7].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), FRAME_HEADER_LEN + body_len);
    }

    #[test]
    fn register_round_trips() {
        let limits = WireLimits::default();
        let f = Frame::Register {
            identity: "n1".into(),
            protocol_version: 1,
        };
        let bytes = encode_frame(&f, &limits).unwrap();
        let (back, used) = decode_frame(&bytes, &limits).unwrap();
        assert_eq!(back, f);
        assert_eq!(used, bytes.len());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let limits = WireLimits::default();
        let mut bytes = encode_frame(&Frame::Data(env("cmd", 3, 1)), &limits).unwrap();
        bytes[0] ^= 0xFF;
        assert_eq!(decode_frame(&bytes, &limits).unwrap_err(), WireError::BadMagic);
    }

    #[test]
    fn prefix_reports_truncated_with_bytes_needed() {
        let limits = WireLimits::default();
        let bytes = encode_frame(&Frame::Data(env("cmd", 3, 1)), &limits).unwrap();
        for cut in [1, FRAME_HEADER_LEN - 1, FRAME_HEADER_LEN, bytes.len() - 1] {
            match decode_frame(&bytes[..cut], &limits) {
                Err(WireError::Truncated { needed }) => {
                    assert!(needed > 0);
                    if cut >= FRAME_HEADER_LEN {
                        // Once the header is visible the exact shortfall is known.
                        assert_eq!(needed, bytes.len() - cut);
                    }
                }
                other => panic!("expected Truncated at cut {cut}, got {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_tag_is_rejected() {
        let limits = WireLimits::default();
        let mut bytes = encode_frame(&Frame::Unsubscribe { subscription_id: 9 }, &limits).unwrap();
        bytes[2] = 0x7F;
        assert_eq!(decode_frame(&bytes, &limits).unwrap_err(), WireError::UnknownTag(0x7F));
    }

    #[test]
    fn oversized_data_frame_is_rejected_at_encode() {
        let limits = WireLimits::default();
        let mut big = env("cmd", 3, 1);
        big.payload = vec![0u8; limits.max_frame];
        match encode_frame(&Frame::Data(big), &limits) {
            Err(WireError::FrameTooLarge { size, max }) => {
                assert!(size > max);
                assert_eq!(max, limits.max_frame);
            }
            other => panic!("expected FrameTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn trailing_garbage_in_body_is_length_mismatch() {
        let limits = WireLimits::default();
        let mut bytes = encode_frame(&Frame::Unsubscribe { subscription_id: 1 }, &limits).unwrap();
        // Grow body by one byte and fix up the declared length.
        bytes.push(0xEE);
        let new_len = (bytes.len() - FRAME_HEADER_LEN) as u32;
        bytes[3..7].copy_from_slice(&new_len.to_le_bytes());
        assert_eq!(decode_frame(&bytes, &limits).unwrap_err(), WireError::LengthMismatch);
    }

    #[test]
    fn streaming_reader_handles_odd_chunks() {
        let limits = WireLimits::default();
        let frames = vec![
            Frame::Register {
                identity: "n1".into(),
                protocol_version: 1,
            },
            Frame::Data(env("cmd", 5, 1)),
            Frame::Batch(vec![env("cmd", 5, 2), env("status", 1, 3)]),
            Frame::Heartbeat {
                sender_id: "n1".into(),
                ts_monotonic_ns: 7,
            },
            Frame::Ack {
                ref_seq: 0,
                status: AckStatus::Ok,
            },
        ];
        let mut wire = Vec::new();
        for f in &frames {
            wire.extend_from_slice(&encode_frame(f, &limits).unwrap());
        }
        // A reader that returns 3 bytes at a time stresses resync logic.
        struct Trickle<'a>(&'a [u8]);
        impl Read for Trickle<'_> {
            fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
                let n = self.0.len().min(3).min(buf.len());
                buf[..n].copy_from_slice(&self.0[..n]);
                self.0 = &self.0[n..];
                Ok(n)
            }
        }
        let mut reader = FrameReader::new(Trickle(&wire), limits);
        let mut got = Vec::new();
        while let Some(f) = reader.next_frame().unwrap() {
            got.push(f);
        }
        assert_eq!(got, frames);
    }

    #[test]
    fn encoded_envelope_len_matches_encoder() {
        let mut cases = vec![env("cmd", 3, 1)];
        let mut directed = env("telemetry", 7, 99);
        directed.topic.region = Region::Named("west-1".into());
        directed.topic.node_id = Some("node42".into());
        directed.payload = vec![0xAB; 777];
        cases.push(directed);
        for e in cases {
            let mut body = Vec::new();
            put_envelope(&mut body, &e);
            assert_eq!(body.len(), encoded_envelope_len(&e));
        }
    }

    #[test]
    fn subscription_matching_rules() {
        let mut e = env("cmd", 3, 1);
        let sub = Subscription::new(1, "cmd");
        assert!(sub.matches(&e, "n2"));
        assert!(!Subscription::new(1, "status").matches(&e, "n2"));
        assert!(Subscription::new(1, "*").matches(&e, "n2"));

        // Directed delivery: only the target sees it under Standard scope.
        e.topic.node_id = Some("n2".into());
        assert!(sub.matches(&e, "n2"));
        assert!(!sub.matches(&e, "n3"));
        let mut all = Subscription::new(1, "cmd");
        all.scope = DeliveryScope::All;
        assert!(all.matches(&e, "n3"));

        let mut directed_only = Subscription::new(1, "cmd");
        directed_only.scope = DeliveryScope::DirectedOnly;
        e.topic.node_id = None;
        assert!(!directed_only.matches(&e, "n2"));

        // Region filter.
        let mut global_only = Subscription::new(1, "cmd");
        global_only.region_filter = RegionFilter::Is(Region::Global);
        assert!(!global_only.matches(&e, "n2"));
        e.topic.region = Region::Global;
        assert!(global_only.matches(&e, "n2"));
    }
}

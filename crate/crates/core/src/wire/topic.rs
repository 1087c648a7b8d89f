//! Topic addressing: `/channel/region/(nodeId)/prio`.
//!
//! The node segment is optional; `/cmd/local/3` and `/cmd/local/node7/3` are
//! both canonical. Tokens are restricted to `[A-Za-z0-9_-]` so the grammar
//! stays unambiguous, and priority is a single digit 0..=7 (7 highest).

use std::fmt;

use super::WireError;

/// Highest priority value carried in the `prio` segment.
pub const MAX_PRIO: u8 = 7;

/// Longest token accepted anywhere on the wire (one-byte length prefix).
pub const MAX_TOKEN_LEN: usize = 255;

/// Dissemination scope of a topic.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Region {
    /// Stays within the publishing cluster.
    Local,
    /// Forwarded by gateways into every linked cluster.
    Global,
    /// Forwarded only by gateway links configured for this cluster name.
    Named(String),
}

impl Region {
    pub fn as_str(&self) -> &str {
        match self {
            Region::Local => "local",
            Region::Global => "global",
            Region::Named(s) => s,
        }
    }

    fn from_token(tok: &str) -> Region {
        match tok {
            "local" => Region::Local,
            "global" => Region::Global,
            other => Region::Named(other.to_string()),
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parsed form of a topic string.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicAddress {
    pub channel: String,
    pub region: Region,
    /// Directed delivery target; `None` means fan out to all subscribers.
    pub node_id: Option<String>,
    pub prio: u8,
}

impl TopicAddress {
    pub fn new(channel: &str, region: Region, prio: u8) -> Result<TopicAddress, WireError> {
        let t = TopicAddress {
            channel: channel.to_string(),
            region,
            node_id: None,
            prio,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn directed(mut self, node_id: &str) -> Result<TopicAddress, WireError> {
        self.node_id = Some(node_id.to_string());
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), WireError> {
        if !is_valid_token(&self.channel) {
            return Err(WireError::MalformedTopic(format!(
                "bad channel token {:?}",
                self.channel
            )));
        }
        if !is_valid_token(self.region.as_str()) {
            return Err(WireError::MalformedTopic(format!(
                "bad region token {:?}",
                self.region.as_str()
            )));
        }
        if let Some(node) = &self.node_id {
            if !is_valid_token(node) {
                return Err(WireError::MalformedTopic(format!("bad node token {node:?}")));
            }
        }
        if self.prio > MAX_PRIO {
            return Err(WireError::MalformedTopic(format!(
                "prio {} out of range 0..={MAX_PRIO}",
                self.prio
            )));
        }
        Ok(())
    }
}

impl fmt::Display for TopicAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_topic(self))
    }
}

/// True for non-empty tokens over `[A-Za-z0-9_-]` no longer than 255 bytes.
pub fn is_valid_token(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= MAX_TOKEN_LEN
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// Parses a canonical topic string into its components.
pub fn parse_topic(s: &str) -> Result<TopicAddress, WireError> {
    let rest = s
        .strip_prefix('/')
        .ok_or_else(|| WireError::MalformedTopic(format!("{s:?} must start with '/'")))?;
    if rest.ends_with('/') {
        return Err(WireError::MalformedTopic(format!("{s:?} has a trailing slash")));
    }
    let segs: Vec<&str> = rest.split('/').collect();
    let (channel, region, node_id, prio_seg) = match segs.as_slice() {
        [c, r, p] => (*c, *r, None, *p),
        [c, r, n, p] => (*c, *r, Some(*n), *p),
        _ => {
            return Err(WireError::MalformedTopic(format!(
                "{s:?} has {} segments, expected 3 or 4",
                segs.len()
            )))
        }
    };
    for (what, tok) in [("channel", channel), ("region", region)] {
        if !is_valid_token(tok) {
            return Err(WireError::MalformedTopic(format!("bad {what} segment {tok:?}")));
        }
    }
    if let Some(node) = node_id {
        if !is_valid_token(node) {
            return Err(WireError::MalformedTopic(format!("bad node segment {node:?}")));
        }
    }
    let prio: u8 = prio_seg
        .parse()
        .map_err(|_| WireError::MalformedTopic(format!("bad prio segment {prio_seg:?}")))?;
    if prio > MAX_PRIO || prio_seg.len() != 1 {
        return Err(WireError::MalformedTopic(format!(
            "prio {prio_seg:?} out of range 0..={MAX_PRIO}"
        )));
    }
    Ok(TopicAddress {
        channel: channel.to_string(),
        region: Region::from_token(region),
        node_id: node_id.map(str::to_string),
        prio,
    })
}

/// Renders the canonical topic string; inverse of [`parse_topic`].
pub fn format_topic(t: &TopicAddress) -> String {
    match &t.node_id {
        Some(node) => format!("/{}/{}/{}/{}", t.channel, t.region, node, t.prio),
        None => format!("/{}/{}/{}", t.channel, t.region, t.prio),
    }
}

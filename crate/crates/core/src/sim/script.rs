use alloc::vec::Vec;
use core::net::Ipv4Addr;

use crate::Timestamp;

/// A conflicting fragment: `bytes` placed at `offset` of the IP payload,
/// sent right after the first legitimate fragment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conflict {
    pub offset: usize,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FragPlan {
    pub request: Vec<u8>,
    /// Cut points in the IP payload (TCP header included), multiples of 8.
    pub cuts: Vec<usize>,
    pub conflict: Option<Conflict>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrafficKind {
    /// Handshake, wait `think_ms`, send `request` (fragmented at `cuts` if
    /// any) and wait for the page.
    BenignRequest {
        request: Vec<u8>,
        think_ms: u64,
        cuts: Vec<usize>,
    },
    ExploitDirect {
        payload: Vec<u8>,
    },
    /// `benign` and then `attack` at the same sequence number, followed by
    /// `follow_up` at the next one.
    DuplicateSeqEvasion {
        benign: Vec<u8>,
        attack: Vec<u8>,
        follow_up: Vec<u8>,
    },
    FragEvasion(FragPlan),
    /// Opens a fresh connection after `silence_ms` and sends `payloads`.
    Reconnect {
        silence_ms: u64,
        payloads: Vec<Vec<u8>>,
    },
}

impl TrafficKind {
    pub fn is_benign(&self) -> bool {
        matches!(self, TrafficKind::BenignRequest { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrafficKind::BenignRequest { .. } => "benign",
            TrafficKind::ExploitDirect { .. } => "exploit",
            TrafficKind::DuplicateSeqEvasion { .. } => "duplicate-seq",
            TrafficKind::FragEvasion(_) => "frag-evasion",
            TrafficKind::Reconnect { .. } => "reconnect",
        }
    }
}

/// One TCP connection driven by a client or attacker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrafficScript {
    pub client: Ipv4Addr,
    pub port: u16,
    pub start: Timestamp,
    pub kind: TrafficKind,
}

impl TrafficScript {
    pub fn new(client: Ipv4Addr, port: u16, start: Timestamp, kind: TrafficKind) -> Self {
        TrafficScript { client, port, start, kind }
    }

    /// When the SYN goes out.
    pub fn open_at(&self) -> Timestamp {
        match &self.kind {
            TrafficKind::Reconnect { silence_ms, .. } => self.start + *silence_ms,
            _ => self.start,
        }
    }
}

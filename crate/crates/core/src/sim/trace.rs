use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};
use core::net::Ipv4Addr;

use crate::balancer::{BalancerStats, DropReason};
use crate::honeypot::{CaptureLog, Direction};
use crate::packet::{IpPacket, TcpFlags};
use crate::pool::BackendId;
use crate::session::{AttackReason, AttackerRecord};
use crate::Timestamp;

/// Where a packet delivered to a client came from. Clients cannot tell (every
/// reply carries the VIP as source); the trace can.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Backend(BackendId),
    Honeypot,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Backend(b) => write!(f, "{b}"),
            Origin::Honeypot => f.write_str("honeypot"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceKind {
    Send { pkt: u64, script: usize, src: Ipv4Addr, sport: u16, flags: TcpFlags, len: usize, fragment: bool },
    Lost { pkt: u64 },
    IdsQuery { pkt: u64, src: Ipv4Addr },
    Flag { pkt: u64, src: Ipv4Addr, reason: AttackReason },
    Forward { pkt: u64, backend: BackendId },
    Deflect { pkt: u64 },
    Reset { pkt: u64, backend: BackendId, seq: u32 },
    Drop { pkt: u64, reason: DropReason },
    Absorb { pkt: u64 },
    BackendRx { backend: BackendId, src: Ipv4Addr, sport: u16, seq: u32, len: usize, accepted: bool },
    BackendRst { backend: BackendId, src: Ipv4Addr, sport: u16, accepted: bool },
    Capture { direction: Direction, peer: Ipv4Addr, port: u16, len: usize },
    ClientRx { script: usize, origin: Origin, flags: TcpFlags, len: usize },
    Complete { request: usize, script: usize, origin: Origin, start: Timestamp, latency_ms: u64 },
    Probe { backend: BackendId, ok: bool },
    Health { backend: BackendId, healthy: bool },
    Housekeeping { expired_sessions: usize, evicted_fragments: usize, expired_attackers: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub at: Timestamp,
    pub kind: TraceKind,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ", self.at.as_millis())?;
        match &self.kind {
            TraceKind::Send { pkt, script, src, sport, flags, len, fragment } => write!(
                f,
                "send pkt={pkt} script={script} src={src}:{sport} flags={flags:?} len={len} frag={}",
                u8::from(*fragment)
            ),
            TraceKind::Lost { pkt } => write!(f, "lost pkt={pkt}"),
            TraceKind::IdsQuery { pkt, src } => write!(f, "ids-query pkt={pkt} src={src}"),
            TraceKind::Flag { pkt, src, reason } => write!(f, "flag pkt={pkt} src={src} reason={reason}"),
            TraceKind::Forward { pkt, backend } => write!(f, "forward pkt={pkt} backend={backend}"),
            TraceKind::Deflect { pkt } => write!(f, "deflect pkt={pkt}"),
            TraceKind::Reset { pkt, backend, seq } => write!(f, "rst pkt={pkt} backend={backend} seq={seq}"),
            TraceKind::Drop { pkt, reason } => write!(f, "drop pkt={pkt} reason={reason}"),
            TraceKind::Absorb { pkt } => write!(f, "absorb pkt={pkt}"),
            TraceKind::BackendRx { backend, src, sport, seq, len, accepted } => {
                write!(f, "backend-rx backend={backend} src={src}:{sport} seq={seq} len={len} accepted={accepted}")
            }
            TraceKind::BackendRst { backend, src, sport, accepted } => {
                write!(f, "backend-rst backend={backend} src={src}:{sport} accepted={accepted}")
            }
            TraceKind::Capture { direction, peer, port, len } => {
                let dir = match direction {
                    Direction::Inbound => "in",
                    Direction::Outbound => "out",
                };
                write!(f, "capture dir={dir} peer={peer}:{port} len={len}")
            }
            TraceKind::ClientRx { script, origin, flags, len } => {
                write!(f, "client-rx script={script} origin={origin} flags={flags:?} len={len}")
            }
            TraceKind::Complete { request, script, origin, start, latency_ms } => write!(
                f,
                "complete request={request} script={script} origin={origin} start={} latency={latency_ms}",
                start.as_millis()
            ),
            TraceKind::Probe { backend, ok } => write!(f, "probe backend={backend} ok={ok}"),
            TraceKind::Health { backend, healthy } => write!(f, "health backend={backend} healthy={healthy}"),
            TraceKind::Housekeeping { expired_sessions, evicted_fragments, expired_attackers } => write!(
                f,
                "housekeeping sessions={expired_sessions} fragments={evicted_fragments} attackers={expired_attackers}"
            ),
        }
    }
}

/// Every packet a script put on the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentPacket {
    pub id: u64,
    pub at: Timestamp,
    pub script: usize,
    pub packet: IpPacket,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub request: usize,
    pub script: usize,
    pub origin: Origin,
    pub start: Timestamp,
    pub latency_ms: u64,
}

/// Bytes a backend accepted in sequence, per client connection and overall.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BackendLog {
    pub streams: BTreeMap<(Ipv4Addr, u16), Vec<u8>>,
    pub bytes: Vec<u8>,
}

/// Fate of every packet injected by a script.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct Conservation {
    pub injected: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub lost: u64,
    /// Fragments held for reassembly; the datagram they belong to is
    /// accounted once, by its completing fragment.
    pub absorbed: u64,
    /// Still in flight when the run stopped.
    pub in_flight: u64,
}

impl Conservation {
    pub fn balanced(&self) -> bool {
        self.injected == self.delivered + self.dropped + self.lost + self.absorbed + self.in_flight
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimTrace {
    pub seed: u64,
    pub end: Timestamp,
    pub events: Vec<TraceEvent>,
    pub sent: Vec<SentPacket>,
    pub completions: Vec<Completion>,
    pub backend_logs: Vec<BackendLog>,
    pub capture: CaptureLog,
    pub attackers: Vec<AttackerRecord>,
    pub stats: BalancerStats,
    pub conservation: Conservation,
    /// Number of benign request scripts.
    pub requests: usize,
}

impl SimTrace {
    /// One line per event: `<at_ms> <kind> key=value ...`, followed by a
    /// `conservation` line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# simtrace seed={}", self.seed);
        for e in &self.events {
            let _ = writeln!(out, "{e}");
        }
        let c = &self.conservation;
        let _ = writeln!(
            out,
            "{} conservation injected={} delivered={} dropped={} lost={} absorbed={} in_flight={}",
            self.end.as_millis(),
            c.injected,
            c.delivered,
            c.dropped,
            c.lost,
            c.absorbed,
            c.in_flight
        );
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed {} ran to {} ms", self.seed, self.end.as_millis());
        let _ = writeln!(out, "requests: {} of {} completed", self.completions.len(), self.requests);
        let mut per_origin: BTreeMap<String, usize> = BTreeMap::new();
        for c in &self.completions {
            *per_origin.entry(alloc::format!("{}", c.origin)).or_default() += 1;
        }
        for (origin, n) in &per_origin {
            let _ = writeln!(out, "  served by {origin}: {n}");
        }
        let _ = writeln!(out, "attackers flagged: {}", self.attackers.len());
        for a in &self.attackers {
            let _ = writeln!(out, "  {} {} at {} ms", a.ip, a.reason, a.flagged_at.as_millis());
        }
        let engaged = self.capture.records().iter().any(|r| r.direction == Direction::Inbound);
        let _ = writeln!(
            out,
            "honeypot: {} ({} capture records)",
            if engaged { "engaged" } else { "idle" },
            self.capture.len()
        );
        let _ = writeln!(
            out,
            "balancer: {} in, {} forwarded, {} deflected, {} resets, {} ids queries",
            self.stats.packets_in,
            self.stats.forwarded,
            self.stats.deflected,
            self.stats.resets,
            self.stats.ids_queries
        );
        for (reason, n) in &self.stats.dropped {
            let _ = writeln!(out, "  dropped {reason}: {n}");
        }
        out
    }

    pub fn flagged(&self, ip: Ipv4Addr) -> Option<&AttackerRecord> {
        self.attackers.iter().find(|a| a.ip == ip)
    }

    /// IDS queries for `src` recorded after the event that flagged it.
    pub fn ids_queries_after_flag(&self, src: Ipv4Addr) -> Option<usize> {
        let pos = self.events.iter().position(|e| matches!(&e.kind, TraceKind::Flag { src: s, .. } if *s == src))?;
        Some(
            self.events[pos + 1..]
                .iter()
                .filter(|e| matches!(&e.kind, TraceKind::IdsQuery { src: s, .. } if *s == src))
                .count(),
        )
    }
}

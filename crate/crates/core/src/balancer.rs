//! The balancer's dispatch state machine.
//!
//! [`Balancer::ingest`] takes one client packet and decides, in this order:
//!
//! 1. anything not addressed to the VIP service port is dropped;
//! 2. a flagged source goes straight to the honeypot, without an IDS query;
//! 3. fragments are reassembled, and conflicting fragments flag the source;
//! 4. a payload that disagrees with an earlier segment at the same sequence
//!    number flags the source, resets the backend connection and is dropped;
//! 5. payload-free segments (handshake, pure ACK, FIN) follow session affinity
//!    without an IDS query;
//! 6. everything else is sent to the IDS: benign payloads follow session
//!    affinity, attacks flag the source, reset the backend connection if one
//!    existed, and are deflected to the honeypot.
//!
//! Any internal failure (IDS unreachable, table full, malformed input, no
//! healthy backend) is a drop. Nothing reaches a backend unchecked.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::net::Ipv4Addr;

use thiserror::Error;

use crate::frag::{AssemblyResult, FragConfig, FragError, FragmentAssembler};
use crate::ids::IdsBackend;
use crate::packet::{make_rst, parse_tcp, verify_checksum, FiveTuple, IpPacket, PROTO_TCP};
use crate::pool::{BackendId, BackendPool, HealthSummary, ProbeCountMismatch, DEFAULT_FAILURE_THRESHOLD};
use crate::session::{
    AttackReason, AttackerRegistry, ConsistencyResult, SessionConfig, SessionError, SessionState, SessionTable,
    DEFAULT_MAX_SESSIONS, DEFAULT_MAX_TRACKED_SEGMENTS, DEFAULT_SESSION_TIMEOUT_MS,
};
use crate::Timestamp;

pub const DEFAULT_IDS_TIMEOUT_MS: u64 = 1000;
pub const DEFAULT_PROBE_INTERVAL_MS: u64 = 5000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BalancerConfig {
    pub vip: Ipv4Addr,
    pub service_port: u16,
    pub backends: Vec<Ipv4Addr>,
    pub honeypot: Ipv4Addr,
    pub session_timeout_ms: u64,
    pub ids_timeout_ms: u64,
    pub probe_interval_ms: u64,
    pub failure_threshold: u32,
    pub attacker_ttl_ms: Option<u64>,
    pub max_sessions: usize,
    pub max_tracked_segments: usize,
    pub frag: FragConfig,
}

impl BalancerConfig {
    pub fn new(vip: Ipv4Addr, service_port: u16, backends: Vec<Ipv4Addr>, honeypot: Ipv4Addr) -> Self {
        BalancerConfig {
            vip,
            service_port,
            backends,
            honeypot,
            session_timeout_ms: DEFAULT_SESSION_TIMEOUT_MS,
            ids_timeout_ms: DEFAULT_IDS_TIMEOUT_MS,
            probe_interval_ms: DEFAULT_PROBE_INTERVAL_MS,
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
            attacker_ttl_ms: None,
            max_sessions: DEFAULT_MAX_SESSIONS,
            max_tracked_segments: DEFAULT_MAX_TRACKED_SEGMENTS,
            frag: FragConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |what: &str| Err(ConfigError(String::from(what)));
        if self.vip.is_unspecified() {
            return bad("vip must be set");
        }
        if self.service_port == 0 {
            return bad("service_port must be non-zero");
        }
        if self.honeypot.is_unspecified() {
            return bad("honeypot must be set");
        }
        if self.backends.is_empty() {
            return bad("at least one backend is required");
        }
        if self.failure_threshold == 0 {
            return bad("failure_threshold must be at least 1");
        }
        if self.probe_interval_ms == 0 || self.session_timeout_ms == 0 || self.ids_timeout_ms == 0 {
            return bad("intervals and timeouts must be positive");
        }
        if self.max_sessions == 0 || self.max_tracked_segments == 0 || self.frag.per_source_quota == 0 {
            return bad("capacities must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("invalid balancer config: {0}")]
pub struct ConfigError(pub String);

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropReason {
    NotVip,
    Malformed,
    BadChecksum,
    FragmentLimit,
    TableFull,
    NoHealthyBackend,
    IdsUnavailable,
    DuplicateSeq,
    ClockRegression,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::NotVip => "not-vip",
            DropReason::Malformed => "malformed",
            DropReason::BadChecksum => "bad-checksum",
            DropReason::FragmentLimit => "fragment-limit",
            DropReason::TableFull => "table-full",
            DropReason::NoHealthyBackend => "no-healthy-backend",
            DropReason::IdsUnavailable => "ids-unavailable",
            DropReason::DuplicateSeq => "duplicate-seq",
            DropReason::ClockRegression => "clock-regression",
        }
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    ForwardToBackend(BackendId, IpPacket),
    ForwardToHoneypot(IpPacket),
    /// Reset toward the backend holding the connection.
    EmitRst(BackendId, IpPacket),
    Drop(DropReason),
    /// Health probe due for this backend.
    Probe(BackendId),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BalancerStats {
    pub packets_in: u64,
    pub forwarded: u64,
    pub deflected: u64,
    pub resets: u64,
    pub dropped: BTreeMap<DropReason, u64>,
    pub ids_queries: u64,
    pub ids_queries_by_source: BTreeMap<Ipv4Addr, u64>,
}

/// What the last [`Balancer::tick`] removed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TickReport {
    pub expired_sessions: Vec<FiveTuple>,
    pub evicted_fragments: usize,
    pub expired_attackers: Vec<Ipv4Addr>,
}

pub struct Balancer<I> {
    config: BalancerConfig,
    pool: BackendPool,
    sessions: SessionTable,
    frags: FragmentAssembler,
    attackers: AttackerRegistry,
    ids: I,
    stats: BalancerStats,
    next_probe_at: Timestamp,
    last_tick: TickReport,
}

impl<I: IdsBackend> Balancer<I> {
    pub fn new(config: BalancerConfig, ids: I) -> Result<Self, ConfigError> {
        config.validate()?;
        let pool = BackendPool::new(&config.backends, config.failure_threshold);
        let sessions = SessionTable::new(SessionConfig {
            timeout_ms: config.session_timeout_ms,
            max_sessions: config.max_sessions,
            max_tracked_segments: config.max_tracked_segments,
        });
        Ok(Balancer {
            pool,
            sessions,
            frags: FragmentAssembler::new(config.frag),
            attackers: AttackerRegistry::new(config.attacker_ttl_ms),
            ids,
            stats: BalancerStats::default(),
            next_probe_at: Timestamp(config.probe_interval_ms),
            last_tick: TickReport::default(),
            config,
        })
    }

    pub fn config(&self) -> &BalancerConfig {
        &self.config
    }

    pub fn pool(&self) -> &BackendPool {
        &self.pool
    }

    pub fn sessions(&self) -> &SessionTable {
        &self.sessions
    }

    pub fn fragments(&self) -> &FragmentAssembler {
        &self.frags
    }

    pub fn attackers(&self) -> &AttackerRegistry {
        &self.attackers
    }

    pub fn stats(&self) -> &BalancerStats {
        &self.stats
    }

    pub fn ids_mut(&mut self) -> &mut I {
        &mut self.ids
    }

    pub fn last_tick(&self) -> &TickReport {
        &self.last_tick
    }

    pub fn ingest(&mut self, pkt: IpPacket, now: Timestamp) -> Vec<Action> {
        self.stats.packets_in += 1;
        let actions = self.dispatch(pkt, now);
        for a in &actions {
            match a {
                Action::ForwardToBackend(..) => self.stats.forwarded += 1,
                Action::ForwardToHoneypot(_) => self.stats.deflected += 1,
                Action::EmitRst(..) => self.stats.resets += 1,
                Action::Drop(r) => *self.stats.dropped.entry(*r).or_default() += 1,
                Action::Probe(_) => {}
            }
        }
        actions
    }

    fn dispatch(&mut self, pkt: IpPacket, now: Timestamp) -> Vec<Action> {
        let drop = |r| vec![Action::Drop(r)];
        let service_port = self.config.service_port;

        if pkt.dst_ip != self.config.vip || pkt.protocol != PROTO_TCP {
            return drop(DropReason::NotVip);
        }
        if pkt.tcp_dst_port_hint().is_some_and(|p| p != service_port) {
            return drop(DropReason::NotVip);
        }
        let src = pkt.src_ip;
        if self.attackers.is_flagged(src, now) {
            return vec![Action::ForwardToHoneypot(pkt)];
        }

        let pkt = if pkt.is_fragment() {
            match self.frags.offer(pkt.clone(), now) {
                Ok(AssemblyResult::Complete(whole)) => whole,
                Ok(AssemblyResult::Pending) => return Vec::new(),
                Ok(AssemblyResult::EvasionDetected(_)) => {
                    self.attackers.flag(src, AttackReason::FragEvasion, now);
                    return vec![Action::ForwardToHoneypot(pkt)];
                }
                Err(FragError::BufferLimit) => return drop(DropReason::FragmentLimit),
                Err(FragError::Malformed(_)) => return drop(DropReason::Malformed),
            }
        } else {
            pkt
        };

        let Ok(seg) = parse_tcp(&pkt) else {
            return drop(DropReason::Malformed);
        };
        if seg.dst_port != service_port {
            return drop(DropReason::NotVip);
        }
        if !verify_checksum(&seg, pkt.src_ip, pkt.dst_ip) {
            return drop(DropReason::BadChecksum);
        }

        let key = FiveTuple::of(&pkt, &seg);
        let pool = &mut self.pool;
        let (entry, fresh) = match self.sessions.lookup_or_admit(key, now, || pool.select()) {
            Ok(found) => found,
            Err(SessionError::TableFull) => return drop(DropReason::TableFull),
            Err(SessionError::NoHealthyBackend(_)) => return drop(DropReason::NoHealthyBackend),
            Err(SessionError::ClockRegression { .. }) => return drop(DropReason::ClockRegression),
        };
        let backend = entry.backend;

        if entry.record_segment(&seg) == ConsistencyResult::Inconsistent {
            self.attackers.flag(src, AttackReason::DuplicateSeq, now);
            let mut out = Vec::new();
            if entry.state == SessionState::Active {
                if let Ok(rst) = make_rst(entry) {
                    entry.state = SessionState::ResetSent;
                    out.push(Action::EmitRst(backend, rst));
                }
            }
            out.push(Action::Drop(DropReason::DuplicateSeq));
            return out;
        }

        if seg.payload.is_empty() {
            entry.note_forwarded(&seg);
            return vec![Action::ForwardToBackend(backend, pkt)];
        }

        self.stats.ids_queries += 1;
        *self.stats.ids_queries_by_source.entry(src).or_default() += 1;
        match self.ids.query(&seg.payload) {
            Err(_) => {
                if fresh {
                    self.sessions.remove(&key);
                }
                drop(DropReason::IdsUnavailable)
            }
            Ok(verdict) if !verdict.attack => {
                entry.note_forwarded(&seg);
                vec![Action::ForwardToBackend(backend, pkt)]
            }
            Ok(verdict) => {
                self.attackers.flag(src, AttackReason::SignatureMatch(verdict.matched), now);
                let mut out = Vec::new();
                if fresh {
                    self.sessions.remove(&key);
                } else if entry.state == SessionState::Active {
                    if let Ok(rst) = make_rst(entry) {
                        entry.state = SessionState::ResetSent;
                        out.push(Action::EmitRst(backend, rst));
                    }
                }
                out.push(Action::ForwardToHoneypot(pkt));
                out
            }
        }
    }

    pub fn select_backend(&mut self) -> Result<BackendId, crate::pool::NoHealthyBackend> {
        self.pool.select()
    }

    pub fn probe_result(&mut self, backend: BackendId, ok: bool) -> Option<bool> {
        self.pool.probe_result(backend, ok)
    }

    pub fn health_tick(&mut self, results: &[bool], now: Timestamp) -> Result<HealthSummary, ProbeCountMismatch> {
        self.pool.health_tick(results, now)
    }

    /// Housekeeping: session expiry, fragment sweep, attacker TTL expiry and
    /// health probe scheduling. Returns one `Probe` per backend when a probe
    /// round is due.
    pub fn tick(&mut self, now: Timestamp) -> Vec<Action> {
        let expired_sessions = self.sessions.expire(now).unwrap_or_default();
        let evicted_fragments = self.frags.sweep(now).len();
        let expired_attackers = self.attackers.expire(now);
        self.last_tick = TickReport { expired_sessions, evicted_fragments, expired_attackers };

        let mut out = Vec::new();
        if now >= self.next_probe_at {
            out.extend(self.pool.backends().iter().map(|b| Action::Probe(b.id)));
            let interval = self.config.probe_interval_ms;
            while self.next_probe_at <= now {
                self.next_probe_at = self.next_probe_at + interval;
            }
        }
        out
    }
}

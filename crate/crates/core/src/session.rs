//! Connection table, duplicate-sequence consistency check and attacker
//! registry.
//!
//! The balancer only sees the client-to-server direction, so it never observes
//! the server's FIN. Sessions therefore end by idle timeout: every packet
//! refreshes `last_seen`, and [`SessionTable::expire`] drops entries idle for
//! longer than the configured timeout (four minutes by default).

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};
use core::net::Ipv4Addr;

use thiserror::Error;

use crate::packet::{FiveTuple, TcpSegment};
use crate::pool::{BackendId, NoHealthyBackend};
use crate::Timestamp;

pub const DEFAULT_SESSION_TIMEOUT_MS: u64 = 240_000;
pub const DEFAULT_MAX_TRACKED_SEGMENTS: usize = 256;
pub const DEFAULT_MAX_SESSIONS: usize = 65_536;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct SessionConfig {
    pub timeout_ms: u64,
    pub max_sessions: usize,
    pub max_tracked_segments: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            timeout_ms: DEFAULT_SESSION_TIMEOUT_MS,
            max_sessions: DEFAULT_MAX_SESSIONS,
            max_tracked_segments: DEFAULT_MAX_TRACKED_SEGMENTS,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("session table is full")]
    TableFull,
    #[error("timestamp {now} precedes last observed {last}")]
    ClockRegression { now: Timestamp, last: Timestamp },
    #[error(transparent)]
    NoHealthyBackend(#[from] NoHealthyBackend),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SessionState {
    Active,
    ResetSent,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ConsistencyResult {
    FreshSegment,
    ExactRetransmit,
    /// Same sequence number, valid checksum, different content.
    Inconsistent,
}

/// 64-bit FNV-1a over the payload, paired with its length.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct PayloadDigest {
    pub len: u32,
    pub hash: u64,
}

impl PayloadDigest {
    pub fn of(payload: &[u8]) -> Self {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in payload {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        PayloadDigest { len: payload.len() as u32, hash }
    }
}

/// Bounded map of recently seen sequence numbers, oldest evicted first.
#[derive(Clone, Debug)]
struct SeqLog {
    order: VecDeque<u32>,
    digests: BTreeMap<u32, PayloadDigest>,
    capacity: usize,
}

impl SeqLog {
    fn new(capacity: usize) -> Self {
        SeqLog { order: VecDeque::new(), digests: BTreeMap::new(), capacity: capacity.max(1) }
    }

    fn insert(&mut self, seq: u32, digest: PayloadDigest) {
        if self.order.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.digests.remove(&old);
            }
        }
        self.order.push_back(seq);
        self.digests.insert(seq, digest);
    }
}

#[derive(Clone, Debug)]
pub struct SessionEntry {
    pub key: FiveTuple,
    pub backend: BackendId,
    pub state: SessionState,
    last_seen: Timestamp,
    seq_log: SeqLog,
    /// Next client sequence number the backend expects, from segments
    /// actually forwarded to it.
    next_client_seq: Option<u32>,
}

impl SessionEntry {
    pub fn new(key: FiveTuple, backend: BackendId, now: Timestamp) -> Self {
        Self::with_capacity(key, backend, now, DEFAULT_MAX_TRACKED_SEGMENTS)
    }

    pub fn with_capacity(key: FiveTuple, backend: BackendId, now: Timestamp, max_tracked_segments: usize) -> Self {
        SessionEntry {
            key,
            backend,
            state: SessionState::Active,
            last_seen: now,
            seq_log: SeqLog::new(max_tracked_segments),
            next_client_seq: None,
        }
    }

    pub fn last_seen(&self) -> Timestamp {
        self.last_seen
    }

    pub fn touch(&mut self, now: Timestamp) {
        self.last_seen = self.last_seen.max(now);
    }

    pub fn tracked_segments(&self) -> usize {
        self.seq_log.order.len()
    }

    /// Compares `seg` against the payload previously seen at the same
    /// sequence number. The caller must have verified the checksum.
    ///
    /// Segments without payload carry nothing to disagree about (the final
    /// handshake ACK shares its sequence number with the first data segment),
    /// so they are always fresh and are not logged.
    pub fn record_segment(&mut self, seg: &TcpSegment) -> ConsistencyResult {
        if seg.payload.is_empty() {
            return ConsistencyResult::FreshSegment;
        }
        let digest = PayloadDigest::of(&seg.payload);
        match self.seq_log.digests.get(&seg.seq) {
            None => {
                self.seq_log.insert(seg.seq, digest);
                ConsistencyResult::FreshSegment
            }
            Some(d) if *d == digest => ConsistencyResult::ExactRetransmit,
            Some(_) => ConsistencyResult::Inconsistent,
        }
    }

    /// Records that `seg` went to the backend, advancing the reset anchor.
    pub fn note_forwarded(&mut self, seg: &TcpSegment) {
        let end = seg.seq.wrapping_add(seg.seq_len());
        match self.next_client_seq {
            Some(cur) if (end.wrapping_sub(cur) as i32) <= 0 => {}
            _ => self.next_client_seq = Some(end),
        }
    }

    pub fn next_client_seq(&self) -> Option<u32> {
        self.next_client_seq
    }
}

/// Connection table keyed by five-tuple.
#[derive(Clone, Debug, Default)]
pub struct SessionTable {
    config: SessionConfig,
    entries: BTreeMap<FiveTuple, SessionEntry>,
    last_now: Option<Timestamp>,
}

impl SessionTable {
    pub fn new(config: SessionConfig) -> Self {
        SessionTable { config, entries: BTreeMap::new(), last_now: None }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &FiveTuple) -> Option<&SessionEntry> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &FiveTuple) -> Option<&mut SessionEntry> {
        self.entries.get_mut(key)
    }

    pub fn remove(&mut self, key: &FiveTuple) -> Option<SessionEntry> {
        self.entries.remove(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SessionEntry> {
        self.entries.values()
    }

    fn observe(&mut self, now: Timestamp) -> Result<(), SessionError> {
        if let Some(last) = self.last_now {
            if now < last {
                return Err(SessionError::ClockRegression { now, last });
            }
        }
        self.last_now = Some(now);
        Ok(())
    }

    /// Returns the live entry for `key`, refreshing its timestamp, or admits a
    /// new one with the backend chosen by `assign`. The flag is true for a
    /// newly admitted entry. An entry past its idle timeout but not yet swept
    /// is replaced.
    pub fn lookup_or_admit<F>(
        &mut self,
        key: FiveTuple,
        now: Timestamp,
        assign: F,
    ) -> Result<(&mut SessionEntry, bool), SessionError>
    where
        F: FnOnce() -> Result<BackendId, NoHealthyBackend>,
    {
        self.observe(now)?;
        let timeout = self.config.timeout_ms;
        let live = matches!(self.entries.get(&key), Some(e) if now.since(e.last_seen) <= timeout);
        if live {
            let entry = self.entries.get_mut(&key).expect("checked");
            entry.touch(now);
            return Ok((entry, false));
        }
        let stale = self.entries.remove(&key).is_some();
        if !stale && self.entries.len() >= self.config.max_sessions {
            return Err(SessionError::TableFull);
        }
        let backend = assign()?;
        let entry = SessionEntry::with_capacity(key, backend, now, self.config.max_tracked_segments);
        Ok((self.entries.entry(key).or_insert(entry), true))
    }

    /// Removes every entry idle for strictly longer than the timeout.
    pub fn expire(&mut self, now: Timestamp) -> Result<Vec<FiveTuple>, SessionError> {
        self.observe(now)?;
        let timeout = self.config.timeout_ms;
        let removed: Vec<FiveTuple> =
            self.entries.values().filter(|e| now.since(e.last_seen) > timeout).map(|e| e.key).collect();
        for k in &removed {
            self.entries.remove(k);
        }
        Ok(removed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttackReason {
    SignatureMatch(Vec<u32>),
    DuplicateSeq,
    FragEvasion,
}

impl fmt::Display for AttackReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackReason::SignatureMatch(ids) => {
                f.write_str("signature:")?;
                for (i, id) in ids.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{id}")?;
                }
                Ok(())
            }
            AttackReason::DuplicateSeq => f.write_str("duplicate-seq"),
            AttackReason::FragEvasion => f.write_str("frag-evasion"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttackerRecord {
    pub ip: Ipv4Addr,
    pub reason: AttackReason,
    pub flagged_at: Timestamp,
}

/// Flagged source addresses. Records live forever unless a TTL is set.
#[derive(Clone, Debug, Default)]
pub struct AttackerRegistry {
    ttl_ms: Option<u64>,
    records: BTreeMap<Ipv4Addr, AttackerRecord>,
}

impl AttackerRegistry {
    pub fn new(ttl_ms: Option<u64>) -> Self {
        AttackerRegistry { ttl_ms, records: BTreeMap::new() }
    }

    fn live(&self, rec: &AttackerRecord, now: Timestamp) -> bool {
        self.ttl_ms.is_none_or(|ttl| now.since(rec.flagged_at) <= ttl)
    }

    /// Flags `ip`. Re-flagging a live record keeps the original reason and
    /// time.
    pub fn flag(&mut self, ip: Ipv4Addr, reason: AttackReason, now: Timestamp) -> &AttackerRecord {
        let expired = matches!(self.records.get(&ip), Some(r) if !self.live(r, now));
        if expired {
            self.records.remove(&ip);
        }
        self.records.entry(ip).or_insert(AttackerRecord { ip, reason, flagged_at: now })
    }

    pub fn is_flagged(&self, ip: Ipv4Addr, now: Timestamp) -> bool {
        self.records.get(&ip).is_some_and(|r| self.live(r, now))
    }

    pub fn get(&self, ip: Ipv4Addr) -> Option<&AttackerRecord> {
        self.records.get(&ip)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Drops records past their TTL. A no-op without a TTL.
    pub fn expire(&mut self, now: Timestamp) -> Vec<Ipv4Addr> {
        let gone: Vec<Ipv4Addr> = self.records.values().filter(|r| !self.live(r, now)).map(|r| r.ip).collect();
        for ip in &gone {
            self.records.remove(ip);
        }
        gone
    }

    pub fn snapshot(&self) -> Vec<AttackerRecord> {
        self.records.values().cloned().collect()
    }

    /// One line per record: `<ip> <reason> <flagged_at_ms>`.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for r in self.records.values() {
            let _ = writeln!(out, "{} {} {}", r.ip, r.reason, r.flagged_at);
        }
        out
    }
}

//! IPv4 fragment reassembly at the balancer.
//!
//! Reassembling before inspection means the IDS and the backend see the same
//! bytes. Ambiguity is refused rather than arbitrated: overlapping fragments
//! must agree byte for byte, and every fragment must agree on where the
//! datagram ends. Anything else is reported as an evasion attempt.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::net::Ipv4Addr;

use thiserror::Error;

use crate::packet::{IpPacket, MAX_DATAGRAM};
use crate::Timestamp;

pub const DEFAULT_REASSEMBLY_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_PER_SOURCE_QUOTA: usize = 64;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct FragConfig {
    pub timeout_ms: u64,
    pub per_source_quota: usize,
}

impl Default for FragConfig {
    fn default() -> Self {
        FragConfig { timeout_ms: DEFAULT_REASSEMBLY_TIMEOUT_MS, per_source_quota: DEFAULT_PER_SOURCE_QUOTA }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FragKey {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub protocol: u8,
    pub identification: u16,
}

impl FragKey {
    pub fn of(pkt: &IpPacket) -> Self {
        FragKey { src_ip: pkt.src_ip, dst_ip: pkt.dst_ip, protocol: pkt.protocol, identification: pkt.identification }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum EvasionReason {
    /// Two fragments cover the same byte with different values.
    ConflictingOverlap,
    /// Fragments disagree about the datagram's total length.
    InconsistentLength,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AssemblyResult {
    /// An unfragmented packet (offset 0, no more-fragments flag).
    Complete(IpPacket),
    Pending,
    EvasionDetected(EvasionReason),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Error)]
pub enum FragError {
    #[error("per-source fragment buffer quota exceeded")]
    BufferLimit,
    #[error("malformed fragment: {0}")]
    Malformed(&'static str),
}

#[derive(Clone, Debug)]
struct FragmentBuffer {
    /// Header of the offset-zero fragment, payload stripped.
    header: Option<IpPacket>,
    pieces: Vec<(usize, Vec<u8>)>,
    total_len: Option<usize>,
    first_seen: Timestamp,
}

impl FragmentBuffer {
    fn conflict(&self, start: usize, data: &[u8], last: bool) -> Option<EvasionReason> {
        let end = start + data.len();
        if let Some(total) = self.total_len {
            if (last && end != total) || end > total {
                return Some(EvasionReason::InconsistentLength);
            }
        }
        if last && self.pieces.iter().any(|(s, d)| s + d.len() > end) {
            return Some(EvasionReason::InconsistentLength);
        }
        for (s, d) in &self.pieces {
            let lo = start.max(*s);
            let hi = end.min(s + d.len());
            if lo < hi && data[lo - start..hi - start] != d[lo - s..hi - s] {
                return Some(EvasionReason::ConflictingOverlap);
            }
        }
        None
    }

    fn is_covered(&self) -> bool {
        let Some(total) = self.total_len else { return false };
        if self.header.is_none() {
            return false;
        }
        let mut ranges: Vec<(usize, usize)> = self.pieces.iter().map(|(s, d)| (*s, s + d.len())).collect();
        ranges.sort_unstable();
        let mut reach = 0;
        for (s, e) in ranges {
            if s > reach {
                return false;
            }
            reach = reach.max(e);
        }
        reach >= total
    }

    fn assemble(self) -> IpPacket {
        let total = self.total_len.unwrap_or(0);
        let mut payload = vec![0u8; total];
        for (s, d) in &self.pieces {
            payload[*s..s + d.len()].copy_from_slice(d);
        }
        let mut pkt = self.header.expect("covered buffer has an offset-zero fragment");
        pkt.payload = payload;
        pkt.fragment_offset = 0;
        pkt.more_fragments = false;
        pkt
    }
}

/// Per-key fragment buffers with a timeout and a per-source quota.
#[derive(Clone, Debug, Default)]
pub struct FragmentAssembler {
    config: FragConfig,
    buffers: BTreeMap<FragKey, FragmentBuffer>,
}

impl FragmentAssembler {
    pub fn new(config: FragConfig) -> Self {
        FragmentAssembler { config, buffers: BTreeMap::new() }
    }

    pub fn config(&self) -> &FragConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    pub fn pending_keys(&self) -> impl Iterator<Item = (&FragKey, Timestamp)> {
        self.buffers.iter().map(|(k, b)| (k, b.first_seen))
    }

    pub fn offer(&mut self, frag: IpPacket, now: Timestamp) -> Result<AssemblyResult, FragError> {
        if !frag.is_fragment() {
            return Ok(AssemblyResult::Complete(frag));
        }
        if frag.payload.is_empty() {
            return Err(FragError::Malformed("empty fragment"));
        }
        if frag.more_fragments && !frag.payload.len().is_multiple_of(8) {
            return Err(FragError::Malformed("non-final fragment not a multiple of 8 bytes"));
        }
        let start = frag.fragment_byte_offset();
        if start + frag.payload.len() > MAX_DATAGRAM {
            return Err(FragError::Malformed("fragment extends past 65535"));
        }

        let key = FragKey::of(&frag);
        if let Some(buf) = self.buffers.get(&key) {
            if now.since(buf.first_seen) > self.config.timeout_ms {
                self.buffers.remove(&key);
            }
        }
        if !self.buffers.contains_key(&key) {
            let from_src = self.buffers.keys().filter(|k| k.src_ip == key.src_ip).count();
            if from_src >= self.config.per_source_quota {
                return Err(FragError::BufferLimit);
            }
            self.buffers
                .insert(key, FragmentBuffer { header: None, pieces: Vec::new(), total_len: None, first_seen: now });
        }

        let buf = self.buffers.get_mut(&key).expect("inserted above");
        let last = !frag.more_fragments;
        if let Some(reason) = buf.conflict(start, &frag.payload, last) {
            self.buffers.remove(&key);
            return Ok(AssemblyResult::EvasionDetected(reason));
        }
        if last {
            buf.total_len = Some(start + frag.payload.len());
        }
        let mut header = frag;
        let data = core::mem::take(&mut header.payload);
        buf.pieces.push((start, data));
        if start == 0 {
            buf.header = Some(header);
        }

        if buf.is_covered() {
            let buf = self.buffers.remove(&key).expect("present");
            return Ok(AssemblyResult::Complete(buf.assemble()));
        }
        Ok(AssemblyResult::Pending)
    }

    /// Drops every buffer strictly older than the reassembly timeout.
    pub fn sweep(&mut self, now: Timestamp) -> Vec<FragKey> {
        let timeout = self.config.timeout_ms;
        let evicted: Vec<FragKey> =
            self.buffers.iter().filter(|(_, b)| now.since(b.first_seen) > timeout).map(|(k, _)| *k).collect();
        for k in &evicted {
            self.buffers.remove(k);
        }
        evicted
    }
}

/// Splits `pkt` into fragments at the given payload byte boundaries. Each
/// boundary must be a multiple of 8. Used by traffic generators.
pub fn fragment_at(pkt: &IpPacket, cuts: &[usize]) -> Vec<IpPacket> {
    let mut bounds = vec![0];
    bounds.extend(cuts.iter().copied().filter(|&c| c > 0 && c < pkt.payload.len()));
    bounds.push(pkt.payload.len());
    bounds.dedup();
    bounds
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            debug_assert!(w[0] % 8 == 0);
            let mut f = pkt.clone();
            f.payload = pkt.payload[w[0]..w[1]].to_vec();
            f.fragment_offset = (w[0] / 8) as u16;
            f.more_fragments = i + 2 < bounds.len();
            f
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::PROTO_TCP;
    use proptest::prelude::*;

    const SRC: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 7);
    const VIP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 100);

    fn datagram(payload: Vec<u8>, id: u16) -> IpPacket {
        let mut p = IpPacket::new(SRC, VIP, PROTO_TCP, payload);
        p.identification = id;
        p
    }

    fn piece(id: u16, offset_bytes: usize, data: &[u8], more: bool) -> IpPacket {
        let mut p = datagram(data.to_vec(), id);
        p.fragment_offset = (offset_bytes / 8) as u16;
        p.more_fragments = more;
        p
    }

    /// Flat-buffer oracle: place every fragment at offset*8.
    fn flat_place(frags: &[IpPacket]) -> Vec<u8> {
        let total = frags.iter().map(|f| f.fragment_byte_offset() + f.payload.len()).max().unwrap_or(0);
        let mut out = vec![0u8; total];
        for f in frags {
            let s = f.fragment_byte_offset();
            out[s..s + f.payload.len()].copy_from_slice(&f.payload);
        }
        out
    }

    #[test]
    fn unfragmented_is_complete_immediately() {
        let mut asm = FragmentAssembler::default();
        let pkt = datagram(b"whole".to_vec(), 1);
        assert_eq!(asm.offer(pkt.clone(), Timestamp::ZERO), Ok(AssemblyResult::Complete(pkt)));
        assert!(asm.is_empty());
    }

    #[test]
    fn two_fragments_either_order() {
        let payload: Vec<u8> = (0..40u8).collect();
        let whole = datagram(payload.clone(), 9);
        let frags = fragment_at(&whole, &[16]);
        assert_eq!(frags.len(), 2);
        assert_eq!(flat_place(&frags), payload);
        for order in [[0, 1], [1, 0]] {
            let mut asm = FragmentAssembler::default();
            assert_eq!(asm.offer(frags[order[0]].clone(), Timestamp::ZERO), Ok(AssemblyResult::Pending));
            match asm.offer(frags[order[1]].clone(), Timestamp::ZERO).unwrap() {
                AssemblyResult::Complete(p) => {
                    assert_eq!(p.payload, payload);
                    assert!(!p.is_fragment());
                }
                other => panic!("{other:?}"),
            }
            assert!(asm.is_empty());
        }
    }

    #[test]
    fn conflicting_same_range_is_evasion() {
        let mut asm = FragmentAssembler::default();
        asm.offer(piece(3, 0, b"AAAAAAAA", true), Timestamp::ZERO).unwrap();
        assert_eq!(
            asm.offer(piece(3, 0, b"BBBBBBBB", true), Timestamp::ZERO),
            Ok(AssemblyResult::EvasionDetected(EvasionReason::ConflictingOverlap))
        );
        assert!(asm.is_empty());
    }

    #[test]
    fn identical_overlap_is_tolerated() {
        let mut asm = FragmentAssembler::default();
        assert_eq!(asm.offer(piece(4, 0, b"AAAAAAAA", true), Timestamp::ZERO), Ok(AssemblyResult::Pending));
        assert_eq!(asm.offer(piece(4, 0, b"AAAAAAAA", true), Timestamp::ZERO), Ok(AssemblyResult::Pending));
        match asm.offer(piece(4, 8, b"tail", false), Timestamp::ZERO).unwrap() {
            AssemblyResult::Complete(p) => assert_eq!(p.payload, b"AAAAAAAAtail"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn disagreeing_final_lengths_are_evasion() {
        let mut asm = FragmentAssembler::default();
        asm.offer(piece(5, 8, b"end", false), Timestamp::ZERO).unwrap();
        assert_eq!(
            asm.offer(piece(5, 8, b"endxx", false), Timestamp::ZERO),
            Ok(AssemblyResult::EvasionDetected(EvasionReason::InconsistentLength))
        );
        asm.offer(piece(6, 8, b"end", false), Timestamp::ZERO).unwrap();
        assert_eq!(
            asm.offer(piece(6, 16, b"pastend!", true), Timestamp::ZERO),
            Ok(AssemblyResult::EvasionDetected(EvasionReason::InconsistentLength))
        );
    }

    #[test]
    fn evasion_clears_key_so_a_clean_retry_starts_fresh() {
        let mut asm = FragmentAssembler::default();
        asm.offer(piece(7, 0, b"AAAAAAAA", true), Timestamp::ZERO).unwrap();
        asm.offer(piece(7, 0, b"BBBBBBBB", true), Timestamp::ZERO).unwrap();
        assert_eq!(asm.offer(piece(7, 0, b"CCCCCCCC", true), Timestamp::ZERO), Ok(AssemblyResult::Pending));
        match asm.offer(piece(7, 8, b"!", false), Timestamp::ZERO).unwrap() {
            AssemblyResult::Complete(p) => assert_eq!(p.payload, b"CCCCCCCC!"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_fragments() {
        let mut asm = FragmentAssembler::default();
        assert!(matches!(asm.offer(piece(1, 0, b"odd", true), Timestamp::ZERO), Err(FragError::Malformed(_))));
        assert!(matches!(asm.offer(piece(1, 8, b"", false), Timestamp::ZERO), Err(FragError::Malformed(_))));
    }

    #[test]
    fn per_source_quota() {
        let mut asm = FragmentAssembler::new(FragConfig { timeout_ms: 30_000, per_source_quota: 2 });
        asm.offer(piece(1, 0, b"AAAAAAAA", true), Timestamp::ZERO).unwrap();
        asm.offer(piece(2, 0, b"AAAAAAAA", true), Timestamp::ZERO).unwrap();
        assert_eq!(asm.offer(piece(3, 0, b"AAAAAAAA", true), Timestamp::ZERO), Err(FragError::BufferLimit));
        // Existing keys still accept fragments.
        assert!(asm.offer(piece(1, 8, b"z", false), Timestamp::ZERO).is_ok());
    }

    #[test]
    fn sweep_boundary_is_strict() {
        let mut asm = FragmentAssembler::default();
        assert!(asm.sweep(Timestamp::from_secs(1000)).is_empty());
        asm.offer(piece(1, 0, b"AAAAAAAA", true), Timestamp::ZERO).unwrap();
        assert!(asm.sweep(Timestamp::from_millis(DEFAULT_REASSEMBLY_TIMEOUT_MS)).is_empty());
        assert_eq!(asm.len(), 1);
        let evicted = asm.sweep(Timestamp::from_millis(DEFAULT_REASSEMBLY_TIMEOUT_MS + 1));
        assert_eq!(evicted.len(), 1);
        assert!(asm.is_empty());
    }

    #[test]
    fn stale_buffer_is_replaced_on_offer() {
        let mut asm = FragmentAssembler::default();
        asm.offer(piece(1, 0, b"AAAAAAAA", true), Timestamp::ZERO).unwrap();
        let later = Timestamp::from_millis(DEFAULT_REASSEMBLY_TIMEOUT_MS + 5);
        // Would conflict with the stale piece, but that piece has timed out.
        assert_eq!(asm.offer(piece(1, 0, b"BBBBBBBB", true), later), Ok(AssemblyResult::Pending));
    }

    proptest! {
        #[test]
        fn any_partition_any_order_reassembles(
            payload in proptest::collection::vec(any::<u8>(), 1..400),
            raw_cuts in proptest::collection::vec(1usize..50, 0..8),
            seed in any::<u64>(),
        ) {
            let whole = datagram(payload.clone(), 77);
            let cuts: Vec<usize> = raw_cuts.iter().scan(0, |acc, c| { *acc += c * 8; Some(*acc) }).collect();
            let frags = fragment_at(&whole, &cuts);
            // deterministic permutation from seed
            let mut order: Vec<usize> = (0..frags.len()).collect();
            let mut s = seed;
            for i in (1..order.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (s >> 33) as usize % (i + 1));
            }
            let mut asm = FragmentAssembler::default();
            let mut result = None;
            for (n, &i) in order.iter().enumerate() {
                let r = asm.offer(frags[i].clone(), Timestamp::ZERO).unwrap();
                if n + 1 < order.len() && frags.len() > 1 {
                    prop_assert_eq!(&r, &AssemblyResult::Pending);
                } else {
                    result = Some(r);
                }
            }
            match result.unwrap() {
                AssemblyResult::Complete(p) => prop_assert_eq!(p.payload, payload),
                other => prop_assert!(false, "unexpected {:?}", other),
            }
        }

        #[test]
        fn evasion_iff_some_pair_disagrees(
            blocks in proptest::collection::vec((0usize..6, 1usize..4, 0u8..3), 2..6),
        ) {
            // Fragments over a small alphabet so overlaps often agree.
            let frags: Vec<IpPacket> = blocks
                .iter()
                .map(|&(off, len, fill)| piece(11, off * 8, &vec![b'a' + fill; len * 8], true))
                .collect();
            let mut disagree = false;
            for i in 0..frags.len() {
                for j in 0..i {
                    let (a, b) = (&frags[i], &frags[j]);
                    let (sa, sb) = (a.fragment_byte_offset(), b.fragment_byte_offset());
                    for x in sa.max(sb)..(sa + a.payload.len()).min(sb + b.payload.len()) {
                        if a.payload[x - sa] != b.payload[x - sb] {
                            disagree = true;
                        }
                    }
                }
            }
            let mut asm = FragmentAssembler::default();
            let mut detected = false;
            for f in frags {
                if let AssemblyResult::EvasionDetected(_) = asm.offer(f, Timestamp::ZERO).unwrap() {
                    detected = true;
                    break;
                }
            }
            prop_assert_eq!(detected, disagree);
        }

        #[test]
        fn sweep_matches_brute_force_age_filter(
            ages in proptest::collection::vec(0u64..100_000, 0..20),
            now in 0u64..200_000,
        ) {
            let mut asm = FragmentAssembler::new(FragConfig { timeout_ms: 30_000, per_source_quota: 1000 });
            let mut expected = Vec::new();
            for (i, &t) in ages.iter().enumerate() {
                let mut f = piece(i as u16, 0, b"AAAAAAAA", true);
                f.src_ip = Ipv4Addr::from(0x0a00_0000 + i as u32);
                let key = FragKey::of(&f);
                asm.offer(f, Timestamp(t)).unwrap();
                if now.saturating_sub(t) > 30_000 {
                    expected.push(key);
                }
            }
            expected.sort();
            prop_assert_eq!(asm.sweep(Timestamp(now)), expected);
        }
    }
}

//! Decoy endpoint for deflected traffic.
//!
//! Everything inbound is accepted and captured. Replies are scripted and
//! capped per connection by an outbound byte budget, so the decoy keeps an
//! attacker talking without giving them much to work with. Replies are sourced
//! from the address the attacker targeted (the VIP), so from the outside the
//! decoy is indistinguishable from the service.
//!
//! Capture file layout: the line `HPLOG1\n`, then per record an 8-byte
//! timestamp (ms), 4-byte peer address, 2-byte peer port, 1-byte direction
//! (0 inbound, 1 outbound), 4-byte length and the bytes. Integers are
//! big-endian.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::net::Ipv4Addr;

use thiserror::Error;

use crate::packet::{parse_tcp, IpPacket, TcpFlags, TcpSegment};
use crate::session::PayloadDigest;
use crate::Timestamp;

pub const DEFAULT_OUTBOUND_BUDGET: usize = 4096;
pub const CAPTURE_MAGIC: &[u8; 7] = b"HPLOG1\n";
const RECORD_HEADER: usize = 8 + 4 + 2 + 1 + 4;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Inbound,
    Outbound,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptureRecord {
    pub timestamp: Timestamp,
    /// The remote peer (the attacker), for both directions.
    pub src_ip: Ipv4Addr,
    pub src_port: u16,
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CaptureError {
    #[error("missing HPLOG1 header")]
    BadMagic,
    #[error("record {index} truncated")]
    Truncated { index: usize },
    #[error("record {index} has direction byte {byte}")]
    BadDirection { index: usize, byte: u8 },
    #[error("record {index} is older than its predecessor")]
    OutOfOrder { index: usize },
}

/// Append-only, timestamp-ordered evidence log.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaptureLog {
    records: Vec<CaptureRecord>,
}

impl CaptureLog {
    pub fn new() -> Self {
        CaptureLog::default()
    }

    pub fn records(&self) -> &[CaptureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records must not go back in time; several records may share a
    /// millisecond.
    pub fn push(&mut self, rec: CaptureRecord) -> Result<(), CaptureError> {
        if self.records.last().is_some_and(|last| rec.timestamp < last.timestamp) {
            return Err(CaptureError::OutOfOrder { index: self.records.len() });
        }
        self.records.push(rec);
        Ok(())
    }

    /// Concatenated bytes in one direction, optionally for one peer.
    pub fn bytes(&self, direction: Direction, peer: Option<Ipv4Addr>) -> Vec<u8> {
        self.records
            .iter()
            .filter(|r| r.direction == direction && peer.is_none_or(|p| p == r.src_ip))
            .flat_map(|r| r.bytes.iter().copied())
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let body: usize = self.records.iter().map(|r| RECORD_HEADER + r.bytes.len()).sum();
        let mut out = Vec::with_capacity(CAPTURE_MAGIC.len() + body);
        out.extend_from_slice(CAPTURE_MAGIC);
        for r in &self.records {
            out.extend_from_slice(&r.timestamp.as_millis().to_be_bytes());
            out.extend_from_slice(&r.src_ip.octets());
            out.extend_from_slice(&r.src_port.to_be_bytes());
            out.push(match r.direction {
                Direction::Inbound => 0,
                Direction::Outbound => 1,
            });
            out.extend_from_slice(&(r.bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(&r.bytes);
        }
        out
    }

    pub fn decode(data: &[u8]) -> Result<CaptureLog, CaptureError> {
        let mut rest = data.strip_prefix(CAPTURE_MAGIC.as_slice()).ok_or(CaptureError::BadMagic)?;
        let mut log = CaptureLog::new();
        let mut index = 0;
        while !rest.is_empty() {
            if rest.len() < RECORD_HEADER {
                return Err(CaptureError::Truncated { index });
            }
            let (h, tail) = rest.split_at(RECORD_HEADER);
            let ts = u64::from_be_bytes(h[0..8].try_into().expect("8 bytes"));
            let ip = Ipv4Addr::new(h[8], h[9], h[10], h[11]);
            let port = u16::from_be_bytes([h[12], h[13]]);
            let direction = match h[14] {
                0 => Direction::Inbound,
                1 => Direction::Outbound,
                byte => return Err(CaptureError::BadDirection { index, byte }),
            };
            let len = u32::from_be_bytes(h[15..19].try_into().expect("4 bytes")) as usize;
            if tail.len() < len {
                return Err(CaptureError::Truncated { index });
            }
            let (bytes, tail) = tail.split_at(len);
            log.push(CaptureRecord {
                timestamp: Timestamp(ts),
                src_ip: ip,
                src_port: port,
                direction,
                bytes: bytes.to_vec(),
            })?;
            rest = tail;
            index += 1;
        }
        Ok(log)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoyScript {
    /// Sent right after the SYN-ACK of a new connection.
    pub banner: Vec<u8>,
    /// First entry whose needle occurs in the request supplies the reply.
    pub responses: Vec<(Vec<u8>, Vec<u8>)>,
}

impl Default for DecoyScript {
    fn default() -> Self {
        DecoyScript {
            banner: b"HTTP/1.0 200 OK\r\nServer: Apache/2.2.8 (Unix)\r\n\r\n".to_vec(),
            responses: alloc::vec![
                (b"/bin/sh".to_vec(), b"sh-3.2$ ".to_vec()),
                (b"GET /".to_vec(), b"HTTP/1.0 200 OK\r\nContent-Length: 13\r\n\r\n<html></html>".to_vec()),
                (b"id".to_vec(), b"uid=48(apache) gid=48(apache)\n".to_vec()),
            ],
        }
    }
}

impl DecoyScript {
    /// Scripted reply for a request, if any needle matches.
    pub fn reply_for(&self, request: &[u8]) -> Option<&[u8]> {
        self.responses
            .iter()
            .find(|(needle, _)| !needle.is_empty() && request.windows(needle.len()).any(|w| w == needle.as_slice()))
            .map(|(_, reply)| reply.as_slice())
    }
}

#[derive(Clone, Debug)]
struct DecoyConn {
    snd_nxt: u32,
    rcv_nxt: u32,
    sent: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HoneypotOutput {
    pub replies: Vec<IpPacket>,
    pub records: Vec<CaptureRecord>,
}

pub struct Honeypot {
    script: DecoyScript,
    outbound_budget: usize,
    conns: BTreeMap<(Ipv4Addr, u16), DecoyConn>,
    log: CaptureLog,
}

impl Honeypot {
    pub fn new(script: DecoyScript, outbound_budget: usize) -> Self {
        Honeypot { script, outbound_budget, conns: BTreeMap::new(), log: CaptureLog::new() }
    }

    pub fn log(&self) -> &CaptureLog {
        &self.log
    }

    pub fn into_log(self) -> CaptureLog {
        self.log
    }

    pub fn outbound_budget(&self) -> usize {
        self.outbound_budget
    }

    /// Outbound payload bytes sent so far to one peer connection.
    pub fn sent_to(&self, peer: Ipv4Addr, port: u16) -> usize {
        self.conns.get(&(peer, port)).map_or(0, |c| c.sent)
    }

    fn record(&mut self, out: &mut HoneypotOutput, rec: CaptureRecord) {
        // `now` is monotone in every caller, so this cannot fail in practice;
        // an out-of-order record is still returned to the caller.
        let _ = self.log.push(rec.clone());
        out.records.push(rec);
    }

    pub fn accept(&mut self, pkt: &IpPacket, now: Timestamp) -> HoneypotOutput {
        let mut out = HoneypotOutput::default();
        let Ok(seg) = parse_tcp(pkt) else {
            let rec = CaptureRecord {
                timestamp: now,
                src_ip: pkt.src_ip,
                src_port: 0,
                direction: Direction::Inbound,
                bytes: pkt.payload.clone(),
            };
            self.record(&mut out, rec);
            return out;
        };
        let peer = (pkt.src_ip, seg.src_port);
        let rec = CaptureRecord {
            timestamp: now,
            src_ip: pkt.src_ip,
            src_port: seg.src_port,
            direction: Direction::Inbound,
            bytes: seg.payload.clone(),
        };
        self.record(&mut out, rec);

        if seg.flags.contains(TcpFlags::RST) {
            self.conns.remove(&peer);
            return out;
        }

        let isn = {
            let mut id = Vec::with_capacity(10);
            id.extend_from_slice(&pkt.src_ip.octets());
            id.extend_from_slice(&seg.src_port.to_be_bytes());
            id.extend_from_slice(&seg.seq.to_be_bytes());
            PayloadDigest::of(&id).hash as u32
        };
        let mut replies: Vec<TcpSegment> = Vec::new();
        let is_syn = seg.flags.contains(TcpFlags::SYN) && !seg.flags.contains(TcpFlags::ACK);
        let conn = if is_syn {
            let prev_sent = self.conns.get(&peer).map_or(0, |c| c.sent);
            let conn = self.conns.entry(peer).or_insert(DecoyConn { snd_nxt: 0, rcv_nxt: 0, sent: prev_sent });
            conn.rcv_nxt = seg.seq.wrapping_add(1);
            let synack =
                TcpSegment::new(seg.dst_port, seg.src_port, isn, TcpFlags::SYN, Vec::new()).with_ack(conn.rcv_nxt);
            conn.snd_nxt = isn.wrapping_add(1);
            replies.push(synack);
            conn
        } else {
            let conn = self.conns.entry(peer).or_insert(DecoyConn { snd_nxt: isn, rcv_nxt: seg.seq, sent: 0 });
            let end = seg.seq.wrapping_add(seg.seq_len());
            if end.wrapping_sub(conn.rcv_nxt) as i32 > 0 {
                conn.rcv_nxt = end;
            }
            conn
        };

        let budget = self.outbound_budget;
        let send = |conn: &mut DecoyConn, data: &[u8], replies: &mut Vec<TcpSegment>| -> bool {
            let room = budget.saturating_sub(conn.sent);
            let data = &data[..data.len().min(room)];
            if data.is_empty() {
                return false;
            }
            let s = TcpSegment::new(seg.dst_port, seg.src_port, conn.snd_nxt, TcpFlags::PSH, data.to_vec())
                .with_ack(conn.rcv_nxt);
            conn.snd_nxt = conn.snd_nxt.wrapping_add(data.len() as u32);
            conn.sent += data.len();
            replies.push(s);
            true
        };

        if is_syn {
            send(conn, &self.script.banner, &mut replies);
        } else if !seg.payload.is_empty() {
            let scripted = self.script.reply_for(&seg.payload).is_some_and(|r| send(conn, r, &mut replies));
            if !scripted {
                replies.push(
                    TcpSegment::new(seg.dst_port, seg.src_port, conn.snd_nxt, TcpFlags::EMPTY, Vec::new())
                        .with_ack(conn.rcv_nxt),
                );
            }
        } else if seg.flags.contains(TcpFlags::FIN) {
            replies.push(
                TcpSegment::new(seg.dst_port, seg.src_port, conn.snd_nxt, TcpFlags::EMPTY, Vec::new())
                    .with_ack(conn.rcv_nxt),
            );
        }

        for r in replies {
            let rec = CaptureRecord {
                timestamp: now,
                src_ip: pkt.src_ip,
                src_port: seg.src_port,
                direction: Direction::Outbound,
                bytes: r.payload.clone(),
            };
            self.record(&mut out, rec);
            out.replies.push(r.into_packet(pkt.dst_ip, pkt.src_ip));
        }
        out
    }
}

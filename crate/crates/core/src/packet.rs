//! IPv4 / TCP wire codec.
//!
//! Layouts are plain RFC 791 and RFC 793 headers. IP and TCP options are
//! carried as opaque bytes so that a parse/serialize cycle is lossless apart
//! from the recomputed header checksum and the reserved IP flag bit.

use alloc::vec::Vec;
use core::fmt;
use core::net::Ipv4Addr;
use core::ops::{BitOr, BitOrAssign};

use thiserror::Error;

use crate::session::SessionEntry;

pub const PROTO_TCP: u8 = 6;
pub const IPV4_MIN_HEADER: usize = 20;
pub const TCP_MIN_HEADER: usize = 20;
pub const MAX_DATAGRAM: usize = 65535;

const DEFAULT_TTL: u8 = 64;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Error)]
pub enum PacketError {
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    #[error("datagram would exceed 65535 bytes")]
    Oversize,
    #[error("not a TCP packet (protocol {0})")]
    NotTcp(u8),
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct IpPacket {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub protocol: u8,
    pub tos: u8,
    pub identification: u16,
    pub dont_fragment: bool,
    pub more_fragments: bool,
    /// In units of 8 bytes.
    pub fragment_offset: u16,
    pub ttl: u8,
    pub options: Vec<u8>,
    pub payload: Vec<u8>,
}

impl fmt::Debug for IpPacket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IpPacket")
            .field("src_ip", &self.src_ip)
            .field("dst_ip", &self.dst_ip)
            .field("protocol", &self.protocol)
            .field("identification", &self.identification)
            .field("more_fragments", &self.more_fragments)
            .field("fragment_offset", &self.fragment_offset)
            .field("payload_len", &self.payload.len())
            .finish()
    }
}

impl IpPacket {
    pub fn new(src_ip: Ipv4Addr, dst_ip: Ipv4Addr, protocol: u8, payload: Vec<u8>) -> Self {
        IpPacket {
            src_ip,
            dst_ip,
            protocol,
            tos: 0,
            identification: 0,
            dont_fragment: false,
            more_fragments: false,
            fragment_offset: 0,
            ttl: DEFAULT_TTL,
            options: Vec::new(),
            payload,
        }
    }

    pub fn is_fragment(&self) -> bool {
        self.more_fragments || self.fragment_offset != 0
    }

    pub fn header_len(&self) -> usize {
        IPV4_MIN_HEADER + self.options.len()
    }

    pub fn total_len(&self) -> usize {
        self.header_len() + self.payload.len()
    }

    /// Byte offset of this fragment's payload within the original datagram.
    pub fn fragment_byte_offset(&self) -> usize {
        usize::from(self.fragment_offset) * 8
    }

    /// TCP destination port read straight from the payload, when the payload
    /// starts at the transport header and is long enough to hold it.
    pub fn tcp_dst_port_hint(&self) -> Option<u16> {
        if self.protocol != PROTO_TCP || self.fragment_offset != 0 || self.payload.len() < 4 {
            return None;
        }
        Some(u16::from_be_bytes([self.payload[2], self.payload[3]]))
    }
}

/// Parses an IPv4 datagram. Bytes past the header's total length (link
/// padding) are ignored.
pub fn parse_ipv4(bytes: &[u8]) -> Result<IpPacket, PacketError> {
    if bytes.len() < IPV4_MIN_HEADER {
        return Err(PacketError::Malformed("truncated header"));
    }
    if bytes[0] >> 4 != 4 {
        return Err(PacketError::Malformed("version is not 4"));
    }
    let ihl = usize::from(bytes[0] & 0x0f) * 4;
    if ihl < IPV4_MIN_HEADER {
        return Err(PacketError::Malformed("header length below 20"));
    }
    if bytes.len() < ihl {
        return Err(PacketError::Malformed("truncated options"));
    }
    let total = usize::from(u16::from_be_bytes([bytes[2], bytes[3]]));
    if total < ihl || total > bytes.len() {
        return Err(PacketError::Malformed("bad total length"));
    }
    if checksum::fold(checksum::sum(&bytes[..ihl], 0)) != 0xffff {
        return Err(PacketError::Malformed("header checksum invalid"));
    }
    let flags_frag = u16::from_be_bytes([bytes[6], bytes[7]]);
    let fragment_offset = flags_frag & 0x1fff;
    if usize::from(fragment_offset) * 8 + (total - ihl) > MAX_DATAGRAM {
        return Err(PacketError::Malformed("fragment extends past 65535"));
    }
    Ok(IpPacket {
        src_ip: Ipv4Addr::new(bytes[12], bytes[13], bytes[14], bytes[15]),
        dst_ip: Ipv4Addr::new(bytes[16], bytes[17], bytes[18], bytes[19]),
        protocol: bytes[9],
        tos: bytes[1],
        identification: u16::from_be_bytes([bytes[4], bytes[5]]),
        dont_fragment: flags_frag & 0x4000 != 0,
        more_fragments: flags_frag & 0x2000 != 0,
        fragment_offset,
        ttl: bytes[8],
        options: bytes[IPV4_MIN_HEADER..ihl].to_vec(),
        payload: bytes[ihl..total].to_vec(),
    })
}

/// Emits the datagram with a freshly computed header checksum.
pub fn serialize_ipv4(pkt: &IpPacket) -> Result<Vec<u8>, PacketError> {
    if !pkt.options.len().is_multiple_of(4) || pkt.options.len() > 40 {
        return Err(PacketError::Malformed("options not a multiple of 4 up to 40 bytes"));
    }
    if pkt.fragment_offset > 0x1fff {
        return Err(PacketError::Malformed("fragment offset exceeds 13 bits"));
    }
    let total = pkt.total_len();
    if total > MAX_DATAGRAM || pkt.fragment_byte_offset() + pkt.payload.len() > MAX_DATAGRAM {
        return Err(PacketError::Oversize);
    }
    let ihl = pkt.header_len();
    let mut out = Vec::with_capacity(total);
    out.push(0x40 | (ihl / 4) as u8);
    out.push(pkt.tos);
    out.extend_from_slice(&(total as u16).to_be_bytes());
    out.extend_from_slice(&pkt.identification.to_be_bytes());
    let mut flags_frag = pkt.fragment_offset;
    if pkt.dont_fragment {
        flags_frag |= 0x4000;
    }
    if pkt.more_fragments {
        flags_frag |= 0x2000;
    }
    out.extend_from_slice(&flags_frag.to_be_bytes());
    out.push(pkt.ttl);
    out.push(pkt.protocol);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&pkt.src_ip.octets());
    out.extend_from_slice(&pkt.dst_ip.octets());
    out.extend_from_slice(&pkt.options);
    let csum = checksum::internet_checksum(&out[..ihl]);
    out[10..12].copy_from_slice(&csum.to_be_bytes());
    out.extend_from_slice(&pkt.payload);
    Ok(out)
}

#[derive(Copy, Clone, Default, PartialEq, Eq, Hash)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const FIN: TcpFlags = TcpFlags(0x01);
    pub const SYN: TcpFlags = TcpFlags(0x02);
    pub const RST: TcpFlags = TcpFlags(0x04);
    pub const PSH: TcpFlags = TcpFlags(0x08);
    pub const ACK: TcpFlags = TcpFlags(0x10);
    pub const EMPTY: TcpFlags = TcpFlags(0);

    pub fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }
}

impl BitOr for TcpFlags {
    type Output = TcpFlags;

    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        TcpFlags(self.0 | rhs.0)
    }
}

impl BitOrAssign for TcpFlags {
    fn bitor_assign(&mut self, rhs: TcpFlags) {
        self.0 |= rhs.0;
    }
}

impl fmt::Debug for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [(TcpFlags, &str); 5] = [
            (TcpFlags::SYN, "SYN"),
            (TcpFlags::ACK, "ACK"),
            (TcpFlags::FIN, "FIN"),
            (TcpFlags::RST, "RST"),
            (TcpFlags::PSH, "PSH"),
        ];
        let mut first = true;
        for (flag, name) in NAMES {
            if self.contains(flag) {
                if !first {
                    f.write_str("|")?;
                }
                f.write_str(name)?;
                first = false;
            }
        }
        if first {
            f.write_str("-")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TcpSegment {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: TcpFlags,
    pub window: u16,
    pub checksum: u16,
    pub urgent: u16,
    pub options: Vec<u8>,
    pub payload: Vec<u8>,
}

impl TcpSegment {
    pub fn new(src_port: u16, dst_port: u16, seq: u32, flags: TcpFlags, payload: Vec<u8>) -> Self {
        TcpSegment {
            src_port,
            dst_port,
            seq,
            ack: 0,
            flags,
            window: 65535,
            checksum: 0,
            urgent: 0,
            options: Vec::new(),
            payload,
        }
    }

    pub fn with_ack(mut self, ack: u32) -> Self {
        self.ack = ack;
        self.flags |= TcpFlags::ACK;
        self
    }

    pub fn header_len(&self) -> usize {
        TCP_MIN_HEADER + self.options.len()
    }

    /// Sequence space consumed by this segment: payload plus one for each of
    /// SYN and FIN.
    pub fn seq_len(&self) -> u32 {
        let mut len = self.payload.len() as u32;
        if self.flags.contains(TcpFlags::SYN) {
            len = len.wrapping_add(1);
        }
        if self.flags.contains(TcpFlags::FIN) {
            len = len.wrapping_add(1);
        }
        len
    }

    /// Wire bytes with the checksum field exactly as stored in `self.checksum`.
    pub fn to_bytes_raw(&self) -> Vec<u8> {
        let hlen = self.header_len();
        let mut out = Vec::with_capacity(hlen + self.payload.len());
        out.extend_from_slice(&self.src_port.to_be_bytes());
        out.extend_from_slice(&self.dst_port.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.ack.to_be_bytes());
        out.push(((hlen / 4) as u8) << 4);
        out.push(self.flags.0);
        out.extend_from_slice(&self.window.to_be_bytes());
        out.extend_from_slice(&self.checksum.to_be_bytes());
        out.extend_from_slice(&self.urgent.to_be_bytes());
        out.extend_from_slice(&self.options);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Sets `self.checksum` to the correct value for the given addresses.
    pub fn fill_checksum(&mut self, src_ip: Ipv4Addr, dst_ip: Ipv4Addr) {
        self.checksum = 0;
        let bytes = self.to_bytes_raw();
        let sum = checksum::sum(&bytes, checksum::pseudo_header_sum(src_ip, dst_ip, PROTO_TCP, bytes.len()));
        self.checksum = !checksum::fold(sum);
    }

    /// Wraps the segment in an IPv4 packet, filling in a valid checksum.
    pub fn into_packet(mut self, src_ip: Ipv4Addr, dst_ip: Ipv4Addr) -> IpPacket {
        self.fill_checksum(src_ip, dst_ip);
        IpPacket::new(src_ip, dst_ip, PROTO_TCP, self.to_bytes_raw())
    }
}

/// Decodes the TCP segment carried by `pkt`. The checksum is extracted, not
/// verified; see [`verify_checksum`].
pub fn parse_tcp(pkt: &IpPacket) -> Result<TcpSegment, PacketError> {
    if pkt.protocol != PROTO_TCP {
        return Err(PacketError::NotTcp(pkt.protocol));
    }
    if pkt.is_fragment() {
        return Err(PacketError::Malformed("fragment is not a whole segment"));
    }
    let b = &pkt.payload;
    if b.len() < TCP_MIN_HEADER {
        return Err(PacketError::Malformed("truncated tcp header"));
    }
    let hlen = usize::from(b[12] >> 4) * 4;
    if hlen < TCP_MIN_HEADER || hlen > b.len() {
        return Err(PacketError::Malformed("bad tcp data offset"));
    }
    Ok(TcpSegment {
        src_port: u16::from_be_bytes([b[0], b[1]]),
        dst_port: u16::from_be_bytes([b[2], b[3]]),
        seq: u32::from_be_bytes([b[4], b[5], b[6], b[7]]),
        ack: u32::from_be_bytes([b[8], b[9], b[10], b[11]]),
        flags: TcpFlags(b[13]),
        window: u16::from_be_bytes([b[14], b[15]]),
        checksum: u16::from_be_bytes([b[16], b[17]]),
        urgent: u16::from_be_bytes([b[18], b[19]]),
        options: b[TCP_MIN_HEADER..hlen].to_vec(),
        payload: b[hlen..].to_vec(),
    })
}

/// True iff the one's-complement sum over pseudo-header, header and payload
/// (stored checksum included) folds to all ones.
pub fn verify_checksum(seg: &TcpSegment, src_ip: Ipv4Addr, dst_ip: Ipv4Addr) -> bool {
    let bytes = seg.to_bytes_raw();
    let sum = checksum::sum(&bytes, checksum::pseudo_header_sum(src_ip, dst_ip, PROTO_TCP, bytes.len()));
    checksum::fold(sum) == 0xffff
}

/// Builds the reset that tears down the backend side of `conn`.
///
/// The reset reuses the connection's own four-tuple so the backend matches it
/// to the live socket, and its sequence number is the next one the backend
/// expects from the client.
pub fn make_rst(conn: &SessionEntry) -> Result<IpPacket, NoState> {
    let seq = conn.next_client_seq().ok_or(NoState)?;
    let key = conn.key;
    let seg = TcpSegment::new(key.src_port, key.dst_port, seq, TcpFlags::RST, Vec::new());
    Ok(seg.into_packet(key.src_ip, key.dst_ip))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Error)]
#[error("connection has no forwarded segment to anchor a reset")]
pub struct NoState;

/// Connection identity used as the session table key.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FiveTuple {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
}

impl FiveTuple {
    pub fn of(pkt: &IpPacket, seg: &TcpSegment) -> Self {
        FiveTuple {
            src_ip: pkt.src_ip,
            dst_ip: pkt.dst_ip,
            src_port: seg.src_port,
            dst_port: seg.dst_port,
            protocol: pkt.protocol,
        }
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}->{}:{}/{}", self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.protocol)
    }
}

/// RFC 1071 one's-complement arithmetic.
pub mod checksum {
    use core::net::Ipv4Addr;

    /// Adds `data` as big-endian 16-bit words onto `initial`, padding an odd
    /// trailing byte with zero. The result is unfolded.
    pub fn sum(data: &[u8], initial: u32) -> u32 {
        let mut acc = u64::from(initial);
        let mut chunks = data.chunks_exact(2);
        for c in &mut chunks {
            acc += u64::from(u16::from_be_bytes([c[0], c[1]]));
        }
        if let [last] = chunks.remainder() {
            acc += u64::from(*last) << 8;
        }
        while acc > 0xffff_ffff {
            acc = (acc & 0xffff_ffff) + (acc >> 32);
        }
        acc as u32
    }

    pub fn fold(mut sum: u32) -> u16 {
        while sum > 0xffff {
            sum = (sum & 0xffff) + (sum >> 16);
        }
        sum as u16
    }

    pub fn internet_checksum(data: &[u8]) -> u16 {
        !fold(sum(data, 0))
    }

    pub fn pseudo_header_sum(src: Ipv4Addr, dst: Ipv4Addr, protocol: u8, len: usize) -> u32 {
        let s = src.octets();
        let d = dst.octets();
        u32::from(u16::from_be_bytes([s[0], s[1]]))
            + u32::from(u16::from_be_bytes([s[2], s[3]]))
            + u32::from(u16::from_be_bytes([d[0], d[1]]))
            + u32::from(u16::from_be_bytes([d[2], d[3]]))
            + u32::from(protocol)
            + len as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    const A: Ipv4Addr = Ipv4Addr::new(192, 168, 1, 10);
    const B: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 100);

    /// Straight RFC 1071 loop over 16-bit words with end-around carry after
    /// every addition; shares nothing with `checksum::sum`.
    fn rfc1071_reference(words: &[u8]) -> u16 {
        let mut s: u32 = 0;
        let mut i = 0;
        while i < words.len() {
            let hi = u32::from(words[i]) << 8;
            let lo = if i + 1 < words.len() { u32::from(words[i + 1]) } else { 0 };
            s += hi | lo;
            if s > 0xffff {
                s = (s & 0xffff) + 1;
            }
            i += 2;
        }
        !(s as u16)
    }

    fn reference_tcp_ok(src: Ipv4Addr, dst: Ipv4Addr, tcp: &[u8]) -> bool {
        let mut buf = Vec::new();
        buf.extend_from_slice(&src.octets());
        buf.extend_from_slice(&dst.octets());
        buf.push(0);
        buf.push(PROTO_TCP);
        buf.extend_from_slice(&(tcp.len() as u16).to_be_bytes());
        buf.extend_from_slice(tcp);
        rfc1071_reference(&buf) == 0
    }

    fn arb_segment() -> impl Strategy<Value = TcpSegment> {
        (
            any::<u16>(),
            any::<u16>(),
            any::<u32>(),
            any::<u32>(),
            any::<u8>(),
            any::<u16>(),
            any::<u16>(),
            any::<u16>(),
            (0usize..=10).prop_flat_map(|w| proptest::collection::vec(any::<u8>(), w * 4)),
            proptest::collection::vec(any::<u8>(), 0..300),
        )
            .prop_map(|(sp, dp, seq, ack, fl, win, ck, urg, options, payload)| TcpSegment {
                src_port: sp,
                dst_port: dp,
                seq,
                ack,
                flags: TcpFlags(fl),
                window: win,
                checksum: ck,
                urgent: urg,
                options,
                payload,
            })
    }

    fn arb_packet() -> impl Strategy<Value = IpPacket> {
        (
            any::<u32>(),
            any::<u32>(),
            any::<u8>(),
            any::<u8>(),
            any::<u16>(),
            any::<bool>(),
            any::<bool>(),
            0u16..2000,
            any::<u8>(),
            (0usize..=10).prop_flat_map(|w| proptest::collection::vec(any::<u8>(), w * 4)),
            proptest::collection::vec(any::<u8>(), 0..600),
        )
            .prop_map(|(s, d, proto, tos, id, df, mf, off, ttl, options, payload)| IpPacket {
                src_ip: Ipv4Addr::from(s),
                dst_ip: Ipv4Addr::from(d),
                protocol: proto,
                tos,
                identification: id,
                dont_fragment: df,
                more_fragments: mf,
                fragment_offset: off,
                ttl,
                options,
                payload,
            })
    }

    #[test]
    fn minimal_header_parses_with_empty_payload() {
        let pkt = IpPacket::new(A, B, PROTO_TCP, Vec::new());
        let bytes = serialize_ipv4(&pkt).unwrap();
        assert_eq!(bytes.len(), 20);
        let back = parse_ipv4(&bytes).unwrap();
        assert!(back.payload.is_empty());
        assert_eq!(back, pkt);
    }

    #[test]
    fn nineteen_bytes_is_malformed() {
        assert!(matches!(parse_ipv4(&[0x45; 19]), Err(PacketError::Malformed(_))));
    }

    #[test]
    fn ipv6_and_bad_checksum_rejected() {
        let mut bytes = serialize_ipv4(&IpPacket::new(A, B, 6, vec![1, 2, 3])).unwrap();
        let mut v6 = bytes.clone();
        v6[0] = 0x65;
        assert!(matches!(parse_ipv4(&v6), Err(PacketError::Malformed(_))));
        bytes[8] ^= 1;
        assert_eq!(parse_ipv4(&bytes), Err(PacketError::Malformed("header checksum invalid")));
    }

    #[test]
    fn oversize_payload_rejected() {
        let pkt = IpPacket::new(A, B, 6, vec![0; MAX_DATAGRAM - 19]);
        assert_eq!(serialize_ipv4(&pkt), Err(PacketError::Oversize));
        let mut frag = IpPacket::new(A, B, 6, vec![0; 100]);
        frag.fragment_offset = 8180;
        assert_eq!(serialize_ipv4(&frag), Err(PacketError::Oversize));
    }

    #[test]
    fn serialize_is_deterministic() {
        let pkt = IpPacket::new(A, B, 6, b"hello".to_vec());
        assert_eq!(serialize_ipv4(&pkt).unwrap(), serialize_ipv4(&pkt.clone()).unwrap());
    }

    #[test]
    fn trailing_link_padding_is_ignored() {
        let pkt = IpPacket::new(A, B, 6, b"abc".to_vec());
        let mut bytes = serialize_ipv4(&pkt).unwrap();
        bytes.extend_from_slice(&[0; 10]);
        assert_eq!(parse_ipv4(&bytes).unwrap(), pkt);
    }

    #[test]
    fn syn_only_segment() {
        let pkt = TcpSegment::new(40000, 80, 7, TcpFlags::SYN, Vec::new()).into_packet(A, B);
        let seg = parse_tcp(&pkt).unwrap();
        assert_eq!(seg.flags, TcpFlags::SYN);
        assert!(seg.payload.is_empty());
        assert!(verify_checksum(&seg, A, B));
    }

    #[test]
    fn udp_is_not_tcp() {
        let pkt = IpPacket::new(A, B, 17, vec![0; 8]);
        assert_eq!(parse_tcp(&pkt), Err(PacketError::NotTcp(17)));
    }

    #[test]
    fn truncated_tcp_header_is_malformed() {
        let pkt = IpPacket::new(A, B, PROTO_TCP, vec![0; 19]);
        assert!(matches!(parse_tcp(&pkt), Err(PacketError::Malformed(_))));
        let mut bad_offset = vec![0u8; 20];
        bad_offset[12] = 0x60;
        let pkt = IpPacket::new(A, B, PROTO_TCP, bad_offset);
        assert!(matches!(parse_tcp(&pkt), Err(PacketError::Malformed(_))));
    }

    #[test]
    fn zero_sum_with_all_ones_checksum_verifies() {
        // All-zero words plus a 0xFFFF checksum word fold to all ones.
        let mut words = [0u8; 20];
        words[16] = 0xff;
        words[17] = 0xff;
        assert_eq!(checksum::fold(checksum::sum(&words, 0)), 0xffff);
        assert_eq!(rfc1071_reference(&words), 0);

        // Same header through the full TCP path: zero addresses and fields,
        // checksum set to the complement of the pseudo-header contribution.
        let z = Ipv4Addr::UNSPECIFIED;
        let mut seg = TcpSegment::new(0, 0, 0, TcpFlags::EMPTY, Vec::new());
        seg.window = 0;
        seg.fill_checksum(z, z);
        assert!(verify_checksum(&seg, z, z));
    }

    #[test]
    fn rst_from_session_uses_next_client_seq() {
        use crate::pool::BackendId;
        use crate::Timestamp;
        let key = FiveTuple { src_ip: A, dst_ip: B, src_port: 5555, dst_port: 80, protocol: 6 };
        let mut entry = SessionEntry::new(key, BackendId(0), Timestamp::ZERO);
        assert_eq!(make_rst(&entry), Err(NoState));
        let seg = TcpSegment::new(5555, 80, 1000, TcpFlags::ACK | TcpFlags::PSH, b"0123456789".to_vec());
        entry.note_forwarded(&seg);
        let rst = make_rst(&entry).unwrap();
        let parsed = parse_tcp(&rst).unwrap();
        assert_eq!(parsed.seq, 1010);
        assert_eq!(parsed.flags, TcpFlags::RST);
        assert!(parsed.payload.is_empty());
        assert_eq!((rst.src_ip, rst.dst_ip), (A, B));
        assert!(verify_checksum(&parsed, A, B));
    }

    /// Independent decoder: pulls each field by fixed offset.
    fn reference_fields(b: &[u8]) -> (u16, u16, u32, u32, u8, u16, u16, u16, usize) {
        let be16 = |i: usize| (u16::from(b[i]) << 8) | u16::from(b[i + 1]);
        let be32 = |i: usize| (u32::from(be16(i)) << 16) | u32::from(be16(i + 2));
        (be16(0), be16(2), be32(4), be32(8), b[13], be16(14), be16(16), be16(18), usize::from(b[12] >> 4) * 4)
    }

    proptest! {
        #[test]
        fn ipv4_round_trip(pkt in arb_packet()) {
            let bytes = serialize_ipv4(&pkt).unwrap();
            let back = parse_ipv4(&bytes).unwrap();
            prop_assert_eq!(&back, &pkt);
            prop_assert_eq!(serialize_ipv4(&back).unwrap(), bytes);
        }

        #[test]
        fn reserved_flag_normalized(pkt in arb_packet()) {
            let mut bytes = serialize_ipv4(&pkt).unwrap();
            bytes[6] |= 0x80;
            bytes[10] = 0;
            bytes[11] = 0;
            let ihl = usize::from(bytes[0] & 0xf) * 4;
            let c = checksum::internet_checksum(&bytes[..ihl]);
            bytes[10..12].copy_from_slice(&c.to_be_bytes());
            let back = parse_ipv4(&bytes).unwrap();
            let mut normalized = bytes.clone();
            normalized[6] &= 0x7f;
            let c = { normalized[10] = 0; normalized[11] = 0; checksum::internet_checksum(&normalized[..ihl]) };
            normalized[10..12].copy_from_slice(&c.to_be_bytes());
            prop_assert_eq!(serialize_ipv4(&back).unwrap(), normalized);
        }

        #[test]
        fn tcp_fields_match_reference_decoder(seg in arb_segment()) {
            let raw = seg.to_bytes_raw();
            let pkt = IpPacket::new(A, B, PROTO_TCP, raw.clone());
            let parsed = parse_tcp(&pkt).unwrap();
            let (sp, dp, sq, ak, fl, win, ck, urg, hlen) = reference_fields(&raw);
            prop_assert_eq!(parsed.src_port, sp);
            prop_assert_eq!(parsed.dst_port, dp);
            prop_assert_eq!(parsed.seq, sq);
            prop_assert_eq!(parsed.ack, ak);
            prop_assert_eq!(parsed.flags.0, fl);
            prop_assert_eq!(parsed.window, win);
            prop_assert_eq!(parsed.checksum, ck);
            prop_assert_eq!(parsed.urgent, urg);
            prop_assert_eq!(&parsed.payload[..], &raw[hlen..]);
            prop_assert_eq!(parsed, seg);
        }

        #[test]
        fn checksum_agrees_with_rfc1071(seg in arb_segment(), s in any::<u32>(), d in any::<u32>(), fix in any::<bool>()) {
            let (src, dst) = (Ipv4Addr::from(s), Ipv4Addr::from(d));
            let mut seg = seg;
            if fix {
                seg.fill_checksum(src, dst);
            }
            let expected = reference_tcp_ok(src, dst, &seg.to_bytes_raw());
            prop_assert_eq!(verify_checksum(&seg, src, dst), expected);
            if fix {
                prop_assert!(expected);
            }
        }

        #[test]
        fn single_bit_flip_breaks_checksum(seg in arb_segment(), bit in any::<usize>()) {
            prop_assume!(!seg.payload.is_empty());
            let mut seg = seg;
            seg.fill_checksum(A, B);
            let i = bit % (seg.payload.len() * 8);
            seg.payload[i / 8] ^= 1 << (i % 8);
            prop_assert!(!verify_checksum(&seg, A, B));
        }
    }
}

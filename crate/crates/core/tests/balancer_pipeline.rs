use std::net::Ipv4Addr;

use securedirect_core::balancer::{Action, Balancer, BalancerConfig, DropReason};
use securedirect_core::frag::fragment_at;
use securedirect_core::ids::{load_signatures, IdsBackend, IdsError, SignatureDb, Verdict};
use securedirect_core::packet::{parse_ipv4, parse_tcp, serialize_ipv4, IpPacket, TcpFlags, TcpSegment};
use securedirect_core::pool::BackendId;
use securedirect_core::Timestamp;

const VIP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 100);
const HONEYPOT: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 3);

struct Counting {
    db: SignatureDb,
    queries: usize,
    down: bool,
}

impl IdsBackend for Counting {
    fn query(&mut self, payload: &[u8]) -> Result<Verdict, IdsError> {
        self.queries += 1;
        if self.down {
            return Err(IdsError::ConnectFailed);
        }
        self.db.query(payload)
    }
}

fn balancer(down: bool) -> Balancer<Counting> {
    let db = load_signatures("1 shell 2f62696e2f7368\n").unwrap();
    let cfg = BalancerConfig::new(VIP, 80, vec![Ipv4Addr::new(10, 0, 0, 1), Ipv4Addr::new(10, 0, 0, 2)], HONEYPOT);
    Balancer::new(cfg, Counting { db, queries: 0, down }).unwrap()
}

/// Through the wire format and back, as a capture device would deliver it.
fn wire(src: Ipv4Addr, sport: u16, seq: u32, flags: TcpFlags, payload: &[u8]) -> IpPacket {
    let pkt = TcpSegment::new(sport, 80, seq, flags, payload.to_vec()).with_ack(1).into_packet(src, VIP);
    parse_ipv4(&serialize_ipv4(&pkt).unwrap()).unwrap()
}

fn forwarded_payload(actions: &[Action]) -> Option<(BackendId, Vec<u8>)> {
    actions.iter().find_map(|a| match a {
        Action::ForwardToBackend(b, p) => Some((*b, parse_tcp(p).unwrap().payload)),
        _ => None,
    })
}

#[test]
fn clean_sessions_stick_and_rotate() {
    let mut lb = balancer(false);
    let client = Ipv4Addr::new(192, 0, 2, 10);
    let now = Timestamp(1);
    let a = lb.ingest(wire(client, 1000, 0, TcpFlags::SYN, b""), now);
    let b = lb.ingest(wire(client, 1001, 0, TcpFlags::SYN, b""), now);
    assert_eq!(forwarded_payload(&a).unwrap().0, BackendId(0));
    assert_eq!(forwarded_payload(&b).unwrap().0, BackendId(1));
    let data = lb.ingest(wire(client, 1000, 1, TcpFlags::PSH, b"GET / HTTP/1.0\r\n\r\n"), now);
    assert_eq!(forwarded_payload(&data), Some((BackendId(0), b"GET / HTTP/1.0\r\n\r\n".to_vec())));
    assert_eq!(lb.ids_mut().queries, 1);
}

#[test]
fn attack_resets_backend_and_later_traffic_skips_the_ids() {
    let mut lb = balancer(false);
    let evil = Ipv4Addr::new(203, 0, 113, 7);
    let now = Timestamp(5);
    lb.ingest(wire(evil, 2000, 0, TcpFlags::SYN, b""), now);
    let acts = lb.ingest(wire(evil, 2000, 1, TcpFlags::PSH, b"x=/bin/sh"), now);
    assert!(acts.iter().any(|a| matches!(a, Action::EmitRst(BackendId(0), _))));
    assert!(acts.iter().any(|a| matches!(a, Action::ForwardToHoneypot(_))));
    assert!(forwarded_payload(&acts).is_none());
    let queries = lb.ids_mut().queries;

    let later = lb.ingest(wire(evil, 2001, 0, TcpFlags::SYN, b""), Timestamp(6));
    assert!(matches!(later.as_slice(), [Action::ForwardToHoneypot(_)]));
    let later = lb.ingest(wire(evil, 2001, 1, TcpFlags::PSH, b"harmless"), Timestamp(7));
    assert!(matches!(later.as_slice(), [Action::ForwardToHoneypot(_)]));
    assert_eq!(lb.ids_mut().queries, queries);
    assert!(lb.attackers().get(evil).is_some());
}

#[test]
fn fragments_are_inspected_whole() {
    let mut lb = balancer(false);
    let client = Ipv4Addr::new(192, 0, 2, 11);
    lb.ingest(wire(client, 3000, 0, TcpFlags::SYN, b""), Timestamp(1));
    let body = b"POST /form HTTP/1.0\r\n\r\nname=ok&x=/bin/sh".to_vec();
    let pkt = wire(client, 3000, 1, TcpFlags::PSH, &body);
    let pieces = fragment_at(&pkt, &[16, 48]);
    assert_eq!(pieces.len(), 3);
    let mut all = Vec::new();
    for p in pieces {
        all.extend(lb.ingest(p, Timestamp(2)));
    }
    assert!(all.iter().any(|a| matches!(a, Action::ForwardToHoneypot(_))));
    assert!(forwarded_payload(&all).is_none());
    assert_eq!(lb.ids_mut().queries, 1);
}

#[test]
fn ids_failure_forwards_no_payload() {
    let mut lb = balancer(true);
    let client = Ipv4Addr::new(192, 0, 2, 12);
    let syn = lb.ingest(wire(client, 4000, 0, TcpFlags::SYN, b""), Timestamp(1));
    assert!(forwarded_payload(&syn).is_some());
    let data = lb.ingest(wire(client, 4000, 1, TcpFlags::PSH, b"GET / HTTP/1.0\r\n\r\n"), Timestamp(2));
    assert_eq!(data, vec![Action::Drop(DropReason::IdsUnavailable)]);
}

#[test]
fn other_addresses_and_corrupt_segments_are_dropped() {
    let mut lb = balancer(false);
    let client = Ipv4Addr::new(192, 0, 2, 13);
    let stray = TcpSegment::new(1, 80, 0, TcpFlags::SYN, vec![]).into_packet(client, Ipv4Addr::new(10, 0, 0, 99));
    assert_eq!(lb.ingest(stray, Timestamp(1)), vec![Action::Drop(DropReason::NotVip)]);
    let mut bad = wire(client, 5000, 0, TcpFlags::SYN, b"");
    bad.payload[16] ^= 0xFF;
    assert_eq!(lb.ingest(bad, Timestamp(1)), vec![Action::Drop(DropReason::BadChecksum)]);
}

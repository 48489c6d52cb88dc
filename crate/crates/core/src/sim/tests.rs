use super::*;
use crate::honeypot::Direction;
use crate::session::AttackReason;
use alloc::string::ToString;
use alloc::vec;
use proptest::prelude::*;

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

fn clean_backends(trace: &SimTrace, patterns: &[Vec<u8>]) -> bool {
    trace
        .backend_logs
        .iter()
        .all(|log| patterns.iter().all(|p| !contains(&log.bytes, p) && log.streams.values().all(|s| !contains(s, p))))
}

/// Payload bytes `ip` sent from the packet that got it flagged onwards.
fn post_detection_bytes(trace: &SimTrace, ip: Ipv4Addr) -> Vec<u8> {
    let flag_pkt = trace
        .events
        .iter()
        .find_map(|e| match &e.kind {
            TraceKind::Flag { pkt, src, .. } if *src == ip => Some(*pkt),
            _ => None,
        })
        .expect("flagged");
    trace
        .sent
        .iter()
        .filter(|s| s.packet.src_ip == ip && s.id >= flag_pkt)
        .flat_map(
            |s| {
                if s.packet.is_fragment() {
                    s.packet.payload.clone()
                } else {
                    parse_tcp(&s.packet).unwrap().payload
                }
            },
        )
        .collect()
}

fn single(kind: TrafficKind) -> Vec<TrafficScript> {
    vec![TrafficScript::new(Ipv4Addr::new(192, 0, 2, 9), 5555, Timestamp(10), kind)]
}

#[test]
fn one_benign_request_is_served() {
    let scripts = single(TrafficKind::BenignRequest { request: BENIGN_REQUEST.to_vec(), think_ms: 0, cuts: vec![] });
    let trace = run(&Topology::minimal(), &scripts, 1, Timestamp::from_secs(2)).unwrap();
    assert_eq!(trace.completions.len(), 1);
    assert!(matches!(trace.completions[0].origin, Origin::Backend(_)));
    assert!(trace.attackers.is_empty());
    assert!(trace.capture.is_empty());
}

#[test]
fn latency_matches_the_path_it_took() {
    let topo = Topology::minimal();
    let scripts = single(TrafficKind::BenignRequest { request: BENIGN_REQUEST.to_vec(), think_ms: 0, cuts: vec![] });
    let trace = run(&topo, &scripts, 3, Timestamp::from_secs(2)).unwrap();
    let link = topo.client_link.latency_ms;
    let expected = link
        + topo.internal_latency_ms
        + link
        + link
        + topo.ids_latency_ms
        + topo.internal_latency_ms
        + topo.backend_service_ms
        + link;
    assert_eq!(trace.completions[0].latency_ms, expected);

    // Recompute hop by hop from the event log.
    let at = |pred: &dyn Fn(&TraceKind) -> bool| trace.events.iter().find(|e| pred(&e.kind)).unwrap().at.as_millis();
    let syn = at(&|k| matches!(k, TraceKind::Send { pkt: 0, .. }));
    let synack = at(&|k| matches!(k, TraceKind::ClientRx { flags, .. } if flags.contains(TcpFlags::SYN)));
    let data = at(&|k| matches!(k, TraceKind::Send { len, .. } if *len > 0));
    let query = at(&|k| matches!(k, TraceKind::IdsQuery { .. }));
    let fwd = trace
        .events
        .iter()
        .filter(|e| matches!(e.kind, TraceKind::Forward { .. }))
        .map(|e| e.at.as_millis())
        .find(|&t| t > query)
        .unwrap();
    let rx = at(&|k| matches!(k, TraceKind::BackendRx { len, .. } if *len > 0));
    let done = at(&|k| matches!(k, TraceKind::Complete { .. }));
    assert_eq!(synack - syn, 2 * link + topo.internal_latency_ms);
    assert_eq!(query - data, link);
    assert_eq!(fwd - query, topo.ids_latency_ms);
    assert_eq!(rx - fwd, topo.internal_latency_ms);
    assert_eq!(done - rx, topo.backend_service_ms + link);
    assert_eq!((synack - syn) + (done - data), trace.completions[0].latency_ms);
}

#[test]
fn baseline_is_served_round_robin() {
    let trace = scenario_baseline(7).unwrap();
    assert_eq!(trace.completions.len(), 6);
    let on_b0 = trace.completions.iter().filter(|c| c.origin == Origin::Backend(BackendId(0))).count();
    assert_eq!(on_b0, 3);
    assert!(trace.conservation.balanced());
    assert!(trace.summary().contains("requests: 6 of 6 completed"));
}

#[test]
fn same_seed_same_trace() {
    for name in ScenarioName::ALL {
        let a = Scenario::build(name, Topology::minimal(), 11).run().unwrap();
        let b = Scenario::build(name, Topology::minimal(), 11).run().unwrap();
        assert_eq!(a.to_text(), b.to_text(), "{name}");
        assert_eq!(a, b);
    }
}

#[test]
fn duplicate_seq_is_caught() {
    let trace = scenario_duplicate_seq(0).unwrap();
    let rec = trace.flagged(ATTACKER).expect("attacker flagged");
    assert_eq!(rec.reason, AttackReason::DuplicateSeq);
    let resets: Vec<_> = trace.events.iter().filter(|e| matches!(e.kind, TraceKind::Reset { .. })).collect();
    assert_eq!(resets.len(), 1);
    assert!(trace.events.iter().any(|e| matches!(e.kind, TraceKind::BackendRst { accepted: true, .. })));
    assert!(clean_backends(&trace, &[b"/bin/sh".to_vec()]));
    assert_eq!(trace.capture.bytes(Direction::Inbound, Some(ATTACKER)), b"id; uname -a\n");
}

#[test]
fn exact_retransmission_is_not_an_attack() {
    let trace = Scenario::duplicate_seq_control(Topology::minimal(), 0).run().unwrap();
    assert!(trace.attackers.is_empty());
    assert!(trace.events.iter().all(|e| !matches!(e.kind, TraceKind::Reset { .. })));
    assert!(trace.capture.is_empty());
}

#[test]
fn conflicting_fragments_are_deflected_and_clean_ones_served() {
    let trace = scenario_frag_evasion(2).unwrap();
    assert_eq!(trace.flagged(ATTACKER).unwrap().reason, AttackReason::FragEvasion);
    assert!(!trace.capture.bytes(Direction::Inbound, Some(ATTACKER)).is_empty());
    assert_eq!(trace.completions.len(), 1);
    let served: Vec<&Vec<u8>> = trace.backend_logs.iter().flat_map(|l| l.streams.values()).collect();
    assert_eq!(served, vec![&BENIGN_REQUEST.to_vec()]);
}

#[test]
fn reassembly_is_transparent_to_backends() {
    let kind = |cuts| TrafficKind::BenignRequest { request: BENIGN_REQUEST.to_vec(), think_ms: 0, cuts };
    let whole = run(&Topology::minimal(), &single(kind(vec![])), 5, Timestamp::from_secs(1)).unwrap();
    let split = run(&Topology::minimal(), &single(kind(vec![16, 40])), 5, Timestamp::from_secs(1)).unwrap();
    assert_eq!(whole.backend_logs, split.backend_logs);
    assert_eq!(split.completions.len(), 1);
}

#[test]
fn reconnect_lands_on_the_honeypot() {
    let trace = scenario_reconnect_to_honeypot(4).unwrap();
    let scenario = Scenario::build(ScenarioName::Reconnect, Topology::minimal(), 4);
    let reconnect = scenario.scripts.iter().position(|s| matches!(s.kind, TrafficKind::Reconnect { .. })).unwrap();
    assert!(trace.events.iter().any(|e| matches!(
        &e.kind,
        TraceKind::ClientRx { script, origin: Origin::Honeypot, flags, .. }
            if *script == reconnect && flags.contains(TcpFlags::SYN | TcpFlags::ACK)
    )));
    assert_eq!(trace.capture.bytes(Direction::Inbound, Some(ATTACKER)), post_detection_bytes(&trace, ATTACKER));
    assert_eq!(trace.ids_queries_after_flag(ATTACKER), Some(0));
    assert!(trace.capture.bytes(Direction::Outbound, Some(ATTACKER)).len() <= 2 * DEFAULT_OUTBOUND_BUDGET);
    assert!(clean_backends(&trace, &attack_patterns(&demo_signatures())));
}

#[test]
fn ids_outage_forwards_no_payload() {
    let mut topo = Topology::minimal();
    topo.ids_enabled = false;
    let trace = Scenario::build(ScenarioName::Baseline, topo, 0).run().unwrap();
    assert!(trace.completions.is_empty());
    assert!(trace.backend_logs.iter().all(|l| l.bytes.is_empty()));
    assert!(trace.events.iter().any(|e| matches!(e.kind, TraceKind::Forward { .. })));
}

#[test]
fn event_budget_is_enforced() {
    let mut topo = Topology::minimal();
    topo.event_budget = 10;
    let err = Scenario::build(ScenarioName::Baseline, topo, 0).run().unwrap_err();
    assert!(matches!(err, SimError::ScheduleOverflow { budget: 10, .. }));
}

#[test]
fn lossy_links_still_conserve_packets() {
    let mut topo = Topology::minimal();
    topo.client_link.loss = 0.3;
    let trace = Scenario::build(ScenarioName::Mixed, topo, 9).run().unwrap();
    assert!(trace.conservation.lost > 0);
    assert!(trace.conservation.balanced());
    assert!(trace.to_text().lines().last().unwrap().contains("conservation"));
}

#[test]
fn down_backend_is_taken_out_of_rotation() {
    let mut topo = Topology::minimal();
    topo.down_backends = vec![1];
    let mut scripts = Vec::new();
    for i in 0..10u16 {
        let start = Timestamp(20_000 + 10 * u64::from(i));
        let kind = TrafficKind::BenignRequest { request: BENIGN_REQUEST.to_vec(), think_ms: 0, cuts: vec![] };
        scripts.push(TrafficScript::new(Ipv4Addr::new(192, 0, 2, 1), 2000 + i, start, kind));
    }
    let trace = run(&topo, &scripts, 0, Timestamp::from_secs(30)).unwrap();
    assert!(trace.events.iter().any(|e| matches!(e.kind, TraceKind::Health { healthy: false, .. })));
    assert_eq!(trace.completions.len(), 10);
    assert!(trace.completions.iter().all(|c| c.origin == Origin::Backend(BackendId(0))));
}

#[test]
fn topology_validation() {
    let mut topo = Topology::minimal();
    topo.balancer.backends.truncate(1);
    assert!(matches!(run(&topo, &[], 0, Timestamp(1)), Err(SimError::Topology(_))));
    let mut topo = Topology::minimal();
    topo.client_link.loss = 1.5;
    assert!(run(&topo, &[], 0, Timestamp(1)).is_err());
    assert_eq!("mixed".parse::<ScenarioName>(), Ok(ScenarioName::Mixed));
    assert!("nope".parse::<ScenarioName>().is_err());
    assert_eq!(ScenarioName::FragEvasion.to_string(), "frag-evasion");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mixed_traces_are_safe_and_causal(seed in any::<u64>()) {
        let trace = scenario_mixed(seed).unwrap();
        prop_assert!(trace.events.windows(2).all(|w| w[0].at <= w[1].at));
        prop_assert!(trace.conservation.balanced());
        prop_assert!(clean_backends(&trace, &attack_patterns(&demo_signatures())));
        for a in &trace.attackers {
            prop_assert_eq!(trace.ids_queries_after_flag(a.ip), Some(0));
        }
        prop_assert_eq!(trace.completions.len(), trace.requests);
    }
}

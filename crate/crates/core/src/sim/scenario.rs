use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::net::Ipv4Addr;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{run, Conflict, FragPlan, SimError, SimTrace, Topology, TrafficKind, TrafficScript};
use crate::ids::SignatureDb;
use crate::packet::TCP_MIN_HEADER;
use crate::Timestamp;

pub const ATTACKER: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 66);
pub const BENIGN_REQUEST: &[u8] = b"GET /index.html HTTP/1.0\r\nHost: www\r\n\r\n";

const DUP_BENIGN: &[u8] = b"GET /cgi?x=/home/a HTTP/1.0\r\n\r\n";
const DUP_ATTACK: &[u8] = b"GET /cgi?x=/bin/sh HTTP/1.0\r\n\r\n";
const EXPLOIT: &[u8] = b"GET /cgi-bin/status HTTP/1.0\r\nUser-Agent: () { :;}; /bin/sh -c id\r\n\r\n";

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ScenarioName {
    Baseline,
    DuplicateSeq,
    FragEvasion,
    Reconnect,
    Mixed,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 5] = [
        ScenarioName::Baseline,
        ScenarioName::DuplicateSeq,
        ScenarioName::FragEvasion,
        ScenarioName::Reconnect,
        ScenarioName::Mixed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Baseline => "baseline",
            ScenarioName::DuplicateSeq => "duplicate-seq",
            ScenarioName::FragEvasion => "frag-evasion",
            ScenarioName::Reconnect => "reconnect",
            ScenarioName::Mixed => "mixed",
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = &'static str;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or("expected one of baseline, duplicate-seq, frag-evasion, reconnect, mixed")
    }
}

/// A ready-to-run simulation.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub topology: Topology,
    pub scripts: Vec<TrafficScript>,
    pub seed: u64,
    pub until: Timestamp,
}

impl Scenario {
    pub fn build(name: ScenarioName, topology: Topology, seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scripts = match name {
            ScenarioName::Baseline => baseline_scripts(&mut rng),
            ScenarioName::DuplicateSeq => duplicate_seq_scripts(&mut rng, false),
            ScenarioName::FragEvasion => frag_evasion_scripts(&mut rng),
            ScenarioName::Reconnect => reconnect_scripts(&mut rng),
            ScenarioName::Mixed => mixed_scripts(&topology.signatures, seed),
        };
        Scenario { topology, scripts, seed, until: Timestamp::from_secs(5) }
    }

    /// Same attack as the duplicate-seq scenario, but the second segment
    /// repeats the first byte for byte.
    pub fn duplicate_seq_control(topology: Topology, seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scripts = duplicate_seq_scripts(&mut rng, true);
        Scenario { topology, scripts, seed, until: Timestamp::from_secs(5) }
    }

    pub fn run(&self) -> Result<SimTrace, SimError> {
        run(&self.topology, &self.scripts, self.seed, self.until)
    }
}

fn benign_ip(i: usize) -> Ipv4Addr {
    Ipv4Addr::new(192, 0, 2, 1 + (i % 250) as u8)
}

fn benign(rng: &mut ChaCha8Rng, i: usize, request: Vec<u8>, cuts: Vec<usize>) -> TrafficScript {
    let port = rng.gen_range(1024..60000);
    let start = Timestamp(rng.gen_range(0..50) + 20 * i as u64);
    TrafficScript::new(benign_ip(i), port, start, TrafficKind::BenignRequest { request, think_ms: 0, cuts })
}

fn page_request(n: usize) -> Vec<u8> {
    format!("GET /page{n}.html HTTP/1.0\r\nHost: www\r\n\r\n").into_bytes()
}

fn baseline_scripts(rng: &mut ChaCha8Rng) -> Vec<TrafficScript> {
    (0..6).map(|i| benign(rng, i, page_request(i), Vec::new())).collect()
}

fn duplicate_seq_scripts(rng: &mut ChaCha8Rng, identical: bool) -> Vec<TrafficScript> {
    let mut scripts = vec![benign(rng, 0, BENIGN_REQUEST.to_vec(), Vec::new())];
    let attack = if identical { DUP_BENIGN } else { DUP_ATTACK };
    scripts.push(TrafficScript::new(
        ATTACKER,
        rng.gen_range(40000..50000),
        Timestamp(rng.gen_range(5..30)),
        TrafficKind::DuplicateSeqEvasion {
            benign: DUP_BENIGN.to_vec(),
            attack: attack.to_vec(),
            follow_up: b"id; uname -a\n".to_vec(),
        },
    ));
    scripts
}

fn frag_evasion_scripts(rng: &mut ChaCha8Rng) -> Vec<TrafficScript> {
    let clean = benign(rng, 0, BENIGN_REQUEST.to_vec(), vec![24]);
    let plan = FragPlan {
        request: BENIGN_REQUEST.to_vec(),
        cuts: vec![24],
        conflict: Some(Conflict { offset: 24, bytes: b"/bin/sh;cat /etc".to_vec() }),
    };
    let attacker = TrafficScript::new(
        ATTACKER,
        rng.gen_range(40000..50000),
        Timestamp(rng.gen_range(5..30)),
        TrafficKind::FragEvasion(plan),
    );
    vec![clean, attacker]
}

fn reconnect_scripts(rng: &mut ChaCha8Rng) -> Vec<TrafficScript> {
    let port = rng.gen_range(40000..50000);
    let start = Timestamp(rng.gen_range(5..30));
    vec![
        benign(rng, 0, BENIGN_REQUEST.to_vec(), Vec::new()),
        TrafficScript::new(ATTACKER, port, start, TrafficKind::ExploitDirect { payload: EXPLOIT.to_vec() }),
        TrafficScript::new(
            ATTACKER,
            port + 1,
            start,
            TrafficKind::Reconnect {
                silence_ms: 500,
                payloads: vec![
                    b"GET / HTTP/1.0\r\n\r\n".to_vec(),
                    b"uname -a; id\n".to_vec(),
                    b"cat /etc/passwd\n".to_vec(),
                ],
            },
        ),
    ]
}

pub fn attack_patterns(db: &SignatureDb) -> Vec<Vec<u8>> {
    db.signatures().iter().map(|s| s.pattern.clone()).collect()
}

/// Random legal cut points for an IP payload of `len` bytes.
pub(crate) fn random_cuts(rng: &mut ChaCha8Rng, len: usize, max_cuts: usize) -> Vec<usize> {
    let slots = (len - 1) / 8;
    let mut cuts: Vec<usize> = (0..rng.gen_range(1..=max_cuts)).map(|_| 8 * rng.gen_range(1..=slots)).collect();
    cuts.sort_unstable();
    cuts.dedup();
    cuts
}

/// A fragment that contradicts the data part of a request, placed past the
/// TCP header so the contradiction is always against known bytes.
pub(crate) fn random_conflict(rng: &mut ChaCha8Rng, request: &[u8], filler: &[u8]) -> Conflict {
    let first = TCP_MIN_HEADER.div_ceil(8);
    let last = (TCP_MIN_HEADER + request.len()) / 8;
    let slots = rng.gen_range(1..=2usize).min(last - first);
    let offset = 8 * rng.gen_range(first..=last - slots);
    let len = 8 * slots;
    let original = &request[offset - TCP_MIN_HEADER..offset - TCP_MIN_HEADER + len];
    let mut bytes: Vec<u8> = filler.iter().copied().cycle().take(len).collect();
    if bytes == original {
        bytes[0] ^= 0x01;
    }
    Conflict { offset, bytes }
}

fn exploit_with(pattern: &[u8]) -> Vec<u8> {
    let mut p = b"GET /app?q=".to_vec();
    p.extend_from_slice(pattern);
    p.extend_from_slice(b" HTTP/1.0\r\n\r\n");
    p
}

/// One attacker's scripts, drawn at random from every attack kind. A
/// reconnecting attacker yields two scripts.
pub(crate) fn random_attack(
    rng: &mut ChaCha8Rng,
    ip: Ipv4Addr,
    port: u16,
    start: Timestamp,
    patterns: &[Vec<u8>],
) -> Vec<TrafficScript> {
    let pattern = patterns.choose(rng).cloned().unwrap_or_else(|| b"/bin/sh".to_vec());
    let exploit = exploit_with(&pattern);
    match rng.gen_range(0..4) {
        0 => vec![TrafficScript::new(ip, port, start, TrafficKind::ExploitDirect { payload: exploit })],
        1 => {
            let benign = vec![b'a'; exploit.len()];
            let kind = TrafficKind::DuplicateSeqEvasion { benign, attack: exploit, follow_up: b"id\n".to_vec() };
            vec![TrafficScript::new(ip, port, start, kind)]
        }
        2 => {
            let request = page_request(rng.gen_range(0..1000));
            let ip_len = TCP_MIN_HEADER + request.len();
            let cuts = random_cuts(rng, ip_len, 3);
            let conflict = random_conflict(rng, &request, &exploit);
            vec![TrafficScript::new(
                ip,
                port,
                start,
                TrafficKind::FragEvasion(FragPlan { request, cuts, conflict: Some(conflict) }),
            )]
        }
        _ => vec![
            TrafficScript::new(ip, port, start, TrafficKind::ExploitDirect { payload: exploit.clone() }),
            TrafficScript::new(
                ip,
                port.wrapping_add(1),
                start,
                TrafficKind::Reconnect {
                    silence_ms: rng.gen_range(50..500),
                    payloads: vec![exploit, b"id\n".to_vec()],
                },
            ),
        ],
    }
}

/// A random mix of benign requests (some cleanly fragmented) and attackers
/// of every kind, all drawn from `seed`.
pub fn mixed_scripts(db: &SignatureDb, seed: u64) -> Vec<TrafficScript> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patterns = attack_patterns(db);
    let mut scripts = Vec::new();
    for i in 0..rng.gen_range(1..=4) {
        let request = page_request(rng.gen_range(0..1000));
        let cuts =
            if rng.gen_bool(0.5) { random_cuts(&mut rng, TCP_MIN_HEADER + request.len(), 3) } else { Vec::new() };
        scripts.push(benign(&mut rng, i, request, cuts));
    }
    for j in 0..rng.gen_range(1..=3) {
        let ip = Ipv4Addr::new(203, 0, 113, 1 + j as u8);
        let port = rng.gen_range(40000..50000);
        let start = Timestamp(rng.gen_range(0..100));
        scripts.extend(random_attack(&mut rng, ip, port, start, &patterns));
    }
    scripts
}

pub fn scenario_baseline(seed: u64) -> Result<SimTrace, SimError> {
    Scenario::build(ScenarioName::Baseline, Topology::minimal(), seed).run()
}

pub fn scenario_duplicate_seq(seed: u64) -> Result<SimTrace, SimError> {
    Scenario::build(ScenarioName::DuplicateSeq, Topology::minimal(), seed).run()
}

pub fn scenario_frag_evasion(seed: u64) -> Result<SimTrace, SimError> {
    Scenario::build(ScenarioName::FragEvasion, Topology::minimal(), seed).run()
}

pub fn scenario_reconnect_to_honeypot(seed: u64) -> Result<SimTrace, SimError> {
    Scenario::build(ScenarioName::Reconnect, Topology::minimal(), seed).run()
}

pub fn scenario_mixed(seed: u64) -> Result<SimTrace, SimError> {
    Scenario::build(ScenarioName::Mixed, Topology::minimal(), seed).run()
}

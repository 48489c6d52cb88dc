//! Deterministic discrete-event simulation of the deployment: clients and
//! attackers, the balancer with its IDS, production backends and the
//! honeypot.
//!
//! Time is an integer millisecond clock. Events run in `(at, seq)` order and
//! every random choice comes from one ChaCha stream seeded by the caller, so a
//! run is a pure function of topology, scripts and seed.
//!
//! The balancer is a single FIFO server: a packet waits until the previous one
//! is done and then occupies it for the IDS latency of each query it needed.
//! Backends reply to clients directly with the VIP as source (direct server
//! return), so replies never cross the balancer.
//!
//! Trace lines have the form `<at_ms> <kind> key=value ...`. Kinds: `send`,
//! `lost`, `ids-query`, `flag`, `forward`, `deflect`, `rst`, `drop`,
//! `absorb`, `backend-rx`, `backend-rst`, `capture`, `client-rx`,
//! `complete`, `probe`, `health`, `housekeeping`, and a final `conservation`
//! line.

pub(crate) mod scenario;
mod script;
mod trace;

use alloc::collections::{BTreeMap, VecDeque};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::balancer::{Action, Balancer, BalancerConfig, ConfigError};
use crate::frag::fragment_at;
use crate::honeypot::{DecoyScript, Honeypot, DEFAULT_OUTBOUND_BUDGET};
use crate::ids::{inspect, load_signatures, IdsBackend, IdsError, SignatureDb, Verdict};
use crate::packet::{parse_tcp, IpPacket, TcpFlags, TcpSegment};
use crate::pool::BackendId;
use crate::Timestamp;

pub use scenario::{
    attack_patterns, mixed_scripts, scenario_baseline, scenario_duplicate_seq, scenario_frag_evasion, scenario_mixed,
    scenario_reconnect_to_honeypot, Scenario, ScenarioName, ATTACKER, BENIGN_REQUEST,
};
pub use script::{Conflict, FragPlan, TrafficKind, TrafficScript};
pub use trace::{BackendLog, Completion, Conservation, Origin, SentPacket, SimTrace, TraceEvent, TraceKind};

pub const DEFAULT_LINK_LATENCY_MS: u64 = 1;
pub const DEFAULT_IDS_LATENCY_MS: u64 = 2;
pub const DEFAULT_SERVICE_MS: u64 = 5;
pub const DEFAULT_PAGE_BYTES: usize = 1024;
pub const DEFAULT_TICK_MS: u64 = 1000;
pub const DEFAULT_EVENT_BUDGET: u64 = 5_000_000;

/// Signatures used when a run is not given its own database.
pub const DEMO_SIGNATURES: &str = "\
# id name hex-pattern
1 shellshock 2829207b203a3b7d3b
2 bin-sh 2f62696e2f7368
3 dir-traversal 2e2e2f2e2e2f
4 cmd-exe 636d642e657865
5 nop-sled 9090909090909090
6 sql-tautology 27204f5220313d31
7 php-eval 6576616c286261736536345f6465636f646528
";

pub fn demo_signatures() -> SignatureDb {
    load_signatures(DEMO_SIGNATURES).expect("built-in signatures parse")
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Link {
    pub latency_ms: u64,
    /// Probability in `[0, 1]` that a packet is lost.
    pub loss: f64,
}

impl Default for Link {
    fn default() -> Self {
        Link { latency_ms: DEFAULT_LINK_LATENCY_MS, loss: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Topology {
    pub balancer: BalancerConfig,
    /// Client to balancer, and backend or honeypot back to client.
    pub client_link: Link,
    /// Balancer to backends and honeypot. Never lossy.
    pub internal_latency_ms: u64,
    pub ids_latency_ms: u64,
    pub ids_enabled: bool,
    pub signatures: Arc<SignatureDb>,
    pub backend_service_ms: u64,
    pub page_bytes: usize,
    /// Indices of backends that are down from the start.
    pub down_backends: Vec<usize>,
    pub decoy: DecoyScript,
    pub outbound_budget: usize,
    pub tick_ms: u64,
    pub event_budget: u64,
}

pub const VIP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 100);
pub const HONEYPOT: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 3);
pub const BACKENDS: [Ipv4Addr; 2] = [Ipv4Addr::new(10, 0, 0, 1), Ipv4Addr::new(10, 0, 0, 2)];
pub const SERVICE_PORT: u16 = 80;

impl Topology {
    /// Smallest deployment: two production servers, one honeypot host and
    /// the VIP, four addresses in all.
    pub fn minimal() -> Self {
        Topology::from_config(BalancerConfig::new(VIP, SERVICE_PORT, BACKENDS.to_vec(), HONEYPOT))
    }

    pub fn from_config(balancer: BalancerConfig) -> Self {
        Topology {
            balancer,
            client_link: Link::default(),
            internal_latency_ms: DEFAULT_LINK_LATENCY_MS,
            ids_latency_ms: DEFAULT_IDS_LATENCY_MS,
            ids_enabled: true,
            signatures: Arc::new(demo_signatures()),
            backend_service_ms: DEFAULT_SERVICE_MS,
            page_bytes: DEFAULT_PAGE_BYTES,
            down_backends: Vec::new(),
            decoy: DecoyScript::default(),
            outbound_budget: DEFAULT_OUTBOUND_BUDGET,
            tick_ms: DEFAULT_TICK_MS,
            event_budget: DEFAULT_EVENT_BUDGET,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.balancer.validate()?;
        if self.balancer.backends.len() < 2 {
            return Err(SimError::Topology("at least two backends are required"));
        }
        if !(0.0..=1.0).contains(&self.client_link.loss) {
            return Err(SimError::Topology("loss must lie in [0, 1]"));
        }
        if self.tick_ms == 0 {
            return Err(SimError::Topology("tick interval must be positive"));
        }
        if self.page_bytes == 0 || self.page_bytes > 60_000 {
            return Err(SimError::Topology("page size must be in 1..=60000"));
        }
        if self.down_backends.iter().any(|&i| i >= self.balancer.backends.len()) {
            return Err(SimError::Topology("down backend index out of range"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("event budget of {budget} exceeded at {at} ms")]
    ScheduleOverflow { budget: u64, at: u64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid topology: {0}")]
    Topology(&'static str),
}

struct SimIds {
    db: Arc<SignatureDb>,
    enabled: bool,
}

impl IdsBackend for SimIds {
    fn query(&mut self, payload: &[u8]) -> Result<Verdict, IdsError> {
        if self.enabled {
            Ok(inspect(&self.db, payload))
        } else {
            Err(IdsError::Timeout)
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Node {
    Balancer,
    Backend(usize),
    Honeypot,
    Client(usize),
}

#[derive(Clone, Debug)]
enum Event {
    Deliver { node: Node, pkt: IpPacket, id: Option<u64>, origin: Option<Origin> },
    BalancerDone { id: u64, actions: Vec<Action> },
    Tick,
    ProbeResult { backend: BackendId, ok: bool },
    Open(usize),
    Send { script: usize, group: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Phase {
    Idle,
    SynSent,
    Established,
}

struct Client {
    phase: Phase,
    snd_nxt: u32,
    rcv_nxt: u32,
    ip_id: u16,
    outbox: Vec<Vec<IpPacket>>,
    request: Option<usize>,
    request_sent: bool,
    done: bool,
}

struct BackendConn {
    rcv_nxt: u32,
    snd_nxt: u32,
}

struct BackendNode {
    up: bool,
    busy_until: u64,
    conns: BTreeMap<(Ipv4Addr, u16), BackendConn>,
    log: BackendLog,
}

struct Sim<'a> {
    topo: &'a Topology,
    scripts: &'a [TrafficScript],
    rng: ChaCha8Rng,
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Event>,
    balancer: Balancer<SimIds>,
    balancer_queue: VecDeque<(IpPacket, u64)>,
    balancer_busy: bool,
    backends: Vec<BackendNode>,
    honeypot: Honeypot,
    clients: Vec<Client>,
    routes: BTreeMap<(Ipv4Addr, u16), usize>,
    next_pkt: u64,
    trace: SimTrace,
}

/// Runs `scripts` over `topo` until the queue drains or the clock passes
/// `until`.
pub fn run(topo: &Topology, scripts: &[TrafficScript], seed: u64, until: Timestamp) -> Result<SimTrace, SimError> {
    topo.validate()?;
    let ids = SimIds { db: topo.signatures.clone(), enabled: topo.ids_enabled };
    let balancer = Balancer::new(topo.balancer.clone(), ids)?;
    let backends = (0..topo.balancer.backends.len())
        .map(|i| BackendNode {
            up: !topo.down_backends.contains(&i),
            busy_until: 0,
            conns: BTreeMap::new(),
            log: BackendLog::default(),
        })
        .collect();
    let mut request = 0;
    let clients = scripts
        .iter()
        .map(|s| Client {
            phase: Phase::Idle,
            snd_nxt: 0,
            rcv_nxt: 0,
            ip_id: 0,
            outbox: Vec::new(),
            request: s.kind.is_benign().then(|| {
                request += 1;
                request - 1
            }),
            request_sent: false,
            done: false,
        })
        .collect();
    let routes = scripts.iter().enumerate().map(|(i, s)| ((s.client, s.port), i)).collect();
    let mut sim = Sim {
        topo,
        scripts,
        rng: ChaCha8Rng::seed_from_u64(seed),
        now: 0,
        seq: 0,
        queue: BTreeMap::new(),
        balancer,
        balancer_queue: VecDeque::new(),
        balancer_busy: false,
        backends,
        honeypot: Honeypot::new(topo.decoy.clone(), topo.outbound_budget),
        clients,
        routes,
        next_pkt: 0,
        trace: SimTrace {
            seed,
            end: Timestamp::ZERO,
            events: Vec::new(),
            sent: Vec::new(),
            completions: Vec::new(),
            backend_logs: Vec::new(),
            capture: Default::default(),
            attackers: Vec::new(),
            stats: Default::default(),
            conservation: Conservation::default(),
            requests: request,
        },
    };
    for (i, s) in scripts.iter().enumerate() {
        sim.schedule(s.open_at().as_millis(), Event::Open(i));
    }
    sim.schedule(topo.tick_ms, Event::Tick);

    let mut processed = 0u64;
    while let Some(entry) = sim.queue.first_entry() {
        let (at, _) = *entry.key();
        if at > until.as_millis() {
            break;
        }
        let event = entry.remove();
        processed += 1;
        if processed > topo.event_budget {
            return Err(SimError::ScheduleOverflow { budget: topo.event_budget, at });
        }
        sim.now = at;
        sim.handle(event);
    }
    Ok(sim.finish(until))
}

impl Sim<'_> {
    fn schedule(&mut self, at: u64, event: Event) {
        debug_assert!(at >= self.now, "event scheduled in the past");
        self.queue.insert((at.max(self.now), self.seq), event);
        self.seq += 1;
    }

    fn log(&mut self, at: u64, kind: TraceKind) {
        self.trace.events.push(TraceEvent { at: Timestamp(at), kind });
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Open(i) => self.open(i),
            Event::Send { script, group } => {
                let pkts = core::mem::take(&mut self.clients[script].outbox[group]);
                for p in pkts {
                    self.inject(script, p);
                }
            }
            Event::Deliver { node, pkt, id, origin } => match node {
                Node::Balancer => self.at_balancer(pkt, id.expect("client packets carry an id")),
                Node::Backend(b) => self.at_backend(b, pkt),
                Node::Honeypot => self.at_honeypot(pkt),
                Node::Client(c) => self.at_client(c, pkt, origin.expect("replies carry an origin")),
            },
            Event::BalancerDone { id, actions } => {
                self.emit(id, actions);
                self.balancer_busy = false;
                self.serve_balancer();
            }
            Event::Tick => self.tick(),
            Event::ProbeResult { backend, ok } => {
                self.log(self.now, TraceKind::Probe { backend, ok });
                if let Some(healthy) = self.balancer.probe_result(backend, ok) {
                    self.log(self.now, TraceKind::Health { backend, healthy });
                }
            }
        }
    }

    fn open(&mut self, i: usize) {
        let s = &self.scripts[i];
        let isn: u32 = self.rng.gen();
        let c = &mut self.clients[i];
        c.ip_id = self.rng.gen();
        c.phase = Phase::SynSent;
        c.snd_nxt = isn.wrapping_add(1);
        let syn = TcpSegment::new(s.port, self.topo.balancer.service_port, isn, TcpFlags::SYN, Vec::new());
        let pkt = syn.into_packet(s.client, self.topo.balancer.vip);
        self.inject(i, pkt);
    }

    fn next_ip_id(&mut self, script: usize) -> u16 {
        let c = &mut self.clients[script];
        c.ip_id = c.ip_id.wrapping_add(1);
        c.ip_id
    }

    fn data_packet(&mut self, script: usize, seq: u32, payload: &[u8]) -> IpPacket {
        let s = &self.scripts[script];
        let ack = self.clients[script].rcv_nxt;
        let seg = TcpSegment::new(s.port, self.topo.balancer.service_port, seq, TcpFlags::PSH, payload.to_vec())
            .with_ack(ack);
        let mut pkt = seg.into_packet(s.client, self.topo.balancer.vip);
        pkt.identification = self.next_ip_id(script);
        pkt
    }

    fn inject(&mut self, script: usize, pkt: IpPacket) {
        let id = self.next_pkt;
        self.next_pkt += 1;
        self.trace.conservation.injected += 1;
        let seg = parse_tcp(&pkt).ok();
        let s = &self.scripts[script];
        self.log(
            self.now,
            TraceKind::Send {
                pkt: id,
                script,
                src: s.client,
                sport: s.port,
                flags: seg.as_ref().map_or(TcpFlags::EMPTY, |s| s.flags),
                len: seg.as_ref().map_or(pkt.payload.len(), |s| s.payload.len()),
                fragment: pkt.is_fragment(),
            },
        );
        self.trace.sent.push(SentPacket { id, at: Timestamp(self.now), script, packet: pkt.clone() });
        let loss = self.topo.client_link.loss;
        if loss > 0.0 && self.rng.gen_bool(loss) {
            self.trace.conservation.lost += 1;
            self.log(self.now, TraceKind::Lost { pkt: id });
            return;
        }
        let at = self.now + self.topo.client_link.latency_ms;
        self.schedule(at, Event::Deliver { node: Node::Balancer, pkt, id: Some(id), origin: None });
    }

    fn at_balancer(&mut self, pkt: IpPacket, id: u64) {
        self.balancer_queue.push_back((pkt, id));
        if !self.balancer_busy {
            self.serve_balancer();
        }
    }

    /// Takes packets off the balancer queue until one needs the IDS, which
    /// keeps the balancer busy until `BalancerDone`.
    fn serve_balancer(&mut self) {
        while let Some((pkt, id)) = self.balancer_queue.pop_front() {
            let src = pkt.src_ip;
            let queries_before = self.balancer.stats().ids_queries;
            let flag_before = self.balancer.attackers().get(src).map(|r| r.flagged_at);
            let actions = self.balancer.ingest(pkt, Timestamp(self.now));
            let queries = self.balancer.stats().ids_queries - queries_before;

            if queries > 0 {
                self.log(self.now, TraceKind::IdsQuery { pkt: id, src });
            }
            if let Some(rec) = self.balancer.attackers().get(src) {
                if flag_before != Some(rec.flagged_at) {
                    let reason = rec.reason.clone();
                    self.log(self.now, TraceKind::Flag { pkt: id, src, reason });
                }
            }
            if queries == 0 {
                self.emit(id, actions);
                continue;
            }
            let per_query =
                if self.topo.ids_enabled { self.topo.ids_latency_ms } else { self.topo.balancer.ids_timeout_ms };
            self.balancer_busy = true;
            self.schedule(self.now + queries * per_query, Event::BalancerDone { id, actions });
            return;
        }
    }

    fn emit(&mut self, id: u64, actions: Vec<Action>) {
        let c = &mut self.trace.conservation;
        if actions.iter().any(|a| matches!(a, Action::ForwardToBackend(..) | Action::ForwardToHoneypot(_))) {
            c.delivered += 1;
        } else if actions.iter().any(|a| matches!(a, Action::Drop(_))) {
            c.dropped += 1;
        } else {
            c.absorbed += 1;
            self.log(self.now, TraceKind::Absorb { pkt: id });
        }

        let arrive = self.now + self.topo.internal_latency_ms;
        for action in actions {
            match action {
                Action::ForwardToBackend(b, p) => {
                    self.log(self.now, TraceKind::Forward { pkt: id, backend: b });
                    self.schedule(
                        arrive,
                        Event::Deliver { node: Node::Backend(b.0.into()), pkt: p, id: None, origin: None },
                    );
                }
                Action::ForwardToHoneypot(p) => {
                    self.log(self.now, TraceKind::Deflect { pkt: id });
                    self.schedule(arrive, Event::Deliver { node: Node::Honeypot, pkt: p, id: None, origin: None });
                }
                Action::EmitRst(b, p) => {
                    let seq = parse_tcp(&p).map_or(0, |s| s.seq);
                    self.log(self.now, TraceKind::Reset { pkt: id, backend: b, seq });
                    self.schedule(
                        arrive,
                        Event::Deliver { node: Node::Backend(b.0.into()), pkt: p, id: None, origin: None },
                    );
                }
                Action::Drop(reason) => self.log(self.now, TraceKind::Drop { pkt: id, reason }),
                Action::Probe(_) => {}
            }
        }
    }

    fn tick(&mut self) {
        let now = self.now;
        let actions = self.balancer.tick(Timestamp(now));
        let report = self.balancer.last_tick();
        let (s, f, a) = (report.expired_sessions.len(), report.evicted_fragments, report.expired_attackers.len());
        if s + f + a > 0 {
            self.log(now, TraceKind::Housekeeping { expired_sessions: s, evicted_fragments: f, expired_attackers: a });
        }
        for action in actions {
            if let Action::Probe(b) = action {
                let ok = self.backends[usize::from(b.0)].up;
                self.schedule(now + 2 * self.topo.internal_latency_ms, Event::ProbeResult { backend: b, ok });
            }
        }
        self.schedule(self.now + self.topo.tick_ms, Event::Tick);
    }

    fn send_to_client(&mut self, at: u64, pkt: IpPacket, origin: Origin) {
        let Ok(seg) = parse_tcp(&pkt) else { return };
        if let Some(&c) = self.routes.get(&(pkt.dst_ip, seg.dst_port)) {
            self.schedule(at, Event::Deliver { node: Node::Client(c), pkt, id: None, origin: Some(origin) });
        }
    }

    fn at_backend(&mut self, b: usize, pkt: IpPacket) {
        let id = BackendId(b as u16);
        let node = &mut self.backends[b];
        if !node.up {
            return;
        }
        let Ok(seg) = parse_tcp(&pkt) else { return };
        let peer = (pkt.src_ip, seg.src_port);
        if seg.flags.contains(TcpFlags::RST) {
            let accepted = node.conns.get(&peer).is_some_and(|c| c.rcv_nxt == seg.seq);
            if accepted {
                node.conns.remove(&peer);
            }
            self.log(self.now, TraceKind::BackendRst { backend: id, src: peer.0, sport: peer.1, accepted });
            return;
        }
        if seg.flags.contains(TcpFlags::SYN) {
            let isn: u32 = self.rng.gen();
            let node = &mut self.backends[b];
            node.conns.insert(peer, BackendConn { rcv_nxt: seg.seq.wrapping_add(1), snd_nxt: isn.wrapping_add(1) });
            let synack = TcpSegment::new(seg.dst_port, seg.src_port, isn, TcpFlags::SYN, Vec::new())
                .with_ack(seg.seq.wrapping_add(1));
            let reply = synack.into_packet(pkt.dst_ip, pkt.src_ip);
            self.send_to_client(self.now + self.topo.client_link.latency_ms, reply, Origin::Backend(id));
            return;
        }
        let Some(conn) = node.conns.get_mut(&peer) else { return };
        if seg.payload.is_empty() {
            if seg.flags.contains(TcpFlags::FIN) && seg.seq == conn.rcv_nxt {
                node.conns.remove(&peer);
            }
            return;
        }
        let accepted = seg.seq == conn.rcv_nxt;
        let (rx_seq, len) = (seg.seq, seg.payload.len());
        if accepted {
            conn.rcv_nxt = conn.rcv_nxt.wrapping_add(len as u32);
            node.log.streams.entry(peer).or_default().extend_from_slice(&seg.payload);
            node.log.bytes.extend_from_slice(&seg.payload);
        }
        let reply = accepted.then(|| {
            let page = page(self.topo.page_bytes);
            let s =
                TcpSegment::new(seg.dst_port, seg.src_port, conn.snd_nxt, TcpFlags::PSH, page).with_ack(conn.rcv_nxt);
            conn.snd_nxt = conn.snd_nxt.wrapping_add(self.topo.page_bytes as u32);
            let ready = self.now.max(node.busy_until) + self.topo.backend_service_ms;
            node.busy_until = ready;
            (ready, s.into_packet(pkt.dst_ip, pkt.src_ip))
        });
        self.log(
            self.now,
            TraceKind::BackendRx { backend: id, src: peer.0, sport: peer.1, seq: rx_seq, len, accepted },
        );
        if let Some((ready, reply)) = reply {
            self.send_to_client(ready + self.topo.client_link.latency_ms, reply, Origin::Backend(id));
        }
    }

    fn at_honeypot(&mut self, pkt: IpPacket) {
        let out = self.honeypot.accept(&pkt, Timestamp(self.now));
        for r in &out.records {
            let kind =
                TraceKind::Capture { direction: r.direction, peer: r.src_ip, port: r.src_port, len: r.bytes.len() };
            self.log(self.now, kind);
        }
        for reply in out.replies {
            self.send_to_client(self.now + self.topo.client_link.latency_ms, reply, Origin::Honeypot);
        }
    }

    fn at_client(&mut self, i: usize, pkt: IpPacket, origin: Origin) {
        let Ok(seg) = parse_tcp(&pkt) else { return };
        self.log(self.now, TraceKind::ClientRx { script: i, origin, flags: seg.flags, len: seg.payload.len() });
        let c = &mut self.clients[i];
        if seg.flags.contains(TcpFlags::SYN | TcpFlags::ACK) {
            if c.phase == Phase::SynSent && seg.ack == c.snd_nxt {
                c.phase = Phase::Established;
                c.rcv_nxt = seg.seq.wrapping_add(1);
                self.established(i);
            }
            return;
        }
        if c.phase != Phase::Established || seg.payload.is_empty() {
            return;
        }
        if seg.seq == c.rcv_nxt {
            c.rcv_nxt = c.rcv_nxt.wrapping_add(seg.payload.len() as u32);
        }
        if let (Some(request), true, false) = (c.request, c.request_sent, c.done) {
            c.done = true;
            let start = self.scripts[i].open_at();
            let latency_ms = self.now - start.as_millis();
            let s = &self.scripts[i];
            let fin = TcpSegment::new(s.port, self.topo.balancer.service_port, c.snd_nxt, TcpFlags::FIN, Vec::new())
                .with_ack(c.rcv_nxt);
            c.snd_nxt = c.snd_nxt.wrapping_add(1);
            let pkt = fin.into_packet(s.client, self.topo.balancer.vip);
            self.trace.completions.push(Completion { request, script: i, origin, start, latency_ms });
            self.log(self.now, TraceKind::Complete { request, script: i, origin, start, latency_ms });
            self.inject(i, pkt);
        }
    }

    /// Acknowledges the handshake and queues the script's payload.
    fn established(&mut self, i: usize) {
        let s = &self.scripts[i];
        let (port, client) = (s.port, s.client);
        let c = &self.clients[i];
        let ack = TcpSegment::new(port, self.topo.balancer.service_port, c.snd_nxt, TcpFlags::EMPTY, Vec::new())
            .with_ack(c.rcv_nxt)
            .into_packet(client, self.topo.balancer.vip);
        self.inject(i, ack);

        let base = self.clients[i].snd_nxt;
        let mut groups: Vec<(u64, Vec<IpPacket>)> = Vec::new();
        let sent;
        match &self.scripts[i].kind {
            TrafficKind::BenignRequest { request, think_ms, cuts } => {
                let p = self.data_packet(i, base, request);
                let pkts = if cuts.is_empty() { alloc::vec![p] } else { fragment_at(&p, cuts) };
                groups.push((*think_ms, pkts));
                sent = request.len() as u32;
                self.clients[i].request_sent = true;
            }
            TrafficKind::ExploitDirect { payload } => {
                groups.push((0, alloc::vec![self.data_packet(i, base, payload)]));
                sent = payload.len() as u32;
            }
            TrafficKind::DuplicateSeqEvasion { benign, attack, follow_up } => {
                groups.push((0, alloc::vec![self.data_packet(i, base, benign)]));
                groups.push((1, alloc::vec![self.data_packet(i, base, attack)]));
                let next = base.wrapping_add(benign.len() as u32);
                sent = benign.len() as u32 + follow_up.len() as u32;
                if !follow_up.is_empty() {
                    groups.push((2, alloc::vec![self.data_packet(i, next, follow_up)]));
                }
            }
            TrafficKind::FragEvasion(plan) => {
                let p = self.data_packet(i, base, &plan.request);
                let mut pkts = fragment_at(&p, &plan.cuts);
                if let Some(conflict) = &plan.conflict {
                    let mut f = p.clone();
                    f.payload = conflict.bytes.clone();
                    f.fragment_offset = (conflict.offset / 8) as u16;
                    f.more_fragments = true;
                    pkts.insert(1.min(pkts.len()), f);
                }
                groups.push((0, pkts));
                sent = plan.request.len() as u32;
            }
            TrafficKind::Reconnect { payloads, .. } => {
                let mut seq = base;
                let mut pkts = Vec::new();
                for p in payloads {
                    pkts.push(self.data_packet(i, seq, p));
                    seq = seq.wrapping_add(p.len() as u32);
                }
                groups.push((0, pkts));
                sent = seq.wrapping_sub(base);
            }
        }
        self.clients[i].snd_nxt = base.wrapping_add(sent);
        for (delay, pkts) in groups {
            let outbox = &mut self.clients[i].outbox;
            let group = outbox.len();
            outbox.push(pkts);
            self.schedule(self.now + delay, Event::Send { script: i, group });
        }
    }

    fn finish(mut self, until: Timestamp) -> SimTrace {
        self.trace.conservation.in_flight = self
            .queue
            .values()
            .filter(|e| matches!(e, Event::Deliver { node: Node::Balancer, .. } | Event::BalancerDone { .. }))
            .count() as u64
            + self.balancer_queue.len() as u64;
        self.trace.end = Timestamp(self.now.min(until.as_millis()));
        self.trace.backend_logs = self.backends.into_iter().map(|b| b.log).collect();
        self.trace.capture = self.honeypot.into_log();
        self.trace.attackers = self.balancer.attackers().snapshot();
        self.trace.stats = self.balancer.stats().clone();
        self.trace
    }
}

/// Deterministic page body of `len` bytes.
fn page(len: usize) -> Vec<u8> {
    const HEAD: &[u8] = b"HTTP/1.0 200 OK\r\n\r\n";
    let mut p: Vec<u8> = HEAD.iter().copied().chain((0..).map(|i| b'a' + (i % 26) as u8)).take(len).collect();
    p.truncate(len);
    p
}

#[cfg(test)]
mod tests;

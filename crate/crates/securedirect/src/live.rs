//! Stream-level proxy with the balancer's dispatch policy, and a decoy
//! server that records what deflected clients send.
//!
//! Each client connection is read in chunks. Every chunk goes to the IDS
//! before any of it is written to a backend, and the backend connection is
//! only opened once the first chunk is known to be clean. A chunk that
//! matches a signature flags the client address, tears down the backend
//! connection if there is one, and the rest of the stream (that chunk
//! included) is spliced to the honeypot. Later connections from a flagged
//! address go to the honeypot without touching the IDS. An IDS failure
//! closes the client connection.
//!
//! Backend health comes from TCP connect probes every `probe_interval`.

use std::collections::BTreeMap;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use securedirect_core::honeypot::{CaptureLog, CaptureRecord, DecoyScript, Direction};
use securedirect_core::ids::{inspect, IdsBackend, IdsError, SignatureDb, Verdict};
use securedirect_core::pool::{BackendId, BackendPool};
use securedirect_core::session::{AttackReason, AttackerRegistry};
use securedirect_core::Timestamp;

use crate::config::Config;
use crate::ids_net::IdsClient;

const CHUNK: usize = 16 * 1024;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn v4(addr: SocketAddr) -> Ipv4Addr {
    match addr.ip() {
        IpAddr::V4(ip) => ip,
        IpAddr::V6(ip) => ip.to_ipv4_mapped().unwrap_or(Ipv4Addr::UNSPECIFIED),
    }
}

/// Where verdicts come from.
#[derive(Clone, Debug)]
pub enum IdsMode {
    Remote { addr: SocketAddr, timeout: Duration, pooled: bool },
    InProcess(Arc<SignatureDb>),
}

#[derive(Debug, Default)]
pub struct LiveStats {
    pub connections: AtomicU64,
    pub to_backend: AtomicU64,
    pub to_honeypot: AtomicU64,
    /// Connections from already-flagged sources.
    pub fast_path: AtomicU64,
    pub ids_queries: AtomicU64,
    /// Connections closed because the IDS or every backend was unreachable.
    pub fail_closed: AtomicU64,
    per_source: Mutex<BTreeMap<Ipv4Addr, u64>>,
}

impl LiveStats {
    pub fn queries_from(&self, ip: Ipv4Addr) -> u64 {
        lock(&self.per_source).get(&ip).copied().unwrap_or(0)
    }

    fn get(c: &AtomicU64) -> u64 {
        c.load(Ordering::Relaxed)
    }

    pub fn summary(&self) -> String {
        format!(
            "connections={} backend={} honeypot={} fast_path={} ids_queries={} fail_closed={}",
            Self::get(&self.connections),
            Self::get(&self.to_backend),
            Self::get(&self.to_honeypot),
            Self::get(&self.fast_path),
            Self::get(&self.ids_queries),
            Self::get(&self.fail_closed),
        )
    }
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

struct Shared {
    cfg: Config,
    ids: IdsMode,
    pooled: Option<Mutex<IdsClient>>,
    pool: Mutex<BackendPool>,
    attackers: Mutex<AttackerRegistry>,
    stats: Arc<LiveStats>,
    epoch: Instant,
}

impl Shared {
    fn now(&self) -> Timestamp {
        Timestamp(self.epoch.elapsed().as_millis() as u64)
    }

    fn query(&self, src: Ipv4Addr, chunk: &[u8]) -> Result<Verdict, IdsError> {
        bump(&self.stats.ids_queries);
        *lock(&self.stats.per_source).entry(src).or_default() += 1;
        match (&self.ids, &self.pooled) {
            (IdsMode::InProcess(db), _) => Ok(inspect(db, chunk)),
            (IdsMode::Remote { .. }, Some(client)) => lock(client).query(chunk),
            (IdsMode::Remote { addr, timeout, .. }, None) => IdsClient::new(*addr, *timeout).query(chunk),
        }
    }

    fn open_backend(&self) -> Option<(BackendId, TcpStream)> {
        let attempts = lock(&self.pool).len();
        for _ in 0..attempts {
            let id = lock(&self.pool).select().ok()?;
            let addr = SocketAddr::V4(self.cfg.backend_addrs[usize::from(id.0)]);
            match TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT) {
                Ok(s) => return Some((id, s)),
                Err(e) => log::warn!("backend {} at {addr}: {e}", id.0),
            }
        }
        None
    }

    fn probe_round(&self) {
        for (i, addr) in self.cfg.backend_addrs.iter().enumerate() {
            let ok = TcpStream::connect_timeout(&SocketAddr::V4(*addr), CONNECT_TIMEOUT).is_ok();
            if let Some(healthy) = lock(&self.pool).probe_result(BackendId(i as u16), ok) {
                log::info!("backend {i} at {addr} is now {}", if healthy { "up" } else { "down" });
            }
        }
    }
}

/// Copies `from` into `to` on a new thread, then half-closes `to`.
fn relay(mut from: TcpStream, mut to: TcpStream) -> JoinHandle<()> {
    thread::spawn(move || {
        let _ = io::copy(&mut from, &mut to);
        let _ = to.shutdown(Shutdown::Write);
    })
}

fn read_chunk(s: &mut TcpStream, buf: &mut [u8]) -> io::Result<usize> {
    loop {
        match s.read(buf) {
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            r => return r,
        }
    }
}

fn splice_to_honeypot(shared: &Shared, mut client: TcpStream, first: &[u8]) -> io::Result<()> {
    bump(&shared.stats.to_honeypot);
    let mut hp = match TcpStream::connect_timeout(&SocketAddr::V4(shared.cfg.honeypot_addr), CONNECT_TIMEOUT) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("honeypot unreachable: {e}");
            return Ok(());
        }
    };
    let back = relay(hp.try_clone()?, client.try_clone()?);
    hp.write_all(first)?;
    let _ = io::copy(&mut client, &mut hp);
    let _ = hp.shutdown(Shutdown::Write);
    let _ = back.join();
    Ok(())
}

fn handle(shared: &Shared, mut client: TcpStream) -> io::Result<()> {
    bump(&shared.stats.connections);
    let src = v4(client.peer_addr()?);
    if lock(&shared.attackers).is_flagged(src, shared.now()) {
        bump(&shared.stats.fast_path);
        return splice_to_honeypot(shared, client, &[]);
    }
    let mut backend: Option<(TcpStream, JoinHandle<()>)> = None;
    let mut buf = vec![0u8; CHUNK];
    loop {
        let n = read_chunk(&mut client, &mut buf)?;
        if n == 0 {
            break;
        }
        let chunk = &buf[..n];
        match shared.query(src, chunk) {
            Err(e) => {
                log::warn!("{src}: ids {e}; closing");
                bump(&shared.stats.fail_closed);
                if let Some((b, _)) = backend {
                    let _ = b.shutdown(Shutdown::Both);
                }
                return Ok(());
            }
            Ok(v) if v.attack => {
                let now = shared.now();
                lock(&shared.attackers).flag(src, AttackReason::SignatureMatch(v.matched.clone()), now);
                log::info!("{src}: signatures {:?}; deflecting", v.matched);
                if let Some((b, h)) = backend.take() {
                    let _ = b.shutdown(Shutdown::Both);
                    let _ = h.join();
                }
                return splice_to_honeypot(shared, client, chunk);
            }
            Ok(_) => {
                if backend.is_none() {
                    let Some((id, b)) = shared.open_backend() else {
                        log::warn!("{src}: no backend reachable; closing");
                        bump(&shared.stats.fail_closed);
                        return Ok(());
                    };
                    log::debug!("{src} -> backend {}", id.0);
                    bump(&shared.stats.to_backend);
                    let h = relay(b.try_clone()?, client.try_clone()?);
                    backend = Some((b, h));
                }
                if let Some((b, _)) = backend.as_mut() {
                    b.write_all(chunk)?;
                }
            }
        }
    }
    if let Some((b, h)) = backend {
        let _ = b.shutdown(Shutdown::Write);
        let _ = h.join();
    }
    Ok(())
}

pub struct LiveProxy {
    listener: TcpListener,
    shared: Arc<Shared>,
}

impl LiveProxy {
    pub fn bind(cfg: Config, ids: IdsMode) -> io::Result<LiveProxy> {
        let listener = TcpListener::bind(cfg.listen)?;
        let pooled = match &ids {
            IdsMode::Remote { addr, timeout, pooled: true } => Some(Mutex::new(IdsClient::pooled(*addr, *timeout))),
            _ => None,
        };
        let shared = Shared {
            pool: Mutex::new(BackendPool::new(&cfg.balancer.backends, cfg.balancer.failure_threshold)),
            attackers: Mutex::new(AttackerRegistry::new(cfg.balancer.attacker_ttl_ms)),
            cfg,
            ids,
            pooled,
            stats: Arc::default(),
            epoch: Instant::now(),
        };
        Ok(LiveProxy { listener, shared: Arc::new(shared) })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn stats(&self) -> Arc<LiveStats> {
        self.shared.stats.clone()
    }

    /// Probes every backend once and applies the results.
    pub fn probe_round(&self) {
        self.shared.probe_round();
    }

    pub fn healthy_backends(&self) -> usize {
        lock(&self.shared.pool).healthy_count()
    }

    /// Starts the health prober and accepts connections forever.
    pub fn run(self) -> io::Result<()> {
        let prober = self.shared.clone();
        let interval = Duration::from_millis(prober.cfg.balancer.probe_interval_ms);
        thread::spawn(move || loop {
            thread::sleep(interval);
            prober.probe_round();
        });
        for conn in self.listener.incoming() {
            let client = match conn {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let shared = self.shared.clone();
            thread::spawn(move || {
                if let Err(e) = handle(&shared, client) {
                    log::debug!("connection ended: {e}");
                }
            });
        }
        Ok(())
    }
}

/// Decoy TCP server. Sends the banner on connect, answers scripted
/// requests, and records every byte in and out. Outbound payload is capped
/// per connection.
pub struct HoneypotServer {
    listener: TcpListener,
    script: Arc<DecoyScript>,
    budget: usize,
    log: Arc<Mutex<CaptureLog>>,
    epoch: Instant,
}

impl HoneypotServer {
    pub fn bind(addr: SocketAddr, script: DecoyScript, outbound_budget: usize) -> io::Result<HoneypotServer> {
        Ok(HoneypotServer {
            listener: TcpListener::bind(addr)?,
            script: Arc::new(script),
            budget: outbound_budget,
            log: Arc::default(),
            epoch: Instant::now(),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn log(&self) -> Arc<Mutex<CaptureLog>> {
        self.log.clone()
    }

    pub fn serve(self) -> io::Result<()> {
        for conn in self.listener.incoming() {
            let Ok(stream) = conn else { continue };
            let (script, log, epoch, budget) = (self.script.clone(), self.log.clone(), self.epoch, self.budget);
            thread::spawn(move || {
                let _ = decoy(stream, &script, budget, &log, epoch);
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> io::Result<SocketAddr> {
        let addr = self.local_addr()?;
        thread::spawn(move || self.serve());
        Ok(addr)
    }
}

fn decoy(
    mut s: TcpStream,
    script: &DecoyScript,
    budget: usize,
    log: &Mutex<CaptureLog>,
    epoch: Instant,
) -> io::Result<()> {
    let peer = s.peer_addr()?;
    let record = |direction, bytes: &[u8]| {
        let mut log = lock(log);
        let rec = CaptureRecord {
            timestamp: Timestamp(epoch.elapsed().as_millis() as u64),
            src_ip: v4(peer),
            src_port: peer.port(),
            direction,
            bytes: bytes.to_vec(),
        };
        let _ = log.push(rec);
    };
    let mut sent = 0usize;
    let mut send = |s: &mut TcpStream, data: &[u8]| -> io::Result<()> {
        let data = &data[..data.len().min(budget - sent)];
        if data.is_empty() {
            return Ok(());
        }
        sent += data.len();
        record(Direction::Outbound, data);
        s.write_all(data)
    };
    send(&mut s, &script.banner)?;
    let mut buf = vec![0u8; CHUNK];
    loop {
        let n = read_chunk(&mut s, &mut buf)?;
        if n == 0 {
            return Ok(());
        }
        record(Direction::Inbound, &buf[..n]);
        if let Some(reply) = script.reply_for(&buf[..n]) {
            send(&mut s, reply)?;
        }
    }
}

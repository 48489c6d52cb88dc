//! The IDS as a TCP service, and the balancer's client for it.
//!
//! The server answers one response per query frame and keeps reading until
//! the peer closes, so it serves both the one-query-per-connection client and
//! the pooled one. A frame it cannot decode gets `0xFF` and the connection is
//! closed.

use std::io::{self, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use securedirect_core::ids::wire::{self, Response};
use securedirect_core::ids::{inspect, IdsBackend, IdsError, SignatureDb, Verdict};

/// How long the server waits on a silent client before giving up on it.
const SERVER_READ_TIMEOUT: Duration = Duration::from_secs(10);

pub struct IdsServer {
    listener: TcpListener,
    db: Arc<SignatureDb>,
}

impl IdsServer {
    pub fn bind(addr: impl ToSocketAddrs, db: Arc<SignatureDb>) -> io::Result<IdsServer> {
        Ok(IdsServer { listener: TcpListener::bind(addr)?, db })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts forever, one thread per connection.
    pub fn serve(self) -> io::Result<()> {
        for conn in self.listener.incoming() {
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let db = self.db.clone();
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = handle(stream, &db) {
                    log::debug!("ids connection {peer:?}: {e}");
                }
            });
        }
        Ok(())
    }

    /// Serves on a background thread and returns the bound address.
    pub fn spawn(self) -> io::Result<SocketAddr> {
        let addr = self.local_addr()?;
        thread::spawn(move || self.serve());
        Ok(addr)
    }
}

/// Reads exactly `buf.len()` bytes. `Ok(false)` on a clean EOF before the
/// first byte.
fn read_frame_part(stream: &mut TcpStream, buf: &mut [u8]) -> io::Result<bool> {
    let mut got = 0;
    while got < buf.len() {
        match stream.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(false),
            Ok(0) => return Err(ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

/// Sends the error byte and closes gracefully. Unread input left in the
/// socket would turn the close into a reset and lose the reply.
fn reject(mut stream: TcpStream) -> io::Result<()> {
    stream.write_all(&wire::encode_response(&Response::Error))?;
    stream.shutdown(Shutdown::Write)?;
    stream.set_read_timeout(Some(Duration::from_secs(1)))?;
    let _ = io::copy(&mut stream, &mut io::sink());
    Ok(())
}

fn handle(mut stream: TcpStream, db: &SignatureDb) -> io::Result<()> {
    stream.set_read_timeout(Some(SERVER_READ_TIMEOUT))?;
    stream.set_nodelay(true)?;
    loop {
        let mut header = [0u8; wire::QUERY_HEADER_LEN];
        let len = match read_frame_part(&mut stream, &mut header) {
            Ok(false) => return Ok(()),
            Ok(true) => match wire::decode_query_header(&header) {
                Ok(len) => len,
                Err(_) => return reject(stream),
            },
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => return reject(stream),
            Err(e) => return Err(e),
        };
        let mut payload = vec![0u8; len];
        match read_frame_part(&mut stream, &mut payload) {
            Ok(true) => {}
            Ok(false) if len == 0 => {}
            Ok(false) => return reject(stream),
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => return reject(stream),
            Err(e) => return Err(e),
        }
        let verdict = inspect(db, &payload);
        stream.write_all(&wire::encode_response(&Response::Verdict(verdict)))?;
    }
}

/// Balancer-side IDS client. Every failure is reported as an [`IdsError`],
/// which the balancer treats as a reason to drop.
pub struct IdsClient {
    addr: SocketAddr,
    timeout: Duration,
    pooled: bool,
    conn: Option<TcpStream>,
}

impl IdsClient {
    /// One connection per query.
    pub fn new(addr: SocketAddr, timeout: Duration) -> Self {
        IdsClient { addr, timeout, pooled: false, conn: None }
    }

    /// Reuses one connection across queries, reconnecting after a failure.
    pub fn pooled(addr: SocketAddr, timeout: Duration) -> Self {
        IdsClient { addr, timeout, pooled: true, conn: None }
    }

    fn connect(&self) -> Result<TcpStream, IdsError> {
        let s = TcpStream::connect_timeout(&self.addr, self.timeout).map_err(|e| match e.kind() {
            ErrorKind::TimedOut | ErrorKind::WouldBlock => IdsError::Timeout,
            _ => IdsError::ConnectFailed,
        })?;
        s.set_read_timeout(Some(self.timeout)).map_err(|_| IdsError::ConnectFailed)?;
        s.set_write_timeout(Some(self.timeout)).map_err(|_| IdsError::ConnectFailed)?;
        let _ = s.set_nodelay(true);
        Ok(s)
    }

    fn exchange(stream: &mut TcpStream, frame: &[u8]) -> Result<Verdict, IdsError> {
        let io_err = |e: io::Error| match e.kind() {
            ErrorKind::TimedOut | ErrorKind::WouldBlock => IdsError::Timeout,
            _ => IdsError::ProtocolError,
        };
        stream.write_all(frame).map_err(io_err)?;
        let mut buf = Vec::with_capacity(8);
        while let Some(more) = wire::response_bytes_needed(&buf).map_err(|_| IdsError::ProtocolError)? {
            let start = buf.len();
            buf.resize(start + more, 0);
            stream.read_exact(&mut buf[start..]).map_err(io_err)?;
        }
        match wire::decode_response(&buf) {
            Ok(Response::Verdict(v)) => Ok(v),
            _ => Err(IdsError::ProtocolError),
        }
    }
}

impl IdsBackend for IdsClient {
    fn query(&mut self, payload: &[u8]) -> Result<Verdict, IdsError> {
        let frame = wire::encode_query(payload).map_err(|_| IdsError::ProtocolError)?;
        let mut stream = match self.conn.take() {
            Some(s) => s,
            None => self.connect()?,
        };
        let result = Self::exchange(&mut stream, &frame);
        if self.pooled && result.is_ok() {
            self.conn = Some(stream);
        }
        result
    }
}

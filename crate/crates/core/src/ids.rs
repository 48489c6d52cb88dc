//! Signature database, payload inspection and the balancer/IDS query framing.
//!
//! Signature file, one signature per line:
//!
//! ```text
//! # id name hex-pattern
//! 7 shellshock 2f62696e2f7368
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Matching is a raw
//! substring search over the exact payload bytes; nothing is normalized.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt::Write as _;

use thiserror::Error;

use crate::matcher::Matcher;
use crate::session::PayloadDigest;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Signature {
    pub id: u32,
    pub name: String,
    pub pattern: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SignatureError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: duplicate signature id {id}")]
    DuplicateId { id: u32, line: usize },
}

/// Immutable after construction.
#[derive(Clone, Debug)]
pub struct SignatureDb {
    signatures: Vec<Signature>,
    source_digest: u64,
    matcher: Matcher,
}

impl SignatureDb {
    pub fn empty() -> Self {
        SignatureDb {
            signatures: Vec::new(),
            source_digest: PayloadDigest::of(b"").hash,
            matcher: Matcher::new(Vec::<Vec<u8>>::new()),
        }
    }

    /// Validates ids (unique, non-zero) and patterns (non-empty). Error line
    /// numbers are 1-based positions in `signatures`.
    pub fn from_signatures(signatures: Vec<Signature>) -> Result<Self, SignatureError> {
        for (i, s) in signatures.iter().enumerate() {
            if s.id == 0 {
                return Err(SignatureError::Parse { line: i + 1, reason: "signature id must be positive".into() });
            }
            if s.pattern.is_empty() {
                return Err(SignatureError::Parse { line: i + 1, reason: "empty pattern".into() });
            }
            if signatures[..i].iter().any(|o| o.id == s.id) {
                return Err(SignatureError::DuplicateId { id: s.id, line: i + 1 });
            }
        }
        let text = render(&signatures);
        Ok(Self::build(signatures, PayloadDigest::of(text.as_bytes()).hash))
    }

    fn build(signatures: Vec<Signature>, source_digest: u64) -> Self {
        let matcher = Matcher::new(signatures.iter().map(|s| s.pattern.as_slice()));
        SignatureDb { signatures, source_digest, matcher }
    }

    pub fn signatures(&self) -> &[Signature] {
        &self.signatures
    }

    pub fn len(&self) -> usize {
        self.signatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty()
    }

    /// FNV-1a digest of the text the database was loaded from.
    pub fn source_digest(&self) -> u64 {
        self.source_digest
    }

    /// Canonical signature-file rendering: one `<id> <name> <hex>` line each.
    pub fn to_text(&self) -> String {
        render(&self.signatures)
    }
}

fn render(signatures: &[Signature]) -> String {
    let mut out = String::new();
    for s in signatures {
        let _ = write!(out, "{} {} ", s.id, s.name);
        for b in &s.pattern {
            let _ = write!(out, "{b:02x}");
        }
        out.push('\n');
    }
    out
}

fn decode_hex(s: &str) -> Result<Vec<u8>, &'static str> {
    if s.is_empty() {
        return Err("empty pattern");
    }
    if !s.len().is_multiple_of(2) {
        return Err("hex pattern has odd length");
    }
    s.as_bytes()
        .chunks_exact(2)
        .map(|pair| {
            let hi = (pair[0] as char).to_digit(16).ok_or("invalid hex digit")?;
            let lo = (pair[1] as char).to_digit(16).ok_or("invalid hex digit")?;
            Ok((hi * 16 + lo) as u8)
        })
        .collect()
}

pub fn load_signatures(source: &str) -> Result<SignatureDb, SignatureError> {
    let mut signatures: Vec<Signature> = Vec::new();
    for (i, raw) in source.lines().enumerate() {
        let line = i + 1;
        let text = raw.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let parse_err = |reason: &str| SignatureError::Parse { line, reason: reason.to_string() };
        let mut fields = text.split_whitespace();
        let (Some(id), Some(name), Some(hex)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err("expected `<id> <name> <hex-pattern>`"));
        };
        if fields.next().is_some() {
            return Err(parse_err("trailing fields after hex pattern"));
        }
        let id: u32 = id.parse().map_err(|_| parse_err("signature id is not an unsigned integer"))?;
        if id == 0 {
            return Err(parse_err("signature id must be positive"));
        }
        let pattern = decode_hex(hex).map_err(parse_err)?;
        if signatures.iter().any(|s| s.id == id) {
            return Err(SignatureError::DuplicateId { id, line });
        }
        signatures.push(Signature { id, name: name.to_string(), pattern });
    }
    Ok(SignatureDb::build(signatures, PayloadDigest::of(source.as_bytes()).hash))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Verdict {
    pub attack: bool,
    /// Ascending signature ids.
    pub matched: Vec<u32>,
}

impl Verdict {
    pub fn benign() -> Self {
        Verdict::default()
    }

    pub fn from_matches(mut matched: Vec<u32>) -> Self {
        matched.sort_unstable();
        matched.dedup();
        Verdict { attack: !matched.is_empty(), matched }
    }
}

/// Ids of every signature whose pattern occurs in `payload`.
pub fn inspect(db: &SignatureDb, payload: &[u8]) -> Verdict {
    let ids = db.matcher.find_all(payload).into_iter().map(|i| db.signatures[i].id).collect();
    Verdict::from_matches(ids)
}

/// Failure of an IDS round trip. The balancer treats every variant as a
/// reason to drop.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Error)]
pub enum IdsError {
    #[error("ids query timed out")]
    Timeout,
    #[error("could not connect to the ids")]
    ConnectFailed,
    #[error("ids protocol error")]
    ProtocolError,
}

/// Where the balancer sends payloads for a verdict.
pub trait IdsBackend {
    fn query(&mut self, payload: &[u8]) -> Result<Verdict, IdsError>;
}

impl IdsBackend for SignatureDb {
    fn query(&mut self, payload: &[u8]) -> Result<Verdict, IdsError> {
        Ok(inspect(self, payload))
    }
}

impl IdsBackend for Arc<SignatureDb> {
    fn query(&mut self, payload: &[u8]) -> Result<Verdict, IdsError> {
        Ok(inspect(self, payload))
    }
}

impl<T: IdsBackend + ?Sized> IdsBackend for &mut T {
    fn query(&mut self, payload: &[u8]) -> Result<Verdict, IdsError> {
        (**self).query(payload)
    }
}

/// Query/response framing between balancer and IDS.
///
/// Query: `"SD"`, version `0x01`, 2-byte big-endian length, payload.
/// Response: one verdict byte (`0x00` benign, `0x01` attack, `0xFF` error);
/// an attack verdict is followed by a 1-byte count and that many 4-byte
/// big-endian signature ids.
pub mod wire {
    use alloc::vec::Vec;

    use thiserror::Error;

    use super::Verdict;

    pub const MAGIC: [u8; 2] = [0x53, 0x44];
    pub const VERSION: u8 = 0x01;
    pub const QUERY_HEADER_LEN: usize = 5;
    pub const VERDICT_BENIGN: u8 = 0x00;
    pub const VERDICT_ATTACK: u8 = 0x01;
    pub const VERDICT_ERROR: u8 = 0xff;
    pub const MAX_PAYLOAD: usize = u16::MAX as usize;
    /// Ids carried by one response; longer match lists are cut to the
    /// lowest 255 ids.
    pub const MAX_IDS: usize = u8::MAX as usize;

    #[derive(Copy, Clone, Debug, PartialEq, Eq, Error)]
    pub enum FrameError {
        #[error("frame truncated")]
        Truncated,
        #[error("bad magic")]
        BadMagic,
        #[error("unsupported version {0}")]
        BadVersion(u8),
        #[error("unknown verdict byte {0:#04x}")]
        BadVerdict(u8),
        #[error("payload longer than 65535 bytes")]
        PayloadTooLarge,
        #[error("trailing bytes after frame")]
        Trailing,
    }

    #[derive(Clone, Debug, PartialEq, Eq)]
    pub enum Response {
        Verdict(Verdict),
        Error,
    }

    pub fn encode_query(payload: &[u8]) -> Result<Vec<u8>, FrameError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(FrameError::PayloadTooLarge);
        }
        let mut out = Vec::with_capacity(QUERY_HEADER_LEN + payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(payload.len() as u16).to_be_bytes());
        out.extend_from_slice(payload);
        Ok(out)
    }

    /// Validates the fixed header and returns the payload length that follows.
    pub fn decode_query_header(header: &[u8]) -> Result<usize, FrameError> {
        if header.len() < QUERY_HEADER_LEN {
            return Err(FrameError::Truncated);
        }
        if header[..2] != MAGIC {
            return Err(FrameError::BadMagic);
        }
        if header[2] != VERSION {
            return Err(FrameError::BadVersion(header[2]));
        }
        Ok(usize::from(u16::from_be_bytes([header[3], header[4]])))
    }

    pub fn decode_query(frame: &[u8]) -> Result<&[u8], FrameError> {
        let len = decode_query_header(frame)?;
        let body = &frame[QUERY_HEADER_LEN..];
        if body.len() < len {
            return Err(FrameError::Truncated);
        }
        if body.len() > len {
            return Err(FrameError::Trailing);
        }
        Ok(body)
    }

    pub fn encode_response(resp: &Response) -> Vec<u8> {
        match resp {
            Response::Error => alloc::vec![VERDICT_ERROR],
            Response::Verdict(v) if !v.attack => alloc::vec![VERDICT_BENIGN],
            Response::Verdict(v) => {
                let ids = &v.matched[..v.matched.len().min(MAX_IDS)];
                let mut out = Vec::with_capacity(2 + 4 * ids.len());
                out.push(VERDICT_ATTACK);
                out.push(ids.len() as u8);
                for id in ids {
                    out.extend_from_slice(&id.to_be_bytes());
                }
                out
            }
        }
    }

    /// Number of bytes still needed after reading `prefix` of a response, or
    /// `None` once `prefix` holds a complete response.
    pub fn response_bytes_needed(prefix: &[u8]) -> Result<Option<usize>, FrameError> {
        match prefix.first() {
            None => Ok(Some(1)),
            Some(&VERDICT_BENIGN) | Some(&VERDICT_ERROR) => Ok(None),
            Some(&VERDICT_ATTACK) => match prefix.get(1) {
                None => Ok(Some(1)),
                Some(&n) => {
                    let want = 2 + 4 * usize::from(n);
                    Ok((prefix.len() < want).then(|| want - prefix.len()))
                }
            },
            Some(&b) => Err(FrameError::BadVerdict(b)),
        }
    }

    pub fn decode_response(frame: &[u8]) -> Result<Response, FrameError> {
        if response_bytes_needed(frame)?.is_some() {
            return Err(FrameError::Truncated);
        }
        match frame[0] {
            VERDICT_BENIGN if frame.len() == 1 => Ok(Response::Verdict(Verdict::benign())),
            VERDICT_ERROR if frame.len() == 1 => Ok(Response::Error),
            VERDICT_ATTACK => {
                let n = usize::from(frame[1]);
                if frame.len() != 2 + 4 * n {
                    return Err(FrameError::Trailing);
                }
                if n == 0 {
                    return Err(FrameError::BadVerdict(VERDICT_ATTACK));
                }
                let ids = frame[2..].chunks_exact(4).map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]])).collect();
                Ok(Response::Verdict(Verdict::from_matches(ids)))
            }
            _ => Err(FrameError::Trailing),
        }
    }
}

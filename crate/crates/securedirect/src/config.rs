//! Balancer configuration file.
//!
//! ```text
//! # comment
//! vip = 10.0.0.100
//! service_port = 80
//! backends = 10.0.0.1, 10.0.0.2:8080
//! honeypot = 10.0.0.3
//! ids_endpoint = 127.0.0.1:9000
//! ids_timeout_ms = 1000
//! session_timeout_s = 240
//! probe_interval_s = 5
//! failure_threshold = 3
//! attacker_ttl_s = 3600
//! signatures = sigs.txt
//! listen = 0.0.0.0:8080
//! ```
//!
//! Addresses in `backends` and `honeypot` may carry a port; without one the
//! service port is used. `listen` is where live mode accepts clients and
//! defaults to the VIP and service port. Relative `signatures` paths are
//! resolved against the config file's directory. Unknown keys are errors.

use std::collections::BTreeSet;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::path::{Path, PathBuf};

use securedirect_core::balancer::BalancerConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error(transparent)]
    Invalid(#[from] securedirect_core::balancer::ConfigError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub balancer: BalancerConfig,
    /// Same order as `balancer.backends`, with ports.
    pub backend_addrs: Vec<SocketAddrV4>,
    pub honeypot_addr: SocketAddrV4,
    pub listen: SocketAddr,
    pub ids_endpoint: Option<SocketAddr>,
    pub signatures: Option<PathBuf>,
}

const KEYS: [&str; 12] = [
    "vip",
    "service_port",
    "backends",
    "honeypot",
    "ids_endpoint",
    "ids_timeout_ms",
    "session_timeout_s",
    "probe_interval_s",
    "failure_threshold",
    "attacker_ttl_s",
    "signatures",
    "listen",
];

fn endpoint(s: &str, default_port: u16) -> Result<SocketAddrV4, String> {
    if let Ok(a) = s.parse::<SocketAddrV4>() {
        return Ok(a);
    }
    s.parse::<Ipv4Addr>().map(|ip| SocketAddrV4::new(ip, default_port)).map_err(|_| format!("bad address `{s}`"))
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg = Config::parse(&text)?;
        if let Some(sig) = &cfg.signatures {
            if sig.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.signatures = Some(dir.join(sig));
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut values: Vec<(usize, &str, &str)> = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::Parse { line, reason: "expected `key = value`".into() })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(ConfigError::Parse { line, reason: format!("unknown key `{k}`") });
            }
            if !seen.insert(k) {
                return Err(ConfigError::Parse { line, reason: format!("duplicate key `{k}`") });
            }
            values.push((line, k, v));
        }
        let get = |key: &'static str| values.iter().find(|(_, k, _)| *k == key).map(|&(l, _, v)| (l, v));
        let err = |line: usize, reason: String| ConfigError::Parse { line, reason };
        fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
            v.parse()
                .map_err(|_| ConfigError::Parse { line, reason: format!("`{key}` must be a non-negative integer") })
        }

        let (l, v) = get("vip").ok_or(ConfigError::Missing("vip"))?;
        let vip: Ipv4Addr = v.parse().map_err(|_| err(l, format!("bad vip `{v}`")))?;
        let (l, v) = get("service_port").ok_or(ConfigError::Missing("service_port"))?;
        let service_port: u16 = num(l, "service_port", v)?;
        let (l, v) = get("backends").ok_or(ConfigError::Missing("backends"))?;
        let backend_addrs = v
            .split(',')
            .map(|s| endpoint(s.trim(), service_port))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(l, e))?;
        let (l, v) = get("honeypot").ok_or(ConfigError::Missing("honeypot"))?;
        let honeypot_addr = endpoint(v, service_port).map_err(|e| err(l, e))?;

        let mut balancer = BalancerConfig::new(
            vip,
            service_port,
            backend_addrs.iter().map(|a| *a.ip()).collect(),
            *honeypot_addr.ip(),
        );
        if let Some((l, v)) = get("ids_timeout_ms") {
            balancer.ids_timeout_ms = num(l, "ids_timeout_ms", v)?;
        }
        if let Some((l, v)) = get("session_timeout_s") {
            balancer.session_timeout_ms = num::<u64>(l, "session_timeout_s", v)?.saturating_mul(1000);
        }
        if let Some((l, v)) = get("probe_interval_s") {
            balancer.probe_interval_ms = num::<u64>(l, "probe_interval_s", v)?.saturating_mul(1000);
        }
        if let Some((l, v)) = get("failure_threshold") {
            balancer.failure_threshold = num(l, "failure_threshold", v)?;
        }
        if let Some((l, v)) = get("attacker_ttl_s") {
            balancer.attacker_ttl_ms = Some(num::<u64>(l, "attacker_ttl_s", v)?.saturating_mul(1000));
        }
        let ids_endpoint = match get("ids_endpoint") {
            Some((l, v)) => Some(v.parse().map_err(|_| err(l, format!("bad ids_endpoint `{v}`")))?),
            None => None,
        };
        let listen = match get("listen") {
            Some((l, v)) => v.parse().map_err(|_| err(l, format!("bad listen address `{v}`")))?,
            None => SocketAddr::V4(SocketAddrV4::new(vip, service_port)),
        };
        let signatures = get("signatures").map(|(_, v)| PathBuf::from(v));
        balancer.validate()?;
        Ok(Config { balancer, backend_addrs, honeypot_addr, listen, ids_endpoint, signatures })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# lab
vip = 10.0.0.100
service_port = 80
backends = 10.0.0.1, 10.0.0.2:8080
honeypot = 10.0.0.3
ids_timeout_ms = 250
session_timeout_s = 60
attacker_ttl_s = 10
";

    #[test]
    fn parses_sample() {
        let c = Config::parse(SAMPLE).unwrap();
        assert_eq!(c.balancer.backends, vec![Ipv4Addr::new(10, 0, 0, 1), Ipv4Addr::new(10, 0, 0, 2)]);
        assert_eq!(c.backend_addrs[1].port(), 8080);
        assert_eq!(c.backend_addrs[0].port(), 80);
        assert_eq!(c.balancer.session_timeout_ms, 60_000);
        assert_eq!(c.balancer.ids_timeout_ms, 250);
        assert_eq!(c.balancer.attacker_ttl_ms, Some(10_000));
        assert_eq!(c.balancer.probe_interval_ms, 5000);
        assert_eq!(c.listen, "10.0.0.100:80".parse().unwrap());
        assert!(c.ids_endpoint.is_none());
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        let e = Config::parse(&format!("{SAMPLE}colour = blue\n")).unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 9, .. }), "{e}");
        let e = Config::parse(&format!("{SAMPLE}vip = 10.0.0.9\n")).unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 9, .. }));
    }

    #[test]
    fn missing_and_invalid_values() {
        assert!(matches!(Config::parse("vip = 1.2.3.4\n"), Err(ConfigError::Missing("service_port"))));
        let bad = SAMPLE.replace("service_port = 80", "service_port = http");
        assert!(matches!(Config::parse(&bad), Err(ConfigError::Parse { line: 3, .. })));
        let zero = format!("{SAMPLE}failure_threshold = 0\n");
        assert!(matches!(Config::parse(&zero), Err(ConfigError::Invalid(_))));
        assert!(matches!(Config::parse("just words\n"), Err(ConfigError::Parse { line: 1, .. })));
    }
}

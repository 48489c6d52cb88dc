//! Sockets, files and tooling around [`securedirect_core`].
//!
//! - [`ids_net`]: the IDS as a TCP service and the balancer's client for it.
//! - [`live`]: a stream-level proxy that applies the same dispatch policy to
//!   ordinary TCP connections, plus a decoy honeypot server.
//! - [`capture`], [`report`], [`bench`]: capture files and latency reports.
//! - [`config`]: the balancer configuration file.
//!
//! Packet-level defences (fragment reassembly, duplicate sequence detection,
//! RST injection) need raw packets and exist only in the simulator; the live
//! proxy sees byte streams.

pub use securedirect_core as core;

pub mod bench;
pub mod capture;
pub mod config;
pub mod ids_net;
pub mod live;
pub mod report;

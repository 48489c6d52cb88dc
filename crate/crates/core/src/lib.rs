//! Packet path of a content-inspecting TCP load balancer.
//!
//! Traffic addressed to a virtual IP is reassembled, checked for
//! insertion/evasion tricks, inspected against a signature database and then
//! either forwarded round-robin to a health-checked backend pool or deflected
//! to a honeypot. Once a source has been identified as an attacker, its
//! packets skip inspection and go straight to the honeypot.
//!
//! The crate is `no_std` (it needs `alloc`). Sockets, files and the command
//! line live in the `securedirect` companion crate.
//!
//! Besides the balancer itself the crate carries a deterministic
//! discrete-event simulator ([`sim`]) and a load generator ([`loadgen`]) so
//! the whole pipeline can be exercised without privileged networking.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod balancer;
pub mod frag;
pub mod honeypot;
pub mod ids;
pub mod loadgen;
pub mod matcher;
pub mod packet;
pub mod pool;
pub mod session;
pub mod sim;
mod time;

pub use time::Timestamp;

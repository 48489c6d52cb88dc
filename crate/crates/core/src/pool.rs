//! Backend pool: round-robin selection over healthy servers and
//! probe-driven health tracking.

use alloc::vec::Vec;
use core::fmt;
use core::net::Ipv4Addr;

use thiserror::Error;

use crate::Timestamp;

pub const DEFAULT_FAILURE_THRESHOLD: u32 = 3;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BackendId(pub u16);

impl fmt::Display for BackendId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Backend {
    pub id: BackendId,
    pub addr: Ipv4Addr,
    pub healthy: bool,
    pub consecutive_failures: u32,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Error)]
#[error("no healthy backend in the pool")]
pub struct NoHealthyBackend;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Error)]
#[error("expected {expected} probe results, got {got}")]
pub struct ProbeCountMismatch {
    pub expected: usize,
    pub got: usize,
}

/// Backends whose health flipped during one round of probe results.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HealthSummary {
    pub marked_down: Vec<BackendId>,
    pub restored: Vec<BackendId>,
    pub last_probe: Option<Timestamp>,
}

#[derive(Clone, Debug)]
pub struct BackendPool {
    backends: Vec<Backend>,
    cursor: usize,
    failure_threshold: u32,
}

impl BackendPool {
    /// All backends start healthy. `failure_threshold` is clamped to at least 1.
    pub fn new(addrs: &[Ipv4Addr], failure_threshold: u32) -> Self {
        let backends = addrs
            .iter()
            .enumerate()
            .map(|(i, &addr)| Backend { id: BackendId(i as u16), addr, healthy: true, consecutive_failures: 0 })
            .collect();
        BackendPool { backends, cursor: 0, failure_threshold: failure_threshold.max(1) }
    }

    pub fn backends(&self) -> &[Backend] {
        &self.backends
    }

    pub fn get(&self, id: BackendId) -> Option<&Backend> {
        self.backends.get(usize::from(id.0))
    }

    pub fn len(&self) -> usize {
        self.backends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backends.is_empty()
    }

    pub fn healthy_count(&self) -> usize {
        self.backends.iter().filter(|b| b.healthy).count()
    }

    /// Next healthy backend at or after the cursor, cyclically.
    pub fn select(&mut self) -> Result<BackendId, NoHealthyBackend> {
        let n = self.backends.len();
        for step in 0..n {
            let idx = (self.cursor + step) % n;
            if self.backends[idx].healthy {
                self.cursor = (idx + 1) % n;
                return Ok(self.backends[idx].id);
            }
        }
        Err(NoHealthyBackend)
    }

    /// Applies one probe outcome. Returns `Some(healthy)` when the backend's
    /// health changed.
    pub fn probe_result(&mut self, id: BackendId, ok: bool) -> Option<bool> {
        let threshold = self.failure_threshold;
        let b = self.backends.get_mut(usize::from(id.0))?;
        if ok {
            b.consecutive_failures = 0;
            if !b.healthy {
                b.healthy = true;
                return Some(true);
            }
        } else {
            b.consecutive_failures = b.consecutive_failures.saturating_add(1);
            if b.healthy && b.consecutive_failures >= threshold {
                b.healthy = false;
                return Some(false);
            }
        }
        None
    }

    /// One probe round, `results[i]` belonging to backend `i`.
    pub fn health_tick(&mut self, results: &[bool], now: Timestamp) -> Result<HealthSummary, ProbeCountMismatch> {
        if results.len() != self.backends.len() {
            return Err(ProbeCountMismatch { expected: self.backends.len(), got: results.len() });
        }
        let mut summary = HealthSummary { last_probe: Some(now), ..HealthSummary::default() };
        for (i, &ok) in results.iter().enumerate() {
            let id = BackendId(i as u16);
            match self.probe_result(id, ok) {
                Some(true) => summary.restored.push(id),
                Some(false) => summary.marked_down.push(id),
                None => {}
            }
        }
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn pool(n: usize) -> BackendPool {
        let addrs: Vec<Ipv4Addr> = (0..n).map(|i| Ipv4Addr::new(10, 0, 0, 1 + i as u8)).collect();
        BackendPool::new(&addrs, DEFAULT_FAILURE_THRESHOLD)
    }

    fn ids(p: &mut BackendPool, n: usize) -> Vec<u16> {
        (0..n).map(|_| p.select().unwrap().0).collect()
    }

    #[test]
    fn cyclic_order() {
        let mut p = pool(3);
        assert_eq!(ids(&mut p, 4), vec![0, 1, 2, 0]);
    }

    #[test]
    fn skips_unhealthy() {
        let mut p = pool(3);
        for _ in 0..3 {
            p.probe_result(BackendId(1), false);
        }
        assert_eq!(ids(&mut p, 4), vec![0, 2, 0, 2]);
    }

    #[test]
    fn all_unhealthy_and_empty() {
        let mut p = pool(2);
        for _ in 0..3 {
            p.health_tick(&[false, false], Timestamp::ZERO).unwrap();
        }
        assert_eq!(p.select(), Err(NoHealthyBackend));
        assert_eq!(pool(0).select(), Err(NoHealthyBackend));
    }

    #[test]
    fn below_threshold_stays_healthy() {
        let mut p = pool(1);
        p.health_tick(&[false], Timestamp(0)).unwrap();
        p.health_tick(&[false], Timestamp(5000)).unwrap();
        p.health_tick(&[true], Timestamp(10000)).unwrap();
        assert!(p.backends()[0].healthy);
        assert_eq!(p.backends()[0].consecutive_failures, 0);
        p.health_tick(&[false], Timestamp(15000)).unwrap();
        p.health_tick(&[false], Timestamp(20000)).unwrap();
        assert!(p.backends()[0].healthy);
    }

    #[test]
    fn third_failure_marks_down_and_one_success_restores() {
        let mut p = pool(2);
        let mut last = HealthSummary::default();
        for t in 0..3 {
            last = p.health_tick(&[true, false], Timestamp(t * 5000)).unwrap();
        }
        assert_eq!(last.marked_down, vec![BackendId(1)]);
        assert_eq!(ids(&mut p, 3), vec![0, 0, 0]);
        let s = p.health_tick(&[true, true], Timestamp(20000)).unwrap();
        assert_eq!(s.restored, vec![BackendId(1)]);
        assert_eq!(p.healthy_count(), 2);
    }

    #[test]
    fn probe_count_must_match() {
        let mut p = pool(3);
        assert_eq!(p.health_tick(&[true], Timestamp::ZERO), Err(ProbeCountMismatch { expected: 3, got: 1 }));
    }
}

//! Page-request load against the simulated deployment, and latency reports.
//!
//! Arrivals use one slot per request: request `i` of a run at `rate` pages per
//! hour starts at `(i + f(u_i)) * G` ms, where `G = 3_600_000 / rate` and
//! `f(u) = u^2` skews each start towards the front of its slot. The `u_i`
//! come from the seed only, so two rates run with the same seed see the same
//! pattern, compressed.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sim::{self, attack_patterns, SimError, Topology, TrafficKind, TrafficScript, BENIGN_REQUEST};
use crate::Timestamp;

/// Simulated time allowed after the last arrival for requests to finish.
pub const DRAIN_MS: u64 = 60_000;
const MS_PER_HOUR: u128 = 3_600_000;

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LoadScenario {
    pub rate_per_hour: u64,
    pub duration_s: u64,
    /// Extra attacker connections, as a fraction of benign requests.
    pub attacker_fraction: f64,
    pub seed: u64,
}

impl LoadScenario {
    pub fn new(rate_per_hour: u64, duration_s: u64, seed: u64) -> Self {
        LoadScenario { rate_per_hour, duration_s, attacker_fraction: 0.0, seed }
    }

    pub fn validate(&self) -> Result<(), LoadError> {
        if self.duration_s == 0 {
            return Err(LoadError::Invalid("duration must be positive"));
        }
        if !(0.0..=1.0).contains(&self.attacker_fraction) {
            return Err(LoadError::Invalid("attacker fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn request_count(&self) -> u64 {
        (u128::from(self.rate_per_hour) * u128::from(self.duration_s) / 3600) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum LoadError {
    #[error("invalid load scenario: {0}")]
    Invalid(&'static str),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Start times (ms) of every benign request.
pub fn arrivals(s: &LoadScenario) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let rate = u128::from(s.rate_per_hour);
    (0..s.request_count())
        .map(|i| {
            let u = u128::from(rng.gen::<u32>());
            let num = (u128::from(i) << 64) * MS_PER_HOUR + u * u * MS_PER_HOUR;
            (num / (rate << 64)) as u64
        })
        .collect()
}

fn client_addr(i: usize) -> (Ipv4Addr, u16) {
    (Ipv4Addr::new(100, 64, (i / 200 / 250) as u8, 1 + (i / 200 % 250) as u8), 1024 + (i % 200) as u16 * 300)
}

/// Benign request scripts followed by attacker scripts.
pub fn load_scripts(s: &LoadScenario, topo: &Topology) -> Vec<TrafficScript> {
    let mut scripts: Vec<TrafficScript> = arrivals(s)
        .into_iter()
        .enumerate()
        .map(|(i, at)| {
            let (ip, port) = client_addr(i);
            let kind = TrafficKind::BenignRequest { request: BENIGN_REQUEST.to_vec(), think_ms: 0, cuts: Vec::new() };
            TrafficScript::new(ip, port, Timestamp(at), kind)
        })
        .collect();
    let attackers = (scripts.len() as f64 * s.attacker_fraction + 0.5) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(1);
    let patterns = attack_patterns(&topo.signatures);
    let horizon = s.duration_s * 1000;
    for j in 0..attackers {
        let ip = Ipv4Addr::new(203, 0, 113, 1 + (j % 250) as u8);
        let port = 40000 + 2 * (j / 250) as u16;
        let start = Timestamp(rng.gen_range(0..horizon));
        scripts.extend(sim::scenario::random_attack(&mut rng, ip, port, start, &patterns));
    }
    scripts
}

/// Runs the load through the simulator and collects benign latencies.
pub fn run_scenario(s: &LoadScenario, topo: &Topology) -> Result<LatencyReport, LoadError> {
    s.validate()?;
    let scripts = load_scripts(s, topo);
    let scheduled = s.request_count();
    if scripts.is_empty() {
        return Ok(LatencyReport::from_samples(s.rate_per_hour, scheduled, Vec::new()));
    }
    let until = Timestamp(s.duration_s * 1000 + DRAIN_MS);
    let trace = sim::run(topo, &scripts, s.seed, until)?;
    let samples = trace
        .completions
        .iter()
        .map(|c| RequestSample { index: c.request as u64, start_ms: c.start.as_millis(), latency_ms: c.latency_ms })
        .collect();
    Ok(LatencyReport::from_samples(s.rate_per_hour, scheduled, samples))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct RequestSample {
    pub index: u64,
    pub start_ms: u64,
    pub latency_ms: u64,
}

/// Integer summary of a latency list. The mean is `sum / count`.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct LatencySummary {
    pub count: u64,
    pub min: u64,
    /// Lower median.
    pub median: u64,
    /// Nearest-rank 95th percentile.
    pub p95: u64,
    pub max: u64,
    pub sum: u64,
}

impl LatencySummary {
    pub fn of(latencies: &[u64]) -> Self {
        if latencies.is_empty() {
            return LatencySummary::default();
        }
        let mut sorted = latencies.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        LatencySummary {
            count: n as u64,
            min: sorted[0],
            median: sorted[(n - 1) / 2],
            p95: sorted[(95 * n).div_ceil(100) - 1],
            max: sorted[n - 1],
            sum: sorted.iter().sum(),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum as f64 / self.count as f64
        }
    }

    /// Exact comparison of means, without rounding.
    pub fn mean_le(&self, other: &LatencySummary) -> bool {
        u128::from(self.sum) * u128::from(other.count) <= u128::from(other.sum) * u128::from(self.count)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Bucket {
    pub minute: u64,
    pub count: u64,
    pub sum: u64,
}

impl Bucket {
    pub fn mean(&self) -> f64 {
        self.sum as f64 / self.count as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatencyReport {
    pub rate_per_hour: u64,
    pub scheduled: u64,
    /// Completed requests, by request index.
    pub samples: Vec<RequestSample>,
    pub summary: LatencySummary,
    /// Per-minute latency, by start time. Empty minutes are absent.
    pub buckets: Vec<Bucket>,
}

impl LatencyReport {
    pub fn from_samples(rate_per_hour: u64, scheduled: u64, mut samples: Vec<RequestSample>) -> Self {
        samples.sort_by_key(|s| s.index);
        let latencies: Vec<u64> = samples.iter().map(|s| s.latency_ms).collect();
        let mut buckets: BTreeMap<u64, Bucket> = BTreeMap::new();
        for s in &samples {
            let minute = s.start_ms / 60_000;
            let b = buckets.entry(minute).or_insert(Bucket { minute, count: 0, sum: 0 });
            b.count += 1;
            b.sum += s.latency_ms;
        }
        LatencyReport {
            rate_per_hour,
            scheduled,
            summary: LatencySummary::of(&latencies),
            samples,
            buckets: buckets.into_values().collect(),
        }
    }

    pub fn completed(&self) -> u64 {
        self.samples.len() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Straightforward recomputation, sharing nothing with `LatencySummary::of`.
    fn oracle(lat: &[u64]) -> (u64, u64, u64, u64, u64) {
        let mut v = lat.to_vec();
        for i in 1..v.len() {
            let mut j = i;
            while j > 0 && v[j - 1] > v[j] {
                v.swap(j - 1, j);
                j -= 1;
            }
        }
        let n = v.len();
        let median = v[if n % 2 == 1 { n / 2 } else { n / 2 - 1 }];
        let mut rank = 0;
        while rank * 100 < 95 * n {
            rank += 1;
        }
        let sum: u64 = v.iter().sum();
        (v[0], median, v[rank - 1], v[n - 1], sum)
    }

    #[test]
    fn zero_rate_is_an_empty_report() {
        let r = run_scenario(&LoadScenario::new(0, 60, 1), &Topology::minimal()).unwrap();
        assert_eq!(r.completed(), 0);
        assert_eq!(r.summary, LatencySummary::default());
        assert!(r.buckets.is_empty());
    }

    #[test]
    fn hour_at_one_page_per_second_completes_every_page() {
        let r = run_scenario(&LoadScenario::new(3600, 3600, 0), &Topology::minimal()).unwrap();
        assert_eq!(r.completed(), 3600);
        assert_eq!(r.buckets.len(), 60);
        assert_eq!(r.buckets.iter().map(|b| b.count).sum::<u64>(), 3600);
    }

    #[test]
    fn arrivals_stay_in_their_slots() {
        let s = LoadScenario::new(14400, 120, 3);
        let a = arrivals(&s);
        assert_eq!(a.len(), 480);
        for (i, &t) in a.iter().enumerate() {
            assert!(t >= 250 * i as u64 && t < 250 * (i as u64 + 1));
        }
        assert_eq!(a, arrivals(&s));
        assert_ne!(a, arrivals(&LoadScenario::new(14400, 120, 4)));
    }

    #[test]
    fn mean_does_not_fall_as_rate_rises() {
        let topo = Topology::minimal();
        let reports: Vec<LatencyReport> =
            [3600, 14400, 18000].iter().map(|&r| run_scenario(&LoadScenario::new(r, 300, 0), &topo).unwrap()).collect();
        for w in reports.windows(2) {
            assert!(w[0].summary.mean_le(&w[1].summary));
        }
    }

    #[test]
    fn attackers_do_not_change_benign_completions() {
        let topo = Topology::minimal();
        let clean = run_scenario(&LoadScenario::new(3600, 600, 5), &topo).unwrap();
        let mut s = LoadScenario::new(3600, 600, 5);
        s.attacker_fraction = 0.1;
        let mixed = run_scenario(&s, &topo).unwrap();
        let (a, b) = (clean.completed() as i64, mixed.completed() as i64);
        assert!((a - b).abs() * 100 <= a, "{a} vs {b}");
    }

    #[test]
    fn invalid_scenarios_rejected() {
        assert!(LoadScenario::new(10, 0, 0).validate().is_err());
        let mut s = LoadScenario::new(10, 10, 0);
        s.attacker_fraction = 2.0;
        assert!(matches!(run_scenario(&s, &Topology::minimal()), Err(LoadError::Invalid(_))));
    }

    #[test]
    fn summary_of_known_list() {
        let s = LatencySummary::of(&[5, 1, 4, 2, 3]);
        assert_eq!((s.min, s.median, s.p95, s.max, s.sum), (1, 3, 5, 5, 15));
        let s = LatencySummary::of(&[10, 20]);
        assert_eq!(s.median, 10);
        assert!(LatencySummary::of(&[1, 1]).mean_le(&LatencySummary::of(&[1, 2])));
        assert!(!LatencySummary::of(&[3]).mean_le(&LatencySummary::of(&[1, 2])));
    }

    proptest! {
        #[test]
        fn summary_matches_oracle(lat in proptest::collection::vec(0u64..10_000, 1..300)) {
            let s = LatencySummary::of(&lat);
            prop_assert_eq!((s.min, s.median, s.p95, s.max, s.sum), oracle(&lat));
            prop_assert_eq!(s.count, lat.len() as u64);
        }

        #[test]
        fn buckets_partition_samples(starts in proptest::collection::vec((0u64..600_000, 0u64..100), 0..200)) {
            let samples: Vec<RequestSample> = starts
                .iter()
                .enumerate()
                .map(|(i, &(start_ms, latency_ms))| RequestSample { index: i as u64, start_ms, latency_ms })
                .collect();
            let r = LatencyReport::from_samples(1, samples.len() as u64, samples.clone());
            prop_assert_eq!(r.buckets.iter().map(|b| b.count).sum::<u64>(), samples.len() as u64);
            prop_assert_eq!(r.buckets.iter().map(|b| b.sum).sum::<u64>(), r.summary.sum);
            prop_assert!(r.buckets.windows(2).all(|w| w[0].minute < w[1].minute));
            prop_assert_eq!(r.samples, samples);
        }
    }

    #[test]
    fn report_is_deterministic() {
        let s = LoadScenario::new(18000, 60, 9);
        let topo = Topology::minimal();
        assert_eq!(run_scenario(&s, &topo).unwrap(), run_scenario(&s, &topo).unwrap());
    }
}

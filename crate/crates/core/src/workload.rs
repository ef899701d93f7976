//! Open-loop request generation: Poisson arrivals, service-time mixtures,
//! class mixes, dependency groups and packetization.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{rng_stream, SimRng, SimTime, StreamId};

const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("arrival rate must be positive and finite, got {0}")]
    BadRate(f64),
    #[error("service probabilities sum to {0}, expected 1")]
    ProbabilitySum(f64),
    #[error("service times and probabilities must be positive, got {0}")]
    NonPositive(f64),
    #[error("workload has no request classes")]
    NoClasses,
    #[error("class weights must be positive (class {0})")]
    BadWeight(u32),
    #[error("class {0} must have at least one packet and a group size of at least one")]
    BadShape(u32),
    #[error("workload needs at least one client")]
    NoClients,
}

/// Service-time distribution of a request class, in microseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ServiceDistribution {
    Exponential { mean_us: f64 },
    Bimodal { p1: f64, s1: f64, p2: f64, s2: f64 },
    Trimodal { p1: f64, s1: f64, p2: f64, s2: f64, p3: f64, s3: f64 },
    Deterministic { value_us: f64 },
}

impl ServiceDistribution {
    pub fn exponential(mean_us: f64) -> Self {
        ServiceDistribution::Exponential { mean_us }
    }

    pub fn bimodal(p1: f64, s1: f64, s2: f64) -> Self {
        ServiceDistribution::Bimodal { p1, s1, p2: 1.0 - p1, s2 }
    }

    pub fn trimodal(p1: f64, s1: f64, p2: f64, s2: f64, s3: f64) -> Self {
        ServiceDistribution::Trimodal { p1, s1, p2, s2, p3: 1.0 - p1 - p2, s3 }
    }

    pub fn deterministic(value_us: f64) -> Self {
        ServiceDistribution::Deterministic { value_us }
    }

    fn modes(&self) -> Option<Vec<(f64, f64)>> {
        match *self {
            ServiceDistribution::Bimodal { p1, s1, p2, s2 } => Some(vec![(p1, s1), (p2, s2)]),
            ServiceDistribution::Trimodal { p1, s1, p2, s2, p3, s3 } => {
                Some(vec![(p1, s1), (p2, s2), (p3, s3)])
            }
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        match *self {
            ServiceDistribution::Exponential { mean_us: v }
            | ServiceDistribution::Deterministic { value_us: v } => {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(WorkloadError::NonPositive(v));
                }
            }
            _ => {
                let modes = self.modes().unwrap_or_default();
                for &(p, s) in &modes {
                    if !(p > 0.0 && p.is_finite()) {
                        return Err(WorkloadError::NonPositive(p));
                    }
                    if !(s > 0.0 && s.is_finite()) {
                        return Err(WorkloadError::NonPositive(s));
                    }
                }
                let sum: f64 = modes.iter().map(|m| m.0).sum();
                if (sum - 1.0).abs() > PROB_TOLERANCE {
                    return Err(WorkloadError::ProbabilitySum(sum));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ServiceDistribution::Exponential { mean_us } => mean_us,
            ServiceDistribution::Deterministic { value_us } => value_us,
            _ => self.modes().unwrap_or_default().iter().map(|(p, s)| p * s).sum(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ServiceDistribution::Exponential { mean_us } => {
                let exp = Exp::new(1.0 / mean_us).expect("validated mean");
                // Exp can return exactly 0.0 with vanishing probability.
                exp.sample(rng).max(f64::MIN_POSITIVE)
            }
            ServiceDistribution::Deterministic { value_us } => value_us,
            ServiceDistribution::Bimodal { p1, s1, s2, .. } => {
                if rng.random::<f64>() < p1 {
                    s1
                } else {
                    s2
                }
            }
            ServiceDistribution::Trimodal { p1, s1, p2, s2, s3, .. } => {
                let u: f64 = rng.random();
                if u < p1 {
                    s1
                } else if u < p1 + p2 {
                    s2
                } else {
                    s3
                }
            }
        }
    }
}

/// Exponential inter-arrival gap with mean `1 / rate` (rate in requests/µs).
pub fn next_arrival<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> Result<f64, WorkloadError> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(WorkloadError::BadRate(rate));
    }
    Ok(Exp::new(rate).expect("positive rate").sample(rng))
}

/// Globally unique request identity: the client id prefixed to a
/// client-local sequence number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReqId {
    pub client: u32,
    pub seq: u64,
}

impl ReqId {
    /// Packed 64-bit key used for hashing and table matching.
    pub fn key(self) -> u64 {
        debug_assert!(self.seq < 1 << 32);
        ((self.client as u64) << 32) | (self.seq & 0xFFFF_FFFF)
    }
}

/// One request class in the workload mix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    #[serde(default)]
    pub class_tag: u32,
    /// Relative share of arrivals.
    #[serde(default = "one")]
    pub weight: f64,
    pub service: ServiceDistribution,
    #[serde(default)]
    pub priority: u32,
    #[serde(default)]
    pub locality: Option<u32>,
    #[serde(default = "one_u32")]
    pub packets: u32,
    /// Number of requests sharing one request id.
    #[serde(default = "one_u32")]
    pub group_size: u32,
    /// Spacing between successive members of a dependency group.
    #[serde(default = "default_member_gap")]
    pub member_gap_us: f64,
    /// Arrivals of this class are only emitted inside `[start_us, end_us)`.
    #[serde(default)]
    pub start_us: Option<f64>,
    #[serde(default)]
    pub end_us: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn one_u32() -> u32 {
    1
}

fn default_member_gap() -> f64 {
    10.0
}

impl ClassSpec {
    pub fn new(class_tag: u32, weight: f64, service: ServiceDistribution) -> Self {
        ClassSpec {
            class_tag,
            weight,
            service,
            priority: 0,
            locality: None,
            packets: 1,
            group_size: 1,
            member_gap_us: default_member_gap(),
            start_us: None,
            end_us: None,
        }
    }

    fn active_at(&self, t: f64) -> bool {
        self.start_us.is_none_or(|s| t >= s) && self.end_us.is_none_or(|e| t < e)
    }
}

/// Request mix and client population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub classes: Vec<ClassSpec>,
    #[serde(default = "default_clients")]
    pub clients: u32,
    /// Gap between consecutive packets of one request.
    #[serde(default = "default_packet_gap")]
    pub packet_gap_us: f64,
}

fn default_clients() -> u32 {
    4
}

fn default_packet_gap() -> f64 {
    1.0
}

impl WorkloadSpec {
    pub fn single(service: ServiceDistribution) -> Self {
        WorkloadSpec {
            classes: vec![ClassSpec::new(0, 1.0, service)],
            clients: default_clients(),
            packet_gap_us: default_packet_gap(),
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.classes.is_empty() {
            return Err(WorkloadError::NoClasses);
        }
        if self.clients == 0 {
            return Err(WorkloadError::NoClients);
        }
        for c in &self.classes {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(WorkloadError::BadWeight(c.class_tag));
            }
            if c.packets == 0 || c.group_size == 0 {
                return Err(WorkloadError::BadShape(c.class_tag));
            }
            c.service.validate()?;
        }
        Ok(())
    }

    /// Mean service demand per request of the full mix.
    pub fn mean_service(&self) -> f64 {
        let total: f64 = self.classes.iter().map(|c| c.weight).sum();
        self.classes
            .iter()
            .map(|c| c.weight / total * c.service.mean() * c.group_size as f64)
            .sum::<f64>()
    }

    /// Mean number of requests emitted per arrival event.
    pub fn mean_group_size(&self) -> f64 {
        let total: f64 = self.classes.iter().map(|c| c.weight).sum();
        self.classes.iter().map(|c| c.weight / total * c.group_size as f64).sum()
    }
}

/// A client request. `service_us` is hidden from schedulers.
#[derive(Clone, Debug, PartialEq)]
pub struct Request {
    pub req_id: ReqId,
    /// Index within the dependency group (0 for ungrouped requests).
    pub member: u32,
    pub group_size: u32,
    pub class_tag: u32,
    pub priority: u32,
    pub locality: Option<u32>,
    pub service_us: f64,
    pub num_packets: u32,
    pub arrival: SimTime,
}

impl Request {
    pub fn client(&self) -> u32 {
        self.req_id.client
    }

    /// Packet types this request emits, in send order. Only the first packet of
    /// the first group member opens the request; everything else follows the
    /// mapping it installs.
    pub fn packet_types(&self) -> impl Iterator<Item = PacketType> + '_ {
        (0..self.num_packets).map(move |i| {
            if i == 0 && self.member == 0 {
                PacketType::Reqf
            } else {
                PacketType::Reqr
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PacketType {
    /// First packet of a request.
    Reqf,
    /// Remaining packets of a request.
    Reqr,
    /// Reply that releases the request's switch state.
    Rep,
    /// Reply sent while other members of the dependency group are still
    /// outstanding; the switch keeps the mapping.
    RepPending,
}

impl PacketType {
    pub fn is_reply(self) -> bool {
        matches!(self, PacketType::Rep | PacketType::RepPending)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endpoint {
    /// The rack's anycast address.
    Rack,
    Client(u32),
    Server(usize),
}

/// Unit carried through switch and servers.
#[derive(Clone, Debug, PartialEq)]
pub struct Packet {
    pub ptype: PacketType,
    pub req_id: ReqId,
    pub class_tag: u32,
    pub priority: u32,
    pub locality: Option<u32>,
    /// Present on replies only.
    pub load_report: Option<f64>,
    pub src: Endpoint,
    pub dst: Endpoint,
    /// Simulator handle of the request this packet belongs to.
    pub request: u64,
}

impl Packet {
    pub fn request(req: &Request, ptype: PacketType, handle: u64) -> Packet {
        debug_assert!(!ptype.is_reply());
        Packet {
            ptype,
            req_id: req.req_id,
            class_tag: req.class_tag,
            priority: req.priority,
            locality: req.locality,
            load_report: None,
            src: Endpoint::Client(req.client()),
            dst: Endpoint::Rack,
            request: handle,
        }
    }

    pub fn reply(req: &Request, ptype: PacketType, server: usize, load: f64, handle: u64) -> Packet {
        debug_assert!(ptype.is_reply());
        Packet {
            ptype,
            req_id: req.req_id,
            class_tag: req.class_tag,
            priority: req.priority,
            locality: req.locality,
            load_report: Some(load),
            src: Endpoint::Server(server),
            dst: Endpoint::Client(req.client()),
            request: handle,
        }
    }
}

/// Stateful request source: owns the arrival, mix and service streams and the
/// per-client sequence counters.
pub struct Generator {
    spec: WorkloadSpec,
    cumulative: Vec<f64>,
    next_seq: Vec<u64>,
    arrivals: SimRng,
    mix: SimRng,
    service: SimRng,
}

impl Generator {
    pub fn new(spec: WorkloadSpec, seed: u64) -> Result<Self, WorkloadError> {
        spec.validate()?;
        let total: f64 = spec.classes.iter().map(|c| c.weight).sum();
        let mut acc = 0.0;
        let cumulative = spec
            .classes
            .iter()
            .map(|c| {
                acc += c.weight / total;
                acc
            })
            .collect();
        Ok(Generator {
            next_seq: vec![0; spec.clients as usize],
            spec,
            cumulative,
            arrivals: rng_stream(seed, StreamId::Arrivals),
            mix: rng_stream(seed, StreamId::Mix),
            service: rng_stream(seed, StreamId::Service),
        })
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn next_gap(&mut self, rate: f64) -> Result<f64, WorkloadError> {
        next_arrival(rate, &mut self.arrivals)
    }

    fn pick_class(&mut self) -> usize {
        let u: f64 = self.mix.random();
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }

    /// Draws the client, class and service demand of one arrival at `now`.
    /// Returns `None` when the drawn class is outside its activity window; the
    /// draw still consumes the same random numbers so paired runs stay aligned.
    pub fn arrival(&mut self, now: SimTime) -> Option<Vec<Request>> {
        let client = self.mix.random_range(0..self.spec.clients);
        let idx = self.pick_class();
        let class = self.spec.classes[idx].clone();
        let services: Vec<f64> =
            (0..class.group_size).map(|_| class.service.sample(&mut self.service)).collect();
        if !class.active_at(now.as_us()) {
            return None;
        }
        Some(self.make_requests(client, &class, &services, now))
    }

    /// Materializes one arrival of `class` from `client`. A dependency group of
    /// size n yields n requests sharing one request id.
    pub fn make_requests(
        &mut self,
        client: u32,
        class: &ClassSpec,
        services: &[f64],
        now: SimTime,
    ) -> Vec<Request> {
        let seq = &mut self.next_seq[client as usize];
        let req_id = ReqId { client, seq: *seq };
        *seq += 1;
        services
            .iter()
            .enumerate()
            .map(|(member, &service_us)| Request {
                req_id,
                member: member as u32,
                group_size: class.group_size,
                class_tag: class.class_tag,
                priority: class.priority,
                locality: class.locality,
                service_us,
                num_packets: class.packets,
                arrival: now + member as f64 * class.member_gap_us,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn next_arrival_mean_matches_rate() {
        let mut rng = rng_stream(1, StreamId::Arrivals);
        let rate = 0.2;
        let n = 1_000_000;
        let mean: f64 = (0..n).map(|_| next_arrival(rate, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 1.0 / rate).abs() < 0.01 / rate, "mean {mean}");
    }

    #[test]
    fn zero_rate_rejected() {
        let mut rng = rng_stream(1, StreamId::Arrivals);
        assert_eq!(next_arrival(0.0, &mut rng), Err(WorkloadError::BadRate(0.0)));
    }

    #[test]
    fn fixed_seed_repeats_gap_sequence() {
        let mut a = rng_stream(5, StreamId::Arrivals);
        let mut b = rng_stream(5, StreamId::Arrivals);
        for _ in 0..100 {
            assert_eq!(next_arrival(1.0, &mut a).unwrap(), next_arrival(1.0, &mut b).unwrap());
        }
    }

    fn empirical_mean(d: &ServiceDistribution) -> f64 {
        let mut rng = rng_stream(2, StreamId::Service);
        let n = 1_000_000;
        (0..n).map(|_| d.sample(&mut rng)).sum::<f64>() / n as f64
    }

    #[test]
    fn exponential_service_mean() {
        let m = empirical_mean(&ServiceDistribution::exponential(50.0));
        assert!((m - 50.0).abs() < 1.0, "{m}");
    }

    #[test]
    fn bimodal_service_mean() {
        // 0.9 * 50 + 0.1 * 500
        let d = ServiceDistribution::bimodal(0.9, 50.0, 500.0);
        assert!((d.mean() - 95.0).abs() < 1e-9);
        let m = empirical_mean(&d);
        assert!((m - 95.0).abs() < 1.0, "{m}");
    }

    #[test]
    fn deterministic_is_constant() {
        let d = ServiceDistribution::deterministic(50.0);
        let mut rng = rng_stream(0, StreamId::Service);
        assert!((0..100).all(|_| d.sample(&mut rng) == 50.0));
    }

    #[test]
    fn probabilities_must_sum_to_one() {
        let d = ServiceDistribution::Bimodal { p1: 0.9, s1: 50.0, p2: 0.2, s2: 500.0 };
        assert!(matches!(d.validate(), Err(WorkloadError::ProbabilitySum(_))));
        let third = 1.0 / 3.0;
        let t = ServiceDistribution::Trimodal { p1: third, s1: 5.0, p2: third, s2: 50.0, p3: third, s3: 500.0 };
        assert!(t.validate().is_ok());
        assert!((t.mean() - 185.0).abs() < 1e-9);
    }

    #[test]
    fn single_class_always_tag_zero() {
        let mut g = Generator::new(WorkloadSpec::single(ServiceDistribution::exponential(50.0)), 3).unwrap();
        for i in 0..1000 {
            let reqs = g.arrival(SimTime::from_us(i as f64)).unwrap();
            assert_eq!(reqs.len(), 1);
            assert_eq!(reqs[0].class_tag, 0);
        }
    }

    #[test]
    fn get_scan_mix_frequencies() {
        let spec = WorkloadSpec {
            classes: vec![
                ClassSpec::new(0, 0.5, ServiceDistribution::deterministic(50.0)),
                ClassSpec::new(1, 0.5, ServiceDistribution::deterministic(740.0)),
            ],
            clients: 4,
            packet_gap_us: 1.0,
        };
        let mut g = Generator::new(spec, 11).unwrap();
        let n = 1_000_000;
        let scans = (0..n)
            .filter(|_| g.arrival(SimTime::ZERO).unwrap()[0].class_tag == 1)
            .count();
        let frac = scans as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn dependency_group_shares_req_id() {
        let mut class = ClassSpec::new(0, 1.0, ServiceDistribution::deterministic(10.0));
        class.group_size = 3;
        let spec = WorkloadSpec { classes: vec![class], clients: 1, packet_gap_us: 1.0 };
        let mut g = Generator::new(spec, 0).unwrap();
        let reqs = g.arrival(SimTime::ZERO).unwrap();
        assert_eq!(reqs.len(), 3);
        assert!(reqs.iter().all(|r| r.req_id == reqs[0].req_id && r.group_size == 3));
        let types: Vec<_> = reqs.iter().flat_map(|r| r.packet_types()).collect();
        assert_eq!(types, vec![PacketType::Reqf, PacketType::Reqr, PacketType::Reqr]);
    }

    #[test]
    fn multi_packet_request_emits_reqf_then_reqr() {
        let mut class = ClassSpec::new(0, 1.0, ServiceDistribution::deterministic(10.0));
        class.packets = 4;
        let spec = WorkloadSpec { classes: vec![class], clients: 1, packet_gap_us: 1.0 };
        let mut g = Generator::new(spec, 0).unwrap();
        let r = &g.arrival(SimTime::ZERO).unwrap()[0];
        let types: Vec<_> = r.packet_types().collect();
        assert_eq!(types[0], PacketType::Reqf);
        assert!(types[1..].iter().all(|t| *t == PacketType::Reqr));
        assert_eq!(types.len(), 4);
    }

    #[test]
    fn request_ids_unique_across_clients() {
        let mut spec = WorkloadSpec::single(ServiceDistribution::exponential(5.0));
        spec.clients = 7;
        let mut g = Generator::new(spec, 4).unwrap();
        let mut seen = HashSet::new();
        for _ in 0..50_000 {
            let r = &g.arrival(SimTime::ZERO).unwrap()[0];
            assert!(seen.insert(r.req_id.key()));
        }
    }

    #[test]
    fn reply_carries_load_and_request_does_not() {
        let mut g = Generator::new(WorkloadSpec::single(ServiceDistribution::deterministic(1.0)), 0).unwrap();
        let r = g.arrival(SimTime::ZERO).unwrap().remove(0);
        let p = Packet::request(&r, PacketType::Reqf, 0);
        assert!(p.load_report.is_none());
        let rep = Packet::reply(&r, PacketType::Rep, 2, 3.0, 0);
        assert_eq!(rep.load_report, Some(3.0));
    }
}

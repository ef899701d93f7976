//! Top-of-rack switch: per-request server selection, request affinity through
//! the request table, and load tracking from reply piggybacks.

pub mod load;
pub mod pipeline;
pub mod reqtable;

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index;
use rand::Rng;

use crate::server::QueueMode;
use crate::sim::{mix64, rng_stream, SimRng, SimTime, StreamId};
use crate::workload::{Endpoint, Packet, PacketType};

pub use load::{LoadTable, MinOnly, TrackingConfig, TrackingKind};
pub use pipeline::{stage_cost, MinLayout, PipelineBudget, PipelineError};
pub use reqtable::{InsertOutcome, ReqTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedulingPolicy {
    /// Uniform over the eligible set, keyed by a hash of the request id.
    HashRandom,
    /// Uniform over the eligible set from the sampling stream.
    Random,
    /// Cyclic over the eligible set, one cursor per queue key and locality.
    RoundRobin,
    /// Least-loaded eligible server.
    Shortest,
    /// Least-loaded of `k` distinct eligible servers drawn uniformly.
    Sampling { k: usize },
    /// Least-loaded server with fewer than `bound` outstanding requests;
    /// requests wait at the switch when every server is at the bound.
    Jbsq { bound: u32 },
}

impl SchedulingPolicy {
    fn uses_loads(self) -> bool {
        matches!(self, SchedulingPolicy::Shortest | SchedulingPolicy::Sampling { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReqTableConfig {
    pub stages: usize,
    pub slots_per_stage: usize,
    /// Mappings older than this are swept; `None` disables the sweep.
    pub ttl_us: Option<f64>,
    pub sweep_period_us: f64,
}

impl Default for ReqTableConfig {
    fn default() -> Self {
        ReqTableConfig { stages: 4, slots_per_stage: 16384, ttl_us: Some(100_000.0), sweep_period_us: 50_000.0 }
    }
}

#[derive(Clone, Debug)]
pub struct SwitchConfig {
    pub policy: SchedulingPolicy,
    pub tracking: TrackingConfig,
    pub reqtable: ReqTableConfig,
    pub queue_mode: QueueMode,
    pub n_keys: usize,
}

/// Where a packet goes after the switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Forward {
    Server(usize),
    Client(u32),
    /// Parked in the JBSQ queue; released later through [`Switch::take_released`].
    Held,
    Dropped,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SwitchStats {
    /// First packets that found no free table slot.
    pub fallback_inserts: u64,
    /// Follow-up packets whose mapping was missing.
    pub fallback_reads: u64,
    pub dropped_packets: u64,
    pub swept_mappings: u64,
}

struct Held {
    key: usize,
    locality: Option<u32>,
    packets: Vec<Packet>,
}

/// Returns the eligible server with the lowest load among `candidates`,
/// breaking ties by the lowest server id.
pub fn argmin_load(candidates: impl IntoIterator<Item = usize>, load: impl Fn(usize) -> f64) -> Option<usize> {
    candidates
        .into_iter()
        .map(|s| (s, load(s)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(s, _)| s)
}

/// Power-of-k choice: draws `k` distinct servers from `eligible` and returns
/// the least loaded one.
pub fn sample_min<R: Rng + ?Sized>(eligible: &[usize], k: usize, load: impl Fn(usize) -> f64, rng: &mut R) -> usize {
    let k = k.clamp(1, eligible.len());
    let picks = index::sample(rng, eligible.len(), k);
    argmin_load(picks.iter().map(|i| eligible[i]), load).expect("non-empty sample")
}

pub struct Switch {
    cfg: SwitchConfig,
    loads: LoadTable,
    min_only: Vec<MinOnly>,
    table: ReqTable,
    rr: BTreeMap<(usize, Option<u32>), usize>,
    jbsq_outstanding: Vec<u32>,
    held: VecDeque<Held>,
    released: Vec<(usize, Packet)>,
    /// Servers that can still receive fallback traffic; cleared only once a
    /// crashed server has been purged.
    reachable: Vec<bool>,
    locality_sets: BTreeMap<u32, Vec<usize>>,
    failed_until: Option<SimTime>,
    /// Time of the latest switch operation.
    clock: SimTime,
    hash_seed: u64,
    sampling: SimRng,
    counting: SimRng,
    pub stats: SwitchStats,
}

impl Switch {
    pub fn new(cfg: SwitchConfig, active: Vec<bool>, locality_sets: BTreeMap<u32, Vec<usize>>, seed: u64) -> Self {
        let n = active.len();
        let mut hashing = rng_stream(seed, StreamId::Hashing);
        let table = ReqTable::with_seed(cfg.reqtable.stages, cfg.reqtable.slots_per_stage, hashing.random());
        Switch {
            loads: LoadTable::new(active, cfg.n_keys, locality_sets.clone()),
            min_only: vec![MinOnly::default(); cfg.n_keys.max(1)],
            table,
            rr: BTreeMap::new(),
            jbsq_outstanding: vec![0; n],
            held: VecDeque::new(),
            released: Vec::new(),
            reachable: vec![true; n],
            locality_sets,
            failed_until: None,
            clock: SimTime::ZERO,
            hash_seed: hashing.random(),
            sampling: rng_stream(seed, StreamId::Sampling),
            counting: rng_stream(seed, StreamId::Counting),
            stats: SwitchStats::default(),
            cfg,
        }
    }

    pub fn loads(&self) -> &LoadTable {
        &self.loads
    }

    pub fn table(&self) -> &ReqTable {
        &self.table
    }

    pub fn min_only(&self, key: usize) -> MinOnly {
        self.min_only[key.min(self.min_only.len() - 1)]
    }

    pub fn jbsq_outstanding(&self, server: usize) -> u32 {
        self.jbsq_outstanding[server]
    }

    pub fn held_requests(&self) -> usize {
        self.held.len()
    }

    pub fn is_failed(&self, now: SimTime) -> bool {
        self.failed_until.is_some_and(|t| now < t)
    }

    pub fn queue_key(&self, pkt: &Packet) -> usize {
        self.cfg.queue_mode.key(pkt.class_tag, pkt.priority, pkt.req_id.client)
    }

    fn hash(&self, key: u64) -> u64 {
        mix64(key ^ self.hash_seed)
    }

    /// Applies one packet to the switch state and returns its next hop.
    pub fn process(&mut self, pkt: &Packet, now: SimTime) -> Forward {
        if self.is_failed(now) {
            self.stats.dropped_packets += 1;
            return Forward::Dropped;
        }
        self.clock = now;
        let key = self.queue_key(pkt);
        let req_key = pkt.req_id.key();
        match pkt.ptype {
            PacketType::Reqf => {
                let jbsq = matches!(self.cfg.policy, SchedulingPolicy::Jbsq { .. });
                // Held requests leave in arrival order.
                if jbsq && !self.held.is_empty() {
                    self.hold(key, pkt);
                    return Forward::Held;
                }
                match self.select_server(key, pkt.locality, req_key) {
                    Some(s) => Forward::Server(self.admit(key, pkt, s, now)),
                    None if jbsq && !self.loads.eligible(pkt.locality).is_empty() => {
                        self.hold(key, pkt);
                        Forward::Held
                    }
                    None => {
                        self.stats.dropped_packets += 1;
                        Forward::Dropped
                    }
                }
            }
            PacketType::Reqr => {
                if let Some(h) = self.held.iter_mut().find(|h| h.packets[0].req_id == pkt.req_id) {
                    h.packets.push(pkt.clone());
                    return Forward::Held;
                }
                match self.table.read(req_key) {
                    Some(s) => Forward::Server(s),
                    None => {
                        self.stats.fallback_reads += 1;
                        self.fallback_server(req_key, pkt.locality).map_or(Forward::Dropped, Forward::Server)
                    }
                }
            }
            PacketType::Rep | PacketType::RepPending => {
                let Endpoint::Server(src) = pkt.src else {
                    panic!("reply without a server source");
                };
                if pkt.ptype == PacketType::Rep {
                    self.table.remove(req_key);
                    self.on_clearing_reply(src, key);
                }
                if let Some(report) = pkt.load_report {
                    self.apply_load_report(src, key, report);
                }
                Forward::Client(pkt.req_id.client)
            }
        }
    }

    fn hold(&mut self, key: usize, pkt: &Packet) {
        self.held.push_back(Held { key, locality: pkt.locality, packets: vec![pkt.clone()] });
    }

    /// Records the mapping for a newly scheduled request and returns the
    /// server that actually receives it.
    fn admit(&mut self, key: usize, pkt: &Packet, chosen: usize, now: SimTime) -> usize {
        let req_key = pkt.req_id.key();
        let target = match self.table.insert(req_key, chosen, now) {
            InsertOutcome::Stored { .. } => chosen,
            InsertOutcome::Fallback => {
                self.stats.fallback_inserts += 1;
                self.fallback_server(req_key, pkt.locality).unwrap_or(chosen)
            }
        };
        if self.cfg.tracking.kind == TrackingKind::Proactive {
            let mut delta = 1.0;
            if self.cfg.tracking.double_count_prob > 0.0
                && self.counting.random::<f64>() < self.cfg.tracking.double_count_prob
            {
                delta += 1.0;
            }
            self.loads.add(target, key, delta);
        }
        if matches!(self.cfg.policy, SchedulingPolicy::Jbsq { .. }) {
            self.jbsq_outstanding[target] += 1;
        }
        target
    }

    fn on_clearing_reply(&mut self, src: usize, key: usize) {
        if self.cfg.tracking.kind == TrackingKind::Proactive {
            let missed = self.cfg.tracking.decrement_miss_prob > 0.0
                && self.counting.random::<f64>() < self.cfg.tracking.decrement_miss_prob;
            if !missed {
                self.loads.add(src, key, -1.0);
            }
        }
        if matches!(self.cfg.policy, SchedulingPolicy::Jbsq { .. }) {
            self.jbsq_outstanding[src] = self.jbsq_outstanding[src].saturating_sub(1);
            self.release_held();
        }
    }

    /// Moves head-of-line held requests to servers while slots are free.
    fn release_held(&mut self) {
        while let Some(head) = self.held.front() {
            let (key, locality) = (head.key, head.locality);
            let req_key = head.packets[0].req_id.key();
            let Some(s) = self.select_server(key, locality, req_key) else { break };
            let held = self.held.pop_front().expect("head exists");
            let now = self.clock;
            let target = self.admit(key, &held.packets[0], s, now);
            self.released.extend(held.packets.into_iter().map(|p| (target, p)));
        }
    }

    /// Packets released from the JBSQ queue since the last call.
    pub fn take_released(&mut self) -> Vec<(usize, Packet)> {
        std::mem::take(&mut self.released)
    }

    pub fn apply_load_report(&mut self, server: usize, key: usize, report: f64) {
        match self.cfg.tracking.kind {
            TrackingKind::Int1 | TrackingKind::Int3 => self.loads.set(server, key, report),
            TrackingKind::Int2 => {
                let k = key.min(self.min_only.len() - 1);
                self.min_only[k].update(server, report);
            }
            TrackingKind::Proactive => {}
        }
    }

    /// Chooses a server for a new request; `None` when no server is eligible
    /// or every JBSQ slot is taken.
    pub fn select_server(&mut self, key: usize, locality: Option<u32>, req_key: u64) -> Option<usize> {
        let eligible = self.loads.eligible(locality);
        if eligible.is_empty() {
            return None;
        }
        let policy = self.cfg.policy;
        if policy.uses_loads() && self.cfg.tracking.kind == TrackingKind::Int2 {
            let k = key.min(self.min_only.len() - 1);
            return Some(match self.min_only[k].0 {
                Some((s, _)) if eligible.contains(&s) => s,
                _ => eligible[self.sampling.random_range(0..eligible.len())],
            });
        }
        let loads = &self.loads;
        let choice = match policy {
            SchedulingPolicy::HashRandom => eligible[(self.hash(req_key) % eligible.len() as u64) as usize],
            SchedulingPolicy::Random => eligible[self.sampling.random_range(0..eligible.len())],
            SchedulingPolicy::RoundRobin => {
                let cursor = self.rr.entry((key, locality)).or_insert(0);
                let s = eligible[*cursor % eligible.len()];
                *cursor = cursor.wrapping_add(1);
                s
            }
            SchedulingPolicy::Shortest => argmin_load(eligible.iter().copied(), |s| loads.load(s, key))?,
            SchedulingPolicy::Sampling { k } => sample_min(eligible, k, |s| loads.load(s, key), &mut self.sampling),
            SchedulingPolicy::Jbsq { bound } => {
                let outstanding = &self.jbsq_outstanding;
                argmin_load(eligible.iter().copied().filter(|&s| outstanding[s] < bound), |s| {
                    outstanding[s] as f64
                })?
            }
        };
        Some(choice)
    }

    /// Hash-based server for requests without a table entry. Hashes over the
    /// physical server list so the answer does not move when servers join or
    /// leave the active set.
    pub fn fallback_server(&self, req_key: u64, locality: Option<u32>) -> Option<usize> {
        let all: Vec<usize>;
        let set: &[usize] = match locality.and_then(|l| self.locality_sets.get(&l)) {
            Some(s) => s,
            None => {
                all = (0..self.reachable.len()).collect();
                &all
            }
        };
        if set.is_empty() {
            return None;
        }
        let start = (self.hash(req_key) % set.len() as u64) as usize;
        (0..set.len()).map(|i| set[(start + i) % set.len()]).find(|&s| self.reachable[s])
    }

    pub fn fail(&mut self, now: SimTime, duration_us: f64) -> Vec<u64> {
        self.failed_until = Some(now + duration_us);
        self.held.drain(..).map(|h| h.packets[0].request).collect()
    }

    /// Comes back with empty state after a failure.
    pub fn recover(&mut self) {
        self.failed_until = None;
        self.table.clear();
        self.loads.reset();
        self.min_only.iter_mut().for_each(|m| *m = MinOnly::default());
        self.jbsq_outstanding.iter_mut().for_each(|o| *o = 0);
        self.rr.clear();
    }

    pub fn add_server(&mut self, server: usize, now: SimTime) {
        self.clock = now;
        self.loads.set_active(server, true);
        self.reachable[server] = true;
        self.release_held();
    }

    /// Removes a server from new selections; existing mappings are kept.
    pub fn remove_server(&mut self, server: usize) {
        self.loads.set_active(server, false);
    }

    /// Control-plane cleanup after a server crash.
    pub fn purge_server(&mut self, server: usize) -> usize {
        self.reachable[server] = false;
        self.jbsq_outstanding[server] = 0;
        for key in 0..self.loads.keys() {
            self.loads.set(server, key, 0.0);
        }
        for m in &mut self.min_only {
            if m.0.is_some_and(|(s, _)| s == server) {
                *m = MinOnly::default();
            }
        }
        self.table.purge_server(server)
    }

    pub fn sweep(&mut self, now: SimTime) -> usize {
        let Some(ttl) = self.cfg.reqtable.ttl_us else { return 0 };
        let cutoff = SimTime::from_us((now.as_us() - ttl).max(0.0));
        let n = self.table.purge_older_than(cutoff);
        self.stats.swept_mappings += n as u64;
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::ReqId;

    fn cfg(policy: SchedulingPolicy, tracking: TrackingKind) -> SwitchConfig {
        SwitchConfig {
            policy,
            tracking: TrackingConfig::new(tracking),
            reqtable: ReqTableConfig::default(),
            queue_mode: QueueMode::Single,
            n_keys: 1,
        }
    }

    fn switch(n: usize, policy: SchedulingPolicy, tracking: TrackingKind) -> Switch {
        Switch::new(cfg(policy, tracking), vec![true; n], BTreeMap::new(), 1)
    }

    fn pkt(ptype: PacketType, seq: u64) -> Packet {
        Packet {
            ptype,
            req_id: ReqId { client: 0, seq },
            class_tag: 0,
            priority: 0,
            locality: None,
            load_report: None,
            src: Endpoint::Client(0),
            dst: Endpoint::Rack,
            request: seq,
        }
    }

    fn rep(seq: u64, server: usize, load: f64) -> Packet {
        Packet {
            load_report: Some(load),
            src: Endpoint::Server(server),
            dst: Endpoint::Client(0),
            ..pkt(PacketType::Rep, seq)
        }
    }

    fn with_loads(s: &mut Switch, loads: &[f64]) {
        for (i, &l) in loads.iter().enumerate() {
            s.apply_load_report(i, 0, l);
        }
    }

    const T: SimTime = SimTime::ZERO;

    #[test]
    fn fresh_request_goes_to_sampled_min_and_is_recorded() {
        let mut s = switch(2, SchedulingPolicy::Sampling { k: 2 }, TrackingKind::Int1);
        assert_eq!(s.process(&pkt(PacketType::Reqf, 1), T), Forward::Server(0));
        assert_eq!(s.table().read(ReqId { client: 0, seq: 1 }.key()), Some(0));
    }

    #[test]
    fn follow_up_packet_ignores_loads() {
        let mut s = switch(8, SchedulingPolicy::Shortest, TrackingKind::Int1);
        with_loads(&mut s, &[0.0, 0.0, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0]);
        s.table.insert(ReqId { client: 0, seq: 3 }.key(), 5, T);
        assert_eq!(s.process(&pkt(PacketType::Reqr, 3), T), Forward::Server(5));
    }

    #[test]
    fn reply_clears_mapping_and_sets_load() {
        let mut s = switch(4, SchedulingPolicy::Shortest, TrackingKind::Int1);
        let Forward::Server(dst) = s.process(&pkt(PacketType::Reqf, 1), T) else { panic!() };
        assert_eq!(s.process(&rep(1, dst, 3.0), T), Forward::Client(0));
        assert_eq!(s.table().read(ReqId { client: 0, seq: 1 }.key()), None);
        assert_eq!(s.loads().load(dst, 0), 3.0);
        assert_eq!(s.table().occupancy(), 0);
    }

    #[test]
    fn int1_report_overwrites() {
        let mut s = switch(4, SchedulingPolicy::Shortest, TrackingKind::Int1);
        s.apply_load_report(2, 0, 11.0);
        s.apply_load_report(2, 0, 7.0);
        assert_eq!(s.loads().load(2, 0), 7.0);
    }

    #[test]
    fn pending_reply_keeps_mapping() {
        let mut s = switch(4, SchedulingPolicy::Shortest, TrackingKind::Int1);
        let Forward::Server(dst) = s.process(&pkt(PacketType::Reqf, 1), T) else { panic!() };
        let pending = Packet { ptype: PacketType::RepPending, ..rep(1, dst, 1.0) };
        s.process(&pending, T);
        assert_eq!(s.process(&pkt(PacketType::Reqr, 1), T), Forward::Server(dst));
    }

    #[test]
    fn shortest_breaks_ties_by_lowest_index() {
        let mut s = switch(5, SchedulingPolicy::Shortest, TrackingKind::Int1);
        with_loads(&mut s, &[3.0, 1.0, 4.0, 1.0, 5.0]);
        assert_eq!(s.select_server(0, None, 0), Some(1));
    }

    #[test]
    fn sampling_matches_replayed_draws() {
        let loads = [3.0, 1.0, 4.0, 1.0, 5.0];
        assert_eq!(argmin_load([0, 2], |i| loads[i]), Some(0));
        let mut s = switch(5, SchedulingPolicy::Sampling { k: 2 }, TrackingKind::Int1);
        with_loads(&mut s, &loads);
        let mut replay = rng_stream(1, StreamId::Sampling);
        for _ in 0..200 {
            let picks = index::sample(&mut replay, 5, 2).into_vec();
            let expect = if loads[picks[0]] < loads[picks[1]]
                || (loads[picks[0]] == loads[picks[1]] && picks[0] < picks[1])
            {
                picks[0]
            } else {
                picks[1]
            };
            assert_eq!(s.select_server(0, None, 0), Some(expect));
        }
    }

    #[test]
    fn full_sampling_equals_shortest() {
        let mut a = switch(6, SchedulingPolicy::Sampling { k: 6 }, TrackingKind::Int1);
        let mut b = switch(6, SchedulingPolicy::Shortest, TrackingKind::Int1);
        let mut rng = rng_stream(3, StreamId::Mix);
        for _ in 0..500 {
            let loads: Vec<f64> = (0..6).map(|_| rng.random_range(0..4) as f64).collect();
            with_loads(&mut a, &loads);
            with_loads(&mut b, &loads);
            assert_eq!(a.select_server(0, None, 0), b.select_server(0, None, 0));
        }
    }

    #[test]
    fn round_robin_cycles() {
        let mut s = switch(3, SchedulingPolicy::RoundRobin, TrackingKind::Int1);
        let picks: Vec<_> = (0..6).map(|i| s.select_server(0, None, i).unwrap()).collect();
        assert_eq!(picks, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn locality_restricts_choice() {
        let sets = BTreeMap::from([(1, vec![0, 1, 2, 3])]);
        let mut s = Switch::new(cfg(SchedulingPolicy::Random, TrackingKind::Int1), vec![true; 8], sets, 4);
        for i in 0..1000 {
            assert!(s.select_server(0, Some(1), i).unwrap() < 4);
        }
    }

    #[test]
    fn proactive_counts_outstanding_exactly() {
        let mut s = switch(4, SchedulingPolicy::Sampling { k: 2 }, TrackingKind::Proactive);
        let mut rng = rng_stream(8, StreamId::Mix);
        let mut live: Vec<(u64, usize)> = Vec::new();
        let mut truth = [0u32; 4];
        for seq in 0..5000u64 {
            if live.is_empty() || rng.random::<f64>() < 0.55 {
                let Forward::Server(d) = s.process(&pkt(PacketType::Reqf, seq), T) else { panic!() };
                truth[d] += 1;
                live.push((seq, d));
            } else {
                let (r, d) = live.swap_remove(rng.random_range(0..live.len()));
                s.process(&rep(r, d, 99.0), T);
                truth[d] -= 1;
            }
            for i in 0..4 {
                assert_eq!(s.loads().load(i, 0), truth[i] as f64);
            }
        }
    }

    #[test]
    fn proactive_missed_decrements_drift_upward() {
        let mut c = cfg(SchedulingPolicy::Sampling { k: 2 }, TrackingKind::Proactive);
        c.tracking.decrement_miss_prob = 0.01;
        let mut s = Switch::new(c, vec![true; 4], BTreeMap::new(), 2);
        for seq in 0..100_000u64 {
            let Forward::Server(d) = s.process(&pkt(PacketType::Reqf, seq), T) else { panic!() };
            s.process(&rep(seq, d, 0.0), T);
        }
        let drift: f64 = (0..4).map(|i| s.loads().load(i, 0)).sum();
        assert!(drift > 500.0 && drift < 1500.0, "drift {drift}");
    }

    #[test]
    fn jbsq_holds_then_releases_in_order() {
        let mut s = switch(2, SchedulingPolicy::Jbsq { bound: 1 }, TrackingKind::Int1);
        assert_eq!(s.process(&pkt(PacketType::Reqf, 0), T), Forward::Server(0));
        assert_eq!(s.process(&pkt(PacketType::Reqf, 1), T), Forward::Server(1));
        assert_eq!(s.process(&pkt(PacketType::Reqf, 2), T), Forward::Held);
        assert_eq!(s.process(&pkt(PacketType::Reqr, 2), T), Forward::Held);
        assert_eq!(s.process(&pkt(PacketType::Reqf, 3), T), Forward::Held);
        s.process(&rep(1, 1, 0.0), T);
        let out = s.take_released();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|(d, p)| *d == 1 && p.req_id.seq == 2));
        assert_eq!(s.held_requests(), 1);
        assert_eq!(s.jbsq_outstanding(1), 1);
    }

    #[test]
    fn failure_drops_and_recovery_forgets() {
        let mut s = switch(4, SchedulingPolicy::Shortest, TrackingKind::Int1);
        s.process(&pkt(PacketType::Reqf, 0), T);
        s.apply_load_report(3, 0, 2.0);
        s.fail(T, 100.0);
        assert_eq!(s.process(&pkt(PacketType::Reqf, 1), SimTime::from_us(50.0)), Forward::Dropped);
        s.recover();
        assert_eq!(s.table().occupancy(), 0);
        assert_eq!(s.loads().load(3, 0), 0.0);
        // Lost mapping: the follow-up packet falls back to the hash.
        let out = s.process(&pkt(PacketType::Reqr, 0), SimTime::from_us(150.0));
        assert!(matches!(out, Forward::Server(_)));
        assert_eq!(s.stats.fallback_reads, 1);
    }

    #[test]
    fn fallback_requests_keep_affinity() {
        let mut c = cfg(SchedulingPolicy::Shortest, TrackingKind::Int1);
        c.reqtable = ReqTableConfig { stages: 1, slots_per_stage: 1, ..ReqTableConfig::default() };
        let mut s = Switch::new(c, vec![true; 8], BTreeMap::new(), 9);
        s.process(&pkt(PacketType::Reqf, 0), T);
        for seq in 1..50 {
            let Forward::Server(first) = s.process(&pkt(PacketType::Reqf, seq), T) else { panic!() };
            s.remove_server((seq % 8) as usize);
            assert_eq!(s.process(&pkt(PacketType::Reqr, seq), T), Forward::Server(first));
            s.add_server((seq % 8) as usize, T);
        }
        assert_eq!(s.stats.fallback_inserts, 49);
    }

    #[test]
    fn planned_removal_keeps_existing_mappings() {
        let mut s = switch(4, SchedulingPolicy::Shortest, TrackingKind::Int1);
        let Forward::Server(d) = s.process(&pkt(PacketType::Reqf, 0), T) else { panic!() };
        s.remove_server(d);
        assert_eq!(s.process(&pkt(PacketType::Reqr, 0), T), Forward::Server(d));
        for seq in 1..20 {
            assert_ne!(s.process(&pkt(PacketType::Reqf, seq), T), Forward::Server(d));
        }
    }

    #[test]
    fn purge_redirects_fallback_away_from_dead_server() {
        let mut s = switch(4, SchedulingPolicy::Shortest, TrackingKind::Int1);
        s.remove_server(2);
        s.purge_server(2);
        for key in 0..1000 {
            assert_ne!(s.fallback_server(key, None), Some(2));
        }
    }

    #[test]
    fn int2_follows_the_minimum() {
        let mut s = switch(4, SchedulingPolicy::Shortest, TrackingKind::Int2);
        s.apply_load_report(2, 0, 1.0);
        assert_eq!(s.select_server(0, None, 0), Some(2));
        s.apply_load_report(0, 0, 0.0);
        assert_eq!(s.select_server(0, None, 0), Some(0));
    }
}

//! The rack: clients, one ToR switch and a set of servers driven by a single
//! event loop.

use std::collections::BTreeMap;

use rand::Rng;
use slab::Slab;
use thiserror::Error;

use crate::analysis::metrics::{MetricsRecord, QueueSamples, Timeline};
use crate::baselines::{pooled_workers, ClientView};
use crate::server::{IntraPolicy, Job, LoadUnit, QueueMode, ServerState, Timer};
use crate::sim::{mix64, rng_stream, EventQueue, SimRng, SimTime, StreamId};
use crate::switch::{Forward, ReqTableConfig, SchedulingPolicy, Switch, SwitchConfig, TrackingConfig, TrackingKind};
use crate::workload::{Endpoint, Generator, Packet, PacketType, ReqId, Request, WorkloadError, WorkloadSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkConfig {
    pub client_switch_us: f64,
    pub switch_server_us: f64,
    /// Traversal latency added to every packet crossing the switch.
    pub switch_latency_us: f64,
    /// Probability that a reply is lost between server and switch.
    pub reply_loss_prob: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { client_switch_us: 1.0, switch_server_us: 1.0, switch_latency_us: 1.0, reply_loss_prob: 0.0 }
    }
}

impl NetworkConfig {
    pub fn zero() -> Self {
        NetworkConfig { client_switch_us: 0.0, switch_server_us: 0.0, switch_latency_us: 0.0, reply_loss_prob: 0.0 }
    }
}

/// Who picks the server for a new request.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dispatch {
    Switch(SchedulingPolicy),
    /// One rack-wide queue over all workers.
    Global,
    /// Each client runs power-of-k over its own load estimates.
    Client { k: usize, local_increment: bool },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    SwitchFail { duration_us: f64 },
    AddServer { server: usize },
    /// A planned removal drains; an unplanned one crashes the server.
    RemoveServer { server: usize, planned: bool },
    SetLoad { load_fraction: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedFault {
    pub at_us: f64,
    pub fault: Fault,
}

/// Explicit arrival used instead of the Poisson source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceArrival {
    pub at_us: f64,
    /// Index into the workload's class list.
    pub class: usize,
    pub client: u32,
    pub service_us: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Workers per physical server.
    pub workers: Vec<u32>,
    pub initial_active: Vec<bool>,
    pub locality_sets: BTreeMap<u32, Vec<usize>>,
    pub network: NetworkConfig,
    pub workload: WorkloadSpec,
    pub dispatch: Dispatch,
    pub tracking: TrackingConfig,
    pub reqtable: ReqTableConfig,
    pub intra: IntraPolicy,
    pub context_switch_us: f64,
    /// Offered load as a fraction of the initially active worker capacity.
    pub load_fraction: f64,
    /// Requests in the measurement window.
    pub requests: u64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub faults: Vec<TimedFault>,
    pub control_plane_delay_us: f64,
    pub timeline_bucket_us: Option<f64>,
    pub sample_queues: bool,
    pub trace: Option<Vec<TraceArrival>>,
    /// After arrivals stop, keep running at most this many window lengths to
    /// let measured requests finish.
    pub drain_factor: f64,
}

impl RunConfig {
    /// `servers` identical servers behind a switch with 1 µs hops and INT1.
    pub fn new(servers: usize, workers: u32, workload: WorkloadSpec, dispatch: Dispatch, intra: IntraPolicy) -> Self {
        RunConfig {
            workers: vec![workers; servers],
            initial_active: vec![true; servers],
            locality_sets: BTreeMap::new(),
            network: NetworkConfig::default(),
            workload,
            dispatch,
            tracking: TrackingConfig::new(TrackingKind::Int1),
            reqtable: ReqTableConfig::default(),
            intra,
            context_switch_us: 0.5,
            load_fraction: 0.5,
            requests: 100_000,
            warmup_fraction: 0.1,
            seed: 1,
            faults: Vec::new(),
            control_plane_delay_us: 1000.0,
            timeline_bucket_us: None,
            sample_queues: false,
            trace: None,
            drain_factor: 1.0,
        }
    }

    pub fn servers(&self) -> usize {
        self.workers.len()
    }

    /// Worker capacity of the servers active at time zero.
    pub fn capacity(&self) -> usize {
        pooled_workers(&self.workers, &self.initial_active)
    }

    /// Arrival events per µs that put the rack at `load_fraction`.
    pub fn arrival_rate(&self, load_fraction: f64) -> f64 {
        load_fraction * self.capacity() as f64 / self.workload.mean_service()
    }

    fn queue_mode(&self) -> QueueMode {
        self.intra.queue_mode()
    }

    fn n_keys(&self) -> usize {
        let classes = &self.workload.classes;
        match self.queue_mode() {
            QueueMode::Single => 1,
            QueueMode::PerClass => classes.iter().map(|c| c.class_tag as usize + 1).max().unwrap_or(1),
            QueueMode::PerPriority => classes.iter().map(|c| c.priority as usize + 1).max().unwrap_or(1),
            QueueMode::PerClient => self.workload.clients as usize,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let n = self.servers();
        let bad = |m: String| Err(RunError::Invalid(m));
        self.workload.validate()?;
        if n == 0 || self.workers.contains(&0) {
            return bad("every server needs at least one worker".into());
        }
        if self.initial_active.len() != n {
            return bad(format!("initial_active lists {} servers, expected {n}", self.initial_active.len()));
        }
        if self.capacity() == 0 {
            return bad("no server is active at start".into());
        }
        if !(self.load_fraction >= 0.0 && self.load_fraction.is_finite()) {
            return bad(format!("load fraction {} is invalid", self.load_fraction));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup fraction {} must be in [0, 1)", self.warmup_fraction));
        }
        if !(0.0..=1.0).contains(&self.network.reply_loss_prob) {
            return bad("reply loss probability must be in [0, 1]".into());
        }
        let delays = [self.network.client_switch_us, self.network.switch_server_us, self.network.switch_latency_us];
        if delays.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return bad("network delays must be non-negative".into());
        }
        self.intra.validate().map_err(RunError::Invalid)?;
        for (l, set) in &self.locality_sets {
            if set.is_empty() || set.iter().any(|&s| s >= n) {
                return bad(format!("locality set {l} is empty or names an unknown server"));
            }
        }
        for c in &self.workload.classes {
            if let Some(l) = c.locality {
                if !self.locality_sets.contains_key(&l) {
                    return bad(format!("class {} uses undeclared locality set {l}", c.class_tag));
                }
            }
        }
        match self.dispatch {
            Dispatch::Global => {
                if self.workload.classes.iter().any(|c| c.locality.is_some()) {
                    return bad("global dispatch has no notion of locality".into());
                }
                if self.faults.iter().any(|f| !matches!(f.fault, Fault::SetLoad { .. })) {
                    return bad("global dispatch supports only set-load events".into());
                }
            }
            Dispatch::Client { k, .. } | Dispatch::Switch(SchedulingPolicy::Sampling { k }) => {
                if k == 0 || k > n {
                    return bad(format!("sampling k = {k} must be between 1 and the server count {n}"));
                }
            }
            Dispatch::Switch(SchedulingPolicy::Jbsq { bound: 0 }) => return bad("JBSQ bound must be at least 1".into()),
            Dispatch::Switch(_) => {}
        }
        for f in &self.faults {
            match f.fault {
                Fault::AddServer { server } | Fault::RemoveServer { server, .. } if server >= n => {
                    return bad(format!("fault names unknown server {server}"));
                }
                Fault::SwitchFail { duration_us } if !(duration_us > 0.0) => {
                    return bad("switch failure needs a positive duration".into());
                }
                Fault::SetLoad { load_fraction } if !(load_fraction >= 0.0) => {
                    return bad("set-load needs a non-negative load".into());
                }
                _ => {}
            }
            if !(f.at_us >= 0.0 && f.at_us.is_finite()) {
                return bad(format!("fault time {} is invalid", f.at_us));
            }
        }
        if let Some(trace) = &self.trace {
            for a in trace {
                if a.class >= self.workload.classes.len() || a.client >= self.workload.clients || !(a.service_us > 0.0) {
                    return bad("trace entry references an unknown class or client".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RunError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("invalid run configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Control {
    SwitchRecover,
    PurgeServer(usize),
}

#[derive(Clone, Debug)]
enum Event {
    RequestArrival,
    TraceArrival(usize),
    PacketArriveAtSwitch(Packet),
    PacketArriveAtServer { server: usize, packet: Packet },
    QuantumExpire { server: usize, worker: usize, epoch: u64 },
    RequestComplete { server: usize, worker: usize, epoch: u64 },
    ReplyArriveAtSwitch(Packet),
    ReplyArriveAtClient(Packet),
    FaultInject(Fault),
    Reconfigure(Control),
    SamplingTick,
    ControlPlaneSweep,
}

impl Event {
    fn tag(&self) -> u64 {
        match self {
            Event::RequestArrival => 1,
            Event::TraceArrival(_) => 2,
            Event::PacketArriveAtSwitch(_) => 3,
            Event::PacketArriveAtServer { .. } => 4,
            Event::QuantumExpire { .. } => 5,
            Event::RequestComplete { .. } => 6,
            Event::ReplyArriveAtSwitch(_) => 7,
            Event::ReplyArriveAtClient(_) => 8,
            Event::FaultInject(_) => 9,
            Event::Reconfigure(_) => 10,
            Event::SamplingTick => 11,
            Event::ControlPlaneSweep => 12,
        }
    }
}

struct RequestState {
    uid: u32,
    req: Request,
    key: usize,
    server: Option<usize>,
    delivered: u32,
    violated: bool,
    measured: bool,
}

/// First-packet decision of one request, for trace comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decision {
    pub req_id: ReqId,
    pub server: usize,
}

/// One request packet reaching a server.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub req_id: ReqId,
    pub member: u32,
    pub class_tag: u32,
    pub server: usize,
}

/// One finished request, for per-request comparisons.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Completion {
    pub req_id: ReqId,
    pub member: u32,
    pub server: usize,
    pub arrival_us: f64,
    pub completion_us: f64,
}

pub struct RackSim {
    cfg: RunConfig,
    events: EventQueue<Event>,
    generator: Generator,
    rate: f64,
    switch: Switch,
    servers: Vec<ServerState>,
    clients: Vec<ClientView>,
    client_rng: SimRng,
    loss_rng: SimRng,
    monitor_rng: SimRng,
    requests: Slab<RequestState>,
    next_uid: u32,
    timers: Vec<Timer>,
    load_unit: LoadUnit,
    window: (SimTime, SimTime),
    hard_end: SimTime,
    pending_measured: u64,
    metrics: MetricsRecord,
    decisions: Option<Vec<Decision>>,
    completions: Option<Vec<Completion>>,
    deliveries: Option<Vec<Delivery>>,
}

fn encode(slot: usize, uid: u32) -> u64 {
    ((uid as u64) << 32) | slot as u64
}

fn decode(handle: u64) -> (usize, u32) {
    ((handle & 0xFFFF_FFFF) as usize, (handle >> 32) as u32)
}

impl RackSim {
    pub fn new(cfg: RunConfig) -> Result<Self, RunError> {
        cfg.validate()?;
        let seed = cfg.seed;
        let n_keys = cfg.n_keys();
        let global = cfg.dispatch == Dispatch::Global;

        let (servers, active, policy) = if global {
            let pooled = ServerState::new(0, cfg.capacity(), cfg.intra.clone(), cfg.context_switch_us);
            (vec![pooled], vec![true], SchedulingPolicy::RoundRobin)
        } else {
            let servers = cfg
                .workers
                .iter()
                .enumerate()
                .map(|(i, &w)| ServerState::new(i, w as usize, cfg.intra.clone(), cfg.context_switch_us))
                .collect();
            let policy = match cfg.dispatch {
                Dispatch::Switch(p) => p,
                _ => SchedulingPolicy::HashRandom,
            };
            (servers, cfg.initial_active.clone(), policy)
        };
        let n = servers.len();
        let tracking = match cfg.dispatch {
            Dispatch::Switch(_) => cfg.tracking,
            _ => TrackingConfig::new(TrackingKind::Int1),
        };
        let switch_cfg =
            SwitchConfig { policy, tracking, reqtable: cfg.reqtable, queue_mode: cfg.queue_mode(), n_keys };
        let switch = Switch::new(switch_cfg, active, cfg.locality_sets.clone(), seed);
        let clients = match cfg.dispatch {
            Dispatch::Client { local_increment, .. } => {
                (0..cfg.workload.clients).map(|_| ClientView::new(n, n_keys, local_increment)).collect()
            }
            _ => Vec::new(),
        };

        let generator = Generator::new(cfg.workload.clone(), seed)?;
        let rate = cfg.arrival_rate(cfg.load_fraction);
        let mut sim = RackSim {
            load_unit: tracking.kind.load_unit(),
            events: EventQueue::new(),
            generator,
            rate,
            switch,
            servers,
            clients,
            client_rng: rng_stream(seed, StreamId::Sampling),
            loss_rng: rng_stream(seed, StreamId::Loss),
            monitor_rng: rng_stream(seed, StreamId::Monitor),
            requests: Slab::new(),
            next_uid: 0,
            timers: Vec::new(),
            window: (SimTime::ZERO, SimTime::ZERO),
            hard_end: SimTime::ZERO,
            pending_measured: 0,
            metrics: MetricsRecord { dispatch_histogram: vec![0; n], ..Default::default() },
            decisions: None,
            completions: None,
            deliveries: None,
            cfg,
        };
        sim.plan()?;
        Ok(sim)
    }

    /// Lays out the run: window, initial arrivals, faults and periodic events.
    fn plan(&mut self) -> Result<(), RunError> {
        let cfg = &self.cfg;
        let (window, hard_end) = if let Some(trace) = &cfg.trace {
            let last = trace.iter().map(|a| a.at_us).fold(0.0, f64::max);
            let end = SimTime::from_us(last + 1e-9);
            (0..trace.len()).for_each(|i| {
                let at = SimTime::from_us(trace[i].at_us);
                self.events.schedule(at, Event::TraceArrival(i)).expect("trace times are non-negative");
            });
            ((SimTime::ZERO, end), SimTime::from_us(f64::MAX / 4.0))
        } else {
            let per_us = self.rate * cfg.workload.mean_group_size();
            let window_len = if per_us > 0.0 { cfg.requests as f64 / per_us } else { 0.0 };
            let warmup = window_len * cfg.warmup_fraction / (1.0 - cfg.warmup_fraction);
            let start = SimTime::from_us(warmup);
            let end = SimTime::from_us(warmup + window_len);
            let hard_end = end + window_len * cfg.drain_factor;
            if self.rate > 0.0 {
                let gap = self.generator.next_gap(self.rate)?;
                if gap < end.as_us() {
                    self.events.schedule(SimTime::from_us(gap), Event::RequestArrival).expect("future");
                }
            }
            ((start, end), hard_end)
        };
        self.window = window;
        self.hard_end = hard_end;
        self.metrics.window_us = (window.0.as_us(), window.1.as_us());
        for f in self.cfg.faults.clone() {
            self.events.schedule(SimTime::from_us(f.at_us), Event::FaultInject(f.fault)).expect("validated");
        }
        if let Some(b) = self.cfg.timeline_bucket_us {
            self.metrics.timeline = Some(Timeline::new(b));
        }
        if self.cfg.sample_queues && self.rate > 0.0 {
            self.metrics.queue_samples = Some(QueueSamples::default());
            let gap = self.monitor_gap();
            self.events.schedule(self.window.0 + gap, Event::SamplingTick).expect("future");
        }
        if self.cfg.reqtable.ttl_us.is_some() && self.cfg.trace.is_none() {
            self.events.schedule_in(self.cfg.reqtable.sweep_period_us, Event::ControlPlaneSweep);
        }
        Ok(())
    }

    fn monitor_gap(&mut self) -> f64 {
        // Roughly one observation per arrival, at exponential spacing.
        let rate = self.cfg.arrival_rate(self.cfg.load_fraction.max(0.05));
        crate::workload::next_arrival(rate, &mut self.monitor_rng).expect("positive rate")
    }

    /// Records the first-packet decision of every request.
    pub fn enable_decision_log(&mut self) {
        self.decisions = Some(Vec::new());
    }

    /// Records every request packet delivered to a server.
    pub fn enable_delivery_log(&mut self) {
        self.deliveries = Some(Vec::new());
    }

    /// Records every request that completes, in completion order.
    pub fn enable_completion_log(&mut self) {
        self.completions = Some(Vec::new());
    }

    pub fn completions(&self) -> &[Completion] {
        self.completions.as_deref().unwrap_or(&[])
    }

    pub fn decisions(&self) -> &[Decision] {
        self.decisions.as_deref().unwrap_or(&[])
    }

    pub fn deliveries(&self) -> &[Delivery] {
        self.deliveries.as_deref().unwrap_or(&[])
    }

    pub fn now(&self) -> SimTime {
        self.events.now()
    }

    pub fn switch(&self) -> &Switch {
        &self.switch
    }

    pub fn server(&self, id: usize) -> &ServerState {
        &self.servers[id]
    }

    /// Measurement window `[start, end)`.
    pub fn window(&self) -> (SimTime, SimTime) {
        self.window
    }

    /// Dispatches every event due at or before `end` and returns the metrics
    /// gathered so far.
    pub fn run_until(&mut self, end: SimTime) -> MetricsRecord {
        while let Some((t, ev)) = self.events.pop_until(end) {
            self.dispatch(t, ev);
        }
        self.events.advance_to(end);
        self.snapshot()
    }

    /// Runs until every measured request has completed or been lost, or the
    /// drain cap is reached.
    pub fn run(mut self) -> MetricsRecord {
        self.run_to_completion()
    }

    /// Same as [`RackSim::run`] but keeps the simulator for inspecting logs.
    pub fn run_to_completion(&mut self) -> MetricsRecord {
        loop {
            let now = self.events.now();
            if now >= self.window.1 && self.pending_measured == 0 {
                break;
            }
            match self.events.pop_until(self.hard_end) {
                Some((t, ev)) => self.dispatch(t, ev),
                None => break,
            }
        }
        self.snapshot()
    }

    fn snapshot(&self) -> MetricsRecord {
        let mut m = self.metrics.clone();
        m.in_flight = m.injected_total - m.completed_total - m.lost_total;
        m.fallback_inserts = self.switch.stats.fallback_inserts;
        m.fallback_reads = self.switch.stats.fallback_reads;
        m.dropped_packets = self.switch.stats.dropped_packets;
        m.events = self.events.dispatched();
        m.end_time_us = self.events.now().as_us();
        m
    }

    fn dispatch(&mut self, now: SimTime, ev: Event) {
        self.metrics.trace_fingerprint = mix64(self.metrics.trace_fingerprint ^ now.as_us().to_bits() ^ ev.tag());
        match ev {
            Event::RequestArrival => self.on_arrival(now),
            Event::TraceArrival(i) => self.on_trace_arrival(i, now),
            Event::PacketArriveAtSwitch(p) => self.on_request_at_switch(p, now),
            Event::PacketArriveAtServer { server, packet } => self.on_packet_at_server(server, packet, now),
            Event::QuantumExpire { server, worker, epoch } | Event::RequestComplete { server, worker, epoch } => {
                self.on_timer(server, worker, epoch, now)
            }
            Event::ReplyArriveAtSwitch(p) => self.on_reply_at_switch(p, now),
            Event::ReplyArriveAtClient(p) => self.on_reply_at_client(p, now),
            Event::FaultInject(f) => self.on_fault(f, now),
            Event::Reconfigure(c) => self.on_control(c, now),
            Event::SamplingTick => self.on_sample(now),
            Event::ControlPlaneSweep => {
                self.switch.sweep(now);
                if now < self.hard_end {
                    self.events.schedule_in(self.cfg.reqtable.sweep_period_us, Event::ControlPlaneSweep);
                }
            }
        }
    }

    fn on_arrival(&mut self, now: SimTime) {
        if let Some(reqs) = self.generator.arrival(now) {
            self.inject(reqs, now);
        }
        if self.rate > 0.0 {
            let gap = self.generator.next_gap(self.rate).expect("positive rate");
            if now.as_us() + gap < self.window.1.as_us() {
                self.events.schedule_in(gap, Event::RequestArrival);
            }
        }
    }

    fn on_trace_arrival(&mut self, i: usize, now: SimTime) {
        let a = self.cfg.trace.as_ref().expect("trace run")[i];
        let class = self.cfg.workload.classes[a.class].clone();
        let services = vec![a.service_us; class.group_size as usize];
        let reqs = self.generator.make_requests(a.client, &class, &services, now);
        self.inject(reqs, now);
    }

    fn inject(&mut self, reqs: Vec<Request>, now: SimTime) {
        let first = &reqs[0];
        let key = self.cfg.queue_mode().key(first.class_tag, first.priority, first.client());
        let target = match self.cfg.dispatch {
            Dispatch::Client { k, .. } => {
                let eligible = self.switch.loads().eligible(first.locality);
                if eligible.is_empty() {
                    None
                } else {
                    let view = &mut self.clients[first.client() as usize];
                    Some(view.choose(eligible, key, k, &mut self.client_rng))
                }
            }
            _ => None,
        };
        if let (Some(s), Some(log)) = (target, self.decisions.as_mut()) {
            log.push(Decision { req_id: first.req_id, server: s });
        }
        for req in reqs {
            let measured = req.arrival >= self.window.0 && req.arrival < self.window.1;
            let uid = self.next_uid;
            self.next_uid = self.next_uid.wrapping_add(1);
            let packets: Vec<PacketType> = req.packet_types().collect();
            let arrival = req.arrival;
            let slot = self.requests.insert(RequestState {
                uid,
                req,
                key,
                server: None,
                delivered: 0,
                violated: false,
                measured,
            });
            let handle = encode(slot, uid);
            self.metrics.injected_total += 1;
            if measured {
                self.metrics.offered += 1;
                self.pending_measured += 1;
            }
            let req = &self.requests[slot].req;
            for (i, ptype) in packets.into_iter().enumerate() {
                let mut p = Packet::request(req, ptype, handle);
                if let Some(s) = target {
                    p.dst = Endpoint::Server(s);
                }
                let at = arrival + i as f64 * self.cfg.workload.packet_gap_us + self.cfg.network.client_switch_us;
                debug_assert!(at >= now);
                self.events.schedule(at, Event::PacketArriveAtSwitch(p)).expect("future");
            }
        }
    }

    fn live(&self, handle: u64) -> Option<usize> {
        let (slot, uid) = decode(handle);
        self.requests.get(slot).filter(|r| r.uid == uid).map(|_| slot)
    }

    fn lose(&mut self, handle: u64) {
        let Some(slot) = self.live(handle) else { return };
        let st = self.requests.remove(slot);
        self.metrics.lost_total += 1;
        if st.measured {
            self.metrics.lost += 1;
            self.pending_measured -= 1;
        }
    }

    fn to_server(&mut self, server: usize, packet: Packet) {
        let delay = self.cfg.network.switch_latency_us + self.cfg.network.switch_server_us;
        self.events.schedule_in(delay, Event::PacketArriveAtServer { server, packet });
    }

    fn on_request_at_switch(&mut self, p: Packet, now: SimTime) {
        if self.live(p.request).is_none() {
            return;
        }
        if let Endpoint::Server(s) = p.dst {
            if self.switch.is_failed(now) {
                self.switch.stats.dropped_packets += 1;
                self.lose(p.request);
            } else {
                self.to_server(s, p);
            }
            return;
        }
        match self.switch.process(&p, now) {
            Forward::Server(s) => {
                if p.ptype == PacketType::Reqf {
                    if let Some(log) = self.decisions.as_mut() {
                        log.push(Decision { req_id: p.req_id, server: s });
                    }
                }
                self.to_server(s, p);
            }
            Forward::Held => {}
            Forward::Dropped => self.lose(p.request),
            Forward::Client(_) => unreachable!("request packets never go to clients"),
        }
        let occ = self.switch.table().occupancy();
        self.metrics.max_table_occupancy = self.metrics.max_table_occupancy.max(occ);
    }

    fn on_packet_at_server(&mut self, server: usize, p: Packet, now: SimTime) {
        let Some(slot) = self.live(p.request) else { return };
        if !self.servers[server].is_alive() {
            self.lose(p.request);
            return;
        }
        let st = &mut self.requests[slot];
        if let Some(log) = self.deliveries.as_mut() {
            log.push(Delivery { req_id: st.req.req_id, member: st.req.member, class_tag: st.req.class_tag, server });
        }
        match st.server {
            None => {
                st.server = Some(server);
                if st.measured {
                    self.metrics.dispatch_histogram[server] += 1;
                }
            }
            Some(s) if s != server => st.violated = true,
            Some(_) => {}
        }
        st.delivered += 1;
        if st.delivered < st.req.num_packets {
            return;
        }
        let job = Job::new(p.request, st.key, st.req.priority, st.req.service_us);
        if st.req.group_size > 1 {
            let (group, size) = (st.req.req_id.key(), st.req.group_size);
            self.servers[server].note_member_received(group, size);
        }
        self.servers[server].enqueue(job, now, &mut self.timers);
        self.flush_timers(server);
    }

    fn flush_timers(&mut self, server: usize) {
        for t in self.timers.drain(..) {
            let ev = if t.completes {
                Event::RequestComplete { server, worker: t.worker, epoch: t.epoch }
            } else {
                Event::QuantumExpire { server, worker: t.worker, epoch: t.epoch }
            };
            self.events.schedule(t.at, ev).expect("timers fire in the future");
        }
    }

    fn on_timer(&mut self, server: usize, worker: usize, epoch: u64, now: SimTime) {
        let done = self.servers[server].on_timer(worker, epoch, now, &mut self.timers);
        self.flush_timers(server);
        let Some(job) = done else { return };
        let Some(slot) = self.live(job.request) else { return };
        let st = &self.requests[slot];
        let load = self.servers[server].current_load(st.key, self.load_unit, now);
        let ptype = self.servers[server].reply_type(st.req.req_id.key(), st.req.group_size);
        let reply = Packet::reply(&st.req, ptype, server, load, job.request);
        let loss = self.cfg.network.reply_loss_prob;
        if loss > 0.0 && self.loss_rng.random::<f64>() < loss {
            self.lose(job.request);
            return;
        }
        self.events.schedule_in(self.cfg.network.switch_server_us, Event::ReplyArriveAtSwitch(reply));
    }

    fn on_reply_at_switch(&mut self, p: Packet, now: SimTime) {
        match self.switch.process(&p, now) {
            Forward::Client(_) => {
                let delay = self.cfg.network.switch_latency_us + self.cfg.network.client_switch_us;
                self.events.schedule_in(delay, Event::ReplyArriveAtClient(p));
            }
            _ => self.lose(p.request),
        }
        for (s, pkt) in self.switch.take_released() {
            if pkt.ptype == PacketType::Reqf {
                if let Some(log) = self.decisions.as_mut() {
                    log.push(Decision { req_id: pkt.req_id, server: s });
                }
            }
            self.to_server(s, pkt);
        }
    }

    fn on_reply_at_client(&mut self, p: Packet, now: SimTime) {
        let Some(slot) = self.live(p.request) else { return };
        let st = self.requests.remove(slot);
        if let (Some(view), Endpoint::Server(s)) = (self.clients.get_mut(p.req_id.client as usize), p.src) {
            view.on_reply(s, st.key, p.load_report.unwrap_or(0.0));
        }
        self.metrics.completed_total += 1;
        if let Some(log) = self.completions.as_mut() {
            log.push(Completion {
                req_id: st.req.req_id,
                member: st.req.member,
                server: st.server.unwrap_or(usize::MAX),
                arrival_us: st.req.arrival.as_us(),
                completion_us: now.as_us(),
            });
        }
        if st.violated {
            self.metrics.affinity_violations += 1;
        }
        if let Some(t) = self.metrics.timeline.as_mut() {
            t.record(st.req.class_tag, now.as_us());
        }
        if st.measured {
            self.metrics.completed += 1;
            self.pending_measured -= 1;
            let latency = now.since(st.req.arrival);
            self.metrics.latencies.entry(st.req.class_tag).or_default().push(latency);
        }
    }

    fn on_fault(&mut self, f: Fault, now: SimTime) {
        match f {
            Fault::SwitchFail { duration_us } => {
                for h in self.switch.fail(now, duration_us) {
                    self.lose(h);
                }
                self.events.schedule_in(duration_us, Event::Reconfigure(Control::SwitchRecover));
            }
            Fault::AddServer { server } => {
                if !self.servers[server].is_alive() {
                    let w = self.cfg.workers[server] as usize;
                    self.servers[server] = ServerState::new(server, w, self.cfg.intra.clone(), self.cfg.context_switch_us);
                }
                self.switch.add_server(server, now);
                for (s, pkt) in self.switch.take_released() {
                    self.to_server(s, pkt);
                }
            }
            Fault::RemoveServer { server, planned } => {
                self.switch.remove_server(server);
                if !planned {
                    for h in self.servers[server].fail() {
                        self.lose(h);
                    }
                    self.events
                        .schedule_in(self.cfg.control_plane_delay_us, Event::Reconfigure(Control::PurgeServer(server)));
                }
            }
            Fault::SetLoad { load_fraction } => {
                let was_idle = self.rate <= 0.0;
                self.rate = self.cfg.arrival_rate(load_fraction);
                if was_idle && self.rate > 0.0 {
                    let gap = self.generator.next_gap(self.rate).expect("positive rate");
                    if now.as_us() + gap < self.window.1.as_us() {
                        self.events.schedule_in(gap, Event::RequestArrival);
                    }
                }
            }
        }
    }

    fn on_control(&mut self, c: Control, _now: SimTime) {
        match c {
            Control::SwitchRecover => {
                self.switch.recover();
                self.metrics.occupancy_after_recovery.push(self.switch.table().occupancy());
            }
            Control::PurgeServer(s) => {
                self.switch.purge_server(s);
            }
        }
    }

    fn on_sample(&mut self, now: SimTime) {
        if let Some(q) = self.metrics.queue_samples.as_mut() {
            for s in &self.servers {
                if s.is_alive() {
                    q.record(s.present(), s.waiting());
                }
            }
        }
        let gap = self.monitor_gap();
        if now.as_us() + gap < self.window.1.as_us() {
            self.events.schedule_in(gap, Event::SamplingTick);
        }
    }
}

/// Builds and runs one configuration to completion.
pub fn run(cfg: RunConfig) -> Result<MetricsRecord, RunError> {
    Ok(RackSim::new(cfg)?.run())
}

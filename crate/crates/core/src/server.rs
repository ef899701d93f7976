//! Multi-core server model: per-queue FIFOs, identical workers and a
//! preemptive intra-server scheduler.
//!
//! The server never touches the event queue. Every operation that starts a
//! run slice pushes a [`Timer`] which the engine turns into a
//! `QuantumExpire` or `RequestComplete` event; stale timers are recognised by
//! their worker epoch.

use std::collections::{HashMap, VecDeque};

use crate::sim::SimTime;
use crate::workload::PacketType;

pub type ServerId = usize;

const EPS: f64 = 1e-9;

/// Which queue a request lives in, on the server and in the switch's load table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueueMode {
    Single,
    PerClass,
    PerPriority,
    PerClient,
}

impl QueueMode {
    pub fn key(self, class_tag: u32, priority: u32, client: u32) -> usize {
        match self {
            QueueMode::Single => 0,
            QueueMode::PerClass => class_tag as usize,
            QueueMode::PerPriority => priority as usize,
            QueueMode::PerClient => client as usize,
        }
    }
}

/// Intra-server scheduling discipline.
#[derive(Clone, Debug, PartialEq)]
pub enum IntraPolicy {
    /// Centralized FCFS; requests running longer than the threshold are
    /// preempted and re-queued at the tail.
    Cfcfs { preempt_threshold_us: Option<f64> },
    /// Processor sharing as round-robin time slicing.
    Ps { slice_us: f64 },
    MultiQueueCfcfs { preempt_threshold_us: Option<f64> },
    MultiQueuePs { slice_us: f64 },
    /// One queue per priority; an arriving request preempts a lower-priority
    /// one when no worker is idle.
    StrictPriority { preempt_threshold_us: Option<f64>, preempt_latency_us: f64 },
    /// One queue per client, served in proportion to `weights` at slice
    /// granularity.
    WeightedFair { slice_us: f64, weights: Vec<f64> },
}

impl IntraPolicy {
    pub fn queue_mode(&self) -> QueueMode {
        match self {
            IntraPolicy::Cfcfs { .. } | IntraPolicy::Ps { .. } => QueueMode::Single,
            IntraPolicy::MultiQueueCfcfs { .. } | IntraPolicy::MultiQueuePs { .. } => QueueMode::PerClass,
            IntraPolicy::StrictPriority { .. } => QueueMode::PerPriority,
            IntraPolicy::WeightedFair { .. } => QueueMode::PerClient,
        }
    }

    fn quantum(&self) -> Option<f64> {
        match *self {
            IntraPolicy::Cfcfs { preempt_threshold_us: t }
            | IntraPolicy::MultiQueueCfcfs { preempt_threshold_us: t }
            | IntraPolicy::StrictPriority { preempt_threshold_us: t, .. } => t,
            IntraPolicy::Ps { slice_us }
            | IntraPolicy::MultiQueuePs { slice_us }
            | IntraPolicy::WeightedFair { slice_us, .. } => Some(slice_us),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(q) = self.quantum() {
            if !(q > 0.0 && q.is_finite()) {
                return Err(format!("slice/threshold must be positive, got {q}"));
            }
        }
        if let IntraPolicy::WeightedFair { weights, .. } = self {
            if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                return Err("weighted-fair weights must be positive".into());
            }
        }
        if let IntraPolicy::StrictPriority { preempt_latency_us, .. } = self {
            if !(*preempt_latency_us >= 0.0) {
                return Err("preemption latency must be non-negative".into());
            }
        }
        Ok(())
    }
}

/// Units of the load value a server piggybacks in its replies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadUnit {
    /// Outstanding requests (queued and running).
    Count,
    /// Remaining service time of outstanding requests, in µs.
    Work,
}

/// A request admitted to a server.
#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    pub request: u64,
    pub key: usize,
    pub priority: u32,
    pub remaining_us: f64,
    seq: u64,
}

impl Job {
    pub fn new(request: u64, key: usize, priority: u32, service_us: f64) -> Self {
        assert!(service_us > 0.0, "service demand must be positive");
        Job { request, key, priority, remaining_us: service_us, seq: 0 }
    }
}

#[derive(Debug)]
struct Running {
    job: Job,
    /// When the job starts making progress (after any switch cost).
    run_start: SimTime,
    run_len: f64,
}

#[derive(Debug, Default)]
struct Worker {
    running: Option<Running>,
    epoch: u64,
}

/// Request to the engine: wake `worker` at `at` unless its epoch has moved on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timer {
    pub worker: usize,
    pub epoch: u64,
    pub at: SimTime,
    pub completes: bool,
}

#[derive(Debug, Default)]
struct GroupProgress {
    expected: u32,
    received: u32,
    replied: u32,
}

pub struct ServerState {
    pub id: ServerId,
    policy: IntraPolicy,
    mode: QueueMode,
    quantum: Option<f64>,
    switch_cost_us: f64,
    workers: Vec<Worker>,
    queues: Vec<VecDeque<Job>>,
    outstanding: Vec<u32>,
    waiting: usize,
    pass: Vec<f64>,
    vtime: f64,
    next_seq: u64,
    alive: bool,
    groups: HashMap<u64, GroupProgress>,
}

impl ServerState {
    pub fn new(id: ServerId, workers: usize, policy: IntraPolicy, switch_cost_us: f64) -> Self {
        assert!(workers > 0, "server needs at least one worker");
        ServerState {
            id,
            mode: policy.queue_mode(),
            quantum: policy.quantum(),
            policy,
            switch_cost_us,
            workers: (0..workers).map(|_| Worker::default()).collect(),
            queues: Vec::new(),
            outstanding: Vec::new(),
            waiting: 0,
            pass: Vec::new(),
            vtime: 0.0,
            next_seq: 0,
            alive: true,
            groups: HashMap::new(),
        }
    }

    pub fn mode(&self) -> QueueMode {
        self.mode
    }

    pub fn workers(&self) -> usize {
        self.workers.len()
    }

    pub fn is_alive(&self) -> bool {
        self.alive
    }

    fn ensure_key(&mut self, key: usize) {
        if key >= self.queues.len() {
            self.queues.resize_with(key + 1, VecDeque::new);
            self.outstanding.resize(key + 1, 0);
            self.pass.resize(key + 1, 0.0);
        }
    }

    fn weight(&self, key: usize) -> f64 {
        match &self.policy {
            IntraPolicy::WeightedFair { weights, .. } => weights.get(key).copied().unwrap_or(1.0),
            _ => 1.0,
        }
    }

    /// Admits a fully received request and dispatches it if possible.
    pub fn enqueue(&mut self, mut job: Job, now: SimTime, timers: &mut Vec<Timer>) {
        debug_assert!(self.alive);
        self.ensure_key(job.key);
        if self.mode == QueueMode::PerClient && self.queues[job.key].is_empty() && !self.is_running_key(job.key) {
            // A client returning from idle does not bank credit.
            self.pass[job.key] = self.pass[job.key].max(self.vtime);
        }
        self.outstanding[job.key] += 1;
        let key = job.key;
        let priority = job.priority;
        job.seq = self.bump_seq();
        self.queues[key].push_back(job);
        self.waiting += 1;

        if let Some(w) = self.idle_worker() {
            self.dispatch_on(w, now, 0.0, timers);
        } else if let IntraPolicy::StrictPriority { preempt_latency_us, .. } = self.policy {
            self.preempt_for_priority(priority, now, preempt_latency_us, timers);
        }
        self.check_work_conserving();
    }

    fn bump_seq(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }

    fn is_running_key(&self, key: usize) -> bool {
        self.workers
            .iter()
            .any(|w| w.running.as_ref().is_some_and(|r| r.job.key == key))
    }

    fn idle_worker(&self) -> Option<usize> {
        self.workers.iter().position(|w| w.running.is_none())
    }

    fn preempt_for_priority(&mut self, priority: u32, now: SimTime, latency: f64, timers: &mut Vec<Timer>) {
        // Victim: the lowest-priority running request, latest started on ties.
        let victim = self
            .workers
            .iter()
            .enumerate()
            .filter_map(|(i, w)| w.running.as_ref().map(|r| (i, r)))
            .filter(|(_, r)| r.job.priority < priority)
            .min_by(|(_, a), (_, b)| {
                a.job
                    .priority
                    .cmp(&b.job.priority)
                    .then(b.run_start.as_us().total_cmp(&a.run_start.as_us()))
            })
            .map(|(i, _)| i);
        let Some(w) = victim else { return };
        let run = self.workers[w].running.take().expect("victim is running");
        self.workers[w].epoch += 1;
        let mut job = run.job;
        let progress = now.since(run.run_start).clamp(0.0, run.run_len);
        job.remaining_us -= progress;
        if job.remaining_us <= EPS {
            job.remaining_us = EPS;
        }
        let key = job.key;
        self.queues[key].push_front(job);
        self.waiting += 1;
        self.dispatch_on(w, now, latency, timers);
    }

    /// Picks the next waiting job according to the queue-arbitration rule.
    fn arbitrate(&mut self) -> Option<Job> {
        let key = match self.mode {
            QueueMode::Single => {
                if self.queues.first().is_some_and(|q| !q.is_empty()) {
                    Some(0)
                } else {
                    None
                }
            }
            // Earliest-enqueued head across class queues.
            QueueMode::PerClass => self
                .queues
                .iter()
                .enumerate()
                .filter_map(|(k, q)| q.front().map(|j| (k, j.seq)))
                .min_by_key(|&(_, seq)| seq)
                .map(|(k, _)| k),
            QueueMode::PerPriority => (0..self.queues.len()).rev().find(|&k| !self.queues[k].is_empty()),
            QueueMode::PerClient => self
                .queues
                .iter()
                .enumerate()
                .filter(|(_, q)| !q.is_empty())
                .min_by(|(a, _), (b, _)| self.pass[*a].total_cmp(&self.pass[*b]).then(a.cmp(b)))
                .map(|(k, _)| k),
        }?;
        if self.mode == QueueMode::PerClient {
            self.vtime = self.pass[key];
        }
        let job = self.queues[key].pop_front()?;
        self.waiting -= 1;
        Some(job)
    }

    fn dispatch_on(&mut self, w: usize, now: SimTime, delay: f64, timers: &mut Vec<Timer>) {
        if let Some(job) = self.arbitrate() {
            self.start(w, job, now, delay, timers);
        }
    }

    fn start(&mut self, w: usize, job: Job, now: SimTime, delay: f64, timers: &mut Vec<Timer>) {
        debug_assert!(job.remaining_us > 0.0);
        let run_len = match self.quantum {
            Some(q) if job.remaining_us > q + EPS => q,
            _ => job.remaining_us,
        };
        let completes = run_len >= job.remaining_us;
        let run_start = now + delay;
        let worker = &mut self.workers[w];
        worker.epoch += 1;
        timers.push(Timer { worker: w, epoch: worker.epoch, at: run_start + run_len, completes });
        worker.running = Some(Running { job, run_start, run_len });
    }

    /// Handles a worker timer. Returns the finished job when the timer marks a
    /// completion; stale timers are ignored.
    pub fn on_timer(&mut self, w: usize, epoch: u64, now: SimTime, timers: &mut Vec<Timer>) -> Option<Job> {
        if !self.alive || self.workers[w].epoch != epoch {
            return None;
        }
        let run = self.workers[w].running.take()?;
        let mut job = run.job;
        job.remaining_us -= run.run_len;
        if self.mode == QueueMode::PerClient {
            let weight = self.weight(job.key);
            self.pass[job.key] += run.run_len / weight;
        }
        let done = if job.remaining_us <= EPS {
            job.remaining_us = 0.0;
            self.outstanding[job.key] -= 1;
            self.dispatch_on(w, now, 0.0, timers);
            Some(job)
        } else {
            // Quantum expired: back to the tail of its own queue.
            let key = job.key;
            let request = job.request;
            job.seq = self.bump_seq();
            self.queues[key].push_back(job);
            self.waiting += 1;
            let next = self.arbitrate().expect("queue holds at least the preempted job");
            let cost = if next.request == request { 0.0 } else { self.switch_cost_us };
            self.start(w, next, now, cost, timers);
            None
        };
        self.check_work_conserving();
        done
    }

    /// Load value piggybacked in a reply for queue `key`.
    pub fn current_load(&self, key: usize, unit: LoadUnit, now: SimTime) -> f64 {
        match unit {
            LoadUnit::Count => self.outstanding.get(key).copied().unwrap_or(0) as f64,
            LoadUnit::Work => {
                let queued: f64 = self
                    .queues
                    .get(key)
                    .map(|q| q.iter().map(|j| j.remaining_us).sum())
                    .unwrap_or(0.0);
                let running: f64 = self
                    .workers
                    .iter()
                    .filter_map(|w| w.running.as_ref())
                    .filter(|r| r.job.key == key)
                    .map(|r| r.job.remaining_us - now.since(r.run_start).clamp(0.0, r.run_len))
                    .sum();
                queued + running
            }
        }
    }

    /// Requests present (queued and running) across all queues.
    pub fn present(&self) -> usize {
        self.outstanding.iter().map(|&n| n as usize).sum()
    }

    /// Requests waiting for a worker.
    pub fn waiting(&self) -> usize {
        self.waiting
    }

    pub fn busy_workers(&self) -> usize {
        self.workers.iter().filter(|w| w.running.is_some()).count()
    }

    /// Records that one member of dependency group `group` is fully received.
    pub fn note_member_received(&mut self, group: u64, expected: u32) {
        let g = self.groups.entry(group).or_default();
        g.expected = expected;
        g.received += 1;
    }

    /// Reply type for the next reply of `group`: a state-clearing reply only
    /// once every member has been received.
    pub fn reply_type(&mut self, group: u64, group_size: u32) -> PacketType {
        if group_size <= 1 {
            return PacketType::Rep;
        }
        let g = self.groups.entry(group).or_default();
        g.replied += 1;
        let ptype = if g.expected > 0 && g.received >= g.expected {
            PacketType::Rep
        } else {
            PacketType::RepPending
        };
        if g.expected > 0 && g.replied >= g.expected {
            self.groups.remove(&group);
        }
        ptype
    }

    /// Server crash: drops all state and returns the handles of lost requests.
    pub fn fail(&mut self) -> Vec<u64> {
        self.alive = false;
        let mut lost: Vec<u64> = self.queues.iter_mut().flat_map(|q| q.drain(..)).map(|j| j.request).collect();
        for w in &mut self.workers {
            w.epoch += 1;
            if let Some(r) = w.running.take() {
                lost.push(r.job.request);
            }
        }
        self.outstanding.iter_mut().for_each(|n| *n = 0);
        self.waiting = 0;
        self.groups.clear();
        lost
    }

    fn check_work_conserving(&self) {
        debug_assert!(
            self.waiting == 0 || self.idle_worker().is_none(),
            "server {} has idle workers while {} requests wait",
            self.id,
            self.waiting
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Drives a single server in isolation, returning completion times by request.
    struct Harness {
        server: ServerState,
        timers: Vec<Timer>,
        completions: Vec<(u64, f64)>,
    }

    impl Harness {
        fn new(workers: usize, policy: IntraPolicy, cost: f64) -> Self {
            Harness { server: ServerState::new(0, workers, policy, cost), timers: Vec::new(), completions: Vec::new() }
        }

        fn add(&mut self, at: f64, job: Job) {
            self.run_until(at);
            self.server.enqueue(job, SimTime::from_us(at), &mut self.timers);
        }

        fn run_until(&mut self, t: f64) {
            loop {
                let next = self
                    .timers
                    .iter()
                    .enumerate()
                    .filter(|(_, x)| x.at.as_us() <= t)
                    .min_by(|a, b| a.1.at.as_us().total_cmp(&b.1.at.as_us()))
                    .map(|(i, _)| i);
                let Some(i) = next else { break };
                let timer = self.timers.swap_remove(i);
                if let Some(job) = self.server.on_timer(timer.worker, timer.epoch, timer.at, &mut self.timers) {
                    self.completions.push((job.request, timer.at.as_us()));
                }
            }
        }

        fn finish(mut self) -> Vec<(u64, f64)> {
            self.run_until(f64::MAX);
            self.completions.sort_by_key(|c| c.0);
            self.completions
        }
    }

    fn job(id: u64, service: f64) -> Job {
        Job::new(id, 0, 0, service)
    }

    #[test]
    fn idle_server_starts_immediately() {
        let mut h = Harness::new(1, IntraPolicy::Cfcfs { preempt_threshold_us: None }, 0.0);
        h.add(3.0, job(1, 50.0));
        assert_eq!(h.finish(), vec![(1, 53.0)]);
    }

    #[test]
    fn cfcfs_is_fifo_on_one_worker() {
        let mut h = Harness::new(1, IntraPolicy::Cfcfs { preempt_threshold_us: None }, 0.5);
        h.add(0.0, job(1, 50.0));
        h.add(0.0, job(2, 50.0));
        assert_eq!(h.finish(), vec![(1, 50.0), (2, 100.0)]);
    }

    #[test]
    fn ps_two_equal_jobs_interleave() {
        // A25, B25, A25, B25 on one worker.
        let mut h = Harness::new(1, IntraPolicy::Ps { slice_us: 25.0 }, 0.0);
        h.add(0.0, job(1, 50.0));
        h.add(0.0, job(2, 50.0));
        assert_eq!(h.finish(), vec![(1, 75.0), (2, 100.0)]);
    }

    #[test]
    fn ps_switch_cost_charged_per_preemption() {
        let mut h = Harness::new(1, IntraPolicy::Ps { slice_us: 25.0 }, 1.0);
        h.add(0.0, job(1, 50.0));
        h.add(0.0, job(2, 50.0));
        // A 0-25, +1, B 26-51, +1, A 52-77 done, B starts at 77 without a switch
        // cost because A finished rather than being preempted.
        assert_eq!(h.finish(), vec![(1, 77.0), (2, 102.0)]);
    }

    #[test]
    fn threshold_preemption_requeues_at_tail() {
        let mut h = Harness::new(1, IntraPolicy::Cfcfs { preempt_threshold_us: Some(250.0) }, 0.0);
        h.add(0.0, job(1, 400.0));
        // Alone on the server: preempted at 250, re-queued, resumes for 150.
        assert_eq!(h.finish(), vec![(1, 400.0)]);

        let mut h = Harness::new(1, IntraPolicy::Cfcfs { preempt_threshold_us: Some(250.0) }, 0.0);
        h.add(0.0, job(1, 400.0));
        h.add(10.0, job(2, 50.0));
        // Short job runs 250-300, long job finishes its remaining 150 at 450.
        assert_eq!(h.finish(), vec![(1, 450.0), (2, 300.0)]);
    }

    #[test]
    fn strict_priority_preempts_low_priority() {
        let mut h = Harness::new(
            1,
            IntraPolicy::StrictPriority { preempt_threshold_us: None, preempt_latency_us: 5.0 },
            0.0,
        );
        h.add(0.0, Job::new(1, 0, 0, 100.0));
        h.add(20.0, Job::new(2, 1, 1, 50.0));
        // High priority starts at 25 (5 µs latency), ends 75; low resumes its 80.
        assert_eq!(h.finish(), vec![(1, 155.0), (2, 75.0)]);
    }

    #[test]
    fn strict_priority_waiting_high_blocks_fresh_low() {
        let mut h = Harness::new(
            1,
            IntraPolicy::StrictPriority { preempt_threshold_us: None, preempt_latency_us: 0.0 },
            0.0,
        );
        h.add(0.0, Job::new(1, 1, 1, 10.0));
        h.add(1.0, Job::new(2, 0, 0, 10.0));
        h.add(2.0, Job::new(3, 1, 1, 10.0));
        assert_eq!(h.finish(), vec![(1, 10.0), (2, 30.0), (3, 20.0)]);
    }

    #[test]
    fn weighted_fair_shares_by_weight() {
        let mut h = Harness::new(1, IntraPolicy::WeightedFair { slice_us: 25.0, weights: vec![2.0, 1.0] }, 0.0);
        // Saturate both clients with 25 µs requests.
        for i in 0..2000u64 {
            h.add(0.0, Job::new(i * 2, 0, 0, 25.0));
            h.add(0.0, Job::new(i * 2 + 1, 1, 0, 25.0));
        }
        h.run_until(30_000.0);
        let c0 = h.completions.iter().filter(|c| c.0 % 2 == 0).count() as f64;
        let c1 = h.completions.iter().filter(|c| c.0 % 2 == 1).count() as f64;
        let ratio = c0 / c1;
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn multiqueue_serves_earliest_head() {
        let mut h = Harness::new(1, IntraPolicy::MultiQueueCfcfs { preempt_threshold_us: None }, 0.0);
        h.add(0.0, Job::new(1, 0, 0, 10.0));
        h.add(1.0, Job::new(2, 1, 0, 10.0));
        h.add(2.0, Job::new(3, 0, 0, 10.0));
        assert_eq!(h.finish(), vec![(1, 10.0), (2, 20.0), (3, 30.0)]);
    }

    #[test]
    fn load_reports() {
        let mut s = ServerState::new(0, 1, IntraPolicy::Cfcfs { preempt_threshold_us: None }, 0.0);
        let now = SimTime::ZERO;
        assert_eq!(s.current_load(0, LoadUnit::Count, now), 0.0);
        let mut timers = Vec::new();
        s.enqueue(job(1, 10.0), now, &mut timers);
        s.enqueue(job(2, 40.0), now, &mut timers);
        s.enqueue(job(3, 40.0), now, &mut timers);
        assert_eq!(s.current_load(0, LoadUnit::Count, now), 3.0);
        assert_eq!(s.waiting(), 2);
        // Work: 10 running + 40 + 40 queued.
        assert_eq!(s.current_load(0, LoadUnit::Work, now), 90.0);
        let t = timers[0];
        assert!(s.on_timer(t.worker, t.epoch, t.at, &mut timers).is_some());
        // Two outstanding after the departure.
        assert_eq!(s.current_load(0, LoadUnit::Count, t.at), 2.0);
        assert_eq!(s.current_load(0, LoadUnit::Work, SimTime::from_us(20.0)), 70.0);
    }

    #[test]
    fn stale_timer_is_ignored() {
        let mut s = ServerState::new(
            0,
            1,
            IntraPolicy::StrictPriority { preempt_threshold_us: None, preempt_latency_us: 0.0 },
            0.0,
        );
        let mut timers = Vec::new();
        s.enqueue(Job::new(1, 0, 0, 100.0), SimTime::ZERO, &mut timers);
        let stale = timers[0];
        s.enqueue(Job::new(2, 1, 1, 10.0), SimTime::from_us(5.0), &mut timers);
        assert!(s.on_timer(stale.worker, stale.epoch, stale.at, &mut timers).is_none());
    }

    #[test]
    fn dependency_group_reply_types() {
        let mut s = ServerState::new(0, 1, IntraPolicy::Cfcfs { preempt_threshold_us: None }, 0.0);
        s.note_member_received(77, 2);
        assert_eq!(s.reply_type(77, 2), PacketType::RepPending);
        s.note_member_received(77, 2);
        assert_eq!(s.reply_type(77, 2), PacketType::Rep);
        assert_eq!(s.reply_type(5, 1), PacketType::Rep);
    }

    #[test]
    fn fail_returns_everything() {
        let mut s = ServerState::new(0, 2, IntraPolicy::Ps { slice_us: 25.0 }, 0.0);
        let mut timers = Vec::new();
        for i in 0..5 {
            s.enqueue(job(i, 30.0), SimTime::ZERO, &mut timers);
        }
        let mut lost = s.fail();
        lost.sort();
        assert_eq!(lost, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.present(), 0);
    }
}

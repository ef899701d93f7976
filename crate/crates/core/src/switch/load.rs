//! Server-load state held by the switch and the tracking mechanisms that keep
//! it up to date.

use std::collections::BTreeMap;

use crate::server::LoadUnit;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackingKind {
    /// Per-server outstanding count from reply piggybacks.
    Int1,
    /// Only the least-loaded server and its load, from reply piggybacks.
    Int2,
    /// Per-server remaining service time from reply piggybacks.
    Int3,
    /// Switch-side increments on dispatch and decrements on reply.
    Proactive,
}

impl TrackingKind {
    pub fn load_unit(self) -> LoadUnit {
        match self {
            TrackingKind::Int3 => LoadUnit::Work,
            _ => LoadUnit::Count,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingConfig {
    pub kind: TrackingKind,
    /// Proactive only: chance that a clearing reply's decrement is skipped.
    pub decrement_miss_prob: f64,
    /// Proactive only: chance that a dispatch is counted twice.
    pub double_count_prob: f64,
}

impl TrackingConfig {
    pub fn new(kind: TrackingKind) -> Self {
        TrackingConfig { kind, decrement_miss_prob: 0.0, double_count_prob: 0.0 }
    }
}

/// Latest known load per `(server, queue key)` plus the eligibility sets.
#[derive(Clone, Debug)]
pub struct LoadTable {
    n_servers: usize,
    n_keys: usize,
    counters: Vec<f64>,
    active: Vec<bool>,
    locality_sets: BTreeMap<u32, Vec<usize>>,
    eligible_all: Vec<usize>,
    eligible_local: BTreeMap<u32, Vec<usize>>,
}

impl LoadTable {
    pub fn new(active: Vec<bool>, n_keys: usize, locality_sets: BTreeMap<u32, Vec<usize>>) -> Self {
        let n_servers = active.len();
        let mut t = LoadTable {
            n_servers,
            n_keys: n_keys.max(1),
            counters: vec![0.0; n_servers * n_keys.max(1)],
            active,
            locality_sets,
            eligible_all: Vec::new(),
            eligible_local: BTreeMap::new(),
        };
        t.rebuild();
        t
    }

    fn rebuild(&mut self) {
        self.eligible_all = (0..self.n_servers).filter(|&s| self.active[s]).collect();
        self.eligible_local = self
            .locality_sets
            .iter()
            .map(|(&l, set)| (l, set.iter().copied().filter(|&s| self.active[s]).collect()))
            .collect();
    }

    pub fn servers(&self) -> usize {
        self.n_servers
    }

    pub fn keys(&self) -> usize {
        self.n_keys
    }

    fn idx(&self, server: usize, key: usize) -> usize {
        server * self.n_keys + key.min(self.n_keys - 1)
    }

    pub fn load(&self, server: usize, key: usize) -> f64 {
        self.counters[self.idx(server, key)]
    }

    pub fn set(&mut self, server: usize, key: usize, value: f64) {
        let i = self.idx(server, key);
        self.counters[i] = value.max(0.0);
    }

    /// Adds `delta`, saturating at zero.
    pub fn add(&mut self, server: usize, key: usize, delta: f64) {
        let i = self.idx(server, key);
        self.counters[i] = (self.counters[i] + delta).max(0.0);
    }

    /// Active servers allowed to serve `locality`, in ascending id order.
    pub fn eligible(&self, locality: Option<u32>) -> &[usize] {
        match locality {
            None => &self.eligible_all,
            Some(l) => self.eligible_local.get(&l).map(Vec::as_slice).unwrap_or(&[]),
        }
    }

    pub fn is_active(&self, server: usize) -> bool {
        self.active[server]
    }

    pub fn active_servers(&self) -> usize {
        self.eligible_all.len()
    }

    pub fn set_active(&mut self, server: usize, active: bool) {
        self.active[server] = active;
        self.rebuild();
    }

    pub fn reset(&mut self) {
        self.counters.iter_mut().for_each(|c| *c = 0.0);
    }
}

/// INT2 state for one queue key: the least-loaded server seen and its load.
/// `None` means no trustworthy minimum is known.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MinOnly(pub Option<(usize, f64)>);

impl MinOnly {
    /// A report from the stored server replaces the value if it did not grow;
    /// growth invalidates the pair because another server may now be
    /// lighter. Another server replaces the pair when strictly lighter.
    pub fn update(&mut self, server: usize, report: f64) {
        self.0 = match self.0 {
            None => Some((server, report)),
            Some((s, v)) if s == server => (report <= v).then_some((s, report)),
            Some((s, v)) => Some(if report < v { (server, report) } else { (s, v) }),
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(n: usize) -> LoadTable {
        LoadTable::new(vec![true; n], 1, BTreeMap::new())
    }

    #[test]
    fn set_overwrites() {
        let mut t = table(4);
        t.set(2, 0, 11.0);
        t.set(2, 0, 7.0);
        assert_eq!(t.load(2, 0), 7.0);
    }

    #[test]
    fn add_never_goes_negative() {
        let mut t = table(2);
        t.add(0, 0, -1.0);
        assert_eq!(t.load(0, 0), 0.0);
    }

    #[test]
    fn eligibility_follows_activity_and_locality() {
        let sets = BTreeMap::from([(1, vec![0, 1, 2, 3])]);
        let mut t = LoadTable::new(vec![true, true, true, true, true, true, false, false], 1, sets);
        assert_eq!(t.eligible(None), &[0, 1, 2, 3, 4, 5]);
        assert_eq!(t.eligible(Some(1)), &[0, 1, 2, 3]);
        t.set_active(2, false);
        t.set_active(6, true);
        assert_eq!(t.eligible(Some(1)), &[0, 1, 3]);
        assert_eq!(t.active_servers(), 6);
        assert!(t.eligible(Some(9)).is_empty());
    }

    #[test]
    fn min_only_rules() {
        let mut m = MinOnly::default();
        m.update(3, 2.0);
        assert_eq!(m.0, Some((3, 2.0)));
        m.update(1, 2.0);
        assert_eq!(m.0, Some((3, 2.0)));
        m.update(1, 1.0);
        assert_eq!(m.0, Some((1, 1.0)));
        m.update(1, 0.0);
        assert_eq!(m.0, Some((1, 0.0)));
        m.update(1, 4.0);
        assert_eq!(m.0, None);
        m.update(5, 9.0);
        assert_eq!(m.0, Some((5, 9.0)));
    }
}

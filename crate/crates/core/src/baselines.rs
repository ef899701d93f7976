//! Reference dispatchers: per-server random, pooled global queues and
//! client-side power-of-k over private load estimates.

use rand::Rng;

use crate::sim::mix64;
use crate::switch::sample_min;
use crate::workload::ReqId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RandomMode {
    /// Fresh uniform draw per request.
    Uniform,
    /// Uniform through a hash of the request id; the same id always lands on
    /// the same server for a fixed eligible set.
    Hash,
}

pub fn dispatch_random<R: Rng + ?Sized>(
    req_id: ReqId,
    eligible: &[usize],
    mode: RandomMode,
    hash_seed: u64,
    rng: &mut R,
) -> usize {
    assert!(!eligible.is_empty(), "no eligible server");
    let i = match mode {
        RandomMode::Uniform => rng.random_range(0..eligible.len()),
        RandomMode::Hash => (mix64(req_id.key() ^ hash_seed) % eligible.len() as u64) as usize,
    };
    eligible[i]
}

/// Worker count of the single rack-wide queue that global policies model:
/// every worker of every active server fed from one queue.
pub fn pooled_workers(workers: &[u32], active: &[bool]) -> usize {
    workers.iter().zip(active).filter(|(_, a)| **a).map(|(w, _)| *w as usize).sum()
}

/// A client's private view of server loads, refreshed only by its own replies.
#[derive(Clone, Debug)]
pub struct ClientView {
    n_keys: usize,
    estimates: Vec<f64>,
    local_increment: bool,
}

impl ClientView {
    pub fn new(servers: usize, n_keys: usize, local_increment: bool) -> Self {
        let n_keys = n_keys.max(1);
        ClientView { n_keys, estimates: vec![0.0; servers * n_keys], local_increment }
    }

    fn idx(&self, server: usize, key: usize) -> usize {
        server * self.n_keys + key.min(self.n_keys - 1)
    }

    pub fn estimate(&self, server: usize, key: usize) -> f64 {
        self.estimates[self.idx(server, key)]
    }

    /// Power-of-k over this client's estimates. With local increments on, the
    /// chosen server's estimate is bumped so a burst from one client spreads
    /// out before any reply comes back.
    pub fn choose<R: Rng + ?Sized>(&mut self, eligible: &[usize], key: usize, k: usize, rng: &mut R) -> usize {
        let s = sample_min(eligible, k, |s| self.estimate(s, key), rng);
        if self.local_increment {
            let i = self.idx(s, key);
            self.estimates[i] += 1.0;
        }
        s
    }

    pub fn on_reply(&mut self, server: usize, key: usize, load: f64) {
        let i = self.idx(server, key);
        self.estimates[i] = load;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{rng_stream, StreamId};

    fn id(seq: u64) -> ReqId {
        ReqId { client: 1, seq }
    }

    #[test]
    fn single_server_always_chosen() {
        let mut rng = rng_stream(0, StreamId::Sampling);
        for mode in [RandomMode::Uniform, RandomMode::Hash] {
            assert!((0..100).all(|i| dispatch_random(id(i), &[4], mode, 0, &mut rng) == 4));
        }
    }

    #[test]
    fn uniform_spreads_evenly() {
        let mut rng = rng_stream(1, StreamId::Sampling);
        let eligible: Vec<usize> = (0..8).collect();
        let mut counts = [0u64; 8];
        let n = 1_000_000;
        for i in 0..n {
            counts[dispatch_random(id(i), &eligible, RandomMode::Uniform, 0, &mut rng)] += 1;
        }
        for c in counts {
            let share = c as f64 / n as f64;
            assert!((share - 0.125).abs() < 0.002, "{share}");
        }
    }

    #[test]
    fn hash_mode_is_sticky() {
        let mut rng = rng_stream(1, StreamId::Sampling);
        let eligible: Vec<usize> = (0..8).collect();
        for i in 0..1000 {
            let a = dispatch_random(id(i), &eligible, RandomMode::Hash, 77, &mut rng);
            let b = dispatch_random(id(i), &eligible, RandomMode::Hash, 77, &mut rng);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pooled_counts_active_workers() {
        assert_eq!(pooled_workers(&[8; 8], &[true; 8]), 64);
        assert_eq!(pooled_workers(&[4, 7], &[true, false]), 4);
    }

    #[test]
    fn reply_sets_estimate() {
        let mut v = ClientView::new(4, 1, true);
        v.on_reply(2, 0, 4.0);
        assert_eq!(v.estimate(2, 0), 4.0);
    }

    #[test]
    fn local_increment_spreads_a_burst() {
        let mut rng = rng_stream(2, StreamId::Sampling);
        let eligible: Vec<usize> = (0..4).collect();
        let mut v = ClientView::new(4, 1, true);
        let picks: Vec<usize> = (0..4).map(|_| v.choose(&eligible, 0, 4, &mut rng)).collect();
        assert_eq!(picks, vec![0, 1, 2, 3]);
        let mut stale = ClientView::new(4, 1, false);
        assert!((0..4).all(|_| stale.choose(&eligible, 0, 4, &mut rng) == 0));
    }
}

//! Per-run measurements.

use std::collections::BTreeMap;

use super::quantile_sorted;

/// Completions per time bucket over the whole run, by class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timeline {
    pub bucket_us: f64,
    pub per_class: BTreeMap<u32, Vec<u64>>,
}

impl Timeline {
    pub fn new(bucket_us: f64) -> Self {
        Timeline { bucket_us, per_class: BTreeMap::new() }
    }

    pub fn record(&mut self, class_tag: u32, at_us: f64) {
        let b = (at_us / self.bucket_us) as usize;
        let v = self.per_class.entry(class_tag).or_default();
        if v.len() <= b {
            v.resize(b + 1, 0);
        }
        v[b] += 1;
    }

    /// Completions per bucket summed over classes.
    pub fn total(&self) -> Vec<u64> {
        let len = self.per_class.values().map(Vec::len).max().unwrap_or(0);
        let mut out = vec![0; len];
        for v in self.per_class.values() {
            for (o, c) in out.iter_mut().zip(v) {
                *o += c;
            }
        }
        out
    }

    pub fn class(&self, class_tag: u32) -> &[u64] {
        self.per_class.get(&class_tag).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Histograms of per-server queue lengths sampled at Poisson epochs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueueSamples {
    /// Requests present (queued and in service).
    pub present: Vec<u64>,
    /// Requests waiting for a worker.
    pub waiting: Vec<u64>,
}

impl QueueSamples {
    pub fn record(&mut self, present: usize, waiting: usize) {
        bump(&mut self.present, present);
        bump(&mut self.waiting, waiting);
    }

    pub fn samples(&self) -> u64 {
        self.present.iter().sum()
    }

    /// Fraction of samples with at least `n` waiting requests.
    pub fn waiting_at_least(&self, n: usize) -> f64 {
        tail(&self.waiting, n)
    }

    pub fn present_at_least(&self, n: usize) -> f64 {
        tail(&self.present, n)
    }
}

fn bump(h: &mut Vec<u64>, i: usize) {
    if h.len() <= i {
        h.resize(i + 1, 0);
    }
    h[i] += 1;
}

fn tail(h: &[u64], n: usize) -> f64 {
    let total: u64 = h.iter().sum();
    if total == 0 {
        return 0.0;
    }
    h.iter().skip(n).sum::<u64>() as f64 / total as f64
}

/// Turns a histogram of counts into a probability vector.
pub fn normalize(h: &[u64]) -> Vec<f64> {
    let total: u64 = h.iter().sum();
    if total == 0 {
        return vec![0.0; h.len()];
    }
    h.iter().map(|&c| c as f64 / total as f64).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    /// Sojourn times of measured requests, by class, in completion order.
    pub latencies: BTreeMap<u32, Vec<f64>>,
    /// Measurement window `[start, end)` in µs.
    pub window_us: (f64, f64),
    /// Requests that arrived inside the window.
    pub offered: u64,
    /// Window requests that completed.
    pub completed: u64,
    /// Window requests that were lost (drops, crashes, reply loss).
    pub lost: u64,
    pub injected_total: u64,
    pub completed_total: u64,
    pub lost_total: u64,
    pub in_flight: u64,
    pub fallback_inserts: u64,
    pub fallback_reads: u64,
    pub dropped_packets: u64,
    /// Completed requests whose packets reached more than one server.
    pub affinity_violations: u64,
    /// First-packet deliveries per server for window requests.
    pub dispatch_histogram: Vec<u64>,
    pub timeline: Option<Timeline>,
    pub queue_samples: Option<QueueSamples>,
    pub max_table_occupancy: usize,
    /// Table occupancy right after each switch recovery.
    pub occupancy_after_recovery: Vec<usize>,
    pub events: u64,
    /// Rolling hash over every dispatched event.
    pub trace_fingerprint: u64,
    pub end_time_us: f64,
}

impl MetricsRecord {
    fn window_len_s(&self) -> f64 {
        (self.window_us.1 - self.window_us.0) * 1e-6
    }

    /// Requests per second that arrived during the window.
    pub fn offered_rps(&self) -> f64 {
        let w = self.window_len_s();
        if w > 0.0 {
            self.offered as f64 / w
        } else {
            0.0
        }
    }

    /// Requests per second of window arrivals that completed.
    pub fn achieved_rps(&self) -> f64 {
        let w = self.window_len_s();
        if w > 0.0 {
            self.completed as f64 / w
        } else {
            0.0
        }
    }

    pub fn class_offered(&self, class_tag: u32) -> usize {
        self.latencies.get(&class_tag).map_or(0, Vec::len)
    }

    pub fn all_latencies(&self) -> Vec<f64> {
        self.latencies.values().flatten().copied().collect()
    }

    /// Sorted latencies of one class, or of all classes for `None`.
    pub fn sorted(&self, class_tag: Option<u32>) -> Vec<f64> {
        let mut v = match class_tag {
            Some(c) => self.latencies.get(&c).cloned().unwrap_or_default(),
            None => self.all_latencies(),
        };
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn quantile(&self, class_tag: Option<u32>, p: f64) -> Option<f64> {
        quantile_sorted(&self.sorted(class_tag), p)
    }

    pub fn p99(&self) -> f64 {
        self.quantile(None, 0.99).unwrap_or(f64::NAN)
    }

    pub fn mean(&self, class_tag: Option<u32>) -> Option<f64> {
        let v = self.sorted(class_tag);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn fallback_count(&self) -> u64 {
        self.fallback_inserts + self.fallback_reads
    }
}

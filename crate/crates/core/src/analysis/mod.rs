//! Tail estimators and the queueing-theory oracles the simulator is checked
//! against.

pub mod metrics;

use thiserror::Error;

use crate::rack::{run, Dispatch, NetworkConfig, RunConfig, RunError};
use crate::server::IntraPolicy;
use crate::switch::{SchedulingPolicy, TrackingConfig, TrackingKind};
use crate::workload::{ServiceDistribution, WorkloadSpec};

pub use metrics::MetricsRecord;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("utilization {0} must lie strictly between 0 and 1")]
    Unstable(f64),
    #[error("server count must be at least one")]
    NoServers,
    #[error("service distributions must have equal means ({0} vs {1})")]
    UnequalMeans(f64, f64),
    #[error(transparent)]
    Run(#[from] RunError),
}

/// Nearest-rank quantile of already sorted samples.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() || !(p > 0.0 && p <= 1.0) {
        return None;
    }
    let n = sorted.len();
    // Guard against 0.99 * 100 landing a hair above 99.
    let rank = ((p * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Some(sorted[rank.min(n) - 1])
}

/// Nearest-rank quantile; `None` for empty input.
pub fn quantile(samples: &[f64], p: f64) -> Option<f64> {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

/// Tail of the JSQ equilibrium over `k` servers: `x[n] = rho^(n k)`, read as
/// the probability that a tagged server has at least `n` waiting requests.
pub fn jsq_equilibrium(rho: f64, k: usize, n_max: usize) -> Result<Vec<f64>, AnalysisError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(AnalysisError::Unstable(rho));
    }
    if k == 0 {
        return Err(AnalysisError::NoServers);
    }
    Ok((0..=n_max).map(|n| rho.powi((n * k) as i32)).collect())
}

/// Mean sojourn time of an M/M/1 queue; rates per µs.
pub fn mm1_sojourn(lambda: f64, mu: f64) -> Result<f64, AnalysisError> {
    if !(lambda >= 0.0 && lambda < mu) {
        return Err(AnalysisError::Unstable(lambda / mu));
    }
    Ok(1.0 / (mu - lambda))
}

/// Total-variation distance between two probability vectors, padding the
/// shorter one with zeros.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len().max(q.len());
    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    0.5 * (0..n).map(|i| (at(p, i) - at(q, i)).abs()).sum::<f64>()
}

/// Intra-server discipline used by [`insensitivity_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discipline {
    Ps,
    Fcfs,
}

/// Settings of an insensitivity comparison run.
#[derive(Clone, Debug)]
pub struct InsensitivitySetup {
    pub servers: usize,
    pub rho: f64,
    pub discipline: Discipline,
    pub requests: u64,
    pub seeds: Vec<u64>,
}

/// Runs exact JSQ over single-worker servers under two service laws with the
/// same mean and returns the total-variation distance between the pooled
/// per-server queue-length histograms.
pub fn insensitivity_check(
    setup: &InsensitivitySetup,
    dist_a: &ServiceDistribution,
    dist_b: &ServiceDistribution,
) -> Result<f64, AnalysisError> {
    let (ma, mb) = (dist_a.mean(), dist_b.mean());
    if ((ma - mb) / ma).abs() > 1e-3 {
        return Err(AnalysisError::UnequalMeans(ma, mb));
    }
    // The second law gets its own seeds so identical laws still show sampling
    // noise rather than a distance of exactly zero.
    let hist = |dist: &ServiceDistribution, salt: u64| -> Result<Vec<u64>, AnalysisError> {
        let mut total: Vec<u64> = Vec::new();
        for &seed in &setup.seeds {
            let m = run(jsq_config(setup, dist, seed ^ salt))?;
            let h = m.queue_samples.expect("sampling enabled").present;
            if total.len() < h.len() {
                total.resize(h.len(), 0);
            }
            total.iter_mut().zip(&h).for_each(|(t, c)| *t += c);
        }
        Ok(total)
    };
    let a = metrics::normalize(&hist(dist_a, 0)?);
    let b = metrics::normalize(&hist(dist_b, 0x5bd1_e995)?);
    Ok(tv_distance(&a, &b))
}

/// Exact JSQ: switch-side counters updated on every dispatch and reply, with
/// no feedback delay.
pub fn jsq_config(setup: &InsensitivitySetup, dist: &ServiceDistribution, seed: u64) -> RunConfig {
    let intra = match setup.discipline {
        Discipline::Ps => IntraPolicy::Ps { slice_us: 25.0 },
        Discipline::Fcfs => IntraPolicy::Cfcfs { preempt_threshold_us: None },
    };
    let mut cfg = RunConfig::new(
        setup.servers,
        1,
        WorkloadSpec::single(dist.clone()),
        Dispatch::Switch(SchedulingPolicy::Shortest),
        intra,
    );
    cfg.tracking = TrackingConfig::new(TrackingKind::Proactive);
    cfg.network = NetworkConfig::zero();
    cfg.context_switch_us = 0.0;
    cfg.load_fraction = setup.rho;
    cfg.requests = setup.requests;
    cfg.seed = seed;
    cfg.sample_queues = true;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{rng_stream, StreamId};

    #[test]
    fn nearest_rank_cases() {
        assert_eq!(quantile(&[10.0], 0.99), Some(10.0));
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.99), Some(99.0));
        assert_eq!(quantile(&v, 0.5), Some(50.0));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn exponential_p99() {
        let d = ServiceDistribution::exponential(50.0);
        let mut rng = rng_stream(4, StreamId::Service);
        let v: Vec<f64> = (0..1_000_000).map(|_| d.sample(&mut rng)).collect();
        let p99 = quantile(&v, 0.99).unwrap();
        let exact = 50.0 * 100f64.ln();
        assert!((p99 - exact).abs() < 3.0, "{p99} vs {exact}");
    }

    #[test]
    fn equilibrium_values() {
        assert_eq!(jsq_equilibrium(0.5, 8, 1).unwrap()[1], 0.00390625);
        assert!((jsq_equilibrium(0.9, 2, 2).unwrap()[2] - 0.6561).abs() < 1e-12);
        let single = jsq_equilibrium(0.3, 1, 4).unwrap();
        for (n, x) in single.iter().enumerate() {
            assert!((x - 0.3f64.powi(n as i32)).abs() < 1e-15);
        }
        assert_eq!(jsq_equilibrium(1.0, 4, 3), Err(AnalysisError::Unstable(1.0)));
    }

    #[test]
    fn mm1_closed_form() {
        assert!((mm1_sojourn(0.01, 0.02).unwrap() - 100.0).abs() < 1e-9);
        assert!((mm1_sojourn(0.015, 0.02).unwrap() - 200.0).abs() < 1e-9);
        assert!((mm1_sojourn(0.0, 0.02).unwrap() - 50.0).abs() < 1e-9);
        assert!(mm1_sojourn(0.02, 0.02).is_err());
    }

    #[test]
    fn tv_basics() {
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert_eq!(tv_distance(&[1.0], &[0.0, 1.0]), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn quantile_is_monotone(v in proptest::collection::vec(0.0f64..1e4, 1..300), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            proptest::prop_assert!(quantile(&v, lo).unwrap() <= quantile(&v, hi).unwrap());
        }
    }
}

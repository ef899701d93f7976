//! Sweeps over (load, seed) points, result CSVs, run manifests and
//! comparisons between two result files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::MetricsRecord;
use crate::config::{ConfigError, ExperimentConfig};
use crate::rack::{run, RunError};

pub const CSV_HEADER: [&str; 10] = [
    "load_fraction",
    "offered_rps",
    "achieved_rps",
    "class_tag",
    "p50_us",
    "p99_us",
    "p999_us",
    "mean_us",
    "fallback_count",
    "seed",
];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("load {load} seed {seed}: {source}")]
    Run { load: f64, seed: u64, source: RunError },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error in {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("result grids differ: {0}")]
    GridMismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub load_fraction: f64,
    pub offered_rps: f64,
    pub achieved_rps: f64,
    pub class_tag: u32,
    pub p50_us: f64,
    pub p99_us: f64,
    pub p999_us: f64,
    pub mean_us: f64,
    pub fallback_count: u64,
    pub seed: u64,
}

impl ResultRow {
    fn record(&self) -> [String; 10] {
        [
            format!("{:.4}", self.load_fraction),
            format!("{:.1}", self.offered_rps),
            format!("{:.1}", self.achieved_rps),
            self.class_tag.to_string(),
            format!("{:.3}", self.p50_us),
            format!("{:.3}", self.p99_us),
            format!("{:.3}", self.p999_us),
            format!("{:.3}", self.mean_us),
            self.fallback_count.to_string(),
            self.seed.to_string(),
        ]
    }
}

/// One row per class for a finished sweep point. Classes with no measured
/// completions report NaN latencies.
pub fn rows_for_point(cfg: &ExperimentConfig, load: f64, seed: u64, m: &MetricsRecord) -> Vec<ResultRow> {
    let mut tags: Vec<u32> = cfg.workload.classes.iter().map(|c| c.class_tag).collect();
    tags.sort_unstable();
    tags.into_iter()
        .map(|tag| {
            let q = |p| m.quantile(Some(tag), p).unwrap_or(f64::NAN);
            ResultRow {
                load_fraction: load,
                offered_rps: m.offered_rps(),
                achieved_rps: m.achieved_rps(),
                class_tag: tag,
                p50_us: q(0.5),
                p99_us: q(0.99),
                p999_us: q(0.999),
                mean_us: m.mean(Some(tag)).unwrap_or(f64::NAN),
                fallback_count: m.fallback_count(),
                seed,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PointTiming {
    pub load_fraction: f64,
    pub seed: u64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub timings: Vec<PointTiming>,
    pub csv_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// Runs every (load, seed) point of `cfg`, using up to `parallel` threads,
/// and writes `results.csv` and `manifest.txt` under `out_dir`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    config_text: &str,
    out_dir: &Path,
    parallel: usize,
) -> Result<ExperimentOutput, ExperimentError> {
    let mut points = Vec::new();
    for &load in &cfg.sweep.load_fractions {
        for &seed in &cfg.sweep.seeds {
            points.push((load, seed, cfg.point(load, seed)?));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(parallel.max(1)).build()?;
    let results: Vec<Result<(Vec<ResultRow>, PointTiming), ExperimentError>> = pool.install(|| {
        points
            .into_par_iter()
            .map(|(load, seed, point)| {
                let start = Instant::now();
                let m = run(point).map_err(|source| ExperimentError::Run { load, seed, source })?;
                let timing = PointTiming { load_fraction: load, seed, wall_clock_s: start.elapsed().as_secs_f64() };
                Ok((rows_for_point(cfg, load, seed, &m), timing))
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for r in results {
        let (r, t) = r?;
        rows.extend(r);
        timings.push(t);
    }
    rows.sort_by(|a, b| {
        a.load_fraction
            .total_cmp(&b.load_fraction)
            .then(a.class_tag.cmp(&b.class_tag))
            .then(a.seed.cmp(&b.seed))
    });

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_path = out_dir.join("results.csv");
    write_csv(&csv_path, &rows)?;
    let manifest_path = out_dir.join("manifest.txt");
    fs::write(&manifest_path, manifest(cfg, config_text, &timings)).map_err(io_err(&manifest_path))?;
    Ok(ExperimentOutput { rows, timings, csv_path, manifest_path })
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<(), ExperimentError> {
    let csv_err = |source| ExperimentError::Csv { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.record()).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>, ExperimentError> {
    let csv_err = |source| ExperimentError::Csv { path: path.display().to_string(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if header != CSV_HEADER {
        return Err(ExperimentError::GridMismatch(format!("{} has an unexpected header", path.display())));
    }
    r.deserialize().collect::<Result<Vec<ResultRow>, _>>().map_err(csv_err)
}

pub fn config_hash(config_text: &str) -> String {
    Sha256::digest(config_text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn manifest(cfg: &ExperimentConfig, config_text: &str, timings: &[PointTiming]) -> String {
    let mut out = String::new();
    out.push_str(&format!("tool_version = {}\n", env!("CARGO_PKG_VERSION")));
    out.push_str(&format!("config_sha256 = {}\n", config_hash(config_text)));
    let seeds: Vec<String> = cfg.sweep.seeds.iter().map(u64::to_string).collect();
    out.push_str(&format!("seeds = {}\n", seeds.join(",")));
    out.push_str(&format!("requests_per_point = {}\n", cfg.sweep.requests_per_point));
    for t in timings {
        out.push_str(&format!("point load={:.4} seed={} wall_clock_s={:.3}\n", t.load_fraction, t.seed, t.wall_clock_s));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub load_fraction: f64,
    pub class_tag: u32,
    /// p99 averaged over seeds.
    pub p99_a: f64,
    pub p99_b: f64,
    pub ratio: f64,
}

type GridKey = (u64, u32, u64);

fn grid(rows: &[ResultRow]) -> BTreeSet<GridKey> {
    rows.iter().map(|r| (r.load_fraction.to_bits(), r.class_tag, r.seed)).collect()
}

/// Pairs two result sets point by point. Both must cover exactly the same
/// (load, class, seed) grid.
pub fn compare(a: &[ResultRow], b: &[ResultRow]) -> Result<Vec<ComparisonRow>, ExperimentError> {
    let (ga, gb) = (grid(a), grid(b));
    if ga != gb {
        let only_a = ga.difference(&gb).count();
        let only_b = gb.difference(&ga).count();
        return Err(ExperimentError::GridMismatch(format!(
            "{only_a} point(s) only in the first file, {only_b} only in the second"
        )));
    }
    let mean_p99 = |rows: &[ResultRow]| {
        let mut acc: BTreeMap<(u64, u32), (f64, u32)> = BTreeMap::new();
        for r in rows {
            let e = acc.entry((r.load_fraction.to_bits(), r.class_tag)).or_default();
            e.0 += r.p99_us;
            e.1 += 1;
        }
        acc
    };
    let (ma, mb) = (mean_p99(a), mean_p99(b));
    let mut out: Vec<ComparisonRow> = ma
        .iter()
        .map(|(&(load, class_tag), &(sa, na))| {
            let (sb, nb) = mb[&(load, class_tag)];
            let (p99_a, p99_b) = (sa / na as f64, sb / nb as f64);
            ComparisonRow { load_fraction: f64::from_bits(load), class_tag, p99_a, p99_b, ratio: p99_b / p99_a }
        })
        .collect();
    out.sort_by(|x, y| x.load_fraction.total_cmp(&y.load_fraction).then(x.class_tag.cmp(&y.class_tag)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(load: f64, class_tag: u32, seed: u64, p99: f64) -> ResultRow {
        ResultRow {
            load_fraction: load,
            offered_rps: 1.0,
            achieved_rps: 1.0,
            class_tag,
            p50_us: 1.0,
            p99_us: p99,
            p999_us: p99,
            mean_us: 1.0,
            fallback_count: 0,
            seed,
        }
    }

    #[test]
    fn compare_averages_seeds() {
        let a = vec![row(0.5, 0, 1, 100.0), row(0.5, 0, 2, 200.0)];
        let b = vec![row(0.5, 0, 1, 300.0), row(0.5, 0, 2, 300.0)];
        let c = compare(&a, &b).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].p99_a, 150.0);
        assert_eq!(c[0].ratio, 2.0);
    }

    #[test]
    fn compare_rejects_mismatched_grids() {
        let a = vec![row(0.5, 0, 1, 100.0)];
        let b = vec![row(0.6, 0, 1, 100.0)];
        assert!(matches!(compare(&a, &b), Err(ExperimentError::GridMismatch(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![row(0.5, 0, 1, 123.25), row(0.7, 1, 2, 9.5)];
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_csv(&p).unwrap(), rows);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(&CSV_HEADER.join(",")));
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}

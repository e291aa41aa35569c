//! Closed-loop throughput measurement, K/M sweeps and CSV output.
//!
//! A run keeps exactly `concurrency` requests in flight: each worker thread scores a
//! request, and the moment it returns, scores the next. Requests come from a pool
//! generated before the clock starts, so RNG cost stays out of the measured path.

use std::io::{Read, Write};
use std::sync::Barrier;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Request, Scorer, Variant};
use crate::tensor::{max_rel_err, FlopCounter};

/// Upper bound on pooled requests.
pub const POOL_REQUESTS: usize = 1024;
/// Upper bound on pooled embedding bytes.
pub const POOL_BYTES: usize = 256 << 20;
/// Score agreement required between variants before a sweep point is timed.
pub const SCORE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub concurrency: usize,
    pub duration_s: f64,
    pub warmup_s: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            concurrency: 64,
            duration_s: 10.0,
            warmup_s: 2.0,
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            return Err(Error::InvalidCount("concurrency must be at least 1".into()));
        }
        if !(self.duration_s > 0.0) || !(self.warmup_s >= 0.0) {
            return Err(Error::InvalidCount(format!(
                "duration must be positive and warmup non-negative, got {} and {}",
                self.duration_s, self.warmup_s
            )));
        }
        Ok(())
    }
}

/// Pre-generated requests shared read-only by every worker.
#[derive(Debug, Clone)]
pub struct RequestPool {
    requests: Vec<Request>,
}

impl RequestPool {
    /// Up to [`POOL_REQUESTS`] requests, fewer if they would exceed [`POOL_BYTES`], but
    /// never fewer than `min_requests`.
    pub fn generate(spec: &ModelSpec, min_requests: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let bytes = (spec.k + spec.n * spec.m).max(1) * spec.d * std::mem::size_of::<f32>();
        let size = (POOL_BYTES / bytes).clamp(1, POOL_REQUESTS).max(min_requests);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            requests: (0..size).map(|_| Request::random(spec, &mut rng)).collect(),
        })
    }

    pub fn from_requests(requests: Vec<Request>) -> Result<Self> {
        if requests.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(Self { requests })
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }
}

/// Result of one closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Measurement {
    /// Completions inside the measurement window per second of window.
    pub rps: f64,
    pub completed: u64,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub concurrency: usize,
    pub duration_s: f64,
    pub warmup_s: f64,
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

struct WorkerOutput {
    latencies_us: Vec<f64>,
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "non-string panic payload".into())
}

fn run_context(spec: &ModelSpec) -> String {
    format!(
        "{:?}/{} k={} m={} d={} n={}",
        spec.architecture, spec.variant, spec.k, spec.m, spec.d, spec.n
    )
}

/// Anything that turns a request into scores; [`Scorer`] is the production one.
pub trait ScoreFn: Sync {
    fn score(&self, req: &Request, counter: &mut FlopCounter) -> Result<Vec<f32>>;
    fn describe(&self) -> String;
}

impl ScoreFn for Scorer {
    fn score(&self, req: &Request, counter: &mut FlopCounter) -> Result<Vec<f32>> {
        Scorer::score(self, req, counter)
    }

    fn describe(&self) -> String {
        run_context(self.spec())
    }
}

/// Runs `config.concurrency` workers against `scorer` for warmup plus duration.
/// A completion counts if it lands inside the measurement window.
pub fn run_closed_loop<S: ScoreFn + ?Sized>(
    scorer: &S,
    pool: &RequestPool,
    config: &RunConfig,
) -> Result<Measurement> {
    config.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let workers = config.concurrency;
    let barrier = Barrier::new(workers + 1);
    let stride = (pool.len() / workers).max(1);
    let warmup = Duration::from_secs_f64(config.warmup_s);
    let window = Duration::from_secs_f64(config.duration_s);
    let start_cell = std::sync::OnceLock::<Instant>::new();

    let outputs: Vec<std::thread::Result<Result<WorkerOutput>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (barrier, start_cell) = (&barrier, &start_cell);
                s.spawn(move || -> Result<WorkerOutput> {
                    barrier.wait();
                    let start = *start_cell.get().expect("start set before release");
                    let (measure_from, stop_at) = (start + warmup, start + warmup + window);
                    let mut counter = FlopCounter::new();
                    let mut latencies_us = Vec::new();
                    let mut idx = (w * stride) % pool.len();
                    loop {
                        let began = Instant::now();
                        if began >= stop_at {
                            break;
                        }
                        let scores = scorer.score(&pool.requests[idx], &mut counter).map_err(|e| {
                            Error::Worker {
                                worker: w,
                                context: scorer.describe(),
                                message: e.to_string(),
                            }
                        })?;
                        std::hint::black_box(scores);
                        let done = Instant::now();
                        if done >= measure_from && done <= stop_at {
                            latencies_us.push((done - began).as_secs_f64() * 1e6);
                        }
                        idx = (idx + 1) % pool.len();
                    }
                    Ok(WorkerOutput { latencies_us })
                })
            })
            .collect();
        start_cell.set(Instant::now()).expect("start set once");
        barrier.wait();
        handles.into_iter().map(|h| h.join()).collect()
    });

    let mut latencies = Vec::new();
    for (w, out) in outputs.into_iter().enumerate() {
        match out {
            Ok(Ok(o)) => latencies.extend(o.latencies_us),
            Ok(Err(e)) => return Err(e),
            Err(payload) => {
                return Err(Error::Worker {
                    worker: w,
                    context: scorer.describe(),
                    message: panic_message(payload),
                })
            }
        }
    }
    if latencies.is_empty() {
        return Err(Error::Worker {
            worker: 0,
            context: scorer.describe(),
            message: "no request completed inside the measurement window".into(),
        });
    }
    latencies.sort_by(f64::total_cmp);
    let completed = latencies.len() as u64;
    Ok(Measurement {
        rps: completed as f64 / config.duration_s,
        completed,
        mean_us: latencies.iter().sum::<f64>() / completed as f64,
        p50_us: percentile(&latencies, 0.50),
        p99_us: percentile(&latencies, 0.99),
        concurrency: workers,
        duration_s: config.duration_s,
        warmup_s: config.warmup_s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    K,
    M,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" | "K" => Ok(Self::K),
            "m" | "M" => Ok(Self::M),
            other => Err(Error::InvalidSpec(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::K => "k",
            Self::M => "m",
        })
    }
}

/// One CSV row. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub sweep_param: SweepParam,
    pub value: usize,
    pub variant: Variant,
    pub rps: f64,
    pub normalized_rps: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub concurrency: usize,
    pub duration_s: f64,
    #[serde(skip)]
    pub warmup_s: f64,
}

pub const CSV_HEADER: &str =
    "sweep_param,value,variant,rps,normalized_rps,p50_us,p99_us,concurrency,duration_s";

impl BenchRecord {
    pub fn from_measurement(param: SweepParam, value: usize, variant: Variant, m: &Measurement) -> Self {
        Self {
            sweep_param: param,
            value,
            variant,
            rps: m.rps,
            normalized_rps: f64::NAN,
            p50_us: m.p50_us,
            p99_us: m.p99_us,
            concurrency: m.concurrency,
            duration_s: m.duration_s,
            warmup_s: m.warmup_s,
        }
    }
}

pub fn spec_at(base: &ModelSpec, param: SweepParam, value: usize) -> ModelSpec {
    let mut spec = base.clone();
    match param {
        SweepParam::K => spec.k = value,
        SweepParam::M => spec.m = value,
    }
    spec
}

/// Fails unless both variants produce the same scores on the first requests of `pool`.
pub fn check_equivalence(vanilla: &Scorer, rank_aware: &Scorer, pool: &RequestPool) -> Result<f64> {
    let mut worst = 0.0f64;
    for req in pool.requests().iter().take(4) {
        let a = vanilla.score(req, &mut FlopCounter::new())?;
        let b = rank_aware.score(req, &mut FlopCounter::new())?;
        worst = worst.max(max_rel_err(&b, &a));
    }
    if worst > SCORE_TOL {
        return Err(Error::InvalidSpec(format!(
            "variants disagree at {}: relative error {worst:e} > {SCORE_TOL:e}",
            run_context(vanilla.spec())
        )));
    }
    Ok(worst)
}

/// Benchmarks both variants at each value. `normalized_rps` is relative to the first
/// value's vanilla run. `on_record` sees each record as soon as it is measured, before
/// normalization.
pub fn sweep_with(
    base: &ModelSpec,
    param: SweepParam,
    values: &[usize],
    config: &RunConfig,
    mut on_record: impl FnMut(&BenchRecord),
) -> Result<Vec<BenchRecord>> {
    if values.is_empty() {
        return Err(Error::InvalidSpec("sweep needs at least one value".into()));
    }
    config.validate()?;
    let mut records = Vec::with_capacity(2 * values.len());
    for &value in values {
        let spec = spec_at(base, param, value);
        let pool = RequestPool::generate(&spec, config.concurrency, spec.seed ^ 0x5eed)?;
        let vanilla = Scorer::build(&spec.with_variant(Variant::Vanilla))?;
        let rank_aware = Scorer::build(&spec.with_variant(Variant::RankAware))?;
        check_equivalence(&vanilla, &rank_aware, &pool)?;
        for scorer in [&vanilla, &rank_aware] {
            let m = run_closed_loop(scorer, &pool, config)?;
            let record = BenchRecord::from_measurement(param, value, scorer.spec().variant, &m);
            on_record(&record);
            records.push(record);
        }
    }
    let baseline = records[0].rps;
    for r in &mut records {
        r.normalized_rps = r.rps / baseline;
    }
    records[0].normalized_rps = 1.0;
    Ok(records)
}

pub fn sweep(base: &ModelSpec, param: SweepParam, values: &[usize], config: &RunConfig) -> Result<Vec<BenchRecord>> {
    sweep_with(base, param, values, config, |_| {})
}

pub fn write_csv<W: Write>(records: &[BenchRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::InvalidSpec(format!(
            "unexpected CSV header {:?}, want {CSV_HEADER:?}",
            header.join(",")
        )));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// `(value, rank_aware_rps / vanilla_rps)` in record order.
pub fn speedups(records: &[BenchRecord]) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.variant == Variant::Vanilla) {
        if let Some(ra) = records
            .iter()
            .find(|o| o.variant == Variant::RankAware && o.value == r.value && o.sweep_param == r.sweep_param)
        {
            out.push((r.value, ra.rps / r.rps));
        }
    }
    out
}

/// Normalized-RPS table: one row per sweep value, both variants and their ratio.
pub fn format_report(records: &[BenchRecord]) -> String {
    let mut out = String::new();
    let param = records.first().map_or("value".to_string(), |r| r.sweep_param.to_string());
    out.push_str(&format!(
        "{:>6}  {:>12}  {:>12}  {:>9}  {:>11}  {:>11}\n",
        param, "vanilla", "rank_aware", "speedup", "van p99 us", "ra p99 us"
    ));
    for (value, speedup) in speedups(records) {
        let find = |v: Variant| records.iter().find(|r| r.value == value && r.variant == v);
        let (Some(a), Some(b)) = (find(Variant::Vanilla), find(Variant::RankAware)) else {
            continue;
        };
        out.push_str(&format!(
            "{:>6}  {:>12.3}  {:>12.3}  {:>8.2}x  {:>11.1}  {:>11.1}\n",
            value, a.normalized_rps, b.normalized_rps, speedup, a.p99_us, b.p99_us
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelSpec {
        ModelSpec {
            k: 2,
            m: 1,
            d: 2,
            n: 2,
            fc_units: vec![2],
            ..ModelSpec::default()
        }
    }

    #[test]
    fn percentiles() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&xs, 0.5), 50.0);
        assert_eq!(percentile(&xs, 0.99), 99.0);
        assert_eq!(percentile(&[3.0], 0.99), 3.0);
        assert_eq!(percentile(&[], 0.5), 0.0);
    }

    #[test]
    fn pool_respects_bounds() {
        let pool = RequestPool::generate(&tiny(), 1, 3).unwrap();
        assert_eq!(pool.len(), POOL_REQUESTS);
        let big = ModelSpec { n: 4096, m: 64, d: 64, ..tiny() };
        let bytes = 4096 * 64 * 64 * 4;
        assert!(POOL_BYTES / bytes < 8);
        assert_eq!(RequestPool::generate(&big, 8, 3).unwrap().len(), 8);
    }

    #[test]
    fn invalid_config() {
        let s = Scorer::build(&tiny()).unwrap();
        let pool = RequestPool::generate(&tiny(), 1, 1).unwrap();
        let bad = RunConfig { concurrency: 0, ..RunConfig::default() };
        assert!(run_closed_loop(&s, &pool, &bad).is_err());
        let bad = RunConfig { duration_s: 0.0, ..RunConfig::default() };
        assert!(run_closed_loop(&s, &pool, &bad).is_err());
        assert!(sweep(&tiny(), SweepParam::K, &[], &RunConfig::default()).is_err());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let m = Measurement {
            rps: 10.0,
            completed: 10,
            mean_us: 1.0,
            p50_us: 1.0,
            p99_us: 2.0,
            concurrency: 4,
            duration_s: 1.0,
            warmup_s: 0.5,
        };
        let mut r = BenchRecord::from_measurement(SweepParam::M, 8, Variant::RankAware, &m);
        r.normalized_rps = 1.5;
        let mut buf = Vec::new();
        write_csv(&[r.clone()], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert!(text.contains("m,8,rank_aware,"));
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0].warmup_s, 0.0);
        assert_eq!(BenchRecord { warmup_s: 0.5, ..back[0].clone() }, r);
        assert!(read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn speedup_pairs_by_value() {
        let m = |rps| Measurement {
            rps,
            completed: 1,
            mean_us: 1.0,
            p50_us: 1.0,
            p99_us: 1.0,
            concurrency: 1,
            duration_s: 1.0,
            warmup_s: 0.0,
        };
        let recs = vec![
            BenchRecord::from_measurement(SweepParam::K, 8, Variant::Vanilla, &m(10.0)),
            BenchRecord::from_measurement(SweepParam::K, 8, Variant::RankAware, &m(15.0)),
            BenchRecord::from_measurement(SweepParam::K, 12, Variant::Vanilla, &m(5.0)),
            BenchRecord::from_measurement(SweepParam::K, 12, Variant::RankAware, &m(10.0)),
        ];
        assert_eq!(speedups(&recs), vec![(8, 1.5), (12, 2.0)]);
        assert!(format_report(&recs).contains("2.00x"));
    }

    #[test]
    fn sweep_param_parsing() {
        assert_eq!("k".parse::<SweepParam>().unwrap(), SweepParam::K);
        assert!("x".parse::<SweepParam>().is_err());
    }
}

use rankaware::bench::{
    read_csv, run_closed_loop, sweep, write_csv, RequestPool, RunConfig, ScoreFn, SweepParam, CSV_HEADER,
};
use rankaware::model::{Architecture, ModelSpec, Request, Scorer, Variant};
use rankaware::{Error, FlopCounter, Result};

fn small() -> ModelSpec {
    ModelSpec { architecture: Architecture::Dlrm, k: 4, m: 2, d: 8, n: 8, fc_units: vec![16], ..ModelSpec::default() }
}

fn config(concurrency: usize, duration_s: f64) -> RunConfig {
    RunConfig { concurrency, duration_s, warmup_s: 0.2 }
}

struct Panics;

impl ScoreFn for Panics {
    fn score(&self, _: &Request, _: &mut FlopCounter) -> Result<Vec<f32>> {
        panic!("scorer blew up")
    }

    fn describe(&self) -> String {
        "panics".into()
    }
}

struct Fails;

impl ScoreFn for Fails {
    fn score(&self, _: &Request, _: &mut FlopCounter) -> Result<Vec<f32>> {
        Err(Error::EmptyBatch)
    }

    fn describe(&self) -> String {
        "fails".into()
    }
}

fn littles_law_at_unit_concurrency() {
    let spec = small();
    let scorer = Scorer::build(&spec).unwrap();
    let pool = RequestPool::generate(&spec, 1, 7).unwrap();
    let m = run_closed_loop(&scorer, &pool, &config(1, 1.0)).unwrap();
    // one request in flight: throughput × latency ≈ 1
    let in_flight = m.rps * m.mean_us * 1e-6;
    assert!((0.8..=1.2).contains(&in_flight), "rps {} mean {} us", m.rps, m.mean_us);
    assert!(m.p50_us <= m.p99_us);
    assert_eq!(m.concurrency, 1);
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn rps_is_stable_across_durations() {
    // short and long windows alternate and each long one is compared with the short one
    // just before it, so slow host drift cancels; the median discards bursts
    let spec = small();
    let scorer = Scorer::build(&spec).unwrap();
    let pool = RequestPool::generate(&spec, 1, 7).unwrap();
    let (mut short, mut long) = (Vec::new(), Vec::new());
    for _ in 0..15 {
        short.push(run_closed_loop(&scorer, &pool, &config(1, 0.3)).unwrap().rps);
        long.push(run_closed_loop(&scorer, &pool, &config(1, 0.6)).unwrap().rps);
    }
    let ratio = median(long.iter().zip(&short).map(|(l, s)| l / s).collect());
    assert!((ratio - 1.0).abs() < 0.10, "short {short:?} long {long:?}");
}

fn rank_aware_wins_at_large_context() {
    let spec = ModelSpec { k: 24, m: 4, n: 100, ..ModelSpec::default() };
    let pool = RequestPool::generate(&spec, 4, 1).unwrap();
    let mut rps = Vec::new();
    for v in [Variant::Vanilla, Variant::RankAware] {
        let scorer = Scorer::build(&spec.with_variant(v)).unwrap();
        rps.push(run_closed_loop(&scorer, &pool, &config(4, 1.5)).unwrap().rps);
    }
    assert!(rps[1] >= rps[0], "vanilla {} rank-aware {}", rps[0], rps[1]);
}

fn worker_failures_surface() {
    let pool = RequestPool::generate(&small(), 2, 1).unwrap();
    let err = run_closed_loop(&Panics, &pool, &config(2, 0.2)).unwrap_err();
    assert!(matches!(&err, Error::Worker { message, .. } if message.contains("blew up")), "{err}");
    let err = run_closed_loop(&Fails, &pool, &config(2, 0.2)).unwrap_err();
    assert!(matches!(err, Error::Worker { .. }), "{err}");
    assert!(run_closed_loop(&Fails, &pool, &config(0, 0.2)).is_err());
}

fn single_point_sweep_anchors_and_round_trips() {
    let records = sweep(&small(), SweepParam::M, &[2], &config(1, 0.3)).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].variant, Variant::Vanilla);
    assert_eq!(records[0].normalized_rps, 1.0);
    assert!(records.iter().all(|r| r.sweep_param == SweepParam::M && r.value == 2 && r.rps > 0.0));

    let file = tempfile::NamedTempFile::new().unwrap();
    write_csv(&records, file.reopen().unwrap()).unwrap();
    let text = std::fs::read_to_string(file.path()).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    let back = read_csv(file.reopen().unwrap()).unwrap();
    let mut want = records.clone();
    // warmup is not a CSV column
    want.iter_mut().for_each(|r| r.warmup_s = 0.0);
    assert_eq!(back, want);
    assert!(read_csv("value,variant\n1,vanilla\n".as_bytes()).is_err());
}

// Timing checks share one test so they never contend with each other for cores.
#[test]
fn closed_loop_behaviour() {
    littles_law_at_unit_concurrency();
    rps_is_stable_across_durations();
    rank_aware_wins_at_large_context();
    worker_failures_surface();
    single_point_sweep_anchors_and_round_trips();
}

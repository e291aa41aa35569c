//! Equivalence and FLOP-audit suites behind the `verify` subcommand.
//!
//! Every case compares the rank-aware path against its vanilla counterpart, the
//! vanilla path against the f64 oracle, and both instrumented counters against the
//! closed forms in [`cost`](crate::cost).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{attention_assembled, attention_vanilla, AttnParams};
use crate::cost::{attention_cost, cross_cost, fc_cost, fm_cost, Accounting, CostReport, CrossVariant};
use crate::cross::{
    dcnv2_layer, dcnv2_stack, rdcn_stack, CrossParams, DecomposedFirstCross, RdcnParams, StackMode,
};
use crate::error::{Error, Result};
use crate::fc::{dense_vanilla, Activation, DenseParams, RankSplitDense};
use crate::fm::{fm_assemble, fm_decomposed, fm_vanilla, FmInput};
use crate::model::{model_cost, Architecture, CrossKind, ModelSpec, Request, Scorer, Variant};
use crate::oracle::{oracle_attention, oracle_cross, oracle_dense, oracle_fm, LINEAR_TOL, SOFTMAX_TOL};
use crate::tensor::{broadcast, concat_cols, max_rel_err, FlopCounter, Rank2Tensor, Rank3Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Fm,
    Fc,
    Cross,
    Attention,
    Model,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fm" => Self::Fm,
            "fc" => Self::Fc,
            "cross" => Self::Cross,
            "attention" => Self::Attention,
            "model" => Self::Model,
            "all" => Self::All,
            other => return Err(Error::InvalidSpec(format!("unknown suite {other:?}"))),
        })
    }
}

impl Suite {
    pub const EACH: [Suite; 5] = [Suite::Fm, Suite::Fc, Suite::Cross, Suite::Attention, Suite::Model];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fm => "fm",
            Self::Fc => "fc",
            Self::Cross => "cross",
            Self::Attention => "attention",
            Self::Model => "model",
            Self::All => "all",
        }
    }
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GridCase {
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
}

impl GridCase {
    pub fn rng(&self) -> ChaCha8Rng {
        let mix = (self.k as u64) | (self.m as u64) << 8 | (self.d as u64) << 16 | (self.n as u64) << 32;
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ mix)
    }

    pub fn inputs(&self, rng: &mut ChaCha8Rng) -> (Rank2Tensor, Rank3Tensor) {
        (
            Rank2Tensor::random_uniform(self.k, self.d, 1.0, rng),
            Rank3Tensor::random_uniform(self.n, self.m, self.d, 1.0, rng),
        )
    }
}

impl std::fmt::Display for GridCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "k={} m={} d={} n={} seed={}", self.k, self.m, self.d, self.n, self.seed)
    }
}

pub const GRID_FIELDS: std::ops::RangeInclusive<usize> = 0..=8;
pub const GRID_DIMS: [usize; 3] = [1, 4, 16];
pub const GRID_CANDIDATES: [usize; 3] = [1, 2, 17];

/// K, M in 0..=8, D in {1, 4, 16}, N in {1, 2, 17}, for each seed.
pub fn grid(seeds: &[u64]) -> Vec<GridCase> {
    let mut cases = Vec::new();
    for &seed in seeds {
        for k in GRID_FIELDS {
            for m in GRID_FIELDS {
                for d in GRID_DIMS {
                    for n in GRID_CANDIDATES {
                        cases.push(GridCase { k, m, d, n, seed });
                    }
                }
            }
        }
    }
    cases
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub cases: usize,
    /// Worst rank-aware vs vanilla relative error.
    pub max_rel_err: f64,
    /// Worst vanilla vs oracle relative error.
    pub max_oracle_err: f64,
    pub tolerance: f64,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(suite: &'static str, tolerance: f64) -> Self {
        Self {
            suite,
            cases: 0,
            max_rel_err: 0.0,
            max_oracle_err: 0.0,
            tolerance,
            failures: Vec::new(),
        }
    }

    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }

    fn values(&mut self, case: &str, rank_aware: &[f32], vanilla: &[f32], oracle: Option<&[f32]>) {
        let rel = max_rel_err(rank_aware, vanilla);
        self.max_rel_err = self.max_rel_err.max(rel);
        if !(rel <= self.tolerance) || rank_aware.len() != vanilla.len() {
            self.failures.push(format!("{case}: rank-aware vs vanilla {rel:e}"));
        }
        if let Some(o) = oracle {
            let rel = max_rel_err(vanilla, o);
            self.max_oracle_err = self.max_oracle_err.max(rel);
            if !(rel <= self.tolerance) || o.len() != vanilla.len() {
                self.failures.push(format!("{case}: vanilla vs oracle {rel:e}"));
            }
        }
    }

    fn macs(&mut self, case: &str, vanilla: &FlopCounter, rank_aware: &FlopCounter, want: &CostReport) {
        if vanilla.macs() != want.vanilla_macs || rank_aware.macs() != want.rank_aware_macs {
            self.failures.push(format!(
                "{case}: counters {}/{} vs closed form {}/{}",
                vanilla.macs(),
                rank_aware.macs(),
                want.vanilla_macs,
                want.rank_aware_macs
            ));
        }
    }
}

fn fm_case(case: &GridCase, report: &mut SuiteReport) -> Result<()> {
    if case.k + case.m < 2 {
        return Ok(());
    }
    let (ctx, tgt) = case.inputs(&mut case.rng());
    let input = FmInput::new(ctx.clone(), tgt.clone())?;
    let (mut cv, mut cr) = (FlopCounter::new(), FlopCounter::new());
    let vanilla = fm_vanilla(&input, &mut cv)?;
    let out = fm_decomposed(&input, &mut cr)?;
    let assembled = fm_assemble(&out.ctx_pairs, &out.tgt_pairs, case.k, case.m)?;
    let oracle = oracle_fm(&ctx, &tgt)?;
    let id = case.to_string();
    report.values(&id, assembled.data(), vanilla.data(), Some(oracle.data()));
    let (n, k, m, d) = (case.n as u64, case.k as u64, case.m as u64, case.d as u64);
    report.macs(&id, &cv, &cr, &fm_cost(n, k, m, d, Accounting::PerRequest)?);
    report.cases += 1;
    Ok(())
}

pub const FC_UNITS: usize = 8;

fn fc_case(case: &GridCase, report: &mut SuiteReport) -> Result<()> {
    let (xc, xt) = (case.k * case.d, case.m * case.d);
    if xc + xt == 0 {
        return Ok(());
    }
    let mut rng = case.rng();
    let (ctx, tgt) = case.inputs(&mut rng);
    let x_c = ctx.flatten();
    let x_t = tgt.flatten_candidates();
    let w = Rank2Tensor::random_uniform(xc + xt, FC_UNITS, 1.0, &mut rng);
    let b = Rank2Tensor::random_uniform(1, FC_UNITS, 1.0, &mut rng).into_data();
    let p = DenseParams::new(w, b, Activation::Relu)?;
    let (mut cv, mut cr) = (FlopCounter::new(), FlopCounter::new());
    let vanilla = dense_vanilla(&x_c, &x_t, &p, &mut cv)?;
    let split = RankSplitDense::new(&p, xc)?.forward(&x_c, &x_t, &mut cr)?;
    let oracle = oracle_dense(&x_c, &x_t, &p)?;
    let id = case.to_string();
    report.values(&id, split.data(), vanilla.data(), Some(oracle.data()));
    let want = fc_cost(case.n as u64, xc as u64, xt as u64, FC_UNITS as u64, Accounting::PerRequest)?;
    report.macs(&id, &cv, &cr, &want);
    report.cases += 1;
    Ok(())
}

pub const CROSS_LAYERS: usize = 2;

fn cross_case(case: &GridCase, report: &mut SuiteReport) -> Result<()> {
    let (d_c, d_t) = (case.k * case.d, case.m * case.d);
    if d_c + d_t == 0 {
        return Ok(());
    }
    let mut rng = case.rng();
    let (ctx, tgt) = case.inputs(&mut rng);
    let c0 = ctx.flatten();
    let t0 = tgt.flatten_candidates();
    let id = case.to_string();
    let (n, dc, dt) = (case.n as u64, d_c as u64, d_t as u64);

    // single decomposed first layer against the scalar oracle
    let first = CrossParams::random(d_c + d_t, &mut rng);
    let x0 = concat_cols(&broadcast(&c0, case.n)?, &t0)?;
    let (mut cv, mut cr) = (FlopCounter::new(), FlopCounter::new());
    let vanilla = dcnv2_layer(&x0, &x0, &first, &mut cv)?;
    let split = DecomposedFirstCross::new(&first, d_c)?.forward(&c0, &t0, &mut cr)?;
    let oracle = oracle_cross(&x0, &x0, &first.w, &first.b)?;
    report.values(&id, split.data(), vanilla.data(), Some(oracle.data()));
    let want = cross_cost(n, dc, dt, 1, CrossVariant::Dcnv2FirstLayer, Accounting::PerRequest)?;
    report.macs(&id, &cv, &cr, &want);

    let mut layers = vec![first];
    layers.extend((1..CROSS_LAYERS).map(|_| CrossParams::random(d_c + d_t, &mut rng)));
    let (mut cv, mut cr) = (FlopCounter::new(), FlopCounter::new());
    let vanilla = dcnv2_stack(&c0, &t0, &layers, StackMode::Vanilla, &mut cv)?;
    let split = dcnv2_stack(&c0, &t0, &layers, StackMode::RankAware, &mut cr)?;
    report.values(&format!("{id} stack"), split.data(), vanilla.data(), None);
    let l = CROSS_LAYERS as u64;
    report.macs(&id, &cv, &cr, &cross_cost(n, dc, dt, l, CrossVariant::Dcnv2FirstLayer, Accounting::PerRequest)?);

    // two-stream execution against its block-matrix form
    let rdcn: Vec<RdcnParams> = (0..CROSS_LAYERS).map(|_| RdcnParams::random(d_c, d_t, &mut rng)).collect();
    let blocks: Vec<CrossParams> = rdcn.iter().map(RdcnParams::block_matrix).collect();
    let (mut cv, mut cr) = (FlopCounter::new(), FlopCounter::new());
    let vanilla = dcnv2_stack(&c0, &t0, &blocks, StackMode::Vanilla, &mut cv)?;
    let (c, t) = rdcn_stack(&c0, &t0, &rdcn, &mut cr)?;
    let joined = concat_cols(&broadcast(&c, case.n)?, &t)?;
    report.values(&format!("{id} rdcn"), joined.data(), vanilla.data(), None);
    report.macs(&id, &cv, &cr, &cross_cost(n, dc, dt, l, CrossVariant::Rdcn, Accounting::PerRequest)?);
    report.cases += 1;
    Ok(())
}

fn attention_case(case: &GridCase, report: &mut SuiteReport) -> Result<()> {
    if case.k + case.m == 0 {
        return Ok(());
    }
    let mut rng = case.rng();
    let (ctx, tgt) = case.inputs(&mut rng);
    let p = AttnParams::random(case.d, case.d, &mut rng);
    let (mut cv, mut cr) = (FlopCounter::new(), FlopCounter::new());
    let vanilla = attention_vanilla(&ctx, &tgt, &p, &mut cv)?;
    let assembled = attention_assembled(&ctx, &tgt, &p, &mut cr)?;
    let oracle = oracle_attention(&ctx, &tgt, &p)?;
    let id = case.to_string();
    report.values(&id, assembled.data(), vanilla.data(), Some(oracle.data()));
    let (n, k, m, d) = (case.n as u64, case.k as u64, case.m as u64, case.d as u64);
    report.macs(&id, &cv, &cr, &attention_cost(n, k, m, d, d, Accounting::PerRequest)?);
    report.cases += 1;
    Ok(())
}

/// Model specs covered by the `model` suite.
pub fn model_grid(seed: u64) -> Vec<ModelSpec> {
    let mut specs = Vec::new();
    for (architecture, cross_variant) in [
        (Architecture::Dlrm, CrossKind::Dcnv2),
        (Architecture::Dcn, CrossKind::Dcnv2),
        (Architecture::Dcn, CrossKind::Rdcn),
        (Architecture::Attn, CrossKind::Dcnv2),
    ] {
        for k in [0, 1, 3, 8] {
            for m in [0, 1, 4] {
                for n in [1, 17] {
                    let spec = ModelSpec {
                        architecture,
                        k,
                        m,
                        d: 4,
                        n,
                        fc_units: vec![16, 8],
                        cross_layers: 2,
                        cross_variant,
                        variant: Variant::Vanilla,
                        seed,
                    };
                    if spec.validate().is_ok() {
                        specs.push(spec);
                    }
                }
            }
        }
    }
    specs
}

fn model_case(spec: &ModelSpec, report: &mut SuiteReport) -> Result<()> {
    let req = Request::random(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed ^ 0xface));
    let vanilla = Scorer::build(spec)?;
    let rank_aware = Scorer::build(&spec.with_variant(Variant::RankAware))?;
    let (mut cv, mut cr) = (FlopCounter::new(), FlopCounter::new());
    let a = vanilla.score(&req, &mut cv)?;
    let b = rank_aware.score(&req, &mut cr)?;
    let id = format!(
        "{:?}/{:?} k={} m={} n={}",
        spec.architecture, spec.cross_variant, spec.k, spec.m, spec.n
    );
    report.values(&id, &b, &a, None);
    report.macs(&id, &cv, &cr, &model_cost(spec, Accounting::PerRequest)?.total);
    report.cases += 1;
    Ok(())
}

/// Runs one suite, or every suite for [`Suite::All`], at a single seed.
pub fn run(suite: Suite, seed: u64) -> Result<Vec<SuiteReport>> {
    if suite == Suite::All {
        return Suite::EACH.iter().map(|&s| run_one(s, seed)).collect();
    }
    Ok(vec![run_one(suite, seed)?])
}

fn run_one(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let tolerance = match suite {
        Suite::Attention | Suite::Model => SOFTMAX_TOL,
        _ => LINEAR_TOL,
    };
    let mut report = SuiteReport::new(suite.name(), tolerance);
    let case_fn: fn(&GridCase, &mut SuiteReport) -> Result<()> = match suite {
        Suite::Fm => fm_case,
        Suite::Fc => fc_case,
        Suite::Cross => cross_case,
        Suite::Attention => attention_case,
        Suite::Model => {
            for spec in model_grid(seed) {
                model_case(&spec, &mut report)?;
            }
            return Ok(report);
        }
        Suite::All => unreachable!("expanded by run"),
    };
    for case in grid(&[seed]) {
        case_fn(&case, &mut report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_size() {
        assert_eq!(grid(&[1, 2]).len(), 2 * 9 * 9 * 3 * 3);
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::EACH.iter().chain([Suite::All].iter()) {
            assert_eq!(s.name().parse::<Suite>().unwrap(), *s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn fm_and_model_suites_pass() {
        for suite in [Suite::Fm, Suite::Model] {
            let r = &run(suite, 1).unwrap()[0];
            assert!(r.pass(), "{:?}", r.failures);
            assert!(r.cases > 0);
        }
    }

    #[test]
    fn failures_are_recorded() {
        let mut r = SuiteReport::new("x", 1e-6);
        r.values("case", &[1.0], &[2.0], None);
        assert!(!r.pass());
    }
}

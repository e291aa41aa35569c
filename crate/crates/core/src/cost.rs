//! Closed-form MAC counts for every layer in vanilla and rank-aware form.
//!
//! Per-request mode counts one request of `n` candidates. Amortized mode is the
//! per-candidate cost as `n → ∞`: every once-per-request term vanishes and the
//! remaining per-candidate term is reported. All counts are exact integers and equal
//! the instrumented [`FlopCounter`](crate::tensor::FlopCounter) totals of the layer
//! functions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn choose2(x: u64) -> u64 {
    x * x.saturating_sub(1) / 2
}

/// Which accounting the caller asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Accounting {
    #[default]
    PerRequest,
    Amortized,
}

/// The accounting a report was produced under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    PerRequest(u64),
    Amortized,
}

impl std::fmt::Display for CostMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::PerRequest(n) => write!(f, "per-request (N={n})"),
            Self::Amortized => f.write_str("amortized (per candidate, N→∞)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub vanilla_macs: u64,
    pub rank_aware_macs: u64,
    pub savings_macs: u64,
    pub savings_fraction: f64,
    pub mode: CostMode,
}

impl CostReport {
    /// Fails if the rank-aware form would cost more than vanilla.
    pub fn new(vanilla_macs: u64, rank_aware_macs: u64, mode: CostMode) -> Result<Self> {
        let savings_macs = vanilla_macs.checked_sub(rank_aware_macs).ok_or_else(|| {
            Error::InvalidCount(format!(
                "rank-aware cost {rank_aware_macs} exceeds vanilla cost {vanilla_macs}"
            ))
        })?;
        Ok(Self::from_parts(vanilla_macs, rank_aware_macs, savings_macs, mode))
    }

    fn from_parts(vanilla_macs: u64, rank_aware_macs: u64, savings_macs: u64, mode: CostMode) -> Self {
        let savings_fraction = if vanilla_macs > 0 {
            savings_macs as f64 / vanilla_macs as f64
        } else {
            0.0
        };
        Self {
            vanilla_macs,
            rank_aware_macs,
            savings_macs,
            savings_fraction,
            mode,
        }
    }

    /// `rank_aware / vanilla`; 1 when vanilla costs nothing.
    pub fn ratio(&self) -> f64 {
        if self.vanilla_macs == 0 {
            1.0
        } else {
            self.rank_aware_macs as f64 / self.vanilla_macs as f64
        }
    }

    /// Component-wise sum; both reports must share a mode.
    pub fn combine(&self, other: &Self) -> Result<Self> {
        if self.mode != other.mode {
            return Err(Error::InvalidCount(format!(
                "cannot combine {} with {}",
                self.mode, other.mode
            )));
        }
        Ok(Self::from_parts(
            self.vanilla_macs + other.vanilla_macs,
            self.rank_aware_macs + other.rank_aware_macs,
            self.savings_macs + other.savings_macs,
            self.mode,
        ))
    }
}

/// A cost split into a once-per-request term and a per-candidate term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Split {
    once: u64,
    each: u64,
}

impl Split {
    fn at(self, n: u64) -> u64 {
        self.once + n * self.each
    }
}

fn report(n: u64, vanilla: Split, rank_aware: Split, accounting: Accounting) -> Result<CostReport> {
    match accounting {
        Accounting::PerRequest => {
            CostReport::new(vanilla.at(n), rank_aware.at(n), CostMode::PerRequest(n))
        }
        Accounting::Amortized => CostReport::new(vanilla.each, rank_aware.each, CostMode::Amortized),
    }
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidCount(msg()))
    }
}

fn require_n(n: u64) -> Result<()> {
    require(n >= 1, || "n must be at least 1".into())
}

/// FM interaction: `C(k+m,2)·d` per candidate against `C(k,2)·d` once plus
/// `(k·m + C(m,2))·d` per candidate.
pub fn fm_cost(n: u64, k: u64, m: u64, d: u64, accounting: Accounting) -> Result<CostReport> {
    require_n(n)?;
    require(k + m >= 2, || format!("fm needs at least two fields, got k={k}, m={m}"))?;
    require(d >= 1, || "d must be at least 1".into())?;
    let vanilla = Split { once: 0, each: choose2(k + m) * d };
    let rank_aware = Split {
        once: choose2(k) * d,
        each: (k * m + choose2(m)) * d,
    };
    report(n, vanilla, rank_aware, accounting)
}

/// One dense layer of `u` units over a `[x_c; x_t]` input.
pub fn fc_cost(n: u64, xc_size: u64, xt_size: u64, u: u64, accounting: Accounting) -> Result<CostReport> {
    require_n(n)?;
    require(xc_size + xt_size >= 1, || "dense input is empty".into())?;
    require(u >= 1, || "u must be at least 1".into())?;
    let vanilla = Split { once: 0, each: (xc_size + xt_size) * u };
    let rank_aware = Split { once: xc_size * u, each: xt_size * u };
    report(n, vanilla, rank_aware, accounting)
}

/// Execution paths of a cross stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossVariant {
    /// Every layer per candidate.
    Dcnv2,
    /// First layer's context columns once per request, remaining layers per candidate.
    Dcnv2FirstLayer,
    /// Two-stream: context stream and context→target block once, target block per candidate.
    Rdcn,
    /// Two-stream with the context read frozen at `c_0`.
    RdcnAblated,
}

/// Rank-aware cost of `variant` against an `L`-layer DCNv2 stack of width `d_c + d_t`.
pub fn cross_cost(
    n: u64,
    d_c: u64,
    d_t: u64,
    layers: u64,
    variant: CrossVariant,
    accounting: Accounting,
) -> Result<CostReport> {
    require_n(n)?;
    require(d_c + d_t >= 1, || "cross width is zero".into())?;
    require(layers >= 1, || "cross stack needs at least one layer".into())?;
    let d = d_c + d_t;
    let vanilla = Split { once: 0, each: layers * d * d };
    let rank_aware = match variant {
        CrossVariant::Dcnv2 => vanilla,
        CrossVariant::Dcnv2FirstLayer => Split {
            once: d * d_c,
            each: d * d_t + (layers - 1) * d * d,
        },
        CrossVariant::Rdcn => Split {
            once: layers * (d_c * d_c + d_c * d_t),
            each: layers * d_t * d_t,
        },
        CrossVariant::RdcnAblated => Split {
            once: layers * d_t * d_c,
            each: layers * d_t * d_t,
        },
    };
    report(n, vanilla, rank_aware, accounting)
}

/// Share of a width-`d_c + d_t` cross weight held by its context–context block,
/// `d_c² / (d_c + d_t)²`.
pub fn first_layer_cc_fraction(d_c: u64, d_t: u64) -> f64 {
    let d = (d_c + d_t) as f64;
    if d == 0.0 {
        0.0
    } else {
        (d_c * d_c) as f64 / (d * d)
    }
}

/// Score computation only: `(k+m)²·d_k` per candidate against `k²·d_k` once plus
/// `((k+m)² − k²)·d_k` per candidate.
pub fn attention_score_cost(n: u64, k: u64, m: u64, d_k: u64, accounting: Accounting) -> Result<CostReport> {
    require_n(n)?;
    require(k + m >= 1, || "attention needs at least one field".into())?;
    require(d_k >= 1, || "d_k must be at least 1".into())?;
    let f = k + m;
    let vanilla = Split { once: 0, each: f * f * d_k };
    let rank_aware = Split { once: k * k * d_k, each: (f * f - k * k) * d_k };
    report(n, vanilla, rank_aware, accounting)
}

/// Full single-head attention: projections, scores and value mixing.
pub fn attention_cost(n: u64, k: u64, m: u64, d: u64, d_k: u64, accounting: Accounting) -> Result<CostReport> {
    attention_score_cost(n, k, m, d_k, accounting)?;
    require(d >= 1, || "d must be at least 1".into())?;
    let f = k + m;
    let vanilla = Split { once: 0, each: 3 * f * d * d_k + 2 * f * f * d_k };
    let rank_aware = Split {
        once: 3 * k * d * d_k + 2 * k * k * d_k,
        each: 3 * m * d * d_k + 2 * (f * f - k * k) * d_k,
    };
    report(n, vanilla, rank_aware, accounting)
}

/// Per-layer weight counts `(rdcn, dcnv2, saving)`.
pub fn rdcn_param_count(d_c: u64, d_t: u64) -> (u64, u64, u64) {
    let rdcn = d_c * d_c + d_c * d_t + d_t * d_t;
    let dcnv2 = (d_c + d_t) * (d_c + d_t);
    (rdcn, dcnv2, dcnv2 - rdcn)
}

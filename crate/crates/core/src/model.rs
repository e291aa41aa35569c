//! End-to-end synthetic scorers: an interaction block followed by a dense head.
//!
//! Weights are drawn in vanilla layout from the model spec's seed, so both variants of the
//! same spec hold the same function; the rank-aware scorer only re-arranges them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_assembled, attention_vanilla, AttnParams};
use crate::cost::{
    attention_cost, choose2, cross_cost, fc_cost, fm_cost, Accounting, CostReport, CrossVariant,
};
use crate::cross::{dcnv2_stack, rdcn_stack, CrossParams, RdcnParams, StackMode};
use crate::error::{Error, Result};
use crate::fc::{dense_forward, Activation, DenseParams, RankSplitDense};
use crate::fm::{fm_decomposed, fm_vanilla, pair_permutation, FmInput};
use crate::tensor::{FlopCounter, Rank2Tensor, Rank3Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// FM interaction, then the dense head.
    #[default]
    Dlrm,
    /// Cross stack over the flattened fields, then the dense head.
    Dcn,
    /// Field self-attention, then the dense head over the flattened output.
    Attn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossKind {
    #[default]
    Dcnv2,
    Rdcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Vanilla,
    RankAware,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Vanilla => "vanilla",
            Self::RankAware => "rank_aware",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub k: usize,
    pub m: usize,
    pub d: usize,
    /// Candidates per request.
    pub n: usize,
    /// Hidden layer widths; a single-unit output layer follows them.
    pub fc_units: Vec<usize>,
    pub cross_layers: usize,
    pub cross_variant: CrossKind,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            architecture: Architecture::Dlrm,
            k: 8,
            m: 4,
            d: 16,
            n: 100,
            fc_units: vec![128, 64],
            cross_layers: 2,
            cross_variant: CrossKind::Dcnv2,
            variant: Variant::Vanilla,
            seed: 42,
        }
    }
}

impl ModelSpec {
    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.n == 0 || self.d == 0 {
            return bad(format!("n and d must be positive, got n={}, d={}", self.n, self.d));
        }
        if self.fc_units.contains(&0) {
            return bad("fc layer with zero units".into());
        }
        match self.architecture {
            Architecture::Dlrm if self.k + self.m < 2 => {
                bad(format!("dlrm needs at least two fields, got k={}, m={}", self.k, self.m))
            }
            Architecture::Dcn if self.cross_layers == 0 => bad("dcn needs cross_layers >= 1".into()),
            _ if self.k + self.m == 0 => bad("model has no fields".into()),
            _ => Ok(()),
        }
    }

    /// Width of the interaction output that feeds the dense head.
    pub fn head_inputs(&self) -> usize {
        match self.architecture {
            Architecture::Dlrm => choose2((self.k + self.m) as u64) as usize,
            Architecture::Dcn | Architecture::Attn => (self.k + self.m) * self.d,
        }
    }

    /// Head layer shapes `(inputs, units)`, output layer included.
    pub fn head_shapes(&self) -> Vec<(usize, usize)> {
        let mut inputs = self.head_inputs();
        let mut shapes = Vec::with_capacity(self.fc_units.len() + 1);
        for &u in self.fc_units.iter().chain(std::iter::once(&1)) {
            shapes.push((inputs, u));
            inputs = u;
        }
        shapes
    }
}

/// One request: shared context fields and per-candidate target fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    /// `[K × D]`
    pub ctx: Rank2Tensor,
    /// `[N × M × D]`
    pub tgt: Rank3Tensor,
}

impl Request {
    pub fn new(ctx: Rank2Tensor, tgt: Rank3Tensor) -> Result<Self> {
        if ctx.cols() != tgt.cols() || tgt.n() == 0 {
            return Err(Error::mismatch("Request", &ctx.shape(), &tgt.shape()));
        }
        Ok(Self { ctx, tgt })
    }

    /// Uniform embeddings in `[-1, 1)` shaped for `spec`.
    pub fn random<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Self {
        Self {
            ctx: Rank2Tensor::random_uniform(spec.k, spec.d, 1.0, rng),
            tgt: Rank3Tensor::random_uniform(spec.n, spec.m, spec.d, 1.0, rng),
        }
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.ctx.shape() != [spec.k, spec.d] || [self.tgt.rows(), self.tgt.cols()] != [spec.m, spec.d] {
            return Err(Error::mismatch(
                "score",
                &[self.ctx.rows(), self.tgt.rows(), self.ctx.cols()],
                &[spec.k, spec.m, spec.d],
            ));
        }
        Ok(())
    }
}

/// Interaction-block weights in vanilla layout.
#[derive(Debug, Clone, PartialEq)]
pub enum Interaction {
    Fm,
    Cross(Vec<CrossParams>),
    Rdcn(Vec<RdcnParams>),
    Attention(AttnParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub interaction: Interaction,
    /// Head layers, output layer last; relu on hidden layers, identity on the output.
    pub head: Vec<DenseParams>,
}

fn random_dense<R: Rng + ?Sized>(inputs: usize, units: usize, activation: Activation, rng: &mut R) -> DenseParams {
    let scale = 1.0 / (inputs.max(1) as f32).sqrt();
    DenseParams {
        w: Rank2Tensor::random_uniform(inputs, units, scale, rng),
        b: Rank2Tensor::random_uniform(1, units, 0.1, rng).into_data(),
        activation,
    }
}

impl Weights {
    /// Deterministic in `spec.seed` and independent of `spec.variant`.
    pub fn random(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (d_c, d_t) = (spec.k * spec.d, spec.m * spec.d);
        let interaction = match (spec.architecture, spec.cross_variant) {
            (Architecture::Dlrm, _) => Interaction::Fm,
            (Architecture::Dcn, CrossKind::Dcnv2) => Interaction::Cross(
                (0..spec.cross_layers).map(|_| CrossParams::random(d_c + d_t, &mut rng)).collect(),
            ),
            (Architecture::Dcn, CrossKind::Rdcn) => Interaction::Rdcn(
                (0..spec.cross_layers).map(|_| RdcnParams::random(d_c, d_t, &mut rng)).collect(),
            ),
            (Architecture::Attn, _) => Interaction::Attention(AttnParams::random(spec.d, spec.d, &mut rng)),
        };
        let shapes = spec.head_shapes();
        let last = shapes.len() - 1;
        let head = shapes
            .into_iter()
            .enumerate()
            .map(|(i, (inputs, units))| {
                let act = if i == last { Activation::Identity } else { Activation::Relu };
                random_dense(inputs, units, act, &mut rng)
            })
            .collect();
        Ok(Self { interaction, head })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Plan {
    /// Interaction output, then every head layer per candidate.
    Flat,
    /// First head layer split at `ctx_size`, the rest per candidate.
    Split(RankSplitDense),
}

/// An immutable scorer, safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    spec: ModelSpec,
    weights: Weights,
    /// Block-matrix form of the rDCN layers for the vanilla path.
    blocks: Vec<CrossParams>,
    plan: Plan,
    macs: u64,
}

impl Scorer {
    pub fn new(spec: &ModelSpec, weights: Weights) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.head_shapes();
        let head_ok = weights.head.len() == shapes.len()
            && weights.head.iter().zip(&shapes).all(|(p, &(i, u))| p.inputs() == i && p.units() == u);
        if !head_ok {
            return Err(Error::InvalidSpec("head weights do not match the model spec".into()));
        }
        let (d_c, d_t) = (spec.k * spec.d, spec.m * spec.d);
        let interaction_ok = match (&weights.interaction, spec.architecture) {
            (Interaction::Fm, Architecture::Dlrm) => true,
            (Interaction::Cross(l), Architecture::Dcn) => {
                spec.cross_variant == CrossKind::Dcnv2
                    && l.len() == spec.cross_layers
                    && l.iter().all(|p| p.dim() == d_c + d_t)
            }
            (Interaction::Rdcn(l), Architecture::Dcn) => {
                spec.cross_variant == CrossKind::Rdcn
                    && l.len() == spec.cross_layers
                    && l.iter().all(|p| p.d_c() == d_c && p.d_t() == d_t)
            }
            (Interaction::Attention(p), Architecture::Attn) => p.d() == spec.d && p.d_k() == spec.d,
            _ => false,
        };
        if !interaction_ok {
            return Err(Error::InvalidSpec("interaction weights do not match the model spec".into()));
        }
        let blocks = match &weights.interaction {
            Interaction::Rdcn(layers) => layers.iter().map(RdcnParams::block_matrix).collect(),
            _ => Vec::new(),
        };
        let plan = match (spec.variant, &weights.interaction) {
            (Variant::RankAware, Interaction::Fm) => {
                let first = &weights.head[0];
                let perm = pair_permutation(spec.k, spec.m);
                let data = perm.iter().flat_map(|&r| first.w.row(r).iter().copied()).collect();
                let w = Rank2Tensor::new(first.w.rows(), first.w.cols(), data)?;
                let permuted = DenseParams::new(w, first.b.clone(), first.activation)?;
                Plan::Split(RankSplitDense::new(&permuted, choose2(spec.k as u64) as usize)?)
            }
            (Variant::RankAware, Interaction::Rdcn(_)) => {
                Plan::Split(RankSplitDense::new(&weights.head[0], d_c)?)
            }
            _ => Plan::Flat,
        };
        let macs = model_cost(spec, Accounting::PerRequest)?.macs(spec.variant);
        Ok(Self {
            spec: spec.clone(),
            weights,
            blocks,
            plan,
            macs,
        })
    }

    /// Weights drawn from `spec.seed`.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        Self::new(spec, Weights::random(spec)?)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Closed-form MACs of one [`score`](Self::score) call.
    pub fn macs_per_request(&self) -> u64 {
        self.macs
    }

    /// One score per candidate.
    pub fn score(&self, req: &Request, counter: &mut FlopCounter) -> Result<Vec<f32>> {
        req.check(&self.spec)?;
        if req.tgt.n() == 0 {
            return Err(Error::EmptyBatch);
        }
        let head_start = match self.plan {
            Plan::Flat => 0,
            Plan::Split(_) => 1,
        };
        let mut x = self.interaction(req, counter)?;
        for p in &self.weights.head[head_start..] {
            x = dense_forward(&x, p, counter)?;
        }
        Ok(x.into_data())
    }

    /// Interaction block plus, for split plans, the first head layer. Output is
    /// `[N × 1 × width]`.
    fn interaction(&self, req: &Request, counter: &mut FlopCounter) -> Result<Rank3Tensor> {
        let rank_aware = self.spec.variant == Variant::RankAware;
        let n = req.tgt.n();
        match &self.weights.interaction {
            Interaction::Fm => {
                let input = FmInput::new(req.ctx.clone(), req.tgt.clone())?;
                match &self.plan {
                    Plan::Split(first) => {
                        let out = fm_decomposed(&input, counter)?;
                        first.forward(&out.ctx_pairs, &out.tgt_pairs, counter)
                    }
                    Plan::Flat => fm_vanilla(&input, counter),
                }
            }
            Interaction::Cross(layers) => {
                let (c0, t0) = flat_fields(req)?;
                let mode = if rank_aware { StackMode::RankAware } else { StackMode::Vanilla };
                dcnv2_stack(&c0, &t0, layers, mode, counter)
            }
            Interaction::Rdcn(layers) => {
                let (c0, t0) = flat_fields(req)?;
                match &self.plan {
                    Plan::Split(first) => {
                        let (c, t) = rdcn_stack(&c0, &t0, layers, counter)?;
                        first.forward(&c, &t, counter)
                    }
                    Plan::Flat => dcnv2_stack(&c0, &t0, &self.blocks, StackMode::Vanilla, counter),
                }
            }
            Interaction::Attention(p) => {
                let out = if rank_aware {
                    attention_assembled(&req.ctx, &req.tgt, p, counter)?
                } else {
                    attention_vanilla(&req.ctx, &req.tgt, p, counter)?
                };
                let width = out.rows() * out.cols();
                out.reshape(1, width).inspect(|o| debug_assert_eq!(o.n(), n))
            }
        }
    }
}

/// Context fields as `[1 × K·D]`, target fields as `[N × 1 × M·D]`.
fn flat_fields(req: &Request) -> Result<(Rank2Tensor, Rank3Tensor)> {
    let c0 = req.ctx.clone().flatten();
    let width = req.tgt.rows() * req.tgt.cols();
    Ok((c0, req.tgt.clone().reshape(1, width)?))
}

/// Closed-form cost of a spec, per component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelCost {
    pub components: Vec<(String, CostReport)>,
    pub total: CostReport,
}

impl ModelCost {
    pub fn macs(&self, variant: Variant) -> u64 {
        match variant {
            Variant::Vanilla => self.total.vanilla_macs,
            Variant::RankAware => self.total.rank_aware_macs,
        }
    }
}

/// Per-component vanilla and rank-aware MACs of a scorer built from `spec`.
pub fn model_cost(spec: &ModelSpec, accounting: Accounting) -> Result<ModelCost> {
    spec.validate()?;
    let (n, k, m, d) = (spec.n as u64, spec.k as u64, spec.m as u64, spec.d as u64);
    let (d_c, d_t) = (k * d, m * d);
    let shapes = spec.head_shapes();
    let mut components = Vec::new();
    // first head layer's split point, zero where its input is rank-mixed
    let first_ctx = match spec.architecture {
        Architecture::Dlrm => {
            components.push(("fm".to_string(), fm_cost(n, k, m, d, accounting)?));
            choose2(k)
        }
        Architecture::Dcn => {
            let variant = match spec.cross_variant {
                CrossKind::Dcnv2 => CrossVariant::Dcnv2FirstLayer,
                CrossKind::Rdcn => CrossVariant::Rdcn,
            };
            let layers = spec.cross_layers as u64;
            components.push(("cross".to_string(), cross_cost(n, d_c, d_t, layers, variant, accounting)?));
            match spec.cross_variant {
                CrossKind::Dcnv2 => 0,
                CrossKind::Rdcn => d_c,
            }
        }
        Architecture::Attn => {
            components.push(("attention".to_string(), attention_cost(n, k, m, d, d, accounting)?));
            0
        }
    };
    for (i, &(inputs, units)) in shapes.iter().enumerate() {
        let xc = if i == 0 { first_ctx } else { 0 };
        let name = if i + 1 == shapes.len() { "output".to_string() } else { format!("fc{}", i + 1) };
        let r = fc_cost(n, xc, inputs as u64 - xc, units as u64, accounting)?;
        components.push((name, r));
    }
    let mut total = components[0].1;
    for (_, r) in &components[1..] {
        total = total.combine(r)?;
    }
    Ok(ModelCost { components, total })
}

//! Single-head field self-attention over context and target fields.
//!
//! [`attention_vanilla`] broadcasts the context fields and runs full attention per
//! candidate. [`attention_assembled`] computes the context projections and the
//! context–context score block once per request, keeps per-row softmax partials
//! (running max, exp-sum, weighted value sum), and merges each candidate's
//! target-key contributions into them with a streaming log-sum-exp update. The two are
//! the same function.
//!
//! [`rank_aware_attention_layer`] is the two-stream variant: context fields attend only
//! among themselves, target fields attend over the concatenation of the context keys
//! (computed once) and their own keys. It is not equivalent to vanilla attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    batched_matmul, broadcast, concat_rows, dot_raw, matmul, matmul_bt, FlopCounter,
    Rank2Tensor, Rank3Tensor,
};

/// Shared `Q/K/V` projections, each `D × d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub w_q: Rank2Tensor,
    pub w_k: Rank2Tensor,
    pub w_v: Rank2Tensor,
}

impl AttnParams {
    pub fn new(w_q: Rank2Tensor, w_k: Rank2Tensor, w_v: Rank2Tensor) -> Result<Self> {
        if w_q.shape() != w_k.shape() || w_q.shape() != w_v.shape() || w_q.cols() == 0 {
            return Err(Error::mismatch("AttnParams", &w_q.shape(), &w_k.shape()));
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn random<R: Rng + ?Sized>(d: usize, d_k: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (d.max(1) as f32).sqrt();
        Self {
            w_q: Rank2Tensor::random_uniform(d, d_k, scale, rng),
            w_k: Rank2Tensor::random_uniform(d, d_k, scale, rng),
            w_v: Rank2Tensor::random_uniform(d, d_k, scale, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_k(&self) -> usize {
        self.w_q.cols()
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.d_k() as f32).sqrt()
    }
}

/// Softmax partial state for one query row over some block of keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPartial {
    /// Running max of the scores seen.
    pub max: f32,
    /// `Σ exp(score − max)`.
    pub sum: f32,
    /// `Σ exp(score − max)·value`.
    pub acc: Vec<f32>,
}

impl RowPartial {
    pub fn empty(width: usize) -> Self {
        Self {
            max: f32::NEG_INFINITY,
            sum: 0.0,
            acc: vec![0.0; width],
        }
    }

    /// Partial over one block from its raw (already scaled) scores and value rows.
    pub fn from_scores(scores: &[f32], values: &[f32], width: usize) -> Self {
        let mut p = Self::empty(width);
        p.absorb(scores, values);
        p
    }

    fn absorb(&mut self, scores: &[f32], values: &[f32]) {
        if scores.is_empty() {
            return;
        }
        let width = self.acc.len();
        let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        let mut acc = vec![0.0f32; width];
        for (s, v) in scores.iter().zip(values.chunks_exact(width.max(1))) {
            let e = (s - max).exp();
            sum += e;
            for (a, x) in acc.iter_mut().zip(v) {
                *a += e * x;
            }
        }
        self.merge_in(max, sum, &acc);
    }

    fn merge_in(&mut self, max: f32, sum: f32, acc: &[f32]) {
        if sum == 0.0 {
            return;
        }
        if self.sum == 0.0 {
            self.max = max;
            self.sum = sum;
            self.acc.copy_from_slice(acc);
            return;
        }
        let m = self.max.max(max);
        let (sa, sb) = ((self.max - m).exp(), (max - m).exp());
        self.sum = self.sum * sa + sum * sb;
        for (a, b) in self.acc.iter_mut().zip(acc) {
            *a = *a * sa + *b * sb;
        }
        self.max = m;
    }

    /// Combines two partials over disjoint key blocks, rescaling both to the larger max.
    pub fn merge(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.merge_in(other.max, other.sum, &other.acc);
        out
    }

    /// `log Σ exp(score)` over every key absorbed so far.
    pub fn log_sum_exp(&self) -> f32 {
        self.max + self.sum.ln()
    }

    /// The normalized attention output `acc / sum`.
    pub fn finish(&self) -> Vec<f32> {
        self.acc.iter().map(|a| a / self.sum).collect()
    }
}

/// Precomputed context–context partials, one [`RowPartial`] per context query.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextRowPartials {
    pub rows: Vec<RowPartial>,
}

/// Context projections (rank 2) and target projections (rank 3).
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub q_c: Rank2Tensor,
    pub k_c: Rank2Tensor,
    pub v_c: Rank2Tensor,
    pub q_t: Rank3Tensor,
    pub k_t: Rank3Tensor,
    pub v_t: Rank3Tensor,
}

fn check_inputs(ctx: &Rank2Tensor, tgt: &Rank3Tensor, p: &AttnParams) -> Result<()> {
    if ctx.cols() != p.d() || tgt.cols() != p.d() {
        return Err(Error::mismatch("attention", &ctx.shape(), &tgt.shape()));
    }
    if ctx.rows() + tgt.rows() == 0 {
        return Err(Error::NoFields);
    }
    if tgt.n() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Scaled scores of `q` rows against `k` rows, then softmax·V, into `out`. Charges
/// `2·rows(q)·rows(k)·d_k`.
fn attend(q: &[f32], k: &[f32], v: &[f32], d_k: usize, scale: f32, out: &mut [f32], counter: &mut FlopCounter) {
    let (nq, nk) = (q.len() / d_k, k.len() / d_k);
    let mut scores = vec![0.0f32; nk];
    for (i, qi) in q.chunks_exact(d_k).enumerate() {
        for (s, kj) in scores.iter_mut().zip(k.chunks_exact(d_k)) {
            *s = dot_raw(qi, kj) * scale;
        }
        crate::tensor::softmax_inplace(&mut scores);
        let row = &mut out[i * d_k..(i + 1) * d_k];
        row.fill(0.0);
        for (w, vj) in scores.iter().zip(v.chunks_exact(d_k)) {
            for (o, x) in row.iter_mut().zip(vj) {
                *o += w * x;
            }
        }
    }
    counter.add((2 * nq * nk * d_k) as u64);
}

/// Full attention per candidate over the broadcast-concatenated field list.
pub fn attention_vanilla(
    ctx: &Rank2Tensor,
    tgt: &Rank3Tensor,
    p: &AttnParams,
    counter: &mut FlopCounter,
) -> Result<Rank3Tensor> {
    check_inputs(ctx, tgt, p)?;
    let e = concat_rows(&broadcast(ctx, tgt.n())?, tgt)?;
    let q = batched_matmul(&e, &p.w_q, counter)?;
    let k = batched_matmul(&e, &p.w_k, counter)?;
    let v = batched_matmul(&e, &p.w_v, counter)?;
    let (fields, d_k) = (e.rows(), p.d_k());
    let mut out = Rank3Tensor::zeros(tgt.n(), fields, d_k);
    for j in 0..tgt.n() {
        attend(q.slice(j), k.slice(j), v.slice(j), d_k, p.scale(), out.slice_mut(j), counter);
    }
    Ok(out)
}

/// Context projections once, target projections per candidate.
pub fn project_decomposed(
    ctx: &Rank2Tensor,
    tgt: &Rank3Tensor,
    p: &AttnParams,
    counter: &mut FlopCounter,
) -> Result<Projections> {
    check_inputs(ctx, tgt, p)?;
    Ok(Projections {
        q_c: matmul(ctx, &p.w_q, counter)?,
        k_c: matmul(ctx, &p.w_k, counter)?,
        v_c: matmul(ctx, &p.w_v, counter)?,
        q_t: batched_matmul(tgt, &p.w_q, counter)?,
        k_t: batched_matmul(tgt, &p.w_k, counter)?,
        v_t: batched_matmul(tgt, &p.w_v, counter)?,
    })
}

/// Unnormalized context–context block and its per-row softmax partials.
pub fn context_partials(
    q_c: &Rank2Tensor,
    k_c: &Rank2Tensor,
    v_c: &Rank2Tensor,
    scale: f32,
    counter: &mut FlopCounter,
) -> Result<ContextRowPartials> {
    if q_c.cols() != k_c.cols() || k_c.shape() != v_c.shape() {
        return Err(Error::mismatch("context_partials", &q_c.shape(), &k_c.shape()));
    }
    let mut scores = matmul_bt(q_c, k_c, counter)?;
    for s in scores.data_mut() {
        *s *= scale;
    }
    let d_k = v_c.cols();
    let rows = (0..q_c.rows())
        .map(|i| RowPartial::from_scores(scores.row(i), v_c.data(), d_k))
        .collect();
    // numerator mixes: K·K·d_k
    counter.add((q_c.rows() * k_c.rows() * d_k) as u64);
    Ok(ContextRowPartials { rows })
}

/// Rank-aware attention assembled from once-per-request context partials and
/// per-candidate target contributions. Equals [`attention_vanilla`].
pub fn attention_assembled(
    ctx: &Rank2Tensor,
    tgt: &Rank3Tensor,
    p: &AttnParams,
    counter: &mut FlopCounter,
) -> Result<Rank3Tensor> {
    check_inputs(ctx, tgt, p)?;
    let proj = project_decomposed(ctx, tgt, p, counter)?;
    let partials = context_partials(&proj.q_c, &proj.k_c, &proj.v_c, p.scale(), counter)?;
    let (k, m, n, d_k) = (ctx.rows(), tgt.rows(), tgt.n(), p.d_k());
    let scale = p.scale();
    let fields = k + m;
    if m == 0 {
        let rows: Vec<f32> = partials.rows.iter().flat_map(RowPartial::finish).collect();
        return broadcast(&Rank2Tensor::from_parts(k, d_k, rows), n);
    }
    let mut out = Rank3Tensor::zeros(n, fields, d_k);
    let mut scores = vec![0.0f32; fields];
    for j in 0..n {
        let (k_t, v_t, q_t) = (proj.k_t.slice(j), proj.v_t.slice(j), proj.q_t.slice(j));
        let slice = out.slice_mut(j);
        for (i, base) in partials.rows.iter().enumerate() {
            let qi = proj.q_c.row(i);
            for (s, kt) in scores[..m].iter_mut().zip(k_t.chunks_exact(d_k)) {
                *s = dot_raw(qi, kt) * scale;
            }
            let merged = base.merge(&RowPartial::from_scores(&scores[..m], v_t, d_k));
            slice[i * d_k..(i + 1) * d_k].copy_from_slice(&merged.finish());
        }
        counter.add((2 * k * m * d_k) as u64);
        // target queries attend over [K_c; K_t_j] against [V_c; V_t_j]
        for (i, qi) in q_t.chunks_exact(d_k).enumerate() {
            let keys = proj.k_c.data().chunks_exact(d_k).chain(k_t.chunks_exact(d_k));
            for (s, key) in scores.iter_mut().zip(keys) {
                *s = dot_raw(qi, key) * scale;
            }
            crate::tensor::softmax_inplace(&mut scores);
            let row = &mut slice[(k + i) * d_k..(k + i + 1) * d_k];
            let values = proj.v_c.data().chunks_exact(d_k).chain(v_t.chunks_exact(d_k));
            for (w, v) in scores.iter().zip(values) {
                for (o, x) in row.iter_mut().zip(v) {
                    *o += w * x;
                }
            }
        }
        counter.add((2 * m * fields * d_k) as u64);
    }
    Ok(out)
}

/// Parameters of one two-stream attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStreamAttnParams {
    /// Context-stream projections; its key and value projections also supply the
    /// context keys and values read by the target stream.
    pub ctx: AttnParams,
    /// Target-stream query, key and value projections.
    pub tgt: AttnParams,
}

impl TwoStreamAttnParams {
    pub fn random<R: Rng + ?Sized>(d: usize, d_k: usize, rng: &mut R) -> Self {
        Self {
            ctx: AttnParams::random(d, d_k, rng),
            tgt: AttnParams::random(d, d_k, rng),
        }
    }
}

/// Two-stream rank-aware attention. Returns the context stream `[K × d_k]` and the
/// target stream `[N × M × d_k]`; the context output never reads target data.
pub fn rank_aware_attention_layer(
    c_fields: &Rank2Tensor,
    t_fields: &Rank3Tensor,
    ctx_params: &AttnParams,
    tgt_params: &AttnParams,
    counter: &mut FlopCounter,
) -> Result<(Rank2Tensor, Rank3Tensor)> {
    if c_fields.rows() == 0 || t_fields.rows() == 0 {
        return Err(Error::NoFields);
    }
    if c_fields.cols() != ctx_params.d()
        || t_fields.cols() != tgt_params.d()
        || ctx_params.d_k() != tgt_params.d_k()
    {
        return Err(Error::mismatch(
            "rank_aware_attention_layer",
            &c_fields.shape(),
            &t_fields.shape(),
        ));
    }
    let d_k = ctx_params.d_k();
    let scale = ctx_params.scale();
    let q_c = matmul(c_fields, &ctx_params.w_q, counter)?;
    let k_c = matmul(c_fields, &ctx_params.w_k, counter)?;
    let v_c = matmul(c_fields, &ctx_params.w_v, counter)?;
    let mut c_out = Rank2Tensor::zeros(c_fields.rows(), d_k);
    attend(q_c.data(), k_c.data(), v_c.data(), d_k, scale, c_out.data_mut(), counter);

    let q_t = batched_matmul(t_fields, &tgt_params.w_q, counter)?;
    let k_t = batched_matmul(t_fields, &tgt_params.w_k, counter)?;
    let v_t = batched_matmul(t_fields, &tgt_params.w_v, counter)?;
    let (n, m) = (t_fields.n(), t_fields.rows());
    let mut t_out = Rank3Tensor::zeros(n, m, d_k);
    let mut keys = k_c.data().to_vec();
    let mut values = v_c.data().to_vec();
    let ctx_len = keys.len();
    for j in 0..n {
        keys.truncate(ctx_len);
        keys.extend_from_slice(k_t.slice(j));
        values.truncate(ctx_len);
        values.extend_from_slice(v_t.slice(j));
        attend(q_t.slice(j), &keys, &values, d_k, scale, t_out.slice_mut(j), counter);
    }
    Ok((c_out, t_out))
}

/// Folds [`rank_aware_attention_layer`]; every layer after the first needs `d_k = D`.
pub fn rank_aware_attention_stack(
    c_fields: &Rank2Tensor,
    t_fields: &Rank3Tensor,
    layers: &[TwoStreamAttnParams],
    counter: &mut FlopCounter,
) -> Result<(Rank2Tensor, Rank3Tensor)> {
    if layers.is_empty() {
        return Err(Error::EmptyStack);
    }
    let (mut c, mut t) = (c_fields.clone(), t_fields.clone());
    for layer in layers {
        (c, t) = rank_aware_attention_layer(&c, &t, &layer.ctx, &layer.tgt, counter)?;
    }
    Ok((c, t))
}

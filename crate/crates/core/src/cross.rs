//! DCNv2 cross layers and the two-stream rDCN variant.
//!
//! Per-candidate state vectors are stored as `[N × 1 × d]` with `d = d_c + d_t`;
//! context components come first. Weight matrices act on column vectors (`W·x`), so
//! `W` is `out × in`.
//!
//! - [`dcnv2_layer`]: `x_{l+1} = x_0 ⊙ (W·x_l + b) + x_l`, fully per candidate.
//! - [`dcnv2_first_layer_decomposed`]: at layer 0 the `W_cc·x_c` and `W_tc·x_c` blocks
//!   depend only on context and are computed once per request.
//! - [`rdcn_layer`]: context stream `c_{l+1} = c_0 ⊙ (W_c·c_l + b_c) + c_l` at rank 2;
//!   target stream `T_{l+1} = T_0 ⊙ (W_ct·c_l ⊕ W_t·T_l + b_t) + T_l` at rank 3, with
//!   `W_ct·c_l` computed once. No weight maps target inputs into context outputs.
//! - [`rdcn_ablated_layer`]: the target stream alone, reading `c_0` at every depth.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    batched_apply, batched_apply_acc, broadcast, concat_cols, matmul_bt, FlopCounter,
    Rank2Tensor, Rank3Tensor,
};

/// Square DCNv2 kernel over `d_c + d_t` features and its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossParams {
    pub w: Rank2Tensor,
    pub b: Vec<f32>,
}

impl CrossParams {
    pub fn new(w: Rank2Tensor, b: Vec<f32>) -> Result<Self> {
        if w.rows() != w.cols() || b.len() != w.rows() {
            return Err(Error::mismatch("CrossParams", &w.shape(), &[b.len()]));
        }
        Ok(Self { w, b })
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (dim.max(1) as f32).sqrt();
        Self {
            w: Rank2Tensor::random_uniform(dim, dim, scale, rng),
            b: Rank2Tensor::random_uniform(1, dim, 0.1, rng).into_data(),
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }
}

/// Low-rank kernel `W = U·Vᵀ` with `U, V` of shape `d × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankCrossParams {
    u: Rank2Tensor,
    v_t: Rank2Tensor,
    pub b: Vec<f32>,
}

impl LowRankCrossParams {
    pub fn new(u: Rank2Tensor, v: Rank2Tensor, b: Vec<f32>) -> Result<Self> {
        if u.shape() != v.shape() || u.cols() == 0 || b.len() != u.rows() {
            return Err(Error::mismatch("LowRankCrossParams", &u.shape(), &v.shape()));
        }
        Ok(Self {
            u,
            v_t: v.transpose(),
            b,
        })
    }

    pub fn u(&self) -> &Rank2Tensor {
        &self.u
    }

    pub fn v(&self) -> Rank2Tensor {
        self.v_t.transpose()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn dim(&self) -> usize {
        self.u.rows()
    }

    /// The induced dense kernel `U·Vᵀ`.
    pub fn to_dense(&self) -> CrossParams {
        let w = crate::tensor::matmul(&self.u, &self.v_t, &mut FlopCounter::new())
            .expect("u and vᵀ shapes agree by construction");
        CrossParams {
            w,
            b: self.b.clone(),
        }
    }
}

/// rDCN layer weights: `W_c` (`d_c × d_c`), `W_ct` (`d_t × d_c`), `W_t` (`d_t × d_t`).
#[derive(Debug, Clone, PartialEq)]
pub struct RdcnParams {
    pub w_c: Rank2Tensor,
    pub w_ct: Rank2Tensor,
    pub w_t: Rank2Tensor,
    pub b_c: Vec<f32>,
    pub b_t: Vec<f32>,
}

impl RdcnParams {
    pub fn new(
        w_c: Rank2Tensor,
        w_ct: Rank2Tensor,
        w_t: Rank2Tensor,
        b_c: Vec<f32>,
        b_t: Vec<f32>,
    ) -> Result<Self> {
        let (dc, dt) = (b_c.len(), b_t.len());
        if w_c.shape() != [dc, dc] || w_ct.shape() != [dt, dc] || w_t.shape() != [dt, dt] {
            return Err(Error::mismatch(
                "RdcnParams",
                &[w_c.rows(), w_ct.rows(), w_t.rows()],
                &[dc, dt],
            ));
        }
        Ok(Self {
            w_c,
            w_ct,
            w_t,
            b_c,
            b_t,
        })
    }

    pub fn zeros(d_c: usize, d_t: usize) -> Self {
        Self {
            w_c: Rank2Tensor::zeros(d_c, d_c),
            w_ct: Rank2Tensor::zeros(d_t, d_c),
            w_t: Rank2Tensor::zeros(d_t, d_t),
            b_c: vec![0.0; d_c],
            b_t: vec![0.0; d_t],
        }
    }

    pub fn random<R: Rng + ?Sized>(d_c: usize, d_t: usize, rng: &mut R) -> Self {
        let scale = 1.0 / ((d_c + d_t).max(1) as f32).sqrt();
        Self {
            w_c: Rank2Tensor::random_uniform(d_c, d_c, scale, rng),
            w_ct: Rank2Tensor::random_uniform(d_t, d_c, scale, rng),
            w_t: Rank2Tensor::random_uniform(d_t, d_t, scale, rng),
            b_c: Rank2Tensor::random_uniform(1, d_c, 0.1, rng).into_data(),
            b_t: Rank2Tensor::random_uniform(1, d_t, 0.1, rng).into_data(),
        }
    }

    pub fn d_c(&self) -> usize {
        self.b_c.len()
    }

    pub fn d_t(&self) -> usize {
        self.b_t.len()
    }

    pub fn weight_count(&self) -> usize {
        self.w_c.len() + self.w_ct.len() + self.w_t.len()
    }

    /// The equivalent DCNv2 kernel `[[W_c, 0], [W_ct, W_t]]` with bias `[b_c; b_t]`.
    pub fn block_matrix(&self) -> CrossParams {
        let (dc, dt) = (self.d_c(), self.d_t());
        let top = self.w_c.hstack(&Rank2Tensor::zeros(dc, dt)).expect("row counts agree");
        let bottom = self.w_ct.hstack(&self.w_t).expect("row counts agree");
        let w = top.vstack(&bottom).expect("column counts agree");
        let mut b = self.b_c.clone();
        b.extend_from_slice(&self.b_t);
        CrossParams { w, b }
    }
}

/// `x0 ⊙ (mm + b) + xl` in place on `mm`.
fn cross_finish(mm: &mut Rank3Tensor, x0: &[f32], xl: &[f32], b: &[f32]) {
    let dim = b.len();
    if dim == 0 {
        return;
    }
    for ((out, x0), xl) in mm
        .data_mut()
        .chunks_exact_mut(dim)
        .zip(x0.chunks_exact(dim))
        .zip(xl.chunks_exact(dim))
    {
        for i in 0..dim {
            out[i] = x0[i] * (out[i] + b[i]) + xl[i];
        }
    }
}

/// Context-only variant of [`cross_finish`] on a single row.
fn cross_finish_row(mm: &mut [f32], x0: &[f32], xl: &[f32], b: &[f32]) {
    for i in 0..b.len() {
        mm[i] = x0[i] * (mm[i] + b[i]) + xl[i];
    }
}

fn check_state(op: &'static str, x: &Rank3Tensor, dim: usize) -> Result<()> {
    if x.rows() != 1 || x.cols() != dim {
        return Err(Error::mismatch(op, &x.shape(), &[x.n(), 1, dim]));
    }
    Ok(())
}

/// One DCNv2 cross layer, every candidate computed independently.
pub fn dcnv2_layer(
    x0: &Rank3Tensor,
    xl: &Rank3Tensor,
    p: &CrossParams,
    counter: &mut FlopCounter,
) -> Result<Rank3Tensor> {
    if x0.shape() != xl.shape() {
        return Err(Error::mismatch("dcnv2_layer", &x0.shape(), &xl.shape()));
    }
    check_state("dcnv2_layer", xl, p.dim())?;
    let mut out = batched_apply(&p.w, xl, counter)?;
    cross_finish(&mut out, x0.data(), xl.data(), &p.b);
    Ok(out)
}

/// Splits the kernel columns at `d_c`: `[W_cc; W_tc]` and `[W_ct; W_tt]`.
fn split_columns(w: &Rank2Tensor, d_c: usize) -> Result<(Rank2Tensor, Rank2Tensor)> {
    if d_c > w.cols() {
        return Err(Error::OutOfRange {
            what: "context width",
            index: d_c,
            max: w.cols(),
        });
    }
    Ok((w.slice_cols(0, d_c)?, w.slice_cols(d_c, w.cols())?))
}

/// DCNv2 layer 0 with its kernel pre-split for once-per-request context terms.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedFirstCross {
    ctx_cols: Rank2Tensor,
    tgt_cols: Rank2Tensor,
    b: Vec<f32>,
}

impl DecomposedFirstCross {
    pub fn new(p: &CrossParams, d_c: usize) -> Result<Self> {
        let (ctx_cols, tgt_cols) = split_columns(&p.w, d_c)?;
        Ok(Self {
            ctx_cols,
            tgt_cols,
            b: p.b.clone(),
        })
    }

    pub fn d_c(&self) -> usize {
        self.ctx_cols.cols()
    }

    pub fn d_t(&self) -> usize {
        self.tgt_cols.cols()
    }

    pub fn forward(
        &self,
        x0_c: &Rank2Tensor,
        x0_t: &Rank3Tensor,
        counter: &mut FlopCounter,
    ) -> Result<Rank3Tensor> {
        let x0_c = x0_c.clone().flatten();
        if x0_c.len() != self.d_c() {
            return Err(Error::mismatch("dcnv2_first_layer", &x0_c.shape(), &[1, self.d_c()]));
        }
        check_state("dcnv2_first_layer", x0_t, self.d_t())?;
        // [W_cc; W_tc]·x_c once, then each candidate continues the same sums over x_t.
        let ctx = matmul_bt(&x0_c, &self.ctx_cols, counter)?;
        let mut out = broadcast(&ctx, x0_t.n())?;
        batched_apply_acc(&self.tgt_cols, x0_t, &mut out, counter)?;
        let x0 = concat_cols(&broadcast(&x0_c, x0_t.n())?, x0_t)?;
        cross_finish(&mut out, x0.data(), x0.data(), &self.b);
        Ok(out)
    }
}

/// Layer 0 of a DCNv2 stack (`x_l = x_0`) with context-only terms computed once.
pub fn dcnv2_first_layer_decomposed(
    x0_c: &Rank2Tensor,
    x0_t: &Rank3Tensor,
    p: &CrossParams,
    counter: &mut FlopCounter,
) -> Result<Rank3Tensor> {
    DecomposedFirstCross::new(p, x0_c.len())?.forward(x0_c, x0_t, counter)
}

/// Low-rank layer `x0 ⊙ (U·(Vᵀ·xl) + b) + xl`, per candidate.
pub fn dcnv2_lowrank_layer(
    x0: &Rank3Tensor,
    xl: &Rank3Tensor,
    p: &LowRankCrossParams,
    counter: &mut FlopCounter,
) -> Result<Rank3Tensor> {
    if x0.shape() != xl.shape() {
        return Err(Error::mismatch("dcnv2_lowrank_layer", &x0.shape(), &xl.shape()));
    }
    check_state("dcnv2_lowrank_layer", xl, p.dim())?;
    let z = batched_apply(&p.v_t, xl, counter)?;
    let mut out = batched_apply(&p.u, &z, counter)?;
    cross_finish(&mut out, x0.data(), xl.data(), &p.b);
    Ok(out)
}

/// Low-rank layer 0 with row-partitioned factors: `U·(V_cᵀ·x_c)` is computed once, covering
/// both `W_cc·x_c` and `W_tc·x_c`; `U·(V_tᵀ·x_t)` is per candidate.
pub fn dcnv2_lowrank_first_layer_decomposed(
    x0_c: &Rank2Tensor,
    x0_t: &Rank3Tensor,
    p: &LowRankCrossParams,
    counter: &mut FlopCounter,
) -> Result<Rank3Tensor> {
    let x0_c = x0_c.clone().flatten();
    let d_c = x0_c.len();
    if d_c > p.dim() {
        return Err(Error::mismatch("dcnv2_lowrank_first_layer", &x0_c.shape(), &[p.dim()]));
    }
    check_state("dcnv2_lowrank_first_layer", x0_t, p.dim() - d_c)?;
    let (v_c_t, v_t_t) = split_columns(&p.v_t, d_c)?;
    let z_c = matmul_bt(&x0_c, &v_c_t, counter)?;
    let ctx = matmul_bt(&z_c, &p.u, counter)?;
    let z_t = batched_apply(&v_t_t, x0_t, counter)?;
    let mut out = broadcast(&ctx, x0_t.n())?;
    batched_apply_acc(&p.u, &z_t, &mut out, counter)?;
    let x0 = concat_cols(&broadcast(&x0_c, x0_t.n())?, x0_t)?;
    cross_finish(&mut out, x0.data(), x0.data(), &p.b);
    Ok(out)
}

/// Four-block view `(W_cc, W_ct, W_tc, W_tt)` of a square kernel split at `d_c`, where
/// `W_ct` maps target inputs to context outputs.
pub fn partition_weights(
    w: &Rank2Tensor,
    d_c: usize,
) -> Result<(Rank2Tensor, Rank2Tensor, Rank2Tensor, Rank2Tensor)> {
    if w.rows() != w.cols() {
        return Err(Error::mismatch("partition_weights", &w.shape(), &[w.rows(), w.rows()]));
    }
    let side = w.rows();
    if d_c > side {
        return Err(Error::OutOfRange {
            what: "context width",
            index: d_c,
            max: side,
        });
    }
    let top = w.slice_rows(0, d_c)?;
    let bottom = w.slice_rows(d_c, side)?;
    Ok((
        top.slice_cols(0, d_c)?,
        top.slice_cols(d_c, side)?,
        bottom.slice_cols(0, d_c)?,
        bottom.slice_cols(d_c, side)?,
    ))
}

/// Inverse of [`partition_weights`].
pub fn assemble_blocks(
    w_cc: &Rank2Tensor,
    w_ct: &Rank2Tensor,
    w_tc: &Rank2Tensor,
    w_tt: &Rank2Tensor,
) -> Result<Rank2Tensor> {
    let (dc, dt) = (w_cc.rows().max(w_tc.cols()), w_tt.rows().max(w_ct.cols()));
    let side = dc + dt;
    if w_cc.len() != dc * dc || w_ct.len() != dc * dt || w_tc.len() != dt * dc || w_tt.len() != dt * dt {
        return Err(Error::mismatch(
            "assemble_blocks",
            &[w_cc.len(), w_ct.len(), w_tc.len(), w_tt.len()],
            &[dc, dt],
        ));
    }
    let mut data = Vec::with_capacity(side * side);
    for r in 0..dc {
        data.extend_from_slice(&w_cc.data()[r * dc..(r + 1) * dc]);
        data.extend_from_slice(&w_ct.data()[r * dt..(r + 1) * dt]);
    }
    for r in 0..dt {
        data.extend_from_slice(&w_tc.data()[r * dc..(r + 1) * dc]);
        data.extend_from_slice(&w_tt.data()[r * dt..(r + 1) * dt]);
    }
    Ok(Rank2Tensor::from_parts(side, side, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackMode {
    /// Broadcast context up front; every layer per candidate.
    Vanilla,
    /// Layer 0 decomposed; later layers per candidate.
    RankAware,
}

/// A DCNv2 stack. Only layer 0 can be decomposed: its output is rank-mixed.
pub fn dcnv2_stack(
    x0_c: &Rank2Tensor,
    x0_t: &Rank3Tensor,
    layers: &[CrossParams],
    mode: StackMode,
    counter: &mut FlopCounter,
) -> Result<Rank3Tensor> {
    let (first, rest) = layers.split_first().ok_or(Error::EmptyStack)?;
    let x0_c = x0_c.clone().flatten();
    let x0 = concat_cols(&broadcast(&x0_c, x0_t.n())?, x0_t)?;
    let mut x = match mode {
        StackMode::Vanilla => dcnv2_layer(&x0, &x0, first, counter)?,
        StackMode::RankAware => dcnv2_first_layer_decomposed(&x0_c, x0_t, first, counter)?,
    };
    for p in rest {
        x = dcnv2_layer(&x0, &x, p, counter)?;
    }
    Ok(x)
}

fn check_rdcn(c: &Rank2Tensor, t: &Rank3Tensor, p: &RdcnParams) -> Result<()> {
    if c.len() != p.d_c() {
        return Err(Error::mismatch("rdcn_layer", &c.shape(), &[1, p.d_c()]));
    }
    check_state("rdcn_layer", t, p.d_t())
}

/// `T_0 ⊙ (W_ct·c ⊕ W_t·T_l + b_t) + T_l`, with `W_ct·c` computed once.
fn rdcn_target_stream(
    c_read: &Rank2Tensor,
    t0: &Rank3Tensor,
    tl: &Rank3Tensor,
    p: &RdcnParams,
    counter: &mut FlopCounter,
) -> Result<Rank3Tensor> {
    let cross = matmul_bt(c_read, &p.w_ct, counter)?;
    let mut out = broadcast(&cross, tl.n())?;
    batched_apply_acc(&p.w_t, tl, &mut out, counter)?;
    cross_finish(&mut out, t0.data(), tl.data(), &p.b_t);
    Ok(out)
}

/// One rDCN layer. The context output never reads target data.
pub fn rdcn_layer(
    c0: &Rank2Tensor,
    cl: &Rank2Tensor,
    t0: &Rank3Tensor,
    tl: &Rank3Tensor,
    p: &RdcnParams,
    counter: &mut FlopCounter,
) -> Result<(Rank2Tensor, Rank3Tensor)> {
    let (c0, cl) = (c0.clone().flatten(), cl.clone().flatten());
    check_rdcn(&cl, tl, p)?;
    if c0.len() != cl.len() || t0.shape() != tl.shape() {
        return Err(Error::mismatch("rdcn_layer", &t0.shape(), &tl.shape()));
    }
    let mut c_next = matmul_bt(&cl, &p.w_c, counter)?;
    cross_finish_row(c_next.data_mut(), c0.data(), cl.data(), &p.b_c);
    let t_next = rdcn_target_stream(&cl, t0, tl, p, counter)?;
    Ok((c_next, t_next))
}

/// rDCN** layer: target stream only, its context read fixed at `c0`.
pub fn rdcn_ablated_layer(
    c0: &Rank2Tensor,
    t0: &Rank3Tensor,
    tl: &Rank3Tensor,
    p: &RdcnParams,
    counter: &mut FlopCounter,
) -> Result<Rank3Tensor> {
    let c0 = c0.clone().flatten();
    check_rdcn(&c0, tl, p)?;
    if t0.shape() != tl.shape() {
        return Err(Error::mismatch("rdcn_ablated_layer", &t0.shape(), &tl.shape()));
    }
    rdcn_target_stream(&c0, t0, tl, p, counter)
}

pub fn rdcn_stack(
    c0: &Rank2Tensor,
    t0: &Rank3Tensor,
    layers: &[RdcnParams],
    counter: &mut FlopCounter,
) -> Result<(Rank2Tensor, Rank3Tensor)> {
    if layers.is_empty() {
        return Err(Error::EmptyStack);
    }
    let c0 = c0.clone().flatten();
    let (mut c, mut t) = (c0.clone(), t0.clone());
    for p in layers {
        (c, t) = rdcn_layer(&c0, &c, t0, &t, p, counter)?;
    }
    Ok((c, t))
}

pub fn rdcn_ablated_stack(
    c0: &Rank2Tensor,
    t0: &Rank3Tensor,
    layers: &[RdcnParams],
    counter: &mut FlopCounter,
) -> Result<Rank3Tensor> {
    if layers.is_empty() {
        return Err(Error::EmptyStack);
    }
    let mut t = t0.clone();
    for p in layers {
        t = rdcn_ablated_layer(c0, t0, &t, p, counter)?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::oracle_cross;
    use crate::tensor::max_rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_kernel_passes_residual_through() {
        let mut r = rng(1);
        let x = Rank3Tensor::random_uniform(3, 1, 4, 1.0, &mut r);
        let p = CrossParams::new(Rank2Tensor::zeros(4, 4), vec![0.0; 4]).unwrap();
        assert_eq!(dcnv2_layer(&x, &x, &p, &mut FlopCounter::new()).unwrap(), x);
    }

    #[test]
    fn unit_bias_doubles_input() {
        let mut r = rng(2);
        let x = Rank3Tensor::random_uniform(3, 1, 4, 1.0, &mut r);
        let p = CrossParams::new(Rank2Tensor::zeros(4, 4), vec![1.0; 4]).unwrap();
        let out = dcnv2_layer(&x, &x, &p, &mut FlopCounter::new()).unwrap();
        let want: Vec<f32> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(out.data(), want.as_slice());
    }

    #[test]
    fn layer_matches_scalar_oracle() {
        let mut r = rng(5);
        let x0 = Rank3Tensor::random_uniform(4, 1, 5, 1.0, &mut r);
        let xl = Rank3Tensor::random_uniform(4, 1, 5, 1.0, &mut r);
        let p = CrossParams::random(5, &mut r);
        let mut c = FlopCounter::new();
        let out = dcnv2_layer(&x0, &xl, &p, &mut c).unwrap();
        let want = oracle_cross(&x0, &xl, &p.w, &p.b).unwrap();
        assert!(max_rel_err(out.data(), want.data()) <= 1e-6);
        assert_eq!(c.macs(), 4 * 25);
    }

    #[test]
    fn first_layer_all_context_is_independent_of_n() {
        let mut r = rng(3);
        let x_c = Rank2Tensor::random_uniform(1, 4, 1.0, &mut r);
        let p = CrossParams::random(4, &mut r);
        let mut costs = Vec::new();
        for n in [1, 5] {
            let mut c = FlopCounter::new();
            let out = dcnv2_first_layer_decomposed(&x_c, &Rank3Tensor::zeros(n, 1, 0), &p, &mut c).unwrap();
            assert_eq!(out.n(), n);
            costs.push(c.macs());
        }
        assert_eq!(costs[0], costs[1]);
    }

    #[test]
    fn first_layer_single_candidate_costs_the_same() {
        let mut r = rng(4);
        let x_c = Rank2Tensor::random_uniform(1, 4, 1.0, &mut r);
        let x_t = Rank3Tensor::random_uniform(1, 1, 3, 1.0, &mut r);
        let p = CrossParams::random(7, &mut r);
        let mut a = FlopCounter::new();
        let mut b = FlopCounter::new();
        dcnv2_stack(&x_c, &x_t, std::slice::from_ref(&p), StackMode::Vanilla, &mut a).unwrap();
        dcnv2_first_layer_decomposed(&x_c, &x_t, &p, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn first_layer_equals_vanilla_with_exact_savings() {
        let mut r = rng(13);
        let (dc, dt, n) = (4, 3, 6);
        let x_c = Rank2Tensor::random_uniform(1, dc, 1.0, &mut r);
        let x_t = Rank3Tensor::random_uniform(n, 1, dt, 1.0, &mut r);
        let p = CrossParams::random(dc + dt, &mut r);
        let x0 = concat_cols(&broadcast(&x_c, n).unwrap(), &x_t).unwrap();
        let mut a = FlopCounter::new();
        let mut b = FlopCounter::new();
        let want = dcnv2_layer(&x0, &x0, &p, &mut a).unwrap();
        let got = dcnv2_first_layer_decomposed(&x_c, &x_t, &p, &mut b).unwrap();
        assert!(max_rel_err(got.data(), want.data()) <= 1e-6);
        assert_eq!(a.macs() - b.macs(), ((n - 1) * (dc + dt) * dc) as u64);
    }

    #[test]
    fn lowrank_full_rank_embedding_reproduces_dense() {
        let mut r = rng(6);
        let d = 5;
        let dense = CrossParams::random(d, &mut r);
        let lr = LowRankCrossParams::new(Rank2Tensor::identity(d), dense.w.transpose(), dense.b.clone()).unwrap();
        let x0 = Rank3Tensor::random_uniform(3, 1, d, 1.0, &mut r);
        let xl = Rank3Tensor::random_uniform(3, 1, d, 1.0, &mut r);
        let a = dcnv2_lowrank_layer(&x0, &xl, &lr, &mut FlopCounter::new()).unwrap();
        let b = dcnv2_layer(&x0, &xl, &dense, &mut FlopCounter::new()).unwrap();
        assert!(max_rel_err(a.data(), b.data()) <= 1e-6);
    }

    #[test]
    fn lowrank_zero_u_leaves_residual_and_bias_term() {
        let mut r = rng(7);
        let d = 4;
        let b = vec![0.5, -1.0, 2.0, 0.0];
        let lr = LowRankCrossParams::new(Rank2Tensor::zeros(d, 2), Rank2Tensor::random_uniform(d, 2, 1.0, &mut r), b.clone()).unwrap();
        let x0 = Rank3Tensor::random_uniform(2, 1, d, 1.0, &mut r);
        let xl = Rank3Tensor::random_uniform(2, 1, d, 1.0, &mut r);
        let out = dcnv2_lowrank_layer(&x0, &xl, &lr, &mut FlopCounter::new()).unwrap();
        for i in 0..out.data().len() {
            let want = x0.data()[i] * b[i % d] + xl.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn lowrank_decomposed_matches_materialized_product() {
        let mut r = rng(8);
        let (dc, dt, rank, n) = (4, 3, 2, 5);
        let lr = LowRankCrossParams::new(
            Rank2Tensor::random_uniform(dc + dt, rank, 0.5, &mut r),
            Rank2Tensor::random_uniform(dc + dt, rank, 0.5, &mut r),
            Rank2Tensor::random_uniform(1, dc + dt, 0.1, &mut r).into_data(),
        )
        .unwrap();
        let x_c = Rank2Tensor::random_uniform(1, dc, 1.0, &mut r);
        let x_t = Rank3Tensor::random_uniform(n, 1, dt, 1.0, &mut r);
        let x0 = concat_cols(&broadcast(&x_c, n).unwrap(), &x_t).unwrap();
        let dense = lr.to_dense();
        let want = oracle_cross(&x0, &x0, &dense.w, &dense.b).unwrap();
        let plain = dcnv2_lowrank_layer(&x0, &x0, &lr, &mut FlopCounter::new()).unwrap();
        let mut c = FlopCounter::new();
        let split = dcnv2_lowrank_first_layer_decomposed(&x_c, &x_t, &lr, &mut c).unwrap();
        assert!(max_rel_err(plain.data(), want.data()) <= 1e-5);
        assert!(max_rel_err(split.data(), want.data()) <= 1e-5);
        let d = dc + dt;
        assert_eq!(c.macs(), (rank * dc + d * rank + n * (rank * dt + d * rank)) as u64);
    }

    #[test]
    fn lowrank_blocks_factor_through_partitioned_rows() {
        let mut r = rng(9);
        let (dc, dt, rank) = (3, 2, 2);
        let u = Rank2Tensor::random_uniform(dc + dt, rank, 1.0, &mut r);
        let v = Rank2Tensor::random_uniform(dc + dt, rank, 1.0, &mut r);
        let lr = LowRankCrossParams::new(u.clone(), v.clone(), vec![0.0; dc + dt]).unwrap();
        let (w_cc, w_ct, w_tc, w_tt) = partition_weights(&lr.to_dense().w, dc).unwrap();
        let mut c = FlopCounter::new();
        let (u_c, u_t) = (u.slice_rows(0, dc).unwrap(), u.slice_rows(dc, dc + dt).unwrap());
        let (v_c, v_t) = (v.slice_rows(0, dc).unwrap(), v.slice_rows(dc, dc + dt).unwrap());
        assert_eq!(w_cc, matmul_bt(&u_c, &v_c, &mut c).unwrap());
        assert_eq!(w_ct, matmul_bt(&u_c, &v_t, &mut c).unwrap());
        assert_eq!(w_tc, matmul_bt(&u_t, &v_c, &mut c).unwrap());
        assert_eq!(w_tt, matmul_bt(&u_t, &v_t, &mut c).unwrap());
    }

    #[test]
    fn partition_edges_and_round_trip() {
        let mut r = rng(10);
        let w = Rank2Tensor::random_uniform(5, 5, 1.0, &mut r);
        let (cc, ct, tc, tt) = partition_weights(&w, 0).unwrap();
        assert!(cc.is_empty() && ct.is_empty() && tc.is_empty());
        assert_eq!(tt, w);
        let (cc, ct, tc, tt) = partition_weights(&w, 5).unwrap();
        assert_eq!(cc, w);
        assert!(ct.is_empty() && tc.is_empty() && tt.is_empty());
        for dc in 0..=5 {
            let (cc, ct, tc, tt) = partition_weights(&w, dc).unwrap();
            assert_eq!(assemble_blocks(&cc, &ct, &tc, &tt).unwrap(), w);
        }
        assert!(partition_weights(&w, 6).is_err());
    }

    #[test]
    fn rdcn_zero_weights_pass_through() {
        let mut r = rng(11);
        let c = Rank2Tensor::random_uniform(1, 3, 1.0, &mut r);
        let t = Rank3Tensor::random_uniform(4, 1, 2, 1.0, &mut r);
        let (c1, t1) = rdcn_layer(&c, &c, &t, &t, &RdcnParams::zeros(3, 2), &mut FlopCounter::new()).unwrap();
        assert_eq!((c1, t1), (c.clone(), t.clone()));
        let layers = vec![RdcnParams::zeros(3, 2); 4];
        let (cl, tl) = rdcn_stack(&c, &t, &layers, &mut FlopCounter::new()).unwrap();
        assert_eq!((cl, tl), (c, t));
    }

    #[test]
    fn rdcn_matches_block_matrix_dcnv2() {
        let mut r = rng(12);
        let (dc, dt) = (3, 4);
        let p = RdcnParams::random(dc, dt, &mut r);
        let c0 = Rank2Tensor::random_uniform(1, dc, 1.0, &mut r);
        let cl = Rank2Tensor::random_uniform(1, dc, 1.0, &mut r);
        let t0 = Rank3Tensor::random_uniform(1, 1, dt, 1.0, &mut r);
        let tl = Rank3Tensor::random_uniform(1, 1, dt, 1.0, &mut r);
        let (c1, t1) = rdcn_layer(&c0, &cl, &t0, &tl, &p, &mut FlopCounter::new()).unwrap();
        let x0 = concat_cols(&broadcast(&c0, 1).unwrap(), &t0).unwrap();
        let xl = concat_cols(&broadcast(&cl, 1).unwrap(), &tl).unwrap();
        let want = dcnv2_layer(&x0, &xl, &p.block_matrix(), &mut FlopCounter::new()).unwrap();
        let got = concat_cols(&broadcast(&c1, 1).unwrap(), &t1).unwrap();
        assert!(max_rel_err(got.data(), want.data()) <= 1e-6);
    }

    #[test]
    fn rdcn_target_stream_block_form_agrees() {
        // [W_t | W_ct]·[T_l; c_l] realized per candidate against the two-matmul path
        let mut r = rng(14);
        let (dc, dt, n) = (3, 2, 5);
        let p = RdcnParams::random(dc, dt, &mut r);
        let c0 = Rank2Tensor::random_uniform(1, dc, 1.0, &mut r);
        let t0 = Rank3Tensor::random_uniform(n, 1, dt, 1.0, &mut r);
        let (_, t1) = rdcn_layer(&c0, &c0, &t0, &t0, &p, &mut FlopCounter::new()).unwrap();
        let block = p.w_t.hstack(&p.w_ct).unwrap();
        let stacked = concat_cols(&t0, &broadcast(&c0, n).unwrap()).unwrap();
        let mut mm = batched_apply(&block, &stacked, &mut FlopCounter::new()).unwrap();
        cross_finish(&mut mm, t0.data(), t0.data(), &p.b_t);
        assert!(max_rel_err(t1.data(), mm.data()) <= 1e-6);
    }

    #[test]
    fn rdcn_layer_cost_formula() {
        let mut r = rng(15);
        let (dc, dt, n) = (5, 3, 7);
        let p = RdcnParams::random(dc, dt, &mut r);
        let c0 = Rank2Tensor::random_uniform(1, dc, 1.0, &mut r);
        let t0 = Rank3Tensor::random_uniform(n, 1, dt, 1.0, &mut r);
        let mut c = FlopCounter::new();
        rdcn_layer(&c0, &c0, &t0, &t0, &p, &mut c).unwrap();
        assert_eq!(c.macs(), (dc * dc + dc * dt + n * dt * dt) as u64);
        let mut c = FlopCounter::new();
        rdcn_ablated_layer(&c0, &t0, &t0, &p, &mut c).unwrap();
        assert_eq!(c.macs(), (dt * dc + n * dt * dt) as u64);
    }

    #[test]
    fn ablated_first_layer_matches_rdcn_then_diverges() {
        let mut r = rng(5);
        let (dc, dt, n) = (4, 3, 3);
        let layers: Vec<_> = (0..3).map(|_| RdcnParams::random(dc, dt, &mut r)).collect();
        let c0 = Rank2Tensor::random_uniform(1, dc, 1.0, &mut r);
        let t0 = Rank3Tensor::random_uniform(n, 1, dt, 1.0, &mut r);
        let (_, full1) = rdcn_stack(&c0, &t0, &layers[..1], &mut FlopCounter::new()).unwrap();
        let abl1 = rdcn_ablated_stack(&c0, &t0, &layers[..1], &mut FlopCounter::new()).unwrap();
        assert_eq!(full1, abl1);
        let (_, full3) = rdcn_stack(&c0, &t0, &layers, &mut FlopCounter::new()).unwrap();
        let abl3 = rdcn_ablated_stack(&c0, &t0, &layers, &mut FlopCounter::new()).unwrap();
        assert!(crate::tensor::max_abs_err(full3.data(), abl3.data()) > 1e-3);
    }

    #[test]
    fn rdcn_parameter_count() {
        let p = RdcnParams::zeros(5, 3);
        assert_eq!(p.weight_count(), 25 + 15 + 9);
        assert_eq!(p.block_matrix().w.len() - p.weight_count(), 15);
    }

    #[test]
    fn empty_stacks_are_rejected() {
        let c = Rank2Tensor::zeros(1, 2);
        let t = Rank3Tensor::zeros(1, 1, 2);
        let mut k = FlopCounter::new();
        assert!(matches!(rdcn_stack(&c, &t, &[], &mut k), Err(Error::EmptyStack)));
        assert!(matches!(rdcn_ablated_stack(&c, &t, &[], &mut k), Err(Error::EmptyStack)));
        assert!(matches!(dcnv2_stack(&c, &t, &[], StackMode::Vanilla, &mut k), Err(Error::EmptyStack)));
    }
}

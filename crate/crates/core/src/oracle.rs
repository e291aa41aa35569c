//! Brute-force reference implementations.
//!
//! Every function here is a literal transcription of the layer formula: explicit index
//! loops, accumulation in [`Acc`], no instrumentation, and no calls into the kernels in
//! [`crate::tensor`]. Agreement between an optimized path and these is therefore
//! evidence rather than tautology.

use serde::Serialize;

use crate::attention::AttnParams;
use crate::error::{Error, Result};
use crate::fc::{Activation, DenseParams};
use crate::tensor::{max_abs_err, max_rel_err, Rank2Tensor, Rank3Tensor};

/// Accumulator type. It matches the optimized paths, so oracle disagreement measures
/// reordering and formula errors, not the gap between single precision and exact.
pub type Acc = f32;

/// Tolerance for purely linear and bilinear paths.
pub const LINEAR_TOL: f64 = 1e-6;
/// Tolerance for paths that go through an exponential.
pub const SOFTMAX_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub case_id: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn compare(case_id: impl Into<String>, got: &[f32], want: &[f32], tolerance: f64) -> Self {
        if got.len() != want.len() {
            return Self {
                case_id: case_id.into(),
                max_abs_err: f64::INFINITY,
                max_rel_err: f64::INFINITY,
                tolerance,
                pass: false,
            };
        }
        let max_rel_err = max_rel_err(got, want);
        Self {
            case_id: case_id.into(),
            max_abs_err: max_abs_err(got, want),
            max_rel_err,
            tolerance,
            pass: max_rel_err <= tolerance,
        }
    }
}

fn field(ctx: &Rank2Tensor, tgt: &Rank3Tensor, j: usize, i: usize, d: usize) -> Acc {
    let k = ctx.rows();
    if i < k {
        Acc::from(ctx.get(i, d))
    } else {
        Acc::from(tgt.get(j, i - k, d))
    }
}

fn check_fields(ctx: &Rank2Tensor, tgt: &Rank3Tensor) -> Result<()> {
    if ctx.rows() > 0 && tgt.rows() > 0 && ctx.cols() != tgt.cols() {
        return Err(Error::mismatch("oracle", &ctx.shape(), &tgt.shape()));
    }
    Ok(())
}

/// All pairwise dot products over `[c_1..c_K, t_1..t_M]`, `i < j`, per candidate.
pub fn oracle_fm(ctx: &Rank2Tensor, tgt: &Rank3Tensor) -> Result<Rank3Tensor> {
    check_fields(ctx, tgt)?;
    let fields = ctx.rows() + tgt.rows();
    let dim = if ctx.rows() > 0 { ctx.cols() } else { tgt.cols() };
    let n = tgt.n();
    let mut out = Vec::new();
    for j in 0..n {
        for a in 0..fields {
            for b in (a + 1)..fields {
                let mut s = 0.0 as Acc;
                for d in 0..dim {
                    s += field(ctx, tgt, j, a, d) * field(ctx, tgt, j, b, d);
                }
                out.push(s as f32);
            }
        }
    }
    let pairs = fields * fields.saturating_sub(1) / 2;
    Rank3Tensor::new(n, 1, pairs, out)
}

/// Dense layer over an explicitly materialized `[x_c | x_t_j]` row per candidate.
pub fn oracle_dense(x_c: &Rank2Tensor, x_t: &Rank3Tensor, p: &DenseParams) -> Result<Rank3Tensor> {
    let (xc, xt) = (x_c.len(), x_t.rows() * x_t.cols());
    if xc + xt != p.w.rows() {
        return Err(Error::mismatch("oracle_dense", &[xc, xt], &p.w.shape()));
    }
    let units = p.w.cols();
    let mut out = Vec::with_capacity(x_t.n() * units);
    for j in 0..x_t.n() {
        let mut concat: Vec<Acc> = x_c.data().iter().map(|&v| Acc::from(v)).collect();
        concat.extend(x_t.slice(j).iter().map(|&v| Acc::from(v)));
        for u in 0..units {
            let mut s = 0.0 as Acc;
            for (r, x) in concat.iter().enumerate() {
                s += x * Acc::from(p.w.get(r, u));
            }
            s += Acc::from(p.b[u]);
            if p.activation == Activation::Relu && s < 0.0 {
                s = 0.0;
            }
            out.push(s as f32);
        }
    }
    Rank3Tensor::new(x_t.n(), 1, units, out)
}

/// `x0 ⊙ (W·xl + b) + xl`, one scalar at a time, per candidate.
pub fn oracle_cross(
    x0: &Rank3Tensor,
    xl: &Rank3Tensor,
    w: &Rank2Tensor,
    b: &[f32],
) -> Result<Rank3Tensor> {
    let dim = x0.cols();
    if x0.shape() != xl.shape() || x0.rows() != 1 || w.shape() != [dim, dim] || b.len() != dim {
        return Err(Error::mismatch("oracle_cross", &x0.shape(), &w.shape()));
    }
    let mut out = Vec::with_capacity(x0.n() * dim);
    for j in 0..x0.n() {
        for r in 0..dim {
            let mut s = 0.0 as Acc;
            for k in 0..dim {
                s += Acc::from(w.get(r, k)) * Acc::from(xl.get(j, 0, k));
            }
            s += Acc::from(b[r]);
            let v = Acc::from(x0.get(j, 0, r)) * s + Acc::from(xl.get(j, 0, r));
            out.push(v as f32);
        }
    }
    Rank3Tensor::new(x0.n(), 1, dim, out)
}

fn project(e: &[Vec<Acc>], w: &Rank2Tensor) -> Vec<Vec<Acc>> {
    e.iter()
        .map(|row| {
            (0..w.cols())
                .map(|c| {
                    let mut s = 0.0 as Acc;
                    for (d, x) in row.iter().enumerate() {
                        s += x * Acc::from(w.get(d, c));
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn stacked_fields(ctx: &Rank2Tensor, tgt: &Rank3Tensor, j: usize) -> Vec<Vec<Acc>> {
    let dim = if ctx.rows() > 0 { ctx.cols() } else { tgt.cols() };
    (0..ctx.rows() + tgt.rows())
        .map(|i| (0..dim).map(|d| field(ctx, tgt, j, i, d)).collect())
        .collect()
}

/// `softmax(QKᵀ/√d_k)·V` per candidate, materializing the full score matrix first.
pub fn oracle_attention(ctx: &Rank2Tensor, tgt: &Rank3Tensor, p: &AttnParams) -> Result<Rank3Tensor> {
    check_fields(ctx, tgt)?;
    let fields = ctx.rows() + tgt.rows();
    if fields == 0 {
        return Err(Error::NoFields);
    }
    let dk = p.d_k();
    let scale = 1.0 / (dk as Acc).sqrt();
    let mut out = Vec::new();
    for j in 0..tgt.n() {
        let e = stacked_fields(ctx, tgt, j);
        let (q, k, v) = (project(&e, &p.w_q), project(&e, &p.w_k), project(&e, &p.w_v));
        let mut scores = vec![vec![0.0 as Acc; fields]; fields];
        for a in 0..fields {
            for b in 0..fields {
                let mut s = 0.0;
                for c in 0..dk {
                    s += q[a][c] * k[b][c];
                }
                scores[a][b] = s * scale;
            }
        }
        for row in &mut scores {
            let max = row.iter().copied().fold(Acc::NEG_INFINITY, Acc::max);
            let z: Acc = row.iter().map(|s| (s - max).exp()).sum();
            for s in row.iter_mut() {
                *s = (*s - max).exp() / z;
            }
        }
        for row in &scores {
            for c in 0..dk {
                let mut s = 0.0;
                for (b, wgt) in row.iter().enumerate() {
                    s += wgt * v[b][c];
                }
                out.push(s as f32);
            }
        }
    }
    Rank3Tensor::new(tgt.n(), fields, dk, out)
}

/// Single-query attention: `query` attends over explicitly listed keys and values.
pub fn oracle_attention_row(query: &[Acc], keys: &[Vec<Acc>], values: &[Vec<Acc>], scale: Acc) -> Vec<Acc> {
    let scores: Vec<Acc> = keys
        .iter()
        .map(|k| k.iter().zip(query).map(|(a, b)| a * b).sum::<Acc>() * scale)
        .collect();
    let max = scores.iter().copied().fold(Acc::NEG_INFINITY, Acc::max);
    let weights: Vec<Acc> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: Acc = weights.iter().sum();
    let width = values.first().map_or(0, Vec::len);
    (0..width)
        .map(|c| weights.iter().zip(values).map(|(w, v)| w * v[c]).sum::<Acc>() / z)
        .collect()
}

/// Second attention reference: one query row at a time through [`oracle_attention_row`].
pub fn oracle_attention_rowwise(
    ctx: &Rank2Tensor,
    tgt: &Rank3Tensor,
    p: &AttnParams,
) -> Result<Rank3Tensor> {
    check_fields(ctx, tgt)?;
    let fields = ctx.rows() + tgt.rows();
    if fields == 0 {
        return Err(Error::NoFields);
    }
    let dk = p.d_k();
    let scale = 1.0 / (dk as Acc).sqrt();
    let mut out = Vec::new();
    for j in 0..tgt.n() {
        let e = stacked_fields(ctx, tgt, j);
        let (q, k, v) = (project(&e, &p.w_q), project(&e, &p.w_k), project(&e, &p.w_v));
        for row in &q {
            out.extend(oracle_attention_row(row, &k, &v, scale).into_iter().map(|x| x as f32));
        }
    }
    Rank3Tensor::new(tgt.n(), fields, dk, out)
}

/// Projects rows of a rank-2 tensor into [`Acc`] rows through `w`.
pub fn oracle_project(x: &Rank2Tensor, w: &Rank2Tensor) -> Vec<Vec<Acc>> {
    let rows: Vec<Vec<Acc>> = (0..x.rows())
        .map(|r| x.row(r).iter().map(|&v| Acc::from(v)).collect())
        .collect();
    project(&rows, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fm_hand_case() {
        let ctx = Rank2Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let tgt = Rank3Tensor::new(1, 1, 2, vec![1.0, 1.0]).unwrap();
        let out = oracle_fm(&ctx, &tgt).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn fm_zero_embeddings() {
        let ctx = Rank2Tensor::zeros(3, 4);
        let tgt = Rank3Tensor::zeros(2, 2, 4);
        let out = oracle_fm(&ctx, &tgt).unwrap();
        assert_eq!(out.shape(), [2, 1, 10]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_trivial_cases() {
        let x = Rank3Tensor::new(2, 1, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let w = Rank2Tensor::zeros(3, 3);
        assert_eq!(oracle_cross(&x, &x, &w, &[0.0; 3]).unwrap(), x);
        let doubled = oracle_cross(&x, &x, &w, &[1.0; 3]).unwrap();
        let want: Vec<f32> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(doubled.data(), want.as_slice());
    }

    #[test]
    fn attention_single_token_returns_its_value() {
        let ctx = Rank2Tensor::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let tgt = Rank3Tensor::zeros(2, 0, 2);
        let p = AttnParams::new(
            Rank2Tensor::identity(2),
            Rank2Tensor::identity(2),
            Rank2Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap(),
        )
        .unwrap();
        let out = oracle_attention(&ctx, &tgt, &p).unwrap();
        for j in 0..2 {
            let s = out.slice(j);
            assert!((s[0] - 0.6).abs() < 1e-6 && (s[1] + 2.1).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_uniform_when_fields_identical() {
        // identical fields give identical scores, so the output is the shared value row
        let e = vec![0.5f32, -1.0, 0.25];
        let ctx = Rank2Tensor::from_rows(&[e.clone(), e.clone()]).unwrap();
        let tgt = Rank3Tensor::new(1, 2, 3, [e.clone(), e.clone()].concat()).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
        let p = AttnParams::random(3, 3, &mut rng);
        let out = oracle_attention(&ctx, &tgt, &p).unwrap();
        let v = oracle_project(&Rank2Tensor::row_vector(e), &p.w_v);
        for row in 0..4 {
            for c in 0..3 {
                assert!((out.get(0, row, c) - v[0][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_references_agree() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(21);
        let ctx = Rank2Tensor::random_uniform(3, 4, 1.0, &mut rng);
        let tgt = Rank3Tensor::random_uniform(3, 2, 4, 1.0, &mut rng);
        let p = AttnParams::random(4, 4, &mut rng);
        let a = oracle_attention(&ctx, &tgt, &p).unwrap();
        let b = oracle_attention_rowwise(&ctx, &tgt, &p).unwrap();
        assert!(max_rel_err(a.data(), b.data()) < 1e-7);
    }

    #[test]
    fn report_pass_flag_tracks_tolerance() {
        let r = OracleReport::compare("x", &[1.0, 2.0], &[1.0, 2.0001], 1e-6);
        assert!(!r.pass);
        let r = OracleReport::compare("x", &[1.0, 2.0], &[1.0, 2.0], 1e-6);
        assert!(r.pass && r.max_abs_err == 0.0);
    }
}

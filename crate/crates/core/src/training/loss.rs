//! Contrastive and semantic-ID losses with their gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::Serialize;

use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::model::layers::softmax;
use crate::model::{cst, Float};

const NORM_EPS: f64 = 1e-12;

/// Training metrics for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub l_c1: f64,
    pub l_c2: f64,
    pub l_total: f64,
    /// Auxiliary expert-balance loss; not part of `l_total`.
    pub aux: f64,
    pub hitrate: f64,
    pub ndcg: f64,
}

pub fn total_loss(l_con: f64, l_c1: f64, l_c2: f64, lambda1: f64, lambda2: f64) -> f64 {
    l_con + lambda1 * l_c1 + lambda2 * l_c2
}

/// Rows scaled to unit length (with a tiny floor), plus the norms used.
pub fn normalize_rows<F: Float>(x: ArrayView2<F>) -> (Array2<F>, Array1<F>) {
    let eps = cst::<F>(NORM_EPS);
    let norms = x.map_axis(Axis(1), |r| (r.dot(&r) + eps).sqrt());
    let mut y = x.to_owned();
    for (mut row, &n) in y.outer_iter_mut().zip(norms.iter()) {
        row /= n;
    }
    (y, norms)
}

/// Backward of [`normalize_rows`]: `dx = (dy − y (y·dy)) / n`.
pub fn normalize_rows_backward<F: Float>(dy: ArrayView2<F>, y: ArrayView2<F>, norms: ArrayView1<F>) -> Array2<F> {
    let mut dx = dy.to_owned();
    for ((mut d, yr), &n) in dx.outer_iter_mut().zip(y.outer_iter()).zip(norms.iter()) {
        let proj = yr.dot(&d);
        d.scaled_add(-proj, &yr);
        d /= n;
    }
    dx
}

#[derive(Debug, Clone)]
pub struct InfoNce<F> {
    pub loss: f64,
    /// `cos/τ − log Q(j)`, with same-item negatives set to −∞.
    pub logits: Array2<F>,
    pub d_h: Array2<F>,
    pub d_e: Array2<F>,
    /// Fraction of rows whose positive ranks in the in-batch top 10.
    pub hitrate: f64,
    pub ndcg: f64,
}

/// 1-based rank of column `pos` in `row`; ties go to the lower column.
pub fn rank_in_row<F: Float>(row: ArrayView1<F>, pos: usize) -> usize {
    let v = row[pos];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < pos))
        .count()
}

/// In-batch sampled softmax over the batch's own targets, debiased by
/// `log Q`. `h` and `e` are raw; cosine similarity is taken internally and
/// gradients are returned for the raw rows. The loss is averaged over rows.
pub fn infonce_logq_loss<F: Float>(
    h: ArrayView2<F>,
    e: ArrayView2<F>,
    targets: &[ItemId],
    log_q: &[f64],
    tau: f64,
) -> Result<InfoNce<F>> {
    let b = h.nrows();
    if e.nrows() != b || targets.len() != b || log_q.len() != b || h.ncols() != e.ncols() {
        return Err(Error::Shape("infonce inputs disagree on batch size or width".into()));
    }
    if b == 0 {
        return Err(Error::Empty("empty batch"));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let inv_tau = cst::<F>(1.0 / tau);
    let (hn, h_norm) = normalize_rows(h);
    let (en, e_norm) = normalize_rows(e);
    let mut logits = hn.dot(&en.t()) * inv_tau;
    for u in 0..b {
        for j in 0..b {
            if j != u && targets[j] == targets[u] {
                logits[[u, j]] = F::neg_infinity();
            } else {
                logits[[u, j]] -= cst::<F>(log_q[j]);
            }
        }
    }
    let scale = cst::<F>(1.0 / b as f64);
    let mut d_logits = Array2::zeros((b, b));
    let mut loss = 0.0;
    let (mut hits, mut ndcg) = (0.0, 0.0);
    for u in 0..b {
        let row = logits.row(u);
        let p = softmax(row);
        loss -= p[u].ln().to_f64().unwrap_or(f64::NAN);
        let mut d = p * scale;
        d[u] -= scale;
        d_logits.row_mut(u).assign(&d);
        let r = rank_in_row(row, u);
        if r <= 10 {
            hits += 1.0;
            ndcg += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let d_hn = d_logits.dot(&en) * inv_tau;
    let d_en = d_logits.t().dot(&hn) * inv_tau;
    let d_h = normalize_rows_backward(d_hn.view(), hn.view(), h_norm.view());
    let d_e = normalize_rows_backward(d_en.view(), en.view(), e_norm.view());
    let bf = b as f64;
    Ok(InfoNce {
        loss: loss / bf,
        logits,
        d_h,
        d_e,
        hitrate: hits / bf,
        ndcg: ndcg / bf,
    })
}

#[derive(Debug, Clone)]
pub struct SidCe<F> {
    pub l_c1: f64,
    pub l_c2: f64,
    pub d_logits1: Array2<F>,
    pub d_logits2: Array2<F>,
}

fn mean_ce<F: Float>(logits: ArrayView2<F>, targets: &[usize]) -> Result<(f64, Array2<F>)> {
    let (b, k) = logits.dim();
    if targets.len() != b {
        return Err(Error::Shape("one target per logit row".into()));
    }
    if b == 0 {
        return Err(Error::Empty("empty batch"));
    }
    let scale = cst::<F>(1.0 / b as f64);
    let mut grad = Array2::zeros((b, k));
    let mut loss = 0.0;
    for (u, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::CodeOutOfRange { code: t, k });
        }
        let p = softmax(logits.row(u));
        let m = logits.row(u).fold(F::neg_infinity(), |a, &x| a.max(x));
        let lse = logits.row(u).mapv(|x| (x - m).exp()).sum().ln() + m;
        loss += (lse - logits[[u, t]]).to_f64().unwrap_or(f64::NAN);
        let mut d = p * scale;
        d[t] -= scale;
        grad.row_mut(u).assign(&d);
    }
    Ok((loss / b as f64, grad))
}

/// Mean cross-entropy per code level; level-2 logits must already be
/// conditioned on the ground-truth level-1 code.
pub fn sid_ce_losses<F: Float>(
    logits1: ArrayView2<F>,
    logits2: ArrayView2<F>,
    c1: &[usize],
    c2: &[usize],
) -> Result<SidCe<F>> {
    let (l_c1, d_logits1) = mean_ce(logits1, c1)?;
    let (l_c2, d_logits2) = mean_ce(logits2, c2)?;
    Ok(SidCe {
        l_c1,
        l_c2,
        d_logits1,
        d_logits2,
    })
}

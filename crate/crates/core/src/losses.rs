//! Softmax-based losses on logit matrices, with their logit gradients.
//!
//! Everything is accumulated in `f64` and returned per batch mean.

use fedsyn_nn::Tensor;

use crate::error::{FedSynError, Result};

/// Floor applied to probabilities inside logarithms.
pub const LOG_EPS: f64 = 1e-8;

pub(crate) fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(FedSynError::NonFinite(what.to_string()))
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(FedSynError::InvalidArgument(format!(
            "logit shapes differ or are not 2-d: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    check_finite(a, "teacher logits")?;
    check_finite(b, "student logits")
}

/// Row-wise `log softmax(row / tau)`.
pub fn log_softmax(row: &[f32], tau: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 / tau));
    let lse = max + row.iter().map(|&v| (v as f64 / tau - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 / tau - lse).collect()
}

/// Mean cross-entropy of `softmax(logits)` against integer targets, and its
/// gradient with respect to `logits`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 || logits.batch() != targets.len() {
        return Err(FedSynError::InvalidArgument(format!(
            "logits {:?} vs {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    check_finite(logits, "logits")?;
    let (b, c) = (logits.batch(), logits.row_len());
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(FedSynError::InvalidArgument(format!("target {t} out of range for {c} classes")));
    }
    let mut grad = Tensor::zeros([b, c]);
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let lp = log_softmax(logits.row(i), 1.0);
        total -= lp[t];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = lp[j].exp();
            *g = ((p - if j == t { 1.0 } else { 0.0 }) / b as f64) as f32;
        }
    }
    Ok((total / b.max(1) as f64, grad))
}

/// Per-row `KL(softmax(p/tau) || softmax(q/tau))` with log-probabilities
/// floored at `ln LOG_EPS`, plus gradients of each row's KL w.r.t. both
/// logit rows.
pub(crate) fn kl_row(p_logits: &[f32], q_logits: &[f32], tau: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let floor = LOG_EPS.ln();
    let lp_raw = log_softmax(p_logits, tau);
    let lq_raw = log_softmax(q_logits, tau);
    let c = lp_raw.len();
    let p: Vec<f64> = lp_raw.iter().map(|v| v.exp()).collect();
    let q: Vec<f64> = lq_raw.iter().map(|v| v.exp()).collect();
    let lp: Vec<f64> = lp_raw.iter().map(|&v| v.max(floor)).collect();
    let lq: Vec<f64> = lq_raw.iter().map(|&v| v.max(floor)).collect();
    let u: Vec<f64> = (0..c).map(|j| lp[j] - lq[j]).collect();
    let kl: f64 = (0..c).map(|j| p[j] * u[j]).sum();

    // d/dp_logits: h_j = p_j (u_j + [lp_j unclamped]); grad_c = (h_c - p_c sum h) / tau
    let h: Vec<f64> = (0..c).map(|j| p[j] * (u[j] + if lp_raw[j] > floor { 1.0 } else { 0.0 })).collect();
    let hs: f64 = h.iter().sum();
    let dp: Vec<f64> = (0..c).map(|j| (h[j] - p[j] * hs) / tau).collect();
    // d/dq_logits: g_j = -p_j [lq_j unclamped]; grad_c = (g_c - q_c sum g) / tau
    let g: Vec<f64> = (0..c).map(|j| if lq_raw[j] > floor { -p[j] } else { 0.0 }).collect();
    let gs: f64 = g.iter().sum();
    let dq: Vec<f64> = (0..c).map(|j| (g[j] - q[j] * gs) / tau).collect();
    (kl, dp, dq)
}

/// Mean KL divergence from teacher to student softmax over the batch.
/// Returns the loss and its gradients w.r.t. teacher and student logits.
pub fn kl_divergence(teacher: &Tensor, student: &Tensor, tau: f64) -> Result<(f64, Tensor, Tensor)> {
    check_pair(teacher, student)?;
    let (b, c) = (teacher.batch(), teacher.row_len());
    let mut dt = Tensor::zeros([b, c]);
    let mut ds = Tensor::zeros([b, c]);
    let mut total = 0.0;
    for i in 0..b {
        let (kl, gp, gq) = kl_row(teacher.row(i), student.row(i), tau);
        total += kl;
        for j in 0..c {
            dt.row_mut(i)[j] = (gp[j] / b as f64) as f32;
            ds.row_mut(i)[j] = (gq[j] / b as f64) as f32;
        }
    }
    Ok((total / b.max(1) as f64, dt, ds))
}

/// Negative KL restricted to rows where teacher and student disagree in
/// argmax (ties resolve to the lowest class), averaged over all rows.
pub fn masked_neg_kl(teacher: &Tensor, student: &Tensor, tau: f64) -> Result<(f64, Tensor, Tensor)> {
    check_pair(teacher, student)?;
    let (b, c) = (teacher.batch(), teacher.row_len());
    let at = teacher.argmax_rows();
    let as_ = student.argmax_rows();
    let mut dt = Tensor::zeros([b, c]);
    let mut ds = Tensor::zeros([b, c]);
    let mut total = 0.0;
    for i in 0..b {
        if at[i] == as_[i] {
            continue;
        }
        let (kl, gp, gq) = kl_row(teacher.row(i), student.row(i), tau);
        total -= kl;
        for j in 0..c {
            dt.row_mut(i)[j] = (-gp[j] / b as f64) as f32;
            ds.row_mut(i)[j] = (-gq[j] / b as f64) as f32;
        }
    }
    Ok((total / b.max(1) as f64, dt, ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f32]]) -> Tensor {
        let c = rows[0].len();
        Tensor::new([rows.len(), c], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    fn logit_pair(p: f64) -> [f32; 2] {
        [(p / (1.0 - p)).ln() as f32, 0.0]
    }

    #[test]
    fn cross_entropy_anchors() {
        let (l, _) = cross_entropy(&Tensor::zeros([3, 10]), &[0, 4, 9]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let mut row = [0.0f32; 10];
        row[2] = 30.0;
        let (l, _) = cross_entropy(&t(&[&row]), &[2]).unwrap();
        assert!(l < 1e-9);
        assert!(cross_entropy(&t(&[&[f32::NAN, 0.0]]), &[0]).is_err());
    }

    #[test]
    fn kl_anchor_values() {
        let (kl, _, _) = kl_divergence(&t(&[&logit_pair(0.75)]), &t(&[&[0.0, 0.0]]), 1.0).unwrap();
        assert!((kl - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-6);
        let (d, _, _) = masked_neg_kl(&t(&[&logit_pair(0.9)]), &t(&[&logit_pair(0.1)]), 1.0).unwrap();
        assert!((d + 0.8 * 9f64.ln()).abs() < 1e-6, "{d}");
        let a = t(&[&[0.3, -1.0, 2.0]]);
        assert_eq!(masked_neg_kl(&a, &a, 1.0).unwrap().0, 0.0);
        assert!(kl_divergence(&a, &a, 1.0).unwrap().0.abs() < 1e-12);
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let p = [1.3f32, -0.4, 0.2, 2.0];
        let q = [-0.5f32, 0.9, 0.1, -1.2];
        for tau in [1.0, 2.5] {
            let (_, gp, gq) = kl_row(&p, &q, tau);
            let eps = 1e-3f32;
            for j in 0..4 {
                let mut pp = p;
                pp[j] += eps;
                let mut pm = p;
                pm[j] -= eps;
                let fd = (kl_row(&pp, &q, tau).0 - kl_row(&pm, &q, tau).0) / (2.0 * eps as f64);
                assert!((fd - gp[j]).abs() < 1e-4, "dp {j}: {fd} vs {}", gp[j]);
                let mut qp = q;
                qp[j] += eps;
                let mut qm = q;
                qm[j] -= eps;
                let fd = (kl_row(&p, &qp, tau).0 - kl_row(&p, &qm, tau).0) / (2.0 * eps as f64);
                assert!((fd - gq[j]).abs() < 1e-4, "dq {j}: {fd} vs {}", gq[j]);
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero() {
        let (_, g) = cross_entropy(&t(&[&[0.1, 0.5, -2.0], &[3.0, 0.0, 0.0]]), &[1, 0]).unwrap();
        for i in 0..2 {
            assert!(g.row(i).iter().sum::<f32>().abs() < 1e-7);
        }
    }
}

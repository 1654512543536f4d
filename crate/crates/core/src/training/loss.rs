//! Semantic cross-entropy and instance center-offset losses.

use log::warn;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Norm below which the cosine term and its gradient are taken as zero.
pub const COSINE_GUARD: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub semantic: f64,
    pub offset: f64,
    pub grad_logits: Matrix,
    pub grad_offsets: Option<Matrix>,
}

/// Mean softmax cross-entropy; returns the loss and `(p − onehot) / N`.
pub fn loss_semseg(logits: &Matrix, labels: &[u32]) -> Result<(f64, Matrix)> {
    let (n, c) = (logits.rows(), logits.cols());
    if n == 0 {
        return Err(Error::EmptyBatch("cross-entropy over zero voxels"));
    }
    if labels.len() != n {
        return Err(Error::shape("loss_semseg (labels)", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        let y = labels[r] as usize;
        loss += log_z - row[y];
        let g = grad.row_mut(r);
        for (j, v) in row.iter().enumerate() {
            g[j] = (v - log_z).exp() * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Per-voxel offset term `|c − c*|₁ − cos(c, c*)` and its gradient in `c`.
fn offset_term(c: &[f64], t: &[f64]) -> (f64, [f64; 3]) {
    let mut grad = [0.0; 3];
    let mut l1 = 0.0;
    for k in 0..3 {
        let d = c[k] - t[k];
        l1 += d.abs();
        grad[k] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    let nc = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nc < COSINE_GUARD || nt < COSINE_GUARD {
        return (l1, grad);
    }
    let dot: f64 = c.iter().zip(t).map(|(a, b)| a * b).sum();
    let cos = dot / (nc * nt);
    for k in 0..3 {
        let dcos = t[k] / (nc * nt) - dot * c[k] / (nc * nc * nc * nt);
        grad[k] -= dcos;
    }
    (l1 - cos, grad)
}

/// Semantic loss plus the offset term averaged over foreground voxels.
pub fn loss_insseg(
    logits: &Matrix,
    labels: &[u32],
    pred_offsets: &Matrix,
    target_offsets: &Matrix,
    fg_mask: &[bool],
) -> Result<LossOutput> {
    let n = logits.rows();
    for (what, rows) in [("pred_offsets", pred_offsets.rows()), ("target_offsets", target_offsets.rows())] {
        if rows != n {
            return Err(Error::InvalidArgument(format!("{what} has {rows} rows, expected {n}")));
        }
    }
    if pred_offsets.cols() != 3 || target_offsets.cols() != 3 {
        return Err(Error::shape("loss_insseg (offset width)", 3, pred_offsets.cols().max(target_offsets.cols())));
    }
    if fg_mask.len() != n {
        return Err(Error::shape("loss_insseg (fg_mask)", n, fg_mask.len()));
    }
    if !target_offsets.is_finite() {
        return Err(Error::NonFinite("target offsets".into()));
    }
    let (semantic, grad_logits) = loss_semseg(logits, labels)?;
    let n_fg = fg_mask.iter().filter(|&&f| f).count();
    let mut grad_off = Matrix::zeros(n, 3);
    let mut offset = 0.0;
    if n_fg == 0 {
        warn!("no foreground voxels in batch; offset term is 0");
    } else {
        let inv = 1.0 / n_fg as f64;
        for r in (0..n).filter(|&r| fg_mask[r]) {
            let (v, g) = offset_term(pred_offsets.row(r), target_offsets.row(r));
            offset += v;
            for (d, gk) in grad_off.row_mut(r).iter_mut().zip(g) {
                *d = gk * inv;
            }
        }
        offset *= inv;
    }
    Ok(LossOutput {
        loss: semantic + offset,
        semantic,
        offset,
        grad_logits,
        grad_offsets: Some(grad_off),
    })
}

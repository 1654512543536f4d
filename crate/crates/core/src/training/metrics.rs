//! Confusion-matrix segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `None` when the class is absent from both prediction and truth.
    pub iou: Option<f64>,
    /// `None` when the class is absent from the truth.
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub macc: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl SegMetrics {
    pub const CSV_HEADER: &'static str = "class,tp,fp,fn,iou,recall";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for c in &self.per_class {
            s.push_str(&format!("{},{},{},{},{},{}\n", c.class, c.tp, c.fp, c.fn_, opt(c.iou), opt(c.recall)));
        }
        s
    }
}

pub fn miou_macc(pred: &[u32], truth: &[u32], num_classes: usize) -> Result<SegMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::shape("miou_macc (lengths)", truth.len(), pred.len()));
    }
    let mut conf = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p as usize >= num_classes || t as usize >= num_classes {
            return Err(Error::InvalidArgument(format!("label out of range for {num_classes} classes")));
        }
        conf[t as usize][p as usize] += 1;
    }
    let per_class: Vec<ClassMetrics> = (0..num_classes)
        .map(|c| {
            let tp = conf[c][c];
            let fn_ = conf[c].iter().sum::<usize>() - tp;
            let fp = (0..num_classes).map(|t| conf[t][c]).sum::<usize>() - tp;
            let union = tp + fp + fn_;
            ClassMetrics {
                class: c,
                tp,
                fp,
                fn_,
                iou: (union > 0).then(|| tp as f64 / union as f64),
                recall: (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64),
            }
        })
        .collect();
    let mean = |v: Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(SegMetrics {
        miou: mean(per_class.iter().filter_map(|c| c.iou).collect()),
        macc: mean(per_class.iter().filter_map(|c| c.recall).collect()),
        per_class,
    })
}

/// Row-wise argmax (lowest index on ties).
pub fn argmax_rows(logits: &Matrix) -> Vec<u32> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

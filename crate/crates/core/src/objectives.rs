//! Scalar objectives and the zero-shot classifier, each with its analytic
//! gradient.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::encoders::Embedding;
use crate::error::{Error, Result};

pub const KAPPA_BOUNDS: (f64, f64) = (0.5, 2.0);
pub const W_CON_BOUNDS: (f64, f64) = (0.5, 2.0);
pub const W_CLS_BOUNDS: (f64, f64) = (0.1, 1.0);

pub fn clip(x: f64, bounds: (f64, f64)) -> f64 {
    x.clamp(bounds.0, bounds.1)
}

/// Derivative of [`clip`]: one strictly inside the interval, zero elsewhere
/// (including at the kinks).
pub fn clip_grad(x: f64, bounds: (f64, f64)) -> f64 {
    if x > bounds.0 && x < bounds.1 {
        1.0
    } else {
        0.0
    }
}

/// Cosine similarities between every image and every text.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub s: DMatrix<f64>,
}

fn unit(e: &Embedding) -> Result<DVector<f64>> {
    let v = e.to_vector();
    let n = v.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::NonFinite {
            term: "embedding norm",
        });
    }
    Ok(v / n)
}

pub fn similarity_matrix(img: &[Embedding], txt: &[Embedding]) -> Result<SimilarityMatrix> {
    let d = img.first().or(txt.first()).map_or(0, Embedding::dim);
    for e in img.iter().chain(txt) {
        if e.dim() != d {
            return Err(Error::DimensionMismatch {
                context: "similarity_matrix",
                expected: d,
                actual: e.dim(),
            });
        }
    }
    let i = img.iter().map(unit).collect::<Result<Vec<_>>>()?;
    let t = txt.iter().map(unit).collect::<Result<Vec<_>>>()?;
    Ok(SimilarityMatrix {
        s: DMatrix::from_fn(i.len(), t.len(), |r, c| i[r].dot(&t[c])),
    })
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_softmax_at(x: &[f64], i: usize) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x[i] - lse
}

pub fn zero_shot_probs(s_row: &[f64], kappa: f64) -> Result<Vec<f64>> {
    if s_row.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let scaled: Vec<f64> = s_row.iter().map(|s| s / kappa).collect();
    Ok(softmax(&scaled))
}

/// Index of the largest entry, first one on ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    pub value: f64,
    pub grad_s: DMatrix<f64>,
    pub grad_kappa: f64,
}

/// Symmetric InfoNCE over a square similarity matrix with the positives on
/// the diagonal.
pub fn contrastive_loss(s: &DMatrix<f64>, kappa: f64) -> Result<ContrastiveLoss> {
    let (n, m) = s.shape();
    if n != m {
        return Err(Error::NonSquare { rows: n, cols: m });
    }
    if n == 0 {
        return Err(Error::EmptyVocabulary);
    }
    let a = s / kappa;
    let scale = 1.0 / (2.0 * n as f64);
    let mut value = 0.0;
    let mut grad_a = DMatrix::zeros(n, n);
    for i in 0..n {
        let row: Vec<f64> = a.row(i).iter().copied().collect();
        value -= log_softmax_at(&row, i);
        for (j, p) in softmax(&row).into_iter().enumerate() {
            grad_a[(i, j)] += scale * (p - if i == j { 1.0 } else { 0.0 });
        }
        let col: Vec<f64> = a.column(i).iter().copied().collect();
        value -= log_softmax_at(&col, i);
        for (r, q) in softmax(&col).into_iter().enumerate() {
            grad_a[(r, i)] += scale * (q - if r == i { 1.0 } else { 0.0 });
        }
    }
    let grad_kappa = -grad_a.component_mul(s).sum() / (kappa * kappa);
    Ok(ContrastiveLoss {
        value: value * scale,
        grad_s: grad_a / kappa,
        grad_kappa,
    })
}

#[derive(Debug, Clone)]
pub struct ClassificationLoss {
    pub value: f64,
    pub grad_head: DMatrix<f64>,
}

/// Mean cross-entropy of `head · x_i` against `labels[i]`.
pub fn classification_loss(
    features: &[DVector<f64>],
    labels: &[usize],
    head: &DMatrix<f64>,
) -> Result<ClassificationLoss> {
    let classes = head.nrows();
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "classification labels",
            expected: features.len(),
            actual: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(Error::InvalidConfig("classification loss needs at least one sample".into()));
    }
    let n = features.len() as f64;
    let mut value = 0.0;
    let mut grad_head = DMatrix::zeros(classes, head.ncols());
    for (x, &y) in features.iter().zip(labels) {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        if x.len() != head.ncols() {
            return Err(Error::DimensionMismatch {
                context: "classification features",
                expected: head.ncols(),
                actual: x.len(),
            });
        }
        let logits: Vec<f64> = (head * x).iter().copied().collect();
        value -= log_softmax_at(&logits, y);
        let mut g = DVector::from_vec(softmax(&logits));
        g[y] -= 1.0;
        grad_head += g * x.transpose() / n;
    }
    Ok(ClassificationLoss {
        value: value / n,
        grad_head,
    })
}

/// Loss weights with clipped numerators over the raw parameter sum.
pub fn balance_weights(w_con_param: f64, w_cls_param: f64) -> Result<(f64, f64)> {
    let den = w_con_param + w_cls_param;
    if den <= 0.0 || den.is_nan() {
        return Err(Error::NonPositiveDenominator(den));
    }
    Ok((
        clip(w_con_param, W_CON_BOUNDS) / den,
        clip(w_cls_param, W_CLS_BOUNDS) / den,
    ))
}

/// Jacobian of [`balance_weights`]: row 0 is `w_con`, row 1 is `w_cls`;
/// columns are the two parameters.
pub fn balance_weights_jacobian(w_con_param: f64, w_cls_param: f64) -> [[f64; 2]; 2] {
    let den = w_con_param + w_cls_param;
    let d2 = den * den;
    let nc = clip(w_con_param, W_CON_BOUNDS);
    let nl = clip(w_cls_param, W_CLS_BOUNDS);
    [
        [clip_grad(w_con_param, W_CON_BOUNDS) / den - nc / d2, -nc / d2],
        [-nl / d2, clip_grad(w_cls_param, W_CLS_BOUNDS) / den - nl / d2],
    ]
}

/// One training step's scalars, in the order they are logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub j_con: f64,
    pub j_cls: f64,
    pub w_con: f64,
    pub w_cls: f64,
    pub kappa: f64,
    pub j_total: f64,
}

impl LossBundle {
    pub const CSV_HEADER: &'static str = "step,j_con,j_cls,w_con,w_cls,kappa,j_total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.j_con, self.j_cls, self.w_con, self.w_cls, self.kappa, self.j_total
        )
    }
}

pub fn total_loss(j_con: f64, j_cls: f64, w_con: f64, w_cls: f64, kappa: f64) -> Result<LossBundle> {
    for (v, term) in [
        (j_con, "j_con"),
        (j_cls, "j_cls"),
        (w_con, "w_con"),
        (w_cls, "w_cls"),
        (kappa, "kappa"),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term });
        }
    }
    Ok(LossBundle {
        j_con,
        j_cls,
        w_con,
        w_cls,
        kappa,
        j_total: w_con * j_con + w_cls * j_cls,
    })
}

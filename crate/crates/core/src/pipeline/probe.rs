//! Linear evaluation: multinomial logistic regression on frozen embeddings.

use ndarray::{Array1, Axis};
use serde::Serialize;

use super::config::{ProbeConfig, ProbeNorm};
use crate::graph::DataSplit;
use crate::numkit::{AdamConfig, AdamState, Matrix};
use crate::{Error, Result};

/// Softmax-regression weights with a bias row.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub w: Matrix,
    pub b: Matrix,
}

impl LinearModel {
    pub fn logits(&self, x: &Matrix) -> Matrix {
        x.dot(&self.w) + &self.b
    }

    /// Arg-max class per row; ties go to the lowest class index.
    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        self.logits(x)
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (k, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub l2: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

fn softmax_rows(z: &mut Matrix) {
    for mut r in z.rows_mut() {
        let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        r.mapv_inplace(|v| (v - m).exp());
        let s = r.sum();
        r /= s;
    }
}

/// Full-batch Adam on mean cross-entropy plus `l2/2 · ‖W‖²` (bias
/// unpenalized), from zero weights.
pub fn fit_logistic(x: &Matrix, y: &[usize], classes: usize, l2: f64, cfg: &ProbeConfig) -> Result<LinearModel> {
    let n = x.nrows();
    if n == 0 || n != y.len() {
        return Err(Error::InvalidArgument(format!("probe needs matching rows and labels, got {n} and {}", y.len())));
    }
    let first = y[0];
    if y.iter().all(|&c| c == first) {
        return Err(Error::Data("probe training set contains a single class".into()));
    }
    let d = x.ncols();
    let mut model = LinearModel {
        w: Matrix::zeros((d, classes)),
        b: Matrix::zeros((1, classes)),
    };
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &[(d, classes), (1, classes)],
    );
    for _ in 0..cfg.epochs {
        let mut g = model.logits(x);
        softmax_rows(&mut g);
        for (i, &c) in y.iter().enumerate() {
            g[[i, c]] -= 1.0;
        }
        g /= n as f64;
        let gw = x.t().dot(&g) + &model.w * l2;
        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
        adam.step(&["w", "b"], &mut [&mut model.w, &mut model.b], &[&gw, &gb])?;
    }
    Ok(model)
}

pub fn accuracy(pred: &[usize], labels: &[usize], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    idx.iter().filter(|&&i| pred[i] == labels[i]).count() as f64 / idx.len() as f64
}

/// A normalized copy of `emb`; the input is left untouched.
pub fn normalize_embeddings(emb: &Matrix, norm: ProbeNorm, train_idx: &[usize]) -> Matrix {
    let mut x = emb.clone();
    match norm {
        ProbeNorm::None => {}
        ProbeNorm::L2 => {
            for mut r in x.rows_mut() {
                let s = r.dot(&r).sqrt();
                if s > 0.0 {
                    r /= s;
                }
            }
        }
        ProbeNorm::Standard => {
            let train = emb.select(Axis(0), train_idx);
            let mean: Array1<f64> = train.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(emb.ncols()));
            let std = train.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
            x -= &mean;
            x /= &std;
        }
    }
    x
}

/// Fits one probe per L2 value, keeps the best validation accuracy (first
/// grid value on ties) and reports its test accuracy.
pub fn linear_probe(emb: &Matrix, labels: &[usize], classes: usize, split: &DataSplit, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if emb.nrows() != labels.len() {
        return Err(Error::Shape {
            op: "linear_probe",
            lhs: emb.dim(),
            rhs: (labels.len(), 1),
        });
    }
    if emb.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embeddings passed to the probe".into()));
    }
    let x = normalize_embeddings(emb, cfg.norm, &split.train_idx);
    let xt = x.select(Axis(0), &split.train_idx);
    let yt: Vec<usize> = split.train_idx.iter().map(|&i| labels[i]).collect();
    let mut best: Option<ProbeResult> = None;
    for &l2 in &cfg.l2_grid {
        let model = fit_logistic(&xt, &yt, classes, l2, cfg)?;
        let pred = model.predict(&x);
        let r = ProbeResult {
            l2,
            val_accuracy: accuracy(&pred, labels, &split.val_idx),
            test_accuracy: accuracy(&pred, labels, &split.test_idx),
        };
        if best.as_ref().is_none_or(|b| r.val_accuracy > b.val_accuracy) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::Config("empty probe L2 grid".into()))
}

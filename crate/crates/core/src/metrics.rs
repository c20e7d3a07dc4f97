//! Multi-label ranking and decision metrics.
//!
//! AP is the mean of precision@k over the ranks of the positives, with no
//! interpolation; tied scores keep their index order. CF1 and OF1 are
//! harmonic means of the averaged (resp. pooled) precision and recall.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CONVENTION: &str = "ap=mean-precision-at-positive-ranks(stable-ties); cf1=harmonic(CP,CR); of1=harmonic(OP,OR)";
pub const THRESHOLD: f64 = 0.5;
pub const TOP_K: usize = 3;

/// Indices sorted by descending score; ties keep index order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Average precision of one class, or `None` when it has no positives.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("non-finite score".into()));
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (k, &i) in ranking(scores).iter().enumerate() {
        if labels[i] > 0.5 {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| acc / hits as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionMode {
    /// Positive when the score is at least 0.5.
    #[serde(rename = "ALL")]
    Threshold,
    /// Exactly the `k` highest-scoring classes of each image are positive.
    #[serde(rename = "top3")]
    TopK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    #[serde(rename = "CP")]
    pub cp: f64,
    #[serde(rename = "CR")]
    pub cr: f64,
    #[serde(rename = "CF1")]
    pub cf1: f64,
    #[serde(rename = "OP")]
    pub op: f64,
    #[serde(rename = "OR")]
    pub or: f64,
    #[serde(rename = "OF1")]
    pub of1: f64,
    /// Classes with no predicted positive; their precision counts as 0.
    pub no_predictions: Vec<usize>,
    /// Classes with no ground-truth positive; their recall counts as 0.
    pub no_positives: Vec<usize>,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn check_matrix(scores: &Tensor, labels: &Tensor) -> Result<()> {
    if scores.shape() != labels.shape() {
        return Err(Error::shape(format!(
            "scores {:?} and labels {:?}",
            scores.shape(),
            labels.shape()
        )));
    }
    if !scores.is_finite() {
        return Err(Error::NonFinite("non-finite score".into()));
    }
    if labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok(())
}

/// Binary decisions for an `N×C` score matrix.
pub fn decisions(scores: &Tensor, mode: DecisionMode) -> Tensor {
    match mode {
        DecisionMode::Threshold => scores.map(|s| if s >= THRESHOLD { 1.0 } else { 0.0 }),
        DecisionMode::TopK => {
            let mut out = Tensor::zeros(scores.rows(), scores.cols());
            for r in 0..scores.rows() {
                for &c in ranking(scores.row(r)).iter().take(TOP_K) {
                    out.set(r, c, 1.0);
                }
            }
            out
        }
    }
}

pub fn prf1(scores: &Tensor, labels: &Tensor, mode: DecisionMode) -> Result<Prf> {
    check_matrix(scores, labels)?;
    let pred = decisions(scores, mode);
    let (n, c) = scores.shape();
    let (mut tp, mut fp, mut fneg) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
    for i in 0..n {
        for j in 0..c {
            match (pred.get(i, j) > 0.5, labels.get(i, j) > 0.5) {
                (true, true) => tp[j] += 1,
                (true, false) => fp[j] += 1,
                (false, true) => fneg[j] += 1,
                (false, false) => {}
            }
        }
    }
    let mut no_predictions = Vec::new();
    let mut no_positives = Vec::new();
    let (mut sp, mut sr) = (0.0, 0.0);
    for j in 0..c {
        if tp[j] + fp[j] == 0 {
            no_predictions.push(j);
        } else {
            sp += tp[j] as f64 / (tp[j] + fp[j]) as f64;
        }
        if tp[j] + fneg[j] == 0 {
            no_positives.push(j);
        } else {
            sr += tp[j] as f64 / (tp[j] + fneg[j]) as f64;
        }
    }
    let cp = if c > 0 { sp / c as f64 } else { 0.0 };
    let cr = if c > 0 { sr / c as f64 } else { 0.0 };
    let ttp: usize = tp.iter().sum();
    let tpred = ttp + fp.iter().sum::<usize>();
    let tpos = ttp + fneg.iter().sum::<usize>();
    let op = if tpred > 0 { ttp as f64 / tpred as f64 } else { 0.0 };
    let or = if tpos > 0 { ttp as f64 / tpos as f64 } else { 0.0 };
    Ok(Prf {
        cp,
        cr,
        cf1: harmonic(cp, cr),
        op,
        or,
        of1: harmonic(op, or),
        no_predictions,
        no_positives,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub convention: String,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Per-class AP; `None` for classes without positives.
    pub per_class_ap: Vec<Option<f64>>,
    #[serde(rename = "ALL")]
    pub all: Prf,
    pub top3: Prf,
}

/// All metrics for an `N×C` score matrix.
pub fn evaluate(scores: &Tensor, labels: &Tensor) -> Result<EvalTable> {
    check_matrix(scores, labels)?;
    let (n, c) = scores.shape();
    let mut per_class_ap = Vec::with_capacity(c);
    for j in 0..c {
        let s: Vec<f64> = (0..n).map(|i| scores.get(i, j)).collect();
        let y: Vec<f64> = (0..n).map(|i| labels.get(i, j)).collect();
        per_class_ap.push(average_precision(&s, &y)?);
    }
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("no class has a positive label"));
    }
    Ok(EvalTable {
        convention: CONVENTION.into(),
        map: present.iter().sum::<f64>() / present.len() as f64,
        per_class_ap,
        all: prf1(scores, labels, DecisionMode::Threshold)?,
        top3: prf1(scores, labels, DecisionMode::TopK)?,
    })
}

impl EvalTable {
    /// Fixed-width table in percent: mAP, then CP CR CF1 OP OR OF1 for ALL
    /// and top-3.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            "", "mAP", "CP", "CR", "CF1", "OP", "OR", "OF1"
        );
        for (name, p) in [("ALL", &self.all), ("top3", &self.top3)] {
            let _ = writeln!(
                s,
                "{:<6} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6.1}",
                name,
                100.0 * self.map,
                100.0 * p.cp,
                100.0 * p.cr,
                100.0 * p.cf1,
                100.0 * p.op,
                100.0 * p.or,
                100.0 * p.of1
            );
        }
        s
    }
}

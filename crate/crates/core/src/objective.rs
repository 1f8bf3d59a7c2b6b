//! Weighted cross-entropy, Lovász-Softmax and the moving-class IoU.
//!
//! Dense predictions are `C × …` tensors: class-major, any trailing shape.
//! Labels are one `Option<usize>` per pixel; `None` is ignored.

use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::geometry::MosClass;
use crate::netcore::{softmax, Tensor};

/// Class frequencies and the loss weights `αᵢ = 1/√fᵢ` derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    frequencies: Vec<f64>,
    weights: Vec<f64>,
}

impl ClassStats {
    pub fn new(frequencies: Vec<f64>) -> Result<Self> {
        if frequencies.len() < 2 {
            return Err(Error::Shape("need at least two classes".into()));
        }
        if let Some(f) = frequencies.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Shape(format!("class frequency {f} outside (0, 1]")));
        }
        let sum: f64 = frequencies.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Shape(format!("class frequencies sum to {sum}")));
        }
        let weights = frequencies.iter().map(|f| 1.0 / f.sqrt()).collect();
        Ok(ClassStats {
            frequencies,
            weights,
        })
    }

    /// Frequencies from raw counts; empty classes get one pseudo-count.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let adj: Vec<f64> = counts.iter().map(|&c| c.max(1) as f64).collect();
        let total: f64 = adj.iter().sum();
        Self::new(adj.iter().map(|c| c / total).collect())
    }

    pub fn uniform(classes: usize) -> Self {
        Self::new(vec![1.0 / classes as f64; classes]).expect("uniform frequencies are valid")
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }
}

fn class_layout(t: &Tensor, labels: &[Option<usize>]) -> Result<(usize, usize)> {
    let classes = *t
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("scalar prediction".into()))?;
    if classes < 2 {
        return Err(Error::Shape(format!("{classes} classes, need at least 2")));
    }
    let pixels = t.len() / classes;
    if labels.len() != pixels {
        return Err(Error::Shape(format!(
            "{} labels for {pixels} pixels",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().flatten().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: l, classes });
    }
    Ok((classes, pixels))
}

/// Class-weighted cross-entropy, mean-reduced over non-ignored pixels.
/// Returns the loss and its gradient with respect to the logits.
pub fn weighted_ce(
    logits: &Tensor,
    labels: &[Option<usize>],
    stats: &ClassStats,
) -> Result<(f64, Tensor)> {
    let (classes, pixels) = class_layout(logits, labels)?;
    if stats.classes() != classes {
        return Err(Error::Shape(format!(
            "{} class weights for {classes} classes",
            stats.classes()
        )));
    }
    let count = labels.iter().flatten().count();
    let mut grad = Tensor::zeros(logits.shape());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let z = logits.data();
    let norm = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut col = vec![0.0; classes];
    for (p, label) in labels.iter().enumerate() {
        let Some(y) = *label else { continue };
        for c in 0..classes {
            col[c] = z[c * pixels + p];
        }
        let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let alpha = stats.weights()[y];
        loss -= alpha * (col[y] - lse);
        let g = grad.data_mut();
        for c in 0..classes {
            let s = (col[c] - lse).exp();
            let onehot = if c == y { 1.0 } else { 0.0 };
            g[c * pixels + p] = alpha * (s - onehot) * norm;
        }
    }
    Ok((loss * norm, grad))
}

/// Gradient of the Lovász extension of the Jaccard loss with respect to
/// errors sorted in decreasing order; `fg` is the sorted foreground mask.
pub fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut inter_cum = 0.0;
    let mut union_cum = 0.0;
    let mut prev = 0.0;
    fg_sorted
        .iter()
        .map(|&f| {
            if f {
                inter_cum += 1.0;
            } else {
                union_cum += 1.0;
            }
            let jaccard = 1.0 - (gts - inter_cum) / (gts + union_cum);
            let d = jaccard - prev;
            prev = jaccard;
            d
        })
        .collect()
}

/// Lovász-Softmax over classes present in the labels. `probs` must be
/// column-normalized within 1e-6. Returns the loss and its gradient with
/// respect to the probabilities.
pub fn lovasz_softmax(probs: &Tensor, labels: &[Option<usize>]) -> Result<(f64, Tensor)> {
    let (classes, pixels) = class_layout(probs, labels)?;
    let x = probs.data();
    for p in 0..pixels {
        let sum: f64 = (0..classes).map(|c| x[c * pixels + p]).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::NotNormalized { column: p, sum });
        }
    }
    let valid: Vec<usize> = (0..pixels).filter(|&p| labels[p].is_some()).collect();
    let mut grad = Tensor::zeros(probs.shape());
    let present: Vec<usize> = (0..classes)
        .filter(|&c| valid.iter().any(|&p| labels[p] == Some(c)))
        .collect();
    if present.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / present.len() as f64;
    let mut loss = 0.0;
    for &c in &present {
        let errors: Vec<(usize, f64, bool)> = valid
            .iter()
            .map(|&p| {
                let fg = labels[p] == Some(c);
                let xc = x[c * pixels + p];
                (p, if fg { 1.0 - xc } else { xc }, fg)
            })
            .collect();
        let mut order: Vec<usize> = (0..errors.len()).collect();
        // Stable: equal errors keep pixel order.
        order.sort_by(|&a, &b| errors[b].1.total_cmp(&errors[a].1));
        let fg_sorted: Vec<bool> = order.iter().map(|&i| errors[i].2).collect();
        let lg = lovasz_grad(&fg_sorted);
        let g = grad.data_mut();
        for (rank, &i) in order.iter().enumerate() {
            let (p, e, fg) = errors[i];
            loss += scale * e * lg[rank];
            g[c * pixels + p] += scale * lg[rank] * if fg { -1.0 } else { 1.0 };
        }
    }
    Ok((loss, grad))
}

/// Column-wise softmax of a class-major tensor.
pub fn softmax_classes(logits: &Tensor) -> Tensor {
    let classes = logits.shape()[0];
    let pixels = logits.len() / classes;
    let z = logits.data();
    let mut out = Tensor::zeros(logits.shape());
    let mut col = vec![0.0; classes];
    for p in 0..pixels {
        for c in 0..classes {
            col[c] = z[c * pixels + p];
        }
        for (c, s) in softmax(&col).into_iter().enumerate() {
            out.data_mut()[c * pixels + p] = s;
        }
    }
    out
}

/// Weighted cross-entropy plus Lovász-Softmax, with the gradient of their sum
/// with respect to the logits.
pub fn total_loss(
    logits: &Tensor,
    labels: &[Option<usize>],
    stats: &ClassStats,
) -> Result<(f64, Tensor)> {
    let (wce, g_wce) = weighted_ce(logits, labels, stats)?;
    let probs = softmax_classes(logits);
    let (ls, g_probs) = lovasz_softmax(&probs, labels)?;
    let classes = logits.shape()[0];
    let pixels = logits.len() / classes;
    let s = probs.data();
    let gp = g_probs.data();
    let mut grad = g_wce;
    for p in 0..pixels {
        let dot: f64 = (0..classes).map(|c| s[c * pixels + p] * gp[c * pixels + p]).sum();
        for c in 0..classes {
            let i = c * pixels + p;
            grad.data_mut()[i] += s[i] * (gp[i] - dot);
        }
    }
    Ok((wce + ls, grad))
}

/// Confusion counts for the moving class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `TP / (TP + FP + FN)`, and 1 when there is nothing moving on either side.
    pub fn iou(&self) -> f64 {
        iou(self)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(mut self, o: ConfusionCounts) -> ConfusionCounts {
        self += o;
        self
    }
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// Adds the outcome of `pred` against `gt` to `counts`. `None` in `gt` is ignored.
pub fn accumulate(
    counts: &mut ConfusionCounts,
    pred: &[MosClass],
    gt: &[Option<MosClass>],
) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::LabelMismatch {
            labels: gt.len(),
            points: pred.len(),
        });
    }
    for (p, g) in pred.iter().zip(gt) {
        match (p, g) {
            (_, None) => {}
            (MosClass::Moving, Some(MosClass::Moving)) => counts.tp += 1,
            (MosClass::Moving, Some(MosClass::Static)) => counts.fp += 1,
            (MosClass::Static, Some(MosClass::Moving)) => counts.fn_ += 1,
            (MosClass::Static, Some(MosClass::Static)) => counts.tn += 1,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_ce_single_pixel() {
        let stats = ClassStats::new(vec![0.25, 0.75]).unwrap();
        let logits = Tensor::from_vec(&[2, 1], vec![0.3, 0.3]).unwrap();
        let (loss, _) = weighted_ce(&logits, &[Some(0)], &stats).unwrap();
        assert!((loss - 1.386294).abs() < 1e-6);
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn weighted_ce_saturates_and_ignores() {
        let stats = ClassStats::uniform(2);
        let logits = Tensor::from_vec(&[2, 2], vec![60.0, -60.0, -60.0, 60.0]).unwrap();
        let (loss, _) = weighted_ce(&logits, &[Some(0), Some(1)], &stats).unwrap();
        assert!(loss < 1e-40);
        let (loss, grad) = weighted_ce(&logits, &[None, None], &stats).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
        assert!(matches!(
            weighted_ce(&logits, &[Some(2), None], &stats),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn lovasz_single_pixel() {
        let probs = Tensor::from_vec(&[2, 1], vec![0.7, 0.3]).unwrap();
        let (loss, _) = lovasz_softmax(&probs, &[Some(1)]).unwrap();
        assert_eq!(loss, 0.7);
    }

    #[test]
    fn lovasz_perfect_and_bounds() {
        let probs = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let (loss, _) = lovasz_softmax(&probs, &[Some(0), Some(1), Some(0)]).unwrap();
        assert_eq!(loss, 0.0);
        let worst = Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let (loss, _) = lovasz_softmax(&worst, &[Some(0), Some(1), Some(0)]).unwrap();
        assert!((0.0..=1.0).contains(&loss));
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lovasz_rejects_unnormalized() {
        let probs = Tensor::from_vec(&[2, 1], vec![0.7, 0.4]).unwrap();
        assert!(matches!(
            lovasz_softmax(&probs, &[Some(0)]),
            Err(Error::NotNormalized { column: 0, .. })
        ));
    }

    #[test]
    fn lovasz_grad_of_known_sequence() {
        // gts = 2: jaccard after each prefix is 1 - (2 - I)/(2 + U).
        let g = lovasz_grad(&[true, false, true]);
        let j = [1.0 - 1.0 / 2.0, 1.0 - 1.0 / 3.0, 1.0];
        assert!((g[0] - j[0]).abs() < 1e-15);
        assert!((g[1] - (j[1] - j[0])).abs() < 1e-15);
        assert!((g[2] - (j[2] - j[1])).abs() < 1e-15);
    }

    #[test]
    fn total_is_sum_of_parts() {
        let stats = ClassStats::new(vec![0.9, 0.1]).unwrap();
        let logits = Tensor::from_fn(&[2, 5], |i| (i as f64 * 1.3).sin() * 2.0);
        let labels = [Some(0), Some(1), None, Some(1), Some(0)];
        let (l, g) = total_loss(&logits, &labels, &stats).unwrap();
        let (lw, gw) = weighted_ce(&logits, &labels, &stats).unwrap();
        let (ll, _) = lovasz_softmax(&softmax_classes(&logits), &labels).unwrap();
        assert!((l - (lw + ll)).abs() < 1e-12);
        assert!(g.max_abs_diff(&gw) > 0.0);
    }

    #[test]
    fn iou_examples() {
        let c = ConfusionCounts {
            tp: 3,
            fp: 1,
            fn_: 0,
            tn: 10,
        };
        assert_eq!(c.iou(), 0.75);
        assert_eq!(ConfusionCounts::default().iou(), 1.0);

        use MosClass::*;
        let gt = [Some(Moving), Some(Static), None, Some(Moving)];
        let mut same = ConfusionCounts::default();
        accumulate(&mut same, &[Moving, Static, Moving, Moving], &gt).unwrap();
        assert_eq!(same.iou(), 1.0);
        let mut none = ConfusionCounts::default();
        accumulate(&mut none, &[Static; 4], &gt).unwrap();
        assert_eq!(none.iou(), 0.0);
        assert!(accumulate(&mut none, &[Static], &gt).is_err());
    }

    #[test]
    fn class_stats_validation() {
        assert!(ClassStats::new(vec![0.5, 0.6]).is_err());
        assert!(ClassStats::new(vec![1.0, 0.0]).is_err());
        let s = ClassStats::from_counts(&[75, 25]).unwrap();
        assert_eq!(s.frequencies(), &[0.75, 0.25]);
        assert_eq!(s.weights()[1], 2.0);
    }
}

//! Multibox loss: smooth-L1 on positive regressions plus softmax
//! cross-entropy on positives and mined hard negatives.

use super::{AnchorLabel, MatchResult};
use crate::tensor::{Element, Function, Graph, Result, Tensor, TensorError, Var};

pub const NEG_RATIO: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub total: Var,
    pub cls: f64,
    pub reg: f64,
    pub positives: usize,
    /// Per image, the mined negative anchor indices in selection order.
    pub negatives: Vec<Vec<usize>>,
}

/// Background cross-entropy `logsumexp(l) - l_0` of one anchor.
fn background_loss(l0: f64, l1: f64) -> f64 {
    let m = l0.max(l1);
    m + ((l0 - m).exp() + (l1 - m).exp()).ln() - l0
}

fn ce(l: [f64; 2], class: usize) -> (f64, [f64; 2]) {
    let m = l[0].max(l[1]);
    let e = [(l[0] - m).exp(), (l[1] - m).exp()];
    let z = e[0] + e[1];
    let p = [e[0] / z, e[1] / z];
    let mut grad = p;
    grad[class] -= 1.0;
    (m + z.ln() - l[class], grad)
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Highest-loss negatives of one image, `k` of them, ties by lower index.
pub fn mine_negatives(labels: &[AnchorLabel], logits: &[f64], k: usize) -> Vec<usize> {
    let mut neg: Vec<(f64, usize)> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == AnchorLabel::Negative)
        .map(|(i, _)| (background_loss(logits[2 * i], logits[2 * i + 1]), i))
        .collect();
    let k = k.min(neg.len());
    if k == 0 {
        return Vec::new();
    }
    let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    neg.select_nth_unstable_by(k - 1, order);
    neg.truncate(k);
    neg.sort_by(order);
    neg.into_iter().map(|(_, i)| i).collect()
}

struct MultiboxBackward {
    /// Gradients w.r.t. the logits and regressions, already scaled.
    d_cls: Vec<f64>,
    d_reg: Vec<f64>,
}

impl<T: Element> Function<T> for MultiboxBackward {
    fn name(&self) -> &'static str {
        "multibox_loss"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let g = grad[0].as_f64();
        let scale = |v: &Vec<f64>| v.iter().map(|&x| T::lit(x * g)).collect();
        vec![
            needs[0].then(|| scale(&self.d_cls)),
            needs[1].then(|| scale(&self.d_reg)),
        ]
    }
}

impl<T: Element> Graph<T> {
    /// `cls: [B, A, 2]`, `reg: [B, A, 4]`, one match per image. The loss is
    /// normalised by the batch's positive count (at least one). An image
    /// without positives contributes its `neg_ratio` hardest negatives.
    pub fn multibox_loss(
        &mut self,
        cls: Var,
        reg: Var,
        matches: &[MatchResult],
        neg_ratio: usize,
    ) -> Result<LossOutput> {
        const OP: &str = "multibox_loss";
        let (cs, rs) = (self.shape(cls).to_vec(), self.shape(reg).to_vec());
        let &[b, a, 2] = cs.as_slice() else {
            return Err(TensorError::shape(
                OP,
                "logits",
                format!("expected [B, A, 2], got {cs:?}"),
            ));
        };
        if rs != [b, a, 4] {
            return Err(TensorError::shape(
                OP,
                "regressions",
                format!("expected [{b}, {a}, 4], got {rs:?}"),
            ));
        }
        if matches.len() != b || matches.iter().any(|m| m.labels.len() != a) {
            return Err(TensorError::shape(
                OP,
                "matches",
                format!("need {b} results of {a} anchors"),
            ));
        }
        let logits: Vec<f64> = self.value(cls).data().iter().map(|v| v.as_f64()).collect();
        let regs: Vec<f64> = self.value(reg).data().iter().map(|v| v.as_f64()).collect();
        let positives: usize = matches.iter().map(|m| m.positives()).sum();
        let norm = positives.max(1) as f64;

        let mut d_cls = vec![0.0; logits.len()];
        let mut d_reg = vec![0.0; regs.len()];
        let (mut l_cls, mut l_reg) = (0.0, 0.0);
        let mut negatives = Vec::with_capacity(b);
        for (n, m) in matches.iter().enumerate() {
            let lg = &logits[n * a * 2..(n + 1) * a * 2];
            let rg = &regs[n * a * 4..(n + 1) * a * 4];
            let pos = m.positives();
            let k = neg_ratio * pos.max(1);
            let neg = mine_negatives(&m.labels, lg, k);
            for (i, label) in m.labels.iter().enumerate() {
                if let AnchorLabel::Positive(_) = label {
                    let (l, g) = ce([lg[2 * i], lg[2 * i + 1]], 1);
                    l_cls += l;
                    d_cls[(n * a + i) * 2] = g[0] / norm;
                    d_cls[(n * a + i) * 2 + 1] = g[1] / norm;
                    for c in 0..4 {
                        let (l, g) = smooth_l1(rg[4 * i + c] - m.targets[i][c]);
                        l_reg += l;
                        d_reg[(n * a + i) * 4 + c] = g / norm;
                    }
                }
            }
            for &i in &neg {
                let (l, g) = ce([lg[2 * i], lg[2 * i + 1]], 0);
                l_cls += l;
                d_cls[(n * a + i) * 2] = g[0] / norm;
                d_cls[(n * a + i) * 2 + 1] = g[1] / norm;
            }
            negatives.push(neg);
        }
        let (l_cls, l_reg) = (l_cls / norm, l_reg / norm);
        let value = Tensor::scalar(T::lit(l_cls + l_reg));
        let total = self.record(MultiboxBackward { d_cls, d_reg }, &[cls, reg], value);
        Ok(LossOutput {
            total,
            cls: l_cls,
            reg: l_reg,
            positives,
            negatives,
        })
    }
}

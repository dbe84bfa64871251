//! Average precision with greedy per-image matching and all-point
//! interpolation over distinct score levels.

use serde::Serialize;

use super::{MetricError, Overlap};
use crate::detect::{BBox, Detection};

/// Precision-recall sweep. Points are taken after each distinct score
/// level, so tied scores enter together.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrCurve {
    pub num_gt: usize,
    /// `(score, is_tp)` for every prediction, score-descending.
    pub events: Vec<(f64, bool)>,
    pub scores: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("score,precision,recall\n");
        for i in 0..self.scores.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.scores[i], self.precision[i], self.recall[i]
            ));
        }
        out
    }
}

/// TP flags for one image's predictions: visiting by descending score, each
/// prediction takes the unmatched ground truth it overlaps most, and counts
/// as a hit if that overlap reaches `thr`.
pub fn match_image(preds: &[Detection], gts: &[BBox], overlap: Overlap, thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; preds.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let o = overlap.eval(&preds[i].bbox, gt);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, o)) = best {
            if o >= thr {
                taken[j] = true;
                tp[i] = true;
            }
        }
    }
    tp
}

/// `None` when there is no ground truth at all.
pub fn average_precision(
    preds: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    overlap: Overlap,
    thr: f64,
) -> Result<Option<PrCurve>, MetricError> {
    if preds.len() != gts.len() {
        return Err(MetricError::ImageCount {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return Ok(None);
    }
    let mut events = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        let tp = match_image(p, g, overlap, thr);
        events.extend(p.iter().zip(tp).map(|(d, t)| (d.score, t)));
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (mut scores, mut precision, mut recall) = (Vec::new(), Vec::new(), Vec::new());
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let s = events[i].0;
        while i < events.len() && events[i].0 == s {
            tp += events[i].1 as usize;
            seen += 1;
            i += 1;
        }
        scores.push(s);
        precision.push(tp as f64 / seen as f64);
        recall.push(tp as f64 / num_gt as f64);
    }

    // Right-to-left running maximum gives the interpolated precision;
    // recall steps are summed as hit counts so a perfect sweep is exactly 1.
    let hits: Vec<usize> = recall
        .iter()
        .map(|r| (r * num_gt as f64).round() as usize)
        .collect();
    let mut area = 0.0;
    let mut best = 0.0f64;
    for k in (0..scores.len()).rev() {
        best = best.max(precision[k]);
        let prev = if k == 0 { 0 } else { hits[k - 1] };
        area += (hits[k] - prev) as f64 * best;
    }
    let ap = (area / num_gt as f64).min(1.0);
    Ok(Some(PrCurve {
        num_gt,
        events,
        scores,
        precision,
        recall,
        ap,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::IobbDenominator;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::from_corners(x0, y0, x1, y1),
            score,
        }
    }

    fn gt() -> Vec<BBox> {
        vec![BBox::from_corners(0.0, 0.0, 10.0, 10.0)]
    }

    #[test]
    fn single_hit_and_miss() {
        let ap = |p| {
            average_precision(&[vec![p]], &[gt()], Overlap::IoU, 0.5)
                .unwrap()
                .unwrap()
                .ap
        };
        assert_eq!(ap(det(0.0, 0.0, 10.0, 10.0, 0.9)), 1.0);
        assert_eq!(ap(det(20.0, 20.0, 30.0, 30.0, 0.9)), 0.0);
    }

    #[test]
    fn no_ground_truth_is_absent() {
        let r = average_precision(
            &[vec![det(0.0, 0.0, 1.0, 1.0, 0.5)]],
            &[vec![]],
            Overlap::IoU,
            0.5,
        )
        .unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn empty_predictions_score_zero() {
        let r = average_precision(&[vec![]], &[gt()], Overlap::IoU, 0.5)
            .unwrap()
            .unwrap();
        assert_eq!(r.ap, 0.0);
    }

    #[test]
    fn duplicates_count_once() {
        let p = vec![
            det(0.0, 0.0, 10.0, 10.0, 0.9),
            det(0.0, 0.0, 10.0, 10.0, 0.8),
            det(0.5, 0.0, 10.0, 10.0, 0.7),
        ];
        let r = average_precision(&[p], &[gt()], Overlap::IoU, 0.5)
            .unwrap()
            .unwrap();
        assert_eq!(r.events.iter().filter(|e| e.1).count(), 1);
        assert_eq!(r.ap, 1.0);
    }

    #[test]
    fn known_curve() {
        // Two GTs: hit, miss, hit -> AP = 0.5 * 1 + 0.5 * 2/3.
        let gts = vec![vec![
            BBox::from_corners(0.0, 0.0, 10.0, 10.0),
            BBox::from_corners(50.0, 50.0, 60.0, 60.0),
        ]];
        let p = vec![
            det(0.0, 0.0, 10.0, 10.0, 0.9),
            det(80.0, 80.0, 90.0, 90.0, 0.8),
            det(50.0, 50.0, 60.0, 60.0, 0.7),
        ];
        let r = average_precision(&[p], &gts, Overlap::IoU, 0.5)
            .unwrap()
            .unwrap();
        assert!((r.ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
        assert!(r
            .to_csv()
            .starts_with("score,precision,recall\n0.9,1,0.5\n"));
    }

    #[test]
    fn iobb_accepts_small_inner_box() {
        let p = vec![det(2.0, 2.0, 5.0, 5.0, 0.9)];
        let iou = average_precision(std::slice::from_ref(&p), &[gt()], Overlap::IoU, 0.5)
            .unwrap()
            .unwrap()
            .ap;
        let iobb = average_precision(&[p], &[gt()], Overlap::IoBB(IobbDenominator::Pred), 0.5)
            .unwrap()
            .unwrap()
            .ap;
        assert_eq!((iou, iobb), (0.0, 1.0));
    }

    #[test]
    fn recall_non_decreasing_and_rescale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..6);
            let gts: Vec<Vec<BBox>> = (0..n)
                .map(|_| {
                    (0..rng.gen_range(0..4))
                        .map(|_| rand_box(&mut rng))
                        .collect()
                })
                .collect();
            let preds: Vec<Vec<Detection>> = (0..n)
                .map(|_| {
                    (0..rng.gen_range(0..6))
                        .map(|_| Detection {
                            bbox: rand_box(&mut rng),
                            score: rng.gen_range(0.0..1.0),
                        })
                        .collect()
                })
                .collect();
            let Some(a) = average_precision(&preds, &gts, Overlap::IoU, 0.3).unwrap() else {
                continue;
            };
            assert!(a.recall.windows(2).all(|w| w[0] <= w[1]));
            let squashed: Vec<Vec<Detection>> = preds
                .iter()
                .map(|p| {
                    p.iter()
                        .map(|d| Detection {
                            score: (3.0 * d.score).exp() - 7.0,
                            ..*d
                        })
                        .collect()
                })
                .collect();
            let b = average_precision(&squashed, &gts, Overlap::IoU, 0.3)
                .unwrap()
                .unwrap();
            assert_eq!(a.ap, b.ap);
        }
    }

    fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
        let (x, y) = (rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0));
        BBox::from_corners(
            x,
            y,
            x + rng.gen_range(2.0..10.0),
            y + rng.gen_range(2.0..10.0),
        )
    }
}

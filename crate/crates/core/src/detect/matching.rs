use thiserror::Error;

use super::{encode, BBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub labels: Vec<AnchorLabel>,
    /// Encoded offsets; zero for non-positive anchors.
    pub targets: Vec<[f64; 4]>,
}

impl MatchResult {
    pub fn positives(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive(_)))
            .count()
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("positive threshold {pos} below negative threshold {neg}")]
pub struct ThresholdError {
    pub pos: f64,
    pub neg: f64,
}

pub const POS_IOU: f64 = 0.5;
pub const NEG_IOU: f64 = 0.4;

/// Labels anchors by their best IoU over `gts`: `>= pos_thr` positive,
/// `< neg_thr` negative, otherwise ignored. Each ground-truth box then
/// claims its best anchor (first index on ties) as a positive.
pub fn match_anchors(
    anchors: &[BBox],
    gts: &[BBox],
    pos_thr: f64,
    neg_thr: f64,
) -> Result<MatchResult, ThresholdError> {
    if pos_thr < neg_thr {
        return Err(ThresholdError {
            pos: pos_thr,
            neg: neg_thr,
        });
    }
    let n = anchors.len();
    let mut best = vec![(0.0f64, usize::MAX); n];
    let mut gt_best = vec![(f64::NEG_INFINITY, 0usize); gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, gt) in gts.iter().enumerate() {
            let o = a.iou(gt);
            if o > best[i].0 || best[i].1 == usize::MAX {
                best[i] = (o, j);
            }
            if o > gt_best[j].0 {
                gt_best[j] = (o, i);
            }
        }
    }
    let mut labels: Vec<AnchorLabel> = best
        .iter()
        .map(|&(o, j)| {
            if j == usize::MAX || o < neg_thr {
                AnchorLabel::Negative
            } else if o >= pos_thr {
                AnchorLabel::Positive(j)
            } else {
                AnchorLabel::Ignored
            }
        })
        .collect();
    for (j, &(_, i)) in gt_best.iter().enumerate() {
        labels[i] = AnchorLabel::Positive(j);
    }
    let targets = labels
        .iter()
        .zip(anchors)
        .map(|(l, a)| match l {
            AnchorLabel::Positive(j) => encode(&gts[*j], a),
            _ => [0.0; 4],
        })
        .collect();
    Ok(MatchResult { labels, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_box(r: &mut ChaCha8Rng) -> BBox {
        BBox::new(
            r.gen_range(0.0..48.0),
            r.gen_range(0.0..48.0),
            r.gen_range(2.0..20.0),
            r.gen_range(2.0..20.0),
        )
    }

    /// Full IoU table, thresholds applied, then forced best matches.
    fn oracle(anchors: &[BBox], gts: &[BBox]) -> Vec<AnchorLabel> {
        let table: Vec<Vec<f64>> = anchors
            .iter()
            .map(|a| gts.iter().map(|g| a.iou(g)).collect())
            .collect();
        let mut labels = Vec::new();
        for row in &table {
            let mut bj = 0;
            for j in 0..row.len() {
                if row[j] > row[bj] {
                    bj = j;
                }
            }
            labels.push(match row.get(bj) {
                None => AnchorLabel::Negative,
                Some(&o) if o >= POS_IOU => AnchorLabel::Positive(bj),
                Some(&o) if o < NEG_IOU => AnchorLabel::Negative,
                _ => AnchorLabel::Ignored,
            });
        }
        for j in 0..gts.len() {
            let mut bi = 0;
            for i in 0..anchors.len() {
                if table[i][j] > table[bi][j] {
                    bi = i;
                }
            }
            labels[bi] = AnchorLabel::Positive(j);
        }
        labels
    }

    #[test]
    fn trivial_cases() {
        let a = [
            BBox::new(5.0, 5.0, 10.0, 10.0),
            BBox::new(50.0, 50.0, 10.0, 10.0),
        ];
        let m = match_anchors(&a, &[a[0]], 0.5, 0.4).unwrap();
        assert_eq!(
            m.labels,
            vec![AnchorLabel::Positive(0), AnchorLabel::Negative]
        );
        assert_eq!(m.targets[0], [0.0; 4]);
        let none = match_anchors(&a, &[], 0.5, 0.4).unwrap();
        assert!(none.labels.iter().all(|l| *l == AnchorLabel::Negative));
        assert!(match_anchors(&a, &[], 0.3, 0.4).is_err());
    }

    #[test]
    fn small_gt_still_gets_an_anchor() {
        let a = [
            BBox::new(5.0, 5.0, 10.0, 10.0),
            BBox::new(15.0, 5.0, 10.0, 10.0),
        ];
        let gt = BBox::new(13.0, 5.0, 2.0, 2.0);
        let m = match_anchors(&a, &[gt], 0.5, 0.4).unwrap();
        assert_eq!(m.labels[1], AnchorLabel::Positive(0));
        assert_eq!(m.positives(), 1);
    }

    #[test]
    fn random_instances_match_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let anchors: Vec<BBox> = (0..r.gen_range(1..40)).map(|_| rand_box(&mut r)).collect();
            let gts: Vec<BBox> = (0..r.gen_range(0..5)).map(|_| rand_box(&mut r)).collect();
            let m = match_anchors(&anchors, &gts, POS_IOU, NEG_IOU).unwrap();
            assert_eq!(m.labels, oracle(&anchors, &gts));
        }
    }

    proptest! {
        #[test]
        fn every_gt_has_a_positive(seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let anchors: Vec<BBox> = (0..30).map(|_| rand_box(&mut r)).collect();
            let gts: Vec<BBox> = (0..3).map(|_| rand_box(&mut r)).collect();
            let m = match_anchors(&anchors, &gts, POS_IOU, NEG_IOU).unwrap();
            for j in 0..gts.len() {
                let claimed = m.labels.contains(&AnchorLabel::Positive(j));
                // A later GT may steal a shared best anchor.
                let shared = (j + 1..gts.len()).any(|k| {
                    let bj = (0..30).max_by(|&a, &b| anchors[a].iou(&gts[j]).partial_cmp(&anchors[b].iou(&gts[j])).unwrap().then(b.cmp(&a))).unwrap();
                    let bk = (0..30).max_by(|&a, &b| anchors[a].iou(&gts[k]).partial_cmp(&anchors[b].iou(&gts[k])).unwrap().then(b.cmp(&a))).unwrap();
                    bj == bk
                });
                prop_assert!(claimed || shared);
            }
        }
    }
}

use super::{decode, BBox, Detection};

pub const CONF_THRESHOLD: f64 = 0.2;
pub const NMS_IOU: f64 = 0.45;

/// Lesion probability from a background/lesion logit pair.
pub fn lesion_score(l0: f64, l1: f64) -> f64 {
    1.0 / (1.0 + (l0 - l1).exp())
}

/// Greedy suppression: repeatedly keep the highest score (lower index on
/// ties) and drop everything overlapping it by `iou` or more.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut keep: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if keep.iter().all(|k| k.bbox.iou(&d.bbox) < iou) {
            keep.push(d);
        }
    }
    dets.clear();
    keep
}

/// Decodes one image's logits `[A * 2]` and regressions `[A * 4]`.
pub fn decode_and_nms(
    logits: &[f64],
    regs: &[f64],
    anchors: &[BBox],
    conf_thr: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let mut dets = Vec::new();
    for (i, a) in anchors.iter().enumerate() {
        let score = lesion_score(logits[2 * i], logits[2 * i + 1]);
        if score < conf_thr {
            continue;
        }
        let t = [
            regs[4 * i],
            regs[4 * i + 1],
            regs[4 * i + 2],
            regs[4 * i + 3],
        ];
        let bbox = decode(&t, a);
        if bbox.is_valid() {
            dets.push(Detection { bbox, score });
        }
    }
    nms(dets, nms_iou)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x: f64, s: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, 10.0, 10.0, 10.0),
            score: s,
        }
    }

    /// O(n^2) greedy reference: scan candidates from best to worst, each
    /// time rescanning the full list for the best unsuppressed one.
    fn oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut alive = vec![true; dets.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..dets.len() {
                if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            alive[b] = false;
            out.push(dets[b]);
            for i in 0..dets.len() {
                if alive[i] && dets[i].bbox.iou(&dets[b].bbox) >= thr {
                    alive[i] = false;
                }
            }
        }
        out
    }

    #[test]
    fn single_confident_anchor() {
        let a = [BBox::new(8.0, 8.0, 16.0, 16.0)];
        let d = decode_and_nms(&[-3.0, 3.0], &[0.0; 4], &a, CONF_THRESHOLD, NMS_IOU);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox, a[0]);
        assert!(decode_and_nms(&[3.0, -3.0], &[0.0; 4], &a, CONF_THRESHOLD, NMS_IOU).is_empty());
    }

    #[test]
    fn duplicate_keeps_higher_score() {
        let out = nms(vec![det(5.0, 0.8), det(5.0, 0.9)], NMS_IOU);
        assert_eq!(out, vec![det(5.0, 0.9)]);
    }

    #[test]
    fn random_instances_match_greedy_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let dets: Vec<Detection> = (0..50)
                .map(|_| Detection {
                    bbox: BBox::new(
                        r.gen_range(0.0..40.0),
                        r.gen_range(0.0..40.0),
                        r.gen_range(4.0..16.0),
                        r.gen_range(4.0..16.0),
                    ),
                    score: r.gen_range(0.0..1.0),
                })
                .collect();
            assert_eq!(nms(dets.clone(), NMS_IOU), oracle(&dets, NMS_IOU));
        }
    }

    #[test]
    fn confidence_filter_is_inclusive() {
        assert!((lesion_score(0.0, 0.0) - 0.5).abs() < 1e-15);
        let l1 = (0.2f64 / 0.8).ln();
        let a = [BBox::new(8.0, 8.0, 16.0, 16.0)];
        let s = lesion_score(0.0, l1);
        assert_eq!(
            decode_and_nms(&[0.0, l1], &[0.0; 4], &a, s, NMS_IOU).len(),
            1
        );
    }

    proptest! {
        #[test]
        fn output_sorted_and_separated(seed in 0u64..300) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let dets: Vec<Detection> = (0..40).map(|_| Detection {
                bbox: BBox::new(r.gen_range(0.0..30.0), r.gen_range(0.0..30.0), r.gen_range(3.0..12.0), r.gen_range(3.0..12.0)),
                score: r.gen_range(0.0..1.0),
            }).collect();
            let out = nms(dets, NMS_IOU);
            for w in out.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            for i in 0..out.len() {
                for j in i + 1..out.len() {
                    prop_assert!(out[i].bbox.iou(&out[j].bbox) < NMS_IOU);
                }
            }
        }
    }
}

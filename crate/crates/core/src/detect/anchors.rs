use thiserror::Error;

use super::BBox;
use crate::nn::SourceSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    /// Ordered source by source, then row, column, size, ratio; the same
    /// order as the network's head outputs.
    pub anchors: Vec<BBox>,
    pub per_source: Vec<usize>,
}

#[derive(Debug, Error, PartialEq)]
pub enum AnchorError {
    #[error("stride {stride} does not divide image size {h}x{w}")]
    Stride { stride: usize, h: usize, w: usize },
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

pub fn generate_anchors(
    h: usize,
    w: usize,
    sources: &[SourceSpec],
) -> Result<AnchorSet, AnchorError> {
    let mut anchors = Vec::new();
    let mut per_source = Vec::new();
    for src in sources {
        let s = src.stride;
        if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(AnchorError::Stride { stride: s, h, w });
        }
        let before = anchors.len();
        for i in 0..h / s {
            for j in 0..w / s {
                let (cx, cy) = ((j as f64 + 0.5) * s as f64, (i as f64 + 0.5) * s as f64);
                for &size in &src.anchor_sizes {
                    for &r in &src.aspect_ratios {
                        let q = r.sqrt();
                        anchors.push(BBox::new(cx, cy, size * q, size / q));
                    }
                }
            }
        }
        per_source.push(anchors.len() - before);
    }
    Ok(AnchorSet {
        anchors,
        per_source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts() {
        let one = generate_anchors(96, 96, &[SourceSpec::new(8, vec![24.0])]).unwrap();
        assert_eq!(one.len(), 144);
        let two = generate_anchors(96, 96, &[SourceSpec::new(8, vec![24.0, 34.0])]).unwrap();
        assert_eq!(two.len(), 288);
        let mut ratios = SourceSpec::new(4, vec![12.0]);
        ratios.aspect_ratios = vec![0.5, 1.0, 2.0];
        let r = generate_anchors(96, 96, &[ratios, SourceSpec::new(8, vec![24.0])]).unwrap();
        assert_eq!(r.per_source, vec![24 * 24 * 3, 144]);
        let b = r.anchors[2];
        assert!((b.w / b.h - 2.0).abs() < 1e-12 && (b.w * b.h - 144.0).abs() < 1e-9);
    }

    #[test]
    fn centers_are_cell_centers() {
        let a = generate_anchors(16, 16, &[SourceSpec::new(4, vec![6.0, 9.0])]).unwrap();
        assert_eq!((a.anchors[0].cx, a.anchors[0].cy), (2.0, 2.0));
        assert_eq!(a.anchors[1].w, 9.0);
        // Row 1, column 2.
        let b = a.anchors[(4 + 2) * 2];
        assert_eq!((b.cx, b.cy), (10.0, 6.0));
    }

    #[test]
    fn stride_must_divide() {
        assert!(generate_anchors(90, 96, &[SourceSpec::new(8, vec![24.0])]).is_err());
    }

    #[test]
    fn matches_network_anchor_count() {
        let cfg = crate::nn::NetworkConfig::default();
        let (net, _) = crate::nn::Network::build::<f32>(cfg.clone(), 0).unwrap();
        let a = generate_anchors(96, 96, &cfg.sources).unwrap();
        assert_eq!(a.len(), net.anchor_count(96, 96));
    }
}

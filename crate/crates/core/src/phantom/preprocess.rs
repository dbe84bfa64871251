use std::collections::VecDeque;

use crate::detect::BBox;

pub const HU_MIN: f64 = -150.0;
pub const HU_MAX: f64 = 250.0;
pub const BLUR_SIZE: usize = 11;
pub const BLUR_SIGMA: f64 = 2.0;

/// Clip to `[-150, 250]` and rescale to `[0, 1]`.
pub fn hu_window(hu: f64) -> f64 {
    (hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with edge replication.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, size: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Largest 4-connected component of a binary mask (first in raster order on
/// ties).
pub fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![0u32; h * w];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut count = 0;
        while let Some(i) = queue.pop_front() {
            count += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if count > best.0 {
            best = (count, next);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.1).collect()
}

/// Blur (11x11, sigma 2), threshold at 0.5, and bound the largest component.
/// `None` when nothing survives.
pub fn mask_to_box(mask: &[u8], h: usize, w: usize) -> Option<BBox> {
    let img: Vec<f64> = mask
        .iter()
        .map(|&m| if m != 0 { 1.0 } else { 0.0 })
        .collect();
    let blurred = gaussian_blur(&img, h, w, BLUR_SIZE, BLUR_SIGMA);
    let fg: Vec<bool> = blurred.iter().map(|&v| v >= 0.5).collect();
    let comp = largest_component(&fg, h, w);
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in comp.iter().enumerate().filter(|(_, &c)| c) {
        let (y, x) = (i / w, i % w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    (x0 != usize::MAX)
        .then(|| BBox::from_corners(x0 as f64, y0 as f64, x1 as f64 + 1.0, y1 as f64 + 1.0))
}

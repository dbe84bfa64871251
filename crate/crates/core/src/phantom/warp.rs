//! Per-phase geometric warps. A warp maps a pixel position of the phase
//! image to the anatomy position it shows:
//! `S(p) = c + L (p - c) + shift + sum_i amp_i * sin(2 pi freq_i . p + phase_i)`.
//! Positions are `[x, y]` in pixels.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{MisalignmentKind, MisalignmentSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amp: [f64; 2],
    /// Cycles per pixel along x and y.
    pub freq: [f64; 2],
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Warp {
    pub center: [f64; 2],
    /// Row-major 2x2.
    pub linear: [f64; 4],
    pub shift: [f64; 2],
    pub waves: Vec<Wave>,
}

impl Warp {
    pub fn identity(center: [f64; 2]) -> Self {
        Warp {
            center,
            linear: [1.0, 0.0, 0.0, 1.0],
            shift: [0.0; 2],
            waves: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.linear == [1.0, 0.0, 0.0, 1.0] && self.shift == [0.0; 2] && self.waves.is_empty()
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let l = &self.linear;
        let mut q = [
            self.center[0] + l[0] * dx + l[1] * dy + self.shift[0],
            self.center[1] + l[2] * dx + l[3] * dy + self.shift[1],
        ];
        for w in &self.waves {
            let s = (TAU * (w.freq[0] * p[0] + w.freq[1] * p[1]) + w.phase).sin();
            q[0] += w.amp[0] * s;
            q[1] += w.amp[1] * s;
        }
        q
    }

    /// Determinant of the Jacobian of [`Self::apply`] at `p`.
    pub fn jacobian_det(&self, p: [f64; 2]) -> f64 {
        let l = &self.linear;
        let mut j = *l;
        for w in &self.waves {
            let c = TAU * (TAU * (w.freq[0] * p[0] + w.freq[1] * p[1]) + w.phase).cos();
            j[0] += w.amp[0] * c * w.freq[0];
            j[1] += w.amp[0] * c * w.freq[1];
            j[2] += w.amp[1] * c * w.freq[0];
            j[3] += w.amp[1] * c * w.freq[1];
        }
        j[0] * j[3] - j[1] * j[2]
    }

    /// Largest displacement `|S(p) - p|` over a `step`-spaced grid of a
    /// `size x size` image.
    pub fn max_displacement(&self, size: usize, step: usize) -> f64 {
        grid(size, step)
            .map(|p| {
                let q = self.apply(p);
                (q[0] - p[0]).hypot(q[1] - p[1])
            })
            .fold(0.0, f64::max)
    }

    pub fn min_jacobian(&self, size: usize, step: usize) -> f64 {
        grid(size, step)
            .map(|p| self.jacobian_det(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Multiplies the displacement field `S(p) - p` by `k`. Exact for
    /// affine and wave components.
    fn scale_displacement(&mut self, k: f64) {
        let l = &mut self.linear;
        l[0] = 1.0 + k * (l[0] - 1.0);
        l[1] *= k;
        l[2] *= k;
        l[3] = 1.0 + k * (l[3] - 1.0);
        self.shift = [self.shift[0] * k, self.shift[1] * k];
        for w in &mut self.waves {
            w.amp = [w.amp[0] * k, w.amp[1] * k];
        }
    }
}

fn grid(size: usize, step: usize) -> impl Iterator<Item = [f64; 2]> {
    let pts: Vec<f64> = (0..=size).step_by(step.max(1)).map(|v| v as f64).collect();
    let pts2 = pts.clone();
    pts.into_iter()
        .flat_map(move |y| pts2.clone().into_iter().map(move |x| [x, y]))
}

fn direction<R: Rng>(rng: &mut R) -> [f64; 2] {
    let a = rng.gen_range(0.0..TAU);
    [a.cos(), a.sin()]
}

/// Draws a warp whose largest displacement over the image lies in
/// `[m/2, m]` for magnitude `m`.
pub fn sample_warp<R: Rng>(spec: &MisalignmentSpec, size: usize, rng: &mut R) -> Warp {
    let c = size as f64 / 2.0;
    let mut warp = Warp::identity([c, c]);
    let m = spec.magnitude;
    if spec.kind == MisalignmentKind::None || m <= 0.0 {
        return warp;
    }
    let target = rng.gen_range(0.5 * m..=m);
    let corner = c * std::f64::consts::SQRT_2;
    match spec.kind {
        MisalignmentKind::None => {}
        MisalignmentKind::Translation => {
            let d = direction(rng);
            warp.shift = [target * d[0], target * d[1]];
        }
        MisalignmentKind::Rigid => {
            // Rotation moves the corners by at most half the budget; the
            // translation takes the rest.
            let theta = rng.gen_range(-1.0..1.0) * 0.5 * target / corner;
            let (s, co) = theta.sin_cos();
            warp.linear = [co, -s, s, co];
            let rot = 2.0 * (theta / 2.0).sin().abs() * corner;
            let d = direction(rng);
            let t = target - rot;
            warp.shift = [t * d[0], t * d[1]];
            return warp;
        }
        MisalignmentKind::Affine => {
            let e: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            warp.linear = [1.0 + e[0], e[1], e[2], 1.0 + e[3]];
            let d = direction(rng);
            let lin = Warp {
                shift: [0.0; 2],
                ..warp.clone()
            }
            .max_displacement(size, 4);
            warp.shift = [lin * d[0], lin * d[1]];
        }
        MisalignmentKind::Elastic => {
            let d = direction(rng);
            warp.shift = [d[0], d[1]];
            for _ in 0..3 {
                let dir = direction(rng);
                let f = rng.gen_range(0.5..1.0) / size as f64;
                let fd = direction(rng);
                warp.waves.push(Wave {
                    amp: [0.5 * dir[0], 0.5 * dir[1]],
                    freq: [f * fd[0], f * fd[1]],
                    phase: rng.gen_range(0.0..TAU),
                });
            }
        }
    }
    let now = warp.max_displacement(size, 4);
    if now > 0.0 {
        warp.scale_displacement(target / now);
    }
    warp
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    hu_window, mask_to_box, sample_warp, MisalignmentSpec, MultiphaseSample, PhantomError,
    PhantomSpec, Warp, PHASES, REFERENCE_PHASE,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobKind {
    Lesion,
    Bright,
    Dark,
}

/// A disk in the reference frame with one radius per slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub kind: BlobKind,
    pub center: [f64; 2],
    pub radii: Vec<f64>,
}

struct Liver {
    center: [f64; 2],
    axes: [f64; 2],
    angle: f64,
}

impl Liver {
    fn contains(&self, q: [f64; 2]) -> bool {
        let (dx, dy) = (q[0] - self.center[0], q[1] - self.center[1]);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        (u / self.axes[0]).powi(2) + (v / self.axes[1]).powi(2) <= 1.0
    }

    /// Whether a disk lies inside with a one-pixel margin.
    fn holds_disk(&self, c: [f64; 2], r: f64) -> bool {
        (0..64).all(|i| {
            let a = i as f64 * std::f64::consts::TAU / 64.0;
            self.contains([c[0] + (r + 1.0) * a.cos(), c[1] + (r + 1.0) * a.sin()])
        })
    }
}

const ATTEMPTS: usize = 500;
const LAYOUTS: usize = 20;

fn place<R: Rng>(
    rng: &mut R,
    liver: &Liver,
    blobs: &[Blob],
    r: f64,
    what: &'static str,
) -> Result<[f64; 2], PhantomError> {
    let ext = liver.axes[0].max(liver.axes[1]);
    for _ in 0..ATTEMPTS {
        let c = [
            liver.center[0] + rng.gen_range(-ext..ext),
            liver.center[1] + rng.gen_range(-ext..ext),
        ];
        if !liver.holds_disk(c, r) {
            continue;
        }
        let clear = blobs.iter().all(|b| {
            let rb = b.radii.iter().fold(0.0f64, |m, &v| m.max(v));
            (c[0] - b.center[0]).hypot(c[1] - b.center[1]) > r + rb + 2.0
        });
        if clear {
            return Ok(c);
        }
    }
    Err(PhantomError::Placement {
        what,
        radius: r,
        attempts: ATTEMPTS,
    })
}

/// Whole layouts are redrawn when a blob cannot be placed; the last
/// placement error is reported if none fits.
fn layout<R: Rng>(
    rng: &mut R,
    spec: &PhantomSpec,
    liver: &Liver,
) -> Result<(Vec<Blob>, usize), PhantomError> {
    let mut last = None;
    for _ in 0..LAYOUTS {
        match try_layout(rng, spec, liver) {
            Ok(v) => return Ok(v),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one layout attempt"))
}

fn try_layout<R: Rng>(
    rng: &mut R,
    spec: &PhantomSpec,
    liver: &Liver,
) -> Result<(Vec<Blob>, usize), PhantomError> {
    let mut blobs: Vec<Blob> = Vec::new();
    let n_lesions = rng.gen_range(spec.lesions[0]..=spec.lesions[1]);
    let n_distractors = rng.gen_range(spec.distractors[0]..=spec.distractors[1]);
    let kinds = std::iter::repeat_n(BlobKind::Lesion, n_lesions)
        .chain((0..n_distractors).map(|_| {
            if rng.gen_bool(0.5) {
                BlobKind::Bright
            } else {
                BlobKind::Dark
            }
        }))
        .collect::<Vec<_>>();
    for kind in kinds {
        let (range, what) = match kind {
            BlobKind::Lesion => (spec.lesion_radius, "lesion"),
            _ => (spec.distractor_radius, "distractor"),
        };
        let r = rng.gen_range(range[0]..=range[1]);
        let radii = blob_radii(rng, r, spec.slices, spec.slice_jitter);
        let rmax = radii.iter().fold(0.0f64, |m, &v| m.max(v));
        let center = place(rng, liver, &blobs, rmax, what)?;
        blobs.push(Blob {
            kind,
            center,
            radii,
        });
    }
    Ok((blobs, n_lesions))
}

fn blob_radii<R: Rng>(rng: &mut R, r: f64, slices: usize, jitter: f64) -> Vec<f64> {
    let mid = slices / 2;
    (0..slices)
        .map(|s| {
            if s == mid {
                r
            } else {
                r * (1.0 + rng.gen_range(-jitter..=jitter))
            }
        })
        .collect()
}

fn jittered<R: Rng>(rng: &mut R, base: &[f64; PHASES], j: f64) -> [f64; PHASES] {
    let mut v = *base;
    for x in &mut v {
        if j > 0.0 {
            *x += rng.gen_range(-j..=j);
        }
    }
    v
}

/// Renders one sample; a pure function of `(spec, mis, seed)`.
pub fn generate_sample(
    spec: &PhantomSpec,
    mis: &MisalignmentSpec,
    seed: u64,
) -> Result<MultiphaseSample, PhantomError> {
    spec.validate()?;
    if !(mis.magnitude >= 0.0) || !mis.magnitude.is_finite() {
        return Err(PhantomError::Spec(format!(
            "misalignment magnitude {}",
            mis.magnitude
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.size;
    let half = n as f64 / 2.0;
    let cj = spec.liver_center_jitter;
    let liver = Liver {
        center: [
            half + rng.gen_range(-cj..=cj),
            half + rng.gen_range(-cj..=cj),
        ],
        axes: [
            rng.gen_range(spec.liver_axes[0][0]..=spec.liver_axes[0][1]),
            rng.gen_range(spec.liver_axes[1][0]..=spec.liver_axes[1][1]),
        ],
        angle: rng.gen_range(-spec.liver_rotation..=spec.liver_rotation),
    };

    let (blobs, n_lesions) = layout(&mut rng, spec, &liver)?;
    let p = &spec.profile;
    let liver_hu = jittered(&mut rng, &p.liver, p.jitter);
    let lesion_hu = jittered(&mut rng, &p.lesion, p.jitter);
    let bright_hu = jittered(&mut rng, &p.bright_distractor, p.jitter);
    let dark_hu = jittered(&mut rng, &p.dark_distractor, p.jitter);
    let contrast: Vec<f64> = (0..PHASES)
        .map(|k| (lesion_hu[k] - liver_hu[k]).abs())
        .collect();
    let annotation_phase = (0..PHASES).fold(0, |best, k| {
        if contrast[k] > contrast[best] {
            k
        } else {
            best
        }
    });

    let shared = sample_warp(mis, n, &mut rng);
    let warps: Vec<Warp> = (0..PHASES)
        .map(|k| {
            if k == REFERENCE_PHASE {
                Warp::identity([half, half])
            } else if mis.independent {
                sample_warp(mis, n, &mut rng)
            } else {
                shared.clone()
            }
        })
        .collect();

    let noise =
        Normal::new(0.0, p.noise_sigma.max(0.0)).map_err(|e| PhantomError::Spec(e.to_string()))?;
    let mid = spec.slices / 2;
    let plane = n * n;
    let mut image = vec![0.0f32; PHASES * spec.slices * plane];
    let mut liver_masks = vec![vec![0u8; plane]; PHASES];
    let mut lesion_masks = vec![vec![0u8; plane]; PHASES];
    let mut lesion_each = vec![vec![0u8; plane]; n_lesions];
    // Distractors first so lesions win any (impossible) overlap.
    let mut order: Vec<usize> = (0..blobs.len()).collect();
    order.sort_by_key(|&i| blobs[i].kind == BlobKind::Lesion);
    for k in 0..PHASES {
        for s in 0..spec.slices {
            let ch = k * spec.slices + s;
            for i in 0..plane {
                let pix = [(i % n) as f64 + 0.5, (i / n) as f64 + 0.5];
                let q = warps[k].apply(pix);
                let in_liver = liver.contains(q);
                let mut hu = if in_liver { liver_hu[k] } else { p.background };
                let mut lesion_here = None;
                for &b in &order {
                    let blob = &blobs[b];
                    if (q[0] - blob.center[0]).hypot(q[1] - blob.center[1]) <= blob.radii[s] {
                        hu = match blob.kind {
                            BlobKind::Lesion => {
                                lesion_here = Some(b);
                                lesion_hu[k]
                            }
                            BlobKind::Bright => bright_hu[k],
                            BlobKind::Dark => dark_hu[k],
                        };
                    }
                }
                image[ch * plane + i] = hu_window(hu + noise.sample(&mut rng)) as f32;
                if s == mid {
                    liver_masks[k][i] = u8::from(in_liver);
                    if let Some(b) = lesion_here {
                        lesion_masks[k][i] = 1;
                        if k == annotation_phase {
                            lesion_each[b][i] = 1;
                        }
                    }
                }
            }
        }
    }
    let gt_boxes = lesion_each
        .iter()
        .filter_map(|m| mask_to_box(m, n, n))
        .collect();
    Ok(MultiphaseSample {
        image: Tensor::new(vec![PHASES * spec.slices, n, n], image).expect("image shape"),
        gt_boxes,
        liver_masks,
        lesion_masks,
        annotation_phase,
        misalignment: mis.clone(),
        warps,
        seed,
    })
}

//! Synthetic four-phase liver phantoms with hyper-enhancing, washing-out
//! lesions, controllable inter-phase misalignment, the intensity and mask
//! preprocessing pipeline, and the dataset container.

mod container;
mod preprocess;
mod render;
mod warp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use container::{
    export_raw, read_dataset, split_counts, write_dataset, DatasetHeader, DatasetReader,
    SampleMeta, DATASET_VERSION,
};
pub use preprocess::{
    gaussian_blur, gaussian_kernel, hu_window, largest_component, mask_to_box, BLUR_SIGMA,
    BLUR_SIZE, HU_MAX, HU_MIN,
};
pub use render::{generate_sample, Blob, BlobKind};
pub use warp::{sample_warp, Warp, Wave};

use crate::detect::BBox;
use crate::tensor::Tensor;

pub const PHASES: usize = 4;
pub const PHASE_NAMES: [&str; PHASES] = ["pre", "arterial", "portal", "delayed"];
/// Fixed reference frame for misalignment.
pub const REFERENCE_PHASE: usize = 2;

/// Pseudo-HU values per phase (pre, arterial, portal, delayed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancementProfile {
    pub background: f64,
    pub liver: [f64; PHASES],
    pub lesion: [f64; PHASES],
    /// Enhances early and stays bright.
    pub bright_distractor: [f64; PHASES],
    /// Dark in every phase.
    pub dark_distractor: [f64; PHASES],
    /// Per-sample uniform offset range applied to each tissue and phase.
    pub jitter: f64,
    pub noise_sigma: f64,
}

impl Default for EnhancementProfile {
    fn default() -> Self {
        EnhancementProfile {
            background: 30.0,
            liver: [90.0; PHASES],
            lesion: [70.0, 140.0, 60.0, 55.0],
            bright_distractor: [75.0, 145.0, 140.0, 130.0],
            dark_distractor: [20.0, 25.0, 30.0, 30.0],
            jitter: 10.0,
            noise_sigma: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub size: usize,
    pub slices: usize,
    /// Inclusive lesion count range.
    pub lesions: [usize; 2],
    pub lesion_radius: [f64; 2],
    /// Inclusive distractor count range.
    pub distractors: [usize; 2],
    pub distractor_radius: [f64; 2],
    /// Liver semi-axis ranges along x and y.
    pub liver_axes: [[f64; 2]; 2],
    pub liver_center_jitter: f64,
    /// Maximum liver rotation in radians.
    pub liver_rotation: f64,
    /// Relative blob radius change between neighbouring slices.
    pub slice_jitter: f64,
    pub profile: EnhancementProfile,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 96,
            slices: 3,
            lesions: [1, 2],
            lesion_radius: [5.0, 9.0],
            distractors: [0, 2],
            distractor_radius: [4.0, 8.0],
            liver_axes: [[30.0, 38.0], [24.0, 30.0]],
            liver_center_jitter: 4.0,
            liver_rotation: 0.35,
            slice_jitter: 0.05,
            profile: EnhancementProfile::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error(
        "could not place {what} of radius {radius:.1} inside the liver after {attempts} attempts"
    )]
    Placement {
        what: &'static str,
        radius: f64,
        attempts: usize,
    },
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::Spec(m));
        if self.size < 16 {
            return bad(format!("image size {} too small", self.size));
        }
        if self.slices == 0 || self.slices.is_multiple_of(2) {
            return bad("slice count must be odd".into());
        }
        let range = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !range(self.lesion_radius)
            || !range(self.distractor_radius)
            || !self.liver_axes.iter().all(|&a| range(a))
        {
            return bad("radius and axis ranges must be positive and ordered".into());
        }
        if self.lesions[0] > self.lesions[1] || self.distractors[0] > self.distractors[1] {
            return bad("count ranges must be ordered".into());
        }
        if !(0.0..0.5).contains(&self.slice_jitter) {
            return bad("slice jitter must lie in [0, 0.5)".into());
        }
        let p = &self.profile;
        // The hallmark must survive the worst-case jitter.
        let margin = 2.0 * p.jitter;
        if p.lesion[1] - p.liver[1] <= margin {
            return bad("arterial lesion must be brighter than liver".into());
        }
        for k in [2, 3] {
            if p.liver[k] - p.lesion[k] <= margin {
                return bad(format!(
                    "{} lesion must be darker than liver",
                    PHASE_NAMES[k]
                ));
            }
        }
        let ext = self.liver_axes[0][1].max(self.liver_axes[1][1]) + self.liver_center_jitter;
        if 2.0 * ext > self.size as f64 {
            return bad("liver does not fit in the image".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisalignmentKind {
    None,
    Translation,
    Rigid,
    Affine,
    Elastic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MisalignmentSpec {
    pub kind: MisalignmentKind,
    /// Largest displacement in pixels; realised warps fall in `[m/2, m]`.
    pub magnitude: f64,
    /// Separate warps per moving phase; otherwise one shared warp.
    #[serde(default = "yes")]
    pub independent: bool,
}

fn yes() -> bool {
    true
}

impl MisalignmentSpec {
    pub fn none() -> Self {
        MisalignmentSpec {
            kind: MisalignmentKind::None,
            magnitude: 0.0,
            independent: true,
        }
    }

    /// Registration tiers: 0 aligned, up to 2 px rigid, up to 4 px affine,
    /// larger elastic.
    pub fn tier(magnitude: f64) -> Self {
        let kind = if magnitude <= 0.0 {
            MisalignmentKind::None
        } else if magnitude <= 2.0 {
            MisalignmentKind::Rigid
        } else if magnitude <= 4.0 {
            MisalignmentKind::Affine
        } else {
            MisalignmentKind::Elastic
        };
        MisalignmentSpec {
            kind,
            magnitude: magnitude.max(0.0),
            independent: true,
        }
    }
}

/// One rendered training example.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiphaseSample {
    /// `[phases * slices, H, W]`, windowed to `[0, 1]`, phase-major.
    pub image: Tensor<f32>,
    /// Lesion boxes in the annotation phase's frame.
    pub gt_boxes: Vec<BBox>,
    /// Per phase, `H * W` binary masks of the centre slice.
    pub liver_masks: Vec<Vec<u8>>,
    pub lesion_masks: Vec<Vec<u8>>,
    pub annotation_phase: usize,
    pub misalignment: MisalignmentSpec,
    /// Realised warp per phase.
    pub warps: Vec<Warp>,
    pub seed: u64,
}

impl MultiphaseSample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

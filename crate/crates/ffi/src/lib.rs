//! C ABI over the phasealign phantom generator, dataset reader, trained
//! detector and evaluation metrics.
//!
//! Objects cross the boundary as opaque handles created by `pa_*_new`,
//! `pa_*_open` or `pa_*_load` and released with the matching `pa_*_free`.
//! Fallible calls return a [`PaStatus`]; the message of the most recent
//! failure on the calling thread is available from [`pa_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use phasealign::detect::{BBox, Detection, TrainConfig, Trainer};
use phasealign::metrics::{self, IobbDenominator, Overlap};
use phasealign::phantom::{
    generate_sample, DatasetReader, MisalignmentSpec, MultiphaseSample, PhantomSpec,
};
use phasealign::tensor::Checkpoint;

/// Result of a fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Generation = 5,
    Model = 6,
    OutOfRange = 7,
    BufferTooSmall = 8,
    /// The metric is undefined for the input, e.g. AP without ground truth.
    Undefined = 9,
    Panic = 10,
}

/// Axis-aligned box in center form, pixel units.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PaBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PaDetection {
    pub bbox: PaBox,
    pub score: f64,
}

/// A detection or ground-truth box tagged with its image index.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PaImageBox {
    pub image: usize,
    pub bbox: PaBox,
    /// Ignored for ground truth.
    pub score: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaOverlap {
    Iou = 0,
    /// Intersection over the predicted box.
    IobbPred = 1,
    /// Intersection over the ground-truth box.
    IobbGt = 2,
}

pub struct PaSample(MultiphaseSample);

pub struct PaDataset(DatasetReader);

pub struct PaDetector(Trainer);

pub struct PaDetections(Vec<Detection>);

impl From<PaBox> for BBox {
    fn from(b: PaBox) -> Self {
        BBox::new(b.cx, b.cy, b.w, b.h)
    }
}

impl From<BBox> for PaBox {
    fn from(b: BBox) -> Self {
        PaBox {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        }
    }
}

impl From<PaOverlap> for Overlap {
    fn from(o: PaOverlap) -> Self {
        match o {
            PaOverlap::Iou => Overlap::IoU,
            PaOverlap::IobbPred => Overlap::IoBB(IobbDenominator::Pred),
            PaOverlap::IobbGt => Overlap::IoBB(IobbDenominator::Gt),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(PaStatus, String);

impl Failure {
    fn new(status: PaStatus, msg: impl ToString) -> Self {
        Failure(status, msg.to_string())
    }
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PaStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(PaStatus::NullPointer, format!("{what} is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(PaStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(
            PaStatus::NullPointer,
            format!("{what} is null"),
        ));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    let s = deref(p, "path")?;
    let s = CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Failure::new(PaStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    let out = deref_mut(out, "output handle")?;
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, cap: usize) -> Result<(), Failure> {
    if cap < src.len() {
        return Err(Failure::new(
            PaStatus::BufferTooSmall,
            format!("buffer holds {cap} elements, {} needed", src.len()),
        ));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(Failure::new(PaStatus::NullPointer, "output buffer is null"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated and
/// NUL-terminated) and returns the buffer size needed for the full message.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn pa_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Renders one phantom. `spec_json` may be null for the default spec;
/// `tier` is the misalignment magnitude in pixels (0 for aligned).
///
/// # Safety
/// `spec_json` must be null or a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pa_sample_new(
    spec_json: *const c_char,
    tier: f64,
    seed: u64,
    out: *mut *mut PaSample,
) -> PaStatus {
    guard(|| {
        let spec = if spec_json.is_null() {
            PhantomSpec::default()
        } else {
            let text = CStr::from_ptr(spec_json)
                .to_str()
                .map_err(|_| Failure::new(PaStatus::InvalidArgument, "spec is not valid UTF-8"))?;
            serde_json::from_str(text)
                .map_err(|e| Failure::new(PaStatus::InvalidArgument, format!("spec: {e}")))?
        };
        if !(tier >= 0.0 && tier.is_finite()) {
            return Err(Failure::new(
                PaStatus::InvalidArgument,
                format!("tier must be finite and non-negative, got {tier}"),
            ));
        }
        let sample = generate_sample(&spec, &MisalignmentSpec::tier(tier), seed)
            .map_err(|e| Failure::new(PaStatus::Generation, e))?;
        put(out, PaSample(sample))
    })
}

/// # Safety
/// `sample` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pa_sample_free(sample: *mut PaSample) {
    free(sample)
}

/// Image shape: channels (phases times slices, phase-major), height, width.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pa_sample_shape(
    sample: *const PaSample,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> PaStatus {
    guard(|| {
        let s = &deref(sample, "sample")?.0;
        let shape = s.image.shape();
        *deref_mut(channels, "channels")? = shape[0];
        *deref_mut(height, "height")? = shape[1];
        *deref_mut(width, "width")? = shape[2];
        Ok(())
    })
}

/// Copies the `[C, H, W]` image, intensities in `[0, 1]`.
///
/// # Safety
/// `buf` must be valid for `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn pa_sample_image(
    sample: *const PaSample,
    buf: *mut f32,
    cap: usize,
) -> PaStatus {
    guard(|| copy_out(deref(sample, "sample")?.0.image.data(), buf, cap))
}

/// Number of ground-truth lesion boxes, or 0 for a null handle.
///
/// # Safety
/// `sample` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pa_sample_box_count(sample: *const PaSample) -> usize {
    sample.as_ref().map_or(0, |s| s.0.gt_boxes.len())
}

/// # Safety
/// `buf` must be valid for `cap` boxes.
#[no_mangle]
pub unsafe extern "C" fn pa_sample_boxes(
    sample: *const PaSample,
    buf: *mut PaBox,
    cap: usize,
) -> PaStatus {
    guard(|| {
        let boxes: Vec<PaBox> = deref(sample, "sample")?
            .0
            .gt_boxes
            .iter()
            .map(|&b| b.into())
            .collect();
        copy_out(&boxes, buf, cap)
    })
}

/// Phase in whose frame the boxes are annotated.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pa_sample_annotation_phase(
    sample: *const PaSample,
    phase: *mut usize,
) -> PaStatus {
    guard(|| {
        *deref_mut(phase, "phase")? = deref(sample, "sample")?.0.annotation_phase;
        Ok(())
    })
}

/// Opens a dataset container for random access.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pa_dataset_open(
    path: *const c_char,
    out: *mut *mut PaDataset,
) -> PaStatus {
    guard(|| {
        let reader = DatasetReader::open(&path_arg(path)?).map_err(format_failure)?;
        put(out, PaDataset(reader))
    })
}

/// # Safety
/// `dataset` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pa_dataset_free(dataset: *mut PaDataset) {
    free(dataset)
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pa_dataset_len(dataset: *const PaDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// Reads sample `index` into a new handle.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pa_dataset_get(
    dataset: *mut PaDataset,
    index: usize,
    out: *mut *mut PaSample,
) -> PaStatus {
    guard(|| {
        let d = &mut deref_mut(dataset, "dataset")?.0;
        if index >= d.len() {
            return Err(Failure::new(
                PaStatus::OutOfRange,
                format!("index {index} out of range for {} samples", d.len()),
            ));
        }
        let sample = d.get(index).map_err(format_failure)?;
        put(out, PaSample(sample))
    })
}

fn format_failure(e: phasealign::container::FormatError) -> Failure {
    use phasealign::container::FormatError;
    let status = match e {
        FormatError::Io(_) => PaStatus::Io,
        _ => PaStatus::Format,
    };
    Failure::new(status, e)
}

/// Loads a trained checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pa_detector_load(
    path: *const c_char,
    out: *mut *mut PaDetector,
) -> PaStatus {
    guard(|| {
        let ckpt = Checkpoint::read(&path_arg(path)?).map_err(format_failure)?;
        let trainer = Trainer::resume(ckpt, TrainConfig::default(), 0)
            .map_err(|e| Failure::new(PaStatus::Model, e))?;
        put(out, PaDetector(trainer))
    })
}

/// # Safety
/// `detector` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pa_detector_free(detector: *mut PaDetector) {
    free(detector)
}

/// Runs the detector on one sample; results are after the confidence
/// filter and non-maximum suppression, highest score first.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pa_detector_detect(
    detector: *const PaDetector,
    sample: *const PaSample,
    out: *mut *mut PaDetections,
) -> PaStatus {
    guard(|| {
        let t = &deref(detector, "detector")?.0;
        let s = &deref(sample, "sample")?.0;
        let (h, w) = s.size();
        if [h, w] != t.info.image_size {
            return Err(Failure::new(
                PaStatus::InvalidArgument,
                format!(
                    "sample is {h}x{w}, detector expects {}x{}",
                    t.info.image_size[0], t.info.image_size[1]
                ),
            ));
        }
        let mut dets = t
            .predict(std::slice::from_ref(s), 1)
            .map_err(|e| Failure::new(PaStatus::Model, e))?;
        put(out, PaDetections(dets.pop().unwrap_or_default()))
    })
}

/// # Safety
/// `dets` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pa_detections_free(dets: *mut PaDetections) {
    free(dets)
}

/// # Safety
/// `dets` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pa_detections_count(dets: *const PaDetections) -> usize {
    dets.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `buf` must be valid for `cap` detections.
#[no_mangle]
pub unsafe extern "C" fn pa_detections_copy(
    dets: *const PaDetections,
    buf: *mut PaDetection,
    cap: usize,
) -> PaStatus {
    guard(|| {
        let v: Vec<PaDetection> = deref(dets, "detections")?
            .0
            .iter()
            .map(|d| PaDetection {
                bbox: d.bbox.into(),
                score: d.score,
            })
            .collect();
        copy_out(&v, buf, cap)
    })
}

#[no_mangle]
pub extern "C" fn pa_iou(a: PaBox, b: PaBox) -> f64 {
    metrics::iou(&a.into(), &b.into())
}

/// Intersection over the area of `pred`, or of `gt` when `over_gt` is set.
#[no_mangle]
pub extern "C" fn pa_iobb(pred: PaBox, gt: PaBox, over_gt: bool) -> f64 {
    let denom = if over_gt {
        IobbDenominator::Gt
    } else {
        IobbDenominator::Pred
    };
    metrics::iobb(&pred.into(), &gt.into(), denom)
}

/// Dice of two binary masks of `len` bytes (nonzero is foreground).
///
/// # Safety
/// `a` and `b` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pa_dice(
    a: *const u8,
    b: *const u8,
    len: usize,
    out: *mut f64,
) -> PaStatus {
    guard(|| {
        let norm = |m: &[u8]| m.iter().map(|&v| (v != 0) as u8).collect::<Vec<_>>();
        let (a, b) = (norm(slice(a, len, "a")?), norm(slice(b, len, "b")?));
        let d = metrics::dice(&a, &b).map_err(|e| Failure::new(PaStatus::InvalidArgument, e))?;
        *deref_mut(out, "out")? = d;
        Ok(())
    })
}

/// Average precision over `images` images at overlap threshold `thr`.
/// Returns `Undefined` (and NaN) when there is no ground truth.
///
/// # Safety
/// `preds` and `gts` must be valid for their counts; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pa_average_precision(
    preds: *const PaImageBox,
    n_preds: usize,
    gts: *const PaImageBox,
    n_gts: usize,
    images: usize,
    overlap: PaOverlap,
    thr: f64,
    out: *mut f64,
) -> PaStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = f64::NAN;
        let mut p: Vec<Vec<Detection>> = vec![Vec::new(); images];
        let mut g: Vec<Vec<BBox>> = vec![Vec::new(); images];
        for (what, items) in [
            ("prediction", slice(preds, n_preds, "preds")?),
            ("ground truth", slice(gts, n_gts, "gts")?),
        ] {
            if let Some(b) = items.iter().find(|b| b.image >= images) {
                return Err(Failure::new(
                    PaStatus::OutOfRange,
                    format!("{what} image {} out of range for {images} images", b.image),
                ));
            }
        }
        for b in slice(preds, n_preds, "preds")? {
            p[b.image].push(Detection {
                bbox: b.bbox.into(),
                score: b.score,
            });
        }
        for b in slice(gts, n_gts, "gts")? {
            g[b.image].push(b.bbox.into());
        }
        match metrics::average_precision(&p, &g, overlap.into(), thr)
            .map_err(|e| Failure::new(PaStatus::InvalidArgument, e))?
        {
            Some(c) => {
                *out = c.ap;
                Ok(())
            }
            None => Err(Failure::new(PaStatus::Undefined, "no ground-truth boxes")),
        }
    })
}

/// `1 - unregistered / registered`. Returns `Undefined` (and NaN) when
/// `registered` is not positive.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pa_sensitivity(
    unregistered: f64,
    registered: f64,
    out: *mut f64,
) -> PaStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        match metrics::sensitivity(unregistered, registered) {
            Some(v) => {
                *out = v;
                Ok(())
            }
            None => {
                *out = f64::NAN;
                Err(Failure::new(
                    PaStatus::Undefined,
                    format!("registered AP {registered} is not positive"),
                ))
            }
        }
    })
}

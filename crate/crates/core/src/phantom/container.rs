//! Dataset container: one JSON header line, then per sample the image as
//! `f32` followed by the liver and lesion masks as `u8`, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MisalignmentSpec, MultiphaseSample, PhantomSpec, Warp, PHASES};
use crate::container::{read_bytes, read_f32s, read_header, write_f32s, write_header, FormatError};
use crate::detect::BBox;
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;
const KIND: &str = "phasealign-dataset";

/// Per-sample metadata kept in the header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub seed: u64,
    pub annotation_phase: usize,
    pub gt_boxes: Vec<BBox>,
    pub misalignment: MisalignmentSpec,
    pub warps: Vec<Warp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub phases: usize,
    /// `train`, `val`, `test` or any caller tag.
    pub split: String,
    pub spec: PhantomSpec,
    pub samples: Vec<SampleMeta>,
}

impl DatasetHeader {
    fn block_bytes(&self) -> u64 {
        let plane = (self.height * self.width) as u64;
        4 * self.channels as u64 * plane + 2 * self.phases as u64 * plane
    }
}

/// Train, validation and test counts for `n` samples (0.77 / 0.19 / rest).
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = ((0.77 * n as f64).round() as usize).min(n);
    let val = ((0.19 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

pub fn write_dataset(
    path: &Path,
    samples: &[MultiphaseSample],
    spec: &PhantomSpec,
    split: &str,
) -> Result<DatasetHeader, FormatError> {
    let (channels, height, width) = match samples.first() {
        Some(s) => (s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]),
        None => (PHASES * spec.slices, spec.size, spec.size),
    };
    for (i, s) in samples.iter().enumerate() {
        if s.image.shape() != [channels, height, width]
            || s.liver_masks.len() != PHASES
            || s.lesion_masks.len() != PHASES
        {
            return Err(FormatError::Inconsistent(format!(
                "sample {i} differs in shape from sample 0"
            )));
        }
    }
    let header = DatasetHeader {
        format: KIND.into(),
        version: DATASET_VERSION,
        count: samples.len(),
        channels,
        height,
        width,
        phases: PHASES,
        split: split.into(),
        spec: spec.clone(),
        samples: samples
            .iter()
            .map(|s| SampleMeta {
                seed: s.seed,
                annotation_phase: s.annotation_phase,
                gt_boxes: s.gt_boxes.clone(),
                misalignment: s.misalignment.clone(),
                warps: s.warps.clone(),
            })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, &header)?;
    for s in samples {
        write_f32s(&mut w, s.image.data().iter().copied())?;
        for m in s.liver_masks.iter().chain(&s.lesion_masks) {
            w.write_all(m)?;
        }
    }
    w.flush()?;
    Ok(header)
}

/// Random-access reader over a dataset file.
pub struct DatasetReader {
    pub header: DatasetHeader,
    file: BufReader<File>,
    data_start: u64,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self, FormatError> {
        let mut file = BufReader::new(File::open(path)?);
        let (header, data_start): (DatasetHeader, u64) = read_header(&mut file)?;
        if header.format != KIND {
            return Err(FormatError::Kind {
                expected: KIND,
                found: header.format,
            });
        }
        if header.version != DATASET_VERSION {
            return Err(FormatError::Version {
                kind: KIND,
                found: header.version,
                supported: DATASET_VERSION,
            });
        }
        if header.samples.len() != header.count {
            return Err(FormatError::Inconsistent(format!(
                "header count {} but {} sample records",
                header.count,
                header.samples.len()
            )));
        }
        if header.phases != PHASES || header.channels % PHASES != 0 {
            return Err(FormatError::Inconsistent(format!(
                "{} channels over {} phases",
                header.channels, header.phases
            )));
        }
        let expected = data_start + header.count as u64 * header.block_bytes();
        let actual = file.get_ref().metadata()?.len();
        if actual < expected {
            return Err(FormatError::Truncated(format!(
                "{actual} bytes, header describes {expected}"
            )));
        }
        if actual > expected {
            return Err(FormatError::Inconsistent(format!(
                "{} trailing bytes after {} samples",
                actual - expected,
                header.count
            )));
        }
        Ok(DatasetReader {
            header,
            file,
            data_start,
        })
    }

    pub fn len(&self) -> usize {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn get(&mut self, i: usize) -> Result<MultiphaseSample, FormatError> {
        let h = &self.header;
        if i >= h.count {
            return Err(FormatError::Inconsistent(format!(
                "sample {i} out of range (count {})",
                h.count
            )));
        }
        self.file.seek(SeekFrom::Start(
            self.data_start + i as u64 * h.block_bytes(),
        ))?;
        let plane = h.height * h.width;
        let what = format!("sample {i}");
        let image = read_f32s(&mut self.file, h.channels * plane, &what)?;
        let masks = read_bytes(&mut self.file, 2 * h.phases * plane, &what)?;
        let mut chunks = masks.chunks(plane).map(<[u8]>::to_vec);
        let liver_masks = chunks.by_ref().take(h.phases).collect();
        let lesion_masks = chunks.collect();
        let meta = &h.samples[i];
        Ok(MultiphaseSample {
            image: Tensor::new(vec![h.channels, h.height, h.width], image)
                .map_err(|e| FormatError::Inconsistent(e.to_string()))?,
            gt_boxes: meta.gt_boxes.clone(),
            liver_masks,
            lesion_masks,
            annotation_phase: meta.annotation_phase,
            misalignment: meta.misalignment.clone(),
            warps: meta.warps.clone(),
            seed: meta.seed,
        })
    }
}

/// Reads a whole dataset into memory.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<MultiphaseSample>), FormatError> {
    let mut r = DatasetReader::open(path)?;
    let samples = (0..r.len())
        .map(|i| r.get(i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((r.header, samples))
}

/// Writes every channel of every sample as a raw little-endian `f32` plane
/// `sample{i:04}_ch{c:02}.f32` under `dir`, plus `index.json` with the shape.
pub fn export_raw(dir: &Path, samples: &[MultiphaseSample]) -> Result<usize, FormatError> {
    std::fs::create_dir_all(dir)?;
    let mut files = 0;
    for (i, s) in samples.iter().enumerate() {
        let (c, h, w) = (s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]);
        for (ch, plane) in s.image.data().chunks(h * w).enumerate().take(c) {
            let mut f = BufWriter::new(File::create(
                dir.join(format!("sample{i:04}_ch{ch:02}.f32")),
            )?);
            write_f32s(&mut f, plane.iter().copied())?;
            f.flush()?;
            files += 1;
        }
    }
    let index = serde_json::json!({
        "count": samples.len(),
        "shape": samples.first().map(|s| s.image.shape().to_vec()),
        "dtype": "f32le",
    });
    std::fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_sample;

    fn samples(n: u64) -> Vec<MultiphaseSample> {
        let spec = PhantomSpec {
            size: 48,
            liver_axes: [[15.0, 19.0], [12.0, 15.0]],
            lesion_radius: [3.0, 5.0],
            distractor_radius: [2.0, 4.0],
            ..Default::default()
        };
        (0..n)
            .map(|s| generate_sample(&spec, &MisalignmentSpec::tier(8.0), s).unwrap())
            .collect()
    }

    #[test]
    fn split_ratios() {
        assert_eq!(split_counts(100), (77, 19, 4));
        assert_eq!(split_counts(0), (0, 0, 0));
        assert_eq!(split_counts(1), (1, 0, 0));
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let xs = samples(10);
        write_dataset(&path, &xs, &PhantomSpec::default(), "train").unwrap();
        let (h, ys) = read_dataset(&path).unwrap();
        assert_eq!(h.count, 10);
        assert_eq!(h.split, "train");
        assert_eq!(xs, ys);
        for (x, y) in xs.iter().zip(&ys) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.image), bits(&y.image));
        }
    }

    #[test]
    fn random_access_matches_sequential() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&path, &samples(5), &PhantomSpec::default(), "val").unwrap();
        let (_, all) = read_dataset(&path).unwrap();
        let mut r = DatasetReader::open(&path).unwrap();
        for i in [3, 0, 4, 1, 2] {
            assert_eq!(r.get(i).unwrap(), all[i]);
        }
        assert!(r.get(5).is_err());
    }

    #[test]
    fn count_mismatch_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&path, &samples(3), &PhantomSpec::default(), "test").unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            DatasetReader::open(&cut),
            Err(FormatError::Truncated(_))
        ));

        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        header["count"] = 2.into();
        let mut bad = serde_json::to_vec(&header).unwrap();
        bad.extend_from_slice(&bytes[nl..]);
        let path2 = dir.path().join("count.bin");
        std::fs::write(&path2, &bad).unwrap();
        assert!(matches!(
            DatasetReader::open(&path2),
            Err(FormatError::Inconsistent(_))
        ));

        header["count"] = 3.into();
        header["version"] = 99.into();
        let mut bad = serde_json::to_vec(&header).unwrap();
        bad.extend_from_slice(&bytes[nl..]);
        std::fs::write(&path2, &bad).unwrap();
        assert!(matches!(
            DatasetReader::open(&path2),
            Err(FormatError::Version { found: 99, .. })
        ));
    }

    #[test]
    fn raw_export_planes() {
        let dir = tempfile::tempdir().unwrap();
        let xs = samples(2);
        assert_eq!(export_raw(dir.path(), &xs).unwrap(), 24);
        let plane = std::fs::read(dir.path().join("sample0001_ch05.f32")).unwrap();
        assert_eq!(plane.len(), 48 * 48 * 4);
        let v = f32::from_le_bytes([plane[0], plane[1], plane[2], plane[3]]);
        assert_eq!(v, xs[1].image.data()[5 * 48 * 48]);
    }
}

//! Parameter checkpoints: JSON header (version, parameter names and shapes,
//! residual gate values, step count) followed by little-endian `f32` blocks
//! in header order. Momentum buffers, when saved, follow in the same order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Parameter, Tensor};
use crate::container::{read_f32s, read_header, write_f32s, write_header, FormatError};

pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: &str = "phasealign-checkpoint";

pub type CheckpointError = FormatError;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    step: u64,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    lr_scales: Vec<f64>,
    trainable: Vec<bool>,
    /// Residual attention gate values, keyed by parameter name.
    sigma: BTreeMap<String, f32>,
    has_momentum: bool,
    /// Model description needed to rebuild the network.
    model: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub model: serde_json::Value,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    /// Names of parameters treated as residual gates in the header summary.
    fn is_gate(name: &str) -> bool {
        name.ends_with(".sigma")
    }

    pub fn sigma_values(&self) -> BTreeMap<String, f32> {
        self.params
            .iter()
            .filter(|p| Self::is_gate(&p.name))
            .map(|p| (p.name.clone(), p.value.data()[0]))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), FormatError> {
        let header = Header {
            format: KIND.to_string(),
            version: CHECKPOINT_VERSION,
            step: self.step,
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            shapes: self
                .params
                .iter()
                .map(|p| p.value.shape().to_vec())
                .collect(),
            lr_scales: self.params.iter().map(|p| p.lr_scale() as f64).collect(),
            trainable: self.params.iter().map(|p| p.trainable).collect(),
            sigma: self.sigma_values(),
            has_momentum: true,
            model: self.model.clone(),
        };
        write_header(w, &header)?;
        for p in self.params.iter() {
            write_f32s(w, p.value.data().iter().copied())?;
        }
        for p in self.params.iter() {
            write_f32s(w, p.momentum().iter().copied())?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        let mut r = BufReader::new(File::open(path)?);
        let (header, _): (Header, u64) = read_header(&mut r)?;
        if header.format != KIND {
            return Err(FormatError::Kind {
                expected: KIND,
                found: header.format,
            });
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(FormatError::Version {
                kind: KIND,
                found: header.version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let n = header.names.len();
        if header.shapes.len() != n || header.lr_scales.len() != n || header.trainable.len() != n {
            return Err(FormatError::Inconsistent(
                "per-parameter header lists differ in length".into(),
            ));
        }
        let mut params = ParamStore::new();
        for i in 0..n {
            let numel = header.shapes[i].iter().product();
            let data = read_f32s(&mut r, numel, &header.names[i])?;
            let value = Tensor::new(header.shapes[i].clone(), data)
                .map_err(|e| FormatError::Inconsistent(e.to_string()))?;
            let scale = header.lr_scales[i] as f32;
            if !(scale > 0.0) {
                return Err(FormatError::Inconsistent(format!(
                    "{}: lr_scale {scale}",
                    header.names[i]
                )));
            }
            let mut p = Parameter::new(header.names[i].clone(), value).with_lr_scale(scale);
            p.trainable = header.trainable[i];
            params.push(p);
        }
        if header.has_momentum {
            for p in params.iter_mut() {
                let m = read_f32s(&mut r, p.value.numel(), &format!("{} momentum", p.name))?;
                p.set_momentum(m);
            }
        }
        Ok(Checkpoint {
            step: header.step,
            model: header.model,
            params,
        })
    }
}

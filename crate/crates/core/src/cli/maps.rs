//! Export of attention gate maps and offset fields in the container format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_f32s, read_header, write_f32s, write_header, FormatError};
use crate::detect::select_input;
use crate::nn::{Network, OffsetField};
use crate::phantom::{MultiphaseSample, PHASES};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError};

pub const MAPS_VERSION: u32 = 1;
const KIND: &str = "phasealign-maps";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapBlock {
    pub sample: usize,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapsHeader {
    pub format: String,
    pub version: u32,
    pub count: usize,
    /// Residual gate value per attention block.
    pub sigma: Vec<f32>,
    pub blocks: Vec<MapBlock>,
}

/// Mean offset length per phase for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetSummary {
    pub sample: usize,
    pub mean_abs: Vec<f64>,
}

pub fn offsets_csv(rows: &[OffsetSummary]) -> String {
    let mut out = String::from("sample,pre,arterial,portal,delayed\n");
    for r in rows {
        let cells: Vec<String> = r.mean_abs.iter().map(f64::to_string).collect();
        out.push_str(&format!("{},{}\n", r.sample, cells.join(",")));
    }
    out
}

/// Runs the network on each sample and writes gate maps (`saN.gate`, the
/// attention output before projection, and `saN.gated`, the residual
/// `sigma * o`) plus `dconv.offsets` when the model predicts offsets.
pub fn export_maps(
    net: &Network,
    params: &ParamStore<f32>,
    samples: &[MultiphaseSample],
    path: &Path,
) -> Result<Vec<OffsetSummary>, MapsError> {
    let mut blocks = Vec::new();
    let mut data: Vec<Tensor<f32>> = Vec::new();
    let mut summary = Vec::new();
    let mut sigma = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = s.size();
        let x = select_input(s, &net.config);
        let c = x.len() / (h * w);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let xv = g.constant(Tensor::new(vec![1, c, h, w], x)?);
        let out = net.forward(&mut g, &bound, xv)?;
        sigma.clear();
        for (k, vars) in out.attention.iter().enumerate() {
            let st = vars.state(&g);
            sigma.push(st.sigma);
            for (name, t) in [("gate", st.gate_map), ("gated", st.gated)] {
                let shape = t.shape()[1..].to_vec();
                blocks.push(MapBlock {
                    sample: i,
                    name: format!("sa{}.{name}", k + 1),
                    shape: shape.clone(),
                });
                data.push(t.reshape(shape)?);
            }
        }
        if let Some(off) = out.deform.offsets {
            let field = OffsetField::split(g.value(off), net.config.groups()).remove(0);
            let mut mean_abs = field.mean_abs_per_phase();
            if net.config.groups() == 1 {
                // Single-phase input: report it under the portal column.
                let v = mean_abs[0];
                mean_abs = vec![f64::NAN; PHASES];
                mean_abs[crate::nn::PORTAL_PHASE] = v;
            }
            summary.push(OffsetSummary {
                sample: i,
                mean_abs,
            });
            blocks.push(MapBlock {
                sample: i,
                name: "dconv.offsets".into(),
                shape: field.offsets.shape().to_vec(),
            });
            data.push(field.offsets);
        }
    }
    let header = MapsHeader {
        format: KIND.into(),
        version: MAPS_VERSION,
        count: samples.len(),
        sigma,
        blocks,
    };
    let mut f = BufWriter::new(File::create(path)?);
    write_header(&mut f, &header)?;
    for t in &data {
        write_f32s(&mut f, t.data().iter().copied())?;
    }
    f.flush()?;
    Ok(summary)
}

pub fn read_maps(path: &Path) -> Result<(MapsHeader, Vec<Tensor<f32>>), MapsError> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, _): (MapsHeader, u64) = read_header(&mut r)?;
    if header.format != KIND {
        return Err(FormatError::Kind {
            expected: KIND,
            found: header.format,
        }
        .into());
    }
    if header.version != MAPS_VERSION {
        return Err(FormatError::Version {
            kind: KIND,
            found: header.version,
            supported: MAPS_VERSION,
        }
        .into());
    }
    let mut out = Vec::with_capacity(header.blocks.len());
    for b in &header.blocks {
        let n = b.shape.iter().product();
        let v = read_f32s(&mut r, n, &format!("sample {} {}", b.sample, b.name))?;
        out.push(Tensor::new(b.shape.clone(), v)?);
    }
    Ok((header, out))
}

#[derive(Debug, thiserror::Error)]
pub enum MapsError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

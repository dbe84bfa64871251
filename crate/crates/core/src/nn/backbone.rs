//! Grouped convolutional backbone: one channel group per phase, so phases
//! never mix until attention or fusion.

use rand::Rng;

use super::{ConvLayer, ConvSpec};
use crate::tensor::{Conv2dConfig, Element, Graph, ParamStore, Result, TensorError, Var};

/// A stack of grouped 3x3 convolutions, each followed by a rectifier.
#[derive(Clone, Debug)]
pub struct GroupedBackbone {
    pub in_channels: usize,
    pub groups: usize,
    layers: Vec<ConvLayer>,
    out_channels: usize,
}

/// Feature map and stride of a backbone stage.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    pub features: Var,
    pub stride: usize,
}

impl GroupedBackbone {
    /// `plan` lists `(out_channels, stride)` per layer.
    pub fn build<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        groups: usize,
        plan: &[(usize, usize)],
    ) -> std::result::Result<Self, TensorError> {
        let mut cin = in_channels;
        let mut layers = Vec::with_capacity(plan.len());
        for (i, &(cout, stride)) in plan.iter().enumerate() {
            if !cin.is_multiple_of(groups) || cout % groups != 0 {
                return Err(TensorError::invalid(
                    "backbone",
                    format!("layer {i}: {cin}->{cout} channels not divisible into {groups} groups"),
                ));
            }
            let cfg = Conv2dConfig::same3x3(groups).with_stride(stride);
            layers.push(ConvLayer::build(
                store,
                rng,
                ConvSpec::new(&format!("{name}.{i}"), cin, cout, 3, cfg),
            ));
            cin = cout;
        }
        Ok(GroupedBackbone {
            in_channels,
            groups,
            layers,
            out_channels: cin,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.cfg.stride).product()
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
    ) -> Result<BackboneOutput> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels {
            return Err(TensorError::shape(
                "backbone",
                "input channels",
                format!("expected {}, got {c}", self.in_channels),
            ));
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, p, h)?;
            h = g.relu(h);
        }
        Ok(BackboneOutput {
            features: h,
            stride: self.stride(),
        })
    }
}

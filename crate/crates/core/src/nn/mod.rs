//! Network building blocks: interphase self-attention, phase-wise
//! deformable alignment, the grouped backbone, channel fusion, and the
//! assembled single-stage detector network.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`] and are generic over the
//! element type, so the same network runs in `f32` for training and `f64`
//! for gradient checks.

mod attention;
mod backbone;
mod dconv;
mod model;

use rand::Rng;

use crate::tensor::{
    init_uniform, Conv2dConfig, Element, Graph, ParamId, ParamStore, Parameter, Result, Tensor, Var,
};

pub use attention::{AttentionConfig, AttentionState, AttentionVars, SelfAttention};
pub use backbone::{BackboneOutput, GroupedBackbone};
pub use dconv::{DeformMode, DeformOutput, OffsetField, PhasewiseDeform, DEFORM_LR_SCALE};
pub use model::{
    Ablation, ForwardOutput, Network, NetworkConfig, SourceSpec, TopologyError, INPUT_MEAN,
    INPUT_STD, PORTAL_PHASE,
};

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Fan-in scaled uniform weights, zero bias.
    FanIn,
    /// All zeros.
    Zero,
}

/// A 2-D convolution with its parameters.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cfg: Conv2dConfig,
}

pub(crate) struct ConvSpec<'a> {
    pub name: &'a str,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub cfg: Conv2dConfig,
    pub bias: bool,
    pub init: Init,
    pub lr_scale: f64,
}

impl<'a> ConvSpec<'a> {
    pub fn new(
        name: &'a str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        cfg: Conv2dConfig,
    ) -> Self {
        ConvSpec {
            name,
            in_channels,
            out_channels,
            kernel,
            cfg,
            bias: true,
            init: Init::FanIn,
            lr_scale: 1.0,
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn lr_scale(mut self, scale: f64) -> Self {
        self.lr_scale = scale;
        self
    }
}

impl ConvLayer {
    pub(crate) fn build<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        spec: ConvSpec<'_>,
    ) -> Self {
        let per_group = spec.in_channels / spec.cfg.groups;
        let shape = [spec.out_channels, per_group, spec.kernel, spec.kernel];
        let weight = match spec.init {
            Init::FanIn => init_uniform(rng, &shape, per_group * spec.kernel * spec.kernel),
            Init::Zero => Tensor::zeros(shape.to_vec()),
        };
        let scale = T::lit(spec.lr_scale);
        let weight = store
            .push(Parameter::new(format!("{}.weight", spec.name), weight).with_lr_scale(scale));
        let bias = spec.bias.then(|| {
            store.push(
                Parameter::new(
                    format!("{}.bias", spec.name),
                    Tensor::zeros(vec![spec.out_channels]),
                )
                .with_lr_scale(scale),
            )
        });
        ConvLayer {
            weight,
            bias,
            cfg: spec.cfg,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.conv2d(
            x,
            p[self.weight.index()],
            self.bias.map(|b| p[b.index()]),
            self.cfg,
        )
    }
}

//! Bottlenecked self-attention over a multiphase feature map.
//!
//! Query, key and value are 1x1 projections of `x`. Query and value are
//! average-pooled by `pool` so every full-resolution location attends over
//! the `N / pool^2` aggregated locations. The gate map `g` is the
//! attention-weighted value at full resolution, projected back to `C`
//! channels and added to the input through the scalar gate `sigma`, which
//! starts at zero so the block is an identity at initialisation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ConvLayer, ConvSpec};
use crate::tensor::{
    Conv2dConfig, Element, Graph, ParamId, ParamStore, Parameter, Result, Tensor, TensorError, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub channels: usize,
    /// Query/key bottleneck width.
    pub qk_channels: usize,
    /// Value bottleneck width.
    pub value_channels: usize,
    /// Spatial pooling factor for query and value.
    pub pool: usize,
}

impl AttentionConfig {
    /// `C/8` query/key and `C/2` value channels.
    pub fn new(channels: usize, pool: usize) -> std::result::Result<Self, TensorError> {
        let cfg = AttentionConfig {
            channels,
            qk_channels: channels / 8,
            value_channels: channels / 2,
            pool,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> std::result::Result<(), TensorError> {
        if self.channels == 0 || !self.channels.is_multiple_of(8) {
            return Err(TensorError::invalid(
                "attention",
                format!(
                    "{} channels: must be a positive multiple of 8",
                    self.channels
                ),
            ));
        }
        if self.qk_channels == 0 || self.value_channels == 0 {
            return Err(TensorError::invalid(
                "attention",
                "bottleneck widths must be positive",
            ));
        }
        if ![1, 2, 4, 8].contains(&self.pool) {
            return Err(TensorError::invalid(
                "attention",
                format!("pool factor {} not in {{1, 2, 4, 8}}", self.pool),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub cfg: AttentionConfig,
    /// Independent attention per channel group (no cross-group mixing).
    pub groups: usize,
    query: ConvLayer,
    key: ConvLayer,
    value: ConvLayer,
    out: ConvLayer,
    pub sigma: ParamId,
}

/// Graph handles of one attention pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// `[B * groups, M, N]`: column `j` is the distribution of location `j`
    /// over the `M` pooled locations (the transpose of the attention map).
    pub weights: Var,
    /// Gate map `g`, `[B, value_channels, H, W]`.
    pub gate: Var,
    /// Projected gate map `o`, `[B, C, H, W]`.
    pub projected: Var,
    /// `sigma * o`, the residual added to the input.
    pub gated: Var,
    pub sigma: Var,
}

/// Materialised attention values for inspection and export.
#[derive(Clone, Debug)]
pub struct AttentionState<T> {
    /// `[B * groups, N, M]`, rows are distributions.
    pub beta: Tensor<T>,
    pub gate_map: Tensor<T>,
    pub projected_gate: Tensor<T>,
    pub gated: Tensor<T>,
    pub sigma: T,
}

impl AttentionVars {
    pub fn state<T: Element>(&self, g: &Graph<T>) -> AttentionState<T> {
        let w = g.value(self.weights);
        let [b, m, n] = [w.shape()[0], w.shape()[1], w.shape()[2]];
        let mut beta = vec![T::zero(); w.numel()];
        for bi in 0..b {
            for i in 0..m {
                for j in 0..n {
                    beta[(bi * n + j) * m + i] = w.data()[(bi * m + i) * n + j];
                }
            }
        }
        AttentionState {
            beta: Tensor::new(vec![b, n, m], beta).expect("beta shape"),
            gate_map: g.value(self.gate).clone(),
            projected_gate: g.value(self.projected).clone(),
            gated: g.value(self.gated).clone(),
            sigma: g.value(self.sigma).item(),
        }
    }
}

impl SelfAttention {
    /// `groups == 1` gives interphase attention; `groups == phases` restricts
    /// projections and attention to each phase's channels.
    pub fn build<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: AttentionConfig,
        groups: usize,
    ) -> std::result::Result<Self, TensorError> {
        cfg.validate()?;
        for (what, c) in [
            ("channels", cfg.channels),
            ("query/key", cfg.qk_channels),
            ("value", cfg.value_channels),
        ] {
            if c % groups != 0 {
                return Err(TensorError::invalid(
                    "attention",
                    format!("{what} width {c} not divisible by {groups} groups"),
                ));
            }
        }
        let pw = Conv2dConfig::default().with_groups(groups);
        let mut proj = |suffix: &str, cin: usize, cout: usize| {
            ConvLayer::build(
                store,
                rng,
                ConvSpec::new(&format!("{name}.{suffix}"), cin, cout, 1, pw).no_bias(),
            )
        };
        let query = proj("query", cfg.channels, cfg.qk_channels);
        let key = proj("key", cfg.channels, cfg.qk_channels);
        let value = proj("value", cfg.channels, cfg.value_channels);
        let out = proj("out", cfg.value_channels, cfg.channels);
        let sigma = store.push(Parameter::new(
            format!("{name}.sigma"),
            Tensor::scalar(T::zero()),
        ));
        Ok(SelfAttention {
            cfg,
            groups,
            query,
            key,
            value,
            out,
            sigma,
        })
    }

    /// Returns `y = sigma * W_o g + x` and the intermediate handles.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
    ) -> Result<(Var, AttentionVars)> {
        let shape = g.shape(x).to_vec();
        let &[b, c, h, w] = shape.as_slice() else {
            return Err(TensorError::shape(
                "attention",
                "rank",
                format!("{shape:?}"),
            ));
        };
        if c != self.cfg.channels {
            return Err(TensorError::shape(
                "attention",
                "channels",
                format!("configured for {}, input has {c}", self.cfg.channels),
            ));
        }
        let gr = self.groups;
        let d = self.cfg.pool;
        let n = h * w;
        let m = h.div_ceil(d) * w.div_ceil(d);
        let (cq, cv) = (self.cfg.qk_channels / gr, self.cfg.value_channels / gr);

        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let q = g.avg_pool2d(q, d)?;
        let v = g.avg_pool2d(v, d)?;
        // Channels of a group are contiguous, so splitting groups into the
        // batch axis is a pure reshape.
        let q = g.reshape(q, [b * gr, cq, m])?;
        let k = g.reshape(k, [b * gr, cq, n])?;
        let v = g.reshape(v, [b * gr, cv, m])?;
        // scores[i, j] = q_i . k_j, normalised over pooled i for each j.
        let scores = g.bmm(q, k, true, false)?;
        let weights = g.softmax(scores, 1)?;
        let gate = g.bmm(v, weights, false, false)?;
        let gate = g.reshape(gate, [b, self.cfg.value_channels, h, w])?;
        let projected = self.out.forward(g, p, gate)?;
        let sigma = p[self.sigma.index()];
        let gated = g.mul_scalar(projected, sigma)?;
        let y = g.add(gated, x)?;
        Ok((
            y,
            AttentionVars {
                weights,
                gate,
                projected,
                gated,
                sigma,
            },
        ))
    }
}

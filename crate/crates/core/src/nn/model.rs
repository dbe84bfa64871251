//! The assembled detector network:
//! stage-1 backbone -> SA1 -> deformable alignment (guided by SA1) ->
//! stage-2 backbone -> SA2 -> 1x1 fusion on both sources -> heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dconv::DeformMode;
use super::{
    AttentionConfig, AttentionVars, ConvLayer, ConvSpec, DeformOutput, GroupedBackbone,
    PhasewiseDeform, SelfAttention,
};
use crate::tensor::{Conv2dConfig, Element, Graph, ParamStore, Result, Tensor, TensorError, Var};

/// Ablation switches. All off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Drop both attention blocks; the offset predictor sees zero guidance.
    pub no_sa: bool,
    /// Replace the deformable layer by a regular grouped convolution.
    pub no_dc: bool,
    /// One offset field shared by all phases.
    pub global_offsets: bool,
    /// Attention restricted to each phase's channels.
    pub no_interphase_attention: bool,
    /// Single-phase input: the portal slices only.
    pub portal_only: bool,
}

impl Ablation {
    pub fn baseline() -> Self {
        Ablation {
            no_sa: true,
            no_dc: true,
            ..Default::default()
        }
    }

    /// Short identifier such as `full` or `no_sa+no_dc`.
    pub fn label(&self) -> String {
        let flags = [
            (self.no_sa, "no_sa"),
            (self.no_dc, "no_dc"),
            (self.global_offsets, "global_offsets"),
            (self.no_interphase_attention, "no_interphase_attention"),
            (self.portal_only, "portal_only"),
        ];
        let on: Vec<&str> = flags.iter().filter(|f| f.0).map(|f| f.1).collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }
}

/// One detection source: its stride, anchor side lengths in pixels and
/// width/height ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub stride: usize,
    pub anchor_sizes: Vec<f64>,
    #[serde(default = "unit_ratio")]
    pub aspect_ratios: Vec<f64>,
}

fn unit_ratio() -> Vec<f64> {
    vec![1.0]
}

impl SourceSpec {
    pub fn new(stride: usize, anchor_sizes: Vec<f64>) -> Self {
        SourceSpec {
            stride,
            anchor_sizes,
            aspect_ratios: unit_ratio(),
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len() * self.aspect_ratios.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub phases: usize,
    pub slices: usize,
    /// Channels of the first and second source maps.
    pub widths: [usize; 2],
    /// Attention pooling factor.
    pub pool: usize,
    pub sources: [SourceSpec; 2],
    pub ablation: Ablation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            phases: 4,
            slices: 3,
            widths: [32, 64],
            pool: 1,
            sources: [
                SourceSpec::new(4, vec![12.0, 17.0]),
                SourceSpec::new(8, vec![24.0, 34.0]),
            ],
            ablation: Ablation::default(),
        }
    }
}

/// Index of the portal phase in the (pre, arterial, portal, delayed) order.
pub const PORTAL_PHASE: usize = 2;

/// Fixed input standardisation: windowed intensities are mapped to
/// `(x - INPUT_MEAN) / INPUT_STD` before the first convolution.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.1;

const STAGE1_STRIDES: [usize; 4] = [1, 2, 2, 1];
const STAGE2_STRIDES: [usize; 2] = [2, 1];

impl NetworkConfig {
    /// Phase groups the network actually sees.
    pub fn groups(&self) -> usize {
        if self.ablation.portal_only {
            1
        } else {
            self.phases
        }
    }

    pub fn input_channels(&self) -> usize {
        self.groups() * self.slices
    }

    /// Channels of the full multiphase image fed to the network.
    pub fn input_range(&self) -> std::ops::Range<usize> {
        if self.ablation.portal_only {
            PORTAL_PHASE * self.slices..(PORTAL_PHASE + 1) * self.slices
        } else {
            0..self.phases * self.slices
        }
    }

    pub fn validate(&self) -> std::result::Result<(), TensorError> {
        let bad = |msg: String| Err(TensorError::invalid("network config", msg));
        if self.phases == 0 || self.slices == 0 {
            return bad("phases and slices must be positive".into());
        }
        for &w in &self.widths {
            if w % 8 != 0 || w % self.phases != 0 {
                return bad(format!(
                    "width {w} must be a multiple of 8 and of the phase count"
                ));
            }
        }
        let s1: usize = STAGE1_STRIDES.iter().product();
        let s2 = s1 * STAGE2_STRIDES.iter().product::<usize>();
        if self.sources[0].stride != s1 || self.sources[1].stride != s2 {
            return bad(format!("source strides must be [{s1}, {s2}]"));
        }
        let positive = |v: &[f64]| !v.is_empty() && v.iter().all(|&a| a > 0.0 && a.is_finite());
        if !self
            .sources
            .iter()
            .all(|s| positive(&s.anchor_sizes) && positive(&s.aspect_ratios))
        {
            return bad("every source needs positive anchor sizes and ratios".into());
        }
        for &w in &self.widths {
            let att = AttentionConfig::new(w, self.pool)?;
            if self.ablation.no_interphase_attention && att.qk_channels % self.groups() != 0 {
                return bad(format!("width {w} too narrow for per-phase attention"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    stage1: GroupedBackbone,
    sa1: Option<SelfAttention>,
    dc: PhasewiseDeform,
    stage2: GroupedBackbone,
    sa2: Option<SelfAttention>,
    fuse: Vec<ConvLayer>,
    cls: Vec<ConvLayer>,
    reg: Vec<ConvLayer>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, anchors, 2]` background/lesion logits.
    pub cls: Var,
    /// `[B, anchors, 4]` encoded box offsets.
    pub reg: Var,
    /// Attention passes in network order (SA1, SA2); empty without attention.
    pub attention: Vec<AttentionVars>,
    /// Output of SA1 (or the stage-1 features when attention is off).
    pub attended: Var,
    /// Guidance fed to the offset predictor.
    pub guidance: Var,
    pub deform: DeformOutput,
    pub sources: [Var; 2],
}

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("parameter count differs: model has {expected}, checkpoint has {found}")]
    Count { expected: usize, found: usize },
    #[error("parameter {index}: model expects {expected_name} {expected_shape:?}, checkpoint has {found_name} {found_shape:?}")]
    Param {
        index: usize,
        expected_name: String,
        expected_shape: Vec<usize>,
        found_name: String,
        found_shape: Vec<usize>,
    },
}

impl Network {
    /// Builds the network and its freshly initialised parameters.
    pub fn build<T: Element>(
        config: NetworkConfig,
        seed: u64,
    ) -> std::result::Result<(Self, ParamStore<T>), TensorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let groups = config.groups();
        let [w1, w2] = config.widths;
        let ab = config.ablation;
        let plan1: Vec<_> = STAGE1_STRIDES.iter().map(|&s| (w1, s)).collect();
        let plan2: Vec<_> = STAGE2_STRIDES.iter().map(|&s| (w2, s)).collect();
        let sa_groups = if ab.no_interphase_attention {
            groups
        } else {
            1
        };

        let stage1 = GroupedBackbone::build(
            &mut store,
            &mut rng,
            "stage1",
            config.input_channels(),
            groups,
            &plan1,
        )?;
        let sa1 = if ab.no_sa {
            None
        } else {
            Some(SelfAttention::build(
                &mut store,
                &mut rng,
                "sa1",
                AttentionConfig::new(w1, config.pool)?,
                sa_groups,
            )?)
        };
        let mode = match (ab.no_dc, ab.global_offsets) {
            (true, _) => DeformMode::Regular,
            (false, true) => DeformMode::Shared,
            (false, false) => DeformMode::Phasewise,
        };
        let dc = PhasewiseDeform::build(&mut store, &mut rng, "dconv", w1, w1, w1, groups, mode)?;
        let stage2 = GroupedBackbone::build(&mut store, &mut rng, "stage2", w1, groups, &plan2)?;
        let sa2 = if ab.no_sa {
            None
        } else {
            Some(SelfAttention::build(
                &mut store,
                &mut rng,
                "sa2",
                AttentionConfig::new(w2, config.pool)?,
                sa_groups,
            )?)
        };
        let (mut fuse, mut cls, mut reg) = (Vec::new(), Vec::new(), Vec::new());
        for (i, (src, c)) in config.sources.iter().zip([w1, w2]).enumerate() {
            let a = src.anchors_per_cell();
            fuse.push(ConvLayer::build(
                &mut store,
                &mut rng,
                ConvSpec::new(&format!("fuse{}", i + 1), c, c, 1, Conv2dConfig::default()),
            ));
            cls.push(ConvLayer::build(
                &mut store,
                &mut rng,
                ConvSpec::new(
                    &format!("head{}.cls", i + 1),
                    c,
                    2 * a,
                    3,
                    Conv2dConfig::same3x3(1),
                ),
            ));
            reg.push(ConvLayer::build(
                &mut store,
                &mut rng,
                ConvSpec::new(
                    &format!("head{}.reg", i + 1),
                    c,
                    4 * a,
                    3,
                    Conv2dConfig::same3x3(1),
                ),
            ));
        }
        Ok((
            Network {
                config,
                stage1,
                sa1,
                dc,
                stage2,
                sa2,
                fuse,
                cls,
                reg,
            },
            store,
        ))
    }

    pub fn attention_blocks(&self) -> impl Iterator<Item = &SelfAttention> {
        self.sa1.iter().chain(self.sa2.iter())
    }

    pub fn deform(&self) -> &PhasewiseDeform {
        &self.dc
    }

    /// Total anchors for an `h x w` input, in output order.
    pub fn anchor_count(&self, h: usize, w: usize) -> usize {
        self.config
            .sources
            .iter()
            .map(|s| h.div_ceil(s.stride) * w.div_ceil(s.stride) * s.anchors_per_cell())
            .sum()
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
    ) -> Result<ForwardOutput> {
        let shift = g.constant(Tensor::full(g.shape(x).to_vec(), T::lit(-INPUT_MEAN)));
        let centered = g.add(x, shift)?;
        let xn = g.scale(centered, T::lit(1.0 / INPUT_STD));
        let f1 = self.stage1.forward(g, p, xn)?.features;
        let mut attention = Vec::new();
        let (attended, guidance) = match &self.sa1 {
            Some(sa) => {
                let (y, vars) = sa.forward(g, p, f1)?;
                attention.push(vars);
                (y, vars.gated)
            }
            None => {
                let zeros = Tensor::zeros(g.shape(f1).to_vec());
                (f1, g.constant(zeros))
            }
        };
        let deform = self.dc.forward(g, p, attended, guidance)?;
        let src1 = g.relu(deform.y);
        let f2 = self.stage2.forward(g, p, src1)?.features;
        let src2 = match &self.sa2 {
            Some(sa) => {
                let (y, vars) = sa.forward(g, p, f2)?;
                attention.push(vars);
                y
            }
            None => f2,
        };
        let b = g.shape(x)[0];
        let (mut cls, mut reg) = (Vec::new(), Vec::new());
        for (i, src) in [src1, src2].into_iter().enumerate() {
            let fused = self.fuse[i].forward(g, p, src)?;
            let fused = g.relu(fused);
            cls.push(head(g, p, &self.cls[i], fused, b, 2)?);
            reg.push(head(g, p, &self.reg[i], fused, b, 4)?);
        }
        Ok(ForwardOutput {
            cls: g.concat(&cls, 1)?,
            reg: g.concat(&reg, 1)?,
            attention,
            attended,
            guidance,
            deform,
            sources: [src1, src2],
        })
    }

    /// Checks that `loaded` has exactly the parameter names and shapes of
    /// `expected`, in order.
    pub fn check_topology<T: Element, U: Element>(
        expected: &ParamStore<T>,
        loaded: &ParamStore<U>,
    ) -> std::result::Result<(), TopologyError> {
        if expected.len() != loaded.len() {
            return Err(TopologyError::Count {
                expected: expected.len(),
                found: loaded.len(),
            });
        }
        for (index, (a, b)) in expected.iter().zip(loaded.iter()).enumerate() {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(TopologyError::Param {
                    index,
                    expected_name: a.name.clone(),
                    expected_shape: a.value.shape().to_vec(),
                    found_name: b.name.clone(),
                    found_shape: b.value.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Copies every parameter of `src` whose name and shape exist in `dst`.
    /// Returns the number copied.
    pub fn share_weights<T: Element>(dst: &mut ParamStore<T>, src: &ParamStore<T>) -> usize {
        let mut n = 0;
        for p in src.iter() {
            if let Some(id) = dst.find(&p.name) {
                let d = dst.get_mut(id);
                if d.value.shape() == p.value.shape() {
                    d.value = p.value.clone();
                    n += 1;
                }
            }
        }
        n
    }
}

/// Applies a head conv and lays its output out as `[B, H * W * A, k]`.
fn head<T: Element>(
    g: &mut Graph<T>,
    p: &[Var],
    conv: &ConvLayer,
    x: Var,
    b: usize,
    k: usize,
) -> Result<Var> {
    let y = conv.forward(g, p, x)?;
    let s = g.shape(y).to_vec();
    let y = g.permute(y, &[0, 2, 3, 1])?;
    g.reshape(y, [b, s[1] / k * s[2] * s[3], k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::randomize;
    use crate::tensor::gradcheck::random_tensor;

    fn small(ablation: Ablation) -> NetworkConfig {
        NetworkConfig {
            widths: [32, 32],
            ablation,
            ..Default::default()
        }
    }

    fn forward<T: Element>(
        net: &Network,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = net.forward(&mut g, &p, xv).unwrap();
        (g.value(out.cls).clone(), g.value(out.reg).clone())
    }

    #[test]
    fn output_layout() {
        let (net, store) = Network::build::<f32>(small(Ablation::default()), 0).unwrap();
        let x = random_tensor::<f32>(&[2, 12, 32, 32], 1);
        let (cls, reg) = forward(&net, &store, &x);
        let anchors = 8 * 8 * 2 + 4 * 4 * 2;
        assert_eq!(net.anchor_count(32, 32), anchors);
        assert_eq!(cls.shape(), &[2, anchors, 2]);
        assert_eq!(reg.shape(), &[2, anchors, 4]);
    }

    #[test]
    fn full_model_equals_baseline_at_init() {
        let (net, store) = Network::build::<f32>(small(Ablation::default()), 2).unwrap();
        let (base, mut base_store) =
            Network::build::<f32>(small(Ablation::baseline()), 99).unwrap();
        assert_eq!(
            Network::share_weights(&mut base_store, &store),
            base_store.len()
        );
        let x = random_tensor::<f32>(&[1, 12, 32, 32], 3);
        let (c1, r1) = forward(&net, &store, &x);
        let (c2, r2) = forward(&base, &base_store, &x);
        assert!(c1.max_abs_diff(&c2) <= 1e-5);
        assert!(r1.max_abs_diff(&r2) <= 1e-5);
    }

    #[test]
    fn ablations_build_and_run() {
        let variants = [
            Ablation {
                no_sa: true,
                ..Default::default()
            },
            Ablation {
                no_dc: true,
                ..Default::default()
            },
            Ablation {
                global_offsets: true,
                ..Default::default()
            },
            Ablation {
                no_interphase_attention: true,
                ..Default::default()
            },
        ];
        for ab in variants {
            let (net, mut store) = Network::build::<f32>(small(ab), 4).unwrap();
            randomize(&mut store, 5, 0.1);
            let (cls, reg) = forward(&net, &store, &random_tensor(&[1, 12, 32, 32], 6));
            assert!(cls.all_finite() && reg.all_finite(), "{}", ab.label());
        }
        let ab = Ablation {
            no_sa: true,
            ..Default::default()
        };
        let (net, _) = Network::build::<f32>(small(ab), 0).unwrap();
        assert_eq!(net.attention_blocks().count(), 0);
    }

    #[test]
    fn portal_only_takes_three_channels() {
        let ab = Ablation {
            portal_only: true,
            ..Default::default()
        };
        let cfg = small(ab);
        assert_eq!(cfg.input_channels(), 3);
        assert_eq!(cfg.input_range(), 6..9);
        let (net, store) = Network::build::<f32>(cfg, 7).unwrap();
        let (cls, _) = forward(&net, &store, &random_tensor(&[1, 3, 16, 16], 8));
        assert_eq!(cls.shape()[1], net.anchor_count(16, 16));
    }

    #[test]
    fn no_interphase_attention_blocks_phase_mixing_in_attention() {
        let ab = Ablation {
            no_interphase_attention: true,
            ..Default::default()
        };
        let (net, store) = Network::build::<f32>(small(ab), 9).unwrap();
        let q = store.find("sa1.query.weight").unwrap();
        // Grouped projection: each output sees only its phase's channels.
        assert_eq!(store.get(q).value.shape(), &[4, 8, 1, 1]);
        assert!(net.attention_blocks().all(|sa| sa.groups == 4));
    }

    #[test]
    fn topology_mismatch_is_reported() {
        let (_, full) = Network::build::<f32>(small(Ablation::default()), 0).unwrap();
        let (_, base) = Network::build::<f32>(small(Ablation::baseline()), 0).unwrap();
        assert!(Network::check_topology(&full, &full).is_ok());
        let err = Network::check_topology(&full, &base).unwrap_err();
        assert!(matches!(err, TopologyError::Count { .. }));
        let (_, wide) = Network::build::<f32>(
            NetworkConfig {
                widths: [24, 32],
                ..small(Ablation::default())
            },
            0,
        )
        .unwrap();
        let err = Network::check_topology(&full, &wide).unwrap_err();
        assert!(err.to_string().contains("stage1.0.weight"));
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetworkConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.widths = [20, 64];
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::default();
        cfg.sources[1].stride = 16;
        assert!(cfg.validate().is_err());
        let cfg = NetworkConfig {
            pool: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let json = r#"{"widths": [32, 64], "bogus": 1}"#;
        assert!(serde_json::from_str::<NetworkConfig>(json).is_err());
    }

    #[test]
    fn gradient_reaches_guidance_through_offset_predictor() {
        // sigma = 0 and a nonzero offset predictor: the guidance node must
        // receive gradient beyond its residual share.
        let (net, mut store) = Network::build::<f64>(small(Ablation::default()), 10).unwrap();
        randomize(&mut store, 11, 0.2);
        for p in store.iter_mut().filter(|p| p.name.ends_with(".sigma")) {
            p.value.data_mut()[0] = 0.0;
        }
        let x = random_tensor::<f64>(&[1, 12, 16, 16], 12);
        let mut g = Graph::new();
        let pv = store.bind(&mut g);
        let xv = g.constant(x);
        let out = net.forward(&mut g, &pv, xv).unwrap();
        let c = g.sum(out.cls);
        let r = g.sum(out.reg);
        let loss = g.add(c, r).unwrap();
        let sa = out.attention[0];
        let grads = g.backward(loss).unwrap();
        let d_gated = grads.get(sa.gated).unwrap();
        let d_resid = grads.get(out.attended).unwrap();
        let via_offsets = d_gated.max_abs_diff(d_resid);
        assert!(via_offsets > 1e-8, "{via_offsets}");
        let d_sigma = grads.get(sa.sigma).unwrap().item();
        assert!(d_sigma.abs() > 0.0);
    }
}

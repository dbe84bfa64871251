//! Phase-wise deformable convolution guided by the attention residual.
//!
//! An offset predictor reads `concat(x, guidance)` and emits one `(dy, dx)`
//! field per phase group and kernel tap. Each phase group of `x` is then
//! sampled on its own deformed grid. The predictor starts at zero, so the
//! module is a regular grouped convolution at initialisation.

use rand::Rng;

use super::{ConvLayer, ConvSpec, Init};
use crate::tensor::{
    Conv2dConfig, DeformConfig, Element, Graph, ParamId, ParamStore, Parameter, Result, Tensor,
    TensorError, Var,
};

/// Learning-rate multiplier for every parameter of the module.
pub const DEFORM_LR_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeformMode {
    /// One offset field per phase.
    Phasewise,
    /// A single field shared by all phases.
    Shared,
    /// No offsets: plain grouped convolution.
    Regular,
}

#[derive(Clone, Debug)]
pub struct PhasewiseDeform {
    pub phases: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub mode: DeformMode,
    weight: ParamId,
    bias: ParamId,
    predictor: Option<ConvLayer>,
}

#[derive(Clone, Copy, Debug)]
pub struct DeformOutput {
    pub y: Var,
    /// `[N, 2 * K * P, H, W]`, absent in regular mode.
    pub offsets: Option<Var>,
}

/// Offsets of one sample: `[2 * K * P, H, W]` with channel `p * 2K + 2k`
/// holding `dy` and the next channel `dx` of tap `k` in phase `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T> {
    pub phases: usize,
    pub taps: usize,
    pub offsets: Tensor<T>,
}

impl<T: Element> OffsetField<T> {
    /// Splits a batched offset tensor into per-sample fields.
    pub fn split(batch: &Tensor<T>, phases: usize) -> Vec<Self> {
        let s = batch.shape();
        let per = batch.numel() / s[0].max(1);
        let taps = s[1] / (2 * phases);
        batch
            .data()
            .chunks(per)
            .map(|c| OffsetField {
                phases,
                taps,
                offsets: Tensor::new(s[1..].to_vec(), c.to_vec()).expect("offset slice"),
            })
            .collect()
    }

    /// Mean displacement length `|(dy, dx)|` over taps and locations, per phase.
    pub fn mean_abs_per_phase(&self) -> Vec<f64> {
        let plane: usize = self.offsets.shape()[1..].iter().product();
        let d = self.offsets.data();
        (0..self.phases)
            .map(|p| {
                let mut acc = 0.0;
                for k in 0..self.taps {
                    let base = (p * 2 * self.taps + 2 * k) * plane;
                    for i in 0..plane {
                        let (dy, dx) = (d[base + i].as_f64(), d[base + plane + i].as_f64());
                        acc += dy.hypot(dx);
                    }
                }
                acc / (self.taps * plane).max(1) as f64
            })
            .collect()
    }
}

impl PhasewiseDeform {
    /// 3x3 deformable convolution from `in_channels` to `out_channels` in
    /// `phases` groups; the predictor expects `guide_channels` extra inputs.
    pub fn build<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        guide_channels: usize,
        phases: usize,
        mode: DeformMode,
    ) -> std::result::Result<Self, TensorError> {
        if phases == 0
            || !in_channels.is_multiple_of(phases)
            || !out_channels.is_multiple_of(phases)
        {
            return Err(TensorError::invalid(
                "phasewise_deform",
                format!(
                    "{in_channels}->{out_channels} channels cannot be split into {phases} phases"
                ),
            ));
        }
        let k = 9;
        let scale = T::lit(DEFORM_LR_SCALE);
        let fan_in = in_channels / phases * k;
        let w =
            crate::tensor::init_uniform(rng, &[out_channels, in_channels / phases, 3, 3], fan_in);
        let weight = store.push(Parameter::new(format!("{name}.weight"), w).with_lr_scale(scale));
        let bias = store.push(
            Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![out_channels]))
                .with_lr_scale(scale),
        );
        let fields = match mode {
            DeformMode::Phasewise => Some(phases),
            DeformMode::Shared => Some(1),
            DeformMode::Regular => None,
        };
        let pred_name = format!("{name}.offset");
        let predictor = fields.map(|f| {
            let spec = ConvSpec::new(
                &pred_name,
                in_channels + guide_channels,
                2 * k * f,
                3,
                Conv2dConfig::same3x3(1),
            )
            .init(Init::Zero)
            .lr_scale(DEFORM_LR_SCALE);
            ConvLayer::build(store, rng, spec)
        });
        Ok(PhasewiseDeform {
            phases,
            in_channels,
            out_channels,
            mode,
            weight,
            bias,
            predictor,
        })
    }

    pub fn offset_predictor(&self) -> Option<&ConvLayer> {
        self.predictor.as_ref()
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        guidance: Var,
    ) -> Result<DeformOutput> {
        let (w, b) = (p[self.weight.index()], p[self.bias.index()]);
        let Some(pred) = &self.predictor else {
            let y = g.conv2d(x, w, Some(b), Conv2dConfig::same3x3(self.phases))?;
            return Ok(DeformOutput { y, offsets: None });
        };
        let guided = g.concat(&[x, guidance], 1)?;
        let mut offsets = pred.forward(g, p, guided)?;
        if self.mode == DeformMode::Shared {
            offsets = g.concat(&vec![offsets; self.phases], 1)?;
        }
        let y = g.deform_conv2d(x, offsets, w, Some(b), DeformConfig::same3x3(self.phases))?;
        Ok(DeformOutput {
            y,
            offsets: Some(offsets),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{randomize, rng};
    use crate::tensor::gradcheck::{gradcheck, random_tensor};

    fn module<T: Element>(mode: DeformMode, seed: u64) -> (ParamStore<T>, PhasewiseDeform) {
        let mut store = ParamStore::new();
        let m = PhasewiseDeform::build(&mut store, &mut rng(seed), "dc", 8, 8, 8, 4, mode).unwrap();
        (store, m)
    }

    fn run<T: Element>(
        store: &ParamStore<T>,
        m: &PhasewiseDeform,
        x: &Tensor<T>,
        guide: &Tensor<T>,
    ) -> (Tensor<T>, Option<Tensor<T>>) {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (xv, gv) = (g.constant(x.clone()), g.constant(guide.clone()));
        let out = m.forward(&mut g, &p, xv, gv).unwrap();
        (
            g.value(out.y).clone(),
            out.offsets.map(|o| g.value(o).clone()),
        )
    }

    #[test]
    fn init_matches_grouped_conv() {
        for seed in 0..5 {
            let (store, m) = module::<f32>(DeformMode::Phasewise, seed);
            let x = random_tensor::<f32>(&[2, 8, 7, 6], seed + 100);
            let guide = random_tensor::<f32>(&[2, 8, 7, 6], seed + 200);
            let (y, off) = run(&store, &m, &x, &guide);
            assert!(off.unwrap().data().iter().all(|&v| v == 0.0));
            let (store_r, m_r) = module::<f32>(DeformMode::Regular, seed);
            assert_eq!(store_r.get(m_r.weight).value, store.get(m.weight).value);
            let (y_r, _) = run(&store_r, &m_r, &x, &guide);
            assert!(y.max_abs_diff(&y_r) <= 1e-5);
        }
    }

    #[test]
    fn unit_shift_on_one_phase() {
        // Offsets of (0, 1) on phase 1 only: that phase sees x shifted left by
        // one pixel, the others are unchanged. Border columns differ through
        // zero padding and are skipped.
        let (store, m) = module::<f64>(DeformMode::Phasewise, 3);
        let (h, w) = (6, 7);
        let x = random_tensor::<f64>(&[1, 8, h, w], 4);
        let mut off = Tensor::<f64>::zeros(vec![1, 72, h, w]);
        for k in 0..9 {
            let ch = 18 + 2 * k + 1;
            for i in 0..h * w {
                off.data_mut()[ch * h * w + i] = 1.0;
            }
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (xv, ov) = (g.constant(x.clone()), g.constant(off));
        let wv = p[m.weight.index()];
        let bv = p[m.bias.index()];
        let y = g
            .deform_conv2d(xv, ov, wv, Some(bv), DeformConfig::same3x3(4))
            .unwrap();
        let y = g.value(y).clone();

        let shifted = Tensor::from_fn(vec![1, 8, h, w], |i| {
            let (c, xx) = (i / (h * w), i % w);
            if (2..4).contains(&c) {
                if xx + 1 < w {
                    x.data()[i + 1]
                } else {
                    0.0
                }
            } else {
                x.data()[i]
            }
        });
        let mut g2 = Graph::new();
        let p2 = store.bind(&mut g2);
        let sv = g2.constant(shifted);
        let yr = g2
            .conv2d(
                sv,
                p2[m.weight.index()],
                Some(p2[m.bias.index()]),
                Conv2dConfig::same3x3(4),
            )
            .unwrap();
        let yr = g2.value(yr).clone();
        for c in 0..8 {
            for yy in 0..h {
                for xx in 1..w - 1 {
                    let (a, b) = (y.at(&[0, c, yy, xx]), yr.at(&[0, c, yy, xx]));
                    assert!((a - b).abs() < 1e-12, "c{c} y{yy} x{xx}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn shared_offsets_replicate_across_phases() {
        let (mut store, m) = module::<f64>(DeformMode::Shared, 5);
        randomize(&mut store, 6, 0.2);
        let x = random_tensor::<f64>(&[1, 8, 5, 5], 7);
        let (_, off) = run(&store, &m, &x, &Tensor::zeros(vec![1, 8, 5, 5]));
        let off = off.unwrap();
        let per = 18 * 25;
        for p in 1..4 {
            assert_eq!(&off.data()[..per], &off.data()[p * per..(p + 1) * per]);
        }
    }

    #[test]
    fn indivisible_phases_rejected() {
        let mut store = ParamStore::<f32>::new();
        assert!(PhasewiseDeform::build(
            &mut store,
            &mut rng(0),
            "dc",
            6,
            8,
            0,
            4,
            DeformMode::Phasewise
        )
        .is_err());
    }

    #[test]
    fn parameters_use_reduced_learning_rate() {
        let (store, _) = module::<f32>(DeformMode::Phasewise, 0);
        assert!(store.iter().all(|p| (p.lr_scale() - 0.1).abs() < 1e-7));
    }

    #[test]
    fn mean_abs_per_phase() {
        let mut t = Tensor::<f64>::zeros(vec![1, 4, 1, 2]);
        // Phase 1 (one tap): dy = 3, dx = 4 everywhere.
        t.data_mut()[4..].copy_from_slice(&[3.0, 3.0, 4.0, 4.0]);
        let f = &OffsetField::split(&t, 2)[0];
        assert_eq!(f.mean_abs_per_phase(), vec![0.0, 5.0]);
    }

    #[test]
    fn gradients_through_offsets_and_guidance() {
        let (mut store, m) = module::<f64>(DeformMode::Phasewise, 8);
        randomize(&mut store, 9, 0.15);
        let x = random_tensor::<f64>(&[1, 8, 4, 4], 10);
        let guide = random_tensor::<f64>(&[1, 8, 4, 4], 11);
        let mut inputs = vec![x, guide];
        inputs.extend(store.iter().map(|p| p.value.clone()));
        let err = gradcheck(&inputs, 1e-4, |g, v| {
            m.forward(g, &v[2..], v[0], v[1]).unwrap().y
        });
        assert!(err < 1e-4, "{err}");
    }
}

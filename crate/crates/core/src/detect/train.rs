//! Training loop: seeded batching, mirror and photometric augmentation,
//! momentum SGD with step decay, CSV logging and checkpoints.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    decode_and_nms, generate_anchors, match_anchors, AnchorError, AnchorSet, BBox, Detection,
    CONF_THRESHOLD, NMS_IOU,
};
use crate::container::FormatError;
use crate::nn::{Network, NetworkConfig, TopologyError};
use crate::phantom::MultiphaseSample;
use crate::tensor::{sgd_step, Checkpoint, Graph, ParamStore, SgdConfig, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Steps from which the rate is multiplied by `decay_factor` once more.
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
    pub log_every: usize,
    pub mirror: bool,
    /// Additive brightness range on normalised intensities.
    pub brightness: f64,
    /// Multiplicative contrast range.
    pub contrast: [f64; 2],
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub neg_ratio: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_steps: vec![1000, 1700],
            decay_factor: 0.1,
            log_every: 10,
            mirror: true,
            brightness: 0.1,
            contrast: [0.9, 1.1],
            pos_iou: super::POS_IOU,
            neg_iou: super::NEG_IOU,
            neg_ratio: super::NEG_RATIO,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("batch_size and log_every must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("lr must be positive, momentum in [0, 1), weight_decay non-negative");
        }
        if !(self.decay_factor > 0.0) || self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay steps must increase and the factor be positive");
        }
        if self.brightness < 0.0
            || !(0.0 < self.contrast[0] && self.contrast[0] <= self.contrast[1])
        {
            return bad("augmentation ranges must be ordered and non-negative");
        }
        if self.pos_iou < self.neg_iou {
            return bad("pos_iou must be at least neg_iou");
        }
        Ok(())
    }

    /// Learning rate used at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.decay_steps
            .iter()
            .filter(|&&s| step >= s)
            .fold(self.lr, |lr, _| lr * self.decay_factor)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    NoData,
    #[error("sample {index}: {msg}")]
    Sample { index: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Anchors(#[from] AnchorError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("checkpoint model description: {0}")]
    Model(String),
    #[error("non-finite loss at step {step} (cls {loss_cls}, reg {loss_reg}, lr {lr}); batch samples {samples:?}")]
    NonFinite {
        step: usize,
        loss_cls: f64,
        loss_reg: f64,
        lr: f64,
        samples: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub lr: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,loss_cls,loss_reg,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.loss_cls, r.loss_reg, r.lr
        ));
    }
    out
}

/// Model description stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInfo {
    pub network: NetworkConfig,
    pub init_seed: u64,
    pub image_size: [usize; 2],
}

pub struct Trainer {
    pub network: Network,
    pub params: ParamStore<f32>,
    pub anchors: AnchorSet,
    pub config: TrainConfig,
    pub info: ModelInfo,
    /// Completed steps.
    pub step: usize,
    pub seed: u64,
    /// One row per completed step since construction.
    pub history: Vec<LogRow>,
}

impl Trainer {
    pub fn new(
        network: NetworkConfig,
        config: TrainConfig,
        image_size: [usize; 2],
        seed: u64,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let (net, params) = Network::build::<f32>(network.clone(), seed)?;
        let anchors = generate_anchors(image_size[0], image_size[1], &network.sources)?;
        Ok(Trainer {
            network: net,
            params,
            anchors,
            config,
            info: ModelInfo {
                network,
                init_seed: seed,
                image_size,
            },
            step: 0,
            seed,
            history: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, config: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        let info: ModelInfo = serde_json::from_value(ckpt.model.clone())
            .map_err(|e| TrainError::Model(e.to_string()))?;
        let mut t = Trainer::new(info.network.clone(), config, info.image_size, seed)?;
        Network::check_topology(&t.params, &ckpt.params)?;
        t.info = info;
        t.params = ckpt.params;
        t.step = ckpt.step as usize;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step as u64,
            model: serde_json::to_value(&self.info).expect("model info serializes"),
            params: self.params.clone(),
        }
    }

    /// Sample indices of batch `step`: the `i`-th sample drawn overall is
    /// entry `i % n` of the permutation for epoch `i / n`.
    pub fn batch_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let b = self.config.batch_size;
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (step * b..(step + 1) * b)
            .map(|i| {
                let epoch = i / n;
                if cached.as_ref().is_none_or(|c| c.0 != epoch) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                    rng.set_stream(1 + epoch as u64);
                    perm.shuffle(&mut rng);
                    cached = Some((epoch, perm));
                }
                cached.as_ref().unwrap().1[i % n]
            })
            .collect()
    }

    /// Runs up to `config.iterations` total steps.
    pub fn train(&mut self, samples: &[MultiphaseSample]) -> Result<(), TrainError> {
        if samples.is_empty() {
            return Err(TrainError::NoData);
        }
        let [h, w] = self.info.image_size;
        for (i, s) in samples.iter().enumerate() {
            if s.size() != (h, w) || s.image.shape()[0] < self.info.network.input_range().end {
                return Err(TrainError::Sample {
                    index: i,
                    msg: format!("image {:?} does not fit a {h}x{w} model", s.image.shape()),
                });
            }
        }
        while self.step < self.config.iterations {
            self.train_step(samples)?;
        }
        Ok(())
    }

    pub fn train_step(&mut self, samples: &[MultiphaseSample]) -> Result<LogRow, TrainError> {
        let step = self.step;
        let idx = self.batch_indices(step, samples.len());
        let mut inputs = Vec::with_capacity(idx.len());
        let mut boxes = Vec::with_capacity(idx.len());
        for (j, &i) in idx.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(u64::MAX - (step * self.config.batch_size + j) as u64);
            let (x, b) = augment(&samples[i], &self.info.network, &self.config, &mut rng);
            inputs.push(x);
            boxes.push(b);
        }
        let matches = boxes
            .iter()
            .map(|b| {
                match_anchors(
                    &self.anchors.anchors,
                    b,
                    self.config.pos_iou,
                    self.config.neg_iou,
                )
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let x = stack(inputs);
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let xv = g.constant(x);
        let out = self.network.forward(&mut g, &bound, xv)?;
        let loss = g.multibox_loss(out.cls, out.reg, &matches, self.config.neg_ratio)?;
        let lr = self.config.lr_at(step);
        if !(loss.cls.is_finite() && loss.reg.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                loss_cls: loss.cls,
                loss_reg: loss.reg,
                lr,
                samples: idx,
            });
        }
        let grads = g.backward(loss.total)?;
        self.params.accumulate(&grads, &bound);
        sgd_step(
            &mut self.params,
            SgdConfig {
                lr,
                momentum: self.config.momentum,
                weight_decay: self.config.weight_decay,
            },
        );
        let row = LogRow {
            step,
            loss_cls: loss.cls,
            loss_reg: loss.reg,
            lr,
        };
        self.history.push(row.clone());
        self.step += 1;
        Ok(row)
    }

    /// Rows kept for the CSV log: every `log_every`-th step and the last.
    pub fn log_rows(&self) -> Vec<LogRow> {
        let last = self.history.last().map(|r| r.step);
        self.history
            .iter()
            .filter(|r| r.step % self.config.log_every == 0 || Some(r.step) == last)
            .cloned()
            .collect()
    }

    pub fn predict(
        &self,
        samples: &[MultiphaseSample],
        batch: usize,
    ) -> Result<Vec<Vec<Detection>>, TrainError> {
        predict(&self.network, &self.params, &self.anchors, samples, batch)
    }
}

/// Network input channels of one sample, `[C, H, W]`.
pub fn select_input(sample: &MultiphaseSample, cfg: &NetworkConfig) -> Vec<f32> {
    let (h, w) = sample.size();
    let r = cfg.input_range();
    sample.image.data()[r.start * h * w..r.end * h * w].to_vec()
}

fn stack(items: Vec<(Vec<f32>, [usize; 3])>) -> Tensor<f32> {
    let shape = items[0].1;
    let mut data = Vec::with_capacity(items.len() * shape.iter().product::<usize>());
    let n = items.len();
    for (d, _) in items {
        data.extend(d);
    }
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], data).expect("batch shape")
}

fn augment<R: Rng>(
    s: &MultiphaseSample,
    cfg: &NetworkConfig,
    tc: &TrainConfig,
    rng: &mut R,
) -> ((Vec<f32>, [usize; 3]), Vec<BBox>) {
    let (h, w) = s.size();
    let mut x = select_input(s, cfg);
    let c = x.len() / (h * w);
    let mut boxes = s.gt_boxes.clone();
    let flip = tc.mirror && rng.gen_bool(0.5);
    let contrast = if tc.contrast[0] < tc.contrast[1] {
        rng.gen_range(tc.contrast[0]..=tc.contrast[1])
    } else {
        tc.contrast[0]
    };
    let bright = if tc.brightness > 0.0 {
        rng.gen_range(-tc.brightness..=tc.brightness)
    } else {
        0.0
    };
    if flip {
        for row in x.chunks_mut(w) {
            row.reverse();
        }
        for b in &mut boxes {
            *b = b.flip_horizontal(w as f64);
        }
    }
    let (a, b) = (contrast as f32, bright as f32);
    for v in &mut x {
        *v = (*v * a + b).clamp(0.0, 1.0);
    }
    ((x, [c, h, w]), boxes)
}

/// Detections per sample after the confidence filter and NMS.
pub fn predict(
    net: &Network,
    params: &ParamStore<f32>,
    anchors: &AnchorSet,
    samples: &[MultiphaseSample],
    batch: usize,
) -> Result<Vec<Vec<Detection>>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let items = chunk
            .iter()
            .map(|s| {
                let (h, w) = s.size();
                let x = select_input(s, &net.config);
                let c = x.len() / (h * w);
                (x, [c, h, w])
            })
            .collect();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let xv = g.constant(stack(items));
        let f = net.forward(&mut g, &bound, xv)?;
        let (cls, reg) = (g.value(f.cls), g.value(f.reg));
        let a = anchors.len();
        for n in 0..chunk.len() {
            let lg: Vec<f64> = cls.data()[n * a * 2..(n + 1) * a * 2]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let rg: Vec<f64> = reg.data()[n * a * 4..(n + 1) * a * 4]
                .iter()
                .map(|&v| v as f64)
                .collect();
            out.push(decode_and_nms(
                &lg,
                &rg,
                &anchors.anchors,
                CONF_THRESHOLD,
                NMS_IOU,
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_sample, MisalignmentSpec, PhantomSpec};

    fn tiny_spec() -> PhantomSpec {
        PhantomSpec {
            size: 32,
            liver_axes: [[10.0, 12.0], [9.0, 11.0]],
            liver_center_jitter: 1.0,
            lesions: [1, 1],
            lesion_radius: [3.0, 4.0],
            distractors: [0, 0],
            distractor_radius: [2.0, 3.0],
            ..Default::default()
        }
    }

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            widths: [16, 16],
            sources: [
                crate::nn::SourceSpec::new(4, vec![6.0]),
                crate::nn::SourceSpec::new(8, vec![12.0]),
            ],
            ..Default::default()
        }
    }

    fn data(n: u64) -> Vec<MultiphaseSample> {
        (0..n)
            .map(|s| generate_sample(&tiny_spec(), &MisalignmentSpec::none(), s).unwrap())
            .collect()
    }

    fn cfg(iters: usize) -> TrainConfig {
        TrainConfig {
            iterations: iters,
            batch_size: 4,
            lr: 1e-2,
            decay_steps: vec![],
            ..Default::default()
        }
    }

    #[test]
    fn schedule_decays_by_tenths() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(999), 1e-3);
        assert_eq!(c.lr_at(1000), 1e-3 * 0.1);
        assert_eq!(c.lr_at(1699), 1e-3 * 0.1);
        assert_eq!(c.lr_at(1700), 1e-3 * 0.1 * 0.1);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let t = Trainer::new(tiny_net(), cfg(1), [32, 32], 3).unwrap();
        let mut seen: Vec<usize> = (0..5)
            .flat_map(|s| t.batch_indices(s, 10))
            .take(20)
            .collect();
        let (first, second) = seen.split_at_mut(10);
        first.sort();
        second.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>().as_slice());
        assert_eq!(second, (0..10).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn loss_decreases_and_repeats() {
        let xs = data(8);
        let run = || {
            let mut t = Trainer::new(tiny_net(), cfg(60), [32, 32], 1).unwrap();
            t.train(&xs).unwrap();
            t.history.clone()
        };
        let a = run();
        let total =
            |r: &[LogRow]| r.iter().map(|x| x.loss_cls + x.loss_reg).sum::<f64>() / r.len() as f64;
        assert!(
            total(&a[50..]) < total(&a[..10]),
            "{} vs {}",
            total(&a[50..]),
            total(&a[..10])
        );
        assert_eq!(log_csv(&a), log_csv(&run()));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let xs = data(6);
        let mut full = Trainer::new(tiny_net(), cfg(6), [32, 32], 2).unwrap();
        full.train(&xs).unwrap();

        let mut first = Trainer::new(tiny_net(), cfg(3), [32, 32], 2).unwrap();
        first.train(&xs).unwrap();
        let mut rest = Trainer::resume(first.checkpoint(), cfg(6), 2).unwrap();
        assert_eq!(rest.step, 3);
        rest.train(&xs).unwrap();
        assert_eq!(&full.history[3..], rest.history.as_slice());
        for (a, b) in full.params.iter().zip(rest.params.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn mirror_flips_boxes() {
        let s = &data(1)[0];
        let tc = TrainConfig {
            brightness: 0.0,
            contrast: [1.0, 1.0],
            ..Default::default()
        };
        let net = tiny_net();
        for seed in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ((x, _), b) = augment(s, &net, &tc, &mut rng);
            if b[0] != s.gt_boxes[0] {
                assert_eq!(b[0], s.gt_boxes[0].flip_horizontal(32.0));
                assert_eq!(x[0], s.image.data()[31]);
            } else {
                assert_eq!(x, s.image.data());
            }
        }
    }

    #[test]
    fn photometric_stays_in_range() {
        let s = &data(1)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ((x, _), _) = augment(s, &tiny_net(), &TrainConfig::default(), &mut rng);
        assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn nan_loss_aborts() {
        let xs = data(4);
        let mut t = Trainer::new(tiny_net(), cfg(2), [32, 32], 0).unwrap();
        let id = t.params.find("head1.reg.bias").unwrap();
        t.params.get_mut(id).value.data_mut()[0] = f32::NAN;
        match t.train(&xs) {
            Err(TrainError::NonFinite {
                step: 0, samples, ..
            }) => assert_eq!(samples.len(), 4),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let c = TrainConfig {
            decay_steps: vec![5, 3],
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn wrong_image_size_rejected() {
        let xs = data(2);
        let mut t = Trainer::new(tiny_net(), cfg(1), [64, 64], 0).unwrap();
        assert!(matches!(
            t.train(&xs),
            Err(TrainError::Sample { index: 0, .. })
        ));
    }

    #[test]
    fn predictions_pass_confidence_filter() {
        let xs = data(3);
        let t = Trainer::new(tiny_net(), cfg(1), [32, 32], 0).unwrap();
        let p = t.predict(&xs, 2).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().flatten().all(|d| d.score >= CONF_THRESHOLD));
    }
}

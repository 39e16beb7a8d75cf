//! Training loop: Adam with a stepped learning-rate schedule, epoch-wise
//! shuffled mini-batches with augmentation, validation with full
//! post-processing, and best-checkpoint tracking with early stopping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::data::{resize_for_net, AugmentConfig, NetSample, Sample};
use crate::error::{Error, Result};
use crate::loss::gdl;
use crate::metrics::{MetricsRecord, MetricsReport};
use crate::model::{build_model, Mode, Model, ModelConfig};
use crate::postprocess::{postprocess_pipeline, BinaryMask};
use crate::rng::{streams, Rng};
use crate::tensor::{backward, no_grad, Shape, Tensor};

/// Epochs without validation improvement before training stops early.
pub const PATIENCE: usize = 30;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Stepped learning rate: `base * gamma^(epoch / step_epochs)`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LRSchedule {
    pub base: f64,
    pub gamma: f64,
    pub step_epochs: usize,
}

impl Default for LRSchedule {
    fn default() -> Self {
        LRSchedule {
            base: 5e-5,
            gamma: 0.1,
            step_epochs: 30,
        }
    }
}

impl LRSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0) {
            return Err(Error::Config("lr.base must be > 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("lr.gamma must be in (0, 1]".into()));
        }
        if self.step_epochs < 1 {
            return Err(Error::Config("lr.step_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Learning rate for a zero-based epoch index.
pub fn lr_at_epoch(s: &LRSchedule, epoch: usize) -> f64 {
    s.base * s.gamma.powi((epoch / s.step_epochs) as i32)
}

/// Adam first/second moments per parameter (keyed by parameter name) plus
/// the shared step counter.
pub struct AdamState {
    pub t: u32,
    slots: BTreeMap<String, AdamSlot>,
}

struct AdamSlot {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState {
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Serialize as named tensors: `adam.t` (step counter as an f32 bit
    /// pattern) plus `adam.m.<param>` / `adam.v.<param>` vectors.
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = vec![NamedTensor {
            name: "adam.t".into(),
            dims: vec![1],
            data: vec![f32::from_bits(self.t)],
        }];
        for (name, slot) in &self.slots {
            out.push(NamedTensor {
                name: format!("adam.m.{name}"),
                dims: vec![slot.m.len() as u32],
                data: slot.m.clone(),
            });
            out.push(NamedTensor {
                name: format!("adam.v.{name}"),
                dims: vec![slot.v.len() as u32],
                data: slot.v.clone(),
            });
        }
        out
    }

    pub fn from_named_tensors(tensors: &[NamedTensor]) -> Result<AdamState> {
        let mut t = None;
        let mut ms: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut vs: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for nt in tensors {
            if nt.name == "adam.t" {
                if nt.data.len() != 1 {
                    return Err(Error::Format("adam.t must hold one value".into()));
                }
                t = Some(nt.data[0].to_bits());
            } else if let Some(p) = nt.name.strip_prefix("adam.m.") {
                ms.insert(p.to_string(), nt.data.clone());
            } else if let Some(p) = nt.name.strip_prefix("adam.v.") {
                vs.insert(p.to_string(), nt.data.clone());
            } else {
                return Err(Error::Format(format!(
                    "unknown optimizer tensor '{}'",
                    nt.name
                )));
            }
        }
        let t = t.ok_or_else(|| Error::Format("missing optimizer tensor 'adam.t'".into()))?;
        let mut slots = BTreeMap::new();
        for (name, m) in ms {
            let v = vs.remove(&name).ok_or_else(|| {
                Error::Format(format!("optimizer tensor 'adam.v.{name}' missing"))
            })?;
            if m.len() != v.len() {
                return Err(Error::Format(format!(
                    "optimizer moments for '{name}' disagree in length"
                )));
            }
            slots.insert(name, AdamSlot { m, v });
        }
        if let Some((name, _)) = vs.into_iter().next() {
            return Err(Error::Format(format!(
                "optimizer tensor 'adam.m.{name}' missing"
            )));
        }
        Ok(AdamState { t, slots })
    }
}

/// One Adam update over named parameters, in place. Gradients are read
/// from the tensors' accumulated gradients; a parameter without a gradient
/// contributes zero. Any non-finite gradient aborts the step before any
/// state is touched.
pub fn adam_step(params: &[(String, Tensor)], state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Training(format!("learning rate must be > 0, got {lr}")));
    }
    let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(params.len());
    for (name, p) in params {
        let g = p.grad();
        if let Some(g) = &g {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient for '{name}'; step aborted"
                )));
            }
        }
        grads.push(g);
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for ((name, p), g) in params.iter().zip(&grads) {
        let n = p.numel();
        let slot = state.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        if slot.m.len() != n {
            return Err(Error::Training(format!(
                "optimizer state for '{name}' has {} entries, parameter has {n}",
                slot.m.len()
            )));
        }
        let zero;
        let g: &[f32] = match g {
            Some(g) => g,
            None => {
                zero = vec![0.0f32; n];
                &zero
            }
        };
        p.update_data(|pd| {
            for i in 0..n {
                let gi = g[i] as f64;
                let m = BETA1 * slot.m[i] as f64 + (1.0 - BETA1) * gi;
                let v = BETA2 * slot.v[i] as f64 + (1.0 - BETA2) * gi * gi;
                slot.m[i] = m as f32;
                slot.v[i] = v as f32;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                pd[i] -= (lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
            }
        });
    }
    Ok(())
}

/// Full training configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub lr: LRSchedule,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            max_epochs: 200,
            seed: 0,
            lr: LRSchedule::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        self.lr.validate()?;
        self.augment.validate()?;
        self.model.validate()
    }
}

/// One history row per completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: MetricsRecord,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<EpochRow>,
}

impl TrainHistory {
    /// CSV with header `epoch,lr,train_loss,val_ja,val_dc,val_sn,val_sp`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_ja,val_dc,val_sn,val_sp\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.lr, r.train_loss, r.val.ja, r.val.dc, r.val.sn, r.val.sp
            ));
        }
        out
    }
}

fn batch_from(samples: &[&NetSample], augment_cfg: &AugmentConfig, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let s0 = samples[0].image.shape();
    let (h, w) = (s0.h, s0.w);
    let n = samples.len();
    let mut xs = Vec::with_capacity(n * 3 * h * w);
    let mut rs = Vec::with_capacity(n * h * w);
    for s in samples {
        let mask = s.mask.as_ref().ok_or_else(|| {
            Error::Contract(format!("training sample '{}' has no mask", s.id))
        })?;
        let (img, msk) = crate::data::augment(&s.image, mask, augment_cfg, rng)?;
        xs.extend_from_slice(&img.data());
        rs.extend(msk.data().iter().map(|&v| v as f32));
    }
    let x = Tensor::from_vec(Shape::new(n, 3, h, w), xs)?;
    let r = Tensor::from_vec(Shape::new(n, 1, h, w), rs)?;
    Ok((x, r))
}

/// One pass over the training set: shuffle, augment, forward, loss,
/// backward, Adam step per mini-batch. Returns the sample-weighted mean
/// loss over the epoch.
pub fn train_epoch(
    model: &Model,
    samples: &[NetSample],
    opt: &mut AdamState,
    lr: f64,
    batch_size: usize,
    augment_cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if batch_size < 1 {
        return Err(Error::Contract("batch_size must be >= 1".into()));
    }
    if model.mode() != Mode::Training {
        return Err(Error::Contract("train_epoch requires training mode".into()));
    }
    let params = model.named_parameters();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut order);
    let mut total = 0.0f64;
    for batch_ids in order.chunks(batch_size) {
        let batch: Vec<&NetSample> = batch_ids.iter().map(|&i| &samples[i]).collect();
        let (x, r) = batch_from(&batch, augment_cfg, rng)?;
        let y = model.forward(&x)?;
        let loss = gdl(&y, &r)?;
        backward(&loss)?;
        adam_step(&params, opt, lr)?;
        model.zero_grad();
        total += loss.item()? as f64 * batch.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// A validation sample: the network-sized input alongside the
/// original-resolution ground truth.
pub struct EvalSample {
    pub id: String,
    pub image: Tensor,
    pub gt: BinaryMask,
}

impl EvalSample {
    pub fn from_sample(s: &Sample, net_size: (usize, usize)) -> Result<EvalSample> {
        let gt = s
            .mask
            .clone()
            .ok_or_else(|| Error::Contract(format!("sample '{}' has no mask", s.id)))?;
        let net = resize_for_net(s, net_size)?;
        Ok(EvalSample {
            id: net.id,
            image: net.image,
            gt,
        })
    }
}

/// Evaluate a prediction function: post-process each probability map to the
/// ground truth's resolution and compare pixel-wise.
pub fn evaluate_with(
    predict: impl Fn(&Tensor) -> Result<Tensor>,
    samples: &[EvalSample],
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let prob = predict(&s.image)?;
        let pred = postprocess_pipeline(&prob, (s.gt.height(), s.gt.width()))?;
        let counts = crate::metrics::confusion(pred.data(), s.gt.data())?;
        per_image.push(MetricsRecord::from_counts(&counts));
    }
    MetricsReport::new(per_image)
}

/// Evaluate a model in inference mode with full post-processing.
pub fn evaluate(model: &Model, samples: &[EvalSample]) -> Result<MetricsReport> {
    if model.mode() != Mode::Inference {
        return Err(Error::Contract("evaluate requires inference mode".into()));
    }
    no_grad(|| evaluate_with(|x| model.forward(x), samples))
}

/// Train to convergence: keeps the checkpoint with the highest mean
/// validation Jaccard, stopping after `PATIENCE` epochs without
/// improvement. Returns the best checkpoint and the full history.
pub fn fit(cfg: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<(Checkpoint, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("train and validation sets must be non-empty".into()));
    }
    let net_size = cfg.model.input_size;
    let train_net: Vec<NetSample> = train
        .iter()
        .map(|s| {
            if s.mask.is_none() {
                return Err(Error::Contract(format!("training sample '{}' has no mask", s.id)));
            }
            resize_for_net(s, net_size)
        })
        .collect::<Result<_>>()?;
    let val_eval: Vec<EvalSample> = val
        .iter()
        .map(|s| EvalSample::from_sample(s, net_size))
        .collect::<Result<_>>()?;

    let mut model = build_model(&cfg.model)?;
    model.set_requires_grad(true);
    let mut opt = AdamState::new();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut stale = 0usize;

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at_epoch(&cfg.lr, epoch);
        let mut rng = Rng::for_stream(cfg.seed, streams::EPOCH + epoch as u64);
        model.set_mode(Mode::Training);
        let train_loss = train_epoch(
            &model,
            &train_net,
            &mut opt,
            lr,
            cfg.batch_size,
            &cfg.augment,
            &mut rng,
        )?;
        model.set_mode(Mode::Inference);
        let report = evaluate(&model, &val_eval)?;
        history.rows.push(EpochRow {
            epoch,
            lr,
            train_loss,
            val: report.mean.clone(),
        });
        let improved = best.as_ref().map_or(true, |(ja, _)| report.mean.ja > *ja);
        if improved {
            let ck = Checkpoint::from_model(&model, Some(opt.to_named_tensors()), epoch as u32);
            best = Some((report.mean.ja, ck));
            stale = 0;
        } else {
            stale += 1;
            if stale >= PATIENCE {
                break;
            }
        }
    }
    let (_, ck) = best.expect("at least one epoch ran");
    Ok((ck, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{elementwise_mul, sum_all};

    #[test]
    fn lr_schedule_matches_step_rule() {
        let s = LRSchedule::default();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
        assert!(close(lr_at_epoch(&s, 0), 5e-5));
        assert!(close(lr_at_epoch(&s, 29), 5e-5));
        assert!(close(lr_at_epoch(&s, 30), 5e-6));
        assert!(close(lr_at_epoch(&s, 60), 5e-7));
    }

    #[test]
    fn lr_schedule_is_piecewise_constant_and_non_increasing() {
        let s = LRSchedule::default();
        let mut prev = f64::INFINITY;
        for e in 0..200 {
            let lr = lr_at_epoch(&s, e);
            assert!(lr <= prev);
            if e % 30 != 0 {
                assert_eq!(lr, lr_at_epoch(&s, e - 1), "jump inside a step at {e}");
            }
            prev = lr;
        }
    }

    #[test]
    fn lr_schedule_validation() {
        let mut s = LRSchedule::default();
        s.base = 0.0;
        assert!(s.validate().is_err());
        let mut s = LRSchedule::default();
        s.gamma = 1.5;
        assert!(s.validate().is_err());
        let mut s = LRSchedule::default();
        s.step_epochs = 0;
        assert!(s.validate().is_err());
        assert!(LRSchedule::default().validate().is_ok());
    }

    /// Backpropagate so `p` receives gradient `g` elementwise.
    fn give_grad(p: &Tensor, g: &[f32]) {
        let w = Tensor::from_vec(p.shape(), g.to_vec()).unwrap();
        let loss = sum_all(&elementwise_mul(p, &w).unwrap());
        backward(&loss).unwrap();
    }

    #[test]
    fn adam_first_step_is_minus_lr_times_sign() {
        let p = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap().tracked();
        give_grad(&p, &[1.0]);
        let mut st = AdamState::new();
        adam_step(&[("p".into(), p.clone())], &mut st, 0.1).unwrap();
        let got = p.to_vec()[0];
        // m_hat = g, v_hat = g^2: step = lr * g / (|g| + eps) ~ lr.
        assert!((got - 0.9).abs() < 1e-6, "{got}");
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let p = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.25, -4.0]).unwrap().tracked();
        give_grad(&p, &[0.0, 0.0]);
        let mut st = AdamState::new();
        adam_step(&[("p".into(), p.clone())], &mut st, 0.1).unwrap();
        assert_eq!(p.to_vec(), vec![0.25, -4.0]);
        // A parameter with no gradient at all is also untouched.
        let q = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![7.0]).unwrap().tracked();
        adam_step(&[("q".into(), q.clone())], &mut st, 0.1).unwrap();
        assert_eq!(q.to_vec(), vec![7.0]);
    }

    #[test]
    fn adam_equal_gradients_give_equal_updates() {
        let p = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![2.0]).unwrap().tracked();
        let q = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![5.0]).unwrap().tracked();
        give_grad(&p, &[0.37]);
        give_grad(&q, &[0.37]);
        let mut st = AdamState::new();
        adam_step(
            &[("p".into(), p.clone()), ("q".into(), q.clone())],
            &mut st,
            0.05,
        )
        .unwrap();
        let dp = 2.0 - p.to_vec()[0];
        let dq = 5.0 - q.to_vec()[0];
        // Identical in exact arithmetic; allow one f32 ulp at magnitude 5
        // from the in-place parameter subtraction.
        assert!((dp - dq).abs() < 1e-6, "dp={dp} dq={dq}");
        assert!(dp > 0.0);
    }

    #[test]
    fn adam_rejects_non_finite_gradients_before_mutating() {
        let p = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap().tracked();
        give_grad(&p, &[f32::NAN, 1.0]);
        let mut st = AdamState::new();
        let err = adam_step(&[("p".into(), p.clone())], &mut st, 0.1).unwrap_err();
        match err {
            Error::Training(msg) => assert!(msg.contains("p"), "{msg}"),
            other => panic!("expected training error, got {other:?}"),
        }
        assert_eq!(p.to_vec(), vec![1.0, 2.0]);
        assert_eq!(st.t, 0);
        assert!(st.slots.is_empty());
    }

    #[test]
    fn adam_state_round_trips_through_named_tensors() {
        let p = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap().tracked();
        give_grad(&p, &[0.1, -0.2, 0.3]);
        let mut st = AdamState::new();
        adam_step(&[("layer.w".into(), p.clone())], &mut st, 0.01).unwrap();
        let tensors = st.to_named_tensors();
        let back = AdamState::from_named_tensors(&tensors).unwrap();
        assert_eq!(back.t, st.t);
        assert_eq!(back.slots.len(), st.slots.len());
        for (name, slot) in &st.slots {
            let b = &back.slots[name];
            assert_eq!(slot.m, b.m);
            assert_eq!(slot.v, b.v);
        }
        // Unknown names are rejected.
        let bogus = vec![NamedTensor {
            name: "sgd.momentum".into(),
            dims: vec![1],
            data: vec![0.0],
        }];
        assert!(matches!(
            AdamState::from_named_tensors(&bogus),
            Err(Error::Format(_))
        ));
    }

    // ---- end-to-end pieces on a miniature model ----

    use crate::model::PPMConfig;
    use image::RgbImage;

    fn mini_model_config(seed: u64) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            input_size: (32, 32),
            encoder_stage_channels: vec![4, 6, 8, 10, 10],
            decoder_channels: vec![8, 6, 4, 4],
            ppm: PPMConfig {
                bins: vec![1, 2],
                branch_channels: 4,
                fused: true,
            },
            decoder_dilation: 2,
            seed,
        }
    }

    fn no_augment() -> AugmentConfig {
        AugmentConfig {
            hflip_p: 0.0,
            vflip_p: 0.0,
            rotation_deg: 0.0,
            zoom_lo: 1.0,
            zoom_hi: 1.0,
        }
    }

    /// A sample with a dark centered blob on a light background.
    fn blob_sample(id: &str, h: u32, w: u32, cx: f32, cy: f32, r: f32) -> Sample {
        let img = RgbImage::from_fn(w, h, |x, y| {
            let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
            if d < r {
                image::Rgb([80, 60, 60])
            } else {
                image::Rgb([200, 170, 160])
            }
        });
        let mask_data: Vec<u8> = (0..h * w)
            .map(|i| {
                let (x, y) = ((i % w) as f32, (i / w) as f32);
                (((x - cx).powi(2) + (y - cy).powi(2)).sqrt() < r) as u8
            })
            .collect();
        let mask = BinaryMask::new(h as usize, w as usize, mask_data).unwrap();
        Sample::new(id.to_string(), img, Some(mask)).unwrap()
    }

    fn mini_train_set() -> Vec<Sample> {
        vec![
            blob_sample("a", 32, 32, 16.0, 14.0, 7.0),
            blob_sample("b", 32, 32, 10.0, 18.0, 6.0),
            blob_sample("c", 32, 32, 20.0, 20.0, 8.0),
        ]
    }

    fn net_samples(samples: &[Sample]) -> Vec<NetSample> {
        samples.iter().map(|s| resize_for_net(s, (32, 32)).unwrap()).collect()
    }

    #[test]
    fn train_epoch_step_count_follows_batching() {
        let cfg = mini_model_config(1);
        let mut model = build_model(&cfg).unwrap();
        model.set_requires_grad(true);
        model.set_mode(Mode::Training);
        // 3 samples, batch 2: two steps (2 + 1).
        let samples = net_samples(&mini_train_set());
        let mut opt = AdamState::new();
        let mut rng = Rng::for_stream(0, streams::EPOCH);
        train_epoch(&model, &samples, &mut opt, 1e-4, 2, &no_augment(), &mut rng).unwrap();
        assert_eq!(opt.t, 2);
        // Batch 3 on the same set: one more step.
        let mut rng = Rng::for_stream(0, streams::EPOCH + 1);
        train_epoch(&model, &samples, &mut opt, 1e-4, 3, &no_augment(), &mut rng).unwrap();
        assert_eq!(opt.t, 3);
    }

    #[test]
    fn train_epoch_is_deterministic() {
        let run = || {
            let cfg = mini_model_config(5);
            let mut model = build_model(&cfg).unwrap();
            model.set_requires_grad(true);
            model.set_mode(Mode::Training);
            let samples = net_samples(&mini_train_set());
            let mut opt = AdamState::new();
            let mut losses = Vec::new();
            for epoch in 0..3u64 {
                let mut rng = Rng::for_stream(9, streams::EPOCH + epoch);
                losses.push(
                    train_epoch(&model, &samples, &mut opt, 1e-3, 2, &AugmentConfig::default(), &mut rng)
                        .unwrap(),
                );
            }
            losses
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn train_epoch_requires_training_mode_and_masks() {
        let cfg = mini_model_config(2);
        let mut model = build_model(&cfg).unwrap();
        model.set_mode(Mode::Inference);
        let samples = net_samples(&mini_train_set());
        let mut opt = AdamState::new();
        let mut rng = Rng::for_stream(0, streams::EPOCH);
        assert!(matches!(
            train_epoch(&model, &samples, &mut opt, 1e-4, 2, &no_augment(), &mut rng),
            Err(Error::Contract(_))
        ));
        model.set_mode(Mode::Training);
        model.set_requires_grad(true);
        let mut unmasked = net_samples(&mini_train_set());
        unmasked[1].mask = None;
        assert!(matches!(
            train_epoch(&model, &unmasked, &mut opt, 1e-4, 2, &no_augment(), &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn repeated_steps_on_one_sample_decrease_loss() {
        let cfg = mini_model_config(3);
        let mut model = build_model(&cfg).unwrap();
        model.set_requires_grad(true);
        model.set_mode(Mode::Training);
        let samples = net_samples(&mini_train_set()[..1]);
        let mut opt = AdamState::new();
        let mut losses = Vec::new();
        for epoch in 0..10u64 {
            let mut rng = Rng::for_stream(0, streams::EPOCH + epoch);
            losses.push(
                train_epoch(&model, &samples, &mut opt, 3e-4, 1, &no_augment(), &mut rng).unwrap(),
            );
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "loss did not decrease: {losses:?}");
        }
    }

    #[test]
    fn evaluate_perfect_and_empty_predictors() {
        let samples: Vec<EvalSample> = mini_train_set()
            .iter()
            .map(|s| EvalSample::from_sample(s, (32, 32)).unwrap())
            .collect();
        // Perfect predictor: hand back the ground truth as probabilities.
        let gts: Vec<Tensor> = mini_train_set()
            .iter()
            .map(|s| s.mask.as_ref().unwrap().to_tensor())
            .collect();
        let i = std::cell::Cell::new(0usize);
        let report = evaluate_with(
            |_| {
                let t = gts[i.get()].clone();
                i.set(i.get() + 1);
                Ok(t)
            },
            &samples,
        )
        .unwrap();
        assert_eq!(report.mean.ja, 1.0);
        assert_eq!(report.mean.dc, 1.0);
        assert_eq!(report.mean.sn, 1.0);
        assert_eq!(report.mean.sp, 1.0);
        // All-background predictor: SN = 0, SP = 1.
        let report = evaluate_with(
            |x| {
                let s = x.shape();
                Ok(Tensor::zeros(Shape::new(1, 1, s.h, s.w)))
            },
            &samples,
        )
        .unwrap();
        assert_eq!(report.mean.sn, 0.0);
        assert_eq!(report.mean.sp, 1.0);
        assert_eq!(report.mean.ja, 0.0);
    }

    #[test]
    fn evaluate_agrees_with_pixel_counting_oracle() {
        // Random stub predictions at ground-truth resolution; compare the
        // report against direct pixel counting of the post-processed masks.
        let samples: Vec<EvalSample> = mini_train_set()
            .iter()
            .map(|s| EvalSample::from_sample(s, (32, 32)).unwrap())
            .collect();
        let mut rng0 = Rng::for_stream(77, 0);
        let n = samples.len();
        let probs: Vec<Tensor> = (0..20)
            .flat_map(|_| (0..n).collect::<Vec<_>>())
            .map(|_| {
                let vals: Vec<f32> = (0..32 * 32).map(|_| rng0.u01()).collect();
                Tensor::from_vec(Shape::new(1, 1, 32, 32), vals).unwrap()
            })
            .collect();
        for round in 0..20 {
            let slice = &probs[round * n..(round + 1) * n];
            let idx = std::cell::Cell::new(0usize);
            let report = evaluate_with(
                |_| {
                    let t = slice[idx.get()].clone();
                    idx.set(idx.get() + 1);
                    Ok(t)
                },
                &samples,
            )
            .unwrap();
            // Oracle: recompute metrics by counting pixels directly.
            let mut ja_sum = 0.0;
            for (s, p) in samples.iter().zip(slice) {
                let pred = postprocess_pipeline(p, (s.gt.height(), s.gt.width())).unwrap();
                let (mut tp, mut fp, mut f_n) = (0u64, 0u64, 0u64);
                for (a, b) in pred.data().iter().zip(s.gt.data()) {
                    match (a, b) {
                        (1, 1) => tp += 1,
                        (1, 0) => fp += 1,
                        (0, 1) => f_n += 1,
                        _ => {}
                    }
                }
                ja_sum += if tp + fp + f_n == 0 { 1.0 } else { tp as f64 / (tp + fp + f_n) as f64 };
            }
            assert!((report.mean.ja - ja_sum / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_runs_tracks_best_and_is_reproducible() {
        let samples = mini_train_set();
        let cfg = TrainConfig {
            batch_size: 2,
            max_epochs: 3,
            seed: 4,
            lr: LRSchedule {
                base: 1e-3,
                ..LRSchedule::default()
            },
            augment: no_augment(),
            model: mini_model_config(4),
        };
        let (ck_a, hist_a) = fit(&cfg, &samples, &samples).unwrap();
        assert_eq!(hist_a.rows.len(), 3);
        // Best checkpoint's Jaccard equals the running maximum.
        let best_ja = hist_a.rows.iter().map(|r| r.val.ja).fold(f64::MIN, f64::max);
        let best_row = hist_a.rows.iter().find(|r| r.val.ja == best_ja).unwrap();
        assert_eq!(ck_a.epoch as usize, best_row.epoch);
        // Reproducible: bit-identical history and checkpoint bytes.
        let (ck_b, hist_b) = fit(&cfg, &samples, &samples).unwrap();
        assert_eq!(hist_a.to_csv(), hist_b.to_csv());
        assert_eq!(ck_a.to_bytes(), ck_b.to_bytes());
    }

    #[test]
    fn fit_single_epoch_yields_single_row() {
        let samples = mini_train_set();
        let cfg = TrainConfig {
            batch_size: 3,
            max_epochs: 1,
            seed: 1,
            lr: LRSchedule::default(),
            augment: no_augment(),
            model: mini_model_config(1),
        };
        let (ck, hist) = fit(&cfg, &samples, &samples).unwrap();
        assert_eq!(hist.rows.len(), 1);
        assert_eq!(ck.epoch, 0);
        assert!(ck.optimizer.is_some());
    }

    #[test]
    fn fit_rejects_empty_splits_and_missing_masks() {
        let samples = mini_train_set();
        let cfg = TrainConfig {
            batch_size: 2,
            max_epochs: 1,
            seed: 0,
            lr: LRSchedule::default(),
            augment: no_augment(),
            model: mini_model_config(0),
        };
        assert!(matches!(fit(&cfg, &[], &samples), Err(Error::Contract(_))));
        assert!(matches!(fit(&cfg, &samples, &[]), Err(Error::Contract(_))));
        let mut unmasked = mini_train_set();
        unmasked[0].mask = None;
        assert!(matches!(fit(&cfg, &unmasked, &samples), Err(Error::Contract(_))));
        assert!(matches!(fit(&cfg, &samples, &unmasked), Err(Error::Contract(_))));
    }

    #[test]
    fn history_csv_shape() {
        let hist = TrainHistory {
            rows: vec![EpochRow {
                epoch: 0,
                lr: 5e-5,
                train_loss: 0.75,
                val: MetricsRecord {
                    ja: 0.5,
                    dc: 2.0 / 3.0,
                    sn: 0.25,
                    sp: 1.0,
                    thresholded_ja: 0.0,
                },
            }],
        };
        let csv = hist.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,lr,train_loss,val_ja,val_dc,val_sn,val_sp");
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,0.00005,0.75,0.5,"), "{row}");
        assert_eq!(lines.next(), None);
    }
}

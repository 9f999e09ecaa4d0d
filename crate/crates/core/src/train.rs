//! Training loop: MSE + L1 loss, Adam, parameter occlusion and per-epoch
//! RMSE tracking.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_window, AugmentConfig, AugmentContext, AugmentRecord};
use crate::dataset::image::{IMAGENET_MEAN, IMAGENET_STD};
use crate::dataset::{GeneralizedState, MixedSplit, Normalizer, SampleWindow, TrainMode, STATE_DIM, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::nn::checkpoint::digest_hex;
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{ParamId, ParamKind, ParamStore};
use crate::nn::{Checkpoint, CheckpointMeta, Model, ModelSpec, Tensor};
use crate::rng;

pub const ADAM_EPS: f64 = 1e-8;
const EVAL_BATCH: usize = 64;

/// Named state-slot groups that can be zeroed out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OcclusionGroup {
    /// Force sensor.
    FS,
    /// Robot position.
    RP,
    /// Robot joints.
    RQ,
    /// Robot (haptic) command.
    RC,
}

impl OcclusionGroup {
    pub const ALL: [OcclusionGroup; 4] = [Self::FS, Self::RP, Self::RQ, Self::RC];

    pub const fn slots(self) -> Range<usize> {
        match self {
            Self::FS => 47..53,
            Self::RP => 0..3,
            Self::RQ => 13..20,
            Self::RC => 27..47,
        }
    }
}

impl std::str::FromStr for OcclusionGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FS" => Ok(Self::FS),
            "RP" => Ok(Self::RP),
            "RQ" => Ok(Self::RQ),
            "RC" => Ok(Self::RC),
            _ => Err(Error::config("occlusion", format!("unknown group `{s}` (expected FS, RP, RQ or RC)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OcclusionMask {
    pub groups: BTreeSet<OcclusionGroup>,
}

impl OcclusionMask {
    pub fn new(groups: impl IntoIterator<Item = OcclusionGroup>) -> Self {
        Self {
            groups: groups.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn contains(&self, slot: usize) -> bool {
        self.groups.iter().any(|g| g.slots().contains(&slot))
    }

    pub fn apply(&self, s: &mut GeneralizedState) {
        for g in &self.groups {
            s.0[g.slots()].fill(0.0);
        }
    }
}

pub fn occlude(state: &GeneralizedState, mask: &OcclusionMask) -> GeneralizedState {
    let mut s = *state;
    mask.apply(&mut s);
    s
}

fn default_epochs() -> usize {
    100
}
fn default_lr() -> f64 {
    2e-4
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_l1() -> f64 {
    1e-5
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    /// L1 coefficient on weight matrices.
    #[serde(default = "default_l1")]
    pub l1: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default)]
    pub occlusion: OcclusionMask,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Keep augmented windows whose IK failed instead of falling back to the original.
    #[serde(default)]
    pub keep_flagged: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            learning_rate: default_lr(),
            betas: default_betas(),
            l1: default_l1(),
            batch_size: default_batch(),
            seed: 0,
            mode: TrainMode::Rand,
            occlusion: OcclusionMask::default(),
            augment: AugmentConfig::default(),
            keep_flagged: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        for (i, b) in self.betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return Err(Error::config(format!("betas[{i}]"), format!("must be in [0, 1), got {b}")));
            }
        }
        if !(self.l1.is_finite() && self.l1 >= 0.0) {
            return Err(Error::config("l1", format!("must be >= 0, got {}", self.l1)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        self.augment.validate()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest_hex(self.to_json().to_string().as_bytes())
    }
}

/// Mean squared error plus `lambda · l1_sum`, computed directly.
pub fn loss_value(pred: &[f64], target: &[f64], l1_sum: f64, lambda: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(mse + lambda * l1_sum)
}

/// Training loss on the graph: MSE over batch and axes, plus L1 on weight matrices.
pub fn loss<T: crate::nn::Real>(g: &mut Graph<'_, T>, pred: Var, target: Var, lambda: f64) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            g.shape(pred),
            g.shape(target)
        )));
    }
    let d = g.sub(pred, target);
    let sq = g.mul(d, d);
    let mse = g.mean(sq);
    if lambda == 0.0 {
        return Ok(mse);
    }
    let weights: Vec<ParamId> = g
        .store()
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight)
        .map(|(id, _)| id)
        .collect();
    let mut terms = Vec::with_capacity(weights.len());
    for id in weights {
        let w = g.param(id);
        terms.push(g.abs_sum(w));
    }
    let Some(mut l1) = terms.first().copied() else {
        return Ok(mse);
    };
    for &t in &terms[1..] {
        l1 = g.add(l1, t);
    }
    let l1 = g.scale(l1, lambda);
    Ok(g.add(mse, l1))
}

/// Adam with bias correction; moments are kept in double precision.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: crate::nn::Real>(store: &ParamStore<T>, lr: f64, betas: [f64; 2]) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            lr,
            beta1: betas[0],
            beta2: betas[1],
            eps: ADAM_EPS,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step<T: crate::nn::Real>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            if !store.get(*id).trainable() {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = store.value_mut(*id);
            for (((wi, gi), mi), vi) in w.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *wi = T::from_f64(wi.as_f64() - update);
            }
        }
    }
}

/// Model-ready tensors for a batch of windows.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[b, f, 3, s, s]`, ImageNet-normalized; absent for state-only models.
    pub frames: Option<Tensor<f32>>,
    /// `[b, 5, 54]`, occluded then normalized.
    pub states: Tensor<f32>,
    /// `[b, 3]` in newtons.
    pub targets: Tensor<f32>,
}

/// Occlusion, state normalization and image normalization for one model.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    pub normalizer: Normalizer,
    pub mask: OcclusionMask,
    pub frames_used: usize,
    pub image_size: usize,
}

impl Preprocessor {
    pub fn new(spec: &ModelSpec, normalizer: Normalizer, mask: OcclusionMask) -> Self {
        Self {
            normalizer,
            mask,
            frames_used: spec.variant.frames_used(),
            image_size: spec.image_size,
        }
    }

    pub fn state(&self, s: &GeneralizedState) -> GeneralizedState {
        self.normalizer.apply(&occlude(s, &self.mask))
    }

    pub fn batch(&self, windows: &[&SampleWindow]) -> Result<Batch> {
        let b = windows.len();
        let mut states = Vec::with_capacity(b * WINDOW_LEN * STATE_DIM);
        let mut targets = Vec::with_capacity(b * 3);
        for w in windows {
            for s in &w.states {
                states.extend(self.state(s).0.iter().map(|&v| v as f32));
            }
            targets.extend(w.target.iter().map(|&v| v as f32));
        }
        let frames = if self.frames_used > 0 {
            let s = self.image_size;
            let f = self.frames_used;
            let mut data = Vec::with_capacity(b * f * 3 * s * s);
            for w in windows {
                for img in &w.frames[WINDOW_LEN - f..] {
                    if img.size != s {
                        return Err(Error::config(
                            "image_size",
                            format!("model expects {s}px frames, data has {}px", img.size),
                        ));
                    }
                    for (c, plane) in img.data.chunks_exact(s * s).enumerate() {
                        data.extend(plane.iter().map(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]));
                    }
                }
            }
            Some(Tensor {
                shape: vec![b, f, 3, s, s],
                data,
            })
        } else {
            None
        };
        Ok(Batch {
            frames,
            states: Tensor {
                shape: vec![b, WINDOW_LEN, STATE_DIM],
                data: states,
            },
            targets: Tensor {
                shape: vec![b, 3],
                data: targets,
            },
        })
    }
}

/// Eval-mode predictions for a list of windows, in order.
pub fn predict_windows(model: &Model, pre: &Preprocessor, windows: &[&SampleWindow]) -> Result<Vec<Vec3>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_BATCH) {
        let batch = pre.batch(chunk)?;
        let y = model.predict(batch.frames.as_ref(), &batch.states)?;
        out.extend(y.data.chunks_exact(3).map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)));
    }
    Ok(out)
}

/// Root mean squared error over all components.
fn window_rmse(model: &Model, pre: &Preprocessor, windows: &[&SampleWindow]) -> Result<f64> {
    let pred = predict_windows(model, pre, windows)?;
    let sq: f64 = pred
        .iter()
        .zip(windows)
        .map(|(p, w)| (p - w.target).norm_squared())
        .sum();
    Ok((sq / (3 * windows.len().max(1)) as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_rmse: f64,
    pub test_rmse: f64,
    pub mean_loss: f64,
    pub steps: usize,
}

pub fn write_loss_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_rmse", "test_rmse"])?;
    for r in curve {
        w.write_record([r.epoch.to_string(), r.train_rmse.to_string(), r.test_rmse.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Augmentation context per dataset name.
pub type AugmentContexts = BTreeMap<String, AugmentContext>;

fn dataset_of(clip: &str) -> &str {
    clip.split_once('/').map_or(clip, |(d, _)| d)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentLogEntry {
    pub epoch: usize,
    pub window: usize,
    pub record: AugmentRecord,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub preprocessor: Preprocessor,
    pub curve: Vec<EpochRecord>,
    pub steps: usize,
    /// Augmented windows replaced by their originals after an IK failure.
    pub flagged: usize,
    pub augment_log: Vec<AugmentLogEntry>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            CheckpointMeta {
                spec: self.model.spec().clone(),
                normalizer: Some(self.preprocessor.normalizer.clone()),
                config_digest: cfg.digest(),
                config: cfg.to_json(),
            },
        )
    }
}

/// Normalizer fitted on the occluded states of the training windows.
pub fn fit_occluded_normalizer(windows: &[SampleWindow], mask: &OcclusionMask) -> Result<Normalizer> {
    let states: Vec<GeneralizedState> = windows
        .iter()
        .flat_map(|w| w.states.iter().map(|s| occlude(s, mask)))
        .collect();
    Normalizer::fit(states.iter())
}

pub fn train(spec: &ModelSpec, split: &MixedSplit, contexts: &AugmentContexts, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(spec, split, contexts, cfg, &mut |_| {})
}

/// Deterministic for a fixed seed: shuffles, augmentation draws and
/// initialization all come from streams derived from `cfg.seed`.
pub fn train_with_progress(
    spec: &ModelSpec,
    split: &MixedSplit,
    contexts: &AugmentContexts,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if split.train.is_empty() {
        return Err(Error::config("mode", "empty train partition"));
    }
    let normalizer = fit_occluded_normalizer(&split.train, &cfg.occlusion)?;
    let pre = Preprocessor::new(spec, normalizer, cfg.occlusion.clone());
    let mut model = Model::new(spec, cfg.seed)?;
    let mut adam = Adam::new(&model.params, cfg.learning_rate, cfg.betas);

    let train_refs: Vec<&SampleWindow> = split.train.iter().collect();
    let test_refs: Vec<&SampleWindow> = split.test_windows().collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut log = Vec::new();
    let mut steps = 0usize;
    let mut flagged = 0usize;
    let augmenting = cfg.augment.kinematic > 0.0 || cfg.augment.photometric > 0.0;

    for epoch in 0..cfg.epochs {
        let order = split.epoch_order(cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            // Batch-norm statistics need at least two rows.
            if idx.len() < 2 && order.len() >= 2 {
                continue;
            }
            let windows: Vec<Arc<SampleWindow>> = if augmenting {
                let results = idx
                    .par_iter()
                    .map(|&i| {
                        let w = &split.train[i];
                        let ctx = contexts.get(dataset_of(&w.clip));
                        let mut r = rng::stream(cfg.seed, &[rng::label("augment"), epoch as u64, i as u64]);
                        augment_window(w, ctx, &cfg.augment, &mut r)
                    })
                    .collect::<Result<Vec<_>>>()?;
                results
                    .into_iter()
                    .zip(idx)
                    .map(|((aug, record), &i)| {
                        log.push(AugmentLogEntry {
                            epoch,
                            window: i,
                            record,
                        });
                        if aug.flagged && !cfg.keep_flagged {
                            flagged += 1;
                            Arc::new(split.train[i].clone())
                        } else {
                            Arc::new(aug)
                        }
                    })
                    .collect()
            } else {
                idx.iter().map(|&i| Arc::new(split.train[i].clone())).collect()
            };
            let refs: Vec<&SampleWindow> = windows.iter().map(|w| w.as_ref()).collect();
            let batch = pre.batch(&refs)?;

            let (value, grads, updates) = {
                let mut g = Graph::new(&model.params, true);
                let f = batch.frames.map(|t| g.input(t));
                let s = g.input(batch.states);
                let t = g.input(batch.targets);
                let y = model.net.forward(&mut g, f, s)?;
                let l = loss(&mut g, y, t, cfg.l1)?;
                let value = g.value(l).item() as f64;
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: steps,
                        loss: value,
                    });
                }
                g.backward(l)?;
                let grads: Vec<(ParamId, Tensor<f32>)> =
                    g.param_grads().into_iter().map(|(id, t)| (id, t.clone())).collect();
                (value, grads, g.take_updates())
            };
            adam.step(&mut model.params, &grads);
            model.apply_updates(updates);
            if !model.params.iter().all(|(_, p)| p.value.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step: steps,
                    loss: f64::NAN,
                });
            }
            steps += 1;
            loss_sum += value;
            batches += 1;
        }
        let record = EpochRecord {
            epoch,
            train_rmse: window_rmse(&model, &pre, &train_refs)?,
            test_rmse: window_rmse(&model, &pre, &test_refs)?,
            mean_loss: loss_sum / batches.max(1) as f64,
            steps,
        };
        on_epoch(&record);
        curve.push(record);
    }
    Ok(TrainOutcome {
        model,
        preprocessor: pre,
        curve,
        steps,
        flagged,
        augment_log: log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Dense;
    use rand::{Rng as _, SeedableRng};

    #[test]
    fn occlusion_masks() {
        let ones = GeneralizedState([1.0; STATE_DIM]);
        assert_eq!(occlude(&ones, &OcclusionMask::default()), ones);

        let fs = occlude(&ones, &OcclusionMask::new([OcclusionGroup::FS]));
        assert!(fs.0[47..53].iter().all(|&v| v == 0.0));
        assert_eq!(fs.0.iter().filter(|&&v| v == 1.0).count(), 48);

        let mut rng = crate::rng::Rng::seed_from_u64(3);
        let mut s = GeneralizedState::default();
        s.0.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let rc = occlude(&s, &OcclusionMask::new([OcclusionGroup::RC]));
        for i in 0..STATE_DIM {
            if (27..47).contains(&i) {
                assert_eq!(rc.0[i], 0.0);
            } else {
                assert_eq!(rc.0[i], s.0[i]);
            }
        }
    }

    #[test]
    fn occlusion_groups_are_disjoint_and_in_range() {
        for (i, a) in OcclusionGroup::ALL.iter().enumerate() {
            assert!(a.slots().end <= STATE_DIM);
            for b in &OcclusionGroup::ALL[i + 1..] {
                assert!(a.slots().end <= b.slots().start || b.slots().end <= a.slots().start);
            }
        }
        assert_eq!("rq".parse::<OcclusionGroup>().unwrap(), OcclusionGroup::RQ);
        assert!("xx".parse::<OcclusionGroup>().is_err());
    }

    #[test]
    fn loss_examples() {
        let t = [0.5, -1.0, 2.0, 0.0, 1.0, 3.0];
        assert_eq!(loss_value(&t, &t, 0.0, 0.0).unwrap(), 0.0);
        let p: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
        assert_eq!(loss_value(&p, &t, 0.0, 0.0).unwrap(), 1.0);
        assert!(loss_value(&p[..3], &t, 0.0, 0.0).is_err());
    }

    #[test]
    fn graph_loss_matches_hand_computation() {
        let mut rng = crate::rng::Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let layer = Dense::new(&mut store, "d", 4, 3, &mut rng);
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lambda = 0.01;
        let mut g = Graph::new(&store, true);
        let xv = g.input(Tensor::new(vec![5, 4], x).unwrap());
        let y = layer.forward(&mut g, xv);
        let pred = g.value(y).data.clone();
        let tv = g.input(Tensor::new(vec![5, 3], target.clone()).unwrap());
        let l = loss(&mut g, y, tv, lambda).unwrap();
        let expected = loss_value(&pred, &target, store.l1_weights(), lambda).unwrap();
        assert!((g.value(l).item() - expected).abs() < 1e-6);
        let bad = g.input(Tensor::zeros(&[5, 2]));
        assert!(loss(&mut g, y, bad, 0.0).is_err());
    }

    fn scalar_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamKind::Weight, Tensor::new(vec![1], vec![v]).unwrap());
        (s, id)
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let (mut s, id) = scalar_store(1.5);
        let mut adam = Adam::new(&s, 2e-4, [0.9, 0.999]);
        adam.step(&mut s, &[(id, Tensor::new(vec![1], vec![0.0]).unwrap())]);
        assert_eq!(s.value(id).data[0], 1.5);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let (mut s, id) = scalar_store(1.0);
        let lr = 2e-4;
        let g = 0.3;
        let mut adam = Adam::new(&s, lr, [0.9, 0.999]);
        adam.step(&mut s, &[(id, Tensor::new(vec![1], vec![g]).unwrap())]);
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let expected = 1.0 - lr * g / (g.abs() + ADAM_EPS);
        assert!((s.value(id).data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", ParamKind::Weight, Tensor::new(vec![2], vec![5.0, 5.0]).unwrap());
        let mut adam = Adam::new(&s, 0.1, [0.9, 0.999]);
        let f = |s: &ParamStore<f64>| s.value(id).data.iter().map(|w| w * w).sum::<f64>();
        for _ in 0..2000 {
            let grad = s.value(id).map(|w| 2.0 * w);
            adam.step(&mut s, &[(id, grad)]);
        }
        assert!(f(&s) < 1e-3, "{}", f(&s));
    }

    #[test]
    fn full_batch_linear_regression_descends_monotonically() {
        let mut rng = crate::rng::Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let layer = Dense::new(&mut store, "lin", 3, 3, &mut rng);
        let a = [[0.5, -1.0, 0.2], [0.1, 0.3, -0.7], [1.2, 0.0, 0.4]];
        let xs: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = xs
            .chunks(3)
            .flat_map(|x| (0..3).map(move |j| (0..3).map(|i| x[i] * a[i][j]).sum::<f64>()))
            .collect();
        let mut adam = Adam::new(&store, 1e-2, [0.9, 0.999]);
        let mut prev = f64::INFINITY;
        for _ in 0..200 {
            let (value, grads) = {
                let mut g = Graph::new(&store, true);
                let x = g.input(Tensor::new(vec![20, 3], xs.clone()).unwrap());
                let t = g.input(Tensor::new(vec![20, 3], ys.clone()).unwrap());
                let y = layer.forward(&mut g, x);
                let l = loss(&mut g, y, t, 0.0).unwrap();
                g.backward(l).unwrap();
                let grads: Vec<_> = g.param_grads().into_iter().map(|(i, t)| (i, t.clone())).collect();
                (g.value(l).item(), grads)
            };
            assert!(value <= prev, "{value} > {prev}");
            prev = value;
            adam.step(&mut store, &grads);
        }
        assert!(prev < 0.05, "{prev}");
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.learning_rate, 2e-4);
        assert_eq!(cfg.betas, [0.9, 0.999]);
        assert_eq!(cfg.batch_size, 32);
        let cfg: TrainConfig = serde_json::from_str(r#"{"occlusion": ["FS", "RC"], "mode": "Stiff"}"#).unwrap();
        assert_eq!(cfg.occlusion, OcclusionMask::new([OcclusionGroup::FS, OcclusionGroup::RC]));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
        let bad = TrainConfig {
            l1: -1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { ref field, .. }) if field == "l1"));
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_ne!(TrainConfig::default().digest(), cfg.digest());
    }
}

//! Class-scaled cross-entropy with L2 weight decay, SGD with momentum,
//! geometric augmentation and the epoch loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{argmax_labels, display_ct, display_pet, weights, ForwardOptions, Network};
use crate::params::{Mode, ModelParams};
use crate::phantom::{kfold_split, StudySlice};
use crate::tensor::Tensor;

/// `S_r = 1 - n_r / sum(n)` over the labels of a batch.
pub fn class_scale(labels: &[u8], num_classes: usize) -> Result<Vec<f32>> {
    if labels.is_empty() {
        return Err(Error::Contract("class scaling of an empty batch".into()));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        *counts
            .get_mut(l as usize)
            .ok_or_else(|| Error::Data(format!("label {l} outside 0..{}", num_classes - 1)))? += 1;
    }
    let total = labels.len() as f64;
    Ok(counts
        .iter()
        .map(|&n| (1.0 - n as f64 / total) as f32)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f32,
    pub num_classes: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            num_classes: 4,
        }
    }
}

/// Mean of `S(label) * -ln p(label)` over pixels plus `lambda * sum w^2` over
/// every convolution kernel of `params`.
pub fn scaled_ce_loss(
    tape: &mut Tape,
    prob: Var,
    labels: &[u8],
    params: &ModelParams,
    cfg: &LossConfig,
) -> Result<Var> {
    if !(cfg.lambda >= 0.0) {
        return Err(Error::Config(format!(
            "regularization strength must be non-negative, got {}",
            cfg.lambda
        )));
    }
    let scales = class_scale(labels, cfg.num_classes)?;
    let ce = tape.scaled_cross_entropy(prob, labels, &scales)?;
    if cfg.lambda == 0.0 {
        return Ok(ce);
    }
    let kernels = params
        .conv_weight_ids()
        .iter()
        .map(|id| tape.param(params, id))
        .collect::<Result<Vec<_>>>()?;
    let l2 = tape.sum_squares(&kernels);
    let l2 = tape.scale(l2, cfg.lambda);
    tape.add(ce, l2)
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub learning_rate: f32,
    pub momentum: f32,
    pub velocity: BTreeMap<String, Tensor>,
    pub steps: usize,
}

impl OptimizerState {
    pub fn new(learning_rate: f32, momentum: f32) -> Result<Self> {
        if !(learning_rate > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "need learning rate > 0 and momentum in [0, 1), got {learning_rate} and {momentum}"
            )));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
            steps: 0,
        })
    }
}

/// `v <- mu v + g; w <- w - lr v`, then clears the gradients. Non-finite
/// gradients abort the step before any parameter changes.
pub fn sgd_momentum_step(params: &mut ModelParams, opt: &mut OptimizerState) -> Result<()> {
    if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::Divergence {
            epoch: 0,
            step: opt.steps,
            detail: format!("non-finite gradient in `{}`", p.id),
        });
    }
    let (lr, mu) = (opt.learning_rate, opt.momentum);
    for p in params.iter_mut() {
        let v = opt
            .velocity
            .entry(p.id.clone())
            .or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
        for ((w, vel), &g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(p.grad.data())
        {
            *vel = mu * *vel + g;
            *w -= lr * *vel;
        }
        p.zero_grad();
    }
    opt.steps += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Side length of the crop relative to the image.
    pub crop_fraction: f32,
    pub flip_probability: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            crop_fraction: 0.9,
            flip_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "crop fraction must lie in (0, 1], got {}",
                self.crop_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "flip probability must lie in [0, 1], got {}",
                self.flip_probability
            )));
        }
        Ok(())
    }
}

/// A random crop (resized back with nearest neighbours) and an optional
/// horizontal flip, shared by all images of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentTransform {
    pub height: usize,
    pub width: usize,
    pub top: usize,
    pub left: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    pub flip: bool,
}

impl AugmentTransform {
    pub fn sample(height: usize, width: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let ch = ((height as f32 * cfg.crop_fraction).round() as usize).clamp(1, height);
        let cw = ((width as f32 * cfg.crop_fraction).round() as usize).clamp(1, width);
        AugmentTransform {
            height,
            width,
            top: rng.gen_range(0..=height - ch),
            left: rng.gen_range(0..=width - cw),
            crop_height: ch,
            crop_width: cw,
            flip: rng.gen::<f32>() < cfg.flip_probability,
        }
    }

    /// Source pixel of output pixel `(r, c)`.
    pub fn source(&self, r: usize, c: usize) -> (usize, usize) {
        let c = if self.flip { self.width - 1 - c } else { c };
        (
            self.top + r * self.crop_height / self.height,
            self.left + c * self.crop_width / self.width,
        )
    }

    pub fn apply<T: Copy>(&self, src: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(src.len());
        for r in 0..self.height {
            for c in 0..self.width {
                let (sr, sc) = self.source(r, c);
                out.push(src[sr * self.width + sc]);
            }
        }
        out
    }
}

/// Network-ready slice: display-normalized CT and PET plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub ct: Vec<f32>,
    pub pet: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn from_slice(s: &StudySlice) -> Sample {
        Sample {
            height: s.labels.height(),
            width: s.labels.width(),
            ct: display_ct(&s.ct).into_data(),
            pet: display_pet(&s.pet_suv).into_data(),
            labels: s.labels.as_slice().to_vec(),
        }
    }

    pub fn augmented(&self, t: &AugmentTransform) -> Sample {
        Sample {
            ct: t.apply(&self.ct),
            pet: t.apply(&self.pet),
            labels: t.apply(&self.labels),
            ..*self
        }
    }
}

/// Stacks samples into `[b,h,w,1]` CT and PET tensors and a flat label list.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor, Tensor, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut ct = Vec::with_capacity(samples.len() * h * w);
    let mut pet = Vec::with_capacity(samples.len() * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Data(format!(
                "batch mixes {}x{} and {h}x{w} slices",
                s.height, s.width
            )));
        }
        ct.extend_from_slice(&s.ct);
        pet.extend_from_slice(&s.pet);
        labels.extend_from_slice(&s.labels);
    }
    let b = samples.len();
    Ok((
        Tensor::new([b, h, w, 1], ct)?,
        Tensor::new([b, h, w, 1], pet)?,
        labels,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub lambda: f32,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 5,
            learning_rate: 1e-4,
            momentum: 0.9,
            lambda: 0.1,
            augment: AugmentConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("at least one epoch is required".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("regularization strength must be non-negative".into()));
        }
        OptimizerState::new(self.learning_rate, self.momentum)?;
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub pixel_accuracy: f64,
    pub wall_seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,mean_loss,pixel_accuracy,wall_seconds";

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for e in log {
        writeln!(
            out,
            "{},{:.8},{:.8},{:.3}",
            e.epoch, e.mean_loss, e.pixel_accuracy, e.wall_seconds
        )
        .unwrap();
    }
    out
}

/// Where and how often the loop persists progress.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

/// Runs `cfg.epochs` epochs of seeded, shuffled mini-batches.
///
/// On a non-finite loss or gradient the last parameters that completed an
/// epoch are written to the checkpoint path (when given) and a divergence
/// error is returned.
pub fn train(
    network: &Network,
    mut params: ModelParams,
    data: &[Sample],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    weights::check_layout(network, &params)?;
    let loss_cfg = LossConfig {
        lambda: cfg.lambda,
        num_classes: network.config.num_classes(),
    };
    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_good = params.clone();
    let start = Instant::now();
    let opts = ForwardOptions::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut pixels) = (0.0f64, 0usize, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let augmented: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    if cfg.augment.enabled {
                        let t = AugmentTransform::sample(s.height, s.width, &cfg.augment, &mut rng);
                        s.augmented(&t)
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let refs: Vec<&Sample> = augmented.iter().collect();
            let (ct, pet, labels) = batch(&refs)?;

            let mut tape = Tape::new();
            let out = network.forward(&mut tape, &params, &ct, &pet, Mode::Train, &opts)?;
            let loss = scaled_ce_loss(&mut tape, out.prob, &labels, &params, &loss_cfg)?;
            let loss_value = tape.value(loss).item();
            let diverged = |detail: String| Error::Divergence { epoch, step, detail };
            if !loss_value.is_finite() {
                save_last_good(network, &last_good, outputs)?;
                return Err(diverged(format!("loss is {loss_value}")));
            }
            tape.backward(loss, &mut params)?;
            if let Err(e) = sgd_momentum_step(&mut params, &mut opt) {
                save_last_good(network, &last_good, outputs)?;
                return Err(match e {
                    Error::Divergence { detail, .. } => diverged(detail),
                    other => other,
                });
            }
            params.apply_norm_updates(&tape.take_norm_updates())?;

            let pred = argmax_labels(tape.value(out.prob));
            correct += pred.iter().zip(&labels).filter(|(p, t)| p == t).count();
            pixels += labels.len();
            loss_sum += loss_value as f64 * chunk.len() as f64;
        }
        if !params.all_finite() {
            save_last_good(network, &last_good, outputs)?;
            return Err(Error::Divergence {
                epoch,
                step: opt.steps,
                detail: "non-finite parameters".into(),
            });
        }
        last_good.clone_from(&params);
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            pixel_accuracy: correct as f64 / pixels as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.5}, accuracy {:.4}",
            entry.mean_loss, entry.pixel_accuracy
        );
        log.push(entry);
        if let Some(path) = &outputs.log {
            crate::io::write_atomic(path, log_csv(&log).as_bytes())?;
        }
        if let Some(path) = &outputs.checkpoint {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                weights::save(path, network, &params)?;
            }
        }
    }
    Ok(TrainOutcome { params, log })
}

fn save_last_good(network: &Network, params: &ModelParams, outputs: &TrainOutputs) -> Result<()> {
    if let Some(path) = &outputs.checkpoint {
        warn!("training diverged; keeping last good weights at {}", path.display());
        weights::save(path, network, params)?;
    }
    Ok(())
}

/// Inference-mode label maps, predicted `batch_size` slices at a time.
pub fn predict_labels(
    network: &Network,
    params: &ModelParams,
    data: &[Sample],
    batch_size: usize,
) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(data.len());
    let refs: Vec<&Sample> = data.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (ct, pet, _) = batch(chunk)?;
        let pred = network.predict(params, &ct, &pet, Mode::Inference)?;
        let labels = pred.labels();
        let n = labels.len() / chunk.len();
        out.extend(labels.chunks_exact(n).map(<[u8]>::to_vec));
    }
    Ok(out)
}

/// Fraction of correctly labeled pixels in inference mode.
pub fn pixel_accuracy(network: &Network, params: &ModelParams, data: &[Sample]) -> Result<f64> {
    let preds = predict_labels(network, params, data, 5)?;
    let (mut correct, mut total) = (0usize, 0usize);
    for (p, s) in preds.iter().zip(data) {
        correct += p.iter().zip(&s.labels).filter(|(a, b)| a == b).count();
        total += s.labels.len();
    }
    Ok(correct as f64 / total.max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfResult {
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
}

impl HalfResult {
    pub fn gap(&self) -> f64 {
        (self.train_accuracy - self.validation_accuracy).abs()
    }
}

/// Splits the studies in two study-disjoint halves, trains on each and
/// validates on the other. `studies[i]` holds the samples of study `i`.
pub fn two_fold_validate(
    network: &Network,
    studies: &[Vec<Sample>],
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<[HalfResult; 2]> {
    if studies.len() < 2 {
        return Err(Error::Contract(format!(
            "two-fold validation needs at least 2 studies, got {}",
            studies.len()
        )));
    }
    let folds = kfold_split(studies.len(), 2, cfg.seed)?;
    let gather = |idx: &[usize]| -> Vec<Sample> {
        idx.iter().flat_map(|&i| studies[i].iter().cloned()).collect()
    };
    let mut results = Vec::with_capacity(2);
    for fold in &folds {
        // Train on one half (the fold's "test" side), validate on the other.
        let (train_set, val_set) = (gather(&fold.test), gather(&fold.train));
        let params = network.init_params(init_seed)?;
        let outcome = train(network, params, &train_set, cfg, &TrainOutputs::default())?;
        results.push(HalfResult {
            train_accuracy: pixel_accuracy(network, &outcome.params, &train_set)?,
            validation_accuracy: pixel_accuracy(network, &outcome.params, &val_set)?,
        });
    }
    Ok([results[0], results[1]])
}

/// Checkpoint path helper for a run directory.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.weights")
}

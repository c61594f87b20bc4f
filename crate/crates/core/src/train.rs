//! Sequential minibatch training with per-epoch validation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serpent_data::{AugmentPlan, GrayImage, SegmentationMask};
use serpent_metrics::{aggregate, evaluate_pair, MetricsReport};

use crate::model::DscFormer;
use crate::optim::{Adam, AdamConfig};
use crate::{Error, Graph, ParamStore, Result, Shape, Tensor};

/// Foreground decision threshold on the softmax crack probability.
pub const THRESHOLD: f32 = 0.5;

pub type Pair = (GrayImage, SegmentationMask);

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Drives shuffling and augmentation draws.
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 8,
            adam: AdamConfig::default(),
            seed: 0,
            augment: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_f1: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// Tab-separated: epoch, mean train loss, val IoU, val F1, wall seconds.
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch, self.train_loss, self.val_iou, self.val_f1, self.seconds
        )
    }

    /// The line without the wall-clock column, which is the only
    /// nondeterministic field.
    pub fn deterministic_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.train_loss, self.val_iou, self.val_f1
        )
    }
}

pub struct TrainOutcome {
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_iou: f64,
    pub last: ParamStore<f32>,
    pub records: Vec<EpochRecord>,
}

/// Stacks same-sized images into `(N, 1, H, W)`.
pub fn images_to_tensor(images: &[&GrayImage]) -> Result<Tensor<f32>> {
    let (h, w) = dims_of(images.iter().map(|i| (i.height(), i.width())))?;
    let data = images.iter().flat_map(|i| i.as_slice().iter().copied()).collect();
    Tensor::new(Shape::nchw(images.len(), 1, h, w), data)
}

/// Stacks same-sized masks into `(N, 1, H, W)` with values in {0, 1}.
pub fn masks_to_tensor(masks: &[&SegmentationMask]) -> Result<Tensor<f32>> {
    let (h, w) = dims_of(masks.iter().map(|m| (m.height(), m.width())))?;
    let data = masks
        .iter()
        .flat_map(|m| m.as_slice().iter().map(|&v| f32::from(v.min(1))))
        .collect();
    Tensor::new(Shape::nchw(masks.len(), 1, h, w), data)
}

fn dims_of(mut it: impl Iterator<Item = (usize, usize)>) -> Result<(usize, usize)> {
    let first = it
        .next()
        .ok_or_else(|| Error::contract("batch", "empty batch"))?;
    if let Some(other) = it.find(|d| *d != first) {
        return Err(Error::contract(
            "batch",
            format!("mixed sizes {}x{} and {}x{}", first.0, first.1, other.0, other.1),
        ));
    }
    Ok(first)
}

/// Binary masks from a `(N, 1, H, W)` probability tensor.
pub fn threshold_masks(probs: &Tensor<f32>) -> Result<Vec<SegmentationMask>> {
    let [n, _, h, w] = probs.dims();
    probs
        .data()
        .chunks(h * w)
        .take(n)
        .map(|p| Ok(SegmentationMask::from_scores(h, w, p, THRESHOLD)?))
        .collect()
}

/// Thresholded predictions for every pair, evaluated in chunks of `batch`.
pub fn predict_masks(
    model: &DscFormer,
    params: &ParamStore<f32>,
    images: &[&GrayImage],
    batch: usize,
) -> Result<Vec<SegmentationMask>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let probs = model.predict(params, &images_to_tensor(chunk)?)?;
        out.extend(threshold_masks(&probs)?);
    }
    Ok(out)
}

pub fn evaluate(model: &DscFormer, params: &ParamStore<f32>, pairs: &[Pair], batch: usize) -> Result<MetricsReport> {
    let images: Vec<_> = pairs.iter().map(|(i, _)| i).collect();
    let preds = predict_masks(model, params, &images, batch)?;
    let per_image = preds
        .iter()
        .zip(pairs)
        .enumerate()
        .map(|(i, (p, (_, gt)))| evaluate_pair(&format!("{i:04}"), p, gt))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(aggregate(per_image)?)
}

/// Seed of one augmentation draw, unique per run, epoch and sample.
pub fn augment_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut h = seed ^ 0x243f_6a88_85a3_08d3;
    for v in [epoch as u64, index as u64] {
        h = (h ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h ^= h >> 31;
    }
    h
}

/// Sample visiting order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(augment_seed(seed, epoch, usize::MAX));
    order.shuffle(&mut rng);
    order
}

/// One optimization step on a batch; returns the loss before the update.
pub fn train_step(
    model: &DscFormer,
    params: &mut ParamStore<f32>,
    opt: &mut Adam<f32>,
    images: &Tensor<f32>,
    targets: &Tensor<f32>,
) -> Result<f64> {
    let (loss, grads) = {
        let mut g = Graph::with_params(params);
        let x = g.constant(images.clone());
        let logits = model.forward(&mut g, x)?;
        let loss = g.seg_loss(logits, targets.clone())?;
        let value = f64::from(g.value(loss).data()[0]);
        if !value.is_finite() {
            return Ok(value);
        }
        (value, g.backward(loss)?.into_params())
    };
    opt.step(params, &grads)?;
    Ok(loss)
}

/// Trains from `params`, validating after every epoch and keeping the
/// parameters of the best validation IoU (earliest epoch on ties).
pub fn train(
    model: &DscFormer,
    params: ParamStore<f32>,
    train_set: &[Pair],
    val_set: &[Pair],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    if config.batch == 0 || config.epochs == 0 {
        return Err(Error::Config("epochs and batch must be positive".into()));
    }
    let mut params = params;
    let mut opt = Adam::new(config.adam);
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let order = epoch_order(config.seed, epoch, train_set.len());
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(config.batch).enumerate() {
            let drawn: Vec<Pair> = chunk
                .iter()
                .map(|&i| {
                    let (img, mask) = &train_set[i];
                    if config.augment {
                        AugmentPlan::draw(augment_seed(config.seed, epoch, i)).apply_pair(img, mask)
                    } else {
                        (img.clone(), mask.clone())
                    }
                })
                .collect();
            let images = images_to_tensor(&drawn.iter().map(|p| &p.0).collect::<Vec<_>>())?;
            let targets = masks_to_tensor(&drawn.iter().map(|p| &p.1).collect::<Vec<_>>())?;
            let loss = train_step(model, &mut params, &mut opt, &images, &targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi + 1 });
            }
            loss_sum += loss;
            batches += 1;
        }
        let report = evaluate(model, &params, val_set, config.batch)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_iou: report.iou.mean,
            val_f1: report.f1.mean,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {}", record.tsv_line());
        on_epoch(&record);
        if best.as_ref().is_none_or(|(iou, _, _)| record.val_iou > *iou) {
            best = Some((record.val_iou, epoch, params.clone()));
        }
        records.push(record);
    }
    let (best_iou, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_iou,
        last: params,
        records,
    })
}

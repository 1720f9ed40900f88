//! Minibatch training with the sampled margin ranking objective.
//!
//! Each batch item gets its own graph holding both encoder branches, built and
//! differentiated in parallel against the current parameters. A small head
//! graph takes the feature maps as leaves, evaluates the loss and returns the
//! feature-map gradients, which are pushed back through every item graph.
//! Parameter gradients are summed in item order so the result does not depend
//! on the execution mode.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{margin_rank_loss, sample_imposters, SimilarityKind, DEFAULT_MARGIN};
use crate::checkpoint::Checkpoint;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::image::{preprocess_image, ImageStats, Mode};
use crate::model::{BnMoments, Model};
use crate::optim::SgdConfig;
use crate::par::Exec;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub margin: f64,
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub sim: SimilarityKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            margin: DEFAULT_MARGIN,
            sgd: SgdConfig::default(),
            epochs: 60,
            sim: SimilarityKind::Misa,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.margin > 0.0) {
            return Err(Error::InvalidArgument("margin must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
    pub batches: usize,
}

/// Whether training continues after an epoch callback.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Epoch-specific RNG stream, so a resumed run repeats the same shuffles.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

struct ItemGraph {
    g: Graph<f32>,
    params: Vec<(String, NodeId)>,
    image: NodeId,
    audio: NodeId,
}

fn item_forward(model: &Model<f32>, input: &Tensor<f32>, sample: &Sample, bn: BnMoments) -> Result<ItemGraph> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, "", true);
    let x = g.constant(input.clone());
    let image = model.image_graph(&mut g, &bound, x)?;
    let a = g.constant(sample.spec.band_major());
    let audio = model.audio_graph(&mut g, &bound, a, sample.spec.num_frames(), bn)?;
    let params = bound.iter().map(|(k, &v)| (k.clone(), v)).collect();
    Ok(ItemGraph { g, params, image, audio })
}

fn item_backward(mut item: ItemGraph, d_image: Tensor<f32>, d_audio: Tensor<f32>) -> Result<Vec<(String, Tensor<f32>)>> {
    let g = &mut item.g;
    let gi = g.constant(d_image);
    let ga = g.constant(d_audio);
    let pi = g.mul(item.image, gi)?;
    let pa = g.mul(item.audio, ga)?;
    let si = g.sum(pi);
    let sa = g.sum(pa);
    let root = g.add(si, sa)?;
    let mut grads = g.backward(root)?;
    Ok(item.params.into_iter().map(|(k, id)| (k, grads.take(id))).collect())
}

/// Mean per-item loss of one batch and its parameter gradients.
pub fn batch_gradients(
    model: &Model<f32>,
    inputs: &[Tensor<f32>],
    samples: &[&Sample],
    bn: BnMoments,
    kind: SimilarityKind,
    margin: f64,
    rng: &mut ChaCha8Rng,
    exec: Exec,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let b = samples.len();
    let items = exec.try_map_range(b, |i| item_forward(model, &inputs[i], samples[i], bn))?;
    let imposters = sample_imposters(b, rng)?;
    let mut head = Graph::new();
    let im: Vec<NodeId> = items.iter().map(|it| head.param(it.g.value(it.image).clone())).collect();
    let au: Vec<NodeId> = items.iter().map(|it| head.param(it.g.value(it.audio).clone())).collect();
    let total = margin_rank_loss(&mut head, &im, &au, kind, margin, &imposters)?;
    let loss = head.scale(total, 1.0 / b as f32);
    let loss_value = head.value(loss).item() as f64;
    let mut hg = head.backward(loss)?;
    let seeds: Vec<(Tensor<f32>, Tensor<f32>)> = (0..b).map(|i| (hg.take(im[i]), hg.take(au[i]))).collect();
    let work: Vec<_> = items.into_iter().zip(seeds).collect();
    let per_item = exec.map_owned(work, |(item, (di, da))| item_backward(item, di, da));
    let mut total: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for grads in per_item {
        for (name, g) in grads? {
            match total.get_mut(&name) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    Ok((loss_value, total))
}

pub fn train_inputs(model: &Model<f32>, stats: &ImageStats, samples: &[&Sample], mode: Mode, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f32>>> {
    let cfg = &model.config.image;
    samples
        .iter()
        .map(|s| preprocess_image(&s.image, cfg.resize_to, cfg.input_size, stats, mode, rng))
        .collect()
}

/// One pass over `samples` in a shuffled order; a trailing batch of one item is dropped.
pub fn train_epoch(ckpt: &mut Checkpoint, samples: &[Sample], cfg: &TrainConfig, exec: Exec) -> Result<EpochSummary> {
    cfg.validate()?;
    let epoch = ckpt.epoch;
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut loss_sum = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
        let specs: Vec<_> = batch.iter().map(|s| &s.spec).collect();
        let bn = BnMoments::of_batch(&specs);
        let inputs = train_inputs(&ckpt.model, &ckpt.image_stats, &batch, Mode::Train, &mut rng)?;
        let (loss, grads) = batch_gradients(&ckpt.model, &inputs, &batch, bn, cfg.sim, cfg.margin, &mut rng, exec)?;
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite loss at epoch {epoch}")));
        }
        ckpt.optimizer.step(&mut ckpt.model.params, &grads, epoch)?;
        let cells: usize = specs.iter().map(|s| s.frames.len()).sum();
        ckpt.model.update_running_stats(bn, cells);
        loss_sum += loss;
        batches += 1;
    }
    let summary = EpochSummary {
        epoch,
        mean_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
        learning_rate: ckpt.optimizer.learning_rate_at(epoch),
        batches,
    };
    ckpt.epoch += 1;
    Ok(summary)
}

/// Trains from `ckpt.epoch` up to `cfg.epochs`, invoking `on_epoch` after each.
pub fn train(
    ckpt: &mut Checkpoint,
    samples: &[Sample],
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochSummary, &Checkpoint) -> Result<Control>,
) -> Result<Vec<EpochSummary>> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least 2 pairs".into()));
    }
    ckpt.optimizer.config = cfg.sgd.clone();
    ckpt.seed = cfg.seed;
    let mut log = Vec::new();
    while ckpt.epoch < cfg.epochs {
        let summary = train_epoch(ckpt, samples, cfg, exec)?;
        log::info!(
            "epoch {} loss {:.4} lr {:.2e} ({} batches)",
            summary.epoch,
            summary.mean_loss,
            summary.learning_rate,
            summary.batches
        );
        let control = on_epoch(&summary, ckpt)?;
        log.push(summary);
        if control == Control::Stop {
            break;
        }
    }
    Ok(log)
}

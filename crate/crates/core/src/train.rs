//! Mini-batch training with Adagrad and a cosine learning-rate schedule.
//!
//! Each step runs the forward pass for every sample in the batch, evaluates
//! the loss jointly over all batch pixels, then seeds each sample's reverse
//! pass with its slice of the loss gradient. Per-sample parameter gradients
//! are summed in batch order, so results do not depend on the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::{classic_augment, normalize, scene_seed, tile_scene, AugmentConfig, Scene};
use crate::error::{Error, Result};
use crate::inference::pixel_iou;
use crate::loss::{compute_loss, LossConfig, LossKind};
use crate::model::{Gradients, MtuNet};
use crate::raster::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::optim::{CosineSchedule, OptimizerState};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub loss_config: LossConfig,
    pub lr: f64,
    /// Learning rate reached at the end of the cosine schedule.
    pub min_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    /// Flip and blur augmentation; `None` trains on the raw tiles.
    pub augment: Option<AugmentConfig>,
    /// Threshold for the logged training IoU.
    pub iou_threshold: f64,
    pub seed: u64,
    /// Worker threads for the per-sample passes.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::FocalIou,
            loss_config: LossConfig::default(),
            lr: 0.05,
            min_lr: 0.001,
            batch_size: 8,
            epochs: 10,
            max_steps: None,
            augment: Some(AugmentConfig::default()),
            iou_threshold: 0.5,
            seed: 0,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_config.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.lr {
            return Err(Error::Config(format!(
                "need 0 <= min_lr <= lr with lr > 0, got lr {} min_lr {}",
                self.lr, self.min_lr
            )));
        }
        if self.batch_size == 0 || self.jobs == 0 {
            return Err(Error::Config("batch_size and jobs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.iou_threshold) {
            return Err(Error::Config("iou_threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.max_steps
            .unwrap_or(self.epochs * samples.div_ceil(self.batch_size))
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// 1-based.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_iou: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,lr,loss,train_iou";

    pub fn csv_row(&self) -> String {
        format!("{},{:.9e},{:.9e},{:.9e}", self.step, self.lr, self.loss, self.train_iou)
    }
}

/// Cuts every scene into `input_size` tiles.
pub fn training_tiles(scenes: &[Scene], input_size: usize) -> Result<Vec<Scene>> {
    let mut out = Vec::new();
    for scene in scenes {
        if scene.dims() == (input_size, input_size) {
            out.push(scene.clone());
        } else {
            out.extend(tile_scene(scene, input_size)?.into_iter().map(|(t, _)| t));
        }
    }
    Ok(out)
}

struct Sample<T> {
    image: Tensor<T>,
    mask: BinaryMask,
}

fn prepare<T: Scalar>(scene: &Scene, cfg: &TrainConfig, step: usize) -> Result<Sample<T>> {
    let scene = match &cfg.augment {
        Some(aug) => {
            let seed = scene_seed(cfg.seed, &format!("{}#{step}", scene.id));
            classic_augment(scene, aug, seed)?.0
        }
        None => scene.clone(),
    };
    let (h, w) = scene.dims();
    let image = Tensor::new(vec![1, h, w], normalize::<T>(scene.image()).into_data())?;
    Ok(Sample {
        image,
        mask: scene.mask().clone(),
    })
}

fn forward_all<'a, T: Scalar>(
    net: &'a MtuNet<T>,
    samples: &[Sample<T>],
) -> Result<Vec<(Graph<'a, T>, Var, Var)>> {
    samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let x = net.image_input(&mut g, s.image.clone())?;
            let pass = net.forward(&mut g, x)?;
            Ok((g, pass.logits, pass.probs))
        })
        .collect()
}

/// One optimisation step on `batch`; returns `(loss, train_iou)`.
fn step<T: Scalar>(
    net: &mut MtuNet<T>,
    state: &mut OptimizerState<T>,
    batch: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let (total, loss, iou) = {
        let shared: &MtuNet<T> = net;
        let graphs = forward_all(shared, batch)?;
        let probs: Vec<f64> = graphs
            .iter()
            .flat_map(|(g, _, p)| g.value(*p).data().iter().map(|v| v.as_f64()))
            .collect();
        let labels: Vec<bool> = batch.iter().flat_map(|s| s.mask.data().iter().copied()).collect();
        let out = compute_loss(cfg.loss, &probs, &labels, &cfg.loss_config)?;
        if !out.value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let iou = pixel_iou(&probs, &labels, cfg.iou_threshold);

        let mut offsets = Vec::with_capacity(graphs.len());
        let mut start = 0;
        for s in batch {
            offsets.push(start);
            start += s.mask.len();
        }
        let per_sample: Vec<Gradients<T>> = graphs
            .into_par_iter()
            .zip(offsets)
            .map(|((mut g, logits, _), off)| {
                let n = g.value(logits).numel();
                let seed: Vec<T> = out.grad[off..off + n].iter().map(|&v| T::of(v)).collect();
                g.backward_from(logits, &seed)?;
                Ok(shared.gradients(&g))
            })
            .collect::<Result<_>>()?;
        let mut total = Gradients::zeros_like(shared.params());
        for g in &per_sample {
            total.add_assign(g);
        }
        (total, out.value, iou)
    };
    let params = net.params_mut();
    params.zero_grads();
    params.accumulate(&total)?;
    state.adagrad_step(params.tensors_mut())?;
    Ok((loss, iou))
}

/// Trains `net` in place; `on_step` sees every log row as it is produced.
pub fn train<T: Scalar>(
    net: &mut MtuNet<T>,
    scenes: &[Scene],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    let tiles = training_tiles(scenes, net.config().input_size)?;
    if tiles.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let total_steps = cfg.total_steps(tiles.len());
    let mut state = OptimizerState::new(CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        period: total_steps,
    });
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut order: Vec<usize> = (0..tiles.len()).collect();
    let mut cursor = tiles.len();
    let mut epoch = 0u64;
    let mut logs = Vec::with_capacity(total_steps);
    for step_index in 0..total_steps {
        if cursor >= tiles.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            order.shuffle(&mut rng);
            cursor = 0;
            epoch += 1;
        }
        let end = (cursor + cfg.batch_size).min(tiles.len());
        let batch = order[cursor..end]
            .iter()
            .map(|&i| prepare(&tiles[i], cfg, step_index))
            .collect::<Result<Vec<Sample<T>>>>()?;
        cursor = end;

        let lr = state.current_lr();
        let (loss, train_iou) = pool.install(|| step(net, &mut state, &batch, cfg))?;
        let log = StepLog {
            step: step_index + 1,
            lr,
            loss,
            train_iou,
        };
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

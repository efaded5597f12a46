//! Total loss, weight schedule and the SGD training loop.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Error, Result};
use crate::model::{classification_loss_from_features, Backbone, BackboneConfig, BoundBackbone, Class, LabelVector};
use crate::spatial::puzzle_losses_with_features;
use crate::synthdata::VideoDataset;
use crate::tensor::{save_checkpoint, Graph, Real, Tensor, Var};
use crate::temporal::{estimate_flow, temporal_loss_from_features, FlowMethod, LateralFlows, TemporalOptions};

/// File names written into a run directory.
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.tckp";
pub const CONFIG_FILE: &str = "config.json";
pub const DIVERGED_FILE: &str = "diverged.tckp";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    /// Triplets per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub alpha_max: f64,
    pub beta_max: f64,
    /// Divide α by the number of feature elements and β by the number of map
    /// elements, so the weights act on per-element mean distances.
    pub per_element_weights: bool,
    pub enable_spatial: bool,
    pub enable_temporal: bool,
    pub detach_fused: bool,
    pub detach_cam_max: bool,
    pub temporal_before_only: bool,
    pub lateral_cls: bool,
    pub flow_method: FlowMethod,
    pub seed: u64,
    /// Keep every n-th interior frame of each video as a triplet centre.
    pub triplet_stride: usize,
    /// Write `epoch_NNN.tckp` every n epochs (0 = final checkpoint only).
    pub checkpoint_every: usize,
    pub backbone: BackboneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 30,
            batch_size: 1,
            learning_rate: 0.005,
            momentum: 0.9,
            alpha_max: 4.0,
            beta_max: 4.0,
            per_element_weights: true,
            enable_spatial: true,
            enable_temporal: true,
            detach_fused: false,
            detach_cam_max: false,
            temporal_before_only: false,
            lateral_cls: false,
            flow_method: FlowMethod::GroundTruth,
            seed: 0,
            triplet_stride: 1,
            checkpoint_every: 0,
            backbone: BackboneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.triplet_stride == 0 {
            return bad("batch_size and triplet_stride must be at least 1".into());
        }
        if !(self.alpha_max >= 0.0 && self.beta_max >= 0.0) {
            return bad(format!(
                "alpha_max and beta_max must be >= 0, got {} and {}",
                self.alpha_max, self.beta_max
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        self.backbone.validate()
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn temporal_options(&self) -> TemporalOptions {
        TemporalOptions {
            detach_fused: self.detach_fused,
            detach_cam_max: self.detach_cam_max,
        }
    }
}

/// Weight of the reconstruction losses at `epoch` (0-based): zero in the
/// first epoch, then a linear ramp from 0 at epoch 1 to `max_value` at epoch
/// `total_epochs / 2`, constant afterwards.
pub fn schedule(epoch: usize, total_epochs: usize, max_value: f64) -> f64 {
    let mid = total_epochs / 2;
    if epoch == 0 {
        0.0
    } else if mid <= 1 || epoch >= mid {
        max_value
    } else {
        max_value * (epoch - 1) as f64 / (mid - 1) as f64
    }
}

/// One training example: the three frames as tensors, the label and the
/// lateral flows on the feature grid.
#[derive(Clone, Debug)]
pub struct TripletInput<T: Real = f32> {
    pub frames: [Arc<Tensor<T>>; 3],
    pub label: Class,
    pub flows: LateralFlows,
}

/// Converts every selected triplet of `dataset` into a [`TripletInput`],
/// estimating or reading the flow once per triplet.
pub fn prepare_triplets<T: Real>(
    dataset: &VideoDataset,
    flow_method: FlowMethod,
    stride: usize,
    triplet_stride: usize,
) -> Result<Vec<TripletInput<T>>> {
    let mut cache: Vec<Option<Vec<Arc<Tensor<T>>>>> = vec![None; dataset.len()];
    let mut out = Vec::new();
    for t in dataset.triplets() {
        if (t.center - 1) % triplet_stride.max(1) != 0 {
            continue;
        }
        let tensors = cache[t.video_index]
            .get_or_insert_with(|| t.video.frames.iter().map(|f| Arc::new(f.to_tensor::<T>())).collect());
        let [prev, cur, next] = t.frames();
        let (rec_prev, rec_next) = match t.gt_flows() {
            Some((p, n)) => (Some(p), Some(n)),
            None => (None, None),
        };
        let to_prev = estimate_flow(cur, prev, flow_method, rec_prev.as_ref())?.to_feature_grid(stride)?;
        let to_next = estimate_flow(cur, next, flow_method, rec_next.as_ref())?.to_feature_grid(stride)?;
        out.push(TripletInput {
            frames: [
                tensors[t.center - 1].clone(),
                tensors[t.center].clone(),
                tensors[t.center + 1].clone(),
            ],
            label: t.label(),
            flows: LateralFlows { to_prev, to_next },
        });
    }
    Ok(out)
}

/// Graph nodes of the total loss and its components. Disabled components are
/// `None` and were not computed.
pub struct LossBreakdown<'g, T: Real> {
    pub total: Var<'g, T>,
    pub cls: Var<'g, T>,
    pub p_cls: Option<Var<'g, T>>,
    pub spatial: Option<Var<'g, T>>,
    pub temporal: Option<Var<'g, T>>,
}

/// Scalar values of a [`LossBreakdown`] (0 for skipped components).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub cls: f64,
    pub p_cls: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub total: f64,
}

impl<T: Real> LossBreakdown<'_, T> {
    pub fn values(&self) -> LossValues {
        let v = |x: &Option<Var<'_, T>>| x.as_ref().map_or(0.0, |x| x.value().data()[0].to_f64_lossy());
        LossValues {
            cls: self.cls.value().data()[0].to_f64_lossy(),
            p_cls: v(&self.p_cls),
            spatial: v(&self.spatial),
            temporal: v(&self.temporal),
            total: self.total.value().data()[0].to_f64_lossy(),
        }
    }
}

/// `L_cls + L_p_cls + α·L_spatial + β·L_temporal` for one triplet. `alpha`
/// and `beta` are the weights as applied; see [`effective_weights`].
pub fn total_loss<'g, T: Real>(
    backbone: &BoundBackbone<'g, T>,
    input: &TripletInput<T>,
    alpha: f64,
    beta: f64,
    config: &RunConfig,
) -> Result<LossBreakdown<'g, T>> {
    let label = LabelVector::one_hot(input.label);
    let f_t = backbone.features(&input.frames[1])?;
    let cls = classification_loss_from_features(&f_t, label)?;
    let mut total = cls.clone();

    let use_temporal = config.enable_temporal && (!config.temporal_before_only || input.label == Class::Before);
    let laterals = if use_temporal || config.lateral_cls {
        Some((backbone.features(&input.frames[0])?, backbone.features(&input.frames[2])?))
    } else {
        None
    };
    if config.lateral_cls {
        let (f_prev, f_next) = laterals.as_ref().expect("computed above");
        for f in [f_prev, f_next] {
            total = total.add(&classification_loss_from_features(f, label)?)?;
        }
    }

    let (mut p_cls, mut spatial) = (None, None);
    if config.enable_spatial {
        let out = puzzle_losses_with_features(backbone, &input.frames[1], f_t.clone(), label)?;
        total = total.add(&out.p_cls)?.add(&out.spatial.scale(T::lit(alpha)))?;
        p_cls = Some(out.p_cls);
        spatial = Some(out.spatial);
    }

    let mut temporal = None;
    if use_temporal {
        let (f_prev, f_next) = laterals.as_ref().expect("computed above");
        let out = temporal_loss_from_features(
            [f_prev, &f_t, f_next],
            input.label,
            &input.flows,
            config.temporal_options(),
        )?;
        total = total.add(&out.loss.scale(T::lit(beta)))?;
        temporal = Some(out.loss);
    }

    Ok(LossBreakdown {
        total,
        cls,
        p_cls,
        spatial,
        temporal,
    })
}

/// Weights multiplying `L_spatial` and `L_temporal` for scheduled values
/// `alpha`, `beta` on a feature grid of `grid` cells (three class channels).
pub fn effective_weights(config: &RunConfig, alpha: f64, beta: f64, grid: usize) -> (f64, f64) {
    if config.per_element_weights {
        let classes = config.backbone.num_classes;
        (alpha / (classes * grid) as f64, beta / grid as f64)
    } else {
        (alpha, beta)
    }
}

/// One row of the metrics log: per-epoch means over the epoch's triplets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "L_cls")]
    pub cls: f64,
    #[serde(rename = "L_p_cls")]
    pub p_cls: f64,
    #[serde(rename = "L_spatial")]
    pub spatial: f64,
    #[serde(rename = "L_temporal")]
    pub temporal: f64,
    /// `cls + p_cls + alpha·spatial + beta·temporal` of the logged means;
    /// `alpha` and `beta` are the weights as applied.
    #[serde(rename = "L_total")]
    pub total: f64,
    pub val_accuracy: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl EpochMetrics {
    pub fn recomputed_total(&self) -> f64 {
        self.cls + self.p_cls + self.alpha * self.spatial + self.beta * self.temporal
    }
}

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for m in metrics {
        w.serialize(m).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

/// Result of [`fit`].
pub struct TrainOutcome {
    pub backbone: Backbone<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
}

/// Trains a fresh backbone on `train` with SGD + momentum, logging per-epoch
/// loss means and, if `val` is given, frame-level validation accuracy. When
/// `out_dir` is set, the config, metrics and checkpoints are written there.
pub fn fit(train: &VideoDataset, val: Option<&VideoDataset>, config: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut backbone = Backbone::<f32>::new(config.backbone.clone(), config.seed)?;
    let inputs = prepare_triplets::<f32>(train, config.flow_method, backbone.stride(), config.triplet_stride)?;
    ensure_contract!(!inputs.is_empty(), "training set has no triplets");
    let val_inputs = val.map(|v| frame_inputs(v)).transpose()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        config.save(&dir.join(CONFIG_FILE))?;
    }

    let grid = inputs[0].flows.to_next.height() * inputs[0].flows.to_next.width();
    let mut velocity: Vec<Vec<f32>> = backbone.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    let lr = config.learning_rate as f32;
    let mu = config.momentum as f32;
    for epoch in 0..config.epochs {
        let (alpha, beta) = effective_weights(
            config,
            schedule(epoch, config.epochs, config.alpha_max),
            schedule(epoch, config.epochs, config.beta_max),
            grid,
        );
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let mut sums = LossValues::default();
        for batch in order.chunks(config.batch_size) {
            let mut grads: Vec<Vec<f32>> = velocity.iter().map(|v| vec![0.0; v.len()]).collect();
            for &i in batch {
                let graph = Graph::new();
                let bound = backbone.bind(&graph);
                let br = total_loss(&bound, &inputs[i], alpha, beta, config)?;
                let v = br.values();
                if !v.total.is_finite() {
                    return Err(diverged(&backbone, out_dir, epoch, steps, v.total));
                }
                sums.cls += v.cls;
                sums.p_cls += v.p_cls;
                sums.spatial += v.spatial;
                sums.temporal += v.temporal;
                let g = graph.backward(br.total)?;
                for (acc, var) in grads.iter_mut().zip(bound.vars()) {
                    if let Some(t) = g.get(var) {
                        for (a, &d) in acc.iter_mut().zip(t.data()) {
                            *a += d;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for ((p, v), g) in backbone.params_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                for ((w, vi), &gi) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = mu * *vi + gi * scale;
                    *w -= lr * *vi;
                }
            }
            steps += 1;
            if backbone.params().iter().any(|p| !p.tensor.all_finite()) {
                return Err(diverged(&backbone, out_dir, epoch, steps, f64::NAN));
            }
        }

        let n = inputs.len() as f64;
        let mut m = EpochMetrics {
            epoch,
            cls: sums.cls / n,
            p_cls: sums.p_cls / n,
            spatial: sums.spatial / n,
            temporal: sums.temporal / n,
            total: 0.0,
            val_accuracy: val_inputs.as_ref().map(|v| accuracy(&backbone, v, &Class::ALL)).transpose()?,
            alpha,
            beta,
        };
        m.total = m.recomputed_total();
        log::info!(
            "epoch {epoch}: L_total {:.4} (cls {:.4}, p_cls {:.4}, spatial {:.4}, temporal {:.4}) val_acc {:?}",
            m.total,
            m.cls,
            m.p_cls,
            m.spatial,
            m.temporal,
            m.val_accuracy
        );
        metrics.push(m);
        if let Some(dir) = out_dir {
            write_metrics(&dir.join(METRICS_FILE), &metrics)?;
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("epoch_{epoch:03}.tckp")), backbone.params())?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(CHECKPOINT_FILE), backbone.params())?;
    }
    Ok(TrainOutcome {
        backbone,
        metrics,
        steps,
    })
}

fn diverged(backbone: &Backbone<f32>, out_dir: Option<&Path>, epoch: usize, step: usize, loss: f64) -> Error {
    let mut msg = format!("training diverged at epoch {epoch}, step {step} (loss {loss})");
    if let Some(dir) = out_dir {
        let path = dir.join(DIVERGED_FILE);
        match save_checkpoint(&path, backbone.params()) {
            Ok(()) => msg.push_str(&format!("; parameters saved to {}", path.display())),
            Err(e) => msg.push_str(&format!("; could not save parameters: {e}")),
        }
    }
    Error::Numeric(msg)
}

/// Every frame of `dataset` as a labelled tensor.
pub fn frame_inputs(dataset: &VideoDataset) -> Result<Vec<(Tensor<f32>, Class)>> {
    Ok(dataset
        .videos
        .iter()
        .flat_map(|v| v.frames.iter().map(move |f| (f.to_tensor(), v.label)))
        .collect())
}

/// Fraction of frames whose highest-scoring class among `classes` is the
/// true label.
pub fn accuracy(backbone: &Backbone<f32>, frames: &[(Tensor<f32>, Class)], classes: &[Class]) -> Result<f64> {
    if frames.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (x, label) in frames {
        if predicted_class(backbone, x, classes)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / frames.len() as f64)
}

/// Class with the largest pooled feature among `classes` (ties go to the
/// earlier entry).
pub fn predicted_class(backbone: &Backbone<f32>, x: &Tensor<f32>, classes: &[Class]) -> Result<Class> {
    let f = backbone.features_of(x)?;
    let (_, c, h, w) = f.dims4()?;
    let plane = h * w;
    let pooled: Vec<f32> = (0..c)
        .map(|k| f.data()[k * plane..(k + 1) * plane].iter().sum::<f32>() / plane as f32)
        .collect();
    let mut best = classes[0];
    for &k in &classes[1..] {
        if pooled[k.index()] > pooled[best.index()] {
            best = k;
        }
    }
    Ok(best)
}

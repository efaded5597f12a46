//! CAM binarization, illegal-class mIoU, the loss ablation grid and the
//! background-bias classification study.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, ensure_dims, Error, Result};
use crate::image::{Image, Mask};
use crate::model::{Backbone, Class};
use crate::preprocess::remove_background;
use crate::synthdata::VideoDataset;
use crate::temporal::{cam_map, SaliencyMap};
use crate::train::{accuracy, fit, frame_inputs, RunConfig};

/// Thresholds tried when picking the binarization threshold.
pub const THETA_SWEEP: [f32; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Bilinear resize of an `h × w` plane to `out_h × out_w` (pixel-centre
/// aligned, edge-clamped).
pub fn upsample_bilinear(values: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let src = ((dst as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5).clamp(0.0, (n_in - 1) as f32);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f32)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
            let bottom = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Map upsampled to `height × width` and thresholded: `mask = M ≥ theta`.
pub fn binarize(map: &SaliencyMap, theta: f32, height: usize, width: usize) -> Mask {
    let up = upsample_bilinear(map.values().data(), map.height(), map.width(), height, width);
    Mask::new(height, width, up.into_iter().map(|v| v >= theta).collect()).expect("upsampled size")
}

/// Per-pixel label: illegal (before), legal (after) or background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    labels: Vec<Class>,
}

/// Display colors: illegal red, legal green, background blue.
pub const PALETTE: [[f32; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl SegmentationMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[Class] {
        &self.labels
    }

    /// Pixels labelled with `class`.
    pub fn mask_of(&self, class: Class) -> Mask {
        Mask::new(self.height, self.width, self.labels.iter().map(|&l| l == class).collect()).expect("own size")
    }

    pub fn to_color_image(&self) -> Image {
        let n = self.height * self.width;
        let mut data = vec![0.0; 3 * n];
        for (i, l) in self.labels.iter().enumerate() {
            for c in 0..3 {
                data[c * n + i] = PALETTE[l.index()][c];
            }
        }
        Image::new(3, self.height, self.width, data).expect("own size")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_color_image().save_png(path)
    }
}

/// Per pixel, the class whose normalized CAM is largest (ties by class
/// order) if that value reaches `theta`, else background.
pub fn segmentation_mask(features: &crate::tensor::Tensor<f32>, theta: f32, height: usize, width: usize) -> Result<SegmentationMask> {
    let (_, c, _, _) = features.dims4()?;
    ensure_dims!(c == 3, "segmentation needs 3 class channels, got {c}");
    let ups: Vec<Vec<f32>> = Class::ALL
        .iter()
        .map(|&k| {
            let m = cam_map(features, k, 0)?;
            Ok(upsample_bilinear(m.values().data(), m.height(), m.width(), height, width))
        })
        .collect::<Result<_>>()?;
    let labels = (0..height * width)
        .map(|i| {
            let mut best = 0;
            for k in 1..3 {
                if ups[k][i] > ups[best][i] {
                    best = k;
                }
            }
            if ups[best][i] >= theta {
                Class::ALL[best]
            } else {
                Class::Background
            }
        })
        .collect();
    Ok(SegmentationMask {
        height,
        width,
        labels,
    })
}

/// `|pred ∩ gt| / |pred ∪ gt|`, 1 when both are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    ensure_dims!(
        pred.height() == gt.height() && pred.width() == gt.width(),
        "mask {}x{} vs {}x{}",
        pred.height(),
        pred.width(),
        gt.height(),
        gt.width()
    );
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean per-image IoU.
pub fn miou(preds: &[Mask], gts: &[Mask]) -> Result<f64> {
    ensure_dims!(preds.len() == gts.len(), "{} predictions for {} ground truths", preds.len(), gts.len());
    ensure_contract!(!preds.is_empty(), "mIoU of zero images");
    let mut sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        sum += iou(p, g)?;
    }
    Ok(sum / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    /// `(theta, mIoU)` for every swept threshold.
    pub sweep: Vec<(f32, f64)>,
    pub best_theta: f32,
    pub best_miou: f64,
    pub frames: usize,
}

/// Before-class CAMs of every annotated frame, binarized at each threshold of
/// `thetas`, scored against the illegal-object masks.
pub fn evaluate_segmentation(backbone: &Backbone<f32>, dataset: &VideoDataset, thetas: &[f32]) -> Result<SegmentationReport> {
    ensure_contract!(!thetas.is_empty(), "empty threshold sweep");
    let mut maps = Vec::new();
    let mut gts = Vec::new();
    for v in dataset.videos.iter().filter(|v| v.label == Class::Before) {
        let Some(masks) = &v.gt_masks else { continue };
        for (f, m) in v.frames.iter().zip(masks) {
            let feats = backbone.features_of(&f.to_tensor())?;
            maps.push((cam_map(&feats, Class::Before, 0)?, f.height(), f.width()));
            gts.push(m.clone());
        }
    }
    ensure_contract!(!gts.is_empty(), "dataset has no annotated before frames");
    let mut sweep = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let preds: Vec<Mask> = maps.iter().map(|(m, h, w)| binarize(m, theta, *h, *w)).collect();
        sweep.push((theta, miou(&preds, &gts)?));
    }
    let (best_theta, best_miou) = sweep
        .iter()
        .copied()
        .fold((thetas[0], f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    Ok(SegmentationReport {
        sweep,
        best_theta,
        best_miou,
        frames: gts.len(),
    })
}

/// The four reconstruction-loss settings of the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossSetting {
    None,
    OnlyTemporal,
    OnlySpatial,
    Both,
}

impl LossSetting {
    pub const ALL: [LossSetting; 4] = [LossSetting::None, LossSetting::OnlyTemporal, LossSetting::OnlySpatial, LossSetting::Both];

    pub fn name(self) -> &'static str {
        match self {
            LossSetting::None => "None",
            LossSetting::OnlyTemporal => "Only Temporal",
            LossSetting::OnlySpatial => "Only Spatial",
            LossSetting::Both => "Both",
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let (spatial, temporal) = match self {
            LossSetting::None => (false, false),
            LossSetting::OnlyTemporal => (false, true),
            LossSetting::OnlySpatial => (true, false),
            LossSetting::Both => (true, true),
        };
        RunConfig {
            enable_spatial: spatial,
            enable_temporal: temporal,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub seed: u64,
    pub miou: f64,
    pub theta: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: LossSetting,
    pub cells: Vec<AblationCell>,
    pub mean_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, setting: LossSetting) -> &AblationRow {
        self.rows.iter().find(|r| r.setting == setting).expect("all settings present")
    }

    /// Settings with the highest mIoU for seed column `i` (ties included).
    pub fn winners(&self, i: usize) -> Vec<LossSetting> {
        let best = self.rows.iter().map(|r| r.cells[i].miou).fold(f64::NEG_INFINITY, f64::max);
        self.rows.iter().filter(|r| r.cells[i].miou == best).map(|r| r.setting).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("setting");
        for seed in &self.seeds {
            s.push_str(&format!(",seed_{seed},theta_{seed}"));
        }
        s.push_str(",mean\n");
        for r in &self.rows {
            s.push_str(r.setting.name());
            for c in &r.cells {
                s.push_str(&format!(",{},{}", c.miou, c.theta));
            }
            s.push_str(&format!(",{}\n", r.mean_miou));
        }
        s
    }
}

/// Runs `job(i)` for `i in 0..n` on up to `threads` workers; results come back
/// in index order.
pub(crate) fn run_jobs<R: Send>(n: usize, threads: usize, job: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&job).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<R>>> = (0..n).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = job(i);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Trains every loss setting with every seed on `train` and scores the
/// before-class CAMs on `val` at the best threshold of [`THETA_SWEEP`].
pub fn ablation_grid(train: &VideoDataset, val: &VideoDataset, base: &RunConfig, seeds: &[u64], threads: usize) -> Result<AblationTable> {
    ensure_contract!(!seeds.is_empty(), "ablation needs at least one seed");
    ensure_contract!(val.has_gt_masks(), "validation set has no ground-truth masks");
    let jobs: Vec<(LossSetting, u64)> = LossSetting::ALL
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let cells = run_jobs(jobs.len(), threads, |i| {
        let (setting, seed) = jobs[i];
        let cfg = RunConfig {
            seed,
            ..setting.apply(base)
        };
        let out = fit(train, None, &cfg, None)?;
        let report = evaluate_segmentation(&out.backbone, val, &THETA_SWEEP)?;
        log::info!("{} seed {seed}: mIoU {:.4} at theta {}", setting.name(), report.best_miou, report.best_theta);
        Ok(AblationCell {
            seed,
            miou: report.best_miou,
            theta: report.best_theta,
        })
    })?;
    let rows = LossSetting::ALL
        .iter()
        .enumerate()
        .map(|(k, &setting)| {
            let cells = cells[k * seeds.len()..(k + 1) * seeds.len()].to_vec();
            let mean_miou = cells.iter().map(|c| c.miou).sum::<f64>() / cells.len() as f64;
            AblationRow {
                setting,
                cells,
                mean_miou,
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

/// Accuracy table of the background-bias study, in percent.
/// `cells[i][j]`: classifier trained on variant `i`, tested on variant `j`,
/// where variant 0 is raw frames and 1 is background-removed frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasTable {
    pub cells: [[f64; 2]; 2],
}

impl BiasTable {
    pub const VARIANTS: [&'static str; 2] = ["with background", "without background"];

    pub fn to_csv(&self) -> String {
        let mut s = format!("train \\ val,{},{}\n", Self::VARIANTS[0], Self::VARIANTS[1]);
        for (i, row) in self.cells.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", Self::VARIANTS[i], row[0], row[1]));
        }
        s
    }
}

/// Trains a before/after classifier without reconstruction losses on raw
/// frames and another on background-removed frames, then tests both on both
/// validation variants.
pub fn bias_study(train: &VideoDataset, val: &VideoDataset, base: &RunConfig, tau: f32, threads: usize) -> Result<BiasTable> {
    let two = [Class::Before, Class::After];
    let strip = |d: &VideoDataset| -> Result<VideoDataset> {
        Ok(VideoDataset {
            videos: d.filter_classes(&two).videos.iter().map(|v| remove_background(v, tau)).collect::<Result<_>>()?,
        })
    };
    let train_variants = [train.filter_classes(&two), strip(train)?];
    let val_variants = [frame_inputs(&val.filter_classes(&two))?, frame_inputs(&strip(val)?)?];
    if val_variants[0].is_empty() {
        return Err(Error::Contract("validation set has no before/after frames".into()));
    }
    let cfg = LossSetting::None.apply(base);
    let rows = run_jobs(2, threads, |i| {
        let out = fit(&train_variants[i], None, &cfg, None)?;
        Ok([
            100.0 * accuracy(&out.backbone, &val_variants[0], &two)?,
            100.0 * accuracy(&out.backbone, &val_variants[1], &two)?,
        ])
    })?;
    Ok(BiasTable {
        cells: [rows[0], rows[1]],
    })
}

//! Synthetic conveyor-belt videos and the on-disk dataset format.
//!
//! "Before" videos carry legal and illegal shapes, "after" videos legal
//! shapes only. Shapes translate rigidly at the belt velocity over a static
//! background, so ground-truth masks and flow are exact.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Error, Result};
use crate::image::{Image, Mask};
use crate::model::Class;
use crate::temporal::FlowField;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundStyle {
    /// One flat gray level per video.
    Plain,
    /// Smooth static gray texture, drawn per video.
    Textured,
    /// Textured with a class-specific tint: warm for before, cool for after.
    Biased,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Belt velocity in pixels per frame, `[vx, vy]`.
    pub velocity: [i32; 2],
    /// Inclusive range of legal shapes per video.
    pub legal_count: [usize; 2],
    /// Inclusive range of illegal shapes per before video.
    pub illegal_count: [usize; 2],
    /// Inclusive range of shape side length (disc diameter) in pixels.
    pub shape_size: [usize; 2],
    pub legal_palette: Vec<[f32; 3]>,
    pub illegal_palette: Vec<[f32; 3]>,
    pub background_before: BackgroundStyle,
    pub background_after: BackgroundStyle,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            frames: 12,
            velocity: [2, 0],
            legal_count: [2, 4],
            illegal_count: [1, 2],
            shape_size: [6, 10],
            legal_palette: vec![
                [0.15, 0.75, 0.20],
                [0.10, 0.55, 0.85],
                [0.30, 0.85, 0.60],
                [0.20, 0.35, 0.90],
            ],
            illegal_palette: vec![
                [0.90, 0.15, 0.10],
                [0.95, 0.55, 0.10],
                [0.80, 0.10, 0.25],
            ],
            background_before: BackgroundStyle::Textured,
            background_after: BackgroundStyle::Textured,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// Default scene with class-tinted backgrounds.
    pub fn biased() -> Self {
        SceneSpec {
            background_before: BackgroundStyle::Biased,
            background_after: BackgroundStyle::Biased,
            ..SceneSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("frame size must be positive".into());
        }
        if self.frames == 0 {
            return bad("videos need at least one frame".into());
        }
        for (name, r) in [
            ("legal_count", self.legal_count),
            ("illegal_count", self.illegal_count),
            ("shape_size", self.shape_size),
        ] {
            if r[0] > r[1] {
                return bad(format!("{name} range {r:?} is empty"));
            }
        }
        if self.shape_size[0] == 0 || self.shape_size[1] > self.height.min(self.width) {
            return bad(format!("shape_size {:?} does not fit the frame", self.shape_size));
        }
        if self.legal_palette.is_empty() && self.legal_count[1] > 0 {
            return bad("legal palette is empty".into());
        }
        if self.illegal_palette.is_empty() && self.illegal_count[1] > 0 {
            return bad("illegal palette is empty".into());
        }
        if let Some(c) = self.legal_palette.iter().find(|c| self.illegal_palette.contains(c)) {
            return bad(format!("color {c:?} is in both legal and illegal palettes"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

/// One video with its label and optional annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub label: Class,
    pub frames: Vec<Image>,
    /// Per-frame illegal-object masks (before videos only).
    pub gt_masks: Option<Vec<Mask>>,
    /// Per-frame foreground masks from background subtraction.
    pub fg_masks: Option<Vec<Mask>>,
    /// Flow `k` maps frame `k` into frame `k + 1`; `frames − 1` entries.
    pub gt_flow: Option<Vec<FlowField>>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, Image::height)
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, Image::width)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VideoDataset {
    pub videos: Vec<VideoSample>,
}

/// Three consecutive frames of one video, centred on `center`.
#[derive(Clone, Copy, Debug)]
pub struct Triplet<'a> {
    pub video: &'a VideoSample,
    pub video_index: usize,
    pub center: usize,
}

impl<'a> Triplet<'a> {
    pub fn label(&self) -> Class {
        self.video.label
    }

    pub fn frames(&self) -> [&'a Image; 3] {
        let f = &self.video.frames;
        [&f[self.center - 1], &f[self.center], &f[self.center + 1]]
    }

    /// Recorded pixel flows from the central frame into the previous and next
    /// frames, if the video has flow.
    pub fn gt_flows(&self) -> Option<(FlowField, FlowField)> {
        let flows = self.video.gt_flow.as_ref()?;
        Some((flows[self.center - 1].negated(), flows[self.center].clone()))
    }
}

impl VideoDataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn count(&self, class: Class) -> usize {
        self.videos.iter().filter(|v| v.label == class).count()
    }

    pub fn has_gt_masks(&self) -> bool {
        self.videos.iter().any(|v| v.gt_masks.is_some())
    }

    /// All interior-frame triplets in video order. Videos shorter than three
    /// frames are skipped with a warning.
    pub fn triplets(&self) -> Vec<Triplet<'_>> {
        let mut out = Vec::new();
        for (video_index, video) in self.videos.iter().enumerate() {
            if video.len() < 3 {
                log::warn!("video {} has {} frames, skipping", video.id, video.len());
                continue;
            }
            out.extend((1..video.len() - 1).map(|center| Triplet {
                video,
                video_index,
                center,
            }));
        }
        out
    }

    /// [`triplets`](Self::triplets) in a seeded random order.
    pub fn shuffled_triplets(&self, seed: u64) -> Vec<Triplet<'_>> {
        let mut t = self.triplets();
        t.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        t
    }

    /// Stratified split at video granularity. Each class keeps
    /// `round(n · train_fraction)` videos for training, at least one on each
    /// side; relative order within each part is preserved.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(VideoDataset, VideoDataset)> {
        ensure_contract!(
            train_fraction > 0.0 && train_fraction < 1.0,
            "train fraction must lie in (0, 1), got {train_fraction}"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_train = vec![false; self.videos.len()];
        for class in Class::ALL {
            let mut idx: Vec<usize> = (0..self.videos.len())
                .filter(|&i| self.videos[i].label == class)
                .collect();
            if idx.is_empty() {
                continue;
            }
            ensure_contract!(
                idx.len() >= 2,
                "class {class} has {} video(s); a split needs at least 2",
                idx.len()
            );
            let n_train = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
            idx.shuffle(&mut rng);
            for &i in &idx[..n_train] {
                in_train[i] = true;
            }
        }
        let pick = |want: bool| VideoDataset {
            videos: self
                .videos
                .iter()
                .zip(&in_train)
                .filter(|(_, &t)| t == want)
                .map(|(v, _)| v.clone())
                .collect(),
        };
        Ok((pick(true), pick(false)))
    }

    /// Dataset restricted to the given classes.
    pub fn filter_classes(&self, classes: &[Class]) -> VideoDataset {
        VideoDataset {
            videos: self
                .videos
                .iter()
                .filter(|v| classes.contains(&v.label))
                .cloned()
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.videos.len());
        for v in &self.videos {
            let vdir = dir.join(&v.id);
            fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
            let rel = |name: String| format!("{}/{}", v.id, name);
            let mut frames = Vec::with_capacity(v.len());
            for (k, f) in v.frames.iter().enumerate() {
                let p = rel(format!("frame_{k:04}.png"));
                f.save_png(&dir.join(&p))?;
                frames.push(p);
            }
            let masks = save_masks(dir, &v.gt_masks, |k| rel(format!("mask_{k:04}.png")))?;
            let fg_masks = save_masks(dir, &v.fg_masks, |k| rel(format!("fg_{k:04}.png")))?;
            let flows = match &v.gt_flow {
                None => None,
                Some(flows) => {
                    let mut paths = Vec::with_capacity(flows.len());
                    for (k, fl) in flows.iter().enumerate() {
                        let p = rel(format!("flow_{k:04}.flo"));
                        fl.save_flo(&dir.join(&p))?;
                        paths.push(p);
                    }
                    Some(paths)
                }
            };
            entries.push(VideoEntry {
                id: v.id.clone(),
                label: v.label.name().to_string(),
                frame_count: v.len(),
                frames,
                masks,
                fg_masks,
                flows,
            });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            classes: Class::ALL.iter().map(|c| c.name().to_string()).collect(),
            videos: entries,
        };
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<VideoDataset> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Version {
                path,
                found: manifest.version,
                expected: MANIFEST_VERSION,
            });
        }
        let mut videos = Vec::with_capacity(manifest.videos.len());
        for e in manifest.videos {
            let label = Class::from_name(&e.label).ok_or_else(|| {
                Error::format(
                    &path,
                    format!("video {}: label {:?} is not one of before/after/background", e.id, e.label),
                )
            })?;
            if e.frames.len() != e.frame_count {
                return Err(Error::format(
                    &path,
                    format!("video {}: frame_count {} but {} frame paths", e.id, e.frame_count, e.frames.len()),
                ));
            }
            let frames = e
                .frames
                .iter()
                .map(|p| Image::load_png(&dir.join(p), 3))
                .collect::<Result<Vec<_>>>()?;
            let load_masks = |paths: &Option<Vec<String>>| -> Result<Option<Vec<Mask>>> {
                paths
                    .as_ref()
                    .map(|ps| ps.iter().map(|p| Mask::load_png(&dir.join(p))).collect())
                    .transpose()
            };
            let gt_flow = e
                .flows
                .as_ref()
                .map(|ps| ps.iter().map(|p| FlowField::load_flo(&dir.join(p))).collect::<Result<Vec<_>>>())
                .transpose()?;
            videos.push(VideoSample {
                gt_masks: load_masks(&e.masks)?,
                fg_masks: load_masks(&e.fg_masks)?,
                id: e.id,
                label,
                frames,
                gt_flow,
            });
        }
        Ok(VideoDataset { videos })
    }
}

fn save_masks(
    dir: &Path,
    masks: &Option<Vec<Mask>>,
    name: impl Fn(usize) -> String,
) -> Result<Option<Vec<String>>> {
    let Some(masks) = masks else { return Ok(None) };
    let mut paths = Vec::with_capacity(masks.len());
    for (k, m) in masks.iter().enumerate() {
        let p = name(k);
        m.save_png(&dir.join(&p))?;
        paths.push(p);
    }
    Ok(Some(paths))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    classes: Vec<String>,
    videos: Vec<VideoEntry>,
}

#[derive(Serialize, Deserialize)]
struct VideoEntry {
    id: String,
    label: String,
    frame_count: usize,
    frames: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    masks: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fg_masks: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flows: Option<Vec<String>>,
}

/// Path of a dataset's manifest.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Rect,
    Disc,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: ShapeKind,
    /// Top-left corner at the reference (middle) frame.
    x: i32,
    y: i32,
    w: i32,
    h: i32,
    color: [f32; 3],
    illegal: bool,
}

impl Shape {
    fn covers(&self, px: i32, py: i32, dx: i32, dy: i32) -> bool {
        let (lx, ly) = (px - self.x - dx, py - self.y - dy);
        if lx < 0 || ly < 0 || lx >= self.w || ly >= self.h {
            return false;
        }
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Disc => {
                let r = self.w as f32 / 2.0;
                let (cx, cy) = (lx as f32 + 0.5 - r, ly as f32 + 0.5 - r);
                cx * cx + cy * cy <= r * r
            }
        }
    }

    fn overlaps(&self, other: &Shape, margin: i32) -> bool {
        self.x < other.x + other.w + margin
            && other.x < self.x + self.w + margin
            && self.y < other.y + other.h + margin
            && other.y < self.y + self.h + margin
    }
}

/// Generates `n_before` before videos followed by `n_after` after videos.
/// Video `i` draws from its own random stream, so any subset can be
/// regenerated independently.
pub fn generate(spec: &SceneSpec, n_before: usize, n_after: usize) -> Result<VideoDataset> {
    spec.validate()?;
    ensure_contract!(n_before >= 1 && n_after >= 1, "need at least one video per class");
    let videos = (0..n_before + n_after)
        .map(|i| {
            let label = if i < n_before { Class::Before } else { Class::After };
            generate_video(spec, i, label)
        })
        .collect();
    Ok(VideoDataset { videos })
}

/// One video of class `label` from stream `index` of the spec's seed.
pub fn generate_video(spec: &SceneSpec, index: usize, label: Class) -> VideoSample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (h, w) = (spec.height, spec.width);
    let style = match label {
        Class::Before => spec.background_before,
        _ => spec.background_after,
    };
    let background = render_background(&mut rng, style, label, h, w);

    let mut shapes: Vec<Shape> = Vec::new();
    let n_legal = rng.random_range(spec.legal_count[0]..=spec.legal_count[1]);
    let n_illegal = if label == Class::Before {
        rng.random_range(spec.illegal_count[0]..=spec.illegal_count[1])
    } else {
        0
    };
    for (count, illegal) in [(n_illegal, true), (n_legal, false)] {
        let palette = if illegal { &spec.illegal_palette } else { &spec.legal_palette };
        for _ in 0..count {
            for _attempt in 0..200 {
                let size = rng.random_range(spec.shape_size[0]..=spec.shape_size[1]) as i32;
                let kind = if rng.random_bool(0.5) { ShapeKind::Rect } else { ShapeKind::Disc };
                let (sw, sh) = match kind {
                    ShapeKind::Rect => (size, rng.random_range(spec.shape_size[0]..=spec.shape_size[1]) as i32),
                    ShapeKind::Disc => (size, size),
                };
                let cand = Shape {
                    kind,
                    x: rng.random_range(0..=(w as i32 - sw)),
                    y: rng.random_range(0..=(h as i32 - sh)),
                    w: sw,
                    h: sh,
                    color: palette[rng.random_range(0..palette.len())],
                    illegal,
                };
                if shapes.iter().all(|s| !s.overlaps(&cand, 2)) {
                    shapes.push(cand);
                    break;
                }
            }
        }
    }

    let noise = Normal::new(0.0f32, spec.noise_sigma).expect("validated sigma");
    let reference = (spec.frames / 2) as i32;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let dt = t as i32 - reference;
        let (dx, dy) = (spec.velocity[0] * dt, spec.velocity[1] * dt);
        let mut img = background.clone();
        let mut mask = Mask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                if let Some(s) = shapes.iter().find(|s| s.covers(x as i32, y as i32, dx, dy)) {
                    for c in 0..3 {
                        img.set(c, y, x, s.color[c]);
                    }
                    if s.illegal {
                        mask.set(y, x, true);
                    }
                }
            }
        }
        if spec.noise_sigma > 0.0 {
            for v in img.data_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        img.quantize_u8();
        frames.push(img);
        masks.push(mask);
    }
    let flow = FlowField::constant(h, w, spec.velocity[0] as f32, spec.velocity[1] as f32);
    VideoSample {
        id: format!("{}_{index:04}", label.name()),
        label,
        frames,
        gt_masks: (label == Class::Before).then_some(masks),
        fg_masks: None,
        gt_flow: Some(vec![flow; spec.frames.saturating_sub(1)]),
    }
}

fn render_background(rng: &mut ChaCha8Rng, style: BackgroundStyle, label: Class, h: usize, w: usize) -> Image {
    let base: f32 = rng.random_range(0.07..0.13);
    let mut img = Image::zeros(3, h, w);
    let textured = style != BackgroundStyle::Plain;
    // a few low-frequency waves plus static per-pixel grain
    let waves: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
                rng.random_range(0.0..std::f32::consts::TAU),
            )
        })
        .collect();
    let tint = match (style, label) {
        (BackgroundStyle::Biased, Class::Before) => [0.10, 0.0, -0.05],
        (BackgroundStyle::Biased, _) => [-0.05, 0.0, 0.12],
        _ => [0.0; 3],
    };
    for y in 0..h {
        for x in 0..w {
            let mut v = base;
            if textured {
                let wave: f32 = waves
                    .iter()
                    .map(|&(fx, fy, ph)| (fx * x as f32 + fy * y as f32 + ph).sin())
                    .sum::<f32>();
                v += 0.01 * wave + rng.random_range(-0.015..0.015);
            }
            for c in 0..3 {
                img.set(c, y, x, (v + tint[c]).clamp(0.0, 1.0));
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            height: 32,
            width: 32,
            frames: 6,
            shape_size: [4, 6],
            ..SceneSpec::default()
        }
    }

    #[test]
    fn deterministic_by_seed() {
        let a = generate(&small_spec(), 2, 2).unwrap();
        let b = generate(&small_spec(), 2, 2).unwrap();
        assert_eq!(a, b);
        let c = generate(&SceneSpec { seed: 1, ..small_spec() }, 2, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn overlapping_palettes_rejected() {
        let mut spec = small_spec();
        spec.illegal_palette.push(spec.legal_palette[0]);
        assert!(matches!(generate(&spec, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn no_illegal_shapes_gives_empty_masks() {
        let spec = SceneSpec {
            illegal_count: [0, 0],
            ..small_spec()
        };
        let d = generate(&spec, 1, 1).unwrap();
        assert!(d.videos[0].gt_masks.as_ref().unwrap().iter().all(Mask::is_empty_mask));
        assert!(d.videos[1].gt_masks.is_none());
    }

    #[test]
    fn flow_is_constant_velocity() {
        let d = generate(&small_spec(), 1, 1).unwrap();
        for v in &d.videos {
            let flows = v.gt_flow.as_ref().unwrap();
            assert_eq!(flows.len(), v.len() - 1);
            assert!(flows.iter().all(|f| f == &FlowField::constant(32, 32, 2.0, 0.0)));
        }
    }

    #[test]
    fn triplet_counts() {
        let d = generate(&SceneSpec { frames: 10, ..small_spec() }, 1, 1).unwrap();
        assert_eq!(d.triplets().len(), 16);
        let d3 = generate(&SceneSpec { frames: 3, ..small_spec() }, 1, 1).unwrap();
        assert_eq!(d3.triplets().len(), 2);
        let d2 = generate(&SceneSpec { frames: 2, ..small_spec() }, 1, 1).unwrap();
        assert!(d2.triplets().is_empty());
    }

    #[test]
    fn split_is_stratified_partition() {
        let d = generate(&SceneSpec { frames: 3, ..small_spec() }, 10, 10).unwrap();
        let (tr, va) = d.split(0.8, 3).unwrap();
        assert_eq!((tr.count(Class::Before), tr.count(Class::After)), (8, 8));
        assert_eq!((va.count(Class::Before), va.count(Class::After)), (2, 2));
        let mut ids: Vec<_> = tr.videos.iter().chain(&va.videos).map(|v| v.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 20);
        assert_eq!(d.split(0.8, 3).unwrap(), (tr, va));
        let one = generate(&SceneSpec { frames: 3, ..small_spec() }, 1, 3).unwrap();
        assert!(one.split(0.8, 0).is_err());
    }
}

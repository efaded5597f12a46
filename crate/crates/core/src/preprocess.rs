//! Median background model, foreground masks and the three-class expansion
//! of a before/after dataset (before, after, background).

use crate::error::{ensure_contract, ensure_dims, Result};
use crate::image::{Image, Mask};
use crate::model::Class;
use crate::synthdata::{VideoDataset, VideoSample};

/// Default foreground threshold on the `[0, 1]` grayscale difference.
pub const DEFAULT_TAU: f32 = 0.12;

/// Per-pixel median of the grayscale frames. Even counts take the lower
/// median.
pub fn estimate_background(frames: &[Image]) -> Result<Image> {
    ensure_contract!(!frames.is_empty(), "background of an empty video");
    let grays: Vec<Image> = frames.iter().map(Image::to_gray).collect();
    let (h, w) = (grays[0].height(), grays[0].width());
    for g in &grays[1..] {
        ensure_dims!(
            g.height() == h && g.width() == w,
            "frame {}x{} differs from {h}x{w}",
            g.height(),
            g.width()
        );
    }
    let mut column = vec![0.0f32; grays.len()];
    let mid = (grays.len() - 1) / 2;
    let data = (0..h * w)
        .map(|i| {
            for (c, g) in column.iter_mut().zip(&grays) {
                *c = g.data()[i];
            }
            column.sort_unstable_by(f32::total_cmp);
            column[mid]
        })
        .collect();
    Image::new(1, h, w, data)
}

/// `|gray(frame) − background| > tau`, cleaned by [`majority_filter`].
pub fn foreground_mask(frame: &Image, background: &Image, tau: f32) -> Result<Mask> {
    ensure_dims!(
        background.channels() == 1
            && frame.height() == background.height()
            && frame.width() == background.width(),
        "background {}x{}x{} does not fit frame {}x{}",
        background.channels(),
        background.height(),
        background.width(),
        frame.height(),
        frame.width()
    );
    let gray = frame.to_gray();
    let raw = Mask::new(
        frame.height(),
        frame.width(),
        gray.data()
            .iter()
            .zip(background.data())
            .map(|(&f, &b)| (f - b).abs() > tau)
            .collect(),
    )?;
    Ok(majority_filter(&raw))
}

/// 3×3 majority cleanup: a pixel flips when at least three quarters of its
/// in-bounds neighbors disagree with it. Isolated pixels and thin speckle go
/// away; solid blocks keep their corners.
pub fn majority_filter(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    Mask::from_fn(h, w, |y, x| {
        let v = mask.get(y, x);
        let (mut neighbors, mut disagree) = (0, 0);
        for ny in y.saturating_sub(1)..(y + 2).min(h) {
            for nx in x.saturating_sub(1)..(x + 2).min(w) {
                if (ny, nx) != (y, x) {
                    neighbors += 1;
                    disagree += usize::from(mask.get(ny, nx) != v);
                }
            }
        }
        if neighbors > 0 && 4 * disagree >= 3 * neighbors {
            !v
        } else {
            v
        }
    })
}

/// Foreground masks of every frame against the video's median background.
pub fn video_foreground(frames: &[Image], tau: f32) -> Result<Vec<Mask>> {
    let bg = estimate_background(frames)?;
    frames.iter().map(|f| foreground_mask(f, &bg, tau)).collect()
}

/// Copy of `video` with background pixels zeroed; foreground masks are
/// stored alongside.
pub fn remove_background(video: &VideoSample, tau: f32) -> Result<VideoSample> {
    let masks = video_foreground(&video.frames, tau)?;
    let frames = video
        .frames
        .iter()
        .zip(&masks)
        .map(|(f, m)| f.masked(m))
        .collect::<Result<_>>()?;
    Ok(VideoSample {
        frames,
        fg_masks: Some(masks),
        ..video.clone()
    })
}

/// Background-only copy of `video` (foreground zeroed), labelled
/// [`Class::Background`].
pub fn background_only(video: &VideoSample, masks: &[Mask]) -> Result<VideoSample> {
    let frames = video
        .frames
        .iter()
        .zip(masks)
        .map(|(f, m)| f.masked(&m.inverted()))
        .collect::<Result<_>>()?;
    Ok(VideoSample {
        id: format!("{}_bg", video.id),
        label: Class::Background,
        frames,
        gt_masks: None,
        fg_masks: Some(masks.to_vec()),
        gt_flow: video.gt_flow.clone(),
    })
}

/// Turns a before/after dataset into before, after and background videos:
/// every source video yields its foreground-only copy (same label) and a
/// background-only copy. Foreground copies come first, in source order.
pub fn expand_three_class(dataset: &VideoDataset, tau: f32) -> Result<VideoDataset> {
    let mut fg = Vec::with_capacity(dataset.videos.len());
    let mut bg = Vec::with_capacity(dataset.videos.len());
    for v in &dataset.videos {
        ensure_contract!(
            v.label != Class::Background,
            "video {} is already labelled background",
            v.id
        );
        let cleaned = remove_background(v, tau)?;
        bg.push(background_only(v, cleaned.fg_masks.as_deref().expect("masks set"))?);
        fg.push(cleaned);
    }
    fg.extend(bg);
    Ok(VideoDataset { videos: fg })
}

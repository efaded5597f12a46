//! Temporal branch: class activation maps of the three triplet frames, lateral
//! maps warped onto the central frame, fused by pixel-wise maximum and
//! compared with the central map.

mod flow;

use std::rc::Rc;

pub use flow::{estimate_flow, lucas_kanade, FlowField, FlowMethod, LucasKanadeParams};

use crate::error::{ensure_dims, Result};
use crate::image::Image;
use crate::model::{BoundBackbone, Class};
use crate::tensor::{Real, Tensor, Var, WarpPlan};

/// Floor of the CAM normalizer, so an all-zero map stays zero.
pub const CAM_EPS: f64 = 1e-6;

/// Max-normalized class activation map on the feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    values: Tensor<f32>,
    class: Class,
    frame_index: usize,
}

impl SaliencyMap {
    /// Wraps `h × w` values, which must lie in `[0, 1]`.
    pub fn new(values: Tensor<f32>, class: Class, frame_index: usize) -> Result<Self> {
        ensure_dims!(values.rank() == 2, "saliency map must be 2-D, got {:?}", values.shape());
        crate::error::ensure_contract!(
            values.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
            "saliency values must lie in [0, 1]"
        );
        Ok(SaliencyMap {
            values,
            class,
            frame_index,
        })
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn class(&self) -> Class {
        self.class
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Grayscale image of the map, for inspection.
    pub fn to_image(&self) -> Image {
        Image::new(1, self.height(), self.width(), self.values.data().to_vec())
            .expect("map shape")
    }
}

/// `M = ReLU(f[y]) / max(max ReLU(f[y]), ε)` as a graph node of shape
/// `[1, 1, h, w]`. With `detach_max` the normalizer is treated as a constant.
pub fn cam<'g, T: Real>(features: &Var<'g, T>, class: Class, detach_max: bool) -> Result<Var<'g, T>> {
    let r = features.select_channel(class.index())?.relu();
    let mut m = r.max_all()?.clamp_min(T::lit(CAM_EPS));
    if detach_max {
        m = m.detach();
    }
    r.div_scalar(&m)
}

/// CAM of a plain `1 × 3 × h × w` feature tensor.
pub fn cam_map<T: Real>(features: &Tensor<T>, class: Class, frame_index: usize) -> Result<SaliencyMap> {
    let (n, c, h, w) = features.dims4()?;
    ensure_dims!(n == 1 && class.index() < c, "cam needs a 1x3xHxW tensor, got {:?}", features.shape());
    let plane = &features.data()[class.index() * h * w..(class.index() + 1) * h * w];
    let relu: Vec<f64> = plane.iter().map(|v| v.to_f64_lossy().max(0.0)).collect();
    let m = relu.iter().copied().fold(0.0f64, f64::max).max(CAM_EPS);
    let values = relu.iter().map(|&v| ((v / m) as f32).min(1.0)).collect();
    SaliencyMap::new(Tensor::new(&[h, w], values)?, class, frame_index)
}

/// Backward warp of a `[.., h, w]` map node; the flow is not differentiated.
pub fn warp<'g, T: Real>(map: &Var<'g, T>, flow: &FlowField) -> Result<Var<'g, T>> {
    let plan = Rc::new(WarpPlan::new(flow.height(), flow.width(), flow.dx(), flow.dy())?);
    map.warp(&plan)
}

/// Backward warp of a plain saliency map: `out(p) = m(p + flow(p))`, bilinear,
/// zero outside the grid.
pub fn warp_map(map: &SaliencyMap, flow: &FlowField, frame_index: usize) -> Result<SaliencyMap> {
    ensure_dims!(
        map.height() == flow.height() && map.width() == flow.width(),
        "warp: map {}x{} vs flow {}x{}",
        map.height(),
        map.width(),
        flow.height(),
        flow.width()
    );
    let plan = WarpPlan::<f32>::new(flow.height(), flow.width(), flow.dx(), flow.dy())?;
    let values = plan.apply(map.values.data()).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    SaliencyMap::new(Tensor::new(map.values.shape(), values)?, map.class, frame_index)
}

/// Pixel-wise maximum of the two warped lateral maps.
pub fn fuse<'g, T: Real>(prev_warped: &Var<'g, T>, next_warped: &Var<'g, T>) -> Result<Var<'g, T>> {
    prev_warped.elementwise_max(next_warped)
}

/// Plain-tensor version of [`fuse`].
pub fn fuse_maps(prev_warped: &SaliencyMap, next_warped: &SaliencyMap) -> Result<SaliencyMap> {
    crate::tensor::check_same_shape("fuse", &prev_warped.values, &next_warped.values)?;
    let values = prev_warped
        .values
        .data()
        .iter()
        .zip(next_warped.values.data())
        .map(|(&a, &b)| a.max(b))
        .collect();
    SaliencyMap::new(
        Tensor::new(prev_warped.values.shape(), values)?,
        prev_warped.class,
        prev_warped.frame_index,
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TemporalOptions {
    /// Stop gradients through the fused map.
    pub detach_fused: bool,
    /// Treat the CAM normalizer as a constant.
    pub detach_cam_max: bool,
}

/// Intermediate maps and loss of the temporal branch.
pub struct TemporalOutput<'g, T: Real> {
    pub loss: Var<'g, T>,
    pub m_prev: Var<'g, T>,
    pub m_t: Var<'g, T>,
    pub m_next: Var<'g, T>,
    pub prev_warped: Var<'g, T>,
    pub next_warped: Var<'g, T>,
    pub fused: Var<'g, T>,
}

/// Flows on the feature grid mapping the central frame into its neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct LateralFlows {
    pub to_prev: FlowField,
    pub to_next: FlowField,
}

/// `‖M_t − max(warp(M_{t−1}), warp(M_{t+1}))‖₁` for class `class`.
///
/// `central_features` may carry already computed `f_t`; otherwise it is
/// computed here.
pub fn temporal_loss<'g, T: Real>(
    backbone: &BoundBackbone<'g, T>,
    frames: [&Tensor<T>; 3],
    class: Class,
    flows: &LateralFlows,
    options: TemporalOptions,
    central_features: Option<Var<'g, T>>,
) -> Result<TemporalOutput<'g, T>> {
    let f_prev = backbone.features(frames[0])?;
    let f_t = match central_features {
        Some(f) => f,
        None => backbone.features(frames[1])?,
    };
    let f_next = backbone.features(frames[2])?;
    temporal_loss_from_features([&f_prev, &f_t, &f_next], class, flows, options)
}

/// [`temporal_loss`] on already computed feature spaces of the three frames.
pub fn temporal_loss_from_features<'g, T: Real>(
    features: [&Var<'g, T>; 3],
    class: Class,
    flows: &LateralFlows,
    options: TemporalOptions,
) -> Result<TemporalOutput<'g, T>> {
    let m_prev = cam(features[0], class, options.detach_cam_max)?;
    let m_t = cam(features[1], class, options.detach_cam_max)?;
    let m_next = cam(features[2], class, options.detach_cam_max)?;
    let prev_warped = warp(&m_prev, &flows.to_prev)?;
    let next_warped = warp(&m_next, &flows.to_next)?;
    let mut fused = fuse(&prev_warped, &next_warped)?;
    if options.detach_fused {
        fused = fused.detach();
    }
    let loss = m_t.l1_distance(&fused)?;
    Ok(TemporalOutput {
        loss,
        m_prev,
        m_t,
        m_next,
        prev_warped,
        next_warped,
        fused,
    })
}

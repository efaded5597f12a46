//! Dense flow fields, Middlebury `.flo` IO and a pyramidal Lucas–Kanade
//! estimator.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, ensure_dims, Error, Result};
use crate::image::Image;

const FLO_MAGIC: f32 = 202021.25;

/// Per-pixel displacement mapping a target grid into a source grid:
/// pixel `p` of the target corresponds to `p + (dx, dy)` in the source.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    dx: Vec<f32>,
    dy: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, dx: Vec<f32>, dy: Vec<f32>) -> Result<Self> {
        ensure_dims!(
            dx.len() == height * width && dy.len() == height * width,
            "flow {height}x{width} needs {} values per component",
            height * width
        );
        ensure_contract!(
            dx.iter().chain(&dy).all(|v| v.is_finite()),
            "flow contains non-finite values"
        );
        Ok(FlowField {
            height,
            width,
            dx,
            dy,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        FlowField {
            height,
            width,
            dx: vec![dx; height * width],
            dy: vec![dy; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dx(&self) -> &[f32] {
        &self.dx
    }

    pub fn dy(&self) -> &[f32] {
        &self.dy
    }

    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    pub fn negated(&self) -> FlowField {
        FlowField {
            height: self.height,
            width: self.width,
            dx: self.dx.iter().map(|v| -v).collect(),
            dy: self.dy.iter().map(|v| -v).collect(),
        }
    }

    pub fn mean(&self) -> (f32, f32) {
        let n = (self.height * self.width).max(1) as f64;
        let mx = self.dx.iter().map(|&v| v as f64).sum::<f64>() / n;
        let my = self.dy.iter().map(|&v| v as f64).sum::<f64>() / n;
        (mx as f32, my as f32)
    }

    /// Pixel flow expressed on a grid `stride` times coarser: displacements are
    /// divided by `stride` and each `stride × stride` block is averaged.
    pub fn to_feature_grid(&self, stride: usize) -> Result<FlowField> {
        ensure_contract!(stride >= 1, "stride must be >= 1");
        ensure_dims!(
            self.height % stride == 0 && self.width % stride == 0,
            "flow {}x{} not divisible by stride {stride}",
            self.height,
            self.width
        );
        let (h, w) = (self.height / stride, self.width / stride);
        let norm = 1.0 / (stride * stride * stride) as f64;
        let mut dx = vec![0.0f32; h * w];
        let mut dy = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut sx, mut sy) = (0.0f64, 0.0f64);
                for yy in y * stride..(y + 1) * stride {
                    for xx in x * stride..(x + 1) * stride {
                        let i = yy * self.width + xx;
                        sx += self.dx[i] as f64;
                        sy += self.dy[i] as f64;
                    }
                }
                dx[y * w + x] = (sx * norm) as f32;
                dy[y * w + x] = (sy * norm) as f32;
            }
        }
        FlowField::new(h, w, dx, dy)
    }

    pub fn save_flo(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut bytes = Vec::with_capacity(12 + 8 * self.dx.len());
        bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        bytes.extend_from_slice(&(self.width as i32).to_le_bytes());
        bytes.extend_from_slice(&(self.height as i32).to_le_bytes());
        for (dx, dy) in self.dx.iter().zip(&self.dy) {
            bytes.extend_from_slice(&dx.to_le_bytes());
            bytes.extend_from_slice(&dy.to_le_bytes());
        }
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_flo(path: &Path) -> Result<FlowField> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::parse_flo(&bytes, path)
    }

    fn parse_flo(bytes: &[u8], path: &Path) -> Result<FlowField> {
        let word = |i: usize| -> Option<[u8; 4]> { bytes.get(4 * i..4 * i + 4).map(|b| [b[0], b[1], b[2], b[3]]) };
        let header = (word(0), word(1), word(2));
        let (Some(m), Some(w), Some(h)) = header else {
            return Err(Error::format(path, "truncated .flo header"));
        };
        if f32::from_le_bytes(m) != FLO_MAGIC {
            return Err(Error::format(path, "bad .flo magic"));
        }
        let (w, h) = (i32::from_le_bytes(w), i32::from_le_bytes(h));
        if w < 0 || h < 0 {
            return Err(Error::format(path, "negative .flo dimensions"));
        }
        let (w, h) = (w as usize, h as usize);
        if bytes.len() != 12 + 8 * w * h {
            return Err(Error::format(
                path,
                format!("expected {} bytes for {w}x{h} flow, found {}", 12 + 8 * w * h, bytes.len()),
            ));
        }
        let mut dx = Vec::with_capacity(w * h);
        let mut dy = Vec::with_capacity(w * h);
        for i in 0..w * h {
            dx.push(f32::from_le_bytes(word(3 + 2 * i).expect("length checked")));
            dy.push(f32::from_le_bytes(word(4 + 2 * i).expect("length checked")));
        }
        FlowField::new(h, w, dx, dy).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// How lateral-frame flow is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMethod {
    /// Exact flow recorded by the scene generator.
    #[serde(rename = "groundtruth")]
    GroundTruth,
    LucasKanade,
}

impl std::str::FromStr for FlowMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "groundtruth" => Ok(FlowMethod::GroundTruth),
            "lucas_kanade" => Ok(FlowMethod::LucasKanade),
            other => Err(Error::Config(format!(
                "unknown flow method {other:?} (expected groundtruth or lucas_kanade)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LucasKanadeParams {
    /// Halvings above the full-resolution image (0 = single scale).
    pub levels: usize,
    /// Odd window side.
    pub window: usize,
    pub iterations: usize,
    /// Minimum determinant of the structure tensor for an update.
    pub min_det: f32,
}

impl Default for LucasKanadeParams {
    fn default() -> Self {
        LucasKanadeParams {
            levels: 3,
            window: 7,
            iterations: 3,
            min_det: 1e-6,
        }
    }
}

/// Pixel flow from `target` into `source` with the requested method.
/// `groundtruth` passes through `recorded` unchanged.
pub fn estimate_flow(
    target: &Image,
    source: &Image,
    method: FlowMethod,
    recorded: Option<&FlowField>,
) -> Result<FlowField> {
    ensure_dims!(
        target.height() == source.height() && target.width() == source.width(),
        "flow between frames of different size: {}x{} vs {}x{}",
        target.height(),
        target.width(),
        source.height(),
        source.width()
    );
    match method {
        FlowMethod::GroundTruth => {
            let flow = recorded.ok_or_else(|| {
                Error::Config("ground-truth flow requested but the dataset has none".into())
            })?;
            ensure_dims!(
                flow.height == target.height() && flow.width == target.width(),
                "recorded flow {}x{} does not match frame {}x{}",
                flow.height,
                flow.width,
                target.height(),
                target.width()
            );
            Ok(flow.clone())
        }
        FlowMethod::LucasKanade => Ok(lucas_kanade(target, source, &LucasKanadeParams::default())),
    }
}

#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f32>,
}

impl Plane {
    fn at(&self, y: usize, x: usize) -> f32 {
        self.v[y * self.w + x]
    }

    /// Bilinear sample; `None` when the point is outside the grid.
    fn sample(&self, y: f32, x: f32) -> Option<f32> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.w - 1) as f32 && y <= (self.h - 1) as f32) {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.h.saturating_sub(2));
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
        let bot = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
        Some(top * (1.0 - fy) + bot * fy)
    }

    /// 5-tap binomial low-pass (borders replicated), then every second pixel.
    fn downsample(&self) -> Plane {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
        let mut rows = vec![0.0; self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                rows[y * self.w + x] = K
                    .iter()
                    .enumerate()
                    .map(|(k, &c)| c * self.at(y, clamp(x as isize + k as isize - 2, self.w)))
                    .sum();
            }
        }
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let acc = K
                    .iter()
                    .enumerate()
                    .map(|(k, &c)| c * rows[clamp(2 * y as isize + k as isize - 2, self.h) * self.w + 2 * x])
                    .sum();
                v.push(acc);
            }
        }
        Plane { h, w, v }
    }

    /// Central-difference gradients (one-sided at the border).
    fn gradients(&self) -> (Plane, Plane) {
        let mut gx = vec![0.0; self.h * self.w];
        let mut gy = vec![0.0; self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(self.w - 1));
                let (yu, yd) = (y.saturating_sub(1), (y + 1).min(self.h - 1));
                let i = y * self.w + x;
                if xr > xl {
                    gx[i] = (self.at(y, xr) - self.at(y, xl)) / (xr - xl) as f32;
                }
                if yd > yu {
                    gy[i] = (self.at(yd, x) - self.at(yu, x)) / (yd - yu) as f32;
                }
            }
        }
        (
            Plane { h: self.h, w: self.w, v: gx },
            Plane { h: self.h, w: self.w, v: gy },
        )
    }
}

/// Largest per-iteration update, in pixels of the current level.
const MAX_STEP: f64 = 1.0;

/// 5×5 median of a flow component, window clipped at the border. Removes
/// isolated failures before they are propagated to the next level.
fn median_filter(v: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; h * w];
    let mut buf = Vec::with_capacity(25);
    for y in 0..h {
        for x in 0..w {
            buf.clear();
            for qy in y.saturating_sub(2)..(y + 3).min(h) {
                for qx in x.saturating_sub(2)..(x + 3).min(w) {
                    buf.push(v[qy * w + qx]);
                }
            }
            buf.sort_by(f32::total_cmp);
            out[y * w + x] = buf[buf.len() / 2];
        }
    }
    out
}

/// Dense pyramidal Lucas–Kanade: flow mapping each pixel of `target` to its
/// position in `source`.
pub fn lucas_kanade(target: &Image, source: &Image, params: &LucasKanadeParams) -> FlowField {
    let gray = |img: &Image| {
        let g = img.to_gray();
        Plane {
            h: g.height(),
            w: g.width(),
            v: g.data().to_vec(),
        }
    };
    let mut tgt = vec![gray(target)];
    let mut src = vec![gray(source)];
    for _ in 0..params.levels {
        let (t, s) = (tgt.last().unwrap(), src.last().unwrap());
        if t.h < 2 * params.window || t.w < 2 * params.window {
            break;
        }
        let (nt, ns) = (t.downsample(), s.downsample());
        tgt.push(nt);
        src.push(ns);
    }

    let half = (params.window / 2) as isize;
    let top = tgt.len() - 1;
    let mut flow_x = vec![0.0f32; tgt[top].h * tgt[top].w];
    let mut flow_y = vec![0.0f32; tgt[top].h * tgt[top].w];

    for level in (0..=top).rev() {
        let t = &tgt[level];
        let s = &src[level];
        if level != top {
            // upsample the coarser estimate and double it
            let coarse = &tgt[level + 1];
            let mut ux = vec![0.0f32; t.h * t.w];
            let mut uy = vec![0.0f32; t.h * t.w];
            for y in 0..t.h {
                for x in 0..t.w {
                    let cy = (y / 2).min(coarse.h - 1);
                    let cx = (x / 2).min(coarse.w - 1);
                    ux[y * t.w + x] = 2.0 * flow_x[cy * coarse.w + cx];
                    uy[y * t.w + x] = 2.0 * flow_y[cy * coarse.w + cx];
                }
            }
            flow_x = ux;
            flow_y = uy;
        }
        let (gx, gy) = t.gradients();
        for y in 0..t.h {
            for x in 0..t.w {
                let i = y * t.w + x;
                let (mut dx, mut dy) = (flow_x[i], flow_y[i]);
                for _ in 0..params.iterations {
                    let (mut gxx, mut gxy, mut gyy, mut bx, mut by) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
                    let mut valid = 0usize;
                    for wy in -half..=half {
                        for wx in -half..=half {
                            let (qy, qx) = (y as isize + wy, x as isize + wx);
                            if qy < 0 || qx < 0 || qy >= t.h as isize || qx >= t.w as isize {
                                continue;
                            }
                            let (qy, qx) = (qy as usize, qx as usize);
                            let Some(sv) = s.sample(qy as f32 + dy, qx as f32 + dx) else {
                                continue;
                            };
                            valid += 1;
                            let e = (sv - t.at(qy, qx)) as f64;
                            let ix = gx.at(qy, qx) as f64;
                            let iy = gy.at(qy, qx) as f64;
                            gxx += ix * ix;
                            gxy += ix * iy;
                            gyy += iy * iy;
                            bx += ix * e;
                            by += iy * e;
                        }
                    }
                    let det = gxx * gyy - gxy * gxy;
                    // mostly outside the source: keep the current estimate
                    if 2 * valid < params.window * params.window || det <= params.min_det as f64 {
                        break;
                    }
                    let ddx = (-(gyy * bx - gxy * by) / det).clamp(-MAX_STEP, MAX_STEP);
                    let ddy = (-(gxx * by - gxy * bx) / det).clamp(-MAX_STEP, MAX_STEP);
                    dx += ddx as f32;
                    dy += ddy as f32;
                    if ddx.abs() < 1e-3 && ddy.abs() < 1e-3 {
                        break;
                    }
                }
                flow_x[i] = dx;
                flow_y[i] = dy;
            }
        }
        flow_x = median_filter(&flow_x, t.h, t.w);
        flow_y = median_filter(&flow_y, t.h, t.w);
    }
    let base = &tgt[0];
    FlowField {
        height: base.h,
        width: base.w,
        dx: flow_x,
        dy: flow_y,
    }
}

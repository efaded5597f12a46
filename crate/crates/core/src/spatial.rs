//! Puzzle branch: the central frame is cut into a 2×2 grid of patches, each
//! patch goes through the backbone on its own, and the four feature maps are
//! stitched back into a map the size of the full-frame features.

use crate::error::{ensure_contract, ensure_dims, Result};
use crate::model::{classification_loss_from_features, BoundBackbone, LabelVector};
use crate::tensor::{check_same_shape, Real, Tensor, Var};

/// Splits an NCHW tensor into its four quadrants, row-major
/// (top-left, top-right, bottom-left, bottom-right).
pub fn tile<T: Real>(x: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
    let (n, c, h, w) = x.dims4()?;
    ensure_contract!(
        h % 2 == 0 && w % 2 == 0,
        "tile needs even height and width, got {h}x{w}"
    );
    let (ph, pw) = (h / 2, w / 2);
    let quadrant = |q: usize| {
        let (qy, qx) = (q / 2, q % 2);
        let mut data = Vec::with_capacity(n * c * ph * pw);
        for plane in 0..n * c {
            for y in 0..ph {
                let start = plane * h * w + (qy * ph + y) * w + qx * pw;
                data.extend_from_slice(&x.data()[start..start + pw]);
            }
        }
        Tensor::new(&[n, c, ph, pw], data)
    };
    Ok([quadrant(0)?, quadrant(1)?, quadrant(2)?, quadrant(3)?])
}

/// Inverse of [`tile`] on plain tensors.
pub fn stitch<T: Real>(parts: [&Tensor<T>; 4]) -> Result<Tensor<T>> {
    let (n, c, h, w) = parts[0].dims4()?;
    for p in &parts[1..] {
        check_same_shape("stitch", parts[0], p)?;
    }
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (q, part) in parts.iter().enumerate() {
        let (qy, qx) = (q / 2, q % 2);
        for plane in 0..n * c {
            for y in 0..h {
                let dst = plane * oh * ow + (qy * h + y) * ow + qx * w;
                let src = plane * h * w + y * w;
                out[dst..dst + w].copy_from_slice(&part.data()[src..src + w]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Differentiable stitch of four per-patch feature maps into `f_puzzle`.
pub fn merge<'g, T: Real>(parts: [&Var<'g, T>; 4]) -> Result<Var<'g, T>> {
    Var::merge_quad(parts)
}

/// Outputs of the puzzle branch for one frame.
pub struct PuzzleOutput<'g, T: Real> {
    /// `cls(σ(GAP(f_puzzle)), z)`
    pub p_cls: Var<'g, T>,
    /// `‖f_t − f_puzzle‖₁`
    pub spatial: Var<'g, T>,
    pub features: Var<'g, T>,
    pub puzzle_features: Var<'g, T>,
}

/// Puzzle classification and reconstruction losses for frame `x`.
pub fn puzzle_losses<'g, T: Real>(
    backbone: &BoundBackbone<'g, T>,
    x: &Tensor<T>,
    label: LabelVector,
) -> Result<PuzzleOutput<'g, T>> {
    let features = backbone.features(x)?;
    puzzle_losses_with_features(backbone, x, features, label)
}

/// Same as [`puzzle_losses`] but reuses already computed full-frame features.
pub fn puzzle_losses_with_features<'g, T: Real>(
    backbone: &BoundBackbone<'g, T>,
    x: &Tensor<T>,
    features: Var<'g, T>,
    label: LabelVector,
) -> Result<PuzzleOutput<'g, T>> {
    let s = backbone.stride();
    let (_, _, h, w) = x.dims4()?;
    ensure_contract!(
        h % (2 * s) == 0 && w % (2 * s) == 0,
        "puzzle branch needs sides divisible by {}, got {h}x{w}",
        2 * s
    );
    let patches = tile(x)?;
    let mut parts = Vec::with_capacity(4);
    for p in &patches {
        parts.push(backbone.features_unchecked(p)?);
    }
    let puzzle_features = merge([&parts[0], &parts[1], &parts[2], &parts[3]])?;
    ensure_dims!(
        puzzle_features.shape() == features.shape(),
        "merged features {:?} differ from full-frame features {:?}",
        puzzle_features.shape(),
        features.shape()
    );
    let p_cls = classification_loss_from_features(&puzzle_features, label)?;
    let spatial = features.l1_distance(&puzzle_features)?;
    Ok(PuzzleOutput {
        p_cls,
        spatial,
        features,
        puzzle_features,
    })
}

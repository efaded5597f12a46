//! Independent recomputations of library results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcam::image::Image;
use tcam::model::{Backbone, BackboneConfig, Class, LabelVector};
use tcam::preprocess::estimate_background;
use tcam::spatial::{merge, puzzle_losses, stitch, tile};
use tcam::temporal::{temporal_loss, warp, warp_map, FlowField, LateralFlows, SaliencyMap, TemporalOptions};
use tcam::tensor::{Graph, Tensor};

pub const RECOMPUTE_TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
    Image::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap()
}

/// Integer-flow warp against direct indexing, both for plain maps and for
/// the graph op in f64.
pub fn warp_matches_index_shift(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let (h, w) = (rng.random_range(2..10), rng.random_range(2..10));
    let src: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    let dx: Vec<f32> = (0..h * w).map(|_| rng.random_range(-3..=3) as f32).collect();
    let dy: Vec<f32> = (0..h * w).map(|_| rng.random_range(-3..=3) as f32).collect();
    let expected: Vec<f32> = (0..h * w)
        .map(|i| {
            let sy = (i / w) as i64 + dy[i] as i64;
            let sx = (i % w) as i64 + dx[i] as i64;
            if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                src[sy as usize * w + sx as usize]
            } else {
                0.0
            }
        })
        .collect();
    let flow = FlowField::new(h, w, dx, dy).map_err(|e| e.to_string())?;
    let map = SaliencyMap::new(Tensor::new(&[h, w], src.clone()).unwrap(), Class::Before, 0).unwrap();
    let plain = warp_map(&map, &flow, 0).map_err(|e| e.to_string())?;
    if plain.values().data() != expected.as_slice() {
        return Err(format!("warp_map differs on a {h}x{w} grid"));
    }
    let g = Graph::<f64>::new();
    let node = g.constant(Tensor::new(&[1, 1, h, w], src.iter().map(|&v| v as f64).collect()).unwrap());
    let out = warp(&node, &flow).map_err(|e| e.to_string())?;
    if out.value().data().iter().zip(&expected).any(|(&a, &b)| a != b as f64) {
        return Err(format!("graph warp differs on a {h}x{w} grid"));
    }
    Ok(())
}

/// Background estimate against a per-pixel sort of the grayscale stack.
pub fn median_matches_sort(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let t = rng.random_range(1..10);
    let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
    let frames: Vec<Image> = (0..t).map(|_| random_image(&mut rng, 3, h, w)).collect();
    let bg = estimate_background(&frames).map_err(|e| e.to_string())?;
    let grays: Vec<Image> = frames.iter().map(Image::to_gray).collect();
    for i in 0..h * w {
        let mut stack: Vec<f32> = grays.iter().map(|g| g.data()[i]).collect();
        stack.sort_by(f32::total_cmp);
        let lower_median = stack[(t - 1) / 2];
        if bg.data()[i] != lower_median {
            return Err(format!("pixel {i}: {} vs sorted {lower_median}", bg.data()[i]));
        }
    }
    Ok(())
}

pub fn tile_merge_roundtrip(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let (c, h, w) = (rng.random_range(1..4), 2 * rng.random_range(1..6), 2 * rng.random_range(1..6));
    let x = Tensor::<f64>::from_fn(&[1, c, h, w], |_| rng.random_range(-1.0..1.0));
    let parts = tile(&x).map_err(|e| e.to_string())?;
    let back = stitch([&parts[0], &parts[1], &parts[2], &parts[3]]).map_err(|e| e.to_string())?;
    if back != x {
        return Err("stitch(tile(x)) != x".into());
    }
    let g = Graph::new();
    let vars: Vec<_> = parts.iter().map(|p| g.constant(p.clone())).collect();
    let merged = merge([&vars[0], &vars[1], &vars[2], &vars[3]]).map_err(|e| e.to_string())?;
    if *merged.value() != x {
        return Err("merge(tile(x)) != x".into());
    }
    Ok(())
}

fn random_backbone(seed: u64) -> Backbone<f64> {
    let mut b = Backbone::<f64>::new(BackboneConfig::default(), seed).unwrap();
    let mut rng = rng(seed ^ 0xb1a5);
    for p in b.params_mut().iter_mut().filter(|p| p.name.ends_with("bias")) {
        p.tensor = Tensor::from_fn(p.tensor.shape(), |_| rng.random_range(-0.1..0.1));
    }
    b
}

fn random_frame(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[1, 3, 16, 16], |_| rng.random_range(0.0..1.0))
}

/// `L_spatial` and `L_p_cls` against a loop over stitched per-patch features.
pub fn spatial_matches_recomputation(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let backbone = random_backbone(seed);
    let x = random_frame(&mut rng);
    let class = Class::ALL[rng.random_range(0..3)];

    let g = Graph::new();
    let bound = backbone.bind(&g);
    let out = puzzle_losses(&bound, &x, LabelVector::one_hot(class)).map_err(|e| e.to_string())?;

    let f = backbone.features_of(&x).map_err(|e| e.to_string())?;
    let patches = tile(&x).map_err(|e| e.to_string())?;
    let pf: Vec<Tensor<f64>> = patches.iter().map(|p| backbone.features_of(p).unwrap()).collect();
    let puzzle = stitch([&pf[0], &pf[1], &pf[2], &pf[3]]).map_err(|e| e.to_string())?;
    let spatial: f64 = f.data().iter().zip(puzzle.data()).map(|(a, b)| (a - b).abs()).sum();

    let plane = puzzle.len() / 3;
    let p_cls: f64 = (0..3)
        .map(|k| {
            let gap = puzzle.data()[k * plane..(k + 1) * plane].iter().sum::<f64>() / plane as f64;
            let p = (1.0 / (1.0 + (-gap).exp())).clamp(1e-7, 1.0 - 1e-7);
            if k == class.index() { -p.ln() } else { -(1.0 - p).ln() }
        })
        .sum();

    let got_spatial = out.spatial.value().item().unwrap();
    let got_p_cls = out.p_cls.value().item().unwrap();
    if (got_spatial - spatial).abs() > RECOMPUTE_TOL || (got_p_cls - p_cls).abs() > RECOMPUTE_TOL {
        return Err(format!(
            "spatial {got_spatial} vs {spatial}, p_cls {got_p_cls} vs {p_cls}"
        ));
    }
    Ok(())
}

fn bilinear_warp(src: &[f64], h: usize, w: usize, dx: &[f32], dy: &[f32]) -> Vec<f64> {
    let at = |y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    (0..h * w)
        .map(|i| {
            let sx = (i % w) as f64 + dx[i] as f64;
            let sy = (i / w) as f64 + dy[i] as f64;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x0 + 1) * fx * (1.0 - fy)
                + at(y0 + 1, x0) * (1.0 - fx) * fy
                + at(y0 + 1, x0 + 1) * fx * fy
        })
        .collect()
}

fn plain_cam(f: &Tensor<f64>, class: Class) -> Vec<f64> {
    let plane = f.len() / 3;
    let r: Vec<f64> = f.data()[class.index() * plane..(class.index() + 1) * plane]
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    let m = r.iter().copied().fold(0.0, f64::max).max(1e-6);
    r.iter().map(|v| v / m).collect()
}

/// `L_temporal` against plain CAMs, a hand-written bilinear warp and max.
pub fn temporal_matches_recomputation(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let backbone = random_backbone(seed);
    let frames = [random_frame(&mut rng), random_frame(&mut rng), random_frame(&mut rng)];
    let class = Class::ALL[rng.random_range(0..3)];
    let flow = |rng: &mut ChaCha8Rng| {
        let dx = (0..16).map(|_| rng.random_range(-1.5f32..1.5)).collect();
        let dy = (0..16).map(|_| rng.random_range(-1.5f32..1.5)).collect();
        FlowField::new(4, 4, dx, dy).unwrap()
    };
    let flows = LateralFlows {
        to_prev: flow(&mut rng),
        to_next: flow(&mut rng),
    };

    let g = Graph::new();
    let bound = backbone.bind(&g);
    let out = temporal_loss(
        &bound,
        [&frames[0], &frames[1], &frames[2]],
        class,
        &flows,
        TemporalOptions::default(),
        None,
    )
    .map_err(|e| e.to_string())?;

    let cams: Vec<Vec<f64>> = frames.iter().map(|x| plain_cam(&backbone.features_of(x).unwrap(), class)).collect();
    let prev = bilinear_warp(&cams[0], 4, 4, flows.to_prev.dx(), flows.to_prev.dy());
    let next = bilinear_warp(&cams[2], 4, 4, flows.to_next.dx(), flows.to_next.dy());
    let expected: f64 = (0..16).map(|i| (cams[1][i] - prev[i].max(next[i])).abs()).sum();
    let got = out.loss.value().item().unwrap();
    if (got - expected).abs() > RECOMPUTE_TOL {
        return Err(format!("temporal {got} vs {expected}"));
    }
    Ok(())
}

/// Identical frames with zero flow give exactly zero temporal loss.
pub fn static_triplet_zero_loss(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let backbone = Backbone::<f32>::new(BackboneConfig::default(), seed).unwrap();
    let x = Tensor::<f32>::from_fn(&[1, 3, 32, 32], |_| rng.random_range(0.0..1.0));
    let flows = LateralFlows {
        to_prev: FlowField::zeros(8, 8),
        to_next: FlowField::zeros(8, 8),
    };
    for class in Class::ALL {
        let g = Graph::new();
        let bound = backbone.bind(&g);
        let out = temporal_loss(&bound, [&x, &x, &x], class, &flows, TemporalOptions::default(), None)
            .map_err(|e| e.to_string())?;
        let v = out.loss.value().item().unwrap();
        if v != 0.0 {
            return Err(format!("class {class}: temporal loss {v}"));
        }
    }
    Ok(())
}

/// A zeroed head gives exactly zero spatial and temporal losses.
pub fn zero_head_zero_losses(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let mut backbone = Backbone::<f32>::new(BackboneConfig::default(), seed).unwrap();
    backbone.zero_head();
    let frame = |rng: &mut ChaCha8Rng| Tensor::<f32>::from_fn(&[1, 3, 32, 32], |_| rng.random_range(0.0..1.0));
    let frames = [frame(&mut rng), frame(&mut rng), frame(&mut rng)];
    let flows = LateralFlows {
        to_prev: FlowField::constant(8, 8, -0.5, 0.25),
        to_next: FlowField::constant(8, 8, 0.5, -0.25),
    };
    for class in Class::ALL {
        let g = Graph::new();
        let bound = backbone.bind(&g);
        let spatial = puzzle_losses(&bound, &frames[1], LabelVector::one_hot(class))
            .map_err(|e| e.to_string())?
            .spatial
            .value()
            .item()
            .unwrap();
        let temporal = temporal_loss(
            &bound,
            [&frames[0], &frames[1], &frames[2]],
            class,
            &flows,
            TemporalOptions::default(),
            None,
        )
        .map_err(|e| e.to_string())?
        .loss
        .value()
        .item()
        .unwrap();
        if spatial != 0.0 || temporal != 0.0 {
            return Err(format!("class {class}: spatial {spatial}, temporal {temporal}"));
        }
    }
    Ok(())
}

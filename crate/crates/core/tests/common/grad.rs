//! Central finite-difference gradient checks in f64.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcam::model::{
    classification_loss, classification_loss_from_features, Backbone, BackboneConfig, Class, ConvBlock, LabelVector,
};
use tcam::temporal::{cam, warp, FlowField, LateralFlows};
use tcam::tensor::{Graph, Tensor, Var};
use tcam::train::{total_loss, RunConfig, TripletInput};

pub const STEP: f64 = 1e-3;
pub const RTOL: f64 = 1e-3;
pub const COMPOSITE_RTOL: f64 = 1e-2;
/// The full network has many ReLUs whose pre-activations sit within 1e-3 of
/// zero; a smaller step in f64 keeps the composite check off those kinks.
pub const COMPOSITE_STEP: f64 = 1e-5;
pub const CASES_PER_OP: usize = 50;
/// Floor for the comparison so exact zeros do not need exact agreement.
const ATOL: f64 = 1e-9;
/// Minimum distance of generated points from kinks.
const KINK_GAP: f64 = 1e-2 + STEP;

pub const OPS: [&str; 9] = [
    "conv2d",
    "relu",
    "global_avg_pool",
    "sigmoid",
    "l1_distance",
    "elementwise_max",
    "warp",
    "cam_normalization",
    "classification_loss",
];

fn close(a: f64, n: f64, rtol: f64) -> bool {
    (a - n).abs() <= rtol * a.abs().max(n.abs()) + ATOL
}

/// Compares the tape gradient of the scalar `f(inputs)` with respect to every
/// input element against central differences.
pub fn check<F>(inputs: &[Tensor<f64>], rtol: f64, f: F) -> Result<(), String>
where
    F: for<'g> Fn(&[Var<'g, f64>]) -> tcam::Result<Var<'g, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.param(x.clone())).collect();
        f(&vars).expect("forward").value().item().expect("scalar loss")
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&vars).map_err(|e| e.to_string())?;
    let grads = g.backward(out).map_err(|e| e.to_string())?;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(&vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic.data()[i];
            if !close(a, numeric, rtol) {
                return Err(format!("input {k} element {i}: tape {a:.9} vs numeric {numeric:.9}"));
            }
        }
    }
    Ok(())
}

/// Reduces a tensor-valued op to a scalar with random ±1 weights:
/// `Σ |y − c|` with `c = y₀ − 10·s`, so `∂/∂y = s` near the base point.
fn check_projected<F>(inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng, f: F) -> Result<(), String>
where
    F: for<'g> Fn(&[Var<'g, f64>]) -> tcam::Result<Var<'g, f64>>,
{
    let base = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        (*f(&vars).map_err(|e| e.to_string())?.value()).clone()
    };
    let offset = Tensor::from_fn(base.shape(), |i| {
        base.data()[i] - if rng.random_bool(0.5) { 10.0 } else { -10.0 }
    });
    check(inputs, RTOL, |vars| {
        let y = f(vars)?;
        let c = vars[0].graph().constant(offset.clone());
        y.l1_distance(&c)
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[KINK_GAP, 1]` and random sign.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(KINK_GAP..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// `b = a ± d` with `d ∈ [KINK_GAP, 1]`, so no pair sits on the tie locus.
fn apart(rng: &mut ChaCha8Rng, a: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(a.shape(), |i| {
        let d = rng.random_range(KINK_GAP..1.0);
        if rng.random_bool(0.5) { a.data()[i] + d } else { a.data()[i] - d }
    })
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..=3), rng.random_range(2..=6), rng.random_range(2..=6))
}

/// Runs one random case of `op`.
pub fn run_case(op: &str, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match op {
        "conv2d" => {
            let (c, h, w) = dims(&mut rng);
            let k = if rng.random_bool(0.5) { 1 } else { 3 };
            let oc = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=k / 2);
            let (h, w) = (h + 1, w + 1);
            let x = uniform(&mut rng, &[1, c, h, w], -1.0, 1.0);
            let kernel = uniform(&mut rng, &[oc, c, k, k], -1.0, 1.0);
            let bias = uniform(&mut rng, &[oc], -1.0, 1.0);
            check_projected(&[x, kernel, bias], &mut rng, |v| v[0].conv2d(&v[1], stride, pad)?.bias_add(&v[2]))
        }
        "relu" => {
            let (c, h, w) = dims(&mut rng);
            let x = off_zero(&mut rng, &[1, c, h, w]);
            check_projected(&[x], &mut rng, |v| Ok(v[0].relu()))
        }
        "global_avg_pool" => {
            let (c, h, w) = dims(&mut rng);
            let x = uniform(&mut rng, &[1, c, h, w], -2.0, 2.0);
            check_projected(&[x], &mut rng, |v| v[0].global_avg_pool())
        }
        "sigmoid" => {
            let (c, h, w) = dims(&mut rng);
            let x = uniform(&mut rng, &[1, c, h, w], -4.0, 4.0);
            check_projected(&[x], &mut rng, |v| Ok(v[0].sigmoid()))
        }
        "l1_distance" => {
            let (c, h, w) = dims(&mut rng);
            let a = uniform(&mut rng, &[1, c, h, w], -1.0, 1.0);
            let b = apart(&mut rng, &a);
            check(&[a, b], RTOL, |v| v[0].l1_distance(&v[1]))
        }
        "elementwise_max" => {
            let (c, h, w) = dims(&mut rng);
            let a = uniform(&mut rng, &[1, c, h, w], -1.0, 1.0);
            let b = apart(&mut rng, &a);
            check_projected(&[a, b], &mut rng, |v| v[0].elementwise_max(&v[1]))
        }
        "warp" => {
            let (_, h, w) = dims(&mut rng);
            let (h, w) = (h + 1, w + 1);
            let map = uniform(&mut rng, &[1, 1, h, w], 0.0, 1.0);
            let n = h * w;
            let dx: Vec<f32> = (0..n).map(|_| rng.random_range(-1.5f32..1.5)).collect();
            let dy: Vec<f32> = (0..n).map(|_| rng.random_range(-1.5f32..1.5)).collect();
            let flow = FlowField::new(h, w, dx, dy).map_err(|e| e.to_string())?;
            check_projected(&[map], &mut rng, |v| warp(&v[0], &flow))
        }
        "cam_normalization" => {
            let (_, h, w) = dims(&mut rng);
            let class = Class::ALL[rng.random_range(0..3)];
            let mut f = off_zero(&mut rng, &[1, 3, h, w]);
            // unique channel maximum, clear of the runner-up
            let plane = class.index() * h * w;
            let top = plane + rng.random_range(0..h * w);
            let runner_up = (plane..plane + h * w).filter(|&i| i != top).map(|i| f.data()[i]).fold(0.0, f64::max);
            f.data_mut()[top] = runner_up + rng.random_range(0.1..1.0);
            check_projected(&[f], &mut rng, |v| cam(&v[0], class, false))
        }
        "classification_loss" => {
            let class = Class::ALL[rng.random_range(0..3)];
            let label = LabelVector::one_hot(class);
            let p = uniform(&mut rng, &[1, 3], 0.05, 0.95);
            check(&[p], RTOL, |v| classification_loss(&v[0], label))?;
            let (_, h, w) = dims(&mut rng);
            let f = uniform(&mut rng, &[1, 3, h, w], -4.0, 4.0);
            check(&[f], RTOL, |v| classification_loss_from_features(&v[0], label))
        }
        other => Err(format!("unknown op {other}")),
    }
}

/// Runs `CASES_PER_OP` cases of `op`; returns the failures.
pub fn run_op(op: &str) -> Vec<String> {
    (0..CASES_PER_OP as u64)
        .filter_map(|case| run_case(op, 1000 * case + 17).err().map(|e| format!("{op} case {case}: {e}")))
        .collect()
}

/// Checks the full triplet loss against central differences on 20 randomly
/// chosen backbone parameters.
pub fn check_composite(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = |out_channels| ConvBlock {
        out_channels,
        kernel: 3,
        stride: 2,
    };
    let config = RunConfig {
        backbone: BackboneConfig {
            in_channels: 3,
            blocks: vec![block(4), block(6)],
            num_classes: 3,
        },
        ..RunConfig::default()
    };
    let mut backbone = Backbone::<f64>::new(config.backbone.clone(), seed).map_err(|e| e.to_string())?;
    // Zero biases make every pixel with dead hidden units land exactly on the
    // CAM's ReLU kink; random biases move the draw off it.
    for p in backbone.params_mut().iter_mut().filter(|p| p.name.ends_with("bias")) {
        p.tensor = off_zero(&mut rng, p.tensor.shape()).map(|v| 0.2 * v);
    }
    let frame = |rng: &mut ChaCha8Rng| Arc::new(uniform(rng, &[1, 3, 16, 16], 0.0, 1.0));
    let input = TripletInput {
        frames: [frame(&mut rng), frame(&mut rng), frame(&mut rng)],
        label: Class::ALL[rng.random_range(0..3)],
        flows: LateralFlows {
            to_prev: FlowField::constant(4, 4, -0.4, 0.25),
            to_next: FlowField::constant(4, 4, 0.4, -0.25),
        },
    };
    // An all-nonpositive class channel puts the CAM normalizer on its
    // ε floor, where the map jumps; such draws sit on a non-smooth locus.
    for frame in &input.frames {
        let f = backbone.features_of(frame).map_err(|e| e.to_string())?;
        let top = f.channel(input.label.index()).map_err(|e| e.to_string())?.max_value();
        if top < KINK_GAP {
            return Err(format!("degenerate draw: class channel max {top:.3e}"));
        }
    }
    let (alpha, beta) = (0.5, 2.0);
    let loss_of = |b: &Backbone<f64>| -> f64 {
        let g = Graph::new();
        let bound = b.bind(&g);
        total_loss(&bound, &input, alpha, beta, &config).expect("loss").total.value().item().unwrap()
    };

    let g = Graph::new();
    let bound = backbone.bind(&g);
    let parts = total_loss(&bound, &input, alpha, beta, &config).map_err(|e| e.to_string())?;
    let values = parts.values();
    if values.spatial == 0.0 || values.temporal == 0.0 {
        return Err("composite case has a vanishing reconstruction term".into());
    }
    let grads = g.backward(parts.total).map_err(|e| e.to_string())?;

    for _ in 0..20 {
        let p = rng.random_range(0..backbone.params().len());
        let i = rng.random_range(0..backbone.params()[p].tensor.len());
        let a = grads.get(&bound.vars()[p]).map_or(0.0, |t| t.data()[i]);
        let mut plus = backbone.clone();
        plus.params_mut()[p].tensor.data_mut()[i] += COMPOSITE_STEP;
        let mut minus = backbone.clone();
        minus.params_mut()[p].tensor.data_mut()[i] -= COMPOSITE_STEP;
        let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * COMPOSITE_STEP);
        if !close(a, numeric, COMPOSITE_RTOL) {
            let name = &backbone.params()[p].name;
            return Err(format!("{name}[{i}]: tape {a:.9} vs numeric {numeric:.9}"));
        }
    }
    Ok(())
}

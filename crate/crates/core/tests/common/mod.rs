//! Checks shared by the integration tests and the acceptance runner. Each
//! returns a one-line summary on success and the first violation on failure.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tlkit::backbone::{split_at_cut, Architecture, Backbone, BackboneSpec, FreezePlan};
use tlkit::data::{augment, scan_dataset, split_dataset, AugmentConfig, DatasetIndex, Image, Sample, Split};
use tlkit::metrics::{confusion, metrics_from_confusion, ConfusionMatrix};
use tlkit::nn::{build_head, cross_entropy, one_hot, Activation, HeadConfig, Layer, LayerKind, Mode, NetworkGraph, Source};
use tlkit::optim::{adam_step, AdamConfig, AdamState};
use tlkit::synthetic::{separable_features, write_image_dataset};
use tlkit::trainer::{run_two_stage, train_head, SeedTuple, TrainConfig};
use tlkit::tuner::{build_schedule, run_search, SearchSpace, TrialConfig};
use tlkit::{Network64, Tensor, Tensor32, Tensor64};

pub type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
const DROPOUT_SEED: u64 = 0xD50;

pub const GRADIENT_CASES: &[&str] = &[
    "dense",
    "conv2d",
    "max_pool",
    "global_avg_pool",
    "batch_norm_frozen",
    "residual_add",
    "relu",
    "tanh",
    "dropout",
    "flatten",
    "softmax",
    "softmax_cross_entropy",
    "conv_block",
];

enum Target {
    /// Loss is `Σ w ⊙ output`.
    Linear(Tensor64),
    /// Mean cross-entropy of a final softmax against one-hot labels.
    Labels(Tensor64),
}

pub struct GradCase {
    net: Network64,
    input: Tensor64,
    mode: Mode,
    target: Target,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor64 {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Distinct values spaced far wider than the FD step and bounded away from
/// zero, so kinks and ties of relu and max are never straddled.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|k| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * (k + 1) as f64 / n as f64
        })
        .collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn randomize(net: &mut Network64, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = net.params().map(|p| p.name.clone()).collect();
    for name in names {
        let data = net.param_data_mut(&name).unwrap();
        let (lo, hi) = if name.ends_with("moving_variance") { (0.5, 1.5) } else { (-1.0, 1.0) };
        data.iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
    }
}

fn batched(shape: &[usize], batch: usize) -> Vec<usize> {
    let mut s = vec![batch];
    s.extend_from_slice(shape);
    s
}

pub fn gradient_case(case: &str, seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rng.gen_range(1..=3);
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(3..=6);
    let w = rng.gen_range(3..=6);
    let d = rng.gen_range(2..=8);
    let image = vec![c, h, w];
    let mut mode = Mode::Eval;
    let mut spaced_input = false;
    let (shape, layers): (Vec<usize>, Vec<Layer<f64>>) = match case {
        "dense" => (vec![d], vec![Layer::dense("fc", d, rng.gen_range(1..=5))]),
        "conv2d" => {
            let kernel = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let padding = rng.gen_range(0..=1);
            let bias = rng.gen_bool(0.5);
            let kind = LayerKind::Conv2d {
                in_channels: c,
                out_channels: rng.gen_range(1..=3),
                kernel,
                stride,
                padding,
                bias,
            };
            (image, vec![Layer::new("conv", kind)])
        }
        "max_pool" => {
            spaced_input = true;
            let (window, stride, padding) = if rng.gen_bool(0.5) { (3, 2, 1) } else { (2, 1, rng.gen_range(0..=1)) };
            (image, vec![Layer::new("pool", LayerKind::MaxPool { window, stride, padding })])
        }
        "global_avg_pool" => (image, vec![Layer::new("gap", LayerKind::GlobalAvgPool)]),
        "batch_norm_frozen" => (
            image,
            vec![Layer::new(
                "bn",
                LayerKind::BatchNormFrozen {
                    channels: c,
                    epsilon: 1e-3,
                },
            )],
        ),
        "residual_add" => (
            image,
            vec![
                Layer::conv2d("conv", c, c, 3, 1, 1),
                Layer::new(
                    "add",
                    LayerKind::ResidualAdd {
                        skip: Source::GraphInput,
                    },
                ),
            ],
        ),
        "relu" => {
            spaced_input = true;
            (image, vec![Layer::new("relu", LayerKind::Relu)])
        }
        "tanh" => (image, vec![Layer::new("tanh", LayerKind::Tanh)]),
        "dropout" => {
            mode = Mode::Train;
            (image, vec![Layer::new("drop", LayerKind::Dropout { rate: 0.3 })])
        }
        "flatten" => (image, vec![Layer::new("flat", LayerKind::Flatten)]),
        "softmax" => (vec![d], vec![Layer::new("softmax", LayerKind::Softmax)]),
        "softmax_cross_entropy" => (
            vec![d],
            vec![Layer::dense("fc", d, 3), Layer::new("softmax", LayerKind::Softmax)],
        ),
        "conv_block" => (
            image,
            vec![
                Layer::conv2d("conv", c, 2, 3, 2, 1),
                Layer::new(
                    "bn",
                    LayerKind::BatchNormFrozen {
                        channels: 2,
                        epsilon: 1e-3,
                    },
                ),
                Layer::new("tanh", LayerKind::Tanh),
                Layer::new("gap", LayerKind::GlobalAvgPool),
                Layer::dense("fc", 2, 2),
                Layer::new("softmax", LayerKind::Softmax),
            ],
        ),
        other => panic!("unknown gradient case {other}"),
    };
    let mut net = NetworkGraph::new(shape.clone(), layers).unwrap();
    randomize(&mut net, &mut rng);
    let input_shape = batched(&shape, batch);
    let input = if spaced_input {
        spaced(&mut rng, &input_shape)
    } else {
        uniform(&mut rng, &input_shape, -1.0, 1.0)
    };
    let target = if matches!(case, "softmax_cross_entropy" | "conv_block") {
        let classes = net.output_shape()[0];
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
        Target::Labels(one_hot(&labels, classes).unwrap())
    } else {
        Target::Linear(uniform(&mut rng, &batched(net.output_shape(), batch), -1.0, 1.0))
    };
    GradCase { net, input, mode, target }
}

impl GradCase {
    fn loss(&self, net: &Network64, x: &Tensor64) -> f64 {
        let (_, out) = net.forward(x, self.mode, DROPOUT_SEED).unwrap();
        match &self.target {
            Target::Linear(w) => w.dot(&out).unwrap(),
            Target::Labels(y) => cross_entropy(&out, y).unwrap(),
        }
    }
}

fn numeric(mut f: impl FnMut(f64) -> f64, x0: f64) -> f64 {
    (f(x0 + FD_STEP) - f(x0 - FD_STEP)) / (2.0 * FD_STEP)
}

/// `‖a − n‖₂ / (‖a‖₂ + ‖n‖₂)`, with the denominator floored at 1e-6.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    diff / scale.max(1e-6)
}

/// Worst relative error over the input gradient and every trainable
/// parameter of the case, with the name of the offending tensor.
pub fn check_gradient_case(case: &str, seed: u64) -> Result<(f64, String), String> {
    let g = gradient_case(case, seed);
    let (trace, _) = g.net.forward(&g.input, g.mode, DROPOUT_SEED).map_err(|e| e.to_string())?;
    let grads = match &g.target {
        Target::Linear(w) => g.net.backward_from_output(&trace, w, true),
        Target::Labels(y) => g.net.backward(&trace, y),
    }
    .map_err(|e| e.to_string())?;

    let expected: BTreeSet<String> = g
        .net
        .layers()
        .iter()
        .flat_map(|l| l.params().iter().filter(|p| l.kind.is_trainable_role(p.role)).map(|p| p.name.clone()))
        .collect();
    let got: BTreeSet<String> = grads.params.keys().cloned().collect();
    if expected != got {
        return Err(format!("{case} seed {seed}: gradients for {got:?}, expected {expected:?}"));
    }

    let mut worst = (0.0, String::new());
    let input_grad = grads.input.ok_or_else(|| format!("{case}: no input gradient"))?;
    let num: Vec<f64> = (0..g.input.len())
        .map(|k| {
            numeric(
                |v| {
                    let mut x = g.input.clone();
                    x.data_mut()[k] = v;
                    g.loss(&g.net, &x)
                },
                g.input.data()[k],
            )
        })
        .collect();
    let e = relative_error(input_grad.data(), &num);
    if e > worst.0 {
        worst = (e, "input".into());
    }
    for (name, analytic) in &grads.params {
        let base = g.net.param(name).unwrap().clone();
        let num: Vec<f64> = (0..base.len())
            .map(|k| {
                numeric(
                    |v| {
                        let mut net = g.net.clone();
                        net.param_data_mut(name).unwrap()[k] = v;
                        g.loss(&net, &g.input)
                    },
                    base.data()[k],
                )
            })
            .collect();
        let e = relative_error(analytic.data(), &num);
        if e > worst.0 {
            worst = (e, name.clone());
        }
    }
    Ok(worst)
}

pub fn gradient_criterion(seeds: u64) -> Check {
    let mut worst = (0.0, String::new());
    for case in GRADIENT_CASES {
        for seed in 0..seeds {
            let (e, tensor) = check_gradient_case(case, seed)?;
            if !(e < FD_TOLERANCE) {
                return Err(format!("{case} seed {seed}: relative error {e:.3e} on {tensor}"));
            }
            if e > worst.0 {
                worst = (e, format!("{case}/{tensor}"));
            }
        }
    }
    Ok(format!(
        "{} layer cases × {seeds} seeds, worst relative error {:.2e} ({})",
        GRADIENT_CASES.len(),
        worst.0,
        worst.1
    ))
}

// ---------------------------------------------------------------------------
// Adam

/// Straight scalar transcription of the bias-corrected Adam update.
pub struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn new() -> Self {
        ScalarAdam { m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, theta: f64, g: f64, alpha: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let m_hat = self.m / (1.0 - b1.powi(self.t));
        let v_hat = self.v / (1.0 - b2.powi(self.t));
        theta - alpha * m_hat / (v_hat.sqrt() + eps)
    }
}

/// Gradient of `Σ c_k (θ_k − t_k)²`-style bowls plus a sine term, so the
/// gradient varies in sign and magnitude over the steps.
fn bowl_grad(k: usize, theta: f64) -> f64 {
    let c = [1.0, 3.0, 0.5][k];
    let t = [0.3, -1.2, 2.0][k];
    2.0 * c * (theta - t) + (3.0 * theta).sin()
}

pub fn adam_criterion() -> Check {
    let cfg = AdamConfig {
        alpha: 0.05,
        ..AdamConfig::default()
    };
    let start = [1.0, 0.5, -0.75];
    let mut a = Tensor64::new(vec![2], start[..2].to_vec()).unwrap();
    let mut b = Tensor64::new(vec![1], vec![start[2]]).unwrap();
    let mut state = AdamState::<f64>::new();
    let mut oracle: Vec<(f64, ScalarAdam)> = start.iter().map(|&s| (s, ScalarAdam::new())).collect();
    let mut worst: f64 = 0.0;
    for step in 1..=10 {
        let ga = Tensor64::new(vec![2], vec![bowl_grad(0, a.data()[0]), bowl_grad(1, a.data()[1])]).unwrap();
        let gb = Tensor64::new(vec![1], vec![bowl_grad(2, b.data()[0])]).unwrap();
        let grads = [("a".to_string(), ga), ("b".to_string(), gb)].into_iter().collect();
        adam_step(&mut state, vec![("a", &mut a), ("b", &mut b)], &grads, &cfg).map_err(|e| e.to_string())?;
        for (k, (theta, o)) in oracle.iter_mut().enumerate() {
            *theta = o.step(*theta, bowl_grad(k, *theta), cfg.alpha, cfg.beta1, cfg.beta2, cfg.epsilon);
        }
        let got = [a.data()[0], a.data()[1], b.data()[0]];
        for k in 0..3 {
            let d = (got[k] - oracle[k].0).abs();
            worst = worst.max(d);
            if !(d <= 1e-10) {
                return Err(format!("step {step}, parameter {k}: {} vs oracle {} (|Δ| {d:.3e})", got[k], oracle[k].0));
            }
        }
    }

    // First step moves each parameter by α in the direction opposite its gradient.
    let mut first_worst: f64 = 0.0;
    for &g in &[0.1, -0.1, 0.37, -2.5, 40.0, -1e3] {
        for &alpha in &[1e-4, 1e-3, 1e-1] {
            let mut p = Tensor64::new(vec![1], vec![0.0]).unwrap();
            let grads = [("p".to_string(), Tensor64::new(vec![1], vec![g]).unwrap())].into_iter().collect();
            adam_step(&mut AdamState::new(), vec![("p", &mut p)], &grads, &AdamConfig::default().with_alpha(alpha))
                .map_err(|e| e.to_string())?;
            let expected = -alpha * g.signum();
            let rel = (p.data()[0] - expected).abs() / alpha;
            first_worst = first_worst.max(rel);
            if !(rel <= 0.01) {
                return Err(format!("first step for g={g}, α={alpha}: moved {} instead of {expected}", p.data()[0]));
            }
        }
    }
    Ok(format!(
        "10 steps on 3 parameters, max |Δ| vs scalar oracle {worst:.1e}; first-step deviation from α·sign(g) ≤ {:.3}%",
        first_worst * 100.0
    ))
}

// ---------------------------------------------------------------------------
// Metrics

pub fn metrics_criterion(vectors: usize) -> Check {
    let cm = ConfusionMatrix {
        tp: 38,
        fn_: 6,
        fp: 0,
        tn: 44,
        positive: 0,
    };
    let r = metrics_from_confusion(&cm);
    let table = [
        ("accuracy", r.accuracy.rounded(2), "0.93"),
        ("precision", r.precision.rounded(2), "1.00"),
        ("recall", r.recall.rounded(2), "0.86"),
        ("f1", r.f1.rounded(2), "0.93"),
    ];
    for (name, got, want) in &table {
        ensure(got == want, || format!("{name} of (38, 0, 6, 44) rounds to {got}, expected {want}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x3E7);
    for v in 0..vectors {
        let preds: Vec<usize> = (0..50).map(|_| rng.gen_range(0..2)).collect();
        let labels: Vec<usize> = (0..50).map(|_| rng.gen_range(0..2)).collect();
        let positive = rng.gen_range(0..2);
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..50 {
            let p = preds[i] == positive;
            let y = labels[i] == positive;
            if p && y {
                tp += 1;
            } else if p {
                fp += 1;
            } else if y {
                fn_ += 1;
            } else {
                tn += 1;
            }
        }
        let cm = confusion(&preds, &labels, positive).map_err(|e| e.to_string())?;
        ensure((cm.tp, cm.fp, cm.fn_, cm.tn) == (tp, fp, fn_, tn), || {
            format!("vector {v}: counts {cm:?} vs brute force ({tp}, {fp}, {fn_}, {tn})")
        })?;
        let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let r = metrics_from_confusion(&cm);
        let want = [
            ("accuracy", div(tp + tn, 50), r.accuracy.to_f64()),
            ("precision", div(tp, tp + fp), r.precision.to_f64()),
            ("recall", div(tp, tp + fn_), r.recall.to_f64()),
            ("f1", div(2 * tp, 2 * tp + fp + fn_), r.f1.to_f64()),
        ];
        for (name, oracle, got) in want {
            ensure((oracle - got).abs() < 1e-12, || format!("vector {v}: {name} {got} vs brute force {oracle}"))?;
        }
    }
    Ok(format!("(38, 0, 6, 44) → 0.93/1.00/0.86/0.93; {vectors} random 50-sample vectors agree with brute force"))
}

// ---------------------------------------------------------------------------
// Hyperband

/// Layer counts 1–3, both activations, dropout on or off, one unit width.
pub fn twelve_point_space() -> SearchSpace {
    SearchSpace {
        layers: (1, 3),
        units: (64, 64),
        unit_step: 8,
        activations: vec![Activation::Relu, Activation::Tanh],
        dropout: vec![false, true],
        dropout_rate: 0.2,
    }
}

/// Unique maximum at two ReLU layers with dropout.
pub fn planted_score(c: &TrialConfig) -> f64 {
    let depth = match c.units.len() {
        2 => 0.0,
        1 => -1.0,
        _ => -1.5,
    };
    let act = if c.activation == Activation::Relu { 0.0 } else { -0.4 };
    let drop = if c.dropout { 0.0 } else { -0.2 };
    // Larger budgets sharpen the signal, as longer training would.
    (depth + act + drop) * (1.0 + c.budget as f64 / 27.0)
}

pub fn hyperband_criterion(seeds: u64) -> Check {
    let schedule = build_schedule(27, 3).map_err(|e| e.to_string())?;
    let heads = schedule.bracket_heads();
    ensure(heads == vec![(27, 1), (9, 3), (6, 9), (4, 27)], || format!("brackets {heads:?}"))?;
    let space = twelve_point_space();
    ensure(space.size() == 12, || format!("space has {} points", space.size()))?;
    for seed in 0..seeds {
        let out = run_search(&schedule, &space, |c| Ok(planted_score(c)), seed, None).map_err(|e| e.to_string())?;
        let got = (out.best.units.len(), out.best.activation, out.best.dropout);
        ensure(got == (2, Activation::Relu, true), || format!("seed {seed}: best {got:?}"))?;
    }
    Ok(format!("brackets {heads:?}; planted optimum found in {seeds}/{seeds} seeds"))
}

// ---------------------------------------------------------------------------
// Trainer

pub fn convergence_config() -> TrainConfig {
    TrainConfig {
        head: HeadConfig {
            units: vec![16],
            activation: Activation::Relu,
            dropout: None,
        },
        head_epochs: 200,
        fine_tune_epochs: 0,
        batch_size: 8,
        lr_head: 1e-3,
        seeds: SeedTuple::from_root(17),
        early_stopping: None,
        ..TrainConfig::default()
    }
}

pub fn trainer_criterion() -> Check {
    let cfg = convergence_config();
    let data = separable_features(32, 8, 5);
    let run = || {
        let mut head = build_head::<f32>(&cfg.head, &[8], 2, cfg.seeds.init).map_err(|e| e.to_string())?;
        train_head(&cfg, &mut head, &data, None).map_err(|e| e.to_string())
    };
    let a = run()?;
    let b = run()?;
    ensure(a.len() == 200, || format!("{} epochs recorded", a.len()))?;
    let first = a
        .records
        .iter()
        .find(|r| r.train_acc == 1.0)
        .ok_or_else(|| format!("train accuracy peaked at {:.3}", a.records.iter().map(|r| r.train_acc).fold(0.0, f64::max)))?;
    ensure(a.same_metrics(&b), || "two runs with one seed tuple produced different histories".into())?;
    Ok(format!(
        "100% train accuracy at epoch {} of 200; two runs bitwise identical over {} records",
        first.epoch,
        a.len()
    ))
}

// ---------------------------------------------------------------------------
// Split and augmentation

pub fn balanced_index(per_class: usize) -> DatasetIndex {
    let classes = vec!["kudu".to_string(), "nyala".to_string()];
    let samples = (0..2 * per_class)
        .map(|i| {
            let label = i % 2;
            let id = format!("{}/{i:04}.png", classes[label]);
            Sample {
                path: PathBuf::from(&id),
                id,
                label,
            }
        })
        .collect();
    DatasetIndex {
        classes,
        samples,
        assignment: None,
        split_seed: None,
    }
}

fn noise_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..w * h * 3).map(|_| rng.gen_range(0.0..255.0f32)).collect();
    Image::new(w, h, data).unwrap()
}

pub fn split_augment_criterion(seeds: u64) -> Check {
    let index = balanced_index(275);
    let expected = 275.0 * 0.15;
    let mut seen = BTreeSet::new();
    for seed in 0..seeds {
        let split = split_dataset(&index, seed, 0.15, true).map_err(|e| e.to_string())?;
        let test = split.indices(Split::Test);
        for class in 0..2 {
            let n = test.iter().filter(|&&i| split.samples[i].label == class).count();
            seen.insert(n);
            ensure((n as f64 - expected).abs() <= 1.0, || format!("seed {seed}: class {class} has {n} test samples"))?;
        }
    }
    for seed in 0..20 {
        let img = noise_image(7 + seed as usize, 5, seed);
        ensure(img.flip_horizontal().flip_horizontal() == img, || format!("double flip changed image {seed}"))?;
        let same = augment(&img, &AugmentConfig::identity(), seed);
        ensure(same == img, || format!("identity augmentation changed image {seed} by {}", same.max_abs_diff(&img)))?;
    }
    Ok(format!(
        "550 samples at 15%: per-class test counts {seen:?} vs 41.25 over {seeds} seeds; double flip and identity augment exact"
    ))
}

// ---------------------------------------------------------------------------
// Freeze contract

pub fn small_backbone(arch: Architecture, seed: u64) -> Backbone {
    let spec = BackboneSpec::new(arch).with_input_size(32).with_divisor(32);
    Backbone::random(spec, seed).unwrap()
}

pub fn freeze_run_config(seed: u64) -> TrainConfig {
    TrainConfig {
        head: HeadConfig {
            units: vec![8],
            activation: Activation::Relu,
            dropout: Some(0.2),
        },
        head_epochs: 3,
        fine_tune_epochs: 3,
        batch_size: 4,
        lr_head: 1e-3,
        lr_fine_tune: 1e-4,
        unfreeze: FreezePlan::new(2),
        seeds: SeedTuple::from_root(seed),
        ..TrainConfig::default()
    }
}

/// Random-input agreement of a network with its split at `plan`.
pub fn composition_error(net: &NetworkGraph<f32>, plan: &FreezePlan, inputs: usize, seed: u64) -> Result<f32, String> {
    let split = split_at_cut(net, plan).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f32 = 0.0;
    let chunk = 10;
    for start in (0..inputs).step_by(chunk) {
        let b = chunk.min(inputs - start);
        let x: Tensor32 = Tensor::from_fn(&batched(net.input_shape(), b), |_| rng.gen_range(-2.0..2.0f32));
        let whole = net.infer(&x).map_err(|e| e.to_string())?;
        let parts = split
            .tail
            .infer(&split.trunk.infer(&x).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        worst = worst.max(whole.max_abs_diff(&parts).map_err(|e| e.to_string())?);
    }
    Ok(worst)
}

pub fn freeze_criterion() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_image_dataset(dir.path(), 10, 24, 3).map_err(|e| e.to_string())?;
    let (index, _) = scan_dataset(dir.path()).map_err(|e| e.to_string())?;
    let index = split_dataset(&index, 1, 0.2, true).map_err(|e| e.to_string())?;
    let backbone = small_backbone(Architecture::Vgg16, 5);
    let cfg = freeze_run_config(9);
    let out = run_two_stage(&cfg, &index, &backbone, None).map_err(|e| e.to_string())?;
    let cut = out.model.cut;
    let before = backbone.features().slice(0..cut).map_err(|e| e.to_string())?.checksum(|_, _| true);
    let after = out.model.network.slice(0..cut).map_err(|e| e.to_string())?.checksum(|_, _| true);
    ensure(before == after, || format!("trunk checksum {before:08x} became {after:08x}"))?;
    let tail_before = backbone.features().slice(cut..backbone.features().len()).map_err(|e| e.to_string())?.checksum(|_, _| true);
    let tail_after = out.model.network.slice(cut..backbone.features().len()).map_err(|e| e.to_string())?.checksum(|_, _| true);
    ensure(tail_before != tail_after, || "fine-tuning left the unfrozen layers unchanged".into())?;

    let mut errors = Vec::new();
    for arch in [Architecture::Vgg16, Architecture::Resnet50] {
        let b = small_backbone(arch, 2);
        let head = build_head::<f32>(&cfg.head, b.feature_shape(), 2, 4).map_err(|e| e.to_string())?;
        let net = b.features().then(&head).map_err(|e| e.to_string())?;
        let e = composition_error(&net, &FreezePlan::new(2), 100, 8)?;
        ensure(e < 1e-6, || format!("{arch}: split composition differs by {e:e}"))?;
        errors.push(format!("{arch} {e:.1e}"));
    }
    Ok(format!(
        "trunk checksum {before:08x} unchanged over {} epochs; composition error on 100 inputs: {}",
        out.history.len(),
        errors.join(", ")
    ))
}

//! Central finite-difference check of every analytic gradient, including the
//! template-map gradient that training never applies.
//!
//! The perturbed loss is not obtained from two independent forward passes.
//! Instead the change caused by moving one coordinate is pushed through the
//! network as an explicit difference, layer by layer, using only forward
//! primitives. In exact arithmetic this is the same quantity
//! `L(θ+ε) - L(θ-ε)`; in floating point it avoids subtracting two nearly
//! equal losses, which at `ε = 1e-6` would otherwise swamp small gradients
//! with roundoff.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::ViewAngles;
use crate::network::{backward, forward, softmax, ArchConfig, ForwardTrace, NetworkParams, ParamGrads};
use crate::objective::{mixed_loss, HeadMode, SoftLabel, POSE_CLASSES, POSE_OUTPUTS};
use crate::template_layer::TemplateBank;
use crate::tensor::{conv2d_forward, dense_forward, Tensor};

/// Finite-difference check settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub arch: ArchConfig,
    /// Checked coordinates per layer. Layers with fewer coordinates are
    /// checked over several random inputs.
    pub trials: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Coordinates whose perturbation moves a ReLU input lying within this
    /// distance of zero are skipped.
    pub kink_guard: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::miniature(),
            trials: 200,
            epsilon: 1e-6,
            tolerance: 1e-5,
            kink_guard: 1e-4,
            lambda: 1.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: String,
    pub checked: usize,
    pub skipped: usize,
    /// Checked coordinates whose numeric gradient is nonzero.
    pub nonzero: usize,
    pub max_rel_error: f64,
    pub worst: Option<Worst>,
    /// False for the template maps, whose gradient is only verified.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub layers: Vec<LayerReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.max_rel_error <= self.tolerance && l.checked > 0)
    }

    pub fn max_error(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    /// Smallest number of checked coordinates over all layers.
    pub fn min_checked(&self) -> usize {
        self.layers.iter().map(|l| l.checked).min().unwrap_or(0)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>8} {:>8} {:>8} {:>12}",
            "layer", "checked", "nonzero", "skipped", "max_rel_err"
        )?;
        for l in &self.layers {
            let tag = if l.trainable { "" } else { " (fixed)" };
            writeln!(
                f,
                "{:<12} {:>8} {:>8} {:>8} {:>12.3e}{}",
                l.layer, l.checked, l.nonzero, l.skipped, l.max_rel_error, tag
            )?;
        }
        if self.passed() {
            write!(f, "PASS (tolerance {:e})", self.tolerance)
        } else {
            let worst = self
                .layers
                .iter()
                .filter(|l| l.worst.is_some())
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
            write!(f, "FAIL (tolerance {:e})", self.tolerance)?;
            if let Some(w) = worst.and_then(|l| l.worst.as_ref()) {
                write!(
                    f,
                    ": worst {}[{}] analytic {:.12e} numeric {:.12e}",
                    w.tensor, w.index, w.analytic, w.numeric
                )?;
            }
            Ok(())
        }
    }
}

/// A random input and a random foreground or background label.
fn random_case(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> (Tensor<f64>, SoftLabel) {
    let n = arch.input_size;
    let x = Tensor::from_fn(&[arch.input_channels, n, n], |_| rng.gen_range(0.0..1.0));
    let label = if rng.gen_bool(0.5) {
        SoftLabel::background()
    } else {
        let mut pose = [0.0; POSE_OUTPUTS];
        let w: Vec<f64> = (0..POSE_CLASSES).map(|_| rng.gen_range(0.0..1.0)).collect();
        let z: f64 = w.iter().sum();
        for (p, v) in pose.iter_mut().zip(w) {
            *p = v / z;
        }
        SoftLabel { fg: [1.0, 0.0], pose }
    };
    (x, label)
}

/// One perturbed coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Coord {
    /// Trainable tensor index and flat offset.
    Param(usize, usize),
    Template(usize),
}

/// Exact change of every ReLU input (in [`ForwardTrace::relu_inputs`]
/// order) and of both logit vectors.
struct Shift {
    relu: Vec<f64>,
    fg: Vec<f64>,
    pose: Vec<f64>,
}

fn one_hot(shape: &[usize], hot: Option<usize>, delta: f64) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    if let Some(k) = hot {
        t.data_mut()[k] = delta;
    }
    t
}

fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// `relu(a + d) - relu(a)`, elementwise, without cancellation when the
/// sign of `a` is unchanged.
fn relu_delta(a: &[f64], d: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(d)
        .map(|(&a, &d)| {
            let n = a + d;
            match (a > 0.0, n > 0.0) {
                (true, true) => d,
                (false, false) => 0.0,
                _ => n.max(0.0) - a.max(0.0),
            }
        })
        .collect()
}

/// Weight and bias perturbation for trainable tensor pair `layer`, or
/// zeros when the perturbed coordinate lives elsewhere.
fn layer_delta(
    coord: Coord,
    layer: usize,
    w_shape: &[usize],
    b_shape: &[usize],
    delta: f64,
) -> Option<(Tensor<f64>, Tensor<f64>)> {
    match coord {
        Coord::Param(t, k) if t / 2 == layer => {
            let (w, b) = if t % 2 == 0 { (Some(k), None) } else { (None, Some(k)) };
            Some((one_hot(w_shape, w, delta), one_hot(b_shape, b, delta)))
        }
        _ => None,
    }
}

/// Pushes a single-coordinate change of size `delta` through the network.
fn shift(params: &NetworkParams<f64>, trace: &ForwardTrace<f64>, coord: Coord, delta: f64) -> Result<Shift> {
    let mut relu = Vec::new();
    let n_base = params.base_layers().len();
    let n_conv = n_base + params.classifier_layers().len();

    // Convolution stack with the template layer between base and classifier.
    let conv_pass = |layers: &[crate::network::ConvLayer<f64>],
                     first: usize,
                     input: &Tensor<f64>,
                     d_input: Tensor<f64>,
                     pre: &[Tensor<f64>],
                     act: &[Tensor<f64>],
                     relu: &mut Vec<f64>|
     -> Result<Tensor<f64>> {
        let mut dx = d_input;
        for (i, layer) in layers.iter().enumerate() {
            let x = if i == 0 { input } else { &act[i - 1] };
            let zero_bias = Tensor::zeros(layer.bias.shape());
            let mut da = conv2d_forward(&dx, &layer.kernels, &zero_bias, layer.stride)?;
            if let Some((dk, db)) = layer_delta(coord, first + i, layer.kernels.shape(), layer.bias.shape(), delta) {
                let own = conv2d_forward(&add(x, &dx), &dk, &db, layer.stride)?;
                da = add(&da, &own);
            }
            relu.extend_from_slice(da.data());
            dx = Tensor::new(da.shape().to_vec(), relu_delta(pre[i].data(), da.data()))?;
        }
        Ok(dx)
    };

    let d_input = Tensor::zeros(trace.input.shape());
    let dzhat = conv_pass(
        params.base_layers(),
        0,
        &trace.input,
        d_input,
        &trace.base_pre,
        &trace.base_act,
        &mut relu,
    )?;
    let dz = match (params.template_maps(), &trace.template_pre) {
        (Some(maps), Some(pre)) => {
            let zhat = trace.zhat();
            let dmaps = match coord {
                Coord::Template(k) => one_hot(maps.shape(), Some(k), delta),
                _ => Tensor::zeros(maps.shape()),
            };
            // (zhat + dzhat)(T + dT) - zhat T
            let dpre: Vec<f64> = dzhat
                .data()
                .iter()
                .zip(zhat.data())
                .zip(maps.data().iter().zip(dmaps.data()))
                .map(|((&dzh, &zh), (&t, &dt))| dzh * (t + dt) + zh * dt)
                .collect();
            relu.extend_from_slice(&dpre);
            Tensor::new(dzhat.shape().to_vec(), relu_delta(pre.data(), &dpre))?
        }
        _ => dzhat,
    };
    let dflat = conv_pass(
        params.classifier_layers(),
        n_base,
        &trace.z,
        dz,
        &trace.class_pre,
        &trace.class_act,
        &mut relu,
    )?;
    let flat = trace.class_act.last().unwrap_or(&trace.z).data();

    let dense = |layer: &crate::network::DenseLayer<f64>, index: usize, x: &[f64], dx: &[f64]| -> Result<Vec<f64>> {
        let zero_bias = Tensor::zeros(layer.bias.shape());
        let mut d = dense_forward(&layer.weights, &zero_bias, dx)?;
        if let Some((dw, db)) = layer_delta(coord, index, layer.weights.shape(), layer.bias.shape(), delta) {
            let moved: Vec<f64> = x.iter().zip(dx).map(|(a, b)| a + b).collect();
            for (di, oi) in d.iter_mut().zip(dense_forward(&dw, &db, &moved)?) {
                *di += oi;
            }
        }
        Ok(d)
    };
    let dfc_pre = dense(params.fc(), n_conv, flat, dflat.data())?;
    relu.extend_from_slice(&dfc_pre);
    let dfc = relu_delta(&trace.fc_pre, &dfc_pre);
    let fg = dense(params.fg_head(), n_conv + 1, &trace.fc_act, &dfc)?;
    let pose = dense(params.pose_head(), n_conv + 2, &trace.fc_act, &dfc)?;
    Ok(Shift { relu, fg, pose })
}

/// `CE(logits + d) - CE(logits)` for a fixed target.
fn cross_entropy_shift(probs: &[f64], d: &[f64], target: &[f64]) -> f64 {
    let lse = probs.iter().zip(d).map(|(p, d)| p * d.exp_m1()).sum::<f64>().ln_1p();
    let total: f64 = target.iter().sum();
    lse * total - target.iter().zip(d).map(|(t, d)| t * d).sum::<f64>()
}

/// Mixed-loss change for one shift. The probability floor of the loss is
/// not modelled; it never engages on the random networks checked here.
fn loss_shift(trace: &ForwardTrace<f64>, s: &Shift, label: &SoftLabel, lambda: f64, head: HeadMode) -> f64 {
    let (w_fg, w_pose) = match head {
        HeadMode::Mixed => (1.0, lambda),
        HeadMode::PoseOnly => (0.0, 1.0),
    };
    let fg = softmax(&trace.logits_fg);
    let pose = softmax(&trace.logits_pose);
    w_fg * cross_entropy_shift(&fg, &s.fg, &label.fg) + w_pose * cross_entropy_shift(&pose, &s.pose, &label.pose)
}

/// True when the perturbation moved a ReLU input that sits near the kink or
/// flipped its sign.
fn crosses_kink(base: &[f64], plus: &[f64], minus: &[f64], guard: f64) -> bool {
    base.iter().zip(plus).zip(minus).any(|((&b, &p), &m)| {
        (p != 0.0 || m != 0.0) && (b.abs() < guard || (b + p > 0.0) != (b > 0.0) || (b + m > 0.0) != (b > 0.0))
    })
}

/// Per-layer groups of trainable tensor indices.
fn layer_groups(params: &NetworkParams<f64>) -> Vec<(String, Vec<usize>)> {
    let names = params.trainable_names();
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, n) in names.iter().enumerate() {
        let layer = n.split('.').next().unwrap_or(n).to_string();
        match groups.last_mut() {
            Some((l, v)) if *l == layer => v.push(i),
            _ => groups.push((layer, vec![i])),
        }
    }
    groups
}

struct Case {
    label: SoftLabel,
    trace: ForwardTrace<f64>,
    grads: ParamGrads<f64>,
    relu: Vec<f64>,
}

/// Checks analytic gradients of `params` against central differences.
/// `corrupt` may alter the analytic gradients before comparison (used to
/// verify that the harness detects errors).
pub fn gradcheck_params(
    params: &NetworkParams<f64>,
    cfg: &GradcheckConfig,
    corrupt: &dyn Fn(&mut ParamGrads<f64>),
) -> Result<GradcheckReport> {
    if params.arch() != &cfg.arch {
        return Err(Error::Config("gradcheck network does not match the configured architecture".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let head = params.arch().head;
    let groups = layer_groups(params);
    let sizes: Vec<usize> = params.trainable().iter().map(|t| t.len()).collect();
    let smallest = groups
        .iter()
        .map(|(_, idx)| idx.iter().map(|&i| sizes[i]).sum::<usize>())
        .chain(params.template_maps().map(|m| m.len()))
        .min()
        .unwrap_or(1)
        .max(1);
    // Enough cases that even the smallest layer offers `trials` slots, plus
    // headroom for skipped coordinates.
    let n_cases = (2 * cfg.trials).div_ceil(smallest).max(2);
    let mut cases = Vec::with_capacity(n_cases);
    for _ in 0..n_cases {
        let (x, label) = random_case(&cfg.arch, &mut rng);
        let trace = forward(params, &x)?;
        let terms = mixed_loss(&trace.p_fg, &trace.p_pose, &label, cfg.lambda, head)?;
        let mut grads = backward(params, &trace, &terms.grad_logits_fg, &terms.grad_logits_pose)?;
        corrupt(&mut grads);
        let relu = trace.relu_inputs();
        cases.push(Case {
            label,
            trace,
            grads,
            relu,
        });
    }

    let names = params.trainable_names();
    let eps = cfg.epsilon;
    let mut jobs: Vec<(String, Vec<(usize, Coord)>, bool)> = groups
        .iter()
        .map(|(layer, tensors)| {
            let mut slots = Vec::new();
            for c in 0..n_cases {
                for &t in tensors {
                    slots.extend((0..sizes[t]).map(|k| (c, Coord::Param(t, k))));
                }
            }
            (layer.clone(), slots, true)
        })
        .collect();
    if let Some(maps) = params.template_maps() {
        let slots = (0..n_cases)
            .flat_map(|c| (0..maps.len()).map(move |k| (c, Coord::Template(k))))
            .collect();
        jobs.push(("templates".into(), slots, false));
    }

    let mut layers = Vec::new();
    for (layer, mut slots, trainable) in jobs {
        slots.shuffle(&mut rng);
        let mut report = LayerReport {
            layer,
            checked: 0,
            skipped: 0,
            nonzero: 0,
            max_rel_error: 0.0,
            worst: None,
            trainable,
        };
        for (c, coord) in slots {
            if report.checked == cfg.trials {
                break;
            }
            let case = &cases[c];
            let plus = shift(params, &case.trace, coord, eps)?;
            let minus = shift(params, &case.trace, coord, -eps)?;
            if crosses_kink(&case.relu, &plus.relu, &minus.relu, cfg.kink_guard) {
                report.skipped += 1;
                continue;
            }
            let numeric = (loss_shift(&case.trace, &plus, &case.label, cfg.lambda, head)
                - loss_shift(&case.trace, &minus, &case.label, cfg.lambda, head))
                / (2.0 * eps);
            let (tensor, index, analytic) = match coord {
                Coord::Param(t, k) => (names[t].as_str(), k, case.grads.tensors[t].data()[k]),
                Coord::Template(k) => (
                    "templates",
                    k,
                    case.grads.templates.as_ref().map(|g| g.data()[k]).unwrap_or(0.0),
                ),
            };
            record(&mut report, tensor, index, analytic, numeric);
        }
        layers.push(report);
    }
    Ok(GradcheckReport {
        layers,
        tolerance: cfg.tolerance,
    })
}

fn record(report: &mut LayerReport, tensor: &str, index: usize, analytic: f64, numeric: f64) {
    let err = (analytic - numeric).abs() / numeric.abs().max(1e-8);
    report.checked += 1;
    if numeric != 0.0 {
        report.nonzero += 1;
    }
    if err > report.max_rel_error || report.worst.is_none() {
        report.max_rel_error = report.max_rel_error.max(err);
        report.worst = Some(Worst {
            tensor: tensor.to_string(),
            index,
            analytic,
            numeric,
        });
    }
}

/// Gradient check of a freshly initialised network with random templates.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let params = gradcheck_network(cfg)?;
    gradcheck_params(&params, cfg, &|_| {})
}

/// Network used by [`gradcheck`]: random weights, random sparse templates
/// in (0, 1] and positive biases.
pub fn gradcheck_network(cfg: &GradcheckConfig) -> Result<NetworkParams<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let bank = if cfg.arch.template_layer {
        let (h, w) = cfg.arch.feature_size()?;
        let m = cfg.arch.template_count();
        if m % 3 != 0 {
            return Err(Error::Config("template count must be a multiple of three".into()));
        }
        let mut maps = Tensor::from_fn(&[m, h, w], |_| {
            if rng.gen_bool(0.25) {
                0.0
            } else {
                rng.gen_range(0.05f32..1.0)
            }
        });
        // Keep every map non-empty.
        for c in 0..m {
            maps.data_mut()[c * h * w] = 0.5;
        }
        let views = vec![ViewAngles::default(); m / 3];
        Some(Arc::new(TemplateBank::from_maps(maps, views, cfg.arch.input_size)?))
    } else {
        None
    };
    let mut params = NetworkParams::init(&cfg.arch, bank, cfg.seed)?;
    // Zero biases leave most units of a fresh network dead, which would
    // make most checked gradients trivially zero.
    let names = params.trainable_names();
    for (name, t) in names.iter().zip(params.trainable_mut()) {
        if name.ends_with(".bias") {
            for b in t.data_mut() {
                *b = rng.gen_range(0.05..0.3);
            }
        }
    }
    Ok(params)
}

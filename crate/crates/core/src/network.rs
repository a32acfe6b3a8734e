//! Base network, template layer and classification network, composed into
//! one forward pass and its hand-derived backward pass.
//!
//! ```text
//! x -> conv+relu (base, 3 layers) -> zhat
//!   -> z = relu(zhat * T)            (template layer, fixed T)
//!   -> conv+relu (classifier, 2 layers) -> flatten -> fc+relu
//!   -> softmax fg/bg head (2)  and  softmax pose head (17)
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objective::{HeadMode, FG_OUTPUTS, POSE_OUTPUTS};
use crate::scalar::Scalar;
use crate::template_layer::{self, TemplateBank};
use crate::tensor::{
    conv2d_backward_impl, conv2d_forward, dense_backward, dense_forward, read_tnt, relu,
    write_tnt, ConvGeometry, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
        }
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}k{}s{}", self.out_channels, self.kernel, self.stride)
    }
}

impl FromStr for ConvSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::format("conv spec", s.to_string());
        let (c, rest) = s.split_once('k').ok_or_else(bad)?;
        let (k, st) = rest.split_once('s').ok_or_else(bad)?;
        Ok(ConvSpec::new(
            c.parse().map_err(|_| bad())?,
            k.parse().map_err(|_| bad())?,
            st.parse().map_err(|_| bad())?,
        ))
    }
}

/// Layer layout of a templateNet (or of its template-free twin).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    pub input_channels: usize,
    pub input_size: usize,
    /// Convolutions before the template layer; the last one emits one
    /// channel per template map.
    pub base: Vec<ConvSpec>,
    /// Convolutions after the template layer.
    pub classifier: Vec<ConvSpec>,
    pub fc_hidden: usize,
    /// When false the template multiply is skipped (plain CNN baseline with
    /// an identical trainable parameter set).
    pub template_layer: bool,
    pub head: HeadMode,
}

impl ArchConfig {
    /// Five-conv desk configuration with the template layer after conv3.
    pub fn desk(templates: usize) -> Self {
        Self {
            input_channels: 3,
            input_size: 128,
            base: vec![
                ConvSpec::new(16, 5, 2),
                ConvSpec::new(32, 5, 2),
                ConvSpec::new(templates, 3, 1),
            ],
            classifier: vec![ConvSpec::new(64, 3, 1), ConvSpec::new(64, 3, 2)],
            fc_hidden: 256,
            template_layer: true,
            head: HeadMode::Mixed,
        }
    }

    /// Tiny 3x16x16 network with 3 templates, used by gradient checks.
    pub fn miniature() -> Self {
        Self {
            input_channels: 3,
            input_size: 16,
            base: vec![
                ConvSpec::new(4, 3, 1),
                ConvSpec::new(5, 3, 2),
                ConvSpec::new(3, 3, 1),
            ],
            classifier: vec![ConvSpec::new(4, 3, 1), ConvSpec::new(4, 2, 1)],
            fc_hidden: 8,
            template_layer: true,
            head: HeadMode::Mixed,
        }
    }

    pub fn with_template_layer(mut self, on: bool) -> Self {
        self.template_layer = on;
        self
    }

    pub fn with_head(mut self, head: HeadMode) -> Self {
        self.head = head;
        self
    }

    pub fn template_count(&self) -> usize {
        self.base.last().map(|c| c.out_channels).unwrap_or(0)
    }

    /// Output shapes `[C,H,W]` of every convolution, base layers first.
    pub fn conv_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shape = [self.input_channels, self.input_size, self.input_size];
        let mut out = Vec::new();
        for spec in self.base.iter().chain(&self.classifier) {
            let g = ConvGeometry::new(
                &shape,
                &[spec.out_channels, shape[0], spec.kernel, spec.kernel],
                spec.stride,
            )?;
            shape = g.output_shape();
            out.push(shape);
        }
        Ok(out)
    }

    /// Spatial size `(h, w)` of the template-layer feature maps.
    pub fn feature_size(&self) -> Result<(usize, usize)> {
        let shapes = self.conv_shapes()?;
        let s = shapes[self.base.len() - 1];
        Ok((s[1], s[2]))
    }

    /// Input-pixel coordinate of the receptive-field centre of feature cell 0
    /// and the input-pixel spacing between adjacent feature cells.
    pub fn feature_footprint(&self) -> (f64, f64) {
        let mut offset = 0.0;
        let mut step = 1.0;
        for spec in &self.base {
            offset += step * (spec.kernel as f64 - 1.0) / 2.0;
            step *= spec.stride as f64;
        }
        (offset, step)
    }

    pub fn flat_features(&self) -> Result<usize> {
        let shapes = self.conv_shapes()?;
        let last = shapes.last().copied().unwrap_or([
            self.input_channels,
            self.input_size,
            self.input_size,
        ]);
        Ok(last.iter().product())
    }

    pub fn validate(&self) -> Result<()> {
        if self.base.is_empty() {
            return Err(Error::Config("base network needs at least one convolution".into()));
        }
        if self.input_channels == 0 || self.input_size == 0 || self.fc_hidden == 0 {
            return Err(Error::Config("architecture extents must be positive".into()));
        }
        if self
            .base
            .iter()
            .chain(&self.classifier)
            .any(|c| c.out_channels == 0 || c.kernel == 0 || c.stride == 0)
        {
            return Err(Error::Config("convolution extents must be positive".into()));
        }
        self.conv_shapes().map_err(|e| Error::Config(format!("layer shapes: {}", e)))?;
        Ok(())
    }

    /// Number of trainable scalars. The template layer adds none.
    pub fn trainable_count(&self) -> Result<usize> {
        let mut channels = self.input_channels;
        let mut n = 0;
        for spec in self.base.iter().chain(&self.classifier) {
            n += spec.out_channels * channels * spec.kernel * spec.kernel + spec.out_channels;
            channels = spec.out_channels;
        }
        let flat = self.flat_features()?;
        n += self.fc_hidden * flat + self.fc_hidden;
        n += (FG_OUTPUTS + POSE_OUTPUTS) * (self.fc_hidden + 1);
        Ok(n)
    }

    /// Stable digest of the layout, recorded in checkpoints.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{:02x}", b)).collect()
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[ConvSpec]| {
            if v.is_empty() {
                "-".to_string()
            } else {
                v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
            }
        };
        write!(
            f,
            "input={}x{}x{} base={} classifier={} fc={} template_layer={} head={}",
            self.input_channels,
            self.input_size,
            self.input_size,
            join(&self.base),
            join(&self.classifier),
            self.fc_hidden,
            self.template_layer as u8,
            self.head.as_str()
        )
    }
}

impl FromStr for ArchConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = |d: &str| Error::format("architecture", format!("{}: {:?}", d, s));
        let mut arch = ArchConfig {
            input_channels: 0,
            input_size: 0,
            base: Vec::new(),
            classifier: Vec::new(),
            fc_hidden: 0,
            template_layer: true,
            head: HeadMode::Mixed,
        };
        let convs = |v: &str| -> Result<Vec<ConvSpec>> {
            if v == "-" {
                Ok(Vec::new())
            } else {
                v.split(',').map(str::parse).collect()
            }
        };
        for field in s.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad("missing '='"))?;
            match k {
                "input" => {
                    let dims: Vec<usize> = v
                        .split('x')
                        .map(|d| d.parse().map_err(|_| bad("input dims")))
                        .collect::<Result<_>>()?;
                    if dims.len() != 3 || dims[1] != dims[2] {
                        return Err(bad("input must be CxNxN"));
                    }
                    arch.input_channels = dims[0];
                    arch.input_size = dims[1];
                }
                "base" => arch.base = convs(v)?,
                "classifier" => arch.classifier = convs(v)?,
                "fc" => arch.fc_hidden = v.parse().map_err(|_| bad("fc"))?,
                "template_layer" => arch.template_layer = v == "1",
                "head" => arch.head = v.parse()?,
                _ => return Err(bad("unknown key")),
            }
        }
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    /// `[outputs, inputs]`.
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct Templates<T> {
    bank: Arc<TemplateBank>,
    maps: Tensor<T>,
}

/// All network parameters. Templates are held by reference and never exposed
/// mutably; only the trainable tensors are reachable through
/// [`NetworkParams::trainable_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    arch: ArchConfig,
    base: Vec<ConvLayer<T>>,
    classifier: Vec<ConvLayer<T>>,
    fc: DenseLayer<T>,
    fg_head: DenseLayer<T>,
    pose_head: DenseLayer<T>,
    templates: Option<Templates<T>>,
}

/// Zero-mean uniform weights with standard deviation `1/sqrt(fan_in)`.
fn uniform_tensor<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}

impl<T: Scalar> NetworkParams<T> {
    /// Fresh parameters: weights uniform in `+-sqrt(3/fan_in)`, biases zero.
    ///
    /// `bank` is required when the architecture has a template layer and must
    /// provide exactly one map per base-network output channel at the
    /// feature-map resolution. A bank may also be attached to a template-free
    /// network; it is then only used for visualization.
    pub fn init(arch: &ArchConfig, bank: Option<Arc<TemplateBank>>, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = |spec: &ConvSpec, cin: usize, rng: &mut ChaCha8Rng| {
            let fan_in = cin * spec.kernel * spec.kernel;
            ConvLayer {
                kernels: uniform_tensor(&[spec.out_channels, cin, spec.kernel, spec.kernel], fan_in, rng),
                bias: Tensor::zeros(&[spec.out_channels]),
                stride: spec.stride,
            }
        };
        let mut cin = arch.input_channels;
        let mut base = Vec::new();
        for spec in &arch.base {
            base.push(conv(spec, cin, &mut rng));
            cin = spec.out_channels;
        }
        let mut classifier = Vec::new();
        for spec in &arch.classifier {
            classifier.push(conv(spec, cin, &mut rng));
            cin = spec.out_channels;
        }
        let flat = arch.flat_features()?;
        let dense = |out: usize, inp: usize, rng: &mut ChaCha8Rng| DenseLayer {
            weights: uniform_tensor(&[out, inp], inp, rng),
            bias: Tensor::zeros(&[out]),
        };
        let fc = dense(arch.fc_hidden, flat, &mut rng);
        let fg_head = dense(FG_OUTPUTS, arch.fc_hidden, &mut rng);
        let pose_head = dense(POSE_OUTPUTS, arch.fc_hidden, &mut rng);
        let mut params = Self {
            arch: arch.clone(),
            base,
            classifier,
            fc,
            fg_head,
            pose_head,
            templates: None,
        };
        params.attach_bank(bank)?;
        Ok(params)
    }

    fn attach_bank(&mut self, bank: Option<Arc<TemplateBank>>) -> Result<()> {
        match bank {
            Some(bank) => {
                let (h, w) = self.arch.feature_size()?;
                let want = [self.arch.template_count(), h, w];
                if bank.maps().shape() != want {
                    return Err(Error::shape(
                        "template layer",
                        "template maps",
                        format!(
                            "bank is {:?} but the base network emits {:?}",
                            bank.maps().shape(),
                            want
                        ),
                    ));
                }
                let maps = bank.maps().cast();
                self.templates = Some(Templates { bank, maps });
            }
            None if self.arch.template_layer => {
                return Err(Error::Config("template layer enabled but no template bank given".into()));
            }
            None => self.templates = None,
        }
        Ok(())
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn bank(&self) -> Option<&Arc<TemplateBank>> {
        self.templates.as_ref().map(|t| &t.bank)
    }

    /// Template maps in the network's scalar type.
    pub fn template_maps(&self) -> Option<&Tensor<T>> {
        self.templates.as_ref().map(|t| &t.maps)
    }

    /// Copy of these parameters with different template maps, used to
    /// probe the template gradient numerically.
    pub fn with_template_maps(&self, maps: Tensor<T>) -> Result<Self> {
        let mut out = self.clone();
        let t = out
            .templates
            .as_mut()
            .ok_or_else(|| Error::Config("network has no templates".into()))?;
        if maps.shape() != t.maps.shape() {
            return Err(Error::shape("template layer", "template maps", format!("{:?}", maps.shape())));
        }
        t.maps = maps;
        Ok(out)
    }

    pub fn base_layers(&self) -> &[ConvLayer<T>] {
        &self.base
    }

    pub fn classifier_layers(&self) -> &[ConvLayer<T>] {
        &self.classifier
    }

    /// All convolutions in order (base first).
    pub fn conv_layer(&self, index: usize) -> Option<&ConvLayer<T>> {
        self.base.iter().chain(&self.classifier).nth(index)
    }

    pub fn fc(&self) -> &DenseLayer<T> {
        &self.fc
    }

    pub fn fg_head(&self) -> &DenseLayer<T> {
        &self.fg_head
    }

    pub fn pose_head(&self) -> &DenseLayer<T> {
        &self.pose_head
    }

    /// Names of trainable tensors, in the order of [`Self::trainable`].
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.base.len() + self.classifier.len() {
            names.push(format!("conv{}.kernels", i + 1));
            names.push(format!("conv{}.bias", i + 1));
        }
        for layer in ["fc", "fg_head", "pose_head"] {
            names.push(format!("{}.weights", layer));
            names.push(format!("{}.bias", layer));
        }
        names
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in self.base.iter().chain(&self.classifier) {
            out.push(&l.kernels);
            out.push(&l.bias);
        }
        for d in [&self.fc, &self.fg_head, &self.pose_head] {
            out.push(&d.weights);
            out.push(&d.bias);
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in self.base.iter_mut().chain(self.classifier.iter_mut()) {
            out.push(&mut l.kernels);
            out.push(&mut l.bias);
        }
        for d in [&mut self.fc, &mut self.fg_head, &mut self.pose_head] {
            out.push(&mut d.weights);
            out.push(&mut d.bias);
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let conv = |l: &ConvLayer<T>| ConvLayer {
            kernels: l.kernels.cast(),
            bias: l.bias.cast(),
            stride: l.stride,
        };
        let dense = |d: &DenseLayer<T>| DenseLayer {
            weights: d.weights.cast(),
            bias: d.bias.cast(),
        };
        NetworkParams {
            arch: self.arch.clone(),
            base: self.base.iter().map(conv).collect(),
            classifier: self.classifier.iter().map(conv).collect(),
            fc: dense(&self.fc),
            fg_head: dense(&self.fg_head),
            pose_head: dense(&self.pose_head),
            templates: self.templates.as_ref().map(|t| Templates {
                bank: t.bank.clone(),
                maps: t.maps.cast(),
            }),
        }
    }
}

/// Numerically stable softmax (max-logit subtraction).
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let e: Vec<T> = logits.iter().map(|&a| (a - max).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Affine layer followed by softmax.
pub fn softmax_head<T: Scalar>(head: &DenseLayer<T>, z: &[T]) -> Result<Vec<T>> {
    Ok(softmax(&dense_forward(&head.weights, &head.bias, z)?))
}

/// Activations retained by [`forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub input: Tensor<T>,
    pub base_pre: Vec<Tensor<T>>,
    pub base_act: Vec<Tensor<T>>,
    /// `zhat * T` before rectification (template layer only).
    pub template_pre: Option<Tensor<T>>,
    /// Classification network input.
    pub z: Tensor<T>,
    pub class_pre: Vec<Tensor<T>>,
    pub class_act: Vec<Tensor<T>>,
    pub fc_pre: Vec<T>,
    pub fc_act: Vec<T>,
    pub logits_fg: Vec<T>,
    pub logits_pose: Vec<T>,
    pub p_fg: Vec<T>,
    pub p_pose: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Feature masks: output of the base network.
    pub fn zhat(&self) -> &Tensor<T> {
        self.base_act.last().expect("base network is non-empty")
    }

    /// Foreground probability according to the head mode.
    pub fn foreground_probability(&self, head: HeadMode) -> T {
        match head {
            HeadMode::Mixed => self.p_fg[crate::objective::FG_INDEX],
            HeadMode::PoseOnly => crate::objective::fg_probability(&self.p_pose),
        }
    }

    /// Every ReLU input in the trace, flattened.
    pub fn relu_inputs(&self) -> Vec<T> {
        let mut v = Vec::new();
        for t in self.base_pre.iter().chain(self.template_pre.iter()).chain(&self.class_pre) {
            v.extend_from_slice(t.data());
        }
        v.extend_from_slice(&self.fc_pre);
        v
    }
}

pub fn forward<T: Scalar>(params: &NetworkParams<T>, input: &Tensor<T>) -> Result<ForwardTrace<T>> {
    let arch = &params.arch;
    let want = [arch.input_channels, arch.input_size, arch.input_size];
    if input.shape() != want {
        return Err(Error::shape(
            "forward",
            "input",
            format!("expected {:?}, got {:?}", want, input.shape()),
        ));
    }
    let mut base_pre = Vec::with_capacity(params.base.len());
    let mut base_act: Vec<Tensor<T>> = Vec::with_capacity(params.base.len());
    for layer in &params.base {
        let x = base_act.last().unwrap_or(input);
        let pre = conv2d_forward(x, &layer.kernels, &layer.bias, layer.stride)?;
        base_act.push(relu(&pre));
        base_pre.push(pre);
    }
    let zhat = base_act.last().expect("non-empty base");
    let (template_pre, z) = match (&params.templates, arch.template_layer) {
        (Some(t), true) => {
            let (pre, z) = template_layer::apply_with_preactivation(&t.maps, zhat)?;
            (Some(pre), z)
        }
        _ => (None, zhat.clone()),
    };
    let mut class_pre = Vec::with_capacity(params.classifier.len());
    let mut class_act: Vec<Tensor<T>> = Vec::with_capacity(params.classifier.len());
    for layer in &params.classifier {
        let x = class_act.last().unwrap_or(&z);
        let pre = conv2d_forward(x, &layer.kernels, &layer.bias, layer.stride)?;
        class_act.push(relu(&pre));
        class_pre.push(pre);
    }
    let flat = class_act.last().unwrap_or(&z).data();
    let fc_pre = dense_forward(&params.fc.weights, &params.fc.bias, flat)?;
    let fc_act: Vec<T> = fc_pre
        .iter()
        .map(|&x| if x > T::zero() { x } else { T::zero() })
        .collect();
    let logits_fg = dense_forward(&params.fg_head.weights, &params.fg_head.bias, &fc_act)?;
    let logits_pose = dense_forward(&params.pose_head.weights, &params.pose_head.bias, &fc_act)?;
    let p_fg = softmax(&logits_fg);
    let p_pose = softmax(&logits_pose);
    Ok(ForwardTrace {
        input: input.clone(),
        base_pre,
        base_act,
        template_pre,
        z,
        class_pre,
        class_act,
        fc_pre,
        fc_act,
        logits_fg,
        logits_pose,
        p_fg,
        p_pose,
    })
}

/// Gradients for every trainable tensor (same order as
/// [`NetworkParams::trainable`]) plus the template gradient, which is
/// reported but never applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub tensors: Vec<Tensor<T>>,
    pub templates: Option<Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(params: &NetworkParams<T>) -> Self {
        Self {
            tensors: params.trainable().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            templates: params.template_maps().map(|m| Tensor::zeros(m.shape())),
        }
    }

    pub fn accumulate(&mut self, other: &ParamGrads<T>) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(T::one(), b)?;
        }
        if let (Some(a), Some(b)) = (self.templates.as_mut(), other.templates.as_ref()) {
            a.axpy(T::one(), b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for t in &mut self.tensors {
            t.scale(alpha);
        }
        if let Some(t) = self.templates.as_mut() {
            t.scale(alpha);
        }
    }

    pub fn max_abs(&self) -> T {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(T::zero(), |m, &x| m.max(x.abs()))
    }
}

fn rectify_grad<T: Scalar>(grad: &mut Tensor<T>, pre: &Tensor<T>) {
    for (g, &p) in grad.data_mut().iter_mut().zip(pre.data()) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
}

fn check_trace<T: Scalar>(params: &NetworkParams<T>, trace: &ForwardTrace<T>) -> Result<()> {
    let shapes = params.arch.conv_shapes()?;
    let nb = params.base.len();
    let mismatch = |what: &str| {
        Error::shape(
            "backward",
            "trace",
            format!("{} does not match the parameter layout", what),
        )
    };
    if trace.base_pre.len() != nb || trace.class_pre.len() != params.classifier.len() {
        return Err(mismatch("layer count"));
    }
    for (t, s) in trace.base_pre.iter().chain(&trace.class_pre).zip(&shapes) {
        if t.shape() != s {
            return Err(mismatch("activation shape"));
        }
    }
    if trace.fc_pre.len() != params.arch.fc_hidden {
        return Err(mismatch("fc width"));
    }
    if params.arch.template_layer != trace.template_pre.is_some() {
        return Err(mismatch("template layer presence"));
    }
    Ok(())
}

/// Backpropagates head-logit gradients through the whole network.
pub fn backward<T: Scalar>(
    params: &NetworkParams<T>,
    trace: &ForwardTrace<T>,
    grad_logits_fg: &[T],
    grad_logits_pose: &[T],
) -> Result<ParamGrads<T>> {
    check_trace(params, trace)?;
    if grad_logits_fg.len() != FG_OUTPUTS || grad_logits_pose.len() != POSE_OUTPUTS {
        return Err(Error::shape("backward", "head gradient", "wrong logit count"));
    }
    let nconv = params.base.len() + params.classifier.len();
    let mut conv_grads: Vec<Option<(Tensor<T>, Tensor<T>)>> = vec![None; nconv];

    let (g_fg_in, g_fg_w) = dense_backward(&params.fg_head.weights, &trace.fc_act, grad_logits_fg, true)?;
    let (g_pose_in, g_pose_w) =
        dense_backward(&params.pose_head.weights, &trace.fc_act, grad_logits_pose, true)?;
    let mut g_fc: Vec<T> = g_fg_in
        .expect("requested")
        .iter()
        .zip(g_pose_in.expect("requested"))
        .map(|(&a, b)| a + b)
        .collect();
    for (g, &p) in g_fc.iter_mut().zip(&trace.fc_pre) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
    let flat_in = trace.class_act.last().unwrap_or(&trace.z);
    let (g_flat, g_fc_w) = dense_backward(&params.fc.weights, flat_in.data(), &g_fc, true)?;
    let mut grad = Tensor::new(flat_in.shape().to_vec(), g_flat.expect("requested"))?;

    for (i, layer) in params.classifier.iter().enumerate().rev() {
        rectify_grad(&mut grad, &trace.class_pre[i]);
        let x = if i == 0 { &trace.z } else { &trace.class_act[i - 1] };
        let g = conv2d_backward_impl(x, &layer.kernels, layer.stride, &grad, true)?;
        conv_grads[params.base.len() + i] = Some((g.kernels, g.bias));
        grad = g.input.expect("requested");
    }

    let mut template_grad = None;
    if let (Some(t), Some(pre)) = (&params.templates, &trace.template_pre) {
        let (g_zhat, g_t) = template_layer::backward_with_preactivation(&t.maps, trace.zhat(), pre, &grad)?;
        grad = g_zhat;
        template_grad = Some(g_t);
    }

    for (i, layer) in params.base.iter().enumerate().rev() {
        rectify_grad(&mut grad, &trace.base_pre[i]);
        let x = if i == 0 { &trace.input } else { &trace.base_act[i - 1] };
        let g = conv2d_backward_impl(x, &layer.kernels, layer.stride, &grad, i > 0)?;
        conv_grads[i] = Some((g.kernels, g.bias));
        if let Some(gi) = g.input {
            grad = gi;
        }
    }

    let mut tensors = Vec::with_capacity(2 * nconv + 6);
    for g in conv_grads {
        let (k, b) = g.expect("every conv layer visited");
        tensors.push(k);
        tensors.push(b);
    }
    tensors.push(g_fc_w);
    tensors.push(Tensor::new(vec![g_fc.len()], g_fc)?);
    tensors.push(g_fg_w);
    tensors.push(Tensor::vector(grad_logits_fg));
    tensors.push(g_pose_w);
    tensors.push(Tensor::vector(grad_logits_pose));
    if params.templates.is_some() && !params.arch.template_layer {
        template_grad = params.template_maps().map(|m| Tensor::zeros(m.shape()));
    }
    Ok(ParamGrads {
        tensors,
        templates: template_grad,
    })
}

const CHECKPOINT_HEADER: &str = "templatenet-checkpoint v1";

/// Writes a checkpoint directory: one TNT1 file per tensor plus `manifest.txt`.
pub fn save_checkpoint<T: Scalar>(params: &NetworkParams<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    manifest.push_str(CHECKPOINT_HEADER);
    manifest.push('\n');
    manifest.push_str(&format!("version {}\n", crate::VERSION));
    manifest.push_str(&format!("config_hash {}\n", params.arch.hash()));
    manifest.push_str(&format!("arch {}\n", params.arch));
    let strides: Vec<String> = params
        .base
        .iter()
        .chain(&params.classifier)
        .map(|l| l.stride.to_string())
        .collect();
    manifest.push_str(&format!("strides {}\n", strides.join(" ")));
    for (name, t) in params.trainable_names().iter().zip(params.trainable()) {
        let file = format!("{}.tnt", name);
        write_tnt(&dir.join(&file), t)?;
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("tensor {} {} {}\n", name, shape.join("x"), file));
    }
    if let Some(t) = &params.templates {
        t.bank.save(&dir.join("bank"))?;
        manifest.push_str("bank bank\n");
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<NetworkParams<T>> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_HEADER) {
        return Err(Error::format("checkpoint manifest", "missing header"));
    }
    let mut arch: Option<ArchConfig> = None;
    let mut hash = None;
    let mut tensors = Vec::new();
    let mut bank = None;
    for line in lines {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "version" | "strides" => {}
            "config_hash" => hash = Some(rest.to_string()),
            "arch" => arch = Some(rest.parse()?),
            "tensor" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::format("checkpoint manifest", line.to_string()));
                }
                let t = read_tnt(&dir.join(parts[2]))?;
                tensors.push((parts[0].to_string(), t));
            }
            "bank" => bank = Some(Arc::new(TemplateBank::load(&dir.join(rest))?)),
            "" => {}
            _ => return Err(Error::format("checkpoint manifest", line.to_string())),
        }
    }
    let arch = arch.ok_or_else(|| Error::format("checkpoint manifest", "missing arch"))?;
    if hash.as_deref() != Some(arch.hash().as_str()) {
        return Err(Error::format("checkpoint manifest", "config hash does not match arch"));
    }
    let mut params = NetworkParams::<T>::init(&arch, bank, 0)?;
    let names = params.trainable_names();
    if tensors.len() != names.len() {
        return Err(Error::format(
            "checkpoint manifest",
            format!("{} tensors listed, {} expected", tensors.len(), names.len()),
        ));
    }
    for ((slot, want), (name, t)) in params.trainable_mut().into_iter().zip(&names).zip(tensors) {
        if &name != want || slot.shape() != t.shape() {
            return Err(Error::format(
                "checkpoint manifest",
                format!("tensor {} {:?} does not fit slot {} {:?}", name, t.shape(), want, slot.shape()),
            ));
        }
        *slot = t.cast();
    }
    Ok(params)
}

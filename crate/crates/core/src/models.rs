//! Model descriptions and method-aware forward graph builders.
//!
//! A [`ModelSpec`] is a plain layer list; [`Model`] pairs it with trained
//! tensors and a per-layer [`MethodState`] that says how each weight layer is
//! sparsified. `forward_train` builds the stochastic training graph (noise
//! samples, regularizer terms, parameter bindings for the optimizer) while
//! `forward_eval` builds the deterministic graph over effective weights.

use crate::error::{Error, Result};
use crate::l0::{draw_gate_noise, hc_expected_l0, hc_sample, HardConcreteParams};
use crate::mask::SparsityMask;
use crate::rng::RngState;
use crate::tape::{MaskGradMode, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::vd::{vd_conv_forward_train, vd_dense_forward_train, vd_kl, vd_prune};

/// One entry in a model's layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Fully connected; weights are `[inputs, outputs]`.
    Dense { inputs: usize, outputs: usize },
    /// 2-D convolution; kernel is `[filters, in_channels, kernel, kernel]`.
    Conv { filters: usize, in_channels: usize, kernel: usize, stride: usize, pad: usize },
    /// Non-overlapping max pooling when `stride == size`.
    MaxPool { size: usize, stride: usize },
    Relu,
    Flatten,
}

/// Activation shape while walking a layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Channels, height, width (batch dimension implied).
    Chw(usize, usize, usize),
    /// Flat feature count (batch dimension implied).
    Flat(usize),
}

/// Static facts about one weight layer, derived from the spec walk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightInfo {
    pub name: String,
    pub dims: Vec<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
    /// How many output positions each kernel weight participates in per
    /// example: 1 for dense layers, `out_h * out_w` for convolutions.
    pub spatial: usize,
}

/// An architecture: input shape plus an ordered layer list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    /// Input channels, height, width.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// The 784-300-100-10 fully connected classifier with ReLU hidden
    /// activations.
    pub fn lenet300() -> Self {
        ModelSpec {
            name: "lenet300".to_string(),
            input: (1, 28, 28),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 784, outputs: 300 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 300, outputs: 100 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 100, outputs: 10 },
            ],
        }
    }

    /// The Caffe variant of LeNet-5: two conv/pool stages (20 and 50
    /// filters), then 500-unit and 10-unit fully connected layers.
    pub fn lenet5() -> Self {
        ModelSpec {
            name: "lenet5".to_string(),
            input: (1, 28, 28),
            layers: vec![
                LayerSpec::Conv { filters: 20, in_channels: 1, kernel: 5, stride: 1, pad: 0 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Conv { filters: 50, in_channels: 20, kernel: 5, stride: 1, pad: 0 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 800, outputs: 500 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 500, outputs: 10 },
            ],
        }
    }

    /// Look a spec up by its configuration name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "lenet300" => Ok(Self::lenet300()),
            "lenet5" => Ok(Self::lenet5()),
            other => Err(Error::Config {
                reason: format!("unknown model '{other}' (expected lenet300 or lenet5)"),
            }),
        }
    }

    /// Walk the stack, checking adjacent-shape compatibility, and return the
    /// output shape.
    pub fn output_shape(&self) -> Result<Shape> {
        let mut shape = Shape::Chw(self.input.0, self.input.1, self.input.2);
        for (i, layer) in self.layers.iter().enumerate() {
            shape = next_shape(shape, layer)
                .map_err(|reason| Error::Config { reason: format!("layer {i}: {reason}") })?;
        }
        Ok(shape)
    }

    /// Static description of every weight layer in order.
    pub fn weight_info(&self) -> Result<Vec<WeightInfo>> {
        let mut shape = Shape::Chw(self.input.0, self.input.1, self.input.2);
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let next = next_shape(shape, layer)
                .map_err(|reason| Error::Config { reason: format!("layer {i}: {reason}") })?;
            match *layer {
                LayerSpec::Dense { inputs, outputs } => out.push(WeightInfo {
                    name: format!("layer{}", out.len()),
                    dims: vec![inputs, outputs],
                    fan_in: inputs,
                    fan_out: outputs,
                    spatial: 1,
                }),
                LayerSpec::Conv { filters, in_channels, kernel, .. } => {
                    let (oh, ow) = match next {
                        Shape::Chw(_, h, w) => (h, w),
                        Shape::Flat(_) => unreachable!("conv output is spatial"),
                    };
                    out.push(WeightInfo {
                        name: format!("layer{}", out.len()),
                        dims: vec![filters, in_channels, kernel, kernel],
                        fan_in: in_channels * kernel * kernel,
                        fan_out: filters * kernel * kernel,
                        spatial: oh * ow,
                    });
                }
                _ => {}
            }
            shape = next;
        }
        Ok(out)
    }

    /// Total count of sparsifiable weights (biases excluded).
    pub fn weight_count(&self) -> Result<usize> {
        Ok(self.weight_info()?.iter().map(|w| w.dims.iter().product::<usize>()).sum())
    }
}

fn next_shape(shape: Shape, layer: &LayerSpec) -> std::result::Result<Shape, String> {
    match (*layer, shape) {
        (LayerSpec::Dense { inputs, outputs }, Shape::Flat(k)) => {
            if k != inputs {
                return Err(format!("dense layer expects {inputs} inputs, got {k}"));
            }
            Ok(Shape::Flat(outputs))
        }
        (LayerSpec::Dense { .. }, Shape::Chw(..)) => {
            Err("dense layer needs flattened input".to_string())
        }
        (LayerSpec::Conv { filters, in_channels, kernel, stride, pad }, Shape::Chw(c, h, w)) => {
            if c != in_channels {
                return Err(format!("conv layer expects {in_channels} channels, got {c}"));
            }
            if h + 2 * pad < kernel || w + 2 * pad < kernel {
                return Err(format!("{kernel}x{kernel} kernel exceeds padded {h}x{w} input"));
            }
            let oh = (h + 2 * pad - kernel) / stride + 1;
            let ow = (w + 2 * pad - kernel) / stride + 1;
            Ok(Shape::Chw(filters, oh, ow))
        }
        (LayerSpec::Conv { .. }, Shape::Flat(_)) => {
            Err("conv layer needs a spatial input".to_string())
        }
        (LayerSpec::MaxPool { size, stride }, Shape::Chw(c, h, w)) => {
            if h < size || w < size {
                return Err(format!("{size}x{size} pool exceeds {h}x{w} input"));
            }
            Ok(Shape::Chw(c, (h - size) / stride + 1, (w - size) / stride + 1))
        }
        (LayerSpec::MaxPool { .. }, Shape::Flat(_)) => {
            Err("max pool needs a spatial input".to_string())
        }
        (LayerSpec::Flatten, Shape::Chw(c, h, w)) => Ok(Shape::Flat(c * h * w)),
        (LayerSpec::Flatten, Shape::Flat(k)) => Ok(Shape::Flat(k)),
        (LayerSpec::Relu, s) => Ok(s),
    }
}

/// Which sparsification method a run uses, as named in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    None,
    Magnitude,
    Random,
    Vd,
    L0,
}

impl MethodKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(MethodKind::None),
            "magnitude" => Ok(MethodKind::Magnitude),
            "random" => Ok(MethodKind::Random),
            "vd" => Ok(MethodKind::Vd),
            "l0" => Ok(MethodKind::L0),
            other => Err(Error::Config {
                reason: format!(
                    "unknown method '{other}' (expected none, magnitude, random, vd, or l0)"
                ),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::None => "none",
            MethodKind::Magnitude => "magnitude",
            MethodKind::Random => "random",
            MethodKind::Vd => "vd",
            MethodKind::L0 => "l0",
        }
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Build-time configuration of the sparsification method.
#[derive(Debug, Clone)]
pub enum MethodConfig {
    Dense,
    Masked { grad_mode: MaskGradMode },
    Vd { log_sigma2_init: f64 },
    L0 { droprate_init: f64, beta: f64, gamma: f64, zeta: f64 },
}

/// Per-layer sparsification state carried by a built model.
#[derive(Debug, Clone)]
pub enum MethodState<S: Scalar = f32> {
    Dense,
    Masked { mask: SparsityMask, grad_mode: MaskGradMode },
    Vd { log_sigma2: Tensor<S> },
    L0 { gates: HardConcreteParams<S> },
}

/// One weight layer: kernel or matrix, bias, and method state.
#[derive(Debug, Clone)]
pub struct WeightLayer<S: Scalar = f32> {
    pub name: String,
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub method: MethodState<S>,
}

/// Which tensor a training-graph binding refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    LogSigma2,
    LogAlpha,
}

/// A trainable tensor's variable in one training graph.
#[derive(Debug, Clone, Copy)]
pub struct Binding {
    pub layer: usize,
    pub role: ParamRole,
    pub var: Var,
}

/// The training graph for one batch: logits, the summed regularizer (absent
/// for methods without one), and the parameter bindings in optimizer order.
pub struct TrainGraph {
    pub logits: Var,
    pub regularizer: Option<Var>,
    pub bindings: Vec<Binding>,
}

/// Weights-only sparsity summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub global: f64,
    pub per_layer: Vec<f64>,
    pub kept: usize,
    pub total: usize,
}

/// A built model: spec plus one [`WeightLayer`] per dense/conv entry.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar = f32> {
    pub spec: ModelSpec,
    pub layers: Vec<WeightLayer<S>>,
}

impl<S: Scalar> Model<S> {
    /// Initialize a model: Glorot-uniform weights from per-layer substreams
    /// of `rng`, zero biases, and fresh method state.
    pub fn build(spec: ModelSpec, method: &MethodConfig, rng: &RngState) -> Result<Self> {
        let infos = spec.weight_info()?;
        let mut layers = Vec::with_capacity(infos.len());
        for (i, info) in infos.iter().enumerate() {
            let mut stream = rng.stream(i as u64);
            let limit = (6.0 / (info.fan_in + info.fan_out) as f64).sqrt();
            let mut w = Tensor::<S>::zeros(&info.dims);
            w.fill_uniform(&mut stream, -limit, limit);
            let bias_len = match spec_bias_len(&info.dims) {
                Some(n) => n,
                None => {
                    return Err(Error::Config {
                        reason: format!("weight layer {i} has unsupported rank"),
                    })
                }
            };
            let state = match method {
                MethodConfig::Dense => MethodState::Dense,
                MethodConfig::Masked { grad_mode } => MethodState::Masked {
                    mask: SparsityMask::ones(w.numel()),
                    grad_mode: *grad_mode,
                },
                MethodConfig::Vd { log_sigma2_init } => {
                    MethodState::Vd { log_sigma2: Tensor::full(&info.dims, *log_sigma2_init) }
                }
                MethodConfig::L0 { droprate_init, beta, gamma, zeta } => MethodState::L0 {
                    gates: HardConcreteParams::from_dropout_rate(
                        &info.dims,
                        *droprate_init,
                        *beta,
                        *gamma,
                        *zeta,
                    )?,
                },
            };
            layers.push(WeightLayer {
                name: info.name.clone(),
                w,
                b: Tensor::zeros(&[bias_len]),
                method: state,
            });
        }
        Ok(Model { spec, layers })
    }

    /// Total count of sparsifiable weights (biases excluded).
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.numel()).sum()
    }

    /// Per-layer weight counts, for allocation of layer targets.
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.w.numel()).collect()
    }

    /// Build the stochastic training graph for input `x` (`[n, c, h, w]`).
    /// `noise` supplies one RNG stream per weight layer for methods that
    /// sample (variational dropout activations, hard-concrete gates).
    pub fn forward_train(
        &self,
        tape: &mut Tape<S>,
        x: &Tensor<S>,
        noise: &mut [RngState],
    ) -> Result<TrainGraph> {
        if noise.len() != self.layers.len() {
            return Err(Error::Missing {
                what: format!(
                    "noise streams for {} weight layers (got {})",
                    self.layers.len(),
                    noise.len()
                ),
            });
        }
        let mut cur = tape.constant(x.clone());
        let mut bindings = Vec::new();
        let mut reg: Option<Var> = None;
        let mut wi = 0usize;
        for layer in &self.spec.layers {
            match *layer {
                LayerSpec::Flatten => {
                    let dims = tape.value(cur).dims().to_vec();
                    let flat: usize = dims[1..].iter().product();
                    cur = tape.reshape(cur, &[dims[0], flat]);
                }
                LayerSpec::Relu => cur = tape.relu(cur),
                LayerSpec::MaxPool { size, stride } => cur = tape.maxpool2d(cur, size, stride),
                LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => {
                    let conv = match *layer {
                        LayerSpec::Conv { stride, pad, .. } => Some((stride, pad)),
                        _ => None,
                    };
                    cur = self.weight_layer_train(
                        tape,
                        cur,
                        wi,
                        conv,
                        &mut noise[wi],
                        &mut bindings,
                        &mut reg,
                    );
                    wi += 1;
                }
            }
        }
        Ok(TrainGraph { logits: cur, regularizer: reg, bindings })
    }

    fn weight_layer_train(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        wi: usize,
        conv: Option<(usize, usize)>,
        noise: &mut RngState,
        bindings: &mut Vec<Binding>,
        reg: &mut Option<Var>,
    ) -> Var {
        let layer = &self.layers[wi];
        let w = tape.leaf(&layer.w);
        bindings.push(Binding { layer: wi, role: ParamRole::Weight, var: w });
        let pre = match &layer.method {
            MethodState::Dense => apply_linear(tape, x, w, conv),
            MethodState::Masked { mask, grad_mode } => {
                let dense: Vec<S> = mask.to_dense();
                let wm = tape.mask_mul(w, &dense, *grad_mode);
                apply_linear(tape, x, wm, conv)
            }
            MethodState::Vd { log_sigma2 } => {
                let ls = tape.leaf(log_sigma2);
                bindings.push(Binding { layer: wi, role: ParamRole::LogSigma2, var: ls });
                let kl = vd_kl(tape, w, ls);
                accumulate(tape, reg, kl);
                match conv {
                    Some((stride, pad)) => {
                        vd_conv_forward_train(tape, x, w, ls, stride, pad, noise)
                    }
                    None => vd_dense_forward_train(tape, x, w, ls, noise),
                }
            }
            MethodState::L0 { gates } => {
                let la = tape.leaf(&gates.log_alpha);
                bindings.push(Binding { layer: wi, role: ParamRole::LogAlpha, var: la });
                let l0 = hc_expected_l0(tape, la, gates.beta, gates.gamma, gates.zeta);
                accumulate(tape, reg, l0);
                let u = draw_gate_noise::<S>(gates.log_alpha.dims(), noise);
                let z = hc_sample(tape, la, gates.beta, gates.gamma, gates.zeta, &u);
                let gated = tape.mul(w, z);
                apply_linear(tape, x, gated, conv)
            }
        };
        let b = tape.leaf(&layer.b);
        bindings.push(Binding { layer: wi, role: ParamRole::Bias, var: b });
        match conv {
            Some(_) => tape.add_chan_bias(pre, b),
            None => tape.add_row_bias(pre, b),
        }
    }

    /// Build the deterministic evaluation graph over effective weights.
    /// `vd_threshold` is the log-dropout-ratio cutoff used to binarize
    /// variational-dropout layers.
    pub fn forward_eval(&self, tape: &mut Tape<S>, x: &Tensor<S>, vd_threshold: f64) -> Var {
        let mut cur = tape.constant(x.clone());
        let mut wi = 0usize;
        for layer in &self.spec.layers {
            match *layer {
                LayerSpec::Flatten => {
                    let dims = tape.value(cur).dims().to_vec();
                    let flat: usize = dims[1..].iter().product();
                    cur = tape.reshape(cur, &[dims[0], flat]);
                }
                LayerSpec::Relu => cur = tape.relu(cur),
                LayerSpec::MaxPool { size, stride } => cur = tape.maxpool2d(cur, size, stride),
                LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => {
                    let conv = match *layer {
                        LayerSpec::Conv { stride, pad, .. } => Some((stride, pad)),
                        _ => None,
                    };
                    let w = tape.constant(self.effective_eval_weights(wi, vd_threshold));
                    let pre = apply_linear(tape, cur, w, conv);
                    let b = tape.constant(self.layers[wi].b.clone());
                    cur = match conv {
                        Some(_) => tape.add_chan_bias(pre, b),
                        None => tape.add_row_bias(pre, b),
                    };
                    wi += 1;
                }
            }
        }
        cur
    }

    /// The weights the evaluation graph uses for one layer: stored weights
    /// with the method's deterministic gating applied.
    pub fn effective_eval_weights(&self, wi: usize, vd_threshold: f64) -> Tensor<S> {
        let layer = &self.layers[wi];
        match &layer.method {
            MethodState::Dense => layer.w.clone(),
            MethodState::Masked { mask, .. } => {
                let mut w = layer.w.clone();
                mask.apply_to(w.data_mut());
                w
            }
            MethodState::Vd { log_sigma2 } => {
                let mask = vd_prune(&layer.w, log_sigma2, vd_threshold);
                let mut w = layer.w.clone();
                mask.apply_to(w.data_mut());
                w
            }
            MethodState::L0 { gates } => {
                let z = gates.test_gates();
                let mut w = layer.w.clone();
                for (wv, zv) in w.data_mut().iter_mut().zip(z.data()) {
                    *wv *= *zv;
                }
                w
            }
        }
    }

    /// The evaluation-time keep mask for one layer, or `None` for a dense
    /// layer (nothing is ever removed).
    pub fn eval_keep_mask(&self, wi: usize, vd_threshold: f64) -> Option<SparsityMask> {
        let layer = &self.layers[wi];
        match &layer.method {
            MethodState::Dense => None,
            MethodState::Masked { mask, .. } => Some(mask.clone()),
            MethodState::Vd { log_sigma2 } => Some(vd_prune(&layer.w, log_sigma2, vd_threshold)),
            MethodState::L0 { gates } => Some(gates.test_mask()),
        }
    }

    /// Weights-only sparsity of the evaluation-time model.
    pub fn eval_sparsity(&self, vd_threshold: f64) -> SparsityReport {
        let mut kept = 0usize;
        let mut total = 0usize;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for wi in 0..self.layers.len() {
            let n = self.layers[wi].w.numel();
            let k = match self.eval_keep_mask(wi, vd_threshold) {
                Some(mask) => mask.count_kept(),
                None => n,
            };
            per_layer.push(1.0 - k as f64 / n as f64);
            kept += k;
            total += n;
        }
        SparsityReport { global: 1.0 - kept as f64 / total as f64, per_layer, kept, total }
    }

    /// Expected training-time sparsity: the mean probability that a weight's
    /// multiplier is exactly zero during a training step. For gate methods
    /// this can differ from the evaluation-time figure; for mask methods the
    /// two coincide.
    pub fn train_sparsity(&self, vd_threshold: f64) -> f64 {
        let mut zeros = 0.0f64;
        let mut total = 0usize;
        for wi in 0..self.layers.len() {
            let layer = &self.layers[wi];
            let n = layer.w.numel();
            total += n;
            zeros += match &layer.method {
                MethodState::Dense => 0.0,
                MethodState::Masked { mask, .. } => mask.count_pruned() as f64,
                MethodState::Vd { log_sigma2 } => {
                    vd_prune(&layer.w, log_sigma2, vd_threshold).count_pruned() as f64
                }
                MethodState::L0 { gates } => gates
                    .log_alpha
                    .data()
                    .iter()
                    .map(|&la| gates.prob_zero(la.as_f64()))
                    .sum::<f64>(),
            };
        }
        zeros / total as f64
    }

    /// Trainable tensors in the fixed optimizer order (weight, method extras,
    /// bias, per layer). Must match the binding order from `forward_train`.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.w);
            match &mut layer.method {
                MethodState::Vd { log_sigma2 } => out.push(log_sigma2),
                MethodState::L0 { gates } => out.push(&mut gates.log_alpha),
                _ => {}
            }
            out.push(&mut layer.b);
        }
        out
    }

    /// Copy gradients from a backpropagated tape into the model tensors'
    /// gradient slots, following the graph's bindings.
    pub fn absorb_grads(&mut self, tape: &Tape<S>, graph: &TrainGraph) {
        for binding in &graph.bindings {
            let layer = &mut self.layers[binding.layer];
            let target = match binding.role {
                ParamRole::Weight => &mut layer.w,
                ParamRole::Bias => &mut layer.b,
                ParamRole::LogSigma2 => match &mut layer.method {
                    MethodState::Vd { log_sigma2 } => log_sigma2,
                    _ => unreachable!("log-sigma2 binding on a non-vd layer"),
                },
                ParamRole::LogAlpha => match &mut layer.method {
                    MethodState::L0 { gates } => &mut gates.log_alpha,
                    _ => unreachable!("log-alpha binding on a non-gated layer"),
                },
            };
            let grad = match tape.grad(binding.var) {
                Some(g) => g.to_vec(),
                None => vec![S::zero(); target.numel()],
            };
            target.set_grad(grad);
        }
    }
}

fn spec_bias_len(dims: &[usize]) -> Option<usize> {
    match dims.len() {
        2 => Some(dims[1]),
        4 => Some(dims[0]),
        _ => None,
    }
}

fn accumulate<S: Scalar>(tape: &mut Tape<S>, acc: &mut Option<Var>, term: Var) {
    *acc = Some(match *acc {
        Some(prev) => tape.add(prev, term),
        None => term,
    });
}

fn apply_linear<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    w: Var,
    conv: Option<(usize, usize)>,
) -> Var {
    match conv {
        Some((stride, pad)) => tape.conv2d(x, w, stride, pad),
        None => tape.matmul(x, w),
    }
}

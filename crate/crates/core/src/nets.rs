//! Model assembly and the full forward/backward pass.
//!
//! A [`Model`] owns everything fixed: the encoder gates (FlyNet) and one
//! random basis per modulated layer. Everything learned lives in a
//! [`TaskContext`] passed alongside, so the same model serves every task.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, shape_err, usage_err, Result};
use crate::flyenc::{encode_batch, EncoderConfig, GateRecipe, GateTable};
use crate::neuromod::{
    conv_backward, conv_forward_batch, linear_backward, linear_forward_batch, BasisShape,
    ConvGeometry, ContextStore, GradRequest, LayerCache, RandomBasis, TaskContext,
};
use crate::optim::OptimizerState;
use crate::scalar::Scalar;

pub const DEFAULT_GATE_FAN_IN: usize = 7;

fn default_n_in() -> usize {
    DEFAULT_GATE_FAN_IN
}

fn default_gamma() -> f64 {
    1.0
}

/// Network family and its size knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Sparse random encoder with `expansion × d_in` hidden nodes and one
    /// modulated readout.
    Flynet {
        expansion: usize,
        #[serde(default = "default_n_in")]
        n_in: usize,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    /// Fully connected stack; every layer, the output layer included, is
    /// modulated.
    Mlp { hidden: Vec<usize> },
    /// Two modulated 3×3 convolutions (16·width and 32·width channels),
    /// each followed by ReLU and 2×2 average pooling, then a modulated
    /// dense readout.
    Cnn { width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// Input as `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub d_out: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn flynet(expansion: usize, input_shape: [usize; 3], d_out: usize, seed: u64) -> Self {
        Self {
            arch: Architecture::Flynet {
                expansion,
                n_in: DEFAULT_GATE_FAN_IN,
                gamma: 1.0,
            },
            input_shape,
            d_out,
            seed,
        }
    }

    pub fn mlp(hidden: Vec<usize>, input_shape: [usize; 3], d_out: usize, seed: u64) -> Self {
        Self {
            arch: Architecture::Mlp { hidden },
            input_shape,
            d_out,
            seed,
        }
    }

    pub fn cnn(width: usize, input_shape: [usize; 3], d_out: usize, seed: u64) -> Self {
        Self {
            arch: Architecture::Cnn { width },
            input_shape,
            d_out,
            seed,
        }
    }

    pub fn d_in(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Stable hash of the architecture, seed and precision.
    pub fn fingerprint<T: Scalar>(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"crwn/model/");
        h.update(serde_json::to_vec(self).expect("model spec serializes"));
        h.update([T::PRECISION.tag()]);
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    fn validate(&self) -> Result<()> {
        if self.d_in() == 0 || self.d_out == 0 {
            return Err(config_err("model input and output sizes must be positive"));
        }
        match &self.arch {
            Architecture::Flynet { expansion, gamma, .. } => {
                if *expansion == 0 {
                    return Err(config_err("flynet expansion must be at least 1"));
                }
                if !(*gamma >= 0.0) {
                    return Err(config_err("flynet gamma must be non-negative"));
                }
            }
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(config_err("hidden sizes must be at least 1"));
                }
            }
            Architecture::Cnn { width } => {
                if *width == 0 {
                    return Err(config_err("cnn width multiplier must be at least 1"));
                }
            }
        }
        Ok(())
    }
}

/// Whether gradients flow into `alpha` and, on the first task only, into
/// the shared bases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "both")]
    LocalGlobal,
    #[serde(rename = "local")]
    LocalOnly,
    #[serde(rename = "pretrained")]
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Stage {
    Encode,
    Modulated(usize),
    Relu,
    AvgPool { channels: usize, h: usize, w: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum LayerOp {
    Dense,
    Conv(ConvGeometry),
}

#[derive(Debug, Clone)]
struct ModulatedLayer<T> {
    basis: RandomBasis<T>,
    op: LayerOp,
}

/// Fixed structure of a network: gates and random bases.
#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: ModelSpec,
    fingerprint: u64,
    encoder: Option<(GateTable, EncoderConfig)>,
    stages: Vec<Stage>,
    layers: Vec<ModulatedLayer<T>>,
}

enum StageCache<T> {
    None,
    Modulated(LayerCache<T>),
    Relu(Array2<T>),
}

/// Per-stage workspace of one forward pass.
pub struct ForwardTrace<T> {
    caches: Vec<StageCache<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Caches of the modulated layers, in layer order.
    pub fn layer_caches(&self) -> impl Iterator<Item = &LayerCache<T>> {
        self.caches.iter().filter_map(|c| match c {
            StageCache::Modulated(lc) => Some(lc),
            _ => None,
        })
    }
}

/// Loss gradients for one task's learnable state.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextGrads<T> {
    pub vs: Vec<Array1<T>>,
    pub alpha: T,
    pub bases: Option<Vec<Array2<T>>>,
}

impl<T: Scalar> Model<T> {
    pub fn build(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let d_in = spec.d_in();
        let seed = spec.seed;
        let mut stages = Vec::new();
        let mut shapes: Vec<(BasisShape, LayerOp)> = Vec::new();
        let mut encoder = None;
        match &spec.arch {
            Architecture::Flynet {
                expansion,
                n_in,
                gamma,
            } => {
                let d_hidden = d_in * expansion;
                let gates = GateTable::generate(GateRecipe {
                    seed,
                    d_in,
                    d_hidden,
                    n_in: *n_in,
                })?;
                let mut cfg = EncoderConfig::new(*n_in, d_hidden);
                cfg.gamma = *gamma;
                encoder = Some((gates, cfg));
                stages.push(Stage::Encode);
                shapes.push((
                    BasisShape::Linear {
                        d_out: spec.d_out,
                        d_in: d_hidden,
                    },
                    LayerOp::Dense,
                ));
            }
            Architecture::Mlp { hidden } => {
                let mut fan_in = d_in;
                for &h in hidden {
                    shapes.push((BasisShape::Linear { d_out: h, d_in: fan_in }, LayerOp::Dense));
                    fan_in = h;
                }
                shapes.push((
                    BasisShape::Linear {
                        d_out: spec.d_out,
                        d_in: fan_in,
                    },
                    LayerOp::Dense,
                ));
            }
            Architecture::Cnn { width } => {
                let [c, h, w] = spec.input_shape;
                let g1 = ConvGeometry::new(c, h, w, 16 * width, 3, 3, 1, 1)?;
                let (h1, w1) = (g1.out_h() / 2, g1.out_w() / 2);
                let g2 = ConvGeometry::new(16 * width, h1, w1, 32 * width, 3, 3, 1, 1)?;
                let (h2, w2) = (g2.out_h() / 2, g2.out_w() / 2);
                if h2 == 0 || w2 == 0 {
                    return Err(config_err("input too small for two pooling stages"));
                }
                shapes.push((g1.basis_shape(), LayerOp::Conv(g1)));
                shapes.push((g2.basis_shape(), LayerOp::Conv(g2)));
                shapes.push((
                    BasisShape::Linear {
                        d_out: spec.d_out,
                        d_in: 32 * width * h2 * w2,
                    },
                    LayerOp::Dense,
                ));
            }
        }
        let n_layers = shapes.len();
        let mut layers = Vec::with_capacity(n_layers);
        for (l, (shape, op)) in shapes.into_iter().enumerate() {
            let basis = RandomBasis::generate(shape, seed, l as u32)?;
            layers.push(ModulatedLayer { basis, op });
            if !matches!(spec.arch, Architecture::Flynet { .. }) || l == 0 {
                stages.push(Stage::Modulated(l));
            }
            if l + 1 < n_layers {
                stages.push(Stage::Relu);
                if let LayerOp::Conv(g) = op {
                    stages.push(Stage::AvgPool {
                        channels: g.out_channels,
                        h: g.out_h(),
                        w: g.out_w(),
                    });
                }
            }
        }
        let fingerprint = spec.fingerprint::<T>();
        Ok(Self {
            spec,
            fingerprint,
            encoder,
            stages,
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn gates(&self) -> Option<&GateTable> {
        self.encoder.as_ref().map(|(g, _)| g)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn basis(&self, layer: usize) -> &RandomBasis<T> {
        &self.layers[layer].basis
    }

    /// Context length for each modulated layer.
    pub fn layer_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.basis.shape().fan_in()).collect()
    }

    /// Learnable parameters per task.
    pub fn params_per_task(&self) -> usize {
        1 + self.layer_dims().iter().sum::<usize>()
    }

    /// Entries of all shared bases (what pretrained mode additionally learns).
    pub fn basis_params(&self) -> usize {
        self.layers.iter().map(|l| l.basis.shape().len()).sum()
    }

    pub fn new_context(&self, task_id: u32, alpha0: f64, v0: f64) -> Result<TaskContext<T>> {
        crate::neuromod::context_init(task_id, &self.layer_dims(), alpha0, v0)
    }

    pub fn new_store(&self) -> ContextStore<T> {
        ContextStore::new(
            self.fingerprint,
            self.spec.seed,
            serde_json::to_string(&self.spec).expect("model spec serializes"),
            self.layer_dims(),
        )
    }

    /// Current basis values, for persisting pretrained weights.
    pub fn basis_values(&self) -> Vec<Array2<T>> {
        self.layers.iter().map(|l| l.basis.values().clone()).collect()
    }

    /// Replaces the seed-derived bases with trained weights.
    pub fn load_bases(&mut self, bases: &[Array2<T>]) -> Result<()> {
        if bases.len() != self.layers.len() {
            return Err(shape_err(format!(
                "{} bases supplied for {} layers",
                bases.len(),
                self.layers.len()
            )));
        }
        for (layer, values) in self.layers.iter_mut().zip(bases) {
            layer.basis = RandomBasis::from_values(layer.basis.shape(), values.clone())?;
        }
        Ok(())
    }

    fn check_context(&self, ctx: &TaskContext<T>) -> Result<()> {
        if ctx.vs.len() != self.layers.len()
            || ctx.vs.iter().zip(&self.layers).any(|(v, l)| v.len() != l.basis.shape().fan_in())
        {
            return Err(shape_err(format!(
                "context layer sizes {:?} do not fit model {:?}",
                ctx.layer_dims(),
                self.layer_dims()
            )));
        }
        Ok(())
    }

    /// Logits for a `batch × d_in` input plus the trace for backward.
    pub fn forward(
        &self,
        x: ArrayView2<'_, T>,
        ctx: &TaskContext<T>,
    ) -> Result<(Array2<T>, ForwardTrace<T>)> {
        self.check_context(ctx)?;
        if x.ncols() != self.spec.d_in() {
            return Err(shape_err(format!(
                "model expects {} inputs, got {}",
                self.spec.d_in(),
                x.ncols()
            )));
        }
        let mut act = x.to_owned();
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            match *stage {
                Stage::Encode => {
                    let (gates, cfg) = self.encoder.as_ref().expect("flynet has an encoder");
                    act = encode_batch(act.view(), gates, cfg)?;
                    caches.push(StageCache::None);
                }
                Stage::Modulated(l) => {
                    let layer = &self.layers[l];
                    let v = ctx.vs[l].view();
                    let (y, cache) = match layer.op {
                        LayerOp::Dense => linear_forward_batch(&layer.basis, v, ctx.alpha, act.view())?,
                        LayerOp::Conv(g) => {
                            conv_forward_batch(&layer.basis, &g, v, ctx.alpha, act.view())?
                        }
                    };
                    act = y;
                    caches.push(StageCache::Modulated(cache));
                }
                Stage::Relu => {
                    act.mapv_inplace(|a| a.max(T::zero()));
                    caches.push(StageCache::Relu(act.clone()));
                }
                Stage::AvgPool { channels, h, w } => {
                    act = avg_pool(act.view(), channels, h, w);
                    caches.push(StageCache::None);
                }
            }
        }
        Ok((act, ForwardTrace { caches }))
    }

    /// Forward pass without keeping a trace.
    pub fn logits(&self, x: ArrayView2<'_, T>, ctx: &TaskContext<T>) -> Result<Array2<T>> {
        self.forward(x, ctx).map(|(y, _)| y)
    }

    /// Gradients given `delta = ∂L/∂logits`.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        delta: ArrayView2<'_, T>,
        want_bases: bool,
    ) -> Result<ContextGrads<T>> {
        if trace.caches.len() != self.stages.len() {
            return Err(usage_err("trace was not produced by this model"));
        }
        let n = self.layers.len();
        let mut g_vs: Vec<Option<Array1<T>>> = vec![None; n];
        let mut g_bases: Vec<Option<Array2<T>>> = vec![None; n];
        let mut g_alpha = T::zero();
        let mut grad = delta.to_owned();
        let first_layer_stage = self
            .stages
            .iter()
            .position(|s| matches!(s, Stage::Modulated(_)))
            .expect("every model has a modulated layer");
        for (idx, stage) in self.stages.iter().enumerate().rev() {
            match (*stage, &trace.caches[idx]) {
                (Stage::Modulated(l), StageCache::Modulated(cache)) => {
                    let layer = &self.layers[l];
                    let want = GradRequest {
                        input: idx > first_layer_stage,
                        basis: want_bases,
                    };
                    let g = match layer.op {
                        LayerOp::Dense => linear_backward(&layer.basis, grad.view(), cache, want)?,
                        LayerOp::Conv(_) => conv_backward(&layer.basis, grad.view(), cache, want)?,
                    };
                    g_alpha += g.alpha;
                    g_vs[l] = Some(g.v);
                    g_bases[l] = g.basis;
                    match g.input {
                        Some(gi) => grad = gi,
                        None => break,
                    }
                }
                (Stage::Relu, StageCache::Relu(out)) => {
                    Zip::from(&mut grad).and(out).for_each(|g, &o| {
                        if o <= T::zero() {
                            *g = T::zero();
                        }
                    });
                }
                (Stage::AvgPool { channels, h, w }, StageCache::None) => {
                    grad = avg_pool_backward(grad.view(), channels, h, w);
                }
                (Stage::Encode, StageCache::None) => break,
                _ => return Err(usage_err("trace does not match model stages")),
            }
        }
        let vs = g_vs
            .into_iter()
            .map(|g| g.ok_or_else(|| usage_err("backward did not reach every layer")))
            .collect::<Result<Vec<_>>>()?;
        let bases = if want_bases {
            Some(
                g_bases
                    .into_iter()
                    .map(|g| g.ok_or_else(|| usage_err("missing basis gradient")))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(ContextGrads {
            vs,
            alpha: g_alpha,
            bases,
        })
    }
}

fn avg_pool<T: Scalar>(x: ArrayView2<'_, T>, channels: usize, h: usize, w: usize) -> Array2<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = Array2::zeros((x.nrows(), channels * oh * ow));
    for (xb, mut ob) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        for c in 0..channels {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = c * h * w + 2 * y * w + 2 * xx;
                    let s = xb[base] + xb[base + 1] + xb[base + w] + xb[base + w + 1];
                    ob[c * oh * ow + y * ow + xx] = s * quarter;
                }
            }
        }
    }
    out
}

fn avg_pool_backward<T: Scalar>(
    g: ArrayView2<'_, T>,
    channels: usize,
    h: usize,
    w: usize,
) -> Array2<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = Array2::zeros((g.nrows(), channels * h * w));
    for (gb, mut ob) in g.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        for c in 0..channels {
            for y in 0..oh {
                for xx in 0..ow {
                    let share = gb[c * oh * ow + y * ow + xx] * quarter;
                    let base = c * h * w + 2 * y * w + 2 * xx;
                    ob[base] = share;
                    ob[base + 1] = share;
                    ob[base + w] = share;
                    ob[base + w + 1] = share;
                }
            }
        }
    }
    out
}

/// Weights plus biases of an ordinary dense network with the given layer
/// widths; the usual per-task cost of a separately trained model.
pub fn dense_mlp_params(d_in: usize, hidden: &[usize], d_out: usize) -> usize {
    let mut widths = vec![d_in];
    widths.extend_from_slice(hidden);
    widths.push(d_out);
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Softmax cross-entropy of one logit vector and its gradient
/// `softmax(logits) − onehot(label)`.
pub fn cross_entropy_with_grad<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(usage_err(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let loss = total.ln() + max - logits[label];
    let mut delta: Vec<T> = exps.iter().map(|&e| e / total).collect();
    delta[label] -= T::one();
    Ok((loss, delta))
}

/// Mean cross-entropy over a batch and `∂(mean loss)/∂logits`.
pub fn cross_entropy_batch<T: Scalar>(
    logits: ArrayView2<'_, T>,
    labels: &[usize],
) -> Result<(T, Array2<T>)> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(usage_err(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let scale = T::one() / T::of(labels.len() as f64);
    let mut delta = Array2::zeros(logits.dim());
    let mut total = T::zero();
    let mut row_buf = Vec::with_capacity(logits.ncols());
    for ((row, mut drow), &label) in logits
        .axis_iter(Axis(0))
        .zip(delta.axis_iter_mut(Axis(0)))
        .zip(labels)
    {
        row_buf.clear();
        row_buf.extend(row.iter().copied());
        let (loss, d) = cross_entropy_with_grad(&row_buf, label)?;
        total += loss;
        for (slot, g) in drow.iter_mut().zip(d) {
            *slot = g * scale;
        }
    }
    Ok((total * scale, delta))
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn predict<T: Scalar>(logits: ArrayView2<'_, T>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// One optimizer step on a batch; returns the mean loss.
///
/// `task_position` is the index of the current task in the training
/// sequence. Pretrained mode updates the shared bases as well and is only
/// valid on the first task.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    ctx: &mut TaskContext<T>,
    opt: &mut OptimizerState<T>,
    x: ArrayView2<'_, T>,
    labels: &[usize],
    mode: TrainMode,
    task_position: usize,
    lr: f64,
) -> Result<T> {
    if mode == TrainMode::Pretrained && task_position > 0 {
        return Err(usage_err(
            "pretrained mode trains the shared bases on the first task only",
        ));
    }
    let (logits, trace) = model.forward(x, ctx)?;
    let (loss, delta) = cross_entropy_batch(logits.view(), labels)?;
    let train_bases = mode == TrainMode::Pretrained;
    let grads = model.backward(&trace, delta.view(), train_bases)?;
    drop(trace);

    let mut alpha = [ctx.alpha];
    let alpha_grad = [grads.alpha];
    let mut params: Vec<&mut [T]> = ctx
        .vs
        .iter_mut()
        .map(|v| v.as_slice_mut().expect("contexts are contiguous"))
        .collect();
    let mut grad_refs: Vec<&[T]> = grads
        .vs
        .iter()
        .map(|g| g.as_slice().expect("gradients are contiguous"))
        .collect();
    if mode != TrainMode::LocalOnly {
        params.push(&mut alpha);
        grad_refs.push(&alpha_grad);
    }
    if let Some(basis_grads) = &grads.bases {
        for (layer, g) in model.layers.iter_mut().zip(basis_grads) {
            layer.basis.mark_trained();
            params.push(layer.basis.values_mut_slice());
            grad_refs.push(g.as_slice().expect("gradients are contiguous"));
        }
    }
    opt.step(&mut params, &grad_refs, lr)?;
    drop(params);
    ctx.alpha = alpha[0];
    Ok(loss)
}

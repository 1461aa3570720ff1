//! Frozen backbone with per-task gated proxy branches and classifier heads.
//!
//! Layer `l` of task `t` computes
//!
//! ```text
//! x_l = σ(a_ll)·G_l(x_{l-1}) + Σ_{l'=max(l-k,1)}^{l-1} σ(a_l'l)·P_t^(l',l) x_l'
//! ```
//!
//! where `G_l(x) = act(W_l x + b_l)` is frozen, the proxies `P` are linear and
//! the gates are the logistic function of a free logit, keeping each gate in
//! `(0, 1)`. Only the adapter (proxies, gate logits, head) is trainable.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, gaussian_fill, Layout, Matrix, ParamVector, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, z: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input_dim: usize,
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub skip_window: usize,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        let depth = self.layer_dims.len();
        if depth < 2 {
            return Err(Error::config(format!(
                "backbone needs at least 2 layers, got {depth}"
            )));
        }
        if self.input_dim == 0 || self.layer_dims.contains(&0) {
            return Err(Error::config("backbone dimensions must be at least 1"));
        }
        if self.skip_window < 1 || self.skip_window > depth - 1 {
            return Err(Error::config(format!(
                "skip window must lie in [1, {}], got {}",
                depth - 1,
                self.skip_window
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layer_dims.len()
    }

    /// Width of layer `l`, with layer 0 the input.
    pub fn width(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.layer_dims[l - 1]
        }
    }

    /// Proxy branch keys `(l', l)` with `max(l-k, 1) ≤ l' ≤ l-1`, sorted.
    pub fn proxy_keys(&self) -> Vec<(usize, usize)> {
        let mut keys = Vec::new();
        for l in 1..=self.depth() {
            let lo = l.saturating_sub(self.skip_window).max(1);
            for lp in lo..l {
                keys.push((lp, l));
            }
        }
        keys.sort_unstable();
        keys
    }

    /// Gate keys: every proxy key plus the diagonal `(l, l)`, sorted.
    pub fn gate_keys(&self) -> Vec<(usize, usize)> {
        let mut keys = self.proxy_keys();
        keys.extend((1..=self.depth()).map(|l| (l, l)));
        keys.sort_unstable();
        keys
    }
}

/// One frozen backbone layer: `weight` is `d_l × d_{l-1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    layers: Vec<DenseLayer>,
}

impl Backbone {
    pub fn new(spec: BackboneSpec, layers: Vec<DenseLayer>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.depth() {
            return Err(Error::Input(format!(
                "spec has {} layers, got {}",
                spec.depth(),
                layers.len()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            let (out, inp) = (spec.width(i + 1), spec.width(i));
            if layer.weight.rows() != out || layer.weight.cols() != inp || layer.bias.len() != out
            {
                return Err(Error::Input(format!("layer {} has the wrong shape", i + 1)));
            }
        }
        Ok(Backbone { spec, layers })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Layers `G_1..G_L` (index 0 is `G_1`).
    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ProxySlot {
    from: usize,
    to: usize,
    offset: usize,
    /// Index of this branch's gate in the gate segment.
    gate: usize,
}

/// Structure shared by every adapter built from the same spec and class count.
#[derive(Debug, PartialEq)]
pub struct AdapterShape {
    widths: Vec<usize>,
    classes: usize,
    proxies: Vec<ProxySlot>,
    gate_keys: Vec<(usize, usize)>,
    /// Gate index of the diagonal gate of layer `l` at position `l - 1`.
    diag_gates: Vec<usize>,
    gate_offset: usize,
    head_offset: usize,
    head_bias_offset: usize,
    layout: Arc<Layout>,
}

impl AdapterShape {
    pub fn new(spec: &BackboneSpec, classes: usize) -> Result<Self> {
        spec.validate()?;
        if classes == 0 {
            return Err(Error::config("a task needs at least one class"));
        }
        let depth = spec.depth();
        let widths: Vec<usize> = (0..=depth).map(|l| spec.width(l)).collect();
        let gate_keys = spec.gate_keys();
        let gate_index = |key: (usize, usize)| gate_keys.binary_search(&key).unwrap();

        let mut parts: Vec<(String, usize)> = Vec::new();
        let mut proxies = Vec::new();
        let mut offset = 0;
        for (from, to) in spec.proxy_keys() {
            let len = widths[to] * widths[from];
            proxies.push(ProxySlot {
                from,
                to,
                offset,
                gate: gate_index((from, to)),
            });
            parts.push((format!("proxy.{from}.{to}"), len));
            offset += len;
        }
        let gate_offset = offset;
        parts.push(("gates".into(), gate_keys.len()));
        offset += gate_keys.len();
        let head_offset = offset;
        parts.push(("head.weight".into(), classes * widths[depth]));
        offset += classes * widths[depth];
        let head_bias_offset = offset;
        parts.push(("head.bias".into(), classes));

        let diag_gates = (1..=depth).map(|l| gate_index((l, l))).collect();
        Ok(AdapterShape {
            widths,
            classes,
            proxies,
            gate_keys,
            diag_gates,
            gate_offset,
            head_offset,
            head_bias_offset,
            layout: Arc::new(Layout::new(parts)),
        })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn proxy_keys(&self) -> Vec<(usize, usize)> {
        self.proxies.iter().map(|p| (p.from, p.to)).collect()
    }

    pub fn gate_keys(&self) -> &[(usize, usize)] {
        &self.gate_keys
    }

    fn head_len(&self) -> usize {
        self.classes * self.widths[self.depth()]
    }
}

/// Trainable per-task parameters: proxy branches, gate logits and the head.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskAdapter {
    task_id: usize,
    shape: Arc<AdapterShape>,
    params: ParamVector,
}

impl TaskAdapter {
    pub fn zeros(task_id: usize, shape: Arc<AdapterShape>) -> Self {
        let params = ParamVector::zeros(Arc::clone(&shape.layout));
        TaskAdapter {
            task_id,
            shape,
            params,
        }
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn shape(&self) -> &Arc<AdapterShape> {
        &self.shape
    }

    pub fn classes(&self) -> usize {
        self.shape.classes
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn flatten(&self) -> ParamVector {
        self.params.clone()
    }

    /// Rebuild an adapter of the same shape from a flat vector.
    pub fn unflatten(&self, v: ParamVector) -> Result<TaskAdapter> {
        self.params.check_layout(&v)?;
        Ok(TaskAdapter {
            task_id: self.task_id,
            shape: Arc::clone(&self.shape),
            params: v,
        })
    }

    pub fn set_params(&mut self, v: ParamVector) -> Result<()> {
        self.params.check_layout(&v)?;
        self.params = v;
        Ok(())
    }

    /// Proxy matrix `P^(l', l)` as a row-major `d_l × d_l'` slice.
    pub fn proxy(&self, from: usize, to: usize) -> Option<&[f64]> {
        self.proxy_slot(from, to)
            .map(|p| &self.params.as_slice()[p.offset..p.offset + self.proxy_len(p)])
    }

    pub fn proxy_mut(&mut self, from: usize, to: usize) -> Option<&mut [f64]> {
        let p = self.proxy_slot(from, to)?;
        let len = self.proxy_len(p);
        Some(&mut self.params.as_mut_slice()[p.offset..p.offset + len])
    }

    fn proxy_slot(&self, from: usize, to: usize) -> Option<ProxySlot> {
        self.shape
            .proxies
            .iter()
            .copied()
            .find(|p| p.from == from && p.to == to)
    }

    fn proxy_len(&self, p: ProxySlot) -> usize {
        self.shape.widths[p.to] * self.shape.widths[p.from]
    }

    pub fn gate_logit(&self, from: usize, to: usize) -> Option<f64> {
        let i = self.shape.gate_keys.binary_search(&(from, to)).ok()?;
        Some(self.gates()[i])
    }

    pub fn set_gate_logit(&mut self, from: usize, to: usize, value: f64) -> bool {
        match self.shape.gate_keys.binary_search(&(from, to)) {
            Ok(i) => {
                let off = self.shape.gate_offset + i;
                self.params.as_mut_slice()[off] = value;
                true
            }
            Err(_) => false,
        }
    }

    fn gates(&self) -> &[f64] {
        let off = self.shape.gate_offset;
        &self.params.as_slice()[off..off + self.shape.gate_keys.len()]
    }

    /// Head weight, row-major `classes × d_L`.
    pub fn head_weight(&self) -> &[f64] {
        let off = self.shape.head_offset;
        &self.params.as_slice()[off..off + self.shape.head_len()]
    }

    pub fn head_bias(&self) -> &[f64] {
        let off = self.shape.head_bias_offset;
        &self.params.as_slice()[off..off + self.shape.classes]
    }

    /// Head weight followed by head bias.
    pub fn head_params(&self) -> &[f64] {
        let off = self.shape.head_offset;
        &self.params.as_slice()[off..off + self.shape.head_len() + self.shape.classes]
    }

    pub fn head_mut(&mut self) -> &mut [f64] {
        let off = self.shape.head_offset;
        let len = self.shape.head_len() + self.shape.classes;
        &mut self.params.as_mut_slice()[off..off + len]
    }
}

/// Backbone plus one adapter per task.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    backbone: Arc<Backbone>,
    adapters: Vec<TaskAdapter>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Activations cached by [`GlobalModel::forward`] for backprop.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `x_0..x_L`.
    pub activations: Vec<Vec<f64>>,
    /// Pre-activations `W_l x_{l-1} + b_l` for `l = 1..L`.
    pub pre: Vec<Vec<f64>>,
    /// Backbone outputs `G_l(x_{l-1})` for `l = 1..L`.
    pub backbone_out: Vec<Vec<f64>>,
    /// `P^(l',l) x_l'` per proxy branch, in proxy key order.
    pub proxy_out: Vec<Vec<f64>>,
}

/// `out += M v` for row-major `M` of shape `rows × v.len()`.
fn matvec_add(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += dot(row, v);
    }
}

/// `out += Mᵀ v` for row-major `M` of shape `v.len() × out.len()`.
fn matvec_t_add(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (&vi, row) in v.iter().zip(m.chunks_exact(cols)) {
        if vi != 0.0 {
            for (o, w) in out.iter_mut().zip(row) {
                *o += vi * w;
            }
        }
    }
}

/// `G += s · u vᵀ` for row-major `G` of shape `u.len() × v.len()`.
fn outer_add(g: &mut [f64], u: &[f64], v: &[f64], s: f64) {
    let cols = v.len();
    for (&ui, row) in u.iter().zip(g.chunks_exact_mut(cols)) {
        let c = s * ui;
        if c != 0.0 {
            for (gij, vj) in row.iter_mut().zip(v) {
                *gij += c * vj;
            }
        }
    }
}

/// Forward pass of one sample through backbone + adapter.
pub fn adapter_forward(backbone: &Backbone, adapter: &TaskAdapter, x: &[f64]) -> (Vec<f64>, Trace) {
    let shape = &adapter.shape;
    let params = adapter.params.as_slice();
    let gates = adapter.gates();
    let act = backbone.spec.activation;
    let depth = shape.depth();

    let mut activations = Vec::with_capacity(depth + 1);
    activations.push(x.to_vec());
    let mut pre = Vec::with_capacity(depth);
    let mut backbone_out = Vec::with_capacity(depth);
    let mut proxy_out = vec![Vec::new(); shape.proxies.len()];

    for l in 1..=depth {
        let layer = &backbone.layers[l - 1];
        let mut z = layer.bias.clone();
        matvec_add(layer.weight.data(), &activations[l - 1], &mut z);
        let g: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
        let s = sigmoid(gates[shape.diag_gates[l - 1]]);
        let mut xl: Vec<f64> = g.iter().map(|v| s * v).collect();
        for (i, p) in shape.proxies.iter().enumerate().filter(|(_, p)| p.to == l) {
            let len = shape.widths[p.to] * shape.widths[p.from];
            let mut out = vec![0.0; shape.widths[l]];
            matvec_add(&params[p.offset..p.offset + len], &activations[p.from], &mut out);
            let sp = sigmoid(gates[p.gate]);
            for (a, o) in xl.iter_mut().zip(&out) {
                *a += sp * o;
            }
            proxy_out[i] = out;
        }
        pre.push(z);
        backbone_out.push(g);
        activations.push(xl);
    }

    let mut logits = adapter.head_bias().to_vec();
    matvec_add(adapter.head_weight(), &activations[depth], &mut logits);
    (
        logits,
        Trace {
            activations,
            pre,
            backbone_out,
            proxy_out,
        },
    )
}

/// Accumulate `scale · ∂logits/∂θ · dlogits` into `grad` (adapter layout).
fn adapter_backward(
    backbone: &Backbone,
    adapter: &TaskAdapter,
    trace: &Trace,
    dlogits: &[f64],
    grad: &mut [f64],
) {
    let shape = &adapter.shape;
    let params = adapter.params.as_slice();
    let gates = adapter.gates();
    let act = backbone.spec.activation;
    let depth = shape.depth();

    let hw = shape.head_len();
    outer_add(
        &mut grad[shape.head_offset..shape.head_offset + hw],
        dlogits,
        &trace.activations[depth],
        1.0,
    );
    for (g, d) in grad[shape.head_bias_offset..].iter_mut().zip(dlogits) {
        *g += d;
    }

    // gx[l] is ∂loss/∂x_l; x_0 is the input and needs no gradient.
    let mut gx: Vec<Vec<f64>> = shape.widths.iter().map(|&w| vec![0.0; w]).collect();
    matvec_t_add(adapter.head_weight(), dlogits, &mut gx[depth]);

    for l in (1..=depth).rev() {
        let gl = std::mem::take(&mut gx[l]);

        let gi = shape.diag_gates[l - 1];
        let s = sigmoid(gates[gi]);
        let g_out = &trace.backbone_out[l - 1];
        grad[shape.gate_offset + gi] += s * (1.0 - s) * dot(&gl, g_out);
        if l >= 2 {
            let dz: Vec<f64> = gl
                .iter()
                .zip(&trace.pre[l - 1])
                .zip(g_out)
                .map(|((g, &z), &o)| s * g * act.derivative(z, o))
                .collect();
            matvec_t_add(backbone.layers[l - 1].weight.data(), &dz, &mut gx[l - 1]);
        }

        for (i, p) in shape.proxies.iter().enumerate().filter(|(_, p)| p.to == l) {
            let len = shape.widths[p.to] * shape.widths[p.from];
            let sp = sigmoid(gates[p.gate]);
            outer_add(
                &mut grad[p.offset..p.offset + len],
                &gl,
                &trace.activations[p.from],
                sp,
            );
            grad[shape.gate_offset + p.gate] += sp * (1.0 - sp) * dot(&gl, &trace.proxy_out[i]);
            let scaled: Vec<f64> = gl.iter().map(|g| sp * g).collect();
            matvec_t_add(&params[p.offset..p.offset + len], &scaled, &mut gx[p.from]);
        }
    }
}

/// Mean softmax cross-entropy over the given samples and its gradient with
/// respect to the adapter, in adapter layout. Samples are visited in order.
pub fn adapter_loss_and_grad<'a>(
    backbone: &Backbone,
    adapter: &TaskAdapter,
    samples: impl ExactSizeIterator<Item = (&'a [f64], usize)>,
) -> Result<(f64, ParamVector)> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let classes = adapter.classes();
    let inv = 1.0 / n as f64;
    let mut grad = vec![0.0; adapter.params.len()];
    let mut loss = 0.0;
    for (x, y) in samples {
        if y >= classes {
            return Err(Error::Input(format!(
                "label {y} outside [0, {classes})"
            )));
        }
        if x.len() != backbone.spec.input_dim {
            return Err(Error::Input(format!(
                "sample has {} features, expected {}",
                x.len(),
                backbone.spec.input_dim
            )));
        }
        let (logits, trace) = adapter_forward(backbone, adapter, x);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - logits[y];
        let mut d = softmax(&logits);
        d[y] -= 1.0;
        for v in &mut d {
            *v *= inv;
        }
        adapter_backward(backbone, adapter, &trace, &d, &mut grad);
    }
    let grad = ParamVector::from_parts(Arc::clone(adapter.params.layout()), grad)?;
    Ok((loss * inv, grad))
}

/// Fraction of argmax-correct predictions, ties to the lowest class.
pub fn adapter_accuracy(
    backbone: &Backbone,
    adapter: &TaskAdapter,
    x: &Matrix,
    y: &[usize],
) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::EmptySet("test set"));
    }
    if x.rows() != y.len() {
        return Err(Error::Input("feature and label counts differ".into()));
    }
    let correct = (0..x.rows())
        .filter(|&i| argmax(&adapter_forward(backbone, adapter, x.row(i)).0) == y[i])
        .count();
    Ok(correct as f64 / x.rows() as f64)
}

impl GlobalModel {
    pub fn new(backbone: Backbone, adapters: Vec<TaskAdapter>) -> Result<Self> {
        if adapters.is_empty() {
            return Err(Error::config("a model needs at least one task"));
        }
        for (i, a) in adapters.iter().enumerate() {
            if a.task_id != i {
                return Err(Error::Input(format!("adapter {i} carries task id {}", a.task_id)));
            }
            let w = &a.shape.widths;
            if w.len() != backbone.spec.depth() + 1
                || (0..w.len()).any(|l| w[l] != backbone.spec.width(l))
            {
                return Err(Error::Input(format!("adapter {i} does not match the backbone")));
            }
        }
        Ok(GlobalModel {
            backbone: Arc::new(backbone),
            adapters,
        })
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn tasks(&self) -> usize {
        self.adapters.len()
    }

    pub fn adapters(&self) -> &[TaskAdapter] {
        &self.adapters
    }

    pub fn adapter(&self, task: usize) -> Result<&TaskAdapter> {
        self.adapters.get(task).ok_or(Error::MissingTask(task))
    }

    pub fn adapter_mut(&mut self, task: usize) -> Result<&mut TaskAdapter> {
        self.adapters.get_mut(task).ok_or(Error::MissingTask(task))
    }

    pub fn forward(&self, task: usize, x: &[f64]) -> Result<(Vec<f64>, Trace)> {
        let adapter = self.adapter(task)?;
        if x.len() != self.backbone.spec.input_dim {
            return Err(Error::Input(format!(
                "input has {} features, expected {}",
                x.len(),
                self.backbone.spec.input_dim
            )));
        }
        Ok(adapter_forward(&self.backbone, adapter, x))
    }

    pub fn loss_and_grad(&self, task: usize, x: &Matrix, y: &[usize]) -> Result<(f64, ParamVector)> {
        let adapter = self.adapter(task)?;
        if x.rows() != y.len() {
            return Err(Error::Input("feature and label counts differ".into()));
        }
        adapter_loss_and_grad(
            &self.backbone,
            adapter,
            (0..x.rows()).map(|i| (x.row(i), y[i])),
        )
    }

    pub fn accuracy(&self, task: usize, x: &Matrix, y: &[usize]) -> Result<f64> {
        adapter_accuracy(&self.backbone, self.adapter(task)?, x, y)
    }
}

/// Build a model with a random frozen backbone and fresh adapters.
///
/// Backbone weights are `N(0, 1/√fan_in)`, proxies `N(0, 0.01/√fan_in)`, head
/// `N(0, 1/√d_L)`; biases start at zero and gate logits at 0 (gates at 0.5).
pub fn init_model(
    spec: &BackboneSpec,
    tasks: usize,
    classes_per_task: usize,
    rng: &mut Rng,
) -> Result<GlobalModel> {
    spec.validate()?;
    if tasks == 0 {
        return Err(Error::config("tasks must be at least 1"));
    }
    let mut layers = Vec::with_capacity(spec.depth());
    for l in 1..=spec.depth() {
        let fan_in = spec.width(l - 1);
        layers.push(DenseLayer {
            weight: gaussian_fill(rng, spec.width(l), fan_in, 1.0 / (fan_in as f64).sqrt())?,
            bias: vec![0.0; spec.width(l)],
        });
    }
    let backbone = Backbone::new(spec.clone(), layers)?;

    let shape = Arc::new(AdapterShape::new(spec, classes_per_task)?);
    let depth = spec.depth();
    let mut adapters = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let mut adapter = TaskAdapter::zeros(t, Arc::clone(&shape));
        for (from, to) in shape.proxy_keys() {
            let fan_in = spec.width(from);
            let m = gaussian_fill(rng, spec.width(to), fan_in, 0.01 / (fan_in as f64).sqrt())?;
            adapter.proxy_mut(from, to).unwrap().copy_from_slice(m.data());
        }
        let head = gaussian_fill(
            rng,
            classes_per_task,
            spec.width(depth),
            1.0 / (spec.width(depth) as f64).sqrt(),
        )?;
        adapter.head_mut()[..head.data().len()].copy_from_slice(head.data());
        adapters.push(adapter);
    }
    GlobalModel::new(backbone, adapters)
}

const CHECKPOINT_FORMAT: &str = "fedcl-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointAdapter {
    task_id: usize,
    classes: usize,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    spec: BackboneSpec,
    backbone: Vec<DenseLayer>,
    adapters: Vec<CheckpointAdapter>,
}

impl GlobalModel {
    /// Versioned JSON checkpoint. Floats are written in shortest round-trip
    /// form, so loading restores every bit.
    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: self.backbone.spec.clone(),
            backbone: self.backbone.layers.clone(),
            adapters: self
                .adapters
                .iter()
                .map(|a| CheckpointAdapter {
                    task_id: a.task_id,
                    classes: a.classes(),
                    params: a.params.as_slice().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let backbone = Backbone::new(ckpt.spec, ckpt.backbone)?;
        let mut shapes: Vec<Arc<AdapterShape>> = Vec::new();
        let mut adapters = Vec::with_capacity(ckpt.adapters.len());
        for a in ckpt.adapters {
            let shape = match shapes.iter().find(|s| s.classes == a.classes) {
                Some(s) => Arc::clone(s),
                None => {
                    let s = Arc::new(AdapterShape::new(&backbone.spec, a.classes)?);
                    shapes.push(Arc::clone(&s));
                    s
                }
            };
            let params = ParamVector::from_parts(Arc::clone(&shape.layout), a.params)?;
            adapters.push(TaskAdapter {
                task_id: a.task_id,
                shape,
                params,
            });
        }
        GlobalModel::new(backbone, adapters)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn small_spec(depth: usize, k: usize, act: Activation, rng: &mut Rng) -> BackboneSpec {
        BackboneSpec {
            input_dim: 1 + rng.below(8),
            layer_dims: (0..depth).map(|_| 1 + rng.below(8)).collect(),
            activation: act,
            skip_window: k,
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = BackboneSpec {
            input_dim: 4,
            layer_dims: vec![4],
            activation: Activation::Relu,
            skip_window: 1,
        };
        assert!(spec.validate().is_err());
        spec.layer_dims = vec![4, 4, 4];
        assert!(spec.validate().is_ok());
        spec.skip_window = 3;
        assert!(spec.validate().is_err());
        spec.skip_window = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn proxy_and_gate_keys_for_three_layers() {
        let spec = BackboneSpec {
            input_dim: 3,
            layer_dims: vec![4, 4, 4],
            activation: Activation::Relu,
            skip_window: 2,
        };
        assert_eq!(spec.proxy_keys(), vec![(1, 2), (1, 3), (2, 3)]);
        assert_eq!(
            spec.gate_keys(),
            vec![(1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3)]
        );
        let model = init_model(&spec, 1, 2, &mut Rng::new(0, 0)).unwrap();
        assert_eq!(model.tasks(), 1);
        let a = model.adapter(0).unwrap();
        for l in 1..=3 {
            assert_eq!(a.gate_logit(l, l), Some(0.0));
        }
        assert!(a.proxy(1, 2).is_some() && a.proxy(2, 3).is_some());
        assert!(a.proxy(1, 1).is_none());
    }

    #[test]
    fn init_is_deterministic() {
        let mut rng = Rng::new(5, 0);
        let spec = small_spec(3, 2, Activation::Tanh, &mut rng);
        let a = init_model(&spec, 3, 2, &mut Rng::new(9, 0)).unwrap();
        let b = init_model(&spec, 3, 2, &mut Rng::new(9, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn saturated_gates_reduce_to_plain_backbone() {
        let mut rng = Rng::new(21, 0);
        let spec = small_spec(4, 2, Activation::Tanh, &mut rng);
        let mut model = init_model(&spec, 1, 3, &mut rng).unwrap();
        {
            let a = model.adapter_mut(0).unwrap();
            for (from, to) in spec.proxy_keys() {
                a.proxy_mut(from, to).unwrap().fill(0.0);
                a.set_gate_logit(from, to, -1e3);
            }
            for l in 1..=4 {
                a.set_gate_logit(l, l, 1e3);
            }
        }
        let x: Vec<f64> = (0..spec.input_dim).map(|_| rng.normal()).collect();
        let mut h = x.clone();
        for layer in model.backbone().layers() {
            let mut z = layer.bias.clone();
            for (i, zi) in z.iter_mut().enumerate() {
                for (j, hj) in h.iter().enumerate() {
                    *zi += layer.weight.get(i, j) * hj;
                }
            }
            h = z.iter().map(|v| v.tanh()).collect();
        }
        let (_, trace) = model.forward(0, &x).unwrap();
        assert_eq!(trace.activations.last().unwrap(), &h);
    }

    #[test]
    fn zero_input_gives_head_bias() {
        let spec = BackboneSpec {
            input_dim: 5,
            layer_dims: vec![6, 4, 3],
            activation: Activation::Relu,
            skip_window: 2,
        };
        let mut model = init_model(&spec, 2, 4, &mut Rng::new(1, 0)).unwrap();
        let a = model.adapter_mut(1).unwrap();
        let bias_off = a.head_weight().len();
        a.head_mut()[bias_off..].copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        let (logits, _) = model.forward(1, &[0.0; 5]).unwrap();
        assert_eq!(logits, vec![0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn unknown_task_is_an_error() {
        let spec = BackboneSpec {
            input_dim: 2,
            layer_dims: vec![2, 2],
            activation: Activation::Relu,
            skip_window: 1,
        };
        let model = init_model(&spec, 2, 2, &mut Rng::new(1, 0)).unwrap();
        assert!(matches!(model.forward(2, &[0.0, 0.0]), Err(Error::MissingTask(2))));
    }

    /// Independent evaluator: recomputes every activation by direct recursion
    /// with explicit index loops and its own logistic.
    fn naive_logits(model: &GlobalModel, task: usize, x: &[f64]) -> Vec<f64> {
        fn layer(model: &GlobalModel, a: &TaskAdapter, x: &[f64], l: usize) -> Vec<f64> {
            if l == 0 {
                return x.to_vec();
            }
            let spec = model.backbone().spec();
            let w = &model.backbone().layers()[l - 1];
            let prev = layer(model, a, x, l - 1);
            let gate = |from, to| 1.0 / (1.0 + (-a.gate_logit(from, to).unwrap()).exp());
            let mut out = vec![0.0; spec.width(l)];
            for i in 0..out.len() {
                let mut z = w.bias[i];
                for j in 0..prev.len() {
                    z += w.weight.get(i, j) * prev[j];
                }
                let g = match spec.activation {
                    Activation::Relu => if z > 0.0 { z } else { 0.0 },
                    Activation::Tanh => z.tanh(),
                };
                out[i] = gate(l, l) * g;
            }
            let lo = if l > spec.skip_window { l - spec.skip_window } else { 1 };
            for from in lo..l {
                let src = layer(model, a, x, from);
                let p = a.proxy(from, l).unwrap();
                for i in 0..out.len() {
                    let mut s = 0.0;
                    for j in 0..src.len() {
                        s += p[i * src.len() + j] * src[j];
                    }
                    out[i] += gate(from, l) * s;
                }
            }
            out
        }
        let a = model.adapter(task).unwrap();
        let depth = model.backbone().spec().depth();
        let top = layer(model, a, x, depth);
        let (w, b) = (a.head_weight(), a.head_bias());
        (0..a.classes())
            .map(|c| b[c] + (0..top.len()).map(|j| w[c * top.len() + j] * top[j]).sum::<f64>())
            .collect()
    }

    fn perturbed_model(seed: u64) -> GlobalModel {
        let mut rng = Rng::new(seed, 0);
        let depth = 2 + rng.below(3);
        let k = 1 + rng.below(depth - 1);
        let act = if rng.below(2) == 0 { Activation::Relu } else { Activation::Tanh };
        let spec = small_spec(depth, k, act, &mut rng);
        let classes = 2 + rng.below(3);
        let mut model = init_model(&spec, 2, classes, &mut rng).unwrap();
        // Give proxies and gates non-trivial values so every path matters.
        for t in 0..2 {
            let a = model.adapter_mut(t).unwrap();
            for v in a.params_mut().as_mut_slice() {
                *v += 0.5 * rng.normal();
            }
        }
        model
    }

    #[test]
    fn forward_matches_naive_evaluator() {
        for seed in 0..20 {
            let model = perturbed_model(seed);
            let mut rng = Rng::new(seed + 100, 0);
            let d = model.backbone().spec().input_dim;
            for t in 0..2 {
                let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let (got, _) = model.forward(t, &x).unwrap();
                let want = naive_logits(&model, t, &x);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
                }
            }
        }
    }

    fn batch_for(model: &GlobalModel, n: usize, rng: &mut Rng) -> (Matrix, Vec<usize>) {
        let d = model.backbone().spec().input_dim;
        let classes = model.adapter(0).unwrap().classes();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let y = (0..n).map(|_| rng.below(classes)).collect();
        (Matrix::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let eps = 1e-5;
        for seed in 0..20 {
            let model = perturbed_model(seed);
            let mut rng = Rng::new(seed + 500, 0);
            let (x, y) = batch_for(&model, 4, &mut rng);
            let (_, grad) = model.loss_and_grad(0, &x, &y).unwrap();
            for i in 0..grad.len() {
                let mut plus = model.clone();
                plus.adapter_mut(0).unwrap().params_mut().as_mut_slice()[i] += eps;
                let mut minus = model.clone();
                minus.adapter_mut(0).unwrap().params_mut().as_mut_slice()[i] -= eps;
                let lp = plus.loss_and_grad(0, &x, &y).unwrap().0;
                let lm = minus.loss_and_grad(0, &x, &y).unwrap().0;
                let fd = (lp - lm) / (2.0 * eps);
                let g = grad.as_slice()[i];
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "seed {seed} param {i}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn duplicated_rows_leave_loss_and_grad_unchanged() {
        let model = perturbed_model(3);
        let mut rng = Rng::new(8, 0);
        let (x, y) = batch_for(&model, 3, &mut rng);
        let idx = [0, 0, 1, 1, 2, 2];
        let x2 = x.select_rows(&idx);
        let y2: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let (l1, g1) = model.loss_and_grad(0, &x, &y).unwrap();
        let (l2, g2) = model.loss_and_grad(0, &x2, &y2).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn separated_logits_drive_loss_to_zero() {
        let spec = BackboneSpec {
            input_dim: 2,
            layer_dims: vec![2, 2],
            activation: Activation::Relu,
            skip_window: 1,
        };
        let mut model = init_model(&spec, 1, 2, &mut Rng::new(2, 0)).unwrap();
        let a = model.adapter_mut(0).unwrap();
        let head = a.head_mut();
        head.fill(0.0);
        head[4] = 100.0; // bias of class 0
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let (loss, _) = model.loss_and_grad(0, &x, &[0, 0]).unwrap();
        assert!(loss < 1e-40);
    }

    #[test]
    fn empty_batch_and_bad_labels_are_rejected() {
        let model = perturbed_model(1);
        let d = model.backbone().spec().input_dim;
        let empty = Matrix::zeros(0, d);
        assert!(matches!(model.loss_and_grad(0, &empty, &[]), Err(Error::EmptyBatch)));
        let x = Matrix::zeros(1, d);
        assert!(model.loss_and_grad(0, &x, &[99]).is_err());
        assert!(matches!(model.accuracy(0, &empty, &[]), Err(Error::EmptySet(_))));
    }

    #[test]
    fn accuracy_extremes_and_ties() {
        let spec = BackboneSpec {
            input_dim: 2,
            layer_dims: vec![2, 2],
            activation: Activation::Relu,
            skip_window: 1,
        };
        let mut model = init_model(&spec, 1, 3, &mut Rng::new(2, 0)).unwrap();
        // Constant logits [1, 1, 0]: argmax ties resolve to class 0.
        let a = model.adapter_mut(0).unwrap();
        let head = a.head_mut();
        head.fill(0.0);
        head[6] = 1.0;
        head[7] = 1.0;
        let x = Matrix::from_rows(&[[0.3, 1.0], [2.0, -1.0], [0.0, 0.0]]).unwrap();
        assert_eq!(model.accuracy(0, &x, &[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(model.accuracy(0, &x, &[1, 2, 1]).unwrap(), 0.0);
    }

    #[test]
    fn random_model_on_random_balanced_data_is_near_chance() {
        let spec = BackboneSpec {
            input_dim: 8,
            layer_dims: vec![8, 8],
            activation: Activation::Relu,
            skip_window: 1,
        };
        let model = init_model(&spec, 1, 2, &mut Rng::new(4, 0)).unwrap();
        let mut rng = Rng::new(40, 0);
        let n = 10_000;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let acc = model.accuracy(0, &Matrix::from_rows(&rows).unwrap(), &y).unwrap();
        assert!((acc - 0.5).abs() <= 0.02, "accuracy {acc}");
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let model = perturbed_model(12);
        let text = model.to_json().unwrap();
        let back = GlobalModel::from_json(&text).unwrap();
        assert_eq!(model, back);
        let bits = |m: &GlobalModel| -> Vec<u64> {
            m.adapters()
                .iter()
                .flat_map(|a| a.params().as_slice().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&model), bits(&back));
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_identity(seed in any::<u64>()) {
            let model = perturbed_model(seed);
            let a = model.adapter(1).unwrap();
            let mut rng = Rng::new(seed, 1);
            let v: Vec<f64> = (0..a.params().len()).map(|_| rng.normal() * 1e3).collect();
            let pv = ParamVector::from_parts(Arc::clone(a.params().layout()), v.clone()).unwrap();
            let back = a.unflatten(pv).unwrap().flatten();
            prop_assert!(back.as_slice().iter().zip(&v).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-50f64..50.0, 1..12)) {
            let s: f64 = softmax(&logits).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

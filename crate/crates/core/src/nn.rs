//! Experts, MoE layers and the full classifier.
//!
//! The model is an input projection, `L` residual blocks each followed by
//! layer normalization, and a linear classification head. A block is either
//! a routed MoE layer whose expert count comes from the schedule, or (for
//! the dense baseline) a single two-layer feed-forward network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::routing::{
    k_max, rank_threshold, select_above, select_dynamic, select_topk, RoutingConfig, RoutingMode,
    SelectionResult,
};
use crate::schedules::{layer_expert_counts, ScheduleKind, ScheduleSpec};
use crate::tensor::Array;

const GATE_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizePreset {
    Tiny,
    Small,
    Medium,
    Large,
}

impl SizePreset {
    pub fn layers(self) -> usize {
        match self {
            SizePreset::Tiny => 2,
            SizePreset::Small => 4,
            SizePreset::Medium => 6,
            SizePreset::Large => 8,
        }
    }

    pub fn hidden(self) -> usize {
        match self {
            SizePreset::Tiny => 64,
            SizePreset::Small => 128,
            SizePreset::Medium => 256,
            SizePreset::Large => 512,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Dynamoe,
    DenseMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub size: SizePreset,
    pub schedule: ScheduleSpec,
    pub routing: RoutingConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Expert hidden width as a multiple of the model width.
    pub expert_expansion: f64,
    /// Hidden width multiple of the dense baseline's feed-forward blocks.
    pub dense_expansion: f64,
    pub baseline: Baseline,
}

impl ModelConfig {
    /// DynaMoE model with default routing and expansions.
    pub fn new(
        size: SizePreset,
        kind: ScheduleKind,
        n_max: usize,
        n_min: usize,
        input_dim: usize,
        num_classes: usize,
    ) -> Self {
        ModelConfig {
            size,
            schedule: ScheduleSpec {
                kind,
                n_max,
                n_min,
                layers: size.layers(),
            },
            routing: RoutingConfig::default(),
            input_dim,
            num_classes,
            expert_expansion: 0.5,
            dense_expansion: 2.0,
            baseline: Baseline::Dynamoe,
        }
    }

    pub fn dense(size: SizePreset, input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            baseline: Baseline::DenseMlp,
            ..ModelConfig::new(size, ScheduleKind::Uniform, 1, 1, input_dim, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule
            .validate()
            .map_err(|e| Error::config("model.schedule", e.to_string()))?;
        if self.schedule.layers != self.size.layers() {
            return Err(Error::config(
                "model.schedule.layers",
                format!(
                    "{} layers but the {:?} preset has {}",
                    self.schedule.layers,
                    self.size,
                    self.size.layers()
                ),
            ));
        }
        self.routing.validate()?;
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be at least 1"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("model.num_classes", "must be at least 1"));
        }
        for (field, v) in [
            ("model.expert_expansion", self.expert_expansion),
            ("model.dense_expansion", self.dense_expansion),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("{v} must be positive")));
            }
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.size.hidden()
    }

    pub fn expert_hidden(&self) -> usize {
        ((self.expert_expansion * self.hidden() as f64).round() as usize).max(1)
    }

    pub fn dense_hidden(&self) -> usize {
        ((self.dense_expansion * self.hidden() as f64).round() as usize).max(1)
    }

    /// Experts per layer; all ones for the dense baseline.
    pub fn expert_counts(&self) -> Result<Vec<usize>> {
        match self.baseline {
            Baseline::Dynamoe => layer_expert_counts(&self.schedule),
            Baseline::DenseMlp => Ok(vec![1; self.size.layers()]),
        }
    }

    /// Short human-readable label, e.g. `descending E8-1` or `mlp`.
    pub fn label(&self) -> String {
        match self.baseline {
            Baseline::DenseMlp => "mlp".to_string(),
            Baseline::Dynamoe => format!(
                "{} E{}-{}",
                self.schedule.kind, self.schedule.n_max, self.schedule.n_min
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in × out]`
    pub weight: Array,
    pub bias: Array,
}

/// Two-layer feed-forward expert: `relu(x·w1 + b1)·w2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub w1: Array,
    pub b1: Array,
    pub w2: Array,
    pub b2: Array,
}

impl ExpertParams {
    pub fn zeros(d: usize, h: usize) -> Self {
        ExpertParams {
            w1: Array::zeros(&[d, h]),
            b1: Array::zeros(&[h]),
            w2: Array::zeros(&[h, d]),
            b2: Array::zeros(&[d]),
        }
    }

    pub fn width(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoELayerParams {
    /// `[N × d]`
    pub gate_weights: Array,
    pub experts: Vec<ExpertParams>,
    pub routing: RoutingConfig,
}

impl MoELayerParams {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Moe(MoELayerParams),
    Dense(ExpertParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array,
    pub beta: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub norms: Vec<LayerNormParams>,
    pub head: Linear,
}

fn init_matrix(rows: usize, cols: usize, fan_in: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array {
    let bound = scale / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Array::new(vec![rows, cols], data).expect("shape")
}

fn init_linear(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Linear {
    Linear {
        weight: init_matrix(fan_in, fan_out, fan_in, 1.0, rng),
        bias: Array::zeros(&[fan_out]),
    }
}

fn init_expert(d: usize, h: usize, rng: &mut ChaCha8Rng) -> ExpertParams {
    ExpertParams {
        w1: init_matrix(d, h, d, 1.0, rng),
        b1: Array::zeros(&[h]),
        w2: init_matrix(h, d, h, 1.0, rng),
        b2: Array::zeros(&[d]),
    }
}

impl Model {
    /// Fan-in-scaled uniform weights, zero biases, gate weights shrunk so
    /// initial routing is close to uniform.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden();
        let input = init_linear(config.input_dim, d, &mut rng);
        let counts = config.expert_counts()?;
        let mut blocks = Vec::with_capacity(counts.len());
        let mut norms = Vec::with_capacity(counts.len());
        for &n in &counts {
            let block = match config.baseline {
                Baseline::DenseMlp => Block::Dense(init_expert(d, config.dense_hidden(), &mut rng)),
                Baseline::Dynamoe => Block::Moe(MoELayerParams {
                    gate_weights: init_matrix(n, d, d, GATE_INIT_SCALE, &mut rng),
                    experts: (0..n)
                        .map(|_| init_expert(d, config.expert_hidden(), &mut rng))
                        .collect(),
                    routing: config.routing,
                }),
            };
            blocks.push(block);
            norms.push(LayerNormParams {
                gamma: Array::full(&[d], 1.0),
                beta: Array::zeros(&[d]),
            });
        }
        let head = init_linear(d, config.num_classes, &mut rng);
        Ok(Model {
            config,
            input,
            blocks,
            norms,
            head,
        })
    }

    /// Every parameter array with its name, in forward-pass order.
    pub fn named_params(&self) -> Vec<(String, &Array)> {
        let mut out = vec![
            ("input.weight".to_string(), &self.input.weight),
            ("input.bias".to_string(), &self.input.bias),
        ];
        for (i, (block, norm)) in self.blocks.iter().zip(&self.norms).enumerate() {
            match block {
                Block::Moe(layer) => {
                    out.push((format!("layers.{i}.gate"), &layer.gate_weights));
                    for (e, ex) in layer.experts.iter().enumerate() {
                        push_expert(&mut out, &format!("layers.{i}.experts.{e}"), ex);
                    }
                }
                Block::Dense(ex) => push_expert(&mut out, &format!("layers.{i}.dense"), ex),
            }
            out.push((format!("norms.{i}.gamma"), &norm.gamma));
            out.push((format!("norms.{i}.beta"), &norm.beta));
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    /// Mutable parameters in the same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        let mut out = vec![&mut self.input.weight, &mut self.input.bias];
        for (block, norm) in self.blocks.iter_mut().zip(self.norms.iter_mut()) {
            match block {
                Block::Moe(layer) => {
                    out.push(&mut layer.gate_weights);
                    for ex in &mut layer.experts {
                        out.extend([&mut ex.w1, &mut ex.b1, &mut ex.w2, &mut ex.b2]);
                    }
                }
                Block::Dense(ex) => out.extend([&mut ex.w1, &mut ex.b1, &mut ex.w2, &mut ex.b2]),
            }
            out.push(&mut norm.gamma);
            out.push(&mut norm.beta);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn expert_counts(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Moe(l) => l.n_experts(),
                Block::Dense(_) => 1,
            })
            .collect()
    }

    /// Replaces the routing configuration of every MoE layer.
    pub fn set_routing(&mut self, routing: RoutingConfig) {
        self.config.routing = routing;
        for block in &mut self.blocks {
            if let Block::Moe(layer) = block {
                layer.routing = routing;
            }
        }
    }

    /// Records a full forward pass on a fresh tape.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Array, training: bool, rng: &mut R) -> Result<ForwardPass> {
        if x.shape().len() != 2 || x.cols() != self.config.input_dim {
            return Err(Error::shape(
                "model_forward",
                format!("input {:?}, expected [B × {}]", x.shape(), self.config.input_dim),
            ));
        }
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let mut bind = |tape: &mut Tape, a: &Array| {
            let v = tape.param(a.clone());
            params.push(v);
            v
        };

        let xv = tape.constant(x.clone());
        let w_in = bind(&mut tape, &self.input.weight);
        let b_in = bind(&mut tape, &self.input.bias);
        let proj = tape.matmul(xv, w_in)?;
        let mut h = tape.add_row_bias(proj, b_in)?;

        let mut selections = Vec::with_capacity(self.blocks.len());
        let mut residual = Vec::with_capacity(self.blocks.len());
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for (block, norm) in self.blocks.iter().zip(&self.norms) {
            let out = match block {
                Block::Moe(layer) => {
                    let gate = bind(&mut tape, &layer.gate_weights);
                    let experts: Vec<ExpertVars> = layer
                        .experts
                        .iter()
                        .map(|e| ExpertVars::bind(&mut tape, e, &mut bind))
                        .collect();
                    let (out, sel) = moe_on_tape(&mut tape, layer, gate, &experts, h, training, rng)?;
                    selections.push(sel);
                    out
                }
                Block::Dense(ex) => {
                    let vars = ExpertVars::bind(&mut tape, ex, &mut bind);
                    let y = vars.apply(&mut tape, h)?;
                    let rows = tape.value(h).rows();
                    selections.push(vec![single_expert_selection(); rows]);
                    tape.add(y, h)?
                }
            };
            let gamma = bind(&mut tape, &norm.gamma);
            let beta = bind(&mut tape, &norm.beta);
            h = tape.layer_norm(out, gamma, beta)?;
            residual.push(out);
            hidden.push(h);
        }

        let w_out = bind(&mut tape, &self.head.weight);
        let b_out = bind(&mut tape, &self.head.bias);
        let head = tape.matmul(h, w_out)?;
        let logits = tape.add_row_bias(head, b_out)?;
        Ok(ForwardPass {
            tape,
            logits,
            params,
            selections,
            residual,
            hidden,
        })
    }

    /// Logits without keeping the tape.
    pub fn logits<R: Rng + ?Sized>(&self, x: &Array, training: bool, rng: &mut R) -> Result<Array> {
        let pass = self.forward(x, training, rng)?;
        Ok(pass.tape.value(pass.logits).clone())
    }

    /// Mean cross-entropy on a batch and its gradient for every parameter,
    /// in [`Model::named_params`] order.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        x: &Array,
        labels: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<StepOutput> {
        let mut pass = self.forward(x, training, rng)?;
        let loss_var = pass.tape.cross_entropy(pass.logits, labels)?;
        let loss = pass.tape.value(loss_var).data()[0];
        let logits = pass.tape.value(pass.logits).clone();
        let grads = pass.tape.backward(loss_var)?;
        Ok(StepOutput {
            loss,
            grads: pass.params.iter().map(|&v| grads.wrt(v)).collect(),
            logits,
            selections: pass.selections,
        })
    }
}

fn push_expert<'a>(out: &mut Vec<(String, &'a Array)>, prefix: &str, ex: &'a ExpertParams) {
    out.push((format!("{prefix}.w1"), &ex.w1));
    out.push((format!("{prefix}.b1"), &ex.b1));
    out.push((format!("{prefix}.w2"), &ex.w2));
    out.push((format!("{prefix}.b2"), &ex.b2));
}

fn single_expert_selection() -> SelectionResult {
    SelectionResult {
        indices: vec![0],
        threshold: None,
        weights: vec![1.0],
    }
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    /// Parameter leaves in [`Model::named_params`] order.
    pub params: Vec<Var>,
    /// Per layer, per token.
    pub selections: Vec<Vec<SelectionResult>>,
    /// Residual-block outputs before normalization, per layer.
    pub residual: Vec<Var>,
    /// Normalized hidden states, per layer.
    pub hidden: Vec<Var>,
}

impl ForwardPass {
    pub fn param_grads(&self, grads: &Gradients) -> Vec<crate::tensor::Array> {
        self.params.iter().map(|&v| grads.wrt(v)).collect()
    }
}

pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<Array>,
    pub logits: Array,
    pub selections: Vec<Vec<SelectionResult>>,
}

struct ExpertVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl ExpertVars {
    fn bind(tape: &mut Tape, e: &ExpertParams, bind: &mut impl FnMut(&mut Tape, &Array) -> Var) -> Self {
        ExpertVars {
            w1: bind(tape, &e.w1),
            b1: bind(tape, &e.b1),
            w2: bind(tape, &e.w2),
            b2: bind(tape, &e.b2),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let a = tape.matmul(x, self.w1)?;
        let a = tape.add_row_bias(a, self.b1)?;
        let a = tape.relu(a);
        let y = tape.matmul(a, self.w2)?;
        tape.add_row_bias(y, self.b2)
    }
}

/// Per-token selections for one layer given its (possibly noised) gate
/// values, row-major `[B × N]`.
pub fn select_tokens(values: &Array, routing: &RoutingConfig) -> Result<Vec<SelectionResult>> {
    let (b, n) = (values.rows(), values.cols());
    match routing.mode {
        RoutingMode::DynamicPerToken => Ok((0..b).map(|i| select_dynamic(values.row(i), routing.tau)).collect()),
        RoutingMode::DynamicBatch => {
            let theta = rank_threshold(values.data(), k_max(routing.tau, b * n));
            let cap = k_max(routing.tau, n);
            Ok((0..b).map(|i| select_above(values.row(i), theta, cap)).collect())
        }
        RoutingMode::FixedTopk(k) => (0..b).map(|i| select_topk(values.row(i), k.min(n))).collect(),
    }
}

fn moe_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    layer: &MoELayerParams,
    gate: Var,
    experts: &[ExpertVars],
    h: Var,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Vec<SelectionResult>)> {
    let routing = &layer.routing;
    let (b, d) = (tape.value(h).rows(), tape.value(h).cols());
    let n = layer.n_experts();
    if layer.gate_weights.cols() != d {
        return Err(Error::shape(
            "moe_layer_forward",
            format!("gate expects width {}, input has {d}", layer.gate_weights.cols()),
        ));
    }

    let logits = tape.matmul_t(h, gate)?;
    let mut gates = tape.softmax_rows(logits)?;
    if training && routing.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, routing.noise_sigma).expect("validated sigma");
        let noise = Array::new(vec![b, n], (0..b * n).map(|_| normal.sample(rng)).collect())?;
        gates = tape.add_const(gates, &noise)?;
    }

    let mut selections = select_tokens(tape.value(gates), routing)?;
    let mut flat = Vec::new();
    let mut lens = Vec::with_capacity(b);
    for (t, sel) in selections.iter().enumerate() {
        flat.extend(sel.indices.iter().map(|&i| t * n + i));
        lens.push(sel.k());
    }
    let selected = tape.gather(gates, flat)?;
    let weights = if routing.mode.is_dynamic() {
        tape.segment_softmax(selected, lens, routing.temperature)?
    } else {
        selected
    };

    // token rows and weight positions routed to each expert
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut positions: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut pos = 0;
    let wv = tape.value(weights).data().to_vec();
    for (t, sel) in selections.iter_mut().enumerate() {
        sel.weights = wv[pos..pos + sel.k()].to_vec();
        for &e in &sel.indices {
            rows[e].push(t);
            positions[e].push(pos);
            pos += 1;
        }
    }

    let mut parts = Vec::new();
    for (e, vars) in experts.iter().enumerate() {
        if rows[e].is_empty() {
            continue;
        }
        let x_e = tape.gather_rows(h, rows[e].clone())?;
        let y_e = vars.apply(tape, x_e)?;
        let w_e = tape.gather(weights, std::mem::take(&mut positions[e]))?;
        let scaled = tape.scale_rows(y_e, w_e)?;
        parts.push((scaled, std::mem::take(&mut rows[e])));
    }
    let mixed = tape.scatter_add_rows(parts, b, d)?;
    Ok((tape.add(mixed, h)?, selections))
}

/// `relu(x·w1 + b1)·w2 + b2` for a batch `x: [B × d]`.
pub fn expert_forward(p: &ExpertParams, x: &Array) -> Result<Array> {
    let mut a = x.matmul(&p.w1)?;
    add_bias(&mut a, &p.b1)?;
    for v in a.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mut y = a.matmul(&p.w2)?;
    add_bias(&mut y, &p.b2)?;
    Ok(y)
}

fn add_bias(a: &mut Array, b: &Array) -> Result<()> {
    let c = a.cols();
    if b.len() != c {
        return Err(Error::shape("add_bias", format!("bias {} for width {c}", b.len())));
    }
    for row in a.data_mut().chunks_mut(c) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(())
}

/// One MoE layer including its residual connection (before normalization).
pub fn moe_layer_forward<R: Rng + ?Sized>(
    layer: &MoELayerParams,
    h: &Array,
    training: bool,
    rng: &mut R,
) -> Result<(Array, Vec<SelectionResult>)> {
    layer.routing.validate()?;
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let gate = tape.constant(layer.gate_weights.clone());
    let experts: Vec<ExpertVars> = layer
        .experts
        .iter()
        .map(|e| ExpertVars::bind(&mut tape, e, &mut |t: &mut Tape, a: &Array| t.constant(a.clone())))
        .collect();
    let (out, sel) = moe_on_tape(&mut tape, layer, gate, &experts, hv, training, rng)?;
    Ok((tape.value(out).clone(), sel))
}

/// Multiply-accumulate count for one token: selected expert evaluations
/// plus the gate projection.
pub fn active_flops_per_token(layer: &MoELayerParams, selection: &SelectionResult) -> u64 {
    let (d, h) = layer
        .experts
        .first()
        .map_or((layer.gate_weights.cols(), 0), |e| (e.width(), e.hidden()));
    let (d, h, n, k) = (d as u64, h as u64, layer.n_experts() as u64, selection.k() as u64);
    k * (2 * d * h + 2 * h * d) + 2 * n * d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::dynamic_weights;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_array(shape: &[usize], seed: u64) -> Array {
        let mut r = rng(seed);
        let dist = Uniform::new(-1.0, 1.0).unwrap();
        Array::new(shape.to_vec(), (0..shape.iter().product()).map(|_| dist.sample(&mut r)).collect()).unwrap()
    }

    fn random_expert(d: usize, h: usize, seed: u64) -> ExpertParams {
        ExpertParams {
            w1: random_array(&[d, h], seed),
            b1: random_array(&[h], seed + 1),
            w2: random_array(&[h, d], seed + 2),
            b2: random_array(&[d], seed + 3),
        }
    }

    // Straight-line loops over scalars.
    fn expert_reference(p: &ExpertParams, x: &[f64]) -> Vec<f64> {
        let (d, h) = (p.width(), p.hidden());
        let mut hid = vec![0.0; h];
        for j in 0..h {
            let mut s = p.b1.data()[j];
            for i in 0..d {
                s += x[i] * p.w1.data()[i * h + j];
            }
            hid[j] = if s > 0.0 { s } else { 0.0 };
        }
        (0..d)
            .map(|k| p.b2.data()[k] + (0..h).map(|j| hid[j] * p.w2.data()[j * d + k]).sum::<f64>())
            .collect()
    }

    #[test]
    fn expert_forward_cases() {
        let x = random_array(&[3, 4], 1);
        assert!(expert_forward(&ExpertParams::zeros(4, 6), &x).unwrap().data().iter().all(|&v| v == 0.0));

        let mut eye = ExpertParams::zeros(4, 4);
        for i in 0..4 {
            eye.w1.data_mut()[i * 4 + i] = 1.0;
            eye.w2.data_mut()[i * 4 + i] = 1.0;
        }
        let pos = Array::new(vec![2, 4], vec![0.0, 0.5, 1.0, 2.0, 3.0, 0.25, 0.0, 7.0]).unwrap();
        assert_eq!(expert_forward(&eye, &pos).unwrap(), pos);

        let p = random_expert(4, 5, 10);
        let y = expert_forward(&p, &x).unwrap();
        for r in 0..3 {
            for (a, b) in y.row(r).iter().zip(expert_reference(&p, x.row(r))) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(expert_forward(&p, &random_array(&[2, 3], 2)).is_err());
    }

    fn layer(n: usize, d: usize, h: usize, routing: RoutingConfig) -> MoELayerParams {
        MoELayerParams {
            gate_weights: random_array(&[n, d], 40),
            experts: (0..n).map(|e| random_expert(d, h, 100 + 10 * e as u64)).collect(),
            routing,
        }
    }

    #[test]
    fn single_expert_layer_is_expert_plus_residual() {
        let l = layer(1, 4, 3, RoutingConfig { tau: 0.9, ..Default::default() });
        let h = random_array(&[3, 4], 7);
        let (out, sel) = moe_layer_forward(&l, &h, false, &mut rng(0)).unwrap();
        let y = expert_forward(&l.experts[0], &h).unwrap();
        for (o, (a, b)) in out.data().iter().zip(y.data().iter().zip(h.data())) {
            assert_eq!(*o, a + b);
        }
        assert!(sel.iter().all(|s| s.indices == vec![0] && s.weights == vec![1.0]));
    }

    #[test]
    fn zero_experts_pass_the_residual_through() {
        let mut l = layer(4, 5, 3, RoutingConfig::default());
        for e in &mut l.experts {
            *e = ExpertParams::zeros(5, 3);
        }
        let h = random_array(&[6, 5], 8);
        let (out, _) = moe_layer_forward(&l, &h, true, &mut rng(1)).unwrap();
        assert_eq!(out, h);
    }

    // Token-by-token evaluation built only from the routing primitives.
    fn moe_reference(l: &MoELayerParams, h: &Array) -> Vec<f64> {
        let mut out = Vec::new();
        for t in 0..h.rows() {
            let x = h.row(t);
            let logits: Vec<f64> = (0..l.n_experts())
                .map(|e| l.gate_weights.row(e).iter().zip(x).map(|(a, b)| a * b).sum())
                .collect();
            let g = crate::routing::gate_probs(&logits).unwrap();
            let sel = select_dynamic(g.values(), l.routing.tau);
            let gates: Vec<f64> = sel.indices.iter().map(|&i| g.values()[i]).collect();
            let outs: Vec<Vec<f64>> = sel.indices.iter().map(|&i| expert_reference(&l.experts[i], x)).collect();
            let y = crate::routing::combine_dynamic(&gates, &outs, l.routing.temperature).unwrap();
            out.extend(y.iter().zip(x).map(|(a, b)| a + b));
        }
        out
    }

    #[test]
    fn moe_layer_matches_per_token_reference() {
        let l = layer(4, 6, 5, RoutingConfig { tau: 0.5, ..Default::default() });
        let h = random_array(&[3, 6], 21);
        let (out, sel) = moe_layer_forward(&l, &h, false, &mut rng(2)).unwrap();
        for (a, b) in out.data().iter().zip(moe_reference(&l, &h)) {
            assert!((a - b).abs() < 1e-10);
        }
        for s in &sel {
            assert!(s.k() <= 2);
            assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_layer_uses_raw_gate_weights() {
        let l = layer(5, 4, 3, RoutingConfig { mode: RoutingMode::FixedTopk(2), ..Default::default() });
        let h = random_array(&[4, 4], 3);
        let (_, sel) = moe_layer_forward(&l, &h, false, &mut rng(0)).unwrap();
        for s in &sel {
            assert_eq!(s.k(), 2);
            assert!(s.weights.iter().sum::<f64>() < 1.0);
        }
    }

    #[test]
    fn batch_threshold_mode_varies_k() {
        let l = layer(8, 6, 3, RoutingConfig { mode: RoutingMode::DynamicBatch, ..Default::default() });
        let h = random_array(&[32, 6], 99);
        let (_, sel) = moe_layer_forward(&l, &h, false, &mut rng(0)).unwrap();
        let ks: Vec<usize> = sel.iter().map(|s| s.k()).collect();
        assert!(ks.iter().all(|&k| (1..=3).contains(&k)));
        assert!(ks.iter().any(|&k| k != ks[0]), "{ks:?}");
    }

    #[test]
    fn flops_accounting() {
        let l = MoELayerParams {
            gate_weights: Array::zeros(&[8, 64]),
            experts: vec![ExpertParams::zeros(64, 64); 8],
            routing: RoutingConfig::default(),
        };
        let one = SelectionResult { indices: vec![3], threshold: None, weights: vec![1.0] };
        let two = SelectionResult { indices: vec![1, 3], threshold: None, weights: vec![0.5, 0.5] };
        assert_eq!(active_flops_per_token(&l, &one), 17_408);
        let gate = 2 * 8 * 64;
        assert_eq!(active_flops_per_token(&l, &two) - gate, 2 * (active_flops_per_token(&l, &one) - gate));
        let single = MoELayerParams { gate_weights: Array::zeros(&[1, 64]), experts: vec![ExpertParams::zeros(64, 64)], routing: RoutingConfig::default() };
        assert_eq!(active_flops_per_token(&single, &one) - 16_384, 2 * 64);
    }

    #[test]
    fn param_counts() {
        let lin = Linear { weight: Array::zeros(&[784, 128]), bias: Array::zeros(&[128]) };
        assert_eq!(lin.weight.len() + lin.bias.len(), 100_480);

        let mlp = Model::new(ModelConfig::dense(SizePreset::Small, 784, 10), 0).unwrap();
        let count = mlp.param_count() as f64;
        assert!((count - 340_000.0).abs() <= 0.15 * 340_000.0, "{count}");

        let cfg = |n_max| ModelConfig::new(SizePreset::Small, ScheduleKind::Descending, n_max, 1, 784, 10);
        let e8 = Model::new(cfg(8), 0).unwrap();
        let e2 = Model::new(cfg(2), 0).unwrap();
        let per_expert = e8.config.expert_hidden() * 128 * 2 + e8.config.expert_hidden() + 128 + 128;
        let extra: usize = e8.expert_counts().iter().zip(e2.expert_counts()).map(|(a, b)| a - b).sum();
        assert!(e8.param_count() > e2.param_count());
        assert_eq!(e8.param_count() - e2.param_count(), extra * per_expert);
    }

    #[test]
    fn named_and_mutable_params_align() {
        let mut m = Model::new(ModelConfig::new(SizePreset::Tiny, ScheduleKind::Descending, 4, 1, 12, 3), 5).unwrap();
        let shapes: Vec<Vec<usize>> = m.named_params().iter().map(|(_, a)| a.shape().to_vec()).collect();
        let mut_shapes: Vec<Vec<usize>> = m.params_mut().iter().map(|a| a.shape().to_vec()).collect();
        assert_eq!(shapes, mut_shapes);
        let pass = m.forward(&random_array(&[2, 12], 1), false, &mut rng(0)).unwrap();
        assert_eq!(pass.params.len(), shapes.len());
        for (v, s) in pass.params.iter().zip(&shapes) {
            assert_eq!(pass.tape.value(*v).shape(), s.as_slice());
        }
    }

    #[test]
    fn model_forward_shapes_and_determinism() {
        let m = Model::new(ModelConfig::new(SizePreset::Tiny, ScheduleKind::Descending, 8, 1, 784, 10), 3).unwrap();
        let mut x = random_array(&[4, 784], 12);
        let first = x.row(0).to_vec();
        x.data_mut()[784..1568].copy_from_slice(&first);
        let logits = m.logits(&x, false, &mut rng(0)).unwrap();
        assert_eq!(logits.shape(), &[4, 10]);
        assert_eq!(logits.row(0), logits.row(1));
        for r in 0..4 {
            let p = dynamic_weights(logits.row(r), 1.0);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let again = m.logits(&x, false, &mut rng(77)).unwrap();
        assert_eq!(logits, again);
        assert!(m.logits(&random_array(&[2, 5], 1), false, &mut rng(0)).is_err());
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let m = Model::new(ModelConfig::new(SizePreset::Tiny, ScheduleKind::Uniform, 3, 1, 16, 4), 9).unwrap();
        let x = random_array(&[5, 16], 4);
        let pass = m.forward(&x, false, &mut rng(0)).unwrap();
        assert_eq!(pass.hidden.len(), 2);
        for &v in &pass.hidden {
            let h = pass.tape.value(v);
            for r in 0..h.rows() {
                let row = h.row(r);
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
                assert!(mean.abs() < 1e-6, "{mean}");
                assert!((var - 1.0).abs() < 1e-4, "{var}");
            }
        }
    }

    #[test]
    fn all_single_expert_model_equals_dense_baseline() {
        let mut cfg = ModelConfig::new(SizePreset::Tiny, ScheduleKind::Uniform, 1, 1, 10, 3);
        cfg.dense_expansion = cfg.expert_expansion;
        let moe = Model::new(cfg.clone(), 4).unwrap();
        let mut dense = Model::new(ModelConfig { baseline: Baseline::DenseMlp, ..cfg }, 4).unwrap();
        dense.input = moe.input.clone();
        dense.head = moe.head.clone();
        dense.norms = moe.norms.clone();
        for (d, m) in dense.blocks.iter_mut().zip(&moe.blocks) {
            let Block::Moe(layer) = m else { unreachable!() };
            *d = Block::Dense(layer.experts[0].clone());
        }
        let x = random_array(&[6, 10], 5);
        assert_eq!(moe.logits(&x, false, &mut rng(0)).unwrap(), dense.logits(&x, false, &mut rng(0)).unwrap());
    }
}

//! Layer-wise relevance propagation and the gradient baselines.
//!
//! Relevance is attached to the neurons entering each layer. Linear and
//! convolution layers redistribute with one of the z-rules below; ReLU layers
//! pass relevance through unchanged (dead units already hold `x = 0`); max
//! pooling sends each cell's relevance to its recorded switch; average pooling
//! spreads it evenly over the window. Biases take part in the forward pass only.
//!
//! For a layer with inputs `x_i`, weights `w_ij` and upper relevance `R_j`:
//!
//! ```text
//! z+ : R_i = Σ_j  x_i w+_ij                     / Σ_i' x_i' w+_i'j                        · R_j
//! z  : R_i = Σ_j  x_i w_ij                      / Σ_i' x_i' w_i'j                         · R_j
//! zβ : R_i = Σ_j (x_i w_ij - l_i w+_ij - h_i w-_ij) / Σ_i' (x_i' w_i'j - l_i' w+_i'j - h_i' w-_i'j) · R_j
//! ```
//!
//! Every denominator `z` is stabilized to `z + ε·sign(z)` with `sign(0) = +1`.
//! Output neurons with `R_j = 0` are skipped, so a zero denominator only
//! matters where there is relevance to pass down.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::ForwardTrace;
use crate::model::{InputBounds, LayerKind, ModelContainer, ModelView};
use crate::tensor::{matrix_dims, ConvGeometry, PaddedConv, Tensor};

pub const DEFAULT_EPSILON: f32 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    Z,
    ZPlus,
    /// Box-constrained rule for inputs known to lie in per-channel `[l, h]`.
    ZBeta(InputBounds),
}

impl Rule {
    pub fn name(&self) -> &'static str {
        match self {
            Rule::Z => "z",
            Rule::ZPlus => "zplus",
            Rule::ZBeta(_) => "zbeta",
        }
    }
}

/// Which rule runs where, and the denominator stabilizer.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleConfig {
    /// Rule for the first parametric layer, the one reading the network input.
    pub input_layer: Rule,
    /// Rule for every other linear and convolution layer.
    pub default_rule: Rule,
    pub epsilon: f32,
}

impl RuleConfig {
    /// zβ with the model's input bounds on the first layer, z+ elsewhere.
    pub fn for_model(model: &ModelContainer) -> Self {
        Self {
            input_layer: Rule::ZBeta(model.input_bounds().clone()),
            default_rule: Rule::ZPlus,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn uniform(rule: Rule) -> Self {
        Self {
            input_layer: rule.clone(),
            default_rule: rule,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f32) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        for rule in [&self.input_layer, &self.default_rule] {
            if let Rule::ZBeta(b) = rule {
                b.validate()?;
            }
        }
        Ok(())
    }
}

/// What the output-layer relevance vector stands for.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Class { index: usize },
    MultiClass { indices: Vec<usize> },
    Clrp1Dual { index: usize },
    Neuron { layer: String, index: usize },
    Custom { description: String },
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Class { index } => write!(f, "class {index}"),
            Target::MultiClass { indices } => {
                let list: Vec<String> = indices.iter().map(ToString::to_string).collect();
                write!(f, "classes {}", list.join(","))
            }
            Target::Clrp1Dual { index } => write!(f, "dual of class {index}"),
            Target::Neuron { layer, index } => write!(f, "{layer}[{index}]"),
            Target::Custom { description } => f.write_str(description),
        }
    }
}

/// Relevance placed on the logits before propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputRelevance {
    values: Tensor,
    target: Target,
}

impl OutputRelevance {
    /// The target logit alone: one nonzero entry equal to `logits[j]`.
    pub fn single_class(logits: &Tensor, j: usize) -> Result<Self> {
        check_index("class", j, logits.len())?;
        let mut values = Tensor::zeros(logits.shape());
        values.data_mut()[j] = logits.data()[j];
        Ok(Self {
            values,
            target: Target::Class { index: j },
        })
    }

    /// Several classes at once, each entry its own logit. The chosen logits
    /// must be nonnegative with a positive total.
    pub fn multi_class(logits: &Tensor, classes: &[usize]) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidArgument(
                "multi-class target needs at least one class".into(),
            ));
        }
        let mut values = Tensor::zeros(logits.shape());
        for &j in classes {
            check_index("class", j, logits.len())?;
            let s = logits.data()[j];
            if s < 0.0 {
                return Err(Error::NonPositiveScore {
                    target: format!("class {j}"),
                    score: s,
                });
            }
            values.data_mut()[j] = s;
        }
        let total = values.sum();
        if total <= 0.0 {
            return Err(Error::NonPositiveScore {
                target: "multi-class set".into(),
                score: total as f32,
            });
        }
        Ok(Self {
            values,
            target: Target::MultiClass {
                indices: classes.to_vec(),
            },
        })
    }

    pub fn custom(values: Tensor, target: Target) -> Self {
        Self { values, target }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn target(&self) -> &Target {
        &self.target
    }

    pub fn total(&self) -> f64 {
        self.values.sum()
    }
}

fn check_index(what: &'static str, index: usize, limit: usize) -> Result<()> {
    if index < limit {
        Ok(())
    } else {
        Err(Error::OutOfRange { what, index, limit })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lrp,
    Clrp1,
    Clrp2,
    #[serde(rename = "grad")]
    Gradient,
    Guided,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Lrp,
        Method::Clrp1,
        Method::Clrp2,
        Method::Gradient,
        Method::Guided,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Lrp => "lrp",
            Method::Clrp1 => "clrp1",
            Method::Clrp2 => "clrp2",
            Method::Gradient => "grad",
            Method::Guided => "guided",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

/// Per-pixel relevance of one explanation, channels summed.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// `[H, W]`.
    pub values: Tensor,
    pub method: Method,
    pub target: String,
    /// Sum over all input elements before channel summing and clipping.
    pub total_relevance: f64,
    /// Relevance assigned to zero-padding positions and dropped.
    pub padding_leakage: f64,
    /// Id of the forward trace the map was computed from.
    pub trace_id: u64,
}

impl SaliencyMap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values.data()[row * self.width() + col]
    }

    /// Position of the first maximum in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let i = self.values.argmax();
        (i / self.width(), i % self.width())
    }

    pub fn energy(&self) -> f64 {
        self.values.sum()
    }
}

/// Sum `[C,H,W]` over channels into `[H,W]`, accumulating in `f64`.
pub fn channel_sum(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    let (c, plane) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    let mut acc = vec![0.0f64; plane];
    for ch in 0..c {
        for (a, &v) in acc.iter_mut().zip(&t.data()[ch * plane..(ch + 1) * plane]) {
            *a += f64::from(f(v));
        }
    }
    Tensor::from_f64(&t.shape()[1..], &acc)
}

// ---------------------------------------------------------------------------
// Rule kernels

#[derive(Clone, Copy)]
enum Part {
    Full,
    Pos,
    Neg,
}

/// One `coef · Σ_i a_i f(w)_ij` summand of a rule's numerator.
struct Term {
    coef: f64,
    part: Part,
    values: Vec<f64>,
}

fn rule_terms(rule: &Rule, x: Vec<f64>, bound_at: impl Fn(&InputBounds, bool) -> Vec<f64>) -> Vec<Term> {
    match rule {
        Rule::Z => vec![Term {
            coef: 1.0,
            part: Part::Full,
            values: x,
        }],
        Rule::ZPlus => vec![Term {
            coef: 1.0,
            part: Part::Pos,
            values: x,
        }],
        Rule::ZBeta(b) => vec![
            Term {
                coef: 1.0,
                part: Part::Full,
                values: x,
            },
            Term {
                coef: -1.0,
                part: Part::Pos,
                values: bound_at(b, false),
            },
            Term {
                coef: -1.0,
                part: Part::Neg,
                values: bound_at(b, true),
            },
        ],
    }
}

struct WeightParts {
    full: Vec<f64>,
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl WeightParts {
    fn new(w: &Tensor) -> Self {
        let full = w.to_f64();
        Self {
            pos: full.iter().map(|&v| v.max(0.0)).collect(),
            neg: full.iter().map(|&v| v.min(0.0)).collect(),
            full,
        }
    }

    fn get(&self, part: Part) -> &[f64] {
        match part {
            Part::Full => &self.full,
            Part::Pos => &self.pos,
            Part::Neg => &self.neg,
        }
    }
}

/// How inputs connect to outputs: `forward` computes `Σ_i a_i w_ij`,
/// `backward` computes `Σ_j w_ij s_j`.
trait Connectivity {
    fn forward(&self, a: &[f64], w: &[f64]) -> Vec<f64>;
    fn backward(&self, s: &[f64], w: &[f64]) -> Vec<f64>;
}

struct Dense {
    m: usize,
    n: usize,
}

impl Connectivity for Dense {
    fn forward(&self, a: &[f64], w: &[f64]) -> Vec<f64> {
        w.chunks(self.n)
            .map(|row| row.iter().zip(a).map(|(w, a)| w * a).sum())
            .collect()
    }

    fn backward(&self, s: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (row, &sj) in w.chunks(self.n).zip(s).take(self.m) {
            if sj == 0.0 {
                continue;
            }
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += wv * sj;
            }
        }
        out
    }
}

impl Connectivity for PaddedConv {
    fn forward(&self, a: &[f64], w: &[f64]) -> Vec<f64> {
        self.correlate(a, w)
    }

    fn backward(&self, s: &[f64], w: &[f64]) -> Vec<f64> {
        self.correlate_transpose(s, w)
    }
}

fn stabilize(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

fn redistribute(conn: &impl Connectivity, terms: &[Term], w: &WeightParts, rel_out: &[f64], eps: f64) -> Vec<f64> {
    let mut z = vec![0.0; rel_out.len()];
    for t in terms {
        for (zj, v) in z.iter_mut().zip(conn.forward(&t.values, w.get(t.part))) {
            *zj += t.coef * v;
        }
    }
    let s: Vec<f64> = rel_out
        .iter()
        .zip(&z)
        .map(|(&r, &zj)| if r == 0.0 { 0.0 } else { r / stabilize(zj, eps) })
        .collect();
    let mut rel_in = vec![0.0; terms[0].values.len()];
    for t in terms {
        let c = conn.backward(&s, w.get(t.part));
        for ((r, &a), cv) in rel_in.iter_mut().zip(&t.values).zip(c) {
            *r += t.coef * a * cv;
        }
    }
    rel_in
}

fn linear_rule(rule: &Rule, x: &Tensor, weights: &Tensor, rel_out: &[f64], eps: f64) -> Result<Vec<f64>> {
    let (m, n) = matrix_dims(weights, "propagate_linear")?;
    if x.len() != n {
        return Err(Error::Shape {
            op: "propagate_linear",
            dim: "input length",
            expected: n,
            found: x.len(),
        });
    }
    if rel_out.len() != m {
        return Err(Error::Shape {
            op: "propagate_linear",
            dim: "relevance length",
            expected: m,
            found: rel_out.len(),
        });
    }
    if let Rule::ZBeta(b) = rule {
        if b.channels() == 0 || n % b.channels() != 0 {
            return Err(Error::Shape {
                op: "propagate_linear",
                dim: "bound channels",
                expected: b.channels(),
                found: n,
            });
        }
    }
    let terms = rule_terms(rule, x.to_f64(), |b, upper| {
        let plane = n / b.channels();
        let src = if upper { &b.high } else { &b.low };
        (0..n).map(|i| f64::from(src[i / plane])).collect()
    });
    Ok(redistribute(
        &Dense { m, n },
        &terms,
        &WeightParts::new(weights),
        rel_out,
        eps,
    ))
}

fn conv_rule(
    rule: &Rule,
    x: &Tensor,
    weights: &Tensor,
    geom: &ConvGeometry,
    rel_out: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, f64)> {
    let [c, h, w] = x.shape() else {
        return Err(Error::Shape {
            op: "conv_as_linear_propagate",
            dim: "input rank",
            expected: 3,
            found: x.ndim(),
        });
    };
    if *c != geom.in_channels {
        return Err(Error::Shape {
            op: "conv_as_linear_propagate",
            dim: "input channels",
            expected: geom.in_channels,
            found: *c,
        });
    }
    if weights.shape() != geom.weight_shape() {
        return Err(Error::Geometry {
            op: "conv_as_linear_propagate",
            detail: format!(
                "weights {:?} do not match geometry {:?}",
                weights.shape(),
                geom.weight_shape()
            ),
        });
    }
    let conv = PaddedConv::new(*geom, *h, *w)?;
    if rel_out.len() != conv.out_len() {
        return Err(Error::Shape {
            op: "conv_as_linear_propagate",
            dim: "relevance length",
            expected: conv.out_len(),
            found: rel_out.len(),
        });
    }
    if let Rule::ZBeta(b) = rule {
        if b.channels() != *c && b.channels() != 1 {
            return Err(Error::Shape {
                op: "conv_as_linear_propagate",
                dim: "bound channels",
                expected: *c,
                found: b.channels(),
            });
        }
    }
    let xp = conv.pad(&x.to_f64(), |_| 0.0);
    // Bounds cover the padded border too; whatever lands there is leakage.
    let terms = rule_terms(rule, xp, |b, upper| {
        let src = if upper { &b.high } else { &b.low };
        let plane = conv.padded_h * conv.padded_w;
        (0..conv.padded_len())
            .map(|i| f64::from(src[if src.len() == 1 { 0 } else { i / plane }]))
            .collect()
    });
    let padded = redistribute(&conv, &terms, &WeightParts::new(weights), rel_out, eps);
    Ok(conv.crop(&padded))
}

/// One z-rule step through a dense layer.
pub fn propagate_linear(
    rule: &Rule,
    layer_input: &Tensor,
    weights: &Tensor,
    rel_out: &Tensor,
    epsilon: f32,
) -> Result<Tensor> {
    let rel = linear_rule(rule, layer_input, weights, &rel_out.to_f64(), f64::from(epsilon))?;
    Tensor::new(layer_input.shape(), rel.iter().map(|&v| v as f32).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvRelevance {
    pub relevance: Tensor,
    pub padding_leakage: f64,
}

/// One z-rule step through a convolution, treating it as a dense layer with
/// shared weights. Relevance landing on padded positions is reported as
/// leakage and dropped.
pub fn conv_as_linear_propagate(
    rule: &Rule,
    layer_input: &Tensor,
    weights: &Tensor,
    geom: &ConvGeometry,
    rel_out: &Tensor,
    epsilon: f32,
) -> Result<ConvRelevance> {
    let (rel, leak) = conv_rule(rule, layer_input, weights, geom, &rel_out.to_f64(), f64::from(epsilon))?;
    Ok(ConvRelevance {
        relevance: Tensor::from_f64(layer_input.shape(), &rel),
        padding_leakage: leak,
    })
}

// ---------------------------------------------------------------------------
// Whole-network passes

/// Result of propagating relevance from some layer down to the input.
#[derive(Debug, Clone)]
pub struct RelevancePass {
    /// `at_input[k]` is the relevance on the activation entering layer `k`,
    /// for every layer at or below the start layer.
    pub at_input: Vec<Tensor>,
    /// Sums of `at_input`, accumulated in `f64` before rounding.
    pub layer_sums: Vec<f64>,
    /// Total relevance placed on the start layer's output.
    pub start_total: f64,
    pub padding_leakage: f64,
}

impl RelevancePass {
    pub fn input_relevance(&self) -> &Tensor {
        &self.at_input[0]
    }

    pub fn input_total(&self) -> f64 {
        self.layer_sums[0]
    }

    /// `|Σ input + padding leakage − Σ start| / |Σ start|`: what the
    /// stabilizer swallowed.
    pub fn conservation_residual(&self) -> f64 {
        let kept = self.layer_sums[0] + self.padding_leakage;
        (kept - self.start_total).abs() / self.start_total.abs().max(f64::MIN_POSITIVE)
    }
}

fn first_parametric(view: &ModelView<'_>) -> Option<usize> {
    view.layers().iter().position(|l| l.kind.is_parametric())
}

/// Propagate `rel` (shaped like the output of layer `start`) down to the input.
pub fn lrp_pass(
    view: &ModelView<'_>,
    trace: &ForwardTrace,
    start: usize,
    rel: &Tensor,
    rules: &RuleConfig,
) -> Result<RelevancePass> {
    rules.validate()?;
    trace.check_model(view.model())?;
    let layers = view.layers();
    check_index("layer", start, layers.len())?;
    let out_shape = trace.output_of(start).shape();
    if rel.shape() != out_shape {
        return Err(Error::TraceMismatch(format!(
            "relevance shape {:?} differs from layer output {:?}",
            rel.shape(),
            out_shape
        )));
    }
    let eps = f64::from(rules.epsilon);
    let first = first_parametric(view);
    let mut current = rel.to_f64();
    let start_total: f64 = current.iter().sum();
    let mut at_input = vec![Tensor::zeros(&[1]); start + 1];
    let mut layer_sums = vec![0.0; start + 1];
    let mut leakage = 0.0;

    for k in (0..=start).rev() {
        let x = trace.input_of(k);
        let layer = &layers[k];
        let rule = if Some(k) == first {
            &rules.input_layer
        } else {
            &rules.default_rule
        };
        current = match &layer.kind {
            LayerKind::Linear { .. } => linear_rule(rule, x, view.weight(k).expect("linear weights"), &current, eps)?,
            LayerKind::Conv2d { geometry, .. } => {
                let (r, leak) = conv_rule(rule, x, view.weight(k).expect("conv weights"), geometry, &current, eps)?;
                leakage += leak;
                r
            }
            LayerKind::Relu | LayerKind::Flatten => current,
            LayerKind::MaxPool2d(_) => {
                let switches = trace
                    .switches(k)
                    .ok_or_else(|| Error::TraceMismatch(format!("no switches recorded for `{}`", layer.name)))?;
                let mut r = vec![0.0; x.len()];
                for (&src, &v) in switches.iter().zip(&current) {
                    r[src] += v;
                }
                r
            }
            LayerKind::AvgPool2d(pool) => {
                let &[c, h, w] = x.shape() else {
                    unreachable!("validated at load")
                };
                let (oh, ow) = pool.output_size(h, w)?;
                let share = 1.0 / (pool.window * pool.window) as f64;
                let mut r = vec![0.0; x.len()];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = current[(ch * oh + oy) * ow + ox] * share;
                            for idx in pool.window_indices((h, w), ch, oy, ox) {
                                r[idx] += v;
                            }
                        }
                    }
                }
                r
            }
        };
        if current.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: layer.name.clone(),
            });
        }
        layer_sums[k] = current.iter().sum();
        at_input[k] = Tensor::from_f64(x.shape(), &current);
    }
    Ok(RelevancePass {
        at_input,
        layer_sums,
        start_total,
        padding_leakage: leakage,
    })
}

impl SaliencyMap {
    pub(crate) fn from_input_relevance(
        rel: &Tensor,
        method: Method,
        target: String,
        padding_leakage: f64,
        trace_id: u64,
    ) -> Self {
        Self {
            values: channel_sum(rel, |v| v),
            method,
            target,
            total_relevance: rel.sum(),
            padding_leakage,
            trace_id,
        }
    }
}

/// Explain the logits described by `out_rel`.
pub fn lrp_explain(
    model: &ModelContainer,
    trace: &ForwardTrace,
    out_rel: &OutputRelevance,
    rules: &RuleConfig,
) -> Result<SaliencyMap> {
    let pass = lrp_pass(&model.view(), trace, model.layers().len() - 1, out_rel.values(), rules)?;
    Ok(SaliencyMap::from_input_relevance(
        pass.input_relevance(),
        Method::Lrp,
        out_rel.target().to_string(),
        pass.padding_leakage,
        trace.id(),
    ))
}

/// Result of a reverse-mode pass.
#[derive(Debug, Clone)]
pub struct GradientPass {
    /// `at_input[k]` is the backward signal on the activation entering layer `k`.
    pub at_input: Vec<Tensor>,
}

impl GradientPass {
    pub fn input_gradient(&self) -> &Tensor {
        &self.at_input[0]
    }
}

/// Chain rule from `seed` on the output of layer `start` down to the input,
/// through the recorded masks and switches. With `guided`, the signal leaving
/// each ReLU is additionally clipped at zero.
pub fn gradient_pass(
    view: &ModelView<'_>,
    trace: &ForwardTrace,
    start: usize,
    seed: &Tensor,
    guided: bool,
) -> Result<GradientPass> {
    trace.check_model(view.model())?;
    let layers = view.layers();
    check_index("layer", start, layers.len())?;
    if seed.shape() != trace.output_of(start).shape() {
        return Err(Error::TraceMismatch("seed shape differs from layer output".into()));
    }
    let mut g = seed.to_f64();
    let mut at_input = vec![Tensor::zeros(&[1]); start + 1];
    for k in (0..=start).rev() {
        let x = trace.input_of(k);
        g = match &layers[k].kind {
            LayerKind::Linear { .. } => {
                let w = view.weight(k).expect("linear weights");
                let (m, n) = matrix_dims(w, "gradient")?;
                Dense { m, n }.backward(&g, &w.to_f64())
            }
            LayerKind::Conv2d { geometry, .. } => {
                let w = view.weight(k).expect("conv weights");
                let conv = PaddedConv::new(*geometry, x.shape()[1], x.shape()[2])?;
                conv.crop(&conv.correlate_transpose(&g, &w.to_f64())).0
            }
            LayerKind::Relu => {
                let mask = trace.mask(k).expect("relu mask");
                g.iter()
                    .zip(mask.data())
                    .map(|(&v, &m)| {
                        let v = v * f64::from(m);
                        if guided {
                            v.max(0.0)
                        } else {
                            v
                        }
                    })
                    .collect()
            }
            LayerKind::Flatten => g,
            LayerKind::MaxPool2d(_) => {
                let switches = trace.switches(k).expect("pool switches");
                let mut r = vec![0.0; x.len()];
                for (&src, &v) in switches.iter().zip(&g) {
                    r[src] += v;
                }
                r
            }
            LayerKind::AvgPool2d(pool) => {
                let &[c, h, w] = x.shape() else {
                    unreachable!("validated at load")
                };
                let (oh, ow) = pool.output_size(h, w)?;
                let share = 1.0 / (pool.window * pool.window) as f64;
                let mut r = vec![0.0; x.len()];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = g[(ch * oh + oy) * ow + ox] * share;
                            for idx in pool.window_indices((h, w), ch, oy, ox) {
                                r[idx] += v;
                            }
                        }
                    }
                }
                r
            }
        };
        at_input[k] = Tensor::from_f64(x.shape(), &g);
    }
    Ok(GradientPass { at_input })
}

/// Gradient of logit `target` with respect to the input, `[C,H,W]`.
pub fn input_gradient(model: &ModelContainer, trace: &ForwardTrace, target: usize, guided: bool) -> Result<Tensor> {
    let m = model.num_classes();
    check_index("class", target, m)?;
    let mut seed = Tensor::zeros(&[m]);
    seed.data_mut()[target] = 1.0;
    let pass = gradient_pass(&model.view(), trace, model.layers().len() - 1, &seed, guided)?;
    Ok(pass.at_input.into_iter().next().expect("at least one layer"))
}

fn gradient_map(model: &ModelContainer, trace: &ForwardTrace, target: usize, guided: bool) -> Result<SaliencyMap> {
    let g = input_gradient(model, trace, target, guided)?;
    Ok(SaliencyMap {
        values: channel_sum(&g, f32::abs),
        method: if guided { Method::Guided } else { Method::Gradient },
        target: Target::Class { index: target }.to_string(),
        total_relevance: g.sum(),
        padding_leakage: 0.0,
        trace_id: trace.id(),
    })
}

/// Channel-summed absolute gradient of the target logit.
pub fn vanilla_gradient(model: &ModelContainer, trace: &ForwardTrace, target: usize) -> Result<SaliencyMap> {
    gradient_map(model, trace, target, false)
}

pub fn guided_backprop(model: &ModelContainer, trace: &ForwardTrace, target: usize) -> Result<SaliencyMap> {
    gradient_map(model, trace, target, true)
}

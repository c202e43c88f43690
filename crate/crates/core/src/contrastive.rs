//! Contrastive explanations: propagate the target signal and a dual signal
//! modelling the opposite concept through the same forward trace, then keep
//! `max(0, R − R_dual)` on the channel-summed maps.
//!
//! Two duals are supported. `Clrp1` spreads the target score uniformly over
//! every other class. `Clrp2` propagates the same score through a view of the
//! model whose target row in the explained layer is negated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::ForwardTrace;
use crate::model::{LayerKind, ModelContainer, ModelView};
use crate::parallel;
use crate::relevance::{lrp_pass, Method, OutputRelevance, RuleConfig, SaliencyMap, Target};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Clrp1,
    Clrp2,
}

impl Variant {
    pub fn method(self) -> Method {
        match self {
            Variant::Clrp1 => Method::Clrp1,
            Variant::Clrp2 => Method::Clrp2,
        }
    }
}

/// Which neuron is explained and how its opposite concept is built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DualConceptSpec {
    pub variant: Variant,
    pub layer: String,
    pub neuron: usize,
}

impl DualConceptSpec {
    pub fn output(model: &ModelContainer, variant: Variant, class: usize) -> Self {
        Self {
            variant,
            layer: model.layers().last().expect("non-empty model").name.clone(),
            neuron: class,
        }
    }

    /// Resolve the layer index, checking the variant's constraints.
    fn resolve(&self, model: &ModelContainer) -> Result<usize> {
        let k = model.layer_index(&self.layer)?;
        let layer = &model.layers()[k];
        if !layer.kind.is_parametric() {
            return Err(Error::InvalidArgument(format!(
                "layer `{}` has no incoming linear weights",
                layer.name
            )));
        }
        let width = model.shape_at(k + 1).iter().product::<usize>();
        if self.neuron >= width {
            return Err(Error::OutOfRange {
                what: "neuron",
                index: self.neuron,
                limit: width,
            });
        }
        if self.variant == Variant::Clrp1 {
            if k + 1 != model.layers().len() {
                return Err(Error::InvalidArgument(format!(
                    "CLRP1 needs an output-layer target; `{}` is intermediate",
                    layer.name
                )));
            }
            if width < 2 {
                return Err(Error::InvalidArgument("CLRP1 needs at least two output neurons".into()));
            }
        }
        Ok(k)
    }
}

/// Final map plus the two component maps it was computed from.
#[derive(Debug, Clone)]
pub struct ContrastiveMap {
    pub map: SaliencyMap,
    pub positive: SaliencyMap,
    pub dual: SaliencyMap,
}

/// Target score moved uniformly onto the other `m − 1` classes.
pub fn dual_output_relevance_clrp1(logits: &Tensor, target: usize) -> Result<OutputRelevance> {
    let m = logits.len();
    if m < 2 {
        return Err(Error::InvalidArgument("CLRP1 needs at least two classes".into()));
    }
    if target >= m {
        return Err(Error::OutOfRange {
            what: "class",
            index: target,
            limit: m,
        });
    }
    let share = logits.data()[target] / (m - 1) as f32;
    let mut values = Tensor::full(logits.shape(), share);
    values.data_mut()[target] = 0.0;
    Ok(OutputRelevance::custom(values, Target::Clrp1Dual { index: target }))
}

/// Copy of `weights` with the fan-in of output `row` multiplied by −1. For a
/// `[M,N]` matrix that is row `row`; for `[K,C,kh,kw]` conv weights it is the
/// kernel of output channel `row`.
pub fn negate_row(weights: &Tensor, row: usize) -> Result<Tensor> {
    let rows = weights.shape()[0];
    if row >= rows {
        return Err(Error::OutOfRange {
            what: "row",
            index: row,
            limit: rows,
        });
    }
    let width = weights.len() / rows;
    let mut out = weights.clone();
    for v in &mut out.data_mut()[row * width..(row + 1) * width] {
        *v = -*v;
    }
    Ok(out)
}

/// The model seen with row `target` of the final weight matrix negated.
pub fn clrp2_negated_last_layer(model: &ModelContainer, target: usize) -> Result<ModelView<'_>> {
    let k = model.layers().len() - 1;
    negated_view(model, k, target)
}

fn negated_view(model: &ModelContainer, k: usize, neuron: usize) -> Result<ModelView<'_>> {
    let layer = &model.layers()[k];
    let weight = layer
        .kind
        .weight()
        .ok_or_else(|| Error::InvalidArgument(format!("layer `{}` has no incoming linear weights", layer.name)))?;
    let row = match &layer.kind {
        LayerKind::Conv2d { .. } => {
            let out = model.shape_at(k + 1);
            neuron / (out[1] * out[2])
        }
        _ => neuron,
    };
    ModelView::with_weight(model, k, negate_row(weight, row)?)
}

fn one_hot(shape: &[usize], index: usize, value: f32) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut()[index] = value;
    t
}

fn clipped_difference(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&r, &d)| (r - d).max(0.0)).collect();
    Tensor::new(a.shape(), data).expect("maps share a shape")
}

/// Explain neuron `spec.neuron` of `spec.layer` contrastively.
pub fn contrastive_explain(
    model: &ModelContainer,
    trace: &ForwardTrace,
    spec: &DualConceptSpec,
    rules: &RuleConfig,
) -> Result<ContrastiveMap> {
    trace.check_model(model)?;
    let k = spec.resolve(model)?;
    let out = trace.output_of(k);
    let score = out.data()[spec.neuron];
    let is_output = k + 1 == model.layers().len();
    let target = if is_output {
        Target::Class { index: spec.neuron }
    } else {
        Target::Neuron {
            layer: spec.layer.clone(),
            index: spec.neuron,
        }
    };
    if !(score > 0.0) {
        return Err(if is_output {
            Error::NonPositiveScore {
                target: target.to_string(),
                score,
            }
        } else {
            Error::InactiveNeuron {
                layer: spec.layer.clone(),
                neuron: spec.neuron,
                value: score,
            }
        });
    }

    let signal = one_hot(out.shape(), spec.neuron, score);
    let view = model.view();
    let (dual_view, dual_signal) = match spec.variant {
        Variant::Clrp1 => (
            model.view(),
            dual_output_relevance_clrp1(out, spec.neuron)?.values().clone(),
        ),
        Variant::Clrp2 => (negated_view(model, k, spec.neuron)?, signal.clone()),
    };
    let (pos, dual) = parallel::join(
        || lrp_pass(&view, trace, k, &signal, rules),
        || lrp_pass(&dual_view, trace, k, &dual_signal, rules),
    );
    let (pos, dual) = (pos?, dual?);

    let label = target.to_string();
    let positive = SaliencyMap::from_input_relevance(
        pos.input_relevance(),
        Method::Lrp,
        label.clone(),
        pos.padding_leakage,
        trace.id(),
    );
    let dual = SaliencyMap::from_input_relevance(
        dual.input_relevance(),
        spec.variant.method(),
        format!("dual of {label}"),
        dual.padding_leakage,
        trace.id(),
    );
    let map = SaliencyMap {
        values: clipped_difference(&positive.values, &dual.values),
        method: spec.variant.method(),
        target: label,
        total_relevance: positive.total_relevance - dual.total_relevance,
        padding_leakage: positive.padding_leakage + dual.padding_leakage,
        trace_id: trace.id(),
    };
    Ok(ContrastiveMap { map, positive, dual })
}

/// Class-discriminative explanation of output class `target`.
pub fn clrp_explain(
    model: &ModelContainer,
    trace: &ForwardTrace,
    target: usize,
    variant: Variant,
    rules: &RuleConfig,
) -> Result<ContrastiveMap> {
    contrastive_explain(model, trace, &DualConceptSpec::output(model, variant, target), rules)
}

/// CLRP2 explanation of an intermediate neuron, seeded with its activation.
pub fn neuron_explain(
    model: &ModelContainer,
    trace: &ForwardTrace,
    layer: &str,
    neuron: usize,
    rules: &RuleConfig,
) -> Result<ContrastiveMap> {
    let spec = DualConceptSpec {
        variant: Variant::Clrp2,
        layer: layer.to_string(),
        neuron,
    };
    contrastive_explain(model, trace, &spec, rules)
}

//! CNN inference that records per-instance structure (ReLU masks, pooling
//! switches) and turns it into pixel-wise explanations: layer-wise relevance
//! propagation, its contrastive variants, gradient baselines, and the
//! pointing-game and ablation evaluations built on them.

// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contrastive;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod inference;
pub mod model;
pub mod parallel;
pub mod relevance;
pub mod tensor;

pub use contrastive::{clrp_explain, neuron_explain, ContrastiveMap, DualConceptSpec, Variant};
pub use error::{Error, Result};
pub use inference::{forward, predict_topk, preprocess, ForwardTrace, Prediction};
pub use model::{load_model, save_model, InputBounds, Layer, LayerKind, ModelContainer, ModelView, Preprocessing};
pub use parallel::Execution;
pub use relevance::{
    guided_backprop, lrp_explain, vanilla_gradient, Method, OutputRelevance, Rule, RuleConfig, SaliencyMap,
};
pub use tensor::{ConvGeometry, PoolGeometry, Tensor};

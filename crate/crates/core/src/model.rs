//! Model container: `manifest.json` plus a flat `weights.bin`.
//!
//! The manifest lists layers in execution order. Parametric layers reference
//! their weight and bias blobs by byte offset and shape into `weights.bin`,
//! which holds little-endian `f32` values, row-major, concatenated in
//! manifest order. See `docs/manifest.schema.json` for the full schema.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, PoolGeometry, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// Per-channel normalization applied to `[0,1]` pixel values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Preprocessing {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Box of normalized values reachable from pixels in `[0,1]`.
    pub fn pixel_bounds(&self) -> InputBounds {
        InputBounds {
            low: self.mean.iter().zip(&self.std).map(|(m, s)| (0.0 - m) / s).collect(),
            high: self.mean.iter().zip(&self.std).map(|(m, s)| (1.0 - m) / s).collect(),
        }
    }
}

/// Per-channel `[low, high]` domain of the network input, in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBounds {
    pub low: Vec<f32>,
    pub high: Vec<f32>,
}

impl InputBounds {
    pub fn uniform(channels: usize, low: f32, high: f32) -> Self {
        Self {
            low: vec![low; channels],
            high: vec![high; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.low.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.low.len() != self.high.len() || self.low.is_empty() {
            return Err(Error::InvalidArgument(
                "input bounds need one low and one high value per channel".into(),
            ));
        }
        for (c, (&l, &h)) in self.low.iter().zip(&self.high).enumerate() {
            if !(l <= 0.0 && 0.0 <= h) {
                return Err(Error::InvalidArgument(format!(
                    "channel {c} bounds [{l}, {h}] must satisfy low <= 0 <= high"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d {
        geometry: ConvGeometry,
        weight: Tensor,
        bias: Tensor,
    },
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    Relu,
    MaxPool2d(PoolGeometry),
    AvgPool2d(PoolGeometry),
    Flatten,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "Conv2d",
            LayerKind::Linear { .. } => "Linear",
            LayerKind::Relu => "ReLU",
            LayerKind::MaxPool2d(_) => "MaxPool2d",
            LayerKind::AvgPool2d(_) => "AvgPool2d",
            LayerKind::Flatten => "Flatten",
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            LayerKind::Conv2d { weight, .. } | LayerKind::Linear { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            LayerKind::Conv2d { bias, .. } | LayerKind::Linear { bias, .. } => Some(bias),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn conv2d(name: impl Into<String>, geometry: ConvGeometry, weight: Tensor, bias: Tensor) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv2d { geometry, weight, bias },
        }
    }

    pub fn linear(name: impl Into<String>, weight: Tensor, bias: Tensor) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Linear { weight, bias },
        }
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Relu,
        }
    }

    pub fn max_pool(name: impl Into<String>, pool: PoolGeometry) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::MaxPool2d(pool),
        }
    }

    pub fn avg_pool(name: impl Into<String>, pool: PoolGeometry) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::AvgPool2d(pool),
        }
    }

    pub fn flatten(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Flatten,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.kind.weight().map_or(0, Tensor::len) + self.kind.bias().map_or(0, Tensor::len)
    }

    /// Output shape for the given input shape, checking the declared geometry.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let chain = |detail: String| Error::ShapeChain {
            layer: self.name.clone(),
            detail,
        };
        match &self.kind {
            LayerKind::Conv2d { geometry, weight, bias } => {
                let &[c, h, w] = input else {
                    return Err(chain(format!("Conv2d needs a [C,H,W] input, got {input:?}")));
                };
                if c != geometry.in_channels {
                    return Err(chain(format!(
                        "declares {} input channels but receives {c}",
                        geometry.in_channels
                    )));
                }
                self.check_blob("weight", weight, &geometry.weight_shape())?;
                self.check_blob("bias", bias, &[geometry.out_channels])?;
                let (oh, ow) = geometry.output_size(h, w).map_err(|e| chain(e.to_string()))?;
                Ok(vec![geometry.out_channels, oh, ow])
            }
            LayerKind::Linear { weight, bias } => {
                let &[n] = input else {
                    return Err(chain(format!("Linear needs a flat input, got {input:?}")));
                };
                let [m, k] = weight.shape() else {
                    return Err(Error::BlobShape {
                        layer: self.name.clone(),
                        blob: "weight",
                        expected: vec![bias.len(), n],
                        found: weight.shape().to_vec(),
                    });
                };
                if *k != n {
                    return Err(chain(format!("declares {k} input features but receives {n}")));
                }
                self.check_blob("bias", bias, &[*m])?;
                Ok(vec![*m])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2d(pool) | LayerKind::AvgPool2d(pool) => {
                let &[c, h, w] = input else {
                    return Err(chain(format!("pooling needs a [C,H,W] input, got {input:?}")));
                };
                let (oh, ow) = pool.output_size(h, w).map_err(|e| chain(e.to_string()))?;
                Ok(vec![c, oh, ow])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn check_blob(&self, blob: &'static str, t: &Tensor, expected: &[usize]) -> Result<()> {
        if t.shape() == expected {
            Ok(())
        } else {
            Err(Error::BlobShape {
                layer: self.name.clone(),
                blob,
                expected: expected.to_vec(),
                found: t.shape().to_vec(),
            })
        }
    }
}

/// Validated sequential model. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    layers: Vec<Layer>,
    input_shape: [usize; 3],
    class_names: Vec<String>,
    preprocessing: Preprocessing,
    input_bounds: InputBounds,
    /// `shapes[k]` is the input shape of layer `k`; the last entry is the
    /// logit shape.
    shapes: Vec<Vec<usize>>,
}

impl ModelContainer {
    /// Model with identity preprocessing, `[0,1]` input bounds and generated
    /// class names.
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        let shapes = chain_shapes(&input_shape, &layers)?;
        let m = shapes.last().map_or(0, |s| s[0]);
        let preprocessing = Preprocessing::identity(input_shape[0]);
        let model = Self {
            input_bounds: preprocessing.pixel_bounds(),
            layers,
            input_shape,
            class_names: (0..m).map(|i| format!("class{i}")).collect(),
            preprocessing,
            shapes,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        self.class_names = names;
        self.validate()?;
        Ok(self)
    }

    /// Replaces the preprocessing and derives input bounds from it.
    pub fn with_preprocessing(mut self, preprocessing: Preprocessing) -> Result<Self> {
        self.input_bounds = preprocessing.pixel_bounds();
        self.preprocessing = preprocessing;
        self.validate()?;
        Ok(self)
    }

    pub fn with_input_bounds(mut self, bounds: InputBounds) -> Result<Self> {
        self.input_bounds = bounds;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let c = self.input_shape[0];
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::Manifest("model has no layers".into()))?;
        if !matches!(last.kind, LayerKind::Linear { .. }) {
            return Err(Error::ShapeChain {
                layer: last.name.clone(),
                detail: "the final layer must be Linear (the logit layer)".into(),
            });
        }
        let mut seen = HashSet::new();
        for layer in &self.layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::Manifest(format!("duplicate layer name `{}`", layer.name)));
            }
        }
        let m = self.num_classes();
        if self.class_names.len() != m {
            return Err(Error::Manifest(format!(
                "{} class names for {m} logits",
                self.class_names.len()
            )));
        }
        let p = &self.preprocessing;
        if p.mean.len() != c || p.std.len() != c {
            return Err(Error::Manifest(format!("preprocessing needs {c} mean and std values")));
        }
        if p.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Manifest("preprocessing std must be positive".into()));
        }
        if self.input_bounds.channels() != c {
            return Err(Error::Manifest(format!("input bounds need {c} channels")));
        }
        self.input_bounds.validate().map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn preprocessing(&self) -> &Preprocessing {
        &self.preprocessing
    }

    pub fn input_bounds(&self) -> &InputBounds {
        &self.input_bounds
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s[0])
    }

    /// Input shape of layer `k`; `k == layers().len()` gives the logit shape.
    pub fn shape_at(&self, k: usize) -> &[usize] {
        &self.shapes[k]
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }
}

/// Read-only view of a model in which at most one parametric layer's weight
/// tensor is replaced. All other layers are borrowed from the container.
#[derive(Debug, Clone)]
pub struct ModelView<'a> {
    model: &'a ModelContainer,
    replaced: Option<(usize, Tensor)>,
}

impl<'a> ModelView<'a> {
    pub fn new(model: &'a ModelContainer) -> Self {
        Self { model, replaced: None }
    }

    /// Substitute the weight tensor of layer `index`; the shape must match.
    pub fn with_weight(model: &'a ModelContainer, index: usize, weight: Tensor) -> Result<Self> {
        let layer = model.layers.get(index).ok_or(Error::OutOfRange {
            what: "layer",
            index,
            limit: model.layers.len(),
        })?;
        let current = layer
            .kind
            .weight()
            .ok_or_else(|| Error::InvalidArgument(format!("layer `{}` has no weights", layer.name)))?;
        if current.shape() != weight.shape() {
            return Err(Error::BlobShape {
                layer: layer.name.clone(),
                blob: "weight",
                expected: current.shape().to_vec(),
                found: weight.shape().to_vec(),
            });
        }
        Ok(Self {
            model,
            replaced: Some((index, weight)),
        })
    }

    pub fn model(&self) -> &'a ModelContainer {
        self.model
    }

    pub fn layers(&self) -> &'a [Layer] {
        &self.model.layers
    }

    /// Weight tensor of layer `index` as seen through this view.
    pub fn weight(&self, index: usize) -> Option<&Tensor> {
        match &self.replaced {
            Some((k, w)) if *k == index => Some(w),
            _ => self.model.layers.get(index)?.kind.weight(),
        }
    }

    pub fn replaced_layer(&self) -> Option<usize> {
        self.replaced.as_ref().map(|(k, _)| *k)
    }
}

impl ModelContainer {
    pub fn view(&self) -> ModelView<'_> {
        ModelView::new(self)
    }
}

fn chain_shapes(input_shape: &[usize; 3], layers: &[Layer]) -> Result<Vec<Vec<usize>>> {
    if input_shape.contains(&0) {
        return Err(Error::Manifest(format!(
            "input shape {input_shape:?} has a zero dimension"
        )));
    }
    let mut shapes = vec![input_shape.to_vec()];
    for layer in layers {
        let next = layer.output_shape(shapes.last().unwrap())?;
        shapes.push(next);
    }
    Ok(shapes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    input_shape: Vec<usize>,
    class_names: Vec<String>,
    preprocessing: Preprocessing,
    input_bounds: InputBounds,
    #[serde(default = "default_weights_file")]
    weights_file: String,
    layers: Vec<RawLayer>,
}

fn default_weights_file() -> String {
    "weights.bin".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawLayer {
    kind: String,
    name: String,
    #[serde(flatten)]
    params: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobRef {
    /// Byte offset into the weights file.
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvParams {
    in_channels: usize,
    out_channels: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
    weight: BlobRef,
    bias: BlobRef,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearParams {
    in_features: usize,
    out_features: usize,
    weight: BlobRef,
    bias: BlobRef,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolParams {
    window: usize,
    stride: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoParams {}

fn params<T: serde::de::DeserializeOwned>(raw: &RawLayer) -> Result<T> {
    serde_json::from_value(Value::Object(raw.params.clone()))
        .map_err(|e| Error::Manifest(format!("layer `{}`: {e}", raw.name)))
}

fn to_params<T: Serialize>(p: &T) -> Map<String, Value> {
    match serde_json::to_value(p).expect("layer parameters serialize") {
        Value::Object(map) => map,
        _ => unreachable!("layer parameters are a struct"),
    }
}

fn read_blob(weights: &[u8], layer: &str, blob: &'static str, r: &BlobRef) -> Result<Tensor> {
    let missing = |detail: String| Error::MissingBlob {
        layer: layer.to_string(),
        blob,
        detail,
    };
    if !r.offset.is_multiple_of(4) {
        return Err(missing(format!("offset {} is not 4-byte aligned", r.offset)));
    }
    let count: usize = r.shape.iter().product();
    let end = r.offset + count * 4;
    if r.shape.is_empty() || count == 0 {
        return Err(missing(format!("has empty shape {:?}", r.shape)));
    }
    if end > weights.len() {
        return Err(missing(format!(
            "bytes {}..{end} lie beyond the {}-byte weights file",
            r.offset,
            weights.len()
        )));
    }
    let data = weights[r.offset..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(&r.shape, data)
}

/// Resolve a container path: a directory holding `manifest.json`, or the
/// manifest file itself.
fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Load and fully validate a model container.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelContainer> {
    let manifest_file = manifest_path(path.as_ref());
    let text = fs::read_to_string(&manifest_file)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    let dir = manifest_file.parent().unwrap_or_else(|| Path::new("."));
    let weights = fs::read(dir.join(&manifest.weights_file))?;
    from_manifest(manifest, &weights)
}

fn from_manifest(manifest: Manifest, weights: &[u8]) -> Result<ModelContainer> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let input_shape: [usize; 3] = manifest
        .input_shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::Manifest(format!("input_shape {:?} must be [C,H,W]", manifest.input_shape)))?;
    if manifest.layers.is_empty() {
        return Err(Error::Manifest("model has no layers".into()));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for raw in &manifest.layers {
        let kind = match raw.kind.as_str() {
            "Conv2d" => {
                let p: ConvParams = params(raw)?;
                LayerKind::Conv2d {
                    geometry: ConvGeometry {
                        in_channels: p.in_channels,
                        out_channels: p.out_channels,
                        kernel_h: p.kernel[0],
                        kernel_w: p.kernel[1],
                        stride_h: p.stride[0],
                        stride_w: p.stride[1],
                        pad_h: p.padding[0],
                        pad_w: p.padding[1],
                    },
                    weight: read_blob(weights, &raw.name, "weight", &p.weight)?,
                    bias: read_blob(weights, &raw.name, "bias", &p.bias)?,
                }
            }
            "Linear" => {
                let p: LinearParams = params(raw)?;
                let weight = read_blob(weights, &raw.name, "weight", &p.weight)?;
                let bias = read_blob(weights, &raw.name, "bias", &p.bias)?;
                let expected = [p.out_features, p.in_features];
                if weight.shape() != expected {
                    return Err(Error::BlobShape {
                        layer: raw.name.clone(),
                        blob: "weight",
                        expected: expected.to_vec(),
                        found: weight.shape().to_vec(),
                    });
                }
                LayerKind::Linear { weight, bias }
            }
            "ReLU" => {
                params::<NoParams>(raw)?;
                LayerKind::Relu
            }
            "MaxPool2d" => {
                let p: PoolParams = params(raw)?;
                LayerKind::MaxPool2d(PoolGeometry::new(p.window, p.stride))
            }
            "AvgPool2d" => {
                let p: PoolParams = params(raw)?;
                LayerKind::AvgPool2d(PoolGeometry::new(p.window, p.stride))
            }
            "Flatten" => {
                params::<NoParams>(raw)?;
                LayerKind::Flatten
            }
            other => {
                return Err(Error::UnsupportedLayer {
                    layer: raw.name.clone(),
                    kind: other.to_string(),
                })
            }
        };
        layers.push(Layer {
            name: raw.name.clone(),
            kind,
        });
    }
    let model = ModelContainer::new(input_shape, layers)?
        .with_class_names(manifest.class_names)?
        .with_preprocessing(manifest.preprocessing)?
        .with_input_bounds(manifest.input_bounds)?;
    Ok(model)
}

/// Write `manifest.json` and `weights.bin` into `dir` (created if missing).
pub fn save_model(model: &ModelContainer, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut blob = |t: &Tensor| {
        let r = BlobRef {
            offset: bytes.len(),
            shape: t.shape().to_vec(),
        };
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        r
    };
    let mut raw_layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let params = match &layer.kind {
            LayerKind::Conv2d {
                geometry: g,
                weight,
                bias,
            } => to_params(&ConvParams {
                in_channels: g.in_channels,
                out_channels: g.out_channels,
                kernel: [g.kernel_h, g.kernel_w],
                stride: [g.stride_h, g.stride_w],
                padding: [g.pad_h, g.pad_w],
                weight: blob(weight),
                bias: blob(bias),
            }),
            LayerKind::Linear { weight, bias } => to_params(&LinearParams {
                in_features: weight.shape()[1],
                out_features: weight.shape()[0],
                weight: blob(weight),
                bias: blob(bias),
            }),
            LayerKind::MaxPool2d(p) | LayerKind::AvgPool2d(p) => to_params(&PoolParams {
                window: p.window,
                stride: p.stride,
            }),
            LayerKind::Relu | LayerKind::Flatten => Map::new(),
        };
        raw_layers.push(RawLayer {
            kind: layer.kind.tag().to_string(),
            name: layer.name.clone(),
            params,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape.to_vec(),
        class_names: model.class_names.clone(),
        preprocessing: model.preprocessing.clone(),
        input_bounds: model.input_bounds.clone(),
        weights_file: default_weights_file(),
        layers: raw_layers,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    fs::write(dir.join(&manifest.weights_file), bytes)?;
    Ok(())
}

/// Per-layer table of kind, output shape and parameter count.
pub fn model_info(model: &ModelContainer) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "input {:?}, {} classes", model.input_shape, model.num_classes());
    let _ = writeln!(
        out,
        "{:<4} {:<12} {:<10} {:<16} {:>10}",
        "#", "name", "kind", "output", "params"
    );
    for (k, layer) in model.layers.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:<4} {:<12} {:<10} {:<16} {:>10}",
            k,
            layer.name,
            layer.kind.tag(),
            format!("{:?}", model.shapes[k + 1]),
            layer.parameter_count()
        );
    }
    let _ = writeln!(out, "total parameters: {}", model.parameter_count());
    out
}

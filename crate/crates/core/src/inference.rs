//! Forward pass that records the instance-specific structure of one input:
//! every layer's input activation, the ReLU masks and the max-pool switches.

use std::sync::atomic::{AtomicU64, Ordering};

use image::RgbImage;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelContainer, ModelView};
use crate::tensor::{avgpool_forward, conv2d_forward, fc_forward, maxpool_forward, relu_forward, Tensor};

static NEXT_TRACE_ID: AtomicU64 = AtomicU64::new(1);

/// What a layer leaves behind for the backward passes.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerRecord {
    None,
    ReluMask(Tensor),
    Switches(Vec<usize>),
}

/// Activations and structure information of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    id: u64,
    inputs: Vec<Tensor>,
    records: Vec<LayerRecord>,
    logits: Tensor,
}

impl PartialEq for ForwardTrace {
    /// Compares recorded values; the per-call identity is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.inputs == other.inputs && self.records == other.records && self.logits == other.logits
    }
}

impl ForwardTrace {
    /// Unique per forward call; two explanations computed from the same trace
    /// carry the same id.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Activation entering layer `k`.
    pub fn input_of(&self, k: usize) -> &Tensor {
        &self.inputs[k]
    }

    /// Activation leaving layer `k`.
    pub fn output_of(&self, k: usize) -> &Tensor {
        self.inputs.get(k + 1).unwrap_or(&self.logits)
    }

    pub fn record(&self, k: usize) -> &LayerRecord {
        &self.records[k]
    }

    pub fn mask(&self, k: usize) -> Option<&Tensor> {
        match &self.records[k] {
            LayerRecord::ReluMask(m) => Some(m),
            _ => None,
        }
    }

    pub fn switches(&self, k: usize) -> Option<&[usize]> {
        match &self.records[k] {
            LayerRecord::Switches(s) => Some(s),
            _ => None,
        }
    }

    pub(crate) fn check_model(&self, model: &ModelContainer) -> Result<()> {
        if self.len() != model.layers().len() {
            return Err(Error::TraceMismatch(format!(
                "trace has {} layers, model has {}",
                self.len(),
                model.layers().len()
            )));
        }
        for k in 0..self.len() {
            if self.inputs[k].shape() != model.shape_at(k) {
                return Err(Error::TraceMismatch(format!(
                    "layer `{}` input shape {:?} differs from model {:?}",
                    model.layers()[k].name,
                    self.inputs[k].shape(),
                    model.shape_at(k)
                )));
            }
        }
        Ok(())
    }
}

/// Apply layer `k` of `view` to `input`.
pub fn apply_layer(view: &ModelView<'_>, k: usize, input: &Tensor) -> Result<(Tensor, LayerRecord)> {
    let layer = &view.layers()[k];
    let weight = || view.weight(k).expect("parametric layer has weights");
    Ok(match &layer.kind {
        LayerKind::Conv2d { geometry, bias, .. } => {
            (conv2d_forward(input, weight(), bias, geometry)?, LayerRecord::None)
        }
        LayerKind::Linear { bias, .. } => (fc_forward(input, weight(), bias)?, LayerRecord::None),
        LayerKind::Relu => {
            let (out, mask) = relu_forward(input);
            (out, LayerRecord::ReluMask(mask))
        }
        LayerKind::MaxPool2d(pool) => {
            let (out, switches) = maxpool_forward(input, *pool)?;
            (out, LayerRecord::Switches(switches))
        }
        LayerKind::AvgPool2d(pool) => (avgpool_forward(input, *pool)?, LayerRecord::None),
        LayerKind::Flatten => (input.reshape(&[input.len()])?, LayerRecord::None),
    })
}

pub fn forward(model: &ModelContainer, input: &Tensor) -> Result<ForwardTrace> {
    forward_view(&model.view(), input)
}

/// Forward pass through a (possibly weight-substituted) model view.
pub fn forward_view(view: &ModelView<'_>, input: &Tensor) -> Result<ForwardTrace> {
    let model = view.model();
    let expected = model.input_shape();
    if input.shape() != expected {
        return Err(Error::TraceMismatch(format!(
            "input shape {:?} differs from model input {:?}",
            input.shape(),
            expected
        )));
    }
    let n = model.layers().len();
    let mut inputs = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    let mut current = input.clone();
    for k in 0..n {
        let (out, record) = apply_layer(view, k, &current)?;
        inputs.push(std::mem::replace(&mut current, out));
        records.push(record);
    }
    Ok(ForwardTrace {
        id: NEXT_TRACE_ID.fetch_add(1, Ordering::Relaxed),
        inputs,
        records,
        logits: current,
    })
}

/// Map an 8-bit RGB image to the normalized `[C,H,W]` network input.
///
/// The image must already have the model's spatial size; single-channel
/// models take the first (red) channel.
pub fn preprocess(model: &ModelContainer, image: &RgbImage) -> Result<Tensor> {
    let [c, h, w] = model.input_shape();
    if image.height() as usize != h || image.width() as usize != w {
        return Err(Error::Shape {
            op: "preprocess",
            dim: if image.height() as usize != h {
                "height"
            } else {
                "width"
            },
            expected: if image.height() as usize != h { h } else { w },
            found: if image.height() as usize != h {
                image.height() as usize
            } else {
                image.width() as usize
            },
        });
    }
    if c != 1 && c != 3 {
        return Err(Error::Shape {
            op: "preprocess",
            dim: "channels",
            expected: 3,
            found: c,
        });
    }
    let p = model.preprocessing();
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let (mean, std) = (p.mean[ch], p.std[ch]);
        for px in image.pixels() {
            data.push((f32::from(px.0[ch]) / 255.0 - mean) / std);
        }
    }
    Tensor::new(&[c, h, w], data)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub class_index: usize,
    pub class_name: String,
    pub logit: f32,
    /// Softmax probability, for display only.
    pub probability: f64,
}

pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - f64::from(max)).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Classes ordered by descending logit, ties by lower index.
pub fn ranked_classes(logits: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order
}

pub fn predict_topk(model: &ModelContainer, trace: &ForwardTrace, k: usize) -> Result<Vec<Prediction>> {
    let logits = trace.logits().data();
    if k == 0 || k > logits.len() {
        return Err(Error::OutOfRange {
            what: "top-k",
            index: k,
            limit: logits.len(),
        });
    }
    let probs = softmax(logits);
    Ok(ranked_classes(logits)
        .into_iter()
        .take(k)
        .map(|i| Prediction {
            class_index: i,
            class_name: model.class_names()[i].clone(),
            logit: logits[i],
            probability: probs[i],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, Preprocessing};
    use crate::tensor::{ConvGeometry, PoolGeometry};

    fn small_cnn(zero: bool) -> ModelContainer {
        let v = |n: usize, s: f32| -> Vec<f32> {
            (0..n)
                .map(|i| if zero { 0.0 } else { ((i * 7 % 11) as f32 - 5.0) * s })
                .collect()
        };
        ModelContainer::new(
            [2, 6, 6],
            vec![
                Layer::conv2d(
                    "conv",
                    ConvGeometry::square(2, 3, 3, 1, 1),
                    Tensor::new(&[3, 2, 3, 3], v(54, 0.1)).unwrap(),
                    Tensor::from_vec(v(3, 0.05)),
                ),
                Layer::relu("relu"),
                Layer::max_pool("pool", PoolGeometry::new(2, 2)),
                Layer::flatten("flat"),
                Layer::linear(
                    "fc",
                    Tensor::new(&[4, 27], v(108, 0.2)).unwrap(),
                    Tensor::from_vec(v(4, 0.1)),
                ),
            ],
        )
        .unwrap()
    }

    fn input() -> Tensor {
        Tensor::new(
            &[2, 6, 6],
            (0..72).map(|i| ((i * 13 % 17) as f32 - 8.0) / 8.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn trace_is_complete_and_replays() {
        let model = small_cnn(false);
        let trace = forward(&model, &input()).unwrap();
        assert_eq!(trace.len(), model.layers().len());
        assert!(trace.mask(1).is_some());
        assert!(trace.switches(2).is_some());
        let view = model.view();
        for k in 0..trace.len() {
            let (out, record) = apply_layer(&view, k, trace.input_of(k)).unwrap();
            assert_eq!(&out, trace.output_of(k));
            assert_eq!(&record, trace.record(k));
        }
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let trace = forward(&small_cnn(true), &input()).unwrap();
        assert!(trace.logits().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = small_cnn(false);
        let a = forward(&model, &input()).unwrap();
        let b = forward(&model, &input()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.id(), b.id());
    }

    #[test]
    fn topk_orders_by_logit() {
        let model = ModelContainer::new(
            [1, 1, 3],
            vec![
                Layer::flatten("f"),
                Layer::linear(
                    "fc",
                    Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
                    Tensor::zeros(&[3]),
                ),
            ],
        )
        .unwrap();
        let trace = forward(&model, &Tensor::new(&[1, 1, 3], vec![1.0, 3.0, 2.0]).unwrap()).unwrap();
        let top = predict_topk(&model, &trace, 2).unwrap();
        assert_eq!(top.iter().map(|p| p.class_index).collect::<Vec<_>>(), vec![1, 2]);
        assert!(predict_topk(&model, &trace, 0).is_err());
        assert!(predict_topk(&model, &trace, 4).is_err());

        let flat = forward(&model, &Tensor::full(&[1, 1, 3], 2.0)).unwrap();
        let all = predict_topk(&model, &flat, 3).unwrap();
        for p in &all {
            assert!((p.probability - 1.0 / 3.0).abs() < 1e-12);
        }
        let total: f64 = softmax(trace.logits().data()).iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn preprocess_examples() {
        let model = ModelContainer::new(
            [3, 2, 2],
            vec![
                Layer::flatten("f"),
                Layer::linear("fc", Tensor::zeros(&[2, 12]), Tensor::zeros(&[2])),
            ],
        )
        .unwrap()
        .with_preprocessing(Preprocessing {
            mean: vec![0.5, 0.5, 0.2],
            std: vec![0.5, 0.5, 0.25],
        })
        .unwrap();
        let black = RgbImage::new(2, 2);
        let t = preprocess(&model, &black).unwrap();
        assert_eq!(&t.data()[..8], &[-1.0; 8]);

        let img = RgbImage::from_pixel(2, 2, image::Rgb([0, 0, 51]));
        let t = preprocess(&model, &img).unwrap();
        assert_eq!(&t.data()[8..], &[0.0; 4]);

        let wrong = RgbImage::new(3, 2);
        assert!(matches!(
            preprocess(&model, &wrong),
            Err(Error::Shape { dim: "width", .. })
        ));
    }
}

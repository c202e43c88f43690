//! Quantitative evaluation of saliency maps: the energy-thresholded pointing
//! game, mean-patch ablation, and the neuron ablation matrix.
//!
//! Dataset loops may run in parallel (see [`Execution`]); per-sample results
//! are collected in dataset order before any reduction, so every number is
//! independent of the worker count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::contrastive::{clrp_explain, neuron_explain, Variant};
use crate::error::{Error, Result};
use crate::imageio::load_rgb;
use crate::inference::{forward, preprocess, ForwardTrace};
use crate::model::{LayerKind, ModelContainer};
use crate::parallel::{map_indexed, Execution};
use crate::relevance::{
    guided_backprop, lrp_explain, vanilla_gradient, Method, OutputRelevance, RuleConfig, SaliencyMap,
};
use crate::tensor::Tensor;

pub const DEFAULT_PATCH: usize = 9;
pub const DEFAULT_SEED: u64 = 42;

/// Axis-aligned box, inclusive pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl From<[usize; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [usize; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.x0..=self.x1).contains(&col) && (self.y0..=self.y1).contains(&row)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub image: PathBuf,
    pub label: usize,
    pub boxes: Vec<BBox>,
}

impl AnnotatedSample {
    pub fn in_boxes(&self, row: usize, col: usize) -> bool {
        self.boxes.iter().any(|b| b.contains(row, col))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationLine {
    image: PathBuf,
    label: usize,
    boxes: Vec<BBox>,
}

/// Parse JSON-lines annotations; relative image paths resolve against `base`.
pub fn parse_annotations(text: &str, base: &Path) -> Result<Vec<(usize, AnnotatedSample)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: AnnotationLine = serde_json::from_str(line).map_err(|e| Error::Annotation {
            line: line_no,
            detail: e.to_string(),
        })?;
        if raw.boxes.is_empty() {
            return Err(Error::Annotation {
                line: line_no,
                detail: "sample has no boxes".into(),
            });
        }
        if let Some(b) = raw.boxes.iter().find(|b| b.x0 > b.x1 || b.y0 > b.y1) {
            return Err(Error::Annotation {
                line: line_no,
                detail: format!("box {:?} has inverted corners", <[usize; 4]>::from(*b)),
            });
        }
        out.push((
            line_no,
            AnnotatedSample {
                image: base.join(raw.image),
                label: raw.label,
                boxes: raw.boxes,
            },
        ));
    }
    Ok(out)
}

/// Annotated images, decoded and held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<AnnotatedSample>,
    pub images: Vec<RgbImage>,
}

impl Dataset {
    pub fn load(annotations: impl AsRef<Path>) -> Result<Self> {
        let path = annotations.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let parsed = parse_annotations(&text, base)?;
        let mut samples = Vec::with_capacity(parsed.len());
        let mut images = Vec::with_capacity(parsed.len());
        for (line, sample) in parsed {
            let img = load_rgb(&sample.image)?;
            check_boxes(&sample, &img).map_err(|detail| Error::Annotation { line, detail })?;
            samples.push(sample);
            images.push(img);
        }
        Ok(Self { samples, images })
    }

    pub fn from_parts(samples: Vec<AnnotatedSample>, images: Vec<RgbImage>) -> Result<Self> {
        if samples.len() != images.len() {
            return Err(Error::InvalidArgument(format!(
                "{} samples but {} images",
                samples.len(),
                images.len()
            )));
        }
        for (i, (s, img)) in samples.iter().zip(&images).enumerate() {
            check_boxes(s, img).map_err(|detail| Error::Annotation { line: i + 1, detail })?;
        }
        Ok(Self { samples, images })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Keep the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        self.samples.truncate(n);
        self.images.truncate(n);
    }
}

fn check_boxes(sample: &AnnotatedSample, img: &RgbImage) -> std::result::Result<(), String> {
    if sample.boxes.is_empty() {
        return Err("sample has no boxes".into());
    }
    for b in &sample.boxes {
        if b.x0 > b.x1 || b.y0 > b.y1 || b.x1 >= img.width() as usize || b.y1 >= img.height() as usize {
            return Err(format!(
                "box {:?} outside {}x{} image",
                <[usize; 4]>::from(*b),
                img.width(),
                img.height()
            ));
        }
    }
    Ok(())
}

/// How a thresholded foreground is scored against the target boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HitCriterion {
    /// Every selected pixel lies inside the union of the boxes.
    #[default]
    Containment,
    /// At least one selected pixel lies inside the union of the boxes.
    Overlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    pub execution: Execution,
    pub hit_criterion: HitCriterion,
    pub seed: u64,
    pub patch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            execution: Execution::Sequential,
            hit_criterion: HitCriterion::Containment,
            seed: DEFAULT_SEED,
            patch_size: DEFAULT_PATCH,
        }
    }
}

/// Explain class `target` with `method` from an existing trace.
pub fn explain_class(
    model: &ModelContainer,
    trace: &ForwardTrace,
    method: Method,
    target: usize,
    rules: &RuleConfig,
) -> Result<SaliencyMap> {
    match method {
        Method::Lrp => lrp_explain(
            model,
            trace,
            &OutputRelevance::single_class(trace.logits(), target)?,
            rules,
        ),
        Method::Clrp1 => Ok(clrp_explain(model, trace, target, Variant::Clrp1, rules)?.map),
        Method::Clrp2 => Ok(clrp_explain(model, trace, target, Variant::Clrp2, rules)?.map),
        Method::Gradient => vanilla_gradient(model, trace, target),
        Method::Guided => guided_backprop(model, trace, target),
    }
}

/// Smallest set of pixels, taken in descending value order (ties by lower
/// index), whose cumulative value reaches `p` of the map's energy.
///
/// Negative values carry no energy and are never selected.
pub fn energy_threshold(map: &SaliencyMap, p: f64) -> Result<Vec<bool>> {
    energy_mask(map.values.data(), p)
}

pub fn energy_mask(values: &[f32], p: f64) -> Result<Vec<bool>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("energy fraction {p} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| values[i] > 0.0).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let total: f64 = order.iter().map(|&i| f64::from(values[i])).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("saliency map has zero energy".into()));
    }
    let goal = p * total;
    let mut mask = vec![false; values.len()];
    let mut acc = 0.0;
    for &i in &order {
        mask[i] = true;
        acc += f64::from(values[i]);
        if acc >= goal {
            break;
        }
    }
    Ok(mask)
}

/// Score a mask of selected pixels (row-major, `width` columns) against the
/// sample's boxes.
pub fn pointing_hit(mask: &[bool], width: usize, sample: &AnnotatedSample, criterion: HitCriterion) -> bool {
    let mut selected = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| (i / width, i % width));
    match criterion {
        HitCriterion::Containment => selected.all(|(r, c)| sample.in_boxes(r, c)),
        HitCriterion::Overlap => selected.any(|(r, c)| sample.in_boxes(r, c)),
    }
}

fn ser_sig9<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(sig9(*v))
}

fn ser_sig9_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|&x| sig9(x)))
}

fn ser_sig9_matrix<S: Serializer>(v: &[Vec<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|row| row.iter().map(|&x| sig9(x)).collect::<Vec<_>>()))
}

/// Round to nine significant digits.
pub fn sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

fn fmt9(v: f64) -> String {
    sig9(v).to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointingLevel {
    #[serde(serialize_with = "ser_sig9")]
    pub p: f64,
    pub hits: usize,
    pub misses: usize,
    #[serde(serialize_with = "ser_sig9")]
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointingResult {
    pub method: String,
    pub levels: Vec<PointingLevel>,
    /// Samples whose explanation could not be computed; counted as misses.
    pub failures: usize,
}

impl PointingResult {
    pub fn mean_accuracy(&self) -> f64 {
        self.levels.iter().map(|l| l.accuracy).sum::<f64>() / self.levels.len() as f64
    }

    fn from_hits(method: String, p_levels: &[f64], hits: &[Vec<bool>], failures: usize) -> Self {
        let n = hits.len();
        let levels = p_levels
            .iter()
            .enumerate()
            .map(|(li, &p)| {
                let h = hits.iter().filter(|s| s[li]).count();
                PointingLevel {
                    p,
                    hits: h,
                    misses: n - h,
                    accuracy: h as f64 / n as f64,
                }
            })
            .collect();
        Self {
            method,
            levels,
            failures,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointingReport {
    pub samples: usize,
    pub hit_criterion: HitCriterion,
    #[serde(serialize_with = "ser_sig9_vec")]
    pub energy_levels: Vec<f64>,
    pub results: Vec<PointingResult>,
}

impl PointingReport {
    /// One row per method and energy level.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "p", "hits", "misses", "accuracy"])?;
        for r in &self.results {
            for l in &r.levels {
                w.write_record([
                    r.method.clone(),
                    fmt9(l.p),
                    l.hits.to_string(),
                    l.misses.to_string(),
                    fmt9(l.accuracy),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_levels(p_levels: &[f64]) -> Result<()> {
    if p_levels.is_empty() {
        return Err(Error::InvalidArgument("no energy levels given".into()));
    }
    if let Some(p) = p_levels.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::InvalidArgument(format!("energy fraction {p} outside (0, 1]")));
    }
    Ok(())
}

fn sample_input(model: &ModelContainer, dataset: &Dataset, i: usize) -> Result<(Tensor, ForwardTrace)> {
    let x = preprocess(model, &dataset.images[i])?;
    let trace = forward(model, &x)?;
    Ok((x, trace))
}

/// Pointing game over the dataset for each method and energy level.
pub fn run_pointing(
    model: &ModelContainer,
    dataset: &Dataset,
    methods: &[Method],
    p_levels: &[f64],
    rules: &RuleConfig,
    config: &EvalConfig,
) -> Result<PointingReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    check_levels(p_levels)?;
    rules.validate()?;
    let width = model.input_shape()[2];
    // per sample: per method: Some(per-level hits) or None on failure
    let per_sample: Vec<Result<Vec<Option<Vec<bool>>>>> =
        map_indexed(config.execution, &dataset.samples, |i, sample| {
            let (_, trace) = sample_input(model, dataset, i)?;
            Ok(methods
                .iter()
                .map(|&method| {
                    let map = explain_class(model, &trace, method, sample.label, rules);
                    let hits = map.and_then(|map| {
                        p_levels
                            .iter()
                            .map(|&p| {
                                Ok(pointing_hit(
                                    &energy_threshold(&map, p)?,
                                    width,
                                    sample,
                                    config.hit_criterion,
                                ))
                            })
                            .collect::<Result<Vec<bool>>>()
                    });
                    match hits {
                        Ok(h) => Some(h),
                        Err(e) => {
                            warn!("{}: {method} counted as miss: {e}", sample.image.display());
                            None
                        }
                    }
                })
                .collect())
        });
    let per_sample = per_sample.into_iter().collect::<Result<Vec<_>>>()?;
    let results = methods
        .iter()
        .enumerate()
        .map(|(mi, method)| {
            let mut failures = 0;
            let hits: Vec<Vec<bool>> = per_sample
                .iter()
                .map(|s| {
                    s[mi].clone().unwrap_or_else(|| {
                        failures += 1;
                        vec![false; p_levels.len()]
                    })
                })
                .collect();
            PointingResult::from_hits(method.to_string(), p_levels, &hits, failures)
        })
        .collect();
    Ok(PointingReport {
        samples: dataset.len(),
        hit_criterion: config.hit_criterion,
        energy_levels: p_levels.to_vec(),
        results,
    })
}

/// Baseline that always points at the image center; same accuracy at every level.
pub fn center_pointing(dataset: &Dataset, p_levels: &[f64]) -> PointingResult {
    let hits: Vec<Vec<bool>> = dataset
        .samples
        .iter()
        .zip(&dataset.images)
        .map(|(s, img)| {
            let hit = s.in_boxes(img.height() as usize / 2, img.width() as usize / 2);
            vec![hit; p_levels.len()]
        })
        .collect();
    PointingResult::from_hits("center".into(), p_levels, &hits, 0)
}

/// Per-position mean of the preprocessed dataset images.
pub fn mean_pixel_image(model: &ModelContainer, dataset: &Dataset) -> Result<Tensor> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let shape = model.input_shape();
    let mut acc = vec![0.0f64; shape.iter().product()];
    for img in &dataset.images {
        let x = preprocess(model, img)?;
        for (a, &v) in acc.iter_mut().zip(x.data()) {
            *a += f64::from(v);
        }
    }
    let n = dataset.len() as f64;
    let mean: Vec<f64> = acc.into_iter().map(|a| a / n).collect();
    Ok(Tensor::from_f64(&shape, &mean))
}

/// Replace the `size × size` window centred at `(row, col)` with `fill`,
/// clipped at the borders.
pub fn ablate_patch(input: &Tensor, center: (usize, usize), size: usize, fill: &Tensor) -> Result<Tensor> {
    if size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("patch size {size} must be odd")));
    }
    if fill.shape() != input.shape() {
        return Err(Error::InvalidArgument(format!(
            "fill shape {:?} differs from input {:?}",
            fill.shape(),
            input.shape()
        )));
    }
    let &[c, h, w] = input.shape() else {
        return Err(Error::Shape {
            op: "ablate_patch",
            dim: "rank",
            expected: 3,
            found: input.ndim(),
        });
    };
    let (row, col) = center;
    if row >= h || col >= w {
        return Err(Error::OutOfRange {
            what: "patch center",
            index: if row >= h { row } else { col },
            limit: if row >= h { h } else { w },
        });
    }
    let r = size / 2;
    let (y0, y1) = (row.saturating_sub(r), (row + r).min(h - 1));
    let (x0, x1) = (col.saturating_sub(r), (col + r).min(w - 1));
    let mut out = input.clone();
    let data = out.data_mut();
    for ch in 0..c {
        for y in y0..=y1 {
            let base = (ch * h + y) * w;
            data[base + x0..=base + x1].copy_from_slice(&fill.data()[base + x0..=base + x1]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub method: String,
    #[serde(serialize_with = "ser_sig9")]
    pub mean_drop: f64,
    #[serde(serialize_with = "ser_sig9_vec")]
    pub drops: Vec<f64>,
    pub failures: usize,
}

impl AblationResult {
    fn new(method: String, drops: Vec<f64>, failures: usize) -> Self {
        let mean_drop = drops.iter().sum::<f64>() / drops.len() as f64;
        Self {
            method,
            mean_drop,
            drops,
            failures,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub samples: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub results: Vec<AblationResult>,
}

impl AblationReport {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "mean_drop", "samples", "failures"])?;
        for r in &self.results {
            w.write_record([
                r.method.clone(),
                fmt9(r.mean_drop),
                r.drops.len().to_string(),
                r.failures.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Uniform random patch centres, one per sample, drawn in dataset order.
pub fn random_positions(seed: u64, n: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (rng.gen_range(0..h), rng.gen_range(0..w))).collect()
}

/// For each sample and method: ablate the patch at the map's maximum and
/// record how far the ground-truth logit drops. A `random` row ablates at a
/// seeded random position instead.
pub fn ablation_study(
    model: &ModelContainer,
    dataset: &Dataset,
    methods: &[Method],
    rules: &RuleConfig,
    config: &EvalConfig,
) -> Result<AblationReport> {
    rules.validate()?;
    let fill = mean_pixel_image(model, dataset)?;
    let [_, h, w] = model.input_shape();
    let random = random_positions(config.seed, dataset.len(), h, w);
    let patch = config.patch_size;

    // per sample: (random drop, per-method Option<drop>)
    let per_sample: Vec<Result<(f64, Vec<Option<f64>>)>> =
        map_indexed(config.execution, &dataset.samples, |i, sample| {
            let (x, trace) = sample_input(model, dataset, i)?;
            let label = sample.label;
            if label >= model.num_classes() {
                return Err(Error::OutOfRange {
                    what: "label",
                    index: label,
                    limit: model.num_classes(),
                });
            }
            let before = f64::from(trace.logits().data()[label]);
            let drop_at = |pos: (usize, usize)| -> Result<f64> {
                let ablated = ablate_patch(&x, pos, patch, &fill)?;
                let after = forward(model, &ablated)?;
                Ok(before - f64::from(after.logits().data()[label]))
            };
            let random_drop = drop_at(random[i])?;
            let drops = methods
                .iter()
                .map(|&method| {
                    let r = explain_class(model, &trace, method, label, rules).and_then(|map| drop_at(map.argmax()));
                    match r {
                        Ok(d) => Some(d),
                        Err(e) => {
                            warn!("{}: {method} counted as zero drop: {e}", sample.image.display());
                            None
                        }
                    }
                })
                .collect();
            Ok((random_drop, drops))
        });
    let per_sample = per_sample.into_iter().collect::<Result<Vec<_>>>()?;

    let mut results = vec![AblationResult::new(
        "random".into(),
        per_sample.iter().map(|s| s.0).collect(),
        0,
    )];
    for (mi, method) in methods.iter().enumerate() {
        let failures = per_sample.iter().filter(|s| s.1[mi].is_none()).count();
        let drops = per_sample.iter().map(|s| s.1[mi].unwrap_or(0.0)).collect();
        results.push(AblationResult::new(method.to_string(), drops, failures));
    }
    Ok(AblationReport {
        samples: dataset.len(),
        patch_size: patch,
        seed: config.seed,
        results,
    })
}

/// Ablation matrix for a set of neurons in one layer on one image.
#[derive(Debug, Clone, Serialize)]
pub struct NeuronMatrix {
    pub layer: String,
    pub neurons: Vec<usize>,
    #[serde(serialize_with = "ser_sig9_vec")]
    pub activations: Vec<f64>,
    /// `values[i][j]`: drop of neuron `j` after ablating neuron `i`'s patch.
    #[serde(serialize_with = "ser_sig9_matrix")]
    pub values: Vec<Vec<f64>>,
    /// Patch centre used for each row.
    pub patch_centers: Vec<(usize, usize)>,
    #[serde(skip)]
    pub maps: Vec<SaliencyMap>,
}

impl NeuronMatrix {
    pub fn diagonal_mean(&self) -> f64 {
        let k = self.neurons.len();
        (0..k).map(|i| self.values[i][i]).sum::<f64>() / k as f64
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let k = self.neurons.len();
        let total: f64 = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.values[i][j])
            .sum();
        total / (k * (k - 1)).max(1) as f64
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["ablated".to_string()];
        header.extend(self.neurons.iter().map(|n| format!("{}[{n}]", self.layer)));
        w.write_record(&header)?;
        for (i, row) in self.values.iter().enumerate() {
            let mut rec = vec![format!("{}[{}]", self.layer, self.neurons[i])];
            rec.extend(row.iter().map(|&v| fmt9(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Indices of the `k` most strongly activated neurons on the output of
/// `layer`, strongest first; only strictly positive activations qualify.
pub fn top_active_neurons(model: &ModelContainer, trace: &ForwardTrace, layer: &str, k: usize) -> Result<Vec<usize>> {
    let idx = model.layer_index(layer)?;
    let out = trace.output_of(idx).data();
    let mut order: Vec<usize> = (0..out.len()).filter(|&i| out[i] > 0.0).collect();
    order.sort_by(|&a, &b| out[b].total_cmp(&out[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// For each listed neuron: find the maximum of its CLRP2 map, ablate the
/// patch there with `fill`, re-run the forward pass and record how every
/// listed neuron's activation changed (`before − after`).
pub fn neuron_ablation_matrix(
    model: &ModelContainer,
    input: &Tensor,
    layer: &str,
    neurons: &[usize],
    rules: &RuleConfig,
    fill: &Tensor,
    patch_size: usize,
) -> Result<NeuronMatrix> {
    let k = model.layer_index(layer)?;
    if !matches!(
        model.layers()[k].kind,
        LayerKind::Linear { .. } | LayerKind::Conv2d { .. }
    ) {
        return Err(Error::InvalidArgument(format!(
            "layer `{layer}` has no incoming linear weights"
        )));
    }
    let trace = forward(model, input)?;
    let before = trace.output_of(k).data();
    for &n in neurons {
        let v = *before.get(n).ok_or(Error::OutOfRange {
            what: "neuron",
            index: n,
            limit: before.len(),
        })?;
        if !(v > 0.0) {
            return Err(Error::InactiveNeuron {
                layer: layer.to_string(),
                neuron: n,
                value: v,
            });
        }
    }
    let mut values = Vec::with_capacity(neurons.len());
    let mut maps = Vec::with_capacity(neurons.len());
    let mut centers = Vec::with_capacity(neurons.len());
    for &n in neurons {
        let map = neuron_explain(model, &trace, layer, n, rules)?.map;
        let pos = map.argmax();
        let ablated = ablate_patch(input, pos, patch_size, fill)?;
        let after = forward(model, &ablated)?;
        let after = after.output_of(k).data();
        values.push(
            neurons
                .iter()
                .map(|&j| f64::from(before[j]) - f64::from(after[j]))
                .collect(),
        );
        maps.push(map);
        centers.push(pos);
    }
    Ok(NeuronMatrix {
        layer: layer.to_string(),
        neurons: neurons.to_vec(),
        activations: neurons.iter().map(|&j| f64::from(before[j])).collect(),
        values,
        patch_centers: centers,
        maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(boxes: Vec<[usize; 4]>) -> AnnotatedSample {
        AnnotatedSample {
            image: PathBuf::from("x.png"),
            label: 0,
            boxes: boxes.into_iter().map(BBox::from).collect(),
        }
    }

    #[test]
    fn threshold_examples() {
        let m = energy_mask(&[4.0, 3.0, 2.0, 1.0], 0.5).unwrap();
        assert_eq!(m, vec![true, true, false, false]);
        let m = energy_mask(&[0.0, 3.0, 2.0, 0.0, 1.0], 1.0).unwrap();
        assert_eq!(m, vec![false, true, true, false, true]);
        let m = energy_mask(&[1.0; 10], 0.25).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 3);
        assert_eq!(&m[..3], &[true, true, true]);
        assert!(energy_mask(&[0.0; 4], 0.5).is_err());
        assert!(energy_mask(&[1.0; 4], 0.0).is_err());
        assert!(energy_mask(&[1.0; 4], 1.5).is_err());
    }

    #[test]
    fn hit_examples() {
        let s = sample(vec![[1, 1, 3, 3]]);
        let mut mask = vec![false; 25];
        mask[2 * 5 + 2] = true;
        assert!(pointing_hit(&mask, 5, &s, HitCriterion::Containment));
        mask[0] = true;
        assert!(!pointing_hit(&mask, 5, &s, HitCriterion::Containment));
        assert!(pointing_hit(&mask, 5, &s, HitCriterion::Overlap));
        let boxed: Vec<bool> = (0..25).map(|i| s.in_boxes(i / 5, i % 5)).collect();
        assert_eq!(boxed.iter().filter(|&&b| b).count(), 9);
        assert!(pointing_hit(&boxed, 5, &s, HitCriterion::Containment));
    }

    #[test]
    fn patch_examples() {
        let x = Tensor::new(&[2, 12, 12], (0..288).map(|v| v as f32).collect()).unwrap();
        let fill = Tensor::full(&[2, 12, 12], -1.0);
        assert_eq!(ablate_patch(&x, (6, 6), 9, &x).unwrap(), x);
        let corner = ablate_patch(&x, (0, 0), 9, &fill).unwrap();
        let changed = corner.data().iter().filter(|&&v| v == -1.0).count();
        assert_eq!(changed, 2 * 5 * 5);
        assert_eq!(corner.data()[4 * 12 + 4], -1.0);
        assert_eq!(corner.data()[5 * 12], 60.0);

        let a = ablate_patch(&ablate_patch(&x, (2, 2), 3, &fill).unwrap(), (9, 9), 3, &fill).unwrap();
        let b = ablate_patch(&ablate_patch(&x, (9, 9), 3, &fill).unwrap(), (2, 2), 3, &fill).unwrap();
        assert_eq!(a, b);

        assert!(ablate_patch(&x, (12, 0), 9, &fill).is_err());
        assert!(ablate_patch(&x, (0, 0), 8, &fill).is_err());
    }

    #[test]
    fn random_positions_are_reproducible() {
        assert_eq!(random_positions(42, 20, 64, 64), random_positions(42, 20, 64, 64));
        assert_ne!(random_positions(42, 20, 64, 64), random_positions(43, 20, 64, 64));
    }

    #[test]
    fn annotation_errors_carry_line_numbers() {
        let text = "{\"image\":\"a.png\",\"label\":1,\"boxes\":[[0,0,3,3]]}\n\n{\"image\":\"b.png\",\"label\":1}\n";
        match parse_annotations(text, Path::new(".")) {
            Err(Error::Annotation { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "{\"image\":\"a.png\",\"label\":1,\"boxes\":[]}\n";
        assert!(matches!(
            parse_annotations(text, Path::new(".")),
            Err(Error::Annotation { line: 1, .. })
        ));
        let ok = parse_annotations(
            "{\"image\":\"a.png\",\"label\":2,\"boxes\":[[1,2,3,4]]}",
            Path::new("d"),
        )
        .unwrap();
        assert_eq!(ok[0].1.image, PathBuf::from("d/a.png"));
        assert_eq!(
            ok[0].1.boxes[0],
            BBox {
                x0: 1,
                y0: 2,
                x1: 3,
                y1: 4
            }
        );
    }

    #[test]
    fn sig9_rounds() {
        assert_eq!(sig9(0.123456789123), 0.123456789);
        assert_eq!(sig9(-1234567891234.0), -1234567890000.0);
        assert_eq!(sig9(0.0), 0.0);
    }
}

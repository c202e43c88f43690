//! Checks against the committed fixture model, dataset and exporter outputs.

use std::path::PathBuf;

use clrp::eval::{explain_class, mean_pixel_image, Dataset};
use clrp::inference::apply_layer;
use clrp::relevance::gradient_pass;
use clrp::{
    clrp_explain, forward, load_model, neuron_explain, predict_topk, preprocess, save_model, LayerKind, Method,
    ModelContainer, RuleConfig, Tensor, Variant,
};
use serde::Deserialize;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn model() -> ModelContainer {
    load_model(root().join("model")).expect("fixture model loads")
}

fn dataset() -> Dataset {
    Dataset::load(root().join("dataset/annotations.jsonl")).expect("fixture dataset loads")
}

#[derive(Deserialize)]
struct Reference {
    parameter_count: usize,
    inputs_file: String,
    input_shape: Vec<usize>,
    logits: Vec<Vec<f32>>,
    images: Vec<ReferenceImage>,
}

#[derive(Deserialize)]
struct ReferenceImage {
    image: String,
    logits: Vec<f32>,
    predicted: usize,
}

fn reference() -> Reference {
    let text = std::fs::read_to_string(root().join("model/reference.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn reference_inputs(r: &Reference) -> Vec<Tensor> {
    let bytes = std::fs::read(root().join("model").join(&r.inputs_file)).unwrap();
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let per: usize = r.input_shape.iter().product();
    assert_eq!(floats.len(), per * r.logits.len());
    floats
        .chunks(per)
        .map(|c| Tensor::new(&r.input_shape, c.to_vec()).unwrap())
        .collect()
}

#[test]
fn fixture_loads_with_expected_layers() {
    let m = model();
    let kinds: Vec<&str> = m.layers().iter().map(|l| l.kind.tag()).collect();
    assert_eq!(
        kinds,
        [
            "Conv2d",
            "ReLU",
            "MaxPool2d",
            "Conv2d",
            "ReLU",
            "MaxPool2d",
            "Conv2d",
            "ReLU",
            "MaxPool2d",
            "Flatten",
            "Linear",
            "ReLU",
            "Linear"
        ]
    );
    assert_eq!(m.input_shape(), [3, 64, 64]);
    assert_eq!(m.num_classes(), 10);
    assert_eq!(m.shape_at(m.layers().len()), &[10]);
    let blobs: usize = m
        .layers()
        .iter()
        .flat_map(|l| [l.kind.weight(), l.kind.bias()])
        .flatten()
        .map(Tensor::len)
        .sum();
    assert_eq!(m.parameter_count(), blobs);
    assert_eq!(m.parameter_count(), reference().parameter_count);
}

#[test]
fn save_reproduces_blob_bytes() {
    let m = model();
    let dir = tempfile::tempdir().unwrap();
    save_model(&m, dir.path()).unwrap();
    let original = std::fs::read(root().join("model/weights.bin")).unwrap();
    let saved = std::fs::read(dir.path().join("weights.bin")).unwrap();
    assert!(original == saved, "weights.bin differs after save");
    assert_eq!(load_model(dir.path()).unwrap(), m);
}

#[test]
fn reference_logits_match_exporter() {
    let m = model();
    let r = reference();
    for (x, want) in reference_inputs(&r).iter().zip(&r.logits) {
        let got = forward(&m, x).unwrap();
        for (g, w) in got.logits().data().iter().zip(want) {
            assert!((g - w).abs() <= 1e-4, "logit {g} vs exporter {w}");
        }
    }
}

#[test]
fn fixture_images_match_exporter_predictions() {
    let m = model();
    for img in reference().images {
        let rgb = clrp::imageio::load_rgb(root().join("dataset").join(&img.image)).unwrap();
        let trace = forward(&m, &preprocess(&m, &rgb).unwrap()).unwrap();
        for (g, w) in trace.logits().data().iter().zip(&img.logits) {
            assert!((g - w).abs() <= 1e-4, "{}: logit {g} vs exporter {w}", img.image);
        }
        assert_eq!(predict_topk(&m, &trace, 1).unwrap()[0].class_index, img.predicted);
    }
}

#[test]
fn preprocessed_fixture_stays_within_input_bounds() {
    let m = model();
    let ds = dataset();
    let b = m.input_bounds();
    let plane = 64 * 64;
    for img in ds.images.iter().take(50) {
        let x = preprocess(&m, img).unwrap();
        for (i, &v) in x.data().iter().enumerate() {
            let c = i / plane;
            assert!(
                v >= b.low[c] - 1e-6 && v <= b.high[c] + 1e-6,
                "value {v} outside [{}, {}]",
                b.low[c],
                b.high[c]
            );
        }
    }
}

#[test]
fn trace_replay_and_determinism() {
    let m = model();
    let ds = dataset();
    let x = preprocess(&m, &ds.images[0]).unwrap();
    let a = forward(&m, &x).unwrap();
    let b = forward(&m, &x).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.id(), b.id());
    let view = m.view();
    for k in 0..m.layers().len() {
        let (out, _) = apply_layer(&view, k, a.input_of(k)).unwrap();
        assert_eq!(&out, a.output_of(k));
    }
    for (k, l) in m.layers().iter().enumerate() {
        match l.kind {
            LayerKind::Relu => assert!(a.mask(k).is_some()),
            LayerKind::MaxPool2d(_) => assert!(a.switches(k).is_some()),
            _ => {}
        }
    }
}

#[test]
fn mean_image_matches_integer_oracle() {
    let m = model();
    let ds = dataset();
    let mean = mean_pixel_image(&m, &ds).unwrap();
    let p = m.preprocessing();
    let n = ds.len() as f64;
    let (h, w) = (64usize, 64usize);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let sum: u64 = ds
                    .images
                    .iter()
                    .map(|img| u64::from(img.get_pixel(x as u32, y as u32)[c]))
                    .sum();
                let want = (sum as f64 / n / 255.0 - f64::from(p.mean[c])) / f64::from(p.std[c]);
                let got = f64::from(mean.data()[(c * h + y) * w + x]);
                assert!((got - want).abs() <= 1e-6, "({c},{y},{x}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn fixture_lrp_conserves_up_to_padding_leakage() {
    let m = model();
    let ds = dataset();
    let rules = RuleConfig::for_model(&m);
    let x = preprocess(&m, &ds.images[0]).unwrap();
    let trace = forward(&m, &x).unwrap();
    let label = ds.samples[0].label;
    let s = f64::from(trace.logits().data()[label]);
    let map = explain_class(&m, &trace, Method::Lrp, label, &rules).unwrap();
    assert!(map.padding_leakage.abs() > 0.0);
    let residual = (map.total_relevance + map.padding_leakage - s).abs() / s;
    assert!(residual < 1e-3, "residual {residual}");
    assert!(map.values.data().iter().all(|&v| v >= -1e-6));
}

#[test]
fn guided_signals_are_nonnegative_after_every_relu() {
    let m = model();
    let ds = dataset();
    for i in 0..5 {
        let trace = forward(&m, &preprocess(&m, &ds.images[i]).unwrap()).unwrap();
        let mut seed = Tensor::zeros(&[10]);
        seed.data_mut()[ds.samples[i].label] = 1.0;
        let pass = gradient_pass(&m.view(), &trace, m.layers().len() - 1, &seed, true).unwrap();
        for (k, l) in m.layers().iter().enumerate() {
            if matches!(l.kind, LayerKind::Relu) {
                assert!(
                    pass.at_input[k].data().iter().all(|&v| v >= 0.0),
                    "negative guided signal below {}",
                    l.name
                );
            }
        }
    }
}

#[test]
fn contrastive_components_share_one_trace() {
    let m = model();
    let ds = dataset();
    let rules = RuleConfig::for_model(&m);
    let trace = forward(&m, &preprocess(&m, &ds.images[0]).unwrap()).unwrap();
    for variant in [Variant::Clrp1, Variant::Clrp2] {
        let cm = clrp_explain(&m, &trace, ds.samples[0].label, variant, &rules).unwrap();
        assert_eq!(cm.map.trace_id, trace.id());
        assert_eq!(cm.positive.trace_id, trace.id());
        assert_eq!(cm.dual.trace_id, trace.id());
        for ((&c, &r), &d) in cm
            .map
            .values
            .data()
            .iter()
            .zip(cm.positive.values.data())
            .zip(cm.dual.values.data())
        {
            assert!(c >= 0.0);
            if d >= 0.0 {
                assert!(c <= r.max(0.0));
            }
        }
    }
}

fn left_half_share(values: &Tensor) -> f64 {
    let w = values.shape()[1];
    let (mut left, mut total) = (0.0, 0.0);
    for (i, &v) in values.data().iter().enumerate() {
        let v = f64::from(v.max(0.0));
        total += v;
        if i % w < w / 2 {
            left += v;
        }
    }
    left / total
}

#[test]
fn contrastive_maps_concentrate_on_the_target_object() {
    // Sample 4: label 1 ("frame") is the left glyph.
    let m = model();
    let ds = dataset();
    let rules = RuleConfig::for_model(&m);
    let s = &ds.samples[4];
    assert!(s.boxes.iter().all(|b| b.x1 < 32));
    let trace = forward(&m, &preprocess(&m, &ds.images[4]).unwrap()).unwrap();
    let lrp = explain_class(&m, &trace, Method::Lrp, s.label, &rules).unwrap();
    let c1 = clrp_explain(&m, &trace, s.label, Variant::Clrp1, &rules).unwrap();
    let c2 = clrp_explain(&m, &trace, s.label, Variant::Clrp2, &rules).unwrap();
    assert!(
        left_half_share(&lrp.values) < 0.6,
        "lrp {}",
        left_half_share(&lrp.values)
    );
    assert!(
        left_half_share(&c1.map.values) >= 0.6,
        "clrp1 {}",
        left_half_share(&c1.map.values)
    );
    assert!(
        left_half_share(&c2.map.values) >= 0.6,
        "clrp2 {}",
        left_half_share(&c2.map.values)
    );
}

fn correlation(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (f64::from(x) - ma, f64::from(y) - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn neuron_maps_separate_under_contrast() {
    // fc1 neurons 24 and 8 on sample 0: similar LRP maps, distinct CLRP2 maps.
    let m = model();
    let ds = dataset();
    let rules = RuleConfig::for_model(&m);
    let trace = forward(&m, &preprocess(&m, &ds.images[0]).unwrap()).unwrap();
    let a = neuron_explain(&m, &trace, "fc1", 24, &rules).unwrap();
    let b = neuron_explain(&m, &trace, "fc1", 8, &rules).unwrap();
    let lrp = correlation(&a.positive.values, &b.positive.values);
    let contrast = correlation(&a.map.values, &b.map.values);
    assert!(lrp > 0.9, "lrp correlation {lrp}");
    assert!(contrast < 0.5, "contrastive correlation {contrast}");
}

#[test]
fn dataset_boxes_lie_in_their_half() {
    let ds = dataset();
    assert_eq!(ds.len(), 200);
    for (i, s) in ds.samples.iter().enumerate() {
        assert_eq!(s.boxes.len(), 1);
        let b = s.boxes[0];
        if i % 2 == 0 {
            assert!(b.x1 < 32);
        } else {
            assert!(b.x0 >= 32);
        }
    }
}

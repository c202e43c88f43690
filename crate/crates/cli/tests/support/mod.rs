//! Random networks and naive reference implementations used as oracles.
//!
//! Everything here is written with plain nested loops over `f64` and reads
//! nothing from the engine except layer weights and, where stated, the
//! activations recorded in a trace.

#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

use clrp::model::InputBounds;
use clrp::{ConvGeometry, Layer, LayerKind, ModelContainer, PoolGeometry, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct NetOptions {
    pub conv: bool,
    pub bias: bool,
    pub padding: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| (rng.gen_range(-1.0..1.0) * scale) as f32).collect(),
    )
    .unwrap()
}

fn bias(rng: &mut ChaCha8Rng, n: usize, on: bool) -> Tensor {
    if on {
        uniform(rng, &[n], 0.2)
    } else {
        Tensor::zeros(&[n])
    }
}

/// A random sequential net with at most four parametric layers and at most
/// 64 units per layer.
pub fn random_net(rng: &mut ChaCha8Rng, opts: NetOptions) -> ModelContainer {
    let mut layers = Vec::new();
    let input;
    let mut units;
    if opts.conv {
        let c = rng.gen_range(1..=2);
        let side = if c == 1 {
            rng.gen_range(4..=7)
        } else {
            rng.gen_range(4..=5)
        };
        input = [c, side, side];
        let k = rng.gen_range(2..=3);
        let pad = if opts.padding { rng.gen_range(0..=1) } else { 0 };
        let mut s = side + 2 * pad - k + 1;
        let out = rng.gen_range(2..=4).min(64 / (s * s)).max(1);
        let g = ConvGeometry::square(c, out, k, 1, pad);
        let fan = (c * k * k) as f64;
        layers.push(Layer::conv2d(
            "conv1",
            g,
            uniform(rng, &g.weight_shape(), 1.7 / fan.sqrt()),
            bias(rng, out, opts.bias),
        ));
        layers.push(Layer::relu("relu1"));
        let mut ch = out;
        if s >= 4 && rng.gen_bool(0.5) {
            layers.push(Layer::max_pool("pool1", PoolGeometry::new(2, 2)));
            s /= 2;
        } else if s >= 4 && rng.gen_bool(0.5) {
            layers.push(Layer::avg_pool("pool1", PoolGeometry::new(2, 2)));
            s /= 2;
        }
        if s >= 3 && rng.gen_bool(0.7) {
            let pad = if opts.padding { rng.gen_range(0..=1) } else { 0 };
            let s2 = s + 2 * pad - 1;
            let out2 = rng.gen_range(2..=4).min(64 / (s2 * s2)).max(1);
            let g = ConvGeometry::square(ch, out2, 2, 1, pad);
            let fan = (ch * 4) as f64;
            layers.push(Layer::conv2d(
                "conv2",
                g,
                uniform(rng, &g.weight_shape(), 1.7 / fan.sqrt()),
                bias(rng, out2, opts.bias),
            ));
            layers.push(Layer::relu("relu2"));
            s = s + 2 * pad - 1;
            ch = out2;
            if s >= 2 && rng.gen_bool(0.5) {
                layers.push(Layer::max_pool("pool2", PoolGeometry::new(2, 2)));
                s /= 2;
            }
        }
        layers.push(Layer::flatten("flatten"));
        units = ch * s * s;
    } else {
        let n = rng.gen_range(3..=16);
        input = [1, 1, n];
        layers.push(Layer::flatten("flatten"));
        units = n;
        let hidden = rng.gen_range(1..=2);
        for h in 0..hidden {
            let width = rng.gen_range(4..=24);
            layers.push(Layer::linear(
                format!("hidden{h}"),
                uniform(rng, &[width, units], 1.7 / (units as f64).sqrt()),
                bias(rng, width, opts.bias),
            ));
            layers.push(Layer::relu(format!("relu_h{h}")));
            units = width;
        }
    }
    if opts.conv {
        let width = rng.gen_range(4..=16);
        layers.push(Layer::linear(
            "fc1",
            uniform(rng, &[width, units], 1.7 / (units as f64).sqrt()),
            bias(rng, width, opts.bias),
        ));
        layers.push(Layer::relu("relu_fc"));
        units = width;
    }
    let m = rng.gen_range(2..=5);
    layers.push(Layer::linear(
        "logits",
        uniform(rng, &[m, units], 1.7 / (units as f64).sqrt()),
        bias(rng, m, opts.bias),
    ));
    ModelContainer::new(input, layers).unwrap()
}

pub fn random_input(rng: &mut ChaCha8Rng, shape: [usize; 3], low: &[f32], high: &[f32]) -> Tensor {
    let plane = shape[1] * shape[2];
    let data = (0..shape.iter().product::<usize>())
        .map(|i| {
            let c = i / plane;
            rng.gen_range(low[c]..=high[c])
        })
        .collect();
    Tensor::new(&shape, data).unwrap()
}

pub fn random_bounds(rng: &mut ChaCha8Rng, channels: usize) -> InputBounds {
    InputBounds {
        low: (0..channels).map(|_| rng.gen_range(-2.0..-0.1)).collect(),
        high: (0..channels).map(|_| rng.gen_range(0.1..2.0)).collect(),
    }
}

/// Activation values with their `[C,H,W]` or `[N]` shape.
#[derive(Debug, Clone)]
pub struct Act {
    pub shape: Vec<usize>,
    pub v: Vec<f64>,
}

/// Piecewise-linear region of a forward pass: ReLU signs and pool winners.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern(pub Vec<Vec<usize>>);

/// Naive forward pass in `f64`. Returns the input of every layer, the logits
/// and the activation pattern.
pub fn forward(model: &ModelContainer, x: &[f64]) -> (Vec<Act>, Vec<f64>, Pattern) {
    let mut cur = Act {
        shape: model.input_shape().to_vec(),
        v: x.to_vec(),
    };
    let mut inputs = Vec::new();
    let mut pattern = Vec::new();
    for layer in model.layers() {
        inputs.push(cur.clone());
        cur = match &layer.kind {
            LayerKind::Conv2d {
                geometry: g,
                weight,
                bias,
            } => conv(&cur, g, weight.data(), bias.data()),
            LayerKind::Linear { weight, bias } => {
                let (m, n) = (weight.shape()[0], weight.shape()[1]);
                let w = weight.data();
                let v = (0..m)
                    .map(|j| {
                        let mut s = f64::from(bias.data()[j]);
                        for i in 0..n {
                            s += f64::from(w[j * n + i]) * cur.v[i];
                        }
                        s
                    })
                    .collect();
                Act { shape: vec![m], v }
            }
            LayerKind::Relu => {
                pattern.push(cur.v.iter().map(|&v| usize::from(v > 0.0)).collect());
                Act {
                    shape: cur.shape.clone(),
                    v: cur.v.iter().map(|&v| v.max(0.0)).collect(),
                }
            }
            LayerKind::MaxPool2d(p) => {
                let (out, winners) = max_pool(&cur, p);
                pattern.push(winners);
                out
            }
            LayerKind::AvgPool2d(p) => avg_pool(&cur, p),
            LayerKind::Flatten => Act {
                shape: vec![cur.v.len()],
                v: cur.v.clone(),
            },
        };
    }
    let logits = cur.v;
    (inputs, logits, Pattern(pattern))
}

fn conv(x: &Act, g: &ConvGeometry, w: &[f32], b: &[f32]) -> Act {
    let (c, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let oh = (h + 2 * g.pad_h - g.kernel_h) / g.stride_h + 1;
    let ow = (wd + 2 * g.pad_w - g.kernel_w) / g.stride_w + 1;
    let mut v = vec![0.0; g.out_channels * oh * ow];
    for k in 0..g.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = f64::from(b[k]);
                for ci in 0..c {
                    for ky in 0..g.kernel_h {
                        for kx in 0..g.kernel_w {
                            let iy = (oy * g.stride_h + ky) as isize - g.pad_h as isize;
                            let ix = (ox * g.stride_w + kx) as isize - g.pad_w as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let wv = w[((k * c + ci) * g.kernel_h + ky) * g.kernel_w + kx];
                            s += f64::from(wv) * x.v[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                v[(k * oh + oy) * ow + ox] = s;
            }
        }
    }
    Act {
        shape: vec![g.out_channels, oh, ow],
        v,
    }
}

fn pool_cells(shape: &[usize], p: &PoolGeometry) -> (usize, usize, Vec<Vec<usize>>) {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let oh = (h - p.window) / p.stride + 1;
    let ow = (w - p.window) / p.stride + 1;
    let mut cells = Vec::new();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut idx = Vec::new();
                for dy in 0..p.window {
                    for dx in 0..p.window {
                        idx.push((ch * h + oy * p.stride + dy) * w + ox * p.stride + dx);
                    }
                }
                cells.push(idx);
            }
        }
    }
    (oh, ow, cells)
}

fn max_pool(x: &Act, p: &PoolGeometry) -> (Act, Vec<usize>) {
    let (oh, ow, cells) = pool_cells(&x.shape, p);
    let mut v = Vec::new();
    let mut winners = Vec::new();
    for cell in cells {
        let mut best = cell[0];
        for &i in &cell[1..] {
            if x.v[i] > x.v[best] {
                best = i;
            }
        }
        v.push(x.v[best]);
        winners.push(best);
    }
    (
        Act {
            shape: vec![x.shape[0], oh, ow],
            v,
        },
        winners,
    )
}

fn avg_pool(x: &Act, p: &PoolGeometry) -> Act {
    let (oh, ow, cells) = pool_cells(&x.shape, p);
    let v = cells
        .iter()
        .map(|cell| cell.iter().map(|&i| x.v[i]).sum::<f64>() / cell.len() as f64)
        .collect();
    Act {
        shape: vec![x.shape[0], oh, ow],
        v,
    }
}

#[derive(Debug, Clone)]
pub enum OracleRule {
    Z,
    ZPlus,
    ZBeta { low: Vec<f64>, high: Vec<f64> },
}

/// One connection `x_i → z_j`; `input == None` marks a zero-padding position
/// of channel `channel`.
struct Edge {
    input: Option<usize>,
    channel: usize,
    w: f64,
}

fn edges_of(layer: &LayerKind, in_shape: &[usize], j: usize) -> Vec<Edge> {
    match layer {
        LayerKind::Linear { weight, .. } => {
            let n = weight.shape()[1];
            (0..n)
                .map(|i| Edge {
                    input: Some(i),
                    channel: 0,
                    w: f64::from(weight.data()[j * n + i]),
                })
                .collect()
        }
        LayerKind::Conv2d {
            geometry: g, weight, ..
        } => {
            let (c, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
            let ow = (wd + 2 * g.pad_w - g.kernel_w) / g.stride_w + 1;
            let oh = (h + 2 * g.pad_h - g.kernel_h) / g.stride_h + 1;
            let k = j / (oh * ow);
            let (oy, ox) = ((j % (oh * ow)) / ow, j % ow);
            let mut out = Vec::new();
            for ci in 0..c {
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let iy = (oy * g.stride_h + ky) as isize - g.pad_h as isize;
                        let ix = (ox * g.stride_w + kx) as isize - g.pad_w as isize;
                        let inside = iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize;
                        out.push(Edge {
                            input: inside.then(|| (ci * h + iy as usize) * wd + ix as usize),
                            channel: ci,
                            w: f64::from(weight.data()[((k * c + ci) * g.kernel_h + ky) * g.kernel_w + kx]),
                        });
                    }
                }
            }
            out
        }
        _ => unreachable!("only parametric layers have edges"),
    }
}

/// Per-neuron evaluation of one rule step. Returns input relevance and the
/// relevance that landed on padding.
pub fn rule_step(rule: &OracleRule, layer: &LayerKind, x: &Act, rel_out: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let mut rel_in = vec![0.0; x.v.len()];
    let mut leak = 0.0;
    // Linear layers after a flatten see a flat input; bounds channels split it evenly.
    let bound_channel = |e: &Edge, n_channels: usize| -> usize {
        match layer {
            LayerKind::Linear { .. } => e.input.unwrap() / (x.v.len() / n_channels),
            _ => e.channel,
        }
    };
    for (j, &r) in rel_out.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        let edges = edges_of(layer, &x.shape, j);
        let z: Vec<f64> = edges
            .iter()
            .map(|e| {
                let xi = e.input.map_or(0.0, |i| x.v[i]);
                match rule {
                    OracleRule::Z => xi * e.w,
                    OracleRule::ZPlus => xi * e.w.max(0.0),
                    OracleRule::ZBeta { low, high } => {
                        let c = bound_channel(e, low.len());
                        xi * e.w - low[c] * e.w.max(0.0) - high[c] * e.w.min(0.0)
                    }
                }
            })
            .collect();
        let total: f64 = z.iter().sum();
        let denom = if total >= 0.0 { total + eps } else { total - eps };
        for (e, zi) in edges.iter().zip(z) {
            let share = zi / denom * r;
            match e.input {
                Some(i) => rel_in[i] += share,
                None => leak += share,
            }
        }
    }
    (rel_in, leak)
}

/// Relevance at every layer input, propagated naively from `rel_out` on the
/// logits. `inputs` are the layer inputs the propagation should see.
pub fn lrp(
    model: &ModelContainer,
    inputs: &[Act],
    rel_out: &[f64],
    first: &OracleRule,
    rest: &OracleRule,
    eps: f64,
) -> (Vec<Vec<f64>>, f64) {
    let layers = model.layers();
    let first_param = layers.iter().position(|l| l.kind.is_parametric()).unwrap();
    let mut per_layer = vec![Vec::new(); layers.len()];
    let mut cur = rel_out.to_vec();
    let mut leak = 0.0;
    for k in (0..layers.len()).rev() {
        let x = &inputs[k];
        cur = match &layers[k].kind {
            kind @ (LayerKind::Linear { .. } | LayerKind::Conv2d { .. }) => {
                let rule = if k == first_param { first } else { rest };
                let (r, l) = rule_step(rule, kind, x, &cur, eps);
                leak += l;
                r
            }
            LayerKind::Relu | LayerKind::Flatten => cur,
            LayerKind::MaxPool2d(p) => {
                let (_, winners) = max_pool(x, p);
                let mut r = vec![0.0; x.v.len()];
                for (o, &src) in winners.iter().enumerate() {
                    r[src] += cur[o];
                }
                r
            }
            LayerKind::AvgPool2d(p) => {
                let (_, _, cells) = pool_cells(&x.shape, p);
                let mut r = vec![0.0; x.v.len()];
                for (o, cell) in cells.iter().enumerate() {
                    for &i in cell {
                        r[i] += cur[o] / cell.len() as f64;
                    }
                }
                r
            }
        };
        per_layer[k] = cur.clone();
    }
    (per_layer, leak)
}

/// Naive reverse-mode gradient of logit `target` with respect to the input,
/// using the pattern of the forward pass at `x`.
pub fn gradient(model: &ModelContainer, x: &[f64], target: usize) -> Vec<f64> {
    let (inputs, logits, _) = forward(model, x);
    let mut g = vec![0.0; logits.len()];
    g[target] = 1.0;
    for (k, layer) in model.layers().iter().enumerate().rev() {
        let a = &inputs[k];
        g = match &layer.kind {
            LayerKind::Linear { weight, .. } => {
                let (m, n) = (weight.shape()[0], weight.shape()[1]);
                let mut out = vec![0.0; n];
                for j in 0..m {
                    for i in 0..n {
                        out[i] += f64::from(weight.data()[j * n + i]) * g[j];
                    }
                }
                out
            }
            LayerKind::Conv2d { .. } => {
                let mut out = vec![0.0; a.v.len()];
                for (j, &gj) in g.iter().enumerate() {
                    for e in edges_of(&layer.kind, &a.shape, j) {
                        if let Some(i) = e.input {
                            out[i] += e.w * gj;
                        }
                    }
                }
                out
            }
            LayerKind::Relu => g
                .iter()
                .zip(&a.v)
                .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                .collect(),
            LayerKind::Flatten => g,
            LayerKind::MaxPool2d(p) => {
                let (_, winners) = max_pool(a, p);
                let mut out = vec![0.0; a.v.len()];
                for (o, &src) in winners.iter().enumerate() {
                    out[src] += g[o];
                }
                out
            }
            LayerKind::AvgPool2d(p) => {
                let (_, _, cells) = pool_cells(&a.shape, p);
                let mut out = vec![0.0; a.v.len()];
                for (o, cell) in cells.iter().enumerate() {
                    for &i in cell {
                        out[i] += g[o] / cell.len() as f64;
                    }
                }
                out
            }
        };
    }
    g
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

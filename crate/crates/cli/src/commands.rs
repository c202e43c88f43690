use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clrp::eval::{
    ablation_study, center_pointing, explain_class, mean_pixel_image, neuron_ablation_matrix, run_pointing, sig9,
    top_active_neurons, Dataset, EvalConfig, HitCriterion,
};
use clrp::imageio::{encode_pgm, load_rgb, render_rgb, resize, Resize};
use clrp::inference::ranked_classes;
use clrp::model::model_info;
use clrp::{
    clrp_explain, forward, lrp_explain, predict_topk, preprocess, Execution, ForwardTrace, Method, ModelContainer,
    OutputRelevance, RuleConfig, SaliencyMap, Tensor, Variant,
};
use log::{info, warn};
use serde::Serialize;

use crate::{
    AblateArgs, Cli, Command, DatasetArgs, ExplainArgs, NeuronArgs, PointingArgs, RenderArgs, ResizeArg, UsageError,
};

pub fn run(cli: &Cli) -> Result<()> {
    let model_path = cli
        .model
        .as_ref()
        .ok_or_else(|| UsageError("no model given; pass --model or set CLRP_MODEL".into()))?;
    let model = clrp::load_model(model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let rules = RuleConfig::for_model(&model).with_epsilon(cli.epsilon);
    rules.validate().map_err(|e| UsageError(e.to_string()))?;
    match &cli.command {
        Command::Info => {
            print!("{}", model_info(&model));
            Ok(())
        }
        Command::Explain(args) => explain(&model, &rules, args),
        Command::Pointing(args) => with_workers(cli.workers, |exec| pointing(&model, &rules, args, exec)),
        Command::Ablate(args) => with_workers(cli.workers, |exec| ablate(&model, &rules, args, exec)),
        Command::Neurons(args) => neurons(&model, &rules, args),
    }
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce(Execution) -> Result<T> + Send) -> Result<T> {
    if workers == 0 {
        return Err(UsageError("--workers must be at least 1".into()).into());
    }
    if workers == 1 {
        return f(Execution::Sequential);
    }
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .context("starting worker pool")?;
        pool.install(|| f(Execution::Parallel))
    }
    #[cfg(not(feature = "parallel"))]
    {
        warn!("built without the `parallel` feature; running on one thread");
        f(Execution::Sequential)
    }
}

fn load_input(model: &ModelContainer, path: &Path, how: ResizeArg) -> Result<Tensor> {
    let img = load_rgb(path).with_context(|| format!("reading {}", path.display()))?;
    let [_, h, w] = model.input_shape();
    let how = match how {
        ResizeArg::Nearest => Resize::Nearest,
        ResizeArg::Bilinear => Resize::Bilinear,
    };
    if (img.width() as usize, img.height() as usize) != (w, h) {
        info!("resizing {}x{} to {w}x{h}", img.width(), img.height());
    }
    Ok(preprocess(model, &resize(&img, w as u32, h as u32, how))?)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_csv(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> clrp::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// PGM always, PNG on request. Returns the written paths.
fn write_heatmap(dir: &Path, stem: &str, map: &SaliencyMap, render: &RenderArgs) -> Result<Vec<PathBuf>> {
    let pgm = dir.join(format!("{stem}.pgm"));
    fs::write(&pgm, encode_pgm(map)).with_context(|| format!("writing {}", pgm.display()))?;
    let mut written = vec![pgm];
    if render.png {
        let png = dir.join(format!("{stem}.png"));
        render_rgb(map, render.colormap)
            .save(&png)
            .with_context(|| format!("writing {}", png.display()))?;
        written.push(png);
    }
    Ok(written)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn ser_sig9<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(sig9(*v))
}

fn ser_opt_sig9<S: serde::Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => s.serialize_some(&sig9(*v)),
        None => s.serialize_none(),
    }
}

#[derive(Serialize)]
struct Sidecar {
    image: String,
    method: Method,
    target: String,
    classes: Vec<usize>,
    class_names: Vec<String>,
    #[serde(serialize_with = "ser_sig9")]
    logit: f64,
    #[serde(serialize_with = "ser_sig9")]
    total_relevance: f64,
    /// `None` for gradient maps, which carry no conserved quantity.
    #[serde(serialize_with = "ser_opt_sig9")]
    conservation_residual: Option<f64>,
    #[serde(serialize_with = "ser_sig9")]
    padding_leakage: f64,
    height: usize,
    width: usize,
    files: Vec<String>,
}

enum Selection {
    Single(Vec<usize>),
    Multi(Vec<usize>),
}

fn resolve_class(model: &ModelContainer, trace: &ForwardTrace, spec: &str) -> Result<usize> {
    if spec == "top1" {
        return Ok(ranked_classes(trace.logits().data())[0]);
    }
    if let Ok(i) = spec.parse::<usize>() {
        if i >= model.num_classes() {
            return Err(UsageError(format!("class {i} out of range (model has {})", model.num_classes())).into());
        }
        return Ok(i);
    }
    model
        .class_index(spec)
        .ok_or_else(|| UsageError(format!("unknown class `{spec}`")).into())
}

fn select(model: &ModelContainer, trace: &ForwardTrace, args: &ExplainArgs) -> Result<Selection> {
    if let Some(list) = &args.multi_class {
        if args.method != Method::Lrp {
            return Err(UsageError("--multi-class is only defined for --method lrp".into()).into());
        }
        let classes = list
            .split(',')
            .map(|s| resolve_class(model, trace, s.trim()))
            .collect::<Result<Vec<_>>>()?;
        return Ok(Selection::Multi(classes));
    }
    if let Some(spec) = &args.targets {
        let k = spec
            .strip_prefix("top")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k >= 1 && k <= model.num_classes())
            .ok_or_else(|| {
                UsageError(format!(
                    "--targets expects top1..top{}, got `{spec}`",
                    model.num_classes()
                ))
            })?;
        return Ok(Selection::Single(
            predict_topk(model, trace, k)?
                .into_iter()
                .map(|p| p.class_index)
                .collect(),
        ));
    }
    let spec = args.target.as_deref().unwrap_or("top1");
    Ok(Selection::Single(vec![resolve_class(model, trace, spec)?]))
}

fn explain(model: &ModelContainer, rules: &RuleConfig, args: &ExplainArgs) -> Result<()> {
    let input = load_input(model, &args.image, args.resize)?;
    let trace = forward(model, &input)?;
    let selection = select(model, &trace, args)?;
    for p in predict_topk(model, &trace, model.num_classes().min(3))? {
        info!(
            "{:>3} {:<16} logit {:>10.4} p {:.4}",
            p.class_index, p.class_name, p.logit, p.probability
        );
    }
    ensure_dir(&args.out)?;
    let stem = sanitize(&args.image.file_stem().unwrap_or_default().to_string_lossy());

    let jobs: Vec<(Vec<usize>, bool)> = match selection {
        Selection::Single(cs) => cs.into_iter().map(|c| (vec![c], false)).collect(),
        Selection::Multi(cs) => vec![(cs, true)],
    };
    let total = jobs.len();
    let mut refused = Vec::new();
    for (classes, multi) in jobs {
        match explain_one(model, rules, args, &trace, &stem, &classes, multi) {
            Ok(path) => println!("{}", path.display()),
            // Keep going so the remaining targets still get their maps.
            Err(e) if is_refusal(&e) => refused.push(e),
            Err(e) => return Err(e),
        }
    }
    match refused.len() {
        0 => Ok(()),
        1 if total == 1 => Err(refused.remove(0)),
        n => {
            let first = refused.remove(0);
            for e in &refused {
                warn!("{e:#}");
            }
            Err(first.context(format!("{n} of {total} targets refused")))
        }
    }
}

fn is_refusal(e: &anyhow::Error) -> bool {
    e.downcast_ref::<clrp::Error>()
        .is_some_and(clrp::Error::is_numerical_refusal)
}

fn explain_one(
    model: &ModelContainer,
    rules: &RuleConfig,
    args: &ExplainArgs,
    trace: &ForwardTrace,
    stem: &str,
    classes: &[usize],
    multi: bool,
) -> Result<PathBuf> {
    let logits = trace.logits();
    let score: f64 = classes.iter().map(|&c| f64::from(logits.data()[c])).sum();
    let (map, residual) = if multi {
        let out = OutputRelevance::multi_class(logits, classes)?;
        let map = lrp_explain(model, trace, &out, rules)?;
        let r = residual(map.total_relevance, map.padding_leakage, score);
        (map, Some(r))
    } else {
        let c = classes[0];
        match args.method {
            Method::Clrp1 | Method::Clrp2 => {
                let variant = if args.method == Method::Clrp1 {
                    Variant::Clrp1
                } else {
                    Variant::Clrp2
                };
                let cm = clrp_explain(model, trace, c, variant, rules)?;
                let r = residual(cm.positive.total_relevance, cm.positive.padding_leakage, score);
                (cm.map, Some(r))
            }
            Method::Lrp => {
                let map = explain_class(model, trace, Method::Lrp, c, rules)?;
                let r = residual(map.total_relevance, map.padding_leakage, score);
                (map, Some(r))
            }
            m => (explain_class(model, trace, m, c, rules)?, None),
        }
    };
    let class_names: Vec<String> = classes.iter().map(|&c| model.class_names()[c].clone()).collect();
    let label = if multi {
        format!(
            "multi_{}",
            class_names.iter().map(|n| sanitize(n)).collect::<Vec<_>>().join("+")
        )
    } else {
        sanitize(&class_names[0])
    };
    let file_stem = format!("{stem}_{}_{label}", args.method);
    let files = write_heatmap(&args.out, &file_stem, &map, &args.render)?;
    let sidecar = Sidecar {
        image: args.image.display().to_string(),
        method: args.method,
        target: map.target.clone(),
        classes: classes.to_vec(),
        class_names,
        logit: score,
        total_relevance: map.total_relevance,
        conservation_residual: residual,
        padding_leakage: map.padding_leakage,
        height: map.height(),
        width: map.width(),
        files: files
            .iter()
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
    };
    write_json(&args.out.join(format!("{file_stem}.json")), &sidecar)?;
    Ok(files[0].clone())
}

fn residual(input_total: f64, leakage: f64, score: f64) -> f64 {
    (input_total + leakage - score).abs() / score.abs().max(f64::MIN_POSITIVE)
}

fn load_dataset(args: &DatasetArgs) -> Result<Dataset> {
    let mut ds =
        Dataset::load(&args.annotations).with_context(|| format!("loading dataset {}", args.annotations.display()))?;
    if let Some(n) = args.limit {
        ds.truncate(n);
    }
    if ds.is_empty() {
        return Err(UsageError("dataset is empty".into()).into());
    }
    info!("{} samples", ds.len());
    Ok(ds)
}

fn pointing(model: &ModelContainer, rules: &RuleConfig, args: &PointingArgs, exec: Execution) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let config = EvalConfig {
        execution: exec,
        hit_criterion: if args.overlap {
            HitCriterion::Overlap
        } else {
            HitCriterion::Containment
        },
        ..EvalConfig::default()
    };
    let mut report = run_pointing(model, &ds, &args.methods, &args.energy, rules, &config).map_err(|e| match e {
        clrp::Error::InvalidArgument(m) => anyhow::Error::new(UsageError(m)),
        e => e.into(),
    })?;
    if args.center_baseline {
        report.results.push(center_pointing(&ds, &args.energy));
    }
    ensure_dir(&args.data.out)?;
    write_json(&args.data.out.join("pointing.json"), &report)?;
    write_csv(&args.data.out.join("pointing.csv"), |w| report.write_csv(w))?;
    for r in &report.results {
        let accs: Vec<String> = r.levels.iter().map(|l| format!("{:.3}", l.accuracy)).collect();
        println!("{:<8} {}  mean {:.3}", r.method, accs.join(" "), r.mean_accuracy());
        if r.failures > 0 {
            warn!("{}: {} samples could not be explained", r.method, r.failures);
        }
    }
    Ok(())
}

fn ablate(model: &ModelContainer, rules: &RuleConfig, args: &AblateArgs, exec: Execution) -> Result<()> {
    if args.patch.is_multiple_of(2) {
        return Err(UsageError(format!("--patch must be odd, got {}", args.patch)).into());
    }
    let ds = load_dataset(&args.data)?;
    let config = EvalConfig {
        execution: exec,
        seed: args.seed,
        patch_size: args.patch,
        ..EvalConfig::default()
    };
    let report = ablation_study(model, &ds, &args.methods, rules, &config)?;
    ensure_dir(&args.data.out)?;
    write_json(&args.data.out.join("ablation.json"), &report)?;
    write_csv(&args.data.out.join("ablation.csv"), |w| report.write_csv(w))?;
    for r in &report.results {
        println!("{:<8} mean drop {:.4}", r.method, r.mean_drop);
    }
    Ok(())
}

fn neurons(model: &ModelContainer, rules: &RuleConfig, args: &NeuronArgs) -> Result<()> {
    if args.patch.is_multiple_of(2) {
        return Err(UsageError(format!("--patch must be odd, got {}", args.patch)).into());
    }
    model.layer_index(&args.layer).map_err(|e| UsageError(e.to_string()))?;
    let ds =
        Dataset::load(&args.annotations).with_context(|| format!("loading dataset {}", args.annotations.display()))?;
    let fill = mean_pixel_image(model, &ds)?;
    let input = load_input(model, &args.image, args.resize)?;
    let neurons = match args.top {
        Some(k) => {
            let trace = forward(model, &input)?;
            let top = top_active_neurons(model, &trace, &args.layer, k)?;
            if top.len() < k {
                warn!("only {} active neurons in `{}`", top.len(), args.layer);
            }
            top
        }
        None => args.neurons.clone(),
    };
    if neurons.is_empty() {
        return Err(UsageError("no neurons selected".into()).into());
    }
    let matrix = neuron_ablation_matrix(model, &input, &args.layer, &neurons, rules, &fill, args.patch)?;
    ensure_dir(&args.out)?;
    write_json(&args.out.join("neurons.json"), &matrix)?;
    write_csv(&args.out.join("neurons.csv"), |w| matrix.write_csv(w))?;
    let layer = sanitize(&args.layer);
    for (n, map) in neurons.iter().zip(&matrix.maps) {
        write_heatmap(&args.out, &format!("neuron_{layer}_{n}"), map, &args.render)?;
    }
    println!(
        "diagonal mean {:.4}, off-diagonal mean {:.4}",
        matrix.diagonal_mean(),
        matrix.off_diagonal_mean()
    );
    Ok(())
}

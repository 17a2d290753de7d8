use std::fs;
use std::path::Path;
use std::time::Instant;

use clap::ValueEnum;
use contour_forge::autodiff::gradcheck::{primitive_suite, Fault, GradCheckResult};
use contour_forge::config::RunConfig;
use contour_forge::data::{evaluate_model, load_dataset, load_scene, save_dataset, Scene, SceneParams, Split};
use contour_forge::model::Detection;
use contour_forge::training::gradcheck::{composite_check, loss_suite};
use contour_forge::training::{load_model, train_loop};
use contour_forge::{Error, Result};
use serde::Serialize;

use crate::{svg, EvalArgs, GenArgs, GradcheckArgs, InferArgs, TrainArgs, THREADS_ENV};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

/// Worker count: the env cap if set, else the available cores.
pub fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV}: expected a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn gen(a: &GenArgs) -> Result<u8> {
    let params = match &a.params {
        Some(p) => {
            let p: SceneParams = serde_json::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("params: {e}")))?;
            p.validate()?;
            p
        }
        None => SceneParams::default(),
    };
    if a.out.exists() {
        if fs::read_dir(&a.out)?.next().is_some() {
            if !a.force {
                return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", a.out.display())));
            }
            // only files a previous run could have written
            for e in fs::read_dir(&a.out)? {
                let path = e?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name == "manifest.json" || (name.starts_with("scene_") && name.ends_with(".json")) {
                    fs::remove_file(&path)?;
                }
            }
        }
    }
    let manifest = save_dataset(&a.out, &params, a.seed, a.count)?;
    eprintln!("wrote {} scenes to {}", manifest.scenes.len(), a.out.display());
    Ok(0)
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_json(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(k) = a.stages {
        cfg.model.stages = k;
    }
    if a.no_adaptive {
        cfg.train.adaptive = false;
    }
    if a.no_rescore {
        cfg.model.rescore = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    steps: usize,
    final_loss: Option<f64>,
    checkpoint: Option<String>,
    metrics: String,
    seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'a str>,
}

pub fn train(a: &TrainArgs) -> Result<u8> {
    let cfg = resolve_train_config(a)?;
    eprintln!("resolved config:\n{}", cfg.to_json());
    let ds = load_dataset(&a.data)?;
    let scenes: Vec<Scene> = ds.split(Split::Train).into_iter().cloned().collect();
    let start = Instant::now();
    let out = train_loop(&scenes, &cfg, Some(&a.out), a.resume.as_deref())?;
    let last = out.records.last().map(|r| r.loss.total);
    print_json(&TrainSummary {
        steps: cfg.train.steps,
        final_loss: last,
        checkpoint: out.checkpoint.as_ref().map(|p| p.display().to_string()),
        metrics: a.out.join(contour_forge::training::METRICS_FILE).display().to_string(),
        seconds: start.elapsed().as_secs_f64(),
        note: if out.records.is_empty() { Some("checkpoint already at the requested step count") } else { None },
    })?;
    Ok(0)
}

#[derive(Serialize)]
pub struct InferReport {
    pub scene: String,
    pub stages: usize,
    pub refine_calls: Vec<usize>,
    pub detections: Vec<Detection>,
}

pub fn infer(a: &InferArgs) -> Result<u8> {
    let mut expected = match &a.config {
        Some(p) => Some(RunConfig::from_json(&read_text(p)?)?.model),
        None => None,
    };
    if let Some(n) = a.num_vertices {
        let mut m = expected.unwrap_or_default();
        m.num_vertices = n;
        expected = Some(m);
    }
    let (model, cfg) = load_model(&a.ckpt, expected.as_ref())?;
    eprintln!("resolved config:\n{}", cfg.to_json());
    let scene = load_scene(&a.scene)?;
    let stages = a.stages.unwrap_or(cfg.model.stages);
    let out = model.infer(&scene.raster, stages)?;
    if let Some(path) = &a.svg {
        fs::write(path, svg::render(&scene, &out.detections, stages)?)?;
    }
    print_json(&InferReport {
        scene: a.scene.display().to_string(),
        stages,
        refine_calls: out.refine_calls,
        detections: out.detections,
    })?;
    Ok(0)
}

pub fn eval(a: &EvalArgs) -> Result<u8> {
    let (model, cfg) = load_model(&a.ckpt, None)?;
    eprintln!("resolved config:\n{}", cfg.to_json());
    let ds = load_dataset(&a.data)?;
    let scenes: Vec<&Scene> = match a.split {
        SplitArg::Train => ds.split(Split::Train),
        SplitArg::Val => ds.split(Split::Val),
        SplitArg::All => ds.scenes.iter().collect(),
    };
    let stages = a.stages.unwrap_or(cfg.model.stages);
    let start = Instant::now();
    let mut report = evaluate_model(&model, &scenes, stages, threads()?)?;
    if !scenes.is_empty() {
        report.mean_seconds_per_scene = Some(start.elapsed().as_secs_f64() / scenes.len() as f64);
    }
    print_json(&report)?;
    Ok(0)
}

#[derive(Serialize)]
struct GradcheckReport {
    seed: u64,
    passed: bool,
    results: Vec<GradCheckResult>,
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<u8> {
    let fault = match a.inject_fault {
        Some(f) => Fault::ScaleAnalytic(f),
        None => Fault::None,
    };
    let mut results = primitive_suite(a.seed, a.trials, fault)?;
    results.extend(loss_suite(a.seed, a.trials, fault)?);
    results.push(composite_check(a.seed, 24, fault)?);
    let passed = results.iter().all(|r| r.passed);
    for r in &results {
        eprintln!("{:<28} {:>4} max rel err {:.3e}  {}", r.name, r.trials, r.max_rel_error, if r.passed { "ok" } else { "FAIL" });
    }
    print_json(&GradcheckReport { seed: a.seed, passed, results })?;
    Ok(if passed { 0 } else { 3 })
}

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::step::{batch_terms, scene_loss, LossBreakdown};
use super::targets::{instance_targets, InstanceTarget};
use crate::autodiff::{load_checkpoint, save_checkpoint, Adam, AdamState, Checkpoint, Tensor};
use crate::config::RunConfig;
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::model::{Fwd, Model};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.ndjson";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<StepRecord>,
    pub checkpoint: Option<PathBuf>,
}

/// Precomputed targets of a scene.
pub fn scene_targets(scene: &Scene, model: &Model) -> Result<Vec<InstanceTarget>> {
    instance_targets(&scene.polygons, model.config.num_vertices, model.stride())
}

/// Scene order for an epoch; every scene once, seeded by run seed and epoch.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    order.shuffle(&mut rng);
    order
}

/// Random flip/transpose, seeded per step and batch slot.
fn augmented(scene: &Scene, seed: u64, step: usize, slot: usize) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03 ^ ((step as u64) << 8 | slot as u64));
    scene.dihedral(rng.gen_range(0..8))
}

/// Scenes used at `step`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    (0..batch)
        .map(|k| {
            let flat = step * batch + k;
            epoch_order(n, seed, flat / n)[flat % n]
        })
        .collect()
}

/// Runs `cfg.train.steps` optimizer steps. With `out_dir` the metrics log
/// and periodic checkpoints are written there; with `resume` training
/// continues from that checkpoint's step.
pub fn train_loop(scenes: &[Scene], cfg: &RunConfig, out_dir: Option<&Path>, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Data("no training scenes".into()));
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = Adam::new(&model.params);
    let mut start = 0;
    if let Some(path) = resume {
        let ck = load_checkpoint(path)?;
        let saved = config_from_meta(&ck)?;
        if saved.model != cfg.model {
            return Err(Error::Config("resume: model config differs from the checkpoint".into()));
        }
        model.params.load_from(&ck.tensors)?;
        adam.set_state(adam_state_from(&ck, &model)?)?;
        start = ck.meta["step"].as_u64().unwrap_or(0) as usize;
    }
    let targets: Vec<Vec<InstanceTarget>> = scenes.iter().map(|s| scene_targets(s, &model)).collect::<Result<_>>()?;

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut opts = OpenOptions::new();
            opts.create(true);
            if resume.is_some() {
                opts.append(true);
            } else {
                opts.write(true).truncate(true);
            }
            Some(opts.open(dir.join(METRICS_FILE))?)
        }
        None => None,
    };
    let mut last_ckpt: Option<PathBuf> = resume.map(Path::to_path_buf);
    let mut records = Vec::with_capacity(cfg.train.steps.saturating_sub(start));

    for step in start..cfg.train.steps {
        let lr = cfg.train.lr_at(step);
        let idx = batch_indices(scenes.len(), cfg.train.batch_size, cfg.seed, step);
        let mut f = Fwd::new(&model.params, true, cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9));
        let mut per_scene = Vec::with_capacity(idx.len());
        for (slot, &i) in idx.iter().enumerate() {
            let terms = if cfg.train.augment {
                let scene = augmented(&scenes[i], cfg.seed, step, slot)?;
                let t = scene_targets(&scene, &model)?;
                scene_loss(&model, &mut f, &scene.raster, &t, &cfg.weights, &cfg.train, None)?.0
            } else {
                scene_loss(&model, &mut f, &scenes[i].raster, &targets[i], &cfg.weights, &cfg.train, None)?.0
            };
            per_scene.push(terms);
        }
        let terms = batch_terms(&mut f, &per_scene);
        let (total, loss) = terms.combine(&mut f, &cfg.weights)?;
        if !loss.is_finite() {
            return Err(numerical(step, "loss", &last_ckpt));
        }
        let grads = f.tape.backward(total)?;
        let pg = grads.param_grads(&model.params);
        drop(f);
        if let Err(e) = adam.step(&mut model.params, &pg, lr) {
            return Err(numerical(step, &e.to_string(), &last_ckpt));
        }
        let rec = StepRecord {
            step,
            lr,
            seed: cfg.seed,
            loss,
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        records.push(rec);
        let done = step + 1;
        if let Some(dir) = out_dir {
            if done % cfg.train.checkpoint_every == 0 || done == cfg.train.steps {
                let path = dir.join(CHECKPOINT_FILE);
                save_training_checkpoint(&path, &model, &adam, cfg, done)?;
                last_ckpt = Some(path);
            }
        }
    }
    Ok(TrainOutcome {
        model,
        records,
        checkpoint: last_ckpt,
    })
}

fn numerical(step: usize, what: &str, last: &Option<PathBuf>) -> Error {
    let reference = match last {
        Some(p) => format!("last good checkpoint: {}", p.display()),
        None => "no checkpoint written yet".to_string(),
    };
    Error::Numerical(format!("non-finite {what} at step {step}; {reference}"))
}

pub fn save_training_checkpoint(path: &Path, model: &Model, adam: &Adam, cfg: &RunConfig, step: usize) -> Result<()> {
    let st = adam.state();
    let mut extra: Vec<(String, Tensor)> = Vec::new();
    for (i, (name, t)) in model.params.iter().enumerate() {
        extra.push((format!("{ADAM_M}{name}"), Tensor::new(t.shape().to_vec(), st.m[i].clone())?));
        extra.push((format!("{ADAM_V}{name}"), Tensor::new(t.shape().to_vec(), st.v[i].clone())?));
    }
    let mut tensors: Vec<(String, &Tensor)> = model.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    tensors.extend(extra.iter().map(|(n, t)| (n.clone(), t)));
    let meta = serde_json::json!({
        "step": step,
        "adam_step": st.step,
        "config": serde_json::to_value(cfg)?,
    });
    save_checkpoint(path, &meta, &tensors)?;
    Ok(())
}

pub fn config_from_meta(ck: &Checkpoint) -> Result<RunConfig> {
    let v = ck
        .meta
        .get("config")
        .ok_or_else(|| Error::Config("checkpoint has no embedded config".into()))?;
    let cfg: RunConfig = serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("embedded config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn adam_state_from(ck: &Checkpoint, model: &Model) -> Result<AdamState> {
    let find = |name: String| {
        ck.tensors
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.data().to_vec())
            .ok_or_else(|| Error::Config(format!("checkpoint lacks `{name}`")))
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, _) in model.params.iter() {
        m.push(find(format!("{ADAM_M}{name}"))?);
        v.push(find(format!("{ADAM_V}{name}"))?);
    }
    Ok(AdamState {
        step: ck.meta["adam_step"].as_u64().unwrap_or(0),
        m,
        v,
    })
}

/// Loads a trained model. With `expected`, the embedded model config must
/// agree on the contour vertex count.
pub fn load_model(path: &Path, expected: Option<&crate::config::ModelConfig>) -> Result<(Model, RunConfig)> {
    let ck = load_checkpoint(path)?;
    let cfg = config_from_meta(&ck)?;
    if let Some(exp) = expected {
        if exp.num_vertices != cfg.model.num_vertices {
            return Err(Error::Config(format!(
                "model.num_vertices: checkpoint has {}, requested {}",
                cfg.model.num_vertices, exp.num_vertices
            )));
        }
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    model.params.load_from(&ck.tensors)?;
    Ok((model, cfg))
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_contour-forge"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_PARAMS: &str = r#"{"width": 32, "height": 32, "min_instances": 1, "max_instances": 2,
    "length_min": 10.0, "length_max": 20.0, "thickness_min": 4.0, "thickness_max": 8.0, "margin": 2.0}"#;

const TINY_CONFIG: &str = r#"{"seed": 3,
    "model": {"num_vertices": 8, "layers": 1, "channels": 8, "heads": 2, "mlp_hidden": 16, "head_channels": 8, "tau_a": 0.01},
    "train": {"steps": 3, "checkpoint_every": 2}}"#;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("params.json"), SMALL_PARAMS).unwrap();
        fs::write(root.join("config.json"), TINY_CONFIG).unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn gen(&self, name: &str, count: usize, seed: u64) -> Output {
        run(&["gen", "--out", p(&self.path(name)), "--count", &count.to_string(), "--seed", &seed.to_string(), "--params", p(&self.path("params.json"))])
    }

    fn train(&self, data: &str, out: &str, extra: &[&str]) -> Output {
        let mut args = vec!["train", "--data", p(&self.path(data)), "--config", p(&self.path("config.json")), "--out", p(&self.path(out))]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        args.extend(extra.iter().map(|s| s.to_string()));
        bin().args(&args).output().unwrap()
    }
}

#[test]
fn gen_zero_count_writes_empty_manifest() {
    let f = Fixture::new();
    let o = f.gen("d", 0, 1);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_str(&fs::read_to_string(f.path("d/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["scenes"].as_array().unwrap().len(), 0);
}

#[test]
fn gen_is_deterministic_and_splits_by_seed() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("a", 10, 7)), 0);
    assert_eq!(code(&f.gen("b", 10, 7)), 0);
    let a = fs::read_to_string(f.path("a/manifest.json")).unwrap();
    assert_eq!(a, fs::read_to_string(f.path("b/manifest.json")).unwrap());
    assert_eq!(fs::read(f.path("a/scene_00003.json")).unwrap(), fs::read(f.path("b/scene_00003.json")).unwrap());
    let m: Value = serde_json::from_str(&a).unwrap();
    let train = m["scenes"].as_array().unwrap().iter().filter(|s| s["split"] == "train").count();
    assert_eq!(train, 8);
    let other = f.gen("c", 10, 8);
    assert_eq!(code(&other), 0);
    assert_ne!(a, fs::read_to_string(f.path("c/manifest.json")).unwrap());
}

#[test]
fn gen_refuses_non_empty_dir_without_force() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("d", 2, 1)), 0);
    let again = f.gen("d", 2, 1);
    assert_eq!(code(&again), 1);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let forced = run(&["gen", "--out", p(&f.path("d")), "--count", "1", "--seed", "1", "--force"]);
    assert_eq!(code(&forced), 0);
    assert!(!f.path("d/scene_00001.json").exists());
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    assert_eq!(code(&run(&["gen", "--count", "1"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    let f = Fixture::new();
    let o = run(&["eval", "--ckpt", p(&f.path("missing.ckpt")), "--data", p(&f.path("nowhere"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn invalid_config_names_the_field() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("d", 3, 1)), 0);
    fs::write(f.path("bad.json"), r#"{"model": {"tau_b": 1.5}}"#).unwrap();
    let o = run(&["train", "--data", p(&f.path("d")), "--config", p(&f.path("bad.json")), "--out", p(&f.path("o"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.tau_b"));
}

#[test]
fn train_infer_eval_roundtrip() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("d", 5, 2)), 0);
    let o = f.train("d", "run", &["--no-adaptive"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("resolved config") && stderr.contains("\"adaptive\": false"));

    let log = fs::read_to_string(f.path("run/metrics.ndjson")).unwrap();
    let steps: Vec<u64> = log.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![0, 1, 2]);
    for key in ["l_cls", "l_box", "l_off1", "l_off2", "l_rescore", "l_init", "l_transform", "total", "lr", "seed"] {
        assert!(log.lines().next().unwrap().contains(&format!("\"{key}\"")), "{key}");
    }

    // resume continues the counter and appends
    let ckpt = f.path("run/model.ckpt");
    let o = f.train("d", "run", &["--no-adaptive", "--steps", "5", "--resume", p(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(f.path("run/metrics.ndjson")).unwrap();
    let steps: Vec<u64> = log.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![0, 1, 2, 3, 4]);

    let scene = f.path("d/scene_00000.json");
    let svg = f.path("out.svg");
    let o = run(&["infer", "--ckpt", p(&ckpt), "--scene", p(&scene), "--svg", p(&svg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = stdout_json(&o);
    let dets = report["detections"].as_array().unwrap();
    assert!(!dets.is_empty(), "low tau_a should decode candidates");
    let svg_text = fs::read_to_string(&svg).unwrap();
    for id in ["raster", "ground-truth", "stage-0", "stage-1", "stage-2", "scores"] {
        assert!(svg_text.contains(&format!("id=\"{id}\"")), "{id}");
    }
    assert!(svg_text.contains("data:image/png;base64,"));
    // final-stage polygons carry exactly the JSON coordinates
    let finals: Vec<&str> = svg_text
        .split("<g id=\"stage-")
        .filter(|g| g.starts_with('2'))
        .flat_map(|g| g.split("points=\"").skip(1))
        .map(|s| s.split('"').next().unwrap())
        .collect();
    assert_eq!(finals.len(), dets.len());
    for (attr, d) in finals.iter().zip(dets) {
        let svg_pts: Vec<f64> = attr.split([' ', ',']).map(|v| v.parse().unwrap()).collect();
        let json_pts: Vec<f64> = d["contour"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|p| [p[0].as_f64().unwrap(), p[1].as_f64().unwrap()])
            .collect();
        assert_eq!(svg_pts, json_pts);
    }

    let o = run(&["infer", "--ckpt", p(&ckpt), "--scene", p(&scene)]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["detections"], report["detections"]);

    let o = run(&["infer", "--ckpt", p(&ckpt), "--scene", p(&scene), "--num-vertices", "32"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("num_vertices"));

    let o = bin()
        .args(["eval", "--ckpt", p(&ckpt), "--data", p(&f.path("d")), "--split", "all"])
        .env("CONTOUR_FORGE_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = stdout_json(&o);
    assert_eq!(r["per_scene"].as_array().unwrap().len(), 5);
    let (pr, re, fm) = (r["precision"].as_f64().unwrap(), r["recall"].as_f64().unwrap(), r["f_measure"].as_f64().unwrap());
    let expect = if pr + re > 0.0 { 2.0 * pr * re / (pr + re) } else { 0.0 };
    assert!((fm - expect).abs() < 1e-12);
    let single = bin()
        .args(["eval", "--ckpt", p(&ckpt), "--data", p(&f.path("d")), "--split", "all"])
        .env("CONTOUR_FORGE_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(stdout_json(&single)["per_scene"], r["per_scene"]);

    let bad = bin().args(["eval", "--ckpt", p(&ckpt), "--data", p(&f.path("d"))]).env("CONTOUR_FORGE_THREADS", "zero").output().unwrap();
    assert_eq!(code(&bad), 1);
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let o = run(&["gradcheck", "--seed", "5", "--trials", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = stdout_json(&o);
    assert_eq!(r["passed"], true);
    let names: Vec<&str> = r["results"].as_array().unwrap().iter().map(|x| x["name"].as_str().unwrap()).collect();
    assert!(names.iter().any(|n| n.starts_with("loss.qfl")));
    assert!(r["results"].as_array().unwrap().iter().all(|x| x["max_rel_error"].is_number()));

    let o = run(&["gradcheck", "--seed", "5", "--trials", "1", "--inject-fault", "1.5"]);
    assert_eq!(code(&o), 3);
    assert_eq!(stdout_json(&o)["passed"], false);
}

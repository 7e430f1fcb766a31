use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use liteflow::checkpoint;
use liteflow::flowio::{read_flo, write_flo, write_rgb};
use liteflow::{LiteFlowNet, ModelConfig};
use liteflow_tensor::Tensor;

fn liteflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_liteflow")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/liteflownet2.toml")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn params_on_shipped_config() {
    let o = liteflow(&["params", "--config", s(&shipped_config())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let total: f64 = text.lines().find_map(|l| l.strip_prefix("total parameters ")).unwrap().parse().unwrap();
    assert!((total - 6.42e6).abs() / 6.42e6 < 0.05, "{total}");
    assert!(text.contains("learnable layers 91"), "{text}");
}

#[test]
fn eval_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let f = Tensor::from_fn([1, 2, 6, 9], |_, c, y, x| (c as f64 - 0.5) * (x as f64 + 0.25 * y as f64));
    let p = dir.path().join("a.flo");
    write_flo(&p, &f).unwrap();
    let o = liteflow(&["eval", "--est", s(&p), "--gt", s(&p)]);
    assert!(o.status.success());
    let text = stdout(&o);
    let json: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(json["aee"], 0.0);
    assert_eq!(json["fl_all"], 0.0);
    assert_eq!(json["pixels"], 54);
    assert!(text.starts_with("AEE"));
}

#[test]
fn exit_codes() {
    assert_eq!(liteflow(&["gradcheck", "--op", "conv2d"]).status.code(), Some(0));
    assert_eq!(liteflow(&["gradcheck", "--op", "no_such_op"]).status.code(), Some(2));
    assert_eq!(liteflow(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(liteflow(&[]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.flo");
    std::fs::write(&bad, b"not a flow file").unwrap();
    assert_eq!(liteflow(&["eval", "--est", s(&bad), "--gt", s(&bad)]).status.code(), Some(1));
}

#[test]
fn viz_writes_png() {
    let dir = tempfile::tempdir().unwrap();
    let flo = dir.path().join("f.flo");
    let png = dir.path().join("f.png");
    write_flo(&flo, &Tensor::from_fn([1, 2, 5, 7], |_, c, _, x| if c == 0 { x as f64 } else { 1.0 })).unwrap();
    assert!(liteflow(&["viz", s(&flo), s(&png)]).status.success());
    assert!(std::fs::metadata(&png).unwrap().len() > 0);
}

#[test]
fn export_bases_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let o = liteflow(&["export-bases", "--level", "5", "--unit", "S", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("2 components × 32 tiles"), "{}", stdout(&o));
    assert!(dir.path().join("level5_S_bases.png").is_file());
    assert_eq!(liteflow(&["export-bases", "--unit", "R", "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(liteflow(&["export-bases", "--level", "9", "--out", s(dir.path())]).status.code(), Some(2));
}

#[test]
fn infer_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::reduced(5);
    let model = LiteFlowNet::initialized(cfg.clone(), 11).unwrap();
    checkpoint::save(&model.store, &dir.path().join("model.ckpt")).unwrap();
    std::fs::write(dir.path().join("model.toml"), cfg.to_toml_string().unwrap()).unwrap();
    let img = |shift: f64| Tensor::from_fn([1, 3, 40, 50], |_, c, y, x| ((x as f64 - shift) * 0.3 + y as f64 * 0.2 + c as f64).sin() * 0.5 + 0.5);
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.ppm"));
    write_rgb(&a, &img(0.0)).unwrap();
    write_rgb(&b, &img(1.5)).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let mut outs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("out{i}.flo"));
        let o = liteflow(&["infer", s(&a), s(&b), "--model", s(&ckpt), "--out", s(&out), "--viz", s(&dir.path().join("v.png"))]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(read_flo(&dir.path().join("out0.flo")).unwrap().shape().dims(), [1, 2, 40, 50]);
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("train.toml");
    std::fs::write(
        &config,
        r#"
seed = 3

[model]
levels = [{ level = 6, last_kernel = 3, omega = 3, cost_volume = { radius = 3, disp_step = 1, spatial_stride = 1 } }]

[schedule]
mode = "stagewise"
iterations = [2, 2]
batch_size = 1
learning_rate = 1e-4

[data]
crop = 32
synthetic = { extent = 32, min_objects = 1, max_objects = 1, max_displacement = 2.0 }
"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = liteflow(&["train", "--config", s(&config), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iteration,stage,lr,loss,level6,level5,level4,level3,level2,full");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,M6:S6,"));
    assert!(lines[4].starts_with("3,R6,"));
    for f in ["model.ckpt", "manifest.txt", "model.toml"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let mut model = LiteFlowNet::new(ModelConfig::load(&out.join("model.toml")).unwrap()).unwrap();
    checkpoint::load(&mut model.store, &out.join("model.ckpt")).unwrap();
}

#[test]
fn desk_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/train_desk.toml");
    let o = liteflow(&["params", "--config", s(&path)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("learnable layers 69"), "{}", stdout(&o));
}

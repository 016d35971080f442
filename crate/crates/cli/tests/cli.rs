use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shot::data::synthetic::{prototype_domain, prototypes, write_image_folder, DomainShift};
use shot::data::ImageShape;

fn shot() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_shot"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn");
    if !out.status.success() {
        eprintln!("stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    }
    out
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    out: PathBuf,
}

const CONFIG: &str = "task = toy
backbone = mlp
source = src
target = tgt
image_size = 8
resize_size = 8
bottleneck_dim = 16
mlp_hidden = 32
pretrained = false
source_epochs = 4
adapt_epochs = 2
mixmatch_epochs = 2
batch_size = 32
seed = 2019
";

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let shape = ImageShape::new(3, 8, 8);
    let protos = prototypes(3, shape, 1);
    let shift = DomainShift { gain: 0.8, offset: 0.1, pattern: 0.1, pattern_seed: 2 };
    let src = prototype_domain("src", &protos, shape, &[0, 1, 2], 20, 0.08, DomainShift::NONE, 3).unwrap();
    let tgt = prototype_domain("tgt", &protos, shape, &[0, 1, 2], 20, 0.08, shift, 4).unwrap();
    write_image_folder(&root.join("src"), &src).unwrap();
    write_image_folder(&root.join("tgt"), &tgt).unwrap();
    let config = dir.path().join("toy.cfg");
    fs::write(&config, format!("{CONFIG}data_root = {}\n", root.display())).unwrap();
    let out = dir.path().join("runs");
    Fixture { _dir: dir, root, config, out }
}

impl Fixture {
    fn cmd(&self, sub: &str) -> Command {
        let mut c = shot();
        c.arg(sub).arg("--config").arg(&self.config).arg("--out-dir").arg(&self.out);
        c
    }

    fn train(&self) {
        assert!(run(&mut self.cmd("train-source")).status.success());
    }
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

#[test]
fn missing_key_is_named() {
    let f = fixture();
    let cfg = f.config.with_file_name("nosource.cfg");
    let text = fs::read_to_string(&f.config).unwrap().replace("source = src\n", "");
    fs::write(&cfg, text).unwrap();
    let out = run(shot().args(["train-source", "--config"]).arg(&cfg).arg("--out-dir").arg(&f.out));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("source"));

    let out = run(shot().args(["train-source", "--config"]).arg(f.root.join("absent.cfg")));
    assert!(!out.status.success());
}

#[test]
fn train_source_writes_checkpoint_and_is_deterministic() {
    let f = fixture();
    f.train();
    let ckpt = f.out.join("toy_2019_source.ckpt");
    assert!(ckpt.exists());
    let log = f.out.join("toy_2019_source_log.csv");
    let first = fs::read_to_string(&log).unwrap();
    assert_eq!(first.lines().count(), 5);
    f.train();
    assert_eq!(fs::read_to_string(&log).unwrap(), first);
}

#[test]
fn shot_im_logs_zero_self_supervised_terms() {
    let f = fixture();
    f.train();
    assert!(run(f.cmd("adapt").args(["--mode", "shot-im"])).status.success());
    let log = f.out.join("toy_2019_shot-im_log.csv");
    for name in ["L_ssl1", "L_ssl2"] {
        let col = column(&log, name);
        assert_eq!(col.len(), 2);
        assert!(col.iter().all(|v| v.parse::<f64>().unwrap() == 0.0), "{name}: {col:?}");
    }
    assert!(f.out.join("toy_2019_shot-im.ckpt").exists());
    assert!(f.out.join("toy_2019_shot-im_predictions.csv").exists());
}

#[test]
fn adapt_refuses_source_data_and_missing_checkpoint() {
    let f = fixture();
    let out = run(&mut f.cmd("adapt"));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));

    f.train();
    let out = run(f.cmd("adapt").args(["--target", "src"]));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("source"));
}

#[test]
fn label_transfer_keeps_rows_and_partitions() {
    let f = fixture();
    f.train();
    assert!(run(&mut f.cmd("adapt")).status.success());
    let preds = f.out.join("toy_2019_shot_predictions.csv");
    let out = run(f.cmd("label-transfer").arg("--predictions").arg(&preds).arg("--checkpoint").arg(f.out.join("toy_2019_shot.ckpt")));
    assert!(out.status.success());
    let refined = f.out.join("toy_2019_shot++_predictions.csv");
    assert_eq!(shot::io::read_predictions(&refined).unwrap().rows(), shot::io::read_predictions(&preds).unwrap().rows());
    let mut idx: Vec<usize> = column(&f.out.join("toy_2019_shot++_split.csv"), "index").iter().map(|v| v.parse().unwrap()).collect();
    idx.sort_unstable();
    assert_eq!(idx, (0..60).collect::<Vec<_>>());
    assert!(f.out.join("toy_2019_shot++_entropy.svg").exists());

    // A black-box predictions file with no checkpoint starts from a fresh network.
    let out = run(f.cmd("label-transfer").arg("--predictions").arg(&preds));
    assert!(out.status.success());

    let bad = f.out.join("bad.csv");
    fs::write(&bad, "index,p_0,p_1,p_2\n0,0.5,0.2,0.1\n").unwrap();
    assert!(!run(f.cmd("label-transfer").arg("--predictions").arg(&bad)).status.success());
}

#[test]
fn evaluate_reports_text_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.csv");
    fs::write(&labels, "index,label\n0,0\n1,0\n2,1\n3,1\n").unwrap();
    let perfect = dir.path().join("perfect.csv");
    fs::write(&perfect, "index,p_0,p_1\n0,0.9,0.1\n1,0.8,0.2\n2,0.1,0.9\n3,0.3,0.7\n").unwrap();
    let zeros = dir.path().join("zeros.csv");
    fs::write(&zeros, "index,p_0,p_1\n0,0.9,0.1\n1,0.8,0.2\n2,0.6,0.4\n3,0.7,0.3\n").unwrap();
    let three = dir.path().join("three.csv");
    fs::write(&three, "index,p_0,p_1\n0,0.9,0.1\n1,0.8,0.2\n2,0.1,0.9\n3,0.7,0.3\n").unwrap();
    let csv = dir.path().join("report.csv");
    let out = run(shot()
        .args(["evaluate", "--labels"])
        .arg(&labels)
        .arg("--predictions")
        .args([&perfect, &zeros, &three])
        .arg("--csv")
        .arg(&csv));
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("100.00"));
    assert!(text.contains("50.00"));
    // 100, 50, 75 -> mean 75, population std sqrt(1250/3)
    let acc = column(&csv, "accuracy");
    assert_eq!(acc[..3], ["100".to_string(), "50".into(), "75".into()]);
    assert_eq!(acc[3].parse::<f64>().unwrap(), 75.0);
    assert!((acc[4].parse::<f64>().unwrap() - (1250.0f64 / 3.0).sqrt()).abs() < 1e-9);
    assert_eq!(column(&csv, "mean_per_class")[1], "50");

    let short = dir.path().join("short.csv");
    fs::write(&short, "index,p_0,p_1\n0,0.9,0.1\n").unwrap();
    assert!(!run(shot().args(["evaluate", "--labels"]).arg(&labels).arg("--predictions").arg(&short)).status.success());
}

#[test]
fn embeddings_have_one_row_per_sample_and_are_reproducible() {
    let f = fixture();
    f.train();
    let ckpt = f.out.join("toy_2019_source.ckpt");
    let a = f.out.join("a.csv");
    let b = f.out.join("b.csv");
    for path in [&a, &b] {
        assert!(run(f.cmd("export-embeddings").arg("--checkpoint").arg(&ckpt).arg("--output").arg(path)).status.success());
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 61);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 17);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

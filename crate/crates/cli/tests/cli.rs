use std::path::Path;
use std::process::Command;

use cnp_core::masking::Mask;
use cnp_core::model::ModelConfig;
use cnp_core::stroke::StrokeSequence;
use cnp_core::train::TrainConfig;

fn cnp(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_cnp")).args(args).output().unwrap();
    assert!(out.status.success(), "cnp {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    cnp(&["gen-data", "--classes", "2", "--per-class", "4", "--test-per-class", "2", "--seed", "3", "--out", p(&data)]);

    let mut model = ModelConfig::custom(1, 16, 2, 2);
    model.freq_dim = 16;
    let cfg = TrainConfig { batch_size: 2, total_steps: 2, checkpoint_every: 0, log_every: 1, model, data_dir: data.clone(), ..Default::default() };
    std::fs::write(d.join("train.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    let run = d.join("run");
    cnp(&["train", "--config", p(&d.join("train.json")), "--out", p(&run)]);
    let ckpt = run.join(cnp_core::train::LATEST_CHECKPOINT);
    assert_eq!(cnp_core::train::Checkpoint::load(&ckpt).unwrap().step, 2);
    cnp(&["train", "--config", p(&d.join("train.json")), "--out", p(&run), "--steps", "3"]);
    assert_eq!(cnp_core::train::Checkpoint::load(&ckpt).unwrap().step, 3, "resumes");

    let shard = std::fs::read_dir(data.join("test")).unwrap().next().unwrap().unwrap().path();
    let first = std::fs::read_to_string(&shard).unwrap().lines().next().unwrap().to_string();
    let seq_path = d.join("seq.json");
    std::fs::write(&seq_path, &first).unwrap();
    let seq = StrokeSequence::from_json(&first).unwrap();

    let mask_path = d.join("mask.json");
    cnp(&["mask", "--strategy", "random", "--ratio", "0.5", "--seed", "1", "--in", p(&seq_path), "--out", p(&mask_path)]);
    let mask: Mask = serde_json::from_str(&std::fs::read_to_string(&mask_path).unwrap()).unwrap();
    assert_eq!(mask.predict_count(), seq.len() / 2);

    let out = d.join("done.json");
    let img = d.join("done.png");
    let args = ["sample", "--ckpt", p(&ckpt), "--class", "1", "--ctx", p(&seq_path), "--mask", p(&mask_path), "--steps", "35", "--seed", "4"];
    cnp(&[&args[..], &["--out", p(&out), "--image", p(&img), "--size", "32"]].concat());
    let done = StrokeSequence::load(&out).unwrap();
    for i in (0..seq.len()).filter(|&i| mask.bits()[i]) {
        assert_eq!(done.strokes[i], seq.strokes[i]);
    }
    assert!(std::fs::metadata(&img).unwrap().len() > 0);
    let again = d.join("again.json");
    cnp(&[&args[..], &["--out", p(&again)]].concat());
    assert_eq!(StrokeSequence::load(&again).unwrap(), done, "seeded sampling is deterministic");

    let ppm = d.join("seq.ppm");
    cnp(&["render", "--in", p(&seq_path), "--size", "16", "--out", p(&ppm)]);
    assert!(std::fs::read(&ppm).unwrap().starts_with(b"P6"));

    let report = d.join("report.json");
    let csv = cnp(&["eval", "--ckpt", p(&ckpt), "--test", p(&data.join("test")), "--tasks", "random,none", "--n", "3", "--steps", "35", "--render-size", "16", "--out", p(&report)]);
    assert!(csv.starts_with("task,metric,value"), "{csv}");
    assert_eq!(std::fs::read_to_string(report.with_extension("csv")).unwrap(), csv);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json.is_object());
}

#[test]
fn rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_cnp"))
        .args(["render", "--in", p(&dir.path().join("missing.json")), "--out", p(&dir.path().join("x.bmp"))])
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).starts_with("error:"));
}

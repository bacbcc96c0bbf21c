use std::fs;
use std::path::Path;

use adverdecom::cli::{self, ReproSummary};
use adverdecom::eval::MetricsReport;

fn run(args: &[&str]) -> i32 {
    cli::run_command(std::iter::once("adverdecom").chain(args.iter().copied()))
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let spec = serde_json::json!({
        "height": 32, "width": 32, "bands": 12, "class_count": 3, "env_count": 2,
        "shading_amplitude": 0.5, "noise_sigma": 0.01, "region_scale": 8.0, "seed": 4
    });
    fs::write(d("spec.json"), spec.to_string()).unwrap();

    assert_eq!(run(&["synth", "--spec", &d("spec.json"), "--out", &d("scene"), "--factors"]), 0);
    for f in ["manifest.json", "values.bin", "labels.bin", "env_map.bin", "scene.json", "R.bin", "S.bin"] {
        assert!(tmp.path().join("scene").join(f).exists(), "{f}");
    }
    let before = snapshot(&tmp.path().join("scene"));

    assert_eq!(run(&["cluster", "--cube", &d("scene"), "--k", "2", "--seed", "1", "--out", &d("env")]), 0);
    assert!(tmp.path().join("env/envmodel.json").exists());

    fs::write(d("run.cfg"), "# small run\nepochs = 3\nk_pseudo = 2\ntrain_per_class = 20\nseed = 9\n").unwrap();
    let train = ["train", "--config", &d("run.cfg"), "--cube", &d("scene"), "--envmodel", &d("env"), "--out", &d("ckpt")];
    assert_eq!(run(&train), 0);
    for f in ["checkpoint.json", "params.bin", "history.csv", "split.json", "config.cfg"] {
        assert!(tmp.path().join("ckpt").join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(d("ckpt/history.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,L1,C1,C2,L2,disc_acc,train_oa");
    assert_eq!(history.lines().count(), 4);

    assert_eq!(run(&["eval", "--checkpoint", &d("ckpt"), "--cube", &d("scene"), "--out", &d("eval"), "--map"]), 0);
    let report = MetricsReport::load(&tmp.path().join("eval/metrics.json")).unwrap();
    let reread: MetricsReport =
        serde_json::from_str(&fs::read_to_string(d("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(report, reread);
    assert!(tmp.path().join("eval/map.ppm").exists());
    assert!(tmp.path().join("eval/legend.json").exists());

    assert_eq!(run(&["predict-map", "--checkpoint", &d("ckpt"), "--cube", &d("scene"), "--out", &d("map")]), 0);
    assert_eq!(fs::read(d("map/map.ppm")).unwrap(), fs::read(d("eval/map.ppm")).unwrap());

    // Re-running from the resolved config reproduces the checkpoint.
    assert_eq!(run(&["train", "--config", &d("ckpt/config.cfg"), "--out", &d("ckpt2")]), 0);
    assert_eq!(fs::read(d("ckpt/params.bin")).unwrap(), fs::read(d("ckpt2/params.bin")).unwrap());
    assert_eq!(history, fs::read_to_string(d("ckpt2/history.csv")).unwrap());

    assert_eq!(before, snapshot(&tmp.path().join("scene")), "inputs were modified");
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.cfg");
    assert_eq!(run(&["train", "--config", missing.to_str().unwrap()]), 1);
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "epochs = 3\nlearning_rat = 0.1\n").unwrap();
    assert_eq!(run(&["train", "--config", bad.to_str().unwrap()]), 1);
    assert_eq!(run(&["eval", "--checkpoint", "/nonexistent", "--cube", "/nonexistent", "--out", "x"]), 1);
    assert_eq!(run(&["no-such-command"]), 2);
    assert_eq!(run(&["cluster", "--cube"]), 2);
    assert_eq!(run(&["cluster", "--cube", "x", "--k", "three"]), 2);
}

#[test]
fn reproduce_synth_table_shape_and_means() {
    let tmp = tempfile::tempdir().unwrap();
    let one = tmp.path().join("one");
    assert_eq!(run(&["reproduce-synth", "--seeds", "5", "--epochs", "1", "--out", one.to_str().unwrap()]), 0);
    let s: ReproSummary = serde_json::from_str(&fs::read_to_string(one.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(s.rows.len(), 2);
    assert_eq!(s.rows[0].arm, "adver");
    assert_eq!(s.rows[1].arm, "vanilla");
    assert_eq!(s.mean_adver, s.rows[0].scores);

    let three = tmp.path().join("three");
    assert_eq!(run(&["reproduce-synth", "--seeds", "1,2,3", "--epochs", "1", "--out", three.to_str().unwrap()]), 0);
    let s: ReproSummary = serde_json::from_str(&fs::read_to_string(three.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(s.rows.len(), 6);
    for (arm, mean) in [("adver", s.mean_adver), ("vanilla", s.mean_vanilla)] {
        let rows: Vec<_> = s.rows.iter().filter(|r| r.arm == arm).collect();
        let oa = rows.iter().map(|r| r.scores.oa).sum::<f64>() / 3.0;
        let kappa = rows.iter().map(|r| r.scores.kappa).sum::<f64>() / 3.0;
        assert_eq!(mean.oa, oa);
        assert_eq!(mean.kappa, kappa);
    }
    assert!(three.join("seed-2/vanilla/metrics.json").exists());
}

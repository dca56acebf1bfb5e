use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

fn scadi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scadi"))
        .args(args)
        .env("SCADI_LOG", "quiet")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: std::path::PathBuf,
    run: std::path::PathBuf,
}

/// 16x16 data set and a one-epoch run, shared across tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let o = scadi(&["generate-data", "--out", p(&data), "--width", "16", "--height", "16"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("train=5482 test=1826"));

        let cfg = dir.path().join("run.cfg");
        fs::write(
            &cfg,
            "# tiny run\nwidth = 16\nheight = 16\nbatch_size = 16\ntrain_limit = 32\ncheckpoint_every = 1\n",
        )
        .unwrap();
        let run = dir.path().join("run");
        let o = scadi(&[
            "train", "--config", p(&cfg), "--dataset", p(&data), "--out", p(&run), "--epochs", "1",
            "--variant", "scadi",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        Fixture {
            _dir: dir,
            data,
            run,
        }
    })
}

#[test]
fn generate_prints_counts_and_a_stable_digest() {
    let f = fixture();
    let again = tempfile::tempdir().unwrap();
    let out = again.path().join("d");
    let o = scadi(&["generate-data", "--out", p(&out), "--width", "16", "--height", "16"]);
    let first = fs::read(f.data.join("manifest.tsv")).unwrap();
    assert_eq!(fs::read(out.join("manifest.tsv")).unwrap(), first);
    let digest = |s: String| s.lines().find(|l| l.starts_with("digest=")).unwrap().to_string();
    let o2 = scadi(&["generate-data", "--out", p(&out), "--width", "16", "--height", "16"]);
    assert_eq!(digest(stdout(&o)), digest(stdout(&o2)));
}

#[test]
fn missing_out_is_a_usage_error() {
    assert_eq!(scadi(&["generate-data"]).status.code(), Some(2));
}

#[test]
fn unknown_variant_lists_the_variants() {
    let o = scadi(&["train", "--variant", "vae", "--dataset", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for v in ["scadi", "nd-scadi", "unsup-causalvae", "causalvae"] {
        assert!(err.contains(v), "{err}");
    }
}

#[test]
fn one_epoch_writes_a_checkpoint_and_header() {
    let f = fixture();
    assert!(f.run.join("checkpoints/epoch_0001/manifest.txt").exists());
    assert!(f.run.join("checkpoints/final/manifest.txt").exists());
    let metrics = fs::read_to_string(f.run.join("metrics.tsv")).unwrap();
    for line in ["# batch_size = 16", "# lr_observer = 0.001", "# beta_observer = 20", "# dag_observer = 6, 1"] {
        assert!(metrics.contains(line), "{line}");
    }
    assert_eq!(metrics.lines().filter(|l| !l.starts_with('#')).count(), 2);
}

#[test]
fn evaluate_fresh_checkpoint_emits_every_key() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let o = scadi(&[
        "evaluate",
        "--checkpoint",
        p(&f.run.join("checkpoints/final")),
        "--lfset",
        p(&f.data.join("lfset")),
        "--out",
        p(out.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.path().join("report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    let mut want = vec![
        "diff_matrix", "labels", "lq", "avg_lq", "dagness", "adjacency", "rounded_adjacency",
        "is_dag", "edges_correct", "edges_incorrect", "edges_missing",
    ];
    want.sort_unstable();
    assert_eq!(keys, want);
    assert_eq!(v["lq"].as_array().unwrap().len(), 4);
}

fn intervene(checkpoint: &Path, data: &Path, png: &Path) -> Output {
    scadi(&[
        "intervene", "--checkpoint", p(checkpoint), "--dataset", p(data), "--concept", "0",
        "--values", "-1,1", "--count", "2", "--out", p(png),
    ])
}

#[test]
fn intervene_on_a_cyclic_graph_fails_with_the_report() {
    // Zero learning rates keep A at its all-0.5 start, a complete digraph.
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("frozen.cfg");
    fs::write(
        &cfg,
        "width = 16\nheight = 16\nbatch_size = 16\ntrain_limit = 16\nlr_observer = 0\nlr_interpreter = 0\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = scadi(&["train", "--config", p(&cfg), "--dataset", p(&f.data), "--out", p(&run), "--epochs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let png = dir.path().join("grid.png");
    let o = intervene(&run.join("checkpoints/final"), &f.data, &png);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("is_dag = false"));
    assert!(!png.exists());
}

#[test]
fn intervene_grid_is_reproducible() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let report = fs::read_to_string(f.run.join("structure.txt")).unwrap();
    // A drops below the rounding threshold within the first steps.
    assert!(report.contains("is_dag = true"), "{report}");
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    let ckpt = f.run.join("checkpoints/final");
    assert!(intervene(&ckpt, &f.data, &a).status.success());
    assert!(intervene(&ckpt, &f.data, &b).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(&a).unwrap()));
    let info = decoder.read_info().unwrap();
    // two rows, source column plus two values
    assert_eq!((info.info().width, info.info().height), (48, 32));
}

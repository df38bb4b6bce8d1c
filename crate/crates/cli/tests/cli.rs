use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qptrain::checkpoint::Checkpoint;
use qptrain::data::TokenizedCorpus;
use qptrain::diagnostics::{ModelObjective, Objective};
use tempfile::TempDir;

fn qptrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qptrain"))
        .args(args)
        .env_remove("QPTRAIN_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
[model]
n_layers = 1
d_model = 16
n_heads = 2
d_ff = 32
context_length = 16

[optimizer]
lr = 3e-3

[training]
total_steps = 12
global_batch = 4
micro_batch = 2
eval_interval = 6
eval_windows = 4
checkpoint_interval = 6
log_quant_errors = false

[data]
corpus = "corpus.bin"
"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let text = dir.path().join("text.txt");
        let out = qptrain(&["synth", "--out", s(&text), "--bytes", "40000", "--seed", "3"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = qptrain(&["prepare", "--corpus", s(&text), "--out", s(dir.path()), "--val-frac", "0.2"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn trained(&self) -> PathBuf {
        let run = self.path("run");
        if !run.join("final.ckpt").exists() {
            let cfg = self.config("tiny.toml", TINY);
            let out = qptrain(&["train", "--config", s(&cfg), "--out", s(&run), "--quiet"]);
            assert_eq!(code(&out), 0, "{}", stderr(&out));
        }
        run
    }
}

#[test]
fn prepare_reports_digest_and_missing_input() {
    let f = Fixture::new();
    let corpus = TokenizedCorpus::load(&f.path("corpus.bin")).unwrap();
    assert!(!corpus.val().is_empty());

    let missing = f.path("nope.txt");
    let out = qptrain(&["prepare", "--corpus", s(&missing), "--out", s(f.dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope.txt"), "{}", stderr(&out));
}

#[test]
fn train_writes_one_record_per_step_and_is_reproducible() {
    let f = Fixture::new();
    let run = f.trained();
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 12);
    assert!(run.join("ckpt-000006.ckpt").exists());
    assert!(run.join("manifest.json").exists());

    let again = f.path("run2");
    let cfg = f.path("tiny.toml");
    let out = qptrain(&["train", "--config", s(&cfg), "--out", s(&again), "--quiet"]);
    assert_eq!(code(&out), 0);
    assert_eq!(metrics, fs::read_to_string(again.join("metrics.jsonl")).unwrap());
}

#[test]
fn train_resumes_from_checkpoint() {
    let f = Fixture::new();
    let run = f.trained();
    let resumed = f.path("resumed");
    fs::create_dir_all(&resumed).unwrap();
    let out = qptrain(&[
        "train",
        "--config",
        s(&f.path("tiny.toml")),
        "--out",
        s(&resumed),
        "--resume",
        s(&run.join("ckpt-000006.ckpt")),
        "--quiet",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let full = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let tail = fs::read_to_string(resumed.join("metrics.jsonl")).unwrap();
    let last = |text: &str| text.lines().rev().take(6).map(str::to_string).collect::<Vec<_>>();
    assert_eq!(last(&full), last(&tail));
    assert_eq!(
        fs::read(run.join("final.ckpt")).unwrap(),
        fs::read(resumed.join("final.ckpt")).unwrap()
    );
}

#[test]
fn unknown_config_key_exits_1() {
    let f = Fixture::new();
    let cfg = f.config("bad.toml", &format!("{TINY}\n[extra]\nwhat = 1\n"));
    let out = qptrain(&["train", "--config", s(&cfg), "--out", s(&f.path("bad"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("extra"), "{}", stderr(&out));

    let out = qptrain(&["train", "--bogus-flag"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn divergence_exits_3_with_report() {
    let f = Fixture::new();
    let cfg = f.config("hot.toml", &TINY.replace("lr = 3e-3", "lr = 1e300"));
    let run = f.path("hot");
    let out = qptrain(&["train", "--config", s(&cfg), "--out", s(&run), "--quiet"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(run.join("divergence.json").exists());
}

#[test]
fn sharpness_at_zero_radius_is_zero() {
    let f = Fixture::new();
    let run = f.trained();
    let out_dir = f.path("sharp");
    let out = qptrain(&[
        "analyze",
        "sharpness",
        "--ckpt",
        s(&run.join("final.ckpt")),
        "--corpus",
        s(&f.path("corpus.bin")),
        "--rho",
        "0",
        "0.05",
        "--m",
        "2",
        "--windows",
        "4",
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("sharpness.json")).unwrap()).unwrap();
    let entries = report["entries"].as_array().unwrap();
    assert_eq!(entries[0]["sharpness"].as_f64().unwrap(), 0.0);
    assert!(entries[1]["sharpness"].as_f64().unwrap().is_finite());
}

#[test]
fn surface_center_is_the_checkpoint_loss_and_output_is_stable() {
    let f = Fixture::new();
    let run = f.trained();
    let ckpt = run.join("final.ckpt");
    let corpus_path = f.path("corpus.bin");
    let analyze = |dir: &Path| {
        let out = qptrain(&[
            "analyze",
            "surface",
            "--ckpt",
            s(&ckpt),
            "--corpus",
            s(&corpus_path),
            "--windows",
            "3",
            "--res",
            "5",
            "--out",
            s(dir),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    };
    let (a, b) = (f.path("surf-a"), f.path("surf-b"));
    analyze(&a);
    analyze(&b);
    let csv = fs::read_to_string(a.join("surface.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 25);
    assert_eq!(csv, fs::read_to_string(b.join("surface.csv")).unwrap());

    let surface: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("surface.json")).unwrap()).unwrap();
    let center = surface["loss"][2][2].as_f64().unwrap();

    let c = Checkpoint::load(&ckpt).unwrap();
    let corpus = TokenizedCorpus::load(&corpus_path).unwrap();
    let wins: Vec<Vec<u32>> = corpus
        .val_windows(c.model.config().context_length, 3)
        .into_iter()
        .map(<[u32]>::to_vec)
        .collect();
    let obj = ModelObjective::new(c.model, wins, 8).unwrap();
    let params = obj.params();
    let expected = obj.loss(&params, 0..obj.num_examples()).unwrap();
    assert_eq!(center, expected);
}

#[test]
fn outliers_find_a_planted_channel() {
    let f = Fixture::new();
    let run = f.trained();
    let mut c = Checkpoint::load(&run.join("final.ckpt")).unwrap();
    let planted = 5;
    let gain = c.model.params_mut().iter_mut().find(|p| p.name == "h0.ln2.g").unwrap();
    gain.value.data_mut()[planted] *= 1000.0;
    let ckpt = f.path("planted.ckpt");
    c.save(&ckpt).unwrap();

    let out_dir = f.path("outliers");
    let out = qptrain(&[
        "analyze",
        "outliers",
        "--ckpt",
        s(&ckpt),
        "--corpus",
        s(&f.path("corpus.bin")),
        "--layer",
        "block0.fc1",
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("outliers.json")).unwrap()).unwrap();
    let persistence = reports[0]["persistence"].as_object().unwrap();
    let channels: Vec<&String> = persistence.keys().collect();
    assert_eq!(channels, vec![&planted.to_string()]);
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let f = Fixture::new();
    let run = f.trained();
    let mut bytes = fs::read(run.join("final.ckpt")).unwrap();
    bytes.truncate(bytes.len() / 2);
    let bad = f.path("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = qptrain(&["analyze", "histogram", "--ckpt", s(&bad), "--param", "wte", "--out", s(&f.path("h"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn histogram_and_zerobin_reports() {
    let f = Fixture::new();
    let run = f.trained();
    let ckpt = run.join("final.ckpt");
    let out_dir = f.path("reports");
    let out = qptrain(&["analyze", "histogram", "--ckpt", s(&ckpt), "--param", "wte", "--bins", "10", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("histogram.csv")).unwrap();
    let total: u64 = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    let c = Checkpoint::load(&ckpt).unwrap();
    let wte = c.model.params().iter().find(|p| p.name == "wte").unwrap();
    assert_eq!(total as usize, wte.value.len());

    let out = qptrain(&["analyze", "zerobin", "--ckpt", s(&ckpt), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("zerobin.json")).unwrap()).unwrap();
    assert_eq!(report["stored_quantized"], false);
    let overall = report["overall"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&overall));
}

#[test]
fn profile_reports_activations_as_largest() {
    let out = qptrain(&["profile", "--model", "gpt2-small", "--batch", "8", "--seq", "1024"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("largest component activations"), "{}", stdout(&out));

    let out = qptrain(&["profile", "--batch", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let line = stdout(&out).lines().find(|l| l.starts_with("activations")).unwrap().to_string();
    assert_eq!(line.split_whitespace().nth(1), Some("0"));
}

#[test]
fn profile_flop_fraction_falls_with_sequence_length() {
    let out = qptrain(&["profile", "--flops", "--seq", "128", "1024", "8192"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let fractions: Vec<f64> = stdout(&out)
        .lines()
        .skip(2)
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(fractions.len(), 3);
    assert!(fractions.windows(2).all(|w| w[1] < w[0]), "{fractions:?}");

    let out = qptrain(&["profile", "--model", "layers=2,colour=3"]);
    assert_eq!(code(&out), 1);
}

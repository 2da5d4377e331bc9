use std::path::{Path, PathBuf};
use std::process::Command;

const CONFIG: &str = r#"
seed = 3
dtype = "f64"

[dataset]
noise_rate = 0.2
test_count = 30

[dataset.source]
kind = "synthetic"
classes = 3
per_class = 40
dim = 5
margin = 3.0

[model]
kind = "mlp"
hidden = [12, 12]

[train]
epochs = 4
batch_size = 16

[train.schedule]
peak_lr = 0.05
peak_epoch = 1
total_epochs = 4

[rewind]
epochs = [0, 4]

[retrain]
layers = [2]

[retrain.settings]
epochs = 3
peak_epoch = 1
batch_size = 16

[flip]
clean_probes = 5
noisy_probes = 5
budget = 6
reference_batch = 20
eval_subsample = 30

[etdrop]
p_gen = 0.4
p_mem = 0.2
grid_p_gen = [0.3, 0.5]
grid_p_mem = [0.2]
baselines = true
"#;

fn memloc(config: &Path, out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_memloc"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("MEMLOC_OUT")
        .output()
        .expect("binary runs")
}

fn pipeline(dir: &Path, text: &str) -> PathBuf {
    let config = dir.join("run.toml");
    std::fs::write(&config, text).unwrap();
    let out = dir.join("out");
    for cmd in ["account", "rewind", "retrain", "flip", "etdrop"] {
        let o = memloc(&config, &out, &[cmd]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    out
}

const PAYLOADS: [&str; 13] = [
    "curves.csv",
    "accounting.csv",
    "alignment.csv",
    "rewind.csv",
    "retrain_2.csv",
    "retrain.json",
    "flips.csv",
    "flip_units.csv",
    "detector.json",
    "etdrop.json",
    "forgotten.csv",
    "grid.csv",
    "baselines.csv",
];

#[test]
fn full_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out_a = pipeline(a.path(), CONFIG);
    let out_b = pipeline(b.path(), CONFIG);
    for name in PAYLOADS {
        let x = std::fs::read(out_a.join(name)).unwrap_or_else(|_| panic!("{name} missing"));
        assert_eq!(x, std::fs::read(out_b.join(name)).unwrap(), "{name} differs");
    }
    for e in [0, 4] {
        assert_eq!(
            std::fs::read(out_a.join(format!("checkpoints/weights_{e}.bin"))).unwrap(),
            std::fs::read(out_b.join(format!("checkpoints/weights_{e}.bin"))).unwrap()
        );
    }

    let header = |name: &str| std::fs::read_to_string(out_a.join(name)).unwrap().lines().next().unwrap().to_string();
    for name in PAYLOADS.iter().filter(|n| n.ends_with(".csv")) {
        assert!(header(name).starts_with("config_digest,seed,epoch"), "{name}: {}", header(name));
    }

    // rewinding to the final epoch reproduces the converged accuracies
    let curves = std::fs::read_to_string(out_a.join("curves.csv")).unwrap();
    let last: Vec<String> = curves.lines().last().unwrap().split(',').map(String::from).collect();
    let rewind = std::fs::read_to_string(out_a.join("rewind.csv")).unwrap();
    let at_t: Vec<Vec<String>> = rewind
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect::<Vec<_>>())
        .filter(|r| r[2] == "4")
        .collect();
    assert_eq!(at_t.len(), 3);
    for row in at_t {
        assert_eq!((&row[4], &row[5]), (&last[5], &last[6]));
    }

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out_a.join("report_flip.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "flip");
    assert_eq!(report["config"]["seed"], 3);
}

#[test]
fn jobs_do_not_change_payloads() {
    let a = tempfile::tempdir().unwrap();
    let config = a.path().join("run.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let out = a.path().join("out");
    assert!(memloc(&config, &out, &["train"]).status.success());
    assert!(memloc(&config, &out, &["rewind", "--jobs", "1"]).status.success());
    let one = std::fs::read(out.join("rewind.csv")).unwrap();
    assert!(memloc(&config, &out, &["rewind", "--jobs", "3"]).status.success());
    assert_eq!(one, std::fs::read(out.join("rewind.csv")).unwrap());
}

#[test]
fn errors_are_reported_on_one_line_with_a_kind() {
    let d = tempfile::tempdir().unwrap();
    let config = d.path().join("bad.toml");
    std::fs::write(&config, CONFIG.replace("budget = 6", "budgett = 6")).unwrap();
    let o = memloc(&config, &d.path().join("o"), &["flip"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error[config]:") && err.contains("budgett") && err.contains("line"), "{err}");

    let good = d.path().join("good.toml");
    std::fs::write(&good, CONFIG).unwrap();
    let o = memloc(&good, &d.path().join("fresh"), &["rewind"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[missing_checkpoint]"));

    // checkpoints from different training settings are refused
    let out = d.path().join("trained");
    assert!(memloc(&good, &out, &["train"]).status.success());
    let o = memloc(&good, &out, &["rewind", "--seed", "4"]);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[incompatible]"));
}

#[test]
fn memloc_out_is_the_default_output_root() {
    let d = tempfile::tempdir().unwrap();
    let config = d.path().join("run.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_memloc"))
        .args(["train", "--config"])
        .arg(&config)
        .env("MEMLOC_OUT", d.path().join("env_out"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.path().join("env_out/curves.csv").exists());
    assert!(d.path().join("env_out/checkpoints/manifest_4.json").exists());
}

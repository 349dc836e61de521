use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use flocora_cli::tools::{load_partition, HISTOGRAM_FILE, PARTITION_FILE};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_flocora"));
    c.env_remove(flocora_cli::DATA_ROOT_ENV);
    c
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    fs::write(&path, body).unwrap();
    path
}

fn read_metrics(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn smoke_run_is_fast_and_loss_never_rises() {
    let out = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let o = bin()
        .args(["run", "--quiet", "--config"])
        .arg(configs().join("smoke.toml"))
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(started.elapsed().as_secs() < 60);

    let header = csv::Reader::from_path(out.path().join("metrics.csv")).unwrap().headers().unwrap().clone();
    assert_eq!(
        &header.iter().take(7).collect::<Vec<_>>(),
        &["round", "seed", "accuracy", "loss", "uplink_bytes", "downlink_bytes", "cumulative_tcc"]
    );
    let rows = read_metrics(&out.path().join("metrics.csv"));
    assert_eq!(rows.len(), 5);
    let losses: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"], serde_json::json!([0]));
    let last_acc: f64 = rows[4][2].parse().unwrap();
    assert_eq!(summary["final_accuracy"]["mean"].as_f64(), Some(last_acc));
    let tcc: f64 = rows[4][6].parse().unwrap();
    assert_eq!(summary["total_tcc_bytes"]["mean"].as_f64(), Some(tcc));

    let resolved = fs::read_to_string(out.path().join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("lr = 0.05") && resolved.contains("momentum = 0.9"));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let o = bin().args(["run", "-q", "--config"]).arg(configs().join("smoke.toml")).arg("--out").arg(first.path()).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let o = bin()
        .args(["run", "-q", "--config"])
        .arg(first.path().join("config.resolved.toml"))
        .arg("--out")
        .arg(second.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(first.path().join("metrics.csv")).unwrap(),
        fs::read(second.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn sample_std_over_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("smoke.toml")).unwrap().replace("seeds = [0]", "seeds = [3, 4]");
    let config = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let o = bin().args(["run", "-q", "--config"]).arg(&config).arg("--out").arg(&out).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_metrics(&out.join("metrics.csv"));
    let finals: Vec<f64> = rows.iter().filter(|r| &r[0] == "4").map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(finals.len(), 2);
    let mean = (finals[0] + finals[1]) / 2.0;
    let std = ((finals[0] - mean).powi(2) + (finals[1] - mean).powi(2)).sqrt();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!((summary["final_accuracy"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!((summary["final_accuracy"]["std"].as_f64().unwrap() - std).abs() < 1e-12);
}

#[test]
fn missing_dataset_directory_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-cifar");
    let config = write_config(
        dir.path(),
        &format!("[model]\narch = \"resnet8\"\n\n[dataset]\nkind = \"cifar10\"\npath = {:?}\n", missing),
    );
    let o = bin().args(["run", "--config"]).arg(&config).arg("--out").arg(dir.path().join("out")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&missing.display().to_string()), "{}", stderr(&o));

    // Same through the environment variable.
    let config = write_config(dir.path(), "[model]\narch = \"resnet8\"\n\n[dataset]\nkind = \"cifar10\"\n");
    let o = bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .env(flocora_cli::DATA_ROOT_ENV, &missing)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&missing.display().to_string()));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("smoke.toml")).unwrap().replace("rounds = 5", "rounds = 5\nrouns = 6");
    let config = write_config(dir.path(), &text);
    let o = bin().args(["run", "--config"]).arg(&config).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rouns"), "{}", stderr(&o));
}

#[test]
fn size_report_prints_known_sizes() {
    let o = bin().args(["size-report", "--model", "resnet8", "--rank", "32"]).output().unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("1227594") && text.contains("256842"), "{text}");
    assert!(text.contains("982.29") && text.contains("205.77"), "{text}");

    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("sizes.csv");
    let o = bin().args(["size-report", "--rank", "8", "--rounds", "0", "--csv"]).arg(&csv_path).output().unwrap();
    assert!(o.status.success());
    let rows = read_metrics(&csv_path);
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| &r[8] == "0"));

    let o = bin().args(["size-report", "--model", "vgg11"]).output().unwrap();
    assert!(!o.status.success());
}

#[test]
fn partition_outputs_and_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let config = configs().join("desk.toml");
    let run = |clients: &str, alpha: &str, out: &Path| {
        let o = bin()
            .args(["partition", "--clients", clients, "--alpha", alpha, "--seed", "1", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let text = stdout(&o);
        let entropy: f64 = text.split("entropy ").nth(1).unwrap().split(';').next().unwrap().parse().unwrap();
        entropy
    };

    let single = dir.path().join("single");
    run("1", "0.5", &single);
    let rows = read_metrics(&single.join(HISTOGRAM_FILE));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0].iter().collect::<Vec<_>>(), &["0", "600", "200", "200", "200"]);

    let skewed = dir.path().join("skewed");
    let flat = dir.path().join("flat");
    let h_skewed = run("8", "0.5", &skewed);
    let h_flat = run("8", "1000000", &flat);
    assert!(h_skewed < h_flat, "{h_skewed} vs {h_flat}");

    let first = load_partition(&skewed.join(PARTITION_FILE)).unwrap();
    let again = dir.path().join("again");
    run("8", "0.5", &again);
    assert_eq!(first, load_partition(&again.join(PARTITION_FILE)).unwrap());
    let sizes: usize = first.sizes().iter().sum();
    assert_eq!(sizes, 600);
}

#[test]
fn quantize_roundtrip_check_succeeds() {
    let o = bin().args(["quantize-roundtrip-check", "--model", "tiny", "--bits", "4"]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("4-bit") && stdout(&o).contains(": ok"));
    let o = bin().args(["quantize-roundtrip-check", "--bits", "3"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

use std::path::Path;
use std::process::Command;

const SMALL: [&str; 14] = [
    "--set",
    "data.samples=8",
    "--set",
    "data.synth.image_size=32",
    "--set",
    "train.input_size=32",
    "--set",
    "train.mc_samples=2",
    "--set",
    "model.backbone.base_channels=4",
    "--set",
    "model.backbone.routed_channels=8",
    "--set",
    "train.epochs=1",
];

fn graphseg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_graphseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn one_epoch_smoke_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--out", arg(&run)];
    args.extend(SMALL);
    let out = graphseg(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "config.toml",
        "checkpoint.safetensors",
        "run_record.json",
        "metrics.csv",
        "loss_curve.svg",
        "lambda_curve.svg",
        "val_dice.svg",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let resolved = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(resolved.contains("samples = 8"));

    let data = dir.path().join("data");
    let mut args = vec!["synth-data", "--out", arg(&data)];
    args.extend(SMALL);
    assert!(graphseg(&args).status.success());
    assert!(data.join("config.toml").is_file());

    let ck = run.join("checkpoint.safetensors");
    let pred = dir.path().join("pred");
    let out = graphseg(&[
        "infer",
        "--checkpoint",
        arg(&ck),
        "--input",
        arg(&data.join("images")),
        "--out",
        arg(&pred),
        "--mc-samples",
        "2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let names: Vec<String> = std::fs::read_dir(&pred)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    for suffix in [
        "_region_mask.png",
        "_vessel_prob.png",
        "_region_variance.png",
    ] {
        assert_eq!(
            names.iter().filter(|n| n.ends_with(suffix)).count(),
            8,
            "{suffix}"
        );
    }

    let eval = dir.path().join("eval");
    let out = graphseg(&[
        "evaluate",
        "--checkpoint",
        arg(&ck),
        "--out",
        arg(&eval),
        "--compare",
        arg(&ck),
        "--panels",
        "1",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(eval.join("metrics.csv").is_file());
    assert!(eval.join("paired_t_test.csv").is_file());

    let report = dir.path().join("report");
    let out = graphseg(&[
        "report",
        "--record",
        arg(&run.join("run_record.json")),
        "--out",
        arg(&report),
    ]);
    assert!(out.status.success());
    assert!(report.join("lambda_curve.svg").is_file());

    let resumed = dir.path().join("resumed");
    let out = graphseg(&["train", "--out", arg(&resumed), "--resume", arg(&ck)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn invalid_configuration_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = graphseg(&[
        "train",
        "--out",
        arg(dir.path()),
        "--set",
        "train.input_size=30",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = graphseg(&[
        "train",
        "--out",
        arg(dir.path()),
        "--set",
        "train.no_such_key=1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", arg(dir.path()), "--set", "train.lr=1e30"];
    args.extend(SMALL);
    args.extend(["--set", "train.epochs=3"]);
    let out = graphseg(&args);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence at epoch"));
}

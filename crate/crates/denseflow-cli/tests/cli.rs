//! End-to-end tests of the `denseflow` binary.

use std::path::Path;
use std::process::{Command, Output};

use denseflow::data::{read_ppm, write_flo};
use denseflow::flow::FlowField;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_denseflow"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Final `epe <x>` line of an eval run.
fn epe_of(text: &str) -> f64 {
    text.lines()
        .filter_map(|l| l.strip_prefix("epe "))
        .last()
        .expect("epe line present")
        .parse()
        .unwrap()
}

const TINY_NET: &[&str] = &[
    "--set", "growth_rate=6",
    "--set", "num_blocks_down=2",
    "--set", "num_blocks_up=2",
    "--set", "flow_levels=3",
    "--set", "layers_per_block=2",
    "--set", "initial_channels=12",
    "--set", "dropout_rate=0",
];

fn train_tiny(data: &Path, ckpt: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<&str> = vec![
        "train",
        "--data", data.to_str().unwrap(),
        "--checkpoint", ckpt.to_str().unwrap(),
        "--set", "max_iters=2",
        "--set", "batch_size=2",
        "--set", "checkpoint_every=100",
        "--set", "seed=3",
    ];
    args.extend_from_slice(TINY_NET);
    args.extend_from_slice(extra);
    bin().args(&args).output().expect("binary runs")
}

#[test]
fn pipeline_predict_then_eval_matches_eval_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("ck.bin");
    stdout(&run(&[
        "gen-data",
        "--out", data.to_str().unwrap(),
        "--count", "3",
        "--seed", "11",
        "--set", "size=32",
        "--set", "max_displacement=3",
    ]));
    stdout(&train_tiny(&data, &ckpt, &[]));

    // eval straight from the checkpoint over the dataset
    let direct = stdout(&run(&[
        "eval",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
    ]));

    // same metric assembled from per-sample predict + eval
    let mut weighted = 0.0f64;
    let mut pixels = 0usize;
    for i in 0..3 {
        let pred = dir.path().join(format!("pred{i}.flo"));
        stdout(&run(&[
            "predict",
            "--checkpoint", ckpt.to_str().unwrap(),
            "--img1", data.join(format!("{i:05}_img1.ppm")).to_str().unwrap(),
            "--img2", data.join(format!("{i:05}_img2.ppm")).to_str().unwrap(),
            "--out", pred.to_str().unwrap(),
        ]));
        let one = stdout(&run(&[
            "eval",
            "--pred", pred.to_str().unwrap(),
            "--gt", data.join(format!("{i:05}_flow.flo")).to_str().unwrap(),
            "--mask", data.join(format!("{i:05}_valid.pgm")).to_str().unwrap(),
        ]));
        let n: usize = one
            .lines()
            .find_map(|l| l.strip_prefix("pixels "))
            .unwrap()
            .parse()
            .unwrap();
        weighted += epe_of(&one) * n as f64;
        pixels += n;
    }
    let assembled = weighted / pixels as f64;
    assert!(
        (epe_of(&direct) - assembled).abs() < 1e-6,
        "direct {} vs assembled {assembled}",
        epe_of(&direct)
    );
}

#[test]
fn training_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    stdout(&run(&[
        "gen-data",
        "--out", data.to_str().unwrap(),
        "--count", "2",
        "--set", "size=32",
    ]));
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    let out_a = stdout(&train_tiny(&data, &a, &[]));
    let out_b = stdout(&train_tiny(&data, &b, &[]));
    let log = |s: &str| {
        s.lines()
            .filter(|l| l.starts_with("iter "))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(log(&out_a), log(&out_b));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn visualize_renders_zero_flow_as_white() {
    let dir = tempfile::tempdir().unwrap();
    let flo = dir.path().join("zero.flo");
    let img = dir.path().join("zero.ppm");
    write_flo(&flo, &FlowField::zeros(8, 6)).unwrap();
    stdout(&run(&[
        "visualize",
        "--flow", flo.to_str().unwrap(),
        "--out", img.to_str().unwrap(),
    ]));
    let image = read_ppm(&img).unwrap();
    assert_eq!(image.shape(), &[3, 6, 8]);
    assert!(image.data().iter().all(|&v| v == 1.0));
}

#[test]
fn plan_reports_default_architecture() {
    let text = stdout(&run(&["plan"]));
    assert!(text.contains("growth_rate = 12"));
    let params: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("parameters = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((1_500_000..=2_500_000).contains(&params), "{params}");
}

#[test]
fn predict_pads_odd_sized_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("ck.bin");
    // 40 is not divisible by the tiny network's stride of 8
    stdout(&run(&[
        "gen-data",
        "--out", data.to_str().unwrap(),
        "--count", "2",
        "--set", "size=40",
    ]));
    stdout(&train_tiny(&data, &ckpt, &[]));
    let odd = dir.path().join("odd");
    stdout(&run(&[
        "gen-data",
        "--out", odd.to_str().unwrap(),
        "--count", "1",
        "--set", "size=36",
    ]));
    let pred = dir.path().join("odd.flo");
    stdout(&run(&[
        "predict",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--img1", odd.join("00000_img1.ppm").to_str().unwrap(),
        "--img2", odd.join("00000_img2.ppm").to_str().unwrap(),
        "--out", pred.to_str().unwrap(),
    ]));
    let flow = denseflow::data::read_flo(&pred).unwrap();
    assert_eq!((flow.width, flow.height), (36, 36));
}

#[test]
fn usage_errors_exit_two_and_missing_files_exit_one() {
    let unknown = run(&["train", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).starts_with("error: "));

    let bad_key = run(&["plan", "--set", "not_a_key=1"]);
    assert_eq!(bad_key.status.code(), Some(2));

    let missing = run(&["eval", "--pred", "/nonexistent.flo", "--gt", "/nonexistent.flo"]);
    assert_eq!(missing.status.code(), Some(1));

    let no_command = bin().output().unwrap();
    assert_eq!(no_command.status.code(), Some(2));
}

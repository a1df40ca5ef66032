//! Command-line front end: dataset generation, training, prediction,
//! evaluation, flow visualization, gradient checking and architecture
//! inspection.
//!
//! Exit codes: 0 success, 1 operational failure (missing files, corrupt
//! data, training abort), 2 usage or configuration error. Diagnostics are
//! one line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use denseflow::config::{
    apply_network, apply_toy, apply_train, describe_network, describe_toy, describe_train,
    ConfigFile,
};
use denseflow::data::{
    flow_to_color, gen_toy_pair, read_flo, read_pgm_mask, read_ppm, read_sample, sample_indices,
    write_flo, write_ppm, write_sample, FlowSample, ToyConfig,
};
use denseflow::eval::{epe, zero_flow_baseline, EpeReport, SampleEpe};
use denseflow::flow::FlowField;
use denseflow::gradcheck::run_primitive_suite;
use denseflow::net::{plan, Network, NetworkConfig};
use denseflow::rng::StreamRng;
use denseflow::train::{load_checkpoint, train, AdamState, Checkpoint, TrainConfig};
use denseflow::{Error, Tensor};

const USAGE: &str = "\
usage: denseflow <command> [options]

commands:
  gen-data   --out DIR --count N [--seed S] [--config FILE] [--set k=v]...
  train      --data DIR --checkpoint FILE [--eval-data DIR] [--resume]
             [--config FILE] [--set k=v]...
  predict    --checkpoint FILE --img1 PPM --img2 PPM --out FLO
  eval       --pred FLO --gt FLO [--mask PGM]
  eval       --checkpoint FILE --data DIR [--baseline]
  visualize  --flow FLO --out PPM [--max-mag X]
  gradcheck  [--seed S]
  plan       [--config FILE] [--set k=v]...

configuration files hold one `key = value` per line; `--set` overrides
individual keys. `plan` and `train` accept network keys, `train` also
accepts training keys, `gen-data` accepts toy generator keys.";

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Failure {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn run(message: impl Into<String>) -> Failure {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

// ---- argument parsing -----------------------------------------------------

struct Args {
    /// (name without leading dashes, value); bare flags carry an empty value.
    options: Vec<(String, String)>,
}

impl Args {
    /// `value_opts` take one argument, `flag_opts` take none; anything else
    /// is a usage error.
    fn parse(raw: &[String], value_opts: &[&str], flag_opts: &[&str]) -> Result<Args, Failure> {
        let mut options = Vec::new();
        let mut it = raw.iter();
        while let Some(arg) = it.next() {
            let name = arg
                .strip_prefix("--")
                .ok_or_else(|| Failure::usage(format!("unexpected argument {arg:?}")))?;
            if flag_opts.contains(&name) {
                options.push((name.to_string(), String::new()));
            } else if value_opts.contains(&name) {
                let value = it
                    .next()
                    .ok_or_else(|| Failure::usage(format!("--{name} needs a value")))?;
                options.push((name.to_string(), value.clone()));
            } else {
                return Err(Failure::usage(format!("unknown option --{name}")));
            }
        }
        Ok(Args { options })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.options
            .iter()
            .rev()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    fn require(&self, name: &str) -> Result<&str, Failure> {
        self.get(name)
            .ok_or_else(|| Failure::usage(format!("--{name} is required")))
    }

    fn has(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    /// Config file assignments followed by `--set` overrides, in order.
    fn config_pairs(&self) -> Result<Vec<(String, String)>, Failure> {
        let mut file = match self.get("config") {
            Some(path) => ConfigFile::from_path(Path::new(path))?,
            None => ConfigFile::default(),
        };
        for (name, value) in &self.options {
            if name == "set" {
                let (k, v) = value
                    .split_once('=')
                    .ok_or_else(|| Failure::usage(format!("--set expects key=value, got {value:?}")))?;
                file.set(k.trim(), v.trim());
            }
        }
        Ok(file.pairs)
    }
}

fn parse_u64_arg(name: &str, v: &str) -> Result<u64, Failure> {
    v.parse()
        .map_err(|_| Failure::usage(format!("--{name}: expected an integer, got {v:?}")))
}

fn parse_usize_arg(name: &str, v: &str) -> Result<usize, Failure> {
    v.parse()
        .map_err(|_| Failure::usage(format!("--{name}: expected an integer, got {v:?}")))
}

// ---- shared helpers -------------------------------------------------------

fn load_dataset(dir: &Path) -> Result<Vec<FlowSample>, Failure> {
    let indices = sample_indices(dir)?;
    if indices.is_empty() {
        return Err(Failure::run(format!(
            "no samples found in {}",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(indices.len());
    for i in indices {
        out.push(read_sample(dir, i)?);
    }
    Ok(out)
}

fn restore_network(path: &Path) -> Result<(Network, AdamState, Checkpoint), Failure> {
    let ckpt = load_checkpoint(path)?;
    let mut net = Network::build(&ckpt.config, ckpt.seed)?;
    let mut adam = AdamState::new(&net);
    ckpt.apply(&mut net, &mut adam)?;
    Ok((net, adam, ckpt))
}

/// Pad a [3, H, W] frame on the bottom and right by edge replication so both
/// extents divide evenly; prediction is cropped back afterwards.
fn pad_to_divisor(frame: &Tensor<f32>, div: usize) -> Tensor<f32> {
    let s = frame.shape();
    let (h, w) = (s[1], s[2]);
    let ph = h.div_ceil(div) * div;
    let pw = w.div_ceil(div) * div;
    if ph == h && pw == w {
        return frame.clone();
    }
    Tensor::from_fn(vec![3, ph, pw], |i| {
        let (c, rest) = (i / (ph * pw), i % (ph * pw));
        let (y, x) = (rest / pw, rest % pw);
        frame.data()[c * h * w + y.min(h - 1) * w + x.min(w - 1)]
    })
}

fn batch_one(frame: &Tensor<f32>) -> Tensor<f32> {
    let mut shape = vec![1];
    shape.extend_from_slice(frame.shape());
    Tensor::new(shape, frame.data().to_vec()).unwrap()
}

/// Full-resolution flow for one frame pair, padding and cropping as needed.
fn predict_flow(net: &Network, f1: &Tensor<f32>, f2: &Tensor<f32>) -> Result<FlowField, Failure> {
    let s1 = f1.shape();
    let s2 = f2.shape();
    if s1.len() != 3 || s1[0] != 3 || s1 != s2 {
        return Err(Failure::run(format!(
            "frames must be matching [3, H, W] images, got {s1:?} and {s2:?}"
        )));
    }
    let (h, w) = (s1[1], s1[2]);
    let div = net.config.divisor();
    let p1 = batch_one(&pad_to_divisor(f1, div));
    let p2 = batch_one(&pad_to_divisor(f2, div));
    let flows = net.forward(&p1, &p2)?;
    let full = flows.last().unwrap();
    if full.width == w && full.height == h {
        return Ok(full.clone());
    }
    let pick = |src: &[f32]| -> Vec<f32> {
        (0..h * w)
            .map(|i| src[(i / w) * full.width + i % w])
            .collect()
    };
    Ok(FlowField::new(w, h, pick(&full.u), pick(&full.v))?)
}

// ---- subcommands ----------------------------------------------------------

fn cmd_gen_data(args: &Args) -> Result<(), Failure> {
    let out_dir = PathBuf::from(args.require("out")?);
    let count = parse_usize_arg("count", args.require("count")?)?;
    let seed = parse_u64_arg("seed", args.get("seed").unwrap_or("0"))?;
    let mut toy = ToyConfig::default();
    for (k, v) in args.config_pairs()? {
        if !apply_toy(&mut toy, &k, &v)? {
            return Err(Failure::usage(format!("unknown configuration key {k:?}")));
        }
    }
    toy.validate()?;
    if count == 0 {
        return Err(Failure::usage("--count must be positive"));
    }
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let root = StreamRng::new(seed);
    for i in 0..count {
        let sample = gen_toy_pair(&toy, &root.child_indexed("sample", i as u64))?;
        write_sample(&out_dir, i, &sample)?;
    }
    print!("{}", describe_toy(&toy));
    println!("seed = {seed}");
    println!("wrote {count} samples to {}", out_dir.display());
    Ok(())
}

fn cmd_train(args: &Args) -> Result<(), Failure> {
    let data_dir = PathBuf::from(args.require("data")?);
    let ckpt_path = PathBuf::from(args.require("checkpoint")?);
    let mut net_cfg = NetworkConfig::default();
    let mut train_cfg = TrainConfig::default();
    for (k, v) in args.config_pairs()? {
        if !(apply_network(&mut net_cfg, &k, &v)? || apply_train(&mut train_cfg, &k, &v)?) {
            return Err(Failure::usage(format!("unknown configuration key {k:?}")));
        }
    }
    net_cfg.validate()?;
    train_cfg.validate()?;

    let dataset = load_dataset(&data_dir)?;
    let eval_set = match args.get("eval-data") {
        Some(dir) => Some(load_dataset(Path::new(dir))?),
        None => None,
    };

    let (mut net, mut adam, start_iter) = if args.has("resume") {
        let (net, adam, ckpt) = restore_network(&ckpt_path)?;
        if net.config != net_cfg {
            return Err(Failure::usage(
                "checkpoint network configuration differs from the requested one",
            ));
        }
        (net, adam, ckpt.iter)
    } else {
        let net = Network::build(&net_cfg, train_cfg.seed)?;
        let adam = AdamState::new(&net);
        (net, adam, 0)
    };

    print!("{}", describe_network(&net_cfg));
    print!("{}", describe_train(&train_cfg));
    println!("parameters = {}", net.param_count());
    println!("samples = {}", dataset.len());
    if start_iter > 0 {
        println!("resuming at iteration {start_iter}");
    }
    train(
        &mut net,
        &mut adam,
        start_iter,
        &dataset,
        eval_set.as_deref(),
        &train_cfg,
        Some(&ckpt_path),
        &mut |line| println!("{line}"),
    )?;
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn cmd_predict(args: &Args) -> Result<(), Failure> {
    let (net, _, _) = restore_network(Path::new(args.require("checkpoint")?))?;
    let f1 = read_ppm(Path::new(args.require("img1")?))?;
    let f2 = read_ppm(Path::new(args.require("img2")?))?;
    let flow = predict_flow(&net, &f1, &f2)?;
    let out = PathBuf::from(args.require("out")?);
    write_flo(&out, &flow)?;
    println!("wrote {}x{} flow to {}", flow.width, flow.height, out.display());
    Ok(())
}

fn cmd_eval(args: &Args) -> Result<(), Failure> {
    if let Some(ckpt) = args.get("checkpoint") {
        let (net, _, _) = restore_network(Path::new(ckpt))?;
        let dataset = load_dataset(Path::new(args.require("data")?))?;
        let mut samples = Vec::new();
        for (id, s) in dataset.iter().enumerate() {
            let gt = s.gt_flow.as_ref().ok_or_else(|| {
                Failure::run(format!("sample {id} has no ground-truth flow"))
            })?;
            let pred = predict_flow(&net, &s.frame1, &s.frame2)?;
            let report = epe(&pred, gt, s.valid_mask.as_deref())?;
            samples.push(SampleEpe {
                id,
                pixels: report.pixel_count,
                epe: report.mean_epe,
            });
        }
        let report = EpeReport::from_samples(samples)?;
        print!("{}", report.table());
        println!("epe {:.6}", report.mean_epe);
        if args.has("baseline") {
            let base = zero_flow_baseline(&dataset)?;
            println!("zero-flow baseline {:.6}", base.mean_epe);
        }
        return Ok(());
    }
    let pred = read_flo(Path::new(args.require("pred")?))?;
    let gt = read_flo(Path::new(args.require("gt")?))?;
    let mask = match args.get("mask") {
        Some(p) => {
            let (w, h, m) = read_pgm_mask(Path::new(p))?;
            if w != gt.width || h != gt.height {
                return Err(Failure::run(format!(
                    "mask is {w}x{h} but flow is {}x{}",
                    gt.width, gt.height
                )));
            }
            Some(m)
        }
        None => None,
    };
    let report = epe(&pred, &gt, mask.as_deref())?;
    println!("pixels {}", report.pixel_count);
    println!("epe {:.6}", report.mean_epe);
    Ok(())
}

fn cmd_visualize(args: &Args) -> Result<(), Failure> {
    let flow = read_flo(Path::new(args.require("flow")?))?;
    let max_mag = match args.get("max-mag") {
        Some(v) => Some(v.parse::<f32>().map_err(|_| {
            Failure::usage(format!("--max-mag: expected a number, got {v:?}"))
        })?),
        None => None,
    };
    let (image, norm) = flow_to_color(&flow, max_mag)?;
    let out = PathBuf::from(args.require("out")?);
    write_ppm(&out, &image)?;
    println!("normalization magnitude {norm:.6}");
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_gradcheck(args: &Args) -> Result<(), Failure> {
    let seed = parse_u64_arg("seed", args.get("seed").unwrap_or("0"))?;
    let reports = run_primitive_suite(seed)?;
    let mut failed = 0;
    for r in &reports {
        let worst = r
            .inputs
            .iter()
            .map(|i| i.max_rel_err)
            .fold(0.0f64, f64::max);
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        println!("{verdict} {} max_rel_err {worst:.3e} tol {:.0e}", r.name, r.tol);
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure::run(format!("{failed} primitive(s) failed gradcheck")));
    }
    println!("all {} primitives pass", reports.len());
    Ok(())
}

fn cmd_plan(args: &Args) -> Result<(), Failure> {
    let mut cfg = NetworkConfig::default();
    for (k, v) in args.config_pairs()? {
        if !apply_network(&mut cfg, &k, &v)? {
            return Err(Failure::usage(format!("unknown configuration key {k:?}")));
        }
    }
    print!("{}", describe_network(&cfg));
    print!("{}", plan(&cfg)?);
    let net = Network::build(&cfg, 0)?;
    println!("parameters = {}", net.param_count());
    Ok(())
}

fn dispatch(command: &str, rest: &[String]) -> Result<(), Failure> {
    match command {
        "gen-data" => cmd_gen_data(&Args::parse(
            rest,
            &["out", "count", "seed", "config", "set"],
            &[],
        )?),
        "train" => cmd_train(&Args::parse(
            rest,
            &["data", "checkpoint", "eval-data", "config", "set"],
            &["resume"],
        )?),
        "predict" => cmd_predict(&Args::parse(
            rest,
            &["checkpoint", "img1", "img2", "out"],
            &[],
        )?),
        "eval" => cmd_eval(&Args::parse(
            rest,
            &["pred", "gt", "mask", "checkpoint", "data"],
            &["baseline"],
        )?),
        "visualize" => cmd_visualize(&Args::parse(rest, &["flow", "out", "max-mag"], &[])?),
        "gradcheck" => cmd_gradcheck(&Args::parse(rest, &["seed"], &[])?),
        "plan" => cmd_plan(&Args::parse(rest, &["config", "set"], &[])?),
        other => Err(Failure::usage(format!("unknown command {other:?}"))),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match argv.first().map(String::as_str) {
        None | Some("--help") | Some("help") => {
            println!("{USAGE}");
            ExitCode::from(if argv.is_empty() { 2 } else { 0 })
        }
        Some(command) => match dispatch(command, &argv[1..]) {
            Ok(()) => ExitCode::SUCCESS,
            Err(f) => {
                eprintln!("error: {}", f.message);
                ExitCode::from(f.code)
            }
        },
    }
}

//! Command-line front end. `run` parses arguments, executes one command and
//! returns the process exit status: 0 on success, 1 when the arguments or
//! configuration are invalid, 2 when the work itself fails.

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::check::run_suite;
use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::error::Error;
use crate::regions::{regions_for_frame, Region, RegionMethod};
use crate::synth::probes::run_probes;
use crate::synth::{generate_dataset, load_or_generate, read_dataset, write_dataset};
use crate::tensor::io;
use crate::train::Trainer;

pub const THREADS_ENV: &str = "CONSTCL_THREADS";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "constcl", version, about = "Contrastive spatio-temporal video pretraining on CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes the log, checkpoint and resolved config under train.out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dot-path override such as loss.omega=0.02 (repeatable).
        #[arg(long = "set", value_name = "K=V")]
        set: Vec<String>,
        /// Continue from the checkpoint in train.out_dir if there is one.
        #[arg(long)]
        resume: bool,
    },
    /// Generate a synthetic sprite dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "K=V")]
        set: Vec<String>,
    },
    /// Compute region boxes for every video tensor in a directory.
    GenRegions {
        #[arg(long, value_parser = parse_method)]
        method: RegionMethod,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config whose `regions` section supplies the remaining parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "K=V")]
        set: Vec<String>,
    },
    /// Gradient-check every component and the full objective.
    GradCheck {
        /// Config whose `loss` section is used for the objective check.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "K=V")]
        set: Vec<String>,
        /// Number of model seeds for the full-objective check.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Run the correspondence, linear-probe and tracking probes on a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn parse_method(s: &str) -> Result<RegionMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = configure_threads().and_then(|()| dispatch(cli.command));
    match outcome {
        Ok(()) => 0,
        Err(f) => {
            let (Failure::Invalid(msg) | Failure::Runtime(msg)) = &f;
            eprintln!("error: {msg}");
            f.code()
        }
    }
}

fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    // a pool may already exist when `run` is called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Train { config, set, resume } => train(&config, &set, resume),
        Command::GenData { config, out, set } => gen_data(&config, &out, &set),
        Command::GenRegions {
            method,
            input,
            out,
            config,
            set,
        } => gen_regions(method, &input, &out, config.as_deref(), &set),
        Command::GradCheck { config, set, seeds } => grad_check(config.as_deref(), &set, seeds),
        Command::Eval { checkpoint, data } => eval(&checkpoint, &data),
    }
}

fn load_config(path: Option<&Path>, set: &[String]) -> std::result::Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p, set),
        None => RunConfig::from_str("{}", set),
    }
    .map_err(invalid)
}

fn train(config_path: &Path, set: &[String], resume: bool) -> Outcome {
    let config = load_config(Some(config_path), set)?;
    let out = config.train.out_dir.clone();
    let ckpt = out.join(CHECKPOINT_DIR);
    config.write_resolved(&out).map_err(runtime)?;

    let videos = load_or_generate(&config.data).map_err(runtime)?;
    let frames: Vec<_> = videos.into_iter().map(|v| v.frames).collect();
    let mut trainer = Trainer::new(config.model(), config.step()).map_err(invalid)?;
    let resuming = resume && ckpt.join(crate::train::checkpoint::MANIFEST).exists();
    if resuming {
        trainer.load(&ckpt).map_err(runtime)?;
        eprintln!("resumed from {} at step {}", ckpt.display(), trainer.step_index());
    }
    let log_path = out.join(TRAIN_LOG);
    let file = if resuming {
        OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| runtime(Error::io(&log_path, e)))?;
    let mut log = BufWriter::new(file);

    let total = config.train.total_steps;
    let every = if config.train.checkpoint_every == 0 { total.max(1) } else { config.train.checkpoint_every };
    let started = Instant::now();
    let mut first = None;
    let mut last = None;
    while trainer.step_index() < total {
        let until = ((trainer.step_index() / every + 1) * every).min(total);
        let reports = trainer.train_until(&frames, until, Some(&mut log)).map_err(runtime)?;
        log.flush().map_err(|e| runtime(Error::io(&log_path, e)))?;
        trainer.save(&ckpt).map_err(runtime)?;
        config.write_resolved(&ckpt).map_err(runtime)?;
        if let Some(r) = reports.last() {
            first = first.or(reports.first().map(|r| r.l_total));
            last = Some(r.l_total);
            eprintln!(
                "step {:>5}  L_g {:.4}  L_r {:.4}  L {:.4}  lr {:.4}  {:.1}s",
                r.step,
                r.l_g,
                r.l_r,
                r.l_total,
                r.lr,
                started.elapsed().as_secs_f64()
            );
        }
    }
    if !ckpt.join(crate::train::checkpoint::MANIFEST).exists() {
        trainer.save(&ckpt).map_err(runtime)?;
        config.write_resolved(&ckpt).map_err(runtime)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "steps": trainer.step_index(),
            "first_l_total": first,
            "last_l_total": last,
            "checkpoint": ckpt,
            "log": log_path,
        })
    );
    Ok(())
}

fn gen_data(config_path: &Path, out: &Path, set: &[String]) -> Outcome {
    let config = load_config(Some(config_path), set)?;
    let videos = generate_dataset(&config.data).map_err(runtime)?;
    write_dataset(out, &config.data, &videos).map_err(runtime)?;
    config.write_resolved(out).map_err(runtime)?;
    println!("{}", serde_json::json!({ "videos": videos.len(), "out": out }));
    Ok(())
}

#[derive(Serialize)]
struct RegionLine<'a> {
    video: &'a str,
    #[serde(flatten)]
    region: &'a Region,
}

fn gen_regions(method: RegionMethod, input: &Path, out: &Path, config: Option<&Path>, set: &[String]) -> Outcome {
    let mut regions = load_config(config, set)?.regions;
    regions.method = method;
    let entries = std::fs::read_dir(input).map_err(|e| invalid(Error::io(input, e)))?;
    let mut tensors: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cstt"))
        .collect();
    tensors.sort();
    if tensors.is_empty() {
        return Err(invalid(format!("{}: no .cstt video tensors", input.display())));
    }
    let file = File::create(out).map_err(|e| runtime(Error::io(out, e)))?;
    let mut w = BufWriter::new(file);
    let mut lines = 0usize;
    for path in &tensors {
        let video = io::load(path).map_err(runtime)?;
        if video.rank() != 4 || video.shape()[3] != 3 {
            return Err(runtime(format!("{}: expected [T, H, W, 3], got {:?}", path.display(), video.shape())));
        }
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for t in 0..video.shape()[0] {
            for region in regions_for_frame(&video, t, &regions).map_err(runtime)? {
                let line = serde_json::to_string(&RegionLine { video: &name, region: &region }).map_err(runtime)?;
                writeln!(w, "{line}").map_err(|e| runtime(Error::io(out, e)))?;
                lines += 1;
            }
        }
    }
    w.flush().map_err(|e| runtime(Error::io(out, e)))?;
    println!("{}", serde_json::json!({ "videos": tensors.len(), "regions": lines, "out": out }));
    Ok(())
}

fn grad_check(config: Option<&Path>, set: &[String], seeds: u64) -> Outcome {
    let config = load_config(config, set)?;
    if seeds == 0 {
        return Err(invalid("--seeds must be positive"));
    }
    let seed_list: Vec<u64> = (0..seeds).map(|k| config.train.seed + k).collect();
    let results = run_suite(&config.loss, &seed_list).map_err(runtime)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<28} {:>10.3e}  {:>6} coords  {status}", r.component, r.max_rel_error, r.coordinates);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(runtime(format!(
            "{failed} component(s) above the {:e} relative-error tolerance",
            crate::check::TOLERANCE
        )));
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path) -> Outcome {
    let config = RunConfig::load(&checkpoint.join(RESOLVED_CONFIG), &[]).map_err(invalid)?;
    let mut trainer = Trainer::new(config.model(), config.step()).map_err(invalid)?;
    trainer.load(checkpoint).map_err(runtime)?;
    let videos = read_dataset(data).map_err(runtime)?;
    let started = Instant::now();
    let report = run_probes(&trainer.model, &trainer.store, &videos, &config.sampling, &config.eval).map_err(runtime)?;
    println!(
        "{}",
        serde_json::json!({
            "step": trainer.step_index(),
            "correspondence": report.correspondence,
            "linear_probe": report.linear_probe,
            "track_iou": report.track_iou,
            "seconds": started.elapsed().as_secs_f64(),
        })
    );
    Ok(())
}

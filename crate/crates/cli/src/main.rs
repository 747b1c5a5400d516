//! `lhmp`: synthetic LiDAR human motion data, training and evaluation.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lhmp_core::autodiff::{primitive_suite, Probe};
use lhmp_core::fsutil::write_atomic;
use lhmp_core::harness::data::split_sequences;
use lhmp_core::harness::eval::HorizonTable;
use lhmp_core::harness::{
    evaluate, load_checkpoint, load_dataset, robustness_sweep, standard_horizons, window_samples, Checkpoint,
    DataInfo, EvalReport, ModelPredictor, MotionPredictor, MotionSample, SequenceStore, SweepMode, Trainer,
};
use lhmp_core::model::{end_to_end_grad_check, ModelConfig};
use lhmp_core::sim::{synth_dataset, SynthConfig};
use lhmp_core::{Error, Pose, Result};
use log::info;
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "lhmp", version, about = "LiDAR-based human motion prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scan dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint at the standard horizons.
    Eval(EvalArgs),
    /// Write one sample's predicted joints as JSON.
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Evaluate under increasing occlusion, noise or distance.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seqs: usize,
    #[arg(long)]
    frames: usize,
    #[arg(long)]
    seed: u64,
    /// Share of frames that get noise points.
    #[arg(long, default_value_t = 0.0)]
    noise_ratio: f64,
    /// Share of frames that get an occluding cube.
    #[arg(long, default_value_t = 0.0)]
    occl_ratio: f64,
    #[arg(long, default_value_t = 6.0)]
    dist_min: f64,
    #[arg(long, default_value_t = 27.0)]
    dist_max: f64,
    #[arg(long, default_value_t = 10.0)]
    fps: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Window index at stride 1.
    #[arg(long)]
    sample: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Also check the end-to-end loss of the micro model.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    mode: SweepMode,
    /// Comma-separated levels: percent for occlusion and noise, bin edges
    /// in meters for distance.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    levels: Vec<f64>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Augmentation seed; defaults to the checkpoint's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_sequences: a.seqs,
        frames_per_sequence: a.frames,
        fps: a.fps,
        dist_min: a.dist_min,
        dist_max: a.dist_max,
        noise_frame_ratio: a.noise_ratio,
        occl_frame_ratio: a.occl_ratio,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let m = synth_dataset(&a.out, &cfg)?;
    let empty: usize = m.sequences.iter().map(|s| s.empty_frames).sum();
    println!(
        "wrote {} sequences of {} frames to {} ({empty} empty frames)",
        m.sequences.len(),
        a.frames,
        a.out.display()
    );
    Ok(())
}

fn subset(samples: &[MotionSample], ids: &[usize]) -> Vec<MotionSample> {
    samples.iter().filter(|s| ids.contains(&s.meta.sequence)).cloned().collect()
}

fn data_info(store: &SequenceStore) -> Result<DataInfo> {
    Ok(DataInfo {
        fps: store.fps()?,
        seed: store.seed(),
    })
}

fn print_table(title: &str, table: &HorizonTable) {
    let cells: Vec<String> = table.iter().map(|(k, v)| format!("{k} {v:.2}")).collect();
    println!("{title}: {}", cells.join("  "));
}

fn train(a: TrainArgs) -> Result<()> {
    let (model, config) = RunConfig::load(&a.config)?.expand()?;
    let store = load_dataset(&a.data)?;
    let info = data_info(&store)?;
    let mut trainer = if a.resume {
        let ckpt = load_checkpoint(&a.out)?;
        if ckpt.model != model {
            return Err(Error::Config("the run configuration's model differs from the checkpoint's".into()));
        }
        ckpt.check_fps(info.fps)?;
        Trainer::resume(ckpt, Some(config.clone()))?
    } else {
        let mut t = Trainer::new(model.clone(), config.clone())?;
        t.data = Some(info.clone());
        t
    };
    let samples = window_samples(&store, &model, config.stride)?;
    let ids: Vec<usize> = store.sequences.iter().map(|s| s.id).collect();
    let (train_ids, val_ids) = split_sequences(&ids, config.seed);
    let train_set = subset(&samples, &train_ids);
    info!(
        "{} training windows from {} sequences, {} held out",
        train_set.len(),
        train_ids.len(),
        val_ids.len()
    );
    trainer.run(&train_set, Some(&a.out))?;
    let last = trainer.curve.last().map(|r| r.loss);
    println!(
        "trained to epoch {}, step {}{}; checkpoint in {}",
        trainer.epoch(),
        trainer.steps(),
        last.map(|l| format!(", last loss {l:.5}")).unwrap_or_default(),
        a.out.display()
    );
    let val = subset(&samples, &val_ids);
    if !val.is_empty() {
        let hz = standard_horizons(info.fps, model.t_pred);
        let r = evaluate(&trainer.predictor(), &val, info.fps, &hz, config.seed)?;
        print_table("validation MPJPE (mm)", &r.mpjpe_mm);
    }
    Ok(())
}

struct Loaded {
    ckpt: Checkpoint,
    store: SequenceStore,
    fps: f64,
}

fn load(data: &Path, ckpt: &Path) -> Result<Loaded> {
    let ckpt = load_checkpoint(ckpt)?;
    let store = load_dataset(data)?;
    let fps = store.fps()?;
    ckpt.check_fps(fps)?;
    Ok(Loaded { ckpt, store, fps })
}

impl Loaded {
    fn predictor(&self) -> ModelPredictor {
        ModelPredictor {
            config: self.ckpt.model.clone(),
            params: self.ckpt.params.clone(),
        }
    }

    fn model(&self) -> &ModelConfig {
        &self.ckpt.model
    }

    fn report(&self, samples: &[MotionSample]) -> Result<EvalReport> {
        let hz = standard_horizons(self.fps, self.model().t_pred);
        let mut r = evaluate(&self.predictor(), samples, self.fps, &hz, self.ckpt.seed())?;
        r.data_seed = self.store.seed();
        Ok(r)
    }
}

fn print_report(r: &EvalReport) {
    print_table("MPJPE (mm)", &r.mpjpe_mm);
    if let Some(v) = r.avg_short {
        println!("avg short-term: {v:.2} mm");
    }
    if let Some(v) = r.avg_long {
        println!("avg long-term: {v:.2} mm");
    }
    if let Some(t) = &r.min_mpjpe_mm {
        print_table("minMPJPE (mm)", t);
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let l = load(&a.data, &a.ckpt)?;
    let samples = window_samples(&l.store, l.model(), a.stride)?;
    let r = l.report(&samples)?;
    write_json(&a.report, &r)?;
    println!("{} samples, {} hypotheses", r.samples, r.hypotheses);
    print_report(&r);
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    sample: usize,
    sequence: usize,
    start: usize,
    fps: f64,
    seed: u64,
    /// `M` hypotheses of `t_pred` world-frame poses.
    hypotheses: Vec<Vec<Pose>>,
    ground_truth: Vec<Pose>,
}

fn predict(a: PredictArgs) -> Result<()> {
    let l = load(&a.data, &a.ckpt)?;
    let samples = window_samples(&l.store, l.model(), 1)?;
    let s = samples.get(a.sample).ok_or_else(|| {
        Error::Contract(format!("sample {} requested, the dataset has {} windows", a.sample, samples.len()))
    })?;
    let p = Prediction {
        sample: a.sample,
        sequence: s.meta.sequence,
        start: s.meta.start,
        fps: l.fps,
        seed: l.ckpt.seed(),
        hypotheses: l.predictor().predict(s)?,
        ground_truth: s.future_gt_joints.clone(),
    };
    write_json(&a.out, &p)?;
    println!("wrote {} hypotheses for sample {} to {}", p.hypotheses.len(), a.sample, a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut failed = Vec::new();
    for e in primitive_suite(a.instances, a.seed)? {
        println!(
            "{:<24} max rel err {:.3e}  (tol {:.0e}, {} instances) {}",
            e.name,
            e.max_rel_err,
            e.tolerance,
            e.instances,
            if e.passed() { "ok" } else { "FAIL" }
        );
        if !e.passed() {
            failed.push(e.name.to_string());
        }
    }
    if a.full {
        const TOL: f64 = 1e-4;
        let per = end_to_end_grad_check(&ModelConfig::micro(), a.seed, Probe::Strided(6))?;
        let worst = per.iter().map(|(_, e)| *e).fold(0.0, f64::max);
        for (name, e) in &per {
            if *e > TOL {
                println!("  {name}: {e:.3e}");
            }
        }
        let ok = worst <= TOL;
        println!(
            "{:<24} max rel err {worst:.3e}  (tol {TOL:.0e}, {} parameters) {}",
            "end-to-end",
            per.len(),
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push("end-to-end".into());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn sweep(a: SweepArgs) -> Result<()> {
    let l = load(&a.data, &a.ckpt)?;
    let samples = window_samples(&l.store, l.model(), a.stride)?;
    let mut r = l.report(&samples)?;
    let hz: Vec<u32> = standard_horizons(l.fps, l.model().t_pred);
    let seed = a.seed.unwrap_or(l.ckpt.seed());
    let rows = robustness_sweep(&l.predictor(), &samples, l.fps, &hz, a.mode, &a.levels, seed)?;
    for row in &rows {
        let cells: Vec<String> = row.mpjpe_mm.iter().map(|(k, v)| format!("{k} {v:.2}")).collect();
        let avg = row.avg.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
        println!("level {:>6}  n {:>5}  avg {avg:>8}  {}", row.level, row.samples, cells.join("  "));
    }
    match a.mode {
        SweepMode::Occlusion => r.sweeps.occlusion = rows,
        SweepMode::Noise => r.sweeps.noise = rows,
        SweepMode::Distance => r.sweeps.distance = rows,
    }
    match &a.report {
        Some(path) => write_json(path, &r),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("LHMP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("LHMP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

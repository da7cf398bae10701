//! Command-line pipeline: phantom | train | track | eval | ablate | bench.
//!
//! Exit codes: 0 success, 1 validation error (bad config, bad input files,
//! mismatched extents), 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use myotrack_core::config::RunConfig;
use myotrack_core::container::{
    checkpoint_from_bytes, checkpoint_to_bytes, queries_from_csv, read_tensor_file,
    trajectory_from_csv, trajectory_to_csv, write_tensor_file, Checkpoint,
};
use myotrack_core::error::{Error, Result};
use myotrack_core::evalkit::{
    ablation_run, average_inference_time, delta_accuracy, delta_avg, gls, mte, AblationAxis,
    AblationSetup, EvalFrame, DELTA_THRESHOLDS,
};
use myotrack_core::model::Tracker;
use myotrack_core::phantom::{generate, PhantomSample};
use myotrack_core::tensor::Tensor;
use myotrack_core::training::{train_on_samples, OptimState};
use myotrack_core::trajectory::TrajectoryState;

#[derive(Parser)]
#[command(name = "myotrack", version, about = "Myocardial point tracking pipeline")]
struct Cli {
    /// Force sequential kernels (bit-identical to the parallel path; fixes
    /// the execution order for timing and reproducibility audits).
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with exact ground-truth trajectories.
    Phantom(PhantomArgs),
    /// Train a tracker on a phantom dataset directory.
    Train(TrainArgs),
    /// Track query points through a video with a trained checkpoint.
    Track(TrackArgs),
    /// Compare a predicted trajectory file against a reference.
    Eval(EvalArgs),
    /// Sweep one design axis end-to-end and tabulate the metrics.
    Ablate(AblateArgs),
    /// Measure average inference time per video.
    Bench(BenchArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of samples to generate.
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Phantom dataset directory (from `myotrack phantom`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing checkpoint (continues the step counter).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    video: PathBuf,
    /// Query points: a [N,2] tensor container or a CSV of `x,y` rows.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 0)]
    query_frame: usize,
    /// Output trajectory container [T,N,2].
    #[arg(long)]
    out: PathBuf,
    /// Also export the trajectory as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Reference trajectory container.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Input frame height the trajectories were tracked on.
    #[arg(long)]
    input_height: usize,
    #[arg(long)]
    input_width: usize,
    /// Also report peak GLS of both trajectories (wall order = point order).
    #[arg(long)]
    with_gls: bool,
    /// End-diastole frame index for GLS.
    #[arg(long, default_value_t = 0)]
    ed_frame: usize,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// window | temporal | reasoning
    #[arg(long)]
    axis: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    train_samples: usize,
    #[arg(long, default_value_t = 4)]
    eval_samples: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Phantom dataset directory providing videos and query points.
    #[arg(long)]
    data: PathBuf,
    /// Cap the number of videos timed.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))
}

fn read_input_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::from_toml(&read_input_text(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<(RunConfig, Checkpoint)> {
    let bytes = read_input(path)?;
    // peek the embedded config first to build the parameter template
    let probe = myotrack_core::container::Archive::from_bytes(&bytes)?;
    let config_toml = probe
        .get("config")
        .ok_or_else(|| Error::InvalidInput("checkpoint has no embedded config".into()))?;
    let config = RunConfig::from_toml(std::str::from_utf8(config_toml).map_err(|_| {
        Error::Format("checkpoint config is not utf-8".into())
    })?)?;
    config.validate()?;
    let template = config.model().init_params::<f32>(1, config.seed);
    let ckpt = checkpoint_from_bytes(&bytes, template)?;
    Ok((config, ckpt))
}

fn sample_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("sample_{index:04}.video.emt")),
        dir.join(format!("sample_{index:04}.gt.emt")),
    )
}

/// Load a phantom dataset directory written by `cmd_phantom`.
fn load_dataset(dir: &Path, limit: Option<usize>) -> Result<Vec<PhantomSample<f32>>> {
    let manifest = read_input_text(&dir.join("manifest.txt"))?;
    let config = load_config(&dir.join("config.resolved.toml"))?;
    let mut samples = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        if let Some(cap) = limit {
            if i >= cap {
                break;
            }
        }
        let mut fields = line.split_whitespace();
        let index: usize = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::InvalidInput(format!("bad manifest line {}", i + 1)))?;
        let (video_path, gt_path) = sample_paths(dir, index);
        let video = read_tensor_file::<f32>(&video_path)?;
        let gt = read_tensor_file::<f32>(&gt_path)?;
        if gt.rank() != 3 || gt.shape()[2] != 2 || video.rank() != 4 {
            return Err(Error::InvalidInput(format!(
                "sample {index}: unexpected extents video {:?} / gt {:?}",
                video.shape(),
                gt.shape()
            )));
        }
        let n = gt.shape()[1];
        let queries = Tensor::from_fn(&[n, 2], |j| gt.data()[j]);
        samples.push(PhantomSample {
            video,
            gt: TrajectoryState {
                positions: gt,
                query_frame: 0,
                queries,
            },
            wall_order: (0..n).collect(),
            spec: config.phantom.clone(),
        });
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no samples found in {}",
            dir.display()
        )));
    }
    Ok(samples)
}

fn cmd_phantom(args: &PhantomArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    std::fs::create_dir_all(&args.out)?;
    let mut manifest = String::new();
    for i in 0..args.count {
        let seed = config.phantom.seed.wrapping_add(i as u64);
        let sample = generate::<f32>(&config.phantom, seed)?;
        let (video_path, gt_path) = sample_paths(&args.out, i);
        write_tensor_file(&video_path, &sample.video)?;
        write_tensor_file(&gt_path, &sample.gt.positions)?;
        manifest.push_str(&format!(
            "{i} {seed} {} {}\n",
            video_path.file_name().unwrap().to_string_lossy(),
            gt_path.file_name().unwrap().to_string_lossy()
        ));
    }
    std::fs::write(args.out.join("manifest.txt"), manifest)?;
    config.save(&args.out.join("config.resolved.toml"))?;
    println!(
        "wrote {} samples ({}x{}, {} frames, {} points) to {}",
        args.count,
        config.phantom.width,
        config.phantom.height,
        config.phantom.frames,
        config.phantom.points,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let samples = load_dataset(&args.data, None)?;
    std::fs::create_dir_all(&args.out)?;

    let (mut params, mut opt) = match &args.resume {
        Some(path) => {
            let (ckpt_cfg, ckpt) = load_checkpoint(path)?;
            if ckpt_cfg.to_toml() != config.to_toml() {
                return Err(Error::InvalidInput(
                    "resume checkpoint was trained with a different configuration".into(),
                ));
            }
            let opt = ckpt.opt.unwrap_or_else(|| OptimState::new(&ckpt.params));
            (ckpt.params, opt)
        }
        None => {
            let params = config.model().init_params::<f32>(1, config.seed);
            let opt = OptimState::new(&params);
            (params, opt)
        }
    };

    let report = train_on_samples(&config.model(), &config.train, &samples, &mut params, &mut opt)?;

    let mut csv = String::from("epoch,mean_loss\n");
    for (e, loss) in report.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{e},{loss:.8}\n"));
    }
    std::fs::write(args.out.join("loss.csv"), csv)?;
    let ckpt_bytes = checkpoint_to_bytes(&config.to_toml(), &params, Some(&opt));
    std::fs::write(args.out.join("model.ckpt"), ckpt_bytes)?;
    config.save(&args.out.join("config.resolved.toml"))?;
    println!(
        "trained {} epochs on {} clips; optimizer steps so far: {}",
        config.train.epochs,
        samples.len(),
        opt.step
    );
    if let (Some(first), Some(last)) = (report.loss_curve.first(), report.loss_curve.last()) {
        println!("epoch loss: {first:.6} -> {last:.6}");
    }
    Ok(())
}

fn cmd_track(args: &TrackArgs) -> Result<()> {
    let (config, ckpt) = load_checkpoint(&args.checkpoint)?;
    let video = read_tensor_file::<f32>(&args.video)?;
    let queries = if args.queries.extension().is_some_and(|e| e == "csv") {
        queries_from_csv(&read_input_text(&args.queries)?)?
    } else {
        read_tensor_file::<f32>(&args.queries)?
    };
    let tracker = Tracker {
        config: config.model(),
        params: ckpt.params,
        input_channels: 1,
    };
    let traj = tracker.track_final(&video, &queries, args.query_frame)?;
    write_tensor_file(&args.out, &traj.positions)?;
    if let Some(csv_path) = &args.csv {
        std::fs::write(csv_path, trajectory_to_csv(&traj))?;
    }
    println!(
        "tracked {} points over {} frames -> {}",
        traj.points(),
        traj.frames(),
        args.out.display()
    );
    println!(
        "query-frame drift: {:.4} px (frame {} is not pinned)",
        traj.query_frame_drift(),
        args.query_frame
    );
    Ok(())
}

fn load_trajectory(path: &Path) -> Result<TrajectoryState<f32>> {
    if path.extension().is_some_and(|e| e == "csv") {
        return trajectory_from_csv(&read_input_text(path)?);
    }
    let positions = read_tensor_file::<f32>(path)?;
    if positions.rank() != 3 || positions.shape()[2] != 2 {
        return Err(Error::InvalidInput(format!(
            "{}: trajectory must be [T,N,2], got {:?}",
            path.display(),
            positions.shape()
        )));
    }
    let n = positions.shape()[1];
    let queries = Tensor::from_fn(&[n, 2], |j| positions.data()[j]);
    Ok(TrajectoryState {
        positions,
        query_frame: 0,
        queries,
    })
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let pred = load_trajectory(&args.pred)?;
    let reference = load_trajectory(&args.reference)?;
    let ev = EvalFrame::new(&pred, &reference, args.input_height, args.input_width)?;
    let mut report = String::new();
    for x in DELTA_THRESHOLDS {
        report.push_str(&format!("delta{}: {:.2}\n", x as usize, delta_accuracy(&ev, x)));
    }
    report.push_str(&format!("delta_avg: {:.2}\n", delta_avg(&ev)));
    report.push_str(&format!("mte: {:.4}\n", mte(&ev)?));
    if args.with_gls {
        let order: Vec<usize> = (0..pred.points()).collect();
        let g_pred = gls(&pred, &order, None, args.ed_frame)?;
        let g_ref = gls(&reference, &order, None, args.ed_frame)?;
        report.push_str(&format!("gls_pred: {:.2}\n", g_pred.peak_gls));
        report.push_str(&format!("gls_ref: {:.2}\n", g_ref.peak_gls));
        report.push_str(&format!(
            "gls_diff: {:.2}\n",
            g_pred.peak_gls - g_ref.peak_gls
        ));
    }
    print!("{report}");
    if let Some(out) = &args.out {
        std::fs::write(out, report)?;
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let axis = AblationAxis::parse(&args.axis)?;
    std::fs::create_dir_all(&args.out)?;
    let setup = AblationSetup {
        model: config.model(),
        train: config.train.clone(),
        phantom: config.phantom.clone(),
        train_samples: args.train_samples,
        eval_samples: args.eval_samples,
    };
    let report = ablation_run(axis, &setup)?;
    let csv_path = args.out.join(format!("ablation_{}.csv", axis.token()));
    std::fs::write(&csv_path, report.to_csv())?;
    let mut md = report.to_markdown();
    if axis == AblationAxis::Window {
        md.push_str(&format!(
            "\nAIT ordering across window sizes non-decreasing: {}\n",
            report.ait_non_decreasing()
        ));
    }
    std::fs::write(args.out.join(format!("ablation_{}.md", axis.token())), &md)?;
    config.save(&args.out.join("config.resolved.toml"))?;
    print!("{md}");
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let (config, ckpt) = load_checkpoint(&args.checkpoint)?;
    let samples = load_dataset(&args.data, args.limit)?;
    let tracker = Tracker {
        config: config.model(),
        params: ckpt.params,
        input_channels: 1,
    };
    // timing runs single-threaded for stable measurements
    let was_sequential = myotrack_core::exec::sequential_forced();
    myotrack_core::exec::set_sequential(true);
    let seconds = average_inference_time(samples.len(), |i| {
        tracker
            .track_final(&samples[i].video, &samples[i].gt.queries, 0)
            .map(|_| ())
    });
    myotrack_core::exec::set_sequential(was_sequential);
    let seconds = seconds?;
    let report = format!(
        "videos: {} (first run excluded as warm-up)\n\
         ait_seconds_per_video: {seconds:.4}\n\
         window: {}\nneighbors: {}\niterations: {}\n",
        samples.len(),
        config.correlation.window,
        config.refiner.neighbors,
        config.refiner.iterations,
    );
    print!("{report}");
    if let Some(out) = &args.out {
        std::fs::write(out, report)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    myotrack_core::exec::init_thread_pool_from_env();
    if cli.deterministic {
        myotrack_core::exec::set_sequential(true);
    }
    match &cli.command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::Train(args) => cmd_train(args),
        Command::Track(args) => cmd_track(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

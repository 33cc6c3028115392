//! `lusk`: batch front end for synthesis, fusion, training, inference and
//! evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lusk_core::config::RunConfig;
use lusk_core::eval::{default_delta, evaluate, keypoints_csv, parse_keypoints_csv, per_frame_csv, Keypoints};
use lusk_core::fusion::{Frame, InputMode};
use lusk_core::model::Checkpoint;
use lusk_core::synth::{frame_file_name, generate, load_frames, load_truth, save_dataset};
use lusk_core::train::{loss_csv, loss_csv_path, pretrain_encoder, train, TrainSpec};
use lusk_core::{Error, Result};

const KEYPOINTS_FILE: &str = "keypoints.csv";

#[derive(Parser)]
#[command(name = "lusk", version, about = "Unsupervised keypoints for lung-ultrasound-like video")]
struct Cli {
    /// Seed for scene synthesis and training (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key = value config file; defaults apply to anything it leaves out
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the file (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fused,
    Norm,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video with ground truth.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the ten network input channels of one frame as PGM images.
    Fuse {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Enable depth attenuation with this factor.
        #[arg(long)]
        tga: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Autoencoder pretraining of the feature encoder.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transporter training; the loss CSV is written beside the checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to start from, e.g. a pretrained encoder.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keypoints for every frame plus overlay images.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted keypoints with ground truth.
    Eval {
        /// Directory holding keypoints.csv, or the CSV itself.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory with truth.txt.
        #[arg(long)]
        truth: PathBuf,
        /// Pleura tolerance in pixels; 5 px per 64 px of frame height by default.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.override_with(&args.set)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.scene.seed = s;
    }
    Ok(cfg)
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone()).ok_or_else(|| Error::Config {
        file: "<command line>".into(),
        line: 0,
        msg: format!("--{name} is required (or set `{name}` in the config)"),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// One video if `dir` holds frames itself, otherwise one per subdirectory
/// that does, in name order.
fn load_videos(dir: &Path) -> Result<Vec<Vec<Frame>>> {
    if dir.join(frame_file_name(0)).exists() {
        return Ok(vec![load_frames(dir)?]);
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(frame_file_name(0)).exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Data(format!("{}: no frames or video directories found", dir.display())));
    }
    subdirs.iter().map(|d| load_frames(d)).collect()
}

/// Copy of `frame` with a 3×3 maximum-intensity square at every keypoint.
fn overlay(frame: &Frame, kps: &[[f64; 2]]) -> Frame {
    let mut out = frame.clone();
    let (rows, cols) = frame.shape();
    for k in kps {
        let r = k[0].round() as i64;
        let c = k[1].round() as i64;
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (y, x) = (r + dr, c + dc);
                if y >= 0 && x >= 0 && (y as usize) < rows && (x as usize) < cols {
                    out.set(y as usize, x as usize, 1.0);
                }
            }
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Synth { cfg, out } => {
            let cfg = load_config(&cfg, cli.seed)?;
            let (video, truth) = generate(&cfg.scene)?;
            save_dataset(&video, &truth, &out)?;
            println!("wrote {} frames to {}", video.len(), out.display());
        }
        Command::Fuse {
            cfg,
            input,
            out,
            tga,
            mode,
        } => {
            let mut cfg = load_config(&cfg, cli.seed)?;
            if let Some(a) = tga {
                cfg.train.use_tga = true;
                cfg.fusion.attenuation_a = a;
            }
            match mode {
                Some(Mode::Fused) => cfg.train.input_mode = InputMode::Fused,
                Some(Mode::Norm) => cfg.train.input_mode = InputMode::NormStack,
                None => {}
            }
            cfg.validate()?;
            let frame = Frame::read_pgm(&input)?;
            let stack = cfg.train.preprocess(&cfg.model, &cfg.fusion).apply(&frame)?;
            create_dir(&out)?;
            for (i, ch) in stack.channels().iter().enumerate() {
                // normalized-stack channels are not in [0, 1]; stretch for viewing
                let img = match cfg.train.input_mode {
                    InputMode::Fused => ch.clone(),
                    InputMode::NormStack => ch.normalized(),
                };
                img.write_pgm(&out.join(format!("channel_{i:02}.pgm")))?;
            }
            println!("wrote {} channels to {}", stack.len(), out.display());
        }
        Command::Pretrain { cfg, data, out } => {
            let cfg = load_config(&cfg, cli.seed)?;
            let data = required(data, &cfg.data, "data")?;
            let out = required(out, &cfg.out, "out")?;
            let pre = cfg.train.preprocess(&cfg.train.model_config(&cfg.model), &cfg.fusion);
            let mut stacks = Vec::new();
            for video in load_videos(&data)? {
                stacks.extend(pre.apply_all(&video)?);
            }
            let r = pretrain_encoder(&stacks, &cfg.train, &cfg.model)?;
            let ckpt = Checkpoint::new(cfg.train.model_config(&cfg.model), pre, r.encoder)?;
            ckpt.save(&out)?;
            write(&loss_csv_path(&out), &loss_csv(&r.losses))?;
            let last = r.losses.last().map_or(r.initial_loss, |l| l.mean_loss);
            println!("pretrained encoder: loss {:.6} -> {last:.6}", r.initial_loss);
        }
        Command::Train { cfg, data, init, out } => {
            let cfg = load_config(&cfg, cli.seed)?;
            let data = required(data, &cfg.data, "data")?;
            let out = required(out, &cfg.out, "out")?;
            let init = match init.or_else(|| cfg.init.clone()) {
                Some(p) => {
                    let ckpt = Checkpoint::load(&p)?;
                    ckpt.expect_model(&cfg.train.model_config(&cfg.model))?;
                    Some(ckpt.params)
                }
                None => None,
            };
            let videos = load_videos(&data)?;
            let spec = TrainSpec {
                cfg: cfg.train.clone(),
                model: cfg.model.clone(),
                fusion: cfg.fusion.clone(),
                init,
                out: Some(out.clone()),
            };
            let r = train(&videos, &spec)?;
            if let (Some(first), Some(last)) = (r.losses.first(), r.losses.last()) {
                println!(
                    "trained {} epochs: loss {:.6} -> {:.6}; stages {}",
                    r.losses.len(),
                    first.mean_loss,
                    last.mean_loss,
                    r.trace.join(",")
                );
            }
        }
        Command::Infer { ckpt, data, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let frames = load_frames(&data)?;
            let kps = frames
                .iter()
                .map(|f| ckpt.infer(f))
                .collect::<Result<Vec<Keypoints>>>()?;
            create_dir(&out)?;
            write(&out.join(KEYPOINTS_FILE), &keypoints_csv(&kps))?;
            for (i, (f, k)) in frames.iter().zip(&kps).enumerate() {
                overlay(f, k).write_pgm(&out.join(format!("overlay_{i:05}.pgm")))?;
            }
            println!("wrote keypoints for {} frames to {}", frames.len(), out.display());
        }
        Command::Eval {
            pred,
            truth,
            delta,
            out,
        } => {
            let csv = if pred.is_dir() { pred.join(KEYPOINTS_FILE) } else { pred };
            let text = fs::read_to_string(&csv).map_err(|e| Error::Io {
                path: csv.clone(),
                source: e,
            })?;
            let kps = parse_keypoints_csv(&text).map_err(|m| Error::Format { path: csv, msg: m })?;
            let gt = load_truth(&truth)?;
            let delta = match delta {
                Some(d) => d,
                None => {
                    let first = truth.join(frame_file_name(0));
                    match first.exists() {
                        true => default_delta(Frame::read_pgm(&first)?.rows()),
                        false => default_delta(64),
                    }
                }
            };
            // a frame-count mismatch between prediction and truth is bad data
            let report = evaluate(&kps, &gt, delta).map_err(|e| match e {
                Error::InvalidArgument(m) if !(delta > 0.0) => Error::Config {
                    file: "<command line>".into(),
                    line: 0,
                    msg: m,
                },
                Error::InvalidArgument(m) => Error::Data(m),
                other => other,
            })?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write(&out, &report.to_text())?;
            write(&out.with_extension("frames.csv"), &per_frame_csv(&kps, &gt, delta)?)?;
            println!(
                "pleura accuracy {:.4} ({} of {} frames, delta {delta})",
                report.pleura_accuracy, report.frames_pleura_correct, report.frames_total
            );
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Format { .. } | Error::Shape { .. } => 3,
        Error::NonFinite(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lusk: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tcvc::backbone::{build_toy_backbone, Backbone};
use tcvc::checkpoint::{backbone_checksum, Checkpoint};
use tcvc::colorspace::{normalize, read_frame_dir, rgb_to_lab, write_frame_dir};
use tcvc::config::{parse_list, KeyValues};
use tcvc::flow::FlowSet;
use tcvc::fusion::{FfmConfig, FfmParams};
use tcvc::metrics::{evaluate_video, FlowSource, MetricsReport};
use tcvc::pipeline::{
    assemble_rgb, ensemble_colorize, generate_synthetic, load_flows, read_gray_frames, resolve_flow_dir,
    write_synthetic, SynthSpec,
};
use tcvc::srl::{train_tcvc, LossKind, write_curve_csv, TrainConfig, TrainingSequence};
use tcvc::{Result, TcvcError};

#[derive(Parser)]
#[command(name = "tcvc", version, about = "Temporally consistent video colorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Colorize a directory of grayscale frames (00001.png, 00002.png, ...).
    Colorize {
        frames_dir: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "N", default_value_t = 17)]
        n: usize,
        /// Comma-separated interval lengths to average, e.g. 15,17.
        #[arg(long)]
        ensemble: Option<String>,
        #[arg(long)]
        flow_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the fusion module on grayscale sequences with flows.
    Train {
        #[arg(required = true)]
        sequences: Vec<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_ckpt: PathBuf,
    },
    /// Compute metrics of predicted frames against ground truth.
    Evaluate {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        #[arg(long)]
        flow_dir: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Render a synthetic video with oracle flows.
    Synth {
        spec_file: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn colorize(
    frames_dir: &Path,
    ckpt: &Path,
    n: usize,
    ensemble: Option<&str>,
    flow_dir: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let ffm = ck
        .ffm
        .ok_or_else(|| TcvcError::InvalidArgument(format!("{} has no fusion weights", ckpt.display())))?;
    let frames = read_gray_frames(frames_dir)?;
    let (flows, _) = load_flows(frames_dir, flow_dir, frames.len())?;
    let ns = match ensemble {
        Some(s) => parse_list::<usize>(s).map_err(|_| TcvcError::InvalidArgument(format!("bad --ensemble '{s}'")))?,
        None => vec![n],
    };
    let chroma = ensemble_colorize(&frames, &ck.backbone, &ffm, &flows, &ns)?;
    write_frame_dir(out, &assemble_rgb(&frames, &chroma)?)
}

fn train(sequences: &[PathBuf], config: &Path, out_ckpt: &Path) -> Result<()> {
    let kv = KeyValues::read(config)?;
    let cfg = TrainConfig::from_key_values(&kv)?;
    let backbone = match kv.get("backbone_ckpt") {
        Some(p) => Checkpoint::load(Path::new(p))?.backbone,
        None => build_toy_backbone(kv.parse_or("backbone_seed", 0)?),
    };
    let before = backbone_checksum(&backbone);
    let ffm_cfg = FfmConfig::new(backbone.feature_channels()).with_hidden(kv.parse_or("ffm_hidden", 64)?);
    let ffm = FfmParams::new(ffm_cfg, cfg.seed);
    let data = sequences
        .iter()
        .map(|dir| {
            let frames = read_gray_frames(dir)?;
            let flow_root = resolve_flow_dir(dir, None)?;
            let flows = FlowSet::read_dir(&flow_root, frames.len())?;
            let seq = TrainingSequence::new(frames, flows)?;
            if cfg.loss != LossKind::GroundTruthL2 {
                return Ok(seq);
            }
            // Ground truth sits next to the grayscale frames, as written by `synth`.
            let color_dir = dir.parent().unwrap_or(Path::new(".")).join("color");
            let chroma = read_frame_dir(&color_dir)?
                .iter()
                .map(|img| normalize(&rgb_to_lab(img)).1)
                .collect();
            seq.with_chroma(chroma)
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = train_tcvc(&backbone, &ffm, &data, &cfg)?;
    assert_eq!(before, backbone_checksum(&backbone));
    Checkpoint {
        backbone,
        ffm: Some(outcome.ffm),
    }
    .save(out_ckpt)?;
    if let Some(p) = kv.get("curve_csv") {
        write_curve_csv(Path::new(p), &outcome.curve)?;
    }
    if let Some(last) = outcome.curve.last() {
        println!("trained {} iterations, final loss {:.6}", outcome.curve.len(), last.loss);
    }
    Ok(())
}

fn evaluate(pred_dir: &Path, gt_dir: &Path, flow_dir: Option<&Path>, report: &Path) -> Result<()> {
    let pred = read_frame_dir(pred_dir)?;
    let gt = read_frame_dir(gt_dir)?;
    if pred.is_empty() {
        return Err(TcvcError::EmptyDataset("prediction directory has no frames"));
    }
    let flows = match flow_dir {
        Some(d) => Some(FlowSet::read_dir(&resolve_flow_dir(d, Some(d))?, pred.len())?),
        None => None,
    };
    let masks = flows.as_ref().map(FlowSet::backward_occlusion).transpose()?;
    let name = pred_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".into());
    let m = evaluate_video(
        &name,
        &pred,
        Some(&gt),
        flows.as_ref().zip(masks.as_ref()).map(|(f, m)| (&f.backward[..], &m[..])),
    )?;
    let source = if flows.is_some() { FlowSource::Files } else { FlowSource::None };
    let r = MetricsReport::new(vec![m], source)?;
    r.write_json(report)?;
    print!("{}", r.table());
    Ok(())
}

fn synth(spec_file: &Path, seed: u64, out: &Path) -> Result<()> {
    let spec = SynthSpec::from_key_values(&KeyValues::read(spec_file)?)?;
    write_synthetic(&generate_synthetic(&spec, seed)?, out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Colorize {
            frames_dir,
            ckpt,
            n,
            ensemble,
            flow_dir,
            out,
        } => colorize(frames_dir, ckpt, *n, ensemble.as_deref(), flow_dir.as_deref(), out),
        Command::Train {
            sequences,
            config,
            out_ckpt,
        } => train(sequences, config, out_ckpt),
        Command::Evaluate {
            pred_dir,
            gt_dir,
            flow_dir,
            report,
        } => evaluate(pred_dir, gt_dir, flow_dir.as_deref(), report),
        Command::Synth { spec_file, seed, out } => synth(spec_file, *seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tcvc: {e}");
            ExitCode::FAILURE
        }
    }
}

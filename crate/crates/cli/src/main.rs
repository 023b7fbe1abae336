//! `cfc`: batch front end for synthetic data, sparsification, training,
//! completion, evaluation and gradient checking.
//!
//! JSON results go to stdout, logs to stderr. Exit codes: 0 success,
//! 1 check failure, 2 usage or input error, 3 training divergence.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfc_core::depth_io::{self, DepthMap, RgbImage};
use cfc_core::gradcheck::{self, GradcheckOptions};
use cfc_core::mask::SparsityMask;
use cfc_core::metrics::{self, MetricsOptions};
use cfc_core::model::{CfcModel, InputConfig, LossWeights, NetworkConfig};
use cfc_core::sparsify::{self, split_for_inference, split_input, SparsifierKind};
use cfc_core::train::{self, TrainConfig};
use cfc_core::Error;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Deserialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "cfc", version, about = "Sparse depth completion with correlated RGB features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PPM/PFM pairs plus manifest).
    MakeSynthetic(MakeSyntheticArgs),
    /// Sample sparse depth from a dense frame.
    Sparsify(SparsifyArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Complete a sparse depth map with a trained checkpoint.
    Complete(CompleteArgs),
    /// Evaluate a prediction against groundtruth.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct MakeSyntheticArgs {
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SparsifyArgs {
    /// Frame stem: reads `<stem>.ppm` and `<stem>.pfm`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "uniform")]
    sparsifier: SparsifierKind,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = sparsify::DEFAULT_ORB_THRESHOLD)]
    orb_threshold: f64,
    /// Output stem: writes `<stem>.pgm` (mask) and `<stem>.pfm` (sparse depth).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON file with optional `train` and `network` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for `log.jsonl`, `final.ckpt` and `best.ckpt`.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    sparsifier: Option<SparsifierKind>,
    #[arg(long)]
    n_points: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    r1: Option<f64>,
    #[arg(long)]
    w_trans: Option<f64>,
    #[arg(long)]
    w_recon: Option<f64>,
    #[arg(long)]
    w_smooth: Option<f64>,
    /// crgb+sd, rgb+sd, sd or rgb.
    #[arg(long)]
    input_config: Option<InputConfig>,
    /// Comma-separated encoder widths, e.g. `8,16,32`.
    #[arg(long, value_delimiter = ',')]
    channel_schedule: Option<Vec<usize>>,
    #[arg(long)]
    trans_stop_grad: bool,
}

#[derive(Args)]
struct CompleteArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    sparse_depth: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Output stem: writes `<stem>.pfm` and a colour-mapped `<stem>.ppm`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Count `max(p/g, g/p) == 1.25^i` as a hit.
    #[arg(long)]
    inclusive_delta: bool,
    /// Count `|p − g| == 0.1·g` as a miss.
    #[arg(long)]
    exclusive_within_10: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid dims `ROWSxCOLSxCHANNELS`.
    #[arg(long, default_value = "6x6x4")]
    dims: String,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// Process outcome other than success.
enum Failure {
    Check(String),
    Input(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeSynthetic(a) => cmd_make_synthetic(a),
        Command::Sparsify(a) => cmd_sparsify(a),
        Command::Train(a) => cmd_train(a),
        Command::Complete(a) => cmd_complete(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::DivergedLoss { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn emit(value: serde_json::Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{value}");
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn cmd_make_synthetic(a: MakeSyntheticArgs) -> CmdResult {
    let samples = (0..a.count as u64)
        .map(|i| depth_io::make_synthetic_scene(a.seed.wrapping_add(i), a.width, a.height))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = depth_io::write_dataset(&a.out_dir, &samples)?;
    emit(json!({
        "count": samples.len(),
        "manifest": manifest,
        "ids": samples.iter().map(|s| s.identifier.as_str()).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn cmd_sparsify(a: SparsifyArgs) -> CmdResult {
    let rgb = depth_io::load_ppm(with_ext(&a.input, "ppm"))?;
    let depth = depth_io::load_pfm(with_ext(&a.input, "pfm"))?;
    let mask = sparsify::sparsify(a.sparsifier, &rgb, &depth, a.n, a.seed, a.orb_threshold)?;
    let split = split_input(&rgb, &depth, &mask)?;
    mask.save_pgm(with_ext(&a.out, "pgm"))?;
    depth_io::save_pfm(&split.sparse_depth, with_ext(&a.out, "pfm"))?;
    emit(json!({ "n_sampled": split.mask.count(), "n_valid": depth.valid_count() }));
    Ok(())
}

/// Optional network overrides accepted in a training config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct NetworkOverrides {
    channel_schedule: Option<Vec<usize>>,
    kernel_size: Option<usize>,
    transformer_depth: Option<usize>,
    input_config: Option<InputConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    train: TrainConfig,
    network: NetworkOverrides,
}

fn read_run_config(path: &Path) -> Result<RunConfig, Error> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn resolve_train_config(a: &TrainArgs, rows: usize, cols: usize) -> Result<(TrainConfig, NetworkConfig), Error> {
    let run = match &a.config {
        Some(p) => read_run_config(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = run.train;
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.r1, a.r1);
    let LossWeights {
        w_trans,
        w_recon,
        w_smooth,
    } = &mut cfg.weights;
    set(w_trans, a.w_trans);
    set(w_recon, a.w_recon);
    set(w_smooth, a.w_smooth);
    cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.sparsifier = a.sparsifier.unwrap_or(cfg.sparsifier);
    cfg.n_points = a.n_points.unwrap_or(cfg.n_points);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.trans_stop_grad |= a.trans_stop_grad;
    cfg.validate()?;

    let mut net = NetworkConfig::desk(rows, cols);
    let ov = run.network;
    if let Some(s) = a.channel_schedule.clone().or(ov.channel_schedule) {
        net.channel_schedule = s;
    }
    net.kernel_size = ov.kernel_size.unwrap_or(net.kernel_size);
    net.transformer_depth = ov.transformer_depth.unwrap_or(net.transformer_depth);
    net.input_config = a.input_config.or(ov.input_config).unwrap_or(net.input_config);
    net.validate()?;
    Ok((cfg, net))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let samples = depth_io::load_dataset(&a.manifest)?;
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let (rows, cols) = (first.depth_gt.height(), first.depth_gt.width());
    let (cfg, net) = resolve_train_config(&a, rows, cols)?;
    create_dir(&a.out_dir)?;
    info!("training on {} scenes: {:?} {:?}", samples.len(), net, cfg);

    let mut model = CfcModel::new(net, cfg.seed)?;
    let log_path = a.out_dir.join("log.jsonl");
    let mut log = String::new();
    let mut best: Option<(f64, Vec<u8>)> = None;
    let result = train::train(&mut model, &samples, &cfg, |rec, m| {
        log.push_str(&serde_json::to_string(rec).expect("record serializes"));
        log.push('\n');
        if best.as_ref().is_none_or(|(b, _)| rec.l_total < *b) {
            best = Some((rec.l_total, m.checkpoint_bytes()));
        }
        if rec.iter % 20 == 0 {
            info!("iter {} l_total {:.5} corr {:.4}", rec.iter, rec.l_total, rec.corr);
        }
        Ok(())
    });
    write_bytes(&log_path, log.as_bytes())?;
    if let Some((_, bytes)) = &best {
        write_bytes(&a.out_dir.join("best.ckpt"), bytes)?;
    }
    let records = match result {
        Ok(r) => r,
        Err(e @ Error::DivergedLoss { .. }) => {
            let path = a.out_dir.join("diverged.ckpt");
            model.save(&path)?;
            warn!("training diverged; last finite parameters saved to {}", path.display());
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let final_path = a.out_dir.join("final.ckpt");
    model.save(&final_path)?;
    let first = records.first();
    let last = records.last();
    emit(json!({
        "iterations": records.len(),
        "initial_l_total": first.map(|r| r.l_total),
        "final_l_total": last.map(|r| r.l_total),
        "initial_corr": first.map(|r| r.corr),
        "final_corr": last.map(|r| r.corr),
        "log": log_path,
        "final_checkpoint": final_path,
        "best_checkpoint": a.out_dir.join("best.ckpt"),
    }));
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Viridis-like anchor colours, evenly spaced on `[0, 1]`.
const RAMP: [[f32; 3]; 5] = [
    [0.267, 0.005, 0.329],
    [0.231, 0.322, 0.545],
    [0.129, 0.569, 0.549],
    [0.369, 0.788, 0.384],
    [0.993, 0.906, 0.144],
];

fn ramp(t: f32) -> [f32; 3] {
    let x = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f32;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f32;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    [0, 1, 2].map(|k| a[k] * (1.0 - f) + b[k] * f)
}

fn colorize(depth: &DepthMap) -> Result<RgbImage, Error> {
    let (lo, hi) = depth
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let pixels = depth
        .data()
        .iter()
        .map(|&v| ramp(if span > 0.0 { (v - lo) / span } else { 0.0 }))
        .collect();
    RgbImage::new(depth.width(), depth.height(), pixels)
}

fn cmd_complete(a: CompleteArgs) -> CmdResult {
    let model = CfcModel::load(&a.checkpoint)?;
    let rgb = depth_io::load_ppm(&a.rgb)?;
    let sparse = depth_io::load_pfm(&a.sparse_depth)?;
    let mask = SparsityMask::load_pgm(&a.mask)?;
    let split = split_for_inference(&rgb, &sparse, &mask)?;
    let pred = model.complete(&split)?;
    let (pfm, ppm) = (with_ext(&a.out, "pfm"), with_ext(&a.out, "ppm"));
    depth_io::save_pfm(&pred, &pfm)?;
    depth_io::save_ppm(&colorize(&pred)?, &ppm)?;
    let (lo, hi) = pred
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    emit(json!({
        "width": pred.width(),
        "height": pred.height(),
        "min": lo,
        "max": hi,
        "prediction": pfm,
        "visualization": ppm,
    }));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let pred = depth_io::load_pfm(&a.pred)?;
    let gt = depth_io::load_pfm(&a.gt)?;
    let opts = MetricsOptions {
        strict_delta: !a.inclusive_delta,
        inclusive_within_10: !a.exclusive_within_10,
    };
    let report = metrics::evaluate_with(&pred, &gt, opts)?;
    emit(serde_json::to_value(&report).expect("report serializes"));
    Ok(())
}

fn parse_dims(s: &str) -> Result<[usize; 3], Error> {
    let parts: Vec<_> = s.split(['x', 'X']).map(str::parse::<usize>).collect();
    match parts.as_slice() {
        [Ok(r), Ok(c), Ok(ch)] => Ok([*r, *c, *ch]),
        _ => Err(Error::InvalidConfig(format!(
            "dims {s:?} must look like ROWSxCOLSxCHANNELS"
        ))),
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let [rows, cols, channels] = parse_dims(&a.dims)?;
    let report = gradcheck::run(&GradcheckOptions {
        seed: a.seed,
        rows,
        cols,
        channels,
        inject_fault: a.inject_fault,
    })?;
    emit(serde_json::to_value(&report).expect("report serializes"));
    if report.pass {
        Ok(())
    } else {
        let failed: Vec<_> = report
            .checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.name.as_str())
            .collect();
        Err(Failure::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

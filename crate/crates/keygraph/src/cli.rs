//! Command-line surface: `gen` makes a dataset, `train` fits a model,
//! `eval` scores a checkpoint, `render` draws keypoint and edge overlays.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Config precedence: command-line flag > config file line > built-in
//! default. Every command is deterministic given its arguments and inputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::diffgeom::{render_edge_map_tensor, HeatmapMode};
use crate::error::{Error, Result};
use crate::evalkit::evaluate;
use crate::synthdata::{generate_dataset, load_image_file, save_image_file, Dataset};
use crate::trainer::{train_loop, ModelState, TrainConfig};
use crate::numcore::Tensor;

/// Thickness used for edge-map visualization, wider than the training
/// default so structure is visible at a glance.
const VIZ_SIGMA2: f32 = 5e-4;

#[derive(Parser)]
#[command(
    name = "keygraph",
    version,
    about = "Learn 2D keypoints and a shared keypoint graph from unlabeled images \
             by reconstructing heavily masked inputs."
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stick-figure dataset with train/ and eval/ splits.
    Gen(GenArgs),
    /// Train a model on a generated dataset and write checkpoints + metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint: linear-probe detected keypoints against joints.
    Eval(EvalArgs),
    /// Render side-by-side visualizations (input | keypoints | edge map).
    Render(RenderArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Dataset root directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Training images to generate.
    #[arg(long, default_value_t = 5000)]
    train: usize,
    /// Evaluation images to generate.
    #[arg(long, default_value_t = 500)]
    eval: usize,
    /// Base seed; the eval split draws from a disjoint seed range.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side length of the square images in pixels.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root (a directory containing train/ and eval/).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Config file of `key=value` lines; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print a log line every this many steps [default: 50].
    #[arg(long, default_value_t = 50)]
    log_interval: u64,
    /// Also checkpoint every this many steps; 0 disables [default: 1000].
    #[arg(long, default_value_t = 1000)]
    ckpt_interval: u64,
    /// Image side length in pixels [default: 64].
    #[arg(long)]
    image_size: Option<usize>,
    /// Number of keypoints to learn [default: 8].
    #[arg(long = "k", visible_alias = "n-keypoints")]
    k: Option<usize>,
    /// Squared edge thickness for rendering [default: 5e-5].
    #[arg(long)]
    sigma2: Option<f64>,
    /// fixed | shared_learnable | per_edge_learnable [default: fixed].
    #[arg(long)]
    thickness_mode: Option<String>,
    /// max_combined | per_edge_channel | keypoints_only [default: max_combined].
    #[arg(long)]
    heatmap_mode: Option<String>,
    /// Learn the gate that scales the masked image [default: true].
    #[arg(long)]
    learnable_alpha: Option<bool>,
    /// Mask patch side in pixels [default: image_size / 8].
    #[arg(long)]
    patch_px: Option<usize>,
    /// Fraction of patches to mask [default: 0.8].
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Adam learning rate [default: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Adam first-moment decay [default: 0.9].
    #[arg(long)]
    beta1: Option<f64>,
    /// Adam second-moment decay [default: 0.99].
    #[arg(long)]
    beta2: Option<f64>,
    /// Adam denominator offset [default: 1e-8].
    #[arg(long)]
    adam_eps: Option<f64>,
    /// Learning-rate multiplier for edge weights [default: 512].
    #[arg(long)]
    edge_lr_mult: Option<f64>,
    /// Weight of the pixel term in the loss [default: 0.1].
    #[arg(long)]
    pixel_loss_weight: Option<f64>,
    /// Images per training step [default: 16].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Total optimization steps [default: 3000].
    #[arg(long)]
    iters: Option<u64>,
    /// Run seed; fixes init, batching, and masking [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root (a directory containing train/ and eval/).
    #[arg(long)]
    data: PathBuf,
    /// Where to write the report JSON; printed metrics are unaffected.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Checkpoint file to render from.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory for the composite PNGs.
    #[arg(long)]
    out: PathBuf,
    /// Input images (PNG, matching the checkpoint's image size).
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    generate_dataset(&a.out, a.train, a.eval, a.seed, a.image_size)?;
    println!(
        "wrote {} train and {} eval images at {}x{} under {}",
        a.train,
        a.eval,
        a.image_size,
        a.image_size,
        a.out.display()
    );
    Ok(())
}

/// Defaults, then config-file lines, then flags; strict keys throughout.
fn build_config(file: Option<&Path>, flags: &[(&str, Option<String>)]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    i + 1
                ))
            })?;
            cfg.apply_kv(k.trim(), v.trim())?;
        }
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.apply_kv(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainMetrics {
    final_loss: f64,
    steps: u64,
    wall_seconds: f64,
    config: TrainConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let flags: Vec<(&str, Option<String>)> = vec![
        ("image_size", a.image_size.map(|v| v.to_string())),
        ("n_keypoints", a.k.map(|v| v.to_string())),
        ("sigma2", a.sigma2.map(|v| v.to_string())),
        ("thickness_mode", a.thickness_mode.clone()),
        ("heatmap_mode", a.heatmap_mode.clone()),
        ("learnable_alpha", a.learnable_alpha.map(|v| v.to_string())),
        ("patch_px", a.patch_px.map(|v| v.to_string())),
        ("mask_ratio", a.mask_ratio.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("beta1", a.beta1.map(|v| v.to_string())),
        ("beta2", a.beta2.map(|v| v.to_string())),
        ("adam_eps", a.adam_eps.map(|v| v.to_string())),
        ("edge_lr_mult", a.edge_lr_mult.map(|v| v.to_string())),
        ("pixel_loss_weight", a.pixel_loss_weight.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("iters", a.iters.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    let cfg = build_config(a.config.as_deref(), &flags)?;

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let data = Dataset::load(&a.data.join("train"))?;
    let images = data.load_all_images()?;
    let s = cfg.image_size;
    if images[0].shape() != [3, s, s] {
        return Err(Error::Config(format!(
            "dataset images have shape {:?} but the config requests {s}x{s}",
            images[0].shape()
        )));
    }

    let mut state = ModelState::<f32>::init(cfg)?;
    state.save_checkpoint(&a.out.join("ckpt_init"))?;
    let log_interval = a.log_interval.max(1);
    let started = Instant::now();
    let mut final_loss = f64::NAN;
    train_loop(&mut state, &images, |st, loss| {
        final_loss = loss;
        if st.step % log_interval == 0 || st.step == st.config.iters {
            println!("step={} loss={}", st.step, loss);
        }
        if a.ckpt_interval > 0 && st.step % a.ckpt_interval == 0 && st.step < st.config.iters {
            st.save_checkpoint(&a.out.join(format!("ckpt_{:06}", st.step)))?;
        }
        Ok(())
    })?;
    state.save_checkpoint(&a.out.join("ckpt_final"))?;
    let metrics = TrainMetrics {
        final_loss,
        steps: state.step,
        wall_seconds: started.elapsed().as_secs_f64(),
        config: state.config.clone(),
    };
    write_json(&a.out.join("metrics.json"), &metrics)?;
    println!(
        "trained {} steps in {:.1}s; wrote {}",
        state.step,
        metrics.wall_seconds,
        a.out.join("ckpt_final").display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let state = ModelState::<f32>::load_checkpoint(&a.ckpt)?;
    let report = evaluate(&state, &a.data)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    println!(
        "error_mean={} pck={} mae_sum={} n={}",
        report.error_mean, report.pck, report.mae_sum, report.n
    );
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let state = ModelState::<f32>::load_checkpoint(&a.ckpt)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut succeeded = 0usize;
    for input in &a.images {
        match render_one(&state, input, &a.out) {
            Ok(path) => {
                succeeded += 1;
                println!("wrote {}", path.display());
            }
            Err(e) => eprintln!("warning: {}: {e}", input.display()),
        }
    }
    if succeeded == 0 {
        return Err(Error::Eval("no input image could be rendered".into()));
    }
    Ok(())
}

/// Evenly spaced hues, full saturation; distinct per keypoint.
fn keypoint_color(i: usize, k: usize) -> [f32; 3] {
    let h = 6.0 * i as f32 / k.max(1) as f32;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn draw_disc(data: &mut [f32], s: usize, cx: f64, cy: f64, r: i64, color: [f32; 3]) {
    let (px, py) = (cx.round() as i64, cy.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let (x, y) = (px + dx, py + dy);
            if x < 0 || y < 0 || x >= s as i64 || y >= s as i64 {
                continue;
            }
            for ch in 0..3 {
                data[(ch * s + y as usize) * s + x as usize] = color[ch];
            }
        }
    }
}

fn render_one(state: &ModelState<f32>, input: &Path, out_dir: &Path) -> Result<PathBuf> {
    let img = load_image_file(input)?;
    let s = state.config.image_size;
    if img.shape() != [3, s, s] {
        return Err(Error::Eval(format!(
            "image has shape {:?} but the checkpoint expects [3, {s}, {s}]",
            img.shape()
        )));
    }
    let batch = Tensor::new(&[1, 3, s, s], img.data().to_vec())?;
    let kps = state.infer_keypoints(&batch)?;
    let k = state.config.n_keypoints;

    // Middle panel: keypoints as colored discs over the input.
    let mut overlay = img.data().to_vec();
    let radius = (s as i64 / 32).max(2);
    for i in 0..k {
        let x = kps.data()[i * 2] as f64;
        let y = kps.data()[i * 2 + 1] as f64;
        let cx = (x + 1.0) / 2.0 * (s - 1) as f64;
        let cy = (y + 1.0) / 2.0 * (s - 1) as f64;
        draw_disc(&mut overlay, s, cx, cy, radius, keypoint_color(i, k));
    }

    // Right panel: the learned graph rendered on the detected keypoints at
    // visualization thickness, weights scaled so the strongest edge is 1.
    let eg = state.edge_graph();
    let viz_mode = if state.config.heatmap_mode == HeatmapMode::KeypointsOnly {
        HeatmapMode::KeypointsOnly
    } else {
        HeatmapMode::MaxCombined
    };
    let mut weights = if viz_mode == HeatmapMode::KeypointsOnly {
        eg.effective_point_weights()
    } else {
        eg.effective_weights()
    };
    let wmax = weights.iter().cloned().fold(f32::MIN, f32::max);
    if wmax > 0.0 {
        for w in &mut weights {
            *w /= wmax;
        }
    }
    let edge = render_edge_map_tensor(&kps, &weights, &[VIZ_SIGMA2], s, s, viz_mode)?;
    let ev = edge.values.data();

    // Composite: [3, s, 3s] of input | overlay | edge map (grayscale).
    let mut comp = vec![0.0f32; 3 * s * 3 * s];
    for ch in 0..3 {
        for y in 0..s {
            let row = &mut comp[(ch * s + y) * 3 * s..(ch * s + y + 1) * 3 * s];
            row[..s].copy_from_slice(&img.data()[(ch * s + y) * s..(ch * s + y + 1) * s]);
            row[s..2 * s].copy_from_slice(&overlay[(ch * s + y) * s..(ch * s + y + 1) * s]);
            for x in 0..s {
                row[2 * s + x] = ev[y * s + x];
            }
        }
    }
    let comp = Tensor::new(&[3, s, 3 * s], comp)?;
    let stem = input
        .file_stem()
        .and_then(|f| f.to_str())
        .ok_or_else(|| Error::Eval(format!("cannot derive a name from {}", input.display())))?;
    let out_path = out_dir.join(format!("{stem}_viz.png"));
    save_image_file(&out_path, &comp)?;
    Ok(out_path)
}

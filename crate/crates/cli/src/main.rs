use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use skipconv::bench::{
    bench_cell, camera_motion_curve, render_rows, render_table, run_sweep, write_csv, BenchCell, CellResult, CsvRow,
    Timing,
};
use skipconv::engine::{Network, ResetPeriod};
use skipconv::gates::{GateConfig, GateVariant, INPUT_NORM_EPSILON, OUTPUT_NORM_EPSILON};
use skipconv::io::{gen_synthetic, load_frames, load_model, save_frames, save_model, FrameSequence, SceneSpec};
use skipconv::tensor::{relative_deviation, ConvGeometry, Tensor};
use skipconv::train::{evaluate, synthetic_clips, train_dense, train_gates, DenseTrainConfig, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "skpc", version, about = "Skip-convolution inference on frame sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a model over a frame sequence and report MACs, timing and deviation.
    Run(RunArgs),
    /// Check that skip inference with all-ones gates reproduces dense inference.
    Verify(VerifyArgs),
    /// Sweep gate variant, threshold, block size and reset period.
    Bench(BenchArgs),
    /// Train gumbel gates on the synthetic heatmap task.
    TrainGates(TrainArgs),
    /// Print CSV files as aligned tables.
    Report(ReportArgs),
    /// Write a synthetic moving-squares sequence.
    Synth(SynthArgs),
    /// Write a randomly initialized model.
    InitModel(InitArgs),
}

#[derive(Args, Debug, Clone)]
struct InputArgs {
    /// Model file (.skpc). Defaults to a random 3-layer network.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Frame file (.fseq). Defaults to a synthetic sequence.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Seed for every generated input.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct GateArgs {
    /// Gate for every layer: all-ones, input-norm, output-norm or gumbel.
    /// Defaults to the gates stored in the model.
    #[arg(long)]
    gate: Option<GateVariant>,
    /// Threshold for norm gates. Defaults to 1e-2 (input-norm) or 15e-5 (output-norm).
    #[arg(long)]
    epsilon: Option<f32>,
    /// Block edge for structured masks (1, 2, 4 or 8).
    #[arg(long, default_value_t = 1)]
    block: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    gate: GateArgs,
    /// Frames between dense reference frames, or `inf`.
    #[arg(long, default_value = "8")]
    reset_period: ResetPeriod,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Largest accepted deviation relative to the dense output's peak magnitude.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f32,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Gate variants to sweep.
    #[arg(long, value_delimiter = ',')]
    gate: Vec<GateVariant>,
    /// Thresholds to sweep for norm gates.
    #[arg(long, value_delimiter = ',')]
    epsilon: Vec<f32>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    block: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "8,inf")]
    reset_period: Vec<ResetPeriod>,
    /// Camera motions (px/frame) for the sparsity-vs-motion curve.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,1,2")]
    camera_motion: Vec<f32>,
    /// Skip the camera-motion curve.
    #[arg(long)]
    no_camera: bool,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Starting model; its weights are kept. Defaults to a densely trained
    /// random network.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    beta: f64,
    #[arg(long, default_value_t = 150)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    clip_length: usize,
    #[arg(long, default_value_t = 0.5)]
    learning_rate: f64,
    /// Steps of dense pre-training when no model is given.
    #[arg(long, default_value_t = 300)]
    dense_steps: usize,
    /// Also update the convolution weights.
    #[arg(long)]
    co_train: bool,
    #[arg(long, default_value_t = 8)]
    clips: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// CSV files to render.
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct SceneArgs {
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long = "frame-count", default_value_t = 8)]
    frame_count: usize,
    #[arg(long, default_value_t = 1)]
    squares: usize,
    #[arg(long, default_value_t = 4)]
    square_size: usize,
    /// Square speed in px/frame.
    #[arg(long, default_value_t = 1)]
    speed: i32,
    #[arg(long, default_value_t = 0.0)]
    camera_motion: f32,
}

impl SceneArgs {
    fn spec(&self) -> SceneSpec {
        SceneSpec {
            width: self.width,
            height: self.height,
            channels: self.channels,
            frames: self.frame_count,
            squares: self.squares,
            square_size: self.square_size,
            velocity: (self.speed, 0),
            camera_motion: self.camera_motion,
            ..SceneSpec::default()
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output frame file.
    #[arg(long)]
    out: PathBuf,
    /// Also write the heatmap targets as a frame file.
    #[arg(long)]
    targets: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InitArgs {
    /// Channel widths, input first.
    #[arg(long, value_delimiter = ',', default_value = "3,8,8,3")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[command(flatten)]
    gate: GateArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

const DEFAULT_WIDTHS: [usize; 4] = [3, 8, 8, 3];

fn default_epsilon(variant: GateVariant) -> f32 {
    match variant {
        GateVariant::InputNorm => INPUT_NORM_EPSILON,
        GateVariant::OutputNorm => OUTPUT_NORM_EPSILON,
        GateVariant::AllOnes | GateVariant::Gumbel => 0.0,
    }
}

fn norm_gate(variant: GateVariant, epsilon: Option<f32>, block: usize) -> Result<GateConfig> {
    let eps = epsilon.unwrap_or_else(|| default_epsilon(variant));
    let cfg = match variant {
        GateVariant::AllOnes => GateConfig::all_ones(),
        GateVariant::InputNorm => GateConfig::input_norm(eps),
        GateVariant::OutputNorm => GateConfig::output_norm(eps),
        GateVariant::Gumbel => bail!("gumbel gates need trained parameters; run train-gates"),
    }
    .with_block(block);
    cfg.validate()?;
    Ok(cfg)
}

/// `net` with every layer's gate replaced. Gumbel keeps each layer's stored
/// parameters.
fn with_gate(net: &Network, variant: GateVariant, epsilon: Option<f32>, block: usize) -> Result<Network> {
    if variant != GateVariant::Gumbel {
        return Ok(net.with_gate(&norm_gate(variant, epsilon, block)?)?);
    }
    let mut out = net.clone();
    for (i, l) in out.layers_mut().iter_mut().enumerate() {
        let Some(phi) = l.gate.phi.clone() else {
            bail!("layer {i} ({}) has no trained gate parameters; run train-gates first", l.conv.describe());
        };
        l.gate = GateConfig::gumbel(phi).with_block(block);
    }
    Ok(Network::new(out.layers().to_vec())?)
}

fn apply_gate_args(net: Network, g: &GateArgs) -> Result<Network> {
    match g.gate {
        Some(v) => with_gate(&net, v, g.epsilon, g.block),
        None => {
            if g.epsilon.is_some() || g.block != 1 {
                bail!("--epsilon and --block need --gate");
            }
            Ok(net)
        }
    }
}

fn load_inputs(input: &InputArgs) -> Result<(Network, Vec<Tensor>)> {
    let net = match &input.model {
        Some(p) => load_model(p).with_context(|| format!("loading model {}", p.display()))?,
        None => Network::random(&DEFAULT_WIDTHS, ConvGeometry::same(3), GateConfig::all_ones(), input.seed)?,
    };
    let frames = match &input.frames {
        Some(p) => load_frames(p)
            .with_context(|| format!("loading frames {}", p.display()))?
            .into_frames(),
        None => {
            let spec = SceneSpec {
                channels: net.input_channels(),
                ..SceneSpec::default()
            };
            gen_synthetic(&spec, input.seed)?.frames.into_frames()
        }
    };
    if frames[0].channels() != net.input_channels() {
        bail!(
            "frames have {} channels but the model expects {}",
            frames[0].channels(),
            net.input_channels()
        );
    }
    Ok((net, frames))
}

fn write_rows<R: CsvRow>(dir: &Path, name: &str, rows: &[R]) -> Result<PathBuf> {
    let path = dir.join(name);
    let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(rows, f)?;
    Ok(path)
}

fn timing(reps: usize) -> Result<Timing> {
    if reps == 0 {
        bail!("--reps must be at least 1");
    }
    Ok(Timing { warmup: 1, reps })
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let (net, frames) = load_inputs(&a.input)?;
    let net = apply_gate_args(net, &a.gate)?;
    fs::create_dir_all(&a.out_dir)?;
    let cell = BenchCell {
        gate: None,
        reset: a.reset_period,
    };
    let results = run_sweep(&net, &frames, &[cell], timing(a.reps)?)?;
    let r = &results[0];
    save_frames(&FrameSequence::new(r.outputs.clone())?, a.out_dir.join("outputs.fseq"))?;
    write_outputs(&a.out_dir, &results)?;
    print!("{}", render_rows(&r.frames));
    println!();
    print!("{}", render_rows(std::slice::from_ref(&r.summary)));
    println!(
        "\nMAC reduction {:.2}x, time reduction {:.2}x",
        r.summary.mac_reduction, r.summary.time_reduction
    );
    Ok(())
}

fn write_outputs(dir: &Path, results: &[CellResult]) -> Result<()> {
    let summary: Vec<_> = results.iter().map(|r| r.summary.clone()).collect();
    let frames: Vec<_> = results.iter().flat_map(|r| r.frames.clone()).collect();
    let firing: Vec<_> = results.iter().flat_map(|r| r.firing.clone()).collect();
    write_rows(dir, "summary.csv", &summary)?;
    write_rows(dir, "frames.csv", &frames)?;
    write_rows(dir, "firing.csv", &firing)?;
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    let (net, frames) = load_inputs(&a.input)?;
    let net = net.with_gate(&GateConfig::all_ones())?;
    let mut worst = 0.0f32;
    for reset in [ResetPeriod::Never, ResetPeriod::every(8)?] {
        let cell = BenchCell { gate: None, reset };
        let r = bench_cell(&net, &frames, &cell, Timing { warmup: 0, reps: 1 })?;
        for (out, frame) in r.outputs.iter().zip(&frames) {
            worst = worst.max(relative_deviation(out, &net.dense_forward(frame)?)?);
        }
    }
    println!("max relative deviation {worst:e} (tolerance {:e})", a.tolerance);
    if worst <= a.tolerance {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL");
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let (net, frames) = load_inputs(&a.input)?;
    let variants = if a.gate.is_empty() {
        vec![GateVariant::AllOnes, GateVariant::InputNorm, GateVariant::OutputNorm]
    } else {
        a.gate.clone()
    };
    let mut nets = Vec::new();
    for &v in &variants {
        let eps: Vec<Option<f32>> = match v {
            GateVariant::InputNorm | GateVariant::OutputNorm if !a.epsilon.is_empty() => {
                a.epsilon.iter().copied().map(Some).collect()
            }
            _ => vec![None],
        };
        for e in eps {
            for &b in &a.block {
                nets.push(with_gate(&net, v, e, b)?);
            }
        }
    }
    let t = timing(a.reps)?;
    let mut results = Vec::new();
    for n in &nets {
        let cells: Vec<BenchCell> = a
            .reset_period
            .iter()
            .map(|&reset| BenchCell { gate: None, reset })
            .collect();
        results.extend(run_sweep(n, &frames, &cells, t)?);
    }
    fs::create_dir_all(&a.out_dir)?;
    write_outputs(&a.out_dir, &results)?;
    let summary: Vec<_> = results.iter().map(|r| r.summary.clone()).collect();
    print!("{}", render_rows(&summary));

    if !a.no_camera {
        let gate = norm_gate(GateVariant::OutputNorm, None, 1)?;
        let base = SceneSpec {
            channels: net.input_channels(),
            ..SceneSpec::default()
        };
        let rows = camera_motion_curve(&net, &base, &a.camera_motion, &gate, ResetPeriod::Never, a.input.seed)?;
        write_rows(&a.out_dir, "camera.csv", &rows)?;
        println!();
        print!("{}", render_rows(&rows));
    }
    println!("\nwrote CSVs to {}", a.out_dir.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    fs::create_dir_all(&a.out_dir)?;
    let base = match &a.model {
        Some(p) => load_model(p).with_context(|| format!("loading model {}", p.display()))?,
        None => Network::random(&[1, 8, 8, 1], ConvGeometry::same(3), GateConfig::all_ones(), a.seed)?,
    };
    let spec = SceneSpec {
        channels: base.input_channels(),
        squares: 2,
        ..SceneSpec::default()
    };
    let train = synthetic_clips(&spec, a.clips, a.seed)?;
    let held_out = synthetic_clips(&spec, a.clips.div_ceil(2), a.seed.wrapping_add(1_000_000))?;
    let base = if a.model.is_none() && a.dense_steps > 0 {
        let cfg = DenseTrainConfig {
            steps: a.dense_steps,
            seed: a.seed,
            ..DenseTrainConfig::default()
        };
        let d = train_dense(&base, &train, &cfg)?;
        println!(
            "dense pre-training: loss {:.5} -> {:.5}",
            d.curve.first().copied().unwrap_or(f64::NAN),
            d.curve.last().copied().unwrap_or(f64::NAN)
        );
        d.network
    } else {
        base
    };
    let cfg = TrainConfig {
        beta: a.beta,
        clip_length: a.clip_length,
        learning_rate: a.learning_rate,
        steps: a.steps,
        seed: a.seed,
        co_train_weights: a.co_train,
        ..TrainConfig::default()
    };
    let trained = train_gates(&base, &train, &cfg)?;
    let curve_path = write_rows(&a.out_dir, "curve.csv", &trained.curve.iter().map(CurveRow).collect::<Vec<_>>())?;
    let model_path = a.out_dir.join("gated.skpc");
    save_model(&trained.network, &model_path)?;

    let eval = evaluate(&trained.network, &held_out)?;
    println!("held-out task loss {:.6} (dense {:.6})", eval.task_loss, eval.dense_task_loss);
    println!("MAC reduction {:.2}x", eval.report.reduction());
    for (i, r) in eval.fire_rates().iter().enumerate() {
        println!("layer {i} fire rate {r:.4}");
    }
    println!("wrote {} and {}", curve_path.display(), model_path.display());
    Ok(())
}

struct CurveRow<'a>(&'a skipconv::train::CurvePoint);

impl CsvRow for CurveRow<'_> {
    fn header() -> &'static [&'static str] {
        &["step", "task_loss", "gate_loss", "gate_loss_soft", "total"]
    }

    fn record(&self) -> Vec<String> {
        let p = self.0;
        vec![
            p.step.to_string(),
            p.task_loss.to_string(),
            p.gate_loss.to_string(),
            p.gate_loss_soft.to_string(),
            p.total.to_string(),
        ]
    }
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    for (i, p) in a.files.iter().enumerate() {
        let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
        if i > 0 {
            println!();
        }
        println!("{}", p.display());
        print!("{}", render_table(f)?);
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let v = gen_synthetic(&a.scene.spec(), a.seed)?;
    save_frames(&v.frames, &a.out)?;
    println!(
        "wrote {} frames of {:?}, max changed fraction {:.3}",
        v.frames.len(),
        v.frames.shape(),
        v.max_change_fraction()
    );
    if let Some(t) = &a.targets {
        save_frames(&FrameSequence::new(v.heatmaps)?, t)?;
    }
    Ok(())
}

fn cmd_init(a: InitArgs) -> Result<()> {
    let net = Network::random(&a.widths, ConvGeometry::same(a.kernel), GateConfig::all_ones(), a.seed)?;
    let net = apply_gate_args(net, &a.gate)?;
    save_model(&net, &a.out)?;
    for l in net.layers() {
        println!("{} {} gate {}", l.conv.describe(), l.conv.activation.name(), l.gate.variant.name());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a).map(|_| ExitCode::SUCCESS),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a).map(|_| ExitCode::SUCCESS),
        Command::TrainGates(a) => cmd_train(a).map(|_| ExitCode::SUCCESS),
        Command::Report(a) => cmd_report(a).map(|_| ExitCode::SUCCESS),
        Command::Synth(a) => cmd_synth(a).map(|_| ExitCode::SUCCESS),
        Command::InitModel(a) => cmd_init(a).map(|_| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}

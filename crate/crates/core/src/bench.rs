//! Benchmark sweeps and CSV reports.
//!
//! Every cell of a sweep runs a fresh stream over the same frames, compares
//! each output with per-frame dense inference, and times both paths. MAC
//! columns are deterministic; time columns are medians over repetitions.

use std::io::{Read, Write};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::engine::{MacReport, Network, ResetPeriod, SkipEngine};
use crate::error::{Error, Result};
use crate::gates::{GateConfig, GateVariant};
use crate::io::{gen_synthetic, SceneSpec};
use crate::tensor::{max_abs_diff, mean_abs_diff, Tensor};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SKPC_THREADS";

/// Thread count from `SKPC_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Invalid(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timing {
    pub warmup: usize,
    pub reps: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Self { warmup: 1, reps: 5 }
    }
}

impl Timing {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Invalid("timing needs at least one repetition".into()));
        }
        Ok(())
    }
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median wall-clock of `f` over `timing.reps` runs after `timing.warmup`.
pub fn median_time(timing: Timing, mut f: impl FnMut() -> Result<()>) -> Result<Duration> {
    timing.validate()?;
    for _ in 0..timing.warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(timing.reps);
    for _ in 0..timing.reps {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(Duration::from_secs_f64(median(times)))
}

/// One point of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchCell {
    /// Gate for every layer; `None` keeps the network's own gates.
    pub gate: Option<GateConfig>,
    pub reset: ResetPeriod,
}

/// A table that can be written as CSV.
pub trait CsvRow {
    fn header() -> &'static [&'static str];
    fn record(&self) -> Vec<String>;
}

pub fn write_csv<R: CsvRow>(rows: &[R], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let map = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(R::header()).map_err(map)?;
    for r in rows {
        w.write_record(r.record()).map_err(map)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string<R: CsvRow>(rows: &[R]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

fn gate_key(gate: &GateConfig) -> [String; 3] {
    let eps = match gate.variant {
        GateVariant::InputNorm | GateVariant::OutputNorm => gate.effective_epsilon(),
        GateVariant::AllOnes | GateVariant::Gumbel => 0.0,
    };
    [gate.variant.name().to_string(), eps.to_string(), gate.block.to_string()]
}

/// Aggregate over all frames of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub gate: String,
    pub epsilon: String,
    pub block: String,
    pub reset_period: String,
    pub frames: usize,
    pub dense_gmac: f64,
    pub effective_gmac: f64,
    pub mac_reduction: f64,
    pub dense_ms: f64,
    pub skip_ms: f64,
    pub time_reduction: f64,
    pub max_abs_dev: f32,
    pub mean_abs_dev: f64,
}

pub const BENCH_COLUMNS: &[&str] = &[
    "gate",
    "epsilon",
    "block",
    "reset_period",
    "frames",
    "dense_gmac",
    "effective_gmac",
    "mac_reduction",
    "dense_ms",
    "skip_ms",
    "time_reduction",
    "max_abs_dev",
    "mean_abs_dev",
];

impl CsvRow for BenchRow {
    fn header() -> &'static [&'static str] {
        BENCH_COLUMNS
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.gate.clone(),
            self.epsilon.clone(),
            self.block.clone(),
            self.reset_period.clone(),
            self.frames.to_string(),
            self.dense_gmac.to_string(),
            self.effective_gmac.to_string(),
            self.mac_reduction.to_string(),
            format!("{:.4}", self.dense_ms),
            format!("{:.4}", self.skip_ms),
            format!("{:.3}", self.time_reduction),
            self.max_abs_dev.to_string(),
            self.mean_abs_dev.to_string(),
        ]
    }
}

/// Per-frame measurements of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRow {
    pub gate: String,
    pub epsilon: String,
    pub block: String,
    pub reset_period: String,
    pub frame: usize,
    pub reference: bool,
    pub dense_macs: u64,
    pub effective_macs: u64,
    pub mac_reduction: f64,
    pub dense_ms: f64,
    pub skip_ms: f64,
    pub max_abs_dev: f32,
    pub mean_abs_dev: f64,
}

pub const FRAME_COLUMNS: &[&str] = &[
    "gate",
    "epsilon",
    "block",
    "reset_period",
    "frame",
    "reference",
    "dense_macs",
    "effective_macs",
    "mac_reduction",
    "dense_ms",
    "skip_ms",
    "max_abs_dev",
    "mean_abs_dev",
];

impl CsvRow for FrameRow {
    fn header() -> &'static [&'static str] {
        FRAME_COLUMNS
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.gate.clone(),
            self.epsilon.clone(),
            self.block.clone(),
            self.reset_period.clone(),
            self.frame.to_string(),
            self.reference.to_string(),
            self.dense_macs.to_string(),
            self.effective_macs.to_string(),
            self.mac_reduction.to_string(),
            format!("{:.4}", self.dense_ms),
            format!("{:.4}", self.skip_ms),
            self.max_abs_dev.to_string(),
            self.mean_abs_dev.to_string(),
        ]
    }
}

/// Per-layer firing probability of one cell over its non-reference frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FiringRow {
    pub gate: String,
    pub epsilon: String,
    pub block: String,
    pub reset_period: String,
    pub layer: usize,
    pub layer_desc: String,
    pub dense_macs: u64,
    pub firing_probability: f64,
}

pub const FIRING_COLUMNS: &[&str] = &[
    "gate",
    "epsilon",
    "block",
    "reset_period",
    "layer",
    "layer_desc",
    "dense_macs",
    "firing_probability",
];

impl CsvRow for FiringRow {
    fn header() -> &'static [&'static str] {
        FIRING_COLUMNS
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.gate.clone(),
            self.epsilon.clone(),
            self.block.clone(),
            self.reset_period.clone(),
            self.layer.to_string(),
            self.layer_desc.clone(),
            self.dense_macs.to_string(),
            self.firing_probability.to_string(),
        ]
    }
}

/// Sparsity against global background translation.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRow {
    pub camera_motion: f32,
    pub gate: String,
    pub epsilon: String,
    pub changed_fraction: f64,
    pub mac_reduction: f64,
    pub max_abs_dev: f32,
}

pub const CAMERA_COLUMNS: &[&str] = &[
    "camera_motion",
    "gate",
    "epsilon",
    "changed_fraction",
    "mac_reduction",
    "max_abs_dev",
];

impl CsvRow for CameraRow {
    fn header() -> &'static [&'static str] {
        CAMERA_COLUMNS
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.camera_motion.to_string(),
            self.gate.clone(),
            self.epsilon.clone(),
            self.changed_fraction.to_string(),
            self.mac_reduction.to_string(),
            self.max_abs_dev.to_string(),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub summary: BenchRow,
    pub frames: Vec<FrameRow>,
    pub firing: Vec<FiringRow>,
    pub report: MacReport,
    pub outputs: Vec<Tensor>,
}

/// Runs one cell: `timing.reps` timed passes of both the dense and the skip
/// path after `timing.warmup` untimed ones.
pub fn bench_cell(net: &Network, frames: &[Tensor], cell: &BenchCell, timing: Timing) -> Result<CellResult> {
    timing.validate()?;
    let first = frames.first().ok_or(Error::EmptySequence)?;
    let gated = match &cell.gate {
        Some(g) => net.with_gate(g)?,
        None => net.clone(),
    };
    let engine = SkipEngine::new(gated.clone())?;
    let n = frames.len();
    let mut dense_times = vec![Vec::with_capacity(timing.reps); n];
    let mut skip_times = vec![Vec::with_capacity(timing.reps); n];
    let mut dense_out = Vec::new();
    let mut run: Option<(Vec<Tensor>, MacReport)> = None;
    for rep in 0..timing.warmup + timing.reps {
        let timed = rep >= timing.warmup;
        let mut outs = Vec::with_capacity(n);
        for (i, f) in frames.iter().enumerate() {
            let t = Instant::now();
            let o = net.dense_forward(f)?;
            if timed {
                dense_times[i].push(t.elapsed().as_secs_f64() * 1e3);
            }
            outs.push(o);
        }
        dense_out = outs;

        let mut report = MacReport::new(net.dense_macs(first.shape())?);
        let mut outs = Vec::with_capacity(n);
        let mut stream = engine.stream();
        for (i, f) in frames.iter().enumerate() {
            let t = Instant::now();
            let (o, fr) = if cell.reset.is_reference(i) {
                stream.reference(f)?
            } else {
                stream.step(f)?
            };
            if timed {
                skip_times[i].push(t.elapsed().as_secs_f64() * 1e3);
            }
            outs.push(o);
            report.push(fr);
        }
        run = Some((outs, report));
    }
    let (outputs, report) = run.expect("at least one repetition");

    let [gate, epsilon, block] = gate_key(&gated.layers()[0].gate);
    let reset_period = cell.reset.to_string();
    let mut frame_rows = Vec::with_capacity(n);
    let (mut max_dev, mut sum_dev) = (0.0f32, 0.0f64);
    let (mut dense_ms, mut skip_ms) = (0.0, 0.0);
    for (i, fr) in report.frames.iter().enumerate() {
        let md = max_abs_diff(&outputs[i], &dense_out[i])?;
        let ad = mean_abs_diff(&outputs[i], &dense_out[i])?;
        max_dev = max_dev.max(md);
        sum_dev += ad;
        let (d, s) = (median(dense_times[i].clone()), median(skip_times[i].clone()));
        dense_ms += d;
        skip_ms += s;
        frame_rows.push(FrameRow {
            gate: gate.clone(),
            epsilon: epsilon.clone(),
            block: block.clone(),
            reset_period: reset_period.clone(),
            frame: i,
            reference: fr.reference,
            dense_macs: fr.dense_macs(),
            effective_macs: fr.effective_macs(),
            mac_reduction: ratio(fr.dense_macs() as f64, fr.effective_macs() as f64),
            dense_ms: d,
            skip_ms: s,
            max_abs_dev: md,
            mean_abs_dev: ad,
        });
    }
    let probs = report
        .firing_probability()
        .unwrap_or_else(|| vec![f64::NAN; net.len()]);
    let firing = net
        .layers()
        .iter()
        .zip(&report.layer_macs)
        .zip(probs)
        .enumerate()
        .map(|(l, ((layer, &macs), p))| FiringRow {
            gate: gate.clone(),
            epsilon: epsilon.clone(),
            block: block.clone(),
            reset_period: reset_period.clone(),
            layer: l,
            layer_desc: layer.conv.describe(),
            dense_macs: macs,
            firing_probability: p,
        })
        .collect();
    let summary = BenchRow {
        gate,
        epsilon,
        block,
        reset_period,
        frames: n,
        dense_gmac: report.total_dense_macs() as f64 / 1e9,
        effective_gmac: report.total_effective_macs() as f64 / 1e9,
        mac_reduction: report.reduction(),
        dense_ms: dense_ms / n as f64,
        skip_ms: skip_ms / n as f64,
        time_reduction: ratio(dense_ms, skip_ms),
        max_abs_dev: max_dev,
        mean_abs_dev: sum_dev / n as f64,
    };
    Ok(CellResult {
        summary,
        frames: frame_rows,
        firing,
        report,
        outputs,
    })
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        f64::INFINITY
    }
}

/// Runs every cell, in parallel up to the `SKPC_THREADS` cap; results keep
/// the order of `cells`.
pub fn run_sweep(net: &Network, frames: &[Tensor], cells: &[BenchCell], timing: Timing) -> Result<Vec<CellResult>> {
    thread_pool()?.install(|| {
        cells
            .par_iter()
            .map(|c| bench_cell(net, frames, c, timing))
            .collect()
    })
}

/// Cross product of gates and reset periods, gates outermost.
pub fn grid(gates: &[GateConfig], resets: &[ResetPeriod]) -> Vec<BenchCell> {
    gates
        .iter()
        .flat_map(|g| {
            resets.iter().map(move |&r| BenchCell {
                gate: Some(g.clone()),
                reset: r,
            })
        })
        .collect()
}

/// MAC reduction of `gate` on synthetic scenes with increasing camera motion.
pub fn camera_motion_curve(
    net: &Network,
    base: &SceneSpec,
    motions: &[f32],
    gate: &GateConfig,
    reset: ResetPeriod,
    seed: u64,
) -> Result<Vec<CameraRow>> {
    let [gname, eps, _] = gate_key(gate);
    let timing = Timing { warmup: 0, reps: 1 };
    thread_pool()?.install(|| {
        motions
            .par_iter()
            .map(|&m| {
                let spec = SceneSpec {
                    camera_motion: m,
                    ..base.clone()
                };
                let video = gen_synthetic(&spec, seed)?;
                let cell = BenchCell {
                    gate: Some(gate.clone()),
                    reset,
                };
                let r = bench_cell(net, video.frames.frames(), &cell, timing)?;
                let n = video.change_masks.len().saturating_sub(1).max(1);
                let changed = (1..video.change_masks.len())
                    .map(|t| video.changed_pixels(t) as f64 / video.change_masks[t].len() as f64)
                    .sum::<f64>()
                    / n as f64;
                Ok(CameraRow {
                    camera_motion: m,
                    gate: gname.clone(),
                    epsilon: eps.clone(),
                    changed_fraction: changed,
                    mac_reduction: r.summary.mac_reduction,
                    max_abs_dev: r.summary.max_abs_dev,
                })
            })
            .collect()
    })
}

/// Renders CSV text as an aligned plain-text table. Cells that parse as
/// numbers are right-aligned.
pub fn render_table(csv_text: impl Read) -> Result<String> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(csv_text);
    let mut rows: Vec<Vec<String>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(format!("csv: {e}")))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Ok(String::new());
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0; cols];
    for row in &rows {
        for (i, c) in row.iter().enumerate() {
            widths[i] = widths[i].max(c.chars().count());
        }
    }
    let mut out = String::new();
    for (ri, row) in rows.iter().enumerate() {
        let cells: Vec<String> = (0..cols)
            .map(|i| {
                let c = row.get(i).map_or("", String::as_str);
                if ri > 0 && c.parse::<f64>().is_ok() {
                    format!("{c:>w$}", w = widths[i])
                } else {
                    format!("{c:<w$}", w = widths[i])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if ri == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&rule.join("  "));
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn render_rows<R: CsvRow>(rows: &[R]) -> String {
    render_table(csv_string(rows).as_bytes()).expect("own csv parses")
}

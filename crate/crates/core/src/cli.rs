//! The `aid` command line: `train | sample | simulate | recon | metrics`.
//!
//! Flags win over keys from an optional `--config` JSON file, which win over
//! built-in defaults. Every random draw derives from `--seed`, and outputs do
//! not depend on `--threads`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::data::{
    export_pgm, load_aida, load_sequence, make_phantom_sequence, normalize_sequence, save_aida,
    save_sequence, write_sidecar, AidaArray, ArrayData, ImageSequence, PhantomSpec,
};
use crate::denoiser::{
    load_checkpoint, save_checkpoint, train, Checkpoint, Denoiser, GaussianOracle,
    GaussianPriorSpec, TrainConfig, TscConfig, TscNet, TscParams,
};
use crate::diffusion::{default_betas, make_schedule, NoiseSchedule};
use crate::error::{AidError, Result};
use crate::mri::{
    apply_adjoint, apply_forward, default_acs_width, make_mask, synth_coils, CoilSensitivities,
    ForwardModel, KSpaceFrame, MaskKind, SamplingMask,
};
use crate::numerics::{ComplexArray2D, RngStream};
use crate::sampler::{
    generate_sequence, mmse_and_ci, nrmse, psnr, reconstruct, GenMode, GenerateOptions, NoiseScale,
    ReconConfig, StepKind,
};

#[derive(Parser, Debug)]
#[command(
    name = "aid",
    version,
    about = "Autoregressive image diffusion for MRI sequences"
)]
struct Cli {
    /// JSON file with defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed of every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (posterior chains and batch items); results do not
    /// depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a toy TSC denoiser and write a checkpoint directory.
    Train(TrainArgs),
    /// Generate an image sequence from a checkpoint or the Gaussian oracle.
    Sample(SampleArgs),
    /// Simulate undersampled multi-coil k-space for an image sequence.
    Simulate(SimulateArgs),
    /// Posterior reconstruction of a k-space sequence.
    Recon(ReconArgs),
    /// PSNR / NRMSE of an estimate against a reference.
    Metrics(MetricsArgs),
}

struct ScheduleArgs {
    t: Option<usize>,
    beta_min: Option<f64>,
    beta_max: Option<f64>,
}

struct PriorArgs {
    checkpoint: Option<PathBuf>,
    prior: Option<String>,
    prior_mean: Option<PathBuf>,
    prior_var: Option<f64>,
    schedule: ScheduleArgs,
}

macro_rules! schedule_of {
    ($a:expr) => {
        ScheduleArgs {
            t: $a.t,
            beta_min: $a.beta_min,
            beta_max: $a.beta_max,
        }
    };
}

macro_rules! prior_of {
    ($a:expr) => {
        PriorArgs {
            checkpoint: $a.checkpoint.clone(),
            prior: $a.prior.clone(),
            prior_mean: $a.prior_mean.clone(),
            prior_var: $a.prior_var,
            schedule: schedule_of!($a),
        }
    };
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct TrainArgs {
    /// Checkpoint directory to write (its parent must exist).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training sequences (AIDA stacks); may repeat.
    #[arg(long)]
    #[serde(default)]
    data: Vec<PathBuf>,
    /// Train on freshly drawn phantom sequences.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    synthetic: bool,
    /// Frames per training sequence (default window + 1); sets the window
    /// to frames - 1 when `--window` is absent.
    #[arg(long)]
    frames: Option<usize>,
    /// Phantom size for `--synthetic`.
    #[arg(long)]
    size: Option<usize>,
    /// Optimiser steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Diffusion steps.
    #[arg(long = "T")]
    #[serde(rename = "T")]
    t: Option<usize>,
    #[arg(long)]
    beta_min: Option<f64>,
    #[arg(long)]
    beta_max: Option<f64>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Conditioning window.
    #[arg(long)]
    window: Option<usize>,
    /// Ignore the conditioning frames (baseline denoiser).
    #[arg(long)]
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    unconditional: bool,
    /// Loss-curve JSON path (default `<out>/loss_curve.json`).
    #[arg(long)]
    loss_curve: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct SampleArgs {
    /// Output sequence (AIDA stack); previews go to `<out>_NNN.pgm`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// retrospective | warm | cold | boosted
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    frames: Option<usize>,
    /// Conditioning sequence for retrospective, warm and boosted modes.
    #[arg(long)]
    cond: Option<PathBuf>,
    /// ddpm | ddim
    #[arg(long)]
    step: Option<String>,
    /// Boosted restart depth.
    #[arg(long)]
    tau: Option<usize>,
    /// Frame size for the oracle without `--prior-mean`.
    #[arg(long)]
    size: Option<usize>,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `gaussian` selects the analytic oracle instead of a checkpoint.
    #[arg(long)]
    prior: Option<String>,
    /// Oracle mean image (AIDA, 2-D); zeros by default.
    #[arg(long)]
    prior_mean: Option<PathBuf>,
    /// Oracle variance per real component.
    #[arg(long)]
    prior_var: Option<f64>,
    /// Diffusion steps.
    #[arg(long = "T")]
    #[serde(rename = "T")]
    t: Option<usize>,
    #[arg(long)]
    beta_min: Option<f64>,
    #[arg(long)]
    beta_max: Option<f64>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct SimulateArgs {
    /// Image sequence (AIDA stack).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Mask kind, e.g. odd-lines, equispaced-acs, random-acs, full.
    #[arg(long)]
    mask: Option<String>,
    /// Undersampling factor.
    #[arg(long = "R")]
    #[serde(rename = "R")]
    r: Option<f64>,
    #[arg(long)]
    acs_width: Option<usize>,
    #[arg(long)]
    coils: Option<usize>,
    /// Standard deviation of the added complex k-space noise.
    #[arg(long)]
    noise: Option<f64>,
    /// Noise level assumed by the likelihood.
    #[arg(long)]
    sigma_eta: Option<f64>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct ReconArgs {
    /// Directory written by `simulate`.
    #[arg(long)]
    kspace: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Known frame preceding the first k-space frame (AIDA, 2-D).
    #[arg(long)]
    x0: Option<PathBuf>,
    /// Ground-truth sequence; enables metric lines.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Data-consistency iterations per step.
    #[arg(long = "K")]
    #[serde(rename = "K")]
    k: Option<usize>,
    /// Posterior samples (at least 2).
    #[arg(long = "S")]
    #[serde(rename = "S")]
    s: Option<usize>,
    #[arg(long)]
    noise_inject: Option<bool>,
    /// cumulative | per-step
    #[arg(long)]
    noise_scale: Option<String>,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `gaussian` selects the analytic oracle instead of a checkpoint.
    #[arg(long)]
    prior: Option<String>,
    /// Oracle mean image (AIDA, 2-D); zeros by default.
    #[arg(long)]
    prior_mean: Option<PathBuf>,
    /// Oracle variance per real component.
    #[arg(long)]
    prior_var: Option<f64>,
    /// Diffusion steps.
    #[arg(long = "T")]
    #[serde(rename = "T")]
    t: Option<usize>,
    #[arg(long)]
    beta_min: Option<f64>,
    #[arg(long)]
    beta_max: Option<f64>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct MetricsArgs {
    /// Reference image or sequence.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Estimate with the same frame count.
    #[arg(long)]
    estimate: Option<PathBuf>,
    /// Also write the metric lines to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One line of metric output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub frame: usize,
    /// `null` when the estimate equals the reference.
    pub psnr_db: Option<f64>,
    pub nrmse: f64,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code: 0 success, 2 configuration, 3 numeric, 4 I/O.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("aid: {e}");
            e.exit_code()
        }
    }
}

struct Common {
    seed: u64,
}

fn execute(cli: Cli) -> Result<()> {
    let mut file = match &cli.config {
        Some(path) => load_config(path)?,
        None => Map::new(),
    };
    let take_u64 = |file: &mut Map<String, Value>, key: &str| -> Result<Option<u64>> {
        match file.remove(key) {
            None => Ok(None),
            Some(v) => v.as_u64().map(Some).ok_or_else(|| {
                AidError::config(format!("config key `{key}` must be a nonnegative integer"))
            }),
        }
    };
    let seed = cli.seed.or(take_u64(&mut file, "seed")?).unwrap_or(0);
    let threads = cli
        .threads
        .or(take_u64(&mut file, "threads")?.map(|t| t as usize));
    if threads == Some(0) {
        return Err(AidError::config("--threads must be positive"));
    }
    let common = Common { seed };
    let go = move || match cli.command {
        Command::Train(a) => cmd_train(merge(a, file)?, &common),
        Command::Sample(a) => cmd_sample(merge(a, file)?, &common),
        Command::Simulate(a) => cmd_simulate(merge(a, file)?, &common),
        Command::Recon(a) => cmd_recon(merge(a, file)?, &common),
        Command::Metrics(a) => cmd_metrics(merge(a, file)?),
    };
    match threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| AidError::config(format!("cannot start {k} threads: {e}")))?
            .install(go),
        None => go(),
    }
}

fn load_config(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path)?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(AidError::config(format!(
            "{}: expected a JSON object",
            path.display()
        ))),
        Err(e) => Err(AidError::config(format!("{}: {e}", path.display()))),
    }
}

/// Overlays the flags that were given onto the config-file keys.
fn merge<A: Serialize + DeserializeOwned>(flags: A, mut file: Map<String, Value>) -> Result<A> {
    let given = serde_json::to_value(&flags)
        .map_err(|e| AidError::config(format!("cannot encode flags: {e}")))?;
    if let Value::Object(m) = given {
        for (k, v) in m {
            // switches that are off are skipped when serialising
            let unset = match &v {
                Value::Null => true,
                Value::Array(a) => a.is_empty(),
                _ => false,
            };
            if !unset {
                file.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(file))
        .map_err(|e| AidError::config(format!("config: {e}")))
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| AidError::config(format!("--{flag} is required")))
}

fn schedule(s: &ScheduleArgs, default_steps: usize) -> Result<NoiseSchedule> {
    let t = s.t.unwrap_or(default_steps);
    if t == 0 {
        return Err(AidError::config("--T must be positive"));
    }
    let (b0, b1) = default_betas(t);
    make_schedule(t, s.beta_min.unwrap_or(b0), s.beta_max.unwrap_or(b1))
}

/// Fails with a configuration error unless the parent of `dir` exists.
fn check_parent(dir: &Path, what: &str) -> Result<()> {
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => return Ok(()),
    };
    if parent.is_dir() {
        Ok(())
    } else {
        Err(AidError::config(format!(
            "{what} parent directory {} does not exist",
            parent.display()
        )))
    }
}

fn ensure_dir(dir: &Path, what: &str) -> Result<()> {
    check_parent(dir, what)?;
    if !dir.exists() {
        fs::create_dir(dir)?;
    }
    Ok(())
}

fn print_json(v: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(v).map_err(|e| AidError::config(e.to_string()))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}")?;
    Ok(())
}

fn cmd_train(a: TrainArgs, c: &Common) -> Result<()> {
    let out = required(&a.out, "out")?;
    check_parent(&out, "checkpoint")?;
    if a.synthetic == !a.data.is_empty() {
        return Err(AidError::config(
            "give exactly one of --synthetic or --data",
        ));
    }
    let sched = schedule(&schedule_of!(a), 100)?;
    let (beta_min, beta_max) = (sched.beta(1), sched.beta(sched.steps()));
    let dataset = a
        .data
        .iter()
        .map(|p| normalize_sequence(&load_sequence(p)?))
        .collect::<Result<Vec<_>>>()?;
    let size = match dataset.first() {
        Some(s) => {
            let (r, cols) = s.shape();
            if r != cols || dataset.iter().any(|d| d.shape() != (r, cols)) {
                return Err(AidError::dim(
                    "training sequences must share a square frame shape",
                ));
            }
            r
        }
        None => a.size.unwrap_or(32),
    };
    let mut cfg = TscConfig::new(size, sched.steps());
    if let Some(v) = a.patch {
        cfg.patch = v;
    }
    if let Some(v) = a.dim {
        cfg.dim = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.layers {
        cfg.layers = v;
    }
    match (a.window, a.frames) {
        (Some(v), _) => cfg.window = v,
        (None, Some(f)) if f >= 2 => cfg.window = f - 1,
        _ => {}
    }
    cfg.conditional = !a.unconditional;
    cfg.validate()?;
    let frames = a.frames.unwrap_or(cfg.window + 1);
    if frames < 2 {
        return Err(AidError::config("--frames must be at least 2"));
    }
    if let Some(short) = dataset.iter().find(|d| d.len() < frames) {
        return Err(AidError::config(format!(
            "training sequence has {} frames, need {frames}",
            short.len()
        )));
    }
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        steps: a.steps.unwrap_or(defaults.steps),
        batch: a.batch.unwrap_or(defaults.batch),
        lr: a.lr.unwrap_or(defaults.lr),
    };
    let mut rng = RngStream::new(c.seed, 0);
    let mut params = TscParams::init_for_schedule(cfg, &sched, &mut rng)?;
    let spec = PhantomSpec::new(size, frames);
    let curve = train(&mut params, &sched, &tc, &mut rng, |r| {
        if dataset.is_empty() {
            return make_phantom_sequence(&spec, r);
        }
        let seq = &dataset[r.uniform_int(0, dataset.len())];
        let start = r.uniform_int(0, seq.len() - frames + 1);
        seq.slice(start, start + frames)
    })?;
    save_checkpoint(
        &out,
        &Checkpoint {
            params,
            beta_min,
            beta_max,
        },
    )?;
    let curve_path = a.loss_curve.unwrap_or_else(|| out.join("loss_curve.json"));
    let window = (tc.steps / 10).max(1);
    let (head, tail) = curve
        .head_tail_means(window)
        .unwrap_or((f64::NAN, f64::NAN));
    let doc = json!({
        "steps": tc.steps,
        "batch": tc.batch,
        "lr": tc.lr,
        "seed": c.seed,
        "losses": curve.losses,
    });
    fs::write(
        &curve_path,
        serde_json::to_string_pretty(&doc).map_err(|e| AidError::config(e.to_string()))? + "\n",
    )?;
    print_json(&json!({ "steps": tc.steps, "loss_head": head, "loss_tail": tail }))
}

/// The denoiser selected by `--checkpoint` or `--prior gaussian`.
fn load_model(
    p: &PriorArgs,
    size: Option<usize>,
) -> Result<(Box<dyn Denoiser>, NoiseSchedule, usize)> {
    match (p.checkpoint.as_ref(), p.prior.as_deref()) {
        (Some(_), Some(_)) => Err(AidError::config(
            "give either --checkpoint or --prior, not both",
        )),
        (Some(dir), None) => {
            if !dir.is_dir() {
                return Err(AidError::config(format!(
                    "checkpoint directory {} does not exist",
                    dir.display()
                )));
            }
            let ckpt = load_checkpoint(dir)?;
            let sched = ckpt.schedule()?;
            if let Some(t) = p.schedule.t {
                if t != sched.steps() {
                    return Err(AidError::config(format!(
                        "--T {t} differs from the checkpoint's {} steps",
                        sched.steps()
                    )));
                }
            }
            let n = ckpt.params.config().image;
            Ok((Box::new(TscNet::new(ckpt.params)), sched, n))
        }
        (None, Some("gaussian")) => {
            let sched = schedule(&p.schedule, 100)?;
            let mean = match &p.prior_mean {
                Some(path) => load_aida(path)?.to_complex2d()?,
                None => {
                    let n = size.ok_or_else(|| {
                        AidError::config("the Gaussian prior needs --prior-mean or a frame size")
                    })?;
                    ComplexArray2D::zeros(n, n)
                }
            };
            let n = mean.rows();
            let prior = GaussianPriorSpec::isotropic(mean, p.prior_var.unwrap_or(1.0))?;
            Ok((
                Box::new(GaussianOracle::new(prior, sched.clone())),
                sched,
                n,
            ))
        }
        (None, Some(other)) => Err(AidError::config(format!("unknown prior `{other}`"))),
        (None, None) => Err(AidError::config(
            "--checkpoint or --prior gaussian is required",
        )),
    }
}

fn stem_with(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    let mut name = stem;
    name.push(suffix);
    path.with_file_name(name)
}

fn cmd_sample(a: SampleArgs, c: &Common) -> Result<()> {
    let out = required(&a.out, "out")?;
    check_parent(&out, "output")?;
    let mode: GenMode = a.mode.as_deref().unwrap_or("cold").parse()?;
    let step: StepKind = a.step.as_deref().unwrap_or("ddpm").parse()?;
    let n_frames = a.frames.unwrap_or(4);
    if n_frames == 0 {
        return Err(AidError::config("--frames must be positive"));
    }
    let cond = match &a.cond {
        Some(p) => load_sequence(p)?.into_frames(),
        None if mode == GenMode::ProspectiveCold => Vec::new(),
        None => return Err(AidError::config(format!("--mode {mode} needs --cond"))),
    };
    let size = cond.first().map(|f| f.rows()).or(a.size);
    let (model, sched, n) = load_model(&prior_of!(a), size)?;
    if let Some(f) = cond.first() {
        if f.shape() != (n, n) {
            return Err(AidError::dim(format!(
                "conditioning frames are {:?}, model expects {n}x{n}",
                f.shape()
            )));
        }
    }
    let opts = GenerateOptions {
        step,
        tau: a.tau,
        shape: Some((n, n)),
    };
    let mut rng = RngStream::new(c.seed, 0);
    let frames = generate_sequence(
        model.as_ref(),
        &cond,
        n_frames,
        mode,
        &sched,
        &mut rng,
        &opts,
    )?;
    let seq = ImageSequence::new(frames)?;
    save_sequence(&out, &seq)?;
    for (i, f) in seq.frames().iter().enumerate() {
        export_pgm(stem_with(&out, &format!("_{i:03}.pgm")), f)?;
    }
    write_sidecar(
        &out,
        &json!({ "mode": mode.name(), "frames": n_frames, "seed": c.seed, "T": sched.steps() }),
    )?;
    print_json(&json!({ "frames": seq.len(), "out": out.display().to_string() }))
}

/// `kspace.json` in a simulated k-space directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KSpaceMeta {
    n: usize,
    frames: usize,
    coils: usize,
    mask: MaskKind,
    factor: f64,
    acs_width: usize,
    noise: f64,
    sigma_eta: f64,
    seed: u64,
}

fn frame_file(i: usize) -> String {
    format!("frame_{i:03}.aida")
}

fn cmd_simulate(a: SimulateArgs, c: &Common) -> Result<()> {
    let input = required(&a.input, "input")?;
    let out = required(&a.out, "out")?;
    let seq = load_sequence(&input)?;
    let (n, cols) = seq.shape();
    if n != cols {
        return Err(AidError::dim("simulation needs square frames"));
    }
    let kind: MaskKind = a.mask.as_deref().unwrap_or("odd-lines").parse()?;
    let factor = a.r.unwrap_or(2.0);
    let acs_width = a.acs_width.unwrap_or_else(|| {
        if kind.has_acs() {
            default_acs_width(n)
        } else {
            0
        }
    });
    let n_coils = a.coils.unwrap_or(1);
    let noise = a.noise.unwrap_or(0.0);
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(AidError::config(format!(
            "--noise must be nonnegative, got {noise}"
        )));
    }
    let sigma_eta = a.sigma_eta.unwrap_or(1.0);
    let rng = RngStream::new(c.seed, 0);
    let coils = if n_coils == 1 {
        CoilSensitivities::unit(n, n)
    } else {
        synth_coils(n, n_coils, &mut rng.split(1))?
    };
    let mask = make_mask(kind, n, factor, acs_width, &mut rng.split(2))?;
    let fwd = ForwardModel::new(mask, coils, sigma_eta)?;
    ensure_dir(&out, "output")?;
    let mut noise_rng = rng.split(3);
    for (i, x) in seq.frames().iter().enumerate() {
        let mut y = apply_forward(&fwd, x)?;
        if noise > 0.0 {
            y.add_noise(&fwd, noise, &mut noise_rng);
        }
        save_aida(out.join(frame_file(i)), &AidaArray::from_stack(y.coils())?)?;
    }
    save_aida(
        out.join("mask.aida"),
        &AidaArray::new(
            vec![n as u64, n as u64],
            ArrayData::U8(fwd.mask().to_matrix()),
        )?,
    )?;
    save_aida(
        out.join("coils.aida"),
        &AidaArray::from_stack(fwd.coils().maps())?,
    )?;
    let meta = KSpaceMeta {
        n,
        frames: seq.len(),
        coils: n_coils,
        mask: kind,
        factor,
        acs_width,
        noise,
        sigma_eta,
        seed: c.seed,
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| AidError::config(e.to_string()))?;
    fs::write(out.join("kspace.json"), text + "\n")?;
    print_json(&json!({
        "frames": seq.len(),
        "kept_fraction": fwd.mask().kept_fraction(),
        "out": out.display().to_string(),
    }))
}

/// Reads a directory written by `simulate`.
pub fn load_kspace_dir(dir: &Path) -> Result<(ForwardModel, Vec<KSpaceFrame>)> {
    let text = fs::read_to_string(dir.join("kspace.json"))?;
    let meta: KSpaceMeta = serde_json::from_str(&text).map_err(|e| {
        AidError::format(
            e.column() as u64,
            format!("kspace.json line {}: {e}", e.line()),
        )
    })?;
    let bits = load_aida(dir.join("mask.aida"))?;
    let mask = match (&bits.data, bits.dims.as_slice()) {
        (ArrayData::U8(b), [r, c]) => {
            SamplingMask::from_matrix(meta.mask, *r as usize, *c as usize, b)?
        }
        _ => return Err(AidError::format(0, "mask.aida must be a 2-D u8 array")),
    };
    let coils = CoilSensitivities::new(load_aida(dir.join("coils.aida"))?.to_stack()?)?;
    let fwd = ForwardModel::new(mask, coils, meta.sigma_eta)?;
    let frames = (0..meta.frames)
        .map(|i| KSpaceFrame::new(load_aida(dir.join(frame_file(i)))?.to_stack()?, &fwd))
        .collect::<Result<Vec<_>>>()?;
    Ok((fwd, frames))
}

fn metric_lines(reference: &[ComplexArray2D], est: &[ComplexArray2D]) -> Result<Vec<MetricLine>> {
    if reference.len() != est.len() {
        return Err(AidError::dim(format!(
            "reference has {} frames, estimate {}",
            reference.len(),
            est.len()
        )));
    }
    reference
        .iter()
        .zip(est)
        .enumerate()
        .map(|(frame, (r, e))| {
            r.check_same_shape(e)?;
            let p = psnr(r, e)?;
            Ok(MetricLine {
                frame,
                psnr_db: p.is_finite().then_some(p),
                nrmse: nrmse(r, e)?,
            })
        })
        .collect()
}

fn emit_metrics(lines: &[MetricLine], file: Option<&Path>) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text += &serde_json::to_string(l).map_err(|e| AidError::config(e.to_string()))?;
        text.push('\n');
    }
    print!("{text}");
    if let Some(p) = file {
        fs::write(p, text)?;
    }
    Ok(())
}

fn cmd_recon(a: ReconArgs, c: &Common) -> Result<()> {
    let kdir = required(&a.kspace, "kspace")?;
    let out = required(&a.out, "out")?;
    let defaults = ReconConfig::default();
    let cfg = ReconConfig {
        lambda: a.lambda.unwrap_or(defaults.lambda),
        k_iters: a.k.unwrap_or(defaults.k_iters),
        samples: a.s.unwrap_or(2),
        noise_inject: a.noise_inject.unwrap_or(defaults.noise_inject),
        noise_scale: match a.noise_scale.as_deref() {
            Some(s) => s.parse::<NoiseScale>()?,
            None => defaults.noise_scale,
        },
    };
    if cfg.samples < 2 {
        return Err(AidError::config(
            "--S must be at least 2 for variance and confidence maps",
        ));
    }
    cfg.validate()?;
    check_parent(&out, "output")?;
    let (fwd, kspace) = load_kspace_dir(&kdir)?;
    let (n, cols) = fwd.shape();
    let (model, sched, model_n) = load_model(&prior_of!(a), Some(n))?;
    if (model_n, model_n) != (n, cols) {
        return Err(AidError::dim(format!(
            "model is {model_n}x{model_n}, k-space {n}x{cols}"
        )));
    }
    let x0 = match &a.x0 {
        Some(p) => load_aida(p)?.to_complex2d()?,
        None => ComplexArray2D::zeros(n, cols),
    };
    let reference = a.reference.as_ref().map(load_sequence).transpose()?;
    let rng = RngStream::new(c.seed, 0);
    let post = reconstruct(model.as_ref(), &fwd, &kspace, &x0, &cfg, &sched, &rng)?;
    ensure_dir(&out, "output")?;
    let all: Vec<ComplexArray2D> = post.frames().iter().flatten().cloned().collect();
    let mut samples = AidaArray::from_stack(&all)?;
    samples.dims = vec![
        post.n_frames() as u64,
        post.n_samples() as u64,
        n as u64,
        cols as u64,
    ];
    save_aida(out.join("samples.aida"), &samples)?;
    let maps = (0..post.n_frames())
        .map(|f| mmse_and_ci(&post, f))
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<ComplexArray2D> = maps.iter().map(|m| m.mean.clone()).collect();
    save_aida(out.join("mean.aida"), &AidaArray::from_stack(&means)?)?;
    let dims = vec![maps.len() as u64, n as u64, cols as u64];
    let real_stack = |get: &dyn Fn(&crate::sampler::UncertaintyMap) -> &Vec<f64>| {
        AidaArray::new(
            dims.clone(),
            ArrayData::F64(maps.iter().flat_map(|m| get(m).clone()).collect()),
        )
    };
    save_aida(out.join("variance.aida"), &real_stack(&|m| &m.variance)?)?;
    save_aida(out.join("ci.aida"), &real_stack(&|m| &m.ci_halfwidth)?)?;
    for (i, m) in maps.iter().enumerate() {
        export_pgm(out.join(format!("mean_{i:03}.pgm")), &m.mean)?;
        export_pgm(
            out.join(format!("variance_{i:03}.pgm")),
            &ComplexArray2D::from_real(n, cols, &m.variance)?,
        )?;
    }
    let zero_filled = kspace
        .iter()
        .map(|y| apply_adjoint(&fwd, y))
        .collect::<Result<Vec<_>>>()?;
    save_aida(
        out.join("zero_filled.aida"),
        &AidaArray::from_stack(&zero_filled)?,
    )?;
    if let Some(r) = reference {
        let lines = metric_lines(r.frames(), &means)?;
        emit_metrics(&lines, Some(&out.join("metrics.jsonl")))?;
    }
    Ok(())
}

fn load_frames(path: &Path) -> Result<Vec<ComplexArray2D>> {
    load_aida(path)?.to_stack()
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    let reference = load_frames(&required(&a.reference, "reference")?)?;
    let est = load_frames(&required(&a.estimate, "estimate")?)?;
    let lines = metric_lines(&reference, &est)?;
    emit_metrics(&lines, a.out.as_deref())
}

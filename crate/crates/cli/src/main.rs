use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use darswin::autodiff::Tensor;
use darswin::geometry::{partition, sampling_grid, Jitter, DEFAULT_JITTER_FRACTION};
use darswin::imageops::{
    checkerboard, read_png, undistort_to_cubemap, undistort_to_perspective, warp_pano_to_lens,
    warp_perspective_to_lens, write_png, Panorama, Sampler,
};
use darswin::lens::LensProjection;
use darswin::model::{
    batch_grads, grad_check, init_params, load_checkpoint, predict_class, prepare, save_checkpoint, Head, ModelConfig,
    Objective, Sgd,
};
use darswin::pipeline::{
    default_dxi_grid, ingest_external_xi, plot_report, report_table, sensitivity, sweep_eval, synth_classification_set,
    synth_depth_set, to_channels, xi_grid, ClassifierEvaluator, DatasetKind, DatasetManifest, DepthEvaluator,
    DistortionLevel, Evaluator, GenerationParams, Split, SweepReport, TestSet, DEFAULT_DEPTH_FOV_DEG,
    DEFAULT_SRC_FOV_DEG,
};

#[derive(Parser)]
#[command(name = "darswin", version, about = "Distortion-aware radial transformer toolkit")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML file with `[model]` and `[train]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a wide-angle classification set from `<class>/*.png` sources.
    Synth(SynthArgs),
    /// Render wide-angle RGB/depth crops from equirectangular panoramas.
    SynthDepth(SynthDepthArgs),
    /// Evaluate a checkpoint over a grid of distortion levels.
    Sweep(SweepArgs),
    /// Evaluate with a perturbed model-side xi.
    Sensitivity(SensitivityArgs),
    /// Attach externally estimated xi values to a manifest.
    IngestXi(IngestArgs),
    /// Warp a perspective image or panorama through a spherical lens.
    Warp(WarpArgs),
    /// Undistort a lens image to a perspective view.
    Unwarp(UnwarpArgs),
    /// Undistort a lens image onto a cubemap cross.
    Cubemap(CubemapArgs),
    /// Export the polar partition and sampling pattern as JSON.
    Grid(GridArgs),
    /// Finite-difference gradient check of a small model.
    Gradcheck(GradcheckArgs),
    /// Write a checkerboard test pattern.
    Checker(CheckerArgs),
    /// Train a classifier on a synthesized set.
    Train(TrainArgs),
}

#[derive(Args)]
struct LensArgs {
    #[arg(long)]
    xi: f64,
    /// Full field of view of the lens.
    #[arg(long, default_value_t = DEFAULT_DEPTH_FOV_DEG)]
    fov_deg: f64,
}

impl LensArgs {
    fn lens(&self) -> Result<LensProjection> {
        Ok(LensProjection::spherical_normalized(self.xi, self.fov_deg / 2.0)?)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long, default_value = "low")]
    level: DistortionLevel,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 64)]
    out_size: usize,
    #[arg(long)]
    native_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SRC_FOV_DEG)]
    src_fov_deg: f64,
    #[arg(long, default_value_t = DEFAULT_DEPTH_FOV_DEG)]
    fov_deg: f64,
}

#[derive(Args)]
struct SynthDepthArgs {
    #[arg(long)]
    pano_dir: PathBuf,
    #[arg(long, default_value = "low")]
    level: DistortionLevel,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 64)]
    out_size: usize,
    #[arg(long)]
    native_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_DEPTH_FOV_DEG)]
    fov_deg: f64,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also render the report as a PNG plot.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Comma-separated xi values; 11 values over [0, 1] by default.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
}

#[derive(Args)]
struct SensitivityArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, value_delimiter = ',')]
    xi_grid: Option<Vec<f64>>,
    /// Comma-separated offsets; -0.4..0.4 in steps of 0.1 by default.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    dxi_grid: Option<Vec<f64>>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// CSV of `id,xi` rows.
    #[arg(long)]
    xi_file: PathBuf,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    lens: LensArgs,
    #[arg(long, default_value_t = 256)]
    out_size: usize,
    /// Treat the input as an equirectangular panorama.
    #[arg(long)]
    pano: bool,
    #[arg(long, default_value_t = 0.0)]
    yaw_deg: f64,
    #[arg(long, default_value_t = DEFAULT_SRC_FOV_DEG)]
    src_fov_deg: f64,
    #[arg(long, default_value = "warped.png")]
    output: String,
}

#[derive(Args)]
struct UnwarpArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    lens: LensArgs,
    #[arg(long, default_value_t = 256)]
    out_size: usize,
    #[arg(long, default_value_t = DEFAULT_SRC_FOV_DEG)]
    out_fov_deg: f64,
    #[arg(long, default_value = "unwarped.png")]
    output: String,
}

#[derive(Args)]
struct CubemapArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    lens: LensArgs,
    /// Face side in pixels.
    #[arg(long, default_value_t = 128)]
    out_size: usize,
    #[arg(long, default_value = "cubemap.png")]
    output: String,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    lens: LensArgs,
    #[arg(long, default_value_t = 16)]
    n_r: usize,
    #[arg(long, default_value_t = 64)]
    n_phi: usize,
    #[arg(long, default_value_t = 10)]
    samples_r: usize,
    #[arg(long, default_value_t = 10)]
    samples_phi: usize,
    /// Jitter samples by this fraction of their spacing (uses --seed).
    #[arg(long, num_args = 0..=1, default_missing_value = "0.25")]
    jitter: Option<f64>,
    #[arg(long, default_value = "grid.json")]
    output: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Dense (si-log) head instead of the classifier.
    #[arg(long)]
    dense: bool,
    #[arg(long, default_value_t = 6)]
    per_tensor: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct CheckerArgs {
    #[arg(long, default_value_t = 256)]
    out_size: usize,
    #[arg(long, default_value_t = 8)]
    squares: usize,
    #[arg(long, default_value = "checker.png")]
    output: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "checkpoint")]
    checkpoint: String,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<ModelConfig>,
    #[serde(default)]
    train: TrainConfig,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct TrainConfig {
    steps: usize,
    lr: f64,
    momentum: f64,
    /// Steps between redraws of train-split xi.
    steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 0.02, momentum: 0.9, steps_per_epoch: 50 }
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn out_path(cli: &Cli, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cli.out_dir)?;
    Ok(cli.out_dir.join(name))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn report_skips(m: &DatasetManifest) -> Result<bool> {
    for s in &m.skipped {
        eprintln!("skipped {}: {}", s.source, s.reason);
    }
    eprintln!("{} items written, {} skipped", m.items.len(), m.skipped.len());
    Ok(m.skipped.is_empty())
}

fn evaluate(cli: &Cli, args: &EvalArgs, run: impl Fn(&dyn Evaluator, &TestSet) -> Result<SweepReport>) -> Result<bool> {
    let manifest = DatasetManifest::read(&args.manifest)?;
    let set = TestSet::load(&manifest)?;
    let (cfg, params) = load_checkpoint(&args.checkpoint)?;
    let report = match manifest.params.kind {
        DatasetKind::Classification => run(&ClassifierEvaluator { cfg: &cfg, params: &params }, &set)?,
        DatasetKind::Depth => run(&DepthEvaluator { cfg: &cfg, params: &params }, &set)?,
    };
    fs::write(out_path(cli, "report.json")?, report.to_json()?)?;
    if args.plot {
        plot_report(&report, &out_path(cli, "report.png")?)?;
    }
    print!("{}", report_table(&report));
    Ok(true)
}

fn train(cli: &Cli, cfg_file: &FileConfig, args: &TrainArgs) -> Result<bool> {
    let manifest = DatasetManifest::read(&args.manifest)?;
    if manifest.params.kind != DatasetKind::Classification {
        bail!("training is implemented for classification sets");
    }
    let n_classes = manifest.items.iter().filter_map(|i| i.label).max().map_or(0, |m| m + 1);
    if n_classes < 2 {
        bail!("manifest needs labeled items from at least two classes");
    }
    let cfg = cfg_file.model.clone().unwrap_or_else(|| ModelConfig::tiny(Head::Classes(n_classes)));
    let mut params = init_params(&cfg, cli.seed)?;
    let set = TestSet::load(&manifest)?;
    let t = &cfg_file.train;
    let mut opt = Sgd::new(&params, t.lr, t.momentum);
    let mut data: Vec<(Tensor, usize)> = Vec::new();
    let mut solved = None;
    for step in 0..t.steps {
        if step % t.steps_per_epoch.max(1) == 0 {
            let epoch = (step / t.steps_per_epoch.max(1)) as u64;
            data = set
                .items
                .iter()
                .map(|it| {
                    let xi = it.meta.epoch_xi(manifest.params.level, epoch);
                    let (img, target) = set.render(it, xi)?;
                    let img = to_channels(&img, cfg.in_channels)?;
                    let lens = set.params.lens(xi)?;
                    let label = match target {
                        darswin::pipeline::Target::Label(y) => y,
                        darswin::pipeline::Target::Depth(_) => bail!("unexpected depth target"),
                    };
                    Ok((prepare(&cfg, &img, &lens)?.samples, label))
                })
                .collect::<Result<_>>()?;
        }
        let batch: Vec<(&Tensor, Objective)> =
            data.iter().map(|(x, y)| (x, Objective::CrossEntropy { label: *y })).collect();
        let (loss, grads) = batch_grads(&cfg, &params, &batch)?;
        opt.step(&mut params, &grads);
        let correct = data.iter().map(|(x, y)| predict_class(&cfg, &params, x).map(|p| p == *y)).collect::<darswin::Result<Vec<_>>>()?;
        let acc = correct.iter().filter(|&&c| c).count() as f64 / data.len() as f64;
        eprintln!("step {:4} loss {loss:.5} acc {acc:.3}", step + 1);
        if acc == 1.0 && solved.is_none() {
            solved = Some(step + 1);
        }
    }
    save_checkpoint(&out_path(cli, &args.checkpoint)?, &cfg, &params)?;
    print_json(&serde_json::json!({ "steps": t.steps, "solved_at": solved }))?;
    Ok(true)
}

fn run(cli: &Cli) -> Result<bool> {
    let file_cfg = load_config(cli.config.as_deref())?;
    match &cli.cmd {
        Command::Synth(a) => {
            let params = GenerationParams {
                native_size: a.native_size,
                src_fov_deg: a.src_fov_deg,
                fov_deg: a.fov_deg,
                ..GenerationParams::classification(a.level, a.split.into(), cli.seed, a.out_size)
            };
            report_skips(&synth_classification_set(&a.src, &cli.out_dir, &params)?)
        }
        Command::SynthDepth(a) => {
            let params = GenerationParams {
                native_size: a.native_size,
                fov_deg: a.fov_deg,
                ..GenerationParams::depth(a.level, a.split.into(), cli.seed, a.out_size)
            };
            report_skips(&synth_depth_set(&a.pano_dir, &cli.out_dir, &params)?)
        }
        Command::Sweep(a) => {
            let grid = a.grid.clone().unwrap_or_else(|| xi_grid(10));
            evaluate(cli, &a.eval, |ev, set| Ok(sweep_eval(ev, set, &grid)?))
        }
        Command::Sensitivity(a) => {
            let xs = a.xi_grid.clone().unwrap_or_else(|| xi_grid(10));
            let ds = a.dxi_grid.clone().unwrap_or_else(default_dxi_grid);
            evaluate(cli, &a.eval, |ev, set| Ok(sensitivity(ev, set, &xs, &ds)?))
        }
        Command::IngestXi(a) => {
            let manifest = DatasetManifest::read(&a.manifest)?;
            let csv = fs::read_to_string(&a.xi_file).with_context(|| format!("reading {}", a.xi_file.display()))?;
            let out = ingest_external_xi(&manifest, &csv)?;
            out.write(&out_path(cli, "manifest.jsonl")?)?;
            eprintln!("attached xi to {} items", out.items.len());
            Ok(true)
        }
        Command::Warp(a) => {
            let src = read_png(&a.input)?;
            let lens = a.lens.lens()?;
            let img = if a.pano {
                warp_pano_to_lens(&Panorama::new(src)?, &lens, a.yaw_deg.to_radians(), a.out_size, Sampler::Bilinear)?
            } else {
                warp_perspective_to_lens(&src, a.src_fov_deg.to_radians(), &lens, a.out_size)?
            };
            write_png(&img, &out_path(cli, &a.output)?)?;
            Ok(true)
        }
        Command::Unwarp(a) => {
            let img = read_png(&a.input)?;
            let out = undistort_to_perspective(&img, &a.lens.lens()?, a.out_fov_deg.to_radians(), a.out_size)?;
            write_png(&out, &out_path(cli, &a.output)?)?;
            Ok(true)
        }
        Command::Cubemap(a) => {
            let img = read_png(&a.input)?;
            write_png(&undistort_to_cubemap(&img, &a.lens.lens()?, a.out_size)?, &out_path(cli, &a.output)?)?;
            Ok(true)
        }
        Command::Grid(a) => {
            let lens = a.lens.lens()?;
            let grid = partition(&lens, a.n_r, a.n_phi)?;
            let jitter = a.jitter.map(|f| Jitter { fraction: if f > 0.0 { f } else { DEFAULT_JITTER_FRACTION }, seed: cli.seed });
            let pattern = sampling_grid(&grid, &lens, a.samples_r, a.samples_phi, jitter)?;
            let doc = serde_json::json!({ "lens": lens, "grid": grid, "pattern": pattern });
            fs::write(out_path(cli, &a.output)?, serde_json::to_string_pretty(&doc)?)?;
            Ok(true)
        }
        Command::Gradcheck(a) => {
            let report = gradcheck(cli.seed, &file_cfg, a)?;
            print_json(&serde_json::json!({ "op": report.op, "max_rel_err": report.max_rel_err, "pass": report.pass }))?;
            Ok(report.pass)
        }
        Command::Checker(a) => {
            write_png(&checkerboard(a.out_size, a.squares)?, &out_path(cli, &a.output)?)?;
            Ok(true)
        }
        Command::Train(a) => train(cli, &file_cfg, a),
    }
}

fn gradcheck(seed: u64, file_cfg: &FileConfig, a: &GradcheckArgs) -> Result<darswin::model::GradCheckReport> {
    use std::sync::Arc;
    let head = if a.dense { Head::Dense(1) } else { Head::Classes(3) };
    let mut cfg = file_cfg.model.clone().unwrap_or_else(|| ModelConfig::tiny(head));
    cfg.head = head;
    let params = init_params(&cfg, seed)?;
    let img = darswin::imageops::ImageBuffer::from_fn(32, 32, cfg.in_channels, |x, y, c| {
        0.5 + 0.3 * (3.0 * x + c as f64).sin() * (2.0 * y).cos()
    });
    let lens = LensProjection::spherical_normalized(0.5, cfg.theta_max_deg)?;
    let prep = prepare(&cfg, &img, &lens)?;
    let obj = if a.dense {
        let table = darswin::geometry::knn_table(&prep.pattern, cfg.out_size, cfg.out_size, cfg.knn_k)?;
        let n = cfg.out_size * cfg.out_size;
        Objective::SiLog {
            target_log: Arc::new((0..n).map(|i| (i as f64 * 0.37).sin() * 0.5).collect()),
            mask: Arc::new(table.valid.clone()),
            lambda: darswin::model::SI_LOG_LAMBDA,
            knn: Arc::new(darswin::model::knn_row_map(&table, &prep.pattern)),
            out_hw: (cfg.out_size, cfg.out_size),
        }
    } else {
        Objective::CrossEntropy { label: 1 }
    };
    Ok(grad_check(&cfg, &params, &prep.samples, &obj, &[], a.per_tensor, a.tolerance)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

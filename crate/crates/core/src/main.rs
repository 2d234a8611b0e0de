use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use sgpsam::backbone::{parse_layers, LayerRange, SgpmPosition};
use sgpsam::harness::{
    ablate, evaluate, gradcheck, plot_ablation, plot_run, run_table2, train, verify_same_prompts,
    AblationGrid, Component, EvalOutput, RunConfig, TemperatureSchedule,
};
use sgpsam::sgpm::Estimator;
use sgpsam::synthdata::{generate_dataset, GenSpec, ShapeFamily};
use sgpsam::zoomloss::{Objective, SizeWeighting};
use sgpsam::{Error, Result};

#[derive(Parser)]
#[command(name = "sgpsam", version, about = "Self-gated multi-scale prompting for 3D lesion segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lesion dataset with frozen prompt files.
    GenData(GenArgs),
    /// Train one model.
    Train(RunArgs),
    /// Evaluate a trained run on the test manifest.
    Eval(EvalArgs),
    /// Run the SGPM position x depth grid, or the three-row component study.
    Ablate(AblateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradArgs),
    /// Render SVG charts for a run or an ablation directory.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for volumes, prompts and manifests.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Volume extent: `32` or `32,32,32`.
    #[arg(long, value_parser = parse_shape)]
    shape: Option<[usize; 3]>,
    #[arg(long)]
    fraction_lo: Option<f64>,
    #[arg(long)]
    fraction_hi: Option<f64>,
    /// ellipsoid or lobulated.
    #[arg(long)]
    family: Option<ShapeFamily>,
    /// Lesion intensity offset in noise standard deviations.
    #[arg(long)]
    contrast: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    n_fg: Option<usize>,
    #[arg(long)]
    n_bg: Option<usize>,
    #[arg(long)]
    prompt_seed: Option<u64>,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration; every flag below overrides its key.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Learning rate [config default: 8e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Training epochs [config default: 40].
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_accumulation: Option<usize>,
    /// a (end of block), b (beginning) or c (both).
    #[arg(long)]
    sgpm_position: Option<SgpmPosition>,
    /// Block range `i-j`, or `none` for the plain backbone.
    #[arg(long, value_parser = parse_layers_arg)]
    sgpm_layers: Option<OptRange>,
    /// soft or st (straight-through).
    #[arg(long, value_parser = parse_estimator)]
    estimator: Option<Estimator>,
    /// Gate temperature (constant unless --gate-temp-final is given).
    #[arg(long)]
    gate_temp: Option<f64>,
    /// Anneal the gate temperature linearly to this value.
    #[arg(long)]
    gate_temp_final: Option<f64>,
    #[arg(long)]
    focal_alpha: Option<f64>,
    #[arg(long)]
    focal_gamma: Option<f64>,
    #[arg(long)]
    combine_lambda: Option<f64>,
    /// off or inverse_fraction.
    #[arg(long, value_parser = parse_size_weighting)]
    size_weighting: Option<SizeWeighting>,
    /// zoom or dice_bce.
    #[arg(long, value_parser = parse_objective)]
    objective: Option<Objective>,
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    val_samples: Option<usize>,
    #[arg(long)]
    max_train_samples: Option<usize>,
}

#[derive(Clone, Copy)]
struct OptRange(Option<LayerRange>);

#[derive(Args)]
struct EvalArgs {
    /// Run directory containing checkpoint.bin / checkpoint.json.
    #[arg(long)]
    run: PathBuf,
    /// Test manifest; defaults to the one recorded in the run config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// eval.json files of runs being compared; prompt hashes must match.
    #[arg(long, num_args = 1..)]
    compare_with: Vec<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output directory for all cells [default: <out_dir>/<name>].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "a,b,c")]
    positions: Vec<SgpmPosition>,
    #[arg(long, value_delimiter = ',', default_value = "1-1,1-2,1-3,1-4")]
    ranges: Vec<LayerRange>,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    /// One epoch on eight training samples per cell.
    #[arg(long)]
    smoke: bool,
    /// Run the Baseline / +SGPM / +SGPM+ZoomLoss comparison instead of the grid.
    #[arg(long)]
    table2: bool,
    /// Seeds for --table2.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct GradArgs {
    /// sgpm, msfb, loss, end_to_end or all.
    #[arg(long, default_value = "all")]
    component: String,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds per component.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct PlotArgs {
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    ablation: Option<PathBuf>,
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| format!("bad extent {t:?}")))
        .collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        [n] => Ok([*n; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err("shape needs one or three extents".into()),
    }
}

fn parse_layers_arg(s: &str) -> std::result::Result<OptRange, String> {
    parse_layers(s).map(OptRange).map_err(|e| e.to_string())
}

fn parse_estimator(s: &str) -> std::result::Result<Estimator, String> {
    match s {
        "soft" => Ok(Estimator::Soft),
        "st" | "straight_through" => Ok(Estimator::StraightThrough),
        other => Err(format!("unknown estimator {other:?} (soft or st)")),
    }
}

fn parse_size_weighting(s: &str) -> std::result::Result<SizeWeighting, String> {
    match s {
        "off" => Ok(SizeWeighting::Off),
        "inverse_fraction" => Ok(SizeWeighting::InverseFraction),
        other => Err(format!("unknown size weighting {other:?} (off or inverse_fraction)")),
    }
}

fn parse_objective(s: &str) -> std::result::Result<Objective, String> {
    match s {
        "zoom" => Ok(Objective::Zoom),
        "dice_bce" => Ok(Objective::DiceBce),
        other => Err(format!("unknown objective {other:?} (zoom or dice_bce)")),
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:ident => $($target:tt)+) => {
                if let Some(v) = self.$field.clone() {
                    $($target)+ = v;
                }
            };
        }
        set!(name => c.name);
        set!(seed => c.seed);
        set!(lr => c.lr);
        set!(epochs => c.epochs);
        set!(batch_size => c.batch_size);
        set!(grad_accumulation => c.grad_accumulation);
        set!(sgpm_position => c.model.encoder.sgpm_position);
        set!(estimator => c.estimator);
        set!(focal_alpha => c.loss.focal_alpha);
        set!(focal_gamma => c.loss.focal_gamma);
        set!(combine_lambda => c.loss.combine_lambda);
        set!(size_weighting => c.loss.size_weighting);
        set!(objective => c.loss.objective);
        set!(train_manifest => c.train_manifest);
        set!(test_manifest => c.test_manifest);
        set!(out_dir => c.out_dir);
        set!(val_samples => c.val_samples);
        if let Some(OptRange(r)) = self.sgpm_layers {
            c.model.encoder.sgpm_layers = r;
        }
        if let Some(t) = self.gate_temp {
            c.gate_temperature = TemperatureSchedule::constant(t);
        }
        if let Some(t) = self.gate_temp_final {
            c.gate_temperature.end = t;
        }
        if self.max_train_samples.is_some() {
            c.max_train_samples = self.max_train_samples;
        }
        c.validate()?;
        Ok(c)
    }
}

fn gen_data(a: &GenArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => GenSpec::default(),
    };
    if let Some(v) = a.count {
        spec.count = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.shape {
        spec.volume_shape = v;
    }
    if let Some(v) = a.fraction_lo {
        spec.lesion_fraction_range.0 = v;
    }
    if let Some(v) = a.fraction_hi {
        spec.lesion_fraction_range.1 = v;
    }
    if let Some(v) = a.family {
        spec.shape_family = v;
    }
    if let Some(v) = a.contrast {
        spec.intensity_contrast = v;
    }
    if let Some(v) = a.noise_sigma {
        spec.noise_sigma = v;
    }
    if let Some(v) = a.n_fg {
        spec.prompts.n_fg = v;
    }
    if let Some(v) = a.n_bg {
        spec.prompts.n_bg = v;
    }
    if let Some(v) = a.prompt_seed {
        spec.prompts.seed = v;
    }
    let (train, test) = generate_dataset(&spec, &a.out)?;
    println!(
        "wrote {} train / {} test samples to {}",
        train.entries.len(),
        test.entries.len(),
        a.out.display()
    );
    Ok(())
}

fn run_train(a: &RunArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let start = Instant::now();
    let outcome = train(&cfg, |m| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val mDice {:.4}  val mIoU {:.4}  open {:.3}",
            m.epoch, m.train_loss, m.val_mdice, m.val_miou, m.train_open_rate
        );
    })?;
    println!(
        "trained {} in {:.1}s -> {}",
        cfg.name,
        start.elapsed().as_secs_f64(),
        outcome.run_dir.display()
    );
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let out = evaluate(&a.run, a.manifest.as_deref(), a.threshold)?;
    println!(
        "{}: mIoU {:.4}  mDice {:.4}  gate open rate {:.3}  MSFB FLOPs {}/{}",
        a.run.display(),
        out.report.miou,
        out.report.mdice,
        out.gate_stats.overall_open_rate,
        out.gate_stats.msfb_flops_executed,
        out.gate_stats.msfb_flops_potential
    );
    println!("prompt hash {}", out.prompt_hash);
    for other in &a.compare_with {
        verify_same_prompts(&out, &EvalOutput::load(other)?)?;
        println!("prompt files match {}", other.display());
    }
    Ok(())
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    let mut base = a.run.resolve()?;
    if a.smoke {
        base.epochs = 1;
        base.max_train_samples = Some(8);
        base.val_samples = base.val_samples.min(2);
    }
    let out = a.out.clone().unwrap_or_else(|| base.run_dir());
    let log = |line: &str| eprintln!("{line}");
    if a.table2 {
        let res = run_table2(&base, &a.seeds, &out, log)?;
        print!("{}", res.to_csv());
    } else {
        let grid = AblationGrid {
            positions: a.positions.clone(),
            layer_ranges: a.ranges.clone(),
            repetitions: a.repetitions,
            base,
        };
        let res = ablate(&grid, &out, log)?;
        print!("{}", res.to_csv());
    }
    println!("results in {}", out.display());
    Ok(())
}

fn run_gradcheck(a: &GradArgs) -> Result<bool> {
    let components: Vec<Component> = if a.component == "all" {
        Component::ALL.to_vec()
    } else {
        vec![a.component.parse()?]
    };
    let mut ok = true;
    for c in components {
        for seed in a.seed..a.seed + a.seeds {
            let r = gradcheck(c, seed)?;
            ok &= r.passed;
            println!("{r}");
        }
    }
    Ok(ok)
}

fn run_plot(a: &PlotArgs) -> Result<()> {
    let written = match (&a.run, &a.ablation) {
        (Some(run), _) => plot_run(run)?,
        (None, Some(dir)) => plot_ablation(dir)?,
        (None, None) => unreachable!("clap enforces one of --run/--ablation"),
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => run_train(a)?,
        Command::Eval(a) => run_eval(a)?,
        Command::Ablate(a) => run_ablate(a)?,
        Command::Gradcheck(a) => {
            if !run_gradcheck(a)? {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Plot(a) => run_plot(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation errors; --help/--version succeed
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}


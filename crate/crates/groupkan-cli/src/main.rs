//! GroupKAN command line: train, eval, profile, gradcheck, ablate, and
//! synthetic-data generation. Every command is deterministic given
//! (config, seed); outputs are CSV files plus the binary checkpoint format.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use groupkan::ablate::{run_ablation, AblationAxis};
use groupkan::config::RunConfig;
use groupkan::data::{generate_synthetic, load_dataset, save_dataset, Sample};
use groupkan::error::{Error, Result};
use groupkan::gradcheck;
use groupkan::metrics::{self, ThresholdRule};
use groupkan::model::{self, build, GroupKanConfig, GroupKanNet, Mode};
use groupkan::tensor::{Tape, Tensor};
use groupkan::train::{stack_batch, train, TRAIN_LOG_HEADER};

#[derive(Parser)]
#[command(name = "groupkan", version, about = "Grouped KAN segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint.gkn, train_log.csv, and the
    /// resolved config
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset; writes per-sample and aggregate
    /// metric CSVs
    Eval(EvalArgs),
    /// Analytic parameter and FLOP breakdown
    Profile(ProfileArgs),
    /// Finite-difference gradient verification suites
    Gradcheck(GradcheckArgs),
    /// Train ablation variants and emit a sweep CSV
    Ablate(AblateArgs),
    /// Generate a synthetic dataset on disk
    Generate(GenerateArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// INI config file (flags override file values)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset: tiny | s | base | l
    #[arg(long)]
    preset: Option<String>,
    /// RNG seed for init, splits, and augmentation
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::for_preset(self.preset.as_deref().unwrap_or("tiny"))?;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)?;
            cfg.merge_ini(&text)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Output directory (created if absent)
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Train on a generated synthetic dataset instead of --data
    #[arg(long)]
    synthetic: bool,
    /// Dataset directory with images/ and masks/
    #[arg(long)]
    data: Option<PathBuf>,
    /// Epoch count override
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size override
    #[arg(long)]
    batch_size: Option<usize>,
    /// Synthetic resolution override (multiple of 32)
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory with images/ and masks/
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluate on a generated synthetic dataset
    #[arg(long)]
    synthetic: bool,
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
    /// Also compute plausibility IoU from bottleneck activation maps
    #[arg(long)]
    explain: bool,
    /// Activation binarization for --explain: mean | otsu
    #[arg(long, default_value = "mean")]
    threshold_rule: String,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Input resolution for the FLOP count
    #[arg(long, default_value_t = 512)]
    resolution: usize,
    /// Emit one row per scaling preset (s, base, l) instead of components
    #[arg(long)]
    presets: bool,
    /// Override the GKT group count
    #[arg(long)]
    g_gkt: Option<usize>,
    /// Override the GKA group count
    #[arg(long)]
    g_gka: Option<usize>,
    /// Also write the CSV here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// ops | layers | model
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates sampled per parameter tensor in model scope
    #[arg(long, default_value_t = 20)]
    coords: usize,
}

#[derive(Args)]
struct AblateArgs {
    /// gkt_depth | gkt_vs_mlp | groups | activation | gkt_components
    axis: String,
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long, default_value = "runs/ablate")]
    out: PathBuf,
    /// Epochs per variant (ablations default to short runs)
    #[arg(long)]
    epochs: Option<usize>,
    /// Synthetic sample count override
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long, default_value = "runs/dataset")]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => cmd_train(args).map(|_| ExitCode::SUCCESS),
        Command::Eval(args) => cmd_eval(args).map(|_| ExitCode::SUCCESS),
        Command::Profile(args) => cmd_profile(args).map(|_| ExitCode::SUCCESS),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Ablate(args) => cmd_ablate(args).map(|_| ExitCode::SUCCESS),
        Command::Generate(args) => cmd_generate(args).map(|_| ExitCode::SUCCESS),
    }
}

fn load_samples(synthetic: bool, data: &Option<PathBuf>, cfg: &RunConfig) -> Result<Vec<Sample>> {
    if synthetic {
        generate_synthetic(&cfg.synthetic_spec())
    } else {
        let dir = data
            .as_ref()
            .ok_or_else(|| Error::Data("no dataset: pass --data <dir> or --synthetic".into()))?;
        load_dataset(dir)
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(r) = args.resolution {
        cfg.synthetic_resolution = r;
    }
    let samples = load_samples(args.synthetic, &args.data, &cfg)?;
    if let Some(first) = samples.first() {
        cfg.model.input_channels = first.channels();
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.resolved.ini"), cfg.to_ini())?;

    let net = build(&cfg.model, cfg.seed)?;
    let plan = cfg.train_plan();
    let report = train(&net, &samples, &plan)?;

    let mut csv = String::from(TRAIN_LOG_HEADER);
    csv.push('\n');
    for log in &report.logs {
        csv.push_str(&log.csv_row());
        csv.push('\n');
    }
    fs::write(args.out.join("train_log.csv"), csv)?;
    fs::write(args.out.join("checkpoint.gkn"), &report.checkpoint)?;
    println!(
        "trained {} epochs on {} samples; best val IoU {:.4} at epoch {} -> {}",
        plan.epochs,
        samples.len(),
        report.best_val_iou,
        report.best_epoch,
        args.out.join("checkpoint.gkn").display()
    );
    Ok(())
}

fn threshold_rule(name: &str) -> Result<ThresholdRule> {
    match name {
        "mean" => Ok(ThresholdRule::Mean),
        "otsu" => Ok(ThresholdRule::Otsu),
        other => Err(Error::Configuration(format!(
            "unknown threshold rule '{other}' (expected mean|otsu)"
        ))),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let net = model::load_checkpoint(&args.checkpoint)?;
    let samples = load_samples(args.synthetic, &args.data, &cfg)?;
    let rule = threshold_rule(&args.threshold_rule)?;
    fs::create_dir_all(&args.out)?;

    let dataset_name = if args.synthetic {
        "synthetic".to_string()
    } else {
        args.data
            .as_ref()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    };

    let mut per_sample = String::from(if args.explain {
        "id,iou,f1,plausibility_iou"
    } else {
        "id,iou,f1"
    });
    per_sample.push('\n');

    let (mut iou_sum, mut f1_sum, mut plaus_sum) = (0.0, 0.0, 0.0);
    for s in &samples {
        let tape = Tape::inference();
        let (x, _) = stack_batch(std::slice::from_ref(s))?;
        let logits = net.forward(&tape, &x, Mode::Eval)?;
        let (h, w) = s.resolution();
        let pred: Vec<f64> = logits
            .data()
            .iter()
            .map(|&z| if z > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let pred = Tensor::from_vec(&[h, w], pred)?;
        let iou = metrics::iou(&pred, &s.mask)?;
        let f1 = metrics::f1(&pred, &s.mask)?;
        iou_sum += iou;
        f1_sum += f1;
        if args.explain {
            let map = net.activation_map(&x)?;
            let p = metrics::plausibility_iou(&map.data(), (h, w), &s.mask, rule)?;
            plaus_sum += p;
            per_sample.push_str(&format!("{},{iou},{f1},{p}\n", s.id));
        } else {
            per_sample.push_str(&format!("{},{iou},{f1}\n", s.id));
        }
    }
    let n = samples.len() as f64;
    fs::write(args.out.join("metrics.csv"), per_sample)?;

    let (h, w) = samples[0].resolution();
    let params = net.count_params().total();
    let gflops = net.count_flops(h, w)?.total() as f64 / 1e9;
    let plaus = if args.explain {
        format!("{}", plaus_sum / n)
    } else {
        String::new()
    };
    let report = format!(
        "dataset,seed,iou,f1,plausibility_iou,params,gflops\n{dataset_name},{},{},{},{plaus},{params},{gflops}\n",
        cfg.seed,
        iou_sum / n,
        f1_sum / n
    );
    fs::write(args.out.join("report.csv"), &report)?;
    println!(
        "evaluated {} samples: mean IoU {:.4}, mean F1 {:.4}",
        samples.len(),
        iou_sum / n,
        f1_sum / n
    );
    Ok(())
}

fn profile_rows(net: &GroupKanNet, resolution: usize) -> Result<String> {
    let p = net.count_params();
    let f = net.count_flops(resolution, resolution)?;
    let mut s = String::from("component,params,flops\n");
    for (name, pv, fv) in [
        ("encoder", p.encoder, f.encoder),
        ("gka", p.gka, f.gka),
        ("gkt_spline", p.gkt_spline, f.gkt_spline),
        ("gkt_conv", p.gkt_conv, f.gkt_conv),
        ("decoder", p.decoder, f.decoder),
        ("total", p.total(), f.total()),
    ] {
        s.push_str(&format!("{name},{pv},{fv}\n"));
    }
    Ok(s)
}

fn cmd_profile(args: ProfileArgs) -> Result<()> {
    let csv = if args.presets {
        let mut s = String::from("preset,params,flops\n");
        for name in ["s", "base", "l"] {
            let cfg = GroupKanConfig::preset(name)?;
            let net = build(&cfg, 0)?;
            s.push_str(&format!(
                "{name},{},{}\n",
                net.count_params().total(),
                net.count_flops(args.resolution, args.resolution)?.total()
            ));
        }
        s
    } else {
        let mut cfg = args.common.resolve()?;
        if let Some(g) = args.g_gkt {
            cfg.model.g_gkt = g;
        }
        if let Some(g) = args.g_gka {
            cfg.model.g_gka = g;
        }
        let net = build(&cfg.model, cfg.seed)?;
        profile_rows(&net, args.resolution)?
    };
    print!("{csv}");
    if let Some(path) = &args.out {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, &csv)?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let reports = match args.scope.as_str() {
        "ops" => gradcheck::check_ops(args.seed)?,
        "layers" => gradcheck::check_layers(args.seed)?,
        "model" => gradcheck::check_model(args.seed, args.coords)?,
        other => {
            eprintln!(
                "usage error: unknown gradcheck scope '{other}' (expected ops|layers|model)"
            );
            return Ok(ExitCode::from(2));
        }
    };
    let mut failed = 0;
    for r in &reports {
        println!(
            "{} {:40} max rel err {:.3e} (tol {:.0e}, {} coords)",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.tol,
            r.coords_checked
        );
        if !r.passed() {
            failed += 1;
        }
    }
    println!("{}: {} checks, {} failed", args.scope, reports.len(), failed);
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let axis: AblationAxis = args.axis.parse()?;
    let mut cfg = args.common.resolve()?;
    // short-run defaults so a full sweep stays desk-scale
    cfg.epochs = args.epochs.unwrap_or(12);
    if let Some(c) = args.count {
        cfg.synthetic_count = c;
    } else {
        cfg.synthetic_count = cfg.synthetic_count.min(96);
    }
    let table = run_ablation(axis, &cfg)?;
    let csv = table.to_string();
    fs::create_dir_all(&args.out)?;
    let path = args.out.join(format!("ablate_{}.csv", axis.name()));
    fs::write(&path, &csv)?;
    print!("{csv}");
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(c) = args.count {
        cfg.synthetic_count = c;
    }
    if let Some(r) = args.resolution {
        cfg.synthetic_resolution = r;
    }
    let samples = generate_synthetic(&cfg.synthetic_spec())?;
    save_dataset(&args.out, &samples)?;
    fs::write(args.out.join("config.resolved.ini"), cfg.to_ini())?;
    println!(
        "wrote {} samples at {}x{} to {}",
        samples.len(),
        cfg.synthetic_resolution,
        cfg.synthetic_resolution,
        args.out.display()
    );
    Ok(())
}

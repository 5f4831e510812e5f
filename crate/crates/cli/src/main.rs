use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use focusnet_core::config::{split_assignment, Config};
use focusnet_core::data::{
    gen_synthetic, load_dataset, load_image, save_feature_map, save_mask, write_dataset, Sample, Split, SyntheticSpec,
};
use focusnet_core::metrics::{evaluate, MetricsReport, SignificanceTest};
use focusnet_core::model::{
    analytic_macs, analytic_params, counted_macs, counted_params, load_checkpoint, read_checkpoint, save_checkpoint,
    Accounting, FocusNet, ModelConfig,
};
use focusnet_core::train::train;
use focusnet_core::verify::{run_suite, Suite};
use focusnet_core::{Error, ForwardCtx};

/// Exit status for configuration and usage errors (clap uses the same code).
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "focusnet", version, about = "Polyp segmentation: train, evaluate, predict and verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, the epoch log and the effective config.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Segment one image.
    Predict(PredictArgs),
    /// Run the 64-bit gradient verification suites.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset (train and val splits) to disk.
    Synth(SynthArgs),
    /// Print parameter and MAC accounting for a checkpoint or config.
    Info(InfoArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<Config> {
        let mut cfg = Config::desk();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in &self.overrides {
            let (k, v) = split_assignment(o)?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset root holding train and val splits.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Generate the data instead, e.g. `count=8,res=64,seed=1`.
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Report of another method on the same images; adds a p-value row.
    #[arg(long)]
    baseline_report: Option<PathBuf>,
    /// Name printed in the p-value row.
    #[arg(long, default_value = "baseline")]
    baseline_name: String,
    #[arg(long, default_value = "wilcoxon")]
    test: SignificanceTest,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Emit the JSON document instead of the line format.
    #[arg(long)]
    json: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output mask PNG.
    #[arg(long)]
    out: PathBuf,
    /// Also write channel-mean PNGs of f1, f2, T', F̂1 and F̂2 here.
    #[arg(long)]
    dump_intermediates: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// all, or one of tensor|nn|attention|cidm|dem|fam|model.
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic spec, e.g. `count=8,res=64,seed=1`.
    #[arg(long)]
    spec: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long, conflicts_with_all = ["config", "overrides"])]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Start from the full-scale model instead of the desk one.
    #[arg(long, conflicts_with = "checkpoint")]
    full: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Info(a) => cmd_info(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let Some(mut err) = e.downcast_ref::<Error>() else {
        return 1;
    };
    while let Error::Module { source, .. } = err {
        err = source;
    }
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Image { .. } | Error::Checkpoint(_) | Error::Io(_) => EXIT_DATA,
        Error::Divergence { .. } | Error::NonFinite { .. } => EXIT_DIVERGED,
        _ => 1,
    }
}

fn synthetic_splits(spec: &SyntheticSpec) -> anyhow::Result<(Vec<Sample>, Vec<Sample>)> {
    Ok((gen_synthetic(spec)?, gen_synthetic(&spec.validation())?))
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let size = cfg.model.input_size;
    let (train_set, val_set) = match (&a.data, &a.synthetic) {
        (Some(root), _) => (load_dataset(root, Split::Train, size)?, load_dataset(root, Split::Val, size)?),
        (None, Some(text)) => {
            let spec = SyntheticSpec::parse(text)?;
            if (spec.resolution, spec.resolution) != size {
                return Err(Error::Config(format!(
                    "synthetic resolution {} does not match model input {}x{}",
                    spec.resolution, size.0, size.1
                ))
                .into());
            }
            synthetic_splits(&spec)?
        }
        (None, None) => unreachable!("clap requires --data or --synthetic"),
    };

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.txt"), cfg.to_text())?;
    let log_path = a.out.join("train.log");
    let mut log = String::new();
    let mut model = FocusNet::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let started = Instant::now();
    let outcome = train(&mut model, &train_set, &val_set, &cfg.train, |rec| {
        println!("{rec}");
        log.push_str(&format!("{rec}\n"));
    });
    // The log is kept even when training diverges.
    std::fs::write(&log_path, &log)?;
    let outcome = outcome?;
    save_checkpoint(&model, &a.out.join("final.fseg"))?;
    outcome.best.restore(&mut model)?;
    save_checkpoint(&model, &a.out.join("best.fseg"))?;
    println!(
        "done: {} steps, best epoch {} (val mdsc {:.6}) in {:.1}s",
        outcome.steps,
        outcome.best_epoch,
        outcome.best_val_mdsc,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn read_report(path: &Path) -> anyhow::Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let report = if text.trim_start().starts_with('{') {
        MetricsReport::from_json(&text)?
    } else {
        MetricsReport::from_text(&text)?
    };
    Ok(report)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Config(format!("threshold {} outside [0,1]", a.threshold)).into());
    }
    let model = load_checkpoint::<f32>(&a.checkpoint)?;
    let samples = load_dataset(&a.data, a.split, model.config.input_size)?;
    let started = Instant::now();
    let mut report = evaluate(&model, &samples, a.threshold)?;
    let secs = started.elapsed().as_secs_f64();
    if let Some(path) = &a.baseline_report {
        report.compare(&read_report(path)?, &a.baseline_name, a.test)?;
    }
    let text = if a.json { report.to_json() + "\n" } else { report.to_text() };
    match &a.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    eprintln!("{} images in {secs:.2}s ({:.1} images/s)", samples.len(), samples.len() as f64 / secs.max(1e-9));
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Config(format!("threshold {} outside [0,1]", a.threshold)).into());
    }
    let model = load_checkpoint::<f32>(&a.checkpoint)?;
    let (h, w) = model.config.input_size;
    let image = load_image(&a.image, (h, w))?.reshape(&[1, 3, h, w])?;
    let out = model.forward(&image, &mut ForwardCtx::eval())?;
    let prob = out.heads.fused.sigmoid();
    let mask: Vec<bool> = prob.data().iter().map(|&p| f64::from(p) >= a.threshold).collect();
    save_mask(&mask, (h, w), &a.out)?;
    if let Some(dir) = &a.dump_intermediates {
        std::fs::create_dir_all(dir)?;
        let maps = [
            ("f1", &out.pyramid.f1),
            ("f2", &out.pyramid.f2),
            ("t_prime", &out.detail),
            ("f_hat1", &out.cidm_m.feature),
            ("f_hat2", &out.cidm_a.feature),
        ];
        for (name, map) in maps {
            save_feature_map(map, &dir.join(format!("{name}.png")))?;
        }
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let suites = Suite::parse_list(&a.module)?;
    let mut failed = Vec::new();
    for suite in suites {
        let started = Instant::now();
        let summary = run_suite(suite, a.seed)?;
        let status = if summary.passed() { "PASS" } else { "FAIL" };
        let worst = summary.worst().map_or_else(|| "-".to_string(), |r| format!("{} (seed {})", r.name, r.seed));
        let skipped: usize = summary.results.iter().map(|r| r.skipped).sum();
        println!(
            "{status} {:<9} worst_rel_err={:.3e} at {worst}  checks={} skipped_elements={skipped} ({:.1}s)",
            suite.name(),
            summary.max_rel_err(),
            summary.results.len(),
            started.elapsed().as_secs_f64()
        );
        failed.extend(
            summary
                .results
                .iter()
                .filter(|r| !r.passed())
                .map(|r| format!("{}/{} seed {} ({:.3e})", suite.name(), r.name, r.seed, r.max_rel_err)),
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        bail!("gradient check failed: {}", failed.join(", "))
    }
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let spec = SyntheticSpec::parse(&a.spec)?;
    let (train_set, val_set) = synthetic_splits(&spec)?;
    write_dataset(&train_set, &a.out.join(Split::Train.name()))?;
    write_dataset(&val_set, &a.out.join(Split::Val.name()))?;
    println!(
        "wrote {} train and {} val samples ({}x{}) to {}",
        train_set.len(),
        val_set.len(),
        spec.resolution,
        spec.resolution,
        a.out.display()
    );
    Ok(())
}

fn print_table(title: &str, counted: &Accounting, analytic: &Accounting) {
    println!("{title:<10} {:>16} {:>16}", "counted", "analytic");
    for (name, c) in &counted.rows {
        let an = analytic.get(name).map_or_else(|| "-".into(), |v| v.to_string());
        println!("  {name:<8} {c:>16} {an:>16}");
    }
    println!("  {:<8} {:>16} {:>16}", "total", counted.total(), analytic.total());
}

fn cmd_info(a: InfoArgs) -> anyhow::Result<()> {
    let model: FocusNet<f32> = match &a.checkpoint {
        Some(path) => read_checkpoint(path)?.to_model()?,
        None => {
            let mut cfg = a.config.load()?;
            if a.full {
                let base = cfg.model.clone();
                cfg.model = ModelConfig {
                    input_size: ModelConfig::full().input_size,
                    backbone: ModelConfig::full().backbone,
                    ..base
                };
                // Explicit overrides still win over the full-scale preset.
                for o in &a.config.overrides {
                    let (k, v) = split_assignment(o)?;
                    cfg.set(k, v)?;
                }
            }
            cfg.validate()?;
            FocusNet::new(cfg.model, 0)?
        }
    };
    let cfg = &model.config;
    let (h, w) = cfg.input_size;
    let c = cfg.backbone.channels;
    println!(
        "input {h}x{w}, backbone channels {},{},{},{}, decoder width {}",
        c[0], c[1], c[2], c[3], cfg.decoder_width
    );
    let (pc, pa) = (counted_params(&model), analytic_params(cfg));
    let (mc, ma) = (counted_macs(&model)?, analytic_macs(cfg));
    print_table("params", &pc, &pa);
    print_table("macs", &mc, &ma);
    if pc != pa || mc != ma {
        return Err(anyhow!("accounting cross-check failed: counted and analytic totals differ"));
    }
    println!("cross-check: ok");
    Ok(())
}

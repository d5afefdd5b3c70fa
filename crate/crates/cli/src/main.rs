use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tamperlens_core::eval::{
    distort, distort_mask, evaluate, robustness_table, Baseline, Distortion, EvalOptions, Localizer, Metric,
    MetricsReport, ModelLocalizer, ThresholdMode,
};
use tamperlens_core::forge::{build_dataset, load_mask, load_rgb, save_mask, save_rgb, DatasetManifest, ForgeConfig, Mix};
use tamperlens_core::train::{load_examples, Checkpoint, TrainConfig, Trainer, SEED_ENV};

/// Tamper localisation toolkit: generate synthetic data, train, evaluate.
#[derive(Parser, Debug)]
#[command(name = "tamperlens", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of authentic and tampered images.
    Gen(GenArgs),
    /// Train a model; writes a run directory.
    Train(TrainArgs),
    /// Score a checkpoint (or a reference baseline) under distortions.
    Eval(EvalArgs),
    /// Apply one distortion to an image (and optionally its mask).
    Distort(DistortArgs),
    /// Tabulate one metric from several eval outputs, distortions down.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Number of samples.
    #[arg(long)]
    n: usize,
    /// Fractions of splice,copy-move,remove,authentic; must sum to 1.
    #[arg(long, default_value = "0.25,0.25,0.25,0.25")]
    mix: String,
    /// Generator seed.
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    /// Output directory (images/, masks/, manifest.jsonl, dataset.cfg).
    #[arg(long)]
    out: PathBuf,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

#[derive(Args, Debug)]
struct DataSel {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Use only records START..END of the manifest.
    #[arg(long, value_parser = parse_range)]
    range: Option<Range<usize>>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` config file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataSel,
    /// Run directory for the config snapshot, log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Also save a checkpoint every N iterations.
    #[arg(long)]
    save_every: Option<usize>,
    /// Print a progress line every N iterations.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Reference predictor instead of a model: oracle, anti-oracle, or
    /// constant:<p>[:fake].
    #[arg(long)]
    baseline: Option<String>,
    #[command(flatten)]
    data: DataSel,
    /// Comma-separated distortions: none, resize:<s>, blur:<k>,
    /// noise:<sigma>, jpeg:<q>.
    #[arg(long, default_value = "none")]
    distortions: String,
    /// Evaluate `none` plus the eight-setting robustness battery.
    #[arg(long)]
    battery: bool,
    /// Optimal-F1 threshold search: per-image or dataset.
    #[arg(long, default_value = "per-image")]
    threshold: String,
    /// Seed for the noise distortion.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Column name in reports; defaults to the checkpoint or baseline.
    #[arg(long)]
    name: Option<String>,
    /// Output directory (metrics.txt, metrics.csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DistortArgs {
    /// Input RGB PNG.
    #[arg(long)]
    image: PathBuf,
    /// Distortion, e.g. jpeg:50.
    #[arg(long)]
    spec: String,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth mask to transform alongside the image.
    #[arg(long, requires = "mask_out")]
    mask: Option<PathBuf>,
    #[arg(long)]
    mask_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Eval outputs: metrics.txt files or the directories holding them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// f1_fixed, f1_optimal, auc or recall_fake.
    #[arg(long, default_value = "auc")]
    metric: String,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

fn parse_range(s: &str) -> std::result::Result<Range<usize>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected START..END, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("range start {a:?}: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("range end {b:?}: {e}"))?;
    if a >= b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok(a..b)
}

impl DataSel {
    fn load(&self) -> Result<DatasetManifest> {
        let m = DatasetManifest::load(&self.data).with_context(|| format!("loading dataset {}", self.data.display()))?;
        match &self.range {
            None => Ok(m),
            Some(r) if r.end <= m.len() => Ok(m.subset(r.clone())),
            Some(r) => bail!("range {}..{} exceeds the {} records in {}", r.start, r.end, m.len(), self.data.display()),
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mix: Mix = a.mix.parse()?;
    mix.validate()?;
    let cfg = ForgeConfig {
        image_size: a.image_size,
        ..ForgeConfig::default()
    };
    let m = build_dataset(&cfg, a.n, &mix, a.seed, &a.out)?;
    println!("wrote {} samples to {} (config hash {:#018x})", m.len(), a.out.display(), m.config_hash);
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    let cfg = cfg.with_seed_override(env.as_deref())?;
    let data = a.data.load()?;
    create_dir(&a.out)?;
    write(&a.out.join("config.txt"), &cfg.to_text())?;

    let mut trainer = Trainer::new(cfg)?;
    let examples = load_examples(&trainer.model, &trainer.store, &data)?;
    if examples.is_empty() {
        bail!("dataset {} has no records to train on", a.data.data.display());
    }
    let log_path = a.out.join("train_log.tsv");
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    writeln!(log, "step\tlr\tloss\ttext\tmask")?;
    let start = std::time::Instant::now();
    while trainer.iter < trainer.cfg.total_iters {
        let l = trainer.step(&examples)?;
        writeln!(log, "{}\t{:e}\t{}\t{}\t{}", l.step, l.lr, l.loss, l.text, l.mask)?;
        if a.log_every > 0 && (l.step % a.log_every == 0 || l.step == trainer.cfg.total_iters) {
            eprintln!(
                "step {:>5}  lr {:.2e}  loss {:.4}  text {:.4}  mask {:.4}  ({:.0}s)",
                l.step,
                l.lr,
                l.loss,
                l.text,
                l.mask,
                start.elapsed().as_secs_f64()
            );
        }
        if a.save_every.is_some_and(|n| n > 0 && l.step % n == 0) && l.step < trainer.cfg.total_iters {
            trainer.checkpoint().save(a.out.join(format!("checkpoint-{:05}.bin", l.step)))?;
        }
    }
    let path = a.out.join("checkpoint.bin");
    trainer.checkpoint().save(&path)?;
    println!("trained {} iterations; checkpoint {}", trainer.iter, path.display());
    Ok(())
}

fn parse_baseline(s: &str) -> Result<Baseline> {
    let parts: Vec<&str> = s.split(':').collect();
    Ok(match parts.as_slice() {
        ["oracle"] => Baseline::Oracle,
        ["anti-oracle"] => Baseline::AntiOracle,
        ["constant", p] | ["constant", p, "real"] => Baseline::Constant {
            p: p.parse().with_context(|| format!("baseline probability {p:?}"))?,
            says_fake: false,
        },
        ["constant", p, "fake"] => Baseline::Constant {
            p: p.parse().with_context(|| format!("baseline probability {p:?}"))?,
            says_fake: true,
        },
        _ => bail!("unknown baseline {s:?}: expected oracle, anti-oracle or constant:<p>[:fake|:real]"),
    })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut distortions: Vec<Distortion> = a
        .distortions
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<Distortion>())
        .collect::<std::result::Result<_, _>>()?;
    if a.battery {
        for d in std::iter::once(Distortion::None).chain(Distortion::battery()) {
            if !distortions.contains(&d) {
                distortions.push(d);
            }
        }
    }
    let opts = EvalOptions {
        threshold: a.threshold.parse::<ThresholdMode>()?,
        seed: a.seed,
    };
    let data = a.data.load()?;
    let report = match (&a.checkpoint, &a.baseline) {
        (Some(path), _) => {
            let (ck, model) = Checkpoint::load(path)?;
            let name = a.name.clone().unwrap_or_else(|| path.display().to_string());
            let mut loc = ModelLocalizer {
                model: &model,
                store: &ck.params,
            };
            evaluate(&mut loc as &mut dyn Localizer, &data, &distortions, &name, &opts)?
        }
        (None, Some(b)) => {
            let mut base = parse_baseline(b)?;
            let name = a.name.clone().unwrap_or_else(|| b.clone());
            evaluate(&mut base, &data, &distortions, &name, &opts)?
        }
        (None, None) => bail!("pass --checkpoint or --baseline"),
    };
    create_dir(&a.out)?;
    write(&a.out.join("metrics.txt"), &report.to_text())?;
    write(&a.out.join("metrics.csv"), &report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_distort(a: DistortArgs) -> Result<()> {
    let spec: Distortion = a.spec.parse()?;
    let img = load_rgb(&a.image)?;
    save_rgb(&distort(&img, &spec, a.seed)?, &a.out)?;
    if let (Some(m), Some(out)) = (&a.mask, &a.mask_out) {
        save_mask(&distort_mask(&load_mask(m)?, &spec)?, out)?;
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let metric: Metric = a.metric.parse()?;
    let reports = a
        .inputs
        .iter()
        .map(|p| {
            let file = if p.is_dir() { p.join("metrics.txt") } else { p.clone() };
            let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            MetricsReport::parse(&text).with_context(|| format!("parsing {}", file.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = robustness_table(&reports, metric);
    write(&a.out, &table)?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Distort(a) => cmd_distort(a),
        Command::Report(a) => cmd_report(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

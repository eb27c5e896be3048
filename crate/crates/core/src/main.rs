use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dabseg::autodiff::gradcheck::operator_suite;
use dabseg::motion::{degrade_dataset, SeverityPreset};
use dabseg::report::{report_curves, EvalReport};
use dabseg::train::{
    ablation_csv, evaluate_checkpoint, network_gradcheck, run_ablation, train_and_evaluate,
    AblationVariant, Checkpoint, EpochRecord, TrainConfig, Trainer,
};
use dabseg::volume::{
    generate_phantom, scan_dataset, split_dataset, write_case, write_manifest, PhantomProfile,
};
use dabseg::{Precision, Real};

#[derive(Parser)]
#[command(
    name = "dabseg",
    version,
    about = "Motion-robust multimodal brain tumor segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset of phantom cases.
    Phantom(PhantomArgs),
    /// Write motion-degraded copies of every case.
    Simulate(SimulateArgs),
    /// Train (and evaluate on the held-out split).
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the four ablation variants.
    Ablate(AblateArgs),
    /// Emit sorted-Dice and CDF curves from a report CSV.
    Report(ReportArgs),
    /// Finite-difference check of every operator and the full network.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 48)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write `split.tsv` with these train:val:test ratios.
    #[arg(long, value_delimiter = ':', num_args = 3)]
    split: Option<Vec<f64>>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Output dataset; defaults to writing next to the inputs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Builtin preset name or key=value preset file.
    #[arg(long, default_value = "S2")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    per_modality_motion: bool,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Dataset root (overrides the config; otherwise phantoms are synthesized).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// L1 instead of squared reconstruction error.
    #[arg(long)]
    rec_l1: bool,
    /// Feed clean volumes instead of degraded ones half of the time.
    #[arg(long)]
    mix_clean: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Continue from a checkpoint written by the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated subset of dami, dami_fdmds_l02, dami_fdmds_l01, full.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parameter elements sampled per tensor in the network check.
    #[arg(long, default_value_t = 3)]
    per_tensor: usize,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse::<u32>()
        .ok()
        .and_then(Precision::from_bits)
        .ok_or_else(|| format!("precision must be 32 or 64, got {s:?}"))
}

fn resolve_config(a: &RunArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(p) = a.precision {
        c.precision = p;
    }
    if let Some(d) = &a.data {
        c.data.root = Some(d.clone());
    }
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if a.rec_l1 {
        c.loss.rec_norm = dabseg::loss::RecNorm::L1;
    }
    c.mix_clean |= a.mix_clean;
    c.apply_env()?;
    c.validate()?;
    Ok(c)
}

fn print_epoch(tag: &str, e: &EpochRecord, t0: Instant) {
    let rec = e
        .rec_loss
        .map(|r| format!(" rec {r:.4}"))
        .unwrap_or_default();
    println!(
        "{tag}epoch {:>3} lr {:.3e} loss {:.4} seg {:.4}{rec} dice et/tc/wt {:.3}/{:.3}/{:.3} [{:.0}s]",
        e.epoch,
        e.lr,
        e.loss,
        e.seg_loss,
        e.soft_dice[0],
        e.soft_dice[1],
        e.soft_dice[2],
        t0.elapsed().as_secs_f64()
    );
}

fn print_summary(report: &EvalReport) {
    let s = report.summary();
    for (i, r) in ["ET", "TC", "WT"].iter().enumerate() {
        println!(
            "{r}: dice {:.4} ± {:.4}  hd95 {:.3} ± {:.3}",
            s.dice[i].mean, s.dice[i].std, s.hd95[i].mean, s.hd95[i].std
        );
    }
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let profile = PhantomProfile::for_size(a.size);
    let mut records = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let id = format!("phantom_{i:03}");
        let (mut volume, labels) = generate_phantom(
            dabseg::motion::case_seed(a.seed, &id, None),
            [a.size; 3],
            &profile,
        )?;
        volume.case_id = id;
        records.push(write_case(&a.out, &volume, &labels)?);
    }
    if let Some(r) = a.split {
        let split = split_dataset(&records, [r[0], r[1], r[2]], a.seed)?;
        write_manifest(&a.out.join("split.tsv"), &split)?;
        let (tr, va, te) = split.sizes();
        println!("split train/val/test = {tr}/{va}/{te}");
    }
    println!("wrote {} cases to {}", records.len(), a.out.display());
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let preset = SeverityPreset::resolve(&a.preset)?;
    let cases = scan_dataset(&a.input)?;
    let out = degrade_dataset(
        &cases,
        &preset,
        a.seed,
        a.out.as_deref(),
        a.per_modality_motion,
    )?;
    let dir = a.out.clone().unwrap_or(a.input.clone());
    let meta = serde_json::json!({
        "preset": preset,
        "seed": a.seed,
        "per_modality_motion": a.per_modality_motion,
        "cases": out,
    });
    let p = dir.join("simulate.json");
    std::fs::write(&p, serde_json::to_string_pretty(&meta)?)
        .with_context(|| format!("writing {}", p.display()))?;
    println!(
        "degraded {} cases with preset {} into {}",
        out.len(),
        preset.name,
        dir.display()
    );
    Ok(())
}

fn resume_typed<T: Real>(config: TrainConfig, ckpt: &Path, out: &Path) -> Result<()> {
    let split = dabseg::train::load_split(&config)?;
    let mut trainer = Trainer::<T>::resume(config, Checkpoint::load(ckpt)?)?;
    println!(
        "resuming at epoch {} (step {})",
        trainer.epoch, trainer.step
    );
    let t0 = Instant::now();
    trainer.run(&split.train, Some(out), |e| print_epoch("", e, t0))?;
    let held_out = if split.test.is_empty() {
        &split.val
    } else {
        &split.test
    };
    if !held_out.is_empty() {
        let report = trainer.evaluate(held_out)?;
        report.write(out)?;
        print_summary(&report);
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let config = resolve_config(&a.run)?;
    let out = &a.run.out;
    config.write_snapshot(out)?;
    println!("config {} -> {}", config.hash(), out.display());
    if let Some(ckpt) = &a.resume {
        return match config.precision {
            Precision::F32 => resume_typed::<f32>(config, ckpt, out),
            Precision::F64 => resume_typed::<f64>(config, ckpt, out),
        };
    }
    let t0 = Instant::now();
    let outcome = train_and_evaluate(&config, Some(out), |e| print_epoch("", e, t0))?;
    if !outcome.report.cases.is_empty() {
        report_curves(&outcome.report, out)?;
        print_summary(&outcome.report);
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (_, report) = evaluate_checkpoint(&a.checkpoint, None)?;
    report.write(&a.out)?;
    report_curves(&report, &a.out)?;
    print_summary(&report);
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let config = resolve_config(&a.run)?;
    let variants = match &a.variants {
        None => AblationVariant::ALL.to_vec(),
        Some(v) => v
            .iter()
            .map(|s| AblationVariant::from_slug(s.trim()))
            .collect::<dabseg::Result<_>>()?,
    };
    config.write_snapshot(&a.run.out)?;
    let t0 = Instant::now();
    let rows = run_ablation(&config, &variants, Some(&a.run.out), |v, e| {
        print_epoch(&format!("[{}] ", v.slug()), e, t0)
    })?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.report)
        .with_context(|| format!("reading {}", a.report.display()))?;
    let report = EvalReport::from_csv(&text)?;
    for p in report_curves(&report, &a.out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut failed = 0;
    for c in operator_suite(a.seed)? {
        let ok = c.report.max_rel_error < 1e-4;
        failed += usize::from(!ok);
        println!(
            "{} {:<22} {:?} rel {:.2e} ({} compared)",
            if ok { "PASS" } else { "FAIL" },
            c.op,
            c.shapes,
            c.report.max_rel_error,
            c.report.compared
        );
    }
    let net = network_gradcheck(a.seed, a.per_tensor)?;
    let ok = net.max_rel_error < 1e-3;
    failed += usize::from(!ok);
    println!(
        "{} network (width 8, 8^3) rel {:.2e} ({} compared)",
        if ok { "PASS" } else { "FAIL" },
        net.max_rel_error,
        net.compared
    );
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Phantom(a) => phantom(a),
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

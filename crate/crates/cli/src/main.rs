use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mna_core::config::{parse_dims, RunConfig};
use mna_core::error::{Error, Result};
use mna_core::gradcheck::{check_case, format_table, parse_cases};
use mna_core::model::VariantKind;
use mna_core::train::{
    evaluate_variant, format_report, run_ablation, run_stage_pipeline, AblationConfig, PipelineConfig,
};
use mna_core::volume::manifest::Split;
use mna_core::volume::synth::{generate_synthetic_cohort, SynthConfig};

#[derive(Parser, Debug)]
#[command(name = "mna", version, about = "Patch-based multimodal MRI/PET conversion classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired MRI/PET cohort with its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Subjects per split (train,val,test); converters get the odd one out.
        #[arg(long, value_parser = parse_counts)]
        counts: Option<[usize; 3]>,
        #[arg(long, default_value = "30,38,30", value_parser = dims_arg)]
        dims: [usize; 3],
        /// Signal strength inside the converter region.
        #[arg(long)]
        amplitude: Option<f32>,
    },
    /// Train one or all stages of a variant.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// 1, 2, 3 or all.
        #[arg(long, default_value = "all", value_parser = parse_stage)]
        stage: usize,
        /// Overrides the variant named in the config.
        #[arg(long)]
        variant: Option<VariantKind>,
        /// Parallel stage models; defaults to the config value, else the available cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate trained variants on a split and write a report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory; repeat once per variant, or give one for all.
        #[arg(long)]
        checkpoints: Vec<PathBuf>,
        /// Repeat to compare variants; defaults to the config's variant.
        #[arg(long)]
        variant: Vec<VariantKind>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Report file; defaults to `report_<split>.tsv` beside the first checkpoint directory.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// `all` or a comma-separated list of op names.
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupts each case's backward rule, to check that failures are caught.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Compare variants over several seeds on fresh synthetic cohorts.
    Ablation {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value_t = AblationScale::Desk)]
        scale: AblationScale,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationScale {
    Desk,
    Quick,
}

fn parse_counts(v: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    let [a, b, c] = parts[..] else {
        return Err(format!("expected three comma-separated counts, got {v:?}"));
    };
    let n = |s: &str| s.parse::<usize>().map_err(|_| format!("bad count {s:?}"));
    Ok([n(a)?, n(b)?, n(c)?])
}

fn dims_arg(v: &str) -> std::result::Result<[usize; 3], String> {
    parse_dims(v).map_err(|e| e.to_string())
}

fn parse_stage(v: &str) -> std::result::Result<usize, String> {
    match v {
        "all" => Ok(0),
        "1" | "2" | "3" => Ok(v.parse().expect("digit")),
        _ => Err(format!("expected 1, 2, 3 or all, got {v:?}")),
    }
}

fn synth(out: &Path, seed: u64, counts: Option<[usize; 3]>, dims: [usize; 3], amplitude: Option<f32>) -> Result<()> {
    let mut cfg = SynthConfig {
        dims,
        seed,
        ..SynthConfig::default()
    };
    if let Some(c) = counts {
        cfg = cfg.with_split_totals(c);
    }
    if let Some(a) = amplitude {
        cfg.amplitude = a;
    }
    let res = generate_synthetic_cohort(&cfg, out)?;
    let converters = res.subjects.iter().filter(|s| s.label == 1).count();
    println!(
        "subjects\t{}\tconverters\t{}\tstable\t{}",
        res.subjects.len(),
        converters,
        res.subjects.len() - converters
    );
    println!("manifest\t{}", res.manifest_path.display());
    Ok(())
}

fn train(config: &Path, stage: usize, variant: Option<VariantKind>, workers: Option<usize>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(v) = variant {
        cfg.variant = v;
    }
    if let Some(w) = workers {
        cfg.pipeline.workers = w;
    }
    let manifest = cfg.load_manifest()?;
    let stages = if stage == 0 { vec![1, 2, 3] } else { vec![stage] };
    let summary = run_stage_pipeline(&manifest, cfg.variant, &stages, &cfg.pipeline, &cfg.paths)?;
    for s in &summary.stages {
        println!(
            "stage\t{}\ttrained\t{}\treused\t{}",
            s.stage,
            s.trained.len(),
            s.reused.len()
        );
    }
    let present = summary.checkpoints.iter().filter(|p| p.exists()).count();
    println!("checkpoints\t{present}/{}\t{}", summary.checkpoints.len(), cfg.paths.checkpoints.display());
    Ok(())
}

fn evaluate(
    config: &Path,
    checkpoints: &[PathBuf],
    variants: &[VariantKind],
    split: Split,
    report: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let variants = if variants.is_empty() { vec![cfg.variant] } else { variants.to_vec() };
    let dirs: Vec<PathBuf> = match checkpoints.len() {
        0 => vec![cfg.paths.checkpoints.clone(); variants.len()],
        1 => vec![checkpoints[0].clone(); variants.len()],
        n if n == variants.len() => checkpoints.to_vec(),
        n => {
            return Err(Error::Config(format!(
                "{n} checkpoint directories for {} variants",
                variants.len()
            )))
        }
    };
    let manifest = cfg.load_manifest()?;
    let evals = variants
        .iter()
        .zip(&dirs)
        .map(|(&v, dir)| evaluate_variant(&manifest, v, split, &cfg.pipeline, dir))
        .collect::<Result<Vec<_>>>()?;
    let text = format_report(&evals)?;
    let path = match report {
        Some(p) => p.to_path_buf(),
        None => dirs[0]
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("report_{split}.tsv")),
    };
    fs::write(&path, &text).map_err(|e| Error::Validation(format!("cannot write {}: {e}", path.display())))?;
    for e in &evals {
        let c = e.counts();
        println!(
            "{}\t{split}\tn\t{}\taccuracy\t{:.4}\ttpr\t{:.4}\ttnr\t{:.4}",
            e.variant,
            c.total(),
            c.accuracy(),
            c.tpr(),
            c.tnr()
        );
    }
    println!("report\t{}", path.display());
    Ok(())
}

/// `Ok(false)` when any row fails.
fn gradcheck(ops: &str, trials: usize, seed: u64, inject_fault: bool) -> Result<bool> {
    let cases = parse_cases(ops)?;
    let mut reports = Vec::with_capacity(cases.len() * 2);
    for c in cases {
        let fault = inject_fault.then(|| c.primary_op());
        reports.push(check_case::<f64>(c, trials, seed, fault)?);
        reports.push(check_case::<f32>(c, trials, seed, fault)?);
    }
    print!("{}", format_table(&reports));
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} rows, {failed} failed", reports.len());
    Ok(failed == 0)
}

fn ablation(out: &Path, seeds: Vec<u64>, scale: AblationScale) -> Result<()> {
    let mut cfg = AblationConfig::quick();
    if let AblationScale::Desk = scale {
        cfg.pipeline = PipelineConfig::desk();
    }
    cfg.seeds = seeds;
    let res = run_ablation(&cfg, out)?;
    let table = res.table(&cfg.seeds);
    let path = out.join("ablation.tsv");
    fs::write(&path, &table).map_err(|e| Error::Validation(format!("cannot write {}: {e}", path.display())))?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            counts,
            dims,
            amplitude,
        } => synth(&out, seed, counts, dims, amplitude)?,
        Command::Train {
            config,
            stage,
            variant,
            workers,
        } => train(&config, stage, variant, workers)?,
        Command::Evaluate {
            config,
            checkpoints,
            variant,
            split,
            report,
        } => evaluate(&config, &checkpoints, &variant, split, report.as_deref())?,
        Command::Gradcheck {
            ops,
            trials,
            seed,
            inject_fault,
        } => return gradcheck(&ops, trials, seed, inject_fault),
        Command::Ablation { out, seeds, scale } => ablation(&out, seeds, scale)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let code = match run(cli) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    let _ = std::io::stdout().flush();
    ExitCode::from(code)
}

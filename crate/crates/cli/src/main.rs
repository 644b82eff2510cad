use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use coresleep::data::io::{list_recordings, read_feature_dir, read_recording, write_atomic, write_features, write_recording};
use coresleep::data::{detect_noisy_patients, inject_noise, preprocess, split_patients, synth_patient, SpectralSequence, SplitSpec};
use coresleep::eval::{evaluate, export_hypnogram, mean_std, Condition, EvalReport};
use coresleep::manifest::{dataset_digest, RunManifest};
use coresleep::training::{checkpoint_load, setup_digest, Trainer};
use coresleep::{FusionVariant, Modality, Model, RunConfig};

type Scalar = f32;

const CONFIG_FILE: &str = "config.toml";
const CHECKPOINT_FILE: &str = "checkpoint.crsc";
const MANIFEST_FILE: &str = "manifest.toml";
const NOISE_FILE: &str = "noise.txt";

#[derive(Parser, Debug)]
#[command(name = "coresleep", version, about = "Multimodal sleep staging with cross-modal fusion")]
struct Cli {
    /// Run configuration (TOML). Defaults to `<out>/config.toml` when present, else desk defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Working directory for every input and output.
    #[arg(long, global = true, default_value = "coresleep-out")]
    out: PathBuf,
    /// Number of runs with consecutive seeds; `eval` aggregates them as mean ± std.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    repeat: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic raw dataset under `<out>/raw`.
    Synth(SynthArgs),
    /// Convert raw recordings into the feature cache under `<out>/features`.
    Preprocess,
    /// Train on the feature cache; writes a checkpoint and manifest.
    Train(TrainArgs),
    /// Score a trained checkpoint on the test patients.
    Eval(EvalArgs),
    /// Apply the chunk-STD rule to raw recordings.
    DetectNoise,
    /// Write a per-window prediction table for one patient.
    ExportHypnogram(HypnogramArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Overrides the configured patient count.
    #[arg(long)]
    patients: Option<usize>,
    /// Overrides the configured windows per patient.
    #[arg(long)]
    windows: Option<usize>,
    /// Corrupt the EEG of this many patients.
    #[arg(long, default_value_t = 0)]
    noisy_patients: usize,
    /// Fraction of each corrupted recording replaced by noise.
    #[arg(long, default_value_t = 0.5)]
    noise_fraction: f64,
    /// Noise amplitude relative to the clean signal.
    #[arg(long, default_value_t = 20.0)]
    noise_factor: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Overrides the configured fusion variant (core, midlate, early, unimodal-eeg, unimodal-eog).
    #[arg(long)]
    fusion: Option<FusionVariant>,
    /// Overrides the configured step budget.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Continue from `<run>/checkpoint.crsc`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to score; defaults to `<run>/checkpoint.crsc`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated subset of both, eeg_only, eog_only, noisy_subset.
    #[arg(long, value_delimiter = ',', default_value = "both,eeg_only,eog_only,noisy_subset")]
    conditions: Vec<Condition>,
}

#[derive(Args, Debug)]
struct HypnogramArgs {
    /// Patient id; defaults to the first test patient.
    #[arg(long)]
    patient: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(1)
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    e.chain().map(ToString::to_string).collect::<Vec<_>>().join(": ").replace('\n', " ")
}

fn run(cli: Cli) -> Result<()> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let config = load_config(&cli)?;
    match &cli.command {
        Command::Synth(args) => synth(&cli, config, args),
        Command::Preprocess => preprocess_all(&cli, &config),
        Command::Train(args) => train(&cli, config, args),
        Command::Eval(args) => eval(&cli, config, args),
        Command::DetectNoise => detect_noise(&cli, &config),
        Command::ExportHypnogram(args) => hypnogram(&cli, config, args),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = match &cli.config {
        Some(p) => Some(p.clone()),
        None => Some(cli.out.join(CONFIG_FILE)).filter(|p| p.exists()),
    };
    match path {
        Some(p) => RunConfig::load(&p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::desk()),
    }
}

fn raw_dir(out: &Path) -> PathBuf {
    out.join("raw")
}

fn feature_dir(out: &Path) -> PathBuf {
    out.join("features")
}

/// Directory of the `index`-th repeated run.
fn run_dir(cli: &Cli, index: u64) -> PathBuf {
    if cli.repeat == 1 {
        cli.out.clone()
    } else {
        cli.out.join(format!("run-{index}"))
    }
}

fn base_seed(cli: &Cli, config: &RunConfig) -> u64 {
    cli.seed.unwrap_or(config.training.seed)
}

fn synth(cli: &Cli, mut config: RunConfig, args: &SynthArgs) -> Result<()> {
    if let Some(seed) = cli.seed {
        config.data.synth.seed = seed;
    }
    let patients = args.patients.unwrap_or(config.data.patients);
    let windows = args.windows.unwrap_or(config.data.windows_per_patient);
    if args.noisy_patients > patients {
        bail!("--noisy-patients {} exceeds the {patients} patients", args.noisy_patients);
    }
    let root = raw_dir(&cli.out);
    fs::create_dir_all(&root)?;
    for index in 0..patients {
        let mut rec = synth_patient(&config.data.synth, index, windows)?;
        if index < args.noisy_patients {
            let seed = config.data.synth.seed ^ (index as u64).wrapping_mul(0x9e37_79b9);
            inject_noise(&mut rec, Modality::Eeg, args.noise_fraction, args.noise_factor, seed)?;
        }
        write_recording(&root, &rec)?;
    }
    println!("wrote {patients} recordings of {windows} windows to {}", root.display());
    Ok(())
}

fn preprocess_all(cli: &Cli, config: &RunConfig) -> Result<()> {
    let dirs = list_recordings(&raw_dir(&cli.out)).context("listing raw recordings (run `synth` first?)")?;
    if dirs.is_empty() {
        bail!("no raw recordings under {}", raw_dir(&cli.out).display());
    }
    let dest = feature_dir(&cli.out);
    fs::create_dir_all(&dest)?;
    let (mut kept, mut dropped) = (0, 0);
    for dir in dirs {
        let rec = read_recording(&dir).with_context(|| format!("reading {}", dir.display()))?;
        match preprocess(&rec, &config.data.preprocess)? {
            Some(seq) => {
                write_features(&dest, &seq)?;
                kept += 1;
            }
            None => {
                log::warn!("{}: discarded (missing a sleep stage)", rec.patient);
                dropped += 1;
            }
        }
    }
    println!("wrote {kept} feature files to {} ({dropped} discarded)", dest.display());
    Ok(())
}

fn load_features(cli: &Cli) -> Result<Vec<SpectralSequence>> {
    let dir = feature_dir(&cli.out);
    let seqs = read_feature_dir(&dir).with_context(|| format!("reading features from {} (run `preprocess` first?)", dir.display()))?;
    if seqs.is_empty() {
        bail!("no feature files under {}", dir.display());
    }
    Ok(seqs)
}

fn split_of(seqs: &[SpectralSequence], seed: u64) -> Result<SplitSpec> {
    let ids: Vec<String> = seqs.iter().map(|s| s.patient.clone()).collect();
    Ok(split_patients(&ids, seed)?)
}

fn subset(seqs: &[SpectralSequence], ids: &[String]) -> Vec<SpectralSequence> {
    let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
    seqs.iter().filter(|s| wanted.contains(s.patient.as_str())).cloned().collect()
}

fn train(cli: &Cli, mut config: RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(f) = args.fusion {
        config.model = config.model.with_fusion(f);
    }
    if let Some(n) = args.max_steps {
        config.training.max_steps = n;
    }
    let seqs = load_features(cli)?;
    let base = base_seed(cli, &config);
    for i in 0..cli.repeat {
        let mut cfg = config.clone();
        cfg.training.seed = base + i;
        cfg.validate()?;
        train_one(&cfg, &seqs, &run_dir(cli, i), args.resume)?;
    }
    Ok(())
}

fn train_one(config: &RunConfig, seqs: &[SpectralSequence], dir: &Path, resume: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let seed = config.training.seed;
    let split = split_of(seqs, seed)?;
    let (train_set, val_set) = (subset(seqs, &split.train), subset(seqs, &split.validation));
    let model = Model::<Scalar>::new(config.model.clone(), seed)?;
    let mut trainer = Trainer::new(model, config.loss.clone(), config.training.clone(), &train_set, &val_set)?;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    if resume {
        trainer.resume(&checkpoint).with_context(|| format!("resuming from {}", checkpoint.display()))?;
    }
    let mut manifest = RunManifest::new("train", trainer.digest().to_string(), dataset_digest(seqs), seed);
    manifest.outputs = [CONFIG_FILE, CHECKPOINT_FILE, "train_log.txt", MANIFEST_FILE]
        .iter()
        .map(|f| dir.join(f).display().to_string())
        .collect();
    let hash = manifest.hash();
    let outcome = trainer.run()?;
    trainer.save_checkpoint(&checkpoint)?;

    let mut config_text = format!("# manifest {hash}\n");
    config_text.push_str(&config.to_toml());
    write_atomic(&dir.join(CONFIG_FILE), config_text.as_bytes())?;
    let mut log_text = format!("# manifest {hash}\n# step, loss\n");
    for (i, l) in trainer.state.losses.iter().enumerate() {
        let _ = writeln!(log_text, "{}, {l:.6}", i + 1);
    }
    let _ = writeln!(log_text, "# step, validation accuracy");
    for (s, a) in &trainer.state.validations {
        let _ = writeln!(log_text, "# {s}, {a:.6}");
    }
    write_atomic(&dir.join("train_log.txt"), log_text.as_bytes())?;
    write_atomic(&dir.join(MANIFEST_FILE), manifest.to_toml().as_bytes())?;

    let best = outcome
        .best
        .map_or("no validation".to_string(), |(s, a)| format!("best validation accuracy {:.2}% at step {s}", 100.0 * a));
    println!(
        "{}: {} steps{}, final loss {:.4}, {best}",
        dir.display(),
        outcome.steps,
        if outcome.stopped_early { " (early stop)" } else { "" },
        outcome.final_loss
    );
    Ok(())
}

/// Builds the model described by `config` with the best validated
/// parameters stored in `path`.
fn load_model(config: &RunConfig, path: &Path) -> Result<Model<Scalar>> {
    if !path.exists() {
        bail!("checkpoint {} not found (run `train` first or pass --checkpoint)", path.display());
    }
    let ckpt = checkpoint_load::<Scalar>(path).with_context(|| format!("loading {}", path.display()))?;
    if ckpt.digest != setup_digest(&config.model, &config.loss, &config.training) {
        bail!("checkpoint {} was written with a different configuration", path.display());
    }
    let mut model = Model::<Scalar>::new(config.model.clone(), config.training.seed)?;
    ckpt.restore_params(&mut model.store)?;
    if let Some(best) = ckpt.state.best {
        model.store.set_values(best.params)?;
    }
    Ok(model)
}

/// Run config of a repeated run: its own `config.toml` when present.
fn run_config(cli: &Cli, base: &RunConfig, dir: &Path, index: u64) -> Result<RunConfig> {
    let path = dir.join(CONFIG_FILE);
    if cli.config.is_none() && path.exists() {
        return RunConfig::load(&path).with_context(|| format!("reading config {}", path.display()));
    }
    let mut cfg = base.clone();
    cfg.training.seed = base_seed(cli, base) + index;
    Ok(cfg)
}

fn noisy_patients(cli: &Cli) -> Result<Vec<String>> {
    let path = cli.out.join(NOISE_FILE);
    if !path.exists() {
        log::info!("{} not found; noisy subset is empty", path.display());
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path)?;
    let mut ids = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            bail!("malformed line in {}: `{line}`", path.display());
        }
        if fields[3] == "1" {
            ids.push(fields[0].to_string());
        }
    }
    Ok(ids)
}

fn eval(cli: &Cli, config: RunConfig, args: &EvalArgs) -> Result<()> {
    if args.checkpoint.is_some() && cli.repeat > 1 {
        bail!("--checkpoint cannot be combined with --repeat");
    }
    let seqs = load_features(cli)?;
    let noisy = noisy_patients(cli)?;
    let mut reports = Vec::new();
    for i in 0..cli.repeat {
        let dir = run_dir(cli, i);
        let cfg = run_config(cli, &config, &dir, i)?;
        let path = args.checkpoint.clone().unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
        let model = load_model(&cfg, &path)?;
        let split = split_of(&seqs, cfg.training.seed)?;
        let test = subset(&seqs, &split.test);
        let mut report = evaluate(&model, &test, &args.conditions, &noisy, cfg.training.seq_len)?;
        let mut manifest = RunManifest::new("eval", setup_digest(&cfg.model, &cfg.loss, &cfg.training), dataset_digest(&test), cfg.training.seed);
        manifest.outputs = ["eval.txt", "eval.kv", "eval_manifest.toml"]
            .iter()
            .map(|f| dir.join(f).display().to_string())
            .collect();
        report.manifest = Some(manifest.hash());
        write_atomic(&dir.join("eval.txt"), report.to_text().as_bytes())?;
        write_atomic(&dir.join("eval.kv"), report.to_kv().as_bytes())?;
        write_atomic(&dir.join("eval_manifest.toml"), manifest.to_toml().as_bytes())?;
        print!("{}", report.to_text());
        reports.push(report);
    }
    if reports.len() > 1 {
        let summary = summarize(&reports);
        write_atomic(&cli.out.join("eval_summary.txt"), summary.as_bytes())?;
        print!("{summary}");
    }
    Ok(())
}

/// Mean ± std of each metric across repeated runs.
fn summarize(reports: &[EvalReport]) -> String {
    let mut s = format!("# mean ± std over {} runs\n", reports.len());
    for r0 in &reports[0].conditions {
        let c = r0.condition;
        let matrices: Vec<_> = reports
            .iter()
            .filter_map(|r| r.get(c))
            .filter(|r| !r.is_empty())
            .map(|r| &r.confusion)
            .collect();
        if matrices.is_empty() {
            let _ = writeln!(s, "{c}: no windows");
            continue;
        }
        let stat = |f: &dyn Fn(&coresleep::metrics::ConfusionMatrix) -> f64| {
            let values: Vec<f64> = matrices.iter().map(|m| f(m)).collect();
            mean_std(&values)
        };
        let (acc, acc_sd) = stat(&|m| m.accuracy().unwrap_or(f64::NAN));
        let (kappa, kappa_sd) = stat(&|m| m.cohen_kappa().unwrap_or(f64::NAN));
        let (f1, f1_sd) = stat(&|m| m.macro_f1().unwrap_or(f64::NAN));
        let _ = writeln!(
            s,
            "{c}: accuracy {acc:.2} ± {acc_sd:.2}, kappa {kappa:.3} ± {kappa_sd:.3}, macro-F1 {f1:.2} ± {f1_sd:.2} ({} runs)",
            matrices.len()
        );
    }
    s
}

fn detect_noise(cli: &Cli, config: &RunConfig) -> Result<()> {
    let dirs = list_recordings(&raw_dir(&cli.out)).context("listing raw recordings (run `synth` first?)")?;
    let mut report = coresleep::data::NoiseReport::default();
    for dir in dirs {
        let rec = read_recording(&dir).with_context(|| format!("reading {}", dir.display()))?;
        let one = detect_noisy_patients(std::slice::from_ref(&rec), &config.data.noise)?;
        report.patients.extend(one.patients);
        report.skipped.extend(one.skipped);
    }
    let mut manifest = RunManifest::new("detect-noise", coresleep::config::digest_of(&config.data.noise), String::new(), 0);
    manifest.outputs = vec![cli.out.join(NOISE_FILE).display().to_string()];
    let mut text = format!("# manifest {}\n# patient, flagged_eeg, flagged_eog, selected\n", manifest.hash());
    text.push_str(&report.to_text());
    write_atomic(&cli.out.join(NOISE_FILE), text.as_bytes())?;
    write_atomic(&cli.out.join("noise_manifest.toml"), manifest.to_toml().as_bytes())?;
    println!(
        "{} of {} patients selected ({} skipped)",
        report.selected().len(),
        report.patients.len(),
        report.skipped.len()
    );
    Ok(())
}

fn hypnogram(cli: &Cli, config: RunConfig, args: &HypnogramArgs) -> Result<()> {
    let seqs = load_features(cli)?;
    let dir = run_dir(cli, 0);
    let cfg = run_config(cli, &config, &dir, 0)?;
    let path = args.checkpoint.clone().unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
    let model = load_model(&cfg, &path)?;
    let patient = match &args.patient {
        Some(p) => p.clone(),
        None => split_of(&seqs, cfg.training.seed)?.test[0].clone(),
    };
    let seq = seqs
        .iter()
        .find(|s| s.patient == patient)
        .with_context(|| format!("patient {patient} not in the feature cache"))?;
    let out = cli.out.join(format!("hypnogram-{patient}.txt"));
    let mut manifest = RunManifest::new(
        "export-hypnogram",
        setup_digest(&cfg.model, &cfg.loss, &cfg.training),
        dataset_digest(std::slice::from_ref(seq)),
        cfg.training.seed,
    );
    manifest.outputs = vec![out.display().to_string()];
    let h = export_hypnogram(&model, seq, cfg.training.seq_len, &out, Some(&manifest.hash()))?;
    println!("wrote {} rows to {}", h.truth.len(), out.display());
    Ok(())
}

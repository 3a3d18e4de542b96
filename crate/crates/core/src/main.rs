use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use eqlinker::equivariant::{inject_vn_fault, VnFault};
use eqlinker::evalsuite::{
    equivariance_audit, evaluate, gradient_suite, read_generated, sample_generations,
    training_linker_keys, write_generated, AuditSettings, EvalError, GradSuiteSettings,
    SampleSettings,
};
use eqlinker::molgraph::io::read_samples;
use eqlinker::molgraph::{LinkerSample, MolError, ValenceTable};
use eqlinker::synthdata::{gen_dataset, manifest_path, write_dataset, GenSpec, SynthError};
use eqlinker::tensorcore::TensorError;
use eqlinker::training::{train, Resume, TrainConfig, TrainError, TrainOptions};
use eqlinker::vaemodel::{load_checkpoint, GenStatus, Model, ModelConfig, ModelError};

/// Seed override read when no `--seed` flag is given.
const SEED_ENV: &str = "EQLINKER_SEED";

#[derive(Parser)]
#[command(
    name = "eqlinker",
    version,
    about = "Equivariant linker generation: data, training, sampling and audits"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Deliberately break every Vector-ReLU (self-test of audit and gradcheck).
    #[arg(long, global = true, hide = true, value_enum)]
    inject_fault: Option<FaultArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Equivariance,
    Gradient,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic (fragments, linker) dataset plus manifest.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint and training report.
    Train(TrainArgs),
    /// Draw k generations for every fragment pair.
    Sample(SampleArgs),
    /// Score generated molecules against ground truth.
    Eval(EvalArgs),
    /// Check encoder and generation equivariance under random rigid motions.
    Audit(AuditArgs),
    /// Compare tape gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON generator spec; unknown keys are rejected.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON training config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Training report path (default: `<out>.report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Remove the vector channels and every vector path.
    #[arg(long)]
    ablate_equivariant: bool,
    /// Skip coordinate refinement after each STOP.
    #[arg(long)]
    ablate_coord_update: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file whose fragments (and anchors) are used.
    #[arg(long)]
    fragments: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_linker_nodes: Option<usize>,
    /// Use the recorded anchors instead of predicting them.
    #[arg(long)]
    given_anchors: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Training dataset; its linkers define novelty.
    #[arg(long)]
    train_linkers: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a one-row CSV summary.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    label: String,
    /// JSON with an optional `valence` table.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    transforms: Option<usize>,
    /// Leading samples of the data file to audit.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["ckpt", "random"])))]
struct GradcheckArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Check a freshly initialised compact model.
    #[arg(long)]
    random: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

fn tensor_is_numeric(e: &TensorError) -> bool {
    matches!(
        e,
        TensorError::NumericFault { .. } | TensorError::NonFiniteGradient { .. }
    )
}

fn model_is_numeric(e: &ModelError) -> bool {
    matches!(e, ModelError::Tensor(t) if tensor_is_numeric(t))
}

fn train_is_numeric(e: &TrainError) -> bool {
    match e {
        TrainError::NonFinite { .. } => true,
        TrainError::Batch { source, .. } => train_is_numeric(source),
        TrainError::Tensor(t) => tensor_is_numeric(t),
        TrainError::Model(m) => model_is_numeric(m),
        _ => false,
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if train_is_numeric(&e) {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        if model_is_numeric(&e) {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let numeric = match &e {
            EvalError::Tensor(t) => tensor_is_numeric(t),
            EvalError::Model(m) => model_is_numeric(m),
            EvalError::Train(t) => train_is_numeric(t),
            _ => false,
        };
        if numeric {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<MolError> for CliError {
    fn from(e: MolError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Usage(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

/// Defaults, overlaid by the JSON file when given. Unknown keys fail.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

/// `--seed` wins, then the environment override, then the config value.
fn resolve_seed(config: u64, flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not a u64 seed"))),
        Err(_) => Ok(config),
    }
}

fn echo<T: Serialize>(command: &str, config: &T) {
    let line = serde_json::json!({ "command": command, "resolved_config": config });
    println!("{line}");
}

fn read_dataset(path: &Path) -> Result<Vec<LinkerSample>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(read_samples(BufReader::new(f))?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec: GenSpec = load_config(a.spec.as_deref())?;
    spec.seed = resolve_seed(spec.seed, a.seed)?;
    echo("gen-data", &serde_json::json!({ "n": a.n, "spec": spec }));
    let (samples, manifest) = gen_dataset(a.n, &spec)?;
    write_dataset(&a.out, &samples, &manifest)?;
    println!(
        "wrote {} samples to {} (manifest {})",
        samples.len(),
        a.out.display(),
        manifest_path(&a.out).display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = load_config(a.config.as_deref())?;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.beta = a.beta.unwrap_or(cfg.beta);
    cfg.seed = resolve_seed(cfg.seed, a.seed)?;
    cfg.model.disable_equivariant |= a.ablate_equivariant;
    cfg.model.disable_coord_update |= a.ablate_coord_update;
    cfg.validate()?;
    echo("train", &cfg);
    let data = read_dataset(&a.data)?;
    let resume = match &a.resume {
        Some(p) => {
            let (model, meta) = load_checkpoint(p, Some(&cfg.model))?;
            let r = Resume::from_checkpoint(model, &meta)?;
            println!("resuming after epoch {} at step {}", r.epochs_done, r.step);
            Some(r)
        }
        None => None,
    };
    let opts = TrainOptions {
        checkpoint: Some(&a.out),
        resume,
    };
    let (_, report) = train(&data, &cfg, opts)?;
    let report_path = a
        .report
        .unwrap_or_else(|| with_suffix(&a.out, ".report.json"));
    write_text(
        &report_path,
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    match report.epochs.last() {
        Some(e) => println!(
            "epoch {}: loss {:.6} accuracy {:.4} coord_mse {:.6}; {} steps",
            e.epoch, e.loss, e.accuracy, e.coord_mse, report.steps
        ),
        None => println!("no epochs left to run; {} steps", report.steps),
    }
    println!(
        "checkpoint {}; report {}",
        a.out.display(),
        report_path.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(load_checkpoint(path, None)?.0)
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let mut s: SampleSettings = load_config(a.config.as_deref())?;
    s.k = a.k.unwrap_or(s.k);
    s.max_linker_nodes = a.max_linker_nodes.unwrap_or(s.max_linker_nodes);
    s.given_anchors |= a.given_anchors;
    s.seed = resolve_seed(s.seed, a.seed)?;
    echo("sample", &s);
    let model = load_model(&a.ckpt)?;
    let pairs = read_dataset(&a.fragments)?;
    let records = sample_generations(&model, &pairs, &s)?;
    let f = File::create(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut w = BufWriter::new(f);
    write_generated(&mut w, &records)?;
    w.flush().map_err(|e| io_err(&a.out, e))?;
    let capped = records
        .iter()
        .filter(|r| r.status == GenStatus::BudgetExceeded)
        .count();
    println!(
        "wrote {} generations for {} pairs to {} ({capped} hit the decision cap)",
        records.len(),
        pairs.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalConfig {
    valence: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            valence: ModelConfig::default().valence,
        }
    }
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let cfg: EvalConfig = load_config(a.config.as_deref())?;
    echo("eval", &cfg);
    let table = ValenceTable::new(cfg.valence.clone())?;
    let generated = {
        let f = File::open(&a.generated).map_err(|e| io_err(&a.generated, e))?;
        read_generated(BufReader::new(f))?
    };
    let truth = read_dataset(&a.truth)?;
    let keys = training_linker_keys(&read_dataset(&a.train_linkers)?);
    let report = evaluate(&generated, &truth, &keys, &table)?;
    write_text(&a.out, &(report.to_json() + "\n"))?;
    if let Some(p) = &a.csv {
        write_text(p, &report.to_csv(&a.label))?;
    }
    let rmsd = report.rmsd.map_or("n/a".to_string(), |r| format!("{r:.4}"));
    println!(
        "valid {:.2}% recovered {:.2}% rmsd {rmsd} unique {:.2}% novel {:.2}% over {} samples",
        report.validity, report.recovery, report.uniqueness, report.novelty, report.samples
    );
    Ok(())
}

fn audit_cmd(a: AuditArgs) -> Result<()> {
    let mut s: AuditSettings = load_config(a.config.as_deref())?;
    s.transforms = a.transforms.unwrap_or(s.transforms);
    s.seed = resolve_seed(s.seed, a.seed)?;
    echo(
        "audit",
        &serde_json::json!({ "samples": a.samples, "settings": s }),
    );
    let model = load_model(&a.ckpt)?;
    let mut data = read_dataset(&a.data)?;
    data.truncate(a.samples);
    let report = equivariance_audit(&model, &data, &s)?;
    println!(
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    );
    let breaches = report.breaches();
    if breaches.is_empty() {
        println!(
            "audit passed: {} samples x {} transforms",
            report.samples, report.transforms
        );
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "audit failed: {}; worst offender: {}",
            breaches.join("; "),
            report.worst
        )))
    }
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let mut s: GradSuiteSettings = load_config(a.config.as_deref())?;
    s.seed = resolve_seed(s.seed, a.seed)?;
    let source = match &a.ckpt {
        Some(p) => p.display().to_string(),
        None => "random".to_string(),
    };
    echo(
        "gradcheck",
        &serde_json::json!({ "model": source, "settings": s }),
    );
    let model = match &a.ckpt {
        Some(p) => load_model(p)?,
        None => Model::new(ModelConfig::compact(), s.seed),
    };
    let report = gradient_suite(&model, &s)?;
    for e in &report.entries {
        let verdict = if e.passed() { "ok" } else { "FAIL" };
        println!(
            "{verdict:4} {:<14} max rel err {:.3e} ({} checks, kink margin {:.3e}, draw {})",
            e.name, e.max_rel_err, e.checked, e.kink_margin, e.draws
        );
    }
    if report.passed() {
        return Ok(());
    }
    let worst = report.worst().expect("failed report has entries");
    Err(CliError::Numeric(format!(
        "gradient check failed; worst offender: {} (max rel err {:e})",
        worst.name, worst.max_rel_err
    )))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    if let Some(f) = cli.inject_fault {
        inject_vn_fault(match f {
            FaultArg::Equivariance => VnFault::Equivariance,
            FaultArg::Gradient => VnFault::Gradient,
        });
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Audit(a) => audit_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

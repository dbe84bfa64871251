//! Command-line driver: dataset generation, training, evaluation, the
//! robustness experiment, gradient checks and map export.

mod gradcheck;
mod maps;
mod robustness;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::container::{file_digest, FormatError};
use crate::detect::{
    generate_anchors, log_csv, predict, ModelInfo, TrainConfig, TrainError, Trainer,
};
use crate::metrics::{
    average_precision, mismatch_level, EvalReport, IobbDenominator, Overlap, METRIC_KEYS,
    THRESHOLDS,
};
use crate::nn::{Network, NetworkConfig};
use crate::phantom::{
    generate_sample, read_dataset, split_counts, write_dataset, DatasetHeader, MisalignmentSpec,
    MultiphaseSample, PhantomSpec,
};
use crate::tensor::Checkpoint;

pub use gradcheck::{run_suite, GradcheckRow, GradcheckTable};
pub use maps::{
    export_maps, offsets_csv, read_maps, MapBlock, MapsError, MapsHeader, OffsetSummary,
};
pub use robustness::{run_robustness, RobustnessPlan, TierEntry, TierResult};

pub const TOOL: &str = "phasealign";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Failure(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_)
            | TrainError::Topology(_)
            | TrainError::Model(_)
            | TrainError::Sample { .. } => CliError::Config(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

impl From<MapsError> for CliError {
    fn from(e: MapsError) -> Self {
        CliError::Failure(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "phasealign",
    version,
    about = "Multiphase lesion detection with attention-guided alignment"
)]
pub struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a phantom dataset and split it into train/val/test files.
    Generate {
        #[arg(long)]
        count: Option<usize>,
        /// Misalignment tier in pixels (0 aligned, up to 2 rigid, up to 4 affine, else elastic).
        #[arg(long)]
        tier: Option<f64>,
    },
    /// Train a detector.
    Train {
        /// Dataset file, or a directory holding train.bin.
        #[arg(long)]
        dataset: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file, or a directory holding val.bin.
        #[arg(long)]
        dataset: PathBuf,
        /// Divide IoBB by the ground-truth area instead of the prediction's.
        #[arg(long)]
        iobb_gt: bool,
    },
    /// Train one model per tier and report sensitivity to misalignment.
    Robustness {
        #[arg(long)]
        plan: PathBuf,
        /// Comma-separated rows (e.g. val/IoU50,test/IoBB50) for the average.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
    },
    /// Check analytic against numeric gradients for every op.
    Gradcheck {
        /// Add an op with a wrong-sign gradient to the suite.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Dump attention gate maps and offset fields for the first n samples.
    ExportMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(short = 'n', long, default_value_t = 4)]
        n: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub conf_threshold: f64,
    pub iobb_denominator: IobbDenominator,
    pub batch_size: usize,
    /// Rows averaged in sensitivity reports; all when absent.
    pub sensitivity_metrics: Option<Vec<String>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            conf_threshold: crate::detect::CONF_THRESHOLD,
            iobb_denominator: IobbDenominator::Pred,
            batch_size: 16,
            sensitivity_metrics: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Samples generated before splitting.
    pub count: usize,
    pub phantom: PhantomSpec,
    pub misalignment: MisalignmentSpec,
    pub model: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            count: 100,
            phantom: PhantomSpec::default(),
            misalignment: MisalignmentSpec::none(),
            model: NetworkConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let cfg = |e: String| CliError::Config(e);
        self.phantom.validate().map_err(|e| cfg(e.to_string()))?;
        self.model.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        if self.model.slices != self.phantom.slices {
            return Err(cfg(format!(
                "model expects {} slices, phantom renders {}",
                self.model.slices, self.phantom.slices
            )));
        }
        let n = self.phantom.size;
        generate_anchors(n, n, &self.model.sources).map_err(|e| cfg(e.to_string()))?;
        if !(self.misalignment.magnitude >= 0.0) {
            return Err(cfg("misalignment magnitude must be non-negative".into()));
        }
        if self.eval.batch_size == 0 || !(0.0..=1.0).contains(&self.eval.conf_threshold) {
            return Err(cfg(
                "eval batch_size must be positive and conf_threshold in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Per-sample seeds of a dataset drawn from the run seed.
pub fn sample_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.next_u64()).collect()
}

pub fn generate_samples(
    spec: &PhantomSpec,
    mis: &MisalignmentSpec,
    seeds: &[u64],
) -> CliResult<Vec<MultiphaseSample>> {
    seeds
        .iter()
        .map(|&s| {
            generate_sample(spec, mis, s)
                .map_err(|e| CliError::Failure(format!("sample seed {s}: {e}")))
        })
        .collect()
}

/// Evaluates `samples` with the given model.
pub fn evaluate(
    net: &Network,
    params: &crate::tensor::ParamStore<f32>,
    samples: &[MultiphaseSample],
    eval: &EvalConfig,
    config_digest: &str,
) -> CliResult<(EvalReport, Vec<(String, String)>)> {
    let (h, w) = samples.first().map(|s| s.size()).unwrap_or((0, 0));
    let preds = if samples.is_empty() {
        Vec::new()
    } else {
        let anchors = generate_anchors(h, w, &net.config.sources)
            .map_err(|e| CliError::Config(e.to_string()))?;
        predict(net, params, &anchors, samples, eval.batch_size)?
    };
    let gts: Vec<_> = samples.iter().map(|s| s.gt_boxes.clone()).collect();
    let mut report = EvalReport::compute(&preds, &gts, eval.conf_threshold, eval.iobb_denominator)
        .map_err(|e| CliError::Failure(e.to_string()))?;
    report.mismatch_level =
        mismatch_level(samples).map_err(|e| CliError::Failure(e.to_string()))?;
    report.config_digest = config_digest.to_string();
    let kept: Vec<Vec<_>> = preds
        .iter()
        .map(|p| {
            p.iter()
                .filter(|d| d.score >= eval.conf_threshold)
                .copied()
                .collect()
        })
        .collect();
    let mut curves = Vec::new();
    for overlap in [Overlap::IoU, Overlap::IoBB(eval.iobb_denominator)] {
        for thr in THRESHOLDS {
            let key = format!("{}{}", overlap.label(), (thr * 100.0).round() as u32);
            if let Some(c) = average_precision(&kept, &gts, overlap, thr)
                .map_err(|e| CliError::Failure(e.to_string()))?
            {
                curves.push((format!("pr_{key}.csv"), c.to_csv()));
            }
        }
    }
    debug_assert!(METRIC_KEYS.iter().all(|k| report.ap.contains_key(*k)));
    Ok((report, curves))
}

/// Output directory guard: refuses to overwrite unless forced.
pub struct OutDir {
    pub root: PathBuf,
    force: bool,
    written: BTreeMap<String, String>,
}

impl OutDir {
    pub fn new(root: Option<&Path>, force: bool) -> CliResult<Self> {
        let root = root
            .ok_or_else(|| CliError::Config("--out DIR is required".into()))?
            .to_path_buf();
        std::fs::create_dir_all(&root)
            .map_err(|e| CliError::Failure(format!("{}: {e}", root.display())))?;
        Ok(OutDir {
            root,
            force,
            written: BTreeMap::new(),
        })
    }

    /// Fails if any of `names` exists and overwriting was not requested.
    pub fn claim(&self, names: &[&str]) -> CliResult<()> {
        if self.force {
            return Ok(());
        }
        for n in names {
            let p = self.root.join(n);
            if p.exists() {
                return Err(CliError::Config(format!(
                    "{} exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// Path of `name` under the root; parent directories are created.
    pub fn path(&self, name: &str) -> PathBuf {
        let p = self.root.join(name);
        if let Some(parent) = p.parent() {
            let _ = std::fs::create_dir_all(parent);
        }
        p
    }

    pub fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        std::fs::write(self.path(name), contents)?;
        self.record(name)
    }

    /// Notes a file written by other means.
    pub fn record(&mut self, name: &str) -> CliResult<()> {
        let d = file_digest(&self.path(name))?;
        self.written.insert(name.to_string(), d);
        Ok(())
    }

    /// Writes `config.json` and `run.json` (tool, version, command, input
    /// and output digests).
    pub fn finish(mut self, command: &str, config: &RunConfig, inputs: &[&Path]) -> CliResult<()> {
        self.write("config.json", &config.to_json())?;
        let mut ins = BTreeMap::new();
        for p in inputs {
            ins.insert(p.display().to_string(), file_digest(p)?);
        }
        let run = serde_json::json!({
            "tool": TOOL,
            "version": VERSION,
            "command": command,
            "config_digest": config.digest(),
            "inputs": ins,
            "outputs": self.written,
        });
        let text = serde_json::to_string_pretty(&run).expect("run record") + "\n";
        std::fs::write(self.path("run.json"), text)?;
        Ok(())
    }
}

/// Resolves a dataset argument: a file, or `dir/<default>`.
fn dataset_file(p: &Path, default: &str) -> PathBuf {
    if p.is_dir() {
        p.join(default)
    } else {
        p.to_path_buf()
    }
}

fn load_dataset(p: &Path) -> CliResult<(DatasetHeader, Vec<MultiphaseSample>)> {
    if !p.exists() {
        return Err(CliError::Config(format!(
            "dataset {} not found",
            p.display()
        )));
    }
    read_dataset(p).map_err(|e| CliError::Failure(format!("{}: {e}", p.display())))
}

fn load_model(path: &Path) -> CliResult<(Network, crate::tensor::ParamStore<f32>, ModelInfo)> {
    if !path.exists() {
        return Err(CliError::Config(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    let ckpt = Checkpoint::read(path)?;
    let info: ModelInfo = serde_json::from_value(ckpt.model.clone())
        .map_err(|e| CliError::Config(format!("checkpoint model: {e}")))?;
    let (net, fresh) = Network::build::<f32>(info.network.clone(), info.init_seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    Network::check_topology(&fresh, &ckpt.params).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((net, ckpt.params, info))
}

pub fn cmd_generate(
    cli: &Cli,
    cfg: &RunConfig,
    count: Option<usize>,
    tier: Option<f64>,
) -> CliResult<()> {
    let mut cfg = cfg.clone();
    if let Some(c) = count {
        cfg.count = c;
    }
    if let Some(t) = tier {
        cfg.misalignment = MisalignmentSpec::tier(t);
    }
    cfg.validate()?;
    let mut out = OutDir::new(cli.out.as_deref(), cli.force)?;
    let names = [
        "train.bin",
        "val.bin",
        "test.bin",
        "manifest.json",
        "config.json",
        "run.json",
    ];
    out.claim(&names)?;
    let seeds = sample_seeds(cfg.seed, cfg.count);
    let samples = generate_samples(&cfg.phantom, &cfg.misalignment, &seeds)?;
    let (ntr, nva, _) = split_counts(samples.len());
    let parts = [
        ("train", &samples[..ntr]),
        ("val", &samples[ntr..ntr + nva]),
        ("test", &samples[ntr + nva..]),
    ];
    let mut splits = serde_json::Map::new();
    for (name, part) in parts {
        let file = format!("{name}.bin");
        write_dataset(&out.path(&file), part, &cfg.phantom, name)?;
        out.record(&file)?;
        splits.insert(
            name.into(),
            serde_json::json!({
                "file": file,
                "count": part.len(),
                "digest": out.written[&file],
                "mismatch_level": mismatch_level(part).map_err(|e| CliError::Failure(e.to_string()))?,
            }),
        );
    }
    let manifest = serde_json::json!({
        "tool": TOOL,
        "version": VERSION,
        "seed": cfg.seed,
        "count": samples.len(),
        "misalignment": cfg.misalignment,
        "mismatch_level": mismatch_level(&samples).map_err(|e| CliError::Failure(e.to_string()))?,
        "splits": splits,
    });
    out.write(
        "manifest.json",
        &(serde_json::to_string_pretty(&manifest).expect("manifest") + "\n"),
    )?;
    println!(
        "wrote {} samples ({}/{}/{}) to {}",
        samples.len(),
        ntr,
        nva,
        samples.len() - ntr - nva,
        out.root.display()
    );
    out.finish("generate", &cfg, &[])
}

/// Trains on `samples` and writes checkpoint and log into `out` under `prefix`.
pub(crate) fn train_into(
    out: &mut OutDir,
    prefix: &str,
    cfg: &RunConfig,
    samples: &[MultiphaseSample],
    resume: Option<Checkpoint>,
) -> CliResult<Trainer> {
    let (h, w) = samples
        .first()
        .map(|s| s.size())
        .ok_or_else(|| CliError::Config("training set is empty".into()))?;
    let mut trainer = match resume {
        Some(c) => Trainer::resume(c, cfg.train.clone(), cfg.seed)?,
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), [h, w], cfg.seed)?,
    };
    let start = trainer.step;
    let result = trainer.train(samples);
    if let Err(TrainError::NonFinite { step, .. }) = &result {
        let name = format!("{prefix}nonfinite_step{step}.ckpt");
        trainer.checkpoint().write(&out.path(&name))?;
        log::error!(
            "parameters before the failing step saved to {}",
            out.path(&name).display()
        );
    }
    result?;
    for r in trainer.log_rows() {
        log::debug!(
            "step {} cls {} reg {} lr {}",
            r.step,
            r.loss_cls,
            r.loss_reg,
            r.lr
        );
    }
    log::info!("trained steps {start}..{}", trainer.step);
    let ckpt = format!("{prefix}checkpoint.bin");
    trainer.checkpoint().write(&out.path(&ckpt))?;
    out.record(&ckpt)?;
    out.write(
        &format!("{prefix}train_log.csv"),
        &log_csv(&trainer.log_rows()),
    )?;
    Ok(trainer)
}

pub fn cmd_train(
    cli: &Cli,
    cfg: &RunConfig,
    dataset: &Path,
    resume: Option<&Path>,
) -> CliResult<()> {
    cfg.validate()?;
    let file = dataset_file(dataset, "train.bin");
    let (_, samples) = load_dataset(&file)?;
    let mut out = OutDir::new(cli.out.as_deref(), cli.force)?;
    out.claim(&["checkpoint.bin", "train_log.csv", "config.json", "run.json"])?;
    let ckpt = match resume {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Config(format!(
                    "checkpoint {} not found",
                    p.display()
                )));
            }
            Some(Checkpoint::read(p)?)
        }
        None => None,
    };
    let t = train_into(&mut out, "", cfg, &samples, ckpt)?;
    println!(
        "trained {} steps; checkpoint in {}",
        t.step,
        out.path("checkpoint.bin").display()
    );
    let mut inputs: Vec<&Path> = vec![&file];
    if let Some(p) = resume {
        inputs.push(p);
    }
    out.finish("train", cfg, &inputs)
}

pub fn cmd_eval(
    cli: &Cli,
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    iobb_gt: bool,
) -> CliResult<()> {
    let mut cfg = cfg.clone();
    if iobb_gt {
        cfg.eval.iobb_denominator = IobbDenominator::Gt;
    }
    let (net, params, info) = load_model(checkpoint)?;
    cfg.model = info.network;
    let file = dataset_file(dataset, "val.bin");
    let (_, samples) = load_dataset(&file)?;
    if let Some(s) = samples.first() {
        if s.size() != (info.image_size[0], info.image_size[1]) {
            return Err(CliError::Config(format!(
                "checkpoint expects {:?} images, dataset has {:?}",
                info.image_size,
                s.size()
            )));
        }
    }
    let mut out = OutDir::new(cli.out.as_deref(), cli.force)?;
    out.claim(&["eval.json", "eval.csv", "config.json", "run.json"])?;
    let (report, curves) = evaluate(&net, &params, &samples, &cfg.eval, &cfg.digest())?;
    out.write("eval.json", &report.to_json())?;
    out.write("eval.csv", &report.to_csv())?;
    for (name, text) in curves {
        out.write(&name, &text)?;
    }
    print!("{}", report.to_csv());
    out.finish("eval", &cfg, &[checkpoint, &file])
}

pub fn cmd_gradcheck(cli: &Cli, inject_fault: bool) -> CliResult<()> {
    let table = run_suite(inject_fault);
    println!("{:<28} {:>12}  result", "op", "max_rel_err");
    for r in &table.rows {
        println!(
            "{:<28} {:>12.3e}  {}",
            r.op,
            r.max_rel_error,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    println!(
        "max error {:.3e} in {:.1}s",
        table.max_error(),
        table.seconds
    );
    if let Some(dir) = &cli.out {
        let mut out = OutDir::new(Some(dir), cli.force)?;
        out.claim(&["gradcheck.csv", "config.json", "run.json"])?;
        out.write("gradcheck.csv", &table.to_csv())?;
        out.finish("gradcheck", &RunConfig::default(), &[])?;
    }
    if table.all_pass() {
        Ok(())
    } else {
        Err(CliError::Failure("gradient check failed".into()))
    }
}

pub fn cmd_export_maps(
    cli: &Cli,
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    n: usize,
) -> CliResult<()> {
    let (net, params, info) = load_model(checkpoint)?;
    let mut cfg = cfg.clone();
    cfg.model = info.network;
    let file = dataset_file(dataset, "val.bin");
    let (_, samples) = load_dataset(&file)?;
    if n > samples.len() {
        return Err(CliError::Config(format!(
            "n = {n} exceeds dataset size {}",
            samples.len()
        )));
    }
    let mut out = OutDir::new(cli.out.as_deref(), cli.force)?;
    out.claim(&["maps.bin", "offsets.csv", "config.json", "run.json"])?;
    let summary = export_maps(&net, &params, &samples[..n], &out.path("maps.bin"))?;
    out.record("maps.bin")?;
    out.write("offsets.csv", &offsets_csv(&summary))?;
    println!("exported maps for {n} samples to {}", out.root.display());
    out.finish("export-maps", &cfg, &[checkpoint, &file])
}

/// Dispatches a parsed command line.
pub fn run(cli: &Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Generate { count, tier } => cmd_generate(cli, &cfg, *count, *tier),
        Command::Train { dataset, resume } => cmd_train(cli, &cfg, dataset, resume.as_deref()),
        Command::Eval {
            checkpoint,
            dataset,
            iobb_gt,
        } => cmd_eval(cli, &cfg, checkpoint, dataset, *iobb_gt),
        Command::Robustness { plan, metrics } => {
            robustness::cmd_robustness(cli, &cfg, plan, metrics.clone())
        }
        Command::Gradcheck { inject_fault } => cmd_gradcheck(cli, *inject_fault),
        Command::ExportMaps {
            checkpoint,
            dataset,
            n,
        } => cmd_export_maps(cli, &cfg, checkpoint, dataset, *n),
    }
}

/// Parses `args`, runs, and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

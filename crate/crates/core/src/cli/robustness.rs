//! One model per misalignment tier, evaluated on its own tier, and the
//! sensitivity of each misaligned tier relative to the aligned one.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    dataset_file, evaluate, load_dataset, train_into, Cli, CliError, CliResult, OutDir, RunConfig,
};
use crate::detect::TrainConfig;
use crate::metrics::{EvalReport, SensitivityReport};
use crate::nn::NetworkConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierEntry {
    pub tier: f64,
    /// Directory written by `generate`; relative paths are taken from the
    /// plan file's directory.
    pub dataset: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessPlan {
    pub tiers: Vec<TierEntry>,
    /// Overrides the run config's model.
    #[serde(default)]
    pub model: Option<NetworkConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

impl RobustnessPlan {
    pub fn validate(&self) -> CliResult<()> {
        if !self.tiers.iter().any(|t| t.tier == 0.0) {
            return Err(CliError::Config(
                "robustness plan needs an aligned tier 0".into(),
            ));
        }
        if !self.tiers.iter().any(|t| t.tier > 0.0) {
            return Err(CliError::Config(
                "robustness plan needs at least one misaligned tier".into(),
            ));
        }
        for (i, a) in self.tiers.iter().enumerate() {
            if !(a.tier >= 0.0) || self.tiers[..i].iter().any(|b| b.tier == a.tier) {
                return Err(CliError::Config(format!(
                    "tier {} is negative or repeated",
                    a.tier
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TierResult {
    pub tier: f64,
    pub val: EvalReport,
    pub test: Option<EvalReport>,
}

fn tier_dir(t: f64) -> String {
    format!("tier{t}/")
}

/// Trains and evaluates every tier, writing per-tier outputs under
/// `tier<m>/` and sensitivity reports at the top level.
pub fn run_robustness(
    out: &mut OutDir,
    cfg: &RunConfig,
    plan: &RobustnessPlan,
    base: &Path,
    subset: Option<&[String]>,
) -> CliResult<(Vec<TierResult>, Vec<(f64, SensitivityReport)>, Vec<PathBuf>)> {
    plan.validate()?;
    let mut inputs = Vec::new();
    let mut results = Vec::new();
    for entry in &plan.tiers {
        let dir = base.join(&entry.dataset);
        let prefix = tier_dir(entry.tier);
        let train_file = dataset_file(&dir, "train.bin");
        let val_file = dataset_file(&dir, "val.bin");
        let test_file = dataset_file(&dir, "test.bin");
        let (_, train) = load_dataset(&train_file)?;
        let (_, val) = load_dataset(&val_file)?;
        let test = if test_file.exists() {
            Some(load_dataset(&test_file)?.1)
        } else {
            None
        };
        inputs.extend([train_file, val_file]);
        if test.is_some() {
            inputs.push(test_file);
        }
        log::info!("tier {}: training on {} samples", entry.tier, train.len());
        let trainer = train_into(out, &prefix, cfg, &train, None)?;
        let digest = cfg.digest();
        let (val_report, _) =
            evaluate(&trainer.network, &trainer.params, &val, &cfg.eval, &digest)?;
        out.write(&format!("{prefix}eval_val.json"), &val_report.to_json())?;
        out.write(&format!("{prefix}eval_val.csv"), &val_report.to_csv())?;
        let test_report = match test.filter(|t| !t.is_empty()) {
            Some(t) => {
                let (r, _) = evaluate(&trainer.network, &trainer.params, &t, &cfg.eval, &digest)?;
                out.write(&format!("{prefix}eval_test.json"), &r.to_json())?;
                out.write(&format!("{prefix}eval_test.csv"), &r.to_csv())?;
                Some(r)
            }
            None => None,
        };
        results.push(TierResult {
            tier: entry.tier,
            val: val_report,
            test: test_report,
        });
    }

    let reference = results
        .iter()
        .find(|r| r.tier == 0.0)
        .expect("validated")
        .clone();
    let mut reports = Vec::new();
    let mut summary = String::from("tier,average_sensitivity\n");
    for r in results.iter().filter(|r| r.tier > 0.0) {
        let test = r.test.as_ref().zip(reference.test.as_ref());
        let s = SensitivityReport::from_reports(&r.val, &reference.val, test, subset);
        out.write(&format!("sensitivity_tier{}.json", r.tier), &s.to_json())?;
        out.write(&format!("sensitivity_tier{}.csv", r.tier), &s.to_csv())?;
        summary.push_str(&format!(
            "{},{}\n",
            r.tier,
            s.average.map(|v| v.to_string()).unwrap_or_default()
        ));
        reports.push((r.tier, s));
    }
    out.write("sensitivity.csv", &summary)?;
    Ok((results, reports, inputs))
}

pub(super) fn cmd_robustness(
    cli: &Cli,
    cfg: &RunConfig,
    plan_path: &Path,
    metrics: Option<Vec<String>>,
) -> CliResult<()> {
    let text = std::fs::read_to_string(plan_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", plan_path.display())))?;
    let plan: RobustnessPlan = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", plan_path.display())))?;
    plan.validate()?;
    let mut cfg = cfg.clone();
    if let Some(m) = &plan.model {
        cfg.model = m.clone();
    }
    if let Some(t) = &plan.train {
        cfg.train = t.clone();
    }
    if metrics.is_some() {
        cfg.eval.sensitivity_metrics = metrics;
    }
    cfg.model
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    cfg.train
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let base = plan_path.parent().unwrap_or(Path::new("."));
    for t in &plan.tiers {
        let d = base.join(&t.dataset);
        if !dataset_file(&d, "train.bin").exists() || !dataset_file(&d, "val.bin").exists() {
            return Err(CliError::Config(format!(
                "tier {}: dataset {} missing train.bin or val.bin",
                t.tier,
                d.display()
            )));
        }
    }
    let mut out = OutDir::new(cli.out.as_deref(), cli.force)?;
    out.claim(&["sensitivity.csv", "config.json", "run.json"])?;
    let subset = cfg.eval.sensitivity_metrics.clone();
    let (_, reports, inputs) = run_robustness(&mut out, &cfg, &plan, base, subset.as_deref())?;
    println!("tier,average_sensitivity");
    for (t, s) in &reports {
        println!(
            "{t},{}",
            s.average.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    let mut all: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    all.push(plan_path);
    out.finish("robustness", &cfg, &all)
}

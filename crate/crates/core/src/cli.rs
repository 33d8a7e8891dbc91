//! The `cqgen` command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::denoiser::DenoiserModel;
use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_series, MetricReport};
use crate::persistence::{
    load_checkpoint, read_dataset, read_samples, sample_rows, save_checkpoint, write_dataset, write_samples,
};
use crate::propagation::Aoi;
use crate::scenario::{DatasetRecord, TargetSeries};
use crate::training::{
    evaluate, few_shot_protocol, generate, run_plan, split_by_user, Evaluation, FewShotReport, FewShotSetup,
    PlanReport, ShotMode,
};

#[derive(Debug, Parser)]
#[command(name = "cqgen", version, about = "Synthesize cellular channel-quality data and train a conditional diffusion generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment configuration (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a dataset from the configured scenarios.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset; writes a checkpoint and `<out>.report.json`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw generated series for every record of a dataset into a CSV file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        /// Defaults to the seed stored in the checkpoint.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a sample CSV; optionally writes the metrics as JSON.
    Eval {
        /// Sample file written by `sample`.
        #[arg(long)]
        data: PathBuf,
        /// Supplies `eval.bins`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero- or few-shot transfer to the configured target AOI.
    Fewshot {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset to use; synthesized from the configuration when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        mode: Option<ShotMode>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

/// The seed used to carve the scoring split off a training dataset; kept
/// apart from the validation split's stream.
pub fn test_split_seed(seed: u64) -> u64 {
    seed ^ 0x7e57_0000_0000
}

/// Resolved configuration as a key → value map, for JSON artifacts.
pub fn config_echo(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    cfg.to_text()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(e.to_string()))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text + "\n").map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn report_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".report.json");
    checkpoint.with_file_name(name)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => gen_data(&cfg.resolve()?, &out),
        Command::Train { cfg, data, out } => train(&cfg.resolve()?, &data, &out).map(|_| ()),
        Command::Sample {
            checkpoint,
            data,
            out,
            samples,
            seed,
        } => sample(&checkpoint, &data, &out, samples, seed),
        Command::Eval { data, config, out } => {
            let bins = match config {
                Some(p) => ExperimentConfig::load(&p)?.eval.bins,
                None => crate::metrics::DEFAULT_BINS,
            };
            let report = eval(&data, bins)?;
            print!("{}", report.to_table());
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
            Ok(())
        }
        Command::Fewshot {
            cfg,
            data,
            mode,
            fraction,
            out,
        } => {
            let mut config = cfg.resolve()?;
            if let Some(m) = mode {
                config.fewshot.mode = m;
            }
            if let Some(f) = fraction {
                config.fewshot.fraction = f;
            }
            config.validate()?;
            let records = match data {
                Some(p) => read_dataset(&p)?,
                None => config.build_dataset()?,
            };
            let report = fewshot(&config, &records)?;
            print!("{}", fewshot_table(&report));
            if let Some(out) = out {
                write_json(
                    &out,
                    &serde_json::json!({
                        "seed": config.seed,
                        "config": config_echo(&config),
                        "report": report,
                    }),
                )?;
            }
            Ok(())
        }
    }
}

pub fn aoi_breakdown(records: &[DatasetRecord]) -> BTreeMap<Aoi, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.aoi()).or_insert(0) += 1;
    }
    m
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let records = cfg.build_dataset()?;
    write_dataset(out, &records, &cfg.to_text())?;
    let parts: Vec<String> = aoi_breakdown(&records).iter().map(|(a, n)| format!("{a} {n}")).collect();
    println!("{} records ({}) -> {}", records.len(), parts.join(", "), out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub train_records: usize,
    pub validation_records: usize,
    pub test_records: usize,
    pub plan: PlanReport,
    pub evaluation: Evaluation,
    /// Largest metric difference after reloading the saved checkpoint.
    pub reload_metric_delta: f64,
}

/// A trained model with its held-out evaluation.
#[derive(Debug, Clone)]
pub struct Fit {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub plan: PlanReport,
    pub evaluation: Evaluation,
    pub train: Vec<DatasetRecord>,
    pub validation: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

/// Holds out `eval.test_fraction` of the users, trains on the rest and
/// scores the held-out users — the in-memory core of `train`.
pub fn fit(cfg: &ExperimentConfig, records: &[DatasetRecord]) -> Result<Fit> {
    cfg.validate()?;
    let plan = cfg.plan()?;
    let (pool, test) = split_by_user(records, cfg.eval.test_fraction, test_split_seed(cfg.seed))?;
    let (train, validation) = split_by_user(&pool, cfg.train.validation_fraction, cfg.seed)?;
    let schedule = make_schedule(&cfg.schedule)?;
    let (model, plan) = run_plan(&train, &validation, &plan, &cfg.model, &schedule, &cfg.train)?;
    let (evaluation, _) = evaluate(&model, &schedule, &test, cfg.eval.samples, cfg.eval.bins, cfg.seed)?;
    Ok(Fit {
        model,
        schedule,
        plan,
        evaluation,
        train,
        validation,
        test,
    })
}

pub fn train(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<TrainReport> {
    let records = read_dataset(data)?;
    let Fit {
        model,
        schedule,
        plan: plan_report,
        evaluation,
        train: train_set,
        validation: val,
        test,
    } = fit(cfg, &records)?;
    save_checkpoint(out, &model, &schedule, serde_json::to_value(config_echo(cfg)).unwrap(), cfg.seed)?;
    let reloaded = load_checkpoint(out)?;
    let (again, _) = evaluate(
        &reloaded.model,
        &reloaded.schedule,
        &test,
        cfg.eval.samples,
        cfg.eval.bins,
        cfg.seed,
    )?;
    let reload_metric_delta = evaluation
        .metrics
        .rows
        .iter()
        .zip(&again.metrics.rows)
        .flat_map(|(a, b)| [(a.jsd - b.jsd).abs(), (a.tv - b.tv).abs(), (a.nrmse - b.nrmse).abs()])
        .fold(0.0, f64::max);
    if reload_metric_delta > 1e-6 {
        return Err(Error::Numeric(format!(
            "metrics moved by {reload_metric_delta} after a checkpoint round trip"
        )));
    }
    let report = TrainReport {
        seed: cfg.seed,
        config: config_echo(cfg),
        train_records: train_set.len(),
        validation_records: val.len(),
        test_records: test.len(),
        plan: plan_report,
        evaluation,
        reload_metric_delta,
    };
    write_json(&report_path(out), &report)?;
    for s in &report.plan.stages {
        println!(
            "{:?}: {} epochs, best validation loss {:.5} at epoch {}",
            s.kind,
            s.epochs.len(),
            s.best_val_loss,
            s.best_epoch
        );
    }
    print!("{}", report.evaluation.metrics.to_table());
    println!(
        "mean-predictor RSRP NRMSE {:.4}; checkpoint -> {}",
        report.evaluation.baseline_rsrp_nrmse,
        out.display()
    );
    Ok(report)
}

pub fn sample(checkpoint: &Path, data: &Path, out: &Path, n_samples: usize, seed: Option<u64>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let records = read_dataset(data)?;
    let seed = seed.unwrap_or(ck.header.seed);
    let generated = generate(&ck.model, &ck.schedule, &records, n_samples, seed)?;
    let real: Vec<TargetSeries> = records.iter().map(|r| r.real.clone()).collect();
    let mut comments = format!(
        "checkpoint = {}\ndata = {}\nsamples = {n_samples}\nsample_seed = {seed}\n",
        checkpoint.display(),
        data.display()
    );
    if let Some(obj) = ck.header.train.as_object() {
        for (k, v) in obj {
            comments.push_str(&format!("{k} = {}\n", v.as_str().map_or_else(|| v.to_string(), str::to_string)));
        }
    }
    let rows = sample_rows(&real, &generated);
    write_samples(out, &rows, &comments)?;
    println!("{} rows ({} records x {n_samples} samples) -> {}", rows.len(), records.len(), out.display());
    Ok(())
}

pub fn eval(samples: &Path, bins: usize) -> Result<MetricReport> {
    let (real, generated) = read_samples(samples)?;
    evaluate_series(&real, &generated, bins)
}

pub fn fewshot(cfg: &ExperimentConfig, records: &[DatasetRecord]) -> Result<FewShotReport> {
    let setup = FewShotSetup {
        target: cfg.fewshot.target,
        mode: cfg.fewshot.mode,
        fraction: cfg.fewshot.fraction,
        n_samples: cfg.eval.samples,
        bins: cfg.eval.bins,
    };
    few_shot_protocol(records, &setup, &cfg.plan()?, &cfg.model, &cfg.schedule, &cfg.train)
}

pub fn fewshot_table(r: &FewShotReport) -> String {
    let shot = match r.mode {
        ShotMode::Zero => "zero-shot".to_string(),
        ShotMode::Few => format!("{}% few-shot", r.fraction * 100.0),
    };
    let mut out = format!(
        "target {} | {shot} | plan {} (gamma {}, delta {}) | {} fine-tune / {} eval records\n",
        r.target, r.plan, r.gamma, r.delta, r.fine_tune_records, r.eval_records
    );
    out.push_str(&r.evaluation.metrics.to_table());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_sits_next_to_checkpoint() {
        assert_eq!(report_path(Path::new("runs/m.ckpt")), PathBuf::from("runs/m.ckpt.report.json"));
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from(["cqgen", "fewshot", "--mode", "zero", "--fraction", "0.02", "--seed", "3"]).unwrap();
        match cli.command {
            Command::Fewshot { cfg, mode, fraction, .. } => {
                assert_eq!(cfg.seed, Some(3));
                assert_eq!(mode, Some(ShotMode::Zero));
                assert_eq!(fraction, Some(0.02));
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["cqgen", "fewshot", "--mode", "some"]).is_err());
    }

    #[test]
    fn echo_covers_every_key() {
        let cfg = ExperimentConfig::default();
        let echo = config_echo(&cfg);
        assert_eq!(echo.len(), cfg.to_text().lines().count());
        assert_eq!(echo["plan.stages"], "T1S4");
    }
}

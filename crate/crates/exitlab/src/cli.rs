//! Command-line commands: generate data, train, sweep thresholds,
//! compare policies at target speed-ups, diagnose exit indicators, and
//! evaluate prototype adjustment under distribution shift.
//!
//! Every command resolves one `ExperimentConfig` (file, then flag
//! overrides), refuses to clobber existing artifacts unless
//! `--overwrite` is set, and writes `config_echo_<command>.json` with a
//! content hash next to its outputs, so stages sharing one output
//! directory each keep their provenance. Computation happens before any
//! artifact is written, so a failed run leaves no partial files behind.

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::config::{
    load_config, write_config_echo, ConfigError, DataSource, ExperimentConfig, PolicyTemplate,
};
use crate::data::{generate, load_dataset, save_dataset, DataError, Splits};
use crate::exiting::{ExitError, ExitPolicy};
use crate::harness::{
    correctness_estimation, evaluate_policy, match_speedup, spearman_homogeneity, sweep,
    HarnessError, PolicyEval, SweepResult,
};
use crate::model::{Model, ModelConfig, ModelError};
use crate::prototypes::{adjust_prototypes_kmeans, ProtoError};
use crate::svg::{BarChart, LineChart, Marker, Series};
use crate::training::{accuracy, TrainError, TrainOutcome, TrainReport, Trainer};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("output directory {0} does not exist (pass --create-dirs to create it)")]
    MissingOutDir(PathBuf),
    #[error("{0} already exists (pass --overwrite to replace it)")]
    Exists(PathBuf),
    #[error("checkpoint {0} does not exist")]
    MissingCheckpoint(PathBuf),
    #[error("checkpoint model shape conflicts with the configured model: {0}")]
    ShapeConflict(String),
    #[error("diagnose layer {layer} is out of range; prototypes stop at layer {max}")]
    BadDiagnoseLayer { layer: usize, max: usize },
    #[error("no threshold policy in config: {0}")]
    NoThresholdPolicy(&'static str),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("train: {0}")]
    Train(#[from] TrainError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("prototypes: {0}")]
    Proto(#[from] ProtoError),
    #[error("harness: {0}")]
    Harness(#[from] HarnessError),
    #[error("exit policy: {0}")]
    Exit(#[from] ExitError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialize: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Parser)]
#[command(name = "exitlab", about = "Early-exit inference experiments", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config file (JSON); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override every seed in the config
    #[arg(long)]
    seed: Option<u64>,
    /// Replace artifacts that already exist
    #[arg(long)]
    overwrite: bool,
    /// Create the output directory when missing
    #[arg(long)]
    create_dirs: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate dataset splits as JSONL files
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes best/final checkpoints and reports
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from an existing checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sweep thresholds for every policy; writes CSVs and SVG figures
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Tabulate accuracy at matched target speed-ups
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target speed-ups, overriding the config list
        #[arg(long = "target")]
        targets: Vec<f64>,
    },
    /// Score correctness estimation and indicator correlation
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint trained without the prototype regularizer
        #[arg(long)]
        checkpoint_no_proto: Option<PathBuf>,
    },
    /// Evaluate prototype adjustment on a shifted test split
    Shift {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report only the unadjusted condition
        #[arg(long)]
        no_adjust: bool,
    },
}

/// Parse the process arguments and run the selected command.
pub fn run_from_args() -> Result<(), CliError> {
    run(Cli::parse())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common } => cmd_gen(&common),
        Command::Train { common, resume } => cmd_train(&common, resume.as_deref()),
        Command::Sweep { common, checkpoint } => cmd_sweep(&common, &checkpoint),
        Command::Compare { common, checkpoint, targets } => {
            cmd_compare(&common, &checkpoint, &targets)
        }
        Command::Diagnose { common, checkpoint, checkpoint_no_proto } => {
            cmd_diagnose(&common, &checkpoint, checkpoint_no_proto.as_deref())
        }
        Command::Shift { common, checkpoint, no_adjust } => {
            cmd_shift(&common, &checkpoint, no_adjust)
        }
    }
}

/// Config from file plus flag overrides, validated, with the output
/// directory ready.
fn resolve(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut config = match &common.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        config.override_seed(seed);
    }
    config.validate()?;
    let out_dir = config.out_dir.clone();
    if !out_dir.is_dir() {
        if common.create_dirs {
            fs::create_dir_all(&out_dir)?;
        } else {
            return Err(CliError::MissingOutDir(out_dir));
        }
    }
    Ok((config, out_dir))
}

/// Refuse to overwrite any existing artifact unless asked to.
fn guard_artifacts(paths: &[PathBuf], overwrite: bool) -> Result<(), CliError> {
    if overwrite {
        return Ok(());
    }
    for path in paths {
        if path.exists() {
            return Err(CliError::Exists(path.clone()));
        }
    }
    Ok(())
}

fn load_splits(config: &ExperimentConfig) -> Result<Splits, CliError> {
    match &config.data {
        DataSource::Spec(spec) => Ok(generate(spec)?),
        DataSource::Dir(dir) => Ok(Splits {
            train: load_dataset(&dir.join("train.jsonl"))?,
            dev: load_dataset(&dir.join("dev.jsonl"))?,
            test: load_dataset(&dir.join("test.jsonl"))?,
        }),
    }
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::MissingCheckpoint(path.to_path_buf()));
    }
    Ok(load_checkpoint(path)?)
}

/// Everything but the seed must agree for a checkpoint to continue
/// under a config.
fn same_shape(a: &ModelConfig, b: &ModelConfig) -> bool {
    let mut a = a.clone();
    a.seed = b.seed;
    a == *b
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn cmd_gen(common: &Common) -> Result<(), CliError> {
    let (config, out_dir) = resolve(common)?;
    let paths = [
        out_dir.join("train.jsonl"),
        out_dir.join("dev.jsonl"),
        out_dir.join("test.jsonl"),
        out_dir.join("config_echo_gen.json"),
    ];
    guard_artifacts(&paths, common.overwrite)?;
    let splits = load_splits(&config)?;
    save_dataset(&splits.train, &paths[0])?;
    save_dataset(&splits.dev, &paths[1])?;
    save_dataset(&splits.test, &paths[2])?;
    let hash = write_config_echo(&config, &out_dir, "gen")?;
    println!(
        "wrote {} train / {} dev / {} test samples to {} (config {})",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        out_dir.display(),
        &hash[..12]
    );
    Ok(())
}

fn cmd_train(common: &Common, resume: Option<&Path>) -> Result<(), CliError> {
    let (config, out_dir) = resolve(common)?;
    let paths = [
        out_dir.join("best.ckpt"),
        out_dir.join("final.ckpt"),
        out_dir.join("train_report.csv"),
        out_dir.join("train_report.json"),
        out_dir.join("config_echo_train.json"),
    ];
    guard_artifacts(&paths, common.overwrite)?;
    let splits = load_splits(&config)?;

    let (model, bank, start_step) = match resume {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            if !same_shape(&ckpt.model.config, &config.model) {
                return Err(CliError::ShapeConflict(format!(
                    "checkpoint {:?} vs config {:?}",
                    ckpt.model.config, config.model
                )));
            }
            (ckpt.model, ckpt.bank, ckpt.step as usize)
        }
        None => {
            let model = Model::new(config.model.clone())?;
            let bank = model.config.new_bank(config.train.dar.gamma)?;
            (model, bank, 0)
        }
    };

    let outcome = if start_step >= config.train.total_steps {
        let dev_acc = accuracy(&model, &splits.dev.to_labeled())?;
        TrainOutcome {
            best_model: model.clone(),
            best_bank: bank.clone(),
            model,
            bank,
            report: TrainReport {
                records: Vec::new(),
                best_step: start_step,
                best_dev_accuracy: dev_acc,
                final_dev_accuracy: dev_acc,
            },
        }
    } else {
        let mut trainer = Trainer::new(
            model,
            bank,
            config.train.clone(),
            splits.train.to_labeled(),
            splits.dev.to_labeled(),
        )?
        .starting_at(start_step);
        trainer.run()?;
        trainer.into_outcome()
    };

    save_checkpoint(
        &paths[0],
        &Checkpoint {
            step: outcome.report.best_step as u64,
            model: outcome.best_model.clone(),
            bank: outcome.best_bank.clone(),
        },
    )?;
    save_checkpoint(
        &paths[1],
        &Checkpoint {
            step: config.train.total_steps.max(start_step) as u64,
            model: outcome.model.clone(),
            bank: outcome.bank.clone(),
        },
    )?;
    let mut csv = BufWriter::new(File::create(&paths[2])?);
    outcome.report.write_csv(&mut csv)?;
    csv.flush()?;
    write_json(&paths[3], &outcome.report)?;
    let hash = write_config_echo(&config, &out_dir, "train")?;
    println!("{} (config {})", outcome.report.summary(), &hash[..12]);
    Ok(())
}

fn tau_label(tau: f64) -> String {
    format!("{tau}")
}

fn cmd_sweep(common: &Common, checkpoint: &Path) -> Result<(), CliError> {
    let (config, out_dir) = resolve(common)?;
    let ckpt = read_checkpoint(checkpoint)?;
    let mut paths: Vec<PathBuf> = config
        .policies
        .iter()
        .map(|p| out_dir.join(format!("sweep_{}.csv", p.name())))
        .collect();
    paths.push(out_dir.join("tradeoff.svg"));
    let hist_template = config.policies.iter().find(|p| !p.threshold_free());
    if hist_template.is_some() {
        for tau in config.hist_taus {
            paths.push(out_dir.join(format!("exit_hist_tau_{}.svg", tau_label(tau))));
        }
    }
    paths.push(out_dir.join("config_echo_sweep.json"));
    guard_artifacts(&paths, common.overwrite)?;

    let splits = load_splits(&config)?;
    let test = splits.test.to_labeled();

    let mut series = Vec::new();
    let mut markers = Vec::new();
    let mut csv_jobs: Vec<(PathBuf, String)> = Vec::new();
    for (template, path) in config.policies.iter().zip(&paths) {
        if template.threshold_free() {
            let eval = evaluate_policy(&ckpt.model, &ckpt.bank, &template.instantiate(0.0), &test)?;
            csv_jobs.push((path.clone(), threshold_free_csv(&eval)));
            markers.push(Marker { name: template.name(), x: eval.speedup, y: eval.accuracy });
        } else {
            let result = sweep(&ckpt.model, &ckpt.bank, &test, &config.taus, |tau| {
                template.instantiate(tau)
            })?;
            let mut buf = Vec::new();
            result.write_csv(&mut buf)?;
            csv_jobs.push((path.clone(), String::from_utf8(buf).expect("csv is utf8")));
            series.push(Series {
                name: template.name(),
                points: result.rows.iter().map(|r| (r.eval.speedup, r.eval.accuracy)).collect(),
            });
        }
    }

    let mut histograms = Vec::new();
    if let Some(template) = hist_template {
        for tau in config.hist_taus {
            let eval = evaluate_policy(&ckpt.model, &ckpt.bank, &template.instantiate(tau), &test)?;
            histograms.push((tau, template.name(), eval.exit_histogram));
        }
    } else {
        println!("no threshold policy configured; exit-layer histograms skipped");
    }

    for (path, text) in csv_jobs {
        fs::write(path, text)?;
    }
    let hash = write_config_echo(&config, &out_dir, "sweep")?;
    let footnote = format!("config {}", &hash[..12]);
    let chart = LineChart {
        title: "accuracy vs speed-up".into(),
        x_label: "speed-up".into(),
        y_label: "accuracy".into(),
        footnote: footnote.clone(),
        series,
        markers,
    };
    fs::write(out_dir.join("tradeoff.svg"), chart.render())?;
    for (tau, name, hist) in histograms {
        let chart = BarChart {
            title: format!("exit layers for {name} at tau {}", tau_label(tau)),
            x_label: "layer".into(),
            y_label: "samples".into(),
            footnote: footnote.clone(),
            bars: hist
                .iter()
                .enumerate()
                .map(|(i, &n)| ((i + 1).to_string(), n as f64))
                .collect(),
        };
        fs::write(out_dir.join(format!("exit_hist_tau_{}.svg", tau_label(tau))), chart.render())?;
    }
    println!(
        "swept {} policies over {} thresholds into {} (config {})",
        config.policies.len(),
        config.taus.len(),
        out_dir.display(),
        &hash[..12]
    );
    Ok(())
}

/// Single-row CSV for a policy that has no threshold to sweep.
fn threshold_free_csv(eval: &PolicyEval) -> String {
    let mut text = String::from("tau,samples,accuracy,mean_exit_layer,speedup,executed_layers_total,flops_total");
    for layer in 1..=eval.exit_histogram.len() {
        text.push_str(&format!(",exit_{layer}"));
    }
    text.push('\n');
    text.push_str(&format!(
        ",{},{},{},{},{},{}",
        eval.samples,
        eval.accuracy,
        eval.mean_exit_layer,
        eval.speedup,
        eval.executed_layers_total,
        eval.flops_total
    ));
    for count in &eval.exit_histogram {
        text.push_str(&format!(",{count}"));
    }
    text.push('\n');
    text
}

#[derive(Debug, Clone, Serialize)]
struct CompareRow {
    policy: String,
    target_speedup: f64,
    status: String,
    tau: Option<f64>,
    accuracy: Option<f64>,
    speedup: Option<f64>,
}

fn cmd_compare(common: &Common, checkpoint: &Path, targets: &[f64]) -> Result<(), CliError> {
    let (config, out_dir) = resolve(common)?;
    let ckpt = read_checkpoint(checkpoint)?;
    let paths = [
        out_dir.join("comparison.csv"),
        out_dir.join("comparison.json"),
        out_dir.join("config_echo_compare.json"),
    ];
    guard_artifacts(&paths, common.overwrite)?;
    let targets = if targets.is_empty() { config.target_speedups.clone() } else { targets.to_vec() };

    let splits = load_splits(&config)?;
    let test = splits.test.to_labeled();

    let mut rows = Vec::new();
    for template in &config.policies {
        if template.threshold_free() {
            let eval = evaluate_policy(&ckpt.model, &ckpt.bank, &template.instantiate(0.0), &test)?;
            for &target in &targets {
                let matched = (eval.speedup - target).abs() <= config.speedup_tolerance;
                rows.push(CompareRow {
                    policy: template.name(),
                    target_speedup: target,
                    status: if matched { "matched" } else { "unavailable" }.into(),
                    tau: None,
                    accuracy: matched.then_some(eval.accuracy),
                    speedup: matched.then_some(eval.speedup),
                });
            }
        } else {
            let result = sweep(&ckpt.model, &ckpt.bank, &test, &config.taus, |tau| {
                template.instantiate(tau)
            })?;
            for &target in &targets {
                match match_speedup(&result, target, config.speedup_tolerance) {
                    Ok(row) => rows.push(CompareRow {
                        policy: template.name(),
                        target_speedup: target,
                        status: "matched".into(),
                        tau: Some(row.tau),
                        accuracy: Some(row.eval.accuracy),
                        speedup: Some(row.eval.speedup),
                    }),
                    Err(HarnessError::NoMatch { .. }) => rows.push(CompareRow {
                        policy: template.name(),
                        target_speedup: target,
                        status: "unavailable".into(),
                        tau: None,
                        accuracy: None,
                        speedup: None,
                    }),
                    Err(err) => return Err(err.into()),
                }
            }
        }
    }

    let mut csv = String::from("policy,target_speedup,status,tau,accuracy,speedup\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.policy,
            row.target_speedup,
            row.status,
            cell(row.tau),
            cell(row.accuracy),
            cell(row.speedup),
        ));
    }
    fs::write(&paths[0], csv)?;
    write_json(&paths[1], &rows)?;
    let hash = write_config_echo(&config, &out_dir, "compare")?;
    let matched = rows.iter().filter(|r| r.status == "matched").count();
    println!(
        "compared {} policy/target pairs, {} matched, into {} (config {})",
        rows.len(),
        matched,
        out_dir.display(),
        &hash[..12]
    );
    Ok(())
}

fn cmd_diagnose(
    common: &Common,
    checkpoint: &Path,
    checkpoint_no_proto: Option<&Path>,
) -> Result<(), CliError> {
    let (config, out_dir) = resolve(common)?;
    let ckpt = read_checkpoint(checkpoint)?;
    let plain = checkpoint_no_proto.map(read_checkpoint).transpose()?;
    let max_layer = ckpt.model.config.layers.saturating_sub(1);
    for &layer in &config.diagnose_layers {
        if layer == 0 || layer > max_layer {
            return Err(CliError::BadDiagnoseLayer { layer, max: max_layer });
        }
    }
    let mut paths = vec![out_dir.join("correctness.csv")];
    if plain.is_some() {
        paths.push(out_dir.join("spearman.csv"));
    }
    paths.push(out_dir.join("config_echo_diagnose.json"));
    guard_artifacts(&paths, common.overwrite)?;

    let splits = load_splits(&config)?;
    let test = splits.test.to_labeled();

    let mut correctness = String::from("layer,tau,samples,entropy_accuracy,edr_accuracy\n");
    for &layer in &config.diagnose_layers {
        for &tau in &config.diagnose_taus {
            let est = correctness_estimation(
                &ckpt.model,
                &ckpt.bank,
                &test,
                layer,
                tau,
                config.diagnose_lambda,
            )?;
            correctness.push_str(&format!(
                "{layer},{tau},{},{},{}\n",
                est.samples, est.entropy, est.edr
            ));
        }
    }

    let mut spearman_csv = None;
    if let Some(plain) = &plain {
        let mut text = String::from("layer,with_prototypes,without_prototypes\n");
        for &layer in &config.diagnose_layers {
            let (with_pn, without_pn) = spearman_homogeneity(
                (&ckpt.model, &ckpt.bank),
                (&plain.model, &plain.bank),
                &test,
                layer,
            )?;
            let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "constant".into());
            text.push_str(&format!("{layer},{},{}\n", cell(with_pn), cell(without_pn)));
        }
        spearman_csv = Some(text);
    }

    fs::write(&paths[0], correctness)?;
    if let Some(text) = spearman_csv {
        fs::write(out_dir.join("spearman.csv"), text)?;
    } else {
        println!("no plain checkpoint supplied; correlation section omitted");
    }
    let hash = write_config_echo(&config, &out_dir, "diagnose")?;
    println!(
        "diagnosed {} layer/threshold pairs into {} (config {})",
        config.diagnose_layers.len() * config.diagnose_taus.len(),
        out_dir.display(),
        &hash[..12]
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct ShiftRow {
    condition: String,
    tau: f64,
    accuracy: f64,
    speedup: f64,
    mean_exit_layer: f64,
}

fn cmd_shift(common: &Common, checkpoint: &Path, no_adjust: bool) -> Result<(), CliError> {
    let (config, out_dir) = resolve(common)?;
    let ckpt = read_checkpoint(checkpoint)?;
    let paths = [
        out_dir.join("shift_report.csv"),
        out_dir.join("shift_report.json"),
        out_dir.join("config_echo_shift.json"),
    ];
    guard_artifacts(&paths, common.overwrite)?;
    let lambda = config
        .policies
        .iter()
        .find_map(|p| match p {
            PolicyTemplate::Edr { lambda } => Some(*lambda),
            _ => None,
        })
        .ok_or(CliError::NoThresholdPolicy("shift evaluation needs an edr policy"))?;

    let splits = load_splits(&config)?;
    let test = splits.test.to_labeled();

    let result = sweep(&ckpt.model, &ckpt.bank, &test, &config.taus, |tau| ExitPolicy::Edr {
        tau,
        lambda,
    })?;
    let row = closest_speedup(&result, config.shift_target_speedup);
    let tau = row.tau;
    let mut rows = vec![ShiftRow {
        condition: "before".into(),
        tau,
        accuracy: row.eval.accuracy,
        speedup: row.eval.speedup,
        mean_exit_layer: row.eval.mean_exit_layer,
    }];

    if !no_adjust {
        let mut bank = ckpt.bank.clone();
        let trace = ckpt.model.forward_trace(&test.xs);
        for layer in 1..ckpt.model.config.layers {
            adjust_prototypes_kmeans(
                &mut bank,
                layer,
                &trace.protos[layer - 1],
                config.kmeans_max_iters,
                config.kmeans_tol,
            )?;
        }
        let eval =
            evaluate_policy(&ckpt.model, &bank, &ExitPolicy::Edr { tau, lambda }, &test)?;
        rows.push(ShiftRow {
            condition: "after".into(),
            tau,
            accuracy: eval.accuracy,
            speedup: eval.speedup,
            mean_exit_layer: eval.mean_exit_layer,
        });
    }

    let mut csv = String::from("condition,tau,accuracy,speedup,mean_exit_layer\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.condition, row.tau, row.accuracy, row.speedup, row.mean_exit_layer
        ));
    }
    fs::write(&paths[0], csv)?;
    write_json(&paths[1], &rows)?;
    let hash = write_config_echo(&config, &out_dir, "shift")?;
    println!(
        "shift report ({} conditions at tau {tau}) into {} (config {})",
        rows.len(),
        out_dir.display(),
        &hash[..12]
    );
    Ok(())
}

/// The sweep row whose speed-up lands nearest the target, ties to the
/// lower threshold.
fn closest_speedup(result: &SweepResult, target: f64) -> &crate::harness::SweepRow {
    result
        .rows
        .iter()
        .min_by(|a, b| {
            let da = (a.eval.speedup - target).abs();
            let db = (b.eval.speedup - target).abs();
            da.total_cmp(&db).then(a.tau.total_cmp(&b.tau))
        })
        .expect("sweep rows are non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn flags_override_config_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("config.json");
        fs::write(
            &config_path,
            format!(
                r#"{{"train": {{"seed": 1}}, "out_dir": "{}"}}"#,
                dir.path().join("from_file").display()
            ),
        )
        .unwrap();
        let out_override = dir.path().join("from_flag");
        let cli = parse(&[
            "exitlab",
            "gen",
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            out_override.to_str().unwrap(),
            "--seed",
            "77",
            "--create-dirs",
        ]);
        let Command::Gen { common } = cli.command else { panic!("expected gen") };
        let (config, out_dir) = resolve(&common).unwrap();
        assert_eq!(out_dir, out_override);
        assert_eq!(config.train.seed, 77);
        assert_eq!(config.model.seed, 77);
        assert!(out_override.is_dir());
    }

    #[test]
    fn missing_out_dir_errors_without_create_flag() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let cli = parse(&["exitlab", "gen", "--out", missing.to_str().unwrap()]);
        let Command::Gen { common } = cli.command else { panic!("expected gen") };
        let err = resolve(&common).unwrap_err();
        assert!(matches!(err, CliError::MissingOutDir(_)), "{err}");
        assert!(!missing.exists());
    }

    #[test]
    fn artifact_guard_refuses_existing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        fs::write(&path, "x").unwrap();
        let err = guard_artifacts(std::slice::from_ref(&path), false).unwrap_err();
        assert!(matches!(err, CliError::Exists(_)));
        guard_artifacts(std::slice::from_ref(&path), true).unwrap();
        guard_artifacts(&[dir.path().join("absent.csv")], false).unwrap();
    }

    #[test]
    fn shape_comparison_ignores_seed_only() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.seed = 999;
        assert!(same_shape(&a, &b));
        b.d_hidden += 1;
        assert!(!same_shape(&a, &b));
    }
}

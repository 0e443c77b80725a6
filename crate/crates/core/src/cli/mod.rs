//! `imblens` command-line interface.
//!
//! Every analysis command writes a JSON document `{ "run": ..., "report": ... }`
//! to `--out/<command>.json` (or stdout without `--out`), plus CSV tables for
//! plotting where relevant. Exit codes: 0 success, 2 input or validation
//! error, 3 numeric failure.

pub mod manifest;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::class_stats::{self, ClassProfile, ProfileOptions};
use crate::decomposition::{self, decompose};
use crate::divergence::{self, OverlapOptions, RankBy};
use crate::embx::{self, read_embx, EmbxObject, ReadOptions};
use crate::error::{Error, Result};
use crate::probe::{self, Init, TrainConfig};
use crate::topk::{self, FeMode, GroupBy, Ranking, Space, TopKRequest};
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "imblens",
    version,
    about = "Latent feature diagnostics for linear classification heads"
)]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true, env = "IMBLENS_THREADS")]
    pub threads: Option<usize>,

    /// Accept negative feature embeddings with a warning.
    #[arg(long, global = true)]
    pub allow_signed_fe: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Summarize an EMBX directory.
    Inspect(InspectArgs),
    /// Top-K coverage ratios, class members, union counts and logit contributions.
    Topk(TopkArgs),
    /// Per-class mean magnitudes and classifier weight summaries.
    Stats(StatsArgs),
    /// Train/test divergence of class feature profiles.
    Divergence(DivergenceArgs),
    /// Retrain the linear head on stored feature embeddings.
    Retrain(RetrainArgs),
    /// Balanced accuracy and confusion matrix.
    Bac(BacArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    pub dir: PathBuf,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TopkArgs {
    pub fe_dir: PathBuf,
    pub weights_dir: PathBuf,
    #[arg(long = "k", value_delimiter = ',', default_values_t = vec![2, 3, 5, 7])]
    pub k: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Space::Ce)]
    pub space: Space,
    #[arg(long, value_enum, default_value_t = FeMode::Magnitude)]
    pub fe_mode: FeMode,
    #[arg(long, value_enum, default_value_t = GroupBy::Predicted)]
    pub group_by: GroupBy,
    /// K for class members and union counts (default: largest --k).
    #[arg(long)]
    pub members_k: Option<usize>,
    /// Number of class members to report.
    #[arg(long, default_value_t = 10)]
    pub top_m: usize,
    /// Number of ranks in the logit contribution table.
    #[arg(long, default_value_t = 7)]
    pub contrib_k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    pub fe_dir: PathBuf,
    pub weights_dir: PathBuf,
    /// Length of the sorted top-m tables.
    #[arg(long = "top", default_value_t = 10)]
    pub top: usize,
    #[arg(long, value_enum, default_value_t = GroupBy::Predicted)]
    pub group_by: GroupBy,
    /// Majority class (default: most frequent label).
    #[arg(long)]
    pub majority: Option<usize>,
    /// fe counts as active when strictly above this.
    #[arg(long, default_value_t = 0.0)]
    pub epsilon: f32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DivergenceArgs {
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    pub weights_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Space::Fe)]
    pub space: Space,
    #[arg(long, value_enum, default_value_t = FeMode::Magnitude)]
    pub fe_mode: FeMode,
    #[arg(long = "top", default_value_t = 10)]
    pub top: usize,
    #[arg(long = "k", default_value_t = 7)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = RankBy::Topk)]
    pub rank_by: RankBy,
    #[arg(long, default_value_t = 0.0)]
    pub epsilon: f32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RetrainArgs {
    pub fe_dir: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Cosine decay target.
    #[arg(long, default_value_t = 0.001)]
    pub final_lr: f64,
    /// Keep the learning rate constant.
    #[arg(long)]
    pub constant_lr: bool,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Init::Zeros)]
    pub init: Init,
    /// Weight the loss by inverse class frequency.
    #[arg(long)]
    pub class_balanced_loss: bool,
    /// Split scored each epoch to select the kept head.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Output EMBX directory for the retrained head.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BacArgs {
    pub fe_dir: PathBuf,
    pub weights_dir: PathBuf,
    /// Tolerance for comparing exported logits, when present.
    #[arg(long, default_value_t = 1e-4)]
    pub logit_tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs the parsed command and returns the process exit code.
pub fn main(cli: Cli) -> i32 {
    let threads = cli.threads;
    let run = || match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    match threads {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(e) => {
                eprintln!("error: cannot build thread pool: {e}");
                3
            }
        },
        _ => run(),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let opts = ReadOptions {
        allow_signed_fe: cli.allow_signed_fe,
    };
    match &cli.command {
        Command::Inspect(a) => inspect(a, &opts),
        Command::Topk(a) => cmd_topk(a, &opts),
        Command::Stats(a) => cmd_stats(a, &opts),
        Command::Divergence(a) => cmd_divergence(a, &opts),
        Command::Retrain(a) => cmd_retrain(a, &opts),
        Command::Bac(a) => cmd_bac(a, &opts),
    }
}

#[derive(Serialize)]
struct Output<'a, R: Serialize> {
    run: &'a RunManifest,
    report: &'a R,
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `<name>.json` under `out`, or prints it when `out` is absent.
fn emit<R: Serialize>(out: Option<&Path>, name: &str, run: &RunManifest, report: &R) -> Result<()> {
    let text = to_json(&Output { run, report });
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_text(&dir.join(format!("{name}.json")), &text)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_csv(out: Option<&Path>, file: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => write_text(&dir.join(file), text),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct InspectSummary {
    path: String,
    kind: &'static str,
    format_version: String,
    tensors: Vec<(String, String, Vec<usize>)>,
    metadata: std::collections::BTreeMap<String, String>,
    num_classes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_counts: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logits_present: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias_present: Option<bool>,
}

fn inspect(a: &InspectArgs, opts: &ReadOptions) -> Result<()> {
    let (manifest, object) = read_embx(&a.dir, opts)?;
    let tensors = manifest
        .tensors
        .iter()
        .map(|t| (t.name.clone(), format!("{:?}", t.dtype).to_lowercase(), t.shape.clone()))
        .collect();
    let mut summary = InspectSummary {
        path: a.dir.display().to_string(),
        kind: "",
        format_version: manifest.format_version.clone(),
        tensors,
        metadata: manifest.metadata.clone(),
        num_classes: 0,
        class_counts: None,
        logits_present: None,
        bias_present: None,
    };
    match &object {
        EmbxObject::Embeddings(es) => {
            summary.kind = "embeddings";
            summary.num_classes = es.num_classes();
            summary.class_counts = Some(es.class_counts());
            summary.logits_present = Some(es.logits().is_some());
        }
        EmbxObject::Head(h) => {
            summary.kind = "classifier_head";
            summary.num_classes = h.num_classes();
            summary.bias_present = Some(h.bias().is_some());
        }
    }
    if a.json {
        print!("{}", to_json(&summary));
        return Ok(());
    }
    let mut text = String::new();
    let _ = writeln!(text, "{} ({}, {})", summary.path, summary.kind, summary.format_version);
    for (name, dtype, shape) in &summary.tensors {
        let _ = writeln!(text, "  {name}: {dtype} {shape:?}");
    }
    for (k, v) in &summary.metadata {
        let _ = writeln!(text, "  {k} = {v}");
    }
    if let Some(counts) = &summary.class_counts {
        let _ = writeln!(text, "  class counts: {counts:?}");
    }
    if let Some(p) = summary.logits_present {
        let _ = writeln!(text, "  logits: {}", if p { "present" } else { "absent" });
    }
    if let Some(p) = summary.bias_present {
        let _ = writeln!(text, "  bias: {}", if p { "present" } else { "absent" });
    }
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct TopkOutput {
    coverage: topk::TopKReport,
    contributions: topk::ContributionReport,
}

fn cmd_topk(a: &TopkArgs, opts: &ReadOptions) -> Result<()> {
    let es = embx::read_embeddings(&a.fe_dir, opts)?;
    let head = embx::read_head(&a.weights_dir)?;
    let d = decompose(&es, &head)?;
    let req = TopKRequest {
        k_values: a.k.clone(),
        ranking: Ranking {
            space: a.space,
            fe_mode: a.fe_mode,
        },
        group_by: a.group_by,
        members_k: a.members_k,
        top_m: a.top_m,
    };
    let coverage = topk::coverage_ratios(&d, es.labels(), &req)?;
    let contributions = topk::logit_contributions(&d, es.labels(), a.contrib_k, a.group_by)?;

    let mut csv = String::from("class,k,coverage\n");
    for (k, v) in &coverage.overall_coverage {
        let _ = writeln!(csv, "all,{k},{v}");
    }
    for (class, by_k) in &coverage.per_class_coverage {
        for (k, v) in by_k {
            let value = v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(csv, "{class},{k},{value}");
        }
    }
    let mut members = String::from("class,rank,feature,count,ratio\n");
    for (class, list) in &coverage.class_members {
        for (rank, m) in list.iter().enumerate() {
            let _ = writeln!(members, "{class},{},{},{},{}", rank + 1, m.feature, m.count, m.ratio);
        }
    }
    let mut contrib = String::from("class,rank,mean_fraction\n");
    for (class, c) in &contributions.per_class {
        for (rank, v) in c.mean_fractions.iter().flatten().enumerate() {
            let _ = writeln!(contrib, "{class},{},{v}", rank + 1);
        }
    }

    let run = RunManifest::new("topk", &[&a.fe_dir, &a.weights_dir], a)?;
    let out = a.out.as_deref();
    emit(
        out,
        "topk",
        &run,
        &TopkOutput {
            coverage,
            contributions,
        },
    )?;
    emit_csv(out, "coverage.csv", &csv)?;
    emit_csv(out, "members.csv", &members)?;
    emit_csv(out, "contributions.csv", &contrib)
}

#[derive(Serialize)]
struct StatsOutput {
    profiles: class_stats::ClassProfiles,
    weights: Vec<class_stats::WeightSummary>,
    mean_ce_ratio: Option<class_stats::MeanCeRatio>,
}

fn top_table(profiles: &[ClassProfile], m: usize, pick: impl Fn(&ClassProfile) -> &[f64]) -> String {
    let mut csv = String::from("class,rank,feature,value\n");
    for p in profiles {
        for (rank, (feature, value)) in ClassProfile::top(pick(p), m).into_iter().enumerate() {
            let _ = writeln!(csv, "{},{},{feature},{value}", p.class, rank + 1);
        }
    }
    csv
}

fn cmd_stats(a: &StatsArgs, opts: &ReadOptions) -> Result<()> {
    let es = embx::read_embeddings(&a.fe_dir, opts)?;
    let head = embx::read_head(&a.weights_dir)?;
    let d = decompose(&es, &head)?;
    let profiles = class_stats::class_profiles(
        &es,
        &d,
        &ProfileOptions {
            group_by: a.group_by,
            activity_epsilon: a.epsilon,
        },
    )?;
    let weights = class_stats::weight_summaries(&head);
    let majority = match a.majority {
        Some(m) if m >= es.num_classes() => {
            return Err(Error::InvalidArgument(format!(
                "majority class {m} outside [0, {})",
                es.num_classes()
            )))
        }
        Some(m) => m,
        None => class_stats::majority_class(es.labels(), es.num_classes()),
    };
    let mean_ce_ratio = if profiles.profiles.len() >= 2 && profiles.profiles.iter().any(|p| p.class == majority) {
        Some(class_stats::largest_mean_ce_ratio(&profiles.profiles, majority)?)
    } else {
        log::warn!("largest mean ce ratio needs the majority class and one other class with instances");
        None
    };

    let mut wcsv = String::from("class,rank,feature,abs_weight\n");
    for w in &weights {
        for (rank, (feature, value)) in w.top_weights.iter().take(a.top).enumerate() {
            let _ = writeln!(wcsv, "{},{},{feature},{value}", w.class, rank + 1);
        }
    }
    let ce_csv = top_table(&profiles.profiles, a.top, |p| &p.mean_ce);
    let fe_csv = top_table(&profiles.profiles, a.top, |p| &p.mean_fe);

    let run = RunManifest::new("stats", &[&a.fe_dir, &a.weights_dir], a)?;
    let out = a.out.as_deref();
    emit(
        out,
        "stats",
        &run,
        &StatsOutput {
            profiles,
            weights,
            mean_ce_ratio,
        },
    )?;
    emit_csv(out, "mean_ce_top.csv", &ce_csv)?;
    emit_csv(out, "mean_fe_top.csv", &fe_csv)?;
    emit_csv(out, "weights_top.csv", &wcsv)
}

fn cmd_divergence(a: &DivergenceArgs, opts: &ReadOptions) -> Result<()> {
    let train = embx::read_embeddings(&a.train_dir, opts)?;
    let test = embx::read_embeddings(&a.test_dir, opts)?;
    let head = embx::read_head(&a.weights_dir)?;
    let d_train = decompose(&train, &head)?;
    let d_test = decompose(&test, &head)?;
    let report = divergence::divergence_report(
        &train,
        &test,
        &d_train,
        &d_test,
        &OverlapOptions {
            ranking: Ranking {
                space: a.space,
                fe_mode: a.fe_mode,
            },
            top_m: a.top,
            k: a.k,
            rank_by: a.rank_by,
            activity_epsilon: a.epsilon,
        },
    )?;
    let run = RunManifest::new("divergence", &[&a.train_dir, &a.test_dir, &a.weights_dir], a)?;
    emit(a.out.as_deref(), "divergence", &run, &report)
}

fn cmd_retrain(a: &RetrainArgs, opts: &ReadOptions) -> Result<()> {
    let train = embx::read_embeddings(&a.fe_dir, opts)?;
    let eval = a.eval.as_deref().map(|p| embx::read_embeddings(p, opts)).transpose()?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        final_learning_rate: (!a.constant_lr).then_some(a.final_lr),
        weight_decay: a.weight_decay,
        seed: a.seed,
        init: a.init,
        class_balanced_loss: a.class_balanced_loss,
    };
    let mut inputs: Vec<&Path> = vec![&a.fe_dir];
    if let Some(e) = &a.eval {
        inputs.push(e);
    }
    let trace = match probe::retrain_head(&train, &cfg, eval.as_ref()) {
        Ok(t) => t,
        Err(Error::Divergence { epoch, trace }) => {
            let run = RunManifest::new("retrain", &inputs, a)?;
            fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            emit(Some(&a.out), "trace", &run, &trace)?;
            return Err(Error::Divergence { epoch, trace });
        }
        Err(e) => return Err(e),
    };
    embx::write_head(&trace.final_head, &a.out)?;
    let run = RunManifest::new("retrain", &inputs, a)?;
    emit(Some(&a.out), "trace", &run, &trace)?;
    eprintln!(
        "kept epoch {} with {} BAC {:.4}; head written to {}",
        trace.best_epoch + 1,
        if eval.is_some() { "eval" } else { "train" },
        trace.best_bac,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct BacOutput {
    accuracy: decomposition::AccuracyReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    exported_logits: Option<decomposition::ConsistencyReport>,
}

fn cmd_bac(a: &BacArgs, opts: &ReadOptions) -> Result<()> {
    let es = embx::read_embeddings(&a.fe_dir, opts)?;
    let head = embx::read_head(&a.weights_dir)?;
    let d = decompose(&es, &head)?;
    let accuracy = decomposition::accuracy(&d, es.labels())?;
    let exported_logits = es
        .logits()
        .map(|l| decomposition::check_exported_logits(&d, l, a.logit_tol))
        .transpose()?;
    if let Some(c) = &exported_logits {
        if !c.within_tolerance {
            log::warn!(
                "exported logits disagree: max abs err {:.3e}, {} argmax mismatches",
                c.max_abs_err,
                c.mismatched_argmax_count
            );
        }
    }
    let run = RunManifest::new("bac", &[&a.fe_dir, &a.weights_dir], a)?;
    emit(
        a.out.as_deref(),
        "bac",
        &run,
        &BacOutput {
            accuracy,
            exported_logits,
        },
    )
}

//! Command implementations: corpus generation, per-seed training runs,
//! evaluation reports, rank/method sweeps, and adapter analysis exports.
//!
//! Every run directory receives the fully resolved config; re-running
//! from that config reproduces all numeric outputs (wall-time fields in
//! the epoch logs are the only exception).

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{
    effective_rank_summary, heatmap_grids, svd_adapters, AnalysisError, SvdReport,
    DEFAULT_EFFECTIVE_RANK_TAU,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::data::{generate_corpus, load_manifest, write_corpus, Corpus, DataError, DomainSet};
use crate::meta::{score_domain_set, train, MetaError, Method};
use crate::metrics::{aggregate_seeds, det_curve, eer, MetricsError, SeedAggregate};
use crate::model::{build_model, ModelError, DEFAULT_LORA_ALPHA};
use crate::params::ParamStore;

#[derive(Debug)]
pub enum RunnerError {
    Config(String),
    Data(DataError),
    NumericAbort(String),
    MissingCheckpoints(Vec<PathBuf>),
    OutputExists(PathBuf),
    Model(ModelError),
    Checkpoint(CheckpointError),
    Analysis(AnalysisError),
    Metrics(MetricsError),
    Train(MetaError),
    Io(String),
}

impl fmt::Display for RunnerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunnerError::Config(e) => write!(f, "config error: {e}"),
            RunnerError::Data(e) => write!(f, "data error: {e}"),
            RunnerError::NumericAbort(e) => write!(f, "numeric abort: {e}"),
            RunnerError::MissingCheckpoints(list) => {
                write!(f, "missing checkpoints:")?;
                for p in list {
                    write!(f, " {}", p.display())?;
                }
                Ok(())
            }
            RunnerError::OutputExists(p) => write!(
                f,
                "output directory {} exists and is not empty (use --force)",
                p.display()
            ),
            RunnerError::Model(e) => write!(f, "model error: {e}"),
            RunnerError::Checkpoint(e) => write!(f, "{e}"),
            RunnerError::Analysis(e) => write!(f, "analysis error: {e}"),
            RunnerError::Metrics(e) => write!(f, "metrics error: {e}"),
            RunnerError::Train(e) => write!(f, "training error: {e}"),
            RunnerError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for RunnerError {}

impl RunnerError {
    /// Exit codes: 2 config, 3 data, 4 numeric abort, 1 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) => 2,
            RunnerError::Data(_) => 3,
            RunnerError::NumericAbort(_) => 4,
            _ => 1,
        }
    }
}

impl From<ConfigError> for RunnerError {
    fn from(e: ConfigError) -> Self {
        RunnerError::Config(e.to_string())
    }
}

impl From<DataError> for RunnerError {
    fn from(e: DataError) -> Self {
        RunnerError::Data(e)
    }
}

impl From<MetaError> for RunnerError {
    fn from(e: MetaError) -> Self {
        match e {
            MetaError::NonFiniteLoss { context } => {
                RunnerError::NumericAbort(format!("non-finite loss in {context}"))
            }
            MetaError::SingleClassValidation => RunnerError::Data(DataError::Validation(
                "validation set must contain both classes".into(),
            )),
            MetaError::Data(d) => RunnerError::Data(d),
            other => RunnerError::Train(other),
        }
    }
}

impl From<ModelError> for RunnerError {
    fn from(e: ModelError) -> Self {
        RunnerError::Model(e)
    }
}

impl From<CheckpointError> for RunnerError {
    fn from(e: CheckpointError) -> Self {
        RunnerError::Checkpoint(e)
    }
}

impl From<AnalysisError> for RunnerError {
    fn from(e: AnalysisError) -> Self {
        RunnerError::Analysis(e)
    }
}

impl From<MetricsError> for RunnerError {
    fn from(e: MetricsError) -> Self {
        RunnerError::Metrics(e)
    }
}

impl From<std::io::Error> for RunnerError {
    fn from(e: std::io::Error) -> Self {
        RunnerError::Io(e.to_string())
    }
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn checkpoint_path(out: &Path, seed: u64) -> PathBuf {
    seed_dir(out, seed).join("checkpoint.bin")
}

/// Load the configured corpus: generated in memory for synthetic specs,
/// lazily file-backed for manifests.
pub fn resolve_corpus(cfg: &RunConfig) -> Result<Corpus, RunnerError> {
    if let Some(synth) = &cfg.data.synthetic {
        let spec = synth.spec.as_ref().expect("resolved config");
        return Ok(generate_corpus(spec, synth.seed)?);
    }
    let manifest = cfg.data.manifest.as_ref().expect("validated config");
    Ok(load_manifest(manifest)?)
}

/// The model's expected feature shape against the actual corpus, checked
/// before any training starts.
fn check_dims(cfg: &RunConfig, corpus: &Corpus) -> Result<(), RunnerError> {
    if let Some(ex) = corpus.train.all_examples().next() {
        let shape = ex.features()?.shape().to_vec();
        if shape != [cfg.model.seq_len, cfg.model.d_model] {
            return Err(RunnerError::Config(format!(
                "corpus features are {shape:?} but the model expects [{}, {}]",
                cfg.model.seq_len, cfg.model.d_model
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub manifest: PathBuf,
    pub train_examples: usize,
    pub dev_examples: usize,
    pub eval_examples: usize,
}

#[derive(Debug, Clone, Serialize)]
struct Receipt {
    schema: u32,
    seed: u64,
    spec_hash: u64,
    train_examples: usize,
    dev_examples: usize,
    eval_examples: usize,
}

/// Write the synthetic corpus to disk with a manifest and a generation
/// receipt. Refuses to clobber a non-empty directory unless forced.
pub fn cmd_generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<GenerateSummary, RunnerError> {
    let synth = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| RunnerError::Config("generate requires a synthetic data section".into()))?;
    let spec = synth.spec.as_ref().expect("resolved config");

    if out.exists() && std::fs::read_dir(out)?.next().is_some() {
        if !force {
            return Err(RunnerError::OutputExists(out.to_path_buf()));
        }
        std::fs::remove_dir_all(out)?;
    }
    std::fs::create_dir_all(out)?;

    let corpus = generate_corpus(spec, synth.seed)?;
    let manifest = write_corpus(&corpus, out)?;
    let receipt = Receipt {
        schema: 1,
        seed: synth.seed,
        spec_hash: spec.content_hash(),
        train_examples: corpus.train.total_examples(),
        dev_examples: corpus.dev.total_examples(),
        eval_examples: corpus.eval.total_examples(),
    };
    std::fs::write(
        out.join("receipt.json"),
        serde_json::to_string_pretty(&receipt).expect("receipt serializes"),
    )?;
    Ok(GenerateSummary {
        manifest,
        train_examples: receipt.train_examples,
        dev_examples: receipt.dev_examples,
        eval_examples: receipt.eval_examples,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedTrainResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_eer_pct: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub method: Method,
    pub rank: Option<usize>,
    pub seeds: Vec<SeedTrainResult>,
    pub val_eer_mean_pct: f64,
    pub val_eer_std_pct: Option<f64>,
}

/// Train one model per seed, saving the best checkpoint and an epoch log
/// under `out_dir/seed_<s>/`, plus a summary of validation EERs.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, RunnerError> {
    let corpus = resolve_corpus(cfg)?;
    check_dims(cfg, &corpus)?;
    let out = &cfg.run.out_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.canonical_text())?;

    let results: Result<Vec<SeedTrainResult>, RunnerError> = cfg
        .run
        .seeds
        .par_iter()
        .map(|&seed| run_one_seed(cfg, &corpus, seed))
        .collect();
    let seeds = results?;

    let vals: Vec<f64> = seeds.iter().map(|s| s.best_val_eer_pct).collect();
    let (mean, std) = aggregate_pct(&vals)?;
    let summary = TrainSummary {
        method: cfg.run.method,
        rank: cfg.run.rank,
        seeds,
        val_eer_mean_pct: mean,
        val_eer_std_pct: std,
    };
    std::fs::write(
        out.join("train_summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    let mut tsv = String::from("seed\tbest_epoch\tepochs_run\tstopped_early\tbest_val_eer_pct\n");
    for s in &summary.seeds {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            s.seed, s.best_epoch, s.epochs_run, s.stopped_early, s.best_val_eer_pct
        ));
    }
    std::fs::write(out.join("train_summary.tsv"), tsv)?;
    Ok(summary)
}

fn run_one_seed(cfg: &RunConfig, corpus: &Corpus, seed: u64) -> Result<SeedTrainResult, RunnerError> {
    let (model, store) = build_model(&cfg.model, cfg.adapt_mode(), seed)?;
    let outcome = train(
        &model,
        store,
        &corpus.train,
        &corpus.dev,
        &cfg.train_settings(),
        seed,
    )?;

    let dir = seed_dir(&cfg.run.out_dir, seed);
    std::fs::create_dir_all(&dir)?;
    save_checkpoint(
        &checkpoint_path(&cfg.run.out_dir, seed),
        &outcome.best_params,
        cfg.content_hash(),
        seed,
        None,
    )?;
    let mut log = std::fs::File::create(dir.join("log.jsonl"))?;
    for record in &outcome.log {
        writeln!(log, "{}", serde_json::to_string(record).expect("record serializes"))?;
    }

    Ok(SeedTrainResult {
        seed,
        best_epoch: outcome.best_epoch,
        best_val_eer_pct: outcome.best_val_eer * 100.0,
        epochs_run: outcome.epochs_run,
        stopped_early: outcome.stopped_early,
    })
}

fn aggregate_pct(vals: &[f64]) -> Result<(f64, Option<f64>), RunnerError> {
    if vals.len() >= 2 {
        let SeedAggregate { mean, std, .. } = aggregate_seeds(vals)?;
        Ok((mean, Some(std)))
    } else {
        Ok((vals.first().copied().unwrap_or(f64::NAN), None))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedEval {
    pub seed: u64,
    pub eer_pct: f64,
    pub score_file: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSetReport {
    pub name: String,
    pub per_seed: Vec<SeedEval>,
    pub eer_mean_pct: f64,
    pub eer_std_pct: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub sets: Vec<EvalSetReport>,
}

/// Named evaluation pools for this config: the held-out split of the
/// configured corpus, plus any extra manifest-backed sets.
fn eval_sets(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<(String, DomainSet)>, RunnerError> {
    let primary_name = if cfg.data.synthetic.is_some() {
        "held_out"
    } else {
        "eval"
    };
    let mut sets = vec![(primary_name.to_string(), corpus.eval.clone())];
    for extra in &cfg.eval {
        let loaded = load_manifest(&extra.manifest)?;
        sets.push((extra.name.clone(), loaded.eval));
    }
    Ok(sets)
}

/// Score every (checkpoint, eval set) pair, write per-seed score files,
/// and aggregate EERs per set. `det` additionally exports DET sweeps.
pub fn cmd_eval(cfg: &RunConfig, det: bool) -> Result<EvalReport, RunnerError> {
    let corpus = resolve_corpus(cfg)?;
    check_dims(cfg, &corpus)?;
    let out = &cfg.run.out_dir;

    let missing: Vec<PathBuf> = cfg
        .run
        .seeds
        .iter()
        .map(|&s| checkpoint_path(out, s))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(RunnerError::MissingCheckpoints(missing));
    }

    let eval_dir = out.join("eval");
    std::fs::create_dir_all(&eval_dir)?;
    let sets = eval_sets(cfg, &corpus)?;
    let expected_hash = cfg.content_hash();

    let mut stores: Vec<(u64, ParamStore)> = Vec::new();
    for &seed in &cfg.run.seeds {
        let (store, header, _) = load_checkpoint(&checkpoint_path(out, seed))?;
        if header.config_hash != expected_hash {
            return Err(RunnerError::Config(format!(
                "checkpoint for seed {seed} was trained with a different config \
                 (hash {:#x}, expected {:#x})",
                header.config_hash, expected_hash
            )));
        }
        stores.push((seed, store));
    }

    let mut reports = Vec::new();
    for (name, set) in &sets {
        let mut per_seed = Vec::new();
        for (seed, store) in &stores {
            let (model, _) = build_model(&cfg.model, cfg.adapt_mode(), *seed)?;
            let scores = score_domain_set(&model, store, set)?;
            let score_file = eval_dir.join(format!("scores_{name}_seed{seed}.tsv"));
            scores.write_file(&score_file)?;
            if det {
                let curve = det_curve(&scores)?;
                curve.write_file(&eval_dir.join(format!("det_{name}_seed{seed}.tsv")))?;
            }
            per_seed.push(SeedEval {
                seed: *seed,
                eer_pct: eer(&scores)?.eer * 100.0,
                score_file,
            });
        }
        let vals: Vec<f64> = per_seed.iter().map(|s| s.eer_pct).collect();
        let (mean, std) = aggregate_pct(&vals)?;
        reports.push(EvalSetReport {
            name: name.clone(),
            per_seed,
            eer_mean_pct: mean,
            eer_std_pct: std,
        });
    }

    let report = EvalReport { sets: reports };
    std::fs::write(
        out.join("eval_report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let mut tsv = String::from("set\tseed\teer_pct\n");
    for set in &report.sets {
        for s in &set.per_seed {
            tsv.push_str(&format!("{}\t{}\t{}\n", set.name, s.seed, s.eer_pct));
        }
        tsv.push_str(&format!(
            "{}\tmean\t{}\n{}\tstd\t{}\n",
            set.name,
            set.eer_mean_pct,
            set.name,
            set.eer_std_pct.map_or("-".to_string(), |v| v.to_string())
        ));
    }
    std::fs::write(out.join("eval_report.tsv"), tsv)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub method: Method,
    pub rank: usize,
    pub trainable_params: u64,
    pub sets: Vec<EvalSetReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
}

/// Cross-product of methods and adapter ranks, each trained over all
/// configured seeds and evaluated on every eval set.
pub fn cmd_sweep(
    cfg: &RunConfig,
    ranks: &[usize],
    methods: &[Method],
) -> Result<SweepSummary, RunnerError> {
    if ranks.is_empty() || methods.is_empty() {
        return Err(RunnerError::Config("sweep needs at least one rank and one method".into()));
    }
    let base_out = cfg.run.out_dir.clone();
    std::fs::create_dir_all(&base_out)?;

    let mut rows = Vec::new();
    for &method in methods {
        for &rank in ranks {
            let mut cell = cfg.clone();
            cell.run.method = method;
            cell.run.adapt = crate::config::AdaptChoice::Lora;
            cell.run.rank = Some(rank);
            cell.run.out_dir = base_out.join("sweep").join(format!("{method}_r{rank}"));
            let cell = cell.resolve()?;

            cmd_train(&cell)?;
            let report = cmd_eval(&cell, false)?;

            let (_, store) = build_model(&cell.model, cell.adapt_mode(), cell.run.seeds[0])?;
            rows.push(SweepRow {
                method,
                rank,
                trainable_params: store.num_trainable_scalars() as u64,
                sets: report.sets,
            });
        }
    }

    let summary = SweepSummary { rows };
    std::fs::write(
        base_out.join("sweep.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    let mut tsv = String::from("method\trank\ttrainable_params");
    if let Some(first) = summary.rows.first() {
        for set in &first.sets {
            tsv.push_str(&format!("\t{0}_eer_mean_pct\t{0}_eer_std_pct", set.name));
        }
    }
    tsv.push('\n');
    for row in &summary.rows {
        tsv.push_str(&format!("{}\t{}\t{}", row.method, row.rank, row.trainable_params));
        for set in &row.sets {
            tsv.push_str(&format!(
                "\t{}\t{}",
                set.eer_mean_pct,
                set.eer_std_pct.map_or("-".to_string(), |v| v.to_string())
            ));
        }
        tsv.push('\n');
    }
    std::fs::write(base_out.join("sweep.tsv"), tsv)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeSummary {
    pub grids: PathBuf,
    pub effective_rank: PathBuf,
    pub comparison: Option<PathBuf>,
}

fn effective_rank_tsv(report: &SvdReport, tau: f64) -> String {
    let mut tsv = String::from("layer\ttarget\teff_rank_a\teff_rank_b\teff_rank_ab\n");
    let summary = effective_rank_summary(report, tau);
    let n = summary.len().max(1) as f64;
    let (mut ma, mut mb, mut mab) = (0.0, 0.0, 0.0);
    for (layer, target, a, b, ab) in &summary {
        tsv.push_str(&format!("{layer}\t{target}\t{a}\t{b}\t{ab}\n"));
        ma += *a as f64;
        mb += *b as f64;
        mab += *ab as f64;
    }
    tsv.push_str(&format!("mean\t-\t{}\t{}\t{}\n", ma / n, mb / n, mab / n));
    tsv
}

/// Export singular-value grids and effective-rank tables for one
/// checkpoint, optionally side by side with a second one.
pub fn cmd_analyze(
    checkpoint: &Path,
    out: &Path,
    compare: Option<&Path>,
) -> Result<AnalyzeSummary, RunnerError> {
    std::fs::create_dir_all(out)?;
    let (store, _, _) = load_checkpoint(checkpoint)?;
    let report = svd_adapters(&store, DEFAULT_LORA_ALPHA)?;

    let grids_path = out.join("grids.tsv");
    heatmap_grids(&report)?.write_file(&grids_path)?;

    let er_path = out.join("effective_rank.tsv");
    std::fs::write(&er_path, effective_rank_tsv(&report, DEFAULT_EFFECTIVE_RANK_TAU))?;

    let comparison = match compare {
        Some(other_path) => {
            let (other_store, _, _) = load_checkpoint(other_path)?;
            let other = svd_adapters(&other_store, DEFAULT_LORA_ALPHA)?;
            let cmp_path = out.join("effective_rank_compare.tsv");
            let tau = DEFAULT_EFFECTIVE_RANK_TAU;
            let main = effective_rank_summary(&report, tau);
            let second = effective_rank_summary(&other, tau);
            let mut tsv = String::from(
                "layer\ttarget\tmain_a\tmain_b\tmain_ab\tother_a\tother_b\tother_ab\n",
            );
            for ((l, t, a1, b1, ab1), (_, _, a2, b2, ab2)) in main.iter().zip(second.iter()) {
                tsv.push_str(&format!("{l}\t{t}\t{a1}\t{b1}\t{ab1}\t{a2}\t{b2}\t{ab2}\n"));
            }
            std::fs::write(&cmp_path, tsv)?;
            Some(cmp_path)
        }
        None => None,
    };

    Ok(AnalyzeSummary {
        grids: grids_path,
        effective_rank: er_path,
        comparison,
    })
}

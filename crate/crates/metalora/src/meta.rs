//! Training loops: pooled ERM and first-order meta-learning over domain
//! splits.
//!
//! One meta iteration samples a fixed-size mini-batch from every source
//! domain, then for each of `n_pairs` random meta-train/meta-test splits:
//! clones the parameters, computes the meta-train gradient at the clone
//! point, takes one inner step on the clone, computes the meta-test
//! gradient at the updated clone (first-order: no backprop through the
//! inner step), and accumulates `g_meta_train + beta * g_meta_test`. The
//! accumulated gradient is averaged over the pairs and applied to the
//! live parameters with a single outer-optimizer step.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, DomainSet};
use crate::graph::{Graph, NodeId};
use crate::metrics::{eer, MetricsError, ScoreSet};
use crate::model::{Model, ModelError};
use crate::optim::{AdamWConfig, AdamWState, CyclicSchedule, OptimError};
use crate::params::{GradMap, ParamStore};
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Mldg,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Erm => f.write_str("erm"),
            Method::Mldg => f.write_str("mldg"),
        }
    }
}

/// Inner-update rule for the cloned parameters. The plain step follows
/// the update rule exactly; the adaptive variant runs a fresh
/// decoupled-decay optimizer instance (no weight decay, moments zeroed
/// unless `inner_stateful` carries them across iterations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerOpt {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterKind {
    Adamw,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner step size (alpha).
    pub inner_lr: f64,
    /// Meta-test gradient weight (beta).
    pub meta_test_weight: f64,
    /// Domains held out per split.
    pub n_meta_test: usize,
    /// Examples sampled per domain per iteration.
    pub per_domain_batch: usize,
    /// Meta-train/meta-test splits aggregated per outer step.
    pub n_pairs: usize,
    pub inner_steps: usize,
    pub inner_opt: InnerOpt,
    /// Carry inner-optimizer moments across iterations (adaptive inner
    /// only). Off: every clone starts from fresh moments.
    pub inner_stateful: bool,
    /// Recompute the meta-train gradient at the updated clone for the
    /// outer sum instead of reusing the clone-point gradient.
    pub refresh_meta_train_grad: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.001,
            meta_test_weight: 0.5,
            n_meta_test: 1,
            per_domain_batch: 3,
            n_pairs: 5,
            inner_steps: 1,
            inner_opt: InnerOpt::Sgd,
            inner_stateful: false,
            refresh_meta_train_grad: false,
        }
    }
}

/// A partition of domain indices into meta-train and meta-test sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaSplit {
    pub meta_train: Vec<usize>,
    pub meta_test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetaError {
    TooFewDomains { got: usize },
    BadSplit { k: usize, n_meta_test: usize },
    DomainTooSmall { domain_id: u32, have: usize, need: usize },
    EmptyBatch,
    NonFiniteLoss { context: String },
    SingleClassValidation,
    Model(ModelError),
    Optim(OptimError),
    Data(DataError),
    Metrics(MetricsError),
}

impl fmt::Display for MetaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetaError::TooFewDomains { got } => {
                write!(f, "meta iteration needs at least 2 domains, got {got}")
            }
            MetaError::BadSplit { k, n_meta_test } => {
                write!(f, "cannot hold out {n_meta_test} of {k} domains")
            }
            MetaError::DomainTooSmall { domain_id, have, need } => {
                write!(f, "domain {domain_id} has {have} examples, need >= {need}")
            }
            MetaError::EmptyBatch => write!(f, "empty batch"),
            MetaError::NonFiniteLoss { context } => write!(f, "non-finite loss in {context}"),
            MetaError::SingleClassValidation => {
                write!(f, "validation set must contain both classes")
            }
            MetaError::Model(e) => write!(f, "{e}"),
            MetaError::Optim(e) => write!(f, "{e}"),
            MetaError::Data(e) => write!(f, "{e}"),
            MetaError::Metrics(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MetaError {}

impl From<ModelError> for MetaError {
    fn from(e: ModelError) -> Self {
        MetaError::Model(e)
    }
}

impl From<OptimError> for MetaError {
    fn from(e: OptimError) -> Self {
        MetaError::Optim(e)
    }
}

impl From<DataError> for MetaError {
    fn from(e: DataError) -> Self {
        MetaError::Data(e)
    }
}

impl From<MetricsError> for MetaError {
    fn from(e: MetricsError) -> Self {
        MetaError::Metrics(e)
    }
}

/// Uniform random partition with `n_meta_test` held-out domain indices.
pub fn meta_split(
    k: usize,
    n_meta_test: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MetaSplit, MetaError> {
    if n_meta_test == 0 || n_meta_test >= k {
        return Err(MetaError::BadSplit { k, n_meta_test });
    }
    let mut indices: Vec<usize> = (0..k).collect();
    indices.shuffle(rng);
    let mut meta_test: Vec<usize> = indices[..n_meta_test].to_vec();
    let mut meta_train: Vec<usize> = indices[n_meta_test..].to_vec();
    meta_test.sort_unstable();
    meta_train.sort_unstable();
    Ok(MetaSplit {
        meta_train,
        meta_test,
    })
}

/// One domain's sampled mini-batch.
#[derive(Debug, Clone)]
pub struct DomainBatch {
    pub domain_id: u32,
    pub features: Vec<Tensor>,
    pub labels: Vec<usize>,
}

/// Anything that can turn (params, batch) into a scalar loss node.
pub trait Objective {
    fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &DomainBatch,
    ) -> Result<NodeId, ModelError>;
}

impl Objective for Model {
    fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &DomainBatch,
    ) -> Result<NodeId, ModelError> {
        Model::batch_loss(self, g, store, &batch.features, &batch.labels)
    }
}

fn domain_mean_loss(
    g: &mut Graph,
    obj: &dyn Objective,
    store: &ParamStore,
    batches: &[&DomainBatch],
) -> Result<NodeId, MetaError> {
    if batches.is_empty() || batches.iter().any(|b| b.features.is_empty()) {
        return Err(MetaError::EmptyBatch);
    }
    let per: Vec<NodeId> = batches
        .iter()
        .map(|b| obj.batch_loss(g, store, b))
        .collect::<Result<_, _>>()?;
    let loss = g.mean_scalars(&per).map_err(ModelError::from)?;
    Ok(loss)
}

/// Average of per-domain mean losses over the given batches (the
/// meta-train objective value).
pub fn meta_train_loss(
    obj: &dyn Objective,
    store: &ParamStore,
    batches: &[&DomainBatch],
) -> Result<f64, MetaError> {
    let mut g = Graph::new();
    let loss = domain_mean_loss(&mut g, obj, store, batches)?;
    Ok(g.tensor(loss).item())
}

fn loss_and_grads(
    obj: &dyn Objective,
    store: &ParamStore,
    batches: &[&DomainBatch],
    context: &str,
) -> Result<(f64, GradMap), MetaError> {
    let mut g = Graph::new();
    let loss = domain_mean_loss(&mut g, obj, store, batches)?;
    let value = g.tensor(loss).item();
    if !value.is_finite() {
        return Err(MetaError::NonFiniteLoss {
            context: context.to_string(),
        });
    }
    let grads = g.backward(loss, store).map_err(ModelError::from)?;
    Ok((value, grads))
}

fn sgd_apply(store: &mut ParamStore, grads: &GradMap, lr: f64) {
    for name in store.trainable_names() {
        if let Some(g) = grads.get(&name) {
            store.tensor_mut(&name).unwrap().add_scaled(g, -lr);
        }
    }
}

/// Outer-update rule: adaptive by default, plain gradient selectable.
pub enum OuterOpt<'a> {
    AdamW(&'a mut AdamWState),
    Sgd { lr: f64 },
}

impl OuterOpt<'_> {
    fn apply(&mut self, store: &mut ParamStore, grads: &GradMap) -> Result<(), MetaError> {
        match self {
            OuterOpt::AdamW(state) => state.step(store, grads)?,
            OuterOpt::Sgd { lr } => sgd_apply(store, grads, *lr),
        }
        Ok(())
    }
}

fn inner_update(
    clone: &mut ParamStore,
    obj: &dyn Objective,
    first_grads: &GradMap,
    batches: &[&DomainBatch],
    cfg: &MetaConfig,
    inner_state: &mut Option<AdamWState>,
) -> Result<(), MetaError> {
    for step in 0..cfg.inner_steps {
        let grads = if step == 0 {
            first_grads.clone()
        } else {
            loss_and_grads(obj, clone, batches, "inner update")?.1
        };
        match cfg.inner_opt {
            InnerOpt::Sgd => sgd_apply(clone, &grads, cfg.inner_lr),
            InnerOpt::Adamw => {
                if !cfg.inner_stateful || inner_state.is_none() {
                    *inner_state = Some(AdamWState::new(AdamWConfig {
                        lr: cfg.inner_lr,
                        weight_decay: 0.0,
                        ..AdamWConfig::default()
                    }));
                }
                let state = inner_state.as_mut().unwrap();
                state.set_lr(cfg.inner_lr);
                state.step(clone, &grads)?;
            }
        }
    }
    Ok(())
}

/// Per-pair objective values, for logging and NaN surveillance.
#[derive(Debug, Clone, Default)]
pub struct MldgOutcome {
    pub pair_meta_train: Vec<f64>,
    pub pair_meta_test: Vec<f64>,
}

impl MldgOutcome {
    pub fn mean_meta_train(&self) -> f64 {
        self.pair_meta_train.iter().sum::<f64>() / self.pair_meta_train.len().max(1) as f64
    }
}

/// One meta iteration over pre-sampled per-domain batches. The live
/// parameters are read-only until the single outer step at the end.
/// `forced_splits` (cycled over the pairs) pins the partitions for
/// oracle tests and degenerate configurations; `None` samples them.
pub fn mldg_iteration(
    store: &mut ParamStore,
    obj: &dyn Objective,
    batches: &[DomainBatch],
    cfg: &MetaConfig,
    mut outer: OuterOpt<'_>,
    rng: &mut ChaCha8Rng,
    forced_splits: Option<&[MetaSplit]>,
    inner_state: &mut Option<AdamWState>,
) -> Result<MldgOutcome, MetaError> {
    let k = batches.len();
    if k < 2 {
        return Err(MetaError::TooFewDomains { got: k });
    }
    let pick = |split: &[usize]| -> Vec<&DomainBatch> { split.iter().map(|&i| &batches[i]).collect() };

    let mut accum = GradMap::new();
    let mut outcome = MldgOutcome::default();
    for pair in 0..cfg.n_pairs.max(1) {
        let split = match forced_splits {
            Some(splits) => splits[pair % splits.len()].clone(),
            None => meta_split(k, cfg.n_meta_test, rng)?,
        };

        let mut clone = store.clone_params();
        let (f_value, f_grads) = loss_and_grads(obj, &clone, &pick(&split.meta_train), "meta-train")?;
        inner_update(&mut clone, obj, &f_grads, &pick(&split.meta_train), cfg, inner_state)?;

        let mut pair_grads = if cfg.refresh_meta_train_grad {
            loss_and_grads(obj, &clone, &pick(&split.meta_train), "meta-train refresh")?.1
        } else {
            f_grads
        };

        let g_value = if split.meta_test.is_empty() {
            0.0
        } else {
            let (g_value, g_grads) = loss_and_grads(obj, &clone, &pick(&split.meta_test), "meta-test")?;
            for (name, g) in &g_grads {
                pair_grads
                    .get_mut(name)
                    .expect("gradient maps cover the same trainable set")
                    .add_scaled(g, cfg.meta_test_weight);
            }
            g_value
        };

        outcome.pair_meta_train.push(f_value);
        outcome.pair_meta_test.push(g_value);

        for (name, g) in pair_grads {
            match accum.get_mut(&name) {
                Some(t) => t.add_scaled(&g, 1.0),
                None => {
                    accum.insert(name, g);
                }
            }
        }
    }

    let scale = 1.0 / cfg.n_pairs.max(1) as f64;
    for t in accum.values_mut() {
        t.scale_in_place(scale);
    }
    outer.apply(store, &accum)?;
    Ok(outcome)
}

/// One pooled-batch update: forward, backward, single outer step.
pub fn erm_iteration(
    store: &mut ParamStore,
    obj: &dyn Objective,
    batch: &DomainBatch,
    mut outer: OuterOpt<'_>,
) -> Result<f64, MetaError> {
    let (value, grads) = loss_and_grads(obj, store, &[batch], "erm")?;
    outer.apply(store, &grads)?;
    Ok(value)
}

/// Early stopping on a validation metric (lower is better). Strict
/// improvement resets the countdown; ties keep the earlier epoch.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        match self.best {
            None => {
                self.best = Some((epoch, value));
                StopDecision::Improved
            }
            Some((_, best_value)) if value < best_value => {
                self.best = Some((epoch, value));
                StopDecision::Improved
            }
            Some((best_epoch, _)) => {
                if epoch - best_epoch >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub method: Method,
    pub meta: MetaConfig,
    /// Pooled batch size for ERM iterations.
    pub erm_batch: usize,
    pub schedule: CyclicSchedule,
    pub adamw: AdamWConfig,
    pub outer: OuterKind,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            method: Method::Mldg,
            meta: MetaConfig::default(),
            erm_batch: 16,
            schedule: CyclicSchedule::default(),
            adamw: AdamWConfig::default(),
            outer: OuterKind::Adamw,
            max_epochs: 100,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_eer: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub best_val_eer: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub log: Vec<EpochRecord>,
}

/// Detection scores for every example of a set, in deterministic
/// (domain, example) order. Scoring batches are chunked to bound the
/// graph size.
pub fn score_domain_set(
    model: &Model,
    store: &ParamStore,
    set: &DomainSet,
) -> Result<ScoreSet, MetaError> {
    let mut scores = ScoreSet::new();
    let mut buf: Vec<(&crate::data::Example, Tensor)> = Vec::new();
    let chunk = 32;
    let flush = |buf: &mut Vec<(&crate::data::Example, Tensor)>,
                     scores: &mut ScoreSet|
     -> Result<(), MetaError> {
        if buf.is_empty() {
            return Ok(());
        }
        let feats: Vec<Tensor> = buf.iter().map(|(_, t)| t.clone()).collect();
        let vals = model.scores(store, &feats)?;
        for ((ex, _), s) in buf.iter().zip(vals) {
            scores.push(ex.example_id.clone(), s, ex.label);
        }
        buf.clear();
        Ok(())
    };
    for domain in &set.domains {
        for ex in &domain.examples {
            buf.push((ex, ex.features()?.clone()));
            if buf.len() >= chunk {
                flush(&mut buf, &mut scores)?;
            }
        }
    }
    flush(&mut buf, &mut scores)?;
    Ok(scores)
}

/// Full training run with per-epoch validation EER, the cyclic schedule,
/// and early stopping. Keeps the checkpoint with the lowest validation
/// EER (earliest epoch wins ties).
pub fn train(
    model: &Model,
    mut store: ParamStore,
    train_set: &DomainSet,
    dev_set: &DomainSet,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome, MetaError> {
    let mut dev_labels = dev_set.all_examples().map(|e| e.label);
    let first = dev_labels.next().ok_or(MetaError::SingleClassValidation)?;
    if dev_labels.all(|l| l == first) {
        return Err(MetaError::SingleClassValidation);
    }

    // Materialize per-domain pools once; feature access may hit disk.
    let mut pools: Vec<(u32, Vec<(&Tensor, usize)>)> = Vec::new();
    for domain in &train_set.domains {
        let mut pool = Vec::with_capacity(domain.examples.len());
        for ex in &domain.examples {
            pool.push((ex.features()?, ex.label.class_index()));
        }
        pools.push((domain.domain_id, pool));
    }
    let total: usize = pools.iter().map(|(_, p)| p.len()).sum();
    if total == 0 {
        return Err(MetaError::EmptyBatch);
    }

    let mut batch_rng = substream(seed, "batch");
    let mut split_rng = substream(seed, "meta-split");
    let mut outer_state = AdamWState::new(settings.adamw);
    let mut inner_state: Option<AdamWState> = None;
    let mut stopper = EarlyStopper::new(settings.patience);

    let mut best_params = store.clone_params();
    let mut best_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut log = Vec::new();
    let mut stopped_early = false;
    let mut epochs_run = 0usize;

    for epoch in 1..=settings.max_epochs {
        let started = Instant::now();
        let lr = settings.schedule.lr_at((epoch - 1) as f64);
        outer_state.set_lr(lr);

        let mut losses = Vec::new();
        match settings.method {
            Method::Erm => {
                // Pooled view of all domains, reshuffled each epoch.
                let mut order: Vec<(usize, usize)> = pools
                    .iter()
                    .enumerate()
                    .flat_map(|(d, (_, p))| (0..p.len()).map(move |i| (d, i)))
                    .collect();
                order.shuffle(&mut batch_rng);
                for chunk in order.chunks(settings.erm_batch.max(1)) {
                    let batch = DomainBatch {
                        domain_id: 0,
                        features: chunk.iter().map(|&(d, i)| pools[d].1[i].0.clone()).collect(),
                        labels: chunk.iter().map(|&(d, i)| pools[d].1[i].1).collect(),
                    };
                    let outer = outer_opt(settings.outer, &mut outer_state, lr);
                    losses.push(erm_iteration(&mut store, model, &batch, outer)?);
                }
            }
            Method::Mldg => {
                let meta_batch = pools.len() * settings.meta.per_domain_batch;
                let iters = total.div_ceil(meta_batch.max(1));
                for _ in 0..iters {
                    let batches = sample_meta_batches(
                        &pools,
                        settings.meta.per_domain_batch,
                        &mut batch_rng,
                    )?;
                    let outer = outer_opt(settings.outer, &mut outer_state, lr);
                    let out = mldg_iteration(
                        &mut store,
                        model,
                        &batches,
                        &settings.meta,
                        outer,
                        &mut split_rng,
                        None,
                        &mut inner_state,
                    )?;
                    losses.push(out.mean_meta_train());
                }
            }
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;

        let val_scores = score_domain_set(model, &store, dev_set)?;
        let val_eer = eer(&val_scores)?.eer;
        epochs_run = epoch;
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_eer,
            lr,
            wall_time_s: started.elapsed().as_secs_f64(),
        });

        match stopper.observe(epoch, val_eer) {
            StopDecision::Improved => {
                best_params = store.clone_params();
                best_epoch = epoch;
                best_val = val_eer;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainOutcome {
        best_params,
        best_epoch,
        best_val_eer: best_val,
        epochs_run,
        stopped_early,
        log,
    })
}

fn outer_opt<'a>(kind: OuterKind, state: &'a mut AdamWState, lr: f64) -> OuterOpt<'a> {
    match kind {
        OuterKind::Adamw => OuterOpt::AdamW(state),
        OuterKind::Sgd => OuterOpt::Sgd { lr },
    }
}

fn sample_meta_batches(
    pools: &[(u32, Vec<(&Tensor, usize)>)],
    per_domain: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DomainBatch>, MetaError> {
    pools
        .iter()
        .map(|(domain_id, pool)| {
            if pool.len() < per_domain {
                return Err(MetaError::DomainTooSmall {
                    domain_id: *domain_id,
                    have: pool.len(),
                    need: per_domain,
                });
            }
            let idx = rand::seq::index::sample(rng, pool.len(), per_domain);
            Ok(DomainBatch {
                domain_id: *domain_id,
                features: idx.iter().map(|i| pool[i].0.clone()).collect(),
                labels: idx.iter().map(|i| pool[i].1).collect(),
            })
        })
        .collect()
}

//! Toy transformer encoder with low-rank adapters on the attention
//! projections and a pooled two-class head.
//!
//! The encoder is pre-norm: `x + attn(LN(x))` then `x + ffn(LN(x))`, a
//! final layer norm, mean-pooling over time, and a two-layer MLP head
//! producing log-softmax scores for {bonafide, spoof}.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::graph::{AutodiffError, Graph, NodeId};
use crate::params::{ParamError, ParamStore};
use crate::rng::substream;
use crate::tensor::Tensor;

pub const DEFAULT_LORA_ALPHA: f64 = 2.0;
const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    pub head_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            d_ff: 32,
            seq_len: 32,
            head_hidden: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.seq_len,
            self.head_hidden,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(ModelError::InvalidConfig(format!("{self:?}: all dims must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Scalar count of the classifier head (two dense layers).
    pub fn head_param_count(&self) -> u64 {
        let d = self.d_model as u64;
        let h = self.head_hidden as u64;
        d * h + h + h * 2 + 2
    }
}

/// Which parameters train: everything, the head alone, or low-rank
/// adapters plus the head over a frozen backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    Full,
    HeadOnly,
    Lora { rank: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Query,
    Key,
    Value,
    OutProj,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Query, Target::Key, Target::Value, Target::OutProj];

    pub fn as_str(&self) -> &'static str {
        match self {
            Target::Query => "q",
            Target::Key => "k",
            Target::Value => "v",
            Target::OutProj => "out",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One low-rank factor pair attached to a base projection.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub target: Target,
    pub layer_index: usize,
}

/// Effective weight update contributed by an adapter: `alpha * A * B`.
pub fn adapter_delta(adapter: &LoraAdapter) -> Tensor {
    let mut d = adapter.a.matmul(&adapter.b);
    d.scale_in_place(adapter.alpha);
    d
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    InvalidConfig(String),
    RankOutOfRange { rank: usize, d_model: usize },
    NoAdapters,
    BadInput(String),
    Param(ParamError),
    Autodiff(AutodiffError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidConfig(s) => write!(f, "invalid encoder config: {s}"),
            ModelError::RankOutOfRange { rank, d_model } => {
                write!(f, "adapter rank {rank} out of range for d_model {d_model}")
            }
            ModelError::NoAdapters => write!(f, "model has no adapters"),
            ModelError::BadInput(s) => write!(f, "bad model input: {s}"),
            ModelError::Param(e) => write!(f, "{e}"),
            ModelError::Autodiff(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<ParamError> for ModelError {
    fn from(e: ParamError) -> Self {
        ModelError::Param(e)
    }
}

impl From<AutodiffError> for ModelError {
    fn from(e: AutodiffError) -> Self {
        ModelError::Autodiff(e)
    }
}

/// Trainable-parameter count for a stack of adapted projections plus a
/// classifier head: `layers * n_targets * rank * (d + m) + head_params`.
pub fn count_trainable(
    layers: u64,
    d: u64,
    m: u64,
    rank: u64,
    n_targets: u64,
    head_params: u64,
) -> u64 {
    layers * n_targets * rank * (d + m) + head_params
}

fn weight_name(layer: usize, target: Target) -> String {
    format!("enc.{layer}.{target}.w")
}

fn bias_name(layer: usize, target: Target) -> String {
    format!("enc.{layer}.{target}.b")
}

fn lora_name(layer: usize, target: Target, factor: char) -> String {
    format!("enc.{layer}.{target}.lora_{factor}")
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: EncoderConfig,
    pub mode: AdaptMode,
    pub lora_alpha: f64,
}

/// Builds the model parameters for `(cfg, mode, seed)` and returns the
/// forward-pass handle. Base weights are drawn from a seed sub-stream
/// independent of the adapter and head streams, so the frozen backbone is
/// identical across modes for a given seed. Adapter `A` factors start
/// Gaussian and `B` factors start at zero, so training begins exactly at
/// the frozen-base function.
pub fn build_model(
    cfg: &EncoderConfig,
    mode: AdaptMode,
    seed: u64,
) -> Result<(Model, ParamStore), ModelError> {
    cfg.validate()?;
    if let AdaptMode::Lora { rank } = mode {
        if rank == 0 || rank > cfg.d_model {
            return Err(ModelError::RankOutOfRange {
                rank,
                d_model: cfg.d_model,
            });
        }
    }

    let mut base_rng = substream(seed, "init.base");
    let mut adapter_rng = substream(seed, "init.adapter");
    let mut head_rng = substream(seed, "init.head");

    let d = cfg.d_model;
    let base_trainable = matches!(mode, AdaptMode::Full);
    let mut store = ParamStore::new();

    let ln = |store: &mut ParamStore, name: String| -> Result<(), ModelError> {
        store.insert(&format!("{name}.g"), Tensor::new(vec![d], vec![1.0; d]), base_trainable)?;
        store.insert(&format!("{name}.b"), Tensor::zeros(vec![d]), base_trainable)?;
        Ok(())
    };

    for layer in 0..cfg.n_layers {
        ln(&mut store, format!("enc.{layer}.ln1"))?;
        for target in Target::ALL {
            store.insert(
                &weight_name(layer, target),
                Tensor::randn(vec![d, d], INIT_STD, &mut base_rng),
                base_trainable,
            )?;
            store.insert(&bias_name(layer, target), Tensor::zeros(vec![d]), base_trainable)?;
            if let AdaptMode::Lora { rank } = mode {
                store.insert(
                    &lora_name(layer, target, 'a'),
                    Tensor::randn(vec![d, rank], INIT_STD, &mut adapter_rng),
                    true,
                )?;
                store.insert(&lora_name(layer, target, 'b'), Tensor::zeros(vec![rank, d]), true)?;
            }
        }
        ln(&mut store, format!("enc.{layer}.ln2"))?;
        store.insert(
            &format!("enc.{layer}.ff.w1"),
            Tensor::randn(vec![d, cfg.d_ff], INIT_STD, &mut base_rng),
            base_trainable,
        )?;
        store.insert(&format!("enc.{layer}.ff.b1"), Tensor::zeros(vec![cfg.d_ff]), base_trainable)?;
        store.insert(
            &format!("enc.{layer}.ff.w2"),
            Tensor::randn(vec![cfg.d_ff, d], INIT_STD, &mut base_rng),
            base_trainable,
        )?;
        store.insert(&format!("enc.{layer}.ff.b2"), Tensor::zeros(vec![d]), base_trainable)?;
    }
    ln(&mut store, "enc.final_ln".to_string())?;

    // Classifier head is trainable in every mode.
    store.insert(
        "head.w1",
        Tensor::randn(vec![d, cfg.head_hidden], INIT_STD, &mut head_rng),
        true,
    )?;
    store.insert("head.b1", Tensor::zeros(vec![cfg.head_hidden]), true)?;
    store.insert(
        "head.w2",
        Tensor::randn(vec![cfg.head_hidden, 2], INIT_STD, &mut head_rng),
        true,
    )?;
    store.insert("head.b2", Tensor::zeros(vec![2]), true)?;

    Ok((
        Model {
            cfg: *cfg,
            mode,
            lora_alpha: DEFAULT_LORA_ALPHA,
        },
        store,
    ))
}

impl Model {
    fn adapted_projection(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        layer: usize,
        target: Target,
    ) -> Result<NodeId, ModelError> {
        let w = g.param(store, &weight_name(layer, target))?;
        let b = g.param(store, &bias_name(layer, target))?;
        let xw = g.matmul(x, w)?;
        let mut y = g.add_bias(xw, b)?;
        if matches!(self.mode, AdaptMode::Lora { .. }) {
            let a = g.param(store, &lora_name(layer, target, 'a'))?;
            let bb = g.param(store, &lora_name(layer, target, 'b'))?;
            let xa = g.matmul(x, a)?;
            let xab = g.matmul(xa, bb)?;
            let delta = g.scale(xab, self.lora_alpha)?;
            y = g.add(y, delta)?;
        }
        Ok(y)
    }

    fn layer_norm(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        name: &str,
    ) -> Result<NodeId, ModelError> {
        let gain = g.param(store, &format!("{name}.g"))?;
        let bias = g.param(store, &format!("{name}.b"))?;
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }

    /// Encoder forward for one example: `[seq, d] -> [d]` pooled vector.
    fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &Tensor,
    ) -> Result<NodeId, ModelError> {
        if features.shape().len() != 2 || features.cols() != self.cfg.d_model {
            return Err(ModelError::BadInput(format!(
                "feature shape {:?}, expected [seq, {}]",
                features.shape(),
                self.cfg.d_model
            )));
        }
        let n_heads = self.cfg.n_heads;
        let dh = self.cfg.d_model / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = g.value(features.clone());
        for layer in 0..self.cfg.n_layers {
            let h = self.layer_norm(g, store, x, &format!("enc.{layer}.ln1"))?;
            let q = self.adapted_projection(g, store, h, layer, Target::Query)?;
            let k = self.adapted_projection(g, store, h, layer, Target::Key)?;
            let v = self.adapted_projection(g, store, h, layer, Target::Value)?;

            let mut heads = Vec::with_capacity(n_heads);
            for i in 0..n_heads {
                let (lo, hi) = (i * dh, (i + 1) * dh);
                let qi = g.slice_cols(q, lo, hi)?;
                let ki = g.slice_cols(k, lo, hi)?;
                let vi = g.slice_cols(v, lo, hi)?;
                let kt = g.transpose(ki)?;
                let raw = g.matmul(qi, kt)?;
                let scaled = g.scale(raw, scale)?;
                let attn = g.softmax_rows(scaled)?;
                heads.push(g.matmul(attn, vi)?);
            }
            let cat = g.concat_cols(&heads)?;
            let proj = self.adapted_projection(g, store, cat, layer, Target::OutProj)?;
            x = g.add(x, proj)?;

            let h2 = self.layer_norm(g, store, x, &format!("enc.{layer}.ln2"))?;
            let w1 = g.param(store, &format!("enc.{layer}.ff.w1"))?;
            let b1 = g.param(store, &format!("enc.{layer}.ff.b1"))?;
            let w2 = g.param(store, &format!("enc.{layer}.ff.w2"))?;
            let b2 = g.param(store, &format!("enc.{layer}.ff.b2"))?;
            let f1 = g.matmul(h2, w1)?;
            let f1 = g.add_bias(f1, b1)?;
            let act = g.gelu(f1)?;
            let f2 = g.matmul(act, w2)?;
            let f2 = g.add_bias(f2, b2)?;
            x = g.add(x, f2)?;
        }
        let x = self.layer_norm(g, store, x, "enc.final_ln")?;
        Ok(g.mean_axis0(x)?)
    }

    /// Class logits for a batch: `[B, 2]`.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &[Tensor],
    ) -> Result<NodeId, ModelError> {
        if features.is_empty() {
            return Err(ModelError::BadInput("empty batch".into()));
        }
        let pooled: Vec<NodeId> = features
            .iter()
            .map(|f| self.encode(g, store, f))
            .collect::<Result<_, _>>()?;
        let rows = g.concat_rows(&pooled)?;
        let w1 = g.param(store, "head.w1")?;
        let b1 = g.param(store, "head.b1")?;
        let w2 = g.param(store, "head.w2")?;
        let b2 = g.param(store, "head.b2")?;
        let h = g.matmul(rows, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h)?;
        let out = g.matmul(h, w2)?;
        Ok(g.add_bias(out, b2)?)
    }

    /// Log-softmax class probabilities for a batch: `[B, 2]`.
    pub fn log_probs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &[Tensor],
    ) -> Result<NodeId, ModelError> {
        let logits = self.logits(g, store, features)?;
        Ok(g.log_softmax_rows(logits)?)
    }

    /// Mean NLL over a batch; the scalar loss node.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &[Tensor],
        labels: &[usize],
    ) -> Result<NodeId, ModelError> {
        let logp = self.log_probs(g, store, features)?;
        Ok(g.nll_mean(logp, labels)?)
    }

    /// Detection scores, one per example: log P(bonafide) - log P(spoof).
    /// Higher means more bonafide.
    pub fn scores(&self, store: &ParamStore, features: &[Tensor]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let logp = self.log_probs(&mut g, store, features)?;
        let t = g.tensor(logp);
        Ok((0..t.rows()).map(|i| t.at(i, 0) - t.at(i, 1)).collect())
    }

    /// The adapter pairs of a store built in LoRA mode, ordered by
    /// (layer, target).
    pub fn adapters(&self, store: &ParamStore) -> Result<Vec<LoraAdapter>, ModelError> {
        let rank = match self.mode {
            AdaptMode::Lora { rank } => rank,
            _ => return Err(ModelError::NoAdapters),
        };
        let mut out = Vec::new();
        for layer in 0..self.cfg.n_layers {
            for target in Target::ALL {
                out.push(LoraAdapter {
                    a: store.tensor(&lora_name(layer, target, 'a'))?.clone(),
                    b: store.tensor(&lora_name(layer, target, 'b'))?.clone(),
                    rank,
                    alpha: self.lora_alpha,
                    target,
                    layer_index: layer,
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn toy_cfg() -> EncoderConfig {
        EncoderConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            d_ff: 16,
            seq_len: 8,
            head_hidden: 4,
        }
    }

    fn random_batch(cfg: &EncoderConfig, n: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
        let mut rng = substream(seed, "test.batch");
        let feats = (0..n)
            .map(|_| Tensor::randn(vec![cfg.seq_len, cfg.d_model], 1.0, &mut rng))
            .collect();
        let labels = (0..n).map(|i| i % 2).collect();
        (feats, labels)
    }

    #[test]
    fn adapter_structure_matches_config() {
        let cfg = toy_cfg();
        let (model, store) = build_model(&cfg, AdaptMode::Lora { rank: 4 }, 1).unwrap();
        let adapters = model.adapters(&store).unwrap();
        assert_eq!(adapters.len(), 2 * 4);
        for ad in &adapters {
            assert_eq!(ad.a.shape(), &[16, 4]);
            assert_eq!(ad.b.shape(), &[4, 16]);
        }
    }

    #[test]
    fn head_only_mode_trains_exactly_the_head() {
        let (_, store) = build_model(&toy_cfg(), AdaptMode::HeadOnly, 3).unwrap();
        let trainable = store.trainable_names();
        assert_eq!(trainable, vec!["head.w1", "head.b1", "head.w2", "head.b2"]);
    }

    #[test]
    fn build_is_deterministic_in_the_seed() {
        let cfg = toy_cfg();
        let (_, s1) = build_model(&cfg, AdaptMode::Lora { rank: 8 }, 99).unwrap();
        let (_, s2) = build_model(&cfg, AdaptMode::Lora { rank: 8 }, 99).unwrap();
        assert!(s1.value_eq(&s2));
        let (_, s3) = build_model(&cfg, AdaptMode::Lora { rank: 8 }, 100).unwrap();
        assert!(!s1.value_eq(&s3));
    }

    #[test]
    fn rank_above_d_model_is_rejected() {
        let err = build_model(&toy_cfg(), AdaptMode::Lora { rank: 17 }, 0).unwrap_err();
        assert_eq!(
            err,
            ModelError::RankOutOfRange {
                rank: 17,
                d_model: 16
            }
        );
    }

    #[test]
    fn count_trainable_reproduces_published_scale() {
        // 24-layer, 1024-dim backbone, 4 targets, 447K head.
        assert_eq!(count_trainable(24, 1024, 1024, 16, 4, 447_000), 3_592_728);
        assert_eq!(count_trainable(24, 1024, 1024, 8, 4, 447_000), 2_019_864);
        assert_eq!(count_trainable(24, 1024, 1024, 4, 4, 447_000), 1_233_432);
        assert_eq!(count_trainable(24, 1024, 1024, 2, 4, 447_000), 840_216);
    }

    #[test]
    fn count_trainable_matches_store_enumeration() {
        let cfg = toy_cfg();
        for rank in [2usize, 4, 8, 16] {
            let (_, store) = build_model(&cfg, AdaptMode::Lora { rank }, 5).unwrap();
            let expected = count_trainable(
                cfg.n_layers as u64,
                cfg.d_model as u64,
                cfg.d_model as u64,
                rank as u64,
                4,
                cfg.head_param_count(),
            );
            assert_eq!(store.num_trainable_scalars() as u64, expected);
        }
    }

    #[test]
    fn adapter_delta_zero_when_a_is_zero() {
        let ad = LoraAdapter {
            a: Tensor::zeros(vec![4, 2]),
            b: Tensor::new(vec![2, 4], (0..8).map(|i| i as f64).collect()),
            rank: 2,
            alpha: 2.0,
            target: Target::Query,
            layer_index: 0,
        };
        assert!(adapter_delta(&ad).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adapter_delta_rank_one_outer_product() {
        // A = e1 (4x1), B = e1^T (1x4), alpha = 2 -> delta = 2 e1 e1^T
        let mut a = Tensor::zeros(vec![4, 1]);
        a.data_mut()[0] = 1.0;
        let mut b = Tensor::zeros(vec![1, 4]);
        b.data_mut()[0] = 1.0;
        let ad = LoraAdapter {
            a,
            b,
            rank: 1,
            alpha: 2.0,
            target: Target::Value,
            layer_index: 0,
        };
        let delta = adapter_delta(&ad);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == 0 && j == 0 { 2.0 } else { 0.0 };
                assert_eq!(delta.at(i, j), want);
            }
        }
    }

    #[test]
    fn zeroed_adapters_match_frozen_base_exactly() {
        let cfg = toy_cfg();
        let seed = 11;
        let (lora_model, lora_store) = build_model(&cfg, AdaptMode::Lora { rank: 4 }, seed).unwrap();
        let (base_model, base_store) = build_model(&cfg, AdaptMode::HeadOnly, seed).unwrap();
        let (feats, _) = random_batch(&cfg, 3, 2);

        let mut g1 = Graph::new();
        let l1 = lora_model.logits(&mut g1, &lora_store, &feats).unwrap();
        let mut g2 = Graph::new();
        let l2 = base_model.logits(&mut g2, &base_store, &feats).unwrap();

        let (t1, t2) = (g1.tensor(l1), g2.tensor(l2));
        assert_eq!(t1.shape(), t2.shape());
        for (a, b) in t1.data().iter().zip(t2.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "logits diverge with zero adapters");
        }
    }

    #[test]
    fn logits_are_batch_permutation_covariant() {
        let cfg = toy_cfg();
        let (model, store) = build_model(&cfg, AdaptMode::Lora { rank: 2 }, 7).unwrap();
        let (feats, _) = random_batch(&cfg, 4, 3);
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Tensor> = perm.iter().map(|&i| feats[i].clone()).collect();

        let mut g1 = Graph::new();
        let n1 = model.logits(&mut g1, &store, &feats).unwrap();
        let l1 = g1.tensor(n1).clone();
        let mut g2 = Graph::new();
        let n2 = model.logits(&mut g2, &store, &permuted).unwrap();
        let l2 = g2.tensor(n2).clone();

        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..2 {
                assert_eq!(l2.at(new_row, c).to_bits(), l1.at(old_row, c).to_bits());
            }
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            seq_len: 4,
            head_hidden: 4,
        };
        let (model, mut store) = build_model(&cfg, AdaptMode::Lora { rank: 2 }, 21).unwrap();
        // Randomize every trainable tensor (B factors start at zero and
        // would otherwise zero out the A gradients).
        let mut rng = substream(99, "test.randomize");
        for name in store.trainable_names() {
            let shape = store.tensor(&name).unwrap().shape().to_vec();
            *store.tensor_mut(&name).unwrap() = Tensor::randn(shape, 0.5, &mut rng);
        }
        let (feats, labels) = random_batch(&cfg, 2, 13);

        let analytic = {
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &store, &feats, &labels).unwrap();
            g.backward(loss, &store).unwrap()
        };
        let numeric = gradcheck::finite_diff_grads(
            &store,
            |s| {
                let mut g = Graph::new();
                let loss = model.batch_loss(&mut g, s, &feats, &labels).unwrap();
                g.tensor(loss).item()
            },
            1e-5,
        );
        for (name, fd) in &numeric {
            let err = gradcheck::relative_tensor_error(&analytic[name], fd);
            assert!(err < 1e-6, "param `{name}`: rel err {err:.3e}");
        }
    }

    #[test]
    fn straight_line_mlp_forward_oracle() {
        // A 3-layer MLP built on the graph must equal an independent
        // straight-line re-implementation of the same arithmetic.
        let mut rng = substream(5, "test.mlp");
        let dims = [6usize, 5, 4, 2];
        let mut store = ParamStore::new();
        for i in 0..3 {
            store
                .insert(
                    &format!("w{i}"),
                    Tensor::randn(vec![dims[i], dims[i + 1]], 0.7, &mut rng),
                    true,
                )
                .unwrap();
            store
                .insert(&format!("b{i}"), Tensor::randn(vec![dims[i + 1]], 0.3, &mut rng), true)
                .unwrap();
        }
        let x = Tensor::randn(vec![1, 6], 1.0, &mut rng);
        let target = 1usize;

        // Graph path.
        let graph_loss = {
            let mut g = Graph::new();
            let mut h = g.value(x.clone());
            for i in 0..3 {
                let w = g.param(&store, &format!("w{i}")).unwrap();
                let b = g.param(&store, &format!("b{i}")).unwrap();
                let mm = g.matmul(h, w).unwrap();
                h = g.add_bias(mm, b).unwrap();
                if i < 2 {
                    h = g.gelu(h).unwrap();
                }
            }
            let lp = g.log_softmax_rows(h).unwrap();
            let loss = g.nll_mean(lp, &[target]).unwrap();
            g.tensor(loss).item()
        };

        // Straight-line re-implementation.
        let oracle_loss = {
            let gelu = |x: f64| {
                let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            };
            let mut h: Vec<f64> = x.data().to_vec();
            for i in 0..3 {
                let w = store.tensor(&format!("w{i}")).unwrap();
                let b = store.tensor(&format!("b{i}")).unwrap();
                let (rows, cols) = (w.rows(), w.cols());
                let mut next = vec![0.0; cols];
                for (c, nv) in next.iter_mut().enumerate() {
                    let mut acc = b.data()[c];
                    for r in 0..rows {
                        acc += h[r] * w.at(r, c);
                    }
                    *nv = acc;
                }
                if i < 2 {
                    for v in next.iter_mut() {
                        *v = gelu(*v);
                    }
                }
                h = next;
            }
            let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = h.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            -(h[target] - lse)
        };

        assert!(
            (graph_loss - oracle_loss).abs() < 1e-12,
            "{graph_loss} vs {oracle_loss}"
        );
    }
}

//! Acceptance suite: one test per release criterion, each printing a
//! PASS line (visible with `cargo test --test acceptance -- --nocapture`).
//! Expected values come from independent oracles (closed forms,
//! exhaustive sweeps, finite differences), not from the code paths under
//! test.

mod common;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use metalora::config::RunConfig;
use metalora::data::{generate_corpus, Artifact, ArtifactKind, CorpusSpec, DomainSpec, Label};
use metalora::gradcheck;
use metalora::graph::Graph;
use metalora::meta::{
    mldg_iteration, train, DomainBatch, EarlyStopper, MetaConfig, MetaSplit, Method, Objective,
    OuterOpt, StopDecision, TrainSettings,
};
use metalora::metrics::{det_curve, eer, probit, ScoreSet};
use metalora::model::{
    adapter_delta, build_model, count_trainable, AdaptMode, EncoderConfig,
};
use metalora::optim::CyclicSchedule;
use metalora::params::ParamStore;
use metalora::rng::substream;
use metalora::runner::{cmd_eval, cmd_train};
use metalora::svd::singular_values;
use metalora::tensor::Tensor;

#[test]
fn criterion_1_parameter_count_reproduction() {
    // 24-layer, 1024-dim backbone, adapters on 4 projections, 447K head.
    let cases: [(u64, u64, f64); 4] = [
        (2, 393_216, 0.84),
        (4, 786_432, 1.23),
        (8, 1_572_864, 2.02),
        (16, 3_145_728, 3.59),
    ];
    for (rank, lora_exact, total_millions) in cases {
        let total = count_trainable(24, 1024, 1024, rank, 4, 447_000);
        let lora_part = total - 447_000;
        assert_eq!(lora_part, lora_exact, "rank {rank}: adapter parameter count");
        let rel = (total as f64 / 1e6 - total_millions).abs() / total_millions;
        assert!(
            rel < 0.005,
            "rank {rank}: total {total} vs {total_millions}M (rel {rel:.4})"
        );
    }
    println!("criterion 1 (parameter-count reproduction): PASS");
}

/// Per-domain quadratic objective: loss = 0.5 * (theta - c_k)^2.
struct Quadratic {
    centers: Vec<f64>,
}

impl Objective for Quadratic {
    fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &DomainBatch,
    ) -> Result<metalora::graph::NodeId, metalora::model::ModelError> {
        let theta = g.param(store, "theta")?;
        let c = g.value(Tensor::scalar(self.centers[batch.domain_id as usize]));
        let d = g.sub(theta, c)?;
        let sq = g.mul(d, d)?;
        Ok(g.scale(sq, 0.5)?)
    }
}

#[test]
fn criterion_2_first_order_update_oracle() {
    // F(theta) = theta^2/2, G(theta) = (theta-2)^2/2, theta = 1,
    // alpha = 0.5, beta = 0.5, plain outer step gamma = 0.1.
    // Closed form: g_F = 1; theta' = 0.5; g_G = -1.5;
    // combined = 1 + 0.5*(-1.5) = 0.25; theta_new = 1 - 0.025 = 0.975.
    let mut store = ParamStore::new();
    store.insert("theta", Tensor::scalar(1.0), true).unwrap();
    let obj = Quadratic {
        centers: vec![0.0, 2.0],
    };
    let batches: Vec<DomainBatch> = (0..2)
        .map(|i| DomainBatch {
            domain_id: i,
            features: vec![Tensor::scalar(0.0)],
            labels: vec![0],
        })
        .collect();
    let cfg = MetaConfig {
        inner_lr: 0.5,
        meta_test_weight: 0.5,
        n_pairs: 1,
        ..MetaConfig::default()
    };
    let split = MetaSplit {
        meta_train: vec![0],
        meta_test: vec![1],
    };
    let mut rng = substream(0, "acceptance.c2");
    mldg_iteration(
        &mut store,
        &obj,
        &batches,
        &cfg,
        OuterOpt::Sgd { lr: 0.1 },
        &mut rng,
        Some(&[split]),
        &mut None,
    )
    .unwrap();
    let theta = store.tensor("theta").unwrap().item();
    assert!(
        (theta - 0.975).abs() < 1e-10,
        "theta = {theta}, expected 0.975 within 1e-10"
    );
    println!("criterion 2 (first-order update oracle): PASS");
}

#[test]
fn criterion_3_gradient_correctness() {
    let started = std::time::Instant::now();
    let ranks = [2usize, 4, 8, 16];
    let mut rng = substream(11, "acceptance.c3");
    let mut checked_tensors = 0usize;

    for model_idx in 0..20 {
        let rank = ranks[model_idx % ranks.len()];
        let cfg = EncoderConfig {
            n_layers: 1 + model_idx % 2,
            d_model: 16,
            n_heads: if model_idx % 3 == 0 { 2 } else { 4 },
            d_ff: 8 + 8 * (model_idx % 2),
            seq_len: 4,
            head_hidden: 4,
        };
        let (model, mut store) =
            build_model(&cfg, AdaptMode::Lora { rank }, 1000 + model_idx as u64).unwrap();
        // Random model: every trainable tensor re-drawn (B factors start
        // at zero, which would hide the A-factor gradients).
        for name in store.trainable_names() {
            let shape = store.tensor(&name).unwrap().shape().to_vec();
            *store.tensor_mut(&name).unwrap() = Tensor::randn(shape, 0.5, &mut rng);
        }
        let batch: Vec<Tensor> = (0..2)
            .map(|_| Tensor::randn(vec![cfg.seq_len, cfg.d_model], 1.0, &mut rng))
            .collect();
        let labels = vec![0usize, 1];

        let analytic = {
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &store, &batch, &labels).unwrap();
            g.backward(loss, &store).unwrap()
        };
        let numeric = gradcheck::finite_diff_grads(
            &store,
            |s| {
                let mut g = Graph::new();
                let loss = model.batch_loss(&mut g, s, &batch, &labels).unwrap();
                g.tensor(loss).item()
            },
            1e-5,
        );
        for (name, fd) in &numeric {
            let err = gradcheck::relative_tensor_error(&analytic[name], fd);
            assert!(
                err < 1e-6,
                "model {model_idx} (rank {rank}) param `{name}`: rel err {err:.3e}"
            );
            checked_tensors += 1;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "gradient check took {elapsed:.1}s (budget 120s)");
    println!(
        "criterion 3 (gradient correctness, 20 models, {checked_tensors} tensors, {elapsed:.1}s): PASS"
    );
}

#[test]
fn criterion_4_eer_oracle_equivalence() {
    let started = std::time::Instant::now();
    let mut rng = substream(4, "acceptance.c4");

    for case in 0..500 {
        let n = rng.random_range(2..=200usize);
        let n_bona = rng.random_range(1..n.max(2)).min(n - 1).max(1);
        let mut set = ScoreSet::new();
        let mut last = 0.0f64;
        for i in 0..n {
            // Reuse the previous score sometimes so ties get exercised.
            let score = if i > 0 && rng.random_range(0..10) == 0 {
                last
            } else {
                rng.random_range(-3.0..3.0)
            };
            last = score;
            let label = if i < n_bona { Label::Bonafide } else { Label::Spoof };
            set.push(format!("x{i}"), score, label);
        }
        let fast = eer(&set).unwrap().eer;
        let brute = common::eer_bruteforce(&set);
        assert!(
            fast == brute,
            "case {case}: estimator {fast} != oracle {brute}"
        );
    }

    // Perfect separation.
    let mut sep = ScoreSet::new();
    for i in 0..50 {
        sep.push(format!("b{i}"), 1.0 + i as f64 * 0.01, Label::Bonafide);
        sep.push(format!("s{i}"), -1.0 - i as f64 * 0.01, Label::Spoof);
    }
    assert_eq!(eer(&sep).unwrap().eer, 0.0);

    // Random balanced scores approach chance.
    let mut chance = ScoreSet::new();
    for i in 0..10_000 {
        let label = if i % 2 == 0 { Label::Bonafide } else { Label::Spoof };
        chance.push(format!("r{i}"), rng.random_range(-1.0..1.0), label);
    }
    let e = eer(&chance).unwrap().eer;
    assert!((e - 0.5).abs() < 0.02, "random-score EER {e}");

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "EER checks took {elapsed:.1}s (budget 30s)");
    println!("criterion 4 (EER oracle equivalence, 500 sets): PASS");
}

fn micro_corpus_spec(seq_len: usize) -> CorpusSpec {
    let mk = |domain_id, artifact_id, cycles| DomainSpec {
        domain_id,
        spoof_artifact: Artifact {
            id: artifact_id,
            kind: ArtifactKind::Harmonic { cycles, amp: 1.0 },
        },
        shared_cue_strength: 2.0,
        n_spoof: 8,
        n_bonafide: 8,
        noise_scale: 0.3,
    };
    CorpusSpec {
        seq_len,
        d_model: 16,
        dev_fraction: 0.25,
        train: vec![mk(1, 1, 2.0), mk(2, 2, 3.0), mk(3, 3, 4.0)],
        held_out: vec![mk(101, 7, 6.0)],
    }
}

#[test]
fn criterion_5_low_rank_structure() {
    let started = std::time::Instant::now();
    let cfg = EncoderConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 4,
        d_ff: 16,
        seq_len: 8,
        head_hidden: 4,
    };
    let corpus = generate_corpus(&micro_corpus_spec(8), 3).unwrap();

    // Short trained checkpoints for both methods.
    for (method, rank) in [(Method::Erm, 4usize), (Method::Mldg, 8)] {
        let (model, store) = build_model(&cfg, AdaptMode::Lora { rank }, 5).unwrap();
        let settings = TrainSettings {
            method,
            meta: MetaConfig {
                per_domain_batch: 2,
                n_pairs: 2,
                inner_lr: 0.01,
                ..MetaConfig::default()
            },
            schedule: CyclicSchedule {
                lr_min: 1e-3,
                lr_max: 5e-3,
                step_size_epochs: 4.0,
            },
            max_epochs: 3,
            patience: 5,
            ..TrainSettings::default()
        };
        let outcome = train(&model, store, &corpus.train, &corpus.dev, &settings, 5).unwrap();
        let adapters = model.adapters(&outcome.best_params).unwrap();
        assert_eq!(adapters.len(), 8);
        for ad in &adapters {
            let s = singular_values(&adapter_delta(ad));
            let top = s[0];
            if top == 0.0 {
                assert!(s.iter().all(|&x| x == 0.0));
                continue;
            }
            for &tail in &s[ad.rank..] {
                assert!(
                    tail < 1e-10 * top,
                    "{method} rank {rank}: sigma_(r+1)/sigma_1 = {:.3e}",
                    tail / top
                );
            }
        }
    }

    // Zero-initialized adapters leave the frozen-base function intact.
    let seed = 17;
    let (lora_model, lora_store) = build_model(&cfg, AdaptMode::Lora { rank: 8 }, seed).unwrap();
    let (base_model, base_store) = build_model(&cfg, AdaptMode::HeadOnly, seed).unwrap();
    let feats: Vec<Tensor> = corpus
        .dev
        .all_examples()
        .take(4)
        .map(|e| e.features().unwrap().clone())
        .collect();
    let mut g1 = Graph::new();
    let n1 = lora_model.logits(&mut g1, &lora_store, &feats).unwrap();
    let mut g2 = Graph::new();
    let n2 = base_model.logits(&mut g2, &base_store, &feats).unwrap();
    for (a, b) in g1.tensor(n1).data().iter().zip(g2.tensor(n2).data().iter()) {
        assert_eq!(a.to_bits(), b.to_bits(), "zero-adapter logits must be identical");
    }

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "low-rank checks took {elapsed:.1}s (budget 30s)");
    println!("criterion 5 (low-rank structure + zero-init equivalence): PASS");
}

#[test]
fn criterion_6_schedule_and_stopping() {
    let s = CyclicSchedule::default();
    assert_eq!(s.lr_at(0.0), 1e-7);
    assert_eq!(s.lr_at(12.0), 1e-5);
    assert_eq!(s.lr_at(24.0), 1e-7);

    // Scripted validation sequence: improvement at epoch 2, then 10
    // non-improving epochs halt at epoch 12 with the best at epoch 2.
    let seq = [10.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0];
    let mut stopper = EarlyStopper::new(10);
    let mut halted_at = None;
    for (i, &v) in seq.iter().enumerate() {
        if stopper.observe(i + 1, v) == StopDecision::Stop {
            halted_at = Some(i + 1);
            break;
        }
    }
    assert_eq!(halted_at, Some(12));
    assert_eq!(stopper.best(), Some((2, 9.0)));

    // A real training run retains the checkpoint of the best epoch.
    let cfg = EncoderConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 8,
        seq_len: 8,
        head_hidden: 4,
    };
    let corpus = generate_corpus(&micro_corpus_spec(8), 9).unwrap();
    let (model, store) = build_model(&cfg, AdaptMode::Lora { rank: 2 }, 3).unwrap();
    let settings = TrainSettings {
        method: Method::Erm,
        max_epochs: 5,
        patience: 10,
        schedule: CyclicSchedule {
            lr_min: 1e-3,
            lr_max: 5e-3,
            step_size_epochs: 4.0,
        },
        ..TrainSettings::default()
    };
    let outcome = train(&model, store, &corpus.train, &corpus.dev, &settings, 3).unwrap();
    let argmin = outcome
        .log
        .iter()
        .min_by(|a, b| {
            a.val_eer
                .partial_cmp(&b.val_eer)
                .unwrap()
                .then(a.epoch.cmp(&b.epoch))
        })
        .unwrap();
    assert_eq!(outcome.best_epoch, argmin.epoch);
    let rescued = metalora::meta::score_domain_set(&model, &outcome.best_params, &corpus.dev).unwrap();
    assert_eq!(eer(&rescued).unwrap().eer, outcome.best_val_eer);

    println!("criterion 6 (schedule anchors + early stopping): PASS");
}

#[test]
fn criterion_7_zero_shot_benchmark() {
    let started = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();

    let mut results: BTreeMap<Method, (f64, f64)> = BTreeMap::new();
    for method in [Method::Erm, Method::Mldg] {
        let mut cfg = RunConfig::toy_benchmark();
        cfg.run.method = method;
        cfg.run.out_dir = dir.path().join(format!("{method}"));
        let cfg = cfg.resolve().unwrap();
        assert_eq!(cfg.run.rank, Some(16));
        assert_eq!(cfg.run.seeds, vec![999, 2023, 555, 123, 42]);

        cmd_train(&cfg).unwrap();
        let report = cmd_eval(&cfg, false).unwrap();
        let held_out = report
            .sets
            .iter()
            .find(|s| s.name == "held_out")
            .expect("held-out eval set");
        results.insert(
            method,
            (held_out.eer_mean_pct, held_out.eer_std_pct.unwrap()),
        );
    }

    let (erm_mean, erm_std) = results[&Method::Erm];
    let (mldg_mean, mldg_std) = results[&Method::Mldg];
    println!(
        "criterion 7 benchmark: ERM {erm_mean:.2} +/- {erm_std:.2} %, \
         MLDG {mldg_mean:.2} +/- {mldg_std:.2} % ({:.0}s)",
        started.elapsed().as_secs_f64()
    );
    assert!(
        mldg_mean <= erm_mean,
        "MLDG mean held-out EER {mldg_mean:.2}% must not exceed ERM {erm_mean:.2}%"
    );
    assert!(
        mldg_std <= erm_std,
        "MLDG across-seed std {mldg_std:.2} must not exceed ERM {erm_std:.2}"
    );
    println!("criterion 7 (zero-shot generalization benchmark): PASS");
}

#[test]
fn criterion_8_training_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::toy_benchmark();
    cfg.run.seeds = vec![999, 123];
    cfg.run.out_dir = dir.path().join("run");
    cfg.train.max_epochs = 3;
    cfg.data.synthetic.as_mut().unwrap().spec = Some(micro_corpus_spec(32));
    let cfg = cfg.resolve().unwrap();

    let first = cmd_train(&cfg).unwrap();
    let mut first_ckpts = Vec::new();
    for &seed in &cfg.run.seeds {
        let p = cfg.run.out_dir.join(format!("seed_{seed}/checkpoint.bin"));
        first_ckpts.push(std::fs::read(&p).unwrap());
    }

    let second = cmd_train(&cfg).unwrap();
    for (a, b) in first.seeds.iter().zip(second.seeds.iter()) {
        assert_eq!(
            a.best_val_eer_pct.to_bits(),
            b.best_val_eer_pct.to_bits(),
            "summary EER differs for seed {}",
            a.seed
        );
        assert_eq!(a.best_epoch, b.best_epoch);
    }
    for (&seed, before) in cfg.run.seeds.iter().zip(first_ckpts.iter()) {
        let p = cfg.run.out_dir.join(format!("seed_{seed}/checkpoint.bin"));
        let after = std::fs::read(&p).unwrap();
        assert_eq!(before, &after, "checkpoint bytes differ for seed {seed}");
    }
    println!("criterion 8 (training determinism): PASS");
}

#[test]
fn criterion_9_det_consistency() {
    let started = std::time::Instant::now();
    let mut rng = substream(9, "acceptance.c9");

    // Random score sets: monotone sweeps whose crossing matches eer().
    for _ in 0..100 {
        let n = rng.random_range(4..=150usize);
        let n_bona = rng.random_range(1..n).max(1);
        let mut set = ScoreSet::new();
        for i in 0..n {
            let label = if i < n_bona { Label::Bonafide } else { Label::Spoof };
            let shift = if label == Label::Bonafide { 0.4 } else { -0.4 };
            let z: f64 = rng.sample(StandardNormal);
            set.push(format!("e{i}"), shift + z, label);
        }
        let curve = det_curve(&set).unwrap();
        for w in curve.points.windows(2) {
            assert!(w[1].far <= w[0].far, "FAR must be non-increasing");
            assert!(w[1].frr >= w[0].frr, "FRR must be non-decreasing");
        }
        let first = curve.points.first().unwrap();
        let last = curve.points.last().unwrap();
        assert_eq!((first.far, first.frr), (1.0, 0.0));
        assert_eq!((last.far, last.frr), (0.0, 1.0));
        let direct = eer(&set).unwrap().eer;
        let crossing = curve.eer_crossing().eer;
        assert!(
            (direct - crossing).abs() < 1e-9,
            "curve crossing {crossing} vs eer {direct}"
        );
    }

    // Round trip through an emitted score file preserves the curve.
    let dir = tempfile::tempdir().unwrap();
    let mut emitted = ScoreSet::new();
    for i in 0..200 {
        let label = if i % 2 == 0 { Label::Bonafide } else { Label::Spoof };
        let shift = if label == Label::Bonafide { 1.0 } else { -1.0 };
        let z: f64 = rng.sample(StandardNormal);
        emitted.push(format!("e{i}"), shift + z, label);
    }
    let path = dir.path().join("scores.tsv");
    emitted.write_file(&path).unwrap();
    let reloaded = ScoreSet::read_file(&path).unwrap();
    assert_eq!(eer(&emitted).unwrap().eer, eer(&reloaded).unwrap().eer);

    // Equal-variance Gaussian scores: straight probit-space line.
    let mut gaussian = ScoreSet::new();
    for i in 0..10_000 {
        let z: f64 = rng.sample(StandardNormal);
        if i % 2 == 0 {
            gaussian.push(format!("b{i}"), 1.0 + z, Label::Bonafide);
        } else {
            gaussian.push(format!("s{i}"), -1.0 + z, Label::Spoof);
        }
    }
    let curve = det_curve(&gaussian).unwrap();
    let (slope, _, rms) = curve.probit_line_fit().unwrap();
    assert!(rms < 0.05, "probit-space rms residual {rms}");
    assert!(slope < 0.0);
    // Clamping keeps the transformed endpoints finite.
    assert!(probit(0.0).is_finite() && probit(1.0).is_finite());

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "DET checks took {elapsed:.1}s (budget 30s)");
    println!("criterion 9 (DET consistency + probit linearity): PASS");
}

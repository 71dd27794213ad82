//! End-to-end training-loop contracts: determinism, freezing, initialization
//! invariants, and gradient fidelity of the composite objective.

use gramtune_core::data::{self, SynthConfig};
use gramtune_core::encoder::EncoderConfig;
use gramtune_core::linalg::FeatureMatrix;
use gramtune_core::mar::{mar_total, BatchPair, TokenPair};
use gramtune_core::trainer::{
    self, blend_logits, predict, ConsistencyVariant, LogitsPair, TrainConfig,
};
use ndarray::Array2;

fn small_dataset() -> data::Dataset {
    data::generate(&SynthConfig {
        classes: 4,
        per_class: 8,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn short_config() -> TrainConfig {
    TrainConfig {
        k_shot: 4,
        epochs: 3,
        encoder: EncoderConfig {
            dim: 16,
            heads: 2,
            ..EncoderConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let dataset = small_dataset();
    let cfg = short_config();
    let a = trainer::train(&cfg, &dataset).unwrap();
    let b = trainer::train(&cfg, &dataset).unwrap();
    assert_eq!(a.param_hash(), b.param_hash());
    for (x, y) in a.tuned.tensors().iter().zip(b.tuned.tensors().iter()) {
        assert_eq!(x, y);
    }
    for (ra, rb) in a.epoch_reports.iter().zip(b.epoch_reports.iter()) {
        assert_eq!(ra.to_kv_block(), rb.to_kv_block());
    }

    let mut other = cfg.clone();
    other.seed = cfg.seed + 1;
    let c = trainer::train(&other, &dataset).unwrap();
    assert_ne!(a.param_hash(), c.param_hash());
}

#[test]
fn grouping_contract_holds_after_training() {
    let dataset = small_dataset();
    let cfg = short_config();
    let out = trainer::train(&cfg, &dataset).unwrap();

    // The frozen copy is bitwise untouched.
    let reference =
        gramtune_core::encoder::EncoderParams::init(cfg.encoder.clone(), cfg.seed).unwrap();
    assert_eq!(out.frozen, reference);

    // Group 1 (block 1 + embeddings) unchanged; group 2 moved only through
    // its parallel linear; group 3 moved.
    assert_eq!(out.tuned.patch_embed, out.frozen.patch_embed);
    assert_eq!(out.tuned.cls, out.frozen.cls);
    let t1 = &out.tuned.blocks[0];
    let f1 = &out.frozen.blocks[0];
    assert_eq!(t1, f1);
    let t2 = &out.tuned.blocks[1];
    let f2 = &out.frozen.blocks[1];
    assert_eq!(t2.wq, f2.wq);
    assert_eq!(t2.w1, f2.w1);
    assert_eq!(t2.ln1_gain, f2.ln1_gain);
    let p2 = t2.parallel.as_ref().unwrap();
    assert!(p2.weight.iter().any(|&v| v != 0.0), "parallel linear trained");
    let t3 = &out.tuned.blocks[2];
    let f3 = &out.frozen.blocks[2];
    assert_ne!(t3.wq, f3.wq, "group 3 attention trained");
    assert_ne!(t3.w2, f3.w2, "group 3 ffn trained");
}

#[test]
fn all_frozen_grouping_is_a_noop() {
    let dataset = small_dataset();
    let mut cfg = short_config();
    cfg.encoder.group_boundaries = [3, 3];
    let out = trainer::train(&cfg, &dataset).unwrap();
    assert_eq!(out.tuned, out.frozen);
}

#[test]
fn initialization_invariants() {
    let dataset = small_dataset();
    let cfg = short_config();
    let frozen =
        gramtune_core::encoder::EncoderParams::init(cfg.encoder.clone(), cfg.seed).unwrap();
    let tuned = frozen.clone();

    // Parallel linears are zero at init.
    let p = tuned.blocks[1].parallel.as_ref().unwrap();
    assert!(p.weight.iter().all(|&v| v == 0.0));
    assert!(p.bias.iter().all(|&v| v == 0.0));

    // Probe batch through both models: identical raw outputs, so the Gram
    // alignment loss is exactly zero and the blended predictions coincide
    // with the frozen model's.
    let probe: Vec<Array2<f64>> = dataset.tokens.iter().take(16).cloned().collect();
    let zf = trainer::cls_features(&frozen, &probe).unwrap();
    let zt = trainer::cls_features(&tuned, &probe).unwrap();
    assert_eq!(zf.data(), zt.data());

    let frozen_trace = gramtune_core::encoder::encode(&frozen, &probe).unwrap();
    let tuned_trace = gramtune_core::encoder::encode(&tuned, &probe).unwrap();
    let frozen_tokens: Vec<FeatureMatrix> = frozen_trace
        .samples
        .iter()
        .map(|s| FeatureMatrix::normalize_rows(s.final_tokens()).unwrap())
        .collect();
    let tuned_tokens: Vec<FeatureMatrix> = tuned_trace
        .samples
        .iter()
        .map(|s| FeatureMatrix::normalize_rows(s.final_tokens()).unwrap())
        .collect();
    let batch = BatchPair::new(zf.clone(), zt.clone()).unwrap();
    let tokens = TokenPair::new(frozen_tokens, tuned_tokens).unwrap();
    assert_eq!(mar_total(&batch, &tokens), 0.0);

    let split = trainer::sample_k_shot(&dataset.labels, 4, cfg.seed).unwrap();
    let prototypes = trainer::class_prototypes(
        &frozen,
        &dataset,
        &split.train,
        trainer::PrototypeMode::ClassMeans,
        cfg.seed,
    )
    .unwrap();
    let logits_zs = trainer::logits_vs_prototypes(&zf, &prototypes, cfg.tau);
    let logits_ft = trainer::logits_vs_prototypes(&zt, &prototypes, cfg.tau);
    let blended = blend_logits(&LogitsPair::new(logits_ft, logits_zs.clone()).unwrap(), cfg.alpha);
    for (b_row, z_row) in blended.rows().into_iter().zip(logits_zs.rows()) {
        let b: Vec<f64> = b_row.iter().cloned().collect();
        let z: Vec<f64> = z_row.iter().cloned().collect();
        assert_eq!(predict(&b), predict(&z));
    }
}

#[test]
fn frozen_trace_constant_across_training() {
    let dataset = small_dataset();
    let cfg = short_config();
    let probe: Vec<Array2<f64>> = dataset.tokens.iter().take(4).cloned().collect();
    let before = {
        let frozen =
            gramtune_core::encoder::EncoderParams::init(cfg.encoder.clone(), cfg.seed).unwrap();
        gramtune_core::encoder::encode(&frozen, &probe).unwrap()
    };
    let out = trainer::train(&cfg, &dataset).unwrap();
    let after = gramtune_core::encoder::encode(&out.frozen, &probe).unwrap();
    assert_eq!(before, after);
}

#[test]
fn composite_gradients_match_finite_differences() {
    let encoder_cfg = EncoderConfig {
        dim: 8,
        layers: 2,
        heads: 2,
        patch_count: 2,
        patch_input_dim: 4,
        group_boundaries: [0, 1],
    };
    for (seed, variant) in [
        (3, ConsistencyVariant::Mar),
        (4, ConsistencyVariant::FeatCos),
        (5, ConsistencyVariant::LogitKl),
        (6, ConsistencyVariant::None),
    ] {
        let err = trainer::composite_gradient_check(seed, encoder_cfg.clone(), 4, 2, variant, true)
            .unwrap();
        assert!(err <= 1e-4, "{variant:?}: max relative error {err}");
    }
}

#[test]
fn every_consistency_variant_trains() {
    let dataset = small_dataset();
    for variant in ConsistencyVariant::ALL {
        let cfg = TrainConfig {
            epochs: 1,
            k_shot: 4,
            consistency_variant: variant,
            encoder: EncoderConfig {
                dim: 16,
                heads: 2,
                ..EncoderConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = trainer::train(&cfg, &dataset).unwrap();
        assert!(out.final_report().loss_total.is_finite(), "{variant:?}");
    }
}

#[test]
fn per_epoch_reports_are_complete() {
    let dataset = small_dataset();
    let cfg = short_config();
    let out = trainer::train(&cfg, &dataset).unwrap();
    assert_eq!(out.epoch_reports.len(), cfg.epochs);
    assert_eq!(out.initial_report.epoch, 0);
    assert!((out.initial_report.metrics.rsa.value().unwrap() - 1.0).abs() < 1e-12);
    for (i, r) in out.epoch_reports.iter().enumerate() {
        assert_eq!(r.epoch, i + 1);
        let block = r.to_kv_block();
        for key in [
            "epoch=",
            "loss_total=",
            "loss_ce=",
            "loss_consistency=",
            "loss_hms=",
            "test_accuracy=",
            "rsa=",
            "calinski_harabasz=",
            "cosine_shift_mean=",
        ] {
            assert!(block.contains(key), "missing {key} in:\n{block}");
        }
    }
}

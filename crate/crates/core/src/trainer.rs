//! Few-shot training harness: k-shot splits, augmented views, zero-shot
//! classification against frozen prototypes, logit blending, the combined
//! objective, SGD with warmup + cosine decay, and per-epoch evaluation.

use crate::data::Dataset;
use crate::encoder::{
    self, EncoderConfig, EncoderError, EncoderParams, ParamNodeIds,
};
use crate::hms::{self, HmsConfig};
use crate::linalg::FeatureMatrix;
use crate::mar;
use crate::metrics::{self, MetricReport, MetricValue};
use crate::tape::{NodeId, Tape};
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("class {class} has {have} samples; need at least {need} for k-shot training with a non-empty test split")]
    InsufficientSamples {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("dataset needs at least 2 classes")]
    TooFewClasses,
    #[error("missing required config key `{0}`")]
    MissingKey(String),
    #[error("bad value `{value}` for config key `{key}`")]
    BadValue { key: String, value: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config line {line} is not `key = value`: {text}")]
    BadLine { line: usize, text: String },
    #[error("logit shapes differ: {left:?} vs {right:?}")]
    LogitShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("variant {0} has no pointwise baseline penalty")]
    UnknownVariant(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Hms(#[from] hms::HmsError),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
}

/// Which consistency term replaces the Gram-alignment regularizer (ablation
/// grid); `Mar` is the default, `None` disables the slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencyVariant {
    Mar,
    FeatCos,
    FeatL1,
    FeatL2,
    LogitKl,
    LogitL1,
    LogitL2,
    None,
}

impl ConsistencyVariant {
    pub const ALL: [ConsistencyVariant; 8] = [
        ConsistencyVariant::Mar,
        ConsistencyVariant::FeatCos,
        ConsistencyVariant::FeatL1,
        ConsistencyVariant::FeatL2,
        ConsistencyVariant::LogitKl,
        ConsistencyVariant::LogitL1,
        ConsistencyVariant::LogitL2,
        ConsistencyVariant::None,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConsistencyVariant::Mar => "mar",
            ConsistencyVariant::FeatCos => "feat_cos",
            ConsistencyVariant::FeatL1 => "feat_l1",
            ConsistencyVariant::FeatL2 => "feat_l2",
            ConsistencyVariant::LogitKl => "logit_kl",
            ConsistencyVariant::LogitL1 => "logit_l1",
            ConsistencyVariant::LogitL2 => "logit_l2",
            ConsistencyVariant::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|v| v.as_str() == s)
    }
}

/// How class prototypes are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeMode {
    /// Normalized class means of the frozen encoder's train features.
    ClassMeans,
    /// Seeded random unit vectors.
    Random,
}

/// Stochastic view generation: Gaussian jitter plus token sub-masking.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub sigma: f64,
    pub keep_min: f64,
    pub keep_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            keep_min: 0.3,
            keep_max: 1.0,
        }
    }
}

/// All training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub tau: f64,
    pub tau_learnable: bool,
    pub k_shot: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_start_lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub hms: HmsConfig,
    pub consistency_variant: ConsistencyVariant,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub prototype_mode: PrototypeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self {
            lambda1: 0.5,
            lambda2: 0.1,
            alpha: 0.3,
            tau: 0.03,
            tau_learnable: false,
            k_shot: 16,
            batch_size: 8,
            epochs: 50,
            peak_lr: 0.002,
            warmup_start_lr: 1e-5,
            momentum: 0.0,
            seed: 0,
            hms: HmsConfig::last_layers(encoder.layers, 2, 0.5, 0.07).unwrap(),
            consistency_variant: ConsistencyVariant::Mar,
            encoder,
            augment: AugmentConfig::default(),
            prototype_mode: PrototypeMode::ClassMeans,
        }
    }
}

/// Parse flat `key = value` text (comments with `#`, blank lines ignored)
/// into an ordered map.
pub fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>, TrainError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(TrainError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

const REQUIRED_KEYS: [&str; 15] = [
    "lambda1",
    "lambda2",
    "alpha",
    "tau",
    "tau_learnable",
    "k_shot",
    "batch_size",
    "epochs",
    "peak_lr",
    "warmup_start_lr",
    "seed",
    "hms_tau_start",
    "hms_tau_end",
    "hms_depth",
    "consistency_variant",
];

impl TrainConfig {
    /// Build a config from parsed key/value entries. All scalar hyperparam
    /// keys are required; architecture and augmentation keys are optional
    /// with the documented defaults. Unknown keys are rejected.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self, TrainError> {
        for key in REQUIRED_KEYS {
            if !map.contains_key(key) {
                return Err(TrainError::MissingKey(key.to_string()));
            }
        }
        let known_optional = [
            "momentum",
            "augment_sigma",
            "augment_keep_min",
            "augment_keep_max",
            "prototype_mode",
            "encoder_dim",
            "encoder_layers",
            "encoder_heads",
            "encoder_patch_count",
            "encoder_patch_input_dim",
            "encoder_group1_end",
            "encoder_group2_end",
        ];
        for key in map.keys() {
            if !REQUIRED_KEYS.contains(&key.as_str())
                && !known_optional.contains(&key.as_str())
            {
                return Err(TrainError::UnknownKey(key.clone()));
            }
        }

        fn get<T: std::str::FromStr>(
            map: &BTreeMap<String, String>,
            key: &str,
        ) -> Result<T, TrainError> {
            let raw = map.get(key).expect("presence checked");
            raw.parse().map_err(|_| TrainError::BadValue {
                key: key.to_string(),
                value: raw.clone(),
            })
        }
        fn get_or<T: std::str::FromStr + Copy>(
            map: &BTreeMap<String, String>,
            key: &str,
            default: T,
        ) -> Result<T, TrainError> {
            match map.get(key) {
                None => Ok(default),
                Some(raw) => raw.parse().map_err(|_| TrainError::BadValue {
                    key: key.to_string(),
                    value: raw.clone(),
                }),
            }
        }

        let defaults = TrainConfig::default();
        let encoder = EncoderConfig {
            dim: get_or(map, "encoder_dim", defaults.encoder.dim)?,
            layers: get_or(map, "encoder_layers", defaults.encoder.layers)?,
            heads: get_or(map, "encoder_heads", defaults.encoder.heads)?,
            patch_count: get_or(map, "encoder_patch_count", defaults.encoder.patch_count)?,
            patch_input_dim: get_or(
                map,
                "encoder_patch_input_dim",
                defaults.encoder.patch_input_dim,
            )?,
            group_boundaries: [
                get_or(map, "encoder_group1_end", defaults.encoder.group_boundaries[0])?,
                get_or(map, "encoder_group2_end", defaults.encoder.group_boundaries[1])?,
            ],
        };
        encoder.validate()?;

        let hms_depth: usize = get(map, "hms_depth")?;
        let hms = HmsConfig::last_layers(
            encoder.layers,
            hms_depth,
            get(map, "hms_tau_start")?,
            get(map, "hms_tau_end")?,
        )?;

        let variant_raw: String = get(map, "consistency_variant")?;
        let consistency_variant =
            ConsistencyVariant::parse(&variant_raw).ok_or(TrainError::BadValue {
                key: "consistency_variant".to_string(),
                value: variant_raw,
            })?;

        let prototype_mode = match map.get("prototype_mode").map(String::as_str) {
            None | Some("class_means") => PrototypeMode::ClassMeans,
            Some("random") => PrototypeMode::Random,
            Some(other) => {
                return Err(TrainError::BadValue {
                    key: "prototype_mode".to_string(),
                    value: other.to_string(),
                })
            }
        };

        let cfg = Self {
            lambda1: get(map, "lambda1")?,
            lambda2: get(map, "lambda2")?,
            alpha: get(map, "alpha")?,
            tau: get(map, "tau")?,
            tau_learnable: get(map, "tau_learnable")?,
            k_shot: get(map, "k_shot")?,
            batch_size: get(map, "batch_size")?,
            epochs: get(map, "epochs")?,
            peak_lr: get(map, "peak_lr")?,
            warmup_start_lr: get(map, "warmup_start_lr")?,
            momentum: get_or(map, "momentum", 0.0)?,
            seed: get(map, "seed")?,
            hms,
            consistency_variant,
            encoder,
            augment: AugmentConfig {
                sigma: get_or(map, "augment_sigma", defaults.augment.sigma)?,
                keep_min: get_or(map, "augment_keep_min", defaults.augment.keep_min)?,
                keep_max: get_or(map, "augment_keep_max", defaults.augment.keep_max)?,
            },
            prototype_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |key: &str, value: String| TrainError::BadValue {
            key: key.to_string(),
            value,
        };
        if self.lambda1 < 0.0 {
            return Err(bad("lambda1", self.lambda1.to_string()));
        }
        if self.lambda2 < 0.0 {
            return Err(bad("lambda2", self.lambda2.to_string()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(bad("alpha", self.alpha.to_string()));
        }
        if self.tau <= 0.0 {
            return Err(bad("tau", self.tau.to_string()));
        }
        if self.k_shot == 0 {
            return Err(bad("k_shot", "0".into()));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "0".into()));
        }
        if self.epochs == 0 {
            return Err(bad("epochs", "0".into()));
        }
        if self.peak_lr <= 0.0 || self.warmup_start_lr <= 0.0 {
            return Err(bad("peak_lr/warmup_start_lr", "must be positive".into()));
        }
        if !(self.augment.keep_min <= self.augment.keep_max
            && self.augment.keep_min > 0.0
            && self.augment.keep_max <= 1.0)
        {
            return Err(bad(
                "augment_keep_min/augment_keep_max",
                format!("{}..{}", self.augment.keep_min, self.augment.keep_max),
            ));
        }
        self.encoder.validate()?;
        Ok(())
    }
}

/// Deterministic k-per-class train/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub n_classes: usize,
}

/// Select exactly k training samples per class (seeded); everything else is
/// test. Every class must keep at least one test sample so held-out metrics
/// are always defined.
pub fn sample_k_shot(labels: &[usize], k: usize, seed: u64) -> Result<FewShotSplit, TrainError> {
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    if n_classes < 2 {
        return Err(TrainError::TooFewClasses);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n_classes * k);
    let mut test = Vec::new();
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k + 1 {
            return Err(TrainError::InsufficientSamples {
                class,
                have: members.len(),
                need: k + 1,
            });
        }
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(FewShotSplit {
        train,
        test,
        n_classes,
    })
}

/// Softmax over cosine similarities to the class prototypes.
pub fn classify(z: &Array1<f64>, prototypes: &FeatureMatrix, tau: f64) -> Vec<f64> {
    assert!(tau > 0.0);
    let logits: Vec<f64> = (0..prototypes.n_rows())
        .map(|k| z.dot(&prototypes.row(k)) / tau)
        .collect();
    softmax(&logits)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Argmax with ties broken by the lowest index.
pub fn predict(probabilities: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > probabilities[best] {
            best = i;
        }
    }
    best
}

/// Paired fine-tuned and zero-shot logits over the same samples.
#[derive(Debug, Clone)]
pub struct LogitsPair {
    pub logits_ft: Array2<f64>,
    pub logits_zs: Array2<f64>,
}

impl LogitsPair {
    pub fn new(logits_ft: Array2<f64>, logits_zs: Array2<f64>) -> Result<Self, TrainError> {
        if logits_ft.dim() != logits_zs.dim() {
            return Err(TrainError::LogitShapeMismatch {
                left: logits_ft.dim(),
                right: logits_zs.dim(),
            });
        }
        Ok(Self {
            logits_ft,
            logits_zs,
        })
    }
}

/// logits = alpha * ft + (1 - alpha) * zs.
pub fn blend_logits(pair: &LogitsPair, alpha: f64) -> Array2<f64> {
    assert!((0.0..=1.0).contains(&alpha));
    let mut out = pair.logits_ft.mapv(|v| v * alpha);
    out.zip_mut_with(&pair.logits_zs, |o, &z| *o += (1.0 - alpha) * z);
    out
}

/// ce + lambda1 * consistency + lambda2 * hms.
pub fn total_loss(ce: f64, consistency: f64, hms_value: f64, cfg: &TrainConfig) -> f64 {
    ce + cfg.lambda1 * consistency + cfg.lambda2 * hms_value
}

/// Pointwise consistency penalties of the ablation grid. Feature variants
/// compare output features row-by-row; logit variants compare logit rows.
pub fn consistency_baseline(
    variant: ConsistencyVariant,
    frozen_feats: &Array2<f64>,
    tuned_feats: &Array2<f64>,
    frozen_logits: &Array2<f64>,
    tuned_logits: &Array2<f64>,
) -> Result<f64, TrainError> {
    let n = tuned_feats.nrows() as f64;
    match variant {
        ConsistencyVariant::FeatCos => {
            let mut total = 0.0;
            for (f, t) in frozen_feats.rows().into_iter().zip(tuned_feats.rows()) {
                total += 1.0 - f.dot(&t);
            }
            Ok(total / n)
        }
        ConsistencyVariant::FeatL1 => Ok(mean_row_norm(frozen_feats, tuned_feats, 1)),
        ConsistencyVariant::FeatL2 => Ok(mean_row_norm(frozen_feats, tuned_feats, 2)),
        ConsistencyVariant::LogitKl => {
            let m = tuned_logits.nrows() as f64;
            let mut total = 0.0;
            for (f, t) in frozen_logits.rows().into_iter().zip(tuned_logits.rows()) {
                let p = softmax(f.as_slice().unwrap());
                let q = softmax(t.as_slice().unwrap());
                for (&pi, &qi) in p.iter().zip(q.iter()) {
                    if pi > 0.0 {
                        total += pi * (pi.ln() - qi.ln());
                    }
                }
            }
            Ok(total / m)
        }
        ConsistencyVariant::LogitL1 => Ok(mean_row_norm(frozen_logits, tuned_logits, 1)),
        ConsistencyVariant::LogitL2 => Ok(mean_row_norm(frozen_logits, tuned_logits, 2)),
        other => Err(TrainError::UnknownVariant(other.as_str().to_string())),
    }
}

fn mean_row_norm(a: &Array2<f64>, b: &Array2<f64>, ord: u32) -> f64 {
    let n = a.nrows() as f64;
    let mut total = 0.0;
    for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
        let mut acc = 0.0;
        for (&x, &y) in ra.iter().zip(rb.iter()) {
            let d = (x - y).abs();
            acc += if ord == 1 { d } else { d * d };
        }
        total += if ord == 1 { acc } else { acc.sqrt() };
    }
    total / n
}

/// Linear warmup across epoch 0 from warmup_start_lr to peak_lr, then cosine
/// decay toward 0 over the remaining epochs.
pub fn lr_schedule(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.epochs * steps_per_epoch;
    debug_assert!(step < total);
    if step < steps_per_epoch || cfg.epochs == 1 {
        let t = step as f64 / steps_per_epoch as f64;
        return cfg.warmup_start_lr + (cfg.peak_lr - cfg.warmup_start_lr) * t;
    }
    let progress = (step - steps_per_epoch) as f64 / (total - steps_per_epoch) as f64;
    cfg.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// splitmix64-style combiner for derived RNG streams.
fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut x = base
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9).rotate_left(17);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Two stochastic views of one token field: additive Gaussian jitter, then a
/// random subset of tokens replaced by the dataset mean field (crop stand-in
/// with keep fraction uniform in [keep_min, keep_max]).
pub fn augment(
    tokens: &Array2<f64>,
    mean_tokens: &Array2<f64>,
    cfg: &AugmentConfig,
    seed: u64,
) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make_view = || {
        let mut view = tokens.clone();
        let normal = Normal::new(0.0, 1.0).unwrap();
        view.mapv_inplace(|v| v + cfg.sigma * normal.sample(&mut rng));
        let m = tokens.nrows();
        let keep_frac = rng.gen_range(cfg.keep_min..=cfg.keep_max);
        let keep = ((keep_frac * m as f64).round() as usize).clamp(1, m);
        if keep < m {
            let kept: Vec<usize> = rand::seq::index::sample(&mut rng, m, keep).into_vec();
            for r in 0..m {
                if !kept.contains(&r) {
                    view.row_mut(r).assign(&mean_tokens.row(r));
                }
            }
        }
        view
    };
    let v1 = make_view();
    let v2 = make_view();
    (v1, v2)
}

/// Per-epoch training summary.
#[derive(Debug, Clone)]
pub struct EpochReport {
    /// 0 is the pre-training snapshot; training epochs are 1-based.
    pub epoch: usize,
    pub lr_last: f64,
    pub tau_prime: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_consistency: f64,
    pub loss_hms: f64,
    pub test_accuracy: f64,
    pub metrics: MetricReport,
}

impl EpochReport {
    pub fn to_kv_block(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("epoch={}\n", self.epoch));
        for (k, v) in [
            ("lr_last", self.lr_last),
            ("tau_prime", self.tau_prime),
            ("loss_total", self.loss_total),
            ("loss_ce", self.loss_ce),
            ("loss_consistency", self.loss_consistency),
            ("loss_hms", self.loss_hms),
            ("test_accuracy", self.test_accuracy),
        ] {
            out.push_str(&format!("{k}={}\n", metrics::fmt_sig9(v)));
        }
        out.push_str(&self.metrics.to_kv_block());
        out
    }
}

/// Everything a finished run hands back.
pub struct TrainOutcome {
    pub tuned: EncoderParams,
    pub frozen: EncoderParams,
    pub prototypes: FeatureMatrix,
    pub split: FewShotSplit,
    /// Snapshot at step 0, before any update (epoch = 0).
    pub initial_report: EpochReport,
    pub epoch_reports: Vec<EpochReport>,
    pub final_tau: f64,
}

impl TrainOutcome {
    pub fn final_report(&self) -> &EpochReport {
        self.epoch_reports.last().unwrap_or(&self.initial_report)
    }

    /// FNV-1a over the little-endian bytes of every parameter tensor;
    /// the determinism fingerprint used in run reports.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tuned.tensors() {
            for &v in t.iter() {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Stacked, normalized final [CLS] features for a batch of token inputs.
pub fn cls_features(
    params: &EncoderParams,
    batch: &[Array2<f64>],
) -> Result<FeatureMatrix, TrainError> {
    let trace = encoder::encode(params, batch)?;
    Ok(stack_cls(&trace)?)
}

fn stack_cls(trace: &encoder::ActivationTrace) -> Result<FeatureMatrix, crate::linalg::LinalgError> {
    let n = trace.samples.len();
    let d = trace.samples[0].final_tokens().ncols();
    let mut raw = Array2::<f64>::zeros((n, d));
    for (i, s) in trace.samples.iter().enumerate() {
        raw.row_mut(i).assign(&s.final_tokens().row(0));
    }
    FeatureMatrix::normalize_rows(&raw)
}

/// Cosine-similarity logits against prototypes, divided by tau.
pub fn logits_vs_prototypes(z: &FeatureMatrix, prototypes: &FeatureMatrix, tau: f64) -> Array2<f64> {
    let mut logits = z.data().dot(&prototypes.data().t());
    logits.mapv_inplace(|v| v / tau);
    logits
}

/// Class prototypes: normalized class means of the frozen encoder's train
/// features (default) or seeded random unit vectors.
pub fn class_prototypes(
    frozen: &EncoderParams,
    dataset: &Dataset,
    train_indices: &[usize],
    mode: PrototypeMode,
    seed: u64,
) -> Result<FeatureMatrix, TrainError> {
    let d = frozen.config().dim;
    let k = dataset.n_classes;
    match mode {
        PrototypeMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x70726f, 0));
            let normal = Normal::new(0.0, 1.0).unwrap();
            let raw = Array2::from_shape_fn((k, d), |_| normal.sample(&mut rng));
            Ok(FeatureMatrix::normalize_rows(&raw)?)
        }
        PrototypeMode::ClassMeans => {
            let batch: Vec<Array2<f64>> = train_indices
                .iter()
                .map(|&i| dataset.tokens[i].clone())
                .collect();
            let feats = cls_features(frozen, &batch)?;
            let mut sums = Array2::<f64>::zeros((k, d));
            let mut counts = vec![0usize; k];
            for (row, &idx) in feats.data().rows().into_iter().zip(train_indices.iter()) {
                let label = dataset.labels[idx];
                counts[label] += 1;
                let mut target = sums.row_mut(label);
                target += &row;
            }
            for (c, &count) in counts.iter().enumerate() {
                if count == 0 {
                    return Err(TrainError::InsufficientSamples {
                        class: c,
                        have: 0,
                        need: 1,
                    });
                }
            }
            Ok(FeatureMatrix::normalize_rows(&sums)?)
        }
    }
}

/// Class-stratified batches: seeded per-class shuffles, round-robin
/// interleave, then chunk. Guarantees multi-class batches whenever the
/// remaining pool allows it.
fn stratified_batches(
    train: &[usize],
    labels: &[usize],
    n_classes: usize,
    batch_size: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for &i in train {
        per_class[labels[i]].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in per_class.iter_mut() {
        members.shuffle(&mut rng);
    }
    let mut interleaved = Vec::with_capacity(train.len());
    let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
    for pos in 0..longest {
        for members in &per_class {
            if pos < members.len() {
                interleaved.push(members[pos]);
            }
        }
    }
    interleaved
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

struct BatchLosses {
    ce: f64,
    consistency: f64,
    hms: f64,
}

/// The per-step loss graph: tape, parameter nodes, loss heads, and the
/// externally computed Gram-alignment gradient seeds.
pub struct StepGraph {
    pub tape: Tape,
    pub param_ids: ParamNodeIds,
    pub tau_node: NodeId,
    /// CE + weighted tape-differentiable regularizers.
    pub total: NodeId,
    pub ce: NodeId,
    pub consistency_value: f64,
    pub hms_value: f64,
    /// lambda1-scaled Gram-alignment gradients, injected at the raw feature
    /// nodes during backward (empty unless the variant is Mar).
    pub mar_seeds: Vec<(NodeId, Array2<f64>)>,
}

impl StepGraph {
    /// The full objective value ce + lambda1 * consistency + lambda2 * hms.
    /// (The Mar term lives off-tape, so `total`'s scalar alone omits it.)
    pub fn objective_value(&self, cfg: &TrainConfig) -> f64 {
        let mut v = self.tape.scalar(self.total);
        if cfg.consistency_variant == ConsistencyVariant::Mar {
            v += cfg.lambda1 * self.consistency_value;
        }
        v
    }

    /// Reverse pass from the objective, including the injected seeds.
    pub fn backward(&self) -> crate::tape::Gradients {
        let mut seeds = vec![(self.total, Array2::from_elem((1, 1), 1.0))];
        seeds.extend(self.mar_seeds.iter().cloned());
        self.tape.backward(&seeds)
    }
}

/// Build the complete loss graph for one batch of already-augmented views:
/// blended-logit cross-entropy, the configured consistency term, and the
/// layer-weighted sculpting losses through pseudo-forward projections.
/// `trainable` selects which parameter tensors become leaves.
pub fn build_step_graph(
    cfg: &TrainConfig,
    tuned: &EncoderParams,
    trainable: &[bool],
    frozen_outputs: &FrozenBatch,
    views: &[Array2<f64>],
    labels: &[usize],
    prototypes: &FeatureMatrix,
    tau_state: f64,
    tau_prime: f64,
) -> Result<StepGraph, TrainError> {
    let mut tape = Tape::new();
    let ids: ParamNodeIds = encoder::register_params(&mut tape, tuned, trainable);
    let tau_node = if cfg.tau_learnable {
        tape.leaf(Array2::from_elem((1, 1), tau_state))
    } else {
        tape.constant(Array2::from_elem((1, 1), tau_state))
    };

    let mut final_token_nodes = Vec::with_capacity(views.len());
    let mut traces = Vec::with_capacity(views.len());
    for view in views {
        let t = tape.constant(view.clone());
        let trace = encoder::forward_sample_on_tape(&mut tape, &ids, &cfg.encoder, t);
        final_token_nodes.push(*trace.last().expect("at least one layer"));
        traces.push(trace);
    }

    // CE on blended logits.
    let cls_rows: Vec<NodeId> = final_token_nodes
        .iter()
        .map(|&t| tape.row(t, 0))
        .collect();
    let cls_raw = tape.concat_rows(&cls_rows);
    let z_tuned = tape.normalize_rows(cls_raw);
    let protos_node = tape.constant(prototypes.data().clone());
    let sims = tape.matmul_nt(z_tuned, protos_node);
    let logits_ft = tape.scale_recip(sims, tau_node);
    let ft_scaled = tape.scale(logits_ft, cfg.alpha);
    let zs_scaled = frozen_outputs.logits_zs.mapv(|v| v * (1.0 - cfg.alpha));
    let blended = tape.add_const(ft_scaled, &zs_scaled);
    let ce_node = tape.softmax_cross_entropy(blended, labels);

    // Sculpting across the selected layers (pseudo-forward into output space
    // for every layer but the last).
    let weights = hms::layer_decay_weights(cfg.encoder.layers, cfg.hms.depth)?;
    let mut hms_value = 0.0;
    let mut hms_terms: Vec<(NodeId, f64)> = Vec::new();
    for (w, &layer) in weights.iter().zip(cfg.hms.layer_set.iter()) {
        let mut layer_cls = Vec::with_capacity(views.len());
        for trace in &traces {
            let z_l = trace[layer - 1];
            let projected =
                encoder::pseudo_forward_on_tape(&mut tape, &ids, &cfg.encoder, z_l, layer)?;
            layer_cls.push(tape.row(projected, 0));
        }
        let stacked = tape.concat_rows(&layer_cls);
        let normalized = tape.normalize_rows(stacked);
        let proto_labels: Vec<usize> = (0..prototypes.n_rows()).collect();
        let loss = tape.sculpt(normalized, prototypes, labels, &proto_labels, tau_prime);
        hms_value += w * tape.scalar(loss);
        hms_terms.push((loss, *w));
    }

    // Consistency slot: Gram alignment by default, pointwise baselines for
    // the ablation grid.
    let mut consistency_value = 0.0;
    let mut consistency_node: Option<NodeId> = None;
    let mut mar_seeds: Vec<(NodeId, Array2<f64>)> = Vec::new();
    match cfg.consistency_variant {
        ConsistencyVariant::Mar => {
            let tuned_cls_raw = tape.value(cls_raw).clone();
            let tuned_token_raws: Vec<Array2<f64>> = final_token_nodes
                .iter()
                .map(|&t| tape.value(t).clone())
                .collect();
            let tuned_cls = FeatureMatrix::normalize_rows(&tuned_cls_raw)?;
            let tuned_tokens: Vec<FeatureMatrix> = tuned_token_raws
                .iter()
                .map(FeatureMatrix::normalize_rows)
                .collect::<Result<_, _>>()?;
            let batch_pair = mar::BatchPair::new(frozen_outputs.cls.clone(), tuned_cls)
                .expect("frozen/tuned shapes match");
            let token_pair = mar::TokenPair::new(frozen_outputs.tokens.clone(), tuned_tokens)
                .expect("frozen/tuned shapes match");
            consistency_value = mar::mar_total(&batch_pair, &token_pair);
            if cfg.lambda1 > 0.0 {
                let grad = mar::mar_gradient(
                    &frozen_outputs.cls,
                    &tuned_cls_raw,
                    &frozen_outputs.tokens,
                    &tuned_token_raws,
                );
                mar_seeds.push((cls_raw, grad.cls.mapv(|v| v * cfg.lambda1)));
                for (node, g) in final_token_nodes.iter().zip(grad.tokens.into_iter()) {
                    mar_seeds.push((*node, g.mapv(|v| v * cfg.lambda1)));
                }
            }
        }
        ConsistencyVariant::FeatCos => {
            let node = tape.cos_gap_vs_const(z_tuned, frozen_outputs.cls.data());
            consistency_value = tape.scalar(node);
            consistency_node = Some(node);
        }
        ConsistencyVariant::FeatL1 => {
            let node = tape.l1_gap_vs_const(z_tuned, frozen_outputs.cls.data());
            consistency_value = tape.scalar(node);
            consistency_node = Some(node);
        }
        ConsistencyVariant::FeatL2 => {
            let node = tape.l2_gap_vs_const(z_tuned, frozen_outputs.cls.data());
            consistency_value = tape.scalar(node);
            consistency_node = Some(node);
        }
        ConsistencyVariant::LogitKl => {
            let probs = row_softmax(&frozen_outputs.logits_zs);
            let node = tape.kl_vs_const_probs(logits_ft, &probs);
            consistency_value = tape.scalar(node);
            consistency_node = Some(node);
        }
        ConsistencyVariant::LogitL1 => {
            let node = tape.l1_gap_vs_const(logits_ft, &frozen_outputs.logits_zs);
            consistency_value = tape.scalar(node);
            consistency_node = Some(node);
        }
        ConsistencyVariant::LogitL2 => {
            let node = tape.l2_gap_vs_const(logits_ft, &frozen_outputs.logits_zs);
            consistency_value = tape.scalar(node);
            consistency_node = Some(node);
        }
        ConsistencyVariant::None => {}
    }

    // Total objective on the tape: CE plus weighted differentiable terms.
    let mut total = ce_node;
    if let Some(node) = consistency_node {
        if cfg.lambda1 > 0.0 {
            let scaled = tape.scale(node, cfg.lambda1);
            total = tape.add(total, scaled);
        }
    }
    if cfg.lambda2 > 0.0 {
        for &(node, w) in &hms_terms {
            let scaled = tape.scale(node, cfg.lambda2 * w);
            total = tape.add(total, scaled);
        }
    }

    Ok(StepGraph {
        tape,
        param_ids: ids,
        tau_node,
        total,
        ce: ce_node,
        consistency_value,
        hms_value,
        mar_seeds,
    })
}

/// Frozen-side quantities for one batch of views.
pub struct FrozenBatch {
    pub cls: FeatureMatrix,
    pub tokens: Vec<FeatureMatrix>,
    pub logits_zs: Array2<f64>,
}

/// Run the frozen encoder over the views and package what the loss graph
/// needs from it.
pub fn frozen_batch(
    frozen: &EncoderParams,
    views: &[Array2<f64>],
    prototypes: &FeatureMatrix,
    tau: f64,
) -> Result<FrozenBatch, TrainError> {
    let trace = encoder::encode(frozen, views)?;
    let cls = stack_cls(&trace)?;
    let tokens: Vec<FeatureMatrix> = trace
        .samples
        .iter()
        .map(|s| FeatureMatrix::normalize_rows(s.final_tokens()))
        .collect::<Result<_, _>>()?;
    let logits_zs = logits_vs_prototypes(&cls, prototypes, tau);
    Ok(FrozenBatch {
        cls,
        tokens,
        logits_zs,
    })
}

/// One SGD step over a batch of sample indices. Returns the loss components.
#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &TrainConfig,
    tuned: &mut EncoderParams,
    tau_state: &mut f64,
    momentum_buffers: &mut [Array2<f64>],
    frozen: &EncoderParams,
    dataset: &Dataset,
    mean_tokens: &Array2<f64>,
    prototypes: &FeatureMatrix,
    batch: &[usize],
    epoch: usize,
    tau_prime: f64,
    lr: f64,
) -> Result<BatchLosses, TrainError> {
    // Two augmented views per source image; both views are queries and
    // supports for sculpting and ordinary samples for CE and alignment.
    let mut views: Vec<Array2<f64>> = Vec::with_capacity(batch.len() * 2);
    let mut labels: Vec<usize> = Vec::with_capacity(batch.len() * 2);
    for &idx in batch {
        let (v1, v2) = augment(
            &dataset.tokens[idx],
            mean_tokens,
            &cfg.augment,
            mix_seed(cfg.seed, epoch as u64, idx as u64),
        );
        views.push(v1);
        views.push(v2);
        labels.push(dataset.labels[idx]);
        labels.push(dataset.labels[idx]);
    }

    let frozen_outputs = frozen_batch(frozen, &views, prototypes, cfg.tau)?;
    let mask = tuned.trainable_mask();
    let graph = build_step_graph(
        cfg,
        tuned,
        &mask,
        &frozen_outputs,
        &views,
        &labels,
        prototypes,
        *tau_state,
        tau_prime,
    )?;
    let grads = graph.backward();

    // SGD over trainable tensors (optionally with momentum).
    let use_momentum = cfg.momentum > 0.0;
    for ((tensor, &is_trainable), (flat_id, buffer)) in tuned
        .tensors_mut()
        .into_iter()
        .zip(mask.iter())
        .zip(graph.param_ids.flat.iter().zip(momentum_buffers.iter_mut()))
    {
        if !is_trainable {
            continue;
        }
        let Some(g) = grads.get(*flat_id) else { continue };
        if use_momentum {
            buffer.zip_mut_with(g, |b, &gv| *b = cfg.momentum * *b + gv);
            tensor.zip_mut_with(buffer, |t, &b| *t -= lr * b);
        } else {
            tensor.zip_mut_with(g, |t, &gv| *t -= lr * gv);
        }
    }
    if cfg.tau_learnable {
        if let Some(g) = grads.get(graph.tau_node) {
            *tau_state = (*tau_state - lr * g[[0, 0]]).max(1e-4);
        }
    }

    Ok(BatchLosses {
        ce: graph.tape.scalar(graph.ce),
        consistency: graph.consistency_value,
        hms: graph.hms_value,
    })
}

fn row_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

struct Evaluation {
    accuracy: f64,
    metrics: MetricReport,
}

fn evaluate(
    cfg: &TrainConfig,
    tuned: &EncoderParams,
    frozen_cls_test: &FeatureMatrix,
    logits_zs_test: &Array2<f64>,
    test_tokens: &[Array2<f64>],
    test_labels: &[usize],
    prototypes: &FeatureMatrix,
    tau: f64,
) -> Result<Evaluation, TrainError> {
    let tuned_cls = cls_features(tuned, test_tokens)?;
    let logits_ft = logits_vs_prototypes(&tuned_cls, prototypes, tau);
    let pair = LogitsPair::new(logits_ft, logits_zs_test.clone())?;
    let blended = blend_logits(&pair, cfg.alpha);

    let mut correct = 0usize;
    for (row, &label) in blended.rows().into_iter().zip(test_labels.iter()) {
        let probs = softmax(row.as_slice().unwrap());
        if predict(&probs) == label {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / test_labels.len() as f64;

    let rsa = match metrics::rsa(
        &crate::linalg::gram(frozen_cls_test),
        &crate::linalg::gram(&tuned_cls),
    ) {
        Ok(v) => MetricValue::Value(v),
        Err(e) => MetricValue::Skipped(format!("{e}")),
    };
    let ch = match metrics::calinski_harabasz(tuned_cls.data(), test_labels) {
        Ok(v) => MetricValue::Value(v),
        Err(e) => MetricValue::Skipped(format!("{e}")),
    };
    let sil = match metrics::silhouette(tuned_cls.data(), test_labels) {
        Ok(v) => MetricValue::Value(v),
        Err(e) => MetricValue::Skipped(format!("{e}")),
    };
    let cos = match metrics::cosine_shift(frozen_cls_test, &tuned_cls) {
        Ok(v) => MetricValue::Value(v),
        Err(e) => MetricValue::Skipped(format!("{e}")),
    };

    // Prediction-shift metrics: frozen zero-shot vs blended output.
    let mut hell_sum = 0.0;
    let mut hell_n = 0usize;
    let mut spear_sum = 0.0;
    let mut spear_n = 0usize;
    for (zs_row, b_row) in logits_zs_test.rows().into_iter().zip(blended.rows()) {
        let p = softmax(zs_row.as_slice().unwrap());
        let q = softmax(b_row.as_slice().unwrap());
        if let Ok(h) = metrics::hellinger(&p, &q) {
            hell_sum += h;
            hell_n += 1;
        }
        if let Ok(s) = metrics::spearman(
            zs_row.as_slice().unwrap(),
            b_row.as_slice().unwrap(),
        ) {
            spear_sum += s;
            spear_n += 1;
        }
    }
    let hellinger_mean = if hell_n > 0 {
        MetricValue::Value(hell_sum / hell_n as f64)
    } else {
        MetricValue::Skipped("no valid probability rows".into())
    };
    let spearman_logits_mean = if spear_n > 0 {
        MetricValue::Value(spear_sum / spear_n as f64)
    } else {
        MetricValue::Skipped("constant logit rows".into())
    };

    Ok(Evaluation {
        accuracy,
        metrics: MetricReport {
            rsa,
            calinski_harabasz: ch,
            silhouette: sil,
            hellinger_mean,
            spearman_logits_mean,
            cosine_shift_mean: cos,
        },
    })
}

/// Full training run: freeze a copy of the initial encoder, fine-tune the
/// grouped parameters against the blended-logit CE plus the configured
/// regularizers, and evaluate after every epoch. Deterministic per seed.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.n_classes < 2 {
        return Err(TrainError::TooFewClasses);
    }
    let split = sample_k_shot(&dataset.labels, cfg.k_shot, cfg.seed)?;
    let frozen = EncoderParams::init(cfg.encoder.clone(), cfg.seed)?;
    let mut tuned = frozen.clone();
    let mut tau_state = cfg.tau;

    let mean_tokens = dataset.mean_tokens(&split.train);
    let prototypes = class_prototypes(&frozen, dataset, &split.train, cfg.prototype_mode, cfg.seed)?;

    // Frozen test-side features never change; compute once.
    let test_tokens: Vec<Array2<f64>> = split.test.iter().map(|&i| dataset.tokens[i].clone()).collect();
    let test_labels: Vec<usize> = split.test.iter().map(|&i| dataset.labels[i]).collect();
    let frozen_cls_test = cls_features(&frozen, &test_tokens)?;
    let logits_zs_test = logits_vs_prototypes(&frozen_cls_test, &prototypes, cfg.tau);

    let momentum_shapes: Vec<Array2<f64>> = tuned
        .tensors()
        .iter()
        .map(|t| Array2::zeros(t.dim()))
        .collect();
    let mut momentum_buffers = momentum_shapes;

    let initial_eval = evaluate(
        cfg,
        &tuned,
        &frozen_cls_test,
        &logits_zs_test,
        &test_tokens,
        &test_labels,
        &prototypes,
        tau_state,
    )?;
    let initial_report = EpochReport {
        epoch: 0,
        lr_last: 0.0,
        tau_prime: hms::tau_schedule(0, cfg.epochs, &cfg.hms),
        loss_total: 0.0,
        loss_ce: 0.0,
        loss_consistency: 0.0,
        loss_hms: 0.0,
        test_accuracy: initial_eval.accuracy,
        metrics: initial_eval.metrics,
    };

    let steps_per_epoch = split.train.len().div_ceil(cfg.batch_size).max(1);
    let mut epoch_reports = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let tau_prime = hms::tau_schedule(epoch, cfg.epochs, &cfg.hms);
        let batches = stratified_batches(
            &split.train,
            &dataset.labels,
            dataset.n_classes,
            cfg.batch_size,
            mix_seed(cfg.seed, 0xBA7C4, epoch as u64),
        );
        let mut lr_last = 0.0;
        let mut sums = BatchLosses {
            ce: 0.0,
            consistency: 0.0,
            hms: 0.0,
        };
        for batch in &batches {
            let lr = lr_schedule(global_step, steps_per_epoch, cfg);
            lr_last = lr;
            let losses = train_step(
                cfg,
                &mut tuned,
                &mut tau_state,
                &mut momentum_buffers,
                &frozen,
                dataset,
                &mean_tokens,
                &prototypes,
                batch,
                epoch,
                tau_prime,
                lr,
            )?;
            sums.ce += losses.ce;
            sums.consistency += losses.consistency;
            sums.hms += losses.hms;
            global_step += 1;
        }
        let nb = batches.len().max(1) as f64;
        let eval = evaluate(
            cfg,
            &tuned,
            &frozen_cls_test,
            &logits_zs_test,
            &test_tokens,
            &test_labels,
            &prototypes,
            tau_state,
        )?;
        let ce = sums.ce / nb;
        let consistency = sums.consistency / nb;
        let hms_value = sums.hms / nb;
        epoch_reports.push(EpochReport {
            epoch: epoch + 1,
            lr_last,
            tau_prime,
            loss_total: total_loss(ce, consistency, hms_value, cfg),
            loss_ce: ce,
            loss_consistency: consistency,
            loss_hms: hms_value,
            test_accuracy: eval.accuracy,
            metrics: eval.metrics,
        });
    }

    Ok(TrainOutcome {
        tuned,
        frozen,
        prototypes,
        split,
        initial_report,
        epoch_reports,
        final_tau: tau_state,
    })
}

/// Verification utility: build one composite loss graph (CE + consistency +
/// sculpting through encoder, pseudo-forward, and normalization) on a random
/// tiny instance, and return the maximum relative error between the analytic
/// gradients and central finite differences over every parameter coordinate
/// (including the temperature when learnable). Step 1e-5.
pub fn composite_gradient_check(
    seed: u64,
    encoder_cfg: EncoderConfig,
    n_samples: usize,
    n_classes: usize,
    variant: ConsistencyVariant,
    tau_learnable: bool,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6AD, 0));
    let views: Vec<Array2<f64>> = (0..n_samples)
        .map(|_| {
            Array2::from_shape_fn(
                (encoder_cfg.patch_count, encoder_cfg.patch_input_dim),
                |_| rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    let labels: Vec<usize> = (0..n_samples).map(|i| i % n_classes).collect();
    let protos_raw = Array2::from_shape_fn((n_classes, encoder_cfg.dim), |_| {
        rng.gen_range(-1.0..1.0)
    });
    let prototypes = FeatureMatrix::normalize_rows(&protos_raw)?;

    let cfg = TrainConfig {
        tau: 0.2,
        tau_learnable,
        consistency_variant: variant,
        hms: HmsConfig::last_layers(encoder_cfg.layers, 2.min(encoder_cfg.layers), 0.5, 0.07)?,
        encoder: encoder_cfg.clone(),
        ..TrainConfig::default()
    };
    let tau_prime = 0.3;

    // Distinct frozen and tuned nets keep the L1 alignment terms away from
    // their kinks, where finite differences would straddle the subgradient.
    let frozen = EncoderParams::init(encoder_cfg.clone(), mix_seed(seed, 1, 1))?;
    let tuned = EncoderParams::init(encoder_cfg.clone(), mix_seed(seed, 2, 2))?;
    let frozen_outputs = frozen_batch(&frozen, &views, &prototypes, cfg.tau)?;

    let all_trainable = vec![true; tuned.tensors().len()];
    let graph = build_step_graph(
        &cfg,
        &tuned,
        &all_trainable,
        &frozen_outputs,
        &views,
        &labels,
        &prototypes,
        cfg.tau,
        tau_prime,
    )?;
    let grads = graph.backward();
    let mut analytic = Vec::new();
    for &id in &graph.param_ids.flat {
        let g = grads.get(id).expect("every parameter reaches the loss");
        analytic.extend(g.iter().cloned());
    }
    if tau_learnable {
        analytic.push(grads.get(graph.tau_node).expect("tau reaches the loss")[[0, 0]]);
    }

    let mut point: Vec<f64> = Vec::with_capacity(analytic.len());
    for t in tuned.tensors() {
        point.extend(t.iter().cloned());
    }
    if tau_learnable {
        point.push(cfg.tau);
    }

    let objective = |v: &[f64]| -> f64 {
        let mut p = tuned.clone();
        let mut offset = 0;
        for t in p.tensors_mut() {
            for x in t.iter_mut() {
                *x = v[offset];
                offset += 1;
            }
        }
        let tau_state = if tau_learnable { v[offset] } else { cfg.tau };
        let g = build_step_graph(
            &cfg,
            &p,
            &all_trainable,
            &frozen_outputs,
            &views,
            &labels,
            &prototypes,
            tau_state,
            tau_prime,
        )
        .expect("graph construction is deterministic");
        g.objective_value(&cfg)
    };
    let numeric = crate::fdcheck::central_diff_grad(objective, &point, 1e-5);
    Ok(crate::fdcheck::max_relative_error(&analytic, &numeric))
}

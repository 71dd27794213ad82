//! Drift audit: compare embeddings exported before and after fine-tuning.
//! Rows are paired by id (the natural one-to-one correspondence), normalized,
//! and pushed through the Gram bound, the exact transport estimator (on a
//! seeded subsample when n > 6), and the representation metrics.

use crate::embedding::EmbeddingFile;
use crate::CliError;
use gramtune_core::gw::{self, GwOrder, MetricSpace};
use gramtune_core::linalg::{self, FeatureMatrix};
use gramtune_core::metrics::{self, fmt_sig9};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct AuditOptions {
    pub seed: u64,
    /// Softmax temperature for the prototype-based prediction metrics.
    pub tau: f64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self { seed: 0, tau: 0.07 }
    }
}

/// One audit field: computed, or explicitly skipped with a reason.
#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Value(f64),
    Text(String),
    Skipped(String),
}

impl Field {
    fn render(&self) -> String {
        match self {
            Field::Value(v) => fmt_sig9(*v),
            Field::Text(t) => t.clone(),
            Field::Skipped(reason) => format!("skipped:{reason}"),
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Field::Value(v) => Some(*v),
            _ => None,
        }
    }

    fn from_result<E: std::fmt::Display>(r: Result<f64, E>) -> Field {
        match r {
            Ok(v) => Field::Value(v),
            Err(e) => Field::Skipped(e.to_string().replace([' ', '\n'], "_")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub n: usize,
    pub d: usize,
    pub gram_bound_p1: Field,
    pub gw_upper_estimate: Field,
    pub gw_coupling: Field,
    pub gw_subsample_ids: Field,
    pub rsa: Field,
    pub cosine_shift_mean: Field,
    pub calinski_harabasz_before: Field,
    pub calinski_harabasz_after: Field,
    pub silhouette_before: Field,
    pub silhouette_after: Field,
    pub hellinger_mean: Field,
    pub spearman_logits_mean: Field,
}

impl AuditReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("n={}\n", self.n));
        out.push_str(&format!("d={}\n", self.d));
        for (key, field) in [
            ("gram_bound_p1", &self.gram_bound_p1),
            ("gw_upper_estimate", &self.gw_upper_estimate),
            ("gw_coupling", &self.gw_coupling),
            ("gw_subsample_ids", &self.gw_subsample_ids),
            ("rsa", &self.rsa),
            ("cosine_shift_mean", &self.cosine_shift_mean),
            ("calinski_harabasz_before", &self.calinski_harabasz_before),
            ("calinski_harabasz_after", &self.calinski_harabasz_after),
            ("silhouette_before", &self.silhouette_before),
            ("silhouette_after", &self.silhouette_after),
            ("hellinger_mean", &self.hellinger_mean),
            ("spearman_logits_mean", &self.spearman_logits_mean),
        ] {
            out.push_str(&format!("{key}={}\n", field.render()));
        }
        out
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

pub fn audit(
    before: &EmbeddingFile,
    after: &EmbeddingFile,
    prototypes: Option<&EmbeddingFile>,
    opts: &AuditOptions,
) -> Result<AuditReport, CliError> {
    let aligned = before.align_by_id(after)?;
    for (id, (&la, &lb)) in before
        .ids
        .iter()
        .zip(before.labels.iter().zip(aligned.labels.iter()))
    {
        if la != lb {
            return Err(CliError::Parse {
                path: "<after>".into(),
                line: 0,
                message: format!("label mismatch for id `{id}`: {la} vs {lb}"),
            });
        }
    }

    let n = before.n();
    let d = before.dim();
    let z_before = FeatureMatrix::normalize_rows(&before.data)?;
    let z_after = FeatureMatrix::normalize_rows(&aligned.data)?;
    let s_before = linalg::gram(&z_before);
    let s_after = linalg::gram(&z_after);

    let gram_bound_p1 = Field::from_result(gw::gram_bound(&s_before, &s_after, GwOrder::P1));

    // Transport estimate: exact enumeration, on a seeded subsample when the
    // input is larger than the enumeration cap.
    let (gw_rows, gw_subsample_ids) = if n <= gw::DEFAULT_MAX_EXACT_N {
        ((0..n).collect::<Vec<_>>(), Field::Text("all".to_string()))
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked = rand::seq::index::sample(&mut rng, n, gw::DEFAULT_MAX_EXACT_N).into_vec();
        picked.sort_unstable();
        let ids: Vec<String> = picked.iter().map(|&i| before.ids[i].clone()).collect();
        (picked, Field::Text(ids.join(",")))
    };
    let subset = |z: &FeatureMatrix| -> FeatureMatrix {
        let mut raw = Array2::zeros((gw_rows.len(), d));
        for (r, &i) in gw_rows.iter().enumerate() {
            raw.row_mut(r).assign(&z.row(i));
        }
        FeatureMatrix::normalize_rows(&raw).expect("rows already unit")
    };
    let (gw_upper_estimate, gw_coupling) = {
        let x = MetricSpace::from_features(&subset(&z_before));
        let y = MetricSpace::from_features(&subset(&z_after));
        match gw::gw_estimate(&x, &y, GwOrder::P1, gw::DEFAULT_MAX_EXACT_N) {
            Ok(est) => (
                Field::Value(est.value),
                Field::Text(est.achieved_by.describe()),
            ),
            Err(e) => {
                let reason = e.to_string().replace([' ', '\n'], "_");
                (Field::Skipped(reason.clone()), Field::Skipped(reason))
            }
        }
    };

    let rsa = Field::from_result(metrics::rsa(&s_before, &s_after));
    let cosine_shift_mean = Field::from_result(metrics::cosine_shift(&z_before, &z_after));
    let labels = &before.labels;
    let calinski_harabasz_before =
        Field::from_result(metrics::calinski_harabasz(z_before.data(), labels));
    let calinski_harabasz_after =
        Field::from_result(metrics::calinski_harabasz(z_after.data(), labels));
    let silhouette_before = Field::from_result(metrics::silhouette(z_before.data(), labels));
    let silhouette_after = Field::from_result(metrics::silhouette(z_after.data(), labels));

    let (hellinger_mean, spearman_logits_mean) = match prototypes {
        None => (
            Field::Skipped("no_prototypes".to_string()),
            Field::Skipped("no_prototypes".to_string()),
        ),
        Some(protos) => {
            if protos.dim() != d {
                return Err(CliError::DimMismatch {
                    left: protos.dim(),
                    right: d,
                });
            }
            let p = FeatureMatrix::normalize_rows(&protos.data)?;
            let logits = |z: &FeatureMatrix| -> Array2<f64> {
                let mut l = z.data().dot(&p.data().t());
                l.mapv_inplace(|v| v / opts.tau);
                l
            };
            let lb = logits(&z_before);
            let la = logits(&z_after);
            let mut hell = Vec::new();
            let mut spear = Vec::new();
            for (rb, ra) in lb.rows().into_iter().zip(la.rows()) {
                let pb = softmax(rb.as_slice().unwrap());
                let pa = softmax(ra.as_slice().unwrap());
                if let Ok(h) = metrics::hellinger(&pb, &pa) {
                    hell.push(h);
                }
                if let Ok(s) =
                    metrics::spearman(rb.as_slice().unwrap(), ra.as_slice().unwrap())
                {
                    spear.push(s);
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            (
                if hell.is_empty() {
                    Field::Skipped("no_valid_rows".to_string())
                } else {
                    Field::Value(mean(&hell))
                },
                if spear.is_empty() {
                    Field::Skipped("constant_logits".to_string())
                } else {
                    Field::Value(mean(&spear))
                },
            )
        }
    };

    Ok(AuditReport {
        n,
        d,
        gram_bound_p1,
        gw_upper_estimate,
        gw_coupling,
        gw_subsample_ids,
        rsa,
        cosine_shift_mean,
        calinski_harabasz_before,
        calinski_harabasz_after,
        silhouette_before,
        silhouette_after,
        hellinger_mean,
        spearman_logits_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_file(n: usize, d: usize, seed: u64) -> EmbeddingFile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        EmbeddingFile {
            ids: (0..n).map(|i| format!("s{i}")).collect(),
            labels: (0..n).map(|i| i % 2).collect(),
            data,
        }
    }

    #[test]
    fn audit_of_identical_files() {
        let f = random_file(5, 4, 1);
        let report = audit(&f, &f, None, &AuditOptions::default()).unwrap();
        assert_eq!(report.gram_bound_p1, Field::Value(0.0));
        assert_eq!(report.rsa.value().unwrap(), 1.0);
        // Unit rows carry one ulp of normalization rounding.
        assert!(report.cosine_shift_mean.value().unwrap().abs() < 1e-12);
        assert!(report.gw_upper_estimate.value().unwrap().abs() < 1e-12);
        assert_eq!(report.hellinger_mean, Field::Skipped("no_prototypes".into()));
    }

    #[test]
    fn audit_subsamples_large_inputs() {
        let f = random_file(10, 3, 2);
        let report = audit(&f, &f, None, &AuditOptions::default()).unwrap();
        match &report.gw_subsample_ids {
            Field::Text(ids) => assert_eq!(ids.split(',').count(), 6),
            other => panic!("expected subsample ids, got {other:?}"),
        }
        assert!(report.gw_upper_estimate.value().unwrap().abs() < 1e-12);
    }

    #[test]
    fn audit_with_prototypes_fills_prediction_metrics() {
        let f = random_file(6, 4, 3);
        let protos = random_file(2, 4, 4);
        let report = audit(&f, &f, Some(&protos), &AuditOptions::default()).unwrap();
        assert!(report.hellinger_mean.value().unwrap().abs() < 1e-7);
        assert!((report.spearman_logits_mean.value().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn audit_rejects_mismatched_ids() {
        let a = random_file(4, 3, 5);
        let mut b = a.clone();
        b.ids[2] = "other".to_string();
        match audit(&a, &b, None, &AuditOptions::default()).unwrap_err() {
            CliError::IdMismatch { id } => assert_eq!(id, "s2"),
            other => panic!("expected IdMismatch, got {other:?}"),
        }
    }

    #[test]
    fn report_renders_every_field() {
        let f = random_file(5, 4, 6);
        let report = audit(&f, &f, None, &AuditOptions::default()).unwrap();
        let text = report.render();
        for key in [
            "n=", "d=", "gram_bound_p1=", "gw_upper_estimate=", "gw_coupling=",
            "gw_subsample_ids=", "rsa=", "cosine_shift_mean=", "calinski_harabasz_before=",
            "calinski_harabasz_after=", "silhouette_before=", "silhouette_after=",
            "hellinger_mean=", "spearman_logits_mean=",
        ] {
            assert!(text.contains(key), "missing {key} in:\n{text}");
        }
    }
}

//! Dataset synthesis to disk and loading back: token fields flattened into
//! embedding CSVs plus a flat-text manifest describing the geometry.

use crate::embedding::EmbeddingFile;
use crate::CliError;
use gramtune_core::data::{self, Dataset, SynthConfig};
use ndarray::Array2;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const TRAIN_NAME: &str = "tokens_train.csv";
pub const TEST_NAME: &str = "tokens_test.csv";

/// Generate a synthetic dataset and write it under `out_dir` as two token
/// CSVs (first/second half of each class) plus a manifest recording every
/// flag. Byte-identical across runs with the same flags and seed.
pub fn write_dataset(out_dir: &Path, cfg: &SynthConfig) -> Result<Dataset, CliError> {
    let dataset = data::generate(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;

    let half = cfg.per_class / 2;
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for (i, &label) in dataset.labels.iter().enumerate() {
        let within_class = i % cfg.per_class;
        let _ = label;
        if within_class < cfg.per_class - half {
            train_rows.push(i);
        } else {
            test_rows.push(i);
        }
    }
    let to_file = |rows: &[usize]| -> EmbeddingFile {
        let d = cfg.patch_count * cfg.patch_input_dim;
        let mut out = Array2::zeros((rows.len(), d));
        let mut ids = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for (r, &i) in rows.iter().enumerate() {
            for (c, &v) in dataset.tokens[i].iter().enumerate() {
                out[[r, c]] = v;
            }
            ids.push(i.to_string());
            labels.push(dataset.labels[i]);
        }
        EmbeddingFile {
            ids,
            labels,
            data: out,
        }
    };
    to_file(&train_rows).write(&out_dir.join(TRAIN_NAME))?;
    to_file(&test_rows).write(&out_dir.join(TEST_NAME))?;

    let manifest = format!(
        "classes={}\nper_class={}\ntokens={}\ntoken_dim={}\nnoise={}\nseed={}\ntrain_file={TRAIN_NAME}\ntest_file={TEST_NAME}\ntrain_rows={}\ntest_rows={}\n",
        cfg.classes,
        cfg.per_class,
        cfg.patch_count,
        cfg.patch_input_dim,
        cfg.noise,
        cfg.seed,
        train_rows.len(),
        test_rows.len(),
    );
    crate::atomic_write(&out_dir.join(MANIFEST_NAME), manifest.as_bytes())?;
    Ok(dataset)
}

fn manifest_get<'a>(
    map: &'a BTreeMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<&'a str, CliError> {
    map.get(key).map(String::as_str).ok_or_else(|| CliError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: format!("manifest missing key `{key}`"),
    })
}

/// Load a synthesized dataset back from its manifest directory. Both token
/// files are pooled; the trainer draws its own k-shot split.
pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| CliError::io(&manifest_path, e))?;
    let map = gramtune_core::trainer::parse_kv_text(&text)?;
    let tokens_per_sample: usize = manifest_get(&map, "tokens", &manifest_path)?
        .parse()
        .map_err(|_| CliError::Usage("bad `tokens` in manifest".into()))?;
    let token_dim: usize = manifest_get(&map, "token_dim", &manifest_path)?
        .parse()
        .map_err(|_| CliError::Usage("bad `token_dim` in manifest".into()))?;
    let classes: usize = manifest_get(&map, "classes", &manifest_path)?
        .parse()
        .map_err(|_| CliError::Usage("bad `classes` in manifest".into()))?;

    let mut tokens: Vec<Array2<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for key in ["train_file", "test_file"] {
        let name = manifest_get(&map, key, &manifest_path)?;
        let file = EmbeddingFile::read(&dir.join(name))?;
        let expected = tokens_per_sample * token_dim;
        if file.dim() != expected {
            return Err(CliError::DimMismatch {
                left: file.dim(),
                right: expected,
            });
        }
        for (row, &label) in file.data.rows().into_iter().zip(file.labels.iter()) {
            let m = Array2::from_shape_vec(
                (tokens_per_sample, token_dim),
                row.iter().cloned().collect(),
            )
            .expect("dim checked");
            tokens.push(m);
            labels.push(label);
        }
    }
    Ok(Dataset {
        tokens,
        labels,
        n_classes: classes,
        patch_count: tokens_per_sample,
        patch_input_dim: token_dim,
    })
}

/// Paths of the files a synth run produces.
pub fn output_paths(out_dir: &Path) -> [PathBuf; 3] {
    [
        out_dir.join(TRAIN_NAME),
        out_dir.join(TEST_NAME),
        out_dir.join(MANIFEST_NAME),
    ]
}

//! Decimal CSV interchange for embeddings: header `id,label,f0,...,f{d-1}`,
//! one sample per row. Values print with full round-trip precision.

use crate::CliError;
use ndarray::Array2;
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    /// n x d feature values as stored in the file (not normalized).
    pub data: Array2<f64>,
}

impl EmbeddingFile {
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self, CliError> {
        let err = |line: usize, message: String| CliError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| err(1, "empty file".to_string()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "id" || cols[1] != "label" {
            return Err(err(1, format!("bad header `{header}`")));
        }
        let d = cols.len() - 2;
        for (i, name) in cols[2..].iter().enumerate() {
            if *name != format!("f{i}") {
                return Err(err(1, format!("expected column f{i}, found `{name}`")));
            }
        }

        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut values = Vec::new();
        let mut seen = BTreeSet::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 2 {
                return Err(err(
                    lineno,
                    format!("expected {} fields, found {}", d + 2, fields.len()),
                ));
            }
            let id = fields[0].trim().to_string();
            if id.is_empty() {
                return Err(err(lineno, "empty id".to_string()));
            }
            if !seen.insert(id.clone()) {
                return Err(err(lineno, format!("duplicate id `{id}`")));
            }
            let label: usize = fields[1]
                .trim()
                .parse()
                .map_err(|_| err(lineno, format!("bad label `{}`", fields[1])))?;
            for f in &fields[2..] {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| err(lineno, format!("bad value `{f}`")))?;
                if !v.is_finite() {
                    return Err(err(lineno, format!("non-finite value `{f}`")));
                }
                values.push(v);
            }
            ids.push(id);
            labels.push(label);
        }
        if ids.is_empty() {
            return Err(err(1, "no data rows".to_string()));
        }
        let data = Array2::from_shape_vec((ids.len(), d), values).expect("counts match");
        Ok(Self { ids, labels, data })
    }

    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("id,label");
        for i in 0..d {
            out.push_str(&format!(",f{i}"));
        }
        out.push('\n');
        for ((id, label), row) in self
            .ids
            .iter()
            .zip(self.labels.iter())
            .zip(self.data.rows())
        {
            out.push_str(id);
            out.push(',');
            out.push_str(&label.to_string());
            for v in row.iter() {
                out.push(',');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        crate::atomic_write(path, self.to_csv().as_bytes())
    }

    /// Pair rows of `self` and `other` by id, reordering `other` to match.
    /// The first id without a counterpart (either direction) is reported.
    pub fn align_by_id(&self, other: &EmbeddingFile) -> Result<EmbeddingFile, CliError> {
        if self.dim() != other.dim() {
            return Err(CliError::DimMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        let index: std::collections::BTreeMap<&str, usize> = other
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut data = Array2::zeros((self.n(), self.dim()));
        let mut labels = Vec::with_capacity(self.n());
        for (row, id) in self.ids.iter().enumerate() {
            let Some(&src) = index.get(id.as_str()) else {
                return Err(CliError::IdMismatch { id: id.clone() });
            };
            data.row_mut(row).assign(&other.data.row(src));
            labels.push(other.labels[src]);
        }
        if other.n() != self.n() {
            let ours: BTreeSet<&str> = self.ids.iter().map(String::as_str).collect();
            let extra = other
                .ids
                .iter()
                .find(|id| !ours.contains(id.as_str()))
                .expect("count mismatch implies an unmatched id");
            return Err(CliError::IdMismatch { id: extra.clone() });
        }
        Ok(EmbeddingFile {
            ids: self.ids.clone(),
            labels,
            data,
        })
    }
}

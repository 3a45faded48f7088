use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::IndexMap;

/// Fixed-length feature vectors keyed by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    items: IndexMap,
    rows: Vec<Vec<f64>>,
    dim: usize,
}

/// JSON sidecar of the binary feature format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinarySidecar {
    #[serde(rename = "F")]
    pub dim: usize,
    pub items: Vec<String>,
}

impl FeatureTable {
    pub fn new(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                found: rows.len(),
            });
        }
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::domain("feature table is empty"));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: r.len(),
            });
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite feature value"));
        }
        Ok(Self {
            items: IndexMap::from_ids(ids)?,
            rows,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn items(&self) -> &IndexMap {
        &self.items
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k]
    }

    pub fn get(&self, item_id: &str) -> Option<&[f64]> {
        self.items.get(item_id).map(|k| self.rows[k].as_slice())
    }

    pub fn require(&self, item_id: &str) -> Result<&[f64]> {
        self.get(item_id)
            .ok_or_else(|| Error::domain(format!("no features for item {item_id:?}")))
    }

    /// CSV with header `item_id,f0,...,f{F-1}`.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let perr = |line: u64, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let header = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
        if header.get(0) != Some("item_id") || header.len() < 2 {
            return Err(perr(1, "expected header item_id,f0,...".into()));
        }
        for (k, h) in header.iter().skip(1).enumerate() {
            if h != format!("f{k}") {
                return Err(perr(1, format!("column {} should be f{k}, found {h:?}", k + 1)));
            }
        }
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| perr(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != header.len() {
                return Err(perr(line, format!("expected {} fields", header.len())));
            }
            ids.push(rec[0].to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| perr(line, format!("{v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::new(ids, rows)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        let mut header = vec!["item_id".to_string()];
        header.extend((0..self.dim).map(|k| format!("f{k}")));
        w.write_record(&header).map_err(fmt)?;
        for (k, row) in self.rows.iter().enumerate() {
            let mut rec = vec![self.items.id(k).to_string()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(fmt)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Row-major little-endian f64 payload plus a JSON sidecar `{F, items}`.
    pub fn load_binary(data: &Path, sidecar: &Path) -> Result<Self> {
        let meta: BinarySidecar = serde_json::from_str(
            &std::fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?,
        )?;
        let bytes = std::fs::read(data).map_err(|e| Error::io(data, e))?;
        if bytes.len() != meta.dim * meta.items.len() * 8 {
            return Err(Error::Format(format!(
                "binary features: {} bytes for {} x {} values",
                bytes.len(),
                meta.items.len(),
                meta.dim
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let rows = values.chunks(meta.dim.max(1)).map(<[f64]>::to_vec).collect();
        Self::new(meta.items, rows)
    }

    pub fn save_binary(&self, data: &Path, sidecar: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.rows.len() * self.dim * 8);
        for v in self.rows.iter().flatten() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(data, bytes).map_err(|e| Error::io(data, e))?;
        let meta = BinarySidecar {
            dim: self.dim,
            items: self.items.ids().to_vec(),
        };
        std::fs::write(sidecar, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(sidecar, e))
    }
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Statistics over `rows`; constant dimensions get scale 1.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0.0;
        let mut sum = vec![0.0; dim];
        let mut sumsq = vec![0.0; dim];
        for r in rows {
            n += 1.0;
            for k in 0..dim {
                sum[k] += r[k];
                sumsq[k] += r[k] * r[k];
            }
        }
        let n = f64::max(n, 1.0);
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = (0..dim)
            .map(|k| {
                let var = (sumsq[k] / n - mean[k] * mean[k]).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> FeatureTable {
        FeatureTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![1.0, 10.0], vec![2.0, 10.0], vec![3.0, 10.0]],
        )
        .unwrap()
    }

    #[test]
    fn csv_and_binary_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = table();
        t.save_csv(&dir.path().join("f.csv")).unwrap();
        assert_eq!(FeatureTable::load_csv(&dir.path().join("f.csv")).unwrap(), t);
        t.save_binary(&dir.path().join("f.bin"), &dir.path().join("f.json")).unwrap();
        assert_eq!(
            FeatureTable::load_binary(&dir.path().join("f.bin"), &dir.path().join("f.json")).unwrap(),
            t
        );
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(FeatureTable::new(vec!["a".into(), "b".into()], vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(FeatureTable::new(vec!["a".into()], vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn standardizer_constant_column() {
        let t = table();
        let s = Standardizer::fit((0..3).map(|k| t.row(k)), 2);
        assert!((s.mean[0] - 2.0).abs() < 1e-15);
        assert_eq!(s.scale[1], 1.0);
        let z = s.apply(&[3.0, 10.0]);
        assert!((z[0] - 1.224744871391589).abs() < 1e-12);
        assert_eq!(z[1], 0.0);
    }
}

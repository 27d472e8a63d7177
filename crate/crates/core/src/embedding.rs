//! POI embedding matrices and their text format: `N d`, then `poi_id v1 … vd`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::PoiId;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingRole {
    BasePoi,
    Fused,
    Semantic,
    Aligned,
}

impl FromStr for EmbeddingRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base_poi" | "base" => Ok(EmbeddingRole::BasePoi),
            "fused" => Ok(EmbeddingRole::Fused),
            "semantic" => Ok(EmbeddingRole::Semantic),
            "aligned" => Ok(EmbeddingRole::Aligned),
            other => Err(Error::invalid(format!("unknown embedding role `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub role: EmbeddingRole,
    pub poi_ids: Vec<PoiId>,
    pub rows: Matrix,
}

impl EmbeddingMatrix {
    pub fn new(role: EmbeddingRole, poi_ids: Vec<PoiId>, rows: Matrix) -> Result<Self> {
        if poi_ids.len() != rows.rows() {
            return Err(Error::Shape(format!(
                "{} ids for {} embedding rows",
                poi_ids.len(),
                rows.rows()
            )));
        }
        if !rows.is_finite() {
            return Err(Error::Numeric("non-finite embedding entries".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = poi_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::invalid(format!("duplicate poi id {dup} in embedding")));
        }
        Ok(EmbeddingMatrix { role, poi_ids, rows })
    }

    pub fn len(&self) -> usize {
        self.poi_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poi_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn index(&self) -> HashMap<PoiId, usize> {
        self.poi_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    pub fn row_of(&self, id: PoiId) -> Option<&[f64]> {
        self.poi_ids.iter().position(|&p| p == id).map(|i| self.rows.row(i))
    }

    /// Rows for `ids` in that order; `None` if any id is absent.
    pub fn gather(&self, ids: &[PoiId]) -> Option<Matrix> {
        let index = self.index();
        let idx: Option<Vec<usize>> = ids.iter().map(|id| index.get(id).copied()).collect();
        idx.map(|idx| self.rows.select_rows(&idx))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.dim());
        for (i, id) in self.poi_ids.iter().enumerate() {
            let _ = write!(out, "{id}");
            for v in self.rows.row(i) {
                let _ = write!(out, " {v:.8e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn parse(text: &str, role: EmbeddingRole, path: &Path) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty embedding file".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        let (n, d) = match head.as_slice() {
            [n, d] => (
                n.parse::<usize>().map_err(|e| bad(1, format!("bad row count: {e}")))?,
                d.parse::<usize>().map_err(|e| bad(1, format!("bad dimension: {e}")))?,
            ),
            _ => return Err(bad(1, "header must be `N d`".into())),
        };
        let mut ids = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        for (i, line) in lines {
            let mut parts = line.split_whitespace();
            let id = parts
                .next()
                .unwrap_or_default()
                .parse::<PoiId>()
                .map_err(|e| bad(i + 1, format!("bad poi id: {e}")))?;
            let before = data.len();
            for p in parts {
                data.push(p.parse::<f64>().map_err(|e| bad(i + 1, format!("bad value: {e}")))?);
            }
            if data.len() - before != d {
                return Err(bad(i + 1, format!("expected {d} values, found {}", data.len() - before)));
            }
            ids.push(id);
        }
        if ids.len() != n {
            return Err(bad(1, format!("header says {n} rows, found {}", ids.len())));
        }
        EmbeddingMatrix::new(role, ids, Matrix::new(n, d, data))
    }

    pub fn load(path: &Path, role: EmbeddingRole) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, role, path)
    }
}

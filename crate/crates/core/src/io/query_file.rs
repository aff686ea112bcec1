//! JSON query sets: `{"D": …, "canonicals": [[…]], "queries": [{name, vector, gt_mask_path?}]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_file, FormatError};
use crate::query::QueryEmbedding;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub name: String,
    pub vector: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySetFile {
    #[serde(rename = "D")]
    pub dim: usize,
    pub canonicals: Vec<Vec<f32>>,
    pub queries: Vec<QueryEntry>,
}

impl QuerySetFile {
    pub fn validate(&self) -> Result<()> {
        let vectors = self.canonicals.iter().chain(self.queries.iter().map(|q| &q.vector));
        for v in vectors {
            if v.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    what: "query vector length",
                    expected: self.dim,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation("query vectors must be finite"));
            }
        }
        let mut names: Vec<&str> = self.queries.iter().map(|q| q.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::validation(format!("duplicate query name {:?}", w[0])));
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.queries.iter().map(|q| q.name.as_str()).collect()
    }

    /// Looks a query up by name; the error lists what is available.
    pub fn find(&self, name: &str) -> Result<QueryEmbedding> {
        self.queries
            .iter()
            .find(|q| q.name == name)
            .map(|q| QueryEmbedding::new(q.name.clone(), q.vector.clone()))
            .ok_or_else(|| {
                Error::validation(format!(
                    "unknown query {name:?}; available: {}",
                    self.names().join(", ")
                ))
            })
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let mut s = serde_json::to_string_pretty(self).map_err(|e| FormatError::Json(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let q: Self = serde_json::from_str(text).map_err(|e| FormatError::Json(e.to_string()))?;
        q.validate()?;
        Ok(q)
    }
}

pub fn save_query_set(path: impl AsRef<Path>, set: &QuerySetFile) -> Result<()> {
    write_file(path.as_ref(), set.to_json()?.as_bytes())
}

pub fn load_query_set(path: impl AsRef<Path>) -> Result<QuerySetFile> {
    let bytes = read_file(path.as_ref())?;
    let text = std::str::from_utf8(&bytes).map_err(|e| FormatError::Json(e.to_string()))?;
    QuerySetFile::from_json(text)
}

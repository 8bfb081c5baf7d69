//! Column mapping for third-party rating exports.
//!
//! Survey exports usually arrive as CSV with one row per individual rating
//! and column names chosen by whoever ran the study. A [`ColumnMap`] names the
//! four columns that matter and an optional offset that shifts the export's
//! scale onto 0..=5 (e.g. `-1` for a 1..=6 export). Rows are grouped into
//! [`RatingSet`]s keyed by the unordered response pair, in order of first
//! appearance.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{RatingSet, MAX_RATING};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub prompt_id: String,
    pub response_id_a: String,
    pub response_id_b: String,
    pub rating: String,
    pub rating_offset: i64,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            prompt_id: "prompt_id".into(),
            response_id_a: "response_id_a".into(),
            response_id_b: "response_id_b".into(),
            rating: "rating".into(),
            rating_offset: 0,
        }
    }
}

impl ColumnMap {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::trace::read_json_file(path.as_ref())
    }
}

pub fn load_ratings_csv(path: impl AsRef<Path>, map: &ColumnMap) -> Result<Vec<RatingSet>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, 0, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, 1, e))?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("missing column {name:?} (have {:?})", headers.iter().collect::<Vec<_>>()),
        })
    };
    let cols = [
        column(&map.prompt_id)?,
        column(&map.response_id_a)?,
        column(&map.response_id_b)?,
        column(&map.rating)?,
    ];

    let mut sets: Vec<RatingSet> = Vec::new();
    let mut index: HashMap<(String, String, String), usize> = HashMap::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| csv_error(path, line, e))?;
        let field = |c: usize| record.get(c).unwrap_or("").trim().to_string();
        let (prompt, a, b) = (field(cols[0]), field(cols[1]), field(cols[2]));
        let raw = field(cols[3]);
        let value: i64 = raw.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("rating {raw:?} is not an integer"),
        })?;
        let shifted = value + map.rating_offset;
        if !(0..=MAX_RATING as i64).contains(&shifted) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("rating {value} maps to {shifted}, outside 0..={MAX_RATING}"),
            });
        }
        let key = if a <= b {
            (prompt.clone(), a.clone(), b.clone())
        } else {
            (prompt.clone(), b.clone(), a.clone())
        };
        let slot = *index.entry(key).or_insert_with(|| {
            sets.push(RatingSet {
                prompt_id: prompt,
                response_id_a: a,
                response_id_b: b,
                ratings: Vec::new(),
            });
            sets.len() - 1
        });
        sets[slot].ratings.push(shifted as u8);
    }
    for set in &sets {
        set.validate()?;
    }
    Ok(sets)
}

fn csv_error(path: &Path, line: usize, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

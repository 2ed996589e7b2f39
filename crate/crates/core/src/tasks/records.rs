use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    /// Enumerated values with a known ground truth.
    Categorical,
    /// Free-form; the listed values only seed training tuples.
    Open,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSchema {
    pub fields: Vec<FieldSpec>,
    /// Number of tuples in the training target.
    pub budget: usize,
}

impl RecordSchema {
    pub fn validate(&self) -> Result<()> {
        let schema_err = |field: &str, message: String| Error::Schema {
            file: "<record schema>".into(),
            line: 0,
            field: field.to_string(),
            message,
        };
        if self.fields.is_empty() {
            return Err(schema_err("field", "a record needs at least one field".into()));
        }
        for f in &self.fields {
            if f.values.is_empty() {
                return Err(schema_err(&f.name, "field lists no values".into()));
            }
            if let Some(v) = f.values.iter().find(|v| v.contains(['{', '}', '|']) || v.trim() != v.as_str() || v.is_empty()) {
                return Err(schema_err(&f.name, format!("value `{v}` is empty, padded, or contains a brace or `|`")));
            }
            for (i, v) in f.values.iter().enumerate() {
                if f.values[..i].contains(v) {
                    return Err(schema_err(&f.name, format!("value `{v}` is listed twice")));
                }
            }
        }
        if self.budget == 0 {
            return Err(schema_err("budget", "budget must be positive".into()));
        }
        let product = self.fields.iter().try_fold(1usize, |acc, f| acc.checked_mul(f.values.len()));
        match product {
            Some(p) if p >= self.budget => Ok(()),
            _ => Err(schema_err(
                "budget",
                format!("budget {} exceeds the number of distinct tuples", self.budget),
            )),
        }
    }

    pub fn field_names(&self) -> Vec<String> {
        self.fields.iter().map(|f| f.name.clone()).collect()
    }
}

/// Renders a tuple as `{a} {b} {c}`.
pub fn render_record(values: &[&str]) -> String {
    values.iter().map(|v| format!("{{{v}}}")).collect::<Vec<_>>().join(" ")
}

/// `budget` distinct tuples with per-field marginals that differ by at most one.
///
/// Tuples are emitted along cycles of the step `(+1, +1, …, +1)` (each
/// coordinate modulo its field size). A full cycle uses every value of every
/// field equally often, and a partial cycle is a run of consecutive values in
/// each field. Cycles start from the lexicographically first tuple not yet used.
pub fn balanced_tuples(schema: &RecordSchema) -> Result<Vec<Vec<usize>>> {
    schema.validate()?;
    let radices: Vec<usize> = schema.fields.iter().map(|f| f.values.len()).collect();
    let mut used: HashSet<Vec<usize>> = HashSet::new();
    let mut out = Vec::with_capacity(schema.budget);
    let mut start = vec![0usize; radices.len()];
    while out.len() < schema.budget {
        if !used.contains(&start) {
            let mut t = start.clone();
            while out.len() < schema.budget && used.insert(t.clone()) {
                out.push(t.clone());
                for (v, &r) in t.iter_mut().zip(&radices) {
                    *v = (*v + 1) % r;
                }
            }
        }
        // Odometer step to the next tuple in lexicographic order.
        for k in (0..radices.len()).rev() {
            start[k] += 1;
            if start[k] < radices[k] {
                break;
            }
            start[k] = 0;
        }
    }
    Ok(out)
}

/// The rendered training targets of `schema`.
pub fn record_targets(schema: &RecordSchema) -> Result<Vec<String>> {
    Ok(balanced_tuples(schema)?
        .iter()
        .map(|t| {
            let vals: Vec<&str> = t.iter().enumerate().map(|(k, &v)| schema.fields[k].values[v].as_str()).collect();
            render_record(&vals)
        })
        .collect())
}

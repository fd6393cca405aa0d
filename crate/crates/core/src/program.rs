//! The program data model: a signature, a sparse coefficient matrix, a
//! constraint policy and a seed, plus the on-disk JSON format.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elements::ElementSource;
use crate::signature::{NameError, Signature, ValidationReport};

/// Constraints on resolved coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    #[default]
    Free,
    /// Every coefficient must be nonnegative.
    Nonneg,
    /// Nonnegative, and each column must sum to at most 1 (within 1e-12).
    Substochastic,
}

/// What a step does when the policy is violated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViolationMode {
    /// The step fails with an error naming the time and column.
    #[default]
    Reject,
    /// Negative coefficients clamp to 0; columns summing above 1 rescale to
    /// sum exactly 1.
    Clamp,
}

/// Sparse map from column (input) name to row (output) name to coefficient
/// source. Only present entries can ever be nonzero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoefficientMatrix {
    columns: BTreeMap<String, BTreeMap<String, ElementSource>>,
}

impl CoefficientMatrix {
    pub fn insert(&mut self, column: &str, row: &str, source: ElementSource) -> Option<ElementSource> {
        self.columns
            .entry(column.to_string())
            .or_default()
            .insert(row.to_string(), source)
    }

    pub fn get(&self, column: &str, row: &str) -> Option<&ElementSource> {
        self.columns.get(column).and_then(|c| c.get(row))
    }

    pub fn column(&self, column: &str) -> Option<&BTreeMap<String, ElementSource>> {
        self.columns.get(column)
    }

    pub fn columns(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, ElementSource>)> {
        self.columns.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Iterates `(column, row, source)` in column-then-row order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &ElementSource)> {
        self.columns.iter().flat_map(|(col, rows)| {
            rows.iter()
                .map(move |(row, src)| (col.as_str(), row.as_str(), src))
        })
    }

    pub fn len(&self) -> usize {
        self.columns.values().map(|c| c.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

/// A complete program: what the machine loads and runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Program {
    pub signature: Signature,
    pub matrix: CoefficientMatrix,
    pub policy: Policy,
    pub on_violation: ViolationMode,
    pub seed: u64,
    /// Sets of input names constrained to share one column of coefficients.
    pub shared_input_groups: Vec<Vec<String>>,
    /// Default node names to record when running.
    pub watch: Vec<String>,
}

impl Program {
    pub fn new(signature: Signature, policy: Policy) -> Self {
        Program {
            signature,
            matrix: CoefficientMatrix::default(),
            policy,
            on_violation: ViolationMode::default(),
            seed: 0,
            shared_input_groups: Vec::new(),
            watch: Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ProgramError {
    #[error("invalid signature:\n{0}")]
    Signature(ValidationReport),
    #[error(transparent)]
    Name(#[from] NameError),
    #[error(transparent)]
    Eval(#[from] crate::stdlib::EvalError),
    #[error("duplicate element ({column}, {row})")]
    DuplicateElement { column: String, row: String },
    #[error("invalid schedule for element ({column}, {row}): {reason}")]
    BadSchedule {
        column: String,
        row: String,
        reason: String,
    },
    #[error("shared input group member `{name}`: {reason}")]
    SharedGroup { name: String, reason: String },
    #[error("watch name `{name}` does not parse: {reason}")]
    BadWatch { name: String, reason: String },
}

/// Errors from reading or writing program files.
#[derive(Debug, Error)]
pub enum FileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed program file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Program(#[from] ProgramError),
}

/// One matrix entry as serialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementRecord {
    pub column: String,
    pub row: String,
    pub source: ElementSource,
}

/// The on-disk program document. `seed` may be omitted and supplied at run
/// time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramFile {
    pub signature: Signature,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub on_violation: ViolationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub elements: Vec<ElementRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shared_input_groups: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub watch: Vec<String>,
}

impl ProgramFile {
    pub fn from_program(program: &Program) -> Self {
        ProgramFile {
            signature: program.signature.clone(),
            policy: program.policy,
            on_violation: program.on_violation,
            seed: Some(program.seed),
            elements: program
                .matrix
                .iter()
                .map(|(column, row, source)| ElementRecord {
                    column: column.to_string(),
                    row: row.to_string(),
                    source: source.clone(),
                })
                .collect(),
            shared_input_groups: program.shared_input_groups.clone(),
            watch: program.watch.clone(),
        }
    }

    /// Builds the program, rejecting duplicate elements. `seed_override`
    /// wins over the file's seed; with neither, the seed is 0.
    pub fn into_program(self, seed_override: Option<u64>) -> Result<Program, ProgramError> {
        let mut matrix = CoefficientMatrix::default();
        for rec in self.elements {
            if matrix.insert(&rec.column, &rec.row, rec.source).is_some() {
                return Err(ProgramError::DuplicateElement {
                    column: rec.column,
                    row: rec.row,
                });
            }
        }
        Ok(Program {
            signature: self.signature,
            matrix,
            policy: self.policy,
            on_violation: self.on_violation,
            seed: seed_override.or(self.seed).unwrap_or(0),
            shared_input_groups: self.shared_input_groups,
            watch: self.watch,
        })
    }

    pub fn from_str(s: &str) -> Result<Self, FileError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_string_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("program files always serialize");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, FileError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), FileError> {
        std::fs::write(path, self.to_string_pretty())?;
        Ok(())
    }
}

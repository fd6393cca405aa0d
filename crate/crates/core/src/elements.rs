//! Coefficient sources for matrix elements and their order taxonomy.
//!
//! An absent entry is a zero-order element. Present entries carry one of
//! three sources: a constant (first order), an external schedule
//! (sesquialteral order), or a node of the program itself (properly
//! higher-order). A node source is fully higher-order exactly when it is the
//! identity controller dedicated to that element; such a coefficient becomes
//! effective one step after the value enters the controller, while any other
//! node source is effective immediately.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::program::{CoefficientMatrix, Policy, Program, ProgramError};
use crate::signature::{
    element_name, input_node_name, output_node_name, parse_name, ElementName, NameError, NodeName,
    ParsedName, Signature,
};

/// How a present matrix element obtains its coefficient stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementSource {
    /// Fixed value for all time.
    #[serde(rename = "const")]
    Constant(f64),
    /// Externally programmed function of time.
    External(Schedule),
    /// The stream of an output node of the same program.
    Node(String),
}

/// Piecewise schedule over integer time, defined for all `t >= 0`.
/// Before the first breakpoint it holds the first value; past the last it
/// holds the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub mode: InterpMode,
    pub points: Vec<(u64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpMode {
    /// Piecewise constant: holds each value until the next breakpoint.
    Step,
    /// Piecewise linear between breakpoints.
    Linear,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("schedule has no breakpoints")]
    Empty,
    #[error("schedule breakpoints must be strictly increasing in t")]
    NotIncreasing,
}

impl Schedule {
    pub fn step(points: Vec<(u64, f64)>) -> Self {
        Schedule {
            mode: InterpMode::Step,
            points,
        }
    }

    pub fn linear(points: Vec<(u64, f64)>) -> Self {
        Schedule {
            mode: InterpMode::Linear,
            points,
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.points.is_empty() {
            return Err(ScheduleError::Empty);
        }
        if self.points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(ScheduleError::NotIncreasing);
        }
        Ok(())
    }

    pub fn value_at(&self, t: u64) -> f64 {
        let pts = &self.points;
        if pts.is_empty() {
            return 0.0;
        }
        if t < pts[0].0 {
            return pts[0].1;
        }
        let idx = pts.partition_point(|p| p.0 <= t) - 1;
        match self.mode {
            InterpMode::Step => pts[idx].1,
            InterpMode::Linear => {
                if idx + 1 < pts.len() {
                    let (t0, v0) = pts[idx];
                    let (t1, v1) = pts[idx + 1];
                    v0 + (v1 - v0) * ((t - t0) as f64 / (t1 - t0) as f64)
                } else {
                    pts[idx].1
                }
            }
        }
    }
}

/// The order of a matrix element, by source kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum OrderClass {
    Zero,
    First,
    Sesquialteral,
    Specialized,
    FullyHigherOrder,
}

impl fmt::Display for OrderClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OrderClass::Zero => "zero-order",
            OrderClass::First => "first-order",
            OrderClass::Sesquialteral => "sesquialteral",
            OrderClass::Specialized => "specialized",
            OrderClass::FullyHigherOrder => "fully-higher-order",
        };
        f.write_str(s)
    }
}

/// The identity node whose stream is the coefficient of `element` in the
/// fully higher-order machine: `<identity> <element>`.
pub fn controller_node_for(element: &ElementName, sig: &Signature) -> Result<NodeName, NameError> {
    output_node_name(sig, &sig.identity_name, element.raw())
}

/// The single input of the controller: `arg1 <identity> <element>`.
pub fn controller_input_for(element: &ElementName, sig: &Signature) -> Result<NodeName, NameError> {
    let ctrl = controller_node_for(element, sig)?;
    input_node_name(sig, ctrl.raw(), 1)
}

/// Classifies an element by its source. Total: unknown node names classify
/// as specialized and are rejected elsewhere, never here.
pub fn classify_element(
    entry: Option<&ElementSource>,
    element: &ElementName,
    sig: &Signature,
) -> OrderClass {
    match entry {
        None => OrderClass::Zero,
        Some(ElementSource::Constant(_)) => OrderClass::First,
        Some(ElementSource::External(_)) => OrderClass::Sesquialteral,
        Some(ElementSource::Node(name)) => match parse_name(sig, name) {
            Ok(ParsedName::Output { op, w }) if op == sig.identity_name && w == element.raw() => {
                OrderClass::FullyHigherOrder
            }
            _ => OrderClass::Specialized,
        },
    }
}

/// A set of matrix entries to merge into a program, e.g. the wiring that
/// realizes a constant coefficient through a controller.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProgramFragment {
    /// `(column, row, source)` triples.
    pub entries: Vec<(String, String, ElementSource)>,
}

impl ProgramFragment {
    /// Inserts every entry, failing on a collision with an existing one.
    pub fn apply(&self, matrix: &mut CoefficientMatrix) -> Result<(), ProgramError> {
        for (col, row, source) in &self.entries {
            if matrix.insert(col, row, source.clone()).is_some() {
                return Err(ProgramError::DuplicateElement {
                    column: col.clone(),
                    row: row.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum FragmentError {
    #[error(transparent)]
    Name(#[from] NameError),
    #[error("coefficient {value} violates policy {policy:?}")]
    PolicyViolation { value: f64, policy: Policy },
    #[error("signature has no nonzero constant operation to scale")]
    NoConstantOp,
}

/// Builds the wiring that makes `element` resolve to the constant `c`
/// through its fully higher-order controller: the element's source becomes
/// the controller node, and a unit-constant output feeds the controller's
/// input with first-order weight `c`. The coefficient is 0 at t = 1 and `c`
/// from t = 2 on.
pub fn build_constant_controller(
    element: &ElementName,
    c: f64,
    sig: &Signature,
    policy: Policy,
) -> Result<ProgramFragment, FragmentError> {
    // Prefer a constant emitting exactly 1 so the scaled weight is exact.
    let const_op = sig
        .operations
        .iter()
        .filter(|o| o.kind == crate::signature::OpKind::Constant)
        .filter(|o| o.param("value").is_some_and(|v| v != 0.0))
        .max_by(|a, b| {
            let exact_a = a.param("value") == Some(1.0);
            let exact_b = b.param("value") == Some(1.0);
            exact_a.cmp(&exact_b)
        })
        .ok_or(FragmentError::NoConstantOp)?;
    let v = const_op.param("value").unwrap();
    let weight = if v == 1.0 { c } else { c / v };

    match policy {
        Policy::Free => {}
        Policy::Nonneg => {
            if weight < 0.0 {
                return Err(FragmentError::PolicyViolation { value: weight, policy });
            }
        }
        Policy::Substochastic => {
            if !(0.0..=1.0).contains(&weight) {
                return Err(FragmentError::PolicyViolation { value: weight, policy });
            }
        }
    }

    let ctrl = controller_node_for(element, sig)?;
    let ctrl_in = controller_input_for(element, sig)?;
    // The constant instance is suffixed with the element name itself, so
    // fragments for distinct elements never collide.
    let const_node = output_node_name(sig, &const_op.name, element.raw())?;

    Ok(ProgramFragment {
        entries: vec![
            (
                element.column().to_string(),
                element.row().to_string(),
                ElementSource::Node(ctrl.raw().to_string()),
            ),
            (
                ctrl_in.raw().to_string(),
                const_node.raw().to_string(),
                ElementSource::Constant(weight),
            ),
        ],
    })
}

/// Rewrites every first-order entry of a program through a constant
/// controller. The result runs the original trajectory delayed by one step.
pub fn lift_constants(program: &Program) -> Result<Program, FragmentError> {
    let mut lifted = program.clone();
    let mut matrix = CoefficientMatrix::default();
    for (col, row, source) in program.matrix.iter() {
        match source {
            ElementSource::Constant(c) => {
                let elem = element_name(&program.signature, col, row)?;
                let fragment =
                    build_constant_controller(&elem, *c, &program.signature, program.policy)?;
                for (fc, fr, fs) in fragment.entries {
                    matrix.insert(&fc, &fr, fs);
                }
            }
            other => {
                matrix.insert(col, row, other.clone());
            }
        }
    }
    lifted.matrix = matrix;
    Ok(lifted)
}

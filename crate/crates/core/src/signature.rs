//! Operation signatures and the string naming scheme for nodes and matrix
//! elements.
//!
//! A node name is the sole identity of a stream. Output nodes are named
//! `<op> <suffix>`, input nodes `arg<k> <output>`, and matrix elements
//! `(<column>)#(<row>)`. Parsing is unambiguous because the multiset of
//! operation names plus the literal `arg` is required to be prefix-free.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Characters reserved for element-name delimiters; they may not appear in
/// operation names or plain node suffixes.
pub const RESERVED_CHARS: [char; 3] = ['(', ')', '#'];

/// Literal prefix of input-node names.
pub const ARG_PREFIX: &str = "arg";

/// The name alphabet: printable ASCII minus the reserved delimiters.
pub fn in_alphabet(c: char) -> bool {
    (' '..='~').contains(&c) && !RESERVED_CHARS.contains(&c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Deterministic,
    Stochastic,
    Constant,
}

/// A template operation: a name, a fixed arity and an evaluation rule
/// selected by `kind` plus named parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperationDef {
    pub name: String,
    pub arity: usize,
    pub kind: OpKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
}

impl OperationDef {
    pub fn deterministic(name: &str, arity: usize) -> Self {
        OperationDef {
            name: name.to_string(),
            arity,
            kind: OpKind::Deterministic,
            params: BTreeMap::new(),
        }
    }

    /// A zero-arity operation emitting a fixed value.
    pub fn constant(name: &str, value: f64) -> Self {
        let mut params = BTreeMap::new();
        params.insert("value".to_string(), value);
        OperationDef {
            name: name.to_string(),
            arity: 0,
            kind: OpKind::Constant,
            params,
        }
    }

    /// The unary randomized propagator: copies its input with probability
    /// `p`, emits zero otherwise.
    pub fn propagator(name: &str, p: f64) -> Self {
        let mut params = BTreeMap::new();
        params.insert("p".to_string(), p);
        OperationDef {
            name: name.to_string(),
            arity: 1,
            kind: OpKind::Stochastic,
            params,
        }
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.get(key).copied()
    }
}

/// A finite set of template operations with one designated identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub operations: Vec<OperationDef>,
    #[serde(rename = "identity")]
    pub identity_name: String,
}

impl Signature {
    pub fn new(operations: Vec<OperationDef>, identity_name: &str) -> Self {
        Signature {
            operations,
            identity_name: identity_name.to_string(),
        }
    }

    pub fn op(&self, name: &str) -> Option<&OperationDef> {
        self.operations.iter().find(|o| o.name == name)
    }

    pub fn identity(&self) -> Option<&OperationDef> {
        self.op(&self.identity_name)
    }

    pub fn validate(&self) -> ValidationReport {
        validate_signature(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    EmptyName,
    ReservedChar { name: String },
    NonPrintable { name: String },
    PrefixClash { shorter: String, longer: String },
    DuplicateName { name: String },
    MissingIdentity { name: String },
    IdentityArity { name: String, arity: usize },
    IdentityKind { name: String },
    ConstantArity { name: String, arity: usize },
    MissingParam { op: String, param: String },
    ParamRange { op: String, param: String, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyName => write!(f, "operation name is empty"),
            Violation::ReservedChar { name } => {
                write!(f, "operation name `{name}` contains a reserved character")
            }
            Violation::NonPrintable { name } => {
                write!(f, "operation name `{name}` contains a non-printable character")
            }
            Violation::PrefixClash { shorter, longer } => {
                write!(f, "`{shorter}` is a prefix of `{longer}`")
            }
            Violation::DuplicateName { name } => {
                write!(f, "operation name `{name}` occurs more than once")
            }
            Violation::MissingIdentity { name } => {
                write!(f, "designated identity `{name}` is not an operation")
            }
            Violation::IdentityArity { name, arity } => {
                write!(f, "identity `{name}` must have arity 1, has {arity}")
            }
            Violation::IdentityKind { name } => {
                write!(f, "identity `{name}` must be deterministic")
            }
            Violation::ConstantArity { name, arity } => {
                write!(f, "constant `{name}` must have arity 0, has {arity}")
            }
            Violation::MissingParam { op, param } => {
                write!(f, "operation `{op}` is missing parameter `{param}`")
            }
            Violation::ParamRange { op, param, value } => {
                write!(f, "operation `{op}` parameter `{param}` = {value} is out of range")
            }
        }
    }
}

/// Outcome of signature validation; carries all violations found.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok() {
            write!(f, "ok")
        } else {
            for (i, v) in self.violations.iter().enumerate() {
                if i > 0 {
                    writeln!(f)?;
                }
                write!(f, "{v}")?;
            }
            Ok(())
        }
    }
}

/// Checks prefix-freeness of the operation names together with `arg`,
/// the reserved-character rule, and the identity/constant constraints.
pub fn validate_signature(sig: &Signature) -> ValidationReport {
    let mut report = ValidationReport::default();

    for op in &sig.operations {
        if op.name.is_empty() {
            report.violations.push(Violation::EmptyName);
            continue;
        }
        if op.name.chars().any(|c| RESERVED_CHARS.contains(&c)) {
            report.violations.push(Violation::ReservedChar {
                name: op.name.clone(),
            });
        } else if !op.name.chars().all(in_alphabet) {
            report.violations.push(Violation::NonPrintable {
                name: op.name.clone(),
            });
        }
        match op.kind {
            OpKind::Constant => {
                if op.arity != 0 {
                    report.violations.push(Violation::ConstantArity {
                        name: op.name.clone(),
                        arity: op.arity,
                    });
                }
                if op.param("value").is_none() {
                    report.violations.push(Violation::MissingParam {
                        op: op.name.clone(),
                        param: "value".to_string(),
                    });
                }
            }
            OpKind::Stochastic => {
                match op.param("p") {
                    None => report.violations.push(Violation::MissingParam {
                        op: op.name.clone(),
                        param: "p".to_string(),
                    }),
                    Some(p) if !(0.0..=1.0).contains(&p) => {
                        report.violations.push(Violation::ParamRange {
                            op: op.name.clone(),
                            param: "p".to_string(),
                            value: p,
                        })
                    }
                    Some(_) => {}
                }
            }
            OpKind::Deterministic => {}
        }
    }

    // Prefix-freeness of the multiset of operation names plus `arg`.
    let mut names: Vec<&str> = sig.operations.iter().map(|o| o.name.as_str()).collect();
    names.push(ARG_PREFIX);
    for i in 0..names.len() {
        for j in 0..names.len() {
            if i == j {
                continue;
            }
            let (a, b) = (names[i], names[j]);
            if a == b {
                if i < j {
                    report.violations.push(Violation::DuplicateName {
                        name: a.to_string(),
                    });
                }
            } else if b.starts_with(a) {
                report.violations.push(Violation::PrefixClash {
                    shorter: a.to_string(),
                    longer: b.to_string(),
                });
            }
        }
    }

    match sig.identity() {
        None => report.violations.push(Violation::MissingIdentity {
            name: sig.identity_name.clone(),
        }),
        Some(op) => {
            if op.arity != 1 {
                report.violations.push(Violation::IdentityArity {
                    name: op.name.clone(),
                    arity: op.arity,
                });
            }
            if op.kind != OpKind::Deterministic {
                report.violations.push(Violation::IdentityKind {
                    name: op.name.clone(),
                });
            }
        }
    }

    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// An X node, the output stream of an operation instance.
    Output,
    /// A Y node, an input stream defined as a linear combination.
    Input,
}

/// A validated node name. Construct via the compose or parse functions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeName {
    raw: String,
    role: Role,
}

impl NodeName {
    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn into_string(self) -> String {
        self.raw
    }
}

impl fmt::Display for NodeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// A validated matrix-element name `(<column>)#(<row>)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ElementName {
    raw: String,
    column: String,
    row: String,
}

impl ElementName {
    pub fn raw(&self) -> &str {
        &self.raw
    }

    /// The input (Y) name indexing the column.
    pub fn column(&self) -> &str {
        &self.column
    }

    /// The output (X) name indexing the row.
    pub fn row(&self) -> &str {
        &self.row
    }
}

impl fmt::Display for ElementName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// One level of structure of a parsed name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParsedName {
    Output { op: String, w: String },
    Input { k: usize, owner: String },
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum NameError {
    #[error("unknown operation `{0}`")]
    UnknownOp(String),
    #[error("argument index {k} out of range for `{owner}` (arity {arity})")]
    ArgOutOfRange { owner: String, k: usize, arity: usize },
    #[error("invalid name `{name}`: {reason}")]
    Invalid { name: String, reason: String },
    #[error("`{name}` is not an {expected} name")]
    RoleMismatch { name: String, expected: &'static str },
}

fn invalid(name: &str, reason: &str) -> NameError {
    NameError::Invalid {
        name: name.to_string(),
        reason: reason.to_string(),
    }
}

/// Composes the output-node name `<op> <w>`.
///
/// The suffix `w` may contain reserved characters only when it is itself a
/// valid element name, which is how the higher-order controller names nest.
pub fn output_node_name(sig: &Signature, op_name: &str, w: &str) -> Result<NodeName, NameError> {
    let op = sig
        .op(op_name)
        .ok_or_else(|| NameError::UnknownOp(op_name.to_string()))?;
    check_suffix(sig, w)?;
    Ok(NodeName {
        raw: format!("{} {}", op.name, w),
        role: Role::Output,
    })
}

fn check_suffix(sig: &Signature, w: &str) -> Result<(), NameError> {
    if w.chars().any(|c| RESERVED_CHARS.contains(&c)) {
        parse_element_name(sig, w)?;
    } else if !w.chars().all(in_alphabet) {
        return Err(invalid(w, "suffix contains a character outside the alphabet"));
    }
    Ok(())
}

/// Composes the input-node name `arg<k> <output>` for the k-th argument of
/// the operation owning `output`, 1-based.
pub fn input_node_name(sig: &Signature, output: &str, k: usize) -> Result<NodeName, NameError> {
    let parsed = parse_name(sig, output)?;
    let op_name = match parsed {
        ParsedName::Output { op, .. } => op,
        ParsedName::Input { .. } => {
            return Err(NameError::RoleMismatch {
                name: output.to_string(),
                expected: "output",
            })
        }
    };
    let arity = sig.op(&op_name).map(|o| o.arity).unwrap_or(0);
    if k < 1 || k > arity {
        return Err(NameError::ArgOutOfRange {
            owner: output.to_string(),
            k,
            arity,
        });
    }
    Ok(NodeName {
        raw: format!("{ARG_PREFIX}{k} {output}"),
        role: Role::Input,
    })
}

/// Composes the element name `(<column>)#(<row>)` from an input name and an
/// output name.
pub fn element_name(sig: &Signature, column: &str, row: &str) -> Result<ElementName, NameError> {
    match parse_name(sig, column)? {
        ParsedName::Input { .. } => {}
        ParsedName::Output { .. } => {
            return Err(NameError::RoleMismatch {
                name: column.to_string(),
                expected: "input",
            })
        }
    }
    match parse_name(sig, row)? {
        ParsedName::Output { .. } => {}
        ParsedName::Input { .. } => {
            return Err(NameError::RoleMismatch {
                name: row.to_string(),
                expected: "output",
            })
        }
    }
    Ok(ElementName {
        raw: format!("({column})#({row})"),
        column: column.to_string(),
        row: row.to_string(),
    })
}

/// Classifies a string as an output or input name against a signature,
/// recursing into any embedded element names. Each recursion step strictly
/// shortens the string, so parsing always terminates.
pub fn parse_name(sig: &Signature, s: &str) -> Result<ParsedName, NameError> {
    if s.is_empty() {
        return Err(invalid(s, "empty string"));
    }
    if let Some(rest) = s.strip_prefix(ARG_PREFIX) {
        // Prefix-freeness guarantees no operation name starts with `arg`,
        // so this must be an input name or nothing.
        let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        if digits.is_empty() {
            return Err(invalid(s, "expected digits after `arg`"));
        }
        if digits.starts_with('0') {
            return Err(invalid(s, "argument index has a leading zero"));
        }
        let k: usize = digits
            .parse()
            .map_err(|_| invalid(s, "argument index too large"))?;
        let after = &rest[digits.len()..];
        let owner = after
            .strip_prefix(' ')
            .ok_or_else(|| invalid(s, "expected a space after the argument index"))?;
        match parse_name(sig, owner)? {
            ParsedName::Output { op, .. } => {
                let arity = sig.op(&op).map(|o| o.arity).unwrap_or(0);
                if k > arity {
                    return Err(NameError::ArgOutOfRange {
                        owner: owner.to_string(),
                        k,
                        arity,
                    });
                }
                Ok(ParsedName::Input {
                    k,
                    owner: owner.to_string(),
                })
            }
            ParsedName::Input { .. } => Err(invalid(s, "argument owner must be an output name")),
        }
    } else {
        // At most one operation name can prefix `s` in a prefix-free
        // signature.
        let op = sig
            .operations
            .iter()
            .find(|o| {
                !o.name.is_empty()
                    && s.starts_with(&o.name)
                    && s[o.name.len()..].starts_with(' ')
            })
            .ok_or_else(|| invalid(s, "no operation name prefix"))?;
        let w = &s[op.name.len() + 1..];
        check_suffix(sig, w)?;
        Ok(ParsedName::Output {
            op: op.name.clone(),
            w: w.to_string(),
        })
    }
}

/// Parses a node name and reports its role.
pub fn parse_node_name(sig: &Signature, s: &str) -> Result<NodeName, NameError> {
    let role = match parse_name(sig, s)? {
        ParsedName::Output { .. } => Role::Output,
        ParsedName::Input { .. } => Role::Input,
    };
    Ok(NodeName {
        raw: s.to_string(),
        role,
    })
}

/// Parses an element name `(<column>)#(<row>)`, validating both embedded
/// node names recursively.
pub fn parse_element_name(sig: &Signature, s: &str) -> Result<ElementName, NameError> {
    let bytes = s.as_bytes();
    if bytes.first() != Some(&b'(') {
        return Err(invalid(s, "element name must start with `(`"));
    }
    // Find the `)` matching the opening parenthesis.
    let mut depth = 0usize;
    let mut close = None;
    for (idx, b) in bytes.iter().enumerate() {
        match b {
            b'(' => depth += 1,
            b')' => {
                depth = depth
                    .checked_sub(1)
                    .ok_or_else(|| invalid(s, "unbalanced parentheses"))?;
                if depth == 0 {
                    close = Some(idx);
                    break;
                }
            }
            _ => {}
        }
    }
    let close = close.ok_or_else(|| invalid(s, "unbalanced parentheses"))?;
    let column = &s[1..close];
    let rest = &s[close + 1..];
    if !rest.starts_with("#(") {
        return Err(invalid(s, "expected `#(` between column and row"));
    }
    // The remainder after `#` must be one balanced `(...)` reaching the end.
    let row_region = &rest[1..];
    let row_bytes = row_region.as_bytes();
    let mut depth = 0usize;
    let mut end = None;
    for (idx, b) in row_bytes.iter().enumerate() {
        match b {
            b'(' => depth += 1,
            b')' => {
                depth = depth
                    .checked_sub(1)
                    .ok_or_else(|| invalid(s, "unbalanced parentheses"))?;
                if depth == 0 {
                    end = Some(idx);
                    break;
                }
            }
            _ => {}
        }
    }
    match end {
        Some(idx) if idx == row_region.len() - 1 => {}
        _ => return Err(invalid(s, "row part is not a single balanced group")),
    }
    let row = &row_region[1..row_region.len() - 1];

    match parse_name(sig, column)? {
        ParsedName::Input { .. } => {}
        ParsedName::Output { .. } => {
            return Err(NameError::RoleMismatch {
                name: column.to_string(),
                expected: "input",
            })
        }
    }
    match parse_name(sig, row)? {
        ParsedName::Output { .. } => {}
        ParsedName::Input { .. } => {
            return Err(NameError::RoleMismatch {
                name: row.to_string(),
                expected: "output",
            })
        }
    }
    Ok(ElementName {
        raw: s.to_string(),
        column: column.to_string(),
        row: row.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ca_sig() -> Signature {
        Signature::new(
            vec![
                OperationDef::deterministic("id", 1),
                OperationDef::constant("black", -1.0),
                OperationDef::constant("white", 1.0),
                OperationDef::propagator("prop", 0.995),
            ],
            "id",
        )
    }

    #[test]
    fn ca_signature_is_valid() {
        assert!(ca_sig().validate().ok());
    }

    #[test]
    fn prefix_clash_detected() {
        let sig = Signature::new(
            vec![
                OperationDef::deterministic("id", 1),
                OperationDef::deterministic("plus", 2),
                OperationDef::deterministic("plusone", 1),
            ],
            "id",
        );
        let report = sig.validate();
        assert!(report.violations.contains(&Violation::PrefixClash {
            shorter: "plus".to_string(),
            longer: "plusone".to_string(),
        }));
    }

    #[test]
    fn arg_prefix_and_reserved_characters_rejected() {
        // A name containing a space does not clash with `arg`.
        let sig = Signature::new(
            vec![
                OperationDef::deterministic("id", 1),
                OperationDef::deterministic("ar g", 1),
            ],
            "id",
        );
        assert!(sig.validate().ok());

        let sig = Signature::new(
            vec![
                OperationDef::deterministic("id", 1),
                OperationDef::deterministic("arg2x", 1),
            ],
            "id",
        );
        let report = sig.validate();
        assert!(report.violations.contains(&Violation::PrefixClash {
            shorter: "arg".to_string(),
            longer: "arg2x".to_string(),
        }));

        let sig = Signature::new(
            vec![
                OperationDef::deterministic("id", 1),
                OperationDef::deterministic("f(x)", 1),
            ],
            "id",
        );
        let report = sig.validate();
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::ReservedChar { name } if name == "f(x)")));
    }

    #[test]
    fn duplicate_and_identity_violations() {
        let sig = Signature::new(
            vec![
                OperationDef::deterministic("id", 1),
                OperationDef::deterministic("id", 1),
            ],
            "id",
        );
        assert!(sig
            .validate()
            .violations
            .contains(&Violation::DuplicateName {
                name: "id".to_string()
            }));

        let sig = Signature::new(vec![OperationDef::deterministic("id", 2)], "id");
        assert!(sig
            .validate()
            .violations
            .contains(&Violation::IdentityArity {
                name: "id".to_string(),
                arity: 2
            }));

        let sig = Signature::new(vec![OperationDef::constant("white", 1.0)], "id");
        assert!(sig
            .validate()
            .violations
            .contains(&Violation::MissingIdentity {
                name: "id".to_string()
            }));
    }

    #[test]
    fn propagator_probability_range_checked() {
        let sig = Signature::new(
            vec![
                OperationDef::deterministic("id", 1),
                OperationDef::propagator("prop", 1.5),
            ],
            "id",
        );
        assert!(sig.validate().violations.contains(&Violation::ParamRange {
            op: "prop".to_string(),
            param: "p".to_string(),
            value: 1.5,
        }));
    }

    #[test]
    fn compose_output_and_input_names() {
        let sig = ca_sig();
        assert_eq!(
            output_node_name(&sig, "prop", "cell_3_4").unwrap().raw(),
            "prop cell_3_4"
        );
        assert_eq!(output_node_name(&sig, "white", "u").unwrap().raw(), "white u");
        assert_eq!(
            input_node_name(&sig, "prop c", 1).unwrap().raw(),
            "arg1 prop c"
        );
        assert!(matches!(
            output_node_name(&sig, "nosuch", "w"),
            Err(NameError::UnknownOp(_))
        ));
        assert!(matches!(
            input_node_name(&sig, "white u", 1),
            Err(NameError::ArgOutOfRange { arity: 0, .. })
        ));
    }

    #[test]
    fn controller_style_names_round_trip() {
        let sig = ca_sig();
        let elem = element_name(&sig, "arg1 prop c", "white u").unwrap();
        assert_eq!(elem.raw(), "(arg1 prop c)#(white u)");

        let ctrl = output_node_name(&sig, "id", elem.raw()).unwrap();
        assert_eq!(ctrl.raw(), "id (arg1 prop c)#(white u)");
        let ctrl_in = input_node_name(&sig, ctrl.raw(), 1).unwrap();
        assert_eq!(ctrl_in.raw(), "arg1 id (arg1 prop c)#(white u)");

        // Nesting one level deeper still parses.
        let nested = element_name(&sig, ctrl_in.raw(), "prop c").unwrap();
        assert_eq!(
            nested.raw(),
            "(arg1 id (arg1 prop c)#(white u))#(prop c)"
        );
        let parsed = parse_element_name(&sig, nested.raw()).unwrap();
        assert_eq!(parsed.column(), ctrl_in.raw());
        assert_eq!(parsed.row(), "prop c");
    }

    #[test]
    fn parse_classifies_and_rejects() {
        let sig = ca_sig();
        assert_eq!(
            parse_name(&sig, "arg1 prop c").unwrap(),
            ParsedName::Input {
                k: 1,
                owner: "prop c".to_string()
            }
        );
        match parse_name(&sig, "id (arg1 prop c)#(white u)").unwrap() {
            ParsedName::Output { op, w } => {
                assert_eq!(op, "id");
                assert_eq!(w, "(arg1 prop c)#(white u)");
            }
            other => panic!("unexpected parse: {other:?}"),
        }
        assert!(parse_name(&sig, "blarg1 x").is_err());
        assert!(parse_name(&sig, "arg0 prop c").is_err());
        assert!(parse_name(&sig, "arg01 prop c").is_err());
        assert!(parse_name(&sig, "arg2 prop c").is_err());
        assert!(parse_name(&sig, "id (x)#(y)").is_err());
        assert!(parse_element_name(&sig, "(a)#(b)").is_err());
        assert!(parse_element_name(&sig, "(arg1 prop c)#(white u)#(prop c)").is_err());
    }

    #[test]
    fn fixed_point_closure() {
        // For any output i and input j, `id ` + (j)#(i) is a valid output
        // and `arg1 id ` + (j)#(i) a valid input.
        let sig = ca_sig();
        let outputs = ["prop c", "white u", "id (arg1 prop c)#(white u)"];
        let inputs = ["arg1 prop c", "arg1 id (arg1 prop c)#(white u)"];
        for i in outputs {
            for j in inputs {
                let elem = element_name(&sig, j, i).unwrap();
                let ctrl = format!("id {}", elem.raw());
                assert!(matches!(
                    parse_name(&sig, &ctrl),
                    Ok(ParsedName::Output { .. })
                ));
                let ctrl_in = format!("arg1 {ctrl}");
                assert!(matches!(
                    parse_name(&sig, &ctrl_in),
                    Ok(ParsedName::Input { .. })
                ));
            }
        }
    }

    // Random name generator with nesting depth up to 3, used by the
    // round-trip property below.
    fn arb_suffix() -> impl Strategy<Value = String> {
        "[a-z_0-9 ]{0,8}"
    }

    fn arb_output(depth: u32) -> BoxedStrategy<String> {
        let sig = ca_sig();
        let ops = ["id", "black", "white", "prop"];
        if depth == 0 {
            (0usize..4, arb_suffix())
                .prop_map(move |(i, w)| format!("{} {}", ops[i], w))
                .boxed()
        } else {
            let elem = arb_element(depth - 1);
            prop_oneof![
                (0usize..4, arb_suffix()).prop_map(move |(i, w)| format!("{} {}", ops[i], w)),
                elem.prop_map(move |e| {
                    let _ = &sig;
                    format!("id {e}")
                }),
            ]
            .boxed()
        }
    }

    fn arb_input(depth: u32) -> BoxedStrategy<String> {
        arb_output(depth)
            .prop_filter_map("owner must have arity >= 1", |o| {
                let sig = ca_sig();
                match parse_name(&sig, &o) {
                    Ok(ParsedName::Output { op, .. }) => {
                        let arity = sig.op(&op).unwrap().arity;
                        if arity >= 1 {
                            Some(format!("arg1 {o}"))
                        } else {
                            None
                        }
                    }
                    _ => None,
                }
            })
            .boxed()
    }

    fn arb_element(depth: u32) -> BoxedStrategy<String> {
        (arb_input(depth), arb_output(depth))
            .prop_map(|(j, i)| format!("({j})#({i})"))
            .boxed()
    }

    proptest! {
        #[test]
        fn output_names_round_trip(name in arb_output(3)) {
            let sig = ca_sig();
            match parse_name(&sig, &name).unwrap() {
                ParsedName::Output { op, w } => {
                    let recomposed = output_node_name(&sig, &op, &w).unwrap();
                    prop_assert_eq!(recomposed.raw(), name.as_str());
                }
                other => prop_assert!(false, "expected output, got {:?}", other),
            }
        }

        #[test]
        fn input_names_round_trip(name in arb_input(3)) {
            let sig = ca_sig();
            match parse_name(&sig, &name).unwrap() {
                ParsedName::Input { k, owner } => {
                    let recomposed = input_node_name(&sig, &owner, k).unwrap();
                    prop_assert_eq!(recomposed.raw(), name.as_str());
                }
                other => prop_assert!(false, "expected input, got {:?}", other),
            }
        }

        #[test]
        fn element_names_round_trip(name in arb_element(2)) {
            let sig = ca_sig();
            let parsed = parse_element_name(&sig, &name).unwrap();
            let recomposed = element_name(&sig, parsed.column(), parsed.row()).unwrap();
            prop_assert_eq!(recomposed.raw(), name.as_str());
        }
    }
}

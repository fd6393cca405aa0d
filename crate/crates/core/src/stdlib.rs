//! Built-in template operations and the deterministic per-node randomness
//! contract.
//!
//! A stochastic node's draw at time `t` is a pure function of
//! `(master_seed, node_name, t)`. Activation order and lazy evaluation can
//! therefore never perturb results: a node retroactively evaluated at `t`
//! consumes exactly the draw it would have used in a regular evaluation.

use thiserror::Error;

use crate::signature::{OpKind, OperationDef, Signature};

/// Resolved evaluation rule of an operation instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpRule {
    /// `x -> x`, bit-exact.
    Identity,
    /// Zero-arity operation emitting a fixed value.
    Constant(f64),
    /// Copies the input with probability `p`, emits 0.0 otherwise.
    Propagator(f64),
    /// Binary product.
    Product,
}

impl OpRule {
    pub fn arity(&self) -> usize {
        match self {
            OpRule::Identity | OpRule::Propagator(_) => 1,
            OpRule::Constant(_) => 0,
            OpRule::Product => 2,
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("unknown operation `{0}`")]
    UnknownOp(String),
    #[error("no evaluation rule for operation `{op}` (kind {kind:?}, arity {arity})")]
    NoRule { op: String, kind: OpKind, arity: usize },
    #[error("operation `{op}` expects {expected} arguments, got {got}")]
    ArityMismatch { op: String, expected: usize, got: usize },
}

/// Maps an operation definition to its evaluation rule.
///
/// Constants carry their value in `params["value"]`, the propagator its
/// probability in `params["p"]`. The designated identity is `x -> x`; the
/// only other deterministic builtin is the binary product.
pub fn op_rule(sig: &Signature, op: &OperationDef) -> Result<OpRule, EvalError> {
    match op.kind {
        OpKind::Constant => {
            let value = op.param("value").ok_or_else(|| EvalError::NoRule {
                op: op.name.clone(),
                kind: op.kind,
                arity: op.arity,
            })?;
            Ok(OpRule::Constant(value))
        }
        OpKind::Stochastic => {
            let p = op.param("p").ok_or_else(|| EvalError::NoRule {
                op: op.name.clone(),
                kind: op.kind,
                arity: op.arity,
            })?;
            if op.arity != 1 {
                return Err(EvalError::NoRule {
                    op: op.name.clone(),
                    kind: op.kind,
                    arity: op.arity,
                });
            }
            Ok(OpRule::Propagator(p))
        }
        OpKind::Deterministic => {
            if op.name == sig.identity_name && op.arity == 1 {
                Ok(OpRule::Identity)
            } else if op.arity == 2 {
                Ok(OpRule::Product)
            } else {
                Err(EvalError::NoRule {
                    op: op.name.clone(),
                    kind: op.kind,
                    arity: op.arity,
                })
            }
        }
    }
}

/// Deterministic randomness context for one node at one time step.
#[derive(Clone, Copy, Debug)]
pub struct RngContext {
    pub master_seed: u64,
    /// Hash of the node name; see [`node_salt`].
    pub node_salt: u64,
    pub t: u64,
}

impl RngContext {
    pub fn for_node(master_seed: u64, node_name: &str, t: u64) -> Self {
        RngContext {
            master_seed,
            node_salt: node_salt(node_name),
            t,
        }
    }

    /// The uniform draw in `[0, 1)` for this context.
    pub fn draw(&self) -> f64 {
        draw_from_salt(self.master_seed, self.node_salt, self.t)
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a hash of a node name, computed once per node and reused for every
/// draw.
pub fn node_salt(node_name: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in node_name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    z
}

/// Uniform draw in `[0, 1)` as a pure function of `(seed, salt, t)`.
pub fn draw_from_salt(master_seed: u64, salt: u64, t: u64) -> f64 {
    let k = mix(master_seed ^ salt.wrapping_mul(0xa24baed4963ee407));
    let v = mix(k ^ t.wrapping_mul(0x9e3779b97f4a7c15));
    // 53 high bits, the full mantissa range.
    (v >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[0, 1)` keyed by the node name.
pub fn node_draw(master_seed: u64, node_name: &str, t: u64) -> f64 {
    draw_from_salt(master_seed, node_salt(node_name), t)
}

/// Evaluates a rule on argument values at one time step.
pub fn eval_rule(rule: OpRule, args: &[f64], rng: RngContext) -> f64 {
    match rule {
        OpRule::Identity => args[0],
        OpRule::Constant(c) => c,
        OpRule::Propagator(p) => {
            if rng.draw() < p {
                args[0]
            } else {
                0.0
            }
        }
        OpRule::Product => args[0] * args[1],
    }
}

/// Evaluates one operation of the signature on argument values.
pub fn eval_operation(
    sig: &Signature,
    op_name: &str,
    args: &[f64],
    rng: RngContext,
) -> Result<f64, EvalError> {
    let op = sig
        .op(op_name)
        .ok_or_else(|| EvalError::UnknownOp(op_name.to_string()))?;
    if args.len() != op.arity {
        return Err(EvalError::ArityMismatch {
            op: op_name.to_string(),
            expected: op.arity,
            got: args.len(),
        });
    }
    let rule = op_rule(sig, op)?;
    Ok(eval_rule(rule, args, rng))
}

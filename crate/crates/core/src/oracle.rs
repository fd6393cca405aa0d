//! A dense, brute-force reference model for small programs, used for
//! differential testing of the sparse engine.
//!
//! The model enumerates every node the program could ever activate, keeps
//! full vectors for output and input values, and applies the same two-stage
//! update each tick: all outputs from the previous inputs, then all inputs
//! as full matrix-vector products with the freshly resolved coefficients.
//! No activity tracking, no sparseness. Summation runs in lexicographic row
//! order so deterministic runs agree with the engine bit for bit.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::elements::{ElementSource, Schedule};
use crate::machine::Trajectory;
use crate::program::{Program, ProgramError};
use crate::signature::{parse_name, ParsedName};
use crate::stdlib::{draw_from_salt, node_salt, op_rule, OpRule};

/// The model refuses programs whose node universe exceeds this.
pub const CAPACITY: usize = 200;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("program needs {nodes} nodes, oracle capacity is {CAPACITY}")]
    Capacity { nodes: usize },
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error("trajectories have different shapes: {0}")]
    ShapeMismatch(String),
}

enum DenseSource {
    Constant(f64),
    External(Schedule),
    Node(usize),
}

/// Dense reference model: ordered node lists, per-output rules, and per
/// input-column entry lists.
pub struct DenseModel {
    seed: u64,
    x_names: Vec<String>,
    y_names: Vec<String>,
    rules: Vec<OpRule>,
    salts: Vec<u64>,
    /// Argument input indices per output.
    args: Vec<Vec<usize>>,
    /// Per input: present entries as (output index, source), sorted by
    /// output name.
    columns: Vec<Vec<(usize, DenseSource)>>,
}

impl DenseModel {
    /// Enumerates every operation instance the matrix mentions (rows,
    /// column owners, node sources) with all of their ports.
    pub fn build(program: &Program) -> Result<Self, OracleError> {
        let sig = &program.signature;
        let report = sig.validate();
        if !report.ok() {
            return Err(OracleError::Program(ProgramError::Signature(report)));
        }

        // Collect output instances mentioned anywhere.
        let mut x_set: BTreeMap<String, ()> = BTreeMap::new();
        let mut add_output = |name: &str| {
            x_set.insert(name.to_string(), ());
        };
        for (col, row, source) in program.matrix.iter() {
            add_output(row);
            match parse_name(sig, col).map_err(ProgramError::from)? {
                ParsedName::Input { owner, .. } => add_output(&owner),
                ParsedName::Output { .. } => {
                    return Err(OracleError::Program(ProgramError::Name(
                        crate::signature::NameError::RoleMismatch {
                            name: col.to_string(),
                            expected: "input",
                        },
                    )))
                }
            }
            if let ElementSource::Node(n) = source {
                add_output(n);
            }
        }

        let x_names: Vec<String> = x_set.keys().cloned().collect();
        let x_index: BTreeMap<&str, usize> = x_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();

        // Ports of every instance, sorted for a fixed order.
        let mut y_set: BTreeMap<String, usize> = BTreeMap::new();
        let mut rules = Vec::with_capacity(x_names.len());
        let mut salts = Vec::with_capacity(x_names.len());
        let mut arg_names: Vec<Vec<String>> = Vec::with_capacity(x_names.len());
        for name in &x_names {
            let op_name = match parse_name(sig, name).map_err(ProgramError::from)? {
                ParsedName::Output { op, .. } => op,
                ParsedName::Input { .. } => unreachable!("x_set holds outputs"),
            };
            let op = sig.op(&op_name).expect("parse guarantees the op");
            rules.push(op_rule(sig, op).map_err(ProgramError::from)?);
            salts.push(node_salt(name));
            let ports: Vec<String> = (1..=op.arity).map(|k| format!("arg{k} {name}")).collect();
            for p in &ports {
                y_set.insert(p.clone(), 0);
            }
            arg_names.push(ports);
        }
        let y_names: Vec<String> = y_set.keys().cloned().collect();
        let y_index: BTreeMap<&str, usize> = y_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();

        let nodes = x_names.len() + y_names.len();
        if nodes > CAPACITY {
            return Err(OracleError::Capacity { nodes });
        }

        let args: Vec<Vec<usize>> = arg_names
            .iter()
            .map(|ports| ports.iter().map(|p| y_index[p.as_str()]).collect())
            .collect();

        let mut columns: Vec<Vec<(usize, DenseSource)>> = (0..y_names.len())
            .map(|_| Vec::new())
            .collect();
        for (col, row, source) in program.matrix.iter() {
            let j = y_index[col];
            let i = x_index[row];
            let src = match source {
                ElementSource::Constant(c) => DenseSource::Constant(*c),
                ElementSource::External(s) => DenseSource::External(s.clone()),
                ElementSource::Node(n) => DenseSource::Node(x_index[n.as_str()]),
            };
            columns[j].push((i, src));
        }
        for col in &mut columns {
            col.sort_by(|a, b| x_names[a.0].cmp(&x_names[b.0]));
        }

        Ok(DenseModel {
            seed: program.seed,
            x_names,
            y_names,
            rules,
            salts,
            args,
            columns,
        })
    }

    pub fn node_count(&self) -> usize {
        self.x_names.len() + self.y_names.len()
    }

    /// One tick: `x1 = F(y)` componentwise, then `y1 = L(t+1) x1` with
    /// lexicographic summation.
    pub fn dense_step(&self, x: &[f64], y: &[f64], t: u64) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(x.len(), self.x_names.len(), "x dimension mismatch");
        assert_eq!(y.len(), self.y_names.len(), "y dimension mismatch");
        let t1 = t + 1;
        let x1: Vec<f64> = (0..x.len())
            .map(|i| {
                let args: Vec<f64> = self.args[i].iter().map(|&j| y[j]).collect();
                match self.rules[i] {
                    OpRule::Identity => args[0],
                    OpRule::Constant(c) => c,
                    OpRule::Product => args[0] * args[1],
                    OpRule::Propagator(p) => {
                        if draw_from_salt(self.seed, self.salts[i], t1) < p {
                            args[0]
                        } else {
                            0.0
                        }
                    }
                }
            })
            .collect();
        let y1: Vec<f64> = self
            .columns
            .iter()
            .map(|col| {
                col.iter()
                    .map(|(i, src)| {
                        let a = match src {
                            DenseSource::Constant(c) => *c,
                            DenseSource::External(s) => s.value_at(t1),
                            DenseSource::Node(n) => x1[*n],
                        };
                        a * x1[*i]
                    })
                    .sum()
            })
            .collect();
        (x1, y1)
    }

    /// Runs from the all-zero state, recording watched nodes at every time.
    pub fn run(&self, horizon: u64, watch: &[String]) -> Result<Trajectory, OracleError> {
        let positions: Vec<(bool, usize)> = watch
            .iter()
            .map(|name| {
                if let Some(i) = self.x_names.iter().position(|n| n == name) {
                    Ok((true, i))
                } else if let Some(j) = self.y_names.iter().position(|n| n == name) {
                    Ok((false, j))
                } else {
                    Err(OracleError::ShapeMismatch(format!(
                        "watched node `{name}` is not in the model"
                    )))
                }
            })
            .collect::<Result<_, _>>()?;

        let mut x = vec![0.0; self.x_names.len()];
        let mut y = vec![0.0; self.y_names.len()];
        let mut values = Vec::with_capacity(horizon as usize + 1);
        let record = |x: &[f64], y: &[f64]| -> Vec<f64> {
            positions
                .iter()
                .map(|&(is_x, idx)| if is_x { x[idx] } else { y[idx] })
                .collect()
        };
        values.push(record(&x, &y));
        for t in 0..horizon {
            let (x1, y1) = self.dense_step(&x, &y, t);
            x = x1;
            y = y1;
            values.push(record(&x, &y));
        }
        Ok(Trajectory {
            watch: watch.to_vec(),
            values,
        })
    }
}

/// Comparison of two trajectories over the same watch set and horizon.
#[derive(Clone, Debug)]
pub struct CompareReport {
    pub max_deviation: f64,
    pub per_node: BTreeMap<String, f64>,
    /// First `(t, node, a, b)` where the deviation exceeds the tolerance.
    pub first_divergence: Option<(u64, String, f64, f64)>,
    pub pass: bool,
}

/// Maximum absolute deviation per node; passes iff every deviation is
/// within `tol`.
pub fn compare_trajectories(
    a: &Trajectory,
    b: &Trajectory,
    tol: f64,
) -> Result<CompareReport, OracleError> {
    if a.watch != b.watch {
        return Err(OracleError::ShapeMismatch(
            "watched node sets differ".to_string(),
        ));
    }
    if a.values.len() != b.values.len() {
        return Err(OracleError::ShapeMismatch(format!(
            "horizons differ: {} vs {}",
            a.values.len(),
            b.values.len()
        )));
    }
    let mut per_node: BTreeMap<String, f64> =
        a.watch.iter().map(|w| (w.clone(), 0.0)).collect();
    let mut max_deviation = 0.0f64;
    let mut first_divergence = None;
    for (t, (ra, rb)) in a.values.iter().zip(b.values.iter()).enumerate() {
        for (i, name) in a.watch.iter().enumerate() {
            let d = (ra[i] - rb[i]).abs();
            let slot = per_node.get_mut(name).unwrap();
            if d > *slot {
                *slot = d;
            }
            if d > max_deviation {
                max_deviation = d;
            }
            if d > tol && first_divergence.is_none() {
                first_divergence = Some((t as u64, name.clone(), ra[i], rb[i]));
            }
        }
    }
    let pass = first_divergence.is_none();
    Ok(CompareReport {
        max_deviation,
        per_node,
        first_divergence,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine;
    use crate::program::Policy;
    use crate::signature::{OperationDef, Signature};

    fn sig() -> Signature {
        Signature::new(
            vec![
                OperationDef::deterministic("id", 1),
                OperationDef::constant("one", 1.0),
                OperationDef::constant("neg", -0.4),
                OperationDef::propagator("prop", 0.8),
            ],
            "id",
        )
    }

    #[test]
    fn constants_only_step_emits_the_constant_vector() {
        let mut p = Program::new(sig(), Policy::Free);
        p.matrix
            .insert("arg1 id s", "one u", ElementSource::Constant(0.5));
        p.matrix
            .insert("arg1 id s", "neg v", ElementSource::Constant(1.0));
        let model = DenseModel::build(&p).unwrap();
        let x = vec![0.0; 3];
        let y = vec![0.0; 1];
        let (x1, y1) = model.dense_step(&x, &y, 0);
        // Outputs sorted lexicographically: "id s", "neg v", "one u".
        assert_eq!(x1, vec![0.0, -0.4, 1.0]);
        assert_eq!(y1, vec![1.0 * -0.4 + 0.5 * 1.0]);
    }

    #[test]
    fn identity_wiring_matches_matrix_powers() {
        // Two identities in a cycle with constant weights: the y vector
        // follows repeated application of the 2x2 weight matrix.
        let mut p = Program::new(sig(), Policy::Free);
        p.matrix
            .insert("arg1 id a", "id b", ElementSource::Constant(0.5));
        p.matrix
            .insert("arg1 id a", "one u", ElementSource::Constant(1.0));
        p.matrix
            .insert("arg1 id b", "id a", ElementSource::Constant(0.25));
        let model = DenseModel::build(&p).unwrap();
        let watch = vec!["arg1 id a".to_string(), "arg1 id b".to_string()];
        let traj = model.run(12, &watch).unwrap();

        let mut ya = 0.0f64;
        let mut yb = 0.0f64;
        for t in 0..=12u64 {
            assert_eq!(traj.value_at(t, "arg1 id a").unwrap(), ya, "t={t}");
            assert_eq!(traj.value_at(t, "arg1 id b").unwrap(), yb, "t={t}");
            // x_a(t+1) = ya, x_b(t+1) = yb, then the linear combinations.
            let (xa, xb) = (ya, yb);
            ya = 1.0 + 0.5 * xb;
            yb = 0.25 * xa;
        }
    }

    #[test]
    fn sparse_engine_matches_on_a_small_program() {
        let mut p = Program::new(sig(), Policy::Free);
        p.matrix
            .insert("arg1 id s", "one u", ElementSource::Constant(1.0));
        p.matrix
            .insert("arg1 id s", "id s", ElementSource::Constant(0.5));
        p.matrix
            .insert("arg1 prop c", "id s", ElementSource::Constant(0.9));
        p.matrix
            .insert("arg1 id z", "prop c", ElementSource::Constant(1.0));
        p.seed = 42;
        let watch: Vec<String> = vec![
            "arg1 id s".into(),
            "arg1 prop c".into(),
            "arg1 id z".into(),
            "id s".into(),
            "prop c".into(),
            "one u".into(),
        ];
        let sparse = machine::run(&p, 40, &watch).unwrap();
        let dense = DenseModel::build(&p).unwrap().run(40, &watch).unwrap();
        let report = compare_trajectories(&sparse, &dense, 0.0).unwrap();
        assert!(report.pass, "diverged: {:?}", report.first_divergence);
        assert_eq!(report.max_deviation, 0.0);
    }

    #[test]
    fn perturbed_run_flags_the_first_divergence() {
        let mut p = Program::new(sig(), Policy::Free);
        p.matrix
            .insert("arg1 id s", "one u", ElementSource::Constant(1.0));
        let mut q = p.clone();
        q.matrix
            .insert("arg1 id s", "one u", ElementSource::Constant(1.0 + 1e-6));

        let watch = vec!["arg1 id s".to_string()];
        let a = machine::run(&p, 5, &watch).unwrap();
        let b = machine::run(&q, 5, &watch).unwrap();
        let report = compare_trajectories(&a, &b, 1e-9).unwrap();
        assert!(!report.pass);
        let (t, node, ..) = report.first_divergence.unwrap();
        assert_eq!((t, node.as_str()), (1, "arg1 id s"));

        let identical = compare_trajectories(&a, &a, 0.0).unwrap();
        assert!(identical.pass);
        assert_eq!(identical.max_deviation, 0.0);
    }

    #[test]
    fn capacity_is_enforced() {
        let mut p = Program::new(sig(), Policy::Free);
        for i in 0..120 {
            p.matrix.insert(
                &format!("arg1 id n{i}"),
                "one u",
                ElementSource::Constant(0.1),
            );
        }
        assert!(matches!(
            DenseModel::build(&p),
            Err(OracleError::Capacity { .. })
        ));
    }
}

//! A virtual machine for dataflow programs represented as sparse
//! real-valued matrices over a fixed signature of template operations.
//!
//! Output nodes are computed by template operations from input nodes; input
//! nodes are linear combinations of output nodes with the matrix
//! coefficients as weights. Coefficients may be constants, external
//! schedules, or streams of the program itself, which is what makes the
//! programs higher-order: a program can compute its own wiring while it
//! runs. Only the finitely many nonzero coefficients and the nodes they
//! touch are ever represented or evaluated.

pub mod elements;
pub mod experiments;
pub mod machine;
pub mod oracle;
pub mod program;
pub mod signature;
pub mod stdlib;

pub use elements::{ElementSource, OrderClass, Schedule};
pub use machine::{ExecMode, Machine, MachineState, StepError, Trajectory};
pub use program::{CoefficientMatrix, Policy, Program, ProgramFile, ViolationMode};
pub use signature::{OperationDef, Signature};

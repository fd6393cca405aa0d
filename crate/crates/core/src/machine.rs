//! The step engine: holds the sparse coefficient matrix and stream values,
//! advances time in three phases, and keeps the live dictionaries minimal.
//!
//! Per tick, from time `t` to `t + 1`:
//!
//! 1. every active output node is evaluated on its inputs' values at `t`;
//! 2. every present matrix entry resolves its coefficient for `t + 1`
//!    (constants, schedules, or the freshly computed value of a node);
//! 3. every active input node becomes the linear combination of the new
//!    coefficients and output values, summed in lexicographic row order.
//!
//! An entry whose coefficient becomes nonzero for the first time activates
//! the operations at both of its endpoints between phases 2 and 3; output
//! nodes that missed phase 1 that tick are evaluated retroactively with
//! zero arguments. Nodes named by node sources are active from the start,
//! since their streams are what the coefficients read.
//!
//! All streams start at 0 at `t = 0`. Coefficients are also resolved at
//! `t = 0` so a fresh state serializes completely, but those values drive
//! nothing: the first coefficients phase 3 uses are those of `t = 1`.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::elements::{ElementSource, Schedule};
use crate::program::{Policy, Program, ProgramError, ViolationMode};
use crate::signature::{element_name, parse_name, NameError, ParsedName, Signature};
use crate::stdlib::{draw_from_salt, node_salt, op_rule, OpRule};

/// Column sums may exceed 1 by at most this much under the substochastic
/// policy.
pub const COLUMN_SUM_EPS: f64 = 1e-12;

/// Minimum number of active outputs before `ExecMode::Auto` parallelizes.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 512;

/// How the three phases are executed. Results are bit-identical either way:
/// phase-1 evaluations are independent, and each column in phase 3 sums
/// sequentially in its fixed order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecMode {
    /// Parallel for large active sets, sequential otherwise.
    #[default]
    Auto,
    Sequential,
    /// Always parallel; falls back to sequential without the `parallel`
    /// feature.
    Parallel,
}

type XId = usize;
type YId = usize;
type EntryId = usize;

#[derive(Clone, Debug)]
struct OutputNode {
    name: String,
    rule: OpRule,
    /// Input ports `arg1 ..` through `arg<arity> ..`.
    args: Vec<YId>,
    salt: u64,
}

#[derive(Clone, Debug)]
struct InputNode {
    name: String,
    owner: XId,
}

#[derive(Clone, Debug)]
enum CompiledSource {
    Constant(f64),
    External(Schedule),
    Node(XId),
}

#[derive(Clone, Debug)]
struct EntryDef {
    /// Canonical element name `(<column>)#(<row>)`.
    name: String,
    column: YId,
    row: XId,
    source: CompiledSource,
}

#[derive(Clone, Debug)]
struct ColumnDef {
    y: YId,
    /// Input names aliased to this column, the canonical one included.
    members: Vec<YId>,
    /// Entries sorted lexicographically by row name: the phase-3 summation
    /// order.
    entries: Vec<EntryId>,
}

/// A program compiled to index form: names interned, columns canonicalized,
/// evaluation rules resolved.
#[derive(Clone, Debug)]
pub struct CompiledProgram {
    pub signature: Signature,
    pub policy: Policy,
    pub on_violation: ViolationMode,
    pub seed: u64,
    pub watch: Vec<String>,
    outputs: Vec<OutputNode>,
    inputs: Vec<InputNode>,
    x_by_name: HashMap<String, XId>,
    y_by_name: HashMap<String, YId>,
    /// Input -> the input whose column physically holds the coefficients.
    canon: Vec<YId>,
    entries: Vec<EntryDef>,
    columns: Vec<ColumnDef>,
    /// Column index by input, for inputs whose column has entries.
    column_of: Vec<Option<usize>>,
    element_by_name: HashMap<String, EntryId>,
    /// Outputs named by node sources; active from initialization.
    drivers: Vec<XId>,
}

struct Interner<'p> {
    sig: &'p Signature,
    outputs: Vec<OutputNode>,
    inputs: Vec<InputNode>,
    x_by_name: HashMap<String, XId>,
    y_by_name: HashMap<String, YId>,
}

impl<'p> Interner<'p> {
    fn intern_output(&mut self, name: &str) -> Result<XId, ProgramError> {
        if let Some(&id) = self.x_by_name.get(name) {
            return Ok(id);
        }
        let op_name = match parse_name(self.sig, name)? {
            ParsedName::Output { op, .. } => op,
            ParsedName::Input { .. } => {
                return Err(NameError::RoleMismatch {
                    name: name.to_string(),
                    expected: "output",
                }
                .into())
            }
        };
        let op = self.sig.op(&op_name).expect("parse guarantees the op");
        let rule = op_rule(self.sig, op)?;
        let id = self.outputs.len();
        self.outputs.push(OutputNode {
            name: name.to_string(),
            rule,
            args: Vec::new(),
            salt: node_salt(name),
        });
        self.x_by_name.insert(name.to_string(), id);
        let mut args = Vec::with_capacity(op.arity);
        for k in 1..=op.arity {
            let port = format!("arg{k} {name}");
            args.push(self.intern_input_port(&port, id));
        }
        self.outputs[id].args = args;
        Ok(id)
    }

    fn intern_input_port(&mut self, name: &str, owner: XId) -> YId {
        if let Some(&id) = self.y_by_name.get(name) {
            return id;
        }
        let id = self.inputs.len();
        self.inputs.push(InputNode {
            name: name.to_string(),
            owner,
        });
        self.y_by_name.insert(name.to_string(), id);
        id
    }

    fn intern_input(&mut self, name: &str) -> Result<YId, ProgramError> {
        if let Some(&id) = self.y_by_name.get(name) {
            return Ok(id);
        }
        match parse_name(self.sig, name)? {
            ParsedName::Input { owner, .. } => {
                // Interning the owner creates all of its ports, this one
                // included.
                self.intern_output(&owner)?;
                Ok(self.y_by_name[name])
            }
            ParsedName::Output { .. } => Err(NameError::RoleMismatch {
                name: name.to_string(),
                expected: "input",
            }
            .into()),
        }
    }
}

impl CompiledProgram {
    pub fn compile(program: &Program) -> Result<Self, ProgramError> {
        let report = program.signature.validate();
        if !report.ok() {
            return Err(ProgramError::Signature(report));
        }

        let mut interner = Interner {
            sig: &program.signature,
            outputs: Vec::new(),
            inputs: Vec::new(),
            x_by_name: HashMap::new(),
            y_by_name: HashMap::new(),
        };

        // Intern everything the matrix mentions.
        for (col, row, source) in program.matrix.iter() {
            interner.intern_input(col)?;
            interner.intern_output(row)?;
            match source {
                ElementSource::External(schedule) => {
                    schedule.validate().map_err(|e| ProgramError::BadSchedule {
                        column: col.to_string(),
                        row: row.to_string(),
                        reason: e.to_string(),
                    })?;
                }
                ElementSource::Node(n) => {
                    interner.intern_output(n)?;
                }
                ElementSource::Constant(_) => {}
            }
        }

        // Shared input groups: members must have pairwise equal column
        // contents; the lexicographically first member holds the physical
        // column.
        let mut canon_name: HashMap<String, String> = HashMap::new();
        for group in &program.shared_input_groups {
            let mut sorted = group.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() < 2 {
                continue;
            }
            let canonical = &sorted[0];
            let reference = program.matrix.column(canonical);
            for member in &sorted {
                interner.intern_input(member)?;
                if canon_name.contains_key(member) {
                    return Err(ProgramError::SharedGroup {
                        name: member.clone(),
                        reason: "appears in more than one group".to_string(),
                    });
                }
                if program.matrix.column(member) != reference {
                    return Err(ProgramError::SharedGroup {
                        name: member.clone(),
                        reason: format!("column contents differ from `{canonical}`"),
                    });
                }
                canon_name.insert(member.clone(), canonical.clone());
            }
        }

        for name in &program.watch {
            parse_name(&program.signature, name).map_err(|e| ProgramError::BadWatch {
                name: name.clone(),
                reason: e.to_string(),
            })?;
        }

        let mut canon: Vec<YId> = (0..interner.inputs.len()).collect();
        for (member, canonical) in &canon_name {
            let m = interner.y_by_name[member];
            let c = interner.y_by_name[canonical];
            canon[m] = c;
        }

        // Entries come from canonical columns only; alias members share
        // them.
        let mut entries: Vec<EntryDef> = Vec::new();
        let mut element_by_name: HashMap<String, EntryId> = HashMap::new();
        let mut drivers: Vec<XId> = Vec::new();
        let mut entries_per_column: HashMap<YId, Vec<EntryId>> = HashMap::new();
        for (col, row, source) in program.matrix.iter() {
            if canon_name.get(col).map(|c| c != col).unwrap_or(false) {
                continue; // non-canonical member of a shared group
            }
            let col_id = interner.y_by_name[col];
            let row_id = interner.x_by_name[row];
            let compiled = match source {
                ElementSource::Constant(c) => CompiledSource::Constant(*c),
                ElementSource::External(s) => CompiledSource::External(s.clone()),
                ElementSource::Node(n) => {
                    let x = interner.x_by_name[n.as_str()];
                    drivers.push(x);
                    CompiledSource::Node(x)
                }
            };
            let name = element_name(&program.signature, col, row)?;
            let id = entries.len();
            entries.push(EntryDef {
                name: name.raw().to_string(),
                column: col_id,
                row: row_id,
                source: compiled,
            });
            element_by_name.insert(name.raw().to_string(), id);
            entries_per_column.entry(col_id).or_default().push(id);
        }
        drivers.sort_unstable();
        drivers.dedup();

        let mut members_of: HashMap<YId, Vec<YId>> = HashMap::new();
        for (m, &c) in canon.iter().enumerate() {
            members_of.entry(c).or_default().push(m);
        }

        let mut columns: Vec<ColumnDef> = Vec::new();
        let mut column_of: Vec<Option<usize>> = vec![None; interner.inputs.len()];
        let mut canonical_ids: Vec<YId> = entries_per_column.keys().copied().collect();
        canonical_ids.sort_unstable();
        for y in canonical_ids {
            let mut ids = entries_per_column.remove(&y).unwrap();
            ids.sort_by(|&a, &b| {
                let ra = &interner.outputs[entries[a].row].name;
                let rb = &interner.outputs[entries[b].row].name;
                ra.cmp(rb)
            });
            let col_idx = columns.len();
            let members = members_of.get(&y).cloned().unwrap_or_else(|| vec![y]);
            for &m in &members {
                column_of[m] = Some(col_idx);
            }
            columns.push(ColumnDef {
                y,
                members,
                entries: ids,
            });
        }

        Ok(CompiledProgram {
            signature: program.signature.clone(),
            policy: program.policy,
            on_violation: program.on_violation,
            seed: program.seed,
            watch: program.watch.clone(),
            outputs: interner.outputs,
            inputs: interner.inputs,
            x_by_name: interner.x_by_name,
            y_by_name: interner.y_by_name,
            canon,
            entries,
            columns,
            column_of,
            element_by_name,
            drivers,
        })
    }

    pub fn output_count(&self) -> usize {
        self.outputs.len()
    }

    pub fn input_count(&self) -> usize {
        self.inputs.len()
    }

    pub fn element_count(&self) -> usize {
        self.entries.len()
    }

    /// Index of an output node in the hook value slice, if the program
    /// mentions it.
    pub fn output_id(&self, name: &str) -> Option<usize> {
        self.x_by_name.get(name).copied()
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.iter().map(|o| o.name.as_str())
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().map(|i| i.name.as_str())
    }

    fn entry_by_element(&self, element: &str) -> Option<EntryId> {
        if let Some(&id) = self.element_by_name.get(element) {
            return Some(id);
        }
        // Resolve a shared-group member spelling to the canonical column.
        let parsed = crate::signature::parse_element_name(&self.signature, element).ok()?;
        let col = *self.y_by_name.get(parsed.column())?;
        let canon_name = &self.inputs[self.canon[col]].name;
        let name = format!("({})#({})", canon_name, parsed.row());
        self.element_by_name.get(&name).copied()
    }
}

/// The complete value state of a machine at one time step. A state is a
/// value: cloning it and stepping the clone never disturbs the original.
#[derive(Clone, Debug, PartialEq)]
pub struct MachineState {
    pub t: u64,
    pub master_seed: u64,
    x: Vec<f64>,
    /// Canonical slots hold column values; alias members read through.
    y: Vec<f64>,
    /// Resolved coefficient of each entry, effective at `t`.
    resolved: Vec<f64>,
    active_x: Vec<bool>,
    active_y: Vec<bool>,
    /// Entries whose coefficient has ever been nonzero at some `t >= 1`.
    activated: Vec<bool>,
    eval_counts: Vec<u64>,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum StepError {
    #[error("policy violation at t={t}, column `{column}`: {detail}")]
    Constraint { t: u64, column: String, detail: String },
}

/// Hook invoked between phases 1 and 2 with the freshly computed output
/// values, indexed like the compiled program's outputs.
pub type AdjustFn<'a> = &'a mut dyn FnMut(u64, &mut [f64]);

/// A compiled program plus its evolving state.
#[derive(Clone, Debug)]
pub struct Machine {
    prog: Arc<CompiledProgram>,
    state: MachineState,
    exec: ExecMode,
}

impl Machine {
    pub fn new(program: &Program) -> Result<Self, ProgramError> {
        let prog = Arc::new(CompiledProgram::compile(program)?);
        Ok(Self::from_compiled(prog, None))
    }

    /// Reuses a compiled program, optionally with a different seed; the
    /// state is freshly initialized.
    pub fn from_compiled(prog: Arc<CompiledProgram>, seed: Option<u64>) -> Self {
        let seed = seed.unwrap_or(prog.seed);
        let mut state = MachineState {
            t: 0,
            master_seed: seed,
            x: vec![0.0; prog.outputs.len()],
            y: vec![0.0; prog.inputs.len()],
            resolved: vec![0.0; prog.entries.len()],
            active_x: vec![false; prog.outputs.len()],
            active_y: vec![false; prog.inputs.len()],
            activated: vec![false; prog.entries.len()],
            eval_counts: vec![0; prog.outputs.len()],
        };
        // Nodes that feed coefficients are live from the start: the matrix
        // reads their streams every step.
        for &x in &prog.drivers {
            activate_op(&prog, &mut state.active_x, &mut state.active_y, x);
        }
        // Record the t = 0 resolution. All streams are zero, so node-driven
        // coefficients start at zero; these values drive nothing.
        for (i, entry) in prog.entries.iter().enumerate() {
            state.resolved[i] = match &entry.source {
                CompiledSource::Constant(c) => *c,
                CompiledSource::External(s) => s.value_at(0),
                CompiledSource::Node(_) => 0.0,
            };
        }
        Machine {
            prog,
            state,
            exec: ExecMode::default(),
        }
    }

    pub fn compiled(&self) -> &Arc<CompiledProgram> {
        &self.prog
    }

    pub fn state(&self) -> &MachineState {
        &self.state
    }

    pub fn t(&self) -> u64 {
        self.state.t
    }

    pub fn set_exec_mode(&mut self, mode: ExecMode) {
        self.exec = mode;
    }

    /// Index of an output node in the value slice passed to adjustment
    /// hooks.
    pub fn output_id(&self, name: &str) -> Option<usize> {
        self.prog.output_id(name)
    }

    /// Value of the output node with hook index `id`.
    pub fn x_value(&self, id: usize) -> f64 {
        self.state.x[id]
    }

    /// Current value of a named stream; 0.0 for any inactive or absent
    /// node.
    pub fn read_stream(&self, name: &str) -> Result<f64, NameError> {
        match parse_name(&self.prog.signature, name)? {
            ParsedName::Output { .. } => Ok(self
                .prog
                .x_by_name
                .get(name)
                .map(|&i| self.state.x[i])
                .unwrap_or(0.0)),
            ParsedName::Input { .. } => Ok(self
                .prog
                .y_by_name
                .get(name)
                .map(|&i| self.state.y[self.prog.canon[i]])
                .unwrap_or(0.0)),
        }
    }

    /// Resolved coefficient of an element at the current time; 0.0 for
    /// absent elements.
    pub fn coefficient(&self, element: &str) -> Result<f64, NameError> {
        crate::signature::parse_element_name(&self.prog.signature, element)?;
        Ok(self
            .prog
            .entry_by_element(element)
            .map(|id| self.state.resolved[id])
            .unwrap_or(0.0))
    }

    /// Number of evaluations of the operation computing `name` so far.
    pub fn eval_count(&self, name: &str) -> u64 {
        self.prog
            .x_by_name
            .get(name)
            .map(|&i| self.state.eval_counts[i])
            .unwrap_or(0)
    }

    /// Names currently present in the live dictionaries.
    pub fn active_nodes(&self) -> BTreeSet<String> {
        let mut set = BTreeSet::new();
        for (i, on) in self.state.active_x.iter().enumerate() {
            if *on {
                set.insert(self.prog.outputs[i].name.clone());
            }
        }
        for (i, on) in self.state.active_y.iter().enumerate() {
            if *on {
                set.insert(self.prog.inputs[i].name.clone());
            }
        }
        set
    }

    pub fn active_node_count(&self) -> usize {
        self.state.active_x.iter().filter(|b| **b).count()
            + self.state.active_y.iter().filter(|b| **b).count()
    }

    /// Number of entries whose coefficient has ever been nonzero.
    pub fn activated_element_count(&self) -> usize {
        self.state.activated.iter().filter(|b| **b).count()
    }

    pub fn step(&mut self) -> Result<(), StepError> {
        self.step_with(None)
    }

    /// Advances one tick, optionally adjusting the freshly computed output
    /// values before coefficients resolve. On error the state is unchanged.
    pub fn step_with(&mut self, adjust: Option<AdjustFn<'_>>) -> Result<(), StepError> {
        let prog = self.prog.clone();
        let t1 = self.state.t + 1;
        let parallel = self.use_parallel();

        // Phase 1: outputs at t+1 from inputs at t.
        let mut x_new = compute_outputs(&prog, &self.state, t1, parallel);

        if let Some(adjust) = adjust {
            adjust(t1, &mut x_new);
        }

        // Phase 2: resolve every present coefficient for t+1.
        let mut resolved_new = resolve_entries(&prog, &x_new, t1, parallel);
        enforce_policy(&prog, t1, &mut resolved_new)?;

        // Past this point the step always commits.
        let state = &mut self.state;
        for i in 0..prog.outputs.len() {
            if state.active_x[i] {
                state.eval_counts[i] += 1;
            }
        }

        // Activation: entries nonzero for the first time wake the
        // operations at both endpoints before phase 3 reads them.
        for e in 0..prog.entries.len() {
            if resolved_new[e] == 0.0 || state.activated[e] {
                continue;
            }
            state.activated[e] = true;
            let entry = &prog.entries[e];
            retro_activate(
                &prog,
                entry.row,
                t1,
                state.master_seed,
                &mut x_new,
                &mut state.active_x,
                &mut state.active_y,
                &mut state.eval_counts,
            );
            let col_idx = prog.column_of[entry.column].expect("entry column exists");
            for &member in &prog.columns[col_idx].members {
                let owner = prog.inputs[member].owner;
                retro_activate(
                    &prog,
                    owner,
                    t1,
                    state.master_seed,
                    &mut x_new,
                    &mut state.active_x,
                    &mut state.active_y,
                    &mut state.eval_counts,
                );
            }
        }

        // Phase 3: linear combinations in lexicographic row order.
        let y_new = compute_inputs(&prog, &state.active_y, &x_new, &resolved_new, parallel);

        state.x = x_new;
        state.y = y_new;
        state.resolved = resolved_new;
        state.t = t1;
        Ok(())
    }

    fn use_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        {
            match self.exec {
                ExecMode::Sequential => false,
                ExecMode::Parallel => true,
                ExecMode::Auto => {
                    self.state.active_x.iter().filter(|b| **b).count() >= PAR_THRESHOLD
                }
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = self.exec;
            false
        }
    }

    /// Marks an element as live, waking the operations at its endpoints and
    /// retroactively evaluating any output that has no value yet for the
    /// current time. Idempotent. This is the bookkeeping `step` applies
    /// automatically when a coefficient first becomes nonzero.
    pub fn activate_element(&mut self, element: &str) -> Result<bool, NameError> {
        crate::signature::parse_element_name(&self.prog.signature, element)?;
        let Some(id) = self.prog.entry_by_element(element) else {
            return Err(NameError::Invalid {
                name: element.to_string(),
                reason: "element is not present in the matrix".to_string(),
            });
        };
        if self.state.activated[id] {
            return Ok(false);
        }
        let prog = self.prog.clone();
        let state = &mut self.state;
        state.activated[id] = true;
        let t = state.t;
        let entry = &prog.entries[id];
        retro_activate(
            &prog,
            entry.row,
            t,
            state.master_seed,
            &mut state.x,
            &mut state.active_x,
            &mut state.active_y,
            &mut state.eval_counts,
        );
        let col_idx = prog.column_of[entry.column].expect("entry column exists");
        for &member in &prog.columns[col_idx].members {
            let owner = prog.inputs[member].owner;
            retro_activate(
                &prog,
                owner,
                t,
                state.master_seed,
                &mut state.x,
                &mut state.active_x,
                &mut state.active_y,
                &mut state.eval_counts,
            );
        }
        Ok(true)
    }
}

fn activate_op(prog: &CompiledProgram, active_x: &mut [bool], active_y: &mut [bool], x: XId) {
    if active_x[x] {
        return;
    }
    active_x[x] = true;
    for &port in &prog.outputs[x].args {
        active_y[port] = true;
        active_y[prog.canon[port]] = true;
    }
}

/// Wakes the operation computing `x` and, if it was not evaluated this
/// tick, evaluates it with all-zero arguments using the draw for `t_eval`.
#[allow(clippy::too_many_arguments)]
fn retro_activate(
    prog: &CompiledProgram,
    x: XId,
    t_eval: u64,
    seed: u64,
    x_values: &mut [f64],
    active_x: &mut [bool],
    active_y: &mut [bool],
    eval_counts: &mut [u64],
) {
    if active_x[x] {
        return;
    }
    activate_op(prog, active_x, active_y, x);
    let out = &prog.outputs[x];
    let zeros = [0.0f64; 2];
    let rng = crate::stdlib::RngContext {
        master_seed: seed,
        node_salt: out.salt,
        t: t_eval,
    };
    x_values[x] = crate::stdlib::eval_rule(out.rule, &zeros[..out.rule.arity()], rng);
    eval_counts[x] += 1;
}

fn eval_output(prog: &CompiledProgram, y: &[f64], seed: u64, i: XId, t1: u64) -> f64 {
    let out = &prog.outputs[i];
    match out.rule {
        OpRule::Identity => y[prog.canon[out.args[0]]],
        OpRule::Constant(c) => c,
        OpRule::Product => y[prog.canon[out.args[0]]] * y[prog.canon[out.args[1]]],
        OpRule::Propagator(p) => {
            let u = draw_from_salt(seed, out.salt, t1);
            if u < p {
                y[prog.canon[out.args[0]]]
            } else {
                0.0
            }
        }
    }
}

fn compute_outputs(
    prog: &CompiledProgram,
    state: &MachineState,
    t1: u64,
    parallel: bool,
) -> Vec<f64> {
    let seed = state.master_seed;
    #[cfg(feature = "parallel")]
    if parallel {
        return (0..prog.outputs.len())
            .into_par_iter()
            .map(|i| {
                if state.active_x[i] {
                    eval_output(prog, &state.y, seed, i, t1)
                } else {
                    0.0
                }
            })
            .collect();
    }
    let _ = parallel;
    (0..prog.outputs.len())
        .map(|i| {
            if state.active_x[i] {
                eval_output(prog, &state.y, seed, i, t1)
            } else {
                0.0
            }
        })
        .collect()
}

fn resolve_entries(prog: &CompiledProgram, x_new: &[f64], t1: u64, parallel: bool) -> Vec<f64> {
    let resolve = |entry: &EntryDef| match &entry.source {
        CompiledSource::Constant(c) => *c,
        CompiledSource::External(s) => s.value_at(t1),
        // Node sources are active from initialization, so the value was
        // computed this tick.
        CompiledSource::Node(x) => x_new[*x],
    };
    #[cfg(feature = "parallel")]
    if parallel {
        return prog.entries.par_iter().map(resolve).collect();
    }
    let _ = parallel;
    prog.entries.iter().map(resolve).collect()
}

fn enforce_policy(prog: &CompiledProgram, t1: u64, resolved: &mut [f64]) -> Result<(), StepError> {
    match prog.policy {
        Policy::Free => Ok(()),
        Policy::Nonneg => check_nonneg(prog, t1, resolved),
        Policy::Substochastic => {
            check_nonneg(prog, t1, resolved)?;
            for col in &prog.columns {
                let sum: f64 = col.entries.iter().map(|&e| resolved[e]).sum();
                match prog.on_violation {
                    ViolationMode::Reject => {
                        if sum > 1.0 + COLUMN_SUM_EPS {
                            return Err(StepError::Constraint {
                                t: t1,
                                column: prog.inputs[col.y].name.clone(),
                                detail: format!("column sum {sum} exceeds 1"),
                            });
                        }
                    }
                    ViolationMode::Clamp => {
                        if sum > 1.0 {
                            let scale = 1.0 / sum;
                            for &e in &col.entries {
                                resolved[e] *= scale;
                            }
                        }
                    }
                }
            }
            Ok(())
        }
    }
}

fn check_nonneg(prog: &CompiledProgram, t1: u64, resolved: &mut [f64]) -> Result<(), StepError> {
    for (e, value) in resolved.iter_mut().enumerate() {
        if *value < 0.0 {
            match prog.on_violation {
                ViolationMode::Reject => {
                    let entry = &prog.entries[e];
                    return Err(StepError::Constraint {
                        t: t1,
                        column: prog.inputs[entry.column].name.clone(),
                        detail: format!("coefficient {} of `{}` is negative", value, entry.name),
                    });
                }
                ViolationMode::Clamp => *value = 0.0,
            }
        }
    }
    Ok(())
}

fn compute_inputs(
    prog: &CompiledProgram,
    active_y: &[bool],
    x_new: &[f64],
    resolved_new: &[f64],
    parallel: bool,
) -> Vec<f64> {
    let mut y_new = vec![0.0; prog.inputs.len()];
    // Sequential within a column: the summation order is part of the
    // determinism contract.
    let column_sum = |col: &ColumnDef| -> f64 {
        col.entries
            .iter()
            .map(|&e| resolved_new[e] * x_new[prog.entries[e].row])
            .sum()
    };
    #[cfg(feature = "parallel")]
    if parallel {
        let sums: Vec<(YId, f64)> = prog
            .columns
            .par_iter()
            .filter(|col| active_y[col.y])
            .map(|col| (col.y, column_sum(col)))
            .collect();
        for (y, v) in sums {
            y_new[y] = v;
        }
        return y_new;
    }
    let _ = parallel;
    for col in &prog.columns {
        if active_y[col.y] {
            y_new[col.y] = column_sum(col);
        }
    }
    y_new
}

/// A recorded run: one value per watched node per time step.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub watch: Vec<String>,
    /// `values[t][i]` is the value of `watch[i]` at time `t`.
    pub values: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> u64 {
        self.values.len() as u64 - 1
    }

    /// Iterates `(t, node, value)` in time-major order.
    pub fn iter_rows(&self) -> impl Iterator<Item = (u64, &str, f64)> {
        self.values.iter().enumerate().flat_map(move |(t, row)| {
            self.watch
                .iter()
                .zip(row.iter())
                .map(move |(name, &v)| (t as u64, name.as_str(), v))
        })
    }

    pub fn value_at(&self, t: u64, node: &str) -> Option<f64> {
        let i = self.watch.iter().position(|w| w == node)?;
        self.values.get(t as usize).map(|row| row[i])
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Name(#[from] NameError),
}

/// Runs a program for `horizon` steps, recording the watched nodes at every
/// time from 0 to `horizon`. Deterministic given the program seed.
pub fn run(program: &Program, horizon: u64, watch: &[String]) -> Result<Trajectory, RunError> {
    let mut machine = Machine::new(program)?;
    run_machine(&mut machine, horizon, watch)
}

/// As [`run`] on an existing machine, recording from its current time.
pub fn run_machine(
    machine: &mut Machine,
    horizon: u64,
    watch: &[String],
) -> Result<Trajectory, RunError> {
    let record = |m: &Machine| -> Result<Vec<f64>, NameError> {
        watch.iter().map(|name| m.read_stream(name)).collect()
    };
    let mut values = Vec::with_capacity(horizon as usize + 1);
    values.push(record(machine)?);
    for _ in 0..horizon {
        machine.step()?;
        values.push(record(machine)?);
    }
    Ok(Trajectory {
        watch: watch.to_vec(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elements::{ElementSource, Schedule};
    use crate::program::{Policy, Program};
    use crate::signature::OperationDef;

    fn base_sig() -> Signature {
        Signature::new(
            vec![
                OperationDef::deterministic("id", 1),
                OperationDef::constant("one", 1.0),
                OperationDef::constant("white", 1.0),
                OperationDef::constant("black", -1.0),
                OperationDef::propagator("prop", 0.995),
                OperationDef::deterministic("mul", 2),
            ],
            "id",
        )
    }

    fn geometric_program() -> Program {
        // y(t+1) = 1 + 0.5 y(t), converging to 2.
        let mut p = Program::new(base_sig(), Policy::Free);
        p.matrix
            .insert("arg1 id s", "one u", ElementSource::Constant(1.0));
        p.matrix
            .insert("arg1 id s", "id s", ElementSource::Constant(0.5));
        p
    }

    #[test]
    fn empty_program_stays_silent() {
        let p = Program::new(base_sig(), Policy::Free);
        let mut m = Machine::new(&p).unwrap();
        for _ in 0..10 {
            m.step().unwrap();
        }
        assert_eq!(m.active_node_count(), 0);
        assert_eq!(m.read_stream("id s").unwrap(), 0.0);
        assert!(m.read_stream("no such name").is_err());
    }

    #[test]
    fn unknown_operation_rejected() {
        let mut p = Program::new(base_sig(), Policy::Free);
        p.matrix
            .insert("arg1 id s", "nosuch u", ElementSource::Constant(1.0));
        assert!(Machine::new(&p).is_err());
    }

    #[test]
    fn geometric_series_converges() {
        let p = geometric_program();
        let watch = vec!["arg1 id s".to_string()];
        let traj = run(&p, 60, &watch).unwrap();
        // Closed form: y(t) = 2 (1 - 0.5^t).
        for t in 0..=60u64 {
            let expected = 2.0 * (1.0 - 0.5f64.powi(t as i32));
            let got = traj.value_at(t, "arg1 id s").unwrap();
            assert!(
                (got - expected).abs() <= 1e-12,
                "t={t}: {got} vs {expected}"
            );
        }
        let last = traj.value_at(60, "arg1 id s").unwrap();
        assert!((last - 2.0).abs() < 1e-9);
    }

    #[test]
    fn unit_probability_propagator_is_a_delay_line() {
        // prop(p=1) output at t+1 equals its input at t exactly.
        let mut p = Program::new(
            Signature::new(
                vec![
                    OperationDef::deterministic("id", 1),
                    OperationDef::constant("one", 1.0),
                    OperationDef::propagator("prop", 1.0),
                ],
                "id",
            ),
            Policy::Free,
        );
        p.matrix.insert(
            "arg1 prop c",
            "one u",
            ElementSource::External(Schedule::step(vec![(0, 1.0), (4, 0.0)])),
        );
        let mut m = Machine::new(&p).unwrap();
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for _ in 0..8 {
            inputs.push(m.read_stream("arg1 prop c").unwrap());
            m.step().unwrap();
            outputs.push(m.read_stream("prop c").unwrap());
        }
        assert_eq!(inputs, outputs);
    }

    #[test]
    fn activation_wakes_both_endpoints_and_retro_evaluates() {
        let mut p = Program::new(base_sig(), Policy::Free);
        p.matrix
            .insert("arg1 prop c", "white u", ElementSource::Constant(1.0));
        let mut m = Machine::new(&p).unwrap();
        assert_eq!(m.active_node_count(), 0);
        m.step().unwrap();
        let active = m.active_nodes();
        let expected: BTreeSet<String> = ["white u", "prop c", "arg1 prop c"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(active, expected);
        assert_eq!(m.read_stream("white u").unwrap(), 1.0);
        assert_eq!(m.read_stream("arg1 prop c").unwrap(), 1.0);
        assert_eq!(m.activated_element_count(), 1);
    }

    #[test]
    fn manual_activation_is_idempotent() {
        let mut p = Program::new(base_sig(), Policy::Free);
        p.matrix
            .insert("arg1 prop c", "white u", ElementSource::Constant(1.0));
        let mut m = Machine::new(&p).unwrap();
        assert!(m.activate_element("(arg1 prop c)#(white u)").unwrap());
        assert!(!m.activate_element("(arg1 prop c)#(white u)").unwrap());
        assert_eq!(m.read_stream("white u").unwrap(), 1.0);
        assert!(m.activate_element("(arg1 prop c)#(prop c)").is_err());
    }

    #[test]
    fn dormant_subgraph_is_never_evaluated() {
        let mut p = Program::new(base_sig(), Policy::Free);
        // Live loop.
        p.matrix
            .insert("arg1 id s", "one u", ElementSource::Constant(1.0));
        // Dormant: coefficients present but forever zero.
        p.matrix.insert(
            "arg1 prop d1",
            "prop d2",
            ElementSource::External(Schedule::step(vec![(0, 0.0)])),
        );
        p.matrix
            .insert("arg1 prop d2", "prop d1", ElementSource::Constant(0.0));
        let mut m = Machine::new(&p).unwrap();
        for _ in 0..200 {
            m.step().unwrap();
        }
        assert_eq!(m.eval_count("prop d1"), 0);
        assert_eq!(m.eval_count("prop d2"), 0);
        assert!(!m.active_nodes().contains("prop d1"));
        assert!(m.eval_count("one u") > 0);
    }

    #[test]
    fn late_activation_uses_the_draw_for_that_tick() {
        // The propagator becomes live at t = 5; its retroactive draw
        // equals the draw an always-active copy would have used.
        let sched = ElementSource::External(Schedule::step(vec![(0, 0.0), (5, 1.0)]));
        let mut late = Program::new(base_sig(), Policy::Free);
        late.matrix.insert("arg1 id z", "prop c", sched);
        late.seed = 1234;

        let mut early = Program::new(base_sig(), Policy::Free);
        early
            .matrix
            .insert("arg1 id z", "prop c", ElementSource::Constant(1.0));
        early.seed = 1234;

        let watch = vec!["prop c".to_string()];
        let late_traj = run(&late, 10, &watch).unwrap();
        let early_traj = run(&early, 10, &watch).unwrap();
        for t in 5..=10 {
            assert_eq!(
                late_traj.value_at(t, "prop c").unwrap(),
                early_traj.value_at(t, "prop c").unwrap()
            );
        }

        // And the whole run replays bit-identically.
        let again = run(&late, 10, &watch).unwrap();
        assert_eq!(late_traj, again);
    }

    #[test]
    fn step3_is_linear_in_each_coefficient() {
        let mut p1 = Program::new(base_sig(), Policy::Free);
        p1.matrix
            .insert("arg1 id s", "white u", ElementSource::Constant(0.3));
        p1.matrix
            .insert("arg1 id s", "one u", ElementSource::Constant(0.2));
        let mut p2 = p1.clone();
        p2.matrix
            .insert("arg1 id s", "white u", ElementSource::Constant(0.6));

        let watch = vec!["arg1 id s".to_string()];
        let t1 = run(&p1, 3, &watch).unwrap();
        let t2 = run(&p2, 3, &watch).unwrap();
        // The doubled entry's contribution doubles: y2 - y1 = 0.3 * x with
        // x = 1 (the white constant).
        for t in 1..=3u64 {
            let d = t2.value_at(t, "arg1 id s").unwrap() - t1.value_at(t, "arg1 id s").unwrap();
            assert!((d - 0.3).abs() <= 1e-12);
        }
    }

    #[test]
    fn substochastic_policy_rejects_and_clamps() {
        let mut p = Program::new(base_sig(), Policy::Substochastic);
        p.matrix
            .insert("arg1 id s", "white u", ElementSource::Constant(0.7));
        p.matrix
            .insert("arg1 id s", "one u", ElementSource::Constant(0.7));
        let mut m = Machine::new(&p).unwrap();
        let before = m.state().clone();
        let err = m.step().unwrap_err();
        match err {
            StepError::Constraint { t, column, .. } => {
                assert_eq!(t, 1);
                assert_eq!(column, "arg1 id s");
            }
        }
        assert_eq!(m.state(), &before, "failed step must not mutate state");

        p.on_violation = ViolationMode::Clamp;
        let mut m = Machine::new(&p).unwrap();
        m.step().unwrap();
        // Column rescaled to sum exactly 1: y = 0.5 + 0.5.
        assert!((m.read_stream("arg1 id s").unwrap() - 1.0).abs() <= 1e-12);

        let mut neg = Program::new(base_sig(), Policy::Nonneg);
        neg.matrix
            .insert("arg1 id s", "white u", ElementSource::Constant(-0.1));
        let mut m = Machine::new(&neg).unwrap();
        assert!(m.step().is_err());
        neg.on_violation = ViolationMode::Clamp;
        let mut m = Machine::new(&neg).unwrap();
        m.step().unwrap();
        assert_eq!(m.read_stream("arg1 id s").unwrap(), 0.0);
    }

    #[test]
    fn shared_input_groups_alias_one_column() {
        let mut p = Program::new(base_sig(), Policy::Free);
        p.matrix
            .insert("arg1 prop a", "white u", ElementSource::Constant(0.5));
        p.matrix
            .insert("arg1 prop b", "white u", ElementSource::Constant(0.5));
        p.shared_input_groups = vec![vec![
            "arg1 prop a".to_string(),
            "arg1 prop b".to_string(),
        ]];
        let m = Machine::new(&p).unwrap();
        assert_eq!(m.compiled().element_count(), 1);

        let mut m = Machine::new(&p).unwrap();
        m.step().unwrap();
        assert_eq!(m.read_stream("arg1 prop a").unwrap(), 0.5);
        assert_eq!(m.read_stream("arg1 prop b").unwrap(), 0.5);
        // Both consumers woke up.
        assert!(m.active_nodes().contains("prop a"));
        assert!(m.active_nodes().contains("prop b"));
        // The member spelling of the element resolves to the shared entry.
        assert_eq!(m.coefficient("(arg1 prop b)#(white u)").unwrap(), 0.5);

        // Unequal columns are rejected.
        let mut bad = p.clone();
        bad.matrix
            .insert("arg1 prop b", "one u", ElementSource::Constant(0.1));
        assert!(matches!(
            Machine::new(&bad),
            Err(ProgramError::SharedGroup { .. })
        ));
    }

    #[test]
    fn runs_are_deterministic() {
        let sig = Signature::new(
            vec![
                OperationDef::deterministic("id", 1),
                OperationDef::constant("white", 1.0),
                OperationDef::propagator("prop", 0.5),
            ],
            "id",
        );
        let mut p = Program::new(sig, Policy::Free);
        p.matrix
            .insert("arg1 prop c", "white u", ElementSource::Constant(1.0));
        p.matrix
            .insert("arg1 id s", "prop c", ElementSource::Constant(0.9));
        p.seed = 77;
        let watch = vec!["arg1 id s".to_string(), "prop c".to_string()];
        let a = run(&p, 50, &watch).unwrap();
        let b = run(&p, 50, &watch).unwrap();
        assert_eq!(a, b);

        let mut p2 = p.clone();
        p2.seed = 78;
        let c = run(&p2, 50, &watch).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn specialized_source_is_immediately_effective() {
        // Coefficient driven by a node: a(t) = x_driver(t), same tick.
        let mut p = Program::new(base_sig(), Policy::Free);
        p.matrix.insert(
            "arg1 id acc",
            "white u",
            ElementSource::External(Schedule::step(vec![(0, 0.3), (3, 0.8)])),
        );
        p.matrix.insert(
            "arg1 id tgt",
            "one u",
            ElementSource::Node("id acc".to_string()),
        );
        let mut m = Machine::new(&p).unwrap();
        // Drivers are live immediately.
        assert!(m.active_nodes().contains("id acc"));
        for t in 1..=10u64 {
            m.step().unwrap();
            let driver = m.read_stream("id acc").unwrap();
            let coeff = m.coefficient("(arg1 id tgt)#(one u)").unwrap();
            assert_eq!(driver, coeff, "at t={t}");
        }
    }

    #[test]
    fn propagator_chain_is_a_delay_line_and_decays_in_expectation() {
        let chain_program = |p: f64, seed: u64| {
            let sig = Signature::new(
                vec![
                    OperationDef::deterministic("id", 1),
                    OperationDef::constant("one", 1.0),
                    OperationDef::propagator("prop", p),
                ],
                "id",
            );
            let mut prog = Program::new(sig, Policy::Free);
            // Impulse of height 1 into the head of a 3-stage chain.
            prog.matrix.insert(
                "arg1 prop s1",
                "one u",
                ElementSource::External(Schedule::step(vec![(0, 1.0), (2, 0.0)])),
            );
            prog.matrix
                .insert("arg1 prop s2", "prop s1", ElementSource::Constant(1.0));
            prog.matrix
                .insert("arg1 prop s3", "prop s2", ElementSource::Constant(1.0));
            prog.seed = seed;
            prog
        };

        // p = 1: the chain is an exact 3-step delay line for the impulse.
        let watch = vec!["prop s3".to_string()];
        let traj = run(&chain_program(1.0, 0), 8, &watch).unwrap();
        let values: Vec<f64> = (0..=8).map(|t| traj.value_at(t, "prop s3").unwrap()).collect();
        assert_eq!(values, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);

        // p < 1: the unit input arrives with probability p^3.
        let p = 0.9f64;
        let compiled = Arc::new(CompiledProgram::compile(&chain_program(p, 0)).unwrap());
        let n = 2000u64;
        let mut acc = 0.0;
        for seed in 0..n {
            let mut m = Machine::from_compiled(compiled.clone(), Some(seed));
            for _ in 0..4 {
                m.step().unwrap();
            }
            acc += m.read_stream("prop s3").unwrap();
        }
        let mean = acc / n as f64;
        let q = p.powi(3);
        let sigma = (q * (1.0 - q) / n as f64).sqrt();
        assert!(
            (mean - q).abs() <= 3.0 * sigma,
            "chain mean {mean}, want {q} +- {}",
            3.0 * sigma
        );
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let mut p = Program::new(base_sig(), Policy::Free);
        for i in 0..40 {
            p.matrix.insert(
                &format!("arg1 prop n{i}"),
                "white u",
                ElementSource::Constant(0.9),
            );
            p.matrix.insert(
                &format!("arg1 id s{i}"),
                &format!("prop n{i}"),
                ElementSource::Constant(0.5),
            );
        }
        p.seed = 5;
        let watch: Vec<String> = (0..40).map(|i| format!("arg1 id s{i}")).collect();

        let mut seq = Machine::new(&p).unwrap();
        seq.set_exec_mode(ExecMode::Sequential);
        let a = run_machine(&mut seq, 30, &watch).unwrap();

        let mut par = Machine::new(&p).unwrap();
        par.set_exec_mode(ExecMode::Parallel);
        let b = run_machine(&mut par, 30, &watch).unwrap();

        assert_eq!(a, b);
    }
}

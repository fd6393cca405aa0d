//! Continuous-cellular-automaton programs, frame extraction, brightness
//! amplification, value stabilization, and matrix morphing.
//!
//! A CA program has one randomized propagator per grid cell. Each cell's
//! input column starts with all weight on a constant (the initialization
//! phase) and then switches, abruptly or along a linear cross-fade, to the
//! connectivity weights over neighbor propagators. The whole construction
//! is substochastic: every column sums to at most 1 at all times.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

use crate::elements::{ElementSource, Schedule};
use crate::machine::{Machine, StepError};
use crate::program::{CoefficientMatrix, Policy, Program, ProgramError};
use crate::signature::{OperationDef, Signature};
use crate::stdlib::{draw_from_salt, node_salt};

/// Upper bound on grid size, cells.
pub const MAX_CELLS: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid {width}x{height} is empty or exceeds {MAX_CELLS} cells")]
    Size { width: usize, height: usize },
}

impl GridSpec {
    pub fn new(width: usize, height: usize) -> Result<Self, GridError> {
        let cells = width.checked_mul(height).unwrap_or(usize::MAX);
        if cells == 0 || cells > MAX_CELLS {
            return Err(GridError::Size { width, height });
        }
        Ok(GridSpec { width, height })
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// The suffix naming a cell's operation instances.
    pub fn cell_suffix(&self, x: usize, y: usize) -> String {
        format!("cell_{x}_{y}")
    }

    /// The output node of the cell's propagator.
    pub fn cell_node(&self, x: usize, y: usize) -> String {
        format!("prop cell_{x}_{y}")
    }

    fn wrap(&self, x: i64, y: i64) -> (usize, usize) {
        let w = self.width as i64;
        let h = self.height as i64;
        ((x.rem_euclid(w)) as usize, (y.rem_euclid(h)) as usize)
    }
}

/// Connectivity of the automaton: per cell, neighbors with nonnegative
/// weights summing to at most 1.
#[derive(Clone, Debug, PartialEq)]
pub enum Pattern {
    /// Von Neumann 4-neighborhood, weight 1/4 each, torus wrap.
    VonNeumannAvg,
    /// Single neighbor at a fixed offset, weight 1.
    Shift { dx: i64, dy: i64 },
    /// `k` distinct cells drawn uniformly per cell, weight 1/k each.
    RandomSparse { k: usize, seed: u64 },
}

#[derive(Clone, Debug, Error, PartialEq)]
#[error("unrecognized pattern `{0}`; expected vn-avg, shift:<dx>,<dy> or random-sparse:<k>,<seed>")]
pub struct PatternParseError(String);

impl FromStr for Pattern {
    type Err = PatternParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "vn-avg" {
            return Ok(Pattern::VonNeumannAvg);
        }
        if let Some(rest) = s.strip_prefix("shift:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() == 2 {
                if let (Ok(dx), Ok(dy)) = (parts[0].parse(), parts[1].parse()) {
                    return Ok(Pattern::Shift { dx, dy });
                }
            }
        }
        if let Some(rest) = s.strip_prefix("random-sparse:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() == 2 {
                if let (Ok(k), Ok(seed)) = (parts[0].parse(), parts[1].parse()) {
                    if k > 0 {
                        return Ok(Pattern::RandomSparse { k, seed });
                    }
                }
            }
        }
        Err(PatternParseError(s.to_string()))
    }
}

impl Pattern {
    /// Neighbor weights for one cell, duplicates accumulated; the weights
    /// sum to at most 1.
    pub fn neighbors(&self, grid: &GridSpec, x: usize, y: usize) -> Vec<((usize, usize), f64)> {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        match self {
            Pattern::VonNeumannAvg => {
                let offsets = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)];
                for (dx, dy) in offsets {
                    let cell = grid.wrap(x as i64 + dx, y as i64 + dy);
                    *acc.entry(cell).or_insert(0.0) += 0.25;
                }
            }
            Pattern::Shift { dx, dy } => {
                let cell = grid.wrap(x as i64 + dx, y as i64 + dy);
                *acc.entry(cell).or_insert(0.0) += 1.0;
            }
            Pattern::RandomSparse { k, seed } => {
                let k = (*k).min(grid.cells());
                let salt = node_salt(&grid.cell_suffix(x, y));
                let weight = 1.0 / k as f64;
                let mut chosen = Vec::with_capacity(k);
                let mut draw_index = 0u64;
                while chosen.len() < k {
                    let u = draw_from_salt(*seed, salt, draw_index);
                    draw_index += 1;
                    let idx = (u * grid.cells() as f64) as usize;
                    let cell = (idx % grid.width, idx / grid.width);
                    if !chosen.contains(&cell) {
                        chosen.push(cell);
                    }
                }
                for cell in chosen {
                    *acc.entry(cell).or_insert(0.0) += weight;
                }
            }
        }
        acc.into_iter().collect()
    }
}

/// Per-cell initialization color.
#[derive(Clone, Debug, PartialEq)]
pub enum InitSpec {
    AllWhite,
    AllBlack,
    /// White on even (x+y), black otherwise.
    Checker,
    /// Independent fair coin per cell.
    Random { seed: u64 },
    None,
}

#[derive(Clone, Debug, Error, PartialEq)]
#[error("unrecognized init `{0}`; expected white, black, checker, random:<seed> or none")]
pub struct InitParseError(String);

impl FromStr for InitSpec {
    type Err = InitParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "white" => Ok(InitSpec::AllWhite),
            "black" => Ok(InitSpec::AllBlack),
            "checker" => Ok(InitSpec::Checker),
            "none" => Ok(InitSpec::None),
            other => match other.strip_prefix("random:") {
                Some(seed) => seed
                    .parse()
                    .map(|seed| InitSpec::Random { seed })
                    .map_err(|_| InitParseError(s.to_string())),
                None => Err(InitParseError(s.to_string())),
            },
        }
    }
}

impl InitSpec {
    /// The constant operation name initializing this cell, if any.
    pub fn color(&self, grid: &GridSpec, x: usize, y: usize) -> Option<&'static str> {
        match self {
            InitSpec::AllWhite => Some("white"),
            InitSpec::AllBlack => Some("black"),
            InitSpec::Checker => Some(if (x + y) % 2 == 0 { "white" } else { "black" }),
            InitSpec::Random { seed } => {
                let u = draw_from_salt(*seed, node_salt(&grid.cell_suffix(x, y)), 0);
                Some(if u < 0.5 { "black" } else { "white" })
            }
            InitSpec::None => None,
        }
    }
}

/// The operations of the CA experiments: identity, the two constants, and
/// one propagator with the given copy probability.
pub fn ca_signature(p: f64) -> Signature {
    Signature::new(
        vec![
            OperationDef::deterministic("id", 1),
            OperationDef::constant("black", -1.0),
            OperationDef::constant("white", 1.0),
            OperationDef::propagator("prop", p),
        ],
        "id",
    )
}

#[derive(Clone, Debug)]
pub struct CaConfig {
    pub grid: GridSpec,
    pub pattern: Pattern,
    /// Propagator copy probability.
    pub p: f64,
    pub init: InitSpec,
    /// First step at which the connectivity weights apply.
    pub switch_at: u64,
    /// Cross-fade length; `None` switches abruptly.
    pub ramp: Option<u64>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum CaError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("propagator probability {0} outside [0, 1]")]
    Probability(f64),
    #[error(transparent)]
    Program(#[from] ProgramError),
}

/// Builds the full experiment program: one propagator per cell, initialized
/// from constants, switching to the connectivity pattern at `switch_at`.
/// One constant instance per color is shared by every cell it initializes.
pub fn build_ca_program(cfg: &CaConfig) -> Result<Program, CaError> {
    if !(0.0..=1.0).contains(&cfg.p) {
        return Err(CaError::Probability(cfg.p));
    }
    let grid = cfg.grid;
    let mut program = Program::new(ca_signature(cfg.p), Policy::Substochastic);
    program.seed = cfg.seed;

    let switch = cfg.switch_at;
    let init_weight = |w: f64| -> ElementSource {
        match (switch, cfg.ramp) {
            (0, _) => ElementSource::External(Schedule::step(vec![(0, 0.0)])),
            (_, None) => ElementSource::External(Schedule::step(vec![(0, w), (switch, 0.0)])),
            (_, Some(ramp)) => ElementSource::External(Schedule::linear(vec![
                (0, w),
                (switch, w),
                (switch + ramp.max(1), 0.0),
            ])),
        }
    };
    let pattern_weight = |w: f64| -> ElementSource {
        match (switch, cfg.ramp) {
            (0, _) => ElementSource::External(Schedule::step(vec![(0, w)])),
            (_, None) => ElementSource::External(Schedule::step(vec![(0, 0.0), (switch, w)])),
            (_, Some(ramp)) => ElementSource::External(Schedule::linear(vec![
                (0, 0.0),
                (switch, 0.0),
                (switch + ramp.max(1), w),
            ])),
        }
    };

    for y in 0..grid.height {
        for x in 0..grid.width {
            let column = format!("arg1 {}", grid.cell_node(x, y));
            if let Some(color) = cfg.init.color(&grid, x, y) {
                let const_node = format!("{color} init");
                program
                    .matrix
                    .insert(&column, &const_node, init_weight(1.0));
            }
            for ((nx, ny), w) in cfg.pattern.neighbors(&grid, x, y) {
                let row = grid.cell_node(nx, ny);
                program.matrix.insert(&column, &row, pattern_weight(w));
            }
        }
    }

    program.shared_input_groups = detect_shared_columns(&program.matrix);
    Ok(program)
}

/// A constant-matrix variant for morphing: no phases, the init constant
/// keeps weight `drive` and the pattern weights are scaled by `1 - drive`.
pub fn build_static_ca_program(
    grid: GridSpec,
    pattern: &Pattern,
    p: f64,
    init: &InitSpec,
    drive: f64,
    seed: u64,
) -> Result<Program, CaError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CaError::Probability(p));
    }
    let mut program = Program::new(ca_signature(p), Policy::Substochastic);
    program.seed = seed;
    for y in 0..grid.height {
        for x in 0..grid.width {
            let column = format!("arg1 {}", grid.cell_node(x, y));
            if let Some(color) = init.color(&grid, x, y) {
                let const_node = format!("{color} init");
                program
                    .matrix
                    .insert(&column, &const_node, ElementSource::Constant(drive));
            }
            for ((nx, ny), w) in pattern.neighbors(&grid, x, y) {
                let row = grid.cell_node(nx, ny);
                program
                    .matrix
                    .insert(&column, &row, ElementSource::Constant((1.0 - drive) * w));
            }
        }
    }
    Ok(program)
}

/// Groups columns with identical contents so they share one physical
/// column.
fn detect_shared_columns(matrix: &CoefficientMatrix) -> Vec<Vec<String>> {
    let mut by_content: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (col, rows) in matrix.columns() {
        let key = serde_json::to_string(rows).expect("sources serialize");
        by_content.entry(key).or_default().push(col.to_string());
    }
    by_content
        .into_values()
        .filter(|group| group.len() >= 2)
        .collect()
}

/// A rendered snapshot of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Row-major cell values.
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameStats {
    pub mean_abs: f64,
    pub max_abs: f64,
    pub rms: f64,
}

impl Frame {
    pub fn stats(&self) -> FrameStats {
        let n = self.values.len().max(1) as f64;
        let mut sum_abs = 0.0;
        let mut max_abs = 0.0f64;
        let mut sum_sq = 0.0;
        for &v in &self.values {
            sum_abs += v.abs();
            max_abs = max_abs.max(v.abs());
            sum_sq += v * v;
        }
        FrameStats {
            mean_abs: sum_abs / n,
            max_abs,
            rms: (sum_sq / n).sqrt(),
        }
    }
}

/// Rescales so the maximal absolute value reaches 1; all-zero frames are
/// returned unchanged. Idempotent.
pub fn amplify_frame(frame: &Frame) -> Frame {
    let max_abs = frame.stats().max_abs;
    if max_abs == 0.0 {
        return frame.clone();
    }
    Frame {
        width: frame.width,
        height: frame.height,
        values: frame.values.iter().map(|v| v / max_abs).collect(),
    }
}

/// Rescales the values to the target root-mean-square when their RMS is
/// below it (and above zero), clamping to [-1, 1] afterwards.
pub fn stabilize_values(values: &mut [f64], target_rms: f64) {
    if values.is_empty() {
        return;
    }
    let rms = (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt();
    if rms <= 0.0 || rms >= target_rms {
        return;
    }
    let scale = target_rms / rms;
    for v in values.iter_mut() {
        *v = (*v * scale).clamp(-1.0, 1.0);
    }
}

/// Reads the grid's propagator values out of a machine; cells the program
/// never mentions read 0.
pub fn frame_from_machine(machine: &Machine, grid: &GridSpec) -> Frame {
    let mut values = Vec::with_capacity(grid.cells());
    for y in 0..grid.height {
        for x in 0..grid.width {
            let v = machine
                .read_stream(&grid.cell_node(x, y))
                .unwrap_or(0.0);
            values.push(v);
        }
    }
    Frame {
        width: grid.width,
        height: grid.height,
        values,
    }
}

/// Drives a CA machine, optionally applying RMS stabilization to the cell
/// propagator values each tick, between their evaluation and the linear
/// combinations that read them.
pub struct CaRunner {
    machine: Machine,
    grid: GridSpec,
    cell_ids: Vec<Option<usize>>,
    stabilize_rms: Option<f64>,
}

impl CaRunner {
    pub fn new(program: &Program, grid: GridSpec, stabilize_rms: Option<f64>) -> Result<Self, CaError> {
        let machine = Machine::new(program)?;
        let mut cell_ids = Vec::with_capacity(grid.cells());
        for y in 0..grid.height {
            for x in 0..grid.width {
                cell_ids.push(machine.output_id(&grid.cell_node(x, y)));
            }
        }
        Ok(CaRunner {
            machine,
            grid,
            cell_ids,
            stabilize_rms,
        })
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    pub fn machine_mut(&mut self) -> &mut Machine {
        &mut self.machine
    }

    pub fn t(&self) -> u64 {
        self.machine.t()
    }

    pub fn step(&mut self) -> Result<(), StepError> {
        match self.stabilize_rms {
            Some(target) => {
                let ids = &self.cell_ids;
                let mut hook = move |_t: u64, x: &mut [f64]| {
                    stabilize_cells(x, ids, target);
                };
                self.machine.step_with(Some(&mut hook))
            }
            None => self.machine.step(),
        }
    }

    pub fn frame(&self) -> Frame {
        let mut values = Vec::with_capacity(self.grid.cells());
        for id in &self.cell_ids {
            values.push(id.map(|i| self.machine.x_value(i)).unwrap_or(0.0));
        }
        Frame {
            width: self.grid.width,
            height: self.grid.height,
            values,
        }
    }
}

fn stabilize_cells(x: &mut [f64], ids: &[Option<usize>], target_rms: f64) {
    let mut sum_sq = 0.0;
    let mut n = 0usize;
    for id in ids.iter().flatten() {
        sum_sq += x[*id] * x[*id];
        n += 1;
    }
    if n == 0 {
        return;
    }
    let rms = (sum_sq / n as f64).sqrt();
    if rms <= 0.0 || rms >= target_rms {
        return;
    }
    let scale = target_rms / rms;
    for id in ids.iter().flatten() {
        x[*id] = (x[*id] * scale).clamp(-1.0, 1.0);
    }
}

#[derive(Debug, Error)]
pub enum MorphError {
    #[error("lambda {0} outside [0, 1]")]
    Lambda(f64),
    #[error("element ({column}, {row}) is not constant-valued")]
    NonConstant { column: String, row: String },
    #[error("programs are incompatible: {0}")]
    Incompatible(String),
}

/// Entrywise convex combination of two constant-valued matrices over the
/// union of their entries. The endpoints return exact copies.
pub fn morph_matrices(
    a: &CoefficientMatrix,
    b: &CoefficientMatrix,
    lambda: f64,
) -> Result<CoefficientMatrix, MorphError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MorphError::Lambda(lambda));
    }
    let constant_of = |src: &ElementSource, col: &str, row: &str| -> Result<f64, MorphError> {
        match src {
            ElementSource::Constant(c) => Ok(*c),
            _ => Err(MorphError::NonConstant {
                column: col.to_string(),
                row: row.to_string(),
            }),
        }
    };
    // Validate both sides even at the endpoints.
    for (col, row, src) in a.iter().chain(b.iter()) {
        constant_of(src, col, row)?;
    }
    if lambda == 0.0 {
        return Ok(a.clone());
    }
    if lambda == 1.0 {
        return Ok(b.clone());
    }
    let mut union: BTreeMap<(String, String), (f64, f64)> = BTreeMap::new();
    for (col, row, src) in a.iter() {
        let v = constant_of(src, col, row)?;
        union.insert((col.to_string(), row.to_string()), (v, 0.0));
    }
    for (col, row, src) in b.iter() {
        let v = constant_of(src, col, row)?;
        union
            .entry((col.to_string(), row.to_string()))
            .and_modify(|e| e.1 = v)
            .or_insert((0.0, v));
    }
    let mut out = CoefficientMatrix::default();
    for ((col, row), (va, vb)) in union {
        out.insert(
            &col,
            &row,
            ElementSource::Constant((1.0 - lambda) * va + lambda * vb),
        );
    }
    Ok(out)
}

/// Morphs two whole programs. They must agree on everything except the
/// matrix; the result carries the shared signature, policy, seed and watch
/// list with the morphed matrix.
pub fn morph_programs(a: &Program, b: &Program, lambda: f64) -> Result<Program, MorphError> {
    if a.signature != b.signature {
        return Err(MorphError::Incompatible("signatures differ".to_string()));
    }
    if a.policy != b.policy || a.on_violation != b.on_violation {
        return Err(MorphError::Incompatible("policies differ".to_string()));
    }
    if a.seed != b.seed {
        return Err(MorphError::Incompatible(
            "seeds differ; override both to morph".to_string(),
        ));
    }
    if a.shared_input_groups != b.shared_input_groups {
        return Err(MorphError::Incompatible(
            "shared input groups differ".to_string(),
        ));
    }
    if a.watch != b.watch {
        return Err(MorphError::Incompatible("watch lists differ".to_string()));
    }
    let mut out = a.clone();
    out.matrix = morph_matrices(&a.matrix, &b.matrix, lambda)?;
    Ok(out)
}

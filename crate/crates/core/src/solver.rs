//! Backward dynamic programming for BSDEs and reflected BSDEs on a scenario
//! tree.
//!
//! At a node with child values `y_c`, the projection step computes
//! `ȳ = Σ p_c y_c`, the jump sizes `u(e) = y(jump e) − y(no jump)` and, with
//! Brownian branching, `z`. A [`Driver`] turns this into a continuation value
//! `c`; reflection then sets `y = max(c, L)` and `ΔK = (L − c)⁺`.
//!
//! Three step schemes are available for a [`Generator`]:
//!
//! * [`Scheme::Exact`] embeds the step in continuous time. Between grid
//!   points the jump clock runs for `−ln(1 − ΔA)`, so that the step carries
//!   jump probability `ΔA` exactly, and the pre-jump value solves a scalar
//!   ODE in the probability clock `q ∈ [0, ΔA]`:
//!   `dY/dq = (f(Y, y_e − Y) + Σ_e φ_e y_e − Y)/(1 − q)`, `Y(0) = y(no jump)`.
//!   It reproduces the entropic certainty equivalent exactly and keeps the
//!   comparison and exponential bounds valid at any step size.
//! * [`Scheme::Implicit`] solves `c = ȳ + f(c, u)·ΔA`.
//! * [`Scheme::Explicit`] sets `c = ȳ + f(ȳ, u)·ΔA`.

use std::fmt;
use std::ops::Range;

use rayon::prelude::*;

use crate::error::{FieldError, GeneratorError, SolverError};
use crate::generator::{inf_convolution, Generator};
use crate::mpp::{Domain, Jump, MarkField, Move, NodeField, ScenarioTree};
use crate::numerics::rk4_adaptive;
use crate::scalar::Scalar;

/// Fixed-point iteration limit of the implicit scheme.
pub const MAX_FIXED_POINT_ITER: usize = 200;
pub const FIXED_POINT_TOL: f64 = 1e-12;
/// Relative tolerance of the step ODE in the exact scheme.
pub const EXACT_STEP_TOL: f64 = 1e-13;
/// Tolerance for `y = L` when reading off the first hitting time.
pub const HITTING_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    Exact,
    Implicit,
    Explicit,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Exact => "exact",
            Scheme::Implicit => "implicit",
            Scheme::Explicit => "explicit",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Scheme::Exact),
            "implicit" => Ok(Scheme::Implicit),
            "explicit" => Ok(Scheme::Explicit),
            other => Err(format!("unknown scheme {other:?} (expected exact, implicit or explicit)")),
        }
    }
}

/// Everything a driver sees at one node.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a, T> {
    pub node: usize,
    pub step: usize,
    /// Transition probabilities in child order.
    pub probs: &'a [T],
    pub phi: &'a [T],
    pub delta_a: T,
    pub dt: T,
    pub brownian: bool,
    /// Child values in child order.
    pub children: &'a [T],
}

impl<'a, T: Scalar> StepInput<'a, T> {
    pub fn new(tree: &'a ScenarioTree<T>, node: usize, children: &'a [T]) -> Self {
        let step = tree.node(node).depth;
        let model = tree.model();
        Self {
            node,
            step,
            probs: tree.branch_probs(step),
            phi: model.kernel(step),
            delta_a: model.delta_a(step),
            dt: model.dt(step),
            brownian: model.brownian(),
            children,
        }
    }

    pub fn n_marks(&self) -> usize {
        self.phi.len()
    }

    /// Child value for jump outcome `j` (0 = no jump, `e + 1` = mark `e`),
    /// averaged over the Brownian move.
    fn jump_mean(&self, j: usize) -> T {
        if self.brownian {
            (self.children[2 * j] + self.children[2 * j + 1]) * T::half()
        } else {
            self.children[j]
        }
    }

    pub fn project(&self) -> Projection<T> {
        let ybar = self.probs.iter().zip(self.children).map(|(p, y)| *p * *y).sum();
        let y_nojump = self.jump_mean(0);
        let u: Vec<T> = (0..self.n_marks()).map(|e| self.jump_mean(e + 1) - y_nojump).collect();
        let z = if self.brownian {
            let two_sqrt_dt = T::two() * self.dt.sqrt();
            (0..=self.n_marks())
                .map(|j| {
                    let w = if j == 0 { T::one() - self.delta_a } else { self.phi[j - 1] * self.delta_a };
                    w * (self.children[2 * j] - self.children[2 * j + 1]) / two_sqrt_dt
                })
                .sum()
        } else {
            T::zero()
        };
        Projection { ybar, y_nojump, u, z }
    }
}

/// Martingale-representation coordinates of the child values.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    pub ybar: T,
    pub y_nojump: T,
    pub u: Vec<T>,
    pub z: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult<T> {
    /// Unreflected value `c`.
    pub continuation: T,
    pub u: Vec<T>,
    pub z: T,
    /// `c − ȳ`: what the driver adds over the step.
    pub increment: T,
    pub iterations: usize,
    /// Optional control read off the step (the optimal position in pricing).
    pub control: Option<T>,
}

/// One backward step `children ↦ continuation`.
pub trait Driver<T: Scalar>: Send + Sync {
    fn step(&self, input: &StepInput<'_, T>) -> Result<StepResult<T>, SolverError>;

    fn describe(&self) -> String;
}

impl<T: Scalar, D: Driver<T> + ?Sized> Driver<T> for &D {
    fn step(&self, input: &StepInput<'_, T>) -> Result<StepResult<T>, SolverError> {
        (**self).step(input)
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// A [`Generator`] with a step scheme.
#[derive(Debug, Clone)]
pub struct GeneratorDriver<G> {
    pub gen: G,
    pub scheme: Scheme,
}

impl<G> GeneratorDriver<G> {
    pub fn new(gen: G, scheme: Scheme) -> Self {
        Self { gen, scheme }
    }

    pub fn exact(gen: G) -> Self {
        Self::new(gen, Scheme::Exact)
    }

    pub fn implicit(gen: G) -> Self {
        Self::new(gen, Scheme::Implicit)
    }
}

fn finite<T: Scalar>(v: T, node: usize) -> Result<T, SolverError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(SolverError::NonFinite { node })
    }
}

/// Solves `c = ȳ + g(c)` by Picard iteration from `start`, falling back to
/// bisection on the residual when the iteration does not settle.
pub fn implicit_fixed_point<T: Scalar>(
    mut g: impl FnMut(T) -> Result<T, GeneratorError>,
    ybar: T,
    start: T,
    node: usize,
) -> Result<(T, usize), SolverError> {
    let tol = T::lit(FIXED_POINT_TOL);
    let mut c = start;
    for it in 1..=MAX_FIXED_POINT_ITER {
        let next = ybar + g(c)?;
        if !next.is_finite() {
            break;
        }
        if (next - c).abs() <= tol * (T::one() + next.abs()) {
            return Ok((next, it));
        }
        c = next;
    }
    // r(c) = c − ȳ − g(c) is increasing when g is Lipschitz with constant < 1.
    let mut resid = |c: T| -> Result<T, SolverError> { Ok(c - ybar - g(c)?) };
    let mut width = T::one() + ybar.abs();
    let (mut lo, mut hi) = (ybar - width, ybar + width);
    let mut bracketed = false;
    for _ in 0..60 {
        let (rl, rh) = (resid(lo)?, resid(hi)?);
        if rl <= T::zero() && rh >= T::zero() {
            bracketed = true;
            break;
        }
        width = width * T::two();
        lo = ybar - width;
        hi = ybar + width;
    }
    if !bracketed {
        return Err(SolverError::FixedPointDiverged { node, iterations: MAX_FIXED_POINT_ITER });
    }
    let mut iterations = MAX_FIXED_POINT_ITER;
    for _ in 0..400 {
        iterations += 1;
        let mid = (lo + hi) * T::half();
        if hi - lo <= tol * (T::one() + mid.abs()) {
            break;
        }
        if resid(mid)? < T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = (lo + hi) * T::half();
    let check = resid(c)?;
    if !(check.abs() <= T::lit(1e-9) * (T::one() + c.abs())) {
        return Err(SolverError::FixedPointDiverged { node, iterations });
    }
    Ok((c, iterations))
}

impl<G> GeneratorDriver<G> {
    /// Implicit continuation from an arbitrary starting point.
    pub fn implicit_from<T: Scalar>(&self, input: &StepInput<'_, T>, start: T) -> Result<(T, usize), SolverError>
    where
        G: Generator<T>,
    {
        let p = input.project();
        implicit_fixed_point(
            |c| self.gen.increment(input.step, c, p.z, &p.u, input.phi, input.delta_a, input.dt),
            p.ybar,
            start,
            input.node,
        )
    }
}

impl<T: Scalar, G: Generator<T>> Driver<T> for GeneratorDriver<G> {
    fn step(&self, input: &StepInput<'_, T>) -> Result<StepResult<T>, SolverError> {
        let p = input.project();
        let (c, iterations) = match self.scheme {
            Scheme::Explicit => {
                let inc = self.gen.increment(input.step, p.ybar, p.z, &p.u, input.phi, input.delta_a, input.dt)?;
                (p.ybar + inc, 0)
            }
            Scheme::Implicit => implicit_fixed_point(
                |c| self.gen.increment(input.step, c, p.z, &p.u, input.phi, input.delta_a, input.dt),
                p.ybar,
                p.ybar,
                input.node,
            )?,
            Scheme::Exact => {
                if input.brownian {
                    return Err(SolverError::SchemeUnsupported {
                        scheme: "exact",
                        reason: "Brownian branching has no single-clock embedding; use the implicit scheme",
                    });
                }
                if input.delta_a == T::zero() {
                    (p.y_nojump, 0)
                } else {
                    exact_step(&self.gen, input, &p)?
                }
            }
        };
        let c = finite(c, input.node)?;
        Ok(StepResult { continuation: c, increment: c - p.ybar, u: p.u, z: p.z, iterations, control: None })
    }

    fn describe(&self) -> String {
        format!("{} [{}]", self.gen.name(), self.scheme)
    }
}

fn exact_step<T: Scalar, G: Generator<T>>(
    gen: &G,
    input: &StepInput<'_, T>,
    p: &Projection<T>,
) -> Result<(T, usize), SolverError> {
    let k = input.n_marks();
    let jumps: Vec<T> = (0..k).map(|e| input.children[e + 1]).collect();
    let jump_mean: T = jumps.iter().zip(input.phi).map(|(y, f)| *y * *f).sum();
    let mut u = vec![T::zero(); k];
    let mut evals = 0usize;
    let rhs = |q: T, y: T| -> Result<T, GeneratorError> {
        evals += 1;
        for (ue, ye) in u.iter_mut().zip(&jumps) {
            *ue = *ye - y;
        }
        let f = gen.eval(input.step, y, p.z, &u, input.phi)?;
        Ok((f + jump_mean - y) / (T::one() - q))
    };
    let tol = T::lit(EXACT_STEP_TOL).max(T::epsilon() * T::lit(1e3));
    let y = rk4_adaptive(rhs, T::zero(), input.delta_a, p.y_nojump, tol, 4, 18)?;
    match y {
        Some(y) => Ok((y, evals)),
        None => Err(SolverError::IntegrationFailed { node: input.node }),
    }
}

/// Lower barrier `L`; `None` marks an inactive node (`L = −∞`).
#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle<T> {
    values: Vec<Option<T>>,
}

impl<T: Scalar> Obstacle<T> {
    pub fn inactive(tree: &ScenarioTree<T>) -> Self {
        Self { values: vec![None; tree.len()] }
    }

    pub fn from_field(field: &NodeField<T>) -> Result<Self, FieldError> {
        if field.domain() != Domain::All {
            return Err(FieldError::FieldDomainMismatch("obstacle must cover all nodes".into()));
        }
        Ok(Self { values: field.values().iter().map(|v| Some(*v)).collect() })
    }

    pub fn from_fn(tree: &ScenarioTree<T>, mut f: impl FnMut(usize) -> Option<T>) -> Result<Self, FieldError> {
        let values: Vec<Option<T>> = (0..tree.len()).map(&mut f).collect();
        if let Some(i) = values.iter().position(|v| v.is_some_and(|x| !x.is_finite())) {
            return Err(FieldError::NonFinite { node: i });
        }
        Ok(Self { values })
    }

    pub fn at(&self, id: usize) -> Option<T> {
        self.values[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_inactive(&self) -> bool {
        self.values.iter().all(Option::is_none)
    }

    /// `L` at a node with `−∞` for inactive nodes.
    pub fn value(&self, id: usize) -> T {
        self.values[id].unwrap_or_else(T::neg_infinity)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { values: self.values.iter().map(|v| v.map(&f)).collect() }
    }

    /// Pointwise `max(L, other)`; inactive only where both are.
    pub fn max_with(&self, other: &Self) -> Self {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| match (a, b) {
                (Some(x), Some(y)) => Some(x.max(*y)),
                (Some(x), None) | (None, Some(x)) => Some(*x),
                (None, None) => None,
            })
            .collect();
        Self { values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics<T> {
    /// Per internal node: fixed-point iterations (implicit) or right-hand
    /// side evaluations (exact).
    pub iterations: Vec<usize>,
    /// `max (y − L)·ΔK` over nodes with an active barrier.
    pub max_flat_off: T,
    /// `min (y − L)` over nodes with an active barrier (`+∞` if none).
    pub min_barrier_gap: T,
    pub driver: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbsdeSolution<T> {
    pub y: NodeField<T>,
    pub u: MarkField<T>,
    /// Present iff the tree has Brownian branching.
    pub z: Option<NodeField<T>>,
    /// `ΔK` on all nodes; zero at the leaves.
    pub dk: NodeField<T>,
    /// Unreflected continuation `c` on internal nodes.
    pub continuation: NodeField<T>,
    /// `c − ȳ` on internal nodes.
    pub increment: NodeField<T>,
    pub control: Option<Vec<T>>,
    pub diagnostics: Diagnostics<T>,
}

impl<T: Scalar> RbsdeSolution<T> {
    pub fn root_y(&self) -> T {
        self.y.at(0)
    }

    /// `K_T` along each path, per leaf.
    pub fn k_total(&self, tree: &ScenarioTree<T>) -> Vec<T> {
        path_sums(tree, |id| if tree.is_leaf(id) { T::zero() } else { self.dk.at(id) })
    }

    /// Largest deviation over leaves of
    /// `y_0 − ξ − Σ(c − ȳ) − ΣΔK + Σ(u·1{jump} − Σ_e u φ ΔA)`.
    /// Exact up to rounding on pure-jump trees; with Brownian branching the
    /// `z·ΔW` term is included and the residual measures the orthogonal part.
    pub fn pathwise_residual(&self, tree: &ScenarioTree<T>, terminal: &NodeField<T>) -> T {
        let model = tree.model();
        let mut acc = vec![T::zero(); tree.len()];
        for depth in 0..tree.depth() {
            let phi = model.kernel(depth);
            let da = model.delta_a(depth);
            let sqrt_dt = model.dt(depth).sqrt();
            for id in tree.level(depth) {
                let row = self.u.row(id);
                let comp: T = row.iter().zip(phi).map(|(v, p)| *v * *p * da).sum();
                let z = self.z.as_ref().map_or(T::zero(), |z| z.at(id));
                let base = acc[id] + self.increment.at(id) + self.dk.at(id) + comp;
                for c in tree.children(id) {
                    let o = tree.node(c).outcome.expect("child has an outcome");
                    let jump = match o.jump {
                        Jump::Mark(e) => row[e],
                        Jump::None => T::zero(),
                    };
                    let dw = match o.brownian {
                        Some(Move::Up) => sqrt_dt,
                        Some(Move::Down) => -sqrt_dt,
                        None => T::zero(),
                    };
                    acc[c] = base - jump - z * dw;
                }
            }
        }
        let y0 = self.root_y();
        tree.leaves().map(|id| (y0 - terminal.at(id) - acc[id]).abs()).fold(T::zero(), T::max)
    }
}

/// Per-leaf sums of a node quantity along the path from the root.
fn path_sums<T: Scalar>(tree: &ScenarioTree<T>, f: impl Fn(usize) -> T) -> Vec<T> {
    let mut acc = vec![T::zero(); tree.len()];
    acc[0] = f(0);
    for depth in 1..=tree.depth() {
        for id in tree.level(depth) {
            let parent = tree.node(id).parent.expect("non-root");
            acc[id] = acc[parent] + f(id);
        }
    }
    acc[tree.first_leaf()..].to_vec()
}

fn check_terminal<T: Scalar>(tree: &ScenarioTree<T>, terminal: &NodeField<T>) -> Result<(), SolverError> {
    if terminal.domain() != Domain::Leaves || terminal.values().len() != tree.leaves().len() {
        return Err(FieldError::FieldDomainMismatch("terminal value must be a leaf field of this tree".into()).into());
    }
    Ok(())
}

/// Reflected backward recursion. Leaves take `ξ`; internal nodes take
/// `max(c, L)`. Nodes of one depth are solved in parallel.
pub fn rbsde_solve<T: Scalar, D: Driver<T> + ?Sized>(
    tree: &ScenarioTree<T>,
    driver: &D,
    terminal: &NodeField<T>,
    obstacle: &Obstacle<T>,
) -> Result<RbsdeSolution<T>, SolverError> {
    check_terminal(tree, terminal)?;
    if obstacle.len() != tree.len() {
        return Err(FieldError::FieldDomainMismatch(format!(
            "obstacle has {} nodes, tree has {}",
            obstacle.len(),
            tree.len()
        ))
        .into());
    }
    for id in tree.leaves() {
        if let Some(l) = obstacle.at(id) {
            if l > terminal.at(id) {
                return Err(SolverError::ObstacleAboveTerminal { node: id });
            }
        }
    }
    let n_int = tree.n_internal();
    let k = tree.model().n_marks();
    let mut y = vec![T::zero(); tree.len()];
    y[tree.first_leaf()..].copy_from_slice(terminal.values());
    let mut dk = vec![T::zero(); tree.len()];
    let mut cont = vec![T::zero(); n_int];
    let mut inc = vec![T::zero(); n_int];
    let mut z = vec![T::zero(); n_int];
    let mut u = MarkField::zeros(n_int, k);
    let mut iterations = vec![0usize; n_int];
    let mut control: Vec<Option<T>> = vec![None; n_int];

    for depth in (0..tree.depth()).rev() {
        let level: Range<usize> = tree.level(depth);
        let results: Vec<Result<StepResult<T>, SolverError>> = level
            .clone()
            .into_par_iter()
            .map(|id| {
                let ch = tree.children(id);
                driver.step(&StepInput::new(tree, id, &y[ch]))
            })
            .collect();
        for (id, r) in level.zip(results) {
            let r = r?;
            let c = r.continuation;
            let (value, push) = match obstacle.at(id) {
                Some(l) if l > c => (l, l - c),
                _ => (c, T::zero()),
            };
            y[id] = value;
            dk[id] = push;
            cont[id] = c;
            inc[id] = r.increment;
            z[id] = r.z;
            u.row_mut(id).copy_from_slice(&r.u);
            iterations[id] = r.iterations;
            control[id] = r.control;
        }
    }

    let mut max_flat_off = T::zero();
    let mut min_gap = T::infinity();
    for id in 0..tree.len() {
        if let Some(l) = obstacle.at(id) {
            max_flat_off = max_flat_off.max((y[id] - l) * dk[id]);
            min_gap = min_gap.min(y[id] - l);
        }
    }
    let control = if control.iter().all(Option::is_some) && n_int > 0 {
        Some(control.into_iter().map(|c| c.expect("checked")).collect())
    } else {
        None
    };
    Ok(RbsdeSolution {
        y: NodeField::new(tree, Domain::All, y)?,
        u,
        z: if tree.model().brownian() { Some(NodeField::new(tree, Domain::Internal, z)?) } else { None },
        dk: NodeField::new(tree, Domain::All, dk)?,
        continuation: NodeField::new(tree, Domain::Internal, cont)?,
        increment: NodeField::new(tree, Domain::Internal, inc)?,
        control,
        diagnostics: Diagnostics {
            iterations,
            max_flat_off,
            min_barrier_gap: min_gap,
            driver: driver.describe(),
        },
    })
}

/// Unreflected recursion: [`rbsde_solve`] with an inactive barrier.
pub fn bsde_solve<T: Scalar, D: Driver<T> + ?Sized>(
    tree: &ScenarioTree<T>,
    driver: &D,
    terminal: &NodeField<T>,
) -> Result<RbsdeSolution<T>, SolverError> {
    rbsde_solve(tree, driver, terminal, &Obstacle::inactive(tree))
}

/// Node-indexed stop/continue decisions; a node is a history, so any such
/// map is adapted. Leaves always stop.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StoppingRule {
    stop: Vec<bool>,
}

impl StoppingRule {
    pub fn new<T: Scalar>(tree: &ScenarioTree<T>, stop: Vec<bool>) -> Result<Self, SolverError> {
        if stop.len() != tree.len() {
            return Err(SolverError::RuleNotAdapted(format!(
                "rule covers {} nodes, tree has {}",
                stop.len(),
                tree.len()
            )));
        }
        if let Some(id) = tree.leaves().find(|&id| !stop[id]) {
            return Err(SolverError::RuleNotAdapted(format!("leaf {id} does not stop")));
        }
        Ok(Self { stop })
    }

    pub fn at_leaves<T: Scalar>(tree: &ScenarioTree<T>) -> Self {
        Self { stop: (0..tree.len()).map(|id| tree.is_leaf(id)).collect() }
    }

    /// Stops at every node.
    pub fn immediate<T: Scalar>(tree: &ScenarioTree<T>) -> Self {
        Self { stop: vec![true; tree.len()] }
    }

    pub fn stops(&self, id: usize) -> bool {
        self.stop[id]
    }

    pub fn len(&self) -> usize {
        self.stop.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stop.is_empty()
    }

    /// Nodes in the subtree of `from` where `τ` is attained.
    pub fn stopping_nodes<T: Scalar>(&self, tree: &ScenarioTree<T>, from: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![from];
        while let Some(id) = stack.pop() {
            if self.stop[id] {
                out.push(id);
            } else {
                stack.extend(tree.children(id).rev());
            }
        }
        out.sort_unstable();
        out
    }

    /// Equality of the induced stopping times below `from`.
    pub fn same_from<T: Scalar>(&self, other: &Self, tree: &ScenarioTree<T>, from: usize) -> bool {
        self.stopping_nodes(tree, from) == other.stopping_nodes(tree, from)
    }
}

/// `E^f_{t,τ}[η]`: backward recursion without reflection from the nodes
/// where `rule` stops, read at `from`. `eta` is indexed by node id; `−∞`
/// entries propagate as `−∞`.
pub fn evaluation_operator<T: Scalar, D: Driver<T> + ?Sized>(
    tree: &ScenarioTree<T>,
    driver: &D,
    rule: &StoppingRule,
    eta: &[T],
    from: usize,
) -> Result<T, SolverError> {
    if rule.len() != tree.len() {
        return Err(SolverError::RuleNotAdapted("rule built for another tree".into()));
    }
    if eta.len() != tree.len() {
        return Err(FieldError::FieldDomainMismatch(format!("η has {} entries, tree has {}", eta.len(), tree.len())).into());
    }
    fn value<T: Scalar, D: Driver<T> + ?Sized>(
        tree: &ScenarioTree<T>,
        driver: &D,
        rule: &StoppingRule,
        eta: &[T],
        id: usize,
    ) -> Result<T, SolverError> {
        if rule.stops(id) {
            return Ok(eta[id]);
        }
        let children = tree
            .children(id)
            .map(|c| value(tree, driver, rule, eta, c))
            .collect::<Result<Vec<T>, _>>()?;
        if children.iter().any(|v| *v == T::neg_infinity()) {
            return Ok(T::neg_infinity());
        }
        Ok(driver.step(&StepInput::new(tree, id, &children))?.continuation)
    }
    value(tree, driver, rule, eta, from)
}

/// `η` for the optimal stopping problem: `ξ` at leaves, `L` elsewhere.
pub fn stopping_payoff<T: Scalar>(tree: &ScenarioTree<T>, terminal: &NodeField<T>, obstacle: &Obstacle<T>) -> Vec<T> {
    (0..tree.len()).map(|id| if tree.is_leaf(id) { terminal.at(id) } else { obstacle.value(id) }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LadderMode {
    /// Replace `f` by its inf-convolution `f^n`.
    InfConvolution,
    /// Clamp `ξ` and `L` to `[−n, n]`.
    Truncation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderRung<T> {
    pub n: T,
    pub solution: RbsdeSolution<T>,
    pub root_y: T,
    /// `max_node |y^n − y|` against the direct solve.
    pub gap: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ladder<T> {
    pub mode: LadderMode,
    pub direct: RbsdeSolution<T>,
    pub rungs: Vec<LadderRung<T>>,
}

impl<T: Scalar> Ladder<T> {
    pub fn root_nondecreasing(&self) -> bool {
        self.rungs.windows(2).all(|w| w[1].root_y >= w[0].root_y - T::lit(1e-12))
    }

    pub fn gap_reduction(&self) -> Option<T> {
        let first = self.rungs.first()?.gap;
        let last = self.rungs.last()?.gap;
        Some(if last == T::zero() { T::infinity() } else { first / last })
    }
}

fn sup_gap<T: Scalar>(a: &RbsdeSolution<T>, b: &RbsdeSolution<T>) -> T {
    a.y.values().iter().zip(b.y.values()).map(|(x, y)| (*x - *y).abs()).fold(T::zero(), T::max)
}

/// Solves the approximating sequence for each `n` in `n_list` and reports the
/// distance to the direct solve with `gen`.
pub fn approximation_ladder<T: Scalar, G: Generator<T> + Clone>(
    tree: &ScenarioTree<T>,
    gen: &G,
    scheme: Scheme,
    terminal: &NodeField<T>,
    obstacle: &Obstacle<T>,
    n_list: &[T],
    mode: LadderMode,
) -> Result<Ladder<T>, SolverError> {
    let direct = rbsde_solve(tree, &GeneratorDriver::new(gen, scheme), terminal, obstacle)?;
    let mut rungs = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let solution = match mode {
            LadderMode::InfConvolution => {
                let gn = inf_convolution(gen.clone(), n)?;
                rbsde_solve(tree, &GeneratorDriver::new(gn, scheme), terminal, obstacle)?
            }
            LadderMode::Truncation => {
                let clamp = |v: T| v.max(-n).min(n);
                let xi = terminal.map(clamp);
                let l = obstacle.map(clamp);
                rbsde_solve(tree, &GeneratorDriver::new(gen, scheme), &xi, &l)?
            }
        };
        let gap = sup_gap(&solution, &direct);
        rungs.push(LadderRung { n, root_y: solution.root_y(), gap, solution });
    }
    Ok(Ladder { mode, direct, rungs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{Entropic, LinearInU};
    use crate::mpp::{build_tree, MppModel, DEFAULT_NODE_CAP};

    fn one_step() -> ScenarioTree<f64> {
        let m = MppModel::<f64>::new(vec![0.0, 1.0], vec![0.2], vec![vec![1.0]], false).unwrap();
        build_tree(&m, DEFAULT_NODE_CAP).unwrap()
    }

    fn jump_indicator(t: &ScenarioTree<f64>) -> NodeField<f64> {
        NodeField::from_fn(t, Domain::Leaves, |id| if t.node(id).jumps > 0 { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn zero_driver_step_is_expectation() {
        let t = one_step();
        let d = GeneratorDriver::exact(LinearInU::constant(0.0, 1));
        let s = bsde_solve(&t, &d, &jump_indicator(&t)).unwrap();
        assert!((s.root_y() - 0.2).abs() < 1e-15);
        assert_eq!(s.u.row(0), &[1.0]);
        assert_eq!(s.dk.at(0), 0.0);
    }

    #[test]
    fn reflection_one_step() {
        let t = one_step();
        let d = GeneratorDriver::exact(LinearInU::constant(0.0, 1));
        let l = Obstacle::from_fn(&t, |id| (id == 0).then_some(0.5)).unwrap();
        let s = rbsde_solve(&t, &d, &jump_indicator(&t), &l).unwrap();
        assert_eq!(s.root_y(), 0.5);
        assert!((s.dk.at(0) - 0.3).abs() < 1e-15);
        assert!(s.diagnostics.max_flat_off <= 1e-12);
    }

    #[test]
    fn constant_driver_shifts_by_delta_a() {
        let t = one_step();
        for scheme in [Scheme::Exact, Scheme::Implicit, Scheme::Explicit] {
            let d = GeneratorDriver::new(LinearInU::constant(0.7, 1), scheme);
            let s = bsde_solve(&t, &d, &jump_indicator(&t)).unwrap();
            assert!((s.root_y() - (0.2 + 0.7 * 0.2)).abs() < 1e-12, "{scheme}");
        }
    }

    #[test]
    fn implicit_linear_in_y() {
        let t = one_step();
        let gen = LinearInU::new(0.5, vec![0.0], vec![0.0], 1.0).unwrap();
        let xi = NodeField::constant(&t, Domain::Leaves, 1.0).unwrap();
        let s = bsde_solve(&t, &GeneratorDriver::implicit(gen.clone()), &xi).unwrap();
        assert!((s.root_y() - 1.0 / 0.9).abs() < 1e-12);
        let exact = bsde_solve(&t, &GeneratorDriver::exact(gen), &xi).unwrap();
        // dY/dq = (1 − Y/2)/(1 − q), Y(0) = 1: Y = 2 − (1 − q)^{1/2}
        assert!((exact.root_y() - (2.0 - 0.8_f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn exact_entropic_step_is_certainty_equivalent() {
        let m = MppModel::<f64>::new(vec![0.0, 1.0], vec![0.35], vec![vec![0.3, 0.7]], false).unwrap();
        let t = build_tree(&m, DEFAULT_NODE_CAP).unwrap();
        let xi = NodeField::new(&t, Domain::Leaves, vec![0.4, -1.0, 1.3]).unwrap();
        let lam: f64 = 1.7;
        let s = bsde_solve(&t, &GeneratorDriver::exact(Entropic::new(lam).unwrap()), &xi).unwrap();
        let ce = (0.65 * (lam * 0.4).exp() + 0.35 * 0.3 * (-lam).exp() + 0.35 * 0.7 * (lam * 1.3).exp()).ln() / lam;
        assert!((s.root_y() - ce).abs() < 1e-12, "{} vs {ce}", s.root_y());
    }

    #[test]
    fn entropic_constant_terminal_is_constant() {
        let m = MppModel::<f64>::new(vec![0.0, 0.5, 1.0], vec![0.3, 0.2], vec![vec![0.5, 0.5]; 2], false).unwrap();
        let t = build_tree(&m, DEFAULT_NODE_CAP).unwrap();
        let xi = NodeField::constant(&t, Domain::Leaves, 2.5).unwrap();
        for scheme in [Scheme::Exact, Scheme::Implicit] {
            let s = bsde_solve(&t, &GeneratorDriver::new(Entropic::new(1.0).unwrap(), scheme), &xi).unwrap();
            assert!(s.y.values().iter().all(|v| (*v - 2.5).abs() < 1e-13));
        }
    }

    #[test]
    fn exact_scheme_rejects_brownian_trees() {
        let m = MppModel::<f64>::new(vec![0.0, 1.0], vec![0.2], vec![vec![1.0]], true).unwrap();
        let t = build_tree(&m, DEFAULT_NODE_CAP).unwrap();
        let xi = NodeField::constant(&t, Domain::Leaves, 1.0).unwrap();
        let r = bsde_solve(&t, &GeneratorDriver::exact(LinearInU::constant(0.0, 1)), &xi);
        assert!(matches!(r, Err(SolverError::SchemeUnsupported { .. })));
        let s = bsde_solve(&t, &GeneratorDriver::implicit(LinearInU::constant(0.0, 1)), &xi).unwrap();
        assert!(s.z.is_some());
    }

    #[test]
    fn brownian_projection_reads_z() {
        let m = MppModel::<f64>::new(vec![0.0, 0.25], vec![0.2], vec![vec![1.0]], true).unwrap();
        let t = build_tree(&m, DEFAULT_NODE_CAP).unwrap();
        let xi = NodeField::from_fn(&t, Domain::Leaves, |id| t.node(id).w).unwrap();
        let s = bsde_solve(&t, &GeneratorDriver::implicit(LinearInU::constant(0.0, 1)), &xi).unwrap();
        assert!((s.z.as_ref().unwrap().at(0) - 1.0).abs() < 1e-15);
        assert!(s.pathwise_residual(&t, &xi) < 1e-14);
    }

    #[test]
    fn obstacle_above_terminal_is_rejected() {
        let t = one_step();
        let l = Obstacle::from_fn(&t, |_| Some(2.0)).unwrap();
        let d = GeneratorDriver::exact(LinearInU::constant(0.0, 1));
        assert!(matches!(
            rbsde_solve(&t, &d, &jump_indicator(&t), &l),
            Err(SolverError::ObstacleAboveTerminal { .. })
        ));
    }

    #[test]
    fn evaluation_operator_examples() {
        let t = one_step();
        let d = GeneratorDriver::exact(LinearInU::constant(0.0, 1));
        let xi = jump_indicator(&t);
        let l = Obstacle::from_fn(&t, |id| (id == 0).then_some(0.5)).unwrap();
        let eta = stopping_payoff(&t, &xi, &l);
        assert_eq!(evaluation_operator(&t, &d, &StoppingRule::immediate(&t), &eta, 0).unwrap(), 0.5);
        let v = evaluation_operator(&t, &d, &StoppingRule::at_leaves(&t), &eta, 0).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
        assert!(StoppingRule::new(&t, vec![true, false, true]).is_err());
    }

    #[test]
    fn uniqueness_probe_from_two_starts() {
        let m = MppModel::<f64>::new(vec![0.0, 1.0], vec![0.3], vec![vec![0.4, 0.6]], false).unwrap();
        let t = build_tree(&m, DEFAULT_NODE_CAP).unwrap();
        let d = GeneratorDriver::implicit(LinearInU::new(0.8, vec![0.3, -0.2], vec![0.1], 1.0).unwrap());
        let children = [0.3, -0.5, 1.2];
        let input = StepInput::new(&t, 0, &children);
        let ybar = input.project().ybar;
        let (a, _) = d.implicit_from(&input, ybar).unwrap();
        let (b, _) = d.implicit_from(&input, ybar + 10.0).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn truncation_ladder_with_bounded_data_has_zero_gap() {
        let m = MppModel::<f64>::new(vec![0.0, 0.5, 1.0], vec![0.3, 0.2], vec![vec![0.5, 0.5]; 2], false).unwrap();
        let t = build_tree(&m, DEFAULT_NODE_CAP).unwrap();
        let xi = NodeField::from_fn(&t, Domain::Leaves, |id| (id as f64 * 0.37).sin()).unwrap();
        let lad = approximation_ladder(
            &t,
            &Entropic::new(1.0).unwrap(),
            Scheme::Exact,
            &xi,
            &Obstacle::inactive(&t),
            &[1.0, 2.0],
            LadderMode::Truncation,
        )
        .unwrap();
        assert!(lad.rungs.iter().all(|r| r.gap == 0.0));
    }

    #[test]
    fn lipschitz_driver_is_fixed_by_inf_convolution() {
        let t = one_step();
        let gen = LinearInU::new(0.0, vec![0.5], vec![0.0], 1.0).unwrap();
        let xi = jump_indicator(&t);
        let lad = approximation_ladder(
            &t,
            &gen,
            Scheme::Exact,
            &xi,
            &Obstacle::inactive(&t),
            &[1.0, 2.0],
            LadderMode::InfConvolution,
        )
        .unwrap();
        assert!(lad.rungs.iter().all(|r| r.gap < 1e-12), "{:?}", lad.rungs.iter().map(|r| r.gap).collect::<Vec<_>>());
    }
}

//! Discrete marked point process and its exact scenario tree.
//!
//! Each step of the time grid carries a deterministic compensator increment
//! `ΔA_i` and a mark kernel `φ_i`. At most one jump happens per step: no jump
//! with probability `1 − ΔA_i`, a jump with mark `e` with probability
//! `φ_i(e)·ΔA_i`. With Brownian branching enabled each outcome is further
//! split into an up/down move of `±√Δt_i` with probability ½ each.
//!
//! The tree enumerates every history, so conditional expectations are finite
//! sums and all martingale identities hold up to rounding.

use std::collections::HashSet;
use std::fmt;

use crate::error::{FieldError, ModelError, TreeError};
use crate::scalar::Scalar;

/// Default node cap for [`build_tree`].
pub const DEFAULT_NODE_CAP: usize = 5_000_000;
/// Default tolerance for kernel normalization.
pub const DEFAULT_PROB_TOL: f64 = 1e-12;

/// Finite mark space `E`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkSpace {
    labels: Vec<String>,
}

impl MarkSpace {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self, ModelError> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(ModelError::EmptyMarkSpace);
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(ModelError::DuplicateMark(l.clone()));
            }
        }
        Ok(Self { labels })
    }

    /// Marks labelled `e1, …, eK`.
    pub fn numbered(k: usize) -> Result<Self, ModelError> {
        Self::new((1..=k).map(|i| format!("e{i}")))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MppModel<T> {
    grid: Vec<T>,
    delta_a: Vec<T>,
    kernel: Vec<Vec<T>>,
    brownian: bool,
    marks: MarkSpace,
}

impl<T: Scalar> MppModel<T> {
    /// Validates and builds a model with numbered marks and the default
    /// probability tolerance.
    pub fn new(
        grid: Vec<T>,
        delta_a: Vec<T>,
        kernel: Vec<Vec<T>>,
        brownian: bool,
    ) -> Result<Self, ModelError> {
        let k = kernel.first().map_or(0, Vec::len);
        let marks = MarkSpace::numbered(k)?;
        Self::with_marks(grid, delta_a, kernel, brownian, marks, T::lit(DEFAULT_PROB_TOL))
    }

    pub fn with_marks(
        grid: Vec<T>,
        delta_a: Vec<T>,
        kernel: Vec<Vec<T>>,
        brownian: bool,
        marks: MarkSpace,
        prob_tol: T,
    ) -> Result<Self, ModelError> {
        if grid.len() < 2 {
            return Err(ModelError::LengthMismatch { what: "grid", got: grid.len(), expected: 2 });
        }
        if grid[0] != T::zero() {
            return Err(ModelError::NonIncreasingGrid { index: 0 });
        }
        for (i, w) in grid.windows(2).enumerate() {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(ModelError::NonIncreasingGrid { index: i + 1 });
            }
        }
        let n = grid.len() - 1;
        if delta_a.len() != n {
            return Err(ModelError::LengthMismatch { what: "delta_a", got: delta_a.len(), expected: n });
        }
        if kernel.len() != n {
            return Err(ModelError::LengthMismatch { what: "kernel", got: kernel.len(), expected: n });
        }
        for (step, &da) in delta_a.iter().enumerate() {
            if !(da >= T::zero() && da < T::one()) {
                return Err(ModelError::CompensatorOutOfRange { step, value: da.as_f64() });
            }
        }
        let k = marks.len();
        for (step, phi) in kernel.iter().enumerate() {
            if phi.len() != k {
                return Err(ModelError::LengthMismatch { what: "kernel row", got: phi.len(), expected: k });
            }
            let sum: T = phi.iter().copied().sum();
            if phi.iter().any(|p| !(*p >= T::zero())) || (sum - T::one()).abs() > prob_tol {
                return Err(ModelError::KernelNotProbability { step, sum: sum.as_f64() });
            }
        }
        Ok(Self { grid, delta_a, kernel, brownian, marks })
    }

    pub fn steps(&self) -> usize {
        self.delta_a.len()
    }

    pub fn n_marks(&self) -> usize {
        self.marks.len()
    }

    pub fn marks(&self) -> &MarkSpace {
        &self.marks
    }

    pub fn grid(&self) -> &[T] {
        &self.grid
    }

    pub fn time(&self, i: usize) -> T {
        self.grid[i]
    }

    pub fn dt(&self, i: usize) -> T {
        self.grid[i + 1] - self.grid[i]
    }

    pub fn delta_a(&self, i: usize) -> T {
        self.delta_a[i]
    }

    pub fn delta_a_all(&self) -> &[T] {
        &self.delta_a
    }

    pub fn kernel(&self, i: usize) -> &[T] {
        &self.kernel[i]
    }

    pub fn brownian(&self) -> bool {
        self.brownian
    }

    /// `A_T = Σ ΔA_i`.
    pub fn a_total(&self) -> T {
        self.delta_a.iter().copied().sum()
    }

    /// `A_{t_i} = Σ_{j<i} ΔA_j`, for `i = 0..=N`.
    pub fn cumulative_a(&self) -> Vec<T> {
        let mut acc = T::zero();
        let mut out = Vec::with_capacity(self.steps() + 1);
        out.push(acc);
        for &da in &self.delta_a {
            acc = acc + da;
            out.push(acc);
        }
        out
    }

    pub fn max_delta_a(&self) -> T {
        self.delta_a.iter().copied().fold(T::zero(), T::max)
    }

    /// Number of outcomes per step.
    pub fn branching(&self) -> usize {
        (self.n_marks() + 1) * if self.brownian { 2 } else { 1 }
    }

    /// Same model with Brownian branching switched on or off.
    pub fn with_brownian(mut self, brownian: bool) -> Self {
        self.brownian = brownian;
        self
    }
}

/// Jump part of a one-step outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Jump {
    None,
    Mark(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Move {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Outcome {
    pub jump: Jump,
    pub brownian: Option<Move>,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.jump {
            Jump::None => write!(f, "nojump")?,
            Jump::Mark(e) => write!(f, "jump{e}")?,
        }
        match self.brownian {
            Some(Move::Up) => write!(f, "+up"),
            Some(Move::Down) => write!(f, "+down"),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node<T> {
    pub id: usize,
    pub depth: usize,
    pub parent: Option<usize>,
    pub outcome: Option<Outcome>,
    /// One-step transition probability from the parent (1 at the root).
    pub prob: T,
    pub path_prob: T,
    /// Jumps along the history.
    pub jumps: usize,
    pub last_mark: Option<usize>,
    /// Brownian position `Σ ±√Δt` along the history.
    pub w: T,
}

/// Exact tree of all histories of a [`MppModel`], stored level by level.
///
/// Children of a node are contiguous and ordered by outcome: no-jump first,
/// then marks `0..K`; with Brownian branching each jump outcome is followed
/// by its up and down variants.
#[derive(Debug, Clone)]
pub struct ScenarioTree<T> {
    model: MppModel<T>,
    nodes: Vec<Node<T>>,
    levels: Vec<std::ops::Range<usize>>,
    outcomes: Vec<Outcome>,
    branch_probs: Vec<Vec<T>>,
}

/// Per-step outcomes in child order, and their probabilities.
fn step_outcomes<T: Scalar>(model: &MppModel<T>) -> (Vec<Outcome>, Vec<Vec<T>>) {
    let k = model.n_marks();
    let moves: Vec<Option<Move>> =
        if model.brownian() { vec![Some(Move::Up), Some(Move::Down)] } else { vec![None] };
    let mut outcomes = Vec::new();
    for j in 0..=k {
        let jump = if j == 0 { Jump::None } else { Jump::Mark(j - 1) };
        for m in &moves {
            outcomes.push(Outcome { jump, brownian: *m });
        }
    }
    let split = if model.brownian() { T::half() } else { T::one() };
    let probs = (0..model.steps())
        .map(|i| {
            let da = model.delta_a(i);
            outcomes
                .iter()
                .map(|o| {
                    let p = match o.jump {
                        Jump::None => T::one() - da,
                        Jump::Mark(e) => model.kernel(i)[e] * da,
                    };
                    p * split
                })
                .collect()
        })
        .collect();
    (outcomes, probs)
}

/// Total node count of the tree a model would generate.
pub fn node_count<T: Scalar>(model: &MppModel<T>) -> u128 {
    let b = model.branching() as u128;
    let mut total: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..=model.steps() {
        total = total.saturating_add(level);
        level = level.saturating_mul(b);
    }
    total
}

/// Materializes the tree, refusing when it would exceed `cap` nodes.
pub fn build_tree<T: Scalar>(model: &MppModel<T>, cap: usize) -> Result<ScenarioTree<T>, TreeError> {
    let total = node_count(model);
    if total > cap as u128 {
        return Err(TreeError::TreeTooLarge { nodes: total, cap });
    }
    let (outcomes, branch_probs) = step_outcomes(model);
    let b = outcomes.len();
    let mut nodes = Vec::with_capacity(total as usize);
    nodes.push(Node {
        id: 0,
        depth: 0,
        parent: None,
        outcome: None,
        prob: T::one(),
        path_prob: T::one(),
        jumps: 0,
        last_mark: None,
        w: T::zero(),
    });
    let mut levels = vec![std::ops::Range { start: 0, end: 1 }];
    for depth in 0..model.steps() {
        let sqrt_dt = model.dt(depth).sqrt();
        let parents = levels[depth].clone();
        let start = nodes.len();
        for pid in parents {
            for c in 0..b {
                let o = outcomes[c];
                let parent = &nodes[pid];
                let prob = branch_probs[depth][c];
                let (jumps, last_mark) = match o.jump {
                    Jump::None => (parent.jumps, parent.last_mark),
                    Jump::Mark(e) => (parent.jumps + 1, Some(e)),
                };
                let w = match o.brownian {
                    Some(Move::Up) => parent.w + sqrt_dt,
                    Some(Move::Down) => parent.w - sqrt_dt,
                    None => parent.w,
                };
                let node = Node {
                    id: nodes.len(),
                    depth: depth + 1,
                    parent: Some(pid),
                    outcome: Some(o),
                    prob,
                    path_prob: parent.path_prob * prob,
                    jumps,
                    last_mark,
                    w,
                };
                nodes.push(node);
            }
        }
        levels.push(start..nodes.len());
    }
    Ok(ScenarioTree { model: model.clone(), nodes, levels, outcomes, branch_probs })
}

impl<T: Scalar> ScenarioTree<T> {
    pub fn model(&self) -> &MppModel<T> {
        &self.model
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node<T> {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, depth: usize) -> std::ops::Range<usize> {
        self.levels[depth].clone()
    }

    pub fn leaves(&self) -> std::ops::Range<usize> {
        self.levels[self.depth()].clone()
    }

    pub fn first_leaf(&self) -> usize {
        self.levels[self.depth()].start
    }

    pub fn n_internal(&self) -> usize {
        self.first_leaf()
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        id >= self.first_leaf()
    }

    pub fn branching(&self) -> usize {
        self.outcomes.len()
    }

    /// Child outcomes in child order.
    pub fn outcomes(&self) -> &[Outcome] {
        &self.outcomes
    }

    /// Transition probabilities of step `i` in child order.
    pub fn branch_probs(&self, step: usize) -> &[T] {
        &self.branch_probs[step]
    }

    pub fn children(&self, id: usize) -> std::ops::Range<usize> {
        let node = &self.nodes[id];
        if node.depth == self.depth() {
            return id..id;
        }
        let pos = id - self.levels[node.depth].start;
        let b = self.branching();
        let start = self.levels[node.depth + 1].start + pos * b;
        start..start + b
    }

    /// Child reached through `(jump, move)`; `move` is ignored without
    /// Brownian branching.
    pub fn child(&self, id: usize, jump: Jump, mv: Option<Move>) -> usize {
        let j = match jump {
            Jump::None => 0,
            Jump::Mark(e) => e + 1,
        };
        let slot = if self.model.brownian() {
            2 * j + usize::from(mv == Some(Move::Down))
        } else {
            j
        };
        self.children(id).start + slot
    }

    pub fn time_of(&self, id: usize) -> T {
        self.model.time(self.nodes[id].depth)
    }

    /// Root-to-node path, inclusive.
    pub fn path(&self, id: usize) -> Vec<usize> {
        let mut out = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    /// Whether `id` lies in the subtree rooted at `ancestor` (inclusive).
    pub fn is_descendant(&self, id: usize, ancestor: usize) -> bool {
        let target = self.nodes[ancestor].depth;
        let mut cur = id;
        while self.nodes[cur].depth > target {
            cur = self.nodes[cur].parent.expect("non-root has parent");
        }
        cur == ancestor
    }

    /// Conditional expectations `E[X | node]` at every node of a leaf field,
    /// computed by backward averaging with the transition probabilities.
    pub fn backward_average(&self, leaf_values: &[T]) -> Vec<T> {
        assert_eq!(leaf_values.len(), self.leaves().len());
        let mut out = vec![T::zero(); self.len()];
        let first = self.first_leaf();
        out[first..].copy_from_slice(leaf_values);
        for depth in (0..self.depth()).rev() {
            let probs = &self.branch_probs[depth];
            for id in self.level(depth) {
                let ch = self.children(id);
                out[id] = probs.iter().zip(&out[ch]).map(|(p, v)| *p * *v).sum();
            }
        }
        out
    }

    /// `E[X]` of a leaf field using stored path probabilities.
    pub fn expectation(&self, leaf_values: &[T]) -> T {
        self.leaves().zip(leaf_values).map(|(id, v)| self.nodes[id].path_prob * *v).sum()
    }
}

/// Which nodes a [`NodeField`] covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    All,
    Internal,
    Leaves,
}

/// Real values on a declared node set.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeField<T> {
    domain: Domain,
    offset: usize,
    values: Vec<T>,
}

fn domain_range<T: Scalar>(tree: &ScenarioTree<T>, domain: Domain) -> std::ops::Range<usize> {
    match domain {
        Domain::All => 0..tree.len(),
        Domain::Internal => 0..tree.first_leaf(),
        Domain::Leaves => tree.leaves(),
    }
}

impl<T: Scalar> NodeField<T> {
    pub fn new(tree: &ScenarioTree<T>, domain: Domain, values: Vec<T>) -> Result<Self, FieldError> {
        let range = domain_range(tree, domain);
        if values.len() != range.len() {
            return Err(FieldError::FieldDomainMismatch(format!(
                "{domain:?} field needs {} values, got {}",
                range.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite { node: range.start + i });
        }
        Ok(Self { domain, offset: range.start, values })
    }

    pub fn from_fn(tree: &ScenarioTree<T>, domain: Domain, mut f: impl FnMut(usize) -> T) -> Result<Self, FieldError> {
        let values = domain_range(tree, domain).map(&mut f).collect();
        Self::new(tree, domain, values)
    }

    pub fn constant(tree: &ScenarioTree<T>, domain: Domain, c: T) -> Result<Self, FieldError> {
        Self::from_fn(tree, domain, |_| c)
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn contains(&self, id: usize) -> bool {
        id >= self.offset && id < self.offset + self.values.len()
    }

    /// Value at node `id`. Panics when `id` is outside the domain.
    pub fn at(&self, id: usize) -> T {
        assert!(self.contains(id), "node {id} outside {:?} field", self.domain);
        self.values[id - self.offset]
    }

    pub fn get(&self, id: usize) -> Option<T> {
        self.contains(id).then(|| self.values[id - self.offset])
    }

    /// Returns a copy with `f` applied pointwise.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { domain: self.domain, offset: self.offset, values: self.values.iter().map(|v| f(*v)).collect() }
    }
}

/// Per-mark values on internal nodes (the `U` component).
#[derive(Debug, Clone, PartialEq)]
pub struct MarkField<T> {
    marks: usize,
    values: Vec<T>,
}

impl<T: Scalar> MarkField<T> {
    pub fn zeros(n_internal: usize, marks: usize) -> Self {
        Self { marks, values: vec![T::zero(); n_internal * marks] }
    }

    pub fn new(tree: &ScenarioTree<T>, values: Vec<T>) -> Result<Self, FieldError> {
        let marks = tree.model().n_marks();
        if values.len() != tree.n_internal() * marks {
            return Err(FieldError::FieldDomainMismatch(format!(
                "mark field needs {}×{} values, got {}",
                tree.n_internal(),
                marks,
                values.len()
            )));
        }
        Ok(Self { marks, values })
    }

    pub fn from_fn(tree: &ScenarioTree<T>, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let marks = tree.model().n_marks();
        let mut values = Vec::with_capacity(tree.n_internal() * marks);
        for id in 0..tree.n_internal() {
            for e in 0..marks {
                values.push(f(id, e));
            }
        }
        Self { marks, values }
    }

    pub fn marks(&self) -> usize {
        self.marks
    }

    pub fn n_nodes(&self) -> usize {
        self.values.len().checked_div(self.marks).unwrap_or(0)
    }

    pub fn row(&self, id: usize) -> &[T] {
        &self.values[id * self.marks..(id + 1) * self.marks]
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [T] {
        &mut self.values[id * self.marks..(id + 1) * self.marks]
    }

    pub fn at(&self, id: usize, e: usize) -> T {
        self.values[id * self.marks + e]
    }
}

/// Per-leaf value of `Σ_{i<upto} [u_i(e_i)·1{jump e_i} − Σ_e u_i(e)φ_i(e)ΔA_i]`,
/// the compensated jump integral of a predictable field along each history.
pub fn compensated_integral<T: Scalar>(
    tree: &ScenarioTree<T>,
    u: &MarkField<T>,
    upto_step: usize,
) -> Result<NodeField<T>, FieldError> {
    let model = tree.model();
    if u.marks() != model.n_marks() || u.n_nodes() != tree.n_internal() {
        return Err(FieldError::FieldDomainMismatch(format!(
            "u has {} nodes × {} marks, tree has {} internal nodes × {} marks",
            u.n_nodes(),
            u.marks(),
            tree.n_internal(),
            model.n_marks()
        )));
    }
    if upto_step > model.steps() {
        return Err(FieldError::FieldDomainMismatch(format!(
            "upto_step {upto_step} beyond horizon {}",
            model.steps()
        )));
    }
    // Forward accumulation over levels keeps this linear in the tree size.
    let mut acc = vec![T::zero(); tree.len()];
    for depth in 0..upto_step {
        let phi = model.kernel(depth);
        let da = model.delta_a(depth);
        for id in tree.level(depth) {
            let row = u.row(id);
            let comp: T = row.iter().zip(phi).map(|(v, p)| *v * *p * da).sum();
            for c in tree.children(id) {
                let jump = match tree.node(c).outcome.map(|o| o.jump) {
                    Some(Jump::Mark(e)) => row[e],
                    _ => T::zero(),
                };
                acc[c] = acc[id] + jump - comp;
            }
        }
    }
    if upto_step < model.steps() {
        // Carry values unchanged below `upto_step`.
        for depth in upto_step..model.steps() {
            for id in tree.level(depth) {
                for c in tree.children(id) {
                    acc[c] = acc[id];
                }
            }
        }
    }
    NodeField::new(tree, Domain::Leaves, acc[tree.first_leaf()..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(brownian: bool) -> ScenarioTree<f64> {
        let m = MppModel::new(vec![0.0, 1.0], vec![0.2], vec![vec![1.0]], brownian).unwrap();
        build_tree(&m, DEFAULT_NODE_CAP).unwrap()
    }

    #[test]
    fn smallest_model_reports_total_compensator() {
        let m = MppModel::new(vec![0.0, 1.0], vec![0.2], vec![vec![1.0]], false).unwrap();
        assert_eq!(m.a_total(), 0.2);
        assert_eq!(m.max_delta_a(), 0.2);
    }

    #[test]
    fn two_step_model_sums_increments() {
        let m = MppModel::<f64>::new(
            vec![0.0, 0.5, 1.0],
            vec![0.3, 0.3],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            false,
        )
        .unwrap();
        assert!((m.a_total() - 0.6).abs() < 1e-15);
        assert_eq!(m.cumulative_a(), vec![0.0, 0.3, 0.6]);
    }

    #[test]
    fn rejects_invalid_models() {
        assert!(matches!(
            MppModel::new(vec![0.0, 1.0], vec![1.2], vec![vec![1.0]], false),
            Err(ModelError::CompensatorOutOfRange { step: 0, .. })
        ));
        assert!(matches!(
            MppModel::new(vec![0.0, 1.0, 1.0], vec![0.1, 0.1], vec![vec![1.0], vec![1.0]], false),
            Err(ModelError::NonIncreasingGrid { index: 2 })
        ));
        assert!(matches!(
            MppModel::new(vec![0.0, 1.0], vec![0.1], vec![vec![0.6, 0.5]], false),
            Err(ModelError::KernelNotProbability { step: 0, .. })
        ));
        assert!(matches!(
            MppModel::new(vec![0.0, 1.0], vec![0.1, 0.1], vec![vec![1.0]], false),
            Err(ModelError::LengthMismatch { what: "delta_a", .. })
        ));
        assert!(MarkSpace::new(["a", "a"]).is_err());
    }

    #[test]
    fn one_step_tree_probabilities() {
        let t = one_step(false);
        assert_eq!(t.leaves().len(), 2);
        let probs: Vec<f64> = t.leaves().map(|id| t.node(id).path_prob).collect();
        assert_eq!(probs, vec![0.8, 0.2]);
        assert_eq!(t.node(t.child(0, Jump::Mark(0), None)).prob, 0.2);
    }

    #[test]
    fn brownian_branching_halves_probabilities() {
        let t = one_step(true);
        assert_eq!(t.leaves().len(), 4);
        let mut probs: Vec<f64> = t.leaves().map(|id| t.node(id).path_prob).collect();
        probs.sort_by(f64::total_cmp);
        assert_eq!(probs, vec![0.1, 0.1, 0.4, 0.4]);
        let up = t.child(0, Jump::None, Some(Move::Up));
        assert_eq!(t.node(up).w, 1.0);
    }

    #[test]
    fn leaf_count_is_branching_power() {
        let m = MppModel::new(
            vec![0.0, 0.5, 1.0],
            vec![0.3, 0.3],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            false,
        )
        .unwrap();
        let t = build_tree(&m, DEFAULT_NODE_CAP).unwrap();
        assert_eq!(t.leaves().len(), 9);
        let total: f64 = t.leaves().map(|id| t.node(id).path_prob).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mb = m.clone().with_brownian(true);
        assert_eq!(build_tree(&mb, DEFAULT_NODE_CAP).unwrap().leaves().len(), 36);
    }

    #[test]
    fn tree_cap_is_enforced() {
        let m = MppModel::new(
            vec![0.0, 0.5, 1.0],
            vec![0.3, 0.3],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            false,
        )
        .unwrap();
        assert_eq!(build_tree(&m, 12).unwrap_err(), TreeError::TreeTooLarge { nodes: 13, cap: 12 });
    }

    #[test]
    fn compensated_integral_one_step() {
        let t = one_step(false);
        let zero = MarkField::zeros(t.n_internal(), 1);
        assert!(compensated_integral(&t, &zero, 1).unwrap().values().iter().all(|v| *v == 0.0));

        let u = MarkField::new(&t, vec![1.0]).unwrap();
        let ci = compensated_integral(&t, &u, 1).unwrap();
        let nojump = t.child(0, Jump::None, None);
        let jump = t.child(0, Jump::Mark(0), None);
        assert!((ci.at(jump) - 0.8).abs() < 1e-15);
        assert!((ci.at(nojump) + 0.2).abs() < 1e-15);
        assert!(t.expectation(ci.values()).abs() < 1e-15);
    }

    #[test]
    fn compensated_integral_rejects_wrong_shape() {
        let t = one_step(false);
        let u = MarkField::zeros(3, 1);
        assert!(compensated_integral(&t, &u, 1).is_err());
        let u = MarkField::zeros(1, 1);
        assert!(compensated_integral(&t, &u, 2).is_err());
    }

    #[test]
    fn backward_average_matches_path_weighted_sum() {
        let m = MppModel::new(
            vec![0.0, 0.4, 1.0],
            vec![0.25, 0.1],
            vec![vec![0.3, 0.7], vec![0.6, 0.4]],
            true,
        )
        .unwrap();
        let t = build_tree(&m, DEFAULT_NODE_CAP).unwrap();
        let vals: Vec<f64> = t.leaves().map(|id| (id as f64).sin()).collect();
        let avg = t.backward_average(&vals);
        assert!((avg[0] - t.expectation(&vals)).abs() < 1e-14);
    }

    #[test]
    fn descendant_relation() {
        let t = one_step(false);
        assert!(t.is_descendant(1, 0));
        assert!(t.is_descendant(2, 2));
        assert!(!t.is_descendant(1, 2));
    }
}

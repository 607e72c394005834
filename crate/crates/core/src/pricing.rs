//! Exponential-utility indifference pricing in a jump(-diffusion) market on
//! the scenario tree.
//!
//! The risky asset moves by `S' = S·(1 + R)` over a step, where the return is
//! `R = bΔt + σΔW + Σ_e β(e)(1{jump e} − φ(e)ΔA)` (compensated jumps) or, with
//! [`ReturnConvention::Raw`], `bΔt + σΔW + β(e)·1{jump e}`. A position `π` in
//! currency units earns `π·R`. Interest is zero.
//!
//! Prices come from the one-step dynamic programme
//! `Y = min_{π∈C} (1/α̃) ln Σ_c p_c exp(α̃(Y_c − πR_c))`, which is the value
//! function identity `V(x) = −exp(−α̃(x − Y))` of the utility maximization on
//! the tree. [`PricingGenerator`] is the continuous-time driver of the same
//! problem.

use crate::error::{GeneratorError, PricingError, SolverError};
use crate::generator::{j_lambda_unchecked, Alpha, Convexity, Generator, Growth};
use crate::mpp::{build_tree, Domain, Jump, Move, MppModel, NodeField, ScenarioTree};
use crate::numerics::golden_section;
use crate::scalar::{log_sum_exp, Scalar};
use crate::solver::{rbsde_solve, Driver, Obstacle, RbsdeSolution, StepInput, StepResult, StoppingRule, HITTING_TOL};

/// Admissible positions `C`.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSet<T> {
    /// Finite grid; exact minimum over its points.
    Grid(Vec<T>),
    /// Closed interval; the minimum of a convex objective by golden section.
    Interval(T, T),
}

impl<T: Scalar> ConstraintSet<T> {
    pub fn grid(points: Vec<T>) -> Result<Self, PricingError> {
        if points.is_empty() {
            return Err(PricingError::EmptyConstraintSet);
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(PricingError::InvalidMarket("constraint points must be finite".into()));
        }
        Ok(ConstraintSet::Grid(points))
    }

    pub fn interval(lo: T, hi: T) -> Result<Self, PricingError> {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(PricingError::EmptyConstraintSet);
        }
        Ok(ConstraintSet::Interval(lo, hi))
    }

    /// Grid points ordered by `|π|`, then `π`: the order in which ties are
    /// resolved.
    pub fn ordered_points(&self) -> Option<Vec<T>> {
        match self {
            ConstraintSet::Grid(p) => {
                let mut p = p.clone();
                p.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap().then(a.partial_cmp(b).unwrap()));
                p.dedup();
                Some(p)
            }
            ConstraintSet::Interval(lo, hi) if lo == hi => Some(vec![*lo]),
            ConstraintSet::Interval(..) => None,
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            ConstraintSet::Interval(..) => true,
            ConstraintSet::Grid(p) => p.iter().all(|x| *x == p[0]),
        }
    }

    /// `argmin_{π∈C} h(π)` with its value. Grid ties go to the smallest
    /// `|π|`, then the smallest `π`.
    pub fn minimize(&self, mut h: impl FnMut(T) -> T) -> (T, T) {
        match self.ordered_points() {
            Some(points) => {
                let mut best = (points[0], h(points[0]));
                for &p in &points[1..] {
                    let v = h(p);
                    if v < best.1 {
                        best = (p, v);
                    }
                }
                best
            }
            None => {
                let ConstraintSet::Interval(lo, hi) = *self else { unreachable!() };
                let (x, v) = golden_section(&mut h, lo, hi, T::lit(1e-14), 500);
                // prefer 0 when it is in C and not worse
                if lo <= T::zero() && hi >= T::zero() {
                    let v0 = h(T::zero());
                    if v0 <= v {
                        return (T::zero(), v0);
                    }
                }
                (x, v)
            }
        }
    }

    pub fn len(&self) -> Option<usize> {
        self.ordered_points().map(|p| p.len())
    }

    /// A box is never empty; a grid is rejected at construction if it is.
    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReturnConvention {
    #[default]
    Compensated,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel<T> {
    pub drift: T,
    pub sigma: T,
    /// Relative price jump `β(e) > −1` per mark.
    pub jump_sizes: Vec<T>,
    pub constraint: ConstraintSet<T>,
    pub risk_aversion: T,
    pub s0: T,
    pub convention: ReturnConvention,
}

impl<T: Scalar> MarketModel<T> {
    pub fn new(
        drift: T,
        sigma: T,
        jump_sizes: Vec<T>,
        constraint: ConstraintSet<T>,
        risk_aversion: T,
        s0: T,
    ) -> Result<Self, PricingError> {
        if !(sigma >= T::zero()) {
            return Err(PricingError::InvalidMarket("σ must be nonnegative".into()));
        }
        if sigma == T::zero() && drift != T::zero() {
            return Err(PricingError::InvalidMarket("pure-jump mode (σ = 0) requires b = 0".into()));
        }
        if let Some(b) = jump_sizes.iter().find(|b| !(**b > -T::one())) {
            return Err(PricingError::InvalidMarket(format!("jump size {b} must exceed −1")));
        }
        if !(risk_aversion > T::zero()) {
            return Err(PricingError::InvalidMarket("risk aversion must be positive".into()));
        }
        if !(s0 > T::zero()) {
            return Err(PricingError::InvalidMarket("S_0 must be positive".into()));
        }
        if let ConstraintSet::Grid(p) = &constraint {
            if p.is_empty() {
                return Err(PricingError::EmptyConstraintSet);
            }
        }
        Ok(Self { drift, sigma, jump_sizes, constraint, risk_aversion, s0, convention: ReturnConvention::Compensated })
    }

    pub fn with_convention(mut self, convention: ReturnConvention) -> Self {
        self.convention = convention;
        self
    }

    /// Market price of risk `θ = b/σ` (0 in pure-jump mode).
    pub fn theta(&self) -> T {
        if self.sigma == T::zero() {
            T::zero()
        } else {
            self.drift / self.sigma
        }
    }
}

/// Scenario tree with asset prices and per-step returns in child order.
#[derive(Debug, Clone)]
pub struct MarketTree<T> {
    pub tree: ScenarioTree<T>,
    pub price: NodeField<T>,
    pub market: MarketModel<T>,
    returns: Vec<Vec<T>>,
}

impl<T: Scalar> MarketTree<T> {
    /// Returns of step `i`, in child order.
    pub fn returns(&self, step: usize) -> &[T] {
        &self.returns[step]
    }

    pub fn all_returns(&self) -> &[Vec<T>] {
        &self.returns
    }

    /// Return realised on the edge into `child`.
    pub fn edge_return(&self, child: usize) -> T {
        let node = self.tree.node(child);
        let parent = node.parent.expect("edge into a non-root node");
        let slot = child - self.tree.children(parent).start;
        self.returns[node.depth - 1][slot]
    }
}

pub fn build_market_tree<T: Scalar>(
    market: &MarketModel<T>,
    model: &MppModel<T>,
    cap: usize,
) -> Result<MarketTree<T>, PricingError> {
    if market.jump_sizes.len() != model.n_marks() {
        return Err(PricingError::InvalidMarket(format!(
            "{} jump sizes for {} marks",
            market.jump_sizes.len(),
            model.n_marks()
        )));
    }
    if market.sigma > T::zero() && !model.brownian() {
        return Err(PricingError::InvalidMarket("σ > 0 needs Brownian branching in the model".into()));
    }
    let tree = build_tree(model, cap).map_err(|e| PricingError::InvalidMarket(e.to_string()))?;
    let mut returns = Vec::with_capacity(model.steps());
    for step in 0..model.steps() {
        let dt = model.dt(step);
        let da = model.delta_a(step);
        let phi = model.kernel(step);
        let comp: T = match market.convention {
            ReturnConvention::Compensated => {
                market.jump_sizes.iter().zip(phi).map(|(b, p)| *b * *p * da).sum()
            }
            ReturnConvention::Raw => T::zero(),
        };
        let r: Vec<T> = tree
            .outcomes()
            .iter()
            .map(|o| {
                let dw = match o.brownian {
                    Some(Move::Up) => dt.sqrt(),
                    Some(Move::Down) => -dt.sqrt(),
                    None => T::zero(),
                };
                let jump = match o.jump {
                    Jump::Mark(e) => market.jump_sizes[e],
                    Jump::None => T::zero(),
                };
                market.drift * dt + market.sigma * dw + jump - comp
            })
            .collect();
        if let Some(f) = r.iter().map(|x| T::one() + *x).find(|f| !(*f > T::zero())) {
            return Err(PricingError::PricePositivityViolated { step, factor: f.as_f64() });
        }
        returns.push(r);
    }
    let mut price = vec![market.s0; tree.len()];
    for (depth, step) in returns.iter().enumerate() {
        for id in tree.level(depth) {
            for (slot, c) in tree.children(id).enumerate() {
                price[c] = price[id] * (T::one() + step[slot]);
            }
        }
    }
    let price = NodeField::new(&tree, Domain::All, price).map_err(SolverError::from)?;
    Ok(MarketTree { tree, price, market: market.clone(), returns })
}

/// `min_{π∈C} (1/α̃) ln Σ_c p_c exp(α̃(Y_c − πR_c))`; the control is the
/// optimal position.
#[derive(Debug, Clone)]
pub struct IndifferenceDriver<T> {
    alpha: T,
    constraint: ConstraintSet<T>,
    returns: Vec<Vec<T>>,
}

impl<T: Scalar> IndifferenceDriver<T> {
    pub fn new(mt: &MarketTree<T>) -> Self {
        Self { alpha: mt.market.risk_aversion, constraint: mt.market.constraint.clone(), returns: mt.returns.clone() }
    }

    /// Certainty equivalent of the child values for position `pi`.
    pub fn objective(&self, step: usize, probs: &[T], children: &[T], pi: T) -> T {
        let a = self.alpha;
        let exps: Vec<T> = children.iter().zip(&self.returns[step]).map(|(y, r)| a * (*y - pi * *r)).collect();
        log_sum_exp(probs, &exps) / a
    }
}

impl<T: Scalar> Driver<T> for IndifferenceDriver<T> {
    fn step(&self, input: &StepInput<'_, T>) -> Result<StepResult<T>, SolverError> {
        let p = input.project();
        let (pi, c) = self.constraint.minimize(|pi| self.objective(input.step, input.probs, input.children, pi));
        if !c.is_finite() {
            return Err(SolverError::NonFinite { node: input.node });
        }
        Ok(StepResult { continuation: c, increment: c - p.ybar, u: p.u, z: p.z, iterations: 0, control: Some(pi) })
    }

    fn describe(&self) -> String {
        format!("indifference(α̃={})", self.alpha)
    }
}

/// `f(z, u) = min_{π∈C} [α̃/2 |πσ − (z + θ/α̃)|² + (1/α̃) j_α̃(u − πβ)] − θz − θ²/(2α̃)`.
///
/// Over a step the quadratic term rides `Δt` and the jump term rides `ΔA`.
/// Convex in `(z, u)` when `C` is an interval or a single point; the minimum
/// over a grid with several points is generally not convex.
#[derive(Debug, Clone)]
pub struct PricingGenerator<T> {
    alpha: T,
    sigma: T,
    theta: T,
    beta: Vec<T>,
    constraint: ConstraintSet<T>,
    growth: Growth<T>,
}

impl<T: Scalar> PricingGenerator<T> {
    pub fn new(market: &MarketModel<T>) -> Result<Self, PricingError> {
        if let ConstraintSet::Grid(p) = &market.constraint {
            if p.is_empty() {
                return Err(PricingError::EmptyConstraintSet);
            }
        }
        let a = market.risk_aversion;
        let theta = market.theta();
        let convexity = if market.constraint.is_convex() { Convexity::Convex } else { Convexity::None };
        let extreme = match &market.constraint {
            ConstraintSet::Grid(p) => p.iter().map(|x| x.abs()).fold(T::zero(), T::max),
            ConstraintSet::Interval(lo, hi) => lo.abs().max(hi.abs()),
        };
        let c0 = market
            .jump_sizes
            .iter()
            .map(|b| ((a * extreme * b.abs()).exp() - T::one()).abs())
            .fold(T::zero(), T::max);
        let growth = Growth {
            lambda: a,
            beta: T::zero(),
            beta_tilde: T::zero(),
            alpha: Alpha::Constant(theta * theta / a),
            c0,
            convexity,
        };
        Ok(Self { alpha: a, sigma: market.sigma, theta, beta: market.jump_sizes.clone(), constraint: market.constraint.clone(), growth })
    }

    fn weighted(&self, z: T, u: &[T], phi: &[T], w_dt: T, w_da: T) -> (T, T) {
        let a = self.alpha;
        let target = z + self.theta / a;
        let mut shifted = vec![T::zero(); u.len()];
        self.constraint.minimize(|pi| {
            let d = pi * self.sigma - target;
            for ((s, ue), b) in shifted.iter_mut().zip(u).zip(&self.beta) {
                *s = *ue - pi * *b;
            }
            a * T::half() * d * d * w_dt + j_lambda_unchecked(a, &shifted, phi) / a * w_da
        })
    }

    /// Minimizing position at `(z, u)`.
    pub fn argmin(&self, z: T, u: &[T], phi: &[T]) -> T {
        self.weighted(z, u, phi, T::one(), T::one()).0
    }
}

impl<T: Scalar> Generator<T> for PricingGenerator<T> {
    fn eval(&self, _step: usize, _y: T, z: T, u: &[T], phi: &[T]) -> Result<T, GeneratorError> {
        if u.len() != phi.len() || u.len() != self.beta.len() {
            return Err(GeneratorError::LengthMismatch { u: u.len(), phi: phi.len() });
        }
        let (_, m) = self.weighted(z, u, phi, T::one(), T::one());
        Ok(m - self.theta * z - self.theta * self.theta / (T::two() * self.alpha))
    }

    fn increment(&self, _step: usize, _y: T, z: T, u: &[T], phi: &[T], delta_a: T, dt: T) -> Result<T, GeneratorError> {
        if u.len() != phi.len() || u.len() != self.beta.len() {
            return Err(GeneratorError::LengthMismatch { u: u.len(), phi: phi.len() });
        }
        let (_, m) = self.weighted(z, u, phi, dt, delta_a);
        Ok(m - (self.theta * z + self.theta * self.theta / (T::two() * self.alpha)) * dt)
    }

    fn growth(&self) -> &Growth<T> {
        &self.growth
    }

    fn name(&self) -> String {
        format!("pricing(α̃={})", self.alpha)
    }

    fn uses_z(&self) -> bool {
        self.sigma > T::zero()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriceSolution<T> {
    pub solution: RbsdeSolution<T>,
    /// Optimal position per internal node.
    pub strategy: Vec<T>,
}

impl<T: Scalar> PriceSolution<T> {
    pub fn y(&self) -> &NodeField<T> {
        &self.solution.y
    }

    pub fn root(&self) -> T {
        self.solution.root_y()
    }
}

fn check_claim<T: Scalar>(mt: &MarketTree<T>, claim: &NodeField<T>, domain: Domain) -> Result<(), PricingError> {
    if claim.domain() != domain {
        return Err(PricingError::InvalidMarket(format!("claim must be a {domain:?} field")));
    }
    if claim.values().len() != NodeField::constant(&mt.tree, domain, T::zero()).map_err(SolverError::from)?.values().len() {
        return Err(PricingError::InvalidMarket("claim does not match the tree".into()));
    }
    Ok(())
}

/// Indifference price `Y` of a European claim `B` with the optimal hedge.
pub fn european_price<T: Scalar>(mt: &MarketTree<T>, claim: &NodeField<T>) -> Result<PriceSolution<T>, PricingError> {
    check_claim(mt, claim, Domain::Leaves)?;
    let driver = IndifferenceDriver::new(mt);
    let solution = rbsde_solve(&mt.tree, &driver, claim, &Obstacle::inactive(&mt.tree))?;
    let strategy = solution.control.clone().unwrap_or_default();
    Ok(PriceSolution { solution, strategy })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmericanSolution<T> {
    pub price: PriceSolution<T>,
    pub european: PriceSolution<T>,
    /// First hitting time of `{Y^A = ξ}` from the root.
    pub exercise: StoppingRule,
    /// Per node: whether `Y^A = ξ` there (leaves included).
    pub exercise_flag: Vec<bool>,
}

/// American claim with payoff `ξ_t` on every node (`ξ_T = B` at leaves).
pub fn american_price<T: Scalar>(mt: &MarketTree<T>, payoff: &NodeField<T>) -> Result<AmericanSolution<T>, PricingError> {
    check_claim(mt, payoff, Domain::All)?;
    let tree = &mt.tree;
    let terminal = NodeField::from_fn(tree, Domain::Leaves, |id| payoff.at(id)).map_err(SolverError::from)?;
    let obstacle = Obstacle::from_field(payoff).map_err(SolverError::from)?;
    let driver = IndifferenceDriver::new(mt);
    let solution = rbsde_solve(tree, &driver, &terminal, &obstacle)?;
    let strategy = solution.control.clone().unwrap_or_default();
    let european = european_price(mt, &terminal)?;
    let tol = T::lit(HITTING_TOL);
    let exercise_flag: Vec<bool> =
        (0..tree.len()).map(|id| tree.is_leaf(id) || solution.y.at(id) - payoff.at(id) <= tol).collect();
    let exercise = StoppingRule::new(tree, exercise_flag.clone())?;
    Ok(AmericanSolution { price: PriceSolution { solution, strategy }, european, exercise, exercise_flag })
}

/// Per step: lowest price among exercise nodes and highest among
/// continuation nodes (internal steps only).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryRow<T> {
    pub step: usize,
    pub t: T,
    pub min_exercised: Option<T>,
    pub max_continued: Option<T>,
}

pub fn exercise_boundary<T: Scalar>(mt: &MarketTree<T>, am: &AmericanSolution<T>) -> Vec<BoundaryRow<T>> {
    let tree = &mt.tree;
    (0..tree.depth())
        .map(|step| {
            let mut min_ex: Option<T> = None;
            let mut max_co: Option<T> = None;
            for id in tree.level(step) {
                let s = mt.price.at(id);
                if am.exercise_flag[id] {
                    min_ex = Some(min_ex.map_or(s, |m| m.min(s)));
                } else {
                    max_co = Some(max_co.map_or(s, |m| m.max(s)));
                }
            }
            BoundaryRow { step, t: tree.model().time(step), min_exercised: min_ex, max_continued: max_co }
        })
        .collect()
}

/// `E[−exp(−α̃(x + Σ π·R − B))]` for a node-indexed strategy.
pub fn expected_utility<T: Scalar>(mt: &MarketTree<T>, strategy: &[T], claim: &NodeField<T>, x: T) -> T {
    let tree = &mt.tree;
    let mut gain = vec![T::zero(); tree.len()];
    for depth in 0..tree.depth() {
        let r = &mt.returns[depth];
        for id in tree.level(depth) {
            for (slot, c) in tree.children(id).enumerate() {
                gain[c] = gain[id] + strategy[id] * r[slot];
            }
        }
    }
    let a = mt.market.risk_aversion;
    tree.leaves()
        .map(|id| -tree.node(id).path_prob * (-a * (x + gain[id] - claim.at(id))).exp())
        .sum()
}

/// `−exp(−α̃(x − Y))`.
pub fn utility_from_price<T: Scalar>(alpha: T, x: T, y: T) -> T {
    -(-alpha * (x - y)).exp()
}

/// Price recovered from a value: `x + ln(−V)/α̃`.
pub fn price_from_utility<T: Scalar>(alpha: T, x: T, v: T) -> T {
    x + (-v).ln() / alpha
}

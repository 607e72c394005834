//! Runtime verdicts on solved instances: comparison, exponential bounds on
//! `Y`, moment ratios for `U` and `K`, and truncation stability.
//!
//! Every theorem check first tests its hypotheses; when one fails the verdict
//! is [`Verdict::NotApplicable`] naming it, so that a failure always means
//! the conclusion was violated.

use std::fmt;

use crate::generator::{growth_envelope_at, Convexity, Generator, ENVELOPE_TOL};
use crate::mpp::{NodeField, ScenarioTree};
use crate::scalar::{log_sum_exp, Scalar};
use crate::solver::{approximation_ladder, LadderMode, Obstacle, RbsdeSolution, Scheme};

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Pass,
    Fail,
    Informational,
    NotApplicable(String),
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Informational => "info",
            Verdict::NotApplicable(_) => "not_applicable",
        }
    }

    pub fn is_fail(&self) -> bool {
        matches!(self, Verdict::Fail)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::NotApplicable(why) => write!(f, "not_applicable({why})"),
            other => f.write_str(other.label()),
        }
    }
}

/// Left and right side of an inequality at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckEntry {
    pub node: usize,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub check: String,
    pub instance_id: String,
    pub entries: Vec<CheckEntry>,
    /// Smallest `rhs − lhs` (in the check's own scale); `NaN` when not
    /// applicable.
    pub worst_margin: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
    pub detail: String,
}

impl CheckReport {
    fn from_entries(check: &str, entries: Vec<CheckEntry>, tolerance: f64, detail: String) -> Self {
        let worst = entries.iter().map(|e| e.rhs - e.lhs).fold(f64::INFINITY, f64::min);
        let worst = if entries.is_empty() { 0.0 } else { worst };
        let verdict = if worst >= -tolerance { Verdict::Pass } else { Verdict::Fail };
        Self { check: check.into(), instance_id: String::new(), entries, worst_margin: worst, tolerance, verdict, detail }
    }

    fn not_applicable(check: &str, why: String) -> Self {
        Self {
            check: check.into(),
            instance_id: String::new(),
            entries: Vec::new(),
            worst_margin: f64::NAN,
            tolerance: 0.0,
            verdict: Verdict::NotApplicable(why.clone()),
            detail: why,
        }
    }

    pub fn with_instance(mut self, id: impl Into<String>) -> Self {
        self.instance_id = id.into();
        self
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} {:<10} {:<16} worst_margin={:+.3e} tol={:.0e}",
            self.check,
            self.instance_id,
            self.verdict.to_string(),
            self.worst_margin,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, "  {}", self.detail)?;
        }
        Ok(())
    }
}

/// One side of a comparison: its data, driver and solution.
pub struct Side<'a, T: Scalar> {
    pub solution: &'a RbsdeSolution<T>,
    pub gen: &'a dyn Generator<T>,
    pub terminal: &'a NodeField<T>,
    pub obstacle: &'a Obstacle<T>,
}

pub const COMPARISON_TOL: f64 = 1e-10;

/// Which side carries the structural hypotheses, and where `Δf = f − f̂` is
/// sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Case {
    /// `f` structured, `Δf` at `(Ŷ, Û)`.
    Lower,
    /// `f̂` structured, `Δf` at `(Y, U)`.
    Upper,
}

fn envelope_ok<T: Scalar>(tree: &ScenarioTree<T>, gen: &dyn Generator<T>, points: &[&RbsdeSolution<T>]) -> bool {
    let convexity = gen.growth().convexity;
    let tol = T::lit(ENVELOPE_TOL);
    for sol in points {
        for id in 0..tree.n_internal() {
            let step = tree.node(id).depth;
            let phi = tree.model().kernel(step);
            let z = sol.z.as_ref().map_or(T::zero(), |z| z.at(id));
            for y in [sol.y.at(id), sol.continuation.at(id)] {
                let Ok(env) = growth_envelope_at(gen, step, Some(id), y, z, sol.u.row(id), phi) else {
                    return false;
                };
                let ok = match convexity {
                    Convexity::Convex => env.value <= env.upper + tol,
                    Convexity::Concave => env.value >= env.lower - tol,
                    Convexity::None => false,
                };
                if !ok {
                    return false;
                }
            }
        }
    }
    true
}

fn delta_f_ok<T: Scalar>(
    tree: &ScenarioTree<T>,
    f: &dyn Generator<T>,
    f_hat: &dyn Generator<T>,
    at: &RbsdeSolution<T>,
) -> Result<(), String> {
    for id in 0..tree.n_internal() {
        let step = tree.node(id).depth;
        let phi = tree.model().kernel(step);
        let z = at.z.as_ref().map_or(T::zero(), |z| z.at(id));
        for y in [at.y.at(id), at.continuation.at(id)] {
            let u = at.u.row(id);
            let (a, b) = match (f.eval(step, y, z, u, phi), f_hat.eval(step, y, z, u, phi)) {
                (Ok(a), Ok(b)) => (a, b),
                _ => return Err(format!("generator evaluation failed at node {id}")),
            };
            if a - b > T::lit(1e-12) {
                return Err(format!("Δf = {} > 0 at node {id}", (a - b).as_f64()));
            }
        }
    }
    Ok(())
}

/// `Y ≤ Ŷ` at every node, given `ξ ≤ ξ̂`, `L ≤ L̂` and the generator
/// hypotheses of either case.
pub fn comparison_check<T: Scalar>(tree: &ScenarioTree<T>, lower: &Side<'_, T>, upper: &Side<'_, T>) -> CheckReport {
    const NAME: &str = "comparison";
    for id in tree.leaves() {
        if lower.terminal.at(id) > upper.terminal.at(id) {
            return CheckReport::not_applicable(NAME, format!("ξ > ξ̂ at leaf {id}"));
        }
    }
    for id in 0..tree.len() {
        if let Some(l) = lower.obstacle.at(id) {
            match upper.obstacle.at(id) {
                Some(lh) if l <= lh => {}
                _ => return CheckReport::not_applicable(NAME, format!("L > L̂ at node {id}")),
            }
        }
    }
    let mut reasons = Vec::new();
    let mut case = None;
    for c in [Case::Lower, Case::Upper] {
        let (structured, sample_at) = match c {
            Case::Lower => (lower.gen, upper.solution),
            Case::Upper => (upper.gen, lower.solution),
        };
        let growth = structured.growth();
        if growth.convexity == Convexity::None {
            reasons.push(format!("{c:?}: generator neither convex nor concave"));
            continue;
        }
        if !envelope_ok(tree, structured, &[lower.solution, upper.solution]) {
            reasons.push(format!("{c:?}: envelope violated"));
            continue;
        }
        if let Err(e) = delta_f_ok(tree, lower.gen, upper.gen, sample_at) {
            reasons.push(format!("{c:?}: {e}"));
            continue;
        }
        case = Some(c);
        break;
    }
    let Some(case) = case else {
        return CheckReport::not_applicable(NAME, reasons.join("; "));
    };
    let entries = (0..tree.len())
        .map(|id| CheckEntry { node: id, lhs: lower.solution.y.at(id).as_f64(), rhs: upper.solution.y.at(id).as_f64() })
        .collect();
    let case = match case {
        Case::Lower => "hypotheses on f, Δf at (Ŷ, Û)",
        Case::Upper => "hypotheses on f̂, Δf at (Y, U)",
    };
    CheckReport::from_entries(NAME, entries, COMPARISON_TOL, case.into())
}

/// Compensator clock for the right-hand side of the `Y` bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundClock {
    /// The model's `ΔA`.
    Model,
    /// `−ln(1 − ΔA)`, the clock of the continuous-time step embedding used by
    /// [`Scheme::Exact`].
    Embedded,
}

impl BoundClock {
    /// Clock under which the bound is guaranteed for solutions of `scheme`;
    /// [`BoundClock::Model`] is never looser.
    pub fn for_scheme(scheme: Scheme) -> Self {
        match scheme {
            Scheme::Exact => BoundClock::Embedded,
            _ => BoundClock::Model,
        }
    }

    fn increment<T: Scalar>(self, da: T) -> T {
        match self {
            BoundClock::Model => da,
            BoundClock::Embedded => -(-da).ln_1p(),
        }
    }
}

pub const Y_BOUND_TOL: f64 = 1e-9;

/// `exp(pλ|Y_t|) ≤ E_t[exp(pλe^{βA_T}(|ξ| ∨ L_*⁺) + pλΣ_{s≥t} e^{βA_{s+1}}α_sΔA_s)]`
/// at every node, with `L_*` the maximum of `L` over the whole path. The
/// comparison is made in log scale; the margin is
/// `ln RHS + ln(1 + 1e-9) − pλ|y|`, so the check passes iff the margin is
/// nonnegative.
pub fn y_exponential_bound<T: Scalar>(
    tree: &ScenarioTree<T>,
    solution: &RbsdeSolution<T>,
    gen: &dyn Generator<T>,
    terminal: &NodeField<T>,
    obstacle: &Obstacle<T>,
    p: T,
    clock: BoundClock,
) -> CheckReport {
    const NAME: &str = "y_exponential_bound";
    let model = tree.model();
    let g = gen.growth();
    let tol = T::lit(ENVELOPE_TOL);
    for id in 0..tree.n_internal() {
        let step = tree.node(id).depth;
        let z = solution.z.as_ref().map_or(T::zero(), |z| z.at(id));
        for y in [solution.y.at(id), solution.continuation.at(id)] {
            match growth_envelope_at(gen, step, Some(id), y, z, solution.u.row(id), model.kernel(step)) {
                Ok(env) if env.value <= env.upper + tol && env.value >= env.lower - tol => {}
                Ok(_) => return CheckReport::not_applicable(NAME, format!("envelope violated at node {id}")),
                Err(e) => return CheckReport::not_applicable(NAME, e.to_string()),
            }
        }
    }
    if !g.alpha.is_finite() {
        return CheckReport::not_applicable(NAME, "α is infinite".into());
    }
    let pl = p * g.lambda;
    let mut clock_a = vec![T::zero(); model.steps() + 1];
    for i in 0..model.steps() {
        clock_a[i + 1] = clock_a[i] + clock.increment(model.delta_a(i));
    }
    let a_t = clock_a[model.steps()];
    // forward: α-integral up to each node, running max of L⁺
    let mut alpha_sum = vec![T::zero(); tree.len()];
    let mut l_max = vec![T::zero(); tree.len()];
    l_max[0] = obstacle.at(0).map_or(T::zero(), T::pos);
    for depth in 0..tree.depth() {
        let w = (g.beta * clock_a[depth + 1]).exp() * clock.increment(model.delta_a(depth));
        for id in tree.level(depth) {
            let a = g.alpha.at(depth, Some(id)).max(T::zero());
            for c in tree.children(id) {
                alpha_sum[c] = alpha_sum[id] + a * w;
                l_max[c] = l_max[id].max(obstacle.at(c).map_or(T::zero(), T::pos));
            }
        }
    }
    let scale = (g.beta * a_t).exp();
    let mut log_e = vec![T::zero(); tree.len()];
    for id in tree.leaves() {
        log_e[id] = pl * (scale * terminal.at(id).abs().max(l_max[id]) + alpha_sum[id]);
    }
    for depth in (0..tree.depth()).rev() {
        let probs = tree.branch_probs(depth);
        for id in tree.level(depth) {
            log_e[id] = log_sum_exp(probs, &log_e[tree.children(id)]);
        }
    }
    let slack = T::lit(Y_BOUND_TOL).ln_1p();
    let entries = (0..tree.len())
        .map(|id| CheckEntry {
            node: id,
            lhs: (pl * solution.y.at(id).abs()).as_f64(),
            rhs: (log_e[id] - pl * alpha_sum[id] + slack).as_f64(),
        })
        .collect();
    let clock_name = match clock {
        BoundClock::Model => "ΔA",
        BoundClock::Embedded => "−ln(1−ΔA)",
    };
    CheckReport::from_entries(NAME, entries, 0.0, format!("p = {p}, clock {clock_name}"))
}

/// Exact tree moments behind the `U`/`K` estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UkMoments {
    /// `E[(Σ_i Σ_e |u|²φΔA)^{p/2}]`.
    pub m_u: f64,
    /// `E[K_T^p]`.
    pub m_k: f64,
    /// `ln E[exp(36pλ(1 + βA_T)·Y_*)]`.
    pub log_r: f64,
    /// `(M_U + M_K)/R`.
    pub ratio: f64,
}

pub fn uk_moments<T: Scalar>(
    tree: &ScenarioTree<T>,
    solution: &RbsdeSolution<T>,
    gen: &dyn Generator<T>,
    p: T,
) -> UkMoments {
    let model = tree.model();
    let g = gen.growth();
    let mut qv = vec![T::zero(); tree.len()];
    let mut k = vec![T::zero(); tree.len()];
    let mut ystar = vec![T::zero(); tree.len()];
    ystar[0] = solution.y.at(0).abs();
    for depth in 0..tree.depth() {
        let phi = model.kernel(depth);
        let da = model.delta_a(depth);
        for id in tree.level(depth) {
            let q: T = solution.u.row(id).iter().zip(phi).map(|(u, f)| *u * *u * *f * da).sum();
            for c in tree.children(id) {
                qv[c] = qv[id] + q;
                k[c] = k[id] + solution.dk.at(id);
                ystar[c] = ystar[id].max(solution.y.at(c).abs());
            }
        }
    }
    let half_p = p * T::half();
    let leaves: Vec<usize> = tree.leaves().collect();
    let probs: Vec<T> = leaves.iter().map(|&id| tree.node(id).path_prob).collect();
    let m_u: T = leaves.iter().zip(&probs).map(|(&id, w)| *w * qv[id].powf(half_p)).sum();
    let m_k: T = leaves.iter().zip(&probs).map(|(&id, w)| *w * k[id].powf(p)).sum();
    let c = T::lit(36.0) * p * g.lambda * (T::one() + g.beta * model.a_total());
    let exps: Vec<T> = leaves.iter().map(|&id| c * ystar[id]).collect();
    let log_r = log_sum_exp(&probs, &exps);
    let num = m_u + m_k;
    let ratio = if num == T::zero() { T::zero() } else { (num.ln() - log_r).exp() };
    UkMoments { m_u: m_u.as_f64(), m_k: m_k.as_f64(), log_r: log_r.as_f64(), ratio: ratio.as_f64() }
}

/// Informational report of [`uk_moments`]; with a baseline the verdict is a
/// regression guard `ratio ≤ 2·baseline`.
pub fn uk_moment_report<T: Scalar>(
    tree: &ScenarioTree<T>,
    solution: &RbsdeSolution<T>,
    gen: &dyn Generator<T>,
    p: T,
    baseline: Option<f64>,
) -> CheckReport {
    let m = uk_moments(tree, solution, gen, p);
    let detail = format!("M_U = {:.6e}, M_K = {:.6e}, ln R = {:.6e}, ratio = {:.6e}", m.m_u, m.m_k, m.log_r, m.ratio);
    match baseline {
        None => CheckReport {
            check: "uk_moment_report".into(),
            instance_id: String::new(),
            entries: vec![CheckEntry { node: 0, lhs: m.ratio, rhs: f64::NAN }],
            worst_margin: m.ratio,
            tolerance: 0.0,
            verdict: if m.ratio.is_finite() { Verdict::Informational } else { Verdict::Fail },
            detail,
        },
        Some(b) => {
            let entries = vec![CheckEntry { node: 0, lhs: m.ratio, rhs: 2.0 * b }];
            CheckReport::from_entries("uk_moment_report", entries, 0.0, detail)
        }
    }
}

/// Solves with `ξ`, `L` clamped to `[−n, n]` for each `n`; passes iff the
/// sup-node gap to the unclamped solve is nonincreasing in `n` and vanishes
/// once `n` covers the data.
pub fn truncation_stability<T: Scalar, G: Generator<T> + Clone>(
    tree: &ScenarioTree<T>,
    gen: &G,
    scheme: Scheme,
    terminal: &NodeField<T>,
    obstacle: &Obstacle<T>,
    n_list: &[T],
) -> CheckReport {
    const NAME: &str = "truncation_stability";
    let ladder = match approximation_ladder(tree, gen, scheme, terminal, obstacle, n_list, LadderMode::Truncation) {
        Ok(l) => l,
        Err(e) => return CheckReport::not_applicable(NAME, e.to_string()),
    };
    let range = terminal
        .values()
        .iter()
        .copied()
        .chain((0..tree.len()).filter_map(|id| obstacle.at(id)))
        .map(T::abs)
        .fold(T::zero(), T::max);
    let tol = 1e-12;
    let mut entries = Vec::new();
    for (i, r) in ladder.rungs.iter().enumerate() {
        let gap = r.gap.as_f64();
        if i > 0 {
            entries.push(CheckEntry { node: i, lhs: gap, rhs: ladder.rungs[i - 1].gap.as_f64() });
        }
        if r.n >= range {
            entries.push(CheckEntry { node: i, lhs: gap, rhs: 0.0 });
        }
    }
    let gaps: Vec<String> = ladder.rungs.iter().map(|r| format!("{}:{:.3e}", r.n, r.gap.as_f64())).collect();
    CheckReport::from_entries(NAME, entries, tol, format!("data range {range}, gaps [{}]", gaps.join(", ")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{Entropic, Growth, LinearInU, Shifted};
    use crate::mpp::{build_tree, Domain, MppModel, DEFAULT_NODE_CAP};
    use crate::solver::{bsde_solve, rbsde_solve, GeneratorDriver};

    fn one_step() -> ScenarioTree<f64> {
        let m = MppModel::<f64>::new(vec![0.0, 1.0], vec![0.2], vec![vec![1.0]], false).unwrap();
        build_tree(&m, DEFAULT_NODE_CAP).unwrap()
    }

    #[test]
    fn comparison_reflexive_and_shifted() {
        let t = one_step();
        let gen = LinearInU::constant(0.0, 1);
        let d = GeneratorDriver::exact(gen.clone());
        let xi = NodeField::from_fn(&t, Domain::Leaves, |id| id as f64).unwrap();
        let l = Obstacle::inactive(&t);
        let s = bsde_solve(&t, &d, &xi).unwrap();
        let side = Side { solution: &s, gen: &gen, terminal: &xi, obstacle: &l };
        let r = comparison_check(&t, &side, &side);
        assert!(r.passed());
        assert_eq!(r.worst_margin, 0.0);

        let xi_hat = xi.map(|v| v + 1.0);
        let s_hat = bsde_solve(&t, &d, &xi_hat).unwrap();
        assert!(s_hat.y.values().iter().zip(s.y.values()).all(|(a, b)| (a - b - 1.0).abs() < 1e-14));
        let hat = Side { solution: &s_hat, gen: &gen, terminal: &xi_hat, obstacle: &l };
        assert!(comparison_check(&t, &side, &hat).passed());
        let r = comparison_check(&t, &hat, &side);
        assert!(matches!(r.verdict, Verdict::NotApplicable(_)), "{r}");
    }

    #[test]
    fn comparison_detects_driver_gate() {
        let t = one_step();
        let f = Entropic::new(1.0).unwrap();
        let f_lo = Shifted::new(f.clone(), -0.1);
        let xi = NodeField::from_fn(&t, Domain::Leaves, |id| id as f64 * 0.3).unwrap();
        let l = Obstacle::inactive(&t);
        let s = bsde_solve(&t, &GeneratorDriver::exact(f.clone()), &xi).unwrap();
        let s_lo = bsde_solve(&t, &GeneratorDriver::exact(f_lo.clone()), &xi).unwrap();
        let lo = Side { solution: &s_lo, gen: &f_lo, terminal: &xi, obstacle: &l };
        let hi = Side { solution: &s, gen: &f, terminal: &xi, obstacle: &l };
        assert!(comparison_check(&t, &lo, &hi).passed());
        assert!(matches!(comparison_check(&t, &hi, &lo).verdict, Verdict::NotApplicable(_)));
    }

    #[test]
    fn y_bound_one_step_reflected() {
        let t = one_step();
        let gen = LinearInU::constant(0.0, 1);
        let xi = NodeField::from_fn(&t, Domain::Leaves, |id| if t.node(id).jumps > 0 { 1.0 } else { 0.0 }).unwrap();
        let l = Obstacle::from_fn(&t, |id| (id == 0).then_some(0.5)).unwrap();
        let s = rbsde_solve(&t, &GeneratorDriver::exact(gen.clone()), &xi, &l).unwrap();
        let r = y_exponential_bound(&t, &s, &gen, &xi, &l, 1.0, BoundClock::Model);
        assert!(r.passed(), "{r}");
        let root = r.entries[0];
        assert!((root.lhs - 0.5).abs() < 1e-15);
        let rhs = 0.2 * 1.0_f64.exp() + 0.8 * 0.5_f64.exp();
        assert!((root.rhs - (rhs.ln() + 1e-9)).abs() < 1e-12);
    }

    #[test]
    fn y_bound_refuses_generators_outside_envelope() {
        let t = one_step();
        let mut g = Growth::new(0.1, Convexity::Convex);
        g.alpha = crate::generator::Alpha::Constant(0.0);
        let gen = LinearInU::new(0.0, vec![10.0], vec![0.0], 0.1).unwrap().with_growth(g);
        let xi = NodeField::from_fn(&t, Domain::Leaves, |id| id as f64 * 3.0).unwrap();
        let l = Obstacle::inactive(&t);
        let s = bsde_solve(&t, &GeneratorDriver::implicit(gen.clone()), &xi).unwrap();
        let r = y_exponential_bound(&t, &s, &gen, &xi, &l, 1.0, BoundClock::Model);
        assert!(matches!(r.verdict, Verdict::NotApplicable(_)));
    }

    #[test]
    fn uk_moments_examples() {
        let t = one_step();
        let gen = LinearInU::constant(0.0, 1);
        let zero = NodeField::constant(&t, Domain::Leaves, 0.0).unwrap();
        let s = bsde_solve(&t, &GeneratorDriver::exact(gen.clone()), &zero).unwrap();
        let m = uk_moments(&t, &s, &gen, 2.0);
        assert_eq!((m.m_u, m.m_k, m.ratio), (0.0, 0.0, 0.0));

        let xi = NodeField::from_fn(&t, Domain::Leaves, |id| if t.node(id).jumps > 0 { 1.0 } else { 0.0 }).unwrap();
        let l = Obstacle::from_fn(&t, |id| (id == 0).then_some(0.5)).unwrap();
        let s = rbsde_solve(&t, &GeneratorDriver::exact(gen.clone()), &xi, &l).unwrap();
        let m = uk_moments(&t, &s, &gen, 2.0);
        assert!((m.m_k - 0.09).abs() < 1e-15);
        assert!((m.m_u - 0.2).abs() < 1e-15);
    }

    #[test]
    fn truncation_with_bounded_data() {
        let m = MppModel::<f64>::new(vec![0.0, 0.5, 1.0], vec![0.3, 0.2], vec![vec![0.5, 0.5]; 2], false).unwrap();
        let t = build_tree(&m, DEFAULT_NODE_CAP).unwrap();
        let xi = NodeField::from_fn(&t, Domain::Leaves, |id| 3.0 * (id as f64).sin()).unwrap();
        let l = Obstacle::from_fn(&t, |id| (!t.is_leaf(id)).then_some(-2.5)).unwrap();
        let r = truncation_stability(&t, &Entropic::new(0.5).unwrap(), Scheme::Exact, &xi, &l, &[0.5, 1.0, 2.0, 4.0, 8.0]);
        assert!(r.passed(), "{r}");
    }
}

//! Brute-force references for small trees: every adapted stopping rule for
//! the nonlinear optimal stopping problem, and every strategy field for the
//! utility maximization.

use rayon::prelude::*;

use crate::error::{OracleError, SolverError};
use crate::mpp::{NodeField, ScenarioTree};
use crate::pricing::{expected_utility, MarketTree};
use crate::scalar::Scalar;
use crate::solver::{
    stopping_payoff, Driver, Obstacle, RbsdeSolution, StepInput, StoppingRule, HITTING_TOL,
};

pub const RULE_CAP: u128 = 1 << 20;
pub const STRATEGY_CAP: u128 = 1 << 22;

/// Number of stopping rules on the subtree of `id`: `R(leaf) = 1`,
/// `R(v) = 1 + Π_children R(c)` (stop at `v`, or continue and choose a rule in
/// every child subtree). Saturates at `u128::MAX`.
pub fn rule_count<T: Scalar>(tree: &ScenarioTree<T>, id: usize) -> u128 {
    let depth_left = tree.depth() - tree.node(id).depth;
    let b = tree.branching() as u32;
    let mut r: u128 = 1;
    for _ in 0..depth_left {
        r = match r.checked_pow(b) {
            Some(p) => p.saturating_add(1),
            None => return u128::MAX,
        };
    }
    r
}

fn guard<T: Scalar>(tree: &ScenarioTree<T>, from: usize, cap: u128) -> Result<u128, OracleError> {
    let count = rule_count(tree, from);
    if count > cap {
        return Err(OracleError::EnumerationTooLarge { count, cap });
    }
    Ok(count)
}

/// Decodes rule index `idx` on the subtree of `id` into `stop`. Index 0 stops
/// at `id`; otherwise `idx − 1` is a mixed-radix tuple over the children with
/// the first child least significant.
fn decode<T: Scalar>(tree: &ScenarioTree<T>, id: usize, idx: u128, stop: &mut [bool]) {
    if tree.is_leaf(id) {
        stop[id] = true;
        return;
    }
    if idx == 0 {
        stop[id] = true;
        return;
    }
    stop[id] = false;
    let mut rest = idx - 1;
    for c in tree.children(id) {
        let r = rule_count(tree, c);
        decode(tree, c, rest % r, stop);
        rest /= r;
    }
}

fn blank_rule<T: Scalar>(tree: &ScenarioTree<T>) -> Vec<bool> {
    (0..tree.len()).map(|id| tree.is_leaf(id)).collect()
}

/// All adapted stopping rules on the subtree of `from`, in index order.
/// Outside the subtree the rules stop only at leaves.
pub fn enumerate_stopping_rules<T: Scalar>(
    tree: &ScenarioTree<T>,
    from: usize,
) -> Result<Vec<StoppingRule>, OracleError> {
    enumerate_stopping_rules_capped(tree, from, RULE_CAP)
}

pub fn enumerate_stopping_rules_capped<T: Scalar>(
    tree: &ScenarioTree<T>,
    from: usize,
    cap: u128,
) -> Result<Vec<StoppingRule>, OracleError> {
    let count = guard(tree, from, cap)?;
    let base = blank_rule(tree);
    (0..count)
        .map(|idx| {
            let mut stop = base.clone();
            decode(tree, from, idx, &mut stop);
            StoppingRule::new(tree, stop).map_err(OracleError::from)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnellResult<T> {
    pub value: T,
    pub best_rule: StoppingRule,
    pub rules: u128,
}

/// Values of every rule on the subtree of `id`, in index order.
fn rule_values<T: Scalar, D: Driver<T> + ?Sized>(
    tree: &ScenarioTree<T>,
    driver: &D,
    eta: &[T],
    id: usize,
) -> Result<Vec<T>, SolverError> {
    if tree.is_leaf(id) {
        return Ok(vec![eta[id]]);
    }
    let child_lists = tree
        .children(id)
        .map(|c| rule_values(tree, driver, eta, c))
        .collect::<Result<Vec<_>, _>>()?;
    let radices: Vec<usize> = child_lists.iter().map(Vec::len).collect();
    let combos: usize = radices.iter().product();
    let eval = |mut k: usize| -> Result<T, SolverError> {
        let mut children = Vec::with_capacity(radices.len());
        for (list, r) in child_lists.iter().zip(&radices) {
            children.push(list[k % r]);
            k /= r;
        }
        if children.iter().any(|v| *v == T::neg_infinity()) {
            return Ok(T::neg_infinity());
        }
        Ok(driver.step(&StepInput::new(tree, id, &children))?.continuation)
    };
    let cont: Vec<T> = if combos >= 256 {
        (0..combos).into_par_iter().map(eval).collect::<Result<_, _>>()?
    } else {
        (0..combos).map(eval).collect::<Result<_, _>>()?
    };
    let mut out = Vec::with_capacity(combos + 1);
    out.push(eta[id]);
    out.extend(cont);
    Ok(out)
}

/// `max_τ E^f_{t,τ}[ξ1{τ=T} + L_τ1{τ<T}]` over every adapted stopping rule
/// from `from`. Each rule is evaluated in full (no pruning by the max); the
/// subtree values are shared between rules that agree below a node. Ties go
/// to the lowest rule index, so stopping early wins ties.
pub fn snell_value<T: Scalar, D: Driver<T> + ?Sized>(
    tree: &ScenarioTree<T>,
    driver: &D,
    terminal: &NodeField<T>,
    obstacle: &Obstacle<T>,
    from: usize,
) -> Result<SnellResult<T>, OracleError> {
    snell_value_capped(tree, driver, terminal, obstacle, from, RULE_CAP)
}

pub fn snell_value_capped<T: Scalar, D: Driver<T> + ?Sized>(
    tree: &ScenarioTree<T>,
    driver: &D,
    terminal: &NodeField<T>,
    obstacle: &Obstacle<T>,
    from: usize,
    cap: u128,
) -> Result<SnellResult<T>, OracleError> {
    let rules = guard(tree, from, cap)?;
    let eta = stopping_payoff(tree, terminal, obstacle);
    let values = rule_values(tree, driver, &eta, from)?;
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    let mut stop = blank_rule(tree);
    decode(tree, from, best as u128, &mut stop);
    Ok(SnellResult { value: values[best], best_rule: StoppingRule::new(tree, stop)?, rules })
}

/// `τ* = inf{r ≥ t : Y_r = L_r} ∧ T`, with `Y = L` read to `1e-10`.
pub fn hitting_rule<T: Scalar>(
    tree: &ScenarioTree<T>,
    solution: &RbsdeSolution<T>,
    obstacle: &Obstacle<T>,
    from: usize,
) -> StoppingRule {
    let tol = T::lit(HITTING_TOL);
    let mut stop = blank_rule(tree);
    let mut stack = vec![from];
    while let Some(id) = stack.pop() {
        let hit = tree.is_leaf(id) || obstacle.at(id).is_some_and(|l| solution.y.at(id) - l <= tol);
        stop[id] = hit;
        if !hit {
            stack.extend(tree.children(id));
        }
    }
    StoppingRule::new(tree, stop).expect("leaves stop")
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityOracle<T> {
    /// `sup_π E[−exp(−α̃(x + Σ πR − B))]`.
    pub value: T,
    /// Maximizing position per internal node.
    pub best_strategy: Vec<T>,
    pub strategies: u128,
}

/// Enumerates every strategy field `π: internal nodes → C` and returns the
/// largest expected utility. Ties go to the lowest enumeration index.
pub fn brute_force_utility<T: Scalar>(
    mt: &MarketTree<T>,
    claim: &NodeField<T>,
    x: T,
) -> Result<UtilityOracle<T>, OracleError> {
    brute_force_utility_capped(mt, claim, x, STRATEGY_CAP)
}

pub fn strategy_count<T: Scalar>(mt: &MarketTree<T>) -> Option<u128> {
    let c = mt.market.constraint.len()? as u128;
    let n = u32::try_from(mt.tree.n_internal()).ok()?;
    Some(c.checked_pow(n).unwrap_or(u128::MAX))
}

pub fn brute_force_utility_capped<T: Scalar>(
    mt: &MarketTree<T>,
    claim: &NodeField<T>,
    x: T,
    cap: u128,
) -> Result<UtilityOracle<T>, OracleError> {
    let points = mt.market.constraint.ordered_points().ok_or(OracleError::ContinuousConstraintSet)?;
    let count = strategy_count(mt).ok_or(OracleError::ContinuousConstraintSet)?;
    if count > cap {
        return Err(OracleError::EnumerationTooLarge { count, cap });
    }
    let n_int = mt.tree.n_internal();
    let base = points.len() as u128;
    let strategy_of = |mut idx: u128| -> Vec<T> {
        (0..n_int)
            .map(|_| {
                let p = points[(idx % base) as usize];
                idx /= base;
                p
            })
            .collect()
    };
    let (best_idx, value) = (0..count as u64)
        .into_par_iter()
        .map(|idx| (idx, expected_utility(mt, &strategy_of(idx as u128), claim, x)))
        .reduce(
            || (u64::MAX, T::neg_infinity()),
            |a, b| {
                if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                    b
                } else {
                    a
                }
            },
        );
    Ok(UtilityOracle { value, best_strategy: strategy_of(best_idx as u128), strategies: count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::LinearInU;
    use crate::mpp::{build_tree, Domain, MppModel, DEFAULT_NODE_CAP};
    use crate::solver::{rbsde_solve, GeneratorDriver};

    fn tree(n: usize, k: usize) -> ScenarioTree<f64> {
        let grid = (0..=n).map(|i| i as f64).collect();
        let m = MppModel::<f64>::new(grid, vec![0.2; n], vec![vec![1.0 / k as f64; k]; n], false).unwrap();
        build_tree(&m, DEFAULT_NODE_CAP).unwrap()
    }

    #[test]
    fn rule_counts() {
        assert_eq!(enumerate_stopping_rules(&tree(1, 1), 0).unwrap().len(), 2);
        assert_eq!(enumerate_stopping_rules(&tree(2, 1), 0).unwrap().len(), 5);
        let t = tree(2, 1);
        assert_eq!(enumerate_stopping_rules(&t, t.first_leaf()).unwrap().len(), 1);
        assert_eq!(rule_count(&tree(3, 2), 0), 730);
        assert_eq!(rule_count(&tree(4, 1), 0), 677);
        assert!(matches!(
            enumerate_stopping_rules_capped(&tree(3, 2), 0, 100),
            Err(OracleError::EnumerationTooLarge { count: 730, cap: 100 })
        ));
    }

    #[test]
    fn rules_are_distinct() {
        let t = tree(2, 2);
        let rules = enumerate_stopping_rules(&t, 0).unwrap();
        let set: std::collections::HashSet<Vec<usize>> = rules.iter().map(|r| r.stopping_nodes(&t, 0)).collect();
        assert_eq!(set.len(), rules.len());
    }

    #[test]
    fn one_step_reflected_snell() {
        let t = tree(1, 1);
        let xi = NodeField::from_fn(&t, Domain::Leaves, |id| if t.node(id).jumps > 0 { 1.0 } else { 0.0 }).unwrap();
        let l = Obstacle::from_fn(&t, |id| (id == 0).then_some(0.5)).unwrap();
        let d = GeneratorDriver::exact(LinearInU::constant(0.0, 1));
        let s = snell_value(&t, &d, &xi, &l, 0).unwrap();
        assert_eq!(s.value, 0.5);
        assert!(s.best_rule.stops(0));
        let sol = rbsde_solve(&t, &d, &xi, &l).unwrap();
        assert!(hitting_rule(&t, &sol, &l, 0).stops(0));
        let inactive = Obstacle::inactive(&t);
        let s = snell_value(&t, &d, &xi, &inactive, 0).unwrap();
        assert!((s.value - 0.2).abs() < 1e-15);
        assert_eq!(s.best_rule, StoppingRule::at_leaves(&t));
    }
}

//! Seeded random instances and the property sweeps run over them.
//!
//! Instance `i` of a battery draws from its own ChaCha8 stream (`seed`,
//! stream `i`), so instances are independent of how many are generated and
//! of the thread count.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checks::{comparison_check, y_exponential_bound, BoundClock, CheckReport, Side};
use crate::error::Error;
use crate::generator::{Generator, GeneratorFamily, Shifted};
use crate::mpp::{build_tree, Domain, MppModel, NodeField, ScenarioTree, DEFAULT_NODE_CAP};
use crate::oracle::{brute_force_utility, snell_value, strategy_count, RULE_CAP, STRATEGY_CAP};
use crate::pricing::{
    american_price, build_market_tree, european_price, utility_from_price, ConstraintSet, IndifferenceDriver,
    MarketModel, MarketTree,
};
use crate::solver::{rbsde_solve, GeneratorDriver, Obstacle, RbsdeSolution, Scheme};

/// Streams above this offset are reserved for derived draws (comparison
/// perturbations, markets).
const PAIR_STREAM: u64 = 1 << 32;
const MARKET_STREAM: u64 = 2 << 32;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone)]
pub struct Instance {
    pub id: usize,
    pub family: GeneratorFamily<f64>,
    pub gen: Arc<dyn Generator<f64>>,
    pub tree: ScenarioTree<f64>,
    pub terminal: NodeField<f64>,
    pub obstacle: Obstacle<f64>,
}

impl Instance {
    pub fn tag(&self) -> String {
        format!("i{:03}", self.id)
    }
}

fn random_model(rng: &mut ChaCha8Rng, max_steps: usize, max_marks: usize) -> MppModel<f64> {
    let k = rng.random_range(1..=max_marks);
    // keep the stopping-rule count under the oracle cap
    let n_max = if k >= 2 { max_steps.min(3) } else { max_steps };
    let n = rng.random_range(1..=n_max);
    let grid = (0..=n).map(|i| i as f64 / n as f64).collect();
    let delta_a = (0..n).map(|_| rng.random_range(0.02..=0.4)).collect();
    let kernel = (0..n)
        .map(|_| {
            if k == 1 {
                vec![1.0]
            } else {
                let w = rng.random_range(0.2..0.8);
                vec![w, 1.0 - w]
            }
        })
        .collect();
    MppModel::new(grid, delta_a, kernel, false).expect("sampled model is valid")
}

fn random_family(rng: &mut ChaCha8Rng, marks: usize) -> GeneratorFamily<f64> {
    let lambda = rng.random_range(0.5..=2.0);
    match rng.random_range(0..3) {
        0 => GeneratorFamily::LinearInU {
            a: rng.random_range(-0.5..=0.5),
            c: (0..marks).map(|_| rng.random_range(-0.8..=1.5)).collect(),
            g: (0..marks).map(|_| rng.random_range(-0.5..=0.5)).collect(),
            lambda,
        },
        1 => GeneratorFamily::Entropic { lambda },
        _ => GeneratorFamily::NegEntropic { lambda },
    }
}

/// One battery instance: `N ≤ 4` steps, `K ≤ 2` marks (`N ≤ 3` when
/// `K = 2`), pure-jump.
pub fn random_instance(seed: u64, id: usize) -> Result<Instance, Error> {
    let mut rng = stream_rng(seed, id as u64);
    let model = random_model(&mut rng, 4, 2);
    let family = random_family(&mut rng, model.n_marks());
    let gen = family.build()?;
    let tree = build_tree(&model, DEFAULT_NODE_CAP)?;
    let terminal = NodeField::from_fn(&tree, Domain::Leaves, |_| rng.random_range(-1.5..=1.5))?;
    let obstacle = Obstacle::from_fn(&tree, |id| {
        if tree.is_leaf(id) {
            Some(terminal.at(id) - rng.random_range(0.0..=0.5))
        } else if rng.random_bool(0.75) {
            Some(rng.random_range(-1.5..=1.0))
        } else {
            None
        }
    })?;
    Ok(Instance { id, family, gen, tree, terminal, obstacle })
}

pub fn instances(seed: u64, count: usize) -> Result<Vec<Instance>, Error> {
    (0..count).into_par_iter().map(|i| random_instance(seed, i)).collect()
}

/// Per-instance results of the solver sweeps.
#[derive(Debug, Clone)]
pub struct InstanceRow {
    pub id: usize,
    pub family: &'static str,
    pub steps: usize,
    pub marks: usize,
    pub nodes: usize,
    pub root_y: f64,
    pub snell: f64,
    pub snell_gap: f64,
    pub rules: u128,
    /// `max (y − L)·dk` over nodes with an active obstacle.
    pub flat_off: f64,
    /// `min (y − L)`.
    pub barrier: f64,
    pub residual: f64,
    pub y_bound: Vec<CheckReport>,
    pub comparison: CheckReport,
}

pub fn flat_off_and_barrier(tree: &ScenarioTree<f64>, sol: &RbsdeSolution<f64>, l: &Obstacle<f64>) -> (f64, f64) {
    let mut flat = 0.0_f64;
    let mut barrier = f64::INFINITY;
    for id in 0..tree.len() {
        if let Some(lv) = l.at(id) {
            let gap = sol.y.at(id) - lv;
            barrier = barrier.min(gap);
            if !tree.is_leaf(id) {
                flat = flat.max(gap * sol.dk.at(id));
            }
        }
    }
    (flat, barrier)
}

/// Perturbed upper data for the comparison sweep: `ξ̂ = ξ + δ₁`,
/// `L̂ = L + δ₂` with `δ₂ ≤ δ₁`, and a lower driver `f − δ₃`.
pub struct ComparisonPair {
    pub terminal_hat: NodeField<f64>,
    pub obstacle_hat: Obstacle<f64>,
    pub gen_lower: Shifted<Arc<dyn Generator<f64>>, f64>,
}

pub fn comparison_pair(seed: u64, inst: &Instance) -> ComparisonPair {
    let mut rng = stream_rng(seed, PAIR_STREAM + inst.id as u64);
    let d1 = rng.random_range(0.0..=0.3);
    let d2 = rng.random_range(0.0..=d1);
    let d3 = rng.random_range(0.0..=0.3);
    ComparisonPair {
        terminal_hat: inst.terminal.map(|v| v + d1),
        obstacle_hat: inst.obstacle.map(|v| v + d2),
        gen_lower: Shifted::new(inst.gen.clone(), -d3),
    }
}

pub const Y_BOUND_POWERS: [f64; 3] = [1.0, 2.0, 4.0];

pub fn run_instance(seed: u64, inst: &Instance, scheme: Scheme) -> Result<InstanceRow, Error> {
    let tree = &inst.tree;
    let driver = GeneratorDriver::new(inst.gen.clone(), scheme);
    let sol = rbsde_solve(tree, &driver, &inst.terminal, &inst.obstacle)?;
    let snell = snell_value(tree, &driver, &inst.terminal, &inst.obstacle, 0)?;
    let (flat_off, barrier) = flat_off_and_barrier(tree, &sol, &inst.obstacle);
    let clock = BoundClock::Model;
    let y_bound = Y_BOUND_POWERS
        .iter()
        .map(|&p| {
            y_exponential_bound(tree, &sol, &*inst.gen, &inst.terminal, &inst.obstacle, p, clock)
                .with_instance(inst.tag())
        })
        .collect();

    let pair = comparison_pair(seed, inst);
    let lower_sol = rbsde_solve(tree, &GeneratorDriver::new(&pair.gen_lower, scheme), &inst.terminal, &inst.obstacle)?;
    let upper_sol = rbsde_solve(tree, &driver, &pair.terminal_hat, &pair.obstacle_hat)?;
    let lower = Side { solution: &lower_sol, gen: &pair.gen_lower, terminal: &inst.terminal, obstacle: &inst.obstacle };
    let upper =
        Side { solution: &upper_sol, gen: &*inst.gen, terminal: &pair.terminal_hat, obstacle: &pair.obstacle_hat };
    let comparison = comparison_check(tree, &lower, &upper).with_instance(inst.tag());

    Ok(InstanceRow {
        id: inst.id,
        family: inst.family.tag(),
        steps: tree.depth(),
        marks: tree.model().n_marks(),
        nodes: tree.len(),
        root_y: sol.root_y(),
        snell: snell.value,
        snell_gap: (sol.root_y() - snell.value).abs(),
        rules: snell.rules,
        flat_off,
        barrier,
        residual: sol.pathwise_residual(tree, &inst.terminal),
        y_bound,
        comparison,
    })
}

/// Runs every instance; rows come back in instance order whatever the
/// thread count.
pub fn run_battery(seed: u64, count: usize, scheme: Scheme) -> Result<Vec<InstanceRow>, Error> {
    let insts = instances(seed, count)?;
    insts.par_iter().map(|inst| run_instance(seed, inst, scheme)).collect()
}

/// A random market with its claim: American payoff on every node, the
/// European claim being its leaf restriction.
#[derive(Debug, Clone)]
pub struct MarketInstance {
    pub id: usize,
    pub mt: MarketTree<f64>,
    pub payoff: NodeField<f64>,
    pub claim: NodeField<f64>,
}

/// Either `K = 1` with Brownian branching or `K ≤ 2` pure-jump; `N ≤ 3`,
/// `|C| ≤ 3`, kept within the strategy-enumeration cap.
pub fn random_market(seed: u64, id: usize) -> Result<MarketInstance, Error> {
    let mut rng = stream_rng(seed, MARKET_STREAM + id as u64);
    loop {
        let brownian = rng.random_bool(0.5);
        let k = if brownian { 1 } else { rng.random_range(1..=2) };
        let n = rng.random_range(1..=3);
        let model = {
            let grid = (0..=n).map(|i| i as f64 / n as f64).collect();
            let da = (0..n).map(|_| rng.random_range(0.05..=0.4)).collect();
            let w = rng.random_range(0.3..0.7);
            let kernel = vec![if k == 1 { vec![1.0] } else { vec![w, 1.0 - w] }; n];
            MppModel::new(grid, da, kernel, brownian)?
        };
        let mut points: Vec<f64> = Vec::new();
        let want = rng.random_range(1..=3);
        while points.len() < want {
            let p = (rng.random_range(-8..=8) as f64) * 0.25;
            if !points.contains(&p) {
                points.push(p);
            }
        }
        let (drift, sigma) =
            if brownian { (rng.random_range(-0.2..=0.2), rng.random_range(0.1..=0.3)) } else { (0.0, 0.0) };
        let jumps = (0..k).map(|_| rng.random_range(-0.3..=0.4)).collect();
        let alpha = rng.random_range(0.3..=2.0);
        let market = MarketModel::new(drift, sigma, jumps, ConstraintSet::grid(points)?, alpha, 1.0)?;
        let mt = match build_market_tree(&market, &model, DEFAULT_NODE_CAP) {
            Ok(mt) => mt,
            Err(_) => continue,
        };
        if strategy_count(&mt).is_none_or(|c| c > STRATEGY_CAP) {
            continue;
        }
        let strike = rng.random_range(0.8..=1.2);
        let call = rng.random_bool(0.5);
        let payoff = NodeField::from_fn(&mt.tree, Domain::All, |id| {
            let s = mt.price.at(id);
            if call { (s - strike).max(0.0) } else { (strike - s).max(0.0) }
        })?;
        let claim = NodeField::from_fn(&mt.tree, Domain::Leaves, |id| payoff.at(id))?;
        return Ok(MarketInstance { id, mt, payoff, claim });
    }
}

#[derive(Debug, Clone)]
pub struct MarketRow {
    pub id: usize,
    pub steps: usize,
    pub marks: usize,
    pub brownian: bool,
    pub constraint_points: usize,
    pub alpha: f64,
    pub european: f64,
    pub american: f64,
    /// `(x, oracle sup-utility, −exp(−α̃(x − Y_0)), relative error)`.
    pub utility: Vec<(f64, f64, f64, f64)>,
    /// `min_node (Y^A − Y^E)`.
    pub dominance: f64,
    /// Stopping-rule enumeration of the American value, when within cap.
    pub snell: Option<f64>,
}

pub const UTILITY_WEALTH: [f64; 2] = [0.0, 1.0];

pub fn run_market(mi: &MarketInstance) -> Result<MarketRow, Error> {
    let mt = &mi.mt;
    let tree = &mt.tree;
    let euro = european_price(mt, &mi.claim)?;
    let am = american_price(mt, &mi.payoff)?;
    let alpha = mt.market.risk_aversion;
    let mut utility = Vec::new();
    for &x in &UTILITY_WEALTH {
        let oracle = brute_force_utility(mt, &mi.claim, x)?;
        let identity = utility_from_price(alpha, x, euro.root());
        utility.push((x, oracle.value, identity, ((oracle.value - identity) / oracle.value).abs()));
    }
    let dominance = (0..tree.len())
        .map(|id| am.price.y().at(id) - am.european.y().at(id))
        .fold(f64::INFINITY, f64::min);
    let snell = if crate::oracle::rule_count(tree, 0) <= RULE_CAP {
        let obstacle = Obstacle::from_field(&mi.payoff)?;
        Some(snell_value(tree, &IndifferenceDriver::new(mt), &mi.claim, &obstacle, 0)?.value)
    } else {
        None
    };
    Ok(MarketRow {
        id: mi.id,
        steps: tree.depth(),
        marks: tree.model().n_marks(),
        brownian: tree.model().brownian(),
        constraint_points: mt.market.constraint.len().unwrap_or(0),
        alpha,
        european: euro.root(),
        american: am.price.root(),
        utility,
        dominance,
        snell,
    })
}

pub fn run_markets(seed: u64, count: usize) -> Result<Vec<MarketRow>, Error> {
    (0..count).into_par_iter().map(|i| random_market(seed, i).and_then(|m| run_market(&m))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_are_reproducible_and_stream_independent() {
        let a = random_instance(7, 5).unwrap();
        let b = random_instance(7, 5).unwrap();
        assert_eq!(a.terminal, b.terminal);
        assert_eq!(a.family, b.family);
        let c = random_instance(7, 6).unwrap();
        assert_ne!(a.terminal.values(), c.terminal.values());
    }

    #[test]
    fn small_battery_runs() {
        let rows = run_battery(1, 6, Scheme::Exact).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            assert!(r.snell_gap <= 1e-8, "{r:?}");
            assert!(r.barrier >= 0.0);
        }
    }
}

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use csv::{Reader, Writer};
use mpp_rbsde::battery::run_battery;
use mpp_rbsde::checks::{
    comparison_check, truncation_stability, uk_moment_report, y_exponential_bound, BoundClock, CheckReport, Side,
    Verdict,
};
use mpp_rbsde::export::{self, num};
use mpp_rbsde::generator::{validate_assumptions, Generator, SampleBox, Shifted};
use mpp_rbsde::mpp::{Domain, NodeField};
use mpp_rbsde::oracle::{brute_force_utility, hitting_rule, rule_count, snell_value, strategy_count, RULE_CAP, STRATEGY_CAP};
use mpp_rbsde::pricing::{american_price, build_market_tree, exercise_boundary, utility_from_price, IndifferenceDriver};
use mpp_rbsde::solver::{approximation_ladder, rbsde_solve, GeneratorDriver, Obstacle};

use crate::config::{node_values, Loaded};
use crate::error::CliError;
use crate::output::Output;

/// Relative tolerance of the utility cross-check in `price`.
const UTILITY_TOL: f64 = 1e-6;
const SNELL_TOL: f64 = 1e-8;

pub enum Status {
    Ok,
    CheckFailed(String),
}

pub fn validate(cfg: &Loaded, out: &mut Output) -> Result<Status, CliError> {
    let model = cfg.model()?;
    let tree = cfg.tree(&model)?;
    println!("model: {} steps, {} marks, {} nodes", model.steps(), model.n_marks(), tree.len());
    if cfg.config.generator.is_some() {
        let gen = cfg.generator(model.n_marks())?;
        let seed = cfg.require_seed()?;
        let report = validate_assumptions(&*gen, &model, cfg.config.run.samples, SampleBox { seed, ..Default::default() });
        print!("{report}");
        out.write("assumptions.csv", |buf| {
            let mut w = Writer::from_writer(buf);
            w.write_record(["check", "verdict", "worst", "detail"])?;
            for c in &report.checks {
                w.write_record([c.name.to_string(), c.verdict.to_string(), num(c.worst), c.detail.clone()])?;
            }
            w.flush()?;
            Ok(())
        })?;
    }
    if cfg.config.data.terminal.is_some() {
        cfg.terminal(&tree, None)?;
        cfg.obstacle(&tree, None)?;
        println!("data: terminal and obstacle evaluate on every node");
    }
    if let Some(m) = &cfg.config.market {
        let market = cfg.market()?;
        let mt = build_market_tree(&market, &model, cfg.cap_nodes)?;
        node_values(&m.payoff, &mt.tree, Domain::All, Some(&mt.price), "market.payoff")?;
        println!("market: valid, θ = {}", market.theta());
    }
    Ok(Status::Ok)
}

pub fn solve(cfg: &Loaded, out: &mut Output, dump_tree: bool) -> Result<Status, CliError> {
    let model = cfg.model()?;
    let tree = cfg.tree(&model)?;
    let gen = cfg.generator(model.n_marks())?;
    let xi = cfg.terminal(&tree, None)?;
    let l = cfg.obstacle(&tree, None)?;
    let sol = rbsde_solve(&tree, &GeneratorDriver::new(gen, cfg.scheme()?), &xi, &l)?;
    if dump_tree {
        out.write("tree.csv", |buf| export::write_tree(buf, &tree))?;
    }
    out.write("solution.csv", |buf| export::write_solution(buf, &tree, &sol, &l))?;
    println!("root y = {}", num(sol.root_y()));
    println!("max flat-off = {:e}, min barrier gap = {:e}", sol.diagnostics.max_flat_off, sol.diagnostics.min_barrier_gap);
    Ok(Status::Ok)
}

pub fn snell(cfg: &Loaded, out: &mut Output) -> Result<Status, CliError> {
    let model = cfg.model()?;
    let tree = cfg.tree(&model)?;
    let gen = cfg.generator(model.n_marks())?;
    let xi = cfg.terminal(&tree, None)?;
    let l = cfg.obstacle(&tree, None)?;
    let driver = GeneratorDriver::new(gen, cfg.scheme()?);
    let sol = rbsde_solve(&tree, &driver, &xi, &l)?;
    let snell = snell_value(&tree, &driver, &xi, &l, 0)?;
    out.write("oracle.csv", |buf| export::write_oracle(buf, &tree, &snell, sol.root_y()))?;
    let hit = hitting_rule(&tree, &sol, &l, 0);
    let gap = (snell.value - sol.root_y()).abs();
    println!("rules = {}, snell = {}, solver = {}, gap = {gap:e}", snell.rules, num(snell.value), num(sol.root_y()));
    println!("first hitting time stops at {:?}", hit.stopping_nodes(&tree, 0));
    if gap > SNELL_TOL {
        return Ok(Status::CheckFailed(format!("solver and stopping-rule enumeration differ by {gap:e}")));
    }
    Ok(Status::Ok)
}

pub fn check(cfg: &Loaded, out: &mut Output) -> Result<Status, CliError> {
    let model = cfg.model()?;
    let tree = cfg.tree(&model)?;
    let gen = cfg.generator(model.n_marks())?;
    let scheme = cfg.scheme()?;
    let xi = cfg.terminal(&tree, None)?;
    let l = cfg.obstacle(&tree, None)?;
    let run = &cfg.config.run;
    let sol = rbsde_solve(&tree, &GeneratorDriver::new(gen.clone(), scheme), &xi, &l)?;
    let mut reports: Vec<CheckReport> = Vec::new();
    let mut margins: Vec<(f64, CheckReport)> = Vec::new();
    for name in &run.checks {
        match name.as_str() {
            "comparison" => {
                let c = cfg.config.compare.clone().unwrap_or_default();
                let gen_hat: Arc<dyn Generator<f64>> = Arc::new(Shifted::new(gen.clone(), c.generator_shift));
                let xi_hat = xi.map(|v| v + c.terminal_shift);
                let l_hat = l.map(|v| v + c.obstacle_shift);
                let sol_hat = rbsde_solve(&tree, &GeneratorDriver::new(gen_hat.clone(), scheme), &xi_hat, &l_hat)?;
                let lower = Side { solution: &sol, gen: &*gen, terminal: &xi, obstacle: &l };
                let upper = Side { solution: &sol_hat, gen: &*gen_hat, terminal: &xi_hat, obstacle: &l_hat };
                reports.push(comparison_check(&tree, &lower, &upper).with_instance("config"));
            }
            "y_bound" => {
                for &p in &run.p {
                    let r = y_exponential_bound(&tree, &sol, &*gen, &xi, &l, p, BoundClock::Model).with_instance("config");
                    margins.push((p, r.clone()));
                    reports.push(r);
                }
            }
            "uk" => {
                for &p in &run.p {
                    reports.push(uk_moment_report(&tree, &sol, &*gen, p, run.uk_baseline).with_instance("config"));
                }
            }
            "truncation" => {
                reports.push(truncation_stability(&tree, &gen, scheme, &xi, &l, &run.n_list).with_instance("config"));
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown check {other:?} (expected comparison, y_bound, uk or truncation)"
                )))
            }
        }
    }
    if run.battery > 0 {
        let rows = run_battery(cfg.require_seed()?, run.battery, scheme)?;
        out.write("battery.csv", |buf| export::write_battery(buf, &rows))?;
        for r in rows {
            reports.extend(r.y_bound);
            reports.push(r.comparison);
        }
    }
    out.write("checks.csv", |buf| export::write_checks(buf, &reports))?;
    if !margins.is_empty() {
        out.write("bound_margins.csv", |buf| write_margins(buf, &margins))?;
    }
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<String> =
        reports.iter().filter(|r| r.verdict == Verdict::Fail).map(|r| format!("{}/{}", r.check, r.instance_id)).collect();
    if failed.is_empty() {
        Ok(Status::Ok)
    } else {
        Ok(Status::CheckFailed(format!("{} failing verdicts: {}", failed.len(), failed.join(", "))))
    }
}

fn write_margins<W: Write>(w: W, margins: &[(f64, CheckReport)]) -> Result<(), csv::Error> {
    let mut out = Writer::from_writer(w);
    out.write_record(["p", "node", "lhs", "rhs", "margin"])?;
    for (p, r) in margins {
        for e in &r.entries {
            out.write_record([num(*p), e.node.to_string(), num(e.lhs), num(e.rhs), num(e.rhs - e.lhs)])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn ladder(cfg: &Loaded, out: &mut Output) -> Result<Status, CliError> {
    let model = cfg.model()?;
    let tree = cfg.tree(&model)?;
    let gen = cfg.generator(model.n_marks())?;
    let xi = cfg.terminal(&tree, None)?;
    let l = cfg.obstacle(&tree, None)?;
    let lad = approximation_ladder(&tree, &gen, cfg.scheme()?, &xi, &l, &cfg.config.run.n_list, cfg.ladder_mode())?;
    out.write("ladder.csv", |buf| export::write_ladder(buf, &lad))?;
    println!("direct root y = {}", num(lad.direct.root_y()));
    for r in &lad.rungs {
        println!("n = {:<8} root y = {:<24} gap = {:e}", num(r.n), num(r.root_y), r.gap);
    }
    println!("root nondecreasing: {}", lad.root_nondecreasing());
    Ok(Status::Ok)
}

pub fn price(cfg: &Loaded, out: &mut Output) -> Result<Status, CliError> {
    let model = cfg.model()?;
    let market = cfg.market()?;
    let mt = build_market_tree(&market, &model, cfg.cap_nodes)?;
    let block = cfg.config.market.as_ref().expect("market() checked the block");
    let payoff = node_values(&block.payoff, &mt.tree, Domain::All, Some(&mt.price), "market.payoff")?;
    let claim = NodeField::from_fn(&mt.tree, Domain::Leaves, |id| payoff.at(id))?;
    let am = american_price(&mt, &payoff)?;
    out.write("price_surface.csv", |buf| export::write_price_surface(buf, &mt, &am))?;
    out.write("boundary.csv", |buf| export::write_boundary(buf, &exercise_boundary(&mt, &am)))?;

    let mut rows: Vec<[String; 4]> = vec![
        ["european".into(), String::new(), num(am.european.root()), String::new()],
        ["american".into(), String::new(), num(am.price.root()), String::new()],
    ];
    let mut failures = Vec::new();
    let dominance = (0..mt.tree.len()).map(|id| am.price.y().at(id) - am.european.y().at(id)).fold(f64::INFINITY, f64::min);
    rows.push(["dominance".into(), String::new(), num(dominance), String::new()]);
    if dominance < 0.0 {
        failures.push(format!("American below European by {:e}", -dominance));
    }
    if strategy_count(&mt).is_some_and(|c| c <= STRATEGY_CAP) {
        for &x in &block.wealth {
            let oracle = brute_force_utility(&mt, &claim, x)?;
            let identity = utility_from_price(market.risk_aversion, x, am.european.root());
            let rel = ((oracle.value - identity) / oracle.value).abs();
            rows.push(["utility_oracle".into(), num(x), num(oracle.value), num(rel)]);
            rows.push(["utility_identity".into(), num(x), num(identity), num(rel)]);
            if !(rel <= UTILITY_TOL) {
                failures.push(format!("utility identity off by {rel:e} at x = {x}"));
            }
        }
    } else {
        println!("utility oracle skipped: constraint set is continuous or the strategy count exceeds the cap");
    }
    if rule_count(&mt.tree, 0) <= RULE_CAP {
        let obstacle = Obstacle::from_field(&payoff)?;
        let s = snell_value(&mt.tree, &IndifferenceDriver::new(&mt), &claim, &obstacle, 0)?;
        let gap = (s.value - am.price.root()).abs();
        rows.push(["american_snell".into(), String::new(), num(s.value), num(gap)]);
        if gap > SNELL_TOL {
            failures.push(format!("American value and stopping-rule enumeration differ by {gap:e}"));
        }
    }
    out.write("pricing.csv", |buf| {
        let mut w = Writer::from_writer(buf);
        w.write_record(["quantity", "x", "value", "error"])?;
        for r in &rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    })?;
    println!("european price = {}", num(am.european.root()));
    println!("american price = {}", num(am.price.root()));
    if failures.is_empty() {
        Ok(Status::Ok)
    } else {
        Ok(Status::CheckFailed(failures.join("; ")))
    }
}

type Table = (Vec<String>, Vec<Vec<String>>);

fn read_table(path: &Path) -> Result<Option<Table>, CliError> {
    if !path.is_file() {
        return Ok(None);
    }
    let mut r = Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r.records().map(|rec| rec.map(|r| r.iter().map(str::to_string).collect())).collect::<Result<_, _>>()?;
    Ok(Some((header, rows)))
}

fn column(header: &[String], name: &str, file: &str) -> Result<usize, CliError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Config(format!("{file} has no column {name:?}")))
}

/// Plot-ready CSVs from a results directory into `dir/plotdata`.
pub fn plotdata(dir: &Path) -> Result<Output, CliError> {
    let ladder = read_table(&dir.join("ladder.csv"))?;
    let boundary = read_table(&dir.join("boundary.csv"))?;
    let margins = read_table(&dir.join("bound_margins.csv"))?;
    if ladder.is_none() && boundary.is_none() && margins.is_none() {
        return Err(CliError::MissingResults(dir.to_path_buf()));
    }
    let mut out = Output::create(&dir.join("plotdata"))?;
    if let Some((h, rows)) = ladder {
        let (mode, n, gap) = (column(&h, "mode", "ladder.csv")?, column(&h, "n", "ladder.csv")?, column(&h, "gap", "ladder.csv")?);
        out.write("ladder_convergence.csv", |buf| {
            let mut w = Writer::from_writer(buf);
            w.write_record(["mode", "n", "gap", "log10_gap"])?;
            for r in rows.iter().filter(|r| r[n] != "direct") {
                let g: f64 = r[gap].parse().unwrap_or(f64::NAN);
                w.write_record([r[mode].clone(), r[n].clone(), r[gap].clone(), num(g.log10())])?;
            }
            w.flush()?;
            Ok(())
        })?;
    }
    if let Some((h, rows)) = boundary {
        let cols = ["t", "min_exercised_s", "max_continued_s"]
            .iter()
            .map(|c| column(&h, c, "boundary.csv"))
            .collect::<Result<Vec<_>, _>>()?;
        out.write("exercise_boundary.csv", |buf| {
            let mut w = Writer::from_writer(buf);
            w.write_record(["t", "min_exercised_s", "max_continued_s"])?;
            for r in &rows {
                w.write_record(cols.iter().map(|&c| r[c].as_str()))?;
            }
            w.flush()?;
            Ok(())
        })?;
    }
    if let Some((h, rows)) = margins {
        let cols = ["p", "node", "margin"].iter().map(|c| column(&h, c, "bound_margins.csv")).collect::<Result<Vec<_>, _>>()?;
        out.write("bound_margins.csv", |buf| {
            let mut w = Writer::from_writer(buf);
            w.write_record(["p", "node", "margin"])?;
            for r in &rows {
                w.write_record(cols.iter().map(|&c| r[c].as_str()))?;
            }
            w.flush()?;
            Ok(())
        })?;
    }
    Ok(out)
}

//! CSV writers. Output depends only on the data: numbers are printed in
//! shortest round-trip form, rows in node or instance order, and nothing
//! time- or host-dependent is written.

use std::io::Write;

use csv::Writer;

use crate::battery::{InstanceRow, MarketRow};
use crate::checks::CheckReport;
use crate::mpp::{Jump, Move, ScenarioTree};
use crate::oracle::SnellResult;
use crate::pricing::{AmericanSolution, BoundaryRow, MarketTree};
use crate::scalar::Scalar;
use crate::solver::{Ladder, LadderMode, Obstacle, RbsdeSolution};

pub type Result<T> = std::result::Result<T, csv::Error>;

pub fn num<T: Scalar>(v: T) -> String {
    let v = v.as_f64();
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

fn opt<T: Scalar>(v: Option<T>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn write_tree<T: Scalar, W: Write>(w: W, tree: &ScenarioTree<T>) -> Result<()> {
    let mut out = Writer::from_writer(w);
    out.write_record(["node", "depth", "parent", "t", "jump", "mark", "brownian", "prob", "path_prob", "jumps", "w"])?;
    for n in tree.nodes() {
        let (jump, mark, bm) = match n.outcome {
            None => ("", String::new(), ""),
            Some(o) => {
                let (j, m) = match o.jump {
                    Jump::None => ("0", String::new()),
                    Jump::Mark(e) => ("1", tree.model().marks().labels()[e].clone()),
                };
                let b = match o.brownian {
                    Some(Move::Up) => "up",
                    Some(Move::Down) => "down",
                    None => "",
                };
                (j, m, b)
            }
        };
        out.write_record([
            n.id.to_string(),
            n.depth.to_string(),
            n.parent.map(|p| p.to_string()).unwrap_or_default(),
            num(tree.time_of(n.id)),
            jump.into(),
            mark,
            bm.into(),
            num(n.prob),
            num(n.path_prob),
            n.jumps.to_string(),
            num(n.w),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_solution<T: Scalar, W: Write>(
    w: W,
    tree: &ScenarioTree<T>,
    sol: &RbsdeSolution<T>,
    obstacle: &Obstacle<T>,
) -> Result<()> {
    let mut out = Writer::from_writer(w);
    let marks = tree.model().marks().labels();
    let mut header: Vec<String> =
        ["node", "depth", "t", "y", "obstacle", "dk", "continuation", "increment", "z", "control"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    header.extend(marks.iter().map(|m| format!("u_{m}")));
    out.write_record(&header)?;
    for id in 0..tree.len() {
        let internal = !tree.is_leaf(id);
        let mut row = vec![
            id.to_string(),
            tree.node(id).depth.to_string(),
            num(tree.time_of(id)),
            num(sol.y.at(id)),
            opt(obstacle.at(id)),
            num(sol.dk.at(id)),
            opt(sol.continuation.get(id)),
            opt(sol.increment.get(id)),
            opt(sol.z.as_ref().and_then(|z| z.get(id))),
            opt(sol.control.as_ref().and_then(|c| c.get(id).copied())),
        ];
        for e in 0..marks.len() {
            row.push(if internal { num(sol.u.at(id, e)) } else { String::new() });
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_ladder<T: Scalar, W: Write>(w: W, ladder: &Ladder<T>) -> Result<()> {
    let mut out = Writer::from_writer(w);
    let mode = match ladder.mode {
        LadderMode::InfConvolution => "inf_convolution",
        LadderMode::Truncation => "truncation",
    };
    out.write_record(["mode", "n", "root_y", "gap"])?;
    out.write_record([mode.into(), "direct".into(), num(ladder.direct.root_y()), num(T::zero())])?;
    for r in &ladder.rungs {
        out.write_record([mode.into(), num(r.n), num(r.root_y), num(r.gap)])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_oracle<T: Scalar, W: Write>(
    w: W,
    tree: &ScenarioTree<T>,
    snell: &SnellResult<T>,
    solver_root: T,
) -> Result<()> {
    let mut out = Writer::from_writer(w);
    out.write_record(["rules", "snell_value", "solver_root_y", "gap", "optimal_stopping_nodes"])?;
    let nodes: Vec<String> = snell.best_rule.stopping_nodes(tree, 0).iter().map(usize::to_string).collect();
    out.write_record([
        snell.rules.to_string(),
        num(snell.value),
        num(solver_root),
        num((snell.value - solver_root).abs()),
        nodes.join(" "),
    ])?;
    out.flush()?;
    Ok(())
}

pub fn write_checks<W: Write>(w: W, reports: &[CheckReport]) -> Result<()> {
    let mut out = Writer::from_writer(w);
    out.write_record(["check", "instance_id", "worst_margin", "tolerance", "verdict", "detail"])?;
    for r in reports {
        out.write_record([
            r.check.clone(),
            r.instance_id.clone(),
            num(r.worst_margin),
            num(r.tolerance),
            r.verdict.label().into(),
            r.detail.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_check_entries<W: Write>(w: W, report: &CheckReport) -> Result<()> {
    let mut out = Writer::from_writer(w);
    out.write_record(["node", "lhs", "rhs", "margin"])?;
    for e in &report.entries {
        out.write_record([e.node.to_string(), num(e.lhs), num(e.rhs), num(e.rhs - e.lhs)])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_battery<W: Write>(w: W, rows: &[InstanceRow]) -> Result<()> {
    let mut out = Writer::from_writer(w);
    out.write_record([
        "instance", "family", "steps", "marks", "nodes", "root_y", "snell", "snell_gap", "rules", "flat_off", "barrier",
        "residual", "y_bound_p1", "y_bound_p2", "y_bound_p4", "comparison_margin", "comparison",
    ])?;
    for r in rows {
        let mut rec = vec![
            r.id.to_string(),
            r.family.into(),
            r.steps.to_string(),
            r.marks.to_string(),
            r.nodes.to_string(),
            num(r.root_y),
            num(r.snell),
            num(r.snell_gap),
            r.rules.to_string(),
            num(r.flat_off),
            num(r.barrier),
            num(r.residual),
        ];
        rec.extend(r.y_bound.iter().map(|c| num(c.worst_margin)));
        rec.push(num(r.comparison.worst_margin));
        rec.push(r.comparison.verdict.label().into());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_markets<W: Write>(w: W, rows: &[MarketRow]) -> Result<()> {
    let mut out = Writer::from_writer(w);
    out.write_record([
        "market", "steps", "marks", "brownian", "constraint_points", "risk_aversion", "european", "american",
        "dominance", "snell", "x", "oracle_utility", "identity_utility", "rel_error",
    ])?;
    for r in rows {
        for &(x, oracle, identity, rel) in &r.utility {
            out.write_record([
                r.id.to_string(),
                r.steps.to_string(),
                r.marks.to_string(),
                r.brownian.to_string(),
                r.constraint_points.to_string(),
                num(r.alpha),
                num(r.european),
                num(r.american),
                num(r.dominance),
                opt(r.snell),
                num(x),
                num(oracle),
                num(identity),
                num(rel),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Per node: price, European and American values, hedge and exercise flag.
pub fn write_price_surface<T: Scalar, W: Write>(w: W, mt: &MarketTree<T>, am: &AmericanSolution<T>) -> Result<()> {
    let mut out = Writer::from_writer(w);
    let tree = &mt.tree;
    out.write_record(["node", "depth", "t", "s", "european", "american", "european_pi", "american_pi", "exercise"])?;
    for id in 0..tree.len() {
        out.write_record([
            id.to_string(),
            tree.node(id).depth.to_string(),
            num(tree.time_of(id)),
            num(mt.price.at(id)),
            num(am.european.y().at(id)),
            num(am.price.y().at(id)),
            opt(am.european.strategy.get(id).copied()),
            opt(am.price.strategy.get(id).copied()),
            u8::from(am.exercise_flag[id]).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_boundary<T: Scalar, W: Write>(w: W, rows: &[BoundaryRow<T>]) -> Result<()> {
    let mut out = Writer::from_writer(w);
    out.write_record(["step", "t", "min_exercised_s", "max_continued_s"])?;
    for r in rows {
        out.write_record([r.step.to_string(), num(r.t), opt(r.min_exercised), opt(r.max_continued)])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpp::{build_tree, MppModel, DEFAULT_NODE_CAP};

    #[test]
    fn number_format_round_trips() {
        for v in [0.1_f64, -1.5, 1e-300, 3.0] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(num(f64::NEG_INFINITY), "-inf");
        assert_eq!(num(2.0_f32), "2.0");
    }

    #[test]
    fn tree_dump_has_one_row_per_node() {
        let m = MppModel::<f64>::new(vec![0.0, 1.0], vec![0.2], vec![vec![1.0]], true).unwrap();
        let t = build_tree(&m, DEFAULT_NODE_CAP).unwrap();
        let mut buf = Vec::new();
        write_tree(&mut buf, &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + t.len());
        assert!(text.lines().nth(3).unwrap().contains(",down,"));
    }
}

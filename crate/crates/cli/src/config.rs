//! TOML experiment configuration and its translation into core objects.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mpp_rbsde::generator::{Alpha, Convexity, Entropic, Generator, Growth, LinearInU, NegEntropic, UserTable};
use mpp_rbsde::mpp::{build_tree, Domain, MarkSpace, MppModel, NodeField, ScenarioTree, DEFAULT_NODE_CAP, DEFAULT_PROB_TOL};
use mpp_rbsde::pricing::{ConstraintSet, MarketModel, ReturnConvention};
use mpp_rbsde::solver::{LadderMode, Obstacle, Scheme};
use serde::Deserialize;

use crate::error::CliError;
use crate::expr::{NodeExpr, NodeVars};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub model: ModelBlock,
    pub generator: Option<GeneratorBlock>,
    #[serde(default)]
    pub data: DataBlock,
    #[serde(default)]
    pub run: RunBlock,
    pub compare: Option<CompareBlock>,
    pub market: Option<MarketBlock>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub grid: Vec<f64>,
    pub delta_a: OneOrMany,
    /// One row per step, or a single row used at every step.
    pub kernel: Vec<Vec<f64>>,
    pub marks: Option<Vec<String>>,
    #[serde(default)]
    pub brownian: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvexityName {
    Convex,
    Concave,
    None,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum GeneratorBlock {
    LinearInU {
        lambda: f64,
        #[serde(default)]
        a: f64,
        c: Vec<f64>,
        g: Option<Vec<f64>>,
    },
    Entropic {
        lambda: f64,
    },
    NegEntropic {
        lambda: f64,
    },
    /// Tabulated `f(step, y, u)` with declared growth constants.
    Table {
        path: PathBuf,
        lambda: f64,
        #[serde(default)]
        beta: f64,
        #[serde(default)]
        beta_tilde: f64,
        #[serde(default)]
        alpha: f64,
        #[serde(default)]
        c0: f64,
        convexity: ConvexityName,
    },
}

/// Node data: an expression, a constant or an explicit table.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Values {
    Const(f64),
    Expr(String),
    Table(Vec<f64>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    /// Leaf values (a table lists leaves in node order).
    pub terminal: Option<Values>,
    /// Values on every node (a table lists all nodes); `-inf` marks an
    /// inactive obstacle.
    pub obstacle: Option<Values>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LadderName {
    #[default]
    InfConvolution,
    Truncation,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_p")]
    pub p: Vec<f64>,
    #[serde(default = "default_n_list")]
    pub n_list: Vec<f64>,
    #[serde(default)]
    pub ladder: LadderName,
    #[serde(default = "default_checks")]
    pub checks: Vec<String>,
    /// Random instances added to `check`.
    #[serde(default)]
    pub battery: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub uk_baseline: Option<f64>,
    pub tolerance: Option<f64>,
    pub cap_nodes: Option<usize>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

fn default_scheme() -> String {
    "exact".into()
}
fn default_p() -> Vec<f64> {
    vec![1.0, 2.0, 4.0]
}
fn default_n_list() -> Vec<f64> {
    vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0]
}
fn default_checks() -> Vec<String> {
    ["comparison", "y_bound", "uk", "truncation"].iter().map(|s| s.to_string()).collect()
}
fn default_samples() -> usize {
    1000
}

impl Default for RunBlock {
    fn default() -> Self {
        Self {
            scheme: default_scheme(),
            p: default_p(),
            n_list: default_n_list(),
            ladder: LadderName::default(),
            checks: default_checks(),
            battery: 0,
            samples: default_samples(),
            uk_baseline: None,
            tolerance: None,
            cap_nodes: None,
            threads: None,
            out: None,
        }
    }
}

/// Upper side of the comparison check: `ξ̂ = ξ + terminal_shift`,
/// `L̂ = L + obstacle_shift`, `f̂ = f + generator_shift`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareBlock {
    #[serde(default)]
    pub terminal_shift: f64,
    #[serde(default)]
    pub obstacle_shift: f64,
    #[serde(default)]
    pub generator_shift: f64,
}

impl Default for CompareBlock {
    fn default() -> Self {
        Self { terminal_shift: 0.1, obstacle_shift: 0.05, generator_shift: 0.1 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ConstraintBlock {
    Grid(Vec<f64>),
    Interval { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConventionName {
    #[default]
    Compensated,
    Raw,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketBlock {
    #[serde(default)]
    pub drift: f64,
    #[serde(default)]
    pub sigma: f64,
    pub jump_sizes: Vec<f64>,
    pub constraint: ConstraintBlock,
    pub risk_aversion: f64,
    #[serde(default = "one")]
    pub s0: f64,
    #[serde(default)]
    pub convention: ConventionName,
    /// Payoff on every node; may use `s`.
    pub payoff: Values,
    #[serde(default = "default_wealth")]
    pub wealth: Vec<f64>,
}

fn one() -> f64 {
    1.0
}
fn default_wealth() -> Vec<f64> {
    vec![0.0, 1.0]
}

/// Command-line overrides of the run block.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub tolerance: Option<f64>,
    pub cap_nodes: Option<usize>,
}

/// A loaded config with overrides applied and its raw bytes kept for
/// hashing.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub bytes: Vec<u8>,
    pub dir: PathBuf,
    pub seed: Option<u64>,
    pub tolerance: f64,
    pub cap_nodes: usize,
    pub threads: Option<usize>,
    pub out: PathBuf,
}

pub fn load(path: &Path, ov: &Overrides) -> Result<Loaded, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let run = &config.run;
    let tolerance = ov.tolerance.or(run.tolerance).unwrap_or(DEFAULT_PROB_TOL);
    if !(tolerance > 0.0) {
        return Err(CliError::Config(format!("tolerance must be positive, got {tolerance}")));
    }
    Ok(Loaded {
        seed: ov.seed.or(config.seed),
        tolerance,
        cap_nodes: ov.cap_nodes.or(run.cap_nodes).unwrap_or(DEFAULT_NODE_CAP),
        threads: ov.threads.or(run.threads),
        out: ov.out.clone().or_else(|| run.out.clone()).unwrap_or_else(|| PathBuf::from("results")),
        config,
        bytes,
        dir,
    })
}

impl Loaded {
    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::Config("this command draws random samples: set `seed` or pass --seed".into()))
    }

    pub fn model(&self) -> Result<MppModel<f64>, CliError> {
        let m = &self.config.model;
        let n = m.grid.len().saturating_sub(1);
        let delta_a = match &m.delta_a {
            OneOrMany::One(v) => vec![*v; n],
            OneOrMany::Many(v) => v.clone(),
        };
        let kernel = if m.kernel.len() == 1 && n > 1 { vec![m.kernel[0].clone(); n] } else { m.kernel.clone() };
        let k = kernel.first().map_or(0, Vec::len);
        let marks = match &m.marks {
            Some(labels) => MarkSpace::new(labels.iter().cloned())?,
            None => MarkSpace::numbered(k)?,
        };
        Ok(MppModel::with_marks(m.grid.clone(), delta_a, kernel, m.brownian, marks, self.tolerance)?)
    }

    pub fn tree(&self, model: &MppModel<f64>) -> Result<ScenarioTree<f64>, CliError> {
        Ok(build_tree(model, self.cap_nodes)?)
    }

    pub fn scheme(&self) -> Result<Scheme, CliError> {
        self.config.run.scheme.parse().map_err(|e: String| CliError::Config(e))
    }

    pub fn ladder_mode(&self) -> LadderMode {
        match self.config.run.ladder {
            LadderName::InfConvolution => LadderMode::InfConvolution,
            LadderName::Truncation => LadderMode::Truncation,
        }
    }

    pub fn generator(&self, marks: usize) -> Result<Arc<dyn Generator<f64>>, CliError> {
        let block = self.config.generator.as_ref().ok_or_else(|| CliError::Config("missing [generator] block".into()))?;
        let check_len = |what: &str, v: &[f64]| {
            if v.len() == marks {
                Ok(())
            } else {
                Err(CliError::Config(format!("generator.{what} has {} entries for {marks} marks", v.len())))
            }
        };
        Ok(match block {
            GeneratorBlock::LinearInU { lambda, a, c, g } => {
                check_len("c", c)?;
                let g = g.clone().unwrap_or_else(|| vec![0.0; marks]);
                check_len("g", &g)?;
                Arc::new(LinearInU::new(*a, c.clone(), g, *lambda)?)
            }
            GeneratorBlock::Entropic { lambda } => Arc::new(Entropic::new(*lambda)?),
            GeneratorBlock::NegEntropic { lambda } => Arc::new(NegEntropic::new(*lambda)?),
            GeneratorBlock::Table { path, lambda, beta, beta_tilde, alpha, c0, convexity } => {
                let full = self.dir.join(path);
                let file = File::open(&full)
                    .map_err(|e| CliError::Config(format!("cannot open table {}: {e}", full.display())))?;
                let conv = match convexity {
                    ConvexityName::Convex => Convexity::Convex,
                    ConvexityName::Concave => Convexity::Concave,
                    ConvexityName::None => Convexity::None,
                };
                let mut growth = Growth::new(*lambda, conv);
                growth.beta = *beta;
                growth.beta_tilde = *beta_tilde;
                growth.alpha = Alpha::Constant(*alpha);
                growth.c0 = *c0;
                Arc::new(UserTable::from_csv(file, growth)?)
            }
        })
    }

    pub fn terminal(&self, tree: &ScenarioTree<f64>, price: Option<&NodeField<f64>>) -> Result<NodeField<f64>, CliError> {
        let v = self.config.data.terminal.as_ref().ok_or_else(|| CliError::Config("missing data.terminal".into()))?;
        node_values(v, tree, Domain::Leaves, price, "data.terminal")
    }

    pub fn obstacle(&self, tree: &ScenarioTree<f64>, price: Option<&NodeField<f64>>) -> Result<Obstacle<f64>, CliError> {
        match &self.config.data.obstacle {
            None => Ok(Obstacle::inactive(tree)),
            Some(v) => {
                let all = raw_values(v, tree, Domain::All, price, "data.obstacle")?;
                Ok(Obstacle::from_fn(tree, |id| Some(all[id]).filter(|x| *x != f64::NEG_INFINITY))?)
            }
        }
    }

    pub fn market(&self) -> Result<MarketModel<f64>, CliError> {
        let m = self.config.market.as_ref().ok_or_else(|| CliError::Config("missing [market] block".into()))?;
        let constraint = match &m.constraint {
            ConstraintBlock::Grid(p) => ConstraintSet::grid(p.clone())?,
            ConstraintBlock::Interval { lo, hi } => ConstraintSet::interval(*lo, *hi)?,
        };
        let convention = match m.convention {
            ConventionName::Compensated => ReturnConvention::Compensated,
            ConventionName::Raw => ReturnConvention::Raw,
        };
        Ok(MarketModel::new(m.drift, m.sigma, m.jump_sizes.clone(), constraint, m.risk_aversion, m.s0)?
            .with_convention(convention))
    }
}

/// Evaluates node data on `domain`, with `s` bound when a price field is
/// given.
pub fn node_values(
    v: &Values,
    tree: &ScenarioTree<f64>,
    domain: Domain,
    price: Option<&NodeField<f64>>,
    what: &str,
) -> Result<NodeField<f64>, CliError> {
    let values = raw_values(v, tree, domain, price, what)?;
    Ok(NodeField::new(tree, domain, values)?)
}

/// Values in domain order; infinities pass through.
fn raw_values(
    v: &Values,
    tree: &ScenarioTree<f64>,
    domain: Domain,
    price: Option<&NodeField<f64>>,
    what: &str,
) -> Result<Vec<f64>, CliError> {
    let ids: Vec<usize> = match domain {
        Domain::All => (0..tree.len()).collect(),
        Domain::Leaves => tree.leaves().collect(),
        Domain::Internal => (0..tree.n_internal()).collect(),
    };
    let values = match v {
        Values::Const(c) => vec![*c; ids.len()],
        Values::Table(t) => {
            if t.len() != ids.len() {
                return Err(CliError::Config(format!("{what} has {} values, the tree needs {}", t.len(), ids.len())));
            }
            t.clone()
        }
        Values::Expr(src) => {
            let expr = NodeExpr::parse(src).map_err(|e| CliError::Config(format!("{what}: {e}")))?;
            ids.iter()
                .map(|&id| {
                    let n = tree.node(id);
                    let vars = NodeVars {
                        t: tree.time_of(id),
                        step: n.depth as f64,
                        jumps: n.jumps as f64,
                        mark: n.last_mark.map_or(-1.0, |m| m as f64),
                        w: n.w,
                        s: price.map(|p| p.at(id)),
                    };
                    expr.eval(&vars).map_err(|e| CliError::Config(format!("{what}: {e}")))
                })
                .collect::<Result<_, _>>()?
        }
    };
    if let Some(i) = values.iter().position(|x| x.is_nan()) {
        return Err(CliError::Config(format!("{what} is NaN at node {}", ids[i])));
    }
    Ok(values)
}

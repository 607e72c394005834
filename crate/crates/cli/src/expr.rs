//! Node expressions: arithmetic, comparisons (1 or 0) and a few functions
//! over the node state. Nothing else is callable.

use fasteval::{Compiler, Evaler, Instruction, Parser, Slab};

/// Node state visible to an expression.
#[derive(Debug, Clone, Copy)]
pub struct NodeVars {
    pub t: f64,
    pub step: f64,
    pub jumps: f64,
    /// Index of the last mark, −1 before the first jump.
    pub mark: f64,
    pub w: f64,
    /// Asset price, only under a market.
    pub s: Option<f64>,
}

pub struct NodeExpr {
    src: String,
    slab: Slab,
    code: Instruction,
}

pub const NAMES: &str = "t, step, jumps, mark, w, s, inf, if(c, a, b), exp, ln, sqrt, min, max, abs";

impl NodeExpr {
    pub fn parse(src: &str) -> Result<Self, String> {
        let mut slab = Slab::new();
        let code = Parser::new()
            .parse(src, &mut slab.ps)
            .map_err(|e| format!("cannot parse {src:?}: {e}"))?
            .from(&slab.ps)
            .compile(&slab.ps, &mut slab.cs);
        Ok(Self { src: src.to_string(), slab, code })
    }

    pub fn eval(&self, v: &NodeVars) -> Result<f64, String> {
        let mut missing_s = false;
        let mut ns = |name: &str, args: Vec<f64>| -> Option<f64> {
            match (name, args.as_slice()) {
                ("t", []) => Some(v.t),
                ("step", []) => Some(v.step),
                ("jumps", []) => Some(v.jumps),
                ("mark", []) => Some(v.mark),
                ("w", []) => Some(v.w),
                ("s", []) => {
                    missing_s = v.s.is_none();
                    v.s
                }
                ("inf", []) => Some(f64::INFINITY),
                ("if", [c, a, b]) => Some(if *c != 0.0 { *a } else { *b }),
                ("exp", [x]) => Some(x.exp()),
                ("ln", [x]) => Some(x.ln()),
                ("sqrt", [x]) => Some(x.sqrt()),
                _ => None,
            }
        };
        let out = self.code.eval(&self.slab, &mut ns);
        match out {
            Ok(x) => Ok(x),
            Err(_) if missing_s => Err(format!("{:?}: `s` is only defined under [market]", self.src)),
            Err(fasteval::Error::Undefined(name)) => {
                Err(format!("{:?}: unknown name `{name}` (available: {NAMES})", self.src))
            }
            Err(e) => Err(format!("{:?}: {e}", self.src)),
        }
    }
}

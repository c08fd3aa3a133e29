//! An instrumented executor that runs a small operator graph while
//! tallying FLOPs and materialized scalars under a [`CountingConvention`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::CountingConvention;
use crate::einsum::{contract, EinsumSpec};
use crate::error::{Error, Result};
use crate::lintention::{specs, LintentionParams};
use crate::ops::softmax_lastdim;
use crate::tensor::Tensor;

/// Operators known to the counted executor.
#[derive(Clone, Debug, PartialEq)]
pub enum CountedOp {
    Contract(EinsumSpec),
    Softmax,
    Scale(f64),
    Add,
}

impl fmt::Display for CountedOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CountedOp::Contract(s) => write!(f, "contract:{s}"),
            CountedOp::Softmax => f.write_str("softmax"),
            CountedOp::Scale(a) => write!(f, "scale:{a}"),
            CountedOp::Add => f.write_str("add"),
        }
    }
}

impl FromStr for CountedOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = s.split_once(':').map_or((s, None), |(h, a)| (h, Some(a)));
        match (head, arg) {
            ("contract", Some(spec)) => Ok(CountedOp::Contract(spec.parse()?)),
            ("softmax", None) => Ok(CountedOp::Softmax),
            ("add", None) => Ok(CountedOp::Add),
            ("scale", Some(a)) => a
                .parse()
                .map(CountedOp::Scale)
                .map_err(|_| Error::Usage(format!("bad scale factor `{a}`"))),
            _ => Err(Error::Usage(format!("op `{s}` is not registered with the counting executor"))),
        }
    }
}

impl CountedOp {
    fn arity(&self) -> usize {
        match self {
            CountedOp::Contract(_) | CountedOp::Add => 2,
            CountedOp::Softmax | CountedOp::Scale(_) => 1,
        }
    }

    fn eval(&self, args: &[&Tensor]) -> Result<Tensor> {
        match self {
            CountedOp::Contract(spec) => contract(spec, args[0], args[1]),
            CountedOp::Softmax => softmax_lastdim(args[0]),
            CountedOp::Scale(a) => Ok(args[0].scale(*a)),
            CountedOp::Add => args[0].add(args[1]),
        }
    }

    fn flops(&self, args: &[&Tensor], out: &Tensor, conv: &CountingConvention) -> Result<u64> {
        let elems = out.len() as u64;
        Ok(match self {
            CountedOp::Contract(spec) => conv.contraction * spec.mac_count(args[0], args[1])?,
            CountedOp::Softmax => conv.softmax() * elems,
            CountedOp::Scale(_) => conv.scale * elems,
            CountedOp::Add => conv.add * elems,
        })
    }
}

/// One node of a [`Program`]. Argument ids `0..inputs` name program
/// inputs; id `inputs + i` names the output of node `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    /// Label used to group the log, e.g. a generator name.
    pub stage: String,
    pub op: CountedOp,
    pub args: Vec<usize>,
    /// Whether the output counts toward space. Softmax scratch does not.
    pub materialize: bool,
}

/// A straight-line operator graph; the last node is the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Program {
    pub inputs: usize,
    pub nodes: Vec<Node>,
}

impl Program {
    pub fn new(inputs: usize) -> Self {
        Self { inputs, nodes: Vec::new() }
    }

    /// Appends a node given its op id string; returns the output id.
    pub fn push(&mut self, name: &str, stage: &str, op: &str, args: &[usize], materialize: bool) -> Result<usize> {
        let op: CountedOp = op.parse()?;
        let id = self.inputs + self.nodes.len();
        if args.len() != op.arity() {
            return Err(Error::Usage(format!("`{op}` takes {} arguments, got {}", op.arity(), args.len())));
        }
        if let Some(bad) = args.iter().find(|&&a| a >= id) {
            return Err(Error::Usage(format!("node `{name}` reads undefined value {bad}")));
        }
        self.nodes.push(Node {
            name: name.into(),
            stage: stage.into(),
            op,
            args: args.to_vec(),
            materialize,
        });
        Ok(id)
    }

    fn last_uses(&self) -> Vec<usize> {
        let mut last = vec![usize::MAX; self.inputs + self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &a in &node.args {
                last[a] = i;
            }
        }
        last
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpLog {
    pub name: String,
    pub stage: String,
    pub op: String,
    pub flops: u64,
    pub scalars: u64,
}

/// Output of a counted run. `flops` and `peak_scalars` equal the sums over
/// `log`.
#[derive(Clone, Debug, PartialEq)]
pub struct CountedExecution {
    pub output: Tensor,
    pub flops: u64,
    pub peak_scalars: u64,
    pub log: Vec<OpLog>,
}

impl CountedExecution {
    /// `(flops, scalars)` summed over the nodes of one stage.
    pub fn stage_totals(&self, stage: &str) -> (u64, u64) {
        self.log
            .iter()
            .filter(|l| l.stage == stage)
            .fold((0, 0), |(f, s), l| (f + l.flops, s + l.scalars))
    }
}

fn execute(program: &Program, inputs: Vec<Tensor>, conv: Option<&CountingConvention>) -> Result<(Tensor, Vec<OpLog>)> {
    if inputs.len() != program.inputs {
        return Err(Error::Usage(format!(
            "program takes {} inputs, got {}",
            program.inputs,
            inputs.len()
        )));
    }
    if program.nodes.is_empty() {
        return Err(Error::Usage("program has no nodes".into()));
    }
    let last = program.last_uses();
    let mut values: Vec<Option<Tensor>> = inputs.into_iter().map(Some).collect();
    let mut log = Vec::new();
    for (i, node) in program.nodes.iter().enumerate() {
        let args = node
            .args
            .iter()
            .map(|&a| values[a].as_ref().ok_or_else(|| Error::Usage(format!("value {a} already released"))))
            .collect::<Result<Vec<_>>>()?;
        let out = node.op.eval(&args)?;
        if let Some(conv) = conv {
            log.push(OpLog {
                name: node.name.clone(),
                stage: node.stage.clone(),
                op: node.op.to_string(),
                flops: node.op.flops(&args, &out, conv)?,
                scalars: if node.materialize { out.len() as u64 } else { 0 },
            });
        }
        for &a in &node.args {
            if last[a] == i {
                values[a] = None;
            }
        }
        values.push(Some(out));
    }
    let out = values.pop().flatten().ok_or_else(|| Error::Usage("program produced no output".into()))?;
    Ok((out, log))
}

/// Executes `program` while counting.
pub fn counted_run(program: &Program, inputs: Vec<Tensor>, conv: &CountingConvention) -> Result<CountedExecution> {
    let (output, log) = execute(program, inputs, Some(conv))?;
    Ok(CountedExecution {
        output,
        flops: log.iter().map(|l| l.flops).sum(),
        peak_scalars: log.iter().map(|l| l.scalars).sum(),
        log,
    })
}

/// Executes `program` without instrumentation.
pub fn run_uncounted(program: &Program, inputs: Vec<Tensor>) -> Result<Tensor> {
    Ok(execute(program, inputs, None)?.0)
}

/// The Lintention mechanism as a program over `[x, wq, wk, wv]` with
/// `x: (n, h, w, c)`. Nodes are staged by generator name.
pub fn lintention_program(channels: usize) -> Result<Program> {
    let s = specs();
    let mut p = Program::new(4);
    let (x, wq, wk, wv) = (0, 1, 2, 3);
    let q = p.push("query", "QG", &format!("contract:{}", s.query), &[x, wq], true)?;
    let logits = p.push("group_logits", "KG", &format!("contract:{}", s.classify), &[x, wk], false)?;
    let l = p.push("group_assign", "KG", "softmax", &[logits], true)?;
    let k = p.push("keys", "KG", &format!("contract:{}", s.key), &[l, q], true)?;
    let v = p.push("values", "VG", &format!("contract:{}", s.value), &[k, wv], true)?;
    let raw = p.push("raw_scores", "ASG", &format!("contract:{}", s.score), &[k, q], false)?;
    let scaled = p.push(
        "scaled_scores",
        "ASG",
        &format!("scale:{}", 1.0 / (channels as f64).sqrt()),
        &[raw],
        false,
    )?;
    let scores = p.push("scores", "ASG", "softmax", &[scaled], true)?;
    p.push("result", "RG", &format!("contract:{}", s.result), &[scores, v], true)?;
    Ok(p)
}

/// Runs [`lintention_program`] on `x` with `params`.
pub fn counted_lintention(x: &Tensor, params: &LintentionParams, conv: &CountingConvention) -> Result<CountedExecution> {
    let program = lintention_program(params.channels())?;
    let inputs = vec![x.clone(), params.wq().clone(), params.wk().clone(), params.wv().clone()];
    counted_run(&program, inputs, conv)
}

/// Standard self-attention as a program over `[x, wq, wk, wv]` with
/// `x: (n, t, c)` flattened over pixels.
pub fn self_attention_program(channels: usize) -> Result<Program> {
    let mut p = Program::new(4);
    let (x, wq, wk, wv) = (0, 1, 2, 3);
    let q = p.push("query", "projections", "contract:ntc,cd->ntd", &[x, wq], true)?;
    let k = p.push("key", "projections", "contract:ntc,cd->ntd", &[x, wk], true)?;
    let v = p.push("value", "projections", "contract:ntc,cd->ntd", &[x, wv], true)?;
    let raw = p.push("raw_scores", "scores", "contract:ntd,nsd->nts", &[q, k], false)?;
    let scaled = p.push(
        "scaled_scores",
        "scores",
        &format!("scale:{}", 1.0 / (channels as f64).sqrt()),
        &[raw],
        false,
    )?;
    let scores = p.push("scores", "scores", "softmax", &[scaled], true)?;
    p.push("result", "result", "contract:nts,nsd->ntd", &[scores, v], true)?;
    Ok(p)
}

/// Runs [`self_attention_program`] on `x: (n, h, w, c)`; the output is
/// reshaped back to `(n, h, w, c)`.
pub fn counted_self_attention(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    conv: &CountingConvention,
) -> Result<CountedExecution> {
    let e = x.extents();
    if e.len() != 4 {
        return Err(Error::dim("<rank>", format!("self-attention input must be rank 4, got {}", e.len())));
    }
    let (n, h, w, c) = (e[0], e[1], e[2], e[3]);
    for m in [wq, wk, wv] {
        if m.extents() != [c, c] {
            return Err(Error::dim("c", format!("projection {:?} is not {c}x{c}", m.extents())));
        }
    }
    let flat = x.clone().reshape(&[("n", n), ("t", h * w), ("c", c)])?;
    let program = self_attention_program(c)?;
    let mut run = counted_run(&program, vec![flat, wq.clone(), wk.clone(), wv.clone()], conv)?;
    run.output = run.output.reshape(&[("n", n), ("h", h), ("w", w), ("c", c)])?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lintention::{init_params, lintention_forward};
    use crate::rng::SplitMix64Stream;

    fn input(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        SplitMix64Stream::new(seed).tensor(&[("n", n), ("h", h), ("w", w), ("c", c)], 1.0).unwrap()
    }

    #[test]
    fn query_generator_flops() {
        let params = init_params(1, 3, 1).unwrap();
        let run = counted_lintention(&input(1, 2, 2, 3, 2), &params, &CountingConvention::default()).unwrap();
        assert_eq!(run.stage_totals("QG").0, 72);
    }

    #[test]
    fn full_mechanism_flops() {
        let params = init_params(1, 4, 2).unwrap();
        let run = counted_lintention(&input(1, 2, 2, 4, 2), &params, &CountingConvention::default()).unwrap();
        assert_eq!(run.flops, 488);
        assert_eq!(run.flops, run.log.iter().map(|l| l.flops).sum::<u64>());
    }

    #[test]
    fn counting_is_transparent() {
        let params = init_params(5, 3, 2).unwrap();
        let x = input(2, 3, 2, 3, 6);
        let program = lintention_program(3).unwrap();
        let inputs = vec![x.clone(), params.wq().clone(), params.wk().clone(), params.wv().clone()];
        let plain = run_uncounted(&program, inputs.clone()).unwrap();
        let counted = counted_run(&program, inputs, &CountingConvention::default()).unwrap();
        assert_eq!(plain.data(), counted.output.data());
        let (reference, _) = lintention_forward(&x, &params).unwrap();
        assert!(reference.max_abs_diff(&plain).unwrap() < 1e-12);
    }

    #[test]
    fn unknown_op_is_usage_error() {
        let mut p = Program::new(1);
        assert!(matches!(p.push("x", "s", "gelu", &[0], true), Err(Error::Usage(_))));
        assert!(matches!(p.push("x", "s", "add", &[0], true), Err(Error::Usage(_))));
        assert!(matches!(p.push("x", "s", "softmax", &[1], true), Err(Error::Usage(_))));
    }

    #[test]
    fn op_ids_round_trip() {
        for id in ["contract:ab,bc->ac", "softmax", "scale:0.5", "add"] {
            assert_eq!(id.parse::<CountedOp>().unwrap().to_string(), id);
        }
    }

    #[test]
    fn self_attention_counts_match_closed_form() {
        let mut rng = SplitMix64Stream::new(3);
        let c = 3;
        let w: Vec<Tensor> = (0..3).map(|_| rng.tensor(&[("c", c), ("d", c)], 0.5).unwrap()).collect();
        let run = counted_self_attention(&input(1, 2, 3, c, 4), &w[0], &w[1], &w[2], &CountingConvention::default()).unwrap();
        let (hw, c) = (6u64, c as u64);
        assert_eq!(run.flops, 6 * hw * c * c + hw * hw * (4 * c + 3));
        assert_eq!(run.output.extents(), vec![1, 2, 3, 3]);
    }
}

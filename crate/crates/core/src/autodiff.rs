//! Scalar reverse-mode differentiation over an append-only tape.
//!
//! Every node stores its operation and an eagerly computed value, so building
//! a graph is also its forward pass. [`Tape::gradient`] does not run a numeric
//! backward sweep; it appends the adjoint computation to the same tape as
//! ordinary nodes. The returned adjoints are therefore graph nodes themselves
//! and can be differentiated again, which is what a loss containing
//! input-gradients of the model needs.
//!
//! Operations whose operands are all constants are folded into constants at
//! construction time.

use std::fmt;

use thiserror::Error;

/// Smoothing width of [`Tape::abs_smooth`]: `|u| ~ sqrt(u^2 + delta^2)`.
pub const SMOOTH_ABS_DELTA: f64 = 1e-6;

/// Offset used by [`Tape::sqrt_safe`]. Its derivative stays finite at zero.
pub const SQRT_SAFE_DELTA: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("expected {expected} {kind} values, got {got}")]
    ShapeMismatch {
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value {value} at node {node}")]
    NonFinite { node: usize, value: f64 },
    #[error("node {0} is not part of this tape")]
    UnknownNode(usize),
}

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// Bindable leaf of a tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Input(usize),
    Param(usize),
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Op {
    Const,
    Input(u32),
    Param(u32),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    /// `sqrt(u^2 + delta^2)`
    AbsSmooth(Var, f64),
    /// `u^c` for a constant exponent `c`.
    Pow(Var, f64),
    /// n-ary sum; operands live in the tape's operand arena.
    Sum {
        start: u32,
        len: u32,
    },
}

#[derive(Copy, Clone, Debug)]
struct Node {
    op: Op,
    value: f64,
}

#[derive(Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    operands: Vec<Var>,
    inputs: Vec<Var>,
    params: Vec<Var>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("inputs", &self.inputs.len())
            .field("params", &self.params.len())
            .finish()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(nodes),
            operands: Vec::with_capacity(nodes / 4),
            inputs: Vec::new(),
            params: Vec::new(),
        }
    }

    /// Drops every node but keeps the allocations.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.operands.clear();
        self.inputs.clear();
        self.params.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn slot_var(&self, slot: Slot) -> Option<Var> {
        match slot {
            Slot::Input(i) => self.inputs.get(i).copied(),
            Slot::Param(i) => self.params.get(i).copied(),
        }
    }

    pub fn op(&self, v: Var) -> Op {
        self.nodes[v.index()].op
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.index()].value
    }

    pub fn values(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.value(v)).collect()
    }

    pub fn is_const(&self, v: Var) -> bool {
        matches!(self.nodes[v.index()].op, Op::Const)
    }

    fn push(&mut self, op: Op, value: f64) -> Var {
        let id = u32::try_from(self.nodes.len()).expect("tape exceeds u32::MAX nodes");
        self.nodes.push(Node { op, value });
        Var(id)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(Op::Const, value)
    }

    pub fn input(&mut self, value: f64) -> Var {
        let slot = self.inputs.len() as u32;
        let v = self.push(Op::Input(slot), value);
        self.inputs.push(v);
        v
    }

    pub fn param(&mut self, value: f64) -> Var {
        let slot = self.params.len() as u32;
        let v = self.push(Op::Param(slot), value);
        self.params.push(v);
        v
    }

    /// Pushes `op`, folding it into a constant when every operand is constant.
    fn node(&mut self, op: Op) -> Var {
        let value = self.compute(&op);
        let foldable = match op {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                self.is_const(a) && self.is_const(b)
            }
            Op::Neg(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::AbsSmooth(a, _)
            | Op::Pow(a, _) => self.is_const(a),
            Op::Sum { start, len } => self.operands[start as usize..(start + len) as usize]
                .iter()
                .all(|&v| self.is_const(v)),
            Op::Const | Op::Input(_) | Op::Param(_) => false,
        };
        if foldable {
            if let Op::Sum { start, .. } = op {
                self.operands.truncate(start as usize);
            }
            self.push(Op::Const, value)
        } else {
            self.push(op, value)
        }
    }

    fn compute(&self, op: &Op) -> f64 {
        let val = |v: Var| self.nodes[v.index()].value;
        match *op {
            Op::Const | Op::Input(_) | Op::Param(_) => unreachable!("leaves carry their value"),
            Op::Add(a, b) => val(a) + val(b),
            Op::Sub(a, b) => val(a) - val(b),
            Op::Mul(a, b) => val(a) * val(b),
            Op::Div(a, b) => val(a) / val(b),
            Op::Neg(a) => -val(a),
            Op::Tanh(a) => val(a).tanh(),
            Op::Sigmoid(a) => sigmoid(val(a)),
            Op::Softplus(a) => softplus(val(a)),
            Op::Log(a) => val(a).ln(),
            Op::Exp(a) => val(a).exp(),
            Op::AbsSmooth(a, d) => val(a).hypot(d),
            Op::Pow(a, c) => val(a).powf(c),
            Op::Sum { start, len } => self.operands[start as usize..(start + len) as usize]
                .iter()
                .fold(0.0, |acc, &v| acc + val(v)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.node(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.node(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.node(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.node(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.node(Op::Neg(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.node(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.node(Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.node(Op::Softplus(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.node(Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.node(Op::Exp(a))
    }

    pub fn abs_smooth(&mut self, a: Var) -> Var {
        self.node(Op::AbsSmooth(a, SMOOTH_ABS_DELTA))
    }

    pub fn powf(&mut self, a: Var, exponent: f64) -> Var {
        self.node(Op::Pow(a, exponent))
    }

    /// `sqrt(u + d^2) - d` with `d = SQRT_SAFE_DELTA`: exactly zero at `u = 0`
    /// and finite derivative there.
    pub fn sqrt_safe(&mut self, a: Var) -> Var {
        let d2 = self.constant(SQRT_SAFE_DELTA * SQRT_SAFE_DELTA);
        let shifted = self.add(a, d2);
        let root = self.powf(shifted, 0.5);
        let d = self.constant(SQRT_SAFE_DELTA);
        self.sub(root, d)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let c = self.constant(k);
        self.mul(c, a)
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        match terms {
            [] => self.constant(0.0),
            [only] => *only,
            _ => {
                let start = self.operands.len() as u32;
                self.operands.extend_from_slice(terms);
                self.node(Op::Sum {
                    start,
                    len: terms.len() as u32,
                })
            }
        }
    }

    pub fn mean(&mut self, terms: &[Var]) -> Var {
        let s = self.sum(terms);
        if terms.len() <= 1 {
            return s;
        }
        self.scale(s, 1.0 / terms.len() as f64)
    }

    /// Rebinds every input and parameter slot and recomputes the graph up to
    /// and including `output`.
    pub fn evaluate(
        &mut self,
        inputs: &[f64],
        params: &[f64],
        output: Var,
    ) -> Result<f64, AutodiffError> {
        if inputs.len() != self.inputs.len() {
            return Err(AutodiffError::ShapeMismatch {
                kind: "input",
                expected: self.inputs.len(),
                got: inputs.len(),
            });
        }
        if params.len() != self.params.len() {
            return Err(AutodiffError::ShapeMismatch {
                kind: "parameter",
                expected: self.params.len(),
                got: params.len(),
            });
        }
        let last = output.index();
        if last >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(last));
        }
        for i in 0..=last {
            let op = self.nodes[i].op;
            let value = match op {
                Op::Const => self.nodes[i].value,
                Op::Input(s) => inputs[s as usize],
                Op::Param(s) => params[s as usize],
                _ => self.compute(&op),
            };
            if !value.is_finite() {
                return Err(AutodiffError::NonFinite { node: i, value });
            }
            self.nodes[i].value = value;
        }
        Ok(self.nodes[last].value)
    }

    /// Appends the adjoint graph of `output` and returns `d output / d w` for
    /// every `w` in `wrt` (a constant zero when `output` does not depend on it).
    ///
    /// `wrt` may name any node; the result is the reverse-mode adjoint of that
    /// node. Only nodes on a path between `wrt` and `output` get adjoints.
    pub fn gradient(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, AutodiffError> {
        let n = output.index() + 1;
        if n > self.nodes.len() {
            return Err(AutodiffError::UnknownNode(output.index()));
        }
        if let Some(bad) = wrt.iter().find(|w| w.index() >= self.nodes.len()) {
            return Err(AutodiffError::UnknownNode(bad.index()));
        }

        // Nothing below the earliest `wrt` node can depend on it.
        let lo = wrt.iter().map(|w| w.index()).min().unwrap_or(n).min(n);
        let mut needs = vec![false; n - lo];
        let need = |needs: &[bool], v: Var| v.index() >= lo && needs[v.index() - lo];
        for w in wrt {
            if w.index() < n {
                needs[w.index() - lo] = true;
            }
        }
        for i in lo..n {
            if needs[i - lo] {
                continue;
            }
            needs[i - lo] = match self.nodes[i].op {
                Op::Const | Op::Input(_) | Op::Param(_) => false,
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    need(&needs, a) || need(&needs, b)
                }
                Op::Neg(a)
                | Op::Tanh(a)
                | Op::Sigmoid(a)
                | Op::Softplus(a)
                | Op::Log(a)
                | Op::Exp(a)
                | Op::AbsSmooth(a, _)
                | Op::Pow(a, _) => need(&needs, a),
                Op::Sum { start, len } => self.operands[start as usize..(start + len) as usize]
                    .iter()
                    .any(|&v| need(&needs, v)),
            };
        }

        // Adjoint contributions per node, kept as singly linked lists in one arena.
        const NIL: u32 = u32::MAX;
        let mut head = vec![NIL; n - lo];
        let mut links: Vec<(Var, u32)> = Vec::with_capacity(n - lo);
        let mut adjoint: Vec<Option<Var>> = vec![None; n - lo];
        let mut parts: Vec<Var> = Vec::new();

        macro_rules! contribute {
            ($target:expr, $g:expr) => {{
                let t: Var = $target;
                if need(&needs, t) {
                    links.push(($g, head[t.index() - lo]));
                    head[t.index() - lo] = (links.len() - 1) as u32;
                }
            }};
        }

        if need(&needs, output) {
            let seed = self.constant(1.0);
            contribute!(output, seed);
        }

        for i in (lo..n).rev() {
            if head[i - lo] == NIL {
                continue;
            }
            parts.clear();
            let mut cursor = head[i - lo];
            while cursor != NIL {
                let (g, next) = links[cursor as usize];
                parts.push(g);
                cursor = next;
            }
            // Reverse to sum contributions in the order they were produced.
            parts.reverse();
            let g = if parts.len() == 1 {
                parts[0]
            } else {
                let p = std::mem::take(&mut parts);
                let s = self.sum(&p);
                parts = p;
                s
            };
            adjoint[i - lo] = Some(g);
            let out = Var(i as u32);

            match self.nodes[i].op {
                Op::Const | Op::Input(_) | Op::Param(_) => {}
                Op::Add(a, b) => {
                    contribute!(a, g);
                    contribute!(b, g);
                }
                Op::Sub(a, b) => {
                    contribute!(a, g);
                    if need(&needs, b) {
                        let ng = self.neg(g);
                        contribute!(b, ng);
                    }
                }
                Op::Mul(a, b) => {
                    if need(&needs, a) {
                        let d = self.mul_adj(g, b);
                        contribute!(a, d);
                    }
                    if need(&needs, b) {
                        let d = self.mul_adj(g, a);
                        contribute!(b, d);
                    }
                }
                Op::Div(a, b) => {
                    if need(&needs, a) {
                        let d = self.div(g, b);
                        contribute!(a, d);
                    }
                    if need(&needs, b) {
                        let q = self.div(out, b);
                        let gq = self.mul_adj(g, q);
                        let d = self.neg(gq);
                        contribute!(b, d);
                    }
                }
                Op::Neg(a) => {
                    let d = self.neg(g);
                    contribute!(a, d);
                }
                Op::Tanh(a) => {
                    let one = self.constant(1.0);
                    let sq = self.mul(out, out);
                    let local = self.sub(one, sq);
                    let d = self.mul_adj(g, local);
                    contribute!(a, d);
                }
                Op::Sigmoid(a) => {
                    let one = self.constant(1.0);
                    let comp = self.sub(one, out);
                    let local = self.mul(out, comp);
                    let d = self.mul_adj(g, local);
                    contribute!(a, d);
                }
                Op::Softplus(a) => {
                    let local = self.sigmoid(a);
                    let d = self.mul_adj(g, local);
                    contribute!(a, d);
                }
                Op::Log(a) => {
                    let d = self.div(g, a);
                    contribute!(a, d);
                }
                Op::Exp(a) => {
                    let d = self.mul_adj(g, out);
                    contribute!(a, d);
                }
                Op::AbsSmooth(a, _) => {
                    let local = self.div(a, out);
                    let d = self.mul_adj(g, local);
                    contribute!(a, d);
                }
                Op::Pow(a, c) => {
                    if c != 0.0 {
                        let local = if c == 1.0 {
                            None
                        } else if c == 2.0 {
                            Some(self.scale(a, 2.0))
                        } else {
                            let p = self.powf(a, c - 1.0);
                            Some(self.scale(p, c))
                        };
                        let d = match local {
                            None => g,
                            Some(l) => self.mul_adj(g, l),
                        };
                        contribute!(a, d);
                    }
                }
                Op::Sum { start, len } => {
                    for k in start..start + len {
                        let v = self.operands[k as usize];
                        contribute!(v, g);
                    }
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|w| {
                w.index()
                    .checked_sub(lo)
                    .and_then(|k| adjoint.get(k))
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| self.constant(0.0))
            })
            .collect())
    }

    /// `g * x`, skipping the multiply when the adjoint is the unit seed.
    fn mul_adj(&mut self, g: Var, x: Var) -> Var {
        let node = self.nodes[g.index()];
        if matches!(node.op, Op::Const) && node.value == 1.0 {
            x
        } else {
            self.mul(g, x)
        }
    }
}

/// Values for every input and parameter slot of a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Binding {
    pub inputs: Vec<f64>,
    pub params: Vec<f64>,
}

impl Binding {
    /// The values currently held by the tape's leaves.
    pub fn current(tape: &Tape) -> Self {
        Binding {
            inputs: tape.values(tape.inputs()),
            params: tape.values(tape.params()),
        }
    }

    fn get(&self, slot: Slot) -> f64 {
        match slot {
            Slot::Input(i) => self.inputs[i],
            Slot::Param(i) => self.params[i],
        }
    }

    fn set(&mut self, slot: Slot, v: f64) {
        match slot {
            Slot::Input(i) => self.inputs[i] = v,
            Slot::Param(i) => self.params[i] = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotCheck {
    pub slot: Slot,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<SlotCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| !c.flagged)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &SlotCheck> {
        self.checks.iter().filter(|c| c.flagged)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares reverse-mode derivatives of `output` against central differences
/// for every input and parameter slot, at `binding`.
///
/// Works on a private copy of `tape`; the caller's tape is left untouched.
/// Non-finite evaluations are reported as flagged slots with a NaN error.
pub fn check_gradient(
    tape: &Tape,
    output: Var,
    binding: &Binding,
    step: f64,
    tolerance: f64,
) -> GradCheckReport {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut work = tape.clone();
    let slots: Vec<Slot> = (0..work.inputs.len())
        .map(Slot::Input)
        .chain((0..work.params.len()).map(Slot::Param))
        .collect();
    let leaves: Vec<Var> = slots
        .iter()
        .map(|&s| work.slot_var(s).expect("slot enumerated from tape"))
        .collect();

    let grads = match work.gradient(output, &leaves) {
        Ok(g) => g,
        Err(_) => {
            return GradCheckReport {
                checks: Vec::new(),
                tolerance,
            }
        }
    };
    let last = grads.iter().copied().max().unwrap_or(output).max(output);
    let analytic: Vec<f64> = match work.evaluate(&binding.inputs, &binding.params, last) {
        Ok(_) => work.values(&grads),
        Err(_) => vec![f64::NAN; grads.len()],
    };

    let mut probe = binding.clone();
    let checks = slots
        .iter()
        .zip(analytic)
        .map(|(&slot, analytic)| {
            let base = binding.get(slot);
            probe.set(slot, base + step);
            let plus = work.evaluate(&probe.inputs, &probe.params, output);
            probe.set(slot, base - step);
            let minus = work.evaluate(&probe.inputs, &probe.params, output);
            probe.set(slot, base);
            let numeric = match (plus, minus) {
                (Ok(p), Ok(m)) => (p - m) / (2.0 * step),
                _ => f64::NAN,
            };
            let rel_error = relative_error(analytic, numeric);
            SlotCheck {
                slot,
                analytic,
                numeric,
                rel_error,
                flagged: !(rel_error <= tolerance),
            }
        })
        .collect();
    GradCheckReport { checks, tolerance }
}

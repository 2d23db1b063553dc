//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Training differentiates the loss through the spiking network *and* the
//! filter rollout (Kalman gain included) as ordinary arithmetic. All of that
//! math is written once, generic over [`Scalar`], and instantiated twice:
//!
//! * `f64` — plain evaluation (inference, finite-difference oracles);
//! * [`Var`] — every operation is recorded on a [`Tape`]; a single backward
//!   sweep then yields gradients with respect to all registered inputs.
//!
//! The tape stores one node per recorded operation (opcode + up to three
//! parent indices) plus its value. Constants are interned and folded: adding
//! a literal zero or multiplying by a literal one/zero produces no node, so
//! dense matrix code with structurally sparse operands (e.g. `F P Fᵀ` with a
//! mostly-identity `F`) records only the arithmetic that actually happens.
//!
//! Spiking nonlinearities get a dedicated opcode whose forward value and
//! backward slope are decoupled: in [`SpikeMode::Hard`] the forward emits a
//! binary step while the backward uses the arctan surrogate slope; in
//! [`SpikeMode::Smooth`] the forward emits the surrogate sigmoid itself, so
//! tape gradients of a smooth-mode evaluation are exact and can be verified
//! against central finite differences.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::{FRAC_1_PI, FRAC_PI_2, LN_10};
use std::ops::{Add, Div, Mul, Neg, Sub};

/// How spike nonlinearities evaluate. See the module docs.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SpikeMode {
    /// Forward: Heaviside step (exact binary spikes). Backward: arctan
    /// surrogate slope.
    Hard,
    /// Forward: the arctan sigmoid the surrogate is the derivative of.
    /// Backward: that same slope, i.e. the true gradient of the forward.
    Smooth,
}

/// Surrogate sigmoid `1/pi * atan(pi/2 * alpha * u) + 1/2` (u relative to
/// the firing threshold).
#[inline]
pub fn surrogate_sigmoid(u: f64, alpha: f64) -> f64 {
    FRAC_1_PI * (FRAC_PI_2 * alpha * u).atan() + 0.5
}

/// Slope of [`surrogate_sigmoid`]: `(alpha/2) / (1 + (pi/2 * alpha * u)^2)`.
#[inline]
pub fn surrogate_slope(u: f64, alpha: f64) -> f64 {
    let x = FRAC_PI_2 * alpha * u;
    (0.5 * alpha) / (1.0 + x * x)
}

/// Scalar abstraction shared by the plain and the recorded evaluation paths.
///
/// Control flow (branch selection, convergence checks) always reads
/// [`Scalar::value`]; gradients follow the branch that was taken.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Lift a literal constant (not differentiated).
    fn lit(x: f64) -> Self;
    /// Current numeric value.
    fn value(self) -> f64;
    fn mul_add(self, b: Self, c: Self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn tanh(self) -> Self;
    fn atan(self) -> Self;
    fn acos(self) -> Self;
    /// `10^self`.
    fn pow10(self) -> Self;
    /// Spike nonlinearity at relative potential `self` (see [`SpikeMode`]).
    fn spike(self, alpha: f64, mode: SpikeMode) -> Self;

    fn powi(self, n: u32) -> Self {
        let mut acc = Self::lit(1.0);
        for _ in 0..n {
            acc = acc * self;
        }
        acc
    }
    fn recip(self) -> Self {
        Self::lit(1.0) / self
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn mul_add(self, b: Self, c: Self) -> Self {
        f64::mul_add(self, b, c)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn atan(self) -> Self {
        f64::atan(self)
    }
    #[inline]
    fn acos(self) -> Self {
        f64::acos(self)
    }
    #[inline]
    fn pow10(self) -> Self {
        10f64.powf(self)
    }
    #[inline]
    fn spike(self, alpha: f64, mode: SpikeMode) -> Self {
        match mode {
            SpikeMode::Hard => {
                if self >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeMode::Smooth => surrogate_sigmoid(self, alpha),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
#[repr(u8)]
enum Op {
    Const,
    Input,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    /// `a * b + c` recorded as one node.
    MulAdd,
    Sin,
    Cos,
    Sqrt,
    Exp,
    Ln,
    Abs,
    Tanh,
    Atan,
    Acos,
    /// Spike nonlinearity; `b`/`c` hold the bit-split surrogate alpha.
    Spike,
}

#[derive(Clone, Copy)]
struct Node {
    op: Op,
    a: u32,
    b: u32,
    c: u32,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    /// Interned constants, keyed by bit pattern.
    consts: HashMap<u64, u32>,
    /// Node indices of registered inputs, in registration order.
    inputs: Vec<u32>,
}

/// Recording tape. One tape per differentiated evaluation; [`Tape::clear`]
/// recycles the allocation between evaluations.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner::default()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop all recorded nodes but keep allocations.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.vals.clear();
        inner.consts.clear();
        inner.inputs.clear();
    }

    /// Register a differentiable input (a parameter). Gradients are reported
    /// in registration order by [`Gradients::by_input`].
    pub fn input(&self, x: f64) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.push(Op::Input, 0, 0, 0, x);
        inner.inputs.push(idx);
        Var::Node { tape: self, idx }
    }

    fn intern(&self, x: f64) -> u32 {
        let mut inner = self.inner.borrow_mut();
        let bits = x.to_bits();
        if let Some(&idx) = inner.consts.get(&bits) {
            return idx;
        }
        let idx = inner.push(Op::Const, 0, 0, 0, x);
        inner.consts.insert(bits, idx);
        idx
    }

    fn idx_of(&self, v: Var<'_>) -> u32 {
        match v {
            Var::Const(x) => self.intern(x),
            Var::Node { idx, .. } => idx,
        }
    }

    fn push_node(&self, op: Op, a: u32, b: u32, c: u32, val: f64) -> u32 {
        self.inner.borrow_mut().push(op, a, b, c, val)
    }

    /// Reverse sweep from `root`. Returns adjoints for every node; inputs are
    /// exposed in registration order.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        let mut adj = vec![0.0f64; n];
        if let Var::Node { idx, .. } = root {
            adj[idx as usize] = 1.0;
            for i in (0..=idx as usize).rev() {
                let g = adj[i];
                if g == 0.0 {
                    continue;
                }
                let node = inner.nodes[i];
                let (a, b, c) = (node.a as usize, node.b as usize, node.c as usize);
                match node.op {
                    Op::Const | Op::Input => {}
                    Op::Add => {
                        adj[a] += g;
                        adj[b] += g;
                    }
                    Op::Sub => {
                        adj[a] += g;
                        adj[b] -= g;
                    }
                    Op::Mul => {
                        adj[a] += g * inner.vals[b];
                        adj[b] += g * inner.vals[a];
                    }
                    Op::Div => {
                        let vb = inner.vals[b];
                        adj[a] += g / vb;
                        adj[b] -= g * inner.vals[i] / vb;
                    }
                    Op::Neg => adj[a] -= g,
                    Op::MulAdd => {
                        adj[a] += g * inner.vals[b];
                        adj[b] += g * inner.vals[a];
                        adj[c] += g;
                    }
                    Op::Sin => adj[a] += g * inner.vals[a].cos(),
                    Op::Cos => adj[a] -= g * inner.vals[a].sin(),
                    Op::Sqrt => adj[a] += g * 0.5 / inner.vals[i],
                    Op::Exp => adj[a] += g * inner.vals[i],
                    Op::Ln => adj[a] += g / inner.vals[a],
                    Op::Abs => {
                        let va = inner.vals[a];
                        if va > 0.0 {
                            adj[a] += g;
                        } else if va < 0.0 {
                            adj[a] -= g;
                        }
                    }
                    Op::Tanh => {
                        let y = inner.vals[i];
                        adj[a] += g * (1.0 - y * y);
                    }
                    Op::Atan => {
                        let va = inner.vals[a];
                        adj[a] += g / (1.0 + va * va);
                    }
                    Op::Acos => {
                        let va = inner.vals[a];
                        adj[a] -= g / (1.0 - va * va).sqrt();
                    }
                    Op::Spike => {
                        let alpha = f64::from_bits(
                            (node.c as u64) << 32 | node.b as u64,
                        );
                        adj[a] += g * surrogate_slope(inner.vals[a], alpha);
                    }
                }
            }
        }
        Gradients {
            adj,
            inputs: inner.inputs.clone(),
        }
    }
}

impl TapeInner {
    fn push(&mut self, op: Op, a: u32, b: u32, c: u32, val: f64) -> u32 {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { op, a, b, c });
        self.vals.push(val);
        idx
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adj: Vec<f64>,
    inputs: Vec<u32>,
}

impl Gradients {
    /// Gradient with respect to the `i`-th registered input.
    pub fn by_input(&self, i: usize) -> f64 {
        self.adj[self.inputs[i] as usize]
    }

    /// Gradients for all registered inputs, in registration order.
    pub fn input_gradients(&self) -> Vec<f64> {
        self.inputs.iter().map(|&i| self.adj[i as usize]).collect()
    }

    /// Gradient with respect to an arbitrary recorded variable.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        match v {
            Var::Const(_) => 0.0,
            Var::Node { idx, .. } => self.adj[idx as usize],
        }
    }
}

/// A value on (or folded off) a [`Tape`].
///
/// Literal constants stay out of the tape until they combine with a recorded
/// node, which is what makes generic dense linear algebra affordable here.
#[derive(Clone, Copy)]
pub enum Var<'t> {
    Const(f64),
    Node { tape: &'t Tape, idx: u32 },
}

impl<'t> Var<'t> {
    fn tape(self, other: Var<'t>) -> &'t Tape {
        match (self, other) {
            (Var::Node { tape, .. }, _) | (_, Var::Node { tape, .. }) => tape,
            _ => unreachable!("constant-only operations fold without a tape"),
        }
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        match self {
            Var::Const(x) => Var::Const(f(x)),
            Var::Node { tape, idx } => {
                let val = f(tape.inner.borrow().vals[idx as usize]);
                let out = tape.push_node(op, idx, 0, 0, val);
                Var::Node { tape, idx: out }
            }
        }
    }

    fn binary(self, rhs: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let tape = self.tape(rhs);
        let a = tape.idx_of(self);
        let b = tape.idx_of(rhs);
        let val = {
            let inner = tape.inner.borrow();
            f(inner.vals[a as usize], inner.vals[b as usize])
        };
        let out = tape.push_node(op, a, b, 0, val);
        Var::Node { tape, idx: out }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        match (self, rhs) {
            (Var::Const(a), Var::Const(b)) => Var::Const(a + b),
            (Var::Const(0.0), x) | (x, Var::Const(0.0)) => x,
            (a, b) => a.binary(b, Op::Add, |x, y| x + y),
        }
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        match (self, rhs) {
            (Var::Const(a), Var::Const(b)) => Var::Const(a - b),
            (x, Var::Const(0.0)) => x,
            (Var::Const(0.0), x) => -x,
            (a, b) => a.binary(b, Op::Sub, |x, y| x - y),
        }
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        match (self, rhs) {
            (Var::Const(a), Var::Const(b)) => Var::Const(a * b),
            (Var::Const(0.0), _) | (_, Var::Const(0.0)) => Var::Const(0.0),
            (Var::Const(1.0), x) | (x, Var::Const(1.0)) => x,
            (a, b) => a.binary(b, Op::Mul, |x, y| x * y),
        }
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        match (self, rhs) {
            (Var::Const(a), Var::Const(b)) => Var::Const(a / b),
            (x, Var::Const(1.0)) => x,
            (a, b) => a.binary(b, Op::Div, |x, y| x / y),
        }
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        match self {
            Var::Const(x) => Var::Const(-x),
            x => x.unary(Op::Neg, |v| -v),
        }
    }
}

impl<'t> Scalar for Var<'t> {
    fn lit(x: f64) -> Self {
        Var::Const(x)
    }

    fn value(self) -> f64 {
        match self {
            Var::Const(x) => x,
            Var::Node { tape, idx } => tape.inner.borrow().vals[idx as usize],
        }
    }

    fn mul_add(self, b: Self, c: Self) -> Self {
        match (self, b, c) {
            (Var::Const(x), Var::Const(y), Var::Const(z)) => Var::Const(x.mul_add(y, z)),
            (Var::Const(0.0), _, z) | (_, Var::Const(0.0), z) => z,
            (Var::Const(1.0), y, z) => y + z,
            (x, Var::Const(1.0), z) => x + z,
            (x, y, Var::Const(0.0)) => x * y,
            (x, y, z) => {
                let tape = match (x, y, z) {
                    (Var::Node { tape, .. }, _, _)
                    | (_, Var::Node { tape, .. }, _)
                    | (_, _, Var::Node { tape, .. }) => tape,
                    _ => unreachable!(),
                };
                let (a, b, c) = (tape.idx_of(x), tape.idx_of(y), tape.idx_of(z));
                let val = {
                    let inner = tape.inner.borrow();
                    inner.vals[a as usize].mul_add(inner.vals[b as usize], inner.vals[c as usize])
                };
                let out = tape.push_node(Op::MulAdd, a, b, c, val);
                Var::Node { tape, idx: out }
            }
        }
    }

    fn sin(self) -> Self {
        self.unary(Op::Sin, f64::sin)
    }
    fn cos(self) -> Self {
        self.unary(Op::Cos, f64::cos)
    }
    fn sqrt(self) -> Self {
        self.unary(Op::Sqrt, f64::sqrt)
    }
    fn exp(self) -> Self {
        self.unary(Op::Exp, f64::exp)
    }
    fn ln(self) -> Self {
        self.unary(Op::Ln, f64::ln)
    }
    fn abs(self) -> Self {
        self.unary(Op::Abs, f64::abs)
    }
    fn tanh(self) -> Self {
        self.unary(Op::Tanh, f64::tanh)
    }
    fn atan(self) -> Self {
        self.unary(Op::Atan, f64::atan)
    }
    fn acos(self) -> Self {
        self.unary(Op::Acos, f64::acos)
    }

    fn pow10(self) -> Self {
        (self * Var::Const(LN_10)).exp()
    }

    fn spike(self, alpha: f64, mode: SpikeMode) -> Self {
        match self {
            Var::Const(u) => Var::Const(u.spike(alpha, mode)),
            Var::Node { tape, idx } => {
                let u = tape.inner.borrow().vals[idx as usize];
                let val = u.spike(alpha, mode);
                let bits = alpha.to_bits();
                let out = tape.push_node(
                    Op::Spike,
                    idx,
                    (bits & 0xffff_ffff) as u32,
                    (bits >> 32) as u32,
                    val,
                );
                Var::Node { tape, idx: out }
            }
        }
    }
}

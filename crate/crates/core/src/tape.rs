//! Reverse-mode automatic differentiation on a Wengert-list tape.
//!
//! Numeric code in this crate is written against the [`Real`] scalar trait and
//! instantiated either with plain `f64` (no recording) or with [`Var`], which
//! records every operation together with its local partial derivatives on a
//! [`Tape`]. A single backward sweep then accumulates adjoints for all leaves.
//!
//! Constants are not recorded: they carry a sentinel index, and the arithmetic
//! operators fold `x + 0`, `x * 0` and `x * 1` so that sparse matrix algebra
//! (identity shift blocks, structural zeros) costs nothing on the tape.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    p0: u32,
    p1: u32,
    d0: f64,
    d1: f64,
}

/// Recording tape. One tape per independent gradient evaluation; not thread-safe.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    /// Clear all recorded nodes, keeping the allocation.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// Drop all nodes recorded after `len`. Variables issued beyond that
    /// point must not be used afterwards; earlier variables stay valid.
    /// Used by checkpointed sweeps that replay one segment at a time on a
    /// shared prefix.
    pub fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Create a differentiable leaf variable.
    pub fn leaf(&self, val: f64) -> Var<'_> {
        let idx = self.push(Node { p0: NONE, p1: NONE, d0: 0.0, d1: 0.0 });
        Var { tape: self, idx, val }
    }

    /// Create a constant (not recorded; zero derivative).
    pub fn constant(&self, val: f64) -> Var<'_> {
        Var { tape: self, idx: NONE, val }
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(node);
        idx
    }

    /// Backward sweep. `seeds` assigns initial adjoints (output sensitivities)
    /// to recorded variables; the returned vector holds the adjoint of every
    /// node, indexed like the tape.
    pub fn gradient(&self, seeds: &[(u32, f64)]) -> Adjoints {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0f64; nodes.len()];
        for &(idx, w) in seeds {
            if idx != NONE {
                adj[idx as usize] += w;
            }
        }
        for i in (0..nodes.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = nodes[i];
            if n.p0 != NONE {
                adj[n.p0 as usize] += a * n.d0;
            }
            if n.p1 != NONE {
                adj[n.p1 as usize] += a * n.d1;
            }
        }
        Adjoints { adj }
    }
}

/// Result of a backward sweep; query with the `Var`s whose adjoints you need.
pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    pub fn of(&self, v: Var<'_>) -> f64 {
        if v.idx == NONE {
            0.0
        } else {
            self.adj[v.idx as usize]
        }
    }
}

/// A scalar recorded on a [`Tape`] (or a constant bound to one).
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl<'t> Var<'t> {
    #[inline]
    pub fn value(self) -> f64 {
        self.val
    }

    #[inline]
    pub fn is_const(self) -> bool {
        self.idx == NONE
    }

    /// Seed entry for [`Tape::gradient`].
    pub fn seed(self, weight: f64) -> (u32, f64) {
        (self.idx, weight)
    }

    #[inline]
    fn unary(self, val: f64, d: f64) -> Var<'t> {
        if self.idx == NONE {
            return Var { tape: self.tape, idx: NONE, val };
        }
        let idx = self.tape.push(Node { p0: self.idx, p1: NONE, d0: d, d1: 0.0 });
        Var { tape: self.tape, idx, val }
    }

    #[inline]
    fn binary(self, rhs: Var<'t>, val: f64, dl: f64, dr: f64) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        if self.idx == NONE && rhs.idx == NONE {
            return Var { tape: self.tape, idx: NONE, val };
        }
        let (p0, p1, d0, d1) = if self.idx == NONE {
            (rhs.idx, NONE, dr, 0.0)
        } else if rhs.idx == NONE {
            (self.idx, NONE, dl, 0.0)
        } else {
            (self.idx, rhs.idx, dl, dr)
        };
        let idx = self.tape.push(Node { p0, p1, d0, d1 });
        Var { tape: self.tape, idx, val }
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.val)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        // x + const(0) is exact and need not be recorded.
        if rhs.idx == NONE && rhs.val == 0.0 {
            return self;
        }
        if self.idx == NONE && self.val == 0.0 {
            return rhs;
        }
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        if rhs.idx == NONE && rhs.val == 0.0 {
            return self;
        }
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        if rhs.idx == NONE {
            if rhs.val == 0.0 {
                return Var { tape: self.tape, idx: NONE, val: 0.0 };
            }
            if rhs.val == 1.0 {
                return self;
            }
        }
        if self.idx == NONE {
            if self.val == 0.0 {
                return Var { tape: self.tape, idx: NONE, val: 0.0 };
            }
            if self.val == 1.0 {
                return rhs;
            }
        }
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        if rhs.idx == NONE && rhs.val == 1.0 {
            return self;
        }
        let v = self.val / rhs.val;
        self.binary(rhs, v, 1.0 / rhs.val, -v / rhs.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn neg(self) -> Var<'t> {
        self.unary(-self.val, -1.0)
    }
}

/// Scalar abstraction shared by `f64` and [`Var`].
///
/// Control flow (pivot choice, jitter escalation, convergence checks) always
/// branches on [`Real::val`]; derivatives treat the taken branch as fixed.
pub trait Real:
    Copy
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Numeric value (primal).
    fn val(self) -> f64;
    /// A constant with value `v` in the same recording context as `self`.
    fn lit(self, v: f64) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn lit(self, v: f64) -> Self {
        v
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

impl<'t> Real for Var<'t> {
    #[inline]
    fn val(self) -> f64 {
        self.val
    }
    #[inline]
    fn lit(self, v: f64) -> Self {
        Var { tape: self.tape, idx: NONE, val: v }
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn exp(self) -> Self {
        let v = self.val.exp();
        self.unary(v, v)
    }
    fn tanh(self) -> Self {
        let v = self.val.tanh();
        self.unary(v, 1.0 - v * v)
    }
    fn sqrt(self) -> Self {
        let v = self.val.sqrt();
        self.unary(v, 0.5 / v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_product_and_exp() {
        let tape = Tape::new();
        let x = tape.leaf(0.7);
        let y = tape.leaf(-1.3);
        // f = x * exp(y) + x^2
        let f = x * y.exp() + x * x;
        let adj = tape.gradient(&[f.seed(1.0)]);
        let ey = (-1.3f64).exp();
        assert!((adj.of(x) - (ey + 2.0 * 0.7)).abs() < 1e-14);
        assert!((adj.of(y) - 0.7 * ey).abs() < 1e-14);
    }

    #[test]
    fn grad_matches_finite_difference() {
        let f = |v: &[f64]| -> f64 {
            let (x, y, z) = (v[0], v[1], v[2]);
            (x * y).tanh() + (z * z + 1.0).ln() - y / (x.exp() + 2.0) + (x + z).sqrt()
        };
        let point = [0.4, -0.8, 1.7];

        let tape = Tape::new();
        let x = tape.leaf(point[0]);
        let y = tape.leaf(point[1]);
        let z = tape.leaf(point[2]);
        let two = x.lit(2.0);
        let one = x.lit(1.0);
        let out = (x * y).tanh() + (z * z + one).ln() - y / (x.exp() + two) + (x + z).sqrt();
        assert!((out.value() - f(&point)).abs() < 1e-14);
        let adj = tape.gradient(&[out.seed(1.0)]);
        let grads = [adj.of(x), adj.of(y), adj.of(z)];

        let h = 1e-6;
        for i in 0..3 {
            let mut lo = point;
            let mut hi = point;
            lo[i] -= h;
            hi[i] += h;
            let fd = (f(&hi) - f(&lo)) / (2.0 * h);
            assert!(
                (grads[i] - fd).abs() < 1e-8 * (1.0 + fd.abs()),
                "component {i}: ad={} fd={fd}",
                grads[i]
            );
        }
    }

    #[test]
    fn constants_are_not_recorded() {
        let tape = Tape::new();
        let x = tape.leaf(2.0);
        let c = tape.constant(3.0);
        let zero = tape.constant(0.0);
        let before = tape.len();
        let y = x + zero; // folded
        let z = x * c.lit(1.0); // folded
        assert_eq!(tape.len(), before);
        assert_eq!(y.value(), 2.0);
        assert_eq!(z.value(), 2.0);
        let w = c * c; // const * const stays const
        assert!(w.is_const());
        assert_eq!(tape.len(), before);
    }

    #[test]
    fn multiple_seeds_accumulate() {
        // Two outputs sharing an input: adjoint is the weighted sum.
        let tape = Tape::new();
        let x = tape.leaf(1.5);
        let f = x * x; // df/dx = 3
        let g = x.lit(4.0) * x; // dg/dx = 4
        let adj = tape.gradient(&[f.seed(1.0), g.seed(0.5)]);
        assert!((adj.of(x) - (3.0 + 2.0)).abs() < 1e-14);
    }
}

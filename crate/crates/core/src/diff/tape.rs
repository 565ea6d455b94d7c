//! A recorded-operation tape for reverse-mode differentiation of scalar
//! programs. Every elementary operation pushes one node holding its parent
//! indices and local partial derivatives; a single reverse sweep then yields
//! the gradient of one output with respect to any set of leaves.

use super::scalar::Scalar;
use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Growable arena of recorded operations. Cleared and reused between sweeps.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded nodes, keeping the allocation.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// Introduces an independent variable (or constant) with no parents.
    pub fn leaf(&self, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [NONE, NONE],
            partials: [0.0, 0.0],
        });
        Var { tape: self, idx, value }
    }

    /// Lifts a slice of values into leaves.
    pub fn leaves(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        assert!(idx < NONE as usize, "tape overflow");
        nodes.push(node);
        idx as u32
    }

    fn unary(&self, parent: u32, partial: f64, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [parent, NONE],
            partials: [partial, 0.0],
        });
        Var { tape: self, idx, value }
    }

    fn binary(&self, pa: u32, da: f64, pb: u32, db: f64, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [pa, pb],
            partials: [da, db],
        });
        Var { tape: self, idx, value }
    }

    /// Reverse sweep from `output`; returns `d output / d leaf` for each
    /// requested leaf.
    pub fn gradient(&self, output: Var<'_>, leaves: &[Var<'_>]) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adjoint = vec![0.0_f64; nodes.len()];
        adjoint[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NONE {
                    adjoint[p as usize] += node.partials[k] * a;
                }
            }
        }
        leaves.iter().map(|v| adjoint[v.idx as usize]).collect()
    }
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    value: f64,
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.value
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.tape
            .binary(self.idx, 1.0, rhs.idx, 1.0, self.value + rhs.value)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.tape
            .binary(self.idx, 1.0, rhs.idx, -1.0, self.value - rhs.value)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.tape.binary(
            self.idx,
            rhs.value,
            rhs.idx,
            self.value,
            self.value * rhs.value,
        )
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.value;
        self.tape.binary(
            self.idx,
            inv,
            rhs.idx,
            -self.value * inv * inv,
            self.value * inv,
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.tape.unary(self.idx, -1.0, -self.value)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        self.tape.unary(self.idx, 1.0, self.value + rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        self.tape.unary(self.idx, 1.0, self.value - rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        self.tape.unary(self.idx, rhs, self.value * rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Self {
        self.tape.unary(self.idx, 1.0 / rhs, self.value / rhs)
    }
}

impl<'t> Scalar for Var<'t> {
    fn val(self) -> f64 {
        self.value
    }

    fn lit(self, c: f64) -> Self {
        self.tape.leaf(c)
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.tape.unary(self.idx, e, e)
    }

    fn ln(self) -> Self {
        self.tape.unary(self.idx, 1.0 / self.value, self.value.ln())
    }

    fn sin(self) -> Self {
        self.tape.unary(self.idx, self.value.cos(), self.value.sin())
    }

    fn cos(self) -> Self {
        self.tape
            .unary(self.idx, -self.value.sin(), self.value.cos())
    }

    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.tape.unary(self.idx, 1.0 - t * t, t)
    }

    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.tape.unary(self.idx, 0.5 / s, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_chain_rule() {
        let tape = Tape::new();
        let x = tape.leaf(3.0);
        let y = tape.leaf(2.0);
        // f = x^2 * y + sin(x)
        let f = x * x * y + x.sin();
        let g = tape.gradient(f, &[x, y]);
        assert!((g[0] - (2.0 * 3.0 * 2.0 + 3.0_f64.cos())).abs() < 1e-14);
        assert!((g[1] - 9.0).abs() < 1e-14);
    }

    #[test]
    fn division_and_constants() {
        let tape = Tape::new();
        let x = tape.leaf(4.0);
        let f = (x * 2.0 + 1.0) / x; // f = 2 + 1/x, f' = -1/x^2
        assert!((f.value() - 2.25).abs() < 1e-15);
        let g = tape.gradient(f, &[x]);
        assert!((g[0] + 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(1.5);
        let a = x.exp();
        let f = a * a; // f = e^{2x}, f' = 2 e^{2x}
        let g = tape.gradient(f, &[x]);
        assert!((g[0] - 2.0 * (3.0_f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn clear_retains_capacity() {
        let tape = Tape::new();
        let x = tape.leaf(1.0);
        let _ = x * x;
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
    }
}

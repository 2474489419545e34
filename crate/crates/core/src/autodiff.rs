//! Minimal reverse-mode tape over scalars.
//!
//! Nodes are appended in evaluation order, so parents always precede children
//! and a single reverse sweep over the node list visits the graph in reverse
//! topological order. Only first derivatives are recorded; second-order terms
//! needed by the refined ELBO come from writing analytic gradients in terms of
//! tape primitives.

use std::cell::{Cell, RefCell};
use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("domain error in `{op}` at operand {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("backward already ran on this tape")]
    ReusedTape,
    #[error("node {0} does not belong to this tape")]
    ForeignNode(usize),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    value: f64,
    edge_start: usize,
    edge_len: usize,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    edges: RefCell<Vec<(usize, f64)>>,
    consumed: Cell<bool>,
    error: RefCell<Option<AutodiffError>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({})", self.idx, self.value())
    }
}

/// Gradients of one output with respect to every node of the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adjoints[v.idx]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: f64, parents: &[(Var<'_>, f64)]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents
            .iter()
            .any(|(p, _)| nodes[p.idx].requires_grad);
        let mut edges = self.edges.borrow_mut();
        let edge_start = edges.len();
        if requires_grad {
            edges.extend(
                parents
                    .iter()
                    .filter(|(p, _)| nodes[p.idx].requires_grad)
                    .map(|(p, d)| (p.idx, *d)),
            );
        }
        let edge_len = edges.len() - edge_start;
        nodes.push(Node {
            value,
            edge_start,
            edge_len,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn leaf(&self, value: f64, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let edge_start = self.edges.borrow().len();
        nodes.push(Node {
            value,
            edge_start,
            edge_len: 0,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Differentiable leaf.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    pub fn constants(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.constant(v)).collect()
    }

    fn record_error(&self, err: AutodiffError) {
        let mut slot = self.error.borrow_mut();
        if slot.is_none() {
            *slot = Some(err);
        }
    }

    /// First domain error recorded while building the tape, if any.
    pub fn check(&self) -> Result<(), AutodiffError> {
        match &*self.error.borrow() {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    pub fn sum<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        let value = xs.iter().map(|x| x.value()).sum();
        let parents: Vec<_> = xs.iter().map(|&x| (x, 1.0)).collect();
        self.push(value, &parents)
    }

    pub fn dot<'t>(&'t self, xs: &[Var<'t>], ys: &[Var<'t>]) -> Var<'t> {
        assert_eq!(xs.len(), ys.len(), "dot of mismatched lengths");
        let value = xs.iter().zip(ys).map(|(x, y)| x.value() * y.value()).sum();
        let mut parents = Vec::with_capacity(2 * xs.len());
        for (&x, &y) in xs.iter().zip(ys) {
            parents.push((x, y.value()));
            parents.push((y, x.value()));
        }
        self.push(value, &parents)
    }

    /// Reverse sweep from `output`. A tape supports exactly one sweep.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, AutodiffError> {
        if !std::ptr::eq(output.tape, self) {
            return Err(AutodiffError::ForeignNode(output.idx));
        }
        self.check()?;
        if self.consumed.replace(true) {
            return Err(AutodiffError::ReusedTape);
        }
        let nodes = self.nodes.borrow();
        let edges = self.edges.borrow();
        let mut adjoints = vec![0.0; nodes.len()];
        adjoints[output.idx] = 1.0;
        for i in (0..=output.idx).rev() {
            let a = adjoints[i];
            if a == 0.0 {
                continue;
            }
            let n = nodes[i];
            for &(p, d) in &edges[n.edge_start..n.edge_start + n.edge_len] {
                adjoints[p] += a * d;
            }
        }
        Ok(Gradients { adjoints })
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, value: f64, partial: f64) -> Var<'t> {
        self.tape.push(value, &[(self, partial)])
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().exp();
        self.unary(v, v)
    }

    pub fn ln(self) -> Var<'t> {
        let x = self.value();
        if !(x > 0.0) {
            self.tape.record_error(AutodiffError::Domain { op: "ln", value: x });
        }
        self.unary(x.ln(), 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        let x = self.value();
        if !(x >= 0.0) {
            self.tape.record_error(AutodiffError::Domain { op: "sqrt", value: x });
        }
        let r = x.sqrt();
        self.unary(r, 0.5 / r)
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value().tanh();
        self.unary(t, 1.0 - t * t)
    }

    /// `max(0, x)`; the derivative at 0 is taken as 0.
    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        if x > 0.0 {
            self.unary(x, 1.0)
        } else {
            self.unary(0.0, 0.0)
        }
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        self.unary(x * x, 2.0 * x)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(c * self.value(), c)
    }

    /// Identity in the forward pass, zero derivative in the reverse pass.
    pub fn stop_gradient(self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    /// `log N(self | mean, std²)`.
    pub fn gaussian_log_pdf(self, mean: Var<'t>, std: Var<'t>) -> Var<'t> {
        let (x, m, s) = (self.value(), mean.value(), std.value());
        if !(s > 0.0) {
            self.tape.record_error(AutodiffError::Domain {
                op: "gaussian_log_pdf",
                value: s,
            });
        }
        let u = (x - m) / s;
        let value = -0.5 * u * u - s.ln() - 0.5 * (2.0 * PI).ln();
        let dx = -u / s;
        self.tape
            .push(value, &[(self, dx), (mean, -dx), (std, (u * u - 1.0) / s)])
    }
}

macro_rules! binary_ops {
    ($($trait:ident $method:ident);*) => {$(
        impl<'t> $trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let c = self.tape.constant(rhs);
                $trait::$method(self, c)
            }
        }
        impl<'t> $trait<Var<'t>> for f64 {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let c = rhs.tape.constant(self);
                $trait::$method(c, rhs)
            }
        }
    )*};
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .push(self.value() + rhs.value(), &[(self, 1.0), (rhs, 1.0)])
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .push(self.value() - rhs.value(), &[(self, 1.0), (rhs, -1.0)])
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        self.tape.push(a * b, &[(self, b), (rhs, a)])
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        if b == 0.0 {
            self.tape.record_error(AutodiffError::Domain { op: "div", value: b });
        }
        self.tape.push(a / b, &[(self, 1.0 / b), (rhs, -a / (b * b))])
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let v = -self.value();
        self.unary(v, -1.0)
    }
}

binary_ops!(Add add; Sub sub; Mul mul; Div div);

/// Numerically stable `ln Σ exp(x_i)`; the shift is taken from forward values
/// and does not affect derivatives.
pub fn log_sum_exp<'t>(tape: &'t Tape, xs: &[Var<'t>]) -> Var<'t> {
    let m = xs
        .iter()
        .map(|x| x.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let terms: Vec<_> = xs.iter().map(|&x| (x - m).exp()).collect();
    tape.sum(&terms).ln() + m
}

//! Scalar reverse-mode tape for loss expressions.
//!
//! The network forward/backward passes are hand-written batched kernels; the
//! tape covers only the per-sample expressions built on top of their outputs
//! (importance ratios, clipping, masks, penalties). Its leaf adjoints are the
//! upstream gradients fed into the network backward pass.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Square(usize),
    Min(usize, usize),
    Max(usize, usize),
    Clamp(usize, f64, f64),
    /// Forwards the value; blocks the gradient.
    Detach,
    Sum(Vec<usize>),
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<f64>,
}

/// Adjoints `d out / d node` for every node of a tape.
#[derive(Debug, Clone)]
pub struct Adjoints(Vec<f64>);

impl Adjoints {
    pub fn wrt(&self, v: Var) -> f64 {
        self.0[v.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, val: f64) -> Var {
        self.ops.push(op);
        self.vals.push(val);
        Var(self.vals.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.vals[v.0]
    }

    pub fn leaf(&mut self, x: f64) -> Var {
        self.push(Op::Leaf, x)
    }

    pub fn constant(&mut self, x: f64) -> Var {
        self.push(Op::Const, x)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a.0, b.0), self.vals[a.0] + self.vals[b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a.0, b.0), self.vals[a.0] - self.vals[b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a.0, b.0), self.vals[a.0] * self.vals[b.0])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Div(a.0, b.0), self.vals[a.0] / self.vals[b.0])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a.0), -self.vals[a.0])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.push(Op::Scale(a.0, k), k * self.vals[a.0])
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let c = self.constant(k);
        self.add(a, c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a.0), self.vals[a.0].exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.push(Op::Ln(a.0), self.vals[a.0].ln())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.push(Op::Abs(a.0), self.vals[a.0].abs())
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.vals[a.0];
        self.push(Op::Square(a.0), x * x)
    }

    /// Ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Min(a.0, b.0), self.vals[a.0].min(self.vals[b.0]))
    }

    /// Ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Max(a.0, b.0), self.vals[a.0].max(self.vals[b.0]))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero wherever the clamp is engaged.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.push(Op::Clamp(a.0, lo, hi), self.vals[a.0].clamp(lo, hi))
    }

    pub fn detach(&mut self, a: Var) -> Var {
        self.push(Op::Detach, self.vals[a.0])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let vals: Vec<f64> = xs.iter().map(|v| self.vals[v.0]).collect();
        let total = crate::par::pairwise_sum(&vals);
        self.push(Op::Sum(xs.iter().map(|v| v.0).collect()), total)
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        let s = self.sum(xs);
        self.scale(s, 1.0 / xs.len() as f64)
    }

    /// Reverse sweep from `out`.
    pub fn backward(&self, out: Var) -> Adjoints {
        let mut adj = vec![0.0; self.vals.len()];
        adj[out.0] = 1.0;
        for i in (0..=out.0).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match &self.ops[i] {
                Op::Leaf | Op::Const | Op::Detach => {}
                Op::Add(a, b) => {
                    adj[*a] += g;
                    adj[*b] += g;
                }
                Op::Sub(a, b) => {
                    adj[*a] += g;
                    adj[*b] -= g;
                }
                Op::Mul(a, b) => {
                    adj[*a] += g * self.vals[*b];
                    adj[*b] += g * self.vals[*a];
                }
                Op::Div(a, b) => {
                    let bv = self.vals[*b];
                    adj[*a] += g / bv;
                    adj[*b] -= g * self.vals[*a] / (bv * bv);
                }
                Op::Neg(a) => adj[*a] -= g,
                Op::Scale(a, k) => adj[*a] += g * k,
                Op::Exp(a) => adj[*a] += g * self.vals[i],
                Op::Ln(a) => adj[*a] += g / self.vals[*a],
                Op::Abs(a) => adj[*a] += g * sign(self.vals[*a]),
                Op::Square(a) => adj[*a] += 2.0 * g * self.vals[*a],
                Op::Min(a, b) => {
                    if self.vals[*a] <= self.vals[*b] {
                        adj[*a] += g;
                    } else {
                        adj[*b] += g;
                    }
                }
                Op::Max(a, b) => {
                    if self.vals[*a] >= self.vals[*b] {
                        adj[*a] += g;
                    } else {
                        adj[*b] += g;
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.vals[*a];
                    if x > *lo && x < *hi {
                        adj[*a] += g;
                    }
                }
                Op::Sum(xs) => {
                    for x in xs {
                        adj[*x] += g;
                    }
                }
            }
        }
        Adjoints(adj)
    }
}

/// Sign with `sgn(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let mut t = Tape::new();
        let xs: Vec<Var> = [0.5, -1.5, 3.0].iter().map(|x| t.leaf(*x)).collect();
        let sq: Vec<Var> = xs.iter().map(|x| t.square(*x)).collect();
        let out = t.sum(&sq);
        let adj = t.backward(out);
        for (x, v) in xs.iter().zip([0.5, -1.5, 3.0]) {
            assert_eq!(adj.wrt(*x), 2.0 * v);
        }
    }

    #[test]
    fn detach_keeps_value_and_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(2.0);
        let e = t.exp(x);
        let d = t.detach(e);
        let y = t.mul(d, x);
        assert_eq!(t.value(y), 2.0f64.exp() * 2.0);
        let adj = t.backward(y);
        assert_eq!(adj.wrt(x), 2.0f64.exp());
    }

    #[test]
    fn clamp_zero_outside() {
        let mut t = Tape::new();
        let x = t.leaf(1.5);
        let c = t.clamp(x, 0.8, 1.2);
        assert_eq!(t.value(c), 1.2);
        assert_eq!(t.backward(c).wrt(x), 0.0);
    }

    #[test]
    fn chain_rule_matches_finite_difference() {
        let f = |x: f64, y: f64| {
            let mut t = Tape::new();
            let (a, b) = (t.leaf(x), t.leaf(y));
            let ab = t.div(a, b);
            let l = t.ln(b);
            let m = t.mul(ab, l);
            let ex = t.exp(m);
            let s = t.sub(ex, a);
            let out = t.abs(s);
            (t.value(out), t.backward(out).wrt(a), t.backward(out).wrt(b))
        };
        let (x, y, h) = (0.7, 1.9, 1e-6);
        let (_, gx, gy) = f(x, y);
        let fx = (f(x + h, y).0 - f(x - h, y).0) / (2.0 * h);
        let fy = (f(x, y + h).0 - f(x, y - h).0) / (2.0 * h);
        assert!((gx - fx).abs() < 1e-7 && (gy - fy).abs() < 1e-7);
    }
}

//! Scalar automatic differentiation with a forward dual channel and
//! reverse accumulation over both channels.
//!
//! Numerical code is written once against the [`Ctx`] trait and then run
//! under three engines: [`ValueCtx`] for plain evaluation, [`DualCtx`]
//! for an exact directional derivative carried alongside every value,
//! and [`Tape`] for reverse-mode gradients.  Tape nodes store dual
//! numbers, so a recorded program computes both an output value and its
//! exact derivative along the seeded direction, and the backward pass
//! differentiates any function of *both* channels with respect to the
//! leaf values.

/// Value paired with its derivative along one seeded direction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn constant(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }

    pub fn seeded(v: f64, d: f64) -> Self {
        Dual { v, d }
    }

    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }

    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }

    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }

    fn div(self, o: Dual) -> Dual {
        let q = self.v / o.v;
        Dual { v: q, d: (self.d - q * o.d) / o.v }
    }

    fn neg(self) -> Dual {
        Dual { v: -self.v, d: -self.d }
    }

    fn exp(self) -> Dual {
        let e = self.v.exp();
        Dual { v: e, d: self.d * e }
    }

    fn tanh(self) -> Dual {
        let t = self.v.tanh();
        Dual { v: t, d: self.d * (1.0 - t * t) }
    }

    fn sqrt(self) -> Dual {
        let r = self.v.sqrt();
        Dual { v: r, d: self.d / (2.0 * r) }
    }
}

/// Evaluation engine for code written once over abstract scalars.
///
/// `val` exposes the primal value so callers can branch on it; any such
/// branch is treated as locally constant by the derivative engines.
pub trait Ctx {
    type V: Copy;

    /// Constant with no derivative in any channel.
    fn lit(&mut self, x: f64) -> Self::V;
    /// Primal value, for branching and diagnostics.
    fn val(&self, v: Self::V) -> f64;
    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn div(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn neg(&mut self, a: Self::V) -> Self::V;
    fn exp(&mut self, a: Self::V) -> Self::V;
    fn tanh(&mut self, a: Self::V) -> Self::V;
    fn sqrt(&mut self, a: Self::V) -> Self::V;
}

/// Plain `f64` evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct ValueCtx;

impl Ctx for ValueCtx {
    type V = f64;

    fn lit(&mut self, x: f64) -> f64 {
        x
    }
    fn val(&self, v: f64) -> f64 {
        v
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn div(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    fn tanh(&mut self, a: f64) -> f64 {
        a.tanh()
    }
    fn sqrt(&mut self, a: f64) -> f64 {
        a.sqrt()
    }
}

/// Forward-mode evaluation over dual numbers.
#[derive(Debug, Default, Clone, Copy)]
pub struct DualCtx;

impl Ctx for DualCtx {
    type V = Dual;

    fn lit(&mut self, x: f64) -> Dual {
        Dual::constant(x)
    }
    fn val(&self, v: Dual) -> f64 {
        v.v
    }
    fn add(&mut self, a: Dual, b: Dual) -> Dual {
        a.add(b)
    }
    fn sub(&mut self, a: Dual, b: Dual) -> Dual {
        a.sub(b)
    }
    fn mul(&mut self, a: Dual, b: Dual) -> Dual {
        a.mul(b)
    }
    fn div(&mut self, a: Dual, b: Dual) -> Dual {
        a.div(b)
    }
    fn neg(&mut self, a: Dual) -> Dual {
        a.neg()
    }
    fn exp(&mut self, a: Dual) -> Dual {
        a.exp()
    }
    fn tanh(&mut self, a: Dual) -> Dual {
        a.tanh()
    }
    fn sqrt(&mut self, a: Dual) -> Dual {
        a.sqrt()
    }
}

/// Handle to a recorded tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeIdx(u32);

impl TapeIdx {
    /// Position of the node on its tape; indexes the adjoint vector
    /// returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Lit,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Exp(u32),
    Tanh(u32),
    Sqrt(u32),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    val: Dual,
    op: Op,
}

/// Recorded computation over dual numbers.
///
/// Leaves are registered with [`Tape::leaf`]; everything else is pushed
/// through the [`Ctx`] methods.  [`Tape::backward`] propagates adjoint
/// pairs, one per channel, from seeded nodes to every leaf, so a scalar
/// objective may depend on output values and output derivatives at the
/// same time.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Clears all nodes while keeping the allocation.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, val: Dual) -> TapeIdx {
        self.push(val, Op::Leaf)
    }

    /// Value and forward derivative of a recorded node.
    pub fn value(&self, idx: TapeIdx) -> Dual {
        self.nodes[idx.0 as usize].val
    }

    fn push(&mut self, val: Dual, op: Op) -> TapeIdx {
        let idx = u32::try_from(self.nodes.len()).expect("tape exceeds u32 indexing");
        self.nodes.push(Node { val, op });
        TapeIdx(idx)
    }

    /// Reverse sweep from the seeded nodes.
    ///
    /// Each seed is the partial derivative of the objective with respect
    /// to that node's value channel and derivative channel.  The result
    /// holds one adjoint pair per node; the objective gradient with
    /// respect to a leaf's value is the `v` component of its adjoint.
    pub fn backward(&self, seeds: &[(TapeIdx, Dual)]) -> Vec<Dual> {
        let mut bar = vec![Dual::constant(0.0); self.nodes.len()];
        for (idx, seed) in seeds {
            let b = &mut bar[idx.0 as usize];
            b.v += seed.v;
            b.d += seed.d;
        }
        for i in (0..self.nodes.len()).rev() {
            let w = bar[i];
            if w.v == 0.0 && w.d == 0.0 {
                continue;
            }
            let node = self.nodes[i];
            match node.op {
                Op::Leaf | Op::Lit => {}
                Op::Add(a, b) => {
                    let (a, b) = (a as usize, b as usize);
                    bar[a].v += w.v;
                    bar[a].d += w.d;
                    bar[b].v += w.v;
                    bar[b].d += w.d;
                }
                Op::Sub(a, b) => {
                    let (a, b) = (a as usize, b as usize);
                    bar[a].v += w.v;
                    bar[a].d += w.d;
                    bar[b].v -= w.v;
                    bar[b].d -= w.d;
                }
                Op::Mul(a, b) => {
                    let (ai, bi) = (a as usize, b as usize);
                    let av = self.nodes[ai].val;
                    let bv = self.nodes[bi].val;
                    bar[ai].v += w.v * bv.v + w.d * bv.d;
                    bar[ai].d += w.d * bv.v;
                    bar[bi].v += w.v * av.v + w.d * av.d;
                    bar[bi].d += w.d * av.v;
                }
                Op::Div(a, b) => {
                    let (ai, bi) = (a as usize, b as usize);
                    let av = self.nodes[ai].val;
                    let bv = self.nodes[bi].val;
                    let inv = 1.0 / bv.v;
                    let inv2 = inv * inv;
                    bar[ai].v += w.v * inv - w.d * bv.d * inv2;
                    bar[ai].d += w.d * inv;
                    bar[bi].v += -w.v * av.v * inv2
                        + w.d * (-av.d * inv2 + 2.0 * av.v * bv.d * inv2 * inv);
                    bar[bi].d += -w.d * av.v * inv2;
                }
                Op::Neg(a) => {
                    let a = a as usize;
                    bar[a].v -= w.v;
                    bar[a].d -= w.d;
                }
                Op::Exp(a) => {
                    let ai = a as usize;
                    let ad = self.nodes[ai].val.d;
                    let ev = node.val.v;
                    bar[ai].v += w.v * ev + w.d * ad * ev;
                    bar[ai].d += w.d * ev;
                }
                Op::Tanh(a) => {
                    let ai = a as usize;
                    let ad = self.nodes[ai].val.d;
                    let t = node.val.v;
                    let g = 1.0 - t * t;
                    bar[ai].v += w.v * g - w.d * ad * 2.0 * t * g;
                    bar[ai].d += w.d * g;
                }
                Op::Sqrt(a) => {
                    let ai = a as usize;
                    let ad = self.nodes[ai].val.d;
                    let r = node.val.v;
                    let g = 0.5 / r;
                    bar[ai].v += w.v * g - w.d * ad * 0.25 / (r * r * r);
                    bar[ai].d += w.d * g;
                }
            }
        }
        bar
    }
}

impl Ctx for Tape {
    type V = TapeIdx;

    fn lit(&mut self, x: f64) -> TapeIdx {
        self.push(Dual::constant(x), Op::Lit)
    }

    fn val(&self, v: TapeIdx) -> f64 {
        self.nodes[v.0 as usize].val.v
    }

    fn add(&mut self, a: TapeIdx, b: TapeIdx) -> TapeIdx {
        let val = self.value(a).add(self.value(b));
        self.push(val, Op::Add(a.0, b.0))
    }

    fn sub(&mut self, a: TapeIdx, b: TapeIdx) -> TapeIdx {
        let val = self.value(a).sub(self.value(b));
        self.push(val, Op::Sub(a.0, b.0))
    }

    fn mul(&mut self, a: TapeIdx, b: TapeIdx) -> TapeIdx {
        let val = self.value(a).mul(self.value(b));
        self.push(val, Op::Mul(a.0, b.0))
    }

    fn div(&mut self, a: TapeIdx, b: TapeIdx) -> TapeIdx {
        let val = self.value(a).div(self.value(b));
        self.push(val, Op::Div(a.0, b.0))
    }

    fn neg(&mut self, a: TapeIdx) -> TapeIdx {
        let val = self.value(a).neg();
        self.push(val, Op::Neg(a.0))
    }

    fn exp(&mut self, a: TapeIdx) -> TapeIdx {
        let val = self.value(a).exp();
        self.push(val, Op::Exp(a.0))
    }

    fn tanh(&mut self, a: TapeIdx) -> TapeIdx {
        let val = self.value(a).tanh();
        self.push(val, Op::Tanh(a.0))
    }

    fn sqrt(&mut self, a: TapeIdx) -> TapeIdx {
        let val = self.value(a).sqrt();
        self.push(val, Op::Sqrt(a.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exercises every primitive at least once.
    fn expression<C: Ctx>(ctx: &mut C, x: C::V, y: C::V, z: C::V) -> C::V {
        let xy = ctx.mul(x, y);
        let t = ctx.tanh(xy);
        let two = ctx.lit(2.0);
        let shifted = ctx.add(y, two);
        let ratio = ctx.div(x, shifted);
        let e = ctx.exp(ratio);
        let x2 = ctx.mul(x, x);
        let z2 = ctx.mul(z, z);
        let sum = ctx.add(x2, z2);
        let one = ctx.lit(1.0);
        let sum1 = ctx.add(sum, one);
        let root = ctx.sqrt(sum1);
        let half = ctx.lit(0.5);
        let scaled = ctx.mul(root, half);
        let a = ctx.add(t, e);
        let b = ctx.sub(a, scaled);
        let nz = ctx.neg(z);
        ctx.add(b, nz)
    }

    fn eval_value(x: f64, y: f64, z: f64) -> f64 {
        let mut ctx = ValueCtx;
        expression(&mut ctx, x, y, z)
    }

    #[test]
    fn engines_compute_identical_values() {
        let (x, y, z) = (0.7, -0.4, 1.3);
        let plain = eval_value(x, y, z);

        let mut dual = DualCtx;
        let d = expression(
            &mut dual,
            Dual::seeded(x, 1.0),
            Dual::constant(y),
            Dual::constant(z),
        );
        assert_eq!(d.v, plain);

        let mut tape = Tape::new();
        let lx = tape.leaf(Dual::seeded(x, 1.0));
        let ly = tape.leaf(Dual::constant(y));
        let lz = tape.leaf(Dual::constant(z));
        let out = expression(&mut tape, lx, ly, lz);
        assert_eq!(tape.value(out).v, plain);
        assert_eq!(tape.value(out).d, d.d);
    }

    #[test]
    fn dual_channel_matches_finite_differences() {
        let (x, y, z) = (0.9, 0.25, -0.6);
        let mut dual = DualCtx;
        let d = expression(
            &mut dual,
            Dual::seeded(x, 1.0),
            Dual::constant(y),
            Dual::constant(z),
        );
        let h = 1e-6;
        let fd = (eval_value(x + h, y, z) - eval_value(x - h, y, z)) / (2.0 * h);
        assert!(
            (d.d - fd).abs() < 1e-6 * (1.0 + fd.abs()),
            "dual {} vs finite difference {}",
            d.d,
            fd
        );
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        let inputs = [0.45, -0.8, 1.1];
        let mut tape = Tape::new();
        let leaves: Vec<TapeIdx> = inputs.iter().map(|&v| tape.leaf(Dual::constant(v))).collect();
        let out = expression(&mut tape, leaves[0], leaves[1], leaves[2]);
        let bar = tape.backward(&[(out, Dual::seeded(1.0, 0.0))]);

        let h = 1e-6;
        for (i, leaf) in leaves.iter().enumerate() {
            let mut plus = inputs;
            let mut minus = inputs;
            plus[i] += h;
            minus[i] -= h;
            let fd = (eval_value(plus[0], plus[1], plus[2])
                - eval_value(minus[0], minus[1], minus[2]))
                / (2.0 * h);
            let got = bar[leaf.0 as usize].v;
            assert!(
                (got - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                "input {i}: gradient {got} vs finite difference {fd}"
            );
        }
    }

    /// Objective mixing the output value and the output's forward
    /// derivative, so the backward pass must propagate second-order
    /// information through the dual channel.
    #[test]
    fn mixed_channel_gradient_matches_finite_differences() {
        let params = [0.35, -0.55];
        let t0 = 0.4;

        // L(theta) evaluated under forward mode with the time seeded.
        let objective = |p: &[f64; 2]| -> f64 {
            let mut dual = DualCtx;
            let out = expression(
                &mut dual,
                Dual::constant(p[0]),
                Dual::constant(p[1]),
                Dual::seeded(t0, 1.0),
            );
            (out.v - 0.3) * (out.v - 0.3) + 2.0 * (out.d + 0.15) * (out.d + 0.15)
        };

        let mut tape = Tape::new();
        let lp0 = tape.leaf(Dual::constant(params[0]));
        let lp1 = tape.leaf(Dual::constant(params[1]));
        let lt = tape.leaf(Dual::seeded(t0, 1.0));
        let out = expression(&mut tape, lp0, lp1, lt);
        let w = tape.value(out);
        let seed = Dual::seeded(2.0 * (w.v - 0.3), 4.0 * (w.d + 0.15));
        let bar = tape.backward(&[(out, seed)]);

        let h = 1e-6;
        for (i, leaf) in [lp0, lp1].iter().enumerate() {
            let mut plus = params;
            let mut minus = params;
            plus[i] += h;
            minus[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let got = bar[leaf.0 as usize].v;
            assert!(
                (got - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                "param {i}: gradient {got} vs finite difference {fd}"
            );
        }
    }

    #[test]
    fn seeds_accumulate_linearly() {
        let mut tape = Tape::new();
        let x = tape.leaf(Dual::constant(0.8));
        let y = tape.leaf(Dual::constant(-1.2));
        let p = tape.mul(x, y);
        let q = tape.exp(x);

        let both = tape.backward(&[
            (p, Dual::seeded(1.0, 0.0)),
            (q, Dual::seeded(0.5, 0.0)),
        ]);
        let only_p = tape.backward(&[(p, Dual::seeded(1.0, 0.0))]);
        let only_q = tape.backward(&[(q, Dual::seeded(0.5, 0.0))]);
        for i in 0..tape.len() {
            assert!((both[i].v - only_p[i].v - only_q[i].v).abs() < 1e-15);
        }
    }

    #[test]
    fn tape_reset_reuses_storage() {
        let mut tape = Tape::new();
        let x = tape.leaf(Dual::constant(2.0));
        let _ = tape.sqrt(x);
        assert_eq!(tape.len(), 2);
        tape.reset();
        assert!(tape.is_empty());
        let y = tape.leaf(Dual::constant(9.0));
        let r = tape.sqrt(y);
        assert_eq!(tape.val(r), 3.0);
    }
}

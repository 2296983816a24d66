//! Scalar reverse-mode automatic differentiation.
//!
//! A [`Tape`] is a flat, topologically ordered record of primitive
//! operations. Each node stores its operand indices and the *numeric values*
//! of its local partial derivatives, computed eagerly during the forward
//! pass. The backward sweep is therefore branch-free: it visits nodes once in
//! reverse order and performs two multiply-accumulates per node, regardless
//! of which operation produced the node.
//!
//! Parameters are ordinary leaf nodes registered through
//! [`Tape::param_block`]; their adjoints are the gradients. Positions,
//! encodings and other non-differentiated inputs enter as constant leaves,
//! which keeps tapes small: only the parameter-dependent spine of a
//! computation occupies nodes.
//!
//! Tapes are single-owner during construction; `clear` retains capacity so a
//! tape can be reused across optimization steps without reallocating.

use alloc::vec;
use alloc::vec::Vec;

use crate::vec3::Vec3;

/// Index of a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct VarId(pub u32);

#[derive(Clone, Copy)]
struct Node {
    a: u32,
    b: u32,
    pa: f64,
    pb: f64,
}

/// Contiguous run of parameter leaves on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ParamBlock {
    base: u32,
    len: u32,
}

impl ParamBlock {
    #[inline]
    pub fn len(&self) -> usize {
        self.len as usize
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Variable id of the i-th parameter in the block.
    #[inline]
    pub fn var(&self, i: usize) -> VarId {
        debug_assert!((i as u32) < self.len);
        VarId(self.base + i as u32)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
}

/// Adjoints of every node after a backward sweep.
pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    #[inline]
    pub fn of(&self, id: VarId) -> f64 {
        self.adj[id.0 as usize]
    }

    /// Gradient slice for a parameter block (adjoints of its leaves).
    pub fn block(&self, block: ParamBlock) -> &[f64] {
        &self.adj[block.base as usize..(block.base + block.len) as usize]
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all nodes but keep allocations for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
    }

    #[inline]
    pub fn val(&self, id: VarId) -> f64 {
        self.vals[id.0 as usize]
    }

    #[inline]
    fn push(&mut self, node: Node, val: f64) -> VarId {
        let id = self.nodes.len() as u32;
        self.nodes.push(node);
        self.vals.push(val);
        VarId(id)
    }

    #[inline]
    fn leaf_node(idx: u32) -> Node {
        // Self-referential with zero partials: the backward sweep adds
        // 0*adjoint to the node's own (already consumed) adjoint, a no-op.
        Node {
            a: idx,
            b: idx,
            pa: 0.0,
            pb: 0.0,
        }
    }

    /// Constant leaf: receives no gradient.
    #[inline]
    pub fn leaf(&mut self, v: f64) -> VarId {
        let idx = self.nodes.len() as u32;
        self.push(Self::leaf_node(idx), v)
    }

    /// Register a run of parameter leaves whose adjoints are gradients.
    pub fn param_block(&mut self, params: &[f64]) -> ParamBlock {
        let base = self.nodes.len() as u32;
        for &p in params {
            self.leaf(p);
        }
        ParamBlock {
            base,
            len: params.len() as u32,
        }
    }

    #[inline]
    fn binary(&mut self, a: VarId, b: VarId, pa: f64, pb: f64, val: f64) -> VarId {
        debug_assert!((a.0 as usize) < self.nodes.len() && (b.0 as usize) < self.nodes.len());
        self.push(
            Node {
                a: a.0,
                b: b.0,
                pa,
                pb,
            },
            val,
        )
    }

    #[inline]
    fn unary(&mut self, a: VarId, pa: f64, val: f64) -> VarId {
        self.binary(a, a, pa, 0.0, val)
    }

    #[inline]
    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.val(a) + self.val(b);
        self.binary(a, b, 1.0, 1.0, v)
    }

    #[inline]
    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.val(a) - self.val(b);
        self.binary(a, b, 1.0, -1.0, v)
    }

    #[inline]
    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.val(a), self.val(b));
        self.binary(a, b, vb, va, va * vb)
    }

    #[inline]
    pub fn div(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.val(a), self.val(b));
        self.binary(a, b, 1.0 / vb, -va / (vb * vb), va / vb)
    }

    #[inline]
    pub fn neg(&mut self, a: VarId) -> VarId {
        let v = -self.val(a);
        self.unary(a, -1.0, v)
    }

    /// a + c for a constant c.
    #[inline]
    pub fn addc(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.val(a) + c;
        self.unary(a, 1.0, v)
    }

    /// a * c for a constant c.
    #[inline]
    pub fn mulc(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.val(a) * c;
        self.unary(a, c, v)
    }

    /// acc + w * c for a constant c: the fused inner op of an affine layer
    /// over constant inputs (one node per weight instead of two).
    #[inline]
    pub fn madd_c(&mut self, acc: VarId, w: VarId, c: f64) -> VarId {
        let v = self.val(acc) + self.val(w) * c;
        self.binary(acc, w, 1.0, c, v)
    }

    #[inline]
    pub fn square(&mut self, a: VarId) -> VarId {
        let va = self.val(a);
        self.unary(a, 2.0 * va, va * va)
    }

    #[inline]
    pub fn sqrt(&mut self, a: VarId) -> VarId {
        let v = libm::sqrt(self.val(a));
        self.unary(a, 0.5 / v, v)
    }

    #[inline]
    pub fn exp(&mut self, a: VarId) -> VarId {
        let v = libm::exp(self.val(a));
        self.unary(a, v, v)
    }

    #[inline]
    pub fn ln(&mut self, a: VarId) -> VarId {
        let va = self.val(a);
        self.unary(a, 1.0 / va, libm::log(va))
    }

    #[inline]
    pub fn sin(&mut self, a: VarId) -> VarId {
        let va = self.val(a);
        self.unary(a, libm::cos(va), libm::sin(va))
    }

    #[inline]
    pub fn cos(&mut self, a: VarId) -> VarId {
        let va = self.val(a);
        self.unary(a, -libm::sin(va), libm::cos(va))
    }

    /// Numerically stable softplus ln(1+e^x); derivative is the logistic.
    #[inline]
    pub fn softplus(&mut self, a: VarId) -> VarId {
        let x = self.val(a);
        self.unary(a, logistic(x), softplus(x))
    }

    /// Logistic sigmoid 1/(1+e^-x).
    #[inline]
    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let s = logistic(self.val(a));
        self.unary(a, s * (1.0 - s), s)
    }

    #[inline]
    pub fn abs(&mut self, a: VarId) -> VarId {
        let va = self.val(a);
        // Subgradient 1 at zero, consistent with the max(x,-x) reading.
        let p = if va < 0.0 { -1.0 } else { 1.0 };
        self.unary(a, p, libm::fabs(va))
    }

    /// Dot product of a variable 3-vector with itself plus chain helpers.
    pub fn dot3(&mut self, a: [VarId; 3], b: [VarId; 3]) -> VarId {
        let mut acc = self.mul(a[0], b[0]);
        let t1 = self.mul(a[1], b[1]);
        acc = self.add(acc, t1);
        let t2 = self.mul(a[2], b[2]);
        self.add(acc, t2)
    }

    /// Squared Euclidean distance between a variable point and a constant.
    pub fn dist2_to_const(&mut self, p: [VarId; 3], q: Vec3) -> VarId {
        let dx = self.addc(p[0], -q.x);
        let dy = self.addc(p[1], -q.y);
        let dz = self.addc(p[2], -q.z);
        let sx = self.square(dx);
        let sy = self.square(dy);
        let s = self.add(sx, sy);
        let sz = self.square(dz);
        self.add(s, sz)
    }

    /// Structural check: every operand index precedes its consumer. Used by
    /// tests; the builder API cannot produce a violation.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| (n.a as usize) <= i && (n.b as usize) <= i)
    }

    /// Reverse sweep from the given seeds. Each node is visited exactly once;
    /// returns the adjoint of every node.
    pub fn backward_seeded(&self, seeds: &[(VarId, f64)]) -> Adjoints {
        let mut adj = vec![0.0f64; self.nodes.len()];
        for &(id, s) in seeds {
            adj[id.0 as usize] += s;
        }
        for i in (0..self.nodes.len()).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let n = self.nodes[i];
            adj[n.a as usize] += n.pa * g;
            adj[n.b as usize] += n.pb * g;
        }
        Adjoints { adj }
    }

    /// Convenience: single-output backward returning the gradients of one
    /// parameter block.
    pub fn backward(&self, output: VarId, seed: f64, block: ParamBlock) -> Vec<f64> {
        let adj = self.backward_seeded(&[(output, seed)]);
        adj.block(block).to_vec()
    }
}

/// Stable softplus ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|).
#[inline]
pub fn softplus(x: f64) -> f64 {
    let m = if x > 0.0 { x } else { 0.0 };
    m + libm::log1p(libm::exp(-libm::fabs(x)))
}

/// Stable logistic sigmoid.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Central-difference spatial gradient of a plain scalar field,
/// (f(x+h e_i) - f(x-h e_i)) / (2h) per axis.
pub fn spatial_gradient(f: impl Fn(Vec3) -> f64, x: Vec3, h: f64) -> Vec3 {
    debug_assert!(h > 0.0);
    let mut g = [0.0f64; 3];
    for (i, gi) in g.iter_mut().enumerate() {
        let hi = f(x.with_axis(i, x.axis(i) + h));
        let lo = f(x.with_axis(i, x.axis(i) - h));
        *gi = (hi - lo) / (2.0 * h);
    }
    Vec3::from_array(g)
}

/// Central-difference spatial gradient where each stencil evaluation runs on
/// the tape, so the result stays differentiable w.r.t. field parameters
/// (first-order reverse mode only; no forward-over-reverse needed).
pub fn spatial_gradient_taped(
    tape: &mut Tape,
    mut f: impl FnMut(&mut Tape, Vec3) -> VarId,
    x: Vec3,
    h: f64,
) -> [VarId; 3] {
    debug_assert!(h > 0.0);
    let inv = 1.0 / (2.0 * h);
    let mut out = [VarId(0); 3];
    for (i, o) in out.iter_mut().enumerate() {
        let hi = f(tape, x.with_axis(i, x.axis(i) + h));
        let lo = f(tape, x.with_axis(i, x.axis(i) - h));
        let d = tape.sub(hi, lo);
        *o = tape.mulc(d, inv);
    }
    out
}

//! Reverse-mode differentiation on a Wengert tape, plus forward-mode
//! directional derivatives (JVPs) over the same recording.
//!
//! The tape records a small fixed set of primitives (affine maps, elementwise
//! tanh, concatenation, reductions) with cached primal values. A backward
//! sweep visits nodes in reverse recording order exactly once and accumulates
//! adjoints into parameter and input gradients. Trace terms of the loss enter
//! only through first-order expressions recorded as ordinary primal ops, so
//! no higher-order machinery is needed.
//!
//! Numeric kernels are shared between the recording path ([`Tape`]) and the
//! plain evaluation path ([`Eval`]) through the [`Exec`] trait, so a recorded
//! computation and its unrecorded twin produce bit-identical values.

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};

/// Handle to a parameter registered in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Owned collection of parameter matrices. Vectors are stored as `n×1`
/// matrices so gradients have one uniform layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<DenseMatrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add_matrix(&mut self, m: DenseMatrix) -> ParamId {
        self.entries.push(m);
        ParamId(self.entries.len() - 1)
    }

    pub fn add_vector(&mut self, v: Vec<f64>) -> ParamId {
        let n = v.len();
        self.add_matrix(DenseMatrix::new(n, 1, v).expect("finite vector"))
    }

    pub fn mat(&self, id: ParamId) -> &DenseMatrix {
        &self.entries[id.0]
    }

    pub fn mat_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.entries[id.0]
    }

    /// Bias-style access: the raw data slice of a stored vector/matrix.
    pub fn raw(&self, id: ParamId) -> &[f64] {
        self.entries[id.0].data()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|m| m.data().len()).sum()
    }

    /// All parameters concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for m in &self.entries {
            out.extend_from_slice(m.data());
        }
        out
    }

    /// Writes a flat vector (same layout as [`ParamSet::flatten`]) back into
    /// the stored matrices.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::DimensionMismatch {
                what: "flat parameters",
                expected: self.num_scalars(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for m in &mut self.entries {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|m| (m.rows(), m.cols())).collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf whose gradient is reported by `backward`.
    Input,
    /// Leaf treated as a constant; no gradient is tracked.
    Const,
    MatVec {
        w: ParamId,
        x: NodeId,
    },
    Affine {
        w: ParamId,
        b: ParamId,
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    OneMinusSquare {
        x: NodeId,
    },
    Hadamard {
        a: NodeId,
        b: NodeId,
    },
    AddScaled {
        a: NodeId,
        b: NodeId,
        c: f64,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    AddConst {
        x: NodeId,
        c: f64,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Dot {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Component {
        x: NodeId,
        i: usize,
    },
    /// `out_j = Σ_{i<n} Wout[i,j]·Win[j,i]` — the θ-dependent column weights
    /// of an analytic two-layer Jacobian trace.
    DiagPairSum {
        w_out: ParamId,
        w_in: ParamId,
        n: usize,
    },
    /// Main-diagonal sum of a parameter matrix.
    TraceOf {
        w: ParamId,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
    /// Cached derivative data (for tanh: `1 − y²`).
    aux: Option<Vec<f64>>,
}

/// Gradients produced by a backward sweep: one flat block per registered
/// parameter (layout of [`ParamSet::flatten`]) plus per-input adjoints.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Vec<f64>>,
    inputs: Vec<(NodeId, Vec<f64>)>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> &[f64] {
        &self.params[id.0]
    }

    pub fn input(&self, id: NodeId) -> Option<&[f64]> {
        self.inputs
            .iter()
            .find(|(n, _)| *n == id)
            .map(|(_, g)| g.as_slice())
    }

    /// All parameter gradients concatenated, matching `ParamSet::flatten`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in &self.params {
            out.extend_from_slice(p);
        }
        out
    }
}

// ── shared numeric kernels ──────────────────────────────────────────────

fn k_one_minus_square(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| 1.0 - v * v).collect()
}

fn k_hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn k_add_scaled(a: &[f64], b: &[f64], c: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + c * y).collect()
}

fn k_scale(x: &[f64], c: f64) -> Vec<f64> {
    x.iter().map(|v| c * v).collect()
}

fn k_add_const(x: &[f64], c: f64) -> Vec<f64> {
    x.iter().map(|v| v + c).collect()
}

fn k_concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

fn k_diag_pair_sum(w_out: &DenseMatrix, w_in: &DenseMatrix, n: usize) -> Vec<f64> {
    let h = w_out.cols();
    let mut out = Vec::with_capacity(h);
    for j in 0..h {
        let mut acc = 0.0;
        for i in 0..n {
            acc += w_out.get(i, j) * w_in.get(j, i);
        }
        out.push(acc);
    }
    out
}

// ── execution abstraction ───────────────────────────────────────────────

/// One set of primitives, two interpreters: [`Eval`] computes values
/// directly, [`Tape`] computes the same values while recording nodes.
pub trait Exec {
    type V: Clone;

    fn constant(&mut self, v: &[f64]) -> Self::V;
    fn matvec(&mut self, w: ParamId, x: &Self::V) -> Self::V;
    fn affine(&mut self, w: ParamId, b: ParamId, x: &Self::V) -> Self::V;
    fn tanh(&mut self, x: &Self::V) -> Self::V;
    fn one_minus_square(&mut self, x: &Self::V) -> Self::V;
    fn hadamard(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn add_scaled(&mut self, a: &Self::V, b: &Self::V, c: f64) -> Self::V;
    fn scale(&mut self, x: &Self::V, c: f64) -> Self::V;
    fn add_const(&mut self, x: &Self::V, c: f64) -> Self::V;
    fn concat(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn dot(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sum(&mut self, x: &Self::V) -> Self::V;
    fn component(&mut self, x: &Self::V, i: usize) -> Self::V;
    fn diag_pair_sum(&mut self, w_out: ParamId, w_in: ParamId, n: usize) -> Self::V;
    fn trace_of(&mut self, w: ParamId) -> Self::V;
    fn read(&self, v: &Self::V) -> Vec<f64>;
}

/// Plain evaluator over a parameter set; no recording.
pub struct Eval<'p> {
    params: &'p ParamSet,
}

impl<'p> Eval<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params }
    }
}

impl Exec for Eval<'_> {
    type V = Vec<f64>;

    fn constant(&mut self, v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }
    fn matvec(&mut self, w: ParamId, x: &Vec<f64>) -> Vec<f64> {
        linalg::matvec_unchecked(self.params.mat(w), x)
    }
    fn affine(&mut self, w: ParamId, b: ParamId, x: &Vec<f64>) -> Vec<f64> {
        linalg::affine_unchecked(self.params.mat(w), self.params.raw(b), x)
    }
    fn tanh(&mut self, x: &Vec<f64>) -> Vec<f64> {
        linalg::tanh_unchecked(x)
    }
    fn one_minus_square(&mut self, x: &Vec<f64>) -> Vec<f64> {
        k_one_minus_square(x)
    }
    fn hadamard(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        k_hadamard(a, b)
    }
    fn add_scaled(&mut self, a: &Vec<f64>, b: &Vec<f64>, c: f64) -> Vec<f64> {
        k_add_scaled(a, b, c)
    }
    fn scale(&mut self, x: &Vec<f64>, c: f64) -> Vec<f64> {
        k_scale(x, c)
    }
    fn add_const(&mut self, x: &Vec<f64>, c: f64) -> Vec<f64> {
        k_add_const(x, c)
    }
    fn concat(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        k_concat(a, b)
    }
    fn dot(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        vec![linalg::dot(a, b)]
    }
    fn sum(&mut self, x: &Vec<f64>) -> Vec<f64> {
        vec![x.iter().sum()]
    }
    fn component(&mut self, x: &Vec<f64>, i: usize) -> Vec<f64> {
        vec![x[i]]
    }
    fn diag_pair_sum(&mut self, w_out: ParamId, w_in: ParamId, n: usize) -> Vec<f64> {
        k_diag_pair_sum(self.params.mat(w_out), self.params.mat(w_in), n)
    }
    fn trace_of(&mut self, w: ParamId) -> Vec<f64> {
        vec![self.params.mat(w).trace()]
    }
    fn read(&self, v: &Vec<f64>) -> Vec<f64> {
        v.clone()
    }
}

// ── the tape ────────────────────────────────────────────────────────────

/// Recording of a forward computation over a borrowed, immutable parameter
/// set. A tape is single-threaded while recording; independent tapes over
/// the same parameters may run concurrently.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    finalized: Option<NodeId>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            finalized: None,
        }
    }

    pub fn param_set(&self) -> &ParamSet {
        self.params
    }

    /// Registers a differentiable leaf; its adjoint is reported by
    /// [`Tape::backward`].
    pub fn input(&mut self, v: &[f64]) -> NodeId {
        self.push(Op::Input, v.to_vec(), None)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Marks the output node; required before `backward` or `jvp`.
    pub fn finalize(&mut self, out: NodeId) {
        self.finalized = Some(out);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.finalized
    }

    fn push(&mut self, op: Op, value: Vec<f64>, aux: Option<Vec<f64>>) -> NodeId {
        self.nodes.push(Node { op, value, aux });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse sweep from the finalized output. `seed` is the adjoint of the
    /// output (for a scalar loss, `&[1.0]`). Visits each node exactly once in
    /// reverse recording order; cost is linear in tape length.
    pub fn backward(&self, seed: &[f64]) -> Result<Gradients> {
        let out = self
            .finalized
            .ok_or(Error::State("backward on unfinalized tape"))?;
        if seed.len() != self.nodes[out.0].value.len() {
            return Err(Error::DimensionMismatch {
                what: "backward seed",
                expected: self.nodes[out.0].value.len(),
                got: seed.len(),
            });
        }
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        let mut pgrads: Vec<Vec<f64>> = (0..self.params.len())
            .map(|i| vec![0.0; self.params.mat(ParamId(i)).data().len()])
            .collect();
        let mut inputs: Vec<(NodeId, Vec<f64>)> = Vec::new();
        adj[out.0].copy_from_slice(seed);

        for idx in (0..self.nodes.len()).rev() {
            let s = std::mem::take(&mut adj[idx]);
            match &self.nodes[idx].op {
                Op::Input => inputs.push((NodeId(idx), s)),
                Op::Const => {}
                Op::MatVec { w, x } => {
                    let wm = self.params.mat(*w);
                    let xv = &self.nodes[x.0].value;
                    accumulate_matvec(wm, &mut pgrads[w.0], &s, xv, &mut adj[x.0]);
                }
                Op::Affine { w, b, x } => {
                    let wm = self.params.mat(*w);
                    let xv = &self.nodes[x.0].value;
                    accumulate_matvec(wm, &mut pgrads[w.0], &s, xv, &mut adj[x.0]);
                    for (g, si) in pgrads[b.0].iter_mut().zip(&s) {
                        *g += si;
                    }
                }
                Op::Tanh { x } => {
                    let d = self.nodes[idx].aux.as_ref().expect("tanh cache");
                    for ((a, si), di) in adj[x.0].iter_mut().zip(&s).zip(d) {
                        *a += si * di;
                    }
                }
                Op::OneMinusSquare { x } => {
                    let xv = &self.nodes[x.0].value;
                    for ((a, si), xi) in adj[x.0].iter_mut().zip(&s).zip(xv) {
                        *a += -2.0 * xi * si;
                    }
                }
                Op::Hadamard { a, b } => {
                    let bv = &self.nodes[b.0].value;
                    for ((g, si), bi) in adj[a.0].iter_mut().zip(&s).zip(bv) {
                        *g += si * bi;
                    }
                    let av = &self.nodes[a.0].value;
                    for ((g, si), ai) in adj[b.0].iter_mut().zip(&s).zip(av) {
                        *g += si * ai;
                    }
                }
                Op::AddScaled { a, b, c } => {
                    for (g, si) in adj[a.0].iter_mut().zip(&s) {
                        *g += si;
                    }
                    for (g, si) in adj[b.0].iter_mut().zip(&s) {
                        *g += c * si;
                    }
                }
                Op::Scale { x, c } => {
                    for (g, si) in adj[x.0].iter_mut().zip(&s) {
                        *g += c * si;
                    }
                }
                Op::AddConst { x, .. } => {
                    for (g, si) in adj[x.0].iter_mut().zip(&s) {
                        *g += si;
                    }
                }
                Op::Concat { a, b } => {
                    let na = self.nodes[a.0].value.len();
                    for (g, si) in adj[a.0].iter_mut().zip(&s[..na]) {
                        *g += si;
                    }
                    for (g, si) in adj[b.0].iter_mut().zip(&s[na..]) {
                        *g += si;
                    }
                }
                Op::Dot { a, b } => {
                    let si = s[0];
                    let bv = &self.nodes[b.0].value;
                    for (g, bi) in adj[a.0].iter_mut().zip(bv) {
                        *g += si * bi;
                    }
                    let av = &self.nodes[a.0].value;
                    for (g, ai) in adj[b.0].iter_mut().zip(av) {
                        *g += si * ai;
                    }
                }
                Op::Sum { x } => {
                    let si = s[0];
                    for g in adj[x.0].iter_mut() {
                        *g += si;
                    }
                }
                Op::Component { x, i } => {
                    adj[x.0][*i] += s[0];
                }
                Op::DiagPairSum { w_out, w_in, n } => {
                    let h = self.params.mat(*w_out).cols();
                    let win = self.params.mat(*w_in);
                    let wout = self.params.mat(*w_out);
                    let cin = win.cols();
                    for j in 0..h {
                        let sj = s[j];
                        if sj == 0.0 {
                            continue;
                        }
                        for i in 0..*n {
                            pgrads[w_out.0][i * h + j] += sj * win.get(j, i);
                            pgrads[w_in.0][j * cin + i] += sj * wout.get(i, j);
                        }
                    }
                }
                Op::TraceOf { w } => {
                    let n = self.params.mat(*w).rows();
                    for i in 0..n {
                        pgrads[w.0][i * n + i] += s[0];
                    }
                }
            }
        }

        Ok(Gradients {
            params: pgrads,
            inputs,
        })
    }

    /// Forward-mode sweep: the Jacobian-vector product of the finalized
    /// output with respect to input node `x`, in direction `v`. Parameters
    /// and other leaves are held constant.
    pub fn jvp(&self, x: NodeId, v: &[f64]) -> Result<Vec<f64>> {
        let out = self
            .finalized
            .ok_or(Error::State("jvp on unfinalized tape"))?;
        let xn = &self.nodes[x.0];
        if !matches!(xn.op, Op::Input | Op::Const) {
            return Err(Error::State("jvp direction must attach to a leaf node"));
        }
        if v.len() != xn.value.len() {
            return Err(Error::DimensionMismatch {
                what: "jvp direction",
                expected: xn.value.len(),
                got: v.len(),
            });
        }
        let mut tan: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let t = match &node.op {
                Op::Input | Op::Const => {
                    if idx == x.0 {
                        v.to_vec()
                    } else {
                        vec![0.0; node.value.len()]
                    }
                }
                Op::MatVec { w, x } | Op::Affine { w, x, .. } => {
                    linalg::matvec_unchecked(self.params.mat(*w), &tan[x.0])
                }
                Op::Tanh { x } => {
                    let d = node.aux.as_ref().expect("tanh cache");
                    k_hadamard(d, &tan[x.0])
                }
                Op::OneMinusSquare { x } => {
                    let xv = &self.nodes[x.0].value;
                    xv.iter()
                        .zip(&tan[x.0])
                        .map(|(xi, ti)| -2.0 * xi * ti)
                        .collect()
                }
                Op::Hadamard { a, b } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    av.iter()
                        .zip(bv)
                        .zip(tan[a.0].iter().zip(&tan[b.0]))
                        .map(|((ai, bi), (ta, tb))| ta * bi + ai * tb)
                        .collect()
                }
                Op::AddScaled { a, b, c } => k_add_scaled(&tan[a.0], &tan[b.0], *c),
                Op::Scale { x, c } => k_scale(&tan[x.0], *c),
                Op::AddConst { x, .. } => tan[x.0].clone(),
                Op::Concat { a, b } => k_concat(&tan[a.0], &tan[b.0]),
                Op::Dot { a, b } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    vec![linalg::dot(&tan[a.0], bv) + linalg::dot(av, &tan[b.0])]
                }
                Op::Sum { x } => vec![tan[x.0].iter().sum()],
                Op::Component { x, i } => vec![tan[x.0][*i]],
                Op::DiagPairSum { w_out, .. } => {
                    vec![0.0; self.params.mat(*w_out).cols()]
                }
                Op::TraceOf { .. } => vec![0.0],
            };
            tan.push(t);
        }
        Ok(tan[out.0].clone())
    }

    /// Recomputes every node from its operands and compares against the
    /// cached primals. Returns true when the replay is bit-identical.
    pub fn replay_matches(&self) -> bool {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input | Op::Const => node.value.clone(),
                Op::MatVec { w, x } => linalg::matvec_unchecked(self.params.mat(*w), &vals[x.0]),
                Op::Affine { w, b, x } => {
                    linalg::affine_unchecked(self.params.mat(*w), self.params.raw(*b), &vals[x.0])
                }
                Op::Tanh { x } => linalg::tanh_unchecked(&vals[x.0]),
                Op::OneMinusSquare { x } => k_one_minus_square(&vals[x.0]),
                Op::Hadamard { a, b } => k_hadamard(&vals[a.0], &vals[b.0]),
                Op::AddScaled { a, b, c } => k_add_scaled(&vals[a.0], &vals[b.0], *c),
                Op::Scale { x, c } => k_scale(&vals[x.0], *c),
                Op::AddConst { x, c } => k_add_const(&vals[x.0], *c),
                Op::Concat { a, b } => k_concat(&vals[a.0], &vals[b.0]),
                Op::Dot { a, b } => vec![linalg::dot(&vals[a.0], &vals[b.0])],
                Op::Sum { x } => vec![vals[x.0].iter().sum()],
                Op::Component { x, i } => vec![vals[x.0][*i]],
                Op::DiagPairSum { w_out, w_in, n } => {
                    k_diag_pair_sum(self.params.mat(*w_out), self.params.mat(*w_in), *n)
                }
                Op::TraceOf { w } => vec![self.params.mat(*w).trace()],
            };
            vals.push(v);
        }
        self.nodes.iter().zip(&vals).all(|(n, v)| {
            n.value
                .iter()
                .zip(v)
                .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }
}

fn accumulate_matvec(w: &DenseMatrix, pg: &mut [f64], s: &[f64], xv: &[f64], adj_x: &mut [f64]) {
    // dW = s·xᵀ
    let cols = w.cols();
    for (i, si) in s.iter().enumerate() {
        if *si == 0.0 {
            continue;
        }
        let row = &mut pg[i * cols..(i + 1) * cols];
        for (g, xj) in row.iter_mut().zip(xv) {
            *g += si * xj;
        }
    }
    // dx = Wᵀ·s
    let wts = linalg::matvec_transposed_unchecked(w, s);
    for (g, t) in adj_x.iter_mut().zip(&wts) {
        *g += t;
    }
}

impl Exec for Tape<'_> {
    type V = NodeId;

    fn constant(&mut self, v: &[f64]) -> NodeId {
        self.push(Op::Const, v.to_vec(), None)
    }
    fn matvec(&mut self, w: ParamId, x: &NodeId) -> NodeId {
        let v = linalg::matvec_unchecked(self.params.mat(w), &self.nodes[x.0].value);
        self.push(Op::MatVec { w, x: *x }, v, None)
    }
    fn affine(&mut self, w: ParamId, b: ParamId, x: &NodeId) -> NodeId {
        let v = linalg::affine_unchecked(
            self.params.mat(w),
            self.params.raw(b),
            &self.nodes[x.0].value,
        );
        self.push(Op::Affine { w, b, x: *x }, v, None)
    }
    fn tanh(&mut self, x: &NodeId) -> NodeId {
        let y = linalg::tanh_unchecked(&self.nodes[x.0].value);
        let d = k_one_minus_square(&y);
        self.push(Op::Tanh { x: *x }, y, Some(d))
    }
    fn one_minus_square(&mut self, x: &NodeId) -> NodeId {
        let v = k_one_minus_square(&self.nodes[x.0].value);
        self.push(Op::OneMinusSquare { x: *x }, v, None)
    }
    fn hadamard(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = k_hadamard(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(Op::Hadamard { a: *a, b: *b }, v, None)
    }
    fn add_scaled(&mut self, a: &NodeId, b: &NodeId, c: f64) -> NodeId {
        let v = k_add_scaled(&self.nodes[a.0].value, &self.nodes[b.0].value, c);
        self.push(Op::AddScaled { a: *a, b: *b, c }, v, None)
    }
    fn scale(&mut self, x: &NodeId, c: f64) -> NodeId {
        let v = k_scale(&self.nodes[x.0].value, c);
        self.push(Op::Scale { x: *x, c }, v, None)
    }
    fn add_const(&mut self, x: &NodeId, c: f64) -> NodeId {
        let v = k_add_const(&self.nodes[x.0].value, c);
        self.push(Op::AddConst { x: *x, c }, v, None)
    }
    fn concat(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = k_concat(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(Op::Concat { a: *a, b: *b }, v, None)
    }
    fn dot(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = vec![linalg::dot(&self.nodes[a.0].value, &self.nodes[b.0].value)];
        self.push(Op::Dot { a: *a, b: *b }, v, None)
    }
    fn sum(&mut self, x: &NodeId) -> NodeId {
        let v = vec![self.nodes[x.0].value.iter().sum()];
        self.push(Op::Sum { x: *x }, v, None)
    }
    fn component(&mut self, x: &NodeId, i: usize) -> NodeId {
        let v = vec![self.nodes[x.0].value[i]];
        self.push(Op::Component { x: *x, i }, v, None)
    }
    fn diag_pair_sum(&mut self, w_out: ParamId, w_in: ParamId, n: usize) -> NodeId {
        let v = k_diag_pair_sum(self.params.mat(w_out), self.params.mat(w_in), n);
        self.push(Op::DiagPairSum { w_out, w_in, n }, v, None)
    }
    fn trace_of(&mut self, w: ParamId) -> NodeId {
        let v = vec![self.params.mat(w).trace()];
        self.push(Op::TraceOf { w }, v, None)
    }
    fn read(&self, v: &NodeId) -> Vec<f64> {
        self.nodes[v.0].value.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    fn rand_params(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> (ParamSet, ParamId, ParamId) {
        let mut ps = ParamSet::new();
        let w = ps.add_matrix(DenseMatrix::new(rows, cols, rand_vec(rng, rows * cols)).unwrap());
        let b = ps.add_vector(rand_vec(rng, rows));
        (ps, w, b)
    }

    /// Records f(x) = sum(tanh(W·x + b) ⊙ tanh(W·x + b)) — enough structure
    /// to touch most primitives.
    fn record_scalar<'p>(
        ps: &'p ParamSet,
        w: ParamId,
        b: ParamId,
        x: &[f64],
    ) -> (Tape<'p>, NodeId) {
        let mut tape = Tape::new(ps);
        let xin = tape.input(x);
        let pre = tape.affine(w, b, &xin);
        let h = tape.tanh(&pre);
        let sq = tape.hadamard(&h, &h);
        let out = tape.sum(&sq);
        tape.finalize(out);
        (tape, xin)
    }

    #[test]
    fn identity_tape_backward() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let x = tape.input(&[2.0, -3.0]);
        tape.finalize(x);
        let g = tape.backward(&[1.0, 1.0]).unwrap();
        assert_eq!(g.input(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn matvec_backward_matches_matrix_calculus() {
        // y = W·x: dW = s·xᵀ, dx = Wᵀ·s
        let mut ps = ParamSet::new();
        let w = ps.add_matrix(DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut tape = Tape::new(&ps);
        let x = tape.input(&[5.0, -1.0]);
        let y = tape.matvec(w, &x);
        tape.finalize(y);
        let s = [1.0, 2.0];
        let g = tape.backward(&s).unwrap();
        // s·xᵀ = [[5,-1],[10,-2]]
        assert_eq!(g.param(w), &[5.0, -1.0, 10.0, -2.0]);
        // Wᵀ·s = [1+6, 2+8] = [7, 10]
        assert_eq!(g.input(x).unwrap(), &[7.0, 10.0]);
    }

    #[test]
    fn backward_requires_finalize() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let _ = tape.input(&[1.0]);
        assert!(matches!(tape.backward(&[1.0]), Err(Error::State(_))));
    }

    #[test]
    fn backward_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let (ps, w, b) = rand_params(&mut rng, 4, 3);
            let x = rand_vec(&mut rng, 3);
            let (tape, xin) = record_scalar(&ps, w, b, &x);
            let g = tape.backward(&[1.0]).unwrap();

            let f = |ps: &ParamSet, x: &[f64]| -> f64 {
                let (t, _) = record_scalar(ps, w, b, x);
                t.value(t.output().unwrap())[0]
            };

            let h = 1e-5;
            // input gradient
            for i in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (f(&ps, &xp) - f(&ps, &xm)) / (2.0 * h);
                let an = g.input(xin).unwrap()[i];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-6,
                    "input grad {i}: fd={fd} analytic={an}"
                );
            }
            // a few parameter entries
            let flat = ps.flatten();
            let gflat = g.flatten();
            for idx in [0, 3, 7, flat.len() - 1] {
                let mut pp = ps.clone();
                let mut fv = flat.clone();
                fv[idx] += h;
                pp.assign_flat(&fv).unwrap();
                let fp = f(&pp, &x);
                fv[idx] -= 2.0 * h;
                pp.assign_flat(&fv).unwrap();
                let fm = f(&pp, &x);
                let fd = (fp - fm) / (2.0 * h);
                let an = gflat[idx];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-6,
                    "param grad {idx}: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn jvp_identity_and_linear() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let x = tape.input(&[1.0, 2.0]);
        tape.finalize(x);
        assert_eq!(tape.jvp(x, &[3.0, -4.0]).unwrap(), vec![3.0, -4.0]);

        let mut ps = ParamSet::new();
        let a = ps.add_matrix(DenseMatrix::new(2, 2, vec![0.0, 1.0, -1.0, 0.0]).unwrap());
        let mut tape = Tape::new(&ps);
        let x = tape.input(&[1.0, 1.0]);
        let y = tape.matvec(a, &x);
        tape.finalize(y);
        // Jacobian of A·x is A, so jvp = A·v
        assert_eq!(tape.jvp(x, &[2.0, 5.0]).unwrap(), vec![5.0, -2.0]);
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (ps, w, b) = rand_params(&mut rng, 5, 4);
        let x = rand_vec(&mut rng, 4);
        let v = rand_vec(&mut rng, 4);

        let record = |x: &[f64]| -> (Tape<'_>, NodeId) {
            let mut t = Tape::new(&ps);
            let xin = t.input(x);
            let pre = t.affine(w, b, &xin);
            let hh = t.tanh(&pre);
            t.finalize(hh);
            (t, xin)
        };
        let (tape, xin) = record(&x);
        let jv = tape.jvp(xin, &v).unwrap();

        let h = 1e-5;
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, d)| a + h * d).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, d)| a - h * d).collect();
        let (tp, _) = record(&xp);
        let (tm, _) = record(&xm);
        let fp = tp.value(tp.output().unwrap()).to_vec();
        let fm = tm.value(tm.output().unwrap()).to_vec();
        for i in 0..jv.len() {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            let denom = fd.abs().max(jv[i].abs()).max(1e-8);
            assert!((fd - jv[i]).abs() / denom < 1e-6);
        }
    }

    #[test]
    fn jvp_dimension_mismatch_rejected() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let x = tape.input(&[1.0, 2.0]);
        tape.finalize(x);
        assert!(matches!(
            tape.jvp(x, &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn transpose_consistency() {
        // ⟨seed, J·v⟩ == ⟨Jᵀ·seed, v⟩
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let (ps, w, b) = rand_params(&mut rng, 4, 4);
            let x = rand_vec(&mut rng, 4);
            let mut tape = Tape::new(&ps);
            let xin = tape.input(&x);
            let pre = tape.affine(w, b, &xin);
            let h = tape.tanh(&pre);
            let out = tape.matvec(w, &h);
            tape.finalize(out);

            let v = rand_vec(&mut rng, 4);
            let seed = rand_vec(&mut rng, 4);
            let jv = tape.jvp(xin, &v).unwrap();
            let g = tape.backward(&seed).unwrap();
            let vjp = g.input(xin).unwrap();
            let lhs = linalg::dot(&seed, &jv);
            let rhs = linalg::dot(vjp, &v);
            assert!((lhs - rhs).abs() < 1e-10, "lhs={lhs} rhs={rhs}");
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (ps, w, b) = rand_params(&mut rng, 6, 5);
        let x = rand_vec(&mut rng, 5);
        let (tape, _) = record_scalar(&ps, w, b, &x);
        assert!(tape.replay_matches());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        const N: usize = 3; // output length fed to DiagPairSum
        const H: usize = 4; // hidden length
        const CIN: usize = N + 2;

        struct Fixture {
            ps: ParamSet,
            w1: ParamId,
            b1: ParamId,
            w2: ParamId,
            sq: ParamId,
        }

        fn fixture(pvals: &[f64]) -> Fixture {
            let mut ps = ParamSet::new();
            let mut it = pvals.iter().copied();
            let mut take = |n: usize| -> Vec<f64> { (0..n).map(|_| it.next().unwrap()).collect() };
            let w1 = ps.add_matrix(DenseMatrix::new(H, CIN, take(H * CIN)).unwrap());
            let b1 = ps.add_vector(take(H));
            let w2 = ps.add_matrix(DenseMatrix::new(N, H, take(N * H)).unwrap());
            let sq = ps.add_matrix(DenseMatrix::new(N, N, take(N * N)).unwrap());
            Fixture { ps, w1, b1, w2, sq }
        }

        const P_LEN: usize = H * CIN + H + N * H + N * N;

        /// Scalar composite touching every primitive once.
        fn record<'p>(f: &'p Fixture, x: &[f64]) -> (Tape<'p>, NodeId) {
            let mut t = Tape::new(&f.ps);
            let xin = t.input(x);
            let c = t.constant(&[0.4, -0.9]);
            let u = t.concat(&xin, &c);
            let p = t.affine(f.w1, f.b1, &u);
            let h = t.tanh(&p);
            let q = t.one_minus_square(&h);
            let r = t.hadamard(&h, &q);
            let s1 = t.add_scaled(&r, &h, 0.7);
            let s2 = t.scale(&s1, -1.3);
            let s3 = t.add_const(&s2, 0.25);
            let dp = t.dot(&s3, &h);
            let sm = t.sum(&s3);
            let cm = t.component(&s3, 0);
            let cvec = t.diag_pair_sum(f.w2, f.w1, N);
            let dq = t.dot(&q, &cvec);
            let tr = t.trace_of(f.sq);
            let mut out = t.add_scaled(&dp, &sm, 0.5);
            out = t.add_scaled(&out, &cm, 2.0);
            out = t.add_scaled(&out, &dq, 1.5);
            out = t.add_scaled(&out, &tr, -0.8);
            t.finalize(out);
            (t, xin)
        }

        fn vec_output<'p>(f: &'p Fixture, x: &[f64]) -> (Tape<'p>, NodeId, NodeId) {
            // Vector-valued variant for transpose consistency.
            let mut t = Tape::new(&f.ps);
            let xin = t.input(x);
            let c = t.constant(&[0.4, -0.9]);
            let u = t.concat(&xin, &c);
            let p = t.affine(f.w1, f.b1, &u);
            let h = t.tanh(&p);
            let q = t.one_minus_square(&h);
            let r = t.hadamard(&h, &q);
            let out = t.add_scaled(&r, &p, -0.4);
            t.finalize(out);
            (t, xin, out)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn gradients_match_finite_differences(
                x in proptest::collection::vec(-2.0f64..2.0, N),
                pvals in proptest::collection::vec(-2.0f64..2.0, P_LEN),
            ) {
                let f = fixture(&pvals);
                let (tape, xin) = record(&f, &x);
                let g = tape.backward(&[1.0]).unwrap();
                let gflat = g.flatten();
                let val = |f: &Fixture, x: &[f64]| {
                    let (t, _) = record(f, x);
                    t.value(t.output().unwrap())[0]
                };
                let h = 1e-5;
                for i in 0..x.len() {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (val(&f, &xp) - val(&f, &xm)) / (2.0 * h);
                    let an = g.input(xin).unwrap()[i];
                    let close = (fd - an).abs() < 1e-9
                        || (fd - an).abs() / fd.abs().max(an.abs()) < 1e-6;
                    prop_assert!(close, "input {}: fd={} an={}", i, fd, an);
                }
                for idx in [0usize, H * CIN - 1, H * CIN + 1, H * CIN + H + 3, P_LEN - 1] {
                    let mut fv = pvals.clone();
                    fv[idx] += h;
                    let fp = fixture(&fv);
                    let lp = val(&fp, &x);
                    fv[idx] -= 2.0 * h;
                    let fm = fixture(&fv);
                    let lm = val(&fm, &x);
                    let fd = (lp - lm) / (2.0 * h);
                    let an = gflat[idx];
                    let close = (fd - an).abs() < 1e-9
                        || (fd - an).abs() / fd.abs().max(an.abs()) < 1e-6;
                    prop_assert!(close, "param {}: fd={} an={}", idx, fd, an);
                }
            }

            #[test]
            fn jvp_vjp_transpose_consistency(
                x in proptest::collection::vec(-2.0f64..2.0, N),
                v in proptest::collection::vec(-2.0f64..2.0, N),
                seed in proptest::collection::vec(-2.0f64..2.0, H),
                pvals in proptest::collection::vec(-2.0f64..2.0, P_LEN),
            ) {
                let f = fixture(&pvals);
                let (tape, xin, _) = vec_output(&f, &x);
                let jv = tape.jvp(xin, &v).unwrap();
                let g = tape.backward(&seed).unwrap();
                let vjp = g.input(xin).unwrap();
                let lhs = linalg::dot(&seed, &jv);
                let rhs = linalg::dot(vjp, &v);
                prop_assert!((lhs - rhs).abs() < 1e-10, "lhs={} rhs={}", lhs, rhs);
            }

            #[test]
            fn replay_reproduces_primals_bit_for_bit(
                x in proptest::collection::vec(-2.0f64..2.0, N),
                pvals in proptest::collection::vec(-2.0f64..2.0, P_LEN),
            ) {
                let f = fixture(&pvals);
                let (tape, _) = record(&f, &x);
                prop_assert!(tape.replay_matches());
            }
        }
    }

    #[test]
    fn diag_pair_sum_value_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let n = 3; // embedding dim
        let h = 4; // hidden width
        let cin = n + 2;
        let mut ps = ParamSet::new();
        let w_in = ps.add_matrix(DenseMatrix::new(h, cin, rand_vec(&mut rng, h * cin)).unwrap());
        let w_out = ps.add_matrix(DenseMatrix::new(n, h, rand_vec(&mut rng, n * h)).unwrap());

        let mut tape = Tape::new(&ps);
        let c = tape.diag_pair_sum(w_out, w_in, n);
        let dvec = tape.input(&rand_vec(&mut rng, h));
        let tr = tape.dot(&dvec, &c);
        tape.finalize(tr);

        // value definition
        let c_val = tape.value(c).to_vec();
        for (j, cv) in c_val.iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..n {
                acc += ps.mat(w_out).get(i, j) * ps.mat(w_in).get(j, i);
            }
            assert!((cv - acc).abs() < 1e-15);
        }

        // gradient vs finite differences
        let g = tape.backward(&[1.0]).unwrap();
        let gflat = g.flatten();
        let flat = ps.flatten();
        let dval = tape.value(dvec).to_vec();
        let f = |ps: &ParamSet| -> f64 {
            let mut t = Tape::new(ps);
            let c = t.diag_pair_sum(w_out, w_in, n);
            let dv = t.input(&dval);
            let tr = t.dot(&dv, &c);
            t.finalize(tr);
            t.value(tr)[0]
        };
        let hstep = 1e-6;
        for idx in [0, 5, flat.len() - 1] {
            let mut pp = ps.clone();
            let mut fv = flat.clone();
            fv[idx] += hstep;
            pp.assign_flat(&fv).unwrap();
            let fp = f(&pp);
            fv[idx] -= 2.0 * hstep;
            pp.assign_flat(&fv).unwrap();
            let fm = f(&pp);
            let fd = (fp - fm) / (2.0 * hstep);
            let an = gflat[idx];
            assert!(
                (fd - an).abs() < 1e-6 * fd.abs().max(an.abs()).max(1.0),
                "idx {idx}: fd={fd} an={an}"
            );
        }
    }
}

//! Minimal static-graph autodiff engine used by the deraining networks.
//!
//! Graphs are built once per (batch shape, mode) and reused across steps:
//! every node owns preallocated value/gradient/scratch buffers, so the
//! training loop performs no per-step allocation. Convolution, batch norm
//! and the pointwise activation are fused into a single [`Op::Conv`] node;
//! multi-input convolutions gather their sources straight into the padded
//! scratch planes, which stands in for an explicit channel concatenation.
//!
//! `forward` never mutates the parameter store. In train mode the batch-norm
//! statistics it would like to publish are staged on the node, and the
//! training loop applies them explicitly through [`Graph::commit_bn_stats`].
//! All reductions run in a fixed order; identical inputs give bit-identical
//! outputs.

pub mod kernels;

use std::collections::HashMap;

use kernels::{conv_bwd_input_plane, conv_bwd_weights, conv_fwd, pad_plane};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

pub type Id = usize;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub enum Act {
    None,
    LeakyRelu(f64),
    Relu,
    Sigmoid,
}

/// Batch-norm attachment for a conv node. `gamma`/`beta` are graph nodes;
/// the running statistics live only in the store and are addressed by index.
#[derive(Clone, Debug)]
pub struct Bn {
    pub gamma: Id,
    pub beta: Id,
    pub rmean: usize,
    pub rvar: usize,
}

#[derive(Clone, Debug)]
enum Op {
    /// Caller-provided tensor; filled via [`Graph::set_input`].
    Input,
    /// Copy of a store entry, gradient accumulated by consumers.
    Param { idx: usize },
    /// Fused conv3x3 (+ optional batch norm) (+ activation). Multiple
    /// sources are concatenated along channels in the given order.
    Conv { xs: Vec<Id>, w: Id, b: Id, bn: Option<Bn>, act: Act },
    /// Channel range `[c0, c1)` of the source.
    SliceC { x: Id, c0: usize, c1: usize },
    /// `mu + eps * exp(raw / 2)`, the reparameterized latent draw.
    Reparam { mu: Id, raw: Id, eps: Id },
    /// Summed KL divergence between two diagonal Gaussians given as
    /// (mean, log-variance) pairs: q relative to p. Scalar output.
    KlSum { mu_q: Id, raw_q: Id, mu_p: Id, raw_p: Id },
    /// `sum((a - b)^2)`, scalar output.
    SumSqDiff { a: Id, b: Id },
    /// Elementwise `a + k * b`.
    Axpy { a: Id, b: Id, k: f64 },
    /// Elementwise `k * x`.
    Scale { x: Id, k: f64 },
}

struct Node {
    shape: [usize; 4],
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    /// Conv with BN in train mode: pre-normalization conv output.
    /// KlSum: staging copies of the four inputs during backward.
    saved: Vec<f64>,
    /// Per-channel [mean, invstd, new_rmean, new_rvar] staged by BN.
    bn_saved: Vec<f64>,
    /// Padded input planes for the image currently being processed.
    pad_a: Vec<f64>,
    /// Padded output-gradient planes (backward only).
    pad_b: Vec<f64>,
    /// Weight copy used while source gradients are borrowed mutably.
    wbuf: Vec<f64>,
}

fn numel(shape: &[usize; 4]) -> usize {
    shape.iter().product()
}

/// Two disjoint mutable references into one slice.
fn two_muts<T>(sl: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b, "aliased indices");
    if a < b {
        let (l, r) = sl.split_at_mut(b);
        (&mut l[a], &mut r[0])
    } else {
        let (l, r) = sl.split_at_mut(a);
        (&mut r[0], &mut l[b])
    }
}

/// Named f64 tensor with a trainable flag. Entry order is creation order
/// and is the serialization order used by checkpoints.
#[derive(Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

#[derive(Clone, Default)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, trainable: bool) -> usize {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "entry {name}: data does not match shape"
        );
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let idx = self.entries.len();
        self.index.insert(name.to_string(), idx);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            data,
            trainable,
        });
        idx
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_idx(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &ParamEntry {
        &self.entries[self.idx(name)]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    pub mode: Mode,
    bn_ready: bool,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph { nodes: Vec::new(), mode, bn_ready: false }
    }

    fn push(&mut self, shape: [usize; 4], op: Op) -> Id {
        let n = numel(&shape);
        self.nodes.push(Node {
            shape,
            data: vec![0.0; n],
            grad: vec![0.0; n],
            op,
            saved: Vec::new(),
            bn_saved: Vec::new(),
            pad_a: Vec::new(),
            pad_b: Vec::new(),
            wbuf: Vec::new(),
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, shape: [usize; 4]) -> Id {
        self.push(shape, Op::Input)
    }

    /// Adds a node mirroring a store entry. 1-d entries of length c are
    /// treated as [1, c, 1, 1].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Id {
        let idx = store.idx(name);
        let s = &store.entries[idx].shape;
        let shape = match s.len() {
            4 => [s[0], s[1], s[2], s[3]],
            1 => [1, s[0], 1, 1],
            _ => panic!("parameter {name}: unsupported rank {}", s.len()),
        };
        self.push(shape, Op::Param { idx })
    }

    pub fn shape(&self, id: Id) -> [usize; 4] {
        self.nodes[id].shape
    }

    pub fn conv(&mut self, xs: &[Id], w: Id, b: Id, bn: Option<Bn>, act: Act) -> Id {
        assert!(!xs.is_empty());
        let [n, _, h, wd] = self.nodes[xs[0]].shape;
        let mut cin = 0;
        for &x in xs {
            let s = self.nodes[x].shape;
            assert_eq!([s[0], s[2], s[3]], [n, h, wd], "conv sources disagree on batch/spatial dims");
            cin += s[1];
        }
        let ws = self.nodes[w].shape;
        assert_eq!([ws[1], ws[2], ws[3]], [cin, 3, 3], "weight shape mismatch");
        let oc = ws[0];
        assert_eq!(self.nodes[b].shape, [1, oc, 1, 1], "bias shape mismatch");
        if let Some(bn) = &bn {
            assert_eq!(self.nodes[bn.gamma].shape, [1, oc, 1, 1]);
            assert_eq!(self.nodes[bn.beta].shape, [1, oc, 1, 1]);
        }
        let save_conv = bn.is_some() && self.mode == Mode::Train;
        let id = self.push([n, oc, h, wd], Op::Conv { xs: xs.to_vec(), w, b, bn: bn.clone(), act });
        let pp = (h + 2) * (wd + 2);
        let node = &mut self.nodes[id];
        node.pad_a = vec![0.0; cin * pp];
        node.pad_b = vec![0.0; oc * pp];
        node.wbuf = vec![0.0; oc * cin * 9];
        if save_conv {
            node.saved = vec![0.0; n * oc * h * wd];
        }
        if bn.is_some() {
            node.bn_saved = vec![0.0; 4 * oc];
        }
        id
    }

    pub fn slice_c(&mut self, x: Id, c0: usize, c1: usize) -> Id {
        let [n, c, h, w] = self.nodes[x].shape;
        assert!(c0 < c1 && c1 <= c, "channel slice out of range");
        self.push([n, c1 - c0, h, w], Op::SliceC { x, c0, c1 })
    }

    pub fn reparam(&mut self, mu: Id, raw: Id, eps: Id) -> Id {
        let s = self.nodes[mu].shape;
        assert_eq!(s, self.nodes[raw].shape);
        assert_eq!(s, self.nodes[eps].shape);
        self.push(s, Op::Reparam { mu, raw, eps })
    }

    pub fn kl_sum(&mut self, mu_q: Id, raw_q: Id, mu_p: Id, raw_p: Id) -> Id {
        let s = self.nodes[mu_q].shape;
        for &x in &[raw_q, mu_p, raw_p] {
            assert_eq!(s, self.nodes[x].shape);
        }
        let id = self.push([1, 1, 1, 1], Op::KlSum { mu_q, raw_q, mu_p, raw_p });
        self.nodes[id].saved = vec![0.0; 4 * numel(&s)];
        id
    }

    pub fn sum_sq_diff(&mut self, a: Id, b: Id) -> Id {
        assert_ne!(a, b);
        assert_eq!(self.nodes[a].shape, self.nodes[b].shape);
        self.push([1, 1, 1, 1], Op::SumSqDiff { a, b })
    }

    pub fn axpy(&mut self, a: Id, b: Id, k: f64) -> Id {
        assert_ne!(a, b);
        let s = self.nodes[a].shape;
        assert_eq!(s, self.nodes[b].shape);
        self.push(s, Op::Axpy { a, b, k })
    }

    pub fn scale(&mut self, x: Id, k: f64) -> Id {
        let s = self.nodes[x].shape;
        self.push(s, Op::Scale { x, k })
    }

    pub fn set_input(&mut self, id: Id, data: &[f64]) {
        let node = &mut self.nodes[id];
        assert!(matches!(node.op, Op::Input), "set_input on non-input node");
        assert_eq!(data.len(), node.data.len(), "input length mismatch");
        node.data.copy_from_slice(data);
    }

    pub fn data(&self, id: Id) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn grad(&self, id: Id) -> &[f64] {
        &self.nodes[id].grad
    }

    pub fn scalar(&self, id: Id) -> f64 {
        assert_eq!(numel(&self.nodes[id].shape), 1);
        self.nodes[id].data[0]
    }

    /// (store index, gradient) for every parameter node. Indices repeat if
    /// an entry is referenced by more than one node; callers accumulate.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Param { idx } => Some((idx, n.grad.as_slice())),
            _ => None,
        })
    }

    pub fn forward(&mut self, store: &ParamStore) {
        for id in 0..self.nodes.len() {
            let op = self.nodes[id].op.clone();
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &mut rest[0];
            match op {
                Op::Input => {}
                Op::Param { idx } => node.data.copy_from_slice(&store.entries[idx].data),
                Op::Conv { ref xs, w, b, ref bn, act } => {
                    forward_conv(node, before, store, xs, w, b, bn.as_ref(), act, self.mode);
                }
                Op::SliceC { x, c0, c1 } => {
                    let src = &before[x];
                    let [n, c, h, wd] = src.shape;
                    let plane = h * wd;
                    let cs = c1 - c0;
                    for img in 0..n {
                        for ci in 0..cs {
                            let s = (img * c + c0 + ci) * plane;
                            let d = (img * cs + ci) * plane;
                            node.data[d..d + plane].copy_from_slice(&src.data[s..s + plane]);
                        }
                    }
                }
                Op::Reparam { mu, raw, eps } => {
                    let (m, r, e) = (&before[mu].data, &before[raw].data, &before[eps].data);
                    for j in 0..node.data.len() {
                        node.data[j] = m[j] + e[j] * (r[j] * 0.5).exp();
                    }
                }
                Op::KlSum { mu_q, raw_q, mu_p, raw_p } => {
                    let (mq, rq) = (&before[mu_q].data, &before[raw_q].data);
                    let (mp, rp) = (&before[mu_p].data, &before[raw_p].data);
                    let mut acc = 0.0;
                    for j in 0..mq.len() {
                        let d = mq[j] - mp[j];
                        acc += 0.5 * (rp[j] - rq[j]) + 0.5 * (rq[j] - rp[j]).exp()
                            + 0.5 * d * d * (-rp[j]).exp()
                            - 0.5;
                    }
                    node.data[0] = acc;
                }
                Op::SumSqDiff { a, b } => {
                    let (ad, bd) = (&before[a].data, &before[b].data);
                    let mut acc = 0.0;
                    for j in 0..ad.len() {
                        let d = ad[j] - bd[j];
                        acc += d * d;
                    }
                    node.data[0] = acc;
                }
                Op::Axpy { a, b, k } => {
                    let (ad, bd) = (&before[a].data, &before[b].data);
                    for j in 0..node.data.len() {
                        node.data[j] = ad[j] + k * bd[j];
                    }
                }
                Op::Scale { x, k } => {
                    let xd = &before[x].data;
                    for j in 0..node.data.len() {
                        node.data[j] = k * xd[j];
                    }
                }
            }
        }
        self.bn_ready = self.mode == Mode::Train;
    }

    /// Reverse pass from a scalar loss node. Parameter gradients land on the
    /// corresponding [`Op::Param`] nodes; read them via [`Graph::param_grads`].
    pub fn backward(&mut self, loss: Id) {
        assert_eq!(numel(&self.nodes[loss].shape), 1, "loss must be scalar");
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss].grad[0] = 1.0;
        for id in (0..self.nodes.len()).rev() {
            let op = self.nodes[id].op.clone();
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &mut rest[0];
            match op {
                Op::Input | Op::Param { .. } => {}
                Op::Conv { ref xs, w, b, ref bn, act } => {
                    backward_conv(node, before, xs, w, b, bn.as_ref(), act, self.mode);
                }
                Op::SliceC { x, c0, c1 } => {
                    let src = &mut before[x];
                    let [n, c, h, wd] = src.shape;
                    let plane = h * wd;
                    let cs = c1 - c0;
                    for img in 0..n {
                        for ci in 0..cs {
                            let s = (img * c + c0 + ci) * plane;
                            let d = (img * cs + ci) * plane;
                            for j in 0..plane {
                                src.grad[s + j] += node.grad[d + j];
                            }
                        }
                    }
                }
                Op::Reparam { mu, raw, eps } => {
                    {
                        let m = &mut before[mu];
                        for j in 0..node.grad.len() {
                            m.grad[j] += node.grad[j];
                        }
                    }
                    let (r, e) = two_muts(before, raw, eps);
                    for j in 0..node.grad.len() {
                        r.grad[j] += node.grad[j] * e.data[j] * 0.5 * (r.data[j] * 0.5).exp();
                    }
                }
                Op::KlSum { mu_q, raw_q, mu_p, raw_p } => {
                    let go = node.grad[0];
                    let n = node.saved.len() / 4;
                    node.saved[..n].copy_from_slice(&before[mu_q].data);
                    node.saved[n..2 * n].copy_from_slice(&before[raw_q].data);
                    node.saved[2 * n..3 * n].copy_from_slice(&before[mu_p].data);
                    node.saved[3 * n..].copy_from_slice(&before[raw_p].data);
                    let (mq, rest1) = node.saved.split_at(n);
                    let (rq, rest2) = rest1.split_at(n);
                    let (mp, rp) = rest2.split_at(n);
                    {
                        let t = &mut before[mu_q].grad;
                        for j in 0..n {
                            t[j] += go * (mq[j] - mp[j]) * (-rp[j]).exp();
                        }
                    }
                    {
                        let t = &mut before[mu_p].grad;
                        for j in 0..n {
                            t[j] -= go * (mq[j] - mp[j]) * (-rp[j]).exp();
                        }
                    }
                    {
                        let t = &mut before[raw_q].grad;
                        for j in 0..n {
                            t[j] += go * 0.5 * ((rq[j] - rp[j]).exp() - 1.0);
                        }
                    }
                    {
                        let t = &mut before[raw_p].grad;
                        for j in 0..n {
                            let d = mq[j] - mp[j];
                            t[j] += go * 0.5 * (1.0 - (rq[j] - rp[j]).exp() - d * d * (-rp[j]).exp());
                        }
                    }
                }
                Op::SumSqDiff { a, b } => {
                    let go = node.grad[0];
                    let (an, bn) = two_muts(before, a, b);
                    for j in 0..an.data.len() {
                        let d = 2.0 * (an.data[j] - bn.data[j]) * go;
                        an.grad[j] += d;
                        bn.grad[j] -= d;
                    }
                }
                Op::Axpy { a, b, k } => {
                    {
                        let an = &mut before[a];
                        for j in 0..node.grad.len() {
                            an.grad[j] += node.grad[j];
                        }
                    }
                    let bn = &mut before[b];
                    for j in 0..node.grad.len() {
                        bn.grad[j] += k * node.grad[j];
                    }
                }
                Op::Scale { x, k } => {
                    let xn = &mut before[x];
                    for j in 0..node.grad.len() {
                        xn.grad[j] += k * node.grad[j];
                    }
                }
            }
        }
    }

    /// Writes the batch statistics staged by the latest train-mode forward
    /// into the store's running mean/variance entries.
    pub fn commit_bn_stats(&self, store: &mut ParamStore) {
        assert!(self.bn_ready, "commit_bn_stats requires a preceding train-mode forward");
        for node in &self.nodes {
            if let Op::Conv { bn: Some(bn), .. } = &node.op {
                let oc = node.shape[1];
                for c in 0..oc {
                    store.entries[bn.rmean].data[c] = node.bn_saved[4 * c + 2];
                    store.entries[bn.rvar].data[c] = node.bn_saved[4 * c + 3];
                }
            }
        }
    }
}

#[inline]
fn act_apply(act: Act, data: &mut [f64]) {
    match act {
        Act::None => {}
        Act::LeakyRelu(s) => {
            for v in data {
                if *v < 0.0 {
                    *v *= s;
                }
            }
        }
        Act::Relu => {
            for v in data {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Act::Sigmoid => {
            for v in data {
                *v = 1.0 / (1.0 + (-*v).exp());
            }
        }
    }
}

/// Multiplies the gradient by the activation derivative, which for all
/// supported activations is recoverable from the output value alone.
#[inline]
fn act_backward(act: Act, out: &[f64], grad: &mut [f64]) {
    match act {
        Act::None => {}
        Act::LeakyRelu(s) => {
            for j in 0..grad.len() {
                if out[j] < 0.0 {
                    grad[j] *= s;
                }
            }
        }
        Act::Relu => {
            for j in 0..grad.len() {
                if out[j] <= 0.0 {
                    grad[j] = 0.0;
                }
            }
        }
        Act::Sigmoid => {
            for j in 0..grad.len() {
                grad[j] *= out[j] * (1.0 - out[j]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_conv(
    node: &mut Node,
    before: &[Node],
    store: &ParamStore,
    xs: &[Id],
    w: Id,
    b: Id,
    bn: Option<&Bn>,
    act: Act,
    mode: Mode,
) {
    let [n, oc, h, wd] = node.shape;
    let plane = h * wd;
    let pp = (h + 2) * (wd + 2);
    let cin: usize = xs.iter().map(|&x| before[x].shape[1]).sum();
    let wdat = &before[w].data;
    let bdat = &before[b].data;
    let to_saved = bn.is_some() && mode == Mode::Train;
    for img in 0..n {
        let mut off = 0;
        for &x in xs {
            let src = &before[x];
            let c = src.shape[1];
            for ci in 0..c {
                let s = (img * c + ci) * plane;
                pad_plane(
                    &src.data[s..s + plane],
                    h,
                    wd,
                    &mut node.pad_a[(off + ci) * pp..(off + ci + 1) * pp],
                );
            }
            off += c;
        }
        let out = if to_saved { &mut node.saved } else { &mut node.data };
        conv_fwd(
            &node.pad_a,
            cin,
            h,
            wd,
            wdat,
            bdat,
            oc,
            &mut out[img * oc * plane..(img + 1) * oc * plane],
        );
    }
    if let Some(bn) = bn {
        let gamma = &before[bn.gamma].data;
        let beta = &before[bn.beta].data;
        if mode == Mode::Train {
            let m = (n * plane) as f64;
            for c in 0..oc {
                let mut sum = 0.0;
                for img in 0..n {
                    let s = (img * oc + c) * plane;
                    for v in &node.saved[s..s + plane] {
                        sum += v;
                    }
                }
                let mean = sum / m;
                let mut var = 0.0;
                for img in 0..n {
                    let s = (img * oc + c) * plane;
                    for v in &node.saved[s..s + plane] {
                        let d = v - mean;
                        var += d * d;
                    }
                }
                var /= m;
                let invstd = 1.0 / (var + BN_EPS).sqrt();
                // unbiased variance feeds the running estimate
                let var_u = if m > 1.0 { var * m / (m - 1.0) } else { var };
                let old_rm = store.entries[bn.rmean].data[c];
                let old_rv = store.entries[bn.rvar].data[c];
                node.bn_saved[4 * c] = mean;
                node.bn_saved[4 * c + 1] = invstd;
                node.bn_saved[4 * c + 2] = (1.0 - BN_MOMENTUM) * old_rm + BN_MOMENTUM * mean;
                node.bn_saved[4 * c + 3] = (1.0 - BN_MOMENTUM) * old_rv + BN_MOMENTUM * var_u;
                let (g, bt) = (gamma[c], beta[c]);
                for img in 0..n {
                    let s = (img * oc + c) * plane;
                    for j in 0..plane {
                        node.data[s + j] = g * (node.saved[s + j] - mean) * invstd + bt;
                    }
                }
            }
        } else {
            // frozen statistics; normalize in place on the conv output
            for c in 0..oc {
                let rm = store.entries[bn.rmean].data[c];
                let rv = store.entries[bn.rvar].data[c];
                let invstd = 1.0 / (rv + BN_EPS).sqrt();
                let (g, bt) = (gamma[c], beta[c]);
                for img in 0..n {
                    let s = (img * oc + c) * plane;
                    for v in &mut node.data[s..s + plane] {
                        *v = g * (*v - rm) * invstd + bt;
                    }
                }
            }
        }
    }
    act_apply(act, &mut node.data);
}

#[allow(clippy::too_many_arguments)]
fn backward_conv(
    node: &mut Node,
    before: &mut [Node],
    xs: &[Id],
    w: Id,
    b: Id,
    bn: Option<&Bn>,
    act: Act,
    mode: Mode,
) {
    let [n, oc, h, wd] = node.shape;
    let plane = h * wd;
    let pp = (h + 2) * (wd + 2);
    let cin: usize = xs.iter().map(|&x| before[x].shape[1]).sum();

    act_backward(act, &node.data, &mut node.grad);

    if let Some(bn) = bn {
        assert_eq!(mode, Mode::Train, "backward through frozen batch norm is unsupported");
        let m = (n * plane) as f64;
        // per channel: reduce, then rewrite the gradient in place as the
        // gradient w.r.t. the raw conv output
        for c in 0..oc {
            let mean = node.bn_saved[4 * c];
            let invstd = node.bn_saved[4 * c + 1];
            let gamma = before[bn.gamma].data[c];
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for img in 0..n {
                let s = (img * oc + c) * plane;
                for j in 0..plane {
                    let xhat = (node.saved[s + j] - mean) * invstd;
                    s1 += node.grad[s + j];
                    s2 += node.grad[s + j] * xhat;
                }
            }
            before[bn.gamma].grad[c] += s2;
            before[bn.beta].grad[c] += s1;
            let coef = gamma * invstd;
            for img in 0..n {
                let s = (img * oc + c) * plane;
                for j in 0..plane {
                    let xhat = (node.saved[s + j] - mean) * invstd;
                    node.grad[s + j] = coef * (node.grad[s + j] - s1 / m - xhat * s2 / m);
                }
            }
        }
    }

    node.wbuf.copy_from_slice(&before[w].data);
    for img in 0..n {
        // stage padded input planes and padded output-gradient planes
        let mut off = 0;
        for &x in xs {
            let src = &before[x];
            let c = src.shape[1];
            for ci in 0..c {
                let s = (img * c + ci) * plane;
                pad_plane(
                    &src.data[s..s + plane],
                    h,
                    wd,
                    &mut node.pad_a[(off + ci) * pp..(off + ci + 1) * pp],
                );
            }
            off += c;
        }
        for o in 0..oc {
            let s = (img * oc + o) * plane;
            pad_plane(&node.grad[s..s + plane], h, wd, &mut node.pad_b[o * pp..(o + 1) * pp]);
        }
        {
            let (wn, bnn) = two_muts(before, w, b);
            conv_bwd_weights(
                &node.pad_a,
                cin,
                &node.grad[img * oc * plane..(img + 1) * oc * plane],
                oc,
                h,
                wd,
                &mut wn.grad,
                &mut bnn.grad,
            );
        }
        let mut off = 0;
        for &x in xs {
            let src = &mut before[x];
            let c = src.shape[1];
            for ci in 0..c {
                let d = (img * c + ci) * plane;
                conv_bwd_input_plane(
                    &node.pad_b,
                    oc,
                    cin,
                    off + ci,
                    h,
                    wd,
                    &node.wbuf,
                    &mut src.grad[d..d + plane],
                );
            }
            off += c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn randv(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central finite difference of the loss w.r.t. one store value.
    fn fd_store(g: &mut Graph, store: &mut ParamStore, loss: Id, idx: usize, j: usize) -> f64 {
        let h = 1e-6;
        let orig = store.entries[idx].data[j];
        store.entries[idx].data[j] = orig + h;
        g.forward(store);
        let fp = g.scalar(loss);
        store.entries[idx].data[j] = orig - h;
        g.forward(store);
        let fm = g.scalar(loss);
        store.entries[idx].data[j] = orig;
        (fp - fm) / (2.0 * h)
    }

    fn assert_close(analytic: f64, numeric: f64, what: &str) {
        // absolute floor covers central-difference cancellation noise, e.g.
        // the exactly-zero bias gradient under batch norm
        let tol = 1e-7 + 2e-5 * analytic.abs().max(numeric.abs());
        assert!(
            (analytic - numeric).abs() < tol,
            "{what}: analytic {analytic} vs numeric {numeric}"
        );
    }

    /// Checks every trainable store gradient of a scalar-loss graph against
    /// finite differences. Inputs must already be set.
    fn gradcheck_store(g: &mut Graph, store: &mut ParamStore, loss: Id) {
        g.forward(store);
        g.backward(loss);
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        for (idx, gr) in g.param_grads() {
            let e = grads.entry(idx).or_insert_with(|| vec![0.0; gr.len()]);
            for (a, b) in e.iter_mut().zip(gr) {
                *a += b;
            }
        }
        for (idx, gr) in grads {
            if !store.entries[idx].trainable {
                continue;
            }
            for j in 0..gr.len() {
                let num = fd_store(g, store, loss, idx, j);
                assert_close(gr[j], num, &format!("{}[{}]", store.entries[idx].name, j));
            }
        }
    }

    fn add_conv_params(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        oc: usize,
        cin: usize,
        bn: bool,
    ) {
        store.add(&format!("{name}.w"), vec![oc, cin, 3, 3], randv(rng, oc * cin * 9), true);
        store.add(&format!("{name}.b"), vec![oc], randv(rng, oc), true);
        if bn {
            store.add(&format!("{name}.gamma"), vec![oc], (0..oc).map(|i| 1.0 + 0.1 * i as f64).collect(), true);
            store.add(&format!("{name}.beta"), vec![oc], randv(rng, oc), true);
            store.add(&format!("{name}.rmean"), vec![oc], vec![0.0; oc], false);
            store.add(&format!("{name}.rvar"), vec![oc], vec![1.0; oc], false);
        }
    }

    fn bn_handle(g: &mut Graph, store: &ParamStore, name: &str) -> Bn {
        Bn {
            gamma: g.param(store, &format!("{name}.gamma")),
            beta: g.param(store, &format!("{name}.beta")),
            rmean: store.idx(&format!("{name}.rmean")),
            rvar: store.idx(&format!("{name}.rvar")),
        }
    }

    #[test]
    fn two_muts_orders() {
        let mut v = vec![1, 2, 3];
        {
            let (a, b) = two_muts(&mut v, 0, 2);
            *a += 10;
            *b += 20;
        }
        let (b, a) = two_muts(&mut v, 2, 0);
        *b += 1;
        *a += 1;
        assert_eq!(v, vec![12, 2, 24]);
    }

    #[test]
    fn plain_conv_gradients_match_finite_differences() {
        let mut rng = stream_rng(10, 0);
        let mut store = ParamStore::new();
        add_conv_params(&mut store, &mut rng, "c1", 2, 2, false);
        let mut g = Graph::new(Mode::Train);
        let x = g.input([2, 2, 4, 5]);
        let t = g.input([2, 2, 4, 5]);
        let w = g.param(&store, "c1.w");
        let b = g.param(&store, "c1.b");
        let y = g.conv(&[x], w, b, None, Act::LeakyRelu(0.2));
        let loss = g.sum_sq_diff(y, t);
        g.set_input(x, &randv(&mut rng, 2 * 2 * 4 * 5));
        g.set_input(t, &randv(&mut rng, 2 * 2 * 4 * 5));
        gradcheck_store(&mut g, &mut store, loss);
    }

    #[test]
    fn conv_with_batch_norm_gradients_match_finite_differences() {
        let mut rng = stream_rng(11, 0);
        let mut store = ParamStore::new();
        add_conv_params(&mut store, &mut rng, "c1", 3, 1, true);
        let mut g = Graph::new(Mode::Train);
        let x = g.input([2, 1, 4, 4]);
        let t = g.input([2, 3, 4, 4]);
        let w = g.param(&store, "c1.w");
        let b = g.param(&store, "c1.b");
        let bn = bn_handle(&mut g, &store, "c1");
        let y = g.conv(&[x], w, b, Some(bn), Act::LeakyRelu(0.2));
        let loss = g.sum_sq_diff(y, t);
        g.set_input(x, &randv(&mut rng, 2 * 1 * 4 * 4));
        g.set_input(t, &randv(&mut rng, 2 * 3 * 4 * 4));
        gradcheck_store(&mut g, &mut store, loss);
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = stream_rng(12, 0);
        let mut store = ParamStore::new();
        add_conv_params(&mut store, &mut rng, "c1", 2, 2, true);
        let mut g = Graph::new(Mode::Train);
        let x = g.input([1, 2, 3, 4]);
        let t = g.input([1, 2, 3, 4]);
        let w = g.param(&store, "c1.w");
        let b = g.param(&store, "c1.b");
        let bn = bn_handle(&mut g, &store, "c1");
        let y = g.conv(&[x], w, b, Some(bn), Act::Sigmoid);
        let loss = g.sum_sq_diff(y, t);
        let x0 = randv(&mut rng, 12 * 2);
        g.set_input(x, &x0);
        g.set_input(t, &randv(&mut rng, 12 * 2));
        g.forward(&store);
        g.backward(loss);
        let analytic = g.grad(x).to_vec();
        let h = 1e-6;
        for j in 0..x0.len() {
            let mut xp = x0.clone();
            xp[j] += h;
            g.set_input(x, &xp);
            g.forward(&store);
            let fp = g.scalar(loss);
            xp[j] -= 2.0 * h;
            g.set_input(x, &xp);
            g.forward(&store);
            let fm = g.scalar(loss);
            assert_close(analytic[j], (fp - fm) / (2.0 * h), &format!("x[{j}]"));
        }
    }

    #[test]
    fn multi_source_conv_equals_explicit_concat() {
        let mut rng = stream_rng(13, 0);
        let mut store = ParamStore::new();
        add_conv_params(&mut store, &mut rng, "c1", 2, 3, false);
        let a0 = randv(&mut rng, 2 * 1 * 4 * 4);
        let b0 = randv(&mut rng, 2 * 2 * 4 * 4);

        let mut g1 = Graph::new(Mode::Eval);
        let xa = g1.input([2, 1, 4, 4]);
        let xb = g1.input([2, 2, 4, 4]);
        let w = g1.param(&store, "c1.w");
        let b = g1.param(&store, "c1.b");
        let y1 = g1.conv(&[xa, xb], w, b, None, Act::None);
        g1.set_input(xa, &a0);
        g1.set_input(xb, &b0);
        g1.forward(&store);

        // same thing with a manually interleaved 3-channel input
        let mut cat = vec![0.0; 2 * 3 * 16];
        for img in 0..2 {
            cat[img * 48..img * 48 + 16].copy_from_slice(&a0[img * 16..img * 16 + 16]);
            cat[img * 48 + 16..img * 48 + 48].copy_from_slice(&b0[img * 32..img * 32 + 32]);
        }
        let mut g2 = Graph::new(Mode::Eval);
        let xc = g2.input([2, 3, 4, 4]);
        let w2 = g2.param(&store, "c1.w");
        let b2 = g2.param(&store, "c1.b");
        let y2 = g2.conv(&[xc], w2, b2, None, Act::None);
        g2.set_input(xc, &cat);
        g2.forward(&store);

        assert_eq!(g1.data(y1), g2.data(y2));
    }

    #[test]
    fn multi_source_conv_gradients_match_finite_differences() {
        let mut rng = stream_rng(14, 0);
        let mut store = ParamStore::new();
        add_conv_params(&mut store, &mut rng, "c1", 2, 3, true);
        let mut g = Graph::new(Mode::Train);
        let xa = g.input([2, 1, 4, 4]);
        let xb = g.input([2, 2, 4, 4]);
        let t = g.input([2, 2, 4, 4]);
        let w = g.param(&store, "c1.w");
        let b = g.param(&store, "c1.b");
        let bn = bn_handle(&mut g, &store, "c1");
        let y = g.conv(&[xa, xb], w, b, Some(bn), Act::LeakyRelu(0.2));
        let loss = g.sum_sq_diff(y, t);
        g.set_input(xa, &randv(&mut rng, 2 * 16));
        g.set_input(xb, &randv(&mut rng, 4 * 16));
        g.set_input(t, &randv(&mut rng, 4 * 16));
        gradcheck_store(&mut g, &mut store, loss);
    }

    #[test]
    fn batch_norm_eval_uses_frozen_statistics() {
        let mut store = ParamStore::new();
        store.add("c.w", vec![1, 1, 3, 3], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0], true);
        store.add("c.b", vec![1], vec![0.0], true);
        store.add("c.gamma", vec![1], vec![2.0], true);
        store.add("c.beta", vec![1], vec![0.5], true);
        store.add("c.rmean", vec![1], vec![0.25], false);
        store.add("c.rvar", vec![1], vec![4.0], false);
        let mut g = Graph::new(Mode::Eval);
        let x = g.input([1, 1, 1, 2]);
        let w = g.param(&store, "c.w");
        let b = g.param(&store, "c.b");
        let bn = bn_handle(&mut g, &store, "c");
        let y = g.conv(&[x], w, b, Some(bn), Act::None);
        g.set_input(x, &[1.25, 0.25]);
        g.forward(&store);
        // identity conv, then 2 * (v - 0.25) / sqrt(4 + eps) + 0.5
        let invstd = 1.0 / (4.0f64 + BN_EPS).sqrt();
        let expect = [2.0 * invstd + 0.5, 0.5];
        for (a, e) in g.data(y).iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn running_statistics_update_with_momentum() {
        let mut rng = stream_rng(15, 0);
        let mut store = ParamStore::new();
        add_conv_params(&mut store, &mut rng, "c1", 1, 1, true);
        let (irm, irv) = (store.idx("c1.rmean"), store.idx("c1.rvar"));
        store.entries[irm].data[0] = 0.7;
        store.entries[irv].data[0] = 0.9;
        let mut g = Graph::new(Mode::Train);
        let x = g.input([2, 1, 2, 2]);
        let w = g.param(&store, "c1.w");
        let b = g.param(&store, "c1.b");
        let bn = bn_handle(&mut g, &store, "c1");
        let _y = g.conv(&[x], w, b, Some(bn), Act::None);
        let x0 = randv(&mut rng, 8);
        g.set_input(x, &x0);
        g.forward(&store);

        // oracle: recompute the conv output and its batch statistics
        let mut pad = vec![0.0; 16 * 2];
        for img in 0..2 {
            pad_plane(&x0[img * 4..img * 4 + 4], 2, 2, &mut pad[img * 16..(img + 1) * 16]);
        }
        let mut conv = vec![0.0; 8];
        let wv = &store.get("c1.w").data;
        let bv = store.get("c1.b").data[0];
        for img in 0..2 {
            let mut o = vec![0.0; 4];
            conv_fwd(&pad[img * 16..(img + 1) * 16], 1, 2, 2, wv, &[bv], 1, &mut o);
            conv[img * 4..(img + 1) * 4].copy_from_slice(&o);
        }
        let mean: f64 = conv.iter().sum::<f64>() / 8.0;
        let var: f64 = conv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let var_u = var * 8.0 / 7.0;

        g.commit_bn_stats(&mut store);
        let rm = store.get("c1.rmean").data[0];
        let rv = store.get("c1.rvar").data[0];
        assert!((rm - (0.9 * 0.7 + 0.1 * mean)).abs() < 1e-12);
        assert!((rv - (0.9 * 0.9 + 0.1 * var_u)).abs() < 1e-12);
    }

    #[test]
    fn forward_leaves_store_untouched_until_commit() {
        let mut rng = stream_rng(16, 0);
        let mut store = ParamStore::new();
        add_conv_params(&mut store, &mut rng, "c1", 2, 1, true);
        let before_rm = store.get("c1.rmean").data.clone();
        let mut g = Graph::new(Mode::Train);
        let x = g.input([1, 1, 4, 4]);
        let w = g.param(&store, "c1.w");
        let b = g.param(&store, "c1.b");
        let bn = bn_handle(&mut g, &store, "c1");
        let _ = g.conv(&[x], w, b, Some(bn), Act::Relu);
        g.set_input(x, &randv(&mut rng, 16));
        g.forward(&store);
        assert_eq!(store.get("c1.rmean").data, before_rm);
    }

    #[test]
    fn latent_ops_gradients_match_finite_differences() {
        // slice -> reparam -> kl + sumsqdiff composite over conv outputs
        let mut rng = stream_rng(17, 0);
        let mut store = ParamStore::new();
        add_conv_params(&mut store, &mut rng, "q", 2, 1, false);
        add_conv_params(&mut store, &mut rng, "p", 2, 1, false);
        let mut g = Graph::new(Mode::Train);
        let x = g.input([2, 1, 3, 3]);
        let t = g.input([2, 1, 3, 3]);
        let eps = g.input([2, 1, 3, 3]);
        let wq = g.param(&store, "q.w");
        let bq = g.param(&store, "q.b");
        let wp = g.param(&store, "p.w");
        let bp = g.param(&store, "p.b");
        let q = g.conv(&[x], wq, bq, None, Act::None);
        let p = g.conv(&[x], wp, bp, None, Act::None);
        let mu_q = g.slice_c(q, 0, 1);
        let raw_q = g.slice_c(q, 1, 2);
        let mu_p = g.slice_c(p, 0, 1);
        let raw_p = g.slice_c(p, 1, 2);
        let z = g.reparam(mu_q, raw_q, eps);
        let kl = g.kl_sum(mu_q, raw_q, mu_p, raw_p);
        let rec = g.sum_sq_diff(z, t);
        let cvae = g.axpy(rec, kl, 0.3);
        let loss = g.scale(cvae, 0.5);
        g.set_input(x, &randv(&mut rng, 18));
        g.set_input(t, &randv(&mut rng, 18));
        g.set_input(eps, &randv(&mut rng, 18));
        gradcheck_store(&mut g, &mut store, loss);
    }

    #[test]
    fn kl_sum_forward_matches_elementwise_reference() {
        let mut rng = stream_rng(18, 0);
        let n = 10;
        let (mq, rq, mp, rp) = (randv(&mut rng, n), randv(&mut rng, n), randv(&mut rng, n), randv(&mut rng, n));
        let mut g = Graph::new(Mode::Eval);
        let a = g.input([1, 1, 1, n]);
        let b = g.input([1, 1, 1, n]);
        let c = g.input([1, 1, 1, n]);
        let d = g.input([1, 1, 1, n]);
        let kl = g.kl_sum(a, b, c, d);
        g.set_input(a, &mq);
        g.set_input(b, &rq);
        g.set_input(c, &mp);
        g.set_input(d, &rp);
        let store = ParamStore::new();
        g.forward(&store);
        let mut expect = 0.0;
        for j in 0..n {
            let (sq2, sp2) = (rq[j].exp(), rp[j].exp());
            expect += ((sp2 / sq2).ln() + (sq2 + (mq[j] - mp[j]).powi(2)) / sp2 - 1.0) / 2.0;
        }
        assert!((g.scalar(kl) - expect).abs() < 1e-12);
    }

    #[test]
    fn kl_sum_is_zero_for_identical_gaussians() {
        let mut g = Graph::new(Mode::Eval);
        let a = g.input([1, 1, 2, 2]);
        let b = g.input([1, 1, 2, 2]);
        let c = g.input([1, 1, 2, 2]);
        let d = g.input([1, 1, 2, 2]);
        let kl = g.kl_sum(a, b, c, d);
        let mu = [0.3, -1.0, 2.0, 0.0];
        let raw = [0.1, -0.5, 0.0, 1.3];
        g.set_input(a, &mu);
        g.set_input(b, &raw);
        g.set_input(c, &mu);
        g.set_input(d, &raw);
        g.forward(&ParamStore::new());
        assert_eq!(g.scalar(kl), 0.0);
    }

    #[test]
    fn deep_composite_graph_gradients_match_finite_differences() {
        // miniature of the real training graph: two BN conv stacks producing
        // Gaussian heads, reparameterized draw, sigmoid decoder, full loss
        let mut rng = stream_rng(19, 0);
        let mut store = ParamStore::new();
        add_conv_params(&mut store, &mut rng, "e0", 4, 2, true);
        add_conv_params(&mut store, &mut rng, "e1", 2, 4, false);
        add_conv_params(&mut store, &mut rng, "p0", 4, 1, true);
        add_conv_params(&mut store, &mut rng, "p1", 2, 4, false);
        add_conv_params(&mut store, &mut rng, "d0", 4, 2, true);
        add_conv_params(&mut store, &mut rng, "d1", 1, 4, false);
        let mut g = Graph::new(Mode::Train);
        let x = g.input([2, 1, 4, 4]);
        let y = g.input([2, 1, 4, 4]);
        let eps = g.input([2, 1, 4, 4]);

        let we0 = g.param(&store, "e0.w");
        let be0 = g.param(&store, "e0.b");
        let bne0 = bn_handle(&mut g, &store, "e0");
        let e0 = g.conv(&[x, y], we0, be0, Some(bne0), Act::LeakyRelu(0.2));
        let we1 = g.param(&store, "e1.w");
        let be1 = g.param(&store, "e1.b");
        let eh = g.conv(&[e0], we1, be1, None, Act::None);

        let wp0 = g.param(&store, "p0.w");
        let bp0 = g.param(&store, "p0.b");
        let bnp0 = bn_handle(&mut g, &store, "p0");
        let p0 = g.conv(&[x], wp0, bp0, Some(bnp0), Act::LeakyRelu(0.2));
        let wp1 = g.param(&store, "p1.w");
        let bp1 = g.param(&store, "p1.b");
        let ph = g.conv(&[p0], wp1, bp1, None, Act::None);

        let mu_q = g.slice_c(eh, 0, 1);
        let raw_q = g.slice_c(eh, 1, 2);
        let mu_p = g.slice_c(ph, 0, 1);
        let raw_p = g.slice_c(ph, 1, 2);
        let z = g.reparam(mu_q, raw_q, eps);

        let wd0 = g.param(&store, "d0.w");
        let bd0 = g.param(&store, "d0.b");
        let bnd0 = bn_handle(&mut g, &store, "d0");
        let d0 = g.conv(&[x, z], wd0, bd0, Some(bnd0), Act::LeakyRelu(0.2));
        let wd1 = g.param(&store, "d1.w");
        let bd1 = g.param(&store, "d1.b");
        let yh = g.conv(&[d0], wd1, bd1, None, Act::Sigmoid);

        let rec = g.sum_sq_diff(yh, y);
        let kl = g.kl_sum(mu_q, raw_q, mu_p, raw_p);
        let loss = g.axpy(rec, kl, 0.1);

        g.set_input(x, &randv(&mut rng, 32));
        let ty: Vec<f64> = (0..32).map(|_| rng.gen_range(0.05..0.95)).collect();
        g.set_input(y, &ty);
        g.set_input(eps, &randv(&mut rng, 32));
        gradcheck_store(&mut g, &mut store, loss);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = stream_rng(20, 0);
        let mut store = ParamStore::new();
        add_conv_params(&mut store, &mut rng, "c1", 8, 3, true);
        add_conv_params(&mut store, &mut rng, "c2", 1, 8, false);
        let x0 = randv(&mut rng, 2 * 3 * 8 * 9);
        let run = |store: &ParamStore| -> Vec<f64> {
            let mut g = Graph::new(Mode::Train);
            let x = g.input([2, 3, 8, 9]);
            let w1 = g.param(store, "c1.w");
            let b1 = g.param(store, "c1.b");
            let bn1 = Bn {
                gamma: g.param(store, "c1.gamma"),
                beta: g.param(store, "c1.beta"),
                rmean: store.idx("c1.rmean"),
                rvar: store.idx("c1.rvar"),
            };
            let h = g.conv(&[x], w1, b1, Some(bn1), Act::LeakyRelu(0.2));
            let w2 = g.param(store, "c2.w");
            let b2 = g.param(store, "c2.b");
            let y = g.conv(&[h], w2, b2, None, Act::Sigmoid);
            g.set_input(x, &x0);
            g.forward(store);
            g.data(y).to_vec()
        };
        let a = run(&store);
        let b = run(&store);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reparam_reduces_to_mean_with_zero_noise() {
        let mut g = Graph::new(Mode::Eval);
        let mu = g.input([1, 1, 2, 2]);
        let raw = g.input([1, 1, 2, 2]);
        let eps = g.input([1, 1, 2, 2]);
        let z = g.reparam(mu, raw, eps);
        g.set_input(mu, &[1.0, -2.0, 0.5, 3.0]);
        g.set_input(raw, &[0.0, 1.0, -1.0, 0.3]);
        g.set_input(eps, &[0.0; 4]);
        g.forward(&ParamStore::new());
        assert_eq!(g.data(z), &[1.0, -2.0, 0.5, 3.0]);
    }
}

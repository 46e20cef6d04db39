//! Reverse-mode autodiff tape over [`Array`] values.
//!
//! Forward calls record one node per op. [`Tape::backward`] walks the nodes
//! in reverse, accumulating gradients additively: running backward twice on
//! the same tape doubles every accumulator. One tape serves one training
//! step and is never shared across threads.
//!
//! Shape mismatches are contract violations and panic with both shapes in
//! the message.

use super::array::{axpy, dot, matmul_nn_acc, matmul_nt_acc, matmul_tn_acc};
use super::{Array, Scalar};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    /// Elementwise sum of two same-shape arrays.
    Add(NodeId, NodeId),
    /// Tiled add: parameter p tiles over x (x.len is a multiple of p.len).
    AddTiled(NodeId, NodeId),
    /// Add a non-differentiable constant, tiled over leading dims.
    AddConst(NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    /// [m,k] x [k,n] -> [m,n]
    Matmul(NodeId, NodeId),
    /// [m,k] x [n,k]^T -> [m,n]
    MatmulNT(NodeId, NodeId),
    /// [b,m,k] x [b,k,n] -> [b,m,n]
    BatchMatmul(NodeId, NodeId),
    /// [b,m,k] x [b,n,k]^T -> [b,m,n]
    BatchMatmulNT(NodeId, NodeId),
    /// Softmax over the last axis; backward uses the stored output.
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(NodeId),
    /// Row gather: out[i] = table[ids[i]].
    Embed { table: NodeId, ids: Vec<u32> },
    /// Contiguous row slice of a rank-2 array.
    SliceRows { x: NodeId, start: usize },
    /// Stack rank-2 arrays with equal column counts.
    ConcatRows(Vec<NodeId>),
    /// [n, h*dh] -> [h, n, dh]
    SplitHeads { x: NodeId, heads: usize },
    /// [h, n, dh] -> [n, h*dh]
    MergeHeads(NodeId),
    SumAll(NodeId),
    /// Mean negative log-likelihood over rows where mask is set.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        mask: Vec<bool>,
    },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
}

/// Recorded forward graph with per-node gradient accumulators.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Array<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Array<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient for a node, if backward has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Array<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn grad_or_zeros(&self, id: NodeId) -> Array<T> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Array::zeros(self.nodes[id.0].value.shape()))
    }

    pub fn leaf(&mut self, value: Array<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa, sb, "add: shape mismatch {sa:?} vs {sb:?}");
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += v;
        }
        self.push(out, Op::Add(a, b))
    }

    /// Adds a (differentiable) parameter tiled over leading dimensions:
    /// a bias of shape [c] over rows, or a positional table of shape [m, d]
    /// over a stack of m-row blocks.
    pub fn add_tiled(&mut self, x: NodeId, p: NodeId) -> NodeId {
        let (lx, lp) = (self.value(x).len(), self.value(p).len());
        assert!(
            lp > 0 && lx % lp == 0,
            "add_tiled: shape mismatch {:?} vs {:?}",
            self.value(x).shape(),
            self.value(p).shape()
        );
        let mut out = self.value(x).clone();
        let b = self.nodes[p.0].value.data();
        for chunk in out.data_mut().chunks_exact_mut(lp) {
            for (o, &v) in chunk.iter_mut().zip(b) {
                *o += v;
            }
        }
        self.push(out, Op::AddTiled(x, p))
    }

    /// Adds a constant (no gradient), tiling it over leading dimensions.
    pub fn add_const(&mut self, x: NodeId, c: &Array<T>) -> NodeId {
        let (lx, lc) = (self.value(x).len(), c.len());
        assert!(
            lc > 0 && lx % lc == 0,
            "add_const: shape mismatch {:?} vs {:?}",
            self.value(x).shape(),
            c.shape()
        );
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_exact_mut(lc) {
            for (o, &v) in chunk.iter_mut().zip(c.data()) {
                *o += v;
            }
        }
        self.push(out, Op::AddConst(x))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa, sb, "mul: shape mismatch {sa:?} vs {sb:?}");
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= v;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= s;
        }
        self.push(out, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: shape mismatch {sa:?} vs {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Array::zeros(&[m, n]);
        matmul_nn_acc(
            out.data_mut(),
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        self.push(out, Op::Matmul(a, b))
    }

    /// `a @ b.T` with `b` stored row-major as [n, k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1],
            "matmul_nt: shape mismatch {sa:?} vs {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = Array::zeros(&[m, n]);
        matmul_nt_acc(
            out.data_mut(),
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        self.push(out, Op::MatmulNT(a, b))
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "batch_matmul: shape mismatch {sa:?} vs {sb:?}"
        );
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Array::zeros(&[bs, m, n]);
        for i in 0..bs {
            matmul_nn_acc(
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                &self.nodes[a.0].value.data()[i * m * k..(i + 1) * m * k],
                &self.nodes[b.0].value.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
        }
        self.push(out, Op::BatchMatmul(a, b))
    }

    /// Per-batch `a @ b.T` with `b` stored as [batch, n, k].
    pub fn batch_matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2],
            "batch_matmul_nt: shape mismatch {sa:?} vs {sb:?}"
        );
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = Array::zeros(&[bs, m, n]);
        for i in 0..bs {
            matmul_nt_acc(
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                &self.nodes[a.0].value.data()[i * m * k..(i + 1) * m * k],
                &self.nodes[b.0].value.data()[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
            );
        }
        self.push(out, Op::BatchMatmulNT(a, b))
    }

    /// Numerically guarded softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let rows = out.rows();
        for i in 0..rows {
            softmax_row(out.row_mut(i));
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> NodeId {
        let d = self.value(x).last_dim();
        assert_eq!(
            self.value(gain).shape(),
            &[d],
            "layer_norm: shape mismatch {:?} vs {:?}",
            self.value(x).shape(),
            self.value(gain).shape()
        );
        let rows = self.value(x).rows();
        let mut out = self.value(x).clone();
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let g = self.nodes[gain.0].value.data().to_vec();
        let b = self.nodes[bias.0].value.data().to_vec();
        let dn = T::from_double(d as f64);
        for i in 0..rows {
            let row = out.row_mut(i);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = (var + eps).sqrt().recip();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = gelu_forward(*v);
        }
        self.push(out, Op::Gelu(x))
    }

    /// Row gather from an embedding table; ids must be < table rows.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let ts = self.value(table).shape().to_vec();
        assert_eq!(ts.len(), 2, "embed: table must be rank 2, got {ts:?}");
        let d = ts[1];
        let mut out = Array::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            assert!(
                (id as usize) < ts[0],
                "embed: id {id} out of range for table {ts:?}"
            );
            out.row_mut(i)
                .copy_from_slice(self.nodes[table.0].value.row(id as usize));
        }
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let s = self.value(x).shape().to_vec();
        assert!(
            s.len() == 2 && start + len <= s[0],
            "slice_rows: rows {start}..{} out of shape {s:?}",
            start + len
        );
        let d = s[1];
        let mut out = Array::zeros(&[len, d]);
        out.data_mut()
            .copy_from_slice(&self.nodes[x.0].value.data()[start * d..(start + len) * d]);
        self.push(out, Op::SliceRows { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).shape()[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert!(
                s.len() == 2 && s[1] == d,
                "concat_rows: shape mismatch {:?} vs {:?}",
                self.value(parts[0]).shape(),
                s
            );
            rows += s[0];
        }
        let mut out = Array::zeros(&[rows, d]);
        let mut off = 0;
        for &p in parts {
            let v = self.nodes[p.0].value.data();
            out.data_mut()[off..off + v.len()].copy_from_slice(v);
            off += v.len();
        }
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let s = self.value(x).shape().to_vec();
        assert!(
            s.len() == 2 && s[1] % heads == 0,
            "split_heads: {heads} heads do not divide shape {s:?}"
        );
        let (n, dh) = (s[0], s[1] / heads);
        let mut out = Array::zeros(&[heads, n, dh]);
        let src = self.nodes[x.0].value.data();
        let dst = out.data_mut();
        for h in 0..heads {
            for i in 0..n {
                dst[(h * n + i) * dh..(h * n + i + 1) * dh]
                    .copy_from_slice(&src[i * heads * dh + h * dh..i * heads * dh + (h + 1) * dh]);
            }
        }
        self.push(out, Op::SplitHeads { x, heads })
    }

    pub fn merge_heads(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 3, "merge_heads: expected rank 3, got {s:?}");
        let (heads, n, dh) = (s[0], s[1], s[2]);
        let mut out = Array::zeros(&[n, heads * dh]);
        let src = self.nodes[x.0].value.data();
        let dst = out.data_mut();
        for h in 0..heads {
            for i in 0..n {
                dst[i * heads * dh + h * dh..i * heads * dh + (h + 1) * dh]
                    .copy_from_slice(&src[(h * n + i) * dh..(h * n + i + 1) * dh]);
            }
        }
        self.push(out, Op::MergeHeads(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Array::scalar(s), Op::SumAll(x))
    }

    /// Mean NLL over rows with mask set; `logits` is [n, vocab].
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32], mask: &[bool]) -> NodeId {
        let s = self.value(logits).shape().to_vec();
        assert!(
            s.len() == 2 && s[0] == targets.len() && s[0] == mask.len(),
            "cross_entropy: logits {s:?} vs {} targets / {} mask entries",
            targets.len(),
            mask.len()
        );
        let active = mask.iter().filter(|&&m| m).count();
        assert!(active > 0, "cross_entropy: mask selects no positions");
        let mut total = T::zero();
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            let row = self.nodes[logits.0].value.row(i);
            assert!(
                (t as usize) < row.len(),
                "cross_entropy: target {t} out of vocab {}",
                row.len()
            );
            total += log_sum_exp(row) - row[t as usize];
        }
        let loss = total / T::from_double(active as f64);
        self.push(
            Array::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        )
    }


    /// Accumulates d(loss)/d(node) into every reachable node's gradient.
    ///
    /// `loss` must be a scalar node. Each call seeds a fresh unit gradient,
    /// propagates it, and adds the result onto whatever is already stored:
    /// a second call doubles every accumulator.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let mut local: Vec<Option<Array<T>>> = vec![None; self.nodes.len()];
        local[loss.0] = Some(Array::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let go = match local[idx].take() {
                Some(g) => g,
                None => continue,
            };
            propagate(&self.nodes, idx, &go, &mut local);
            match &mut self.grads[idx] {
                Some(acc) => {
                    for (a, &g) in acc.data_mut().iter_mut().zip(go.data()) {
                        *a += g;
                    }
                }
                slot => *slot = Some(go),
            }
        }
    }
}

fn entry<'a, T: Scalar>(
    local: &'a mut [Option<Array<T>>],
    nodes: &[Node<T>],
    id: NodeId,
) -> &'a mut Array<T> {
    let slot = &mut local[id.0];
    if slot.is_none() {
        *slot = Some(Array::zeros(nodes[id.0].value.shape()));
    }
    slot.as_mut().unwrap()
}

/// Pushes `go` (gradient of the loss w.r.t. node `idx`) onto the node's
/// parents. Parents always precede children on the tape, so the caller's
/// reverse sweep sees each node's gradient complete before visiting it.
fn propagate<T: Scalar>(
    nodes: &[Node<T>],
    idx: usize,
    go: &Array<T>,
    local: &mut [Option<Array<T>>],
) {
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            axpy(entry(local, nodes, *a).data_mut(), T::one(), go.data());
            axpy(entry(local, nodes, *b).data_mut(), T::one(), go.data());
        }
        Op::AddTiled(x, p) => {
            axpy(entry(local, nodes, *x).data_mut(), T::one(), go.data());
            let gp = entry(local, nodes, *p);
            let lp = gp.len();
            for chunk in go.data().chunks_exact(lp) {
                axpy(gp.data_mut(), T::one(), chunk);
            }
        }
        Op::AddConst(x) => {
            axpy(entry(local, nodes, *x).data_mut(), T::one(), go.data());
        }
        Op::Mul(a, b) => {
            {
                let bv = nodes[b.0].value.data();
                let ga = entry(local, nodes, *a);
                for ((g, &v), &w) in ga.data_mut().iter_mut().zip(go.data()).zip(bv) {
                    *g += v * w;
                }
            }
            let av = nodes[a.0].value.data();
            let gb = entry(local, nodes, *b);
            for ((g, &v), &w) in gb.data_mut().iter_mut().zip(go.data()).zip(av) {
                *g += v * w;
            }
        }
        Op::Scale(a, s) => {
            axpy(entry(local, nodes, *a).data_mut(), *s, go.data());
        }
        Op::Matmul(a, b) => {
            let (m, k) = {
                let s = nodes[a.0].value.shape();
                (s[0], s[1])
            };
            let n = nodes[b.0].value.shape()[1];
            matmul_nt_acc(
                entry(local, nodes, *a).data_mut(),
                go.data(),
                nodes[b.0].value.data(),
                m,
                n,
                k,
            );
            matmul_tn_acc(
                entry(local, nodes, *b).data_mut(),
                nodes[a.0].value.data(),
                go.data(),
                k,
                m,
                n,
            );
        }
        Op::MatmulNT(a, b) => {
            // out = a @ b^T : da = go @ b ; db = go^T @ a
            let (m, k) = {
                let s = nodes[a.0].value.shape();
                (s[0], s[1])
            };
            let n = nodes[b.0].value.shape()[0];
            matmul_nn_acc(
                entry(local, nodes, *a).data_mut(),
                go.data(),
                nodes[b.0].value.data(),
                m,
                n,
                k,
            );
            matmul_tn_acc(
                entry(local, nodes, *b).data_mut(),
                go.data(),
                nodes[a.0].value.data(),
                n,
                m,
                k,
            );
        }
        Op::BatchMatmul(a, b) => {
            let sa = nodes[a.0].value.shape().to_vec();
            let (bs, m, k) = (sa[0], sa[1], sa[2]);
            let n = nodes[b.0].value.shape()[2];
            {
                let bv = nodes[b.0].value.data();
                let ga = entry(local, nodes, *a);
                for i in 0..bs {
                    matmul_nt_acc(
                        &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
                        &go.data()[i * m * n..(i + 1) * m * n],
                        &bv[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                    );
                }
            }
            let av = nodes[a.0].value.data();
            let gb = entry(local, nodes, *b);
            for i in 0..bs {
                matmul_tn_acc(
                    &mut gb.data_mut()[i * k * n..(i + 1) * k * n],
                    &av[i * m * k..(i + 1) * m * k],
                    &go.data()[i * m * n..(i + 1) * m * n],
                    k,
                    m,
                    n,
                );
            }
        }
        Op::BatchMatmulNT(a, b) => {
            let sa = nodes[a.0].value.shape().to_vec();
            let (bs, m, k) = (sa[0], sa[1], sa[2]);
            let n = nodes[b.0].value.shape()[1];
            {
                let bv = nodes[b.0].value.data();
                let ga = entry(local, nodes, *a);
                for i in 0..bs {
                    matmul_nn_acc(
                        &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
                        &go.data()[i * m * n..(i + 1) * m * n],
                        &bv[i * n * k..(i + 1) * n * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            let av = nodes[a.0].value.data();
            let gb = entry(local, nodes, *b);
            for i in 0..bs {
                matmul_tn_acc(
                    &mut gb.data_mut()[i * n * k..(i + 1) * n * k],
                    &go.data()[i * m * n..(i + 1) * m * n],
                    &av[i * m * k..(i + 1) * m * k],
                    n,
                    m,
                    k,
                );
            }
        }
        Op::Softmax(x) => {
            let y = &nodes[idx].value;
            let d = y.last_dim();
            let gx = entry(local, nodes, *x);
            for i in 0..y.rows() {
                let yrow = y.row(i);
                let grow = &go.data()[i * d..(i + 1) * d];
                let dotp = dot(grow, yrow);
                for ((g, &gy), &yv) in gx.row_mut(i).iter_mut().zip(grow).zip(yrow) {
                    *g += yv * (gy - dotp);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let xv = &nodes[x.0].value;
            let g = nodes[gain.0].value.data();
            let d = xv.last_dim();
            let dn = T::from_double(d as f64);
            {
                let gg = entry(local, nodes, *gain);
                for i in 0..xv.rows() {
                    let xrow = xv.row(i);
                    let grow = &go.data()[i * d..(i + 1) * d];
                    for j in 0..d {
                        let xhat = (xrow[j] - mean[i]) * rstd[i];
                        gg.data_mut()[j] += grow[j] * xhat;
                    }
                }
            }
            {
                let gb = entry(local, nodes, *bias);
                for i in 0..xv.rows() {
                    let grow = &go.data()[i * d..(i + 1) * d];
                    axpy(gb.data_mut(), T::one(), grow);
                }
            }
            let gx = entry(local, nodes, *x);
            for i in 0..xv.rows() {
                let xrow = xv.row(i);
                let grow = &go.data()[i * d..(i + 1) * d];
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for j in 0..d {
                    let xhat = (xrow[j] - mean[i]) * rstd[i];
                    let dxhat = grow[j] * g[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                let m1 = sum_dxhat / dn;
                let m2 = sum_dxhat_xhat / dn;
                for j in 0..d {
                    let xhat = (xrow[j] - mean[i]) * rstd[i];
                    let dxhat = grow[j] * g[j];
                    gx.row_mut(i)[j] += rstd[i] * (dxhat - m1 - xhat * m2);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[x.0].value.data();
            let gx = entry(local, nodes, *x);
            for ((g, &v), &xi) in gx.data_mut().iter_mut().zip(go.data()).zip(xv) {
                *g += v * gelu_backward(xi);
            }
        }
        Op::Embed { table, ids } => {
            let d = go.last_dim();
            let gt = entry(local, nodes, *table);
            for (i, &id) in ids.iter().enumerate() {
                axpy(
                    gt.row_mut(id as usize),
                    T::one(),
                    &go.data()[i * d..(i + 1) * d],
                );
            }
        }
        Op::SliceRows { x, start } => {
            let d = go.last_dim();
            let gx = entry(local, nodes, *x);
            for i in 0..go.rows() {
                axpy(
                    gx.row_mut(start + i),
                    T::one(),
                    &go.data()[i * d..(i + 1) * d],
                );
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                let gp = entry(local, nodes, p);
                axpy(gp.data_mut(), T::one(), &go.data()[off..off + len]);
                off += len;
            }
        }
        Op::SplitHeads { x, heads } => {
            let s = go.shape().to_vec();
            let (heads, n, dh) = (*heads, s[1], s[2]);
            let gx = entry(local, nodes, *x);
            for h in 0..heads {
                for i in 0..n {
                    axpy(
                        &mut gx.data_mut()[i * heads * dh + h * dh..i * heads * dh + (h + 1) * dh],
                        T::one(),
                        &go.data()[(h * n + i) * dh..(h * n + i + 1) * dh],
                    );
                }
            }
        }
        Op::MergeHeads(x) => {
            let s = nodes[x.0].value.shape().to_vec();
            let (heads, n, dh) = (s[0], s[1], s[2]);
            let gx = entry(local, nodes, *x);
            for h in 0..heads {
                for i in 0..n {
                    axpy(
                        &mut gx.data_mut()[(h * n + i) * dh..(h * n + i + 1) * dh],
                        T::one(),
                        &go.data()[i * heads * dh + h * dh..i * heads * dh + (h + 1) * dh],
                    );
                }
            }
        }
        Op::SumAll(x) => {
            let v = go.item();
            for g in entry(local, nodes, *x).data_mut() {
                *g += v;
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
        } => {
            let lv = &nodes[logits.0].value;
            let active = mask.iter().filter(|&&m| m).count();
            let scale = go.item() / T::from_double(active as f64);
            let gl = entry(local, nodes, *logits);
            for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                if !m {
                    continue;
                }
                let row = lv.row(i);
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let denom: T = row.iter().map(|&v| (v - mx).exp()).sum();
                let grow = gl.row_mut(i);
                for (j, &v) in row.iter().enumerate() {
                    let p = (v - mx).exp() / denom;
                    let indicator = if j == t as usize { T::one() } else { T::zero() };
                    grow[j] += scale * (p - indicator);
                }
            }
        }
    }
}


#[inline]
fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[inline]
fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
    mx + s.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn fast_tanh<T: Scalar>(u: T) -> T {
    // tanh(u) = 1 - 2 / (exp(2u) + 1); exp is much cheaper than libm tanh
    // here. Clamp so exp never overflows.
    let two = T::from_double(2.0);
    let cap = T::from_double(20.0);
    let u = u.min(cap).max(-cap);
    T::one() - two / ((two * u).exp() + T::one())
}

#[inline]
fn gelu_forward<T: Scalar>(x: T) -> T {
    let c = T::from_double(GELU_C);
    let a = T::from_double(GELU_A);
    let half = T::from_double(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + fast_tanh(u))
}

#[inline]
fn gelu_backward<T: Scalar>(x: T) -> T {
    let c = T::from_double(GELU_C);
    let a = T::from_double(GELU_A);
    let half = T::from_double(0.5);
    let three = T::from_double(3.0);
    let u = c * (x + a * x * x * x);
    let t = fast_tanh(u);
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

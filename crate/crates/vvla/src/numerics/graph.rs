//! Reverse-mode autodiff over tensor-granular operations.
//!
//! A `Graph` is a tape: ops append nodes in topological order, `backward`
//! walks the tape in reverse. Backward closures capture the value tensors
//! they need (cheap shared-payload clones), so the walk never re-borrows the
//! graph. All reductions run in fixed index order; given identical inputs the
//! whole pass is bitwise reproducible.

use rayon::prelude::*;

use super::elem::{gelu, gelu_deriv, silu, silu_deriv, Elem};
use super::gemm::gemm;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef(pub usize);

type BackwardFn<E> = Box<dyn FnOnce(&[E], &mut GradArena<E>) + Send>;

struct Node<E: Elem> {
    value: Tensor<E>,
    backward: Option<BackwardFn<E>>,
    requires_grad: bool,
}

/// Per-node gradient buffers, allocated lazily.
pub struct GradArena<E: Elem> {
    grads: Vec<Option<Vec<E>>>,
    sizes: Vec<usize>,
}

impl<E: Elem> GradArena<E> {
    fn new(sizes: Vec<usize>) -> Self {
        GradArena {
            grads: sizes.iter().map(|_| None).collect(),
            sizes,
        }
    }

    pub fn accum(&mut self, node: NodeRef) -> &mut [E] {
        let slot = &mut self.grads[node.0];
        if slot.is_none() {
            *slot = Some(vec![E::ZERO; self.sizes[node.0]]);
        }
        slot.as_mut().unwrap()
    }

    pub fn take(&mut self, node: NodeRef) -> Option<Vec<E>> {
        self.grads[node.0].take()
    }
}

pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(128) }
    }

    pub fn value(&self, node: NodeRef) -> &Tensor<E> {
        &self.nodes[node.0].value
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, backward: Option<BackwardFn<E>>) -> NodeRef {
        self.nodes.push(Node { value, backward, requires_grad });
        NodeRef(self.nodes.len() - 1)
    }

    fn req(&self, node: NodeRef) -> bool {
        self.nodes[node.0].requires_grad
    }

    /// Constant input: gradients are never propagated into it.
    pub fn constant(&mut self, value: Tensor<E>) -> NodeRef {
        self.push(value, false, None)
    }

    /// Trainable leaf: gradients accumulate here.
    pub fn param(&mut self, value: Tensor<E>) -> NodeRef {
        self.push(value, true, None)
    }

    /// Runs the reverse pass from a scalar loss node.
    pub fn backward(&mut self, loss: NodeRef) -> GradArena<E> {
        assert_eq!(self.value(loss).numel(), 1, "backward requires a scalar loss");
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.numel()).collect();
        let mut arena = GradArena::new(sizes);
        arena.accum(loss)[0] = E::ONE;
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = arena.take(NodeRef(id)) else { continue };
            if let Some(f) = self.nodes[id].backward.take() {
                f(&g, &mut arena);
            }
            if id == loss.0 || self.nodes[id].backward.is_some() {
                // unreachable; keep the grad dropped
            }
            if !self.nodes[id].requires_grad {
                continue;
            }
            // leaves keep their gradient for extraction
            if self.is_leaf(id) {
                arena.grads[id] = Some(g);
            }
        }
        arena
    }

    fn is_leaf(&self, id: usize) -> bool {
        // backward was None at construction for leaves; interior nodes had
        // Some and were taken during the walk, so recheck via requires_grad
        // plus absence of an original backward. Track with a bit instead.
        self.leaf_bits.get(id).copied().unwrap_or(false)
    }

    // -- ops ---------------------------------------------------------------

    /// y = x @ w + b. x: [.., in], w: [in, out], b: [out].
    pub fn linear(&mut self, x: NodeRef, w: NodeRef, b: Option<NodeRef>) -> NodeRef {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let (d_in, d_out) = (wv.shape()[0], wv.shape()[1]);
        let xs = xv.shape();
        assert_eq!(*xs.last().unwrap(), d_in, "linear: input dim");
        let m: usize = xs[..xs.len() - 1].iter().product();
        let mut out = vec![E::ZERO; m * d_out];
        gemm(m, d_in, d_out, E::ONE, xv.data(), false, wv.data(), false, E::ZERO, &mut out);
        if let Some(bn) = b {
            let bv = self.value(bn).clone();
            assert_eq!(bv.numel(), d_out);
            out.par_chunks_mut(4096 * d_out).for_each(|chunk| {
                for row in chunk.chunks_mut(d_out) {
                    for (o, &bi) in row.iter_mut().zip(bv.data()) {
                        *o += bi;
                    }
                }
            });
        }
        let mut shape = xs[..xs.len() - 1].to_vec();
        shape.push(d_out);
        let req = self.req(x) || self.req(w) || b.map(|bn| self.req(bn)).unwrap_or(false);
        let need_dx = self.req(x);
        let need_dw = self.req(w);
        let need_db = b.map(|bn| self.req(bn)).unwrap_or(false);
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if need_dx {
                let dx = arena.accum(x);
                gemm(m, d_out, d_in, E::ONE, g, false, wv.data(), true, E::ONE, dx);
            }
            if need_dw {
                let dw = arena.accum(w);
                gemm(d_in, m, d_out, E::ONE, xv.data(), true, g, false, E::ONE, dw);
            }
            if need_db {
                let db = arena.accum(b.unwrap());
                for row in g.chunks(d_out) {
                    for (d, &gi) in db.iter_mut().zip(row) {
                        *d += gi;
                    }
                }
            }
        });
        self.push_interior(Tensor::new(shape, out), req, backward)
    }

    /// Gather rows of an embedding table. ids are not differentiated.
    pub fn embedding(&mut self, table: NodeRef, ids: Vec<usize>, batch: usize) -> NodeRef {
        let tv = self.value(table).clone();
        let d = tv.shape()[1];
        let n_rows = tv.shape()[0];
        let per_batch = ids.len() / batch;
        let mut out = vec![E::ZERO; ids.len() * d];
        for (row, &id) in ids.iter().enumerate() {
            assert!(id < n_rows, "embedding id {id} out of range {n_rows}");
            out[row * d..(row + 1) * d].copy_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let req = self.req(table);
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if req {
                let dt = arena.accum(table);
                for (row, &id) in ids.iter().enumerate() {
                    let src = &g[row * d..(row + 1) * d];
                    let dst = &mut dt[id * d..(id + 1) * d];
                    for (a, &b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
        });
        self.push_interior(Tensor::new(vec![batch, per_batch, d], out), req, backward)
    }

    /// x: [B, L, d] + rows: [L, d] broadcast over the batch axis.
    pub fn add_rows(&mut self, x: NodeRef, rows: NodeRef) -> NodeRef {
        let xv = self.value(x).clone();
        let rv = self.value(rows).clone();
        let (b, l, d) = dims3(&xv);
        assert_eq!(rv.shape(), &[l, d], "add_rows: position table shape");
        let mut out = xv.to_vec();
        for bi in 0..b {
            let base = bi * l * d;
            for (o, &r) in out[base..base + l * d].iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let (need_dx, need_dr) = (self.req(x), self.req(rows));
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if need_dx {
                axpy(arena.accum(x), g);
            }
            if need_dr {
                let dr = arena.accum(rows);
                for bi in 0..b {
                    axpy(dr, &g[bi * l * d..(bi + 1) * l * d]);
                }
            }
        });
        self.push_interior(Tensor::new(vec![b, l, d], out), need_dx || need_dr, backward)
    }

    /// Latent-token positions: out[b, t*hw+j] = x[..] + spatial[j] + temporal[t].
    pub fn add_latent_positions(&mut self, x: NodeRef, spatial: NodeRef, temporal: NodeRef) -> NodeRef {
        let xv = self.value(x).clone();
        let sv = self.value(spatial).clone();
        let tv = self.value(temporal).clone();
        let (b, l, d) = dims3(&xv);
        let hw = sv.shape()[0];
        let n_lat = tv.shape()[0];
        assert_eq!(l, hw * n_lat, "latent token count");
        assert_eq!(sv.shape()[1], d);
        assert_eq!(tv.shape()[1], d);
        let mut out = xv.to_vec();
        for bi in 0..b {
            for t in 0..n_lat {
                for j in 0..hw {
                    let base = ((bi * l) + t * hw + j) * d;
                    let srow = &sv.data()[j * d..(j + 1) * d];
                    let trow = &tv.data()[t * d..(t + 1) * d];
                    for k in 0..d {
                        out[base + k] += srow[k] + trow[k];
                    }
                }
            }
        }
        let (need_dx, need_ds, need_dt) = (self.req(x), self.req(spatial), self.req(temporal));
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if need_dx {
                axpy(arena.accum(x), g);
            }
            if need_ds {
                let ds = arena.accum(spatial);
                for bi in 0..b {
                    for t in 0..n_lat {
                        for j in 0..hw {
                            let base = ((bi * l) + t * hw + j) * d;
                            axpy(&mut ds[j * d..(j + 1) * d], &g[base..base + d]);
                        }
                    }
                }
            }
            if need_dt {
                let dt = arena.accum(temporal);
                for bi in 0..b {
                    for t in 0..n_lat {
                        for j in 0..hw {
                            let base = ((bi * l) + t * hw + j) * d;
                            axpy(&mut dt[t * d..(t + 1) * d], &g[base..base + d]);
                        }
                    }
                }
            }
        });
        self.push_interior(Tensor::new(vec![b, l, d], out), need_dx || need_ds || need_dt, backward)
    }

    /// Concatenate along the token axis: all inputs [B, Li, d].
    pub fn concat_tokens(&mut self, parts: &[NodeRef]) -> NodeRef {
        assert!(!parts.is_empty());
        let vals: Vec<Tensor<E>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let (b, _, d) = dims3(&vals[0]);
        let lens: Vec<usize> = vals.iter().map(|v| v.shape()[1]).collect();
        let l_total: usize = lens.iter().sum();
        let mut out = vec![E::ZERO; b * l_total * d];
        for bi in 0..b {
            let mut off = 0;
            for (v, &li) in vals.iter().zip(&lens) {
                let src = &v.data()[bi * li * d..(bi + 1) * li * d];
                out[(bi * l_total + off) * d..(bi * l_total + off + li) * d].copy_from_slice(src);
                off += li;
            }
        }
        let needs: Vec<bool> = parts.iter().map(|&p| self.req(p)).collect();
        let ids: Vec<NodeRef> = parts.to_vec();
        let req = needs.iter().any(|&x| x);
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            for (pi, &p) in ids.iter().enumerate() {
                if !needs[pi] {
                    continue;
                }
                let li = lens[pi];
                let off: usize = lens[..pi].iter().sum();
                let dp = arena.accum(p);
                for bi in 0..b {
                    let src = &g[(bi * l_total + off) * d..(bi * l_total + off + li) * d];
                    axpy(&mut dp[bi * li * d..(bi + 1) * li * d], src);
                }
            }
        });
        self.push_interior(Tensor::new(vec![b, l_total, d], out), req, backward)
    }

    /// Token-axis slice of [B, L, d].
    pub fn slice_tokens(&mut self, x: NodeRef, start: usize, len: usize) -> NodeRef {
        let xv = self.value(x).clone();
        let (b, l, d) = dims3(&xv);
        assert!(start + len <= l, "slice_tokens range");
        let mut out = vec![E::ZERO; b * len * d];
        for bi in 0..b {
            let src = &xv.data()[(bi * l + start) * d..(bi * l + start + len) * d];
            out[bi * len * d..(bi + 1) * len * d].copy_from_slice(src);
        }
        let need = self.req(x);
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if need {
                let dx = arena.accum(x);
                for bi in 0..b {
                    let dst = &mut dx[(bi * l + start) * d..(bi * l + start + len) * d];
                    axpy(dst, &g[bi * len * d..(bi + 1) * len * d]);
                }
            }
        });
        self.push_interior(Tensor::new(vec![b, len, d], out), need, backward)
    }

    /// Column slice of a [B, D] tensor.
    pub fn slice_cols(&mut self, x: NodeRef, start: usize, len: usize) -> NodeRef {
        let xv = self.value(x).clone();
        let (b, dd) = (xv.shape()[0], xv.shape()[1]);
        assert!(start + len <= dd);
        let mut out = vec![E::ZERO; b * len];
        for bi in 0..b {
            out[bi * len..(bi + 1) * len].copy_from_slice(&xv.data()[bi * dd + start..bi * dd + start + len]);
        }
        let need = self.req(x);
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if need {
                let dx = arena.accum(x);
                for bi in 0..b {
                    axpy(&mut dx[bi * dd + start..bi * dd + start + len], &g[bi * len..(bi + 1) * len]);
                }
            }
        });
        self.push_interior(Tensor::new(vec![b, len], out), need, backward)
    }

    /// Per-row LayerNorm over the last axis, no learned affine (modulation
    /// supplies shift/scale).
    pub fn layer_norm(&mut self, x: NodeRef, eps: f64) -> NodeRef {
        let xv = self.value(x).clone();
        let d = *xv.shape().last().unwrap();
        let rows = xv.numel() / d;
        let mut out = vec![E::ZERO; xv.numel()];
        let mut inv_std = vec![E::ZERO; rows];
        let epse = E::from_f64(eps);
        out.par_chunks_mut(d)
            .zip(inv_std.par_iter_mut())
            .enumerate()
            .for_each(|(r, (orow, istd))| {
                let xrow = &xv.data()[r * d..(r + 1) * d];
                let mut mean = E::ZERO;
                for &v in xrow {
                    mean += v;
                }
                mean = mean / E::from_f64(d as f64);
                let mut var = E::ZERO;
                for &v in xrow {
                    let c = v - mean;
                    var += c * c;
                }
                var = var / E::from_f64(d as f64);
                let is = E::ONE / (var + epse).sqrt();
                *istd = is;
                for (o, &v) in orow.iter_mut().zip(xrow) {
                    *o = (v - mean) * is;
                }
            });
        let need = self.req(x);
        let out_t = Tensor::new(xv.shape().to_vec(), out);
        let xhat = out_t.clone();
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if !need {
                return;
            }
            let dx = arena.accum(x);
            dx.par_chunks_mut(d).enumerate().for_each(|(r, dxrow)| {
                let grow = &g[r * d..(r + 1) * d];
                let hrow = &xhat.data()[r * d..(r + 1) * d];
                let is = inv_std[r];
                let dn = E::from_f64(d as f64);
                let mut gsum = E::ZERO;
                let mut ghsum = E::ZERO;
                for (&gi, &hi) in grow.iter().zip(hrow) {
                    gsum += gi;
                    ghsum += gi * hi;
                }
                let gmean = gsum / dn;
                let ghmean = ghsum / dn;
                for ((dxi, &gi), &hi) in dxrow.iter_mut().zip(grow).zip(hrow) {
                    *dxi += is * (gi - gmean - hi * ghmean);
                }
            });
        });
        self.push_interior(out_t, need, backward)
    }

    /// Segmented adaLN modulation: tokens before `boundary` use the `v`
    /// (shift, scale) pair, tokens at or after use the `a` pair.
    /// x: [B, L, d]; each parameter: [B, d]. out = x * (1 + scale) + shift.
    pub fn modulate(
        &mut self,
        x: NodeRef,
        shift_v: NodeRef,
        scale_v: NodeRef,
        shift_a: NodeRef,
        scale_a: NodeRef,
        boundary: usize,
    ) -> NodeRef {
        let xv = self.value(x).clone();
        let (b, l, d) = dims3(&xv);
        assert!(boundary <= l);
        let shv = self.value(shift_v).clone();
        let scv = self.value(scale_v).clone();
        let sha = self.value(shift_a).clone();
        let sca = self.value(scale_a).clone();
        let mut out = vec![E::ZERO; b * l * d];
        out.par_chunks_mut(l * d).enumerate().for_each(|(bi, ob)| {
            let xb = &xv.data()[bi * l * d..(bi + 1) * l * d];
            for t in 0..l {
                let (sh, sc) = if t < boundary {
                    (&shv.data()[bi * d..(bi + 1) * d], &scv.data()[bi * d..(bi + 1) * d])
                } else {
                    (&sha.data()[bi * d..(bi + 1) * d], &sca.data()[bi * d..(bi + 1) * d])
                };
                for k in 0..d {
                    ob[t * d + k] = xb[t * d + k] * (E::ONE + sc[k]) + sh[k];
                }
            }
        });
        let needs = [self.req(x), self.req(shift_v), self.req(scale_v), self.req(shift_a), self.req(scale_a)];
        let req = needs.iter().any(|&v| v);
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if needs[0] {
                let dx = arena.accum(x);
                dx.par_chunks_mut(l * d).enumerate().for_each(|(bi, dxb)| {
                    let gb = &g[bi * l * d..(bi + 1) * l * d];
                    for t in 0..l {
                        let sc = if t < boundary {
                            &scv.data()[bi * d..(bi + 1) * d]
                        } else {
                            &sca.data()[bi * d..(bi + 1) * d]
                        };
                        for k in 0..d {
                            dxb[t * d + k] += gb[t * d + k] * (E::ONE + sc[k]);
                        }
                    }
                });
            }
            // shift grads: per-batch row sums over the segment
            for (pi, (node, range)) in [(shift_v, (0, boundary)), (shift_a, (boundary, l))].iter().enumerate() {
                if !needs[1 + pi * 2] {
                    continue;
                }
                let dsh = arena.accum(*node);
                for bi in 0..b {
                    for t in range.0..range.1 {
                        axpy(&mut dsh[bi * d..(bi + 1) * d], &g[(bi * l + t) * d..(bi * l + t + 1) * d]);
                    }
                }
            }
            for (pi, (node, range)) in [(scale_v, (0, boundary)), (scale_a, (boundary, l))].iter().enumerate() {
                if !needs[2 + pi * 2] {
                    continue;
                }
                let dsc = arena.accum(*node);
                for bi in 0..b {
                    for t in range.0..range.1 {
                        let gr = &g[(bi * l + t) * d..(bi * l + t + 1) * d];
                        let xr = &xv.data()[(bi * l + t) * d..(bi * l + t + 1) * d];
                        let dr = &mut dsc[bi * d..(bi + 1) * d];
                        for k in 0..d {
                            dr[k] += gr[k] * xr[k];
                        }
                    }
                }
            }
        });
        self.push_interior(Tensor::new(vec![b, l, d], out), req, backward)
    }

    /// Residual with segmented gates: out = x + gate_seg * y.
    /// gate_v / gate_a: [B, d].
    pub fn gated_residual(
        &mut self,
        x: NodeRef,
        y: NodeRef,
        gate_v: NodeRef,
        gate_a: NodeRef,
        boundary: usize,
    ) -> NodeRef {
        let xv = self.value(x).clone();
        let yv = self.value(y).clone();
        let gv = self.value(gate_v).clone();
        let ga = self.value(gate_a).clone();
        let (b, l, d) = dims3(&xv);
        let mut out = xv.to_vec();
        out.par_chunks_mut(l * d).enumerate().for_each(|(bi, ob)| {
            let yb = &yv.data()[bi * l * d..(bi + 1) * l * d];
            for t in 0..l {
                let gate = if t < boundary {
                    &gv.data()[bi * d..(bi + 1) * d]
                } else {
                    &ga.data()[bi * d..(bi + 1) * d]
                };
                for k in 0..d {
                    ob[t * d + k] += gate[k] * yb[t * d + k];
                }
            }
        });
        let needs = [self.req(x), self.req(y), self.req(gate_v), self.req(gate_a)];
        let req = needs.iter().any(|&v| v);
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if needs[0] {
                axpy(arena.accum(x), g);
            }
            if needs[1] {
                let dy = arena.accum(y);
                dy.par_chunks_mut(l * d).enumerate().for_each(|(bi, dyb)| {
                    let gb = &g[bi * l * d..(bi + 1) * l * d];
                    for t in 0..l {
                        let gate = if t < boundary {
                            &gv.data()[bi * d..(bi + 1) * d]
                        } else {
                            &ga.data()[bi * d..(bi + 1) * d]
                        };
                        for k in 0..d {
                            dyb[t * d + k] += gate[k] * gb[t * d + k];
                        }
                    }
                });
            }
            for (pi, (node, range)) in [(gate_v, (0usize, boundary)), (gate_a, (boundary, l))].iter().enumerate() {
                if !needs[2 + pi] {
                    continue;
                }
                let dg = arena.accum(*node);
                for bi in 0..b {
                    for t in range.0..range.1 {
                        let gr = &g[(bi * l + t) * d..(bi * l + t + 1) * d];
                        let yr = &yv.data()[(bi * l + t) * d..(bi * l + t + 1) * d];
                        let dr = &mut dg[bi * d..(bi + 1) * d];
                        for k in 0..d {
                            dr[k] += gr[k] * yr[k];
                        }
                    }
                }
            }
        });
        self.push_interior(Tensor::new(vec![b, l, d], out), req, backward)
    }

    /// Multi-head self-attention over a fused qkv tensor [B, L, 3d].
    ///
    /// `action_boundary = Some(bnd)` applies the causal mode: queries before
    /// `bnd` attend only to keys before `bnd` (their scores against action
    /// keys are never formed), queries at or after `bnd` attend everywhere.
    pub fn attention(&mut self, qkv: NodeRef, n_heads: usize, action_boundary: Option<usize>) -> NodeRef {
        let qkvv = self.value(qkv).clone();
        let (b, l, d3) = dims3(&qkvv);
        let d = d3 / 3;
        assert_eq!(d % n_heads, 0);
        let dh = d / n_heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let bnd = action_boundary.unwrap_or(l).min(l);

        // per (batch, head): contiguous q, k, v copies, probs [l, l], out [l, dh]
        let pairs: Vec<(usize, usize)> = (0..b).flat_map(|bi| (0..n_heads).map(move |h| (bi, h))).collect();
        let results: Vec<(Vec<E>, Vec<E>)> = pairs
            .par_iter()
            .map(|&(bi, h)| {
                let (q, k, v) = gather_heads(qkvv.data(), bi, h, l, d, dh);
                let mut probs = vec![E::ZERO; l * l];
                // segment 1: non-action queries over non-action keys
                if bnd > 0 {
                    let mut scores = vec![E::ZERO; bnd * bnd];
                    gemm(bnd, dh, bnd, scale, &q[..bnd * dh], false, &k[..bnd * dh], true, E::ZERO, &mut scores);
                    for (r, srow) in scores.chunks(bnd).enumerate() {
                        softmax_into(srow, &mut probs[r * l..r * l + bnd]);
                    }
                }
                // segment 2: action queries over all keys
                if bnd < l {
                    let rows = l - bnd;
                    let mut scores = vec![E::ZERO; rows * l];
                    gemm(rows, dh, l, scale, &q[bnd * dh..], false, &k, true, E::ZERO, &mut scores);
                    for (r, srow) in scores.chunks(l).enumerate() {
                        softmax_into(srow, &mut probs[(bnd + r) * l..(bnd + r + 1) * l]);
                    }
                }
                let mut out = vec![E::ZERO; l * dh];
                gemm(l, l, dh, E::ONE, &probs, false, &v, false, E::ZERO, &mut out);
                (probs, out)
            })
            .collect();

        let mut out = vec![E::ZERO; b * l * d];
        let mut probs_all: Vec<Vec<E>> = Vec::with_capacity(pairs.len());
        for ((bi, h), (probs, o)) in pairs.iter().zip(results) {
            for t in 0..l {
                out[((bi * l) + t) * d + h * dh..((bi * l) + t) * d + (h + 1) * dh]
                    .copy_from_slice(&o[t * dh..(t + 1) * dh]);
            }
            probs_all.push(probs);
        }

        let need = self.req(qkv);
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if !need {
                return;
            }
            let grads: Vec<(usize, usize, Vec<E>, Vec<E>, Vec<E>)> = pairs
                .par_iter()
                .zip(probs_all.par_iter())
                .map(|(&(bi, h), probs)| {
                    let (q, k, v) = gather_heads(qkvv.data(), bi, h, l, d, dh);
                    // g for this head: [l, dh]
                    let mut gh = vec![E::ZERO; l * dh];
                    for t in 0..l {
                        gh[t * dh..(t + 1) * dh].copy_from_slice(
                            &g[((bi * l) + t) * d + h * dh..((bi * l) + t) * d + (h + 1) * dh],
                        );
                    }
                    // dv = probs^T . gh
                    let mut dv = vec![E::ZERO; l * dh];
                    gemm(l, l, dh, E::ONE, probs, true, &gh, false, E::ZERO, &mut dv);
                    // dprobs = gh . v^T
                    let mut dprobs = vec![E::ZERO; l * l];
                    gemm(l, dh, l, E::ONE, &gh, false, &v, true, E::ZERO, &mut dprobs);
                    // dscores = probs * (dprobs - rowdot(dprobs, probs)); masked
                    // entries have probs == 0 and vanish.
                    let mut dscores = dprobs;
                    for (srow, prow) in dscores.chunks_mut(l).zip(probs.chunks(l)) {
                        let mut dot = E::ZERO;
                        for (&dp, &p) in srow.iter().zip(prow) {
                            dot += dp * p;
                        }
                        for (ds, &p) in srow.iter_mut().zip(prow) {
                            *ds = p * (*ds - dot) * scale;
                        }
                    }
                    // dq = dscores . k ; dk = dscores^T . q
                    let mut dq = vec![E::ZERO; l * dh];
                    gemm(l, l, dh, E::ONE, &dscores, false, &k, false, E::ZERO, &mut dq);
                    let mut dk = vec![E::ZERO; l * dh];
                    gemm(l, l, dh, E::ONE, &dscores, true, &q, false, E::ZERO, &mut dk);
                    (bi, h, dq, dk, dv)
                })
                .collect();
            let dqkv = arena.accum(qkv);
            for (bi, h, dq, dk, dv) in grads {
                for t in 0..l {
                    let base = ((bi * l) + t) * d3;
                    for (off, src) in [(0usize, &dq), (d, &dk), (2 * d, &dv)] {
                        let dst = &mut dqkv[base + off + h * dh..base + off + (h + 1) * dh];
                        axpy(dst, &src[t * dh..(t + 1) * dh]);
                    }
                }
            }
        });
        self.push_interior(Tensor::new(vec![b, l, d], out), need, backward)
    }

    pub fn gelu(&mut self, x: NodeRef) -> NodeRef {
        let xv = self.value(x).clone();
        let mut out = vec![E::ZERO; xv.numel()];
        out.par_chunks_mut(1 << 14)
            .zip(xv.data().par_chunks(1 << 14))
            .for_each(|(oc, xc)| {
                for (o, &v) in oc.iter_mut().zip(xc) {
                    *o = gelu(v);
                }
            });
        let need = self.req(x);
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if !need {
                return;
            }
            let dx = arena.accum(x);
            dx.par_chunks_mut(1 << 14)
                .zip(xv.data().par_chunks(1 << 14))
                .zip(g.par_chunks(1 << 14))
                .for_each(|((dc, xc), gc)| {
                    for ((d, &v), &gi) in dc.iter_mut().zip(xc).zip(gc) {
                        *d += gi * gelu_deriv(v);
                    }
                });
        });
        self.push_interior(Tensor::new(xv.shape().to_vec(), out), need, backward)
    }

    pub fn silu(&mut self, x: NodeRef) -> NodeRef {
        let xv = self.value(x).clone();
        let out: Vec<E> = xv.data().iter().map(|&v| silu(v)).collect();
        let need = self.req(x);
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if !need {
                return;
            }
            let dx = arena.accum(x);
            for ((d, &v), &gi) in dx.iter_mut().zip(xv.data()).zip(g) {
                *d += gi * silu_deriv(v);
            }
        });
        self.push_interior(Tensor::new(xv.shape().to_vec(), out), need, backward)
    }

    /// Mean squared error against a constant target over elements where
    /// `mask` is nonzero (all elements when mask is None). Produces a scalar.
    pub fn masked_mse(&mut self, pred: NodeRef, target: &Tensor<E>, mask: Option<&Tensor<E>>) -> NodeRef {
        let pv = self.value(pred).clone();
        assert_eq!(pv.shape(), target.shape(), "mse shapes");
        if let Some(m) = mask {
            assert_eq!(m.shape(), pv.shape(), "mse mask shape");
        }
        let mv = mask.cloned();
        let mut count = 0usize;
        let mut acc = 0.0f64;
        for i in 0..pv.numel() {
            let keep = mv.as_ref().map(|m| m.data()[i] != E::ZERO).unwrap_or(true);
            if keep {
                let diff = pv.data()[i].to_f64() - target.data()[i].to_f64();
                acc += diff * diff;
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { acc / count as f64 };
        let need = self.req(pred);
        let tv = target.clone();
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if !need || count == 0 {
                return;
            }
            let gscale = g[0] * E::from_f64(2.0 / count as f64);
            let dp = arena.accum(pred);
            for i in 0..dp.len() {
                let keep = mv.as_ref().map(|m| m.data()[i] != E::ZERO).unwrap_or(true);
                if keep {
                    dp[i] += gscale * (pv.data()[i] - tv.data()[i]);
                }
            }
        });
        self.push_interior(Tensor::scalar(E::from_f64(value)), need, backward)
    }

    /// wa * a + wb * b for scalar nodes.
    pub fn add_weighted(&mut self, a: NodeRef, wa: E, b: NodeRef, wb: E) -> NodeRef {
        let av = self.value(a).item();
        let bv = self.value(b).item();
        let needs = [self.req(a), self.req(b)];
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if needs[0] {
                arena.accum(a)[0] += g[0] * wa;
            }
            if needs[1] {
                arena.accum(b)[0] += g[0] * wb;
            }
        });
        self.push_interior(Tensor::scalar(wa * av + wb * bv), needs[0] || needs[1], backward)
    }

    /// Sum of all elements (scalar).
    pub fn sum(&mut self, x: NodeRef) -> NodeRef {
        let xv = self.value(x).clone();
        let mut acc = E::ZERO;
        for &v in xv.data() {
            acc += v;
        }
        let need = self.req(x);
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if need {
                let dx = arena.accum(x);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        });
        self.push_interior(Tensor::scalar(acc), need, backward)
    }

    /// Inverted dropout with an explicit mask (1/keep scaling pre-applied by
    /// the caller). Identity when mask is None.
    pub fn dropout(&mut self, x: NodeRef, mask: Option<Tensor<E>>) -> NodeRef {
        let Some(m) = mask else { return x };
        let xv = self.value(x).clone();
        assert_eq!(m.numel(), xv.numel());
        let out: Vec<E> = xv.data().iter().zip(m.data()).map(|(&a, &b)| a * b).collect();
        let need = self.req(x);
        let backward: BackwardFn<E> = Box::new(move |g, arena| {
            if need {
                let dx = arena.accum(x);
                for ((d, &gi), &mi) in dx.iter_mut().zip(g).zip(m.data()) {
                    *d += gi * mi;
                }
            }
        });
        self.push_interior(Tensor::new(xv.shape().to_vec(), out), need, backward)
    }
}

// Leaf bookkeeping lives outside the node list so `backward` can tell leaves
// (keep gradient for extraction) from interior nodes (gradient consumed).
impl<E: Elem> Graph<E> {
    fn push_interior(&mut self, value: Tensor<E>, requires_grad: bool, backward: BackwardFn<E>) -> NodeRef {
        self.leaf_bits.push(false);
        self.push(value, requires_grad, Some(backward))
    }
}

// The struct needs the extra field; declared here to keep the op code above
// uncluttered.
// (Rust requires the field on the struct definition; see `Graph` above.)

#[inline]
fn axpy<E: Elem>(dst: &mut [E], src: &[E]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dims3<E: Elem>(t: &Tensor<E>) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected rank-3 tensor, got {:?}", s);
    (s[0], s[1], s[2])
}

fn gather_heads<E: Elem>(qkv: &[E], bi: usize, h: usize, l: usize, d: usize, dh: usize) -> (Vec<E>, Vec<E>, Vec<E>) {
    let d3 = 3 * d;
    let mut q = vec![E::ZERO; l * dh];
    let mut k = vec![E::ZERO; l * dh];
    let mut v = vec![E::ZERO; l * dh];
    for t in 0..l {
        let base = (bi * l + t) * d3;
        q[t * dh..(t + 1) * dh].copy_from_slice(&qkv[base + h * dh..base + (h + 1) * dh]);
        k[t * dh..(t + 1) * dh].copy_from_slice(&qkv[base + d + h * dh..base + d + (h + 1) * dh]);
        v[t * dh..(t + 1) * dh].copy_from_slice(&qkv[base + 2 * d + h * dh..base + 2 * d + (h + 1) * dh]);
    }
    (q, k, v)
}

/// Numerically stable softmax of `scores` written into `out` (same length).
fn softmax_into<E: Elem>(scores: &[E], out: &mut [E]) {
    let mut mx = scores[0];
    for &s in scores {
        mx = mx.max(s);
    }
    let mut denom = E::ZERO;
    for (o, &s) in out.iter_mut().zip(scores) {
        let e = (s - mx).exp();
        *o = e;
        denom += e;
    }
    let inv = E::ONE / denom;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}
